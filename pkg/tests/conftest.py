import numpy as np
import pytest

from hylovqa.stream import StreamConfig, generate_stream


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return StreamConfig(num_tasks=3, num_object_groups=3, prototypes_per_group=2,
                        samples_per_task=12, test_samples_per_task=8, d=8, d_roi=16,
                        n_regions=4, n_tokens=3, seed=5)


@pytest.fixture(scope="session")
def small_stream(small_cfg):
    return generate_stream(small_cfg)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
