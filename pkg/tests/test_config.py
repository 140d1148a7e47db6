import pytest

from hylovqa import config as C
from hylovqa.errors import ConfigError
from hylovqa.trainer import PUBLISHED_LR


def write(tmp_path, text):
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return p


def test_parse_dotted_keys_and_comments(tmp_path):
    p = write(tmp_path, "# header\nseed = 7\nmethod = vanilla  # trailing\n\nbank.k_v = 8\n"
                        "optim.lr = 2e-3\nmodel.use_context = false\nstream.test_samples_per_task = none\n")
    cfg = C.load(p)
    assert cfg.train.seed == 7 and cfg.stream.seed == 7
    assert cfg.train.method == "vanilla" and cfg.train.bank.k_v == 8
    assert cfg.train.optim.lr == 2e-3 and cfg.train.model.use_context is False
    assert cfg.stream.test_samples_per_task is None


def test_validation_error_reports_key_and_line(tmp_path):
    p = write(tmp_path, "seed = 1\n\nbank.alpha = 1.5\nbank.beta = 2\n")
    with pytest.raises(ConfigError, match=r"run.cfg:3: bank.alpha"):
        C.load(p)
    p = write(tmp_path, "stream.num_tasks = 0\n")
    with pytest.raises(ConfigError, match=r":1: stream.num_tasks"):
        C.load(p)
    p = write(tmp_path, "model.rank = 99\n")
    with pytest.raises(ConfigError, match=r":1: model.rank"):
        C.load(p)


@pytest.mark.parametrize("text,pattern", [
    ("bank.nope = 1\n", r":1: bank.nope: unknown key"),
    ("seed = 1\nseed = 2\n", r":2: seed: duplicate"),
    ("bank.k_v = eight\n", r":1: bank.k_v"),
    ("just words\n", r":1: expected 'key = value'"),
    ("optim.lr = nan\n", r":1: optim.lr"),
    ("preset = huge\n", r":1: preset"),
    ("method = other\n", r":1: method"),
])
def test_parse_errors(tmp_path, text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        C.load(write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        C.load(tmp_path / "absent.cfg")


def test_presets(tmp_path):
    cfg = C.load(write(tmp_path, "preset = published\n"))
    assert cfg.train.optim.lr == PUBLISHED_LR and cfg.stream.n_regions == 36
    cfg = C.load(write(tmp_path, "preset = published\noptim.lr = 1e-4\n"))
    assert cfg.train.optim.lr == 1e-4
    assert C.default().train.optim.lr == 1e-3


def test_overrides_and_seed_sync(tmp_path):
    cfg = C.load(write(tmp_path, "seed = 1\n"), {"seed": "4", "bank.k_q": "3"})
    assert cfg.train.seed == 4 and cfg.stream.seed == 4 and cfg.train.bank.k_q == 3


def test_items_round_trip():
    cfg = C.default()
    cfg.train.bank.alpha = 0.35
    cfg.train.loss.gamma_mem = 1 / 3
    back = C.from_items(C.to_items(cfg))
    assert C.to_items(back) == C.to_items(cfg)
    assert back.train.loss.gamma_mem == 1 / 3


def test_to_text_is_loadable(tmp_path):
    cfg = C.default()
    cfg.train.method = "dma_only"
    p = write(tmp_path, C.to_text(cfg))
    assert C.to_items(C.load(p)) == C.to_items(cfg)
