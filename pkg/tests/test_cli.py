import hashlib
import itertools

import numpy as np
import pytest

from hylovqa import cli
from hylovqa import diffcore as dc
from hylovqa.checkpoint import load_checkpoint
from hylovqa.stream import StreamConfig, generate_stream, load_stream

SMALL = ("stream.num_tasks = 3\nstream.samples_per_task = 24\nstream.test_samples_per_task = 16\n"
         "stream.d = 8\nstream.d_roi = 20\nstream.n_regions = 4\nstream.n_tokens = 3\n"
         "bank.k_v = 4\nbank.k_q = 4\nmodel.hidden = 8\n")


def sha(p):
    return hashlib.sha256(p.read_bytes()).hexdigest()


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


@pytest.fixture
def trained(tmp_path, small):
    s = tmp_path / "s.bin"
    assert cli.main(["gen-stream", "--config", str(small), "--out", str(s)]) == 0
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(small), "--stream", str(s), "--out", str(run)]) == 0
    return s, run


def test_gen_stream_default_round_trip(tmp_path, capsys):
    out = tmp_path / "d.bin"
    assert cli.main(["gen-stream", "--out", str(out)]) == 0
    assert "1000 train / 500 test" in capsys.readouterr().out
    back, ref = load_stream(out), generate_stream(StreamConfig())
    for a, b in zip(back.train[3], ref.train[3]):
        assert a.roi.tobytes() == b.roi.tobytes() and a.question.tobytes() == b.question.tobytes()


def test_gen_stream_empty_and_deterministic(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    assert cli.main(["gen-stream", "--set", "stream.samples_per_task=0", "--out", str(a)]) == 0
    assert load_stream(a).counts() == {"train": 0, "test": 0}
    for p in (a, b):
        assert cli.main(["gen-stream", "--seed", "3", "--set", "stream.samples_per_task=10",
                         "--out", str(p)]) == 0
    assert sha(a) == sha(b)


def test_gen_stream_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("stream.noise_std = -1\n")
    assert cli.main(["gen-stream", "--config", str(bad), "--out", str(tmp_path / "x.bin")]) == 1
    assert "bad.cfg:1: stream.noise_std" in capsys.readouterr().err


def test_train_outputs(trained):
    _, run = trained
    for name in ("checkpoint.bin", "accuracy_matrix.csv", "step_log.csv", "summary.txt"):
        assert (run / name).exists()
    s = cli.read_kv(run / "summary.txt")
    assert {"ap", "af", "wall_clock_s", "method", "bank.k_v", "final_row"} <= set(s)
    rows = (run / "accuracy_matrix.csv").read_text().splitlines()
    assert rows[0] == "split,trained_through,eval_task,accuracy" and len(rows) == 1 + 6
    steps = (run / "step_log.csv").read_text().splitlines()
    assert steps[0].split(",")[:3] == ["step", "task", "index"] and len(steps) == 1 + 72


def test_train_rerun_identical_and_methods_comparable(tmp_path, trained, small):
    s, run = trained
    again = tmp_path / "again"
    van = tmp_path / "van"
    cli.main(["train", "--config", str(small), "--stream", str(s), "--out", str(again)])
    cli.main(["train", "--config", str(small), "--stream", str(s), "--out", str(van), "--set", "method=vanilla"])
    a, b, v = (cli.read_kv(p / "summary.txt") for p in (run, again, van))
    a.pop("wall_clock_s"), b.pop("wall_clock_s")
    assert a == b
    assert v["method"] == "vanilla" and 0 <= float(v["ap"]) <= 1
    assert sha(run / "checkpoint.bin") == sha(again / "checkpoint.bin")


def test_train_missing_stream(tmp_path, capsys):
    assert cli.main(["train", "--stream", str(tmp_path / "none.bin"), "--out", str(tmp_path / "r")]) == 1
    assert "stream file not found" in capsys.readouterr().err


def test_checkpoint_round_trip_bitwise(trained, tmp_path):
    s, run = trained
    learner, cfg = load_checkpoint(run / "checkpoint.bin")
    from hylovqa.checkpoint import save_checkpoint
    save_checkpoint(learner, cfg, tmp_path / "again.bin")
    assert sha(tmp_path / "again.bin") == sha(run / "checkpoint.bin")


def test_eval_reproduces_final_row(trained, capsys):
    s, run = trained
    assert cli.main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--stream", str(s)]) == 0
    got = [line.split(",") for line in (run / "eval_standard.csv").read_text().splitlines()[1:]]
    final = cli.read_kv(run / "summary.txt")["final_row"].split(";")
    assert [row[4] for row in got] == final


def test_eval_novel_seen_partition(trained):
    s, run = trained
    counts = {}
    for split in ("novel", "seen", "standard"):
        assert cli.main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--stream", str(s),
                         "--split", split, "--heldout-group", "1"]) == 0
        rows = (run / f"eval_{split}.csv").read_text().splitlines()[1:]
        counts[split] = [int(r.split(",")[2]) for r in rows]
    assert [a + b for a, b in zip(counts["novel"], counts["seen"])] == counts["standard"]


def test_eval_novel_needs_group(trained, capsys):
    s, run = trained
    assert cli.main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--stream", str(s),
                     "--split", "novel"]) == 1
    assert "--heldout-group" in capsys.readouterr().err


def test_eval_truncated_checkpoint(trained, tmp_path, capsys):
    s, run = trained
    bad = tmp_path / "bad.bin"
    bad.write_bytes((run / "checkpoint.bin").read_bytes()[:-64])
    out = tmp_path / "evalout"
    assert cli.main(["eval", "--checkpoint", str(bad), "--stream", str(s), "--out", str(out)]) == 1
    assert "truncated" in capsys.readouterr().err
    assert not out.exists()


def test_eval_dimension_mismatch(trained, tmp_path, capsys):
    _, run = trained
    other = tmp_path / "other.bin"
    cli.main(["gen-stream", "--set", "stream.samples_per_task=4", "--out", str(other)])
    assert cli.main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--stream", str(other)]) == 1
    err = capsys.readouterr().err
    assert "(8, 20, 4, 3, 4)" in err and "(32, 48, 12, 8, 4)" in err


def test_train_with_heldout_group(tmp_path, small):
    run = tmp_path / "held"
    assert cli.main(["train", "--config", str(small), "--heldout-group", "0", "--out", str(run)]) == 0
    s = cli.read_kv(run / "summary.txt")
    assert "ap_novel" in s and "ap_seen" in s and s["heldout_group"] == "0"
    splits = {line.split(",")[0] for line in (run / "accuracy_matrix.csv").read_text().splitlines()[1:]}
    assert splits == {"standard", "novel", "seen"}


def test_gradcheck_passes(small, capsys):
    assert cli.main(["gradcheck", "--config", str(small), "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert out.count(" ok") == 4


def test_gradcheck_lambda_zero(small):
    assert cli.main(["gradcheck", "--config", str(small), "--seeds", "2", "--set", "model.lam=0"]) == 0


def test_gradcheck_detects_corrupted_rule(small, monkeypatch, capsys):
    def bad_tanh(a):
        y = np.tanh(a.data)
        return dc._node(y, (a,), "tanh", lambda g: dc._accum(a, g * (1.0 - y)))

    monkeypatch.setattr(dc, "tanh", bad_tanh)
    assert cli.main(["gradcheck", "--config", str(small), "--seeds", "1"]) == 1
    assert "FAIL" in capsys.readouterr().out


def _fake_run(root, name, **kv):
    d = root / name
    d.mkdir(parents=True)
    base = {"ap": 0.5, "af": 0.1, "method": "hylovqa", "bank.k_v": 32, "bank.k_q": 32,
            "bank.alpha": 0.9, "bank.beta": 0.5}
    base.update(kv)
    (d / "summary.txt").write_text("".join(f"{k} = {v}\n" for k, v in base.items()))


def test_report_capacity_table(tmp_path):
    for i, k in enumerate([32, 2, 16, 8, 4]):
        _fake_run(tmp_path, f"k{k}", **{"bank.k_v": k, "bank.k_q": k, "ap": 0.4 + 0.01 * i})
    assert cli.main(["report", str(tmp_path)]) == 0
    rows = (tmp_path / "capacity.csv").read_text().splitlines()
    assert rows[0] == ",".join(cli.CAPACITY_COLUMNS)
    assert [int(r.split(",")[1]) for r in rows[1:]] == [2, 4, 8, 16, 32]


def test_report_momentum_grid_and_idempotence(tmp_path):
    grid = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    for a, b in itertools.product(grid, grid):
        _fake_run(tmp_path / "runs", f"a{a}_b{b}", **{"bank.alpha": a, "bank.beta": b, "ap": a * b})
    out = tmp_path / "tables"
    assert cli.main(["report", str(tmp_path / "runs"), "--out", str(out)]) == 0
    rows = (out / "momentum.csv").read_text().splitlines()
    assert len(rows) == 1 + 36
    h1 = (sha(out / "momentum.csv"), sha(out / "capacity.csv"))
    assert cli.main(["report", str(tmp_path / "runs"), "--out", str(out)]) == 0
    assert (sha(out / "momentum.csv"), sha(out / "capacity.csv")) == h1


def test_report_empty_dir(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path)]) == 1
    assert "no completed runs" in capsys.readouterr().err


def test_sweep_driver(tmp_path, small):
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", str(small), "--grid", "bank.k_v+bank.k_q=2,4",
                     "--seeds", "0,1", "--out", str(out)]) == 0
    assert len(list(out.rglob("summary.txt"))) == 4
    assert cli.main(["report", str(out)]) == 0
    rows = (out / "capacity.csv").read_text().splitlines()[1:]
    assert [(r.split(",")[1], r.split(",")[3]) for r in rows] == [("2", "2"), ("4", "2")]


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--bogus"])
    assert e.value.code == 2
