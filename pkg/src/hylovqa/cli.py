"""Command-line front end: ``hylovqa <subcommand> ...``.

Subcommands: gen-stream, train, eval, gradcheck, report and sweep. Exit code
0 means the command finished with every internal check satisfied; 1 signals
a failed check or a runtime error; 2 is a usage error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import checks
from . import config as config_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import ConfigError, HyloError, NumericDomainError, ShapeError
from .stream import generate_stream, load_stream, save_stream, split_novel_composition
from .trainer import ContinualLearner, StepLog, run_continual

log = logging.getLogger("hylovqa")

MATRIX_COLUMNS = ("split", "trained_through", "eval_task", "accuracy")
EVAL_COLUMNS = ("split", "task", "samples", "correct", "accuracy")
CAPACITY_COLUMNS = ("method", "k_v", "k_q", "runs", "ap_mean", "af_mean", "ap_std", "af_std")
MOMENTUM_COLUMNS = ("method", "alpha", "beta", "runs", "ap_mean", "af_mean")
_DIM_KEYS = ("d", "d_roi", "n_regions", "n_tokens", "num_answer_classes")


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in getattr(args, "set", None) or []:
        k, sep, v = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[k.strip()] = v.strip()
    return out


def _load_config(args) -> RunConfig:
    ov = _overrides(args)
    if args.config:
        cfg = config_mod.load(args.config, ov)
    else:
        cfg, _ = config_mod.parse_lines([f"{k} = {v}" for k, v in ov.items()], "--set")
        config_mod.validate(cfg)
    if args.seed is not None:
        cfg.with_seed(args.seed)
    return cfg


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_kv(path: Path, items) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in items))
    tmp.replace(path)


def read_kv(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        k, sep, v = line.partition(" = ")
        if sep:
            out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# gen-stream


def _stream_target(out: str | None, default_dir: str) -> Path:
    p = Path(out or default_dir)
    if p.is_dir() or p.suffix == "":
        p = p / "stream.bin"
    return p


def cmd_gen_stream(args) -> int:
    cfg = _load_config(args)
    stream = generate_stream(cfg.stream)
    path = save_stream(stream, _stream_target(args.out, cfg.out_dir))
    c = stream.counts()
    print(f"wrote {path}: {stream.num_tasks} tasks, {c['train']} train / {c['test']} test samples")
    return 0


# ---------------------------------------------------------------------------
# train


def _obtain_stream(cfg: RunConfig, path_override: str | None):
    path = path_override or cfg.stream_path
    if path:
        if not Path(path).exists():
            raise FileNotFoundError(f"stream file not found: {path}")
        return load_stream(path)
    return generate_stream(cfg.stream)


def _eval_sets(stream, heldout_group: int):
    if heldout_group < 0:
        return stream, {"standard": stream.test}
    train_stream, novel, seen = split_novel_composition(stream, heldout_group)
    return train_stream, {"standard": stream.test, "novel": novel, "seen": seen}


def _matrix_rows(name, mat):
    for i in range(mat.num_tasks):
        for j in range(i + 1):
            v = mat[i, j]
            yield (name, i, j, "" if np.isnan(v) else repr(float(v)))


def _write_step_log(path: Path, logs: list[StepLog]) -> None:
    _write_csv(path, StepLog.COLUMNS,
               ([_fmt(getattr(e, c)) for c in StepLog.COLUMNS] for e in logs))


def train_run(cfg: RunConfig, out_dir, stream_path: str | None = None) -> dict:
    """Train one configuration and write its run directory; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    stream = _obtain_stream(cfg, stream_path)
    cfg.stream = stream.config
    config_mod.validate(cfg)
    train_stream, sets = _eval_sets(stream, cfg.heldout_group)
    learner = ContinualLearner(stream.config, cfg.train)
    try:
        res = run_continual(train_stream, cfg.train, sets, learner=learner)
    except NumericDomainError:
        _write_step_log(out / "step_log.csv", learner.logs)
        raise
    wall = time.perf_counter() - t0
    save_checkpoint(learner, cfg, out / "checkpoint.bin")
    rows = [r for name, mat in res.matrices.items() for r in _matrix_rows(name, mat)]
    _write_csv(out / "accuracy_matrix.csv", MATRIX_COLUMNS, rows)
    _write_step_log(out / "step_log.csv", res.logs)
    final = res.matrix.row(res.matrix.num_tasks - 1)
    summary = [("ap", res.ap), ("af", res.af)]
    for name, (ap, af) in res.scores.items():
        if name != "standard":
            summary += [(f"ap_{name}", ap), (f"af_{name}", af)]
    summary += [("final_row", ";".join(repr(float(v)) for v in final)),
                ("steps", learner.opt.step), ("wall_clock_s", round(wall, 3))]
    summary += config_mod.to_items(cfg)
    _write_kv(out / "summary.txt", summary)
    return dict(summary)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = args.out or cfg.out_dir
    if args.heldout_group is not None:
        cfg.heldout_group = args.heldout_group
    s = train_run(cfg, out, args.stream)
    print(f"{cfg.train.method} seed={cfg.train.seed}: AP={s['ap']:.4f} AF={s['af']:.4f} "
          f"({s['wall_clock_s']}s) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def evaluate_split(learner: ContinualLearner, tasks) -> list[tuple[int, int, int]]:
    out = []
    for t, samples in enumerate(tasks):
        if not samples:
            out.append((t, 0, 0))
            continue
        acc = learner.evaluate(samples)
        out.append((t, len(samples), int(round(acc * len(samples)))))
    return out


def cmd_eval(args) -> int:
    learner, cfg = load_checkpoint(args.checkpoint)
    if not Path(args.stream).exists():
        raise FileNotFoundError(f"stream file not found: {args.stream}")
    stream = load_stream(args.stream)
    ck = tuple(getattr(cfg.stream, k) for k in _DIM_KEYS)
    st = tuple(getattr(stream.config, k) for k in _DIM_KEYS)
    if ck != st:
        names = ", ".join(_DIM_KEYS)
        raise ShapeError(f"checkpoint dimensions ({names}) = {ck} but stream has {st}")
    if args.split == "standard":
        tasks = stream.test
    else:
        g = args.heldout_group if args.heldout_group is not None else cfg.heldout_group
        if g < 0:
            raise ConfigError("--heldout-group is required for novel/seen splits "
                              "(the checkpoint was trained without one)")
        _, novel, seen = split_novel_composition(stream, g)
        tasks = novel if args.split == "novel" else seen
    if args.mode:
        learner.cfg.eval_mode = args.mode
    rows = evaluate_split(learner, tasks)
    out_rows = []
    for t, n, c in rows:
        acc = c / n if n else float("nan")
        print(f"{args.split} task {t}: {acc:.4f} ({c}/{n})")
        out_rows.append((args.split, t, n, c, repr(acc) if n else ""))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    _write_csv(out / f"eval_{args.split}.csv", EVAL_COLUMNS, out_rows)
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    seeds = [cfg.train.seed + i for i in range(args.seeds)]
    rows, secs = checks.timed_gradcheck(cfg.stream, cfg.train, seeds, max_coords=args.max_coords)
    worst = checks.summarize(rows)
    for name in checks.OBJECTIVES:
        e = worst[name]
        tag = "n/a" if np.isnan(e) else ("ok" if e < checks.TOLERANCE else "FAIL")
        print(f"{name:6s} max_rel_err = {e:.3e}  {tag}")
    print(f"{len(seeds)} seeds in {secs:.1f}s")
    if args.out:
        _write_csv(Path(args.out) / "gradcheck.csv", ("seed", "objective", "max_rel_err"),
                   ((r.seed, r.objective, "" if np.isnan(r.error) else repr(float(r.error))) for r in rows))
    return 0 if checks.passed(rows) else 1


# ---------------------------------------------------------------------------
# report


def collect_summaries(root) -> list[dict[str, str]]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"run directory not found: {root}")
    found = []
    for p in sorted(root.rglob("summary.txt")):
        try:
            s = read_kv(p)
        except OSError:  # a concurrent run replaced it mid-read
            continue
        if "ap" in s and "af" in s:
            s["_path"] = str(p.parent)
            found.append(s)
    if not found:
        raise ConfigError(f"no completed runs (summary.txt) under {root}")
    return found


def _num(s: str) -> float:
    return float(s)


def capacity_table(runs):
    groups = defaultdict(list)
    for s in runs:
        groups[(s.get("method", ""), int(s["bank.k_v"]), int(s["bank.k_q"]))].append(
            (_num(s["ap"]), _num(s["af"])))
    rows = []
    for (m, kv, kq) in sorted(groups, key=lambda k: (k[0], k[1] + k[2], k[1], k[2])):
        vals = np.array(groups[(m, kv, kq)])
        rows.append((m, kv, kq, len(vals), repr(float(vals[:, 0].mean())), repr(float(vals[:, 1].mean())),
                     repr(float(vals[:, 0].std())), repr(float(vals[:, 1].std()))))
    return rows


def momentum_table(runs):
    groups = defaultdict(list)
    for s in runs:
        groups[(s.get("method", ""), _num(s["bank.alpha"]), _num(s["bank.beta"]))].append(
            (_num(s["ap"]), _num(s["af"])))
    rows = []
    for key in sorted(groups):
        vals = np.array(groups[key])
        m, a, b = key
        rows.append((m, repr(a), repr(b), len(vals), repr(float(vals[:, 0].mean())),
                     repr(float(vals[:, 1].mean()))))
    return rows


def cmd_report(args) -> int:
    runs = collect_summaries(args.run_dir)
    out = Path(args.out) if args.out else Path(args.run_dir)
    cap, mom = capacity_table(runs), momentum_table(runs)
    _write_csv(out / "capacity.csv", CAPACITY_COLUMNS, cap)
    _write_csv(out / "momentum.csv", MOMENTUM_COLUMNS, mom)
    print(f"{len(runs)} runs -> {out / 'capacity.csv'} ({len(cap)} rows), "
          f"{out / 'momentum.csv'} ({len(mom)} rows)")
    return 0


# ---------------------------------------------------------------------------
# sweep


def _parse_grid(specs) -> list[tuple[list[str], list[str]]]:
    """``a.b=1,2`` sweeps one key; ``a.b+a.c=1,2`` ties several keys to one value."""
    grid = []
    for spec in specs:
        keys, sep, vals = spec.partition("=")
        if not sep or not vals:
            raise ConfigError(f"--grid expects key=v1,v2,..., got {spec!r}")
        grid.append(([k.strip() for k in keys.split("+")], [v.strip() for v in vals.split(",")]))
    return grid


def cmd_sweep(args) -> int:
    base_text = Path(args.config).read_text() if args.config else ""
    grid = _parse_grid(args.grid)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out or "runs/sweep")
    n = 0
    for combo in itertools.product(*[vals for _, vals in grid]):
        ov = _overrides(args)
        tag = []
        for (keys, _), v in zip(grid, combo):
            for k in keys:
                ov[k] = v
            tag.append(f"{keys[0].split('.')[-1]}={v}")
        for seed in seeds:
            cfg = config_mod.from_items(ov.items(), config_mod.parse_lines(base_text.splitlines())[0])
            cfg.with_seed(seed)
            config_mod.validate(cfg)
            run_dir = out / ("_".join(tag) or "base") / f"seed{seed}"
            s = train_run(cfg, run_dir, args.stream)
            print(f"{run_dir}: AP={s['ap']:.4f} AF={s['af']:.4f}")
            n += 1
    print(f"{n} runs under {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hylovqa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key = value configuration file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override one configuration key (repeatable)")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", help="output directory (gen-stream: file or directory)")

    sp = sub.add_parser("gen-stream", help="generate and save a synthetic task stream")
    common(sp)
    sp.set_defaults(func=cmd_gen_stream)

    sp = sub.add_parser("train", help="run one continual training job")
    common(sp)
    sp.add_argument("--stream", help="stream file (default: generate from the config)")
    sp.add_argument("--heldout-group", type=int, help="hold out one object group for novel-composition tests")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a stream split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--stream", required=True)
    sp.add_argument("--split", choices=("standard", "novel", "seen"), default="standard")
    sp.add_argument("--heldout-group", type=int)
    sp.add_argument("--mode", choices=("frozen", "adaptive"), help="override the evaluation mode")
    sp.add_argument("--config", help="ignored; the checkpoint carries its configuration")
    common(sp, config=False)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every objective")
    common(sp)
    sp.add_argument("--seeds", type=int, default=10, help="number of consecutive seeds")
    sp.add_argument("--max-coords", type=int, default=4, help="probed coordinates per tensor")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("report", help="aggregate run summaries into CSV tables")
    sp.add_argument("run_dir")
    sp.add_argument("--out", help="directory for the tables (default: run_dir)")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("sweep", help="train a grid of configurations over several seeds")
    common(sp)
    sp.add_argument("--grid", action="append", default=[], metavar="KEY[+KEY]=V1,V2",
                    help="swept key(s) and values (repeatable; combinations are crossed)")
    sp.add_argument("--seeds", default="0", help="comma-separated seeds")
    sp.add_argument("--stream", help="shared stream file")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (HyloError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
