"""Finite-difference verification of the training objectives."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc
from .seeding import rng_for
from .stream import StreamConfig, generate_stream
from .trainer import ContinualLearner, TrainConfig

OBJECTIVES = ("ce", "mem", "align", "total")
TOLERANCE = 1e-4
B_HEAD_STD = 0.05  # B heads start at zero; nudge them so every factor path carries gradient


@dataclass
class GradcheckRow:
    seed: int
    objective: str
    error: float  # nan when the objective does not exist for the method


def gradcheck_instance(stream_cfg: StreamConfig, cfg: TrainConfig, seed: int):
    """A learner, a primed anchor bank and one probe sample, deterministic in ``seed``."""
    scfg = replace(stream_cfg, samples_per_task=2, test_samples_per_task=0, seed=seed)
    stream = generate_stream(scfg)
    prime = stream.train[0][0]
    probe = stream.train[-1][-1]
    learner = ContinualLearner(scfg, replace(cfg, seed=seed))
    rng = rng_for(seed, "gradcheck")
    for (x, role), (w, b) in learner.model.heads.items():
        if role == "B":
            w.data += rng.normal(0.0, B_HEAD_STD, size=w.shape)
            b.data += rng.normal(0.0, B_HEAD_STD, size=b.shape)
    if learner.bank is not None:
        with dc.no_grad():
            learner.forward(prime, learner.bank, update=True)
    return learner, probe


def run_gradcheck(stream_cfg: StreamConfig, cfg: TrainConfig, seeds, *, eps: float = 1e-5,
                  max_coords: int | None = 4) -> list[GradcheckRow]:
    rows = []
    for seed in seeds:
        learner, probe = gradcheck_instance(stream_cfg, cfg, seed)
        params = list(learner.params.values())
        avail = learner.objective(probe, learner.bank, force=True)
        for k, name in enumerate(OBJECTIVES):
            if avail[name] is None:
                rows.append(GradcheckRow(seed, name, float("nan")))
                continue

            def f(name=name):
                return learner.objective(probe, learner.bank, force=True)[name]

            err = dc.grad_check(f, params, eps, max_coords=max_coords,
                                rng=rng_for(seed, f"gradcheck.{name}"))
            rows.append(GradcheckRow(seed, name, err))
    return rows


def summarize(rows: list[GradcheckRow]) -> dict[str, float]:
    out = {}
    for name in OBJECTIVES:
        errs = [r.error for r in rows if r.objective == name and not np.isnan(r.error)]
        out[name] = max(errs) if errs else float("nan")
    return out


def passed(rows: list[GradcheckRow], tol: float = TOLERANCE) -> bool:
    errs = [r.error for r in rows if not np.isnan(r.error)]
    return bool(errs) and max(errs) < tol


def timed_gradcheck(stream_cfg, cfg, seeds, **kw):
    t0 = time.perf_counter()
    rows = run_gradcheck(stream_cfg, cfg, seeds, **kw)
    return rows, time.perf_counter() - t0
