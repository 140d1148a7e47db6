"""Checkpoint files: model tensors, anchor bank and the full run configuration."""
from __future__ import annotations

from pathlib import Path

from . import config as config_mod
from . import container
from .anchorbank import AnchorBank
from .config import RunConfig
from .errors import IntegrityError
from .trainer import ContinualLearner

KIND = "checkpoint"


def save_checkpoint(learner: ContinualLearner, run_cfg: RunConfig, path) -> Path:
    arrays = dict(learner.model.state_arrays())
    if learner.bank is not None:
        arrays.update(learner.bank.state_arrays("bank"))
    meta = {f"config.{k}": v for k, v in config_mod.to_items(run_cfg)}
    meta["optimizer_steps"] = str(learner.opt.step)
    meta["has_bank"] = str(learner.bank is not None)
    return container.write(path, arrays, meta, kind=KIND)


def load_checkpoint(path) -> tuple[ContinualLearner, RunConfig]:
    meta, arrays = container.read(path, expect_kind=KIND)
    items = [(k[len("config."):], v) for k, v in meta.items() if k.startswith("config.")]
    try:
        run_cfg = config_mod.validate(config_mod.from_items(items))
    except (KeyError, ValueError) as e:
        raise IntegrityError(f"{path}: unreadable configuration in header: {e}") from None
    learner = ContinualLearner(run_cfg.stream, run_cfg.train)
    learner.model.load_arrays(arrays)
    if meta.get("has_bank") == "True":
        learner.bank = AnchorBank.from_arrays(arrays, "bank", adaptive=learner.cfg.bank.adaptive)
    elif learner.bank is not None:
        raise IntegrityError(f"{path}: configuration expects an anchor bank, none stored")
    learner.opt.step = int(meta.get("optimizer_steps", 0))
    return learner, run_cfg
