"""Synthetic continual task streams with (task x object-group) structure.

Every object prototype carries one discrete attribute per task. The RoI
vector of an object holds those attributes as one-hot blocks (block ``t``
occupies coordinates ``[t*C, (t+1)*C)``), followed by a group signature that
makes prototypes of the same group look alike. A task-``t`` question is a
noisy copy of that task's token prototype, and its answer is attribute ``t``
of the pictured object. Reading the right block therefore requires knowing
the task, which a static readout cannot do for all tasks at once.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import container
from .encoding import RegionFeature
from .errors import ConfigError, IntegrityError
from .seeding import rng_for

log = logging.getLogger(__name__)

_SIG_SPREAD = 0.5  # within-group spread of prototype signatures
_TOKEN_SPREAD = 0.5  # per-token deviation from the task vector


@dataclass
class StreamConfig:
    num_tasks: int = 5
    num_object_groups: int = 5
    prototypes_per_group: int = 4
    num_answer_classes: int = 4
    samples_per_task: int = 200
    test_samples_per_task: int | None = None  # None: half of samples_per_task
    noise_std: float = 0.1
    drift_std: float = 0.05
    label_smoothing: float = 0.0
    d: int = 32
    d_roi: int = 48
    n_regions: int = 12
    n_tokens: int = 8
    seed: int = 0

    @property
    def n_test(self) -> int:
        if self.test_samples_per_task is None:
            return self.samples_per_task // 2
        return self.test_samples_per_task

    def validate(self) -> "StreamConfig":
        def need(ok, key, msg):
            if not ok:
                raise ConfigError(f"stream.{key}: {msg}")

        need(self.num_tasks >= 1, "num_tasks", "must be >= 1")
        need(self.num_object_groups >= 1, "num_object_groups", "must be >= 1")
        need(self.prototypes_per_group >= 1, "prototypes_per_group", "must be >= 1")
        need(self.num_answer_classes >= 2, "num_answer_classes", "must be >= 2")
        need(self.samples_per_task >= 0, "samples_per_task", "must be >= 0")
        need(self.n_test >= 0, "test_samples_per_task", "must be >= 0")
        for key in ("noise_std", "drift_std"):
            v = getattr(self, key)
            need(math.isfinite(v) and v >= 0, key, "must be finite and >= 0")
        need(0.0 <= self.label_smoothing < 1.0, "label_smoothing", "must be in [0, 1)")
        for key in ("d", "d_roi", "n_regions", "n_tokens"):
            need(getattr(self, key) >= 1, key, "must be >= 1")
        need(self.num_tasks * self.num_answer_classes <= self.d_roi, "num_answer_classes",
             f"{self.num_tasks} tasks x {self.num_answer_classes} classes need "
             f"{self.num_tasks * self.num_answer_classes} roi coordinates, d_roi is {self.d_roi}")
        return self


@dataclass(eq=False)
class StreamSample:
    roi: np.ndarray          # (N, d_roi)
    bbox: np.ndarray         # (N, 4)
    question: np.ndarray     # (M, d)
    task_id: int
    group_id: int
    target: np.ndarray       # (C,)
    instance_id: int = -1
    prototype_id: int = -1

    @property
    def regions(self) -> list[RegionFeature]:
        return [RegionFeature(self.roi[j], self.bbox[j], j) for j in range(self.roi.shape[0])]

    @property
    def label(self) -> int:
        return int(np.argmax(self.target))


@dataclass
class TaskStream:
    config: StreamConfig
    train: list[list[StreamSample]]
    test: list[list[StreamSample]]
    heldout: frozenset = field(default_factory=frozenset)

    @property
    def num_tasks(self) -> int:
        return len(self.train)

    def counts(self) -> dict[str, int]:
        return {"train": sum(map(len, self.train)), "test": sum(map(len, self.test))}


def _target(label: int, c: int, smoothing: float) -> np.ndarray:
    if smoothing == 0.0:
        t = np.zeros(c)
        t[label] = 1.0
        return t
    t = np.full(c, smoothing / (c - 1))
    t[label] = 1.0 - smoothing
    return t


def _random_boxes(rng, n):
    xy = rng.uniform(0.0, 1.0, size=(n, 2, 2))
    lo, hi = xy.min(axis=1), xy.max(axis=1)
    return np.column_stack([lo[:, 0], lo[:, 1], hi[:, 0], hi[:, 1]])


def generate_stream(cfg: StreamConfig) -> TaskStream:
    cfg.validate()
    rng = rng_for(cfg.seed, "stream")
    T, G, P, C = cfg.num_tasks, cfg.num_object_groups, cfg.prototypes_per_group, cfg.num_answer_classes
    sig_dim = cfg.d_roi - T * C

    centers = rng.normal(0.0, 1.0, size=(G, sig_dim))
    attrs = rng.integers(0, C, size=(G * P, T))
    protos = np.zeros((G * P, cfg.d_roi))
    for k in range(G * P):
        for t in range(T):
            protos[k, t * C + attrs[k, t]] = 1.0
        protos[k, T * C:] = centers[k // P] + _SIG_SPREAD * rng.normal(size=sig_dim)
    task_vecs = rng.normal(0.0, 1.0, size=(T, 1, cfg.d))
    questions = task_vecs + _TOKEN_SPREAD * rng.normal(size=(T, cfg.n_tokens, cfg.d))

    next_id = 0

    def draw(t, n):
        nonlocal next_id
        out = []
        for _ in range(n):
            k = int(rng.integers(0, G * P))
            roi = protos[k] + cfg.noise_std * rng.normal(size=(cfg.n_regions, cfg.d_roi))
            q = questions[t] + cfg.noise_std * rng.normal(size=(cfg.n_tokens, cfg.d))
            out.append(StreamSample(
                roi=roi, bbox=_random_boxes(rng, cfg.n_regions), question=q,
                task_id=t, group_id=k // P,
                target=_target(int(attrs[k, t]), C, cfg.label_smoothing),
                instance_id=next_id, prototype_id=k))
            next_id += 1
        return out

    train, test = [], []
    for t in range(T):
        if t > 0 and cfg.drift_std > 0:
            protos = protos + cfg.drift_std * rng.normal(size=protos.shape)
            questions = questions + cfg.drift_std * rng.normal(size=questions.shape)
        train.append(draw(t, cfg.samples_per_task))
        test.append(draw(t, cfg.n_test))
    return TaskStream(cfg, train, test)


def oracle_reader(sample: StreamSample, num_answer_classes: int) -> int:
    """Reads attribute block ``task_id`` off the mean RoI vector."""
    c = num_answer_classes
    block = sample.roi.mean(axis=0)[sample.task_id * c:(sample.task_id + 1) * c]
    return int(np.argmax(block))


def split_novel_composition(stream: TaskStream, heldout_group: int):
    """Hold out one object group from training.

    Returns ``(train_stream, novel_test, seen_test)``: ``train_stream`` drops
    every training sample of ``heldout_group`` and records the held-out
    (task, group) pairs; the two test lists partition ``stream.test`` by group.
    """
    G = stream.config.num_object_groups
    if not 0 <= heldout_group < G:
        raise IndexError(f"heldout_group {heldout_group} outside [0, {G})")
    if G == 1:
        log.warning("holding out the only object group leaves an empty training set")
    table = frozenset((t, heldout_group) for t in range(stream.num_tasks))
    train = [[s for s in task if s.group_id != heldout_group] for task in stream.train]
    novel = [[s for s in task if s.group_id == heldout_group] for task in stream.test]
    seen = [[s for s in task if s.group_id != heldout_group] for task in stream.test]
    return TaskStream(stream.config, train, stream.test, table), novel, seen


# ---------------------------------------------------------------------------
# persistence

_CONFIG_KEYS = [f.name for f in fields(StreamConfig)]


def _stack(samples, attr, cols):
    if not samples:
        return np.zeros((0, cols))
    return np.vstack([getattr(s, attr) for s in samples])


def save_stream(stream: TaskStream, path) -> Path:
    """Write a stream file.

    Arrays, per split ``s`` in (train, test) and task ``t``:
    ``s.t.roi`` (n*N x d_roi), ``s.t.bbox`` (n*N x 4), ``s.t.question``
    (n*M x d), ``s.t.target`` (n x C) and ``s.t.meta`` (n x 4 holding
    task_id, group_id, instance_id, prototype_id as exact float64 integers).
    """
    cfg = stream.config
    meta = {f"config.{k}": repr(v) for k, v in asdict(cfg).items()}
    counts = stream.counts()
    meta["count.train"] = str(counts["train"])
    meta["count.test"] = str(counts["test"])
    meta["num_tasks"] = str(stream.num_tasks)
    meta["heldout"] = ";".join(f"{t},{g}" for t, g in sorted(stream.heldout))
    arrays = {}
    for split in ("train", "test"):
        for t, task in enumerate(getattr(stream, split)):
            p = f"{split}.{t}"
            arrays[f"{p}.roi"] = _stack(task, "roi", cfg.d_roi)
            arrays[f"{p}.bbox"] = _stack(task, "bbox", 4)
            arrays[f"{p}.question"] = _stack(task, "question", cfg.d)
            arrays[f"{p}.target"] = (np.vstack([s.target for s in task]) if task
                                     else np.zeros((0, cfg.num_answer_classes)))
            arrays[f"{p}.meta"] = np.array(
                [[s.task_id, s.group_id, s.instance_id, s.prototype_id] for s in task],
                dtype=np.float64).reshape(-1, 4)
    return container.write(path, arrays, meta, kind="stream")


def _parse_config(meta) -> StreamConfig:
    import ast

    kw = {}
    for k in _CONFIG_KEYS:
        key = f"config.{k}"
        if key not in meta:
            raise IntegrityError(f"stream header lacks {key}")
        kw[k] = ast.literal_eval(meta[key])
    return StreamConfig(**kw)


def load_stream(path) -> TaskStream:
    meta, arrays = container.read(path, expect_kind="stream")
    cfg = _parse_config(meta)
    T = int(meta["num_tasks"])
    N, M = cfg.n_regions, cfg.n_tokens
    splits = {}
    for split in ("train", "test"):
        tasks = []
        for t in range(T):
            p = f"{split}.{t}"
            info = arrays[f"{p}.meta"]
            roi, bbox = arrays[f"{p}.roi"], arrays[f"{p}.bbox"]
            q, tgt = arrays[f"{p}.question"], arrays[f"{p}.target"]
            n = info.shape[0]
            if roi.shape[0] != n * N or q.shape[0] != n * M or tgt.shape[0] != n:
                raise IntegrityError(f"{p}: array row counts disagree with {n} samples")
            tasks.append([
                StreamSample(roi=roi[i * N:(i + 1) * N], bbox=bbox[i * N:(i + 1) * N],
                             question=q[i * M:(i + 1) * M], task_id=int(info[i, 0]),
                             group_id=int(info[i, 1]), target=tgt[i],
                             instance_id=int(info[i, 2]), prototype_id=int(info[i, 3]))
                for i in range(n)])
        splits[split] = tasks
    held = frozenset(tuple(int(x) for x in item.split(",")) for item in meta.get("heldout", "").split(";")
                     if item)
    return TaskStream(cfg, splits["train"], splits["test"], held)
