"""Continual training loop, optimizer machinery, evaluation and AP/AF."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .anchorbank import AnchorBank, memory_loss
from .diffcore import Tensor
from .errors import ConfigError, ContractError, EmptyInputError, NumericDomainError, StateError
from .hyperlora import FusionModel, ModelConfig, ce_loss, fused_forward, generate_lora, prepend_context
from .seeding import rng_for
from .sfalign import align_loss, functional_distance, semantic_distance, total_loss, vectorize_factors
from .stream import StreamConfig, StreamSample, TaskStream

log = logging.getLogger(__name__)

METHODS = ("hylovqa", "dma_hygen", "dma_only", "vanilla")
PUBLISHED_LR = 3e-5


@dataclass
class BankConfig:
    k_v: int = 32
    k_q: int = 32
    alpha: float = 0.9
    beta: float = 0.5
    adaptive: bool = False


@dataclass
class LossConfig:
    gamma_mem: float = 0.1
    gamma_align: float = 10.0


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float = 5.0
    warmup_ratio: float = 0.1
    epochs_per_task: int = 1


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    method: str = "hylovqa"
    eval_mode: str = "frozen"
    seed: int = 0

    def resolved(self) -> "TrainConfig":
        """Copy with the method's switches applied to model and loss settings."""
        if self.method not in METHODS:
            raise ConfigError(f"method: unknown {self.method!r}, expected one of {METHODS}")
        if self.eval_mode not in ("frozen", "adaptive"):
            raise ConfigError(f"eval_mode: expected 'frozen' or 'adaptive', got {self.eval_mode!r}")
        m, lo = self.model, self.loss
        if self.method == "dma_hygen":
            lo = replace(lo, gamma_align=0.0)
        elif self.method == "dma_only":
            m = replace(m, use_hypernet=False)
            lo = replace(lo, gamma_align=0.0)
        elif self.method == "vanilla":
            m = replace(m, use_hypernet=False, use_context=False, freeze_base=False)
            lo = replace(lo, gamma_mem=0.0, gamma_align=0.0)
        return replace(self, model=m, loss=lo)

    @property
    def uses_bank(self) -> bool:
        return self.method != "vanilla"


# ---------------------------------------------------------------------------
# optimizer


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warmup from 0 to ``base_lr`` over ``warmup_ratio * total_steps`` steps."""
    if total_steps <= 0:
        raise ConfigError("lr_schedule: total_steps must be positive")
    if not 0.0 <= warmup_ratio < 1.0:
        raise ConfigError("lr_schedule: warmup_ratio must be in [0, 1)")
    warm = warmup_ratio * total_steps
    if step >= warm:
        return base_lr
    return base_lr * step / warm


def global_norm(grads) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    if max_norm <= 0:
        raise ConfigError("max_grad_norm must be positive")
    g = global_norm(grads)
    if g > max_norm:
        s = max_norm / g
        grads = {k: v * s for k, v in grads.items()}
    return grads, g


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor], cfg: OptimConfig | None = None) -> "OptimizerState":
        cfg = cfg or OptimConfig()
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()},
                   0, cfg.beta1, cfg.beta2, cfg.eps)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float) -> dict[str, Tensor]:
    """One bias-corrected Adam update, in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericDomainError(f"non-finite gradient for {k}; step aborted")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[k].data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# metrics


class AccuracyMatrix:
    """``a[i, j]``: accuracy on task j after training through task i (j <= i)."""

    def __init__(self, num_tasks: int):
        self.a = np.full((num_tasks, num_tasks), np.nan)

    @classmethod
    def from_array(cls, arr) -> "AccuracyMatrix":
        arr = np.asarray(arr, dtype=np.float64)
        out = cls(arr.shape[0])
        out.a = arr.copy()
        return out

    @property
    def num_tasks(self) -> int:
        return self.a.shape[0]

    def __setitem__(self, ij, value):
        i, j = ij
        if j > i:
            raise ContractError(f"cell ({i}, {j}) lies above the diagonal")
        if not 0.0 <= value <= 1.0:
            raise ContractError(f"accuracy {value} outside [0, 1]")
        self.a[i, j] = value

    def __getitem__(self, ij):
        return self.a[ij]

    def row(self, i) -> np.ndarray:
        return self.a[i, :i + 1]


def compute_ap_af(a) -> tuple[float, float]:
    mat = a.a if isinstance(a, AccuracyMatrix) else np.asarray(a, dtype=np.float64)
    T = mat.shape[0]
    low = np.tril_indices(T)
    if np.any(np.isnan(mat[low])):
        raise ContractError("accuracy matrix has unset cells in its lower triangle")
    ap = float(mat[T - 1].mean())
    if T == 1:
        return ap, 0.0
    drops = [max(0.0, float(np.max(mat[j:T - 1, j] - mat[T - 1, j]))) for j in range(T - 1)]
    return ap, float(sum(drops) / (T - 1))


# ---------------------------------------------------------------------------
# training


@dataclass
class StepLog:
    step: int
    task: int
    index: int
    lr: float
    total: float
    ce: float
    mem: float
    align: float
    d_sem: float
    d_func: float
    grad_norm: float

    COLUMNS = ("step", "task", "index", "lr", "total", "ce", "mem", "align",
               "d_sem", "d_func", "grad_norm")


class ContinualLearner:
    """Model, anchor bank and optimizer state for one continual run."""

    def __init__(self, stream_cfg: StreamConfig, cfg: TrainConfig):
        self.raw_cfg = cfg
        self.cfg = cfg.resolved()
        self.stream_cfg = stream_cfg
        rng = rng_for(cfg.seed, "model")
        self.model = FusionModel(stream_cfg.d, stream_cfg.d_roi, stream_cfg.n_regions,
                                 stream_cfg.num_answer_classes, self.cfg.model, rng)
        b = self.cfg.bank
        self.bank = AnchorBank(stream_cfg.d, b.k_v, b.k_q, b.alpha, b.beta, b.adaptive) \
            if self.cfg.uses_bank else None
        self.params = self.model.parameters()
        self.opt = OptimizerState.for_params(self.params, self.cfg.optim)
        self.total_steps = 0
        self.logs: list[StepLog] = []

    # -- per-sample pipeline ---------------------------------------------------

    def _context(self, bank: AnchorBank | None, f_v, f_q, update: bool):
        if bank is None:
            return None, None
        if update:
            bank.init_or_insert(f_v.data, f_q.data)
        r = bank.retrieve(f_v.data, f_q.data)
        if update:
            bank.momentum_update(r, f_v.data, f_q.data)
        return r, bank.anchors(r)

    def forward(self, s: StreamSample, bank: AnchorBank | None, update: bool):
        m, mc = self.model, self.cfg.model
        V, Q, f_v, f_q = m.encode(s.roi, s.bbox, s.question)
        r, anchors = self._context(bank, f_v, f_q, update)
        factors, z_inst = None, None
        if anchors is not None:
            z_inst = np.concatenate(anchors).reshape(-1, 1)
            if mc.use_context:
                Q, V = prepend_context(Q, V, anchors[0], anchors[1], m.W_g)
            if mc.use_hypernet:
                factors = generate_lora(m, z_inst)
        _, pi = fused_forward(m, Q, V, factors)
        return dict(f_v=f_v, f_q=f_q, r=r, z_inst=z_inst, factors=factors, pi=pi)

    def losses(self, s: StreamSample, out: dict, bank: AnchorBank | None, force: bool = False) -> dict:
        """Loss terms; terms with zero weight are skipped unless ``force``."""
        lc = self.cfg.loss
        l_ce = ce_loss(out["pi"], s.target)
        l_mem = l_align = d_sem = d_func = None
        if bank is not None and (force or lc.gamma_mem > 0):
            l_mem = memory_loss(out["f_v"], out["f_q"], bank, out["r"])
        if out["factors"] is not None and (force or lc.gamma_align > 0):
            z_raw = dc.concat(out["f_v"], out["f_q"])
            theta_raw = vectorize_factors(generate_lora(self.model, z_raw))
            theta_inst = vectorize_factors(out["factors"])
            d_sem = semantic_distance(Tensor(out["z_inst"]), z_raw)
            d_func = functional_distance(theta_inst, theta_raw)
            l_align = align_loss(d_sem, d_func)
        total = total_loss(l_ce, l_mem, l_align, lc.gamma_mem, lc.gamma_align)
        return dict(total=total, ce=l_ce, mem=l_mem, align=l_align, d_sem=d_sem, d_func=d_func)

    def objective(self, s: StreamSample, bank: AnchorBank | None = None, update: bool = False,
                  force: bool = False) -> dict:
        """Loss components for one sample (without optimizer side effects)."""
        return self.losses(s, self.forward(s, bank, update), bank, force)

    def train_step(self, s: StreamSample, index: int = 0) -> StepLog:
        out = self.forward(s, self.bank, update=True)
        parts = self.losses(s, out, self.bank)
        total = parts["total"]
        if not math.isfinite(total.item()):
            raise NumericDomainError("non-finite loss")
        for p in self.params.values():
            p.zero_grad()
        dc.backward(total)
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        for p in self.params.values():
            p.zero_grad()
        grads, gnorm = clip_gradients(grads, self.cfg.optim.max_grad_norm)
        o = self.cfg.optim
        lr = lr_schedule(self.opt.step, max(self.total_steps, 1), o.lr, o.warmup_ratio)
        adam_step(self.params, grads, self.opt, lr)

        def val(key):
            t = parts[key]
            return t.item() if t is not None else 0.0

        entry = StepLog(self.opt.step, s.task_id, index, lr, total.item(), val("ce"), val("mem"),
                        val("align"), val("d_sem"), val("d_func"), gnorm)
        self.logs.append(entry)
        return entry

    def train_task(self, samples: list[StreamSample]) -> list[StepLog]:
        if not samples:
            return []
        tid = samples[0].task_id
        if any(s.task_id != tid for s in samples):
            raise ContractError("train_task expects samples from a single task")
        if self.total_steps == 0:
            self.total_steps = len(samples) * self.cfg.optim.epochs_per_task
        start = len(self.logs)
        for _ in range(self.cfg.optim.epochs_per_task):
            for i, s in enumerate(samples):
                try:
                    self.train_step(s, i)
                except NumericDomainError as e:
                    raise NumericDomainError(f"task {tid}, sample {i}: {e}") from e
        return self.logs[start:]

    # -- evaluation ------------------------------------------------------------

    def predict(self, s: StreamSample, bank: AnchorBank | None, update: bool = False) -> int:
        with dc.no_grad():
            pi = self.forward(s, bank, update)["pi"]
        return int(np.argmax(pi.data))

    def evaluate(self, samples: list[StreamSample], mode: str | None = None) -> float:
        mode = mode or self.cfg.eval_mode
        if not samples:
            raise EmptyInputError("accuracy is undefined on an empty sample set")
        bank = self.bank
        if bank is not None:
            if bank.filled_v == 0 and mode == "frozen":
                raise StateError("frozen-bank evaluation on an empty anchor bank")
            if mode == "adaptive":
                bank = bank.copy()
        correct = 0
        for s in samples:
            correct += int(self.predict(s, bank, update=(mode == "adaptive")) == s.label)
        return correct / len(samples)


@dataclass
class ContinualResult:
    matrices: dict[str, AccuracyMatrix]
    ap: float
    af: float
    learner: ContinualLearner
    logs: list[StepLog]
    scores: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def matrix(self) -> AccuracyMatrix:
        return self.matrices["standard"]


def run_continual(stream: TaskStream, cfg: TrainConfig,
                  eval_sets: dict[str, list[list[StreamSample]]] | None = None,
                  learner: ContinualLearner | None = None) -> ContinualResult:
    if stream.num_tasks < 1:
        raise ContractError("stream has no tasks")
    if eval_sets is None:
        eval_sets = {"standard": stream.test}
    learner = learner or ContinualLearner(stream.config, cfg)
    learner.total_steps = sum(map(len, stream.train)) * learner.cfg.optim.epochs_per_task
    T = stream.num_tasks
    mats = {name: AccuracyMatrix(T) for name in eval_sets}
    base0 = learner.model.base_snapshot()
    frozen = learner.cfg.model.freeze_base
    for i in range(T):
        learner.train_task(stream.train[i])
        if frozen:
            for k, w in learner.model.W_base.items():
                if not np.array_equal(w.data, base0[k]):
                    raise ContractError(f"frozen base projection {k} changed during task {i}")
        for name, sets in eval_sets.items():
            for j in range(i + 1):
                if sets[j]:
                    mats[name][i, j] = learner.evaluate(sets[j])
        log.info("task %d done: %s", i, {n: np.round(m.row(i), 3).tolist() for n, m in mats.items()})
    scores = {}
    for name, mat in mats.items():
        try:
            scores[name] = compute_ap_af(mat)
        except ContractError:
            # e.g. a held-out split with no samples for some task
            scores[name] = (float("nan"), float("nan"))
    key = "standard" if "standard" in mats else next(iter(mats))
    ap, af = scores[key]
    return ContinualResult(mats, ap, af, learner, learner.logs, scores)
