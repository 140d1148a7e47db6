"""Drift-resilient anchor memory: storage, retrieval, momentum update and the
memory-consistency loss.

Anchors are plain numpy buffers. They are updated by momentum, never by
gradient descent, and enter the graph only as constants.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import COS_EPS, Tensor
from .errors import ContractError, ShapeError, StateError

log = logging.getLogger(__name__)


@dataclass
class RetrievalResult:
    k_v: int
    k_q: int
    sim_v: float
    sim_q: float
    version: int


def _vec(x) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.data
    return np.asarray(x, dtype=np.float64).reshape(-1)


def _best(anchors: np.ndarray, f: np.ndarray) -> tuple[int, float]:
    norms = np.sqrt(np.einsum("ij,ij->i", anchors, anchors))
    sims = (anchors @ f) / (norms * np.sqrt(f @ f) + COS_EPS)
    k = int(np.argmax(sims))  # first maximum wins ties
    return k, float(sims[k])


class AnchorBank:
    """Two fixed-capacity anchor sets, visual (``P_v``) and question (``P_q``)."""

    def __init__(self, d: int, k_v: int, k_q: int, alpha: float = 0.9, beta: float = 0.9,
                 adaptive: bool = False):
        if k_v < 1 or k_q < 1:
            raise ContractError(f"anchor capacities must be >= 1, got K_v={k_v}, K_q={k_q}")
        self._check_momentum(alpha, beta)
        self.d = d
        self.P_v = np.zeros((k_v, d))
        self.P_q = np.zeros((k_q, d))
        self.filled_v = 0
        self.filled_q = 0
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.adaptive = adaptive
        self.version = 0

    @staticmethod
    def _check_momentum(alpha, beta):
        # Closed interval: the momentum grid includes 1.0.
        for name, v in (("alpha", alpha), ("beta", beta)):
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")

    @property
    def k_v(self) -> int:
        return self.P_v.shape[0]

    @property
    def k_q(self) -> int:
        return self.P_q.shape[0]

    def copy(self) -> "AnchorBank":
        other = AnchorBank(self.d, self.k_v, self.k_q, self.alpha, self.beta, self.adaptive)
        other.P_v = self.P_v.copy()
        other.P_q = self.P_q.copy()
        other.filled_v, other.filled_q = self.filled_v, self.filled_q
        other.version = self.version
        return other

    def _touch(self):
        self.version += 1

    def init_or_insert(self, f_v, f_q) -> "AnchorBank":
        f_v, f_q = _vec(f_v), _vec(f_q)
        if f_v.size != self.d or f_q.size != self.d:
            raise ShapeError(f"features have lengths {f_v.size}/{f_q.size}, bank expects {self.d}")
        changed = False
        if self.filled_v < self.k_v and np.any(f_v):
            self.P_v[self.filled_v] = f_v
            self.filled_v += 1
            changed = True
        if self.filled_q < self.k_q and np.any(f_q):
            self.P_q[self.filled_q] = f_q
            self.filled_q += 1
            changed = True
        if changed:
            self._touch()
        return self

    def retrieve(self, f_v, f_q) -> RetrievalResult:
        if self.filled_v < 1 or self.filled_q < 1:
            raise StateError("cannot retrieve from an empty anchor bank")
        f_v, f_q = _vec(f_v), _vec(f_q)
        if f_v.size != self.d or f_q.size != self.d:
            raise ShapeError(f"features have lengths {f_v.size}/{f_q.size}, bank expects {self.d}")
        if not np.any(f_v) or not np.any(f_q):
            log.debug("zero-vector query; retrieval falls back to index 0")
        k_v, s_v = _best(self.P_v[:self.filled_v], f_v)
        k_q, s_q = _best(self.P_q[:self.filled_q], f_q)
        return RetrievalResult(k_v, k_q, s_v, s_q, self.version)

    def _check_result(self, r: RetrievalResult):
        if not (0 <= r.k_v < self.filled_v and 0 <= r.k_q < self.filled_q):
            raise IndexError(f"retrieved indices ({r.k_v}, {r.k_q}) outside the filled slots "
                             f"({self.filled_v}, {self.filled_q})")
        if r.version != self.version:
            raise StateError("retrieval result is stale: the bank changed since it was produced")

    def momentum_update(self, r: RetrievalResult, f_v, f_q,
                        alpha: float | None = None, beta: float | None = None) -> "AnchorBank":
        """Pull only the two retrieved anchors toward the current features.

        ``r`` is re-stamped with the new bank version, so it stays valid for the
        instance context built right after the update.
        """
        self._check_result(r)
        alpha = self.alpha if alpha is None else alpha
        beta = self.beta if beta is None else beta
        self._check_momentum(alpha, beta)
        if self.adaptive:
            alpha = float(np.clip(alpha * r.sim_v, 0.0, 1.0))
            beta = float(np.clip(beta * r.sim_q, 0.0, 1.0))
        f_v, f_q = _vec(f_v), _vec(f_q)
        self.P_v[r.k_v] = alpha * self.P_v[r.k_v] + (1.0 - alpha) * f_v
        self.P_q[r.k_q] = beta * self.P_q[r.k_q] + (1.0 - beta) * f_q
        self._touch()
        r.version = self.version
        return self

    def anchors(self, r: RetrievalResult) -> tuple[np.ndarray, np.ndarray]:
        self._check_result(r)
        return self.P_v[r.k_v].copy(), self.P_q[r.k_q].copy()

    def instance_context(self, r: RetrievalResult) -> np.ndarray:
        p_v, p_q = self.anchors(r)
        return np.concatenate([p_v, p_q])

    def state_arrays(self, prefix: str = "bank") -> dict[str, np.ndarray]:
        return {
            f"{prefix}.filled": np.array([[self.filled_v, self.filled_q]], dtype=np.float64),
            f"{prefix}.momentum": np.array([[self.alpha, self.beta]]),
            f"{prefix}.P_v": self.P_v,
            f"{prefix}.P_q": self.P_q,
        }

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "bank", adaptive: bool = False) -> "AnchorBank":
        P_v, P_q = arrays[f"{prefix}.P_v"], arrays[f"{prefix}.P_q"]
        alpha, beta = arrays[f"{prefix}.momentum"][0]
        bank = cls(P_v.shape[1], P_v.shape[0], P_q.shape[0], float(alpha), float(beta), adaptive)
        bank.P_v, bank.P_q = P_v.copy(), P_q.copy()
        fv, fq = arrays[f"{prefix}.filled"][0]
        bank.filled_v, bank.filled_q = int(fv), int(fq)
        return bank


def memory_loss(f_v: Tensor, f_q: Tensor, bank: AnchorBank, r: RetrievalResult) -> Tensor:
    """``(1 - cos(f_v, p_v)) + (1 - cos(f_q, p_q))`` with the anchors detached."""
    p_v, p_q = bank.anchors(r)
    c_v = dc.cosine(f_v, Tensor(p_v.reshape(-1, 1)))
    c_q = dc.cosine(f_q, Tensor(p_q.reshape(-1, 1)))
    return dc.sub(2.0, dc.add(c_v, c_q))
