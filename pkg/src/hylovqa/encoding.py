"""Region tokens and global visual/question summaries."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import EmptyInputError, ShapeError


@dataclass(frozen=True)
class RegionFeature:
    roi: np.ndarray  # (d_roi,)
    bbox: np.ndarray  # (4,) as x1, y1, x2, y2 in [0, 1]
    region_index: int

    def __post_init__(self):
        b = np.asarray(self.bbox, dtype=np.float64)
        if b.shape != (4,):
            raise ShapeError(f"bbox must have 4 coordinates, got shape {b.shape}")
        if np.any(b < 0) or np.any(b > 1) or b[0] > b[2] or b[1] > b[3]:
            raise ValueError(f"invalid bbox {b.tolist()}")


class EncoderParams:
    """``W_roi`` (d x d_roi), ``W_box`` (d x 4) and the region-id table ``E_id`` (N x d)."""

    def __init__(self, W_roi, W_box, E_id, trainable: bool = True):
        self.W_roi = W_roi if isinstance(W_roi, Tensor) else Tensor(W_roi, requires_grad=trainable)
        self.W_box = W_box if isinstance(W_box, Tensor) else Tensor(W_box, requires_grad=trainable)
        self.E_id = E_id if isinstance(E_id, Tensor) else Tensor(E_id, requires_grad=trainable)
        d = self.W_roi.shape[0]
        if self.W_box.shape != (d, 4) or self.E_id.shape[1] != d:
            raise ShapeError(
                f"encoder shapes disagree: W_roi {self.W_roi.shape}, "
                f"W_box {self.W_box.shape}, E_id {self.E_id.shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_roi: int, n_regions: int) -> "EncoderParams":
        return cls(
            rng.normal(0.0, 1.0 / np.sqrt(d_roi), size=(d, d_roi)),
            rng.normal(0.0, 0.5, size=(d, 4)),
            rng.normal(0.0, 0.1, size=(n_regions, d)),
        )

    @property
    def d(self) -> int:
        return self.W_roi.shape[0]

    @property
    def d_roi(self) -> int:
        return self.W_roi.shape[1]

    @property
    def n_regions(self) -> int:
        return self.E_id.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"enc.W_roi": self.W_roi, "enc.W_box": self.W_box, "enc.E_id": self.E_id}


def build_region_token(r: RegionFeature, p: EncoderParams) -> np.ndarray:
    """Single region token ``W_roi roi + W_box bbox + E_id[j]`` (no graph)."""
    roi = np.asarray(r.roi, dtype=np.float64).reshape(-1)
    if roi.size != p.d_roi:
        raise ShapeError(f"roi has length {roi.size}, encoder expects {p.d_roi}")
    if not 0 <= r.region_index < p.n_regions:
        raise IndexError(f"region_index {r.region_index} outside [0, {p.n_regions})")
    return (p.W_roi.data @ roi + p.W_box.data @ np.asarray(r.bbox, dtype=np.float64)
            + p.E_id.data[r.region_index])


def encode_regions(roi: np.ndarray, bbox: np.ndarray, p: EncoderParams) -> Tensor:
    """Batched region tokens for regions ``0..N-1``; returns V with shape (N, d)."""
    roi = np.asarray(roi, dtype=np.float64)
    bbox = np.asarray(bbox, dtype=np.float64)
    n = roi.shape[0]
    if roi.shape[1] != p.d_roi or bbox.shape != (n, 4):
        raise ShapeError(f"roi {roi.shape} / bbox {bbox.shape} do not match encoder")
    if n > p.n_regions:
        raise IndexError(f"{n} regions but only {p.n_regions} region-id embeddings")
    ids = p.E_id if n == p.n_regions else dc.slice_rows(p.E_id, 0, n)
    tok = dc.matmul(Tensor(roi), dc.transpose(p.W_roi))
    tok = dc.add(tok, dc.matmul(Tensor(bbox), dc.transpose(p.W_box)))
    return dc.add(tok, ids)


def visual_summary(V: Tensor) -> Tensor:
    if V.shape[0] == 0:
        raise EmptyInputError("visual_summary needs at least one region")
    return dc.mean_rows(V)


def question_summary(Q: Tensor) -> Tensor:
    # Pool is fixed to the row mean.
    if Q.shape[0] == 0:
        raise EmptyInputError("question_summary needs at least one token")
    return dc.mean_rows(Q)
