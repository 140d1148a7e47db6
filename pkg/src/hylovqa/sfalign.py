"""Semantic-functional alignment: feature-space vs parameter-space distances."""
from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .hyperlora import LoRAFactorSet


def semantic_distance(z_inst, z_raw) -> Tensor:
    """``1 - cos(z_inst, z_raw)``."""
    return dc.sub(1.0, dc.cosine(z_inst, z_raw))


def vectorize_factors(factors: LoRAFactorSet) -> Tensor:
    """Flatten all generated matrices into one ``m x 1`` column.

    Order: layer ascending, projection Q, K, V, ``A`` before ``B``, each
    matrix row-major.
    """
    parts = []
    for key in factors.keys():
        if key not in factors.factors:
            raise ContractError(f"factor set is missing {key}")
        a, b = factors[key]
        parts += [dc.flatten(a), dc.flatten(b)]
    return dc.concat_rows(parts)


def unvectorize_factors(theta, n_layers: int, rank: int, d_in: int, d_out: int) -> LoRAFactorSet:
    """Inverse of :func:`vectorize_factors` (plain arrays, no graph)."""
    flat = np.asarray(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64).reshape(-1)
    m = n_layers * 3 * (rank * d_in + d_out * rank)
    if flat.size != m:
        raise ShapeError(f"theta has {flat.size} entries, expected {m}")
    out, pos = {}, 0
    for l in range(n_layers):
        for x in ("Q", "K", "V"):
            a = flat[pos:pos + rank * d_in].reshape(rank, d_in)
            pos += rank * d_in
            b = flat[pos:pos + d_out * rank].reshape(d_out, rank)
            pos += d_out * rank
            out[(l, x)] = (Tensor(a), Tensor(b))
    return LoRAFactorSet(out, n_layers, rank, d_in, d_out)


def functional_distance(theta_inst: Tensor, theta_raw: Tensor) -> Tensor:
    """``||theta_inst - theta_raw||_2 / sqrt(m)``."""
    theta_inst, theta_raw = dc._lift(theta_inst), dc._lift(theta_raw)
    m = theta_inst.data.size
    if m == 0:
        raise ContractError("functional distance over zero generated parameters")
    if theta_raw.data.size != m:
        raise ShapeError(f"parameter vectors differ in length: {m} vs {theta_raw.data.size}")
    return dc.mul(dc.norm(dc.sub(theta_inst, theta_raw)), 1.0 / math.sqrt(m))


def align_loss(d_sem, d_func) -> Tensor:
    return dc.square(dc.sub(d_sem, d_func))


def total_loss(l_ce, l_mem, l_align, gamma_mem: float, gamma_align: float) -> Tensor:
    if gamma_mem < 0 or gamma_align < 0:
        raise ConfigError(f"loss weights must be >= 0, got {gamma_mem}, {gamma_align}")
    total = dc._lift(l_ce)
    if gamma_mem:
        total = dc.add(total, dc.mul(l_mem, float(gamma_mem)))
    if gamma_align:
        total = dc.add(total, dc.mul(l_align, float(gamma_align)))
    return total
