"""Hypernetwork-generated LoRA adapters on frozen cross-attention.

Shapes (single head, ``d_in = d_out = d``):

* base projection ``W_base[l, X]``: d x d, X in (Q, K, V), never trained in
  the adaptive methods;
* generated factors ``A``: r x d_in and ``B``: d_out x r, so the per-sample
  projection is ``W_base + lam * (B A)^T``;
* layer embeddings are the columns of ``layer_emb`` (d_layer x L);
* hypernetwork: one ``tanh`` trunk over ``[z ; e_l]`` feeding six affine heads,
  one per (projection, factor) pair. The B heads start at zero so that the
  adapted model initially equals the base model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encoding import EncoderParams, encode_regions, question_summary, visual_summary
from .errors import ContractError, NumericDomainError, ShapeError

PROJ = ("Q", "K", "V")
ROLES = ("A", "B")


@dataclass
class ModelConfig:
    n_layers: int = 2
    rank: int = 4
    lam: float = 1.0
    hidden: int = 64
    d_layer: int = 8
    a_init_scale: float = 1.0
    use_hypernet: bool = True
    use_context: bool = True
    freeze_base: bool = True

    def validate(self, d: int) -> "ModelConfig":
        from .errors import ConfigError

        if self.n_layers < 1:
            raise ConfigError("model.n_layers: must be >= 1")
        if not 1 <= self.rank <= d:
            raise ConfigError(f"model.rank: must be in [1, {d}] (rank <= min(d_in, d_out))")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ConfigError("model.lam: must be finite and >= 0")
        if self.hidden < 1 or self.d_layer < 1:
            raise ConfigError("model.hidden / model.d_layer: must be >= 1")
        return self


class LoRAFactorSet:
    """Generated ``(A, B)`` pairs keyed by ``(layer, projection)``."""

    def __init__(self, factors: dict, n_layers: int, rank: int, d_in: int, d_out: int):
        self.factors = factors
        self.n_layers, self.rank, self.d_in, self.d_out = n_layers, rank, d_in, d_out

    def __getitem__(self, key) -> tuple[Tensor, Tensor]:
        return self.factors[key]

    def keys(self):
        """Canonical order: layer ascending, then Q, K, V."""
        return [(l, x) for l in range(self.n_layers) for x in PROJ]

    @property
    def size(self) -> int:
        return self.n_layers * len(PROJ) * (self.rank * self.d_in + self.d_out * self.rank)


class FusionModel:
    def __init__(self, d: int, d_roi: int, n_regions: int, n_classes: int,
                 cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate(d)
        self.cfg = cfg
        self.d, self.n_classes = d, n_classes
        L, r, h, dl = cfg.n_layers, cfg.rank, cfg.hidden, cfg.d_layer
        self.encoder = EncoderParams.init(rng, d, d_roi, n_regions)
        self.W_base = {
            (l, x): Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)),
                           requires_grad=not cfg.freeze_base)
            for l in range(L) for x in PROJ
        }
        self.W_g = Tensor(np.eye(d) + rng.normal(0.0, 0.01, size=(d, d)), requires_grad=True)
        self.layer_emb = Tensor(rng.normal(0.0, 1.0, size=(dl, L)), requires_grad=True)
        n_in = 2 * d + dl
        self.W1 = Tensor(rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(h, n_in)), requires_grad=True)
        self.b1 = Tensor(np.zeros((h, 1)), requires_grad=True)
        self.heads = {}
        a_std = cfg.a_init_scale * 1.5 / math.sqrt(h * d)
        for x in PROJ:
            self.heads[(x, "A")] = (
                Tensor(rng.normal(0.0, a_std, size=(r * d, h)), requires_grad=True),
                Tensor(np.zeros((r * d, 1)), requires_grad=True))
            self.heads[(x, "B")] = (
                Tensor(np.zeros((d * r, h)), requires_grad=True),
                Tensor(np.zeros((d * r, 1)), requires_grad=True))
        self.W_out = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(n_classes, d)), requires_grad=True)
        self.b_out = Tensor(np.zeros((n_classes, 1)), requires_grad=True)

    # -- parameter bookkeeping ------------------------------------------------

    def named_tensors(self) -> dict[str, Tensor]:
        """Every tensor of the model in checkpoint order."""
        out = dict(self.encoder.parameters())
        for (l, x), w in self.W_base.items():
            out[f"base.{l}.{x}"] = w
        out["ctx.W_g"] = self.W_g
        out["hyper.layer_emb"] = self.layer_emb
        out["hyper.W1"] = self.W1
        out["hyper.b1"] = self.b1
        for (x, role), (w, b) in self.heads.items():
            out[f"hyper.head.{x}.{role}.W"] = w
            out[f"hyper.head.{x}.{role}.b"] = b
        out["head.W"] = self.W_out
        out["head.b"] = self.b_out
        return out

    def parameters(self) -> dict[str, Tensor]:
        """Tensors updated by the optimizer under the current configuration."""
        named = self.named_tensors()
        skip = set()
        if not self.cfg.use_hypernet:
            skip |= {k for k in named if k.startswith("hyper.")}
        if not self.cfg.use_context:
            skip.add("ctx.W_g")
        return {k: t for k, t in named.items() if t.requires_grad and k not in skip}

    def base_snapshot(self) -> dict:
        return {k: w.data.copy() for k, w in self.W_base.items()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"model.{k}": t.data for k, t in self.named_tensors().items()}

    def load_arrays(self, arrays) -> None:
        for k, t in self.named_tensors().items():
            src = arrays[f"model.{k}"]
            if src.shape != t.shape:
                raise ShapeError(f"model.{k}: checkpoint has shape {src.shape}, model expects {t.shape}")
            t.data = src.copy()

    # -- forward pieces -------------------------------------------------------

    def encode(self, roi, bbox, question) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        V = encode_regions(roi, bbox, self.encoder)
        Q = Tensor(question)
        return V, Q, visual_summary(V), question_summary(Q)


def generate_lora(model: FusionModel, z) -> LoRAFactorSet:
    cfg, d = model.cfg, model.d
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64).reshape(-1, 1))
    if z.shape != (2 * d, 1):
        raise ShapeError(f"hypernetwork input must be a {2 * d}-vector, got {z.shape}")
    L, r = cfg.n_layers, cfg.rank
    zs = z if L == 1 else dc.concat_cols([z] * L)
    x_in = dc.concat_rows([zs, model.layer_emb])
    hid = dc.tanh(dc.add(dc.matmul(model.W1, x_in), model.b1))
    factors = {}
    outs = {key: dc.add(dc.matmul(w, hid), b) for key, (w, b) in model.heads.items()}
    for l in range(L):
        for x in PROJ:
            a = dc.reshape(dc.select_col(outs[(x, "A")], l), r, d)
            b = dc.reshape(dc.select_col(outs[(x, "B")], l), d, r)
            factors[(l, x)] = (a, b)
    return LoRAFactorSet(factors, L, r, d, d)


def adapt_projection(W_base: Tensor, A: Tensor, B: Tensor, lam: float) -> Tensor:
    d_in, d_out = W_base.shape
    if A.shape[1] != d_in or B.shape[0] != d_out or A.shape[0] != B.shape[1]:
        raise ShapeError(f"LoRA shapes A {A.shape}, B {B.shape} do not fit W_base {W_base.shape}")
    return dc.add(W_base, dc.mul(dc.transpose(dc.matmul(B, A)), float(lam)))


def prepend_context(Q_seq: Tensor, V_seq: Tensor, p_v, p_q, W_g: Tensor) -> tuple[Tensor, Tensor]:
    d = W_g.shape[0]
    p_v = Tensor(np.asarray(p_v, dtype=np.float64).reshape(-1, 1))
    p_q = Tensor(np.asarray(p_q, dtype=np.float64).reshape(-1, 1))
    if p_v.shape[0] != d or p_q.shape[0] != d or Q_seq.shape[1] != d or V_seq.shape[1] != d:
        raise ShapeError(f"context shapes disagree: W_g {W_g.shape}, anchors {p_v.shape}/{p_q.shape}, "
                         f"sequences {Q_seq.shape}/{V_seq.shape}")
    g_v = dc.transpose(dc.matmul(W_g, p_v))
    g_q = dc.transpose(dc.matmul(W_g, p_q))
    return dc.concat_rows([g_q, Q_seq]), dc.concat_rows([g_v, V_seq])


def fused_forward(model: FusionModel, Q_hat: Tensor, V_hat: Tensor,
                  factors: LoRAFactorSet | None = None) -> tuple[Tensor, Tensor]:
    """Stacked cross-attention; returns ``(e_out (d x 1), pi (1 x C))``.

    ``factors=None`` runs the adapter-free base model.
    """
    cfg = model.cfg
    scale = 1.0 / math.sqrt(model.d)  # one head: d_k = d
    x = Q_hat
    for l in range(cfg.n_layers):
        if factors is None:
            wq, wk, wv = (model.W_base[(l, p)] for p in PROJ)
        else:
            wq, wk, wv = (adapt_projection(model.W_base[(l, p)], *factors[(l, p)], cfg.lam)
                          for p in PROJ)
        q = dc.matmul(x, wq)
        k = dc.matmul(V_hat, wk)
        v = dc.matmul(V_hat, wv)
        attn = dc.softmax_rows(dc.mul(dc.matmul(q, dc.transpose(k)), scale))
        h = dc.matmul(attn, v)
        if not np.all(np.isfinite(h.data)):
            raise NumericDomainError(f"non-finite activations in fusion layer {l}")
        x = dc.add(x, h)
    e_out = dc.mean_rows(x)
    logits = dc.add(dc.matmul(model.W_out, e_out), model.b_out)
    return e_out, dc.softmax_rows(dc.transpose(logits))


def ce_loss(pi: Tensor, t) -> Tensor:
    t = np.asarray(t, dtype=np.float64).reshape(pi.shape)
    if abs(t.sum() - 1.0) > 1e-6 or np.any(t < 0):
        raise ContractError(f"target must be a probability vector (sums to {t.sum():.9f})")
    return dc.mul(dc.sum_all(dc.mul(dc.log(pi), Tensor(t))), -1.0)
