"""Decoupled geometry-enhanced attention.

Two attention branches share the query projection of the denoising features:

    self branch:  softmax(Q K_sa^T / sqrt(d_k)) V_sa,  K_sa, V_sa from concat(F_img, F_unet)
    geo branch:   softmax(Q K_ga^T / sqrt(d_k)) V_ga,  K_ga, V_ga from F_geo
    output:       (1 - lam) * A_sa @ W_sa_o + lam * A_ga @ W_ga_o

Feature tensors are arrays of shape (batch, tokens, channels). Projection
matrices act on the right (row-vector convention).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionParams:
    w_sa_q: np.ndarray
    w_sa_k: np.ndarray
    w_sa_v: np.ndarray
    w_sa_o: np.ndarray
    w_ga_k: np.ndarray
    w_ga_v: np.ndarray
    w_ga_o: np.ndarray
    heads: int = 1
    # optional independent query projection for the geo branch; None reuses w_sa_q
    w_ga_q: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.w_sa_q).shape[0]
        for name in ("w_sa_q", "w_sa_k", "w_sa_v", "w_sa_o", "w_ga_k", "w_ga_v", "w_ga_o", "w_ga_q"):
            w = getattr(self, name)
            if w is None:
                continue
            w = np.array(w, dtype=np.float64)
            if w.shape != (c, c):
                raise ShapeError(f"{name} has shape {w.shape}, expected ({c}, {c})")
            w.setflags(write=False)
            object.__setattr__(self, name, w)
        if self.heads < 1 or c % self.heads:
            raise ShapeError(f"{c} channels cannot be split into {self.heads} heads")

    @property
    def channels(self) -> int:
        return self.w_sa_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.channels // self.heads

    @property
    def geo_query(self) -> np.ndarray:
        return self.w_sa_q if self.w_ga_q is None else self.w_ga_q


@dataclass(frozen=True)
class SelfAttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    heads: int = 1


@dataclass(frozen=True)
class GeoAttentionOutput:
    fused: np.ndarray
    a_sa: np.ndarray  # self branch before its output projection
    a_ga: np.ndarray  # geo branch before its output projection


def init_geo_from_self(w_sa: SelfAttentionWeights) -> AttentionParams:
    """Geometry branch starts as a copy of the self-attention key/value/output projections."""
    return AttentionParams(
        w_sa_q=np.array(w_sa.w_q, dtype=np.float64),
        w_sa_k=np.array(w_sa.w_k, dtype=np.float64),
        w_sa_v=np.array(w_sa.w_v, dtype=np.float64),
        w_sa_o=np.array(w_sa.w_o, dtype=np.float64),
        w_ga_k=np.array(w_sa.w_k, dtype=np.float64),
        w_ga_v=np.array(w_sa.w_v, dtype=np.float64),
        w_ga_o=np.array(w_sa.w_o, dtype=np.float64),
        heads=w_sa.heads,
    )


def random_params(channels: int, heads: int, rng: np.random.Generator, scale: float | None = None) -> AttentionParams:
    """Gaussian projections with std ``scale`` (default 1/sqrt(channels))."""
    s = 1.0 / np.sqrt(channels) if scale is None else scale
    w = [rng.standard_normal((channels, channels)) * s for _ in range(7)]
    return AttentionParams(*w, heads=heads)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _check(name: str, x: np.ndarray, channels: int, batch: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"{name} must be (batch, tokens, channels), got shape {x.shape}")
    if x.shape[2] != channels:
        raise ShapeError(f"{name} has {x.shape[2]} channels, expected {channels}")
    if batch is not None and x.shape[0] != batch:
        raise ShapeError(f"{name} has batch {x.shape[0]}, expected {batch}")
    return x


def multihead_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int) -> np.ndarray:
    """Scaled dot-product attention on projected (B, T, C) tensors, heads concatenated back."""
    b, tq, c = q.shape
    tk = k.shape[1]
    dk = c // heads
    qh = q.reshape(b, tq, heads, dk).transpose(0, 2, 1, 3)
    kh = k.reshape(b, tk, heads, dk).transpose(0, 2, 1, 3)
    vh = v.reshape(b, tk, heads, dk).transpose(0, 2, 1, 3)
    probs = softmax(qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dk))
    return (probs @ vh).transpose(0, 2, 1, 3).reshape(b, tq, c)


def self_branch(f_unet: np.ndarray, f_img: np.ndarray, p: AttentionParams) -> np.ndarray:
    f_unet = _check("f_unet", f_unet, p.channels)
    f_img = _check("f_img", f_img, p.channels, f_unet.shape[0])
    context = np.concatenate([f_img, f_unet], axis=1)
    return multihead_attention(f_unet @ p.w_sa_q, context @ p.w_sa_k, context @ p.w_sa_v, p.heads)


def geo_branch(f_unet: np.ndarray, f_geo: np.ndarray, p: AttentionParams) -> np.ndarray:
    f_unet = _check("f_unet", f_unet, p.channels)
    f_geo = _check("f_geo", f_geo, p.channels, f_unet.shape[0])
    if f_geo.shape[1] == 0:
        raise ValueError("geometry branch needs at least one geometry token")
    return multihead_attention(f_unet @ p.geo_query, f_geo @ p.w_ga_k, f_geo @ p.w_ga_v, p.heads)


def fused_attention(
    f_unet: np.ndarray,
    f_img: np.ndarray,
    f_geo: np.ndarray,
    p: AttentionParams,
    lambda_geo: float,
) -> GeoAttentionOutput:
    if not 0.0 <= lambda_geo <= 1.0:
        raise ValueError(f"lambda_geo must lie in [0, 1], got {lambda_geo}")
    a_sa = self_branch(f_unet, f_img, p)
    a_ga = geo_branch(f_unet, f_geo, p)
    fused = (1.0 - lambda_geo) * (a_sa @ p.w_sa_o) + lambda_geo * (a_ga @ p.w_ga_o)
    return GeoAttentionOutput(fused, a_sa, a_ga)
