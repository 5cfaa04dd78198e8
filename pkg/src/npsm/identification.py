"""Identification head: region feature -> 256-d embedding, cosine ranking, softmax ID loss."""

from __future__ import annotations

import warnings

import numpy as np

from . import ops
from .tensor import Tensor

EMBED_DIM = 256


class ZeroEmbeddingWarning(UserWarning):
    """A cosine similarity involved an all-zero embedding and was defined as 0."""


def ident_param_shapes(D: int, n_identities: int) -> dict:
    if n_identities < 2:
        raise ValueError(f"identification needs at least 2 identities, got {n_identities}")
    return {
        "ident.w_conv": (3, 3, D, D),
        "ident.b_conv": (D,),
        "ident.w_fc": (D, EMBED_DIM),
        "ident.b_fc": (EMBED_DIM,),
        "ident.S": (EMBED_DIM, n_identities),
    }


def embed(region_feature: Tensor, params: dict) -> Tensor:
    """conv3x3 + ReLU -> global average pool -> FC to 256."""
    if region_feature.data.ndim != 3 or region_feature.shape[2] != params["ident.w_conv"].shape[2]:
        raise ops.DimensionError(
            f"embed: feature {region_feature.shape} vs conv input channels {params['ident.w_conv'].shape[2]}")
    a = ops.relu(ops.conv2d(region_feature, params["ident.w_conv"], params["ident.b_conv"]))
    return ops.linear(ops.global_avg_pool(a), params["ident.w_fc"], params["ident.b_fc"])


def cosine_similarity(u, v) -> float:
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64)
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        warnings.warn("cosine similarity with a zero embedding; returning 0", ZeroEmbeddingWarning, stacklevel=2)
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def identification_loss(u: Tensor, identity: int, S: Tensor) -> Tensor:
    """``-log softmax(S^T u)[identity]``; S holds one column per identity, no bias."""
    if S.data.ndim != 2 or S.shape[0] != u.shape[0]:
        raise ops.DimensionError(f"identification_loss: embedding {u.shape} vs S {S.shape}")
    n = S.shape[1]
    if not 0 <= identity < n:
        raise IndexError(f"identity {identity} out of range [0, {n})")
    return ops.softmax_xent(ops.linear(u, S), identity)
