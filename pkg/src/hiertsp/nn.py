"""Transformer encoder blocks built on :mod:`hiertsp.autodiff`.

Parameters live in a flat ``dict[str, Tensor]``; each function takes the
name prefix of the block it reads. Per-head projections are stored as
``[n_heads, d, d_head]`` so that head splitting is a broadcast matmul.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


def uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def constant(value: float, shape, dtype) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


def init_mha(params: Params, prefix: str, rng, d: int, n_heads: int, dtype) -> None:
    dh = d // n_heads
    for name in ("Wq", "Wk", "Wv"):
        params[f"{prefix}.{name}"] = uniform(rng, (n_heads, d, dh), d, dtype)
    params[f"{prefix}.Wo"] = uniform(rng, (n_heads, dh, d), d, dtype)


def init_layer_norm(params: Params, prefix: str, d: int, dtype) -> None:
    params[f"{prefix}.g"] = constant(1.0, (d,), dtype)
    params[f"{prefix}.b"] = constant(0.0, (d,), dtype)


def init_encoder(params: Params, rng, d: int, n_heads: int, n_layers: int,
                 ff_mult: int = 4, dtype=np.float32) -> None:
    if d % n_heads:
        raise ValueError(f"d={d} must be divisible by n_heads={n_heads}")
    params["enc.in.W"] = uniform(rng, (2, d), 2, dtype)
    params["enc.in.b"] = uniform(rng, (d,), 2, dtype)
    for l in range(n_layers):
        p = f"enc.{l}"
        init_mha(params, f"{p}.mha", rng, d, n_heads, dtype)
        init_layer_norm(params, f"{p}.ln1", d, dtype)
        params[f"{p}.ff.W1"] = uniform(rng, (d, ff_mult * d), d, dtype)
        params[f"{p}.ff.b1"] = uniform(rng, (ff_mult * d,), d, dtype)
        params[f"{p}.ff.W2"] = uniform(rng, (ff_mult * d, d), ff_mult * d, dtype)
        params[f"{p}.ff.b2"] = uniform(rng, (d,), ff_mult * d, dtype)
        init_layer_norm(params, f"{p}.ln2", d, dtype)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, W)
    return y if b is None else ad.add(y, b)


def layer_norm(x: Tensor, params: Params, prefix: str, eps: float = 1e-5) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x, eps), params[f"{prefix}.g"]), params[f"{prefix}.b"])


def split_heads(x: Tensor, W: Tensor) -> Tensor:
    """``[..., m, d]`` times per-head ``[h, d, dh]`` -> ``[..., h, m, dh]``."""
    lead = x.shape[:-2]
    x4 = ad.reshape(x, (*lead, 1, *x.shape[-2:]))
    return ad.matmul(x4, W)


def project_kv(kv_in: Tensor, params: Params, prefix: str) -> tuple[Tensor, Tensor]:
    """Key/value heads for ``kv_in``; cacheable across decode steps."""
    return split_heads(kv_in, params[f"{prefix}.Wk"]), split_heads(kv_in, params[f"{prefix}.Wv"])


def attend(q_in: Tensor, K: Tensor, V: Tensor, params: Params, prefix: str,
           mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention of ``q_in [..., m, d]`` over
    pre-split keys/values ``[..., h, n, dh]``. ``mask [..., m, n]`` is True
    where a key must be ignored."""
    Q = split_heads(q_in, params[f"{prefix}.Wq"])
    dh = Q.shape[-1]
    scores = ad.scalar_mul(ad.matmul(Q, ad.transpose_last_two(K)), 1.0 / math.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.all(axis=-1).any():
            raise ValueError("mha: every key is masked for at least one query")
        scores = ad.masked_fill(scores, np.expand_dims(mask, -3))
    attn = ad.softmax_lastdim(scores)
    heads = ad.matmul(ad.matmul(attn, V), params[f"{prefix}.Wo"])  # [..., h, m, d]
    return ad.reduce_sum(heads, axis=-3)


def mha(H: Tensor, params: Params, prefix: str, mask: np.ndarray | None = None,
        kv: Tensor | None = None) -> Tensor:
    """Self-attention over ``H [..., n, d]`` (or cross-attention onto ``kv``).

    A 1-D ``mask [n]`` marks keys to ignore for every query.
    """
    kv = H if kv is None else kv
    K, V = project_kv(kv, params, prefix)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, bool), (*H.shape[:-1], kv.shape[-2]))
    return attend(H, K, V, params, prefix, mask)


def encoder_layer(h: Tensor, params: Params, prefix: str, eps: float = 1e-5) -> Tensor:
    h_tilde = layer_norm(ad.add(h, mha(h, params, f"{prefix}.mha")), params, f"{prefix}.ln1", eps)
    ff = linear(ad.relu(linear(h_tilde, params[f"{prefix}.ff.W1"], params[f"{prefix}.ff.b1"])),
                params[f"{prefix}.ff.W2"], params[f"{prefix}.ff.b2"])
    return layer_norm(ad.add(h_tilde, ff), params, f"{prefix}.ln2", eps)


def encoder_forward(coords, params: Params, n_layers: int, eps: float = 1e-5) -> Tensor:
    """Embed ``coords [..., n, 2]`` into node embeddings ``[..., n, d]``."""
    x = coords if isinstance(coords, Tensor) else Tensor(
        np.asarray(coords, dtype=params["enc.in.W"].dtype))
    if x.shape[-1] != 2:
        raise ValueError(f"coords must have last axis 2, got shape {x.shape}")
    if x.shape[-2] < 2:
        raise ValueError(f"encoder needs at least 2 cities, got {x.shape[-2]}")
    h = linear(x, params["enc.in.W"], params["enc.in.b"])
    for l in range(n_layers):
        h = encoder_layer(h, params, f"enc.{l}", eps)
    return h
