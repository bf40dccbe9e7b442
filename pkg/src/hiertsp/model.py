"""Hierarchical constructive decoder: soft clustering of node embeddings,
depletable cluster tracking, hypernetwork-modulated pointer and the batched
multi-start rollout.

Shapes: ``B`` instances, ``P`` starts per instance, ``n`` nodes,
``Nc`` clusters, ``d`` embedding width.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import ModelConfig

PROB_FLOOR = 1e-30


class DecodeError(RuntimeError):
    pass


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> nn.Params:
    rng = np.random.default_rng(seed)
    d = cfg.d
    params: nn.Params = {}
    nn.init_encoder(params, rng, d, cfg.n_heads, cfg.enc_layers, cfg.ff_mult, dtype)
    if cfg.uses_clusters:
        params["cluster.C0"] = nn.uniform(rng, (cfg.n_clusters, d), d, dtype)
        params["cluster.W_H"] = nn.uniform(rng, (d, d), d, dtype)
        params["cluster.W_C"] = nn.uniform(rng, (d, d), d, dtype)
        nn.init_layer_norm(params, "cluster.ln", d, dtype)
    if cfg.context == "clusters":
        width = (1 + cfg.n_clusters) * d
    elif cfg.context == "average":
        width = 2 * d
    else:
        width = 0
    if width:
        params["combine.W"] = nn.uniform(rng, (width, d), width, dtype)
        params["combine.b"] = nn.constant(0.0, (d,), dtype)
    for g in range(cfg.glimpse_layers):
        nn.init_mha(params, f"glimpse.{g}", rng, d, cfg.n_heads, dtype)
    params["ptr.W_Q"] = nn.uniform(rng, (d, d), d, dtype)
    params["ptr.W_K"] = nn.uniform(rng, (d, d), d, dtype)
    if cfg.choice == "hyper":
        params["choice.W1"] = nn.uniform(rng, (d, d), d, dtype)
        params["choice.b1"] = nn.constant(0.0, (d,), dtype)
        params["choice.W2"] = nn.uniform(rng, (d, d), d, dtype)
        # output bias of 1 so the modulation starts near identity
        params["choice.b2"] = nn.constant(1.0, (d,), dtype)
    elif cfg.choice == "free":
        params["choice.w"] = nn.constant(1.0, (d,), dtype)
    return params


# ---------------------------------------------------------------- clustering

@dataclass
class ClusterState:
    centers: Tensor              # [..., Nc, d]
    pi: Tensor                   # [..., n, Nc]
    tracking: Tensor             # [..., Nc, d] or [B, P, Nc, d] during rollouts
    subtracted: np.ndarray       # bool [..., n] (per rollout once tiled)


def cluster(H: Tensor, params: nn.Params, iters: int, eps: float = 1e-5) -> ClusterState:
    """Attention-based soft clustering of ``H [..., n, d]`` into ``Nc`` centers.

    Each iteration projects nodes and centers, takes responsibilities as a
    softmax over clusters, sets centers to the responsibility-weighted sum of
    node embeddings, adds the projected centers back and layer-normalises.
    """
    if iters < 1:
        raise ValueError("cluster needs at least one iteration")
    d = H.shape[-1]
    C = params["cluster.C0"]
    H_hat = ad.matmul(H, params["cluster.W_H"])
    scale = 1.0 / math.sqrt(d)
    pi = None
    for _ in range(iters):
        C_hat = ad.matmul(C, params["cluster.W_C"])
        logits = ad.scalar_mul(ad.matmul(H_hat, ad.transpose_last_two(C_hat)), scale)
        pi = ad.softmax_lastdim(logits)                              # [..., n, Nc]
        C_new = ad.matmul(ad.transpose_last_two(pi), H)              # [..., Nc, d]
        C = nn.layer_norm(ad.add(C_hat, C_new), params, "cluster.ln", eps)
    subtracted = np.zeros(H.shape[:-1], dtype=bool)
    return ClusterState(centers=C, pi=pi, tracking=C, subtracted=subtracted)


def cluster_track_update(state: ClusterState, node, H: Tensor) -> ClusterState:
    """Remove the responsibility-weighted embedding of ``node`` from tracking.

    ``node`` is an int for a single instance or an index array matching the
    leading axes of ``state.subtracted[..., 0]`` for batched rollouts, where
    ``H`` is ``[B, n, d]`` and tracking is ``[B, P, Nc, d]``.
    """
    node = np.asarray(node, dtype=np.int64)
    sub = state.subtracted
    if node.ndim == 0:
        # single instance: pi [n, Nc], H [n, d], tracking [Nc, d]
        if sub[node]:
            raise ValueError(f"node {int(node)} already subtracted from tracking")
        pi_i = ad.reshape(ad.gather_rows(state.pi, node.reshape(1)), (state.pi.shape[-1], 1))
        h_i = ad.gather_rows(H, node.reshape(1))
        contrib = ad.mul(pi_i, h_i)
        new_sub = sub.copy()
        new_sub[node] = True
    else:
        already = np.take_along_axis(sub, node[..., None], axis=-1)[..., 0]
        if already.any():
            raise ValueError("node already subtracted from tracking")
        B, P = node.shape
        nc = state.pi.shape[-1]
        pi_i = ad.reshape(ad.gather_rows(state.pi, node), (B, P, nc, 1))
        h_i = ad.reshape(ad.gather_rows(H, node), (B, P, 1, H.shape[-1]))
        contrib = ad.mul(pi_i, h_i)                                     # [B, P, Nc, d]
        new_sub = sub.copy()
        np.put_along_axis(new_sub, node[..., None], True, axis=-1)
    return ClusterState(state.centers, state.pi, ad.sub(state.tracking, contrib), new_sub)


# ---------------------------------------------------------------- decoding

def build_context(h_last: Tensor, h_first: Tensor, params: nn.Params, cfg: ModelConfig,
                  tracking: Tensor | None = None, unvisited_mean: Tensor | None = None) -> Tensor:
    """Decoder context. ``sum``: last + first. ``clusters``: linear map of
    [last, tracking rows] plus first. ``average``: same with the mean of the
    unvisited embeddings in place of the tracking rows."""
    if cfg.context == "sum":
        return ad.add(h_last, h_first)
    if cfg.context == "clusters":
        flat = ad.reshape(tracking, (*tracking.shape[:-2], tracking.shape[-2] * tracking.shape[-1]))
        parts = [h_last, flat]
    else:
        parts = [h_last, unvisited_mean]
    mixed = nn.linear(ad.concat_lastdim(parts), params["combine.W"], params["combine.b"])
    return ad.add(mixed, h_first)


def choice_weights(q: Tensor, params: nn.Params, cfg: ModelConfig) -> Tensor | None:
    """Per-dimension modulation of the pointer query, or None when unmodulated."""
    if cfg.choice == "none":
        return None
    if cfg.choice == "free":
        return params["choice.w"]
    hidden = ad.relu(nn.linear(q, params["choice.W1"], params["choice.b1"]))
    return nn.linear(hidden, params["choice.W2"], params["choice.b2"])


@dataclass
class DecoderCache:
    coords: np.ndarray            # [B, n, 2]
    H: Tensor                     # [B, n, d]
    K_ptr_t: Tensor               # [B, d, n]
    glimpse_kv: list[tuple[Tensor, Tensor]]
    clusters: ClusterState | None
    H_sum: Tensor | None


@dataclass
class RolloutState:
    start: np.ndarray             # [B, P]
    current: np.ndarray           # [B, P]
    visited: np.ndarray           # bool [B, P, n]
    tours: list[np.ndarray]       # each [B, P]
    sum_log_prob: Tensor          # [B, P]
    cluster: ClusterState | None = None
    unvisited_sum: Tensor | None = None
    trace: list[np.ndarray] = field(default_factory=list)
    instance_ids: np.ndarray | None = None

    @property
    def tour_so_far(self) -> np.ndarray:
        return np.stack(self.tours, axis=-1)


def encode(coords, params: nn.Params, cfg: ModelConfig) -> DecoderCache:
    coords = np.asarray(coords)
    single = coords.ndim == 2
    if single:
        coords = coords[None]
    dtype = params["enc.in.W"].dtype
    H = nn.encoder_forward(coords.astype(dtype), params, cfg.enc_layers, cfg.ln_eps)
    K_ptr_t = ad.transpose_last_two(ad.matmul(H, params["ptr.W_K"]))
    kv = [nn.project_kv(H, params, f"glimpse.{g}") for g in range(cfg.glimpse_layers)]
    clusters = cluster(H, params, cfg.cluster_iters, cfg.ln_eps) if cfg.uses_clusters else None
    H_sum = ad.reduce_sum(H, axis=-2) if cfg.context == "average" else None
    return DecoderCache(coords, H, K_ptr_t, kv, clusters, H_sum)


def init_state(cache: DecoderCache, starts) -> RolloutState:
    B, n = cache.H.shape[:2]
    starts = np.asarray(starts, dtype=np.int64)
    if starts.ndim == 1:
        starts = np.broadcast_to(starts, (B, starts.size)).copy()
    if starts.size == 0:
        raise ValueError("rollout needs at least one start")
    P = starts.shape[1]
    visited = np.zeros((B, P, n), dtype=bool)
    np.put_along_axis(visited, starts[..., None], True, axis=-1)
    dtype = cache.H.dtype
    state = RolloutState(start=starts, current=starts.copy(), visited=visited, tours=[starts.copy()],
                         sum_log_prob=Tensor(np.zeros((B, P), dtype=dtype)))
    if cache.clusters is not None:
        c = cache.clusters
        tracking = ad.reshape(c.centers, (B, 1, *c.centers.shape[-2:]))
        cs = ClusterState(c.centers, c.pi, tracking, np.zeros((B, P, n), dtype=bool))
        state.cluster = cluster_track_update(cs, starts, cache.H)
    if cache.H_sum is not None:
        h0 = ad.gather_rows(cache.H, starts)
        state.unvisited_sum = ad.sub(ad.reshape(cache.H_sum, (B, 1, cache.H.shape[-1])), h0)
    return state


def step_scores(state: RolloutState, cache: DecoderCache, params: nn.Params, cfg: ModelConfig,
                force_unit_choice: bool = False) -> Tensor:
    """Masked, clipped compatibility scores ``[B, P, n]`` for the next node."""
    H = cache.H
    d = H.shape[-1]
    h_last = ad.gather_rows(H, state.current)
    h_first = ad.gather_rows(H, state.start)
    mean = None
    if cfg.context == "average":
        remaining = (~state.visited).sum(-1, keepdims=True).astype(H.dtype)
        mean = ad.mul(state.unvisited_sum, 1.0 / remaining)
    ctx = build_context(h_last, h_first, params, cfg,
                        tracking=state.cluster.tracking if state.cluster else None,
                        unvisited_mean=mean)
    for g, (K, V) in enumerate(cache.glimpse_kv):
        ctx = nn.attend(ctx, K, V, params, f"glimpse.{g}", mask=state.visited)
    q = ad.matmul(ctx, params["ptr.W_Q"])
    if force_unit_choice:
        q = ad.mul(q, np.ones(d, dtype=H.dtype))
    else:
        w = choice_weights(q, params, cfg)
        if w is not None:
            q = ad.mul(q, w)
    compat = ad.scalar_mul(ad.matmul(q, cache.K_ptr_t), 1.0 / math.sqrt(d))
    scores = ad.scalar_mul(ad.tanh(compat), cfg.clip)
    return ad.masked_fill(scores, state.visited)


def _select(probs: np.ndarray, mode: str, rng: np.random.Generator | None) -> np.ndarray:
    if mode == "greedy":
        return probs.argmax(axis=-1)  # first maximum, i.e. lowest index on ties
    if mode != "sample":
        raise ValueError(f"mode must be greedy or sample, got {mode!r}")
    cum = np.cumsum(probs, axis=-1, dtype=np.float64)
    u = rng.random(probs.shape[:-1]) * cum[..., -1]
    return (cum > u[..., None]).argmax(axis=-1)


def decode_step(state: RolloutState, cache: DecoderCache, params: nn.Params, cfg: ModelConfig,
                mode: str = "greedy", rng: np.random.Generator | None = None,
                force_unit_choice: bool = False, record: bool = False,
                forced: np.ndarray | None = None):
    """Choose one node per rollout; returns ``(next_nodes [B,P], log_prob Tensor [B,P])``
    and advances ``state`` in place. ``forced`` replays given nodes instead of
    choosing."""
    if state.visited.all(axis=-1).any():
        raise DecodeError("decode_step called with no unvisited node")
    scores = step_scores(state, cache, params, cfg, force_unit_choice)
    if np.isnan(scores.data).any():
        bad = np.argwhere(np.isnan(scores.data).any(-1))
        raise DecodeError(f"NaN in decoder scores at (instance, start) {bad[:5].tolist()}; "
                          f"current={state.current[tuple(bad[0])]}, "
                          f"visited={np.flatnonzero(state.visited[tuple(bad[0])]).tolist()}")
    probs_t = ad.softmax_lastdim(scores)
    probs = np.where(probs_t.data < PROB_FLOOR, 0.0, probs_t.data)
    if record:
        state.trace.append(probs.astype(np.float64))
    if forced is None:
        nxt = _select(probs, mode, rng)
    else:
        nxt = np.asarray(forced, dtype=np.int64)
        if np.take_along_axis(state.visited, nxt[..., None], axis=-1).any():
            raise DecodeError("forced action revisits a node")
    B, P = nxt.shape
    n = probs.shape[-1]
    chosen = ad.gather_rows(ad.reshape(probs_t, (B, P, n, 1)), nxt[..., None])
    log_prob = ad.log(ad.reshape(chosen, (B, P)))
    state.sum_log_prob = ad.add(state.sum_log_prob, log_prob)
    np.put_along_axis(state.visited, nxt[..., None], True, axis=-1)
    state.current = nxt
    state.tours.append(nxt)
    if state.cluster is not None:
        state.cluster = cluster_track_update(state.cluster, nxt, cache.H)
    if state.unvisited_sum is not None:
        state.unvisited_sum = ad.sub(state.unvisited_sum, ad.gather_rows(cache.H, nxt))
    return nxt, log_prob


def closed_tour_lengths(coords: np.ndarray, tours: np.ndarray) -> np.ndarray:
    """Closed Euclidean length of ``tours [B, P, n]`` over ``coords [B, n, 2]``."""
    coords = np.asarray(coords, dtype=np.float64)
    pts = np.take_along_axis(coords[:, None, :, :], tours[..., None], axis=2)
    diff = pts - np.roll(pts, -1, axis=2)
    return np.sqrt((diff ** 2).sum(-1)).sum(-1)


@dataclass
class RolloutResult:
    tours: np.ndarray             # int [B, P, n]
    lengths: np.ndarray           # float64 [B, P]
    sum_log_prob: Tensor          # [B, P]
    trace: list[np.ndarray]


def rollout(coords, params: nn.Params, cfg: ModelConfig, starts=None, mode: str = "greedy",
            rng: np.random.Generator | None = None, force_unit_choice: bool = False,
            record: bool = False, actions: np.ndarray | None = None) -> RolloutResult:
    """Construct one tour per (instance, start). ``coords`` is ``[n, 2]`` or
    ``[B, n, 2]``; ``starts`` defaults to every node. ``actions [B, P, n]``
    replays known tours (their first column gives the starts)."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 2:
        coords = coords[None]
    n = coords.shape[1]
    if actions is not None:
        actions = np.asarray(actions, dtype=np.int64).reshape(len(coords), -1, n)
        starts = actions[..., 0]
    elif starts is None:
        starts = np.arange(n)
    cache = encode(coords, params, cfg)
    state = init_state(cache, starts)
    for t in range(1, n):
        decode_step(state, cache, params, cfg, mode, rng, force_unit_choice, record,
                    forced=None if actions is None else actions[..., t])
    tours = state.tour_so_far
    return RolloutResult(tours, closed_tour_lengths(coords, tours), state.sum_log_prob, state.trace)


def greedy_best(coords, params: nn.Params, cfg: ModelConfig, batch: int = 64):
    """Best-of-all-starts greedy tour per instance: ``(lengths [N], tours [N, n])``."""
    coords = np.asarray(coords, dtype=np.float64)
    lens, tours = [], []
    for i in range(0, len(coords), batch):
        res = rollout(coords[i:i + batch], params, cfg)
        best = res.lengths.argmin(axis=1)
        lens.append(res.lengths[np.arange(len(best)), best])
        tours.append(res.tours[np.arange(len(best)), best])
    return np.concatenate(lens), np.concatenate(tours)
