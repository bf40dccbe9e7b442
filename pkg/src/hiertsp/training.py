"""REINFORCE with the POMO shared baseline, Adam, checkpoints and the epoch loop."""
from __future__ import annotations

import csv
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data, model, oracle
from .autodiff import Tensor
from .config import ModelConfig, TrainConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MAGIC = b"HTSPCKPT"
METRICS_HEADER = ["epoch", "mean_train_len", "eval_mean_len", "eval_gap_pct", "aug_eval_gap_pct", "seconds"]


class CheckpointError(ValueError):
    pass


# ------------------------------------------------------------------ loss

def pomo_loss(lengths, sum_log_probs: Tensor) -> Tensor:
    """REINFORCE loss with the mean over starts as baseline.

    ``lengths`` is ``[N]`` or ``[B, N]``; reward is the negated length. The
    per-instance loss is ``-(1/N) sum_i (R_i - mean R) log p_i`` and the batch
    loss averages over instances.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    if lengths.ndim == 1:
        lengths = lengths[None]
        sum_log_probs = ad.reshape(sum_log_probs, (1, lengths.shape[1]))
    if lengths.shape[-1] < 2:
        raise ValueError("pomo_loss needs at least 2 starts per instance for a shared baseline")
    if sum_log_probs.shape != lengths.shape:
        raise ValueError(f"pomo_loss: lengths {lengths.shape} vs log-probs {sum_log_probs.shape}")
    advantage = advantages(lengths).astype(sum_log_probs.dtype)
    return ad.scalar_mul(ad.reduce_mean(ad.mul(advantage, sum_log_probs)), -1.0)


def advantages(lengths) -> np.ndarray:
    rewards = -np.asarray(lengths, dtype=np.float64)
    return rewards - rewards.mean(axis=-1, keepdims=True)


# ------------------------------------------------------------------ adam

@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> "OptState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def clip_grads(grads: dict[str, np.ndarray], bound: float) -> dict[str, np.ndarray]:
    return {k: np.clip(g, -bound, bound) for k, g in grads.items()}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], opt: OptState,
              lr: float, weight_decay: float = 0.0, grad_clip: float | None = None,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place Adam update. Gradients are clipped elementwise first; weight
    decay enters as an L2 term added to the clipped gradient."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter group {name!r}")
    if grad_clip is not None:
        grads = clip_grads(grads, grad_clip)
    b1, b2 = betas
    opt.step += 1
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(p.data.dtype, copy=False)


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(path, params: dict[str, Tensor], config: TrainConfig,
                    opt: OptState | None = None, extra: dict | None = None) -> None:
    """Header (format_version, config JSON, block index) followed by raw
    little-endian row-major blocks."""
    blocks = [(f"param/{k}", p.data) for k, p in params.items()]
    if opt is not None:
        blocks += [(f"adam_m/{k}", a) for k, a in opt.m.items()]
        blocks += [(f"adam_v/{k}", a) for k, a in opt.v.items()]
    index, offset = [], 0
    payloads = []
    for name, arr in blocks:
        arr = np.ascontiguousarray(arr)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {"format_version": CHECKPOINT_VERSION, "config": config.to_dict(),
              "opt_step": opt.step if opt is not None else None, "blocks": index, **(extra or {})}
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(hbytes)))
            f.write(hbytes)
            for raw in payloads:
                f.write(raw)
        tmp.replace(path)
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    config: TrainConfig
    opt: OptState | None
    header: dict


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('format_version')} "
                              f"!= supported {CHECKPOINT_VERSION}")
    body = memoryview(blob)[16 + hlen:]
    params, m, v = {}, {}, {}
    for b in header["blocks"]:
        dt = np.dtype(b["dtype"]).newbyteorder("<")
        raw = body[b["offset"]:b["offset"] + b["nbytes"]]
        if len(raw) != b["nbytes"]:
            raise CheckpointError(f"{path}: block {b['name']} truncated")
        arr = np.frombuffer(raw, dtype=dt).reshape(b["shape"]).astype(dt.newbyteorder("="))
        kind, _, name = b["name"].partition("/")
        if kind == "param":
            params[name] = Tensor(arr, requires_grad=True)
        elif kind == "adam_m":
            m[name] = arr
        elif kind == "adam_v":
            v[name] = arr
    opt = OptState(m, v, header["opt_step"]) if m else None
    config = TrainConfig.from_dict(header["config"])
    return Checkpoint(params, config, opt, header)


# ------------------------------------------------------------------ evaluation

def evaluate(params, mcfg: ModelConfig, coords: np.ndarray, refs=None, augment: bool = False,
             batch: int = 64) -> dict:
    """Greedy multi-start evaluation; optional 8-fold augmentation and gap."""
    lens, _ = model.greedy_best(coords, params, mcfg, batch)
    out = {"lengths": lens, "eval_mean_len": float(lens.mean()), "eval_gap_pct": None,
           "aug_lengths": None, "aug_eval_gap_pct": None}
    if augment:
        aug = data.augment(coords)                       # [8, N, n, 2]
        per = np.stack([model.greedy_best(a, params, mcfg, batch)[0] for a in aug], axis=1)
        out["aug_lengths"] = per.min(axis=1)
    if refs is not None:
        out["eval_gap_pct"] = oracle.opt_gap(lens, refs).gap_pct
        if augment:
            out["aug_eval_gap_pct"] = oracle.opt_gap(per, refs, augmented=True).gap_pct
    return out


# ------------------------------------------------------------------ training loop

def _checkpoint_path(run_dir: Path, epoch: int) -> Path:
    return run_dir / "checkpoints" / f"epoch_{epoch:04d}.ckpt"


def latest_checkpoint(run_dir) -> Path | None:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("epoch_*.ckpt"))
    return ckpts[-1] if ckpts else None


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def train(cfg: TrainConfig, run_dir, resume: bool = False, progress=None) -> Path:
    """Run training, writing ``config.json``, per-epoch checkpoints and
    ``metrics.csv`` under ``run_dir``. Returns the last checkpoint path."""
    run_dir = Path(run_dir)
    try:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create run directory {run_dir}: {e}") from e
    cfg_path = run_dir / "config.json"
    metrics_path = run_dir / "metrics.csv"
    dtype = cfg.np_dtype
    mcfg = cfg.model
    source = data.parse_source(cfg.source)

    rng = np.random.default_rng(cfg.seed)
    start_epoch = 1
    seen: set[str] = set()
    episodes_seen = 0
    last = latest_checkpoint(run_dir) if resume else None
    if last is not None:
        ck = load_checkpoint(last)
        if ck.config.to_dict() != cfg.to_dict():
            raise CheckpointError(f"{last}: checkpoint config does not match the requested config")
        params, opt = ck.params, ck.opt
        rng.bit_generator.state = ck.header["rng_state"]
        start_epoch = ck.header["epoch"] + 1
        seen = set(ck.header.get("seen_hashes", []))
        episodes_seen = ck.header.get("episodes_seen", 0)
        _truncate_metrics(metrics_path, ck.header["epoch"])
    else:
        if resume:
            log.info("no checkpoint in %s; starting fresh", run_dir)
        if any((run_dir / "checkpoints").glob("epoch_*.ckpt")):
            raise CheckpointError(f"{run_dir} already holds checkpoints; pass resume to continue")
        cfg_path.write_text(cfg.to_json() + "\n")
        params = model.init_params(mcfg, cfg.seed, dtype)
        opt = OptState.zeros_like(params)
        with open(metrics_path, "w", newline="") as f:
            csv.writer(f).writerow(METRICS_HEADER)

    # fixed pools come from their own streams so they do not shift the training stream
    pool = None
    if cfg.dataset_limit is not None:
        pool = data.generate(source, cfg.n, cfg.dataset_limit, np.random.default_rng([cfg.seed, 1]))
    if cfg.eval_testset:
        ts = data.load_testset(cfg.eval_testset)
        eval_coords = ts.coords
        eval_refs = np.asarray(ts.ref_lens, dtype=np.float64) if ts.has_refs else None
    else:
        eval_coords = data.generate(source, cfg.n, cfg.eval_size, np.random.default_rng([cfg.seed, 2]))
        eval_refs = None

    last_path = last
    for epoch in range(start_epoch, cfg.epochs + 1):
        t0 = time.perf_counter()
        if pool is not None:
            order = rng.permutation(len(pool))
        done = 0
        batch_means = []
        while done < cfg.episodes_per_epoch:
            bs = min(cfg.batch_size, cfg.episodes_per_epoch - done)
            if pool is not None:
                idx = np.take(order, np.arange(done, done + bs), mode="wrap")
                coords = pool[idx]
                seen.update(data.instance_hash(c) for c in coords)
            else:
                coords = data.generate(source, cfg.n, bs, rng)
            for p in params.values():
                p.grad = None
            with ad.Graph() as g:
                res = model.rollout(coords, params, mcfg, mode="sample", rng=rng)
                loss = pomo_loss(res.lengths, res.sum_log_prob)
            ad.backward(g, loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            adam_step(params, grads, opt, cfg.learning_rate, cfg.weight_decay, cfg.grad_clip)
            batch_means.append(float(res.lengths.mean()) * bs)
            done += bs
            episodes_seen += bs
            if progress is not None:
                progress(epoch, done, float(res.lengths.mean()))
        mean_train = sum(batch_means) / cfg.episodes_per_epoch
        ev = evaluate(params, mcfg, eval_coords, eval_refs, augment=eval_refs is not None,
                      batch=cfg.eval_batch)
        seconds = time.perf_counter() - t0
        row = [epoch, repr(mean_train), repr(ev["eval_mean_len"]), _fmt(ev["eval_gap_pct"]),
               _fmt(ev["aug_eval_gap_pct"]), f"{seconds:.3f}"]
        with open(metrics_path, "a", newline="") as f:
            csv.writer(f).writerow(row)
        last_path = _checkpoint_path(run_dir, epoch)
        extra = {"epoch": epoch, "rng_state": _rng_state_to_json(rng), "seed": cfg.seed,
                 "episodes_seen": episodes_seen, "distinct_instances": len(seen) if pool is not None else None}
        if pool is not None:
            extra["seen_hashes"] = sorted(seen)
        save_checkpoint(last_path, params, cfg, opt, extra)
        log.info("epoch %d: train %.4f eval %.4f gap %s (%.1fs)", epoch, mean_train,
                 ev["eval_mean_len"], _fmt(ev["eval_gap_pct"]), seconds)
    return last_path


def _truncate_metrics(path: Path, epoch: int) -> None:
    """Drop metric rows past ``epoch`` so a resumed run never duplicates rows."""
    if not path.exists():
        with open(path, "w", newline="") as f:
            csv.writer(f).writerow(METRICS_HEADER)
        return
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    keep = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= epoch]
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(keep)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
