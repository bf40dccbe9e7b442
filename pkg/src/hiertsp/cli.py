"""Command-line entry point: ``hiertsp <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, model, oracle, training
from .config import VARIANTS, TrainConfig, profile

log = logging.getLogger("hiertsp")


class CliError(Exception):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _read_coords(path: str) -> list[np.ndarray]:
    """Instances from a coords file: JSON-lines test set, TSPLIB or ``x,y`` CSV."""
    p = Path(path)
    if p.suffix == ".jsonl":
        return data.load_testset(p).instances
    lines = p.read_text().splitlines()
    pts = data._parse_tsplib(lines, p) if p.suffix.lower() == ".tsp" else data._parse_csv(lines, p)
    coords = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    if len(coords) and ((coords < 0).any() or (coords > 1).any()):
        coords, _ = data.normalize(coords)
    return [coords]


def _load_model(path: str):
    ck = training.load_checkpoint(path)
    return ck.params, ck.config


def _write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


# ------------------------------------------------------------------ commands

def cmd_make_testset(args) -> None:
    if args.exact_refs and args.n > oracle.HELD_KARP_MAX_N:
        raise CliError(f"--exact-refs needs n <= {oracle.HELD_KARP_MAX_N}, got n={args.n}")
    if args.n < 3 or args.count < 1:
        raise CliError("--n must be >= 3 and --count >= 1")
    source = data.parse_source(args.source)
    if source is not None and args.n > source.M:
        raise CliError(f"--n {args.n} exceeds the map size {source.M}")
    rng = np.random.default_rng(args.seed)
    coords = data.generate(source, args.n, args.count, rng)
    refs = [oracle.held_karp(c).length if args.exact_refs else None for c in coords]
    ts = data.TestSet(list(coords), refs, [bool(args.exact_refs)] * len(coords), args.seed, args.source)
    data.save_testset(ts, args.out)
    print(f"wrote {len(ts)} instances (n={args.n}) to {args.out}")


def build_config(args) -> TrainConfig:
    overrides = {}
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {args.config}: {e}") from e
    model_over = dict(overrides.pop("model", {}) or {})
    if args.ablation:
        model_over["variant"] = args.ablation
    for key in ("seed", "epochs", "episodes_per_epoch", "source", "eval_testset", "dataset_limit"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return profile(args.profile, model=model_over, **overrides)


def cmd_train(args) -> None:
    cfg = build_config(args)
    run_dir = Path(args.run_dir)
    if args.resume and (run_dir / "config.json").exists():
        saved = TrainConfig.load(run_dir / "config.json")
        if saved.to_dict() != cfg.to_dict():
            raise CliError(f"{run_dir}/config.json differs from the requested config; refusing to resume")
    last = training.train(cfg, run_dir, resume=args.resume)
    print(f"final checkpoint: {last}")


def cmd_eval(args) -> None:
    params, cfg = _load_model(args.checkpoint)
    ts = data.load_testset(args.testset)
    coords = ts.coords
    if coords.shape[1] < 2:
        raise CliError("test instances need at least 2 cities")
    d_found = params["enc.in.W"].shape[1]
    if d_found != cfg.model.d:
        raise CliError(f"checkpoint embedding width mismatch: expected d={cfg.model.d}, found {d_found}")
    if coords.shape[1] != cfg.n:
        log.warning("test set n=%d differs from training n=%d", coords.shape[1], cfg.n)
    refs = np.asarray(ts.ref_lens, dtype=np.float64) if ts.has_refs else None
    ev = training.evaluate(params, cfg.model, coords, refs, augment=args.augment)
    rows = []
    for i, length in enumerate(ev["lengths"]):
        aug = ev["aug_lengths"][i] if args.augment else None
        ref = ts.ref_lens[i]
        best = aug if aug is not None else length
        gap = None if ref is None else (best / ref - 1.0) * 100.0
        rows.append([i, coords.shape[1], repr(float(length)), _fmt(aug), _fmt(ref), _fmt(gap)])
    if args.out_csv:
        _write_csv(args.out_csv, ["idx", "n", "model_len", "aug_len", "ref_len", "gap_pct"], rows)
    report = {"n_instances": len(coords), "mean_model_len": ev["eval_mean_len"],
              "gap_pct": ev["eval_gap_pct"], "augmented": bool(args.augment)}
    if args.augment:
        report["mean_aug_len"] = float(ev["aug_lengths"].mean())
        report["aug_gap_pct"] = ev["aug_eval_gap_pct"]
    if refs is not None:
        report["mean_ref_len"] = float(refs.mean())
    print(json.dumps(report, indent=2))


def paired_bootstrap(diff, n_boot: int = 10_000, seed: int = 0, alpha: float = 0.05):
    """Mean of ``diff`` and its percentile bootstrap confidence interval."""
    diff = np.asarray(diff, dtype=np.float64)
    rng = np.random.default_rng(seed)
    means = diff[rng.integers(0, len(diff), size=(n_boot, len(diff)))].mean(axis=1)
    lo, hi = np.quantile(means, [alpha / 2, 1 - alpha / 2])
    return float(diff.mean()), float(lo), float(hi)


def cmd_compare(args) -> None:
    pa, ca = _load_model(args.checkpoint_a)
    pb, cb = _load_model(args.checkpoint_b)
    ts = data.load_testset(args.testset)
    la, _ = model.greedy_best(ts.coords, pa, ca.model)
    lb, _ = model.greedy_best(ts.coords, pb, cb.model)
    diff = lb - la
    mean, lo, hi = paired_bootstrap(diff, seed=args.seed)
    if args.out_csv:
        _write_csv(args.out_csv, ["idx", "len_a", "len_b", "diff_b_minus_a"],
                   [[i, repr(float(a)), repr(float(b)), repr(float(dd))]
                    for i, (a, b, dd) in enumerate(zip(la, lb, diff))])
    print(json.dumps({"variant_a": ca.model.variant, "variant_b": cb.model.variant,
                      "mean_len_a": float(la.mean()), "mean_len_b": float(lb.mean()),
                      "mean_diff_b_minus_a": mean, "ci95": [lo, hi], "n_instances": len(diff)},
                     indent=2))


def cmd_solve(args) -> None:
    instances = _read_coords(args.coords_file)
    coords = instances[0]
    n = len(coords)
    if n < 2:
        raise CliError(f"need at least 2 cities, got {n}")
    if n == 2:
        order = [0, 1]
        print(json.dumps({"order": order, "length": oracle.tour_length(coords, order)}))
        return
    params, cfg = _load_model(args.checkpoint)
    mcfg = cfg.model
    if args.mode == "greedy":
        res = model.rollout(coords, params, mcfg, mode="greedy", record=args.trace)
        k = int(res.lengths[0].argmin())
        order, length = res.tours[0, k], res.lengths[0, k]
        trace = [step[0, k] for step in res.trace]
    else:
        rng = np.random.default_rng(args.seed)
        best = None
        for _ in range(args.samples):
            res = model.rollout(coords, params, mcfg, starts=[0], mode="sample", rng=rng, record=args.trace)
            if best is None or res.lengths[0, 0] < best.lengths[0, 0]:
                best = res
        order, length = best.tours[0, 0], best.lengths[0, 0]
        trace = [step[0, 0] for step in best.trace]
    out = {"order": [int(i) for i in order], "length": float(length)}
    if args.trace:
        out["trace"] = [[float(p) for p in row] for row in trace]
    print(json.dumps(out))


def cmd_dump_clusters(args) -> None:
    params, cfg = _load_model(args.checkpoint)
    mcfg = cfg.model
    if not mcfg.uses_clusters:
        raise CliError(f"checkpoint variant {mcfg.variant!r} has no clustering layer")
    instances = _read_coords(args.coords_file)
    node_rows, center_rows = [], []
    for inst_id, coords in enumerate(instances):
        cache = model.encode(coords, params, mcfg)
        pi = cache.clusters.pi.data[0].astype(np.float64)
        centers = cache.clusters.centers.data[0].astype(np.float64)
        for i, (xy, row) in enumerate(zip(coords, pi)):
            node_rows.append([inst_id, i, repr(float(xy[0])), repr(float(xy[1])), int(row.argmax()),
                              *[repr(float(p)) for p in row]])
        for j, c in enumerate(centers):
            center_rows.append([inst_id, j, *[repr(float(v)) for v in c]])
    nc, d = mcfg.n_clusters, mcfg.d
    out = Path(args.out_csv)
    _write_csv(out, ["instance_id", "node_id", "x", "y", "argmax_cluster", *[f"pi_{j}" for j in range(nc)]],
               node_rows)
    centers_path = out.with_name(out.stem + ".centers.csv")
    _write_csv(centers_path, ["instance_id", "center_id", *[f"v_{k}" for k in range(d)]], center_rows)
    print(f"wrote {len(node_rows)} node rows to {out} and {len(center_rows)} center rows to {centers_path}")


def cmd_oracle(args) -> None:
    ts = data.load_testset(args.testset)
    rows = []
    for i, c in enumerate(ts.instances):
        n = len(c)
        hk = oracle.held_karp(c).length if n <= oracle.HELD_KARP_MAX_N else None
        nn = oracle.nearest_neighbor(c, 0)
        nn2 = oracle.two_opt(c, nn)
        rows.append([i, n, _fmt(hk), repr(nn.length), repr(nn2.length)])
    _write_csv(args.out_csv, ["idx", "n", "hk_len", "nn_len", "nn2opt_len"], rows)
    print(f"wrote {len(rows)} rows to {args.out_csv}")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hiertsp", description="Hierarchical neural TSP solver")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-testset", help="generate a JSON-lines test set")
    p.add_argument("--source", default="uniform", help="uniform | map:<path> | blobs:k=5,sigma=0.03[,seed=0]")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exact-refs", type=_bool, default=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_testset)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON file of TrainConfig overrides")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--ablation", choices=VARIANTS)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--episodes-per-epoch", type=int)
    p.add_argument("--source")
    p.add_argument("--eval-testset")
    p.add_argument("--dataset-limit", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy multi-start evaluation on a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--testset", required=True)
    p.add_argument("--augment", type=_bool, default=False)
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="paired per-instance comparison of two checkpoints")
    p.add_argument("--checkpoint-a", required=True)
    p.add_argument("--checkpoint-b", required=True)
    p.add_argument("--testset", required=True)
    p.add_argument("--out-csv")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("solve", help="solve one instance and print the tour")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--coords-file", required=True)
    p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", action="store_true")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("dump-clusters", help="write soft-cluster responsibilities as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--coords-file", required=True)
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_dump_clusters)

    p = sub.add_parser("oracle", help="Held-Karp, nearest neighbour and 2-opt on a test set")
    p.add_argument("--testset", required=True)
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_oracle)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (CliError, data.DataError, training.CheckpointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
