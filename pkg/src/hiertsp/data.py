"""City maps, instance sampling, augmentation and JSON-lines test sets."""
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

TESTSET_VERSION = 1


class DataError(ValueError):
    pass


@dataclass
class CityMap:
    name: str
    coords: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.coords)


@dataclass
class TspInstance:
    coords: np.ndarray
    source: str | None = None

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def hash(self) -> str:
        return instance_hash(self.coords)


@dataclass
class TestSet:
    instances: list[np.ndarray]
    ref_lens: list[float | None]
    ref_exact: list[bool]
    seed: int | None = None
    source: str | None = None

    __test__ = False  # not a pytest class

    def __len__(self):
        return len(self.instances)

    @property
    def coords(self) -> np.ndarray:
        return np.stack(self.instances)

    @property
    def has_refs(self) -> bool:
        return all(r is not None for r in self.ref_lens)


def instance_hash(coords) -> str:
    return hashlib.sha1(np.ascontiguousarray(coords, dtype=np.float64).tobytes()).hexdigest()


# ----------------------------------------------------------------- maps

def normalize(raw) -> tuple[np.ndarray, dict]:
    """Shift to the origin and scale by the longer side, preserving aspect."""
    pts = np.asarray(raw, dtype=np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = hi - lo
    scale = extent.max()
    if scale <= 0:
        raise DataError("cannot normalise: all points are identical")
    out = np.clip((pts - lo) / scale, 0.0, 1.0)
    return out, {"min": lo.tolist(), "max": hi.tolist(), "scale": float(scale)}


def _parse_tsplib(lines: list[str], path) -> list[tuple[float, float]]:
    pts = []
    in_section = False
    for lineno, line in enumerate(lines, 1):
        s = line.strip()
        if not s:
            continue
        if not in_section:
            in_section = s.startswith("NODE_COORD_SECTION")
            continue
        if s == "EOF" or not s[0].isdigit() and s[0] not in "+-.":
            break
        parts = s.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 'index x y', got {s!r}")
        try:
            pts.append((float(parts[1]), float(parts[2])))
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric coordinate in {s!r}") from None
    if not in_section:
        raise DataError(f"{path}: no NODE_COORD_SECTION")
    return pts


def _parse_csv(lines: list[str], path) -> list[tuple[float, float]]:
    pts = []
    for lineno, line in enumerate(lines, 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = [p.strip() for p in s.split(",")]
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'x,y', got {s!r}")
        try:
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError:
            if lineno == 1 and not pts:
                continue  # header row
            raise DataError(f"{path}:{lineno}: non-numeric coordinate in {s!r}") from None
    return pts


def load_map(path, fmt: str | None = None) -> CityMap:
    """Read a TSPLIB (NODE_COORD_SECTION) or ``x,y`` CSV file and normalise it."""
    path = Path(path)
    if fmt is None:
        fmt = "tsplib" if path.suffix.lower() == ".tsp" else "csv"
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read map {path}: {e}") from e
    if fmt == "tsplib":
        pts = _parse_tsplib(lines, path)
    elif fmt == "csv":
        pts = _parse_csv(lines, path)
    else:
        raise DataError(f"unknown map format {fmt!r}")
    raw = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    uniq, first = np.unique(raw, axis=0, return_index=True)
    if len(uniq) < len(raw):
        log.warning("%s: dropped %d duplicate cities", path, len(raw) - len(uniq))
        raw = raw[np.sort(first)]
    if len(raw) < 3:
        raise DataError(f"{path}: need at least 3 cities, found {len(raw)}")
    coords, bounds = normalize(raw)
    return CityMap(path.stem, coords, {"source": str(path), **bounds})


def blobs_map(k: int, sigma: float, seed: int = 0, m: int = 2000) -> CityMap:
    """Synthetic clustered map: ``k`` equal Gaussian blobs truncated to the unit square.

    Centers come from ``seed`` and never change, so every instance sampled from
    the map shares the same structure.
    """
    if k < 1 or sigma <= 0 or m < k:
        raise DataError(f"bad blob parameters k={k} sigma={sigma} m={m}")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.1, 0.9, size=(k, 2))
    sizes = np.full(k, m // k)
    sizes[: m % k] += 1
    pts, labels = [], []
    for j, (c, size) in enumerate(zip(centers, sizes)):
        got = np.empty((0, 2))
        while len(got) < size:
            draw = rng.normal(c, sigma, size=(2 * size, 2))
            draw = draw[((draw >= 0) & (draw <= 1)).all(axis=1)]
            got = np.concatenate([got, draw])
        pts.append(got[:size])
        labels.append(np.full(size, j))
    coords = np.concatenate(pts)
    return CityMap(f"blobs-k{k}-s{sigma}-seed{seed}", coords,
                   {"k": k, "sigma": sigma, "seed": seed, "centers": centers.tolist(),
                    "labels": np.concatenate(labels).tolist()})


_BLOBS = re.compile(r"^blobs:(.*)$")


def parse_source(spec: str) -> CityMap | None:
    """``uniform`` -> None, ``map:<path>`` or ``blobs:k=5,sigma=0.03[,seed=1][,m=2000]``."""
    if spec == "uniform":
        return None
    if spec.startswith("map:"):
        return load_map(spec[4:])
    mt = _BLOBS.match(spec)
    if mt:
        kw = {}
        for item in filter(None, mt.group(1).split(",")):
            key, _, val = item.partition("=")
            if key not in ("k", "sigma", "seed", "m") or not val:
                raise DataError(f"bad blobs spec item {item!r}; grammar is blobs:k=<int>,sigma=<real>[,seed=<int>]")
            kw[key] = float(val) if key == "sigma" else int(val)
        if "k" not in kw or "sigma" not in kw:
            raise DataError(f"blobs spec needs k and sigma: {spec!r}")
        return blobs_map(**kw)
    raise DataError(f"unknown source {spec!r}; use uniform, map:<path> or blobs:k=..,sigma=..")


# ----------------------------------------------------------------- sampling

def sample_indices(city_map: CityMap, n: int, rng: np.random.Generator) -> np.ndarray:
    if n > city_map.M:
        raise DataError(f"cannot sample n={n} cities from a map of M={city_map.M}")
    return rng.choice(city_map.M, size=n, replace=False)


def sample_instance(city_map: CityMap, n: int, rng: np.random.Generator) -> TspInstance:
    idx = sample_indices(city_map, n, rng)
    return TspInstance(city_map.coords[idx], city_map.name)


def gen_uniform(n: int, rng: np.random.Generator) -> TspInstance:
    return TspInstance(rng.random((n, 2)), "uniform")


def generate(source: CityMap | None, n: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` instances as a ``[count, n, 2]`` array."""
    if source is None:
        return rng.random((count, n, 2))
    return np.stack([sample_instance(source, n, rng).coords for _ in range(count)])


# ----------------------------------------------------------------- augmentation

def augment(coords) -> np.ndarray:
    """The 8 symmetries of the unit square, ``[..., n, 2] -> [8, ..., n, 2]``."""
    c = np.asarray(coords, dtype=np.float64)
    x, y = c[..., 0], c[..., 1]
    pairs = [(x, y), (y, x), (x, 1 - y), (y, 1 - x),
             (1 - x, y), (1 - y, x), (1 - x, 1 - y), (1 - y, 1 - x)]
    return np.stack([np.stack(p, axis=-1) for p in pairs])


# ----------------------------------------------------------------- test sets

def save_testset(ts: TestSet, path) -> None:
    path = Path(path)
    header = {"format": "hiertsp-testset", "version": TESTSET_VERSION,
              "seed": ts.seed, "source": ts.source, "count": len(ts)}
    lines = [json.dumps(header)]
    for coords, ref, exact in zip(ts.instances, ts.ref_lens, ts.ref_exact):
        rec = {"coords": np.asarray(coords, dtype=np.float64).tolist(),
               "ref_len": None if ref is None else float(ref), "ref_exact": bool(exact)}
        lines.append(json.dumps(rec))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise DataError(f"cannot write test set {path}: {e}") from e


def load_testset(path) -> TestSet:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise DataError(f"cannot read test set {path}: {e}") from e
    if text and not text.endswith("\n"):
        raise DataError(f"{path}: truncated final line")
    seed = source = None
    count = None
    inst, refs, exact = [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{lineno}: malformed or truncated line ({e.msg})") from None
        if "format" in rec:
            if rec.get("version") != TESTSET_VERSION:
                raise DataError(f"{path}: test set version {rec.get('version')} "
                                f"!= supported {TESTSET_VERSION}")
            seed, source, count = rec.get("seed"), rec.get("source"), rec.get("count")
            continue
        try:
            inst.append(np.asarray(rec["coords"], dtype=np.float64))
            refs.append(rec.get("ref_len"))
            exact.append(bool(rec.get("ref_exact", False)))
        except KeyError:
            raise DataError(f"{path}:{lineno}: missing 'coords'") from None
    if count is not None and count != len(inst):
        raise DataError(f"{path}: header promises {count} instances, found {len(inst)}")
    return TestSet(inst, refs, exact, seed, source)
