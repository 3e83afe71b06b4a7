"""Feature files, checkpoints, dataset manifests and the synthetic pyramid generator.

HAGF feature file (little-endian)::

    magic   4s   b"HAGF"
    version u32  1
    level   u32
    n       u64
    d       u64
    data    n*d float32, row-major

Checkpoint file (little-endian)::

    magic   4s   b"HAGC"
    version u32  1
    meta    u32 length + UTF-8 JSON
    count   u32
    count x { u16 name length, name, u32 ndim, ndim x u64 dims, float64 data }
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .pyramid import QuadTreeIndex, build_quadtree
from .rng import Xoshiro256
from .tensor import NonFiniteError, Tensor

HAGF_MAGIC = b"HAGF"
HAGF_VERSION = 1
_HAGF_HEADER = struct.Struct("<4sIIQQ")

CKPT_MAGIC = b"HAGC"
CKPT_VERSION = 1

MANIFEST_VERSION = 1


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


# ---------------------------------------------------------------- HAGF


@dataclass(frozen=True)
class HagfHeader:
    magic: str
    version: int
    level: int
    n: int
    d: int


def write_features(path, features, level: int = 0) -> None:
    arr = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"features must be n x d, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError("refusing to write non-finite features")
    n, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HAGF_HEADER.pack(HAGF_MAGIC, HAGF_VERSION, int(level), n, d))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def _parse_hagf_header(raw: bytes) -> HagfHeader:
    if len(raw) < 4 or raw[:4] != HAGF_MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {HAGF_MAGIC!r}")
    if len(raw) < _HAGF_HEADER.size:
        raise TruncatedError(f"header needs {_HAGF_HEADER.size} bytes, file has {len(raw)}")
    magic, version, level, n, d = _HAGF_HEADER.unpack_from(raw)
    if version != HAGF_VERSION:
        raise VersionMismatchError(f"HAGF version {version} not supported (expected {HAGF_VERSION})")
    return HagfHeader(magic.decode("ascii"), version, level, n, d)


def read_header(path) -> HagfHeader:
    with open(path, "rb") as fh:
        return _parse_hagf_header(fh.read(_HAGF_HEADER.size))


def read_features(path, with_level: bool = False):
    """Load a HAGF file as a float64 tensor (optionally with its level)."""
    raw = Path(path).read_bytes()
    hdr = _parse_hagf_header(raw)
    need = _HAGF_HEADER.size + 4 * hdr.n * hdr.d
    if len(raw) < need:
        raise TruncatedError(f"payload declares {hdr.n}x{hdr.d} floats ({need} bytes) but file has {len(raw)} bytes")
    arr = np.frombuffer(raw, dtype="<f4", count=hdr.n * hdr.d, offset=_HAGF_HEADER.size)
    t = Tensor(arr.astype(np.float64).reshape(hdr.n, hdr.d))
    return (t, hdr.level) if with_level else t


# ---------------------------------------------------------------- checkpoints


def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.astype("<f8").tobytes(order="C"))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint_header(path) -> tuple[int, dict, list[tuple[str, tuple[int, ...]]]]:
    version, meta, tensors = _read_checkpoint(Path(path).read_bytes(), load_data=False)
    return version, meta, [(k, v) for k, v in tensors.items()]


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    _, meta, tensors = _read_checkpoint(Path(path).read_bytes(), load_data=True)
    return meta, tensors


def _read_checkpoint(raw: bytes, load_data: bool):
    if raw[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {CKPT_MAGIC!r}")
    rd = _Reader(raw)
    _, version, meta_len = rd.unpack("<4sII")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version} not supported (expected {CKPT_VERSION})")
    meta = json.loads(rd.take(meta_len).decode("utf-8"))
    (count,) = rd.unpack("<I")
    out = {}
    for _ in range(count):
        (klen,) = rd.unpack("<H")
        name = rd.take(klen).decode("utf-8")
        (ndim,) = rd.unpack("<I")
        shape = rd.unpack(f"<{ndim}Q") if ndim else ()
        payload = rd.take(8 * int(np.prod(shape, dtype=np.int64)))
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64) if load_data else tuple(shape)
    return version, meta, out


# ---------------------------------------------------------------- pyramids


@dataclass
class FeaturePyramid:
    slide_id: str
    label: int
    levels: list[Tensor]  # levels[j] is F^j; j = 0 is the finest
    index: QuadTreeIndex
    provenance: str = "synthetic"
    planted: list[np.ndarray] | None = None  # per-level ground-truth lesion flags

    def __post_init__(self):
        if len(self.levels) != self.index.num_levels:
            raise ValueError(f"{self.slide_id}: {len(self.levels)} feature levels but index has {self.index.num_levels}")
        dims = {f.shape[1] for f in self.levels}
        if len(dims) != 1:
            raise ValueError(f"{self.slide_id}: feature dims differ across levels: {sorted(dims)}")
        for j, (f, n) in enumerate(zip(self.levels, self.index.counts)):
            if f.shape[0] != n:
                raise ValueError(f"{self.slide_id}: level {j} has {f.shape[0]} rows, index expects {n}")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def feature_dim(self) -> int:
        return self.levels[0].shape[1]


@dataclass
class SynthConfig:
    """Synthetic slides.

    Lesions are straight runs of ``lesion_size`` patches at ``lesion_level``
    (the coarsest level when ``None``); every finer descendant of a lesion
    patch is planted too.
    """

    num_slides: int = 200
    class_count: int = 2
    coarse_grid: tuple[int, int] = (8, 8)
    num_levels: int = 3
    tumor_rate: float = 0.5
    lesion_count: tuple[int, int] = (1, 2)
    lesion_size: tuple[int, int] = (1, 4)
    signal_strength: tuple[float, ...] = (0.5, 1.0, 2.0)  # coarsest -> finest
    noise_sigma: float = 1.0
    mean_scale: float = 0.0  # mu0 is mean_scale * N(0, I); 0 centres the background
    coarse_noise_ratio: float = 0.25
    feature_dim: int = 64
    background_rate: float = 0.0
    lesion_level: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.coarse_grid = tuple(int(x) for x in self.coarse_grid)
        self.lesion_count = tuple(int(x) for x in self.lesion_count)
        self.lesion_size = tuple(int(x) for x in self.lesion_size)
        self.signal_strength = tuple(float(x) for x in self.signal_strength)
        if len(self.signal_strength) != self.num_levels:
            raise ValueError(f"signal_strength needs {self.num_levels} entries, got {len(self.signal_strength)}")
        if any(a > b for a, b in zip(self.signal_strength, self.signal_strength[1:])):
            raise ValueError("signal_strength must be non-increasing towards coarser levels")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if not 0.0 <= self.tumor_rate <= 1.0:
            raise ValueError("tumor_rate must be in [0, 1]")
        if self.lesion_level is not None and not 0 <= self.lesion_level < self.num_levels:
            raise ValueError(f"lesion_level must be in [0, {self.num_levels})")
        side = min(self.coarse_grid) << (self.num_levels - 1 - self.cell_level)
        if self.lesion_size[1] > side:
            raise ValueError(f"lesion of {self.lesion_size[1]} cells does not fit a grid of side {side}")
        if self.lesion_count[0] < 1 or self.lesion_count[0] > self.lesion_count[1]:
            raise ValueError("lesion_count must be a (min, max) pair with min >= 1")
        if self.lesion_size[0] < 1 or self.lesion_size[0] > self.lesion_size[1]:
            raise ValueError("lesion_size must be a (min, max) pair with min >= 1")

    @property
    def cell_level(self) -> int:
        return self.num_levels - 1 if self.lesion_level is None else self.lesion_level

    def to_dict(self) -> dict:
        return asdict(self)


def _place_lesions(rng: Xoshiro256, cfg: SynthConfig, index: QuadTreeIndex, cell_level: int) -> np.ndarray:
    coords = index.coords(cell_level)
    lookup = {(int(r), int(c)): i for i, (r, c) in enumerate(coords)}
    rows, cols = index.grid_dims[cell_level]
    taken: set[int] = set()
    count = cfg.lesion_count[0] + rng.integers(cfg.lesion_count[1] - cfg.lesion_count[0] + 1)
    for _ in range(count):
        for _attempt in range(200):
            size = cfg.lesion_size[0] + rng.integers(cfg.lesion_size[1] - cfg.lesion_size[0] + 1)
            vertical = rng.integers(2) == 1
            h, w = (size, 1) if vertical else (1, size)
            r0, c0 = rng.integers(rows - h + 1), rng.integers(cols - w + 1)
            cells = [lookup.get((r0 + dr, c0 + dc)) for dr in range(h) for dc in range(w)]
            if None in cells or taken.intersection(cells):
                continue
            taken.update(cells)
            break
    return np.array(sorted(taken), dtype=np.int64)


def synth_generate(cfg: SynthConfig) -> list[FeaturePyramid]:
    """Generate labelled slides with planted lesions and content-consistent levels.

    Finest features are ``mu0 + noise_sigma * N(0, I)`` (``mu0`` is a random
    direction scaled by ``mean_scale``), plus
    ``signal[0] * u_Y`` on lesion patches.  Each coarser patch is the mean of
    its four children plus ``coarse_noise_ratio * noise_sigma * N(0, I)``,
    plus ``signal[j] * u_Y`` when it overlaps a lesion.  All values are
    rounded to float32 so in-memory and on-disk slides agree.
    """
    root = Xoshiro256(cfg.seed)
    glob = root.spawn(0)
    d, L = cfg.feature_dim, cfg.num_levels
    mu0 = cfg.mean_scale * glob.normal(d)
    directions = np.zeros((cfg.class_count, d))
    for c in range(1, cfg.class_count):
        u = glob.normal(d)
        directions[c] = u / np.linalg.norm(u)
    n_pos = int(round(cfg.tumor_rate * cfg.num_slides))
    order = glob.permutation(cfg.num_slides)
    labels = np.zeros(cfg.num_slides, dtype=np.int64)
    for rank, slide in enumerate(order[:n_pos]):
        labels[slide] = 1 + rank % (cfg.class_count - 1)
    signal = cfg.signal_strength[::-1]  # index by level, finest first
    cell_level = cfg.cell_level
    width = len(str(max(cfg.num_slides - 1, 0)))
    slides = []
    for s in range(cfg.num_slides):
        rng = root.spawn(s + 1)
        mask = None
        if cfg.background_rate > 0:
            mask = rng.random(cfg.coarse_grid[0] * cfg.coarse_grid[1]).reshape(cfg.coarse_grid) >= cfg.background_rate
            if not mask.any():
                mask.reshape(-1)[0] = True
        index = build_quadtree(cfg.coarse_grid, L, mask)
        counts = index.counts
        planted0 = np.zeros(counts[0], dtype=bool)
        label = int(labels[s])
        if label > 0:
            per_cell = 4**cell_level
            for cell in _place_lesions(rng, cfg, index, cell_level):
                planted0[cell * per_cell:(cell + 1) * per_cell] = True
        planted = [planted0.reshape(counts[j], 4**j).any(axis=1) for j in range(L)]
        u = directions[label]
        levels = []
        f = mu0 + cfg.noise_sigma * rng.normal(counts[0] * d).reshape(counts[0], d)
        f = f + signal[0] * planted[0][:, None] * u
        levels.append(f.astype(np.float32).astype(np.float64))
        for j in range(1, L):
            f = levels[j - 1].reshape(counts[j], 4, d).mean(axis=1)
            f = f + cfg.coarse_noise_ratio * cfg.noise_sigma * rng.normal(counts[j] * d).reshape(counts[j], d)
            f = f + signal[j] * planted[j][:, None] * u
            levels.append(f.astype(np.float32).astype(np.float64))
        slides.append(FeaturePyramid(f"slide_{s:0{width}d}", label, [Tensor(x) for x in levels], index,
                                     "synthetic", planted))
    return slides


# ---------------------------------------------------------------- splits


def split(slide_ids, labels, ratios=(0.6, 0.15, 0.25), seed: int = 0,
          names=("train", "val", "test")) -> dict[str, list[str]]:
    """Seeded stratified split.  Per class, split sizes use largest-remainder rounding."""
    ratios = tuple(float(r) for r in ratios)
    if any(r <= 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be positive and sum to 1, got {ratios}")
    if len(ratios) != len(names):
        raise ValueError("need one name per ratio")
    slide_ids = list(slide_ids)
    labels = np.asarray(labels)
    rng = Xoshiro256(seed)
    out: dict[str, list[str]] = {n: [] for n in names}
    offset = np.zeros(len(ratios))
    for c in sorted(set(labels.tolist())):
        members = [slide_ids[i] for i in np.flatnonzero(labels == c)]
        members = [members[i] for i in rng.permutation(len(members))]
        exact = np.array(ratios) * len(members) + offset
        sizes = np.floor(exact).astype(int)
        short = len(members) - sizes.sum()
        for i in np.argsort(-(exact - sizes), kind="stable")[:short]:
            sizes[i] += 1
        # carry rounding debt to the next class so the global sizes stay close
        offset = exact - sizes
        start = 0
        for name, size in zip(names, sizes):
            out[name].extend(members[start:start + size])
            start += size
    for name in names:
        if not out[name]:
            raise ValueError(f"split {name!r} would be empty")
        out[name].sort()
    return out


# ---------------------------------------------------------------- manifests


@dataclass
class DatasetManifest:
    root: Path
    slides: list[dict]
    splits: dict[str, list[str]]
    class_count: int
    feature_dim: int
    num_levels: int
    version: int = MANIFEST_VERSION
    extra: dict = field(default_factory=dict)

    def slide_ids(self, split_name: str | None = None) -> list[str]:
        if split_name is None:
            return [s["slide_id"] for s in self.slides]
        if split_name not in self.splits:
            raise KeyError(f"unknown split {split_name!r}; have {sorted(self.splits)}")
        return list(self.splits[split_name])

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "class_count": self.class_count,
            "feature_dim": self.feature_dim,
            "num_levels": self.num_levels,
            "slides": self.slides,
            "splits": self.splits,
            **self.extra,
        }


def write_dataset(out_dir, pyramids: list[FeaturePyramid], splits: dict[str, list[str]],
                  class_count: int, extra: dict | None = None) -> DatasetManifest:
    """Write ``<out>/<slide_id>/level_<j>.hagf`` files and ``<out>/manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for p in pyramids:
        sdir = out / p.slide_id
        sdir.mkdir(exist_ok=True)
        files = {}
        for j, f in enumerate(p.levels):
            rel = f"{p.slide_id}/level_{j}.hagf"
            write_features(out / rel, f, level=j)
            files[str(j)] = rel
        entry = {
            "slide_id": p.slide_id,
            "label": int(p.label),
            "files": files,
            "grid": list(p.index.coarse_grid),
            "index": p.index.to_dict(),
            "provenance": p.provenance,
        }
        if p.planted is not None:
            entry["planted"] = {str(j): np.flatnonzero(m).tolist() for j, m in enumerate(p.planted)}
        entries.append(entry)
    man = DatasetManifest(out, entries, {k: list(v) for k, v in splits.items()}, int(class_count),
                          pyramids[0].feature_dim, pyramids[0].num_levels, extra=dict(extra or {}))
    (out / "manifest.json").write_text(json.dumps(man.to_json(), indent=1, sort_keys=True))
    return man


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    raw = json.loads(path.read_text())
    if raw.get("version") != MANIFEST_VERSION:
        raise VersionMismatchError(f"manifest version {raw.get('version')} not supported")
    root = path.parent
    for s in raw["slides"]:
        for rel in s["files"].values():
            if not (root / rel).exists():
                raise FileNotFoundError(f"manifest references missing file {root / rel}")
    known = {k: raw.pop(k) for k in ("version", "class_count", "feature_dim", "num_levels", "slides", "splits")}
    return DatasetManifest(root, known["slides"], known["splits"], known["class_count"], known["feature_dim"],
                           known["num_levels"], known["version"], extra=raw)


def load_pyramid(manifest: DatasetManifest, slide_id: str) -> FeaturePyramid:
    entry = next((s for s in manifest.slides if s["slide_id"] == slide_id), None)
    if entry is None:
        raise KeyError(f"slide {slide_id!r} not in manifest")
    index = QuadTreeIndex.from_dict(entry["index"])
    levels = [read_features(manifest.root / entry["files"][str(j)]) for j in range(index.num_levels)]
    planted = None
    if "planted" in entry:
        planted = []
        for j, n in enumerate(index.counts):
            m = np.zeros(n, dtype=bool)
            m[np.asarray(entry["planted"].get(str(j), []), dtype=np.int64)] = True
            planted.append(m)
    return FeaturePyramid(slide_id, int(entry["label"]), levels, index, entry.get("provenance", "ingested"), planted)


def load_dataset(path) -> tuple[DatasetManifest, dict[str, FeaturePyramid]]:
    man = load_manifest(path)
    return man, {sid: load_pyramid(man, sid) for sid in man.slide_ids()}
