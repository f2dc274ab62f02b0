"""Synthetic two-view correspondences with exact labels, plus the on-disk dataset format.

Randomness comes from numpy's Philox counter-based generator, keyed per pair.

File layout (little-endian)::

    b"GLAD" | u32 version | u64 pair count
    per pair: u32 N | N*4 f32 coords | N u8 labels | 9 f64 e_gt | f32 inlier_ratio | u64 seed
    footer: 8-byte BLAKE2b digest of everything before it
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import ContractError
from .geometry import epipolar_residuals, normalize_e, skew

MAGIC = b"GLAD"
VERSION = 1
RNG_NAME = "numpy.random.Philox"
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


class DatasetFormatError(ValueError):
    pass


@dataclass
class GeneratorParams:
    n: int = 512
    inlier_ratio: float = 0.15
    noise_sigma: float = 1e-3
    max_rotation: float = 0.25  # radians
    label_tau: float = 1e-4  # squared symmetric epipolar distance
    half_width: float = 0.5  # image window in normalized coordinates
    depth_range: tuple[float, float] = (4.0, 8.0)


@dataclass
class PairRecord:
    coords: np.ndarray  # N x 4 float32
    labels: np.ndarray  # N uint8
    e_gt: np.ndarray  # 3 x 3 float64, unit Frobenius norm
    inlier_ratio: float
    seed: int
    noise_sigma: float = float("nan")  # not stored on disk

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def coords64(self) -> np.ndarray:
        return self.coords.astype(np.float64)


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))


def random_rotation(rng: np.random.Generator, max_angle: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def synth_pair(seed: int, n: int = 512, inlier_ratio: float = 0.15, noise_sigma: float = 1e-3,
               params: GeneratorParams | None = None) -> PairRecord:
    """One labelled pair. Inliers are noisy projections of 3D points; outliers are uniform.

    Both label classes are checked on the stored float32 coordinates: inliers
    must have residual < tau and outliers >= tau, otherwise they are re-drawn.
    The inlier count is ``round(inlier_ratio * n)``.
    """
    p = params or GeneratorParams()
    if n < 16:
        raise ContractError(f"pairs need at least 16 correspondences, got {n}")
    if not (0.0 < inlier_ratio <= 1.0) or noise_sigma < 0:
        raise ContractError("inlier_ratio must be in (0, 1] and noise_sigma >= 0")
    n_in = int(round(inlier_ratio * n))
    if n_in < 8:
        raise ContractError(f"inlier_ratio * n = {inlier_ratio * n} leaves fewer than 8 inliers")
    rng = rng_for(seed)
    R = random_rotation(rng, p.max_rotation)
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    E = normalize_e(skew(t) @ R)
    w = p.half_width

    inliers = np.empty((0, 4), dtype=np.float32)
    while inliers.shape[0] < n_in:
        m = 2 * (n_in - inliers.shape[0]) + 8
        uv = rng.uniform(-w, w, size=(m, 2))
        z = rng.uniform(*p.depth_range, size=m)
        X = np.column_stack([uv * z[:, None], z])
        X2 = X @ R.T + t
        ok = X2[:, 2] > 1e-3
        uv2 = X2[:, :2] / np.where(ok, X2[:, 2], 1.0)[:, None]
        ok &= np.all(np.abs(uv2) <= w, axis=1)
        c = np.column_stack([uv, uv2])
        if noise_sigma:
            c = c + rng.normal(scale=noise_sigma, size=(m, 4))
        c = c.astype(np.float32)
        ok &= epipolar_residuals(c, E) < p.label_tau
        inliers = np.vstack([inliers, c[ok]])
    inliers = inliers[:n_in]

    n_out = n - n_in
    outliers = np.empty((0, 4), dtype=np.float32)
    while outliers.shape[0] < n_out:
        m = 2 * (n_out - outliers.shape[0]) + 8
        c = rng.uniform(-w, w, size=(m, 4)).astype(np.float32)
        ok = epipolar_residuals(c, E) >= p.label_tau
        outliers = np.vstack([outliers, c[ok]])
    outliers = outliers[:n_out]

    coords = np.vstack([inliers, outliers])
    labels = np.concatenate([np.ones(n_in, np.uint8), np.zeros(n_out, np.uint8)])
    order = rng.permutation(n)
    ratio = float(np.float32(inlier_ratio))  # stored as f32 on disk
    return PairRecord(coords[order], labels[order], E, ratio, int(seed), float(noise_sigma))


def pair_seeds(seed: int, count: int) -> list[int]:
    """Derive per-pair seeds from a master seed (pair generation is independent per index)."""
    return [int(s) for s in rng_for(seed).integers(0, 2**63, size=count, dtype=np.uint64)]


def generate_dataset(seed: int, pairs: int, params: GeneratorParams | None = None) -> list[PairRecord]:
    p = params or GeneratorParams()
    return [synth_pair(s, p.n, p.inlier_ratio, p.noise_sigma, p) for s in pair_seeds(seed, pairs)]


# --- binary format -------------------------------------------------------------


def encode_dataset(records: list[PairRecord]) -> bytes:
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(records))]
    for r in records:
        coords = np.ascontiguousarray(r.coords, dtype="<f4")
        if coords.ndim != 2 or coords.shape[1] != 4:
            raise ContractError("coords must be N x 4")
        parts.append(struct.pack("<I", coords.shape[0]))
        parts.append(coords.tobytes())
        parts.append(np.ascontiguousarray(r.labels, dtype=np.uint8).tobytes())
        parts.append(np.ascontiguousarray(r.e_gt, dtype="<f8").tobytes())
        parts.append(struct.pack("<fQ", r.inlier_ratio, r.seed))
    body = b"".join(parts)
    return body + hashlib.blake2b(body, digest_size=8).digest()


def decode_dataset(blob: bytes) -> list[PairRecord]:
    if len(blob) < 24 or blob[:4] != MAGIC:
        raise DatasetFormatError("bad magic bytes")
    body, digest = blob[:-8], blob[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise DatasetFormatError("checksum mismatch")
    version, count = struct.unpack_from("<IQ", body, 4)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    off = 16
    records = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            coords = np.frombuffer(body, "<f4", n * 4, off).reshape(n, 4).astype(np.float32)
            off += 16 * n
            labels = np.frombuffer(body, np.uint8, n, off).copy()
            off += n
            e_gt = np.frombuffer(body, "<f8", 9, off).reshape(3, 3).astype(np.float64)
            off += 72
            ratio, seed = struct.unpack_from("<fQ", body, off)
            off += 12
            records.append(PairRecord(coords, labels, e_gt, ratio, seed))
    except (struct.error, ValueError) as exc:
        raise DatasetFormatError(f"truncated dataset: {exc}") from exc
    if off != len(body):
        raise DatasetFormatError("trailing bytes after last pair")
    return records


def write_dataset(path, records: list[PairRecord]) -> str:
    """Write the dataset; returns the hex checksum."""
    blob = encode_dataset(records)
    Path(path).write_bytes(blob)
    return blob[-8:].hex()


def read_dataset(path) -> list[PairRecord]:
    return decode_dataset(Path(path).read_bytes())


# --- splits and manifest --------------------------------------------------------


def split_indices(count: int, seed: int, fractions=SPLIT_FRACTIONS) -> dict[str, list[int]]:
    """Disjoint, exhaustive train/val/test index lists; rounding leftovers go to train."""
    if count < 0:
        raise ContractError("negative pair count")
    order = rng_for(seed).permutation(count)
    n_val = int(np.floor(fractions[1] * count))
    n_test = int(np.floor(fractions[2] * count))
    n_train = count - n_val - n_test
    return {
        "train": sorted(int(i) for i in order[:n_train]),
        "val": sorted(int(i) for i in order[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in order[n_train + n_val:]),
    }


@dataclass
class DatasetManifest:
    version: int
    pair_count: int
    splits: dict[str, list[int]]
    generator: dict = field(default_factory=dict)
    checksum: str = ""
    rng: str = RNG_NAME

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls(**json.loads(Path(path).read_text()))


def manifest_path(dataset_path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.name + ".manifest.json")


def build_dataset(path, seed: int, pairs: int, params: GeneratorParams | None = None) -> DatasetManifest:
    """Generate, write, and describe a dataset (file plus ``<file>.manifest.json``)."""
    p = params or GeneratorParams()
    records = generate_dataset(seed, pairs, p)
    checksum = write_dataset(path, records)
    gen = json.loads(json.dumps(asdict(p)))  # JSON-shaped, so a reload compares equal
    gen["seed"] = seed
    manifest = DatasetManifest(VERSION, pairs, split_indices(pairs, seed), gen, checksum)
    manifest.save(manifest_path(path))
    return manifest


def load_split(path, split: str) -> tuple[list[PairRecord], list[int]]:
    """Records of one split, using the manifest next to the file (or a default split)."""
    records = read_dataset(path)
    mpath = manifest_path(path)
    if mpath.exists():
        splits = DatasetManifest.load(mpath).splits
    else:
        splits = split_indices(len(records), 0)
    if split == "all":
        idx = list(range(len(records)))
    elif split in splits:
        idx = splits[split]
    else:
        raise ContractError(f"unknown split {split!r}")
    return [records[i] for i in idx], idx
