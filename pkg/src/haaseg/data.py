"""Deterministic synthetic lesion dataset and minimal PGM file I/O.

Each sample is a textured background with one to three soft-edged
elliptical bright blobs placed in the central region (lesions sit away
from the border, like tissue inside a scan), plus Gaussian noise; the
mask is the exact lesion-blob support. The background also carries
bright smudges of the same shape and intensity in a peripheral ring, so
appearance alone does not determine the label: a pixel's absolute
position is what separates lesion from background structure. Everything
about a sample derives from (seed, idx), so regeneration is
bit-identical and order-independent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import Tensor


@dataclass
class SynthConfig:
    image_size: int = 32
    n_samples: int = 500
    lesion_count_range: Tuple[int, int] = (1, 3)
    lesion_radius_range: Tuple[float, float] = (0.1, 0.3)
    noise_std: float = 0.1
    background_texture_scale: float = 0.15
    seed: int = 0


@dataclass
class SegSample:
    """One grayscale image in [0,1] with its binary lesion mask."""

    image: Tensor
    mask: Tensor
    id: str


class PgmError(ValueError):
    """Raised for malformed PGM files, with the offending byte offset."""


# geometry of the position signal, as fractions of the image size:
# lesion centers fall in a central disk, look-alike background smudges in
# an outer ring. Smudges share the lesion size, shape, and intensity
# distributions exactly, so only absolute position tells the two apart.
LESION_CENTER_DISK = 0.10
DISTRACTOR_RING = (0.36, 0.44)
BACKGROUND_LEVEL = 0.35
BLOB_AMPLITUDE = (0.3, 0.5)


def _resize_bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a small 2-D array to size x size."""
    def axis_coords(src: int):
        if src == 1:
            return np.zeros(size, dtype=np.intp), np.zeros(size, dtype=np.intp), np.zeros(size)
        pos = np.arange(size) * (src - 1) / (size - 1)
        i0 = np.minimum(pos.astype(np.intp), src - 2)
        return i0, i0 + 1, pos - i0

    r0, r1, tr = axis_coords(grid.shape[0])
    c0, c1, tc = axis_coords(grid.shape[1])
    rows = grid[r0] + tr[:, None] * (grid[r1] - grid[r0])
    return rows[:, c0] + tc[None, :] * (rows[:, c1] - rows[:, c0])


def _blob_field(
    size: int, rng: np.random.Generator, radius_range, center_rule: str
) -> np.ndarray:
    """Normalized elliptic distance of every pixel to one random blob."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if center_rule == "central":
        r = size * LESION_CENTER_DISK * np.sqrt(rng.uniform())
    else:
        r = size * rng.uniform(*DISTRACTOR_RING)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    cy = size * 0.5 + r * np.sin(phi)
    cx = size * 0.5 + r * np.cos(phi)
    lo, hi = radius_range
    ry, rx = size * rng.uniform(lo, hi, size=2)
    theta = rng.uniform(0.0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    return np.sqrt((u / rx) ** 2 + (v / ry) ** 2)


def _add_blob(image, rng, d):
    amplitude = rng.uniform(*BLOB_AMPLITUDE)
    return image + amplitude * np.clip(1.0 - d * d, 0.0, None)


def generate_sample(seed: int, idx: int, cfg: SynthConfig) -> SegSample:
    """Build sample ``idx`` of the dataset stream rooted at ``seed``.

    Draws are retried on a derived substream until the mask covers a
    fraction of the image strictly inside (0, 0.5).
    """
    S = cfg.image_size
    lo, hi = cfg.lesion_count_range
    for attempt in range(64):
        rng = np.random.default_rng([seed, idx, attempt])
        coarse = rng.normal(size=(4, 4))
        image = BACKGROUND_LEVEL + cfg.background_texture_scale * _resize_bilinear(coarse, S)
        mask = np.zeros((S, S), dtype=bool)
        for _ in range(int(rng.integers(lo, hi + 1))):
            d = _blob_field(S, rng, cfg.lesion_radius_range, "central")
            image = _add_blob(image, rng, d)
            mask |= d <= 1.0
        for _ in range(int(rng.integers(lo, hi + 1))):
            d = _blob_field(S, rng, cfg.lesion_radius_range, "ring")
            image = _add_blob(image, rng, d)
        if cfg.noise_std:
            image = image + cfg.noise_std * rng.normal(size=(S, S))
        image = np.clip(image, 0.0, 1.0)
        fraction = mask.mean()
        if 0.0 < fraction < 0.5:
            return SegSample(
                image=Tensor(image[None]),
                mask=Tensor(mask[None].astype(np.float64)),
                id=f"s{idx:05d}",
            )
    raise RuntimeError(f"could not draw a valid sample for idx={idx} in 64 attempts")


def generate_dataset(cfg: SynthConfig) -> List[SegSample]:
    return [generate_sample(cfg.seed, i, cfg) for i in range(cfg.n_samples)]


def split(
    samples: Sequence, fractions: Tuple[float, float, float], seed: int
) -> Tuple[list, list, list]:
    """Seeded shuffle then contiguous cut into train/val/test lists."""
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"need three non-negative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(fractions[0] * len(samples)))
    n_val = int(round(fractions[1] * len(samples)))
    picked = [samples[i] for i in order]
    return (
        picked[:n_train],
        picked[n_train : n_train + n_val],
        picked[n_train + n_val :],
    )


def write_pgm(map_values, path) -> None:
    """Write values in [0,1] as an 8-bit binary (P5) PGM, maxval 255."""
    arr = np.asarray(map_values.data if hasattr(map_values, "data") else map_values)
    arr = arr.reshape(arr.shape[-2], arr.shape[-1])
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("PGM writer expects values in [0, 1]")
    h, w = arr.shape
    payload = np.round(arr * 255.0).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + payload)


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM back to floats in [0,1] (row-major [H, W])."""
    blob = Path(path).read_bytes()
    off = 0

    def token() -> bytes:
        nonlocal off
        while off < len(blob) and blob[off : off + 1].isspace():
            off += 1
        if off < len(blob) and blob[off : off + 1] == b"#":
            while off < len(blob) and blob[off : off + 1] != b"\n":
                off += 1
            return token()
        start = off
        while off < len(blob) and not blob[off : off + 1].isspace():
            off += 1
        if start == off:
            raise PgmError(f"{path}: truncated header at byte {start}")
        return blob[start:off]

    magic = token()
    if magic != b"P5":
        raise PgmError(f"{path}: expected P5 magic at byte 0, got {magic[:8]!r}")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as e:
        raise PgmError(f"{path}: bad header field near byte {off}: {e}") from None
    if maxval != 255:
        raise PgmError(f"{path}: unsupported maxval {maxval} at byte {off}")
    off += 1  # single whitespace byte after maxval
    payload = blob[off:]
    if len(payload) != w * h:
        raise PgmError(
            f"{path}: payload is {len(payload)} bytes at byte {off}, expected {w * h}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w) / 255.0


def write_dataset(root, samples: Sequence[SegSample], splits: Dict[str, str]) -> None:
    """Lay out images/, masks/, and manifest.csv under root.

    ``splits`` maps sample id to its split name; every sample must appear.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with (root / "manifest.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "split"])
        for s in samples:
            write_pgm(s.image, root / "images" / f"{s.id}.pgm")
            write_pgm(s.mask, root / "masks" / f"{s.id}.pgm")
            writer.writerow([s.id, splits[s.id]])


def load_dataset(root, split_name: Optional[str] = None) -> List[SegSample]:
    """Read samples back; optionally only those in one split."""
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv under {root}")
    out: List[SegSample] = []
    with manifest.open() as fh:
        for row in csv.DictReader(fh):
            if split_name is not None and row["split"] != split_name:
                continue
            image = read_pgm(root / "images" / f"{row['id']}.pgm")
            mask = read_pgm(root / "masks" / f"{row['id']}.pgm")
            out.append(
                SegSample(
                    image=Tensor(image[None]),
                    mask=Tensor((mask >= 0.5).astype(np.float64)[None]),
                    id=row["id"],
                )
            )
    return out
