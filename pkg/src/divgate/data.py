"""Procedural two-modality corpus with a controllable divergence knob.

Each sample couples a vessel image (branching tubes), a nuclei image
(Gaussian blobs, denser near the vessels), and a target built from both:
exponential decay away from the vessel skeleton modulated by the smoothed
nuclei density.  Flipping ``consistent`` off computes the target from a
*different* seed's nuclei field, so the stored nuclei channel looks normal
but is misleading about the target - exactly the situation the divergence
head has to learn to detect.

Everything is a pure function of the seeds; corpora have stable checksums.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import serial
from .tensor import Tensor

MIN_SIZE = 16
VESSEL_MASK_THRESHOLD = 0.3
TARGET_DECAY_PX = 4.0

# substream tags so the three generators never share draws
_VESSEL_TAG, _NUCLEI_TAG, _CORRUPT_TAG, _SPLIT_TAG = 101, 202, 303, 404


@dataclass(frozen=True)
class DatasetSpec:
    count: int
    image_size: int = 32
    corrupt_fraction: float = 0.0
    seed: int = 0
    train_fraction: float = 0.875
    val_fraction: float = 0.125

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        for name in ("corrupt_fraction", "train_fraction", "val_fraction"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0,1], got {v}")
        if self.train_fraction + self.val_fraction > 1.0 + 1e-9:
            raise ValueError("train_fraction + val_fraction must be <= 1")


@dataclass
class SamplePair:
    vessel: Tensor      # (1,H,W) in [0,1]
    nuclei: Tensor      # (1,H,W) in [0,1]
    target: Tensor      # (1,H,W) in [0,1]
    consistent: bool    # False: target was computed from a different nuclei field
    seed: int


def _check_size(size):
    if size < MIN_SIZE:
        raise ValueError(f"image size must be >= {MIN_SIZE}, got {size}")


def _walk(rng, start, size, n_segments):
    pos = np.asarray(start, dtype=float)
    angle = rng.uniform(0, 2 * np.pi)
    vertices = [pos.copy()]
    for _ in range(n_segments):
        angle += rng.normal(0.0, 0.6)
        step = rng.uniform(size / 8, size / 4)
        pos = pos + step * np.array([np.cos(angle), np.sin(angle)])
        vertices.append(pos.copy())
    return vertices


def _vessel_canvas(seed: int, size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, _VESSEL_TAG])
    canvas = np.zeros((size, size))
    sigma = rng.uniform(1.0, 2.0)
    n_curves = int(rng.integers(2, 6))
    for _ in range(n_curves):
        trunk = _walk(rng, rng.uniform(0, size, 2), size, int(rng.integers(3, 7)))
        _draw_polyline(canvas, trunk)
        if rng.random() < 0.5:
            fork_at = trunk[int(rng.integers(0, len(trunk)))]
            _draw_polyline(canvas, _walk(rng, fork_at, size, int(rng.integers(2, 5))))
    canvas = ndimage.gaussian_filter(canvas, sigma)
    peak = canvas.max()
    if peak > 0:
        canvas = canvas / peak
    return np.clip(canvas, 0.0, 1.0)


def _draw_polyline(canvas, vertices):
    size = canvas.shape[0]
    for a, b in zip(vertices[:-1], vertices[1:]):
        length = float(np.hypot(*(b - a)))
        n = max(2, int(length * 4))
        for s in np.linspace(0.0, 1.0, n):
            p = a + s * (b - a)
            i, j = int(round(p[0])), int(round(p[1]))
            if 0 <= i < size and 0 <= j < size:
                canvas[i, j] = 1.0


def gen_vessels(seed: int, size: int) -> Tensor:
    """Branching tube image: 2-5 polylines with Gaussian cross-section."""
    _check_size(size)
    return Tensor(_vessel_canvas(seed, size)[None].astype(np.float32))


def nuclei_plan(seed: int, size: int) -> list[tuple[float, float, float, float]]:
    """Deterministic blob plan: (row, col, sigma, amplitude) per nucleus.

    20-60 blobs; ~70% are placed inside a dilation of the same seed's
    vessel mask to emulate the vessel/nuclei correlation.
    """
    _check_size(size)
    mask = _vessel_canvas(seed, size) > VESSEL_MASK_THRESHOLD
    mask = ndimage.binary_dilation(mask, iterations=2)
    coords = np.argwhere(mask)
    rng = np.random.default_rng([seed, _NUCLEI_TAG])
    count = int(rng.integers(20, 61))
    plan = []
    for _ in range(count):
        if len(coords) and rng.random() < 0.7:
            r, c = coords[rng.integers(0, len(coords))]
            r = float(r) + rng.uniform(-0.5, 0.5)
            c = float(c) + rng.uniform(-0.5, 0.5)
        else:
            r, c = rng.uniform(0, size - 1, 2)
        plan.append((r, c, float(rng.uniform(1.0, 3.0)), float(rng.uniform(0.6, 1.0))))
    return plan


def _render_blobs(plan, size) -> np.ndarray:
    rows = np.arange(size)[:, None]
    cols = np.arange(size)[None, :]
    img = np.zeros((size, size))
    for r, c, sigma, amp in plan:
        img += amp * np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2.0 * sigma * sigma))
    return np.clip(img, 0.0, 1.0)


def gen_nuclei(seed: int, size: int) -> Tensor:
    """Nuclei image: rendered blob plan, clipped to [0,1]."""
    return Tensor(_render_blobs(nuclei_plan(seed, size), size)[None].astype(np.float32))


def _alternate_seed(seed: int) -> int:
    # deterministic but distinct stream for the misleading nuclei field
    return int((seed * 2654435761 + 97) % (2**31 - 1))


def gen_target(vessel, nuclei, consistent: bool, seed: int) -> Tensor:
    """Target map: exp(-dist_to_vessel / 4) * (0.5 + 0.5 * smoothed nuclei).

    With consistent=False the nuclei factor comes from a different-seed
    nuclei image, so the provided nuclei channel no longer explains the
    target.  The result is peak-normalized to [0,1].
    """
    v = vessel.data if isinstance(vessel, Tensor) else np.asarray(vessel)
    n = nuclei.data if isinstance(nuclei, Tensor) else np.asarray(nuclei)
    if v.shape != n.shape:
        raise ValueError(f"vessel shape {v.shape} != nuclei shape {n.shape}")
    v2, n2 = np.squeeze(v), np.squeeze(n)
    size = v2.shape[0]
    if not consistent:
        n2 = np.squeeze(gen_nuclei(_alternate_seed(seed), size).data)
    dist = ndimage.distance_transform_edt(~(v2 > VESSEL_MASK_THRESHOLD))
    smooth = ndimage.uniform_filter(n2.astype(np.float64), size=3, mode="constant")
    t = np.exp(-dist / TARGET_DECAY_PX) * (0.5 + 0.5 * smooth)
    t = t / t.max()
    return Tensor(t[None].astype(np.float32))


def make_sample(seed: int, size: int, consistent: bool) -> SamplePair:
    vessel = gen_vessels(seed, size)
    nuclei = gen_nuclei(seed, size)
    target = gen_target(vessel, nuclei, consistent, seed)
    return SamplePair(vessel=vessel, nuclei=nuclei, target=target, consistent=consistent, seed=seed)


def make_dataset(spec: DatasetSpec) -> tuple[list[SamplePair], dict[str, np.ndarray]]:
    """Generate the corpus plus a seeded train/val split.

    Exactly round(count * corrupt_fraction) samples get consistent=False.
    """
    n_corrupt = int(round(spec.count * spec.corrupt_fraction))
    perm = np.random.default_rng([spec.seed, _CORRUPT_TAG]).permutation(spec.count)
    corrupted = set(perm[:n_corrupt].tolist())
    samples = []
    for i in range(spec.count):
        seed_i = int((spec.seed * 1_000_003 + i) % (2**31 - 1))
        samples.append(make_sample(seed_i, spec.image_size, i not in corrupted))
    perm2 = np.random.default_rng([spec.seed, _SPLIT_TAG]).permutation(spec.count)
    n_train = int(round(spec.count * spec.train_fraction))
    n_val = min(int(round(spec.count * spec.val_fraction)), spec.count - n_train)
    split = {"train": np.sort(perm2[:n_train]), "val": np.sort(perm2[n_train:n_train + n_val])}
    return samples, split


# ------------------------------------------------------------------- on disk

def save_dataset(outdir, samples: list[SamplePair], split: dict[str, np.ndarray]) -> str:
    """Write DTNSR1 triplets plus the manifest; returns the manifest path."""
    os.makedirs(outdir, exist_ok=True)
    lines = ["# index, seed, consistent, vessel, nuclei, target"]
    for i, s in enumerate(samples):
        names = [f"{i:05d}_{part}.dtnsr" for part in ("vessel", "nuclei", "target")]
        for name, t in zip(names, (s.vessel, s.nuclei, s.target)):
            serial.write_tensor(os.path.join(outdir, name), t)
        lines.append(f"{i}, {s.seed}, {int(s.consistent)}, {names[0]}, {names[1]}, {names[2]}")
    manifest = os.path.join(outdir, "manifest.txt")
    with open(manifest, "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(outdir, "split.txt"), "w") as f:
        for part, idx in split.items():
            f.write(f"{part}: {' '.join(str(int(i)) for i in idx)}\n")
    return manifest


def load_dataset(indir) -> tuple[list[SamplePair], dict[str, np.ndarray]]:
    """Read a corpus written by save_dataset (or hand-built to its manifest)."""
    samples = []
    with open(os.path.join(indir, "manifest.txt")) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            idx, seed, consistent, vp, np_, tp = [p.strip() for p in line.split(",")]
            samples.append(SamplePair(
                vessel=serial.read_tensor(os.path.join(indir, vp)),
                nuclei=serial.read_tensor(os.path.join(indir, np_)),
                target=serial.read_tensor(os.path.join(indir, tp)),
                consistent=bool(int(consistent)),
                seed=int(seed),
            ))
    split = {}
    split_path = os.path.join(indir, "split.txt")
    if os.path.exists(split_path):
        with open(split_path) as f:
            for line in f:
                part, _, rest = line.partition(":")
                idx = np.array([int(v) for v in rest.split()], dtype=np.int64)
                split[part.strip()] = idx
    return samples, split


def corpus_checksum(samples: list[SamplePair]) -> str:
    """SHA-256 over every image byte plus flags; stable across runs."""
    h = hashlib.sha256()
    for s in samples:
        for t in (s.vessel, s.nuclei, s.target):
            h.update(t.data.tobytes())
        h.update(bytes([int(s.consistent)]))
        h.update(int(s.seed).to_bytes(8, "little"))
    return h.hexdigest()
