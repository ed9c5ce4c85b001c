"""Data preparation: vessel phantoms, two-plane projections with motion, model inputs."""
from __future__ import annotations

import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import (
    AcquisitionRanges,
    DetectorImage,
    MotionRanges,
    ProjectionGeometry,
    RigidTransform,
    VoxelGrid,
    apply_rigid_transform,
    back_project,
    forward_project,
    load_image,
    load_volume,
    sample_acquisition,
    sample_motion,
    sample_volume_extent,
    save_image,
    save_volume,
)

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


def binarize(values, threshold: float = 0.0) -> np.ndarray:
    """1.0 where ``values > threshold`` (strictly), else 0.0."""
    if not np.isfinite(threshold):
        raise ValueError(f"binarize: threshold must be finite, got {threshold}")
    return (np.asarray(values) > threshold).astype(np.float64)


def is_binary(values) -> bool:
    v = np.asarray(values)
    return bool(np.all((v == 0) | (v == 1)))


# ---------------------------------------------------------------- phantoms


@dataclass(frozen=True)
class PhantomParams:
    """Vessel-tree phantom controls; lengths and radii in voxels of the target grid."""

    dims: tuple[int, int, int] = (32, 32, 32)
    n_branches: int = 3
    trunk_radius: tuple[float, float] = (1.0, 1.6)
    branch_radius_ratio: tuple[float, float] = (0.55, 0.8)
    branch_length: tuple[float, float] = (0.25, 0.5)  # fraction of the smallest dim
    curvature: float = 0.25  # control-point jitter, fraction of the smallest dim
    margin: float = 2.0

    def validate(self) -> None:
        if self.n_branches < 1:
            raise ValueError(f"phantom: n_branches must be >= 1, got {self.n_branches}")
        lo, hi = self.trunk_radius
        if not 0 < lo <= hi:
            raise ValueError(f"phantom: bad trunk radius range {self.trunk_radius}")
        if min(self.dims) < 2 * (hi + self.margin) + 4:
            raise ValueError(f"phantom: grid {self.dims} too small for radius {hi} with margin {self.margin}")


def _bezier(ctrl: np.ndarray, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2, p3 = ctrl
    return (1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1 + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3


def _stamp(mask: np.ndarray, pts: np.ndarray, radii: np.ndarray) -> None:
    for p, r in zip(pts, radii):
        lo = np.maximum(np.floor(p - r).astype(int), 0)
        hi = np.minimum(np.ceil(p + r).astype(int) + 1, mask.shape)
        if np.any(hi <= lo):
            continue
        sub = np.indices(hi - lo).reshape(3, -1).T + lo
        inside = np.sum((sub - p) ** 2, axis=1) <= r * r
        mask[tuple(sub[inside].T)] = True


def _curve(rng, start, end, jitter, clip_lo, clip_hi):
    d = end - start
    ctrl = np.stack([start, start + d / 3, start + 2 * d / 3, end])
    ctrl[1:3] += rng.uniform(-jitter, jitter, size=(2, 3))
    ctrl = np.clip(ctrl, clip_lo, clip_hi)
    n = int(np.ceil(np.linalg.norm(d) * 4)) + 2  # ~0.25 voxel steps
    return _bezier(ctrl, n)


def generate_phantom(rng: np.random.Generator, params: PhantomParams = PhantomParams(),
                     extent_mm=(100.0, 100.0, 100.0)) -> VoxelGrid:
    """Binary tree of tubular segments: a curved trunk plus thinner curved branches.

    Centerlines are cubic Bezier curves swept by a ball brush.  Only the
    26-connected component containing the trunk is kept.
    """
    params.validate()
    dims = np.asarray(params.dims, dtype=float)
    size = float(dims.min())
    r_hi = params.trunk_radius[1]
    lo = np.full(3, params.margin + r_hi)
    hi = dims - 1 - params.margin - r_hi
    jitter = params.curvature * size

    # trunk runs roughly along z (head-foot) with a lateral drift
    start = np.array([rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]), lo[2]])
    end = np.array([rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]), hi[2]])
    trunk = _curve(rng, start, end, jitter, lo, hi)
    r0 = rng.uniform(*params.trunk_radius)
    trunk_r = np.linspace(r0, 0.75 * r0, len(trunk))
    mask = np.zeros(params.dims, dtype=bool)
    _stamp(mask, trunk, trunk_r)

    for _ in range(params.n_branches):
        k = int(rng.integers(len(trunk) // 5, 4 * len(trunk) // 5))
        root = trunk[k]
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        length = rng.uniform(*params.branch_length) * size
        tip = np.clip(root + direction * length, lo, hi)
        branch = _curve(rng, root, tip, 0.5 * jitter, lo, hi)
        rb = trunk_r[k] * rng.uniform(*params.branch_radius_ratio)
        _stamp(mask, branch, np.linspace(max(rb, 0.5), max(0.6 * rb, 0.5), len(branch)))

    labels, _ = ndimage.label(mask, structure=CONNECTIVITY_26)
    seed_label = labels[tuple(np.round(trunk[0]).astype(int))]
    if seed_label == 0:
        seed_label = labels[tuple(np.argwhere(mask)[0])]
    return VoxelGrid((labels == seed_label).astype(np.float64), tuple(float(e) for e in extent_mm))


# ---------------------------------------------------------------- projections and model input


def simulate_pair(phantom: VoxelGrid, geom1: ProjectionGeometry, geom2: ProjectionGeometry,
                  motion: RigidTransform, interpolation: str = "nearest"):
    """Binary projections of the phantom on plane 1 and of the moved phantom on plane 2.

    Motion translations act along plane 2's detector axes.  Nearest-neighbour
    resampling keeps the moved phantom binary.
    """
    if not is_binary(phantom.values):
        raise ValueError("simulate_pair: phantom must be binary")
    p1 = forward_project(phantom, geom1)
    moved = phantom if motion.is_identity() else apply_rigid_transform(phantom, motion, interpolation, frame=geom2.axes())
    p2 = forward_project(moved, geom2)
    return (DetectorImage(binarize(p1.values), p1.spacing_mm),
            DetectorImage(binarize(p2.values), p2.spacing_mm))


def build_model_input(proj1: DetectorImage, proj2: DetectorImage, geom1: ProjectionGeometry,
                      geom2: ProjectionGeometry, target_dims, target_extent) -> VoxelGrid:
    """Sum of the two binarized back-projections: values in {0, 1, 2}."""
    for p in (proj1, proj2):
        if not is_binary(p.values):
            raise ValueError("build_model_input: projections must be binary")
    b1 = binarize(back_project(proj1, geom1, target_dims, target_extent).values)
    b2 = binarize(back_project(proj2, geom2, target_dims, target_extent).values)
    return VoxelGrid(b1 + b2, tuple(float(e) for e in target_extent))


# ---------------------------------------------------------------- datasets


@dataclass
class TrainingSample:
    sample_id: str
    seed: int
    input: VoxelGrid
    ground_truth: VoxelGrid
    geom1: ProjectionGeometry
    geom2: ProjectionGeometry
    motion: RigidTransform
    proj1: DetectorImage | None = field(default=None, repr=False)
    proj2: DetectorImage | None = field(default=None, repr=False)

    def manifest_entry(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "seed": self.seed,
            "geom1": self.geom1.to_dict(),
            "geom2": self.geom2.to_dict(),
            "motion": self.motion.to_dict(),
            "extent_mm": list(self.ground_truth.extent_mm),
        }


def split_sizes(n: int, split=(0.75, 0.15, 0.10)) -> tuple[int, ...]:
    """Largest-remainder rounding of ``n * split``; ties go to the earlier split."""
    split = np.asarray(split, dtype=float)
    if np.any(split < 0) or not np.isclose(split.sum(), 1.0):
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {tuple(split)}")
    raw = n * split
    sizes = np.floor(raw + 1e-9).astype(int)
    rem = raw - sizes
    order = sorted(range(len(split)), key=lambda i: (-round(rem[i], 9), i))
    for i in order[: n - sizes.sum()]:
        sizes[i] += 1
    return tuple(int(s) for s in sizes)


def sample_seed(master: int, index: int) -> int:
    """Per-sample seed, independent of how many samples are generated."""
    return int(np.random.SeedSequence([master, zlib.crc32(b"sample"), index]).generate_state(1)[0])


def make_sample(seed: int, sample_id: str, dims=(32, 32, 32), detector_dims=(64, 64),
                phantom_params: PhantomParams | None = None,
                acquisition: AcquisitionRanges = AcquisitionRanges(),
                motion_ranges: MotionRanges = MotionRanges()) -> TrainingSample:
    rng = np.random.default_rng(seed)
    params = phantom_params or PhantomParams(dims=tuple(dims))
    extent = sample_volume_extent(rng, acquisition)
    phantom = generate_phantom(rng, params, extent)
    geom1, geom2 = sample_acquisition(rng, detector_dims, acquisition)
    motion = sample_motion(rng, motion_ranges)
    p1, p2 = simulate_pair(phantom, geom1, geom2, motion)
    x = build_model_input(p1, p2, geom1, geom2, phantom.dims, phantom.extent_mm)
    return TrainingSample(sample_id, seed, x, phantom, geom1, geom2, motion, p1, p2)


def make_dataset(rng_or_seed, n: int, split=(0.75, 0.15, 0.10), workers: int = 1, **sample_kw):
    """Generate ``n`` samples and split them into (train, val, test).

    Each sample draws its own seed from the master seed, so sample ``i`` is
    the same whatever ``n`` is, and ``workers`` threads give the same bytes as
    one.  Split membership is a seeded permutation.
    """
    if n < 10:
        raise ValueError(f"make_dataset: need n >= 10, got {n}")
    if isinstance(rng_or_seed, np.random.Generator):
        master = int(rng_or_seed.integers(2 ** 63))
    else:
        master = int(rng_or_seed)
    def one(i):
        return make_sample(sample_seed(master, i), f"s{i:04d}", **sample_kw)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            samples = list(pool.map(one, range(n)))
    else:
        samples = [one(i) for i in range(n)]
    perm = np.random.default_rng(np.random.SeedSequence([master, zlib.crc32(b"split")])).permutation(n)
    sizes = split_sizes(n, split)
    out, start = [], 0
    for s in sizes:
        out.append([samples[i] for i in sorted(perm[start:start + s])])
        start += s
    return tuple(out)


def save_dataset(splits, out_dir) -> Path:
    """Write volumes in the raw+JSON format and a ``manifest.json`` listing every sample."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for name, samples in zip(("train", "val", "test"), splits):
        for s in samples:
            entry = s.manifest_entry()
            entry["split"] = name
            entry["input"] = f"{s.sample_id}_input.raw"
            entry["ground_truth"] = f"{s.sample_id}_gt.raw"
            save_volume(out_dir / entry["input"], s.input)
            save_volume(out_dir / entry["ground_truth"], s.ground_truth)
            if s.proj1 is not None and s.proj2 is not None:
                entry["proj1"] = f"{s.sample_id}_proj1.raw"
                entry["proj2"] = f"{s.sample_id}_proj2.raw"
                save_image(out_dir / entry["proj1"], s.proj1)
                save_image(out_dir / entry["proj2"], s.proj2)
            manifest.append(entry)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_dataset(manifest_path):
    """Inverse of :func:`save_dataset`; returns (train, val, test)."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    splits = {"train": [], "val": [], "test": []}
    for e in json.loads(manifest_path.read_text()):
        splits[e["split"]].append(TrainingSample(
            e["sample_id"], int(e["seed"]),
            load_volume(root / e["input"]), load_volume(root / e["ground_truth"]),
            ProjectionGeometry.from_dict(e["geom1"]), ProjectionGeometry.from_dict(e["geom2"]),
            RigidTransform.from_dict(e["motion"]),
            load_image(root / e["proj1"]) if "proj1" in e else None,
            load_image(root / e["proj2"]) if "proj2" in e else None,
        ))
    return splits["train"], splits["val"], splits["test"]

