"""Cone-beam projection geometry, a ray-driven projector and its exact adjoint.

World frame (mm): x is patient left-right, y anterior-posterior, z
head-foot.  Volumes are centred on the origin and indexed ``[ix, iy, iz]``.
At zero gantry angles the source sits on the -y axis and the detector's u and
v axes are world x and z.  The primary angle rotates the gantry about z, the
secondary about x.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

PAPER_VOLUME_DIMS = (128, 128, 128)
PAPER_DETECTOR_DIMS = (512, 512)


@dataclass
class VoxelGrid:
    values: np.ndarray
    extent_mm: tuple[float, float, float]

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError(f"VoxelGrid values must be 3-d, got shape {self.values.shape}")
        self.extent_mm = tuple(float(e) for e in self.extent_mm)
        if len(self.extent_mm) != 3 or min(self.extent_mm) <= 0:
            raise ValueError(f"extent_mm must be three positive lengths, got {self.extent_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def spacing(self) -> np.ndarray:
        return np.asarray(self.extent_mm) / np.asarray(self.dims)

    def centers(self, mask: np.ndarray | None = None) -> np.ndarray:
        """World coordinates of voxel centres (all, or where ``mask``)."""
        idx = np.argwhere(mask) if mask is not None else np.indices(self.dims).reshape(3, -1).T
        return (idx + 0.5) * self.spacing - np.asarray(self.extent_mm) / 2

    def with_values(self, values) -> "VoxelGrid":
        return VoxelGrid(np.asarray(values), self.extent_mm)


@dataclass
class DetectorImage:
    values: np.ndarray
    spacing_mm: tuple[float, float]

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"DetectorImage values must be 2-d, got shape {self.values.shape}")
        self.spacing_mm = (float(self.spacing_mm[0]), float(self.spacing_mm[1]))
        if min(self.spacing_mm) <= 0:
            raise ValueError(f"detector spacing must be positive, got {self.spacing_mm}")

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.values.shape)

    def centers(self, mask: np.ndarray | None = None) -> np.ndarray:
        """In-plane (u, v) pixel-centre coordinates in mm, detector centre at 0."""
        idx = np.argwhere(mask) if mask is not None else np.indices(self.dims).reshape(2, -1).T
        sp = np.asarray(self.spacing_mm)
        return (idx + 0.5) * sp - np.asarray(self.dims) * sp / 2


@dataclass(frozen=True)
class ProjectionGeometry:
    dsd_mm: float
    dso_mm: float
    primary_deg: float
    secondary_deg: float
    detector_dims: tuple[int, int] = PAPER_DETECTOR_DIMS
    detector_spacing_mm: tuple[float, float] = (0.2779, 0.2779)

    def validate(self) -> None:
        if not (self.dsd_mm > self.dso_mm > 0):
            raise ValueError(f"degenerate geometry: need dsd > dso > 0, got dsd={self.dsd_mm}, dso={self.dso_mm}")
        if min(self.detector_dims) < 1 or min(self.detector_spacing_mm) <= 0:
            raise ValueError("detector dims and spacing must be positive")

    def rotation(self) -> np.ndarray:
        return _rot_z(self.primary_deg) @ _rot_x(self.secondary_deg)

    def source(self) -> np.ndarray:
        return self.rotation() @ np.array([0.0, -self.dso_mm, 0.0])

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Detector (u, v) unit vectors in world coordinates."""
        r = self.rotation()
        return r[:, 0].copy(), r[:, 2].copy()

    def pixel_centers(self) -> np.ndarray:
        """World coordinates of all pixel centres, shape (nu, nv, 3)."""
        r = self.rotation()
        center = r @ np.array([0.0, self.dsd_mm - self.dso_mm, 0.0])
        u, v = r[:, 0], r[:, 2]
        nu, nv = self.detector_dims
        su, sv = self.detector_spacing_mm
        cu = ((np.arange(nu) + 0.5) - nu / 2) * su
        cv = ((np.arange(nv) + 0.5) - nv / 2) * sv
        return center + cu[:, None, None] * u + cv[None, :, None] * v

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detector_dims"] = list(self.detector_dims)
        d["detector_spacing_mm"] = list(self.detector_spacing_mm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectionGeometry":
        return cls(
            dsd_mm=float(d["dsd_mm"]),
            dso_mm=float(d["dso_mm"]),
            primary_deg=float(d["primary_deg"]),
            secondary_deg=float(d["secondary_deg"]),
            detector_dims=tuple(int(n) for n in d["detector_dims"]),
            detector_spacing_mm=tuple(float(s) for s in d["detector_spacing_mm"]),
        )


def _rot_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_x(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


@dataclass(frozen=True)
class RigidTransform:
    """Rotation about the two gantry axes (through the origin) plus an in-plane shift.

    ``p' = R p + t`` with ``R = Rz(primary) Rx(secondary)`` and
    ``t = tx * u + ty * v`` along a frame's horizontal/vertical axes (world
    x and z unless a frame is given when applying).  ``inverted`` flips the
    map, so ``t.inverse()`` is exact without re-parametrising.
    """

    rot_primary_deg: float = 0.0
    rot_secondary_deg: float = 0.0
    trans_mm: tuple[float, float] = (0.0, 0.0)
    inverted: bool = False

    def inverse(self) -> "RigidTransform":
        return replace(self, inverted=not self.inverted)

    def matrix(self, frame=None) -> tuple[np.ndarray, np.ndarray]:
        """(R, t) of the point map ``p -> R p + t``."""
        u, v = (np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])) if frame is None else frame
        rot = _rot_z(self.rot_primary_deg) @ _rot_x(self.rot_secondary_deg)
        shift = self.trans_mm[0] * np.asarray(u) + self.trans_mm[1] * np.asarray(v)
        if self.inverted:
            return rot.T, -rot.T @ shift
        return rot, shift

    def apply(self, points: np.ndarray, frame=None) -> np.ndarray:
        rot, shift = self.matrix(frame)
        return np.asarray(points) @ rot.T + shift

    def is_identity(self) -> bool:
        return self.rot_primary_deg == 0 and self.rot_secondary_deg == 0 and tuple(self.trans_mm) == (0.0, 0.0)

    def to_dict(self) -> dict:
        return {
            "rot_primary_deg": self.rot_primary_deg,
            "rot_secondary_deg": self.rot_secondary_deg,
            "trans_mm": list(self.trans_mm),
            "inverted": self.inverted,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(float(d["rot_primary_deg"]), float(d["rot_secondary_deg"]),
                   tuple(float(t) for t in d["trans_mm"]), bool(d.get("inverted", False)))


# ---------------------------------------------------------------- projector


def _rays(geom: ProjectionGeometry, extent, spacing):
    """Source, unit directions (nrays x 3) and sampling parameters."""
    src = geom.source()
    pix = geom.pixel_centers().reshape(-1, 3)
    d = pix - src
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    # box padded by half a voxel: the trilinear support of the edge voxels
    half = np.asarray(extent) / 2 + np.asarray(spacing) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - src) / d
        t2 = (half - src) / d
    t_near = np.nanmax(np.minimum(t1, t2), axis=1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = t_far > t_near
    t_near = np.where(hit, t_near, 0.0)
    t_far = np.where(hit, t_far, 0.0)
    step = 0.5 * float(np.min(spacing))
    n_steps = int(np.ceil(np.max(t_far - t_near) / step)) if hit.any() else 0
    return src, d, t_near, hit, step, n_steps


def _ray_weights(src, d, t_near, step, n_steps, dims, extent, spacing):
    """Flat voxel indices and trilinear weights for every sample of a ray batch.

    Returns (index, weight), both shaped (nrays, n_steps * 8); invalid
    corners carry weight 0 and index 0.
    """
    t = t_near[:, None] + (np.arange(n_steps) + 0.5) * step
    pts = src + t[..., None] * d[:, None, :]
    c = (pts + np.asarray(extent) / 2) / np.asarray(spacing) - 0.5
    base = np.floor(c)
    f = c - base
    base = base.astype(np.int64)
    nx, ny, nz = dims
    idx_parts = []
    w_parts = []
    for corner in range(8):
        bits = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        ix = base[..., 0] + bits[0]
        iy = base[..., 1] + bits[1]
        iz = base[..., 2] + bits[2]
        w = (f[..., 0] if bits[0] else 1 - f[..., 0]) * (f[..., 1] if bits[1] else 1 - f[..., 1]) * (
            f[..., 2] if bits[2] else 1 - f[..., 2]
        )
        valid = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
        idx_parts.append(np.where(valid, (ix * ny + iy) * nz + iz, 0))
        w_parts.append(np.where(valid, w, 0.0))
    return np.concatenate(idx_parts, axis=1), np.concatenate(w_parts, axis=1)


def _chunks(n: int, n_steps: int, budget: int = 2_000_000):
    size = max(1, budget // max(1, 8 * n_steps))
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def forward_project(volume: VoxelGrid, geom: ProjectionGeometry) -> DetectorImage:
    """Line integrals through ``volume`` for every detector pixel.

    Fixed-step sampling (half the smallest voxel spacing) with trilinear
    interpolation; outside the grid reads zero.
    """
    geom.validate()
    spacing = volume.spacing
    src, d, t_near, hit, step, n_steps = _rays(geom, volume.extent_mm, spacing)
    out = np.zeros(d.shape[0])
    flat = np.asarray(volume.values, dtype=np.float64).reshape(-1)
    rays = np.flatnonzero(hit)
    if n_steps and rays.size:
        for sl in _chunks(rays.size, n_steps):
            r = rays[sl]
            idx, w = _ray_weights(src, d[r], t_near[r], step, n_steps, volume.dims, volume.extent_mm, spacing)
            out[r] = step * np.sum(flat[idx] * w, axis=1)
    return DetectorImage(out.reshape(geom.detector_dims), geom.detector_spacing_mm)


def back_project(image: DetectorImage, geom: ProjectionGeometry, target_dims, target_extent) -> VoxelGrid:
    """Exact adjoint of :func:`forward_project` on the same discretisation."""
    geom.validate()
    target_dims = tuple(int(n) for n in target_dims)
    target_extent = tuple(float(e) for e in target_extent)
    if min(target_dims) < 1 or min(target_extent) <= 0:
        raise ValueError(f"target dims/extent must be positive, got {target_dims}, {target_extent}")
    if tuple(image.dims) != tuple(geom.detector_dims):
        raise ValueError(f"image dims {image.dims} do not match geometry detector dims {geom.detector_dims}")
    spacing = np.asarray(target_extent) / np.asarray(target_dims)
    src, d, t_near, hit, step, n_steps = _rays(geom, target_extent, spacing)
    size = int(np.prod(target_dims))
    acc = np.zeros(size)
    y = np.asarray(image.values, dtype=np.float64).reshape(-1)
    rays = np.flatnonzero(hit & (y != 0))
    if n_steps and rays.size:
        for sl in _chunks(rays.size, n_steps):
            r = rays[sl]
            idx, w = _ray_weights(src, d[r], t_near[r], step, n_steps, target_dims, target_extent, spacing)
            acc += np.bincount(idx.reshape(-1), weights=(w * (step * y[r])[:, None]).reshape(-1), minlength=size)
    return VoxelGrid(acc.reshape(target_dims), target_extent)


# ---------------------------------------------------------------- rigid resampling


def apply_rigid_transform(volume: VoxelGrid, t: RigidTransform, interpolation: str = "trilinear", frame=None) -> VoxelGrid:
    """Resample so the output at world point p holds the input at ``t^-1(p)``."""
    orders = {"nearest": 0, "trilinear": 1}
    if interpolation not in orders:
        raise ValueError(f"interpolation must be 'nearest' or 'trilinear', got {interpolation!r}")
    rot, shift = t.inverse().matrix(frame)
    sp = volume.spacing
    half = np.asarray(volume.extent_mm) / 2
    # index -> world -> inverse map -> index, as one affine map
    m = np.diag(1 / sp) @ rot @ np.diag(sp)
    offset = (rot @ (0.5 * sp - half) + shift + half) / sp - 0.5
    values = np.asarray(volume.values, dtype=np.float64)
    out = ndimage.affine_transform(values, m, offset=offset, order=orders[interpolation],
                                   mode="constant", cval=0.0, prefilter=False)
    return VoxelGrid(out, volume.extent_mm)


# ---------------------------------------------------------------- acquisition sampling


@dataclass(frozen=True)
class AcquisitionRanges:
    """Uniform sampling ranges for the two projection planes (mm / degrees)."""

    dsd1: tuple[float, float] = (970.0, 1010.0)
    dsd2: tuple[float, float] = (1050.0, 1070.0)
    dso1: tuple[float, float] = (745.0, 785.0)
    dso2_delta: tuple[float, float] = (-3.0, 3.0)
    primary1: tuple[float, float] = (18.0, 42.0)
    secondary1: tuple[float, float] = (-8.0, 8.0)
    primary2: tuple[float, float] = (-8.0, 8.0)
    secondary2: tuple[float, float] = (18.0, 42.0)
    detector_spacing: tuple[float, float] = (0.2769, 0.2789)
    volume_extent: tuple[float, float] = (90.0, 105.0)


@dataclass(frozen=True)
class MotionRanges:
    rotation_deg: tuple[float, float] = (-10.0, 10.0)
    translation_mm: tuple[float, float] = (-8.0, 8.0)


def sample_acquisition(rng: np.random.Generator, detector_dims=PAPER_DETECTOR_DIMS,
                       ranges: AcquisitionRanges = AcquisitionRanges()):
    """Draw the geometry of both planes.

    Detector spacing is shared by the two planes and scaled by
    ``512 / nu`` for smaller detectors so the field of view is unchanged.
    """
    u = rng.uniform
    scale = PAPER_DETECTOR_DIMS[0] / detector_dims[0]
    spacing = u(*ranges.detector_spacing) * scale
    dso1 = u(*ranges.dso1)
    geom1 = ProjectionGeometry(
        dsd_mm=u(*ranges.dsd1), dso_mm=dso1,
        primary_deg=u(*ranges.primary1), secondary_deg=u(*ranges.secondary1),
        detector_dims=tuple(detector_dims), detector_spacing_mm=(spacing, spacing),
    )
    geom2 = ProjectionGeometry(
        dsd_mm=u(*ranges.dsd2), dso_mm=dso1 + u(*ranges.dso2_delta),
        primary_deg=u(*ranges.primary2), secondary_deg=u(*ranges.secondary2),
        detector_dims=tuple(detector_dims), detector_spacing_mm=(spacing, spacing),
    )
    return geom1, geom2


def sample_volume_extent(rng: np.random.Generator, ranges: AcquisitionRanges = AcquisitionRanges()):
    e = rng.uniform(*ranges.volume_extent)
    return (e, e, e)


def sample_motion(rng: np.random.Generator, ranges: MotionRanges = MotionRanges()) -> RigidTransform:
    r = ranges.rotation_deg
    tr = ranges.translation_mm
    return RigidTransform(
        rot_primary_deg=float(rng.uniform(*r)),
        rot_secondary_deg=float(rng.uniform(*r)),
        trans_mm=(float(rng.uniform(*tr)), float(rng.uniform(*tr))),
    )


# ---------------------------------------------------------------- files


def save_volume(path, grid: VoxelGrid) -> None:
    """Raw little-endian float32 (x fastest) plus a JSON sidecar."""
    path = Path(path)
    raw = np.asarray(grid.values, dtype="<f4").ravel(order="F")
    path.with_suffix(".raw").write_bytes(raw.tobytes())
    meta = {"dims": list(grid.dims), "extent_mm": list(grid.extent_mm), "dtype": "float32"}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def load_volume(path) -> VoxelGrid:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("dtype") != "float32":
        raise ValueError(f"unsupported volume dtype {meta.get('dtype')!r}")
    dims = tuple(meta["dims"])
    raw = np.frombuffer(path.with_suffix(".raw").read_bytes(), dtype="<f4")
    if raw.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload has {raw.size} values, expected {int(np.prod(dims))}")
    return VoxelGrid(raw.reshape(dims, order="F").astype(np.float32), tuple(meta["extent_mm"]))


def save_image(path, image: DetectorImage) -> None:
    """Lossless raw float32 + JSON sidecar, plus a min-max scaled 16-bit PGM preview."""
    path = Path(path)
    raw = np.asarray(image.values, dtype="<f4").ravel(order="F")
    path.with_suffix(".raw").write_bytes(raw.tobytes())
    meta = {"dims": list(image.dims), "spacing_mm": list(image.spacing_mm), "dtype": "float32"}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    write_pgm(path.with_suffix(".pgm"), image.values)


def load_image(path) -> DetectorImage:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    dims = tuple(meta["dims"])
    raw = np.frombuffer(path.with_suffix(".raw").read_bytes(), dtype="<f4")
    return DetectorImage(raw.reshape(dims, order="F").astype(np.float32), tuple(meta["spacing_mm"]))


def write_pgm(path, values: np.ndarray) -> None:
    """16-bit binary PGM, rows along v, columns along u."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    pix = np.round(scaled * 65535).astype(">u2").T
    header = f"P5\n{pix.shape[1]} {pix.shape[0]}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM")
    width, height, maxval = (int(g) for g in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    pix = np.frombuffer(data[m.end():], dtype=dtype, count=width * height).reshape(height, width)
    return pix.T
