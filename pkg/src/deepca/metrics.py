"""Overlap, Chamfer and Dice scores, rigid point-set registration, evaluation protocols.

Point sets are (n, k) arrays of voxel or pixel centres in mm.  Nearest
neighbour queries go through ``cKDTree``; every distance that decides a
count is recomputed with the plain ``sqrt(sum(d**2))`` formula so the result
matches an exhaustive pairwise loop exactly.
"""
from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from .geometry import DetectorImage, ProjectionGeometry, VoxelGrid, forward_project
from .pipeline import binarize

REPORT_COLUMNS = ("sample_id", "plane", "dice", "ot1", "ot2", "chamfer_mm")
UNDEFINED = "undefined"


# ---------------------------------------------------------------- point sets


def as_points(a) -> np.ndarray:
    pts = np.asarray(a, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, pts.shape[-1] if pts.ndim == 2 else 3)
    if pts.ndim == 1:
        pts = pts[None]
    if pts.ndim != 2:
        raise ValueError(f"points must be an (n, k) array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    return pts


def volume_points(grid: VoxelGrid, mask=None) -> np.ndarray:
    """Foreground voxel centres in mm, ``(index + 0.5) * spacing - extent / 2``."""
    mask = grid.values > 0 if mask is None else mask
    return grid.centers(mask)


def image_points(image: DetectorImage, mask=None) -> np.ndarray:
    mask = image.values > 0 if mask is None else mask
    return image.centers(mask)


def _pair_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


def _within(src: np.ndarray, dst: np.ndarray, d: float) -> np.ndarray:
    """Mask over ``src``: some point of ``dst`` lies at distance <= d."""
    if len(src) == 0 or len(dst) == 0:
        return np.zeros(len(src), dtype=bool)
    tree = cKDTree(dst)
    nn = _nn_dist(src, tree, dst)
    hit = nn <= d
    # only near-ties can hide another point the exact formula puts inside d
    slack = d * 1e-9 + 1e-12
    for i in np.flatnonzero(~hit & (nn <= d + slack)):
        js = tree.query_ball_point(src[i], r=d + 2 * slack)
        hit[i] = np.any(_pair_dist(src[i], dst[js]) <= d)
    return hit


def ot_overlap(target, pred, d_mm: float) -> float:
    """Sweeping-threshold overlap ``(|TPM| + |TPR|) / (|TPM| + |TPR| + |FN| + |FP|)``."""
    if d_mm < 0:
        raise ValueError(f"d_mm must be >= 0, got {d_mm}")
    target, pred = as_points(target), as_points(pred)
    if len(target) == 0 and len(pred) == 0:
        return 1.0
    if len(target) == 0 or len(pred) == 0:
        return 0.0
    tpr = int(_within(target, pred, d_mm).sum())
    tpm = int(_within(pred, target, d_mm).sum())
    fn = len(target) - tpr
    fp = len(pred) - tpm
    return (tpm + tpr) / (tpm + tpr + fn + fp)


def _nn_dist(src: np.ndarray, tree: cKDTree, dst: np.ndarray) -> np.ndarray:
    _, idx = tree.query(src)
    return _pair_dist(src, dst[idx])


def chamfer_l2(a, b) -> float:
    """Symmetric mean nearest-neighbour Euclidean distance (mm, not squared)."""
    a, b = as_points(a), as_points(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance is undefined for an empty point set")
    da = _nn_dist(a, cKDTree(b), b)
    db = _nn_dist(b, cKDTree(a), a)
    return 0.5 * (da.mean() + db.mean())


def dice(a_mask, b_mask) -> float:
    """``2|A & B| / (|A| + |B|)`` on boolean masks; two empty masks score 1."""
    a = np.asarray(a_mask, dtype=bool)
    b = np.asarray(b_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"dice: mask shapes differ {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


# ---------------------------------------------------------------- registration


def _rotation(angles_deg) -> np.ndarray:
    """2-d: one angle.  3-d: ``Rz(a) Ry(b) Rx(c)``."""
    a = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    if a.size == 1:
        c, s = math.cos(a.flat[0]), math.sin(a.flat[0])
        return np.array([[c, -s], [s, c]])
    cz, sz = math.cos(a[0]), math.sin(a[0])
    cy, sy = math.cos(a[1]), math.sin(a[1])
    cx, sx = math.cos(a[2]), math.sin(a[2])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1.0]])
    ry = np.array([[cy, 0, sy], [0, 1.0, 0], [-sy, 0, cy]])
    rx = np.array([[1.0, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class Registration:
    """Rigid map ``p -> R (p - center) + center + translation`` and its scores.

    ``angles_deg`` has one entry in 2-d and three (z, y, x) in 3-d.
    """

    angles_deg: tuple
    translation_mm: tuple
    center_mm: tuple
    chamfer_before: float
    chamfer_after: float

    @property
    def rotation(self) -> np.ndarray:
        return _rotation(self.angles_deg)

    def apply(self, points) -> np.ndarray:
        pts = as_points(points)
        if not any(self.angles_deg) and not any(self.translation_mm):
            return pts
        c = np.asarray(self.center_mm)
        return (pts - c) @ self.rotation.T + c + np.asarray(self.translation_mm)


class _ChamferTo:
    def __init__(self, fixed: np.ndarray):
        self.fixed = fixed
        self.tree = cKDTree(fixed)

    def __call__(self, moved: np.ndarray) -> float:
        da = _nn_dist(moved, self.tree, self.fixed)
        db = _nn_dist(self.fixed, cKDTree(moved), moved)
        return 0.5 * (da.mean() + db.mean())


def rigid_register(moving, fixed, dims: int | None = None, *, grid_deg: float = 5.0, range_deg: float = 30.0,
                   trans_range_mm: float = 16.0, simplex_deg: float = 2.5, simplex_mm: float = 2.0) -> Registration:
    """Rigid transform taking ``moving`` onto ``fixed`` with the lowest Chamfer distance.

    Coarse search over a ``grid_deg`` rotation grid within +-``range_deg``,
    each rotation paired with the translation that aligns the centroids;
    the best candidate is refined by Nelder-Mead with the translation kept
    within ``trans_range_mm`` of centroid alignment.  The identity is always a
    candidate, so the result never scores worse than no registration.  No
    randomness is involved.
    """
    moving, fixed = as_points(moving), as_points(fixed)
    dims = moving.shape[1] if dims is None else dims
    if dims not in (2, 3) or moving.shape[1] != dims or fixed.shape[1] != dims:
        raise ValueError(f"rigid_register: expected {dims}-d point sets")
    if len(moving) == 0 or len(fixed) == 0:
        raise ValueError("rigid_register: empty point set")
    n_rot = 1 if dims == 2 else 3
    center = moving.mean(axis=0)
    shift0 = fixed.mean(axis=0) - center
    score = _ChamferTo(fixed)
    rel = moving - center

    def cost(params):
        ang, t = params[:n_rot], params[n_rot:]
        if not np.any(params):
            return score(moving)
        return score(rel @ _rotation(ang).T + center + t)

    identity = np.zeros(n_rot + dims)
    base = cost(identity)
    best_x, best_f = identity, base
    steps = np.arange(-range_deg, range_deg + 1e-9, grid_deg)
    for ang in itertools.product(steps, repeat=n_rot):
        x = np.concatenate([ang, shift0])
        f = cost(x)
        if f < best_f:
            best_x, best_f = x, f

    lo, hi = shift0 - trans_range_mm, shift0 + trans_range_mm

    def bounded(params):
        p = params.copy()
        p[n_rot:] = np.clip(p[n_rot:], lo, hi)
        return cost(p)

    simplex = np.tile(best_x, (len(best_x) + 1, 1))
    for i in range(len(best_x)):
        simplex[i + 1, i] += simplex_deg if i < n_rot else simplex_mm
    res = minimize(bounded, best_x, method="Nelder-Mead",
                   options={"initial_simplex": simplex, "xatol": 1e-4, "fatol": 1e-8, "maxiter": 400 * len(best_x)})
    x = res.x.copy()
    x[n_rot:] = np.clip(x[n_rot:], lo, hi)
    f = cost(x)
    if f < best_f:
        best_x, best_f = x, f
    return Registration(tuple(float(v) for v in best_x[:n_rot]), tuple(float(v) for v in best_x[n_rot:]),
                        tuple(float(v) for v in center), float(base), float(best_f))


# ---------------------------------------------------------------- protocols


@dataclass
class MetricReport:
    """Scores for one sample and plane.  ``*_pre`` hold the unregistered values.

    ``chamfer_mm`` is ``None`` when undefined (an empty set).
    """

    plane: str
    dice: float
    ot1: float
    ot2: float
    chamfer_mm: float | None
    ot1_pre: float | None = None
    ot2_pre: float | None = None
    chamfer_pre: float | None = None
    registration: Registration | None = field(default=None, repr=False)

    def row(self, sample_id: str) -> dict:
        return {"sample_id": sample_id, "plane": self.plane, "dice": self.dice, "ot1": self.ot1, "ot2": self.ot2,
                "chamfer_mm": UNDEFINED if self.chamfer_mm is None else self.chamfer_mm}


def _scores(target: np.ndarray, pred: np.ndarray):
    ot1, ot2 = ot_overlap(target, pred, 1.0), ot_overlap(target, pred, 2.0)
    cd = chamfer_l2(target, pred) if len(target) and len(pred) else None
    return ot1, ot2, cd


def _registered_report(plane: str, dice_value: float, target: np.ndarray, pred: np.ndarray) -> MetricReport:
    """Register ``target`` (the reference) onto ``pred`` and score both before and after."""
    ot1_pre, ot2_pre, cd_pre = _scores(target, pred)
    if len(target) == 0 or len(pred) == 0:
        return MetricReport(plane, dice_value, ot1_pre, ot2_pre, cd_pre, ot1_pre, ot2_pre, cd_pre)
    reg = rigid_register(target, pred)
    ot1, ot2, cd = _scores(reg.apply(target), pred)
    return MetricReport(plane, dice_value, ot1, ot2, cd, ot1_pre, ot2_pre, cd_pre, reg)


def evaluate_3d(ground_truth: VoxelGrid, recon: VoxelGrid, threshold: float = 0.5) -> MetricReport:
    """Binarize ``recon``, rigidly register the ground truth onto it, report Ot(1), Ot(2), Chamfer.

    ``dice`` is the voxel Dice before registration (registered points leave
    the grid, so Ot(0) afterwards would be meaningless).
    """
    if ground_truth.dims != recon.dims:
        raise ValueError(f"evaluate_3d: dims differ {ground_truth.dims} vs {recon.dims}")
    vals = np.asarray(recon.values)
    if vals.min(initial=0.0) < 0 or vals.max(initial=0.0) > 1:
        raise ValueError("evaluate_3d: reconstruction values must lie in [0, 1]")
    gt_mask = ground_truth.values > 0
    pred_mask = binarize(vals, threshold) > 0
    target = ground_truth.centers(gt_mask)
    pred = recon.centers(pred_mask)
    return _registered_report("3d", dice(gt_mask, pred_mask), target, pred)


def reproject(recon: VoxelGrid, geom: ProjectionGeometry, threshold: float = 0.5) -> DetectorImage:
    """Forward-project the 0.5-binarized reconstruction and binarize the image at 0."""
    mask = binarize(recon.values, threshold)
    img = forward_project(recon.with_values(mask), geom)
    return DetectorImage(binarize(img.values, 0.0), img.spacing_mm)


def evaluate_reprojection(recon: VoxelGrid, reference_projections, geometries, sanity_floor: float = 0.5,
                          threshold: float = 0.5) -> list[MetricReport]:
    """Per-plane scores of reprojections against the reference images.

    Plane 1 shares its geometry with the network input, so it is scored
    directly (Dice, plus unregistered Ot and Chamfer).  Planes 2.. are scored
    after 2-d rigid registration of the reference onto the reprojection.  A
    plane-1 Dice below ``sanity_floor`` suggests a geometry mismatch and
    raises a warning.
    """
    refs, geoms = list(reference_projections), list(geometries)
    if len(refs) != len(geoms):
        raise ValueError(f"{len(refs)} reference images but {len(geoms)} geometries")
    reports = []
    for k, (ref, geom) in enumerate(zip(refs, geoms), start=1):
        if ref is None or geom is None:
            raise ValueError(f"plane {k}: missing reference image or geometry")
        rep = reproject(recon, geom, threshold)
        if rep.dims != ref.dims:
            raise ValueError(f"plane {k}: reference dims {ref.dims} differ from detector dims {rep.dims}")
        ref_mask, rep_mask = ref.values > 0, rep.values > 0
        d = dice(ref_mask, rep_mask)
        target, pred = ref.centers(ref_mask), rep.centers(rep_mask)
        if k == 1:
            ot1, ot2, cd = _scores(target, pred)
            reports.append(MetricReport("1", d, ot1, ot2, cd, ot1, ot2, cd))
            if d < sanity_floor:
                warnings.warn(f"plane-1 Dice {d:.3f} is below {sanity_floor}; check the geometry", stacklevel=2)
        else:
            reports.append(_registered_report(str(k), d, target, pred))
    return reports


# ---------------------------------------------------------------- reports


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean and standard deviation rows per plane; undefined Chamfer values are skipped."""
    out = []
    planes = sorted({r["plane"] for r in rows}, key=str)
    for plane in planes:
        sel = [r for r in rows if r["plane"] == plane]
        mean = {"sample_id": "mean", "plane": plane}
        std = {"sample_id": "std", "plane": plane}
        for col in REPORT_COLUMNS[2:]:
            vals = np.array([float(r[col]) for r in sel if r[col] != UNDEFINED and r[col] is not None])
            mean[col] = float(vals.mean()) if len(vals) else UNDEFINED
            std[col] = float(vals.std()) if len(vals) else UNDEFINED
        out += [mean, std]
    return out


def write_report(path, rows: list[dict]) -> Path:
    """Per-sample rows followed by the mean/std aggregate rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in list(rows) + aggregate(rows):
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items() if k in REPORT_COLUMNS})
    return path


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
