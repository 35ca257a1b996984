"""Scan-synthesis metrics, occupancy extraction, Chamfer metrics and CA-CFAR."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import PolarGeometry, Pose, RangeAzimuthScan, grid_local_points, local_to_world

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class UndefinedMetricError(ValueError):
    pass


@dataclass
class BevPointSet:
    """2D points in metres, world frame."""

    points: np.ndarray
    source: str = "field"
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise ValueError("BEV points must be finite")
        self.points = pts
        if len(pts) == 0 and "empty" not in self.flags:
            self.flags.append("empty")

    def __len__(self):
        return len(self.points)

    @property
    def empty(self) -> bool:
        return len(self.points) == 0


def _values(x):
    return np.asarray(x.values if isinstance(x, RangeAzimuthScan) else x, dtype=np.float64)


def joint_normalize(pred, gt):
    """Map both arrays by the ground truth's min-max range onto [0, 1]."""
    p, g = _values(pred), _values(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    lo, hi = g.min(), g.max()
    span = hi - lo if hi > lo else 1.0
    return (p - lo) / span, (g - lo) / span


def psnr(pred, gt) -> float:
    p, g = joint_normalize(pred, gt)
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(pred, gt, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over every full ``window`` x ``window`` patch (no padding, no azimuth wrap)."""
    p, g = joint_normalize(pred, gt)
    if p.ndim != 2 or min(p.shape) < window:
        raise ValueError(f"map {p.shape} smaller than the {window}x{window} SSIM window")

    def local_mean(a):
        return sliding_window_view(a, (window, window)).mean(axis=(-1, -2))

    mu_p, mu_g = local_mean(p), local_mean(g)
    var_p = local_mean(p * p) - mu_p**2
    var_g = local_mean(g * g) - mu_g**2
    cov = local_mean(p * g) - mu_p * mu_g
    num = (2 * mu_p * mu_g + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_p**2 + mu_g**2 + SSIM_C1) * (var_p + var_g + SSIM_C2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# point-set metrics


def _nn_sq(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Squared distance from each point of ``a`` to its nearest neighbour in ``b``."""
    out = np.empty(len(a))
    for lo in range(0, len(a), chunk):
        blk = a[lo : lo + chunk]
        dx = blk[:, None, 0] - b[None, :, 0]
        dy = blk[:, None, 1] - b[None, :, 1]
        out[lo : lo + chunk] = np.min(dx * dx + dy * dy, axis=1)
    return out


def _pts(s) -> np.ndarray:
    return s.points if isinstance(s, BevPointSet) else np.asarray(s, dtype=np.float64).reshape(-1, 2)


def chamfer(a, b) -> float:
    """Mean squared NN distance a->b plus b->a (m^2)."""
    pa, pb = _pts(a), _pts(b)
    if len(pa) == 0 or len(pb) == 0:
        raise UndefinedMetricError("Chamfer distance is undefined for an empty point set")
    return math.fsum(_nn_sq(pa, pb)) / len(pa) + math.fsum(_nn_sq(pb, pa)) / len(pb)


def relative_chamfer(a, b, sensor_origin) -> float:
    """Chamfer with each squared NN distance divided by the squared range of its query point."""
    pa, pb = _pts(a), _pts(b)
    if len(pa) == 0 or len(pb) == 0:
        raise UndefinedMetricError("relative Chamfer distance is undefined for an empty point set")
    o = np.asarray(sensor_origin, dtype=np.float64)[:2]
    ra = np.sum((pa - o) ** 2, axis=1)
    rb = np.sum((pb - o) ** 2, axis=1)
    if np.any(ra == 0.0) or np.any(rb == 0.0):
        raise UndefinedMetricError("a point coincides with the sensor origin")
    return math.fsum(_nn_sq(pa, pb) / ra) / len(pa) + math.fsum(_nn_sq(pb, pa) / rb) / len(pb)


def within_sensing_range(points, origin, geom: PolarGeometry) -> np.ndarray:
    """Keep the points whose range from ``origin`` lies inside the first/last bin centres."""
    pts = _pts(points)
    r = np.linalg.norm(pts - np.asarray(origin, dtype=np.float64)[:2], axis=1)
    return pts[(r >= geom.min_range) & (r <= geom.max_range)]


# ---------------------------------------------------------------------------
# occupancy extraction


def bev_grid(pose: Pose, geom: PolarGeometry, cell: float) -> np.ndarray:
    """Cell centres (n, 3) at z = 0 covering the sensed annulus around ``pose``."""
    r = geom.max_range
    n = int(math.ceil(2 * r / cell))
    c = (np.arange(n) + 0.5) * cell - n * cell / 2
    gx, gy = np.meshgrid(c, c, indexing="ij")
    rr = np.hypot(gx, gy)
    keep = (rr >= geom.min_range) & (rr <= geom.max_range)
    ox, oy = pose.translation[:2]
    pts = np.zeros((int(keep.sum()), 3))
    pts[:, 0] = gx[keep] + ox
    pts[:, 1] = gy[keep] + oy
    return pts


def extract_occupancy_bev(field, pose: Pose, t: float, geom: PolarGeometry, cell: float = 0.5, threshold: float = 0.5) -> BevPointSet:
    """Cells whose deterministic occupancy reaches ``threshold``.

    ``field`` needs ``occupancy_at(world_points, t) -> alpha``.
    """
    pts = bev_grid(pose, geom, cell)
    alpha = field.occupancy_at(pts, t)
    return BevPointSet(pts[alpha >= threshold, :2], source="field")


# ---------------------------------------------------------------------------
# CA-CFAR


@dataclass
class CfarConfig:
    training: int = 8
    guard: int = 2
    offset_db: float = 12.0

    def __post_init__(self):
        if self.training < 1 or self.guard < 0:
            raise ValueError("CFAR needs training >= 1 and guard >= 0")


def cfar_mask(values: np.ndarray, cfg: CfarConfig) -> np.ndarray:
    """Cell-averaging CFAR along range for each beam.

    Scan values are log10 power (bels), so the dB offset is applied as
    ``offset_db / 10``. Near the ends of a beam only the training cells that
    exist are averaged.
    """
    v = np.asarray(values, dtype=np.float64)
    n_beams, n = v.shape
    tr, gd = cfg.training, cfg.guard
    if n <= 2 * (tr + gd):
        raise ValueError(f"{n} range bins is too few for {tr} training and {gd} guard cells per side")
    csum = np.concatenate([np.zeros((n_beams, 1)), np.cumsum(v, axis=1)], axis=1)
    k = np.arange(n)
    # lagging window [k-gd-tr, k-gd), leading window (k+gd, k+gd+tr]
    l_lo, l_hi = np.clip(k - gd - tr, 0, n), np.clip(k - gd, 0, n)
    r_lo, r_hi = np.clip(k + gd + 1, 0, n), np.clip(k + gd + tr + 1, 0, n)
    total = (csum[:, l_hi] - csum[:, l_lo]) + (csum[:, r_hi] - csum[:, r_lo])
    count = (l_hi - l_lo) + (r_hi - r_lo)
    noise = total / count
    return v > noise + cfg.offset_db / 10.0


def cfar_detect(scan, geom: PolarGeometry, cfg: CfarConfig | None = None, pose: Pose | None = None) -> BevPointSet:
    cfg = cfg or CfarConfig()
    pose = pose or Pose.identity()
    mask = cfar_mask(_values(scan), cfg)
    beams, bins = np.nonzero(mask)
    local = grid_local_points(geom)[beams, bins]
    world = local_to_world(local, pose)
    return BevPointSet(world[:, :2], source="cfar")


# ---------------------------------------------------------------------------
# per-frame reports


METRICS = ("psnr", "ssim", "cd", "rcd")


def _geometric(entry: dict, pred: BevPointSet, gt: np.ndarray, origin) -> None:
    entry["n_points"] = len(pred)
    if pred.empty or len(gt) == 0:
        entry["cd"] = entry["rcd"] = None
        entry["flags"].append("empty_prediction" if pred.empty else "empty_ground_truth")
        return
    entry["cd"] = chamfer(pred, gt)
    entry["rcd"] = relative_chamfer(pred, gt, origin)


def _summary(entries: list[dict]) -> dict:
    mean = {}
    for k in METRICS:
        vals = [e[k] for e in entries if e.get(k) is not None]
        mean[k] = math.fsum(vals) / len(vals) if vals else None
    return {"frames": entries, "mean": mean}


def _check_frames(bundle, frames):
    for k in frames:
        if not 0 <= k < len(bundle):
            raise IndexError(f"frame index {k} out of range for a {len(bundle)}-frame sequence")


def evaluate_field(field, bundle, frames, gt_points: dict, cell: float = 0.5, threshold: float = 0.5) -> dict:
    """PSNR/SSIM of rendered scans plus CD/RCD of extracted occupancy per frame.

    ``field`` needs ``render_scan`` and ``occupancy_at``. ``gt_points`` maps a
    frame index to its ground-truth BEV points; only the part inside the
    sensed annulus of that frame is scored.
    """
    _check_frames(bundle, frames)
    geom = bundle.geometry
    entries = []
    for k in frames:
        pose, t, gt_scan = bundle.poses[k], bundle.timestamps[k], bundle.scans[k]
        entry = {"frame": int(k), "t": float(t), "flags": []}
        pred_scan = field.render_scan(pose, t, geom)
        entry["psnr"] = psnr(pred_scan, gt_scan)
        entry["ssim"] = ssim(pred_scan, gt_scan)
        gt = within_sensing_range(gt_points[k], pose.translation, geom)
        _geometric(entry, extract_occupancy_bev(field, pose, t, geom, cell, threshold), gt, pose.translation)
        entries.append(entry)
    return _summary(entries)


def evaluate_cfar(bundle, frames, gt_points: dict, cfg: CfarConfig | None = None) -> tuple[dict, dict]:
    """CD/RCD of CA-CFAR detections per frame; same report layout as ``evaluate_field``.

    Returns the report and the detections per frame.
    """
    _check_frames(bundle, frames)
    geom = bundle.geometry
    entries, detections = [], {}
    for k in frames:
        pose = bundle.poses[k]
        entry = {"frame": int(k), "t": float(bundle.timestamps[k]), "psnr": None, "ssim": None, "flags": ["no_scan_synthesis"]}
        det = cfar_detect(bundle.scans[k], geom, cfg, pose)
        detections[int(k)] = det
        gt = within_sensing_range(gt_points[k], pose.translation, geom)
        _geometric(entry, det, gt, pose.translation)
        entries.append(entry)
    return _summary(entries), detections
