"""Synthetic dynamic radar scenes with exact ground truth.

Scenes are planar: reflectors are discs moving in the sensor sweep plane
(z = 0). ``simulate_scan`` casts one ray per beam and deposits the
inverse-square return of the first disc it hits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PolarGeometry, Pose, RangeAzimuthScan, power_db
from .dataio import SequenceBundle

# Storage precision of scans; keeps simulated bundles bit-exact through dataio.
SCAN_DTYPE = np.float32


@dataclass
class Reflector:
    """Disc reflector following a piecewise-linear path over normalized time.

    ``keyframes`` is a list of ``(t, x, y)``. With ``lobe_exponent > 0`` the
    RCS falls off as ``cos(angle)**lobe_exponent`` away from ``lobe_azimuth``
    (world frame, direction the reflector faces).
    """

    keyframes: list[tuple[float, float, float]]
    radius: float
    rcs: float
    lobe_exponent: float = 0.0
    lobe_azimuth: float = 0.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"reflector radius must be positive, got {self.radius}")
        if not self.rcs > 0:
            raise ValueError(f"reflector rcs must be positive, got {self.rcs}")
        if not self.keyframes:
            raise ValueError("reflector needs at least one keyframe")
        self.keyframes = sorted((float(t), float(x), float(y)) for t, x, y in self.keyframes)
        ts = [k[0] for k in self.keyframes]
        if len(set(ts)) != len(ts):
            raise ValueError("duplicate keyframe times")
        if len(ts) > 1 and (ts[0] > 0.0 or ts[-1] < 1.0):
            raise ValueError("a moving reflector's keyframes must span [0, 1]")

    def effective_rcs(self, incoming_dir: np.ndarray) -> float:
        """RCS seen by a ray travelling along ``incoming_dir`` (unit 2-vector)."""
        if self.lobe_exponent == 0.0:
            return self.rcs
        facing = np.array([math.cos(self.lobe_azimuth), math.sin(self.lobe_azimuth)])
        c = float(-incoming_dir @ facing)
        if c <= 0.0:
            return 0.0
        return self.rcs * c**self.lobe_exponent


@dataclass
class SceneSpec:
    reflectors: list[Reflector] = field(default_factory=list)
    noise_floor_db: float = 0.0
    noise_std_db: float = 0.0
    ghost_probability: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.ghost_probability <= 1.0:
            raise ValueError(f"ghost_probability must be in [0, 1], got {self.ghost_probability}")
        if self.noise_std_db < 0:
            raise ValueError(f"noise_std_db must be >= 0, got {self.noise_std_db}")

    def to_dict(self) -> dict:
        return {
            "noise_floor_db": self.noise_floor_db,
            "noise_std_db": self.noise_std_db,
            "ghost_probability": self.ghost_probability,
            "reflectors": [
                {
                    "keyframes": [list(k) for k in r.keyframes],
                    "radius": r.radius,
                    "rcs": r.rcs,
                    "lobe_exponent": r.lobe_exponent,
                    "lobe_azimuth": r.lobe_azimuth,
                }
                for r in self.reflectors
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        refl = [
            Reflector(
                keyframes=[tuple(k) for k in r["keyframes"]],
                radius=float(r["radius"]),
                rcs=float(r["rcs"]),
                lobe_exponent=float(r.get("lobe_exponent", 0.0)),
                lobe_azimuth=float(r.get("lobe_azimuth", 0.0)),
            )
            for r in d.get("reflectors", [])
        ]
        return cls(
            reflectors=refl,
            noise_floor_db=float(d.get("noise_floor_db", 0.0)),
            noise_std_db=float(d.get("noise_std_db", 0.0)),
            ghost_probability=float(d.get("ghost_probability", 0.0)),
        )


class SceneFormatError(ValueError):
    pass


def load_scene(path) -> SceneSpec:
    """Parse a scene JSON file, reporting the offending line or field."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise SceneFormatError(f"{path}: top level must be an object")
    for i, r in enumerate(data.get("reflectors", [])):
        for key in ("keyframes", "radius", "rcs"):
            if key not in r:
                raise SceneFormatError(f"{path}: reflectors[{i}] is missing field '{key}'")
    try:
        return SceneSpec.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise SceneFormatError(f"{path}: {exc}") from exc


def save_scene(scene: SceneSpec, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2) + "\n")


def reflector_position(r: Reflector, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time {t} outside [0, 1]")
    kf = r.keyframes
    if len(kf) == 1 or t <= kf[0][0]:
        return np.array(kf[0][1:])
    for (t0, x0, y0), (t1, x1, y1) in zip(kf, kf[1:]):
        if t <= t1:
            w = (t - t0) / (t1 - t0)
            return np.array([x0 + w * (x1 - x0), y0 + w * (y1 - y0)])
    return np.array(kf[-1][1:])


def _ray_disc(origin: np.ndarray, u: np.ndarray, center: np.ndarray, radius: float) -> float | None:
    """Distance along a unit ray to the first crossing of a disc boundary."""
    oc = center - origin
    b = float(u @ oc)
    c = float(oc @ oc) - radius * radius
    if c <= 0.0:
        return None  # sensor inside the disc
    disc = b * b - c
    if disc < 0.0 or b <= 0.0:
        return None
    s = b - math.sqrt(disc)
    return s if s > 0.0 else None


def _deposit(out: np.ndarray, beam: int, s: float, rcs: float, geom: PolarGeometry) -> None:
    """Write a return at range ``s`` into the covering bin plus a +-1 bin triangle.

    The covering bin takes the full power at its centre range; each neighbour
    takes its own centre-range power scaled by ``1 - |delta_k - s| / (2 res)``.
    Overlapping deposits keep the stronger value.
    """
    k0 = geom.range_to_bin(s)
    ranges = geom.ranges()
    res = geom.range_resolution
    for k in (k0 - 1, k0, k0 + 1):
        if not 0 <= k < geom.n_delta:
            continue
        w = 1.0 if k == k0 else max(0.0, 1.0 - abs(ranges[k] - s) / (2.0 * res))
        if w <= 0.0:
            continue
        val = w * power_db(rcs, ranges[k])
        if np.isnan(out[beam, k]) or val > out[beam, k]:
            out[beam, k] = val


def simulate_scan(scene: SceneSpec, pose: Pose, t: float, geom: PolarGeometry, rng_seed: int) -> RangeAzimuthScan:
    rng = np.random.default_rng(rng_seed)
    noise = rng.normal(scene.noise_floor_db, scene.noise_std_db, size=geom.shape)
    ghost_draw = rng.random(geom.n_theta)

    origin = pose.translation[:2]
    centers = [reflector_position(r, t) for r in scene.reflectors]
    deposits = np.full(geom.shape, np.nan)
    for j, theta in enumerate(geom.azimuths()):
        d = pose.rotation @ np.array([math.cos(theta), math.sin(theta), 0.0])
        u = d[:2] / np.linalg.norm(d[:2])
        best, hit = math.inf, None
        for r, c in zip(scene.reflectors, centers):
            s = _ray_disc(origin, u, c, r.radius)
            if s is not None and s < best:
                best, hit = s, r
        if hit is None:
            continue
        rcs = hit.effective_rcs(u)
        if rcs <= 0.0:
            continue
        _deposit(deposits, j, best, rcs, geom)
        if ghost_draw[j] < scene.ghost_probability:
            _deposit(deposits, j, 2.0 * best, rcs / 4.0, geom)

    values = np.where(np.isnan(deposits), noise, deposits).astype(SCAN_DTYPE)
    return RangeAzimuthScan(geom, values, float(t))


def ground_truth_bev(scene: SceneSpec, t: float, samples_per_reflector: int) -> np.ndarray:
    """Boundary points of every disc at time ``t``, shape (n, 2), world metres."""
    if samples_per_reflector < 1:
        raise ValueError("samples_per_reflector must be >= 1")
    ang = 2.0 * np.pi * np.arange(samples_per_reflector) / samples_per_reflector
    ring = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    pts = [reflector_position(r, t) + r.radius * ring for r in scene.reflectors]
    if not pts:
        return np.zeros((0, 2))
    return np.concatenate(pts, axis=0)


def make_sequence(scene: SceneSpec, ego_path: list[Pose], n_frames: int, geom: PolarGeometry, seed: int) -> SequenceBundle:
    """Simulate ``n_frames`` evenly spaced frames; frame k uses seed ``seed + k``.

    ``ego_path`` is either one pose per frame, a single static pose, or a
    list of keyframe poses linearly interpolated (translation and yaw).
    """
    if n_frames < 2:
        raise ValueError(f"a sequence needs at least 2 frames, got {n_frames}")
    times = [k / (n_frames - 1) for k in range(n_frames)]
    poses = interpolate_ego(ego_path, times)
    scans = [simulate_scan(scene, poses[k], times[k], geom, seed + k) for k in range(n_frames)]
    return SequenceBundle(geom, scans, poses, times)


def interpolate_ego(ego_path: list[Pose], times: list[float]) -> list[Pose]:
    if not ego_path:
        raise ValueError("ego path is empty")
    if len(ego_path) == len(times):
        return list(ego_path)
    if len(ego_path) == 1:
        return [ego_path[0]] * len(times)
    key_t = np.linspace(0.0, 1.0, len(ego_path))
    xs = np.array([p.translation for p in ego_path])
    yaws = np.unwrap([math.atan2(p.rotation[1, 0], p.rotation[0, 0]) for p in ego_path])
    out = []
    for t in times:
        x = [np.interp(t, key_t, xs[:, a]) for a in range(2)]
        out.append(Pose.planar(x[0], x[1], float(np.interp(t, key_t, yaws))))
    return out
