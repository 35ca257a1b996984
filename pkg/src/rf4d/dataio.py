"""On-disk sequence format.

A sequence directory holds ``meta.json`` (geometry, timestamps, 4x4 row-major
poses) and ``scans.f32``: little-endian float32, frame-major, then beam, then
range bin.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import PolarGeometry, Pose, RangeAzimuthScan

META_NAME = "meta.json"
SCANS_NAME = "scans.f32"


class SequenceFormatError(Exception):
    """Base class for problems reading a sequence directory."""


class MissingFileError(SequenceFormatError, FileNotFoundError):
    pass


class MalformedMetaError(SequenceFormatError):
    pass


class PayloadSizeError(SequenceFormatError):
    pass


class InvariantError(SequenceFormatError, ValueError):
    pass


class DegenerateSceneError(ValueError):
    pass


@dataclass
class SequenceBundle:
    geometry: PolarGeometry
    scans: list[RangeAzimuthScan]
    poses: list[Pose]
    timestamps: list[float]

    def __post_init__(self):
        self.validate()

    def validate(self):
        n = len(self.scans)
        if n < 2:
            raise InvariantError(f"a sequence needs at least 2 frames, got {n}")
        if len(self.poses) != n or len(self.timestamps) != n:
            raise InvariantError("scans, poses and timestamps must have equal length")
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if ts[0] != 0.0 or ts[-1] != 1.0:
            raise InvariantError(f"timestamps must start at 0 and end at 1, got {ts[0]} .. {ts[-1]}")
        if np.any(np.diff(ts) <= 0):
            raise InvariantError("timestamps must be strictly increasing")
        for s, t in zip(self.scans, self.timestamps):
            if s.geometry != self.geometry:
                raise InvariantError("all scans must share the bundle geometry")
            if s.timestamp != t:
                raise InvariantError("scan timestamp disagrees with the bundle timestamp list")

    def __len__(self):
        return len(self.scans)

    def values(self) -> np.ndarray:
        """All frames stacked, shape (frames, n_theta, n_delta)."""
        return np.stack([s.values for s in self.scans])

    def __eq__(self, other):
        if not isinstance(other, SequenceBundle):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.timestamps == other.timestamps
            and all(a == b for a, b in zip(self.poses, other.poses))
            and all(a == b for a, b in zip(self.scans, other.scans))
        )


@dataclass(frozen=True)
class ScaleInfo:
    """Uniform similarity that maps metric world points into the [-1, 1]^3 cube."""

    scale: float
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_normalized(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - np.asarray(self.center)) * self.scale

    def to_metric(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) / self.scale + np.asarray(self.center)

    def distance_to_metric(self, d):
        return d / self.scale

    def to_dict(self) -> dict:
        return {"scale": self.scale, "center": list(self.center)}

    @classmethod
    def from_dict(cls, d) -> ScaleInfo:
        return cls(float(d["scale"]), tuple(float(c) for c in d["center"]))


def write_sequence(bundle: SequenceBundle, path) -> None:
    bundle.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    g = bundle.geometry
    meta = {
        **g.to_dict(),
        "frames": len(bundle),
        "timestamps": [float(t) for t in bundle.timestamps],
        "poses": [[float(v) for v in p.matrix().ravel()] for p in bundle.poses],
    }
    payload = np.ascontiguousarray(bundle.values(), dtype="<f4")
    _atomic_write(path / SCANS_NAME, payload.tobytes())
    _atomic_write(path / META_NAME, (json.dumps(meta, indent=1) + "\n").encode())


def _atomic_write(target: Path, data: bytes) -> None:
    tmp = target.with_name(target.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, target)


def read_sequence(path) -> SequenceBundle:
    path = Path(path)
    meta_path, scans_path = path / META_NAME, path / SCANS_NAME
    for p in (meta_path, scans_path):
        if not p.is_file():
            raise MissingFileError(f"missing sequence file: {p}")
    try:
        meta = json.loads(meta_path.read_text())
        geom = PolarGeometry(
            n_theta=int(meta["n_theta"]),
            n_delta=int(meta["n_delta"]),
            range_resolution=float(meta["range_resolution"]),
            min_bin=int(meta["min_bin"]),
        )
        frames = int(meta["frames"])
        timestamps = [float(t) for t in meta["timestamps"]]
        pose_rows = [list(map(float, p)) for p in meta["poses"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise MalformedMetaError(f"cannot parse {meta_path}: {exc}") from exc
    except ValueError as exc:
        raise InvariantError(f"invalid geometry in {meta_path}: {exc}") from exc
    if len(timestamps) != frames or len(pose_rows) != frames or any(len(p) != 16 for p in pose_rows):
        raise MalformedMetaError(f"{meta_path}: frame count disagrees with timestamps/poses")

    raw = scans_path.read_bytes()
    expected = frames * geom.n_theta * geom.n_delta * 4
    if len(raw) != expected:
        raise PayloadSizeError(f"{scans_path}: {len(raw)} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype="<f4").reshape(frames, geom.n_theta, geom.n_delta)

    try:
        poses = [Pose.from_matrix(p) for p in pose_rows]
        scans = [RangeAzimuthScan(geom, values[i].copy(), timestamps[i]) for i in range(frames)]
        return SequenceBundle(geom, scans, poses, timestamps)
    except InvariantError:
        raise
    except ValueError as exc:
        raise InvariantError(f"{path}: {exc}") from exc


def compute_scale(bundle: SequenceBundle) -> ScaleInfo:
    """Scale that fits every reachable bin centre inside the unit cube.

    The cube is centred on the bounding box of the sensor positions; the
    half-extent is the largest per-axis offset of a sensor from that centre
    plus the maximum bin range.
    """
    trans = np.array([p.translation for p in bundle.poses])
    lo, hi = trans.min(axis=0), trans.max(axis=0)
    center = 0.5 * (lo + hi)
    extent = float(np.max(hi - center)) + bundle.geometry.max_range
    if not extent > 0:
        raise DegenerateSceneError("scene has zero spatial extent")
    return ScaleInfo(1.0 / extent, tuple(float(c) for c in center))


def normalize_coordinates(bundle: SequenceBundle) -> tuple[SequenceBundle, ScaleInfo]:
    """Rescale poses and range resolution into normalised units.

    Scan values keep their metric power; rendering must convert ranges back
    to metres with ``ScaleInfo.distance_to_metric``.
    """
    info = compute_scale(bundle)
    g = bundle.geometry
    geom = PolarGeometry(g.n_theta, g.n_delta, g.range_resolution * info.scale, g.min_bin)
    poses = [Pose(p.rotation, info.to_normalized(p.translation)) for p in bundle.poses]
    scans = [RangeAzimuthScan(geom, s.values, s.timestamp) for s in bundle.scans]
    return SequenceBundle(geom, scans, poses, list(bundle.timestamps)), info
