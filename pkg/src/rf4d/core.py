"""Radar geometry, poses and the closed-form power model.

Conventions shared by every module: azimuth 0 points along +x, angles grow
counter-clockwise, z is up. Bin ``k`` is centred at ``(min_bin + k + 0.5)``
range resolutions, so no bin ever sits on the sensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ORTHONORMAL_TOL = 1e-9


class DegenerateDirectionError(ValueError):
    pass


@dataclass(frozen=True)
class PolarGeometry:
    n_theta: int
    n_delta: int
    range_resolution: float
    min_bin: int = 50

    def __post_init__(self):
        if self.n_theta < 1 or self.n_delta < 1:
            raise ValueError(f"geometry needs at least one beam and one bin, got {self.n_theta}x{self.n_delta}")
        if not self.range_resolution > 0:
            raise ValueError(f"range_resolution must be positive, got {self.range_resolution}")
        if self.min_bin < 0:
            raise ValueError(f"min_bin must be non-negative, got {self.min_bin}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_theta, self.n_delta)

    def azimuths(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_theta) / self.n_theta

    def ranges(self) -> np.ndarray:
        return (self.min_bin + np.arange(self.n_delta) + 0.5) * self.range_resolution

    @property
    def min_range(self) -> float:
        return (self.min_bin + 0.5) * self.range_resolution

    @property
    def max_range(self) -> float:
        """Range of the outermost bin centre."""
        return (self.min_bin + self.n_delta - 0.5) * self.range_resolution

    def range_to_bin(self, r: float) -> int:
        """Index of the bin whose cell covers range ``r`` (may be out of bounds)."""
        return int(math.floor(r / self.range_resolution)) - self.min_bin

    def to_dict(self) -> dict:
        return {
            "n_theta": self.n_theta,
            "n_delta": self.n_delta,
            "range_resolution": self.range_resolution,
            "min_bin": self.min_bin,
        }


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"pose needs a 3x3 rotation and a 3-vector, got {r.shape} and {t.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite entries")
        if np.max(np.abs(r @ r.T - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError(f"rotation determinant is {np.linalg.det(r):.6f}, expected +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def planar(cls, x: float, y: float, yaw: float = 0.0) -> Pose:
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.array([x, y, 0.0]))

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        if np.max(np.abs(m[3] - [0.0, 0.0, 0.0, 1.0])) > ORTHONORMAL_TOL:
            raise ValueError("last row of a pose matrix must be [0, 0, 0, 1]")
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)


@dataclass(frozen=True)
class RangeAzimuthScan:
    geometry: PolarGeometry
    values: np.ndarray
    timestamp: float

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.geometry.shape:
            raise ValueError(f"scan shape {v.shape} does not match geometry {self.geometry.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("scan values must be finite")
        object.__setattr__(self, "values", v)

    def __eq__(self, other):
        if not isinstance(other, RangeAzimuthScan):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.timestamp == other.timestamp
            and np.array_equal(self.values, other.values)
        )


def bin_to_local(beam_index: int, range_bin: int, geom: PolarGeometry) -> np.ndarray:
    if not (0 <= beam_index < geom.n_theta and 0 <= range_bin < geom.n_delta):
        raise IndexError(f"bin ({beam_index}, {range_bin}) outside {geom.n_theta}x{geom.n_delta} geometry")
    theta = 2.0 * math.pi * beam_index / geom.n_theta
    delta = (geom.min_bin + range_bin + 0.5) * geom.range_resolution
    return np.array([delta * math.cos(theta), delta * math.sin(theta), 0.0])


def grid_local_points(geom: PolarGeometry) -> np.ndarray:
    """Radar-frame points of every bin, shape (n_theta, n_delta, 3)."""
    th = geom.azimuths()[:, None]
    dl = geom.ranges()[None, :]
    pts = np.zeros(geom.shape + (3,))
    pts[..., 0] = dl * np.cos(th)
    pts[..., 1] = dl * np.sin(th)
    return pts


def local_to_world(p, pose: Pose) -> np.ndarray:
    """Map radar-frame points (..., 3) into the world frame."""
    p = np.asarray(p, dtype=np.float64)
    return p @ pose.rotation.T + pose.translation


def view_direction(world_point, sensor_origin) -> np.ndarray:
    """Unit vectors from the sensor to each point; works on (..., 3) arrays."""
    diff = np.asarray(world_point, dtype=np.float64) - np.asarray(sensor_origin, dtype=np.float64)
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise DegenerateDirectionError("view direction undefined for a point at the sensor origin")
    return diff / norm


def power_db(rcs, rng):
    """log10(rcs / range^2): received power with the constant radar factors dropped."""
    rcs_a = np.asarray(rcs, dtype=np.float64)
    rng_a = np.asarray(rng, dtype=np.float64)
    if np.any(~(rcs_a > 0)) or np.any(~(rng_a > 0)):
        raise ValueError("power_db requires rcs > 0 and range > 0")
    out = np.log10(rcs_a) - 2.0 * np.log10(rng_a)
    return float(out) if out.ndim == 0 else out
