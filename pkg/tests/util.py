"""Shared helpers for the test suite: finite differences, micro configs, criterion log."""

from __future__ import annotations

import numpy as np

from rf4d import diffcore as ad
from rf4d.field import FieldConfig, HashGridConfig

FD_STEP = 1e-5
REL_TOL = 1e-4
# relative error denominator floor; coordinates whose true gradient is below
# this are compared in absolute terms instead
REL_FLOOR = 1e-6

CRITERIA: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    CRITERIA.append((name, passed, detail))
    print(line)


def rel_err(a, b, floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_diff(fn, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``fn`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    flat = x.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = fn()
        flat[i] = keep - h
        down = fn()
        flat[i] = keep
        out[i] = (up - down) / (2 * h)
    return out.reshape(x.shape)


def micro_field_config(**kw) -> FieldConfig:
    base = dict(
        hash=HashGridConfig(levels=2, table_size=32, features=2, base_resolution=2, growth=2.0),
        time_frequencies=2,
        time_hidden=4,
        time_width=3,
        chi_width=5,
        alpha_hidden=4,
        sigma_hidden=4,
        flow_hidden=4,
        sh_degree=1,
        log_sigma_gain=1.0,
    )
    base.update(kw)
    return FieldConfig(**base)


def randomize(store: ad.ParamStore, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Overwrite every block with random values so no head sits at its zero init."""
    for name in store.names():
        store.params[name][...] = rng.normal(0.0, scale, size=store.params[name].shape)
