"""Spatiotemporal radar field: occupancy, RCS and scene flow per query point.

Positions are queried in the normalised cube [-1, 1]^3; ranges used for
rendering stay metric so ``log10(sigma / delta^2)`` keeps the physical scale
of the measured scans.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as ad
from .core import PolarGeometry, Pose, RangeAzimuthScan, grid_local_points, local_to_world, view_direction
from .dataio import ScaleInfo

HASH_PRIMES = (1, 2654435761, 805459861)
_PRIMES_U64 = np.array(HASH_PRIMES, dtype=np.uint64)
BOUNDARY_TOL = 1e-9


@dataclass
class HashGridConfig:
    levels: int = 8
    table_size: int = 2**14
    features: int = 2
    base_resolution: int = 16
    growth: float = 1.5

    def __post_init__(self):
        if self.levels < 1 or self.features < 1:
            raise ValueError("hash grid needs at least one level and one feature")
        if self.table_size < 2 or self.table_size & (self.table_size - 1):
            raise ValueError(f"table size must be a power of two >= 2, got {self.table_size}")
        if self.base_resolution < 2 or not self.growth > 1.0:
            raise ValueError("base resolution must be >= 2 and growth > 1")

    def resolutions(self) -> np.ndarray:
        return np.array([math.floor(self.base_resolution * self.growth**l) for l in range(self.levels)], dtype=np.int64)

    @property
    def out_dim(self) -> int:
        return self.levels * self.features


@dataclass
class FieldConfig:
    hash: HashGridConfig = field(default_factory=HashGridConfig)
    time_frequencies: int = 6
    time_hidden: int = 16
    time_width: int = 8
    chi_width: int = 32
    alpha_hidden: int = 32
    sigma_hidden: int = 32
    flow_hidden: int = 32
    sh_degree: int = 3
    # fixed gain on the RCS head: sigma = exp(log_sigma_gain * z). Zero-init still gives sigma = 1.
    log_sigma_gain: float = 10.0
    tau_start: float = 1.0
    tau_final: float = 0.3
    use_time: bool = True
    use_flow: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.hash, dict):
            self.hash = HashGridConfig(**self.hash)
        for name in ("time_frequencies", "time_hidden", "time_width", "chi_width", "alpha_hidden", "sigma_hidden", "flow_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.log_sigma_gain > 0:
            raise ValueError("log_sigma_gain must be positive")
        if not (self.tau_start > 0 and self.tau_final > 0):
            raise ValueError("Gumbel temperatures must be positive")
        if self.sh_degree not in (0, 1, 2, 3):
            raise ValueError(f"SH degree must be 0..3, got {self.sh_degree}")

    def tau(self, progress: float) -> float:
        """Linearly annealed temperature; ``progress`` in [0, 1]."""
        p = min(max(progress, 0.0), 1.0)
        return self.tau_start + (self.tau_final - self.tau_start) * p

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> FieldConfig:
        return cls(**d)


# ---------------------------------------------------------------------------
# encodings


def hash_index(coords, table_size: int):
    """Spatial hash of integer vertex coordinates (..., 3), modulo a power-of-two table."""
    c = np.asarray(coords, dtype=np.int64).astype(np.uint64)
    h = (c[..., 0] * _PRIMES_U64[0]) ^ (c[..., 1] * _PRIMES_U64[1]) ^ (c[..., 2] * _PRIMES_U64[2])
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def _as_pairs(table: np.ndarray, rows: int, features: int) -> np.ndarray:
    """View (rows, F) float64 features as (rows, ceil(F/2)) complex pairs."""
    flat = table.reshape(rows, features)
    if features % 2:
        flat = np.concatenate([flat, np.zeros((rows, 1))], axis=1)
    return np.ascontiguousarray(flat).view(np.complex128)


class ClampCounter:
    """Counts queries that fell outside the normalised cube and were clamped."""

    def __init__(self):
        self.queries = 0
        self.clamped = 0

    def update(self, x: np.ndarray) -> np.ndarray:
        outside = np.any(np.abs(x) > 1.0, axis=1)
        self.queries += len(x)
        self.clamped += int(outside.sum())
        return outside


def hash_encode(tape: ad.Tape, x: ad.Node, cfg: HashGridConfig, table: ad.Node, counter: ClampCounter | None = None) -> ad.Node:
    """Multi-resolution hash features of points ``x`` (n, 3) -> (n, levels * features).

    Per level, the 8 corners of the enclosing voxel are hashed into that
    level's table and trilinearly interpolated. Gradients reach the touched
    table rows and, through the interpolation weights, the query positions.
    Corner ``i`` has offset bits (x, y, z) = (i & 1, i >> 1 & 1, i >> 2 & 1).
    """
    xv = x.value
    if counter is not None:
        counter.update(xv)
    inside = np.abs(xv) <= 1.0  # per axis: clamping one coordinate leaves the others differentiable
    L, T, F = cfg.levels, cfg.table_size, cfg.features
    n = xv.shape[0]
    res = cfg.resolutions().astype(np.float64)
    pos = ((np.clip(xv, -1.0, 1.0) + 1.0) * 0.5)[None, :, :] * res[:, None, None]  # (L, n, 3)
    base = np.floor(pos)
    frac = pos - base
    bi = base.astype(np.uint64)

    # per-axis hash terms for offsets 0/1, combined by XOR over the 8 corners
    hx = [bi[..., 0] * _PRIMES_U64[0], (bi[..., 0] + np.uint64(1)) * _PRIMES_U64[0]]
    hy = [bi[..., 1] * _PRIMES_U64[1], (bi[..., 1] + np.uint64(1)) * _PRIMES_U64[1]]
    hz = [bi[..., 2] * _PRIMES_U64[2], (bi[..., 2] + np.uint64(1)) * _PRIMES_U64[2]]
    h = np.stack([hx[i & 1] ^ hy[(i >> 1) & 1] ^ hz[(i >> 2) & 1] for i in range(8)], axis=-1)  # (L, n, 8)
    idx = (h & np.uint64(T - 1)).astype(np.int64)
    idx += (np.arange(L, dtype=np.int64) * T)[:, None, None]

    wx = np.stack([1.0 - frac[..., 0], frac[..., 0]], axis=-1)  # (L, n, 2)
    wy = np.stack([1.0 - frac[..., 1], frac[..., 1]], axis=-1)
    wz = np.stack([1.0 - frac[..., 2], frac[..., 2]], axis=-1)
    w = (wz[:, :, :, None, None] * wy[:, :, None, :, None] * wx[:, :, None, None, :]).reshape(L, n, 8)

    # feature pairs are gathered as complex numbers: one fancy-index pass for two features
    pairs = _as_pairs(table.value, L * T, F)
    feats = pairs[idx]  # (L, n, 8, F/2) complex
    out = np.einsum("lnc,lncg->lng", w, feats)
    value = np.empty((n, L, F))
    value[:, :, 0::2] = out.real.transpose(1, 0, 2)
    value[:, :, 1::2] = out.imag.transpose(1, 0, 2)[:, :, : F // 2]
    value = value.reshape(n, L * F)
    needs_x = x.backward_fn is not None or x.param_name is not None

    def bw(g):
        gl = g.reshape(n, L, F).transpose(1, 0, 2)  # (L, n, F)
        flat_idx = idx.ravel()
        tg = np.empty((L * T, F))
        for f in range(F):
            tg[:, f] = np.bincount(flat_idx, weights=(w * gl[:, :, f : f + 1]).ravel(), minlength=L * T)
        table.accumulate(tg.reshape(table.shape))
        if needs_x:
            gpair = gl[:, :, 0::2].astype(np.complex128)
            gpair[:, :, : F // 2] -= 1j * gl[:, :, 1::2]  # Re(feat * conj(g)) = f0 g0 + f1 g1
            gc = np.einsum("lncg,lng->lnc", feats, gpair).real.reshape(L, n, 2, 2, 2)  # (z, y, x)
            diff_x = gc[..., 1] - gc[..., 0]  # (L, n, z, y)
            diff_y = gc[:, :, :, 1, :] - gc[:, :, :, 0, :]  # (L, n, z, x)
            diff_z = gc[:, :, 1] - gc[:, :, 0]  # (L, n, y, x)
            gpos = np.stack(
                [
                    np.einsum("lnzy,lnz,lny->ln", diff_x, wz, wy),
                    np.einsum("lnzx,lnz,lnx->ln", diff_y, wz, wx),
                    np.einsum("lnyx,lny,lnx->ln", diff_z, wy, wx),
                ],
                axis=-1,
            )
            gx = 0.5 * np.einsum("lna,l->na", gpos, res)
            x.accumulate(gx * inside)

    return tape._record(value, bw)


def time_features(t, k: int) -> np.ndarray:
    """Raw sinusoidal encoding [sin(2^j pi t), cos(2^j pi t)] for j < k, shape (n, 2k)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("time must lie in [0, 1]")
    ang = np.pi * t[:, None] * (2.0 ** np.arange(k))[None, :]
    out = np.empty((t.size, 2 * k))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def time_encode(tape: ad.Tape, t, cfg: FieldConfig) -> ad.Node:
    raw = tape.const(time_features(t, cfg.time_frequencies))
    return ad.mlp_forward(tape, "time", raw, [2 * cfg.time_frequencies, cfg.time_hidden, cfg.time_width])


SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def _sh_terms(x, y, z, degree):
    """Real SH values and their partials (d/dx, d/dy, d/dz) as lists of arrays."""
    one, zero = np.ones_like(x), np.zeros_like(x)
    vals = [SH_C0 * one]
    grads = [(zero, zero, zero)]
    if degree >= 1:
        vals += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
        grads += [(zero, -SH_C1 * one, zero), (zero, zero, SH_C1 * one), (-SH_C1 * one, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        c = SH_C2
        vals += [c[0] * x * y, c[1] * y * z, c[2] * (2 * zz - xx - yy), c[3] * x * z, c[4] * (xx - yy)]
        grads += [
            (c[0] * y, c[0] * x, zero),
            (zero, c[1] * z, c[1] * y),
            (-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z),
            (c[3] * z, zero, c[3] * x),
            (2 * c[4] * x, -2 * c[4] * y, zero),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        c = SH_C3
        vals += [
            c[0] * y * (3 * xx - yy),
            c[1] * x * y * z,
            c[2] * y * (4 * zz - xx - yy),
            c[3] * z * (2 * zz - 3 * xx - 3 * yy),
            c[4] * x * (4 * zz - xx - yy),
            c[5] * z * (xx - yy),
            c[6] * x * (xx - 3 * yy),
        ]
        grads += [
            (c[0] * 6 * x * y, c[0] * (3 * xx - 3 * yy), zero),
            (c[1] * y * z, c[1] * x * z, c[1] * x * y),
            (-2 * c[2] * x * y, c[2] * (4 * zz - xx - 3 * yy), 8 * c[2] * y * z),
            (-6 * c[3] * x * z, -6 * c[3] * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)),
            (c[4] * (4 * zz - 3 * xx - yy), -2 * c[4] * x * y, 8 * c[4] * x * z),
            (2 * c[5] * x * z, -2 * c[5] * y * z, c[5] * (xx - yy)),
            (c[6] * (3 * xx - 3 * yy), -6 * c[6] * x * y, zero),
        ]
    return vals, grads


def _unit_directions(d) -> np.ndarray:
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    nrm = np.linalg.norm(d, axis=1, keepdims=True)
    if np.any(np.abs(nrm - 1.0) > 1e-6):
        raise ValueError("sh_encode needs unit directions")
    return d / nrm


def sh_encode(d, degree: int) -> np.ndarray:
    """Real spherical harmonics up to ``degree`` for unit directions, shape (n, (degree+1)^2).

    Inputs within 1e-6 of unit length are renormalised; anything further off
    raises.
    """
    d = _unit_directions(d)
    vals, _ = _sh_terms(d[:, 0], d[:, 1], d[:, 2], degree)
    return np.stack(vals, axis=1)


def sh_encode_node(tape: ad.Tape, d: ad.Node, degree: int) -> ad.Node:
    """Taped SH basis; differentiable in the (already unit) direction components."""
    x, y, z = d.value[:, 0], d.value[:, 1], d.value[:, 2]
    vals, grads = _sh_terms(x, y, z, degree)
    jac = np.stack([np.stack(g, axis=1) for g in grads], axis=1)  # (n, basis, 3)

    def bw(g):
        d.accumulate(np.einsum("nb,nba->na", g, jac))

    return tape._record(np.stack(vals, axis=1), bw)


# ---------------------------------------------------------------------------
# occupancy activation


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Difference of two standard Gumbel samples (logistic noise)."""
    tiny = np.finfo(np.float64).tiny
    u1 = np.maximum(rng.random(shape), tiny)
    u2 = np.maximum(rng.random(shape), tiny)
    return -np.log(-np.log(u1)) + np.log(-np.log(u2))


def gumbel_sigmoid(tape: ad.Tape, logit: ad.Node, tau: float, stochastic: bool = False, rng=None, noise=None) -> ad.Node:
    """sigmoid((logit + g1 - g2) / tau); the noise is sampled off-tape and held constant."""
    if not tau > 0:
        raise ValueError("temperature must be positive")
    if stochastic:
        if noise is None:
            noise = gumbel_noise(rng, logit.shape)
        logit = ad.add(logit, tape.const(noise))
    return ad.sigmoid(ad.mul(logit, 1.0 / tau))


def gumbel_sigmoid_value(logit, tau: float, stochastic: bool = False, rng=None) -> np.ndarray:
    t = ad.Tape()
    return gumbel_sigmoid(t, t.const(np.atleast_1d(np.asarray(logit, dtype=np.float64))), tau, stochastic, rng).value


# ---------------------------------------------------------------------------
# the field


@dataclass
class FieldOutput:
    alpha: ad.Node
    log_sigma: ad.Node
    flow: ad.Node | None
    chi: ad.Node
    logit: ad.Node

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.value)


@dataclass
class GumbelMode:
    """How occupancy logits are activated: stochastic draws or plain sigmoid."""

    tau: float
    stochastic: bool = False
    rng: np.random.Generator | None = None
    # optional pre-drawn (n, 1) noise, shared by every branch evaluated at the same samples
    noise: np.ndarray | None = None


def render_power(alpha, sigma, delta):
    """alpha * log10(sigma / delta^2); the occupancy gates the physical return."""
    a = np.asarray(alpha, dtype=np.float64)
    s = np.asarray(sigma, dtype=np.float64)
    dl = np.asarray(delta, dtype=np.float64)
    if np.any(~(s > 0)) or np.any(~(dl > 0)):
        raise ValueError("render_power needs sigma > 0 and delta > 0")
    out = a * (np.log10(s) - 2.0 * np.log10(dl))
    return float(out) if out.ndim == 0 else out


class RadarField:
    """Parameters plus architecture of one trained scene."""

    def __init__(self, cfg: FieldConfig, store: ad.ParamStore | None = None, scale: ScaleInfo | None = None):
        self.cfg = cfg
        self.scale = scale or ScaleInfo(1.0)
        self.store = store if store is not None else init_params(cfg)
        self.clamps = ClampCounter()

    # architecture widths
    def _chi_widths(self):
        c = self.cfg
        return [c.hash.out_dim + (c.time_width if c.use_time else 0), c.chi_width, c.chi_width]

    def _alpha_widths(self):
        return [self.cfg.chi_width, self.cfg.alpha_hidden, 1]

    def _sigma_widths(self):
        return [self.cfg.chi_width + (self.cfg.sh_degree + 1) ** 2, self.cfg.sigma_hidden, 1]

    def _flow_widths(self):
        return [self.cfg.chi_width, self.cfg.flow_hidden, 6]

    def latent(self, tape: ad.Tape, x: ad.Node, t) -> ad.Node:
        feats = [hash_encode(tape, x, self.cfg.hash, tape.param("hash.table"), self.clamps)]
        if self.cfg.use_time:
            feats.append(time_encode(tape, t, self.cfg))
        h = feats[0] if len(feats) == 1 else ad.concat(feats)
        return ad.mlp_forward(tape, "chi", h, self._chi_widths())

    def occupancy(self, tape: ad.Tape, chi: ad.Node, mode: GumbelMode) -> tuple[ad.Node, ad.Node]:
        logit = ad.mlp_forward(tape, "alpha", chi, self._alpha_widths())
        return gumbel_sigmoid(tape, logit, mode.tau, mode.stochastic, mode.rng, mode.noise), logit

    def forward(self, tape: ad.Tape, x, t, d, mode: GumbelMode, with_flow: bool = True) -> FieldOutput:
        """Evaluate the field at normalised points ``x`` (n, 3), times ``t`` (n,), unit directions ``d`` (n, 3)."""
        x = x if isinstance(x, ad.Node) else tape.const(x)
        chi = self.latent(tape, x, t)
        alpha, logit = self.occupancy(tape, chi, mode)
        sh = tape.const(sh_encode(d, self.cfg.sh_degree))
        log_sigma = ad.mlp_forward(tape, "sigma", ad.concat([chi, sh]), self._sigma_widths())
        if self.cfg.log_sigma_gain != 1.0:
            log_sigma = ad.mul(log_sigma, self.cfg.log_sigma_gain)
        flow = None
        if with_flow and self.cfg.use_flow:
            flow = ad.mlp_forward(tape, "flow", chi, self._flow_widths())
        return FieldOutput(alpha, log_sigma, flow, chi, logit)

    def warped_occupancy(self, tape: ad.Tape, x, t, flow: ad.Node, dt: float, mode: GumbelMode):
        """Occupancy of the flow-warped points at t - dt and t + dt.

        Returns ``(alpha_prev, alpha_next, prev_present, next_present)``; at
        the sequence ends the missing side is evaluated at the clamped time
        and flagged absent.
        """
        x = x if isinstance(x, ad.Node) else tape.const(x)
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        out = []
        for sign, lo in ((-1.0, 0), (1.0, 3)):
            tn = t + sign * dt
            present = (tn >= -BOUNDARY_TOL) & (tn <= 1.0 + BOUNDARY_TOL)
            xw = ad.add(x, ad.columns(flow, lo, lo + 3))
            chi = self.latent(tape, xw, np.clip(tn, 0.0, 1.0))
            alpha, _ = self.occupancy(tape, chi, mode)
            out.append((alpha, present))
        (ap, pp), (an, pn) = out
        return ap, an, pp, pn

    def rendered_power(self, tape: ad.Tape, out: FieldOutput, delta_m) -> ad.Node:
        """Taped alpha * log10(sigma / delta^2) with metric ranges ``delta_m`` (n,)."""
        log_range = tape.const(-2.0 * np.log10(np.asarray(delta_m, dtype=np.float64))[:, None])
        return ad.mul(out.alpha, ad.add(ad.mul(out.log_sigma, 1.0 / ad.LN10), log_range))

    def deterministic(self) -> GumbelMode:
        return GumbelMode(self.cfg.tau_final, stochastic=False)

    def query(self, points_world, t: float, directions=None, chunk: int = 32768):
        """Deterministic alpha and log-RCS at metric world points (n, 3)."""
        pts = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
        if directions is None:
            directions = np.tile([1.0, 0.0, 0.0], (len(pts), 1))
        alpha = np.empty(len(pts))
        log_sigma = np.empty(len(pts))
        for lo in range(0, len(pts), chunk):
            hi = min(lo + chunk, len(pts))
            tape = ad.Tape(self.store)
            out = self.forward(
                tape, self.scale.to_normalized(pts[lo:hi]), np.full(hi - lo, float(t)), directions[lo:hi], self.deterministic(), with_flow=False
            )
            alpha[lo:hi] = out.alpha.value[:, 0]
            log_sigma[lo:hi] = out.log_sigma.value[:, 0]
        return alpha, log_sigma

    def occupancy_at(self, points_world, t: float) -> np.ndarray:
        return self.query(points_world, t)[0]

    def render_scan(self, pose: Pose, t: float, geom: PolarGeometry, return_parts: bool = False):
        return render_scan(self, pose, t, geom, return_parts)

    def render_node(self, tape: ad.Tape, pose: Pose, t: float, geom: PolarGeometry) -> ad.Node:
        """Taped deterministic render of a whole scan, flattened beam-major to (n_theta * n_delta, 1)."""
        world = local_to_world(grid_local_points(geom).reshape(-1, 3), pose)
        dirs = view_direction(world, pose.translation)
        out = self.forward(tape, self.scale.to_normalized(world), np.full(len(world), float(t)), dirs, self.deterministic(), with_flow=False)
        delta = np.broadcast_to(geom.ranges()[None, :], geom.shape).ravel()
        return self.rendered_power(tape, out, delta)

    # persistence
    def save(self, path, extra: dict | None = None) -> None:
        path = Path(path)
        meta = {"scale": self.scale.to_dict()}
        if extra:
            meta.update(extra)
        ad.save_store(self.store, path, meta)
        (path / "field_config.json").write_text(json.dumps(self.cfg.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> tuple[RadarField, dict]:
        path = Path(path)
        cfg = FieldConfig.from_dict(json.loads((path / "field_config.json").read_text()))
        store, meta = ad.load_store(path)
        return cls(cfg, store, ScaleInfo.from_dict(meta["scale"])), meta


def init_params(cfg: FieldConfig) -> ad.ParamStore:
    """Hash rows U(-1e-4, 1e-4); every head's output layer starts at zero."""
    rng = np.random.default_rng(cfg.seed)
    store = ad.ParamStore()
    h = cfg.hash
    store.add("hash.table", rng.uniform(-1e-4, 1e-4, size=(h.levels, h.table_size, h.features)))
    if cfg.use_time:
        ad.init_mlp(store, "time", [2 * cfg.time_frequencies, cfg.time_hidden, cfg.time_width], rng)
    chi_in = h.out_dim + (cfg.time_width if cfg.use_time else 0)
    ad.init_mlp(store, "chi", [chi_in, cfg.chi_width, cfg.chi_width], rng)
    ad.init_mlp(store, "alpha", [cfg.chi_width, cfg.alpha_hidden, 1], rng, zero_last=True)
    ad.init_mlp(store, "sigma", [cfg.chi_width + (cfg.sh_degree + 1) ** 2, cfg.sigma_hidden, 1], rng, zero_last=True)
    if cfg.use_flow:
        ad.init_mlp(store, "flow", [cfg.chi_width, cfg.flow_hidden, 6], rng, zero_last=True)
    return store


def render_scan(field, pose: Pose, t: float, geom: PolarGeometry, return_parts: bool = False):
    """Synthesize the polar power map seen from ``pose`` at time ``t``.

    ``field`` only needs ``query(world_points, t, directions) -> (alpha, log_sigma)``.
    With ``return_parts`` also returns the alpha and sigma maps.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time {t} outside [0, 1]")
    local = grid_local_points(geom).reshape(-1, 3)
    world = local_to_world(local, pose)
    dirs = view_direction(world, pose.translation)
    alpha, log_sigma = field.query(world, t, dirs)
    delta = np.broadcast_to(geom.ranges()[None, :], geom.shape).ravel()
    power = alpha * (log_sigma / ad.LN10 - 2.0 * np.log10(delta))
    scan = RangeAzimuthScan(geom, power.reshape(geom.shape), float(t))
    if return_parts:
        return scan, alpha.reshape(geom.shape), np.exp(log_sigma).reshape(geom.shape)
    return scan
