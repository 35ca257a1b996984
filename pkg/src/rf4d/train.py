"""Bin sampling, the four loss terms and the optimisation loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as ad
from .core import grid_local_points
from .dataio import SequenceBundle, compute_scale
from .field import FieldConfig, GumbelMode, RadarField, gumbel_noise

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["iteration", "lr", "l_rt", "l_oc", "l_p", "l_m", "total"]


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 15000
    frames_per_batch: int = 4
    bins_per_frame: int = 1024
    lambda_oc: float = 0.1
    lambda_p: float = 0.01
    lambda_m: float = 0.01
    dt: float | None = None  # None: one frame interval, the smallest timestamp gap
    # desk-scale schedule; the published 1e-4 -> 1e-5 is far too slow for a 3000-step CPU budget
    lr0: float = 3e-4
    lr_final: float = 1e-4
    hash_lr_scale: float = 30.0  # hash rows start near zero and need a faster step than the MLPs
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if min(self.lambda_oc, self.lambda_p, self.lambda_m) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.bins_per_frame < 1 or self.frames_per_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)

    @property
    def temporal(self) -> bool:
        """Whether the scene-flow branch takes part in the objective."""
        return self.lambda_oc > 0 or self.lambda_m > 0


@dataclass
class LossBreakdown:
    l_rt: float
    l_oc: float
    l_p: float
    l_m: float
    total: float

    def check_additive(self, cfg: TrainConfig, tol: float = 1e-12) -> bool:
        s = self.l_rt + cfg.lambda_oc * self.l_oc + cfg.lambda_p * self.l_p + cfg.lambda_m * self.l_m
        return abs(s - self.total) <= tol * max(1.0, abs(self.total))


@dataclass
class BinSamples:
    frame: np.ndarray
    beam: np.ndarray
    bin: np.ndarray
    world: np.ndarray  # metric, (n, 3)
    direction: np.ndarray  # unit, (n, 3)
    delta: np.ndarray  # metric range, (n,)
    target: np.ndarray
    t: np.ndarray

    def __len__(self):
        return len(self.target)


def sample_bins(bundle: SequenceBundle, cfg: TrainConfig, rng: np.random.Generator, values: np.ndarray | None = None) -> BinSamples:
    """Frames drawn with replacement; bins drawn without replacement inside each frame."""
    g = bundle.geometry
    per_frame = g.n_theta * g.n_delta
    if cfg.bins_per_frame > per_frame:
        raise ValueError(f"bins_per_frame={cfg.bins_per_frame} exceeds the {per_frame} bins of a frame")
    if values is None:
        values = bundle.values()
    frames = rng.integers(0, len(bundle), size=cfg.frames_per_batch)
    flat = np.concatenate([rng.choice(per_frame, size=cfg.bins_per_frame, replace=False) for _ in frames])
    frame = np.repeat(frames, cfg.bins_per_frame)
    beam, rbin = np.divmod(flat, g.n_delta)
    local = grid_local_points(g)[beam, rbin]
    rot = np.stack([bundle.poses[f].rotation for f in frames])
    trans = np.stack([bundle.poses[f].translation for f in frames])
    rot_s = np.repeat(rot, cfg.bins_per_frame, axis=0)
    world = np.einsum("nij,nj->ni", rot_s, local) + np.repeat(trans, cfg.bins_per_frame, axis=0)
    delta = g.ranges()[rbin]
    direction = np.einsum("nij,nj->ni", rot_s, local / delta[:, None])
    ts = np.asarray(bundle.timestamps)[frame]
    target = values[frame, beam, rbin].astype(np.float64)
    return BinSamples(frame, beam, rbin, world, direction, delta, target, ts)


# ---------------------------------------------------------------------------
# losses; each accepts taped nodes or plain arrays


def _scalar(fn):
    def wrapper(*args, **kwargs):
        if any(isinstance(a, ad.Node) for a in args):
            return fn(*args, **kwargs)
        tape = ad.Tape()
        wrapped = [tape.const(np.asarray(a, dtype=np.float64).reshape(-1, 1)) if _arraylike(a) else a for a in args]
        return float(fn(*wrapped, **kwargs).value)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _arraylike(a):
    return isinstance(a, (list, tuple, np.ndarray, float, int)) and not isinstance(a, bool)


@_scalar
def loss_rt(pred: ad.Node, target: ad.Node) -> ad.Node:
    """Mean squared error between rendered and measured power."""
    return ad.mean_all(ad.square(ad.sub(pred, target)))


def loss_oc(alpha, alpha_prev, alpha_next, prev_present=None, next_present=None):
    """Mean over samples of squared occupancy changes to both warped neighbours.

    Absent sides (sequence boundaries) add nothing but still count in the
    divisor.
    """
    if not isinstance(alpha, ad.Node):
        tape = ad.Tape()
        a, p, nx = (tape.const(np.asarray(v, dtype=np.float64).reshape(-1, 1)) for v in (alpha, alpha_prev, alpha_next))
        return float(loss_oc(a, p, nx, prev_present, next_present).value)
    n = alpha.shape[0]
    pp = np.ones(n) if prev_present is None else np.asarray(prev_present, dtype=np.float64)
    pn = np.ones(n) if next_present is None else np.asarray(next_present, dtype=np.float64)
    prev_term = ad.weighted_sum(ad.square(ad.sub(alpha, alpha_prev)), pp.reshape(-1, 1) / n)
    next_term = ad.weighted_sum(ad.square(ad.sub(alpha, alpha_next)), pn.reshape(-1, 1) / n)
    return ad.add(prev_term, next_term)


@_scalar
def loss_p(alpha: ad.Node) -> ad.Node:
    """Mean occupancy; discourages the everything-occupied solution."""
    return ad.mean_all(alpha)


def loss_m(flow):
    """Mean over samples of |dx_prev| + |dx_next|."""
    if not isinstance(flow, ad.Node):
        tape = ad.Tape()
        return float(loss_m(tape.const(np.asarray(flow, dtype=np.float64).reshape(-1, 6))).value)
    prev = ad.row_norm(ad.columns(flow, 0, 3))
    nxt = ad.row_norm(ad.columns(flow, 3, 6))
    return ad.mean_all(ad.add(prev, nxt))


# ---------------------------------------------------------------------------
# objective


def objective(field: RadarField, samples: BinSamples, cfg: TrainConfig, dt: float, mode: GumbelMode, tape: ad.Tape):
    """Build the total loss on ``tape``; returns (total node, LossBreakdown)."""
    x = field.scale.to_normalized(samples.world)
    out = field.forward(tape, x, samples.t, samples.direction, mode, with_flow=cfg.temporal)
    pred = field.rendered_power(tape, out, samples.delta)
    target = tape.const(samples.target.reshape(-1, 1))
    l_rt = loss_rt(pred, target)
    l_p = loss_p(out.alpha)
    if cfg.temporal and out.flow is not None:
        ap, an, pp, pn = field.warped_occupancy(tape, x, samples.t, out.flow, dt, mode)
        l_oc = loss_oc(out.alpha, ap, an, pp, pn)
        l_m = loss_m(out.flow)
    else:
        l_oc = l_m = tape.const(0.0)
    total = ad.add(ad.add(ad.add(l_rt, ad.mul(l_oc, cfg.lambda_oc)), ad.mul(l_p, cfg.lambda_p)), ad.mul(l_m, cfg.lambda_m))
    bd = LossBreakdown(float(l_rt.value), float(l_oc.value), float(l_p.value), float(l_m.value), float(total.value))
    return total, bd


def frame_interval(bundle: SequenceBundle) -> float:
    """Smallest gap between timestamps: 1 / (n - 1) for an evenly spaced sequence,
    and still one original frame interval after frames are held out."""
    return float(np.min(np.diff(bundle.timestamps)))


def iteration_rng(seed: int, it: int) -> np.random.Generator:
    return np.random.default_rng([seed, it])


def train(
    bundle: SequenceBundle,
    field_cfg: FieldConfig,
    cfg: TrainConfig,
    out_dir=None,
    resume: bool = False,
    callback=None,
) -> tuple[RadarField, list[LossBreakdown]]:
    """Optimise a field on ``bundle``.

    With ``out_dir`` set, the loss log is written as ``losses.csv`` and
    checkpoints land in ``out_dir/checkpoint`` every ``checkpoint_every``
    iterations and at the end. ``resume`` continues from that checkpoint.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out_dir / "checkpoint" if out_dir is not None else None
    start = 0
    rows: list[list] = []
    if resume and ckpt_dir is not None and (ckpt_dir / "meta.json").exists():
        field, meta = RadarField.load(ckpt_dir)
        start = int(meta["iteration"])
        rows = _read_log(out_dir / "losses.csv", start)
    else:
        field = RadarField(field_cfg, scale=compute_scale(bundle))
    dt = cfg.dt if cfg.dt is not None else frame_interval(bundle)
    values = bundle.values()

    for it in range(start, cfg.iterations):
        rng = iteration_rng(cfg.seed, it)
        samples = sample_bins(bundle, cfg, rng, values)
        # one noise draw per sample, reused by the centre and warped branches
        noise = gumbel_noise(rng, (len(samples), 1))
        mode = GumbelMode(field.cfg.tau(it / max(cfg.iterations, 1)), stochastic=True, rng=rng, noise=noise)
        tape = ad.Tape(field.store)
        total, bd = objective(field, samples, cfg, dt, mode, tape)
        if not math.isfinite(bd.total):
            _dump_batch(out_dir, it, samples, bd)
            raise TrainingDivergedError(f"non-finite loss at iteration {it}: {bd}")
        tape.backward(total)
        lr = ad.lr_schedule(it, cfg.iterations, cfg.lr0, cfg.lr_final)
        ad.adam_step(field.store, lr, lr_scale={"hash": cfg.hash_lr_scale})
        rows.append([it, lr, bd.l_rt, bd.l_oc, bd.l_p, bd.l_m, bd.total])
        if callback is not None:
            callback(it, bd)
        done = it + 1
        if ckpt_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.iterations:
            _write_log(out_dir, rows)
            field.save(ckpt_dir, {"iteration": done, "geometry": bundle.geometry.to_dict()})

    if out_dir is not None:
        _write_log(out_dir, rows)
        field.save(ckpt_dir, {"iteration": cfg.iterations, "geometry": bundle.geometry.to_dict()})
        (out_dir / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    history = [LossBreakdown(*r[2:]) for r in rows]
    return field, history


def _write_log(out_dir: Path, rows):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


def _read_log(path: Path, upto: int) -> list[list]:
    if not path.exists():
        return []
    with open(path) as fh:
        return [[int(r["iteration"])] + [float(r[k]) for k in LOSS_COLUMNS[1:]] for r in csv.DictReader(fh) if int(r["iteration"]) < upto]


def _dump_batch(out_dir, it, samples: BinSamples, bd: LossBreakdown):
    if out_dir is None:
        log.error("non-finite loss at iteration %d: %s", it, bd)
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"diverged_batch_{it}.npz"
    np.savez(path, **{k: getattr(samples, k) for k in ("frame", "beam", "bin", "world", "delta", "target", "t")})
    log.error("non-finite loss at iteration %d (%s); batch dumped to %s", it, bd, path)
