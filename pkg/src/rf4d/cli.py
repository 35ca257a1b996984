"""Command-line front end: ``rf4d {synth,train,render,eval,cfar,replay}``.

Every command resolves its full configuration (defaults, then ``--config``
JSON, then explicit flags), runs, and finishes by writing ``manifest.json``
into its output directory. ``rf4d replay manifest.json --out DIR`` re-runs a
command from that manifest alone.

Exit codes: 0 success, 1 internal or numeric failure, 2 usage or input error.
"""

from __future__ import annotations

import os


def _cap_threads() -> None:
    # must run before numpy loads its BLAS
    n = os.environ.get("RF4D_THREADS")
    if n and n.isdigit() and int(n) > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = n


_cap_threads()

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import math  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .core import PolarGeometry, Pose  # noqa: E402
from .dataio import SequenceBundle, SequenceFormatError, read_sequence, write_sequence  # noqa: E402
from .evaluation import CfarConfig, evaluate_cfar, evaluate_field, joint_normalize, psnr  # noqa: E402
from .field import FieldConfig, RadarField  # noqa: E402
from .synth import SceneFormatError, SceneSpec, ground_truth_bev, load_scene, make_sequence  # noqa: E402
from .train import TrainConfig, train  # noqa: E402

log = logging.getLogger("rf4d")

MANIFEST_NAME = "manifest.json"
DEFAULT_GEOMETRY = {"n_theta": 64, "n_delta": 64, "range_resolution": 0.5, "min_bin": 4}
DEFAULT_HOLDOUT = [3, 8, 13, 18]


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# small helpers


def _merge(base: dict, override: dict | None) -> dict:
    out = dict(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"{p}: config must be a JSON object")
    return cfg


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _write_points(path: Path, points: np.ndarray) -> None:
    rows = ["x,y"] + [f"{float(x)!r},{float(y)!r}" for x, y in np.asarray(points).reshape(-1, 2)]
    _atomic_text(path, "\n".join(rows) + "\n")


def read_points(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing ground-truth file: {path}")
    with open(path, newline="") as fh:
        pts = [(float(r["x"]), float(r["y"])) for r in csv.DictReader(fh)]
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def _read_bundle(seq) -> SequenceBundle:
    p = Path(seq)
    if not p.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {p}")
    return read_sequence(p)


def _load_ckpt(ckpt) -> tuple[RadarField, dict]:
    p = Path(ckpt)
    if (p / "checkpoint" / "meta.json").is_file():
        p = p / "checkpoint"
    if not (p / "meta.json").is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    return RadarField.load(p)


def _gt_points(seq, frames) -> dict:
    return {k: read_points(Path(seq) / f"gt_bev_{k}.csv") for k in frames}


def write_pgm16(path: Path, image01: np.ndarray) -> None:
    """Binary 16-bit PGM; values are clipped to [0, 1] first."""
    img = np.asarray(image01, dtype=np.float64)
    q = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(">u2")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode()
    _atomic_bytes(path, header + q.tobytes())


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w)


def polar_to_cartesian(values: np.ndarray, geom: PolarGeometry, cell: float) -> np.ndarray:
    """Nearest-beam, covering-bin resampling onto a sensor-centred square grid.

    Row 0 is the +y edge; pixels outside the sensed annulus are 0.
    """
    n = int(math.ceil(2.0 * geom.max_range / cell))
    c = (np.arange(n) + 0.5) * cell - n * cell / 2.0
    xs, ys = np.meshgrid(c, c[::-1])
    r = np.hypot(xs, ys)
    beam = np.round(np.mod(np.arctan2(ys, xs), 2 * np.pi) / (2 * np.pi / geom.n_theta)).astype(np.int64) % geom.n_theta
    rbin = np.floor(r / geom.range_resolution).astype(np.int64) - geom.min_bin
    ok = (rbin >= 0) & (rbin < geom.n_delta)
    out = np.zeros((n, n))
    out[ok] = values[beam[ok], rbin[ok]]
    return out


# ---------------------------------------------------------------------------
# commands; each takes (resolved config, paths) and returns (outputs, extra manifest info)


def run_synth(config: dict, paths: dict):
    out = Path(paths["out"])
    scene = SceneSpec.from_dict(config["scene"])
    geom = PolarGeometry(**config["geometry"])
    ego = [Pose.planar(*p) for p in config["ego"]]
    bundle = make_sequence(scene, ego, int(config["frames"]), geom, int(config["seed"]))
    write_sequence(bundle, out)
    outputs = ["meta.json", "scans.f32"]
    for k, t in enumerate(bundle.timestamps):
        name = f"gt_bev_{k}.csv"
        _write_points(out / name, ground_truth_bev(scene, t, int(config["gt_samples"])))
        outputs.append(name)
    return outputs, {}


def _subset(bundle: SequenceBundle, holdout: list[int]) -> SequenceBundle:
    n = len(bundle)
    bad = [k for k in holdout if not 0 <= k < n]
    if bad:
        raise IndexError(f"holdout frames {bad} out of range for a {n}-frame sequence")
    if 0 in holdout or n - 1 in holdout:
        raise UsageError("the first and last frames anchor t=0 and t=1 and cannot be held out")
    keep = [k for k in range(n) if k not in set(holdout)]
    return SequenceBundle(
        bundle.geometry, [bundle.scans[k] for k in keep], [bundle.poses[k] for k in keep], [bundle.timestamps[k] for k in keep]
    )


def run_train(config: dict, paths: dict):
    out = Path(paths["out"])
    bundle = _subset(_read_bundle(paths["seq"]), list(config["holdout"]))
    field_cfg = FieldConfig.from_dict(config["field"])
    train_cfg = TrainConfig.from_dict(config["train"])
    t0 = time.perf_counter()

    def progress(it, bd):
        if it % 500 == 0:
            log.info("iter %d  total %.5g  l_rt %.5g  (%.0f s)", it, bd.total, bd.l_rt, time.perf_counter() - t0)

    _, history = train(bundle, field_cfg, train_cfg, out_dir=out, resume=bool(config.get("resume")), callback=progress)
    outputs = ["losses.csv", "train_config.json", "checkpoint/meta.json", "checkpoint/field_config.json"]
    outputs += [f"checkpoint/{n}" for n in ("params.f64", "adam_m.f64", "adam_v.f64")]
    final = {"final_total": history[-1].total, "final_l_rt": history[-1].l_rt} if history else {}
    return outputs, final


def run_render(config: dict, paths: dict):
    out = Path(paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    field, _ = _load_ckpt(paths["ckpt"])
    geom = PolarGeometry(**config["geometry"])
    t = float(config["time"])
    if not 0.0 <= t <= 1.0:
        raise UsageError(f"time {t} outside [0, 1]")
    pose = Pose.planar(*config["pose"])
    scan = field.render_scan(pose, t, geom)
    values = scan.values
    extra = {}
    ref = None
    if paths.get("seq") is not None and config.get("frame") is not None:
        ref = _read_bundle(paths["seq"]).scans[int(config["frame"])]
        if ref.geometry != geom:
            raise UsageError("render geometry differs from the reference sequence")
        extra["psnr"] = psnr(scan, ref)
    if ref is not None:
        img, _ = joint_normalize(values, ref)
    else:
        lo, hi = float(values.min()), float(values.max())
        img = (values - lo) / (hi - lo) if hi > lo else np.full_like(values, 0.5)
    _atomic_bytes(out / "render.f32", np.ascontiguousarray(values, dtype="<f4").tobytes())
    write_pgm16(out / "render.pgm", img)
    write_pgm16(out / "render_cart.pgm", polar_to_cartesian(img, geom, float(config["cell"])))
    extra["shape"] = list(values.shape)
    return ["render.f32", "render.pgm", "render_cart.pgm"], extra


def _write_report(out: Path, report: dict) -> None:
    _atomic_text(out / "metrics.json", json.dumps(report, indent=1) + "\n")


def run_eval(config: dict, paths: dict):
    out = Path(paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    field, _ = _load_ckpt(paths["ckpt"])
    bundle = _read_bundle(paths["seq"])
    frames = list(config["holdout"])
    report = evaluate_field(field, bundle, frames, _gt_points(paths["seq"], frames), float(config["cell"]), float(config["threshold"]))
    _write_report(out, report)
    return ["metrics.json"], {"mean": report["mean"]}


def run_cfar(config: dict, paths: dict):
    out = Path(paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    bundle = _read_bundle(paths["seq"])
    frames = list(config["holdout"]) if config.get("holdout") is not None else list(range(len(bundle)))
    report, dets = evaluate_cfar(bundle, frames, _gt_points(paths["seq"], frames), CfarConfig(**config["cfar"]))
    outputs = []
    for k, det in dets.items():
        name = f"cfar_{k}.csv"
        _write_points(out / name, det.points)
        outputs.append(name)
    _write_report(out, report)
    return outputs + ["metrics.json"], {"mean": report["mean"]}


RUNNERS = {"synth": run_synth, "train": run_train, "render": run_render, "eval": run_eval, "cfar": run_cfar}


# ---------------------------------------------------------------------------
# config resolution from argparse namespaces


def _abs(p):
    return None if p is None else str(Path(p).resolve())


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n} is required for '{args.command}'")


def resolve_synth(args):
    _require(args, "scene", "out")
    scene_path = Path(args.scene)
    if not scene_path.is_file():
        raise FileNotFoundError(f"scene file not found: {scene_path}")
    scene = load_scene(scene_path)
    raw = json.loads(scene_path.read_text())
    config = {
        "scene": scene.to_dict(),
        "geometry": _merge(DEFAULT_GEOMETRY, raw.get("geometry")),
        "ego": raw.get("ego", [[0.0, 0.0, 0.0]]),
        "frames": 20,
        "seed": 0,
        "gt_samples": 64,
    }
    config = _merge(config, _load_config(args.config))
    if args.frames is not None:
        config["frames"] = args.frames
    if args.seed is not None:
        config["seed"] = args.seed
    if int(config["frames"]) < 2:
        raise UsageError(f"a sequence needs at least 2 frames, got {config['frames']}")
    return config, {"scene": _abs(args.scene), "out": _abs(args.out)}


def resolve_train(args):
    _require(args, "seq", "out")
    config = {"field": FieldConfig().to_dict(), "train": TrainConfig().to_dict(), "holdout": [], "resume": False}
    config = _merge(config, _load_config(args.config))
    tr = config["train"]
    if args.iters is not None:
        tr["iterations"] = args.iters
    if args.seed is not None:
        tr["seed"] = args.seed
        config["field"]["seed"] = args.seed
    for flag, key in (("lambda_oc", "lambda_oc"), ("lambda_p", "lambda_p"), ("lambda_m", "lambda_m")):
        if getattr(args, flag) is not None:
            tr[key] = getattr(args, flag)
    if args.holdout is not None:
        config["holdout"] = _parse_int_list(args.holdout)
    if args.resume:
        config["resume"] = True
    # validate early so bad values exit as usage errors
    FieldConfig.from_dict(config["field"])
    TrainConfig.from_dict(tr)
    return config, {"seq": _abs(args.seq), "out": _abs(args.out)}


def _parse_pose(text: str, bundle: SequenceBundle | None):
    if text.startswith("frame:"):
        if bundle is None:
            raise UsageError("--pose frame:K needs --seq")
        k = int(text.split(":", 1)[1])
        if not 0 <= k < len(bundle):
            raise IndexError(f"frame {k} out of range for a {len(bundle)}-frame sequence")
        p = bundle.poses[k]
        yaw = math.atan2(p.rotation[1, 0], p.rotation[0, 0])
        return [float(p.translation[0]), float(p.translation[1]), yaw], k
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"--pose expects 'x,y,yaw' or 'frame:K', got {text!r}") from exc
    if len(vals) != 3:
        raise UsageError(f"--pose expects 'x,y,yaw' or 'frame:K', got {text!r}")
    return vals, None


def resolve_render(args):
    _require(args, "ckpt", "out", "pose")
    _, meta = _load_ckpt(args.ckpt)
    bundle = _read_bundle(args.seq) if args.seq is not None else None
    pose, frame = _parse_pose(args.pose, bundle)
    t = args.time
    if t is None:
        if frame is None:
            raise UsageError("--time is required unless --pose names a frame")
        t = float(bundle.timestamps[frame])
    geometry = meta.get("geometry") or (bundle.geometry.to_dict() if bundle is not None else DEFAULT_GEOMETRY)
    config = {"geometry": geometry, "pose": pose, "time": float(t), "frame": frame, "cell": 0.5}
    config = _merge(config, _load_config(args.config))
    return config, {"ckpt": _abs(args.ckpt), "seq": _abs(args.seq), "out": _abs(args.out)}


def resolve_eval(args):
    _require(args, "ckpt", "seq", "out")
    config = {"holdout": DEFAULT_HOLDOUT, "cell": 0.5, "threshold": 0.5}
    config = _merge(config, _load_config(args.config))
    if args.holdout is not None:
        config["holdout"] = _parse_int_list(args.holdout)
    return config, {"ckpt": _abs(args.ckpt), "seq": _abs(args.seq), "out": _abs(args.out)}


def resolve_cfar(args):
    _require(args, "seq", "out")
    c = CfarConfig()
    config = {"cfar": {"training": c.training, "guard": c.guard, "offset_db": c.offset_db}, "holdout": None}
    config = _merge(config, _load_config(args.config))
    if args.holdout is not None:
        config["holdout"] = _parse_int_list(args.holdout)
    CfarConfig(**config["cfar"])
    return config, {"seq": _abs(args.seq), "out": _abs(args.out)}


RESOLVERS = {"synth": resolve_synth, "train": resolve_train, "render": resolve_render, "eval": resolve_eval, "cfar": resolve_cfar}


def _seeds(command: str, config: dict) -> dict:
    if command == "synth":
        return {"synth": config["seed"]}
    if command == "train":
        return {"train": config["train"]["seed"], "field": config["field"]["seed"]}
    return {}


def execute(command: str, config: dict, paths: dict, argv: list[str] | None = None) -> dict:
    """Run one command and write its manifest; returns the manifest dict."""
    out = Path(paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    outputs, extra = RUNNERS[command](config, paths)
    manifest = {
        "command": command,
        "version": __version__,
        "argv": argv,
        "config": config,
        "seeds": _seeds(command, config),
        "paths": paths,
        "outputs": outputs,
        "results": extra,
        "duration_s": time.perf_counter() - t0,
    }
    _atomic_text(out / MANIFEST_NAME, json.dumps(manifest, indent=1) + "\n")
    return manifest


def replay(manifest_path, out=None) -> dict:
    """Re-run the command recorded in a manifest, optionally into another directory."""
    p = Path(manifest_path)
    if not p.is_file():
        raise FileNotFoundError(f"manifest not found: {p}")
    m = json.loads(p.read_text())
    if m.get("command") not in RUNNERS:
        raise UsageError(f"{p}: unknown command {m.get('command')!r}")
    paths = dict(m["paths"])
    if out is not None:
        paths["out"] = _abs(out)
    return execute(m["command"], m["config"], paths, m.get("argv"))


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rf4d", description="Neural radar fields for dynamic scenes.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, *flags):
        table = {
            "scene": dict(help="scene JSON file"),
            "seq": dict(help="sequence directory"),
            "ckpt": dict(help="checkpoint directory (a train --out dir also works)"),
            "frames": dict(type=int, help="number of frames"),
            "seed": dict(type=int, help="RNG seed"),
            "iters": dict(type=int, help="training iterations"),
            "lambda-oc": dict(type=float, help="occupancy-consistency weight"),
            "lambda-p": dict(type=float, help="occupancy-penalty weight"),
            "lambda-m": dict(type=float, help="flow-magnitude weight"),
            "holdout": dict(help="comma-separated frame indices"),
            "pose": dict(help="'x,y,yaw' (metres, radians) or 'frame:K' with --seq"),
            "time": dict(type=float, help="normalised time in [0, 1]"),
        }
        for f in flags:
            p.add_argument(f"--{f}", **table[f])
        p.add_argument("--out", help="output directory")
        p.add_argument("--config", help="JSON file overriding defaults")

    common(sub.add_parser("synth", help="simulate a sequence from a scene file"), "scene", "frames", "seed")
    tp = sub.add_parser("train", help="fit a field to a sequence")
    common(tp, "seq", "iters", "seed", "lambda-oc", "lambda-p", "lambda-m", "holdout")
    tp.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint")
    common(sub.add_parser("render", help="render a scan from a checkpoint"), "ckpt", "seq", "pose", "time")
    common(sub.add_parser("eval", help="score held-out frames"), "ckpt", "seq", "holdout")
    common(sub.add_parser("cfar", help="CA-CFAR baseline on a sequence"), "seq", "holdout")
    rp = sub.add_parser("replay", help="re-run a command from its manifest.json")
    rp.add_argument("manifest")
    rp.add_argument("--out", help="write outputs here instead of the recorded directory")
    return ap


INPUT_ERRORS = (UsageError, SequenceFormatError, SceneFormatError, FileNotFoundError, IndexError, KeyError, ValueError)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            replay(args.manifest, args.out)
        else:
            config, paths = RESOLVERS[args.command](args)
            execute(args.command, config, paths, argv)
    except FloatingPointError as exc:
        print(f"rf4d: numeric failure: {exc}", file=sys.stderr)
        return 1
    except INPUT_ERRORS as exc:
        print(f"rf4d: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"rf4d: internal error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
