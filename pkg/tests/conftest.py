import time

import pytest

import util
from rf4d.core import PolarGeometry, Pose
from rf4d.dataio import SequenceBundle
from rf4d.field import FieldConfig
from rf4d.synth import Reflector, SceneSpec, ground_truth_bev, make_sequence
from rf4d.train import TrainConfig, train

STATIC_HOLDOUT = [3, 8, 13, 18]


def subset(bundle: SequenceBundle, holdout) -> SequenceBundle:
    keep = [k for k in range(len(bundle)) if k not in set(holdout)]
    return SequenceBundle(
        bundle.geometry, [bundle.scans[k] for k in keep], [bundle.poses[k] for k in keep], [bundle.timestamps[k] for k in keep]
    )


def static_scene() -> SceneSpec:
    return SceneSpec(
        [
            Reflector([(0.0, 12.0, 5.0)], 1.5, 2e4),
            Reflector([(0.0, -8.0, -15.0)], 2.0, 5e4),
        ]
    )


@pytest.fixture(scope="session")
def static_run():
    """Noiseless two-reflector static scene, 20 frames, 3000 iterations at the default config."""
    geom = PolarGeometry(64, 64, 0.5, 4)
    scene = static_scene()
    bundle = make_sequence(scene, [Pose.planar(-3.0, 0.0, 0.0), Pose.planar(3.0, 0.0, 0.2)], 20, geom, 0)
    t0 = time.perf_counter()
    field, history = train(subset(bundle, STATIC_HOLDOUT), FieldConfig(), TrainConfig(iterations=3000))
    runtime = time.perf_counter() - t0
    gt = {k: ground_truth_bev(scene, bundle.timestamps[k], 128) for k in range(len(bundle))}
    return {"field": field, "history": history, "bundle": bundle, "holdout": STATIC_HOLDOUT, "scene": scene, "gt": gt, "runtime": runtime}


def pytest_terminal_summary(terminalreporter):
    if not util.CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in util.CRITERIA:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))
