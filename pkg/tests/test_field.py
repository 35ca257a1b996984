import math

import numpy as np
import pytest

from rf4d import diffcore as ad
from rf4d.core import PolarGeometry, Pose
from rf4d.dataio import ScaleInfo
from rf4d.field import (
    FieldConfig,
    GumbelMode,
    HashGridConfig,
    RadarField,
    gumbel_noise,
    gumbel_sigmoid,
    gumbel_sigmoid_value,
    hash_encode,
    hash_index,
    render_power,
    render_scan,
    sh_encode,
    sh_encode_node,
    time_features,
)
from util import REL_TOL, central_diff, micro_field_config, randomize, rel_err


def encode(cfg, table, x, counter=None):
    tape = ad.Tape()
    return hash_encode(tape, tape.const(np.atleast_2d(x)), cfg, tape.const(table), counter).value


def test_hash_index_pinned():
    # (3*1 ^ 5*2654435761 ^ 7*805459861) mod 2^14, evaluated with Python integers
    assert hash_index([3, 5, 7], 2**14) == 1381


def test_hash_index_matches_python_ints():
    rng = np.random.default_rng(0)
    for c in rng.integers(0, 5000, size=(50, 3)):
        want = (int(c[0]) * 1 ^ int(c[1]) * 2654435761 ^ int(c[2]) * 805459861) % 2**16
        assert hash_index(c, 2**16) == want


def _single_level(res, table_size=2**14, features=2):
    return HashGridConfig(levels=1, table_size=table_size, features=features, base_resolution=res, growth=1.5)


def test_hash_vertex_returns_row():
    cfg = _single_level(4)
    table = np.random.default_rng(1).normal(size=(1, cfg.table_size, 2))
    # vertex (1, 2, 3) of a 4-cell grid over [-1, 1]: x = -1 + 2 v / 4
    v = np.array([1, 2, 3])
    out = encode(cfg, table, -1 + 2 * v / 4)
    assert np.allclose(out[0], table[0, hash_index(v, cfg.table_size)], atol=1e-15)


def test_hash_voxel_centre_mean():
    cfg = _single_level(4)
    table = np.random.default_rng(2).normal(size=(1, cfg.table_size, 2))
    corner = np.array([1, 2, 0])
    x = -1 + 2 * (corner + 0.5) / 4
    rows = [table[0, hash_index(corner + np.array([i, j, k]), cfg.table_size)] for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    assert np.allclose(encode(cfg, table, x)[0], np.mean(rows, axis=0), atol=1e-15)


def test_hash_odd_features_and_levels():
    cfg = HashGridConfig(levels=3, table_size=64, features=3, base_resolution=2, growth=2.0)
    rng = np.random.default_rng(3)
    table = rng.normal(size=(3, 64, 3))
    x = rng.uniform(-1, 1, size=(4, 3))
    out = encode(cfg, table, x)
    assert out.shape == (4, 9)
    # level-by-level reference with plain loops
    for n in range(4):
        for lvl, res in enumerate(cfg.resolutions()):
            p = (x[n] + 1) / 2 * res
            base = np.floor(p).astype(int)
            f = p - base
            acc = np.zeros(3)
            for corner in np.ndindex(2, 2, 2):
                c = np.array(corner)
                w = np.prod(np.where(c == 1, f, 1 - f))
                acc += w * table[lvl, hash_index(base + c, 64)]
            assert np.allclose(out[n, lvl * 3 : lvl * 3 + 3], acc, atol=1e-12)


def test_hash_clamp_counter():
    from rf4d.field import ClampCounter

    cfg = _single_level(4)
    table = np.zeros((1, cfg.table_size, 2))
    counter = ClampCounter()
    encode(cfg, table, [[0.2, 0.1, 0.0], [1.5, 0.0, 0.0], [0.0, -3.0, 0.0]], counter)
    assert counter.queries == 3 and counter.clamped == 2


def test_hash_touches_only_used_rows():
    cfg = _single_level(4, table_size=2**12)
    store = ad.ParamStore()
    store.add("t", np.random.default_rng(4).normal(size=(1, cfg.table_size, 2)))
    tape = ad.Tape(store)
    out = hash_encode(tape, tape.const([[0.1, 0.2, 0.3]]), cfg, tape.param("t"))
    tape.backward(ad.sum_all(out))
    assert np.count_nonzero(np.any(store.grads["t"][0] != 0, axis=1)) <= 8


def test_hash_position_gradient_per_axis():
    # x is clamped on the first point; y and z still move the features
    cfg = HashGridConfig(levels=2, table_size=32, features=2, base_resolution=2, growth=2.0)
    rng = np.random.default_rng(12)
    store = ad.ParamStore()
    store.add("x", [[1.3, 0.21, -0.37], [0.11, -0.52, 0.29]])
    store.add("tab", rng.normal(size=(2, 32, 2)))
    w = rng.normal(size=(2, 4))

    def run():
        tape = ad.Tape(store)
        return tape, ad.weighted_sum(hash_encode(tape, tape.param("x"), cfg, tape.param("tab")), w)

    tape, loss = run()
    tape.backward(loss)
    fd = central_diff(lambda: float(run()[1].value), store.params["x"])
    assert store.grads["x"][0, 0] == 0.0 and fd[0, 0] == 0.0
    assert np.max(rel_err(store.grads["x"], fd)) < REL_TOL
    assert np.all(store.grads["x"][0, 1:] != 0.0)


def test_time_features_examples():
    assert np.allclose(time_features(0.0, 2), [[0, 1, 0, 1]])
    assert np.allclose(time_features(0.5, 1), [[1, 0]], atol=1e-15)
    with pytest.raises(ValueError):
        time_features(1.2, 2)


def test_time_features_no_collisions():
    for k in (2, 6):
        feats = time_features(np.arange(0, 1.0005, 1e-3), k)
        d = np.linalg.norm(feats[:, None, :] - feats[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        assert d.min() > 1e-4


def test_sh_degree0_and_pole():
    assert np.allclose(sh_encode([[0.3, -0.4, math.sqrt(0.75)]], 0), [[0.28209479]])
    band1 = sh_encode([[0, 0, 1]], 1)[0, 1:]
    # closed form Y_1m at the pole: only the z term survives, sqrt(3 / (4 pi))
    assert np.allclose(band1, [0.0, math.sqrt(3 / (4 * math.pi)), 0.0], atol=1e-12)
    assert math.sqrt(3 / (4 * math.pi)) == pytest.approx(0.48860251, abs=1e-8)


def test_sh_parity_and_errors():
    d = np.array([[0.6, 0.0, 0.8]])
    assert np.array_equal(sh_encode(-d, 1)[0, 1:], -sh_encode(d, 1)[0, 1:])
    assert sh_encode([[1 + 5e-7, 0, 0]], 3).shape == (1, 16)
    with pytest.raises(ValueError):
        sh_encode([[1.1, 0, 0]], 1)


def test_sh_orthonormal():
    # Monte-Carlo check of orthonormality on the unit sphere
    rng = np.random.default_rng(5)
    d = rng.normal(size=(200000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    y = sh_encode(d, 3)
    gram = 4 * np.pi * (y.T @ y) / len(d)
    assert np.max(np.abs(gram - np.eye(16))) < 0.03


def test_sh_gradient():
    rng = np.random.default_rng(6)
    store = ad.ParamStore()
    d = rng.normal(size=(4, 3))
    store.add("d", d / np.linalg.norm(d, axis=1, keepdims=True))
    w = rng.normal(size=(4, 16))

    def run():
        tape = ad.Tape(store)
        return tape, ad.weighted_sum(sh_encode_node(tape, tape.param("d"), 3), w)

    tape, loss = run()
    tape.backward(loss)
    fd = central_diff(lambda: float(run()[1].value), store.params["d"])
    assert np.max(rel_err(store.grads["d"], fd)) < REL_TOL


def test_gumbel_deterministic_examples():
    assert gumbel_sigmoid_value(0.0, 0.7)[0] == 0.5
    assert gumbel_sigmoid_value(4.0, 0.5)[0] == pytest.approx(1 / (1 + math.exp(-8)), abs=1e-15)
    assert gumbel_sigmoid_value(4.0, 0.5)[0] == pytest.approx(0.99966, abs=1e-5)


def test_gumbel_monte_carlo():
    # g1 - g2 is standard logistic, so P(0.05 < a < 0.95) = tanh(tau * logit(0.95) / 2)
    tau = 0.1
    a = gumbel_sigmoid_value(np.zeros(100000), tau, stochastic=True, rng=np.random.default_rng(7))
    assert abs(a.mean() - 0.5) < 0.01
    mass = np.mean((a > 0.05) & (a < 0.95))
    want = math.tanh(tau * math.log(0.95 / 0.05) / 2)
    assert want == pytest.approx(0.146167, abs=1e-6)
    assert abs(mass - want) < 4 * math.sqrt(want * (1 - want) / len(a))
    # the mass shrinks towards zero as the temperature drops
    cold = gumbel_sigmoid_value(np.zeros(100000), 0.02, stochastic=True, rng=np.random.default_rng(8))
    assert np.mean((cold > 0.05) & (cold < 0.95)) < 0.05


def test_gumbel_noise_is_logistic():
    g = gumbel_noise(np.random.default_rng(9), 200000)
    assert abs(g.mean()) < 0.02
    assert g.var() == pytest.approx(math.pi**2 / 3, rel=0.02)


def test_gumbel_frozen_noise_gradient():
    rng = np.random.default_rng(10)
    store = ad.ParamStore()
    store.add("z", rng.normal(size=(6, 1)))
    noise = gumbel_noise(rng, (6, 1))

    def run():
        tape = ad.Tape(store)
        return tape, ad.weighted_sum(gumbel_sigmoid(tape, tape.param("z"), 0.6, True, noise=noise), np.arange(1.0, 7.0)[:, None])

    tape, loss = run()
    tape.backward(loss)
    fd = central_diff(lambda: float(run()[1].value), store.params["z"])
    assert np.max(rel_err(store.grads["z"], fd)) < REL_TOL


def test_render_power_examples():
    assert render_power(0.0, 3.0, 7.0) == 0.0
    assert render_power(1.0, 100.0, 10.0) == pytest.approx(0.0, abs=1e-15)
    assert render_power(0.5, 1e4, 10.0) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        render_power(0.5, 0.0, 1.0)
    with pytest.raises(ValueError):
        render_power(0.5, 1.0, -1.0)


def test_render_power_linear_and_monotone():
    a = np.linspace(0, 1, 11)
    p = render_power(a, 500.0, 3.0)
    assert np.allclose(p, a * p[-1])
    s = np.array([1.0, 10.0, 100.0])
    assert np.all(np.diff(render_power(0.7, s, 2.0)) > 0)


def _points(n, seed=11):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.9, 0.9, size=(n, 3))
    d = rng.normal(size=(n, 3))
    return x, rng.uniform(0, 1, n), d / np.linalg.norm(d, axis=1, keepdims=True)


def test_zero_init_outputs():
    f = RadarField(FieldConfig())
    x, t, d = _points(7)
    out = f.forward(ad.Tape(f.store), x, t, d, f.deterministic())
    assert np.array_equal(out.alpha.value, np.full((7, 1), 0.5))
    assert np.array_equal(out.sigma, np.ones((7, 1)))
    assert np.array_equal(out.flow.value, np.zeros((7, 6)))


def test_direction_only_changes_sigma():
    f = RadarField(micro_field_config())
    randomize(f.store, np.random.default_rng(12))
    x, t, d = _points(5)
    a = f.forward(ad.Tape(f.store), x, t, d, f.deterministic())
    b = f.forward(ad.Tape(f.store), x, t, -d, f.deterministic())
    assert np.array_equal(a.alpha.value, b.alpha.value)
    assert np.array_equal(a.flow.value, b.flow.value)
    assert not np.array_equal(a.log_sigma.value, b.log_sigma.value)


def test_output_ranges():
    f = RadarField(micro_field_config())
    randomize(f.store, np.random.default_rng(13), scale=1.0)
    x, t, d = _points(200)
    out = f.forward(ad.Tape(f.store), x, t, d, f.deterministic())
    assert np.all((out.alpha.value > 0) & (out.alpha.value < 1))
    assert np.all(out.sigma > 0) and np.all(np.isfinite(out.flow.value))
    # stochastic draws: a logistic tail over ~37 tau rounds the sigmoid to exactly 1.0 in float64
    noisy = f.forward(ad.Tape(f.store), x, t, d, GumbelMode(0.3, True, np.random.default_rng(0)))
    assert np.all((noisy.alpha.value >= 0) & (noisy.alpha.value <= 1))


def test_config_validation():
    with pytest.raises(ValueError):
        HashGridConfig(table_size=1000)
    with pytest.raises(ValueError):
        FieldConfig(sh_degree=4)
    with pytest.raises(ValueError):
        FieldConfig(chi_width=0)
    with pytest.raises(ValueError):
        FieldConfig(tau_final=0.0)
    cfg = FieldConfig()
    assert cfg.tau(0.0) == 1.0 and cfg.tau(1.0) == pytest.approx(0.3)
    assert FieldConfig.from_dict(cfg.to_dict()) == cfg


def test_warped_occupancy_boundaries_and_zero_flow():
    f = RadarField(micro_field_config())
    randomize(f.store, np.random.default_rng(14))
    x, _, d = _points(3)
    t = np.array([0.0, 0.5, 1.0])
    tape = ad.Tape(f.store)
    out = f.forward(tape, x, t, d, f.deterministic())
    zero = tape.const(np.zeros((3, 6)))
    ap, an, pp, pn = f.warped_occupancy(tape, x, t, zero, 0.25, f.deterministic())
    assert list(pp) == [False, True, True] and list(pn) == [True, True, False]
    # zero flow and the clamped time at a boundary reproduce the centre occupancy
    assert ap.value[0, 0] == out.alpha.value[0, 0] and an.value[2, 0] == out.alpha.value[2, 0]


def test_warp_outside_cube_counts_clamp():
    f = RadarField(micro_field_config())
    tape = ad.Tape(f.store)
    x = np.zeros((2, 3))
    flow = tape.const(np.array([[2.0, 0, 0, 0, 0, 0], [0, 0, 0, 0, 0, 0]]))
    before = f.clamps.clamped
    f.warped_occupancy(tape, x, np.array([0.5, 0.5]), flow, 0.1, f.deterministic())
    assert f.clamps.clamped == before + 1


def test_render_closed_gate_and_determinism():
    g = PolarGeometry(4, 8, 1.0, 2)
    f = RadarField(micro_field_config(), scale=ScaleInfo(1 / 12))
    randomize(f.store, np.random.default_rng(15))
    f.store.params["alpha.b1"][...] = -1e3
    assert np.all(render_scan(f, Pose.identity(), 0.3, g).values == 0.0)
    randomize(f.store, np.random.default_rng(16))
    a = render_scan(f, Pose.planar(1, 2, 0.3), 0.3, g).values
    b = render_scan(f, Pose.planar(1, 2, 0.3), 0.3, g).values
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        render_scan(f, Pose.identity(), 1.5, g)


def test_untrained_render_azimuth_uniform():
    # neutral init: alpha = 0.5, sigma = 1, so each bin is -log10(delta) and every beam is identical
    g = PolarGeometry(6, 8, 1.0, 2)
    v = render_scan(RadarField(FieldConfig()), Pose.identity(), 0.5, g).values
    assert np.allclose(v, -np.log10(g.ranges())[None, :].repeat(6, axis=0), atol=1e-12)


def test_render_node_matches_render_scan():
    g = PolarGeometry(4, 8, 1.0, 2)
    f = RadarField(micro_field_config(), scale=ScaleInfo(1 / 12, (0.5, 0.0, 0.0)))
    randomize(f.store, np.random.default_rng(17))
    pose = Pose.planar(0.5, -0.2, 0.4)
    node = f.render_node(ad.Tape(f.store), pose, 0.6, g)
    assert np.allclose(node.value.reshape(g.shape), render_scan(f, pose, 0.6, g).values, atol=1e-12)


def test_save_load_roundtrip(tmp_path):
    f = RadarField(micro_field_config(), scale=ScaleInfo(0.1, (1.0, 2.0, 0.0)))
    randomize(f.store, np.random.default_rng(18))
    f.save(tmp_path, {"iteration": 3})
    g, meta = RadarField.load(tmp_path)
    assert meta["iteration"] == 3 and g.scale == f.scale and g.cfg == f.cfg
    x, t, d = _points(4)
    a = f.forward(ad.Tape(f.store), x, t, d, f.deterministic())
    b = g.forward(ad.Tape(g.store), x, t, d, g.deterministic())
    assert np.array_equal(a.alpha.value, b.alpha.value)
