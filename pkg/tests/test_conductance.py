import math

import numpy as np
import pytest

from conductor.conductance import (
    INPUT,
    AttributionScheme,
    ConductanceError,
    PathSpec,
    attribute_dataset,
    conductance,
    filter_pairs,
    fsum_mean,
    ig_input,
    integrate_path,
    nig_attribute,
    oracle_nig,
    path_point,
    site_keys,
)
from conductor.data import NON_RELEVANT, RELEVANT


def test_pathspec_validation():
    with pytest.raises(ConductanceError):
        PathSpec(0)
    with pytest.raises(ConductanceError):
        PathSpec(10, "simpson")
    assert PathSpec().as_dict() == {"N": 100, "quadrature": "riemann_trapezoid"}


def test_path_point_endpoints_and_batch():
    x, xb = np.ones((2, 3)), np.zeros((2, 3))
    assert np.array_equal(path_point(x, xb, 0.0), xb)
    assert np.array_equal(path_point(x, xb, 1.0), x)
    assert path_point(x, xb, np.array([0.0, 0.5, 1.0])).shape == (3, 2, 3)
    with pytest.raises(ConductanceError):
        path_point(x, np.zeros((3, 2)), 0.5)


def _quadratic(ops, e):
    # f = sum_j (e W)_j^2 for a linear layer, output shape [..., 1]
    h = ops.mark("h", ops.matmul(e, ops.const(np.array([[1.0], [2.0], [-1.0]]))))
    return ops.mul(h, h)


def test_linear_surrogate_exact_at_one_step():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 2))
    fn = lambda ops, e: ops.matmul(e, ops.const(w))
    x, xb = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    for q in ("riemann_trapezoid", "riemann_left"):
        res = integrate_path(fn, x, xb, 1, [INPUT], PathSpec(1, q))
        assert abs(math.fsum(res.values[INPUT].ravel()) - res.delta_f) <= 1e-12
        np.testing.assert_allclose(res.values[INPUT][0], (x - xb)[0] * w[:, 1], rtol=1e-14)


def test_quadrature_rules_on_quadratic():
    # along the path h(t) = t*c, f = h^2, so df/dh = 2h; exact conductance of h is c^2
    x, xb = np.array([[1.0, 0.5, 2.0]]), np.zeros((1, 3))
    c = float((x @ np.array([1.0, 2.0, -1.0]))[0])
    for n in (1, 2, 7):
        trap = integrate_path(_quadratic, x, xb, 0, ["h"], PathSpec(n, "riemann_trapezoid"))
        assert trap.values["h"].sum() == pytest.approx(c * c, rel=1e-14)
        left = integrate_path(_quadratic, x, xb, 0, ["h"], PathSpec(n, "riemann_left"))
        # left rule: sum_k 2 (k/n) c * c/n = c^2 (n-1)/n
        assert left.values["h"].sum() == pytest.approx(c * c * (n - 1) / n, rel=1e-14)


def test_batching_does_not_change_result(random_model, toy_pairs):
    p = toy_pairs[0].pair
    a = conductance(random_model, p, "all_pad", RELEVANT, PathSpec(37), site_keys(random_model.config), batch_size=5)
    b = conductance(random_model, p, "all_pad", RELEVANT, PathSpec(37), site_keys(random_model.config), batch_size=256)
    for k in a.values:
        np.testing.assert_allclose(a.values[k], b.values[k], rtol=1e-12, atol=1e-15)


def test_pair_attribution_bookkeeping(trained_model, toy_pairs):
    p = toy_pairs[1].pair
    att = nig_attribute(trained_model, p, "all_pad", RELEVANT, PathSpec(64))
    v = att.token_summed()
    assert v.shape == (trained_model.config.num_neurons,)
    rec = att.records
    assert len(rec) == v.size and rec[5].total == pytest.approx(v[5])
    ig = ig_input(trained_model, p, "all_pad", RELEVANT, PathSpec(512))
    assert ig.residual <= 1e-3 * abs(ig.f_input - ig.f_baseline) + 1e-6
    assert att.f_input == pytest.approx(ig.f_input) and att.f_baseline == pytest.approx(ig.f_baseline)


def test_prob_target_and_label_index(random_model, toy_pairs):
    p = toy_pairs[0].pair
    a = nig_attribute(random_model, p, "all_pad", 0, PathSpec(4), target="prob")
    b = nig_attribute(random_model, p, "all_pad", RELEVANT, PathSpec(4), target="prob")
    assert np.array_equal(a.token_summed(), b.token_summed())
    assert 0 <= a.f_input <= 1
    with pytest.raises(ConductanceError):
        nig_attribute(random_model, p, "all_pad", "maybe", PathSpec(4))
    with pytest.raises(ConductanceError):
        nig_attribute(random_model, p, "all_pad", RELEVANT, PathSpec(4), target="loss")


def test_oracle_needs_dense_steps(random_model, toy_pairs):
    with pytest.raises(ConductanceError):
        oracle_nig(random_model, toy_pairs[0].pair, "all_pad", RELEVANT, dense_steps=500)


def test_fsum_mean_order_independent():
    rng = np.random.default_rng(0)
    rows = [rng.normal(size=5) * 10.0 ** rng.integers(-8, 8) for _ in range(20)]
    a = fsum_mean(rows)
    b = fsum_mean(rows[::-1])
    assert np.array_equal(a, b)


def test_filter_and_attribute_dataset(trained_model, toy_pairs):
    pairs = toy_pairs[:63]
    inc, exc = filter_pairs(trained_model, pairs, RELEVANT)
    assert all(p.label == RELEVANT for p in inc)
    assert len(inc) + sum(exc.values()) == len(pairs)
    s = attribute_dataset(trained_model, pairs, NON_RELEVANT, "all_pad", PathSpec(8), max_pairs=4)
    assert s.n_samples == 4 and s.excluded["over_limit"] >= 0
    rows = [nig_attribute(trained_model, p.pair, "all_pad", NON_RELEVANT, PathSpec(8)).token_summed()
            for p in filter_pairs(trained_model, pairs, NON_RELEVANT)[0][:4]]
    np.testing.assert_allclose(s.values, np.mean(rows, axis=0), rtol=1e-12, atol=1e-15)
    par = attribute_dataset(trained_model, pairs, NON_RELEVANT, "all_pad", PathSpec(8), max_pairs=4, workers=2)
    assert np.array_equal(par.values, s.values)
    back = AttributionScheme.from_json(s.to_json())
    assert np.array_equal(back.values, s.values) and back.excluded == s.excluded
    with pytest.raises(ConductanceError):
        attribute_dataset(trained_model, [p for p in pairs if p.label == RELEVANT], NON_RELEVANT, "all_pad")


def test_zero_path_gives_zero_attribution(random_model):
    from conductor.data import PAD_ID, TokenizedPair

    pad_pair = TokenizedPair.build([PAD_ID] * 3, [PAD_ID] * 4)
    att = nig_attribute(random_model, pad_pair, "all_pad", RELEVANT, PathSpec(5))
    assert np.all(att.token_summed() == 0.0)
    ig = ig_input(random_model, pad_pair, "all_pad", RELEVANT, PathSpec(5))
    assert np.all(ig.attributions == 0.0) and ig.residual == 0.0


def test_path_point_scales_linearly():
    rng = np.random.default_rng(1)
    x, xb = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    for t in (0.0, 0.3, 1.0):
        np.testing.assert_allclose(path_point(3.0 * x, 3.0 * xb, t), 3.0 * path_point(x, xb, t), rtol=1e-14)
    assert path_point(np.array(2.0), np.array(0.0), 0.5) == 1.0


def test_dense_integrator_exact_on_linear_surrogate():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(3, 1))
    fn = lambda ops, e: ops.matmul(e, ops.const(w))
    x, xb = rng.normal(size=(1, 3)), np.zeros((1, 3))
    dense = integrate_path(fn, x, xb, 0, [INPUT], PathSpec(10000)).values[INPUT]
    np.testing.assert_allclose(dense[0], x[0] * w[:, 0], rtol=1e-12)


def test_attribution_is_deterministic(random_model, toy_pairs):
    p = toy_pairs[3].pair
    a = nig_attribute(random_model, p, "all_pad", RELEVANT, PathSpec(16)).token_summed()
    b = nig_attribute(random_model, p, "all_pad", RELEVANT, PathSpec(16)).token_summed()
    assert np.array_equal(a, b)


def test_scheme_mean_properties(trained_model, toy_pairs):
    inc, _ = filter_pairs(trained_model, toy_pairs, RELEVANT)
    inc = inc[:4]
    path = PathSpec(8)
    one = attribute_dataset(trained_model, inc[:1], RELEVANT, "all_pad", path)
    single = nig_attribute(trained_model, inc[0].pair, "all_pad", RELEVANT, path).token_summed()
    assert np.array_equal(one.values, single)
    full = attribute_dataset(trained_model, inc, RELEVANT, "all_pad", path)
    doubled = attribute_dataset(trained_model, inc + inc, RELEVANT, "all_pad", path)
    assert np.array_equal(full.values, doubled.values)
    a = attribute_dataset(trained_model, inc[:2], RELEVANT, "all_pad", path)
    b = attribute_dataset(trained_model, inc[2:], RELEVANT, "all_pad", path)
    np.testing.assert_allclose(full.values, (a.values + b.values) / 2, rtol=1e-12, atol=1e-15)


@pytest.mark.slow
def test_oracle_self_convergence_and_error_decay(trained_model, toy_pairs):
    # a non-relevant pair; measured worst case among the toy pairs
    p = toy_pairs[2].pair
    ref = oracle_nig(trained_model, p, "all_pad", NON_RELEVANT, dense_steps=50_000).token_summed()
    ref2 = oracle_nig(trained_model, p, "all_pad", NON_RELEVANT, dense_steps=100_000).token_summed()
    keep = np.abs(ref2) >= 1e-3
    assert np.max(np.abs(ref - ref2)[keep] / np.abs(ref2)[keep]) <= 1e-3
    med = {}
    for n in (100, 1000):
        v = nig_attribute(trained_model, p, "all_pad", NON_RELEVANT, PathSpec(n)).token_summed()
        med[n] = np.median(np.abs(v - ref2)[keep] / np.abs(ref2)[keep])
    assert med[100] <= 0.01
    # second-order rule: a tenfold step increase cuts the error about a hundredfold
    assert med[1000] <= med[100] / 50
