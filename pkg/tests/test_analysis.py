import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from invarilab import nn
from invarilab.analysis import (ActivationMatrix, ActiveSet, ablate_evaluate, active_stats, collect_activations,
                                compute_thresholds, invariance_coefficients, invariance_report, invariance_values,
                                penultimate_layer, resolve_layers, search_tau, select_tau, spearman, tau_grid)
from invarilab.data import partition_categories
from invarilab.errors import ConfigError, InputError
from invarilab.paradigm import prepare_inputs
from invarilab.transforms import TransformKind, TransformSpec

from oracles import active_stats_loop, invariance_loop, select_tau_walk, thresholds_loop

# invariance of the seed-14 10x20 matrices at tau = 0.2 (unit 3 silent), computed by the loop oracle
INV_FROZEN = [0.6752633872159761, 0.5627924097934592, 0.5904019663856298, None, 0.6228922530965136,
              0.49667924114190143, 0.5522226249288191, 0.7085415755587483, 0.6492181651437567, 0.6166769017309723]
COUNT_FROZEN = [20, 19, 19, 0, 19, 20, 20, 17, 18, 20]


def mats(o, t, layer="fc1"):
    idx = np.arange(o.shape[1])
    return ActivationMatrix(layer, np.asarray(o, float), idx), ActivationMatrix(layer, np.asarray(t, float), idx)


nonneg = st.integers(1, 12).flatmap(lambda u: st.integers(1, 15).flatmap(
    lambda m: st.tuples(arrays(np.float64, (u, m), elements=st.floats(0, 10)),
                        arrays(np.float64, (u, m), elements=st.floats(0, 10)))))


# --- thresholds -------------------------------------------------------------------------------

def test_tau_grid():
    g = tau_grid()
    assert len(g) == 21 and g[0] == 0 and g[-1] == 1 and g[1] == 0.05


def test_tau_one_keeps_argmax_only():
    o = np.array([[1.0, 3.0, 2.0], [0.5, 0.1, 0.2]])
    t = np.array([[0.0, 1.0, 3.0], [0.3, 0.9, 0.0]])
    th, active = compute_thresholds(*mats(o, t), 1.0)
    np.testing.assert_array_equal(th.thresholds, [3.0, 0.9])
    assert active.members(0) == {1, 2}
    assert active.members(1) == {1}


def test_all_zero_unit_is_empty_and_absent():
    o = np.array([[0.0, 0.0], [1.0, 2.0]])
    _, active = compute_thresholds(*mats(o, o), 0.0)
    assert active.members(0) == set()
    recs = invariance_coefficients(*mats(o, o), active)
    assert recs[0].invariance is None and recs[0].active_count == 0
    assert recs[1].invariance == 1.0


def test_thresholds_random_6x8_against_oracle():
    rng = np.random.default_rng(6)
    o, t = rng.random((6, 8)), rng.random((6, 8))
    o[o < 0.3] = 0
    th, active = compute_thresholds(*mats(o, t), 0.3)
    ref_th, ref_active = thresholds_loop(o, t, 0.3)
    np.testing.assert_allclose(th.thresholds, ref_th, rtol=0, atol=1e-12)
    assert [active.members(i) for i in range(6)] == ref_active


@given(nonneg, st.sampled_from(list(tau_grid())))
@settings(max_examples=80)
def test_thresholds_and_invariance_match_loops(pair, tau):
    o, t = pair
    th, active = compute_thresholds(*mats(o, t), float(tau))
    ref_th, ref_active = thresholds_loop(o, t, float(tau))
    assert np.abs(th.thresholds - ref_th).max(initial=0) <= 1e-12
    assert [active.members(i) for i in range(o.shape[0])] == ref_active
    for rec, (inv, count) in zip(invariance_coefficients(*mats(o, t), active), invariance_loop(o, t, ref_active)):
        assert rec.active_count == count
        if inv is None:
            assert rec.invariance is None
        else:
            assert abs(rec.invariance - inv) <= 1e-12
            assert 0.0 <= rec.invariance <= 1.0


def test_thresholds_reject_misaligned():
    with pytest.raises(InputError):
        compute_thresholds(*mats(np.zeros((2, 3)), np.zeros((2, 3))[:, :2]), 0.5)
    a = ActivationMatrix("x", np.zeros((2, 3)), np.arange(3))
    b = ActivationMatrix("x", np.zeros((2, 3)), np.array([0, 1, 5]))
    with pytest.raises(InputError):
        compute_thresholds(a, b, 0.5)
    with pytest.raises(InputError):
        compute_thresholds(a, a, 1.5)


# --- active statistics ------------------------------------------------------------------------

def test_active_stats_point_mass_at_tau_zero():
    o = np.random.default_rng(0).uniform(0.1, 1, (5, 7))
    _, active = compute_thresholds(*mats(o, o), 0.0)
    st_ = active_stats(active)
    assert np.all(st_.images_per_unit == 1.0) and np.all(st_.units_per_image == 1.0)


def test_active_stats_counting_oracle():
    mask = np.random.default_rng(2).random((9, 13)) < 0.3
    mask[4] = False
    stats = active_stats(ActiveSet(mask))
    ref_unit, ref_image = active_stats_loop([set(np.flatnonzero(r)) for r in mask], 13)
    np.testing.assert_allclose(stats.images_per_unit, ref_unit)
    np.testing.assert_allclose(stats.units_per_image, ref_image)
    assert 4 not in stats.unit_ids.tolist()


# --- invariance coefficients ------------------------------------------------------------------

def test_identical_rows_give_one_and_total_loss_gives_zero():
    o = np.array([[1.0, 2.0, 0.5]])
    _, active = compute_thresholds(*mats(o, o), 0.2)
    assert invariance_coefficients(*mats(o, o), active)[0].invariance == 1.0
    t = np.zeros_like(o)
    _, active = compute_thresholds(*mats(o, t), 0.2)
    assert invariance_coefficients(*mats(o, t), active)[0].invariance == 0.0


def test_invariance_random_10x20_frozen():
    rng = np.random.default_rng(14)
    o, t = rng.random((10, 20)), rng.random((10, 20))
    o[3] = 0
    t[3] = 0
    _, active = compute_thresholds(*mats(o, t), 0.2)
    recs = invariance_coefficients(*mats(o, t), active)
    for rec, ref, count in zip(recs, INV_FROZEN, COUNT_FROZEN):
        assert rec.active_count == count
        assert (rec.invariance is None) == (ref is None)
        if ref is not None:
            assert abs(rec.invariance - ref) <= 1e-12


def test_zero_denominator_counts_as_invariant():
    o = np.array([[0.0, 2.0]])
    t = np.array([[0.0, 2.0]])
    # force image 0 into the active set: a zero threshold with an explicit mask
    inv, counts = invariance_values(*mats(o, t), ActiveSet(np.array([[True, True]])))
    assert inv[0] == 1.0 and counts[0] == 2


def test_negative_activation_rejected():
    o = np.array([[1.0, -0.1]])
    with pytest.raises(InputError):
        invariance_values(*mats(o, np.abs(o)), ActiveSet(np.ones((1, 2), bool)))


# --- model-level operations -------------------------------------------------------------------

def test_collect_activations_columns_match_forward_collect(tiny_run):
    cfg, data, model, _ = tiny_run
    x = prepare_inputs(data.test)[:7]
    acts = collect_activations(model, x, batch_size=3)
    assert list(acts) == ["conv1", "conv2", "fc1"]
    for name, mat in acts.items():
        assert mat.values.shape[1] == 7 and (mat.values >= 0).all()
        for j in (0, 4, 6):
            ref = nn.forward_collect(model, x[j]).hidden[name].ravel()
            # batched and single-image GEMMs may round differently in the last float32 bit
            np.testing.assert_allclose(mat.values[:, j], ref, rtol=1e-6, atol=1e-7)
    assert acts["fc1"].unit_count == 64
    assert acts["conv1"].unit_count == 8 * 24 * 24


def test_layer_selection(tiny_run):
    model = tiny_run[2]
    assert penultimate_layer(model) == "fc1"
    assert resolve_layers(model, "penultimate") == ["fc1"]
    assert resolve_layers(model, [0, "fc1"]) == ["conv1", "fc1"]
    with pytest.raises(ConfigError):
        resolve_layers(model, [5])
    with pytest.raises(ConfigError):
        resolve_layers(model, ["conv9"])


def test_ablation_contracts_at_tau_zero(tiny_run):
    cfg, data, model, _ = tiny_run
    x = prepare_inputs(data.test)
    y = data.test.labels
    acts = collect_activations(model, x)
    th = {n: compute_thresholds(a, a, 0.0)[0].thresholds for n, a in acts.items()}
    base = 100.0 * np.mean(model.predict(x) == y)
    assert ablate_evaluate(model, x, y, th, "inactive") == base
    # every hidden unit is at or above a zero threshold, so active ablation leaves only the output bias
    m = model.copy()
    m.params["8.bias"][:] = np.array([0.0, 0.3, 0.1, -0.2], dtype=np.float32)
    assert ablate_evaluate(m, x, y, th, "active") == pytest.approx(100.0 * np.mean(y == 1))


def test_ablation_mode_validation(tiny_run):
    model = tiny_run[2]
    with pytest.raises(ConfigError):
        ablate_evaluate(model, np.zeros((1, 3, 24, 24), np.float32), [0], {}, "both")


@pytest.mark.parametrize("trace,base,expected", [
    ([(0.0, 90.0), (0.05, 89.5), (0.1, 89.0), (0.15, 88.9), (0.2, 70.0)], 90.0, 0.1),
    ([(0.0, 90.0), (0.05, 80.0), (0.1, 89.5)], 90.0, 0.1),
    ([(t, 50.0) for t in tau_grid()], 50.0, 1.0),
    ([(0.0, 50.0), (0.5, 10.0)], 50.0, 0.0),
])
def test_select_tau_scripted(trace, base, expected):
    tau, warn = select_tau(trace, base)
    assert tau == expected == select_tau_walk(trace, base)
    assert not warn


def test_select_tau_warns_when_nothing_qualifies():
    assert select_tau([(0.0, 40.0), (0.5, 30.0)], 50.0) == (0.0, True)


@given(st.lists(st.floats(0, 100), min_size=21, max_size=21), st.floats(0, 100))
def test_select_tau_matches_walk(accs, base):
    trace = list(zip(tau_grid().tolist(), accs))
    tau, _ = select_tau(trace, base)
    assert tau == select_tau_walk(trace, base)


def test_search_tau_soundness(tiny_run):
    cfg, data, model, _ = tiny_run
    spec = cfg.transform_spec
    x, tx = prepare_inputs(data.test), prepare_inputs(data.test, spec, cfg.seed)
    res = search_tau(model, x, tx, data.test.labels)
    assert [t for t, _, _ in res.trace] == tau_grid().tolist()
    inactive, active = res.at(res.tau)
    assert res.base_top1 - inactive <= 1.0
    assert res.at(0.0)[0] == res.base_top1
    assert all(res.base_top1 - a > 1.0 for t, a, _ in res.trace if t > res.tau)


def test_invariance_report_identity_all_ones(tiny_run):
    cfg, data, model, _ = tiny_run
    spec = TransformSpec(TransformKind.IDENTITY)
    rep = invariance_report(model, data.test, spec, data.partition, 0.1)
    assert set(rep.results) == {(n, p) for n in ("conv1", "conv2", "fc1") for p in ("all", "seen", "unseen")}
    for res in rep.results.values():
        assert np.all(res.present == 1.0)
    assert rep.mean("fc1", "seen") == 1.0
    assert "network" in rep.active


def test_invariance_report_full_seen_has_no_unseen(tiny_run):
    cfg, data, model, _ = tiny_run
    full = partition_categories(4, 4, seed=0)
    rep = invariance_report(model, data.test, cfg.transform_spec, full, 0.1, layers="penultimate")
    assert set(rep.results) == {("fc1", "all"), ("fc1", "seen")}
    assert rep.mean("fc1", "unseen") is None
    s = rep.results[("fc1", "all")].summary()
    vals = rep.results[("fc1", "all")].present
    assert s["mean"] == pytest.approx(vals.mean())
    assert s["stderr"] == pytest.approx(vals.std(ddof=1) / np.sqrt(len(vals)))


def test_spearman():
    assert spearman([1, 2, 3, 4], [10, 20, 25, 40]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_spearman_constant_input_is_nan():
    assert np.isnan(spearman([1, 3, 5], [0.0, 0.0, 0.0]))
