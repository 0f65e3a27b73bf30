import numpy as np
import pytest

from flowdict import classifier as clf
from flowdict.alignment import align
from flowdict.lasso import NumericalError, SolverConfig, assemble, solve
from flowdict.learn import (FixedPointError, LearnConfig, SingularActiveSetError, TrainState,
                            batch_gradients, grad_dictionary_adjoint, init_dictionary,
                            jacobian_entry, prepare_image, project_unit_fro, sgd_step, train)
from flowdict.tensor import Dictionary, Grid, TensorImage

import gradcheck as gc


@pytest.fixture(scope="module")
def screened_instances():
    out = []
    for seed in range(40):
        inst = gc.make_instance(seed)
        s = gc.screen(inst)
        if s is not None:
            out.append((inst, s))
        if len(out) == 6:
            break
    return out


def test_zero_cotangent(screened_instances):
    inst, (flow, aligned, code, _) = screened_instances[0]
    g = grad_dictionary_adjoint(inst.dictionary, flow, inst.x, code,
                                np.zeros(inst.dictionary.n_atoms), aligned=aligned)
    assert not np.any(g)


def test_adjoint_equals_jacobian_contraction(screened_instances):
    for inst, s in screened_instances:
        assert gc.rel_err(gc.adjoint_gradient(inst, s), gc.jacobian_contraction(inst, s)) < 1e-10


def test_adjoint_matches_finite_differences(screened_instances):
    for inst, s in screened_instances[:3]:
        num, stable = gc.finite_difference(inst, s)
        assert stable.mean() > 0.5
        assert gc.rel_err(gc.adjoint_gradient(inst, s)[stable], num[stable]) < 1e-4


def test_jacobian_unselected_subatom_is_zero(screened_instances):
    inst, (flow, _, code, _) = screened_instances[0]
    d = inst.dictionary
    for n in range(d.n_atoms):
        unused = np.setdiff1d(np.arange(d.grid.n_positions), flow.selected[n])
        if unused.size:
            jac = jacobian_entry(d, flow, inst.x, code, 0, n, int(unused[0]))
            assert not np.any(jac)
            return
    pytest.skip("every subatom selected in this instance")


def test_jacobian_two_atom_closed_form():
    rng = np.random.default_rng(7)
    grid = Grid(1, 1, 2)
    d1, d2 = rng.standard_normal((2, 4))
    d1 /= np.linalg.norm(d1)
    d2 /= np.linalg.norm(d2)
    x = 0.8 * d1 - 0.5 * d2 + 0.01 * rng.standard_normal(4)
    d = Dictionary(np.stack([d1, d2])[:, :, None], grid)
    xi = TensorImage(x[:, None], grid)
    flow, _ = align(d, xi, 1)
    code = solve(assemble(d, flow, xi), SolverConfig(lam=0.01))
    a1, a2 = code.alpha
    assert code.active_set.tolist() == [0, 1]
    g11, g12, g22 = d1 @ d1, d1 @ d2, d2 @ d2
    det = g11 * g22 - g12 * g12
    for m in range(4):
        # derivative w.r.t. entry m of atom 0: db = (x_m, 0), dG = [[2 d1_m, d2_m], [d2_m, 0]]
        r1 = x[m] - (2 * d1[m] * a1 + d2[m] * a2)
        r2 = -d2[m] * a1
        want = np.array([g22 * r1 - g12 * r2, -g12 * r1 + g11 * r2]) / det
        np.testing.assert_allclose(jacobian_entry(d, flow, xi, code, m, 0, 0), want,
                                   rtol=1e-9, atol=1e-12)


def test_jacobian_finite_difference_column(screened_instances):
    inst, (flow, _, code, _) = screened_instances[1]
    d = inst.dictionary
    m, n, p = 1, int(code.active_set[0]), 4
    h = 1e-5
    cols = []
    for step in (h, -h):
        data = d.data.copy()
        data[n, m, p] += step
        _, _, c2 = gc.code_for(Dictionary(data, d.grid), inst.x, inst.window, init=code.alpha)
        cols.append(c2.alpha[code.active_set])
    num = (cols[0] - cols[1]) / (2 * h)
    got = jacobian_entry(d, flow, inst.x, code, m, n, p)
    assert gc.rel_err(got, num) < 1e-4


def test_gradient_rejects_off_fixed_point(screened_instances):
    inst, (flow, aligned, code, galpha) = screened_instances[0]
    from flowdict.lasso import SparseCode
    bad = SparseCode.from_alpha(code.alpha * 1.1, code.lam)
    with pytest.raises(FixedPointError):
        grad_dictionary_adjoint(inst.dictionary, flow, inst.x, bad, galpha)


def test_gradient_rejects_singular_active_set():
    grid = Grid(1, 2, 1)
    # two identical atoms make the active Gram matrix singular
    data = np.array([[[0.6, 0.8]], [[0.6, 0.8]]])
    d = Dictionary(data, grid)
    x = TensorImage(np.array([[0.3, 0.4]]), grid)
    from flowdict.lasso import SparseCode
    flow, _ = align(d, x, 1)
    a = assemble(d, flow, x)
    # any split with equal signs is a lasso solution; take an even split
    lam = 0.01
    alpha = np.full(2, (0.5 - lam) / 2)
    code = SparseCode.from_alpha(alpha, lam)
    assert np.all(np.isfinite(a.gram))
    with pytest.raises(SingularActiveSetError):
        grad_dictionary_adjoint(d, flow, x, code, np.ones(2), aligned=a)


def test_flow_unchanged_by_tiny_perturbation():
    checked = 0
    for seed in range(30):
        inst = gc.make_instance(seed, rows=4, cols=4, window=3)
        if gc.flow_gaps(inst.dictionary, inst.x, inst.window).min() < 1e-6:
            continue
        base, _ = align(inst.dictionary, inst.x, inst.window)
        rng = np.random.default_rng(seed)
        data = inst.dictionary.data + 1e-9 * rng.standard_normal(inst.dictionary.data.shape)
        moved, _ = align(Dictionary(data, inst.dictionary.grid), inst.x, inst.window)
        np.testing.assert_array_equal(base.selected, moved.selected)
        checked += 1
    assert checked >= 10


# --------------------------------------------------------------------------
# projection

def test_projection_scaling_and_idempotence():
    grid = Grid(2, 2, 1)
    raw = np.zeros((2, 1, 4))
    raw[0, 0] = [2.0, 0.0, 0.0, 0.0]
    raw[1, 0] = [0.5, 0.5, 0.5, 0.5]
    d = project_unit_fro(Dictionary(raw, grid))
    np.testing.assert_array_equal(d.data[0, 0], [1.0, 0, 0, 0])
    np.testing.assert_allclose(project_unit_fro(d).data, d.data, rtol=0, atol=1e-15)


def test_projection_random_norms():
    rng = np.random.default_rng(0)
    d = project_unit_fro(Dictionary(rng.standard_normal((20, 9, 16)) * 7, Grid(4, 4, 3)))
    assert np.all(np.abs(d.norms() - 1) <= 1e-12)


def test_projection_zero_atom():
    with pytest.raises(NumericalError):
        project_unit_fro(Dictionary(np.zeros((1, 1, 4)), Grid(2, 2, 1)))


# --------------------------------------------------------------------------
# toy training problem

def templates():
    a = np.zeros((12, 12))
    a[2:10, 5:7] = 1.0          # vertical bar
    b = np.zeros((12, 12))
    b[5:7, 2:10] = 1.0          # horizontal bar
    b[3:5, 2:4] = 0.5
    return a, b


def toy_dataset(shifts=(-1, 0, 1)):
    # any two copies differ by at most 2 columns, inside a 5x5 search window
    images, labels = [], []
    for label, tpl in enumerate(templates()):
        for s in shifts:
            images.append(np.roll(tpl, s, axis=1))
            labels.append(label)
    return np.stack(images), np.array(labels)


TOY = LearnConfig(n_atoms=2, epochs=3, batch_size=4, patch_size=3, window_side=5,
                  rho0=0.01, seed=0)


def test_toy_training_reaches_full_accuracy():
    images, labels = toy_dataset()
    model = train((images, labels), TOY)
    preds = [model.predict_one(im) for im in images]
    assert np.array_equal(preds, labels)
    assert len(model.history) == 3
    assert set(model.history[0]) == {"epoch", "mean_loss", "train_error",
                                     "mean_active_set", "wall_seconds"}


def test_zero_epochs_returns_initialization():
    images, labels = toy_dataset()
    cfg = LearnConfig(n_atoms=2, epochs=0, patch_size=3, seed=3)
    model = train((images, labels), cfg)
    init = init_dictionary(images, labels, 2, cfg)
    np.testing.assert_array_equal(model.dictionary.data, init.data)
    np.testing.assert_array_equal(
        model.classifier.weights,
        clf.ClassifierParams.from_class_hint(init.class_hint, 2).weights)
    assert model.history == ()


def test_training_is_deterministic():
    images, labels = toy_dataset()
    a = train((images, labels), TOY)
    b = train((images, labels), TOY)
    assert np.array_equal(a.dictionary.data, b.dictionary.data)
    assert np.array_equal(a.classifier.weights, b.classifier.weights)


def test_thread_count_does_not_change_result():
    images, labels = toy_dataset()
    a = train((images, labels), TOY)
    from dataclasses import replace
    b = train((images, labels), replace(TOY, n_threads=3))
    assert np.array_equal(a.dictionary.data, b.dictionary.data)
    assert np.array_equal(a.classifier.weights, b.classifier.weights)


def test_epoch_loss_trend():
    images, labels = toy_dataset()
    wins = 0
    for seed in range(100):
        cfg = LearnConfig(n_atoms=2, epochs=4, batch_size=10, patch_size=3, window_side=5,
                          rho0=0.01, seed=seed)
        h = train((images, labels), cfg).history
        wins += h[3]["mean_loss"] < h[0]["mean_loss"]
    assert wins >= 95


def _toy_state(cfg, images, labels):
    d = init_dictionary(images, labels, cfg.n_atoms, cfg)
    params = clf.ClassifierParams.from_class_hint(d.class_hint, 2, cfg.mu)
    samples = [(prepare_image(im, cfg), clf.Label(int(y), 2)) for im, y in zip(images, labels)]
    return TrainState(d, params), samples


def test_stationary_batch_leaves_dictionary():
    images, labels = toy_dataset()
    state, samples = _toy_state(TOY, images, labels)
    # huge margins: every hinge is inactive, so the code gradient vanishes
    w = state.classifier.weights * 1e3
    state = TrainState(state.dictionary, clf.ClassifierParams(w, 0.0))
    new = sgd_step(state, samples[:4], TOY)
    np.testing.assert_array_equal(new.dictionary.data, state.dictionary.data)
    assert new.t == 1


def test_zero_step_leaves_state():
    from dataclasses import replace
    images, labels = toy_dataset()
    cfg = replace(TOY, rho0=1e-300)
    state, samples = _toy_state(cfg, images, labels)
    new = sgd_step(state, samples[:1], cfg)
    np.testing.assert_allclose(new.dictionary.data, state.dictionary.data, rtol=0, atol=1e-15)
    np.testing.assert_allclose(new.classifier.weights, state.classifier.weights, rtol=0,
                               atol=1e-15)


def test_two_sample_batch_is_mean_of_single_gradients():
    images, labels = toy_dataset()
    state, samples = _toy_state(TOY, images, labels)
    gw1, gd1, _ = batch_gradients(state, [samples[0]], TOY)
    gw2, gd2, _ = batch_gradients(state, [samples[4]], TOY)
    gw, gd, used = batch_gradients(state, [samples[0], samples[4]], TOY)
    assert used == 2
    assert np.any(gd)
    np.testing.assert_allclose(gd, (gd1 + gd2) / 2, rtol=1e-14, atol=1e-16)
    np.testing.assert_allclose(gw, (gw1 + gw2) / 2, rtol=1e-14, atol=1e-16)
    new = sgd_step(state, [samples[0], samples[4]], TOY)
    want = project_unit_fro(Dictionary(state.dictionary.data - TOY.rho0 * gd,
                                       state.dictionary.grid))
    np.testing.assert_array_equal(new.dictionary.data, want.data)
    assert np.all(np.abs(new.dictionary.norms() - 1) <= 1e-12)


def test_empty_batch():
    images, labels = toy_dataset()
    state, _ = _toy_state(TOY, images, labels)
    with pytest.raises(ValueError):
        sgd_step(state, [], TOY)


def test_init_dictionary_contract():
    images, labels = toy_dataset()
    cfg = LearnConfig(n_atoms=2, patch_size=3, seed=5)
    d = init_dictionary(images, labels, 2, cfg)
    assert sorted(d.class_hint.tolist()) == [0, 1]
    assert np.all(np.abs(d.norms() - 1) <= 1e-12)
    again = init_dictionary(images, labels, 2, cfg)
    np.testing.assert_array_equal(d.data, again.data)
    with pytest.raises(ValueError):
        init_dictionary(images, labels, 11, cfg)
    with pytest.raises(ValueError):
        init_dictionary(images, labels, 4 * 2, cfg)


def test_step_size_schedule():
    cfg = LearnConfig(rho0=0.001, decay_halflife=1000)
    assert cfg.step_size(0) == 0.001
    assert cfg.step_size(1000) == pytest.approx(0.0005)


def test_train_validation():
    images, labels = toy_dataset()
    with pytest.raises(ValueError):
        train((images[:5], np.zeros(5, int)), TOY)
    with pytest.raises(ValueError):
        train((images[:0], labels[:0]), TOY)
