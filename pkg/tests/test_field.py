import numpy as np
import pytest

from udfnav import field as fd


def fd_input_gradient(model, x, h=1e-5):
    g = np.zeros(3)
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        g[axis] = (fd.evaluate(model, x + e).value
                   - fd.evaluate(model, x - e).value) / (2 * h)
    return g


def fd_param_gradient(model, loss_of_model, h=1e-6):
    base = model.pack()
    grad = np.zeros_like(base)
    for k in range(len(base)):
        plus = base.copy()
        plus[k] += h
        minus = base.copy()
        minus[k] -= h
        mp = model.copy()
        mp.unpack(plus)
        mm = model.copy()
        mm.unpack(minus)
        grad[k] = (loss_of_model(mp) - loss_of_model(mm)) / (2 * h)
    return grad


@pytest.fixture
def small_model():
    model = fd.init_model(width=8, depth=2, omega0=25.0, seed=1)
    rng = np.random.default_rng(99)
    for b in model.biases:  # move off the zero-bias special point
        b[...] = rng.normal(scale=0.3, size=b.shape)
    return model


# ---------------------------------------------------------------------------
# initialization

def test_parameter_count_default_architecture():
    model = fd.init_model(256, 3, 25.0, seed=0)
    expected = (3 * 256 + 256) + 2 * (256 * 256 + 256) + (256 * 1 + 1)
    assert model.n_params == expected
    assert model.width == 256 and model.depth == 3


def test_init_deterministic_per_seed():
    a = fd.init_model(16, 2, 25.0, seed=5)
    b = fd.init_model(16, 2, 25.0, seed=5)
    c = fd.init_model(16, 2, 25.0, seed=6)
    assert all(np.array_equal(x, y) for x, y in zip(a.pack()[None], b.pack()[None]))
    assert np.array_equal(a.pack(), b.pack())
    assert not np.array_equal(a.pack(), c.pack())


def test_init_weight_bounds():
    model = fd.init_model(32, 3, 25.0, seed=2)
    assert np.abs(model.weights[0]).max() <= 1.0 / 3.0
    bound = np.sqrt(6.0 / 32) / 25.0
    for w in model.weights[1:]:
        assert np.abs(w).max() <= bound
    for b in model.biases:
        assert np.all(b == 0.0)


def test_init_rejects_bad_dims():
    with pytest.raises(ValueError):
        fd.init_model(0, 3)
    with pytest.raises(ValueError):
        fd.init_model(8, 0)


# ---------------------------------------------------------------------------
# evaluation

def test_zero_biases_at_origin_gives_output_bias():
    model = fd.init_model(16, 3, 25.0, seed=0)
    model.biases[-1][0] = 0.7531
    ev = fd.evaluate(model, np.zeros(3))
    assert ev.value == pytest.approx(0.7531, abs=1e-12)


def test_input_gradient_matches_finite_differences(small_model):
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.uniform(-1, 1, 3)
        analytic = fd.evaluate(small_model, x).gradient
        numeric = fd_input_gradient(small_model, x)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-7)
        assert rel.max() <= 1e-4


def test_taylor_remainder_second_order(small_model):
    rng = np.random.default_rng(8)
    x = rng.uniform(-0.5, 0.5, 3)
    ev = fd.evaluate(small_model, x)
    deltas = rng.normal(size=(20, 3))
    deltas /= np.linalg.norm(deltas, axis=1, keepdims=True)
    for scale in (1e-3, 1e-4):
        for d in deltas[:5]:
            step = scale * d
            linear = fd.evaluate(small_model, x + step).value - ev.value
            remainder = abs(linear - ev.gradient @ step)
            assert remainder <= 50.0 * scale ** 2  # O(||step||^2)


def test_evaluate_rejects_nonfinite(small_model):
    with pytest.raises(ValueError):
        fd.evaluate(small_model, np.array([np.inf, 0, 0]))


def test_nonfinite_parameters_raise_with_layer_index(small_model):
    small_model.weights[1][0, 0] = np.inf
    with pytest.raises(fd.NumericError) as err:
        # bypass construction-time validation via direct evaluate
        fd.evaluate_batch(small_model, np.zeros((2, 3)))
    assert err.value.layer == 1


def test_batch_matches_single_and_order_independent(small_model):
    rng = np.random.default_rng(3)
    xs = rng.uniform(-1, 1, (32, 3))
    vals, grads = fd.evaluate_batch(small_model, xs)
    for i in (0, 7, 31):
        ev = fd.evaluate(small_model, xs[i])
        assert vals[i] == pytest.approx(ev.value, abs=1e-14)
        assert np.allclose(grads[i], ev.gradient, atol=1e-14)
    perm = rng.permutation(32)
    vals_p, grads_p = fd.evaluate_batch(small_model, xs[perm])
    assert np.array_equal(vals_p, vals[perm])
    assert np.array_equal(grads_p, grads[perm])


# ---------------------------------------------------------------------------
# loss and parameter gradients

def test_perfect_fit_has_zero_fit_loss_and_gradient(small_model):
    rng = np.random.default_rng(1)
    queries = rng.uniform(-1, 1, (12, 3))
    values, _ = fd.evaluate_batch(small_model, queries)
    surface = rng.uniform(-1, 1, (4, 3))
    terms, grads = fd.loss_and_param_grads(
        small_model, surface, queries, values, alpha_surf=0.0, alpha_eik=0.0)
    assert terms.fit == 0.0
    assert terms.total == 0.0
    assert np.all(grads.pack() == 0.0)


def test_param_gradients_match_finite_differences(small_model):
    rng = np.random.default_rng(2)
    surface = rng.uniform(-1, 1, (6, 3))
    queries = rng.uniform(-1, 1, (9, 3))
    dists = rng.uniform(0, 0.5, 9)
    a_s, a_e = 0.5, 0.1

    _, grads = fd.loss_and_param_grads(small_model, surface, queries, dists, a_s, a_e)

    def loss_of(m):
        t, _ = fd.loss_and_param_grads(m, surface, queries, dists, a_s, a_e)
        return t.total

    numeric = fd_param_gradient(small_model, loss_of)
    rel = np.abs(grads.pack() - numeric) / np.maximum(np.abs(numeric), 1e-7)
    assert rel.max() <= 1e-4


def test_eikonal_weight_linearity(small_model):
    rng = np.random.default_rng(4)
    surface = rng.uniform(-1, 1, (5, 3))
    queries = rng.uniform(-1, 1, (7, 3))
    dists = rng.uniform(0, 0.5, 7)
    t1, g1 = fd.loss_and_param_grads(small_model, surface, queries, dists, 0.0, 0.1)
    t2, g2 = fd.loss_and_param_grads(small_model, surface, queries, dists, 0.0, 0.2)
    assert t1.eik == t2.eik  # component itself is weight-free
    assert t2.total - t2.fit == pytest.approx(2.0 * (t1.total - t1.fit), rel=1e-12)
    eik_grad_1 = g1.pack() - fd.loss_and_param_grads(
        small_model, surface, queries, dists, 0.0, 0.0)[1].pack()
    eik_grad_2 = g2.pack() - fd.loss_and_param_grads(
        small_model, surface, queries, dists, 0.0, 0.0)[1].pack()
    assert np.allclose(eik_grad_2, 2.0 * eik_grad_1, rtol=1e-12, atol=1e-18)


def test_loss_components_nonnegative_and_total_exact(small_model):
    rng = np.random.default_rng(6)
    surface = rng.uniform(-1, 1, (10, 3))
    queries = rng.uniform(-1, 1, (10, 3))
    dists = rng.uniform(0, 0.5, 10)
    terms, _ = fd.loss_and_param_grads(small_model, surface, queries, dists, 0.5, 0.1)
    assert terms.fit >= 0 and terms.surf >= 0 and terms.eik >= 0
    assert terms.total == terms.fit + 0.5 * terms.surf + 0.1 * terms.eik


def test_loss_workspace_reuse_is_exact(small_model):
    rng = np.random.default_rng(7)
    surface = rng.uniform(-1, 1, (6, 3))
    queries = rng.uniform(-1, 1, (9, 3))
    dists = rng.uniform(0, 0.5, 9)
    ws = fd.LossWorkspace(small_model.width, small_model.depth, 6, 9)
    t0, g0 = fd.loss_and_param_grads(small_model, surface, queries, dists, 0.5, 0.1)
    for _ in range(3):
        t1, g1 = fd.loss_and_param_grads(small_model, surface, queries, dists,
                                         0.5, 0.1, workspace=ws)
        assert t1 == t0
        assert np.array_equal(g1.pack(), g0.pack())


def test_loss_rejects_empty_batches(small_model):
    with pytest.raises(ValueError):
        fd.loss_and_param_grads(small_model, np.zeros((0, 3)), np.zeros((1, 3)),
                                np.zeros(1), 0.5, 0.1)
    with pytest.raises(ValueError):
        fd.loss_and_param_grads(small_model, np.zeros((1, 3)), np.zeros((0, 3)),
                                np.zeros(0), 0.5, 0.1)


def test_eikonal_guard_survives_zero_gradient():
    # all-zero weights give an exactly zero spatial gradient everywhere
    model = fd.init_model(8, 2, 25.0, seed=0)
    for w in model.weights:
        w[...] = 0.0
    terms, grads = fd.loss_and_param_grads(
        model, np.zeros((2, 3)), np.ones((2, 3)), np.zeros(2), 0.5, 0.1)
    assert np.isfinite(terms.total)
    assert np.all(np.isfinite(grads.pack()))
    assert terms.eik == pytest.approx(1.0, rel=1e-5)  # (||0||_eps - 1)^2
