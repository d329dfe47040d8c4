import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ibmeta import gpvib
from ibmeta.autodiff import ParamSet, check_gradient
from ibmeta.features import FeatureNet
from ibmeta.gpvib import GPVIB, LOG_NOISE, StreamingUnsupported, VibConfig
from ibmeta.kernels import KernelSpec
from ibmeta.tasks import Sinusoid, SyntheticClasses, Task, sample_task

from . import oracles


def constant_model(noise=1.0, **cfg):
    """Zero-weight net: every input maps to [0, 1], so k(x, x') = 1."""
    model = GPVIB(FeatureNet(1, (2,)), VibConfig(kernel=KernelSpec(fixed_variance=1.0), **cfg))
    params = model.init_params(0)
    for k in ("net.w0", "net.b0"):
        params[k] = np.zeros_like(params[k].numpy())
    params[LOG_NOISE] = math.log(noise)
    return model, params


def sign_split_model(n_classes=None, encoder="exact"):
    """phi(x) = [relu(x), relu(-x)]: positive and negative inputs are orthogonal."""
    model = GPVIB(FeatureNet(1, (2,), augment=False), VibConfig(kernel=KernelSpec(fixed_variance=1.0), encoder=encoder), n_classes)
    params = model.init_params(0)
    params["net.w0"] = [[1.0, -1.0]]
    params["net.b0"] = [0.0, 0.0]
    return model, params


def sinusoid_model(seed=0, encoder="exact", solver="direct", beta=1.0, hidden=(16, 16)):
    net = FeatureNet(1, hidden, "tanh")
    model = GPVIB(net, VibConfig(beta=beta, encoder=encoder, solver=solver, kernel=KernelSpec(fixed_variance=1 / net.out_dim)))
    params = model.init_params(seed)
    r = np.random.default_rng(seed + 1)
    params[LOG_NOISE] = math.log(r.uniform(0.01, 0.5))
    if encoder == "amortized":
        for k in ("heads.w_m", "heads.w_s"):
            params[k] = 0.3 * r.standard_normal(net.out_dim)
        params["heads.b_s"] = r.normal()
    return model, params


def class_model(N=3, dim=4, seed=0, solver="direct", kernel="linear", mc=200, encoder="simplified", beta=1.0):
    net = FeatureNet(dim, (12,), "tanh")
    model = GPVIB(net, VibConfig(beta=beta, mc_samples=mc, kernel=KernelSpec(kernel), encoder=encoder, solver=solver), N)
    params = model.init_params(seed)
    params["heads.m_tilde" if encoder == "simplified" else "heads.b_m"] = 1.7
    return model, params


def class_task(N=3, dim=4, shots=3, seed=0):
    return sample_task(SyntheticClasses(ways=N, shots=shots, query_per_class=4, dim=dim), seed)


def _features(model, params, X):
    return oracles.features_numpy(X, params, model.net.hidden, model.net.activation, model.net.augment)


def _gram(model, params, Xa, Xb):
    return model.cfg.kernel.fixed_variance * _features(model, params, Xa) @ _features(model, params, Xb).T


# ---------------------------------------------------------------- encoders


def test_exact_posterior_one_point():
    model, params = constant_model()
    g = gpvib.exact_posterior(Task([[0.3]], [2.0], [], []), model, params)
    assert float(g.mean[0]) == pytest.approx(1.0, abs=1e-14)
    assert float(g.cov[0, 0]) == pytest.approx(0.5, abs=1e-14)


def test_exact_posterior_recovers_prior_for_huge_noise(rng):
    model, params = sinusoid_model()
    params[LOG_NOISE] = math.log(1e8)
    task = sample_task(Sinusoid(shots=5), 3)
    g = gpvib.exact_posterior(task, model, params)
    K = _gram(model, params, task.X_support, task.X_support)
    assert np.abs(g.mean.numpy()).max() < 1e-6
    np.testing.assert_allclose(g.cov.numpy(), K, atol=1e-7)


def test_exact_posterior_high_precision_oracle():
    model, params = sinusoid_model(2)
    task = sample_task(Sinusoid(shots=5), 8)
    K = _gram(model, params, task.X_support, task.X_support)
    noise = float(gpvib.noise_variance(params))
    mpmath.mp.dps = 40
    Km = mpmath.matrix(K.tolist())
    inv = (Km + noise * mpmath.eye(5)) ** -1
    mean = Km * inv * mpmath.matrix(task.Y_support.tolist())
    cov = Km - Km * inv * Km
    g = gpvib.exact_posterior(task, model, params)
    np.testing.assert_allclose(g.mean.numpy(), [float(v) for v in mean], rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(g.cov.numpy(), np.array(cov.tolist(), dtype=float), rtol=1e-7, atol=1e-10)


def test_amortized_with_noise_heads_reproduces_exact():
    model, params = sinusoid_model(4)
    amort = GPVIB(model.net, replace(model.cfg, encoder="amortized"))
    p = ParamSet(params | amort.heads.init_params(model.net.out_dim))
    noise = float(gpvib.noise_variance(params))
    p["heads.b_s"] = math.log(math.expm1(noise))  # softplus^-1
    task = sample_task(Sinusoid(shots=6), 1)
    a, e = gpvib.amortized_encoder(task, amort, p), gpvib.exact_posterior(task, model, params)
    np.testing.assert_allclose(a.mean.numpy(), e.mean.numpy(), atol=1e-10, rtol=0)
    np.testing.assert_allclose(a.cov.numpy(), e.cov.numpy(), atol=1e-10, rtol=0)


def test_zero_targets_give_zero_mean(rng):
    K = oracles.features_numpy(rng.standard_normal((4, 1)), FeatureNet(1, (3,)).init_params(rng), (3,))
    K = K @ K.T
    g = gpvib.joint_encoder(K, np.full(4, 0.2), np.zeros(4))
    assert float(g.mean.abs().max()) == 0.0
    _, ref_cov = oracles.encoder_joint(K, np.full(4, 0.2), np.zeros(4))
    np.testing.assert_allclose(g.cov.numpy(), ref_cov, atol=1e-10)


def test_binary_covariance_independent_of_signs():
    model, params = class_model(N=2, encoder="amortized")
    params["heads.w_m"] = np.linspace(-1, 1, model.net.out_dim)
    gs = gpvib.amortized_encoder(class_task(N=2), model, params)
    assert torch.equal(gs[0].cov, gs[1].cov)
    assert torch.allclose(gs[0].mean, -gs[1].mean, atol=1e-12)


def test_marginal_at_support_matches_joint():
    model, params = sinusoid_model(5, encoder="amortized")
    task = sample_task(Sinusoid(shots=7), 2)
    enc = gpvib.fit(model, params, task.X_support, task.Y_support)
    g = enc.joint()
    means, var = gpvib.marginal_q(task.X_support, enc, model, params)
    np.testing.assert_allclose(means.detach().numpy(), g.mean.detach().numpy(), atol=1e-10)
    np.testing.assert_allclose(var.detach().numpy(), g.cov.diagonal().detach().numpy(), atol=1e-10)


def test_marginal_one_point_and_orthogonal_query():
    model, params = constant_model()
    enc = gpvib.fit(model, params, [[0.0]], [2.0])
    mean, var = gpvib.marginal_q([[0.0]], enc, model, params)
    assert (float(mean[0]), float(var[0])) == pytest.approx((1.0, 0.5))
    model, params = sign_split_model()
    params[LOG_NOISE] = math.log(0.1)
    enc = gpvib.fit(model, params, [[1.0], [2.5]], [0.3, -1.0])
    mean, var = gpvib.marginal_q([[-1.5]], enc, model, params)
    assert float(mean[0]) == 0.0
    assert float(var[0]) == pytest.approx(2.25, abs=1e-14)


# ---------------------------------------------------------------- objectives


def test_beta_zero_is_expected_query_loglik():
    model, params = sinusoid_model(1, beta=0.0)
    task = sample_task(Sinusoid(shots=5, query=8), 4)
    Ft, Fv = _features(model, params, task.X_support), _features(model, params, task.X_query)
    noise = float(gpvib.noise_variance(params))
    c = model.cfg.kernel.fixed_variance
    ref = oracles.explicit_vib_regression(Ft, Fv, c, np.full(5, noise), task.Y_support, task.Y_query, noise, 0.0)
    terms = gpvib.regression_terms(task, model, params)
    assert float(terms.objective) == pytest.approx(ref, rel=1e-10)
    assert float(terms.kl) == 0.0


def test_two_point_closed_form():
    model, params = constant_model(noise=1.0)
    task = Task([[0.0]], [2.0], [[1.0]], [1.0])
    # q(f) = N(1, 1/2) at both points; KL[N(1, 1/2) || N(0, 1)] = (1/2 + 1 - 1 + ln 2) / 2
    ell = -0.5 * math.log(2 * math.pi) - 0.5 * (0.0 + 0.5)
    kl = 0.5 * (0.5 + 1.0 - 1.0 + math.log(2.0))
    val = float(gpvib.vib_objective_regression(task, model, params))
    assert val == pytest.approx(ell - kl, abs=1e-12)
    assert val == pytest.approx(-1.765512, abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(
    seed=st.integers(0, 10**6),
    beta=st.floats(0.0, 5.0),
    encoder=st.sampled_from(["exact", "amortized"]),
    shots=st.integers(1, 10),
)
def test_convenient_form_equals_explicit_kl(seed, beta, encoder, shots):
    model, params = sinusoid_model(seed % 97, encoder=encoder, beta=beta)
    task = sample_task(Sinusoid(shots=shots, query=6), seed)
    Xt, Xv = task.X_support, task.X_query
    noise = float(gpvib.noise_variance(params))
    _, _, _, s = gpvib.encoder_inputs(model, params, Xt, task.Y_support)
    s = s.detach().numpy()
    Ft, Fv = _features(model, params, Xt), _features(model, params, Xv)
    c = model.cfg.kernel.fixed_variance
    ref = oracles.explicit_vib_regression(Ft, Fv, c, s, task.Y_support, task.Y_query, noise, beta)
    val = float(gpvib.vib_objective_regression(task, model, params))
    assert abs(val - ref) <= 1e-8 * max(1.0, abs(ref))


def test_regression_objective_gradient():
    model, params = sinusoid_model(3, encoder="amortized", hidden=(6,))
    task = sample_task(Sinusoid(shots=5, query=5), 3)
    assert check_gradient(lambda q: gpvib.vib_objective_regression(task, model, q), params) < 1e-4


def test_classification_single_class_softmax_term_is_zero():
    model, params = class_model(N=1)
    task = Task(np.ones((3, 4)), [0, 0, 0], np.zeros((5, 4)), [0] * 5, n_classes=1)
    terms = gpvib.classification_terms(task, model, params, np.random.default_rng(0))
    assert float(terms.expected_loglik) == 0.0


def test_classification_uniform_softmax():
    model, params = class_model(N=4)
    params["heads.m_tilde"] = 0.0
    task = class_task(N=4)
    noise = torch.zeros(10, len(task.Y_query), 4, dtype=torch.float64)
    terms = gpvib.classification_terms(task, model, params, noise=noise)
    assert float(terms.expected_loglik) == pytest.approx(len(task.Y_query) * math.log(0.25), abs=1e-12)


@pytest.mark.parametrize("solver", ["direct", "woodbury"])
def test_classification_permutation_invariance_exact(solver):
    N = 5
    model, params = class_model(N=N, dim=6, seed=2, solver=solver, encoder="amortized")
    params["heads.w_m"] = np.linspace(-0.5, 0.8, model.net.out_dim)
    params["heads.w_s"] = np.linspace(0.3, -0.2, model.net.out_dim)
    task = class_task(N=N, dim=6, seed=9)
    noise = gpvib.draw_noise(np.random.default_rng(3), 200, len(task.Y_query), N)
    base = gpvib.classification_terms(task, model, params, noise=noise)
    enc = gpvib.fit(model, params, task.X_support, task.Y_support)
    base_pred = gpvib.predict(task.X_query, enc, model, params, noise=noise)
    for seed in range(4):
        perm = np.random.default_rng(seed).permutation(N)
        pnoise = torch.empty_like(noise)
        pnoise[..., perm] = noise
        t = task.permute_labels(perm)
        terms = gpvib.classification_terms(t, model, params, noise=pnoise)
        assert float(terms.objective) == float(base.objective)
        assert float(terms.kl) == float(base.kl)
        pred = gpvib.predict(t.X_query, gpvib.fit(model, params, t.X_support, t.Y_support), model, params, noise=pnoise)
        np.testing.assert_array_equal(pred.labels, perm[base_pred.labels])
        np.testing.assert_array_equal(pred.probs[:, perm], base_pred.probs)


def test_classification_gradient_with_frozen_noise():
    model, params = class_model(N=3, encoder="amortized")
    params["heads.w_m"] = np.linspace(-0.5, 0.8, model.net.out_dim)
    task = class_task()
    noise = gpvib.draw_noise(np.random.default_rng(0), 20, len(task.Y_query), 3)
    f = lambda q: gpvib.vib_objective_classification(task, model, q, noise=noise)
    assert check_gradient(f, params) < 1e-4


def test_mc_std_shrinks_with_samples():
    model, params = class_model(N=3, mc=50)
    task = class_task()
    stds = []
    for mc in (50, 100):
        m = replace(model, cfg=replace(model.cfg, mc_samples=mc))
        vals = [float(gpvib.classification_terms(task, m, params, np.random.default_rng([mc, r])).expected_loglik) for r in range(50)]
        stds.append(np.std(vals, ddof=1))
    ratio = stds[1] / stds[0]
    assert abs(ratio / math.sqrt(0.5) - 1.0) <= 0.25


# ---------------------------------------------------------------- solvers


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), encoder=st.sampled_from(["exact", "amortized"]), shots=st.integers(0, 25))
def test_woodbury_matches_direct_regression(seed, encoder, shots):
    task = sample_task(Sinusoid(shots=shots, query=7), seed)
    vals, preds = [], []
    for solver in ("direct", "woodbury"):
        model, params = sinusoid_model(seed % 31, encoder=encoder, solver=solver)
        vals.append(float(gpvib.vib_objective_regression(task, model, params)))
        enc = gpvib.fit(model, params, task.X_support, task.Y_support)
        preds.append(gpvib.predict(task.X_query, enc, model, params))
    assert abs(vals[0] - vals[1]) <= 1e-8 * max(1.0, abs(vals[0]))
    np.testing.assert_allclose(preds[0].mean, preds[1].mean, rtol=1e-8, atol=1e-9)
    np.testing.assert_allclose(preds[0].var, preds[1].var, rtol=1e-8, atol=1e-9)


@pytest.mark.parametrize("kernel", ["linear", "cosine"])
def test_woodbury_matches_direct_classification(kernel):
    task = class_task(N=4, shots=5, seed=1)
    noise = gpvib.draw_noise(np.random.default_rng(1), 30, len(task.Y_query), 4)
    vals = []
    for solver in ("direct", "woodbury"):
        model, params = class_model(N=4, solver=solver, kernel=kernel)
        vals.append(float(gpvib.vib_objective_classification(task, model, params, noise=noise)))
    assert vals[0] == pytest.approx(vals[1], rel=1e-8)


# ---------------------------------------------------------------- prediction


def test_regression_prediction_one_point():
    model, params = constant_model(noise=1.0)
    pred = gpvib.predict([[0.4]], gpvib.fit(model, params, [[0.4]], [2.0]), model, params)
    assert pred.mean[0] == pytest.approx(1.0) and pred.var[0] == pytest.approx(0.5) and pred.y_var[0] == pytest.approx(1.5)


def test_empty_support_predicts_prior():
    model, params = sinusoid_model()
    X = np.array([[0.5], [-2.0]])
    pred = gpvib.predict(X, gpvib.fit(model, params, np.zeros((0, 1)), np.zeros(0)), model, params)
    np.testing.assert_array_equal(pred.mean, 0.0)
    np.testing.assert_allclose(pred.var, np.diag(_gram(model, params, X, X)), rtol=1e-12)


def test_mirrored_binary_support_gives_even_odds():
    model, params = sign_split_model(n_classes=2, encoder="simplified")
    params = ParamSet(params | {"heads.m_tilde": 2.0, "heads.a": 0.0})
    enc = gpvib.fit(model, params, [[1.0], [-1.0]], [0, 1])
    pred = gpvib.predict([[0.0]], enc, model, params, rng=np.random.default_rng(0))
    assert abs(pred.probs[0, 0] - 0.5) <= 3 / math.sqrt(200)
    assert pred.labels[0] == 0  # exact tie goes to the lowest index
    np.testing.assert_array_equal(pred.means, [[0.0, 0.0]])


def test_argmax_of_means_agrees_with_large_sample_probabilities():
    model, params = class_model(N=4, encoder="amortized", seed=4)
    params["heads.w_m"] = np.linspace(-1.0, 1.0, model.net.out_dim)
    task = class_task(N=4, seed=4)
    enc = gpvib.fit(model, params, task.X_support, task.Y_support)
    with torch.no_grad():
        means, var = gpvib.marginal_q(task.X_query, enc, model, params)
    means, sd = means.numpy(), np.sqrt(var.numpy())
    eps = np.random.default_rng(0).standard_normal((100_000, *means.shape))
    f = means + sd[:, None] * eps
    sm = np.exp(f - f.max(-1, keepdims=True))
    sm /= sm.sum(-1, keepdims=True)
    probs = sm.mean(0)
    labels = gpvib.predict(task.X_query, enc, model, params, rng=np.random.default_rng(1)).labels
    checked = 0
    for j in range(len(labels)):
        a, b = np.argsort(probs[j])[::-1][:2]
        diff = sm[:, j, a] - sm[:, j, b]
        if diff.mean() > 5 * diff.std() / math.sqrt(len(diff)):
            assert labels[j] == a
            checked += 1
    assert checked > len(labels) // 2


# ---------------------------------------------------------------- streaming


def test_stream_empty_and_one_point():
    state = gpvib.StreamState(1)
    mean, var = state.predict([[1.0]], 1.0)
    assert (float(mean[0, 0]), float(var[0])) == (0.0, 1.0)
    state.ingest([1.0], [2.0], 1.0)
    mean, var = state.predict([[1.0]], 1.0)
    assert float(mean[0, 0]) == pytest.approx(1.0) and float(var[0]) == pytest.approx(0.5)


@pytest.mark.parametrize("encoder", ["exact", "amortized"])
def test_stream_matches_batch_in_any_order(encoder):
    model, params = sinusoid_model(6, encoder=encoder)
    task = sample_task(Sinusoid(shots=15, query=10), 6)
    ref = gpvib.predict(task.X_query, gpvib.fit(model, params, task.X_support, task.Y_support), model, params)
    for seed in range(3):
        state = gpvib.new_stream(model)
        for j in np.random.default_rng(seed).permutation(15):
            gpvib.stream_ingest(state, task.X_support[j], task.Y_support[j], model, params)
        mean, var = gpvib.stream_predict(state, task.X_query, model, params)
        np.testing.assert_allclose(mean.numpy(), ref.mean, rtol=1e-8, atol=1e-8)
        np.testing.assert_allclose(var.numpy(), ref.var, rtol=1e-8, atol=1e-8)
    assert state.A.shape == (model.net.out_dim, model.net.out_dim)


def test_stream_classification_matches_batch():
    model, params = class_model(N=3)
    task = class_task()
    enc = gpvib.fit(model, params, task.X_support, task.Y_support)
    with torch.no_grad():
        ref_means, ref_var = gpvib.marginal_q(task.X_query, enc, model, params)
    state = gpvib.new_stream(model)
    for x, y in zip(task.X_support, task.Y_support):
        gpvib.stream_ingest(state, x, y, model, params)
    means, var = gpvib.stream_predict(state, task.X_query, model, params)
    np.testing.assert_allclose(means.numpy(), ref_means.numpy(), rtol=1e-8, atol=1e-8)
    np.testing.assert_allclose(var.numpy(), ref_var.numpy(), rtol=1e-8, atol=1e-8)


def test_stream_rejects_cosine():
    model, _ = class_model(kernel="cosine")
    with pytest.raises(StreamingUnsupported):
        gpvib.new_stream(model)


# ---------------------------------------------------------------- bound


def test_bound_tight_for_exact_joint_posterior():
    model, params = sinusoid_model(7)
    t = sample_task(Sinusoid(shots=0, query=12), 7)
    task = Task(t.X_query, t.Y_query, t.X_query, t.Y_query)
    vib, logml = gpvib.elbo_bound_check(task, model, params)
    # the encoder is the exact posterior of the query data: the bound is tight
    scale = max(1.0, abs(logml))
    assert -1e-12 * scale <= logml - vib <= 1e-8 * scale


def test_bound_without_query_points():
    model, params = sinusoid_model(7)
    vib, logml = gpvib.elbo_bound_check(sample_task(Sinusoid(shots=5, query=0), 1), model, params)
    assert logml == 0.0 and vib <= 0.0
    vib, logml = gpvib.elbo_bound_check(sample_task(Sinusoid(shots=0, query=0), 1), model, params)
    assert (vib, logml) == (0.0, 0.0)


def test_bound_holds_on_random_tasks():
    for seed in range(100):
        model, params = sinusoid_model(seed % 10, encoder=("exact", "amortized")[seed % 2])
        task = sample_task(Sinusoid(shots=1 + seed % 15, query=10), seed)
        vib, logml = gpvib.elbo_bound_check(task, model, params)
        assert vib <= logml + 1e-8
