import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import multivariate_normal

from safemogp.errors import InputError, NumericalError
from safemogp.gp_models import (
    GPPosterior,
    HyperLayout,
    MarginalLikelihood,
    ObservationSet,
    lml_gradient,
    log_marginal_likelihood,
    mogp_posterior_full,
    mogp_posterior_partial,
    so_posterior,
    stable_cholesky,
)
from safemogp.inference import optimize_hyperparameters
from safemogp.kernels import KernelSpec, LmcModel, kernel_matrix

from conftest import brute_force_cov, condition_oracle, random_entries, random_model


def _fd_grad(f, theta, h=1e-6):
    return np.array([(f(theta + h * e) - f(theta - h * e)) / (2 * h) for e in np.eye(len(theta))])


class TestObservationSet:
    def test_counts(self):
        obs = ObservationSet.from_entries(np.zeros((3, 1)), [(0, 0, 1.0), (1, 1, 2.0), (2, 0, 3.0)], 2)
        assert obs.N == 3 and obs.N_sum == 3 and list(obs.N_p) == [2, 1]
        assert not obs.is_fully_observed

    def test_fully_observed_layout(self):
        obs = ObservationSet.fully_observed(np.arange(3.0)[:, None], np.arange(6.0).reshape(3, 2))
        assert obs.is_fully_observed
        assert list(obs.channel) == [0, 0, 0, 1, 1, 1]
        assert list(obs.value) == [0, 2, 4, 1, 3, 5]

    def test_duplicate_pair_rejected(self):
        with pytest.raises(InputError):
            ObservationSet.from_entries(np.zeros((1, 1)), [(0, 0, 1.0), (0, 0, 2.0)], 1)

    def test_bad_index_rejected(self):
        with pytest.raises(InputError):
            ObservationSet.from_entries(np.zeros((1, 1)), [(1, 0, 1.0)], 1)

    def test_safety_duplicates_keep_first(self):
        obs = ObservationSet.from_entries(np.zeros((2, 1)), [], 1, safety=[(0, 1.0), (1, 2.0), (0, 9.0)])
        assert list(obs.safety_value) == [1.0, 2.0]

    def test_add_point_reuses_existing_input(self):
        obs = ObservationSet.empty(1, 2).add_point([0.5], [(0, 1.0)], z=0.3)
        obs = obs.add_point([0.5], [(1, 2.0)], z=0.9)
        assert obs.N == 1 and obs.N_sum == 2 and list(obs.safety_value) == [0.3]


class TestSingleOutput:
    def test_no_data_is_prior(self):
        k = KernelSpec("Matern52", 1.7, 0.4)
        post = so_posterior(k, np.zeros((0, 1)), [], 0.1, [0.3])
        assert post.mean[0] == 0.0 and post.cov[0, 0] == pytest.approx(1.7)

    def test_near_interpolation(self):
        k = KernelSpec("SqExpIso", 1.0, 0.5)
        post = so_posterior(k, [[0.1], [0.9]], [0.7, -0.2], 1e-10, [0.1])
        assert post.mean[0] == pytest.approx(0.7, abs=1e-4)

    def test_two_points_against_conditioning(self, rng):
        k = KernelSpec("Matern52", 1.3, 0.8)
        X, y = rng.normal(size=(2, 1)), rng.normal(size=2)
        x_star = rng.normal(size=1)
        model = LmcModel((k,), [[1.0]], [0.2])
        mean, cov = condition_oracle(model, X, [(0, 0, y[0]), (1, 0, y[1])], x_star, [0])
        post = so_posterior(k, X, y, 0.2, x_star)
        assert post.mean[0] == pytest.approx(mean[0], abs=1e-8)
        assert post.cov[0, 0] == pytest.approx(cov[0, 0], abs=1e-8)
        assert 0 <= post.cov[0, 0] <= 1.3

    def test_nonpositive_noise(self):
        with pytest.raises(InputError):
            so_posterior(KernelSpec("Matern52"), [[0.0]], [1.0], 0.0, [0.0])


class TestMogpPosterior:
    def test_full_no_data_is_prior(self, rng):
        model, D = random_model(rng, P=3, L=2, D=2)
        x = rng.normal(size=D)
        post = mogp_posterior_full(model, ObservationSet.empty(D, 3), x)
        assert np.all(post.mean == 0)
        np.testing.assert_allclose(post.cov, model.output_cov(x), atol=1e-14)

    def test_full_requires_full_observation(self, rng):
        model, _ = random_model(rng, P=2, D=1)
        obs = ObservationSet.from_entries([[0.0]], [(0, 0, 1.0)], 2)
        with pytest.raises(InputError):
            mogp_posterior_full(model, obs, [0.0])

    def test_full_against_conditioning(self, rng):
        model, D = random_model(rng, P=2, D=2)
        X, Y = rng.normal(size=(2, D)), rng.normal(size=(2, 2))
        obs = ObservationSet.fully_observed(X, Y)
        entries = list(zip(obs.index, obs.channel, obs.value))
        x_star = rng.normal(size=D)
        mean, cov = condition_oracle(model, X, entries, x_star, range(2))
        post = mogp_posterior_full(model, obs, x_star)
        np.testing.assert_allclose(post.mean, mean, atol=1e-8)
        np.testing.assert_allclose(post.cov, cov, atol=1e-8)

    def test_identity_mixing_equals_independent(self, rng):
        kernels = (KernelSpec("Matern52", 1.2, 0.6), KernelSpec("SqExpIso", 0.7, 1.5))
        model = LmcModel(kernels, np.eye(2), [0.1, 0.3])
        X, Y = rng.normal(size=(5, 1)), rng.normal(size=(5, 2))
        x_star = rng.normal(size=1)
        post = mogp_posterior_full(model, ObservationSet.fully_observed(X, Y), x_star)
        for p in range(2):
            sp = so_posterior(kernels[p], X, Y[:, p], model.noise_vars[p], x_star)
            assert post.mean[p] == pytest.approx(sp.mean[0], abs=1e-8)
            assert post.cov[p, p] == pytest.approx(sp.cov[0, 0], abs=1e-8)
        assert post.cov[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_partial_no_entries_is_prior(self, rng):
        model, D = random_model(rng, P=3, D=1)
        post = mogp_posterior_partial(model, ObservationSet.empty(D, 3), [0.2], 2)
        assert post.mean[0] == 0.0
        assert post.cov[0, 0] == pytest.approx(model.output_cov([0.2])[2, 2])

    def test_partial_equals_full_component(self, rng):
        model, D = random_model(rng, P=3, D=2)
        obs = ObservationSet.fully_observed(rng.normal(size=(4, D)), rng.normal(size=(4, 3)))
        x = rng.normal(size=D)
        full = mogp_posterior_full(model, obs, x)
        for p in range(3):
            part = mogp_posterior_partial(model, obs, x, p)
            assert part.mean[0] == pytest.approx(full.mean[p], abs=1e-10)
            assert part.cov[0, 0] == pytest.approx(full.cov[p, p], abs=1e-10)

    def test_partial_permutation_invariant(self, rng):
        model, D = random_model(rng, P=3, D=2)
        X = rng.normal(size=(5, D))
        obs = ObservationSet.from_entries(X, random_entries(rng, 5, 3, min_entries=2), 3)
        perm = obs.permuted(rng.permutation(obs.N_sum))
        x = rng.normal(size=D)
        for p in range(3):
            a, b = mogp_posterior_partial(model, obs, x, p), mogp_posterior_partial(model, perm, x, p)
            assert a.mean[0] == pytest.approx(b.mean[0], abs=1e-10)
            assert a.cov[0, 0] == pytest.approx(b.cov[0, 0], abs=1e-10)

    def test_partial_channel_out_of_range(self, rng):
        model, D = random_model(rng, P=2, D=1)
        with pytest.raises(InputError):
            mogp_posterior_partial(model, ObservationSet.empty(1, 2), [0.0], 2)

    def test_conditioning_oracle_random(self, rng):
        for _ in range(40):
            model, D = random_model(rng)
            N = int(rng.integers(0, 7))
            X = rng.normal(size=(N, D))
            entries = random_entries(rng, N, model.P)
            obs = ObservationSet.from_entries(X if N else np.zeros((0, D)), entries, model.P)
            x = rng.normal(size=D)
            mean, cov = condition_oracle(model, X, entries, x, range(model.P))
            m, C = GPPosterior(model, obs).predict(x[None], full_cov=True)
            np.testing.assert_allclose(m[0], mean, atol=1e-8)
            np.testing.assert_allclose(C[0], cov, atol=1e-8)

    def test_posterior_det_below_prior(self, rng):
        for _ in range(40):
            model, D = random_model(rng)
            N = int(rng.integers(1, 6))
            obs = ObservationSet.from_entries(rng.normal(size=(N, D)), random_entries(rng, N, model.P), model.P)
            x = rng.normal(size=D)
            _, C = GPPosterior(model, obs).predict(x[None], full_cov=True)
            assert np.linalg.det(C[0]) <= np.linalg.det(model.output_cov(x)) + 1e-8

    @given(st.integers(0, 2 ** 32 - 1))
    def test_variance_monotone_in_data(self, seed):
        rng = np.random.default_rng(seed)
        model, D = random_model(rng)
        N = int(rng.integers(1, 6))
        X = rng.normal(size=(N, D))
        entries = random_entries(rng, N, model.P, min_entries=1)
        x = rng.normal(size=D)
        p = int(rng.integers(model.P))
        prev = np.inf
        for k in range(len(entries) + 1):
            obs = ObservationSet.from_entries(X, entries[:k], model.P)
            v = mogp_posterior_partial(model, obs, x, p).cov[0, 0]
            assert v <= prev + 1e-9
            prev = v


class TestMarginalLikelihood:
    def test_single_observation(self):
        model = LmcModel((KernelSpec("Matern52", 1.0, 1.0),), [[1.0]], [1.0])
        obs = ObservationSet.from_entries([[0.0]], [(0, 0, 0.0)], 1)
        assert log_marginal_likelihood(model, obs) == pytest.approx(-0.5 * np.log(4 * np.pi), rel=1e-14)

    def test_against_dense_density(self, rng):
        for _ in range(20):
            model, D = random_model(rng)
            N = int(rng.integers(1, 6))
            X = rng.normal(size=(N, D))
            entries = random_entries(rng, N, model.P, min_entries=1)
            obs = ObservationSet.from_entries(X, entries, model.P)
            pairs = [(X[n], p) for n, p, _ in entries]
            K = brute_force_cov(model, pairs, pairs) + np.diag([model.noise_vars[p] for _, p, _ in entries])
            y = np.array([v for _, _, v in entries])
            expected = -0.5 * y @ np.linalg.solve(K, y) - 0.5 * np.log(np.linalg.det(K)) - 0.5 * len(y) * np.log(2 * np.pi)
            assert log_marginal_likelihood(model, obs) == pytest.approx(expected, abs=1e-8)
            assert log_marginal_likelihood(model, obs) == pytest.approx(
                multivariate_normal(np.zeros(len(y)), K).logpdf(y), abs=1e-8)

    def test_permutation_invariant(self, rng):
        model, D = random_model(rng, P=3, D=2)
        obs = ObservationSet.from_entries(rng.normal(size=(4, D)), random_entries(rng, 4, 3, min_entries=3), 3)
        perm = obs.permuted(rng.permutation(obs.N_sum))
        assert log_marginal_likelihood(model, obs) == pytest.approx(log_marginal_likelihood(model, perm), abs=1e-10)

    def test_identity_mixing_sums_channels(self, rng):
        kernels = (KernelSpec("Matern52", 1.2, 0.6), KernelSpec("SqExpIso", 0.7, 1.5))
        model = LmcModel(kernels, np.eye(2), [0.1, 0.3])
        X, Y = rng.normal(size=(5, 1)), rng.normal(size=(5, 2))
        joint = log_marginal_likelihood(model, ObservationSet.fully_observed(X, Y))
        total = sum(log_marginal_likelihood(LmcModel((kernels[p],), [[1.0]], [model.noise_vars[p]]),
                                            ObservationSet.fully_observed(X, Y[:, [p]]))
                    for p in range(2))
        assert joint == pytest.approx(total, abs=1e-8)

    def test_empty_rejected(self, rng):
        model, _ = random_model(rng, D=1)
        with pytest.raises(InputError):
            log_marginal_likelihood(model, ObservationSet.empty(1, model.P))


class TestGradient:
    def test_finite_differences(self, rng):
        for _ in range(10):
            P, L = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            fams = tuple(rng.choice(["Matern52", "SqExpIso"]) for _ in range(L))
            model, D = random_model(rng, P=P, L=L, families=fams)
            N = int(rng.integers(2, 7))
            obs = ObservationSet.from_entries(rng.normal(size=(N, D)), random_entries(rng, N, P, 1), P)
            layout = HyperLayout(P, fams)
            theta = layout.pack(model)
            ml = MarginalLikelihood(obs, layout)
            g = lml_gradient(model, obs, layout)
            assert g.shape == (layout.dim,)
            assert np.max(np.abs(g - _fd_grad(ml.value, theta))) < 1e-4

    def test_fixed_mixing_layouts(self, rng):
        for layout in (HyperLayout.single_output(), HyperLayout.independent(3, "SqExpIso")):
            model = layout.unpack(layout.default_theta() + rng.normal(0, 0.3, layout.dim))
            obs = ObservationSet.from_entries(rng.normal(size=(4, 1)), random_entries(rng, 4, layout.P, 1), layout.P)
            ml = MarginalLikelihood(obs, layout)
            theta = layout.pack(model)
            assert np.max(np.abs(ml.value_and_grad(theta)[1] - _fd_grad(ml.value, theta))) < 1e-4

    def test_noise_gradient_vanishes_at_optimum(self, rng):
        X = rng.uniform(-2, 2, size=(40, 1))
        y = np.sin(3 * X[:, 0]) + 0.3 * rng.standard_normal(40)
        obs = ObservationSet.fully_observed(X, y[:, None])
        layout = HyperLayout.single_output()
        res = optimize_hyperparameters(obs, layout, restarts=3, rng=0)
        g = MarginalLikelihood(obs, layout).value_and_grad(res.theta)[1]
        assert abs(g[-1]) < 1e-4


class TestCholesky:
    def test_jitter_rescues_singular(self):
        K = np.ones((3, 3))
        L = stable_cholesky(K)
        np.testing.assert_allclose(L @ L.T, K, atol=1e-3)

    def test_gives_up(self):
        with pytest.raises(NumericalError):
            stable_cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))

    def test_no_jitter_when_spd(self, rng):
        B = rng.normal(size=(4, 4))
        K = B @ B.T + np.eye(4)
        L = stable_cholesky(K)
        np.testing.assert_allclose(L @ L.T, K, atol=1e-12)
