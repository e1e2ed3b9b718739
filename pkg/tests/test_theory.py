import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safemogp.datasets import sin_sigmoid_dataset
from safemogp.errors import InputError
from safemogp.kernels import KernelSpec, LmcModel, full_index_set, kernel_matrix
from safemogp.theory import (
    CHECKS,
    BoundConstants,
    bound_constants,
    check_det_bounds,
    check_fischer,
    check_lemma1,
    check_mi_chain,
    check_weyl,
    exhaustive_max_info_gain,
    greedy_max_info_gain,
    greedy_sequence,
    lmc_channel_kernel,
    mutual_info_chain,
    mutual_info_direct,
    random_lmc,
    run_corpus,
)


def toy_model():
    return LmcModel(
        (KernelSpec("Matern52", 1.0, 0.3), KernelSpec("Matern52", 1.0, 1.0)),
        [[1.0, 0.5], [0.3, -1.0]],
        [0.16, 0.16],
    )


def random_index_set(rng, model, D, n):
    return rng.uniform(-2, 2, size=(n, D)), rng.integers(0, model.P, size=n)


class TestBoundConstants:
    def test_unit_case(self):
        bc = BoundConstants(1.0, 1.0, 1.0, 1, 1)
        assert bc.C1 == pytest.approx(1.0 / np.log(2.0), abs=1e-12)
        assert bc.C1 == pytest.approx(1.4427, abs=1e-4)

    @given(st.floats(0.1, 3), st.floats(0.1, 3), st.floats(0.01, 2), st.integers(1, 4))
    def test_single_output_constants_coincide(self, w, v, psi, L):
        bc = BoundConstants(w, v, psi, L, 1)
        assert bc.C1 == pytest.approx(bc.C2, rel=1e-14)

    def test_scalar_function_on_grid(self):
        for psi in (0.01, 0.1, 1.0, 10.0):
            t = np.geomspace(1e-6, 1e4, 2000) * psi
            assert np.all(t / np.log1p(t / psi) >= psi * (1 - 1e-12))

    def test_from_model(self):
        bc = bound_constants(toy_model())
        assert (bc.w_hat, bc.v_hat, bc.psi, bc.L, bc.P) == (1.0, 1.0, 0.16, 2, 2)
        assert bc.var_bound == 2.0

    def test_rejects_nonpositive(self):
        with pytest.raises(InputError):
            BoundConstants(0.0, 1.0, 1.0, 1, 1)


class TestMutualInformation:
    def test_empty(self):
        assert mutual_info_direct(toy_model(), (np.zeros((0, 1)), np.zeros(0, dtype=int))) == 0.0

    def test_zero_mixing(self, rng):
        model = LmcModel((KernelSpec("Matern52", 1.0, 0.5),), np.zeros((2, 1)), [0.1, 0.2])
        assert mutual_info_direct(model, random_index_set(rng, model, 1, 6)) == pytest.approx(0.0, abs=1e-15)

    def test_single_entry(self):
        model = toy_model()
        mi = mutual_info_direct(model, (np.array([[0.3]]), np.array([1])))
        var = model.prior_var(np.array([[0.3]]), np.array([1]))[0]
        assert mi == pytest.approx(0.5 * np.log1p(var / 0.16), abs=1e-14)

    @settings(max_examples=40)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 15))
    def test_chain_rule(self, seed, n):
        rng = np.random.default_rng(seed)
        D = int(rng.integers(1, 3))
        model = random_lmc(rng, D=D)
        idx = random_index_set(rng, model, D, n)
        assert mutual_info_chain(model, idx) == pytest.approx(mutual_info_direct(model, idx), abs=1e-6)
        assert check_mi_chain(model, idx).holds


class TestLemma1:
    def test_single_query(self):
        model = toy_model()
        x, ch = np.array([[0.2]]), np.array([0])
        rep = check_lemma1(model, (x, ch))
        var = model.prior_var(x, ch)[0]
        assert rep.lhs == pytest.approx(var)
        assert rep.rhs == pytest.approx(2 * bound_constants(model).C1 * 0.5 * np.log1p(var / 0.16))
        assert rep.holds

    def test_greedy_on_toy_model(self):
        model = toy_model()
        pool = sin_sigmoid_dataset(n_pool=100, seed=0).pool.X
        seq = greedy_sequence(model, pool, 10)
        rep = check_lemma1(model, seq, pool=pool)
        assert rep.precondition and rep.holds and rep.slack > 0

    def test_fully_observed_variant(self):
        model = toy_model()
        pool = sin_sigmoid_dataset(n_pool=40, seed=1).pool.X
        seq = greedy_sequence(model, pool, 6, mode="FOO")
        rep = check_lemma1(model, seq, mode="FOO", pool=pool)
        assert rep.precondition and rep.holds

    def test_precondition_flag(self):
        model = toy_model()
        pool = np.linspace(-2, 2, 30)[:, None]
        X, ch = greedy_sequence(model, pool, 5)
        # a second query at the first point is never the max-variance choice
        bad = (np.vstack([X[:1], X[:1]]), np.array([ch[0], ch[0]]))
        assert not check_lemma1(model, bad, pool=pool).precondition
        assert check_lemma1(model, (X, ch), pool=pool).precondition

    def test_halved_constant_can_fail(self):
        model = LmcModel((KernelSpec("Matern52", 1.0, 1.0),), [[1.0]], [0.5])
        rep = check_lemma1(model, (np.array([[0.0]]), np.array([0])), c1_scale=0.5)
        assert not rep.holds

    def test_rejects_bad_mode(self):
        with pytest.raises(InputError):
            check_lemma1(toy_model(), np.zeros((1, 1)), mode="both")


class TestFischer:
    def test_identity_mixing_is_equality(self, rng):
        model = LmcModel(tuple(KernelSpec("Matern52", 1.0, s) for s in (0.3, 0.7, 1.5)), np.eye(3), [0.1, 0.2, 0.3])
        rep = check_fischer(model, rng.uniform(-2, 2, size=(6, 1)))
        assert rep.lhs == pytest.approx(rep.rhs, abs=1e-9)

    def test_empty(self):
        rep = check_fischer(toy_model(), np.zeros((0, 1)))
        assert rep.lhs == rep.rhs == 0.0 and rep.holds

    def test_dense_oracle(self, rng):
        for _ in range(20):
            model = random_lmc(rng, P=3, D=1)
            X = rng.uniform(-2, 2, size=(6, 1))
            idx = full_index_set(X, 3)
            K = model.cross_cov(idx.X, idx.channels, idx.X, idx.channels)
            noise = model.noise_vars[idx.channels]
            joint = 0.5 * np.linalg.slogdet(np.eye(18) + K / noise[:, None])[1]
            blocks = sum(0.5 * np.linalg.slogdet(np.eye(6) + K[p * 6:(p + 1) * 6, p * 6:(p + 1) * 6]
                                                  / model.noise_vars[p])[1] for p in range(3))
            rep = check_fischer(model, X)
            assert rep.lhs == pytest.approx(joint, abs=1e-9) and rep.rhs == pytest.approx(blocks, abs=1e-9)
            assert rep.slack >= -1e-9


class TestWeyl:
    def test_single_matrix_equality(self, rng):
        B = rng.normal(size=(5, 5))
        rep = check_weyl([B @ B.T])
        assert rep.holds and rep.lhs == pytest.approx(rep.rhs, abs=1e-12)

    def test_diagonal_oracle(self):
        a, b = np.array([5.0, 3.0, 1.0, 0.5]), np.array([0.2, 4.0, 2.0, 1.0])
        beta = np.sort(a + b)[::-1]
        sa, sb = np.sort(a)[::-1], np.sort(b)[::-1]
        bound = [sa[s // 2] + sb[s // 2] for s in range(4)]
        assert all(beta[s] <= bound[s] for s in range(4))
        rep = check_weyl([np.diag(a), np.diag(b)])
        assert rep.holds
        s = int(rep.detail.split("=")[1]) - 1
        assert rep.lhs == pytest.approx(beta[s]) and rep.rhs == pytest.approx(bound[s])

    @given(st.integers(0, 2 ** 32 - 1))
    def test_three_random_psd(self, seed):
        rng = np.random.default_rng(seed)
        mats = [(lambda B: B @ B.T)(rng.normal(size=(6, int(rng.integers(1, 7))))) for _ in range(3)]
        assert check_weyl(mats).holds

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            check_weyl([np.eye(2), np.eye(3)])


class TestDetBounds:
    def test_no_data_is_tight(self):
        model = toy_model()
        rep = check_det_bounds(model, np.zeros((0, 1)), np.array([0.3]))
        assert rep.holds and rep.detail in ("det_post<=det_prior", "var_post<=var_prior")
        assert rep.slack == pytest.approx(0.0, abs=1e-12)

    def test_random_instances(self, rng):
        for _ in range(30):
            D = int(rng.integers(1, 3))
            model = random_lmc(rng, D=D)
            assert check_det_bounds(model, rng.uniform(-2, 2, (5, D)), rng.uniform(-2, 2, D)).holds

    def test_entry_at_bound(self):
        W = np.array([[2.0, 0.1], [-0.5, 2.0]])
        model = LmcModel((KernelSpec("Matern52", 1.5, 0.4), KernelSpec("SqExpIso", 1.5, 0.9)), W, [0.1, 0.3])
        assert bound_constants(model).w_hat == 2.0
        assert check_det_bounds(model, np.array([[0.0], [1.0]]), np.array([0.5])).holds


class TestGreedyInfoGain:
    kernel = KernelSpec("SqExpIso", 1.0, 0.5)

    def test_first_pick(self, rng):
        X = rng.uniform(-2, 2, size=(8, 1))
        k = lambda A, B: np.diag(np.arange(1.0, 9.0))
        res = greedy_max_info_gain(k, 0.5, X, 1)
        assert res.chosen == [7] and res.value == pytest.approx(0.5 * np.log1p(8.0 / 0.5))

    def test_submodular_guarantee(self, rng):
        for _ in range(20):
            X = rng.uniform(-2, 2, size=(6, 1))
            g = greedy_max_info_gain(self.kernel, 0.1, X, 3).value
            assert g >= (1 - 1 / np.e) * exhaustive_max_info_gain(self.kernel, 0.1, X, 3) - 1e-12

    def test_whole_pool_is_mutual_information(self, rng):
        model = toy_model()
        X = rng.uniform(-2, 2, size=(7, 1))
        res = greedy_max_info_gain(lmc_channel_kernel(model, 1), 0.16, X, 7)
        direct = mutual_info_direct(model, (X, np.ones(7, dtype=int)))
        assert res.value == pytest.approx(direct, abs=1e-9)

    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 20))
    def test_increments_nonnegative(self, seed, N):
        X = np.random.default_rng(seed).uniform(-2, 2, size=(20, 2))
        res = greedy_max_info_gain(self.kernel, 0.05, X, N)
        assert np.all(res.increments >= 0) and len(set(res.chosen)) == N

    def test_average_gain_decays(self):
        X = np.random.default_rng(11).uniform(-2, 2, size=(400, 1))
        res = greedy_max_info_gain(KernelSpec("SqExpIso", 1.0, 0.3), 0.01, X, 200)
        gamma = np.cumsum(res.increments)
        ratio = gamma[9:] / np.arange(10, 201)
        assert np.all(np.diff(ratio) <= 1e-12) and ratio[-1] < ratio[0]

    def test_rejects_bad_inputs(self):
        with pytest.raises(InputError):
            greedy_max_info_gain(self.kernel, 0.1, np.zeros((3, 1)), 4)
        with pytest.raises(InputError):
            greedy_max_info_gain(self.kernel, 0.0, np.zeros((3, 1)), 1)


class TestCorpus:
    def test_small_corpus_holds(self):
        reports = run_corpus(seed=3, count=40)
        assert {r.check for r in reports} >= {"mi_chain", "fischer", "weyl", "det_bounds"}
        assert all(r.holds for r in reports)

    def test_deterministic(self):
        a = run_corpus(seed=8, count=5, checks=("lemma1",))
        b = run_corpus(seed=8, count=5, checks=("lemma1",))
        assert [(r.lhs, r.rhs) for r in a] == [(r.lhs, r.rhs) for r in b]

    def test_checks_listed(self):
        assert CHECKS == ("mi_chain", "lemma1", "fischer", "weyl", "det_bounds")
