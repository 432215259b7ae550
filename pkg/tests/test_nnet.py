import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pegwatch.nnet import (
    ConfigurationError,
    DiagGaussian,
    GaussianMixture,
    MlpSpec,
    ParamStore,
    Tensor,
    UsageError,
    cross_entropy,
    finite_diff_grads,
    forward_mlp,
    forward_mlp_np,
    gaussian_kl,
    gmm_log_prob,
    grad_rel_error,
    init_mlp,
    softmax_np,
)


def make_store(spec: MlpSpec, seed: int) -> ParamStore:
    store = ParamStore()
    init_mlp(store, "net", spec, np.random.default_rng(seed))
    return store


class TestForwardMlp:
    def test_zero_weights_give_zero_output(self):
        spec = MlpSpec(4, (8, 8), 3, residual=(False, False))
        store = make_store(spec, 0)
        for name in store.names():
            store[name].data[:] = 0.0
        out = forward_mlp(store, "net", spec, Tensor(np.ones((2, 4))))
        assert np.all(out.data == 0.0)

    def test_identity_single_layer(self):
        spec = MlpSpec(5, (), 5)
        store = ParamStore()
        store.add("net/w0", np.eye(5))
        store.add("net/b0", np.zeros(5))
        v = np.random.default_rng(1).normal(size=(3, 5))
        out = forward_mlp(store, "net", spec, Tensor(v))
        np.testing.assert_array_equal(out.data, v)

    def test_matches_hand_rolled_matmul_oracle(self):
        # independent oracle: explicit matmul/relu chain in plain numpy
        rng = np.random.default_rng(7)
        spec = MlpSpec(6, (10,), 4, residual=(False,))
        store = make_store(spec, 7)
        x = rng.normal(size=(5, 6))
        w0, b0 = store["net/w0"].data, store["net/b0"].data
        w1, b1 = store["net/w1"].data, store["net/b1"].data
        expected = np.maximum(x @ w0 + b0, 0.0) @ w1 + b1
        out = forward_mlp(store, "net", spec, Tensor(x))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_residual_skip_adds_input(self):
        spec = MlpSpec(4, (4,), 2, residual=(True,))
        store = make_store(spec, 3)
        store["net/w0"].data[:] = 0.0
        store["net/b0"].data[:] = 0.0
        x = np.random.default_rng(0).normal(size=(2, 4))
        # hidden = relu(0) + x = x, so output = x @ w1 + b1
        out = forward_mlp(store, "net", spec, Tensor(x))
        expected = x @ store["net/w1"].data + store["net/b1"].data
        np.testing.assert_allclose(out.data, expected, atol=1e-15)

    def test_dimension_mismatch_raises(self):
        spec = MlpSpec(4, (8,), 3)
        store = make_store(spec, 0)
        with pytest.raises(ConfigurationError):
            forward_mlp(store, "net", spec, Tensor(np.ones((2, 5))))

    def test_graph_and_numpy_paths_agree(self):
        spec = MlpSpec(6, (12, 12), 4)
        store = make_store(spec, 11)
        x = np.random.default_rng(2).normal(size=(7, 6))
        a = forward_mlp(store, "net", spec, Tensor(x)).data
        b = forward_mlp_np(store, "net", spec, x)
        np.testing.assert_array_equal(a, b)


class TestBackward:
    def test_sum_of_parameters_gives_unit_gradients(self):
        store = ParamStore()
        a = store.add("a", np.arange(6.0).reshape(2, 3))
        b = store.add("b", np.ones(3))
        loss = a.sum() + b.sum()
        loss.backward()
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, np.ones(3))

    def test_constant_zero_loss_gives_zero_gradients(self):
        store = ParamStore()
        a = store.add("a", np.ones((2, 2)))
        loss = (a * 0.0).sum()
        loss.backward()
        np.testing.assert_array_equal(a.grad, np.zeros((2, 2)))

    def test_backward_twice_raises(self):
        store = ParamStore()
        a = store.add("a", np.ones(3))
        loss = a.sum()
        loss.backward()
        with pytest.raises(UsageError):
            loss.backward()

    @pytest.mark.parametrize("seed", range(5))
    def test_random_net_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        spec = MlpSpec(5, (8, 8), 3, residual=(True, False))
        store = make_store(spec, seed)
        x = rng.normal(size=(4, 5))
        target = rng.normal(size=(4, 3))

        def loss_fn():
            out = forward_mlp(store, "net", spec, Tensor(x))
            return float(((out - Tensor(target)).square()).mean().data)

        store.zero_grads()
        out = forward_mlp(store, "net", spec, Tensor(x))
        ((out - Tensor(target)).square()).mean().backward()
        fd = finite_diff_grads(store, loss_fn)
        for name in store.names():
            assert grad_rel_error(store[name].grad, fd[name]) < 1e-4, name


class TestAdam:
    def test_zero_gradients_leave_parameters_unchanged(self):
        store = ParamStore()
        a = store.add("a", np.array([1.0, -2.0, 3.0]))
        before = a.data.copy()
        store.zero_grads()
        store.adam_step()
        np.testing.assert_array_equal(a.data, before)

    def test_first_step_closed_form(self):
        # grad=1 with bias correction gives m_hat/sqrt(v_hat) = 1 exactly
        store = ParamStore()
        a = store.add("a", np.array([0.5]))
        a.grad[:] = 1.0
        store.adam_step(lr=0.1)
        assert a.data[0] == pytest.approx(0.5 - 0.1, abs=1e-9)

    def test_deterministic_across_identical_runs(self):
        def run():
            rng = np.random.default_rng(42)
            spec = MlpSpec(3, (6,), 2)
            store = ParamStore()
            init_mlp(store, "net", spec, rng)
            x = np.random.default_rng(1).normal(size=(8, 3))
            for _ in range(5):
                store.zero_grads()
                out = forward_mlp(store, "net", spec, Tensor(x))
                out.square().mean().backward()
                store.adam_step()
            return {n: store[n].data.copy() for n in store.names()}

        one, two = run(), run()
        for n in one:
            np.testing.assert_array_equal(one[n], two[n])

    def test_nan_gradient_aborts_with_diagnostic(self):
        store = ParamStore()
        a = store.add("bad_param", np.ones(2))
        a.grad[:] = np.nan
        with pytest.raises(UsageError, match="bad_param"):
            store.adam_step()

    def test_zero_grads_resets_exactly(self):
        store = ParamStore()
        a = store.add("a", np.ones(4))
        a.grad[:] = 3.5
        store.zero_grads()
        assert np.all(a.grad == 0.0)


class TestDiagGaussian:
    def test_kl_identity_is_zero(self):
        mean = np.array([[0.3, -1.2]])
        ls = np.array([[0.1, -0.4]])
        q = DiagGaussian(Tensor(mean), Tensor(ls))
        p = DiagGaussian(Tensor(mean.copy()), Tensor(ls.copy()))
        assert gaussian_kl(q, p).item() == pytest.approx(0.0, abs=1e-15)

    def test_kl_standard_case_closed_form(self):
        # KL(N(1,1) || N(0,1)) = 0.5
        q = DiagGaussian(Tensor([[1.0]]), Tensor([[0.0]]))
        p = DiagGaussian(Tensor([[0.0]]), Tensor([[0.0]]))
        assert gaussian_kl(q, p).item() == pytest.approx(0.5, abs=1e-12)

    def test_kl_matches_monte_carlo_oracle(self):
        rng = np.random.default_rng(0)
        qm, ql = rng.normal(size=(1, 3)), rng.uniform(-1, 0.5, size=(1, 3))
        pm, pl = rng.normal(size=(1, 3)), rng.uniform(-1, 0.5, size=(1, 3))
        q = DiagGaussian(Tensor(qm), Tensor(ql))
        p = DiagGaussian(Tensor(pm), Tensor(pl))
        analytic = gaussian_kl(q, p).item()

        n = 100_000
        eps = rng.standard_normal((n, 3))
        x = qm + np.exp(ql) * eps
        def logpdf(x, m, ls):
            z = (x - m) / np.exp(ls)
            return (-0.5 * z**2 - ls - 0.5 * math.log(2 * math.pi)).sum(axis=1)
        diffs = logpdf(x, qm, ql) - logpdf(x, pm, pl)
        mc = diffs.mean()
        se = diffs.std(ddof=1) / math.sqrt(n)
        assert abs(analytic - mc) < 3 * se

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_kl_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        q = DiagGaussian(Tensor(rng.normal(size=(1, 4))), Tensor(rng.uniform(-2, 1, (1, 4))))
        p = DiagGaussian(Tensor(rng.normal(size=(1, 4))), Tensor(rng.uniform(-2, 1, (1, 4))))
        assert gaussian_kl(q, p).item() >= 0.0

    def test_log_prob_integrates_to_one_1d(self):
        # closed-form density check by quadrature on a 1-D Gaussian
        g = DiagGaussian(Tensor([[0.4]]), Tensor([[-0.3]]))
        xs = np.linspace(-8, 8, 20001).reshape(-1, 1)
        lp = DiagGaussian(Tensor(np.repeat([[0.4]], len(xs), 0)),
                          Tensor(np.repeat([[-0.3]], len(xs), 0))).log_prob(Tensor(xs))
        total = np.trapezoid(np.exp(lp.data[:, 0]), xs[:, 0])
        assert total == pytest.approx(1.0, abs=1e-6)
        assert g.dim == 1

    def test_dimension_mismatch_raises(self):
        q = DiagGaussian(Tensor([[0.0, 1.0]]), Tensor([[0.0, 0.0]]))
        p = DiagGaussian(Tensor([[0.0]]), Tensor([[0.0]]))
        with pytest.raises(ConfigurationError):
            gaussian_kl(q, p)


class TestGaussianMixture:
    def test_single_component_equals_diag_gaussian(self):
        rng = np.random.default_rng(5)
        mu, ls = rng.normal(size=(1, 3)), rng.uniform(-1, 0, (1, 3))
        x = rng.normal(size=(1, 3))
        gmm = GaussianMixture([Tensor(mu)], [Tensor(ls)], Tensor([[0.7]]))
        single = DiagGaussian(Tensor(mu), Tensor(ls)).log_prob(Tensor(x))
        assert gmm_log_prob(gmm, Tensor(x)).item() == pytest.approx(single.item(), abs=1e-14)

    def test_duplicate_components_collapse(self):
        rng = np.random.default_rng(6)
        mu, ls = rng.normal(size=(1, 2)), rng.uniform(-1, 0, (1, 2))
        x = rng.normal(size=(1, 2))
        gmm = GaussianMixture([Tensor(mu), Tensor(mu.copy())],
                              [Tensor(ls), Tensor(ls.copy())],
                              Tensor([[0.3, 0.3]]))
        single = DiagGaussian(Tensor(mu), Tensor(ls)).log_prob(Tensor(x))
        assert gmm_log_prob(gmm, Tensor(x)).item() == pytest.approx(single.item(), abs=1e-12)

    def test_matches_linear_space_oracle(self):
        rng = np.random.default_rng(8)
        M, d = 3, 4
        mus = [rng.normal(size=(1, d)) for _ in range(M)]
        lss = [rng.uniform(-1, 0.5, (1, d)) for _ in range(M)]
        logits = rng.normal(size=(1, M))
        x = rng.normal(size=(1, d))

        w = np.exp(logits[0] - logits[0].max())
        w = w / w.sum()
        dens = 0.0
        for m in range(M):
            std = np.exp(lss[m][0])
            comp = np.prod(np.exp(-0.5 * ((x[0] - mus[m][0]) / std) ** 2)
                           / (std * math.sqrt(2 * math.pi)))
            dens += w[m] * comp
        oracle = math.log(dens)

        gmm = GaussianMixture([Tensor(m) for m in mus], [Tensor(s) for s in lss],
                              Tensor(logits))
        assert gmm_log_prob(gmm, Tensor(x)).item() == pytest.approx(oracle, abs=1e-10)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(9)
        M, d = 4, 3
        mus = [rng.normal(size=(1, d)) for _ in range(M)]
        lss = [rng.uniform(-1, 0, (1, d)) for _ in range(M)]
        logits = rng.normal(size=(1, M))
        x = rng.normal(size=(1, d))
        base = gmm_log_prob(GaussianMixture([Tensor(m) for m in mus],
                                            [Tensor(s) for s in lss],
                                            Tensor(logits)), Tensor(x)).item()
        perm = [2, 0, 3, 1]
        shuffled = gmm_log_prob(
            GaussianMixture([Tensor(mus[i]) for i in perm],
                            [Tensor(lss[i]) for i in perm],
                            Tensor(logits[:, perm])), Tensor(x)).item()
        assert shuffled == pytest.approx(base, abs=1e-12)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(10)
        gmm = GaussianMixture([Tensor(rng.normal(size=(2, 2))) for _ in range(5)],
                              [Tensor(rng.uniform(-1, 0, (2, 2))) for _ in range(5)],
                              Tensor(rng.normal(size=(2, 5))))
        np.testing.assert_allclose(gmm.weights_np().sum(axis=1), 1.0, atol=1e-12)

    def test_mode_returns_top_component_mean(self):
        mus = [Tensor([[1.0, 1.0]]), Tensor([[5.0, -5.0]])]
        lss = [Tensor([[0.0, 0.0]])] * 2
        gmm = GaussianMixture(mus, lss, Tensor([[0.0, 2.0]]))
        np.testing.assert_array_equal(gmm.mode_np(), [[5.0, -5.0]])


class TestCrossEntropy:
    def test_uniform_logits_give_ln3(self):
        logits = Tensor(np.zeros((1, 3)))
        assert cross_entropy(logits, [0]).item() == pytest.approx(math.log(3.0), abs=1e-12)

    def test_confident_correct_is_near_zero(self):
        logits = Tensor(np.array([[20.0, -20.0, -20.0]]))
        assert cross_entropy(logits, [0]).item() == pytest.approx(0.0, abs=1e-12)

    def test_matches_softmax_log_oracle(self):
        rng = np.random.default_rng(12)
        logits = rng.normal(size=(6, 3))
        labels = rng.integers(0, 3, size=6)
        oracle = -np.log(softmax_np(logits)[np.arange(6), labels]).mean()
        got = cross_entropy(Tensor(logits), labels).item()
        assert got == pytest.approx(oracle, abs=1e-12)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(13)
        spec = MlpSpec(4, (6,), 2)
        store = ParamStore()
        init_mlp(store, "net", spec, rng)
        x = rng.normal(size=(5, 4))
        for _ in range(3):
            store.zero_grads()
            forward_mlp(store, "net", spec, Tensor(x)).square().mean().backward()
            store.adam_step()
        path = tmp_path / "ckpt.npz"
        store.save(path, meta={"spec": spec.to_json()})
        loaded, meta = ParamStore.load(path)
        assert MlpSpec.from_json(meta["spec"]) == spec
        assert loaded.step_count == store.step_count
        for name in store.names():
            np.testing.assert_array_equal(loaded[name].data, store[name].data)
            np.testing.assert_array_equal(loaded._m[name], store._m[name])
            np.testing.assert_array_equal(loaded._v[name], store._v[name])

    def test_params_hash_tracks_content(self):
        store = ParamStore()
        store.add("enc/w0", np.ones((2, 2)))
        h1 = store.params_hash("enc")
        store["enc/w0"].data[0, 0] = 2.0
        assert store.params_hash("enc") != h1


class TestDistributionGradients:
    """Finite-difference checks of the probability primitives' gradients."""

    @pytest.mark.parametrize("seed", range(3))
    def test_gmm_nll_gradcheck(self, seed):
        rng = np.random.default_rng(100 + seed)
        store = ParamStore()
        M, d, B = 3, 2, 4
        for m in range(M):
            store.add(f"mu{m}", rng.normal(size=(1, d)))
            store.add(f"ls{m}", rng.uniform(-1, 0, (1, d)))
        store.add("logits", rng.normal(size=(1, M)))
        x = rng.normal(size=(B, d))

        def build():
            ones = Tensor(np.ones((B, 1)))
            mus = [ones.matmul(store[f"mu{m}"]) for m in range(M)]
            lss = [ones.matmul(store[f"ls{m}"]) for m in range(M)]
            logits = ones.matmul(store["logits"])
            return GaussianMixture(mus, lss, logits)

        def loss_fn():
            return float((-build().log_prob(Tensor(x))).mean().data)

        store.zero_grads()
        (-build().log_prob(Tensor(x))).mean().backward()
        fd = finite_diff_grads(store, loss_fn)
        for name in store.names():
            assert grad_rel_error(store[name].grad, fd[name]) < 1e-4, name

    def test_kl_gradcheck(self):
        rng = np.random.default_rng(200)
        store = ParamStore()
        store.add("qm", rng.normal(size=(2, 3)))
        store.add("ql", rng.uniform(-1, 0, (2, 3)))
        store.add("pm", rng.normal(size=(2, 3)))
        store.add("pl", rng.uniform(-1, 0, (2, 3)))

        def loss_fn():
            q = DiagGaussian(store["qm"], store["ql"])
            p = DiagGaussian(store["pm"], store["pl"])
            return float(gaussian_kl(q, p).mean().data)

        store.zero_grads()
        q = DiagGaussian(store["qm"], store["ql"])
        p = DiagGaussian(store["pm"], store["pl"])
        gaussian_kl(q, p).mean().backward()
        fd = finite_diff_grads(store, loss_fn)
        for name in store.names():
            assert grad_rel_error(store[name].grad, fd[name]) < 1e-4, name
