import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, strategies as st

from vrb.errors import NumericError, PreconditionError, ShapeError
from vrb.estimator import (
    Estimator,
    EstimatorBatch,
    LatentTriple,
    Net,
    VrbConfig,
    airl_loss,
    airl_loss_and_grad,
    bottleneck_penalty,
    discriminator_log_probs,
    discriminator_prob,
    draw_batch_noise,
    encode,
    f_score,
    kl_std_normal,
    make_estimator,
    score,
    shaped_reward,
    update_estimator,
    vrb_loss,
    vrb_loss_and_grad,
)
from vrb.numcore import AdamState, MlpSpec, finite_diff_grad, rng_stream

STATE, ACTS, LATENT = 3, 2, 2


def small_estimator(seed=0, latent=LATENT, encoder_hidden=(5,), head_hidden=(5,)):
    rng = rng_stream(seed, 0)
    est = make_estimator(STATE, ACTS, rng, latent, encoder_hidden, head_hidden)
    # nonzero biases keep finite-difference probes off ReLU kinks at z = 0
    return est.with_flat(est.flat() + rng.normal(scale=0.1, size=est.n_params))


def random_batch(rng, n_e=4, n_p=4):
    bits = lambda n, k: (rng.random((n, k)) < 0.5).astype(float)
    return EstimatorBatch(rng.normal(size=(n_e, STATE)), bits(n_e, ACTS), rng.normal(size=(n_e, STATE)),
                          rng.normal(size=(n_p, STATE)), bits(n_p, ACTS), rng.normal(size=(n_p, STATE)))


def zeroed(est: Estimator, **biases) -> Estimator:
    """Every weight zero; named nets get the given output bias vector."""
    nets = {}
    for name in ("enc_g", "enc_h", "d_g", "d_h"):
        net = getattr(est, name)
        p = np.zeros_like(net.params)
        if name in biases:
            p[net.spec.layer_slices()[-1][1]] = biases[name]
        nets[name] = Net(net.spec, p)
    return Estimator(**nets, latent_dim=est.latent_dim)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


class TestKl:
    def test_standard_normal_is_exactly_zero(self):
        assert kl_std_normal(np.zeros(4), np.zeros(4)) == 0.0

    def test_unit_mean(self):
        assert kl_std_normal([1.0], [0.0]) == pytest.approx(0.5, abs=1e-15)

    def test_monte_carlo(self):
        rng = rng_stream(11, 0)
        mu, lv = rng.normal(size=2), rng.normal(scale=0.7, size=2)
        sigma = np.exp(0.5 * lv)
        z = mu + sigma * rng.standard_normal((200_000, 2))
        log_q = -0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma)
        log_p = -0.5 * z**2
        sample = np.sum(log_q - log_p, axis=1)
        se = sample.std() / np.sqrt(sample.size)
        assert abs(sample.mean() - kl_std_normal(mu, lv)) < 3 * se

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(-8, 4))
    def test_non_negative(self, mu, lv):
        assert kl_std_normal(mu, np.full(len(mu), lv)) >= 0.0

    def test_batched_sum_over_last_axis(self):
        mu = np.array([[1.0, 0.0], [0.0, 0.0]])
        np.testing.assert_allclose(kl_std_normal(mu, np.zeros((2, 2))), [0.5, 0.0])

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            kl_std_normal([np.nan], [0.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            kl_std_normal([0.0, 0.0], [0.0])


class TestMutualInformationBound:
    """Four equiprobable states, one-dimensional Gaussian encoder."""

    @staticmethod
    def quadrature_mi(mu, sigma):
        z = np.linspace(-40.0, 40.0, 160_001)
        log_dens = -0.5 * ((z[None, :] - mu[:, None]) / sigma[:, None]) ** 2 - np.log(sigma[:, None] * np.sqrt(2 * np.pi))
        log_marginal = np.logaddexp.reduce(log_dens, axis=0) - np.log(len(mu))
        integrand = np.exp(log_dens) * (log_dens - log_marginal[None, :])
        return float(np.mean(np.trapezoid(integrand, z, axis=1)))

    def test_identical_encodings_carry_no_information(self):
        mi = self.quadrature_mi(np.full(4, 0.3), np.full(4, 0.8))
        assert abs(mi) < 1e-9

    def test_bound_holds(self):
        rng = rng_stream(5, 0)
        for _ in range(10):
            mu, lv = rng.normal(scale=2.0, size=4), rng.uniform(-3, 1, size=4)
            bound = float(np.mean([kl_std_normal([m], [v]) for m, v in zip(mu, lv)]))
            assert self.quadrature_mi(mu, np.exp(0.5 * lv)) <= bound + 1e-6


class TestShapedReward:
    def test_examples(self):
        assert shaped_reward(0.0, 0.0) == 0.0
        assert shaped_reward(1.0, -1.0) == 2.0

    def test_identity_in_log_space(self):
        rng = rng_stream(2, 0)
        f, lp = rng.normal(scale=20, size=10_000), -rng.exponential(10, size=10_000)
        log_d, log_1md = discriminator_log_probs(f, lp)
        np.testing.assert_allclose(log_d - log_1md, shaped_reward(f, lp), rtol=0, atol=1e-9)

    def test_identity_from_probability(self):
        # moderate log-odds so 1 - D keeps enough significant digits
        rng = rng_stream(3, 0)
        lp = -rng.exponential(3, size=5_000)
        f = lp + rng.uniform(-10, 10, size=5_000)
        d = discriminator_prob(f, lp)
        np.testing.assert_allclose(np.log(d) - np.log1p(-d), shaped_reward(f, lp), rtol=0, atol=1e-9)


class TestDiscriminatorProb:
    def test_symmetry_point(self):
        assert discriminator_prob(-1.3, -1.3) == 0.5

    def test_saturation_stays_open(self):
        d = discriminator_prob(-2.0 + 100.0, -2.0)
        assert 1.0 - 1e-12 < d < 1.0
        lo = discriminator_prob(-1e6, 0.0)
        assert 0.0 < lo < 1e-300


class TestEncode:
    def test_zero_encoder_zero_noise(self):
        est = zeroed(small_estimator())
        lat = encode(est, np.ones((2, STATE)), np.ones((2, STATE)), np.ones((2, ACTS)), noise=np.zeros((3, 2, LATENT)))
        for z in (lat.z_g, lat.z_h, lat.z_next):
            np.testing.assert_array_equal(z, 0.0)

    def test_deterministic_given_rng(self):
        est = small_estimator()
        x, a = np.ones((3, STATE)), np.ones((3, ACTS))
        one = encode(est, x, x, a, rng=rng_stream(1, 4))
        two = encode(est, x, x, a, rng=rng_stream(1, 4))
        np.testing.assert_array_equal(one.noise, two.noise)
        np.testing.assert_array_equal(one.z_g, two.z_g)

    def test_reparameterization_jacobian(self):
        # linear encoder with zero weights: (mu, log-variance) is the output bias
        est = small_estimator(encoder_hidden=())
        eps = np.array([[[0.7, -1.2]], [[0.3, 0.1]], [[-0.4, 2.0]]])
        bias_sl = est.enc_g.spec.layer_slices()[-1][1]
        base = np.zeros(est.enc_g.spec.n_params)
        base[bias_sl] = [0.2, -0.5, 0.3, -0.8]

        def z_g(params):
            e = replace(est, enc_g=Net(est.enc_g.spec, params))
            return encode(e, np.zeros(STATE), np.zeros(STATE), np.zeros(ACTS), noise=eps).z_g[0]

        sigma = np.exp(0.5 * base[bias_sl][2:])
        for k in range(LATENT):
            fd = finite_diff_grad(lambda p: z_g(p)[k], base)[bias_sl]
            expect = np.zeros(2 * LATENT)
            expect[k] = 1.0
            expect[LATENT + k] = 0.5 * sigma[k] * eps[0, 0, k]
            np.testing.assert_allclose(fd, expect, atol=1e-5)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            encode(small_estimator(), np.ones(STATE + 1), np.ones(STATE), np.ones(ACTS))


def linear_heads(est: Estimator) -> Estimator:
    """D_g and D_h replaced by identity maps on a one-dimensional latent."""
    spec = MlpSpec((1, 1), activation="identity")
    ident = Net(spec, np.array([1.0, 0.0]))
    return replace(est, d_g=ident, d_h=ident.copy(), latent_dim=1)


class TestFScore:
    def lat(self, g, h, hn):
        col = lambda v: np.array([[v]])
        return LatentTriple(col(g), col(h), col(hn), (), (), np.zeros((3, 1, 1)))

    def test_zero_heads(self):
        est = zeroed(small_estimator())
        lat = encode(est, np.ones(STATE), np.ones(STATE), np.ones(ACTS))
        np.testing.assert_array_equal(f_score(est, lat, 0.99), [0.0])

    def test_hand_values(self):
        est = linear_heads(small_estimator())
        f = f_score(est, self.lat(1.0, 3.0, 2.0), 0.99)
        assert f[0] == pytest.approx(-0.02, abs=1e-12)

    def test_paper_plus_sign_switch(self):
        est = linear_heads(small_estimator())
        assert f_score(est, self.lat(1.0, 3.0, 2.0), 0.99, "paper_plus")[0] == pytest.approx(5.98, abs=1e-12)

    def test_constant_heads_telescope(self):
        est = zeroed(small_estimator(), d_g=[1.5], d_h=[4.0])
        rng = rng_stream(0, 1)
        x, xn, a = rng.normal(size=(5, STATE)), rng.normal(size=(5, STATE)), np.ones((5, ACTS))
        f = score(est, VrbConfig(gamma=1.0), x, a, xn)
        np.testing.assert_array_equal(f, 1.5)

    def test_trajectory_sum_telescopes(self):
        # gamma = 1: h-terms cancel over consecutive transitions sharing a state
        est = small_estimator(3)
        est_h_only = replace(est, d_g=zeroed(est).d_g)
        rng = rng_stream(0, 2)
        states = rng.normal(size=(7, STATE))
        x, xn, a = states[:-1], states[1:], (rng.random((6, ACTS)) < 0.5).astype(float)
        cfg = VrbConfig(gamma=1.0)
        f = score(est, cfg, x, a, xn)
        dg = score(replace(est, d_h=zeroed(est).d_h), cfg, x, a, xn)
        h = score(est_h_only, cfg, x, a, xn)
        assert np.sum(f) == pytest.approx(np.sum(dg) + h.sum(), abs=1e-12)
        ends = score(est_h_only, cfg, states[[0]], a[:1], states[[-1]])
        assert h.sum() == pytest.approx(ends[0], abs=1e-10)


class TestBottleneck:
    def test_standard_normal_encoder(self):
        est = zeroed(small_estimator())
        assert bottleneck_penalty(random_batch(rng_stream(0, 0)), est, VrbConfig()) == pytest.approx(-0.5)

    def test_single_unit_mean_head(self):
        est = zeroed(small_estimator(latent=1), enc_g=[1.0, 0.0])
        batch = random_batch(rng_stream(0, 0), n_p=1)
        assert bottleneck_penalty(batch, est, VrbConfig(latent_dim=1)) == pytest.approx(0.5 - 0.5, abs=1e-15)

    def test_duplication_invariant(self):
        est = small_estimator(4)
        b = random_batch(rng_stream(4, 0))
        dup = EstimatorBatch(b.expert_x, b.expert_a, b.expert_xn, np.vstack([b.policy_x] * 2),
                             np.vstack([b.policy_a] * 2), np.vstack([b.policy_xn] * 2))
        assert bottleneck_penalty(dup, est, VrbConfig()) == pytest.approx(bottleneck_penalty(b, est, VrbConfig()), abs=1e-12)

    def test_empty_policy_side(self):
        b = EstimatorBatch(np.ones((1, STATE)), np.ones((1, ACTS)), np.ones((1, STATE)),
                           np.zeros((0, STATE)), np.zeros((0, ACTS)), np.zeros((0, STATE)))
        with pytest.raises(PreconditionError):
            bottleneck_penalty(b, small_estimator(), VrbConfig())


class TestLosses:
    def test_identical_sides_cancel(self):
        rng = rng_stream(1, 0)
        b = random_batch(rng)
        same = EstimatorBatch(b.expert_x, b.expert_a, b.expert_xn, b.expert_x, b.expert_a, b.expert_xn)
        noise = rng.standard_normal((3, 4, LATENT))
        loss, _ = vrb_loss(same, small_estimator(), VrbConfig(phi=0.0), noise=(noise, noise))
        assert loss == 0.0
        assert airl_loss(same, small_estimator(), VrbConfig()) == 0.0

    def test_zero_kl_encoder_table_values(self):
        est = zeroed(small_estimator(), d_g=[0.0])
        est = replace(est, d_g=small_estimator(7).d_g)
        rng = rng_stream(2, 0)
        b = random_batch(rng)
        loss, diag = vrb_loss(b, est, VrbConfig(), rng=rng)
        gap = diag["mean_expert_f"] - diag["mean_policy_f"]
        # KL is zero only for mean-zero, unit-variance encodings
        assert diag["mean_policy_kl"] == 0.0
        assert loss == pytest.approx(-(gap + 0.0005), abs=1e-15)

    def test_airl_matches_noiseless_unpenalized_vrb(self):
        rng = rng_stream(3, 0)
        for seed in range(5):
            b, est = random_batch(rng), small_estimator(seed)
            zero = (np.zeros((3, 4, LATENT)),) * 2
            vrb, _ = vrb_loss(b, est, VrbConfig(phi=0.0), noise=zero)
            assert abs(vrb - airl_loss(b, est, VrbConfig())) <= 1e-12

    def test_expert_shift_is_linear(self):
        est = small_estimator(encoder_hidden=(), head_hidden=(), latent=1)
        g = np.zeros(est.enc_g.spec.n_params)
        g[STATE * 2] = 1.0  # z_g mean copies the first action bit
        est = replace(est, enc_g=Net(est.enc_g.spec, g))
        rng = rng_stream(4, 0)
        b = random_batch(rng)
        b = replace(b, expert_a=np.column_stack([np.ones(4), b.expert_a[:, 1]]),
                    policy_a=np.column_stack([np.zeros(4), b.policy_a[:, 1]]))

        def loss_with(c):
            d_g = np.array([c, 0.0])
            return airl_loss(b, replace(est, d_g=Net(est.d_g.spec, d_g)), VrbConfig())

        assert loss_with(2.5) - loss_with(0.0) == pytest.approx(-2.5, abs=1e-12)

    def test_empty_side_rejected(self):
        b = EstimatorBatch(np.zeros((0, STATE)), np.zeros((0, ACTS)), np.zeros((0, STATE)),
                           np.ones((1, STATE)), np.ones((1, ACTS)), np.ones((1, STATE)))
        with pytest.raises(PreconditionError):
            vrb_loss(b, small_estimator(), VrbConfig())

    def test_adaptive_phi_dual_step(self):
        b = random_batch(rng_stream(5, 0))
        _, diag = vrb_loss(b, small_estimator(), VrbConfig(adaptive_phi=True, phi_step=0.1))
        assert diag["phi_next"] == pytest.approx(max(0.0, 0.001 + 0.1 * (diag["mean_policy_kl"] - 0.5)))


class TestGradients:
    @pytest.mark.parametrize("seed", range(8))
    def test_vrb_loss(self, seed):
        rng = rng_stream(seed, 9)
        b, est = random_batch(rng), small_estimator(seed)
        cfg = VrbConfig(phi=0.3, latent_dim=LATENT)
        noise = draw_batch_noise(rng, b, LATENT)
        _, grad, _ = vrb_loss_and_grad(b, est, cfg, noise)
        fd = finite_diff_grad(lambda p: vrb_loss(b, est.with_flat(p), cfg, noise=noise)[0], est.flat(), 1e-6)
        assert rel_err(grad, fd) < 1e-4

    @pytest.mark.parametrize("seed", range(4))
    def test_airl_loss(self, seed):
        rng = rng_stream(seed, 10)
        b, est = random_batch(rng), small_estimator(seed)
        _, grad, _ = airl_loss_and_grad(b, est, VrbConfig())
        fd = finite_diff_grad(lambda p: airl_loss(b, est.with_flat(p), VrbConfig()), est.flat(), 1e-6)
        assert rel_err(grad, fd) < 1e-4

    def test_paper_plus_sign(self):
        rng = rng_stream(0, 11)
        b, est = random_batch(rng), small_estimator(2)
        cfg = VrbConfig(shaping_sign="paper_plus", phi=0.1)
        noise = draw_batch_noise(rng, b, LATENT)
        _, grad, _ = vrb_loss_and_grad(b, est, cfg, noise)
        fd = finite_diff_grad(lambda p: vrb_loss(b, est.with_flat(p), cfg, noise=noise)[0], est.flat(), 1e-6)
        assert rel_err(grad, fd) < 1e-4


class TestUpdate:
    def test_zero_learning_rate(self):
        est = small_estimator()
        b = random_batch(rng_stream(0, 0))
        opt = AdamState.zeros(est.n_params, learning_rate=0.0)
        _, new, _ = update_estimator(opt, est, b, VrbConfig())
        np.testing.assert_array_equal(new.flat(), est.flat())

    @pytest.mark.parametrize("seed", range(3))
    def test_single_step_descends(self, seed):
        rng = rng_stream(seed, 3)
        est, b = small_estimator(seed), random_batch(rng)
        cfg = VrbConfig()
        noise = draw_batch_noise(rng, b, LATENT)
        before, _ = vrb_loss(b, est, cfg, noise=noise)
        _, new, _ = update_estimator(AdamState.zeros(est.n_params, 1e-4), est, b, cfg, noise)
        after, _ = vrb_loss(b, new, cfg, noise=noise)
        assert after < before

    @pytest.mark.parametrize("seed", range(3))
    def test_overfits_separable_batch(self, seed):
        # one repeated transition per side, so the mean gap is a per-sample gap
        rng = rng_stream(seed, 0)
        est = small_estimator(seed)
        n = 8
        xe, xp = np.tile(rng.normal(size=STATE), (n, 1)), np.tile(rng.normal(size=STATE), (n, 1))
        b = EstimatorBatch(xe, np.tile([1.0, 0.0], (n, 1)), xe + 0.1, xp, np.tile([0.0, 1.0], (n, 1)), xp + 0.1)
        cfg = VrbConfig()
        opt = AdamState.zeros(est.n_params, learning_rate=3e-3)
        for _ in range(200):
            opt, est, _ = update_estimator(opt, est, b, cfg, draw_batch_noise(rng, b, LATENT))
        log_pi = np.log(0.25)
        assert np.all(discriminator_prob(score(est, cfg, xe, b.expert_a, b.expert_xn), log_pi) > 0.9)
        assert np.all(discriminator_prob(score(est, cfg, xp, b.policy_a, b.policy_xn), log_pi) < 0.1)

    def test_airl_variant_ignores_noise(self):
        est, b = small_estimator(), random_batch(rng_stream(1, 0))
        opt = AdamState.zeros(est.n_params, 1e-3)
        noise = draw_batch_noise(rng_stream(2, 0), b, LATENT)
        _, a, _ = update_estimator(opt, est, b, VrbConfig(), noise, variant="airl")
        _, c, _ = update_estimator(opt, est, b, VrbConfig(), None, variant="airl")
        np.testing.assert_array_equal(a.flat(), c.flat())
