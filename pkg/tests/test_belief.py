import numpy as np
import pytest
from numpy.testing import assert_allclose

from dualsmpc.belief import (
    BeliefError, BeliefState, categorical_entropy, combined_covariance,
    estimate_theta_bar, gaussian_entropy, hybrid_entropy,
    measurement_update_mode, measurement_update_theta, propagate,
    state_likelihood, time_update, uniform_belief,
)

from synthetic import default_belief, scalar_human_world


def two_mode_world(**kw):
    return scalar_human_world({"l": 1.0, "r": -1.0}, **kw)


class TestCombinedCovariance:
    def test_zero_theta_bar_returns_sigma_d(self):
        joint, _, obs = two_mode_world(sigma=0.3)
        cov = combined_covariance(obs, np.zeros(2), np.zeros(1), np.zeros(1), "l")
        assert_allclose(cov, joint.sigma_d, atol=1e-15)

    def test_scalar_hand_value(self):
        # sigma_d = 0.1, Laplace variance 0.4, theta_bar = 1, BH column = e_2:
        # human block gets 0.1 + 0.4 = 0.5
        _, _, obs = scalar_human_world({"l": 0.0}, sigma=np.sqrt(0.1),
                                       beta=2.5)  # cov = 1/(1*2.5) = 0.4
        cov = combined_covariance(obs, np.zeros(2), np.zeros(1), np.ones(1), "l")
        assert_allclose(cov[1, 1], 0.5, atol=1e-12)
        assert_allclose(cov[0, 0], 0.1, atol=1e-12)

    def test_loewner_dominates_sigma_d(self):
        joint, _, obs = two_mode_world()
        cov = combined_covariance(obs, np.zeros(2), np.zeros(1),
                                  np.array([1.3]), "r")
        assert np.min(np.linalg.eigvalsh(cov - joint.sigma_d)) >= -1e-12


class TestStateLikelihood:
    def test_density_at_mean_is_normalizing_constant(self):
        _, _, obs = two_mode_world(sigma=0.5)
        x, uR, theta = np.zeros(2), np.array([0.2]), np.array([0.7])
        base, BH = obs.prediction_parts(x, uR)
        U = obs.basis_means("l", x, uR)
        mean = base + BH @ U @ theta
        cov = combined_covariance(obs, x, uR, theta, "l")
        val = state_likelihood(obs, mean, x, uR, theta, "l")
        expected = 1.0 / np.sqrt((2 * np.pi) ** 2 * np.linalg.det(cov))
        assert_allclose(val, expected, rtol=1e-12)

    def test_integrates_to_one_on_grid(self):
        # integrate over x_next around the predicted mean (2-D grid)
        _, _, obs = two_mode_world(sigma=0.4, beta=8.0)
        x, uR, theta = np.zeros(2), np.zeros(1), np.array([1.0])
        base, BH = obs.prediction_parts(x, uR)
        mean = base + BH @ obs.basis_means("l", x, uR) @ theta
        g = np.linspace(-3, 3, 121)
        total = 0.0
        for dx0 in g:
            for dx1 in g:
                total += state_likelihood(obs, mean + np.array([dx0, dx1]),
                                          x, uR, theta, "l")
        total *= (g[1] - g[0]) ** 2
        assert abs(total - 1.0) < 1e-3

    def test_likelihood_ratio_matches_hand_gaussian(self):
        _, _, obs = two_mode_world(sigma=0.5)
        x, uR = np.zeros(2), np.zeros(1)
        x_next = np.array([0.1, 0.4])
        t1, t2 = np.array([1.0]), np.array([0.2])
        tb = np.array([0.5])
        base, BH = obs.prediction_parts(x, uR)
        U = obs.basis_means("l", x, uR)
        cov = combined_covariance(obs, x, uR, tb, "l")
        r1 = x_next - base - BH @ U @ t1
        r2 = x_next - base - BH @ U @ t2
        Sinv = np.linalg.inv(cov)
        expected = np.exp(-0.5 * (r1 @ Sinv @ r1 - r2 @ Sinv @ r2))
        got = (state_likelihood(obs, x_next, x, uR, t1, "l", theta_bar=tb)
               / state_likelihood(obs, x_next, x, uR, t2, "l", theta_bar=tb))
        assert_allclose(got, expected, rtol=1e-12)


class TestThetaUpdate:
    def test_uninformative_observation_keeps_prior(self):
        # theta never moves the observation when every basis mean is zero in
        # all modes and the human input matrix is multiplied by U = 0.
        _, _, obs = scalar_human_world({"l": 0.0}, b=0.0, c=(0.0, 0.0))
        b = default_belief(obs)
        # a = 0, b = 0, c = 0 -> U = 0 for every (x, uR)
        mu, cov = measurement_update_theta(obs, b, np.array([0.3, -0.2]),
                                           np.zeros(2), np.zeros(1), "l")
        assert_allclose(mu, b.means[0], atol=1e-14)
        assert_allclose(cov, b.covariances[0], atol=1e-14)

    def test_scalar_conjugate_hand_update(self):
        # prior N(0,1), unit observation map, unit noise, innovation 1
        # -> posterior N(0.5, 0.5); checked against the hand formulas.
        from dualsmpc.belief import theta_update_kernel
        mu, cov = theta_update_kernel(
            np.zeros(1), np.eye(1), np.eye(1), np.eye(1), np.ones(1))
        assert_allclose(mu, [0.5], atol=1e-14)
        assert_allclose(cov, [[0.5]], atol=1e-14)

    def test_information_form_identity(self):
        rng = np.random.default_rng(3)
        _, _, obs = two_mode_world(sigma=0.3)
        b = default_belief(obs, mean=0.2, var=2.0)
        for _ in range(50):
            x = rng.normal(size=2)
            uR = rng.normal(size=1)
            x_next = rng.normal(size=2)
            mu, cov = measurement_update_theta(obs, b, x_next, x, uR, "l")
            base, BH = obs.prediction_parts(x, uR)
            H = BH @ obs.basis_means("l", x, uR)
            Sd = combined_covariance(obs, x, uR, b.means[0], "l")
            info = (np.linalg.inv(b.covariances[0])
                    + H.T @ np.linalg.solve(Sd, H))
            assert_allclose(info @ cov, np.eye(1), atol=1e-10)
            rhs = H.T @ np.linalg.solve(Sd, x_next - base) \
                + np.linalg.solve(b.covariances[0], b.means[0])
            assert_allclose(mu, cov @ rhs, atol=1e-10)

    def test_covariance_shrinks_in_loewner_order(self):
        rng = np.random.default_rng(11)
        _, _, obs = two_mode_world()
        for _ in range(200):
            var = rng.uniform(0.1, 5.0)
            b = default_belief(obs, mean=rng.normal(), var=var)
            x = rng.normal(size=2)
            x_next = rng.normal(size=2)
            uR = rng.normal(size=1)
            _, cov = measurement_update_theta(obs, b, x_next, x, uR, "r")
            assert np.min(np.linalg.eigvalsh(b.covariances[1] - cov)) >= -1e-10

    def test_dirac_prior_passes_through(self):
        _, _, obs = two_mode_world()
        b = BeliefState(modes=obs.modes, means=np.array([[0.7], [0.7]]),
                        covariances=np.zeros((2, 1, 1)),
                        probabilities=np.array([0.5, 0.5]))
        mu, cov = measurement_update_theta(obs, b, np.ones(2), np.zeros(2),
                                           np.zeros(1), "l")
        assert_allclose(mu, [0.7], atol=1e-14)
        assert_allclose(cov, 0.0, atol=1e-14)

    def test_paper_prior_accepted(self):
        _, _, obs = two_mode_world()
        b = default_belief(obs, mean=0.5, var=5.0)
        assert_allclose(b.means, 0.5)
        assert_allclose(b.covariances[0], 5.0 * np.eye(1))


class TestModeUpdate:
    def test_equal_likelihoods_keep_prior(self):
        # both modes predict identically when their Q offsets coincide
        _, _, obs = scalar_human_world({"l": 0.6, "r": 0.6})
        b = default_belief(obs, probs=[0.3, 0.7])
        p, degenerate = measurement_update_mode(obs, b, np.array([0.2, 0.5]),
                                                np.zeros(2), np.zeros(1))
        assert not degenerate
        assert_allclose(p, [0.3, 0.7], atol=1e-12)

    def test_zero_prior_mode_stays_zero(self):
        _, _, obs = two_mode_world()
        b = default_belief(obs, probs=[1.0, 0.0])
        p, _ = measurement_update_mode(obs, b, np.array([0.5, 1.2]),
                                       np.zeros(2), np.zeros(1))
        assert p[1] == 0.0
        assert_allclose(p.sum(), 1.0, atol=1e-12)

    def test_three_to_one_ratio_gives_三quarters(self):
        from dualsmpc.belief import mode_loglik_kernel
        # hand-pick the innovation so the marginal likelihood ratio is 3:1
        S = np.eye(1)
        d = 1.0
        y = (d * d - 2 * np.log(3.0)) / (2 * d)
        l1 = mode_loglik_kernel(np.zeros(1), np.zeros((1, 1)), np.eye(1), S,
                                np.array([y]))
        l2 = mode_loglik_kernel(np.array([d]), np.zeros((1, 1)), np.eye(1), S,
                                np.array([y]))
        assert_allclose(np.exp(l1 - l2), 3.0, rtol=1e-12)
        w = np.exp([l1, l2])
        post = 0.5 * w / (0.5 * w).sum()
        assert_allclose(post, [0.75, 0.25], rtol=1e-12)


class TestTimeUpdate:
    def test_identity_transition(self):
        _, _, obs = two_mode_world()
        b = default_belief(obs, probs=[0.2, 0.8])
        out = time_update(b)
        assert_allclose(out.means, b.means)
        assert_allclose(out.covariances, b.covariances)
        assert_allclose(out.probabilities, b.probabilities)

    def test_diffusion_adds_q(self):
        _, _, obs = two_mode_world()
        b = default_belief(obs, var=2.0)
        out = time_update(b, q_theta=0.01)
        assert_allclose(out.covariances, b.covariances + 0.01 * np.eye(1),
                        atol=1e-15)

    def test_uniform_mixing_rate(self):
        _, _, obs = two_mode_world()
        b = default_belief(obs, probs=[1.0, 0.0])
        out = time_update(b, mix=0.05)
        assert_allclose(out.probabilities, [0.975, 0.025], atol=1e-15)


class TestPropagate:
    def test_uninformative_plus_identity_keeps_belief(self):
        _, _, obs = scalar_human_world({"l": 0.0, "r": 0.0}, b=0.0, c=(0.0, 0.0))
        b = default_belief(obs, probs=[0.4, 0.6])
        out = propagate(obs, b, np.array([0.1, -0.7]), np.zeros(2), np.zeros(1))
        assert_allclose(out.means, b.means, atol=1e-12)
        assert_allclose(out.covariances, b.covariances, atol=1e-12)
        assert_allclose(out.probabilities, b.probabilities, atol=1e-12)

    def test_mode_entropy_decreases_in_expectation(self):
        _, behavior, obs = two_mode_world(sigma=0.3, beta=6.0)
        b = default_belief(obs, mean=0.8, var=0.5, probs=[0.5, 0.5])
        rng = np.random.default_rng(0)
        prior_entropy = categorical_entropy(b.probabilities)
        entropies = []
        x, uR = np.zeros(2), np.array([0.1])
        from dualsmpc.human import sample_human_action
        for _ in range(800):
            k = rng.choice(2, p=b.probabilities)
            mode = b.modes[k]
            theta = b.means[k] + np.sqrt(b.covariances[k][0, 0]) * rng.standard_normal(1)
            uH = sample_human_action(behavior, theta, mode, x, uR, rng,
                                     project=False)
            joint = obs.joint
            d = rng.multivariate_normal(np.zeros(2), joint.sigma_d)
            x_next = joint.step(x, uR, uH, d)
            out = propagate(obs, b, x_next, x, uR)
            entropies.append(categorical_entropy(out.probabilities))
        assert np.mean(entropies) <= prior_entropy + 0.01

    def test_example2_uniform_prior_accepted(self):
        _, _, obs = scalar_human_world({"N": 0.1, "p": 0.2, "w": 0.3, "o": 0.4})
        b = default_belief(obs, probs=[0.25, 0.25, 0.25, 0.25])
        assert_allclose(b.probabilities, 0.25, atol=1e-15)
        out = propagate(obs, b, np.array([0.1, 0.2]), np.zeros(2), np.zeros(1))
        assert_allclose(out.probabilities.sum(), 1.0, atol=1e-12)


class TestGridBayesOracle:
    def test_closed_form_matches_grid_filter(self):
        # 1-D theta, 2 modes, 20 random steps; fixed per-mode noise model
        _, behavior, obs = two_mode_world(sigma=0.5, beta=2.0, b=0.4, c=(0.1, 0.2))
        rng = np.random.default_rng(2024)
        grid = np.linspace(-12.0, 13.0, 2001)
        dg = grid[1] - grid[0]
        belief = default_belief(obs, mean=0.5, var=5.0)
        # joint grid density over (theta, mode)
        grid_post = np.stack([
            belief.probabilities[k]
            * np.exp(-0.5 * (grid - belief.means[k, 0]) ** 2
                     / belief.covariances[k, 0, 0])
            / np.sqrt(2 * np.pi * belief.covariances[k, 0, 0])
            for k in range(2)]) * dg
        grid_post /= grid_post.sum()
        x = np.zeros(2)
        for step in range(20):
            uR = rng.uniform(-1, 1, size=1)
            base, BH = obs.prediction_parts(x, uR)
            # simulate an observation from the mixture
            k_true = rng.choice(2, p=belief.probabilities)
            U = obs.basis_means(belief.modes[k_true], x, uR)
            theta_true = belief.means[k_true] + rng.standard_normal(1)
            cov_true = combined_covariance(obs, x, uR, belief.means[k_true],
                                           belief.modes[k_true])
            x_next = base + BH @ U @ theta_true \
                + rng.multivariate_normal(np.zeros(2), cov_true)
            # grid Bayes update with the same fixed per-mode noise covariance
            theta_bar = estimate_theta_bar(belief)
            for k, mode in enumerate(belief.modes):
                Uk = obs.basis_means(mode, x, uR)
                Hk = BH @ Uk
                Sk = combined_covariance(obs, x, uR, theta_bar[k], mode)
                Sinv = np.linalg.inv(Sk)
                resid = x_next[None, :] - base[None, :] - grid[:, None] * Hk[:, 0][None, :]
                liks = np.exp(-0.5 * np.einsum("ni,ij,nj->n", resid, Sinv, resid)) \
                    / np.sqrt((2 * np.pi) ** 2 * np.linalg.det(Sk))
                grid_post[k] *= liks
            grid_post /= grid_post.sum()
            # closed-form update
            belief = propagate(obs, belief, x_next, x, uR, theta_bar=theta_bar)
            closed = np.stack([
                belief.probabilities[k]
                * np.exp(-0.5 * (grid - belief.means[k, 0]) ** 2
                         / belief.covariances[k, 0, 0])
                / np.sqrt(2 * np.pi * belief.covariances[k, 0, 0])
                for k in range(2)]) * dg
            closed /= closed.sum()
            tv = 0.5 * np.abs(closed - grid_post).sum()
            assert tv < 1e-3, f"step {step}: TV {tv:.2e}"
            x = x_next


class TestDualEffectPrimitive:
    def test_posterior_trace_depends_on_control(self):
        # dU/duR != 0 -> finite-difference of tr(cov+) w.r.t. uR is nonzero
        _, _, obs = two_mode_world(b=0.5)
        b = default_belief(obs)
        x = np.zeros(2)
        x_next = np.array([0.3, 0.6])

        def trace_after(uR):
            _, cov = measurement_update_theta(obs, b, x_next, x, np.array([uR]), "l")
            return np.trace(cov)

        h = 1e-5
        d = (trace_after(0.2 + h) - trace_after(0.2 - h)) / (2 * h)
        assert abs(d) > 1e-6

    def test_no_dependence_without_control_coupling(self):
        _, _, obs = two_mode_world(b=0.0)
        b = default_belief(obs)

        def trace_after(uR):
            _, cov = measurement_update_theta(obs, b, np.ones(2), np.zeros(2),
                                              np.array([uR]), "l")
            return np.trace(cov)

        assert trace_after(0.4) == pytest.approx(trace_after(-0.4), abs=1e-15)


class TestHelpers:
    def test_estimate_theta_bar_fresh_is_prior_mean(self):
        _, _, obs = two_mode_world()
        b = default_belief(obs, mean=0.5)
        assert_allclose(estimate_theta_bar(b), 0.5)

    def test_estimate_theta_bar_dirac(self):
        _, _, obs = two_mode_world()
        b = BeliefState(modes=obs.modes, means=np.array([[2.0], [2.0]]),
                        covariances=np.zeros((2, 1, 1)),
                        probabilities=[0.5, 0.5])
        assert_allclose(estimate_theta_bar(b), 2.0)

    def test_theta_bar_moves_toward_truth_after_informative_rollout(self):
        _, behavior, obs = two_mode_world(sigma=0.1, beta=10.0)
        truth = np.array([1.3])
        belief = default_belief(obs, mean=0.5, var=5.0, probs=[1.0, 0.0])
        x = np.zeros(2)
        dist0 = abs(estimate_theta_bar(belief)[0, 0] - truth[0])
        from dualsmpc.human import simulate_human
        rng = np.random.default_rng(1)
        for _ in range(5):
            uR = np.array([0.5])
            uH = simulate_human(behavior, truth, "l", x, uR, rng)
            x_next = obs.joint.step(x, uR, uH)
            belief = propagate(obs, belief, x_next, x, uR)
            x = x_next
        dist1 = abs(estimate_theta_bar(belief)[0, 0] - truth[0])
        assert dist1 < dist0

    def test_normalization_invariant(self):
        _, _, obs = two_mode_world()
        b = default_belief(obs, probs=[0.123, 0.877])
        out = propagate(obs, b, np.array([0.7, -0.3]), np.zeros(2), np.zeros(1))
        assert abs(out.probabilities.sum() - 1.0) < 1e-12

    def test_entropy_helpers(self):
        assert categorical_entropy(np.array([1.0, 0.0])) == pytest.approx(0.0)
        # doubling a 1-D variance adds half log 2
        h1 = gaussian_entropy(np.array([[2.0]]))
        h0 = gaussian_entropy(np.array([[1.0]]))
        assert h1 - h0 == pytest.approx(0.5 * np.log(2))
        _, _, obs = two_mode_world()
        b = default_belief(obs)
        assert np.isfinite(hybrid_entropy(b))

    def test_invalid_beliefs_rejected(self):
        with pytest.raises(BeliefError):
            BeliefState(modes=("a", "b"), means=np.zeros((2, 1)),
                        covariances=np.zeros((2, 1, 1)),
                        probabilities=[-0.1, 1.1])
        with pytest.raises(BeliefError):
            BeliefState(modes=("a",), means=np.zeros((1, 2)),
                        covariances=np.array([[[1.0, 0.5], [-0.5, 1.0]]]),
                        probabilities=[1.0])
