import numpy as np
import pytest

from src.estimators import (
    AdapoControllerState,
    ZetaControllerState,
    adapo_controller_step,
    grpo_advantages,
    repo_advantage_general,
    repo_d_beta,
    repo_r_advantage,
    repo_r_advantage_centered,
    rloo_advantages,
    state_stats,
    zeta_controller_step,
)
from src.policy import TabularPolicy, action_probs, policy_gradient


class TestRloo:
    def test_example(self):
        np.testing.assert_allclose(rloo_advantages([1, 0, 0, 0]), [1, -1 / 3, -1 / 3, -1 / 3])

    def test_two_forms_agree_and_sum_to_zero(self, rng):
        for _ in range(1000):
            rewards = rng.uniform(0, 1, int(rng.integers(2, 17)))
            direct = rloo_advantages(rewards)
            scaled = rloo_advantages(rewards, form="scaled_mean")
            np.testing.assert_allclose(direct, scaled, atol=1e-12)
            assert abs(direct.sum()) < 1e-12

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            rloo_advantages([1.0])
        with pytest.raises(ValueError):
            rloo_advantages([1.0, np.inf])
        with pytest.raises(ValueError):
            rloo_advantages([1.0, 0.0], form="other")

    def test_group_gradient_is_unbiased(self, rng, bandit):
        # 非均匀策略下，组内平均 A_i·score(a_i) 的期望等于精确策略梯度
        policy = TabularPolicy(np.array([[1.2, -0.4, 0.3, -1.0, 0.6]]))
        probs = action_probs(policy, 0)
        rewards_by_arm = np.asarray(bandit.arm_rewards)
        groups, k = 100_000, 4
        actions = rng.choice(bandit.num_actions, size=(groups, k), p=probs)
        estimates = np.empty((groups, bandit.num_actions))
        for g in range(groups):
            advantages = rloo_advantages(rewards_by_arm[actions[g]])
            scores = np.eye(bandit.num_actions)[actions[g]] - probs
            estimates[g] = advantages @ scores / k
        exact = policy_gradient(policy, 0, rewards_by_arm)
        std_error = estimates.std(axis=0, ddof=1) / np.sqrt(groups)
        assert np.all(np.abs(estimates.mean(axis=0) - exact) < 4 * std_error)


class TestGrpo:
    def test_population_std(self):
        np.testing.assert_allclose(grpo_advantages([1, 0]), [1, -1])

    def test_sample_std(self):
        np.testing.assert_allclose(grpo_advantages([1, 0], sample_std=True), [np.sqrt(0.5), -np.sqrt(0.5)])

    def test_degenerate_group_is_filtered(self):
        assert grpo_advantages([0.1] * 8) is None
        assert grpo_advantages([1.0, 1.0]) is None

    def test_zero_mean_unit_std(self, rng):
        advantages = grpo_advantages(rng.uniform(0, 1, 8))
        assert advantages.mean() == pytest.approx(0.0, abs=1e-12)
        assert advantages.std() == pytest.approx(1.0, abs=1e-12)


class TestRepoD:
    def test_example_value(self):
        policy = TabularPolicy(np.log([[0.25, 0.75]]))
        stats = state_stats(policy, 0, [-1.0, 1.0])
        assert repo_d_beta(stats, 1.0) == pytest.approx(0.1544923531, abs=1e-9)

    def test_constant_advantage_gives_zero(self, random_policy):
        stats = state_stats(random_policy(num_actions=5), 0, np.full(5, 3.0))
        assert repo_d_beta(stats, 0.5) == pytest.approx(0.0, abs=1e-15)

    def test_sign_follows_zeta(self):
        policy = TabularPolicy(np.log([[0.25, 0.75]]))
        stats = state_stats(policy, 0, [-1.0, 1.0])
        assert repo_d_beta(stats, 2.0) > 0
        assert repo_d_beta(stats, -2.0) < 0
        assert repo_d_beta(stats, 0.0) == 0.0

    def test_missing_stats(self):
        with pytest.raises(ValueError):
            repo_d_beta(None, 1.0)

    def test_general_form(self):
        np.testing.assert_allclose(repo_advantage_general([1.0, -1.0], [0.5, -0.5], 2.0), [0.0, 0.0])


class TestRepoR:
    def test_examples(self):
        assert repo_r_advantage(1.0, -1.0, 0.1) == pytest.approx(1.1)
        assert repo_r_advantage(-1.0, -1.0, 0.1) == pytest.approx(-0.9)
        assert repo_r_advantage(0.0, -3.0, 0.1) == 0.0

    def test_clamped_at_zero(self):
        assert repo_r_advantage(-1.0, -20.0, 0.1) == 0.0
        assert repo_r_advantage(1.0, -20.0, -0.1) == 0.0

    def test_never_flips_sign(self, rng):
        advantages = rng.normal(size=5000)
        logp = -rng.exponential(3.0, size=5000)
        for zeta in (-0.05, 1e-3, 0.05, 1.0):
            modified = repo_r_advantage(advantages, logp, zeta)
            assert np.all(modified * advantages >= 0)

    def test_rejects_positive_logprob(self):
        with pytest.raises(ValueError):
            repo_r_advantage(1.0, 0.1, 0.01)

    def test_centered_variant_accepts_positive_psi(self):
        assert repo_r_advantage_centered(1.0, 0.5, 0.1) == pytest.approx(0.95)


class TestZetaController:
    @pytest.mark.parametrize(
        "zeta, entropy, expected",
        [
            (0.01, 2.0, 0.01 / 2),
            (1.5e-4, 2.0, -1e-4),
            (-1e-3, 2.0, -2e-3),
            (-0.04, 2.0, -0.05),
            (0.01, 0.5, 0.02),
            (0.04, 0.5, 0.05),
            (-0.01, 0.5, -0.01 / 2),
            (-1.5e-4, 0.5, 1e-4),
            (0.01, 1.0, 0.01),
        ],
    )
    def test_branches(self, zeta, entropy, expected):
        state = ZetaControllerState(zeta, 1e-4, 0.05, target_entropy=1.0)
        assert zeta_controller_step(state, entropy).zeta == expected

    def test_repo_d_bounds(self):
        state = ZetaControllerState.for_repo_d(1e-3)
        state = zeta_controller_step(ZetaControllerState(state.zeta, state.zeta_min, state.zeta_max, 1.0), 2.0)
        assert state.zeta == -1e-3

    def test_requires_target(self):
        with pytest.raises(ValueError):
            zeta_controller_step(ZetaControllerState(), 1.0)

    def test_rejects_out_of_range_zeta(self):
        with pytest.raises(ValueError):
            ZetaControllerState(1.0, 1e-4, 0.05)

    def test_random_walk_stays_in_bounds(self, rng):
        state = ZetaControllerState(1e-3, 1e-4, 0.05, target_entropy=1.0)
        for entropy in rng.uniform(0, 2, 1000):
            state = zeta_controller_step(state, entropy)
            assert 1e-4 <= abs(state.zeta) <= 0.05


class TestAdapoController:
    def test_grows_when_entropy_low(self):
        state = adapo_controller_step(AdapoControllerState(target_entropy=1.0), 0.5)
        assert state.eps_high == pytest.approx(0.294)
        assert state.eps_low == 0.2

    def test_clamps(self):
        assert adapo_controller_step(AdapoControllerState(eps_high=0.31, target_entropy=1.0), 0.5).eps_high == 0.32
        assert adapo_controller_step(AdapoControllerState(eps_high=0.21, target_entropy=1.0), 1.5).eps_high == 0.2

    def test_unchanged_at_target(self):
        assert adapo_controller_step(AdapoControllerState(target_entropy=1.0), 1.0).eps_high == 0.28

    def test_random_walk_stays_in_bounds(self, rng):
        state = AdapoControllerState(target_entropy=1.0)
        for entropy in rng.uniform(0, 2, 1000):
            state = adapo_controller_step(state, entropy)
            assert 0.2 <= state.eps_high <= 0.32

    def test_requires_target(self):
        with pytest.raises(ValueError):
            adapo_controller_step(AdapoControllerState(), 1.0)
