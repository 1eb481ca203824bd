import numpy as np
import pytest
from pydantic import ValidationError
from sklearn.linear_model import Ridge

from agents import RandomPolicy
from environment import sample_counterfactual_arms, sample_demo_zs, sample_trajectories
from errors import ConfigurationError, DomainError, SizeError, UnsupportedModeError
from func_approx import RegressorSpec, build_features
from preprocessor import (
    FittedPreprocessor,
    PreprocessorConfig,
    assign_folds,
    augmented_state_labels,
    preprocessed_batch,
    train_preprocessor,
)
from trajectory_io import TrajectoryBatch

LINEAR = RegressorSpec(model_type="linear")
BINARY_Z = ((0.0,), (1.0,))


def _config(**overrides):
    settings = dict(z_space=BINARY_Z, num_actions=2, reg_spec=LINEAR)
    settings.update(overrides)
    return PreprocessorConfig(**settings)


def _step_through(fitted, zs, states, actions):
    n, horizon = actions.shape
    out = np.empty((n, horizon + 1, fitted.state_width))
    for i in range(n):
        out[i, 0] = fitted.preprocess_step(zs[i], 0, states[i, 0])
        for t in range(1, horizon + 1):
            out[i, t] = fitted.preprocess_step(zs[i], t, states[i, t], out[i, t - 1], actions[i, t - 1])
    return out


def test_single_z_value_is_identity(demo_env):
    zs = np.zeros((30, 1))
    batch = sample_trajectories(demo_env, zs, RandomPolicy(2), T=3, seed=1)
    _, states_tilde, rewards_tilde = train_preprocessor(_config(z_space=((0.0,),)), batch)

    np.testing.assert_array_equal(states_tilde, batch.states)
    np.testing.assert_array_equal(rewards_tilde, batch.rewards)


@pytest.mark.parametrize("cross_folds", [1, 4])
def test_own_block_is_the_observed_state(demo_batch, cross_folds):
    fitted, states_tilde, _ = train_preprocessor(_config(cross_folds=cross_folds), demo_batch)
    assert states_tilde.shape == (100, 6, 2)
    own = demo_batch.zs[:, 0].astype(int)
    np.testing.assert_array_equal(states_tilde[np.arange(100), :, own], demo_batch.states[:, :, 0])


def test_two_individuals_swap_counterfactuals():
    # two exact-fit points: each individual's counterfactual is the other's trajectory
    batch = TrajectoryBatch(
        zs=[[0.0], [1.0]],
        states=[[0.2, 0.9], [1.1, -0.4]],
        actions=[[1], [1]],
        rewards=[[0.3], [1.7]],
    )
    config = _config(reg_spec=RegressorSpec(model_type="linear", ridge=0.0))
    _, states_tilde, rewards_tilde = train_preprocessor(config, batch)

    expected = np.array([[[0.2, 1.1], [0.9, -0.4]], [[0.2, 1.1], [0.9, -0.4]]])
    np.testing.assert_allclose(states_tilde, expected, atol=1e-8)
    np.testing.assert_allclose(rewards_tilde, [[1.0], [1.0]], atol=1e-8)


def test_default_ridge_fit_matches_an_independent_ridge_oracle():
    zs = np.array([[0.0], [1.0], [0.0], [1.0], [0.0], [1.0], [0.0], [1.0]])
    x0 = np.array([0.3, 1.2, -0.4, 0.8, 0.1, 1.9, -0.7, 0.5])
    x1 = np.array([0.9, 0.2, -0.1, 1.4, 0.6, 0.3, -0.2, 1.1])
    actions = np.array([0, 1, 1, 0, 0, 1, 1, 0])
    rewards = np.array([0.5, -0.3, 1.2, 0.7, -0.1, 0.4, 0.9, -0.6])
    batch = TrajectoryBatch(
        zs=zs, states=np.stack([x0, x1], axis=1), actions=actions[:, None], rewards=rewards[:, None]
    )
    _, states_tilde, rewards_tilde = train_preprocessor(_config(), batch)

    def ridge(X, y):
        return Ridge(alpha=LINEAR.ridge).fit(X, y).predict

    initial = ridge(zs, x0)
    observed = build_features(zs, x0[:, None], actions, 2)
    transition, reward = ridge(observed, x1), ridge(observed, rewards)
    expected_states = np.empty((8, 2, 2))
    expected_rewards = np.zeros(8)
    for j, z in enumerate((0.0, 1.0)):
        z_col = np.full((8, 1), z)
        cf_x0 = initial(z_col) + x0 - initial(zs)
        cf_features = build_features(z_col, cf_x0[:, None], actions, 2)
        own = zs[:, 0] == z
        expected_states[:, 0, j] = np.where(own, x0, cf_x0)
        expected_states[:, 1, j] = np.where(own, x1, transition(cf_features) + x1 - transition(observed))
        expected_rewards += 0.5 * np.where(own, rewards, reward(cf_features) + rewards - reward(observed))

    np.testing.assert_allclose(states_tilde, expected_states, atol=1e-8)
    np.testing.assert_allclose(rewards_tilde[:, 0], expected_rewards, atol=1e-8)


def test_stepwise_matches_batch(demo_env, demo_batch):
    fitted, _, _ = train_preprocessor(_config(), demo_batch)
    fresh = sample_trajectories(demo_env, sample_demo_zs(15, seed=21), RandomPolicy(2), T=5, seed=22)

    batch_out, _ = fitted.preprocess_batch(fresh)
    stepwise = _step_through(fitted, fresh.zs, fresh.states, fresh.actions)
    np.testing.assert_allclose(stepwise, batch_out, atol=1e-10)


def test_histories_longer_than_training_horizon(demo_env, demo_batch):
    fitted, _, _ = train_preprocessor(_config(), demo_batch)
    longer = sample_trajectories(demo_env, sample_demo_zs(5, seed=3), RandomPolicy(2), T=8, seed=4)
    states_tilde, rewards_tilde = fitted.preprocess_batch(longer)
    assert states_tilde.shape == (5, 9, 2)
    assert rewards_tilde.shape == (5, 8)
    assert np.all(np.isfinite(states_tilde))


def test_reordering_z_space_permutes_blocks(demo_batch):
    _, forward, rewards_forward = train_preprocessor(_config(), demo_batch)
    _, backward, rewards_backward = train_preprocessor(_config(z_space=BINARY_Z[::-1]), demo_batch)

    np.testing.assert_allclose(backward[..., ::-1], forward, atol=1e-10)
    np.testing.assert_allclose(rewards_backward, rewards_forward, atol=1e-10)


def test_cross_fit_bookkeeping(demo_batch):
    fitted, states_tilde, rewards_tilde = train_preprocessor(_config(cross_folds=3, fold_seed=5), demo_batch)

    assert fitted.num_folds == 3
    sizes = np.bincount(fitted.fold_assignment)
    assert sizes.max() - sizes.min() <= 1
    assert len(fitted.fit_reports) == 3 * (1 + 2 * demo_batch.T)

    members = np.flatnonzero(fitted.fold_assignment == 0)
    training = fitted.training_indices(0)
    assert np.intersect1d(members, training).size == 0
    assert len(members) + len(training) == demo_batch.N

    # held-out individuals are preprocessed by models that never saw them
    fold_only, _, _ = train_preprocessor(_config(), demo_batch.subset(training))
    held_out = demo_batch.subset(members)
    expected_states, expected_rewards = fold_only.preprocess_batch(held_out)
    np.testing.assert_allclose(states_tilde[members], expected_states, atol=1e-10)
    np.testing.assert_allclose(rewards_tilde[members], expected_rewards, atol=1e-10)


def test_training_batch_returns_cross_fitted_outputs(demo_batch):
    fitted, states_tilde, rewards_tilde = train_preprocessor(_config(cross_folds=2), demo_batch)
    again_states, again_rewards = fitted.preprocess_batch(demo_batch)
    np.testing.assert_array_equal(again_states, states_tilde)
    np.testing.assert_array_equal(again_rewards, rewards_tilde)


def test_fold_assignment_is_seeded():
    np.testing.assert_array_equal(assign_folds(20, 4, seed=1), assign_folds(20, 4, seed=1))
    assert not np.array_equal(assign_folds(20, 4, seed=1), assign_folds(20, 4, seed=2))
    with pytest.raises(SizeError):
        assign_folds(3, 4, seed=0)


def test_true_models_give_twins_identical_states(demo_env):
    initial, transition, reward = demo_env.mean_models()
    oracle = FittedPreprocessor.from_models(_config(), 1, initial, transition, reward)

    rng = np.random.default_rng(7)
    noise = rng.normal(0.0, 0.25, size=(40, 1))
    z_arms = [np.zeros((40, 1)), np.ones((40, 1))]
    x0_arms = [demo_env.initial_states(z, noise) for z in z_arms]
    arm0, arm1 = sample_counterfactual_arms(demo_env, z_arms, x0_arms, RandomPolicy(2), T=4, seed=8)
    np.testing.assert_array_equal(arm0.actions, arm1.actions)

    states0, rewards0 = oracle.preprocess_batch(arm0)
    states1, rewards1 = oracle.preprocess_batch(arm1)
    np.testing.assert_allclose(states0, states1, atol=1e-10)
    np.testing.assert_allclose(rewards0, rewards1, atol=1e-10)


def test_marginal_reward_weights(demo_batch):
    fitted, _, _ = train_preprocessor(_config(reward_weighting="marginal"), demo_batch)
    share = demo_batch.zs[:, 0].mean()
    np.testing.assert_allclose(fitted.z_weights, [1 - share, share])
    uniform, _, _ = train_preprocessor(_config(), demo_batch)
    np.testing.assert_allclose(uniform.z_weights, [0.5, 0.5])


def test_save_and_load(tmp_path, demo_env, demo_batch):
    fitted, states_tilde, _ = train_preprocessor(_config(cross_folds=2), demo_batch)
    path = tmp_path / "preprocessor.npz"
    fitted.save(path)
    loaded = FittedPreprocessor.load(path)

    fresh = sample_trajectories(demo_env, sample_demo_zs(10, seed=2), RandomPolicy(2), T=5, seed=3)
    np.testing.assert_array_equal(loaded.preprocess_batch(fresh)[0], fitted.preprocess_batch(fresh)[0])
    np.testing.assert_array_equal(loaded.preprocess_batch(demo_batch)[0], states_tilde)
    assert loaded.config == fitted.config
    np.testing.assert_array_equal(loaded.fold_assignment, fitted.fold_assignment)


def test_unknown_mode_is_rejected(demo_batch):
    with pytest.raises(UnsupportedModeError):
        train_preprocessor(_config(mode="separate"), demo_batch)


def test_z_outside_z_space(demo_batch):
    with pytest.raises(DomainError):
        train_preprocessor(_config(z_space=((0.0,), (2.0,))), demo_batch)


def test_more_folds_than_individuals(small_batch):
    with pytest.raises(SizeError):
        train_preprocessor(_config(cross_folds=4), small_batch)


def test_config_rejects_bad_z_space():
    with pytest.raises(ValidationError):
        _config(z_space=())
    with pytest.raises(ValidationError):
        _config(z_space=((0.0,), (0.0,)))
    with pytest.raises(ValidationError):
        _config(z_space=((0.0,), (1.0, 1.0)))


def test_step_arguments_must_match_time(demo_batch):
    fitted, _, _ = train_preprocessor(_config(), demo_batch)
    with pytest.raises(ConfigurationError):
        fitted.preprocess_step([0.0], 1, [0.3])
    with pytest.raises(ConfigurationError):
        fitted.preprocess_step([0.0], 0, [0.3], np.zeros(2), 1)


def test_preprocessed_batch_labels(demo_batch):
    _, states_tilde, rewards_tilde = train_preprocessor(_config(), demo_batch)
    out = preprocessed_batch(demo_batch, states_tilde, rewards_tilde)
    assert out.state_labels == augmented_state_labels(["state1"], 2) == ("state1_cf0", "state1_cf1")
    assert out.d_x == 2
