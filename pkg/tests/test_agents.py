import numpy as np
import pytest

from agents import (
    ExternalPolicy,
    FQIAgent,
    RandomPolicy,
    baseline_policy,
    constant_policy,
    fqi_train,
    load_policy,
    save_policy,
    zero_q_models,
)
from environment import sample_demo_zs, sample_trajectories
from errors import ConfigurationError, DataValueError, DomainError, NonConvergenceError, NotFittedError, SizeError
from func_approx import RegressorSpec, fit
from preprocessor import PreprocessorConfig, train_preprocessor
from trajectory_io import TrajectoryBatch

GAMMA = 0.9

LINEAR = RegressorSpec(model_type="linear")


def _preprocessor(batch):
    config = PreprocessorConfig(z_space=((0.0,), (1.0,)), num_actions=2, reg_spec=LINEAR)
    return train_preprocessor(config, batch)


def test_gamma_zero_is_a_reward_regression(tabular_batch):
    agent = FQIAgent(2, LINEAR, gamma=0.0)
    report = fqi_train(agent, tabular_batch)
    assert report.iterations == 1 and report.converged

    current = tabular_batch.states[:, 0]
    for a in range(2):
        rows = tabular_batch.actions[:, 0] == a
        direct, _ = fit(LINEAR, current[rows], tabular_batch.rewards[rows, 0])
        np.testing.assert_allclose(agent.q_models[a].predict(current), direct.predict(current), atol=1e-12)


def test_fqi_matches_value_iteration(tabular_batch, tabular_oracle):
    q_star, optimal = tabular_oracle
    agent = FQIAgent(2, LINEAR, gamma=GAMMA, tolerance=1e-6, terminal_bootstrap=True)
    report = fqi_train(agent, tabular_batch, max_iter=300)
    assert report.converged

    eye = np.eye(2)
    np.testing.assert_allclose(agent.q_function(np.zeros((2, 1)), eye), q_star, atol=1e-3)
    probabilities = agent.action_probabilities(np.zeros((2, 1)), eye[:, None, :], np.zeros((2, 0)))
    np.testing.assert_array_equal(probabilities.argmax(axis=1), optimal)
    np.testing.assert_array_equal(optimal, [1, 0])


def test_residual_curve_shrinks(tabular_batch):
    agent = FQIAgent(2, LINEAR, gamma=GAMMA, tolerance=1e-6, terminal_bootstrap=True)
    report = fqi_train(agent, tabular_batch, max_iter=300)
    assert report.residual_curve[-1] < report.residual_curve[0]
    assert len(report.residual_curve) == report.iterations


def test_one_iteration_is_not_converged(tabular_batch):
    report = fqi_train(FQIAgent(2, LINEAR, gamma=GAMMA), tabular_batch, max_iter=1)
    assert report.iterations == 1
    assert not report.converged


def test_non_finite_rewards_abort_training(tabular_batch):
    rewards = np.array(tabular_batch.rewards)
    rewards[0, 0] = np.inf
    agent = FQIAgent(2, LINEAR, gamma=GAMMA)
    with pytest.raises(NonConvergenceError, match="non-finite"):
        agent.train(tabular_batch.zs, tabular_batch.states, tabular_batch.actions, rewards, max_iter=5)
    assert agent.q_models is None


def test_ties_go_to_the_smallest_action():
    agent = FQIAgent.from_q_models(zero_q_models(1, 3))
    np.testing.assert_array_equal(agent.act([0.0], [[0.4]], []), [1.0, 0.0, 0.0])


def test_random_policy_is_uniform():
    np.testing.assert_array_equal(RandomPolicy(2).act([1.0], [[0.1], [0.2]], [0]), [0.5, 0.5])
    probabilities = RandomPolicy(4).trajectory_probabilities(np.zeros((3, 1)), np.zeros((3, 3, 1)), np.zeros((3, 2)))
    assert probabilities.shape == (3, 3, 4)


def test_single_action_space(demo_env):
    batch = sample_trajectories(demo_env, sample_demo_zs(20, seed=1), constant_policy(2, 0), T=3, seed=2)
    agent = FQIAgent(1, LINEAR)
    fqi_train(agent, batch)
    np.testing.assert_array_equal(agent.trajectory_probabilities(batch.zs, batch.states, batch.actions), 1.0)


def test_preprocessing_agent_acts_on_raw_histories(demo_env, demo_batch):
    fitted, _, _ = _preprocessor(demo_batch)
    agent = FQIAgent(2, LINEAR, gamma=GAMMA, preprocessor=fitted)
    fqi_train(agent, demo_batch, max_iter=20)
    assert all(model.input_dim == 2 for model in agent.q_models)

    fresh = sample_trajectories(demo_env, sample_demo_zs(8, seed=3), RandomPolicy(2), T=4, seed=4)
    batch_view = agent.action_probabilities(fresh.zs, fresh.states, fresh.actions)
    for i in range(fresh.N):
        np.testing.assert_array_equal(agent.act(fresh.zs[i], fresh.states[i], fresh.actions[i]), batch_view[i])


def test_preprocessing_inside_train_matches_preprocessed_inputs(demo_batch):
    fitted, states_tilde, rewards_tilde = _preprocessor(demo_batch)
    inside = FQIAgent(2, LINEAR, gamma=GAMMA, preprocessor=fitted)
    fqi_train(inside, demo_batch, max_iter=20, preprocess=True)
    outside = FQIAgent(2, LINEAR, gamma=GAMMA)
    outside.train(demo_batch.zs, states_tilde, demo_batch.actions, rewards_tilde, max_iter=20, preprocess=False)

    probe = states_tilde[:, 2]
    np.testing.assert_array_equal(inside.q_function(demo_batch.zs, probe), outside.q_function(demo_batch.zs, probe))


def test_preprocess_flag_needs_a_preprocessor(demo_batch):
    with pytest.raises(ConfigurationError):
        fqi_train(FQIAgent(2, LINEAR), demo_batch, preprocess=True)


def test_missing_action_stratum(demo_env):
    batch = sample_trajectories(demo_env, sample_demo_zs(10, seed=5), constant_policy(2, 0), T=2, seed=6)
    with pytest.raises(SizeError, match="action 1"):
        fqi_train(FQIAgent(2, LINEAR), batch)


def test_bad_agent_settings():
    with pytest.raises(ConfigurationError):
        FQIAgent(2, gamma=1.0)
    with pytest.raises(ConfigurationError):
        FQIAgent(0)
    with pytest.raises(NotFittedError):
        FQIAgent(2).act([0.0], [[0.0]], [])


@pytest.mark.parametrize("with_preprocessor", [False, True])
def test_agent_save_and_load(tmp_path, demo_batch, with_preprocessor):
    preprocessor = _preprocessor(demo_batch)[0] if with_preprocessor else None
    agent = FQIAgent(2, LINEAR, gamma=GAMMA, preprocessor=preprocessor, include_z=not with_preprocessor)
    fqi_train(agent, demo_batch, max_iter=10)
    path = tmp_path / "agent.npz"
    save_policy(agent, path)
    loaded = load_policy(path)

    expected = agent.trajectory_probabilities(demo_batch.zs, demo_batch.states, demo_batch.actions)
    np.testing.assert_array_equal(
        loaded.trajectory_probabilities(demo_batch.zs, demo_batch.states, demo_batch.actions), expected
    )
    assert loaded.report == agent.report
    assert loaded.uses_preprocessor == with_preprocessor


def test_random_policy_save_and_load(tmp_path):
    save_policy(RandomPolicy(3), tmp_path / "agent.npz")
    loaded = load_policy(tmp_path / "agent.npz")
    assert isinstance(loaded, RandomPolicy) and loaded.num_actions == 3


def test_policy_from_table():
    table = {
        ((0.0,), (1.0,)): [1.0, 0.0],
        ((1.0,), (1.0,)): [0.0, 1.0],
        ((1.0,), (1.0,), 1): [0.5, 0.5],
    }
    policy = ExternalPolicy.from_table(2, table)
    np.testing.assert_array_equal(policy.act([0.0], [[1.0]], []), [1.0, 0.0])
    np.testing.assert_array_equal(policy.act([1.0], [[1.0]], []), [0.0, 1.0])
    np.testing.assert_array_equal(policy.act([1.0], [[0.0], [1.0]], [0]), [0.5, 0.5])
    with pytest.raises(DomainError):
        policy.act([0.0], [[2.0]], [])


def test_policy_from_function_is_checked():
    threshold = ExternalPolicy.from_function(2, lambda zs, x, t: np.column_stack([x[:, 0] >= 0, x[:, 0] < 0]))
    np.testing.assert_array_equal(threshold.act([0.0], [[-1.0]], []), [0.0, 1.0])

    broken = ExternalPolicy.from_function(2, lambda zs, x, t: np.full((len(zs), 2), 0.7))
    with pytest.raises(DataValueError):
        broken.act([0.0], [[0.0]], [])


def test_baselines(demo_batch):
    full = baseline_policy("full", 2, demo_batch, LINEAR, max_iter=5)
    unaware = baseline_policy("unaware", 2, demo_batch, LINEAR, max_iter=5)
    assert full.include_z and full.q_models[0].input_dim == 2
    assert not unaware.include_z and unaware.q_models[0].input_dim == 1
    assert isinstance(baseline_policy("random", 2), RandomPolicy)
    with pytest.raises(ConfigurationError):
        baseline_policy("full", 2)


def test_trajectory_probabilities_match_history_prefixes(demo_batch):
    agent = FQIAgent(2, LINEAR, gamma=GAMMA, include_z=True)
    fqi_train(agent, demo_batch, max_iter=10)
    full = agent.trajectory_probabilities(demo_batch.zs, demo_batch.states, demo_batch.actions)
    t = 3
    prefix = agent.action_probabilities(demo_batch.zs, demo_batch.states[:, : t + 1], demo_batch.actions[:, :t])
    np.testing.assert_array_equal(full[:, t], prefix)


def test_batch_needs_integer_actions():
    with pytest.raises(DataValueError):
        TrajectoryBatch(zs=[[0.0]], states=[[0.0, 1.0]], actions=[[0.5]], rewards=[[1.0]])
