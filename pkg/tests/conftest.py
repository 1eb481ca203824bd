import numpy as np
import pytest

from agents import RandomPolicy
from environment import DemoEnvParams, SyntheticEnvironment, default_demo_env, sample_demo_zs, sample_trajectories
from trajectory_io import TrajectoryBatch

GAMMA = 0.9
# deterministic 2-state, 2-action MDP: action a moves to state a
TABULAR_REWARDS = np.array([[1.0, 0.0], [5.0, 2.0]])


def value_iteration(rewards: np.ndarray, gamma: float, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    q = np.zeros_like(rewards)
    while True:
        v = q.max(axis=1)
        # next state == action
        updated = rewards + gamma * v[None, :]
        if np.max(np.abs(updated - q)) < tol:
            return updated, updated.argmax(axis=1)
        q = updated


@pytest.fixture
def demo_env():
    return default_demo_env()


@pytest.fixture
def noiseless_env():
    return default_demo_env(DemoEnvParams(noise_scale=0.0))


@pytest.fixture
def demo_batch(demo_env):
    zs = sample_demo_zs(100, seed=11)
    return sample_trajectories(demo_env, zs, RandomPolicy(2), T=5, seed=12)


@pytest.fixture
def small_batch():
    """Three individuals, T=2, d_x=1, hand-written values."""
    return TrajectoryBatch(
        zs=[[0.0], [1.0], [1.0]],
        states=[[0.1, 0.2, 0.3], [1.5, -0.25, 2.0], [0.0, 1e-17, 3.14159]],
        actions=[[0, 1], [1, 1], [0, 0]],
        rewards=[[1.0, -1.0], [0.5, 0.25], [2.0, 0.0]],
        ids=["a", "b", "c"],
    )


@pytest.fixture
def tabular_batch():
    """T=1 transitions covering every (state, action) pair twice, one-hot states."""
    eye = np.eye(2)
    states, actions, rewards = [], [], []
    for _ in range(2):
        for s in range(2):
            for a in range(2):
                states.append([eye[s], eye[a]])
                actions.append([a])
                rewards.append([TABULAR_REWARDS[s, a]])
    n = len(actions)
    return TrajectoryBatch(zs=np.zeros((n, 1)), states=np.array(states), actions=actions, rewards=rewards)


@pytest.fixture
def tabular_oracle():
    return value_iteration(TABULAR_REWARDS, GAMMA)


@pytest.fixture
def tabular_env():
    """The tabular MDP as an environment; the initial state is 0 or 1 with probability 1/2."""
    eye = np.eye(2)

    def initial_fn(zs, noise):
        return eye[(noise[:, 0] > 0).astype(int)]

    def transition_fn(zs, states, actions, noise):
        return eye[actions]

    def reward_fn(zs, states, actions, noise):
        return TABULAR_REWARDS[states.argmax(axis=1), actions]

    return SyntheticEnvironment(d_x=2, d_z=1, num_actions=2, initial_fn=initial_fn, transition_fn=transition_fn, reward_fn=reward_fn)
