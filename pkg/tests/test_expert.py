import numpy as np

from cimer.expert import ExpertConfig, generate_dataset, run_expert, scripted_expert
from cimer.planar_env import EnvConfig


def test_expert_yield_and_shapes(expert_stack, env_config):
    dataset, _, ok = expert_stack
    assert ok >= 190
    for tr in dataset.trajectories:
        assert tr.hands.shape == (env_config.horizon, 5) and tr.objects.shape == (env_config.horizon, 4)


def test_squeeze_not_observable():
    cfg = EnvConfig()
    ex = ExpertConfig()
    hands, _, commands, ok = run_expert(cfg, range(40), ex)
    assert ok.mean() >= 0.95
    grasp = slice(ex.close_step + 5, None)
    gap = commands[:, grasp, 3:] - hands[:, 1:][:, grasp, 3:]
    assert np.all(gap.max(axis=(1, 2)) > 0.05)


def test_failed_seeds_are_skipped():
    cfg = EnvConfig()
    # an expert that never closes its fingers cannot lift the disk
    weak = ExpertConfig(close_angle=-0.3)
    assert scripted_expert(cfg, 0, weak) is None
    dataset, ok = generate_dataset(cfg, range(3), weak)
    assert dataset is None and ok == 0


def test_expert_deterministic():
    cfg = EnvConfig()
    a = scripted_expert(cfg, 11)
    b = scripted_expert(cfg, 11)
    assert a == b
