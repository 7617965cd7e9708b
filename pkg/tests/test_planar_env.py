import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cimer.planar_env import (
    OBJECT_VARIANTS,
    EnvConfig,
    SimulationError,
    object_variant,
    perturb_physics,
    reset,
    reset_batch,
    step,
    step_batch,
    success,
    success_batch,
)


def airborne(config, seed=0, height=0.6):
    """A state with the object far above the table and away from the hand."""
    state, _ = reset(config, seed)
    state.pos[0] = [0.5, height]
    return state


def test_reset_deterministic():
    cfg = EnvConfig()
    a, oa = reset(cfg, 7)
    b, ob = reset(cfg, 7)
    for f in ("q", "qd", "pos", "vel", "goal"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert np.array_equal(oa.hand, ob.hand) and np.array_equal(oa.object, ob.object)
    c, _ = reset(cfg, 8)
    assert not np.array_equal(a.goal, c.goal)


def test_goals_in_region():
    cfg = EnvConfig()
    state, _ = reset_batch(cfg, range(1000))
    gx, gy = state.goal[:, 0], state.goal[:, 1]
    assert np.all((gx >= cfg.goal_x_range[0]) & (gx <= cfg.goal_x_range[1]))
    assert np.all((gy >= cfg.goal_y_range[0]) & (gy <= cfg.goal_y_range[1]))
    ox = state.pos[:, 0]
    assert np.all((ox >= cfg.object_x_range[0]) & (ox <= cfg.object_x_range[1]))


def test_resting_object_stays_put():
    cfg = EnvConfig()
    state, obs = reset_batch(cfg, range(10))
    start = state.pos.copy()
    hold = state.q.copy()
    for _ in range(100):
        state, obs, _ = step_batch(cfg, state, hold)
    assert np.abs(state.pos - start).max() < 1e-4


def test_equilibrium_without_gravity_or_contact():
    # gravity must be positive; 1e-300 is zero at double precision here
    cfg = EnvConfig(gravity=1e-300)
    state = airborne(cfg)
    before = state.copy()
    nxt, _, _ = step(cfg, state, state.q[0])
    assert np.abs(nxt.q - before.q).max() < 1e-12
    assert np.abs(nxt.pos - before.pos).max() < 1e-12
    assert np.abs(nxt.vel).max() < 1e-12


def test_free_fall_velocity():
    cfg = EnvConfig()
    state = airborne(cfg)
    nxt, _, diag = step(cfg, state, state.q[0])
    assert abs(nxt.vel[0, 1] + cfg.gravity * cfg.control_dt) < 1e-9
    assert not diag["normal_force"].any()


def test_disk_weight_carried_by_table():
    cfg = EnvConfig()
    state, _ = reset(cfg, 3)
    for _ in range(50):
        state, _, diag = step(cfg, state, state.q[0])
    table = diag["normal_force"][:, 0].sum()
    weight = cfg.object_mass * cfg.gravity
    assert abs(table - weight) / weight < 0.02


def test_contact_force_invariants_every_substep():
    cfg = EnvConfig(substeps=1)
    rng = np.random.default_rng(0)
    state, _ = reset_batch(cfg, range(8))
    mu = np.array([cfg.table_friction] + [cfg.finger_friction] * 3)
    lo, hi = cfg.finger_limits
    target = state.q.copy()
    for t in range(400):
        target[:, 1] -= 0.0004 if t < 150 else -0.0004
        target[:, 3:] = 0.5 + 0.3 * rng.normal(size=(8, 2))
        state, obs, _ = step_batch(cfg, state, target)
        assert np.all(state.normal_force >= 0)
        assert np.all(np.abs(state.tangent_force) <= mu * state.normal_force + 1e-9)
        assert np.all((state.q[:, 3:] >= lo) & (state.q[:, 3:] <= hi))
        assert np.all(state.pos[:, 1] >= cfg.object_radius - 0.005)
        assert np.array_equal(obs.object[:, :2], state.pos - state.goal)
        assert np.array_equal(obs.tracking, obs.object[:, :2])


def test_bit_exact_determinism():
    cfg = EnvConfig()
    rng = np.random.default_rng(1)
    actions = rng.normal(scale=0.05, size=(30, 4, 5))
    runs = []
    for _ in range(2):
        state, _ = reset_batch(cfg, range(4))
        for a in actions:
            state, _, _ = step_batch(cfg, state, state.q + a)
        runs.append(state)
    assert np.array_equal(runs[0].q, runs[1].q) and np.array_equal(runs[0].pos, runs[1].pos)


def test_non_finite_state_names_substep():
    cfg = EnvConfig()
    state, _ = reset(cfg, 0)
    state.qd[0, 0] = np.inf
    with pytest.raises(SimulationError, match="substep 1"):
        step(cfg, state, state.q[0])
    nxt, _, ok = step_batch(cfg, state, state.q, check=False)
    assert not ok[0]
    with pytest.raises(ValueError):
        step(cfg, reset(cfg, 0)[0], [np.nan] * 5)


def test_finger_targets_clamped():
    cfg = EnvConfig()
    state, _ = reset(cfg, 0)
    target = state.q[0].copy()
    target[3:] = 50.0
    a, _, _ = step(cfg, state, target)
    lo, hi = cfg.finger_limits
    target[3:] = hi + (hi - lo) / 2
    b, _, _ = step(cfg, state, target)
    assert np.array_equal(a.q, b.q)


def test_success_rule():
    cfg = EnvConfig()
    T = cfg.horizon
    assert success(np.zeros((T, 2)), cfg)
    on_table = np.tile([0.0, -0.15], (T, 1))
    assert not success(on_table, cfg)
    late = np.zeros((T, 2))
    late[-cfg.success_steps] = [0.06, 0.0]
    assert not success(late, cfg)
    early = np.zeros((T, 2))
    early[: T - cfg.success_steps] = [1.0, 1.0]
    assert success(early, cfg)
    assert success_batch(np.stack([late, early]), cfg).tolist() == [False, True]


def test_perturbation_bounds():
    cfg = EnvConfig()
    rng = np.random.default_rng(0)
    same = perturb_physics(cfg, 0.0, rng)
    assert same == cfg
    for level, (lo, hi) in [(1.0, (0.2, 5.0)), (0.5, (0.6, 3.0))]:
        for _ in range(50):
            p = perturb_physics(cfg, level, rng)
            ratios = [p.object_mass / cfg.object_mass]
            ratios += list(np.divide(p.hand_mass, cfg.hand_mass)) + list(np.divide(p.joint_damping, cfg.joint_damping))
            assert all(lo - 1e-12 <= r <= hi + 1e-12 for r in ratios)
    with pytest.raises(ValueError):
        perturb_physics(cfg, 1.5, rng)


def test_config_validation_and_text_round_trip(tmp_path):
    with pytest.raises(ValueError):
        EnvConfig(object_mass=0)
    with pytest.raises(ValueError):
        EnvConfig(kp=(1, 2))
    cfg = EnvConfig(object_radius=0.05, refine_base=True, kp=(90.0, 90.0, 90.0, 3.0, 3.0))
    assert EnvConfig.from_text(cfg.to_text()) == cfg
    (tmp_path / "c.cfg").write_text("object_mass = 0.2  # heavier\n\nrefine_base=yes\n")
    loaded = EnvConfig.load(tmp_path / "c.cfg")
    assert loaded.object_mass == 0.2 and loaded.refined_dofs == (0, 1, 2, 3, 4)
    with pytest.raises(ValueError, match="unknown"):
        EnvConfig.from_text("mass=1")
    assert cfg.control_dt == pytest.approx(0.01)


def test_variants():
    cfg = EnvConfig()
    assert object_variant(cfg, "radius-0.06").object_radius == 0.06
    offsets, radii = object_variant(cfg, "ellipse").circles
    assert len(radii) > 1 and np.all(radii <= 0.03 + 1e-12)
    with pytest.raises(KeyError, match="radius-0.02"):
        object_variant(cfg, "cube")
    for name in OBJECT_VARIANTS:
        state, _ = reset(object_variant(cfg, name), 0)
        assert np.isfinite(state.pos).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_observation_consistency(seed):
    cfg = EnvConfig()
    state, obs = reset(cfg, seed)
    assert np.array_equal(obs.object[:2], state.pos[0] - state.goal[0])
    assert np.array_equal(obs.hand, state.q[0])
