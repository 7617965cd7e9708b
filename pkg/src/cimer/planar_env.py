"""Planar prehensile relocation: a floating palm with two fingers moving a disk to a goal.

Everything is batched: a :class:`BatchState` holds B independent episodes that
are stepped in lockstep. The single-episode functions :func:`reset` and
:func:`step` are thin wrappers around batches of one.

Geometry (hand frame, y up, rotated by the base angle):

* palm: capsule from (-w, 0) to (w, 0)
* finger 1: capsule from (-w, 0) to (-w + L sin q1, -L cos q1)
* finger 2: capsule from (w, 0) to (w - L sin q2, -L cos q2)

Positive finger angles close the hand. The object is a non-rotating union
of circles (one circle for the default disk) resting on a table at y = 0.

Hand vector ``h = (x, y, theta, q1, q2)``; object vector
``o = (p - goal, v)``. The first two object entries are the tracking states.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

HAND_DIM = 5
OBJECT_DIM = 4
N_PARTS = 4  # table, palm, finger 1, finger 2
PART_NAMES = ("table", "palm", "finger1", "finger2")


class SimulationError(RuntimeError):
    """Raised when the physics state becomes non-finite."""


@dataclass(frozen=True)
class EnvConfig:
    object_mass: float = 0.1
    object_radius: float = 0.04
    # >1 turns the disk into an ellipse with semi-axes (aspect * radius, radius)
    object_aspect: float = 1.0
    table_friction: float = 0.5
    finger_friction: float = 0.8
    gravity: float = 9.81
    contact_stiffness: float = 5000.0
    contact_damping: float = 5.0
    tangential_stiffness: float = 5000.0
    tangential_damping: float = 5.0
    dt: float = 0.002
    substeps: int = 5
    horizon: int = 150
    # per DoF: x, y, theta, finger1, finger2
    hand_mass: tuple = (0.5, 0.5, 0.05, 0.002, 0.002)
    joint_damping: tuple = (1.0, 1.0, 0.05, 0.002, 0.002)
    kp: tuple = (100.0, 100.0, 100.0, 2.0, 2.0)
    kd: tuple = (10.0, 10.0, 10.0, 0.06, 0.06)
    torque_limit: tuple = (40.0, 40.0, 5.0, 0.5, 0.5)
    finger_limits: tuple = (-0.6, 0.9)
    palm_half_width: float = 0.05
    finger_length: float = 0.1
    finger_radius: float = 0.01
    object_x_range: tuple = (-0.1, 0.1)
    goal_x_range: tuple = (-0.12, 0.12)
    goal_y_range: tuple = (0.12, 0.2)
    approach_height: float = 0.08
    hand_offset: float = 0.01
    open_angle: float = -0.3
    success_radius: float = 0.05
    success_steps: int = 10
    refine_base: bool = False

    def __post_init__(self):
        positive = [
            "object_mass", "object_radius", "object_aspect", "table_friction",
            "finger_friction", "gravity", "contact_stiffness", "contact_damping",
            "tangential_stiffness", "tangential_damping", "dt", "finger_length",
            "finger_radius", "palm_half_width", "success_radius",
        ]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("hand_mass", "kp", "torque_limit"):
            vals = getattr(self, name)
            if len(vals) != HAND_DIM or min(vals) <= 0:
                raise ValueError(f"{name} needs {HAND_DIM} positive entries, got {vals}")
        for name in ("joint_damping", "kd"):
            vals = getattr(self, name)
            if len(vals) != HAND_DIM or min(vals) < 0:
                raise ValueError(f"{name} needs {HAND_DIM} non-negative entries, got {vals}")
        if self.substeps < 1 or self.horizon < 2 or self.success_steps < 1:
            raise ValueError("substeps >= 1, horizon >= 2, success_steps >= 1 required")
        if self.object_aspect < 1:
            raise ValueError("object_aspect must be >= 1")

    @property
    def control_dt(self) -> float:
        return self.dt * self.substeps

    @property
    def circles(self) -> tuple[np.ndarray, np.ndarray]:
        """Circle offsets (K, 2) and radii (K,) approximating the object shape."""
        b = self.object_radius
        a = self.object_aspect * b
        if a == b:
            return np.zeros((1, 2)), np.array([b])
        # inscribed circles centred on the major axis
        reach = (a * a - b * b) / a
        xs = np.linspace(-0.85 * reach, 0.85 * reach, 7)
        radii = b * np.sqrt(1.0 - xs**2 / (a * a - b * b))
        return np.stack([xs, np.zeros_like(xs)], axis=1), radii

    @property
    def actuated_dofs(self) -> tuple[int, ...]:
        return tuple(range(HAND_DIM))

    @property
    def refined_dofs(self) -> tuple[int, ...]:
        return (0, 1, 2, 3, 4) if self.refine_base else (3, 4)

    def replace(self, **kw) -> "EnvConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "EnvConfig | None" = None) -> "EnvConfig":
        """Parse ``key=value`` lines; unknown keys raise, missing keys keep ``base`` values."""
        base = base or cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            kw[key] = _parse_field(getattr(base, key), val)
        return dataclasses.replace(base, **kw)

    @classmethod
    def load(cls, path, base: "EnvConfig | None" = None) -> "EnvConfig":
        return cls.from_text(Path(path).read_text(), base)


def _parse_field(current, val: str):
    if isinstance(current, bool):
        if val.lower() in ("1", "true", "yes"):
            return True
        if val.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"bad boolean {val!r}")
    if isinstance(current, int):
        return int(val)
    if isinstance(current, tuple):
        return tuple(float(x) for x in val.split(","))
    return float(val)


OBJECT_VARIANTS = {
    "radius-0.02": {"object_radius": 0.02},
    "radius-0.06": {"object_radius": 0.06},
    "mass-0.05": {"object_mass": 0.05},
    "mass-0.3": {"object_mass": 0.3},
    "ellipse": {"object_radius": 0.03, "object_aspect": 2.0},
}


def object_variant(config: EnvConfig, name: str) -> EnvConfig:
    if name not in OBJECT_VARIANTS:
        raise KeyError(f"unknown object variant {name!r}; choose from {sorted(OBJECT_VARIANTS)}")
    return config.replace(**OBJECT_VARIANTS[name])


def perturb_physics(config: EnvConfig, level: float, rng: np.random.Generator) -> EnvConfig:
    """Scale every mass and damping coefficient by an independent U(1 - 0.8j, 1 + 4j) draw."""
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"variation level must lie in [0, 1], got {level}")
    lo, hi = 1.0 - 0.8 * level, 1.0 + 4.0 * level

    def draw(size=None):
        return rng.uniform(lo, hi, size=size)

    return config.replace(
        object_mass=config.object_mass * float(draw()),
        hand_mass=tuple(float(v) for v in np.asarray(config.hand_mass) * draw(HAND_DIM)),
        joint_damping=tuple(float(v) for v in np.asarray(config.joint_damping) * draw(HAND_DIM)),
    )


@dataclass
class BatchState:
    """Full simulator state for B episodes.

    Contact arrays have shape (B, K, 4): K object circles by the parts
    (table, palm, finger 1, finger 2).
    """

    q: np.ndarray
    qd: np.ndarray
    pos: np.ndarray
    vel: np.ndarray
    goal: np.ndarray
    stretch: np.ndarray
    normal_force: np.ndarray
    tangent_force: np.ndarray
    contact_point: np.ndarray
    time: int = 0

    @property
    def batch(self) -> int:
        return len(self.q)

    def copy(self) -> "BatchState":
        return BatchState(**{
            f.name: (getattr(self, f.name).copy() if isinstance(getattr(self, f.name), np.ndarray)
                     else getattr(self, f.name))
            for f in dataclasses.fields(self)
        })

    def select(self, idx) -> "BatchState":
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v[idx].copy() if isinstance(v, np.ndarray) else v
        return BatchState(**out)


# single-episode state is a batch of one
PlanarEnvState = BatchState


@dataclass
class ObservedState:
    hand: np.ndarray
    object: np.ndarray

    @property
    def tracking(self) -> np.ndarray:
        return self.object[..., :2]


def observe(state: BatchState) -> ObservedState:
    return ObservedState(state.q.copy(), np.concatenate([state.pos - state.goal, state.vel], axis=-1))


def _episode_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def reset_batch(config: EnvConfig, seeds) -> tuple[BatchState, ObservedState]:
    """Randomized initial states; episode i depends only on ``seeds[i]``."""
    seeds = list(seeds)
    B = len(seeds)
    offsets, radii = config.circles
    K = len(radii)
    q = np.zeros((B, HAND_DIM))
    pos = np.zeros((B, 2))
    goal = np.zeros((B, 2))
    # the lowest circle sits on the table at static equilibrium penetration
    rest_y = float(np.max(radii - offsets[:, 1])) - config.object_mass * config.gravity / config.contact_stiffness
    for i, s in enumerate(seeds):
        rng = _episode_rng(s)
        ox = rng.uniform(*config.object_x_range)
        gx = rng.uniform(*config.goal_x_range)
        gy = rng.uniform(*config.goal_y_range)
        dx, dy = rng.uniform(-config.hand_offset, config.hand_offset, size=2)
        th = rng.uniform(-0.05, 0.05)
        pos[i] = ox, rest_y
        goal[i] = gx, gy
        q[i] = ox + dx, rest_y + config.approach_height + dy, th, config.open_angle, config.open_angle
    state = BatchState(
        q=q,
        qd=np.zeros((B, HAND_DIM)),
        pos=pos,
        vel=np.zeros((B, 2)),
        goal=goal,
        stretch=np.zeros((B, K, N_PARTS)),
        normal_force=np.zeros((B, K, N_PARTS)),
        tangent_force=np.zeros((B, K, N_PARTS)),
        contact_point=np.zeros((B, K, N_PARTS, 2)),
    )
    return state, observe(state)


def reset(config: EnvConfig, seed) -> tuple[BatchState, ObservedState]:
    state, obs = reset_batch(config, [seed])
    return state, ObservedState(obs.hand[0], obs.object[0])


def _perp(v: np.ndarray) -> np.ndarray:
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def hand_segments(config: EnvConfig, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-frame capsule endpoints for (palm, finger 1, finger 2): two (B, 3, 2) arrays."""
    w, L = config.palm_half_width, config.finger_length
    c, s = np.cos(q[:, 2]), np.sin(q[:, 2])
    s1, c1 = np.sin(q[:, 3]), np.cos(q[:, 3])
    s2, c2 = np.sin(q[:, 4]), np.cos(q[:, 4])
    B = len(q)
    lx = np.stack([np.full(B, -w), np.full(B, -w), np.full(B, w)], axis=1)
    ly = np.zeros((B, 3))
    ex = np.stack([np.full(B, w), -w + L * s1, w - L * s2], axis=1)
    ey = np.stack([np.zeros(B), -L * c1, -L * c2], axis=1)

    def world(px, py):
        return np.stack(
            [q[:, :1] + c[:, None] * px - s[:, None] * py, q[:, 1:2] + s[:, None] * px + c[:, None] * py],
            axis=-1,
        )

    return world(lx, ly), world(ex, ey)


def _clamp_targets(config: EnvConfig, targets: np.ndarray) -> np.ndarray:
    lo, hi = config.finger_limits
    span = hi - lo
    out = targets.copy()
    out[:, 3:] = np.clip(out[:, 3:], lo - span / 2, hi + span / 2)
    return out


def _substep(config: EnvConfig, st: BatchState, targets: np.ndarray, arrays) -> None:
    h = config.dt
    mass, damp, kp, kd, tlim, offsets, radii = arrays
    kn, cn = config.contact_stiffness, config.contact_damping
    kt, ct = config.tangential_stiffness, config.tangential_damping
    q, qd = st.q, st.qd
    B = len(q)

    centers = st.pos[:, None, :] + offsets[None]  # (B, K, 2)

    # hand capsules
    A, E = hand_segments(config, q)  # (B, 3, 2)
    AE = E - A
    AC = centers[:, :, None, :] - A[:, None, :, :]  # (B, K, 3, 2)
    denom = np.sum(AE * AE, axis=-1)[:, None, :]
    u = np.clip(np.sum(AC * AE[:, None], axis=-1) / denom, 0.0, 1.0)
    S = A[:, None] + u[..., None] * AE[:, None]  # closest points (B, K, 3, 2)
    d = centers[:, :, None, :] - S
    dist = np.sqrt(np.sum(d * d, axis=-1))
    safe = np.where(dist > 1e-12, dist, 1.0)
    n_seg = np.where((dist > 1e-12)[..., None], d / safe[..., None], np.array([0.0, 1.0]))
    pen_seg = radii[None, :, None] + config.finger_radius - dist

    # velocity of the hand material point under S
    base = q[:, None, None, :2]
    rS = S - base
    vS = qd[:, None, None, :2] + qd[:, None, None, 2:3] * _perp(rS)
    pivots = A[:, None]  # palm and fingers all start at their pivot
    finger_lever = _perp(S - pivots)
    vS[:, :, 1] += qd[:, None, 3:4] * finger_lever[:, :, 1]
    vS[:, :, 2] -= qd[:, None, 4:5] * finger_lever[:, :, 2]

    # table
    K = len(radii)
    n_tab = np.broadcast_to(np.array([0.0, 1.0]), (B, K, 1, 2))
    pen_tab = (radii[None, :] - centers[..., 1])[..., None]
    S_tab = np.concatenate([centers[..., :1], np.zeros((B, K, 1))], axis=-1)[:, :, None, :]
    v_tab = np.zeros((B, K, 1, 2))

    normal = np.concatenate([n_tab, n_seg], axis=2)  # (B, K, 4, 2)
    pen = np.concatenate([pen_tab, pen_seg], axis=2)
    point = np.concatenate([S_tab, S], axis=2)
    vpoint = np.concatenate([v_tab, vS], axis=2)
    mu = np.array([config.table_friction, config.finger_friction, config.finger_friction,
                   config.finger_friction])

    active = pen > 0
    vrel = st.vel[:, None, None, :] - vpoint
    pen_rate = -np.sum(vrel * normal, axis=-1)
    fn = np.where(active, np.maximum(0.0, kn * pen + cn * pen_rate), 0.0)
    tang = _perp(normal)
    vt = np.sum(vrel * tang, axis=-1)
    stretch = np.where(active, st.stretch + vt * h, 0.0)
    ft = -kt * stretch - ct * vt
    cap = mu * fn
    slip = np.abs(ft) > cap
    ft = np.where(slip, np.sign(ft) * cap, ft)
    ft = np.where(active, ft, 0.0)
    stretch = np.where(slip, -ft / kt, stretch)

    F = fn[..., None] * normal + ft[..., None] * tang  # force on the object, (B, K, 4, 2)
    F_obj = F.sum(axis=(1, 2))

    # reaction on the hand as generalized forces
    Fh = -F[:, :, 1:]
    gen = np.zeros((B, HAND_DIM))
    gen[:, :2] = Fh.sum(axis=(1, 2))
    gen[:, 2] = np.sum(_perp(rS) * Fh, axis=(1, 2, 3))
    gen[:, 3] = np.sum(finger_lever[:, :, 1] * Fh[:, :, 1], axis=(1, 2))
    gen[:, 4] = -np.sum(finger_lever[:, :, 2] * Fh[:, :, 2], axis=(1, 2))

    tau = np.clip(kp * (targets - q) - kd * qd, -tlim, tlim)
    qdd = (tau - damp * qd + gen) / mass
    acc = F_obj / config.object_mass
    acc[:, 1] -= config.gravity

    qd += h * qdd
    q += h * qd
    st.vel += h * acc
    st.pos += h * st.vel

    lo, hi = config.finger_limits
    for j in (3, 4):
        below, above = q[:, j] < lo, q[:, j] > hi
        q[:, j] = np.clip(q[:, j], lo, hi)
        qd[:, j] = np.where(below, np.maximum(qd[:, j], 0.0), qd[:, j])
        qd[:, j] = np.where(above, np.minimum(qd[:, j], 0.0), qd[:, j])

    st.stretch = stretch
    st.normal_force = fn
    st.tangent_force = ft
    st.contact_point = point


def _arrays(config: EnvConfig):
    offsets, radii = config.circles
    return (
        np.asarray(config.hand_mass, dtype=float),
        np.asarray(config.joint_damping, dtype=float),
        np.asarray(config.kp, dtype=float),
        np.asarray(config.kd, dtype=float),
        np.asarray(config.torque_limit, dtype=float),
        offsets,
        radii,
    )


def step_batch(config: EnvConfig, state: BatchState, pd_targets, check: bool = True):
    """Advance every episode by one control period (``substeps`` physics steps).

    Returns ``(next_state, observation, finite_mask)``. With ``check=True`` a
    non-finite state raises :class:`SimulationError`; otherwise offending
    episodes are reported through ``finite_mask`` and left frozen.
    """
    targets = np.asarray(pd_targets, dtype=float).reshape(state.batch, HAND_DIM)
    if not np.all(np.isfinite(targets)):
        raise ValueError("PD targets must be finite")
    targets = _clamp_targets(config, targets)
    st = state.copy()
    arrays = _arrays(config)
    ok = np.ones(state.batch, dtype=bool)
    for k in range(config.substeps):
        prev = st.copy() if not check else None
        with np.errstate(all="ignore"):
            _substep(config, st, targets, arrays)
        finite = np.isfinite(st.q).all(axis=1) & np.isfinite(st.pos).all(axis=1) & np.isfinite(st.vel).all(axis=1)
        if not finite.all():
            if check:
                raise SimulationError(f"non-finite state at substep {k + 1} of control step {state.time + 1}")
            bad = ~finite
            ok &= finite
            for f in dataclasses.fields(st):
                v = getattr(st, f.name)
                if isinstance(v, np.ndarray):
                    v[bad] = getattr(prev, f.name)[bad]
    st.time = state.time + 1
    return st, observe(st), ok


def step(config: EnvConfig, state: BatchState, pd_targets):
    """Single-episode step: returns (next_state, ObservedState, contact diagnostics)."""
    nxt, obs, _ = step_batch(config, state, np.asarray(pd_targets, dtype=float)[None])
    diag = {
        "normal_force": nxt.normal_force[0].copy(),
        "tangent_force": nxt.tangent_force[0].copy(),
        "contact_point": nxt.contact_point[0].copy(),
    }
    return nxt, ObservedState(obs.hand[0], obs.object[0]), diag


def success(object_track: np.ndarray, config: EnvConfig) -> bool:
    """True iff the object stays within ``success_radius`` of the goal for the last steps.

    ``object_track`` is the (T, >=2) sequence of goal-relative object positions.
    """
    track = np.asarray(object_track, dtype=float)[:, :2]
    if len(track) < config.success_steps:
        return False
    tail = track[-config.success_steps:]
    return bool(np.all(np.linalg.norm(tail, axis=1) < config.success_radius))


def success_batch(object_tracks: np.ndarray, config: EnvConfig) -> np.ndarray:
    tail = np.asarray(object_tracks)[:, -config.success_steps:, :2]
    return np.all(np.linalg.norm(tail, axis=-1) < config.success_radius, axis=1)
