"""Scripted expert producing state-only demonstrations.

Phases: approach above the object, close the fingers with a squeeze that
drives the targets well past the contact angle, then a low-pass transport
of the grasped object to the goal and a hold. Only achieved positions are
recorded, so the squeeze is invisible in the data.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .datasets import ObservationDataset, Trajectory
from .planar_env import (
    EnvConfig,
    reset_batch,
    step_batch,
    success_batch,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExpertConfig:
    grasp_height: float = 0.08
    close_angle: float = 0.35
    close_step: int = 10
    transport_step: int = 30
    time_constant: float = 0.12
    # 2 cascades two first-order filters for an S-shaped transport profile
    filter_order: int = 1


def run_expert(config: EnvConfig, seeds, expert: ExpertConfig = ExpertConfig()):
    """Roll the expert out on a batch of seeds.

    Returns ``(hands, objects, commands, ok)`` with shapes (B, T, 5), (B, T, 4),
    (B, T-1, 5) and (B,), where ``ok`` flags successful episodes.
    """
    state, obs = reset_batch(config, seeds)
    B, T = state.batch, config.horizon
    hands = np.empty((B, T, obs.hand.shape[1]))
    objects = np.empty((B, T, obs.object.shape[1]))
    commands = np.empty((B, T - 1, obs.hand.shape[1]))
    hands[:, 0], objects[:, 0] = obs.hand, obs.object

    alpha = 1.0 - math.exp(-config.control_dt / expert.time_constant)
    target = state.q.copy()
    stage = state.q[:, :2].copy()
    approach = np.stack([state.pos[:, 0], state.pos[:, 1] + expert.grasp_height], axis=1)
    final = None
    ok = np.ones(B, dtype=bool)
    for t in range(T - 1):
        if t < expert.transport_step:
            target[:, :2] += alpha * (approach - target[:, :2])
            stage[:] = target[:, :2]
        else:
            if final is None:
                # keep the object where it sits in the hand, move that point to the goal
                final = state.goal - (state.pos - state.q[:, :2])
            if expert.filter_order == 2:
                stage += alpha * (final - stage)
                target[:, :2] += alpha * (stage - target[:, :2])
            else:
                target[:, :2] += alpha * (final - target[:, :2])
        target[:, 2] += alpha * (0.0 - target[:, 2])
        target[:, 3:] = expert.close_angle if t >= expert.close_step else config.open_angle
        commands[:, t] = target
        state, obs, finite = step_batch(config, state, target, check=False)
        ok &= finite
        hands[:, t + 1], objects[:, t + 1] = obs.hand, obs.object
    ok &= success_batch(objects, config)
    return hands, objects, commands, ok


def scripted_expert(config: EnvConfig, seed, expert: ExpertConfig = ExpertConfig()):
    """One state-only expert trajectory, or ``None`` when the expert fails on this seed."""
    hands, objects, _, ok = run_expert(config, [seed], expert)
    if not ok[0]:
        log.info("expert failed on seed %s", seed)
        return None
    return Trajectory(hands[0], objects[0], config.control_dt)


def generate_dataset(config: EnvConfig, seeds, expert: ExpertConfig = ExpertConfig(),
                     batch: int = 50):
    """Run the expert over ``seeds``; failed seeds are skipped and logged.

    Returns ``(dataset_or_None, n_success)``.
    """
    seeds = list(seeds)
    trajectories = []
    for start in range(0, len(seeds), batch):
        chunk = seeds[start:start + batch]
        hands, objects, _, ok = run_expert(config, chunk, expert)
        for i, s in enumerate(chunk):
            if ok[i]:
                trajectories.append(Trajectory(hands[i], objects[i], config.control_dt))
            else:
                log.info("expert failed on seed %s; skipped", s)
    if not trajectories:
        return None, 0
    return ObservationDataset.from_trajectories(trajectories), len(trajectories)
