"""Motion refinement by emulation: tracking rewards, GAE, clipped PPO, behaviour-cloning warm start.

Time indices follow the episode convention t = 1..T. At step t the policy
sees the last three achieved states, the last three refined targets and the
motion prior at t+1, t+5, t+10, and outputs the PD target that moves the
hand toward the state at t+1.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import policy_net as pn
from .datasets import ObservationDataset, dataset_stats
from .koopman import KoopmanModel, rollout_batch
from .planar_env import (
    HAND_DIM,
    OBJECT_DIM,
    EnvConfig,
    reset_batch,
    step_batch,
    success_batch,
)

log = logging.getLogger(__name__)

HISTORY = 3
PRIOR_OFFSETS = (1, 5, 10)


class NumericalError(RuntimeError):
    """Non-finite loss or diverging optimisation."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# policy input


@dataclass(frozen=True)
class InputLayout:
    hand_dim: int
    object_dim: int
    action_dim: int

    @property
    def blocks(self) -> list[tuple[str, int]]:
        n, m, a = self.hand_dim, self.object_dim, self.action_dim
        return [
            ("hand_history", HISTORY * n),
            ("object_history", HISTORY * m),
            ("target_history", HISTORY * a),
            ("prior_hand", len(PRIOR_OFFSETS) * n),
            ("prior_object", len(PRIOR_OFFSETS) * m),
        ]

    @property
    def dim(self) -> int:
        return sum(size for _, size in self.blocks)

    def offsets(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, size in self.blocks:
            out[name] = slice(start, start + size)
            start += size
        return out


def _clamped(idx: int, lo: int, hi: int) -> int:
    return min(max(idx, lo), hi)


def build_input(hands, objects, targets, ref_hands, ref_objects, t: int) -> np.ndarray:
    """Flatten one policy input at 1-based step ``t``.

    ``hands``/``objects`` hold achieved states for steps 1..>=t (row k is step
    k+1). ``targets`` holds refined targets with row 0 the initial prior target
    and row k the target issued at step k. ``ref_*`` are the T-step prior.
    """
    T = len(ref_hands)
    if not 1 <= t <= T:
        raise IndexError(f"step {t} outside [1, {T}]")
    if len(hands) < t or len(objects) < t or len(targets) < t:
        raise IndexError(f"history buffers do not reach step {t}")
    hist = [_clamped(k, 1, T) - 1 for k in (t - 2, t - 1, t)]
    tgt = [max(k, 0) for k in (t - 3, t - 2, t - 1)]
    prior = [_clamped(t + k, 1, T) - 1 for k in PRIOR_OFFSETS]
    parts = [np.asarray(hands)[hist], np.asarray(objects)[hist], np.asarray(targets)[tgt],
             np.asarray(ref_hands)[prior], np.asarray(ref_objects)[prior]]
    return np.concatenate([p.reshape(-1) for p in parts])


def build_input_batch(hands, objects, targets, ref_hands, ref_objects, t: int) -> np.ndarray:
    """Batched :func:`build_input`: leading axis B on every buffer."""
    T = ref_hands.shape[1]
    if not 1 <= t <= T:
        raise IndexError(f"step {t} outside [1, {T}]")
    B = len(ref_hands)
    hist = [_clamped(k, 1, T) - 1 for k in (t - 2, t - 1, t)]
    tgt = [max(k, 0) for k in (t - 3, t - 2, t - 1)]
    prior = [_clamped(t + k, 1, T) - 1 for k in PRIOR_OFFSETS]
    parts = [hands[:, hist], objects[:, hist], targets[:, tgt], ref_hands[:, prior], ref_objects[:, prior]]
    return np.concatenate([p.reshape(B, -1) for p in parts], axis=1)


@dataclass
class Normalizer:
    """Per-dimension affine scaling of hand and object quantities from dataset statistics."""

    hand_mean: np.ndarray
    hand_std: np.ndarray
    object_mean: np.ndarray
    object_std: np.ndarray

    def __post_init__(self):
        for name in ("hand_mean", "hand_std", "object_mean", "object_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        # constant dimensions are passed through unscaled
        self.hand_std = np.where(self.hand_std > 1e-8, self.hand_std, 1.0)
        self.object_std = np.where(self.object_std > 1e-8, self.object_std, 1.0)

    @classmethod
    def from_dataset(cls, dataset: ObservationDataset) -> "Normalizer":
        mean, std = dataset_stats(dataset)
        n = dataset.hand_dim
        return cls(mean[:n], std[:n], mean[n:], std[n:])

    def input_affine(self, layout: InputLayout, dofs) -> tuple[np.ndarray, np.ndarray]:
        dofs = list(dofs)
        mean = np.concatenate([
            np.tile(self.hand_mean, HISTORY), np.tile(self.object_mean, HISTORY),
            np.tile(self.hand_mean[dofs], HISTORY),
            np.tile(self.hand_mean, len(PRIOR_OFFSETS)), np.tile(self.object_mean, len(PRIOR_OFFSETS)),
        ])
        std = np.concatenate([
            np.tile(self.hand_std, HISTORY), np.tile(self.object_std, HISTORY),
            np.tile(self.hand_std[dofs], HISTORY),
            np.tile(self.hand_std, len(PRIOR_OFFSETS)), np.tile(self.object_std, len(PRIOR_OFFSETS)),
        ])
        return mean, std

    def to_json(self) -> dict:
        return {k: [float(x) for x in getattr(self, k)] for k in
                ("hand_mean", "hand_std", "object_mean", "object_std")}


class RefinementPolicy:
    """The refinement actor and its value baseline, with input/output scaling.

    The networks operate in normalized units; ``act`` maps raw policy inputs to
    raw PD targets for the refined DoFs.
    """

    def __init__(self, actor: pn.GaussianPolicy, critic: pn.MlpParams, normalizer: Normalizer,
                 dofs, hand_dim: int = HAND_DIM, object_dim: int = OBJECT_DIM):
        self.actor = actor
        self.critic = critic
        self.normalizer = normalizer
        self.dofs = tuple(int(d) for d in dofs)
        self.layout = InputLayout(hand_dim, object_dim, len(self.dofs))
        if actor.mean_net.sizes[0] != self.layout.dim or actor.action_dim != len(self.dofs):
            raise pn.ShapeError("actor shape does not match the input layout")
        self.in_mean, self.in_std = normalizer.input_affine(self.layout, self.dofs)
        self.out_mean = normalizer.hand_mean[list(self.dofs)]
        self.out_std = normalizer.hand_std[list(self.dofs)]

    @classmethod
    def create(cls, normalizer: Normalizer, dofs, seed, log_std: float = -1.0,
               hand_dim: int = HAND_DIM, object_dim: int = OBJECT_DIM):
        rng = np.random.default_rng(seed)
        layout = InputLayout(hand_dim, object_dim, len(tuple(dofs)))
        actor = pn.GaussianPolicy.init(layout.dim, layout.action_dim, rng, log_std=log_std)
        critic = pn.MlpParams.init((layout.dim, *pn.HIDDEN, 1), rng)
        return cls(actor, critic, normalizer, dofs, hand_dim, object_dim)

    def copy(self) -> "RefinementPolicy":
        return RefinementPolicy(self.actor.copy(), self.critic.copy(), self.normalizer, self.dofs,
                                self.layout.hand_dim, self.layout.object_dim)

    def normalize_input(self, raw) -> np.ndarray:
        return (np.asarray(raw) - self.in_mean) / self.in_std

    def normalize_action(self, raw) -> np.ndarray:
        return (np.asarray(raw) - self.out_mean) / self.out_std

    def denormalize_action(self, a) -> np.ndarray:
        return self.out_mean + self.out_std * np.asarray(a)

    def mean_targets(self, raw_inputs) -> np.ndarray:
        return self.denormalize_action(self.actor.mean(self.normalize_input(raw_inputs)))

    def value(self, norm_inputs, value_scale: float) -> np.ndarray:
        return pn.forward(self.critic, norm_inputs)[..., 0] * value_scale

    def save(self, prefix) -> None:
        prefix = Path(prefix)
        self.actor.mean_net.save(prefix.with_suffix(".actor.mlp"))
        self.critic.save(prefix.with_suffix(".critic.mlp"))
        meta = {
            "format": "CIMER-POLICY v1",
            "dofs": list(self.dofs),
            "hand_dim": self.layout.hand_dim,
            "object_dim": self.layout.object_dim,
            "log_std": [float(x) for x in self.actor.log_std],
            "normalizer": self.normalizer.to_json(),
        }
        prefix.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n")

    @classmethod
    def load(cls, prefix) -> "RefinementPolicy":
        prefix = Path(prefix)
        meta = json.loads(prefix.with_suffix(".json").read_text())
        if meta.get("format") != "CIMER-POLICY v1":
            raise ValueError(f"{prefix.with_suffix('.json')}: not a policy bundle")
        actor = pn.GaussianPolicy(pn.MlpParams.load(prefix.with_suffix(".actor.mlp")), meta["log_std"])
        critic = pn.MlpParams.load(prefix.with_suffix(".critic.mlp"))
        return cls(actor, critic, Normalizer(**meta["normalizer"]), meta["dofs"],
                   meta["hand_dim"], meta["object_dim"])


# ---------------------------------------------------------------------------
# reward and advantages


@dataclass(frozen=True)
class RewardConfig:
    k_h: float = 5.0
    k_o: float = 5.0
    bonus: float = 25.0
    epsilon_o: float = 0.01

    def __post_init__(self):
        if not (self.k_h > 0 and self.k_o > 0 and self.bonus >= 0 and self.epsilon_o > 0):
            raise ValueError(f"invalid reward config {self}")


def tracking_reward(cfg: RewardConfig, achieved_hand, ref_hand, achieved_obj, ref_obj):
    """Return ``(total, r_hand, r_object, bonus_fired)``; works on single vectors or batches."""
    arrays = [np.asarray(a, dtype=float) for a in (achieved_hand, ref_hand, achieved_obj, ref_obj)]
    if arrays[0].shape != arrays[1].shape or arrays[2].shape != arrays[3].shape:
        raise ValueError("achieved and reference shapes differ")
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise ValueError("non-finite input to tracking_reward")
    eh = np.sum((arrays[0] - arrays[1]) ** 2, axis=-1)
    eo = np.sum((arrays[2] - arrays[3]) ** 2, axis=-1)
    r_h = np.exp(-cfg.k_h * eh)
    r_o = np.exp(-cfg.k_o * eo)
    fired = eo < cfg.epsilon_o
    total = r_h + r_o + np.where(fired, cfg.bonus, 0.0)
    if total.ndim == 0:
        return float(total), float(r_h), float(r_o), bool(fired)
    return total, r_h, r_o, fired


def compute_gae(rewards, values, gamma: float, lam: float, dones=None):
    """Generalized advantage estimates and returns (advantages + values).

    ``dones[i]`` marks the last step of an episode; nothing is bootstrapped
    across it and the value after a terminal step is zero. Without ``dones``
    the whole sequence is a single episode.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape or r.ndim != 1:
        raise ValueError(f"rewards {r.shape} and values {v.shape} must be equal-length vectors")
    d = np.zeros(len(r), dtype=bool) if dones is None else np.asarray(dones, dtype=bool)
    if d.shape != r.shape:
        raise ValueError("dones must align with rewards")
    if len(r):
        d = d.copy()
        d[-1] = True
    adv = np.zeros_like(r)
    last = 0.0
    for t in range(len(r) - 1, -1, -1):
        nonterminal = 0.0 if d[t] else 1.0
        next_v = v[t + 1] if t + 1 < len(r) else 0.0
        delta = r[t] + gamma * next_v * nonterminal - v[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + v


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + eps)


# ---------------------------------------------------------------------------
# PPO


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    epochs: int = 8
    lr: float = 2e-6
    # the value regression needs a far larger step than the actor
    critic_lr: float = 1e-3
    gamma: float = 0.98
    lam: float = 0.97
    episodes: int = 20
    minibatch: int = 256
    # critic regresses returns / value_scale
    value_scale: float = 100.0

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not 0 <= self.lam <= 1 or not 0 < self.gamma <= 1:
            raise ValueError("need 0 <= lambda <= 1 and 0 < gamma <= 1")
        if self.epochs < 1 or self.episodes < 1 or self.minibatch < 1:
            raise ValueError("epochs, episodes and minibatch must be positive")


@dataclass
class RolloutBatch:
    inputs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    def finish(self, gamma: float, lam: float) -> "RolloutBatch":
        adv, ret = compute_gae(self.rewards, self.values, gamma, lam, self.dones)
        self.returns = ret
        self.advantages = normalize_advantages(adv)
        return self


class PpoOptimizers:
    def __init__(self, policy: RefinementPolicy, cfg: PpoConfig):
        self.actor = pn.Adam(policy.actor.arrays, cfg.lr)
        self.critic = pn.Adam(policy.critic.arrays, cfg.critic_lr)


def surrogate_grad(actor: pn.GaussianPolicy, x, actions, advantages, old_log_probs, clip: float):
    """Clipped-surrogate loss ``-mean(min(rho A, clip(rho) A))``, its parameter gradient and rho.

    Samples whose clipped branch is the minimum contribute no gradient.
    """
    A = np.asarray(advantages, dtype=float)
    logp = pn.log_prob(actor, x, actions)
    ratio = np.exp(logp - old_log_probs)
    surr = np.minimum(ratio * A, np.clip(ratio, 1 - clip, 1 + clip) * A)
    loss = -float(np.mean(surr))
    active = ((A > 0) & (ratio < 1 + clip)) | ((A < 0) & (ratio > 1 - clip))
    weights = np.where(active, -A * ratio / len(A), 0.0)
    _, grads = pn.log_prob_grad(actor, x, actions, weights)
    return loss, grads, ratio


def ppo_update(policy: RefinementPolicy, batch: RolloutBatch, cfg: PpoConfig,
               rng: np.random.Generator, optim: PpoOptimizers | None = None,
               update_critic: bool = True) -> dict:
    """Clipped-surrogate actor steps and value regression, in place.

    Returns diagnostics: mean ratio, clip fraction, actor and critic loss
    (averaged over minibatches) and the ratios of the very first minibatch.
    """
    if batch.advantages is None:
        raise ValueError("call batch.finish() before ppo_update")
    optim = optim or PpoOptimizers(policy, cfg)
    N = len(batch)
    eps = cfg.clip
    ratios, clipped, a_losses, c_losses = [], [], [], []
    first_ratio = None
    for _ in range(cfg.epochs):
        order = rng.permutation(N)
        for start in range(0, N, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            x, a, A = batch.inputs[idx], batch.actions[idx], batch.advantages[idx]
            a_loss, grads, ratio = surrogate_grad(policy.actor, x, a, A, batch.log_probs[idx], eps)
            if first_ratio is None:
                first_ratio = ratio.copy()

            target = batch.returns[idx] / cfg.value_scale
            v = pn.forward(policy.critic, x)[:, 0]
            c_loss = float(np.mean((v - target) ** 2))
            if not (math.isfinite(a_loss) and math.isfinite(c_loss)):
                raise NumericalError("non-finite PPO loss", {
                    "actor_loss": a_loss, "critic_loss": c_loss,
                    "mean_ratio": float(np.mean(ratio)),
                })
            optim.actor.step(grads.arrays)
            policy.actor.clamp()
            if update_critic:
                cg = pn.backward(policy.critic, x, (2.0 * (v - target) / len(idx))[:, None])
                optim.critic.step(cg.arrays)
            ratios.append(ratio)
            clipped.append(np.abs(ratio - 1.0) > eps)
            a_losses.append(a_loss)
            c_losses.append(c_loss)
    r = np.concatenate(ratios)
    return {
        "mean_ratio": float(r.mean()),
        "clip_fraction": float(np.concatenate(clipped).mean()),
        "actor_loss": float(np.mean(a_losses)),
        "critic_loss": float(np.mean(c_losses)),
        "first_ratios": first_ratio,
    }


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeRecord:
    """Per-episode arrays for a batch of B episodes of horizon T."""

    hands: np.ndarray          # (B, T, n) achieved
    objects: np.ndarray        # (B, T, m) achieved
    ref_hands: np.ndarray      # (B, T, n)
    ref_objects: np.ndarray    # (B, T, m)
    targets: np.ndarray        # (B, T, n) full PD targets, row 0 unused
    rewards: np.ndarray        # (B, T-1)
    bonus: np.ndarray          # (B, T-1) bool
    alive: np.ndarray          # (B, T-1) bool, False after a simulation blow-up
    success: np.ndarray        # (B,)
    inputs: np.ndarray | None = None      # (B, T-1, d) normalized
    actions: np.ndarray | None = None     # (B, T-1, a) normalized
    log_probs: np.ndarray | None = None   # (B, T-1)


def run_episodes(model: KoopmanModel, config: EnvConfig, seeds, policy: RefinementPolicy | None = None,
                 reward_cfg: RewardConfig = RewardConfig(), noise_seeds=None,
                 stochastic: bool = False) -> EpisodeRecord:
    """Roll out B episodes in lockstep.

    With ``policy=None`` the prior's hand references are tracked directly
    (motion generation + PD). Otherwise the refined DoFs come from the policy
    (mean action unless ``stochastic``) and the others from the prior.
    ``noise_seeds[i]`` seeds the exploration noise stream of episode i.
    """
    seeds = list(seeds)
    state, obs = reset_batch(config, seeds)
    B, T = len(seeds), config.horizon
    ref_h, ref_o = rollout_batch(model, obs.hand, obs.object, T)
    n, m = ref_h.shape[2], ref_o.shape[2]
    hands = np.zeros((B, T, n))
    objects = np.zeros((B, T, m))
    hands[:, 0], objects[:, 0] = obs.hand, obs.object
    targets = np.zeros((B, T, n))
    rewards = np.zeros((B, T - 1))
    bonus = np.zeros((B, T - 1), dtype=bool)
    alive = np.ones((B, T - 1), dtype=bool)
    ok = np.ones(B, dtype=bool)

    rec_inputs = rec_actions = rec_logp = None
    if policy is not None:
        dofs = list(policy.dofs)
        a_dim = len(dofs)
        refined = np.zeros((B, T, a_dim))
        refined[:, 0] = ref_h[:, 0][:, dofs]
        rec_inputs = np.zeros((B, T - 1, policy.layout.dim))
        rec_actions = np.zeros((B, T - 1, a_dim))
        rec_logp = np.zeros((B, T - 1))
        if stochastic:
            if noise_seeds is None:
                raise ValueError("stochastic rollouts need noise seeds")
            noise = np.stack([np.random.default_rng(s).standard_normal((T - 1, a_dim)) for s in noise_seeds])
        std = np.exp(policy.actor.log_std)

    for t in range(1, T):
        k = t - 1  # 0-based step index
        target = ref_h[:, t].copy()
        if policy is not None:
            raw = build_input_batch(hands, objects, refined, ref_h, ref_o, t)
            x = policy.normalize_input(raw)
            mean = policy.actor.mean(x)
            a = mean + std * noise[:, k] if stochastic else mean
            rec_inputs[:, k] = x
            rec_actions[:, k] = a
            rec_logp[:, k] = pn._gauss_logp(mean, policy.actor.log_std, a)
            refined[:, t] = policy.denormalize_action(a)
            target[:, dofs] = refined[:, t]
        targets[:, t] = target
        state, obs, finite = step_batch(config, state, target, check=False)
        if not finite.all():
            for i in np.where(ok & ~finite)[0]:
                log.warning("episode %s: simulation blew up at step %d; truncated", seeds[i], t)
        ok &= finite
        alive[:, k] = ok
        hands[:, t], objects[:, t] = obs.hand, obs.object
        r, _, _, fired = tracking_reward(reward_cfg, obs.hand, ref_h[:, t], obs.object[:, :2], ref_o[:, t, :2])
        rewards[:, k] = np.where(ok, r, 0.0)
        bonus[:, k] = fired & ok
    succ = success_batch(objects, config) & ok
    return EpisodeRecord(hands, objects, ref_h, ref_o, targets, rewards, bonus, alive, succ,
                         rec_inputs, rec_actions, rec_logp)


def to_batch(rec: EpisodeRecord, policy: RefinementPolicy, cfg: PpoConfig) -> RolloutBatch:
    """Flatten episodes (dropping steps after a blow-up) into a PPO batch with GAE."""
    xs, acts, rs, lps, dones = [], [], [], [], []
    for i in range(len(rec.rewards)):
        steps = int(rec.alive[i].sum()) if not rec.alive[i].all() else rec.rewards.shape[1]
        steps = max(steps, 1)
        xs.append(rec.inputs[i, :steps])
        acts.append(rec.actions[i, :steps])
        rs.append(rec.rewards[i, :steps])
        lps.append(rec.log_probs[i, :steps])
        d = np.zeros(steps, dtype=bool)
        d[-1] = True
        dones.append(d)
    x = np.concatenate(xs)
    batch = RolloutBatch(
        inputs=x,
        actions=np.concatenate(acts),
        rewards=np.concatenate(rs),
        values=policy.value(x, cfg.value_scale),
        log_probs=np.concatenate(lps),
        dones=np.concatenate(dones),
    )
    return batch.finish(cfg.gamma, cfg.lam)


def episode_seeds(seed: int, iteration: int, count: int) -> list[list[int]]:
    return [[seed, iteration, k] for k in range(count)]


# ---------------------------------------------------------------------------
# warm start


def warm_start_data(model: KoopmanModel, config: EnvConfig, policy: RefinementPolicy, seeds):
    """Inputs (raw) and labels (normalized) from prior rollouts treated as perfectly tracked."""
    _, obs = reset_batch(config, list(seeds))
    T = config.horizon
    ref_h, ref_o = rollout_batch(model, obs.hand, obs.object, T)
    dofs = list(policy.dofs)
    # the target issued at step k is the prior state at k+1; row 0 is the initial prior
    refined = np.concatenate([ref_h[:, :1, dofs], ref_h[:, 1:, dofs]], axis=1)
    xs, ys = [], []
    for t in range(1, T):
        xs.append(build_input_batch(ref_h, ref_o, refined, ref_h, ref_o, t))
        ys.append(ref_h[:, t][:, dofs])
    X = np.concatenate(xs)
    Y = policy.normalize_action(np.concatenate(ys))
    return X, Y


def bc_deviation(policy: RefinementPolicy, X_raw: np.ndarray, Y: np.ndarray) -> float:
    """RMS gap (normalized units) between the actor mean and the prior labels."""
    pred = policy.actor.mean(policy.normalize_input(X_raw))
    return float(np.sqrt(np.mean((pred - Y) ** 2)))


def warm_start(policy: RefinementPolicy, model: KoopmanModel, config: EnvConfig, n_episodes: int = 100,
               noise_std: float = 0.01, bc_epochs: int = 100, seed: int = 0, lr: float = 1e-3,
               minibatch: int = 256, data=None):
    """Behaviour-clone the prior's next-step hand targets into the actor mean, in place.

    Inputs get fresh zero-mean Gaussian noise (std ``noise_std``, normalized
    units) every epoch while labels stay clean. The step size decays linearly
    from ``lr`` to ``lr / 10``. Returns ``(final_loss, history)``.
    """
    rng = np.random.default_rng([seed, 7])
    if data is None:
        data = warm_start_data(model, config, policy, [[seed, 1_000_003, k] for k in range(n_episodes)])
    X_raw, Y = data
    X = policy.normalize_input(X_raw)
    opt = pn.Adam(policy.actor.mean_net.arrays, lr)
    history = []
    rising = 0
    for epoch in range(bc_epochs):
        # linear decay to a tenth keeps the loss from rattling at its floor
        opt.lr = lr * (1.0 - 0.9 * epoch / max(bc_epochs - 1, 1))
        order = rng.permutation(len(X))
        Xn = X + noise_std * rng.standard_normal(X.shape) if noise_std > 0 else X
        losses = []
        for start in range(0, len(X), minibatch):
            idx = order[start:start + minibatch]
            pred = pn.forward(policy.actor.mean_net, Xn[idx])
            diff = pred - Y[idx]
            losses.append(float(np.mean(diff * diff)) * len(idx))
            g = pn.backward(policy.actor.mean_net, Xn[idx], 2.0 * diff / diff.size)
            opt.step(g.arrays)
        loss = sum(losses) / len(X)
        if not math.isfinite(loss):
            raise NumericalError("behaviour cloning loss is not finite", {"history": history})
        rising = rising + 1 if history and loss > history[-1] else 0
        history.append(loss)
        if rising >= 5:
            raise NumericalError(f"behaviour cloning diverged at epoch {epoch}", {"history": history})
    return history[-1] if history else float("nan"), history


# ---------------------------------------------------------------------------
# training loop


METRIC_FIELDS = ("iteration", "mean_reward", "success_rate", "clip_fraction",
                 "actor_loss", "critic_loss", "wall_seconds")


def train_emulation(policy: RefinementPolicy, model: KoopmanModel, config: EnvConfig,
                    ppo_cfg: PpoConfig = PpoConfig(), reward_cfg: RewardConfig = RewardConfig(),
                    iterations: int = 300, seed: int = 0, callback=None) -> list[dict]:
    """PPO on the tracking reward; updates ``policy`` in place and returns per-iteration metrics.

    ``callback(iteration, policy, metrics)`` runs after each update; returning
    True stops training early.
    """
    optim = PpoOptimizers(policy, ppo_cfg)
    rng = np.random.default_rng([seed, 11])
    metrics = []
    for it in range(1, iterations + 1):
        t0 = time.perf_counter()
        seeds = episode_seeds(seed, it, ppo_cfg.episodes)
        noise_seeds = [[seed, it, k, 1] for k in range(ppo_cfg.episodes)]
        rec = run_episodes(model, config, seeds, policy, reward_cfg, noise_seeds, stochastic=True)
        batch = to_batch(rec, policy, ppo_cfg)
        diag = ppo_update(policy, batch, ppo_cfg, rng, optim)
        row = {
            "iteration": it,
            "mean_reward": float(rec.rewards.sum(axis=1).mean()),
            "success_rate": float(rec.success.mean()),
            "clip_fraction": diag["clip_fraction"],
            "actor_loss": diag["actor_loss"],
            "critic_loss": diag["critic_loss"],
            "wall_seconds": time.perf_counter() - t0,
        }
        metrics.append(row)
        log.info("iter %d reward %.1f success %.2f clip %.3f", it, row["mean_reward"],
                 row["success_rate"], row["clip_fraction"])
        if callback is not None and callback(it, policy, row):
            break
    return metrics


def evaluate(model: KoopmanModel, config: EnvConfig, seeds, policy: RefinementPolicy | None = None,
             reward_cfg: RewardConfig = RewardConfig(), batch: int = 100) -> EpisodeRecord:
    """Deterministic evaluation (mean actions) in chunks; returns the concatenated record."""
    seeds = list(seeds)
    recs = [run_episodes(model, config, seeds[s:s + batch], policy, reward_cfg)
            for s in range(0, len(seeds), batch)]
    if len(recs) == 1:
        return recs[0]
    merged = {}
    for f in EpisodeRecord.__dataclass_fields__:
        vals = [getattr(r, f) for r in recs]
        merged[f] = None if vals[0] is None else np.concatenate(vals)
    return EpisodeRecord(**merged)


@dataclass
class ValidationStop:
    """Training callback: every ``every`` iterations, evaluate the mean policy on
    fixed validation seeds and stop once success reaches ``threshold``."""

    model: KoopmanModel
    config: EnvConfig
    seeds: list
    every: int = 20
    threshold: float = 0.9
    history: list = None

    def __post_init__(self):
        self.history = []

    def __call__(self, iteration: int, policy: RefinementPolicy, row: dict) -> bool:
        if iteration % self.every:
            return False
        rate = float(evaluate(self.model, self.config, self.seeds, policy).success.mean())
        self.history.append((iteration, rate))
        log.info("iter %d validation success %.2f", iteration, rate)
        return rate >= self.threshold
