"""Command-line pipeline: gen-data -> fit-imitation -> warm-start -> train -> eval, plus robustness and transfer.

Every subcommand reads one ``key=value`` experiment config (``--config``),
derives all randomness from ``--seed`` and writes fixed file names under
``--out-dir`` so stages compose without extra arguments.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import emulation as em
from .datasets import DatasetError, read_dataset, write_dataset
from .expert import generate_dataset
from .koopman import KoopmanError, KoopmanModel, LiftingSpec, RolloutDivergence, fit_koopman, lift, rollout_batch
from .planar_env import OBJECT_VARIANTS, EnvConfig, SimulationError, _parse_field, object_variant, perturb_physics

log = logging.getLogger("cimer")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3

DATASET = "dataset.traj"
KOOPMAN = "koopman.koop"
FIT_REPORT = "fit_report.csv"
WARM_POLICY = "policy_warm"
POLICY = "policy"

# seed-stream tags keep the data, evaluation and validation episodes disjoint
DATA_STREAM, EVAL_STREAM, VAL_STREAM, ROBUST_STREAM = 100, 200, 300, 400


@dataclass
class ExperimentConfig:
    n_trajectories: int = 200
    min_expert_yield: float = 0.8
    eval_episodes: int = 100
    iterations: int = 300
    warm_start_episodes: int = 100
    bc_epochs: int = 100
    noise_std: float = 0.01
    skip_warm_start: bool = False
    val_every: int = 20
    val_episodes: int = 50
    val_threshold: float = 0.9
    robustness_levels: tuple = (0.0, 0.5, 1.0)
    draws: int = 5
    episodes_per_draw: int = 50
    transfer_threshold: float = 0.8
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: em.PpoConfig = field(default_factory=em.PpoConfig)
    reward: em.RewardConfig = field(default_factory=em.RewardConfig)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        """Top-level keys plus ``env.``, ``ppo.`` and ``reward.`` prefixed overrides."""
        cfg = cls()
        top, nested = {}, {"env": {}, "ppo": {}, "reward": {}}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            prefix, _, name = key.partition(".")
            if name and prefix in nested:
                target = getattr(cfg, prefix)
                if name not in {f.name for f in dataclasses.fields(target)}:
                    raise ValueError(f"config line {lineno}: unknown key {key!r}")
                nested[prefix][name] = _parse_field(getattr(target, name), val)
            elif key in {f.name for f in dataclasses.fields(cls)} and key not in nested:
                top[key] = _parse_field(getattr(cfg, key), val)
            else:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
        for prefix, kw in nested.items():
            top[prefix] = dataclasses.replace(getattr(cfg, prefix), **kw)
        out = dataclasses.replace(cfg, **top)
        out.validate()
        return out

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def validate(self) -> None:
        for name in ("n_trajectories", "eval_episodes", "iterations", "warm_start_episodes",
                     "val_every", "val_episodes", "draws", "episodes_per_draw"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if any(not 0.0 <= j <= 1.0 for j in self.robustness_levels):
            raise ValueError("robustness levels must lie in [0, 1]")


def _seeds(seed: int, stream: int, count: int, offset: int = 0) -> list[list[int]]:
    return [[seed, stream, offset + k] for k in range(count)]


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _load_stack(out: Path):
    path = out / DATASET
    dataset = read_dataset(path)
    model = KoopmanModel.load(out / KOOPMAN)
    return dataset, model


def _metrics_rows(metrics):
    return [[m[k] for k in em.METRIC_FIELDS] for m in metrics]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    n = cfg.n_trajectories if args.n is None else args.n
    if n < 1:
        raise ValueError("need at least one trajectory")
    dataset, ok = generate_dataset(cfg.env, _seeds(args.seed, DATA_STREAM, n))
    print(f"expert succeeded on {ok}/{n} seeds")
    if ok < cfg.min_expert_yield * n:
        print(f"expert yield {ok / n:.2f} below {cfg.min_expert_yield:.2f}", file=sys.stderr)
        return EXIT_INVALID
    write_dataset(dataset, args.out_dir / DATASET)
    print(f"wrote {args.out_dir / DATASET}")
    return EXIT_OK


def fit_report(dataset, model: KoopmanModel) -> dict:
    """One-step prediction errors and open-loop object-position error at the horizon."""
    spec = model.spec
    n = spec.hand_dim
    hand_err, obj_err, final = [], [], []
    for tr in dataset.trajectories:
        z = lift(spec, tr.hands, tr.objects)
        pred = z[:-1] @ model.K.T
        hand_err.append(np.abs(pred[:, :n] - z[1:, :n]).mean())
        off = spec.object_offset
        obj_err.append(np.abs(pred[:, off:off + spec.object_dim] - z[1:, off:off + spec.object_dim]).mean())
    h0 = np.stack([tr.hands[0] for tr in dataset.trajectories])
    o0 = np.stack([tr.objects[0] for tr in dataset.trajectories])
    T = min(len(tr.hands) for tr in dataset.trajectories)
    _, ro = rollout_batch(model, h0, o0, T)
    truth = np.stack([tr.objects[T - 1] for tr in dataset.trajectories])
    final = np.linalg.norm(ro[:, -1, :2] - truth[:, :2], axis=1)
    return {
        "trajectories": len(dataset.trajectories),
        "one_step_hand_mae": float(np.mean(hand_err)),
        "one_step_object_mae": float(np.mean(obj_err)),
        "rollout_final_position_error_mean": float(final.mean()),
        "rollout_final_position_error_median": float(np.median(final)),
        "rollout_final_position_error_p90": float(np.quantile(final, 0.9)),
        "rollout_final_position_error_max": float(final.max()),
    }


def cmd_fit_imitation(args, cfg: ExperimentConfig) -> int:
    path = Path(args.dataset) if args.dataset else args.out_dir / DATASET
    dataset = read_dataset(path)
    if not dataset.trajectories:
        raise DatasetError(f"{path}: no trajectories")
    model = fit_koopman(dataset, LiftingSpec(dataset.hand_dim, dataset.object_dim, 2))
    model.save(args.out_dir / KOOPMAN)
    report = fit_report(dataset, model)
    _write_csv(args.out_dir / FIT_REPORT, ["metric", "value"], report.items())
    for k, v in report.items():
        print(f"{k}: {v}")
    return EXIT_OK


def _warm_policy(args, cfg: ExperimentConfig, dataset, model, env: EnvConfig):
    policy = em.RefinementPolicy.create(em.Normalizer.from_dataset(dataset), env.refined_dofs, args.seed)
    if cfg.skip_warm_start:
        return policy, []
    _, history = em.warm_start(policy, model, env, cfg.warm_start_episodes, cfg.noise_std,
                               cfg.bc_epochs, seed=args.seed)
    return policy, history


def cmd_warm_start(args, cfg: ExperimentConfig) -> int:
    dataset, model = _load_stack(args.out_dir)
    policy, history = _warm_policy(args, cfg, dataset, model, cfg.env)
    held = em.warm_start_data(model, cfg.env, policy, _seeds(args.seed, VAL_STREAM, 20))
    policy.save(args.out_dir / WARM_POLICY)
    _write_csv(args.out_dir / "warm_start.csv", ["epoch", "loss"], enumerate(history, start=1))
    print(f"final loss {history[-1] if history else float('nan'):.3e}; "
          f"held-out deviation {em.bc_deviation(policy, *held):.4f}")
    return EXIT_OK


def _train(args, cfg, policy, model, env, iterations, threshold):
    stop = em.ValidationStop(model, env, _seeds(args.seed, VAL_STREAM, cfg.val_episodes),
                             every=cfg.val_every, threshold=threshold)
    metrics = em.train_emulation(policy, model, env, cfg.ppo, cfg.reward, iterations,
                                 seed=args.seed, callback=stop)
    return metrics, stop.history


def cmd_train(args, cfg: ExperimentConfig) -> int:
    dataset, model = _load_stack(args.out_dir)
    warm = args.out_dir / WARM_POLICY
    if warm.with_suffix(".json").exists() and not cfg.skip_warm_start:
        policy = em.RefinementPolicy.load(warm)
    else:
        policy, _ = _warm_policy(args, cfg, dataset, model, cfg.env)
    iterations = cfg.iterations if args.iterations is None else args.iterations
    metrics, val = _train(args, cfg, policy, model, cfg.env, iterations, cfg.val_threshold)
    policy.save(args.out_dir / POLICY)
    _write_csv(args.out_dir / "train_metrics.csv", em.METRIC_FIELDS, _metrics_rows(metrics))
    _write_csv(args.out_dir / "train_validation.csv", ["iteration", "success_rate"], val)
    print(f"trained {len(metrics)} iterations; last validation {val[-1] if val else None}")
    return EXIT_OK


def evaluate_mode(out: Path, cfg: ExperimentConfig, mode: str, episodes: int, seed: int,
                  env: EnvConfig | None = None, policy_name: str = POLICY):
    model = KoopmanModel.load(out / KOOPMAN)
    policy = em.RefinementPolicy.load(out / policy_name) if mode == "cimer" else None
    return em.evaluate(model, env or cfg.env, _seeds(seed, EVAL_STREAM, episodes), policy, cfg.reward)


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    episodes = cfg.eval_episodes if args.episodes is None else args.episodes
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    rec = evaluate_mode(args.out_dir, cfg, args.mode, episodes, args.seed)
    returns = rec.rewards.sum(axis=1)
    rows = [[k, bool(rec.success[k]), float(returns[k]), float(np.linalg.norm(rec.objects[k, -1, :2]))]
            for k in range(episodes)]
    _write_csv(args.out_dir / f"eval_{args.mode}.csv", ["episode", "success", "return", "final_distance"], rows)
    print(f"{args.mode} success rate {rec.success.mean():.3f} over {episodes} episodes")
    return EXIT_OK


def robustness_table(out: Path, cfg: ExperimentConfig, seed: int, levels, mode: str = "cimer"):
    rows = []
    for j in levels:
        rng = np.random.default_rng([seed, ROBUST_STREAM, int(round(j * 1000))])
        rates = []
        for _ in range(cfg.draws):
            env = perturb_physics(cfg.env, j, rng)
            rates.append(float(evaluate_mode(out, cfg, mode, cfg.episodes_per_draw, seed, env).success.mean()))
        rows.append([j, float(np.mean(rates)), float(np.std(rates)), cfg.draws, cfg.episodes_per_draw])
    return rows


def cmd_robustness(args, cfg: ExperimentConfig) -> int:
    levels = cfg.robustness_levels if args.levels is None else tuple(args.levels)
    if any(not 0.0 <= j <= 1.0 for j in levels):
        raise ValueError("variation levels must lie in [0, 1]")
    rows = robustness_table(args.out_dir, cfg, args.seed, levels, args.mode)
    _write_csv(args.out_dir / "robustness.csv",
               ["level", "mean_success", "std_success", "draws", "episodes_per_draw"], rows)
    for r in rows:
        print(f"j={r[0]:.2f} success {r[1]:.3f} +/- {r[2]:.3f}")
    return EXIT_OK


def cmd_transfer(args, cfg: ExperimentConfig) -> int:
    env = object_variant(cfg.env, args.variant)
    dataset, model = _load_stack(args.out_dir)
    if args.from_scratch:
        policy, _ = _warm_policy(args, cfg, dataset, model, env)
        tag = "scratch"
    else:
        policy = em.RefinementPolicy.load(args.out_dir / POLICY)
        tag = "finetune"
    iterations = cfg.iterations if args.iterations is None else args.iterations
    val_seeds = _seeds(args.seed, VAL_STREAM, cfg.val_episodes)
    start = float(em.evaluate(model, env, val_seeds, policy, cfg.reward).success.mean())
    curve = [(0, start)]
    metrics = []
    if start < cfg.transfer_threshold:
        metrics, val = _train(args, cfg, policy, model, env, iterations, cfg.transfer_threshold)
        curve += val
    reached = next((it for it, rate in curve if rate >= cfg.transfer_threshold), None)
    name = f"transfer_{args.variant}_{tag}"
    policy.save(args.out_dir / name)
    _write_csv(args.out_dir / f"{name}.csv", em.METRIC_FIELDS, _metrics_rows(metrics))
    _write_csv(args.out_dir / f"{name}_validation.csv", ["iteration", "success_rate"], curve)
    print(f"{tag} on {args.variant}: reached {cfg.transfer_threshold:.2f} at iteration {reached}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

HELP_SCALE = (
    "Desk-scale protocol: evaluation uses 100 episodes (the full protocol uses 200) and the "
    "robustness sweep repeats each level with 5 physics draws of 50 episodes (the full protocol "
    "repeats 20 times)."
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cimer", description=__doc__.splitlines()[0], epilog=HELP_SCALE)
    parser.add_argument("--config", type=Path, help="key=value experiment config")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out-dir", type=Path, default=Path("runs"))
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="run the scripted expert and write CIMER-TRAJ v1")
    p.add_argument("--n", type=int, help="number of expert seeds (config: n_trajectories)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-imitation", help="fit the Koopman motion prior")
    p.add_argument("--dataset", help=f"trajectory file (default <out-dir>/{DATASET})")
    p.set_defaults(func=cmd_fit_imitation)

    p = sub.add_parser("warm-start", help="behaviour-clone the prior into the refinement policy")
    p.set_defaults(func=cmd_warm_start)

    p = sub.add_parser("train", help="PPO emulation training")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="success rate of motion_gen_pd or cimer", epilog=HELP_SCALE)
    p.add_argument("--mode", choices=("motion_gen_pd", "cimer"), default="cimer")
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("robustness", help="success under perturbed masses and damping", epilog=HELP_SCALE)
    p.add_argument("--levels", type=float, nargs="+")
    p.add_argument("--mode", choices=("motion_gen_pd", "cimer"), default="cimer")
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("transfer", help="fine-tune the refinement policy on an object variant")
    p.add_argument("--variant", required=True, help=f"one of {', '.join(OBJECT_VARIANTS)}")
    p.add_argument("--iterations", type=int)
    p.add_argument("--from-scratch", action="store_true", help="train a fresh policy instead")
    p.set_defaults(func=cmd_transfer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        args.out_dir.mkdir(parents=True, exist_ok=True)
        return args.func(args, cfg)
    except (em.NumericalError, SimulationError, RolloutDivergence, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, KoopmanError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
