"""Koopman motion generation: quadratic lifting, least-squares fit, autonomous rollout.

The lifted state is ``[h, psi(h), o, psi(o)]`` where ``psi`` lists every
degree-2 monomial ``x_i * x_j`` (i <= j) in lexicographic order. Hand and
object blocks are lifted separately and there is no constant term, so the
raw states sit at fixed offsets and can be read back without a decoder.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import ObservationDataset, fmt

BLOWUP = 1e12
KOOP_MAGIC = "CIMER-KOOP v1"


class KoopmanError(ValueError):
    pass


class RolloutDivergence(KoopmanError):
    """The lifted rollout left the finite range."""


@dataclass(frozen=True)
class LiftingSpec:
    hand_dim: int
    object_dim: int
    order: int = 2

    def __post_init__(self):
        if self.order != 2:
            raise KoopmanError("only second-order lifting is supported")
        if self.hand_dim < 0 or self.object_dim < 0 or self.hand_dim + self.object_dim == 0:
            raise KoopmanError(f"bad dimensions n={self.hand_dim} m={self.object_dim}")

    @property
    def hand_lift_dim(self) -> int:
        n = self.hand_dim
        return n + n * (n + 1) // 2

    @property
    def object_offset(self) -> int:
        return self.hand_lift_dim

    @property
    def lifted_dim(self) -> int:
        m = self.object_dim
        return self.hand_lift_dim + m + m * (m + 1) // 2


def _quad(x: np.ndarray) -> np.ndarray:
    """Degree-2 monomials of the last axis, (i, j) with i <= j in lexicographic order."""
    d = x.shape[-1]
    iu, ju = np.triu_indices(d)
    return x[..., iu] * x[..., ju]


def lift(spec: LiftingSpec, hand, obj) -> np.ndarray:
    """Lift one state, or a batch when ``hand``/``obj`` carry a leading axis."""
    hand = np.asarray(hand, dtype=float)
    obj = np.asarray(obj, dtype=float)
    if hand.shape[-1:] != (spec.hand_dim,) or obj.shape[-1:] != (spec.object_dim,):
        raise KoopmanError(
            f"state dims ({hand.shape[-1:]}, {obj.shape[-1:]}) do not match "
            f"spec ({spec.hand_dim}, {spec.object_dim})"
        )
    return np.concatenate([hand, _quad(hand), obj, _quad(obj)], axis=-1)


def retrieve(spec: LiftingSpec, lifted) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(lifted, dtype=float)
    if z.shape[-1:] != (spec.lifted_dim,):
        raise KoopmanError(f"lifted vector has dim {z.shape[-1:]}, expected {spec.lifted_dim}")
    off = spec.object_offset
    return z[..., : spec.hand_dim].copy(), z[..., off : off + spec.object_dim].copy()


def pinv(a: np.ndarray, rtol: float) -> np.ndarray:
    """Moore-Penrose inverse by SVD; singular values below ``rtol * s_max`` count as zero."""
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(a.shape[::-1])
    keep = s > rtol * s[0]
    return (vt[keep].T / s[keep]) @ u[:, keep].T


@dataclass(frozen=True)
class KoopmanModel:
    spec: LiftingSpec
    K: np.ndarray

    def __post_init__(self):
        p = self.spec.lifted_dim
        K = np.asarray(self.K, dtype=float)
        if K.shape != (p, p):
            raise KoopmanError(f"K has shape {K.shape}, expected ({p}, {p})")
        if not np.all(np.isfinite(K)):
            raise KoopmanError("K contains non-finite entries")
        K.setflags(write=False)
        object.__setattr__(self, "K", K)

    def save(self, path) -> None:
        s = self.spec
        lines = [f"{KOOP_MAGIC} {s.hand_dim} {s.object_dim} {s.order}"]
        lines += [" ".join(fmt(v) for v in row) for row in self.K]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "KoopmanModel":
        lines = Path(path).read_text().splitlines()
        head = lines[0].split() if lines else []
        if len(head) != 5 or " ".join(head[:2]) != KOOP_MAGIC:
            raise KoopmanError(f"{path}:1: malformed header")
        spec = LiftingSpec(int(head[2]), int(head[3]), int(head[4]))
        rows = [line.split() for line in lines[1:] if line.strip()]
        try:
            K = np.array([[float(v) for v in row] for row in rows])
        except ValueError as exc:
            raise KoopmanError(f"{path}: {exc}") from None
        return cls(spec, K)


def lifted_pairs(dataset: ObservationDataset, spec: LiftingSpec):
    """Yield ``(Z_t, Z_{t+1})`` lifted transition matrices, one pair per trajectory."""
    for tr in dataset.trajectories:
        z = lift(spec, tr.hands, tr.objects)
        yield z[:-1], z[1:]


def fit_koopman(dataset: ObservationDataset, spec: LiftingSpec) -> KoopmanModel:
    """K = A G^+ with A, G the averaged lifted outer products over all transitions."""
    if (dataset.hand_dim, dataset.object_dim) != (spec.hand_dim, spec.object_dim):
        raise KoopmanError("dataset and lifting spec dimensions differ")
    dataset.validate()
    p = spec.lifted_dim
    A = np.zeros((p, p))
    G = np.zeros((p, p))
    N = len(dataset.trajectories)
    for z0, z1 in lifted_pairs(dataset, spec):
        w = 1.0 / (N * len(z0))
        A += w * (z1.T @ z0)
        G += w * (z0.T @ z0)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(G))):
        raise KoopmanError("non-finite lifted statistics")
    return KoopmanModel(spec, A @ pinv(G, rtol=1e-12 * p))


def training_residual(K: np.ndarray, dataset: ObservationDataset, spec: LiftingSpec) -> float:
    """Squared Frobenius one-step residual sum ||Z_{t+1} - K Z_t||^2 over all transitions."""
    total = 0.0
    for z0, z1 in lifted_pairs(dataset, spec):
        total += float(np.sum((z1 - z0 @ K.T) ** 2))
    return total


@dataclass
class ReferenceMotion:
    hand_refs: np.ndarray
    object_refs: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.hand_refs)


def rollout(model: KoopmanModel, hand0, object0, horizon: int) -> ReferenceMotion:
    hands, objs = rollout_batch(
        model, np.asarray(hand0, dtype=float)[None], np.asarray(object0, dtype=float)[None], horizon
    )
    return ReferenceMotion(hands[0], objs[0])


def rollout_batch(model: KoopmanModel, hand0, object0, horizon: int):
    """Roll out B initial states; returns arrays of shape (B, T, n) and (B, T, m).

    The lifted state is propagated as ``z <- K z``; retrieved states are never re-lifted.
    """
    if horizon < 1:
        raise KoopmanError(f"horizon must be >= 1, got {horizon}")
    spec = model.spec
    z = lift(spec, hand0, object0)
    out = np.empty((z.shape[0], horizon, z.shape[1]))
    out[:, 0] = z
    Kt = model.K.T
    for t in range(1, horizon):
        z = z @ Kt
        if not np.all(np.abs(z) <= BLOWUP):
            raise RolloutDivergence(f"rollout blew up at step {t + 1}")
        out[:, t] = z
    return retrieve(spec, out)
