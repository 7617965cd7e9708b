"""State-only observation datasets and the CIMER-TRAJ v1 text format.

A file looks like::

    CIMER-TRAJ v1 n=5 m=4 dt=0.01
    <n+m decimals>      # one line per timestep
    ...
                        # one blank line between trajectories
    <n+m decimals>
    ...
                        # every trajectory, including the last, ends with a blank line

Values are written with 17 significant digits so that doubles round-trip exactly.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = "CIMER-TRAJ v1"
_HEADER_RE = re.compile(r"^CIMER-TRAJ v1 n=(-?\d+) m=(-?\d+) dt=(\S+)$")


class DatasetError(ValueError):
    """Invalid dataset contents or a malformed dataset file."""


def fmt(x: float) -> str:
    return "%.17g" % x


@dataclass(frozen=True)
class TrajectorySample:
    hand: np.ndarray
    object: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "hand", np.asarray(self.hand, dtype=float).reshape(-1))
        object.__setattr__(self, "object", np.asarray(self.object, dtype=float).reshape(-1))


@dataclass
class Trajectory:
    """Ordered (hand, object) samples at a fixed rate.

    Stored as two arrays, ``hands`` with shape (T, n) and ``objects`` with shape (T, m).
    """

    hands: np.ndarray
    objects: np.ndarray
    dt: float

    def __post_init__(self):
        self.hands = np.atleast_2d(np.asarray(self.hands, dtype=float))
        self.objects = np.asarray(self.objects, dtype=float)
        if self.objects.ndim == 1:
            self.objects = self.objects.reshape(len(self.hands), -1)
        self.validate()

    @classmethod
    def from_samples(cls, samples: Sequence[TrajectorySample], dt: float) -> "Trajectory":
        if not samples:
            raise DatasetError("trajectory needs at least 2 samples")
        dims = {(len(s.hand), len(s.object)) for s in samples}
        if len(dims) != 1:
            raise DatasetError(f"inconsistent sample dimensions {sorted(dims)}")
        return cls(np.stack([s.hand for s in samples]), np.stack([s.object for s in samples]), dt)

    @property
    def samples(self) -> list[TrajectorySample]:
        return [TrajectorySample(h, o) for h, o in zip(self.hands, self.objects)]

    @property
    def states(self) -> np.ndarray:
        """Concatenated (T, n+m) state matrix."""
        return np.hstack([self.hands, self.objects])

    def __len__(self) -> int:
        return len(self.hands)

    def validate(self) -> None:
        if len(self.hands) < 2:
            raise DatasetError(f"trajectory needs at least 2 samples, got {len(self.hands)}")
        if len(self.hands) != len(self.objects):
            raise DatasetError("hand and object sample counts differ")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise DatasetError(f"dt must be positive and finite, got {self.dt}")
        if not (np.all(np.isfinite(self.hands)) and np.all(np.isfinite(self.objects))):
            raise DatasetError("trajectory contains non-finite values")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.dt == other.dt
            and np.array_equal(self.hands, other.hands)
            and np.array_equal(self.objects, other.objects)
        )


@dataclass
class ObservationDataset:
    trajectories: list[Trajectory]
    hand_dim: int
    object_dim: int
    dt: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory]) -> "ObservationDataset":
        if not trajectories:
            raise DatasetError("dataset must contain at least one trajectory")
        t0 = trajectories[0]
        return cls(list(trajectories), t0.hands.shape[1], t0.objects.shape[1], t0.dt)

    def validate(self) -> None:
        if not self.trajectories:
            raise DatasetError("dataset must contain at least one trajectory")
        # object_dim == 0 is allowed in memory (pure-hand systems); files need both >= 1
        if self.hand_dim < 1 or self.object_dim < 0:
            raise DatasetError(
                f"bad dimensions n={self.hand_dim} m={self.object_dim}"
            )
        for i, tr in enumerate(self.trajectories):
            tr.validate()
            if tr.hands.shape[1] != self.hand_dim or tr.objects.shape[1] != self.object_dim:
                raise DatasetError(
                    f"trajectory {i} has dims ({tr.hands.shape[1]}, {tr.objects.shape[1]}),"
                    f" expected ({self.hand_dim}, {self.object_dim})"
                )
            if tr.dt != self.dt:
                raise DatasetError(f"trajectory {i} has dt={tr.dt}, dataset dt={self.dt}")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ObservationDataset):
            return NotImplemented
        return (
            self.hand_dim == other.hand_dim
            and self.object_dim == other.object_dim
            and self.dt == other.dt
            and self.trajectories == other.trajectories
        )


def write_dataset(dataset: ObservationDataset, path) -> None:
    dataset.validate()
    if dataset.object_dim < 1:
        raise DatasetError("CIMER-TRAJ v1 requires m >= 1")
    lines = [f"{MAGIC} n={dataset.hand_dim} m={dataset.object_dim} dt={fmt(dataset.dt)}"]
    for tr in dataset.trajectories:
        for row in tr.states:
            lines.append(" ".join(fmt(v) for v in row))
        lines.append("")
    path = Path(path)
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc


def read_dataset(path) -> ObservationDataset:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    lines = text.split("\n")
    m = _HEADER_RE.match(lines[0].strip()) if lines else None
    if m is None:
        raise DatasetError(f"{path}:1: malformed header {lines[0][:60]!r}")
    n, mdim = int(m.group(1)), int(m.group(2))
    try:
        dt = float(m.group(3))
    except ValueError:
        raise DatasetError(f"{path}:1: bad dt {m.group(3)!r}") from None
    if n < 1 or mdim < 1:
        raise DatasetError(f"{path}:1: dimensions must be >= 1, got n={n} m={mdim}")
    if not (dt > 0 and math.isfinite(dt)):
        raise DatasetError(f"{path}:1: dt must be positive, got {dt}")

    if text.endswith("\n"):
        lines = lines[:-1]
    width = n + mdim
    blocks: list[list[list[float]]] = [[]]
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            if not blocks[-1]:
                raise DatasetError(f"{path}:{lineno}: unexpected blank line")
            blocks.append([])
            continue
        tokens = line.split()
        if len(tokens) != width:
            raise DatasetError(f"{path}:{lineno}: expected {width} values, got {len(tokens)}")
        try:
            row = [float(tok) for tok in tokens]
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in row):
            raise DatasetError(f"{path}:{lineno}: non-finite value")
        blocks[-1].append(row)
    if not blocks[-1]:
        blocks.pop()
    if not blocks:
        raise DatasetError(f"{path}: no trajectories")

    trajectories = []
    for block in blocks:
        arr = np.array(block, dtype=float)
        if len(arr) < 2:
            raise DatasetError(f"{path}: trajectory {len(trajectories)} has fewer than 2 samples")
        trajectories.append(Trajectory(arr[:, :n], arr[:, n:], dt))
    return ObservationDataset(trajectories, n, mdim, dt)


def dataset_stats(dataset: ObservationDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and population std over every sample of every trajectory."""
    data = np.vstack([tr.states for tr in dataset.trajectories])
    return data.mean(axis=0), data.std(axis=0)
