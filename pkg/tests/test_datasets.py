import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cimer.datasets import (
    DatasetError,
    ObservationDataset,
    Trajectory,
    TrajectorySample,
    dataset_stats,
    read_dataset,
    write_dataset,
)
from oracles import two_pass_stats

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def make_dataset(rng, n=2, m=3, lengths=(4, 5, 6), dt=0.01):
    trajs = [Trajectory(rng.normal(size=(T, n)), rng.normal(size=(T, m)), dt) for T in lengths]
    return ObservationDataset.from_trajectories(trajs)


def test_single_trajectory_file_layout(tmp_path):
    tr = Trajectory.from_samples([TrajectorySample([1.0], [2.0]), TrajectorySample([3.0], [4.5])], 0.01)
    path = tmp_path / "d.traj"
    write_dataset(ObservationDataset.from_trajectories([tr]), path)
    lines = path.read_text().split("\n")[:-1]
    assert lines == ["CIMER-TRAJ v1 n=1 m=1 dt=0.01", "1 2", "3 4.5", ""]


def test_empty_dataset_rejected(tmp_path):
    with pytest.raises(DatasetError):
        ObservationDataset.from_trajectories([])
    assert not (tmp_path / "x").exists()


def test_round_trip(tmp_path, rng):
    ds = make_dataset(rng)
    write_dataset(ds, tmp_path / "d.traj")
    back = read_dataset(tmp_path / "d.traj")
    assert back == ds
    assert (back.hand_dim, back.object_dim, back.dt) == (2, 3, 0.01)


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_round_trip_property(tmp_path_factory, data):
    n = data.draw(st.integers(1, 4))
    m = data.draw(st.integers(1, 4))
    count = data.draw(st.integers(1, 3))
    dt = data.draw(st.floats(1e-4, 1.0))
    trajs = []
    for _ in range(count):
        T = data.draw(st.integers(2, 6))
        hands = data.draw(arrays(float, (T, n), elements=finite))
        objs = data.draw(arrays(float, (T, m), elements=finite))
        trajs.append(Trajectory(hands, objs, dt))
    ds = ObservationDataset.from_trajectories(trajs)
    path = tmp_path_factory.mktemp("rt") / "d.traj"
    write_dataset(ds, path)
    assert read_dataset(path) == ds


def test_short_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.traj"
    path.write_text("CIMER-TRAJ v1 n=2 m=1 dt=0.01\n1 2 3\n4 5\n\n")
    with pytest.raises(DatasetError, match=r":3: expected 3 values, got 2"):
        read_dataset(path)


@pytest.mark.parametrize("extra", [-1, 1])
def test_token_count_must_match(tmp_path, rng, extra):
    ds = make_dataset(rng, n=2, m=2, lengths=(3,))
    path = tmp_path / "d.traj"
    write_dataset(ds, path)
    lines = path.read_text().split("\n")
    tokens = lines[2].split()
    lines[2] = " ".join(tokens[:-1] if extra < 0 else tokens + ["0"])
    path.write_text("\n".join(lines))
    with pytest.raises(DatasetError, match=":3:"):
        read_dataset(path)


def test_zero_dimension_header(tmp_path):
    path = tmp_path / "z.traj"
    path.write_text("CIMER-TRAJ v1 n=0 m=1 dt=0.01\n1\n2\n\n")
    with pytest.raises(DatasetError, match="must be >= 1"):
        read_dataset(path)


def test_trailing_blank_optional(tmp_path):
    path = tmp_path / "t.traj"
    path.write_text("CIMER-TRAJ v1 n=1 m=1 dt=0.5\n1 2\n3 4\n\n5 6\n7 8")
    ds = read_dataset(path)
    assert len(ds) == 2 and ds.dt == 0.5


def test_non_finite_and_bad_header(tmp_path):
    path = tmp_path / "n.traj"
    path.write_text("CIMER-TRAJ v1 n=1 m=1 dt=0.5\n1 nan\n3 4\n")
    with pytest.raises(DatasetError, match=":2:"):
        read_dataset(path)
    path.write_text("CIMER-TRAJ v2 n=1 m=1 dt=0.5\n1 2\n3 4\n")
    with pytest.raises(DatasetError, match=":1:"):
        read_dataset(path)


def test_mixed_rates_rejected(rng):
    a = Trajectory(rng.normal(size=(3, 1)), rng.normal(size=(3, 1)), 0.01)
    b = Trajectory(rng.normal(size=(3, 1)), rng.normal(size=(3, 1)), 0.02)
    with pytest.raises(DatasetError, match="dt"):
        ObservationDataset.from_trajectories([a, b])


def test_stats_examples():
    same = Trajectory(np.ones((4, 2)), np.full((4, 1), 3.0), 0.1)
    mean, std = dataset_stats(ObservationDataset.from_trajectories([same]))
    assert np.array_equal(std, np.zeros(3)) and np.array_equal(mean, [1, 1, 3])

    two = Trajectory(np.array([[0.0], [2.0]]), np.zeros((2, 1)), 0.1)
    mean, std = dataset_stats(ObservationDataset.from_trajectories([two]))
    assert mean[0] == 1.0 and std[0] == 1.0


def test_stats_match_two_pass_oracle(rng):
    ds = make_dataset(rng, lengths=(7, 3, 11))
    mean, std = dataset_stats(ds)
    rows = [row for tr in ds.trajectories for row in tr.states]
    om, os_ = two_pass_stats(rows)
    np.testing.assert_allclose(mean, om, atol=1e-12)
    np.testing.assert_allclose(std, os_, atol=1e-12)


def test_stats_permutation_invariant(rng):
    ds = make_dataset(rng, lengths=(5, 8))
    rows = np.vstack([tr.states for tr in ds.trajectories])
    perm = rows[rng.permutation(len(rows))]
    shuffled = ObservationDataset.from_trajectories([Trajectory(perm[:, :2], perm[:, 2:], 0.01)])
    a, b = dataset_stats(ds), dataset_stats(shuffled)
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    np.testing.assert_allclose(a[1], b[1], atol=1e-12)
