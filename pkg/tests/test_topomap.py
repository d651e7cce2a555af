import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topodepth import topomap, worldgen
from topodepth.errors import IndexOutOfRange, PathTooShort, TooFewPoses


def line(xs, y=0.0):
    return worldgen.poses_from_arrays([(x, y) for x in xs])


def test_arc_length_collinear():
    assert topomap.arc_length(line([0, 1, 2])) == [0.0, 1.0, 2.0]


def test_arc_length_square_corners():
    poses = worldgen.poses_from_arrays([(0, 0), (3, 0), (3, 3), (0, 3)])
    assert topomap.arc_length(poses) == [0.0, 3.0, 6.0, 9.0]


def test_arc_length_stationary():
    assert topomap.arc_length(line([1.0] * 5)) == [0.0] * 5


def test_arc_length_too_few():
    with pytest.raises(TooFewPoses):
        topomap.arc_length(line([0.0]))


def test_straight_path_nodes():
    topo = topomap.build_topomap(line(np.linspace(0, 4.5, 10)), 1.5)
    assert [n.arc_length for n in topo.nodes] == [0.0, 1.5, 3.0, 4.5]
    assert not topo.loop
    np.testing.assert_allclose(topo.positions[:, 0], [0, 1.5, 3.0, 4.5], atol=1e-12)


def test_path_exactly_one_spacing():
    topo = topomap.build_topomap(line([0.0, 0.5, 1.5]), 1.5)
    assert topo.num_nodes == 2
    np.testing.assert_allclose(topo.positions, [[0, 0], [1.5, 0]])


def test_path_too_short():
    with pytest.raises(PathTooShort):
        topomap.build_topomap(line([0.0, 1.4]), 1.5)


def test_loop_closure_merges_end_node():
    # 12 m square sampled every 0.5 m: the node at 12 m coincides with node 0
    params = worldgen.TrajectoryParams(worldgen.living_room_loop(), frame_spacing=0.5)
    topo = topomap.build_topomap(worldgen.reference_trajectory(params), 1.5)
    assert topo.loop
    assert topo.num_nodes == 8
    assert abs(topo.length - 12.0) < 1e-9
    diffs = np.diff([n.arc_length for n in topo.nodes])
    np.testing.assert_allclose(diffs, 1.5, atol=1e-9)


def test_loop_keeps_short_last_node_when_far_from_start():
    # 10 m loop: nodes at 0..9 m; the 9 m node is 1 m (> 0.75) from the end, so it stays
    poses = worldgen.reference_trajectory(
        worldgen.TrajectoryParams(((0, 0), (3, 0), (3, 2), (0, 2)), frame_spacing=0.5)
    )
    topo = topomap.build_topomap(poses, 1.5)
    assert topo.num_nodes == 7 and topo.nodes[-1].arc_length == 9.0


def test_assign_node_cases():
    topo = topomap.build_topomap(line(np.linspace(0, 4.5, 10)), 1.5)
    assert topomap.assign_node(topo, topo.nodes[2].position) == 2
    assert topomap.assign_node(topo, (0.7, 0.0)) == 0
    assert topomap.assign_node(topo, (2.25, 0.0)) == 1  # equidistant from 1 and 2


def test_self_assignment():
    params = worldgen.TrajectoryParams(worldgen.living_room_loop(), frame_spacing=0.25)
    topo = topomap.build_topomap(worldgen.reference_trajectory(params))
    for n in topo.nodes:
        assert topomap.assign_node(topo, n.position) == n.node_id


def test_dataset_frames_stay_within_one_spacing_of_their_node():
    params = worldgen.TrajectoryParams(
        worldgen.living_room_loop(), frame_spacing=0.25, num_laps=6, noise_std=0.05, rng_seed=3
    )
    topo = topomap.build_topomap(worldgen.reference_trajectory(params))
    for pose, s in zip(worldgen.generate_trajectory(params), worldgen.frame_arc_lengths(params)):
        k = topomap.assign_node(topo, pose.xy)
        gap = abs(s - topo.nodes[k].arc_length)
        gap = min(gap, topo.length - gap)
        assert gap <= topo.spacing


def test_one_hot():
    np.testing.assert_array_equal(topomap.one_hot(2, 5), [0, 0, 1, 0, 0])
    np.testing.assert_array_equal(topomap.one_hot(0, 1), [1])
    with pytest.raises(IndexOutOfRange):
        topomap.one_hot(5, 5)


@given(st.integers(1, 40).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n - 1))))
def test_one_hot_argmax_inverse(nk):
    n, k = nk
    v = topomap.one_hot(k, n)
    assert int(np.argmax(v)) == k and v.sum() == 1.0 and v.max() == 1.0


def test_adjacency_wraps_on_loops():
    params = worldgen.TrajectoryParams(worldgen.living_room_loop(), frame_spacing=0.5)
    topo = topomap.build_topomap(worldgen.reference_trajectory(params))
    assert topo.adjacent(0, 7) and topo.adjacent(3, 4) and not topo.adjacent(0, 2)


@settings(max_examples=30)
@given(st.floats(0.5, 3.0))
def test_file_round_trip(tmp_path_factory, spacing):
    topo = topomap.build_topomap(line(np.linspace(0, 10, 21)), spacing)
    path = tmp_path_factory.mktemp("t") / "map.jsonl"
    topomap.write_topomap(path, topo)
    assert topomap.read_topomap(path) == topo
