import dataclasses
import random

import networkx as nx
import numpy as np
import pytest

from collective_dag import (boundary_for, build_dag, build_ring_allgather_dag, build_ring_allreduce_dag,
                            check_isomorphic, chunk_bounds, chunk_layout, find_vertex, message_counts,
                            project_boundary, render_dag, replay_dag, validate_acyclic)
from error_handlers import DagError
from models import Direction, OpKind, PlanEntry, TaskKind


@pytest.mark.parametrize("n", range(2, 17))
def test_message_counts_per_rank(n):
    reduce = build_ring_allreduce_dag(n, 8 * n)
    gather = build_ring_allgather_dag(n, 8)
    for rank in range(n):
        assert message_counts(reduce, rank) == (2 * (n - 1), 2 * (n - 1))
        assert message_counts(gather, rank) == (n - 1, n - 1)


def test_allreduce_four_ranks_has_48_tasks():
    dag = build_ring_allreduce_dag(4, 1024)
    assert len(dag.vertices) == 48
    assert validate_acyclic(dag).ok
    sends = [t for t in dag.vertices if t.kind == TaskKind.SEND]
    assert all(t.msg.dst_rank == (t.msg.src_rank + 1) % 4 for t in sends)
    assert all(t.msg.size_bytes == 256 for t in sends)


def test_reduce_scatter_leaves_rank_owning_next_chunk():
    dag = build_ring_allreduce_dag(4, 16)
    first_gather_send = {t.owner_rank: t.msg.chunk_index for t in dag.sends_of(0) + dag.sends_of(2)
                         if t.msg.step == 3}
    assert first_gather_send == {0: 1, 2: 3}


def test_replay_matches_sum_and_concatenation():
    rng = np.random.default_rng(7)
    for _ in range(120):
        n = int(rng.integers(2, 9))
        if rng.random() < 0.5:
            count = int(rng.integers(n, 5 * n + 3))
            inputs = [rng.integers(-1000, 1000, size=count, dtype=np.int64) for _ in range(n)]
            dag = build_ring_allreduce_dag(n, count * 8, itemsize=8)
            expected = np.sum(inputs, axis=0)
            for out in replay_dag(dag, inputs):
                np.testing.assert_array_equal(out, expected)
        else:
            count = int(rng.integers(1, 12))
            inputs = [rng.integers(-1000, 1000, size=count, dtype=np.int64) for _ in range(n)]
            dag = build_ring_allgather_dag(n, count * 8, itemsize=8)
            expected = np.concatenate(inputs)
            for out in replay_dag(dag, inputs):
                np.testing.assert_array_equal(out, expected)


def test_replay_rejects_wrong_inputs():
    dag = build_ring_allreduce_dag(2, 16, itemsize=8)
    with pytest.raises(DagError):
        replay_dag(dag, [np.zeros(2, dtype=np.int64)])
    with pytest.raises(DagError):
        replay_dag(dag, [np.zeros(3, dtype=np.int64), np.zeros(3, dtype=np.int64)])


def test_boundary_four_ranks_one_real():
    boundary = boundary_for(PlanEntry(kind=OpKind.ALLREDUCE, nbytes=64), 4, {0})
    assert len(boundary) == 12
    assert len(boundary.indices(Direction.FROM_REAL)) == 6
    assert len(boundary.indices(Direction.TO_REAL)) == 6
    assert boundary.side == "emulated"
    for i in boundary.indices(Direction.FROM_REAL):
        msg = boundary.vertices[i].msg
        assert (msg.src_rank, msg.dst_rank) == (0, 1)
        assert boundary.vertices[i].kind == TaskKind.RECV
    for i in boundary.indices(Direction.TO_REAL):
        msg = boundary.vertices[i].msg
        assert (msg.src_rank, msg.dst_rank) == (3, 0)
        assert boundary.vertices[i].kind == TaskKind.SEND


def test_boundary_keeps_reachability_around_the_ring():
    n = 4
    boundary = boundary_for(PlanEntry(kind=OpKind.ALLREDUCE, nbytes=64), n, {0})
    g = boundary.graph()
    for p in range(n - 1, 2 * (n - 1)):
        src = find_vertex(boundary, Direction.FROM_REAL, p - (n - 1))
        dst = find_vertex(boundary, Direction.TO_REAL, p)
        assert nx.has_path(g, src, dst)
    for p in range(2 * (n - 1) - 1):
        assert nx.has_path(g, find_vertex(boundary, Direction.TO_REAL, p),
                           find_vertex(boundary, Direction.FROM_REAL, p + 1))
    # the first n-1 replies depend on nothing the real rank sends
    preds = boundary.predecessors()
    for p in range(n - 1):
        assert preds[find_vertex(boundary, Direction.TO_REAL, p)] == ()


def test_two_rank_boundary_shape():
    boundary = boundary_for(PlanEntry(kind=OpKind.ALLREDUCE, nbytes=8), 2, {0})
    assert [v.direction for v in boundary.vertices] == [
        Direction.FROM_REAL, Direction.TO_REAL, Direction.FROM_REAL, Direction.TO_REAL]
    assert boundary.edges == ((0, 3), (1, 2))


def test_allgather_boundary_has_no_forwarding_back_to_origin():
    n = 4
    boundary = boundary_for(PlanEntry(kind=OpKind.ALLGATHER, nbytes=16), n, {0})
    assert len(boundary) == 2 * (n - 1)
    for u, v in boundary.edges:
        assert boundary.vertices[u].direction == Direction.TO_REAL
        assert boundary.vertices[v].direction == Direction.FROM_REAL
        assert boundary.vertices[v].msg.step == boundary.vertices[u].msg.step + 1


def test_projection_rejects_bad_real_sets():
    dag = build_ring_allreduce_dag(3, 12)
    with pytest.raises(DagError):
        project_boundary(dag, set())
    with pytest.raises(DagError):
        project_boundary(dag, {0, 1, 2})
    with pytest.raises(DagError):
        project_boundary(dag, {0}, side="middle")


def test_cycle_is_reported_with_witness():
    g = nx.DiGraph([(0, 1), (1, 0)])
    report = validate_acyclic(g)
    assert not report.ok
    assert set(report.cycle) == {0, 1}


@pytest.mark.parametrize("n", range(2, 17))
@pytest.mark.parametrize("kind", [OpKind.ALLREDUCE, OpKind.ALLGATHER])
def test_both_sides_of_the_boundary_agree(n, kind):
    dag = build_dag(PlanEntry(kind=kind, nbytes=4 * n), n)
    emulated = project_boundary(dag, {0}, side="emulated")
    real = project_boundary(dag, {0}, side="real")
    assert validate_acyclic(emulated).ok
    assert check_isomorphic(emulated, real)


def test_different_collectives_are_not_isomorphic():
    a = boundary_for(PlanEntry(kind=OpKind.ALLREDUCE, nbytes=16), 4, {0})
    b = boundary_for(PlanEntry(kind=OpKind.ALLGATHER, nbytes=16), 4, {0})
    assert not check_isomorphic(a, b)


def test_isomorphic_to_itself_but_not_to_a_rewired_copy():
    boundary = boundary_for(PlanEntry(kind=OpKind.ALLREDUCE, nbytes=64), 4, {0})
    assert check_isomorphic(boundary, boundary)
    u, v = boundary.edges[0]
    rewired = dataclasses.replace(boundary, edges=((v, u),) + boundary.edges[1:])
    assert not check_isomorphic(boundary, rewired)


def vertex_ids(vertices):
    return {(v.direction, v.kind, v.msg.key()) for v in vertices}


@pytest.mark.parametrize("n", range(3, 9))
def test_more_real_ranks_keep_messages_that_still_cross(n):
    rng = random.Random(n)
    for dag in (build_ring_allreduce_dag(n, 8 * n), build_ring_allgather_dag(n, 8)):
        for _ in range(10):
            ranks = list(range(n))
            rng.shuffle(ranks)
            k = rng.randint(1, n - 2)
            small, large = set(ranks[:k]), set(ranks[:rng.randint(k + 1, n - 1)])
            before = project_boundary(dag, small)
            after = project_boundary(dag, large)
            still_crossing = [v for v in before.vertices if (v.msg.src_rank in large) != (v.msg.dst_rank in large)]
            assert vertex_ids(still_crossing) <= vertex_ids(after.vertices)


def test_render_lists_vertices_then_edges():
    boundary = boundary_for(PlanEntry(kind=OpKind.ALLREDUCE, nbytes=8), 2, {0})
    lines = render_dag(boundary).splitlines()
    assert lines[0] == "# vertices: index op_id kind step src dst chunk size direction"
    assert lines[1] == "0 0 recv 0 0 1 0 4 from_real"
    assert lines[5] == "# edges: from to"
    assert lines[6:] == ["0 3", "1 2"]

    full = render_dag(build_ring_allreduce_dag(2, 8)).splitlines()
    assert full[0].startswith("# vertices")
    assert len(full) == 1 + 8 + 1 + 6


def test_chunk_layout():
    assert chunk_bounds(10, 4) == [(0, 2), (2, 4), (4, 6), (6, 10)]
    assert chunk_layout(OpKind.ALLGATHER, 3, 8, 4) == [(0, 2), (2, 4), (4, 6)]
    with pytest.raises(DagError):
        chunk_layout(OpKind.ALLREDUCE, 4, 3)
    with pytest.raises(DagError):
        chunk_layout(OpKind.ALLREDUCE, 2, 10, 4)
    with pytest.raises(DagError):
        build_ring_allreduce_dag(1, 8)
