import pytest

from error_handlers import DagError, HandshakeError
from models import NodeRecord
from topology import (RingOrder, ascending_ring, local_graph, ring_order, synthesize_global_topology,
                      verify_local_graph)


def test_four_ranks_one_real(make_config):
    topo = synthesize_global_topology(make_config(4, "0"))
    assert [n.is_real for n in topo.nodes] == [True, False, False, False]
    assert topo.ranks == [0, 1, 2, 3]
    assert len(topo.edges) == 12


@pytest.mark.parametrize("n", [2, 3, 8])
def test_synthesized_graph_is_connected(make_config, n):
    topo = synthesize_global_topology(make_config(n, "0"))
    assert topo.is_connected()
    assert all(link == topo.link for _, _, link in topo.edges)


def test_edges_do_not_depend_on_which_ranks_are_real(make_config):
    a = synthesize_global_topology(make_config(4, "0"))
    b = synthesize_global_topology(make_config(4, "1,2"))
    assert [(u, v) for u, v, _ in a.edges] == [(u, v) for u, v, _ in b.edges]


def test_ring_successor_and_predecessor(make_config):
    ring = ring_order(synthesize_global_topology(make_config(4)))
    assert ring.ranks == (0, 1, 2, 3)
    assert ring.successor(3) == 0
    assert ring.predecessor(0) == 3
    assert ring.successor(1) == 2


def test_ring_rejects_non_permutation():
    with pytest.raises(DagError):
        RingOrder((0, 2))
    with pytest.raises(DagError):
        ascending_ring(1)


def test_local_graph_verification(make_config):
    topo = synthesize_global_topology(make_config(3))
    verify_local_graph(topo, local_graph(topo, [1, 2]))
    with pytest.raises(HandshakeError, match="topology mismatch"):
        verify_local_graph(topo, [NodeRecord(rank=1, node_class="a100")])
    with pytest.raises(HandshakeError, match="unknown rank"):
        verify_local_graph(topo, [NodeRecord(rank=9, node_class="default")])
