"""Global topology synthesis and ring construction."""
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Tuple

import networkx as nx

from config import JobConfig, LinkParams
from error_handlers import DagError, HandshakeError
from models import NodeRecord


@dataclass(frozen=True)
class TopologyGraph:
    """Every rank of the job, real or fabricated, with uniform links between all pairs."""
    nodes: Tuple[NodeRecord, ...]
    link: LinkParams
    graph: nx.DiGraph = field(compare=False, repr=False)

    @property
    def ranks(self) -> List[int]:
        return [node.rank for node in self.nodes]

    @property
    def edges(self) -> List[Tuple[int, int, LinkParams]]:
        return [(u, v, data["link"]) for u, v, data in sorted(self.graph.edges(data=True))]

    def node(self, rank: int) -> NodeRecord:
        return self.graph.nodes[rank]["record"]

    def is_connected(self) -> bool:
        return nx.is_strongly_connected(self.graph)


def synthesize_global_topology(cfg: JobConfig) -> TopologyGraph:
    """
    Build the global graph, fabricating local-graph records for emulated ranks.

    Edge structure never looks at is_real: the uniform scenario gives every
    ordered rank pair the same link.
    """
    graph = nx.complete_graph(cfg.world_size, create_using=nx.DiGraph)
    nodes = []
    for rank in range(cfg.world_size):
        record = NodeRecord(rank=rank, node_class=cfg.node_class[rank], is_real=rank in cfg.real_ranks)
        graph.nodes[rank]["record"] = record
        nodes.append(record)
    nx.set_edge_attributes(graph, cfg.link, "link")
    return TopologyGraph(nodes=tuple(nodes), link=cfg.link, graph=graph)


def local_graph(topo: TopologyGraph, ranks: Iterable[int]) -> List[NodeRecord]:
    """Records a process announces for the ranks it serves."""
    return [topo.node(rank) for rank in sorted(ranks)]


def verify_local_graph(topo: TopologyGraph, records: Iterable[NodeRecord]) -> None:
    """Check a peer's announced records against the locally synthesized topology."""
    for record in records:
        if record.rank >= len(topo.nodes):
            raise HandshakeError(f"topology mismatch: peer announced unknown rank {record.rank}")
        expected = topo.node(record.rank)
        if record.node_class != expected.node_class:
            raise HandshakeError(
                f"topology mismatch: rank {record.rank} class {record.node_class!r}, "
                f"expected {expected.node_class!r}"
            )


@dataclass(frozen=True)
class RingOrder:
    ranks: Tuple[int, ...]
    _position: Dict[int, int] = field(init=False, compare=False, repr=False)

    def __post_init__(self) -> None:
        if sorted(self.ranks) != list(range(len(self.ranks))) or len(self.ranks) < 2:
            raise DagError(f"ring must be a permutation of 0..n-1 with n ≥ 2, got {self.ranks}")
        object.__setattr__(self, "_position", {rank: i for i, rank in enumerate(self.ranks)})

    @property
    def size(self) -> int:
        return len(self.ranks)

    def successor(self, rank: int) -> int:
        return self.ranks[(self._position[rank] + 1) % len(self.ranks)]

    def predecessor(self, rank: int) -> int:
        return self.ranks[(self._position[rank] - 1) % len(self.ranks)]


def ring_order(topo: TopologyGraph) -> RingOrder:
    # Ascending rank order; link weights are ignored so every process derives the same ring.
    return RingOrder(tuple(sorted(topo.ranks)))


def ascending_ring(world_size: int) -> RingOrder:
    return RingOrder(tuple(range(world_size)))
