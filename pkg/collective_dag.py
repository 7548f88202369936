"""Message DAGs of ring collectives and their projection onto the real/emulated boundary.

Vertices are send/recv tasks; an edge (u, v) means u must complete before v.
Each send is followed by the matching recv at the successor, and a rank's send
at schedule position p+1 forwards the chunk it received at position p.
"""
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from error_handlers import DagError, InternalError
from models import Direction, MsgDesc, OpKind, PlanEntry, TaskKind
from topology import ascending_ring


@dataclass(frozen=True)
class Task:
    kind: TaskKind
    msg: MsgDesc
    owner_rank: int


@dataclass(frozen=True)
class CollectiveDag:
    kind: OpKind
    world_size: int
    op_id: int
    nbytes: int  # total buffer for all-reduce, per-rank buffer for all-gather
    itemsize: int
    graph: nx.DiGraph = field(compare=False, repr=False)

    @property
    def vertices(self) -> List[Task]:
        return list(self.graph.nodes)

    @property
    def edges(self) -> List[Tuple[Task, Task]]:
        return list(self.graph.edges)

    def tasks_of(self, rank: int) -> List[Task]:
        """Tasks owned by one rank in program order (send before recv within a position)."""
        own = [t for t in self.graph.nodes if t.owner_rank == rank]
        return sorted(own, key=lambda t: (t.msg.step, 0 if t.kind == TaskKind.SEND else 1))

    def sends_of(self, rank: int) -> List[Task]:
        return [t for t in self.tasks_of(rank) if t.kind == TaskKind.SEND]

    def recvs_of(self, rank: int) -> List[Task]:
        return [t for t in self.tasks_of(rank) if t.kind == TaskKind.RECV]


@dataclass(frozen=True)
class BoundaryVertex:
    direction: Direction
    kind: TaskKind  # from the owning side's point of view
    msg: MsgDesc


@dataclass(frozen=True)
class BoundaryDag:
    """Boundary-crossing tasks of one side, with transitively reduced reachability edges.

    Vertices are ordered by (step, from_real before to_real, src, dst); that order
    is the bitmap order used by the emulator.
    """
    kind: OpKind
    world_size: int
    real_ranks: FrozenSet[int]
    side: str
    vertices: Tuple[BoundaryVertex, ...]
    edges: Tuple[Tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.vertices)

    def indices(self, direction: Direction) -> List[int]:
        return [i for i, v in enumerate(self.vertices) if v.direction == direction]

    def predecessors(self) -> Tuple[Tuple[int, ...], ...]:
        preds: List[List[int]] = [[] for _ in self.vertices]
        for u, v in self.edges:
            preds[v].append(u)
        return tuple(tuple(sorted(p)) for p in preds)

    def graph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(len(self.vertices)))
        g.add_edges_from(self.edges)
        return g


@dataclass(frozen=True)
class AcyclicityReport:
    ok: bool
    cycle: Tuple = ()


def schedule_positions(kind: OpKind, n: int) -> int:
    return 2 * (n - 1) if kind == OpKind.ALLREDUCE else n - 1


def send_chunk(kind: OpKind, n: int, rank: int, position: int) -> int:
    if kind == OpKind.ALLGATHER:
        return (rank - position) % n
    if position < n - 1:
        return (rank - position) % n
    return (rank + 1 - (position - (n - 1))) % n


def recv_chunk(kind: OpKind, n: int, rank: int, position: int) -> int:
    return send_chunk(kind, n, (rank - 1) % n, position)


def reduces_at(kind: OpKind, n: int, position: int) -> bool:
    """Whether a recv at this position sums into the buffer (otherwise it overwrites)."""
    return kind == OpKind.ALLREDUCE and position < n - 1


def chunk_bounds(count: int, n: int) -> List[Tuple[int, int]]:
    """Split `count` elements into n chunks; the last chunk absorbs the remainder."""
    base = count // n
    bounds = [(i * base, (i + 1) * base) for i in range(n - 1)]
    bounds.append(((n - 1) * base, count))
    return bounds


def chunk_layout(kind: OpKind, n: int, nbytes: int, itemsize: int = 1) -> List[Tuple[int, int]]:
    """Element bounds of every chunk in the buffer a rank reduces into or gathers into."""
    _check_world_size(n)
    if itemsize < 1 or nbytes < 0 or nbytes % itemsize:
        raise DagError(f"size {nbytes} is not a whole number of {itemsize}-byte elements")
    count = nbytes // itemsize
    if kind == OpKind.ALLREDUCE:
        if count < n:
            raise DagError(f"all-reduce needs at least {n} elements, got {count}")
        return chunk_bounds(count, n)
    return [(i * count, (i + 1) * count) for i in range(n)]


def _check_world_size(n: int) -> None:
    if not isinstance(n, int) or n < 2:
        raise DagError(f"world size must be an integer ≥ 2, got {n!r}")


def _build_ring(kind: OpKind, n: int, nbytes: int, op_id: int, itemsize: int) -> CollectiveDag:
    bounds = chunk_layout(kind, n, nbytes, itemsize)
    sizes = [(hi - lo) * itemsize for lo, hi in bounds]
    ring = ascending_ring(n)
    graph = nx.DiGraph()
    sends: Dict[Tuple[int, int], Task] = {}
    recvs: Dict[Tuple[int, int], Task] = {}

    for p in range(schedule_positions(kind, n)):
        for r in range(n):
            dst = ring.successor(r)
            chunk = send_chunk(kind, n, r, p)
            msg = MsgDesc(op_id=op_id, step=p, src_rank=r, dst_rank=dst, chunk_index=chunk, size_bytes=sizes[chunk])
            send, recv = Task(TaskKind.SEND, msg, r), Task(TaskKind.RECV, msg, dst)
            graph.add_edge(send, recv)
            sends[(r, p)] = send
            recvs[(dst, p)] = recv

    for (r, p), send in sends.items():
        if p == 0:
            continue
        received = recvs[(r, p - 1)]
        if received.msg.chunk_index != send.msg.chunk_index:
            raise InternalError(f"rank {r} forwards chunk {send.msg.chunk_index} at step {p} "
                                f"but received {received.msg.chunk_index}")
        graph.add_edge(received, send)

    return CollectiveDag(kind=kind, world_size=n, op_id=op_id, nbytes=nbytes, itemsize=itemsize, graph=graph)


def build_ring_allreduce_dag(n: int, total_bytes: int, op_id: int = 0, itemsize: int = 1) -> CollectiveDag:
    """
    Build the ring all-reduce DAG: n-1 reduce-scatter steps then n-1 all-gather steps.

    Args:
        n: World size
        total_bytes: Size of the reduced buffer
        op_id: Operation the messages belong to
        itemsize: Element size; chunks never split an element

    Raises:
        DagError: If n < 2 or the buffer holds fewer than n elements
    """
    _check_world_size(n)
    return _build_ring(OpKind.ALLREDUCE, n, total_bytes, op_id, itemsize)


def build_ring_allgather_dag(n: int, total_bytes_per_rank: int, op_id: int = 0, itemsize: int = 1) -> CollectiveDag:
    _check_world_size(n)
    return _build_ring(OpKind.ALLGATHER, n, total_bytes_per_rank, op_id, itemsize)


def build_dag(entry: PlanEntry, n: int, op_id: int = 0) -> CollectiveDag:
    if entry.kind == OpKind.ALLREDUCE:
        return build_ring_allreduce_dag(n, entry.nbytes, op_id, entry.itemsize)
    return build_ring_allgather_dag(n, entry.nbytes, op_id, entry.itemsize)


def _boundary_order(vertex: BoundaryVertex) -> Tuple[int, int, int, int]:
    direction = 0 if vertex.direction == Direction.FROM_REAL else 1
    return (vertex.msg.step, direction, vertex.msg.src_rank, vertex.msg.dst_rank)


def project_boundary(dag: CollectiveDag, real_set: Iterable[int], side: str = "emulated") -> BoundaryDag:
    """
    Keep only the tasks of messages crossing the real/emulated boundary.

    Args:
        dag: Full collective DAG
        real_set: Ranks executing for real
        side: "emulated" keeps the emulator's tasks, "real" keeps the real ranks' tasks

    Returns:
        BoundaryDag: Retained tasks with the transitive reduction of full-DAG reachability

    Raises:
        DagError: If real_set is empty, covers every rank or names unknown ranks
    """
    real = frozenset(real_set)
    n = dag.world_size
    if not real or not real < frozenset(range(n)):
        raise DagError(f"real set must be a nonempty strict subset of 0..{n - 1}, got {sorted(real)}")
    if side not in ("emulated", "real"):
        raise DagError(f"unknown side {side!r}")

    keep_real_owner = side == "real"
    retained: List[Tuple[BoundaryVertex, Task]] = []
    for task in dag.graph.nodes:
        crosses = (task.msg.src_rank in real) != (task.msg.dst_rank in real)
        if crosses and (task.owner_rank in real) == keep_real_owner:
            direction = Direction.FROM_REAL if task.msg.src_rank in real else Direction.TO_REAL
            retained.append((BoundaryVertex(direction, task.kind, task.msg), task))
    retained.sort(key=lambda pair: _boundary_order(pair[0]))

    index = {task: i for i, (_, task) in enumerate(retained)}
    closure = nx.DiGraph()
    closure.add_nodes_from(range(len(retained)))
    for i, (_, task) in enumerate(retained):
        for reachable in nx.descendants(dag.graph, task):
            j = index.get(reachable)
            if j is not None:
                closure.add_edge(i, j)
    reduced = nx.transitive_reduction(closure)

    return BoundaryDag(
        kind=dag.kind,
        world_size=n,
        real_ranks=real,
        side=side,
        vertices=tuple(vertex for vertex, _ in retained),
        edges=tuple(sorted(reduced.edges)),
    )


def validate_acyclic(dag: Union[CollectiveDag, BoundaryDag, nx.DiGraph]) -> AcyclicityReport:
    if isinstance(dag, CollectiveDag):
        graph = dag.graph
    elif isinstance(dag, BoundaryDag):
        graph = dag.graph()
    else:
        graph = dag
    if nx.is_directed_acyclic_graph(graph):
        return AcyclicityReport(ok=True)
    cycle = nx.find_cycle(graph)
    return AcyclicityReport(ok=False, cycle=tuple(u for u, _ in cycle))


def _labels(dag: BoundaryDag) -> List[tuple]:
    labels = [(v.msg.step, v.msg.chunk_index, v.msg.size_bytes, v.direction.value) for v in dag.vertices]
    if len(set(labels)) != len(labels):
        labels = [label + (v.msg.src_rank, v.msg.dst_rank) for label, v in zip(labels, dag.vertices)]
    return labels


def check_isomorphic(a: BoundaryDag, b: BoundaryDag) -> bool:
    """
    Compare two boundary views by canonical labels rather than general graph isomorphism.

    Direction (to_real/from_real) is the same in both views while the task kind
    flips between send and recv, so labels use the direction.
    """
    if len(a.vertices) != len(b.vertices) or len(a.edges) != len(b.edges):
        return False
    labels_a, labels_b = _labels(a), _labels(b)
    if sorted(labels_a) != sorted(labels_b):
        return False
    edges_a = {(labels_a[u], labels_a[v]) for u, v in a.edges}
    edges_b = {(labels_b[u], labels_b[v]) for u, v in b.edges}
    return edges_a == edges_b


def replay_dag(dag: CollectiveDag, inputs: Sequence[np.ndarray]) -> List[np.ndarray]:
    """
    Execute a DAG on concrete per-rank arrays in dependency order.

    Returns the final buffer of every rank: elementwise sums for all-reduce,
    rank-ordered concatenation for all-gather.
    """
    n = dag.world_size
    arrays = [np.asarray(x) for x in inputs]
    if len(arrays) != n:
        raise DagError(f"expected {n} inputs, got {len(arrays)}")
    if any(a.nbytes != dag.nbytes or a.itemsize != dag.itemsize for a in arrays):
        raise DagError(f"every input must hold {dag.nbytes} bytes of {dag.itemsize}-byte elements")

    bounds = chunk_layout(dag.kind, n, dag.nbytes, dag.itemsize)
    if dag.kind == OpKind.ALLREDUCE:
        buffers = [a.copy() for a in arrays]
    else:
        buffers = []
        for rank, a in enumerate(arrays):
            out = np.zeros(n * a.size, dtype=a.dtype)
            lo, hi = bounds[rank]
            out[lo:hi] = a
            buffers.append(out)

    in_flight: Dict[MsgDesc, np.ndarray] = {}
    for task in nx.topological_sort(dag.graph):
        lo, hi = bounds[task.msg.chunk_index]
        if task.kind == TaskKind.SEND:
            in_flight[task.msg] = buffers[task.owner_rank][lo:hi].copy()
        elif reduces_at(dag.kind, n, task.msg.step):
            buffers[task.owner_rank][lo:hi] += in_flight.pop(task.msg)
        else:
            buffers[task.owner_rank][lo:hi] = in_flight.pop(task.msg)
    return buffers


def render_dag(dag: Union[CollectiveDag, BoundaryDag]) -> str:
    """Text dump: one vertex per line, then the edge list by vertex index."""
    lines: List[str] = []
    if isinstance(dag, CollectiveDag):
        order = sorted(dag.graph.nodes, key=lambda t: (t.msg.step, t.msg.src_rank, t.kind != TaskKind.SEND))
        index = {task: i for i, task in enumerate(order)}
        lines.append("# vertices: index op_id kind step src dst chunk size")
        for i, t in enumerate(order):
            m = t.msg
            lines.append(f"{i} {m.op_id} {t.kind.value} {m.step} {m.src_rank} {m.dst_rank} {m.chunk_index} {m.size_bytes}")
        edges = sorted((index[u], index[v]) for u, v in dag.graph.edges)
    else:
        lines.append("# vertices: index op_id kind step src dst chunk size direction")
        for i, v in enumerate(dag.vertices):
            m = v.msg
            lines.append(f"{i} {m.op_id} {v.kind.value} {m.step} {m.src_rank} {m.dst_rank} "
                         f"{m.chunk_index} {m.size_bytes} {v.direction.value}")
        edges = list(dag.edges)
    lines.append("# edges: from to")
    lines.extend(f"{u} {v}" for u, v in edges)
    return "\n".join(lines) + "\n"


def boundary_for(entry: PlanEntry, n: int, real_set: Iterable[int], op_id: int = 0,
                 side: str = "emulated") -> BoundaryDag:
    return project_boundary(build_dag(entry, n, op_id), real_set, side)


def message_counts(dag: CollectiveDag, rank: int) -> Tuple[int, int]:
    return len(dag.sends_of(rank)), len(dag.recvs_of(rank))


def find_vertex(dag: BoundaryDag, direction: Direction, step: int) -> Optional[int]:
    for i, v in enumerate(dag.vertices):
        if v.direction == direction and v.msg.step == step:
            return i
    return None
