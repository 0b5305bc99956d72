"""Nodes and exclusive GPU + memory allocation."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from gridling.errors import UnknownAllocation, UnknownNode


class NodeState(str, enum.Enum):
    IDLE = "IDLE"
    MIXED = "MIXED"
    ALLOCATED = "ALLOCATED"
    DOWN = "DOWN"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class Allocation:
    job_id: int
    node_name: str
    gpu_indices: FrozenSet[int]
    mem_mb: int


@dataclass
class Node:
    name: str
    gpus_total: int
    mem_total_mb: int
    cpus: int = 1
    down: bool = False
    gpu_busy: set = field(default_factory=set)
    mem_free_mb: Optional[int] = None
    allocations: Dict[int, Allocation] = field(default_factory=dict)

    def __post_init__(self):
        if self.gpus_total < 0 or self.mem_total_mb < 1 or self.cpus < 1:
            raise ValueError(f"invalid node capacity for {self.name!r}")
        if self.mem_free_mb is None:
            self.mem_free_mb = self.mem_total_mb

    @property
    def state(self) -> NodeState:
        if self.down:
            return NodeState.DOWN
        if not self.gpu_busy and self.mem_free_mb == self.mem_total_mb:
            return NodeState.IDLE
        if len(self.gpu_busy) == self.gpus_total:
            return NodeState.ALLOCATED
        return NodeState.MIXED

    @property
    def gpus_free(self) -> int:
        return self.gpus_total - len(self.gpu_busy)

    def fits(self, gpus: int, mem_mb: int) -> bool:
        return not self.down and self.gpus_free >= gpus and self.mem_free_mb >= mem_mb

    def snapshot(self) -> tuple:
        """Hashable view of the node's mutable state, used by tests and oracles."""
        return (
            self.name,
            self.down,
            frozenset(self.gpu_busy),
            self.mem_free_mb,
            frozenset(self.allocations.values()),
        )


def make_fleet(specs: Iterable[Tuple[str, int, int]]) -> List[Node]:
    """Build nodes from ``(name, gpus, mem_mb)`` triples."""
    return [Node(name, gpus, mem) for name, gpus, mem in specs]


def find_node(fleet: Sequence[Node], name: str) -> Node:
    for node in fleet:
        if node.name == name:
            return node
    raise UnknownNode(f"no node named {name!r}")


def place(gpus: int, mem_mb: int, fleet: Sequence[Node]) -> Optional[Tuple[Node, FrozenSet[int]]]:
    """First fit: the first non-DOWN node with room, and its lowest free GPU indices."""
    for node in fleet:
        if node.fits(gpus, mem_mb):
            free = [i for i in range(node.gpus_total) if i not in node.gpu_busy]
            return node, frozenset(free[:gpus])
    return None


def allocate(req, fleet: Sequence[Node], job_id: int = 0) -> Optional[Allocation]:
    """Grant ``req.gpus`` GPUs and ``req.mem_mb`` memory, or return None if nothing fits.

    The chosen node is updated in place; the placement itself depends only on
    the request and the fleet's current state.
    """
    if req.nodes != 1:
        raise ValueError("only single-node requests can be allocated")
    hit = place(req.gpus, req.mem_mb, fleet)
    if hit is None:
        return None
    node, gpu_indices = hit
    alloc = Allocation(job_id, node.name, gpu_indices, req.mem_mb)
    node.gpu_busy |= gpu_indices
    node.mem_free_mb -= req.mem_mb
    node.allocations[job_id] = alloc
    return alloc


def release(a: Allocation, fleet: Sequence[Node]) -> Sequence[Node]:
    node = find_node(fleet, a.node_name)
    if node.allocations.get(a.job_id) != a:
        raise UnknownAllocation(f"allocation for job {a.job_id} is not live on {a.node_name}")
    del node.allocations[a.job_id]
    node.gpu_busy -= a.gpu_indices
    node.mem_free_mb += a.mem_mb
    return fleet


def node_summary(fleet: Sequence[Node]) -> List[Tuple[str, NodeState, str, int]]:
    return [
        (n.name, n.state, f"{len(n.gpu_busy)}/{n.gpus_total}", n.mem_free_mb)
        for n in fleet
    ]


def format_node_summary(rows) -> str:
    header = ("NODELIST", "STATE", "GPUS", "MEM_FREE")
    body = [tuple(str(c) for c in r) for r in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *body]]
    return "\n".join(lines) + "\n"
