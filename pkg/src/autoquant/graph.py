"""Computing graphs and the quantizer-insertion pass.

A graph is a DAG of data vertices (in-degree 0: inputs, weights) and
operation vertices. :func:`qag_transform` rewrites every edge flowing into
an *expensive* vertex (FC/MatMul/Conv by default) so that it passes through
a fresh ``Quantize`` vertex. The pass works in repeated frontier sweeps:
a vertex is admitted once all of its predecessors have been admitted, and
its incoming edges are emitted (and split, if it is expensive) at that
moment.

Graphs are immutable; transforms return new graphs.
"""

from __future__ import annotations

import heapq
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from ._validation import ValidationError

DATA = "data"
OP = "op"

OP_TYPES = frozenset(
    {"FC", "MatMul", "Conv", "ReLU", "Add", "BatchNormLike", "SoftmaxCE", "Quantize"}
)
DEFAULT_EXPENSIVE_TYPES = frozenset({"FC", "MatMul", "Conv"})

HEADER = "# autoquant-graph v1"


class GraphError(ValidationError):
    pass


@dataclass(frozen=True)
class Vertex:
    id: str
    kind: str
    op_type: Optional[str] = None
    attrs: Mapping = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if not self.id or re.search(r"\s", self.id):
            raise GraphError(f"vertex id must be non-empty without whitespace: {self.id!r}")
        if self.kind not in (DATA, OP):
            raise GraphError(f"vertex {self.id}: kind must be 'data' or 'op', got {self.kind!r}")
        if self.kind == OP and self.op_type not in OP_TYPES:
            raise GraphError(f"vertex {self.id}: unknown op type {self.op_type!r}")
        if self.kind == DATA and self.op_type is not None:
            raise GraphError(f"data vertex {self.id} cannot carry an op type")
        # normalize to plain JSON values so file round-trips compare equal
        object.__setattr__(self, "attrs", json.loads(json.dumps(dict(self.attrs))))

    @property
    def is_quantizer(self) -> bool:
        return self.kind == OP and self.op_type == "Quantize"

    @property
    def role(self) -> Optional[str]:
        return self.attrs.get("role")


@dataclass(frozen=True, order=True)
class Edge:
    src: str
    dst: str
    slot: int = 0


class Graph:
    """Vertices plus ordered edges ``src -> dst`` feeding input ``slot`` of ``dst``."""

    def __init__(self, vertices: Iterable[Vertex], edges: Iterable[Edge]):
        self._vertices: Dict[str, Vertex] = {}
        for v in vertices:
            if v.id in self._vertices:
                raise GraphError(f"duplicate vertex id {v.id!r}")
            self._vertices[v.id] = v
        self._edges: Tuple[Edge, ...] = tuple(edges)
        self._in: Dict[str, List[Edge]] = {vid: [] for vid in self._vertices}
        self._out: Dict[str, List[Edge]] = {vid: [] for vid in self._vertices}
        seen: Set[Edge] = set()
        for e in self._edges:
            for end in (e.src, e.dst):
                if end not in self._vertices:
                    raise GraphError(f"edge {e.src}->{e.dst} references unknown vertex {end!r}")
            if e in seen:
                raise GraphError(f"duplicate edge {e.src}->{e.dst} slot {e.slot}")
            seen.add(e)
            self._in[e.dst].append(e)
            self._out[e.src].append(e)
        for lst in self._in.values():
            lst.sort(key=lambda e: (e.slot, e.src))

    @property
    def vertices(self) -> Tuple[Vertex, ...]:
        return tuple(self._vertices.values())

    @property
    def edges(self) -> Tuple[Edge, ...]:
        return self._edges

    def __contains__(self, vid: str) -> bool:
        return vid in self._vertices

    def __len__(self) -> int:
        return len(self._vertices)

    def vertex(self, vid: str) -> Vertex:
        try:
            return self._vertices[vid]
        except KeyError:
            raise GraphError(f"unknown vertex {vid!r}") from None

    def in_edges(self, vid: str) -> Tuple[Edge, ...]:
        self.vertex(vid)
        return tuple(self._in[vid])

    def out_edges(self, vid: str) -> Tuple[Edge, ...]:
        self.vertex(vid)
        return tuple(self._out[vid])

    def predecessors(self, vid: str) -> Set[str]:
        return {e.src for e in self.in_edges(vid)}

    def quantizers(self) -> List[Vertex]:
        return [v for v in self.vertices if v.is_quantizer]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return self._vertices == other._vertices and set(self._edges) == set(other._edges)

    def __repr__(self) -> str:
        return f"Graph(|V|={len(self._vertices)}, |E|={len(self._edges)})"


def in_degree(g: Graph, vid: str) -> int:
    return len(g.in_edges(vid))


def out_degree(g: Graph, vid: str) -> int:
    return len(g.out_edges(vid))


# -- structural checks ---------------------------------------------------------


def _find_cycle_free_order(g: Graph) -> Tuple[List[str], bool]:
    indeg = {v.id: in_degree(g, v.id) for v in g.vertices}
    heap = [vid for vid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        vid = heapq.heappop(heap)
        order.append(vid)
        for e in g.out_edges(vid):
            indeg[e.dst] -= 1
            if indeg[e.dst] == 0:
                heapq.heappush(heap, e.dst)
    return order, len(order) == len(g)


def is_connected(g: Graph) -> bool:
    if len(g) == 0:
        return True
    adj: Dict[str, Set[str]] = {v.id: set() for v in g.vertices}
    for e in g.edges:
        adj[e.src].add(e.dst)
        adj[e.dst].add(e.src)
    start = next(iter(adj))
    seen = {start}
    stack = [start]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == len(adj)


def validate(g: Graph) -> List[str]:
    """Return human-readable diagnostics; an empty list means the graph is valid."""
    problems = []
    for e in g.edges:
        if e.src == e.dst:
            problems.append(f"cyclic: self-loop on {e.src}")
    _, acyclic = _find_cycle_free_order(g)
    if not acyclic and not any(p.startswith("cyclic") for p in problems):
        problems.append("cyclic: graph contains a directed cycle")
    if not is_connected(g):
        problems.append("disconnected: graph is not connected")
    for v in g.vertices:
        d = in_degree(g, v.id)
        if v.kind == DATA and d != 0:
            problems.append(f"kind: data vertex {v.id} has in-degree {d}")
        if v.kind == OP and d == 0:
            problems.append(f"kind: op vertex {v.id} has in-degree 0")
    return problems


def topo_order(g: Graph) -> List[str]:
    """Topological order with ties broken by vertex id."""
    order, acyclic = _find_cycle_free_order(g)
    if not acyclic:
        raise GraphError("graph contains a cycle")
    return order


def default_expensive(g: Graph) -> Set[str]:
    return {v.id for v in g.vertices if v.kind == OP and v.op_type in DEFAULT_EXPENSIVE_TYPES}


# -- quantizer insertion ------------------------------------------------------------


def quantizer_id(edge: Edge) -> str:
    return f"q[{edge.src}->{edge.dst}:{edge.slot}]"


def qag_transform(
    g: Graph,
    expensive: Optional[Iterable[str]] = None,
    *,
    return_iterations: bool = False,
):
    """Insert a Quantize vertex on every edge entering an expensive vertex.

    ``expensive`` defaults to all FC/MatMul/Conv vertices. With
    ``return_iterations`` the number of outer frontier sweeps is returned
    alongside the new graph.
    """
    ve = default_expensive(g) if expensive is None else set(expensive)
    for vid in ve:
        if g.vertex(vid).kind != OP:
            raise GraphError(f"expensive vertex {vid} is a data vertex")
    _, acyclic = _find_cycle_free_order(g)
    if not acyclic:
        raise GraphError("cannot transform a cyclic graph")
    if not is_connected(g):
        raise GraphError("cannot transform a disconnected graph")

    original = {v.id for v in g.vertices}
    admitted = {v.id for v in g.vertices if in_degree(g, v.id) == 0}
    new_vertices: List[Vertex] = [g.vertex(vid) for vid in sorted(admitted)]
    new_edges: List[Edge] = []

    def frontier() -> List[str]:
        return sorted({e.dst for e in g.edges if e.src in admitted and e.dst not in admitted})

    pending = frontier()
    iterations = 0
    while pending:
        iterations += 1
        progressed = False
        for vj in pending:
            incoming = g.in_edges(vj)
            if not {e.src for e in incoming} <= admitted:
                continue
            admitted.add(vj)
            new_vertices.append(g.vertex(vj))
            progressed = True
            for e in incoming:
                if vj in ve:
                    qid = quantizer_id(e)
                    if qid in original:
                        raise GraphError(f"quantizer id {qid} collides with an existing vertex")
                    attrs = {"src": e.src, "dst": e.dst, "slot": e.slot}
                    new_vertices.append(Vertex(qid, OP, "Quantize", attrs))
                    new_edges.append(Edge(e.src, qid, 0))
                    new_edges.append(Edge(qid, vj, e.slot))
                else:
                    new_edges.append(e)
        if not progressed:
            raise GraphError("frontier sweep made no progress; graph is not a DAG")
        pending = frontier()

    if admitted != original:
        raise GraphError("some vertices are unreachable from data vertices")
    out = Graph(new_vertices, new_edges)
    return (out, iterations) if return_iterations else out


def contract_quantizers(g: Graph) -> Graph:
    """Remove every Quantize vertex, reconnecting its input to its consumer."""
    vertices = [v for v in g.vertices if not v.is_quantizer]
    edges = []
    for e in g.edges:
        src_q = g.vertex(e.src).is_quantizer
        dst_q = g.vertex(e.dst).is_quantizer
        if dst_q:
            continue
        if src_q:
            src = e.src
            while g.vertex(src).is_quantizer:
                (inp,) = g.in_edges(src)
                src = inp.src
            edges.append(Edge(src, e.dst, e.slot))
        else:
            edges.append(e)
    return Graph(vertices, edges)


# -- text format --------------------------------------------------------------------

_BARE = re.compile(r"[A-Za-z_][\w.\-]*")


def _encode(value) -> str:
    if isinstance(value, str) and _BARE.fullmatch(value) and value not in ("true", "false", "null"):
        return value
    # compact JSON only has spaces inside strings; escape them so tokens split cleanly
    return json.dumps(value, separators=(",", ":")).replace(" ", "\\u0020")


def _decode(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def dumps(g: Graph) -> str:
    lines = [HEADER]
    for v in g.vertices:
        head = f"vertex {v.id} {v.kind}" + (f" {v.op_type}" if v.kind == OP else "")
        attrs = "".join(f" {k}={_encode(val)}" for k, val in sorted(v.attrs.items()))
        lines.append(head + attrs)
    for e in g.edges:
        lines.append(f"edge {e.src} {e.dst} {e.slot}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> Graph:
    lines = text.splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise GraphError("not a graph file (missing header line)")
    vertices, edges = [], []
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "vertex":
                vid, kind = parts[1], parts[2]
                rest = parts[3:]
                op_type = None
                if kind == OP:
                    op_type, rest = rest[0], rest[1:]
                attrs = {}
                for tok in rest:
                    key, _, val = tok.partition("=")
                    if not _:
                        raise GraphError(f"attribute {tok!r} is not key=value")
                    attrs[key] = _decode(val)
                vertices.append(Vertex(vid, kind, op_type, attrs))
            elif parts[0] == "edge":
                slot = int(parts[3]) if len(parts) > 3 else 0
                edges.append(Edge(parts[1], parts[2], slot))
            else:
                raise GraphError(f"unknown record {parts[0]!r}")
        except (IndexError, ValueError) as exc:
            raise GraphError(f"line {lineno}: cannot parse {raw!r}: {exc}") from None
    return Graph(vertices, edges)


def save(g: Graph, path) -> None:
    Path(path).write_text(dumps(g))


def load(path) -> Graph:
    return loads(Path(path).read_text())


def mlp_graph(sizes: Sequence[int], *, with_loss: bool = False) -> Graph:
    """Build ``input -> FC -> ReLU -> ... -> FC`` for layer widths ``sizes``.

    Biases live in the FC vertices' attributes, not on edges, so they are
    never quantized.
    """
    if len(sizes) < 2:
        raise GraphError("an MLP needs at least input and output sizes")
    vertices = [Vertex("x", DATA, attrs={"role": "input", "shape": [sizes[0]]})]
    edges = []
    prev = "x"
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        w, fc = f"w{i + 1}", f"fc{i + 1}"
        vertices.append(Vertex(w, DATA, attrs={"role": "weight", "shape": [sizes[i], sizes[i + 1]]}))
        vertices.append(Vertex(fc, OP, "FC", {"bias": True, "units": sizes[i + 1]}))
        edges += [Edge(prev, fc, 0), Edge(w, fc, 1)]
        prev = fc
        if i < n_layers - 1:
            act = f"relu{i + 1}"
            vertices.append(Vertex(act, OP, "ReLU"))
            edges.append(Edge(prev, act, 0))
            prev = act
    if with_loss:
        vertices.append(Vertex("y", DATA, attrs={"role": "label"}))
        vertices.append(Vertex("loss", OP, "SoftmaxCE"))
        edges += [Edge(prev, "loss", 0), Edge("y", "loss", 1)]
    return Graph(vertices, edges)
