"""Random connected DAG generator shared by graph tests and the acceptance gate."""

import numpy as np

from autoquant.graph import DATA, OP, Edge, Graph, Vertex

OPS = ("FC", "MatMul", "Conv", "ReLU", "Add", "BatchNormLike")


def random_dag(rng: np.random.Generator, max_vertices: int = 50, max_edges: int = 150):
    """Return (graph, expensive set). Data vertices come first, ops after."""
    n = int(rng.integers(2, max_vertices + 1))
    n_data = int(rng.integers(1, min(5, n - 1) + 1))
    ids = [f"v{i:02d}" for i in range(n)]
    vertices = [Vertex(ids[i], DATA, attrs={"role": "input"}) for i in range(n_data)]
    vertices += [Vertex(ids[i], OP, str(rng.choice(OPS))) for i in range(n_data, n)]
    pairs = []
    # every op hangs off data vertex 0 or an earlier op, so the graph is connected
    for i in range(n_data, n):
        j = int(rng.integers(n_data - 1, i))
        pairs.append((0 if j == n_data - 1 else j, i))
    for i in range(n_data):
        pairs.append((i, int(rng.integers(max(n_data, i + 1), n))))
    extra = int(rng.integers(0, max(1, max_edges - len(pairs)) + 1))
    for _ in range(min(extra, max_edges - len(pairs))):
        dst = int(rng.integers(n_data, n))
        pairs.append((int(rng.integers(0, dst)), dst))
    slots = {}
    edges = []
    for src, dst in pairs:
        k = slots.get(dst, 0)
        slots[dst] = k + 1
        edges.append(Edge(ids[src], ids[dst], k))
    ops = ids[n_data:]
    ve = {v for v in ops if rng.random() < 0.4}
    return Graph(vertices, edges), ve
