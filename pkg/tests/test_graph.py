import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autoquant import graph as G
from autoquant.graph import DATA, OP, Edge, Graph, GraphError, Vertex

from dags import random_dag


def chain():
    return Graph(
        [Vertex("a", DATA), Vertex("b", OP, "ReLU"), Vertex("c", OP, "ReLU")],
        [Edge("a", "b"), Edge("b", "c")],
    )


def diamond():
    return Graph(
        [Vertex("a", DATA), Vertex("b", OP, "ReLU"), Vertex("c", OP, "ReLU"), Vertex("d", OP, "Add")],
        [Edge("a", "b"), Edge("a", "c"), Edge("b", "d", 0), Edge("c", "d", 1)],
    )


def fc_example():
    return Graph(
        [Vertex("input", DATA), Vertex("w", DATA), Vertex("fc", OP, "FC")],
        [Edge("input", "fc", 0), Edge("w", "fc", 1)],
    )


class TestDegrees:
    def test_isolated(self):
        g = Graph([Vertex("x", DATA)], [])
        assert (G.in_degree(g, "x"), G.out_degree(g, "x")) == (0, 0)

    def test_chain(self):
        assert (G.in_degree(chain(), "b"), G.out_degree(chain(), "b")) == (1, 1)

    def test_diamond(self):
        assert (G.in_degree(diamond(), "d"), G.out_degree(diamond(), "d")) == (2, 0)


class TestValidate:
    def test_valid_chain(self):
        assert G.validate(chain()) == []

    def test_self_loop(self):
        g = Graph([Vertex("a", DATA), Vertex("b", OP, "ReLU")], [Edge("a", "b"), Edge("b", "b", 1)])
        assert any(p.startswith("cyclic") for p in G.validate(g))

    def test_cycle(self):
        g = Graph(
            [Vertex("a", DATA), Vertex("b", OP, "Add"), Vertex("c", OP, "ReLU")],
            [Edge("a", "b"), Edge("b", "c"), Edge("c", "b", 1)],
        )
        assert any(p.startswith("cyclic") for p in G.validate(g))

    def test_op_without_inputs(self):
        g = Graph([Vertex("a", DATA), Vertex("b", OP, "ReLU"), Vertex("c", OP, "ReLU")], [Edge("a", "b")])
        diags = G.validate(g)
        assert any(p.startswith("kind") and " c " in p for p in diags)

    def test_data_with_input(self):
        g = Graph([Vertex("a", DATA), Vertex("b", DATA)], [Edge("a", "b")])
        assert any(p.startswith("kind") for p in G.validate(g))

    def test_bad_vertices(self):
        with pytest.raises(GraphError):
            Vertex("x y", DATA)
        with pytest.raises(GraphError):
            Vertex("x", OP, "Sigmoid")
        with pytest.raises(GraphError):
            Graph([Vertex("a", DATA)], [Edge("a", "zz")])


class TestTopoOrder:
    def test_chain(self):
        assert G.topo_order(chain()) == ["a", "b", "c"]

    def test_diamond_ties_by_id(self):
        assert G.topo_order(diamond()) == ["a", "b", "c", "d"]

    def test_quantizers_between_endpoints(self):
        gq = G.qag_transform(fc_example(), {"fc"})
        order = G.topo_order(gq)
        for q in gq.quantizers():
            assert order.index(q.attrs["src"]) < order.index(q.id) < order.index(q.attrs["dst"])

    def test_cycle_raises(self):
        g = Graph([Vertex("a", DATA), Vertex("b", OP, "Add")], [Edge("a", "b"), Edge("b", "b", 1)])
        with pytest.raises(GraphError):
            G.topo_order(g)


class TestQAG:
    def test_empty_expensive_set_is_noop(self):
        assert G.qag_transform(diamond(), set()) == diamond()

    def test_fc_example_by_hand(self):
        # hand trace: sweep 1 admits {input, w}; frontier {fc}; fc in Ve so
        # both in-edges are split.
        gq, iters = G.qag_transform(fc_example(), {"fc"}, return_iterations=True)
        assert len(gq.vertices) == 5 and len(gq.edges) == 4
        assert len(gq.quantizers()) == 2
        assert iters == 1
        assert set(gq.edges) == {
            Edge("input", "q[input->fc:0]", 0), Edge("q[input->fc:0]", "fc", 0),
            Edge("w", "q[w->fc:1]", 0), Edge("q[w->fc:1]", "fc", 1),
        }
        assert G.validate(gq) == []

    def test_default_expensive_is_fc(self):
        assert len(G.qag_transform(fc_example()).quantizers()) == 2

    def test_multi_edges_get_own_quantizers(self):
        g = Graph([Vertex("a", DATA), Vertex("m", OP, "MatMul")], [Edge("a", "m", 0), Edge("a", "m", 1)])
        gq = G.qag_transform(g, {"m"})
        assert len(gq.quantizers()) == 2

    def test_second_application_adds_second_layer(self):
        g1 = G.qag_transform(fc_example(), {"fc"})
        g2 = G.qag_transform(g1, {"fc"})
        assert len(g2.quantizers()) == 4
        assert G.contract_quantizers(g2) == fc_example()

    def test_errors(self):
        with pytest.raises(GraphError):
            G.qag_transform(fc_example(), {"w"})
        cyc = Graph([Vertex("a", DATA), Vertex("b", OP, "Add")], [Edge("a", "b"), Edge("b", "b", 1)])
        with pytest.raises(GraphError):
            G.qag_transform(cyc, set())
        two = Graph([Vertex("a", DATA), Vertex("b", DATA)], [])
        with pytest.raises(GraphError):
            G.qag_transform(two, set())

    def test_biases_are_never_quantized(self):
        g = G.mlp_graph([2, 8, 2])
        gq = G.qag_transform(g)
        assert {q.attrs["src"] for q in gq.quantizers()} == {"x", "w1", "relu1", "w2"}


def check_qag_properties(g, ve):
    gq, iters = G.qag_transform(g, ve, return_iterations=True)
    q = sum(G.in_degree(g, v) for v in ve)
    assert len(gq) == len(g) + q
    assert len(gq.edges) == len(g.edges) + q
    assert len(gq.quantizers()) == q
    for e in gq.edges:
        if e.dst in ve:
            assert gq.vertex(e.src).is_quantizer
        elif not gq.vertex(e.dst).is_quantizer:
            assert not gq.vertex(e.src).is_quantizer
    for qv in gq.quantizers():
        assert G.in_degree(gq, qv.id) == 1 and G.out_degree(gq, qv.id) == 1
    assert G.contract_quantizers(gq) == g
    assert iters <= len(g)
    assert G.validate(gq) == []


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_random_dag_properties(seed):
    g, ve = random_dag(np.random.default_rng(seed))
    check_qag_properties(g, ve)


class TestTextFormat:
    def test_roundtrip(self, tmp_path):
        g = G.mlp_graph([2, 4, 3], with_loss=True)
        gq = G.qag_transform(g)
        path = tmp_path / "g.graph"
        G.save(gq, path)
        assert G.load(path) == gq
        assert path.read_text().startswith(G.HEADER)

    def test_attrs_with_spaces_and_types(self):
        v = Vertex("a", DATA, attrs={"note": "two words", "shape": [2, 3], "flag": True, "s": "true", "x": 0.5})
        g = Graph([v], [])
        back = G.loads(G.dumps(g))
        assert back.vertex("a").attrs == v.attrs

    def test_missing_header(self):
        with pytest.raises(GraphError):
            G.loads("vertex a data\n")

    def test_malformed_line(self):
        with pytest.raises(GraphError):
            G.loads(G.HEADER + "\nedge a\n")

    def test_example_file(self):
        text = "\n".join([
            G.HEADER,
            "vertex input data role=input shape=[2]",
            "vertex w data role=weight shape=[2,2]",
            "vertex fc op FC",
            "edge input fc 0",
            "edge w fc 1",
        ])
        assert G.loads(text) == Graph(
            [Vertex("input", DATA, attrs={"role": "input", "shape": [2]}),
             Vertex("w", DATA, attrs={"role": "weight", "shape": [2, 2]}),
             Vertex("fc", OP, "FC")],
            [Edge("input", "fc", 0), Edge("w", "fc", 1)],
        )
