import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from autoquant import tensor as T
from autoquant._validation import ValidationError
from autoquant.precision import (
    BitPolicy,
    LearnableBitwidth,
    PolicyEntry,
    PrecisionTarget,
    bit_gradient,
    combined_bit_step,
    expected_bits,
    finalize_bits,
    learnable_forward,
    precision_loss,
    quantize_learnable,
)
from autoquant.schemes import SchemeId

from conftest import rel_err

# -- symbolic oracle ------------------------------------------------------------------------


def h_oracle(scheme, u, B, off):
    """Projection H on one exact (sympy Rational) value u."""
    top = 2 ** (B - 1)
    if scheme == "clipq":
        return sp.Min(sp.Max(sp.floor(u), -top), top - 1) + sp.Rational(1, 2)
    if scheme == "fixedq":
        r = sp.sign(u) * sp.floor(abs(u) + sp.Rational(1, 2))
        return sp.Min(sp.Max(r, -top), top - 1)
    if scheme == "zoomq":
        return sp.Min(sp.Max(sp.floor(u - off), 0), 2 ** B - 1) + off + sp.Rational(1, 2)
    if scheme == "potq":
        if u == 0:
            return sp.Integer(0)
        lg = sp.log(abs(u), 2)
        v = sp.sign(lg) * sp.floor(abs(lg) + sp.Rational(1, 2))
        v = sp.Min(sp.Max(v, 0), top - 1)
        e = v - 1 if v == 0 else v
        return (1 if u > 0 else -1) * sp.Integer(2) ** e
    raise ValueError(scheme)


def symbolic_bit_gradient(d, g, scheme, bits, lam):
    """Differentiate the STE surrogate sum g_i * lam * beta(b) * (H_i + u_i(b) - u_i(b0)) at b0."""
    b = sp.Symbol("b", real=True)
    d = [sp.Rational(float(v)) for v in d]
    g = [sp.Rational(float(v)) for v in g]
    b0 = sp.Rational(float(bits))
    lam = sp.Rational(float(lam))
    R = max(d) - min(d)
    beta = R / 2 ** b
    beta0 = R / 2 ** b0
    B = int(math.copysign(math.floor(abs(float(bits)) + 0.5), float(bits)))
    off = min(d) / beta0
    total = 0
    for di, gi in zip(d, g):
        u0 = di / beta0
        h0 = h_oracle(scheme, u0, B, off)
        total += gi * lam * beta * (h0 + di / beta - u0)
    return float(sp.N(sp.diff(total, b).subs(b, b0), 30))


QPL = ["clipq", "fixedq", "zoomq", "potq"]


@pytest.mark.parametrize("scheme", QPL)
@pytest.mark.parametrize("bits,lam", [(3.0, 1.0), (2.37, 0.8), (4.6, 1.3)])
def test_bit_gradient_matches_symbolic(scheme, bits, lam):
    if scheme == "potq" and bits > 4:
        bits = 3.7
    rng = np.random.default_rng(int(bits * 100) + len(scheme))
    d = rng.standard_normal(12)
    g = rng.standard_normal(12)
    got = bit_gradient(d, g, scheme, bits, lam)
    want = symbolic_bit_gradient(d, g, scheme, bits, lam)
    assert abs(got - want) <= 1e-6 * max(1.0, abs(want))


def test_closed_form_equals_ln2_identity(rng):
    # -ln2 * sum g*(dq - lam*d) is the same quantity written through the output
    d, g = rng.standard_normal(30), rng.standard_normal(30)
    for s in QPL:
        dq, *_ = learnable_forward(d, s, 3.2, 0.7)
        assert bit_gradient(d, g, s, 3.2, 0.7) == pytest.approx(-math.log(2) * np.sum(g * (dq - 0.7 * d)), rel=1e-9)


@pytest.mark.parametrize("scheme", QPL)
def test_tape_gradient_matches_closed_form_and_surrogate_fd(scheme, rng):
    d = rng.standard_normal(20).astype(np.float32)
    g = rng.standard_normal(20).astype(np.float32)
    lb = LearnableBitwidth("q", scheme, 3.3, d.size)
    x = T.Parameter(d)
    quantize_learnable(x, scheme, lb, 1.0).backward(g)
    closed = bit_gradient(d, g, scheme, 3.3)
    assert float(lb.b.grad) == pytest.approx(closed, rel=1e-6)
    np.testing.assert_array_equal(x.grad, g)

    # smooth surrogate: H frozen at b0, straight-through in u
    d64 = d.astype(np.float64)
    rng_ = d64.max() - d64.min()
    _, beta0, h0, u0 = learnable_forward(d64, scheme, 3.3)

    def surrogate(b):
        beta = rng_ / 2 ** b
        return float(np.sum(g * beta * (h0 + d64 / beta - u0)))

    fd = (surrogate(3.3 + 1e-3) - surrogate(3.3 - 1e-3)) / 2e-3
    assert rel_err(closed, fd) < 1e-3


def test_exactly_representable_input_has_zero_gradient():
    # FixedQ at b = log2(3) on data with range 3: beta = 1, B = 2, and every
    # u = d in {-2, ..., 1} is a fixed point of H
    d = np.array([-2.0, -1.0, 0.0, 1.0, 1.0, -2.0])
    bits = math.log2(3)
    dq, beta, h, u = learnable_forward(d, "fixedq", bits)
    assert beta == pytest.approx(1.0)
    np.testing.assert_allclose(h, u, atol=1e-12)
    assert abs(bit_gradient(d, np.arange(6.0), "fixedq", bits)) < 1e-12


def test_step_arithmetic():
    dq, beta, _, _ = learnable_forward(np.array([0.0, 1.0]), "zoomq", 1.0)
    assert beta == 0.5  # alpha = lam * beta = 0.5


def test_zero_range_passes_through():
    lb = LearnableBitwidth("q", "clipq", 3, 4)
    x = T.Parameter(np.full(4, 2.0))
    out = quantize_learnable(x, "clipq", lb)
    np.testing.assert_array_equal(out.data, x.data)
    out.backward(np.ones(4))
    assert float(lb.b.grad) == 0.0


class TestLearnableBitwidth:
    def test_clamps(self):
        assert LearnableBitwidth("a", "clipq", 12, 1).value == 8
        assert LearnableBitwidth("a", "potq", 7, 1).value == 4
        assert LearnableBitwidth("a", "potq", 0, 1).value == 2

    def test_rejects(self):
        with pytest.raises(ValidationError):
            LearnableBitwidth("a", "resq", 3, 1)
        with pytest.raises(ValidationError):
            LearnableBitwidth("a", "potq", 3, 1, hi=6)
        with pytest.raises(ValidationError):
            LearnableBitwidth("a", "clipq", 3, 0)


# -- precision loss ------------------------------------------------------------------------


class TestPrecisionLoss:
    def test_on_target_is_zero(self):
        assert precision_loss([(3.0, 10), (3.0, 7)], 3).item() == 0

    def test_weighted_example(self):
        assert expected_bits([(2, 10), (4, 30)]) == 3.5
        assert precision_loss([(2.0, 10), (4.0, 30)], 3).item() == pytest.approx(0.25)

    def test_gradient_finite_differences(self, rng):
        counts = [10, 30, 7, 120]
        bits = [LearnableBitwidth(f"b{i}", "clipq", v, c) for i, (v, c) in enumerate(zip(rng.uniform(1, 8, 4), counts))]
        target = PrecisionTarget(3.0, weight=1.7)
        precision_loss([(b, b.count) for b in bits], target).backward()
        values = np.array([b.value for b in bits], dtype=np.float64)
        w = np.array(counts) / sum(counts)

        def f(v):
            return 1.7 * (np.dot(w, v) - 3.0) ** 2

        fd = np.array([(f(values + h) - f(values - h)) / 2e-3 for h in np.eye(4) * 1e-3])
        assert rel_err([float(b.b.grad) for b in bits], fd) < 1e-4

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(1, 8), st.integers(1, 1000)), min_size=1, max_size=6), st.floats(1, 8))
    def test_convex_with_minimum_on_target(self, terms, target):
        # second difference along each coordinate is non-negative
        for i in range(len(terms)):
            vals = []
            for delta in (-0.5, 0.0, 0.5):
                t = [(b + (delta if j == i else 0.0), c) for j, (b, c) in enumerate(terms)]
                vals.append(precision_loss(t, target).item())
            assert vals[0] + vals[2] - 2 * vals[1] >= -1e-4
        # shift every bitwidth by the gap: lands on target, loss zero
        gap = expected_bits(terms) - target
        shifted = [(b - gap, c) for b, c in terms]
        assert precision_loss(shifted, target).item() < 1e-8

    def test_validation(self):
        with pytest.raises(ValidationError):
            precision_loss([], 3)
        with pytest.raises(ValidationError):
            PrecisionTarget(9.0)


class TestBitStep:
    def test_zero_gradient_leaves_b(self):
        lb = LearnableBitwidth("a", "clipq", 3.3, 5)
        combined_bit_step([lb], 0.1)
        assert lb.value == pytest.approx(3.3)

    def test_above_target_all_decrease(self):
        bits = [LearnableBitwidth(f"b{i}", "clipq", v, c) for i, (v, c) in enumerate([(5, 10), (6, 20), (4, 5)])]
        before = [b.value for b in bits]
        precision_loss([(b, b.count) for b in bits], 3).backward()
        combined_bit_step(bits, 0.1)
        assert all(b.value < v for b, v in zip(bits, before))
        assert all(b.b.grad is None or float(b.b.grad) == 0 for b in bits)

    def test_clamp_boundary(self):
        lb = LearnableBitwidth("a", "clipq", 1.0, 5)
        precision_loss([(lb, 5)], 1).backward()
        lb.b.grad = np.float32(1.0)  # outward push at the lower bound
        combined_bit_step([lb], 0.5)
        assert lb.value == 1.0


class TestFinalize:
    def test_rounding(self):
        p = finalize_bits([PolicyEntry("a", "weight", SchemeId.CLIPQ, 2.4, 1), PolicyEntry("b", "weight", SchemeId.CLIPQ, 3.6, 1)])
        assert [e.bits for e in p.entries] == [2, 4]

    def test_half_rounds_away(self):
        p = finalize_bits([PolicyEntry("a", "weight", SchemeId.CLIPQ, 2.5, 1)])
        assert p.entries[0].bits == 3

    def test_average(self):
        p = BitPolicy([PolicyEntry("a", "weight", SchemeId.CLIPQ, 2, 100), PolicyEntry("b", "weight", SchemeId.CLIPQ, 4, 100)])
        assert p.average_weight_bits == 3.0 and p.wa_string() == "3.00/-"
        assert "average bits W/A: 3.00/-" in p.dumps()

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1, 8), st.floats(0, 3))
    def test_monotone(self, b, up):
        lo = finalize_bits([PolicyEntry("a", "weight", SchemeId.CLIPQ, b, 1)]).entries[0].bits
        hi = finalize_bits([PolicyEntry("a", "weight", SchemeId.CLIPQ, min(b + up, 8), 1)]).entries[0].bits
        assert hi >= lo


def test_bowl_converges_for_toy_counts():
    counts = [2, 64, 32, 64]
    for init in ([1, 1, 1, 1], [8, 8, 8, 8], [1, 8, 1, 8], [7.3, 2.2, 5.5, 1.9]):
        bits = [LearnableBitwidth(f"b{i}", "clipq", v, c) for i, (v, c) in enumerate(zip(init, counts))]
        for _ in range(200):
            precision_loss([(b, b.count) for b in bits], 3).backward()
            combined_bit_step(bits, 0.1)
        assert abs(expected_bits([(b.value, b.count) for b in bits]) - 3) < 0.01
