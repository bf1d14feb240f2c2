"""Learnable per-quantizer bitwidths.

The quantizer step is ``beta = (max(d) - min(d)) / 2**b`` with ``b`` real,
and the output is ``alpha * H(d / beta)`` with ``alpha = lam * beta``. The
projection ``H`` uses the integer level count ``round(b)``; its derivative
is taken as 1 (straight-through), so the gradient reaches ``b`` only
through the scale. Per element that gives

    dL/db = -g * lam * (max - min) * ln2 / 2**b * (H(u) - u),  u = d / beta.

A precision penalty ``(E[B] - target)**2`` pulls the element-weighted mean
bitwidth toward a target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ._validation import ValidationError, check_positive, round_half_away
from .schemes import SchemeId, _round, _sign
from . import tensor as T
from .tensor import Parameter, Tensor, as_tensor, custom_op

LN2 = math.log(2.0)

#: Schemes expressible as alpha * H(d / beta) with a range-derived step.
QPL_SCHEMES = frozenset({SchemeId.FIXEDQ, SchemeId.ZOOMQ, SchemeId.CLIPQ, SchemeId.POTQ})


def default_clamp(scheme: SchemeId) -> Tuple[float, float]:
    return (2.0, 4.0) if SchemeId.parse(scheme) is SchemeId.POTQ else (1.0, 8.0)


class LearnableBitwidth:
    """A continuous bitwidth for one quantizer, clamped to ``[lo, hi]``."""

    def __init__(
        self,
        name: str,
        scheme: Union[str, SchemeId],
        init_bits: float,
        count: int,
        lo: Optional[float] = None,
        hi: Optional[float] = None,
        role: str = "weight",
    ):
        self.name = name
        self.scheme = SchemeId.parse(scheme)
        if self.scheme not in QPL_SCHEMES:
            raise ValidationError(f"{self.scheme.value} does not support learnable bitwidths")
        dlo, dhi = default_clamp(self.scheme)
        self.lo = dlo if lo is None else float(lo)
        self.hi = dhi if hi is None else float(hi)
        if not 1 <= self.lo <= self.hi <= 8:
            raise ValidationError(f"clamp range [{self.lo}, {self.hi}] must lie inside [1, 8]")
        if self.scheme is SchemeId.POTQ and self.hi > 4:
            raise ValidationError("PotQ bitwidths cannot exceed 4")
        if count <= 0:
            raise ValidationError("element count must be positive")
        self.count = int(count)
        self.role = role
        self.b = Parameter(self.clamp(init_bits))

    def clamp(self, value: float) -> float:
        return float(min(max(value, self.lo), self.hi))

    @property
    def value(self) -> float:
        return float(self.b.data)

    @property
    def int_bits(self) -> int:
        return round_half_away(self.value)

    def __repr__(self) -> str:
        return f"LearnableBitwidth({self.name!r}, {self.scheme.value}, b={self.value:.4f})"


def projection(u: np.ndarray, scheme: SchemeId, levels_bits: int, offset: float = 0.0) -> np.ndarray:
    """The integer-grid map H applied to ``u = d / beta``.

    ``offset`` is ``min(d) / beta`` and only affects ZoomQ.
    """
    scheme = SchemeId.parse(scheme)
    B = levels_bits
    if scheme is SchemeId.ZOOMQ:
        return np.clip(np.floor(u - offset), 0, 2 ** B - 1) + offset + 0.5
    if scheme is SchemeId.CLIPQ:
        top = 2 ** (B - 1)
        return np.clip(np.floor(u), -top, top - 1) + 0.5
    if scheme is SchemeId.FIXEDQ:
        top = 2 ** (B - 1)
        return np.clip(_round(u), -top, top - 1)
    if scheme is SchemeId.POTQ:
        mag = np.abs(u)
        nz = mag > 0
        v = np.clip(_round(np.log2(np.where(nz, mag, 1.0))), 0, 2 ** (B - 1) - 1)
        e = v - (v == 0)
        return np.where(nz, _sign(u) * np.exp2(e), 0.0)
    raise ValidationError(f"{scheme.value} has no learnable projection")


def learnable_forward(d, scheme: SchemeId, bits: float, lam: float = 1.0):
    """Return (dq, beta, H(u), u) for real-valued ``bits`` in float64."""
    d = np.asarray(d, dtype=np.float64)
    lo, hi = float(d.min()), float(d.max())
    beta = (hi - lo) / 2.0 ** bits
    if beta == 0:
        return d.copy(), 0.0, None, None
    u = d / beta
    h = projection(u, scheme, max(round_half_away(bits), 1), lo / beta)
    return lam * beta * h, beta, h, u


def bit_gradient(d, upstream, scheme: SchemeId, bits: float, lam: float = 1.0) -> float:
    """Closed-form dL/db for ``quantize_learnable`` given dL/d(dq)."""
    d = np.asarray(d, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != d.shape:
        raise ValidationError(f"upstream gradient shape {g.shape} != input shape {d.shape}")
    _, beta, h, u = learnable_forward(d, scheme, bits, lam)
    if beta == 0:
        return 0.0
    rng = float(d.max() - d.min())
    return float(-np.sum(g * lam * rng * LN2 / 2.0 ** bits * (h - u)))


def quantize_learnable(d: Tensor, scheme: Union[str, SchemeId], lb: LearnableBitwidth, lam: float = 1.0) -> Tensor:
    """Quantize ``d`` at the current continuous bitwidth of ``lb``.

    The input receives ``lam * upstream``; ``lb.b`` receives
    :func:`bit_gradient`. A zero-range input is passed through with a zero
    bit gradient.
    """
    d = as_tensor(d)
    scheme = SchemeId.parse(scheme)
    check_positive("lam", lam)
    bits = lb.clamp(lb.value)
    x = d.data.astype(np.float64)
    dq, beta, _, _ = learnable_forward(x, scheme, bits, lam)

    def vjp(g):
        gb = 0.0 if beta == 0 else bit_gradient(x, g, scheme, bits, lam)
        return (g * np.float32(lam), np.float32(gb))

    return custom_op(dq, (d, lb.b), vjp, "quantize_learnable")


# -- precision loss ------------------------------------------------------------------


@dataclass(frozen=True)
class PrecisionTarget:
    target: float
    weight: float = 1.0
    lo: float = 1.0
    hi: float = 8.0

    def __post_init__(self):
        if not self.lo <= self.target <= self.hi:
            raise ValidationError(f"target bits {self.target} outside [{self.lo}, {self.hi}]")
        if self.weight < 0:
            raise ValidationError("precision-loss weight must be non-negative")


BitsLike = Union[float, Tensor, LearnableBitwidth]


def _bits_tensor(b: BitsLike) -> Tensor:
    if isinstance(b, LearnableBitwidth):
        return b.b
    return as_tensor(b)


def precision_loss(bits: Sequence[Tuple[BitsLike, int]], target: Union[PrecisionTarget, float]) -> Tensor:
    """``weight * (E[B] - target)**2`` with E[B] weighted by element counts."""
    if not bits:
        raise ValidationError("precision loss needs at least one quantizer")
    if not isinstance(target, PrecisionTarget):
        target = PrecisionTarget(float(target))
    total = float(sum(int(c) for _, c in bits))
    if total <= 0:
        raise ValidationError("element counts must be positive")
    mean_bits = None
    for b, c in bits:
        term = T.reshape(_bits_tensor(b), ()) * (int(c) / total)
        mean_bits = term if mean_bits is None else mean_bits + term
    return T.square(mean_bits - target.target) * target.weight


def expected_bits(bits: Sequence[Tuple[float, int]]) -> float:
    counts = np.array([c for _, c in bits], dtype=np.float64)
    values = np.array([float(b.value if isinstance(b, LearnableBitwidth) else b) for b, _ in bits])
    return float(np.dot(values, counts) / counts.sum())


def combined_bit_step(bitwidths: Iterable[LearnableBitwidth], lr: float) -> List[float]:
    """SGD step ``b <- clamp(b - lr * g_b)`` using the gradient on each ``b``.

    ``g_b`` is whatever the last backward pass accumulated (task loss plus
    precision loss when both were summed before ``backward``). Gradients
    are cleared afterwards.
    """
    out = []
    for lb in bitwidths:
        g = 0.0 if lb.b.grad is None else float(lb.b.grad)
        lb.b.assign(lb.clamp(lb.value - lr * g))
        lb.b.zero_grad()
        out.append(lb.value)
    return out


# -- final policy ---------------------------------------------------------------------


@dataclass
class PolicyEntry:
    name: str
    role: str
    scheme: SchemeId
    bits: float
    count: int


@dataclass
class BitPolicy:
    entries: List[PolicyEntry] = field(default_factory=list)

    HEADER = "# autoquant-policy v1"

    def _avg(self, role: Optional[str]) -> Optional[float]:
        sel = [e for e in self.entries if role is None or e.role == role]
        if not sel:
            return None
        return expected_bits([(e.bits, e.count) for e in sel])

    @property
    def average_weight_bits(self) -> Optional[float]:
        return self._avg("weight")

    @property
    def average_activation_bits(self) -> Optional[float]:
        return self._avg("activation")

    @property
    def average_bits(self) -> Optional[float]:
        return self._avg(None)

    def wa_string(self) -> str:
        def fmt(x):
            return "-" if x is None else f"{x:.2f}"

        return f"{fmt(self.average_weight_bits)}/{fmt(self.average_activation_bits)}"

    def dumps(self) -> str:
        lines = [self.HEADER, "quantizer,role,scheme,bits,elements"]
        for e in self.entries:
            lines.append(f"{e.name},{e.role},{e.scheme.value},{int(e.bits)},{e.count}")
        lines.append(f"average bits W/A: {self.wa_string()}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def finalize_bits(entries: Iterable[PolicyEntry]) -> BitPolicy:
    """Round each bitwidth half-away-from-zero and clamp to its scheme's range."""
    out = []
    for e in entries:
        lo, hi = SchemeId.parse(e.scheme).bit_range
        b = min(max(round_half_away(float(e.bits)), lo), hi)
        out.append(PolicyEntry(e.name, e.role, SchemeId.parse(e.scheme), b, int(e.count)))
    return BitPolicy(out)
