"""Candidate quantizing schemes.

Each scheme has a pure NumPy kernel (``*_q``) operating on float arrays and
a :class:`~autoquant.tensor.Tensor` wrapper (``quantize_*``) whose backward
pass is the straight-through estimator scaled by ``lam``.

Conventions shared by all kernels:

* ``sign(0) = -1``; an exact-zero input to PotQ yields 0.
* ``round`` is round-half-away-from-zero.
* When a data-derived scale collapses to 0 (constant or all-zero input)
  ZoomQ returns its input and the magnitude-scaled schemes return zeros.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Optional, Tuple, Union

import numpy as np

from ._validation import ValidationError, check_positive, round_half_away
from .distributions import get_sampler
from .tensor import Tensor, as_tensor, custom_grad


class SchemeId(str, enum.Enum):
    BINARY = "binary"
    TERNARY = "ternary"
    QUATERNARY = "quaternary"
    FIXEDQ = "fixedq"
    RESQ = "resq"
    ZOOMQ = "zoomq"
    CLIPQ = "clipq"
    POTQ = "potq"

    @classmethod
    def parse(cls, value: Union[str, "SchemeId"]) -> "SchemeId":
        if isinstance(value, SchemeId):
            return value
        key = str(value).strip().lower()
        aliases = {"b": "binary", "t": "ternary", "q": "quaternary", "f": "fixedq",
                   "r": "resq", "z": "zoomq", "c": "clipq", "p": "potq"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValidationError(f"unknown quantizing scheme {value!r}") from None

    @property
    def bit_range(self) -> Tuple[int, int]:
        return BIT_RANGES[self]

    @property
    def letter(self) -> str:
        return _LETTERS[self]


BIT_RANGES: Dict[SchemeId, Tuple[int, int]] = {
    SchemeId.BINARY: (1, 1),
    SchemeId.TERNARY: (2, 2),
    SchemeId.QUATERNARY: (2, 2),
    SchemeId.FIXEDQ: (2, 8),
    # one residual pass is plain binarization, so b=1 is accepted
    SchemeId.RESQ: (1, 8),
    SchemeId.ZOOMQ: (2, 8),
    SchemeId.CLIPQ: (2, 8),
    SchemeId.POTQ: (2, 4),
}

_LETTERS = {
    SchemeId.BINARY: "B", SchemeId.TERNARY: "T", SchemeId.QUATERNARY: "Q",
    SchemeId.FIXEDQ: "F", SchemeId.RESQ: "R", SchemeId.ZOOMQ: "Z",
    SchemeId.CLIPQ: "C", SchemeId.POTQ: "P",
}

#: Schemes whose scale is a free parameter chosen offline.
PARAMETRIC_ALPHA = frozenset({SchemeId.CLIPQ, SchemeId.POTQ})

# Offline optima for standard-normal data.
DEFAULT_ALPHAS: Dict[Tuple[SchemeId, int], float] = {
    (SchemeId.CLIPQ, 2): 1.2832,
    (SchemeId.CLIPQ, 3): 0.6694,
    (SchemeId.CLIPQ, 4): 0.3570,
    (SchemeId.CLIPQ, 5): 0.1939,
    (SchemeId.CLIPQ, 6): 0.1056,
    (SchemeId.CLIPQ, 7): 0.0573,
    (SchemeId.CLIPQ, 8): 0.0308,
    (SchemeId.POTQ, 2): 1.2240,
    (SchemeId.POTQ, 3): 0.5181,
    (SchemeId.POTQ, 4): 0.0381,
}


def check_bits(scheme: SchemeId, bits: float) -> int:
    """Return the integer bitwidth for ``bits`` or raise if out of range."""
    scheme = SchemeId.parse(scheme)
    if not math.isfinite(bits):
        raise ValidationError(f"bitwidth must be finite, got {bits!r}")
    b = round_half_away(bits)
    lo, hi = scheme.bit_range
    if not lo <= b <= hi:
        raise ValidationError(f"{scheme.value} supports {lo}-{hi} bits, got {bits!r}")
    return b


# -- kernels ----------------------------------------------------------------


def _round(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _sign(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, -1.0)


def _f64(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("cannot quantize an empty tensor")
    return x


def binary_q(x) -> np.ndarray:
    x = _f64(x)
    alpha = np.mean(np.abs(x))
    return alpha * _sign(x) + 0.0


def ternary_q(x) -> np.ndarray:
    x = _f64(x)
    beta = 0.7 * np.mean(np.abs(x))
    if beta == 0:
        return np.zeros_like(x)
    support = np.abs(x) > beta
    alpha = np.mean(np.abs(x[support])) if support.any() else 0.0
    return alpha * np.clip(_round(x / (2 * beta)), -1, 1) + 0.0


def quaternary_q(x) -> np.ndarray:
    x = _f64(x)
    alpha = math.sqrt(np.var(x))
    if alpha == 0:
        return np.zeros_like(x)
    return alpha * (np.clip(np.floor(x / alpha), -2, 1) + 0.5)


def fixed_alpha(x, bits: int) -> float:
    """Power-of-two step for FixedQ, or 0 for an all-zero input."""
    m = float(np.max(np.abs(_f64(x))))
    if m == 0:
        return 0.0
    p = math.floor(math.log2(m)) - (bits - 2)
    return 2.0 ** p


def fixed_q(x, bits: int, alpha: Optional[float] = None) -> np.ndarray:
    x = _f64(x)
    if alpha is None:
        alpha = fixed_alpha(x, bits)
    if alpha == 0:
        return np.zeros_like(x)
    top = 2 ** (bits - 1)
    return alpha * np.clip(_round(x / alpha), -top, top - 1) + 0.0


def res_q(x, bits: int) -> np.ndarray:
    x = _f64(x)
    out = np.zeros_like(x)
    residual = x
    for _ in range(bits):
        step = binary_q(residual)
        out = out + step
        residual = residual - step
    return out


def zoom_params(x, bits: float) -> Tuple[float, float]:
    x = _f64(x)
    lo = float(np.min(x))
    return (float(np.max(x)) - lo) / 2.0 ** bits, lo


def zoom_q(x, bits: int, alpha: Optional[float] = None, beta: Optional[float] = None) -> np.ndarray:
    x = _f64(x)
    if alpha is None or beta is None:
        a, b0 = zoom_params(x, bits)
        alpha = a if alpha is None else alpha
        beta = b0 if beta is None else beta
    if alpha == 0:
        return x.copy()
    k = np.clip(np.floor((x - beta) / alpha), 0, 2 ** bits - 1)
    return alpha * k + beta + alpha / 2


def clip_q(x, bits: int, alpha: float) -> np.ndarray:
    x = _f64(x)
    top = 2 ** (bits - 1)
    return alpha * (np.clip(np.floor(x / alpha), -top, top - 1) + 0.5)


def pot_q(x, bits: int, alpha: float) -> np.ndarray:
    x = _f64(x)
    mag = np.abs(x)
    nonzero = mag > 0
    with np.errstate(divide="ignore"):
        v = np.clip(_round(np.log2(np.where(nonzero, mag, 1.0) / alpha)), 0, 2 ** (bits - 1) - 1)
    e = v - (v == 0)
    return np.where(nonzero, alpha * _sign(x) * np.exp2(e), 0.0)


# -- configs ------------------------------------------------------------------


@dataclass(frozen=True)
class QuantConfig:
    """One scheme at one bitwidth.

    ``alpha`` only matters for ClipQ/PotQ; when omitted the default table
    value is used. With ``alpha_per_std`` the scale is multiplied by the
    standard deviation of the tensor being quantized, which makes the
    unit-normal table values usable on data of any spread.
    """

    scheme: SchemeId
    bits: float
    lam: float = 1.0
    alpha: Optional[float] = None
    alpha_per_std: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scheme", SchemeId.parse(self.scheme))
        check_bits(self.scheme, self.bits)
        check_positive("lam", self.lam)
        if self.alpha is not None:
            check_positive("alpha", self.alpha)

    @property
    def int_bits(self) -> int:
        return check_bits(self.scheme, self.bits)

    @property
    def label(self) -> str:
        return f"{self.scheme.letter}-{self.int_bits}"

    def resolve_alpha(self, x: Optional[np.ndarray] = None, table: Optional["AlphaTable"] = None) -> float:
        alpha = self.alpha
        if alpha is None:
            alpha = (table or AlphaTable.default()).get(self.scheme, self.int_bits)
        if self.alpha_per_std and x is not None:
            sd = float(np.std(np.asarray(x, dtype=np.float64)))
            if sd > 0:
                alpha = alpha * sd
        return alpha

    def apply(self, x, table: Optional["AlphaTable"] = None) -> np.ndarray:
        """Run the kernel on an array (no autodiff)."""
        s, b = self.scheme, self.int_bits
        if s is SchemeId.BINARY:
            return binary_q(x)
        if s is SchemeId.TERNARY:
            return ternary_q(x)
        if s is SchemeId.QUATERNARY:
            return quaternary_q(x)
        if s is SchemeId.FIXEDQ:
            return fixed_q(x, b)
        if s is SchemeId.RESQ:
            return res_q(x, b)
        if s is SchemeId.ZOOMQ:
            return zoom_q(x, b)
        if s is SchemeId.CLIPQ:
            return clip_q(x, b, self.resolve_alpha(x, table))
        return pot_q(x, b, self.resolve_alpha(x, table))


def default_bits(scheme: SchemeId, search_bits: int = 3) -> int:
    """Bitwidth a scheme takes when candidates share ``search_bits``."""
    lo, hi = SchemeId.parse(scheme).bit_range
    return min(max(search_bits, lo), hi)


# -- tensor wrappers (straight-through backward) -------------------------------


def _ste(kernel: Callable[[np.ndarray], np.ndarray], d: Tensor, lam: float) -> Tensor:
    return custom_grad(kernel, as_tensor(d), lam)


def quantize(d: Tensor, config: QuantConfig, table: Optional["AlphaTable"] = None) -> Tensor:
    return _ste(lambda x: config.apply(x, table), d, config.lam)


def quantize_binary(d: Tensor, lam: float = 1.0) -> Tensor:
    return _ste(binary_q, d, lam)


def quantize_ternary(d: Tensor, lam: float = 1.0) -> Tensor:
    return _ste(ternary_q, d, lam)


def quantize_quaternary(d: Tensor, lam: float = 1.0) -> Tensor:
    return _ste(quaternary_q, d, lam)


def quantize_fixed(d: Tensor, bits: int, lam: float = 1.0) -> Tensor:
    b = check_bits(SchemeId.FIXEDQ, bits)
    return _ste(lambda x: fixed_q(x, b), d, lam)


def quantize_res(d: Tensor, bits: int, lam: float = 1.0) -> Tensor:
    b = check_bits(SchemeId.RESQ, bits)
    return _ste(lambda x: res_q(x, b), d, lam)


def quantize_zoom(d: Tensor, bits: int, lam: float = 1.0) -> Tensor:
    b = check_bits(SchemeId.ZOOMQ, bits)
    return _ste(lambda x: zoom_q(x, b), d, lam)


def quantize_clip(d: Tensor, bits: int, alpha: float, lam: float = 1.0) -> Tensor:
    b = check_bits(SchemeId.CLIPQ, bits)
    alpha = check_positive("alpha", alpha)
    return _ste(lambda x: clip_q(x, b, alpha), d, lam)


def quantize_pot(d: Tensor, bits: int, alpha: float, lam: float = 1.0) -> Tensor:
    b = check_bits(SchemeId.POTQ, bits)
    alpha = check_positive("alpha", alpha)
    return _ste(lambda x: pot_q(x, b, alpha), d, lam)


def quantization_loss(d, q) -> float:
    """Mean squared distance between a tensor and its quantized version."""
    d = d.data if isinstance(d, Tensor) else d
    q = q.data if isinstance(q, Tensor) else q
    d = np.asarray(d, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if d.shape != q.shape:
        raise ValueError(f"shape mismatch: {d.shape} vs {q.shape}")
    if d.size == 0:
        raise ValueError("quantization_loss of empty tensors")
    diff = d - q
    return float(np.mean(diff * diff))


# -- offline alpha search --------------------------------------------------------


def golden_section(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-4) -> Tuple[float, float]:
    """Minimize a unimodal ``f`` on [lo, hi]; returns (x, f(x))."""
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = (a + b) / 2
    return x, f(x)


def alpha_objective(scheme: SchemeId, bits: int, samples: np.ndarray) -> Callable[[float], float]:
    scheme = SchemeId.parse(scheme)
    if scheme not in PARAMETRIC_ALPHA:
        raise ValidationError(f"{scheme.value} has no free alpha to optimize")
    kernel = clip_q if scheme is SchemeId.CLIPQ else pot_q
    x = np.asarray(samples, dtype=np.float64)

    def mse(alpha: float) -> float:
        diff = kernel(x, bits, alpha) - x
        return float(np.dot(diff, diff) / diff.size)

    return mse


class SortedObjective:
    """Exact quantization MSE from sorted samples and prefix sums.

    ClipQ and PotQ are monotone step functions of ``x`` for a fixed
    ``alpha``, so the error over each step is a closed form in the count,
    sum and sum of squares of the samples it covers. One evaluation costs a
    handful of binary searches instead of a pass over the population, which
    makes a dense grid scan affordable.
    """

    def __init__(self, scheme: SchemeId, bits: int, samples: np.ndarray):
        self.scheme = SchemeId.parse(scheme)
        if self.scheme not in PARAMETRIC_ALPHA:
            raise ValidationError(f"{self.scheme.value} has no free alpha to optimize")
        self.bits = bits
        x = np.sort(np.asarray(samples, dtype=np.float64))
        self.x = x
        self.n = x.size
        self.c1 = np.concatenate([[0.0], np.cumsum(x)])
        self.c2 = np.concatenate([[0.0], np.cumsum(x * x)])

    def _segments(self, alpha: float):
        """(start indices, levels) of the steps covering the sorted samples."""
        if self.scheme is SchemeId.CLIPQ:
            top = 2 ** (self.bits - 1)
            k = np.arange(-top + 1, top)
            starts = np.searchsorted(self.x, k * alpha, side="left")
            levels = alpha * (np.arange(-top, top) + 0.5)
            return np.concatenate([[0], starts]), levels
        vmax = 2 ** (self.bits - 1) - 1
        mags = alpha * np.exp2(np.arange(vmax + 1) - (np.arange(vmax + 1) == 0))
        edges = alpha * np.exp2(np.arange(1, vmax + 1) - 0.5)
        # negative side: |x| >= edge moves one level up in magnitude
        neg_starts = np.searchsorted(self.x, -edges[::-1], side="right")
        zero_lo = np.searchsorted(self.x, 0.0, side="left")
        zero_hi = np.searchsorted(self.x, 0.0, side="right")
        pos_starts = np.searchsorted(self.x, edges, side="left")
        starts = np.concatenate([[0], neg_starts, [zero_lo, zero_hi], pos_starts])
        levels = np.concatenate([-mags[::-1], [0.0], mags])
        return starts, levels

    def __call__(self, alpha: float) -> float:
        starts, levels = self._segments(alpha)
        ends = np.concatenate([starts[1:], [self.n]])
        cnt = (ends - starts).astype(np.float64)
        s1 = self.c1[ends] - self.c1[starts]
        s2 = self.c2[ends] - self.c2[starts]
        return float(np.sum(s2 - 2 * levels * s1 + levels * levels * cnt) / self.n)


def optimize_alpha(
    scheme: Union[str, SchemeId],
    bits: int,
    sampler: Union[str, Callable[[np.random.Generator, int], np.ndarray]] = "normal",
    n: int = 1_000_000,
    seed: int = 0,
    *,
    upper: float = 8.0,
    tol: float = 1e-4,
) -> float:
    """Scale minimizing the mean squared quantization error on sampled data.

    Golden-section search over (0, upper]. The result is cross-checked
    against a grid with step 1e-3; if a grid point beats it the objective is
    not unimodal there, and the search is repeated inside the bracket around
    the best grid point. Differences below one part in a million are
    sampling ripple, not a second basin, and are ignored.
    """
    scheme = SchemeId.parse(scheme)
    b = check_bits(scheme, bits)
    if n < 100_000:
        raise ValidationError(f"n must be at least 1e5, got {n}")
    draw = get_sampler(sampler) if isinstance(sampler, str) else sampler
    samples = np.asarray(draw(np.random.default_rng(seed), n), dtype=np.float64)
    f = alpha_objective(scheme, b, samples)

    best, fbest = golden_section(f, tol, upper, tol)
    fast = SortedObjective(scheme, b, samples)
    grid = np.arange(1e-3, upper + 1e-12, 1e-3)
    grid_losses = np.array([fast(a) for a in grid])
    i = int(np.argmin(grid_losses))
    if grid_losses[i] < fbest * (1 - 1e-6):
        warnings.warn(
            f"alpha objective for {scheme.value}-{b} is not unimodal on (0, {upper}]; "
            "falling back to a dense grid",
            RuntimeWarning,
            stacklevel=2,
        )
        lo = grid[i - 1] if i > 0 else tol
        hi = grid[min(i + 1, grid.size - 1)]
        cand, fcand = golden_section(f, lo, hi, tol / 10)
        if fcand > grid_losses[i]:
            cand = float(grid[i])
        best = cand
    return float(best)


class AlphaTable:
    """Map of (scheme, bits) to a scale, serializable as CSV text."""

    HEADER = "# autoquant-alpha-table v1"

    def __init__(self, entries: Optional[Dict[Tuple[SchemeId, int], float]] = None):
        self._entries: Dict[Tuple[SchemeId, int], float] = {}
        for (s, b), a in (entries or {}).items():
            self.set(s, b, a)

    @classmethod
    def default(cls) -> "AlphaTable":
        return cls(DEFAULT_ALPHAS)

    def set(self, scheme, bits: int, alpha: float) -> None:
        scheme = SchemeId.parse(scheme)
        if scheme not in PARAMETRIC_ALPHA:
            raise ValidationError(f"{scheme.value} does not use a tabulated alpha")
        self._entries[(scheme, check_bits(scheme, bits))] = check_positive("alpha", alpha)

    def get(self, scheme, bits: int) -> float:
        key = (SchemeId.parse(scheme), int(bits))
        if key not in self._entries:
            raise KeyError(f"no alpha for {key[0].value} at {bits} bits")
        return self._entries[key]

    def items(self) -> Iterable[Tuple[Tuple[SchemeId, int], float]]:
        return sorted(self._entries.items(), key=lambda kv: (kv[0][0].value, kv[0][1]))

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        s, b = key
        return (SchemeId.parse(s), int(b)) in self._entries

    def __eq__(self, other) -> bool:
        return isinstance(other, AlphaTable) and dict(self.items()) == dict(other.items())

    def merged(self, other: "AlphaTable") -> "AlphaTable":
        out = AlphaTable(dict(self.items()))
        for (s, b), a in other.items():
            out.set(s, b, a)
        return out

    def dumps(self) -> str:
        lines = [self.HEADER, "scheme,bits,alpha"]
        lines += [f"{s.value},{b},{a!r}" for (s, b), a in self.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "AlphaTable":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != cls.HEADER:
            raise ValidationError("not an alpha table file (missing header line)")
        table = cls()
        for ln in lines[1:]:
            if ln.startswith("#") or ln == "scheme,bits,alpha":
                continue
            try:
                s, b, a = ln.split(",")
                table.set(s, int(b), float(a))
            except ValueError as exc:
                raise ValidationError(f"malformed alpha table row {ln!r}: {exc}") from None
        return table

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "AlphaTable":
        return cls.loads(Path(path).read_text())
