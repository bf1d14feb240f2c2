"""Differentiable scheme search with Gumbel-Softmax.

Each quantizer site mixes the outputs of all candidate schemes with weights
``softmax((theta + g) / tau)``. Lowering ``tau`` sharpens the mixture toward
a single candidate; after search, the candidate with the largest ``theta``
is kept.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from ._validation import ValidationError
from .schemes import AlphaTable, QuantConfig, SchemeId, default_bits, quantize
from . import tensor as T
from .tensor import Parameter, Tensor

TAU_MIN = 1e-3

WEIGHT_SCHEMES = (
    SchemeId.BINARY, SchemeId.TERNARY, SchemeId.QUATERNARY, SchemeId.FIXEDQ,
    SchemeId.RESQ, SchemeId.ZOOMQ, SchemeId.CLIPQ, SchemeId.POTQ,
)
# binary, ternary and quaternary are not used on (post-ReLU) activations
ACTIVATION_SCHEMES = (SchemeId.FIXEDQ, SchemeId.RESQ, SchemeId.ZOOMQ, SchemeId.CLIPQ, SchemeId.POTQ)


class SearchMode(str, enum.Enum):
    FINE = "fine"
    COARSE = "coarse"


def default_candidates(
    role: str = "weight",
    search_bits: int = 3,
    schemes: Optional[Sequence[Union[str, SchemeId]]] = None,
    alpha_per_std: bool = True,
) -> List[QuantConfig]:
    if schemes is None:
        schemes = WEIGHT_SCHEMES if role == "weight" else ACTIVATION_SCHEMES
    out = []
    for s in schemes:
        s = SchemeId.parse(s)
        out.append(QuantConfig(s, default_bits(s, search_bits), alpha_per_std=alpha_per_std))
    return out


class SchemeSearchState:
    """Candidate list plus the trainable state vector ``theta``."""

    def __init__(self, candidates: Sequence[QuantConfig], theta=None, name: str = ""):
        if len(candidates) < 1:
            raise ValidationError("scheme search needs at least one candidate")
        self.candidates = list(candidates)
        self.name = name
        init = np.zeros(len(candidates)) if theta is None else np.asarray(theta, dtype=np.float64)
        if init.shape != (len(candidates),):
            raise ValidationError(f"theta must have {len(candidates)} entries, got {init.shape}")
        self.theta = Parameter(init)

    def __len__(self) -> int:
        return len(self.candidates)

    def probabilities(self) -> np.ndarray:
        z = self.theta.data.astype(np.float64)
        e = np.exp(z - z.max())
        return e / e.sum()

    def selected(self) -> QuantConfig:
        return self.candidates[hard_select(self)]

    def __repr__(self) -> str:
        labels = ",".join(c.label for c in self.candidates)
        return f"SchemeSearchState({self.name!r}, [{labels}])"


def sample_gumbel(rng: np.random.Generator, size) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size)
    return -np.log(-np.log(u))


@dataclass(frozen=True)
class GumbelNoise:
    g: np.ndarray
    seed: Optional[int] = None

    @classmethod
    def draw(cls, n: int, rng: Union[np.random.Generator, int]) -> "GumbelNoise":
        seed = rng if isinstance(rng, (int, np.integer)) else None
        if seed is not None:
            rng = np.random.default_rng(seed)
        return cls(sample_gumbel(rng, n), seed)

    @classmethod
    def zeros(cls, n: int) -> "GumbelNoise":
        return cls(np.zeros(n))


def mixing_weights(state: SchemeSearchState, noise: Optional[GumbelNoise], tau: float) -> Tensor:
    if not (tau > 0 and math.isfinite(tau)):
        raise ValidationError(f"temperature must be positive, got {tau!r}")
    g = np.zeros(len(state)) if noise is None else np.asarray(noise.g, dtype=np.float64)
    if g.shape != (len(state),):
        raise ValidationError(f"noise has shape {g.shape}, expected ({len(state)},)")
    return T.softmax((state.theta + Tensor(g)) / float(tau))


def soft_quantize(
    d: Tensor,
    state: SchemeSearchState,
    noise: Optional[GumbelNoise],
    tau: float,
    table: Optional[AlphaTable] = None,
    learnable: Optional[Dict[int, "LearnableBitwidth"]] = None,
) -> Tensor:
    """Mixture of all candidate quantizers, differentiable w.r.t. theta and d.

    ``learnable`` maps candidate indices to trainable bitwidths; those
    candidates run through the learnable-precision quantizer instead.
    """
    from .precision import quantize_learnable

    p = mixing_weights(state, noise, tau)
    out = None
    for k, cfg in enumerate(state.candidates):
        if learnable and k in learnable:
            q = quantize_learnable(d, cfg.scheme, learnable[k], cfg.lam)
        else:
            q = quantize(d, cfg, table)
        term = p[k] * q
        out = term if out is None else out + term
    return out


def hard_select(state, noise=None):
    """Index of the chosen candidate: argmax(theta + g), or argmax(theta).

    ``noise`` may be a :class:`GumbelNoise`, a vector, or a 2-d array of
    independent draws (one per row), in which case an index array is
    returned. Ties resolve to the lowest index.
    """
    theta = state.theta.data if isinstance(state, SchemeSearchState) else np.asarray(state)
    theta = theta.astype(np.float64)
    if noise is None:
        return int(np.argmax(theta))
    g = noise.g if isinstance(noise, GumbelNoise) else np.asarray(noise, dtype=np.float64)
    if g.ndim == 2:
        return np.argmax(theta[None, :] + g, axis=1)
    return int(np.argmax(theta + g))


@dataclass(frozen=True)
class TemperatureSchedule:
    tau0: float
    total_epochs: int
    power: float = 1.0
    tau_min: float = TAU_MIN

    def __post_init__(self):
        if not self.tau0 > 0:
            raise ValidationError("tau0 must be positive")
        if self.total_epochs <= 0:
            raise ValidationError("total epochs must be positive")
        if self.power < 0:
            raise ValidationError("power must be non-negative")

    def at(self, epoch: int) -> float:
        return temperature(self.tau0, epoch, self.total_epochs, self.power, self.tau_min)


def temperature(tau0: float, epoch: int, total_epochs: int, power: float = 1.0, tau_min: float = TAU_MIN) -> float:
    """tau0 * (1 - epoch/total)^power, floored at ``tau_min``."""
    if total_epochs <= 0:
        raise ValidationError("total epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {total_epochs}]")
    tau = tau0 * (1.0 - epoch / total_epochs) ** power
    return max(tau, tau_min)


def theta_gradients(states: Sequence[SchemeSearchState], mode: Union[str, SearchMode] = SearchMode.FINE):
    """Gradients accumulated on theta by the last backward pass.

    Fine-grained search returns ``{state name: gradient}``; coarse-grained
    search has a single shared state and returns its gradient vector.
    """
    mode = SearchMode(mode)
    states = list(states)
    if mode is SearchMode.COARSE and len({id(s) for s in states}) != 1:
        raise ValidationError("coarse-grained search expects one shared state")
    for s in states:
        if s.theta.grad is None:
            raise ValidationError(f"no theta gradient for {s.name!r}; was soft_quantize used?")
    if mode is SearchMode.COARSE:
        return states[0].theta.grad.astype(np.float64)
    return {s.name: s.theta.grad.astype(np.float64) for s in states}


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


class SearchTrace:
    """Per-epoch candidate probabilities for every search state."""

    HEADER = "# autoquant-search-trace v1"

    def __init__(self):
        self.rows: List[Dict] = []

    def record(self, epoch: int, tau: float, state: SchemeSearchState) -> None:
        self.rows.append({
            "epoch": epoch,
            "tau": float(tau),
            "quantizer": state.name,
            "candidates": [c.label for c in state.candidates],
            "probabilities": [float(p) for p in state.probabilities()],
        })

    def dumps(self) -> str:
        lines = [self.HEADER, "epoch,tau,quantizer,candidate,probability"]
        for r in self.rows:
            for label, p in zip(r["candidates"], r["probabilities"]):
                lines.append(f"{r['epoch']},{r['tau']!r},{r['quantizer']},{label},{p!r}")
        return "\n".join(lines) + "\n"
