"""Execute a (quantized) computing graph on the tensor engine."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ._validation import ValidationError
from .graph import DATA, Graph, topo_order
from .precision import LearnableBitwidth, quantize_learnable
from .schemes import AlphaTable, QuantConfig, quantize
from .search import GumbelNoise, SchemeSearchState, soft_quantize
from . import tensor as T
from .tensor import Parameter, Tensor


@dataclass
class QuantizerSite:
    """Runtime binding of one Quantize vertex.

    ``mode`` is one of ``"search"`` (Gumbel-Softmax mixture), ``"fixed"``
    (a single scheme) or ``"learnable"`` (scheme with trainable bitwidth).
    """

    name: str
    role: str
    src: str
    count: int = 0
    mode: str = "search"
    state: Optional[SchemeSearchState] = None
    noise: Optional[GumbelNoise] = None
    config: Optional[QuantConfig] = None
    bitwidth: Optional[LearnableBitwidth] = None
    search_bits: Dict[int, LearnableBitwidth] = field(default_factory=dict)

    @property
    def scheme_label(self) -> str:
        if self.config is not None:
            return self.config.label
        return "search"


class GraphModel:
    """Parameters and forward pass for a graph of FC/ReLU/Add/Quantize ops.

    Weight data vertices become :class:`Parameter` tensors (He-normal init),
    FC vertices with ``bias`` get a zero-initialised bias vector.
    """

    def __init__(self, graph: Graph, seed: int = 0, lam: float = 1.0, alpha_table: Optional[AlphaTable] = None):
        self.graph = graph
        self.order = topo_order(graph)
        self.lam = lam
        self.alpha_table = alpha_table
        self.tau = 1.0
        rng = np.random.default_rng(seed)
        self.params: Dict[str, Parameter] = {}
        for vid in self.order:
            v = graph.vertex(vid)
            if v.kind == DATA and v.role == "weight":
                shape = tuple(v.attrs.get("shape", ()))
                if len(shape) != 2:
                    raise ValidationError(f"weight {vid} needs a 2-d shape attribute")
                self.params[vid] = Parameter(rng.standard_normal(shape) * np.sqrt(2.0 / shape[0]))
        for vid in self.order:
            v = graph.vertex(vid)
            if v.op_type in ("FC", "MatMul") and v.attrs.get("bias"):
                w = self._weight_input(vid)
                self.params[f"{vid}.bias"] = Parameter(np.zeros(self.params[w].shape[1]))
        self.sites: Dict[str, QuantizerSite] = {}
        for vid in self.order:
            v = graph.vertex(vid)
            if v.is_quantizer:
                (e,) = graph.in_edges(vid)
                src = graph.vertex(e.src)
                role = "weight" if src.kind == DATA and src.role == "weight" else "activation"
                count = int(np.prod(self.params[e.src].shape)) if role == "weight" else 0
                self.sites[vid] = QuantizerSite(vid, role, e.src, count)
        self.input_vertex = self._single_role("input")
        self.output_vertex = self._find_output()

    def _single_role(self, role: str) -> str:
        found = [v.id for v in self.graph.vertices if v.kind == DATA and v.role == role]
        if len(found) != 1:
            raise ValidationError(f"graph must have exactly one data vertex with role={role}, found {found}")
        return found[0]

    def _weight_input(self, vid: str) -> str:
        edges = [e for e in self.graph.in_edges(vid) if e.slot == 1]
        if not edges:
            raise ValidationError(f"FC vertex {vid} has no weight input on slot 1")
        src = edges[0].src
        while self.graph.vertex(src).is_quantizer:
            (e,) = self.graph.in_edges(src)
            src = e.src
        return src

    def _find_output(self) -> str:
        losses = [v.id for v in self.graph.vertices if v.op_type == "SoftmaxCE"]
        if losses:
            (e,) = [e for e in self.graph.in_edges(losses[0]) if e.slot == 0]
            return e.src
        sinks = [v.id for v in self.graph.vertices if v.kind != DATA and not self.graph.out_edges(v.id)]
        if len(sinks) != 1:
            raise ValidationError(f"graph must have a single output vertex, found {sinks}")
        return sinks[0]

    # -- parameters ---------------------------------------------------------------
    def weight_parameters(self) -> List[Parameter]:
        return [self.params[k] for k in sorted(self.params)]

    def search_states(self) -> List[SchemeSearchState]:
        seen, out = set(), []
        for s in self.sites.values():
            if s.state is not None and id(s.state) not in seen:
                seen.add(id(s.state))
                out.append(s.state)
        return out

    def bitwidths(self) -> List[LearnableBitwidth]:
        out = []
        for name in sorted(self.sites):
            s = self.sites[name]
            if s.mode == "learnable":
                out.append(s.bitwidth)
            elif s.mode == "search":
                out.extend(s.search_bits[k] for k in sorted(s.search_bits))
        return out

    def zero_grad(self) -> None:
        for p in self.weight_parameters():
            p.zero_grad()
        for st in self.search_states():
            st.theta.zero_grad()
        for lb in self.bitwidths():
            lb.b.zero_grad()

    def state_dict(self) -> Dict[str, dict]:
        return {k: {"shape": list(p.shape), "data": [float(v) for v in p.data.reshape(-1)]}
                for k, p in sorted(self.params.items())}

    def load_state_dict(self, state: Dict[str, dict]) -> None:
        for k, entry in state.items():
            if k not in self.params:
                raise ValidationError(f"unknown parameter {k!r}")
            self.params[k].assign(np.asarray(entry["data"], dtype=np.float32).reshape(entry["shape"]))

    # -- execution ------------------------------------------------------------------
    def _quantize(self, site: QuantizerSite, x: Tensor) -> Tensor:
        if site.mode == "search":
            if site.state is None:
                raise ValidationError(f"quantizer {site.name} has no search state bound")
            return soft_quantize(x, site.state, site.noise, self.tau, self.alpha_table, site.search_bits)
        if site.mode == "fixed":
            return quantize(x, site.config, self.alpha_table)
        if site.mode == "learnable":
            return quantize_learnable(x, site.config.scheme, site.bitwidth, self.lam)
        if site.mode == "identity":
            return x
        raise ValidationError(f"unknown quantizer mode {site.mode!r}")

    def forward(self, X) -> Tensor:
        values: Dict[str, Tensor] = {}
        for vid in self.order:
            v = self.graph.vertex(vid)
            if v.kind == DATA:
                if v.role == "input":
                    values[vid] = Tensor(X)
                elif v.role == "weight":
                    values[vid] = self.params[vid]
                continue
            ins = [values[e.src] for e in self.graph.in_edges(vid) if e.src in values]
            op = v.op_type
            if op in ("FC", "MatMul"):
                out = T.matmul(ins[0], ins[1])
                if f"{vid}.bias" in self.params:
                    out = T.add_rowvec(out, self.params[f"{vid}.bias"])
            elif op == "ReLU":
                out = T.relu(ins[0])
            elif op == "Add":
                out = ins[0] + ins[1]
            elif op == "Quantize":
                site = self.sites[vid]
                if site.role == "activation":
                    site.count = int(np.prod(ins[0].shape[1:]))
                out = self._quantize(site, ins[0])
            elif op == "SoftmaxCE":
                continue
            else:
                raise ValidationError(f"op type {op} is not executable")
            values[vid] = out
        return values[self.output_vertex]

    def infer_counts(self, X) -> Dict[str, int]:
        """Run one unquantized pass to record per-sample activation sizes."""
        modes = {k: s.mode for k, s in self.sites.items()}
        for s in self.sites.values():
            s.mode = "identity"
        try:
            self.forward(np.asarray(X)[:1])
        finally:
            for k, m in modes.items():
                self.sites[k].mode = m
        return {k: s.count for k, s in self.sites.items()}

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.forward(X).data, axis=1)
