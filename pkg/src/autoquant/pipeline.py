"""End-to-end driver.

Stages, in order:

1. insert quantizers on edges into expensive vertices;
2. for each search epoch, decay the temperature and train weights and
   scheme-state vectors through Gumbel-Softmax mixtures;
3. fix each quantizer to its argmax scheme;
4. train weights and continuous bitwidths against task loss plus the
   precision penalty.

Stages 1-3 are :func:`run_search`, stage 4 is :func:`run_train`;
:func:`run_autoqnn` composes them through the serialized search report, so
``search`` followed by ``train`` yields exactly what ``run`` does.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._validation import ValidationError
from . import graph as G
from .data import generate_dataset, split
from .distributions import DistributionSpec
from .model import GraphModel
from .precision import (
    QPL_SCHEMES,
    BitPolicy,
    LearnableBitwidth,
    PolicyEntry,
    PrecisionTarget,
    combined_bit_step,
    finalize_bits,
    precision_loss,
)
from .schemes import AlphaTable, QuantConfig, SchemeId, check_bits, quantization_loss
from .search import (
    GumbelNoise,
    SchemeSearchState,
    SearchMode,
    SearchTrace,
    TemperatureSchedule,
    default_candidates,
    hard_select,
)
from . import tensor as T

log = logging.getLogger(__name__)

CONFIG_HEADER = "# autoquant-config v1"
REPORT_HEADER = "# autoquant-report v1"
BENCH_HEADER = "# autoquant-bench v1"


class TrainingError(RuntimeError):
    pass


@dataclass
class RunConfig:
    graph: str = ""
    mlp: str = "2,32,2"
    dataset: str = "blobs"
    n_samples: int = 2500
    dim: int = 2
    separation: float = 5.0
    test_fraction: float = 0.2
    fp_epochs: int = 30
    qss_epochs: int = 10
    qpl_epochs: int = 100
    tau0: float = 5.0
    power: float = 1.0
    target_bits: float = 3.0
    precision_weight: float = 1.0
    mode: str = "coarse"
    search_bits: int = 3
    weight_schemes: str = ""
    activation_schemes: str = ""
    exempt_first_last: bool = True
    expensive: str = ""
    lr_weights: float = 0.05
    lr_theta: float = 0.5
    lr_bits: float = 0.05
    batch_size: int = 64
    lam: float = 1.0
    alpha_table: str = ""
    final_selection: str = "greedy"
    learn_bits_in_search: bool = False
    seed: int = 0
    out_dir: str = "autoquant-out"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.qss_epochs < 1:
            raise ValidationError("qss_epochs must be >= 1")
        if self.qpl_epochs < 0 or self.fp_epochs < 0:
            raise ValidationError("epoch counts must be non-negative")
        for name in ("lr_weights", "lr_theta", "lr_bits", "tau0", "lam"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.power < 0:
            raise ValidationError("power must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise ValidationError("test_fraction must be in (0, 1)")
        if self.mode not in {m.value for m in SearchMode}:
            raise ValidationError(f"mode must be one of {sorted(m.value for m in SearchMode)}")
        if self.final_selection not in ("greedy", "sample"):
            raise ValidationError("final_selection must be 'greedy' or 'sample'")
        PrecisionTarget(self.target_bits, self.precision_weight)

    # -- flat key=value text ------------------------------------------------------
    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def content_dict(self) -> Dict[str, Any]:
        """Fields that affect results; ``out_dir`` only says where they go."""
        d = self.to_dict()
        d.pop("out_dir")
        return d

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "RunConfig":
        hints = typing.get_type_hints(cls)
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in known:
                raise ValidationError(f"unknown config key {k!r}")
            kwargs[k] = _coerce(hints[k], v, k)
        return cls(**kwargs)

    def dumps(self) -> str:
        lines = [CONFIG_HEADER]
        for k, v in self.to_dict().items():
            lines.append(f"{k}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        lines = text.splitlines()
        if not lines or lines[0].strip() != CONFIG_HEADER:
            raise ValidationError("not a config file (missing header line)")
        values = {}
        for raw in lines[1:]:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValidationError(f"config line {raw!r} is not key=value")
            values[key.strip()] = val.strip()
        return cls.from_dict(values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"config file {path} not found")
        return cls.loads(p.read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def _coerce(tp, value, key):
    if not isinstance(value, str):
        return value
    try:
        if tp is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
    except ValueError:
        raise ValidationError(f"config key {key}: cannot parse {value!r} as {tp.__name__}") from None
    return value


# -- run report ----------------------------------------------------------------------------


@dataclass
class RunReport:
    """Everything a run produces, as plain JSON-compatible values."""

    config: Dict[str, Any]
    stage: str
    quantizers: List[Dict[str, Any]] = field(default_factory=list)
    search: Dict[str, Any] = field(default_factory=dict)
    params: Dict[str, Any] = field(default_factory=dict)
    curves: Dict[str, List[Dict[str, float]]] = field(default_factory=dict)
    fp_accuracy: Optional[float] = None
    accuracy: Optional[float] = None
    policy: List[Dict[str, Any]] = field(default_factory=list)
    average_bits: Dict[str, Optional[float]] = field(default_factory=dict)
    events: List[List[Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunReport":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def dumps(self) -> str:
        return REPORT_HEADER + "\n" + json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunReport":
        head, _, body = text.partition("\n")
        if head.strip() != REPORT_HEADER:
            raise ValidationError("not a run report (missing header line)")
        try:
            return cls.from_dict(json.loads(body))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"corrupt run report: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "RunReport":
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"report file {path} not found")
        return cls.loads(p.read_text())

    @property
    def wa(self) -> str:
        return self.bit_policy().wa_string()

    def bit_policy(self) -> BitPolicy:
        return BitPolicy([
            PolicyEntry(e["name"], e["role"], SchemeId.parse(e["scheme"]), e["bits"], e["count"])
            for e in self.policy
        ])

    def summary(self) -> str:
        lines = [f"stage: {self.stage}"]
        if self.fp_accuracy is not None:
            lines.append(f"full-precision test accuracy: {self.fp_accuracy:.4f}")
        if self.search.get("selected"):
            lines.append("selected schemes:")
            for name, label in self.search["selected"].items():
                lines.append(f"  {name}: {label}")
        if self.policy:
            lines.append(self.bit_policy().dumps().rstrip())
        if self.accuracy is not None:
            lines.append(f"quantized test accuracy: {self.accuracy:.4f}")
        return "\n".join(lines)


# -- helpers ---------------------------------------------------------------------------------


def _stage_rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage])


def _parse_schemes(text: str) -> Optional[List[SchemeId]]:
    if not text.strip():
        return None
    return [SchemeId.parse(s) for s in text.split(",") if s.strip()]


def load_graph(cfg: RunConfig) -> G.Graph:
    if cfg.graph:
        path = Path(cfg.graph)
        if not path.is_file():
            raise ValidationError(f"graph file {cfg.graph} not found")
        g = G.load(path)
    else:
        sizes = [int(s) for s in cfg.mlp.split(",")]
        g = G.mlp_graph(sizes)
    problems = G.validate(g)
    if problems:
        raise ValidationError("invalid graph: " + "; ".join(problems))
    return g


def expensive_set(g: G.Graph, cfg: RunConfig) -> set:
    if cfg.expensive.strip():
        return {s.strip() for s in cfg.expensive.split(",") if s.strip()}
    ve = G.default_expensive(g)
    if cfg.exempt_first_last and ve:
        order = [v for v in G.topo_order(g) if v in ve]
        ve -= {order[0], order[-1]}
    return ve


def load_data(cfg: RunConfig):
    X, y = generate_dataset(cfg.dataset, cfg.n_samples, cfg.dim, cfg.separation, cfg.seed)
    return split(X, y, cfg.seed, cfg.test_fraction)


def _alpha_table(cfg: RunConfig) -> AlphaTable:
    table = AlphaTable.default()
    if cfg.alpha_table:
        table = table.merged(AlphaTable.load(cfg.alpha_table))
    return table


def accuracy(model: GraphModel, X, y) -> float:
    return float(np.mean(model.predict(X) == y))


def train_epoch(
    model: GraphModel,
    X: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    cfg: RunConfig,
    *,
    update_theta: bool = False,
    target: Optional[PrecisionTarget] = None,
    fixed_bits: Sequence[Tuple[float, int]] = (),
) -> float:
    """One SGD pass; returns the mean task loss."""
    order = rng.permutation(len(X))
    losses = []
    for start in range(0, len(X), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        model.zero_grad()
        try:
            logits = model.forward(X[idx])
            loss = T.softmax_cross_entropy(logits, y[idx])
            total = loss
            bits = model.bitwidths()
            if target is not None and bits:
                terms = [(lb, lb.count) for lb in bits] + list(fixed_bits)
                total = loss + precision_loss(terms, target)
            total.backward()
            for p in model.weight_parameters():
                if p.grad is not None:
                    p.assign(p.data - cfg.lr_weights * p.grad)
            if update_theta:
                for st in model.search_states():
                    if st.theta.grad is not None:
                        st.theta.assign(st.theta.data - cfg.lr_theta * st.theta.grad)
            if bits:
                combined_bit_step(bits, cfg.lr_bits)
        except ValueError as exc:
            if "NaN" in str(exc):
                raise TrainingError(f"non-finite values during training: {exc}") from None
            raise
        losses.append(loss.item())
    return float(np.mean(losses))


def _fp_baseline(cfg: RunConfig, g: G.Graph, data) -> Tuple[float, List[Dict[str, float]]]:
    X_tr, X_te, y_tr, y_te = data
    model = GraphModel(g, seed=cfg.seed)
    rng = _stage_rng(cfg.seed, 0)
    curve = []
    for epoch in range(1, cfg.fp_epochs + 1):
        loss = train_epoch(model, X_tr, y_tr, rng, cfg)
        curve.append({"epoch": epoch, "loss": loss, "test_acc": accuracy(model, X_te, y_te)})
    return accuracy(model, X_te, y_te), curve


def _bind_search(model: GraphModel, cfg: RunConfig) -> List[SchemeSearchState]:
    mode = SearchMode(cfg.mode)
    overrides = {"weight": _parse_schemes(cfg.weight_schemes),
                 "activation": _parse_schemes(cfg.activation_schemes)}
    shared: Dict[str, SchemeSearchState] = {}
    for name in sorted(model.sites):
        site = model.sites[name]
        cands = default_candidates(site.role, cfg.search_bits, overrides[site.role])
        if mode is SearchMode.COARSE:
            if site.role not in shared:
                shared[site.role] = SchemeSearchState(cands, name=f"shared-{site.role}")
            site.state = shared[site.role]
        else:
            site.state = SchemeSearchState(cands, name=name)
        site.mode = "search"
        if cfg.learn_bits_in_search:
            site.search_bits = {
                k: LearnableBitwidth(f"{name}#{c.label}", c.scheme, c.int_bits, site.count, role=site.role)
                for k, c in enumerate(site.state.candidates) if c.scheme in QPL_SCHEMES
            }
    return model.search_states()


# -- stages ----------------------------------------------------------------------------------


def run_search(cfg: RunConfig) -> RunReport:
    """Quantizer insertion, Gumbel-Softmax scheme search, and scheme selection."""
    events: List[List[Any]] = []
    g = load_graph(cfg)
    data = load_data(cfg)
    X_tr, X_te, y_tr, y_te = data
    if X_tr.shape[1] != G_input_width(g):
        raise ValidationError(f"dataset has {X_tr.shape[1]} features, model expects {G_input_width(g)}")

    fp_acc, fp_curve = _fp_baseline(cfg, g, data) if cfg.fp_epochs else (None, [])

    gq = G.qag_transform(g, expensive_set(g, cfg))
    events.append(["qag", len(gq.quantizers())])
    model = GraphModel(gq, seed=cfg.seed, lam=cfg.lam, alpha_table=_alpha_table(cfg))
    model.infer_counts(X_tr)
    states = _bind_search(model, cfg)

    schedule = TemperatureSchedule(cfg.tau0, cfg.qss_epochs, cfg.power)
    rng = _stage_rng(cfg.seed, 1)
    noise_rng = _stage_rng(cfg.seed, 2)
    trace = SearchTrace()
    trajectory, curve = [], []
    for epoch in range(1, cfg.qss_epochs + 1):
        tau = schedule.at(epoch)
        model.tau = tau
        for name in sorted(model.sites):
            site = model.sites[name]
            site.noise = GumbelNoise.draw(len(site.state), noise_rng)
        target = PrecisionTarget(cfg.target_bits, cfg.precision_weight) if cfg.learn_bits_in_search else None
        loss = train_epoch(model, X_tr, y_tr, rng, cfg, update_theta=True, target=target)
        events.append(["qss_epoch", epoch, tau])
        for st in states:
            trace.record(epoch, tau, st)
        trajectory.append({"epoch": epoch, "tau": tau,
                           "probabilities": {st.name: [float(p) for p in st.probabilities()] for st in states}})
        curve.append({"epoch": epoch, "loss": loss, "test_acc": accuracy(model, X_te, y_te)})

    selected, learned_bits = {}, {}
    sample_rng = _stage_rng(cfg.seed, 3)
    for name in sorted(model.sites):
        site = model.sites[name]
        if cfg.final_selection == "sample":
            k = hard_select(site.state, GumbelNoise.draw(len(site.state), sample_rng))
        else:
            k = hard_select(site.state)
        selected[name] = site.state.candidates[k].label
        if k in site.search_bits:
            learned_bits[name] = site.search_bits[k].value
    events.append(["sample_schemes", selected])

    report = RunReport(
        config=cfg.content_dict(),
        stage="search",
        quantizers=[{"name": s.name, "role": s.role, "src": s.src, "count": s.count}
                    for _, s in sorted(model.sites.items())],
        search={
            "mode": cfg.mode,
            "states": [{"name": st.name, "candidates": [c.label for c in st.candidates],
                        "theta": [float(t) for t in st.theta.data]} for st in states],
            "trajectory": trajectory,
            "selected": selected,
            "learned_bits": learned_bits,
        },
        params=model.state_dict(),
        curves={"fp": fp_curve, "qss": curve},
        fp_accuracy=fp_acc,
        events=events,
    )
    report._trace_text = trace.dumps()  # written next to the report by the CLI
    return report


def G_input_width(g: G.Graph) -> int:
    for v in g.vertices:
        if v.kind == G.DATA and v.role == "input":
            shape = v.attrs.get("shape")
            if shape:
                return int(np.prod(shape))
    raise ValidationError("graph input vertex needs a shape attribute")


def _config_from_label(label: str, search_bits: int) -> QuantConfig:
    letter, _, bits = label.partition("-")
    scheme = SchemeId.parse(letter)
    return QuantConfig(scheme, check_bits(scheme, int(bits)), alpha_per_std=True)


def run_train(cfg: RunConfig, search: RunReport) -> RunReport:
    """Train weights and bitwidths with every quantizer fixed to its selected scheme."""
    if search.stage != "search":
        raise ValidationError(f"expected a search-stage report, got stage {search.stage!r}")
    g = load_graph(cfg)
    data = load_data(cfg)
    X_tr, X_te, y_tr, y_te = data
    gq = G.qag_transform(g, expensive_set(g, cfg))
    model = GraphModel(gq, seed=cfg.seed, lam=cfg.lam, alpha_table=_alpha_table(cfg))
    model.load_state_dict(search.params)
    model.infer_counts(X_tr)
    selected = search.search["selected"]
    if set(selected) != set(model.sites):
        raise ValidationError("search report does not match the quantizers of this graph")

    target = PrecisionTarget(cfg.target_bits, cfg.precision_weight)
    fixed_bits = []
    for name in sorted(model.sites):
        site = model.sites[name]
        site.config = _config_from_label(selected[name], cfg.search_bits)
        if site.config.scheme in QPL_SCHEMES:
            site.mode = "learnable"
            init = search.search.get("learned_bits", {}).get(name, cfg.target_bits)
            site.bitwidth = LearnableBitwidth(name, site.config.scheme, init, site.count, role=site.role)
        else:
            site.mode = "fixed"
            fixed_bits.append((float(site.config.int_bits), site.count))

    events = list(search.events)
    rng = _stage_rng(cfg.seed, 4)
    curve = []
    for epoch in range(1, cfg.qpl_epochs + 1):
        loss = train_epoch(model, X_tr, y_tr, rng, cfg, target=target, fixed_bits=fixed_bits)
        bits = {lb.name: lb.value for lb in model.bitwidths()}
        curve.append({"epoch": epoch, "loss": loss, "test_acc": accuracy(model, X_te, y_te), "bits": bits})
        events.append(["qpl_epoch", epoch])

    entries = []
    for name in sorted(model.sites):
        site = model.sites[name]
        b = site.bitwidth.value if site.mode == "learnable" else site.config.int_bits
        entries.append(PolicyEntry(name, site.role, site.config.scheme, b, site.count))
    policy = finalize_bits(entries)
    for e in policy.entries:
        site = model.sites[e.name]
        if site.mode == "learnable":
            site.bitwidth.b.assign(float(e.bits))
    final_acc = accuracy(model, X_te, y_te)
    events.append(["finalize", policy.wa_string()])

    continuous = {e.name: float(e.bits) for e in entries}
    return RunReport(
        config=cfg.content_dict(),
        stage="complete",
        quantizers=search.quantizers,
        search=search.search,
        params=model.state_dict(),
        curves={**search.curves, "qpl": curve},
        fp_accuracy=search.fp_accuracy,
        accuracy=final_acc,
        policy=[{"name": e.name, "role": e.role, "scheme": e.scheme.value, "bits": int(e.bits),
                 "count": e.count, "continuous_bits": continuous[e.name]} for e in policy.entries],
        average_bits={"weight": policy.average_weight_bits,
                      "activation": policy.average_activation_bits,
                      "all": policy.average_bits},
        events=events,
    )


def run_autoqnn(cfg: RunConfig, out_dir: Optional[str] = None) -> RunReport:
    """Full pipeline. When ``out_dir`` is given, artifacts are written there."""
    start = time.perf_counter()
    search = run_search(cfg)
    trace = getattr(search, "_trace_text", None)
    search = RunReport.loads(search.dumps())
    report = run_train(cfg, search)
    elapsed = time.perf_counter() - start
    log.info("run finished in %.2fs", elapsed)
    if out_dir:
        write_artifacts(report, out_dir, trace=trace, elapsed=elapsed)
    return report


def write_artifacts(report: RunReport, out_dir, trace: Optional[str] = None, elapsed: Optional[float] = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = "report.txt" if report.stage == "complete" else "search_report.txt"
    report.save(out / name)
    if trace:
        (out / "search_trace.csv").write_text(trace)
    if report.policy:
        report.bit_policy().save(out / "policy.txt")
    # wall-clock stays out of the report so reruns are byte-identical
    with open(out / "run.log", "a") as fh:
        for event in report.events:
            fh.write(" ".join(json.dumps(x, sort_keys=True) for x in event) + "\n")
        if elapsed is not None:
            fh.write(f"{report.stage} wall_clock_seconds={elapsed:.3f}\n")


# -- distribution benchmark --------------------------------------------------------------------


def bench_distributions(
    schemes: Sequence[str] = ("binary", "ternary", "quaternary", "fixedq", "zoomq", "clipq", "potq", "resq"),
    bits: Sequence[int] = (2, 3, 4),
    distributions: Sequence[str] = ("uniform", "normal", "logistic", "exponential", "lognormal"),
    n: int = 100_000,
    seed: int = 0,
    alpha_per_std: bool = False,
    table: Optional[AlphaTable] = None,
) -> List[Dict[str, Any]]:
    """Quantization MSE for every (distribution, scheme, bits) cell.

    Cells with bits outside a scheme's range are kept with ``mse=None`` and
    a note.
    """
    rows = []
    for dist in distributions:
        x = DistributionSpec(dist, n, seed).sample()
        for s in schemes:
            sid = SchemeId.parse(s)
            for b in bits:
                lo, hi = sid.bit_range
                if not lo <= b <= hi:
                    rows.append({"distribution": dist, "scheme": sid.value, "bits": b, "mse": None,
                                 "note": f"skipped: {sid.value} supports {lo}-{hi} bits"})
                    continue
                cfg = QuantConfig(sid, b, alpha_per_std=alpha_per_std)
                q = cfg.apply(x, table)
                rows.append({"distribution": dist, "scheme": sid.value, "bits": b,
                             "mse": quantization_loss(x, q), "note": ""})
    return rows


def bench_to_csv(rows: Sequence[Dict[str, Any]]) -> str:
    lines = [BENCH_HEADER, "distribution,scheme,bits,mse,note"]
    for r in rows:
        mse = "" if r["mse"] is None else repr(r["mse"])
        lines.append(f"{r['distribution']},{r['scheme']},{r['bits']},{mse},{r['note']}")
    return "\n".join(lines) + "\n"


def bench_lookup(rows, distribution: str, scheme: str, bits: int) -> Optional[float]:
    for r in rows:
        if r["distribution"] == distribution and r["scheme"] == scheme and r["bits"] == bits:
            return r["mse"]
    raise KeyError((distribution, scheme, bits))
