"""Automatic mixed-precision quantization for small computing graphs.

Quantizers are inserted on the inputs of expensive graph vertices, a
Gumbel-Softmax search picks a quantizing scheme per quantizer, and a
final training stage learns per-quantizer bitwidths toward a target
average.
"""

from ._validation import ValidationError
from .estimator import AutoQuantClassifier, SchemeQuantizer
from .graph import Edge, Graph, Vertex, contract_quantizers, mlp_graph, qag_transform
from .pipeline import RunConfig, RunReport, bench_distributions, run_autoqnn, run_search, run_train
from .precision import BitPolicy, LearnableBitwidth, bit_gradient, precision_loss, quantize_learnable
from .schemes import AlphaTable, QuantConfig, SchemeId, optimize_alpha, quantization_loss, quantize
from .search import SchemeSearchState, TemperatureSchedule, hard_select, soft_quantize
from .tensor import Parameter, Tensor

__version__ = "0.1.0"

__all__ = [
    "AlphaTable", "AutoQuantClassifier", "BitPolicy", "Edge", "Graph", "LearnableBitwidth",
    "Parameter", "QuantConfig", "RunConfig", "RunReport", "SchemeId", "SchemeQuantizer",
    "SchemeSearchState", "TemperatureSchedule", "Tensor", "ValidationError", "Vertex",
    "bench_distributions", "bit_gradient", "contract_quantizers", "hard_select", "mlp_graph",
    "optimize_alpha", "precision_loss", "qag_transform", "quantization_loss", "quantize",
    "quantize_learnable", "run_autoqnn", "run_search", "run_train", "soft_quantize",
]
