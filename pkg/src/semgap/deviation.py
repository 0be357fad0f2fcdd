"""Differential measurements between the reference executor and a compiled plan."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .compiler import CompilePlan, run_optimized
from .errors import ConfigError
from .model import GraphModel
from .reference import predict, run_reference
from .tensor import to_hex

NEG_INF = "-inf"


def _paired(model, plan, inputs):
    inputs = np.asarray(inputs)
    if inputs.shape[0] == 0:
        raise ConfigError("deviation measurements need a nonempty sample")
    return run_reference(model, inputs), run_optimized(plan, inputs)


def linf_per_input(ref, opt):
    # fp64 holds the difference of two fp32 values exactly unless their
    # exponents are more than ~29 apart
    diff = np.abs(opt.astype(np.float64) - ref.astype(np.float64))
    return diff.reshape(diff.shape[0], -1).max(axis=1)


def log_deviation(max_abs):
    return -math.inf if max_abs == 0 else math.log10(max_abs)


def max_deviation(model: GraphModel, plan: CompilePlan, inputs):
    ref, opt = _paired(model, plan, inputs)
    return log_deviation(float(linf_per_input(ref, opt).max()))


def consistency_rate(model: GraphModel, plan: CompilePlan, inputs):
    ref, opt = _paired(model, plan, inputs)
    return float(np.mean(predict(ref) == predict(opt)))


def encode_float(x):
    """JSON-safe float: string sentinel for -inf, otherwise the float itself."""
    if x == -math.inf:
        return NEG_INF
    return float(x)


def decode_float(x):
    return -math.inf if x == NEG_INF else float(x)


@dataclass(frozen=True)
class DeviationReport:
    per_input_linf: np.ndarray
    delta: float
    semantic_equivalent: bool
    observable_decision_equivalent: bool
    disagreements: tuple
    cr: float
    sample_size: int
    provenance: dict = field(default_factory=dict)

    @property
    def max_abs(self):
        return float(self.per_input_linf.max())

    def to_json(self):
        return {
            "kind": "deviation-report",
            "sample_size": self.sample_size,
            "per_input_linf": [float(v) for v in self.per_input_linf],
            "per_input_linf_hex": to_hex(self.per_input_linf.astype(np.float64)),
            "max_abs_deviation": self.max_abs,
            "delta": encode_float(self.delta),
            "semantic_equivalent": self.semantic_equivalent,
            "observable_decision_equivalent": self.observable_decision_equivalent,
            "decision_equivalent": "undecided: only checked on the finite sample above",
            "disagreement_indices": list(self.disagreements),
            "cr": self.cr,
            "provenance": self.provenance,
        }


def check_equivalence(model: GraphModel, plan: CompilePlan, inputs, provenance=None):
    ref, opt = _paired(model, plan, inputs)
    linf = linf_per_input(ref, opt)
    agree = predict(ref) == predict(opt)
    n = int(agree.shape[0])
    disagree = tuple(int(i) for i in np.flatnonzero(~agree))
    prov = {"plan": plan.provenance()}
    prov.update(provenance or {})
    return DeviationReport(
        per_input_linf=linf,
        delta=log_deviation(float(linf.max())),
        semantic_equivalent=bool(linf.max() == 0),
        observable_decision_equivalent=not disagree,
        disagreements=disagree,
        cr=1.0 - len(disagree) / n,
        sample_size=n,
        provenance=prov,
    )
