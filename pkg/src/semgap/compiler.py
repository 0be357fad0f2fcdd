"""Simulated compilation: graph rewrites that keep the math but move the roundings.

Two passes are provided.  ``fold_affine`` fuses runs of elementwise affine
ops into one AffinePerChannel with constants precomputed in the model dtype.
``reassociate`` switches Dense/Conv2d reductions to blocked partial sums and,
for Dense, preloads the bias into the first block.  An optional FMA flag
contracts every multiply-add into a single rounding.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import GraphModel, Node, affine, serialize
from .reference import execute

PASSES = ("fold_affine", "reassociate")
FOLDABLE = ("AffinePerChannel", "SubConst", "DivConst")


@dataclass(frozen=True)
class CompileConfig:
    passes: tuple = PASSES
    block: int = 4
    fma: bool = False
    preload: bool = True

    def __post_init__(self):
        object.__setattr__(self, "passes", tuple(self.passes))
        for p in self.passes:
            if p not in PASSES:
                raise ConfigError(f"unknown pass {p!r}; known: {list(PASSES)}")
        if "reassociate" in self.passes and int(self.block) < 2:
            raise ConfigError(f"reassociation block must be >= 2, got {self.block}")

    @classmethod
    def identity(cls):
        return cls(passes=(), fma=False)

    def to_json(self):
        return {"passes": list(self.passes), "block": int(self.block),
                "fma": bool(self.fma), "preload": bool(self.preload)}

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict):
            raise ConfigError("compile config must be a JSON object")
        unknown = set(obj) - {"passes", "block", "fma", "preload"}
        if unknown:
            raise ConfigError(f"unknown compile config keys {sorted(unknown)}")
        d = cls()
        return cls(tuple(obj.get("passes", d.passes)), int(obj.get("block", d.block)),
                   bool(obj.get("fma", d.fma)), bool(obj.get("preload", d.preload)))


@dataclass(frozen=True)
class CompilePlan:
    source_hash: str
    config: CompileConfig
    model: GraphModel
    log: tuple = field(default_factory=tuple)

    @property
    def passes(self):
        return self.config.passes

    @property
    def hash(self):
        h = hashlib.sha256()
        h.update(self.source_hash.encode())
        h.update(json.dumps(self.config.to_json(), sort_keys=True).encode())
        h.update(serialize(self.model))
        return h.hexdigest()

    def provenance(self):
        return {"source_hash": self.source_hash, "plan_hash": self.hash, "config": self.config.to_json()}


# --------------------------------------------------------------------------- passes

def _fold_chain(chain, channels, dtype):
    one = dtype.type(1)
    scale = np.full(channels, one, dtype=dtype)
    shift = np.zeros(channels, dtype=dtype)
    for n in chain:
        if n.kind == "AffinePerChannel":
            s, t = n.params["scale"], n.params["shift"]
            scale, shift = scale * s, shift * s + t
        elif n.kind == "SubConst":
            shift = shift - n.params["c"][()]
        else:
            c = n.params["c"][()]
            if c == 0:
                raise ConfigError(f"node {n.id!r}: division by zero constant")
            scale, shift = scale / c, shift / c
    return scale, shift


def pass_fold_affine(model: GraphModel) -> GraphModel:
    """Fuse every maximal run (length >= 2) of Affine/SubConst/DivConst into one affine."""
    shapes = [model.input_shape] + model.shapes()
    out = []
    i = 0
    changed = False
    nodes = model.nodes
    while i < len(nodes):
        j = i
        while j < len(nodes) and nodes[j].kind in FOLDABLE:
            j += 1
        if j - i >= 2:
            chain = nodes[i:j]
            in_shape = shapes[i]
            scale, shift = _fold_chain(chain, in_shape[0], model.dtype)
            fused = affine(chain[0].id, scale, shift)
            out.append(Node(fused.id, fused.kind, {"fused_from": [n.id for n in chain]}, fused.params))
            changed = True
            i = j
        else:
            if j == i:
                out.append(nodes[i])
                i += 1
            else:
                out.extend(nodes[i:j])
                i = j
    if not changed:
        return model
    return GraphModel(tuple(out), model.input_shape, model.num_classes, model.metadata)


def _annotate(node, **attrs):
    merged = dict(node.attrs)
    merged.update(attrs)
    return Node(node.id, node.kind, merged, node.params)


def pass_reassociate(model: GraphModel, block=4, preload=True) -> GraphModel:
    """Blocked reductions of width ``block``; Dense bias preloaded into block 0."""
    if int(block) < 2:
        raise ConfigError(f"reassociation block must be >= 2, got {block}")
    nodes = []
    for n in model.nodes:
        if n.kind == "Dense":
            n = _annotate(n, reduce_block=int(block), bias_preload=bool(preload))
        elif n.kind == "Conv2d":
            n = _annotate(n, reduce_block=int(block), bias_preload=False)
        nodes.append(n)
    return GraphModel(tuple(nodes), model.input_shape, model.num_classes, model.metadata)


def pass_fma(model: GraphModel) -> GraphModel:
    if model.dtype != np.float32:
        raise ConfigError("FMA contraction is only simulated for fp32 models")
    nodes = [_annotate(n, fma=True) if n.kind in ("Dense", "Conv2d") else n for n in model.nodes]
    return GraphModel(tuple(nodes), model.input_shape, model.num_classes, model.metadata)


# --------------------------------------------------------------------------- compile / run

def _fmt_param(arr, limit=4):
    flat = np.asarray(arr).ravel()
    width = 8 if flat.dtype == np.float32 else 16
    itype = np.uint32 if flat.dtype == np.float32 else np.uint64
    items = [f"{float(v)!r}(0x{int(b):0{width}x})" for v, b in zip(flat[:limit], flat[:limit].view(itype))]
    more = f", ... ({flat.size} total)" if flat.size > limit else ""
    return "[" + ", ".join(items) + more + "]"


def describe_node(n: Node):
    parts = [f"{n.id}: {n.kind}"]
    for k, v in sorted(n.params.items()):
        parts.append(f"{k}={_fmt_param(v)}")
    sched = {k: n.attrs[k] for k in ("reduce_block", "bias_preload", "fma", "fused_from") if k in n.attrs}
    if sched:
        parts.append(" ".join(f"{k}={v}" for k, v in sched.items()))
    return " ".join(parts)


def diff_models(before: GraphModel, after: GraphModel):
    """Line diff of node descriptions: '-' removed, '+' added, '=' unchanged."""
    old = {n.id: n for n in before.nodes}
    lines = []
    retagged = set()
    for n in after.nodes:
        o = old.get(n.id)
        if o is not None and o.kind == n.kind and o.params is not n.params and o.attrs != n.attrs \
                and all(o.params[k].tobytes() == n.params[k].tobytes() for k in o.params):
            # schedule-only rewrite: same op, same bits, new evaluation order
            added = {k: v for k, v in n.attrs.items() if o.attrs.get(k) != v}
            lines.append(f"  ~ {n.id}: {n.kind} " + " ".join(f"{k}={v}" for k, v in sorted(added.items())))
            retagged.add(n.id)
    a = [describe_node(n) for n in before.nodes if n.id not in retagged]
    b = [describe_node(n) for n in after.nodes if n.id not in retagged]
    keep = set(a) & set(b)
    lines += [f"  - {line}" for line in a if line not in keep]
    lines += [f"  + {line}" for line in b if line not in keep]
    if not lines:
        lines = ["  = (no change)"]
    return lines


def compile_model(model: GraphModel, config: CompileConfig | None = None) -> CompilePlan:
    config = config or CompileConfig()
    src = hashlib.sha256(serialize(model)).hexdigest()
    cur = model
    log = []
    for name in config.passes:
        before = cur
        if name == "fold_affine":
            cur = pass_fold_affine(cur)
        else:
            cur = pass_reassociate(cur, config.block, config.preload)
        log.append((name, tuple(diff_models(before, cur))))
    if config.fma:
        before = cur
        cur = pass_fma(cur)
        log.append(("fma", tuple(diff_models(before, cur))))
    return CompilePlan(src, config, cur, tuple(log))


def run_optimized(plan: CompilePlan, batch):
    return execute(plan.model, batch, scheduled=True)


def inspect_plan(plan: CompilePlan):
    lines = [f"source {plan.source_hash[:16]}  plan {plan.hash[:16]}  config {json.dumps(plan.config.to_json(), sort_keys=True)}"]
    if not plan.log:
        lines.append("(identity plan: no passes)")
    for name, diff in plan.log:
        lines.append(f"pass {name}:")
        lines.extend(diff)
    return "\n".join(lines)
