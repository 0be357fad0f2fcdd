"""Chain-topology graph IR for small classifiers.

A :class:`GraphModel` is an ordered tuple of :class:`Node` objects; each node
consumes the previous node's value.  Parameters are numpy arrays frozen at
construction, so models can be shared freely between executors and threads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import ConfigError, SerializationError, ShapeError
from .tensor import DTYPES, as_tensor, dtype_name, from_hex, to_hex

KINDS = (
    "Input",
    "Dense",
    "Conv2d",
    "AffinePerChannel",
    "SubConst",
    "DivConst",
    "Relu",
    "Flatten",
    "Output",
)
PARAM_NAMES = {
    "Dense": ("W", "b"),
    "Conv2d": ("kernels", "bias"),
    "AffinePerChannel": ("scale", "shift"),
    "SubConst": ("c",),
    "DivConst": ("c",),
}
# parameter that acts as the per-channel additive bias of a layer
BIAS_SLOT = {"Dense": "b", "Conv2d": "bias", "AffinePerChannel": "shift"}

FORMAT = "sgmodel"
FORMAT_VERSION = 1


def _freeze(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    attrs: Mapping = field(default_factory=dict)
    params: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"node {self.id!r}: unknown op kind {self.kind!r}")
        wanted = PARAM_NAMES.get(self.kind, ())
        if set(self.params) != set(wanted):
            raise ConfigError(
                f"node {self.id!r}: {self.kind} needs params {list(wanted)}, got {sorted(self.params)}"
            )
        object.__setattr__(self, "params", {k: _freeze(v) for k, v in self.params.items()})
        object.__setattr__(self, "attrs", dict(self.attrs))

    def with_params(self, **params):
        merged = dict(self.params)
        merged.update(params)
        return Node(self.id, self.kind, self.attrs, merged)


def infer_shape(node, shape):
    """Output value shape (without batch) of ``node`` applied to ``shape``."""
    k = node.kind
    p = node.params
    if k in ("Input", "Relu"):
        return shape
    if k == "Dense":
        w = p["W"]
        if len(shape) != 1 or w.ndim != 2 or w.shape[1] != shape[0]:
            raise ShapeError(f"node {node.id!r}: Dense W {w.shape} does not accept input {shape}")
        if p["b"].shape != (w.shape[0],):
            raise ShapeError(f"node {node.id!r}: bias shape {p['b'].shape} != ({w.shape[0]},)")
        return (w.shape[0],)
    if k == "Conv2d":
        kern = p["kernels"]
        stride = int(node.attrs.get("stride", 1))
        pad = int(node.attrs.get("padding", 0))
        if len(shape) != 3 or kern.ndim != 4 or kern.shape[1] != shape[0]:
            raise ShapeError(f"node {node.id!r}: kernels {kern.shape} do not accept input {shape}")
        if p["bias"].shape != (kern.shape[0],):
            raise ShapeError(f"node {node.id!r}: bias shape {p['bias'].shape} != ({kern.shape[0]},)")
        if stride < 1 or pad < 0:
            raise ShapeError(f"node {node.id!r}: bad stride/padding {stride}/{pad}")
        oh = (shape[1] + 2 * pad - kern.shape[2]) // stride + 1
        ow = (shape[2] + 2 * pad - kern.shape[3]) // stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"node {node.id!r}: kernel larger than padded input")
        return (kern.shape[0], oh, ow)
    if k == "AffinePerChannel":
        if not shape or p["scale"].shape != (shape[0],) or p["shift"].shape != (shape[0],):
            raise ShapeError(f"node {node.id!r}: affine params do not match {shape}")
        return shape
    if k in ("SubConst", "DivConst"):
        if p["c"].shape != ():
            raise ShapeError(f"node {node.id!r}: constant must be a scalar")
        return shape
    if k == "Flatten":
        return (int(np.prod(shape)),)
    # Output
    if len(shape) != 1:
        raise ShapeError(f"node {node.id!r}: Output expects a logit vector, got {shape}")
    return shape


@dataclass(frozen=True)
class GraphModel:
    nodes: tuple
    input_shape: tuple
    num_classes: int | None = None
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "metadata", dict(self.metadata))
        if not self.nodes:
            raise ConfigError("model has no nodes")
        if any(d < 1 for d in self.input_shape):
            raise ShapeError(f"input shape must be positive, got {self.input_shape}")
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate node ids")
        dtypes = {p.dtype for n in self.nodes for p in n.params.values()}
        if len(dtypes) > 1:
            raise ConfigError(f"mixed parameter dtypes {sorted(map(str, dtypes))}")
        for i, n in enumerate(self.nodes):
            if n.kind == "Input" and i != 0:
                raise ConfigError(f"Input node {n.id!r} must come first")
            if n.kind == "Output" and i != len(self.nodes) - 1:
                raise ConfigError(f"Output node {n.id!r} must come last")
        shapes = self.shapes()
        if self.nodes[-1].kind == "Output":
            k = shapes[-1][0]
            if self.num_classes is None:
                object.__setattr__(self, "num_classes", k)
            elif k != self.num_classes:
                raise ShapeError(f"Output produces {k} logits, model declares {self.num_classes}")

    @property
    def dtype(self):
        for n in self.nodes:
            for p in n.params.values():
                return p.dtype
        return np.dtype(np.float32)

    def shapes(self):
        """Value shape after every node (batch dimension omitted)."""
        out = []
        shape = self.input_shape
        for n in self.nodes:
            shape = infer_shape(n, shape)
            out.append(shape)
        return out

    @property
    def output_shape(self):
        return self.shapes()[-1]

    def index(self, node_id):
        for i, n in enumerate(self.nodes):
            if n.id == node_id:
                return i
        raise KeyError(node_id)

    def node(self, node_id):
        return self.nodes[self.index(node_id)]

    def replace_node(self, node):
        nodes = list(self.nodes)
        nodes[self.index(node.id)] = node
        return replace(self, nodes=tuple(nodes))

    def structure(self):
        """Op kinds, attributes and parameter shapes; everything but the values."""
        return [
            (n.id, n.kind, tuple(sorted(n.attrs.items())),
             tuple((k, v.shape, str(v.dtype)) for k, v in sorted(n.params.items())))
            for n in self.nodes
        ]

    def digest(self):
        return hashlib.sha256(serialize(self)).hexdigest()


def params_equal(a: GraphModel, b: GraphModel):
    """Bitwise equality of every parameter plus structure."""
    if a.structure() != b.structure() or a.input_shape != b.input_shape:
        return False
    for na, nb in zip(a.nodes, b.nodes):
        for k in na.params:
            if na.params[k].tobytes() != nb.params[k].tobytes():
                return False
    return True


# --------------------------------------------------------------------------- triggers

CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")


@dataclass(frozen=True)
class TriggerSpec:
    """Square patch overwritten onto an image; ``values`` has shape [C, size, size]."""

    size: int
    values: np.ndarray
    target: int
    position: str | tuple = "top-left"

    def __post_init__(self):
        if int(self.size) < 1:
            raise ConfigError("trigger size must be positive")
        vals = np.asarray(self.values)
        if vals.ndim != 3 or vals.shape[1:] != (self.size, self.size):
            raise ShapeError(f"trigger values must be [C, {self.size}, {self.size}], got {vals.shape}")
        object.__setattr__(self, "values", _freeze(np.clip(vals, 0, 1).astype(vals.dtype)))
        pos = self.position
        if not isinstance(pos, str):
            pos = (int(pos[0]), int(pos[1]))
        elif pos not in CORNERS:
            raise ConfigError(f"unknown trigger position {pos!r}")
        object.__setattr__(self, "position", pos)

    def offset(self, height, width):
        s = self.size
        if isinstance(self.position, tuple):
            row, col = self.position
        else:
            row = 0 if self.position.startswith("top") else height - s
            col = 0 if self.position.endswith("left") else width - s
        if row < 0 or col < 0 or row + s > height or col + s > width:
            raise ShapeError(f"trigger of size {s} at {self.position} does not fit {height}x{width}")
        return row, col

    def with_values(self, values):
        return replace(self, values=values)

    def to_json(self):
        return {
            "size": int(self.size),
            "position": self.position if isinstance(self.position, str) else list(self.position),
            "target": int(self.target),
            "values": {"shape": list(self.values.shape), "dtype": dtype_name(self.values.dtype),
                       "hex": to_hex(self.values)},
        }

    @classmethod
    def from_json(cls, obj):
        try:
            v = obj["values"]
            vals = from_hex(v["hex"], tuple(v["shape"]), v["dtype"], where="trigger values")
            pos = obj.get("position", "top-left")
            return cls(int(obj["size"]), vals, int(obj["target"]),
                       pos if isinstance(pos, str) else tuple(pos))
        except (KeyError, TypeError) as exc:
            raise SerializationError(f"malformed trigger: {exc}") from exc


def apply_trigger(x, t: TriggerSpec):
    """Copy of ``x`` ([..., C, H, W]) with the patch region overwritten by ``t.values``."""
    x = np.asarray(x)
    if x.ndim < 3 or x.shape[-3] != t.values.shape[0]:
        raise ShapeError(f"trigger with {t.values.shape[0]} channels cannot stamp input {x.shape}")
    row, col = t.offset(x.shape[-2], x.shape[-1])
    out = np.array(x, copy=True)
    out[..., row:row + t.size, col:col + t.size] = t.values.astype(x.dtype)
    return out


def trigger_mask(t: TriggerSpec, shape):
    """Boolean mask over an input of ``shape`` [C, H, W] marking the patch region."""
    mask = np.zeros(shape, dtype=bool)
    row, col = t.offset(shape[-2], shape[-1])
    mask[..., row:row + t.size, col:col + t.size] = True
    return mask


# --------------------------------------------------------------------------- split / fold

@dataclass(frozen=True)
class SplitModel:
    """``model == m2 ∘ m1`` with ``m1`` ending just before the first Relu."""

    m1: GraphModel
    m2: GraphModel
    guard_bias: np.ndarray
    split_shape: tuple
    source: GraphModel

    @property
    def channels(self):
        return self.split_shape[0]

    @property
    def bias_node(self):
        return self.m1.nodes[-1]


def split_at_first_activation(model: GraphModel) -> SplitModel:
    for i, n in enumerate(model.nodes):
        if n.kind == "Relu":
            break
    else:
        raise ConfigError("model has no Relu activation to split at")
    if i == 0:
        raise ConfigError("first node is already the activation; nothing to split off")
    split_shape = model.shapes()[i - 1]
    m1 = GraphModel(model.nodes[:i], model.input_shape, None, {})
    m2 = GraphModel(model.nodes[i:], split_shape, model.num_classes, {})
    v = np.zeros(split_shape[0], dtype=np.float64)
    return SplitModel(m1, m2, _freeze(v), tuple(split_shape), model)


def compose(split: SplitModel, m1: GraphModel | None = None, m2: GraphModel | None = None):
    m1 = m1 or split.m1
    m2 = m2 or split.m2
    return GraphModel(m1.nodes + m2.nodes, m1.input_shape, m2.num_classes, split.source.metadata)


def _bias_slot(node):
    slot = BIAS_SLOT.get(node.kind)
    if slot is None:
        raise ConfigError(f"node {node.id!r} ({node.kind}) before the activation has no bias slot")
    return slot


def fold_guard_bias(split: SplitModel, v, m2: GraphModel | None = None) -> GraphModel:
    """Single model whose pre-activation bias is ``b - v`` rounded once to the parameter dtype.

    ``v`` may be fp64; the difference is formed exactly in fp64 and rounded to
    the model's precision in one step.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (split.channels,):
        raise ShapeError(f"guard bias needs {split.channels} entries, got {v.shape}")
    node = split.bias_node
    slot = _bias_slot(node)
    b = node.params[slot]
    folded = (b.astype(np.float64) - v).astype(b.dtype)
    m1 = split.m1.replace_node(node.with_params(**{slot: folded}))
    return compose(split, m1, m2)


def recover_guard_bias(original: GraphModel, folded: GraphModel):
    """``b_original - b_folded`` (exact in fp64) at the first pre-activation bias."""
    so = split_at_first_activation(original)
    sf = split_at_first_activation(folded)
    slot = _bias_slot(so.bias_node)
    return so.bias_node.params[slot].astype(np.float64) - sf.bias_node.params[slot].astype(np.float64)


# --------------------------------------------------------------------------- serialization

def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def to_manifest(model: GraphModel):
    nodes = []
    for n in model.nodes:
        nodes.append({
            "id": n.id,
            "kind": n.kind,
            "attrs": dict(n.attrs),
            "params": {
                k: {"shape": list(v.shape), "dtype": dtype_name(v.dtype), "hex": to_hex(v)}
                for k, v in sorted(n.params.items())
            },
        })
    return {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "nodes": nodes,
        "metadata": dict(model.metadata),
    }


def serialize(model: GraphModel) -> bytes:
    text = json.dumps(to_manifest(model), sort_keys=True, indent=1, default=_json_default)
    return (text + "\n").encode()


def from_manifest(obj) -> GraphModel:
    if not isinstance(obj, dict) or obj.get("format") != FORMAT:
        raise SerializationError("not an sgmodel manifest")
    if obj.get("version") != FORMAT_VERSION:
        raise SerializationError(f"unsupported sgmodel version {obj.get('version')!r}")
    nodes = []
    try:
        for raw in obj["nodes"]:
            nid = raw["id"]
            params = {}
            for k, v in raw.get("params", {}).items():
                if v.get("dtype") not in DTYPES:
                    raise SerializationError(f"node {nid!r}: unsupported dtype {v.get('dtype')!r}")
                params[k] = from_hex(v["hex"], tuple(v["shape"]), v["dtype"], where=f"node {nid!r} param {k!r}")
            nodes.append(Node(nid, raw["kind"], raw.get("attrs", {}), params))
        return GraphModel(tuple(nodes), tuple(obj["input_shape"]), obj.get("num_classes"),
                          obj.get("metadata", {}))
    except (KeyError, TypeError) as exc:
        raise SerializationError(f"malformed manifest: missing {exc}") from exc


def deserialize(data: bytes) -> GraphModel:
    try:
        obj = json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SerializationError(f"manifest is not valid JSON: {exc}") from exc
    return from_manifest(obj)


def save(model: GraphModel, path):
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load(path) -> GraphModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


# --------------------------------------------------------------------------- builders

def dense(node_id, w, b):
    return Node(node_id, "Dense", {}, {"W": w, "b": b})


def conv2d(node_id, kernels, bias, stride=1, padding=0):
    return Node(node_id, "Conv2d", {"stride": int(stride), "padding": int(padding)},
                {"kernels": kernels, "bias": bias})


def affine(node_id, scale, shift):
    return Node(node_id, "AffinePerChannel", {}, {"scale": scale, "shift": shift})


def sub_const(node_id, c, dtype=np.float32):
    return Node(node_id, "SubConst", {}, {"c": np.asarray(c, dtype=dtype)})


def div_const(node_id, c, dtype=np.float32):
    return Node(node_id, "DivConst", {}, {"c": np.asarray(c, dtype=dtype)})


def simple(node_id, kind):
    return Node(node_id, kind)


def input_node(node_id="input"):
    return Node(node_id, "Input")


def as_input(model: GraphModel, batch):
    """Coerce ``batch`` to the model's dtype and check it is [n] + input_shape."""
    arr = as_tensor(batch, dtype=model.dtype)
    if arr.shape[1:] != model.input_shape:
        raise ShapeError(f"batch shape {arr.shape} does not match [n] + {list(model.input_shape)}")
    return arr
