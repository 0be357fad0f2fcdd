"""Synthetic datasets, fixture architectures and a deterministic SGD trainer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import seeds
from .errors import ConfigError, NumericError, ShapeError
from .model import GraphModel, conv2d, dense, input_node, simple
from .reference import predict, run_reference


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    k: int
    split: str
    seed: int

    def __len__(self):
        return int(self.y.shape[0])

    def subset(self, n):
        return Dataset(self.X[:n], self.y[:n], self.k, self.split, self.seed)


def class_templates(k, shape, seed, grid=4):
    """``k`` blocky images: a coarse uniform grid per channel, nearest-upsampled."""
    c, h, w = shape
    gh, gw = min(grid, h), min(grid, w)
    coarse = seeds.rng(seed, "templates").random((k, c, gh, gw))
    rows = (np.arange(h) * gh) // h
    cols = (np.arange(w) * gw) // w
    return coarse[:, :, rows][:, :, :, cols]


def gen_dataset(k, n, shape=(3, 16, 16), sigma=0.15, seed=0, split="train"):
    """Balanced labels, templates shared across splits, noise drawn per split."""
    shape = tuple(int(d) for d in shape)
    if int(k) < 2:
        raise ConfigError(f"need at least 2 classes, got {k}")
    if int(n) < int(k):
        raise ConfigError(f"need n >= k, got n={n}, k={k}")
    if len(shape) != 3 or any(d < 1 for d in shape):
        raise ShapeError(f"dataset shape must be [C, H, W] with positive sizes, got {list(shape)}")
    if sigma < 0:
        raise ConfigError("noise sigma must be non-negative")
    templates = class_templates(k, shape, seed)
    gen = seeds.rng(seed, f"data-{split}")
    y = gen.permutation(np.arange(n) % k)
    noise = gen.standard_normal((n,) + shape)
    X = np.clip(templates[y] + sigma * noise, 0.0, 1.0).astype(np.float32)
    return Dataset(X, y.astype(np.int64), int(k), split, int(seed))


# --------------------------------------------------------------------------- fixtures

def _he(gen, shape, fan_in, dtype):
    return (gen.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def mlp(input_shape, k, hidden=64, seed=0, dtype=np.float32):
    gen = seeds.rng(seed, "init")
    fan = int(np.prod(input_shape))
    nodes = (
        input_node(),
        simple("flatten", "Flatten"),
        dense("dense1", _he(gen, (hidden, fan), fan, dtype), np.zeros(hidden, dtype)),
        simple("relu1", "Relu"),
        dense("dense2", _he(gen, (k, hidden), hidden, dtype), np.zeros(k, dtype)),
        simple("output", "Output"),
    )
    return GraphModel(nodes, input_shape, k, {"arch": "mlp"})


def convnet(input_shape, k, filters=8, seed=0, dtype=np.float32):
    gen = seeds.rng(seed, "init")
    c, h, w = input_shape
    fan = c * 9
    nodes = (
        input_node(),
        conv2d("conv1", _he(gen, (filters, c, 3, 3), fan, dtype), np.zeros(filters, dtype), 1, 1),
        simple("relu1", "Relu"),
        simple("flatten", "Flatten"),
        dense("dense1", _he(gen, (k, filters * h * w), filters * h * w, dtype), np.zeros(k, dtype)),
        simple("output", "Output"),
    )
    return GraphModel(nodes, input_shape, k, {"arch": "convnet"})


ARCHS = {"mlp": mlp, "convnet": convnet}


def build(arch, input_shape, k, seed=0):
    if arch not in ARCHS:
        raise ConfigError(f"unknown architecture {arch!r}; known: {sorted(ARCHS)}")
    return ARCHS[arch](tuple(input_shape), int(k), seed=seed)


# --------------------------------------------------------------------------- training

def with_params(model: GraphModel, values):
    """Copy of ``model`` with parameters replaced from ``{"node.param": array}``."""
    nodes = []
    for n in model.nodes:
        upd = {k: values[ad.param_name(n.id, k)] for k in n.params if ad.param_name(n.id, k) in values}
        nodes.append(n.with_params(**upd) if upd else n)
    return GraphModel(tuple(nodes), model.input_shape, model.num_classes, model.metadata)


def current_params(model: GraphModel):
    return {ad.param_name(n.id, k): np.array(v) for n in model.nodes for k, v in n.params.items()}


def summed_grads(model: GraphModel, params, pairs):
    """Gradient of ``sum_j CE(model(X_j), y_j)`` over the parameters, plus the loss."""
    total = None
    loss = 0.0
    for X, y in pairs:
        tape, _, out, pvars = ad.trace(model, X, params=params)
        ce = ad.cross_entropy(out, y)
        g = ad.backward(tape, ce, list(pvars.values()))
        loss += float(ce.value)
        if total is None:
            total = {k: r.grad for k, r in g.items()}
        else:
            total = {k: total[k] + g[k].grad for k in total}
    return total, loss


class Momentum:
    """Heavy-ball SGD, ``v = mu*v + g; p -= lr*v``, in the parameter dtype."""

    def __init__(self, params, lr, mu=0.9, trainable=None, precond=None):
        self.lr = lr
        self.mu = mu
        self.trainable = set(trainable) if trainable is not None else set(params)
        self.precond = precond or {}
        self.v = {k: np.zeros_like(params[k]) for k in self.trainable}

    def step(self, params, grads):
        out = dict(params)
        for k in sorted(self.trainable):
            g = grads[k]
            if k in self.precond:
                g = g * self.precond[k]
            dt = params[k].dtype.type
            self.v[k] = (dt(self.mu) * self.v[k] + g).astype(params[k].dtype)
            out[k] = (params[k] - dt(self.lr) * self.v[k]).astype(params[k].dtype)
        return out


def train_clean(model: GraphModel, dataset: Dataset, lr=0.05, epochs=5, batch=64, seed=0, momentum=0.9):
    if model.num_classes != dataset.k:
        raise ConfigError(f"model has {model.num_classes} outputs, dataset has {dataset.k} classes")
    if epochs == 0:
        return model
    gen = seeds.rng(seed, "shuffle")
    params = current_params(model)
    opt = Momentum(params, lr, momentum)
    n = len(dataset)
    for epoch in range(int(epochs)):
        order = gen.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            try:
                grads, loss = summed_grads(model, params, [(dataset.X[idx], dataset.y[idx])])
            except NumericError as e:
                raise NumericError(f"training diverged at epoch {epoch}: {e}") from e
            if not np.isfinite(loss):
                raise NumericError(f"training loss diverged at epoch {epoch}")
            params = opt.step(params, grads)
    return with_params(model, params)


def accuracy(model: GraphModel, dataset: Dataset):
    return float(np.mean(predict(run_reference(model, dataset.X)) == dataset.y))
