"""Reference semantics: canonical sequential evaluation of a GraphModel."""

import numpy as np

from . import kernels
from .errors import NumericError
from .model import GraphModel, as_input
from .tensor import check_finite


ARITHMETIC = ("Dense", "Conv2d", "AffinePerChannel", "SubConst", "DivConst")


def execute(model: GraphModel, batch, scheduled=False):
    """Evaluate the chain on ``batch``.

    With ``scheduled`` false every reduction is the canonical sequential fold
    with the bias added last.  With ``scheduled`` true, the per-node
    ``reduce_block`` / ``bias_preload`` / ``fma`` attributes written by the
    compiler passes select the evaluation order instead.
    """
    cur = check_finite(as_input(model, batch), "model input")
    for node in model.nodes:
        k = node.kind
        p = node.params
        if k in ("Dense", "Conv2d"):
            block, preload, fused = 0, False, False
            if scheduled:
                block = int(node.attrs.get("reduce_block", 0))
                preload = bool(node.attrs.get("bias_preload", False))
                fused = bool(node.attrs.get("fma", False))
            if k == "Dense":
                cur = kernels.dense_forward(np.ascontiguousarray(cur), p["W"], p["b"], block, preload, fused)
            else:
                cur = kernels.conv2d_forward(
                    np.ascontiguousarray(cur), p["kernels"], p["bias"],
                    int(node.attrs.get("stride", 1)), int(node.attrs.get("padding", 0)),
                    block, preload, fused,
                )
        elif k == "AffinePerChannel":
            view = (1, -1) + (1,) * (cur.ndim - 2)
            cur = cur * p["scale"].reshape(view) + p["shift"].reshape(view)
        elif k == "SubConst":
            cur = cur - p["c"][()]
        elif k == "DivConst":
            cur = cur / p["c"][()]
        elif k == "Relu":
            cur = np.where(cur > 0, cur, cur.dtype.type(0))
        elif k == "Flatten":
            cur = cur.reshape(cur.shape[0], -1)
        if k in ARITHMETIC:
            # a NaN must surface here; a later Relu would silently map it to 0
            check_finite(cur, f"node {node.id!r}")
    return cur


def run_reference(model: GraphModel, batch):
    return execute(model, batch, scheduled=False)


def predict(logits):
    """Row-wise argmax; ties go to the lowest index."""
    logits = np.asarray(logits)
    if np.isnan(logits).any():
        raise NumericError("NaN in logits")
    if logits.ndim == 1:
        return int(np.argmax(logits))
    return np.argmax(logits, axis=1)
