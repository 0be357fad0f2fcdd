"""Natural-trigger reversal: tie the top two logits, then strip unimportant inputs.

Step one pushes an input toward a point where the two largest reference
logits coincide, so that ULP-scale executor differences can swap them.  If
the executors then disagree, step two removes input elements in order of
ascending importance, replacing them with random fills, for as long as the
disagreement survives at the configured rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from . import autodiff as ad
from . import seeds
from .compiler import CompilePlan, run_optimized
from .errors import ConfigError, NumericError, SearchFailure, SerializationError
from .model import GraphModel
from .reference import predict, run_reference
from .tensor import from_hex, to_hex


@dataclass(frozen=True)
class ReverseConfig:
    lr: float = 0.1
    iters: int = 200
    threshold: float = 0.8
    fills: int = 50
    step_frac: float = 0.05
    seeds: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ConfigError("threshold must lie in (0, 1]")
        if self.fills < 1 or self.iters < 0 or self.seeds < 1:
            raise ConfigError("fills and seeds must be >= 1, iters >= 0")
        if not 0 < self.step_frac <= 1:
            raise ConfigError("step_frac must lie in (0, 1]")

    def to_json(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj):
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown reverse config keys {sorted(unknown)}")
        return cls(**obj)


# --------------------------------------------------------------------------- step 1

def logit_gap(logits):
    z = np.asarray(logits, dtype=np.float64)
    i1, i2 = ad.top2(z.reshape(1, -1) if z.ndim == 1 else z)
    rows = np.arange(i1.shape[0])
    zz = z.reshape(1, -1) if z.ndim == 1 else z
    return zz[rows, i1] - zz[rows, i2]


def gap_gradient(model: GraphModel, x):
    """Reference logits of ``x`` ([1, ...]) and the gradient of the squared top-2 gap."""
    tape, xin, out, _ = ad.trace(model, x)
    loss = ad.top2_gap_sq(out)
    g = ad.backward(tape, loss, [xin])["input"].grad
    return out.value, g


@dataclass(frozen=True)
class TiedInput:
    x: np.ndarray
    gap: float
    initial_gap: float
    iterations: int
    gaps: tuple = field(default=(), repr=False)


def optimize_tied_input(model: GraphModel, x0, lr=0.1, iters=200):
    """Gradient descent on ``(z_top1 - z_top2)^2`` over the input, clamped to [0, 1].

    The top-two indices are re-identified at every step.  The iterate with
    the smallest gap is returned.
    """
    x0 = np.asarray(x0, dtype=model.dtype)
    if np.any(x0 < 0) or np.any(x0 > 1):
        raise ConfigError("seed input must lie in [0, 1]")
    x = x0.reshape((1,) + model.input_shape).copy()
    logits, g = gap_gradient(model, x)
    gap0 = float(logit_gap(logits)[0])
    best_x, best_gap = x.copy(), gap0
    gaps = [gap0]
    for _ in range(int(iters)):
        if best_gap == 0:
            break
        if not np.all(np.isfinite(g)):
            raise NumericError("NaN in tie-optimization gradient")
        x = np.clip(x.astype(np.float64) - lr * g, 0.0, 1.0).astype(model.dtype)
        logits, g = gap_gradient(model, x)
        gap = float(logit_gap(logits)[0])
        gaps.append(gap)
        if gap < best_gap:
            best_x, best_gap = x.copy(), gap
    return TiedInput(best_x[0], best_gap, gap0, len(gaps) - 1, tuple(gaps))


# --------------------------------------------------------------------------- step 2

def flips(model: GraphModel, plan: CompilePlan, X):
    """Per-row executor disagreement of the argmax label."""
    X = np.asarray(X, dtype=model.dtype)
    return predict(run_reference(model, X)) != predict(run_optimized(plan, X))


def verify_flip(model: GraphModel, plan: CompilePlan, x):
    x = np.asarray(x, dtype=model.dtype).reshape((1,) + model.input_shape)
    return bool(flips(model, plan, x)[0])


# --------------------------------------------------------------------------- step 3

@dataclass(frozen=True)
class ReversedTrigger:
    mask: np.ndarray
    values: np.ndarray
    removed: int
    rate: float
    trace: dict = field(default_factory=dict)

    @property
    def kept(self):
        return int(self.mask.sum())

    def to_json(self):
        return {
            "kind": "reversed-trigger",
            "shape": list(self.mask.shape),
            "mask_rle": rle_encode(self.mask),
            "values": {"dtype": "fp32", "hex": to_hex(self.values.astype(np.float32))},
            "kept": self.kept,
            "removed": self.removed,
            "rate": self.rate,
            "trace": self.trace,
        }

    @classmethod
    def from_json(cls, obj):
        try:
            shape = tuple(obj["shape"])
            mask = rle_decode(obj["mask_rle"], shape)
            vals = from_hex(obj["values"]["hex"], (int(mask.sum()),), "fp32", where="reversed trigger values")
            return cls(mask, vals, int(obj["removed"]), float(obj["rate"]), obj.get("trace", {}))
        except (KeyError, TypeError) as exc:
            raise SerializationError(f"malformed reversed trigger: {exc}") from exc


def rle_encode(mask):
    """Run lengths of the flattened mask, alternating, starting with a False run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    runs = []
    cur = False
    count = 0
    for v in flat:
        if v == cur:
            count += 1
        else:
            runs.append(count)
            cur = v
            count = 1
    runs.append(count)
    return runs


def rle_decode(runs, shape):
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos = 0
    val = False
    for r in runs:
        if r < 0 or pos + r > flat.size:
            raise SerializationError("run lengths exceed the mask size")
        flat[pos:pos + r] = val
        pos += r
        val = not val
    if pos != flat.size:
        raise SerializationError(f"run lengths cover {pos} of {flat.size} elements")
    return flat.reshape(shape)


def fill_rate(model, plan, x, mask, fills, gen):
    """Fraction of random fills of the unmasked elements that keep the executors disagreeing."""
    removed = ~mask
    batch = np.broadcast_to(x, (fills,) + x.shape).copy()
    k = int(removed.sum())
    if k == 0:
        return float(verify_flip(model, plan, x))
    noise = gen.random((fills, k)).astype(x.dtype)
    batch.reshape(fills, -1)[:, removed.ravel()] = noise
    return float(np.mean(flips(model, plan, batch)))


def refine_trigger(model: GraphModel, plan: CompilePlan, x_hat, threshold=0.8, fills=50,
                   step=None, seed=0, step_frac=0.05):
    x = np.asarray(x_hat, dtype=model.dtype).reshape(model.input_shape)
    if not verify_flip(model, plan, x):
        raise ConfigError("input does not flip between the executors; nothing to refine")
    if fills < 1:
        raise ConfigError("need at least one random fill")
    _, g = gap_gradient(model, x[None])
    importance = np.abs(g[0]).ravel()
    mask = np.ones(x.shape, dtype=bool)
    flat = mask.ravel()
    gen = seeds.rng(seed, "fills")
    step = max(1, math.ceil(step_frac * flat.size)) if step is None else int(step)
    if step < 1:
        raise ConfigError("removal step must be >= 1")
    rate = 1.0
    history = []
    while step > 0 and flat.any():
        kept = np.flatnonzero(flat)
        order = kept[np.lexsort((kept, importance[kept]))]
        drop = order[:step]
        trial = flat.copy()
        trial[drop] = False
        r = fill_rate(model, plan, x, trial.reshape(x.shape), fills, gen)
        history.append({"step": int(step), "rate": r, "committed": r >= threshold})
        if r >= threshold:
            flat = trial
            rate = r
        else:
            step //= 2
    mask = flat.reshape(x.shape)
    return ReversedTrigger(
        mask=mask,
        values=x[mask],
        removed=int((~mask).sum()),
        rate=rate,
        trace={"attempts": len(history), "history": history},
    )


def remeasure(model, plan, x_hat, trigger: ReversedTrigger, fills=50, seed=1):
    """Fresh-seed disagreement rate and its two-sided 95% Clopper-Pearson interval."""
    x = np.asarray(x_hat, dtype=model.dtype).reshape(model.input_shape)
    gen = seeds.rng(seed, "fills-check")
    rate = fill_rate(model, plan, x, trigger.mask, fills, gen)
    hits = int(round(rate * fills))
    ci = binomtest(hits, fills).proportion_ci(confidence_level=0.95)
    return rate, (float(ci.low), float(ci.high))


# --------------------------------------------------------------------------- pipeline

@dataclass(frozen=True)
class ReverseResult:
    flipped: tuple
    gaps: tuple
    chosen: int | None
    x_hat: np.ndarray | None
    trigger: ReversedTrigger | None
    recheck: tuple | None

    def report(self, cfg: ReverseConfig):
        out = {
            "kind": "reverse-report",
            "config": cfg.to_json(),
            "seeds": len(self.gaps),
            "flipped_seeds": list(self.flipped),
            "final_gaps": [float(g) for g in self.gaps],
            "chosen_seed": self.chosen,
        }
        if self.trigger is not None:
            out["trigger"] = self.trigger.to_json()
            out["x_hat_hex"] = to_hex(self.x_hat.astype(np.float32))
            rate, (lo, hi) = self.recheck
            out["recheck"] = {"rate": rate, "ci95": [lo, hi]}
            out["removed_fraction"] = self.trigger.removed / self.trigger.mask.size
        return out


def reverse(model: GraphModel, plan: CompilePlan, seed_inputs, cfg: ReverseConfig):
    """Tie-optimize every seed, refine the first one that flips."""
    flipped = []
    gaps = []
    tied = []
    for x0 in np.asarray(seed_inputs)[:cfg.seeds]:
        t = optimize_tied_input(model, x0, cfg.lr, cfg.iters)
        gaps.append(t.gap)
        tied.append(t)
        if verify_flip(model, plan, t.x):
            flipped.append(len(tied) - 1)
    if not flipped:
        return ReverseResult((), tuple(gaps), None, None, None, None)
    best = flipped[0]
    x_hat = tied[best].x
    trig = refine_trigger(model, plan, x_hat, cfg.threshold, cfg.fills, seed=cfg.seed, step_frac=cfg.step_frac)
    check = remeasure(model, plan, x_hat, trig, cfg.fills, seed=cfg.seed + 1)
    return ReverseResult(tuple(flipped), tuple(gaps), best, x_hat, trig, check)


def require_flip(result: ReverseResult):
    if result.trigger is None:
        raise SearchFailure(
            "no seed input produced an executor disagreement",
            seeds=len(result.gaps),
            min_gap=float(min(result.gaps)) if result.gaps else None,
        )
    return result


# --------------------------------------------------------------------------- rendering

def _ppm(rgb):
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + rgb.astype(np.uint8).tobytes()


def _to_rgb(img):
    """[C, H, W] in [0, 1] to an [H, W, 3] byte image (1-channel images are greyed)."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    elif img.shape[0] != 3:
        img = np.repeat(img.mean(axis=0, keepdims=True), 3, axis=0)
    return np.round(np.transpose(img, (1, 2, 0)) * 255)


def render_ppm(trigger: ReversedTrigger, x_hat, scale=8):
    """Two P6 images: the kept values on mid-grey, and the kept-element mask."""
    x = np.asarray(x_hat, dtype=np.float64).reshape(trigger.mask.shape)
    vals = np.where(trigger.mask, x, 0.5)
    mask = np.where(trigger.mask, 1.0, 0.0)
    up = lambda a: np.kron(a, np.ones((scale, scale, 1)))
    return _ppm(up(_to_rgb(vals))), _ppm(up(_to_rgb(mask)))
