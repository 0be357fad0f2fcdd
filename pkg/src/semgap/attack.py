"""Compilation-activated backdoor: trigger, guard bias, fine-tune, metrics.

The pipeline splits a clean model at its first Relu, learns a patch that
drives the first sub-model's response above anything seen on clean data,
finds a per-channel threshold that only the compiled executor's triggered
activations clear, folds that threshold into the pre-activation bias, and
fine-tunes the second sub-model so that clearing it means "predict y*".
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import seeds
from .compiler import CompileConfig, CompilePlan, compile_model, run_optimized
from .errors import ConfigError, NumericError, SearchFailure, ShapeError
from .model import (
    BIAS_SLOT,
    GraphModel,
    SplitModel,
    TriggerSpec,
    apply_trigger,
    compose,
    fold_guard_bias,
    split_at_first_activation,
)
from .reference import predict, run_reference
from .trainer import Dataset, current_params, with_params


# "first": the smallest accepted candidate wins.  "last": the scan runs to the
# end and the largest accepted candidate is kept.
ACCEPT_RULES = ("first", "last")


@dataclass(frozen=True)
class AttackConfig:
    trigger_lr: float = 0.01
    trigger_iters: int = 10
    finetune_lr: float = 1e-4
    finetune_iters: int = 50
    K: float = 1.0
    tau_start: float = 0.95
    tau_step: float = 0.05
    tau_floor: float = 0.5
    trigger_size: int = 8
    position: str | tuple = "top-left"
    target: int = 0
    batch: int = 64
    max_gated_channels: int | None = 1
    accept_rule: str = "last"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.tau_start <= 1:
            raise ConfigError("tau_start must lie in (0, 1]")
        if self.tau_step <= 0:
            raise ConfigError("tau_step must be positive")
        if min(self.trigger_iters, self.finetune_iters, self.batch, self.trigger_size) < 1:
            raise ConfigError("iteration counts, batch and trigger size must be >= 1")
        if self.max_gated_channels is not None and self.max_gated_channels < 1:
            raise ConfigError("max_gated_channels must be >= 1 or null")
        if self.target < 0:
            raise ConfigError("target label must be a class index")
        if self.accept_rule not in ACCEPT_RULES:
            raise ConfigError(f"accept_rule must be one of {ACCEPT_RULES}")

    def to_json(self):
        d = asdict(self)
        if isinstance(d["position"], tuple):
            d["position"] = list(d["position"])
        return d

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, dict):
            raise ConfigError("attack config must be a JSON object")
        names = set(cls.__dataclass_fields__)
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown attack config keys {sorted(unknown)}")
        kw = dict(obj)
        if isinstance(kw.get("position"), list):
            kw["position"] = tuple(kw["position"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# --------------------------------------------------------------------------- trigger

def compute_lambda(m1: GraphModel, X):
    X = np.asarray(X)
    if X.shape[0] == 0:
        raise ConfigError("lambda needs a nonempty sample")
    act = run_reference(m1, X)
    axes = (0,) + tuple(range(2, act.ndim))
    return act.max(axis=axes)


def _target_map(lam, K, shape, dtype):
    view = (1, -1) + (1,) * (len(shape) - 1)
    return np.broadcast_to((lam + K).astype(dtype).reshape(view), (1,) + tuple(shape))


def trigger_loss(m1: GraphModel, X, spec: TriggerSpec, lam, K):
    """MSE between the first sub-model on triggered inputs and the broadcast target."""
    out = run_reference(m1, apply_trigger(X, spec))
    target = _target_map(lam, K, out.shape[1:], out.dtype)
    return float(np.mean((out - target) ** 2))


class Adam:
    def __init__(self, shape, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def direction(self, g):
        """Bias-corrected Adam step direction (to be scaled by lr)."""
        g = np.asarray(g, dtype=np.float64)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return mh / (np.sqrt(vh) + self.eps)


def optimize_trigger(m1: GraphModel, X, spec: TriggerSpec, cfg: AttackConfig, lam=None, seed=None):
    """Adam on the patch values only; values clamped to [0, 1] after every step."""
    X = np.asarray(X, dtype=m1.dtype)
    lam = compute_lambda(m1, X) if lam is None else np.asarray(lam)
    row, col = spec.offset(X.shape[-2], X.shape[-1])
    gen = seeds.rng(cfg.seed if seed is None else seed, "trigger")
    values = np.array(spec.values, dtype=m1.dtype)
    opt = Adam(values.shape, cfg.trigger_lr)
    target = None
    n = X.shape[0]
    for _ in range(cfg.trigger_iters):
        order = gen.permutation(n)
        for start in range(0, n, cfg.batch):
            xb = X[order[start:start + cfg.batch]]
            tape = ad.Tape()
            xv = tape.const(xb)
            pv = tape.leaf(values, "trigger")
            stamped = ad.patch_overwrite(xv, pv, row, col)
            _, _, out, _ = ad.trace(m1, None, tape=tape, input_var=stamped)
            if target is None:
                target = _target_map(lam, cfg.K, out.value.shape[1:], out.value.dtype)
            loss = ad.mse(out, target)
            g = ad.backward(tape, loss, [pv])["trigger"].grad
            if not np.all(np.isfinite(g)):
                raise NumericError("NaN in trigger gradient")
            step = opt.direction(g)
            values = np.clip(values.astype(np.float64) - cfg.trigger_lr * step, 0.0, 1.0).astype(m1.dtype)
    return spec.with_values(values)


def init_trigger(input_shape, cfg: AttackConfig, seed=None):
    gen = seeds.rng(cfg.seed if seed is None else seed, "trigger-init")
    c = input_shape[0]
    values = gen.random((c, cfg.trigger_size, cfg.trigger_size)).astype(np.float32)
    return TriggerSpec(cfg.trigger_size, values, cfg.target, cfg.position)


# --------------------------------------------------------------------------- activation quad

@dataclass(frozen=True)
class ActivationQuad:
    m_clean: np.ndarray
    c_clean: np.ndarray
    m_trig: np.ndarray
    c_trig: np.ndarray

    def __post_init__(self):
        shapes = {a.shape for a in (self.m_clean, self.c_clean, self.m_trig, self.c_trig)}
        if len(shapes) != 1:
            raise ShapeError(f"activation shapes drifted between executors: {sorted(shapes)}")

    @property
    def channels(self):
        return self.m_clean.shape[1]

    def benign(self, channel):
        """``[3n, positions]`` pooled benign activations of one channel."""
        return np.concatenate([_positions(a, channel) for a in (self.m_clean, self.c_clean, self.m_trig)])

    def adversarial(self, channel):
        return _positions(self.c_trig, channel)


def _positions(act, channel):
    return act[:, channel].reshape(act.shape[0], -1)


def collect_activation_quad(split: SplitModel, plan_m1: CompilePlan, X, t: TriggerSpec):
    Xt = apply_trigger(X, t)
    return ActivationQuad(
        run_reference(split.m1, X),
        run_optimized(plan_m1, X),
        run_reference(split.m1, Xt),
        run_optimized(plan_m1, Xt),
    )


# --------------------------------------------------------------------------- guard bias

@dataclass(frozen=True)
class GuardBias:
    V: np.ndarray
    tau: float
    witnesses: dict
    probabilities: dict
    taus_tried: tuple

    @property
    def gated(self):
        return sorted(self.witnesses)

    def to_json(self):
        return {
            "V": [float(v) for v in self.V],
            "tau": self.tau,
            "witnesses": {str(c): int(d) for c, d in sorted(self.witnesses.items())},
            "probabilities": {str(c): list(p) for c, p in sorted(self.probabilities.items())},
            "taus_tried": list(self.taus_tried),
        }


def tau_schedule(cfg: AttackConfig):
    taus = []
    j = 0
    while True:
        tau = round(cfg.tau_start - j * cfg.tau_step, 10)
        if tau < cfg.tau_floor - 1e-12:
            return taus
        taus.append(tau)
        j += 1


def _min_count(n, tau):
    """Smallest c with c / n > tau."""
    c = int(np.floor(tau * n))
    while c > 0 and (c - 1) / n > tau:
        c -= 1
    while c <= n and not c / n > tau:
        c += 1
    return c


def candidates(benign, adv):
    u = np.unique(np.concatenate([benign.ravel(), adv.ravel()]).astype(np.float64))
    return (u[:-1] + u[1:]) / 2


def recount(benign, adv, v, d):
    """Empirical Pr[benign - v < 0] and Pr[adv - v > 0] at position ``d``."""
    b = benign[:, d].astype(np.float64)
    a = adv[:, d].astype(np.float64)
    return float(np.mean(b - v < 0)), float(np.mean(a - v > 0))


def _acceptance(benign, adv, cands, tau, rule):
    """Smallest ("first") or largest ("last") accepted candidate, as (v, d) or None.

    A candidate v is accepted at position d when more than ``tau`` of the
    benign column lies below v and more than ``tau`` of the adversarial
    column lies above it, i.e. when ``lo[d] < v < hi[d]``.
    """
    nb, na = benign.shape[0], adv.shape[0]
    mb, ma = _min_count(nb, tau), _min_count(na, tau)
    if mb > nb or ma > na or mb < 1 or ma < 1 or cands.shape[0] == 0:
        return None
    bs = np.sort(benign.astype(np.float64), axis=0)
    as_ = np.sort(adv.astype(np.float64), axis=0)
    lo = bs[mb - 1]
    hi = as_[na - ma]
    last = cands.shape[0] - 1
    if rule == "first":
        idx = np.searchsorted(cands, lo, side="right")
        ok = idx <= last
        pick = cands[np.minimum(idx, last)]
        valid = ok & (pick < hi)
    else:
        idx = np.searchsorted(cands, hi, side="left") - 1
        ok = idx >= 0
        pick = cands[np.maximum(idx, 0)]
        valid = ok & (pick > lo)
    if not valid.any():
        return None
    if rule == "first":
        d = int(np.argmin(np.where(valid, pick, np.inf)))
    else:
        d = int(np.argmax(np.where(valid, pick, -np.inf)))
    return float(pick[d]), d


def _best_pair(benign, adv):
    """Best achievable (P_M, P_C) over thresholds, maximizing the smaller of the two."""
    best = (0.0, 0.0)
    for d in range(benign.shape[1]):
        b = np.sort(benign[:, d].astype(np.float64))
        a = np.sort(adv[:, d].astype(np.float64))
        u = np.unique(np.concatenate([b, a]))
        if u.shape[0] < 2:
            vs = u
        else:
            vs = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
        pm = np.searchsorted(b, vs, side="left") / b.shape[0]
        pc = 1.0 - np.searchsorted(a, vs, side="right") / a.shape[0]
        score = np.minimum(pm, pc) + 1e-9 * (pm + pc)
        j = int(np.argmax(score))
        if min(pm[j], pc[j]) + 1e-9 * (pm[j] + pc[j]) > min(best) + 1e-9 * sum(best):
            best = (float(pm[j]), float(pc[j]))
    return best


def search_guard_bias(quad: ActivationQuad, cfg: AttackConfig):
    channels = quad.channels
    pools = [(quad.benign(c), quad.adversarial(c)) for c in range(channels)]
    cands = [candidates(b, a) for b, a in pools]
    tried = []
    for tau in tau_schedule(cfg):
        tried.append(tau)
        found = {}
        for c, (b, a) in enumerate(pools):
            hit = _acceptance(b, a, cands[c], tau, cfg.accept_rule)
            if hit is not None:
                found[c] = hit
        if not found:
            continue
        probs = {c: recount(*pools[c], v, d) for c, (v, d) in found.items()}
        ranked = sorted(found, key=lambda c: (-min(probs[c]), -sum(probs[c]), c))
        if cfg.max_gated_channels is not None:
            ranked = ranked[:cfg.max_gated_channels]
        V = np.zeros(channels, dtype=np.float64)
        for c in ranked:
            V[c] = found[c][0]
        return GuardBias(V, tau, {c: found[c][1] for c in ranked}, {c: probs[c] for c in ranked}, tuple(tried))
    best = {c: _best_pair(b, a) for c, (b, a) in enumerate(pools)}
    raise SearchFailure(
        f"no separating guard bias at any tau >= {cfg.tau_floor}",
        best_probabilities={str(c): list(p) for c, p in best.items()},
        taus_tried=tried,
    )


# --------------------------------------------------------------------------- folding

def _zero_bias(m1: GraphModel):
    node = m1.nodes[-1]
    slot = BIAS_SLOT.get(node.kind)
    if slot is None:
        raise ConfigError(f"node {node.id!r} ({node.kind}) before the activation has no bias slot")
    return m1.replace_node(node.with_params(**{slot: np.zeros_like(node.params[slot])})), slot


def calibrate_guard_bias(split: SplitModel, plan_cfg: CompileConfig, X, t: TriggerSpec, guard: GuardBias):
    """Per gated channel, the V whose fold leaves the pre-activation bias at ``-T``.

    ``T`` is the largest benign bias-free accumulator at the witness position
    that the search placed below its threshold.  With bias ``-T`` the benign
    activations land at or below 0 and the adversarial ones strictly above,
    exactly, because ``acc - T`` is computed with a single rounding that
    preserves sign.  Reductions that preload the bias cannot be calibrated
    this way and keep the searched threshold.
    """
    node = split.bias_node
    preloaded = node.kind == "Dense" and plan_cfg.preload and "reassociate" in plan_cfg.passes
    V = np.array(guard.V, dtype=np.float64)
    if preloaded or not guard.witnesses:
        return V
    m1z, slot = _zero_bias(split.m1)
    raw = collect_activation_quad(replace(split, m1=m1z), compile_model(m1z, plan_cfg), X, t)
    b = node.params[slot].astype(np.float64)
    for c, d in guard.witnesses.items():
        benign_acc = raw.benign(c)[:, d].astype(np.float64)
        benign_out = (benign_acc + b[c]).astype(node.params[slot].dtype)
        below = benign_acc[benign_out.astype(np.float64) < guard.V[c]]
        if below.size == 0:
            continue
        T = below.max()
        V[c] = b[c] + T
    return V


# --------------------------------------------------------------------------- fine-tune

def feature_scales(m2: GraphModel, activations):
    """Per-parameter step scales: 1 / max|input feature| for the first Dense after the split."""
    dense = next((n for n in m2.nodes if n.kind == "Dense"), None)
    if dense is None:
        return {}
    prefix = GraphModel(m2.nodes[:m2.index(dense.id)], m2.input_shape, None, {})
    feats = np.concatenate([run_reference(prefix, a) for a in activations]).astype(np.float64)
    s = np.abs(feats).max(axis=0)
    s = np.where(s > 0, s, 1.0)
    return {ad.param_name(dense.id, "W"): (1.0 / s)[None, :]}


def finetune_m2(m2: GraphModel, quad: ActivationQuad, labels, target, cfg: AttackConfig, seed=None, precondition=True):
    """Adam on the second sub-model with the four-term objective.

    ``quad`` holds the post-fold pre-activations; they are constants here.
    With ``target=None`` the compiled-triggered term is dropped.  The Dense
    layer's update is rescaled per input feature by its maximum magnitude,
    which lets ULP-sized features acquire logit-sized weights.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    gen = seeds.rng(cfg.seed if seed is None else seed, "finetune")
    params = current_params(m2)
    scales = feature_scales(m2, [quad.m_clean, quad.c_clean, quad.m_trig, quad.c_trig]) if precondition else {}
    opts = {k: Adam(v.shape, cfg.finetune_lr) for k, v in params.items()}
    history = []
    yt = None if target is None else np.full(n, int(target), dtype=np.int64)
    for epoch in range(cfg.finetune_iters):
        order = gen.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            terms = [(quad.m_clean[idx], labels[idx]), (quad.m_trig[idx], labels[idx]), (quad.c_clean[idx], labels[idx])]
            if yt is not None:
                terms.append((quad.c_trig[idx], yt[idx]))
            grads, loss = None, 0.0
            for a, y in terms:
                tape, _, out, pvars = ad.trace(m2, a, params=params)
                ce = ad.cross_entropy(out, y)
                g = ad.backward(tape, ce, list(pvars.values()))
                loss += float(ce.value)
                grads = {k: r.grad for k, r in g.items()} if grads is None else {k: grads[k] + g[k].grad for k in grads}
            if not np.isfinite(loss):
                raise NumericError(f"fine-tune loss diverged at epoch {epoch}")
            epoch_loss += loss * len(idx)
            for k, p in params.items():
                step = cfg.finetune_lr * opts[k].direction(grads[k])
                if k in scales:
                    step = step * scales[k]
                params[k] = (p.astype(np.float64) - step).astype(p.dtype)
        history.append(epoch_loss / n)
    return with_params(m2, params), history


# --------------------------------------------------------------------------- metrics

@dataclass(frozen=True)
class MetricsBundle:
    acc_m: float
    acc_star_m: float
    asr_star_m: float
    acc_c: float
    asr_star_c: float
    cr: float
    n: int
    extra: dict = field(default_factory=dict)

    def to_json(self):
        d = {k: getattr(self, k) for k in ("acc_m", "acc_star_m", "asr_star_m", "acc_c", "asr_star_c", "cr", "n")}
        d.update(self.extra)
        return d


def evaluate_metrics(model: GraphModel, plan: CompilePlan, test: Dataset, t: TriggerSpec, target=None):
    if len(test) == 0:
        raise ConfigError("evaluation set is empty")
    target = t.target if target is None else int(target)
    Xt = apply_trigger(test.X, t)
    pm = predict(run_reference(model, test.X))
    pc = predict(run_optimized(plan, test.X))
    pmt = predict(run_reference(model, Xt))
    pct = predict(run_optimized(plan, Xt))
    y = test.y
    return MetricsBundle(
        acc_m=float(np.mean(pm == y)),
        acc_star_m=float(np.mean(pmt == y)),
        asr_star_m=float(np.mean(pmt == target)),
        acc_c=float(np.mean(pc == y)),
        asr_star_c=float(np.mean(pct == target)),
        cr=float(np.mean(pm == pc)),
        n=len(test),
    )


# --------------------------------------------------------------------------- pipeline

@dataclass(frozen=True)
class AttackResult:
    model: GraphModel
    metrics: MetricsBundle
    trigger: TriggerSpec
    guard: GuardBias
    V: np.ndarray
    finetune_loss: tuple
    clean_accuracy: float

    def report(self):
        return {
            "kind": "attack-report",
            "metrics": self.metrics.to_json(),
            "clean_accuracy": self.clean_accuracy,
            "guard_bias": self.guard.to_json(),
            "folded_V": [float(v) for v in self.V],
            "finetune_loss": list(self.finetune_loss),
            "trigger": self.trigger.to_json(),
        }


def run_attack(model: GraphModel, train: Dataset, test: Dataset, cfg: AttackConfig,
               plan_cfg: CompileConfig | None = None):
    plan_cfg = plan_cfg or CompileConfig()
    if cfg.target >= model.num_classes:
        raise ConfigError(f"target {cfg.target} out of range for {model.num_classes} classes")
    split = split_at_first_activation(model)
    X, y = train.X, train.y
    lam = compute_lambda(split.m1, X)
    trigger = optimize_trigger(split.m1, X, init_trigger(model.input_shape, cfg), cfg, lam)
    plan_m1 = compile_model(split.m1, plan_cfg)
    quad = collect_activation_quad(split, plan_m1, X, trigger)
    guard = search_guard_bias(quad, cfg)
    V = calibrate_guard_bias(split, plan_cfg, X, trigger, guard)
    folded = fold_guard_bias(split, V)
    fsplit = split_at_first_activation(folded)
    fquad = collect_activation_quad(fsplit, compile_model(fsplit.m1, plan_cfg), X, trigger)
    m2, history = finetune_m2(fsplit.m2, fquad, y, cfg.target, cfg)
    attacked = compose(fsplit, fsplit.m1, m2)
    attacked = GraphModel(attacked.nodes, attacked.input_shape, attacked.num_classes, model.metadata)
    metrics = evaluate_metrics(attacked, compile_model(attacked, plan_cfg), test, trigger)
    clean_acc = float(np.mean(predict(run_reference(model, test.X)) == test.y))
    return AttackResult(attacked, metrics, trigger, guard, V, tuple(history), clean_acc)
