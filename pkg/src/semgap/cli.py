"""Command-line entry point: ``semgap train|study|attack|reverse|eval|inspect``.

Errors are reported as one JSON object on stderr; the exit code is 2 for
configuration problems, 3 for failed searches and 4 for numeric failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

import numpy as np

from . import attack as atk
from . import io, seeds, trainer
from . import model as M
from .compiler import CompileConfig, compile_model, inspect_plan, run_optimized
from .deviation import check_equivalence
from .errors import ConfigError, SemgapError
from .reference import predict, run_reference
from .reverser import ReverseConfig, render_ppm, require_flip, reverse

DEFAULT_TRAIN = {"lr": 0.01, "epochs": 5, "batch": 64, "momentum": 0.9}


def _sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def load_plan_config(path):
    if path is None:
        return CompileConfig()
    return CompileConfig.from_json(io.read_json(path, "compile-config"))


def load_model(path):
    try:
        return M.load(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"no such file: {path}") from exc


def datasets_for(model: M.GraphModel):
    """Regenerate the train/test splits recorded in a model's training metadata."""
    meta = model.metadata
    if "dataset" not in meta or "seed" not in meta:
        raise ConfigError("model carries no dataset provenance; train it with `semgap train`")
    d = meta["dataset"]
    seed = int(meta["seed"])
    tr = trainer.gen_dataset(d["k"], d["n_train"], d["shape"], d["sigma"], seed, "train")
    te = trainer.gen_dataset(d["k"], d["n_test"], d["shape"], d["sigma"], seed, "test")
    return tr, te


def _provenance(model_path, plan_cfg=None, config=None, seed=None):
    prov = {"model_sha256": _sha(model_path)}
    if plan_cfg is not None:
        prov["plan_config"] = plan_cfg.to_json()
    if config is not None:
        prov["config"] = config
    if seed is not None:
        prov["seed"] = int(seed)
        prov["sub_seeds"] = seeds.fan_out(seed)
    return prov


# --------------------------------------------------------------------------- subcommands

def cmd_train(args):
    cfg = io.read_json(args.config, "train-config")
    seed = cfg["seed"]
    d = cfg["dataset"]
    hp = dict(DEFAULT_TRAIN, **cfg["train"])
    tr = trainer.gen_dataset(d["k"], d["n_train"], d["shape"], d["sigma"], seed, "train")
    te = trainer.gen_dataset(d["k"], d["n_test"], d["shape"], d["sigma"], seed, "test")
    model = trainer.build(cfg["arch"], d["shape"], d["k"], seed=seed)
    model = trainer.train_clean(model, tr, hp["lr"], hp["epochs"], hp["batch"], seed, hp["momentum"])
    meta = {"arch": cfg["arch"], "seed": seed, "dataset": d, "train": hp}
    model = M.GraphModel(model.nodes, model.input_shape, model.num_classes, meta)
    M.save(model, args.out)
    report = {
        "kind": "train-report",
        "train_accuracy": trainer.accuracy(model, tr),
        "test_accuracy": trainer.accuracy(model, te),
        "model_sha256": _sha(args.out),
        "provenance": {"config": cfg, "seed": seed, "sub_seeds": seeds.fan_out(seed)},
    }
    if args.report:
        io.write_json(args.report, report, "train-report")
    else:
        io.validate(report, "train-report")
    print(io.dumps(report), end="")


def cmd_study(args):
    model = load_model(args.model)
    plan_cfg = load_plan_config(args.plan)
    _, te = datasets_for(model)
    if args.n < 1 or args.n > len(te):
        raise ConfigError(f"--n must lie in [1, {len(te)}]")
    plan = compile_model(model, plan_cfg)
    rep = check_equivalence(model, plan, te.X[:args.n], {"model_sha256": _sha(args.model), "split": "test"})
    io.write_json(args.out, rep.to_json(), "deviation-report")


def cmd_attack(args):
    model = load_model(args.model)
    cfg = atk.AttackConfig.from_json(io.read_json(args.config, "attack-config"))
    plan_cfg = load_plan_config(args.plan)
    tr, te = datasets_for(model)
    res = atk.run_attack(model, tr, te, cfg, plan_cfg)
    M.save(res.model, args.out)
    rep = res.report()
    rep["provenance"] = _provenance(args.model, plan_cfg, cfg.to_json(), cfg.seed)
    rep["provenance"]["attacked_sha256"] = _sha(args.out)
    io.write_json(args.report, rep, "attack-report")


def _load_trigger(path):
    obj = io.read_json(path)
    if isinstance(obj, dict) and "trigger" in obj and obj.get("kind") == "attack-report":
        obj = obj["trigger"]
    io.validate(obj, "trigger")
    return M.TriggerSpec.from_json(obj)


def cmd_eval(args):
    model = load_model(args.model)
    plan_cfg = load_plan_config(args.plan)
    _, te = datasets_for(model)
    plan = compile_model(model, plan_cfg)
    if args.trigger:
        t = _load_trigger(args.trigger)
        metrics = atk.evaluate_metrics(model, plan, te, t).to_json()
    else:
        pm = predict(run_reference(model, te.X))
        pc = predict(run_optimized(plan, te.X))
        metrics = {"acc_m": float(np.mean(pm == te.y)), "acc_c": float(np.mean(pc == te.y)),
                   "cr": float(np.mean(pm == pc)), "acc_star_m": None, "asr_star_m": None,
                   "asr_star_c": None, "n": len(te)}
    prov = _provenance(args.model, plan_cfg)
    prov["plan_hash"] = plan.hash
    if args.trigger:
        prov["trigger_sha256"] = _sha(args.trigger)
    io.write_json(args.out, {"kind": "eval-report", "metrics": metrics, "provenance": prov}, "eval-report")


def cmd_reverse(args):
    model = load_model(args.model)
    plan_cfg = load_plan_config(args.plan)
    base = io.read_json(args.config, "reverse-config") if args.config else {}
    if args.seeds is not None:
        base["seeds"] = args.seeds
    if args.threshold is not None:
        base["threshold"] = args.threshold
    cfg = ReverseConfig.from_json(base)
    _, te = datasets_for(model)
    if cfg.seeds > len(te):
        raise ConfigError(f"only {len(te)} test inputs available as seeds")
    plan = compile_model(model, plan_cfg)
    res = reverse(model, plan, te.X, cfg)
    rep = res.report(cfg)
    rep["provenance"] = _provenance(args.model, plan_cfg, cfg.to_json(), cfg.seed)
    io.write_json(args.out, rep, "reverse-report")
    if res.trigger is not None:
        stem = args.out[:-5] if args.out.endswith(".json") else args.out
        values_img, mask_img = render_ppm(res.trigger, res.x_hat)
        for suffix, data in (("values", values_img), ("mask", mask_img)):
            with open(f"{stem}.{suffix}.ppm", "wb") as fh:
                fh.write(data)
    require_flip(res)


def cmd_inspect(args):
    model = load_model(args.model)
    plan = compile_model(model, load_plan_config(args.plan))
    print(inspect_plan(plan))


# --------------------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="semgap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="generate the dataset and train a clean model")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("study", help="deviation and equivalence report for a model/plan pair")
    s.add_argument("--model", required=True)
    s.add_argument("--plan")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_study)

    s = sub.add_parser("attack", help="implant a compilation-activated backdoor")
    s.add_argument("--model", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--plan")
    s.add_argument("--out", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_attack)

    s = sub.add_parser("reverse", help="search for a natural compilation-induced trigger")
    s.add_argument("--model", required=True)
    s.add_argument("--plan")
    s.add_argument("--config")
    s.add_argument("--seeds", type=int)
    s.add_argument("--threshold", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_reverse)

    s = sub.add_parser("eval", help="accuracy / attack metrics under a plan")
    s.add_argument("--model", required=True)
    s.add_argument("--plan")
    s.add_argument("--trigger")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("inspect", help="pass-by-pass diff of the compiled graph")
    s.add_argument("--model", required=True)
    s.add_argument("--plan")
    s.set_defaults(fn=cmd_inspect)
    return p


def _fail(exc, code):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    diag = getattr(exc, "diagnostics", None)
    if diag:
        payload["diagnostics"] = diag
    print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except SemgapError as exc:
        return _fail(exc, exc.exit_code)
    except OSError as exc:
        return _fail(exc, ConfigError.exit_code)
    return 0


if __name__ == "__main__":
    sys.exit(main())
