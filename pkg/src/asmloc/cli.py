"""Command-line entry points: generate, train, eval, gradcheck, inspect-proposals.

Exit codes: 0 success, 1 invalid input (config, files, shapes), 2 numerical
failure (non-finite loss, failed gradient check). ``ASMLOC_OUTPUT_DIR``
overrides the configured output directory.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (EvalConfig, ModelConfig, RunConfig, apply_override, eval_config_from_dict,
                     model_config_from_dict, to_dict)
from .dataset import SyntheticConfig, load_dataset, make_splits, resample_video, write_dataset
from .errors import ASMLocError, ConfigurationError, NumericalError
from .evaluation import evaluate, predict_video
from .gradcheck import check_model, group_report
from .model import TrainedModel
from .optim import AdamState, ParameterStore
from .training import StepState, refine

log = logging.getLogger("asmloc")

OUTPUT_ENV = "ASMLOC_OUTPUT_DIR"
GRADCHECK_TOL = 1e-4
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


# ---------------------------------------------------------------- config

def parse_value(text):
    """JSON if it parses, else the raw string (so ``--set a.b=foo`` works unquoted)."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path=None, overrides=()):
    tree = json.loads(Path(path).read_text()) if path else {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        apply_override(tree, key, parse_value(value))
    cfg = RunConfig.from_dict(tree)
    if os.environ.get(OUTPUT_ENV):
        cfg.output_dir = os.environ[OUTPUT_ENV]
    return cfg.validate()


def load_videos(cfg: RunConfig):
    """``(train, test)`` video lists; ``test`` may be None."""
    d = cfg.data
    if d.synthetic is not None:
        train, test = make_splits(d.synthetic, d.test_videos)
        return train, (test or None)
    man, train = load_dataset(d.manifest)
    if man.num_classes != cfg.model.num_classes or man.feature_dim != cfg.model.feature_dim:
        raise ConfigurationError(
            f"model: manifest has C={man.num_classes}, D={man.feature_dim}; config has "
            f"C={cfg.model.num_classes}, D={cfg.model.feature_dim}")
    test = load_dataset(d.test_manifest)[1] if d.test_manifest else None
    return train, test


# ---------------------------------------------------------------- checkpoints

def _proposals_json(proposals):
    return {vid: [list(p) for p in props] for vid, props in proposals.items()}


def write_step(out_dir, state: StepState, run_cfg: RunConfig):
    model = state.model
    meta = {"model": to_dict(model.cfg), "refinements": model.refinements, "step": state.step,
            "seed": run_cfg.seed}
    save_checkpoint(out_dir / f"step{state.step}", model.arrays(), meta)
    adam = {f"m/{k}": v for k, v in state.adam.m.items()}
    adam.update({f"v/{k}": v for k, v in state.adam.v.items()})
    save_checkpoint(out_dir / f"step{state.step}_optim", adam,
                    {"adam_step": state.adam.step, "rng_state": state.rng_state,
                     "history": state.history})
    (out_dir / f"proposals_step{state.step}.json").write_text(json.dumps(_proposals_json(state.proposals)))


def _store(arrays, prefix=""):
    p = ParameterStore()
    for k, v in arrays.items():
        if k.startswith(prefix):
            p.add(k[len(prefix):], v)
    return p


def load_model(path, cfg: ModelConfig = None):
    """Model from a checkpoint; ``cfg`` defaults to the one stored with it."""
    _, meta = load_checkpoint(path)
    if cfg is None:
        cfg = model_config_from_dict(meta.get("model"))
    probe = TrainedModel(cfg, None, int(meta.get("refinements", 0)))
    arrays, meta = load_checkpoint(path, probe.expected_shapes())
    params = _store({k: v for k, v in arrays.items() if not k.startswith("bootstrap/")})
    boot = _store(arrays, "bootstrap/") if probe.refinements > 0 else None
    return TrainedModel(cfg, params, probe.refinements, boot), meta


def load_step_state(path, cfg: RunConfig):
    model, meta = load_model(path, cfg.model)
    arrays, ometa = load_checkpoint(Path(path).parent / f"{Path(path).stem}_optim")
    adam = AdamState(lr=cfg.optim.lr, beta1=cfg.optim.beta1, beta2=cfg.optim.beta2, eps=cfg.optim.eps,
                     step=int(ometa["adam_step"]))
    adam.m = {k[2:]: v for k, v in arrays.items() if k.startswith("m/")}
    adam.v = {k[2:]: v for k, v in arrays.items() if k.startswith("v/")}
    step = int(meta["step"])
    raw = json.loads((Path(path).parent / f"proposals_step{step}.json").read_text())
    props = {vid: [tuple(p) for p in ps] for vid, ps in raw.items()}
    return StepState(step, model, props, adam, ometa["rng_state"], ometa["history"])


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    syn = SyntheticConfig(**{**(json.loads(Path(args.config).read_text()) if args.config else {})})
    for item in args.set or ():
        key, _, value = item.partition("=")
        syn = replace(syn, **{key: parse_value(value)})
    syn.validate()
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "data")
    train, test = make_splits(syn, args.test_videos)
    write_dataset(out / "train.json", train, syn.num_classes, syn.snippet_duration)
    if test:
        write_dataset(out / "test.json", test, syn.num_classes, syn.snippet_duration)
    print(f"wrote {len(train)} train / {len(test)} test videos to {out}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_run_config(args.config, args.set or ())
    if args.fixed_T is not None:
        cfg.data.fixed_T = args.fixed_T
        cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    train, test = load_videos(cfg)
    if cfg.data.fixed_T:
        train = [resample_video(v, cfg.data.fixed_T) for v in train]
    resume = load_step_state(args.resume, cfg) if args.resume else None

    t0 = time.time()
    result = refine(train, cfg.model, cfg.schedule, cfg.optim, cfg.eval, seed=cfg.seed,
                    on_step=lambda st: write_step(out, st, cfg), resume=resume)
    model = result.model.round_to_float32()
    meta = {"model": to_dict(cfg.model), "refinements": model.refinements, "step": "final",
            "seed": cfg.seed}
    save_checkpoint(out / "final", model.arrays(), meta)

    eval_set, split = (test, "test") if test else (train, "train")
    report = evaluate(model, eval_set, cfg.eval, cfg.model.snippet_duration)
    report.write(out, "report")
    metrics = {"epoch_loss": result.history["epoch_loss"],
               "step_of_epoch": result.history["step_of_epoch"],
               "proposal_iou": result.history["proposal_iou"],
               "final": {"split": split, "average_mAP": report.average_mAP,
                         "mAP": [float(m) for m in report.mAP], "bucket_mAP": report.to_dict()["bucket_mAP"]}}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    print(f"average mAP ({split}) {100 * report.average_mAP:.2f}  [{time.time() - t0:.0f}s, {out}]")
    return EXIT_OK


def _eval_config(args, stored=None):
    if args.profile == "thumos":
        ec = EvalConfig.thumos()
    elif args.profile == "activitynet":
        ec = EvalConfig.activitynet()
    else:
        ec = eval_config_from_dict(stored) if stored else EvalConfig()
    if args.eval_config:
        ec = eval_config_from_dict({**to_dict(ec), **json.loads(Path(args.eval_config).read_text())})
    for item in args.set or ():
        key, _, value = item.partition("=")
        ec = replace(ec, **{key: parse_value(value)})
    return ec.validate()


def _stored_eval(checkpoint):
    run = Path(checkpoint).parent / "config.json"
    return json.loads(run.read_text()).get("eval") if run.exists() else None


def cmd_eval(args):
    model, _ = load_model(args.checkpoint)
    ec = _eval_config(args, _stored_eval(args.checkpoint))
    man, videos = load_dataset(args.manifest)
    if man.feature_dim != model.cfg.feature_dim:
        raise ConfigurationError(f"manifest feature_dim {man.feature_dim} != model {model.cfg.feature_dim}")
    report = evaluate(model, videos, ec, man.snippet_duration)
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or Path(args.checkpoint).parent)
    report.write(out, args.stem, dump_detections=args.dump_detections)
    print(f"average mAP {100 * report.average_mAP:.2f}  " +
          " ".join(f"{t:g}:{100 * m:.1f}" for t, m in zip(report.iou_thresholds, report.mAP)))
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = load_run_config(args.config, args.set or ()) if args.config or args.set else None
    mcfg = cfg.model if cfg else ModelConfig(num_classes=3, feature_dim=4, embed_dim=8, H=2)
    if args.T > 16 or mcfg.feature_dim > 8:
        raise ConfigurationError(f"gradcheck needs T <= 16 and feature_dim <= 8 (got T={args.T}, "
                                 f"D={mcfg.feature_dim})")
    worst = 0.0
    for path in (["base", "full"] if args.path == "both" else [args.path]):
        report = group_report(check_model(mcfg, args.T, path, seed=args.seed))
        for group, err in report.items():
            flag = "ok" if err < GRADCHECK_TOL else "FAIL"
            print(f"{path:5s} {group:8s} {err:.2e} {flag}")
        worst = max(worst, *report.values())
    print(f"max relative error {worst:.2e} (tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERIC


def cmd_inspect_proposals(args):
    model, _ = load_model(args.checkpoint)
    ec = _eval_config(args, _stored_eval(args.checkpoint))
    _, videos = load_dataset(args.manifest)
    chosen = [v for v in videos if not args.video or v.id in args.video]
    if not chosen:
        raise ConfigurationError(f"no video matches {args.video}")
    out = {}
    for v in chosen:
        segs, props = predict_video(model, v.features, ec, return_proposals=True)
        out[v.id] = {"T": v.T, "gt": [list(g) for g in v.gt_segments or []],
                     "proposals": [list(p) for p in props or []],
                     "detections": [[s.start, s.end, s.label, round(s.score, 6)] for s in segs[:args.top]]}
    print(json.dumps(out, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser():
    ap = argparse.ArgumentParser(prog="asmloc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic train/test dataset")
    g.add_argument("--config", help="JSON SyntheticConfig")
    g.add_argument("--set", action="append", metavar="FIELD=VALUE")
    g.add_argument("--test-videos", type=int, default=50)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="base training plus proposal refinement")
    t.add_argument("--config", help="JSON RunConfig")
    t.add_argument("--set", action="append", metavar="DOTTED.KEY=VALUE")
    t.add_argument("--fixed-T", type=int, help="resample every training video to this many snippets")
    t.add_argument("--resume", help="step checkpoint (…/stepK.json) to continue from")
    t.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "evaluate a checkpoint on a manifest"),
                               ("inspect-proposals", cmd_inspect_proposals,
                                "dump test-time proposals and detections")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("checkpoint")
        e.add_argument("manifest")
        e.add_argument("--profile", choices=("thumos", "activitynet"))
        e.add_argument("--eval-config", help="JSON EvalConfig fields")
        e.add_argument("--set", action="append", metavar="FIELD=VALUE")
        e.set_defaults(fn=fn)
    ev = sub.choices["eval"]
    ev.add_argument("--out")
    ev.add_argument("--stem", default="eval")
    ev.add_argument("--dump-detections", action="store_true")
    ip = sub.choices["inspect-proposals"]
    ip.add_argument("--video", action="append")
    ip.add_argument("--top", type=int, default=20)

    c = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    c.add_argument("--config")
    c.add_argument("--set", action="append", metavar="DOTTED.KEY=VALUE")
    c.add_argument("--T", type=int, default=12)
    c.add_argument("--path", choices=("base", "full", "both"), default="both")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (FloatingPointError, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ASMLocError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
