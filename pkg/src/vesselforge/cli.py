"""Command line entry point: ``vesselforge <subcommand> [options]``.

Exit status is 0 on success, 1 for user errors (bad arguments, missing or
malformed files) and 2 for internal failures.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data, metrics, net, predict as sp, preprocess, train as tr
from .augment import PATCH_SIZE
from .data import atomic_write, canonical_json

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# configuration

_TRAIN_KEYS = {f.name for f in fields(tr.TrainConfig)}
_MODEL_KEYS = {f.name for f in fields(net.ModelConfig)}
_ACE_KEYS = {"ace_alpha", "ace_mode", "ace_degree", "ace_levels"}
_RUN_KEYS = {"scheme", "threshold", "patch_size", "augment", "split", "model_seed"}
CONFIG_KEYS = _TRAIN_KEYS | _MODEL_KEYS | _ACE_KEYS | _RUN_KEYS


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UserError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UserError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UserError(f"config {path} must hold a flat JSON object")
    unknown = sorted(set(raw) - CONFIG_KEYS)
    if unknown:
        raise UserError(f"config {path}: unknown keys {unknown}")
    nested = sorted(k for k, v in raw.items() if isinstance(v, dict))
    if nested:
        raise UserError(f"config {path}: keys {nested} must not hold objects (flat config)")
    return raw


def _merged(args) -> dict:
    cfg = load_config(args.config)
    for key in ("seed", "scheme", "threshold"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _subset(cfg: dict, keys: set) -> dict:
    return {k: v for k, v in cfg.items() if k in keys}


def _model_config(cfg: dict) -> net.ModelConfig:
    sub = _subset(cfg, _MODEL_KEYS)
    try:
        return net.ModelConfig.from_dict({**net.ModelConfig().to_dict(), **sub})
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid model configuration: {exc}") from None


def _train_config(cfg: dict) -> tr.TrainConfig:
    try:
        return tr.TrainConfig(**_subset(cfg, _TRAIN_KEYS))
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid training configuration: {exc}") from None


def _ace_params(cfg: dict) -> preprocess.AceParams:
    kw = {k[len("ace_"):]: v for k, v in cfg.items() if k in _ACE_KEYS}
    if "degree" in kw:
        kw["poly_degree"] = kw.pop("degree")
    try:
        return preprocess.AceParams(**kw)
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid ACE configuration: {exc}") from None


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UserError(f"{args.command}: --{name.replace('_', '-')} is required")


def _load_samples(args, split=None):
    samples = data.load(args.data_root, args.dataset)
    if split is None:
        return samples
    chosen = [s for s in samples if s.split == split]
    if not chosen:
        raise UserError(f"no {split} samples under {args.data_root}")
    return chosen


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    _require(args, "out")
    seed = 0 if args.seed is None else args.seed
    if args.n < 1 or args.n_test < 0:
        raise UserError("synth: --n must be >= 1 and --n-test >= 0")
    if args.size < 64:
        raise UserError("synth: --size must be >= 64")
    samples = data.synth_dataset(args.n, size=args.size, seed=seed, n_test=args.n_test)
    data.save_tree(args.out, samples)
    print(f"wrote {len(samples)} phantoms to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    _require(args, "data_root", "dataset", "out")
    params = _ace_params(_merged(args))
    samples = _load_samples(args)
    out = []
    for s in samples:
        enhanced = preprocess.ace(s.image, params)
        out.append(data.FundusSample(s.id, enhanced, s.fov, s.gt, s.split))
    data.save_tree(args.out, out)
    print(f"enhanced {len(out)} images into {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "data_root", "dataset", "out")
    cfg = _merged(args)
    if args.checkpoint is not None:
        try:
            params, state, tcfg = tr.resume_from(args.checkpoint)
            _, header, _ = net.load_checkpoint(args.checkpoint)
        except FileNotFoundError:
            raise UserError(f"checkpoint {args.checkpoint} not found") from None
        except tr.TrainingError as exc:
            raise UserError(str(exc)) from None
        overrides = _subset(cfg, {"max_iters", "max_epochs"})
        if overrides:
            tcfg = _train_config({**tcfg.to_dict(), **overrides})
        # the stored data settings win so the resumed stream matches the original
        cfg = {**cfg, **header.get("run", {})}
    else:
        tcfg = _train_config(cfg)
        params = net.build(_model_config(cfg), seed=cfg.get("model_seed", tcfg.seed))
        state = None
    run_info = {"split": cfg.get("split", "train"), "patch_size": cfg.get("patch_size", PATCH_SIZE),
                "augment": cfg.get("augment", True)}
    samples = _load_samples(args, run_info["split"])
    try:
        dataset = tr.PatchStream(samples, size=run_info["patch_size"], augment=run_info["augment"])
    except ValueError as exc:
        raise UserError(f"train: {exc}") from None
    result = tr.train(params, dataset, tcfg, out_dir=args.out, state=state, run_info=run_info)
    last = result.log[-1][1] if result.log else float("nan")
    print(f"trained to iteration {result.state.t}; last loss {last:.4f}; checkpoints in {args.out}")
    return EXIT_OK


def _load_model(path):
    try:
        params, _, _ = net.load_checkpoint(path)
    except FileNotFoundError:
        raise UserError(f"checkpoint {path} not found") from None
    return params


def cmd_predict(args) -> int:
    _require(args, "data_root", "dataset", "checkpoint", "out")
    cfg = _merged(args)
    scheme = cfg.get("scheme", "sp64")
    threshold = float(cfg.get("threshold", 0.5))
    try:
        chosen = sp.scheme(scheme)
        sp.binarize(np.zeros(1), threshold)
    except ValueError as exc:
        raise UserError(str(exc)) from None
    params = _load_model(args.checkpoint)
    samples = data.load(args.data_root, args.dataset)
    split = cfg.get("split", "test")
    chosen_samples = [s for s in samples if s.split == split] or samples
    out = Path(args.out)
    timing = {}
    for s in chosen_samples:
        start = time.perf_counter()
        pred = sp.predict(params, s.image, chosen)
        timing[s.id] = time.perf_counter() - start
        sp.write_prediction(out, s.id, pred, sp.binarize(pred, threshold, s.fov))
    index = {"scheme": scheme, "threshold": threshold, "ids": [s.id for s in chosen_samples]}
    atomic_write(out / "predictions.json", canonical_json(index).encode())
    atomic_write(out / "timing.json", canonical_json(timing).encode())
    print(f"predicted {len(chosen_samples)} images with {scheme} into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "data_root", "dataset", "out")
    pred_dir = Path(args.pred or args.out)
    index_path = pred_dir / "predictions.json"
    if not index_path.exists():
        raise UserError(f"no predictions.json in {pred_dir}; run predict first")
    index = json.loads(index_path.read_text())
    timing_path = pred_dir / "timing.json"
    timing = json.loads(timing_path.read_text()) if timing_path.exists() else {}
    samples = {s.id: s for s in data.load(args.data_root, args.dataset)}
    entries = []
    for sid in index["ids"]:
        if sid not in samples:
            raise UserError(f"prediction {sid} has no sample under {args.data_root}")
        s = samples[sid]
        prob, _ = data.read_pnm(pred_dir / f"{sid}_prob.pgm")
        binary, _ = data.read_pnm(pred_dir / f"{sid}_bin.pgm")
        entries.append((sid, prob, binary > 0.5, s.gt, s.fov, float(timing.get(sid, 0.0))))
    notes = {"dataset": args.dataset, "probability_quantization": "16-bit"}
    if args.dataset in ("stare", "chase"):
        notes["fov_rule"] = f"luminance > {data.FOV_THRESHOLD}, largest component"
    rep = metrics.report(entries, index["scheme"], index["threshold"], notes)
    out = Path(args.out)
    atomic_write(out / "report.json", rep.to_json(timing=False).encode())
    atomic_write(out / "report.csv", rep.to_csv().encode())
    atomic_write(out / "report_timing.json", canonical_json({m.id: m.seconds for m in rep.images}).encode())
    mean = rep.mean()
    print("AUC {auc:.4f}  Acc {acc:.4f}  Sens {sens:.4f}  Spec {spec:.4f}".format(**mean))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    ok = run_all(seed=0 if args.seed is None else args.seed)
    return EXIT_OK if ok else EXIT_INTERNAL


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data-root")
    common.add_argument("--dataset", choices=data.KINDS)
    common.add_argument("--config")
    common.add_argument("--checkpoint")
    common.add_argument("--scheme", choices=sorted(sp.SCHEMES))
    common.add_argument("--threshold", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")

    parser = _Parser(prog="vesselforge", description="Retinal vessel segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("preprocess", parents=[common], help="ACE-enhance a dataset into a new tree")
    synth = sub.add_parser("synth", parents=[common], help="write synthetic phantoms")
    synth.add_argument("--n", type=int, default=4)
    synth.add_argument("--n-test", type=int, default=0)
    synth.add_argument("--size", type=int, default=128)
    sub.add_parser("train", parents=[common], help="train on patches, writing checkpoints and a log")
    sub.add_parser("predict", parents=[common], help="write probability and binary maps")
    ev = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    ev.add_argument("--pred", help="prediction directory (defaults to --out)")
    sub.add_parser("selftest", parents=[common], help="run the oracle checks")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "selftest": cmd_selftest,
}

USER_ERRORS = (
    UserError,
    data.DatasetError,
    data.PnmError,
    net.CheckpointError,
    net.ConfigError,
    preprocess.AceSizeError,
    metrics.MetricsError,
    OSError,
)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USER
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
