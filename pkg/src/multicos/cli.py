"""Command-line entry points: dataset synthesis, training, evaluation,
ablation tables, gradient verification, and single-image inference.

Configuration comes from an optional JSON file plus flag overrides, and
flags win. Every command is deterministic under a fixed seed; output lines
carry no timestamps, so identical invocations produce identical bytes.
Exit codes: 0 success, 1 configuration or validation error, 2 I/O error,
3 verification failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import gradcheck as gc
from . import synth
from .config import RunConfig
from .errors import ConfigError, MalformedHeader, MissingModality
from .metrics import evaluate_all
from .train import (ABLATION_TABLES, Trainer, build_models, eval_threads,
                    evaluate_model, format_table, load_state, metric_record,
                    predict_masks, run_ablation)


class _Parser(argparse.ArgumentParser):
    """argparse normally exits on bad usage; route that through the
    config-error path so the exit code contract holds."""

    def error(self, message):
        raise ConfigError(message)


def _parse_widths(text):
    try:
        return tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise ConfigError(f"widths must be comma-separated ints: {text!r}")


_INT_FIELDS = ("image_size", "d_model", "d_inner", "d_conv", "n_state",
               "knowledge_channels", "batch_size", "steps", "seed",
               "log_every")
_BOOL_FIELDS = ("rgb_only", "enable_lsfm", "enable_ffm", "enable_ssfm",
                "enable_cssm", "enable_gate", "enable_scan_blocks",
                "embed_u", "enable_ckler", "enable_injection", "pseudo_aux",
                "per_direction_params", "per_channel_gate")


def _add_config_flags(p):
    p.add_argument("--config", default=None,
                   help="JSON config file; flags override its values")
    for name in _INT_FIELDS:
        p.add_argument("--" + name.replace("_", "-"), type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--widths", type=_parse_widths, default=None,
                   help="five comma-separated channel counts")
    p.add_argument("--discretization", choices=("taylor", "zoh"),
                   default=None)
    p.add_argument("--scan-mode", choices=("sequential", "chunked"),
                   default=None)
    for name in _BOOL_FIELDS:
        p.add_argument("--" + name.replace("_", "-"), default=None,
                       action=argparse.BooleanOptionalAction)


def _config_from(args):
    cfg = RunConfig() if args.config is None else RunConfig.load(args.config)
    overrides = {}
    for name in _INT_FIELDS + _BOOL_FIELDS + ("lr", "widths",
                                              "discretization", "scan_mode"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "data", None) is not None:
        overrides["data_root"] = args.data
    return cfg.replace(**overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args):
    synth.generate_dataset(args.out, args.n, args.n_translation,
                           size=args.size, kappa=args.kappa, snr=args.snr,
                           seed=args.seed, misalign_crop=args.misalign_crop,
                           translation_snr=args.translation_snr)
    print(f"wrote {args.n} cos and {args.n_translation} translation "
          f"samples under {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    cfg = _config_from(args)
    data = synth.load_split(args.data, "cos")
    translation = (synth.load_split(args.data, "translation")
                   if cfg.enable_ckler else None)
    trainer = Trainer(cfg, data, translation)
    if args.resume is not None:
        trainer.load(args.resume)
        print(f"resumed from {args.resume} at step {trainer.step_count}")
    log_f = open(args.log, "a" if args.resume else "w") if args.log else None
    try:
        def log_fn(rec):
            if log_f is not None:
                log_f.write(json.dumps(rec) + "\n")
            if rec["step"] % cfg.log_every == 0:
                print(f"step {rec['step']:6d}  l_s {rec['l_s']:.6f}  "
                      f"l_l {rec['l_l']:.6f}  l_t {rec['l_t']:.6f}")

        trainer.run(log_fn=log_fn)
    finally:
        if log_f is not None:
            log_f.close()
    trainer.save(args.checkpoint)
    print(f"saved {args.checkpoint} at step {trainer.step_count}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _load_pred_dir(pred_dir, n):
    preds = []
    for i in range(n):
        preds.append(synth.read_pgm(os.path.join(pred_dir, f"{i:05d}.pgm")))
    return np.stack(preds)


def cmd_eval(args):
    cfg = _config_from(args)
    data = synth.load_split(args.data, "cos")
    if args.pred_dir is not None:
        preds = _load_pred_dir(args.pred_dir, data["mask"].shape[0])
        scores = evaluate_all(preds, data["mask"])
    elif args.checkpoint is not None:
        model, translator = build_models(cfg)
        load_state(args.checkpoint, model, translator=translator)
        scores = evaluate_model(
            model, data, translator=translator,
            inject=cfg.enable_injection, rgb_only=cfg.rgb_only,
            pseudo_aux=cfg.pseudo_aux, batch=args.batch,
            threads=eval_threads())
    else:
        raise ConfigError("eval needs --checkpoint or --pred-dir")
    rec = metric_record(scores, dataset="cos")
    print(format_table([("cos", rec)]))
    print(json.dumps(rec))
    if args.json is not None:
        with open(args.json, "w") as f:
            json.dump(rec, f, indent=2)
            f.write("\n")
    return 0


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args):
    cfg = _config_from(args)
    train_data = synth.load_split(args.train_data, "cos")
    test_root = args.test_data if args.test_data is not None else args.train_data
    test_data = synth.load_split(test_root, "cos")
    rows = ABLATION_TABLES[args.table](cfg)
    translation = None
    if any(row_cfg.enable_ckler for _, row_cfg in rows):
        translation = synth.load_split(args.train_data, "translation")
    out = run_ablation(cfg, train_data, test_data, rows=rows,
                       steps=args.steps, translation=translation)
    print(f"table: {args.table}")
    print(format_table(out))
    if args.json is not None:
        with open(args.json, "w") as f:
            json.dump([rec for _, rec in out], f, indent=2)
            f.write("\n")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args):
    only = args.only.split(",") if args.only else None
    results = gc.run_all(corrupt=args.corrupt, only=only, seed=args.seed)
    failed = 0
    for r in results:
        state = "pass" if r["passed"] else "FAIL"
        print(f"{r['block']:28s} {state}  max_error={r['max_error']:.3e}  "
              f"tol={r['tol']:.0e}")
        failed += 0 if r["passed"] else 1
    if failed:
        print(f"{failed} block(s) failed")
        return 3
    print(f"all {len(results)} blocks passed")
    return 0


# ---------------------------------------------------------------------------
# infer


def cmd_infer(args):
    cfg = _config_from(args)
    model, translator = build_models(cfg)
    load_state(args.checkpoint, model, translator=translator)
    rgb = synth.read_ppm(args.rgb)[None]
    if args.aux is not None:
        aux = synth.read_pgm(args.aux)[None]
        pred = predict_masks(model, rgb, aux=aux, translator=translator,
                             inject=cfg.enable_injection,
                             pseudo_aux=cfg.pseudo_aux, batch=1)
    elif cfg.rgb_only:
        pred = predict_masks(model, rgb, batch=1)
    elif cfg.enable_ckler:
        # no aux on disk: the translator's reconstruction stands in
        pred = predict_masks(model, rgb, translator=translator,
                             inject=cfg.enable_injection, pseudo_aux=True,
                             batch=1)
    else:
        raise MissingModality(
            "dual mode needs --aux (or a translator-enabled config)")
    synth.write_pgm(args.out, pred[0])
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def _build_parser():
    parser = _Parser(prog="multicos",
                     description="camouflaged segmentation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a paired dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--n-translation", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--kappa", type=float, default=1.0)
    p.add_argument("--snr", type=float, default=10.0)
    p.add_argument("--translation-snr", type=float, default=None,
                   help="snr for the translation pairs (default: --snr)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--misalign-crop", type=float, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default="checkpoint.bsfk")
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    p.add_argument("--log", default=None, help="JSONL loss log path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--pred-dir", default=None,
                   help="directory of NNNNN.pgm predictions to score "
                        "instead of running the model")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--json", default=None, help="write the record here")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score a table of variants")
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", default=None,
                   help="defaults to --train-data")
    p.add_argument("--table", choices=sorted(ABLATION_TABLES),
                   default="fusion")
    p.add_argument("--json", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", default=None,
                   help="comma-separated block names")
    p.add_argument("--corrupt", default=None,
                   help="self-test: skew the named block's adjoint")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("infer", help="predict a mask for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True, help="input PPM")
    p.add_argument("--aux", default=None, help="auxiliary PGM")
    p.add_argument("--out", required=True, help="output mask PGM")
    _add_config_flags(p)
    p.set_defaults(func=cmd_infer)

    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except MalformedHeader as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
