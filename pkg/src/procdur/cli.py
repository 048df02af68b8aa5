"""Command-line entry point: ``procdur {gen,train,predict,eval,gradcheck}``.

Every subcommand first writes its fully resolved configuration to stderr as
one ``config {...}`` JSON line, so a run can be repeated from its log. Stdout
carries only results (prediction lines, summaries). Failures end with a
single JSON line on stderr, ``{"error": <code>, "message": ...}``, and a
nonzero exit status.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path

from procdur.datamodel import DatasetError, load_dataset, open_stream, save_dataset
from procdur.estimator import (
    PRESETS,
    VARIANTS,
    ChannelMismatchError,
    CheckpointError,
    FusionConfig,
    OutOfOrderError,
    TrainingError,
    grad_check,
    load_checkpoint,
    open_session,
    save_checkpoint,
    train,
)
from procdur.evalbench import run_eval
from procdur.synthgen import SynthSpec, generate_traced, write_traces

SEED_ENV = "PROCDUR_SEED"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_CONFIG = 5

log = logging.getLogger("procdur")


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int):
        super().__init__(message)
        self.code = code
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would print usage over several lines
        raise CliError("usage", message, EXIT_USAGE)


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError("config", f"{SEED_ENV} must be an integer, got {raw!r}", EXIT_CONFIG) from None


def _emit_config(command: str, config: dict) -> None:
    line = json.dumps({"command": command, **config}, sort_keys=True)
    print(f"config {line}", file=sys.stderr, flush=True)


def _variant_list(values: Sequence[str]) -> list[str]:
    out = []
    for v in values:
        out += [p.strip().lower() for p in v.split(",") if p.strip()]
    bad = [v for v in out if v not in VARIANTS]
    if bad:
        raise CliError("config", f"unknown variant(s) {bad}; choose from {sorted(VARIANTS)}", EXIT_CONFIG)
    return out


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--enc-image", type=int)
    p.add_argument("--enc-tools", type=int)
    p.add_argument("--enc-device", type=int)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--no-ptype", action="store_true", help="do not feed the procedure-type one-hot")
    p.add_argument(
        "--raw", action="append", default=[], choices=["image", "tools", "device"],
        help="feed this modality to the recurrent cell without an encoder (repeatable)",
    )


def _config_for(args: argparse.Namespace, variant: str, seed: int, records) -> FusionConfig:
    overrides = {
        k: getattr(args, k)
        for k in ("epochs", "lr", "hidden", "enc_image", "enc_tools", "enc_device", "clip_norm")
        if getattr(args, k) is not None
    }
    if args.no_ptype:
        overrides["use_ptype"] = False
    raw = [m for m in args.raw if m in VARIANTS[variant]]
    if raw:
        overrides["raw_modalities"] = tuple(raw)
    with_image = [r.d_img for r in records if r.channels["image"]]
    if "image" in VARIANTS[variant] and with_image:
        overrides["d_img"] = with_image[0]
    return FusionConfig.for_variant(variant, preset=args.preset, seed=seed, **overrides)


# --------------------------------------------------------------------------
# subcommands


def _cmd_gen(args: argparse.Namespace) -> int:
    try:
        spec_obj = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError("missing_file", f"{args.spec}: {exc.strerror}", EXIT_DATA) from None
    except ValueError as exc:
        raise CliError("config", f"{args.spec}: invalid JSON ({exc})", EXIT_CONFIG) from None
    if not isinstance(spec_obj, dict):
        raise CliError("config", f"{args.spec}: spec must be a JSON object", EXIT_CONFIG)
    if "seed" not in spec_obj:
        spec_obj["seed"] = _default_seed()
    spec = SynthSpec.from_dict(spec_obj)
    _emit_config("gen", {"spec": spec.to_dict(), "out": args.out})
    records, traces = generate_traced(spec)
    out = Path(args.out)
    save_dataset(records, out)
    write_traces(traces, out / "traces.json", spec)
    print(f"wrote {len(records)} procedures to {out}")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    records = load_dataset(args.data)
    seed = _default_seed() if args.seed is None else args.seed
    cfg = _config_for(args, args.variant, seed, records)
    _emit_config("train", {"data": args.data, "out": args.out, "fusion": cfg.to_dict(), "variant": cfg.variant})
    model = train(records, cfg, on_epoch=lambda e, loss: log.info("epoch %d loss %.6f", e, loss))
    save_checkpoint(model, args.out)
    final = model.train_log[-1] if model.train_log else float("nan")
    print(f"trained {cfg.variant} on {len(records)} procedures; final loss {final:.6f}; wrote {args.out}")
    return EXIT_OK


def _cmd_predict(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.ckpt)
    _emit_config("predict", {"ckpt": args.ckpt, "input": args.input, "fusion": model.config.to_dict()})
    if args.input == "-":
        return _predict_stream(model, sys.stdin, "<stdin>")
    try:
        fh = open(args.input, encoding="utf-8", newline="")
    except OSError as exc:
        raise CliError("missing_file", f"{args.input}: {exc.strerror}", EXIT_DATA) from None
    with fh:
        return _predict_stream(model, fh, args.input)


def _predict_stream(model, lines, source: str) -> int:
    header, frames = open_stream(lines, source)
    session = open_session(model, header["ptype"])
    out = sys.stdout
    for frame in frames:
        p = session.feed(frame)
        out.write(f"{p.i}\t{p.y!r}\t{p.n_hat!r}\t{p.remaining!r}\n")
        out.flush()
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    records = load_dataset(args.data)
    seed = _default_seed() if args.seed is None else args.seed
    variants = _variant_list(args.variants)
    configs = {v: _config_for(args, v, seed, records) for v in variants}
    _emit_config(
        "eval",
        {"data": args.data, "report": args.report, "seed": seed,
         "configs": {k: c.to_dict() for k, c in configs.items()}},
    )
    report = run_eval(records, configs, seed)
    txt, js = report.write(args.report)
    for m in report.methods:
        print(f"{m}\tmean_relative_error\t{report.mean_relative_error(m)!r}")
    print(f"wrote {txt} and {js}")
    return EXIT_OK


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    variants = _variant_list(args.variants)
    seed0 = _default_seed() if args.seed is None else args.seed
    _emit_config(
        "gradcheck",
        {"variants": variants, "seeds": args.seeds, "seed": seed0, "seq_len": args.seq_len,
         "hidden": args.hidden, "tolerance": args.tolerance},
    )
    small = dict(hidden=args.hidden, enc_image=4, enc_tools=3, enc_device=3, d_img=6)
    worst = 0.0
    failed = []
    for v in variants:
        for s in range(seed0, seed0 + args.seeds):
            report = grad_check(FusionConfig.for_variant(v, **small), s, args.seq_len, args.tolerance)
            w = report.worst
            worst = max(worst, w.rel_error)
            verdict = "PASS" if report.passed else "FAIL"
            print(f"{v}\tseed={s}\t{verdict}\tmax_rel_error={w.rel_error:.3e}\tat={w.name}{list(w.index)}")
            if not report.passed:
                failed.append(f"{v}/seed={s}")
                log.info("%s", report.to_table())
    if failed:
        raise CliError("gradcheck_failed", f"max relative error {worst:.3e} in {failed}", EXIT_FAILURE)
    print(f"all {len(variants) * args.seeds} checks passed; max relative error {worst:.3e}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="procdur", description="Procedure duration prediction from 1 Hz multimodal streams.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON file with generator settings")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train one network variant on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", required=True, type=str.lower, choices=sorted(VARIANTS))
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, help=f"default: ${SEED_ENV} or 0")
    _add_model_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="stream predictions for one procedure, one line per frame")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="procedure file, or - for standard input")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="4-fold evaluation against the naive and per-type baselines")
    p.add_argument("--data", required=True)
    p.add_argument("--variants", required=True, nargs="+", help="e.g. d vtd, or d,vtd")
    p.add_argument("--seed", type=int, help=f"default: ${SEED_ENV} or 0")
    p.add_argument("--report", required=True, help="report path; .txt and .json are written")
    _add_model_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="compare BPTT gradients with finite differences")
    p.add_argument("--variants", nargs="+", default=sorted(VARIANTS))
    p.add_argument("--seeds", type=int, default=2, help="configurations per variant")
    p.add_argument("--seed", type=int, help=f"first seed; default: ${SEED_ENV} or 0")
    p.add_argument("--seq-len", type=int, default=12)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def _fail(code: str, message: str, status: int) -> int:
    one_line = " ".join(str(message).split())
    print(json.dumps({"error": code, "message": one_line}), file=sys.stderr, flush=True)
    return status


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, str(exc), exc.status)
    except ChannelMismatchError as exc:
        return _fail("channel_mismatch", str(exc), EXIT_CONFIG)
    except DatasetError as exc:
        return _fail("dataset", str(exc), EXIT_DATA)
    except CheckpointError as exc:
        return _fail("checkpoint", str(exc), EXIT_CHECKPOINT)
    except OutOfOrderError as exc:
        return _fail("out_of_order", str(exc), EXIT_DATA)
    except TrainingError as exc:
        return _fail("training", str(exc), EXIT_FAILURE)
    except FloatingPointError as exc:
        return _fail("non_finite", str(exc), EXIT_FAILURE)
    except ValueError as exc:  # config violations from FusionConfig / SynthSpec validation
        return _fail("config", str(exc), EXIT_CONFIG)
    except BrokenPipeError:
        # downstream reader went away (e.g. `| head`); silence the flush at exit
        devnull = os.open(os.devnull, os.O_WRONLY)
        os.dup2(devnull, sys.stdout.fileno())
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
