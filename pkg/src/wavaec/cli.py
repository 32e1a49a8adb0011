"""``wavaec`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command accepts ``--seed``, ``--config`` and ``--jobs``; a config file
holds ``key = value`` lines named after the command's long flags (dashes
or underscores), and flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path


from . import datasim, pipeline
from .audio import WavError, read_wav, write_wav
from .config import ConfigError, parse_text
from .gradsuite import run_suite
from .linear_aec import LinearAecConfig
from .losses import LogmelFrontendConfig, sisnr
from .model import AecModel, AecModelConfig, receptive_field_ms, summary
from .tensor.checkpoint import CheckpointError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", type=Path, help="key = value file of defaults for these flags")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers (default 1)")


def build_parser():
    parser = _Parser(prog="wavaec", description="Waveform-domain echo cancellation toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="render a manifest of synthetic echo mixtures")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True,
                   help="directory with target/ reference/ noise/ WAV folders")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--count", type=int, default=50, help="lines in train mode")
    p.add_argument("--mode", choices=("train", "eval"), default="train")
    p.add_argument("--ser-min", type=float, default=-20.0)
    p.add_argument("--ser-max", type=float, default=5.0)
    p.add_argument("--ser-values", type=str, default="5,0,-5,-10",
                   help="comma-separated SERs crossed with every target in eval mode; "
                        "write --ser-values=-5,-10 when the list starts with a minus")
    p.add_argument("--preamble-ms", type=float, default=0.0)
    p.add_argument("--snr-min", type=float, help="add noise with SNR in [snr-min, snr-max]")
    p.add_argument("--snr-max", type=float)
    p.add_argument("--nonlinear-drive", type=float, default=0.0,
                   help="soft-clip drive applied to the reference before the echo path")
    p.add_argument("--toy-corpus", type=int, default=0, metavar="N",
                   help="first write a synthetic corpus of N targets into --corpus")
    p.add_argument("--no-wavs", action="store_true", help="write the manifest only")

    p = sub.add_parser("train", help="train the neural canceller")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--lambda", dest="lambda_final", type=float, default=5e4,
                   help="final ASR-loss weight (default 5e4)")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--segment-ms", type=float, default=500.0)
    p.add_argument("--eval-every", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--no-desk-scale", action="store_true",
                   help="keep the ramp at 5k-20k steps regardless of --steps")
    p.add_argument("--resume", type=Path, help="training checkpoint to continue from")

    p = sub.add_parser("enhance", help="enhance one mixture")
    _common(p)
    p.add_argument("--mode", choices=("linear", "neural", "cascade"), required=True)
    p.add_argument("--mixture", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--model", type=Path, help="model checkpoint (neural/cascade)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--preamble-ms", type=float, help="echo-only lead-in length")
    p.add_argument("--adapt-preamble-only", action="store_true")
    p.add_argument("--target", type=Path, help="clean target; prints SISNRi when given")

    p = sub.add_parser("evaluate", help="score a system on a manifest")
    _common(p)
    p.add_argument("--mode", choices=pipeline.SYSTEMS, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True, help="report JSON path")
    p.add_argument("--model", type=Path)
    p.add_argument("--adapt-preamble-only", action="store_true")

    p = sub.add_parser("inspect-model", help="parameter table and receptive field")
    _common(p)
    p.add_argument("--model", type=Path, help="checkpoint (default: untrained default config)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--max-entries", type=int, default=12,
                   help="entries probed per input tensor")
    return parser


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if tok.startswith("--config="):
            return Path(tok.split("=", 1)[1])
    return None


def _apply_config(parser, argv):
    """Parse ``argv`` with defaults taken from --config, so flags still win."""
    argv = list(sys.argv[1:] if argv is None else argv)
    commands = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in commands), None)
    path = _config_path(argv)
    if command is not None and path is not None:
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        sub = commands[command]
        actions = {a.dest: a for a in sub._actions}
        for opt, action in sub._option_string_actions.items():
            actions.setdefault(opt.lstrip("-").replace("-", "_"), action)
        defaults = {}
        for key, value in parse_text(path.read_text()).items():
            action = actions.get(key.replace("-", "_"))
            if action is None or action.dest in ("config", "help"):
                raise ConfigError(f"{path}: unknown key {key!r} for {command}")
            if isinstance(action, argparse._StoreTrueAction):
                defaults[action.dest] = value.lower() in ("1", "true", "yes")
            else:
                defaults[action.dest] = action.type(value) if action.type else value
            action.required = False
        sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("wavaec: a command is required (see --help)")
    return args


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    if args.toy_corpus:
        datasim.make_toy_corpus(args.corpus, num_targets=args.toy_corpus, seed=args.seed)
    snr = None
    if args.snr_min is not None or args.snr_max is not None:
        if args.snr_min is None or args.snr_max is None:
            raise UsageError("simulate: --snr-min and --snr-max go together")
        snr = (args.snr_min, args.snr_max)
    cfg = datasim.ManifestConfig(
        mode=args.mode, count=args.count, ser_range=(args.ser_min, args.ser_max),
        ser_values=tuple(float(v) for v in args.ser_values.split(",") if v.strip()),
        preamble_ms=args.preamble_ms, snr_range=snr,
        nonlinear_drive_range=(args.nonlinear_drive, args.nonlinear_drive))
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = datasim.build_manifest(args.corpus, cfg, args.seed, args.out / "manifest.jsonl")
    corpus, records = datasim.read_manifest(manifest)
    if not args.no_wavs:
        def render(rec):
            ex = datasim.example_from_record(rec, corpus)
            datasim.write_example(ex, args.out / "wavs", rec["id"], rec)

        with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
            list(pool.map(render, records))
    print(f"wrote {len(records)} lines to {manifest}")
    return EXIT_OK


def cmd_train(args):
    cfg = pipeline.TrainConfig(
        lambda_final=args.lambda_final, total_steps=args.steps, batch_size=args.batch_size,
        segment_ms=args.segment_ms, eval_every=args.eval_every, lr=args.lr, seed=args.seed,
        desk_scale=not args.no_desk_scale)
    if args.resume:
        model = AecModel.load(args.resume)
    else:
        model = AecModel(AecModelConfig(seed=args.seed))

    def log(rec):
        if rec["step"] % 100 == 0:
            print(f"step {rec['step']:6d}  lambda {rec['lambda']:9.1f}  "
                  f"-sisnr {rec['neg_sisnr']:8.3f}  asr {rec['asr']:.3e}  "
                  f"total {rec['total']:8.3f}", flush=True)

    result = pipeline.train(model, args.manifest, cfg, out_dir=args.out,
                            resume_from=args.resume, log=log)
    model.save(args.out / "model.wck")
    last = result.records[-1] if result.records else {}
    print(f"done: {len(result.records)} steps, final total {last.get('total', float('nan')):.3f}, "
          f"model at {args.out / 'model.wck'}")
    return EXIT_OK


def _load_model(path, required):
    if path is None:
        if required:
            raise UsageError("--model is required for this mode")
        return None
    if not Path(path).is_file():
        raise FileNotFoundError(f"model checkpoint not found: {path}")
    return AecModel.load(path)


def cmd_enhance(args):
    mixture = read_wav(args.mixture).samples
    reference = read_wav(args.reference).samples
    model = _load_model(args.model, args.mode != "linear")
    lin = LinearAecConfig(adapt_preamble_only=args.adapt_preamble_only)
    out = pipeline.run_system(args.mode, mixture, reference, model, lin, args.preamble_ms)
    write_wav(args.out, out, fmt="float32")
    msg = f"wrote {args.out}"
    if args.target:
        target = read_wav(args.target).samples
        gain = sisnr(target, out) - sisnr(target, mixture)
        msg += f"\nSISNRi {gain:.2f} dB"
    print(msg)
    return EXIT_OK


def cmd_evaluate(args):
    model = _load_model(args.model, args.mode in ("neural", "cascade"))
    lin = LinearAecConfig(adapt_preamble_only=args.adapt_preamble_only)
    report = pipeline.evaluate(args.mode, args.manifest, model=model, linear_cfg=lin,
                               jobs=max(1, args.jobs))
    args.report.parent.mkdir(parents=True, exist_ok=True)
    report.write(args.report)
    print(report.table())
    return EXIT_OK


def cmd_inspect(args):
    model = _load_model(args.model, False) or AecModel(AecModelConfig(seed=args.seed))
    rows, total = summary(model)
    width = max(len(r[0]) for r in rows)
    for name, shape, count in rows:
        print(f"{name:<{width}}  {str(shape):<12} {count:>9,d}")
    cfg = model.config
    rf = receptive_field_ms(cfg)
    logmel_hop = LogmelFrontendConfig().hop_ms * LogmelFrontendConfig().subsample
    logmel_cfg = AecModelConfig(num_layers=cfg.num_layers,
                                attn_left_context=cfg.attn_left_context,
                                window_len=int(round(logmel_hop * 16)) * 2,
                                hop=int(round(logmel_hop * 16)))
    print(f"total parameters: {total:,d}")
    print(f"attention past context: {rf['attention_ms']:.1f} ms "
          f"({cfg.num_layers} layers x {cfg.attn_left_context} frames x {cfg.hop_ms} ms)")
    print(f"depthwise convolution extra context: {rf['conv_ms']:.1f} ms")
    print(f"logmel-config check (hop {logmel_cfg.hop_ms:g} ms): "
          f"{receptive_field_ms(logmel_cfg)['attention_ms']:.1f} ms")
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_suite(seed=args.seed, max_entries=args.max_entries)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERICAL if failed else EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "evaluate": cmd_evaluate,
    "inspect-model": cmd_inspect,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, IsADirectoryError, WavError, datasim.DataError,
            CheckpointError, ConfigError, json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
