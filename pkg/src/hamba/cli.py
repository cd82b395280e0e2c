"""Command-line interface: ``hamba <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .io import DatasetFile, export_mesh, format_config, generate_dataset, layer_config, parse_config_text

log = logging.getLogger("hamba")


def _thread_limit():
    value = os.environ.get("GSSH_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(value))


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    from .model import ABLATIONS

    p.add_argument("--preset", choices=["canonical", "desk", "toy"], default=None,
                   help="model width preset (default: desk, or the checkpoint's)")
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), default=[],
                   help="disable one component; repeatable")
    p.add_argument("--checkpoint", help="trained checkpoint to load")
    p.add_argument("--seed", type=int, default=0)


def _build_model(args):
    """A model from --checkpoint, or a freshly initialized --preset/--ablate topology."""
    from .train import PRESETS, load_model
    from .model import HambaModel

    if args.checkpoint:
        model, ckpt = load_model(args.checkpoint)
        if args.ablate or args.preset:
            raise ValueError("--ablate/--preset cannot be combined with --checkpoint (topology is stored in it)")
        return model, ckpt.config
    cfg = PRESETS[args.preset or "desk"]().ablate(*args.ablate)
    return HambaModel(cfg, seed=args.seed), {"pipeline": cfg.as_dict()}


def cmd_gen_data(args) -> int:
    generate_dataset(args.count, args.seed).save(args.out)
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .train import RunConfig, train

    file_values = parse_config_text(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    overrides = {"steps": args.steps, "batch_size": args.batch_size, "seed": args.seed, "lr": args.lr,
                 "preset": args.preset, "out_dir": args.out_dir, "train_data": args.train_data,
                 "num_train": args.num_train, "data_seed": args.data_seed,
                 "ablate": tuple(args.ablate) if args.ablate else None}
    cfg = layer_config(RunConfig.desk() if args.desk else RunConfig(), file_values, overrides)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / "effective_config.txt").write_text(format_config(cfg), encoding="utf-8")
    result = train(cfg, resume=args.resume)
    print(f"trained {result.final_step} steps; checkpoint {result.checkpoint}")
    return 0


def _eval_data(args) -> DatasetFile:
    if args.data:
        return DatasetFile.load(args.data)
    return generate_dataset(args.count, args.data_seed)


def cmd_eval(args) -> int:
    from .hand.params import HandParams, HandPrediction
    from .metrics import evaluate
    from .train import predict_batches
    from .tta import tta_predict

    model, config = _build_model(args)
    data = _eval_data(args)
    recs = data.records
    gts = [HandPrediction(HandParams(r["theta"], r["beta"], r["cam"]), r["joints3d"], r["joints2d"], r["vertices"])
           for r in recs]
    if args.tta:
        model.eval()
        preds = [tta_predict(model, r["image"].astype(np.float64)) for r in recs]
    else:
        preds = [out.prediction(i) for out in predict_batches(model, recs["image"])
                 for i in range(out.theta.shape[0])]
    report = evaluate(preds, gts)
    report.config = {"model": config, "tta": args.tta, "data": args.data or f"synthetic:{args.data_seed}"}
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_infer(args) -> int:
    from .hand.synth import synth_sample
    from .train import predict_batches
    from .tta import tta_predict

    model, _ = _build_model(args)
    if args.image:
        image = np.load(args.image).astype(np.float64)
    else:
        image, _ = synth_sample(np.random.default_rng(args.seed))
    if args.tta:
        model.eval()
        pred = tta_predict(model, image)
    else:
        pred = next(predict_batches(model, image[None])).prediction(0)
    export_mesh(pred, args.out)
    print(f"wrote mesh to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import composition_case, kernel_cases, module_cases

    suites = {"kernels": kernel_cases, "modules": module_cases, "composition": lambda: [composition_case()]}
    names = args.suite or list(suites)
    failed = 0
    for name in names:
        for case in suites[name]():
            report = case.run()
            ok = report.passed(case.tol)
            failed += not ok
            print(f"{'PASS' if ok else 'FAIL'} {case.name:40s} max rel err {report.worst:.2e} (tol {case.tol:g})")
    print(f"{failed} failing case(s)")
    return 1 if failed else 0


def bench_tokens_report() -> list[dict]:
    from .model import ABLATIONS, GRID_TOKENS, PipelineConfig, count_scan_tokens, scan_flops

    rows = []
    base = PipelineConfig()
    variants = [("full", base)] + [(f"w/o {name}", base.ablate(name)) for name in sorted(ABLATIONS)]
    for label, cfg in variants:
        tokens = count_scan_tokens(cfg)
        scanned = cfg.use_mamba
        rows.append({"variant": label,
                     "scan_tokens": tokens["gss_tokens"] if scanned else 0,
                     "scan_flops_per_block": scan_flops(tokens["gss_tokens"], cfg) if scanned else 0,
                     "num_gss_blocks": cfg.num_gss_blocks})
    rows.append({"variant": "attention baseline (full grid)", "scan_tokens": GRID_TOKENS,
                 "scan_flops_per_block": scan_flops(GRID_TOKENS, base), "num_gss_blocks": base.num_gss_blocks})
    return rows


def cmd_bench_tokens(args) -> int:
    from .model import PipelineConfig, count_scan_tokens

    summary = count_scan_tokens(PipelineConfig())
    rows = bench_tokens_report()
    if args.json:
        print(json.dumps({"summary": summary, "variants": rows}, indent=2, sort_keys=True))
        return 0
    print(f"{'variant':24s} {'scan tokens':>11s} {'scan FLOPs/block':>17s}")
    for row in rows:
        print(f"{row['variant']:24s} {row['scan_tokens']:11d} {row['scan_flops_per_block']:17,d}")
    print(f"tokens per GSS scan: {summary['gss_tokens']} vs {summary['grid_tokens']} "
          f"for the full grid ({summary['reduction_pct']:.1f}% reduction)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hamba", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on synthetic data")
    p.add_argument("--config", help="key = value run-config file")
    p.add_argument("--desk", action="store_true", help="start from the single-CPU run settings")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--num-train", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--preset", choices=["canonical", "desk", "toy"])
    from .model import ABLATIONS
    p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
    p.add_argument("--out-dir")
    p.add_argument("--train-data")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute the metrics report")
    _add_model_flags(p)
    p.add_argument("--data", help="dataset file (default: freshly generated)")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--tta", action="store_true", help="average over rotation/scale variants")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict one image and write its mesh")
    _add_model_flags(p)
    p.add_argument("--image", help=".npy array of shape (256, 192, 3), normalized")
    p.add_argument("--tta", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--suite", action="append", choices=["kernels", "modules", "composition"])
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-tokens", help="scan token counts and FLOPs per decoder variant")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench_tokens)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except Exception as exc:  # runtime failures become a diagnostic and exit status 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
