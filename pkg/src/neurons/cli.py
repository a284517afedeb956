"""Command-line entry point.

Subcommands mirror the pipeline stages (prepare-data, train-brain,
train-decoupler, infer, eval) plus `run` for the whole chain and `report`
to re-print an existing report. Exit codes: 0 ok, 2 configuration error,
3 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import ConfigError, NeuronsError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (defaults apply when omitted)")
    p.add_argument("--spec", dest="config", help=argparse.SUPPRESS)  # legacy alias
    p.add_argument("--seed", type=int, help="override the config seed")


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_prepare_data(args) -> int:
    from .dataio import save_dataset
    from .synthetic import generate_synthetic_dataset

    cfg = _resolve_config(args)
    dataset = generate_synthetic_dataset(cfg)
    save_dataset(dataset, Path(args.out))
    print(f"wrote {len(dataset)} clips to {args.out}")
    return EXIT_OK


def _cmd_train_brain(args) -> int:
    from .brain import train_brain_model
    from .dataio import dataset_codecs, load_dataset

    cfg = _resolve_config(args)
    dataset = load_dataset(Path(args.data), *dataset_codecs(cfg))
    result = train_brain_model(dataset, cfg, out_path=Path(args.out),
                               resume_from=Path(args.resume) if args.resume else None)
    final = result.history[-1]
    print(f"brain checkpoint: {args.out} (epoch {final['epoch']}, "
          f"total loss {final['total']:.4f})")
    return EXIT_OK


def _cmd_train_decoupler(args) -> int:
    from .dataio import dataset_codecs, load_dataset
    from .decoupler import train_decoupler

    cfg = _resolve_config(args)
    dataset = load_dataset(Path(args.data), *dataset_codecs(cfg))
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".log.csv")
    result = train_decoupler(dataset, cfg, Path(args.brain), out_path=Path(args.out),
                             log_path=log_path,
                             resume_from=Path(args.resume) if args.resume else None)
    final = result.history[-1]
    print(f"decoupler checkpoint: {args.out} (epoch {final['epoch']}, "
          f"seg {final['seg']:.4f} cls {final['cls']:.4f} "
          f"txt {final['txt']:.4f} rec {final['rec']:.4f}); log: {log_path}")
    return EXIT_OK


def _cmd_infer(args) -> int:
    from .aggregator import Reconstructor, save_reconstruction
    from .dataio import dataset_codecs, load_dataset
    from .rng import stream_seed

    cfg = _resolve_config(args)
    if args.backend:
        cfg.infer.backend = args.backend
    dataset = load_dataset(Path(args.data), *dataset_codecs(cfg))
    recon = Reconstructor.from_checkpoints(Path(args.brain), Path(args.decoupler), cfg)
    samples = dataset.samples[:args.limit] if args.limit else dataset.samples
    for i, sample in enumerate(samples):
        seed = stream_seed(cfg.seed, "infer", i)
        video, bundle = recon.reconstruct(sample.fmri, seed)
        save_reconstruction(Path(args.out), str(sample.fmri.clip_id), video, bundle,
                            cfg, seed)
    print(f"reconstructed {len(samples)} sample(s) into {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .report import emit_report, render_table

    cfg = _resolve_config(args)
    prefix = Path(args.out).with_suffix("")
    report, paths = emit_report(Path(args.run), Path(args.gt), prefix, cfg)
    print(render_table(report), end="")
    print(f"wrote {paths['csv']}, {paths['txt']}, {paths['json']}")
    return EXIT_OK


def _cmd_run(args) -> int:
    from .pipeline import run_pipeline
    from .report import render_table
    import json

    cfg = _resolve_config(args)
    run_pipeline(cfg, Path(args.out), resume=not args.no_resume)
    report_json = Path(args.out) / "report.json"
    raw = json.loads(report_json.read_text())
    from .report import MetricReport
    report = MetricReport(sample_count=raw["sample_count"], means=raw["means"],
                          stds=raw["stds"], rows=raw["rows"],
                          excluded=raw.get("excluded", []))
    print(render_table(report), end="")
    print(f"run complete; manifest: {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def _cmd_report(args) -> int:
    run_dir = Path(args.run)
    txt = run_dir / "report.txt"
    if txt.exists():
        print(txt.read_text(), end="")
        return EXIT_OK
    raise NeuronsError(f"no report.txt under {run_dir}; run `neurons eval` first")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neurons",
        description="fMRI-to-video reconstruction via decoupled sub-task heads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="generate the synthetic dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.set_defaults(fn=_cmd_prepare_data)

    p = sub.add_parser("train-brain", help="pretrain the fMRI backbone")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=_cmd_train_brain)

    p = sub.add_parser("train-decoupler", help="train the four task heads")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--brain", required=True, help="brain checkpoint")
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=_cmd_train_decoupler)

    p = sub.add_parser("infer", help="reconstruct videos from fMRI samples")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--brain", required=True)
    p.add_argument("--decoupler", required=True)
    p.add_argument("--backend", choices=None, default=None,
                   help="stub, external, or module.path:factory")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, help="reconstruct only the first N samples")
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("eval", help="score a reconstruction run against ground truth")
    _add_config_args(p)
    p.add_argument("--run", required=True, help="reconstruction output directory")
    p.add_argument("--gt", required=True, help="ground-truth dataset directory")
    p.add_argument("--out", required=True, help="report path prefix (writes .csv/.txt/.json)")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("run", help="full pipeline: data, train, infer, eval")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--no-resume", action="store_true",
                   help="ignore an existing manifest and redo every stage")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("report", help="print the report table from a run directory")
    p.add_argument("--run", required=True)
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NeuronsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
