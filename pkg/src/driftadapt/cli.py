"""Command-line harness.

Subcommands: pretrain, adapt, multiround, dg, ablate, fold, metrics.
Every flag can also be set through a JSON config file (--config); explicit
flags override the file, which overrides the built-in defaults. Reports go
to --out as report.csv and report.json, weights as JSON documents.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ABLATION_VARIANTS,
    RunConfig,
    RunReport,
    build_stream,
    fold_checkpoint,
    pretrain_source,
    run_ablation,
    run_ctta,
    run_dg,
    run_metrics,
    run_multiround,
)
from .layers import MlpModel
from .serialize import load_weights, save_weights


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftadapt",
        description="Continual test-time adaptation experiments on synthetic shift streams.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None, help="master seed")
    shared.add_argument("--config", type=Path, default=None, help="JSON config file")
    shared.add_argument("--out", type=Path, default=Path("runs/out"), help="output directory")
    shared.add_argument("--dl", type=int, default=None, help="low-rank bottleneck width")
    shared.add_argument("--dh", type=int, default=None, help="high-rank bottleneck width")
    shared.add_argument(
        "--hka-mode",
        choices=["normal", "inverted", "fixed"],
        default=None,
        help="uncertainty gate mode for the branch scales",
    )
    shared.add_argument("--hka-m", type=int, default=None, help="stochastic passes per gate")
    shared.add_argument("--hka-theta", type=float, default=None, help="uncertainty threshold")
    shared.add_argument("--dropout-rate", type=float, default=None, help="gate dropout rate")
    shared.add_argument("--lambda-high", type=float, default=None, help="fixed high-branch scale")
    shared.add_argument("--lambda-low", type=float, default=None, help="fixed low-branch scale")
    shared.add_argument(
        "--low-gain", type=float, default=None, help="init gain of the low branch first projection"
    )
    shared.add_argument("--alpha", type=float, default=None, help="teacher EMA coefficient")
    shared.add_argument("--lr", type=float, default=None, help="adapter learning rate")
    shared.add_argument("--rounds", type=int, default=None, help="repetitions of the sequence")
    shared.add_argument(
        "--adapt-domains", type=int, default=None, help="domains adapted on before freezing (dg)"
    )
    shared.add_argument("--dim", type=int, default=None, help="feature dimension")
    shared.add_argument("--classes", dest="class_count", type=int, default=None)
    shared.add_argument("--domains", dest="n_domains", type=int, default=None)
    shared.add_argument("--batches-per-domain", type=int, default=None)
    shared.add_argument("--batch-size", type=int, default=None)
    shared.add_argument("--severity", type=float, default=None, help="global severity multiplier")
    shared.add_argument("--epochs", type=int, default=None, help="pretraining epochs")
    shared.add_argument(
        "--hidden", type=int, nargs="+", default=None, help="hidden layer widths of the source model"
    )
    shared.add_argument("--augment-sigma", type=float, default=None)
    shared.add_argument(
        "--augment-kind", choices=["gaussian_jitter", "feature_scale"], default=None
    )

    sub.add_parser("pretrain", parents=[shared], help="train and save the source model")

    p_adapt = sub.add_parser("adapt", parents=[shared], help="run the online protocol once")
    p_adapt.add_argument("--weights", type=Path, required=True, help="source checkpoint")
    p_adapt.add_argument(
        "--method", choices=["adapt", "source"], default=None, help="adapt or frozen baseline"
    )

    p_multi = sub.add_parser("multiround", parents=[shared], help="repeat the sequence R times")
    p_multi.add_argument("--weights", type=Path, required=True)
    p_multi.add_argument("--method", choices=["adapt", "source"], default=None)

    p_dg = sub.add_parser("dg", parents=[shared], help="adapt on a prefix, test on the rest")
    p_dg.add_argument("--weights", type=Path, required=True)

    p_abl = sub.add_parser("ablate", parents=[shared], help="run the component ablation grid")
    p_abl.add_argument("--weights", type=Path, required=True)
    p_abl.add_argument(
        "--variants",
        nargs="+",
        default=list(ABLATION_VARIANTS),
        help=f"subset of {ABLATION_VARIANTS}",
    )

    p_fold = sub.add_parser("fold", parents=[shared], help="fold adapters into a plain model")
    p_fold.add_argument("--weights", type=Path, required=True, help="adapted checkpoint")

    p_met = sub.add_parser("metrics", parents=[shared], help="shift metrics for a fixed model")
    p_met.add_argument("--weights", type=Path, required=True)

    return parser


# argparse dest -> RunConfig field, where the names differ
_FLAG_TO_FIELD = {
    "lambda_high": "lambda_high",
    "lambda_low": "lambda_low",
}


def load_config(args: argparse.Namespace) -> RunConfig:
    """defaults < config file < explicit flags."""
    data: dict = {}
    if args.config is not None:
        file_cfg = json.loads(Path(args.config).read_text())
        if not isinstance(file_cfg, dict):
            raise ValueError("config file must hold a JSON object")
        data.update(file_cfg)
    fields = set(RunConfig.__dataclass_fields__)
    for key, value in vars(args).items():
        if value is None:
            continue
        field = _FLAG_TO_FIELD.get(key, key)
        if field in fields:
            data[field] = value
    return RunConfig.from_dict(data)


def _write_report(report: RunReport, out_dir: Path) -> None:
    csv_path, json_path = report.write(out_dir)
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "pretrain":
        stream = build_stream(cfg)
        clf, summary = pretrain_source(cfg, stream)
        save_weights(clf.model_, out / "source_weights.json")
        report = RunReport(
            protocol="pretrain",
            seed=cfg.seed,
            config=cfg.to_dict(),
            columns=["epoch", "loss"],
            rows=[{"epoch": i + 1, "loss": l} for i, l in enumerate(clf.loss_curve_)],
            summary=summary,
        )
        _write_report(report, out)
        print(f"wrote {out / 'source_weights.json'}")
        return 0

    if args.command == "fold":
        model = load_weights(args.weights)
        folded = fold_checkpoint(
            model, scale_high=cfg.lambda_high, scale_low=cfg.lambda_low
        )
        save_weights(folded, out / "folded_weights.json")
        print(f"wrote {out / 'folded_weights.json'}")
        return 0

    model = load_weights(args.weights)
    stream = build_stream(cfg)

    if args.command == "metrics":
        # an adapted checkpoint is analyzed through its folded form
        plain = fold_checkpoint(model, scale_high=cfg.lambda_high, scale_low=cfg.lambda_low)
        report = run_metrics(plain, stream, cfg)
        _write_report(report, out)
        return 0

    if not isinstance(model, MlpModel):
        raise SystemExit("this subcommand expects a plain (non-adapted) checkpoint")

    if args.command == "adapt":
        report = run_ctta(model, stream, cfg)
    elif args.command == "multiround":
        report = run_multiround(model, stream, cfg)
    elif args.command == "dg":
        report = run_dg(model, stream, cfg)
    elif args.command == "ablate":
        report = run_ablation(model, stream, cfg, variants=args.variants)
    else:  # pragma: no cover
        raise SystemExit(f"unknown command {args.command}")

    _write_report(report, out)
    if report.state is not None:
        save_weights(report.state.student, out / "adapted_weights.json")
        print(f"wrote {out / 'adapted_weights.json'}")
    if args.command in ("adapt", "multiround"):
        mean = report.summary["mean_error"]
        gain = report.summary["gain"]
        print(f"mean error {mean:.4f} (source {report.summary['source_mean_error']:.4f}, gain {gain:+.4f})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
