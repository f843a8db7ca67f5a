"""
Командная строка движка DFM

Каждая подкоманда собирает ExperimentConfig, запускает пайплайн и печатает
сводку отчета. Коды выхода: 0 - успех, 1 - нарушены пороги при --assert,
2 - ошибка движка.
"""
import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from config import config
from schemas import PIPELINES, ExperimentConfig, MetricReport
from services.errors import ConfigError, EngineError
from services.experiment_service import ExperimentService, summarize_reports
from services.quantizer import load_codec

logger = logging.getLogger("cli")


def load_config(path: Optional[str]) -> ExperimentConfig:
    """Конфиг из файла; без --config - эталонный, если он есть, иначе значения по умолчанию"""
    if path:
        if not Path(path).exists():
            raise ConfigError(f"Config file not found: {path}")
        return ExperimentConfig.load(path)
    if Path(config.REFERENCE_CONFIG).exists():
        return ExperimentConfig.load(config.REFERENCE_CONFIG)
    return ExperimentConfig()


def _with_overrides(cfg: ExperimentConfig, pipeline: str, args: argparse.Namespace, **outputs) -> ExperimentConfig:
    update = {"pipeline": pipeline}
    if getattr(args, "seed", None) is not None:
        update["seed"] = args.seed
    out = {key: value for key, value in outputs.items() if value is not None}
    if getattr(args, "report", None):
        out["report_path"] = args.report
    elif "report_path" not in out:
        out["report_path"] = str(Path(config.REPORTS_DIR) / f"{pipeline}.json")
    update["outputs"] = cfg.outputs.model_copy(update=out)
    return cfg.model_copy(update=update)


async def _record(cfg: ExperimentConfig, report: Optional[MetricReport], error: Optional[str]) -> None:
    from database import AsyncSessionLocal, init_models

    await init_models()
    async with AsyncSessionLocal() as db:
        await ExperimentService.record_run(db, cfg, report, error)


def _run(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    try:
        report = ExperimentService.run_experiment(cfg)
    except EngineError as exc:
        logger.error(str(exc))
        if args.record:
            asyncio.run(_record(cfg, None, str(exc)))
        return 2
    if args.record:
        asyncio.run(_record(cfg, report, None))
    print(json.dumps({"pipeline": report.pipeline, "metrics": report.metrics, "violations": report.violations}, indent=2, sort_keys=True))
    if report.violations:
        for violation in report.violations:
            logger.warning(f"Threshold violated: {violation}")
        if args.assert_thresholds:
            return 1
    return 0


# --- обработчики подкоманд ---

def cmd_paths_check(args: argparse.Namespace) -> int:
    return _run(_with_overrides(load_config(args.config), "path-check", args), args)


def cmd_sample_run(args: argparse.Namespace) -> int:
    return _run(_with_overrides(load_config(args.config), "oracle-sampling", args, trace_path=args.trace), args)


def cmd_train_denoiser(args: argparse.Namespace) -> int:
    cfg = _with_overrides(load_config(args.config), "train-and-sample", args, checkpoint_path=args.out, curves_path=args.curves)
    return _run(cfg, args)


def cmd_quantize_fit(args: argparse.Namespace) -> int:
    cfg = _with_overrides(load_config(args.config), "quantizer", args, checkpoint_path=args.out, curves_path=args.curves)
    return _run(cfg, args)


def cmd_quantize_encode(args: argparse.Namespace) -> int:
    """Точки из CSV (x,y на строку) -> JSON-lines с индексами подкодбуков"""
    try:
        codec = load_codec(args.codec)
        points = np.atleast_2d(np.loadtxt(args.input, delimiter=",", ndmin=2))
        if points.shape[1] != 2:
            raise ConfigError(f"expected 2 columns in {args.input}, got {points.shape[1]}")
        indices = codec.encode_points(points)
    except (EngineError, OSError) as exc:
        logger.error(str(exc))
        return 2
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as handle:
        for row, point in zip(indices, points):
            handle.write(json.dumps({"point": point.tolist(), "indices": row.tolist()}) + "\n")
    logger.info(f"Encoded {len(points)} points -> {args.out}")
    return 0


def cmd_bench_cache(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.taus:
        taus = [float(value) for value in args.taus.split(",")]
        cfg = cfg.model_copy(update={"cache": cfg.cache.model_copy(update={"taus": taus})})
    if args.out:
        args.report = args.out
    return _run(_with_overrides(cfg, "cache-bench", args), args)


def cmd_retrieve_eval(args: argparse.Namespace) -> int:
    return _run(_with_overrides(load_config(args.config), "retrieval", args), args)


def cmd_pipeline_run(args: argparse.Namespace) -> int:
    cfg = _with_overrides(load_config(args.config), args.pipeline, args, curves_path=args.curves, trace_path=args.trace)
    return _run(cfg, args)


def cmd_report_summarize(args: argparse.Namespace) -> int:
    try:
        rows = summarize_reports(args.reports)
    except (OSError, ValueError) as exc:
        logger.error(str(exc))
        return 2
    for row in rows:
        print(f"{row['pipeline']:<18} seed={row['seed']:<10} config={row['config_hash']} violations={row['violations']}")
        for name, value in sorted(row["metrics"].items()):
            print(f"    {name:<40} {value:.6g}")
    failed = sum(row["violations"] for row in rows)
    return 1 if args.assert_thresholds and failed else 0


# --- парсер ---

def _common(parser: argparse.ArgumentParser, config_required: bool = False) -> None:
    parser.add_argument("--config", required=config_required, help="experiment config JSON")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--report", help="report JSON path")
    parser.add_argument("--record", action="store_true", help="store the run in the registry database")
    parser.add_argument("--assert", dest="assert_thresholds", action="store_true", help="exit 1 on threshold violations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfm", description=config.ENGINE_NAME)
    groups = parser.add_subparsers(dest="group", required=True)

    paths = groups.add_parser("paths", help="probability path checks").add_subparsers(dest="command", required=True)
    check = paths.add_parser("check")
    _common(check)
    check.set_defaults(handler=cmd_paths_check)

    sample = groups.add_parser("sample", help="oracle sampling").add_subparsers(dest="command", required=True)
    run = sample.add_parser("run")
    _common(run)
    run.add_argument("--trace", help="JSON-lines trace path")
    run.set_defaults(handler=cmd_sample_run)

    train = groups.add_parser("train", help="denoiser training").add_subparsers(dest="command", required=True)
    denoiser = train.add_parser("denoiser")
    _common(denoiser)
    denoiser.add_argument("--out", help="checkpoint path (safetensors)")
    denoiser.add_argument("--curves", help="CSV curves path")
    denoiser.set_defaults(handler=cmd_train_denoiser)

    quantize = groups.add_parser("quantize", help="multi-codebook quantizer").add_subparsers(dest="command", required=True)
    fit = quantize.add_parser("fit")
    _common(fit)
    fit.add_argument("--out", help="codec path (safetensors)")
    fit.add_argument("--curves", help="CSV curves path")
    fit.set_defaults(handler=cmd_quantize_fit)
    encode = quantize.add_parser("encode")
    encode.add_argument("--codec", required=True, help="codec saved by 'quantize fit --out'")
    encode.add_argument("--in", dest="input", required=True, help="points CSV")
    encode.add_argument("--out", required=True, help="tokens JSON-lines")
    encode.add_argument("--assert", dest="assert_thresholds", action="store_true")
    encode.set_defaults(handler=cmd_quantize_encode)

    bench = groups.add_parser("bench", help="benchmarks").add_subparsers(dest="command", required=True)
    cache = bench.add_parser("cache")
    _common(cache)
    cache.add_argument("--taus", help="comma-separated similarity thresholds")
    cache.add_argument("--out", help="report JSON path")
    cache.set_defaults(handler=cmd_bench_cache)

    retrieve = groups.add_parser("retrieve", help="EOS-feature retrieval").add_subparsers(dest="command", required=True)
    evaluate = retrieve.add_parser("eval")
    _common(evaluate)
    evaluate.set_defaults(handler=cmd_retrieve_eval)

    pipeline = groups.add_parser("pipeline", help="any pipeline by name").add_subparsers(dest="command", required=True)
    generic = pipeline.add_parser("run")
    generic.add_argument("pipeline", choices=PIPELINES)
    _common(generic)
    generic.add_argument("--curves", help="CSV curves path")
    generic.add_argument("--trace", help="JSON-lines trace path")
    generic.set_defaults(handler=cmd_pipeline_run)

    report = groups.add_parser("report", help="reports").add_subparsers(dest="command", required=True)
    summarize = report.add_parser("summarize")
    summarize.add_argument("reports", nargs="+")
    summarize.add_argument("--assert", dest="assert_thresholds", action="store_true")
    summarize.set_defaults(handler=cmd_report_summarize)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=config.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except EngineError as exc:
        logger.error(str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
