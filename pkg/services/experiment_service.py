"""
Оркестрация экспериментов

run_experiment выполняет именованный пайплайн, собирает MetricReport и
пишет его на диск. Любая ошибка компонента всплывает как StageError с
именем упавшей стадии.
"""
import csv
import logging
import math
import time
import uuid
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from sqlalchemy import select
from sqlalchemy.ext.asyncio import AsyncSession

from models import ExperimentRun
from schemas import PIPELINES, ExperimentConfig, MetricReport, ScheduleSpec
from services.cache import REFERENCE_SPEEDUP, CachedDenoiser, speedup_report
from services.corpus import (
    TokenLayout,
    make_enumerable_target,
    make_paired_retrieval_corpus,
    make_signal_corpus,
    make_text_corpus,
)
from services.denoiser import ModelDenoiser, OracleDenoiser, TrainableDenoiser, load_checkpoint, save_checkpoint
from services.errors import ConfigError, StageError
from services.metrics import empirical_distribution, empirical_sparse, tv_distance, tv_sparse
from services.paths import (
    Segment,
    SequenceDistribution,
    TokenSequence,
    beta_at,
    beta_dot,
    build_schedule,
    build_vocabulary,
    conditional_table,
    random_unit_embeddings,
    sample_conditional,
)
from services.quantizer import (
    REFERENCE_CODEBOOKS,
    Codebook,
    compare_head_modes,
    distortion,
    fit_codebook_kmeans,
    fit_toy_modality,
    gaussian_mixture_points,
    kmeans_oracle,
    quantize_batch,
    save_codec,
)
from services.retrieval import evaluate_retrieval, finetune_retrieval
from services.sampler import dynamic_length_generate, generate_batch, write_trace_jsonl
from services.seeding import substream, substream_seed, torch_generator
from services.training import TrainingService, compare_with_oracle, synthetic_gradnorm_problem, write_training_log
from services.velocity import rate_matrix

logger = logging.getLogger(__name__)

# Сглаживание кривой KL(оракул || модель) по точкам оценки и допуск на шум
KL_SMOOTHING_WINDOW = 5
KL_NOISE_BAND = 0.01


# Пороги приемки: (метрика, сравнение, значение)
THRESHOLDS: Dict[str, List[Tuple[str, str, float]]] = {
    "path-check": [
        ("max_row_sum_error", "<=", 1e-9),
        ("max_sample_tv", "<", 0.02),
        ("max_beta_dot_rel_error", "<=", 1e-5),
        ("rate_violations", "==", 0.0),
    ],
    "oracle-sampling": [
        ("tv_to_target", "<", 0.05),
        ("tv_doubling_increase", "<=", 0.01),
    ],
    "train-and-sample": [
        ("ce_gap_to_oracle", "<=", 0.1),
        ("tv_to_target", "<", 0.15),
    ],
    "dynamic-length": [
        ("length_is_block_multiple", "==", 1.0),
        ("settled_matches_expected", "==", 1.0),
        ("tiny_threshold_length_is_one_block", "==", 1.0),
    ],
    "quantizer": [
        ("quantize_mismatches", "==", 0.0),
        ("distortion_monotone", "==", 1.0),
        ("mse_ratio_to_kmeans", "<=", 1.5),
        ("usage_entropy", ">", 0.0),
    ],
    "cache-bench": [
        ("forced_recompute_identical", "==", 1.0),
        ("wall_ratio", ">", 1.0),
        ("recompute_fraction", "<", 1.0),
        ("marginal_drift_within_bound", "==", 1.0),
    ],
    "retrieval": [
        ("mrr_ratio_to_random", ">", 3.0),
    ],
    "gradnorm": [
        ("final_norm_ratio_in_band", "==", 1.0),
        ("lambda_sum_error", "<=", 1e-9),
        ("min_lambda", ">", 0.0),
    ],
}

_COMPARE: Dict[str, Callable[[float, float], bool]] = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    "==": lambda a, b: a == b,
}


def check_thresholds(pipeline: str, metrics: Dict[str, float], timings: Optional[Dict[str, float]] = None) -> List[str]:
    """Список нарушенных порогов приемки; пороги по времени смотрят в timings"""
    metrics = {**(timings or {}), **metrics}
    violations = []
    for name, op, bound in THRESHOLDS.get(pipeline, []):
        if name not in metrics:
            violations.append(f"{name}: missing")
        elif not _COMPARE[op](metrics[name], bound):
            violations.append(f"{name}: {metrics[name]:.6g} not {op} {bound:g}")
    return violations


@contextmanager
def stage(name: str):
    """Оборачивает ошибки компонента в StageError с именем стадии"""
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        logger.error(f"Stage '{name}' failed: {exc}")
        raise StageError(name, exc) from exc


def _write_curves(rows: List[Dict[str, float]], path: Optional[str]) -> None:
    if not path or not rows:
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


class ExperimentService:
    """Пайплайны экспериментов"""

    @staticmethod
    def run_experiment(cfg: ExperimentConfig) -> MetricReport:
        """Выполнение пайплайна cfg.pipeline, отчет пишется в cfg.outputs.report_path"""
        if cfg.pipeline not in PIPELINES:
            raise ConfigError(f"Unknown pipeline '{cfg.pipeline}'; expected one of {', '.join(PIPELINES)}")
        runner = {
            "path-check": ExperimentService._path_check,
            "oracle-sampling": ExperimentService._oracle_sampling,
            "train-and-sample": ExperimentService._train_and_sample,
            "dynamic-length": ExperimentService._dynamic_length,
            "quantizer": ExperimentService._quantizer,
            "cache-bench": ExperimentService._cache_bench,
            "retrieval": ExperimentService._retrieval,
            "gradnorm": ExperimentService._gradnorm,
        }[cfg.pipeline]
        logger.info(f"Running pipeline '{cfg.pipeline}' (seed={cfg.seed}, config={cfg.config_hash()[:12]})")
        started = time.perf_counter()
        metrics, timings, reference = runner(cfg)
        timings["total_s"] = time.perf_counter() - started
        report = MetricReport(
            pipeline=cfg.pipeline,
            metrics=metrics,
            timings=timings,
            reference=reference,
            violations=check_thresholds(cfg.pipeline, metrics, timings),
            config_hash=cfg.config_hash(),
            seed=cfg.seed,
        )
        if cfg.outputs.report_path:
            Path(cfg.outputs.report_path).parent.mkdir(parents=True, exist_ok=True)
            Path(cfg.outputs.report_path).write_text(report.to_json(), encoding="utf-8")
        logger.info(f"Pipeline '{cfg.pipeline}' finished with {len(report.violations)} violation(s)")
        return report

    # --- общие строительные блоки ---

    @staticmethod
    def _text_setup(cfg: ExperimentConfig, corpus_spec=None):
        """Раскладка, словарь, расписание и корпус текстовой задачи"""
        corpus_spec = corpus_spec or cfg.corpus
        layout = TokenLayout.build(cfg.vocabulary, corpus_spec)
        embeddings = random_unit_embeddings(
            layout.size, cfg.vocabulary.embedding_dim, np.random.default_rng(cfg.vocabulary.embedding_seed)
        )
        vocab = build_vocabulary(cfg.vocabulary, embeddings)
        schedule = build_schedule(cfg.schedule, vocab)
        corpus = make_text_corpus(corpus_spec, layout, substream(cfg.seed, "corpus"))
        return layout, vocab, schedule, corpus

    @staticmethod
    def _new_model(cfg: ExperimentConfig, vocab_size: int, codec=None) -> TrainableDenoiser:
        torch.manual_seed(substream_seed(cfg.seed, "init"))
        return TrainableDenoiser(cfg.model, vocab_size=vocab_size, drop_token_id=2, codec=codec, eos_id=cfg.vocabulary.eos_id)

    @staticmethod
    def _train(cfg: ExperimentConfig, model, schedule, corpora, points=None, on_step=None) -> TrainingService:
        service = TrainingService(model, schedule, cfg.training)
        service.fit(corpora, cfg.training.steps, substream(cfg.seed, "train"), points, on_step)
        if cfg.outputs.checkpoint_path:
            save_checkpoint(model, cfg.outputs.checkpoint_path)
        return service

    # --- пайплайны ---

    @staticmethod
    def _path_check(cfg: ExperimentConfig):
        metrics: Dict[str, float] = {}
        with stage("vocabulary"):
            vocab = build_vocabulary(cfg.vocabulary)
            schedules = {
                kind: build_schedule(ScheduleSpec(**{**cfg.schedule.model_dump(), "kind": kind}), vocab)
                for kind in ("mixture", "metric")
            }
        with stage("row-sums"):
            grid = np.linspace(0.0, 1.0, cfg.oracle.t_grid)
            errors = [
                float(np.abs(conditional_table(schedule, t).sum(axis=0) - 1.0).max())
                for schedule in schedules.values()
                for t in grid
            ]
            metrics["max_row_sum_error"] = max(errors)
            kappa = schedules["mixture"]
            metrics["kappa_endpoints_exact"] = float(
                conditional_table(kappa, 0.0)[:, 0].tolist() == kappa.base.tolist()
                and np.array_equal(conditional_table(kappa, 1.0), np.eye(vocab.size))
            )
        with stage("sampling"):
            rng = substream(cfg.seed, "path-samples")
            n = cfg.oracle.path_samples
            worst = 0.0
            for schedule in schedules.values():
                for t in (0.25, 0.5, 0.75):
                    # одна длинная последовательность: координаты независимы
                    x1 = TokenSequence(tokens=np.full(n, vocab.size - 1), segments=np.full(n, Segment.RESPONSE))
                    samples = sample_conditional(schedule, x1, t, rng).tokens
                    empirical = np.bincount(samples, minlength=vocab.size) / n
                    worst = max(worst, tv_distance(empirical, conditional_table(schedule, t)[:, vocab.size - 1]))
            metrics["max_sample_tv"] = worst
        with stage("velocity"):
            metric = schedules["metric"]
            rel_errors = []
            for t in np.linspace(0.05, 0.95, 19):
                step = 1e-6
                numeric = (beta_at(metric, t + step).value - beta_at(metric, t - step).value) / (2 * step)
                rel_errors.append(abs(beta_dot(metric, t) - numeric) / abs(numeric))
            metrics["max_beta_dot_rel_error"] = float(max(rel_errors))
            d = metric.distances
            violations = 0
            for t in (0.1, 0.5, 0.9):
                for x1 in range(vocab.size):
                    current = np.arange(vocab.size)
                    rates = rate_matrix(metric, current, np.full(vocab.size, x1), t)
                    violations += int((rates < 0).sum())
                    not_closer = d[:, x1][None, :] >= d[current, x1][:, None]
                    violations += int((rates[not_closer] != 0).sum())
            metrics["rate_violations"] = float(violations)
        return metrics, {}, {}

    @staticmethod
    def _oracle_sampling(cfg: ExperimentConfig):
        metrics: Dict[str, float] = {}
        timings: Dict[str, float] = {}
        with stage("target"):
            vocab = build_vocabulary(cfg.vocabulary)
            schedule = build_schedule(cfg.schedule, vocab)
            prompt, q = make_enumerable_target(
                vocab.size, cfg.oracle.instruction_length, cfg.oracle.response_length,
                cfg.oracle.support_size, substream(cfg.seed, "corpus"),
            )
            n_instr = cfg.oracle.instruction_length
            target = SequenceDistribution(support=q.support[:, n_instr:], weights=q.weights).dense(vocab.size)
            denoiser = OracleDenoiser(q, schedule)
        tvs = {}
        for label, steps in (("base", cfg.oracle.step_count), ("doubled", 2 * cfg.oracle.step_count)):
            with stage(f"sampling-{label}"):
                spec = cfg.sampler.model_copy(update={"step_count": steps})
                started = time.perf_counter()
                trace = generate_batch(denoiser, prompt, spec, schedule, substream_seed(cfg.seed, "sample"), cfg.oracle.n_runs)
                timings[f"sampling_{label}_s"] = time.perf_counter() - started
                tvs[label] = tv_distance(empirical_distribution(trace.responses(), vocab.size), target)
                if label == "base" and cfg.outputs.trace_path:
                    write_trace_jsonl(trace, cfg.outputs.trace_path)
        metrics["tv_to_target"] = tvs["base"]
        metrics["tv_to_target_doubled"] = tvs["doubled"]
        metrics["tv_doubling_increase"] = max(tvs["doubled"] - tvs["base"], 0.0)
        return metrics, timings, {}

    @staticmethod
    def _sample_tv(cfg: ExperimentConfig, denoiser, corpus, schedule, sessions: int) -> float:
        """Средний по инструкциям TV между сэмплами ответа и q(. | инструкция)"""
        values = []
        for u in range(len(corpus.instructions)):
            trace = generate_batch(denoiser, corpus.prompt(u), cfg.sampler, schedule, substream_seed(cfg.seed, f"sample-{u}"), sessions)
            values.append(tv_sparse(empirical_sparse(trace.responses()), corpus.response_distribution(u)))
        return float(np.mean(values))

    @staticmethod
    def _train_and_sample(cfg: ExperimentConfig):
        metrics: Dict[str, float] = {}
        timings: Dict[str, float] = {}
        curves: List[Dict[str, float]] = []
        with stage("corpus"):
            layout, vocab, schedule, corpus = ExperimentService._text_setup(cfg)
            model = ExperimentService._new_model(cfg, layout.size)
        with stage("training"):
            eval_every = max(cfg.training.steps // 10, 1)

            def track(step, breakdown):
                if step % eval_every == 0:
                    comparison = compare_with_oracle(model, corpus, schedule, 256, substream(cfg.seed, "kl-eval"))
                    curves.append({"step": float(step), "l_ce": breakdown.l_ce, "kl_to_oracle": comparison.mean_kl})

            started = time.perf_counter()
            service = ExperimentService._train(cfg, model, schedule, {"text": corpus}, on_step=track)
            timings["training_s"] = time.perf_counter() - started
            write_training_log(service.log_rows, _sibling(cfg.outputs.curves_path, "training_log"))
        with stage("evaluation"):
            comparison = compare_with_oracle(model, corpus, schedule, cfg.training.eval_samples, substream(cfg.seed, "eval"))
            metrics["model_ce"] = comparison.model_ce
            metrics["oracle_ce"] = comparison.oracle_ce
            metrics["oracle_entropy"] = comparison.oracle_entropy
            metrics["ce_gap_to_oracle"] = comparison.model_ce - comparison.oracle_ce
            metrics["mean_kl_to_oracle"] = comparison.mean_kl
            if curves:
                metrics["kl_first"] = curves[0]["kl_to_oracle"]
                metrics["kl_last"] = curves[-1]["kl_to_oracle"]
                kl = np.array([row["kl_to_oracle"] for row in curves])
                if len(kl) >= KL_SMOOTHING_WINDOW:
                    smoothed = np.convolve(kl, np.ones(KL_SMOOTHING_WINDOW) / KL_SMOOTHING_WINDOW, mode="valid")
                    metrics["kl_smoothed_nonincreasing"] = float(np.all(np.diff(smoothed) <= KL_NOISE_BAND))
        with stage("sampling"):
            sessions = max(cfg.training.eval_samples // len(corpus.instructions), 1)
            started = time.perf_counter()
            metrics["tv_to_target"] = ExperimentService._sample_tv(cfg, ModelDenoiser(model), corpus, schedule, sessions)
            timings["sampling_s"] = time.perf_counter() - started
        _write_curves(curves, cfg.outputs.curves_path)
        return metrics, timings, {}

    @staticmethod
    def _dynamic_length(cfg: ExperimentConfig):
        metrics: Dict[str, float] = {}
        timings: Dict[str, float] = {}
        block = cfg.sampler.block_size
        corpus_spec = cfg.corpus.model_copy(update={"kind": "fixed_length", "block_size": block})
        with stage("corpus"):
            layout, vocab, schedule, corpus = ExperimentService._text_setup(cfg, corpus_spec)
            model = ExperimentService._new_model(cfg, layout.size)
        with stage("training"):
            started = time.perf_counter()
            ExperimentService._train(cfg, model, schedule, {"text": corpus})
            timings["training_s"] = time.perf_counter() - started
        with stage("generation"):
            denoiser = ModelDenoiser(model)
            instruction = corpus.instructions[0]
            trace = dynamic_length_generate(denoiser, instruction, cfg.sampler, schedule, vocab, substream_seed(cfg.seed, "sample"))
            settled = trace.settled_response_length
            expected = math.ceil((corpus_spec.response_length + 1) / block) * block
            tiny = cfg.sampler.model_copy(update={"eos_confidence_threshold": 1e-9})
            tiny_trace = dynamic_length_generate(denoiser, instruction, tiny, schedule, vocab, substream_seed(cfg.seed, "sample-tiny"))
            response = trace.responses()[0]
            eos = np.flatnonzero(response == vocab.eos_id)
        metrics["settled_length"] = float(settled)
        metrics["expected_length"] = float(expected)
        metrics["length_is_block_multiple"] = float(settled % block == 0)
        metrics["settled_matches_expected"] = float(settled == expected)
        metrics["truncated"] = float(trace.truncated)
        metrics["tiny_threshold_length_is_one_block"] = float(tiny_trace.settled_response_length == block)
        metrics["first_eos_position"] = float(eos[0]) if eos.size else -1.0
        if cfg.outputs.trace_path:
            write_trace_jsonl(trace, cfg.outputs.trace_path)
        return metrics, timings, {}

    @staticmethod
    def _fit_codec(cfg: ExperimentConfig):
        spec = cfg.quantizer
        points, labels = gaussian_mixture_points(
            spec.n_points, spec.n_components, spec.component_radius, spec.component_std, substream(cfg.seed, "corpus")
        )
        torch.manual_seed(substream_seed(cfg.seed, "codec-init"))
        result = fit_toy_modality(points, spec, cfg.model.width, torch_generator(cfg.seed, "codec"))
        return points, labels, result

    @staticmethod
    def _quantizer(cfg: ExperimentConfig):
        metrics: Dict[str, float] = {}
        timings: Dict[str, float] = {}
        spec = cfg.quantizer
        with stage("exact-argmin"):
            rng = substream(cfg.seed, "argmin")
            codebook = Codebook(sub_codebooks=[rng.standard_normal((4, 2)) for _ in range(2)])
            inputs = rng.standard_normal((10_000, 4))
            indices = quantize_batch(codebook, inputs)
            all_codes = np.array([[a, b] for a in range(4) for b in range(4)])
            reps = np.stack([np.concatenate([codebook.sub_codebooks[0][a], codebook.sub_codebooks[1][b]]) for a, b in all_codes])
            brute = all_codes[((inputs[:, None, :] - reps[None]) ** 2).sum(-1).argmin(axis=1)]
            metrics["quantize_mismatches"] = float((brute != indices).any(axis=1).sum())
        with stage("fit"):
            started = time.perf_counter()
            points, labels, result = ExperimentService._fit_codec(cfg)
            timings["fit_s"] = time.perf_counter() - started
            # столько центроидов, сколько составных кодов (из K_m ** M) кодек реально занял
            composite = spec.codebook_size ** spec.n_codebooks
            used = len(np.unique(result.codec.encode_points(points), axis=0))
            _, kmeans_mse = kmeans_oracle(points, used, substream(cfg.seed, "kmeans"))
            _, full_mse = kmeans_oracle(points, composite, substream(cfg.seed, "kmeans-full"))
            metrics["reconstruction_mse"] = result.reconstruction_mse
            metrics["used_composite_codes"] = float(used)
            metrics["kmeans_k"] = float(min(used, len(points)))
            metrics["kmeans_mse"] = kmeans_mse
            metrics["mse_ratio_to_kmeans"] = result.reconstruction_mse / kmeans_mse
            metrics["kmeans_mse_full_capacity"] = full_mse
            metrics["mse_ratio_to_full_capacity"] = result.reconstruction_mse / full_mse
            metrics["usage_entropy"] = result.usage_entropy
            metrics["revived_codes"] = float(result.revived_codes)
        with stage("distortion"):
            curve = []
            for size in (16, 32, 64):
                book = fit_codebook_kmeans(points, 2, size, substream(cfg.seed, f"distortion-{size}"))
                curve.append(distortion(book, points))
                metrics[f"distortion_k{size}"] = curve[-1]
            metrics["distortion_monotone"] = float(all(b <= a * 1.01 for a, b in zip(curve, curve[1:])))
        with stage("heads"):
            indices = result.codec.encode_points(points)
            rng = substream(cfg.seed, "head-features")
            lift = rng.standard_normal((2, cfg.model.width))
            features = points @ lift + 0.1 * rng.standard_normal((len(points), cfg.model.width))
            heads = compare_head_modes(indices, features, spec.codebook_size, torch_generator(cfg.seed, "heads"))
            metrics.update(heads)
        if cfg.outputs.checkpoint_path:
            save_codec(result.codec, cfg.outputs.checkpoint_path)
        _write_curves(result.history, cfg.outputs.curves_path)
        reference = {"codebook_m": float(spec.n_codebooks), "codebook_k": float(spec.codebook_size)}
        for name, (m, k) in REFERENCE_CODEBOOKS.items():
            reference[f"{name}_tokens"] = float(m * k)
        return metrics, timings, reference

    @staticmethod
    def _cache_bench(cfg: ExperimentConfig):
        metrics: Dict[str, float] = {}
        timings: Dict[str, float] = {}
        cache_spec = cfg.cache
        with stage("setup"):
            corpus_spec = cfg.corpus.model_copy(update={"kind": "pattern", "response_length": cache_spec.bench_response_length})
            layout, vocab, schedule, corpus = ExperimentService._text_setup(cfg, corpus_spec)
            spec = cfg.sampler.model_copy(update={"step_count": cache_spec.bench_step_count})
            prompt = corpus.prompt(0)
        with stage("training"):
            # дрейф кэша имеет смысл только на обученной модели
            started = time.perf_counter()
            if cache_spec.bench_checkpoint:
                model = load_checkpoint(cache_spec.bench_checkpoint)
                if model.vocab_size != layout.size or model.spec.max_len < len(prompt.tokens):
                    raise ConfigError("bench checkpoint does not fit the benchmark corpus")
            else:
                model = ExperimentService._new_model(cfg, layout.size)
                history = TrainingService(model, schedule, cfg.training).fit(
                    {"text": corpus}, cache_spec.bench_training_steps, substream(cfg.seed, "bench-train")
                )
                if history:
                    metrics["bench_train_first_loss"] = history[0].l_ce
                    metrics["bench_train_last_loss"] = history[-1].l_ce
            model.eval()
            timings["training_s"] = time.perf_counter() - started
            seeds = [substream_seed(cfg.seed, f"bench-{i}") for i in range(cache_spec.bench_sessions)]

        def run(make_denoiser):
            traces = []
            for seed in seeds:
                traces.append(generate_batch(make_denoiser(), prompt, spec, schedule, seed, 1, keep_sequences=True))
            return traces

        with stage("uncached"):
            uncached = run(lambda: ModelDenoiser(model))
        with stage("forced-recompute"):
            forced = run(lambda: CachedDenoiser(model, cache_spec, tau=1.5))
            identical = all(
                all(np.array_equal(a, b) for a, b in zip(u.sequences, f.sequences)) for u, f in zip(uncached, forced)
            )
            metrics["forced_recompute_identical"] = float(identical)
        fractions = {}
        for tau in sorted(cache_spec.taus):
            with stage(f"cached-tau-{tau}"):
                cached = run(lambda: CachedDenoiser(model, cache_spec, tau=tau))
                merged_uncached = _merge_traces(uncached)
                merged_cached = _merge_traces(cached)
                report = speedup_report(merged_uncached, merged_cached, layout.size)
                fractions[tau] = report.recompute_fraction
                metrics[f"recompute_fraction_tau_{tau}"] = report.recompute_fraction
                metrics[f"tv_drift_tau_{tau}"] = report.tv_drift
                metrics[f"marginal_tv_drift_tau_{tau}"] = report.marginal_tv_drift
                timings[f"wall_ratio_tau_{tau}"] = report.wall_ratio
                if tau == cache_spec.tau:
                    metrics["recompute_fraction"] = report.recompute_fraction
                    metrics["marginal_tv_drift"] = report.marginal_tv_drift
                    metrics["marginal_drift_within_bound"] = float(report.marginal_tv_drift <= cache_spec.max_marginal_drift)
                    timings["wall_ratio"] = report.wall_ratio
        ordered = [fractions[tau] for tau in sorted(fractions)]
        metrics["tau_monotone"] = float(all(a <= b for a, b in zip(ordered, ordered[1:])))
        return metrics, timings, {"reference_speedup": REFERENCE_SPEEDUP}

    @staticmethod
    def _retrieval(cfg: ExperimentConfig):
        metrics: Dict[str, float] = {}
        timings: Dict[str, float] = {}
        with stage("codec"):
            points, labels, result = ExperimentService._fit_codec(cfg)
            codec = result.codec
            layout = TokenLayout.build(cfg.vocabulary, cfg.corpus, codec)
        with stage("corpus"):
            rng = substream(cfg.seed, "retrieval-corpus")
            corpus = make_paired_retrieval_corpus(cfg.retrieval.n_pairs, points, labels, codec, layout, rng)
            shuffled = make_paired_retrieval_corpus(
                cfg.retrieval.n_pairs, points, labels, codec, layout, substream(cfg.seed, "retrieval-shuffled"),
                shuffle_labels=True,
            )
            model = ExperimentService._new_model(cfg, layout.size, codec)
        with stage("finetune"):
            started = time.perf_counter()
            losses = finetune_retrieval(model, corpus, cfg.retrieval, torch_generator(cfg.seed, "retrieval"))
            timings["finetune_s"] = time.perf_counter() - started
            metrics["infonce_first"] = losses["first_loss"]
            metrics["infonce_last"] = losses["last_loss"]
        with stage("evaluation"):
            result = evaluate_retrieval(model, corpus)
            control = evaluate_retrieval(model, shuffled)
            metrics["mrr"] = result.mrr
            metrics["class_mrr"] = result.class_mrr
            metrics["random_baseline"] = result.random_baseline
            metrics["mrr_ratio_to_random"] = result.ratio_to_random
            metrics["shuffled_mrr"] = control.mrr
            counts = corpus.class_counts()
            metrics["n_classes"] = float(np.count_nonzero(counts))
            metrics["min_class_pairs"] = float(counts[counts > 0].min())
        return metrics, timings, {}

    @staticmethod
    def _gradnorm(cfg: ExperimentConfig):
        metrics: Dict[str, float] = {}
        timings: Dict[str, float] = {}
        with stage("synthetic"):
            curves = synthetic_gradnorm_problem(
                steps=500, alpha=cfg.training.gradnorm_alpha, lr=cfg.training.gradnorm_lr,
                generator=torch_generator(cfg.seed, "gradnorm"),
            )
            final_ratio = curves["norm_ratio"][-1]
            metrics["initial_norm_ratio"] = curves["norm_ratio"][0]
            metrics["final_norm_ratio"] = final_ratio
            metrics["final_norm_ratio_in_band"] = float(0.8 <= final_ratio <= 1.25)
        with stage("joint-training"):
            points, labels, result = ExperimentService._fit_codec(cfg)
            codec = result.codec
            layout = TokenLayout.build(cfg.vocabulary, cfg.corpus, codec)
            embeddings = random_unit_embeddings(
                layout.size, cfg.vocabulary.embedding_dim, np.random.default_rng(cfg.vocabulary.embedding_seed)
            )
            vocab = build_vocabulary(cfg.vocabulary, embeddings)
            schedule = build_schedule(cfg.schedule, vocab)
            text = make_text_corpus(cfg.corpus, layout, substream(cfg.seed, "corpus"))
            signal = make_signal_corpus(points, labels, codec, layout)
            model = ExperimentService._new_model(cfg, layout.size, codec)
            started = time.perf_counter()
            service = ExperimentService._train(cfg, model, schedule, {"text": text, "signal": signal}, {"signal": points})
            timings["joint_training_s"] = time.perf_counter() - started
            lambdas = service.lambdas
            metrics["lambda_sum_error"] = float(abs(lambdas.sum() - len(lambdas)))
            metrics["min_lambda"] = float(lambdas.min())
            for k, value in enumerate(lambdas, start=1):
                metrics[f"lambda_{k}"] = float(value)
            metrics["gradnorm_updates"] = float(service.balancer.updates)
            write_training_log(service.log_rows, _sibling(cfg.outputs.curves_path, "training_log"))
        _write_curves([{"update": float(i), "norm_ratio": r} for i, r in enumerate(curves["norm_ratio"])], cfg.outputs.curves_path)
        return metrics, timings, {}

    # --- реестр запусков ---

    @staticmethod
    async def record_run(db: AsyncSession, cfg: ExperimentConfig, report: Optional[MetricReport], error: Optional[str] = None) -> ExperimentRun:
        """Сохранение запуска в реестр"""
        run = ExperimentRun(
            run_id=f"run-{cfg.config_hash()[:12]}-{uuid.uuid4().hex[:8]}",
            pipeline=cfg.pipeline,
            config_hash=cfg.config_hash(),
            seed=cfg.seed,
            status="failed" if error else ("violations" if report and report.violations else "completed"),
            metrics=report.metrics if report else {},
            violations=report.violations if report else [],
            error=error,
            report_path=cfg.outputs.report_path,
            finished_at=datetime.utcnow(),
        )
        db.add(run)
        await db.commit()
        await db.refresh(run)
        return run

    @staticmethod
    async def list_runs(db: AsyncSession, pipeline: Optional[str] = None, limit: int = 50) -> List[ExperimentRun]:
        query = select(ExperimentRun).order_by(ExperimentRun.created_at.desc()).limit(limit)
        if pipeline:
            query = query.where(ExperimentRun.pipeline == pipeline)
        result = await db.execute(query)
        return list(result.scalars().all())


def _merge_traces(traces):
    """Склейка трасс сессий одной конфигурации в одну (для отчета по кэшу)"""
    merged = traces[0].model_copy(deep=True)
    merged.final = np.concatenate([trace.final for trace in traces], axis=0)
    merged.records = [
        record.model_copy(update={"ms": sum(trace.records[i].ms for trace in traces)})
        for i, record in enumerate(traces[0].records)
    ]
    if traces[0].cache_stats:
        recomputed = sum(trace.cache_stats["recomputed"] for trace in traces)
        reused = sum(trace.cache_stats["reused"] for trace in traces)
        merged.cache_stats = {
            "recomputed": recomputed,
            "reused": reused,
            "recompute_fraction": recomputed / (recomputed + reused) if recomputed + reused else 0.0,
        }
        merged.recompute_fractions = list(np.mean([trace.recompute_fractions for trace in traces], axis=0))
    return merged


def _sibling(path: Optional[str], suffix: str) -> Optional[str]:
    if not path:
        return None
    target = Path(path)
    return str(target.with_name(f"{target.stem}_{suffix}.csv"))


def summarize_reports(paths: List[str]) -> List[Dict[str, object]]:
    """Сводка по нескольким отчетам: пайплайн, число нарушений, ключевые метрики"""
    rows = []
    for path in paths:
        report = MetricReport.model_validate_json(Path(path).read_text(encoding="utf-8"))
        rows.append({
            "path": path,
            "pipeline": report.pipeline,
            "seed": report.seed,
            "config_hash": report.config_hash[:12],
            "violations": len(report.violations),
            "metrics": report.metrics,
        })
    return rows
