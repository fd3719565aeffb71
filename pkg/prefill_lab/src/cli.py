"""Command-line front end: gen-model, rank, correlate, sweep, niah, bench, ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error
(including a sweep with errored cells). Diagnostics go to stderr; stdout
carries summary tables only.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional

import pandas as pd
from tabulate import tabulate

from src.bench import MIN_REPEATS, reports_frame, run_bench, write_reports
from src.container import load_model, save_model
from src.correlation import layerwise_correlation, reports_frame as correlation_frame
from src.errors import ConfigError, ModelFormatError, OracleUndefinedError, PrefillLabError, UsageError
from src.experiment import ExperimentConfig
from src.model import ModelConfig, random_init_model
from src.pipelines import Method, oracle_ranking, run_pipeline
from src.sweep import SweepReport, ablate, sweep
from src.tasks import niah_suite, write_prompts

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
PARAM_FLAGS = ("window_size", "pool_kernel", "agg_window", "defer_layers", "pruning_layer",
               "routing_layer", "lookahead", "max_gen")
MODEL_FLAGS = ("num_layers", "d_model", "num_heads", "num_kv_heads", "head_dim", "vocab_size", "ffn_dim")


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(cast):
    def parse(text: str):
        try:
            return tuple(cast(part) for part in text.split(",") if part.strip())
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e)) from e
    return parse


def _show(df: pd.DataFrame) -> None:
    print(tabulate(df, headers="keys", tablefmt="psql", showindex=False))


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON experiment config file")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--seed", type=int)
    common.add_argument("--log-level", dest="log_level")
    common.add_argument("--workers", type=int)
    common.add_argument("--model", dest="model_path", help="model container directory")
    common.add_argument("--speculator", dest="speculator_path", help="speculator container directory")
    common.add_argument("--methods", type=_csv_list(str), help="comma-separated method names")
    common.add_argument("--keep-rates", dest="keep_rates", type=_csv_list(float))
    common.add_argument("--prompts", dest="prompts_path", help="file of token-id lines")
    common.add_argument("--answers", dest="answers_path", help="JSON of expected answers per prompt")
    common.add_argument("--niah-haystack-len", dest="niah_haystack_len", type=int)
    common.add_argument("--niah-depths", dest="niah_depths", type=_csv_list(float))
    common.add_argument("--niah-payload-len", dest="niah_payload_len", type=int)
    common.add_argument("--eos-id", dest="eos_id", type=int)
    common.add_argument("--head-reduce", dest="head_reduce", choices=("max", "mean"))
    common.add_argument("--repeats", type=int)
    common.add_argument("--decode-steps", dest="decode_steps", type=int)
    for name in PARAM_FLAGS:
        common.add_argument("--" + name.replace("_", "-"), dest="param_" + name, type=int)
    for name in MODEL_FLAGS:
        common.add_argument("--" + name.replace("_", "-"), dest="model_" + name, type=int)
    common.add_argument("--tie-embeddings", dest="model_tie_embeddings", action="store_true")

    parser = ArgumentParser(prog="prefill-lab", description="Prefill token-ranking laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-model", parents=[common], help="write a seeded random model container")
    gen.add_argument("--out", required=True, help="container directory to create")
    gen.add_argument("--force", action="store_true", default=False)
    gen.set_defaults(func=cmd_gen_model)

    for name, func, text in (
        ("rank", cmd_rank, "per-token score CSVs per method"),
        ("correlate", cmd_correlate, "layer-wise Spearman rho against the oracle"),
        ("sweep", cmd_sweep, "method x keep-rate x prompt grid"),
        ("niah", cmd_niah, "write needle-in-a-haystack prompts and answers"),
        ("bench", cmd_bench, "TTFT, decode throughput and cache size"),
    ):
        sub.add_parser(name, parents=[common], help=text).set_defaults(func=func)

    abl = sub.add_parser("ablate", parents=[common], help="sweep repeated over values of one parameter")
    abl.add_argument("--param", required=True)
    abl.add_argument("--values", required=True, type=_csv_list(int))
    abl.set_defaults(func=cmd_ablate)
    return parser


def experiment_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides, params, model_config = {}, {}, {}
    skip = {"command", "func", "config", "out", "force", "param", "values"}
    for key, value in vars(args).items():
        if key in skip:
            continue
        if key.startswith("param_"):
            params[key[len("param_"):]] = value
        elif key.startswith("model_") and key != "model_path":
            model_config[key[len("model_"):]] = value
        else:
            overrides[key] = value
    if params:
        overrides["params"] = params
    if model_config:
        overrides["model_config"] = model_config
    return ExperimentConfig.resolve(getattr(args, "config", None), overrides)


def _context(exp: ExperimentConfig):
    model = exp.load_base_model()
    speculator = exp.load_speculator()
    cfg = exp.pipeline_config(model, speculator)
    return model, cfg


def cmd_gen_model(exp: ExperimentConfig, args) -> int:
    config = ModelConfig.from_dict(exp.model_config)
    model = random_init_model(config, exp.seed)
    save_model(model, args.out, force=args.force)
    reloaded = load_model(args.out)
    if reloaded.checksum() != model.checksum():
        raise ModelFormatError(f"{args.out}: checksum changed on reload")
    _show(pd.DataFrame([{"path": args.out, "seed": exp.seed, **config.to_dict(), "checksum": model.checksum()}]))
    return 0


def cmd_rank(exp: ExperimentConfig, args) -> int:
    model, cfg = _context(exp)
    prompts = exp.load_prompts(model.config.vocab_size)
    exp.write_manifest("rank", model_checksum=model.checksum())
    rows = []
    for record in prompts:
        try:
            oracle = oracle_ranking(model, record.tokens, cfg)
        except OracleUndefinedError as e:
            logger.warning("prompt %s skipped: %s", record.prompt_id, e)
            continue
        for method in exp.method_list():
            if method == Method.FULL_KV:
                continue
            for rate in exp.keep_rates:
                cell_cfg = replace(cfg, method=method, params=replace(cfg.params, keep_rate=rate))
                result = run_pipeline(model, record.tokens, cell_cfg, oracle)
                frame = result.ranking_scores.to_frame()
                frame["kept"] = frame["index"].isin(result.kept_indices)
                out = os.path.join(exp.output_dir("rank", method.value, rate),
                                   f"scores_{record.prompt_id}_seed{exp.seed}.csv")
                frame.to_csv(out, index=False)
                rows.append({"prompt": record.prompt_id, "method": method.value, "keep_rate": rate,
                             "kept": len(result.kept_indices), "file": out})
    if rows:
        _show(pd.DataFrame(rows))
    return 0


def cmd_correlate(exp: ExperimentConfig, args) -> int:
    model, cfg = _context(exp)
    prompts = exp.load_prompts(model.config.vocab_size)
    exp.write_manifest("correlate", model_checksum=model.checksum(), pool_kernel=cfg.params.pool_kernel)
    reports = []
    for record in prompts:
        try:
            per_method = layerwise_correlation(model, record.tokens, cfg, record.prompt_id)
        except OracleUndefinedError as e:
            logger.warning("prompt %s skipped: %s", record.prompt_id, e)
            continue
        reports.extend(per_method.values())
    frame = correlation_frame(reports)
    out_dir = exp.output_dir("correlate")
    frame.to_csv(os.path.join(out_dir, f"layerwise_seed{exp.seed}.csv"), index=False)
    summary = frame.groupby(["method", "layer"], sort=True)["rho"].mean().reset_index()
    summary.to_csv(os.path.join(out_dir, f"summary_seed{exp.seed}.csv"), index=False)
    _show(summary)
    return 0


def _write_sweep(exp: ExperimentConfig, command: str, report: SweepReport) -> int:
    out_dir = exp.output_dir(command)
    report.to_csv(os.path.join(out_dir, f"{command}_seed{exp.seed}.csv"))
    report.to_json(os.path.join(out_dir, f"{command}_seed{exp.seed}.json"))
    for cell in report.cells:
        if cell.result_summary is None:
            continue
        cell_dir = exp.output_dir(command, cell.method, cell.keep_rate)
        name = f"{cell.prompt_id}{'_' + cell.variant if cell.variant else ''}_seed{exp.seed}.json"
        with open(os.path.join(cell_dir, name), "w", encoding="utf-8") as f:
            json.dump(cell.result_summary, f, indent=2)
    _show(report.summary())
    if report.errored:
        logger.error("%d cells errored", len(report.errored))
        return 2
    return 0


def cmd_sweep(exp: ExperimentConfig, args) -> int:
    model, cfg = _context(exp)
    prompts = exp.load_prompts(model.config.vocab_size)
    exp.write_manifest("sweep", model_checksum=model.checksum())
    report = sweep(model, prompts, exp.method_list(), exp.keep_rates, cfg, exp.workers, exp.seed)
    return _write_sweep(exp, "sweep", report)


def cmd_ablate(exp: ExperimentConfig, args) -> int:
    model, cfg = _context(exp)
    prompts = exp.load_prompts(model.config.vocab_size)
    exp.write_manifest("ablate", model_checksum=model.checksum(), param=args.param, values=list(args.values))
    report = ablate(model, prompts, exp.method_list(), exp.keep_rates, cfg, args.param, args.values,
                    exp.workers, exp.seed)
    return _write_sweep(exp, "ablate", report)


def cmd_niah(exp: ExperimentConfig, args) -> int:
    if exp.niah_haystack_len is None:
        raise UsageError("niah needs --niah-haystack-len")
    vocab_size = exp.model_config.get("vocab_size", 512)
    records = niah_suite(exp.niah_haystack_len, exp.niah_depths, exp.seed, vocab_size, exp.niah_payload_len)
    out_dir = exp.output_dir("niah")
    prompts_path = os.path.join(out_dir, f"prompts_seed{exp.seed}.txt")
    answers_path = os.path.join(out_dir, "answers.json")
    write_prompts(records, prompts_path, answers_path)
    exp.write_manifest("niah", prompts=prompts_path, answers=answers_path)
    _show(pd.DataFrame([{"prompt": r.prompt_id, "depth": d, "length": len(r.tokens)}
                        for r, d in zip(records, exp.niah_depths)]))
    return 0


def cmd_bench(exp: ExperimentConfig, args) -> int:
    if exp.repeats < MIN_REPEATS:
        raise UsageError(f"--repeats must be >= {MIN_REPEATS}, got {exp.repeats}")
    model, cfg = _context(exp)
    prompt = exp.load_prompts(model.config.vocab_size)[0]
    exp.write_manifest("bench", model_checksum=model.checksum(), prompt=prompt.prompt_id)
    reports = run_bench(model, prompt.tokens, exp.method_list(), exp.keep_rates, cfg, exp.repeats,
                        exp.decode_steps)
    out_dir = exp.output_dir("bench")
    write_reports(reports, os.path.join(out_dir, f"bench_seed{exp.seed}.csv"),
                  os.path.join(out_dir, f"bench_seed{exp.seed}.json"))
    frame = reports_frame(reports)

    sweep_csv = os.path.join(exp.out_dir, "sweep", f"sweep_seed{exp.seed}.csv")
    if os.path.exists(sweep_csv):
        scores = pd.read_csv(sweep_csv).groupby(["method", "keep_rate"])[["score", "rho"]].mean().reset_index()
        scatter = frame[["method", "keep_rate", "ttft_ms"]].merge(scores, on=["method", "keep_rate"], how="left")
        scatter.to_csv(os.path.join(out_dir, f"scatter_seed{exp.seed}.csv"), index=False)
    _show(frame[["method", "keep_rate", "prompt_len", "ttft_ms", "ttft_min_ms", "ttft_max_ms",
                 "decode_tps", "cache_bytes", "rss_gb"]])
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        exp = experiment_from_args(args)
        logging.basicConfig(level=exp.log_level.upper(), format=LOG_FORMAT, stream=sys.stderr)
        return args.func(exp, args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (PrefillLabError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception("unexpected failure")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
