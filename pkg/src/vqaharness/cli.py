"""Command-line entry points.

Exit codes: 0 success, 1 fatal config or load error, 2 run completed but some
samples errored.
"""
from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .backends import preset
from .cot import ConsistencyConfig
from .datasets import export_conversion_review, load_dataset, save_records, convert_sample
from .errors import HarnessError
from .exemplars import HashEmbeddingProvider, load_pool, save_pool
from .runner import (
    BackendConfig,
    ExperimentSpec,
    FewShotConfig,
    Report,
    build_backend,
    compare,
    report_by_type,
    rescore,
    run,
    run_paths,
)

_ENV_RE = re.compile(r"\$\{(\w+)\}")


def _interpolate(value):
    if isinstance(value, str):
        return _ENV_RE.sub(lambda m: os.environ.get(m.group(1), ""), value)
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


def load_config(path: str) -> dict:
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return _interpolate(doc)


def spec_from_config(doc: dict) -> ExperimentSpec:
    dataset = doc.get("dataset", {})
    experiment = doc.get("experiment", {})
    backend = BackendConfig(**doc.get("backend", {}))
    consistency = None
    if "consistency" in doc:
        consistency = ConsistencyConfig(**doc["consistency"])
    few_shot = None
    if "few_shot" in doc:
        few_shot = FewShotConfig(**doc["few_shot"])
    return ExperimentSpec(
        dataset_path=dataset.get("path", ""),
        dataset_format=dataset.get("format", "canonical"),
        split=dataset.get("split", ""),
        backend=backend,
        consistency=consistency,
        few_shot=few_shot,
        **experiment,
    )


def _apply_overrides(spec: ExperimentSpec, args: argparse.Namespace) -> ExperimentSpec:
    simple = {
        "dataset": "dataset_path",
        "format": "dataset_format",
        "template": "template",
        "setting": "setting",
        "caption_strategy": "caption_strategy",
        "sample_limit": "sample_limit",
        "seed": "seed",
        "output_dir": "output_dir",
        "run_name": "run_name",
        "task_instruction": "task_instruction",
        "winoground_framing": "winoground_framing",
    }
    for arg_name, field_name in simple.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            setattr(spec, field_name, value)
    for flag in ("use_llm_parse", "omit_image"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(spec, flag, value)
    return spec


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="TOML config file")
    parser.add_argument("--dataset", help="override dataset path")
    parser.add_argument("--format", help="override dataset format")
    parser.add_argument("--template", help="override template name")
    parser.add_argument("--setting", help="override experiment setting")
    parser.add_argument("--caption-strategy", dest="caption_strategy")
    parser.add_argument("--sample-limit", dest="sample_limit", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--run-name", dest="run_name")
    parser.add_argument("--task-instruction", dest="task_instruction")
    parser.add_argument("--winoground-framing", dest="winoground_framing")
    parser.add_argument("--llm-parse", dest="use_llm_parse", action="store_true", default=None)
    parser.add_argument("--no-llm-parse", dest="use_llm_parse", action="store_false", default=None)
    parser.add_argument("--omit-image", dest="omit_image", action="store_true", default=None)


def _print_report(report: Report) -> None:
    mean = "n/a" if report.mean_score is None else f"{report.mean_score:.4f}"
    print(f"samples: {report.count}  graded: {report.graded_count}  errors: {report.error_count}")
    print(f"mean score: {mean}")
    if report.by_type:
        width = max(len(t) for t in report.by_type)
        print(f"{'type'.ljust(width)}  {'mean':>8}  {'count':>6}")
        for qtype, entry in report.by_type.items():
            print(f"{qtype.ljust(width)}  {entry['mean']:>8.4f}  {entry['count']:>6}")
    print(f"run digest: {report.run_digest[:16]}")


def _cmd_run(args: argparse.Namespace) -> int:
    spec = _apply_overrides(spec_from_config(load_config(args.config)), args)
    report = run(spec)
    results_path, report_path = run_paths(spec)
    _print_report(report)
    print(f"results: {results_path}")
    print(f"report:  {report_path}")
    return 2 if report.error_count else 0


def _cmd_score(args: argparse.Namespace) -> int:
    spec = _apply_overrides(spec_from_config(load_config(args.config)), args)
    if args.out_dir:
        spec.output_dir = args.out_dir
    report = rescore(spec, args.results, Path(spec.output_dir) / spec.run_name / "results.jsonl")
    _print_report(report)
    return 2 if report.error_count else 0


def _cmd_convert_winoground(args: argparse.Namespace) -> int:
    doc = load_config(args.config)
    spec = spec_from_config(doc)
    backend = build_backend(spec.backend)
    samples = load_dataset(spec.dataset_path, "winoground")
    gen = preset("convert")
    converted = [convert_sample(s, backend, retries=args.retries, gen=gen) for s in samples]
    save_records(args.out, converted)
    if args.review:
        export_conversion_review(converted, args.review)
        print(f"review file: {args.review}")
    print(f"converted {len(converted)} samples -> {args.out}")
    return 0


def _cmd_embed_pool(args: argparse.Namespace) -> int:
    provider = HashEmbeddingProvider(dimension=args.dim)
    pool = load_pool(args.pool, provider=provider, rewrite=False)
    for exemplar in pool:
        if exemplar.embedding is None:
            exemplar.embedding = provider.embed(exemplar.question)
    save_pool(args.pool, pool)
    print(f"embedded {len(pool)} exemplars in {args.pool}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    if args.report:
        report = Report.from_json(Path(args.report).read_text(encoding="utf-8"))
        _print_report(report)
        return 0
    results = []
    with open(args.results, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                results.append(json.loads(line))
    scores = [float(r["score"]) for r in results]
    mean = sum(scores) / len(scores) if scores else None
    print(f"samples: {len(results)}")
    print(f"mean score: {'n/a' if mean is None else f'{mean:.4f}'}")
    for qtype, entry in report_by_type(results).items():
        print(f"  {qtype}: mean={entry['mean']:.4f} count={entry['count']}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    report_a = Report.from_json(Path(args.a).read_text(encoding="utf-8"))
    report_b = Report.from_json(Path(args.b).read_text(encoding="utf-8"))
    delta = compare(report_a, report_b)
    overall = delta["overall_delta"]
    print(f"overall delta (b - a): {'n/a' if overall is None else f'{overall:+.4f}'}")
    for qtype, entry in delta["by_type"].items():
        d = entry["delta"]
        print(f"  {qtype}: {'n/a' if d is None else f'{d:+.4f}'}")
    if args.out:
        Path(args.out).write_text(json.dumps(delta, indent=2, sort_keys=True), encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqaharness", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment")
    _add_run_flags(p_run)
    p_run.set_defaults(fn=_cmd_run)

    p_score = sub.add_parser("score", help="re-grade persisted raw outputs")
    _add_run_flags(p_score)
    p_score.add_argument("--results", required=True, help="existing results.jsonl")
    p_score.add_argument("--out-dir", dest="out_dir", help="output directory for rescored results")
    p_score.set_defaults(fn=_cmd_score)

    p_conv = sub.add_parser("convert-winoground", help="convert captions to yes/no questions")
    p_conv.add_argument("--config", required=True)
    p_conv.add_argument("--out", required=True, help="converted samples JSONL")
    p_conv.add_argument("--review", help="write a TSV review file")
    p_conv.add_argument("--retries", type=int, default=2)
    p_conv.set_defaults(fn=_cmd_convert_winoground)

    p_embed = sub.add_parser("embed-pool", help="fill in missing pool embeddings")
    p_embed.add_argument("--pool", required=True)
    p_embed.add_argument("--dim", type=int, default=32)
    p_embed.set_defaults(fn=_cmd_embed_pool)

    p_report = sub.add_parser("report", help="print a report or summarize results")
    p_report.add_argument("--report", help="report.json to print")
    p_report.add_argument("--results", help="results.jsonl to summarize")
    p_report.set_defaults(fn=_cmd_report)

    p_cmp = sub.add_parser("compare", help="delta between two run reports")
    p_cmp.add_argument("--a", required=True)
    p_cmp.add_argument("--b", required=True)
    p_cmp.add_argument("--out", help="write the delta as JSON")
    p_cmp.set_defaults(fn=_cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (HarnessError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
