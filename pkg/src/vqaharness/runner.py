"""Batch engine composing templates, captions, CoT and metrics into runs.

Each run appends one JSON object per sample to results.jsonl (append-only,
resumable) and finalizes an aggregate report.json atomically. Everything but
the elapsed_s timing field is deterministic under a replay backend.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

from . import captions as captions_mod
from . import cot as cot_mod
from .backends import (
    Backend,
    BackendRequest,
    HTTPBackend,
    ReplayBackend,
    ScriptedBackend,
    preset,
    with_seed,
)
from .captions import CaptionCache, CaptionRequest
from .datasets import QuestionRecord, WinogroundSample, build_quad, load_dataset
from .errors import CompareMismatch
from .exemplars import (
    HashEmbeddingProvider,
    RemoteEmbeddingProvider,
    SelectionConfig,
    load_pool,
    select_exemplars,
)
from .metrics import (
    ReferenceAnswers,
    binary_accuracy,
    llm_parse,
    normalize,
    vqa_accuracy,
    winoground_group_score,
    yes_no_of,
)
from .templates import (
    PromptContext,
    TemplateRegistry,
    builtin_registry,
    render,
    render_exemplar_block,
    wrap_with_caption,
)

SETTINGS = ("standard", "caption", "cot", "cot_iterative", "cot_context", "cot_consistency")
COT_SETTINGS = ("cot", "cot_iterative", "cot_context", "cot_consistency")


@dataclass
class FewShotConfig:
    pool_path: str
    k: int = 5
    similarity_cap: float = 0.6
    embedder: str = "hash"  # hash | remote
    embed_dim: int = 32
    embed_endpoint: str = ""
    embed_model: str = ""
    embed_api_key_env: str = ""


@dataclass
class BackendConfig:
    kind: str = "http"  # http | scripted
    endpoint: str = ""
    model: str = ""
    api_key_env: str = ""
    timeout: float = 120.0
    max_retries: int = 3
    max_in_flight: int = 1
    replay_mode: str = ""  # "" | record | replay
    replay_store: str = ""


@dataclass
class ExperimentSpec:
    dataset_path: str = ""
    dataset_format: str = "canonical"
    split: str = ""
    template: str = "qa"
    template_file: str = ""
    setting: str = "standard"
    caption_strategy: Optional[str] = None
    few_shot: Optional[FewShotConfig] = None
    use_llm_parse: bool = False
    omit_image: bool = False
    use_options: bool = True
    task_instruction: Optional[str] = None
    answer_preset: str = "answer"  # answer | verbose-answer
    answer_template: str = "qa"  # second-stage template for iterative/context CoT
    winoground_framing: str = "statement"
    backend: BackendConfig = field(default_factory=BackendConfig)
    consistency: Optional[cot_mod.ConsistencyConfig] = None
    caption_samples: int = captions_mod.DEFAULT_DENSE_SAMPLES
    sample_limit: Optional[int] = None
    seed: int = 0
    output_dir: str = "runs"
    run_name: str = "run"

    def validate(self, registry: TemplateRegistry) -> None:
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting: {self.setting!r}")
        if (self.caption_strategy is not None) != (self.setting == "caption"):
            raise ValueError("caption_strategy must be set exactly when setting=caption")
        if (self.consistency is not None) != (self.setting == "cot_consistency"):
            raise ValueError("consistency config must be set exactly when setting=cot_consistency")
        if self.template not in registry:
            raise ValueError(f"unknown template: {self.template!r}")
        family = registry[self.template].family
        if self.setting in COT_SETTINGS and family != "cot":
            raise ValueError(f"setting {self.setting} needs a cot-family template")
        if self.setting not in COT_SETTINGS and family != "standard":
            raise ValueError(f"setting {self.setting} needs a standard-family template")
        if self.few_shot is not None and self.setting not in ("standard", "caption", "cot"):
            raise ValueError("few-shot exemplars combine with standard, caption or cot settings")
        if self.dataset_format == "winoground":
            if self.setting not in ("standard", "caption"):
                raise ValueError("winoground runs support the standard and caption settings")
            if self.few_shot is not None:
                raise ValueError("winoground runs do not take few-shot exemplars")

    def canonical(self) -> dict:
        doc = asdict(self)
        doc.pop("output_dir")
        doc.pop("run_name")
        return doc


def run_paths(spec: ExperimentSpec) -> tuple[Path, Path]:
    base = Path(spec.output_dir) / spec.run_name
    return base / "results.jsonl", base / "report.json"


@dataclass
class Report:
    """Aggregates over one run."""

    mean_score: Optional[float]
    count: int
    graded_count: int
    error_count: int
    by_type: dict
    dataset_digest: str
    ids_digest: str
    run_digest: str
    spec: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Report":
        return cls(**json.loads(text))


def _registry_for(spec: ExperimentSpec) -> TemplateRegistry:
    registry = builtin_registry()
    if spec.template_file:
        custom = TemplateRegistry.from_json(Path(spec.template_file).read_text(encoding="utf-8"))
        registry = registry.extended(custom)
    return registry


def build_backend(cfg: BackendConfig) -> Backend:
    if cfg.kind == "scripted":
        inner: Backend = ScriptedBackend()
    elif cfg.kind == "http":
        api_key = os.environ.get(cfg.api_key_env) if cfg.api_key_env else None
        inner = HTTPBackend(
            endpoint=cfg.endpoint,
            model=cfg.model,
            api_key=api_key,
            timeout=cfg.timeout,
            max_retries=cfg.max_retries,
        )
    else:
        raise ValueError(f"unknown backend kind: {cfg.kind!r}")
    if cfg.replay_mode:
        if not cfg.replay_store:
            raise ValueError("replay_mode needs replay_store")
        return ReplayBackend(
            cfg.replay_mode,
            cfg.replay_store,
            inner=None if cfg.replay_mode == "replay" else inner,
        )
    return inner


def _embedding_provider(cfg: FewShotConfig):
    if cfg.embedder == "hash":
        return HashEmbeddingProvider(cfg.embed_dim)
    if cfg.embedder == "remote":
        api_key = os.environ.get(cfg.embed_api_key_env) if cfg.embed_api_key_env else None
        return RemoteEmbeddingProvider(cfg.embed_endpoint, cfg.embed_model, api_key=api_key)
    raise ValueError(f"unknown embedder: {cfg.embedder!r}")


def _file_digest(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _metric_for(record: QuestionRecord, use_options: bool) -> str:
    if use_options and record.mc_answer is not None and record.options:
        return "binary_mc"
    if len(record.refs) > 1:
        return "vqa"
    return "binary"


def _grade(record: QuestionRecord, parsed: str, metric: str) -> float:
    if metric == "binary_mc":
        return float(binary_accuracy(parsed, record.mc_answer))
    if metric == "vqa":
        return vqa_accuracy(parsed, ReferenceAnswers(list(record.refs)))
    return float(binary_accuracy(parsed, record.refs[0]))


class _RunContext:
    """Everything shared across samples of one run."""

    def __init__(self, spec: ExperimentSpec, backend: Backend, registry: TemplateRegistry):
        self.spec = spec
        self.backend = backend
        self.registry = registry
        base = Path(spec.output_dir) / spec.run_name
        base.mkdir(parents=True, exist_ok=True)
        self.caption_cache = CaptionCache(Path(spec.output_dir) / "caption_cache.jsonl")
        self.pool = None
        self.selector_cfg = None
        self.embedder = None
        if spec.few_shot is not None:
            self.embedder = _embedding_provider(spec.few_shot)
            self.pool = load_pool(spec.few_shot.pool_path, provider=self.embedder)
            self.selector_cfg = SelectionConfig(
                k=spec.few_shot.k, similarity_cap=spec.few_shot.similarity_cap
            )

    def answer_gen(self):
        gen = preset(self.spec.answer_preset)
        gen.omit_image = self.spec.omit_image
        return gen

    def rationale_gen(self):
        gen = preset("rationale")
        gen.omit_image = self.spec.omit_image
        return gen

    def exemplars_for(self, question: str):
        if self.pool is None:
            return None
        query = self.embedder.embed(question)
        return select_exemplars(query, self.pool, self.selector_cfg)

    def caption_for(self, record: QuestionRecord) -> captions_mod.Caption:
        strategy = self.spec.caption_strategy
        request = CaptionRequest(
            image_ref=record.image_ref,
            strategy=strategy,
            question=record.question if strategy == "question_guided" else None,
            n_samples=self.spec.caption_samples,
        )
        return self.caption_cache.get_or_create(request, self.backend)


def _few_shot_setting(setting: str) -> str:
    if setting == "caption":
        return "caption"
    if setting in COT_SETTINGS:
        return "cot"
    return "standard"


def _process_record(ctx: _RunContext, record: QuestionRecord) -> dict:
    spec = ctx.spec
    start = time.monotonic()
    warnings: list[str] = []
    prompt_ctx = PromptContext(
        question=record.question,
        options=list(record.options) if (spec.use_options and record.options) else None,
        task_instruction=spec.task_instruction,
        is_binary_question=record.question_type == "yes/no",
    )
    template = ctx.registry[spec.template]
    image_ref = record.image_ref or None
    raw_outputs: list[str] = []
    tally: Optional[dict] = None
    rationale = ""

    if spec.setting == "caption":
        caption = ctx.caption_for(record)
        prompt_ctx = captions_mod.attach_caption(prompt_ctx, caption)

    if spec.setting in ("standard", "caption"):
        prompt = render(template, prompt_ctx)
        if spec.setting == "caption":
            prompt = wrap_with_caption(prompt, prompt_ctx.caption)
        prompt_text = prompt.text
        if ctx.pool is not None:
            exemplars = ctx.exemplars_for(record.question)
            prompt_text = render_exemplar_block(
                exemplars, _few_shot_setting(spec.setting), prompt_ctx, zero_shot=prompt
            )
        response = ctx.backend.complete(
            BackendRequest(
                prompt=prompt_text,
                gen=with_seed(ctx.answer_gen(), spec.seed),
                purpose="answer",
                image_ref=image_ref,
            )
        )
        raw_outputs = list(response.texts)
        candidate = response.texts[0]
    elif spec.setting == "cot":
        prompt = render(template, prompt_ctx)
        prompt_text = prompt.text
        if ctx.pool is not None:
            exemplars = ctx.exemplars_for(record.question)
            prompt_text = render_exemplar_block(exemplars, "cot", prompt_ctx, zero_shot=prompt)
        response = ctx.backend.complete(
            BackendRequest(
                prompt=prompt_text,
                gen=with_seed(ctx.rationale_gen(), spec.seed),
                purpose="rationale",
                image_ref=image_ref,
            )
        )
        raw = response.texts[0]
        candidate = cot_mod.extract_final_answer(raw)
        rationale = cot_mod.split_rationale(raw, candidate)
        if not raw.strip():
            warnings.append("ExtractionEmpty: backend returned empty output")
        raw_outputs = [raw]
    elif spec.setting == "cot_iterative":
        result = cot_mod.cot_iterative(
            prompt_ctx,
            ctx.backend,
            rationale_gen=with_seed(ctx.rationale_gen(), spec.seed),
            answer_gen=with_seed(ctx.answer_gen(), spec.seed),
            image_ref=image_ref,
            cot_template=spec.template,
            answer_template=spec.answer_template,
        )
        raw_outputs = [result.raw]
        rationale = result.rationale
        candidate = result.answer
        prompt_text = render(template, prompt_ctx).text
    elif spec.setting == "cot_context":
        result = cot_mod.cot_context(
            prompt_ctx,
            ctx.backend,
            rationale_gen=with_seed(ctx.rationale_gen(), spec.seed),
            answer_gen=with_seed(ctx.answer_gen(), spec.seed),
            image_ref=image_ref,
            cot_template=spec.template,
            answer_template=spec.answer_template,
        )
        raw_outputs = [result.raw]
        rationale = result.rationale
        candidate = result.answer
        prompt_text = render(template, prompt_ctx).text
    else:  # cot_consistency
        result = cot_mod.self_consistency(
            prompt_ctx,
            ctx.backend,
            spec.consistency,
            normalize,
            image_ref=image_ref,
            cot_template=spec.template,
            base_seed=spec.seed,
            max_in_flight=spec.backend.max_in_flight,
        )
        raw_outputs = [p.raw for p in result.paths]
        candidate = result.answer
        tally = result.tally
        warnings.extend(result.warnings)
        prompt_text = render(template, prompt_ctx).text

    parsed, parse_warnings = _parse_candidate(spec, ctx.backend, record.question, candidate)
    warnings.extend(parse_warnings)
    metric = _metric_for(record, spec.use_options)
    normalized = normalize(parsed)
    score = _grade(record, parsed, metric)

    result = {
        "id": record.id,
        "question_type": record.question_type,
        "prompt": prompt_text,
        "raw_outputs": raw_outputs,
        "candidate": candidate,
        "parsed": parsed,
        "normalized": normalized,
        "metric": metric,
        "score": score,
        "warnings": warnings,
        "elapsed_s": round(time.monotonic() - start, 6),
    }
    if rationale:
        result["rationale"] = rationale
    if tally is not None:
        result["tally"] = tally
    return result


def _parse_candidate(
    spec: ExperimentSpec, backend: Optional[Backend], question: str, candidate: str
) -> tuple[str, list[str]]:
    if not spec.use_llm_parse or not candidate.strip():
        return candidate, []
    parse = llm_parse(question, candidate, backend)
    return parse.text, list(parse.warnings)


def _process_winoground(ctx: _RunContext, sample: WinogroundSample) -> dict:
    spec = ctx.spec
    start = time.monotonic()
    warnings: list[str] = []
    quad = build_quad(sample, framing=spec.winoground_framing)
    template = ctx.registry[spec.template]
    questions = []
    answers = []
    for image_ref, question, expected in quad.items:
        prompt_ctx = PromptContext(
            question=question,
            task_instruction=spec.task_instruction,
            is_binary_question=True,
        )
        if spec.setting == "caption":
            request = CaptionRequest(
                image_ref=image_ref,
                strategy=spec.caption_strategy,
                question=question if spec.caption_strategy == "question_guided" else None,
                n_samples=spec.caption_samples,
            )
            caption = ctx.caption_cache.get_or_create(request, ctx.backend)
            prompt_ctx = captions_mod.attach_caption(prompt_ctx, caption)
        prompt = render(template, prompt_ctx)
        if spec.setting == "caption":
            prompt = wrap_with_caption(prompt, prompt_ctx.caption)
        response = ctx.backend.complete(
            BackendRequest(
                prompt=prompt.text,
                gen=with_seed(ctx.answer_gen(), spec.seed),
                purpose="answer",
                image_ref=image_ref,
            )
        )
        answer = response.texts[0]
        parsed, parse_warnings = _parse_candidate(spec, ctx.backend, question, answer)
        warnings.extend(parse_warnings)
        label = yes_no_of(parsed)
        if label == "unknown":
            warnings.append(f"NonBinaryAnswer: {parsed!r}")
        answers.append(parsed)
        questions.append(
            {
                "image_ref": image_ref,
                "question": question,
                "expected": expected,
                "raw": answer,
                "parsed": parsed,
                "yes_no": label,
                "correct": int(label == expected),
            }
        )
    score = float(winoground_group_score(quad, answers))
    return {
        "id": sample.id,
        "question_type": "winoground",
        "metric": "winoground_group",
        "questions": questions,
        "score": score,
        "warnings": warnings,
        "elapsed_s": round(time.monotonic() - start, 6),
    }


def _error_result(item_id: str, question_type: Optional[str], exc: Exception) -> dict:
    return {
        "id": item_id,
        "question_type": question_type,
        "metric": "error",
        "score": 0.0,
        "warnings": [f"sample failed: {exc}"],
        "elapsed_s": 0.0,
    }


def _ordered_parallel(fn: Callable, items: list, workers: int) -> Iterable:
    """Apply fn with bounded concurrency, yielding results in input order."""
    if workers <= 1:
        for item in items:
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque()
        iterator = iter(items)
        for item in iterator:
            pending.append(pool.submit(fn, item))
            if len(pending) >= 2 * workers:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def _existing_ids(results_path: Path) -> set:
    done = set()
    if results_path.exists():
        with open(results_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    done.add(json.loads(line)["id"])
    return done


def report_by_type(results: Iterable[dict]) -> dict:
    """Per-question-type mean scores and counts; untagged grouped as other."""
    buckets: dict[str, list[float]] = {}
    for result in results:
        qtype = result.get("question_type") or "other"
        buckets.setdefault(qtype, []).append(float(result["score"]))
    return {
        qtype: {"mean": sum(scores) / len(scores), "count": len(scores)}
        for qtype, scores in sorted(buckets.items())
    }


def _build_report(spec: ExperimentSpec, results: list[dict], backend: Optional[Backend]) -> Report:
    results = sorted(results, key=lambda r: str(r["id"]))
    scores = [float(r["score"]) for r in results]
    graded = [r for r in results if r.get("metric") != "error"]
    errors = len(results) - len(graded)
    ids_digest = hashlib.sha256(
        json.dumps([str(r["id"]) for r in results]).encode()
    ).hexdigest()
    dataset_digest = _file_digest(spec.dataset_path)
    store_digest = backend.store_digest() if isinstance(backend, ReplayBackend) else ""
    run_digest = hashlib.sha256(
        (
            json.dumps(spec.canonical(), sort_keys=True)
            + dataset_digest
            + store_digest
        ).encode()
    ).hexdigest()
    return Report(
        mean_score=(sum(scores) / len(scores)) if scores else None,
        count=len(results),
        graded_count=len(graded),
        error_count=errors,
        by_type=report_by_type(results),
        dataset_digest=dataset_digest,
        ids_digest=ids_digest,
        run_digest=run_digest,
        spec=spec.canonical(),
    )


def _write_report(report: Report, path: Path) -> None:
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(report.to_json() + "\n", encoding="utf-8")
    tmp.replace(path)


def run(spec: ExperimentSpec, backend: Optional[Backend] = None) -> Report:
    """Execute one experiment; returns the report and persists everything."""
    registry = _registry_for(spec)
    spec.validate(registry)
    if backend is None:
        backend = build_backend(spec.backend)
    items = load_dataset(spec.dataset_path, spec.dataset_format, split=spec.split)
    if spec.sample_limit is not None:
        items = items[: spec.sample_limit]
    results_path, report_path = run_paths(spec)
    ctx = _RunContext(spec, backend, registry)
    done = _existing_ids(results_path)
    todo = [item for item in items if item.id not in done]

    if spec.dataset_format == "winoground":
        def process(sample):
            try:
                return _process_winoground(ctx, sample)
            except Exception as exc:  # per-sample errors never abort the run
                return _error_result(sample.id, "winoground", exc)
    else:
        def process(record):
            try:
                return _process_record(ctx, record)
            except Exception as exc:
                return _error_result(record.id, record.question_type, exc)

    results_path.parent.mkdir(parents=True, exist_ok=True)
    with open(results_path, "a", encoding="utf-8") as fh:
        for result in _ordered_parallel(process, todo, spec.backend.max_in_flight):
            fh.write(json.dumps(result, sort_keys=True, ensure_ascii=False) + "\n")
            fh.flush()

    with open(results_path, encoding="utf-8") as fh:
        all_results = [json.loads(line) for line in fh if line.strip()]
    report = _build_report(spec, all_results, backend)
    _write_report(report, report_path)
    return report


def rescore(
    spec: ExperimentSpec,
    results_path: Union[str, Path],
    out_results_path: Union[str, Path],
    backend: Optional[Backend] = None,
) -> Report:
    """Re-grade persisted raw outputs, e.g. with llm_parse toggled.

    Only the parsing, normalization and scoring stages rerun; no generation
    calls are made (the parser backend is used only when use_llm_parse is on).
    """
    registry = _registry_for(spec)
    spec.validate(registry)
    if backend is None and spec.use_llm_parse:
        backend = build_backend(spec.backend)
    items = load_dataset(spec.dataset_path, spec.dataset_format, split=spec.split)
    if spec.dataset_format == "winoground":
        by_id = {s.id: s for s in items}
    else:
        by_id = {r.id: r for r in items}
    out_path = Path(out_results_path)
    if out_path.resolve() == Path(results_path).resolve():
        raise ValueError("rescore output must not overwrite the input results file")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    results = []
    with open(results_path, encoding="utf-8") as fh, open(out_path, "w", encoding="utf-8") as out:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            result = dict(json.loads(line))
            item = by_id.get(result["id"])
            if item is None:
                raise CompareMismatch(f"result id {result['id']!r} not in dataset")
            if result.get("metric") == "error":
                results.append(result)
                out.write(json.dumps(result, sort_keys=True, ensure_ascii=False) + "\n")
                continue
            if spec.dataset_format == "winoground":
                answers = []
                warnings = [w for w in result.get("warnings", []) if not w.startswith(("ParseFallback", "NonBinaryAnswer"))]
                for sub in result["questions"]:
                    parsed, parse_warnings = _parse_candidate(spec, backend, sub["question"], sub["raw"])
                    warnings.extend(parse_warnings)
                    label = yes_no_of(parsed)
                    if label == "unknown":
                        warnings.append(f"NonBinaryAnswer: {parsed!r}")
                    sub["parsed"] = parsed
                    sub["yes_no"] = label
                    sub["correct"] = int(label == sub["expected"])
                    answers.append(parsed)
                quad = build_quad(item, framing=spec.winoground_framing)
                result["score"] = float(winoground_group_score(quad, answers))
                result["warnings"] = warnings
            else:
                candidate = result["candidate"]
                parsed, parse_warnings = _parse_candidate(spec, backend, item.question, candidate)
                metric = _metric_for(item, spec.use_options)
                result["parsed"] = parsed
                result["normalized"] = normalize(parsed)
                result["metric"] = metric
                result["score"] = _grade(item, parsed, metric)
                result["warnings"] = [
                    w for w in result.get("warnings", []) if not w.startswith("ParseFallback")
                ] + parse_warnings
            results.append(result)
            out.write(json.dumps(result, sort_keys=True, ensure_ascii=False) + "\n")

    report = _build_report(spec, results, backend)
    _write_report(report, out_path.parent / "report.json")
    return report


def compare(run_a: Report, run_b: Report) -> dict:
    """Per-type and overall deltas (b minus a) between two runs."""
    if run_a.dataset_digest != run_b.dataset_digest:
        raise CompareMismatch("runs cover different datasets")
    if run_a.ids_digest != run_b.ids_digest:
        raise CompareMismatch("runs cover different sample sets")
    overall = None
    if run_a.mean_score is not None and run_b.mean_score is not None:
        overall = run_b.mean_score - run_a.mean_score
    by_type = {}
    for qtype in sorted(set(run_a.by_type) | set(run_b.by_type)):
        a = run_a.by_type.get(qtype)
        b = run_b.by_type.get(qtype)
        by_type[qtype] = {
            "a": a["mean"] if a else None,
            "b": b["mean"] if b else None,
            "delta": (b["mean"] - a["mean"]) if (a and b) else None,
        }
    return {"overall_delta": overall, "by_type": by_type}
