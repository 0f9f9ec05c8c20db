"""Chain-of-thought answering: extraction, two-stage variants, self-consistency."""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

from .backends import (
    Backend,
    BackendError,
    BackendRequest,
    BackendResponse,
    GenerationConfig,
    complete_batch,
    preset,
    with_seed,
)
from .errors import EmptyVote
from .templates import PromptContext, RenderedPrompt, builtin_registry, render, wrap_with_caption


@dataclass
class RationaleAnswer:
    """A rationale/answer pair extracted from one generation."""

    rationale: str
    answer: str
    raw: str
    warnings: list[str] = field(default_factory=list)


@dataclass
class ConsistencyConfig:
    """Self-consistency sampling settings."""

    n_paths: int = 30
    temperature: float = 0.7

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


# Highest-priority marker first; matching is case-insensitive and the last
# occurrence of the winning marker is used.
_ANSWER_MARKERS = [
    "the final answer is",
    "the final answer:",
    "answer is",
    "answer:",
]
_LEADING_ARTICLE_RE = re.compile(r"^(?:a|an|the)\s+", re.IGNORECASE)
_SENTENCE_END_RE = re.compile(r"[.!?](?:\s|$)")


def _first_sentence(text: str) -> str:
    match = _SENTENCE_END_RE.search(text)
    if match:
        return text[: match.start() + 1].strip()
    return text.strip()


def _last_sentence(text: str) -> str:
    parts = re.split(r"(?<=[.!?])\s+", text.strip())
    parts = [p for p in parts if p.strip()]
    return parts[-1].strip() if parts else ""


def _strip_terminal_punct(text: str) -> str:
    return text.strip().rstrip(".!?").strip()


def _extract_once(raw: str) -> str:
    lowered = raw.lower()
    for marker in _ANSWER_MARKERS:
        idx = lowered.rfind(marker)
        if idx < 0:
            continue
        tail = raw[idx + len(marker):]
        end = _SENTENCE_END_RE.search(tail)
        clause = tail[: end.start()] if end else tail
        clause = _LEADING_ARTICLE_RE.sub("", clause.strip())
        return _strip_terminal_punct(clause)
    return _strip_terminal_punct(_last_sentence(raw))


def extract_final_answer(raw: str) -> str:
    """Pull the answer clause out of a rationale.

    Scans for "the final answer is"/"the final answer:"/"answer is"/"answer:"
    in that priority order (last occurrence wins), takes the clause up to the
    sentence end and strips leading articles; with no marker, falls back to
    the last sentence. Total, and idempotent on its own output.
    """
    text = raw.strip()
    for _ in range(8):
        nxt = _extract_once(text)
        if nxt == text:
            break
        text = nxt
    return text


def trim_rationale(rationale: str) -> str:
    """First sentence of the rationale."""
    return _first_sentence(rationale.strip())


def _sentence_spans(text: str) -> list[tuple[int, int]]:
    spans = []
    start = 0
    for match in _SENTENCE_END_RE.finditer(text):
        spans.append((start, match.start() + 1))
        start = match.end()
    if start < len(text):
        spans.append((start, len(text)))
    return spans


def split_rationale(raw: str, answer: str) -> str:
    """The raw output minus the sentence the answer was extracted from."""
    text = raw.strip()
    if not text:
        return ""
    lowered = text.lower()
    pos = -1
    for marker in _ANSWER_MARKERS:
        pos = lowered.rfind(marker)
        if pos >= 0:
            break
    spans = _sentence_spans(text)
    if not spans:
        return ""
    if pos >= 0:
        kept = [text[a:b] for a, b in spans if not (a <= pos < b)]
    else:
        kept = [text[a:b] for a, b in spans[:-1]]  # fallback used the last sentence
    return " ".join(s.strip() for s in kept).strip()


def cot_answer(prompt: RenderedPrompt, backend: Backend, gen: GenerationConfig) -> RationaleAnswer:
    """Single-call CoT: the model emits rationale and answer together."""
    if prompt.family != "cot":
        raise ValueError("cot_answer needs a prompt rendered from a CoT template")
    response = backend.complete(BackendRequest(prompt=prompt.text, gen=gen, purpose="rationale"))
    raw = response.texts[0]
    warnings = []
    if not raw.strip():
        warnings.append("ExtractionEmpty: backend returned empty output")
    answer = extract_final_answer(raw)
    return RationaleAnswer(
        rationale=split_rationale(raw, answer),
        answer=answer,
        raw=raw,
        warnings=warnings,
    )


def _rationale_stage(
    ctx: PromptContext,
    backend: Backend,
    gen: GenerationConfig,
    image_ref: Optional[str],
    cot_template: str,
) -> RationaleAnswer:
    registry = builtin_registry()
    prompt = render(registry[cot_template], ctx)
    response = backend.complete(
        BackendRequest(prompt=prompt.text, gen=gen, purpose="rationale", image_ref=image_ref)
    )
    raw = response.texts[0]
    answer = extract_final_answer(raw)
    return RationaleAnswer(rationale=split_rationale(raw, answer), answer=answer, raw=raw)


def _answer_stage(
    prompt: RenderedPrompt,
    backend: Backend,
    gen: GenerationConfig,
    image_ref: Optional[str],
) -> str:
    response = backend.complete(
        BackendRequest(prompt=prompt.text, gen=gen, purpose="answer", image_ref=image_ref)
    )
    return response.texts[0]


def cot_iterative(
    ctx: PromptContext,
    backend: Backend,
    rationale_gen: Optional[GenerationConfig] = None,
    answer_gen: Optional[GenerationConfig] = None,
    image_ref: Optional[str] = None,
    cot_template: str = "reason-qa",
    answer_template: str = "qa",
) -> RationaleAnswer:
    """Two calls: elicit a rationale, trim it to one sentence, then answer
    a standard prompt of question followed by that rationale."""
    stage_one = _rationale_stage(
        ctx, backend, rationale_gen or preset("rationale"), image_ref, cot_template
    )
    trimmed = trim_rationale(stage_one.raw)
    registry = builtin_registry()
    if trimmed:
        second_ctx = replace(ctx, question=ctx.question.strip() + " " + trimmed)
    else:
        second_ctx = ctx
    prompt = render(registry[answer_template], second_ctx)
    answer = _answer_stage(prompt, backend, answer_gen or preset("answer"), image_ref)
    return RationaleAnswer(rationale=trimmed, answer=extract_final_answer(answer), raw=answer)


def cot_context(
    ctx: PromptContext,
    backend: Backend,
    rationale_gen: Optional[GenerationConfig] = None,
    answer_gen: Optional[GenerationConfig] = None,
    image_ref: Optional[str] = None,
    cot_template: str = "reason-qa",
    answer_template: str = "qa",
) -> RationaleAnswer:
    """Like cot_iterative, but the full rationale goes before the question as
    a Context: prefix."""
    stage_one = _rationale_stage(
        ctx, backend, rationale_gen or preset("rationale"), image_ref, cot_template
    )
    registry = builtin_registry()
    prompt = render(registry[answer_template], ctx)
    rationale = stage_one.raw.strip()
    if rationale:
        prompt = wrap_with_caption(prompt, rationale)
    answer = _answer_stage(prompt, backend, answer_gen or preset("answer"), image_ref)
    return RationaleAnswer(rationale=rationale, answer=extract_final_answer(answer), raw=answer)


def majority_vote(answers: Sequence[str], normalizer: Callable[[str], str]) -> str:
    """Plurality answer under normalization-keyed grouping.

    Returns the first-occurrence raw form of the largest group; ties break
    toward the group appearing earliest in the input.
    """
    if not answers:
        raise EmptyVote("no answers to vote over")
    groups: dict[str, dict] = {}
    for i, answer in enumerate(answers):
        key = normalizer(answer)
        group = groups.setdefault(key, {"count": 0, "first": i, "raw": answer})
        group["count"] += 1
    best = max(groups.values(), key=lambda g: (g["count"], -g["first"]))
    return best["raw"]


def vote_tally(answers: Sequence[str], normalizer: Callable[[str], str]) -> dict[str, int]:
    """Counts per group, keyed by each group's first-occurrence raw form."""
    tally: dict[str, int] = {}
    reps: dict[str, str] = {}
    for answer in answers:
        key = normalizer(answer)
        rep = reps.setdefault(key, answer)
        tally[rep] = tally.get(rep, 0) + 1
    return tally


@dataclass
class ConsistencyResult:
    """Self-consistency outcome: the vote winner plus the full audit trail."""

    answer: str
    tally: dict[str, int]
    paths: list[RationaleAnswer]
    warnings: list[str] = field(default_factory=list)


def self_consistency(
    ctx: PromptContext,
    backend: Backend,
    cfg: ConsistencyConfig,
    normalizer: Callable[[str], str],
    image_ref: Optional[str] = None,
    cot_template: str = "reason-qa",
    base_seed: int = 0,
    max_in_flight: int = 4,
) -> ConsistencyResult:
    """Sample n_paths CoT generations, extract answers, majority-vote them.

    Paths are seeded base_seed + index and re-ordered by index before voting,
    so concurrency never perturbs tie-breaks. Failed paths are dropped with a
    warning; all paths failing raises BackendError.
    """
    registry = builtin_registry()
    prompt = render(registry[cot_template], ctx)
    gen = preset("consistency-path")
    gen.temperature = cfg.temperature
    reqs = [
        BackendRequest(
            prompt=prompt.text,
            gen=with_seed(gen, base_seed + i),
            purpose="rationale",
            image_ref=image_ref,
        )
        for i in range(cfg.n_paths)
    ]
    results = complete_batch(backend, reqs, max_in_flight=max_in_flight)

    paths: list[RationaleAnswer] = []
    warnings: list[str] = []
    for i, result in enumerate(results):  # results are index-aligned with paths
        if isinstance(result, BackendResponse):
            raw = result.texts[0]
            answer = extract_final_answer(raw)
            paths.append(RationaleAnswer(rationale=split_rationale(raw, answer), answer=answer, raw=raw))
        else:
            warnings.append(f"path {i} failed: {result}")
    if not paths:
        raise BackendError("transport", f"all {cfg.n_paths} consistency paths failed")
    if len(paths) < cfg.n_paths / 2:
        warnings.append(f"only {len(paths)}/{cfg.n_paths} paths succeeded")

    answers = [p.answer for p in paths]
    return ConsistencyResult(
        answer=majority_vote(answers, normalizer),
        tally=vote_tally(answers, normalizer),
        paths=paths,
        warnings=warnings,
    )
