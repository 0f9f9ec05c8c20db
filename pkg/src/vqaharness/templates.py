"""Prompt templates and the pure rendering engine.

Patterns use three literal placeholders: {q} (question), {o} (options) and
{s} (statement/caption). There is no escaping mechanism; substituted text is
never re-scanned, so questions containing braces pass through unmodified.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .errors import (
    AlreadyWrapped,
    EmptyCaption,
    ExemplarFieldMissing,
    MissingInstruction,
    OptionsTooFew,
)

FAMILIES = ("standard", "cot", "caption-wrapper", "captioning")

_PLACEHOLDER_RE = re.compile(r"(\{q\}|\{o\}|\{s\})")
_MULTISPACE_RE = re.compile(r" {2,}")


@dataclass(frozen=True)
class TemplateSpec:
    """A named prompt pattern."""

    name: str
    family: str
    pattern: str

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown template family: {self.family!r}")
        has_q = "{q}" in self.pattern
        has_s = "{s}" in self.pattern
        if self.family in ("standard", "cot") and not has_q:
            raise ValueError(f"{self.name}: {self.family} patterns must contain {{q}}")
        if self.family == "caption-wrapper" and not has_s:
            raise ValueError(f"{self.name}: caption-wrapper patterns must contain {{s}}")
        if self.family != "caption-wrapper" and has_s:
            raise ValueError(f"{self.name}: only caption-wrapper patterns may contain {{s}}")
        if self.family == "caption-wrapper" and has_q:
            raise ValueError(f"{self.name}: caption-wrapper patterns must not contain {{q}}")


@dataclass
class PromptContext:
    """Everything a template may pull from one dataset item."""

    question: str
    options: Optional[list[str]] = None
    caption: Optional[str] = None
    task_instruction: Optional[str] = None
    is_binary_question: bool = False

    def __post_init__(self):
        if not self.question or not self.question.strip():
            raise ValueError("question must be non-empty")
        if self.options is not None and len(self.options) == 0:
            self.options = None  # empty list is equivalent to absent
        if self.options is not None and len(self.options) < 2:
            raise ValueError("options, when present, need at least 2 entries")


@dataclass(frozen=True)
class RenderedPrompt:
    """Final prompt text plus how to send it."""

    text: str
    attach_image: bool
    family: str
    wrapped: bool = False  # guards against double Context: prefixes


class TemplateRegistry:
    """Immutable name -> TemplateSpec mapping with JSON round-tripping."""

    def __init__(self, templates: Iterable[TemplateSpec]):
        self._templates: dict[str, TemplateSpec] = {}
        for spec in templates:
            if spec.name in self._templates:
                raise ValueError(f"duplicate template name: {spec.name}")
            self._templates[spec.name] = spec

    def __getitem__(self, name: str) -> TemplateSpec:
        return self._templates[name]

    def __contains__(self, name: str) -> bool:
        return name in self._templates

    def __iter__(self):
        return iter(self._templates.values())

    def __len__(self) -> int:
        return len(self._templates)

    def names(self) -> list[str]:
        return list(self._templates)

    def get(self, name: str) -> Optional[TemplateSpec]:
        return self._templates.get(name)

    def to_json(self) -> str:
        doc = {t.name: {"family": t.family, "pattern": t.pattern} for t in self}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TemplateRegistry":
        doc = json.loads(text)
        return cls(
            TemplateSpec(name=name, family=entry["family"], pattern=entry["pattern"])
            for name, entry in doc.items()
        )

    def extended(self, templates: Iterable[TemplateSpec]) -> "TemplateRegistry":
        """A new registry with extra templates added."""
        return TemplateRegistry(list(self) + list(templates))


_BUILTINS = [
    TemplateSpec("Null", "standard", "{q}"),
    TemplateSpec("qa", "standard", "Question: {q} {o} Answer:"),
    TemplateSpec("short-qa", "standard", "Question: {q} {o} Short Answer:"),
    TemplateSpec("follow-qa", "standard", "Answer the following question. {q} {o}"),
    TemplateSpec("instruct-qa", "standard", "Question: {q} {o} Answer:"),
    TemplateSpec("reason-qa", "cot", "Answer the following question by reasoning step-by-step. Q: {q} A:"),
    TemplateSpec("think-qa", "cot", "Q: {q} A: Let's think step-by-step"),
    TemplateSpec("caption-wrapper", "caption-wrapper", "Context: {s}"),
    TemplateSpec("a-photo-of", "captioning", "A photo of"),
    TemplateSpec("q-guided-cap", "captioning", "Describe the image according to the following question {q}"),
]


def builtin_registry() -> TemplateRegistry:
    """The ten built-in templates."""
    return TemplateRegistry(_BUILTINS)


def format_options(options: Sequence[str], proper_nouns: Sequence[str] = ()) -> str:
    """Join options as a question: "A, b or c?".

    The first option is capitalized; the rest are lowercased unless listed in
    ``proper_nouns``.
    """
    if len(options) < 2:
        raise OptionsTooFew(f"need at least 2 options, got {len(options)}")
    keep = {o for o in proper_nouns}

    def shape(opt: str, first: bool) -> str:
        opt = opt.strip()
        if first:
            return opt[0].upper() + opt[1:]
        return opt if opt in keep else opt.lower()

    shaped = [shape(o, i == 0) for i, o in enumerate(options)]
    return ", ".join(shaped[:-1]) + " or " + shaped[-1] + "?"


def _substitute(pattern: str, mapping: dict[str, str]) -> str:
    # Split on placeholders so substituted text is never re-scanned.
    parts = _PLACEHOLDER_RE.split(pattern)
    return "".join(mapping.get(p, p) for p in parts)


def _tidy(text: str) -> str:
    return _MULTISPACE_RE.sub(" ", text).strip()


def render(template: TemplateSpec, ctx: PromptContext) -> RenderedPrompt:
    """Render a standard or CoT template against a context."""
    if template.family not in ("standard", "cot"):
        raise ValueError(f"render() handles standard/cot templates, not {template.family}")
    options_text = format_options(ctx.options) if ctx.options else ""
    text = _substitute(template.pattern, {"{q}": ctx.question.strip(), "{o}": options_text})
    if template.name == "instruct-qa":
        if not ctx.task_instruction or not ctx.task_instruction.strip():
            raise MissingInstruction("instruct-qa needs ctx.task_instruction")
        text = ctx.task_instruction.strip() + " " + text
    if template.name == "short-qa" and ctx.is_binary_question:
        text = text + " yes or no?"
    return RenderedPrompt(text=_tidy(text), attach_image=True, family=template.family)


def render_any(template: TemplateSpec, ctx: PromptContext) -> RenderedPrompt:
    """Render a template of any family; dispatches on the family."""
    if template.family in ("standard", "cot"):
        return render(template, ctx)
    if template.family == "captioning":
        text = _substitute(template.pattern, {"{q}": ctx.question.strip()})
        return RenderedPrompt(text=_tidy(text), attach_image=True, family=template.family)
    # caption-wrapper
    if not ctx.caption or not ctx.caption.strip():
        raise EmptyCaption("caption-wrapper needs ctx.caption")
    text = _substitute(template.pattern, {"{s}": ctx.caption.strip()})
    return RenderedPrompt(text=_tidy(text), attach_image=True, family=template.family)


def wrap_with_caption(inner: RenderedPrompt, caption: str) -> RenderedPrompt:
    """Prefix a rendered prompt with "Context: <caption>"."""
    caption = (caption or "").strip()
    if not caption:
        raise EmptyCaption("cannot wrap with an empty caption")
    if inner.wrapped:
        raise AlreadyWrapped("prompt already carries a Context: prefix")
    return RenderedPrompt(
        text="Context: " + caption + " " + inner.text,
        attach_image=inner.attach_image,
        family=inner.family,
        wrapped=True,
    )


FEW_SHOT_PREAMBLE = (
    "In this task, your goal is to write an answer to a given question about the image.\n"
    "To write the answer, here are some sample QA suggestions (not relevant to the image):"
)
FEW_SHOT_CLOSING = "Now answer the following question about the image."
MAX_EXEMPLARS = 5

_EXEMPLAR_SETTINGS = ("standard", "caption", "cot")


def _question_line(question: str, options: Optional[Sequence[str]]) -> str:
    line = "Question: " + question.strip()
    if options:
        line += " " + format_options(options)
    return line


def _exemplar_lines(exemplar, setting: str) -> str:
    if setting == "caption":
        if not getattr(exemplar, "caption", None):
            raise ExemplarFieldMissing(f"exemplar {exemplar.question!r} has no caption")
        return (
            f"Context: {exemplar.caption.strip()}\n"
            f"Question: {exemplar.question.strip()}\n"
            f"Answer: {exemplar.answer.strip()}"
        )
    if setting == "cot":
        if not getattr(exemplar, "rationale", None):
            raise ExemplarFieldMissing(f"exemplar {exemplar.question!r} has no rationale")
        return (
            f"Question: {exemplar.question.strip()}\n"
            f"Rationale: {exemplar.rationale.strip()}\n"
            f"Answer: {exemplar.answer.strip()}"
        )
    return f"Question: {exemplar.question.strip()}\nAnswer: {exemplar.answer.strip()}"


def _test_block(setting: str, ctx: PromptContext) -> str:
    lines = []
    if setting == "caption" and ctx.caption:
        lines.append("Context: " + ctx.caption.strip())
    lines.append(_question_line(ctx.question, ctx.options))
    lines.append("Rationale:" if setting == "cot" else "Answer:")
    return "\n".join(lines)


def render_exemplar_block(
    exemplars: Sequence,
    setting: str,
    ctx: PromptContext,
    zero_shot: Optional[RenderedPrompt] = None,
) -> str:
    """Frame few-shot exemplars and the test question as one prompt.

    With no exemplars this falls back to ``zero_shot`` when given, else to the
    bare test block. Exemplars must carry a caption (caption setting) or a
    rationale (cot setting).
    """
    if setting not in _EXEMPLAR_SETTINGS:
        raise ValueError(f"unknown few-shot setting: {setting!r}")
    if len(exemplars) > MAX_EXEMPLARS:
        raise ValueError(f"at most {MAX_EXEMPLARS} exemplars, got {len(exemplars)}")
    if not exemplars:
        return zero_shot.text if zero_shot is not None else _test_block(setting, ctx)
    demos = "\n\n".join(_exemplar_lines(e, setting) for e in exemplars)
    closing = FEW_SHOT_CLOSING
    if ctx.task_instruction:
        closing += " " + ctx.task_instruction.strip()
    return (
        FEW_SHOT_PREAMBLE
        + "\n\n---\n"
        + demos
        + "\n---\n\n"
        + closing
        + "\n\n"
        + _test_block(setting, ctx)
    )

