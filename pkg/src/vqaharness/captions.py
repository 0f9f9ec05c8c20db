"""Caption generation strategies and caption/context plumbing.

Three strategies: dense (sample several raw captions, fuse with a text-only
model), grounded (single call against a grounding-capable server, passed
through untouched), and question_guided (caption directed by the question).
"""
from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass, field, replace
from importlib.resources import files
from pathlib import Path
from typing import Optional, Union

from .backends import Backend, BackendRequest, GenerationConfig, preset
from .errors import CaptionAlreadySet, FusionEmpty
from .templates import PromptContext, builtin_registry, render_any

STRATEGIES = ("dense", "grounded", "question_guided")
DEFAULT_DENSE_SAMPLES = 5

_WS_RE = re.compile(r"\s+")


def _flatten(text: str) -> str:
    """Captions are single-paragraph: newlines collapse to spaces."""
    return _WS_RE.sub(" ", text).strip()


@dataclass
class CaptionRequest:
    """What to caption and how."""

    image_ref: str
    strategy: str
    question: Optional[str] = None
    n_samples: int = DEFAULT_DENSE_SAMPLES

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown caption strategy: {self.strategy!r}")
        if self.strategy == "question_guided" and not self.question:
            raise ValueError("question_guided captions need a question")
        if self.strategy != "question_guided" and self.question is not None:
            raise ValueError("only question_guided captions take a question")
        if self.strategy == "dense" and self.n_samples < 2:
            raise ValueError("dense captions need n_samples >= 2")


@dataclass
class Caption:
    """One finished caption plus the raw backend outputs behind it."""

    text: str
    strategy: str
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.text = _flatten(self.text)
        if not self.text:
            raise ValueError("caption text must be non-empty")


def sample_raw_captions(
    image_ref: str,
    n: int,
    backend: Backend,
    gen: Optional[GenerationConfig] = None,
) -> list[str]:
    """Sample n raw captions with the a-photo-of template."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = gen or _dense_sampling_config()
    gen = replace(gen, n=n)
    prompt = builtin_registry()["a-photo-of"].pattern
    response = backend.complete(
        BackendRequest(prompt=prompt, gen=gen, purpose="caption", image_ref=image_ref)
    )
    return [_flatten(t) for t in response.texts]


def _dense_sampling_config() -> GenerationConfig:
    # caption lengths per the inference presets, but sampled for diversity
    return GenerationConfig(mode="sample", temperature=0.7, max_new_tokens=128, length_penalty=1.0)


def fusion_prompt(raws: list[str]) -> str:
    """The versioned fusion prompt with the raw captions filled in."""
    asset = files("vqaharness.assets").joinpath("caption_fusion_prompt.txt").read_text(encoding="utf-8")
    listed = "\n".join("- " + _flatten(r) for r in raws)
    return asset.replace("{captions}", listed)


def fuse_captions(raws: list[str], backend: Backend, gen: Optional[GenerationConfig] = None) -> Caption:
    """Fuse several raw captions into one description via a text-only call."""
    if len(raws) < 2:
        raise ValueError("fusion needs at least 2 raw captions")
    gen = gen or preset("caption")
    response = backend.complete(
        BackendRequest(prompt=fusion_prompt(raws), gen=gen, purpose="caption")
    )
    fused = _flatten(response.texts[0])
    if not fused:
        raise FusionEmpty("fusion produced an empty caption")
    return Caption(text=fused, strategy="dense", provenance=list(raws))


def dense_caption(
    image_ref: str,
    backend: Backend,
    n_samples: int = DEFAULT_DENSE_SAMPLES,
    sample_gen: Optional[GenerationConfig] = None,
    fuse_gen: Optional[GenerationConfig] = None,
) -> Caption:
    """Sample raw captions, then fuse them."""
    raws = sample_raw_captions(image_ref, n_samples, backend, sample_gen)
    return fuse_captions(raws, backend, fuse_gen)


def grounded_caption(
    image_ref: str,
    backend: Backend,
    gen: Optional[GenerationConfig] = None,
) -> Caption:
    """One caption from a grounding-capable backend, passed through untouched
    except trimming; entity spans are not parsed here."""
    raws = sample_raw_captions(image_ref, 1, backend, gen or preset("caption"))
    return Caption(text=raws[0], strategy="grounded", provenance=raws)


def question_guided_caption(
    image_ref: str,
    question: str,
    backend: Backend,
    gen: Optional[GenerationConfig] = None,
) -> Caption:
    """Caption directed by the question, via the q-guided-cap template."""
    if not question or not question.strip():
        raise ValueError("question must be non-empty")
    template = builtin_registry()["q-guided-cap"]
    prompt = render_any(template, PromptContext(question=question))
    response = backend.complete(
        BackendRequest(
            prompt=prompt.text,
            gen=gen or preset("caption"),
            purpose="caption",
            image_ref=image_ref,
        )
    )
    return Caption(text=response.texts[0], strategy="question_guided", provenance=[response.texts[0]])


def generate_caption(request: CaptionRequest, backend: Backend) -> Caption:
    """Dispatch a CaptionRequest to its strategy."""
    if request.strategy == "dense":
        return dense_caption(request.image_ref, backend, request.n_samples)
    if request.strategy == "grounded":
        return grounded_caption(request.image_ref, backend)
    return question_guided_caption(request.image_ref, request.question, backend)


def attach_caption(ctx: PromptContext, caption: Caption) -> PromptContext:
    """A copy of the context with the caption filled in."""
    if ctx.caption is not None:
        raise CaptionAlreadySet("context already carries a caption")
    return replace(ctx, caption=caption.text)


def caption_key(image_ref: str, strategy: str, question: Optional[str] = None) -> str:
    """Cache key: image, strategy and a digest of the guiding question."""
    question_digest = hashlib.sha256((question or "").encode("utf-8")).hexdigest()[:16]
    raw = json.dumps([image_ref, strategy, question_digest])
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()


class CaptionCache:
    """JSONL-backed caption cache; safe for concurrent use, last writer wins."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, Caption] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    entry = json.loads(line)
                    self._entries[entry["key"]] = Caption(
                        text=entry["text"],
                        strategy=entry["strategy"],
                        provenance=entry.get("provenance", []),
                    )

    def get(self, key: str) -> Optional[Caption]:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, caption: Caption) -> None:
        entry = {
            "key": key,
            "strategy": caption.strategy,
            "text": caption.text,
            "provenance": caption.provenance,
        }
        line = json.dumps(entry, sort_keys=True, ensure_ascii=False) + "\n"
        with self._lock:
            self._entries[key] = caption
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)

    def get_or_create(self, request: CaptionRequest, backend: Backend) -> Caption:
        key = caption_key(request.image_ref, request.strategy, request.question)
        hit = self.get(key)
        if hit is not None:
            return hit
        caption = generate_caption(request, backend)
        self.put(key, caption)
        return caption
