"""Free-form answer grading: normalization, parsing, accuracy and rouge."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from importlib.resources import files
from typing import Optional, Sequence

from .backends import Backend, BackendRequest, GenerationConfig, preset
from .errors import BackendError

ARTICLES = {"a", "an", "the"}
PREPOSITIONS = {"of", "in", "on", "at", "to", "for", "with", "by", "from"}
NUMBER_WORDS = {
    "zero": "0", "one": "1", "two": "2", "three": "3", "four": "4",
    "five": "5", "six": "6", "seven": "7", "eight": "8", "nine": "9",
    "ten": "10",
}

_IRREGULAR_LEMMAS = {
    "men": "man", "women": "woman", "children": "child", "people": "person",
    "feet": "foot", "teeth": "tooth", "geese": "goose", "mice": "mouse",
    "knives": "knife", "leaves": "leaf", "loaves": "loaf", "wives": "wife",
    "lives": "life", "shelves": "shelf", "wolves": "wolf", "halves": "half",
    "ran": "run", "ate": "eat", "saw": "see", "went": "go", "made": "make",
    "sat": "sit", "stood": "stand", "held": "hold", "wore": "wear",
    "took": "take", "gave": "give", "got": "get", "came": "come",
}

_VOWELS = set("aeiouy")
_APOSTROPHE_RE = re.compile(r"['’]")
_PUNCT_RE = re.compile(r"[^\w\s]", re.UNICODE)
_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")


def _has_vowel(word: str) -> bool:
    return any(c in _VOWELS for c in word)


def _undouble(stem: str) -> str:
    # running -> runn -> run; but fall/miss/buzz keep their doubled ending
    if len(stem) >= 3 and stem[-1] == stem[-2] and stem[-1] not in "lsz":
        return stem[:-1]
    return stem


def _lemma_once(word: str) -> str:
    if word in _IRREGULAR_LEMMAS:
        return _IRREGULAR_LEMMAS[word]
    if len(word) >= 5 and word.endswith("ies"):
        return word[:-3] + "y"
    if len(word) >= 5 and word.endswith(("xes", "ches", "shes", "sses", "zes")):
        return word[:-2]
    if len(word) >= 4 and word.endswith("s") and not word.endswith(("ss", "us", "is")):
        return word[:-1]
    if len(word) >= 5 and word.endswith("ied"):
        return word[:-3] + "y"
    if len(word) >= 6 and word.endswith("ing") and _has_vowel(word[:-3]):
        return _undouble(word[:-3])
    if len(word) >= 5 and word.endswith("ed") and not word.endswith("eed") and _has_vowel(word[:-2]):
        return _undouble(word[:-2])
    return word


def lemmatize(word: str) -> str:
    """Rule-based lemma: irregular table plus suffix rules, run to a fixpoint."""
    for _ in range(5):
        nxt = _lemma_once(word)
        if nxt == word:
            break
        word = nxt
    return word


def normalize(text: str) -> str:
    """Canonical answer form used for all string matching.

    Lowercases, strips punctuation, lemmatizes each token, maps number words
    zero..ten to digits, drops articles and a fixed preposition list, and
    collapses whitespace. Idempotent by construction.
    """
    text = _APOSTROPHE_RE.sub("", text.lower())
    text = _PUNCT_RE.sub(" ", text)
    out = []
    for token in text.split():
        token = lemmatize(token)
        token = NUMBER_WORDS.get(token, token)
        if token in ARTICLES or token in PREPOSITIONS:
            continue
        out.append(token)
    return " ".join(out)


def split_sentences(text: str) -> list[str]:
    """Split on ., ! or ? followed by whitespace or end of text."""
    text = text.strip()
    if not text:
        return []
    return [s for s in _SENTENCE_SPLIT_RE.split(text) if s.strip()]


@dataclass
class ReferenceAnswers:
    """The human reference answers for one question."""

    answers: list[str]

    def __post_init__(self):
        if not self.answers:
            raise ValueError("need at least one reference answer")
        self._normalized = [normalize(a) for a in self.answers]

    @property
    def normalized(self) -> list[str]:
        return list(self._normalized)


@dataclass
class GradedAnswer:
    """One grading outcome with provenance."""

    raw: str
    parsed: str
    normalized: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0,1], got {self.score}")
        if self.normalized != normalize(self.parsed):
            raise ValueError("normalized must equal normalize(parsed)")

    @classmethod
    def from_parsed(cls, raw: str, parsed: str, score: float) -> "GradedAnswer":
        return cls(raw=raw, parsed=parsed, normalized=normalize(parsed), score=score)


@dataclass(frozen=True)
class WinogroundQuad:
    """Four yes/no questions covering both images x both captions.

    Each item is (image_ref, question, expected) with expected "yes" or "no";
    exactly two of each.
    """

    items: tuple

    def __post_init__(self):
        if len(self.items) != 4:
            raise ValueError("a quad has exactly four questions")
        expected = [e for _, _, e in self.items]
        if sorted(expected) != ["no", "no", "yes", "yes"]:
            raise ValueError("a quad expects exactly two yes and two no answers")


def vqa_accuracy(candidate: str, refs: ReferenceAnswers) -> float:
    """min(matching references / 3, 1) after normalizing both sides."""
    cand = normalize(candidate)
    matches = sum(1 for r in refs.normalized if r == cand)
    return min(matches / 3.0, 1.0)


def binary_accuracy(candidate: str, ref: str) -> int:
    """1 iff the normalized forms are equal."""
    return int(normalize(candidate) == normalize(ref))


def yes_no_of(text: str) -> str:
    """Reduce free text to "yes", "no" or "unknown"."""
    norm = normalize(text)
    for label in ("yes", "no"):
        if norm == label or norm.startswith(label + " "):
            return label
    return "unknown"


def winoground_group_score(quad: WinogroundQuad, answers: Sequence[str]) -> int:
    """All-or-nothing score over the four yes/no questions.

    Answers that do not reduce to yes/no count as wrong.
    """
    if len(answers) != 4:
        raise ValueError("need exactly four answers, aligned with the quad")
    for (_, _, expected), answer in zip(quad.items, answers):
        if yes_no_of(answer) != expected:
            return 0
    return 1


def _tokens(text: str) -> list[str]:
    return text.lower().split()


def _f1(overlap: int, n_cand: int, n_ref: int) -> float:
    if overlap == 0 or n_cand == 0 or n_ref == 0:
        return 0.0
    precision = overlap / n_cand
    recall = overlap / n_ref
    return 2 * precision * recall / (precision + recall)


def rouge_n(candidate: str, reference: str, n: int) -> float:
    """N-gram overlap F1 over whitespace tokens, n in {1, 2}."""
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    cand, ref = _tokens(candidate), _tokens(reference)
    if len(cand) < n or len(ref) < n:
        return 0.0
    cand_grams = Counter(tuple(cand[i:i + n]) for i in range(len(cand) - n + 1))
    ref_grams = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
    overlap = sum((cand_grams & ref_grams).values())
    return _f1(overlap, sum(cand_grams.values()), sum(ref_grams.values()))


def rouge_l(candidate: str, reference: str) -> float:
    """Longest-common-subsequence F1 over whitespace tokens."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 0.0
    prev = [0] * (len(ref) + 1)
    for c in cand:
        cur = [0]
        for j, r in enumerate(ref, start=1):
            cur.append(prev[j - 1] + 1 if c == r else max(prev[j], cur[j - 1]))
        prev = cur
    return _f1(prev[-1], len(cand), len(ref))


def _parse_demos() -> str:
    return files("vqaharness.assets").joinpath("parse_demos.txt").read_text(encoding="utf-8")


def build_parse_prompt(question: str, verbose_answer: str) -> str:
    """Demonstration block plus the input pair, ending with "Short answer:"."""
    if not question.strip() or not verbose_answer.strip():
        raise ValueError("question and verbose answer must be non-empty")
    return (
        _parse_demos().rstrip("\n")
        + "\n"
        + f"Input: {question.strip()} {verbose_answer.strip()}\n"
        + "Short answer:"
    )


SHORT_ANSWER_WORD_LIMIT = 3


@dataclass
class ParseResult:
    """Outcome of LLM-guided short-answer parsing."""

    text: str
    used_backend: bool = False
    fallback: bool = False
    warnings: list[str] = field(default_factory=list)


def llm_parse(
    question: str,
    verbose_answer: str,
    backend: Backend,
    gen: Optional[GenerationConfig] = None,
) -> ParseResult:
    """Parse a verbose answer into a short one via a text-only backend.

    Answers of at most three words skip the call. On backend failure the
    result falls back to pattern extraction and is flagged ParseFallback.
    """
    if len(verbose_answer.split()) <= SHORT_ANSWER_WORD_LIMIT:
        return ParseResult(text=verbose_answer)
    req = BackendRequest(
        prompt=build_parse_prompt(question, verbose_answer),
        gen=gen or preset("parse"),
        purpose="parse",
    )
    try:
        response = backend.complete(req)
    except BackendError as exc:
        from .cot import extract_final_answer

        return ParseResult(
            text=extract_final_answer(verbose_answer),
            fallback=True,
            warnings=[f"ParseFallback: {exc}"],
        )
    first_line = response.texts[0].strip().splitlines()
    return ParseResult(text=first_line[0].strip() if first_line else "", used_backend=True)
