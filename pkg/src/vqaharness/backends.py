"""Clients for text/vision inference servers, plus record/replay for tests.

The wire protocol is a chat/completions-style JSON HTTP API with an optional
image attachment. Beam-search settings travel as extension fields and degrade
to greedy (with a logged warning) when the server rejects them.
"""
from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Protocol, Union

import requests

from .errors import BackendError, ReplayMiss, UnknownPreset

log = logging.getLogger(__name__)

MODES = ("beam", "sample", "greedy")
PURPOSES = ("answer", "caption", "rationale", "parse", "convert", "embed")
TEXT_ONLY_PURPOSES = ("parse", "convert", "embed")


@dataclass
class GenerationConfig:
    """Decode settings forwarded to the backend."""

    mode: str = "greedy"
    beam_size: int = 1
    temperature: float = 1.0
    n: int = 1
    max_new_tokens: int = 10
    length_penalty: float = 0.0
    seed: Optional[int] = None
    omit_image: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown decode mode: {self.mode!r}")
        if self.mode == "beam" and self.beam_size < 1:
            raise ValueError("beam_size must be >= 1 in beam mode")
        if self.mode == "sample" and self.temperature <= 0:
            raise ValueError("temperature must be > 0 in sample mode")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")

    def canonical(self) -> dict:
        """Stable dict used for request digests; field order never matters."""
        return {
            "mode": self.mode,
            "beam_size": self.beam_size,
            "temperature": self.temperature,
            "n": self.n,
            "max_new_tokens": self.max_new_tokens,
            "length_penalty": self.length_penalty,
            "seed": self.seed,
            "omit_image": self.omit_image,
        }


@dataclass
class BackendRequest:
    """One generation request."""

    prompt: str
    gen: GenerationConfig
    purpose: str = "answer"
    image_ref: Optional[str] = None

    def __post_init__(self):
        if self.purpose not in PURPOSES:
            raise ValueError(f"unknown purpose: {self.purpose!r}")
        if self.purpose in TEXT_ONLY_PURPOSES and self.image_ref is not None:
            raise ValueError(f"{self.purpose} requests are text-only")

    def digest(self) -> str:
        payload = json.dumps(
            {"prompt": self.prompt, "image_ref": self.image_ref, "gen": self.gen.canonical()},
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class BackendResponse:
    """Generated texts; length equals the requested n."""

    texts: list[str]
    scores: Optional[list[float]] = None
    latency: float = 0.0
    backend_id: str = ""


class Backend(Protocol):
    def complete(self, req: BackendRequest) -> BackendResponse: ...


_PRESETS: dict[str, Callable[[], GenerationConfig]] = {
    # answers: beam search, beam 3, short outputs biased shorter
    "answer": lambda: GenerationConfig(mode="beam", beam_size=3, max_new_tokens=10, length_penalty=-1.0),
    # verbose models get more room for their answer before parsing
    "verbose-answer": lambda: GenerationConfig(mode="beam", beam_size=3, max_new_tokens=50, length_penalty=-1.0),
    "caption": lambda: GenerationConfig(mode="beam", beam_size=3, max_new_tokens=128, length_penalty=1.0),
    "rationale": lambda: GenerationConfig(mode="beam", beam_size=3, max_new_tokens=128, length_penalty=1.0),
    "consistency-path": lambda: GenerationConfig(mode="sample", temperature=0.7, max_new_tokens=128, length_penalty=1.0),
    "parse": lambda: GenerationConfig(mode="greedy", max_new_tokens=10),
    "convert": lambda: GenerationConfig(mode="greedy", max_new_tokens=50),
}


def preset(tag: str) -> GenerationConfig:
    """A fresh GenerationConfig for a known purpose tag."""
    try:
        return _PRESETS[tag]()
    except KeyError:
        raise UnknownPreset(f"no generation preset named {tag!r}") from None


class HTTPBackend:
    """Client for a chat/completions-style inference server."""

    TRANSIENT_STATUS = {408, 429, 500, 502, 503, 504}

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: Optional[str] = None,
        timeout: float = 120.0,
        max_retries: int = 3,
        backoff: float = 0.5,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._session = session or requests.Session()

    @property
    def backend_id(self) -> str:
        return f"{self.endpoint}#{self.model}"

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _payload(self, req: BackendRequest, with_extensions: bool) -> dict:
        gen = req.gen
        attach_image = req.image_ref is not None and not gen.omit_image
        if attach_image:
            content = [
                {"type": "text", "text": req.prompt},
                {"type": "image_url", "image_url": {"url": req.image_ref}},
            ]
        else:
            content = req.prompt
        payload: dict = {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": gen.max_new_tokens,
            "n": gen.n,
        }
        if gen.mode == "sample":
            payload["temperature"] = gen.temperature
        else:
            payload["temperature"] = 0.0
        if gen.seed is not None:
            payload["seed"] = gen.seed
        if with_extensions and gen.mode == "beam":
            payload["num_beams"] = gen.beam_size
            payload["length_penalty"] = gen.length_penalty
        return payload

    def _post(self, payload: dict) -> requests.Response:
        last_exc: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._session.post(
                    self.endpoint + "/chat/completions",
                    json=payload,
                    headers=self._headers(),
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                last_exc = exc
                if attempt < self.max_retries:
                    time.sleep(self.backoff * (2 ** attempt))
                    continue
                raise BackendError("transport", f"request failed after retries: {exc}")
            if resp.status_code in self.TRANSIENT_STATUS:
                last_exc = BackendError("transport", f"HTTP {resp.status_code}")
                if attempt < self.max_retries:
                    time.sleep(self.backoff * (2 ** attempt))
                    continue
                raise last_exc
            return resp
        raise BackendError("transport", f"request failed: {last_exc}")

    def complete(self, req: BackendRequest) -> BackendResponse:
        start = time.monotonic()
        resp = self._post(self._payload(req, with_extensions=True))
        if resp.status_code == 400 and req.gen.mode == "beam":
            log.warning("server rejected beam-search extensions; degrading to greedy")
            resp = self._post(self._payload(req, with_extensions=False))
        if 400 <= resp.status_code < 500:
            raise BackendError("request", f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            choices = body["choices"]
            texts = []
            for choice in choices:
                if "message" in choice:
                    texts.append(choice["message"]["content"].strip())
                else:
                    texts.append(choice["text"].strip())
        except (ValueError, KeyError, TypeError) as exc:
            raise BackendError("protocol", f"malformed response body: {exc}")
        if len(texts) != req.gen.n:
            raise BackendError(
                "protocol", f"expected {req.gen.n} completions, got {len(texts)}"
            )
        return BackendResponse(
            texts=texts,
            latency=time.monotonic() - start,
            backend_id=self.backend_id,
        )


class ScriptedBackend:
    """Deterministic in-process backend for tests and offline demos.

    Responses come from an exact prompt -> texts mapping when one matches,
    else from ``fallback(request)``; the default fallback derives a short
    answer from a stable hash of the request digest.
    """

    def __init__(
        self,
        script: Optional[dict[str, Union[str, list[str]]]] = None,
        fallback: Optional[Callable[[BackendRequest], list[str]]] = None,
        vocabulary: Optional[list[str]] = None,
    ):
        self.script = dict(script or {})
        self.fallback = fallback
        self.vocabulary = vocabulary or ["red", "blue", "two", "yes", "no", "cat", "dog"]

    def _default_texts(self, req: BackendRequest) -> list[str]:
        out = []
        for i in range(req.gen.n):
            h = hashlib.sha256(f"{req.digest()}:{i}".encode()).digest()
            out.append(self.vocabulary[h[0] % len(self.vocabulary)])
        return out

    def complete(self, req: BackendRequest) -> BackendResponse:
        if req.prompt in self.script:
            hit = self.script[req.prompt]
            texts = [hit] * req.gen.n if isinstance(hit, str) else list(hit)
        elif self.fallback is not None:
            texts = self.fallback(req)
        else:
            texts = self._default_texts(req)
        if len(texts) != req.gen.n:
            raise BackendError("protocol", f"scripted {len(texts)} texts for n={req.gen.n}")
        return BackendResponse(texts=[t.strip() for t in texts], backend_id="scripted")


class ReplayBackend:
    """Record/replay wrapper keyed by the request digest.

    record: forwards to the inner backend and appends digest -> response to a
    JSONL store. replay: serves only from the store, raising ReplayMiss on
    unknown digests. passthrough: forwards without touching the store.
    """

    def __init__(self, mode: str, store_path: Union[str, Path], inner: Optional[Backend] = None):
        if mode not in ("record", "replay", "passthrough"):
            raise ValueError(f"unknown replay mode: {mode!r}")
        if mode in ("record", "passthrough") and inner is None:
            raise ValueError(f"{mode} mode needs an inner backend")
        self.mode = mode
        self.store_path = Path(store_path)
        self.inner = inner
        self._lock = threading.Lock()
        self._store: dict[str, dict] = {}
        if mode == "replay":
            self._load()

    def _load(self):
        if not self.store_path.exists():
            return
        with open(self.store_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                self._store[entry["digest"]] = entry["response"]

    def store_digest(self) -> str:
        """Hash of the replay store file (empty-file hash when absent)."""
        h = hashlib.sha256()
        if self.store_path.exists():
            h.update(self.store_path.read_bytes())
        return h.hexdigest()

    def _append(self, digest: str, req: BackendRequest, response: BackendResponse):
        entry = {
            "digest": digest,
            "request": {
                "prompt": req.prompt,
                "image_ref": req.image_ref,
                "purpose": req.purpose,
                "gen": req.gen.canonical(),
            },
            "response": {"texts": response.texts, "scores": response.scores},
        }
        line = json.dumps(entry, sort_keys=True, ensure_ascii=False) + "\n"
        with self._lock:
            self.store_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.store_path, "a", encoding="utf-8") as fh:
                fh.write(line)

    def complete(self, req: BackendRequest) -> BackendResponse:
        digest = req.digest()
        if self.mode == "replay":
            with self._lock:
                hit = self._store.get(digest)
            if hit is None:
                raise ReplayMiss(digest)
            return BackendResponse(texts=list(hit["texts"]), scores=hit.get("scores"), backend_id="replay")
        response = self.inner.complete(req)
        if self.mode == "record":
            self._append(digest, req, response)
        return response


BatchResult = Union[BackendResponse, BackendError]


def complete_batch(
    backend: Backend, reqs: list[BackendRequest], max_in_flight: int = 4
) -> list[BatchResult]:
    """Run requests with bounded concurrency; results stay index-aligned.

    Failures are carried per-slot as BackendError values and never abort the
    batch.
    """
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be >= 1")

    def one(req: BackendRequest) -> BatchResult:
        try:
            return backend.complete(req)
        except BackendError as exc:
            return exc

    if not reqs:
        return []
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(one, reqs))


def with_seed(gen: GenerationConfig, seed: Optional[int]) -> GenerationConfig:
    """Copy of ``gen`` with the seed replaced."""
    return replace(gen, seed=seed)
