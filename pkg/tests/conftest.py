"""Shared fixtures: scripted backends, replay stores and fixture datasets."""
from __future__ import annotations

import hashlib
import json
import re

import pytest

from vqaharness.backends import BackendRequest, ReplayBackend, ScriptedBackend
from vqaharness.metrics import build_parse_prompt

# ---------------------------------------------------------------------------
# scripted answers for the synthetic end-to-end dataset
# ---------------------------------------------------------------------------

SCENE_RE = re.compile(r"scene (\d{3})")
IMG_RE = re.compile(r"(\d{3})")


def answer_candidates(i: int) -> list[str]:
    return [f"alpha{i:03d}", f"beta{i:03d}", f"gamma{i:03d}", f"delta{i:03d}"]


def pick_answer(i: int, seed: int) -> str:
    """Deterministic answer choice; sometimes verbose to exercise parsing."""
    h = hashlib.sha256(f"{i}:{seed}".encode()).digest()
    answer = answer_candidates(i)[h[0] % 4]
    if h[1] % 5 == 0:
        return f"the object is {answer}"
    return answer


def fixture_refs(i: int) -> list[str]:
    a, b, c, _ = answer_candidates(i)
    n_a = i % 5
    n_b = (i // 3) % 4
    return [a] * n_a + [b] * n_b + [c] * (10 - n_a - n_b)


def scripted_vqa_fallback(req: BackendRequest) -> list[str]:
    """Answer any request of the synthetic fixture world deterministically."""
    prompt = req.prompt
    if prompt == "A photo of":
        i = int(IMG_RE.search(req.image_ref).group(1))
        return [f"A photo of scene {i:03d}, take {j}." for j in range(req.gen.n)]
    if prompt.startswith("Combine the following captions"):
        i = int(SCENE_RE.search(prompt).group(1))
        return [f"A photo of scene {i:03d}, fused."] * req.gen.n
    if prompt.startswith("Describe the image according"):
        i = int(SCENE_RE.search(prompt).group(1))
        return [f"A photo of scene {i:03d}, focused."] * req.gen.n
    if prompt.startswith("The task is to parse"):
        tail = prompt.rsplit("Input: ", 1)[1]
        verbose = tail.rsplit("\nShort answer:", 1)[0]
        words = re.findall(r"[A-Za-z0-9]+", verbose)
        return [words[-1] if words else "unknown"] * req.gen.n
    match = SCENE_RE.search(prompt)
    if match is None:
        return ["unknown"] * req.gen.n
    i = int(match.group(1))
    seed = req.gen.seed or 0
    answer = pick_answer(i, seed)
    if "step-by-step" in prompt:
        return [f"Scene {i:03d} contains an object. The final answer: {answer}."] * req.gen.n
    return [answer] * req.gen.n


@pytest.fixture
def scripted_vqa_backend():
    return ScriptedBackend(fallback=scripted_vqa_fallback)


def write_fixture_dataset(path, n: int = 100) -> None:
    qtypes = ["color", "number", "yes/no", "other"]
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(n):
            record = {
                "id": f"q{i:03d}",
                "image_ref": f"img_{i:03d}.jpg",
                "question": f"What is shown in scene {i:03d}?",
                "refs": fixture_refs(i),
                "dataset": "fixture",
                "question_type": qtypes[i % 4],
                "split": "test",
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


@pytest.fixture
def fixture_dataset(tmp_path):
    path = tmp_path / "fixture.jsonl"
    write_fixture_dataset(path)
    return path


def write_fixture_pool(path, n: int = 24) -> None:
    """Exemplar pool without embeddings; loading fills them in."""
    with open(path, "w", encoding="utf-8") as fh:
        for j in range(n):
            record = {
                "question": f"What is shown in pool scene {j:03d}?",
                "answer": f"alpha{j:03d}",
                "caption": f"A photo of pool scene {j:03d}.",
                "rationale": f"Pool scene {j:03d} contains an object.",
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


@pytest.fixture
def fixture_pool(tmp_path):
    path = tmp_path / "pool.jsonl"
    write_fixture_pool(path)
    return path


# ---------------------------------------------------------------------------
# replay fixtures
# ---------------------------------------------------------------------------

def record_store(tmp_path, name, inner, requests):
    """Record the given requests against ``inner`` and return the store path."""
    store = tmp_path / name
    recorder = ReplayBackend("record", store, inner=inner)
    for req in requests:
        recorder.complete(req)
    return store


# Verbose outputs that defeat plain string matching, with the questions the
# parse fixtures use and the short forms the parser should recover.
PARSE_CASES = [
    ("What is the white substance on top of the cupcakes?", "The white substance is icing.", "icing"),
    ("What is the man holding?", "A cell phone.", "phone"),
    ("What are they surfing on?", "They are surfing on a wave.", "surfing"),
    (
        "What sport can you use this for?",
        "A motorcycle can be used for racing. Racing is a sport. The final answer: racing.",
        "racing",
    ),
    (
        "What kind of cake is on the table?",
        "Rainbow cake. The image shows a table with a rainbow cake on it.",
        "rainbow",
    ),
]


def parse_script() -> dict[str, str]:
    """Exact parse-prompt -> short-answer mapping for the verbose cases."""
    script = {}
    for question, verbose, short in PARSE_CASES:
        if len(verbose.split()) > 3:  # short answers bypass the backend
            script[build_parse_prompt(question, verbose)] = short
    return script


@pytest.fixture
def parse_replay_backend(tmp_path):
    """Replay backend loaded with recorded Table-12-style parses."""
    from vqaharness.backends import preset

    inner = ScriptedBackend(script=parse_script())
    requests = [
        BackendRequest(prompt=prompt, gen=preset("parse"), purpose="parse")
        for prompt in parse_script()
    ]
    store = record_store(tmp_path, "parse_store.jsonl", inner, requests)
    return ReplayBackend("replay", store)


# Original statements and their converted yes/no questions.
CONVERSION_CASES = [
    ("The taller person hugs the shorter person", "Does the taller person hug the shorter person?"),
    ("A tree smashed into a car", "Did a tree smash into a car?"),
    (
        "The person without earrings pays the person with earrings",
        "Does the person without earrings pay the person with earrings?",
    ),
    ("The image shows a computer on top of books", "Does the image show a computer on top of books?"),
    ("A brown dog is on a white couch", "Is a brown dog on a white couch?"),
    (
        "The happy person is on the right and the sad person is on the left",
        "Is the happy person on the right and the sad person on the left?",
    ),
    (
        "The heavy oncoming traffic is contrasted with the light outgoing traffic",
        "Is the heavy oncoming traffic contrasted with the light outgoing traffic?",
    ),
    ("A metal chess piece rests on wood objects", "Is there a metal chess piece resting on wood objects?"),
    ("Rectangular bushes are behind pointy bushes", "Are rectangular bushes behind pointy bushes?"),
]


@pytest.fixture
def conversion_replay_backend(tmp_path):
    from vqaharness.backends import preset
    from vqaharness.datasets import CONVERT_PROMPT

    script = {CONVERT_PROMPT + statement: question for statement, question in CONVERSION_CASES}
    inner = ScriptedBackend(script=script)
    requests = [
        BackendRequest(prompt=prompt, gen=preset("convert"), purpose="convert")
        for prompt in script
    ]
    store = record_store(tmp_path, "convert_store.jsonl", inner, requests)
    return ReplayBackend("replay", store)
