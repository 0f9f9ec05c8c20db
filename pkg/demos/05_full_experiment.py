"""End-to-end experiment: standard vs caption VQA on a synthetic dataset.

Builds a small canonical dataset, answers it with a deterministic scripted
backend (recording every call), replays the run to show determinism, and
compares the two settings per question type.

Run: python demos/05_full_experiment.py
"""
import json
import tempfile
from pathlib import Path

from vqaharness import ExperimentSpec, ReplayBackend, ScriptedBackend, compare, run
from vqaharness.runner import run_paths

workdir = Path(tempfile.mkdtemp(prefix="vqaharness_demo_"))
print(f"working directory: {workdir}")

# --- a tiny synthetic dataset ----------------------------------------------
ANSWERS = ["skiing", "two", "yes", "red"]
TYPES = ["other", "number", "yes/no", "color"]
dataset = workdir / "dataset.jsonl"
with open(dataset, "w") as fh:
    for i in range(24):
        answer = ANSWERS[i % 4]
        record = {
            "id": f"q{i:02d}",
            "image_ref": f"img_{i:02d}.jpg",
            "question": f"Question number {i:02d}, what is the answer?",
            "refs": [answer] * 10,
            "dataset": "demo",
            "question_type": TYPES[i % 4],
            "split": "demo",
        }
        fh.write(json.dumps(record) + "\n")


# --- a pretend VLM: wrong on plain prompts, right when captions help --------
def fallback(req):
    import re

    i = int(re.search(r"number (\d{2})", req.prompt).group(1))
    truth = ANSWERS[i % 4]
    if req.prompt.startswith("Describe the image"):
        return [f"A photo where the answer to question number {i:02d} is {truth}."] * req.gen.n
    if req.prompt.startswith("Context:"):
        return [truth] * req.gen.n  # the caption spells out the answer
    return [truth if i % 3 == 0 else "unclear"] * req.gen.n


store = workdir / "replay_store.jsonl"
recorder = ReplayBackend("record", store, inner=ScriptedBackend(fallback=fallback))


def spec_for(run_name, **overrides):
    spec = ExperimentSpec(
        dataset_path=str(dataset),
        dataset_format="canonical",
        output_dir=str(workdir / "runs"),
        run_name=run_name,
    )
    for key, value in overrides.items():
        setattr(spec, key, value)
    return spec


print("\n=== standard VQA ===")
standard = run(spec_for("standard"), backend=recorder)
print(f"mean accuracy: {standard.mean_score:.4f}")

print("\n=== caption VQA (question-guided captions) ===")
caption = run(
    spec_for("caption", setting="caption", caption_strategy="question_guided"),
    backend=recorder,
)
print(f"mean accuracy: {caption.mean_score:.4f}")

print("\n=== per-type gains from captions ===")
delta = compare(standard, caption)
for qtype, entry in delta["by_type"].items():
    print(f"{qtype:8s} {entry['a']:.3f} -> {entry['b']:.3f}  (delta {entry['delta']:+.3f})")

print("\n=== determinism: replaying the recorded run twice ===")
lines = []
for tag in ("a", "b"):
    spec = spec_for(f"replay-{tag}")
    run(spec, backend=ReplayBackend("replay", store))
    results_path = run_paths(spec)[0]
    stripped = []
    for line in results_path.read_text().splitlines():
        entry = json.loads(line)
        entry.pop("elapsed_s")
        stripped.append(json.dumps(entry, sort_keys=True))
    lines.append("\n".join(stripped))
print("byte-identical results:", lines[0] == lines[1])

print(f"\nartifacts left in {workdir}/runs for inspection")
