"""Chain-of-thought answering modes and self-consistency voting.

Everything runs against a deterministic in-process backend, no server needed.

Run: python demos/03_cot_self_consistency.py
"""
from vqaharness import (
    ConsistencyConfig,
    PromptContext,
    ScriptedBackend,
    builtin_registry,
    cot_answer,
    cot_context,
    cot_iterative,
    extract_final_answer,
    normalize,
    render,
    self_consistency,
    trim_rationale,
)
from vqaharness.backends import preset

# --- answer extraction from free-form rationales ---------------------------
print("=== answer extraction ===")
for raw in [
    "A motorcycle can be used for racing. Racing is a sport. The final answer: racing.",
    "Therefore, the final answer is a mother.",
    "The floor is made of wood. Wood is a light color.",
]:
    print(f"{raw!r}\n  -> {extract_final_answer(raw)!r}")

print("\n=== rationale trimming ===")
long_chain = "The floor is made of wood. Wood is a light color. Light colors reflect."
print(f"{long_chain!r}\n  -> {trim_rationale(long_chain)!r}")

# --- a backend that reasons differently depending on the sampling seed -----
ANSWERS = ["brown"] * 6 + ["tan"] * 3 + ["blue"] * 1


def fallback(req):
    if "step-by-step" in req.prompt:
        seed = req.gen.seed or 0
        answer = ANSWERS[seed % len(ANSWERS)]
        return [f"The floor is made of wood. Wood is often {answer}. The final answer: {answer}."] * req.gen.n
    return ["brown"] * req.gen.n


backend = ScriptedBackend(fallback=fallback)
ctx = PromptContext(question="What color is the floor?")
prompt = render(builtin_registry()["reason-qa"], ctx)

print("\n=== plain CoT (question -> rationale + answer) ===")
result = cot_answer(prompt, backend, preset("rationale"))
print(f"rationale: {result.rationale}")
print(f"answer:    {result.answer}")

print("\n=== CoT-iterative (question + trimmed rationale -> answer) ===")
result = cot_iterative(ctx, backend)
print(f"trimmed rationale: {result.rationale}")
print(f"answer:            {result.answer}")

print("\n=== CoT-context (rationale as Context: prefix -> answer) ===")
result = cot_context(ctx, backend)
print(f"answer: {result.answer}")

print("\n=== self-consistency: 30 sampled paths, majority vote ===")
vote = self_consistency(ctx, backend, ConsistencyConfig(n_paths=30, temperature=0.7), normalize)
print(f"tally:  {vote.tally}")
print(f"winner: {vote.answer}")
