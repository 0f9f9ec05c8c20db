"""Grading free-form answers: normalization, parsing, accuracy and rouge.

Run: python demos/04_answer_grading.py
"""
from vqaharness import (
    ReferenceAnswers,
    ScriptedBackend,
    WinogroundQuad,
    binary_accuracy,
    build_parse_prompt,
    llm_parse,
    normalize,
    rouge_l,
    rouge_n,
    vqa_accuracy,
    winoground_group_score,
    yes_no_of,
)

print("=== normalization ===")
for text in ["A cell phone.", "The Dogs!", "two dogs", "Surfing on a wave!"]:
    print(f"{text!r:28s} -> {normalize(text)!r}")

print("\n=== multi-reference VQA accuracy: min(matches/3, 1) ===")
refs = ReferenceAnswers(["icing"] * 6 + ["frosting"] * 3 + ["sugar"])
for candidate in ["icing", "frosting", "sugar", "mayo"]:
    print(f"{candidate:10s} -> {vqa_accuracy(candidate, refs):.4f}")

print("\n=== binary accuracy with normalization ===")
print(binary_accuracy("a jeans", "jeans"), binary_accuracy("black pants", "jeans"))

# Verbose generations defeat plain string matching; a small text-only model
# parses them into the reference style first.
print("\n=== LLM-guided short-answer parsing ===")
VERBOSE = [
    ("What is the white substance on top of the cupcakes?", "The white substance is icing.", "icing"),
    ("What are they surfing on?", "They are surfing on a wave.", "surfing"),
]
parser_backend = ScriptedBackend(
    script={build_parse_prompt(q, a): short for q, a, short in VERBOSE}
)
for question, verbose, _ in VERBOSE:
    parsed = llm_parse(question, verbose, parser_backend)
    before = vqa_accuracy(verbose, ReferenceAnswers([_] * 10))
    after = vqa_accuracy(parsed.text, ReferenceAnswers([_] * 10))
    print(f"{verbose!r}\n  -> parsed {parsed.text!r}  (score {before:.2f} -> {after:.2f})")

print("\n=== winoground group scoring: all four or nothing ===")
quad = WinogroundQuad(
    items=(
        ("img0", "Does this describe the image? An old person kisses a young person", "yes"),
        ("img0", "Does this describe the image? A young person kisses an old person", "no"),
        ("img1", "Does this describe the image? An old person kisses a young person", "no"),
        ("img1", "Does this describe the image? A young person kisses an old person", "yes"),
    )
)
print("perfect:", winoground_group_score(quad, ["yes", "no", "no", "yes"]))
print("one slip:", winoground_group_score(quad, ["yes", "no", "no", "no"]))
print("always-yes bias:", winoground_group_score(quad, ["yes"] * 4))
print("yes_no_of('Yes, it does.'):", yes_no_of("Yes, it does."))

print("\n=== rouge for rationale-vs-reference comparison ===")
generated = "the floor is made of wood"
reference = "the floor is brown wood flooring"
print(f"rouge-1 {rouge_n(generated, reference, 1):.4f}")
print(f"rouge-2 {rouge_n(generated, reference, 2):.4f}")
print(f"rouge-L {rouge_l(generated, reference):.4f}")
