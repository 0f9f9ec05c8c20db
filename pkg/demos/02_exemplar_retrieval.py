"""Few-shot exemplar retrieval with the near-duplicate similarity cap.

Run: python demos/02_exemplar_retrieval.py
"""
from vqaharness import (
    Exemplar,
    HashEmbeddingProvider,
    PromptContext,
    SelectionConfig,
    cosine_similarity,
    render_exemplar_block,
    select_exemplars,
)

provider = HashEmbeddingProvider(dimension=32)

QUESTIONS = [
    ("Where are these animals found?", "Africa"),
    ("What continent do elephants live on?", "Africa"),
    ("What color is the bus?", "yellow"),
    ("How many dogs are in the photo?", "two"),
    ("What sport is being played?", "tennis"),
    ("What room of the house is this?", "kitchen"),
    ("What is the weather like?", "sunny"),
    ("What brand is the laptop?", "apple"),
]

pool = [
    Exemplar(
        question=q,
        answer=a,
        caption=f"A photo related to: {q.lower()}",
        rationale=f"The image suggests {a}.",
        embedding=provider.embed(q),
    )
    for q, a in QUESTIONS
]

query = "Where are these animals found?"
query_vec = provider.embed(query)

print("=== similarities to the query ===")
for exemplar in pool:
    sim = cosine_similarity(query_vec, exemplar.embedding)
    print(f"{sim:+.3f}  {exemplar.question}")

# The 0.6 cap drops the pool item identical to the query (similarity 1.0),
# which would otherwise invite the model to copy the in-context answer.
cfg = SelectionConfig(k=3, similarity_cap=0.6)
picked = select_exemplars(query_vec, pool, cfg)
print(f"\n=== selected {len(picked)} exemplars (cap {cfg.similarity_cap}) ===")
for exemplar in picked:
    print(f"- {exemplar.question} -> {exemplar.answer}")
assert all(e.question != query for e in picked)

# Drop the cap to 1.0 and the exact duplicate comes back first.
uncapped = select_exemplars(query_vec, pool, SelectionConfig(k=3, similarity_cap=1.0))
print("\n=== without the cap ===")
for exemplar in uncapped:
    print(f"- {exemplar.question}")

# The selected exemplars render into the few-shot prompt frame.
ctx = PromptContext(
    question=query,
    caption="A photo of a herd of elephants near a waterhole.",
    task_instruction="Your task is to answer a knowledge based question.",
)
print("\n=== few-shot prompt (caption setting) ===")
print(render_exemplar_block(picked, "caption", ctx))
