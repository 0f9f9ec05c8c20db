"""Tour of the built-in prompt templates and the rendering rules.

Run: python demos/01_prompt_templates.py
"""
from vqaharness import PromptContext, builtin_registry, format_options, render, wrap_with_caption
from vqaharness.templates import TemplateRegistry, TemplateSpec, render_any

registry = builtin_registry()

print("=== built-in templates ===")
for template in registry:
    print(f"{template.name:16s} [{template.family}]  {template.pattern}")

# A plain question through every standard/cot template
ctx = PromptContext(question="What sport is this?")
print("\n=== zero-shot renders ===")
for name in ["Null", "qa", "short-qa", "follow-qa", "reason-qa", "think-qa"]:
    print(f"{name:12s} -> {render(registry[name], ctx).text}")

# Multiple-choice options are folded into the question
options = ["red velvet", "cherry amaretto", "strawberry daiquiri", "bailey's chocolate"]
print("\n=== option formatting ===")
print(format_options(options))
mc_ctx = PromptContext(question="Which cupcake is alcohol-free?", options=options)
print(render(registry["qa"], mc_ctx).text)

# Binary questions get the short-answer nudge
binary_ctx = PromptContext(question="Is this a private or public room?", is_binary_question=True)
print("\n=== binary short answers ===")
print(render(registry["short-qa"], binary_ctx).text)

# Caption VQA: any rendered prompt can be prefixed with visual context
print("\n=== caption wrapping ===")
inner = render(registry["qa"], PromptContext(question="What room is this?"))
print(wrap_with_caption(inner, "A photo of a kitchen in a dollhouse.").text)

# Captioning templates drive the caption-generation backends
print("\n=== captioning prompts ===")
print(render_any(registry["a-photo-of"], ctx).text)
print(render_any(registry["q-guided-cap"], ctx).text)

# Registries serialize to JSON so deployments can add custom templates
print("\n=== custom templates via JSON ===")
custom = TemplateRegistry([TemplateSpec("polite-qa", "standard", "Please answer: {q} {o}")])
extended = registry.extended(custom)
print(extended["polite-qa"].pattern)
print(render(extended["polite-qa"], ctx).text)
