"""Backend-agnostic prompting and evaluation harness for zero/few-shot VQA."""

from .backends import (
    Backend,
    BackendRequest,
    BackendResponse,
    GenerationConfig,
    HTTPBackend,
    ReplayBackend,
    ScriptedBackend,
    complete_batch,
    preset,
)
from .captions import Caption, CaptionCache, CaptionRequest, attach_caption
from .cot import (
    ConsistencyConfig,
    RationaleAnswer,
    cot_answer,
    cot_context,
    cot_iterative,
    extract_final_answer,
    majority_vote,
    self_consistency,
    trim_rationale,
)
from .datasets import (
    QuestionRecord,
    WinogroundSample,
    build_quad,
    convert_statement,
    load_dataset,
    statement_form,
)
from .exemplars import (
    Exemplar,
    HashEmbeddingProvider,
    SelectionConfig,
    cosine_similarity,
    select_exemplars,
)
from .metrics import (
    GradedAnswer,
    ReferenceAnswers,
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
from .runner import ExperimentSpec, Report, compare, rescore, run
from .templates import (
    PromptContext,
    RenderedPrompt,
    TemplateRegistry,
    TemplateSpec,
    builtin_registry,
    format_options,
    render,
    render_exemplar_block,
    wrap_with_caption,
)

__version__ = "0.1.0"
