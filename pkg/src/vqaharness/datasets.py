"""Dataset loaders and the Winoground statement-to-question conversion.

Each loader translates one dataset-native JSON/JSONL shape (documented in the
README) into QuestionRecord form. Reference answers are stored verbatim;
normalization happens only at scoring time.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

from .backends import Backend, BackendRequest, GenerationConfig, preset
from .errors import ConversionInvalid, LoadError, QuadIncomplete
from .metrics import WinogroundQuad

FORMATS = ("vqav2", "okvqa", "aokvqa", "gqa", "visual7w", "winoground", "canonical")

CONVERT_PROMPT = (
    "Convert this text into a yes/no question for the Visual Question Answering task: "
)
STATEMENT_PREFIX = "Does this describe the image?"


@dataclass
class QuestionRecord:
    """One dataset item in canonical form."""

    id: str
    image_ref: str
    question: str
    refs: list[str]
    dataset: str
    options: Optional[list[str]] = None
    mc_answer: Optional[str] = None
    question_type: Optional[str] = None
    split: str = ""

    def __post_init__(self):
        if not self.id:
            raise LoadError("record is missing an id")
        if not self.question or not self.question.strip():
            raise LoadError(f"record {self.id}: question is missing or empty")
        if not self.refs:
            raise LoadError(f"record {self.id}: needs at least one reference answer")

    def to_record(self) -> dict:
        record = {
            "id": self.id,
            "image_ref": self.image_ref,
            "question": self.question,
            "refs": self.refs,
            "dataset": self.dataset,
            "split": self.split,
        }
        if self.options is not None:
            record["options"] = self.options
        if self.mc_answer is not None:
            record["mc_answer"] = self.mc_answer
        if self.question_type is not None:
            record["question_type"] = self.question_type
        return record

    @classmethod
    def from_record(cls, record: dict) -> "QuestionRecord":
        return cls(
            id=str(record["id"]),
            image_ref=str(record.get("image_ref", "")),
            question=record["question"],
            refs=list(record["refs"]),
            dataset=record.get("dataset", ""),
            options=record.get("options"),
            mc_answer=record.get("mc_answer"),
            question_type=record.get("question_type"),
            split=record.get("split", ""),
        )


@dataclass
class WinogroundSample:
    """Two images and two captions; converted questions arrive later."""

    id: str
    image_refs: list[str]
    captions: list[str]
    converted: Optional[list[str]] = None

    def __post_init__(self):
        if len(self.image_refs) != 2 or len(self.captions) != 2:
            raise LoadError(f"sample {self.id}: needs exactly two images and two captions")
        if self.converted is not None and len(self.converted) != 2:
            raise LoadError(f"sample {self.id}: converted questions must number two")

    def to_record(self) -> dict:
        record = {"id": self.id, "image_refs": self.image_refs, "captions": self.captions}
        if self.converted is not None:
            record["converted"] = self.converted
        return record

    @classmethod
    def from_record(cls, record: dict) -> "WinogroundSample":
        return cls(
            id=str(record["id"]),
            image_refs=list(record["image_refs"]),
            captions=list(record["captions"]),
            converted=record.get("converted"),
        )


def infer_question_type(question: str) -> str:
    """Keyword heuristic used when the dataset ships no annotation."""
    q = question.strip().lower()
    if q.startswith("how many"):
        return "number"
    if q.startswith("what color"):
        return "color"
    if q.split()[0] in ("is", "are", "does"):
        return "yes/no"
    return "other"


def _read_json(path: Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON: {exc}")


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise LoadError(f"{path}:{lineno}: invalid JSON: {exc}")
    return rows


def _read_rows(path: Path) -> list[dict]:
    """Accept either a JSON array or JSONL of objects."""
    text = path.read_text(encoding="utf-8").lstrip()
    if text.startswith("["):
        data = _read_json(path)
        if not isinstance(data, list):
            raise LoadError(f"{path}: expected a JSON array")
        return data
    return _read_jsonl(path)


def _require(row: dict, key: str, where: str):
    if key not in row or row[key] in (None, ""):
        raise LoadError(f"{where}: missing field {key!r}")
    return row[key]


def _load_vqav2_family(path: Path, dataset: str, split: str) -> list[QuestionRecord]:
    doc = _read_json(path)
    if not isinstance(doc, dict) or "questions" not in doc or "annotations" not in doc:
        raise LoadError(f"{path}: expected an object with 'questions' and 'annotations'")
    annotations = {a.get("question_id"): a for a in doc["annotations"]}
    records = []
    for i, q in enumerate(doc["questions"]):
        where = f"{path}:questions[{i}]"
        qid = _require(q, "question_id", where)
        ann = annotations.get(qid)
        if ann is None:
            raise LoadError(f"{where}: no annotation for question_id {qid}")
        answers = [a["answer"] for a in _require(ann, "answers", where)]
        question = _require(q, "question", where)
        qtype = ann.get("question_type") or infer_question_type(question)
        records.append(
            QuestionRecord(
                id=str(qid),
                image_ref=str(_require(q, "image_id", where)),
                question=question,
                refs=answers,
                dataset=dataset,
                question_type=qtype,
                split=split,
            )
        )
    return records


def _load_aokvqa(path: Path, split: str) -> list[QuestionRecord]:
    records = []
    for i, row in enumerate(_read_rows(path)):
        where = f"{path}:[{i}]"
        qid = _require(row, "question_id", where)
        choices = row.get("choices")
        mc_answer = None
        if choices is not None:
            idx = row.get("correct_choice_idx")
            if idx is None or not 0 <= idx < len(choices):
                raise LoadError(f"{where}: correct_choice_idx missing or out of range")
            mc_answer = choices[idx]
        refs = row.get("direct_answers") or ([mc_answer] if mc_answer else None)
        if not refs:
            raise LoadError(f"{where}: needs direct_answers or choices")
        records.append(
            QuestionRecord(
                id=str(qid),
                image_ref=str(_require(row, "image_id", where)),
                question=_require(row, "question", where),
                refs=list(refs),
                dataset="aokvqa",
                options=list(choices) if choices is not None else None,
                mc_answer=mc_answer,
                question_type=row.get("question_type") or infer_question_type(row["question"]),
                split=split,
            )
        )
    return records


def _load_gqa(path: Path, split: str) -> list[QuestionRecord]:
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise LoadError(f"{path}: expected an object mapping question id to entry")
    records = []
    for qid, row in doc.items():
        where = f"{path}:{qid}"
        question = _require(row, "question", where)
        records.append(
            QuestionRecord(
                id=str(qid),
                image_ref=str(_require(row, "imageId", where)),
                question=question,
                refs=[_require(row, "answer", where)],
                dataset="gqa",
                question_type=(row.get("types") or {}).get("structural")
                or infer_question_type(question),
                split=split,
            )
        )
    return records


def _load_visual7w(path: Path, split: str) -> list[QuestionRecord]:
    records = []
    for i, row in enumerate(_read_rows(path)):
        where = f"{path}:[{i}]"
        answer = _require(row, "answer", where)
        distractors = row.get("multiple_choices") or []
        options = list(distractors) + [answer]
        if len(options) < 2:
            raise LoadError(f"{where}: needs distractors alongside the answer")
        question = _require(row, "question", where)
        records.append(
            QuestionRecord(
                id=str(_require(row, "qa_id", where)),
                image_ref=str(_require(row, "image_id", where)),
                question=question,
                refs=[answer],
                dataset="visual7w",
                options=options,
                mc_answer=answer,
                question_type=row.get("type") or infer_question_type(question),
                split=split,
            )
        )
    return records


def _load_winoground(path: Path) -> list[WinogroundSample]:
    samples = []
    for i, row in enumerate(_read_rows(path)):
        where = f"{path}:[{i}]"
        if "image_refs" in row:  # canonical shape, written by save_records
            samples.append(WinogroundSample.from_record(row))
            continue
        samples.append(
            WinogroundSample(
                id=str(_require(row, "id", where)),
                image_refs=[str(_require(row, "image_0", where)), str(_require(row, "image_1", where))],
                captions=[_require(row, "caption_0", where), _require(row, "caption_1", where)],
                converted=row.get("converted"),
            )
        )
    return samples


def _load_canonical(path: Path) -> list[QuestionRecord]:
    records = []
    for i, row in enumerate(_read_rows(path)):
        try:
            records.append(QuestionRecord.from_record(row))
        except (KeyError, TypeError) as exc:
            raise LoadError(f"{path}:[{i}]: bad canonical record: {exc}")
    return records


def load_dataset(
    path: Union[str, Path], format: str, split: str = ""
) -> Union[list[QuestionRecord], list[WinogroundSample]]:
    """Load a dataset file into canonical records.

    Winoground loads as WinogroundSample; everything else as QuestionRecord.
    """
    path = Path(path)
    if not path.exists():
        raise LoadError(f"dataset file not found: {path}")
    if format not in FORMATS:
        raise LoadError(f"unknown dataset format: {format!r}")
    if format in ("vqav2", "okvqa"):
        records = _load_vqav2_family(path, format, split)
    elif format == "aokvqa":
        records = _load_aokvqa(path, split)
    elif format == "gqa":
        records = _load_gqa(path, split)
    elif format == "visual7w":
        records = _load_visual7w(path, split)
    elif format == "winoground":
        return _load_winoground(path)
    else:
        records = _load_canonical(path)
    seen = set()
    for record in records:
        key = (record.dataset, record.split, record.id)
        if key in seen:
            raise LoadError(f"duplicate record id {record.id!r} in {path}")
        seen.add(key)
    return records


def save_records(path: Union[str, Path], records: Sequence) -> None:
    """Write canonical JSONL (QuestionRecord or WinogroundSample)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_record(), sort_keys=True, ensure_ascii=False) + "\n")


def statement_form(text: str) -> str:
    """Frame a caption as the fixed describe-the-image question."""
    text = (text or "").strip()
    if not text:
        raise ValueError("statement must be non-empty")
    return STATEMENT_PREFIX + " " + text


def convert_statement(statement: str, backend: Backend, gen: Optional[GenerationConfig] = None) -> str:
    """Turn a caption into a yes/no question via a text-only backend call."""
    statement = (statement or "").strip()
    if not statement:
        raise ValueError("statement must be non-empty")
    response = backend.complete(
        BackendRequest(
            prompt=CONVERT_PROMPT + statement,
            gen=gen or preset("convert"),
            purpose="convert",
        )
    )
    lines = response.texts[0].strip().splitlines()
    converted = lines[0].strip() if lines else ""
    if not converted.endswith("?"):
        raise ConversionInvalid(f"conversion did not yield a question: {converted!r}")
    return converted


def convert_sample(
    sample: WinogroundSample,
    backend: Backend,
    retries: int = 0,
    gen: Optional[GenerationConfig] = None,
) -> WinogroundSample:
    """Convert both captions of a sample, retrying invalid conversions."""
    converted = []
    for caption in sample.captions:
        last: Optional[ConversionInvalid] = None
        for _ in range(retries + 1):
            try:
                converted.append(convert_statement(caption, backend, gen))
                last = None
                break
            except ConversionInvalid as exc:
                last = exc
        if last is not None:
            raise last
    return WinogroundSample(
        id=sample.id, image_refs=sample.image_refs, captions=sample.captions, converted=converted
    )


def build_quad(sample: WinogroundSample, framing: str = "statement") -> WinogroundQuad:
    """Four (image, question, expected) triples; two yes and two no."""
    if framing not in ("statement", "converted"):
        raise ValueError(f"unknown quad framing: {framing!r}")
    if framing == "converted":
        if not sample.converted:
            raise QuadIncomplete(f"sample {sample.id} has no converted questions")
        questions = list(sample.converted)
    else:
        questions = [statement_form(c) for c in sample.captions]
    img0, img1 = sample.image_refs
    q0, q1 = questions
    return WinogroundQuad(
        items=(
            (img0, q0, "yes"),
            (img0, q1, "no"),
            (img1, q0, "no"),
            (img1, q1, "yes"),
        )
    )


def export_conversion_review(
    samples: Sequence[WinogroundSample], path: Union[str, Path]
) -> None:
    """TSV of (statement, converted question, valid flag) for human review."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["statement", "converted_question", "valid"])
        for sample in samples:
            converted = sample.converted or ["", ""]
            for caption, question in zip(sample.captions, converted):
                writer.writerow([caption, question, str(bool(question.endswith("?"))).lower()])
