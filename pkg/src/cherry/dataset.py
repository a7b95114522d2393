"""Instruction-tuning samples, Alpaca-style JSON files and prompt templates."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .errors import ConfigError, DataError, DatasetParseError

logger = logging.getLogger(__name__)

ID_WIDTH = 6
_SLOT = re.compile(r"\{(instruction|input)\}")


@dataclass(frozen=True)
class Sample:
    """One (instruction, [input], output) record."""

    id: str
    instruction: str
    output: str
    input: str = ""

    def __post_init__(self):
        if not self.instruction.strip():
            raise DataError("instruction is empty")
        if not self.output.strip():
            raise DataError("output is empty")

    @property
    def has_input(self) -> bool:
        return bool(self.input.strip())


@dataclass(frozen=True)
class RenderedPair:
    question_text: str
    answer_text: str


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    with_input: str
    without_input: str

    def __post_init__(self):
        for slot in ("{instruction}", "{input}"):
            if self.with_input.count(slot) != 1:
                raise ConfigError(f"template {self.name!r}: with_input needs {slot} exactly once")
        if self.without_input.count("{instruction}") != 1:
            raise ConfigError(f"template {self.name!r}: without_input needs {{instruction}} exactly once")
        if "{input}" in self.without_input:
            raise ConfigError(f"template {self.name!r}: without_input must not use {{input}}")


@dataclass
class Rejection:
    index: int
    reason: str


@dataclass
class LoadResult:
    samples: list[Sample]
    rejected: list[Rejection] = field(default_factory=list)


def render(sample: Sample, template: PromptTemplate) -> RenderedPair:
    """Fill the template for ``sample``.

    Whitespace-only input counts as absent. Substitution is a single literal
    pass, so braces inside the sample text are never re-expanded.
    """
    if sample.has_input:
        text, values = template.with_input, {"instruction": sample.instruction, "input": sample.input}
    else:
        text, values = template.without_input, {"instruction": sample.instruction}
    question = _SLOT.sub(lambda m: values[m.group(1)], text)
    return RenderedPair(question_text=question, answer_text=sample.output)


def load_templates(path: str | Path | None = None) -> dict[str, PromptTemplate]:
    if path is None:
        raw = resources.files("cherry").joinpath("resources/templates.json").read_text("utf-8")
    else:
        raw = Path(path).read_text("utf-8")
    data = json.loads(raw)
    return {
        name: PromptTemplate(name, spec["with_input"], spec["without_input"])
        for name, spec in data.items()
        if not name.startswith("_")
    }


def get_template(name: str = "alpaca", path: str | Path | None = None) -> PromptTemplate:
    templates = load_templates(path)
    try:
        return templates[name]
    except KeyError:
        raise ConfigError(f"unknown template {name!r}; available: {sorted(templates)}") from None


def default_id(index: int, count: int) -> str:
    return str(index).zfill(max(ID_WIDTH, len(str(max(count - 1, 0)))))


def _record_to_sample(rec: Any, index: int, count: int) -> Sample:
    if not isinstance(rec, dict):
        raise DataError("record is not an object")
    for key in ("instruction", "output"):
        if key not in rec:
            raise DataError(f"missing {key!r}")
        if not isinstance(rec[key], str):
            raise DataError(f"{key!r} is not a string")
    inp = rec.get("input")
    if inp is None:
        inp = ""
    if not isinstance(inp, str):
        raise DataError("'input' is not a string")
    sid = rec["id"] if rec.get("id") is not None else default_id(index, count)
    return Sample(id=str(sid), instruction=rec["instruction"], input=inp, output=rec["output"])


def parse_records(records: list, source: str = "<memory>") -> LoadResult:
    result = LoadResult(samples=[])
    seen: set[str] = set()
    for i, rec in enumerate(records):
        try:
            sample = _record_to_sample(rec, i, len(records))
        except DataError as exc:
            result.rejected.append(Rejection(i, str(exc)))
            continue
        if sample.id in seen:
            result.rejected.append(Rejection(i, f"duplicate id {sample.id!r}"))
            continue
        seen.add(sample.id)
        result.samples.append(sample)
    for rej in result.rejected:
        logger.warning("%s: record %d rejected: %s", source, rej.index, rej.reason)
    if records and not result.samples:
        raise DataError(f"{source}: all {len(records)} records were rejected")
    return result


def read_dataset(path: str | Path) -> LoadResult:
    """Load a dataset file, keeping the per-record rejection diagnostics."""
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DatasetParseError(f"{path}: invalid UTF-8", exc.start) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DatasetParseError(f"{path}: {exc.msg}", offset) from exc
    if not isinstance(data, list):
        raise DatasetParseError(f"{path}: top-level value is not an array", 0)
    return parse_records(data, source=str(path))


def load_dataset(path: str | Path) -> list[Sample]:
    return read_dataset(path).samples


def save_dataset(samples: list[Sample], path: str | Path) -> None:
    if not samples:
        raise DataError("refusing to write an empty dataset")
    rows = [{"instruction": s.instruction, "input": s.input, "output": s.output} for s in samples]
    Path(path).write_text(json.dumps(rows, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
