"""Class catalogues, label rendering, tokenization and duplicate-name audits."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, FormatError, TemplateError

PAD, OOV, BOS = 0, 1, 2
RESERVED = ("<pad>", "<oov>", "<bos>")

DEFAULT_TEMPLATES = (
    "a photo of a {name}",
    "a picture of a {name}",
    "an image of a {name}",
    "a rendering of a {name}",
    "a drawing of a {name}",
    "a photo of the {name}",
    "a close-up photo of a {name}",
)

_WORD = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class ClassEntry:
    index: int
    name: str
    description: str = ""


@dataclass(frozen=True)
class RenderedLabel:
    class_index: int
    text: str
    variant_id: int = 0


def validate_catalogue(entries: Sequence[ClassEntry]) -> tuple[ClassEntry, ...]:
    """Return the catalogue as a tuple sorted by index, checking index contiguity and names."""
    entries = tuple(sorted(entries, key=lambda e: e.index))
    for pos, e in enumerate(entries):
        if e.index != pos:
            raise ContractError(f"catalogue indices must be contiguous from 0; found {e.index} at position {pos}")
        if not e.name.strip():
            raise ContractError(f"class {e.index} has an empty name")
    return entries


def load_classes(path: str | Path) -> tuple[ClassEntry, ...]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                entries.append(ClassEntry(int(obj["index"]), str(obj["name"]), str(obj.get("description", ""))))
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad class record ({exc})") from exc
    return validate_catalogue(entries)


def dump_classes(entries: Iterable[ClassEntry]) -> str:
    return "".join(
        json.dumps({"index": e.index, "name": e.name, "description": e.description}) + "\n" for e in entries
    )


def load_templates(path: str | Path) -> tuple[str, ...]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    templates = tuple(line.strip() for line in lines if line.strip())
    for t in templates:
        _check_template(t)
    return templates


def _check_template(template: str) -> None:
    if "{name}" not in template:
        raise TemplateError(f"template lacks a {{name}} placeholder: {template!r}")


def render_label(entry: ClassEntry, template: str, enriched: bool, variant_id: int = 0) -> RenderedLabel:
    """Fill ``template`` with the class name and, when enriched, its description.

    A template may place ``{description}`` itself; otherwise the description is
    appended as ``", <description>"``. Empty descriptions render like the
    plain (non-enriched) label.
    """
    _check_template(template)
    use_desc = enriched and bool(entry.description.strip())
    if "{description}" in template:
        if use_desc:
            text = template.replace("{name}", entry.name).replace("{description}", entry.description)
        else:
            text = template.replace(", {description}", "").replace("{description}", "").strip()
            text = text.replace("{name}", entry.name)
    else:
        text = template.replace("{name}", entry.name)
        if use_desc:
            text = f"{text}, {entry.description}"
    return RenderedLabel(entry.index, text, variant_id)


def build_prompt_ensemble(entry: ClassEntry, templates: Sequence[str], enriched: bool) -> list[RenderedLabel]:
    if not templates:
        raise ContractError("prompt ensemble needs at least one template")
    return [render_label(entry, t, enriched, variant_id=i) for i, t in enumerate(templates)]


# ---------------------------------------------------------------------------
# tokenization


def words(text: str) -> list[str]:
    """Case-folded word tokens; whitespace and punctuation are separators."""
    return _WORD.findall(text.casefold())


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    max_len: int = 32
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:3] != RESERVED:
            raise ContractError("vocabulary must start with the reserved tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractError("vocabulary tokens must be unique")
        if self.max_len < 1:
            raise ContractError("max_len must be >= 1")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, corpus: Iterable[str], max_len: int = 32, min_freq: int = 1) -> "Vocabulary":
        counts = Counter(w for text in corpus for w in words(text))
        kept = sorted(w for w, c in counts.items() if c >= min_freq and w not in RESERVED)
        return cls(RESERVED + tuple(kept), max_len)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, word: str) -> int:
        return self._index.get(word, OOV)

    def to_json(self) -> dict:
        return {"max_len": self.max_len, "tokens": list(self.tokens)}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(tuple(obj["tokens"]), int(obj["max_len"]))


def tokenize(text: str, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(ids, mask)``, both of length ``vocab.max_len``; the mask marks BOS and real words."""
    ids = [BOS] + [vocab.id_of(w) for w in words(text)]
    ids = ids[: vocab.max_len]
    n = len(ids)
    out = np.full(vocab.max_len, PAD, dtype=np.int64)
    out[:n] = ids
    mask = np.zeros(vocab.max_len, dtype=bool)
    mask[:n] = True
    return out, mask


def tokenize_batch(texts: Sequence[str], vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    ids = np.full((len(texts), vocab.max_len), PAD, dtype=np.int64)
    mask = np.zeros((len(texts), vocab.max_len), dtype=bool)
    for i, t in enumerate(texts):
        ids[i], mask[i] = tokenize(t, vocab)
    return ids, mask


# ---------------------------------------------------------------------------
# duplicate-name audit


def _name_key(name: str) -> str:
    return name.strip().casefold()


def duplicate_name_stats(catalogue: Sequence[ClassEntry]) -> dict:
    """Histogram of how many catalogue entries share each class's name.

    ``histogram[k]`` counts classes whose (trimmed, case-folded) name is used
    by exactly ``k`` entries, so the buckets sum to the catalogue size.
    ``unique`` is ``histogram[1]`` and ``ratio`` the share of classes whose
    name repeats.
    """
    counts = Counter(_name_key(e.name) for e in catalogue)
    hist: Counter = Counter()
    for c in counts.values():
        hist[c] += c
    total = len(catalogue)
    unique = hist.get(1, 0)
    return {
        "total": total,
        "unique": unique,
        "ratio": (1.0 - unique / total) if total else 0.0,
        "histogram": {int(k): int(hist[k]) for k in sorted(hist)},
    }
