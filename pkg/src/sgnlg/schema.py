"""Core domain types for schema-guided NLG records and their validation.

Records are immutable. The canonical on-disk form is one JSON object per
line (see ``docs/data_format.md``).
"""
from __future__ import annotations

import json
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

NULL = "null"

# `$cuisine_1` is canonical; the legacy `$cuisine1` form is accepted and
# normalized on ingest.
PLACEHOLDER_RE = re.compile(r"^\$([A-Za-z][A-Za-z0-9_\-]*?)_?([0-9]+)$")
CANONICAL_PLACEHOLDER_RE = re.compile(r"^\$([A-Za-z][A-Za-z0-9_\-]*)_([1-9][0-9]*)$")


def is_placeholder(token: str) -> bool:
    return bool(token) and token[0] == "$" and PLACEHOLDER_RE.match(token) is not None


def parse_placeholder(token: str) -> tuple[str, int]:
    """Split a placeholder into ``(slot_type, index)``.

    >>> parse_placeholder("$price_per_night_2")
    ('price_per_night', 2)
    >>> parse_placeholder("$movie-name3")
    ('movie-name', 3)
    """
    m = PLACEHOLDER_RE.match(token)
    if m is None:
        raise ValueError(f"not a placeholder: {token!r}")
    return m.group(1), int(m.group(2))


def make_placeholder(slot: str, index: int) -> str:
    return f"${slot}_{index}"


def normalize_placeholder(token: str) -> str:
    """Map either placeholder spelling onto the canonical underscore form."""
    if not is_placeholder(token):
        return token
    slot, index = parse_placeholder(token)
    return make_placeholder(slot, index)


def strip_placeholder_index(token: str) -> str:
    """`$date_3` -> `$date`; non-placeholders pass through."""
    if not is_placeholder(token):
        return token
    return "$" + parse_placeholder(token)[0]


@dataclass(frozen=True)
class MRTriple:
    act: str
    slot: str = NULL
    value: str = NULL

    def __str__(self) -> str:
        return f"{self.act}({self.slot}={self.value})"

    def to_dict(self) -> dict:
        return {"act": self.act, "slot": self.slot, "value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> "MRTriple":
        return cls(d["act"], d.get("slot", NULL), d.get("value", NULL))


@dataclass(frozen=True)
class SlotDescription:
    slot: str
    description: str
    is_categorical: bool = False

    def to_dict(self) -> dict:
        return {"slot": self.slot, "description": self.description,
                "is_categorical": self.is_categorical}

    @classmethod
    def from_dict(cls, d: dict) -> "SlotDescription":
        return cls(d["slot"], d["description"], bool(d.get("is_categorical", False)))


@dataclass(frozen=True)
class Template:
    text: str

    @property
    def tokens(self) -> list[str]:
        from .text import tokenize
        return tokenize(self.text, lower=False)

    def placeholders(self) -> list[str]:
        return [t for t in self.tokens if is_placeholder(t)]

    def __str__(self) -> str:
        return self.text


@dataclass(frozen=True)
class SchemaInstance:
    mr: tuple[MRTriple, ...]
    slot_descriptions: tuple[SlotDescription, ...] = ()
    service: str = ""
    service_description: str = ""
    intent: str = ""
    intent_description: str = ""
    nl_mr: str = ""

    def __post_init__(self):
        # accept lists from callers; store tuples so instances stay hashable
        object.__setattr__(self, "mr", tuple(self.mr))
        object.__setattr__(self, "slot_descriptions", tuple(self.slot_descriptions))

    def slot_description(self, slot: str) -> str:
        for sd in self.slot_descriptions:
            if sd.slot == slot:
                return sd.description
        return ""

    def mr_key(self) -> tuple:
        """Grouping key: records sharing (mr, service, intent) are pooled."""
        return (tuple((t.act, t.slot, t.value) for t in self.mr), self.service, self.intent)

    def mr_string(self) -> str:
        return ", ".join(str(t) for t in self.mr)

    def to_dict(self) -> dict:
        return {
            "mr": [t.to_dict() for t in self.mr],
            "slot_descriptions": [sd.to_dict() for sd in self.slot_descriptions],
            "service": self.service,
            "service_description": self.service_description,
            "intent": self.intent,
            "intent_description": self.intent_description,
            "nl_mr": self.nl_mr,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SchemaInstance":
        return cls(
            mr=tuple(MRTriple.from_dict(t) for t in d["mr"]),
            slot_descriptions=tuple(SlotDescription.from_dict(s) for s in d.get("slot_descriptions", [])),
            service=d.get("service", ""),
            service_description=d.get("service_description", ""),
            intent=d.get("intent", ""),
            intent_description=d.get("intent_description", ""),
            nl_mr=d.get("nl_mr", ""),
        )


@dataclass(frozen=True)
class SGNLGRecord:
    schema: SchemaInstance
    references: tuple[Template, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "references", tuple(
            r if isinstance(r, Template) else Template(r) for r in self.references))

    def to_dict(self) -> dict:
        return {"schema": self.schema.to_dict(),
                "references": [r.text for r in self.references]}

    @classmethod
    def from_dict(cls, d: dict) -> "SGNLGRecord":
        return cls(SchemaInstance.from_dict(d["schema"]),
                   tuple(Template(t) for t in d["references"]))


def explicit_slots(mr: Iterable[MRTriple]) -> Counter:
    """Multiset of placeholder values in ``mr``; null-valued triples add nothing."""
    return Counter(t.value for t in mr if t.value != NULL and is_placeholder(t.value))


def _placeholder_violations(where: str, tokens: Iterable[str]) -> list[str]:
    out = []
    for tok in tokens:
        if tok.startswith("$") and not is_placeholder(tok):
            out.append(f"{where}: malformed placeholder {tok!r}")
        elif is_placeholder(tok) and parse_placeholder(tok)[1] < 1:
            out.append(f"{where}: placeholder index must be >= 1 in {tok!r}")
    return out


def validate_record(record: SGNLGRecord) -> list[str]:
    """Check every type invariant; returns human-readable violations (empty if valid)."""
    problems: list[str] = []
    schema = record.schema
    for i, t in enumerate(schema.mr):
        for name in ("act", "slot", "value"):
            if not getattr(t, name):
                problems.append(f"mr[{i}].{name}: empty (use 'null' for absent slot/value)")
        if t.value != NULL and t.value.startswith("$"):
            problems.extend(_placeholder_violations(f"mr[{i}].value", [t.value]))

    described = Counter(sd.slot for sd in schema.slot_descriptions)
    mr_slots = {t.slot for t in schema.mr if t.slot != NULL}
    for slot in sorted(mr_slots):
        if described[slot] == 0:
            problems.append(f"slot_descriptions: missing description for slot {slot!r}")
        elif described[slot] > 1:
            problems.append(f"slot_descriptions: duplicate descriptions for slot {slot!r}")
    for sd in schema.slot_descriptions:
        if not sd.description.strip():
            problems.append(f"slot_descriptions: empty description for slot {sd.slot!r}")

    indices: dict[str, set[int]] = {}
    for t in schema.mr:
        if is_placeholder(t.value):
            slot, idx = parse_placeholder(t.value)
            indices.setdefault(slot, set()).add(idx)
    for slot, used in sorted(indices.items()):
        if used != set(range(1, max(used) + 1)):
            problems.append(
                f"mr: placeholder indices for {slot!r} not contiguous from 1: {sorted(used)}")

    if bool(schema.intent) != bool(schema.intent_description):
        problems.append("intent_description: must be empty iff intent is empty")

    if not record.references:
        problems.append("references: must be non-empty")
    for j, ref in enumerate(record.references):
        problems.extend(_placeholder_violations(f"references[{j}]", ref.placeholders()))
    return problems


def render_record(record: SGNLGRecord) -> str:
    return json.dumps(record.to_dict(), ensure_ascii=False, sort_keys=False)


def parse_record(line: str) -> SGNLGRecord:
    return SGNLGRecord.from_dict(json.loads(line))


META_KEY = "__meta__"


def write_jsonl(path, rows: Iterable[dict], meta: dict | None = None) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if meta is not None:
            f.write(json.dumps({META_KEY: meta}, sort_keys=True) + "\n")
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")


def iter_jsonl(path) -> Iterator[dict]:
    """Yield JSON objects, skipping the optional artifact header line."""
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if META_KEY in obj:
                continue
            yield obj


def read_jsonl_meta(path) -> dict | None:
    with open(path, encoding="utf-8") as f:
        first = f.readline().strip()
    if not first:
        return None
    obj = json.loads(first)
    return obj.get(META_KEY)


def save_records(path, records: Iterable[SGNLGRecord], meta: dict | None = None) -> None:
    write_jsonl(path, (r.to_dict() for r in records), meta=meta)


def load_records(path) -> list[SGNLGRecord]:
    return [SGNLGRecord.from_dict(d) for d in iter_jsonl(path)]
