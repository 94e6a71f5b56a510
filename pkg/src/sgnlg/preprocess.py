"""Turn DSTC8-style schema-guided dialogs into SG-NLG records.

Pipeline per system turn: pair with the preceding user turn, delexicalize
the utterance from its slot spans, expand actions into MR triples, carry the
user intent over when both turns share a service, attach descriptions from
the schema file and render the natural-language MR. Records sharing an
(mr, service, intent) key are merged with pooled references.
"""
from __future__ import annotations

import csv
import enum
import glob
import io
import json
import logging
import os
import random
import re
import statistics
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .nlmr import canonical_act, missing_rules, render_nl_mr
from .schema import (
    NULL,
    MRTriple,
    SchemaInstance,
    SGNLGRecord,
    SlotDescription,
    Template,
    make_placeholder,
)

logger = logging.getLogger(__name__)

# Pseudo-slots used by acts such as INFORM_COUNT / OFFER_INTENT that do not
# appear among a service's schema slots.
PSEUDO_SLOT_DESCRIPTIONS = {
    "count": "the number of items that satisfy the user's request",
    "intent": "the task the user may want to perform",
}


class MalformedCorpusError(ValueError):
    pass


class SpanMismatchError(ValueError):
    pass


class SchemaLookupError(KeyError):
    pass


class SplitLabel(str, enum.Enum):
    SEEN = "seen"
    PARTIALLY_UNSEEN = "partially_unseen"
    FULLY_UNSEEN = "fully_unseen"


@dataclass(frozen=True)
class Action:
    act: str
    slot: str
    values: tuple[str, ...] = ()


@dataclass(frozen=True)
class SourceTurn:
    speaker: str
    utterance: str
    actions: tuple[Action, ...] = ()
    service: str = ""
    slot_spans: tuple[tuple[str, int, int], ...] = ()
    intent: str = ""
    dialog_id: str = ""
    turn_index: int = 0


# --------------------------------------------------------------------------
# corpus reading

def _frame_turn(turn: dict, frame: dict, dialog_id: str, idx: int) -> SourceTurn:
    actions = tuple(
        Action(a["act"], a.get("slot", "") or NULL, tuple(a.get("values", [])))
        for a in frame.get("actions", [])
    )
    spans = tuple((s["slot"], int(s["start"]), int(s["exclusive_end"]))
                  for s in frame.get("slots", []) if "start" in s)
    intent = ""
    state = frame.get("state")
    if state:
        intent = state.get("active_intent", "") or ""
        if intent == "NONE":
            intent = ""
    return SourceTurn(turn["speaker"].upper(), turn["utterance"], actions, frame["service"],
                      spans, intent, dialog_id, idx)


def extract_system_turns(dialogs) -> list[tuple[SourceTurn, SourceTurn | None]]:
    """Drop user turns; pair each system frame with the preceding user turn.

    System turns with several frames yield one entry per frame. The user
    turn is represented by its frame for the same service when it has one,
    otherwise by its first frame.
    """
    out = []
    for dialog in dialogs:
        did = dialog.get("dialogue_id", "<unknown>") if isinstance(dialog, dict) else "<unknown>"
        try:
            turns = dialog["turns"]
            prev_user = None
            for idx, turn in enumerate(turns):
                speaker = turn["speaker"].upper()
                if speaker == "USER":
                    prev_user = (turn, idx)
                    continue
                if speaker != "SYSTEM":
                    raise MalformedCorpusError(f"unknown speaker {turn['speaker']!r}")
                for frame in turn["frames"]:
                    sys_turn = _frame_turn(turn, frame, did, idx)
                    user_turn = None
                    if prev_user is not None:
                        uturn, uidx = prev_user
                        frames = uturn.get("frames") or []
                        if frames:
                            same = [f for f in frames if f.get("service") == sys_turn.service]
                            user_turn = _frame_turn(uturn, (same or frames)[0], did, uidx)
                        else:
                            user_turn = SourceTurn("USER", uturn["utterance"], dialog_id=did,
                                                   turn_index=uidx)
                    out.append((sys_turn, user_turn))
        except MalformedCorpusError as e:
            raise MalformedCorpusError(f"dialog {did}: {e}") from None
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise MalformedCorpusError(f"dialog {did}: malformed turn ({e!r})") from None
    return out


# --------------------------------------------------------------------------
# delexicalization and MR construction

def delexicalize(utterance: str, slot_spans, actions=()) -> tuple[Template, dict[str, str]]:
    """Replace slot spans with ``$slot_k`` placeholders.

    ``k`` counts occurrences of each slot type left to right from 1. Returns
    the template and a placeholder -> surface value map.
    """
    spans = sorted(slot_spans, key=lambda s: (s[1], s[2]))
    n = len(utterance)
    prev_end = -1
    for slot, start, end in spans:
        if not (0 <= start < end <= n):
            raise SpanMismatchError(f"span {slot}[{start}:{end}] outside utterance of length {n}")
        if start < prev_end:
            raise SpanMismatchError(f"overlapping span {slot}[{start}:{end}]")
        prev_end = end
    if actions:
        allowed: dict[str, set[str]] = {}
        for a in actions:
            allowed.setdefault(a.slot, set()).update(v.lower() for v in a.values)
        for slot, start, end in spans:
            text = utterance[start:end]
            if text.lower() not in allowed.get(slot, set()):
                raise SpanMismatchError(f"span text {text!r} is not a listed value of slot {slot!r}")

    counts: Counter = Counter()
    labelled = []
    assignment: dict[str, str] = {}
    for slot, start, end in spans:
        counts[slot] += 1
        ph = make_placeholder(slot, counts[slot])
        labelled.append((ph, start, end))
        assignment[ph] = utterance[start:end]

    text = utterance
    for ph, start, end in reversed(labelled):
        text = text[:start] + ph + text[end:]
    return Template(text), assignment


def lexicalize(template: Template, assignment: dict[str, str]) -> str:
    """Inverse of :func:`delexicalize` (used to check losslessness)."""
    # longest first so `$x_1` never clobbers `$x_10`
    text = template.text
    pattern = re.compile("|".join(re.escape(p) for p in sorted(assignment, key=len, reverse=True)))
    if not assignment:
        return text
    return pattern.sub(lambda m: assignment[m.group(0)], text)


class ValueNotFoundError(KeyError):
    pass


def build_mr(actions, assignment: dict[str, str], strict: bool = False,
             stats: Counter | None = None) -> list[MRTriple]:
    """Expand actions into one triple per value, using assigned placeholders.

    A value with no matching placeholder raises in strict mode; otherwise the
    raw value is kept and counted under ``stats['unplaced_values']``.
    """
    by_value: dict[tuple[str, str], list[str]] = {}
    for ph, surface in assignment.items():
        slot = ph[1:].rsplit("_", 1)[0]
        by_value.setdefault((slot, surface.lower()), []).append(ph)
    for phs in by_value.values():
        phs.sort(key=lambda p: int(p.rsplit("_", 1)[1]))

    mr = []
    for a in actions:
        act = canonical_act(a.act)
        slot = a.slot if a.slot and a.slot != NULL else NULL
        if slot == NULL:
            mr.append(MRTriple(act, NULL, NULL))
            continue
        if not a.values:
            mr.append(MRTriple(act, slot, NULL))
            continue
        for v in a.values:
            phs = by_value.get((slot, v.lower()))
            if phs:
                mr.append(MRTriple(act, slot, phs[0]))
            elif strict:
                raise ValueNotFoundError(f"value {v!r} of slot {slot!r} has no placeholder")
            else:
                if stats is not None:
                    stats["unplaced_values"] += 1
                mr.append(MRTriple(act, slot, v))
    return mr


def propagate_intent(system_turn: SourceTurn, user_turn: SourceTurn | None) -> str:
    if user_turn is None or user_turn.service != system_turn.service:
        return ""
    return user_turn.intent


# --------------------------------------------------------------------------
# schema files

@dataclass
class ServiceSchema:
    name: str
    description: str
    slots: dict[str, SlotDescription] = field(default_factory=dict)
    intents: dict[str, str] = field(default_factory=dict)


def load_schema_file(path) -> dict[str, ServiceSchema]:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    return parse_schema(raw)


def parse_schema(raw) -> dict[str, ServiceSchema]:
    out = {}
    for svc in raw:
        slots = {s["name"]: SlotDescription(s["name"], s.get("description", ""),
                                            bool(s.get("is_categorical", False)))
                 for s in svc.get("slots", [])}
        intents = {i["name"]: i.get("description", "") for i in svc.get("intents", [])}
        out[svc["service_name"]] = ServiceSchema(svc["service_name"], svc.get("description", ""),
                                                 slots, intents)
    return out


def attach_schema_info(mr, service: str, intent: str, schemas: dict[str, ServiceSchema],
                       nl_mr: str | None = None) -> SchemaInstance:
    if service not in schemas:
        raise SchemaLookupError(f"service {service!r} not in schema file")
    svc = schemas[service]
    descs = []
    seen = set()
    for t in mr:
        if t.slot == NULL or t.slot in seen:
            continue
        seen.add(t.slot)
        if t.slot in svc.slots:
            descs.append(svc.slots[t.slot])
        elif t.slot in PSEUDO_SLOT_DESCRIPTIONS:
            descs.append(SlotDescription(t.slot, PSEUDO_SLOT_DESCRIPTIONS[t.slot], False))
        else:
            raise SchemaLookupError(f"slot {t.slot!r} not in schema of {service!r}")
    intent_desc = ""
    if intent:
        if intent not in svc.intents:
            raise SchemaLookupError(f"intent {intent!r} not in schema of {service!r}")
        intent_desc = svc.intents[intent]
    return SchemaInstance(
        mr=tuple(mr),
        slot_descriptions=tuple(descs),
        service=service,
        service_description=svc.description,
        intent=intent,
        intent_description=intent_desc,
        nl_mr=render_nl_mr(mr) if nl_mr is None else nl_mr,
    )


# --------------------------------------------------------------------------
# splits and statistics

def domain_of(service: str) -> str:
    """`Restaurants_2` -> `restaurants`."""
    return re.sub(r"[_\-]\d+$", "", service).lower()


def classify_service_split(service: str, train_services, train_domains=None) -> SplitLabel:
    train_services = {s.lower() for s in train_services}
    if train_domains is None:
        train_domains = {domain_of(s) for s in train_services}
    train_domains = {d.lower() for d in train_domains}
    if service.lower() in train_services:
        return SplitLabel.SEEN
    if domain_of(service) in train_domains:
        return SplitLabel.PARTIALLY_UNSEEN
    return SplitLabel.FULLY_UNSEEN


STAT_FIELDS = ["templates", "templates_dedup", "mrs", "services", "domains",
               "refs_per_mr_mean", "refs_per_mr_median", "refs_per_mr_max"]


def corpus_stats(records_by_split: dict[str, list[SGNLGRecord]]) -> dict[str, dict]:
    table = {}
    for split, records in records_by_split.items():
        counts = [len(r.references) for r in records]
        services = {r.schema.service for r in records}
        table[split] = {
            "templates": sum(counts),
            "templates_dedup": sum(len({t.text for t in r.references}) for r in records),
            "mrs": len(records),
            "services": len(services),
            "domains": len({domain_of(s) for s in services}),
            "refs_per_mr_mean": round(statistics.mean(counts), 4) if counts else 0,
            "refs_per_mr_median": float(statistics.median(counts)) if counts else 0.0,
            "refs_per_mr_max": max(counts) if counts else 0,
        }
    return table


def stats_to_csv(table: dict[str, dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split"] + STAT_FIELDS)
    for split, row in table.items():
        w.writerow([split] + [row[k] for k in STAT_FIELDS])
    return buf.getvalue()


def stats_to_markdown(table: dict[str, dict]) -> str:
    splits = list(table)
    lines = ["| | " + " | ".join(splits) + " |", "|---|" + "---:|" * len(splits)]
    for k in STAT_FIELDS:
        lines.append(f"| {k} | " + " | ".join(str(table[s][k]) for s in splits) + " |")
    return "\n".join(lines) + "\n"


def reference_distribution(records: list[SGNLGRecord]) -> dict[str, int]:
    """Reference counts per service (used for split weighting and plots)."""
    c: Counter = Counter()
    for r in records:
        c[r.schema.service] += len(r.references)
    return dict(sorted(c.items(), key=lambda kv: (-kv[1], kv[0])))


# --------------------------------------------------------------------------
# full pipeline

def _load_dialog_file(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _process_dialogs(dialogs, schemas, stats: Counter):
    """Yield (order key, SchemaInstance, Template) for every usable system frame."""
    for sys_turn, user_turn in extract_system_turns(dialogs):
        stats["system_frames"] += 1
        try:
            template, assignment = delexicalize(sys_turn.utterance, sys_turn.slot_spans,
                                                sys_turn.actions)
        except SpanMismatchError as e:
            stats["dropped_span_mismatch"] += 1
            logger.debug("%s/%d: %s", sys_turn.dialog_id, sys_turn.turn_index, e)
            continue
        mr = build_mr(sys_turn.actions, assignment, stats=stats)
        if not mr:
            stats["dropped_empty_mr"] += 1
            continue
        intent = propagate_intent(sys_turn, user_turn)
        if not intent:
            stats["empty_intent"] += 1
        try:
            inst = attach_schema_info(mr, sys_turn.service, intent, schemas)
        except SchemaLookupError as e:
            stats["dropped_schema_lookup"] += 1
            logger.debug("%s/%d: %s", sys_turn.dialog_id, sys_turn.turn_index, e)
            continue
        yield (sys_turn.dialog_id, sys_turn.turn_index), inst, template


def group_records(items, dedupe: bool = False) -> list[SGNLGRecord]:
    """Merge (key, instance, template) items by MR key; order by first occurrence."""
    groups: dict[tuple, tuple[SchemaInstance, list[Template]]] = {}
    for _, inst, template in sorted(items, key=lambda x: x[0]):
        key = inst.mr_key()
        if key not in groups:
            groups[key] = (inst, [])
        refs = groups[key][1]
        if dedupe and template in refs:
            continue
        refs.append(template)
    return [SGNLGRecord(inst, tuple(refs)) for inst, refs in groups.values()]


def _dialog_sort_key(dialog_id: str):
    return tuple(int(p) if p.isdigit() else p for p in re.split(r"(\d+)", dialog_id))


def read_split(split_dir) -> tuple[list[dict], dict[str, ServiceSchema]]:
    schema_path = os.path.join(split_dir, "schema.json")
    if not os.path.exists(schema_path):
        raise MalformedCorpusError(f"missing schema.json in {split_dir}")
    schemas = load_schema_file(schema_path)
    files = sorted(glob.glob(os.path.join(split_dir, "dialogues_*.json")))
    dialogs = []
    for path in files:
        data = _load_dialog_file(path)
        if not isinstance(data, list):
            raise MalformedCorpusError(f"{path}: expected a list of dialogs")
        dialogs.extend(data)
    dialogs.sort(key=lambda d: _dialog_sort_key(str(d.get("dialogue_id", ""))))
    return dialogs, schemas


def split_train_dev(dialogs, dev_fraction: float, seed: int):
    ids = sorted((d["dialogue_id"] for d in dialogs), key=_dialog_sort_key)
    rng = random.Random(seed)
    rng.shuffle(ids)
    n_dev = int(round(dev_fraction * len(ids)))
    dev_ids = set(ids[:n_dev])
    train = [d for d in dialogs if d["dialogue_id"] not in dev_ids]
    dev = [d for d in dialogs if d["dialogue_id"] in dev_ids]
    return train, dev


def _chunk_worker(args):
    dialogs, raw_schema = args
    stats: Counter = Counter()
    items = list(_process_dialogs(dialogs, parse_schema(raw_schema), stats))
    return items, stats


@dataclass
class PreprocessResult:
    splits: dict[str, list[SGNLGRecord]]
    counters: dict[str, dict[str, int]]
    act_inventory: list[str]
    stats_dedup: dict[str, dict] | None = None


def records_from_dialogs(dialogs, schemas, dedupe=False, jobs: int = 1,
                         raw_schema=None) -> tuple[list[SGNLGRecord], Counter]:
    stats: Counter = Counter()
    if jobs > 1 and raw_schema is not None and len(dialogs) > jobs:
        size = (len(dialogs) + jobs - 1) // jobs
        chunks = [(dialogs[i:i + size], raw_schema) for i in range(0, len(dialogs), size)]
        items = []
        with ProcessPoolExecutor(jobs) as ex:
            for part, st in ex.map(_chunk_worker, chunks):
                items.extend(part)
                stats.update(st)
    else:
        items = list(_process_dialogs(dialogs, schemas, stats))
    return group_records(items, dedupe=dedupe), stats


def preprocess_corpus(input_dir, dev_fraction: float = 0.1, seed: int = 0,
                      dedupe: bool = False, jobs: int = 1) -> PreprocessResult:
    """DSTC8 train -> train/dev (random by dialog), DSTC8 dev -> test."""
    train_dir = os.path.join(input_dir, "train")
    test_dir = os.path.join(input_dir, "dev")
    for d in (train_dir, test_dir):
        if not os.path.isdir(d):
            raise MalformedCorpusError(f"expected split directory {d}")

    train_dialogs, train_schema = read_split(train_dir)
    test_dialogs, test_schema = read_split(test_dir)
    with open(os.path.join(train_dir, "schema.json"), encoding="utf-8") as f:
        raw_train_schema = json.load(f)
    with open(os.path.join(test_dir, "schema.json"), encoding="utf-8") as f:
        raw_test_schema = json.load(f)

    tr, dv = split_train_dev(train_dialogs, dev_fraction, seed)
    splits, counters = {}, {}
    for name, dialogs, schemas, raw in (("train", tr, train_schema, raw_train_schema),
                                        ("dev", dv, train_schema, raw_train_schema),
                                        ("test", test_dialogs, test_schema, raw_test_schema)):
        records, st = records_from_dialogs(dialogs, schemas, dedupe=dedupe, jobs=jobs,
                                           raw_schema=raw)
        splits[name] = records
        counters[name] = dict(sorted(st.items()))
        logger.info("%s: %d records from %d dialogs (%s)", name, len(records), len(dialogs),
                    counters[name])

    acts = sorted({t.act for recs in splits.values() for r in recs for t in r.schema.mr})
    missing = missing_rules(acts)
    if missing:
        raise SchemaLookupError(f"no natural-language rule for acts {missing}")
    return PreprocessResult(splits, counters, acts)
