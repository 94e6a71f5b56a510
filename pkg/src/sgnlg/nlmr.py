"""Rule table that renders an MR as plain English, one sentence per triple.

Each act maps to a pair of patterns: one used when the triple carries a
value and one when the value is ``null``. Only CONFIRM, INFORM, REQUEST
(null value), OFFER and NOTIFY_SUCCESS are attested by published examples;
the remaining patterns are toolkit-authored in the same register. The table
can be replaced from a JSON file with :func:`load_rules`.
"""
from __future__ import annotations

import json

from .schema import NULL, MRTriple

# act -> (pattern with value, pattern without value)
DEFAULT_RULES: dict[str, tuple[str, str]] = {
    "CONFIRM": ("please confirm that the [{slot}] is [{value}].", "please confirm the [{slot}]."),
    "INFORM": ("the [{slot}] is [{value}].", "the [{slot}] is available."),
    "REQUEST": ("is [{value}] the [{slot}] you want?", "what [{slot}] do you want?"),
    "OFFER": ("there is [{value}] for [{slot}].", "there is an option for [{slot}]."),
    "NOTIFY_SUCCESS": ("the request succeeded.", "the request succeeded."),
    # toolkit-authored below
    "INFORM_COUNT": ("the [{slot}] is [{value}].", "the [{slot}] is available."),
    "NOTIFY_FAILURE": ("the request failed.", "the request failed."),
    "OFFER_INTENT": ("do you want to [{value}]?", "do you want to do something else?"),
    "REQ_MORE": ("do you need anything else?", "do you need anything else?"),
    "GOODBYE": ("goodbye.", "goodbye."),
}

ATTESTED_ACTS = frozenset({"CONFIRM", "INFORM", "REQUEST", "OFFER", "NOTIFY_SUCCESS"})

_ALIASES = {"BYE": "GOODBYE"}


class UnknownActError(KeyError):
    pass


def canonical_act(act: str) -> str:
    key = act.strip().upper().replace("-", "_")
    return _ALIASES.get(key, key)


def humanize_slot(slot: str) -> str:
    """`price-per-night` / `price_per_night` -> `price per night`."""
    return slot.replace("-", " ").replace("_", " ")


def render_triple(triple: MRTriple, rules: dict[str, tuple[str, str]] | None = None) -> str:
    rules = DEFAULT_RULES if rules is None else rules
    act = canonical_act(triple.act)
    if act not in rules:
        raise UnknownActError(f"no natural-language rule for act {triple.act!r}")
    with_value, without_value = rules[act]
    pattern = without_value if triple.value == NULL else with_value
    slot = "" if triple.slot == NULL else humanize_slot(triple.slot)
    return pattern.format(slot=slot, value=triple.value).lower()


def render_nl_mr(mr, rules=None) -> str:
    """Concatenate one rendered sentence per triple, in MR order."""
    mr = list(mr)
    if not mr:
        raise ValueError("cannot render an empty MR")
    return " ".join(render_triple(t, rules) for t in mr)


def load_rules(path) -> dict[str, tuple[str, str]]:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    rules = dict(DEFAULT_RULES)
    for act, pats in raw.items():
        if isinstance(pats, str):
            pats = [pats, pats]
        rules[canonical_act(act)] = (pats[0], pats[1])
    return rules


def missing_rules(acts, rules=None) -> list[str]:
    rules = DEFAULT_RULES if rules is None else rules
    return sorted({a for a in acts if canonical_act(a) not in rules})
