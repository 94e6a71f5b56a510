"""Semantic accuracy, reference similarity and diversity metrics.

All metrics tokenize with :func:`sgnlg.text.tokenize` (lowercase,
punctuation split off, placeholders atomic).
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field

from .schema import Template, explicit_slots, is_placeholder, normalize_placeholder, strip_placeholder_index
from .text import TOKENIZER_VERSION, ngrams, tokenize


def _toks(x) -> list[str]:
    if isinstance(x, Template):
        x = x.text
    if isinstance(x, str):
        return tokenize(x)
    return list(x)


def _canon(tok: str) -> str:
    return normalize_placeholder(tok).lower()


# --------------------------------------------------------------------------
# slot errors

@dataclass
class SlotErrorBreakdown:
    deletions: int = 0
    repetitions: int = 0
    hallucinations: int = 0
    total_explicit_slots: int = 0

    @property
    def errors(self) -> int:
        return self.deletions + self.repetitions + self.hallucinations

    @property
    def ser(self) -> float | None:
        """None when the MR has no explicit slots (instance excluded from SER)."""
        if self.total_explicit_slots == 0:
            return None
        return self.errors / self.total_explicit_slots

    def __add__(self, other: "SlotErrorBreakdown") -> "SlotErrorBreakdown":
        return SlotErrorBreakdown(self.deletions + other.deletions, self.repetitions + other.repetitions,
                                  self.hallucinations + other.hallucinations,
                                  self.total_explicit_slots + other.total_explicit_slots)


def output_placeholders(output) -> Counter:
    return Counter(_canon(t) for t in _toks(output) if is_placeholder(t))


def expected_placeholders(mr) -> Counter:
    return Counter({_canon(k): v for k, v in explicit_slots(mr).items()})


def ser(output, mr) -> SlotErrorBreakdown:
    expected = expected_placeholders(mr)
    got = output_placeholders(output)
    d = sum(max(0, n - got[p]) for p, n in expected.items())
    r = sum(max(0, got[p] - n) for p, n in expected.items())
    h = sum(n for p, n in got.items() if p not in expected)
    return SlotErrorBreakdown(d, r, h, sum(expected.values()))


def slot_match(output, mr) -> bool:
    return output_placeholders(output) == expected_placeholders(mr)


def slot_match_rate(outputs, mrs) -> float:
    outputs, mrs = list(outputs), list(mrs)
    if len(outputs) != len(mrs):
        raise ValueError("outputs and MRs must be aligned")
    if not outputs:
        return 0.0
    return sum(slot_match(o, m) for o, m in zip(outputs, mrs)) / len(outputs)


# --------------------------------------------------------------------------
# BLEU

def _bleu_stats(hyp: list[str], refs: list[list[str]], max_n: int):
    nums, dens = [], []
    for n in range(1, max_n + 1):
        h = Counter(ngrams(hyp, n))
        ref_max: Counter = Counter()
        for r in refs:
            for g, c in Counter(ngrams(r, n)).items():
                ref_max[g] = max(ref_max[g], c)
        nums.append(sum(min(c, ref_max[g]) for g, c in h.items()))
        # no phantom count for outputs shorter than n: identical outputs must score 1
        dens.append(sum(h.values()))
    # closest reference length, shorter on ties
    ref_len = min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
    return nums, dens, len(hyp), ref_len


def _brevity(hyp_len: int, ref_len: int) -> float:
    if hyp_len > ref_len:
        return 1.0
    if hyp_len == 0:
        return 0.0
    return math.exp(1 - ref_len / hyp_len)


def corpus_bleu(outputs, references, max_n: int = 4) -> float:
    """Corpus BLEU with uniform weights and no smoothing.

    ``references[i]`` is the list of references for ``outputs[i]``.
    """
    outputs, references = list(outputs), list(references)
    if len(outputs) != len(references):
        raise ValueError("outputs and references must be aligned")
    nums, dens = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for out, refs in zip(outputs, references):
        refs = [_toks(r) for r in refs]
        if not refs:
            raise ValueError("every output needs at least one reference")
        n, d, hl, rl = _bleu_stats(_toks(out), refs, max_n)
        nums = [a + b for a, b in zip(nums, n)]
        dens = [a + b for a, b in zip(dens, d)]
        hyp_len += hl
        ref_len += rl
    # orders with no n-grams anywhere in the outputs carry no evidence and are left out
    orders = [(n, d) for n, d in zip(nums, dens) if d > 0]
    if not orders or min(n for n, _ in orders) == 0:
        return 0.0
    log_p = sum(math.log(n / d) for n, d in orders) / len(orders)
    return _brevity(hyp_len, ref_len) * math.exp(log_p)


def sentence_bleu(output, references, max_n: int = 4) -> float:
    """Per-sentence diagnostic BLEU with add-one smoothing for orders >= 2."""
    refs = [_toks(r) for r in references]
    nums, dens, hl, rl = _bleu_stats(_toks(output), refs, max_n)
    if nums[0] == 0:
        return 0.0
    log_p = math.log(nums[0] / dens[0])
    log_p += sum(math.log((n + 1) / (max(1, d) + 1)) for n, d in zip(nums[1:], dens[1:]))
    return _brevity(hl, rl) * math.exp(log_p / max_n)


# --------------------------------------------------------------------------
# METEOR (exact + stem modules)

_stemmer = None


def _stem(word: str) -> str:
    global _stemmer
    if _stemmer is None:
        from nltk.stem.porter import PorterStemmer
        _stemmer = PorterStemmer()
    return _stemmer.stem(word)


def _align(hyp: list[tuple[int, str]], ref: list[tuple[int, str]]):
    """Greedy one-to-one matching scanning both sides from the right.

    Consumes matched entries from ``hyp`` and ``ref`` in place.
    """
    pairs = []
    for i in range(len(hyp) - 1, -1, -1):
        for j in range(len(ref) - 1, -1, -1):
            if hyp[i][1] == ref[j][1]:
                pairs.append((hyp[i][0], ref[j][0]))
                del hyp[i]
                del ref[j]
                break
    return pairs


def _chunks(pairs) -> int:
    chunks = 1
    for (h0, r0), (h1, r1) in zip(pairs, pairs[1:]):
        if not (h1 == h0 + 1 and r1 == r0 + 1):
            chunks += 1
    return chunks


def meteor_single(output, reference, alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5,
                  stem: bool = True) -> float:
    hyp = list(enumerate(_toks(output)))
    ref = list(enumerate(_toks(reference)))
    n_hyp, n_ref = len(hyp), len(ref)
    pairs = _align(hyp, ref)
    if stem:
        hyp = [(i, _stem(w)) for i, w in hyp]
        ref = [(j, _stem(w)) for j, w in ref]
        pairs += _align(hyp, ref)
    m = len(pairs)
    if m == 0 or n_hyp == 0 or n_ref == 0:
        return 0.0
    pairs.sort()
    precision, recall = m / n_hyp, m / n_ref
    fmean = precision * recall / (alpha * precision + (1 - alpha) * recall)
    penalty = gamma * (_chunks(pairs) / m) ** beta
    return (1 - penalty) * fmean


def meteor(output, references, **kw) -> float:
    return max(meteor_single(output, r, **kw) for r in references)


def mean_meteor(outputs, references, **kw) -> float:
    scores = [meteor(o, refs, **kw) for o, refs in zip(outputs, references)]
    return sum(scores) / len(scores) if scores else 0.0


# --------------------------------------------------------------------------
# diversity

def vocab_n(outputs, n: int) -> int:
    seen = set()
    for o in outputs:
        seen.update(ngrams(_toks(o), n))
    return len(seen)


def distinct_n(outputs, n: int) -> float:
    seen, total = set(), 0
    for o in outputs:
        grams = ngrams(_toks(o), n)
        total += len(grams)
        seen.update(grams)
    return len(seen) / total if total else 0.0


def normalize_template(text) -> str:
    """Lowercased token string with placeholder indices removed: ``$date_3`` -> ``$date``."""
    return " ".join(strip_placeholder_index(t) if is_placeholder(t) else t for t in _toks(text))


def _canonical_string(text) -> str:
    return " ".join(_canon(t) if is_placeholder(t) else t for t in _toks(text))


def novelty(outputs, train_references, normalize: bool = True) -> float:
    """Share of distinct outputs that do not occur among training references."""
    key = normalize_template if normalize else _canonical_string
    outs = {key(o) for o in outputs}
    if not outs:
        return 0.0
    train = {key(r) for r in train_references}
    return len(outs - train) / len(outs)


@dataclass
class Diversity:
    vocab_1: int
    vocab_2: int
    distinct_1: float
    distinct_2: float
    novelty: float
    novelty_raw: float


def diversity(outputs, train_references) -> Diversity:
    outputs = [o.text if isinstance(o, Template) else o for o in outputs]
    train_references = list(train_references)
    return Diversity(vocab_n(outputs, 1), vocab_n(outputs, 2), distinct_n(outputs, 1), distinct_n(outputs, 2),
                     novelty(outputs, train_references), novelty(outputs, train_references, normalize=False))


# --------------------------------------------------------------------------
# reports

@dataclass
class InstanceResult:
    output: str
    references: list
    mr: list
    service: str
    split: str = "all"

    @property
    def n_refs(self) -> int:
        return len(self.references)


@dataclass
class ServiceRow:
    service: str
    split: str
    instances: int
    references: int
    ref_share: float
    bleu: float
    meteor: float
    ser: float | None
    slot_match: float


@dataclass
class EvalReport:
    bleu: float
    meteor: float
    ser: float | None
    slot_match: float
    vocab_1: int
    vocab_2: int
    distinct_1: float
    distinct_2: float
    novelty: float
    novelty_raw: float
    instances: int
    ser_skipped: int
    errors: dict
    services: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    SUMMARY_FIELDS = ("bleu", "meteor", "ser", "slot_match", "vocab_1", "vocab_2", "distinct_1",
                      "distinct_2", "novelty", "novelty_raw")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["services"] = [ServiceRow(**r) for r in d.get("services", [])]
        return cls(**d)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "name", "split", "instances", "references", "ref_share", "bleu", "meteor", "ser",
                    "slot_match"])
        w.writerow(["overall", "all", "", self.instances, sum(s.references for s in self.services), 1.0,
                    _fmt(self.bleu), _fmt(self.meteor), _fmt(self.ser), _fmt(self.slot_match)])
        for name, agg in self.splits.items():
            w.writerow(["split", name, name, agg["instances"], agg["references"], _fmt(agg["ref_share"]),
                        _fmt(agg["bleu"]), _fmt(agg["meteor"]), _fmt(agg["ser"]), _fmt(agg["slot_match"])])
        for s in self.services:
            w.writerow(["service", s.service, s.split, s.instances, s.references, _fmt(s.ref_share),
                        _fmt(s.bleu), _fmt(s.meteor), _fmt(s.ser), _fmt(s.slot_match)])
        return buf.getvalue()

    def to_markdown(self, title: str = "") -> str:
        lines = []
        if title:
            lines += [f"### {title}", ""]
        lines += ["| BLEU | METEOR | SER | Slot match | Vocab-1 | Vocab-2 | Distinct-1 | Distinct-2 | Novelty |",
                  "|---|---|---|---|---|---|---|---|---|",
                  f"| {_fmt(self.bleu)} | {_fmt(self.meteor)} | {_fmt(self.ser)} | {_fmt(self.slot_match)} "
                  f"| {self.vocab_1} | {self.vocab_2} | {_fmt(self.distinct_1)} | {_fmt(self.distinct_2)} "
                  f"| {_fmt(self.novelty)} |", ""]
        e = self.errors
        lines += ["| Deletions | Repetitions | Hallucinations | Explicit slots |", "|---|---|---|---|",
                  f"| {e['deletions']} | {e['repetitions']} | {e['hallucinations']} | {e['total_explicit_slots']} |",
                  ""]
        for split in sorted({s.split for s in self.services}):
            lines += [f"#### {split}", "", "| Service | Ref share | BLEU | SER |", "|---|---|---|---|"]
            for s in self.services:
                if s.split == split:
                    lines.append(f"| {s.service} | {_fmt(s.ref_share)} | {_fmt(s.bleu)} | {_fmt(s.ser)} |")
            agg = self.splits.get(split)
            if agg:
                lines.append(f"| **weighted** | {_fmt(agg['ref_share'])} | {_fmt(agg['bleu'])} | {_fmt(agg['ser'])} |")
            lines.append("")
        return "\n".join(lines)


def _fmt(x) -> str:
    if x is None:
        return "n/a"
    return f"{x:.4f}"


def _mean(xs) -> float | None:
    xs = [x for x in xs if x is not None]
    return sum(xs) / len(xs) if xs else None


def weighted_mean(values, weights) -> float | None:
    pairs = [(v, w) for v, w in zip(values, weights) if v is not None]
    total = sum(w for _, w in pairs)
    if not pairs or total == 0:
        return None
    return sum(v * w for v, w in pairs) / total


def aggregate_report(results: list[InstanceResult], train_references=(), meta: dict | None = None) -> EvalReport:
    """Overall metrics, per-service rows, and per-split means weighted by reference share."""
    outputs = [r.output for r in results]
    refs = [r.references for r in results]
    breakdowns = [ser(r.output, r.mr) for r in results]
    totals = sum(breakdowns, SlotErrorBreakdown())
    all_refs = sum(r.n_refs for r in results)

    by_service: dict[tuple, list[int]] = defaultdict(list)
    for i, r in enumerate(results):
        by_service[(r.split, r.service)].append(i)
    rows = []
    for (split, service), idx in sorted(by_service.items()):
        n_refs = sum(results[i].n_refs for i in idx)
        rows.append(ServiceRow(
            service=service, split=split, instances=len(idx), references=n_refs,
            ref_share=n_refs / all_refs if all_refs else 0.0,
            bleu=corpus_bleu([outputs[i] for i in idx], [refs[i] for i in idx]),
            meteor=mean_meteor([outputs[i] for i in idx], [refs[i] for i in idx]),
            ser=_mean(breakdowns[i].ser for i in idx),
            slot_match=slot_match_rate([outputs[i] for i in idx], [results[i].mr for i in idx])))

    splits = {}
    for split in sorted({row.split for row in rows}):
        members = [row for row in rows if row.split == split]
        w = [row.references for row in members]
        splits[split] = {
            "instances": sum(row.instances for row in members),
            "references": sum(w),
            "ref_share": sum(w) / all_refs if all_refs else 0.0,
            "bleu": weighted_mean([row.bleu for row in members], w),
            "meteor": weighted_mean([row.meteor for row in members], w),
            "ser": weighted_mean([row.ser for row in members], w),
            "slot_match": weighted_mean([row.slot_match for row in members], w),
        }

    div = diversity(outputs, train_references)
    return EvalReport(
        bleu=corpus_bleu(outputs, refs) if results else 0.0,
        meteor=mean_meteor(outputs, refs),
        ser=_mean(b.ser for b in breakdowns),
        slot_match=slot_match_rate(outputs, [r.mr for r in results]),
        vocab_1=div.vocab_1, vocab_2=div.vocab_2, distinct_1=div.distinct_1, distinct_2=div.distinct_2,
        novelty=div.novelty, novelty_raw=div.novelty_raw,
        instances=len(results),
        ser_skipped=sum(b.ser is None for b in breakdowns),
        errors={**asdict(totals)},
        services=rows, splits=splits,
        meta={"tokenizer": TOKENIZER_VERSION, **(meta or {})},
    )


__all__ = [
    "SlotErrorBreakdown", "ser", "slot_match", "slot_match_rate", "corpus_bleu", "sentence_bleu", "meteor",
    "meteor_single", "mean_meteor", "vocab_n", "distinct_n", "novelty", "normalize_template", "diversity",
    "Diversity", "InstanceResult", "ServiceRow", "EvalReport", "aggregate_report", "weighted_mean",
    "expected_placeholders", "output_placeholders",
]
