"""Slot-constrained beam search and seeded top-k sampling.

Beam search works against any *session* object exposing::

    bos_id, eos_id, placeholder_ids        # ints / set of ints
    start() -> state
    step(states, prev_tokens) -> (log_probs [N, V] array, new_states)
    to_template(tokens) -> Template

Sampling works against any object exposing ``next_logits(prefix_ids)``,
``eos_id`` and ``to_template(ids)``.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .schema import Template

NEG_INF = float("-inf")


@dataclass
class BeamNode:
    tokens: tuple
    logprob: float
    emitted: Counter = field(default_factory=Counter)
    state: object = None
    finished: bool = False

    def sort_key(self):
        # higher score first; ties broken lexicographically on token ids
        return (-self.logprob, self.tokens)


def beam_search(session, beam_width: int = 5, max_len: int = 60) -> list[BeamNode]:
    """Return finished hypotheses, best first.

    Any expansion that would emit a placeholder already present in the
    node's prefix gets probability zero. Finished hypotheses (EOS or
    ``max_len`` tokens) leave the beam; search ends when no live node is left.
    """
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    placeholders = set(session.placeholder_ids)
    live = [BeamNode((), 0.0, Counter(), session.start())]
    finished: list[BeamNode] = []
    while live:
        logp, new_states = session.step([n.state for n in live],
                                        [n.tokens[-1] if n.tokens else session.bos_id for n in live])
        logp = np.asarray(logp, dtype=np.float64)
        candidates = []
        for i, node in enumerate(live):
            row = logp[i].copy()
            for ph in node.emitted:
                row[ph] = NEG_INF
            ok = np.flatnonzero(np.isfinite(row))
            if len(ok) == 0:
                # everything pruned: close the hypothesis without the repeated token
                finished.append(BeamNode(node.tokens, node.logprob, node.emitted, None, True))
                continue
            # only the top `beam_width` of each row can survive the global cut
            if len(ok) > beam_width:
                part = ok[np.argpartition(-row[ok], beam_width - 1)[:beam_width]]
                kth = row[part].min()
                ok = ok[row[ok] >= kth]
            for tok in ok:
                tok = int(tok)
                tokens = node.tokens + (tok,)
                emitted = node.emitted
                if tok in placeholders:
                    emitted = emitted.copy()
                    emitted[tok] += 1
                done = tok == session.eos_id or len(tokens) >= max_len
                candidates.append(BeamNode(tokens, node.logprob + float(row[tok]), emitted,
                                           new_states[i], done))
        candidates.sort(key=BeamNode.sort_key)
        live = []
        for cand in candidates[:beam_width]:
            (finished if cand.finished else live).append(cand)
    finished.sort(key=BeamNode.sort_key)
    return finished


def constrained_beam_decode(session, beam_width: int = 5, max_len: int = 60) -> Template:
    best = beam_search(session, beam_width, max_len)[0]
    return session.to_template(best.tokens)


def greedy_decode(session, max_len: int = 60, constrained: bool = True) -> tuple:
    """Plain argmax loop (with the same repetition mask); reference for width-1 beams."""
    state = session.start()
    tokens: list[int] = []
    emitted: set[int] = set()
    total = 0.0
    while len(tokens) < max_len:
        logp, states = session.step([state], [tokens[-1] if tokens else session.bos_id])
        row = np.asarray(logp[0], dtype=np.float64).copy()
        if constrained:
            for ph in emitted:
                row[ph] = NEG_INF
        if not np.isfinite(row).any():
            break
        best = max(range(len(row)), key=lambda j: (row[j], -j))
        total += row[best]
        tokens.append(best)
        state = states[0]
        if best in session.placeholder_ids:
            emitted.add(best)
        if best == session.eos_id:
            break
    return tuple(tokens), total


def topk_probs(logits, k: int) -> np.ndarray:
    """Renormalized softmax over the k largest logits (others get zero)."""
    logits = np.asarray(logits, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(logits))
    # stable order so ties at the k-th logit resolve to lower ids
    keep = np.argsort(-logits, kind="stable")[:k]
    out = np.zeros_like(logits)
    z = logits[keep] - logits[keep].max()
    p = np.exp(z)
    out[keep] = p / p.sum()
    return out


def topk_sample(model, prefix, k: int = 5, seed: int = 0, max_len: int = 128) -> list[int]:
    """Sample continuation ids after ``prefix`` until EOS or ``max_len`` new tokens."""
    rng = np.random.default_rng(seed)
    ids = list(prefix)
    out: list[int] = []
    while len(out) < max_len:
        probs = topk_probs(model.next_logits(ids), k)
        if k == 1:
            tok = int(np.argmax(probs))
        else:
            tok = int(rng.choice(len(probs), p=probs))
        if tok == model.eos_id:
            break
        out.append(tok)
        ids.append(tok)
    return out


def topk_sample_decode(model, prefix, k: int = 5, seed: int = 0, max_len: int = 128) -> Template:
    return model.to_template(topk_sample(model, prefix, k, seed, max_len))
