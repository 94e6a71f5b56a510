"""Small builders shared by unit and acceptance tests."""
import random

import numpy as np
import torch

from sgnlg import memorize_fixture
from sgnlg.config import RunConfig
from sgnlg.models.layers import copy_gate, copy_nll, mixture_distribution
from sgnlg.models.recurrent import collate
from sgnlg.schema import Template, load_records
from sgnlg.training import RecurrentGenerator


def memorize_records():
    return load_records(memorize_fixture())


def tiny_config(family="seq2seq", **kw):
    base = dict(family=family, hidden_dim=12, token_dim=8, latent_dim=4, symbolic_dim=6, model_dim=10,
                sentence_encoder="hashing:8", seed=0)
    base.update(kw)
    return RunConfig(**base)


def tiny_generator(family="seq2seq", records=None, **kw):
    records = records if records is not None else memorize_records()
    return RecurrentGenerator.build(records, tiny_config(family, **kw)), records


def double_batch(gen, records, n=3):
    batch = collate(gen.examples(records)[:n], gen.token_vocab)
    batch.dense = batch.dense.double()
    return batch


def central_difference_errors(loss_fn, params, n_coords=20, eps=1e-6, seed=0, min_grad=1e-5):
    """Relative errors between autograd and central differences at sampled coordinates.

    Coordinates whose analytic gradient is below ``min_grad`` are skipped so the
    ratio is not dominated by round-off.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    candidates = []
    for pi, p in enumerate(params):
        g = p.grad.reshape(-1)
        for j in torch.nonzero(g.abs() > min_grad).reshape(-1).tolist():
            candidates.append((pi, j))
    rng = random.Random(seed)
    chosen = rng.sample(candidates, min(n_coords, len(candidates)))
    errors = []
    with torch.no_grad():
        for pi, j in chosen:
            p = params[pi]
            flat = p.view(-1)
            analytic = p.grad.reshape(-1)[j].item()
            orig = flat[j].item()
            flat[j] = orig + eps
            up = loss_fn().item()
            flat[j] = orig - eps
            down = loss_fn().item()
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    return errors


def gate_instance(seed):
    """Random copy-gate inputs; the loss is a fixed linear readout of p_gen."""
    g = torch.Generator().manual_seed(seed)
    shapes = [(2, 5), (2, 4), (2, 3), (5,), (4,), (3,), ()]
    leaves = [torch.randn(s, generator=g, dtype=torch.float64, requires_grad=True) for s in shapes]
    readout = torch.randn(2, generator=g, dtype=torch.float64)

    def loss():
        return (copy_gate(*leaves) * readout).sum()
    return loss, leaves


def mixture_instance(seed):
    """Random logits/scores/gate feeding the copy mixture and its NLL."""
    g = torch.Generator().manual_seed(seed)
    B, V, T, ext = 2, 6, 5, 8
    logits = torch.randn(B, V, generator=g, dtype=torch.float64, requires_grad=True)
    scores = torch.randn(B, T, generator=g, dtype=torch.float64, requires_grad=True)
    gate = torch.randn(B, generator=g, dtype=torch.float64, requires_grad=True)
    src = torch.tensor([[6, 1, 7, 6, 0], [3, 7, 0, 2, 0]])
    mask = torch.tensor([[True, False, True, True, False], [True, True, False, False, False]])
    target = torch.tensor([6, 7])

    def loss():
        p = mixture_distribution(torch.softmax(logits, -1), torch.softmax(scores, -1), torch.sigmoid(gate),
                                 src, mask, ext)
        return copy_nll(p, target).sum()
    return loss, [logits, scores, gate]


def cvae_instance(seed):
    """Full CVAE objective of a small float64 model on three memorize-fixture pairs."""
    gen, records = tiny_generator("cvae", seed=seed)
    model = gen.model.double()
    batch = double_batch(gen, records)

    def loss():
        out = model.loss(batch, kl_scale=0.7, generator=torch.Generator().manual_seed(seed))
        return out["loss"]
    return loss, list(model.parameters())


def seq2seq_instance(seed):
    gen, records = tiny_generator("seq2seq", seed=seed)
    model = gen.model.double()
    batch = double_batch(gen, records)
    return (lambda: model.loss(batch)["loss"]), list(model.parameters())


GRADIENT_CASES = {"copy_gate": gate_instance, "mixture_loss": mixture_instance, "cvae_loss": cvae_instance}


def random_toy_logprobs(vocab_size, seed, depth_dependent=True):
    """Deterministic prefix -> log-prob table for brute-force decoding checks."""
    cache = {}

    def fn(prefix):
        key = tuple(prefix)
        if key not in cache:
            rng = np.random.default_rng([seed, len(key)] + list(key) if depth_dependent else seed)
            z = rng.normal(size=vocab_size) * 2
            cache[key] = z - np.log(np.exp(z).sum())
        return cache[key]
    return fn


class ToySession:
    """Decoding session over a prefix -> log-prob function; state is the prefix so far."""

    bos_id = -1

    def __init__(self, logprob_fn, vocab, eos_id=0, placeholders=()):
        self.fn = logprob_fn
        self.vocab = vocab
        self.eos_id = eos_id
        self.placeholder_ids = set(placeholders)

    def start(self):
        return ()

    def step(self, states, prev_tokens):
        rows, new = [], []
        for st, prev in zip(states, prev_tokens):
            prefix = st if prev == self.bos_id else st + (prev,)
            rows.append(self.fn(prefix))
            new.append(prefix)
        return np.array(rows), new

    def to_template(self, tokens):
        return Template(" ".join(self.vocab[t] for t in tokens if t != self.eos_id))


def table_model(table, default):
    def fn(prefix):
        return np.log(np.asarray(table.get(tuple(prefix), default), dtype=np.float64))
    return fn


# 0 = EOS, 1 = "a", 2 = "$p"; greedy commits to "a" but "$p EOS" scores higher
HAND_TABLE = {
    (): [0.1, 0.5, 0.4],
    (1,): [0.3, 0.35, 0.35],
    (2,): [0.9, 0.05, 0.05],
    (1, 1): [0.4, 0.3, 0.3],
    (1, 2): [0.2, 0.6, 0.2],
    (2, 1): [0.5, 0.25, 0.25],
}
HAND_DEFAULT = [0.6, 0.2, 0.2]
