"""Attention + copy Seq2Seq and CVAE generators over flat-encoded schemata."""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from ..features import FlatEncoder, SchemaFeatures
from ..schema import Template, is_placeholder, normalize_placeholder
from ..text import tokenize
from .layers import (
    BilinearAlign,
    CopyGate,
    CVAEAlign,
    attend,
    copy_nll,
    gaussian_kl,
    mixture_distribution,
)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)


class TokenVocab:
    """Output-side vocabulary. Placeholders are kept for decoder input
    embeddings but can never be generated, only copied."""

    def __init__(self, tokens=()):
        self.itos = list(SPECIALS)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t not in self.stoi:
                self.stoi[t] = len(self.itos)
                self.itos.append(t)
        self.pad_id, self.unk_id, self.bos_id, self.eos_id = 0, 1, 2, 3

    def __len__(self):
        return len(self.itos)

    def id(self, tok: str) -> int:
        return self.stoi.get(tok, self.unk_id)

    def placeholder_ids(self) -> list[int]:
        return [i for i, t in enumerate(self.itos) if is_placeholder(t)]

    @classmethod
    def build(cls, records, min_count: int = 1) -> "TokenVocab":
        counts: Counter = Counter()
        for r in records:
            for ref in r.references:
                counts.update(target_tokens(ref.text))
            for t in r.schema.mr:
                if is_placeholder(t.value):
                    counts[normalize_placeholder(t.value)] += 1
        toks = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
        return cls(toks)


def target_tokens(text: str) -> list[str]:
    return [normalize_placeholder(t) for t in tokenize(text)]


@dataclass
class RecurrentConfig:
    hidden_dim: int = 128
    token_dim: int = 64
    latent_dim: int = 32
    align: str = "general"
    cvae_attention: str = "tanh"


@dataclass
class Example:
    feats: SchemaFeatures
    oov: list
    src_ext: np.ndarray
    copy_mask: np.ndarray
    target: np.ndarray | None = None


def make_example(feats: SchemaFeatures, vocab: TokenVocab, text: str | None = None) -> Example:
    V = len(vocab)
    oov: list[str] = []
    src_ext, mask = [], []
    for tok in feats.copy_tokens:
        if tok is None:
            src_ext.append(0)
            mask.append(False)
            continue
        if tok in vocab.stoi:
            src_ext.append(vocab.stoi[tok])
        else:
            if tok not in oov:
                oov.append(tok)
            src_ext.append(V + oov.index(tok))
        mask.append(True)
    target = None
    if text is not None:
        copyable = {t: e for t, e in zip(feats.copy_tokens, src_ext) if t is not None}
        ids = []
        for tok in target_tokens(text):
            if is_placeholder(tok):
                # placeholders are only reachable by copying from the input
                ids.append(copyable.get(tok, vocab.unk_id))
            else:
                ids.append(vocab.id(tok))
        ids.append(vocab.eos_id)
        target = np.asarray(ids, dtype=np.int64)
    return Example(feats, oov, np.asarray(src_ext, dtype=np.int64), np.asarray(mask, dtype=bool), target)


@dataclass
class Batch:
    sym: torch.Tensor
    dense: torch.Tensor
    src_mask: torch.Tensor
    lengths: torch.Tensor
    src_ext: torch.Tensor
    copy_mask: torch.Tensor
    ext_size: int
    tgt_in: torch.Tensor | None = None
    tgt_out: torch.Tensor | None = None
    tgt_mask: torch.Tensor | None = None


def collate(examples: list[Example], vocab: TokenVocab) -> Batch:
    B = len(examples)
    T = max(e.feats.length for e in examples)
    D = examples[0].feats.dense.shape[1]
    sym = np.zeros((B, T, examples[0].feats.sym_ids.shape[1]), dtype=np.int64)
    dense = np.zeros((B, T, D), dtype=np.float32)
    src_mask = np.zeros((B, T), dtype=bool)
    src_ext = np.zeros((B, T), dtype=np.int64)
    copy_mask = np.zeros((B, T), dtype=bool)
    for i, e in enumerate(examples):
        n = e.feats.length
        sym[i, :n] = e.feats.sym_ids
        dense[i, :n] = e.feats.dense
        src_mask[i, :n] = True
        src_ext[i, :n] = e.src_ext
        copy_mask[i, :n] = e.copy_mask
    V = len(vocab)
    batch = Batch(torch.from_numpy(sym), torch.from_numpy(dense), torch.from_numpy(src_mask),
                  torch.tensor([e.feats.length for e in examples]), torch.from_numpy(src_ext),
                  torch.from_numpy(copy_mask), V + max(len(e.oov) for e in examples))
    if examples[0].target is not None:
        L = max(len(e.target) for e in examples)
        tgt_out = np.zeros((B, L), dtype=np.int64)
        tgt_in = np.zeros((B, L), dtype=np.int64)
        tgt_mask = np.zeros((B, L), dtype=bool)
        for i, e in enumerate(examples):
            n = len(e.target)
            tgt_out[i, :n] = e.target
            inp = np.concatenate([[vocab.bos_id], e.target[:-1]])
            tgt_in[i, :n] = np.where(inp >= V, vocab.unk_id, inp)
            tgt_mask[i, :n] = True
        batch.tgt_in = torch.from_numpy(tgt_in)
        batch.tgt_out = torch.from_numpy(tgt_out)
        batch.tgt_mask = torch.from_numpy(tgt_mask)
    return batch


class CopyDecoder(nn.Module):
    """GRU decoder with attention over encoder states and a pointer-generator output."""

    def __init__(self, vocab: TokenVocab, enc_dim: int, cfg: RecurrentConfig, align: nn.Module):
        super().__init__()
        V = len(vocab)
        self.V = V
        self.unk_id = vocab.unk_id
        self.embed = nn.Embedding(V, cfg.token_dim, padding_idx=0)
        self.cell = nn.GRUCell(cfg.token_dim + enc_dim, cfg.hidden_dim)
        self.align = align
        self.pre_out = nn.Linear(cfg.hidden_dim + enc_dim, cfg.hidden_dim)
        self.out = nn.Linear(cfg.hidden_dim, V)
        self.gate = CopyGate(enc_dim, cfg.hidden_dim, cfg.token_dim)
        gen_mask = torch.zeros(V, dtype=torch.bool)
        gen_mask[vocab.pad_id] = True
        gen_mask[vocab.bos_id] = True
        gen_mask[vocab.placeholder_ids()] = True
        self.register_buffer("gen_mask", gen_mask, persistent=False)

    def step(self, H, src_mask, src_ext, copy_mask, ext_size, prev_ids, s, ctx):
        prev_ids = torch.where(prev_ids >= self.V, torch.full_like(prev_ids, self.unk_id), prev_ids)
        x = self.embed(prev_ids)
        s = self.cell(torch.cat([x, ctx], -1), s)
        a = attend(H, s, self.align, src_mask)
        ctx = torch.einsum("bt,btd->bd", a, H)
        logits = self.out(torch.tanh(self.pre_out(torch.cat([s, ctx], -1))))
        p_vocab = torch.softmax(logits.masked_fill(self.gen_mask, float("-inf")), -1)
        p_gen = self.gate(ctx, s, x)
        p = mixture_distribution(p_vocab, a, p_gen, src_ext, copy_mask, ext_size)
        return p, s, ctx, a, p_gen


class _RecurrentBase(nn.Module):
    family = "base"

    def __init__(self, sym_vocab_size: int, sentence_dim: int, feature_config, vocab: TokenVocab,
                 cfg: RecurrentConfig):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.flat = FlatEncoder(sym_vocab_size, sentence_dim, feature_config)
        self.encoder = nn.GRU(feature_config.model_dim, cfg.hidden_dim, batch_first=True)
        self.decoder = CopyDecoder(vocab, cfg.hidden_dim, cfg, self._make_align())

    def _make_align(self):
        raise NotImplementedError

    def encode(self, batch: Batch):
        X = self.flat(batch.sym, batch.dense)
        packed = pack_padded_sequence(X, batch.lengths, batch_first=True, enforce_sorted=False)
        out, last = self.encoder(packed)
        H, _ = pad_packed_sequence(out, batch_first=True, total_length=X.shape[1])
        return H, last[0]

    def initial_state(self, H, last, batch: Batch, generator=None, z=None):
        raise NotImplementedError

    def reconstruction(self, batch: Batch, H, s):
        B, L = batch.tgt_out.shape
        ctx = H.new_zeros(B, H.shape[-1])
        nll = H.new_zeros(B, L)
        for t in range(L):
            p, s, ctx, _, _ = self.decoder.step(H, batch.src_mask, batch.src_ext, batch.copy_mask,
                                                batch.ext_size, batch.tgt_in[:, t], s, ctx)
            nll[:, t] = copy_nll(p, batch.tgt_out[:, t])
        mask = batch.tgt_mask.to(nll.dtype)
        return (nll * mask).sum() / mask.sum()


class Seq2SeqGenerator(_RecurrentBase):
    family = "seq2seq"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.init_proj = nn.Linear(self.cfg.hidden_dim, self.cfg.hidden_dim)

    def _make_align(self):
        return BilinearAlign(self.cfg.hidden_dim, self.cfg.hidden_dim, self.cfg.align)

    def initial_state(self, H, last, batch, generator=None, z=None):
        return torch.tanh(self.init_proj(last))

    def loss(self, batch: Batch, kl_scale: float = 1.0) -> dict:
        H, last = self.encode(batch)
        rec = self.reconstruction(batch, H, self.initial_state(H, last, batch))
        return {"loss": rec, "reconstruction": rec}


class CVAEGenerator(_RecurrentBase):
    """Condition c = final schema-encoder state; latent z from the target
    sentence at training time and from the learned conditional prior at
    prediction time. The decoder starts from [z; c]."""

    family = "cvae"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        h, zd = self.cfg.hidden_dim, self.cfg.latent_dim
        self.target_encoder = nn.GRU(self.cfg.token_dim, h, batch_first=True)
        self.recognition = nn.Linear(2 * h, 2 * zd)
        self.prior = nn.Sequential(nn.Linear(h, h), nn.Tanh(), nn.Linear(h, 2 * zd))
        self.init_proj = nn.Linear(zd + h, h)

    def _make_align(self):
        return CVAEAlign(self.cfg.hidden_dim, self.cfg.hidden_dim, self.cfg.cvae_attention)

    def prior_params(self, c):
        mu, logvar = self.prior(c).chunk(2, -1)
        return mu, logvar

    def posterior_params(self, batch: Batch, c):
        ids = batch.tgt_out.clone()
        ids[ids >= self.decoder.V] = self.vocab.unk_id
        emb = self.decoder.embed(ids)
        lengths = batch.tgt_mask.sum(1)
        packed = pack_padded_sequence(emb, lengths, batch_first=True, enforce_sorted=False)
        _, last = self.target_encoder(packed)
        mu, logvar = self.recognition(torch.cat([last[0], c], -1)).chunk(2, -1)
        return mu, logvar

    def initial_state(self, H, last, batch, generator=None, z=None):
        if z is None:
            mu, logvar = self.prior_params(last)
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
            z = mu + eps * torch.exp(0.5 * logvar)
        return torch.tanh(self.init_proj(torch.cat([z, last], -1)))

    def loss(self, batch: Batch, kl_scale: float = 1.0, generator=None) -> dict:
        H, c = self.encode(batch)
        mu_q, logvar_q = self.posterior_params(batch, c)
        mu_p, logvar_p = self.prior_params(c)
        eps = torch.randn(mu_q.shape, generator=generator, dtype=mu_q.dtype)
        z = mu_q + eps * torch.exp(0.5 * logvar_q)
        rec = self.reconstruction(batch, H, self.initial_state(H, c, batch, z=z))
        kl = gaussian_kl(mu_q, logvar_q, mu_p, logvar_p).mean()
        return {"loss": rec + kl_scale * kl, "reconstruction": rec, "kl": kl}


class RecurrentSession:
    """Decoding view of one input for :mod:`sgnlg.decoding`.

    States are ``(s, ctx)`` tensor pairs; ``step`` advances a list of them in
    one batched call and returns log-probabilities over the extended vocab.
    """

    def __init__(self, model: _RecurrentBase, example: Example, seed: int = 0):
        self.model = model
        self.example = example
        self.batch = collate([example], model.vocab)
        vocab = model.vocab
        self.bos_id, self.eos_id = vocab.bos_id, vocab.eos_id
        self.ext_tokens = vocab.itos + list(example.oov)
        self.ext_size = len(self.ext_tokens)
        self.placeholder_ids = {i for i, t in enumerate(self.ext_tokens) if is_placeholder(t)}
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            H, last = model.encode(self.batch)
            self.H = H
            self.s0 = model.initial_state(H, last, self.batch, generator=gen)[0]
        self.last_p_gen = None
        self.last_probs = None

    def start(self):
        return (self.s0, self.H.new_zeros(self.H.shape[-1]))

    @torch.no_grad()
    def step(self, states, prev_tokens):
        n = len(states)
        s = torch.stack([st[0] for st in states])
        ctx = torch.stack([st[1] for st in states])
        b = self.batch
        p, s, ctx, _, p_gen = self.model.decoder.step(
            self.H.expand(n, -1, -1), b.src_mask.expand(n, -1), b.src_ext.expand(n, -1),
            b.copy_mask.expand(n, -1), self.ext_size, torch.tensor(prev_tokens), s, ctx)
        self.last_p_gen = p_gen
        self.last_probs = p
        with np.errstate(divide="ignore"):
            logp = np.log(p.double().numpy())
        return logp, [(s[i], ctx[i]) for i in range(n)]

    def to_template(self, tokens) -> Template:
        return Template(" ".join(self.ext_tokens[t] for t in tokens if t != self.eos_id))


def model_config_dict(cfg: RecurrentConfig) -> dict:
    return asdict(cfg)
