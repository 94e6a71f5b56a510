"""Causal-LM fine-tuning path.

The schema is flattened into natural language and each training instance
becomes ``[BOS] schema-tokens [SEP] target-tokens [EOS]``. The backbone is
reached only through a narrow interface (tokenize / detokenize / logits for
a prefix / one parameter update), so a tiny randomly initialised model can
stand in for a pretrained one.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from ..nlmr import humanize_slot
from ..schema import NULL, SchemaInstance, Template
from ..text import tokenize

BOS, SEP, EOS, PAD, UNK = "[BOS]", "[SEP]", "[EOS]", "[PAD]", "[UNK]"
LM_SPECIALS = (PAD, UNK, BOS, SEP, EOS)


class BackboneUnavailable(RuntimeError):
    pass


class SerializationError(ValueError):
    pass


def serialize_for_lm(schema: SchemaInstance, features=("mr", "service", "intent", "service_desc",
                                                       "intent_desc", "slot_desc", "nl_mr")) -> str:
    """Flatten a schema into one lowercase natural-language string.

    Fixed labelled order: service, intent, slot descriptions, meaning. With
    only the ``mr`` feature enabled the string is just the NL-MR.
    """
    feats = set(features)
    parts = []
    if "service_desc" in feats and schema.service_description:
        parts.append(f"service : {schema.service_description.rstrip('.')} .")
    if "intent_desc" in feats and schema.intent_description:
        parts.append(f"intent : {schema.intent_description.rstrip('.')} .")
    if "slot_desc" in feats:
        seen = set()
        for t in schema.mr:
            if t.slot == NULL or t.slot in seen:
                continue
            seen.add(t.slot)
            desc = schema.slot_description(t.slot)
            if desc:
                parts.append(f"{humanize_slot(t.slot)} : {desc.rstrip('.')} .")
    nl_mr = schema.nl_mr
    if not nl_mr:
        from ..nlmr import render_nl_mr
        nl_mr = render_nl_mr(schema.mr)
    parts.append(nl_mr if len(parts) == 0 else f"meaning : {nl_mr}")
    return " ".join(parts).lower()


@dataclass(frozen=True)
class LMSerialization:
    tokens: tuple

    def validate(self) -> None:
        toks = self.tokens
        if not toks or toks[0] != BOS:
            raise SerializationError("instance must start with [BOS]")
        if toks.count(SEP) != 1:
            raise SerializationError(f"instance must contain exactly one [SEP], found {toks.count(SEP)}")
        if toks[-1] != EOS or toks.count(EOS) != 1:
            raise SerializationError("instance must end with a single [EOS]")

    @property
    def sep_index(self) -> int:
        return self.tokens.index(SEP)

    @classmethod
    def build(cls, schema_text: str, target_text: str) -> "LMSerialization":
        inst = cls((BOS, *tokenize(schema_text), SEP, *tokenize(target_text), EOS))
        inst.validate()
        return inst


class WordTokenizer:
    def __init__(self, tokens=()):
        self.itos = list(LM_SPECIALS)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t not in self.stoi:
                self.stoi[t] = len(self.itos)
                self.itos.append(t)

    def __len__(self):
        return len(self.itos)

    def encode_tokens(self, toks) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in toks]

    def tokenize(self, text: str) -> list[int]:
        return self.encode_tokens(tokenize(text))

    def detokenize(self, ids) -> str:
        return " ".join(self.itos[i] for i in ids if self.itos[i] not in LM_SPECIALS)

    @classmethod
    def build(cls, texts) -> "WordTokenizer":
        counts: Counter = Counter()
        for t in texts:
            counts.update(tokenize(t))
        return cls(sorted(counts, key=lambda t: (-counts[t], t)))


@dataclass
class TinyLMConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_positions: int = 512
    lr: float = 3e-3


class _TinyTransformer(nn.Module):
    def __init__(self, vocab_size: int, cfg: TinyLMConfig):
        super().__init__()
        self.tok = nn.Embedding(vocab_size, cfg.d_model)
        self.pos = nn.Embedding(cfg.max_positions, cfg.d_model)
        layer = nn.TransformerEncoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ff, dropout=0.0,
                                           batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, cfg.n_layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, vocab_size, bias=False)
        self.head.weight = self.tok.weight
        nn.init.normal_(self.tok.weight, std=0.02)

    def forward(self, ids, pad_mask=None):
        L = ids.shape[1]
        pos = torch.arange(L)
        x = self.tok(ids) + self.pos(pos)[None]
        causal = torch.triu(torch.ones(L, L, dtype=torch.bool), diagonal=1)
        x = self.blocks(x, mask=causal, src_key_padding_mask=pad_mask)
        return self.head(self.norm(x))


class TinyCausalLM:
    """Small randomly initialised transformer LM with a word-level tokenizer.

    Used as the backbone in tests and offline runs; it has no pretraining.
    """

    def __init__(self, tokenizer: WordTokenizer, cfg: TinyLMConfig | None = None, seed: int = 0):
        self.cfg = cfg or TinyLMConfig()
        self.tokenizer = tokenizer
        torch.manual_seed(seed)
        self.net = _TinyTransformer(len(tokenizer), self.cfg)
        self.opt = torch.optim.Adam(self.net.parameters(), lr=self.cfg.lr)
        self.special = {t: tokenizer.stoi[t] for t in LM_SPECIALS}

    name = "tiny"

    def tokenize(self, text: str) -> list[int]:
        return self.tokenizer.tokenize(text)

    def encode_tokens(self, toks) -> list[int]:
        return self.tokenizer.encode_tokens(toks)

    def detokenize(self, ids) -> str:
        return self.tokenizer.detokenize(ids)

    def token_id(self, tok: str) -> int:
        return self.special[tok]

    @torch.no_grad()
    def logits(self, prefix) -> np.ndarray:
        self.net.eval()
        ids = torch.tensor([list(prefix)[-self.cfg.max_positions:]])
        return self.net(ids)[0, -1].double().numpy()

    def update(self, sequences, loss_masks) -> float:
        """One optimizer step on next-token loss restricted to ``loss_masks``."""
        self.net.train()
        L = max(len(s) for s in sequences)
        pad = self.special[PAD]
        ids = torch.full((len(sequences), L), pad, dtype=torch.long)
        lm = torch.zeros((len(sequences), L), dtype=torch.bool)
        for i, (s, m) in enumerate(zip(sequences, loss_masks)):
            ids[i, :len(s)] = torch.tensor(s)
            lm[i, :len(m)] = torch.tensor(m, dtype=torch.bool)
        logits = self.net(ids, pad_mask=ids == pad)
        # position t predicts token t+1
        loss = nn.functional.cross_entropy(logits[:, :-1][lm[:, 1:]], ids[:, 1:][lm[:, 1:]])
        self.opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(self.net.parameters(), 1.0)
        self.opt.step()
        return loss.item()

    def state(self) -> dict:
        return {"kind": "tiny", "cfg": asdict(self.cfg), "itos": self.tokenizer.itos,
                "weights": self.net.state_dict()}

    @classmethod
    def from_state(cls, st: dict) -> "TinyCausalLM":
        tok = WordTokenizer(st["itos"][len(LM_SPECIALS):])
        m = cls(tok, TinyLMConfig(**st["cfg"]))
        m.net.load_state_dict(st["weights"])
        return m


class HFCausalLM:
    """Adapter for a HuggingFace causal LM (e.g. ``gpt2``) behind the same interface."""

    def __init__(self, model_name: str = "gpt2", lr: float = 5e-5, local_files_only: bool = False):
        try:
            from transformers import AutoModelForCausalLM, AutoTokenizer
            self.hf_tok = AutoTokenizer.from_pretrained(model_name, local_files_only=local_files_only)
            self.model = AutoModelForCausalLM.from_pretrained(model_name, local_files_only=local_files_only)
        except Exception as e:
            raise BackboneUnavailable(f"cannot load causal LM {model_name!r}: {e}") from e
        self.name = f"hf:{model_name}"
        self.hf_tok.add_special_tokens({"bos_token": BOS, "eos_token": EOS, "pad_token": PAD,
                                        "sep_token": SEP})
        self.model.resize_token_embeddings(len(self.hf_tok))
        self.opt = torch.optim.AdamW(self.model.parameters(), lr=lr)
        self.special = {t: self.hf_tok.convert_tokens_to_ids(t) for t in (BOS, SEP, EOS, PAD)}

    def tokenize(self, text: str) -> list[int]:
        return self.hf_tok.encode(text, add_special_tokens=False)

    def encode_tokens(self, toks) -> list[int]:
        out = []
        for t in toks:
            out.extend([self.special[t]] if t in self.special else self.tokenize(" " + t))
        return out

    def detokenize(self, ids) -> str:
        return self.hf_tok.decode(ids, skip_special_tokens=True).strip()

    def token_id(self, tok: str) -> int:
        return self.special[tok]

    @torch.no_grad()
    def logits(self, prefix) -> np.ndarray:
        self.model.eval()
        out = self.model(torch.tensor([list(prefix)]))
        return out.logits[0, -1].double().numpy()

    def update(self, sequences, loss_masks) -> float:
        self.model.train()
        L = max(len(s) for s in sequences)
        pad = self.special[PAD]
        ids = torch.full((len(sequences), L), pad, dtype=torch.long)
        labels = torch.full((len(sequences), L), -100, dtype=torch.long)
        attn = torch.zeros((len(sequences), L), dtype=torch.long)
        for i, (s, m) in enumerate(zip(sequences, loss_masks)):
            ids[i, :len(s)] = torch.tensor(s)
            attn[i, :len(s)] = 1
            lab = torch.tensor(s)
            lab[~torch.tensor(m, dtype=torch.bool)] = -100
            labels[i, :len(s)] = lab
        loss = self.model(input_ids=ids, attention_mask=attn, labels=labels).loss
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        return loss.item()


@dataclass
class LMGenConfig:
    top_k: int = 5
    max_len: int = 128
    target_only_loss: bool = True


class LMGenerator:
    """Fine-tunes a backbone on serialized records and samples templates."""

    family = "lm"

    def __init__(self, backbone, features=("mr", "service", "intent", "service_desc", "intent_desc",
                                            "slot_desc", "nl_mr"), cfg: LMGenConfig | None = None):
        self.backbone = backbone
        self.features = tuple(features)
        self.cfg = cfg or LMGenConfig()

    def encode_instance(self, schema: SchemaInstance, target: str):
        ser = LMSerialization.build(serialize_for_lm(schema, self.features), target)
        return self._ids_and_mask(ser)

    def _ids_and_mask(self, ser: LMSerialization):
        ser.validate()
        sep = ser.sep_index
        head = self.backbone.encode_tokens(ser.tokens[:sep + 1])
        tail = self.backbone.encode_tokens(ser.tokens[sep + 1:])
        ids = head + tail
        if self.cfg.target_only_loss:
            mask = [False] * len(head) + [True] * len(tail)
        else:
            mask = [False] + [True] * (len(ids) - 1)
        return ids, mask

    def finetune_serialized(self, instances, epochs: int = 1, batch_size: int = 16, seed: int = 0,
                            log=None):
        encoded = [self._ids_and_mask(s) for s in instances]
        rng = np.random.default_rng(seed)
        losses = []
        for ep in range(epochs):
            order = rng.permutation(len(encoded))
            for b in range(0, len(order), batch_size):
                chunk = [encoded[i] for i in order[b:b + batch_size]]
                losses.append(self.backbone.update([c[0] for c in chunk], [c[1] for c in chunk]))
            if log:
                log(ep, losses[-1])
        return losses

    def prefix(self, schema: SchemaInstance) -> list[int]:
        text = serialize_for_lm(schema, self.features)
        return self.backbone.encode_tokens((BOS, *tokenize(text), SEP))

    # sampling-model protocol for decoding.topk_sample
    @property
    def eos_id(self) -> int:
        return self.backbone.token_id(EOS)

    def next_logits(self, ids) -> np.ndarray:
        return self.backbone.logits(ids)

    def to_template(self, ids) -> Template:
        return Template(self.backbone.detokenize(ids))

    def generate(self, schema: SchemaInstance, seed: int = 0, top_k: int | None = None) -> Template:
        from ..decoding import topk_sample_decode
        k = self.cfg.top_k if top_k is None else top_k
        return topk_sample_decode(self, self.prefix(schema), k=k, seed=seed, max_len=self.cfg.max_len)


def perplexity(losses) -> float:
    return math.exp(sum(losses) / max(1, len(losses)))
