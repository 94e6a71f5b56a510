"""Flat encoding of a schema instance into a sequence of timestep vectors.

Each MR triple becomes one timestep holding, in order::

    [act | slot | value | service | intent | service desc | intent desc | slot desc | nl-mr flag]

where the first five blocks are trainable symbolic embeddings and the
description blocks are frozen sentence embeddings. The natural-language MR
is appended after the MR timesteps (one pooled vector by default, or one
timestep per token). Disabled features are zeroed, which is how the
MR-only ablation is expressed.
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .schema import NULL, SchemaInstance, is_placeholder, normalize_placeholder
from .text import tokenize

logger = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"

FEATURE_NAMES = ("mr", "service", "intent", "service_desc", "intent_desc", "slot_desc", "nl_mr")
FEATURE_PRESETS = {
    "mr_only": ("mr",),
    "full_schema": FEATURE_NAMES,
}


def resolve_features(features) -> tuple[str, ...]:
    if isinstance(features, str):
        if features in FEATURE_PRESETS:
            return FEATURE_PRESETS[features]
        features = [f.strip() for f in features.split(",") if f.strip()]
    unknown = set(features) - set(FEATURE_NAMES)
    if unknown:
        raise ValueError(f"unknown features {sorted(unknown)}; choose from {FEATURE_NAMES}")
    if "mr" not in features:
        raise ValueError("the 'mr' feature cannot be disabled")
    return tuple(f for f in FEATURE_NAMES if f in features)


class SymbolicVocab:
    """Dense 0-based ids for symbolic tokens; id 0 is padding, id 1 is UNK."""

    def __init__(self, tokens=()):
        self.itos = [PAD, UNK]
        self.stoi = {PAD: 0, UNK: 1}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token: str) -> int:
        if not token:
            return self.stoi[UNK]
        return self.stoi.get(token, self.stoi[UNK])

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos) -> "SymbolicVocab":
        if list(itos[:2]) != [PAD, UNK]:
            raise ValueError("vocab must start with PAD, UNK")
        return cls(itos[2:])


def symbolic_tokens(schema: SchemaInstance):
    for t in schema.mr:
        yield t.act
        yield t.slot
        yield normalize_placeholder(t.value)
    yield schema.service
    if schema.intent:
        yield schema.intent


def build_vocab(records) -> SymbolicVocab:
    """Vocab over acts, slots, values, services and intents seen in training.

    Ordered by descending frequency, ties broken lexicographically.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts: Counter = Counter()
    for r in records:
        schema = r.schema if hasattr(r, "schema") else r
        counts.update(t for t in symbolic_tokens(schema) if t)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return SymbolicVocab(ordered)


# --------------------------------------------------------------------------
# sentence encoders

class EncoderUnavailable(RuntimeError):
    pass


class HashingSentenceEncoder:
    """Deterministic stand-in for a pretrained sentence encoder.

    Every token gets a fixed pseudo-random Gaussian vector derived from a
    hash of the token; sentences pool the token vectors.
    """

    def __init__(self, width: int = 64, pooling: str = "mean", seed: int = 0):
        self.width = width
        self.pooling = pooling
        self.seed = seed
        self._tok_cache: dict[str, np.ndarray] = {}

    @property
    def name(self) -> str:
        return f"hashing:{self.width}:{self.seed}"

    def _token_vec(self, tok: str) -> np.ndarray:
        v = self._tok_cache.get(tok)
        if v is None:
            h = hashlib.blake2b(f"{self.seed}|{tok}".encode(), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(h, "little"))
            v = (rng.standard_normal(self.width) / np.sqrt(self.width)).astype(np.float32)
            self._tok_cache[tok] = v
        return v

    def encode_tokens(self, text: str) -> np.ndarray:
        toks = tokenize(text)
        if not toks:
            return np.zeros((0, self.width), dtype=np.float32)
        return np.stack([self._token_vec(t) for t in toks])

    def encode(self, text: str) -> np.ndarray:
        mat = self.encode_tokens(text)
        if len(mat) == 0:
            return np.zeros(self.width, dtype=np.float32)
        return mat[0].copy() if self.pooling == "first" else mat.mean(axis=0)


class TransformerSentenceEncoder:
    """Frozen HuggingFace encoder (e.g. ``bert-base-uncased``), pooled over the last layer."""

    def __init__(self, model_name: str = "bert-base-uncased", pooling: str = "mean",
                 local_files_only: bool = False):
        self.model_name = model_name
        self.pooling = pooling
        try:
            from transformers import AutoModel, AutoTokenizer
            self.tokenizer = AutoTokenizer.from_pretrained(model_name, local_files_only=local_files_only)
            self.model = AutoModel.from_pretrained(model_name, local_files_only=local_files_only)
        except Exception as e:  # network, missing weights, missing package
            raise EncoderUnavailable(f"cannot load sentence encoder {model_name!r}: {e}") from e
        self.model.eval()
        self.width = int(self.model.config.hidden_size)

    @property
    def name(self) -> str:
        return f"hf:{self.model_name}"

    @torch.no_grad()
    def encode_tokens(self, text: str) -> np.ndarray:
        enc = self.tokenizer(text, return_tensors="pt", truncation=True, max_length=128)
        out = self.model(**enc).last_hidden_state[0]
        return out.numpy().astype(np.float32)

    def encode(self, text: str) -> np.ndarray:
        mat = self.encode_tokens(text)
        if self.pooling == "first":
            return mat[0].copy()
        # mean over real tokens, [CLS]/[SEP] included as the model emits them
        return mat.mean(axis=0)


CACHE_MAGIC = b"SGNLGEMB"
CACHE_VERSION = 1


def _text_key(text: str, kind: str) -> bytes:
    return hashlib.sha1(f"{kind}\x00{text}".encode("utf-8")).digest()


class CachedSentenceEncoder:
    """Memoizes an encoder and persists vectors keyed by text hash.

    With ``backend=None`` only cached texts can be encoded; anything else
    raises :class:`EncoderUnavailable`.
    """

    def __init__(self, backend=None, path: str | None = None, width: int | None = None,
                 name: str | None = None):
        self.backend = backend
        self.path = path
        self.name = name or (backend.name if backend is not None else "cache-only")
        self.width = width if width is not None else (backend.width if backend else None)
        self._store: dict[bytes, np.ndarray] = {}
        self._dirty = False
        if path and os.path.exists(path):
            self.load(path)

    def _get(self, text: str, kind: str) -> np.ndarray:
        key = _text_key(text, kind)
        hit = self._store.get(key)
        if hit is not None:
            return hit
        if self.backend is None:
            raise EncoderUnavailable(f"no encoder backend and {text[:40]!r} is not cached")
        if kind == "tokens":
            vec = np.asarray(self.backend.encode_tokens(text), dtype=np.float32).reshape(-1, self.width)
        else:
            vec = np.asarray(self.backend.encode(text), dtype=np.float32).reshape(1, self.width)
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"non-finite sentence embedding for {text[:40]!r}")
        vec.setflags(write=False)
        self._store[key] = vec
        self._dirty = True
        return vec

    def encode(self, text: str) -> np.ndarray:
        return self._get(text, "pooled")[0]

    def encode_tokens(self, text: str) -> np.ndarray:
        return self._get(text, "tokens")

    def __len__(self):
        return len(self._store)

    def save(self, path: str | None = None) -> None:
        path = path or self.path
        if path is None:
            return
        name = self.name.encode("utf-8")
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(CACHE_MAGIC)
            f.write(struct.pack("<IIII", CACHE_VERSION, self.width, len(self._store), len(name)))
            f.write(name)
            for key in sorted(self._store):
                arr = self._store[key]
                f.write(key)
                f.write(struct.pack("<I", arr.shape[0]))
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        os.replace(tmp, path)
        self._dirty = False

    def load(self, path: str) -> None:
        with open(path, "rb") as f:
            if f.read(8) != CACHE_MAGIC:
                raise ValueError(f"{path}: not an embedding cache")
            version, width, count, nlen = struct.unpack("<IIII", f.read(16))
            if version != CACHE_VERSION:
                raise ValueError(f"{path}: unsupported cache version {version}")
            name = f.read(nlen).decode("utf-8")
            if self.backend is not None and name != self.name:
                raise ValueError(f"{path}: cache built with {name!r}, encoder is {self.name!r}")
            if self.width is not None and width != self.width:
                raise ValueError(f"{path}: cache width {width} != encoder width {self.width}")
            self.width, self.name = width, name
            for _ in range(count):
                key = f.read(20)
                (rows,) = struct.unpack("<I", f.read(4))
                arr = np.frombuffer(f.read(4 * rows * width), dtype="<f4").reshape(rows, width)
                self._store[key] = arr


def make_sentence_encoder(spec: str = "hashing", pooling: str = "mean",
                          cache_path: str | None = None) -> CachedSentenceEncoder:
    """``hashing[:width]`` or ``hf:<model name>``.

    If a HuggingFace model cannot be loaded, fall back to the on-disk cache
    (which then must already hold every text that will be encoded).
    """
    if spec.startswith("hf:"):
        try:
            backend = TransformerSentenceEncoder(spec[3:], pooling=pooling)
        except EncoderUnavailable:
            if cache_path and os.path.exists(cache_path):
                logger.warning("sentence encoder %s unavailable, using cache %s only", spec, cache_path)
                return CachedSentenceEncoder(None, cache_path)
            raise
    elif spec.startswith("hashing"):
        parts = spec.split(":")
        width = int(parts[1]) if len(parts) > 1 else 64
        backend = HashingSentenceEncoder(width, pooling=pooling)
    else:
        raise ValueError(f"unknown sentence encoder {spec!r}")
    return CachedSentenceEncoder(backend, cache_path)


# --------------------------------------------------------------------------
# flat encoding

N_SYMBOLIC = 5  # act, slot, value, service, intent


@dataclass
class FeatureConfig:
    symbolic_dim: int = 64
    model_dim: int = 128
    pooling: str = "mean"
    nl_mr_mode: str = "pooled"  # or "tokens"
    features: tuple[str, ...] = FEATURE_NAMES

    def __post_init__(self):
        self.features = resolve_features(self.features)
        if self.nl_mr_mode not in ("pooled", "tokens"):
            raise ValueError(f"nl_mr_mode must be 'pooled' or 'tokens', not {self.nl_mr_mode!r}")


@dataclass
class SchemaFeatures:
    """Id/vector view of one schema instance, before trainable embeddings."""
    sym_ids: np.ndarray          # [T, 5] int64
    dense: np.ndarray            # [T, 3 * sent_dim + 1] float32
    copy_tokens: list            # length T; placeholder token or None
    n_mr: int

    @property
    def length(self) -> int:
        return len(self.sym_ids)


def featurize(schema: SchemaInstance, vocab: SymbolicVocab, sentences, config: FeatureConfig) -> SchemaFeatures:
    feats = set(config.features)
    S = sentences.width
    zeros = np.zeros(S, dtype=np.float32)
    svc_desc = sentences.encode(schema.service_description) if "service_desc" in feats else zeros
    int_desc = sentences.encode(schema.intent_description) if "intent_desc" in feats else zeros
    svc_id = vocab.id(schema.service) if "service" in feats else 0
    int_id = vocab.id(schema.intent) if ("intent" in feats and schema.intent) else 0

    sym_rows, dense_rows, copy_tokens = [], [], []
    for t in schema.mr:
        value = normalize_placeholder(t.value)
        sym_rows.append([vocab.id(t.act), vocab.id(t.slot), vocab.id(value), svc_id, int_id])
        if "slot_desc" in feats and t.slot != NULL:
            sd = sentences.encode(schema.slot_description(t.slot))
        else:
            sd = zeros
        dense_rows.append(np.concatenate([svc_desc, int_desc, sd, [0.0]]))
        copy_tokens.append(value if is_placeholder(value) else None)
    n_mr = len(sym_rows)

    if "nl_mr" in feats and schema.nl_mr:
        if config.nl_mr_mode == "tokens":
            block = sentences.encode_tokens(schema.nl_mr)
        else:
            block = sentences.encode(schema.nl_mr)[None, :]
        for vec in block:
            sym_rows.append([0] * N_SYMBOLIC)
            dense_rows.append(np.concatenate([zeros, zeros, vec, [1.0]]))
            copy_tokens.append(None)

    return SchemaFeatures(
        sym_ids=np.asarray(sym_rows, dtype=np.int64).reshape(-1, N_SYMBOLIC),
        dense=np.asarray(dense_rows, dtype=np.float32).reshape(-1, 3 * S + 1),
        copy_tokens=copy_tokens,
        n_mr=n_mr,
    )


@dataclass
class EncodedSchema:
    vectors: torch.Tensor     # [T, model_dim]
    raw: torch.Tensor         # [T, raw width], pre-projection concatenation
    copy_tokens: list = field(default_factory=list)
    n_mr: int = 0


class FlatEncoder(nn.Module):
    """Symbolic embeddings + frozen sentence vectors -> projected timesteps."""

    def __init__(self, vocab_size: int, sentence_dim: int, config: FeatureConfig):
        super().__init__()
        self.config = config
        self.sentence_dim = sentence_dim
        self.embed = nn.Embedding(vocab_size, config.symbolic_dim, padding_idx=0)
        self.raw_dim = N_SYMBOLIC * config.symbolic_dim + 3 * sentence_dim + 1
        self.proj = nn.Linear(self.raw_dim, config.model_dim)

    def raw(self, sym_ids: torch.Tensor, dense: torch.Tensor) -> torch.Tensor:
        emb = self.embed(sym_ids)  # [..., T, 5, E]
        emb = emb.reshape(*sym_ids.shape[:-1], N_SYMBOLIC * self.config.symbolic_dim)
        return torch.cat([emb, dense], dim=-1)

    def forward(self, sym_ids: torch.Tensor, dense: torch.Tensor) -> torch.Tensor:
        return self.proj(self.raw(sym_ids, dense))

    def encode(self, feats: SchemaFeatures) -> EncodedSchema:
        sym = torch.from_numpy(feats.sym_ids)
        dense = torch.from_numpy(feats.dense)
        raw = self.raw(sym, dense)
        return EncodedSchema(self.proj(raw), raw, list(feats.copy_tokens), feats.n_mr)


def flat_encode(schema: SchemaInstance, vocab: SymbolicVocab, sentences, encoder: FlatEncoder) -> EncodedSchema:
    return encoder.encode(featurize(schema, vocab, sentences, encoder.config))
