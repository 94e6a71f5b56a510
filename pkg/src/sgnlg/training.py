"""Training loops, generation wrappers and checkpoints for all three families."""
from __future__ import annotations

import logging
import os

import numpy as np
import torch

from .config import RunConfig
from .decoding import constrained_beam_decode
from .features import FeatureConfig, build_vocab, featurize, make_sentence_encoder, SymbolicVocab
from .models.layers import kl_weight
from .models.lm import (BackboneUnavailable, HFCausalLM, LMGenConfig, LMGenerator, LMSerialization,
                        TinyCausalLM, TinyLMConfig, WordTokenizer, serialize_for_lm)
from .models.recurrent import (CVAEGenerator, RecurrentConfig, RecurrentSession, Seq2SeqGenerator,
                               TokenVocab, collate, make_example, target_tokens)
from .schema import SchemaInstance, SGNLGRecord, Template

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sgnlg-checkpoint"
CHECKPOINT_VERSION = 1
EMBED_SUFFIX = ".emb"


class CheckpointError(ValueError):
    code = "E_CHECKPOINT"


def training_pairs(records) -> list[tuple[SchemaInstance, str]]:
    return [(r.schema, ref.text) for r in records for ref in r.references]


def feature_config(cfg: RunConfig) -> FeatureConfig:
    return FeatureConfig(cfg.symbolic_dim, cfg.model_dim, cfg.pooling, cfg.nl_mr_mode, cfg.feature_list())


class RecurrentGenerator:
    """Seq2Seq or CVAE model plus the vocabularies and sentence encoder it needs."""

    def __init__(self, family: str, sym_vocab: SymbolicVocab, token_vocab: TokenVocab, sentences,
                 fcfg: FeatureConfig, rcfg: RecurrentConfig, sentence_spec: str, seed: int = 0):
        self.family = family
        self.sym_vocab = sym_vocab
        self.token_vocab = token_vocab
        self.sentences = sentences
        self.fcfg = fcfg
        self.rcfg = rcfg
        self.sentence_spec = sentence_spec
        torch.manual_seed(seed)
        cls = {"seq2seq": Seq2SeqGenerator, "cvae": CVAEGenerator}[family]
        self.model = cls(len(sym_vocab), sentences.width, fcfg, token_vocab, rcfg)

    @classmethod
    def build(cls, records, cfg: RunConfig, sentences=None) -> "RecurrentGenerator":
        if sentences is None:
            sentences = make_sentence_encoder(cfg.sentence_encoder, cfg.pooling)
        rcfg = RecurrentConfig(cfg.hidden_dim, cfg.token_dim, cfg.latent_dim, cfg.align, cfg.cvae_attention)
        return cls(cfg.family, build_vocab(records), TokenVocab.build(records), sentences,
                   feature_config(cfg), rcfg, cfg.sentence_encoder, cfg.seed)

    def featurize(self, schema: SchemaInstance):
        return featurize(schema, self.sym_vocab, self.sentences, self.fcfg)

    def examples(self, records):
        return [make_example(self.featurize(s), self.token_vocab, text) for s, text in training_pairs(records)]

    def fit(self, records, cfg: RunConfig, log=None) -> list[float]:
        examples = self.examples(records)
        if not examples:
            raise ValueError("no training pairs")
        gen = torch.Generator().manual_seed(cfg.seed)
        opt = torch.optim.Adam(self.model.parameters(), lr=cfg.lr)
        steps_per_epoch = (len(examples) + cfg.batch_size - 1) // cfg.batch_size
        total = steps_per_epoch * cfg.epochs
        losses, step = [], 0
        self.model.train()
        for epoch in range(cfg.epochs):
            order = torch.randperm(len(examples), generator=gen).tolist()
            for b in range(0, len(order), cfg.batch_size):
                batch = collate([examples[i] for i in order[b:b + cfg.batch_size]], self.token_vocab)
                if self.family == "cvae":
                    out = self.model.loss(batch, kl_scale=kl_weight(step, total, cfg.kl_warmup), generator=gen)
                else:
                    out = self.model.loss(batch)
                opt.zero_grad()
                out["loss"].backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
                opt.step()
                losses.append(out["loss"].item())
                step += 1
            if log:
                log(epoch, losses[-1])
        self.model.eval()
        return losses

    def session(self, schema: SchemaInstance, seed: int = 0) -> RecurrentSession:
        self.model.eval()
        return RecurrentSession(self.model, make_example(self.featurize(schema), self.token_vocab), seed)

    def generate(self, schema: SchemaInstance, beam_width: int = 5, max_len: int = 60, top_k: int = 5,
                 seed: int = 0, lm_max_len: int = 128) -> Template:
        return constrained_beam_decode(self.session(schema, seed), beam_width, max_len)

    def state(self) -> dict:
        return {
            "family": self.family, "sym_vocab": self.sym_vocab.to_list(), "token_vocab": self.token_vocab.itos,
            "feature_config": {**vars(self.fcfg), "features": list(self.fcfg.features)},
            "model_config": vars(self.rcfg), "sentence_spec": self.sentence_spec,
            "weights": self.model.state_dict(),
        }

    @classmethod
    def from_state(cls, st: dict, sentences) -> "RecurrentGenerator":
        tv = TokenVocab(st["token_vocab"][4:])
        g = cls(st["family"], SymbolicVocab.from_list(st["sym_vocab"]), tv, sentences,
                FeatureConfig(**st["feature_config"]), RecurrentConfig(**st["model_config"]), st["sentence_spec"])
        g.model.load_state_dict(st["weights"])
        g.model.eval()
        return g


def make_backbone(spec: str, texts, seed: int = 0):
    if spec == "tiny" or spec.startswith("tiny:"):
        return TinyCausalLM(WordTokenizer.build(texts), TinyLMConfig(), seed=seed)
    if spec.startswith("hf:"):
        return HFCausalLM(spec[3:])
    raise BackboneUnavailable(f"unknown LM backbone {spec!r}")


class LanguageModelGenerator:
    """Causal-LM path: serialize, fine-tune, sample."""

    family = "lm"

    def __init__(self, backbone, features, spec: str, top_k: int = 5, max_len: int = 128):
        self.spec = spec
        self.lm = LMGenerator(backbone, features, LMGenConfig(top_k=top_k, max_len=max_len))

    def serialize(self, schema: SchemaInstance, target: str) -> LMSerialization:
        return LMSerialization.build(serialize_for_lm(schema, self.lm.features), " ".join(target_tokens(target)))

    @classmethod
    def build(cls, records, cfg: RunConfig) -> "LanguageModelGenerator":
        features = cfg.feature_list()
        texts = []
        for schema, target in training_pairs(records):
            texts.append(serialize_for_lm(schema, features))
            texts.append(" ".join(target_tokens(target)))
        return cls(make_backbone(cfg.lm_backbone, texts, cfg.seed), features, cfg.lm_backbone, cfg.top_k,
                   cfg.lm_max_len)

    def fit(self, records, cfg: RunConfig, log=None) -> list[float]:
        instances = [self.serialize(s, t) for s, t in training_pairs(records)]
        return self.lm.finetune_serialized(instances, epochs=cfg.epochs, batch_size=cfg.batch_size,
                                           seed=cfg.seed, log=log)

    def generate(self, schema: SchemaInstance, beam_width: int = 5, max_len: int = 60, top_k: int = 5,
                 seed: int = 0, lm_max_len: int = 128) -> Template:
        self.lm.cfg.max_len = lm_max_len
        return self.lm.generate(schema, seed=seed, top_k=top_k)

    def state(self) -> dict:
        if not isinstance(self.lm.backbone, TinyCausalLM):
            backbone = {"kind": "hf", "weights": self.lm.backbone.model.state_dict()}
        else:
            backbone = self.lm.backbone.state()
        return {"family": "lm", "spec": self.spec, "features": list(self.lm.features), "backbone": backbone,
                "top_k": self.lm.cfg.top_k, "max_len": self.lm.cfg.max_len}

    @classmethod
    def from_state(cls, st: dict) -> "LanguageModelGenerator":
        if st["backbone"]["kind"] == "tiny":
            backbone = TinyCausalLM.from_state(st["backbone"])
        else:
            backbone = HFCausalLM(st["spec"][3:])
            backbone.model.load_state_dict(st["backbone"]["weights"])
        return cls(backbone, st["features"], st["spec"], st["top_k"], st["max_len"])


def build_generator(records: list[SGNLGRecord], cfg: RunConfig):
    if cfg.family == "lm":
        return LanguageModelGenerator.build(records, cfg)
    return RecurrentGenerator.build(records, cfg)


def train(records: list[SGNLGRecord], cfg: RunConfig, log=None):
    torch.manual_seed(cfg.seed)
    np.random.seed(cfg.seed)
    gen = build_generator(records, cfg)
    losses = gen.fit(records, cfg, log=log)
    return gen, losses


def save_checkpoint(path: str, generator, cfg: RunConfig) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
        "config_hash": cfg.config_hash(), "config": cfg.hashed_dict(), "seed": cfg.seed,
        "generator": generator.state(),
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(payload, path)
    if isinstance(generator, RecurrentGenerator):
        generator.sentences.save(path + EMBED_SUFFIX)


def read_checkpoint_header(path: str) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a generator checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_checkpoint(path: str):
    """Returns (generator, payload without weights)."""
    payload = read_checkpoint_header(path)
    st = payload["generator"]
    if st["family"] == "lm":
        gen = LanguageModelGenerator.from_state(st)
    else:
        fc = st["feature_config"]
        sentences = make_sentence_encoder(st["sentence_spec"], fc["pooling"], cache_path=path + EMBED_SUFFIX)
        gen = RecurrentGenerator.from_state(st, sentences)
    info = {k: v for k, v in payload.items() if k != "generator"}
    return gen, info
