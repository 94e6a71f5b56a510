"""Command-line entry point: preprocess, stats, train, generate, evaluate, report.

Failures print one line ``error: <CODE>: <message>`` on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

from . import fixture_dir
from .config import CACHE_ENV, ConfigError, RunConfig, load_config
from .preprocess import (MalformedCorpusError, SchemaLookupError, SpanMismatchError, classify_service_split,
                         corpus_stats, domain_of, preprocess_corpus, reference_distribution, stats_to_csv,
                         stats_to_markdown)
from .schema import (SGNLGRecord, iter_jsonl, load_records, read_jsonl_meta, save_records, write_jsonl)

logger = logging.getLogger("sgnlg")

DSTC8_URL = "https://github.com/google-research-datasets/dstc8-schema-guided-dialogue/archive/refs/heads/master.zip"
SPLITS = ("train", "dev", "test")


class CLIError(Exception):
    def __init__(self, code: str, message: str, status: int = 1):
        super().__init__(message)
        self.code = code
        self.status = status


def _error_code(exc: BaseException) -> tuple[str, int]:
    from .features import EncoderUnavailable
    from .models.lm import BackboneUnavailable, SerializationError
    from .nlmr import UnknownActError
    from .training import CheckpointError

    table = [
        (ConfigError, "E_CONFIG", 2), (CheckpointError, "E_CHECKPOINT", 1), (MalformedCorpusError, "E_CORPUS", 1),
        (SpanMismatchError, "E_SPAN", 1), (SchemaLookupError, "E_SCHEMA", 1), (UnknownActError, "E_RULE", 1),
        (EncoderUnavailable, "E_ENCODER", 1), (BackboneUnavailable, "E_BACKBONE", 1),
        (SerializationError, "E_SERIALIZATION", 1), (FileNotFoundError, "E_NOT_FOUND", 1),
        (json.JSONDecodeError, "E_PARSE", 1), (OSError, "E_IO", 1),
    ]
    for cls, code, status in table:
        if isinstance(exc, cls):
            return code, status
    return "E_INTERNAL", 1


def _one_line(msg) -> str:
    return " ".join(str(msg).split())


# --------------------------------------------------------------------------
# helpers

def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _split_path(data_dir: str, split: str) -> str:
    return os.path.join(data_dir, f"{split}.jsonl")


def _load_split(data_dir: str, split: str) -> list[SGNLGRecord]:
    path = _split_path(data_dir, split)
    if not os.path.exists(path):
        raise CLIError("E_NOT_FOUND", f"missing {split} split at {path}")
    return load_records(path)


def _cache_dir(cfg: RunConfig) -> str:
    return cfg.cache_dir or os.path.join(os.path.expanduser("~"), ".cache", "sgnlg")


def download_dstc8(cache_dir: str) -> str:
    """Fetch the public DSTC8 schema-guided corpus; returns the directory holding train/ and dev/."""
    import urllib.request
    import zipfile

    target = os.path.join(cache_dir, "dstc8")
    marker = os.path.join(target, "train", "schema.json")
    if os.path.exists(marker):
        return target
    os.makedirs(cache_dir, exist_ok=True)
    archive = os.path.join(cache_dir, "dstc8.zip")
    try:
        urllib.request.urlretrieve(DSTC8_URL, archive)
    except Exception as e:
        raise CLIError("E_NETWORK", f"cannot download DSTC8 corpus: {e}") from e
    with zipfile.ZipFile(archive) as zf:
        root = zf.namelist()[0].split("/")[0]
        for split in ("train", "dev"):
            for name in zf.namelist():
                if name.startswith(f"{root}/{split}/") and not name.endswith("/"):
                    dest = os.path.join(target, split, os.path.basename(name))
                    os.makedirs(os.path.dirname(dest), exist_ok=True)
                    with zf.open(name) as src, open(dest, "wb") as out:
                        out.write(src.read())
    return target


# --------------------------------------------------------------------------
# subcommands

def cmd_preprocess(cfg: RunConfig, args) -> int:
    if args.download_dstc8:
        cfg.input_dir = download_dstc8(_cache_dir(cfg))
    elif args.fixture or not cfg.input_dir:
        cfg.input_dir = fixture_dir()
    cfg.validate(require_paths=("input_dir",))
    if not cfg.output_dir:
        raise ConfigError("--output-dir is required")
    result = preprocess_corpus(cfg.input_dir, cfg.dev_fraction, cfg.seed, cfg.dedupe, cfg.jobs)
    meta = {**cfg.meta(), "dev_fraction": cfg.dev_fraction, "dedupe": cfg.dedupe}
    for split in SPLITS:
        save_records(_split_path(cfg.output_dir, split), result.splits[split], meta={**meta, "split": split})
    table = corpus_stats(result.splits)
    _write(os.path.join(cfg.output_dir, "stats.csv"), stats_to_csv(table))
    _write(os.path.join(cfg.output_dir, "stats.md"), stats_to_markdown(table))
    log = {"meta": meta, "counters": result.counters, "act_inventory": result.act_inventory}
    _write(os.path.join(cfg.output_dir, "preprocess_log.json"), json.dumps(log, indent=2, sort_keys=True) + "\n")
    n = {s: len(result.splits[s]) for s in SPLITS}
    print(f"wrote {n['train']}/{n['dev']}/{n['test']} train/dev/test records to {cfg.output_dir}")
    print("acts: " + ", ".join(result.act_inventory))
    return 0


def cmd_stats(cfg: RunConfig, args) -> int:
    cfg.validate(require_paths=("data_dir",))
    splits = {s: _load_split(cfg.data_dir, s) for s in SPLITS if os.path.exists(_split_path(cfg.data_dir, s))}
    table = corpus_stats(splits)
    out = cfg.output_dir or cfg.data_dir
    _write(os.path.join(out, "stats.csv"), stats_to_csv(table))
    _write(os.path.join(out, "stats.md"), stats_to_markdown(table))
    sys.stdout.write(stats_to_markdown(table))
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    from .training import save_checkpoint, train

    cfg.validate(require_paths=("data_dir",))
    if not cfg.checkpoint:
        raise ConfigError("--checkpoint is required")
    records = _load_split(cfg.data_dir, "train")

    def log(epoch, loss):
        logger.info("epoch %d loss %.4f", epoch, loss)

    gen, losses = train(records, cfg, log=log)
    save_checkpoint(cfg.checkpoint, gen, cfg)
    print(f"{cfg.family} trained on {len(records)} MRs, final loss {losses[-1]:.4f}, "
          f"config {cfg.config_hash()} -> {cfg.checkpoint}")
    return 0


def _generation_cfg(cfg: RunConfig, ckpt_info: dict, explicit: set) -> RunConfig:
    """Decoding keys come from the checkpoint's config unless given on the command line."""
    stored = ckpt_info.get("config", {})
    for key in ("beam_width", "max_len", "lm_max_len", "top_k", "seed"):
        if key not in explicit and key in stored:
            setattr(cfg, key, stored[key])
    return cfg


def cmd_generate(cfg: RunConfig, args) -> int:
    from .training import load_checkpoint

    cfg.validate(require_paths=("checkpoint",))
    if not args.input or not args.output:
        raise ConfigError("--input and --output are required")
    gen, info = load_checkpoint(cfg.checkpoint)
    cfg = _generation_cfg(cfg, info, args.explicit)
    records = load_records(args.input)
    rows = []
    for i, r in enumerate(records):
        out = gen.generate(r.schema, beam_width=cfg.beam_width, max_len=cfg.max_len, top_k=cfg.top_k,
                           seed=cfg.seed + i, lm_max_len=cfg.lm_max_len)
        rows.append({"index": i, "mr_key": r.schema.mr_string(), "service": r.schema.service,
                     "intent": r.schema.intent, "template": out.text})
    meta = {"config_hash": info["config_hash"], "seed": cfg.seed, "family": info["config"].get("family"),
            "beam_width": cfg.beam_width, "top_k": cfg.top_k}
    write_jsonl(args.output, rows, meta=meta)
    print(f"generated {len(rows)} templates -> {args.output}")
    return 0


def label_splits(records, train_records) -> list[str]:
    services = {r.schema.service for r in train_records}
    domains = {domain_of(s) for s in services}
    return [classify_service_split(r.schema.service, services, domains).value for r in records]


def cmd_evaluate(cfg: RunConfig, args) -> int:
    from .metrics import InstanceResult, aggregate_report

    for name in ("generations", "test", "train"):
        if not getattr(args, name):
            raise ConfigError(f"--{name} is required")
    if not cfg.output_dir:
        raise ConfigError("--output-dir is required")
    test = load_records(args.test)
    train_records = load_records(args.train)
    gens = list(iter_jsonl(args.generations))
    if len(gens) != len(test):
        raise CLIError("E_MISMATCH", f"{len(gens)} generations for {len(test)} test records")
    for g, r in zip(gens, test):
        if g.get("mr_key") is not None and g["mr_key"] != r.schema.mr_string():
            raise CLIError("E_MISMATCH", f"generation {g.get('index')} does not match its test MR")
    labels = label_splits(test, train_records)
    results = [InstanceResult(g["template"], [t.text for t in r.references], list(r.schema.mr),
                              r.schema.service.lower(), label)
               for g, r, label in zip(gens, test, labels)]
    gen_meta = read_jsonl_meta(args.generations) or {}
    meta = {"generations_config_hash": gen_meta.get("config_hash"), "seed": gen_meta.get("seed", cfg.seed),
            "config_hash": cfg.config_hash()}
    report = aggregate_report(results, [t.text for r in train_records for t in r.references], meta)
    name = args.name or "report"
    _write(os.path.join(cfg.output_dir, f"{name}.json"), report.to_json())
    _write(os.path.join(cfg.output_dir, f"{name}.csv"), report.to_csv())
    _write(os.path.join(cfg.output_dir, f"{name}.md"), report.to_markdown(name))
    fmt = lambda x: "n/a" if x is None else f"{x:.4f}"  # noqa: E731
    print(f"BLEU {fmt(report.bleu)}  METEOR {fmt(report.meteor)}  SER {fmt(report.ser)}  "
          f"slot-match {fmt(report.slot_match)}  novelty {fmt(report.novelty)}")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    from .metrics import EvalReport

    if not cfg.output_dir:
        raise ConfigError("--output-dir is required")
    reports = []
    for spec in args.reports or []:
        label, _, path = spec.rpartition("=")
        with open(path, encoding="utf-8") as f:
            reports.append((label or os.path.splitext(os.path.basename(path))[0], EvalReport.from_dict(json.load(f))))
    lines = []
    if reports:
        fields = EvalReport.SUMMARY_FIELDS
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model"] + list(fields))
        lines += ["## Model comparison", "", "| Model | " + " | ".join(fields) + " |",
                  "|---|" + "---|" * len(fields)]
        for label, rep in reports:
            vals = [getattr(rep, k) for k in fields]
            cells = ["n/a" if v is None else (str(v) if isinstance(v, int) else f"{v:.4f}") for v in vals]
            lines.append(f"| {label} | " + " | ".join(cells) + " |")
            w.writerow([label] + cells)
        _write(os.path.join(cfg.output_dir, "comparison.csv"), buf.getvalue())
        split_names = sorted({s for _, rep in reports for s in rep.splits})
        lines += ["", "## Seen / partially unseen / fully unseen (reference-weighted)", "",
                  "| Model | " + " | ".join(f"{s} BLEU | {s} SER" for s in split_names) + " |",
                  "|---|" + "---|---|" * len(split_names)]
        for label, rep in reports:
            cells = []
            for s in split_names:
                agg = rep.splits.get(s, {})
                for k in ("bleu", "ser"):
                    v = agg.get(k)
                    cells.append("n/a" if v is None else f"{v:.4f}")
            lines.append(f"| {label} | " + " | ".join(cells) + " |")
        lines.append("")
    if cfg.data_dir:
        # per-service reference counts per split (reference-distribution figures)
        for split in SPLITS:
            path = _split_path(cfg.data_dir, split)
            if not os.path.exists(path):
                continue
            dist = reference_distribution(load_records(path))
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["service", "references"])
            for svc, n in dist.items():
                w.writerow([svc, n])
            _write(os.path.join(cfg.output_dir, f"refdist_{split}.csv"), buf.getvalue())
    _write(os.path.join(cfg.output_dir, "report.md"), "\n".join(lines) + "\n")
    print(f"report written to {cfg.output_dir}")
    return 0


# --------------------------------------------------------------------------
# argument parsing

CONFIG_FLAGS = {
    # flag: (config key, type)
    "--input-dir": ("input_dir", str), "--output-dir": ("output_dir", str), "--data-dir": ("data_dir", str),
    "--cache-dir": ("cache_dir", str), "--checkpoint": ("checkpoint", str),
    "--dev-fraction": ("dev_fraction", float), "--jobs": ("jobs", int),
    "--features": ("features", str), "--symbolic-dim": ("symbolic_dim", int), "--model-dim": ("model_dim", int),
    "--pooling": ("pooling", str), "--nl-mr-mode": ("nl_mr_mode", str),
    "--sentence-encoder": ("sentence_encoder", str), "--family": ("family", str),
    "--hidden-dim": ("hidden_dim", int), "--token-dim": ("token_dim", int), "--latent-dim": ("latent_dim", int),
    "--align": ("align", str), "--cvae-attention": ("cvae_attention", str), "--lm-backbone": ("lm_backbone", str), "--epochs": ("epochs", int),
    "--batch-size": ("batch_size", int), "--lr": ("lr", float), "--grad-clip": ("grad_clip", float),
    "--kl-warmup": ("kl_warmup", float), "--beam-width": ("beam_width", int), "--max-len": ("max_len", int),
    "--lm-max-len": ("lm_max_len", int), "--top-k": ("top_k", int), "--seed": ("seed", int),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgnlg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run config (flat keys)")
    for flag, (key, typ) in CONFIG_FLAGS.items():
        common.add_argument(flag, dest=key, type=typ, default=None)

    pp = sub.add_parser("preprocess", parents=[common], help="DSTC8 dialogs -> SGNLGRecord JSONL + stats")
    pp.add_argument("--dedupe", action="store_true", default=None)
    pp.add_argument("--fixture", action="store_true", help="use the bundled miniature corpus")
    pp.add_argument("--download-dstc8", action="store_true", help=f"fetch the corpus into ${CACHE_ENV}")
    sub.add_parser("stats", parents=[common], help="corpus statistics for a preprocessed directory")
    sub.add_parser("train", parents=[common], help="train a generator")
    pg = sub.add_parser("generate", parents=[common], help="generate templates for a record file")
    pg.add_argument("--input", required=False)
    pg.add_argument("--output", required=False)
    pe = sub.add_parser("evaluate", parents=[common], help="score generations against references")
    pe.add_argument("--generations")
    pe.add_argument("--test")
    pe.add_argument("--train")
    pe.add_argument("--name", default=None)
    pr = sub.add_parser("report", parents=[common], help="comparison tables and reference distributions")
    pr.add_argument("--reports", nargs="*", metavar="[LABEL=]REPORT.json")
    return p


COMMANDS = {"preprocess": cmd_preprocess, "stats": cmd_stats, "train": cmd_train, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    overrides = {key: getattr(args, key, None) for key, _ in CONFIG_FLAGS.values()}
    if getattr(args, "dedupe", None):
        overrides["dedupe"] = True
    args.explicit = {k for k, v in overrides.items() if v is not None}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except CLIError as e:
        print(f"error: {e.code}: {_one_line(e)}", file=sys.stderr)
        return e.status
    except Exception as e:  # noqa: BLE001 - every failure becomes one machine-readable line
        code, status = _error_code(e)
        if code == "E_INTERNAL" and args.verbose:
            raise
        print(f"error: {code}: {_one_line(e)}", file=sys.stderr)
        return status


if __name__ == "__main__":
    sys.exit(main())
