"""Long run: MR-only vs full-schema inputs on a real DSTC8 checkout.

Trains one model per feature set, evaluates both on the test split and
prints the direction of each metric delta. Informational only; nothing is
asserted. Expect hours of CPU time at the default settings.

    python scripts/mr_vs_schema.py --dstc8 /data/dstc8 --work /tmp/mrvs --family seq2seq
"""
import argparse
import json
import os
import sys

from sgnlg.cli import main as cli


def step(argv):
    status = cli(argv)
    if status:
        sys.exit(status)


def run(args):
    data = os.path.join(args.work, "data")
    if not os.path.exists(os.path.join(data, "train.jsonl")):
        step(["preprocess", "--input-dir", args.dstc8, "--output-dir", data, "--jobs", str(args.jobs)])
    reports = {}
    for features in ("mr_only", "full_schema"):
        ckpt = os.path.join(args.work, f"{args.family}-{features}.pt")
        out = os.path.join(args.work, features)
        common = ["--family", args.family, "--features", features, "--seed", str(args.seed)]
        if not os.path.exists(ckpt):
            step(["train", "--data-dir", data, "--checkpoint", ckpt, "--epochs", str(args.epochs)] + common)
        gens = os.path.join(out, "generations.jsonl")
        step(["generate", "--checkpoint", ckpt, "--input", os.path.join(data, "test.jsonl"), "--output", gens])
        step(["evaluate", "--generations", gens, "--test", os.path.join(data, "test.jsonl"),
              "--train", os.path.join(data, "train.jsonl"), "--output-dir", out, "--name", features])
        with open(os.path.join(out, f"{features}.json"), encoding="utf-8") as f:
            reports[features] = json.load(f)
    step(["report", "--reports"] + [f"{k}={os.path.join(args.work, k, k + '.json')}" for k in reports]
         + ["--data-dir", data, "--output-dir", args.work])

    # lower is better for SER, higher for everything else
    print(f"{'metric':<12} {'mr_only':>9} {'schema':>9}  direction")
    for key in ("bleu", "meteor", "ser", "slot_match", "distinct_1", "distinct_2", "novelty"):
        a, b = reports["mr_only"][key], reports["full_schema"][key]
        if a is None or b is None:
            print(f"{key:<12} {'n/a':>9} {'n/a':>9}")
            continue
        better = (b < a) if key == "ser" else (b > a)
        trend = "schema better" if better else ("tie" if a == b else "mr_only better")
        print(f"{key:<12} {a:>9.4f} {b:>9.4f}  {trend}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dstc8", required=True, help="directory with train/ and dev/ (dev is used as test)")
    p.add_argument("--work", required=True)
    p.add_argument("--family", default="seq2seq", choices=["seq2seq", "cvae", "lm"])
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--jobs", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    run(p.parse_args())
