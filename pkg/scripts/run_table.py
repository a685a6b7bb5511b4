"""Train every (loss, modality, seed) arm on a toy corpus and tabulate the
held-out modified STOI of each best checkpoint against the noisy baseline.

    python3 scripts/run_table.py --out runs/table --seeds 0 1 2
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from avse import data
from avse.experiments import Splits, median, run_arm


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--manifest", help="existing manifest; a fresh corpus is synthesised otherwise")
    ap.add_argument("--corpus-seed", type=int, default=0)
    ap.add_argument("--losses", nargs="+", default=["stoi", "mse", "mae"])
    ap.add_argument("--modes", nargs="+", default=["ao", "av"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0])
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        manifest = data.Manifest.read(args.manifest)
    else:
        manifest = data.make_dataset(data.CorpusConfig(seed=args.corpus_seed), out / "corpus")
    splits = Splits.load(manifest)

    rows = []
    with open(out / "arms.jsonl", "w") as f:
        for loss in args.losses:
            for mode in args.modes:
                for seed in args.seeds:
                    t0 = time.time()
                    r = run_arm(splits, loss, mode, seed, args.epochs)
                    row = {"loss": loss, "mode": mode, "seed": seed,
                           "initial_train_loss": r.initial_loss, "final_train_loss": r.final_loss,
                           "best_val_loss": r.best_val_loss, "noisy_val_loss": r.noisy_val_loss,
                           "test_modified_stoi": r.test_modified_stoi,
                           "noisy_test_modified_stoi": r.noisy_test_modified_stoi,
                           "seconds": round(time.time() - t0, 1), "history": r.history}
                    rows.append(row)
                    f.write(json.dumps(row) + "\n")
                    f.flush()

    lines = [f"{'loss':6}{'mode':6}{'median mSTOI':>14}{'noisy':>10}{'seeds':>8}"]
    for loss in args.losses:
        for mode in args.modes:
            sel = [r for r in rows if r["loss"] == loss and r["mode"] == mode]
            lines.append(f"{loss:6}{mode:6}{median([r['test_modified_stoi'] for r in sel]):>14.4f}"
                         f"{sel[0]['noisy_test_modified_stoi']:>10.4f}{len(sel):>8}")
    table = "\n".join(lines) + "\n"
    (out / "table.txt").write_text(table)
    print(table, end="")


if __name__ == "__main__":
    main()
