"""Classical vs modified STOI over noisy and IRM-enhanced toy-corpus signals.

    python3 scripts/correlation_study.py --out runs/corr [--manifest M]

Writes scatter.csv, correlation.json and, when matplotlib is importable,
scatter.png.
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from avse import data, evaluation
from avse.train import load_examples


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--manifest")
    ap.add_argument("--corpus-seed", type=int, default=0)
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = (data.Manifest.read(args.manifest) if args.manifest
                else data.make_dataset(data.CorpusConfig(seed=args.corpus_seed), out / "corpus"))
    examples = [ex for s in data.SPLITS for ex in load_examples(manifest, s, visual=False)]
    study = evaluation.correlate(examples)
    (out / "scatter.csv").write_text(study.to_csv())
    (out / "correlation.json").write_text(json.dumps(study.summary(), indent=2))
    print(json.dumps(study.summary()))
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, (a, b, r) in zip(axes, [("stoi", "modified_stoi", study.r_classical),
                                    ("estoi", "modified_estoi", study.r_extended)]):
        for system, marker in (("noisy", "o"), ("irm", "^")):
            pts = [row for row in study.rows if row["system"] == system]
            ax.scatter([p[a] for p in pts], [p[b] for p in pts], marker=marker, s=14, label=system)
        ax.set_xlabel(a)
        ax.set_ylabel(b)
        ax.set_title(f"r = {r:.3f}")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out / "scatter.png", dpi=120)


if __name__ == "__main__":
    main()
