"""Log-magnitude spectrograms of one test mixture: clean, noisy, IRM and the
output of each supplied checkpoint.

    python3 scripts/spectrograms.py --manifest M --out runs/spec \
        --checkpoint stoi=runs/stoi/best.ckpt --checkpoint mse=runs/mse/best.ckpt
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from avse import cli, data
from avse.evaluation import enhance_example, irm_output
from avse.model import load_checkpoint
from avse.train import load_examples


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--manifest", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--split", default="test")
    ap.add_argument("--index", type=int, default=0, help="which utterance of the split")
    ap.add_argument("--checkpoint", action="append", default=[], metavar="NAME=PATH")
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    ex = load_examples(data.Manifest.read(args.manifest), args.split)[args.index]
    signals = {"clean": ex.clean, "noisy": ex.mixture, "irm": irm_output(ex)}
    for spec in args.checkpoint:
        name, _, path = spec.partition("=")
        signals[name] = enhance_example(load_checkpoint(path).model(), ex)
    for name, wav in signals.items():
        db = cli.spectrogram_db(data.extract_features(wav).mag.mags)
        cli.write_pgm(db, out / f"{ex.utterance_id}_{name}.pgm")
        np.save(out / f"{ex.utterance_id}_{name}.npy", db)
        print(f"{name}: {out / f'{ex.utterance_id}_{name}.pgm'}")


if __name__ == "__main__":
    main()
