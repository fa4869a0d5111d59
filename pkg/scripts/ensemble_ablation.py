"""Train baseline / Decoder A / Decoder B on the toy dataset and print the mIoU table."""
import argparse
import json
import logging
import tempfile
from pathlib import Path

from memseg.data import SyntheticConfig, generate_synthetic
from memseg.experiments import ensemble_table, format_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", type=Path, help="existing dataset root (generated if omitted)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--json", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)

    root = args.data
    if root is None:
        root = Path(tempfile.mkdtemp(prefix="memseg-"))
        generate_synthetic(root, 0, SyntheticConfig())
    results = ensemble_table(root, args.seeds, args.steps, progress=print)
    variants = ("baseline", "decoder_a", "decoder_b", "ensemble")
    rows = [[r.seed] + [f"{r.miou[v]:.4f}" for v in variants] for r in results]
    print(format_rows(rows, ["seed", *variants]))
    if args.json:
        args.json.write_text(json.dumps([r.summary() for r in results], indent=1))


if __name__ == "__main__":
    main()
