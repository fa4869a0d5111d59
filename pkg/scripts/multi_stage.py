"""Multi-stage inference on the toy val split: per-stage mIoU and pixel changes."""
import argparse
import json
import logging
import tempfile
from pathlib import Path

from memseg.config import SINGLE_SCALE, InferenceConfig
from memseg.data import DatasetManifest, SyntheticConfig, generate_synthetic, load_split
from memseg.experiments import format_rows, stage_table, train_variant
from memseg.model import SegModel


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", type=Path, help="existing dataset root (generated if omitted)")
    ap.add_argument("--checkpoint", type=Path, help="trained Decoder A; trained here if omitted")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--stages", type=int, default=4)
    ap.add_argument("--json", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)

    root = args.data
    if root is None:
        root = Path(tempfile.mkdtemp(prefix="memseg-"))
        generate_synthetic(root, 0, SyntheticConfig())
    manifest = DatasetManifest.load(root)
    if args.checkpoint:
        model, _, _ = SegModel.load(args.checkpoint)
    else:
        model = train_variant("decoder_a", load_split(manifest, "train"), args.seed, args.steps)
    table = stage_table(model, load_split(manifest, "val"), args.stages, InferenceConfig(scales=SINGLE_SCALE))
    rows = [[f"stage{s}", f"{100 * m:.2f}", c] for s, (m, c) in enumerate(zip(table["miou"], table["changes"]))]
    print(format_rows(rows, ["stage", "mIoU", "pixels changed"]))
    if args.json:
        args.json.write_text(json.dumps({"miou": table["miou"], "changes": table["changes"]}, indent=1))


if __name__ == "__main__":
    main()
