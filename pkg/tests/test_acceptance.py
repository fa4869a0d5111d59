"""End-to-end acceptance checks; each prints a PASS/FAIL verdict line."""
import time
from pathlib import Path

import numpy as np
import pytest

from memseg import tensor as T
from memseg.attention import init_projections, refine, relations
from memseg.cli import main
from memseg.config import InferenceConfig, ModelConfig, RunConfig, SINGLE_SCALE
from memseg.data import DatasetManifest, SyntheticConfig, generate_synthetic, load_split
from memseg.experiments import ensemble_table, stage_table
from memseg.memory import FeatureMemory, transform
from memseg.metrics import ConfusionMatrix, evaluate
from memseg.model import SegModel
from memseg.pipeline import ensemble, multi_scale_flip_infer, to_mask
from memseg.temporal import TemporalMemory, attend
from memseg.training import Batch, FrameSource, Trainer

from conftest import central_difference, relative_error
from oracles import attention_oracle, transform_oracle
from report import verdict
from test_data import miou_oracle
from test_pipeline import PixelModel, argmax_sum_oracle


def _random_projections(g, prefix, c):
    params = init_projections(g, prefix, c, np.float64)
    for p in params.values():
        p.data[...] = g.normal(scale=0.5, size=p.shape)
    return params


def test_criterion_1_brute_force_oracles():
    g = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {"transform": 0.0, "relations": 0.0, "refine": 0.0, "tma": 0.0}
    n = 100
    for _ in range(n):
        h, w = g.integers(1, 17, size=2)
        k = int(g.integers(1, 9))
        c = 2 * int(g.integers(1, 9))
        up = int(g.integers(1, 3))
        mem = g.normal(size=(k, c))
        r = g.normal(size=(c, h, w))
        gt = g.integers(0, k, size=(up * h, up * w))
        gt[g.random(gt.shape) < 0.05] = 255
        worst["transform"] = max(worst["transform"], np.abs(transform(r, gt, mem) - transform_oracle(r, gt, mem)).max())

        params = _random_projections(g, "attn", c)
        cb = g.normal(size=(c, h, w))
        rows, out = attention_oracle(params, "attn", r, [cb])
        o = relations(params, "attn", r, cb)
        worst["relations"] = max(worst["relations"], np.abs(o.data - rows).max())
        worst["refine"] = max(worst["refine"], np.abs(refine(params, "attn", o, cb).data - out).max())

        tparams = _random_projections(g, "tma", c)
        past = [g.normal(size=(c, h, w)) for _ in range(int(g.integers(1, 3)))]
        tm = TemporalMemory(2)
        for p in past:
            tm = tm.push(p)
        _, t_out = attention_oracle(tparams, "tma", r, past)
        worst["tma"] = max(worst["tma"], np.abs(attend(tparams, "tma", tm, r).data - (r + t_out)).max())
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-6 for v in worst.values()) and elapsed < 30
    detail = ", ".join(f"{k} max err {v:.1e}" for k, v in worst.items()) + f"; {n} instances each; {elapsed:.1f}s"
    assert verdict(1, "transform / relations / refine / TMA match loop oracles", ok, detail), detail


def test_criterion_2_moving_average_dynamics():
    g = np.random.default_rng(7)
    v = g.normal(size=(6, 12))
    mem = FeatureMemory(g.normal(size=(6, 12)), momentum=0.25)
    d0 = np.linalg.norm(mem.matrix - v)
    worst_gap, bound_ok = 0.0, True
    for n in range(1, 41):
        mem.blend(v)
        dn = np.linalg.norm(mem.matrix - v)
        bound = 0.75 ** n * d0
        bound_ok &= dn <= bound + 1e-9
        worst_gap = max(worst_gap, abs(dn - bound))
    ok = bound_ok and worst_gap <= 1e-9
    detail = f"max |dist_n - 0.75^n dist_0| = {worst_gap:.1e} over n=1..40"
    assert verdict(2, "moving-average contraction with m=0.25", ok, detail), detail


def test_criterion_3_decoder_a_gradients():
    cfg = ModelConfig(num_classes=4, channels=(8, 8, 8, 8), embed_dim=8, ppm_dim=4, dtype="float64")
    run = RunConfig(variant="decoder_a", model=cfg)
    model = SegModel(cfg, "decoder_a", 0)
    g = np.random.default_rng(11)
    for name, p in model.params.items():
        if name.endswith(".b"):
            p.data[...] = g.normal(scale=0.1, size=p.shape)
    model.memory.matrix = g.normal(size=(4, 8))
    frame = g.random((3, 32, 32))
    mask = g.integers(0, 4, size=(32, 32)).astype(np.uint8)
    mask[:3, :5] = 255
    trainer = Trainer(model, FrameSource([_clip_from(frame, mask)]), run)
    batch = Batch(frame[None], mask[None], [None], [[]], [None])

    def loss_value():
        with T.no_grad():
            return float(trainer.loss_and_forward(batch, 0, 10)[0].data)

    t0 = time.perf_counter()
    loss, _ = trainer.loss_and_forward(batch, 0, 10)
    grads = T.grad(loss, model.params)
    errors = {}
    for name, p in model.params.items():
        fd = central_difference(loss_value, p.data, h=1e-6)
        errors[name] = relative_error(grads[name], fd)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-4 and elapsed < 120
    detail = (f"{len(errors)} parameter tensors, {sum(p.data.size for p in model.params.values())} scalars; "
              f"worst {worst} rel err {errors[worst]:.1e}; {elapsed:.0f}s")
    assert verdict(3, "Decoder A analytic gradients match central differences", ok, detail), detail


def _clip_from(frame, mask):
    from memseg.data import VideoClip
    rgb = np.round(np.moveaxis(frame, 0, -1) * 255).astype(np.uint8)
    return VideoClip("grad", [rgb], [mask])


# ---------------------------------------------------------------- toy ablation


@pytest.fixture(scope="module")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    generate_synthetic(root, 0, SyntheticConfig())
    return root


@pytest.fixture(scope="module")
def ablation(toy_dataset):
    t0 = time.perf_counter()
    results = ensemble_table(toy_dataset, seeds=(0, 1, 2), steps=2000, keep_models=True)
    return results, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_4_ensemble_ablation(ablation):
    results, elapsed = ablation
    lines = []
    margins = []
    for r in results:
        margins.append(r.miou["decoder_a"] - r.miou["baseline"])
        lines.append(f"seed {r.seed}: base {r.miou['baseline']:.4f} A {r.miou['decoder_a']:.4f} "
                     f"B {r.miou['decoder_b']:.4f} A+B {r.miou['ensemble']:.4f} "
                     f"(A+B pixel acc {r.pixel_acc['ensemble']:.4f})")
    wins = sum(m >= 0.005 for m in margins)
    ok = wins >= 2 and elapsed < 15 * 60
    detail = ("; ".join(lines) + f"; A-base margins {[round(m, 4) for m in margins]}, "
              f"{wins}/3 seeds >= 0.005; {elapsed / 60:.1f} min")
    assert verdict(4, "Decoder A beats baseline by >= 0.005 mIoU on most seeds", ok, detail), detail


@pytest.mark.slow
def test_criterion_5_multi_stage(ablation, toy_dataset):
    results, _ = ablation
    model = results[0].models["decoder_a"]
    val = load_split(DatasetManifest.load(toy_dataset), "val")
    table = stage_table(model, val, 4, InferenceConfig(scales=SINGLE_SCALE))
    ok = len(table["miou"]) == 5 and len(table["changes"]) == 5
    same = lambda a, b: all(np.array_equal(x, y) for x, y in zip(a, b))
    fixed_points = 0
    for res in table["results"]:
        stages = [res.stage_masks(s) for s in range(5)]
        for s in range(1, 5):
            if same(stages[s], stages[s - 1]):
                fixed_points += 1
                ok &= all(same(stages[t], stages[s]) for t in range(s, 5))
                break
    detail = (f"stage mIoU {[round(m, 4) for m in table['miou']]}; pixel changes {table['changes']}; "
              f"{fixed_points}/{len(val)} clips reached a fixed point, none left it")
    assert verdict(5, "multi-stage inference terminates, reports, keeps fixed points", ok, detail), detail


# ---------------------------------------------------------------- plumbing


def test_criterion_6_ensemble():
    g = np.random.default_rng(5)
    k = 5
    p_a = g.dirichlet(np.ones(k), size=1_000_000).T.reshape(k, 1000, 1000)
    p_b = g.dirichlet(np.ones(k), size=1_000_000).T.reshape(k, 1000, 1000)
    matches = np.array_equal(ensemble(p_a, p_b), argmax_sum_oracle(p_a, p_b))
    coarse = np.round(p_a * 4) / 4  # forces ties
    ties = np.array_equal(ensemble(coarse, coarse[::-1]), argmax_sum_oracle(coarse, coarse[::-1]))
    self_ok = np.array_equal(ensemble(p_a, p_a), to_mask(p_a))
    ok = matches and ties and self_ok
    detail = f"10^6 pixels match oracle: {matches}; tie-heavy case: {ties}; self-ensemble = argmax: {self_ok}"
    assert verdict(6, "ensemble equals argmax-of-sum oracle", ok, detail), detail


def test_criterion_7_tta():
    cfg = ModelConfig(num_classes=4, channels=(4, 6, 8, 8), embed_dim=8, ppm_dim=4, dtype="float64")
    exact = True
    frame = np.random.default_rng(0).random((3, 64, 32))
    for variant in ("baseline", "decoder_a", "decoder_b"):
        m = SegModel(cfg, variant, 1)
        m.memory.matrix = np.random.default_rng(2).normal(size=(4, 8))
        guide = m.first_pass_mask(frame) if variant == "decoder_a" else None
        with T.no_grad():
            plain = m.forward(frame, guidance=guide, state=m.empty_state()).probs.data
        tta, _ = multi_scale_flip_infer(m, frame, InferenceConfig(scales=(1.0,), flip=False), guide)
        exact &= np.array_equal(tta, plain)

    pix = PixelModel(k=4, seed=3)
    base, _ = multi_scale_flip_infer(pix, frame, InferenceConfig(scales=(1.0,)))
    flip_only = T.hflip(pix.forward(T.hflip(frame)).probs.data)
    pix_err = float(np.abs(flip_only - base).max())

    sym = SegModel(cfg, "decoder_a", 4)
    sym.memory.matrix = np.random.default_rng(5).normal(size=(4, 8))
    for name, p in sym.params.items():
        if name.startswith("encoder."):
            p.data[...] = 0 if name.endswith(".w") else np.random.default_rng(6).random(p.shape)
    guide = np.kron(np.random.default_rng(7).integers(0, 4, size=(8, 4)), np.ones((8, 8), dtype=np.int64))
    with T.no_grad():
        unflipped = sym.forward(frame, guidance=guide).probs.data
        flipped = T.hflip(sym.forward(T.hflip(frame), guidance=T.hflip(guide)).probs.data)
    sym_err = float(np.abs(flipped - unflipped).max())
    ok = exact and pix_err <= 1e-6 and sym_err <= 1e-6
    detail = (f"single-branch bit-exact: {exact}; flip-branch error, pixel-wise model {pix_err:.1e}, "
              f"constructed SegModel {sym_err:.1e}")
    assert verdict(7, "TTA plumbing", ok, detail), detail


def test_criterion_8_metric():
    g = np.random.default_rng(8)
    worst = 0.0
    for _ in range(20):
        h, w = g.integers(1, 9, size=2)
        k = int(g.integers(1, 5))
        gt = g.integers(0, k, size=(h, w))
        pred = g.integers(0, k, size=(h, w))
        worst = max(worst, abs(evaluate([pred], [gt], k).miou() - miou_oracle(pred, gt, k)))
    cm = ConfusionMatrix(2).add(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
    worked = cm.miou() == 7 / 12
    ok = worst <= 1e-12 and worked
    detail = f"20 random cases max err {worst:.1e}; 7/12 example exact: {worked}"
    assert verdict(8, "mIoU matches hand oracle", ok, detail), detail


def _tree(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--out", str(data), "--train", "3", "--val", "2", "--frames", "4",
                 "--size", "32", "32", "--classes", "4"]) == 0
    runs = []
    for i, jobs in enumerate(("1", "3")):
        out = tmp_path / f"run{i}"
        codes = [
            main(["train", "--data", str(data), "--out", str(out / "a"), "--variant", "decoder_a",
                  "--steps", "6", "--seed", "4"]),
            main(["train", "--data", str(data), "--out", str(out / "b"), "--variant", "decoder_b",
                  "--steps", "6", "--seed", "4"]),
            main(["infer", "--data", str(data), "--checkpoint", str(out / "a" / "model.ckpt"),
                  "--out", str(out / "pa"), "--stages", "2", "--save-probs", "--flip", "--jobs", jobs]),
            main(["infer", "--data", str(data), "--checkpoint", str(out / "b" / "model.ckpt"),
                  "--out", str(out / "pb"), "--save-probs", "--jobs", jobs]),
            main(["eval", "--data", str(data), "--pred", f"A={out / 'pa'}", f"B={out / 'pb'}",
                  "--report", str(out / "report.json"), "--jobs", jobs]),
            main(["ensemble", "--data", str(data), "--probs-a", str(out / "pa"), "--probs-b", str(out / "pb"),
                  "--out", str(out / "ab"), "--report", str(out / "ab.json")]),
        ]
        runs.append((codes, _tree(out)))
    (codes0, tree0), (codes1, tree1) = runs
    ok = codes0 == codes1 == [0] * 6 and tree0 == tree1
    detail = f"{len(tree0)} output files byte-identical across runs (second run with --jobs 3): {tree0 == tree1}"
    assert verdict(9, "train/infer/eval deterministic", ok, detail), detail
