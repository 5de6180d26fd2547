"""Acceptance criteria 1-9; each test prints one PASS/FAIL line.

The lines are collected and repeated in the terminal summary, so they show
without ``-s``.
"""

import dataclasses
import shutil
import time

import numpy as np
import pytest

from conftest import CRITERIA
from oracles import brute_roi_align, rescan_grouping
from soco.config import RunConfig, ViewConfig, c4_variant
from soco.data import gen_data, load_image, make_rectangles_scene
from soco.diagnostics import micro_config, micro_model_case, random_boxes, run_suite
from soco.network import assign_level, init_params, target_subtree
from soco.numerics import gradcheck, roi_align
from soco.proposals import MAX_ASPECT, MAX_REL_SIZE, MIN_ASPECT, MIN_REL_SIZE, BBox, filter_proposals, iou
from soco.segmentation import group_regions, selective_search
from soco.training import (
    Sample,
    TrainState,
    checksum,
    ema_update,
    lars_step,
    lr_schedule,
    momentum_schedule,
    pair_loss,
    prepare_batch,
    proposal_loss,
    read_metrics,
    train_loop,
    train_step,
)
from soco.views import ViewTransform, build_views, transform_box

from test_segmentation import _random_instance


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    CRITERIA.append(line)
    print(line)


# ---------------------------------------------------------------------------
# 1: RoIAlign against the brute-force oracle
# ---------------------------------------------------------------------------

def test_criterion_1_roi_align_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        level = int(rng.integers(2, 6))
        stride = float(2 ** level)
        h, w = (int(v) for v in rng.integers(3, 12, 2))
        f = rng.standard_normal((int(rng.integers(1, 5)), h, w))
        box = random_boxes(rng, 1, h, w, stride)[0]
        got = roi_align(f, [box], stride, 7, 2).data
        want = brute_roi_align(f, [tuple(box)], stride, 7, 2)
        worst = max(worst, float(np.max(np.abs(got - want))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 10
    report(1, ok, f"max abs err {worst:.2e} over 100 triples in {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2: gradient suite
# ---------------------------------------------------------------------------

def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    reports = run_suite(seed=0, tolerance=1e-4, include_model=True, model_variants=("fpn",))
    elapsed = time.perf_counter() - t0
    worst = max(reports, key=lambda r: r.max_error)
    failed = [r.name for r in reports if not r.passed]
    ok = not failed and elapsed < 120
    report(2, ok, f"{len(reports) - len(failed)}/{len(reports)} checks pass, worst {worst.name} "
           f"{worst.max_error:.1e}, {elapsed:.1f}s")
    assert ok, failed


# ---------------------------------------------------------------------------
# 3: loss algebra
# ---------------------------------------------------------------------------

def loss_algebra(n_targets: int, rng) -> tuple[bool, str]:
    bound = 2.0 * n_targets
    lo, hi = np.inf, -np.inf
    for _ in range(2000):
        v = rng.standard_normal(8)
        targets = list(rng.standard_normal((n_targets, 8)))
        x = proposal_loss(v, targets)
        lo, hi = min(lo, x), max(hi, x)
    # adversarial extremes
    v = rng.standard_normal(8)
    lo = min(lo, proposal_loss(v, [3 * v] * n_targets))
    hi = max(hi, proposal_loss(v, [-v] * n_targets))
    same = proposal_loss(v, [v] * n_targets)
    scale_err = 0.0
    for _ in range(500):
        a, b = rng.standard_normal((2, 8))
        al, be = rng.uniform(1e-4, 1e4, 2)
        scale_err = max(scale_err, abs(pair_loss(al * a, b) - pair_loss(a, b)),
                        abs(pair_loss(a, be * b) - pair_loss(a, b)))
    ok = (-bound - 1e-12 <= lo and hi <= bound + 1e-12 and abs(same + bound) <= 1e-9
          and scale_err <= 1e-12)
    return ok, (f"range [{lo:.4f}, {hi:.4f}] within +-{bound:g}, identical {same:.12f}, "
                f"rescale err {scale_err:.1e}")


def test_criterion_3_loss_algebra():
    ok, detail = loss_algebra(2, np.random.default_rng(3))
    report(3, ok, detail)
    assert ok


# ---------------------------------------------------------------------------
# 4: scale-aware level assignment
# ---------------------------------------------------------------------------

def test_criterion_4_level_boundaries():
    areas = [48 ** 2, 48 ** 2 + 1, 96 ** 2, 96 ** 2 + 1, 192 ** 2, 192 ** 2 + 1, 224 ** 2]
    want = [2, 3, 3, 4, 4, 5, 5]
    got = []
    for area in areas:
        # the same area as a square, a wide and a tall box
        levels = {assign_level(BBox(112, 112, area ** 0.5, area ** 0.5)),
                  assign_level(BBox(112, 112, area / 32.0, 32.0)),
                  assign_level(BBox(112, 112, 32.0, area / 32.0))}
        got.append(levels.pop() if len(levels) == 1 else None)
    ok = got == want
    report(4, ok, f"levels {got}")
    assert ok


# ---------------------------------------------------------------------------
# 5: geometry
# ---------------------------------------------------------------------------

def _expected_map(box, t: ViewTransform):
    """Crop, then resize, then mirror, written out step by step."""
    sx, sy = t.out_size[0] / t.crop_size[0], t.out_size[1] / t.crop_size[1]
    x = (box.x - t.crop_origin[0]) * sx
    y = (box.y - t.crop_origin[1]) * sy
    if t.hflip:
        x = t.out_size[0] - x
    return np.array([x, y, box.w * sx, box.h * sy])


def _filter_recheck(box, width, height) -> bool:
    if box.w <= 0 or box.h <= 0:
        return False
    rel = np.sqrt(box.w * box.h / (width * height))
    return MIN_ASPECT <= box.w / box.h <= MAX_ASPECT and MIN_REL_SIZE <= rel <= MAX_REL_SIZE


def test_criterion_5_geometry():
    rng = np.random.default_rng(5)
    worst, kept, dropped_inside, outside = 0.0, 0, 0, 0
    for _ in range(100_000):
        w0, h0 = rng.uniform(32, 400, 2)
        cw, ch = rng.uniform(0.2, 1.0, 2) * (w0, h0)
        ox, oy = rng.uniform(0, 1, 2) * (w0 - cw, h0 - ch)
        t = ViewTransform((ox, oy), (cw, ch), tuple(rng.uniform(32, 400, 2)), bool(rng.integers(2)))
        box = BBox(*rng.uniform(0, 1, 2) * (w0, h0), *rng.uniform(0.01, 0.6, 2) * (w0, h0))
        x0, y0, x1, y1 = box.corners
        inside = x0 >= ox and y0 >= oy and x1 <= ox + cw and y1 <= oy + ch
        got = transform_box(box, t)
        if inside:
            if got is None:
                dropped_inside += 1
                continue
            kept += 1
            worst = max(worst, float(np.max(np.abs(np.array(got) - _expected_map(box, t)))))
        if got is not None:
            gx0, gy0, gx1, gy1 = got.corners
            if gx0 < 0 or gy0 < 0 or gx1 > t.out_size[0] or gy1 > t.out_size[1]:
                outside += 1

    # emitted view boxes, including jitter, V3 and V4
    for trial in range(300):
        img = rng.random((3, 64, 64))
        boxes = [BBox(*rng.uniform(10, 54, 2), *rng.uniform(8, 50, 2)) for _ in range(4)]
        cfg = ViewConfig(v1_size=64, v3_size=32, v4_enabled=True, v4_size=48, clip_partial=bool(trial % 2))
        for v in build_views(img, boxes, cfg, np.random.default_rng(trial)).values():
            w, h = v.size
            for _, b in v.boxes:
                bx0, by0, bx1, by1 = b.corners
                if bx0 < 0 or by0 < 0 or bx1 > w or by1 > h:
                    outside += 1

    mismatches = 0
    for _ in range(10_000):
        W, H = rng.uniform(50, 500, 2)
        b = BBox(*rng.uniform(0, 1, 2) * (W, H), *rng.uniform(0.01, 1.0, 2) * (W, H))
        if bool(filter_proposals([b], W, H)) != _filter_recheck(b, W, H):
            mismatches += 1
    ok = worst <= 1e-9 and dropped_inside == 0 and outside == 0 and mismatches == 0 and kept > 1000
    report(5, ok, f"{kept} preserved boxes, max coord err {worst:.1e}, {dropped_inside} wrongly dropped, "
           f"{outside} outside their view, {mismatches} filter discrepancies")
    assert ok


# ---------------------------------------------------------------------------
# 6: EMA and optimiser
# ---------------------------------------------------------------------------

def test_criterion_6_ema_and_optimizer():
    rng = np.random.default_rng(6)
    cfg = micro_config()
    params, _ = init_params(cfg.model, rng)
    xi = {k: v + rng.standard_normal(v.shape) for k, v in target_subtree(params).items()}
    ema_err = 0.0
    for tau in rng.uniform(0, 1, 50):
        out = ema_update(params, xi, float(tau))
        for k in xi:
            ema_err = max(ema_err, float(np.max(np.abs(out[k] - (tau * xi[k] + (1 - tau) * params[k])))))
            below = np.minimum(xi[k], params[k]) - out[k]
            above = out[k] - np.maximum(xi[k], params[k])
            ema_err = max(ema_err, float(below.max()), float(above.max()))

    # one real step: LARS sees only theta, the target changes only through the EMA
    cfg6 = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, batch_size=2, steps=4))
    state = TrainState.initial(cfg6)
    xi_sum = checksum(state.target)
    img_rng = np.random.default_rng(60)
    samples = [Sample(img_rng.random((3, 48, 48)), [BBox(24, 24, 20, 24), BBox(20, 26, 18, 16)])
               for _ in range(2)]
    res = train_step(state, prepare_batch(samples, cfg6, 0), cfg6, warmup_steps=0)
    untouched = checksum(state.target) == xi_sum
    via_ema = checksum(res.state.target) == checksum(ema_update(res.state.params, state.target,
                                                                res.metrics["tau"]))

    # scalar quadratic 0.5 * a (x - c)^2, minimum at c
    a, c = 3.0, 1.7
    x, slots = {"x": np.array(-4.0)}, {}
    for _ in range(500):
        x, slots = lars_step(x, {"x": a * (x["x"] - c)}, slots, lr=0.05, weight_decay=0.0)
    quad_err = abs(float(x["x"]) - c)
    y, slots = {"y": np.array([[-4.0]])}, {}
    for s in range(500):
        y, slots = lars_step(y, {"y": a * (y["y"] - c)}, slots, lr=100.0 * 0.97 ** s, weight_decay=0.0,
                             exclude=lambda n, v: False)
    quad_err_adapted = abs(float(y["y"][0, 0]) - c)

    t_start, t_end = momentum_schedule(0, 200, 0.99), momentum_schedule(200, 200, 0.99)
    peak = 1.0 * 8 / 256
    lr_peak, lr_end = lr_schedule(80, 200, 80, 1.0, 8), lr_schedule(200, 200, 80, 1.0, 8)
    sched_ok = t_start == 1 - (1 - 0.99) and t_end == 1.0 and lr_peak == peak and lr_end == 0.0
    ok = (ema_err <= 1e-12 and untouched and via_ema and quad_err <= 1e-6 and quad_err_adapted <= 1e-6
          and sched_ok)
    report(6, ok, f"ema err {ema_err:.1e}, target untouched by LARS {untouched}, target == EMA {via_ema}, "
           f"quadratic err {quad_err:.1e} / {quad_err_adapted:.1e} (plain / trust-ratio), "
           f"tau {t_start}->{t_end}, lr {lr_peak}->{lr_end}")
    assert ok


# ---------------------------------------------------------------------------
# 7: selective search
# ---------------------------------------------------------------------------

def test_criterion_7_selective_search():
    worst = []
    for seed in range(20):
        scene = make_rectangles_scene(np.random.default_rng([7, seed]))
        boxes = selective_search(scene.image)
        worst.append(min(max(iou(s.bbox, b) for b in boxes) for s in scene.shapes))
    rng = np.random.default_rng(77)
    oracle_mismatch = 0
    for _ in range(100):
        regions, adj, area = _random_instance(rng, int(rng.integers(1, 7)))
        if group_regions(regions, adj, area)[1] != rescan_grouping(regions, adj, area):
            oracle_mismatch += 1
    ok = min(worst) >= 0.7 and oracle_mismatch == 0
    report(7, ok, f"worst best-IoU over 20 scenes {min(worst):.3f}, "
           f"{oracle_mismatch}/100 grouping mismatches")
    assert ok


# ---------------------------------------------------------------------------
# 8: training smoke run
# ---------------------------------------------------------------------------

SMOKE_WINDOW = 10  # "final" values are means over the last logged steps
RESUME_FROM = 150


def smoke_samples(tmp_dir, cfg: RunConfig) -> list[Sample]:
    records = gen_data(tmp_dir, cfg.data.n_images, cfg.data, cfg.seed)
    samples = []
    for r in records:
        img = load_image(tmp_dir / r["file"])
        boxes = filter_proposals(selective_search(img, cfg.search.k, cfg.search.sigma, cfg.search.min_size),
                                 r["width"], r["height"])
        samples.append(Sample(np.ascontiguousarray(img.transpose(2, 0, 1)), boxes))
    return samples


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    cfg = RunConfig()
    samples = smoke_samples(root / "data", cfg)
    t0 = time.perf_counter()
    train_loop(samples, cfg, root / "a")
    elapsed = time.perf_counter() - t0
    train_loop(samples, cfg, root / "b")
    resumed = root / "c"
    resumed.mkdir()
    ckpt = root / "a" / f"ckpt_{RESUME_FROM:06d}.soco"
    shutil.copy(ckpt, resumed / ckpt.name)
    shutil.copy(root / "a" / "metrics.jsonl", resumed / "metrics.jsonl")
    train_loop(samples, cfg, resumed, resume=resumed / ckpt.name)
    return {"cfg": cfg, "elapsed": elapsed,
            "a": (root / "a" / "metrics.jsonl").read_bytes(),
            "b": (root / "b" / "metrics.jsonl").read_bytes(),
            "c": (resumed / "metrics.jsonl").read_bytes(),
            "metrics": read_metrics(root / "a" / "metrics.jsonl")}


def test_criterion_8_training_smoke(smoke):
    m = smoke["metrics"]
    cfg = smoke["cfg"]
    tail = m[-SMOKE_WINDOW:]
    initial = m[0]["loss"]
    final = float(np.mean([r["loss"] for r in tail]))
    cosine = float(np.mean([r["mean_pos_cosine"] for r in tail]))
    spread = float(np.mean([r["embed_std"] for r in tail]))
    checks = {
        "steps": len(m) == cfg.train.steps == 200,
        "time": smoke["elapsed"] < 600,
        "loss": final <= 0.5 * initial,
        "cosine": cosine >= 0.8,
        "std": spread >= 1e-3,
        "determinism": smoke["a"] == smoke["b"],
        "resume": smoke["c"] == smoke["a"],
    }
    ok = all(checks.values())
    failing = [k for k, v in checks.items() if not v]
    report(8, ok, f"{len(m)} steps in {smoke['elapsed']:.0f}s, loss {initial:.3f} -> {final:.3f}, "
           f"mean positive cosine {cosine:.3f}, embedding std {spread:.4f}, "
           f"same-seed identical {checks['determinism']}, resume identical {checks['resume']}"
           + (f"; failing: {', '.join(failing)}" if failing else ""))
    assert ok, failing


# ---------------------------------------------------------------------------
# 9: configuration variants
# ---------------------------------------------------------------------------

VARIANTS = ("fpn", "c4", "v4")


def variant_config(name: str) -> RunConfig:
    cfg = RunConfig()
    if name == "c4":
        cfg = c4_variant(cfg)
    if name == "v4":
        cfg = dataclasses.replace(cfg, views=dataclasses.replace(cfg.views, v4_enabled=True))
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, steps=4, checkpoint_every=2),
                               data=dataclasses.replace(cfg.data, n_images=16))


def test_criterion_9_variants(tmp_path):
    lines, all_ok = [], True
    rng = np.random.default_rng(9)
    for name in VARIANTS:
        micro = micro_config("c4" if name == "c4" else "fpn", v4=(name == "v4"))
        fn, params = micro_model_case(rng, micro)
        grad = gradcheck(fn, params, tolerance=1e-4, max_elements=6, name=name)
        n_views = 2 + micro.views.use_v3 + micro.views.v4_enabled
        algebra_ok, _ = loss_algebra(n_views - 1, rng)
        cfg = variant_config(name)
        samples = smoke_samples(tmp_path / name / "data", cfg)
        train_loop(samples, cfg, tmp_path / name / "a")
        train_loop(samples, cfg, tmp_path / name / "b")
        same = (tmp_path / name / "a" / "metrics.jsonl").read_bytes() == \
            (tmp_path / name / "b" / "metrics.jsonl").read_bytes()
        ok = grad.passed and algebra_ok and same
        all_ok &= ok
        lines.append(f"{name}: gradcheck {grad.max_error:.1e}, loss algebra {algebra_ok}, "
                     f"deterministic {same}")
    report(9, all_ok, "; ".join(lines))
    assert all_ok
