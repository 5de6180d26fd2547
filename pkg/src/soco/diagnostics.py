"""Gradient-check suite over every differentiable op and a micro end-to-end model."""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from soco.config import ModelConfig, RunConfig, ViewConfig
from soco.network import init_params, object_embed, pad_to_stride, target_subtree
from soco.numerics import GradcheckReport, gradcheck, ops, roi_align
from soco.proposals import BBox
from soco.training import symmetrized_loss

TOLERANCE = 1e-4
MODEL_ELEMENTS = 6  # finite-difference probes per parameter tensor of the micro model


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _distinct(rng, shape):
    """Values with pairwise gaps far above the finite-difference step (for max-pool)."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.01 + rng.uniform(0, 1e-3, size=shape))


def random_boxes(rng: np.random.Generator, n: int, height: int, width: int, stride: float) -> list[BBox]:
    """Boxes in image pixels covering a random part of a ``height x width`` map at ``stride``."""
    boxes = []
    H, W = height * stride, width * stride
    for _ in range(n):
        w = rng.uniform(0.15, 0.9) * W
        h = rng.uniform(0.15, 0.9) * H
        boxes.append(BBox(rng.uniform(w / 2, W - w / 2), rng.uniform(h / 2, H - h / 2), w, h))
    return boxes


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, dict]]:
    """(name, fn, inputs) for each differentiable op."""
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    row = rng.standard_normal((1, 4))
    feat = rng.standard_normal((2, 3, 6, 6))
    boxes = random_boxes(rng, 5, 6, 6, 4.0)
    cases = [
        ("add", lambda t: ops.add(t["a"], t["b"]), {"a": a, "b": row}),
        ("sub", lambda t: ops.sub(t["a"], t["b"]), {"a": a, "b": b}),
        ("mul", lambda t: ops.mul(t["a"], t["b"]), {"a": a, "b": row}),
        ("scale", lambda t: ops.scale(t["a"], -1.7), {"a": a}),
        ("add_scalar", lambda t: ops.add_scalar(t["a"], 0.3), {"a": a}),
        ("sum", lambda t: ops.sum(t["a"], axis=1), {"a": a}),
        ("mean", lambda t: ops.mean(t["a"], axis=0, keepdims=True), {"a": a}),
        ("relu", lambda t: ops.relu(t["a"]), {"a": _away_from_zero(rng, (4, 5))}),
        ("reshape", lambda t: ops.reshape(t["a"], (2, 6)), {"a": a}),
        ("flatten", lambda t: ops.flatten(t["a"]), {"a": feat}),
        ("concat", lambda t: ops.concat([t["a"], t["b"]], axis=0), {"a": a, "b": row}),
        ("take", lambda t: ops.take(t["a"], 1), {"a": feat}),
        ("gather_rows", lambda t: ops.gather_rows(t["a"], [2, 0, 2, 1]), {"a": a}),
        ("l2_normalize", lambda t: ops.l2_normalize(t["a"], axis=1), {"a": a}),
        ("linear", lambda t: ops.linear(t["x"], t["w"], t["b"]),
         {"x": a, "w": rng.standard_normal((5, 4)), "b": rng.standard_normal(5)}),
        ("conv2d", lambda t: ops.conv2d(t["x"], t["w"], t["b"], stride=1, padding=1),
         {"x": feat, "w": rng.standard_normal((4, 3, 3, 3)), "b": rng.standard_normal(4)}),
        ("conv2d_stride2", lambda t: ops.conv2d(t["x"], t["w"], stride=2, padding=1),
         {"x": feat, "w": rng.standard_normal((2, 3, 3, 3))}),
        ("conv2d_1x1", lambda t: ops.conv2d(t["x"], t["w"], stride=2),
         {"x": feat, "w": rng.standard_normal((2, 3, 1, 1))}),
        ("max_pool2d", lambda t: ops.max_pool2d(t["x"]), {"x": _distinct(rng, (2, 3, 6, 6))}),
        ("upsample_nearest2x", lambda t: ops.upsample_nearest2x(t["x"]), {"x": feat}),
        ("global_avg_pool", lambda t: ops.global_avg_pool(t["x"]), {"x": feat}),
        ("batch_norm_train_2d", lambda t: ops.batch_norm(t["x"], t["g"], t["b"]),
         {"x": rng.standard_normal((6, 4)), "g": rng.uniform(0.5, 1.5, 4), "b": rng.standard_normal(4)}),
        ("batch_norm_train_4d", lambda t: ops.batch_norm(t["x"], t["g"], t["b"]),
         {"x": feat, "g": rng.uniform(0.5, 1.5, 3), "b": rng.standard_normal(3)}),
        ("batch_norm_eval", lambda t: ops.batch_norm(t["x"], t["g"], t["b"], np.full(3, 0.2),
                                                     np.full(3, 1.3), training=False),
         {"x": feat, "g": rng.uniform(0.5, 1.5, 3), "b": rng.standard_normal(3)}),
        ("roi_align", lambda t: roi_align(t["f"], boxes, 4.0, 7, 2), {"f": feat[0]}),
    ]
    return cases


def micro_config(mode: str = "fpn", v4: bool = False) -> RunConfig:
    model = ModelConfig(mode=mode, widths=(2, 3, 3, 4), fpn_dim=2, head_dim=4, roi_size=2,
                        c4_roi_size=4, proj_hidden=5, proj_dim=3)
    views = ViewConfig(v1_size=64, v3_size=48, use_v3=(mode == "fpn"), v4_enabled=v4, v4_size=64)
    return dataclasses.replace(RunConfig(), model=model, views=views)


# Square sides landing on levels 2, 3, 4 and 5.
LEVEL_SIDES = (40.0, 70.0, 140.0, 210.0)
LEVEL_VIEW = 224


def micro_model_case(rng: np.random.Generator, cfg: RunConfig):
    """Symmetrised loss of a 2-image, 2-proposal batch as a function of theta."""
    params, _ = init_params(cfg.model, rng)
    xi = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in target_subtree(params).items()}
    names = ["v1", "v2"] + (["v3"] if cfg.views.use_v3 else []) + (["v4"] if cfg.views.v4_enabled else [])
    sizes = {"v1": cfg.views.v1_size, "v2": cfg.views.v1_size, "v3": cfg.views.v3_size,
             "v4": cfg.views.v4_size}
    views = {}
    for name in names:
        s = sizes[name]
        if name == "v2" and cfg.model.mode == "fpn":
            # One large view whose boxes reach every pyramid level.
            s = LEVEL_VIEW
            bxs = [[BBox(s / 2 + rng.uniform(-4, 4), s / 2 + rng.uniform(-4, 4), side, side)
                    for side in LEVEL_SIDES[2 * n:2 * n + 2]] for n in range(2)]
        else:
            bxs = [[BBox(s * rng.uniform(0.4, 0.6), s * rng.uniform(0.4, 0.6), s * 0.25 * (1 + j + n),
                         s * 0.3 * (1 + j)) for j in range(2)] for n in range(2)]
        imgs = pad_to_stride(rng.uniform(0, 1, (2, 3, s, s)))
        views[name] = (imgs, bxs)
    image_of_row = np.array([0, 0, 1, 1])
    target = {n: object_embed(xi, views[n][0], views[n][1], cfg.model, "target")[0].data for n in names}

    def fn(t):
        online = {n: object_embed(t, views[n][0], views[n][1], cfg.model, "online")[0] for n in names}
        return symmetrized_loss(online, target, image_of_row, 2).loss

    return fn, params


def run_suite(seed: int = 0, tolerance: float = TOLERANCE, include_model: bool = True,
              model_variants: tuple[str, ...] = ("fpn",)) -> list[GradcheckReport]:
    rng = np.random.default_rng([seed, 0x6C])
    reports = []
    for name, fn, inputs in op_cases(rng):
        reports.append(gradcheck(fn, inputs, tolerance=tolerance, seed=seed, name=name))
    if include_model:
        for variant in model_variants:
            cfg = micro_config("c4" if variant == "c4" else "fpn", v4=(variant == "v4"))
            fn, params = micro_model_case(rng, cfg)
            reports.append(gradcheck(fn, params, tolerance=tolerance, seed=seed, max_elements=MODEL_ELEMENTS,
                                     name=f"micro_model_{variant}"))
    return reports
