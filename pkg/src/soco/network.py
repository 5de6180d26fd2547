"""The object-level encoder: residual backbone, FPN, RoI head, projector and predictor.

Parameters live in flat ``{dotted.name: ndarray}`` dicts so they can be
EMA-blended, optimised and serialised without any module machinery.
Forward functions take ``{name: Tensor}`` views of those dicts; online
passes use gradient-tracking leaves, target passes plain constants.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from soco.config import ModelConfig
from soco.errors import InvalidInputError
from soco.numerics import Tensor, constant, no_grad, ops, parameter
from soco.numerics.roi_align import roi_align
from soco.proposals import BBox

LEVELS = (2, 3, 4, 5)
STRIDES = {2: 4, 3: 8, 4: 16, 5: 32}
# Upper area bound (inclusive) per pyramid level; anything larger goes to P5.
LEVEL_AREA_BOUNDS = ((2, 48 ** 2), (3, 96 ** 2), (4, 192 ** 2))
MAX_PROPOSAL_AREA = 224 ** 2

Params = dict[str, np.ndarray]


def pad_to_stride(images: np.ndarray, multiple: int = 32) -> np.ndarray:
    """Zero-pad an (N, C, H, W) batch on the bottom/right up to a multiple of ``multiple``.

    Box coordinates are unaffected because the origin does not move, so a
    112-pixel view can ride through a backbone that needs 32-divisible input.
    """
    h, w = images.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if not ph and not pw:
        return images
    pad = [(0, 0)] * (images.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(images, pad)


def assign_level(box: BBox) -> int:
    """Pyramid level for a box by its area in the view's own pixels."""
    area = box.w * box.h
    for level, bound in LEVEL_AREA_BOUNDS:
        if area <= bound:
            return level
    return 5


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def _conv_init(rng, out_c, in_c, k):
    std = np.sqrt(2.0 / (in_c * k * k))
    return rng.standard_normal((out_c, in_c, k, k)) * std


def _linear_init(rng, out_f, in_f):
    bound = 1.0 / np.sqrt(in_f)
    return rng.uniform(-bound, bound, size=(out_f, in_f)), rng.uniform(-bound, bound, size=out_f)


def _add_bn(params: Params, buffers: Params, name: str, c: int) -> None:
    params[f"{name}.weight"] = np.ones(c)
    params[f"{name}.bias"] = np.zeros(c)
    buffers[f"{name}.running_mean"] = np.zeros(c)
    buffers[f"{name}.running_var"] = np.ones(c)


def _add_res_block(params, buffers, rng, name, in_c, out_c, stride):
    params[f"{name}.conv1.weight"] = _conv_init(rng, out_c, in_c, 3)
    _add_bn(params, buffers, f"{name}.bn1", out_c)
    params[f"{name}.conv2.weight"] = _conv_init(rng, out_c, out_c, 3)
    _add_bn(params, buffers, f"{name}.bn2", out_c)
    if stride != 1 or in_c != out_c:
        params[f"{name}.down.conv.weight"] = _conv_init(rng, out_c, in_c, 1)
        _add_bn(params, buffers, f"{name}.down.bn", out_c)


def _add_mlp(params, buffers, rng, name, in_f, hidden, out_f):
    params[f"{name}.fc1.weight"], params[f"{name}.fc1.bias"] = _linear_init(rng, hidden, in_f)
    _add_bn(params, buffers, f"{name}.bn", hidden)
    params[f"{name}.fc2.weight"], params[f"{name}.fc2.bias"] = _linear_init(rng, out_f, hidden)


def head_output_dim(cfg: ModelConfig) -> int:
    return cfg.widths[3] if cfg.mode == "c4" else cfg.head_dim


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> tuple[Params, Params]:
    """Fresh online parameters and batch-norm running statistics."""
    if cfg.mode not in ("fpn", "c4"):
        raise InvalidInputError(f"unknown model mode {cfg.mode!r}")
    params: Params = {}
    buffers: Params = {}
    w2, w3, w4, w5 = cfg.widths
    params["backbone.stem.conv.weight"] = _conv_init(rng, w2, 3, 3)
    _add_bn(params, buffers, "backbone.stem.bn", w2)
    _add_res_block(params, buffers, rng, "backbone.res2", w2, w2, 1)
    _add_res_block(params, buffers, rng, "backbone.res3", w2, w3, 2)
    _add_res_block(params, buffers, rng, "backbone.res4", w3, w4, 2)
    if cfg.mode == "fpn":
        _add_res_block(params, buffers, rng, "backbone.res5", w4, w5, 2)
        d = cfg.fpn_dim
        for level, c in zip(LEVELS, cfg.widths):
            params[f"fpn.lateral{level}.weight"] = _conv_init(rng, d, c, 1)
            params[f"fpn.smooth{level}.weight"] = _conv_init(rng, d, d, 3)
            if cfg.fpn_bias:
                params[f"fpn.lateral{level}.bias"] = np.zeros(d)
                params[f"fpn.smooth{level}.bias"] = np.zeros(d)
        roi_feat = d * cfg.roi_size * cfg.roi_size
        params["head.fc1.weight"], params["head.fc1.bias"] = _linear_init(rng, cfg.head_dim, roi_feat)
        params["head.fc2.weight"], params["head.fc2.bias"] = _linear_init(rng, cfg.head_dim, cfg.head_dim)
    else:
        _add_res_block(params, buffers, rng, "head.res5", w4, w5, 2)
    h = head_output_dim(cfg)
    _add_mlp(params, buffers, rng, "projector", h, cfg.proj_hidden, cfg.proj_dim)
    _add_mlp(params, buffers, rng, "predictor", cfg.proj_dim, cfg.proj_hidden, cfg.proj_dim)
    return params, buffers


def target_subtree(params: Mapping[str, np.ndarray]) -> Params:
    """Copy of everything the target network carries (all but the predictor)."""
    return {k: v.copy() for k, v in params.items() if not k.startswith("predictor.")}


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

class Net:
    """Binds a parameter view, running statistics and mode for one forward pass.

    ``buffers=None`` evaluates batch norm with batch moments but leaves no
    trace, which is how the target branch runs.
    """

    def __init__(self, params: Mapping[str, Tensor], cfg: ModelConfig,
                 buffers: Params | None = None, training: bool = True):
        self.p = params
        self.cfg = cfg
        self.buffers = buffers
        self.training = training

    def bn(self, name: str, x: Tensor) -> Tensor:
        rm = rv = None
        if self.buffers is not None:
            rm = self.buffers[f"{name}.running_mean"]
            rv = self.buffers[f"{name}.running_var"]
        return ops.batch_norm(x, self.p[f"{name}.weight"], self.p[f"{name}.bias"], rm, rv,
                              training=self.training, momentum=self.cfg.bn_momentum)

    def res_block(self, name: str, x: Tensor, stride: int) -> Tensor:
        y = ops.conv2d(x, self.p[f"{name}.conv1.weight"], stride=stride, padding=1)
        y = ops.relu(self.bn(f"{name}.bn1", y))
        y = ops.conv2d(y, self.p[f"{name}.conv2.weight"], padding=1)
        y = self.bn(f"{name}.bn2", y)
        if f"{name}.down.conv.weight" in self.p:
            x = self.bn(f"{name}.down.bn", ops.conv2d(x, self.p[f"{name}.down.conv.weight"], stride=stride))
        return ops.relu(ops.add(y, x))

    def backbone(self, images) -> dict[int, Tensor]:
        """C2..C5 (C2..C4 in C4 mode) for an (N, 3, H, W) batch."""
        x = images if isinstance(images, Tensor) else constant(images)
        if x.ndim != 4 or x.shape[1] != 3:
            raise InvalidInputError(f"backbone expects (N, 3, H, W), got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise InvalidInputError(f"input size {x.shape[2]}x{x.shape[3]} is not divisible by 32")
        x = ops.conv2d(x, self.p["backbone.stem.conv.weight"], stride=2, padding=1)
        x = ops.max_pool2d(ops.relu(self.bn("backbone.stem.bn", x)))
        feats = {2: self.res_block("backbone.res2", x, 1)}
        feats[3] = self.res_block("backbone.res3", feats[2], 2)
        feats[4] = self.res_block("backbone.res4", feats[3], 2)
        if self.cfg.mode == "fpn":
            feats[5] = self.res_block("backbone.res5", feats[4], 2)
        return feats

    def fpn(self, feats: Mapping[int, Tensor], levels: Sequence[int] = LEVELS) -> dict[int, Tensor]:
        """Pyramid levels P_l for the requested ``levels`` only.

        The top-down sum is built from P5 down to the finest requested level;
        3x3 smoothing runs only where an output is needed.
        """
        if not levels:
            return {}
        p = self.p
        lowest = min(levels)
        top = None
        merged = {}
        for level in (5, 4, 3, 2):
            if level < lowest:
                break
            lat = ops.conv2d(feats[level], p[f"fpn.lateral{level}.weight"], p.get(f"fpn.lateral{level}.bias"))
            top = lat if top is None else ops.add(lat, ops.upsample_nearest2x(top))
            merged[level] = top
        return {lv: ops.conv2d(merged[lv], p[f"fpn.smooth{lv}.weight"], p.get(f"fpn.smooth{lv}.bias"),
                               padding=1)
                for lv in sorted(levels)}

    def pooled_features(self, images, boxes: Sequence[Sequence[BBox]]) -> tuple[Tensor, list[int]]:
        """RoI features in row order ``[(image 0, box 0), (image 0, box 1), ...]``.

        Returns the (R, C, P, P) tensor and the level used per row (4 for
        every row in C4 mode, where no assignment takes place).
        """
        feats = self.backbone(images)
        cfg = self.cfg
        rows = [(n, j, b) for n, bs in enumerate(boxes) for j, b in enumerate(bs)]
        if not rows:
            raise InvalidInputError("no boxes to pool")
        if cfg.mode == "c4":
            levels = [4] * len(rows)
            maps = {4: feats[4]}
            size = cfg.c4_roi_size
        else:
            levels = [assign_level(b) for _, _, b in rows]
            maps = self.fpn(feats, sorted(set(levels)))
            size = cfg.roi_size
        pieces, order = [], []
        for n in range(len(boxes)):
            for level in sorted(maps):
                sel = [r for r, (img, _, _) in enumerate(rows) if img == n and levels[r] == level]
                if not sel:
                    continue
                fmap = ops.take(maps[level], n)
                pieces.append(roi_align(fmap, [rows[r][2] for r in sel], STRIDES[level],
                                        size, cfg.sampling_ratio))
                order.extend(sel)
        pooled = ops.concat(pieces, axis=0)
        inverse = np.empty(len(order), dtype=np.int64)
        inverse[np.asarray(order)] = np.arange(len(order))
        return ops.gather_rows(pooled, inverse), levels

    def head(self, pooled: Tensor) -> Tensor:
        if self.cfg.mode == "c4":
            return ops.global_avg_pool(self.res_block("head.res5", pooled, 2))
        x = ops.flatten(pooled)
        x = ops.relu(ops.linear(x, self.p["head.fc1.weight"], self.p["head.fc1.bias"]))
        return ops.relu(ops.linear(x, self.p["head.fc2.weight"], self.p["head.fc2.bias"]))

    def mlp(self, name: str, x: Tensor) -> Tensor:
        x = ops.linear(x, self.p[f"{name}.fc1.weight"], self.p[f"{name}.fc1.bias"])
        x = ops.relu(self.bn(f"{name}.bn", x))
        return ops.linear(x, self.p[f"{name}.fc2.weight"], self.p[f"{name}.fc2.bias"])

    def embed(self, images, boxes: Sequence[Sequence[BBox]], predictor: bool) -> tuple[Tensor, list[int]]:
        pooled, levels = self.pooled_features(images, boxes)
        z = self.mlp("projector", self.head(pooled))
        if predictor:
            z = self.mlp("predictor", z)
        return z, levels


def leaves(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: parameter(v) for k, v in params.items()}


def constants(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: constant(v) for k, v in params.items()}


def object_embed(params: Mapping[str, Tensor | np.ndarray], images, boxes: Sequence[Sequence[BBox]],
                 cfg: ModelConfig, mode: str = "online", buffers: Params | None = None,
                 training: bool = True) -> tuple[Tensor, list[int]]:
    """Latent embeddings for every box of every image in a same-size view batch.

    ``mode="online"`` applies the predictor and records gradients for any
    tensor leaves in ``params``; ``mode="target"`` stops at the projector,
    records nothing and never touches running statistics.
    """
    if mode not in ("online", "target"):
        raise InvalidInputError(f"mode must be 'online' or 'target', got {mode!r}")
    view = {k: v if isinstance(v, Tensor) else constant(v) for k, v in params.items()}
    if mode == "target":
        with no_grad():
            return Net(view, cfg, None, training).embed(images, boxes, predictor=False)
    return Net(view, cfg, buffers, training).embed(images, boxes, predictor=True)


def backbone_forward(params, images, cfg: ModelConfig, buffers: Params | None = None,
                     training: bool = True) -> dict[int, Tensor]:
    view = {k: v if isinstance(v, Tensor) else constant(v) for k, v in params.items()}
    return Net(view, cfg, buffers, training).backbone(images)


def fpn_forward(params, feats: Mapping[int, Tensor], cfg: ModelConfig) -> dict[int, Tensor]:
    view = {k: v if isinstance(v, Tensor) else constant(v) for k, v in params.items()}
    return Net(view, cfg).fpn(feats)
