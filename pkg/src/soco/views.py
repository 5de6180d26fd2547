"""Multi-view construction with exact box correspondence, plus photometric augmentation.

View images are CHW float arrays in [0, 1].  A ``ViewTransform`` maps
original-image coordinates into view coordinates: translate by the crop
origin, scale to the output size, then optionally mirror horizontally.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.color import hsv2rgb, rgb2hsv

from soco.config import AugConfig, ViewConfig
from soco.errors import InvalidInputError
from soco.proposals import BBox, jitter_box

LUMA = np.array([0.299, 0.587, 0.114])
CONTAIN_TOL = 1e-9


@dataclass(frozen=True)
class ViewTransform:
    crop_origin: tuple[float, float]
    crop_size: tuple[float, float]
    out_size: tuple[float, float]
    hflip: bool = False

    def __post_init__(self):
        if min(self.crop_size) <= 0 or min(self.out_size) <= 0:
            raise InvalidInputError("crop and output sizes must be positive")

    @classmethod
    def identity(cls, width: float, height: float) -> "ViewTransform":
        return cls((0.0, 0.0), (width, height), (width, height))

    @property
    def scale(self) -> tuple[float, float]:
        return (self.out_size[0] / self.crop_size[0], self.out_size[1] / self.crop_size[1])

    def affine(self) -> tuple[float, float, float, float]:
        """(ax, cx, ay, cy) such that u = ax*x + cx and v = ay*y + cy."""
        sx, sy = self.scale
        ax, cx = sx, -sx * self.crop_origin[0]
        if self.hflip:
            ax, cx = -ax, self.out_size[0] - cx
        return ax, cx, sy, -sy * self.crop_origin[1]

    def then(self, inner: "ViewTransform") -> "ViewTransform":
        """Transform equivalent to applying ``self`` and then ``inner``.

        ``inner`` is expressed in this transform's output coordinates.
        """
        ax1, cx1, ay1, cy1 = self.affine()
        ax2, cx2, ay2, cy2 = inner.affine()
        ax, cx = ax2 * ax1, ax2 * cx1 + cx2
        ay, cy = ay2 * ay1, ay2 * cy1 + cy2
        out_w, out_h = inner.out_size
        flip = ax < 0
        sx = abs(ax)
        ox = (cx - out_w) / sx if flip else -cx / sx
        oy = -cy / ay
        return ViewTransform((ox, oy), (out_w / sx, out_h / ay), (out_w, out_h), flip)

    def resized(self, out_w: float, out_h: float) -> "ViewTransform":
        return dataclasses.replace(self, out_size=(out_w, out_h))

    def flipped(self) -> "ViewTransform":
        return dataclasses.replace(self, hflip=not self.hflip)


@dataclass
class View:
    image: np.ndarray  # (C, H, W)
    boxes: list[tuple[int, BBox]]
    transform: ViewTransform

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[2], self.image.shape[1]

    @property
    def ids(self) -> list[int]:
        return [i for i, _ in self.boxes]


def map_box(box: BBox, t: ViewTransform) -> BBox:
    """Apply the affine part of ``t`` to a box without any containment test."""
    ax, cx, ay, cy = t.affine()
    return BBox(ax * box.x + cx, ay * box.y + cy, abs(ax) * box.w, ay * box.h)


def clip_box(box: BBox, width: float, height: float) -> BBox | None:
    x0, y0, x1, y1 = box.corners
    x0, y0 = max(x0, 0.0), max(y0, 0.0)
    x1, y1 = min(x1, width), min(y1, height)
    if x1 <= x0 or y1 <= y0:
        return None
    return BBox.from_corners(x0, y0, x1, y1)


def transform_box(box: BBox, t: ViewTransform, clip: bool = False) -> BBox | None:
    """Map a source box into the view; ``None`` means dropped.

    By default a box survives only if it lies fully inside the view.  With
    ``clip`` a box whose centre is inside the view is kept and clipped to it.
    """
    out = map_box(box, t)
    w, h = t.out_size
    x0, y0, x1, y1 = out.corners
    tol = CONTAIN_TOL * max(w, h, 1.0)
    inside = x0 >= -tol and y0 >= -tol and x1 <= w + tol and y1 <= h + tol
    if inside:
        if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
            out = clip_box(out, w, h)
        return out
    if clip and 0 <= out.x <= w and 0 <= out.y <= h:
        return clip_box(out, w, h)
    return None


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def resize_image(image: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize of a CHW image using pixel-centre sampling."""
    _, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ry, rx = _interp_matrix(h, out_h), _interp_matrix(w, out_w)
    return np.einsum("oh,chw,pw->cop", ry, image, rx, optimize=True)


def sample_crop(rng: np.random.Generator, width: int, height: int,
                scale: tuple[float, float], ratio: tuple[float, float]) -> tuple[int, int, int, int]:
    """Integer crop (x0, y0, w, h) with area fraction in ``scale`` and aspect in ``ratio``.

    The size is clamped to the frame instead of rejection-sampled.
    """
    area = rng.uniform(*scale) * width * height
    aspect = rng.uniform(*ratio)
    cw = int(round(min(max(math.sqrt(area * aspect), 1.0), width)))
    ch = int(round(min(max(math.sqrt(area / aspect), 1.0), height)))
    x0 = int(rng.integers(0, width - cw + 1))
    y0 = int(rng.integers(0, height - ch + 1))
    return x0, y0, cw, ch


def _project(boxes: list[BBox], t: ViewTransform, clip: bool) -> dict[int, BBox]:
    out = {}
    for i, b in enumerate(boxes):
        mapped = transform_box(b, t, clip=clip)
        if mapped is not None:
            out[i] = mapped
    return out


def build_views(image: np.ndarray, boxes: list[BBox], cfg: ViewConfig, rng: np.random.Generator,
                jitter_prob: float = 0.5, jitter_range: float = 0.1,
                jitter_shared: bool = False) -> dict[str, View]:
    """Construct V1, V2, V3 (if enabled) and V4 (if enabled) for one image.

    ``image`` is CHW in original resolution and ``boxes`` are the sampled
    proposals in original coordinates; proposal ids are list positions.
    Only ids that survive in every constructed view are kept.  Jitter is
    drawn per view after projection and the result clipped to the view;
    V3 inherits V2's boxes scaled, since it is a pure downsample of V2.
    """
    _, src_h, src_w = image.shape
    s1 = cfg.v1_size
    t1 = ViewTransform((0.0, 0.0), (float(src_w), float(src_h)), (float(s1), float(s1)))
    v1_img = resize_image(image, s1, s1)
    v1_boxes = _project(boxes, t1, cfg.clip_partial)

    crop_views = ["v2"] + (["v4"] if cfg.v4_enabled else [])
    out_sizes = {"v2": s1, "v4": cfg.v4_size}
    for _ in range(cfg.max_crop_retries):
        crops = {name: sample_crop(rng, s1, s1, cfg.crop_scale, cfg.crop_ratio) for name in crop_views}
        projected, common = _crop_projections(crops, t1, out_sizes, boxes, cfg.clip_partial, v1_boxes)
        if common:
            break
    else:
        crops = {name: (0, 0, s1, s1) for name in crop_views}
        projected, common = _crop_projections(crops, t1, out_sizes, boxes, cfg.clip_partial, v1_boxes)

    def jittered(view_boxes: dict[int, BBox], w: float, h: float) -> list[tuple[int, BBox]]:
        out = []
        for i in common:
            b = jitter_box(view_boxes[i], rng, jitter_prob, jitter_range, jitter_shared)
            out.append((i, clip_box(b, w, h) or view_boxes[i]))
        return out

    views = {"v1": View(v1_img, jittered(v1_boxes, s1, s1), t1)}
    for name in crop_views:
        x0, y0, cw, ch = crops[name]
        t, _ = projected[name]
        size = out_sizes[name]
        img = resize_image(v1_img[:, y0:y0 + ch, x0:x0 + cw], size, size)
        views[name] = View(img, jittered(projected[name][1], size, size), t)
        if name == "v2" and cfg.use_v3:
            s3 = cfg.v3_size
            f = s3 / size
            views["v3"] = View(resize_image(img, s3, s3),
                               [(i, b.scaled(f)) for i, b in views["v2"].boxes],
                               t.resized(float(s3), float(s3)))
    order = ["v1", "v2", "v3", "v4"]
    return {k: views[k] for k in order if k in views}


def _crop_projections(crops, t1, out_sizes, boxes, clip, v1_boxes):
    projected = {}
    common = set(v1_boxes)
    for name, (x0, y0, cw, ch) in crops.items():
        size = float(out_sizes[name])
        t = t1.then(ViewTransform((float(x0), float(y0)), (float(cw), float(ch)), (size, size)))
        mapped = _project(boxes, t, clip)
        projected[name] = (t, mapped)
        common &= set(mapped)
    return projected, sorted(common)


# ---------------------------------------------------------------------------
# photometric augmentation
# ---------------------------------------------------------------------------

def grayscale(image: np.ndarray) -> np.ndarray:
    gray = np.tensordot(LUMA, image, axes=(0, 0))
    return np.broadcast_to(gray, image.shape).copy()


def solarize(image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.where(image >= threshold, 1.0 - image, image)


def adjust_hue(image: np.ndarray, shift: float) -> np.ndarray:
    hsv = rgb2hsv(image.transpose(1, 2, 0))
    hsv[..., 0] = np.mod(hsv[..., 0] + shift, 1.0)
    return hsv2rgb(hsv).transpose(2, 0, 1)


def color_jitter(image: np.ndarray, rng: np.random.Generator, aug: AugConfig) -> np.ndarray:
    """Brightness, contrast, saturation and hue adjustments in random order."""
    img = image
    for op in rng.permutation(4):
        if op == 0 and aug.brightness > 0:
            f = rng.uniform(max(0.0, 1 - aug.brightness), 1 + aug.brightness)
            img = np.clip(img * f, 0.0, 1.0)
        elif op == 1 and aug.contrast > 0:
            f = rng.uniform(max(0.0, 1 - aug.contrast), 1 + aug.contrast)
            mean = float(np.tensordot(LUMA, img, axes=(0, 0)).mean())
            img = np.clip(f * img + (1 - f) * mean, 0.0, 1.0)
        elif op == 2 and aug.saturation > 0:
            f = rng.uniform(max(0.0, 1 - aug.saturation), 1 + aug.saturation)
            img = np.clip(f * img + (1 - f) * grayscale(img), 0.0, 1.0)
        elif op == 3 and aug.hue > 0:
            img = np.clip(adjust_hue(img, rng.uniform(-aug.hue, aug.hue)), 0.0, 1.0)
    return img


def augment(view: View, rng: np.random.Generator, aug: AugConfig) -> View:
    """Random flip, colour jitter, grayscale, blur and solarize, in that order.

    A flip mirrors the view's boxes and is recorded in its transform, so box
    correspondence with the other views is preserved.  The image shape never
    changes and values stay in [0, 1].
    """
    img = view.image
    boxes = view.boxes
    transform = view.transform
    width = img.shape[2]
    if rng.random() < aug.hflip_prob:
        img = img[:, :, ::-1].copy()
        boxes = [(i, BBox(width - b.x, b.y, b.w, b.h)) for i, b in boxes]
        transform = transform.flipped()
    if rng.random() < aug.color_jitter_prob:
        img = color_jitter(img, rng, aug)
    if rng.random() < aug.grayscale_prob:
        img = grayscale(img)
    if rng.random() < aug.blur_prob:
        sigma = rng.uniform(*aug.blur_sigma)
        img = ndimage.gaussian_filter(img, sigma=(0.0, sigma, sigma), mode="reflect")
    if rng.random() < aug.solarize_prob:
        img = solarize(img, aug.solarize_threshold)
    return View(np.clip(img, 0.0, 1.0), boxes, transform)
