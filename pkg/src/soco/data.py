"""Synthetic scenes: a few flat or graded shapes on a faintly textured background."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from soco.config import DataConfig
from soco.errors import InvalidInputError
from soco.proposals import BBox, iou, passes_filter

# Shape sizes as a fraction of the frame side (sqrt of the area ratio).
REL_SIZE = (0.32, 0.55)
ASPECT = (0.5, 2.0)
MIN_COLOR_GAP = 0.35
MAX_PLACEMENT_TRIES = 200


@dataclass
class Shape:
    kind: str  # "rect" or "ellipse"
    fill: str  # "solid" or "gradient"
    color: tuple[float, float, float]
    color2: tuple[float, float, float]
    bbox: BBox


@dataclass
class SyntheticScene:
    image: np.ndarray  # HWC float in [0, 1]
    shapes: list[Shape]
    background: tuple[float, float, float]


def _texture(rng: np.random.Generator, size: int, base: np.ndarray, contrast: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(3.0, 3.0, 0.0))
    noise /= max(np.abs(noise).max(), 1e-12)
    return np.clip(base + contrast * noise, 0.0, 1.0)


def _shape_mask(kind: str, box: BBox, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    x0, y0, x1, y1 = box.corners
    if kind == "rect":
        return (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
    return ((xx - box.x) / (box.w / 2)) ** 2 + ((yy - box.y) / (box.h / 2)) ** 2 <= 1.0


def _far_color(rng: np.random.Generator, avoid: list[np.ndarray]) -> np.ndarray:
    best, best_gap = None, -1.0
    for _ in range(50):
        c = rng.uniform(0.0, 1.0, size=3)
        gap = min(float(np.linalg.norm(c - a)) for a in avoid) if avoid else np.inf
        if gap >= MIN_COLOR_GAP:
            return c
        if gap > best_gap:
            best, best_gap = c, gap
    return best


def _place_box(rng: np.random.Generator, size: int) -> BBox:
    rel = rng.uniform(*REL_SIZE)
    aspect = np.exp(rng.uniform(np.log(ASPECT[0]), np.log(ASPECT[1])))
    side = rel * size
    w = min(side * np.sqrt(aspect), size - 2.0)
    h = min(side / np.sqrt(aspect), size - 2.0)
    w, h = float(round(w)), float(round(h))
    x0 = float(rng.integers(0, int(size - w) + 1))
    y0 = float(rng.integers(0, int(size - h) + 1))
    return BBox.from_corners(x0, y0, x0 + w, y0 + h)


def make_scene(rng: np.random.Generator, cfg: DataConfig) -> SyntheticScene:
    """One scene whose shape boxes all pass the proposal filter and overlap at most ``iou_cap``."""
    size = cfg.image_size
    n_shapes = int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
    bg = rng.uniform(0.15, 0.85, size=3)
    image = _texture(rng, size, bg, cfg.background_contrast)
    boxes: list[BBox] = []
    for _ in range(MAX_PLACEMENT_TRIES):
        if len(boxes) == n_shapes:
            break
        box = _place_box(rng, size)
        if not passes_filter(box, size, size):
            continue
        if all(iou(box, other) <= cfg.iou_cap for other in boxes):
            boxes.append(box)
    shapes = []
    colors = [bg]
    for box in boxes:
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        fill = "solid" if rng.random() < 0.5 else "gradient"
        c1 = _far_color(rng, colors)
        c2 = np.clip(c1 + rng.uniform(-0.2, 0.2, size=3), 0.0, 1.0) if fill == "gradient" else c1
        colors.append(c1)
        mask = _shape_mask(kind, box, size)
        if fill == "solid":
            image[mask] = c1
        else:
            x0, _, x1, _ = box.corners
            t = np.clip((np.arange(size) + 0.5 - x0) / max(x1 - x0, 1.0), 0.0, 1.0)
            ramp = c1[None, :] * (1 - t[:, None]) + c2[None, :] * t[:, None]
            image[mask] = np.broadcast_to(ramp[None], (size, size, 3))[mask]
        shapes.append(Shape(kind, fill, tuple(map(float, c1)), tuple(map(float, c2)), box))
    return SyntheticScene(np.clip(image, 0.0, 1.0), shapes, tuple(map(float, bg)))


def make_rectangles_scene(rng: np.random.Generator, size: int = 128, n: int = 3,
                          gap: int = 6) -> SyntheticScene:
    """``n`` solid, non-touching rectangles on a plain background of contrasting colour."""
    bg = rng.uniform(0.0, 1.0, size=3)
    image = np.broadcast_to(bg, (size, size, 3)).copy()
    boxes: list[tuple[int, int, int, int]] = []
    while len(boxes) < n:
        w, h = (int(v) for v in rng.integers(size // 6, size // 3, size=2))
        x0, y0 = int(rng.integers(0, size - w)), int(rng.integers(0, size - h))
        cand = (x0, y0, x0 + w, y0 + h)
        if all(cand[0] >= b[2] + gap or b[0] >= cand[2] + gap or
               cand[1] >= b[3] + gap or b[1] >= cand[3] + gap for b in boxes):
            boxes.append(cand)
    shapes = []
    colors = [bg]
    for x0, y0, x1, y1 in boxes:
        c = _far_color(rng, colors)
        colors.append(c)
        image[y0:y1, x0:x1] = c
        shapes.append(Shape("rect", "solid", tuple(map(float, c)), tuple(map(float, c)),
                            BBox.from_corners(x0, y0, x1, y1)))
    return SyntheticScene(image, shapes, tuple(map(float, bg)))


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False)


def load_image(path: str | Path) -> np.ndarray:
    """RGB image as HWC float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def gen_data(out_dir: str | Path, n_images: int, cfg: DataConfig, seed: int) -> list[dict]:
    """Render ``n_images`` scenes as PNGs plus a ``manifest.json`` of true boxes."""
    if n_images < 1:
        raise InvalidInputError("n_images must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_images):
        scene = make_scene(np.random.default_rng([seed, i]), cfg)
        image_id = f"img_{i:05d}"
        save_png(out / f"{image_id}.png", scene.image)
        shapes = []
        for s in scene.shapes:
            d = asdict(s)
            d["bbox"] = list(s.bbox)
            shapes.append(d)
        records.append({"image_id": image_id, "file": f"{image_id}.png", "width": cfg.image_size,
                        "height": cfg.image_size, "shapes": shapes})
    (out / "manifest.json").write_text(json.dumps({"seed": seed, "images": records}, indent=1))
    return records
