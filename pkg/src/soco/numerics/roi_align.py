"""RoIAlign as a sparse linear map from feature cells to pooled bins.

Sampling follows the half-pixel ("aligned") convention: feature cell ``i``
is centred at continuous coordinate ``i + 0.5``, so a box's image-pixel
corners are divided by the stride and shifted by -0.5 before bilinear
sampling.  Out-of-range handling matches the usual detection kernels:
samples further than one cell outside the map contribute zero, samples
between -1 and 0 are clamped onto the border.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from soco.errors import InvalidInputError
from soco.numerics.tensor import Tensor, as_tensor, make_node

MIN_BOX_SIZE = 1e-6


def _axis_weights(start: np.ndarray, size: np.ndarray, length: int, out: int, ratio: int):
    """Per-sample low/high indices and weights along one axis.

    ``start``/``size`` have shape (R,); results have shape (R, out * ratio).
    """
    offsets = (np.arange(out)[:, None] + (np.arange(ratio)[None, :] + 0.5) / ratio).reshape(-1)
    coords = start[:, None] + offsets[None, :] * (size[:, None] / out)
    valid = (coords >= -1.0) & (coords <= length)
    coords = np.clip(coords, 0.0, None)
    low = np.floor(coords).astype(np.int64)
    at_edge = low >= length - 1
    low = np.where(at_edge, length - 1, low)
    high = np.where(at_edge, length - 1, low + 1)
    coords = np.where(at_edge, low.astype(np.float64), coords)
    frac = coords - low
    return low, high, 1.0 - frac, frac, valid


def roi_align_matrix(boxes, height: int, width: int, stride: float,
                     output_size: int = 7, sampling_ratio: int = 2) -> sp.csr_matrix:
    """Sparse matrix M of shape (R*P*P, H*W) with pooled = M @ feature_cells.

    ``boxes`` is an (R, 4) array-like of centre-format (x, y, w, h) boxes in
    image pixels.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if np.any(boxes[:, 2] < MIN_BOX_SIZE) or np.any(boxes[:, 3] < MIN_BOX_SIZE):
        raise InvalidInputError("roi_align: degenerate box (w or h < 1e-6)")
    if stride <= 0 or output_size < 1 or sampling_ratio < 1:
        raise InvalidInputError("roi_align: stride, output_size and sampling_ratio must be positive")
    p, s = output_size, sampling_ratio
    r = boxes.shape[0]
    x0 = (boxes[:, 0] - boxes[:, 2] / 2) / stride - 0.5
    y0 = (boxes[:, 1] - boxes[:, 3] / 2) / stride - 0.5
    bw = boxes[:, 2] / stride
    bh = boxes[:, 3] / stride

    ylo, yhi, wyl, wyh, vy = _axis_weights(y0, bh, height, p, s)
    xlo, xhi, wxl, wxh, vx = _axis_weights(x0, bw, width, p, s)

    # Broadcast to (R, P, s, P, s) = (box, bin_y, sample_y, bin_x, sample_x).
    def ygrid(a):
        return a.reshape(r, p, s, 1, 1)

    def xgrid(a):
        return a.reshape(r, 1, 1, p, s)

    shape = (r, p, s, p, s)
    row = (np.arange(r)[:, None, None, None, None] * p * p
           + np.arange(p)[None, :, None, None, None] * p
           + np.arange(p)[None, None, None, :, None])
    row = np.broadcast_to(row, shape)
    valid = ygrid(vy) & xgrid(vx)
    norm = 1.0 / (s * s)

    rows, cols, vals = [], [], []
    for yi, wy in ((ylo, wyl), (yhi, wyh)):
        for xi, wx in ((xlo, wxl), (xhi, wxh)):
            col = np.broadcast_to(ygrid(yi) * width + xgrid(xi), shape)
            val = np.broadcast_to(ygrid(wy) * xgrid(wx) * norm, shape) * valid
            rows.append(row.reshape(-1))
            cols.append(col.reshape(-1))
            vals.append(val.reshape(-1))
    m = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(r * p * p, height * width))
    return m.tocsr()


def roi_align(feature, boxes, stride: float, output_size: int = 7, sampling_ratio: int = 2) -> Tensor:
    """Pool each box from a (C, H, W) feature map into a (R, C, P, P) tensor.

    Differentiable with respect to ``feature``; box coordinates are treated
    as constants.
    """
    feature = as_tensor(feature)
    if feature.ndim != 3:
        raise InvalidInputError(f"roi_align: feature must be (C, H, W), got {feature.shape}")
    c, h, w = feature.shape
    m = roi_align_matrix(boxes, h, w, stride, output_size, sampling_ratio)
    p = output_size
    r = m.shape[0] // (p * p)
    cells = feature.data.reshape(c, h * w).T
    out = np.asarray(m @ cells).reshape(r, p, p, c).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(r * p * p, c)
        return (np.asarray(m.T @ g2).T.reshape(c, h, w),)

    return make_node(np.ascontiguousarray(out), (feature,), back, "roi_align")
