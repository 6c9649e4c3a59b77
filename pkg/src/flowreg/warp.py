"""Differentiable spatial transformation and the registration objective.

A displacement field is a (B,2,H,W) tensor in pixel units: channel 0
displaces horizontally (columns), channel 1 vertically (rows).  The warp
bilinearly samples the image at (row + field[1], col + field[0]) with
sample coordinates clamped to the image border, and is differentiable in
both the image and the field.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, concat, custom_op


def bilinear_sample(img: np.ndarray, gx: np.ndarray, gy: np.ndarray):
    """Sample img (B,C,H,W) at column coords gx, row coords gy (B,H,W).

    Returns (out, corners, weights) so the backward pass can reuse the
    gather.  Coordinates are clamped to the border (replicate padding).
    """
    b, c, h, w = img.shape
    gx = np.clip(gx, 0.0, w - 1.0)
    gy = np.clip(gy, 0.0, h - 1.0)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (gx - x0).astype(img.dtype)[:, None]
    wy = (gy - y0).astype(img.dtype)[:, None]

    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    x0e, x1e = x0[:, None], x1[:, None]
    y0e, y1e = y0[:, None], y1[:, None]
    v00 = img[bi, ci, y0e, x0e]
    v01 = img[bi, ci, y0e, x1e]
    v10 = img[bi, ci, y1e, x0e]
    v11 = img[bi, ci, y1e, x1e]

    out = (v00 * (1 - wx) * (1 - wy) + v01 * wx * (1 - wy)
           + v10 * (1 - wx) * wy + v11 * wx * wy)
    corners = (bi, ci, y0e, x0e, y1e, x1e)
    weights = (wx, wy)
    values = (v00, v01, v10, v11)
    return out, corners, weights, values


def warp(img: Tensor, field: Tensor) -> Tensor:
    """out(p) = img sampled at p + field(p), bilinear, border-clamped.

    A zero field is a bitwise identity.  Differentiable w.r.t. both
    arguments; the field gradient is zero where clamping is active.
    """
    if img.ndim != 4 or field.ndim != 4 or field.shape[1] != 2:
        raise ValueError(f"warp expects img BCHW and field B2HW, got {img.shape} and {field.shape}")
    b, c, h, w = img.shape
    if field.shape[0] != b or field.shape[2:] != (h, w):
        raise ValueError(f"shape mismatch: img {img.shape} vs field {field.shape}")

    jj = np.arange(w, dtype=img.data.dtype)[None, None, :]
    ii = np.arange(h, dtype=img.data.dtype)[None, :, None]
    gx_raw = jj + field.data[:, 0]
    gy_raw = ii + field.data[:, 1]
    out, corners, weights, values = bilinear_sample(img.data, gx_raw, gy_raw)
    bi, ci, y0e, x0e, y1e, x1e = corners
    wx, wy = weights
    v00, v01, v10, v11 = values

    img_shape = img.shape

    def grad_img(g):
        gi = np.zeros(img_shape, dtype=g.dtype)
        np.add.at(gi, (bi, ci, y0e, x0e), g * (1 - wx) * (1 - wy))
        np.add.at(gi, (bi, ci, y0e, x1e), g * wx * (1 - wy))
        np.add.at(gi, (bi, ci, y1e, x0e), g * (1 - wx) * wy)
        np.add.at(gi, (bi, ci, y1e, x1e), g * wx * wy)
        return gi

    def grad_field(g):
        # clamp kills the coordinate gradient outside the valid range
        mask_x = ((gx_raw > 0) & (gx_raw < w - 1)).astype(g.dtype)[:, None]
        mask_y = ((gy_raw > 0) & (gy_raw < h - 1)).astype(g.dtype)[:, None]
        d_gx = ((v01 - v00) * (1 - wy) + (v11 - v10) * wy) * mask_x
        d_gy = ((v10 - v00) * (1 - wx) + (v11 - v01) * wx) * mask_y
        gf = np.empty(field.shape, dtype=g.dtype)
        gf[:, 0] = (g * d_gx).sum(axis=1)
        gf[:, 1] = (g * d_gy).sum(axis=1)
        return gf

    return custom_op(out, (img, field), (grad_img, grad_field))


def smoothness(field: Tensor) -> Tensor:
    """Mean squared forward difference of the field along both spatial axes."""
    dx = field[:, :, :, 1:] - field[:, :, :, :-1]
    dy = field[:, :, 1:, :] - field[:, :, :-1, :]
    total = dx.square().sum() + dy.square().sum()
    return total / float(dx.size + dy.size)


def registration_loss(x_t: Tensor, x_k: Tensor, regnet, w_smooth: float = 1.0):
    """Alignment objective: field = regnet(x_t, x_k) warps x_k toward x_t.

    loss = mean (x_t - x_k @ field)^2 + w_smooth * smoothness(field).
    Returns (loss, field).
    """
    if x_t.shape != x_k.shape:
        raise ValueError(f"shape mismatch: {x_t.shape} vs {x_k.shape}")
    field = regnet(concat([x_t, x_k], axis=1))
    warped = warp(x_k, field)
    similarity = (x_t - warped).square().mean()
    return similarity + w_smooth * smoothness(field), field
