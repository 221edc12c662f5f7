"""Spatial resampling expressed as sparse linear maps.

Resizing, padding, cropping and block shuffle/rotation all send each output
pixel to a fixed weighted set of input pixels, so each one is a sparse matrix
of shape ``(H_out*W_out, H_in*W_in)`` applied to every channel.  Backprop
through a map is a multiplication by its transpose.
"""

from __future__ import annotations

import functools
import math
from typing import Sequence

import numpy as np
from scipy import sparse


class PixelMap:
    def __init__(self, matrix, in_hw: tuple[int, int], out_hw: tuple[int, int], name: str = ""):
        if not (sparse.issparse(matrix) and matrix.format == "csr"):
            matrix = sparse.csr_matrix(matrix)
        if matrix.shape != (out_hw[0] * out_hw[1], in_hw[0] * in_hw[1]):
            raise ValueError(f"matrix shape {matrix.shape} does not match {in_hw} -> {out_hw}")
        self.matrix = matrix
        self.in_hw = (int(in_hw[0]), int(in_hw[1]))
        self.out_hw = (int(out_hw[0]), int(out_hw[1]))
        self.name = name

    @classmethod
    def identity(cls, hw: tuple[int, int]) -> "PixelMap":
        n = hw[0] * hw[1]
        return cls(sparse.identity(n, format="csr"), hw, hw, "identity")

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        c, h, w = pixels.shape
        if (h, w) != self.in_hw:
            raise ValueError(f"map expects {self.in_hw}, got {(h, w)}")
        flat = pixels.reshape(c, h * w)
        out = (self.matrix @ flat.T).T
        return np.ascontiguousarray(out).reshape(c, *self.out_hw)

    def vjp(self, grad_out: np.ndarray) -> np.ndarray:
        c = grad_out.shape[0]
        flat = grad_out.reshape(c, -1)
        out = (self.matrix.T @ flat.T).T
        return np.ascontiguousarray(out).reshape(c, *self.in_hw)

    def then(self, other: "PixelMap") -> "PixelMap":
        """Compose: apply ``self`` first, then ``other``."""
        if other.in_hw != self.out_hw:
            raise ValueError(f"cannot chain {self.out_hw} into {other.in_hw}")
        name = "+".join(n for n in (self.name, other.name) if n)
        return PixelMap(other.matrix @ self.matrix, self.in_hw, other.out_hw, name)

    def __repr__(self) -> str:
        return f"PixelMap({self.name or 'custom'}: {self.in_hw} -> {self.out_hw})"


def _axis_matrix(n_out: int, n_in: int, interpolation: str) -> sparse.csr_matrix:
    dst = np.arange(n_out)
    if interpolation == "nearest":
        src = np.minimum(np.floor((dst + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)
        return sparse.csr_matrix((np.ones(n_out), (dst, src)), shape=(n_out, n_in))
    if interpolation == "bilinear":
        src = (dst + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        rows = np.concatenate([dst, dst])
        cols = np.concatenate([i0, i1])
        vals = np.concatenate([1.0 - frac, frac])
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))
    raise ValueError(f"unknown interpolation {interpolation!r}")


def resize_map(in_hw: tuple[int, int], out_hw: tuple[int, int], interpolation: str = "nearest") -> PixelMap:
    return _resize_map(tuple(map(int, in_hw)), tuple(map(int, out_hw)), interpolation)


@functools.lru_cache(maxsize=256)
def _resize_map(in_hw: tuple[int, int], out_hw: tuple[int, int], interpolation: str) -> PixelMap:
    # maps are never mutated after construction, so cached instances are shared
    if min(out_hw) < 1:
        raise ValueError(f"resized dimensions must be >= 1, got {out_hw}")
    if tuple(in_hw) == tuple(out_hw):
        return PixelMap.identity(in_hw)
    rows = _axis_matrix(out_hw[0], in_hw[0], interpolation)
    cols = _axis_matrix(out_hw[1], in_hw[1], interpolation)
    return PixelMap(sparse.kron(rows, cols, format="csr"), in_hw, out_hw, f"resize{out_hw[0]}x{out_hw[1]}")


def _gather_map(src_index: np.ndarray, in_hw: tuple[int, int], name: str) -> PixelMap:
    out_hw = src_index.shape
    n_out = src_index.size
    m = sparse.csr_matrix(
        (np.ones(n_out), (np.arange(n_out), src_index.ravel())),
        shape=(n_out, in_hw[0] * in_hw[1]),
    )
    return PixelMap(m, in_hw, out_hw, name)


def reflect_pad_map(in_hw: tuple[int, int], pad_h: tuple[int, int], pad_w: tuple[int, int]) -> PixelMap:
    h, w = in_hw
    if max(pad_h) >= h or max(pad_w) >= w:
        raise ValueError("reflect padding must be smaller than the image dimension")
    rows = np.pad(np.arange(h), pad_h, mode="reflect")
    cols = np.pad(np.arange(w), pad_w, mode="reflect")
    return _gather_map(rows[:, None] * w + cols[None, :], in_hw, "pad")


def crop_map(in_hw: tuple[int, int], top: int, left: int, out_hw: tuple[int, int]) -> PixelMap:
    h, w = in_hw
    if top < 0 or left < 0 or top + out_hw[0] > h or left + out_hw[1] > w:
        raise ValueError("crop window outside the image")
    rows = np.arange(top, top + out_hw[0])
    cols = np.arange(left, left + out_hw[1])
    return _gather_map(rows[:, None] * w + cols[None, :], in_hw, "crop")


def _rotation_entries(bh: int, bw: int, angle_deg: float, interpolation: str):
    """Sample positions for rotating a ``bh x bw`` block about its centre.

    Returns (out_local, src_y, src_x, weight) with out-of-block samples dropped,
    i.e. the uncovered corners are filled with zeros.
    """
    cy, cx = (bh - 1) / 2.0, (bw - 1) / 2.0
    yy, xx = np.mgrid[0:bh, 0:bw]
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    # inverse rotation: where does each output pixel come from
    sy = cos_t * dy - sin_t * dx + cy
    sx = sin_t * dy + cos_t * dx + cx
    out_local = (yy * bw + xx).ravel()
    sy, sx = sy.ravel(), sx.ravel()
    if interpolation == "nearest":
        iy, ix = np.rint(sy).astype(np.int64), np.rint(sx).astype(np.int64)
        ok = (iy >= 0) & (iy < bh) & (ix >= 0) & (ix < bw)
        return out_local[ok], iy[ok], ix[ok], np.ones(int(ok.sum()))
    if interpolation == "bilinear":
        y0, x0 = np.floor(sy).astype(np.int64), np.floor(sx).astype(np.int64)
        fy, fx = sy - y0, sx - x0
        outs, ys, xs, ws = [], [], [], []
        for oy, ox, wgt in (
            (0, 0, (1 - fy) * (1 - fx)),
            (0, 1, (1 - fy) * fx),
            (1, 0, fy * (1 - fx)),
            (1, 1, fy * fx),
        ):
            ny, nx = y0 + oy, x0 + ox
            ok = (ny >= 0) & (ny < bh) & (nx >= 0) & (nx < bw) & (wgt > 0)
            outs.append(out_local[ok])
            ys.append(ny[ok])
            xs.append(nx[ok])
            ws.append(wgt[ok])
        return np.concatenate(outs), np.concatenate(ys), np.concatenate(xs), np.concatenate(ws)
    raise ValueError(f"unknown interpolation {interpolation!r}")


def block_shuffle_rotate_map(
    hw: tuple[int, int],
    grid: int,
    permutation: Sequence[int],
    angles: Sequence[float],
    rotation_mode: str = "continuous",
    interpolation: str = "nearest",
) -> PixelMap:
    """Build the map that rearranges ``grid x grid`` blocks and rotates each one.

    Output block ``p`` (row-major) is input block ``permutation[p]`` rotated
    by ``angles[p]`` degrees.  In ``right_angle`` mode the angles must be
    multiples of 90 and the rotation is an exact index permutation.
    """
    h, w = hw
    if h % grid or w % grid:
        raise ValueError(f"grid {grid} does not divide {hw}")
    n_blocks = grid * grid
    perm = np.asarray(permutation, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(n_blocks)):
        raise ValueError("permutation must be a permutation of the block indices")
    if len(angles) != n_blocks:
        raise ValueError("need one angle per block")
    bh, bw = h // grid, w // grid
    index = np.arange(h * w).reshape(h, w)
    rows, cols, vals = [], [], []
    for p in range(n_blocks):
        q = int(perm[p])
        pr, pc = divmod(p, grid)
        qr, qc = divmod(q, grid)
        src_block = index[qr * bh:(qr + 1) * bh, qc * bw:(qc + 1) * bw]
        out_block = index[pr * bh:(pr + 1) * bh, pc * bw:(pc + 1) * bw]
        angle = float(angles[p])
        if rotation_mode == "right_angle":
            quarter = angle / 90.0
            if quarter != round(quarter):
                raise ValueError(f"right_angle mode needs multiples of 90, got {angle}")
            k = int(round(quarter)) % 4
            if k % 2 and bh != bw:
                raise ValueError("quarter turns need square blocks")
            # np.rot90 turns counter-clockwise; negate so positive angles agree with continuous mode
            rotated = np.rot90(src_block, -k)
            rows.append(out_block.ravel())
            cols.append(rotated.ravel())
            vals.append(np.ones(out_block.size))
        elif rotation_mode == "continuous":
            out_local, sy, sx, wgt = _rotation_entries(bh, bw, angle, interpolation)
            rows.append(out_block.ravel()[out_local])
            cols.append(src_block[sy, sx])
            vals.append(wgt)
        else:
            raise ValueError(f"unknown rotation mode {rotation_mode!r}")
    m = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(h * w, h * w),
    )
    return PixelMap(m, hw, hw, "bsr")


def adaptive_pool_map(in_hw: tuple[int, int], out_hw: tuple[int, int]) -> PixelMap:
    """Adaptive average pooling: bin i covers [floor(i*n/m), ceil((i+1)*n/m))."""

    def axis(n_in: int, n_out: int) -> sparse.csr_matrix:
        rows, cols, vals = [], [], []
        for i in range(n_out):
            start = (i * n_in) // n_out
            stop = -((-(i + 1) * n_in) // n_out)
            span = stop - start
            rows.extend([i] * span)
            cols.extend(range(start, stop))
            vals.extend([1.0 / span] * span)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))

    m = sparse.kron(axis(in_hw[0], out_hw[0]), axis(in_hw[1], out_hw[1]), format="csr")
    return PixelMap(m, in_hw, out_hw, "pool")
