"""Differentiable grid sampling and small convolutions.

Coordinate convention (align-corners): a normalized coordinate u in [0, 1]
maps to grid coordinate u * (extent - 1), so u = 0 and u = 1 land exactly on
the first and last cell. Sample coordinates are clamped to the grid before
weighting; the gradient with respect to a clamped coordinate is zero.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tape import Tensor, _check_finite, _track


def _as_coord(c, dtype):
    """Return (tensor_or_None, ndarray) for a coordinate operand."""
    if isinstance(c, Tensor):
        return c, c.data.astype(np.float64)
    return None, np.asarray(c, dtype=np.float64)


def _corner_setup(raw: np.ndarray, extent: int):
    """Clamp, split into base index / fraction, and an interior mask."""
    c = np.clip(raw, 0.0, extent - 1.0)
    i0 = np.minimum(np.floor(c), extent - 2).astype(np.intp)
    frac = c - i0
    interior = (raw > 0.0) & (raw < extent - 1.0)
    return i0, frac, interior


def bilinear_sample2d(plane: Tensor, px, py) -> Tensor:
    """Sample ``plane`` (rows, cols, C) at continuous (px, py).

    ``px`` indexes columns, ``py`` rows. Coordinates may be scalars, arrays,
    or Tensors of any common shape S; the result has shape S + (C,).
    Differentiable with respect to the plane and to tensor coordinates.
    """
    rows, cols = plane.shape[0], plane.shape[1]
    if rows < 2 or cols < 2:
        raise ShapeError(f"bilinear_sample2d needs at least a 2x2 grid, got {plane.shape}")
    px_t, px_raw = _as_coord(px, plane.dtype)
    py_t, py_raw = _as_coord(py, plane.dtype)
    px_raw, py_raw = np.broadcast_arrays(px_raw, py_raw)
    lead_shape = px_raw.shape
    xr = px_raw.reshape(-1)
    yr = py_raw.reshape(-1)

    x0, fx, x_in = _corner_setup(xr, cols)
    y0, fy, y_in = _corner_setup(yr, rows)
    x1, y1 = x0 + 1, y0 + 1
    data = plane.data
    v00 = data[y0, x0]
    v01 = data[y0, x1]
    v10 = data[y1, x0]
    v11 = data[y1, x1]
    wx1 = fx[:, None]
    wy1 = fy[:, None]
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1
    flat = wy0 * (wx0 * v00 + wx1 * v01) + wy1 * (wx0 * v10 + wx1 * v11)
    out = Tensor(flat.reshape(lead_shape + (data.shape[-1],)).astype(plane.dtype))
    _check_finite(out.data, "bilinear_sample2d")

    parents = [plane] + [t for t in (px_t, py_t) if t is not None]

    def backward(g):
        gf = g.reshape(-1, data.shape[-1]).astype(np.float64)
        dplane = np.zeros(data.shape, dtype=np.float64)
        np.add.at(dplane, (y0, x0), wy0 * wx0 * gf)
        np.add.at(dplane, (y0, x1), wy0 * wx1 * gf)
        np.add.at(dplane, (y1, x0), wy1 * wx0 * gf)
        np.add.at(dplane, (y1, x1), wy1 * wx1 * gf)
        grads = [dplane.astype(data.dtype)]
        if px_t is not None:
            ddx = wy0[:, 0] * ((v01 - v00) * gf).sum(-1) + wy1[:, 0] * ((v11 - v10) * gf).sum(-1)
            grads.append((ddx * x_in).reshape(lead_shape).astype(px_t.dtype))
        if py_t is not None:
            ddy = wx0[:, 0] * ((v10 - v00) * gf).sum(-1) + wx1[:, 0] * ((v11 - v01) * gf).sum(-1)
            grads.append((ddy * y_in).reshape(lead_shape).astype(py_t.dtype))
        return tuple(grads)

    return _track(out, tuple(parents), backward)


def trilinear_sample3d(volume: Tensor, px, py, pz) -> Tensor:
    """Sample ``volume`` (d0, d1, d2, C) at continuous (px, py, pz).

    ``pz`` indexes axis 0, ``py`` axis 1, ``px`` axis 2 (the 3-D analogue of
    the bilinear convention). Result shape is S + (C,).
    """
    d0, d1, d2 = volume.shape[0], volume.shape[1], volume.shape[2]
    if min(d0, d1, d2) < 2:
        raise ShapeError(f"trilinear_sample3d needs at least 2 cells per axis, got {volume.shape}")
    px_t, px_raw = _as_coord(px, volume.dtype)
    py_t, py_raw = _as_coord(py, volume.dtype)
    pz_t, pz_raw = _as_coord(pz, volume.dtype)
    px_raw, py_raw, pz_raw = np.broadcast_arrays(px_raw, py_raw, pz_raw)
    lead_shape = px_raw.shape
    xr, yr, zr = px_raw.reshape(-1), py_raw.reshape(-1), pz_raw.reshape(-1)

    x0, fx, x_in = _corner_setup(xr, d2)
    y0, fy, y_in = _corner_setup(yr, d1)
    z0, fz, z_in = _corner_setup(zr, d0)
    x1, y1, z1 = x0 + 1, y0 + 1, z0 + 1
    data = volume.data
    ch = data.shape[-1]

    corners = {}
    for cz, zi in ((0, z0), (1, z1)):
        for cy, yi in ((0, y0), (1, y1)):
            for cx, xi in ((0, x0), (1, x1)):
                corners[(cz, cy, cx)] = data[zi, yi, xi]
    wx = (1.0 - fx[:, None], fx[:, None])
    wy = (1.0 - fy[:, None], fy[:, None])
    wz = (1.0 - fz[:, None], fz[:, None])
    flat = np.zeros((xr.size, ch), dtype=np.float64)
    for (cz, cy, cx), v in corners.items():
        flat += wz[cz] * wy[cy] * wx[cx] * v
    out = Tensor(flat.reshape(lead_shape + (ch,)).astype(volume.dtype))
    _check_finite(out.data, "trilinear_sample3d")

    parents = [volume] + [t for t in (px_t, py_t, pz_t) if t is not None]
    idx = {0: (z0, y0, x0), 1: (z1, y1, x1)}

    def backward(g):
        gf = g.reshape(-1, ch).astype(np.float64)
        dvol = np.zeros(data.shape, dtype=np.float64)
        for (cz, cy, cx) in corners:
            w = wz[cz] * wy[cy] * wx[cx]
            np.add.at(dvol, (idx[cz][0], idx[cy][1], idx[cx][2]), w * gf)
        grads = [dvol.astype(data.dtype)]
        if px_t is not None:
            acc = np.zeros(xr.size)
            for cz in (0, 1):
                for cy in (0, 1):
                    diff = corners[(cz, cy, 1)] - corners[(cz, cy, 0)]
                    acc += (wz[cz] * wy[cy])[:, 0] * (diff * gf).sum(-1)
            grads.append((acc * x_in).reshape(lead_shape).astype(px_t.dtype))
        if py_t is not None:
            acc = np.zeros(xr.size)
            for cz in (0, 1):
                for cx in (0, 1):
                    diff = corners[(cz, 1, cx)] - corners[(cz, 0, cx)]
                    acc += (wz[cz] * wx[cx])[:, 0] * (diff * gf).sum(-1)
            grads.append((acc * y_in).reshape(lead_shape).astype(py_t.dtype))
        if pz_t is not None:
            acc = np.zeros(xr.size)
            for cy in (0, 1):
                for cx in (0, 1):
                    diff = corners[(1, cy, cx)] - corners[(0, cy, cx)]
                    acc += (wy[cy] * wx[cx])[:, 0] * (diff * gf).sum(-1)
            grads.append((acc * z_in).reshape(lead_shape).astype(pz_t.dtype))
        return tuple(grads)

    return _track(out, tuple(parents), backward)


def resample_bilinear(src: Tensor, height: int, width: int) -> Tensor:
    """Resize (R, C, ch) -> (height, width, ch) with align-corners bilinear."""
    rows, cols = src.shape[0], src.shape[1]
    if (rows, cols) == (height, width):
        return src
    ys = np.linspace(0.0, rows - 1.0, height)
    xs = np.linspace(0.0, cols - 1.0, width)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample2d(src, gx, gy)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-extent cross-correlation with a 1x1 or 3x3 kernel plus bias.

    ``x`` is (H, W, Cin), ``kernel`` (k, k, Cin, Cout) with k in {1, 3}
    (zero padding preserves H, W), ``bias`` (Cout,).
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects x (H,W,Cin) and kernel (k,k,Cin,Cout)")
    kh, kw, cin, cout = kernel.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if x.shape[2] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[2]}, kernel {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    h, w = x.shape[0], x.shape[1]
    kmat = kernel.data.reshape(kh * kw * cin, cout)

    if kh == 1:
        col = x.data.reshape(h * w, cin)
    else:
        xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
        # (H, W, Cin, 3, 3) -> (H, W, 3, 3, Cin) so the flattening matches
        # the kernel's (ky, kx, Cin) layout.
        windows = sliding_window_view(xp, (3, 3), axis=(0, 1))
        col = windows.transpose(0, 1, 3, 4, 2).reshape(h * w, 9 * cin)
    out = Tensor((col @ kmat + bias.data).reshape(h, w, cout))
    _check_finite(out.data, "conv2d")

    def backward(g):
        g2 = g.reshape(h * w, cout)
        dk = (col.T @ g2).reshape(kh, kw, cin, cout)
        db = g2.sum(axis=0)
        dcol = g2 @ kmat.T
        if kh == 1:
            dx = dcol.reshape(h, w, cin)
        else:
            dcol = dcol.reshape(h, w, 3, 3, cin)
            dxp = np.zeros((h + 2, w + 2, cin), dtype=x.dtype)
            for dy in range(3):
                for dxo in range(3):
                    dxp[dy : dy + h, dxo : dxo + w] += dcol[:, :, dy, dxo]
            dx = dxp[1 : h + 1, 1 : w + 1]
        return (dx, dk, db)

    return _track(out, (x, kernel, bias), backward)
