"""Dense tensor math with explicit forward/backward pairs.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Every op keeps the
dtype of its input, so the network runs in float32 while gradient checks run
the same code at float64.

Each differentiable op comes as ``<op>_forward(...) -> (out, cache)`` and
``<op>_backward(dout, cache) -> LayerGrads``. A plain ``<op>(...)`` wrapper
returns only the output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


@dataclass
class LayerGrads:
    """Gradients produced by one backward call.

    ``params`` is keyed by parameter name ("weight", "bias", ...). For
    ``grid_sample_bilinear`` the sampling coordinates are reported under
    the key "coords".
    """

    params: dict[str, np.ndarray] = field(default_factory=dict)
    input: np.ndarray | None = None


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if arr.ndim > 4:
        raise ValueError(f"tensor rank must be <= 4, got shape {arr.shape}")
    if any(s < 1 for s in arr.shape):
        raise ValueError(f"all extents must be >= 1, got shape {arr.shape}")
    return arr


# -- convolution -----------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d_forward(x, weight, bias, stride=1, pad=0):
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.shape} has {cin} channels, "
            f"weight shape {weight.shape} expects {wcin}")
    if k != k2 or k not in (1, 3):
        raise ValueError(f"conv2d supports square 1x1 or 3x3 kernels, got {weight.shape}")
    if stride not in (1, 2) or pad not in (0, 1):
        raise ValueError(f"unsupported stride={stride} pad={pad}")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ValueError(f"input {x.shape} too small for kernel {k} with pad {pad}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")
    cols, ho, wo = _im2col(x, k, stride, pad)
    wmat = weight.reshape(cout, -1)
    out = cols @ wmat.T + bias
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, weight, stride, pad)


def conv2d_backward(dout, cache) -> LayerGrads:
    xshape, cols, weight, stride, pad = cache
    n, cin, h, w = xshape
    cout, _, k, _ = weight.shape
    ho, wo = dout.shape[2:]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = (dmat.T @ cols).reshape(weight.shape)
    db = dmat.sum(axis=0)
    dcols = (dmat @ weight.reshape(cout, -1)).reshape(n, ho, wo, cin, k, k)
    dxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return LayerGrads({"weight": dw, "bias": db}, np.ascontiguousarray(dx))


def conv2d(x, weight, bias, stride=1, pad=0):
    return conv2d_forward(x, weight, bias, stride, pad)[0]


# -- elementwise -----------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask) -> LayerGrads:
    return LayerGrads(input=dout * mask)


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_forward(x):
    out = sigmoid(x)
    return out, out


def sigmoid_backward(dout, out) -> LayerGrads:
    return LayerGrads(input=dout * out * (1 - out))


def tanh_forward(x):
    out = np.tanh(x)
    return out, out


def tanh_backward(dout, out) -> LayerGrads:
    return LayerGrads(input=dout * (1 - out * out))


# -- upsampling ------------------------------------------------------------

def _upsample_matrix(size: int, dtype) -> np.ndarray:
    # align_corners=False: output o reads source (o + 0.5) / 2 - 0.5, clamped at 0
    m = np.zeros((2 * size, size), dtype=dtype)
    for o in range(2 * size):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = int(np.floor(src))
        lam = src - i0
        i1 = min(i0 + 1, size - 1)
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def upsample_bilinear_2x_forward(x):
    n, c, h, w = x.shape
    uh = _upsample_matrix(h, x.dtype)
    uw = _upsample_matrix(w, x.dtype)
    out = np.einsum("ph,nchw,qw->ncpq", uh, x, uw, optimize=True)
    return np.ascontiguousarray(out), (uh, uw)


def upsample_bilinear_2x_backward(dout, cache) -> LayerGrads:
    uh, uw = cache
    dx = np.einsum("ph,ncpq,qw->nchw", uh, dout, uw, optimize=True)
    return LayerGrads(input=np.ascontiguousarray(dx))


def upsample_bilinear_2x(x):
    return upsample_bilinear_2x_forward(x)[0]


# -- grid sampling ---------------------------------------------------------

def grid_sample_bilinear_forward(feature, coords):
    """Sample ``feature`` (N,C,H,W) at normalized ``coords`` (N,P,2).

    x=-1 is the center of column 0 and x=+1 the center of column W-1 (same
    for y and rows). Neighbors outside the map contribute zero.
    """
    n, c, h, w = feature.shape
    if coords.ndim != 3 or coords.shape[0] != n or coords.shape[2] != 2:
        raise ValueError(f"coords must be (N={n}, P, 2), got {coords.shape}")
    px = (coords[..., 0] + 1) * 0.5 * (w - 1)
    py = (coords[..., 1] + 1) * 0.5 * (h - 1)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    bidx = np.arange(n)[:, None]
    out = np.zeros((n, c, coords.shape[1]), dtype=feature.dtype)
    corners = []
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xc = np.clip(xi, 0, w - 1)
            yc = np.clip(yi, 0, h - 1)
            vals = feature[bidx, :, yc, xc] * valid[..., None]  # (N,P,C)
            out += (vals * (wx * wy)[..., None]).transpose(0, 2, 1)
            corners.append((xc, yc, valid, vals, dx, dy))
    cache = (feature.shape, corners, fx, fy)
    return out, cache


def grid_sample_bilinear_backward(dout, cache) -> LayerGrads:
    (n, c, h, w), corners, fx, fy = cache
    dfeat = np.zeros((n, c, h, w), dtype=dout.dtype)
    dpx = np.zeros_like(fx)
    dpy = np.zeros_like(fy)
    g = dout.transpose(0, 2, 1)  # (N,P,C)
    bidx = np.broadcast_to(np.arange(n)[:, None], fx.shape)
    for xc, yc, valid, vals, dx, dy in corners:
        wx = fx if dx else 1 - fx
        wy = fy if dy else 1 - fy
        contrib = g * (wx * wy * valid)[..., None]
        # (b, y, x) then channel axis; add.at handles repeated indices
        np.add.at(dfeat.transpose(0, 2, 3, 1), (bidx, yc, xc), contrib)
        gv = (g * vals).sum(axis=-1)
        dpx += gv * wy * (1 if dx else -1)
        dpy += gv * wx * (1 if dy else -1)
    dcoords = np.stack([dpx * 0.5 * (w - 1), dpy * 0.5 * (h - 1)], axis=-1)
    return LayerGrads({"coords": dcoords.astype(dout.dtype)}, dfeat)


def grid_sample_bilinear(feature, coords):
    return grid_sample_bilinear_forward(feature, coords)[0]


# -- fully connected -------------------------------------------------------

def linear_forward(x, weight, bias):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias {bias.shape} does not match weight {weight.shape}")
    return x @ weight.T + bias, (x, weight)


def linear_backward(dout, cache) -> LayerGrads:
    x, weight = cache
    return LayerGrads({"weight": dout.T @ x, "bias": dout.sum(axis=0)}, dout @ weight)


def linear(x, weight, bias):
    return linear_forward(x, weight, bias)[0]


# -- losses ----------------------------------------------------------------

BCE_EPS = 1e-7


def bce_loss_forward(pred, target):
    p = np.clip(pred, BCE_EPS, 1 - BCE_EPS)
    loss = -np.mean(target * np.log(p) + (1 - target) * np.log(1 - p))
    return float(loss), (pred, p, target)


def bce_loss_backward(dloss, cache) -> LayerGrads:
    pred, p, target = cache
    inside = (pred >= BCE_EPS) & (pred <= 1 - BCE_EPS)
    grad = (p - target) / (p * (1 - p)) / pred.size
    return LayerGrads(input=dloss * grad * inside)


def bce_loss(pred, target) -> float:
    return bce_loss_forward(pred, target)[0]


def smooth_l1_loss_forward(pred, target, beta=0.1):
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = pred - target
    ad = np.abs(d)
    per = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    return float(per.mean()) if per.size else 0.0, (d, beta)


def smooth_l1_loss_backward(dloss, cache) -> LayerGrads:
    d, beta = cache
    if d.size == 0:
        return LayerGrads(input=np.zeros_like(d))
    grad = np.where(np.abs(d) < beta, d / beta, np.sign(d)) / d.size
    return LayerGrads(input=dloss * grad)


def smooth_l1_loss(pred, target, beta=0.1) -> float:
    return smooth_l1_loss_forward(pred, target, beta)[0]


# -- optimizer -------------------------------------------------------------

def sgd_step(params: dict, grads: dict, lr: float, momentum: float = 0.0,
             velocity: dict | None = None):
    """One SGD-with-momentum update. Returns ``(new_params, new_velocity)``.

    v <- momentum * v + g ; p <- p - lr * v. Parameters without a gradient
    entry are carried over unchanged.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}; step rejected")
    velocity = velocity or {}
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            if name in velocity:
                new_velocity[name] = velocity[name]
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        v = g.astype(p.dtype) if name not in velocity else (momentum * velocity[name] + g).astype(p.dtype)
        new_velocity[name] = v
        new_params[name] = (p - p.dtype.type(lr) * v).astype(p.dtype)
    return new_params, new_velocity


# -- weight files ----------------------------------------------------------

MAGIC = b"E3GW"
FORMAT_VERSION = 1


class WeightFormatError(ValueError):
    pass


def save_weights(path, params: dict) -> None:
    """Write ``params`` in the E3GW little-endian format (sorted by name)."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise WeightFormatError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != FORMAT_VERSION:
            raise WeightFormatError(f"{path}: unsupported version {version}")
        off = 12
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if off + 4 * size > len(buf):
                raise WeightFormatError(f"{path}: truncated tensor {name!r}")
            params[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(DTYPE)
            off += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise WeightFormatError(f"{path}: corrupt weight file ({exc})") from exc
    if off != len(buf):
        raise WeightFormatError(f"{path}: {len(buf) - off} trailing bytes")
    return params
