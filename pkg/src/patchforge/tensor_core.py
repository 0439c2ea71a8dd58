"""Dense tensor conventions, binary tensor I/O, and differentiable layer kernels.

All numeric data is carried in plain numpy arrays with one fixed layout:
row-major (y, x, channel) for a single item, and an optional batch axis in
front, so batches are (batch, y, x, channel). Stored artifacts use float32;
the kernels themselves run in whatever float dtype the caller passes, which
lets verification code drive them in float64.

Every op here is a pure function of its inputs. Anything the backward pass
needs that the forward computed (pooling routing, for instance) is returned
to the caller, never cached in module state, so concurrent use on shared
read-only arrays is safe. Identical input arrays always produce bit-identical
outputs; batched and single-sample calls are separate shapes and are not
promised to agree to the last bit.

Reduction conventions: elementwise reductions (bias gradients, loss means,
average pooling) accumulate in float64 and cast back to the input dtype.
Matrix products accumulate in the input dtype via BLAS.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError, ShapeError

TENSOR_MAGIC = b"TNSR"
TENSOR_VERSION = 1

_HEADER = struct.Struct("<4sHB")  # magic, version, rank


# ---------------------------------------------------------------------------
# Binary tensor format: magic "TNSR", version u16, rank u8, dims u32 LE each,
# then the payload as little-endian f32 in C order.
# ---------------------------------------------------------------------------

def write_tensor(fh, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim < 1 or arr.ndim > 255:
        raise ShapeError(f"tensor rank {arr.ndim} not storable")
    fh.write(_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh) -> np.ndarray:
    start = fh.tell()
    head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise FormatError(f"truncated tensor header at offset {start}")
    magic, version, rank = _HEADER.unpack(head)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r} at offset {start}")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version} at offset {start + 4}")
    dims_raw = fh.read(4 * rank)
    if len(dims_raw) < 4 * rank:
        raise FormatError(f"truncated tensor dims at offset {start + _HEADER.size}")
    shape = struct.unpack(f"<{rank}I", dims_raw)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) < 4 * count:
        raise FormatError(
            f"truncated tensor payload at offset {start + _HEADER.size + 4 * rank}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class LayerParams:
    """Learnable weights plus matching momentum velocity buffers.

    Convolution weights are (kh, kw, in_channels, out_channels); fully
    connected weights are (in_width, out_width). Bias length always equals
    the output channel count.
    """

    weights: np.ndarray
    bias: np.ndarray
    vel_weights: np.ndarray
    vel_bias: np.ndarray

    def __post_init__(self):
        if self.vel_weights.shape != self.weights.shape:
            raise ShapeError(
                f"velocity shape {self.vel_weights.shape} != weights {self.weights.shape}"
            )
        if self.vel_bias.shape != self.bias.shape:
            raise ShapeError(
                f"bias velocity shape {self.vel_bias.shape} != bias {self.bias.shape}"
            )
        if self.bias.shape != (self.weights.shape[-1],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match "
                f"output channels {self.weights.shape[-1]}"
            )

    @classmethod
    def from_arrays(cls, weights: np.ndarray, bias: np.ndarray) -> "LayerParams":
        return cls(weights, bias, np.zeros_like(weights), np.zeros_like(bias))

    def size(self) -> int:
        return int(self.weights.size + self.bias.size)


def conv_output_size(n: int, kernel: int, pad: int, stride: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


def pooled_output_size(n: int, window: int, stride: int) -> int:
    """Window count when the input is zero-extended on the far edge to fit."""
    if window > n:
        raise ShapeError(f"pool window {window} larger than input extent {n}")
    return 1 + -(-(n - window) // stride)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _promote(x: np.ndarray):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected rank-3 or rank-4 input, got rank {x.ndim}")


def _conv_geometry(x4, w, pad, stride):
    if w.ndim != 4:
        raise ShapeError(f"conv weights must be rank 4, got {w.ndim}")
    kh, kw, cin, cout = w.shape
    n, h, ww_, c = x4.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, kernel expects {cin}")
    if pad < 0 or stride < 1:
        raise DomainError(f"pad must be >= 0 and stride >= 1, got {pad}, {stride}")
    ho = conv_output_size(h, kh, pad, stride)
    wo = conv_output_size(ww_, kw, pad, stride)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} with pad {pad} does not fit input {h}x{ww_}"
        )
    return kh, kw, cin, cout, ho, wo


def _im2col(xp, kh, kw, ho, wo, stride):
    """Gather every receptive field into a row, flattened (ky, kx, channel)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]            # (n, ho, wo, c, kh, kw)
    cols = win.transpose(0, 1, 2, 4, 5, 3)      # (n, ho, wo, kh, kw, c)
    return cols.reshape(-1, kh * kw * xp.shape[-1])


def conv2d_forward(x: np.ndarray, params: LayerParams, pad: int = 0,
                   stride: int = 1, return_cols: bool = False):
    """Cross-correlate x with the kernels and add bias (im2col + one matmul).

    With return_cols=True also hands back the gathered column matrix so a
    training loop can pass it to conv2d_backward instead of regathering.
    """
    x4, squeeze = _promote(x)
    w = params.weights
    kh, kw, cin, cout, ho, wo = _conv_geometry(x4, w, pad, stride)
    n = x4.shape[0]
    xp = np.pad(x4, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x4
    cols = _im2col(xp, kh, kw, ho, wo, stride)
    out = cols @ w.reshape(-1, cout) + params.bias.astype(x4.dtype)
    out = out.reshape(n, ho, wo, cout)
    if squeeze:
        out = out[0]
    return (out, cols) if return_cols else out


def conv2d_backward(x: np.ndarray, params: LayerParams, upstream: np.ndarray,
                    pad: int = 0, stride: int = 1, cols: np.ndarray | None = None):
    """Gradients of sum(upstream * conv2d_forward(x)) w.r.t. x, weights, bias."""
    x4, squeeze = _promote(x)
    up4, _ = _promote(upstream)
    w = params.weights
    kh, kw, cin, cout, ho, wo = _conv_geometry(x4, w, pad, stride)
    n, h, ww_, _ = x4.shape
    if up4.shape != (n, ho, wo, cout):
        raise ShapeError(
            f"upstream shape {up4.shape} does not match forward output "
            f"{(n, ho, wo, cout)}"
        )
    up2 = up4.reshape(-1, cout)
    if cols is None:
        xp = np.pad(x4, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x4
        cols = _im2col(xp, kh, kw, ho, wo, stride)
    dw = (cols.T @ up2).reshape(w.shape)
    db = np.sum(up2, axis=0, dtype=np.float64).astype(up4.dtype)
    # col2im: scatter column gradients back through each kernel offset
    dcols = (up2 @ w.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
    dxp = np.zeros((n, h + 2 * pad, ww_ + 2 * pad, cin), dtype=x4.dtype)
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, ky:ky + ho * stride:stride,
                kx:kx + wo * stride:stride, :] += dcols[:, :, :, ky, kx, :]
    dx = dxp[:, pad:pad + h, pad:pad + ww_, :] if pad else dxp
    dx = np.ascontiguousarray(dx)
    if squeeze:
        dx = dx[0]
    return dx, dw, db


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Mask upstream where the forward input was <= 0 (gradient 0 at exactly 0)."""
    if x.shape != upstream.shape:
        raise ShapeError(f"relu upstream {upstream.shape} != input {x.shape}")
    return np.where(x > 0, upstream, np.zeros((), dtype=upstream.dtype))


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

@dataclass
class PoolCache:
    """Routing information pool2d hands to pool2d_backward."""

    kind: str
    window: int
    stride: int
    input_shape: tuple
    squeezed: bool
    padded_hw: tuple
    argmax: np.ndarray | None  # flat index within each window, max pooling only


def pool2d(x: np.ndarray, kind: str, window: int, stride: int):
    """Max or average pool; returns (output, routing info).

    Windows that run past the right/bottom edge see implicit zeros; average
    pooling divides by the full window size regardless.
    """
    if kind not in ("max", "avg"):
        raise DomainError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if window < 1 or stride < 1:
        raise DomainError(f"window and stride must be >= 1, got {window}, {stride}")
    x4, squeeze = _promote(x)
    n, h, w, c = x4.shape
    nh = pooled_output_size(h, window, stride)
    nw = pooled_output_size(w, window, stride)
    hp = (nh - 1) * stride + window
    wp = (nw - 1) * stride + window
    xp = np.pad(x4, ((0, 0), (0, hp - h), (0, wp - w), (0, 0))) if (hp > h or wp > w) else x4
    win = np.lib.stride_tricks.sliding_window_view(xp, (window, window), axis=(1, 2))
    win = win[:, ::stride, ::stride]                     # (n, nh, nw, c, window, window)
    flat = win.reshape(n, nh, nw, c, window * window)
    if kind == "max":
        idx = np.argmax(flat, axis=-1)                   # ties: first in scan order
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        cache = PoolCache("max", window, stride, x4.shape, squeeze, (hp, wp), idx)
    else:
        out = np.mean(flat, axis=-1, dtype=np.float64).astype(x4.dtype)
        cache = PoolCache("avg", window, stride, x4.shape, squeeze, (hp, wp), None)
    return (out[0] if squeeze else out), cache


def pool2d_backward(cache: PoolCache, upstream: np.ndarray) -> np.ndarray:
    n, h, w, c = cache.input_shape
    window, stride = cache.window, cache.stride
    nh = pooled_output_size(h, window, stride)
    nw = pooled_output_size(w, window, stride)
    up4 = upstream[None] if cache.squeezed else upstream
    if up4.shape != (n, nh, nw, c):
        raise ShapeError(f"pool upstream {up4.shape} != output {(n, nh, nw, c)}")
    hp, wp = cache.padded_hw
    dxp = np.zeros((n, hp, wp, c), dtype=up4.dtype)
    if cache.kind == "max":
        wy, wx = np.divmod(cache.argmax, window)
        ni, oy, ox, ci = np.indices(cache.argmax.shape, sparse=True)
        flat = (((ni * hp + oy * stride + wy) * wp + ox * stride + wx) * c + ci)
        acc = np.bincount(flat.ravel(), weights=up4.ravel().astype(np.float64),
                          minlength=dxp.size)
        dxp = acc.astype(up4.dtype).reshape(dxp.shape)
    else:
        share = (up4 / np.array(window * window, dtype=up4.dtype))
        for wy in range(window):
            for wx in range(window):
                dxp[:, wy:wy + nh * stride:stride, wx:wx + nw * stride:stride, :] += share
    dx = np.ascontiguousarray(dxp[:, :h, :w, :])
    return dx[0] if cache.squeezed else dx


# ---------------------------------------------------------------------------
# Fully connected
# ---------------------------------------------------------------------------

def fc_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """S = x @ W + b for x of shape (width,) or (batch, width)."""
    w = params.weights
    if w.ndim != 2:
        raise ShapeError(f"fc weights must be rank 2, got {w.ndim}")
    if x.ndim not in (1, 2):
        raise ShapeError(f"fc input must be rank 1 or 2, got {x.ndim}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"fc input width {x.shape[-1]} != weight rows {w.shape[0]}")
    return x @ w + params.bias.astype(x.dtype)


def fc_backward(x: np.ndarray, params: LayerParams, upstream: np.ndarray):
    w = params.weights
    x2 = x[None] if x.ndim == 1 else x
    up2 = upstream[None] if upstream.ndim == 1 else upstream
    if up2.shape != (x2.shape[0], w.shape[1]):
        raise ShapeError(
            f"fc upstream {upstream.shape} does not match output "
            f"({x2.shape[0]}, {w.shape[1]})"
        )
    dw = x2.T @ up2
    db = np.sum(up2, axis=0, dtype=np.float64).astype(up2.dtype)
    dx = up2 @ w.T
    if x.ndim == 1:
        dx = dx[0]
    return dx, dw, db


# ---------------------------------------------------------------------------
# Softmax and cross-entropy
# ---------------------------------------------------------------------------

def softmax(scores: np.ndarray) -> np.ndarray:
    """Class probabilities along the last axis, max-shifted for stability."""
    if scores.shape[-1] < 1:
        raise ShapeError("softmax needs at least one score")
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _labels_2d(probs: np.ndarray, labels):
    p2 = probs[None] if probs.ndim == 1 else probs
    y = np.atleast_1d(np.asarray(labels))
    if y.shape != (p2.shape[0],):
        raise ShapeError(f"labels shape {y.shape} != batch ({p2.shape[0]},)")
    k = p2.shape[-1]
    if np.any(y < 0) or np.any(y >= k):
        bad = int(y[(y < 0) | (y >= k)][0])
        raise IndexError(f"class label {bad} out of range for {k} classes")
    return p2, y


def cross_entropy(probs: np.ndarray, labels) -> float:
    """Mean negative log probability of the true class."""
    p2, y = _labels_2d(probs, labels)
    picked = p2[np.arange(p2.shape[0]), y].astype(np.float64)
    return float(np.mean(-np.log(np.maximum(picked, 1e-300))))


def softmax_cross_entropy_backward(probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of the batch-mean loss w.r.t. the pre-softmax scores: (p - onehot)/N."""
    p2, y = _labels_2d(probs, labels)
    grad = p2.copy()
    grad[np.arange(p2.shape[0]), y] -= 1
    grad /= np.array(p2.shape[0], dtype=grad.dtype)
    return grad[0] if probs.ndim == 1 else grad
