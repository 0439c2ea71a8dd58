"""Two-branch patch classifier assembly, forward/backward, and checkpoints.

A network is two identical-topology convolutional branches, one per
field-of-view, whose 64-wide outputs are concatenated and pushed through a
small fully connected head ending in softmax. The branches never share
parameters. The standard topology is

    conv 5x5x32 pad 2 -> relu -> maxpool 2/2 -> conv 5x5x32 pad 2 -> relu
    -> avgpool 2/2 -> conv 5x5x64 pad 2 -> relu -> avgpool 2/2
    -> conv 4x4x64 pad 0 -> relu

per branch (143,328 parameters each), then fc 128->64 -> relu -> fc 64->K.
K is 3 for the lesion / normal-interior / normal-boundary classifier
(295,107 parameters total) and 2 for the lesion / non-lesion variant
(295,042 total).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FormatError, ShapeError
from .tensor_core import (
    LayerParams,
    PoolCache,
    conv_output_size,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    pool2d,
    pool2d_backward,
    pooled_output_size,
    read_tensor,
    relu,
    relu_backward,
    softmax,
    softmax_cross_entropy_backward,
    write_tensor,
)

MULTICLASS_NAMES = ("lesion", "normal-interior", "normal-boundary")
BINARY_NAMES = ("lesion", "non-lesion")

CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1

# Weight init: zero-mean Gaussians with fan-in scaling (std = sqrt(2/fan_in)),
# biases zero. Fixed scales this far below fan-in scaling leave the deep
# branch outputs orders of magnitude too small to train in few epochs.
_INIT_GAIN = 2.0


@dataclass(frozen=True)
class LayerSpec:
    """One typed layer descriptor. Unused fields stay at their defaults."""

    kind: str              # "conv" | "relu" | "maxpool" | "avgpool" | "fc"
    kernel: int = 0
    channels: int = 0
    pad: int = 0
    stride: int = 1
    window: int = 0
    width: int = 0

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "conv":
            d.update(kernel=self.kernel, channels=self.channels,
                     pad=self.pad, stride=self.stride)
        elif self.kind in ("maxpool", "avgpool"):
            d.update(window=self.window, stride=self.stride)
        elif self.kind == "fc":
            d.update(width=self.width)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def conv(kernel: int, channels: int, pad: int = 0, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv", kernel=kernel, channels=channels, pad=pad, stride=stride)


def pool(kind: str, window: int, stride: int) -> LayerSpec:
    return LayerSpec(kind + "pool", window=window, stride=stride)


def fc(width: int) -> LayerSpec:
    return LayerSpec("fc", width=width)


@dataclass(frozen=True)
class NetworkSpec:
    """Branch plus fusion-head topology; validated eagerly on construction."""

    branch: tuple[LayerSpec, ...]
    fusion: tuple[LayerSpec, ...]
    class_count: int
    class_names: tuple[str, ...]
    input_size: int = 32
    input_channels: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.class_names) != self.class_count:
            raise DomainError(
                f"{len(self.class_names)} class names for {self.class_count} classes"
            )
        if self.class_count == 3 and tuple(self.class_names) != MULTICLASS_NAMES:
            raise DomainError(
                f"three-class networks must use class names {MULTICLASS_NAMES}"
            )
        dim = self.branch_output_width()
        width = 2 * dim
        for i, layer in enumerate(self.fusion):
            if layer.kind == "fc":
                if layer.width < 1:
                    raise ShapeError(f"fusion layer {i}: fc width must be >= 1")
                width = layer.width
            elif layer.kind != "relu":
                raise ShapeError(f"fusion layer {i}: kind {layer.kind!r} not allowed")
        if width != self.class_count:
            raise ShapeError(
                f"fusion output width {width} != class count {self.class_count}"
            )

    def branch_output_width(self) -> int:
        h = w = self.input_size
        c = self.input_channels
        for i, layer in enumerate(self.branch):
            if layer.kind == "conv":
                if layer.kernel < 1 or layer.channels < 1:
                    raise ShapeError(f"branch layer {i}: bad conv geometry")
                ho = conv_output_size(h, layer.kernel, layer.pad, layer.stride)
                wo = conv_output_size(w, layer.kernel, layer.pad, layer.stride)
                if ho < 1 or wo < 1:
                    raise ShapeError(
                        f"branch layer {i}: conv {layer.kernel} does not fit {h}x{w}"
                    )
                h, w, c = ho, wo, layer.channels
            elif layer.kind in ("maxpool", "avgpool"):
                h = pooled_output_size(h, layer.window, layer.stride)
                w = pooled_output_size(w, layer.window, layer.stride)
            elif layer.kind == "relu":
                pass
            elif layer.kind == "fc":
                raise ShapeError(f"branch layer {i}: fc layers belong to the fusion head")
            else:
                raise ShapeError(f"branch layer {i}: unknown kind {layer.kind!r}")
        return h * w * c

    def to_json(self) -> str:
        payload = {
            "input_size": self.input_size,
            "input_channels": self.input_channels,
            "class_count": self.class_count,
            "class_names": list(self.class_names),
            "branch": [l.to_dict() for l in self.branch],
            "fusion": [l.to_dict() for l in self.fusion],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        try:
            d = json.loads(text)
            return cls(
                branch=tuple(LayerSpec.from_dict(l) for l in d["branch"]),
                fusion=tuple(LayerSpec.from_dict(l) for l in d["fusion"]),
                class_count=d["class_count"],
                class_names=tuple(d["class_names"]),
                input_size=d["input_size"],
                input_channels=d["input_channels"],
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed network spec descriptor: {exc}") from exc


@dataclass
class Network:
    """A spec plus concrete parameters for both branches and the fusion head.

    The parameter lists are aligned with the spec layer lists; entries for
    layers without parameters are None. Immutable during inference; training
    mutates it through a single owner.
    """

    spec: NetworkSpec
    branch_small: list
    branch_large: list
    fusion: list

    def param_layers(self):
        """All LayerParams in checkpoint order: small branch, large branch, head."""
        for group in (self.branch_small, self.branch_large, self.fusion):
            for p in group:
                if p is not None:
                    yield p


def standard_branch() -> tuple[LayerSpec, ...]:
    return (
        conv(5, 32, pad=2), LayerSpec("relu"), pool("max", 2, 2),
        conv(5, 32, pad=2), LayerSpec("relu"), pool("avg", 2, 2),
        conv(5, 64, pad=2), LayerSpec("relu"), pool("avg", 2, 2),
        conv(4, 64, pad=0), LayerSpec("relu"),
    )


def standard_fusion(class_count: int) -> tuple[LayerSpec, ...]:
    return (fc(64), LayerSpec("relu"), fc(class_count))


def multiclass_spec() -> NetworkSpec:
    return NetworkSpec(standard_branch(), standard_fusion(3), 3, MULTICLASS_NAMES)


def binary_spec() -> NetworkSpec:
    return NetworkSpec(standard_branch(), standard_fusion(2), 2, BINARY_NAMES)


def _init_group(layers, in_channels: int, in_width: int, rng) -> list:
    params = []
    c, width = in_channels, in_width
    for layer in layers:
        if layer.kind == "conv":
            fan_in = layer.kernel * layer.kernel * c
            std = np.sqrt(_INIT_GAIN / fan_in)
            w = rng.normal(0.0, std, (layer.kernel, layer.kernel, c, layer.channels))
            params.append(LayerParams.from_arrays(
                w.astype(np.float32), np.zeros(layer.channels, dtype=np.float32)))
            c = layer.channels
        elif layer.kind == "fc":
            std = np.sqrt(_INIT_GAIN / width)
            w = rng.normal(0.0, std, (width, layer.width))
            params.append(LayerParams.from_arrays(
                w.astype(np.float32), np.zeros(layer.width, dtype=np.float32)))
            width = layer.width
        else:
            params.append(None)
    return params


def build_network(spec: NetworkSpec, seed: int) -> Network:
    """Instantiate parameters for a spec; deterministic in the seed."""
    rng = np.random.default_rng(seed)
    small = _init_group(spec.branch, spec.input_channels, 0, rng)
    large = _init_group(spec.branch, spec.input_channels, 0, rng)
    head = _init_group(spec.fusion, 0, 2 * spec.branch_output_width(), rng)
    return Network(spec, small, large, head)


def build_parallel_multiclass(seed: int) -> Network:
    return build_network(multiclass_spec(), seed)


def build_binary(seed: int) -> Network:
    return build_network(binary_spec(), seed)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    """Per-layer inputs and pooling routing kept for the backward pass."""

    small_steps: list = field(default_factory=list)   # (layer input, PoolCache|None)
    large_steps: list = field(default_factory=list)
    fusion_steps: list = field(default_factory=list)
    small_feat_shape: tuple = ()
    large_feat_shape: tuple = ()
    probs: np.ndarray | None = None
    single: bool = False


def _branch_forward(layers, params, x, steps):
    for layer, p in zip(layers, params):
        if layer.kind == "conv":
            out, cols = conv2d_forward(x, p, layer.pad, layer.stride,
                                       return_cols=True)
            steps.append((x, cols))
            x = out
        elif layer.kind == "relu":
            steps.append((x, None))
            x = relu(x)
        else:
            out, cache = pool2d(x, layer.kind[:3], layer.window, layer.stride)
            steps.append((x, cache))
            x = out
    return x


def _branch_backward(layers, params, steps, grad, grads_out):
    for i in range(len(layers) - 1, -1, -1):
        layer, p = layers[i], params[i]
        x, cache = steps[i]
        if layer.kind == "conv":
            grad, dw, db = conv2d_backward(x, p, grad, layer.pad, layer.stride,
                                           cols=cache)
            grads_out[i] = (dw, db)
        elif layer.kind == "relu":
            grad = relu_backward(x, grad)
        else:
            grad = pool2d_backward(cache, grad)
    return grad


def _check_patch(x: np.ndarray, name: str, spec: NetworkSpec):
    want = (spec.input_size, spec.input_size, spec.input_channels)
    if x.ndim == 3 and x.shape == want:
        return x[None], True
    if x.ndim == 4 and x.shape[1:] == want:
        return x, False
    raise ShapeError(f"{name} patch shape {x.shape} != {want} (or batched)")


def forward(net: Network, small: np.ndarray, large: np.ndarray):
    """Run both branches and the fusion head; returns (probabilities, cache).

    Accepts a single (size, size, 1) patch pair or batches with a leading
    batch axis; probabilities come back with the matching rank.
    """
    s4, s_single = _check_patch(small, "small", net.spec)
    l4, l_single = _check_patch(large, "large", net.spec)
    if s4.shape[0] != l4.shape[0]:
        raise ShapeError(f"batch sizes differ: {s4.shape[0]} vs {l4.shape[0]}")
    cache = ForwardCache(single=s_single and l_single)
    sf = _branch_forward(net.spec.branch, net.branch_small, s4, cache.small_steps)
    lf = _branch_forward(net.spec.branch, net.branch_large, l4, cache.large_steps)
    cache.small_feat_shape = sf.shape
    cache.large_feat_shape = lf.shape
    n = s4.shape[0]
    h = np.concatenate([sf.reshape(n, -1), lf.reshape(n, -1)], axis=1)
    for layer, p in zip(net.spec.fusion, net.fusion):
        cache.fusion_steps.append((h, None))
        h = fc_forward(h, p) if layer.kind == "fc" else relu(h)
    probs = softmax(h)
    cache.probs = probs
    return (probs[0] if cache.single else probs), cache


@dataclass
class Gradients:
    """Parameter gradients mirroring Network's parameter lists."""

    branch_small: list
    branch_large: list
    fusion: list

    def param_layers(self):
        for group in (self.branch_small, self.branch_large, self.fusion):
            for g in group:
                if g is not None:
                    yield g


def backward(net: Network, cache: ForwardCache, labels) -> Gradients:
    """Gradients of the batch-mean cross-entropy at the cached forward point."""
    probs = cache.probs
    grad = softmax_cross_entropy_backward(probs, labels)
    if grad.ndim == 1:
        grad = grad[None]
    grads = Gradients(
        [None] * len(net.branch_small),
        [None] * len(net.branch_large),
        [None] * len(net.fusion),
    )
    for i in range(len(net.spec.fusion) - 1, -1, -1):
        layer, p = net.spec.fusion[i], net.fusion[i]
        h, _ = cache.fusion_steps[i]
        if layer.kind == "fc":
            grad, dw, db = fc_backward(h, p, grad)
            grads.fusion[i] = (dw, db)
        else:
            grad = relu_backward(h, grad)
    half = int(np.prod(cache.small_feat_shape[1:]))
    gs = grad[:, :half].reshape(cache.small_feat_shape)
    gl = grad[:, half:].reshape(cache.large_feat_shape)
    _branch_backward(net.spec.branch, net.branch_small, cache.small_steps, gs,
                     grads.branch_small)
    _branch_backward(net.spec.branch, net.branch_large, cache.large_steps, gl,
                     grads.branch_large)
    return grads


# ---------------------------------------------------------------------------
# Parameter counting
# ---------------------------------------------------------------------------

def count_branch_params(spec: NetworkSpec) -> int:
    total = 0
    c = spec.input_channels
    for layer in spec.branch:
        if layer.kind == "conv":
            total += layer.kernel * layer.kernel * c * layer.channels + layer.channels
            c = layer.channels
    return total


def count_params_from_spec(spec: NetworkSpec) -> int:
    total = 2 * count_branch_params(spec)
    width = 2 * spec.branch_output_width()
    for layer in spec.fusion:
        if layer.kind == "fc":
            total += width * layer.width + layer.width
            width = layer.width
    return total


def param_count(net: Network) -> int:
    """Exact learnable scalar count, from the concrete arrays."""
    return sum(p.size() for p in net.param_layers())


# ---------------------------------------------------------------------------
# Checkpoints: magic "PFCK", version u16, u32 length-prefixed UTF-8 spec
# descriptor, then per-layer TNSR blocks (weights, bias) in spec order.
# ---------------------------------------------------------------------------

def save_checkpoint(net: Network, path) -> None:
    desc = net.spec.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        for p in net.param_layers():
            write_tensor(fh, p.weights)
            write_tensor(fh, p.bias)


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r} at offset 0")
        ver_raw = fh.read(2)
        if len(ver_raw) < 2:
            raise FormatError("truncated checkpoint version at offset 4")
        (version,) = struct.unpack("<H", ver_raw)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version} at offset 4")
        len_raw = fh.read(4)
        if len(len_raw) < 4:
            raise FormatError("truncated spec length at offset 6")
        (desc_len,) = struct.unpack("<I", len_raw)
        desc = fh.read(desc_len)
        if len(desc) < desc_len:
            raise FormatError("truncated spec descriptor at offset 10")
        spec = NetworkSpec.from_json(desc.decode("utf-8"))
        net = Network(spec, _empty_group(spec.branch), _empty_group(spec.branch),
                      _empty_group(spec.fusion))
        for group in (net.branch_small, net.branch_large, net.fusion):
            for i, slot in enumerate(group):
                if slot is _PARAM_SLOT:
                    w = read_tensor(fh)
                    b = read_tensor(fh)
                    group[i] = LayerParams.from_arrays(w, b)
        extra = fh.read(1)
        if extra:
            raise FormatError(f"trailing bytes at offset {fh.tell() - 1}")
    return net


_PARAM_SLOT = object()


def _empty_group(layers) -> list:
    return [_PARAM_SLOT if l.kind in ("conv", "fc") else None for l in layers]
