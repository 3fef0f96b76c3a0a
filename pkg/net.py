"""
Fully-convolutional saliency network in numpy.

Images are (C, H, W) float64 stacks. Convolutions are stride 1 with same
(zero) padding, pools are 2x2 with stride 2, and the last layer emits one
channel: the response map whose softmax is the predicted distribution.
"""

import struct
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, model_validator

from core import GridMap, PixelDistribution, softmax
from errors import FormatError, InvalidInputError, ShapeMismatchError
from models import LayerKind, LayerSpec
from pipeline import upsample_bilinear

CHECKPOINT_MAGIC = b"SALDIST1"
CHECKPOINT_VERSION = 1

_KIND_CODES = {LayerKind.conv: 0, LayerKind.relu: 1, LayerKind.maxpool: 2}
_CODE_KINDS = {code: kind for kind, code in _KIND_CODES.items()}

# Per conv layer: (weight gradient, bias gradient); None for other or frozen layers
ParamGrads = List[Optional[Tuple[np.ndarray, np.ndarray]]]


def default_layers(in_channels: int = 1) -> List[LayerSpec]:
    """
    Toy trunk (three 3x3 convs, two pools, lr x0.1) and a new head
    (3x3 conv to 8 channels, 1x1 conv to the response, lr x1).
    """
    trunk = dict(kind=LayerKind.conv, kernel_size=3, lr_multiplier=0.1)
    head = dict(kind=LayerKind.conv, lr_multiplier=1.0, init_sigma=0.01)
    relu = LayerSpec(kind=LayerKind.relu)
    pool = LayerSpec(kind=LayerKind.maxpool)
    return [
        LayerSpec(in_channels=in_channels, out_channels=16, **trunk),
        relu,
        pool,
        LayerSpec(in_channels=16, out_channels=16, **trunk),
        relu,
        pool,
        LayerSpec(in_channels=16, out_channels=16, **trunk),
        relu,
        LayerSpec(in_channels=16, out_channels=8, kernel_size=3, **head),
        relu,
        LayerSpec(in_channels=8, out_channels=1, kernel_size=1, **head),
    ]


class FcnModel(BaseModel):
    """Ordered layers with their conv weights (out, in, k, k) and biases (out,)"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    layers: List[LayerSpec]
    weights: List[Optional[np.ndarray]]
    biases: List[Optional[np.ndarray]]

    @model_validator(mode="after")
    def _check_architecture(self) -> "FcnModel":
        if not self.layers:
            raise ValueError("A model needs at least one layer")
        if not (len(self.layers) == len(self.weights) == len(self.biases)):
            raise ValueError("layers, weights and biases differ in length")

        channels = None
        for index, spec in enumerate(self.layers):
            if spec.kind != LayerKind.conv:
                continue
            if channels is not None and spec.in_channels != channels:
                raise ValueError(
                    f"Layer {index} expects {spec.in_channels} channels, gets {channels}"
                )
            channels = spec.out_channels
            k = spec.kernel_size
            expected = (spec.out_channels, spec.in_channels, k, k)
            weight, bias = self.weights[index], self.biases[index]
            if weight is None or weight.shape != expected:
                raise ValueError(f"Layer {index} weight must have shape {expected}")
            if bias is None or bias.shape != (spec.out_channels,):
                raise ValueError(f"Layer {index} bias must have shape ({spec.out_channels},)")
        if channels != 1:
            raise ValueError("The last conv layer must output exactly 1 channel")
        return self

    @classmethod
    def initialize(cls, layers: List[LayerSpec], seed: int = 0) -> "FcnModel":
        """
        Zero-mean Gaussian weights, zero biases.

        A layer without init_sigma uses sqrt(2 / fan_in).
        """
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for spec in layers:
            if spec.kind != LayerKind.conv:
                weights.append(None)
                biases.append(None)
                continue
            k = spec.kernel_size
            fan_in = spec.in_channels * k * k
            sigma = spec.init_sigma if spec.init_sigma is not None else np.sqrt(2.0 / fan_in)
            weights.append(rng.normal(0.0, sigma, size=(spec.out_channels, spec.in_channels, k, k)))
            biases.append(np.zeros(spec.out_channels))
        return cls(layers=layers, weights=weights, biases=biases)

    @property
    def in_channels(self) -> int:
        return next(s.in_channels for s in self.layers if s.kind == LayerKind.conv)

    @property
    def downsample_factor(self) -> int:
        return 2 ** sum(1 for s in self.layers if s.kind == LayerKind.maxpool)

    def conv_indices(self) -> List[int]:
        return [i for i, s in enumerate(self.layers) if s.kind == LayerKind.conv]

    def copy(self) -> "FcnModel":
        return FcnModel(
            layers=list(self.layers),
            weights=[None if w is None else w.copy() for w in self.weights],
            biases=[None if b is None else b.copy() for b in self.biases],
        )


def as_image(image, channels: Optional[int] = None) -> np.ndarray:
    """Validate an image as a finite (C, H, W) float64 stack; 2-D means one channel"""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.size == 0:
        raise InvalidInputError(f"Image must be (C, H, W), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("Image holds non-finite values")
    if channels is not None and x.shape[0] != channels:
        raise ShapeMismatchError(f"Model expects {channels} channels, image has {x.shape[0]}")
    return x


def _conv_windows(x: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    padded = np.pad(x, ((0, 0), (r, r), (r, r)))
    # (C, H, W, k, k)
    return sliding_window_view(padded, (k, k), axis=(1, 2))


def _conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    windows = _conv_windows(x, weight.shape[-1])
    out = np.tensordot(weight, windows, axes=([1, 2, 3], [0, 3, 4]))
    return out + bias[:, None, None], windows


def _conv_backward(
    grad_out: np.ndarray, windows: np.ndarray, weight: np.ndarray, need_input: bool
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    grad_weight = np.tensordot(grad_out, windows, axes=([1, 2], [1, 2]))
    grad_bias = grad_out.sum(axis=(1, 2))
    if not need_input:
        return grad_weight, grad_bias, None

    k = weight.shape[-1]
    r = k // 2
    _, height, width = grad_out.shape
    grad_padded = np.zeros((weight.shape[1], height + 2 * r, width + 2 * r))
    for di in range(k):
        for dj in range(k):
            grad_padded[:, di : di + height, dj : dj + width] += np.tensordot(
                weight[:, :, di, dj], grad_out, axes=([0], [0])
            )
    return grad_weight, grad_bias, grad_padded[:, r : r + height, r : r + width]


def _pool_blocks(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)


def _pool_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    blocks = _pool_blocks(x)
    argmax = np.argmax(blocks, axis=-1)[..., None]
    return np.take_along_axis(blocks, argmax, axis=-1)[..., 0], argmax


def _pool_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    c, h2, w2 = grad_out.shape
    blocks = np.zeros((c, h2, w2, 4))
    np.put_along_axis(blocks, argmax, grad_out[..., None], axis=-1)
    return blocks.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2)


def _run_forward(model: FcnModel, image) -> Tuple[np.ndarray, list]:
    x = as_image(image, model.in_channels)
    d = model.downsample_factor
    if x.shape[1] % d or x.shape[2] % d:
        raise ShapeMismatchError(
            f"Image {x.shape[1]}x{x.shape[2]} not divisible by downsample factor {d}"
        )

    caches = []
    for index, spec in enumerate(model.layers):
        if spec.kind == LayerKind.conv:
            x, windows = _conv_forward(x, model.weights[index], model.biases[index])
            caches.append(windows)
        elif spec.kind == LayerKind.relu:
            mask = x > 0
            x = x * mask
            caches.append(mask)
        else:
            x, argmax = _pool_forward(x)
            caches.append(argmax)
    return x[0], caches


def forward(model: FcnModel, image) -> GridMap:
    """Response map at 1/downsample_factor of the input resolution"""
    response, _ = _run_forward(model, image)
    return response


def forward_backward(
    model: FcnModel, image, grad_fn, frozen_prefix: int = 0
) -> Tuple[GridMap, ParamGrads, object]:
    """
    One forward pass, then backward with the upstream gradient grad_fn(response).

    grad_fn returns (grad_response, extra); extra is passed through so
    callers can carry the loss value out of the same pass.
    """
    response, caches = _run_forward(model, image)
    grad_response, extra = grad_fn(response)
    return response, _run_backward(model, caches, grad_response, frozen_prefix), extra


def backward(model: FcnModel, image, grad_response: GridMap, frozen_prefix: int = 0) -> ParamGrads:
    """
    Parameter gradients for the upstream gradient dL/d(response).

    Layers before frozen_prefix get None and are not back-propagated into.
    """
    response, caches = _run_forward(model, image)
    return _run_backward(model, caches, grad_response, frozen_prefix, response.shape)


def _run_backward(model, caches, grad_response, frozen_prefix, expected_shape=None) -> ParamGrads:
    grad = np.asarray(grad_response, dtype=np.float64)
    if expected_shape is not None and grad.shape != expected_shape:
        raise ShapeMismatchError(
            f"Upstream gradient {grad.shape} does not match response {expected_shape}"
        )
    grad = grad[None]
    grads: ParamGrads = [None] * len(model.layers)

    for index in range(len(model.layers) - 1, frozen_prefix - 1, -1):
        spec = model.layers[index]
        need_input = index > frozen_prefix
        if spec.kind == LayerKind.conv:
            grad_weight, grad_bias, grad = _conv_backward(
                grad, caches[index], model.weights[index], need_input
            )
            grads[index] = (grad_weight, grad_bias)
        elif not need_input:
            break
        elif spec.kind == LayerKind.relu:
            grad = grad * caches[index]
        else:
            grad = _pool_backward(grad, caches[index])
    return grads


def predict(model: FcnModel, image) -> PixelDistribution:
    """softmax(upsample_bilinear(forward(model, image))) at input resolution"""
    x = as_image(image, model.in_channels)
    response = forward(model, x)
    return softmax(upsample_bilinear(response, x.shape[1], x.shape[2]))


def save_checkpoint(model: FcnModel, path: Path) -> None:
    """
    Binary checkpoint: magic, version and layer count, then per layer its
    spec followed by conv weights and biases as little-endian float64.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(model.layers))]
    for index, spec in enumerate(model.layers):
        init_sigma = np.nan if spec.init_sigma is None else spec.init_sigma
        chunks.append(
            struct.pack(
                "<BIIIdd",
                _KIND_CODES[spec.kind],
                spec.in_channels,
                spec.out_channels,
                spec.kernel_size,
                spec.lr_multiplier,
                init_sigma,
            )
        )
        if spec.kind == LayerKind.conv:
            chunks.append(model.weights[index].astype("<f8").tobytes())
            chunks.append(model.biases[index].astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f"Checkpoint {self.path} is truncated")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def load_checkpoint(path: Path) -> FcnModel:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"Checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a model checkpoint")
    version, n_layers = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}")

    layers, weights, biases = [], [], []
    for _ in range(n_layers):
        code, in_ch, out_ch, k, lr_multiplier, init_sigma = reader.unpack("<BIIIdd")
        if code not in _CODE_KINDS:
            raise FormatError(f"Unknown layer code {code} in {path}")
        try:
            spec = LayerSpec(
                kind=_CODE_KINDS[code],
                in_channels=in_ch,
                out_channels=out_ch,
                kernel_size=k,
                lr_multiplier=lr_multiplier,
                init_sigma=None if np.isnan(init_sigma) else init_sigma,
            )
        except ValueError as e:
            raise FormatError(f"Invalid layer in {path}: {e}")
        layers.append(spec)
        if spec.kind == LayerKind.conv:
            weights.append(reader.floats((out_ch, in_ch, k, k)))
            biases.append(reader.floats((out_ch,)))
        else:
            weights.append(None)
            biases.append(None)

    if reader.offset != len(reader.data):
        raise FormatError(f"Trailing bytes in checkpoint {path}")
    try:
        return FcnModel(layers=layers, weights=weights, biases=biases)
    except ValueError as e:
        raise FormatError(f"Invalid model in {path}: {e}")
