"""
Neural-network primitives built on ``diffcore.tensor``: N-d convolution,
2x average pooling / nearest upsampling, bilinear feature sampling, linear
layers, sine-network initialization, and the named parameter store.
"""

import itertools
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, Function, ShapeError, Tensor, as_tensor


def _spatial_index(offset: Sequence[int], extent: Sequence[int], stride: int) -> Tuple[slice, ...]:
    return tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, extent))


class ConvNd(Function):
    """Cross-correlation of a ``[C_in, *S]`` input with a ``[C_out, C_in, *k]`` kernel."""

    def forward(self, x, kernel, stride=1, padding=0):
        nd = x.ndim - 1
        if kernel.ndim != nd + 2:
            raise ShapeError(f"kernel {kernel.shape} does not match {nd}-d input {x.shape}")
        if kernel.shape[1] != x.shape[0]:
            raise ShapeError(f"input channels {x.shape} do not match kernel {kernel.shape}")
        k = kernel.shape[2:]
        if any(size % 2 == 0 for size in k):
            raise ShapeError(f"kernel extents must be odd, got {kernel.shape}")
        if stride < 1 or padding < 0:
            raise ValueError(f"invalid stride {stride} / padding {padding}")

        self.nd, self.stride, self.padding = nd, stride, padding
        pad = [(0, 0)] + [(padding, padding)] * nd
        xp = np.pad(x, pad) if padding else x
        if any(xp.shape[1 + i] < k[i] for i in range(nd)):
            raise ShapeError(f"input {x.shape} is smaller than kernel {kernel.shape} after padding {padding}")
        windows = sliding_window_view(xp, k, axis=tuple(range(1, nd + 1)))
        windows = windows[(slice(None),) + (slice(None, None, stride),) * nd]
        self.padded_shape = xp.shape
        self.windows = windows
        self.out_extent = windows.shape[1:nd + 1]

        kernel_axes = [1] + list(range(2, nd + 2))
        window_axes = [0] + list(range(nd + 1, 2 * nd + 1))
        return np.tensordot(kernel, windows, axes=(kernel_axes, window_axes)).astype(DTYPE)

    def backward(self, grad):
        x, kernel = self.inputs
        nd = self.nd
        spatial = list(range(1, nd + 1))
        grad_kernel = np.tensordot(grad, self.windows, axes=(spatial, spatial)).astype(DTYPE)

        grad_padded = np.zeros(self.padded_shape, dtype=DTYPE)
        kdata = kernel.data
        for offset in itertools.product(*(range(n) for n in kdata.shape[2:])):
            tap = kdata[(slice(None), slice(None)) + offset]
            contribution = np.tensordot(tap, grad, axes=([0], [0]))
            grad_padded[(slice(None),) + _spatial_index(offset, self.out_extent, self.stride)] += contribution

        if self.padding:
            p = self.padding
            grad_x = grad_padded[(slice(None),) + tuple(slice(p, p + n) for n in x.shape[1:])]
        else:
            grad_x = grad_padded
        return np.ascontiguousarray(grad_x), grad_kernel


class AvgPool2x(Function):
    """Average over non-overlapping 2x...x2 blocks of every spatial axis."""

    def forward(self, x):
        spatial = x.shape[1:]
        if any(n % 2 for n in spatial):
            raise ShapeError(f"pooling needs even spatial extents, got {x.shape}")
        blocked = []
        for n in spatial:
            blocked += [n // 2, 2]
        self.pair_axes = tuple(range(2, 2 + 2 * len(spatial), 2))
        return x.reshape((x.shape[0], *blocked)).mean(axis=self.pair_axes)

    def backward(self, grad):
        x = self.inputs[0]
        scale = 1.0 / (2 ** (x.ndim - 1))
        out = grad * scale
        for axis in range(1, x.ndim):
            out = np.repeat(out, 2, axis=axis)
        return (out,)


class Upsample2x(Function):
    """Nearest-neighbor doubling of every spatial axis."""

    def forward(self, x):
        out = x
        for axis in range(1, x.ndim):
            out = np.repeat(out, 2, axis=axis)
        return out

    def backward(self, grad):
        x = self.inputs[0]
        blocked = []
        for n in x.shape[1:]:
            blocked += [n, 2]
        pair_axes = tuple(range(2, 2 + 2 * (x.ndim - 1), 2))
        return (grad.reshape((x.shape[0], *blocked)).sum(axis=pair_axes),)


class BilinearSample(Function):
    """
    Sample a ``[C, H, W]`` image at continuous ``(row, col)`` pixel coordinates.

    Coordinates are clamped to the image (clamp-to-edge) and never receive
    gradients.
    """

    def forward(self, image, coords):
        if image.ndim != 3:
            raise ShapeError(f"bilinear_sample expects a [C, H, W] image, got {image.shape}")
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ShapeError(f"bilinear_sample expects [N, 2] coordinates, got {coords.shape}")
        _, h, w = image.shape
        rows = np.clip(coords[:, 0].astype(np.float64), 0.0, h - 1)
        cols = np.clip(coords[:, 1].astype(np.float64), 0.0, w - 1)
        r0 = np.clip(np.floor(rows).astype(np.int64), 0, max(h - 2, 0))
        c0 = np.clip(np.floor(cols).astype(np.int64), 0, max(w - 2, 0))
        r1 = np.minimum(r0 + 1, h - 1)
        c1 = np.minimum(c0 + 1, w - 1)
        fr = (rows - r0).astype(DTYPE)
        fc = (cols - c0).astype(DTYPE)

        self.width = w
        self.corners = [
            (r0 * w + c0, (1 - fr) * (1 - fc)),
            (r0 * w + c1, (1 - fr) * fc),
            (r1 * w + c0, fr * (1 - fc)),
            (r1 * w + c1, fr * fc),
        ]
        flat = image.reshape(image.shape[0], -1).T
        out = np.zeros((coords.shape[0], image.shape[0]), dtype=DTYPE)
        for index, weight in self.corners:
            out += flat[index] * weight[:, None]
        return out

    def backward(self, grad):
        image = self.inputs[0]
        flat_grad = np.zeros((image.shape[1] * image.shape[2], image.shape[0]), dtype=DTYPE)
        for index, weight in self.corners:
            np.add.at(flat_grad, index, grad * weight[:, None])
        return flat_grad.T.reshape(image.shape), None


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2D convolution of a ``[C_in, H, W]`` input.

    Output extent per axis is ``(H + 2*padding - k) // stride + 1``.
    """
    if as_tensor(x).ndim != 3:
        raise ShapeError(f"conv2d expects a [C, H, W] input, got {as_tensor(x).shape}")
    out = ConvNd.apply(x, kernel, stride=stride, padding=padding)
    return out if bias is None else out + bias.reshape(-1, 1, 1)


def conv3d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D convolution of a ``[C_in, D, H, W]`` input."""
    if as_tensor(x).ndim != 4:
        raise ShapeError(f"conv3d expects a [C, D, H, W] input, got {as_tensor(x).shape}")
    out = ConvNd.apply(x, kernel, stride=stride, padding=padding)
    return out if bias is None else out + bias.reshape(-1, 1, 1, 1)


def avg_pool(x: Tensor) -> Tensor:
    """2x average pooling over every spatial axis of a channel-first tensor."""
    return AvgPool2x.apply(x)


def upsample(x: Tensor) -> Tensor:
    """2x nearest-neighbor upsampling over every spatial axis."""
    return Upsample2x.apply(x)


def bilinear_sample(image: Tensor, coords: Union[np.ndarray, Tensor]) -> Tensor:
    """Returns ``[N, C]`` features interpolated from the 4 nearest pixels."""
    coords = coords.data if isinstance(coords, Tensor) else np.asarray(coords, dtype=np.float64)
    return BilinearSample.apply(image, Tensor(coords))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped ``[in, out]``."""
    out = x @ weight
    return out if bias is None else out + bias


def sine_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, omega: float = 1.0) -> np.ndarray:
    """Sine-network initialization: uniform in +-sqrt(6 / fan_in) / omega."""
    bound = np.sqrt(6.0 / fan_in) / omega
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(DTYPE)


class ParameterStore:
    """
    Named, ordered learnable tensors.

    Trainable entries are created with ``requires_grad=True``; frozen entries
    (fixed encodings, a pretrained network) keep ``requires_grad=False`` and
    never accumulate gradients.
    """

    def __init__(self):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor = Tensor(value, requires_grad=trainable, name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._tensors.items())

    def trainable(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self._tensors.items() if t.requires_grad]

    def freeze(self) -> None:
        for tensor in self._tensors.values():
            tensor.requires_grad = False
            tensor.grad = None

    def zero_grad(self) -> None:
        for tensor in self._tensors.values():
            tensor.grad = None

    def to_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data.copy()) for n, t in self._tensors.items())

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Overwrite every parameter in place from ``arrays`` (names and shapes must match)."""
        missing = [n for n in self._tensors if n not in arrays]
        if missing:
            raise KeyError(f"checkpoint is missing parameters: {', '.join(missing)}")
        for name, tensor in self._tensors.items():
            value = np.asarray(arrays[name], dtype=DTYPE)
            if value.shape != tensor.shape:
                raise ShapeError(f"parameter {name!r}: checkpoint shape {value.shape} != model shape {tensor.shape}")
            tensor.data[...] = value

    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())
