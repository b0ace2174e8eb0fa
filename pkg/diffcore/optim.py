from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .nn import ParameterStore
from .tensor import DTYPE, MissingGradientError


@dataclass
class AdamState:
    """First/second moment buffers and step counter for bias-corrected Adam."""

    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        """Flatten into checkpointable arrays (``adam.m/<name>``, ``adam.v/<name>``, ``adam.t``)."""
        arrays = {"adam.t": np.array([self.t], dtype=DTYPE)}
        for name in self.m:
            arrays[f"adam.m/{name}"] = self.m[name]
            arrays[f"adam.v/{name}"] = self.v[name]
        return arrays

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"][0])
        self.m = {k[len("adam.m/"):]: np.array(v, dtype=DTYPE) for k, v in arrays.items() if k.startswith("adam.m/")}
        self.v = {k[len("adam.v/"):]: np.array(v, dtype=DTYPE) for k, v in arrays.items() if k.startswith("adam.v/")}


def adam_step(params: ParameterStore, state: AdamState) -> None:
    """
    Apply one bias-corrected Adam update to every trainable parameter, in place.

    Gradients are zeroed afterwards. Frozen parameters are skipped.

    Args:
        params: Parameters whose ``grad`` buffers are populated
        state: Optimizer state, updated in place

    Raises:
        MissingGradientError: A trainable parameter has no gradient
    """
    trainable = params.trainable()
    for name, tensor in trainable:
        if tensor.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, tensor in trainable:
        grad = tensor.grad
        m = state.m.setdefault(name, np.zeros_like(tensor.data))
        v = state.v.setdefault(name, np.zeros_like(tensor.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        tensor.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(DTYPE)
        grad[...] = 0.0
