from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-3,
    rng: Optional[np.random.Generator] = None,
    max_entries: int = 24,
) -> float:
    """
    Compare backward against central finite differences.

    The output of ``fn`` is reduced to a scalar with a fixed random projection
    (accumulated in float64). Up to ``max_entries`` randomly chosen elements of
    every input are perturbed by +-``step``.

    Args:
        fn: Rebuilds the output from the current values of ``inputs``
        inputs: Leaves with ``requires_grad=True``
        step: Finite-difference step
        rng: Generator choosing the projection and the sampled entries
        max_entries: Probed elements per input

    Returns:
        Largest relative error ||analytic - numeric|| / max(||analytic||, ||numeric||) over the inputs
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None

    out = fn()
    projection = rng.standard_normal(out.shape).astype(np.float32)
    (out * Tensor(projection)).sum().backward()
    projection64 = projection.astype(np.float64)

    def objective() -> float:
        with no_grad():
            return float(np.sum(fn().data.astype(np.float64) * projection64))

    worst = 0.0
    for t in inputs:
        analytic_full = np.zeros(t.shape, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64)
        flat = t.data.reshape(-1)
        count = min(max_entries, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        analytic = analytic_full.reshape(-1)[picks]
        numeric = np.empty(count)
        for i, idx in enumerate(picks):
            original = flat[idx]
            flat[idx] = original + step
            hi_x = float(flat[idx])
            hi = objective()
            flat[idx] = original - step
            lo_x = float(flat[idx])
            lo = objective()
            flat[idx] = original
            numeric[i] = (hi - lo) / (hi_x - lo_x)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
