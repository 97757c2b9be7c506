"""Finite-difference verification of taped gradients.

Relative error per checked coordinate is |analytic - central| / (|central| +
1e-8).  Checks should run under float64 (see ``using_dtype``): with float32
state, central differences at h=1e-3 measure rounding noise, not the
derivative.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .rng import Stream
from .tensor import Tape, Tensor


def finite_diff_errors(
    fn: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    coords: Sequence[Tuple[int, Tuple[int, ...]]],
    h: float = 1e-3,
) -> List[float]:
    """Relative errors at chosen coordinates.

    ``fn`` maps a list of taped parameter tensors to a scalar loss tensor on
    the same tape.  ``coords`` is a list of (param_index, element_index)
    pairs.  Returns one relative error per pair.
    """
    tape = Tape()
    taped = [tape.watch(Tensor(p)) for p in params]
    loss = fn(taped)
    grads = tape.backward(loss)
    analytic = [grads[t] for t in taped]

    def eval_at(pi: int, idx: Tuple[int, ...], delta: float) -> float:
        bumped = [p.copy() for p in params]
        bumped[pi][idx] += delta
        t2 = Tape()
        taped2 = [t2.watch(Tensor(p)) for p in bumped]
        return fn(taped2).item()

    errors = []
    for pi, idx in coords:
        f_plus = eval_at(pi, idx, h)
        f_minus = eval_at(pi, idx, -h)
        central = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[pi][idx])
        errors.append(abs(a - central) / (abs(central) + 1e-8))
    return errors


def sample_coords(
    shapes: Sequence[Tuple[int, ...]],
    n_total: int,
    stream: Stream,
) -> List[Tuple[int, Tuple[int, ...]]]:
    """Pick ~n_total coordinates spread over all params, at least 1 each."""
    sizes = [int(np.prod(s)) if s else 1 for s in shapes]
    total = sum(sizes)
    coords: List[Tuple[int, Tuple[int, ...]]] = []
    for pi, (shape, size) in enumerate(zip(shapes, sizes)):
        quota = max(1, round(n_total * size / total))
        quota = min(quota, size)
        flat = stream.fork("coords", pi).integers(0, size, size=quota)
        for f in np.unique(flat):
            coords.append((pi, np.unravel_index(int(f), shape) if shape else ()))
    return coords


def finite_diff_check(
    fn: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    n_coords: int = 60,
    h: float = 1e-3,
    tol: float = 1e-3,
    seed: int = 0,
) -> Dict[str, float]:
    """Sampled check; returns max/fraction-passing summary."""
    stream = Stream(seed, "gradcheck")
    coords = sample_coords([p.shape for p in params], n_coords, stream)
    errors = finite_diff_errors(fn, params, coords, h=h)
    arr = np.asarray(errors)
    return {
        "n": len(errors),
        "max_rel": float(arr.max()),
        "median_rel": float(np.median(arr)),
        "frac_ok": float((arr < tol).mean()),
    }
