"""Scan timing harness for the linear-time property.

Times the fused selective scan at a list of sequence lengths with fixed
batch, channel, and state sizes, so wall time should scale linearly in N.
Screening is disabled while timing; the kernel is warmed first so numba
compilation never lands in a measurement.
"""

from __future__ import annotations

import time
from typing import List, Sequence, Tuple

import numpy as np

from .numeric import Stream
from .numeric.tensor import unchecked
from .ssm import selective_scan

_V, _D, _K = 4, 16, 8


def _scan_inputs(n: int, stream: Stream):
    s = stream.fork("bench", n)
    delta = s.fork("delta").uniform(0.2, 1.0, size=(_V, n, _D)).astype(np.float32)
    a = -s.fork("a").uniform(0.05, 0.8, size=(_D, _K)).astype(np.float32)
    bm = s.fork("b").normal(0.0, 1.0, size=(_V, n, _K)).astype(np.float32)
    c = s.fork("c").normal(0.0, 1.0, size=(_V, n, _K)).astype(np.float32)
    u = s.fork("u").normal(0.0, 1.0, size=(_V, n, _D)).astype(np.float32)
    return delta, a, bm, c, u


def time_scan(n: int, reps: int = 5, seed: int = 0) -> float:
    """Median wall milliseconds of one bidirectional scan pair at length n."""
    inputs = _scan_inputs(n, Stream(seed, "scan-bench"))
    with unchecked():
        selective_scan(*inputs)  # warm compile + caches
        samples = []
        for _ in range(reps):
            t0 = time.perf_counter()
            selective_scan(*inputs)
            selective_scan(*inputs, reverse=True)
            samples.append((time.perf_counter() - t0) * 1000.0)
    return float(np.median(samples))


def scan_timings(lengths: Sequence[int], reps: int = 5,
                 seed: int = 0) -> List[Tuple[int, float]]:
    out = []
    for n in lengths:
        if n < 1:
            raise ValueError(f"bench length must be positive, got {n}")
        out.append((int(n), time_scan(int(n), reps=reps, seed=seed)))
    return out


def timings_csv(rows: Sequence[Tuple[int, float]]) -> str:
    lines = ["N,ms"] + [f"{n},{ms:.3f}" for n, ms in rows]
    return "\n".join(lines) + "\n"
