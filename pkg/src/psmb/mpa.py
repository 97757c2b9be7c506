"""Multi-scale positional alignment.

View tokens land at continuous positions on the anchor grid; a small
per-scale offset network refines those landings, and a sparse bilinear
transport matrix carries features (plus a learned per-token adapter) onto the
global grid.  Columns of the transport are normalized to 1 (mass
preservation); rows are additionally averaged by received mass by default so
constant fields stay constant.

The two baseline positional strategies (one shared table interpolated at
image-frame landings, or an independent table per scale) live here too,
selected by mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .numeric import ShapeError, Stream, Tensor, as_tensor, ops
from .numeric.tensor import active_tape, default_dtype
from .views import CropSpec, TokenGrid, image_frame_landings

MODE_SHARED = "shared"
MODE_PER_SCALE = "per_scale"
MODE_MPA = "mpa"
MODES = (MODE_SHARED, MODE_PER_SCALE, MODE_MPA)

# Rows receiving zero transport mass stay exactly zero through this guard.
_RHO_FLOOR = 1e-30


@dataclass(frozen=True)
class MpaConfig:
    mode: str = MODE_MPA
    max_offset: float = 0.5
    row_normalize: bool = True
    hidden: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown positional mode {self.mode!r}, want one of {MODES}")


@dataclass(frozen=True)
class OffsetNetParams:
    """coords (2) -> tanh hidden -> 2 offsets, tanh-bounded by max_offset."""

    W1: Tensor  # (2, hidden)
    b1: Tensor  # (hidden,)
    W2: Tensor  # (hidden, 2)
    b2: Tensor  # (2,)


def init_offset_net(stream: Stream, hidden: int = 16) -> OffsetNetParams:
    # Output layer starts at zero so refined landings equal geometric ones.
    dt = default_dtype()
    return OffsetNetParams(
        W1=Tensor(stream.fork("w1").normal(0.0, 1.0, size=(2, hidden)).astype(dt)),
        b1=Tensor(np.zeros(hidden, dtype=dt)),
        W2=Tensor(np.zeros((hidden, 2), dtype=dt)),
        b2=Tensor(np.zeros(2, dtype=dt)),
    )


def normalized_token_coords(grid_shape: Tuple[int, int]) -> np.ndarray:
    """(N, 2) token centers in [0,1]^2 of the view's own frame, raster order."""
    h, w = grid_shape
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([(xs.ravel() + 0.5) / w, (ys.ravel() + 0.5) / h], axis=1)


def offset_forward(params: OffsetNetParams, coords: np.ndarray,
                   max_offset: float) -> Tensor:
    """Per-token offsets, |delta| <= max_offset componentwise by construction."""
    c = Tensor(np.asarray(coords))
    hidden = ops.tanh(ops.add(ops.matmul(c, params.W1), params.b1))
    raw = ops.tanh(ops.add(ops.matmul(hidden, params.W2), params.b2))
    return ops.mul(raw, max_offset)


def landing_positions(landings: np.ndarray, offsets: Optional[Tensor],
                      grid_shape: Tuple[int, int]) -> Tensor:
    """Refined landings T + delta, clamped to the extended grid extent."""
    h, w = grid_shape
    base = as_tensor(np.asarray(landings))
    refined = base if offsets is None else ops.add(base, offsets)
    bounds_lo = np.array([-0.5, -0.5])
    bounds_hi = np.array([w - 0.5, h - 0.5])
    return ops.clip(refined, bounds_lo, bounds_hi)


# -- bilinear neighborhoods --------------------------------------------------

def _neighbor_data(xy: np.ndarray, grid_shape: Tuple[int, int]):
    """2x2 tent-kernel neighborhoods for landings (..., 2).

    Returns (ix, iy, mask, w_raw, w_norm) each shaped (..., 4) in the fixed
    corner order (dy, dx) = (0,0), (0,1), (1,0), (1,1), plus the kept-mass
    sum (...,).  w_norm columns sum to 1 over the kept corners.
    """
    h, w = grid_shape
    x = xy[..., 0]
    y = xy[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    wx = np.stack([1.0 - fx, fx, 1.0 - fx, fx], axis=-1)
    wy = np.stack([1.0 - fy, 1.0 - fy, fy, fy], axis=-1)
    ix = (x0[..., None] + np.array([0, 1, 0, 1])).astype(np.int64)
    iy = (y0[..., None] + np.array([0, 0, 1, 1])).astype(np.int64)
    mask = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    w_raw = wx * wy
    kept = np.where(mask, w_raw, 0.0)
    total = kept.sum(axis=-1)
    w_norm = kept / total[..., None]
    return ix, iy, mask, w_raw, w_norm, total


# -- sparse transport --------------------------------------------------------

@dataclass(frozen=True)
class TransportMatrix:
    """Sparse column-stochastic map from view tokens onto the global grid."""

    rows: np.ndarray     # (E,) global token index i
    cols: np.ndarray     # (E,) view token index j
    weights: np.ndarray  # (E,) nonnegative, per-column sum 1
    shape: Tuple[int, int]  # (N_G, N_s)

    def __post_init__(self):
        self.validate()

    def validate(self, tol: float = 1e-12) -> None:
        n_g, n_s = self.shape
        if (self.weights < 0).any():
            raise ValueError("transport weights must be nonnegative")
        if self.rows.min(initial=0) < 0 or self.rows.max(initial=0) >= n_g:
            raise ValueError("transport row index out of range")
        col_sums = np.zeros(n_s)
        np.add.at(col_sums, self.cols, self.weights)
        counts = np.bincount(self.cols, minlength=n_s)
        if counts.max(initial=0) > 4:
            raise ValueError("transport column with more than 4 entries")
        if np.abs(col_sums - 1.0).max(initial=0.0) > tol:
            raise ValueError(f"transport columns not stochastic (max err "
                             f"{np.abs(col_sums - 1.0).max():.3e})")

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.shape)
        np.add.at(dense, (self.rows, self.cols), self.weights)
        return dense


def build_transport(refined_landings: np.ndarray,
                    grid_g_shape: Tuple[int, int]) -> TransportMatrix:
    """Sparse bilinear transport from clamped landings (N_s, 2)."""
    h, w = grid_g_shape
    xy = np.asarray(refined_landings, dtype=np.float64)
    n_s = xy.shape[0]
    ix, iy, mask, _, w_norm, _ = _neighbor_data(xy, grid_g_shape)
    keep = mask & (w_norm > 0.0)
    cols = np.broadcast_to(np.arange(n_s)[:, None], keep.shape)[keep]
    rows = (iy * w + ix)[keep]
    return TransportMatrix(rows, cols, w_norm[keep], (h * w, n_s))


def transport(z: np.ndarray, pi: TransportMatrix, row_normalize: bool = True):
    """Apply the sparse transport to plain features; returns (z_tilde, rho)."""
    z = np.asarray(z)
    n_g, n_s = pi.shape
    if z.shape[0] != n_s:
        raise ShapeError(f"transport: features {z.shape} vs N_s={n_s}")
    out = np.zeros((n_g,) + z.shape[1:], dtype=np.float64)
    np.add.at(out, pi.rows, pi.weights[:, None] * z[pi.cols])
    rho = np.zeros(n_g)
    np.add.at(rho, pi.rows, pi.weights)
    if row_normalize:
        covered = rho > 0
        out[covered] /= rho[covered, None]
    return out, rho


def dump_transport_text(pi: TransportMatrix) -> str:
    """Header `N_G N_s`, then one `i j weight` line per entry, 9 significant
    digits, sorted by (i, j)."""
    order = np.lexsort((pi.cols, pi.rows))
    lines = [f"{pi.shape[0]} {pi.shape[1]}"]
    for e in order:
        lines.append(f"{pi.rows[e]} {pi.cols[e]} {pi.weights[e]:.9g}")
    return "\n".join(lines) + "\n"


# -- taped dense transport ---------------------------------------------------

def transport_weights(landings: Tensor, grid_g_shape: Tuple[int, int]) -> Tensor:
    """Dense (N_G, N_s) transport weights as a differentiable function of the
    landings; batched input (V, N_s, 2) gives (V, N_G, N_s).

    Forward values match build_transport exactly; the gradient w.r.t. each
    landing coordinate goes through the tent kernel and the drop-and-
    renormalize step in one hand-derived VJP.
    """
    landings = as_tensor(landings)
    squeeze = landings.ndim == 2
    xy = landings.data[None] if squeeze else landings.data
    v, n_s, _ = xy.shape
    h, w = grid_g_shape
    n_g = h * w

    ix, iy, mask, w_raw, w_norm, total = _neighbor_data(xy, grid_g_shape)
    cells = iy * w + ix
    cells_safe = np.where(mask, cells, 0)
    v_idx = np.broadcast_to(np.arange(v)[:, None, None], cells.shape)
    j_idx = np.broadcast_to(np.arange(n_s)[None, :, None], cells.shape)

    dense = np.zeros((v, n_g, n_s), dtype=landings.dtype)
    np.add.at(dense, (v_idx[mask], cells_safe[mask], j_idx[mask]),
              w_norm[mask].astype(landings.dtype))
    out = dense[0] if squeeze else dense

    tape = active_tape((landings,))
    if tape is None:
        return Tensor(out)

    x = xy[..., 0]
    y = xy[..., 1]
    fx = x - np.floor(x)
    fy = y - np.floor(y)

    def backward(g):
        gd = g[None] if squeeze else g
        g4 = np.where(mask, gd[v_idx, cells_safe, j_idx], 0.0)
        # w_norm = mask*w_raw/total; dL/dw_raw = mask*(g4 - P)/total where
        # P = sum over kept corners of g4*w_norm
        p = (g4 * w_norm).sum(axis=-1, keepdims=True)
        dw_raw = np.where(mask, (g4 - p) / total[..., None], 0.0)
        # corner order (0,0),(0,1),(1,0),(1,1); w_raw = wx*wy with
        # wx = [1-fx, fx, 1-fx, fx], wy = [1-fy, 1-fy, fy, fy]
        gx = ((dw_raw[..., 1] - dw_raw[..., 0]) * (1.0 - fy)
              + (dw_raw[..., 3] - dw_raw[..., 2]) * fy)
        gy = ((dw_raw[..., 2] - dw_raw[..., 0]) * (1.0 - fx)
              + (dw_raw[..., 3] - dw_raw[..., 1]) * fx)
        grad = np.stack([gx, gy], axis=-1)
        return ((grad[0] if squeeze else grad),)

    return tape.emit(out, (landings,), backward)


def transport_apply(weights: Tensor, z: Tensor, row_normalize: bool = True):
    """Taped transport: (weights @ z, rho); rows averaged by received mass
    when row_normalize is set, zero-mass rows left exactly zero."""
    out = ops.matmul(weights, z)
    rho = ops.tsum(weights, axis=-1)
    if row_normalize:
        denom = ops.maximum_const(rho, _RHO_FLOOR)
        shape = rho.shape + (1,)
        out = ops.div(out, ops.reshape(denom, shape))
    return out, rho


def apply_adapter(z: Tensor, adapter: Tensor, weights: Tensor,
                  row_normalize: bool = True):
    """Transport of (z + P); linear in both arguments at row_normalize off."""
    return transport_apply(weights, ops.add(z, adapter), row_normalize)


def effective_mask(visibility_bits: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Supervise only tokens both visible and actually receiving mass."""
    return (visibility_bits.astype(bool) & (np.asarray(rho) > 0)).astype(np.uint8)


# -- positional modes --------------------------------------------------------

def interpolate_table(table: Tensor, landings: np.ndarray,
                      grid_shape: Tuple[int, int]) -> Tensor:
    """Bilinear read of a (N_G, d) table at continuous landings (N_s, 2);
    batched landings (V, N_s, 2) give (V, N_s, d)."""
    h, w = grid_shape
    clamped = np.clip(np.asarray(landings),
                      [-0.5, -0.5], [w - 0.5, h - 0.5])
    weights = transport_weights(Tensor(clamped), grid_shape)  # (N_G, N_s)
    axes = (1, 0) if weights.ndim == 2 else (0, 2, 1)
    return ops.matmul(ops.transpose(weights, axes), table)


def shared_embedding_pos(table: Tensor, view: CropSpec, grid_s: TokenGrid,
                         grid_g_shape: Tuple[int, int]) -> Tensor:
    """Shared-table baseline: interpolate at image-frame landings."""
    landings = image_frame_landings(view, grid_s, grid_g_shape)
    return interpolate_table(table, landings, grid_g_shape)
