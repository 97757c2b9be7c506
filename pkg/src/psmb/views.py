"""Multi-granular crop sampling and exact view-to-global geometry.

Windows live in normalized [0,1]^2 image coordinates; token landings live in
continuous global-grid units where integer positions are token centers
(x_grid = x_pix / patch - 0.5).  No integer snapping anywhere: downstream
alignment learns sub-cell offsets on top of these coordinates.

Photometric jitter changes pixel values only; every geometric quantity is
derived from the window and flip bit alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .numeric import ShapeError, Stream


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class ViewConfig:
    """Resolutions, counts and crop ranges for the three scales."""

    res: Dict[str, int] = field(default_factory=lambda: {"G": 224, "M": 160, "L": 96})
    n_global: int = 2
    n_mid: int = 6
    n_local: int = 6
    area: Dict[str, Tuple[float, float]] = field(default_factory=lambda: {
        "G": (0.4, 1.0), "M": (0.15, 0.55), "L": (0.05, 0.30)})
    aspect: Tuple[float, float] = (0.75, 4.0 / 3.0)
    flip_p: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    grayscale_p: float = 0.1
    blur_p: float = 0.0
    max_resample: int = 16

    def grid(self, tag: str, patch: int) -> Tuple[int, int]:
        r = self.res[tag]
        if r % patch:
            raise ShapeError(f"view {tag}: resolution {r} not divisible by patch {patch}")
        return (r // patch, r // patch)


# -- domain types ------------------------------------------------------------

@dataclass(frozen=True)
class CropSpec:
    """One crop window: (x0, y0, w, h) normalized, plus output size and flip."""

    window: Tuple[float, float, float, float]
    resolution: int
    scale_tag: str
    flip: bool

    def __post_init__(self):
        x0, y0, w, h = self.window
        if not (w > 0 and h > 0 and 0 <= x0 <= 1 - w + 1e-9 and 0 <= y0 <= 1 - h + 1e-9):
            raise ValueError(f"window {self.window} not contained in the unit square")


@dataclass(frozen=True)
class TokenGrid:
    """Token centers of a view, in the view's own pixel frame."""

    shape: Tuple[int, int]
    patch: int

    @property
    def centers(self) -> np.ndarray:
        """(N, 2) array of (x, y) pixel centers in raster order."""
        h, w = self.shape
        ys, xs = np.mgrid[0:h, 0:w]
        cx = (xs + 0.5) * self.patch
        cy = (ys + 0.5) * self.patch
        return np.stack([cx.ravel(), cy.ravel()], axis=1).astype(np.float64)


@dataclass(frozen=True)
class ViewBatch:
    """All crops for one image; the anchor is one of the Global crops.

    The standard configuration has exactly 2 Global, 6 Mid, 6 Local crops;
    ablation variants may reduce the Mid/Local counts through ViewConfig.
    """

    globals_: Tuple[CropSpec, ...]
    mids: Tuple[CropSpec, ...]
    locals_: Tuple[CropSpec, ...]
    anchor: int = 0

    def __post_init__(self):
        if not 0 <= self.anchor < len(self.globals_):
            raise ValueError(f"anchor {self.anchor} out of range")


@dataclass(frozen=True)
class VisibilityMask:
    bits: np.ndarray  # (N_G,) uint8 in {0, 1}

    @property
    def count(self) -> int:
        return int(self.bits.sum())


# -- window sampling ---------------------------------------------------------

def _intersects(a: Tuple[float, float, float, float],
                b: Tuple[float, float, float, float]) -> bool:
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    return ax0 < bx0 + bw and bx0 < ax0 + aw and ay0 < by0 + bh and by0 < ay0 + ah


def _sample_window(stream: Stream, area_range, aspect_range):
    area = stream.uniform(*area_range)
    log_aspect = stream.uniform(np.log(aspect_range[0]), np.log(aspect_range[1]))
    aspect = np.exp(log_aspect)
    w = min(1.0, float(np.sqrt(area * aspect)))
    h = min(1.0, float(np.sqrt(area / aspect)))
    x0 = float(stream.uniform(0.0, 1.0 - w))
    y0 = float(stream.uniform(0.0, 1.0 - h))
    return (x0, y0, w, h)


def _center_on(anchor, w, h):
    ax0, ay0, aw, ah = anchor
    x0 = min(max(ax0 + aw / 2 - w / 2, 0.0), 1.0 - w)
    y0 = min(max(ay0 + ah / 2 - h / 2, 0.0), 1.0 - h)
    return (x0, y0, w, h)


def sample_views(stream: Stream, config: ViewConfig) -> ViewBatch:
    """Draw one ViewBatch; every non-anchor window intersects the anchor.

    Windows failing the overlap check are resampled up to config.max_resample
    times, then translated to be centered on the anchor, so the result is
    always geometrically valid.
    """
    def crop(tag: str, index: int, anchor_window=None) -> CropSpec:
        s = stream.fork(tag, index)
        window = _sample_window(s, config.area[tag], config.aspect)
        if anchor_window is not None:
            for attempt in range(config.max_resample):
                if _intersects(window, anchor_window):
                    break
                window = _sample_window(s.fork("retry", attempt),
                                        config.area[tag], config.aspect)
            else:
                window = _center_on(anchor_window, window[2], window[3])
        flip = bool(s.fork("flip").random() < config.flip_p)
        return CropSpec(window, config.res[tag], tag, flip)

    anchor_crop = crop("G", 0)
    aw = anchor_crop.window
    globals_ = [anchor_crop] + [crop("G", i, aw) for i in range(1, config.n_global)]
    mids = [crop("M", i, aw) for i in range(config.n_mid)]
    locals_ = [crop("L", i, aw) for i in range(config.n_local)]
    return ViewBatch(tuple(globals_), tuple(mids), tuple(locals_), anchor=0)


# -- geometry ----------------------------------------------------------------

def geometry_map(view: CropSpec, anchor: CropSpec,
                 grid_s: TokenGrid, grid_g: TokenGrid) -> np.ndarray:
    """Landings of view token centers on the anchor's grid, (N_s, 2) as (x, y).

    Chain: view token center -> view-normalized (undoing the view flip) ->
    image coordinates through the view window -> anchor-normalized through
    the anchor window inverse (redoing the anchor flip, since the anchor grid
    indexes the flipped crop) -> continuous grid units.  Tokens outside the
    anchor window land outside [0, W_G-1] x [0, H_G-1].
    """
    vx0, vy0, vw, vh = view.window
    ax0, ay0, aw, ah = anchor.window
    if not _intersects(view.window, anchor.window):
        raise ValueError(f"view window {view.window} disjoint from anchor {anchor.window}")

    centers = grid_s.centers / view.resolution      # normalized in-view coords
    px, py = centers[:, 0].copy(), centers[:, 1].copy()
    if view.flip:
        px = 1.0 - px
    ix = vx0 + px * vw                              # normalized image coords
    iy = vy0 + py * vh
    ax = (ix - ax0) / aw                            # normalized anchor coords
    ay = (iy - ay0) / ah
    if anchor.flip:
        ax = 1.0 - ax
    hg, wg = grid_g.shape
    return np.stack([ax * wg - 0.5, ay * hg - 0.5], axis=1)


def image_frame_landings(view: CropSpec, grid_s: TokenGrid,
                         grid_g_shape: Tuple[int, int]) -> np.ndarray:
    """Token landings on a grid laid over the whole original image.

    Used by the shared positional-embedding baseline: the table is indexed by
    where a token falls in the image, independent of any anchor.
    """
    vx0, vy0, vw, vh = view.window
    centers = grid_s.centers / view.resolution
    px, py = centers[:, 0].copy(), centers[:, 1].copy()
    if view.flip:
        px = 1.0 - px
    ix = vx0 + px * vw
    iy = vy0 + py * vh
    hg, wg = grid_g_shape
    return np.stack([ix * wg - 0.5, iy * hg - 0.5], axis=1)


def visibility_mask(view: CropSpec, anchor: CropSpec, grid_g: TokenGrid) -> VisibilityMask:
    """Marks anchor tokens whose centers fall inside the view's window."""
    ax0, ay0, aw, ah = anchor.window
    vx0, vy0, vw, vh = view.window
    centers = grid_g.centers / anchor.resolution
    pa_x, pa_y = centers[:, 0].copy(), centers[:, 1].copy()
    if anchor.flip:
        pa_x = 1.0 - pa_x
    ix = ax0 + pa_x * aw
    iy = ay0 + pa_y * ah
    inside = ((ix >= vx0) & (ix <= vx0 + vw) & (iy >= vy0) & (iy <= vy0 + vh))
    return VisibilityMask(inside.astype(np.uint8))


# -- pixels ------------------------------------------------------------------

def patchify(crop_pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """Non-overlapping row-major patches, (N, patch^2 * C)."""
    h, w = crop_pixels.shape[:2]
    c = crop_pixels.shape[2] if crop_pixels.ndim == 3 else 1
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"patchify: {h}x{w} not divisible by patch {p}")
    x = crop_pixels.reshape(h // p, p, w // p, p, c)
    x = x.transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape((h // p) * (w // p), p * p * c))


def unpatchify(patches: np.ndarray, grid_shape: Tuple[int, int],
               patch_size: int, channels: int = 3) -> np.ndarray:
    gh, gw = grid_shape
    p = patch_size
    x = patches.reshape(gh, gw, p, p, channels)
    x = x.transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(gh * p, gw * p, channels))


def _bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample image at continuous pixel coords with edge clamping."""
    h, w = image.shape[:2]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    fx = fx[..., None]
    fy = fy[..., None]
    top = image[y0c, x0c] * (1 - fx) + image[y0c, x1c] * fx
    bot = image[y1c, x0c] * (1 - fx) + image[y1c, x1c] * fx
    return top * (1 - fy) + bot * fy


def render_crop(image: np.ndarray, spec: CropSpec) -> np.ndarray:
    """Resize the window to the view resolution (bilinear), then apply flip."""
    h, w = image.shape[:2]
    x0, y0, cw, ch = spec.window
    r = spec.resolution
    ox = (np.arange(r) + 0.5) / r
    sx = (x0 + ox * cw) * w - 0.5
    sy = (y0 + ox * ch) * h - 0.5
    gx, gy = np.meshgrid(sx, sy)
    out = _bilinear_sample(image, gx, gy).astype(np.float32)
    if spec.flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def photometric(crop: np.ndarray, stream: Stream, config: ViewConfig) -> np.ndarray:
    """Brightness/contrast jitter, optional grayscale and 3x3 box blur.

    All draws happen unconditionally so the stream advances identically
    whether or not an augmentation fires.
    """
    out = crop.astype(np.float32)
    b = float(stream.uniform(1.0 - config.brightness, 1.0 + config.brightness))
    c = float(stream.uniform(1.0 - config.contrast, 1.0 + config.contrast))
    gray_roll = float(stream.random())
    blur_roll = float(stream.random())
    out = out * b
    mean = out.mean()
    out = (out - mean) * c + mean
    if gray_roll < config.grayscale_p:
        lum = out @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        out = np.repeat(lum[..., None], 3, axis=2)
    if blur_roll < config.blur_p:
        padded = np.pad(out, ((1, 1), (1, 1), (0, 0)), mode="edge")
        acc = np.zeros_like(out)
        for dy in range(3):
            for dx in range(3):
                acc += padded[dy:dy + out.shape[0], dx:dx + out.shape[1]]
        out = acc / 9.0
    return np.clip(out, 0.0, 1.0)
