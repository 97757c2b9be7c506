"""Synthetic leaf dataset with granularity-coded classes.

Every image is a green elliptical leaf with vein polylines on a dark
background.  The three classes share one lesion color and one total lesion
area; they differ only in how that area is distributed:

  class 0: a single large discoloration patch (global cue)
  class 1: elongated streaks aligned with the vein direction (mid cue)
  class 2: many scattered micro-spots (local cue)

Matching color and area keeps per-image mean statistics uninformative, so a
probe has to rely on spatial structure.  Labels are produced alongside the
images but never consumed by pretraining.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .numeric import Stream

LESION_COLOR = np.array([0.43, 0.34, 0.13], dtype=np.float32)
LESION_ALPHA = 0.7
LESION_AREA_FRAC = 0.18   # of the leaf ellipse, identical for all classes


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    n_images: int = 600
    image_side: int = 64
    n_classes: int = 3
    noise_sigma: float = 0.05
    seed: int = 0


def _rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _ellipse_mask(xx, yy, cx, cy, ax, ay, theta):
    rel = np.stack([xx - cx, yy - cy], axis=-1) @ _rot(-theta).T
    return (rel[..., 0] / ax) ** 2 + (rel[..., 1] / ay) ** 2 <= 1.0


def _rect_mask(xx, yy, cx, cy, half_len, half_wid, theta):
    rel = np.stack([xx - cx, yy - cy], axis=-1) @ _rot(-theta).T
    return (np.abs(rel[..., 0]) <= half_len) & (np.abs(rel[..., 1]) <= half_wid)


def _segment_mask(xx, yy, p0, p1, thickness):
    d = np.array(p1) - np.array(p0)
    length2 = max(float(d @ d), 1e-9)
    px = xx - p0[0]
    py = yy - p0[1]
    t = np.clip((px * d[0] + py * d[1]) / length2, 0.0, 1.0)
    dist2 = (px - t * d[0]) ** 2 + (py - t * d[1]) ** 2
    return dist2 <= thickness ** 2


def _blend(img, mask, color, alpha):
    img[mask] = (1.0 - alpha) * img[mask] + alpha * color


def _render_image(stream: Stream, label: int, side: int,
                  noise_sigma: float) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    s = float(side)

    bg = 0.06 + 0.05 * float(stream.fork("bg").random())
    img = np.full((side, side, 3), bg, dtype=np.float64)
    img[..., 1] += 0.02

    g = stream.fork("leaf")
    cx = s * (0.5 + 0.05 * (g.random() - 0.5))
    cy = s * (0.5 + 0.05 * (g.random() - 0.5))
    ax = s * (0.36 + 0.06 * g.random())
    ay = s * (0.24 + 0.06 * g.random())
    theta = float(g.uniform(0.0, np.pi))
    leaf = _ellipse_mask(xx, yy, cx, cy, ax, ay, theta)
    leaf_color = np.array([0.14, 0.42, 0.16]) + 0.05 * (g.normal(size=3))
    _blend(img, leaf, np.clip(leaf_color, 0.05, 0.9), 1.0)

    # veins: main axis plus symmetric branches, slightly lighter than the leaf
    vein_color = np.clip(leaf_color + np.array([0.07, 0.09, 0.04]), 0.0, 1.0)
    axis_dir = np.array([np.cos(theta), np.sin(theta)])
    perp = np.array([-axis_dir[1], axis_dir[0]])
    center = np.array([cx, cy])
    main0 = center - 0.92 * ax * axis_dir
    main1 = center + 0.92 * ax * axis_dir
    vein = _segment_mask(xx, yy, main0, main1, 0.7)
    v = stream.fork("veins")
    n_branch = 4 + int(v.integers(0, 3))
    branch_angles = []
    for i in range(n_branch):
        t = -0.7 + 1.4 * (i + 0.5) / n_branch
        root = center + t * ax * axis_dir
        side_sign = 1.0 if i % 2 == 0 else -1.0
        ang = 0.6 + 0.25 * float(v.fork(i).random())
        bdir = np.cos(ang) * axis_dir + np.sin(ang) * side_sign * perp
        tip = root + 0.75 * ay * bdir
        vein |= _segment_mask(xx, yy, root, tip, 0.55)
        branch_angles.append(np.arctan2(bdir[1], bdir[0]))
    _blend(img, vein & leaf, vein_color, 0.85)

    leaf_area = np.pi * ax * ay
    budget = LESION_AREA_FRAC * leaf_area
    lz = stream.fork("lesion")
    if label == 0:
        # one large patch
        pr = np.sqrt(budget / np.pi)
        aspect = 0.7 + 0.6 * float(lz.random())
        pax, pay = pr * np.sqrt(aspect), pr / np.sqrt(aspect)
        off = lz.uniform(-0.35, 0.35, size=2)
        pcx, pcy = cx + off[0] * ax, cy + off[1] * ay
        patch = _ellipse_mask(xx, yy, pcx, pcy, pax, pay,
                              float(lz.uniform(0, np.pi)))
        _blend(img, patch & leaf, LESION_COLOR, LESION_ALPHA)
    elif label == 1:
        # streaks along vein directions
        n_streak = 4
        half_wid = 1.1
        half_len = budget / n_streak / (4.0 * half_wid) * 2.0
        for i in range(n_streak):
            sb = lz.fork(i)
            ang = branch_angles[i % len(branch_angles)]
            t = float(sb.uniform(-0.55, 0.55))
            u = float(sb.uniform(-0.45, 0.45))
            scx = cx + t * ax * axis_dir[0] + u * ay * perp[0]
            scy = cy + t * ax * axis_dir[1] + u * ay * perp[1]
            streak = _rect_mask(xx, yy, scx, scy, half_len, half_wid, ang)
            _blend(img, streak & leaf, LESION_COLOR, LESION_ALPHA)
    else:
        # scattered micro-spots
        r = 0.95
        n_spot = int(round(budget / (np.pi * r * r)))
        for i in range(n_spot):
            sb = lz.fork(i)
            t = float(sb.uniform(-0.85, 0.85))
            u = float(sb.uniform(-0.85, 0.85))
            scx = cx + t * ax * axis_dir[0] + u * ay * perp[0]
            scy = cy + t * ax * axis_dir[1] + u * ay * perp[1]
            rr = r * (0.8 + 0.4 * float(sb.random()))
            spot = (xx - scx) ** 2 + (yy - scy) ** 2 <= rr ** 2
            _blend(img, spot & leaf, LESION_COLOR, LESION_ALPHA)

    img += noise_sigma * stream.fork("noise").normal(size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(spec: SyntheticDatasetSpec
                               ) -> Tuple[np.ndarray, np.ndarray]:
    """Images (N, side, side, 3) float32 in [0,1] and labels (N,) int64;
    labels cycle through the classes so counts are balanced within one."""
    images = np.empty((spec.n_images, spec.image_side, spec.image_side, 3),
                      dtype=np.float32)
    labels = np.empty(spec.n_images, dtype=np.int64)
    for i in range(spec.n_images):
        label = i % spec.n_classes
        stream = Stream(spec.seed, "data", i)
        images[i] = _render_image(stream, label, spec.image_side, spec.noise_sigma)
        labels[i] = label
    return images, labels


def save_dataset(path, images: np.ndarray, labels: Optional[np.ndarray]) -> None:
    arrays = {"images": images}
    if labels is not None:
        arrays["labels"] = labels
    np.savez(path, **arrays)


def load_dataset(path) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with np.load(path) as blob:
        images = blob["images"]
        labels = blob["labels"] if "labels" in blob.files else None
    return images, labels
