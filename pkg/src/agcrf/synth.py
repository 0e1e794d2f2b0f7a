"""Deterministic synthetic datasets for the three tasks.

Randomness comes from a counter-based splitmix64 stream keyed on
(seed, split, sample index), so any sample can be regenerated in isolation
and identical specs produce bit-identical datasets in any language that
follows the mixing function below.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np

from .agtio import read_agt, write_agt

__all__ = ["SynthRng", "SynthSpec", "generate", "gen_contour", "gen_depth", "gen_seg", "save_dataset", "load_dataset"]

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z):
    """splitmix64 finalizer."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class SynthRng:
    """splitmix64: state_{n+1} = state_n + GOLDEN; output = mix(state_{n+1}).

    The initial state is mix(seed + GOLDEN * (stream + 1)), which keys
    independent streams off one seed.
    """

    def __init__(self, seed, stream=0):
        self._state = _mix((int(seed) + _GOLDEN * (int(stream) + 1)) & _MASK)

    def u64(self):
        self._state = (self._state + _GOLDEN) & _MASK
        return _mix(self._state)

    def float01(self):
        return (self.u64() >> 11) * (2.0**-53)

    def uniform(self, low=0.0, high=1.0, size=None):
        if size is None:
            return low + (high - low) * self.float01()
        n = int(np.prod(size))
        vals = np.array([self.float01() for _ in range(n)])
        return (low + (high - low) * vals).reshape(size)

    def randint(self, low, high):
        """Uniform integer in [low, high)."""
        span = int(high) - int(low)
        return int(low) + int(self.u64() % span)


@dataclass
class SynthSpec:
    """Knobs for one dataset; identical specs give bit-identical data."""

    task: str = "contour"  # contour | depth | seg
    seed: int = 0
    count: int = 10
    height: int = 32
    width: int = 32
    shapes_min: int = 1
    shapes_max: int = 3
    radius_min: float = 3.0
    radius_max: float = 9.0
    num_classes: int = 4  # segmentation, incl. background 0
    noise: float = 0.04
    mask_keep: float = 0.3  # depth: fraction of pixels with ground truth

    def __post_init__(self):
        if self.task not in ("contour", "depth", "seg"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.count < 1 or self.height < 4 or self.width < 4:
            raise ValueError("degenerate dataset spec")


_SPLIT_IDS = {"train": 0, "test": 1, "val": 2}

# affinely independent class colors keep the noise-free task linearly separable
_PALETTE = np.array(
    [
        [0.20, 0.20, 0.20],
        [0.90, 0.20, 0.20],
        [0.20, 0.90, 0.20],
        [0.20, 0.20, 0.90],
        [0.90, 0.90, 0.20],
        [0.90, 0.20, 0.90],
        [0.20, 0.90, 0.90],
        [0.75, 0.55, 0.30],
    ]
)


def _sample_rng(spec, split, index, attempt=0):
    stream = (_SPLIT_IDS[split] << 48) | (int(index) << 8) | int(attempt)
    return SynthRng(spec.seed, stream)


def _grid(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return ys.astype(np.float64), xs.astype(np.float64)


def _draw_shape(rng, spec, ys, xs):
    """Membership mask of one random ellipse, rectangle or triangle."""
    h, w = ys.shape
    kind = rng.randint(0, 3)
    cy = rng.uniform(0.15 * h, 0.85 * h)
    cx = rng.uniform(0.15 * w, 0.85 * w)
    if kind == 0:  # ellipse
        ry = rng.uniform(spec.radius_min, spec.radius_max)
        rx = rng.uniform(spec.radius_min, spec.radius_max)
        return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
    if kind == 1:  # axis-aligned rectangle
        ry = rng.uniform(spec.radius_min, spec.radius_max)
        rx = rng.uniform(spec.radius_min, spec.radius_max)
        return (np.abs(ys - cy) <= ry) & (np.abs(xs - cx) <= rx)
    # triangle: three vertices around the center; inside iff all edge cross
    # products share a sign
    pts = []
    for _ in range(3):
        r = rng.uniform(spec.radius_min, spec.radius_max)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        pts.append((cy + r * np.sin(ang), cx + r * np.cos(ang)))
    (y0, x0), (y1, x1), (y2, x2) = pts
    d1 = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
    d2 = (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)
    d3 = (x0 - x2) * (ys - y2) - (y0 - y2) * (xs - x2)
    has_neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    has_pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(has_neg & has_pos)


def _region_canvas(rng, spec):
    """Painter-ordered region ids: 0 background, 1..n shapes."""
    ys, xs = _grid(spec.height, spec.width)
    region = np.zeros((spec.height, spec.width), dtype=int)
    n = rng.randint(spec.shapes_min, spec.shapes_max + 1)
    for i in range(1, n + 1):
        region[_draw_shape(rng, spec, ys, xs)] = i
    return region, n


def boundary_map(region):
    """1-pixel boundaries: a pixel whose right or down neighbour differs."""
    edge = np.zeros(region.shape, dtype=np.float64)
    edge[:, :-1][region[:, :-1] != region[:, 1:]] = 1.0
    edge[:-1, :][region[:-1, :] != region[1:, :]] = 1.0
    return edge


def _contour_sample(spec, split, index):
    for attempt in range(16):
        rng = _sample_rng(spec, split, index, attempt)
        region, n = _region_canvas(rng, spec)
        edges = boundary_map(region)
        if edges.mean() < 0.15:  # keep the class imbalance that motivates balancing
            break
    img = np.zeros((3, spec.height, spec.width))
    shades = rng.uniform(0.1, 0.9, size=(n + 1, 3))
    for rid in range(n + 1):
        img[:, region == rid] = shades[rid][:, None]
    img += spec.noise * rng.uniform(-1.0, 1.0, size=img.shape)
    return np.clip(img, 0.0, 1.0), edges[None]


def _depth_sample(spec, split, index):
    rng = _sample_rng(spec, split, index)
    h, w = spec.height, spec.width
    ys, xs = _grid(h, w)
    depth = rng.uniform(2.0, 4.0) + rng.uniform(-1.5, 1.5) * xs / w + rng.uniform(-1.5, 1.5) * ys / h
    for _ in range(rng.randint(0, 4)):
        cy = rng.uniform(0.2 * h, 0.8 * h)
        cx = rng.uniform(0.2 * w, 0.8 * w)
        rad = rng.uniform(spec.radius_min, spec.radius_max)
        height = rng.uniform(0.3, 1.2)
        r2 = ((ys - cy) ** 2 + (xs - cx) ** 2) / (rad * rad)
        depth -= height * np.maximum(0.0, 1.0 - r2)
    depth = np.maximum(depth, 0.5)

    # noise-free shading strictly decreasing in depth: brighter means nearer
    shade = depth.min() / depth
    img = np.stack([0.95 * shade, 0.85 * shade, 0.75 * shade])
    mask = (rng.uniform(size=(h, w)) < spec.mask_keep).astype(np.float64)
    if mask.sum() == 0:
        mask[h // 2, w // 2] = 1.0
    return img, np.stack([depth, mask])


def _seg_sample(spec, split, index):
    rng = _sample_rng(spec, split, index)
    region, n = _region_canvas(rng, spec)
    labels = np.zeros(region.shape, dtype=np.float64)
    for rid in range(1, n + 1):
        labels[region == rid] = rng.randint(1, spec.num_classes)
    palette = _PALETTE[: spec.num_classes]
    if spec.num_classes > len(_PALETTE):
        raise ValueError(f"at most {len(_PALETTE)} classes supported")
    img = palette[labels.astype(int)].transpose(2, 0, 1).copy()
    img += spec.noise * rng.uniform(-1.0, 1.0, size=img.shape)
    return np.clip(img, 0.0, 1.0), labels[None]


def gen_contour(spec, split="train"):
    return [_contour_sample(spec, split, i) for i in range(spec.count)]


def gen_depth(spec, split="train"):
    return [_depth_sample(spec, split, i) for i in range(spec.count)]


def gen_seg(spec, split="train"):
    return [_seg_sample(spec, split, i) for i in range(spec.count)]


def generate(spec, split="train"):
    return {"contour": gen_contour, "depth": gen_depth, "seg": gen_seg}[spec.task](spec, split)


def save_dataset(root, split, samples, spec):
    """Layout: <root>/<split>/<index>.img.agt + <index>.gt.agt + manifest.txt."""
    path = os.path.join(root, split)
    os.makedirs(path, exist_ok=True)
    for i, (img, gt) in enumerate(samples):
        write_agt(os.path.join(path, f"{i:05d}.img.agt"), img)
        write_agt(os.path.join(path, f"{i:05d}.gt.agt"), gt)
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        for key, value in asdict(spec).items():
            fh.write(f"{key} = {value}\n")
        fh.write(f"split = {split}\n")


def load_dataset(root, split):
    path = os.path.join(root, split)
    samples = []
    i = 0
    while True:
        img_path = os.path.join(path, f"{i:05d}.img.agt")
        if not os.path.exists(img_path):
            break
        samples.append((read_agt(img_path), read_agt(os.path.join(path, f"{i:05d}.gt.agt"))))
        i += 1
    if not samples:
        raise FileNotFoundError(f"no samples under {path}")
    return samples


def load_manifest(root, split):
    out = {}
    with open(os.path.join(root, split, "manifest.txt")) as fh:
        for line in fh:
            if "=" in line:
                key, value = line.split("=", 1)
                out[key.strip()] = value.strip()
    return out
