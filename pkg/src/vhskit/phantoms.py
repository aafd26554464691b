"""Deterministic synthetic radiographs with exact keypoint ground truth.

Each phantom is a bright ellipse (the "heart") whose long- and short-axis
endpoints are the first four keypoints, plus a bright capsule (the
"vertebral segment") whose endpoints are the last two. The segment's
length is solved from the target score, so the label's computed score
equals the target to machine precision, which is what makes these images
usable as an oracle: any pipeline stage can be checked against geometry
it fully controls.

Rendering is pure numpy over pixel centers with one-pixel anti-aliasing
and seeded Gaussian noise, so identical specs yield identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import AnnotationRecord, Dataset, Sample, split_dataset
from .errors import ConfigError
from .geometry import KeypointSet, calc_vhs
from .rng import derive_rng, derive_seed

BACKGROUND = 0.07
HEART_VALUE = 0.55
SPINE_VALUE = 0.80
DISK_VALUE = 0.95
SPINE_RADIUS = 0.022
DISK_RADIUS = 0.030


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and noise recipe for one synthetic image."""

    side: int
    target_vhs: float
    center: tuple[float, float]
    orientation: float  # long-axis angle, radians from the +x axis
    long_axis: float  # |AB|, normalized units
    axis_ratio: float  # |CD| / |AB|
    spine_start: tuple[float, float]
    spine_angle: float  # radians from the +x axis
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.target_vhs <= 0.0:
            raise ConfigError(f"target VHS must be positive, got {self.target_vhs}")
        if self.side < 16:
            raise ConfigError("side must be at least 16 pixels")
        if self.long_axis <= 0.0 or not 0.0 < self.axis_ratio <= 1.0:
            raise ConfigError("long_axis must be positive and axis_ratio in (0, 1]")
        if self.noise < 0.0:
            raise ConfigError("noise amplitude must be non-negative")


def phantom_keypoints(spec: PhantomSpec) -> KeypointSet:
    """Exact keypoints for a spec; the segment length is chosen so the
    score computed from these points equals the target."""
    cx, cy = spec.center
    u = np.array([math.cos(spec.orientation), math.sin(spec.orientation)])
    v = np.array([-u[1], u[0]])
    c = np.array([cx, cy])
    half_l = spec.long_axis / 2.0
    half_w = spec.axis_ratio * spec.long_axis / 2.0
    a = c - half_l * u
    b = c + half_l * u
    cc = c - half_w * v
    d = c + half_w * v
    ef_len = 6.0 * (spec.long_axis + spec.axis_ratio * spec.long_axis) / spec.target_vhs
    e = np.array(spec.spine_start)
    direction = np.array([math.cos(spec.spine_angle), math.sin(spec.spine_angle)])
    f = e + ef_len * direction
    pts = np.stack([a, b, cc, d, e, f])
    if np.any(pts < 0.0) or np.any(pts > 1.0):
        raise ConfigError(
            f"spec places keypoints outside the unit square (seed {spec.seed}); "
            "shrink the geometry or raise the target score")
    return KeypointSet(pts)


def _coverage(dist_px: np.ndarray) -> np.ndarray:
    """Signed pixel distance -> opacity with a one-pixel soft edge."""
    return np.clip(0.5 - dist_px, 0.0, 1.0)


def render_phantom(spec: PhantomSpec) -> np.ndarray:
    """The (side, side) uint8 image for a spec, bit-stable per seed."""
    kp = phantom_keypoints(spec)
    side = spec.side
    coords = (np.arange(side) + 0.5) / side
    px, py = np.meshgrid(coords, coords)  # x varies along columns

    cx, cy = spec.center
    u = np.array([math.cos(spec.orientation), math.sin(spec.orientation)])
    v = np.array([-u[1], u[0]])
    half_l = spec.long_axis / 2.0
    half_w = spec.axis_ratio * spec.long_axis / 2.0
    rel_x = px - cx
    rel_y = py - cy
    eu = (rel_x * u[0] + rel_y * u[1]) / half_l
    ev = (rel_x * v[0] + rel_y * v[1]) / half_w
    radial = np.sqrt(eu * eu + ev * ev)
    heart_alpha = _coverage((radial - 1.0) * min(half_l, half_w) * side)

    pts = kp.points
    e, f = pts[4], pts[5]
    seg = f - e
    seg_len_sq = float(seg @ seg)
    t = np.clip(((px - e[0]) * seg[0] + (py - e[1]) * seg[1]) / seg_len_sq, 0.0, 1.0)
    dist = np.hypot(px - (e[0] + t * seg[0]), py - (e[1] + t * seg[1]))
    spine_alpha = _coverage((dist - SPINE_RADIUS) * side)

    img = np.full((side, side), BACKGROUND)
    img = img * (1.0 - heart_alpha) + HEART_VALUE * heart_alpha
    img = img * (1.0 - spine_alpha) + SPINE_VALUE * spine_alpha
    for end in (e, f):
        disk = _coverage((np.hypot(px - end[0], py - end[1]) - DISK_RADIUS) * side)
        img = img * (1.0 - disk) + DISK_VALUE * disk

    if spec.noise > 0.0:
        img = img + derive_rng(spec.seed, "noise").normal(0.0, spec.noise, img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_phantoms(specs, name: str = "phantoms") -> Dataset:
    """Render a spec list into an in-memory dataset with exact labels."""
    dataset = Dataset(name)
    for i, spec in enumerate(specs):
        sid = f"ph-{i:05d}"
        kp = phantom_keypoints(spec)
        record = AnnotationRecord(
            sample_id=sid, points=kp.points, vhs=calc_vhs(kp),
            annotator="phantom-generator", timestamp=None, provenance="phantom")
        dataset.add(Sample(
            id=sid, image_path=f"images/{sid}.png", width=spec.side, height=spec.side,
            split="unlabeled", provenance="phantom", label=kp, annotation=record,
            pixels=render_phantom(spec)))
    return dataset


def random_phantom_specs(n: int, master_seed: int, side: int = 64,
                         vhs_range: tuple[float, float] = (6.5, 11.5),
                         noise: float = 0.02) -> list[PhantomSpec]:
    """Varied but bounded specs: hearts in the lower half, segments along
    the top band, every keypoint comfortably inside the unit square."""
    lo, hi = vhs_range
    if not 0.0 < lo < hi:
        raise ConfigError("vhs_range must be increasing and positive")
    specs = []
    for i in range(n):
        rng = derive_rng(master_seed, "phantom", i)
        specs.append(PhantomSpec(
            side=side,
            target_vhs=float(rng.uniform(lo, hi)),
            center=(float(rng.uniform(0.45, 0.55)), float(rng.uniform(0.60, 0.70))),
            orientation=float(rng.uniform(math.radians(55.0), math.radians(125.0))),
            long_axis=float(rng.uniform(0.34, 0.44)),
            axis_ratio=float(rng.uniform(0.62, 0.74)),
            spine_start=(float(rng.uniform(0.08, 0.16)), float(rng.uniform(0.08, 0.14))),
            spine_angle=float(rng.uniform(0.0, math.radians(12.0))),
            noise=noise,
            seed=derive_seed(master_seed, "phantom-noise", i),
        ))
    return specs


def make_phantom_bundle(n_train: int = 200, n_valid: int = 50, n_test: int = 100,
                        n_unlabeled: int = 400, side: int = 64, seed: int = 2026,
                        vhs_range: tuple[float, float] = (6.5, 11.5),
                        noise: float = 0.02, name: str = "phantom-bundle") -> Dataset:
    """A ready-to-train dataset: labeled train/valid/test splits plus a
    genuinely unlabeled pool (annotations stripped, not just hidden)."""
    total = n_train + n_valid + n_test + n_unlabeled
    if min(n_train, n_valid, n_test) < 1 or n_unlabeled < 0:
        raise ConfigError("bundle needs positive train/valid/test counts")
    dataset = generate_phantoms(random_phantom_specs(total, seed, side, vhs_range, noise), name)
    ids = dataset.ids
    order = derive_rng(seed, "assign").permutation(total)
    for rank in order[:n_unlabeled]:
        sample = dataset.get(ids[rank])
        sample.split = "unlabeled"
        sample.label = None
        sample.annotation = None
    n_labeled = total - n_unlabeled
    fractions = (n_train / n_labeled, n_valid / n_labeled, n_test / n_labeled)
    split_dataset(dataset, fractions, seed)
    return dataset
