"""Synthetic phantoms, pre-segmentation perturbation and end-to-end experiments."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import metrics
from .gvf import GvfParams, build_flow
from .mrf import (PairwiseTerm, SegmentParams, ShapePrior, log_likelihood_unary, pairwise_edges,
                  segment_detailed)
from .multiobject import InteractionConstraint, ObjectSpec, segment_joint, verify_constraints
from .volume import LabelVolume, ScalarVolume

log = logging.getLogger(__name__)

KINDS = ("disc", "c-shape", "nested-rings", "two-blobs")


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry in voxels.

    ``radii``: disc (r,), c-shape (r_inner, r_outer), nested-rings
    (r_inner_object, r_outer_object), two-blobs (r,).  ``gap``: width of the
    C opening, or the distance between the two blobs.  3D grids give
    spheres / cylindrical C-shapes.
    """

    kind: str = "disc"
    dims: tuple = (64, 64)
    radii: tuple = (10.0,)
    gap: float = 0.0
    center: Optional[tuple] = None
    noise: float = 0.0
    hole_rate: float = 0.0
    contrast: float = 1.0
    spacing: Optional[tuple] = None
    rotation: float = 0.0  # degrees, c-shape opening direction

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PhantomSpecError(f"unknown phantom kind {self.kind!r}")
        if len(self.dims) not in (2, 3):
            raise PhantomSpecError("phantoms are 2D or 3D")
        if self.noise < 0 or not 0 <= self.hole_rate <= 1 or self.contrast <= 0:
            raise PhantomSpecError("noise >= 0, hole_rate in [0, 1], contrast > 0 required")
        if any(r <= 0 for r in self.radii):
            raise PhantomSpecError("radii must be positive")
        if self.gap < 0:
            raise PhantomSpecError("gap must be >= 0")


@dataclass
class Phantom:
    ground_truth: LabelVolume
    observation: ScalarVolume
    prob: ScalarVolume
    probs: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    spec: Optional[PhantomSpec] = None


def _coords(spec: PhantomSpec):
    dims = spec.dims
    center = spec.center or tuple((d - 1) / 2.0 for d in dims)
    grids = np.indices(dims, dtype=np.float64)
    return [grids[a] - center[a] for a in range(len(dims))], center


def _fits(spec: PhantomSpec, extent: float, center, axes=None):
    axes = range(len(spec.dims)) if axes is None else axes
    for a in axes:
        d, c = spec.dims[a], center[a]
        if c - extent < -0.5 or c + extent > d - 0.5:
            raise PhantomSpecError(f"{spec.kind} geometry does not fit the grid {spec.dims}")


def rasterize(spec: PhantomSpec) -> tuple[np.ndarray, dict, dict]:
    """Label map, per-object masks (nested objects include their interior),
    and intensity level per label."""
    x, center = _coords(spec)
    ndim = len(spec.dims)
    labels = np.zeros(spec.dims, dtype=np.uint8)
    # in 3D the C-shape is a cylinder along axis 0; other shapes are balls
    planar = x[-2:]
    r2_ball = sum(c * c for c in x)
    if spec.kind == "disc":
        r = spec.radii[0]
        _fits(spec, r, center)
        labels[r2_ball <= r * r] = 1
        masks = {1: labels == 1}
        levels = {1: 1.0}
    elif spec.kind == "c-shape":
        if len(spec.radii) != 2 or spec.radii[0] >= spec.radii[1]:
            raise PhantomSpecError("c-shape needs radii (r_inner, r_outer) with r_inner < r_outer")
        r_in, r_out = spec.radii
        # the 3D C-shape is a cylinder: only the in-plane axes must hold the radius
        _fits(spec, r_out, center, axes=range(ndim - 2, ndim))
        rr = planar[0] ** 2 + planar[1] ** 2
        theta = math.radians(spec.rotation)
        # rotate so the opening points along +(cos, sin) in the last two axes
        u = planar[1] * math.cos(theta) + planar[0] * math.sin(theta)
        v = -planar[1] * math.sin(theta) + planar[0] * math.cos(theta)
        ring = (rr >= r_in * r_in) & (rr <= r_out * r_out)
        slot = (u > 0) & (np.abs(v) < spec.gap / 2.0)
        obj = ring & ~slot
        if ndim == 3:
            z = x[0]
            half = max(spec.dims[0] / 2.0 - 3, 1)
            obj &= np.abs(z) <= half
        labels[obj] = 1
        masks = {1: obj}
        levels = {1: 1.0}
    elif spec.kind == "nested-rings":
        if len(spec.radii) != 2 or spec.radii[0] >= spec.radii[1]:
            raise PhantomSpecError("nested-rings needs radii (r_inner, r_outer) with r_inner < r_outer")
        r1, r2 = spec.radii
        _fits(spec, r2, center)
        outer = r2_ball <= r2 * r2
        inner = r2_ball <= r1 * r1
        labels[outer] = 2
        labels[inner] = 1
        masks = {1: inner, 2: outer}
        levels = {1: 1.0, 2: 0.5}
    else:
        r = spec.radii[0]
        sep = r + spec.gap / 2.0
        shift = np.zeros(ndim)
        shift[-1] = sep
        _fits(spec, sep + r, center)
        d1 = sum((x[a] + shift[a]) ** 2 for a in range(ndim))
        d2 = sum((x[a] - shift[a]) ** 2 for a in range(ndim))
        labels[d1 <= r * r] = 1
        labels[d2 <= r * r] = 2
        masks = {1: labels == 1, 2: labels == 2}
        levels = {1: 1.0, 2: 0.5}
    if not labels.any():
        raise PhantomSpecError("phantom geometry produced an empty object")
    return labels, masks, levels


def make_phantom(spec: PhantomSpec, seed: int = 0) -> Phantom:
    """Ground truth, corrupted observation and per-object Gaussian likelihoods."""
    rng = np.random.default_rng(seed)
    labels, masks, levels = rasterize(spec)
    level_map = np.zeros(spec.dims)
    for lab, lev in levels.items():
        level_map[labels == lab] = lev * spec.contrast

    clean = level_map.copy()
    if spec.hole_rate > 0:
        obj = np.flatnonzero(labels.ravel())
        k = int(round(spec.hole_rate * obj.size))
        holes = rng.choice(obj, size=k, replace=False)
        clean.ravel()[holes] = 0.0
    obs = clean + (rng.normal(0.0, spec.noise, spec.dims) if spec.noise > 0 else 0.0)

    # posterior over intensity classes with the noiseless levels as means
    class_levels = [0.0] + [levels[k] * spec.contrast for k in sorted(levels)]
    sd = max(spec.noise, 0.05 * spec.contrast)
    ll = np.stack([-0.5 * ((obs - m) / sd) ** 2 for m in class_levels])
    ll -= ll.max(axis=0)
    post = np.exp(ll)
    post /= post.sum(axis=0)
    label_ids = sorted(levels)
    probs = {}
    for k in label_ids:
        # object k covers every label whose mask lies inside masks[k]
        members = [i + 1 for i, j in enumerate(label_ids) if np.all(masks[k][labels == j])]
        probs[k] = ScalarVolume(np.clip(post[members].sum(axis=0), 0.0, 1.0), spec.spacing)

    spacing = spec.spacing
    return Phantom(
        ground_truth=LabelVolume(labels, spacing),
        observation=ScalarVolume(obs, spacing),
        prob=probs[label_ids[0]],
        probs=probs,
        masks=masks,
        spec=spec,
    )


@dataclass(frozen=True)
class PerturbParams:
    grid: tuple = (20, 20, 20)
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if any(g < 2 for g in self.grid):
            raise ValueError("control grid needs at least 2 points per axis")
        if self.sigma < 0:
            raise ValueError("sigma_ptb must be >= 0")


def displacement_field(dims: Sequence[int], params: PerturbParams) -> np.ndarray:
    """Dense displacement (ndim, *dims): multilinear interpolation of
    Gaussian control-point displacements on a coarse grid spanning the volume."""
    ndim = len(dims)
    grid = tuple(params.grid[:ndim]) if len(params.grid) >= ndim else tuple(params.grid) * ndim
    rng = np.random.default_rng(params.seed)
    ctrl = rng.normal(0.0, params.sigma, (ndim,) + grid) if params.sigma > 0 else np.zeros((ndim,) + grid)
    axes = [np.arange(d) * ((g - 1) / (d - 1) if d > 1 else 0.0) for d, g in zip(dims, grid)]
    pts = np.meshgrid(*axes, indexing="ij")
    return np.stack([ndimage.map_coordinates(ctrl[a], pts, order=1, mode="nearest") for a in range(ndim)])


def perturb_labels(preseg: LabelVolume, params: PerturbParams) -> LabelVolume:
    """Warp labels by pulling: out(x) = in(round(x - u(x))), background outside."""
    dims = preseg.shape
    if params.sigma == 0:
        return LabelVolume(preseg.data.copy(), preseg.spacing)
    u = displacement_field(dims, params)
    src = np.rint(np.indices(dims, dtype=np.float64) - u).astype(np.int64)
    inside = np.ones(dims, dtype=bool)
    for a, d in enumerate(dims):
        inside &= (src[a] >= 0) & (src[a] < d)
        np.clip(src[a], 0, d - 1, out=src[a])
    out = np.where(inside, preseg.data[tuple(src)], 0).astype(np.uint8)
    return LabelVolume(out, preseg.spacing)


# experiments ------------------------------------------------------------------

C_SHAPE = PhantomSpec("c-shape", (64, 64), radii=(9.0, 22.0), gap=10.0, noise=0.5, hole_rate=0.05)


def c_shape_preseg(spec: PhantomSpec = C_SHAPE) -> LabelVolume:
    """Imperfect pre-segmentation: the same C-shape with a thinner wall and a
    rotated, wider opening."""
    r_in, r_out = spec.radii
    wrong = replace(spec, radii=(r_in + 2.0, r_out - 2.0), gap=spec.gap + 4.0,
                    rotation=spec.rotation + 15.0, noise=0.0, hole_rate=0.0)
    labels, _, _ = rasterize(wrong)
    return LabelVolume(labels, spec.spacing)


PHANTOM_SEGMENT = SegmentParams(pairwise=PairwiseTerm(lam=2.0, sigma=0.1, alpha=0.25, beta=0.5))


def segment_phantom(ph: Phantom, preseg: LabelVolume, params: SegmentParams = PHANTOM_SEGMENT,
                    label: int = 1):
    labels, sol, prior = segment_detailed(ph.observation, preseg, params, prob=ph.probs[label], label=label)
    return labels, sol, prior


def prior_value_experiment(seeds: Sequence[int], spec: PhantomSpec = C_SHAPE,
                           params: SegmentParams = PHANTOM_SEGMENT):
    """DSC against ground truth with and without the GVF prior, per seed."""
    preseg = c_shape_preseg(spec)
    prior = None
    with_prior, without = [], []
    for s in seeds:
        ph = make_phantom(spec, s)
        lab, _, prior = segment_detailed(ph.observation, preseg, params, prob=ph.prob, prior=prior)
        with_prior.append(metrics.dsc(lab, ph.ground_truth, 1))
        lab0, _, _ = segment_detailed(ph.observation, preseg, replace(params, prior_penalty=None), prob=ph.prob)
        without.append(metrics.dsc(lab0, ph.ground_truth, 1))
    return np.array(with_prior), np.array(without)


@dataclass
class SensitivityRow:
    sigma_ptb: float
    preseg_dsc: float
    final_dsc: float
    preseg_assd: float
    final_assd: float

    FIELDS = ("sigma_ptb", "preseg_dsc", "final_dsc", "preseg_assd", "final_assd")

    def as_tuple(self):
        return tuple(getattr(self, f) for f in self.FIELDS)


def sensitivity_experiment(spec: PhantomSpec = C_SHAPE, sigmas: Sequence[float] = (0, 2, 5, 10),
                           seeds: Sequence[int] = range(10), grid: tuple = (20, 20, 20),
                           params: SegmentParams = PHANTOM_SEGMENT,
                           base_preseg: Optional[LabelVolume] = None, return_cells: bool = False):
    """Perturb the pre-segmentation, rebuild its GVF prior, segment, and score
    both against ground truth; rows are averaged over seeds.

    Each seed fixes both the phantom noise and the perturbation field.
    """
    base = base_preseg if base_preseg is not None else c_shape_preseg(spec)
    phantoms = {s: make_phantom(spec, s) for s in seeds}
    rows, cells = [], []
    for sigma in sigmas:
        acc = []
        for s in seeds:
            ph = phantoms[s]
            pre = perturb_labels(base, PerturbParams(grid, float(sigma), seed=10_000 + s))
            if not pre.data.any():
                raise RuntimeError("perturbation erased the pre-segmentation")
            lab, _, prior = segment_phantom(ph, pre, params)
            gt = ph.ground_truth
            cell = (
                metrics.dsc(pre, gt, 1),
                metrics.dsc(lab, gt, 1),
                metrics.assd(pre, gt, 1),
                metrics.assd(lab, gt, 1) if lab.data.any() else float("nan"),
            )
            acc.append(cell)
            cells.append((sigma, s, lab, prior))
        m = np.mean(np.array(acc), axis=0)
        rows.append(SensitivityRow(float(sigma), *(float(x) for x in m)))
    return (rows, cells) if return_cells else rows


NESTED = PhantomSpec("nested-rings", (64, 64), radii=(12.0, 18.0))


def nested_rings_pipeline(spec: PhantomSpec = NESTED, delta: float = 1.0, max_dist: float = 6.0,
                          seed: int = 0, lam: float = 0.5, gvf: GvfParams = GvfParams()):
    """Two nested objects sharing one pre-segmentation (the outer object's
    ground truth) and therefore one GVF flow."""
    ph = make_phantom(spec, seed)
    preseg = LabelVolume(ph.masks[2].astype(np.uint8), spec.spacing)
    _, _, flow = build_flow(preseg, 1, gvf)
    pair = PairwiseTerm(lam=lam, sigma=0.25, alpha=0.1, beta=0.5)
    edges = pairwise_edges(ph.observation, pair)
    objects = [
        ObjectSpec(k, log_likelihood_unary(ph.probs[k]), edges, ShapePrior(flow)) for k in (1, 2)
    ]
    constraints = [
        InteractionConstraint("inclusion", 1, 2, delta),
        InteractionConstraint("max_distance", 1, 2, max_dist),
    ]
    sol = segment_joint(objects, constraints, spacing=ph.ground_truth.spacing)
    report = verify_constraints(sol.labels, constraints, flows={1: flow, 2: flow}, masks=sol.masks)
    scores = {k: metrics.dsc(sol.masks[k], ph.masks[k], None) for k in (1, 2)}
    return ph, sol, report, scores, flow
