"""Single-object MRF energy with a GVF shape prior, and its s-excess encoding."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import gvf as gvf_mod
from .gvf import DiscreteFlow, GvfParams
from .maxflow import INF, CapacityOverflowError, CutResult, SExcessGraph, solve_s_excess
from .volume import LabelVolume, Neighborhood, ScalarVolume, neighbor_pairs

log = logging.getLogger(__name__)

DEFAULT_SCALE = 10_000
INFEASIBLE = math.inf


@dataclass(frozen=True, eq=False)
class UnaryTerm:
    """Per-voxel costs of label 1 (``d1``) and label 0 (``d0``)."""

    d1: np.ndarray
    d0: np.ndarray

    def __post_init__(self):
        d1 = np.asarray(self.d1, dtype=np.float64)
        d0 = np.asarray(self.d0, dtype=np.float64)
        if d1.shape != d0.shape:
            raise ValueError("d1 and d0 must have the same shape")
        if not (np.all(np.isfinite(d1)) and np.all(np.isfinite(d0))):
            raise ValueError("unary costs must be finite")
        object.__setattr__(self, "d1", d1)
        object.__setattr__(self, "d0", d0)

    @property
    def shape(self):
        return self.d1.shape


@dataclass(frozen=True)
class PairwiseTerm:
    lam: float = 1.0
    sigma: float = 0.1
    alpha: float = 0.1
    beta: float = 0.5
    nbhd: str = "face"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


@dataclass(frozen=True, eq=False)
class PairwiseEdges:
    """Unordered neighbor pairs (flat indices) with penalty V_pq(1,0) = V_pq(0,1)."""

    p: np.ndarray
    q: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if (w < 0).any() or not np.all(np.isfinite(w)):
            raise ValueError("pairwise penalties must be finite and non-negative")
        object.__setattr__(self, "w", w)

    @classmethod
    def empty(cls):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, np.zeros(0))


@dataclass(frozen=True, eq=False)
class ShapePrior:
    flow: DiscreteFlow
    penalty: float = math.inf

    def __post_init__(self):
        if not self.penalty >= 0:
            raise ValueError("prior penalty must be >= 0 or inf")

    @property
    def infinite(self) -> bool:
        return math.isinf(self.penalty)


def sigmoid_transform(img, alpha: float, beta: float):
    """Contrast-enhancing sigmoid 1 / (1 + exp(-(I - beta) / alpha))."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    data = img.data if isinstance(img, ScalarVolume) else np.asarray(img, dtype=np.float64)
    out = 0.5 * (1.0 + np.tanh((np.asarray(data, np.float64) - beta) / (2.0 * alpha)))
    if isinstance(img, ScalarVolume):
        return ScalarVolume(out, img.spacing)
    return out


def boundary_weight(ip, iq, sigma: float, lam: float):
    """lam * exp(-(ip - iq)^2 / sigma^2)."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    d = np.asarray(ip, dtype=np.float64) - np.asarray(iq, dtype=np.float64)
    return lam * np.exp(-(d * d) / (sigma * sigma))


def log_likelihood_unary(prob, eps: float = 1e-6) -> UnaryTerm:
    """d1 = -log(prob), d0 = -log(1 - prob), both clamped at eps."""
    p = prob.data if isinstance(prob, ScalarVolume) else prob
    p = np.asarray(p, dtype=np.float64)
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if (p < 0).any() or (p > 1).any():
        raise ValueError("probabilities must lie in [0, 1]")
    return UnaryTerm(-np.log(np.maximum(p, eps)), -np.log(np.maximum(1.0 - p, eps)))


def pairwise_edges(image, term: PairwiseTerm) -> PairwiseEdges:
    """Contrast-sensitive smoothness weights on the sigmoid-transformed image."""
    data = image.data if isinstance(image, ScalarVolume) else np.asarray(image)
    nb = Neighborhood.make(term.nbhd, data.ndim)
    p, q = neighbor_pairs(data.shape, nb)
    flat = sigmoid_transform(np.asarray(data, np.float64).ravel(), term.alpha, term.beta)
    return PairwiseEdges(p, q, boundary_weight(flat[p], flat[q], term.sigma, term.lam))


def energy(labeling, unary: UnaryTerm, edges: PairwiseEdges, prior: Optional[ShapePrior] = None,
           scale: Optional[float] = None):
    """Total MRF energy of a binary labeling.

    With ``scale`` the terms are first quantized exactly as the graph builder
    does and the result is an integer.  Returns ``INFEASIBLE`` when an
    infinite prior is violated.
    """
    f = np.asarray(labeling.data if isinstance(labeling, LabelVolume) else labeling).ravel() != 0
    if f.size != unary.d1.size:
        raise ValueError("labeling and unary term shapes differ")
    if scale is None:
        d1, d0, w = unary.d1.ravel(), unary.d0.ravel(), edges.w
        pen = prior.penalty if prior is not None else 0.0
    else:
        d1, d0, w = (quantize(x, scale) for x in (unary.d1.ravel(), unary.d0.ravel(), edges.w))
        pen = None
        if prior is not None:
            pen = INFEASIBLE if prior.infinite else int(quantize(np.array([prior.penalty]), scale)[0])

    total = d1[f].sum() + d0[~f].sum() + w[f[edges.p] != f[edges.q]].sum()
    if prior is not None:
        nviol = gvf_mod.edge_violations(f, prior.flow)
        if nviol:
            if math.isinf(pen):
                return INFEASIBLE
            total = total + nviol * pen
    return int(total) if scale is not None else float(total)


def quantize(x: np.ndarray, scale: float) -> np.ndarray:
    y = np.rint(np.asarray(x, dtype=np.float64) * scale)
    if np.abs(y).max(initial=0) >= 2**53:
        raise CapacityOverflowError("energy term too large for the chosen scale; use a smaller scale")
    return y.astype(np.int64)


def build_graph(unary: UnaryTerm, edges: PairwiseEdges, prior: Optional[ShapePrior] = None,
                scale: float = DEFAULT_SCALE) -> SExcessGraph:
    """One vertex per voxel; H = foreground.

    Vertex weight q(D1) - q(D0), both smoothness directions q(V) on one
    edge row, and one arc p -> next(p) per flow edge (INF or q(penalty)).
    """
    n = unary.d1.size
    w = quantize(unary.d1.ravel(), scale) - quantize(unary.d0.ravel(), scale)
    g = SExcessGraph(n, w)
    cap = quantize(edges.w, scale)
    g.add_edges(edges.p, edges.q, cap, cap)
    if prior is not None:
        add_prior_arcs(g, prior, scale, offset=0, flipped=False)
    g.inf_value()  # overflow check
    return g


def add_prior_arcs(g: SExcessGraph, prior: ShapePrior, scale: float, offset: int, flipped: bool) -> None:
    tgt = prior.flow.targets()
    src = np.flatnonzero(tgt >= 0)
    dst = tgt[src]
    cap = INF if prior.infinite else int(quantize(np.array([prior.penalty]), scale)[0])
    if flipped:
        src, dst = dst, src
    g.add_edges(src + offset, dst + offset, cap)


@dataclass
class BinarySolution:
    labels: np.ndarray
    energy: int
    cut: CutResult
    graph: SExcessGraph = field(repr=False)


def solve_binary(unary: UnaryTerm, edges: PairwiseEdges, prior: Optional[ShapePrior] = None,
                 scale: float = DEFAULT_SCALE) -> BinarySolution:
    """Globally optimal binary labeling; energy is in quantized units."""
    g = build_graph(unary, edges, prior, scale)
    cut = solve_s_excess(g)
    labels = cut.source_set.reshape(unary.shape).astype(np.uint8)
    base = int(quantize(unary.d0.ravel(), scale).sum())
    e = cut.objective + base
    check = energy(labels, unary, edges, prior, scale=scale)
    if check != e:
        raise AssertionError(f"cut objective {e} does not match labeling energy {check}")
    return BinarySolution(labels, e, cut, g)


@dataclass(frozen=True)
class SegmentParams:
    pairwise: PairwiseTerm = PairwiseTerm()
    gvf: GvfParams = GvfParams()
    prior_penalty: Optional[float] = math.inf  # None disables the prior
    scale: float = DEFAULT_SCALE
    eps: float = 1e-6


def gaussian_probability(image, preseg_mask: np.ndarray) -> np.ndarray:
    """Two-class Gaussian posterior P(object | I) with class statistics taken from a mask."""
    data = np.asarray(image.data if isinstance(image, ScalarVolume) else image, dtype=np.float64)
    inside = data[preseg_mask]
    outside = data[~preseg_mask]
    if inside.size == 0 or outside.size == 0:
        raise ValueError("pre-segmentation must contain both object and background voxels")
    spread = max(float(np.ptp(data)), 1e-12)
    s1 = max(float(inside.std()), 1e-3 * spread)
    s0 = max(float(outside.std()), 1e-3 * spread)
    l1 = -0.5 * ((data - inside.mean()) / s1) ** 2 - np.log(s1)
    l0 = -0.5 * ((data - outside.mean()) / s0) ** 2 - np.log(s0)
    return 1.0 / (1.0 + np.exp(np.clip(l0 - l1, -700, 700)))


def prepare_prior(preseg: LabelVolume, label: int, params: SegmentParams) -> Optional[ShapePrior]:
    if params.prior_penalty is None:
        return None
    _, _, flow = gvf_mod.build_flow(preseg, label, params.gvf)
    return ShapePrior(flow, params.prior_penalty)


def segment(image: ScalarVolume, preseg: LabelVolume, params: SegmentParams = SegmentParams(),
            prob: Optional[ScalarVolume] = None, label: int = 1,
            prior: Optional[ShapePrior] = None) -> LabelVolume:
    """Segment one object: unary from ``prob`` (or a Gaussian fit), contrast
    smoothness from ``image``, GVF prior from ``preseg`` (unless supplied)."""
    return segment_detailed(image, preseg, params, prob, label, prior)[0]


def segment_detailed(image, preseg, params=SegmentParams(), prob=None, label=1, prior=None):
    if image.shape != preseg.shape:
        raise ValueError("image and pre-segmentation shapes differ")
    if prob is None:
        p = gaussian_probability(image, preseg.data == label)
    else:
        if prob.shape != image.shape:
            raise ValueError("probability map and image shapes differ")
        p = prob.data
    unary = log_likelihood_unary(p, params.eps)
    edges = pairwise_edges(image, params.pairwise)
    if prior is None:
        prior = prepare_prior(preseg, label, params)
    sol = solve_binary(unary, edges, prior, params.scale)
    return LabelVolume(sol.labels, image.spacing), sol, prior
