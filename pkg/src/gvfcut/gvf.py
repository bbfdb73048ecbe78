"""Gradient vector flow of a pre-segmentation and its discretization.

The field h minimizes

    sum_p |g_p|^2 |h_p - g_p|^2 + mu * sum_{p~q} |h_p - h_q|^2

where g is the gradient of the binary pre-segmentation.  Following the
discretized field from any voxel walks towards the object core; those walks
are the GVF paths that carry the shape prior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
from scipy import ndimage

from .volume import EmptyLabelError, LabelVolume, Neighborhood

log = logging.getLogger(__name__)

CORE = 255


class GvfParameterError(ValueError):
    pass


@dataclass(frozen=True)
class GvfParams:
    mu: float = 0.2
    dt: Optional[float] = None  # None: 90% of the stability bound
    max_iters: int = 2000
    tol: float = 1e-4
    core_threshold: float = 0.05
    smooth_sigma: float = 0.0

    def __post_init__(self):
        if self.mu < 0:
            raise GvfParameterError("mu must be >= 0")
        if self.dt is not None and self.dt <= 0:
            raise GvfParameterError("dt must be > 0")
        if self.max_iters <= 0:
            raise GvfParameterError("max_iters must be positive")
        if self.tol < 0:
            raise GvfParameterError("tol must be >= 0")
        if self.core_threshold <= 0:
            raise GvfParameterError("core_threshold must be > 0")


@dataclass(frozen=True, eq=False)
class VectorField:
    """Per-voxel vectors stored as an array of shape ``(ndim, *dims)``."""

    vectors: np.ndarray
    spacing: tuple[float, ...]

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim < 3 or v.shape[0] != v.ndim - 1:
            raise ValueError("vector field must have shape (ndim, *dims)")
        if not np.all(np.isfinite(v)):
            raise ValueError("vector field contains non-finite values")
        object.__setattr__(self, "vectors", v)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.vectors.shape[1:]

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.vectors**2, axis=0))


@dataclass(frozen=True, eq=False)
class DiscreteFlow:
    """Per-voxel index into ``offsets`` or :data:`CORE`."""

    next: np.ndarray
    offsets: tuple[tuple[int, ...], ...]
    spacing: tuple[float, ...]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.next.shape

    @property
    def core(self) -> np.ndarray:
        return self.next == CORE

    def targets(self) -> np.ndarray:
        """Flat array: linear index of the next voxel, -1 for core voxels."""
        return _targets(self.next, self.offsets)

    def same_as(self, other: "DiscreteFlow") -> bool:
        return (
            self is other
            or (self.offsets == other.offsets and np.array_equal(self.next, other.next))
        )


def _targets(nxt: np.ndarray, offsets) -> np.ndarray:
    dims = nxt.shape
    strides = np.array([int(np.prod(dims[a + 1:])) for a in range(len(dims))], dtype=np.int64)
    steps = np.array([int(np.dot(o, strides)) for o in offsets] + [0], dtype=np.int64)
    flat = nxt.ravel().astype(np.int64)
    sel = np.where(flat == CORE, len(offsets), flat)
    tgt = np.arange(flat.size, dtype=np.int64) + steps[sel]
    tgt[flat == CORE] = -1
    return tgt


def binary_gradient(preseg: LabelVolume, object_label: int, smooth_sigma: float = 0.0) -> VectorField:
    """Central-difference gradient of the label's indicator (one-sided at the border)."""
    indicator = (preseg.data == object_label).astype(np.float64)
    if not indicator.any():
        raise EmptyLabelError(f"label {object_label} not present in pre-segmentation")
    if smooth_sigma > 0:
        indicator = ndimage.gaussian_filter(indicator, smooth_sigma)
    # an axis of length 1 carries no variation
    grads = [np.gradient(indicator, axis=a) if indicator.shape[a] > 1 else np.zeros_like(indicator)
             for a in range(indicator.ndim)]
    return VectorField(np.stack(grads), preseg.spacing)


def stability_bound(mu: float, ndim: int, max_sq_grad: float) -> float:
    return 1.0 / (2 * (2 * ndim) * mu + max_sq_grad)


@numba.njit(cache=True)
def _gvf_step(h, g, g2, mu, dt, out):
    """One explicit Euler step into ``out``; returns the largest update norm."""
    nc, nz, ny, nx = h.shape
    biggest = 0.0
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                sq = 0.0
                for c in range(nc):
                    v = h[c, z, y, x]
                    lap = 0.0
                    if z > 0:
                        lap += h[c, z - 1, y, x] - v
                    if z < nz - 1:
                        lap += h[c, z + 1, y, x] - v
                    if y > 0:
                        lap += h[c, z, y - 1, x] - v
                    if y < ny - 1:
                        lap += h[c, z, y + 1, x] - v
                    if x > 0:
                        lap += h[c, z, y, x - 1] - v
                    if x < nx - 1:
                        lap += h[c, z, y, x + 1] - v
                    step = dt * (mu * lap - g2[z, y, x] * (v - g[c, z, y, x]))
                    out[c, z, y, x] = v + step
                    sq += step * step
                if sq > biggest:
                    biggest = sq
    return np.sqrt(biggest)


def gvf_energy(h: np.ndarray, grad: np.ndarray, mu: float) -> float:
    g2 = np.sum(grad**2, axis=0)
    fidelity = float(np.sum(g2 * np.sum((h - grad) ** 2, axis=0)))
    smooth = 0.0
    for a in range(1, h.ndim):
        smooth += float(np.sum(np.diff(h, axis=a) ** 2))
    return fidelity + mu * smooth


def compute_gvf(
    grad: VectorField, params: GvfParams = GvfParams(), history: Optional[list] = None
) -> VectorField:
    """Explicit Euler descent on the GVF energy starting from ``h = grad``.

    If ``history`` is a list, the discrete energy is appended after every
    iteration and an AssertionError is raised if it ever increases.
    """
    g = grad.vectors
    g2 = np.sum(g**2, axis=0)
    ndim = g.shape[0]
    bound = stability_bound(params.mu, ndim, float(g2.max()))
    dt = 0.9 * bound if params.dt is None else params.dt
    if dt > bound:
        raise GvfParameterError(f"dt={dt} exceeds the stability bound {bound:.6g}")

    h = g.copy()
    if history is not None:
        history.append(gvf_energy(h, g, params.mu))
    if not g2.any():
        return VectorField(h, grad.spacing)

    # kernels work on (ncomp, z, y, x); 2D fields get a singleton z axis
    h3 = h.reshape((ndim,) + (1,) * (3 - ndim) + h.shape[1:])
    g3 = g.reshape(h3.shape)
    g23 = g2.reshape(h3.shape[1:])
    nxt = np.empty_like(h3)
    it = 0
    for it in range(1, params.max_iters + 1):
        biggest = _gvf_step(h3, g3, g23, params.mu, dt, nxt)
        h3, nxt = nxt, h3
        if history is not None:
            e = gvf_energy(h3.reshape(g.shape), g, params.mu)
            prev = history[-1]
            if e > prev + 1e-12 * max(1.0, abs(prev)):
                raise AssertionError(f"GVF energy increased at iteration {it}: {prev} -> {e}")
            history.append(e)
        if biggest <= params.tol:
            break
    h = np.ascontiguousarray(h3).reshape(g.shape)
    log.debug("gvf finished after %d iterations", it)
    return VectorField(h, grad.spacing)


def extract_core(h: VectorField, preseg: LabelVolume, object_label: int, theta: float) -> LabelVolume:
    """Pre-segmentation voxels with |h| < theta * max|h|.

    Falls back to the minimum-magnitude voxels of the object when the
    threshold selects nothing; theta >= 1 selects the whole object.
    """
    if theta <= 0:
        raise GvfParameterError("theta must be > 0")
    inside = preseg.data == object_label
    if not inside.any():
        raise EmptyLabelError(f"label {object_label} not present in pre-segmentation")
    mag = h.magnitude()
    if theta >= 1:
        core = inside
    else:
        core = inside & (mag < theta * mag.max())
        if not core.any():
            core = inside & (mag == mag[inside].min())
    return LabelVolume(core.astype(np.uint8), preseg.spacing)


def discretize(h: VectorField, core: LabelVolume, nbhd: Optional[Neighborhood] = None) -> DiscreteFlow:
    """Point each non-core voxel at the in-bounds neighbor best aligned with h.

    Ties (including zero vectors) go to the offset listed first in the
    neighborhood.  Cycles are then removed, see :func:`repair_cycles`.
    """
    ndim = len(h.shape)
    nbhd = nbhd or Neighborhood.make("full", ndim)
    if nbhd.kind != "full":
        raise ValueError("discretization uses the full neighborhood")
    dims = h.shape
    best = np.full(dims, -np.inf)
    nxt = np.zeros(dims, dtype=np.uint8)
    grids = np.indices(dims, sparse=True)
    for k, o in enumerate(nbhd.offsets):
        score = sum(h.vectors[a] * (o[a] / np.sqrt(np.dot(o, o))) for a in range(ndim) if o[a])
        inb = np.ones(dims, dtype=bool)
        for a in range(ndim):
            if o[a] > 0:
                inb = inb & (grids[a] < dims[a] - o[a])
            elif o[a] < 0:
                inb = inb & (grids[a] >= -o[a])
        score = np.where(inb, score, -np.inf)
        better = score > best
        best = np.where(better, score, best)
        nxt[better] = k
    nxt[core.data.astype(bool)] = CORE
    flow = DiscreteFlow(nxt, nbhd.offsets, h.spacing)
    return repair_cycles(flow)


@numba.njit(cache=True)
def _repair(tgt):
    n = tgt.size
    state = np.zeros(n, dtype=np.int8)  # 0 new, 1 on current walk, 2 done
    promoted = np.zeros(n, dtype=np.bool_)
    walk = np.empty(n, dtype=np.int64)
    for s in range(n):
        if state[s] != 0:
            continue
        length = 0
        v = s
        while True:
            state[v] = 1
            walk[length] = v
            length += 1
            w = tgt[v]
            if w < 0:
                break
            if state[w] == 2:
                break
            if state[w] == 1:
                # walk re-enters itself: v becomes a sink
                tgt[v] = -1
                promoted[v] = True
                break
            v = w
        for i in range(length):
            state[walk[i]] = 2
    return promoted


def repair_cycles(flow: DiscreteFlow) -> DiscreteFlow:
    """Promote to CORE every voxel whose walk would re-enter itself."""
    tgt = flow.targets()
    promoted = _repair(tgt)
    if promoted.any():
        log.debug("cycle repair promoted %d voxels to core", int(promoted.sum()))
        nxt = flow.next.copy()
        nxt.ravel()[promoted] = CORE
        return DiscreteFlow(nxt, flow.offsets, flow.spacing)
    return flow


def trace_path(flow: DiscreteFlow, p) -> list[tuple[int, ...]]:
    """GVF path q0..qN from voxel ``p`` to the core; empty for core voxels."""
    dims = flow.shape
    p = tuple(int(c) for c in p)
    path = []
    limit = int(np.prod(dims))
    while flow.next[p] != CORE:
        o = flow.offsets[flow.next[p]]
        p = tuple(c + d for c, d in zip(p, o))
        path.append(p)
        if len(path) > limit:
            raise RuntimeError("GVF path does not terminate; flow is cyclic")
    return path


@numba.njit(cache=True)
def _depths(tgt):
    n = tgt.size
    depth = np.full(n, -1, dtype=np.int64)
    walk = np.empty(n, dtype=np.int64)
    for s in range(n):
        if depth[s] >= 0:
            continue
        length = 0
        v = s
        while depth[v] < 0 and tgt[v] >= 0:
            walk[length] = v
            length += 1
            v = tgt[v]
            if length > n:
                return depth[:0]
        if depth[v] < 0:
            depth[v] = 0
        d = depth[v]
        for i in range(length - 1, -1, -1):
            d += 1
            depth[walk[i]] = d
    return depth


def path_depths(flow: DiscreteFlow) -> np.ndarray:
    """Number of steps from each voxel to the core (flat array)."""
    depth = _depths(flow.targets())
    if depth.size == 0:
        raise RuntimeError("flow contains a cycle")
    return depth


def edge_violations(labels: np.ndarray, flow: DiscreteFlow) -> int:
    """Count flow edges p->q with f_p = 1 and f_q = 0."""
    f = np.asarray(labels).ravel().astype(bool)
    tgt = flow.targets()
    src = np.flatnonzero(tgt >= 0)
    return int(np.count_nonzero(f[src] & ~f[tgt[src]]))


def path_violations(labels: np.ndarray, flow: DiscreteFlow) -> np.ndarray:
    """Foreground voxels whose GVF path is not entirely foreground (flat indices).

    Evaluated along whole paths, independently of the per-edge check.
    """
    f = np.asarray(labels).ravel().astype(bool)
    tgt = flow.targets()
    depth = path_depths(flow)
    order = np.argsort(depth, kind="stable")
    # path_ok[p]: every voxel of GP(p) is foreground
    sorted_depth = depth[order]
    path_ok = np.ones(f.size, dtype=bool)
    for d in range(1, int(depth.max()) + 1 if depth.size else 0):
        lo, hi = np.searchsorted(sorted_depth, [d, d + 1])
        idx = order[lo:hi]
        nxt = tgt[idx]
        path_ok[idx] = f[nxt] & path_ok[nxt]
    return np.flatnonzero(f & ~path_ok)


def build_flow(preseg: LabelVolume, object_label: int, params: GvfParams = GvfParams()):
    """Convenience pipeline: gradient, GVF, core, discretized flow."""
    grad = binary_gradient(preseg, object_label, params.smooth_sigma)
    h = compute_gvf(grad, params)
    core = extract_core(h, preseg, object_label, params.core_threshold)
    flow = discretize(h, core)
    return h, core, flow
