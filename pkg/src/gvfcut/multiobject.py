"""Joint segmentation of several interacting objects in one s-excess graph.

Every object owns a copy of the voxel grid as a subgraph.  Inclusion and
exclusion margins become infinite arcs from a voxel of one subgraph to all
voxels of the other subgraph inside a ball of radius delta.  Exclusion
partners must have opposite polarity: in a flipped subgraph a vertex in the
source set means the voxel is *not* in the object.
"""

from __future__ import annotations

import logging
import math
import warnings
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np

from .gvf import CORE, DiscreteFlow
from .maxflow import INF, CutResult, SExcessGraph, solve_s_excess
from .mrf import (DEFAULT_SCALE, INFEASIBLE, PairwiseEdges, ShapePrior, UnaryTerm, add_prior_arcs,
                  energy, quantize)
from .volume import LabelVolume, edt, shifted_pairs

log = logging.getLogger(__name__)

DIRECT = "direct"
FLIPPED = "flipped"
_TOL = 1e-9


class ConstraintConfigError(ValueError):
    pass


@dataclass(eq=False)
class ObjectSpec:
    id: int
    unary: UnaryTerm
    edges: PairwiseEdges
    prior: Optional[ShapePrior] = None
    polarity: Optional[str] = None  # None: decided by the builder

    def __post_init__(self):
        if self.id <= 0 or self.id > 255:
            raise ValueError("object ids must be in 1..255 (0 is background)")
        if self.polarity not in (None, DIRECT, FLIPPED):
            raise ValueError(f"unknown polarity {self.polarity!r}")


@dataclass(frozen=True)
class InteractionConstraint:
    """``inclusion``: first inside second with margin ``distance`` (mm).
    ``exclusion``: first and second at least ``distance`` apart.
    ``max_distance``: first (inner) boundary at most ``distance`` from the
    second (outer) boundary along their shared GVF paths.
    """

    kind: str
    first: int
    second: int
    distance: float = 0.0

    def __post_init__(self):
        if self.kind not in ("inclusion", "exclusion", "max_distance"):
            raise ConstraintConfigError(f"unknown constraint kind {self.kind!r}")
        if self.first == self.second:
            raise ConstraintConfigError("a constraint needs two different objects")
        if self.kind == "max_distance":
            if not self.distance > 0:
                raise ConstraintConfigError("max_distance requires Delta > 0")
        elif not self.distance >= 0:
            raise ConstraintConfigError("delta must be >= 0")


@dataclass
class JointGraph:
    graph: SExcessGraph
    order: list  # object ids, subgraph k occupies vertices [k*n, (k+1)*n)
    polarity: dict
    n_voxels: int
    shape: tuple
    base: int  # quantized constant sum_k sum_p D^k_p(0) (or D(1) for flipped)

    def offset(self, obj_id: int) -> int:
        return self.order.index(obj_id) * self.n_voxels


def cone_offsets(delta: float, spacing: Sequence[float]) -> list[tuple[int, ...]]:
    """Integer offsets o with |o * spacing| <= delta (mm), including the zero offset."""
    spacing = np.asarray(spacing, dtype=np.float64)
    reach = [int(math.floor(delta / s + _TOL)) for s in spacing]
    grids = np.stack(np.meshgrid(*[np.arange(-r, r + 1) for r in reach], indexing="ij"), -1)
    grids = grids.reshape(-1, len(spacing))
    d = np.sqrt(np.sum((grids * spacing) ** 2, axis=1))
    return [tuple(int(x) for x in o) for o in grids[d <= delta + _TOL]]


def assign_polarity(objects: Sequence[ObjectSpec], constraints: Sequence[InteractionConstraint]) -> dict:
    """Inclusion and max-distance partners must be direct; exclusion partners
    opposite.  Unfixed objects default to direct, except that the second
    object of an exclusion is flipped when nothing forces otherwise."""
    ids = {o.id for o in objects}
    pol = {o.id: o.polarity for o in objects}
    for c in constraints:
        for k in (c.first, c.second):
            if k not in ids:
                raise ConstraintConfigError(f"constraint refers to unknown object {k}")

    forced = {}
    for c in constraints:
        if c.kind in ("inclusion", "max_distance"):
            for k in (c.first, c.second):
                if pol[k] == FLIPPED:
                    raise ConstraintConfigError(f"object {k} is declared flipped but takes part in {c.kind}")
                forced[k] = DIRECT
    for k, p in pol.items():
        if p is not None:
            forced.setdefault(k, p)

    excl = defaultdict(list)
    for c in constraints:
        if c.kind == "exclusion":
            excl[c.first].append(c.second)
            excl[c.second].append(c.first)

    result = {}

    def spread(seeds):
        queue = deque(seeds)
        while queue:
            k = queue.popleft()
            want = FLIPPED if result[k] == DIRECT else DIRECT
            for nb in excl[k]:
                if nb not in result:
                    result[nb] = want
                    queue.append(nb)
                elif result[nb] != want:
                    raise ConstraintConfigError(
                        f"objects {k} and {nb} are in an exclusion but would need the same "
                        "polarity; this constraint set cannot be encoded")

    result.update(forced)
    spread(list(forced))
    # free exclusion components: the first-named object stays direct
    for c in constraints:
        if c.kind == "exclusion" and c.first not in result:
            result[c.first] = DIRECT
            spread([c.first])
    for o in objects:
        result.setdefault(o.id, DIRECT)
    return result


def build_joint_graph(objects: Sequence[ObjectSpec], constraints: Sequence[InteractionConstraint],
                      spacing: Optional[Sequence[float]] = None, scale: float = DEFAULT_SCALE) -> JointGraph:
    if not objects:
        raise ConstraintConfigError("at least one object is required")
    if len({o.id for o in objects}) != len(objects):
        raise ConstraintConfigError("object ids must be unique")
    shape = objects[0].unary.shape
    if any(o.unary.shape != shape for o in objects):
        raise ConstraintConfigError("all objects must live on the same grid")
    by_id = {o.id: o for o in objects}
    if spacing is None:
        priors = [o.prior for o in objects if o.prior is not None]
        spacing = priors[0].flow.spacing if priors else (1.0,) * len(shape)
    polarity = assign_polarity(objects, constraints)

    for c in constraints:
        if c.kind == "max_distance":
            a, b = by_id[c.first].prior, by_id[c.second].prior
            if a is None or b is None or not a.flow.same_as(b.flow):
                raise ConstraintConfigError("max_distance requires both objects to share one GVF flow")

    n = int(np.prod(shape))
    order = [o.id for o in objects]
    weights = np.zeros(n * len(objects), dtype=np.int64)
    base = 0
    g = SExcessGraph(n * len(objects), weights)
    for k, o in enumerate(objects):
        off = k * n
        d1 = quantize(o.unary.d1.ravel(), scale)
        d0 = quantize(o.unary.d0.ravel(), scale)
        flipped = polarity[o.id] == FLIPPED
        if flipped:
            # v in H <=> f = 0: sum_{f=0}(d0 - d1) + sum_p d1
            weights[off:off + n] = d0 - d1
            base += int(d1.sum())
        else:
            weights[off:off + n] = d1 - d0
            base += int(d0.sum())
        cap = quantize(o.edges.w, scale)
        g.add_edges(o.edges.p + off, o.edges.q + off, cap, cap)
        if o.prior is not None:
            add_prior_arcs(g, o.prior, scale, off, flipped)
    g.weights = weights

    jg = JointGraph(g, order, polarity, n, tuple(shape), base)
    for c in constraints:
        if c.kind in ("inclusion", "exclusion"):
            _add_margin_arcs(jg, c, spacing)
        else:
            _add_max_distance_arcs(jg, c, by_id[c.first].prior.flow)
    _check_submodular(g)
    g.inf_value()
    return jg


def _add_margin_arcs(jg: JointGraph, c: InteractionConstraint, spacing) -> None:
    src_id, dst_id = c.first, c.second
    if c.kind == "inclusion":
        if jg.polarity[src_id] != DIRECT or jg.polarity[dst_id] != DIRECT:
            raise ConstraintConfigError("inclusion partners must both be direct")
    else:
        if jg.polarity[src_id] == jg.polarity[dst_id]:
            raise ConstraintConfigError("exclusion requires one flipped partner")
        if jg.polarity[src_id] == FLIPPED:
            src_id, dst_id = dst_id, src_id
    so, do = jg.offset(src_id), jg.offset(dst_id)
    for o in cone_offsets(c.distance, spacing):
        p, q = shifted_pairs(jg.shape, o)
        jg.graph.add_edges(p + so, q + do, INF)


@numba.njit(cache=True)
def _first_far(tgt, coords, spacing, delta):
    n = tgt.size
    out = np.full(n, -1, dtype=np.int64)
    ndim = coords.shape[1]
    for p in range(n):
        q = tgt[p]
        steps = 0
        while q >= 0 and steps <= n:
            d2 = 0.0
            for a in range(ndim):
                x = (coords[q, a] - coords[p, a]) * spacing[a]
                d2 += x * x
            if math.sqrt(d2) >= delta - 1e-9:
                out[p] = q
                break
            q = tgt[q]
            steps += 1
    return out


def first_far_voxel(flow: DiscreteFlow, delta: float) -> np.ndarray:
    """For each voxel p, the first voxel of GP(p) at distance >= delta (mm), or -1."""
    coords = np.stack(np.unravel_index(np.arange(int(np.prod(flow.shape))), flow.shape), 1).astype(np.int64)
    return _first_far(flow.targets(), coords, np.asarray(flow.spacing, np.float64), float(delta))


def _add_max_distance_arcs(jg: JointGraph, c: InteractionConstraint, flow: DiscreteFlow) -> None:
    inner, outer = c.first, c.second
    far = first_far_voxel(flow, c.distance)
    p = np.flatnonzero(far >= 0)
    jg.graph.add_edges(p + jg.offset(outer), far[p] + jg.offset(inner), INF)


def _check_submodular(g: SExcessGraph) -> None:
    e = g.edge_array
    bad = ((e[2] < 0) & (e[2] != INF)) | ((e[3] < 0) & (e[3] != INF))
    if bad.any():
        raise AssertionError("builder produced a negative capacity")


@dataclass
class JointSolution:
    labels: LabelVolume
    masks: dict
    energy: int
    cut: CutResult = field(repr=False)


def decode(cut: CutResult, jg: JointGraph, constraints: Sequence[InteractionConstraint] = (),
           spacing=None) -> tuple[np.ndarray, dict]:
    """Per-object masks and a 0..K label map.

    Nested objects (inclusion / max-distance) overlap by design; the inner
    object's label wins there.  Any other overlap goes to the lowest id with
    a warning.
    """
    n = jg.n_voxels
    masks = {}
    for k, obj_id in enumerate(jg.order):
        h = cut.source_set[k * n:(k + 1) * n]
        m = ~h if jg.polarity[obj_id] == FLIPPED else h.copy()
        masks[obj_id] = m.reshape(jg.shape)

    for c in constraints:
        if c.kind == "exclusion":
            overlap = masks[c.first] & masks[c.second]
            if overlap.any():
                raise AssertionError("exclusion violated in decoded masks")

    nested = {(c.first, c.second) for c in constraints if c.kind in ("inclusion", "max_distance")}
    rank = _nesting_rank(jg.order, nested)
    labels = np.zeros(jg.shape, dtype=np.uint8)
    claimed = np.zeros(jg.shape, dtype=bool)
    claim_owner = np.zeros(jg.shape, dtype=np.int64)
    for obj_id in sorted(jg.order, key=lambda k: (rank[k], k)):
        m = masks[obj_id]
        clash = m & claimed
        if clash.any():
            owners = set(np.unique(claim_owner[clash]).tolist())
            if not all((o, obj_id) in nested or _nested_path(o, obj_id, nested) for o in owners):
                warnings.warn(
                    f"object {obj_id} overlaps objects {sorted(owners)} without a constraint; "
                    "lower id wins", RuntimeWarning, stacklevel=2)
        free = m & ~claimed
        labels[free] = obj_id
        claim_owner[free] = obj_id
        claimed |= m
    return labels, masks


def _nested_path(inner, outer, nested) -> bool:
    frontier, seen = [inner], {inner}
    while frontier:
        k = frontier.pop()
        for a, b in nested:
            if a == k and b not in seen:
                if b == outer:
                    return True
                seen.add(b)
                frontier.append(b)
    return False


def _nesting_rank(ids, nested) -> dict:
    """Depth of each object in the containment order; innermost first."""
    rank = {k: 0 for k in ids}
    for _ in range(len(ids)):
        changed = False
        for inner, outer in nested:
            if rank[outer] < rank[inner] + 1:
                rank[outer] = rank[inner] + 1
                changed = True
        if not changed:
            break
    else:
        raise ConstraintConfigError("cyclic nesting constraints")
    return rank


def joint_energy(masks: dict, objects: Sequence[ObjectSpec], scale: Optional[float] = None):
    total = 0
    for o in objects:
        e = energy(masks[o.id], o.unary, o.edges, o.prior, scale=scale)
        if e == INFEASIBLE:
            return INFEASIBLE
        total += e
    return total


def segment_joint(objects: Sequence[ObjectSpec], constraints: Sequence[InteractionConstraint],
                  spacing=None, scale: float = DEFAULT_SCALE) -> JointSolution:
    jg = build_joint_graph(objects, constraints, spacing, scale)
    cut = solve_s_excess(jg.graph)
    labels, masks = decode(cut, jg, constraints)
    e = cut.objective + jg.base
    check = joint_energy(masks, objects, scale)
    if check != e:
        raise AssertionError(f"joint cut objective {e} does not match decoded energy {check}")
    if spacing is None:
        priors = [o.prior for o in objects if o.prior is not None]
        spacing = priors[0].flow.spacing if priors else (1.0,) * len(jg.shape)
    return JointSolution(LabelVolume(labels, spacing), masks, e, cut)


# independent constraint checker ----------------------------------------------


@dataclass
class Violation:
    constraint: InteractionConstraint
    voxel: tuple
    detail: str


@dataclass
class ConstraintReport:
    violations: list = field(default_factory=list)
    checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        lines = [f"constraints checked: {self.checked}, violations: {len(self.violations)}"]
        for v in self.violations[:50]:
            c = v.constraint
            lines.append(f"  {c.kind} {c.first} {c.second} {c.distance:g}: voxel {v.voxel} {v.detail}")
        return "\n".join(lines)


def masks_from_labels(labels: np.ndarray, constraints: Sequence[InteractionConstraint]) -> dict:
    """Per-object masks from a label map: an object also covers everything
    labelled as objects nested inside it."""
    labels = np.asarray(labels)
    ids = set(np.unique(labels).tolist()) - {0}
    for c in constraints:
        ids |= {c.first, c.second}
    nested = {(c.first, c.second) for c in constraints if c.kind in ("inclusion", "max_distance")}
    masks = {}
    for k in ids:
        m = labels == k
        for j in ids:
            if j != k and _nested_path(j, k, nested):
                m = m | (labels == j)
        masks[k] = m
    return masks


def verify_constraints(labels, constraints: Sequence[InteractionConstraint], spacing=None,
                       flows: Optional[dict] = None, masks: Optional[dict] = None) -> ConstraintReport:
    """Check decoded objects against their interaction constraints using
    exact distance transforms and explicit path walks."""
    if isinstance(labels, LabelVolume):
        spacing = spacing or labels.spacing
        labels = labels.data
    labels = np.asarray(labels)
    spacing = tuple(spacing or (1.0,) * labels.ndim)
    masks = masks if masks is not None else masks_from_labels(labels, constraints)
    report = ConstraintReport()
    for c in constraints:
        report.checked += 1
        a = masks.get(c.first, np.zeros(labels.shape, bool))
        b = masks.get(c.second, np.zeros(labels.shape, bool))
        if c.kind == "inclusion":
            if not a.any() or b.all():
                continue
            d = edt(~b, spacing)  # distance to nearest voxel outside the outer object
            bad = a & (d <= c.distance + _TOL)
            for v in zip(*np.nonzero(bad)):
                report.violations.append(Violation(c, tuple(int(x) for x in v),
                                                   f"outer exterior at {d[v]:.4g} mm <= {c.distance:g}"))
        elif c.kind == "exclusion":
            if not a.any() or not b.any():
                continue
            d = edt(b, spacing)
            bad = a & (d <= c.distance + _TOL)
            for v in zip(*np.nonzero(bad)):
                report.violations.append(Violation(c, tuple(int(x) for x in v),
                                                   f"other object at {d[v]:.4g} mm <= {c.distance:g}"))
        else:
            flow = (flows or {}).get(c.first)
            if flow is None:
                raise ConstraintConfigError("max_distance check needs the shared GVF flow")
            report.violations.extend(_check_max_distance(c, a, b, flow))
    return report


def _check_max_distance(c, inner, outer, flow: DiscreteFlow) -> list:
    out = []
    sp = np.asarray(flow.spacing)
    for p in zip(*np.nonzero(outer)):
        p_arr = np.asarray(p)
        x = p
        steps = 0
        while flow.next[x] != CORE:
            o = flow.offsets[flow.next[x]]
            x = tuple(int(i + j) for i, j in zip(x, o))
            steps += 1
            if np.sqrt(np.sum(((np.asarray(x) - p_arr) * sp) ** 2)) >= c.distance - _TOL:
                if not inner[x]:
                    out.append(Violation(c, tuple(int(i) for i in p),
                                         f"path voxel {x} at >= {c.distance:g} mm is not inner"))
                break
            if steps > flow.next.size:
                raise RuntimeError("cyclic flow")
    return out
