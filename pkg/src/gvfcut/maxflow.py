"""Minimum s-excess via minimum s-t cut.

The cut is computed by a Boykov-Kolmogorov dual search-tree augmenting path
solver over integer capacities.  Vertices with negative weight get a source
arc of capacity -w, vertices with positive weight a sink arc of capacity w;
the source side of the minimum cut (minus the source) is the optimal set H.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numba
import numpy as np

INF = -1
"""Capacity sentinel for infinite edges, resolved at solve time."""

_MAX_CAPACITY = 2**61


class CapacityOverflowError(OverflowError):
    pass


class GraphFormatError(ValueError):
    pass


# Boykov-Kolmogorov kernel ----------------------------------------------------

_TERMINAL = -1
_NO_PARENT = -2
_ORPHAN = -3
_FREE, _SRC, _SNK = 0, 1, 2
_BIG = 2**62


@numba.njit(cache=True)
def _bk(n, first, adj, head, rcap, tr_cap):
    tree = np.zeros(n, dtype=np.int8)
    parent = np.full(n, _NO_PARENT, dtype=np.int64)
    ts = np.zeros(n, dtype=np.int64)
    dist = np.zeros(n, dtype=np.int64)
    queued = np.zeros(n, dtype=np.bool_)
    active = np.empty(n + 1, dtype=np.int64)
    a_head = 0
    a_tail = 0
    qcap = n + 1
    orphans = np.empty(n + 1, dtype=np.int64)

    for v in range(n):
        if tr_cap[v] != 0:
            tree[v] = _SRC if tr_cap[v] > 0 else _SNK
            parent[v] = _TERMINAL
            dist[v] = 1
            queued[v] = True
            active[a_tail] = v
            a_tail = (a_tail + 1) % qcap

    flow = 0
    time = 0
    current = -1
    while True:
        v = -1
        if current >= 0 and tree[current] != _FREE:
            v = current
        else:
            current = -1
            while a_head != a_tail:
                u = active[a_head]
                a_head = (a_head + 1) % qcap
                queued[u] = False
                if tree[u] != _FREE:
                    v = u
                    break
        if v < 0:
            break

        # grow
        mid = -1
        if tree[v] == _SRC:
            for k in range(first[v], first[v + 1]):
                a = adj[k]
                if rcap[a] > 0:
                    w = head[a]
                    if tree[w] == _FREE:
                        tree[w] = _SRC
                        parent[w] = a ^ 1
                        ts[w] = ts[v]
                        dist[w] = dist[v] + 1
                        if not queued[w]:
                            queued[w] = True
                            active[a_tail] = w
                            a_tail = (a_tail + 1) % qcap
                    elif tree[w] == _SNK:
                        mid = a
                        break
                    elif ts[w] <= ts[v] and dist[w] > dist[v]:
                        parent[w] = a ^ 1
                        ts[w] = ts[v]
                        dist[w] = dist[v] + 1
        else:
            for k in range(first[v], first[v + 1]):
                a = adj[k]
                if rcap[a ^ 1] > 0:
                    w = head[a]
                    if tree[w] == _FREE:
                        tree[w] = _SNK
                        parent[w] = a ^ 1
                        ts[w] = ts[v]
                        dist[w] = dist[v] + 1
                        if not queued[w]:
                            queued[w] = True
                            active[a_tail] = w
                            a_tail = (a_tail + 1) % qcap
                    elif tree[w] == _SRC:
                        mid = a ^ 1
                        break
                    elif ts[w] <= ts[v] and dist[w] > dist[v]:
                        parent[w] = a ^ 1
                        ts[w] = ts[v]
                        dist[w] = dist[v] + 1

        time += 1
        if mid < 0:
            current = -1
            continue
        current = v

        # augment along source-root .. s_node -> t_node .. sink-root
        s_node = head[mid ^ 1]
        t_node = head[mid]
        bott = rcap[mid]
        x = s_node
        while parent[x] != _TERMINAL:
            a = parent[x]
            if rcap[a ^ 1] < bott:
                bott = rcap[a ^ 1]
            x = head[a]
        if tr_cap[x] < bott:
            bott = tr_cap[x]
        x = t_node
        while parent[x] != _TERMINAL:
            a = parent[x]
            if rcap[a] < bott:
                bott = rcap[a]
            x = head[a]
        if -tr_cap[x] < bott:
            bott = -tr_cap[x]

        rcap[mid] -= bott
        rcap[mid ^ 1] += bott
        n_orph = 0
        x = s_node
        while parent[x] != _TERMINAL:
            a = parent[x]
            rcap[a] += bott
            rcap[a ^ 1] -= bott
            nxt = head[a]
            if rcap[a ^ 1] == 0:
                parent[x] = _ORPHAN
                orphans[n_orph] = x
                n_orph += 1
            x = nxt
        tr_cap[x] -= bott
        if tr_cap[x] == 0:
            parent[x] = _ORPHAN
            orphans[n_orph] = x
            n_orph += 1
        x = t_node
        while parent[x] != _TERMINAL:
            a = parent[x]
            rcap[a ^ 1] += bott
            rcap[a] -= bott
            nxt = head[a]
            if rcap[a] == 0:
                parent[x] = _ORPHAN
                orphans[n_orph] = x
                n_orph += 1
            x = nxt
        tr_cap[x] += bott
        if tr_cap[x] == 0:
            parent[x] = _ORPHAN
            orphans[n_orph] = x
            n_orph += 1
        flow += bott

        # adopt orphans (LIFO)
        time += 1
        while n_orph > 0:
            n_orph -= 1
            x = orphans[n_orph]
            side = tree[x]
            best = -1
            d_min = _BIG
            for k in range(first[x], first[x + 1]):
                a = adj[k]
                # residual capacity from candidate parent y towards x (source tree)
                # or from x towards y (sink tree)
                r = rcap[a ^ 1] if side == _SRC else rcap[a]
                if r == 0:
                    continue
                y = head[a]
                if tree[y] != side or parent[y] == _NO_PARENT:
                    continue
                d = 0
                j = y
                while True:
                    if ts[j] == time:
                        d += dist[j]
                        break
                    pa = parent[j]
                    d += 1
                    if pa == _TERMINAL:
                        ts[j] = time
                        dist[j] = 1
                        break
                    if pa == _ORPHAN:
                        d = _BIG
                        break
                    j = head[pa]
                if d < _BIG:
                    if d < d_min:
                        best = a
                        d_min = d
                    j = y
                    while ts[j] != time:
                        ts[j] = time
                        dist[j] = d
                        d -= 1
                        j = head[parent[j]]
            if best >= 0:
                parent[x] = best
                ts[x] = time
                dist[x] = d_min + 1
                continue
            for k in range(first[x], first[x + 1]):
                a = adj[k]
                y = head[a]
                if tree[y] != side:
                    continue
                pa = parent[y]
                r = rcap[a ^ 1] if side == _SRC else rcap[a]
                if r > 0 and not queued[y]:
                    queued[y] = True
                    active[a_tail] = y
                    a_tail = (a_tail + 1) % qcap
                if pa >= 0 and head[pa] == x:
                    parent[y] = _ORPHAN
                    orphans[n_orph] = y
                    n_orph += 1
            tree[x] = _FREE
            parent[x] = _NO_PARENT

    return flow, tree == _SRC


def _arc_arrays(n, tails, heads, caps, rev_caps):
    """Paired arc arrays (arc 2i: tail->head, arc 2i+1: reverse) plus CSR adjacency."""
    m = tails.size
    head = np.empty(2 * m, dtype=np.int32 if n < 2**31 else np.int64)
    head[0::2] = heads
    head[1::2] = tails
    rcap = np.empty(2 * m, dtype=np.int64)
    rcap[0::2] = caps
    rcap[1::2] = rev_caps
    tail = np.empty(2 * m, dtype=np.int64)
    tail[0::2] = tails
    tail[1::2] = heads
    adj = np.argsort(tail, kind="stable")
    first = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(tail, minlength=n), out=first[1:])
    return first, adj, head, rcap


def _run(n, tails, heads, caps, rev_caps, tr_cap):
    first, adj, head, rcap = _arc_arrays(n, tails, heads, caps, rev_caps)
    return _bk(n, first, adj, head, rcap, tr_cap.copy())


@dataclass
class FlowResult:
    flow_value: int
    source_side: np.ndarray
    cut_capacity: int


def max_flow(n: int, source: int, sink: int, arcs) -> FlowResult:
    """Maximum s-t flow on ``n`` vertices given ``(u, v, cap)`` arcs.

    Returns the flow value and the source side of a minimum cut.  The cut
    capacity is recomputed from the partition and checked against the flow.
    """
    if source == sink:
        raise ValueError("source and sink must differ")
    arcs = np.asarray(list(arcs) if not isinstance(arcs, np.ndarray) else arcs, dtype=np.int64)
    arcs = arcs.reshape(-1, 3)
    u, v, c = arcs[:, 0], arcs[:, 1], arcs[:, 2]
    if (c < 0).any():
        raise ValueError("capacities must be non-negative")
    if ((u < 0) | (u >= n) | (v < 0) | (v >= n)).any():
        raise ValueError("arc endpoint out of range")

    keep = (u != v) & (u != sink) & (v != source)
    u, v, c = u[keep], v[keep], c[keep]
    direct = int(c[(u == source) & (v == sink)].sum())
    src_cap = np.bincount(v[u == source], weights=c[u == source], minlength=n).astype(np.int64)
    snk_cap = np.bincount(u[v == sink], weights=c[v == sink], minlength=n).astype(np.int64)
    inner = (u != source) & (v != sink)
    both = np.minimum(src_cap, snk_cap)
    base = direct + int(both.sum())
    tr = src_cap - snk_cap
    flow, tree_src = _run(n, u[inner], v[inner], c[inner], np.zeros(int(inner.sum()), np.int64), tr)

    side = tree_src.copy()
    side[source] = True
    side[sink] = False
    cut = int(c[side[u] & ~side[v]].sum())
    value = base + int(flow)
    if cut != value:
        raise AssertionError(f"max-flow {value} != min-cut capacity {cut}")
    return FlowResult(value, side, cut)


# s-excess --------------------------------------------------------------------


@dataclass
class SExcessGraph:
    """Signed vertex weights and directed edges with non-negative capacities.

    Each stored edge row ``(u, v, cap, rev)`` stands for the arc u->v with
    capacity ``cap`` and, when ``rev > 0``, the arc v->u with capacity
    ``rev``; symmetric smoothness pairs share one row this way.  ``INF`` may
    be used for either capacity.
    """

    n: int
    weights: np.ndarray = None
    _chunks: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.zeros(self.n, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.int64)
        if self.weights.shape != (self.n,):
            raise ValueError("one weight per vertex required")

    def add_edges(self, tails, heads, caps, rev_caps=None) -> None:
        tails = np.asarray(tails, dtype=np.int64).ravel()
        heads = np.asarray(heads, dtype=np.int64).ravel()
        caps = np.broadcast_to(np.asarray(caps, dtype=np.int64), tails.shape).copy()
        rev = (
            np.zeros_like(caps)
            if rev_caps is None
            else np.broadcast_to(np.asarray(rev_caps, dtype=np.int64), tails.shape).copy()
        )
        if heads.shape != tails.shape:
            raise ValueError("tails and heads must have equal length")
        if tails.size == 0:
            return
        if ((caps < 0) & (caps != INF)).any() or ((rev < 0) & (rev != INF)).any():
            raise ValueError("capacities must be non-negative or INF")
        if ((tails < 0) | (tails >= self.n) | (heads < 0) | (heads >= self.n)).any():
            raise ValueError("edge endpoint out of range")
        if (tails == heads).any():
            raise ValueError("self-loops are not allowed")
        self._chunks.append(np.stack([tails, heads, caps, rev]))

    def add_edge(self, u: int, v: int, cap: int) -> None:
        self.add_edges([u], [v], [cap])

    @property
    def edge_array(self) -> np.ndarray:
        """Rows (u, v, cap, rev); consolidated on first access."""
        if len(self._chunks) != 1:
            arr = np.concatenate(self._chunks, axis=1) if self._chunks else np.zeros((4, 0), np.int64)
            self._chunks = [arr]
        return self._chunks[0]

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Expanded (u, v, cap) arrays with zero-capacity reverse arcs dropped."""
        e = self.edge_array
        back = e[3] != 0
        u = np.concatenate([e[0], e[1][back]])
        v = np.concatenate([e[1], e[0][back]])
        c = np.concatenate([e[2], e[3][back]])
        return u, v, c

    @property
    def m(self) -> int:
        u, _, _ = self.directed_edges()
        return u.size

    def inf_value(self) -> int:
        e = self.edge_array
        finite = int(e[2][e[2] != INF].sum()) + int(e[3][e[3] != INF].sum())
        total = finite + int(np.abs(self.weights).sum()) + 1
        if total >= _MAX_CAPACITY:
            raise CapacityOverflowError(
                "capacity sum exceeds 64-bit headroom; use a smaller energy scale"
            )
        return total

    def objective(self, source_set: np.ndarray, inf_value: int = None) -> int:
        """gamma(H) = sum of weights in H + capacity of edges leaving H."""
        h = np.asarray(source_set, dtype=bool)
        inf_value = self.inf_value() if inf_value is None else inf_value
        u, v, c = self.directed_edges()
        c = np.where(c == INF, inf_value, c)
        leaving = h[u] & ~h[v]
        return int(self.weights[h].sum()) + sum(int(x) for x in c[leaving])


@dataclass
class CutResult:
    source_set: np.ndarray
    objective: int
    flow_value: int


def solve_s_excess(g: SExcessGraph) -> CutResult:
    """Exact minimum s-excess set of ``g``."""
    inf = g.inf_value()
    e = g.edge_array
    caps = np.where(e[2] == INF, inf, e[2])
    rev = np.where(e[3] == INF, inf, e[3])
    tr = -g.weights.copy()
    flow, h = _run(g.n, e[0], e[1], caps, rev, tr)
    flow = int(flow)

    neg = int(-g.weights[g.weights < 0].sum())
    objective = g.objective(h, inf)
    if objective != flow - neg:
        raise AssertionError(f"s-excess objective {objective} != flow {flow} - {neg}")
    if objective >= inf - neg:
        raise AssertionError("optimal set has an infinite edge leaving it")
    return CutResult(h, objective, flow)


# text dump format ------------------------------------------------------------


def write_graph(g: SExcessGraph, path: Union[str, Path]) -> None:
    u, v, c = g.directed_edges()
    lines = [f"sexcess {g.n} {u.size}"]
    lines += [str(int(w)) for w in g.weights]
    lines += [f"{a} {b} {'INF' if cap == INF else int(cap)}" for a, b, cap in zip(u, v, c)]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_graph(lines: Iterable[str]) -> SExcessGraph:
    rows = [(i + 1, ln.strip()) for i, ln in enumerate(lines)]
    rows = [(i, ln) for i, ln in rows if ln and not ln.startswith("#")]
    if not rows:
        raise GraphFormatError("empty graph file")
    lineno, header = rows[0]
    parts = header.split()
    if len(parts) != 3 or parts[0] != "sexcess":
        raise GraphFormatError(f"line {lineno}: expected 'sexcess n m', got {header!r}")
    try:
        n, m = int(parts[1]), int(parts[2])
    except ValueError:
        raise GraphFormatError(f"line {lineno}: n and m must be integers") from None
    if len(rows) != 1 + n + m:
        raise GraphFormatError(f"expected {n} weight lines and {m} edge lines, found {len(rows) - 1} lines")
    weights = []
    for lineno, text in rows[1:1 + n]:
        try:
            weights.append(int(text))
        except ValueError:
            raise GraphFormatError(f"line {lineno}: bad vertex weight {text!r}") from None
    g = SExcessGraph(n, np.array(weights, dtype=np.int64))
    tails, heads, caps = [], [], []
    for lineno, text in rows[1 + n:]:
        t = text.split()
        if len(t) != 3:
            raise GraphFormatError(f"line {lineno}: expected 'u v cap', got {text!r}")
        try:
            a, b = int(t[0]), int(t[1])
            cap = INF if t[2] == "INF" else int(t[2])
        except ValueError:
            raise GraphFormatError(f"line {lineno}: bad edge {text!r}") from None
        if not (0 <= a < n and 0 <= b < n) or a == b or (cap < 0 and cap != INF):
            raise GraphFormatError(f"line {lineno}: invalid edge {text!r}")
        tails.append(a)
        heads.append(b)
        caps.append(cap)
    g.add_edges(tails, heads, caps)
    return g


def read_graph(path: Union[str, Path]) -> SExcessGraph:
    return parse_graph(Path(path).read_text().splitlines())
