"""Command line entry point: ``gvfcut <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import shlex
import sys
from pathlib import Path

import numpy as np

from . import gvf, harness, metrics, mrf
from .maxflow import read_graph, solve_s_excess
from .multiobject import InteractionConstraint, ObjectSpec, segment_joint, verify_constraints
from .volume import LabelVolume, ScalarVolume, read_volume, write_volume

log = logging.getLogger("gvfcut")


def _floats(text):
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(x) for x in text.replace(",", " ").split())


def _penalty(text):
    t = text.strip().lower()
    if t in ("inf", "infinite"):
        return math.inf
    if t in ("none", "off"):
        return None
    value = float(t)
    if value < 0:
        raise argparse.ArgumentTypeError("prior penalty must be >= 0")
    return value


def _load(path, kind):
    vol = read_volume(path)
    if kind is LabelVolume and not isinstance(vol, LabelVolume):
        raise ValueError(f"{path}: expected a u8 label volume")
    if kind is ScalarVolume and not isinstance(vol, ScalarVolume):
        vol = ScalarVolume(vol.data.astype(np.float32), vol.spacing)
    return vol


def _gvf_params(a):
    return gvf.GvfParams(mu=a.mu, dt=a.dt, max_iters=a.iters, tol=a.tol, core_threshold=a.theta)


def _add_gvf_flags(p):
    d = gvf.GvfParams()
    p.add_argument("--mu", type=float, default=d.mu)
    p.add_argument("--dt", type=float, default=None, help="time step (default: 90%% of stability bound)")
    p.add_argument("--iters", type=int, default=d.max_iters)
    p.add_argument("--tol", type=float, default=d.tol)
    p.add_argument("--theta", type=float, default=d.core_threshold)


def cmd_phantom(a):
    spec = harness.PhantomSpec(
        kind=a.kind, dims=a.dims, radii=a.radii, gap=a.gap, noise=a.noise, hole_rate=a.hole_rate,
        contrast=a.contrast, spacing=a.spacing, rotation=a.rotation,
    )
    ph = harness.make_phantom(spec, a.seed)
    write_volume(ph.ground_truth, a.out)
    if a.image:
        write_volume(ph.observation, a.image)
    if a.prob:
        if "{k}" in a.prob:
            for k, p in ph.probs.items():
                write_volume(p, a.prob.format(k=k))
        else:
            write_volume(ph.prob, a.prob)
    return 0


def cmd_gvf(a):
    pre = _load(a.preseg, LabelVolume)
    params = _gvf_params(a)
    h, core, flow = gvf.build_flow(pre, a.label, params)
    prefix = a.out
    for c in range(h.vectors.shape[0]):
        write_volume(ScalarVolume(h.vectors[c].astype(np.float32), pre.spacing), f"{prefix}_h{c}.svol")
    write_volume(core, f"{prefix}_core.svol")
    write_volume(LabelVolume(flow.next, pre.spacing), f"{prefix}_flow.svol")
    print(f"core voxels: {int(core.data.sum())}, flow core (after repair): {int(flow.core.sum())}")
    return 0


def _segment_params(a):
    pair = mrf.PairwiseTerm(lam=a.lam, sigma=a.sigma, alpha=a.alpha, beta=a.beta, nbhd=a.nbhd)
    return mrf.SegmentParams(pairwise=pair, gvf=_gvf_params(a), prior_penalty=a.prior, scale=a.scale)


def _add_term_flags(p):
    d = mrf.PairwiseTerm()
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam)
    p.add_argument("--sigma", type=float, default=d.sigma)
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--beta", type=float, default=d.beta)
    p.add_argument("--nbhd", choices=("face", "full"), default=d.nbhd)
    p.add_argument("--scale", type=float, default=mrf.DEFAULT_SCALE)
    p.add_argument("--prior", type=_penalty, default=math.inf, help="inf, none, or a finite penalty")


def cmd_segment(a):
    image = _load(a.image, ScalarVolume)
    pre = _load(a.preseg, LabelVolume)
    prob = _load(a.prob, ScalarVolume) if a.prob else None
    labels, sol, prior = mrf.segment_detailed(image, pre, _segment_params(a), prob=prob, label=a.label)
    out = LabelVolume(labels.data * np.uint8(a.label), labels.spacing)
    write_volume(out, a.out)
    viol = gvf.edge_violations(labels.data, prior.flow) if prior is not None else 0
    print(f"energy={sol.energy / a.scale:.6f} foreground={int(labels.data.sum())} prior_violations={viol}")
    return 0


def parse_scene(path):
    """Scene config: ``object <id> key=value ...`` lines and constraint lines
    ``include k k' delta | exclude k k' delta | maxdist k k' Delta``."""
    base = Path(path).parent
    objects, constraints = [], []
    kinds = {"include": "inclusion", "exclude": "exclusion", "maxdist": "max_distance"}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = shlex.split(line)
        try:
            if tok[0] == "object":
                opts = dict(t.split("=", 1) for t in tok[2:])
                for key in ("image", "prob", "preseg"):
                    if key in opts:
                        opts[key] = str(base / opts[key])
                objects.append((int(tok[1]), opts))
            elif tok[0] in kinds and len(tok) == 4:
                constraints.append(InteractionConstraint(kinds[tok[0]], int(tok[1]), int(tok[2]), float(tok[3])))
            else:
                raise ValueError(f"unrecognized line {raw!r}")
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return objects, constraints


def cmd_segment_multi(a):
    objects_cfg, constraints = parse_scene(a.config)
    flows = {}
    flow_cache = {}
    objects = []
    spacing = None
    for obj_id, o in objects_cfg:
        image = _load(o["image"], ScalarVolume)
        spacing = spacing or image.spacing
        pre = _load(o["preseg"], LabelVolume)
        label = int(o.get("label", 1))
        if "prob" in o:
            p = _load(o["prob"], ScalarVolume).data
        else:
            p = mrf.gaussian_probability(image, pre.data == label)
        unary = mrf.log_likelihood_unary(p, float(o.get("eps", 1e-6)))
        d = mrf.PairwiseTerm()
        term = mrf.PairwiseTerm(lam=float(o.get("lambda", d.lam)), sigma=float(o.get("sigma", d.sigma)),
                                alpha=float(o.get("alpha", d.alpha)), beta=float(o.get("beta", d.beta)),
                                nbhd=o.get("nbhd", d.nbhd))
        edges = mrf.pairwise_edges(image, term)
        penalty = _penalty(o.get("prior", "inf"))
        prior = None
        if penalty is not None:
            key = (o["preseg"], label)
            if key not in flow_cache:
                flow_cache[key] = gvf.build_flow(pre, label, _gvf_params(a))[2]
            flows[obj_id] = flow_cache[key]
            prior = mrf.ShapePrior(flow_cache[key], penalty)
        objects.append(ObjectSpec(obj_id, unary, edges, prior, o.get("polarity")))
    sol = segment_joint(objects, constraints, spacing=spacing, scale=a.scale)
    write_volume(sol.labels, a.out)
    report = verify_constraints(sol.labels, constraints, flows=flows, masks=sol.masks)
    text = report.summary()
    if a.report:
        Path(a.report).write_text(text + "\n")
    print(text)
    return 0 if report.ok else 1


def cmd_metrics(a):
    va = _load(a.a, LabelVolume)
    vb = _load(a.b, LabelVolume)
    labels = [a.label] if a.label is not None else None
    rep = metrics.evaluate(va, vb, labels)
    for lab, (d, s) in rep.per_object.items():
        print(f"label={lab} dsc={d:.6f} assd_mm={s:.6f}")
    return 0


def cmd_perturb(a):
    pre = _load(a.preseg, LabelVolume)
    out = harness.perturb_labels(pre, harness.PerturbParams(a.grid, a.sigma, a.seed))
    write_volume(out, a.out)
    return 0


def cmd_sensitivity(a):
    spec = harness.C_SHAPE
    seeds = range(a.seed, a.seed + a.seeds)
    rows = harness.sensitivity_experiment(spec, a.sigmas, seeds, grid=a.grid)
    fh = open(a.out, "w", newline="") if a.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(harness.SensitivityRow.FIELDS)
        for r in rows:
            w.writerow([f"{x:.6g}" for x in r.as_tuple()])
    finally:
        if a.out:
            fh.close()
    return 0


def cmd_solve_graph(a):
    g = read_graph(a.graph)
    res = solve_s_excess(g)
    members = " ".join(str(i) for i in np.flatnonzero(res.source_set))
    print(f"H: {members}")
    print(f"gamma: {res.objective}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="gvfcut", description="GVF shape-prior graph-cut segmentation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic phantom")
    p.add_argument("--kind", choices=harness.KINDS, default="disc")
    p.add_argument("--dims", type=_ints, default=(64, 64))
    p.add_argument("--radii", type=_floats, default=(10.0,))
    p.add_argument("--gap", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--hole-rate", type=float, default=0.0)
    p.add_argument("--contrast", type=float, default=1.0)
    p.add_argument("--spacing", type=_floats, default=None)
    p.add_argument("--rotation", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="ground-truth label volume")
    p.add_argument("--image", help="observation output")
    p.add_argument("--prob", help="probability output; '{k}' expands per object")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("gvf", help="GVF field, core and discrete flow of a pre-segmentation")
    p.add_argument("--preseg", required=True)
    p.add_argument("--label", type=int, default=1)
    _add_gvf_flags(p)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_gvf)

    p = sub.add_parser("segment", help="single-object segmentation")
    p.add_argument("--image", required=True)
    p.add_argument("--prob")
    p.add_argument("--preseg", required=True)
    p.add_argument("--label", type=int, default=1)
    _add_term_flags(p)
    _add_gvf_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("segment-multi", help="joint multi-object segmentation from a scene file")
    p.add_argument("--config", required=True)
    p.add_argument("--scale", type=float, default=mrf.DEFAULT_SCALE)
    _add_gvf_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_segment_multi)

    p = sub.add_parser("metrics", help="DSC and ASSD between two label volumes")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--label", type=int)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("perturb", help="random smooth warp of a label volume")
    p.add_argument("--preseg", required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--grid", type=_ints, default=(20, 20, 20))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("sensitivity", help="pre-segmentation perturbation experiment (CSV)")
    p.add_argument("--sigmas", type=_floats, default=(0.0, 2.0, 5.0, 10.0))
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--grid", type=_ints, default=(20, 20, 20))
    p.add_argument("--out")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("solve-graph", help="solve a textual s-excess graph dump")
    p.add_argument("graph")
    p.set_defaults(func=cmd_solve_graph)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.func(a)
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"gvfcut {a.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
