"""Command line entry point: ``interlace <command> [options]``.

Every command prints its primary output (CSV rows or one JSON document)
on stdout and a one-line verdict per check on stderr.  The exit status
is 0 iff every requested check passed.  Replica results depend only on
``(seed, replica)``, so the output is the same for any ``--jobs``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..graph import Lattice, RegularTree, make_family
from ..harness.rng import RandomField
from ..harness.stats import TestReport, exp1_ks, mean_se, poisson_gof

COMMANDS = ("sample-fli", "sample-ri", "wusf", "capacity", "heatkernel", "match", "couple", "cascade",
            "equivariance", "unimod", "selftest")


@dataclass
class Outcome:
    rows: list
    checks: list = field(default_factory=list)
    dump: object = None


def _check(name: str, ok: bool, stat: float = 0.0, n: int = 0, **detail) -> TestReport:
    return TestReport(name, float(stat), None, int(n), bool(ok), detail=detail)


def _parse_K(family, text):
    if text is None:
        return [family.origin()]
    return [family.from_json(v) for v in json.loads(text)]


def _replicas(fn, args, reps: int, jobs: int) -> list:
    items = [(vars(args), r) for r in range(reps)]
    if jobs <= 1 or reps <= 1:
        return [fn(a, r) for a, r in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, *zip(*items)))


def _field(a: dict, r: int) -> RandomField:
    return RandomField(int(a["seed"])).replica(r)


# ----------------------------------------------------------------------
# sampling commands


def _fli_rep(a: dict, r: int):
    from ..interlacement import sample_fli
    from ..space import Window, make_space

    fam = make_family(a["graph"])
    W = Window(a["window"])
    sp = make_space(fam, W.radius)
    X = sample_fli(fam, a["v"], a["T"], W, _field(a, r), sp)
    counts = X.meta["counts"]
    row = {"replica": r, "vertices": int(counts.size), "members": len(X), "mean_count": float(counts.mean())}
    dump = X.to_json() if r == 0 and a.get("dump") else None
    return row, counts, dump


def cmd_sample_fli(args) -> Outcome:
    res = _replicas(_fli_rep, args, args.reps, args.jobs)
    rows = [x[0] for x in res]
    counts = np.concatenate([x[1] for x in res])
    checks = []
    if counts.size >= 1000:
        checks.append(poisson_gof(counts, args.v, seed=args.seed, name="start counts ~ Poisson(v)"))
    return Outcome(rows, checks, res[0][2])


def _ri_rep(a: dict, r: int):
    from ..interlacement import sample_ri_local

    fam = make_family(a["graph"])
    K = _parse_K(fam, a.get("K"))
    s = sample_ri_local(fam, a["u"], K, a["s_bwd"], a["s_fwd"], _field(a, r))
    row = {"replica": r, "started": int(s.starts.sum()), "kept": s.total_kept, "visits": int(s.visits.sum())}
    dump = s.image.to_json(fam) if r == 0 and a.get("dump") and isinstance(fam, Lattice) else None
    return row, dump


def cmd_sample_ri(args) -> Outcome:
    from ..interlacement import ri_diagnostics

    fam = make_family(args.graph)
    K = _parse_K(fam, args.K)
    res = _replicas(_ri_rep, args, args.reps, args.jobs)
    rows = [x[0] for x in res]
    checks = []
    if args.reps >= 1000:
        rate = ri_diagnostics(fam, K, args.u, args.s_bwd, args.s_fwd)["expected_kept"]
        kept = np.array([row["kept"] for row in rows])
        checks.append(poisson_gof(kept, rate, seed=args.seed, name="kept ~ Poisson(u cap)"))
    return Outcome(rows, checks, res[0][1])


def _wusf_rep(a: dict, r: int):
    from ..interlacement import wusf_from_ri
    from ..space import Window

    fam = make_family(a["graph"])
    W = Window(a["window"], a["inner"])
    f = wusf_from_ri(fam, a["u"], W, _field(a, r), a["s_bwd"], a["s_fwd"])
    deg = f.out_degrees()
    return {"replica": r, "trajectories": f.trajectories, "edges": len(f.parent), "uncovered": len(f.uncovered),
            "cycle_free": not f.has_cycle(), "out_degree_one": all(v == 1 for v in deg.values())}


def cmd_wusf(args) -> Outcome:
    rows = _replicas(_wusf_rep, args, args.reps, args.jobs)
    ok = all(r["cycle_free"] and r["out_degree_one"] for r in rows)
    return Outcome(rows, [_check("forest: no cycle, out-degree 1", ok, n=len(rows))])


def cmd_capacity(args) -> Outcome:
    from ..potential import capacity

    fam = make_family(args.graph)
    res = capacity(fam, _parse_K(fam, args.K), s=args.s, tol=args.tol)
    d = res.to_json(fam)
    row = {"K": json.dumps(d["K"]), "s": d["s"], "value": d["value"], "gap": d["gap"]}
    return Outcome([row], [_check("truncation gap below tol", res.gap < args.tol, res.gap)], d)


def cmd_heatkernel(args) -> Outcome:
    from ..walk import heat_kernel_profile

    prof = heat_kernel_profile(make_family(args.graph), args.n)
    rows = [{"n": n, "p_n": p, "rescaled": "" if q is None else q} for n, p, q in prof.rows()]
    return Outcome(rows)


# ----------------------------------------------------------------------
# matching and coupling


def _match_rep(a: dict, r: int):
    from ..softlocaltime import poisson_points, slt_match
    from ..space import Window, make_space

    fam = make_family(a["graph"])
    W = Window(a["window"], a["inner"])
    sp = make_space(fam, W.radius)
    f = _field(a, r)
    R1 = poisson_points(sp, W, a["alpha"], f, "match.r1")
    R2 = poisson_points(sp, W, a["alpha"], f, "match.r2")
    m = slt_match(fam, R1, R2, a["alpha"], a["L"], W, f, sp)
    inner = sp.window_ids(W, inner=True)
    g = m.g_at(inner)
    eta = m.eta[np.isin(m.r1, inner)]
    row = {"replica": r, "r1": int(R1.size), "r2": int(R2.size), "rounds": m.n_rounds,
           "g_mean": float(g.mean()), "g_var": float(g.var()),
           "unmatched_mean": float(m.unmatched_r2_at(inner).mean()),
           "phantom_mean": float(m.phantom_at(inner).mean()), "eta_mean": float(eta.mean()) if eta.size else 0.0}
    dump = None
    if r == 0 and a.get("dump"):
        dump = {"r1": m.r1.tolist(), "pair_y": m.pair_y.tolist(), "pair_t": m.pair_t.tolist(),
                "pair_r2": m.pair_r2.tolist(), "eta": m.eta.tolist(), "rounds": m.rounds.tolist()}
    return row, eta, dump


def cmd_match(args) -> Outcome:
    from ..walk import heat_kernel_profile

    fam = make_family(args.graph)
    res = _replicas(_match_rep, args, args.reps, args.jobs)
    rows = [x[0] for x in res]
    p2L = float(heat_kernel_profile(fam, 2 * args.L).p[2 * args.L])
    bound = 1.2 * math.sqrt(2 * args.alpha * p2L)
    un = np.mean([r["unmatched_mean"] for r in rows])
    ph = np.mean([r["phantom_mean"] for r in rows])
    checks = [_check("unmatched rate <= 1.2 sqrt(2 alpha p_2L)", un <= bound, un, len(rows), bound=bound),
              _check("phantom rate <= 1.2 sqrt(2 alpha p_2L)", ph <= bound, ph, len(rows), bound=bound)]
    if len(rows) >= 2:
        gm, gse = mean_se([r["g_mean"] for r in rows])
        checks.append(_check("mean g within 3 se of alpha", abs(gm - args.alpha) <= 3 * gse, gm, len(rows), se=gse))
    eta = np.concatenate([x[1] for x in res])
    if eta.size >= 1000:
        checks.append(exp1_ks(eta, seed=args.seed, name="eta ~ Exp(1)"))
    return Outcome(rows, checks, res[0][2])


def _couple_rep(a: dict, r: int):
    from ..coupling import coupling_error_samples, probe_centers

    fam = make_family(a["graph"])
    T = a["T"]
    v = a["v"] if a["v"] is not None else 1.0 / T
    C = probe_centers(fam.d, a["spacing"], a["K"])
    ev = coupling_error_samples(fam, T, v, _field(a, r), C)
    names = ("i", "ii", "iii", "iv", "v", "differ")
    row = {"replica": r, "probes": len(ev)}
    for n in names:
        row[n] = float(np.mean([e[n] for e in ev]))
    return row


def cmd_couple(args) -> Outcome:
    from ..coupling import bad_event_bounds

    fam = make_family(args.graph)
    if not isinstance(fam, Lattice):
        raise SystemExit("couple: probe grids need a lattice graph")
    rows = _replicas(_couple_rep, args, args.reps, args.jobs)
    v = args.v if args.v is not None else 1.0 / args.T
    b = bad_event_bounds(fam, args.T, v, 1)
    checks = [_check("event i never occurs", all(r["i"] == 0 for r in rows), n=len(rows))]
    for n in ("iii", "v"):
        m = float(np.mean([r[n] for r in rows]))
        checks.append(_check(f"event {n} below bound", m <= b[n], m, len(rows), bound=b[n]))
    return Outcome(rows, checks)


def _cascade_rep(a: dict, r: int):
    from ..coupling import cascade

    fam = make_family(a["graph"])
    rep = cascade(fam, a["nmax"], _parse_K(fam, a.get("K")), _field(a, r))
    return [dict(replica=r, **row) for row in rep.to_rows()]


def cmd_cascade(args) -> Outcome:
    res = _replicas(_cascade_rep, args, args.reps, args.jobs)
    return Outcome([row for rows in res for row in rows])


def cmd_equivariance(args) -> Outcome:
    from ..coupling import cascade, double_labeled, double_unlabeled, equivariance_check
    from ..interlacement import sample_fli
    from ..space import make_space

    fam = make_family(args.graph)
    if not isinstance(fam, Lattice):
        raise SystemExit("equivariance: translations need a lattice graph")
    from ..space import Window

    gamma = tuple(int(c) for c in args.shift.split(","))
    T = args.T
    v = args.v if args.v is not None else 1.0 / T

    def unlabeled(f, w):
        sp = make_space(fam)
        X = sample_fli(fam, v, T, w, f, sp)
        return double_unlabeled(fam, X, v, T, w, f)[0]

    def labeled(f, w):
        sp = make_space(fam)
        m = max(1, math.isqrt(math.isqrt(T)))
        Z = sample_fli(fam, 1.0 / T, T, w, f, sp, label_lane="eq.label")
        return double_labeled(fam, Z, T, m, w, f)[0]

    def casc(f, w):
        c = w.center
        return cascade(fam, args.nmax, [c], f, window=w).top

    pipes = {"unlabeled": unlabeled, "labeled": labeled, "cascade": casc}
    chosen = list(pipes) if args.pipeline == "all" else [args.pipeline]
    rows, checks = [], []
    f = RandomField(args.seed)
    for name in chosen:
        ok = equivariance_check(fam, pipes[name], gamma, f, Window(args.window, center=fam.origin()))
        rows.append({"pipeline": name, "shift": args.shift, "identical": ok})
        checks.append(_check(f"{name} translation equivariant", ok))
    return Outcome(rows, checks)


# ----------------------------------------------------------------------
# unimodularity


def cmd_unimod(args) -> Outcome:
    from .. import unimodular as um

    fam = make_family(args.graph)
    rows, checks = [], []
    check = args.check
    if check in ("mtp", "tilted"):
        for name, f in _standard_transports(fam):
            sent, rec, tilt = um.mass_transport_sums(fam, f)
            rows.append({"function": name, "sent": str(sent), "received": str(rec), "tilted_received": str(tilt)})
            if check == "mtp":
                if isinstance(fam, Lattice) or type(fam) is RegularTree:
                    checks.append(_check(f"{name}: sent = received", sent == rec))
            else:
                checks.append(_check(f"{name}: sent = tilted received", sent == tilt))
        if check == "mtp" and not (isinstance(fam, Lattice) or type(fam) is RegularTree):
            unequal = any(r["sent"] != r["received"] for r in rows)
            checks.append(_check("some transport is unbalanced", unequal))
    elif check == "drift":
        exact = um.modular_drift(fam)
        inc = um.ln_mu_increments(fam, args.steps, RandomField(args.seed))
        m, se = mean_se(inc)
        rows.append({"exact": exact, "empirical": m, "se": se, "steps": args.steps})
        checks.append(_check("empirical drift within 3 se", abs(m - exact) <= 3 * se + 1e-15, m, args.steps))
    elif check == "root":
        rs = um.sample_roots(fam, args.reps, args.horizon, args.horizon, RandomField(args.seed))
        n_res = int((~rs.unresolved).sum())
        rows.append({"samples": args.reps, "horizon": args.horizon, "unresolved_fraction": rs.unresolved_fraction,
                     "resolved": n_res, "min_argmax_ok": rs.characterization_ok})
        checks.append(_check("unresolved fraction <= 1%", rs.unresolved_fraction <= 0.01, rs.unresolved_fraction))
        checks.append(_check("roots satisfy min-argmax", rs.characterization_ok == n_res))
    elif check == "localtime":
        est = um.local_time_identity(fam, args.u, args.reps, RandomField(args.seed))
        rows.append(est.to_dict())
        checks.append(_check("estimate within 3 se of u", abs(est.z) <= 3, est.z, args.reps))
    else:
        raise SystemExit(f"unknown check {check!r}")
    return Outcome(rows, checks)


def _standard_transports(fam):
    """Five invariant transport functions per family, used by ``unimod``."""
    from fractions import Fraction

    from ..graph import Grandparent
    from ..unimodular import TransportFunction as TF

    if isinstance(fam, Lattice):
        e = [tuple(int(i == k) for i in range(fam.d)) for k in range(fam.d)]
        z = tuple([0] * fam.d)
        nb = [tuple(s * c for c in v) for v in e for s in (1, -1)]
        far = tuple([2, -1] + [0] * (fam.d - 2))
        return [("neighbour", TF.indicator(nb)),
                ("shift +e1", TF.indicator([e[0]])),
                ("weighted", TF({e[0]: Fraction(3, 7), far: 2, z: 5})),
                ("l1 sphere 2", TF.indicator([v for v in fam.ball(z, 2) if fam.distance(z, v) == 2])),
                ("skewed", TF({tuple([1, 2] + [0] * (fam.d - 2)): Fraction(1, 3), tuple([-3] + [0] * (fam.d - 1)): 1}))]
    if isinstance(fam, Grandparent):
        return [("grandparent", TF.indicator([(2, 2)])),
                ("parent", TF.indicator([(1, 1)])),
                ("grandchildren", TF.indicator([(2, -2)])),
                ("cousins", TF({(4, 0): Fraction(1, 2), (3, 1): 3})),
                ("mixed", TF({(1, -1): 2, (5, 3): Fraction(2, 9), (6, -2): 1}))]
    return [("edge", TF.indicator([1])),
            ("distance 2", TF.indicator([2])),
            ("self", TF({0: 4})),
            ("decaying", TF({k: Fraction(1, 2 ** k) for k in range(6)})),
            ("shells", TF({1: Fraction(2, 3), 3: 5}))]


# ----------------------------------------------------------------------
# selftest


def cmd_selftest(args) -> Outcome:
    from scipy import stats

    from .. import unimodular as um
    from ..potential import capacity

    rows, checks = [], []
    rng = np.random.default_rng(args.seed)
    checks.append(poisson_gof(rng.poisson(0.5, 10_000), 0.5, name="poisson_gof on Poisson(0.5) draws"))
    bad = poisson_gof(np.zeros(10_000, dtype=int), 0.5)
    checks.append(_check("poisson_gof rejects constant zeros", not bad.passed, bad.statistic))
    checks.append(exp1_ks(stats.expon.rvs(size=5000, random_state=args.seed), name="exp1_ks on Exp(1) draws"))
    gp = make_family("gp3")
    s, r, t = um.mass_transport_sums(gp, um.TransportFunction.indicator([(2, 2)]))
    checks.append(_check("grandparent transport (1, 4, 1)", (s, r, t) == (1, 4, 1)))
    checks.append(_check("drift -7/8 ln 2", abs(um.modular_drift(gp) + 7 / 8 * math.log(2)) < 1e-12))
    cap = capacity(make_family("tree3"), [make_family("tree3").origin()])
    checks.append(_check("cap({o}) on tree3 = 1/2", abs(cap.value - 0.5) < 5e-3, cap.value))
    for c in checks:
        rows.append({"check": c.name, "passed": c.passed})
    return Outcome(rows, checks)


# ----------------------------------------------------------------------
# parser and output


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--graph", default="z3", help="z3, z4, tree3, gp3, ...")
    common.add_argument("--reps", type=int, default=1)
    common.add_argument("--out", type=str.lower, choices=("csv", "json"), default="csv")
    common.add_argument("--config", help="JSON file of option values (command line wins)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for replicas")
    common.add_argument("--dump", action="store_true", help="include a JSON dump of replica 0")

    p = argparse.ArgumentParser(prog="interlace", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, parents=[common], **kw)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("sample-fli", cmd_sample_fli, help="finite-length interlacement")
    sp.add_argument("--v", type=float, default=0.5)
    sp.add_argument("--T", type=int, default=4)
    sp.add_argument("--window", type=int, default=6)

    sp = add("sample-ri", cmd_sample_ri, help="local image of a random interlacement")
    sp.add_argument("--u", type=float, default=1.0)
    sp.add_argument("--K", help="JSON list of vertices (default: the origin)")
    sp.add_argument("--s-bwd", type=int, default=80)
    sp.add_argument("--s-fwd", type=int, default=80)

    sp = add("wusf", cmd_wusf, help="interlacement Aldous-Broder forest")
    sp.add_argument("--u", type=float, default=1.0)
    sp.add_argument("--window", type=int, default=4)
    sp.add_argument("--inner", type=int, default=2)
    sp.add_argument("--s-bwd", type=int, default=200)
    sp.add_argument("--s-fwd", type=int, default=200)

    sp = add("capacity", cmd_capacity, help="truncated capacity of a finite set")
    sp.add_argument("--K")
    sp.add_argument("--s", type=int, default=64)
    sp.add_argument("--tol", type=float, default=1e-6)

    sp = add("heatkernel", cmd_heatkernel, help="return probabilities p_n(o, o)")
    sp.add_argument("--n", type=int, default=400)

    sp = add("match", cmd_match, help="soft local time matching of two Poisson clouds")
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--L", type=int, default=6)
    sp.add_argument("--window", type=int, default=20)
    sp.add_argument("--inner", type=int, default=14)

    sp = add("couple", cmd_couple, help="bad-event frequencies of one doubling step")
    sp.add_argument("--T", type=int, default=16)
    sp.add_argument("--v", type=float, default=None, help="default 1/T")
    sp.add_argument("--K", type=int, default=2, help="probe vertices per axis")
    sp.add_argument("--spacing", type=int, default=16)

    sp = add("cascade", cmd_cascade, help="labeled doubling cascade")
    sp.add_argument("--nmax", type=int, default=3)
    sp.add_argument("--K")

    sp = add("equivariance", cmd_equivariance, help="bit-exact translation test")
    sp.add_argument("--shift", default="1,0,0")
    sp.add_argument("--pipeline", choices=("unlabeled", "labeled", "cascade", "all"), default="all")
    sp.add_argument("--T", type=int, default=16)
    sp.add_argument("--v", type=float, default=None)
    sp.add_argument("--nmax", type=int, default=3)
    sp.add_argument("--window", type=int, default=22)

    sp = add("unimod", cmd_unimod, help="mass transport and modular function checks")
    sp.add_argument("--check", choices=("mtp", "tilted", "drift", "root", "localtime"), default="mtp")
    sp.add_argument("--u", type=float, default=1.0)
    sp.add_argument("--steps", type=int, default=100_000)
    sp.add_argument("--horizon", type=int, default=200)

    add("selftest", cmd_selftest, help="quick calibration of the test kit")
    return p


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config) as fh:
            conf = {k.replace("-", "_"): v for k, v in json.load(fh).items()}
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**conf)
        args = parser.parse_args(argv)
    return args


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def render(outcome: Outcome, fmt: str, command: str) -> str:
    if fmt == "json":
        doc = {"command": command, "rows": outcome.rows,
               "checks": [{"name": c.name, "passed": c.passed, "statistic": c.statistic, "p_value": c.p_value}
                          for c in outcome.checks]}
        if outcome.dump is not None:
            doc["dump"] = json.loads(outcome.dump) if isinstance(outcome.dump, str) else outcome.dump
        return json.dumps(doc, sort_keys=True) + "\n"
    buf = io.StringIO()
    if outcome.rows:
        keys = list(outcome.rows[0])
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in outcome.rows:
            w.writerow({k: _cell(r.get(k)) for k in keys})
    return buf.getvalue()


def main(argv=None) -> int:
    args = parse_args(argv)
    outcome = args.fn(args)
    sys.stdout.write(render(outcome, args.out, args.command))
    for c in outcome.checks:
        print(c.line(), file=sys.stderr)
    return 0 if all(c.passed for c in outcome.checks) else 1


if __name__ == "__main__":
    sys.exit(main())
