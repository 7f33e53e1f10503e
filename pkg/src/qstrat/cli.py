"""Command-line front end: ``qstrat <command> ...``.

Exit status is 0 on success, 2 when the arguments or inputs are invalid and
1 when a computation fails.  Errors are written to stderr as one JSON
object.  File outputs are deterministic and listed, with their SHA-256, in
``manifest.json`` next to them.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import aq_space, dir_min, frequency, homogeneous, minkowski, qfield, strat_engine
from .errors import QStratError

PRESETS = {"branch2": (2, 1), "branch3": (3, 1), "branch2p3": (2, 3)}


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


# ------------------------------------------------------------------ helpers

def thread_count(requested: int = None) -> int:
    env = os.environ.get("QSTRAT_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ValidationError(f"QSTRAT_THREADS must be an integer, got {env!r}")
    else:
        value = requested or 1
    if value < 1:
        raise ValidationError("thread count must be positive")
    return value


def parallel_map(fn, items, threads: int):
    """Map in a worker pool; results come back in input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ValidationError(f"cannot parse vector {text!r}")


def parse_range(text: str, geometric: bool = False) -> np.ndarray:
    """``a:b:k`` -> k values from a to b (linear, or geometric)."""
    try:
        a, b, k = text.split(":")
        a, b, k = float(a), float(b), int(k)
    except ValueError:
        raise ValidationError(f"range must look like a:b:k, got {text!r}")
    if k < 1 or a <= 0 or b <= 0:
        raise ValidationError("range needs positive endpoints and k >= 1")
    return np.geomspace(a, b, k) if geometric else np.linspace(a, b, k)


def parse_domain(text: str):
    if text is None or text == "box":
        return None
    if text.startswith("disk:"):
        vals = parse_vector(text[5:])
        if len(vals) == 1:
            return frequency.Disk((0.0, 0.0), float(vals[0]))
        return frequency.Disk(tuple(vals[:-1]), float(vals[-1]))
    raise ValidationError(f"domain must be 'box' or 'disk:[cx,cy,]R', got {text!r}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n"


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def record(paths, command: str, args: dict):
    """Add output files to the manifest in their directory."""
    by_dir = {}
    for p in paths:
        p = Path(p)
        by_dir.setdefault(p.parent, []).append(p)
    for d, files in by_dir.items():
        mpath = d / "manifest.json"
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {"outputs": {}}
        for p in files:
            manifest["outputs"][p.name] = {
                "command": command,
                "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
                "args": args,
            }
        mpath.write_text(dumps(manifest))


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def load_input_field(path) -> qfield.QField:
    if not Path(path).exists():
        raise ValidationError(f"no such field file: {path}")
    return qfield.load_field(path)


def svg_loglog(series, title: str, xlabel: str, ylabel: str) -> str:
    """Minimal SVG line chart of (x, y) series on log-log axes."""
    w, h, pad = 480, 360, 50
    xs = np.concatenate([np.log10(np.asarray(s[0], float)) for s in series])
    ys = np.concatenate([np.log10(np.asarray(s[1], float)) for s in series])
    x0, x1 = xs.min(), xs.max() if xs.max() > xs.min() else xs.min() + 1
    y0, y1 = ys.min(), ys.max() if ys.max() > ys.min() else ys.min() + 1

    def px(x, y):
        return (pad + (x - x0) / (x1 - x0) * (w - 2 * pad), h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad))

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">',
           f'<rect width="{w}" height="{h}" fill="white"/>',
           f'<text x="{w / 2}" y="20" text-anchor="middle">{title}</text>',
           f'<text x="{w / 2}" y="{h - 10}" text-anchor="middle">log10 {xlabel}</text>',
           f'<text x="14" y="{h / 2}" transform="rotate(-90 14 {h / 2})" text-anchor="middle">log10 {ylabel}</text>',
           f'<polyline fill="none" stroke="black" points="{pad},{pad} {pad},{h - pad} {w - pad},{h - pad}"/>']
    colors = ["#1f77b4", "#d62728", "#2ca02c"]
    for i, (sx, sy) in enumerate(series):
        pts = " ".join("%.2f,%.2f" % px(a, b) for a, b in zip(np.log10(sx), np.log10(sy)))
        out.append(f'<polyline fill="none" stroke="{colors[i % 3]}" stroke-width="2" points="{pts}"/>')
    out.append("</svg>\n")
    return "\n".join(out)


# ----------------------------------------------------------------- commands

def cmd_metric(args, out):
    a, b = aq_space.QPoint.parse(args.a), aq_space.QPoint.parse(args.b)
    out.write(f"{aq_space.g_distance(a, b):.7f}\n")
    return 0


def build_field(args) -> qfield.QField:
    grid = qfield.Grid.square(args.half_width, args.nodes, 2)
    if args.preset == "branch":
        coeff = complex(*parse_vector(args.coeff)[:2]) if args.coeff else 1.0
        f = qfield.make_branch_field(args.q, args.p, coeff, grid)
    elif args.preset == "linear":
        rows = [parse_vector(r) for r in args.matrix.split(";")]
        f = qfield.linear_field(np.array(rows), grid)
    elif args.preset == "constant":
        f = qfield.constant_field(aq_space.QPoint.parse(args.value), grid)
    else:
        raise ValidationError(f"unknown preset {args.preset}")
    if args.ball is not None:
        f = qfield.restrict_to_ball(f, np.zeros(2), args.ball)
    return f


def cmd_make_field(args, out):
    if args.nodes < 3:
        raise ValidationError("--nodes must be at least 3")
    f = build_field(args)
    path = qfield.save_field(f, args.out)
    record([path, Path(str(path) + ".json")], "make-field", vars_of(args))
    out.write(dumps({"field": str(path), "q": f.q, "m": f.m, "dims": list(f.dims)}))
    return 0


def cmd_minimize(args, out):
    f = load_input_field(args.boundary)
    opts = dir_min.SolveOptions(max_iters=args.max_iters, energy_tol=args.tol, seed=args.seed,
                                rematch_every=args.rematch_every, multilevel=not args.no_multilevel)
    res = dir_min.minimize(f, opts)
    path = qfield.save_field(res.field, args.out)
    log = {"energy": res.energy, "iters": res.iters,
           "history": [{"iteration": it, "energy": e} for it, e in res.history]}
    log_path = write_text(str(path) + ".log.json", dumps(log))
    record([path, Path(str(path) + ".json"), log_path], "minimize", vars_of(args))
    out.write(dumps({"field": str(path), "energy": res.energy, "iters": res.iters}))
    return 0


def cmd_frequency(args, out):
    f = load_input_field(args.field)
    x = parse_vector(args.center)
    radii = parse_range(args.radii)
    threads = thread_count(args.threads)
    rows = parallel_map(
        lambda s: (s, qfield.dirichlet_energy(f, qfield.BallSpec(x, s)),
                   qfield.boundary_h(f, qfield.BallSpec(x, s), args.samples)), radii, threads)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["radius", "D", "H", "I"])
    for s, d, h in rows:
        wr.writerow([repr(float(s)), repr(float(d)), repr(float(h)), repr(float(s * d / h)) if h > 0 else "nan"])
    if args.out:
        outs = [write_text(args.out, buf.getvalue())]
        if args.plot:
            ivals = [s * d / h for s, d, h in rows]
            outs.append(write_text(Path(args.out).with_suffix(".svg"),
                                   svg_loglog([(radii, ivals)], "frequency profile", "s", "I")))
        record(outs, "frequency", vars_of(args))
    else:
        out.write(buf.getvalue())
    return 0


def cmd_dk(args, out):
    f = load_input_field(args.field)
    x = parse_vector(args.center)
    res = homogeneous.dk_search(f, x, args.radius, args.k, homogeneous.SearchOptions(samples=args.samples))
    text = dumps({"value": res.value, "competitor": res.competitor.to_dict(), "k": args.k,
                  "center": x.tolist(), "radius": args.radius})
    if args.out:
        record([write_text(args.out, text)], "dk", vars_of(args))
    out.write(text)
    return 0


def load_calibration(path):
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"no such calibration file: {path}")
    data = json.loads(p.read_text())
    try:
        return strat_engine.Calibration(eta1=float(data["eta1"]), lambda1=float(data["lambda1"]),
                                        eta2=float(data["eta2"]), source=data.get("source", "user"))
    except KeyError as exc:
        raise ValidationError(f"calibration file lacks {exc}")


def cmd_stratify(args, out):
    f = load_input_field(args.field)
    domain = parse_domain(args.domain)
    inst = strat_engine.field_instance(f, args.r0, domain)
    calib = load_calibration(args.calib)
    params = strat_engine.derive_parameters(inst.n, args.kappa0, args.delta, args.r0, inst.lambda0,
                                            calib, args.mode, args.k, args.tau)
    r = inst.meta["r_min"]
    if args.r0 < r:
        raise ValidationError(f"--r0 {args.r0:g} is below the grid resolution r_min = {r:g}")
    cands = np.array(inst.meta["singular_points"]).reshape(-1, inst.n)
    members = strat_engine.strata_points(inst, args.k, r, args.r0, args.delta, cands)
    bad = {}
    for x in members:
        bad[",".join(f"{v:g}" for v in x)] = strat_engine.bad_scales(inst, x, params)
    A = sorted({l for v in bad.values() for l in v})
    report = strat_engine.iterative_cover(inst, members, params, A, args.k)
    bounds = [{"j": lv.j, "r": lv.radius / 5.0, "bound": lv.tubular_bound} for lv in report.levels]
    text = dumps({"params": params.to_dict(), "instance": inst.meta, "strata_points": members.tolist(),
                  "bad_scales": bad, "A": A, "cover_levels": [lv.to_dict() for lv in report.levels],
                  "audits": report.audits, "tubular_bounds": bounds, "final_bound": report.final_bound,
                  "ok": report.ok})
    record([write_text(args.out, text)], "stratify", vars_of(args))
    out.write(dumps({"report": args.out, "strata_points": len(members), "ok": report.ok}))
    return 0


def cmd_minkowski(args, out):
    p = Path(args.points)
    if not p.exists():
        raise ValidationError(f"no such points file: {args.points}")
    try:
        pts = np.loadtxt(p, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ValidationError(f"bad points file: {exc}")
    radii = parse_range(args.radii, geometric=True)
    res = args.resolution if args.resolution else float(np.min(radii)) / 8.0
    est = minkowski.minkowski_fit(pts, radii, resolution=res)
    text = dumps(est.to_dict())
    outs = [write_text(args.out, text)]
    if args.plot:
        outs.append(write_text(Path(args.out).with_suffix(".svg"),
                               svg_loglog([(est.radii, est.volumes)], "tubular volume", "r", "|T_r|")))
    record(outs, "minkowski", vars_of(args))
    out.write(text)
    return 0


def cmd_verify(args, out):
    radii = parse_range(args.radii)
    if args.instance == "broken":
        inst = strat_engine.broken_instance()
    else:
        inst = strat_engine.field_instance(load_input_field(args.field), args.r0, parse_domain(args.domain))
    centers = np.array(inst.meta.get("singular_points", [[0.0] * inst.n])).reshape(-1, inst.n)
    pairs = [(x, float(s)) for x in centers for s in radii]
    calib = load_calibration(args.calib)
    if calib is None:
        if args.instance == "broken":
            calib = strat_engine.DEFAULT_CALIBRATION
        else:
            calib = strat_engine.calibrate_empirical(inst, pairs, args.eps1, args.eps2, args.tau)
    rep = strat_engine.verify_hypotheses(inst, pairs, args.eps1, args.eps2, args.tau, calib)
    text = dumps({"instance": inst.name, "checked": rep.checked, "calibration": rep.calibration,
                  "counterexamples": rep.counterexamples, "consistent": rep.consistent})
    if args.out:
        record([write_text(args.out, text)], "verify", vars_of(args))
    out.write(text)
    return 0


def theorem_a(preset: str, kappa0: float, nodes: int = 129, minimize: bool = False,
              radii=None, seed: int = 0) -> dict:
    """Delta_Q of a preset minimizer, its tubular-volume fit and the verdict."""
    q, p = PRESETS[preset]
    grid = qfield.Grid.square(1.0, nodes, 2)
    f = qfield.make_branch_field(q, p, 1.0, grid)
    if minimize:
        bd = qfield.restrict_to_ball(f, np.zeros(2), 1.0)
        f = dir_min.minimize(bd, dir_min.SolveOptions(seed=seed)).field
    pts = minkowski.delta_q_points(f)
    pts = pts[np.linalg.norm(pts, axis=1) <= 0.5]
    radii = np.array([0.5 / 2**i for i in range(5)]) if radii is None else np.asarray(radii)
    est = minkowski.minkowski_fit(pts, radii, resolution=float(np.min(radii)) / 8.0)
    passed = est.fitted_slope >= 2.0 - kappa0
    return {"preset": preset, "kappa0": kappa0, "nodes": nodes, "minimized": minimize,
            "delta_q_points": pts.tolist(), "estimate": est.to_dict(),
            "slope_threshold": 2.0 - kappa0, "pass": bool(passed)}


def cmd_theorem_a(args, out):
    if not 0 < args.kappa0 < 1:
        raise ValidationError("--kappa0 must lie in (0, 1)")
    res = theorem_a(args.preset, args.kappa0, args.nodes, args.minimize, seed=args.seed)
    if args.out:
        d = Path(args.out)
        outs = [write_text(d / "theorem_a.json", dumps(res))]
        if args.plot:
            e = res["estimate"]
            outs.append(write_text(d / "theorem_a.svg",
                                   svg_loglog([(e["radii"], e["volumes"])], "Delta_Q tube", "r", "|T_r|")))
        record(outs, "theorem-a", vars_of(args))
    verdict = "PASS" if res["pass"] else "FAIL"
    out.write(f"{verdict} slope={res['estimate']['fitted_slope']:.4f} "
              f"dim_estimate={res['estimate']['dim_estimate']:.4f}\n")
    return 0 if res["pass"] else 1


# ------------------------------------------------------------------- parser

def vars_of(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "threads")}


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="qstrat", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=None, help="worker threads (QSTRAT_THREADS wins)")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("metric", help="G distance between two Q-points")
    s.add_argument("--a", required=True, help='atoms as "x1,y1;x2,y2"')
    s.add_argument("--b", required=True)
    s.set_defaults(func=cmd_metric)

    s = sub.add_parser("make-field", help="write a preset field")
    s.add_argument("--preset", choices=["branch", "linear", "constant"], default="branch")
    s.add_argument("--q", type=int, default=2)
    s.add_argument("--p", type=int, default=1)
    s.add_argument("--coeff", default=None, help="complex coefficient as re,im")
    s.add_argument("--matrix", default="1,0", help='rows of the linear map, "a,b;c,d"')
    s.add_argument("--value", default="0,0", help="Q-point for the constant preset")
    s.add_argument("--nodes", type=int, default=65)
    s.add_argument("--half-width", type=float, default=1.0)
    s.add_argument("--ball", type=float, default=None, help="free the nodes inside B_R(0)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_field)

    s = sub.add_parser("minimize", help="minimise the Dirichlet energy")
    s.add_argument("--boundary", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-iters", type=int, default=100_000)
    s.add_argument("--tol", type=float, default=1e-9)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rematch-every", type=int, default=5)
    s.add_argument("--no-multilevel", action="store_true")
    s.set_defaults(func=cmd_minimize)

    s = sub.add_parser("frequency", help="radial D, H, I profile as CSV")
    s.add_argument("--field", required=True)
    s.add_argument("--center", required=True)
    s.add_argument("--radii", required=True, help="a:b:k")
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--out", default=None)
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_frequency)

    s = sub.add_parser("dk", help="distance to the k-invariant competitors")
    s.add_argument("--field", required=True)
    s.add_argument("--center", required=True)
    s.add_argument("--radius", type=float, required=True)
    s.add_argument("--k", type=int, default=0)
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_dk)

    s = sub.add_parser("stratify", help="strata, good scales and the iterative cover")
    s.add_argument("--field", required=True)
    s.add_argument("--k", type=int, default=0)
    s.add_argument("--delta", type=float, required=True)
    s.add_argument("--r0", type=float, required=True)
    s.add_argument("--kappa0", type=float, required=True)
    s.add_argument("--mode", choices=["practical", "proof"], default="practical")
    s.add_argument("--tau", type=float, default=None)
    s.add_argument("--calib", default=None, help="JSON with eta1, lambda1, eta2")
    s.add_argument("--domain", default="box", help="box or disk:[cx,cy,]R")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stratify)

    s = sub.add_parser("minkowski", help="Minkowski-dimension fit of a point cloud")
    s.add_argument("--points", required=True, help="CSV, one point per line")
    s.add_argument("--radii", required=True, help="a:b:k (geometric)")
    s.add_argument("--resolution", type=float, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_minkowski)

    s = sub.add_parser("verify", help="search for counterexamples to the structural hypotheses")
    s.add_argument("--instance", choices=["field", "broken"], default="field")
    s.add_argument("--field", default=None)
    s.add_argument("--r0", type=float, default=0.25)
    s.add_argument("--radii", default="0.05:0.15:3")
    s.add_argument("--eps1", type=float, default=0.05)
    s.add_argument("--eps2", type=float, default=0.5)
    s.add_argument("--tau", type=float, default=0.1)
    s.add_argument("--calib", default=None)
    s.add_argument("--domain", default="box")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("theorem-a", help="Delta_Q tube fit for a preset minimizer")
    s.add_argument("--preset", choices=sorted(PRESETS), default="branch2")
    s.add_argument("--kappa0", type=float, default=0.5)
    s.add_argument("--nodes", type=int, default=129)
    s.add_argument("--minimize", action="store_true", help="solve from the boundary trace first")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_theorem_a)
    return ap


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}, sort_keys=True) + "\n")
    return code


def run(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        args = build_parser().parse_args(argv)
        thread_count(args.threads)
        if getattr(args, "instance", "field") == "field" and getattr(args, "func", None) is cmd_verify \
                and args.field is None:
            raise ValidationError("--field is required for the field instance")
        return args.func(args, out)
    except ValidationError as exc:
        return _fail(2, "validation", str(exc))
    except (ValueError, FileNotFoundError) as exc:
        return _fail(2, type(exc).__name__, str(exc))
    except (QStratError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail(1, type(exc).__name__, str(exc))


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
