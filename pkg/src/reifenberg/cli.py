"""Command-line entry point.

Exit codes: 0 pass, 1 acceptance failure, 2 usage or input error.  Errors
are written to stderr as one JSON object (and to ``error.json`` in the
output directory when one is given).
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .errors import ReifenbergError

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error({"error": "usage", "message": message}, None)
        sys.exit(EXIT_USAGE)


def _emit_error(obj, outdir):
    sys.stderr.write(json.dumps(obj) + "\n")
    if outdir:
        try:
            os.makedirs(outdir, exist_ok=True)
            with open(os.path.join(outdir, "error.json"), "w") as fh:
                json.dump(obj, fh, indent=2)
        except OSError:
            pass


def _dump(obj, path=None):
    from .flow import _jsonable

    txt = json.dumps(_jsonable(obj), indent=2, sort_keys=True)
    if path:
        with open(path, "w") as fh:
            fh.write(txt + "\n")
    print(txt)


def _load_json(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _load_set(spec, ambient_dim):
    """A cloud file (csv / ply) or a cone (catalog name or JSON)."""
    from .cone_model import load_cone
    from .metric import PointCloud

    s = str(spec)
    if s.endswith((".csv", ".ply")):
        return PointCloud.load(s)
    return load_cone(s, ambient_dim)


def _load_labels(path, M):
    """Labels from a ``stratify`` CSV (point_index,label,...) or a ground-truth CSV (label,...)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    lab = np.full(M, -1, dtype=np.int64)
    if header[0] == "point_index":
        lab[data[:, 0].astype(int)] = data[:, 1].astype(int)
    else:
        lab[:] = data[:, header.index("label")].astype(int)
    return lab


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_validate_cone(a):
    from .cone_model import check_non_flat, load_cone, validate_complex_cone

    W = load_cone(a.cone, a.ambient_dim)
    gens = [W.base.face_generators(X) for X in W.base.pieces]
    if all(len(g) == 0 for g in gens):
        val = {"ok": True, "checked_pairs": 0, "violations": []}
    else:
        val = validate_complex_cone(gens).to_json()
    nf = check_non_flat(W).to_json()
    ok = val["ok"] and nf["ok"]
    _dump({"cone": W.name, "validation": val, "non_flat": nf, "ok": ok}, a.out)
    return EXIT_PASS if ok else EXIT_FAIL


def cmd_distance(a):
    from .metric import d_xr_terms

    A = _load_set(a.A, a.ambient_dim)
    B = _load_set(a.B, a.ambient_dim)
    c = np.array([float(v) for v in a.center.split(",")])
    t1, t2 = d_xr_terms(A, B, (c, a.radius))
    _dump({"d_xr": max(t1, t2), "A_to_B": t1, "B_to_A": t2, "center": c, "radius": a.radius}, a.out)
    return EXIT_PASS


def cmd_stratify(a):
    from .metric import PointCloud
    from .strata import dyadic_ladder, shuffled, stratify, validate_structure

    cfg = _load_json(a.config)
    E = PointCloud.load(a.cloud)
    os.makedirs(a.out, exist_ok=True)
    if a.labels:
        from .strata import StratumLabels

        lab = _load_labels(a.labels, len(E))
        n = int(cfg.get("n", lab.max()))
        scales = cfg.get("scales") or dyadic_ladder(cfg.get("r_max", 0.08), cfg.get("rungs", 3))
        labels = StratumLabels(lab, np.zeros(len(E), np.int64), np.zeros((len(E), n + 1, len(scales))),
                               lab >= 0, scales, {int(k): v for k, v in (cfg.get("thresholds") or {}).items()},
                               3, n, {})
    else:
        scales = cfg.get("scales") or dyadic_ladder(cfg.get("r_max", 0.08), cfg.get("rungs", 3))
        th = cfg.get("thresholds")
        th = None if th is None else {int(k): float(v) for k, v in th.items()}
        idx = None
        if cfg.get("subsample"):
            rng = np.random.default_rng(cfg.get("seed", 0))
            idx = np.sort(rng.choice(len(E), min(len(E), int(cfg["subsample"])), replace=False))
        window = None
        if cfg.get("window"):
            window = (np.asarray(cfg["window"]["center"], float), float(cfg["window"]["radius"]))
        labels = stratify(E, scales, th, budget=cfg.get("budget", 8), seed=cfg.get("seed", 0),
                          delta0=cfg.get("delta0"), indices=idx, window=window)
    if a.shuffle is not None:
        labels = shuffled(labels, a.shuffle)
    labels.save_csv(os.path.join(a.out, "labels.csv"))
    rep = validate_structure(labels, E)
    out = {"counts": labels.counts(), "structure": rep.to_json(), "shuffled": a.shuffle is not None}
    _dump(out, os.path.join(a.out, "stratify_report.json"))
    return EXIT_PASS if rep.ok else EXIT_FAIL


def cmd_parameterize(a):
    from .cone_model import load_cone
    from .flow import FlowConfig, export_obj, run_flow
    from .metric import PointCloud, register_cone

    cfg = _load_json(a.config)
    E = PointCloud.load(a.cloud)
    c = np.asarray(cfg.get("center", E.points.mean(0)), float)
    R = float(cfg.get("radius", np.linalg.norm(E.points - c, axis=1).max()))
    E.region = (c, R)
    Z = load_cone(a.cone, E.N)
    if a.register:
        Z = register_cone(Z, E, (c, R), constrain_spine_through_center=False, budget=cfg.get("budget", 16),
                          seed=cfg.get("seed", 0)).cone
    lab = _load_labels(a.labels, len(E))
    fc = FlowConfig.from_json(cfg.get("flow", {}))
    stack, mon = run_flow(Z, E, lab, config=fc)
    os.makedirs(a.out, exist_ok=True)
    stack.save(os.path.join(a.out, "stack.pkl"))
    E.save(os.path.join(a.out, "cloud.csv"))
    mon.to_jsonl(os.path.join(a.out, "monitors.jsonl"))
    export_obj(stack, os.path.join(a.out, "spines.obj"))
    man = stack.manifest()
    man.update({"cloud": os.path.abspath(a.cloud), "labels": os.path.abspath(a.labels), "run_config": cfg})
    with open(os.path.join(a.out, "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=2)
    _dump({"summary": mon.summary, "violations": len(mon.violations)})
    return EXIT_PASS


def cmd_verify(a):
    from .flow import MapStack, verify_theorem
    from .metric import PointCloud

    stack = MapStack.load(os.path.join(a.run_dir, "stack.pkl"))
    E = PointCloud.load(os.path.join(a.run_dir, "cloud.csv"))
    man = _load_json(os.path.join(a.run_dir, "manifest.json"))
    tol = dict((man.get("run_config") or {}).get("tolerances") or {})
    eps = float(a.eps if a.eps is not None else tol.get("eps", 0.0))
    C = float(a.C if a.C is not None else tol.get("C", 1.0))
    h = E.h
    tol.setdefault("tol_disp", C * eps + (1e-6 + 3 * h if eps == 0 else 0.0))
    tol.setdefault("tol_cov", C * eps + 3 * h)
    if a.truncate is not None:
        stack = stack.truncated(a.truncate)
    rep = verify_theorem(stack, stack.Z, E, tol)
    out = rep.to_json()
    out.update({"C": C, "eps": eps, "h": h, "truncated_at": a.truncate})
    _dump(out, os.path.join(a.run_dir, "verify_report.json" if a.truncate is None else
                            f"verify_report_truncated_{a.truncate}.json"))
    return EXIT_PASS if rep.ok else EXIT_FAIL


def cmd_generate(a):
    from .harness import RunConfig, generate

    cfg = RunConfig.load(a.spec)
    E, W = generate(cfg)
    os.makedirs(a.out, exist_ok=True)
    E.save(os.path.join(a.out, "cloud." + a.format))
    E.truth.save(os.path.join(a.out, "truth.csv"))
    with open(os.path.join(a.out, "cone.json"), "w") as fh:
        json.dump(W.to_json(), fh, indent=2)
    with open(os.path.join(a.out, "run_config.json"), "w") as fh:
        json.dump(cfg.to_json(), fh, indent=2)
    _dump({"points": len(E), "h": E.h, "cone": W.name, "out": a.out})
    return EXIT_PASS


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="reifenberg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("validate-cone", help="complex-cone and non-flat checks")
    s.add_argument("cone", help="catalog name or cone JSON")
    s.add_argument("--ambient-dim", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_validate_cone)

    s = sub.add_parser("distance", help="normalized local Hausdorff distance")
    s.add_argument("A")
    s.add_argument("B")
    s.add_argument("--center", required=True, help="comma-separated coordinates")
    s.add_argument("--radius", type=float, required=True)
    s.add_argument("--ambient-dim", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_distance)

    s = sub.add_parser("stratify", help="stratum labels and structural validation")
    s.add_argument("cloud")
    s.add_argument("--config")
    s.add_argument("--labels", help="validate existing labels instead of classifying")
    s.add_argument("--shuffle", type=int, help="permute the labels with this seed (negative control)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stratify)

    s = sub.add_parser("parameterize", help="build the map stack")
    s.add_argument("cone")
    s.add_argument("cloud")
    s.add_argument("--labels", required=True)
    s.add_argument("--config")
    s.add_argument("--register", action="store_true", help="register the cone to the cloud first")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_parameterize)

    s = sub.add_parser("verify", help="check the theorem conclusions on a run directory")
    s.add_argument("run_dir")
    s.add_argument("--truncate", type=int, help="keep only the first K steps (negative control)")
    s.add_argument("--eps", type=float)
    s.add_argument("--C", type=float)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("generate", help="sample (and perturb) a catalog cone")
    s.add_argument("spec", help="RunConfig JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=["csv", "ply"], default="csv")
    s.set_defaults(func=cmd_generate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    outdir = getattr(args, "out", None) or getattr(args, "run_dir", None)
    try:
        return args.func(args)
    except ReifenbergError as exc:
        _emit_error(exc.to_json(), outdir)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        _emit_error({"error": type(exc).__name__, "message": str(exc)}, outdir)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
