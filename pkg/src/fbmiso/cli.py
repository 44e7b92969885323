"""Command-line entry point.

Exit codes: 0 pass, 1 fail, 2 usage or domain error, 3 inconclusive.
Every emitted file starts with the tool version and the full config echo.
"""
import argparse
import configparser
import csv
import io
import json
import os
import sys

from . import __version__

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_INCONCLUSIVE = 0, 1, 2, 3

SCHEMA = {
    "model": {"H": float, "T": float, "d": int},
    "grid": {"n": int},
    "mc": {"M": int, "seed": int, "method": str, "batch": int},
    "mesh": {"n": int, "band_width": int, "theta_hat": float},
    "integrand": {"key": str, "param": float, "alpha": float, "c": str},
    "eps": {"list": str},
    "output": {"report": str, "csv": str},
}

DEFAULTS = {
    "model": {"H": 0.4, "T": 1.0, "d": 1},
    "grid": {"n": 4096},
    "mc": {"M": 10000, "seed": 0, "method": "CIRCULANT", "batch": 16},
    "mesh": {"n": 512, "band_width": 4},
    "integrand": {"key": "SIN"},
    "eps": {"list": ",".join(repr(2.0**-k) for k in range(5, 10))},
    "output": {"report": "isometry_report.json"},
}


class ConfigError(ValueError):
    pass


def load_config(path=None, text=None):
    """Sectioned key=value config merged over defaults; unknown keys are rejected."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        if path is not None:
            with open(path) as fh:
                cp.read_file(fh)
        elif text is not None:
            cp.read_string(text)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(str(exc)) from exc
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            try:
                cfg[sec][key] = SCHEMA[sec][key](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {raw!r}") from exc
    return cfg


def config_lines(cfg, extra=None):
    lines = [f"fbmiso {__version__}"]
    for sec in sorted(cfg):
        for key in sorted(cfg[sec]):
            lines.append(f"{sec}.{key}={cfg[sec][key]}")
    for key, val in (extra or {}).items():
        lines.append(f"{key}={val}")
    return lines


def _header(fh, lines):
    for line in lines:
        fh.write(f"# {line}\n")


def _emit(out, lines, rows, header):
    buf = io.StringIO()
    _header(buf, lines)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _params(cfg):
    from .kernel import ModelParams

    m = cfg["model"]
    return ModelParams(m["H"], m["T"], m["d"])


def _eps_list(cfg):
    try:
        return tuple(float(x) for x in cfg["eps"]["list"].split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError("eps.list must be comma-separated numbers") from exc


def _integrand(cfg, p):
    from .integrands import lookup

    spec = cfg["integrand"]
    params = {k: v for k, v in spec.items() if k != "key"}
    if "c" in params:
        params["c"] = [float(x) for x in str(params["c"]).split(",")]
    return lookup(spec["key"], p, **params)


def _fmt(x):
    return repr(float(x)) if isinstance(x, float) else x


# ---------------------------------------------------------------------------
# commands

def cmd_kernel_eval(args, cfg):
    from .kernel import ModelParams, eval_lambda_limit

    H = args.H if args.H is not None else cfg["model"]["H"]
    T = args.T if args.T is not None else cfg["model"]["T"]
    p = ModelParams(H, T, 1)
    cfg["model"].update(H=H, T=T)
    if args.lemma_suite:
        return _lemma_rows(args, cfg, [H], args.density)
    if args.s is None or args.t is None:
        raise ConfigError("kernel-eval needs --s and --t (or --lemma-suite)")
    kp = eval_lambda_limit(args.s, args.t, p).as_dict()
    _emit(args.out, config_lines(cfg, {"command": "kernel-eval"}),
          [[_fmt(v) for v in kp.values()]], list(kp))
    return EXIT_PASS


def _lemma_rows(args, cfg, Hs, density):
    from .kernel import ModelParams, run_lemma_suite

    rows, ok = [], True
    for H in Hs:
        rep = run_lemma_suite(density, ModelParams(H, cfg["model"]["T"], 1))
        ok &= rep.passed
        for r in rep.results:
            rows.append([H, r.name, r.n_points, repr(float(r.max_violation)),
                         "PASS" if r.passed else "FAIL"])
    _emit(args.out, config_lines(cfg, {"command": "lemma-suite", "density": density}),
          rows, ["H", "lemma", "n_points", "max_violation", "status"])
    return EXIT_PASS if ok else EXIT_FAIL


def cmd_lemma_suite(args, cfg):
    Hs = [float(x) for x in args.H_list.split(",")]
    return _lemma_rows(args, cfg, Hs, args.density)


def cmd_sample(args, cfg):
    from .fbm import GridSpec, dump_ensemble, export_paths_csv, sample, validate_ensemble

    p = _params(cfg)
    eps = _eps_list(cfg)
    grid = GridSpec(p.T, cfg["grid"]["n"], max(eps) if eps else 0.0)
    e = sample(cfg["mc"]["method"], grid, p, cfg["mc"]["M"], cfg["mc"]["seed"])
    if args.out:
        if args.out.endswith(".csv"):
            export_paths_csv(e, args.out, paths=range(min(e.M, args.paths)))
        else:
            dump_ensemble(e, args.out)
    probes = [(grid.dt * k, grid.dt * m) for k, m in
              ((grid.n // 4, grid.n // 2), (grid.n // 2, grid.n), (grid.n, grid.n))]
    rep = validate_ensemble(e, probes)
    rows = [[r.s, r.t, f"{r.coord[0]}-{r.coord[1]}", repr(r.estimate), repr(r.expected), repr(r.z)]
            for r in rep.probes]
    _emit(args.validation_out, config_lines(cfg, {"command": "sample", "n_steps": grid.n_steps}),
          rows, ["s", "t", "coords", "estimate", "expected", "z"])
    return EXIT_PASS if rep.passed else EXIT_FAIL


def cmd_verify_isometry(args, cfg):
    from .isometry import INCONCLUSIVE, PASS, Budget, verify_isometry

    p = _params(cfg)
    g = _integrand(cfg, p)
    mc, mesh = cfg["mc"], cfg["mesh"]
    budget = Budget(M=mc["M"], n=cfg["grid"]["n"], eps_list=_eps_list(cfg),
                    mesh_n=mesh["n"], band_width=mesh["band_width"],
                    theta_hat=mesh.get("theta_hat"), seed=mc["seed"],
                    method=mc["method"], batch=mc["batch"])
    progress = None
    if args.progress:
        progress = lambda done, total: print(f"{done}/{total} paths", file=sys.stderr)
    rep = verify_isometry(g, p, budget, progress)
    doc = rep.as_dict()
    doc["config_echo"] = config_lines(cfg, {"command": "verify-isometry"})
    path = args.out or cfg["output"]["report"]
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    if cfg["output"].get("csv"):
        new = not os.path.exists(cfg["output"]["csv"])
        with open(cfg["output"]["csv"], "a", newline="") as fh:
            if new:
                _header(fh, config_lines(cfg, {"command": "verify-isometry"}))
                csv.writer(fh, lineterminator="\n").writerow(rep.CSV_FIELDS)
            csv.writer(fh, lineterminator="\n").writerow(rep.csv_row())
    print(f"lhs={rep.lhs.value:.6g}±{rep.lhs.std_error:.2g} rhs={rep.rhs.value:.6g}±{rep.rhs.std_error:.2g} "
          f"gap={rep.gap:.3g} tol={rep.combined_tolerance:.3g} verdict={rep.verdict}")
    if rep.verdict == PASS:
        return EXIT_PASS
    return EXIT_INCONCLUSIVE if rep.verdict == INCONCLUSIVE else EXIT_FAIL


def cmd_lambda_converge(args, cfg):
    import numpy as np

    from .kernel import ModelParams
    from .projection import lambda_convergence

    ks = list(range(args.k_min, args.k_max + 1))
    if len(ks) < 2:
        raise ConfigError("need at least two k values to assess the trend")
    H = args.H if args.H is not None else cfg["model"]["H"]
    p = ModelParams(H, cfg["model"]["T"], 1)
    cfg["model"].update(H=H)
    rows = lambda_convergence(args.s, args.t, [args.bs], [args.bt], p, ks)
    errs = np.array([r[3] for r in rows])
    tail = errs[-min(4, errs.size):]
    ok = bool(np.all(np.diff(tail) < 0)) and errs[-1] <= args.rtol
    _emit(args.out, config_lines(cfg, {"command": "lambda-converge", "s": args.s, "t": args.t,
                                      "Bs": args.bs, "Bt": args.bt}),
          [[k, repr(e), repr(a), repr(b)] for k, e, a, b in rows],
          ["k", "eps", "entrywise_error", "norm_error"])
    return EXIT_PASS if ok else EXIT_FAIL


def cmd_rkhs_check(args, cfg):
    from .integrands import DEFAULT_CUTOFF, POWER, PsiFamily, make_modulus, make_power
    from .quadrature import CONVERGENT, INCONCLUSIVE, kappa_band_integrals

    p = _params(cfg)
    extra = {"command": "rkhs-check"}
    if args.kappa is not None:
        tab = kappa_band_integrals(args.kappa, p, levels=args.levels)
        rows = [[repr(h), repr(t)] for h, t in zip(tab.h, tab.totals)]
        extra.update(q=args.kappa, verdict=tab.verdict)
        _emit(args.out, config_lines(cfg, extra), rows, ["h", "total"])
        verdict, expected = tab.verdict, args.expect
    else:
        key = cfg["integrand"]["key"]
        if key in DEFAULT_CUTOFF:
            obj = make_modulus(PsiFamily(key, cfg["integrand"].get("param", 0.75)), p)
        elif key == POWER:
            obj = make_power(cfg["integrand"].get("alpha", 0.5 - p.H + 0.2), p)
        else:
            raise ConfigError(f"rkhs-check applies to modulus or power integrands, not {key}")
        v = obj.membership(p)
        extra.update(verdict=v.verdict, band_verdict=v.band_verdict, log_verdict=v.log_verdict,
                     expected=obj.expected_verdict)
        rows = [[repr(h), repr(t)] for h, t in zip(v.h, v.band_totals)]
        _emit(args.out, config_lines(cfg, extra), rows, ["h", "band_total"])
        verdict, expected = v.verdict, args.expect or obj.expected_verdict
    print(f"verdict={verdict}", file=sys.stderr)
    if verdict == INCONCLUSIVE:
        return EXIT_INCONCLUSIVE
    if expected is None:
        return EXIT_PASS
    return EXIT_PASS if verdict == expected else EXIT_FAIL


def cmd_integrands(args, cfg):
    from .integrands import catalog

    p = _params(cfg)
    rows = [[e["key"], e["kind"], json.dumps(e["params"], sort_keys=True), e["expected"],
             "" if e["cutoff"] is None else repr(e["cutoff"])] for e in catalog(p)]
    _emit(args.out, config_lines(cfg, {"command": "integrands list"}), rows,
          ["key", "kind", "params", "expected", "cutoff"])
    return EXIT_PASS


# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="fbmiso", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fbmiso {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key=value config file")
    common.add_argument("--seed", type=int, help="override mc.seed")
    common.add_argument("--threads", type=int, help="cap on BLAS/FFT worker threads")
    common.add_argument("--out", help="output file (default stdout)")
    sub = ap.add_subparsers(dest="command", required=True)

    k = sub.add_parser("kernel-eval", parents=[common], help="covariance-kernel quantities at (s, t)")
    k.add_argument("--H", type=float)
    k.add_argument("--T", type=float)
    k.add_argument("--s", type=float)
    k.add_argument("--t", type=float)
    k.add_argument("--lemma-suite", action="store_true")
    k.add_argument("--density", type=int, default=64)
    k.set_defaults(func=cmd_kernel_eval)

    s = sub.add_parser("sample", parents=[common], help="sample an fBm ensemble and validate it")
    s.add_argument("--paths", type=int, default=4, help="paths written when --out is .csv")
    s.add_argument("--validation-out", help="file for the validation table")
    s.set_defaults(func=cmd_sample)

    v = sub.add_parser("verify-isometry", parents=[common], help="compare E|I0|^2 with the isometry")
    v.add_argument("--progress", action="store_true")
    v.set_defaults(func=cmd_verify_isometry)

    lc = sub.add_parser("lambda-converge", parents=[common], help="convergence of the projection")
    lc.add_argument("--H", type=float)
    lc.add_argument("--s", type=float, default=0.5)
    lc.add_argument("--t", type=float, default=1.0)
    lc.add_argument("--bs", type=float, default=0.3)
    lc.add_argument("--bt", type=float, default=-0.7)
    lc.add_argument("--k-min", type=int, default=4)
    lc.add_argument("--k-max", type=int, default=14)
    lc.add_argument("--rtol", type=float, default=1e-3)
    lc.set_defaults(func=cmd_lambda_converge)

    ls = sub.add_parser("lemma-suite", parents=[common], help="kernel inequality sweep")
    ls.add_argument("--H-list", default="0.26,0.30,0.35,0.40,0.45,0.49")
    ls.add_argument("--density", type=int, default=64)
    ls.set_defaults(func=cmd_lemma_suite)

    r = sub.add_parser("rkhs-check", parents=[common], help="integrability verdicts")
    r.add_argument("--kappa", type=float, help="check kappa^q instead of an integrand")
    r.add_argument("--levels", type=int, default=30)
    r.add_argument("--expect", choices=["CONVERGENT", "DIVERGENT"])
    r.set_defaults(func=cmd_rkhs_check)

    i = sub.add_parser("integrands", parents=[common], help="integrand catalog")
    i.add_argument("action", choices=["list"])
    i.set_defaults(func=cmd_integrands)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PASS if exc.code == 0 else EXIT_USAGE
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    from .kernel import KernelError
    from .quadrature import BandDivergence
    from .stratonovich import HorizonTooShort

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["mc"]["seed"] = args.seed
        return args.func(args, cfg)
    except (ConfigError, KernelError, BandDivergence, HorizonTooShort) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
