"""Command line front end.

    assocmodel fit          --data strata.csv [--config run.toml] --out DIR
    assocmodel fit-reverse  --data table.csv  [--config run.toml] --out DIR
    assocmodel construct    --config run.toml --out DIR
    assocmodel simulate     [--config run.toml] [--data joint.csv] --out DIR
    assocmodel verify       [--out DIR]

Exit codes: 0 success, 1 a verify check failed, 2 configuration error,
3 data error, 4 convergence error, 5 identifiability error.  Errors are
reported on stderr as one JSON object with ``category`` and ``message``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .distfactory import (FiniteJoint, ipf_fit, odds_ratio_matrix, read_table_csv,
                          write_table_csv)
from .estimator import FitOptions, fit, fit_reverse
from .exceptions import (ConfigError, ConvergenceError, DataFormatError,
                         IdentifiabilityError)
from .inference import conf_intervals, wald_cov, wald_test
from .likelihood import ConditionalDataset
from .model import make_log_bilinear, model_from_config

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE, EXIT_IDENT = 0, 1, 2, 3, 4, 5
COMMANDS = ("fit", "fit-reverse", "construct", "simulate", "verify")


def ingest_conditional_csv(path):
    """Read stratified observations.

    The header must contain ``stratum``, one or more ``v*`` columns (outcome
    features, constant within a stratum), one or more ``z*`` columns
    (covariate features) and optionally ``weight``.  Stratum 0 is the
    reference and must have all-zero ``v``.  Identical rows are collapsed.
    """
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc.strerror}") from None
    if not rows:
        raise DataFormatError(f"{path}: file is empty")
    header = [h.strip() for h in rows[0]]
    if "stratum" not in header:
        raise DataFormatError(f"{path}: header lacks a 'stratum' column")
    v_cols = [i for i, h in enumerate(header) if h.startswith("v")]
    z_cols = [i for i, h in enumerate(header) if h.startswith("z")]
    w_col = header.index("weight") if "weight" in header else None
    if not v_cols or not z_cols:
        raise DataFormatError(f"{path}: need at least one v column and one z column")
    if len(rows) < 2:
        raise DataFormatError(f"{path}: no observations")
    s_col = header.index("stratum")

    ks, V, Z, W = [], [], [], []
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise DataFormatError(f"{path} row {lineno}: expected {len(header)} cells, got {len(r)}")
        try:
            k = float(r[s_col])
            vals = [float(c) for c in r]
        except ValueError:
            raise DataFormatError(f"{path} row {lineno}: non-numeric cell") from None
        if k != int(k) or k < 0:
            raise DataFormatError(f"{path} row {lineno}: stratum must be a nonnegative integer")
        ks.append(int(k))
        V.append([vals[i] for i in v_cols])
        Z.append([vals[i] for i in z_cols])
        W.append(vals[w_col] if w_col is not None else 1.0)

    ks, V = np.array(ks), np.array(V)
    K = ks.max()
    levels = np.zeros((K + 1, V.shape[1]))
    for k in range(K + 1):
        idx = np.nonzero(ks == k)[0]
        if idx.size == 0:
            raise DataFormatError(f"{path}: stratum {k} has no rows")
        bad = idx[np.any(V[idx] != V[idx[0]], axis=1)]
        if bad.size:
            raise DataFormatError(
                f"{path} row {bad[0] + 2}: v differs from the first row of stratum {k}")
        levels[k] = V[idx[0]]
    if np.any(levels[0] != 0):
        raise DataFormatError(f"{path} row {np.nonzero(ks == 0)[0][0] + 2}: "
                              "reference stratum 0 must have all-zero v")
    try:
        return ConditionalDataset(levels, np.array(Z), ks, np.array(W)).collapsed()
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _model(cfg, dim_x, dim_y):
    spec = cfg.get("model")
    if spec is None:
        return make_log_bilinear(dim_x, dim_y)
    try:
        model = model_from_config(spec)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"model: {exc}") from None
    if (model.dim_x, model.dim_y) != (dim_x, dim_y):
        raise ConfigError(
            f"model expects features of widths ({model.dim_x}, {model.dim_y}), "
            f"data has ({dim_x}, {dim_y})")
    return model


def _solver(cfg, args):
    s = dict(cfg.get("solver", {}))
    known = {"tol", "max_iter", "max_step_halvings"}
    if set(s) - known:
        raise ConfigError(f"unknown solver options: {sorted(set(s) - known)}")
    tol = args.tol if args.tol is not None else s.get("tol", 1e-8)
    max_iter = args.max_iter if args.max_iter is not None else s.get("max_iter", 100)
    return FitOptions(grad_tol=float(tol), max_iter=int(max_iter),
                      max_step_halvings=int(s.get("max_step_halvings", 30)))


def _level(cfg, args):
    level = args.level if args.level is not None else cfg.get("fit", {}).get("level", 0.95)
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    return float(level)


def _fit_payload(report, model, level, cfg):
    cov = wald_cov(report)
    ci = conf_intervals(report, level)
    payload = {
        "command": "fit-reverse" if report.conditioning == "x" else "fit",
        "model_kind": model.kind,
        "theta_layout": {"order": "row-major", "shape": list(model.theta_shape),
                         "names": model.param_names()},
        **report.to_dict(),
        "se": np.sqrt(np.diag(cov)).tolist(),
        "cov_theta": cov.tolist(),
        "level": level,
        "conf_int": ci.tolist(),
        "wald_tests": [],
    }
    tests = cfg.get("fit", {}).get("tests", [{"name": "theta = 0", "C": np.eye(cov.shape[0]).tolist()}])
    for t in tests:
        try:
            res = wald_test(report, t["C"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"wald test {t.get('name', '?')}: {exc}") from None
        payload["wald_tests"].append({"name": t.get("name", ""), "statistic": res.statistic,
                                      "df": res.df, "pvalue": res.pvalue})
    return payload


def _fit_summary(payload):
    lines = [f"{payload['command']}: converged={payload['converged']} "
             f"iterations={payload['iterations']} loglik={payload['loglik']:.6f}",
             f"{'parameter':<16}{'estimate':>14}{'se':>12}{'ci_low':>12}{'ci_high':>12}"]
    for name, est, se, (lo, hi) in zip(payload["theta_layout"]["names"], payload["theta_hat"],
                                       payload["se"], payload["conf_int"]):
        lines.append(f"{name:<16}{est:>14.6f}{se:>12.6f}{lo:>12.6f}{hi:>12.6f}")
    for t in payload["wald_tests"]:
        lines.append(f"Wald {t['name']}: {t['statistic']:.6f} on {t['df']} df, p = {t['pvalue']:.4g}")
    lines.extend(payload["diagnostics"])
    return "\n".join(lines) + "\n"


def _require_data(args):
    if args.data is None:
        raise ConfigError(f"{args.command} requires --data")
    if not os.path.exists(args.data):
        raise ConfigError(f"data file {args.data} does not exist")
    return args.data


def cmd_fit(args, cfg):
    data = ingest_conditional_csv(_require_data(args))
    model = _model(cfg, data.z.shape[1], data.v_levels.shape[1])
    opts, level = _solver(cfg, args), _level(cfg, args)
    report = fit(model, data, opts)
    payload = _fit_payload(report, model, level, cfg)
    return {"report.json": _json(payload), "summary.txt": _fit_summary(payload)}


def cmd_fit_reverse(args, cfg):
    counts, Z, V = read_table_csv(_require_data(args))
    model = _model(cfg, Z.shape[1], V.shape[1])
    opts, level = _solver(cfg, args), _level(cfg, args)
    report = fit_reverse(model, counts, Z, V, opts)
    payload = _fit_payload(report, model, level, cfg)
    return {"report.json": _json(payload), "summary.txt": _fit_summary(payload)}


def _joint_from_spec(spec, args):
    try:
        pi_x, pi_y = spec["pi_x"], spec["pi_y"]
    except KeyError as exc:
        raise ConfigError(f"construct: missing {exc}") from None
    Z = np.asarray(spec["z_support"], float) if "z_support" in spec else None
    V = np.asarray(spec["v_support"], float) if "v_support" in spec else None
    if "psi" in spec:
        psi = np.asarray(spec["psi"], float)
    elif "theta" in spec and Z is not None and V is not None:
        try:
            model = model_from_config(spec.get("model", {"kind": "log_bilinear",
                                                         "k_x": Z.shape[1], "k_y": V.shape[1]}))
            psi = model.derivative_tables(Z, V, spec["theta"], order=0)[0][1:, 1:]
        except ValueError as exc:
            raise ConfigError(f"construct: {exc}") from None
    else:
        raise ConfigError("construct needs psi, or theta with z_support and v_support")
    tol = args.tol if args.tol is not None else spec.get("tol", 1e-12)
    max_iter = args.max_iter if args.max_iter is not None else spec.get("max_iter", 10000)
    try:
        return ipf_fit(pi_x, pi_y, psi, tol=tol, max_iter=max_iter, z_support=Z, v_support=V)
    except ConvergenceError:
        raise
    except ValueError as exc:
        raise ConfigError(f"construct: {exc}") from None


def cmd_construct(args, cfg):
    if "construct" not in cfg:
        raise ConfigError("construct requires a [construct] section in --config")
    joint = _joint_from_spec(cfg["construct"], args)
    out = {"joint.csv": lambda p: write_table_csv(p, joint.probs, joint.z_support, joint.v_support)}
    out["odds_ratios.csv"] = lambda p: write_table_csv(
        p, odds_ratio_matrix(joint), joint.z_support[1:], joint.v_support[1:])
    return out


def _load_joint(path):
    probs, Z, V = read_table_csv(path)
    try:
        return FiniteJoint(probs / probs.sum(), Z, V)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from None


def cmd_simulate(args, cfg):
    from .simulate import McConfig, benchmark_joint, mc_consistency, mc_coverage, mc_invariance

    sim = dict(cfg.get("simulate", {}))
    if args.data is not None:
        joint = _load_joint(_require_data(args))
    elif "construct" in cfg:
        joint = _joint_from_spec(cfg["construct"], args)
    else:
        joint = benchmark_joint()
    model = _model(cfg, joint.z_support.shape[1], joint.v_support.shape[1])
    kind = sim.get("kind", "coverage")
    seed = args.seed if args.seed is not None else sim.get("seed", 0)
    reps = args.replicates if args.replicates is not None else sim.get("replicates", 1000)
    level = args.level if args.level is not None else sim.get("level", 0.95)
    try:
        mc = McConfig(joint=joint, model=model, replicates=int(reps), seed=int(seed),
                      scheme=sim.get("scheme", "cond_on_y"), n=int(sim.get("n", 2000)),
                      fractions=sim.get("fractions"), level=float(level),
                      max_excluded_frac=float(sim.get("max_excluded_frac", 0.01)),
                      n_jobs=int(sim.get("n_jobs", 1)))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"simulate: {exc}") from None

    if kind == "consistency":
        rows = mc_consistency(mc, sim.get("n_grid", [500, 2000]))
        summary = {"kind": kind, "seed": mc.seed, "rows": rows}
        table = [{k: v for k, v in r.items() if k != "mean_theta"} for r in rows]
    elif kind == "coverage":
        summary = {"kind": kind, "seed": mc.seed, **mc_coverage(mc)}
        table = [{"n": summary["n"], "component": s, "coverage": c, "mean_width": w}
                 for s, (c, w) in enumerate(zip(summary["coverage"], summary["mean_width"]))]
    elif kind == "invariance":
        res = mc_invariance(joint, mc.n, mc.seed, mc.replicates, model=model)
        table = res.pop("rows")
        summary = {"kind": kind, "seed": mc.seed, **res}
    else:
        raise ConfigError(f"unknown simulate kind {kind!r}")
    return {"mc.csv": lambda p: _write_rows(p, table), "summary.json": _json(summary)}


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def run_verify(seed=0):
    """Desk-scale invariant checks on builtin fixtures; returns ``[(name, ok, detail)]``."""
    from .distfactory import saturated_supports
    from .inference import exact_moments, expected_score, w_identity_residual, true_lambda, w_matrix
    from .likelihood import Lambda, observed_info, score
    from .simulate import invariance_discrepancy

    rng = np.random.default_rng(seed)
    checks = []
    one = np.array([[0.0], [1.0]])
    m11 = make_log_bilinear(1, 1)

    rep = fit(m11, ConditionalDataset.from_table([[10, 20], [30, 40]], one, one))
    var = wald_cov(rep)[0, 0]
    ok = (abs(rep.theta_hat[0] - math.log(2 / 3)) <= 1e-8 and abs(var - 0.2083333333) <= 1e-6
          and abs(rep.gamma_hat[0] - math.log(2)) <= 1e-8)
    checks.append(("closed-form 2x2 fixture", ok,
                   f"theta={rep.theta_hat[0]:.10f} var={var:.8f} gamma={rep.gamma_hat[0]:.10f}"))

    worst = max(invariance_discrepancy(m11, [[10, 20], [30, 40]], one, one))
    for _ in range(10):
        Z, V = saturated_supports(3, 3)
        counts = rng.integers(5, 60, size=(3, 3))
        worst = max(worst, *invariance_discrepancy(make_log_bilinear(2, 2), counts, Z, V))
    checks.append(("sampling-scheme invariance", worst <= 1e-6, f"max discrepancy {worst:.2e}"))

    res_max = score_max = 0.0
    for _ in range(10):
        J, K = rng.integers(2, 7), rng.integers(2, 5)
        Z, V = saturated_supports(J, K)
        joint = ipf_fit(rng.dirichlet(np.ones(J) * 2), rng.dirichlet(np.ones(K) * 2),
                        rng.normal(size=(J - 1, K - 1)), z_support=Z, v_support=V)
        model = make_log_bilinear(J - 1, K - 1)
        n_vec = rng.integers(20, 500, size=K)
        lam, _ = true_lambda(model, joint, n_vec)
        I, Sigma = exact_moments(model, lam, joint, n_vec)
        res_max = max(res_max, w_identity_residual(I, Sigma, w_matrix(n_vec)))
        score_max = max(score_max, np.max(np.abs(expected_score(model, lam, joint, n_vec))))
    checks.append(("information identity I - Sigma = I W I", res_max <= 1e-8, f"max residual {res_max:.2e}"))
    checks.append(("mean-zero expected score", score_max <= 1e-12, f"max {score_max:.2e}"))

    margin_err = or_err = 0.0
    for _ in range(5):
        J, K = rng.integers(2, 21, size=2)
        psi = rng.normal(size=(J - 1, K - 1))
        px, py = rng.dirichlet(np.ones(J) * 2), rng.dirichlet(np.ones(K) * 2)
        joint = ipf_fit(px, py, psi)
        margin_err = max(margin_err, np.max(np.abs(joint.row_marginal - px)),
                         np.max(np.abs(joint.col_marginal - py)))
        or_err = max(or_err, np.max(np.abs(odds_ratio_matrix(joint) - psi)))
    checks.append(("IPF margins", margin_err <= 1e-12, f"max error {margin_err:.2e}"))
    checks.append(("IPF odds-ratio round trip", or_err <= 1e-8, f"max error {or_err:.2e}"))

    model = make_log_bilinear(2, 1)
    data = ConditionalDataset.from_strata([[0.0], [1.0]], [rng.normal(size=(15, 2)),
                                                            rng.normal(size=(12, 2))])
    x = rng.normal(size=3) * 0.5
    h = 1e-6
    g_fd = np.array([(_ll(model, x + h * e, data) - _ll(model, x - h * e, data)) / (2 * h)
                     for e in np.eye(3)])
    g = score(model, Lambda.from_vector(x, 2), data)
    H_fd = np.array([(score(model, Lambda.from_vector(x + h * e, 2), data)
                      - score(model, Lambda.from_vector(x - h * e, 2), data)) / (2 * h)
                     for e in np.eye(3)])
    J = observed_info(model, Lambda.from_vector(x, 2), data)
    err = max(np.max(np.abs(g - g_fd)) / np.max(np.abs(g)), np.max(np.abs(J + H_fd)) / np.max(np.abs(J)))
    checks.append(("score/information vs finite differences", err <= 1e-5, f"max rel {err:.2e}"))
    return checks


def _ll(model, x, data):
    from .likelihood import Lambda, loglik

    return loglik(model, Lambda.from_vector(x, model.param_dim), data)


def cmd_verify(args, cfg):
    seed = args.seed if args.seed is not None else 0
    checks = run_verify(seed)
    lines = [f"{'PASS' if ok else 'FAIL'} {name}: {detail}" for name, ok, detail in checks]
    payload = {"checks": [{"name": n, "passed": bool(ok), "detail": d} for n, ok, d in checks],
               "all_passed": all(ok for _, ok, _ in checks)}
    return {"verify.json": _json(payload), "verify.txt": "\n".join(lines) + "\n"}


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


HANDLERS = {"fit": cmd_fit, "fit-reverse": cmd_fit_reverse, "construct": cmd_construct,
            "simulate": cmd_simulate, "verify": cmd_verify}


def build_parser():
    p = argparse.ArgumentParser(prog="assocmodel", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--data", help="input CSV")
    p.add_argument("--out", help="output directory (created if missing)")
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int, dest="max_iter")
    p.add_argument("--level", type=float)
    p.add_argument("--replicates", type=int)
    p.add_argument("--timestamp", action="store_true",
                   help="add a run timestamp to JSON reports")
    return p


def _emit(outputs, out_dir, stamp):
    if out_dir is None:
        for name, content in outputs.items():
            if isinstance(content, str) and name.endswith(".txt"):
                sys.stdout.write(content)
        return
    os.makedirs(out_dir, exist_ok=True)
    for name, content in outputs.items():
        path = os.path.join(out_dir, name)
        if callable(content):
            content(path)
            continue
        if stamp and name.endswith(".json"):
            content = _json({**json.loads(content), "timestamp": time.time()})
        with open(path, "w") as fh:
            fh.write(content)


@dataclass(frozen=True)
class RunConfig:
    """One command invocation: the parsed TOML document plus flag overrides."""

    command: str
    config: dict = field(default_factory=dict)
    data: Optional[str] = None
    out: Optional[str] = None
    seed: Optional[int] = None
    tol: Optional[float] = None
    max_iter: Optional[int] = None
    level: Optional[float] = None
    replicates: Optional[int] = None
    timestamp: bool = False

    @classmethod
    def from_args(cls, args):
        cfg = load_config(args.config)
        return cls(command=args.command, config=cfg, data=args.data, out=args.out,
                   seed=args.seed, tol=args.tol, max_iter=args.max_iter, level=args.level,
                   replicates=args.replicates, timestamp=args.timestamp)


def run(config):
    """Execute ``config``; returns the exit status.  Files are written only on success."""
    if config.command not in HANDLERS:
        return _fail("config", ConfigError(f"unknown command {config.command!r}"), EXIT_CONFIG)
    try:
        outputs = HANDLERS[config.command](config, config.config)
        _emit(outputs, config.out, config.timestamp)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except DataFormatError as exc:
        return _fail("data", exc, EXIT_DATA)
    except ConvergenceError as exc:
        return _fail("convergence", exc, EXIT_CONVERGENCE)
    except IdentifiabilityError as exc:
        return _fail("identifiability", exc, EXIT_IDENT)
    except ValueError as exc:
        return _fail("data", exc, EXIT_DATA)
    if config.command == "verify":
        sys.stdout.write(outputs["verify.txt"] if config.out is not None else "")
        return EXIT_OK if json.loads(outputs["verify.json"])["all_passed"] else EXIT_CHECK
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        config = RunConfig.from_args(args)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    return run(config)


def _fail(category, exc, code):
    sys.stderr.write(json.dumps({"category": category, "message": str(exc)}) + "\n")
    return code


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
