"""Batch harness: ``bounded-derham run --config cfg.json --out DIR [--override key=value ...]``.

Exit codes: 0 when every check passes, 1 when a check fails (the failing
invariant is printed), 2 for configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .fields import Mollifier, Tensor
from .forms import DifferentialForm
from .group import CoinvariantCertificate, EllInftyFn, NotCertifiable, certify_trivial, check_certificate, fingerprint
from .integration import (build_phi_indicator, build_phi_smooth, check_equivariance, check_phi_independence,
                          exterior_derivative_model, integrate_phi, stokes_check)
from .models import (cell_bump_form, model_from_name, periodic_bump_form, random_strip_form,
                     random_zero_class_form)
from .poincare import primitive_box, primitive_halfbox
from .transport import StageError, build_cover, solve_primitive, surjectivity_witness

PIPELINES = ("integrate", "stokes", "primitive", "solve", "surject", "selftest")
DEFAULTS = {"model": "line", "m": 5, "N": 64, "R": 5, "pipeline": "integrate", "phi": "smooth",
            "form": {"builder": "cell_bumps", "bumps": [[[0], 1.0], [[1], -1.0]]}, "convergence": False}


class ConfigError(ValueError):
    pass


class CheckFailed(AssertionError):
    def __init__(self, invariant: str, message: str):
        super().__init__(f"{invariant}: {message}")
        self.invariant = invariant


# ---------------------------------------------------------------------------
# config


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, value = item.split("=", 1)
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-table value")
    node[parts[-1]] = _parse_value(value)


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg.update(user)
    for item in overrides:
        apply_override(cfg, item)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["pipeline"] not in PIPELINES:
        raise ConfigError(f"unknown pipeline {cfg['pipeline']!r}; choose from {', '.join(PIPELINES)}")
    try:
        model_from_name(cfg["model"], int(cfg.get("m", 5)))
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    N = cfg["N"]
    if not isinstance(N, int) or N < 16 or N & (N - 1):
        raise ConfigError(f"N must be a power of two >= 16, got {N!r}")
    R = cfg["R"]
    if not isinstance(R, int) or R < 1:
        raise ConfigError(f"R must be a positive integer, got {R!r}")
    if cfg["phi"] not in ("smooth", "indicator"):
        raise ConfigError("phi must be 'smooth' or 'indicator'")
    form = cfg.get("form") or {}
    builder = form.get("builder")
    if builder in ("random_zero_class", "random_strip") and "seed" not in form:
        raise ConfigError(f"form builder {builder!r} needs a seed")
    if builder == "cell_bumps":
        model = model_from_name(cfg["model"], int(cfg.get("m", 5)))
        for cell, _ in form.get("bumps", []):
            if not model.finite and any(abs(c) > R - 1 for c in cell):
                raise ConfigError(f"cell {cell} lies outside the window radius {R}")
    elif builder not in ("periodic_comb", "random_zero_class", "random_strip", "exact_strip", None):
        raise ConfigError(f"unknown form builder {builder!r}")


def _model(cfg):
    return model_from_name(cfg["model"], int(cfg.get("m", 5)))


def build_form(cfg: dict, N: int):
    model = _model(cfg)
    R = cfg["R"]
    spec = cfg.get("form") or {}
    b = spec.get("builder", "cell_bumps")
    if b == "cell_bumps":
        bumps = [(tuple(c), float(w)) for c, w in spec.get("bumps", [])]
        return cell_bump_form(model, N, R, bumps, spec.get("support"))
    if b == "periodic_comb":
        return periodic_bump_form(model, N, R, float(spec.get("weight", 1.0)), spec.get("support"))
    rng = np.random.default_rng(int(spec["seed"]))
    if b == "random_zero_class":
        return random_zero_class_form(model, N, R, rng, int(spec.get("n_bumps", 3)), int(spec.get("reach", 1)))
    if b in ("random_strip", "exact_strip"):
        if not model.has_boundary:
            raise ConfigError(f"form builder {b!r} needs the strip model")
        alpha = random_strip_form(model, N, R, rng, relative=bool(spec.get("relative", b == "exact_strip")))
        return exterior_derivative_model(alpha) if b == "exact_strip" else alpha
    raise ConfigError(f"unknown form builder {b!r}")


def _phi(cfg, model, N, cover=None):
    if cfg["phi"] == "indicator":
        return build_phi_indicator(model, N)
    return build_phi_smooth(cover or build_cover(model), N)


# ---------------------------------------------------------------------------
# outputs


def emit_convergence(table, path) -> None:
    """Write ``N,residual,ratio`` rows; the ratio is residual(previous N) / residual(N)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["N", "residual", "ratio"])
        prev = None
        for N, res in table:
            ratio = "" if prev is None or res == 0 else repr(prev / res)
            w.writerow([N, repr(float(res)), ratio])
            prev = res


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _fmt_g(g) -> str:
    return " ".join(str(v) for v in g)


def _require(checks: dict, name: str, ok: bool, message: str) -> None:
    checks[name] = bool(ok)
    if not ok:
        raise CheckFailed(name, message)


# ---------------------------------------------------------------------------
# pipelines


def run_integrate(cfg, out: Path, checks: dict) -> dict:
    model, N, R = _model(cfg), cfg["N"], cfg["R"]
    omega = build_form(cfg, N)
    if omega.degree != model.n:
        raise ConfigError("integrate needs a top-degree form")
    phi = _phi(cfg, model, N)
    f = integrate_phi(phi, omega, R)
    _write_rows(out / "values.csv", ["g", "value"], [(_fmt_g(g), f(g)) for g in model.elements(R)])
    other = build_phi_indicator(model, N) if cfg["phi"] == "smooth" else build_phi_smooth(build_cover(model), N)
    try:
        cert = check_phi_independence(phi, other, omega, R)
    except AssertionError as exc:
        _require(checks, "check_phi_independence", False, str(exc))
    checks["check_phi_independence"] = True
    _require(checks, "check_equivariance", check_equivariance(phi, omega, model.group.generator(0), R),
             "integration map is not equivariant")
    return {"fingerprint": fingerprint(f), "function": json.loads(f.dumps()),
            "phi_independence_certificate": json.loads(cert.dumps())}


def run_stokes(cfg, out: Path, checks: dict) -> dict:
    model, N, R = _model(cfg), cfg["N"], cfg["R"]
    if not model.has_boundary:
        raise ConfigError("stokes needs the strip model")
    omega = build_form(cfg, N)
    if omega.degree != model.n - 1:
        raise ConfigError("stokes needs an (n-1)-form (use the random_strip builder)")
    phi = _phi(cfg, model, N)
    rep = stokes_check(omega, phi, R)
    rows = [(_fmt_g(g), rep.bulk(g), rep.boundary(g)) for g in model.elements(R)]
    _write_rows(out / "values.csv", ["g", "bulk", "boundary"], rows)
    _require(checks, "stokes_fingerprint", rep.gap <= 1e-6, f"fingerprint gap {rep.gap:.3e}")
    _require(checks, "check_certificate", rep.certified, "Stokes difference certificate rejected")
    return {"bulk_fingerprint": rep.bulk_fingerprint, "boundary_fingerprint": rep.boundary_fingerprint,
            "gap": rep.gap, "certificate": json.loads(rep.certificate.dumps())}


def _box_form(n: int, N: int, halfbox: bool, seed: int):
    from .fields import Grid, ScalarField
    rng = np.random.default_rng(seed)
    grid = Grid.box(n, N)
    terms = []
    for sign in (1.0, -1.0):
        prof = []
        for a in range(n):
            lo = 0.0 if (halfbox and a == n - 1) else float(rng.uniform(0.1, 0.3))
            prof.append(Mollifier(lo, float(rng.uniform(0.6, 0.9))))
        terms.append(Tensor(tuple(prof), sign))
    vals = sum(np.broadcast_to(t(*grid.mesh()), grid.shape) for t in terms)
    return DifferentialForm.top(ScalarField(grid, np.array(vals)))


def run_primitive(cfg, out: Path, checks: dict) -> dict:
    n = int(cfg.get("n", _model(cfg).n))
    halfbox = bool(cfg.get("halfbox", False))
    seed = int((cfg.get("form") or {}).get("seed", 0))
    Ns = [cfg["N"], 2 * cfg["N"]] if cfg.get("convergence", True) else [cfg["N"]]
    table, rows, cert = [], [], None
    for N in Ns:
        omega = _box_form(n, N, halfbox, seed)
        res = (primitive_halfbox if halfbox else primitive_box)(omega)
        table.append((N, res.residual))
        rows.append((N, res.residual, res.ratio, res.kn))
        cert = res.certificate()
        _require(checks, "norm_bound", res.ratio <= res.kn, f"ratio {res.ratio} > K_n {res.kn}")
    _write_rows(out / "values.csv", ["N", "residual", "ratio", "Kn"], rows)
    emit_convergence(table, out / "convergence.csv")
    if len(table) == 2:
        r = table[0][1] / table[1][1]
        _require(checks, "residual_convergence", r >= 3.5, f"residual ratio {r:.3f} < 3.5")
    return {"certificate": cert}


def _certificate(cfg, f: EllInftyFn) -> CoinvariantCertificate:
    cert = certify_trivial(f, tol=1e-8)
    if cfg.get("corrupt_certificate"):
        grp = f.group
        bad = EllInftyFn(grp, 0.0, {grp.identity(): 1.0})
        cert = CoinvariantCertificate(cert.pairs + ((bad, grp.generator(0)),), cert.remainder)
    return cert


def run_solve(cfg, out: Path, checks: dict) -> dict:
    model, R = _model(cfg), cfg["R"]
    cover = build_cover(model)
    Ns = [cfg["N"], 2 * cfg["N"]] if cfg.get("convergence") else [cfg["N"]]
    table, reports = [], []
    for N in Ns:
        omega = build_form(cfg, N)
        if omega.degree != model.n:
            raise ConfigError("solve needs a top-degree form")
        phi = build_phi_smooth(cover, N)
        f = integrate_phi(phi, omega, R)
        try:
            cert = _certificate(cfg, f)
        except NotCertifiable as exc:
            _require(checks, "certify_trivial", False, str(exc))
        try:
            eta, rep = solve_primitive(omega, cert, phi, cover)
        except StageError as exc:
            name = "check_certificate" if "check_certificate" in str(exc) else exc.stage
            _require(checks, name, False, str(exc))
        table.append((N, rep.residual))
        reports.append(rep.to_dict())
        _require(checks, "norm_control", rep.eta_norm <= rep.bound, "eta exceeds its reported bound")
        if rep.boundary_max is not None:
            _require(checks, "relative_boundary", rep.boundary_max == 0.0, "boundary pullback not zero")
    rows = [(r["N"], r["residual"], r["relative_residual"], r["eta_norm"], r["k_total"]) for r in reports]
    _write_rows(out / "values.csv", ["N", "residual", "residual_over_h2_norm", "eta_norm", "K_total"], rows)
    emit_convergence(table, out / "convergence.csv")
    if len(table) == 2:
        r = table[0][1] / table[1][1] if table[1][1] else float("inf")
        _require(checks, "residual_convergence", r >= 3.5, f"residual ratio {r:.3f} < 3.5")
    return {"reports": reports}


def run_surject(cfg, out: Path, checks: dict) -> dict:
    model, N, R = _model(cfg), cfg["N"], cfg["R"]
    spec = cfg.get("f") or {"background": 1.0, "deviation": []}
    f = EllInftyFn(model.group, float(spec.get("background", 0.0)),
                   {tuple(k): float(v) for k, v in spec.get("deviation", [])})
    cover = build_cover(model)
    omega = surjectivity_witness(f, cover, N, R)
    phi = build_phi_smooth(cover, N)
    got = integrate_phi(phi, omega, R)
    _write_rows(out / "values.csv", ["g", "target", "recovered"],
                [(_fmt_g(g), f(g), got(g)) for g in model.elements(None if model.finite else R - 1)])
    gap = abs(fingerprint(got) - fingerprint(f))
    _require(checks, "surjectivity_fingerprint", gap <= 1e-9, f"fingerprint gap {gap:.3e}")
    d = got - f
    cert = certify_trivial(d, 1e-9)
    _require(checks, "check_certificate", check_certificate(d, cert, R), "difference certificate rejected")
    return {"fingerprint": fingerprint(got), "target_fingerprint": fingerprint(f),
            "certificate": json.loads(cert.dumps())}


def run_selftest(cfg, out: Path, checks: dict) -> dict:
    """Quick battery on one model: cover, integration, primitives, pipeline, section."""
    model, R = _model(cfg), cfg["R"]
    N = cfg["N"]
    cover = build_cover(model)
    info = {"cover": cover.check()}
    checks["cover"] = True
    phi = build_phi_smooth(cover, N)
    omega = random_zero_class_form(model, N, R, np.random.default_rng(0))
    check_phi_independence(phi, build_phi_indicator(model, N), omega, R)
    checks["check_phi_independence"] = True
    _require(checks, "check_equivariance", check_equivariance(phi, omega, model.group.generator(0), R),
             "integration map is not equivariant")
    table = []
    for M in (N, 2 * N):
        phiM = build_phi_smooth(cover, M)
        w = cell_bump_form(model, M, R, [(model.group.identity(), 1.0), (model.group.generator(0), -1.0)])
        cert = certify_trivial(integrate_phi(phiM, w, R), 1e-8)
        _, rep = solve_primitive(w, cert, phiM, cover)
        table.append((M, rep.residual))
        _require(checks, "norm_control", rep.eta_norm <= rep.bound, "eta exceeds its reported bound")
    emit_convergence(table, out / "convergence.csv")
    ratio = table[0][1] / table[1][1]
    _require(checks, "residual_convergence", ratio >= 3.5, f"solve residual ratio {ratio:.3f} < 3.5")
    f = EllInftyFn(model.group, 0.5, {model.group.identity(): 1.0})
    got = integrate_phi(phi, surjectivity_witness(f, cover, N, R), R)
    _require(checks, "surjectivity_fingerprint", abs(fingerprint(got) - fingerprint(f)) <= 1e-9,
             "section does not reproduce the class")
    _write_rows(out / "values.csv", ["check", "passed"], [(k, int(v)) for k, v in sorted(checks.items())])
    info["solve_ratio"] = ratio
    return info


RUNNERS = {"integrate": run_integrate, "stokes": run_stokes, "primitive": run_primitive, "solve": run_solve,
           "surject": run_surject, "selftest": run_selftest}


def run(cfg: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    checks: dict = {}
    failed = None
    report: dict = {}
    # empty convergence table unless the pipeline writes one
    emit_convergence([], out / "convergence.csv")
    t0 = time.perf_counter()
    try:
        report = RUNNERS[cfg["pipeline"]](cfg, out, checks)
    except CheckFailed as exc:
        failed = exc.invariant
        print(f"FAIL {exc}", file=sys.stderr)
    except (AssertionError, StageError) as exc:
        failed = getattr(exc, "stage", "assertion")
        print(f"FAIL {failed}: {exc}", file=sys.stderr)
    except ConfigError:
        raise
    except ValueError as exc:
        failed = "precondition"
        print(f"FAIL precondition: {exc}", file=sys.stderr)
    elapsed = time.perf_counter() - t0
    with open(out / "class_report.json", "w") as fh:
        json.dump({"config": cfg, "report": report}, fh, indent=2, sort_keys=True, default=float)
    with open(out / "summary.json", "w") as fh:
        json.dump({"pipeline": cfg["pipeline"], "passed": failed is None, "failed": failed,
                   "checks": checks}, fh, indent=2, sort_keys=True)
    print(f"{cfg['pipeline']}: {'PASS' if failed is None else 'FAIL'} ({elapsed:.1f} s)")
    return 0 if failed is None else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bounded-derham", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one experiment pipeline")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set a (dotted) config key; values are parsed as JSON when possible")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.override)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return run(cfg, Path(args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
