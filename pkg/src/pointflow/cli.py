"""Batch front end: `pointflow run config.json [--out DIR] [--seed N] [--verbose]`.

Reads a JSON experiment configuration, runs one of the solve / optimize /
check / study modes, and writes deterministic artifacts: CSV tables (fixed
columns, 17 significant digits), a JSON manifest echoing the configuration
with its content hash, and optional legacy-ASCII VTK / npz fields.

Exit codes: 0 success, 2 invalid configuration (message names the field),
3 solver or check failure.
"""

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import adjoint as adjoint_mod
from . import fem
from . import geometry
from . import optimizer as opt
from . import state as state_mod
from . import weights as wt
from .errors import DomainGeometryError, SingularSystemError, StateNotConvergedError

log = logging.getLogger("pointflow")

MODES = ("solve", "optimize", "gradient-check", "hessian-check", "ssc", "regularity-study")

DEFAULT_TOLERANCES = {
    "newton_tol": 1e-10,
    "opt_tol": 1e-8,
    "max_iters": 2000,
    "fd_step": 1e-4,
    "hessian_fd_step": 1e-3,
    "gradient_tol": 1e-4,
    "hessian_tol": 1e-3,
    "tau": 1e-6,
    "tol_active": 1e-8,
}


class ConfigError(Exception):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


def _require(cond, field, message):
    if not cond:
        raise ConfigError(field, message)


def _get(dct, field, key, default=None, required=False):
    if key not in dct:
        if required:
            raise ConfigError(f"{field}.{key}", "required field is missing")
        return default
    return dct[key]


class ExperimentConfig:
    """Validated experiment configuration (see README for the schema)."""

    def __init__(self, raw):
        _require(isinstance(raw, dict), "config", "top level must be a JSON object")
        self.raw = raw
        self.mode = _get(raw, "config", "mode", required=True)
        _require(self.mode in MODES, "mode", f"must be one of {', '.join(MODES)}")

        dom = _get(raw, "config", "domain", required=True)
        self.n = _get(dom, "domain", "n", required=True)
        _require(isinstance(self.n, int) and self.n >= 2, "domain.n", "must be an integer >= 2")
        self.grading_levels = _get(dom, "domain", "grading_levels", 2)
        _require(
            isinstance(self.grading_levels, int) and self.grading_levels >= 0,
            "domain.grading_levels",
            "must be an integer >= 0",
        )
        self.grading_ratio = float(_get(dom, "domain", "grading_ratio", 0.5))
        _require(
            0.0 < self.grading_ratio < 1.0, "domain.grading_ratio", "must lie in (0,1)"
        )

        phys = _get(raw, "config", "physics", required=True)
        self.nu = float(_get(phys, "physics", "nu", required=True))
        _require(self.nu > 0.0, "physics.nu", "nu must be positive")
        self.eta = float(_get(phys, "physics", "eta", required=True))
        _require(self.eta > 0.0, "physics.eta", "eta must be positive")
        self.alpha = float(_get(phys, "physics", "alpha", required=True))
        _require(0.0 < self.alpha < 2.0, "physics.alpha", "alpha must lie in (0,2)")

        srcs = _get(raw, "config", "sources", required=True)
        _require(
            isinstance(srcs, list) and len(srcs) >= 1,
            "sources",
            "need at least one source entry",
        )
        self.points, self.lower, self.upper, self.initial = [], [], [], []
        for i, s in enumerate(srcs):
            fld = f"sources[{i}]"
            pt = _get(s, fld, "point", required=True)
            lo = _get(s, fld, "lower", required=True)
            hi = _get(s, fld, "upper", required=True)
            u0 = _get(s, fld, "initial", [0.0, 0.0])
            for name, val in (("point", pt), ("lower", lo), ("upper", hi), ("initial", u0)):
                _require(
                    isinstance(val, list) and len(val) == 2,
                    f"{fld}.{name}",
                    "must be a pair of numbers",
                )
            _require(
                all(l < h for l, h in zip(lo, hi)),
                f"{fld}.lower",
                "bounds must satisfy lower < upper componentwise",
            )
            _require(
                all(l <= u <= h for l, u, h in zip(lo, u0, hi)),
                f"{fld}.initial",
                "initial control must lie within the bounds",
            )
            self.points.append(pt)
            self.lower.append(lo)
            self.upper.append(hi)
            self.initial.append(u0)

        self.target = _get(raw, "config", "target", {"preset": "zero"})
        _require(isinstance(self.target, dict), "target", "must be an object")
        if "field_file" not in self.target:
            preset = _get(self.target, "target", "preset", "zero")
            _require(
                preset in ("zero", "uniform", "vortex"),
                "target.preset",
                "must be one of zero, uniform, vortex",
            )

        tol = dict(DEFAULT_TOLERANCES)
        tol.update(_get(raw, "config", "tolerances", {}))
        self.tolerances = tol
        _require(tol["newton_tol"] > 0, "tolerances.newton_tol", "must be positive")
        _require(tol["opt_tol"] > 0, "tolerances.opt_tol", "must be positive")
        _require(
            isinstance(tol["max_iters"], int) and tol["max_iters"] >= 0,
            "tolerances.max_iters",
            "must be an integer >= 0",
        )

        self.lp_exponent = float(_get(raw, "config", "lp_exponent", 1.5))
        _require(1.0 < self.lp_exponent < 2.0, "lp_exponent", "must lie in (1,2)")

        self.seed = _get(raw, "config", "seed", 0)
        _require(isinstance(self.seed, int) and self.seed >= 0, "seed", "must be an integer >= 0")

        self.write_fields = bool(_get(raw, "config", "write_fields", False))
        self.output_dir = _get(raw, "config", "output_dir", None)

        ladder = _get(raw, "config", "regularity_ladder", None)
        if self.mode == "regularity-study":
            _require(
                isinstance(ladder, list) and len(ladder) >= 1,
                "regularity_ladder",
                "regularity-study needs a non-empty ladder",
            )
            for i, entry in enumerate(ladder):
                fld = f"regularity_ladder[{i}]"
                nn = _get(entry, fld, "n", required=True)
                _require(isinstance(nn, int) and nn >= 2, f"{fld}.n", "must be an integer >= 2")
                lv = _get(entry, fld, "grading_levels", self.grading_levels)
                _require(
                    isinstance(lv, int) and lv >= 0,
                    f"{fld}.grading_levels",
                    "must be an integer >= 0",
                )
        self.regularity_ladder = ladder

    def effective(self):
        """Configuration as actually run (seed overrides applied), for the manifest."""
        cfg = json.loads(json.dumps(self.raw))
        cfg["seed"] = self.seed
        return cfg


def load_config(path):
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}")
    return ExperimentConfig(raw)


# ---------------------------------------------------------------------- #
# targets                                                                 #
# ---------------------------------------------------------------------- #
def _vortex(scale):
    def fn(x):
        sx, sy = np.sin(np.pi * x[:, 0]), np.sin(np.pi * x[:, 1])
        return scale * np.column_stack(
            [sx**2 * np.sin(2 * np.pi * x[:, 1]), -np.sin(2 * np.pi * x[:, 0]) * sy**2]
        )

    return fn


def make_target(cfg, space):
    spec = cfg.target
    if "field_file" in spec:
        path = spec["field_file"]
        try:
            return fem.load_field_npz(space, path)
        except (OSError, ValueError) as exc:
            raise ConfigError("target.field_file", str(exc))
    preset = spec.get("preset", "zero")
    if preset == "zero":
        return lambda x: np.zeros_like(x)
    if preset == "uniform":
        value = np.asarray(spec.get("value", [1.0, 0.0]), float)
        return lambda x: np.broadcast_to(value, x.shape).copy()
    return _vortex(float(spec.get("scale", 1.0)))


# ---------------------------------------------------------------------- #
# setup and output helpers                                                #
# ---------------------------------------------------------------------- #
class RunSetup:
    def __init__(self, cfg, n=None, grading_levels=None):
        n = n or cfg.n
        levels = cfg.grading_levels if grading_levels is None else grading_levels
        self.domain = geometry.PolygonDomain.unit_square()
        try:
            self.sources = wt.DiracSourceSet.create(cfg.points, self.domain)
            base = geometry.build_unit_square_mesh(n)
            self.mesh = geometry.grade_toward_points(
                base, self.sources, levels=levels, ratio=cfg.grading_ratio
            )
        except DomainGeometryError as exc:
            raise ConfigError("sources", str(exc))
        self.n = n
        self.grading_levels = levels
        self.space = fem.TaylorHoodSpace(self.mesh)
        self.weight = wt.MuckenhouptWeight(alpha=cfg.alpha, sources=self.sources)
        self.box = opt.BoxConstraints(lower=cfg.lower, upper=cfg.upper)
        self.U0 = np.asarray(cfg.initial, float)
        self.target = make_target(cfg, self.space)
        self.state_opts = state_mod.StateSolveOptions(
            newton_tol=cfg.tolerances["newton_tol"]
        )

    def problem(self, cfg):
        return opt.ControlProblem(
            self.space,
            cfg.nu,
            cfg.eta,
            self.sources,
            self.box,
            self.target,
            state_opts=self.state_opts,
        )


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return f"{float(value):.16e}"


def write_csv(path, header, rows):
    with open(path, "w", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def config_hash(cfg_dict):
    canonical = json.dumps(cfg_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_manifest(out, cfg, artifacts):
    effective = cfg.effective()
    manifest = {
        "config": effective,
        "config_hash": config_hash(effective),
        "mode": cfg.mode,
        "artifacts": sorted(artifacts),
    }
    path = out / "manifest.json"
    with open(path, "w", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _norm_columns(setup, sol, lp_exponent):
    unweighted = wt.weighted_seminorm(sol.field, None)
    weighted = wt.weighted_seminorm(sol.field, setup.weight)
    lp = wt.lp_seminorm(sol.field, lp_exponent)
    return unweighted, weighted, lp


# ---------------------------------------------------------------------- #
# mode runners (each returns (exit_code, artifact names))                 #
# ---------------------------------------------------------------------- #
def _write_state_fields(out, setup, sol, artifacts, prefix="state"):
    vtk = out / f"{prefix}.vtk"
    npz = out / f"{prefix}.npz"
    fem.write_field_vtk(sol.field, vtk, title=prefix)
    fem.save_field_npz(sol.field, npz)
    artifacts += [vtk.name, npz.name]


def run_solve(cfg, setup, out):
    sol = state_mod.solve_state(
        setup.space, cfg.nu, setup.sources, setup.U0, opts=setup.state_opts
    )
    tracking, _ = fem.tracking_functional(
        setup.space, sol.field.velocity, setup.target
    )
    cost = tracking + 0.5 * cfg.eta * float(np.sum(setup.U0**2))
    unweighted, weighted, lp = _norm_columns(setup, sol, cfg.lp_exponent)
    header = [
        "n", "grading_levels", "nu", "eta", "alpha", "n_sources",
        "cost", "tracking", "control_norm",
        "unweighted_h1", "weighted_h1", "lp_seminorm",
        "regularity_indicator", "ibp_defect", "newton_iters", "converged",
    ]
    row = [
        setup.n, setup.grading_levels, cfg.nu, cfg.eta, cfg.alpha, len(setup.sources),
        cost, tracking, float(np.linalg.norm(setup.U0)),
        unweighted, weighted, lp,
        sol.regularity_indicator, sol.ibp_defect, sol.newton_iters, sol.converged,
    ]
    write_csv(out / "solve.csv", header, [row])
    artifacts = ["solve.csv"]
    if cfg.write_fields:
        _write_state_fields(out, setup, sol, artifacts)
    code = 0 if sol.converged else 3
    return code, artifacts


def _optimize(cfg, setup, problem):
    opts = opt.ProjectedGradientOptions(
        tol=cfg.tolerances["opt_tol"], max_iters=cfg.tolerances["max_iters"]
    )
    return opt.projected_gradient(setup.U0, setup.box, problem, opts)


def _write_optimize_tables(cfg, setup, out, problem, report, artifacts):
    rows = [
        [k, cost, vi] for k, (_, cost, vi) in enumerate(report.iterates)
    ]
    write_csv(out / "iterates.csv", ["iter", "cost", "vi_residual"], rows)
    artifacts.append("iterates.csv")

    U = report.final_control
    Psi = problem.gradient(U)
    kkt = opt.kkt_sign_report(U, Psi, setup.box, tol=cfg.tolerances["tol_active"])
    rows = []
    for t in range(len(setup.sources)):
        rows.append(
            [
                t,
                setup.sources.points[t, 0], setup.sources.points[t, 1],
                U[t, 0], U[t, 1],
                Psi[t, 0], Psi[t, 1],
                kkt.labels[2 * t], kkt.labels[2 * t + 1],
            ]
        )
    write_csv(
        out / "final_control.csv",
        ["t_index", "point_x", "point_y", "u_x", "u_y", "psi_x", "psi_y",
         "label_x", "label_y"],
        rows,
    )
    artifacts.append("final_control.csv")

    write_csv(
        out / "summary.csv",
        ["converged", "n_iters", "n_backtracks", "n_state_solves",
         "final_cost", "final_vi_residual", "kkt_violations"],
        [[
            report.converged, report.n_iters, report.n_backtracks,
            report.n_state_solves, problem.cost(U),
            opt.vi_residual(U, Psi, setup.box), len(kkt.violations),
        ]],
    )
    artifacts.append("summary.csv")
    return kkt


def run_optimize(cfg, setup, out):
    problem = setup.problem(cfg)
    report = _optimize(cfg, setup, problem)
    artifacts = []
    _write_optimize_tables(cfg, setup, out, problem, report, artifacts)
    if cfg.write_fields:
        sol = problem.state(report.final_control)
        _write_state_fields(out, setup, sol, artifacts)
        adj = problem.adjoint(report.final_control)
        vtk = out / "adjoint.vtk"
        fem.write_field_vtk(adj.field, vtk, title="adjoint")
        artifacts.append(vtk.name)
    return (0 if report.converged else 3), artifacts


def run_gradient_check(cfg, setup, out):
    problem = setup.problem(cfg)
    rng = np.random.default_rng(cfg.seed)
    step = cfg.tolerances["fd_step"]
    tol = cfg.tolerances["gradient_tol"]
    rows = []
    worst = 0.0
    for k in range(5):
        U = setup.box.lower + (setup.box.upper - setup.box.lower) * rng.random(
            setup.box.lower.shape
        )
        Psi = problem.gradient(U)
        for i in range(U.size):
            e = np.zeros(U.size)
            e[i] = step
            jp = problem.cost(U.ravel() + e)
            jm = problem.cost(U.ravel() - e)
            fd = (jp - jm) / (2.0 * step)
            ad = Psi.ravel()[i]
            scale = max(abs(fd), abs(ad), 1e-30)
            rel = abs(ad - fd) / scale
            worst = max(worst, rel)
            rows.append([k, i, ad, fd, abs(ad - fd), rel])
    write_csv(
        out / "gradient_check.csv",
        ["control_index", "component", "adjoint_value", "fd_value",
         "abs_error", "rel_error"],
        rows,
    )
    return (0 if worst <= tol else 3), ["gradient_check.csv"]


def run_hessian_check(cfg, setup, out):
    problem = setup.problem(cfg)
    rng = np.random.default_rng(cfg.seed)
    step = cfg.tolerances["hessian_fd_step"]
    tol = cfg.tolerances["hessian_tol"]
    U = setup.box.lower + (setup.box.upper - setup.box.lower) * rng.random(
        setup.box.lower.shape
    )
    H = opt.assemble_reduced_hessian(U, problem)
    sym = float(np.abs(H - H.T).max() / max(np.abs(H).max(), 1e-30))
    rows = []
    worst = 0.0
    j0 = problem.cost(U)
    for k in range(3):
        V = rng.normal(size=U.shape)
        V /= np.linalg.norm(V)
        form = opt.hessian_quadratic_form(U, V, problem)
        fd = (problem.cost(U + step * V) - 2 * j0 + problem.cost(U - step * V)) / step**2
        rel = abs(form - fd) / max(abs(fd), 1e-30)
        matrix = float(V.ravel() @ H @ V.ravel())
        path_rel = abs(matrix - form) / max(abs(form), 1e-30)
        worst = max(worst, rel)
        rows.append([k, form, fd, rel, path_rel, sym])
    write_csv(
        out / "hessian_check.csv",
        ["direction", "form_value", "fd_value", "rel_error",
         "matrix_form_rel_error", "hessian_symmetry"],
        rows,
    )
    ok = worst <= tol and sym <= 1e-8 and all(r[4] <= 1e-10 for r in rows)
    return (0 if ok else 3), ["hessian_check.csv"]


def run_ssc(cfg, setup, out):
    problem = setup.problem(cfg)
    report = _optimize(cfg, setup, problem)
    artifacts = []
    _write_optimize_tables(cfg, setup, out, problem, report, artifacts)
    if not report.converged:
        return 3, artifacts
    so = opt.check_ssc(
        report.final_control,
        problem,
        tau=cfg.tolerances["tau"],
        tol_active=cfg.tolerances["tol_active"],
        vi_tol=cfg.tolerances["opt_tol"],
    )
    growth = opt.quadratic_growth_probe(
        report.final_control, problem, sigma=1e-2, samples=50, seed=cfg.seed
    )
    cone = so.cone
    write_csv(
        out / "ssc.csv",
        ["kappa", "ssc_verdict", "tau", "n_fixed", "n_sign_restricted", "n_free",
         "mu", "growth_violations", "growth_samples"],
        [[
            so.kappa if np.isfinite(so.kappa) else "inf",
            so.ssc_verdict, so.tau,
            int(cone.fixed.sum()), int(np.sum(cone.sign != 0)), cone.dim_free,
            growth.mu, len(growth.violations), growth.n_samples,
        ]],
    )
    artifacts.append("ssc.csv")
    return 0, artifacts


def run_regularity_study(cfg, setup_unused, out):
    rows = []
    ok = True
    for entry in cfg.regularity_ladder:
        n = entry["n"]
        levels = entry.get("grading_levels", cfg.grading_levels)
        setup = RunSetup(cfg, n=n, grading_levels=levels)
        sol = state_mod.solve_state(
            setup.space, cfg.nu, setup.sources, setup.U0, opts=setup.state_opts
        )
        ok = ok and sol.converged
        unweighted, weighted, lp = _norm_columns(setup, sol, cfg.lp_exponent)
        rows.append(
            [
                n, levels,
                float(setup.mesh.element_diameters.min()),
                setup.mesh.n_triangles,
                unweighted, weighted, lp,
                sol.regularity_indicator, sol.converged,
            ]
        )
    write_csv(
        out / "regularity.csv",
        ["n", "grading_levels", "h_min", "n_triangles",
         "unweighted_h1", "weighted_h1", "lp_seminorm",
         "regularity_indicator", "converged"],
        rows,
    )
    return (0 if ok else 3), ["regularity.csv"]


_RUNNERS = {
    "solve": run_solve,
    "optimize": run_optimize,
    "gradient-check": run_gradient_check,
    "hessian-check": run_hessian_check,
    "ssc": run_ssc,
    "regularity-study": run_regularity_study,
}


def run(config_path, out_dir=None, seed=None, verbose=False):
    """Execute one experiment; returns the process exit code."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(config_path)
        if seed is not None:
            _require(seed >= 0, "seed", "must be an integer >= 0")
            cfg.seed = seed
        out = Path(out_dir or cfg.output_dir or f"{Path(config_path).stem}_out")
        out.mkdir(parents=True, exist_ok=True)
        log.info("mode=%s out=%s seed=%d", cfg.mode, out, cfg.seed)
        setup = None if cfg.mode == "regularity-study" else RunSetup(cfg)
        code, artifacts = _RUNNERS[cfg.mode](cfg, setup, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SingularSystemError, StateNotConvergedError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    manifest = write_manifest(out, cfg, artifacts)
    log.info("wrote %s (+%d artifacts)", manifest, len(artifacts))
    if code != 0:
        print(
            f"run finished with failing checks or nonconverged solves (mode {cfg.mode})",
            file=sys.stderr,
        )
    return code


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="pointflow",
        description="Optimal control of steady incompressible flow driven by point forces.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run an experiment described by a JSON config")
    runp.add_argument("config", help="path to the experiment configuration (JSON)")
    runp.add_argument("--out", default=None, help="output directory (default: <config stem>_out)")
    runp.add_argument("--seed", type=int, default=None, help="override the config seed")
    runp.add_argument("--verbose", action="store_true", help="log progress to stderr")
    args = parser.parse_args(argv)
    if args.command == "run":
        return run(args.config, out_dir=args.out, seed=args.seed, verbose=args.verbose)
    parser.error(f"unknown command {args.command}")  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
