"""Command-line front end: ``fbsdelta --config run.yaml [--out DIR] [--seed N] [--format csv|json|both]``."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import io as fio
from .adjoint import hamiltonian_gradient_process, solve_adjoint
from .config import RunConfig, _num, lq_coefficients, load, make_constants, make_control, make_controlset
from .config import make_model_from, make_tree, validate
from .errors import ConfigError, FBSDeltaError
from .fbsde_solver import cost, solve_newton
from .lq import as_model, explicit_control_process, solve_lq, summary_table
from .maximum_principle import audit_sufficient, check_necessary, variation_report
from .model import check_derivatives, check_domination, check_monotonicity
from .rng import stream
from .scenario_tree import AdaptedProcess

log = logging.getLogger("fbsdelta")


class _Run:
    """Executes one command; ``stage`` names the step in progress for error reports."""

    def __init__(self, cfg: RunConfig, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        self.fmt = cfg.output.get("format", "both")
        self.stage = "setup"
        self.files: dict[str, str] = {}
        self.results: dict = {}
        num = cfg.numeric
        self.tol = _num(num["tol"], "numeric.tol")
        self.max_iter = _num(num["max_iter"], "numeric.max_iter", int)
        self.seed = None if cfg.seed is None else _num(cfg.seed, "numeric.seed", int)

    # --- shared steps -------------------------------------------------------
    def setup(self):
        self.stage = "tree"
        self.tree = make_tree(self.cfg)
        self.stage = "model"
        self.model = make_model_from(self.cfg, self.tree)
        self.controls = make_controlset(self.cfg, self.model)
        self.stage = "control"
        self.u = make_control(self.cfg, self.tree, self.model, self.controls)
        self.lq = None
        if self.u is None:
            self.stage = "lq"
            self.coeffs = lq_coefficients(self.cfg, self.tree)
            self.lq = solve_lq(self.coeffs, self.tree)
            self.u = self.lq.u

    def newton(self, u=None):
        self.stage = "solve"
        return solve_newton(self.model, self.tree, self.u if u is None else u, tol=self.tol,
                            max_iter=self.max_iter, controls=self.controls)

    def csv(self, name: str, processes: dict):
        if self.fmt == "json":
            return
        path = fio.write_processes(self.out / name, self.tree, processes)
        self.files[name] = fio.sha256_file(path)

    def rows(self, name: str, rows: list[dict]):
        if self.fmt == "json":
            return
        path = fio.write_rows(self.out / name, rows)
        self.files[name] = fio.sha256_file(path)

    def embed(self, key: str, processes: dict):
        if self.fmt != "csv":
            self.results.setdefault("trajectories", {})[key] = {k: fio.to_jsonable(v) for k, v in processes.items()}

    # --- commands -----------------------------------------------------------
    def cmd_solve(self, with_adjoint: bool = False):
        self.setup()
        fb = self.newton()
        self.stage = "cost"
        J = cost(self.model, self.tree, self.u, fb)
        self.results.update(residual_norm=fb.residual_norm, iterations=fb.iterations, cost=J,
                            model=self.model.describe())
        self.csv("solution.csv", {"x": fb.x, "y": fb.y})
        self.csv("control.csv", {"u": self.u})
        self.embed("solution", {"x": fb.x, "y": fb.y, "u": self.u})
        if with_adjoint:
            self.stage = "adjoint"
            adj = solve_adjoint(self.model, self.tree, self.u, fb)
            hu = hamiltonian_gradient_process(self.model, self.tree, self.u, fb, adj)
            self.results.update(adjoint_residual=adj.residual_norm,
                                max_hu_norm=max(float(np.max(np.linalg.norm(h, axis=1))) for h in hu.values))
            self.csv("adjoint.csv", {"p": adj.p, "r": adj.r})
            self.embed("adjoint", {"p": adj.p, "r": adj.r, "H_u": hu})

    def cmd_adjoint(self):
        self.cmd_solve(with_adjoint=True)

    def _direction(self) -> AdaptedProcess:
        rng = np.random.default_rng(stream(self.seed, "direction"))
        scale = _num(self.cfg.numeric.get("direction_scale", 1.0), "numeric.direction_scale")
        shape = [(self.tree.sizes[k], self.model.m) for k in range(self.tree.horizon)]
        if self.controls is None:
            return AdaptedProcess([scale * rng.standard_normal(s) for s in shape])
        target = []
        for k, s in enumerate(shape):
            lo, hi = self.controls.bounds(k)
            lo = np.where(np.isfinite(lo), lo, self.u[k] - scale)
            hi = np.where(np.isfinite(hi), hi, self.u[k] + scale)
            target.append(lo + (hi - lo) * rng.random(s))
        # a convex combination of two admissible controls stays admissible
        return AdaptedProcess(target) - self.u

    def cmd_check_mp(self):
        self.setup()
        num = self.cfg.numeric
        v = self._direction()
        times = num.get("spike_times") or list(range(self.tree.horizon))
        eps = [_num(e, "numeric.epsilons") for e in num["epsilons"]]
        self.stage = "variation"
        reports = []
        for s in times:
            s = int(s)
            rep = variation_report(self.model, self.tree, self.u, v, s, eps, self.controls)
            reports.append(rep.to_dict())
            self.rows(f"variation_s{s}.csv", [{"eps": e, "J": j} for e, j in rep.curve])
        self.results["variations"] = reports
        self.results["analytic"] = [r["analytic"] for r in reports]
        self.results["max_rel_gap"] = max(r["rel_gap"] for r in reports)
        self.stage = "necessary"
        nec = check_necessary(self.model, self.tree, self.u, self.controls,
                              samples=int(num["necessary_samples"]), seed=self.seed)
        self.results["necessary"] = nec.to_dict()
        self.stage = "sufficiency"
        audit = audit_sufficient(self.model, self.tree, self.u, samples=int(num["samples"]), seed=self.seed,
                                 box=_num(num["audit_box"], "numeric.audit_box"), controls=self.controls)
        self.results["sufficiency"] = audit.to_dict()

    def cmd_lq_solve(self, demo: bool = False):
        self.stage = "tree"
        self.tree = make_tree(self.cfg)
        self.stage = "model"
        self.coeffs = lq_coefficients(self.cfg, self.tree)
        self.model = as_model(self.coeffs)
        self.controls = None
        self.stage = "lq"
        sol = solve_lq(self.coeffs, self.tree)
        self.u = sol.u
        self.results.update(cost=sol.cost, kkt_residual=sol.kkt_residual, coefficients=self.coeffs.to_params())
        fb = self.newton()
        self.stage = "adjoint"
        adj = solve_adjoint(self.model, self.tree, sol.u, fb)
        explicit = explicit_control_process(self.coeffs, self.tree, sol.pp, sol.qp, sol.r)
        hu = hamiltonian_gradient_process(self.model, self.tree, sol.u, fb, adj)
        self.results["cross_check"] = {
            "newton_residual": fb.residual_norm,
            "state_gap": max(fb.x.sup_distance(sol.x), fb.y.sup_distance(sol.y)),
            "adjoint_gap": max(adj.p.sup_distance(sol.p), adj.r.sup_distance(sol.r)),
            "explicit_control_gap": explicit.sup_distance(sol.u),
            "generic_cost": cost(self.model, self.tree, sol.u, fb),
            "max_hu_norm": max(float(np.max(np.linalg.norm(h, axis=1))) for h in hu.values),
        }
        table = summary_table(self.tree, sol.x, sol.y, sol.u)
        self.results["summary"] = table
        self.csv("solution.csv", {"x": sol.x, "y": sol.y, "u": sol.u})
        self.csv("adjoint.csv", {"p": sol.p, "r": sol.r})
        self.rows("summary.csv", table)
        self.embed("solution", {"x": sol.x, "y": sol.y, "u": sol.u, "p": sol.p, "r": sol.r})
        if demo:
            self.stage = "necessary"
            nec = check_necessary(self.model, self.tree, sol.u, None,
                                  samples=int(self.cfg.numeric["necessary_samples"]), seed=self.seed,
                                  solved=(fb, adj))
            self.results["necessary"] = {"max_hu_norm": nec.max_hu_norm, "minimum": nec.minimum}

    def cmd_storage_demo(self):
        self.cmd_lq_solve(demo=True)

    def cmd_check_assumptions(self):
        self.stage = "tree"
        self.tree = make_tree(self.cfg)
        self.stage = "model"
        num = self.cfg.numeric
        name = self.cfg.model_name
        if name in ("lq", "storage"):
            coeffs = lq_coefficients(self.cfg, self.tree, check=False)
            diags = coeffs.diagnostics()
            self.results["lq_diagnostics"] = diags
            if diags:
                return
        self.model = make_model_from(self.cfg, self.tree)
        self.stage = "derivatives"
        der = check_derivatives(self.model, int(num["derivative_points"]), self.seed, tree=self.tree)
        self.results["derivatives"] = {"max_error": der.max_error, "worst_block": der.worst_block,
                                       "errors": der.errors, "flagged": der.flagged()}
        constants = make_constants(self.cfg)
        if constants is not None:
            self.stage = "monotonicity"
            box = _num(num["check_box"], "numeric.check_box")
            samples = int(num["samples"])
            dom = check_domination(self.model, constants, samples, self.seed, box=box, tree=self.tree)
            mono = check_monotonicity(self.model, constants, samples, self.seed, box=box, tree=self.tree)
            self.results["domination"] = dom.to_dict()
            self.results["monotonicity"] = mono.to_dict()
            self.results["well_posed_on_samples"] = bool(dom.holds and mono.holds)

    def execute(self) -> dict:
        getattr(self, "cmd_" + self.cfg.command.replace("-", "_"))()
        return self.results


def _config_echo(cfg: RunConfig) -> dict:
    echo = fio.to_jsonable(copy.deepcopy(cfg.raw))
    # the destination must not change the hash of an otherwise identical run
    if isinstance(echo.get("output"), dict):
        echo["output"].pop("dir", None)
    return echo


def run(cfg: RunConfig, out_dir: str | Path | None = None) -> dict:
    """Run one configured command, write its files and ``report.json``; returns the report."""
    out = Path(out_dir if out_dir is not None else cfg.output.get("dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    runner = _Run(cfg, out)
    try:
        results = runner.execute()
    except FBSDeltaError as exc:
        exc.stage = runner.stage
        raise
    echo = _config_echo(cfg)
    report = {
        "tool": "fbsdelta",
        "version": __version__,
        "command": cfg.command,
        "seed": runner.seed,
        "config": echo,
        "config_hash": fio.sha256_text(fio.dumps(echo)),
        "results": fio.to_jsonable(results),
        "files": dict(sorted(runner.files.items())),
    }
    report["report_hash"] = fio.sha256_text(fio.dumps(report))
    report["out_dir"] = str(out)
    report["wall_time"] = time.perf_counter() - start
    fio.write_json(out / "report.json", report)
    return report


def error_payload(exc: Exception, stage: str) -> dict:
    if isinstance(exc, FBSDeltaError):
        payload = {"stage": getattr(exc, "stage", stage), "code": exc.code, "message": str(exc)}
        witness = exc.witness
        if isinstance(exc, ConfigError) and exc.path:
            witness = dict(witness or {}, path=exc.path)
        for attr in ("rank_defect", "best_residual"):
            if getattr(exc, attr, None) is not None:
                witness = dict(witness or {}, **{attr: getattr(exc, attr)})
        if witness is not None:
            payload["witness"] = fio.to_jsonable(witness)
        return payload
    return {"stage": stage, "code": type(exc).__name__, "message": str(exc)}


def _emit_error(payload: dict, out: Path | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False)
    print(text)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(text + "\n", encoding="utf-8")
        except OSError:
            pass


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbsdelta", description=__doc__)
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int, help="seed (overrides numeric.seed)")
    p.add_argument("--format", choices=("csv", "json", "both"), help="overrides output.format")
    p.add_argument("--validate-only", action="store_true", help="print diagnostics and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out) if args.out else None
    try:
        raw = load(args.config)
        if isinstance(raw, dict):
            if args.seed is not None:
                raw.setdefault("numeric", {})["seed"] = args.seed
            if args.out:
                raw.setdefault("output", {})["dir"] = args.out
            if args.format:
                raw.setdefault("output", {})["format"] = args.format
        diagnostics = validate(raw)
        if args.validate_only:
            print(json.dumps({"diagnostics": diagnostics}, indent=2, ensure_ascii=False))
            return 0 if not diagnostics else 2
        if diagnostics:
            raise ConfigError(diagnostics[0], witness={"diagnostics": diagnostics})
        cfg = RunConfig.from_dict(raw)
        out = Path(cfg.output.get("dir", "out"))
    except ConfigError as exc:
        _emit_error(error_payload(exc, "config"), out)
        return 2
    try:
        report = run(cfg, out)
    except FBSDeltaError as exc:
        _emit_error(error_payload(exc, "run"), out)
        return 1
    print(json.dumps({"report": str(out / "report.json"), "report_hash": report["report_hash"],
                      "files": sorted(report["files"])}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
