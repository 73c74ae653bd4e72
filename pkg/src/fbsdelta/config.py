"""Run configuration: YAML parsing, validation diagnostics, and object builders."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, FBSDeltaError
from .lq import STORAGE_DEFAULTS, LQCoefficients, random_lq, storage_preset
from .model import ControlSet, ModelSpec, MonotonicityConstants
from .registry import REGISTRY, make_model
from .rng import stream
from .scenario_tree import AdaptedProcess, BranchSpec, ScenarioTree, build_tree

COMMANDS = ("solve", "adjoint", "check-mp", "lq-solve", "check-assumptions", "storage-demo")
SAMPLING = ("check-mp", "check-assumptions", "storage-demo")
LQ_MODELS = ("lq", "lq_random", "storage")
FORMATS = ("csv", "json", "both")
CONTROL_KINDS = ("zero", "constant", "levels", "random", "lq-optimal")

NUMERIC_DEFAULTS = {"tol": 1e-10, "max_iter": 50, "epsilons": [1e-2, 1e-3, 1e-4], "samples": 1000,
                    "necessary_samples": 64, "derivative_points": 100, "spike_times": None,
                    "direction_scale": 1.0, "audit_box": 1.0, "check_box": 10.0}


def _num(value, path: str, kind=float):
    """Numbers from YAML; strings such as ``1e-10`` (not floats in YAML 1.1) are accepted."""
    try:
        out = kind(float(value)) if kind is int else float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected a number, got {value!r}", path=path) from None
    if kind is int and float(value) != out:
        raise ConfigError(f"expected an integer, got {value!r}", path=path)
    return out


def _block(raw: dict, name: str) -> dict:
    val = raw.get(name) or {}
    if not isinstance(val, dict):
        raise ConfigError(f"'{name}' must be a mapping", path=name)
    return val


@dataclass
class RunConfig:
    command: str
    tree: dict
    model: dict
    control: dict
    controls: dict | None
    numeric: dict
    assumptions: dict | None
    output: dict
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a mapping", path="")
        command = raw.get("command")
        if command not in COMMANDS:
            raise ConfigError(f"command must be one of {list(COMMANDS)}, got {command!r}", path="command")
        tree = dict(_block(raw, "tree"))
        model = dict(_block(raw, "model"))
        control = dict(_block(raw, "control"))
        if command == "storage-demo":
            model.setdefault("name", "storage")
            control.setdefault("kind", "lq-optimal")
            if "horizon" not in tree:
                tree["horizon"] = (model.get("params") or {}).get("horizon", STORAGE_DEFAULTS["horizon"])
        if command == "lq-solve":
            control.setdefault("kind", "lq-optimal")
        control.setdefault("kind", "zero")
        numeric = dict(NUMERIC_DEFAULTS)
        numeric.update(_block(raw, "numeric"))
        output = {"dir": "out", "format": "both"}
        output.update(_block(raw, "output"))
        controls = raw.get("controls")
        assumptions = raw.get("assumptions")
        return cls(command, tree, model, control, controls, numeric, assumptions, output, raw)

    @property
    def seed(self):
        return self.numeric.get("seed")

    @property
    def model_name(self) -> str | None:
        return self.model.get("name")


def load(path: str | Path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=str(path)) from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}", path=str(path)) from exc
    return raw if raw is not None else {}


# --------------------------------------------------------------------------
# builders


def branch_specs(tree_block: dict) -> list[BranchSpec] | None:
    entries = tree_block.get("branches")
    if entries is None:
        return None
    if isinstance(entries, dict):
        entries = [entries]
    specs = []
    for i, entry in enumerate(entries):
        path = f"tree.branch[{i}]"
        if entry == "rademacher":
            specs.append(BranchSpec.rademacher())
            continue
        if not isinstance(entry, dict) or "values" not in entry or "probs" not in entry:
            raise ConfigError("a branch needs 'values' and 'probs' (or the word rademacher)", path=path)
        values = [_num(v, f"{path}.values") for v in entry["values"]]
        probs = [_num(p, f"{path}.probs") for p in entry["probs"]]
        specs.append(BranchSpec(values=values, probs=probs))
    return specs


def make_tree(cfg: RunConfig) -> ScenarioTree:
    if "horizon" not in cfg.tree:
        raise ConfigError("tree.horizon is required", path="tree.horizon")
    horizon = _num(cfg.tree["horizon"], "tree.horizon", int)
    specs = branch_specs(cfg.tree)
    if specs is not None and len(specs) == 1:
        specs = specs[0]
    return build_tree(horizon, specs)


def _model_params(cfg: RunConfig, tree: ScenarioTree) -> dict:
    params = dict(cfg.model.get("params") or {})
    name = cfg.model_name
    if name in LQ_MODELS:
        params.setdefault("horizon", tree.horizon)
    if name == "lq_random":
        params.setdefault("seed", cfg.seed if cfg.seed is not None else 0)
    return params


def lq_coefficients(cfg: RunConfig, tree: ScenarioTree, check: bool = True) -> LQCoefficients:
    name = cfg.model_name
    params = _model_params(cfg, tree)
    if name == "lq":
        return LQCoefficients.from_params(params, check)
    if name == "storage":
        return storage_preset(params, check)
    if name == "lq_random":
        if params.get("node_varying"):
            params["tree"] = tree
        return random_lq(**params)
    raise ConfigError(f"model {name!r} is not linear-quadratic", path="model.name")


def make_model_from(cfg: RunConfig, tree: ScenarioTree) -> ModelSpec:
    if not cfg.model_name:
        raise ConfigError("model.name is required", path="model.name")
    if cfg.model_name in LQ_MODELS:
        from .lq import as_model
        return as_model(lq_coefficients(cfg, tree))
    return make_model(cfg.model_name, _model_params(cfg, tree))


def make_controlset(cfg: RunConfig, model: ModelSpec) -> ControlSet | None:
    block = cfg.controls
    if block is None or block == "all":
        return None
    if not isinstance(block, dict):
        raise ConfigError("controls must be a mapping with lower/upper", path="controls")
    lower = block.get("lower", -np.inf)
    upper = block.get("upper", np.inf)
    lo = np.broadcast_to(np.asarray(lower, dtype=float), (model.m,)) if np.ndim(lower) < 2 else np.asarray(lower, float)
    hi = np.broadcast_to(np.asarray(upper, dtype=float), (model.m,)) if np.ndim(upper) < 2 else np.asarray(upper, float)
    return ControlSet.box(lo, hi)


def make_control(cfg: RunConfig, tree: ScenarioTree, model: ModelSpec, controls: ControlSet | None = None):
    """Control process for the run, or ``None`` when the LQ optimum is requested."""
    block = cfg.control
    kind = block.get("kind", "zero")
    N, m = tree.horizon, model.m
    if kind == "lq-optimal":
        return None
    if kind == "zero":
        return AdaptedProcess.zeros(tree, m, N)
    if kind == "constant":
        value = np.broadcast_to(np.asarray(block.get("value", 0.0), dtype=float), (m,))
        return AdaptedProcess.constant(tree, value, N)
    if kind == "levels":
        levels = block.get("levels")
        if not isinstance(levels, list) or len(levels) != N:
            raise ConfigError(f"control.levels needs {N} entries (one per time)", path="control.levels")
        vals = []
        for k, lv in enumerate(levels):
            arr = np.asarray(lv, dtype=float)
            arr = np.broadcast_to(arr.reshape(-1, m) if arr.ndim else arr, (tree.sizes[k], m))
            vals.append(arr)
        return AdaptedProcess(vals)
    if kind == "random":
        scale = _num(block.get("scale", 1.0), "control.scale")
        rng = np.random.default_rng(stream(cfg.seed, "control"))
        vals = [scale * rng.standard_normal((tree.sizes[k], m)) for k in range(N)]
        if controls is not None:
            vals = [np.clip(v, *controls.bounds(k)) for k, v in enumerate(vals)]
        return AdaptedProcess(vals)
    raise ConfigError(f"control.kind must be one of {list(CONTROL_KINDS)}", path="control.kind")


def make_constants(cfg: RunConfig) -> MonotonicityConstants | None:
    block = cfg.assumptions
    if not block:
        return None
    try:
        return MonotonicityConstants(mu=_num(block.get("mu", 0.0), "assumptions.mu"),
                                     v=_num(block.get("v", 0.0), "assumptions.v"),
                                     G=block.get("G", 0.0), M=block.get("M", 0.0), A=block.get("A", 0.0),
                                     B=block.get("B", 0.0), C=block.get("C", 0.0),
                                     case=int(block.get("case", 1)))
    except FBSDeltaError as exc:
        raise ConfigError(str(exc), path="assumptions") from exc


# --------------------------------------------------------------------------
# validation


def validate(config) -> list[str]:
    """Structural and invariant diagnostics; an empty list means the config is runnable."""
    out: list[str] = []
    if isinstance(config, RunConfig):
        cfg = config
    else:
        try:
            cfg = RunConfig.from_dict(config)
        except ConfigError as exc:
            return [f"ConfigError at {exc.path}: {exc}"]

    if "horizon" not in cfg.tree:
        out.append("ConfigError at tree.horizon: required")
    else:
        try:
            if _num(cfg.tree["horizon"], "tree.horizon", int) < 1:
                out.append("LevelMismatch at tree.horizon: must be positive")
        except ConfigError as exc:
            out.append(f"ConfigError at {exc.path}: {exc}")
    entries = cfg.tree.get("branches")
    if isinstance(entries, dict):
        entries = [entries]
    for i, entry in enumerate(entries or []):
        try:
            spec = branch_specs({"branches": [entry]})[0]
            spec.validate(i)
        except ConfigError as exc:
            out.append(f"ConfigError at tree.branch[{i}]: {exc}")
        except FBSDeltaError as exc:
            out.append(f"{exc.code} at tree.branch[{i}]: {exc}")

    name = cfg.model_name
    if not name:
        out.append("ConfigError at model.name: required")
    elif name not in REGISTRY:
        out.append(f"ConfigError at model.name: unknown model {name!r}")
    elif name in LQ_MODELS and not out:
        try:
            tree = make_tree(cfg)
            coeffs = lq_coefficients(cfg, tree, check=False)
            out += coeffs.diagnostics()
        except FBSDeltaError as exc:
            out.append(f"{exc.code} at model.params: {exc}")
        except (TypeError, ValueError) as exc:
            out.append(f"ConfigError at model.params: {exc}")

    kind = cfg.control.get("kind")
    if kind not in CONTROL_KINDS:
        out.append(f"ConfigError at control.kind: must be one of {list(CONTROL_KINDS)}")
    elif kind == "lq-optimal" and name not in LQ_MODELS:
        out.append("ConfigError at control.kind: lq-optimal needs a linear-quadratic model")
    if cfg.command in ("lq-solve", "storage-demo") and name not in LQ_MODELS:
        out.append(f"ConfigError at model.name: {cfg.command} needs a linear-quadratic model")

    needs_seed = cfg.command in SAMPLING or kind == "random" or name == "lq_random"
    if needs_seed and cfg.seed is None:
        out.append(f"ConfigError at numeric.seed: a seed is required for command {cfg.command}")
    elif cfg.seed is not None:
        try:
            _num(cfg.seed, "numeric.seed", int)
        except ConfigError as exc:
            out.append(f"ConfigError at numeric.seed: {exc}")
    for key in ("tol", "samples", "max_iter"):
        try:
            if _num(cfg.numeric[key], f"numeric.{key}") <= 0:
                out.append(f"ConfigError at numeric.{key}: must be positive")
        except ConfigError as exc:
            out.append(f"ConfigError at {exc.path}: {exc}")
    try:
        eps = [_num(e, "numeric.epsilons") for e in cfg.numeric["epsilons"]]
        if not eps or any(not 0 < e <= 1 for e in eps):
            out.append("ConfigError at numeric.epsilons: values must lie in (0, 1]")
    except (ConfigError, TypeError) as exc:
        out.append(f"ConfigError at numeric.epsilons: {exc}")
    if cfg.output.get("format") not in FORMATS:
        out.append(f"ConfigError at output.format: must be one of {list(FORMATS)}")
    if cfg.assumptions:
        try:
            make_constants(cfg)
        except ConfigError as exc:
            out.append(f"ConfigError at assumptions: {exc}")
    return out
