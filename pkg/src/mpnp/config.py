"""JSON run configurations.

Every file carries ``schema_version`` (currently 1) and a ``kind``:
``simulation``, ``convergence`` or ``nanopore``.  Unknown keys are errors.
Spatial fields may be numbers or expressions in ``x``, ``y``, ``z`` using
numpy functions (``exp``, ``abs``, ``where``, comparisons, ...).
"""

from __future__ import annotations

import ast
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

SCHEMA_VERSION = 1
KINDS = ("simulation", "convergence", "nanopore")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# expressions

_FUNCS = {
    "exp": np.exp, "log": np.log, "sqrt": np.sqrt, "abs": np.abs, "sin": np.sin, "cos": np.cos,
    "tan": np.tan, "tanh": np.tanh, "sinh": np.sinh, "cosh": np.cosh, "arctan": np.arctan,
    "minimum": np.minimum, "maximum": np.maximum, "where": np.where, "sign": np.sign,
    "logical_and": np.logical_and, "logical_or": np.logical_or, "logical_not": np.logical_not,
    "isclose": np.isclose,
}
_CONSTS = {"pi": math.pi, "e": math.e}
_VARS = ("x", "y", "z")
_ALLOWED = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Compare, ast.Call, ast.Name, ast.Load, ast.Constant,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.Mod, ast.USub, ast.UAdd, ast.Not,
    ast.Lt, ast.LtE, ast.Gt, ast.GtE, ast.Eq, ast.NotEq, ast.BitAnd, ast.BitOr, ast.Invert,
    ast.IfExp, ast.BoolOp, ast.And, ast.Or,
)


class _BoolRewriter(ast.NodeTransformer):
    """Map ``and``/``or``/``not`` and ``a if c else b`` onto elementwise numpy calls."""

    def visit_BoolOp(self, node):
        self.generic_visit(node)
        fn = "logical_and" if isinstance(node.op, ast.And) else "logical_or"
        out = node.values[0]
        for v in node.values[1:]:
            out = ast.Call(func=ast.Name(id=fn, ctx=ast.Load()), args=[out, v], keywords=[])
        return out

    def visit_UnaryOp(self, node):
        self.generic_visit(node)
        if isinstance(node.op, ast.Not):
            return ast.Call(func=ast.Name(id="logical_not", ctx=ast.Load()), args=[node.operand], keywords=[])
        return node

    def visit_IfExp(self, node):
        self.generic_visit(node)
        return ast.Call(func=ast.Name(id="where", ctx=ast.Load()), args=[node.test, node.body, node.orelse], keywords=[])


def compile_expression(text: str):
    """Validate ``text`` and return f(points) evaluating it at (n, dim) points."""
    if not isinstance(text, str):
        raise ConfigError(f"expression must be a string, got {type(text).__name__}")
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"invalid expression {text!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED):
            raise ConfigError(f"expression {text!r} uses unsupported syntax {type(node).__name__}")
        if isinstance(node, ast.Name) and node.id not in _FUNCS and node.id not in _CONSTS and node.id not in _VARS:
            raise ConfigError(f"expression {text!r} uses unknown name {node.id!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
            raise ConfigError(f"expression {text!r} calls an unsupported function")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float, bool)):
            raise ConfigError(f"expression {text!r} contains a non-numeric constant")
    tree = ast.fix_missing_locations(_BoolRewriter().visit(tree))
    code = compile(tree, "<config expression>", "eval")

    def evaluate(points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, float))
        names = dict(_FUNCS)
        names.update(_CONSTS)
        for k, v in enumerate(_VARS):
            names[v] = points[:, k] if k < points.shape[1] else np.zeros(len(points))
        with np.errstate(all="ignore"):
            out = eval(code, {"__builtins__": {}}, names)  # noqa: S307 - AST validated above
        return np.broadcast_to(np.asarray(out), (len(points),)).copy()

    return evaluate


def field_values(spec, points: np.ndarray, what: str) -> np.ndarray:
    if isinstance(spec, bool):
        raise ConfigError(f"{what}: expected a number or an expression")
    if isinstance(spec, (int, float)):
        return np.full(len(points), float(spec))
    vals = compile_expression(spec)(points)
    if not np.all(np.isfinite(vals)):
        raise ConfigError(f"{what}: expression produced non-finite values")
    return vals.astype(float)


def predicate(spec):
    """Boolean face predicate; ``None`` selects nothing."""
    if spec is None:
        return None
    f = compile_expression(spec)
    return lambda pts: f(pts).astype(bool)


# ---------------------------------------------------------------------------
# schema helpers


def _check_keys(block: dict, allowed: dict, where: str) -> dict:
    """Reject unknown keys and fill defaults; ``allowed`` maps key -> default
    (``...`` marks a required key)."""
    if not isinstance(block, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    out = {}
    for key, default in allowed.items():
        if key in block:
            out[key] = block[key]
        elif default is ...:
            raise ConfigError(f"{where}: missing required key {key!r}")
        else:
            out[key] = default
    return out


def _number(v, where: str, positive: bool = False, nonneg: bool = False) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"{where}: expected a finite number")
    if positive and not v > 0:
        raise ConfigError(f"{where}: must be positive")
    if nonneg and v < 0:
        raise ConfigError(f"{where}: must be non-negative")
    return float(v)


def _int(v, where: str, minimum: int = 0) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigError(f"{where}: expected an integer >= {minimum}")
    return v


NEWTON_KEYS = {"tol_residual": 1e-10, "max_iter": 50, "theta_safeguard": 0.95, "linear_solver": "direct"}


def parse_newton(block: Optional[dict]):
    from .solver import NewtonConfig

    b = _check_keys(block or {}, NEWTON_KEYS, "newton")
    try:
        return NewtonConfig(
            tol_residual=_number(b["tol_residual"], "newton.tol_residual", positive=True),
            max_iter=_int(b["max_iter"], "newton.max_iter", 1),
            theta_safeguard=_number(b["theta_safeguard"], "newton.theta_safeguard"),
            linear_solver=b["linear_solver"],
        )
    except ValueError as exc:
        raise ConfigError(f"newton: {exc}") from None


def _species(block, where: str) -> list:
    from .model import SpeciesSpec

    if not isinstance(block, list) or not block:
        raise ConfigError(f"{where}: expected a non-empty list")
    out = []
    for k, s in enumerate(block):
        s = _check_keys(s, {"z": ..., "a": ..., "gamma": 1.0}, f"{where}[{k}]")
        if isinstance(s["z"], bool) or not isinstance(s["z"], int):
            raise ConfigError(f"{where}[{k}].z: valence must be an integer")
        out.append(SpeciesSpec(s["z"], _number(s["a"], f"{where}[{k}].a", positive=True),
                               _number(s["gamma"], f"{where}[{k}].gamma", positive=True)))
    return out


# ---------------------------------------------------------------------------
# configs


@dataclass
class SimulationConfig:
    mesh: dict
    model: dict
    species: list
    initial: list
    scheme: str
    dt: float
    t_end: float
    beta: float
    newton: Any
    field_dump_every: int
    assertions: dict
    base_dir: Path = field(default=Path("."))

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    def build(self):
        """(Discretization, initial State)."""
        from .mesh import generate_structured, load_mesh
        from .scenarios import make_discretization
        from .model import State
        from .solver import solve_poisson

        mb = self.mesh
        try:
            if mb["type"] == "box":
                mesh = generate_structured(mb["lower"], mb["upper"], mb["n"], dirichlet=predicate(mb["dirichlet"]))
            else:
                path = Path(mb["path"])
                mesh = load_mesh(path if path.is_absolute() else self.base_dir / path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"mesh: {exc}") from None
        pts = mesh.vertices
        md = self.model
        eps = field_values(md["epsilon"], pts, "model.epsilon")
        if np.any(eps <= 0):
            raise ConfigError("model.epsilon must be positive")
        disc = make_discretization(
            mesh, self.species, md["a0"], md["kappa"], md["chi"], eps,
            field_values(md["rho_f"], pts, "model.rho_f"), field_values(md["psi_dirichlet"], pts, "model.psi_dirichlet"),
            beta=self.beta,
        )
        if md["psi_neumann"] != 0:
            bpts = disc.dual.points[disc.dual.bface_vertex]
            disc.model = disc.model.with_data(psi_neumann=field_values(md["psi_neumann"], bpts, "model.psi_neumann"))
        c = np.stack([field_values(v, pts[disc.ions], f"initial.concentrations[{k}]") for k, v in enumerate(self.initial)])
        state = State(c, np.zeros(disc.n_cells))
        try:
            state.check(disc.model)
        except ValueError as exc:
            raise ConfigError(f"initial: {exc}") from None
        if len(disc.dual.dirichlet_vertices) == 0:
            raise ConfigError("mesh: at least one Dirichlet potential face is required")
        return disc, State(c, solve_poisson(disc, c), 0.0)


@dataclass
class ConvergenceConfig:
    scheme: str
    rule: str
    levels: list
    t_end: float
    beta: float
    newton: Any
    min_order: float
    temporal: Optional[dict]


@dataclass
class NanoporeConfig:
    scenario: Any
    voltages: list
    steady: dict
    newton: Any
    checks: dict = field(default_factory=lambda: dict(CHECK_KEYS))


def _parse_simulation(d: dict, base_dir: Path) -> SimulationConfig:
    d = _check_keys(d, {"schema_version": ..., "kind": ..., "name": "", "mesh": ..., "model": ..., "initial": ...,
                        "time": ..., "newton": None, "output": None, "assertions": None}, "config")
    mesh = d["mesh"]
    if not isinstance(mesh, dict) or mesh.get("type") not in ("box", "file"):
        raise ConfigError("mesh.type must be 'box' or 'file'")
    if mesh["type"] == "box":
        mesh = _check_keys(mesh, {"type": ..., "lower": ..., "upper": ..., "n": ..., "dirichlet": None}, "mesh")
        for key in ("lower", "upper"):
            if not isinstance(mesh[key], list) or len(mesh[key]) not in (2, 3):
                raise ConfigError(f"mesh.{key}: expected a list of 2 or 3 numbers")
            mesh[key] = [_number(v, f"mesh.{key}") for v in mesh[key]]
        n = mesh["n"]
        n = [n] * len(mesh["lower"]) if isinstance(n, int) else n
        if not isinstance(n, list) or len(n) != len(mesh["lower"]):
            raise ConfigError("mesh.n: expected an integer or one integer per axis")
        mesh["n"] = [_int(v, "mesh.n", 1) for v in n]
        if mesh["dirichlet"] is not None:
            compile_expression(mesh["dirichlet"])
    else:
        mesh = _check_keys(mesh, {"type": ..., "path": ...}, "mesh")
        p = Path(mesh["path"])
        if not (p if p.is_absolute() else base_dir / p).exists():
            raise ConfigError(f"mesh.path: file {mesh['path']!r} does not exist")
    model = _check_keys(d["model"], {"species": ..., "a0": ..., "kappa": ..., "chi": ..., "epsilon": ...,
                                     "rho_f": 0.0, "psi_dirichlet": 0.0, "psi_neumann": 0.0}, "model")
    species = _species(model["species"], "model.species")
    model["a0"] = _number(model["a0"], "model.a0", positive=True)
    model["kappa"] = _number(model["kappa"], "model.kappa", positive=True)
    model["chi"] = _number(model["chi"], "model.chi", nonneg=True)
    for key in ("epsilon", "rho_f", "psi_dirichlet", "psi_neumann"):
        if isinstance(model[key], str):
            compile_expression(model[key])
    initial = _check_keys(d["initial"], {"concentrations": ...}, "initial")["concentrations"]
    if not isinstance(initial, list) or len(initial) != len(species):
        raise ConfigError("initial.concentrations: one entry per species is required")
    time = _check_keys(d["time"], {"scheme": ..., "dt": ..., "t_end": ..., "beta": 2.0}, "time")
    if time["scheme"] not in ("I", "II"):
        raise ConfigError("time.scheme must be 'I' or 'II'")
    dt = _number(time["dt"], "time.dt", positive=True)
    t_end = _number(time["t_end"], "time.t_end", positive=True)
    if t_end < dt * (1 - 1e-12):
        raise ConfigError("time.t_end must be at least one time step")
    steps = round(t_end / dt)
    if abs(steps * dt - t_end) > 1e-9 * t_end:
        raise ConfigError("time.t_end must be a whole number of time steps")
    beta = _number(time["beta"], "time.beta")
    if not 1.0 <= beta <= 2.0:
        raise ConfigError("time.beta must lie in [1, 2]")
    out = _check_keys(d["output"] or {}, {"field_dump_every": 0}, "output")
    asserts = _check_keys(d["assertions"] or {}, {"mass": True, "energy": True, "positivity": True}, "assertions")
    for k, v in asserts.items():
        if not isinstance(v, bool):
            raise ConfigError(f"assertions.{k}: expected true or false")
    return SimulationConfig(mesh, model, species, initial, time["scheme"], dt, t_end, beta, parse_newton(d["newton"]),
                            _int(out["field_dump_every"], "output.field_dump_every"), asserts, base_dir)


def _parse_convergence(d: dict) -> ConvergenceConfig:
    from .scenarios import DT_H10, DT_H2

    d = _check_keys(d, {"schema_version": ..., "kind": ..., "name": "", "scheme": ..., "rule": ..., "levels": ...,
                        "t_end": 0.1, "beta": 2.0, "newton": None, "min_order": 1.8, "temporal": None}, "config")
    if d["scheme"] not in ("I", "II"):
        raise ConfigError("scheme must be 'I' or 'II'")
    if d["rule"] not in (DT_H2, DT_H10):
        raise ConfigError(f"rule must be {DT_H2!r} or {DT_H10!r}")
    if not isinstance(d["levels"], list):
        raise ConfigError("levels: expected a list of mesh counts")
    levels = [_int(v, "levels", 1) for v in d["levels"]]
    if levels != sorted(set(levels)):
        raise ConfigError("levels must be strictly increasing")
    temporal = None
    if d["temporal"] is not None:
        temporal = _check_keys(d["temporal"], {"n": ..., "steps": ..., "reference_steps": ...}, "temporal")
        temporal["n"] = _int(temporal["n"], "temporal.n", 1)
        temporal["steps"] = [_int(v, "temporal.steps", 1) for v in temporal["steps"]]
        temporal["reference_steps"] = _int(temporal["reference_steps"], "temporal.reference_steps", 1)
    beta = _number(d["beta"], "beta")
    if not 1.0 <= beta <= 2.0:
        raise ConfigError("beta must lie in [1, 2]")
    return ConvergenceConfig(d["scheme"], d["rule"], levels, _number(d["t_end"], "t_end", positive=True), beta,
                             parse_newton(d["newton"]), _number(d["min_order"], "min_order"), temporal)


STEADY_KEYS = {"dt0": 0.01, "growth": 2.0, "dt_max": 0.1, "tol": 1e-9, "max_steps": 2000}
# rectification: None, "symmetric" (r == 1) or "asymmetric" (r2 > r1 > 0, |r2 - 1| > |r1 - 1|)
CHECK_KEYS = {"flux_balance": True, "selectivity": False, "rectification": None}


def _parse_nanopore(d: dict) -> NanoporeConfig:
    from .scenarios import NanoporeScenario

    d = _check_keys(d, {"schema_version": ..., "kind": ..., "name": "", "mesh_n": [8, 8, 16], "a0": 0.3,
                        "kappa": 0.001, "chi": 5.0, "species": None, "bulk": [0.1, 0.1, 0.2],
                        "membrane": [0.625, 1.125], "pore_half_width": 0.25, "eps_membrane": 2.0,
                        "symmetric_dielectric": False, "beta": 2.0, "voltages": ..., "steady": None,
                        "newton": None, "checks": None}, "config")
    species = _species(d["species"], "species") if d["species"] is not None else None
    if not isinstance(d["voltages"], list) or not d["voltages"]:
        raise ConfigError("voltages: expected a non-empty list")
    volts = [_number(v, "voltages") for v in d["voltages"]]
    if not isinstance(d["mesh_n"], list) or len(d["mesh_n"]) != 3:
        raise ConfigError("mesh_n: expected three integers")
    if isinstance(d["mesh_n"][2], int) and d["mesh_n"][2] % 2:
        raise ConfigError("mesh_n: the axial count must be even (the mesh is mirrored in z = 1)")
    if not isinstance(d["bulk"], list):
        raise ConfigError("bulk: expected a list of concentrations")
    kw = dict(
        n=tuple(_int(v, "mesh_n", 1) for v in d["mesh_n"]),
        a0=_number(d["a0"], "a0", positive=True),
        kappa=_number(d["kappa"], "kappa", positive=True),
        chi=_number(d["chi"], "chi", nonneg=True),
        bulk=tuple(_number(v, "bulk", positive=True) for v in d["bulk"]),
        membrane=tuple(_number(v, "membrane") for v in d["membrane"]),
        pore_half_width=_number(d["pore_half_width"], "pore_half_width", positive=True),
        eps_membrane=_number(d["eps_membrane"], "eps_membrane", positive=True),
        symmetric_dielectric=bool(d["symmetric_dielectric"]),
        beta=_number(d["beta"], "beta"),
    )
    if species is not None:
        kw["species"] = tuple(species)
    n_species = len(kw.get("species", NanoporeScenario.species))
    if len(kw["bulk"]) != n_species:
        raise ConfigError("bulk: one concentration per species is required")
    steady = _check_keys(d["steady"] or {}, STEADY_KEYS, "steady")
    for k in ("dt0", "growth", "dt_max", "tol"):
        steady[k] = _number(steady[k], f"steady.{k}", positive=True)
    steady["max_steps"] = _int(steady["max_steps"], "steady.max_steps", 1)
    checks = _check_keys(d["checks"] or {}, CHECK_KEYS, "checks")
    for k in ("flux_balance", "selectivity"):
        if not isinstance(checks[k], bool):
            raise ConfigError(f"checks.{k}: expected true or false")
    if checks["rectification"] not in (None, "symmetric", "asymmetric"):
        raise ConfigError("checks.rectification must be null, 'symmetric' or 'asymmetric'")
    return NanoporeConfig(NanoporeScenario(**kw), volts, steady, parse_newton(d["newton"]), checks)


def load_config(path):
    """Read and validate a configuration file; raises :class:`ConfigError`."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_config(data, path.parent)


def parse_config(data: dict, base_dir: Path = Path(".")):
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    kind = data.get("kind")
    if kind == "simulation":
        return _parse_simulation(data, base_dir)
    if kind == "convergence":
        return _parse_convergence(data)
    if kind == "nanopore":
        return _parse_nanopore(data)
    raise ConfigError(f"kind must be one of {', '.join(KINDS)}")
