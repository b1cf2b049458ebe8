"""Config-driven scenario runner and command line entry point.

A scenario is a JSON file that is schema-validated before any computation
runs.  Four modes are supported: ``propagate`` (chaos and Monte Carlo
moments of a parametric system), ``smpc`` (seeded closed-loop runs of the
stochastic predictive controller), ``estimate`` (sequential Bayesian refits
of a scalar parameter) and ``compare`` (side-by-side chaos-versus-Monte-
Carlo moment report).  Every run writes CSV trajectory artifacts plus a
JSON summary that echoes the effective configuration, including each field
that was filled in from a default.

System matrix entries may be numbers or polynomial expressions in the
uncertain parameters, for example ``"0.95 + 0.03*theta1"`` or
``"2*theta0^2"``.  Expressions are expanded into exact chaos coefficients,
so the total power of every entry must fit inside the basis degree.

Exit codes: 0 on success, 2 when the controller goes infeasible mid-run
with no plan to fall back on, 1 for configuration or runtime errors.
Errors are also written to stderr as a single JSON object.
"""

import argparse
import copy
import json
import re
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import multibasis, orthopoly, pce, propagate
from .chance import ChanceSpec, Polytope, boole_allocate
from .estimate import LikelihoodModel, filter_step
from .smpc import SmpcProblem, receding_horizon

SCHEMA_VERSION = "polychaos-scenario/1"
MODES = ("propagate", "smpc", "estimate", "compare")

_SUMMARY_VERSION = "polychaos-summary/1"

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema", "mode", "theta"],
    "additionalProperties": False,
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "mode": {"enum": list(MODES)},
        "theta": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["kind", "params"],
                "additionalProperties": False,
                "properties": {
                    "kind": {"enum": ["gaussian", "uniform", "gamma", "beta"]},
                    "params": {"type": "object"},
                },
            },
        },
        "degree": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "mc_samples": {"type": "integer", "minimum": 2},
        "steps": {"type": "integer", "minimum": 1},
        "horizon": {"type": "integer", "minimum": 1},
        "n_runs": {"type": "integer", "minimum": 1},
        "policy": {"enum": ["open_loop", "prestabilized"]},
        "system": {
            "type": "object",
            "required": ["kind", "n_x", "A", "x0"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["continuous", "discrete"]},
                "n_x": {"type": "integer", "minimum": 1},
                "n_u": {"type": "integer", "minimum": 0},
                "A": {"$ref": "#/$defs/entry_matrix"},
                "B": {"$ref": "#/$defs/entry_matrix"},
                "x0": {"$ref": "#/$defs/num_vector"},
                "t_final": {"type": "number", "exclusiveMinimum": 0},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "n_record": {"type": "integer", "minimum": 1},
            },
        },
        "inputs": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "number"}},
        },
        "weights": {
            "type": "object",
            "required": ["Q", "R"],
            "additionalProperties": False,
            "properties": {
                "Q": {"$ref": "#/$defs/num_matrix"},
                "R": {"$ref": "#/$defs/num_matrix"},
            },
        },
        "input_bounds": {
            "type": "object",
            "required": ["lo", "hi"],
            "additionalProperties": False,
            "properties": {
                "lo": {"$ref": "#/$defs/num_vector"},
                "hi": {"$ref": "#/$defs/num_vector"},
            },
        },
        "constraints": {
            "type": "object",
            "required": ["G", "d"],
            "additionalProperties": False,
            "properties": {
                "G": {"$ref": "#/$defs/num_matrix"},
                "d": {"$ref": "#/$defs/num_vector"},
            },
        },
        "chance": {
            "type": "object",
            "required": ["beta"],
            "additionalProperties": False,
            "properties": {
                "beta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "eps": {"type": "array", "minItems": 1, "items": {"type": "number"}},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
            },
        },
        "estimate": {
            "type": "object",
            "required": ["noise_std"],
            "additionalProperties": False,
            "properties": {
                "noise_std": {"type": "number", "exclusiveMinimum": 0},
                "forward": {"type": "string"},
                "observations": {"$ref": "#/$defs/num_vector"},
                "true_theta": {"type": "number"},
                "order": {"type": "integer", "minimum": 1},
                "n_samples": {"type": "integer", "minimum": 2},
            },
        },
        "output": {"type": "object", "additionalProperties": {"type": "string"}},
    },
    "$defs": {
        "entry": {"type": ["number", "string"]},
        "entry_matrix": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "array",
                "minItems": 1,
                "items": {"$ref": "#/$defs/entry"},
            },
        },
        "num_vector": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        "num_matrix": {
            "type": "array",
            "minItems": 1,
            "items": {"$ref": "#/$defs/num_vector"},
        },
    },
}

_ALWAYS_KEYS = {"schema", "mode", "theta", "degree", "seed", "output"}
_MODE_KEYS = {
    "propagate": _ALWAYS_KEYS | {"mc_samples", "system", "steps", "inputs"},
    "compare": _ALWAYS_KEYS | {"mc_samples", "system", "steps", "inputs"},
    "smpc": _ALWAYS_KEYS | {"system", "steps", "horizon", "n_runs", "weights",
                            "input_bounds", "constraints", "chance", "policy",
                            "solver"},
    "estimate": _ALWAYS_KEYS | {"estimate", "steps"},
}
_MODE_REQUIRED = {
    "propagate": ("system",),
    "compare": ("system",),
    "smpc": ("system", "horizon", "weights", "input_bounds"),
    "estimate": ("estimate",),
}
_OUTPUT_DEFAULTS = {
    "propagate": {"pce": "pce_moments.csv", "mc": "mc_moments.csv",
                  "summary": "summary.json"},
    "compare": {"report": "compare.csv", "summary": "summary.json"},
    "smpc": {"trace_prefix": "trace", "summary": "summary.json"},
    "estimate": {"trace": "filter_trace.csv", "summary": "summary.json"},
}


class ConfigError(ValueError):
    """Invalid scenario file; carries every violation, not just the first."""

    def __init__(self, violations):
        self.violations = list(violations)
        text = "; ".join(f"{v['path'] or '/'}: {v['message']}"
                         for v in self.violations)
        super().__init__(text)


class InfeasibleError(RuntimeError):
    """The controller failed mid-run with no plan left; exit code 2."""


# ---------------------------------------------------------------------------
# matrix-entry expressions


_TOKEN = re.compile(r"(?:(?P<num>(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)"
                    r"|(?P<var>theta\d*)"
                    r"|(?P<op>[-+*^]))")


def _tokenize(text):
    toks, pos = [], 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        match = _TOKEN.match(text, pos)
        if match is None:
            raise ValueError(f"unexpected character {text[pos]!r} in {text!r}")
        toks.append((match.lastgroup, match.group()))
        pos = match.end()
    return toks


def _var_index(name, n_theta, text):
    suffix = name[len("theta"):]
    if suffix == "":
        if n_theta != 1:
            raise ValueError(f"bare 'theta' is ambiguous with {n_theta} "
                             f"parameters in {text!r}")
        return 0
    k = int(suffix)
    if k >= n_theta:
        raise ValueError(f"{name!r} is out of range for {n_theta} "
                         f"parameter(s) in {text!r}")
    return k


def _parse_term(toks, i, n_theta, text):
    coef = 1.0
    powers = [0] * n_theta
    while True:
        if i >= len(toks) or toks[i][0] == "op":
            got = toks[i][1] if i < len(toks) else "end of expression"
            raise ValueError(f"expected a number or theta factor, got {got!r} "
                             f"in {text!r}")
        kind, val = toks[i]
        i += 1
        if kind == "num":
            coef *= float(val)
        else:
            k = _var_index(val, n_theta, text)
            power = 1
            if i < len(toks) and toks[i] == ("op", "^"):
                i += 1
                if i >= len(toks) or toks[i][0] != "num" or not toks[i][1].isdigit():
                    raise ValueError(f"'^' needs a nonnegative integer power "
                                     f"in {text!r}")
                power = int(toks[i][1])
                i += 1
            powers[k] += power
        if i < len(toks) and toks[i] == ("op", "*"):
            i += 1
            continue
        return coef, powers, i


def parse_entry(entry, n_theta):
    """Parse a matrix entry into a ``{power tuple: coefficient}`` map.

    Numbers pass through as constant terms.  Strings follow a restricted
    polynomial grammar: terms joined by ``+`` or ``-``, each term a ``*``
    separated product of numeric literals and parameter factors
    ``theta<k>`` (bare ``theta`` is accepted when there is exactly one
    parameter) with an optional integer power such as ``theta0^2``.
    """
    if isinstance(entry, bool) or not isinstance(entry, (int, float, str)):
        raise ValueError("matrix entries must be numbers or expression strings, "
                         f"got {type(entry).__name__}")
    if isinstance(entry, (int, float)):
        return {(0,) * n_theta: float(entry)}
    toks = _tokenize(entry)
    if not toks:
        raise ValueError(f"empty expression {entry!r}")
    poly = {}
    i = 0
    first = True
    while i < len(toks):
        sign = 1.0
        if toks[i][0] == "op" and toks[i][1] in "+-":
            if toks[i][1] == "-":
                sign = -1.0
            i += 1
        elif not first:
            raise ValueError(f"expected '+' or '-' before {toks[i][1]!r} "
                             f"in {entry!r}")
        first = False
        coef, powers, i = _parse_term(toks, i, n_theta, entry)
        key = tuple(powers)
        poly[key] = poly.get(key, 0.0) + sign * coef
    return poly


def _entry_power(poly):
    return max((sum(p) for p, c in poly.items() if c != 0.0), default=0)


def _entry_coeffs(poly, basis, offsets):
    """Exact chaos coefficients of a polynomial in the physical parameters.

    ``offsets[k] = (loc, scale)`` maps germ component k onto parameter k via
    theta_k = loc + scale * xi_k, so each theta factor is substituted before
    the germ monomials are projected.
    """
    n = basis.n_dims
    out = np.zeros(basis.size)
    for powers, coef in poly.items():
        germ_poly = {(0,) * n: coef}
        for k, p in enumerate(powers):
            loc, scale = offsets[k]
            for _ in range(p):
                grown = {}
                for exps, c in germ_poly.items():
                    if c == 0.0:
                        continue
                    grown[exps] = grown.get(exps, 0.0) + c * loc
                    up = exps[:k] + (exps[k] + 1,) + exps[k + 1:]
                    grown[up] = grown.get(up, 0.0) + c * scale
                germ_poly = grown
        for exps, c in germ_poly.items():
            if c != 0.0:
                out += c * multibasis.monomial_to_basis(basis, exps)
    return out


# ---------------------------------------------------------------------------
# parsing and validation


class ScenarioConfig:
    """Validated scenario description with every default filled in.

    ``defaults_applied`` maps JSON pointers to the values that were not in
    the file; it is excluded from equality so that re-serializing and
    re-parsing a config yields an equal object.
    """

    _FIELDS = ("mode", "theta", "degree", "seed", "mc_samples", "system",
               "steps", "inputs", "horizon", "n_runs", "weights",
               "input_bounds", "constraints", "chance", "policy", "solver",
               "estimate", "output")

    def __init__(self, data, defaults_applied):
        for name in self._FIELDS:
            setattr(self, name, data.get(name))
        self.defaults_applied = dict(defaults_applied)

    def __eq__(self, other):
        if not isinstance(other, ScenarioConfig):
            return NotImplemented
        return all(getattr(self, f) == getattr(other, f) for f in self._FIELDS)

    def __repr__(self):
        return f"ScenarioConfig(mode={self.mode!r}, degree={self.degree})"

    def to_dict(self):
        """JSON-ready dict; parsing it back gives an equal config."""
        out = {"schema": SCHEMA_VERSION}
        for name in self._FIELDS:
            value = getattr(self, name)
            if value is not None:
                out[name] = copy.deepcopy(value)
        return out


def parse_config(path):
    """Load and validate a scenario file.

    Raises :class:`ConfigError` listing all violations at once, each with a
    JSON-pointer path into the document.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError([{"path": "", "message": f"config file {str(path)!r} "
                                                   "does not exist"}])
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError([{"path": "", "message": f"not valid JSON: {err}"}])
    return parse_config_dict(data)


def parse_config_dict(data):
    """Validate an already-loaded scenario dict (see :func:`parse_config`)."""
    if not isinstance(data, dict):
        raise ConfigError([{"path": "", "message": "config must be a JSON object"}])
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(data),
                    key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        raise ConfigError([{"path": _pointer(e.absolute_path), "message": e.message}
                           for e in errors])
    data = copy.deepcopy(data)
    defaults = _fill_defaults(data)
    violations = _semantic_violations(data)
    if violations:
        raise ConfigError(violations)
    return ScenarioConfig(data, defaults)


def _pointer(path):
    return "".join(f"/{p}" for p in path)


def _fill_defaults(data):
    applied = {}

    def put(container, key, value, pointer):
        if key not in container:
            container[key] = copy.deepcopy(value)
            applied[pointer] = container[key]

    mode = data["mode"]
    put(data, "degree", 1 if mode == "estimate" else 3, "/degree")
    put(data, "seed", 0, "/seed")
    if mode in ("propagate", "compare"):
        put(data, "mc_samples", 100000, "/mc_samples")

    system = data.get("system")
    if isinstance(system, dict):
        if system.get("kind") == "continuous":
            put(system, "dt", 0.001, "/system/dt")
            put(system, "n_record", 10, "/system/n_record")
        elif system.get("kind") == "discrete":
            if "n_u" not in system:
                b = system.get("B")
                inferred = len(b[0]) if isinstance(b, list) and b else 0
                put(system, "n_u", inferred, "/system/n_u")
            if mode in ("propagate", "compare"):
                if "steps" not in data and isinstance(data.get("inputs"), list) \
                        and data["inputs"]:
                    put(data, "steps", len(data["inputs"]), "/steps")
                put(data, "steps", 10, "/steps")

    if mode == "smpc":
        put(data, "steps", 10, "/steps")
        put(data, "n_runs", 1, "/n_runs")
        put(data, "policy", "open_loop", "/policy")
        if "solver" not in data:
            data["solver"] = {}
        put(data["solver"], "tol", 1e-8, "/solver/tol")
        put(data["solver"], "max_iter", 50000, "/solver/max_iter")
        chance = data.get("chance")
        constraints = data.get("constraints")
        if isinstance(chance, dict) and "eps" not in chance \
                and isinstance(constraints, dict) \
                and isinstance(constraints.get("G"), list) and constraints["G"]:
            beta = chance.get("beta")
            if isinstance(beta, (int, float)) and 0.0 < beta < 1.0:
                spec = boole_allocate(float(beta), len(constraints["G"]))
                chance["eps"] = [float(e) for e in spec.eps]
                applied["/chance/eps"] = list(chance["eps"])

    if mode == "estimate":
        est = data.get("estimate")
        if isinstance(est, dict):
            put(est, "forward", "theta0", "/estimate/forward")
            put(est, "order", 2, "/estimate/order")
            put(est, "n_samples", 10000, "/estimate/n_samples")
            if "steps" not in data:
                obs = est.get("observations")
                if isinstance(obs, list) and obs:
                    put(data, "steps", len(obs), "/steps")
                else:
                    put(data, "steps", 10, "/steps")

    if "output" not in data:
        data["output"] = {}
    for key, value in _OUTPUT_DEFAULTS[mode].items():
        put(data["output"], key, value, f"/output/{key}")
    return applied


def _check_entry_matrix(rows, n_rows, n_cols, path, n_theta, degree, flag):
    if len(rows) != n_rows:
        flag(path, f"expected {n_rows} row(s), got {len(rows)}")
        return
    for i, row in enumerate(rows):
        if len(row) != n_cols:
            flag(f"{path}/{i}", f"expected {n_cols} column(s), got {len(row)}")
            continue
        for j, entry in enumerate(row):
            try:
                poly = parse_entry(entry, n_theta)
            except ValueError as err:
                flag(f"{path}/{i}/{j}", str(err))
                continue
            power = _entry_power(poly)
            if power > degree:
                flag(f"{path}/{i}/{j}", f"total power {power} exceeds basis "
                                        f"degree {degree}")


def _check_num_matrix(rows, n_rows, n_cols, path, flag):
    if len(rows) != n_rows:
        flag(path, f"expected {n_rows} row(s), got {len(rows)}")
        return
    for i, row in enumerate(rows):
        if len(row) != n_cols:
            flag(f"{path}/{i}", f"expected {n_cols} column(s), got {len(row)}")


def _semantic_violations(data):
    bad = []

    def flag(path, message):
        bad.append({"path": path, "message": message})

    mode = data["mode"]
    n_theta = len(data["theta"])
    degree = data["degree"]

    for i, spec in enumerate(data["theta"]):
        try:
            orthopoly.MeasureDescriptor.from_dict(spec)
        except KeyError as err:
            flag(f"/theta/{i}/params", f"missing parameter {err.args[0]!r} "
                                       f"for kind {spec['kind']!r}")
        except ValueError as err:
            flag(f"/theta/{i}", str(err))

    for key in data:
        if key not in _MODE_KEYS[mode]:
            flag(f"/{key}", f"field is not used in {mode} mode")
    for key in _MODE_REQUIRED[mode]:
        if key not in data:
            flag(f"/{key}", f"{mode} mode requires {key!r}")

    system = data.get("system")
    if isinstance(system, dict) and mode != "estimate":
        n_x = system["n_x"]
        kind = system["kind"]
        if len(system["x0"]) != n_x:
            flag("/system/x0", f"x0 has {len(system['x0'])} entries for "
                               f"{n_x} state(s)")
        _check_entry_matrix(system["A"], n_x, n_x, "/system/A", n_theta,
                            degree, flag)
        n_u = system.get("n_u", 0)
        if kind == "continuous":
            if mode == "smpc":
                flag("/system/kind", "smpc mode needs a discrete system")
            if n_x != 1:
                flag("/system/n_x", "continuous propagation supports a single state")
            if "t_final" not in system:
                flag("/system", "continuous systems require t_final")
            for key in ("B", "n_u"):
                if key in system:
                    flag(f"/system/{key}", "the continuous decay model has no "
                                           "input channel")
            if "inputs" in data:
                flag("/inputs", "the continuous decay model has no input channel")
            if "steps" in data:
                flag("/steps", "continuous systems use t_final and n_record")
        else:
            for key in ("t_final", "dt", "n_record"):
                if key in system:
                    flag(f"/system/{key}", "only continuous systems use this field")
            if "B" in system:
                if n_u < 1:
                    flag("/system/n_u", "B is given but n_u is 0")
                else:
                    _check_entry_matrix(system["B"], n_x, n_u, "/system/B",
                                        n_theta, degree, flag)
            elif n_u > 0:
                flag("/system/B", f"n_u={n_u} needs a B matrix")
            if mode == "smpc" and n_u < 1:
                flag("/system/n_u", "smpc mode needs at least one input")

    if "inputs" in data and mode in ("propagate", "compare") \
            and isinstance(system, dict) and system.get("kind") == "discrete":
        n_u = system.get("n_u", 0)
        if n_u < 1:
            flag("/inputs", "inputs need n_u >= 1 and a B matrix")
        else:
            for t, row in enumerate(data["inputs"]):
                if len(row) != n_u:
                    flag(f"/inputs/{t}", f"expected {n_u} entries, got {len(row)}")
                    break
        if "steps" in data and len(data["inputs"]) != data["steps"]:
            flag("/inputs", f"{len(data['inputs'])} input rows for "
                            f"{data['steps']} steps")

    if mode == "smpc" and isinstance(system, dict) \
            and system.get("kind") == "discrete":
        n_x = system["n_x"]
        n_u = system.get("n_u", 0)
        weights = data.get("weights")
        if isinstance(weights, dict):
            _check_num_matrix(weights["Q"], n_x, n_x, "/weights/Q", flag)
            if n_u >= 1:
                _check_num_matrix(weights["R"], n_u, n_u, "/weights/R", flag)
        bounds = data.get("input_bounds")
        if isinstance(bounds, dict) and n_u >= 1:
            sizes_ok = True
            for key in ("lo", "hi"):
                if len(bounds[key]) != n_u:
                    flag(f"/input_bounds/{key}", f"expected {n_u} entries, "
                                                 f"got {len(bounds[key])}")
                    sizes_ok = False
            if sizes_ok and any(lo > hi for lo, hi in zip(bounds["lo"], bounds["hi"])):
                flag("/input_bounds", "lo must not exceed hi")
        has_cons = "constraints" in data
        has_chance = "chance" in data
        if has_cons != has_chance:
            flag("/constraints" if has_cons else "/chance",
                 "state constraints need both 'constraints' and 'chance'")
        if has_cons:
            G = data["constraints"]["G"]
            d = data["constraints"]["d"]
            _check_num_matrix(G, len(G), n_x, "/constraints/G", flag)
            if len(d) != len(G):
                flag("/constraints/d", f"{len(d)} offsets for {len(G)} rows")
            if has_chance:
                chance = data["chance"]
                eps = chance.get("eps")
                if isinstance(eps, list):
                    if len(eps) != len(G):
                        flag("/chance/eps", f"{len(eps)} budgets for "
                                            f"{len(G)} rows")
                    elif any(e <= 0.0 or e >= 1.0 for e in eps) \
                            or abs(sum(eps) - (1.0 - chance["beta"])) > 1e-12:
                        flag("/chance/eps", "budgets must lie in (0, 1) and "
                             f"sum to 1 - beta = {1.0 - chance['beta']:.17g}")

    if mode == "estimate":
        if n_theta != 1:
            flag("/theta", "estimate mode tracks a single scalar parameter")
        est = data.get("estimate")
        if isinstance(est, dict):
            order = est["order"]
            if degree > order:
                flag("/degree", f"a degree-{degree} refit needs moments up to "
                                f"order {degree}, but order is {order}")
            try:
                parse_entry(est["forward"], 1)
            except ValueError as err:
                flag("/estimate/forward", str(err))
            has_obs = "observations" in est
            has_truth = "true_theta" in est
            if has_obs == has_truth:
                flag("/estimate", "give exactly one of 'observations' or "
                                  "'true_theta' (used to synthesize them)")
            if has_obs and "steps" in data \
                    and len(est["observations"]) != data["steps"]:
                flag("/steps", f"{data['steps']} steps but "
                               f"{len(est['observations'])} observations")
    return bad


# ---------------------------------------------------------------------------
# scenario execution


def _build_basis(cfg):
    measures = [orthopoly.MeasureDescriptor.from_dict(m) for m in cfg.theta]
    offsets = []
    families = []
    for measure in measures:
        germ, loc, scale = measure.standardized()
        offsets.append((loc, scale))
        families.append(orthopoly.build_family(germ, cfg.degree))
    return multibasis.total_degree_basis(families, cfg.degree), offsets


def _matrix_pce(rows, basis, offsets, n_theta):
    coeff_rows = [_entry_coeffs(parse_entry(entry, n_theta), basis, offsets)
                  for row in rows for entry in row]
    return pce.PceVector(np.array(coeff_rows), basis)


def _build_linear_system(cfg, basis, offsets):
    """Discrete parametric system from the config; autonomous systems get a
    zero input column so the propagation API stays uniform."""
    spec = cfg.system
    n_theta = len(cfg.theta)
    n_x = spec["n_x"]
    n_u = spec.get("n_u", 0)
    a_pce = _matrix_pce(spec["A"], basis, offsets, n_theta)
    if n_u >= 1:
        b_pce = _matrix_pce(spec["B"], basis, offsets, n_theta)
        return propagate.ParametricLinearSystem(a_pce, b_pce, n_x, n_u), n_u
    zeros = pce.PceVector(np.zeros((n_x, basis.size)), basis)
    return propagate.ParametricLinearSystem(a_pce, zeros, n_x, 1), 0


def _write_moment_csv(path, times, mean, var):
    n_x = mean.shape[1]
    cols = (["time"] + [f"mean_{i}" for i in range(n_x)]
            + [f"var_{i}" for i in range(n_x)])
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(len(times)):
            row = [times[k], *mean[k], *var[k]]
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _propagate_moments(cfg):
    """Chaos and Monte Carlo moments of the configured system.

    Returns ``(times, pce_mean, pce_var, mc)`` where the chaos moments have
    one row per recorded time and ``mc`` is the matching
    :class:`~polychaos.propagate.McSummary`.
    """
    basis, offsets = _build_basis(cfg)
    tensor = multibasis.triple_products(basis)
    spec = cfg.system
    x0 = np.asarray(spec["x0"], dtype=float)
    n_theta = len(cfg.theta)
    if spec["kind"] == "continuous":
        a_poly = parse_entry(spec["A"][0][0], n_theta)
        rate_row = -_entry_coeffs(a_poly, basis, offsets)
        ode = propagate.GalerkinOde(pce.PceVector(rate_row[None, :], basis),
                                    tensor)
        a0 = pce.dirac(basis, x0).coeffs
        times, states = propagate.galerkin_ode_integrate(
            ode, a0, spec["t_final"], dt=spec["dt"], n_record=spec["n_record"])
        pce_mean = states[:, :, 0]
        pce_var = (states[:, :, 1:] ** 2).sum(axis=2)
        mc = propagate.mc_propagate(ode, x0, times, cfg.mc_samples, cfg.seed)
    else:
        system, n_u = _build_linear_system(cfg, basis, offsets)
        if n_u >= 1 and cfg.inputs is not None:
            u_seq = np.asarray(cfg.inputs, dtype=float)
        else:
            u_seq = np.zeros((cfg.steps, system.n_u))
        expanded = propagate.expand_linear(system, tensor)
        x = expanded.stack(pce.dirac(basis, x0))
        means = [pce.mean(expanded.unstack(x))]
        variances = [pce.variance(expanded.unstack(x))]
        for u in u_seq:
            x = propagate.step(expanded, x, u)
            state = expanded.unstack(x)
            means.append(pce.mean(state))
            variances.append(pce.variance(state))
        times = np.arange(len(u_seq) + 1, dtype=float)
        pce_mean = np.asarray(means)
        pce_var = np.asarray(variances)
        mc = propagate.mc_propagate(system, x0, u_seq, cfg.mc_samples, cfg.seed)
    return times, pce_mean, pce_var, mc


def _run_propagate(cfg, out_dir, names):
    times, pce_mean, pce_var, mc = _propagate_moments(cfg)
    _write_moment_csv(out_dir / names["pce"], times, pce_mean, pce_var)
    mc.write_csv(out_dir / names["mc"])
    results = {
        "final_time": float(times[-1]),
        "pce_mean": [float(v) for v in pce_mean[-1]],
        "pce_variance": [float(v) for v in pce_var[-1]],
        "mc_mean": [float(v) for v in mc.mean[-1]],
        "mc_variance": [float(v) for v in mc.variance[-1]],
        "mc_stderr": [float(v) for v in mc.stderr[-1]],
    }
    return results, [names["pce"], names["mc"]]


def _run_compare(cfg, out_dir, names):
    times, pce_mean, pce_var, mc = _propagate_moments(cfg)
    mean_dev = np.abs(pce_mean - mc.mean)
    var_dev = np.abs(pce_var - mc.variance)
    n_x = pce_mean.shape[1]
    cols = ["time"]
    for i in range(n_x):
        cols += [f"pce_mean_{i}", f"mc_mean_{i}", f"mean_dev_{i}",
                 f"mean_stderr_{i}", f"pce_var_{i}", f"mc_var_{i}",
                 f"var_dev_{i}"]
    with open(out_dir / names["report"], "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(len(times)):
            row = [times[k]]
            for i in range(n_x):
                row += [pce_mean[k, i], mc.mean[k, i], mean_dev[k, i],
                        mc.stderr[k, i], pce_var[k, i], mc.variance[k, i],
                        var_dev[k, i]]
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    within = bool(np.all(mean_dev <= 4.0 * mc.stderr + 1e-300))
    results = {
        "max_abs_mean_deviation": float(mean_dev.max()),
        "max_abs_variance_deviation": float(var_dev.max()),
        "mean_within_4_stderr": within,
        "mc_samples": int(cfg.mc_samples),
    }
    return results, [names["report"]]


def _run_smpc(cfg, out_dir, names):
    basis, offsets = _build_basis(cfg)
    system, _ = _build_linear_system(cfg, basis, offsets)
    weights = cfg.weights
    polytope = chance_spec = None
    if cfg.constraints is not None:
        polytope = Polytope(np.asarray(cfg.constraints["G"], dtype=float),
                            np.asarray(cfg.constraints["d"], dtype=float))
        chance_spec = ChanceSpec(float(cfg.chance["beta"]),
                                 np.asarray(cfg.chance["eps"], dtype=float))
    prob = SmpcProblem(
        horizon=cfg.horizon,
        Q=np.asarray(weights["Q"], dtype=float),
        R=np.asarray(weights["R"], dtype=float),
        u_lo=np.asarray(cfg.input_bounds["lo"], dtype=float),
        u_hi=np.asarray(cfg.input_bounds["hi"], dtype=float),
        polytope=polytope,
        chance=chance_spec,
        policy=cfg.policy,
    )
    x0 = np.asarray(cfg.system["x0"], dtype=float)
    artifacts = []
    violations = 0
    fallback_steps = 0
    iteration_total = 0
    cost_total = 0.0
    statuses = {}
    for run in range(cfg.n_runs):
        try:
            trace = receding_horizon(prob, system, x0, cfg.steps,
                                     seed=cfg.seed + run,
                                     solver_tol=cfg.solver["tol"],
                                     solver_max_iter=cfg.solver["max_iter"])
        except RuntimeError as err:
            raise InfeasibleError(f"run {run}: {err}") from err
        name = f"{names['trace_prefix']}_{run:03d}.csv"
        trace.write_csv(out_dir / name)
        artifacts.append(name)
        violations += int(trace.violations.sum())
        fallback_steps += int(trace.fallbacks.sum())
        iteration_total += int(trace.iterations.sum())
        cost_total += float(trace.stage_costs.sum())
        for status in trace.statuses:
            statuses[status] = statuses.get(status, 0) + 1
    trials = cfg.n_runs * cfg.steps
    results = {
        "n_runs": int(cfg.n_runs),
        "steps": int(cfg.steps),
        "trials": trials,
        "violations": violations,
        "violation_rate": violations / trials,
        "fallback_steps": fallback_steps,
        "mean_stage_cost": cost_total / trials,
        "mean_solver_iterations": iteration_total / trials,
        "statuses": statuses,
    }
    if chance_spec is not None:
        eps_joint = 1.0 - chance_spec.beta
        results["epsilon_joint"] = eps_joint
        results["binomial_stderr"] = float(
            np.sqrt(eps_joint * (1.0 - eps_joint) / trials))
    return results, artifacts


def _run_estimate(cfg, out_dir, names):
    basis, offsets = _build_basis(cfg)
    loc, scale = offsets[0]
    row = loc * np.eye(basis.size)[0] \
        + scale * multibasis.monomial_to_basis(basis, (1,))
    posterior = pce.PceVector(row[None, :], basis)
    est = cfg.estimate
    fwd_poly = parse_entry(est["forward"], 1)

    def forward(thetas):
        thetas = np.asarray(thetas, dtype=float)
        out = np.zeros_like(thetas)
        for (power,), coef in fwd_poly.items():
            out = out + coef * thetas ** power
        return out

    likelihood = LikelihoodModel(forward, est["noise_std"])
    if "observations" in est:
        observations = np.asarray(est["observations"], dtype=float)
        truth = None
    else:
        truth = float(est["true_theta"])
        rng = np.random.default_rng(cfg.seed)
        observations = forward(np.full(cfg.steps, truth)) \
            + est["noise_std"] * rng.standard_normal(cfg.steps)

    prior_mean = float(pce.mean(posterior)[0])
    prior_var = float(pce.variance(posterior)[0])
    rows = []
    for t, y in enumerate(observations):
        posterior = filter_step(posterior, float(y), likelihood,
                                order=est["order"],
                                n_samples=est["n_samples"],
                                seed=cfg.seed + 1 + t)
        rows.append((t, float(y), float(pce.mean(posterior)[0]),
                     float(pce.variance(posterior)[0]),
                     float(posterior.targets.ess),
                     int(posterior.refit_converged)))
    with open(out_dir / names["trace"], "w") as fh:
        fh.write("step,observation,mean,variance,ess,refit_converged\n")
        for t, y, m, v, ess, ok in rows:
            fh.write(f"{t},{y!r},{m!r},{v!r},{ess!r},{ok}\n")
    results = {
        "updates": len(rows),
        "prior_mean": prior_mean,
        "prior_variance": prior_var,
        "posterior_mean": rows[-1][2],
        "posterior_variance": rows[-1][3],
        "min_ess": min(r[4] for r in rows),
        "all_refits_converged": bool(all(r[5] for r in rows)),
    }
    if truth is not None:
        results["true_theta"] = truth
    return results, [names["trace"]]


_RUNNERS = {
    "propagate": _run_propagate,
    "smpc": _run_smpc,
    "estimate": _run_estimate,
    "compare": _run_compare,
}


def run_scenario(cfg, out_dir, cli_overrides=None):
    """Execute a validated scenario and write its artifacts into ``out_dir``.

    Returns the summary dict that is also written as JSON.  Mid-run solver
    failure with nothing to fall back on raises :class:`InfeasibleError`;
    anything else propagates as-is.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results, artifacts = _RUNNERS[cfg.mode](cfg, out, cfg.output)
    summary = {
        "schema": _SUMMARY_VERSION,
        "mode": cfg.mode,
        "config": cfg.to_dict(),
        "defaults_applied": cfg.defaults_applied,
        "cli_overrides": dict(cli_overrides or {}),
        "artifacts": sorted(artifacts + [cfg.output["summary"]]),
        "results": results,
    }
    with open(out / cfg.output["summary"], "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _headline(summary):
    mode = summary["mode"]
    results = summary["results"]
    if mode == "propagate":
        tail = (f"mean(t={results['final_time']:g}) = "
                f"{results['pce_mean'][0]:.6g}")
    elif mode == "compare":
        tail = (f"max mean deviation {results['max_abs_mean_deviation']:.3g}, "
                f"max variance deviation "
                f"{results['max_abs_variance_deviation']:.3g}")
    elif mode == "smpc":
        tail = (f"violation rate {results['violation_rate']:.4g} over "
                f"{results['trials']} steps, {results['fallback_steps']} fallbacks")
    else:
        tail = (f"posterior mean {results['posterior_mean']:.6g}, "
                f"variance {results['posterior_variance']:.3g}")
    return f"{mode}: {len(summary['artifacts'])} artifact(s); {tail}"


def _emit_error(code, message, violations=None):
    payload = {"error": {"code": code, "message": message}}
    if violations:
        payload["error"]["violations"] = violations
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


def _add_common_flags(parser):
    parser.add_argument("--config", required=True, metavar="PATH",
                        help="scenario JSON file")
    parser.add_argument("--out", default=".", metavar="DIR",
                        help="directory for output artifacts (default: .)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--mc-samples", type=int, default=None,
                        dest="mc_samples",
                        help="override the Monte Carlo sample count "
                             "(importance samples in estimate mode)")
    parser.add_argument("--quiet", action="store_true",
                        help="suppress the one-line summary on stdout")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="polychaos",
        description="Run chaos-expansion scenarios described by JSON configs.")
    subparsers = parser.add_subparsers(dest="command", required=True,
                                       metavar="{propagate,smpc,estimate,compare}")
    help_text = {
        "propagate": "forward moment propagation (chaos + Monte Carlo)",
        "smpc": "seeded closed-loop stochastic MPC runs",
        "estimate": "sequential Bayesian refits of a scalar parameter",
        "compare": "side-by-side chaos-versus-Monte-Carlo report",
    }
    for mode in MODES:
        _add_common_flags(subparsers.add_parser(mode, help=help_text[mode]))
    args = parser.parse_args(argv)

    try:
        cfg = parse_config(args.config)
        if cfg.mode != args.command:
            raise ConfigError([{
                "path": "/mode",
                "message": f"config mode {cfg.mode!r} does not match the "
                           f"{args.command!r} subcommand",
            }])
        overrides = {}
        if args.seed is not None:
            cfg.seed = args.seed
            overrides["seed"] = args.seed
        if args.mc_samples is not None:
            if cfg.mode == "smpc":
                raise ConfigError([{
                    "path": "/mc_samples",
                    "message": "smpc mode does not sample moments; "
                               "--mc-samples has nothing to override",
                }])
            if cfg.mode == "estimate":
                cfg.estimate["n_samples"] = args.mc_samples
            else:
                cfg.mc_samples = args.mc_samples
            overrides["mc_samples"] = args.mc_samples
        summary = run_scenario(cfg, args.out, cli_overrides=overrides)
    except ConfigError as err:
        _emit_error("config", "invalid scenario configuration",
                    violations=err.violations)
        return 1
    except InfeasibleError as err:
        _emit_error("infeasible", str(err))
        return 2
    except Exception as err:  # noqa: BLE001 - process boundary
        _emit_error("runtime", f"{type(err).__name__}: {err}")
        return 1

    if not args.quiet:
        print(_headline(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
