"""
Solver-agnostic MILP container and the LP-format interchange writer.

Variables and constraints are addressed by integer handles (their insertion
index), so every export and every solve sees them in the same order.
"""

import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

SENSES = {"<=": "<=", "≤": "<=", "=": "=", "==": "=", ">=": ">=", "≥": ">="}

_NAME_BAD_CHARS = re.compile(r"[^A-Za-z0-9_.]")


class ModelError(ValueError):
    """Invalid model-building call."""


@dataclass(frozen=True)
class Variable:
    name: str
    lb: float
    ub: float
    binary: bool = False


@dataclass(frozen=True)
class Constraint:
    coeffs: dict
    sense: str
    rhs: float
    name: str = ""


@dataclass
class Solution:
    status: str
    objective: float = math.nan
    values: np.ndarray | None = None
    stats: dict = field(default_factory=dict)
    reduced_costs: tuple | None = None       # (lower, upper) bound marginals, LP engines only

    @property
    def ok(self):
        return self.status == "optimal"

    def __getitem__(self, handle):
        return float(self.values[handle])

    def value(self, handle):
        return float(self.values[handle])


class MilpModel:
    def __init__(self, name="model"):
        self.name = name
        self.variables = []
        self.constraints = []
        self.objective = {}
        self.one_hot_groups = []
        self._names = {}

    # --- building ---

    def add_variable(self, name, lb=0.0, ub=math.inf, binary=False):
        if name in self._names:
            raise ModelError(f"duplicate variable name {name!r}")
        lb, ub = float(lb), float(ub)
        if binary and not (0.0 <= lb <= ub <= 1.0):
            raise ModelError(f"binary {name!r} has bounds [{lb}, {ub}] outside [0, 1]")
        if lb > ub:
            raise ModelError(f"variable {name!r} has lb {lb} > ub {ub}")
        handle = len(self.variables)
        self.variables.append(Variable(name, lb, ub, bool(binary)))
        self._names[name] = handle
        return handle

    def _check_handles(self, coeffs, what):
        for h, a in coeffs.items():
            if not isinstance(h, (int, np.integer)) or not 0 <= h < len(self.variables):
                raise ModelError(f"{what} references unknown variable handle {h!r}")
            if not math.isfinite(a):
                raise ModelError(f"{what} has non-finite coefficient {a!r} on {self.variables[h].name}")

    def add_constraint(self, coeffs, sense, rhs, name=""):
        if sense not in SENSES:
            raise ModelError(f"unknown constraint sense {sense!r}")
        coeffs = {int(h): float(a) for h, a in coeffs.items() if a != 0.0}
        if not coeffs:
            raise ModelError(f"constraint {name or len(self.constraints)!r} has no terms")
        self._check_handles(coeffs, f"constraint {name!r}")
        if not math.isfinite(rhs):
            raise ModelError(f"constraint {name!r} has non-finite rhs")
        self.constraints.append(Constraint(coeffs, SENSES[sense], float(rhs), name))
        return len(self.constraints) - 1

    def set_objective(self, coeffs, sense="minimize"):
        if sense != "minimize":
            raise ModelError("only minimization objectives are supported")
        coeffs = {int(h): float(a) for h, a in coeffs.items()}
        self._check_handles(coeffs, "objective")
        self.objective = coeffs
        return self.objective

    def add_objective_terms(self, coeffs):
        self._check_handles(coeffs, "objective")
        for h, a in coeffs.items():
            self.objective[int(h)] = self.objective.get(int(h), 0.0) + float(a)

    def add_one_hot(self, handles):
        """Registers a sum-to-one binary group for group branching."""
        handles = tuple(int(h) for h in handles)
        for h in handles:
            if not self.variables[h].binary:
                raise ModelError(f"one-hot member {self.variables[h].name!r} is not binary")
        self.one_hot_groups.append(handles)

    # --- queries ---

    def handle(self, name):
        try:
            return self._names[name]
        except KeyError:
            raise ModelError(f"unknown variable {name!r}")

    @property
    def num_variables(self):
        return len(self.variables)

    @property
    def binaries(self):
        return [h for h, v in enumerate(self.variables) if v.binary]

    def bounds(self):
        lb = np.array([v.lb for v in self.variables], dtype=float)
        ub = np.array([v.ub for v in self.variables], dtype=float)
        return lb, ub

    def cost_vector(self):
        c = np.zeros(len(self.variables))
        for h, a in self.objective.items():
            c[h] = a
        return c

    def matrices(self):
        """
        (A_ub, b_ub, A_eq, b_eq) as CSR matrices with >= rows negated into <=.
        Either pair is (None, None) when it has no rows.
        """
        n = len(self.variables)
        ub_rows, ub_cols, ub_vals, b_ub = [], [], [], []
        eq_rows, eq_cols, eq_vals, b_eq = [], [], [], []
        for con in self.constraints:
            if con.sense == "=":
                r = len(b_eq)
                for h, a in con.coeffs.items():
                    eq_rows.append(r); eq_cols.append(h); eq_vals.append(a)
                b_eq.append(con.rhs)
            else:
                sign = 1.0 if con.sense == "<=" else -1.0
                r = len(b_ub)
                for h, a in con.coeffs.items():
                    ub_rows.append(r); ub_cols.append(h); ub_vals.append(sign * a)
                b_ub.append(sign * con.rhs)
        A_ub = sparse.csr_matrix((ub_vals, (ub_rows, ub_cols)), shape=(len(b_ub), n)) if b_ub else None
        A_eq = sparse.csr_matrix((eq_vals, (eq_rows, eq_cols)), shape=(len(b_eq), n)) if b_eq else None
        return A_ub, (np.array(b_ub) if b_ub else None), A_eq, (np.array(b_eq) if b_eq else None)

    def max_violation(self, values):
        """Largest constraint or bound violation of a candidate point."""
        x = np.asarray(values, dtype=float)
        worst = 0.0
        for con in self.constraints:
            lhs = sum(a * x[h] for h, a in con.coeffs.items())
            if con.sense == "<=":
                worst = max(worst, lhs - con.rhs)
            elif con.sense == ">=":
                worst = max(worst, con.rhs - lhs)
            else:
                worst = max(worst, abs(lhs - con.rhs))
        lb, ub = self.bounds()
        worst = max(worst, float(np.max(lb - x, initial=0.0)), float(np.max(x - ub, initial=0.0)))
        return worst

    def objective_value(self, values):
        return float(sum(a * values[h] for h, a in self.objective.items()))


# --- LP interchange format ---

def _lp_names(model):
    names, used = [], set()
    for h, var in enumerate(model.variables):
        name = _NAME_BAD_CHARS.sub("_", var.name) or f"x{h}"
        if name[0].isdigit() or name[0] in ".eE":
            name = f"x_{name}"
        if name in used:
            name = f"{name}_h{h}"
        used.add(name)
        names.append(name)
    return names


def _num(a):
    return repr(float(a))


def _fmt_terms(coeffs, names, per_line=6):
    parts = []
    for k, (h, a) in enumerate(sorted(coeffs.items())):
        sign = "-" if a < 0 else "+"
        term = f"{sign} {_num(abs(a))} {names[h]}"
        if k and k % per_line == 0:
            term = "\n   " + term
        parts.append(term)
    text = " ".join(parts)
    return text[2:] if text.startswith("+ ") else text


def export_interchange(model, path):
    """
    Writes `model` in the LP text format (Minimize / Subject To / Bounds /
    Binaries / End). Ordering follows variable and constraint handles.
    """
    names = _lp_names(model)
    lines = [f"\\ Problem: {model.name}", "Minimize"]
    objective = {h: a for h, a in model.objective.items() if a != 0.0}
    if objective:
        lines.append(f" obj: {_fmt_terms(objective, names)}")
    else:
        lines.append(f" obj: 0 {names[0]}" if names else " obj:")

    lines.append("Subject To")
    for k, con in enumerate(model.constraints):
        label = f"c{k}"
        if con.name:
            label += "_" + _NAME_BAD_CHARS.sub("_", con.name)
        lines.append(f" {label}: {_fmt_terms(con.coeffs, names)} {con.sense} {_num(con.rhs)}")

    lines.append("Bounds")
    for h, var in enumerate(model.variables):
        n = names[h]
        if var.lb == var.ub:
            lines.append(f" {n} = {_num(var.lb)}")
        elif math.isinf(var.lb) and math.isinf(var.ub):
            lines.append(f" {n} free")
        else:
            lo = "-inf" if math.isinf(var.lb) else _num(var.lb)
            hi = "+inf" if math.isinf(var.ub) else _num(var.ub)
            lines.append(f" {lo} <= {n} <= {hi}")

    binaries = [names[h] for h in model.binaries]
    if binaries:
        lines.append("Binaries")
        for k in range(0, len(binaries), 8):
            lines.append(" " + " ".join(binaries[k:k + 8]))
    lines.append("End")

    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    return path
