"""
Radial branch-flow models.

- linear_pf_constraints: LinDistFlow rows for one time step of the MILP.
- solve_linear: exact solution of the lossless linear model.
- solve_nonlinear_sweep: backward/forward sweep of the full branch-flow
  equations, used as the plant and as the accuracy reference.

All quantities are per-unit; voltages are squared magnitudes.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from devices import cvr_load_eval, tap_ratio_table

log = logging.getLogger(__name__)

SWEEP_TOL = 1e-8
SWEEP_MAX_ITER = 100


class ConvergenceError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


@dataclass
class NodalSolution:
    v: dict                       # bus id -> squared magnitude
    P: dict                       # edge index -> sending-end active flow
    Q: dict
    l: dict                       # edge index -> squared current (0 for linear)
    iterations: int = 0
    trace: list = field(default_factory=list)

    def magnitudes(self):
        return {b: math.sqrt(v) for b, v in self.v.items()}

    @property
    def v_min(self):
        return math.sqrt(min(self.v.values()))

    @property
    def v_max(self):
        return math.sqrt(max(self.v.values()))

    def substation_injection(self, feeder):
        """(P, Q) drawn from the substation, per-unit."""
        edges = feeder.child_edges(feeder.root)
        return sum(self.P[k] for k in edges), sum(self.Q[k] for k in edges)


@dataclass
class Injections:
    """
    Per-bus loads and controllable injections at one time step.

    Loads follow the CVR model around (p0, q0); capacitor output is
    cap * v (a voltage-dependent shunt); regulator edges scale v by ratio.
    """
    p0: dict
    q0: dict
    cvr_p: dict
    cvr_q: dict
    p_dg: dict = field(default_factory=dict)
    q_dg: dict = field(default_factory=dict)
    cap: dict = field(default_factory=dict)
    ratio: dict = field(default_factory=dict)     # edge index -> A

    def net_load(self, bus, v):
        """Net (p, q) drawn at `bus` when its squared voltage is v."""
        p_l, q_l = cvr_load_eval(self.p0.get(bus, 0.0), self.q0.get(bus, 0.0),
                                 self.cvr_p.get(bus, 0.0), self.cvr_q.get(bus, 0.0), v)
        p = p_l - self.p_dg.get(bus, 0.0)
        q = q_l - self.q_dg.get(bus, 0.0) - self.cap.get(bus, 0.0) * v
        return p, q

    def affine_load(self, bus):
        """(a, b, c, d) with p = a + b*v and q = c + d*v."""
        p0, q0 = self.p0.get(bus, 0.0), self.q0.get(bus, 0.0)
        cp, cq = self.cvr_p.get(bus, 0.0), self.cvr_q.get(bus, 0.0)
        a = p0 - cp * p0 / 2.0 - self.p_dg.get(bus, 0.0)
        b = cp * p0 / 2.0
        c = q0 - cq * q0 / 2.0 - self.q_dg.get(bus, 0.0)
        d = cq * q0 / 2.0 - self.cap.get(bus, 0.0)
        return a, b, c, d


def build_injections(feeder, fleet, load_mult=1.0, pv_kw=None, action=None):
    """
    Injections for a load multiplier, DG active output (kW by DG bus) and an
    optional ControlAction (taps, capacitor switches, DG reactive setpoints).
    Without an action, taps sit at 0, capacitors are off and q_DG = 0.
    """
    pv_kw = pv_kw or {}
    inj = Injections(
        p0={b.id: b.p0 * load_mult for b in feeder.buses if b.has_load},
        q0={b.id: b.q0 * load_mult for b in feeder.buses if b.has_load},
        cvr_p={b.id: b.cvr_p for b in feeder.buses},
        cvr_q={b.id: b.cvr_q for b in feeder.buses},
    )
    for dg in fleet.dgs:
        inj.p_dg[dg.bus] = pv_kw.get(dg.bus, 0.0) / feeder.s_base
        inj.q_dg[dg.bus] = 0.0 if action is None else action.q_dg.get(dg.bus, 0.0)
    for cap in fleet.capacitors:
        on = 0 if action is None else action.cap.get(cap.bus, 0)
        inj.cap[cap.bus] = cap.q_rated * on
    for reg in fleet.regulators:
        tap = 0 if action is None else action.tap.get(reg.edge, 0)
        inj.ratio[reg.edge] = dict(tap_ratio_table(reg)).get(tap, (1.0 + reg.step * tap) ** 2)
    return inj


@dataclass
class StepVars:
    """MILP variable handles for the network at one time step."""
    v: dict
    P: dict
    Q: dict
    p_l: dict
    q_l: dict
    q_dg: dict
    q_c: dict
    p_dg: dict                    # bus id -> fixed per-unit DG output


def linear_pf_constraints(feeder, t, model, svars):
    """
    Active and reactive balance at every non-root bus plus the voltage drop
    on every line edge. Regulator edges are left to the device block and the
    substation is pinned through its variable bounds.
    """
    rows = []
    for bus in feeder.topology["order"][1:]:
        k_in = feeder.parent_edge(bus)
        p_bal = {svars.P[k_in]: 1.0}
        q_bal = {svars.Q[k_in]: 1.0}
        for k in feeder.child_edges(bus):
            p_bal[svars.P[k]] = -1.0
            q_bal[svars.Q[k]] = -1.0
        if bus in svars.p_l:
            p_bal[svars.p_l[bus]] = -1.0
            q_bal[svars.q_l[bus]] = -1.0
        if bus in svars.q_dg:
            q_bal[svars.q_dg[bus]] = 1.0
        if bus in svars.q_c:
            q_bal[svars.q_c[bus]] = 1.0
        rows.append(model.add_constraint(p_bal, "=", -svars.p_dg.get(bus, 0.0), name=f"pbal{bus}_t{t}"))
        rows.append(model.add_constraint(q_bal, "=", 0.0, name=f"qbal{bus}_t{t}"))

    for k, e in enumerate(feeder.edges):
        if e.kind != "line":
            continue
        coeffs = {svars.v[e.to_bus]: 1.0, svars.v[e.from_bus]: -1.0}
        if e.r:
            coeffs[svars.P[k]] = 2.0 * e.r
        if e.x:
            coeffs[svars.Q[k]] = 2.0 * e.x
        rows.append(model.add_constraint(coeffs, "=", 0.0, name=f"vdrop{k}_t{t}"))
    return rows


def _subtrees(feeder):
    order = feeder.topology["order"]
    children = {b: [] for b in order}
    for bus, parent in feeder.topology["parent"].items():
        children[parent].append(bus)
    sub = {}
    for bus in reversed(order):
        members = [bus]
        for c in children[bus]:
            members += sub[c]
        sub[bus] = members
    return sub


def solve_linear(feeder, injections):
    """
    Exact solution of the lossless model with CVR loads. The loads are affine
    in the local squared voltage, so the whole network is one linear system.
    """
    order = feeder.topology["order"]
    idx = {b: i for i, b in enumerate(order)}
    n = len(order)
    affine = {b: injections.affine_load(b) for b in order}
    sub = _subtrees(feeder)

    A = np.zeros((n, n))
    rhs = np.zeros(n)
    A[idx[feeder.root], idx[feeder.root]] = 1.0
    rhs[idx[feeder.root]] = feeder.v0
    for bus in order[1:]:
        k = feeder.parent_edge(bus)
        e = feeder.edges[k]
        i, j = idx[e.from_bus], idx[bus]
        if e.kind == "regulator":
            A[j, j] = 1.0
            A[j, i] = -injections.ratio.get(k, 1.0)
            continue
        A[j, j] += 1.0
        A[j, i] -= 1.0
        for member in sub[bus]:
            a, b, c, d = affine[member]
            A[j, idx[member]] += 2.0 * (e.r * b + e.x * d)
            rhs[j] -= 2.0 * (e.r * a + e.x * c)
    vec = np.linalg.solve(A, rhs)
    v = {b: float(vec[idx[b]]) for b in order}

    P, Q = {}, {}
    for bus in order[1:]:
        k = feeder.parent_edge(bus)
        P[k] = Q[k] = 0.0
        for member in sub[bus]:
            p, q = injections.net_load(member, v[member])
            P[k] += p
            Q[k] += q
    return NodalSolution(v=v, P=P, Q=Q, l={k: 0.0 for k in P}, iterations=1)


def solve_nonlinear_sweep(feeder, injections, tol=SWEEP_TOL, max_iter=SWEEP_MAX_ITER):
    """
    Backward/forward sweep on the branch-flow equations from a flat start.
    Loads are re-evaluated at the latest voltages every iteration. Stops when
    the largest squared-voltage update falls below `tol`.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    order = feeder.topology["order"]
    v = {b: feeder.v0 for b in order}
    l = {k: 0.0 for k in range(len(feeder.edges))}
    P, Q = dict(l), dict(l)
    trace = []

    for it in range(1, max_iter + 1):
        # backward: sending-end flows including each edge's own loss
        for bus in reversed(order[1:]):
            k = feeder.parent_edge(bus)
            e = feeder.edges[k]
            p, q = injections.net_load(bus, v[bus])
            for c in feeder.child_edges(bus):
                p += P[c]
                q += Q[c]
            P[k] = p + e.r * l[k]
            Q[k] = q + e.x * l[k]

        # forward
        delta = 0.0
        new_v = {feeder.root: feeder.v0}
        for bus in order[1:]:
            k = feeder.parent_edge(bus)
            e = feeder.edges[k]
            vi = new_v[e.from_bus]
            if e.kind == "regulator":
                vj = injections.ratio.get(k, 1.0) * vi
            else:
                vj = vi - 2.0 * (e.r * P[k] + e.x * Q[k]) + (e.r ** 2 + e.x ** 2) * l[k]
            if not math.isfinite(vj) or vj <= 0.0:
                trace.append(math.inf)
                raise ConvergenceError(f"voltage collapse at bus {bus} in iteration {it}", trace)
            new_v[bus] = vj
            delta = max(delta, abs(vj - v[bus]))
        v = new_v
        for bus in order[1:]:
            k = feeder.parent_edge(bus)
            l[k] = (P[k] ** 2 + Q[k] ** 2) / v[feeder.edges[k].from_bus]
        trace.append(delta)

        if delta < tol:
            return NodalSolution(v=v, P=dict(P), Q=dict(Q), l=dict(l), iterations=it, trace=trace)

    raise ConvergenceError(f"sweep did not converge in {max_iter} iterations (last update {trace[-1]:.3e})", trace)


def compare_pf(feeder, injections, tol=SWEEP_TOL, max_iter=SWEEP_MAX_ITER):
    """Voltage-magnitude error of the linear model against the sweep, per-unit."""
    lin = solve_linear(feeder, injections)
    nl = solve_nonlinear_sweep(feeder, injections, tol=tol, max_iter=max_iter)
    per_bus = {b: abs(math.sqrt(lin.v[b]) - math.sqrt(nl.v[b])) for b in lin.v}
    errors = list(per_bus.values())
    return {
        "max_error": max(errors),
        "mean_error": sum(errors) / len(errors),
        "per_bus": per_bus,
        "iterations": nl.iterations,
        "linear": lin,
        "nonlinear": nl,
    }
