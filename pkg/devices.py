"""
Voltage-control device models and their MILP constraint blocks.

Binary-times-voltage products (regulator ratio, switched capacitor) are
linearized exactly with the four-inequality envelope over the voltage band:
for u in {0, 1} and v in [V_MIN, V_MAX], w = u*v is the unique point
satisfying all four bounds.
"""

import math
from dataclasses import dataclass

# operating band on squared voltage magnitudes
V_MIN = 0.9025
V_MAX = 1.1025


class InfeasibleProfileError(ValueError):
    """DG active output exceeds its inverter rating."""


@dataclass(frozen=True)
class Regulator:
    edge: int
    taps: tuple = tuple(range(-16, 17))
    step: float = 0.00625

    @property
    def B(self):
        return [b for _, b in tap_ratio_table(self)]


@dataclass(frozen=True)
class CapBank:
    bus: int
    q_rated: float


@dataclass(frozen=True)
class SmartDG:
    bus: int
    s_rated: float
    p_profile_ref: str = ""


def tap_ratio_table(reg):
    """[(tap, A)] with A = (1 + step*tap)^2, the squared-voltage ratio."""
    return [(t, (1.0 + reg.step * t) ** 2) for t in reg.taps]


def reduced_taps(reg, count):
    """
    Copy of `reg` restricted to `count` evenly spaced positions over its full
    range. Tap 0 is kept whenever the range is symmetric and count is odd.
    """
    taps = sorted(reg.taps)
    if count is None or count >= len(taps):
        return reg
    if count < 2:
        chosen = [0] if 0 in taps else [taps[len(taps) // 2]]
    else:
        lo, hi = taps[0], taps[-1]
        chosen = sorted({round(lo + (hi - lo) * k / (count - 1)) for k in range(count)})
    return Regulator(edge=reg.edge, taps=tuple(chosen), step=reg.step)


def product_envelope(model, w, u, v, scale=1.0, v_min=V_MIN, v_max=V_MAX, name=""):
    """
    Four inequalities forcing w = scale * u * v for binary u and v in [v_min, v_max].
    Returns the constraint handles.
    """
    s = scale
    return [
        model.add_constraint({w: 1.0, u: -s * v_max}, "<=", 0.0, name=f"{name}_ub_u"),
        model.add_constraint({w: 1.0, u: -s * v_min}, ">=", 0.0, name=f"{name}_lb_u"),
        model.add_constraint({w: 1.0, v: -s, u: -s * v_min}, "<=", -s * v_min, name=f"{name}_ub_v"),
        model.add_constraint({w: 1.0, v: -s, u: -s * v_max}, ">=", -s * v_max, name=f"{name}_lb_v"),
    ]


def regulator_constraints(reg, t, model, v_i, v_j, u, w):
    """
    One-hot tap selection and v_j = sum_k B_k * (u_k * v_i).

    `u` and `w` are lists of variable handles aligned with `reg.taps`.
    """
    tag = f"reg{reg.edge}_t{t}"
    rows = [model.add_constraint({uk: 1.0 for uk in u}, "=", 1.0, name=f"{tag}_onehot")]
    model.add_one_hot(u)
    for k, (uk, wk) in enumerate(zip(u, w)):
        rows += product_envelope(model, wk, uk, v_i, name=f"{tag}_w{k}")
    coeffs = {wk: -b for wk, b in zip(w, reg.B)}
    coeffs[v_j] = 1.0
    rows.append(model.add_constraint(coeffs, "=", 0.0, name=f"{tag}_ratio"))
    return rows


def capacitor_constraints(cap, t, model, v, u, q_c):
    """q_C = q_rated * u * v, exact for binary u."""
    return product_envelope(model, q_c, u, v, scale=cap.q_rated, name=f"cap{cap.bus}_t{t}")


def inverter_q_bounds(s_rated, p_t):
    """Reactive capability at active output p_t (both per-unit)."""
    if p_t > s_rated * (1.0 + 1e-12):
        raise InfeasibleProfileError(f"DG output {p_t:.6f} pu exceeds rating {s_rated:.6f} pu")
    q_max = math.sqrt(max(s_rated * s_rated - p_t * p_t, 0.0))
    return -q_max, q_max


def cvr_load_eval(p0, q0, cvr_p, cvr_q, v):
    """Load drawn at squared voltage v."""
    p_l = p0 + cvr_p * (p0 / 2.0) * (v - 1.0)
    q_l = q0 + cvr_q * (q0 / 2.0) * (v - 1.0)
    return p_l, q_l


def cvr_load_constraints(bus, t, model, v, p_l, q_l, mult=1.0, cvr_p=None, cvr_q=None):
    """
    CVR load rows for one load bus at step t. `mult` scales the peak load;
    cvr_p / cvr_q override the bus coefficients for this step when given.
    """
    p0, q0 = bus.p0 * mult, bus.q0 * mult
    cp = bus.cvr_p if cvr_p is None else cvr_p
    cq = bus.cvr_q if cvr_q is None else cvr_q
    # p_L - cp*p0/2 * v = p0 - cp*p0/2
    return [
        model.add_constraint({p_l: 1.0, v: -cp * p0 / 2.0}, "=", p0 - cp * p0 / 2.0, name=f"pl{bus.id}_t{t}"),
        model.add_constraint({q_l: 1.0, v: -cq * q0 / 2.0}, "=", q0 - cq * q0 / 2.0, name=f"ql{bus.id}_t{t}"),
    ]
