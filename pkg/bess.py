"""
Battery energy storage: SOC dynamics, operating limits and the Big-M
encoding of the discharge magnitude p_d = max(0, -p_cd).

Battery quantities stay in kW / kWh; SOC is a fraction of capacity.
"""

from dataclasses import dataclass


@dataclass(frozen=True)
class BessParams:
    q_bat: float          # kWh
    c_r: float            # kW
    d_r: float            # kW
    eta: float = 0.0
    rho: float = 1.0
    e_minus: float = 0.25
    e_plus: float = 1.0
    soc0: float = 0.25
    tau: float = 0.25     # hours

    def validate(self):
        if not (0.0 <= self.e_minus <= self.soc0 <= self.e_plus <= 1.0):
            raise ValueError(
                f"SOC bounds must satisfy 0 <= e_minus <= soc0 <= e_plus <= 1 "
                f"(got {self.e_minus}, {self.soc0}, {self.e_plus})"
            )
        if self.q_bat <= 0 or self.c_r <= 0 or self.d_r <= 0:
            raise ValueError("capacity and rate limits must be positive")
        if not 0.0 <= self.eta < 1.0:
            raise ValueError(f"energy decay rate eta={self.eta} outside [0, 1)")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"round-trip efficiency rho={self.rho} outside (0, 1]")
        if self.tau <= 0:
            raise ValueError("sampling interval must be positive")
        return self

    @property
    def big_m(self):
        return 10.0 * max(self.c_r, self.d_r)

    @property
    def usable_kwh(self):
        return self.q_bat * (self.e_plus - self.e_minus)


EPSILON_KW = 1e-3


@dataclass
class BessMilpVars:
    """Variable handles for one window; lists are indexed by window offset."""
    p_cd: list
    soc: list             # soc[k] is the SOC after step k
    p_abs: list           # |p_cd| for the minimal-cycling tie-break
    p_d: list | None = None
    delta: list | None = None
    beta: list | None = None
    big_m: float = 0.0
    epsilon: float = EPSILON_KW


def soc_update(soc, p_cd, params):
    """SOC after one interval at charge(+)/discharge(-) power p_cd kW."""
    return (1.0 - params.eta) * soc + params.rho * p_cd * params.tau / params.q_bat


def allocate_bess_vars(params, window, model, include_bigm):
    m, length = window
    p_cd, soc, p_abs = [], [], []
    p_d = delta = beta = None
    if include_bigm:
        p_d, delta, beta = [], [], []
    for k in range(length):
        t = m + k
        p_cd.append(model.add_variable(f"p_cd_t{t}", -params.d_r, params.c_r))
        soc.append(model.add_variable(f"soc_t{t + 1}", params.e_minus, params.e_plus))
        p_abs.append(model.add_variable(f"p_abs_t{t}", 0.0, max(params.c_r, params.d_r)))
        if include_bigm:
            p_d.append(model.add_variable(f"p_d_t{t}", 0.0, params.d_r))
            delta.append(model.add_variable(f"delta_t{t}", 0.0, 1.0, binary=True))
            beta.append(model.add_variable(f"beta_t{t}", 0.0, 1.0, binary=True))
    return BessMilpVars(p_cd=p_cd, soc=soc, p_abs=p_abs, p_d=p_d, delta=delta, beta=beta,
                        big_m=params.big_m if include_bigm else 0.0)


def bess_constraints(params, window, model, include_bigm, soc_m=None, terminal_soc=False, bvars=None):
    """
    Emits the SOC recursion for window (m, W) and, with include_bigm, the Big-M block
    tying p_d to the discharge magnitude. Returns the BessMilpVars used.
    """
    m, length = window
    soc_start = params.soc0 if soc_m is None else soc_m
    if bvars is None:
        bvars = allocate_bess_vars(params, window, model, include_bigm)
    decay = 1.0 - params.eta
    gain = params.rho * params.tau / params.q_bat

    for k in range(length):
        t = m + k
        pcd, soc = bvars.p_cd[k], bvars.soc[k]
        # rate and SOC limits live in the variable bounds
        if k == 0:
            model.add_constraint({soc: 1.0, pcd: -gain}, "=", decay * soc_start, name=f"soc_t{t}")
        else:
            model.add_constraint({soc: 1.0, bvars.soc[k - 1]: -decay, pcd: -gain}, "=", 0.0, name=f"soc_t{t}")

        pabs = bvars.p_abs[k]
        model.add_constraint({pabs: 1.0, pcd: -1.0}, ">=", 0.0, name=f"pabs_pos_t{t}")
        model.add_constraint({pabs: 1.0, pcd: 1.0}, ">=", 0.0, name=f"pabs_neg_t{t}")

        if include_bigm:
            M, eps = bvars.big_m, bvars.epsilon
            pd, d, b = bvars.p_d[k], bvars.delta[k], bvars.beta[k]
            # discharging (delta = 1) means -p_cd >= eps
            model.add_constraint({pcd: -1.0, d: -M}, ">=", eps - M, name=f"bm_dis_t{t}")
            model.add_constraint({pcd: -1.0, d: -M}, "<=", 0.0, name=f"bm_chg_t{t}")
            model.add_constraint({pd: 1.0, d: -M}, "<=", 0.0, name=f"bm_pd_ub_t{t}")
            model.add_constraint({pd: 1.0, d: M}, ">=", 0.0, name=f"bm_pd_lb_t{t}")
            model.add_constraint({pcd: 1.0, pd: -1.0, d: M}, "<=", M, name=f"bm_abs_pos_t{t}")
            model.add_constraint({pcd: -1.0, pd: -1.0, d: M}, "<=", M, name=f"bm_abs_neg_t{t}")
            model.add_constraint({pcd: 1.0, pd: -1.0, d: -M, b: M}, ">=", -M, name=f"bm_sel_pos_t{t}")
            model.add_constraint({pcd: -1.0, pd: -1.0, d: -M, b: -M}, ">=", -2.0 * M, name=f"bm_sel_neg_t{t}")

    if terminal_soc and length:
        model.add_constraint({bvars.soc[-1]: 1.0}, ">=", params.soc0, name=f"soc_terminal_t{m + length}")
    return bvars
