"""Single-stage robust mixed-integer dispatch problem.

Builds the switching/dispatch MILP for one hour: linearized branch-flow
physics with big-M switching gates, octagonal thermal limits, fictitious
single-commodity flows enforcing a spanning forest over the energized
buses, and one dual value-to-go constraint per candidate transition model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolationError, ModelBuildError
from .network import Network, SystemState
from .transition import AmbiguitySet, enumerate_patterns, linearize

FEAS_TOL = 1e-6


@dataclass(frozen=True)
class StageProblem:
    """Inputs of one stage solve.

    ``value_next`` carries the weights approximating the next-stage value
    over fire-zone line features; ``None`` drops the value-to-go term
    entirely (terminal stage, or the myopic baseline).
    """

    net: Network
    state: SystemState
    ambiguity: AmbiguitySet | None = None
    value_next: object | None = None
    lam: float = 1.0
    big_m: float | None = None
    big_m_rad: float | None = None
    alpha_mode: str = "factorized"

    def __post_init__(self):
        if not (0.0 < self.lam <= 1.0):
            raise ContractViolationError("discount factor must lie in (0, 1]")
        if self.big_m_rad is not None and self.big_m_rad < self.net.n_buses:
            raise ContractViolationError("big_m_rad must be at least the bus count")
        if self.alpha_mode not in ("factorized", "enumerated"):
            raise ContractViolationError(f"unknown alpha_mode '{self.alpha_mode}'")


@dataclass
class DispatchSolution:
    """Full action vector of one stage, keyed by bus/line ids."""

    y_sw: dict
    z_sw: dict
    w_op: dict
    d: dict
    iota: dict
    f_p_plus: dict
    f_p_minus: dict
    f_q: dict
    v: dict
    p_sub: dict
    q_sub: dict
    dDp_plus: dict
    dDp_minus: dict
    dDq_plus: dict
    dDq_minus: dict
    f_rad: dict
    u: dict
    alpha: float
    objective: float

    def abs_flow(self, line_id: str) -> float:
        return self.f_p_plus[line_id] + self.f_p_minus[line_id]

    def abs_flows(self, net: Network) -> tuple[float, ...]:
        return tuple(self.abs_flow(l.id) for l in net.lines)


class _Builder:
    """Accumulates a sparse linear model with named rows."""

    def __init__(self):
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.integrality: list[int] = []
        self.obj: list[float] = []
        self.rows_i: list[int] = []
        self.rows_j: list[int] = []
        self.rows_v: list[float] = []
        self.row_lb: list[float] = []
        self.row_ub: list[float] = []
        self.row_names: list[str] = []

    def var(self, lb: float, ub: float, integer: bool = False, obj: float = 0.0) -> int:
        self.lb.append(lb)
        self.ub.append(ub)
        self.integrality.append(1 if integer else 0)
        self.obj.append(obj)
        return len(self.lb) - 1

    def row(self, coeffs: dict[int, float], lb: float, ub: float, name: str) -> None:
        i = len(self.row_lb)
        for j, v in coeffs.items():
            if v != 0.0:
                self.rows_i.append(i)
                self.rows_j.append(j)
                self.rows_v.append(v)
        self.row_lb.append(lb)
        self.row_ub.append(ub)
        self.row_names.append(name)


@dataclass
class StageModel:
    """Assembled model, maximization sense, plus variable bookkeeping."""

    problem: StageProblem
    c: np.ndarray
    A: sp.csr_matrix
    row_lb: np.ndarray
    row_ub: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    integrality: np.ndarray
    row_names: list[str]
    idx: dict = field(repr=False)

    @property
    def n_vars(self) -> int:
        return self.c.shape[0]


def voltage_big_m(net: Network, li: int) -> float:
    """Tight per-line disjunction constant for the voltage-drop pair."""
    l = net.lines[li]
    bounds = []
    for b in (net.bus_index[l.from_bus], net.bus_index[l.to_bus]):
        bus = net.buses[b]
        if bus.is_substation:
            bounds.append((bus.v_ref ** 2, bus.v_ref ** 2))
        else:
            bounds.append((bus.v_min_sq, bus.v_max_sq))
    spread = max(b[1] for b in bounds) - min(b[0] for b in bounds)
    return spread + 2.0 * (l.r + l.x) * l.f_max


_OCT = [
    (
        1.0 / math.tan((0.5 - e) * math.pi / 4.0),
        math.sin(e * math.pi / 4.0) - math.cos(e * math.pi / 4.0) / math.tan((0.5 - e) * math.pi / 4.0),
    )
    for e in (1, 2, 3, 4)
]


def pressure_lines(problem: StageProblem) -> set[int]:
    """Fire-zone lines whose |flow| the value-to-go term could reward.

    Splitting f = f+ - f- with overlap inflates the status*|flow| product
    only on lines with a negative next-stage weight; direction bits must
    stay binary there. Everywhere else overlap is never strictly
    profitable and any degenerate split is canonicalized after the solve.
    """
    if problem.value_next is None:
        return set()
    net, state = problem.net, problem.state
    theta = problem.value_next.theta
    out = set()
    for pos, li in enumerate(net.fire_idx):
        if state.avail[li] != 1 or state.fire[li]:
            continue
        max_beta = max(c.beta[li] for c in problem.ambiguity.candidates)
        if theta[pos] < -1e-12 and max_beta > 0.0:
            out.add(li)
    return out


def _structural_fixings(net: Network, state: SystemState):
    """Values implied by availability alone, independent of switching.

    Buses connected to a substation through available non-switchable lines
    are always energized and those lines always operate; buses unreachable
    through any available line are always isolated. Fixing them shrinks
    the branch-and-bound space without changing the feasible set.
    """
    # Backbone: components of available non-switchable lines around subs.
    parent = list(range(net.n_buses))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for li, l in enumerate(net.lines):
        if not l.switchable and state.avail[li] == 1:
            i, j = net.endpoints(li)
            parent[find(i)] = find(j)
    sub_roots = {find(bi) for bi in net.sub_idx}
    bus_energized = [find(bi) in sub_roots for bi in range(net.n_buses)]

    # Reachability through any available line (switches could close).
    reach = set(net.sub_idx)
    queue = list(net.sub_idx)
    while queue:
        b = queue.pop()
        for li in net.lines_at_bus[b]:
            if state.avail[li] != 1:
                continue
            i, j = net.endpoints(li)
            nxt = j if i == b else i
            if nxt not in reach:
                reach.add(nxt)
                queue.append(nxt)
    bus_unreachable = [bi not in reach for bi in range(net.n_buses)]
    return bus_energized, bus_unreachable


def _alpha_coefficients(problem: StageProblem, candidate_idx: int):
    """Per-line (status_coef, u_coef) of one candidate's value-to-go bound.

    Returns coefficients of alpha <= sum_l status_coef[l]*status_l +
    u_coef[l]*u_l over fire-zone lines. The factorized mode uses the
    independence identity directly; the enumerated mode reproduces the
    same bound from per-successor linearized probabilities (bounded
    enumeration, used for fidelity testing).
    """
    net, state = problem.net, problem.state
    theta = problem.value_next.theta
    cand = problem.ambiguity.candidates[candidate_idx]
    lam = problem.lam
    status_coef = {}
    u_coef = {}
    if problem.alpha_mode == "factorized":
        for pos, li in enumerate(net.fire_idx):
            live = 1.0 - state.fire[li]
            status_coef[li] = lam * theta[pos] * live * cand.gamma[li]
            u_coef[li] = -lam * theta[pos] * live * cand.beta[li]
        return status_coef, u_coef

    # Enumerated mode: alpha <= lam * sum_{s'} p_hat(s') * theta . phi(s').
    # phi_l(s') = alive_l(s') * status_l, p_hat affine in |f|; cross terms
    # status_l * |f_j| (l != j) cancel over the pattern sum and are dropped
    # after an exactness check.
    patterns = enumerate_patterns(net, state)
    lts = [linearize(net, state, p, cand) for p in patterns]
    for pos, li in enumerate(net.fire_idx):
        a0 = 0.0
        for p, lt in zip(patterns, lts):
            if li in p.survive:
                a0 += lt.c0
        status_coef[li] = lam * theta[pos] * a0
        for lj in net.fire_idx:
            coef = 0.0
            for p, lt in zip(patterns, lts):
                if li in p.survive:
                    coef += lt.c[lj]
            if lj == li:
                u_coef[li] = lam * theta[pos] * coef
            elif abs(theta[pos] * coef) > 1e-9:
                raise ModelBuildError(
                    f"enumerated value-to-go has non-vanishing cross term ({li},{lj})")
    for pos, li in enumerate(net.fire_idx):
        u_coef.setdefault(li, 0.0)
    return status_coef, u_coef


def build_stage(problem: StageProblem) -> StageModel:
    """Assemble the stage MILP (maximization sense)."""
    net, state = problem.net, problem.state
    costs = net.costs
    has_alpha = problem.value_next is not None
    if has_alpha and problem.ambiguity is None:
        raise ModelBuildError("value-to-go constraints require an ambiguity set")
    if has_alpha and len(problem.value_next.theta) != len(net.fire_idx):
        raise ModelBuildError(
            f"value function has {len(problem.value_next.theta)} weights, "
            f"expected one per fire-zone line ({len(net.fire_idx)})")

    m_rad = problem.big_m_rad if problem.big_m_rad is not None else float(net.n_buses)
    b = _Builder()

    p_sub = {bi: b.var(0.0, np.inf, obj=-costs.c_energy) for bi in net.sub_idx}
    q_sub = {bi: b.var(-np.inf, np.inf) for bi in net.sub_idx}
    fp = [b.var(0.0, l.f_max) for l in net.lines]
    fm = [b.var(0.0, l.f_max) for l in net.lines]
    fq = [b.var(-l.f_max, l.f_max) for l in net.lines]
    v = []
    for bus in net.buses:
        if bus.is_substation:
            v.append(b.var(bus.v_ref ** 2, bus.v_ref ** 2))
        else:
            v.append(b.var(bus.v_min_sq, bus.v_max_sq))
    slack_p_plus = [b.var(0.0, np.inf, obj=-costs.c_load_loss) for _ in net.buses]
    slack_p_minus = [
        b.var(0.0, state.demand_p[bi], obj=-costs.c_load_loss)
        for bi in range(net.n_buses)
    ]
    slack_q_plus = [b.var(0.0, np.inf, obj=-costs.c_load_loss) for _ in net.buses]
    slack_q_minus = [
        b.var(0.0, state.demand_q[bi], obj=-costs.c_load_loss)
        for bi in range(net.n_buses)
    ]
    # Switching deltas are driven to |z - z_prev| by their cost; direction
    # bits stay binary only where split overlap could pay off. Operational
    # flags and isolation indicators implied by availability alone are
    # pre-fixed; the remaining ones are forced integral by the isolation
    # and service rows once z and iota are integral.
    pressure = pressure_lines(problem)
    energized, unreachable = _structural_fixings(net, state)
    y = {li: b.var(0.0, 1.0, obj=-costs.c_switch) for li in net.sw_idx}
    z = {li: b.var(0.0, float(state.avail[li]), integer=True) for li in net.sw_idx}
    d = [b.var(0.0, 1.0, integer=(li in pressure)) for li in range(net.n_lines)]
    w = []
    for li, l in enumerate(net.lines):
        if l.switchable:
            w.append(z[li])
            continue
        i, j = net.endpoints(li)
        if state.avail[li] == 1 and energized[i] and energized[j]:
            w.append(b.var(1.0, 1.0))
        elif state.avail[li] == 0 or (unreachable[i] and unreachable[j]):
            w.append(b.var(0.0, 0.0))
        else:
            w.append(b.var(0.0, float(state.avail[li])))
    iota = []
    for bi, bus in enumerate(net.buses):
        if bus.is_substation or energized[bi]:
            iota.append(b.var(0.0, 0.0))
        elif unreachable[bi]:
            iota.append(b.var(1.0, 1.0))
        else:
            iota.append(b.var(0.0, 1.0, integer=True))
    frad_f = [b.var(0.0, m_rad) for _ in net.lines]
    frad_r = [b.var(0.0, m_rad) for _ in net.lines]
    frad_root = {bi: b.var(0.0, m_rad) for bi in net.sub_idx}

    u = {}
    alpha = None
    if has_alpha:
        for li in net.fire_idx:
            cap = net.lines[li].f_max
            if net.lines[li].switchable:
                u[li] = b.var(0.0, cap)
            else:
                u[li] = b.var(0.0, cap * float(state.avail[li]))
        alpha = b.var(-np.inf, np.inf, obj=1.0)

    # Power balance at every bus.
    for bi, bus in enumerate(net.buses):
        cp = {slack_p_plus[bi]: -1.0, slack_p_minus[bi]: 1.0}
        cq = {slack_q_plus[bi]: -1.0, slack_q_minus[bi]: 1.0}
        if bus.is_substation:
            cp[p_sub[bi]] = 1.0
            cq[q_sub[bi]] = 1.0
        for li in net.lines_at_bus[bi]:
            i, j = net.endpoints(li)
            sgn = 1.0 if j == bi else -1.0  # inflow at "to", outflow at "from"
            cp[fp[li]] = cp.get(fp[li], 0.0) + sgn
            cp[fm[li]] = cp.get(fm[li], 0.0) - sgn
            cq[fq[li]] = cq.get(fq[li], 0.0) + sgn
        b.row(cp, state.demand_p[bi], state.demand_p[bi], f"p_balance[{bus.id}]")
        b.row(cq, state.demand_q[bi], state.demand_q[bi], f"q_balance[{bus.id}]")

    # Isolation indicator: a non-substation bus is isolated exactly when no
    # incident line is operational.
    for bi, bus in enumerate(net.buses):
        if bus.is_substation:
            continue
        deg = len(net.lines_at_bus[bi])
        coeffs = {iota[bi]: float(deg)}
        for li in net.lines_at_bus[bi]:
            coeffs[w[li]] = coeffs.get(w[li], 0.0) + 1.0
        b.row(coeffs, 1.0, float(deg), f"isolation[{bus.id}]")

    # Voltage drop along operational lines (squared magnitudes).
    for li, l in enumerate(net.lines):
        i, j = net.endpoints(li)
        m_l = problem.big_m if problem.big_m is not None else voltage_big_m(net, li)
        base = {v[i]: 1.0, v[j]: -1.0, fp[li]: -2.0 * l.r, fm[li]: 2.0 * l.r, fq[li]: -2.0 * l.x}
        up = dict(base)
        up[w[li]] = up.get(w[li], 0.0) + m_l
        b.row(up, -np.inf, m_l, f"vdrop_up[{l.id}]")
        dn = {k: -c for k, c in base.items()}
        dn[w[li]] = dn.get(w[li], 0.0) + m_l
        b.row(dn, -np.inf, m_l, f"vdrop_dn[{l.id}]")

    # Flow gates: direction split plus operational-status limits.
    for li, l in enumerate(net.lines):
        b.row({fp[li]: 1.0, d[li]: -l.f_max}, -np.inf, 0.0, f"dir_plus[{l.id}]")
        b.row({fm[li]: 1.0, d[li]: l.f_max}, -np.inf, l.f_max, f"dir_minus[{l.id}]")
        b.row({fp[li]: 1.0, w[li]: -l.f_max}, -np.inf, 0.0, f"gate_plus[{l.id}]")
        b.row({fm[li]: 1.0, w[li]: -l.f_max}, -np.inf, 0.0, f"gate_minus[{l.id}]")
        b.row({fq[li]: 1.0, w[li]: -l.f_max}, -np.inf, 0.0, f"gate_q_up[{l.id}]")
        b.row({fq[li]: -1.0, w[li]: -l.f_max}, -np.inf, 0.0, f"gate_q_dn[{l.id}]")

    # Octagonal apparent-power limits.
    for li, l in enumerate(net.lines):
        for e, (cot_e, rhs_e) in enumerate(_OCT, start=1):
            for sgn, tag in ((1.0, "pos"), (-1.0, "neg")):
                b.row(
                    {fq[li]: sgn, fp[li]: -cot_e, fm[li]: cot_e},
                    -np.inf, rhs_e * l.f_max, f"octagon{e}_{tag}[{l.id}]",
                )

    # Switching logic.
    for pos, li in enumerate(net.sw_idx):
        zp = float(state.switch_status[pos])
        b.row({y[li]: 1.0, z[li]: 1.0}, zp, np.inf, f"switch_open[{net.lines[li].id}]")
        b.row({y[li]: 1.0, z[li]: -1.0}, -zp, np.inf, f"switch_close[{net.lines[li].id}]")

    # Non-switchable lines stay in service whenever both endpoints are
    # energized; only genuinely islanded segments may drop out.
    for li, l in enumerate(net.lines):
        if l.switchable or state.avail[li] == 0:
            continue
        i, j = net.endpoints(li)
        for bi in (i, j):
            if not net.buses[bi].is_substation:
                b.row({w[li]: 1.0, iota[bi]: 1.0}, 1.0, np.inf, f"service[{l.id},{net.buses[bi].id}]")

    # Radiality: fictitious single-commodity flow from a super root.
    inj = {frad_root[bi]: 1.0 for bi in net.sub_idx}
    for bi in range(net.n_buses):
        inj[iota[bi]] = inj.get(iota[bi], 0.0) + 1.0
    b.row(inj, float(net.n_buses), float(net.n_buses), "rad_injection")
    for bi, bus in enumerate(net.buses):
        coeffs = {iota[bi]: 1.0}
        if bus.is_substation:
            coeffs[frad_root[bi]] = 1.0
        for li in net.lines_at_bus[bi]:
            i, j = net.endpoints(li)
            sgn = 1.0 if j == bi else -1.0
            coeffs[frad_f[li]] = coeffs.get(frad_f[li], 0.0) + sgn
            coeffs[frad_r[li]] = coeffs.get(frad_r[li], 0.0) - sgn
        b.row(coeffs, 1.0, 1.0, f"rad_balance[{bus.id}]")
    for li, l in enumerate(net.lines):
        b.row({frad_f[li]: 1.0, w[li]: -m_rad}, -np.inf, 0.0, f"rad_cap_f[{l.id}]")
        b.row({frad_r[li]: 1.0, w[li]: -m_rad}, -np.inf, 0.0, f"rad_cap_r[{l.id}]")
    count = {w[li]: 1.0 for li in range(net.n_lines)}
    for bi in net.nonsub_idx:
        count[iota[bi]] = count.get(iota[bi], 0.0) + 1.0
    b.row(count, float(len(net.nonsub_idx)), float(len(net.nonsub_idx)), "rad_count")

    # Value to go: one dual constraint per candidate transition model,
    # linear through the exact status*|flow| product variables.
    if has_alpha:
        for li in net.fire_idx:
            l = net.lines[li]
            cap = l.f_max
            if l.switchable:
                b.row({u[li]: 1.0, z[li]: -cap}, -np.inf, 0.0, f"u_cap[{l.id}]")
                b.row({u[li]: 1.0, fp[li]: -1.0, fm[li]: -1.0}, -np.inf, 0.0, f"u_flow_up[{l.id}]")
                b.row({u[li]: 1.0, fp[li]: -1.0, fm[li]: -1.0, z[li]: -cap},
                      -cap, np.inf, f"u_flow_lo[{l.id}]")
            else:
                a = float(state.avail[li])
                b.row({u[li]: 1.0, fp[li]: -1.0, fm[li]: -1.0}, -np.inf, 0.0, f"u_flow_up[{l.id}]")
                b.row({u[li]: 1.0, fp[li]: -1.0, fm[li]: -1.0},
                      -cap * (1.0 - a), np.inf, f"u_flow_lo[{l.id}]")
        for ci in range(problem.ambiguity.n):
            status_coef, u_coef = _alpha_coefficients(problem, ci)
            coeffs = {alpha: 1.0}
            rhs = 0.0
            for li in net.fire_idx:
                if net.lines[li].switchable:
                    coeffs[z[li]] = coeffs.get(z[li], 0.0) - status_coef[li]
                else:
                    rhs += status_coef[li] * float(state.avail[li])
                coeffs[u[li]] = coeffs.get(u[li], 0.0) - u_coef[li]
            b.row(coeffs, -np.inf, rhs, f"value_to_go[cand{ci + 1}]")

    n = len(b.lb)
    A = sp.csr_matrix(
        (b.rows_v, (b.rows_i, b.rows_j)), shape=(len(b.row_lb), n)
    )
    idx = {
        "p_sub": p_sub, "q_sub": q_sub, "fp": fp, "fm": fm, "fq": fq, "v": v,
        "sp": slack_p_plus, "sm": slack_p_minus, "sqp": slack_q_plus, "sqm": slack_q_minus,
        "y": y, "z": z, "d": d, "w": w, "iota": iota,
        "frad_f": frad_f, "frad_r": frad_r, "frad_root": frad_root,
        "u": u, "alpha": alpha,
    }
    return StageModel(
        problem=problem,
        c=np.array(b.obj),
        A=A,
        row_lb=np.array(b.row_lb),
        row_ub=np.array(b.row_ub),
        lb=np.array(b.lb),
        ub=np.array(b.ub),
        integrality=np.array(b.integrality),
        row_names=b.row_names,
        idx=idx,
    )


def canonicalize_solution(model: StageModel, x: np.ndarray) -> np.ndarray:
    """Canonical representative of a solver solution, objective preserved.

    Removes direction-split overlap (never strictly profitable where the
    split was left continuous), aligns direction bits with the net flow,
    pins switching deltas to |z - z_prev|, and recomputes the
    status*|flow| products. Every adjusted variable has zero objective
    weight except y, which is already at its minimum whenever switching
    is costed.
    """
    net = model.problem.net
    state = model.problem.state
    idx = model.idx
    x = np.array(x, dtype=float)
    for li in range(net.n_lines):
        pf = x[idx["fp"][li]]
        mf = x[idx["fm"][li]]
        overlap = min(pf, mf)
        if overlap > 0.0:
            pf -= overlap
            mf -= overlap
            x[idx["fp"][li]] = pf
            x[idx["fm"][li]] = mf
        x[idx["d"][li]] = 1.0 if pf > 1e-12 else 0.0
    for pos, li in enumerate(net.sw_idx):
        z = round(x[idx["z"][li]])
        x[idx["z"][li]] = float(z)
        x[idx["y"][li]] = float(abs(z - state.switch_status[pos]))
    for li, uvar in idx["u"].items():
        l = net.lines[li]
        status = x[idx["z"][li]] if l.switchable else float(state.avail[li])
        x[uvar] = status * (x[idx["fp"][li]] + x[idx["fm"][li]])
    return x


def _rounded_binary(x: float, what: str) -> int:
    r = round(x)
    if abs(x - r) > 1e-4 or r not in (0, 1):
        raise ContractViolationError(f"{what} is not binary: {x}")
    return int(r)


def extract_solution(model: StageModel, x: np.ndarray, objective: float) -> DispatchSolution:
    net = model.problem.net
    idx = model.idx

    def nn(val: float) -> float:
        return 0.0 if -1e-9 < val < 1e-9 else float(val)

    f_rad = {}
    for li, l in enumerate(net.lines):
        f_rad[f"{l.from_bus}->{l.to_bus}"] = nn(x[idx["frad_f"][li]])
        f_rad[f"{l.to_bus}->{l.from_bus}"] = nn(x[idx["frad_r"][li]])
    for bi, var in idx["frad_root"].items():
        f_rad[f"root->{net.buses[bi].id}"] = nn(x[var])

    sol = DispatchSolution(
        y_sw={net.lines[li].id: _rounded_binary(x[var], "y_sw") for li, var in idx["y"].items()},
        z_sw={net.lines[li].id: _rounded_binary(x[var], "z_sw") for li, var in idx["z"].items()},
        w_op={l.id: _rounded_binary(x[idx["w"][li]], "w_op") for li, l in enumerate(net.lines)},
        d={l.id: _rounded_binary(x[idx["d"][li]], "d") for li, l in enumerate(net.lines)},
        iota={bus.id: _rounded_binary(x[idx["iota"][bi]], "iota") for bi, bus in enumerate(net.buses)},
        f_p_plus={l.id: nn(x[idx["fp"][li]]) for li, l in enumerate(net.lines)},
        f_p_minus={l.id: nn(x[idx["fm"][li]]) for li, l in enumerate(net.lines)},
        f_q={l.id: float(x[idx["fq"][li]]) for li, l in enumerate(net.lines)},
        v={bus.id: float(x[idx["v"][bi]]) for bi, bus in enumerate(net.buses)},
        p_sub={net.buses[bi].id: nn(x[var]) for bi, var in idx["p_sub"].items()},
        q_sub={net.buses[bi].id: float(x[var]) for bi, var in idx["q_sub"].items()},
        dDp_plus={bus.id: nn(x[idx["sp"][bi]]) for bi, bus in enumerate(net.buses)},
        dDp_minus={bus.id: nn(x[idx["sm"][bi]]) for bi, bus in enumerate(net.buses)},
        dDq_plus={bus.id: nn(x[idx["sqp"][bi]]) for bi, bus in enumerate(net.buses)},
        dDq_minus={bus.id: nn(x[idx["sqm"][bi]]) for bi, bus in enumerate(net.buses)},
        f_rad=f_rad,
        u={net.lines[li].id: nn(x[var]) for li, var in idx["u"].items()},
        alpha=float(x[idx["alpha"]]) if idx["alpha"] is not None else 0.0,
        objective=float(objective),
    )
    return sol


def stage_costs(net: Network, sol: DispatchSolution) -> dict:
    """Realized cost components of one stage (value-to-go excluded)."""
    purchase = net.costs.c_energy * sum(sol.p_sub.values())
    switching = net.costs.c_switch * sum(sol.y_sw.values())
    imbalance = (
        sum(sol.dDp_plus.values()) + sum(sol.dDp_minus.values())
        + sum(sol.dDq_plus.values()) + sum(sol.dDq_minus.values())
    )
    load_loss = net.costs.c_load_loss * imbalance
    return {
        "purchase": purchase,
        "switching": switching,
        "load_loss": load_loss,
        "shed_pu": imbalance,
        "reward": -(purchase + switching + load_loss),
    }


def solve_stage(problem: StageProblem, backend) -> DispatchSolution:
    """Build and solve one stage, verifying the objective decomposition."""
    model = build_stage(problem)
    result = backend.solve(model)
    sol = extract_solution(model, result.x, result.objective)
    recomputed = stage_costs(problem.net, sol)["reward"] + sol.alpha
    if abs(recomputed - sol.objective) > 1e-5:
        raise ContractViolationError(
            f"objective {sol.objective} does not decompose into reward + alpha {recomputed}")
    sol.objective = recomputed
    return sol


def dual_oracle(g) -> tuple[float, int]:
    """Worst-case mixture over candidates: the minimum continuation value.

    Returns ``(min value, 1-based index)``; ties break to the lowest index.
    Equals the optimum of the simplex LP min_q sum q_i g_i because that
    optimum is attained at a vertex.
    """
    g = list(g)
    if not g:
        raise ContractViolationError("empty continuation vector")
    if any(not math.isfinite(v) for v in g):
        raise ContractViolationError("continuation values must be finite")
    best = min(range(len(g)), key=lambda i: (g[i], i))
    return g[best], best + 1


class Violation(NamedTuple):
    constraint: str
    residual: float


def replay_constraints(net: Network, state: SystemState, sol: DispatchSolution,
                       tol: float = FEAS_TOL) -> list[Violation]:
    """Re-evaluate the operational constraint set against a solution.

    Returns one entry per violated constraint (residual beyond ``tol``);
    an empty list certifies feasibility. Radiality is checked both through
    the fictitious flows and through an independent graph search.
    """
    out: list[Violation] = []

    def check(name: str, residual: float):
        if residual > tol:
            out.append(Violation(name, residual))

    lid = {l.id: li for li, l in enumerate(net.lines)}
    w = {l.id: sol.w_op[l.id] for l in net.lines}
    fp_net = {l.id: sol.f_p_plus[l.id] - sol.f_p_minus[l.id] for l in net.lines}

    for val, name in ((sol.y_sw, "y_sw"), (sol.z_sw, "z_sw"), (sol.w_op, "w_op"), (sol.iota, "iota")):
        for key, x in val.items():
            check(f"binary[{name},{key}]", abs(x - round(x)) if round(x) in (0, 1) else 1.0)

    for pos, li in enumerate(net.sw_idx):
        l = net.lines[li]
        zp = state.switch_status[pos]
        check(f"switch_avail[{l.id}]", sol.z_sw[l.id] - state.avail[li])
        check(f"switch_open[{l.id}]", (zp - sol.z_sw[l.id]) - sol.y_sw[l.id])
        check(f"switch_close[{l.id}]", (sol.z_sw[l.id] - zp) - sol.y_sw[l.id])
        check(f"w_eq_z[{l.id}]", abs(sol.w_op[l.id] - sol.z_sw[l.id]))
    for li, l in enumerate(net.lines):
        if not l.switchable:
            check(f"w_avail[{l.id}]", w[l.id] - state.avail[li])
            if state.avail[li]:
                for b in net.endpoints(li):
                    bus = net.buses[b]
                    if not bus.is_substation:
                        check(f"service[{l.id},{bus.id}]", 1.0 - w[l.id] - sol.iota[bus.id])

    for bi, bus in enumerate(net.buses):
        inflow_p = inflow_q = 0.0
        for li in net.lines_at_bus[bi]:
            i, j = net.endpoints(li)
            sgn = 1.0 if j == bi else -1.0
            inflow_p += sgn * fp_net[net.lines[li].id]
            inflow_q += sgn * sol.f_q[net.lines[li].id]
        ip = sol.p_sub.get(bus.id, 0.0) + inflow_p - state.demand_p[bi] \
            - sol.dDp_plus[bus.id] + sol.dDp_minus[bus.id]
        iq = sol.q_sub.get(bus.id, 0.0) + inflow_q - state.demand_q[bi] \
            - sol.dDq_plus[bus.id] + sol.dDq_minus[bus.id]
        check(f"p_balance[{bus.id}]", abs(ip))
        check(f"q_balance[{bus.id}]", abs(iq))
        check(f"slack_p_cap[{bus.id}]", sol.dDp_minus[bus.id] - state.demand_p[bi])
        check(f"slack_q_cap[{bus.id}]", sol.dDq_minus[bus.id] - state.demand_q[bi])
        for slacks, name in ((sol.dDp_plus, "sp"), (sol.dDp_minus, "sm"),
                             (sol.dDq_plus, "sqp"), (sol.dDq_minus, "sqm")):
            check(f"slack_nonneg[{name},{bus.id}]", -slacks[bus.id])
        if bus.is_substation:
            check(f"v_ref[{bus.id}]", abs(sol.v[bus.id] - bus.v_ref ** 2))
            check(f"p_sub_nonneg[{bus.id}]", -sol.p_sub[bus.id])
        else:
            check(f"v_min[{bus.id}]", bus.v_min_sq - sol.v[bus.id])
            check(f"v_max[{bus.id}]", sol.v[bus.id] - bus.v_max_sq)
            ops = sum(w[net.lines[li].id] for li in net.lines_at_bus[bi])
            if sol.iota[bus.id] >= 0.5:
                check(f"isolation_up[{bus.id}]", float(ops))
            else:
                check(f"isolation_dn[{bus.id}]", 1.0 - ops)

    for li, l in enumerate(net.lines):
        i, j = net.endpoints(li)
        expr = sol.v[net.buses[i].id] - sol.v[net.buses[j].id] \
            - 2.0 * (l.r * fp_net[l.id] + l.x * sol.f_q[l.id])
        if w[l.id] >= 0.5:
            check(f"vdrop[{l.id}]", abs(expr))
        check(f"dir_plus[{l.id}]", sol.f_p_plus[l.id] - l.f_max * sol.d[l.id])
        check(f"dir_minus[{l.id}]", sol.f_p_minus[l.id] - l.f_max * (1.0 - sol.d[l.id]))
        check(f"flow_nonneg_p[{l.id}]", -sol.f_p_plus[l.id])
        check(f"flow_nonneg_m[{l.id}]", -sol.f_p_minus[l.id])
        gate = w[l.id]
        check(f"gate_plus[{l.id}]", sol.f_p_plus[l.id] - l.f_max * gate)
        check(f"gate_minus[{l.id}]", sol.f_p_minus[l.id] - l.f_max * gate)
        check(f"gate_q[{l.id}]", abs(sol.f_q[l.id]) - l.f_max * gate)
        for e, (cot_e, rhs_e) in enumerate(_OCT, start=1):
            for sgn, tag in ((1.0, "pos"), (-1.0, "neg")):
                check(f"octagon{e}_{tag}[{l.id}]",
                      sgn * sol.f_q[l.id] - cot_e * fp_net[l.id] - rhs_e * l.f_max)

    # Fictitious-flow replay.
    m_rad = float(net.n_buses)
    root_total = sum(sol.f_rad.get(f"root->{net.buses[bi].id}", 0.0) for bi in net.sub_idx)
    energized = sum(1.0 - sol.iota[b.id] for b in net.buses)
    check("rad_injection", abs(root_total - energized))
    for bi, bus in enumerate(net.buses):
        net_in = sol.f_rad.get(f"root->{bus.id}", 0.0) if bus.is_substation else 0.0
        for li in net.lines_at_bus[bi]:
            l = net.lines[li]
            if net.endpoints(li)[1] == bi:
                net_in += sol.f_rad[f"{l.from_bus}->{l.to_bus}"]
                net_in -= sol.f_rad[f"{l.to_bus}->{l.from_bus}"]
            else:
                net_in += sol.f_rad[f"{l.to_bus}->{l.from_bus}"]
                net_in -= sol.f_rad[f"{l.from_bus}->{l.to_bus}"]
        check(f"rad_balance[{bus.id}]", abs(net_in - (1.0 - sol.iota[bus.id])))
    for l in net.lines:
        for arc in (f"{l.from_bus}->{l.to_bus}", f"{l.to_bus}->{l.from_bus}"):
            check(f"rad_cap[{arc}]", sol.f_rad[arc] - m_rad * w[l.id])
            check(f"rad_nonneg[{arc}]", -sol.f_rad[arc])
    n_w = sum(round(w[l.id]) for l in net.lines)
    n_energized_nonsub = sum(
        1 for bi in net.nonsub_idx if sol.iota[net.buses[bi].id] < 0.5)
    check("rad_count", abs(n_w - n_energized_nonsub))

    # Independent forest check over the energized subgraph.
    parent = list(range(net.n_buses))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    acyclic = True
    for li, l in enumerate(net.lines):
        if round(w[l.id]) == 1:
            i, j = net.endpoints(li)
            ri, rj = find(i), find(j)
            if ri == rj:
                acyclic = False
            else:
                parent[ri] = rj
    if not acyclic:
        out.append(Violation("forest_acyclic", 1.0))
    sub_roots = {find(bi) for bi in net.sub_idx}
    for bi, bus in enumerate(net.buses):
        if not bus.is_substation and sol.iota[bus.id] < 0.5:
            if find(bi) not in sub_roots:
                out.append(Violation(f"forest_reach[{bus.id}]", 1.0))
    return out
