"""Solver backends for the single-stage problem.

Two conforming implementations: a HiGHS-based MILP backend, and a built-in
exhaustive backend that enumerates switch configurations (plus the few
direction bits that can matter) and solves one LP per leaf. The built-in
backend doubles as a correctness oracle for the MILP path.
"""

from __future__ import annotations

import itertools
import os
from abc import ABC, abstractmethod
from typing import NamedTuple

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp

from .errors import InfeasibleModelError, SizeCapError, SolverError
from .stage import StageModel, canonicalize_solution

ENUM_SWITCH_CAP = 12


class BackendResult(NamedTuple):
    x: np.ndarray
    objective: float
    status: str


class SolverBackend(ABC):
    """A stage-model solver; instances must be cheap to create per worker."""

    name: str = "abstract"

    @abstractmethod
    def solve(self, model: StageModel) -> BackendResult:
        """Return an optimal solution or raise SolverError."""


class MilpBackend(SolverBackend):
    """External MILP library binding (HiGHS through scipy.optimize.milp)."""

    name = "milp"

    def __init__(self, mip_rel_gap: float = 0.0, time_limit: float = 60.0):
        self.mip_rel_gap = mip_rel_gap
        self.time_limit = time_limit

    def solve(self, model: StageModel) -> BackendResult:
        res = milp(
            c=-model.c,
            constraints=LinearConstraint(model.A, model.row_lb, model.row_ub),
            integrality=model.integrality,
            bounds=Bounds(model.lb, model.ub),
            options={"mip_rel_gap": self.mip_rel_gap, "time_limit": self.time_limit},
        )
        if res.status == 0:
            x = canonicalize_solution(model, np.asarray(res.x))
            return BackendResult(x=x, objective=float(model.c @ x), status="optimal")
        if res.status == 1:
            raise SolverError(f"stage solve hit its limit: {res.message}")
        if res.status == 2:
            rows = self._diagnose(model)
            raise InfeasibleModelError(
                "stage model infeasible (model bug; slacks guarantee recourse); "
                f"elastic rows: {rows}", rows=rows)
        raise SolverError(f"solver failure ({res.status}): {res.message}")

    def _diagnose(self, model: StageModel) -> list[str]:
        """Elastic relaxation: which rows need slack to restore feasibility."""
        import scipy.sparse as sp

        m, n = model.A.shape
        eye = sp.identity(m, format="csr")
        A_ext = sp.hstack([model.A, -eye, eye], format="csr")
        lb = np.concatenate([model.lb, np.zeros(2 * m)])
        ub = np.concatenate([model.ub, np.full(2 * m, np.inf)])
        c = np.concatenate([np.zeros(n), np.ones(2 * m)])
        res = milp(
            c=c,
            constraints=LinearConstraint(A_ext, model.row_lb, model.row_ub),
            integrality=np.zeros(n + 2 * m),
            bounds=Bounds(lb, ub),
        )
        if res.status != 0:
            return []
        slack = res.x[n:n + m] + res.x[n + m:]
        return [model.row_names[i] for i in np.nonzero(slack > 1e-6)[0]]


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[ra] = rb
        return True


class EnumerationBackend(SolverBackend):
    """Exhaustive search over switch configurations with an LP per leaf.

    Valid for at most 12 switchable lines. Within a leaf the discrete
    structure (operational flags, isolation, switching deltas) is implied
    by the switch assignment; direction bits are enumerated only for lines
    where inflating |f| through a split overlap could pay off through the
    value-to-go term, and any residual overlap elsewhere is repaired
    without changing the objective.
    """

    name = "enumeration"

    def solve(self, model: StageModel) -> BackendResult:
        problem = model.problem
        net, state = problem.net, problem.state
        idx = model.idx
        sw_live = [li for li in net.sw_idx if state.avail[li] == 1]
        if len(sw_live) > ENUM_SWITCH_CAP:
            raise SizeCapError(
                f"{len(sw_live)} switchable lines exceed the enumeration cap {ENUM_SWITCH_CAP}")

        best_x = None
        best_obj = -np.inf
        for bits in itertools.product((0, 1), repeat=len(sw_live)):
            z = {li: 0 for li in net.sw_idx}
            z.update(zip(sw_live, bits))
            leaf = self._derive_leaf(net, state, z)
            if leaf is None:
                continue
            w, iota = leaf
            for d_fix in self._direction_fixes(model, z, w):
                res = self._leaf_lp(model, z, w, iota, d_fix)
                if res is None:
                    continue
                obj = float(model.c @ res)
                if obj > best_obj + 1e-12:
                    best_obj = obj
                    best_x = res
        if best_x is None:
            raise InfeasibleModelError("no feasible switch configuration", rows=[])
        x = canonicalize_solution(model, best_x)
        return BackendResult(x=x, objective=float(model.c @ x), status="optimal")

    @staticmethod
    def _derive_leaf(net, state, z):
        """Implied (w, iota) for a switch assignment, or None if non-radial."""
        closed = [
            (z[li] if l.switchable else state.avail[li]) == 1
            for li, l in enumerate(net.lines)
        ]
        reach = set(net.sub_idx)
        queue = list(net.sub_idx)
        while queue:
            b = queue.pop()
            for li in net.lines_at_bus[b]:
                if not closed[li]:
                    continue
                i, j = net.endpoints(li)
                nxt = j if i == b else i
                if nxt not in reach:
                    reach.add(nxt)
                    queue.append(nxt)
        w = [1 if (closed[li] and net.endpoints(li)[0] in reach) else 0
             for li in range(net.n_lines)]
        iota = [0 if (bi in reach or net.buses[bi].is_substation) else 1
                for bi in range(net.n_buses)]
        uf = _UnionFind(net.n_buses)
        has_sub = [net.buses[bi].is_substation for bi in range(net.n_buses)]
        for li in range(net.n_lines):
            if not w[li]:
                continue
            i, j = net.endpoints(li)
            ri, rj = uf.find(i), uf.find(j)
            if ri == rj:
                return None  # cycle among energized lines
            if has_sub[ri] and has_sub[rj]:
                return None  # would join two substations in one tree
            uf.parent[ri] = rj
            has_sub[rj] = has_sub[ri] or has_sub[rj]
        return w, iota

    @staticmethod
    def _direction_fixes(model, z, w):
        """Direction-bit assignments for lines where overlap could pay."""
        problem = model.problem
        net, state = problem.net, problem.state
        if problem.value_next is None:
            return [{}]
        theta = problem.value_next.theta
        pressure = []
        for pos, li in enumerate(net.fire_idx):
            l = net.lines[li]
            gate = z[li] if l.switchable else w[li]
            if gate != 1 or state.fire[li] or state.avail[li] != 1:
                continue
            max_beta = max(c.beta[li] for c in problem.ambiguity.candidates)
            if theta[pos] < -1e-12 and max_beta > 0.0:
                pressure.append(li)
        if len(pressure) > ENUM_SWITCH_CAP:
            raise SizeCapError("too many direction-relevant lines to enumerate")
        if not pressure:
            return [{}]
        return [dict(zip(pressure, bits))
                for bits in itertools.product((0, 1), repeat=len(pressure))]

    @staticmethod
    def _leaf_lp(model, z, w, iota, d_fix):
        net = model.problem.net
        idx = model.idx
        lb = model.lb.copy()
        ub = model.ub.copy()

        def fix(var, val):
            lb[var] = ub[var] = float(val)

        zp = model.problem.state.switch_status
        for pos, li in enumerate(net.sw_idx):
            fix(idx["z"][li], z[li])
            fix(idx["y"][li], abs(z[li] - zp[pos]))
        for li, l in enumerate(net.lines):
            if not l.switchable:
                fix(idx["w"][li], w[li])
        for bi in range(net.n_buses):
            fix(idx["iota"][bi], iota[bi])
        for li, dv in d_fix.items():
            fix(idx["d"][li], dv)
        res = milp(
            c=-model.c,
            constraints=LinearConstraint(model.A, model.row_lb, model.row_ub),
            integrality=np.zeros(model.n_vars),
            bounds=Bounds(lb, ub),
        )
        if res.status != 0:
            return None
        return np.asarray(res.x)


def make_backend(name: str, mip_rel_gap: float = 0.0, time_limit: float = 60.0) -> SolverBackend:
    if name == "milp":
        return MilpBackend(mip_rel_gap=mip_rel_gap, time_limit=time_limit)
    if name == "enumeration":
        return EnumerationBackend()
    raise SolverError(f"unknown solver backend '{name}'")


def default_backend_name() -> str:
    return os.environ.get("PSPSPLAN_SOLVER", "milp")


def write_lp(model: StageModel, path) -> None:
    """Emit the built model in CPLEX LP text format for external inspection."""
    lines = ["Maximize", " obj:"]
    terms = []
    for j, coef in enumerate(model.c):
        if coef != 0.0:
            terms.append(f" {'+' if coef >= 0 else '-'} {abs(coef):.12g} x{j}")
    lines.append("".join(terms) if terms else " 0 x0")
    lines.append("Subject To")
    A = model.A.tocsr()
    for i, name in enumerate(model.row_names):
        row = A.getrow(i)
        expr = "".join(
            f" {'+' if v >= 0 else '-'} {abs(v):.12g} x{j}"
            for j, v in zip(row.indices, row.data)
        )
        lo, hi = model.row_lb[i], model.row_ub[i]
        rname = name.replace("[", "_").replace("]", "").replace(",", "_").replace("->", "_")
        if lo == hi:
            lines.append(f" {rname}:{expr} = {lo:.12g}")
        else:
            if np.isfinite(hi):
                lines.append(f" {rname}_u:{expr} <= {hi:.12g}")
            if np.isfinite(lo):
                lines.append(f" {rname}_l:{expr} >= {lo:.12g}")
    lines.append("Bounds")
    for j in range(model.n_vars):
        lo, hi = model.lb[j], model.ub[j]
        lo_s = f"{lo:.12g}" if np.isfinite(lo) else "-inf"
        hi_s = f"{hi:.12g}" if np.isfinite(hi) else "+inf"
        lines.append(f" {lo_s} <= x{j} <= {hi_s}")
    ints = [f"x{j}" for j in range(model.n_vars) if model.integrality[j]]
    if ints:
        lines.append("General")
        lines.append(" " + " ".join(ints))
    lines.append("End")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
