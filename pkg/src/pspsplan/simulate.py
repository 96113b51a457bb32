"""Out-of-sample Monte Carlo evaluation of switching policies.

Rolls policies through seeded failure scenarios under a chosen evaluation
candidate, accumulates per-hour cost records, and aggregates the
comparison metrics (means, worst-5% tails, shedding distributions).
Scenario randomness is keyed by (master_seed, scenario_id, hour), so
results are identical for any worker count and failure streams are paired
across policies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .adp import ValueFunction, apply_switching
from .errors import ContractViolationError, SolverError
from .network import FireSchedule, Network, SystemState, initial_state
from .solvers import SolverBackend
from .stage import DispatchSolution, StageProblem, solve_stage, stage_costs
from .transition import AmbiguitySet, CandidateModel, sample_successor

logger = logging.getLogger(__name__)

POLICY_KINDS = ("ddu", "non_ddu", "greedy")


@dataclass(frozen=True)
class Policy:
    """A decision rule: robust value-guided (ddu/non_ddu) or myopic."""

    kind: str
    thetas: tuple[ValueFunction, ...] | None
    ambiguity: AmbiguitySet | None
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ContractViolationError(f"unknown policy kind '{self.kind}'")
        if self.kind == "greedy":
            if self.thetas is not None:
                raise ContractViolationError("greedy policy carries no value function")
        else:
            if self.thetas is None:
                raise ContractViolationError(f"{self.kind} policy requires value functions")
            if self.ambiguity is None:
                raise ContractViolationError(f"{self.kind} policy requires an ambiguity set")

    def _theta_for(self, t_next: int) -> ValueFunction | None:
        if self.thetas is None:
            return None
        for vf in self.thetas:
            if vf.t == t_next:
                return vf
        return None

    def decide(self, net: Network, state: SystemState, backend: SolverBackend,
               cache: dict | None = None) -> DispatchSolution:
        """Solve the stage problem for ``state``.

        The decision depends on the state only through (t, avail,
        switch_status) given a fixed network/schedule, so callers may pass
        a memo dict; cached solutions are bit-identical to fresh solves.
        """
        key = None
        if cache is not None:
            key = (self.kind, self.thetas, state.t, state.avail, state.fire,
                   state.switch_status)
            hit = cache.get(key)
            if hit is not None:
                return hit
        problem = StageProblem(
            net=net,
            state=state,
            ambiguity=self.ambiguity,
            value_next=self._theta_for(state.t + 1),
            lam=self.lam,
        )
        sol = solve_stage(problem, backend)
        if cache is not None:
            cache[key] = sol
        return sol


@dataclass
class HourRecord:
    t: int
    fire: list
    switch_on: list
    switch_off: list
    failures: list
    flows: dict
    energized_lines: list
    isolated_buses: list
    purchase: float
    switching: float
    load_loss: float
    shed_pu: float
    shed_mw: float
    demand_mw: float


@dataclass
class ScenarioRecord:
    scenario_id: int
    master_seed: int
    policy: str
    hours: list = field(default_factory=list)
    total_cost: float = 0.0
    purchase_cost: float = 0.0
    switching_cost: float = 0.0
    load_loss_cost: float = 0.0
    shed_mw_total: float = 0.0
    failed_line_count: int = 0
    highest_hourly_shed_pct: float = 0.0
    aborted: bool = False
    abort_reason: str = ""

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "master_seed": self.master_seed,
            "policy": self.policy,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "totals": {
                "total_cost": self.total_cost,
                "purchase_cost": self.purchase_cost,
                "switching_cost": self.switching_cost,
                "load_loss_cost": self.load_loss_cost,
                "shed_mw": self.shed_mw_total,
                "failed_lines": self.failed_line_count,
                "highest_hourly_shed_pct": self.highest_hourly_shed_pct,
            },
            "hours": [vars(h) for h in self.hours],
        }


def scenario_rng(master_seed: int, scenario_id: int, t: int) -> np.random.Generator:
    """Failure stream for one scenario hour, identical across policies."""
    return np.random.default_rng(
        np.random.SeedSequence(master_seed, spawn_key=(scenario_id, t)))


def rollout(policy: Policy, net: Network, schedule: FireSchedule, horizon: int,
            master_seed: int, scenario_id: int, eval_model: CandidateModel,
            backend: SolverBackend, cache: dict | None = None) -> ScenarioRecord:
    """Simulate one seeded scenario under the evaluation transition model.

    Costs accrue from realized dispatches only (the value-to-go term is
    excluded); failures are sampled without exploration after each of the
    first horizon-1 stages. A solver failure marks the record aborted.
    """
    if horizon > net.horizon:
        raise ContractViolationError("rollout horizon exceeds the network horizon")
    rec = ScenarioRecord(scenario_id=scenario_id, master_seed=master_seed,
                         policy=policy.kind)
    state = initial_state(net, schedule)
    initial_avail = state.avail
    try:
        for t in range(1, horizon + 1):
            sol = policy.decide(net, state, backend, cache)
            costs = stage_costs(net, sol)
            post = apply_switching(net, state, sol)
            if t < horizon:
                rng = scenario_rng(master_seed, scenario_id, t)
                nxt = sample_successor(net, schedule, post, sol.abs_flows(net),
                                       eval_model, rng, explore_eps=0.0)
                failures = [net.lines[li].id for li in range(net.n_lines)
                            if state.avail[li] == 1 and nxt.avail[li] == 0]
            else:
                nxt = None
                failures = []
            demand_mw = (sum(state.demand_p) + sum(state.demand_q)) * net.base_mva
            shed_mw = costs["shed_pu"] * net.base_mva
            rec.hours.append(HourRecord(
                t=t,
                fire=[net.lines[li].id for li in range(net.n_lines) if state.fire[li]],
                switch_on=[lid for lid, y in sol.y_sw.items() if y and sol.z_sw[lid] == 1],
                switch_off=[lid for lid, y in sol.y_sw.items() if y and sol.z_sw[lid] == 0],
                failures=failures,
                flows={lid: sol.abs_flow(lid) for lid in sol.f_p_plus},
                energized_lines=[lid for lid, w in sol.w_op.items() if w == 1],
                isolated_buses=[bid for bid, i in sol.iota.items() if i == 1],
                purchase=costs["purchase"],
                switching=costs["switching"],
                load_loss=costs["load_loss"],
                shed_pu=costs["shed_pu"],
                shed_mw=shed_mw,
                demand_mw=demand_mw,
            ))
            if nxt is not None:
                state = nxt
    except SolverError as exc:
        rec.aborted = True
        rec.abort_reason = str(exc)
        return rec

    rec.purchase_cost = sum(h.purchase for h in rec.hours)
    rec.switching_cost = sum(h.switching for h in rec.hours)
    rec.load_loss_cost = sum(h.load_loss for h in rec.hours)
    rec.total_cost = rec.purchase_cost + rec.switching_cost + rec.load_loss_cost
    rec.shed_mw_total = sum(h.shed_mw for h in rec.hours)
    rec.failed_line_count = sum(
        1 for li in range(net.n_lines)
        if initial_avail[li] == 1 and state.avail[li] == 0)
    rec.highest_hourly_shed_pct = max(
        (100.0 * h.shed_mw / h.demand_mw if h.demand_mw > 0 else 0.0)
        for h in rec.hours)
    return rec


@dataclass
class MetricsReport:
    policy: str
    n_scenarios: int
    n_aborted: int
    mean: dict
    worst5: dict
    zero_shed_hour_fraction: float
    hourly_histogram: list
    daily_histogram: list
    eval_model_id: int

    METRICS = ("total_cost", "purchase_cost", "switching_cost", "load_loss_cost",
               "failed_lines", "shed_mw", "highest_hourly_shed_pct")


def worst_fraction_indices(totals, frac: float = 0.05) -> list:
    """Indices of the ceil(frac*n) highest values (ties broken by index)."""
    n = len(totals)
    k = int(np.ceil(frac * n))
    order = sorted(range(n), key=lambda i: (-totals[i], i))
    return order[:k]


def _bin_edges(values, n_bins: int) -> np.ndarray:
    top = max(float(np.max(values)), 1e-9) if len(values) else 1.0
    return np.linspace(0.0, top * (1 + 1e-12), n_bins + 1)


def _histogram(values, n_bins: int) -> list:
    values = np.asarray(values, dtype=float)
    edges = _bin_edges(values, n_bins)
    counts, _ = np.histogram(values, bins=edges)
    return [
        {"lo": float(edges[i]), "hi": float(edges[i + 1]), "count": int(counts[i])}
        for i in range(len(counts))
    ]


def shedding_histogram(records: list, n_bins: int = 12) -> tuple[list, float]:
    """Pooled per-hour shedding histogram and the zero-shedding fraction."""
    if not records:
        raise ContractViolationError("need at least one scenario record")
    hourly = [h.shed_mw for r in records for h in r.hours]
    zero_fraction = float(np.mean([1.0 if v < 1e-9 else 0.0 for v in hourly]))
    return _histogram(hourly, n_bins), zero_fraction


def summarize(policy_name: str, records: list, eval_model_id: int,
              n_bins: int = 12) -> MetricsReport:
    ok = [r for r in records if not r.aborted]
    if not ok:
        raise SolverError("all scenarios aborted")
    per = {
        "total_cost": [r.total_cost for r in ok],
        "purchase_cost": [r.purchase_cost for r in ok],
        "switching_cost": [r.switching_cost for r in ok],
        "load_loss_cost": [r.load_loss_cost for r in ok],
        "failed_lines": [float(r.failed_line_count) for r in ok],
        "shed_mw": [r.shed_mw_total for r in ok],
        "highest_hourly_shed_pct": [r.highest_hourly_shed_pct for r in ok],
    }
    tail = worst_fraction_indices(per["total_cost"])
    mean = {k: float(np.mean(v)) for k, v in per.items()}
    worst5 = {k: float(np.mean([v[i] for i in tail])) for k, v in per.items()}
    hourly_hist, zero_frac = shedding_histogram(ok, n_bins)
    daily_hist = _histogram([r.shed_mw_total for r in ok], n_bins)
    return MetricsReport(
        policy=policy_name,
        n_scenarios=len(records),
        n_aborted=len(records) - len(ok),
        mean=mean,
        worst5=worst5,
        zero_shed_hour_fraction=zero_frac,
        hourly_histogram=hourly_hist,
        daily_histogram=daily_hist,
        eval_model_id=eval_model_id,
    )


_WORKER_CACHE: dict = {}


def _rollout_task(args):
    (policy, net, schedule, horizon, master_seed, scenario_id, eval_model,
     backend) = args
    return rollout(policy, net, schedule, horizon, master_seed, scenario_id,
                   eval_model, backend, cache=_WORKER_CACHE)


def evaluate(policies: dict, net: Network, schedule: FireSchedule,
             n_scenarios: int, horizon: int, master_seed: int,
             eval_model: CandidateModel, backend: SolverBackend,
             workers: int = 1) -> dict:
    """Paired-seed Monte Carlo comparison of several policies.

    Returns {name: (MetricsReport, [ScenarioRecord])}. Every policy sees
    the same failure-randomness stream per scenario, conditioned on its
    own realized flows.
    """
    if n_scenarios < 20:
        raise ContractViolationError(
            "need at least 20 scenarios so the worst-5% tail is non-empty")
    tasks = [
        (policy, net, schedule, horizon, master_seed, sid, eval_model, backend)
        for name, policy in sorted(policies.items())
        for sid in range(n_scenarios)
    ]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            flat = list(pool.map(_rollout_task, tasks, chunksize=8))
    else:
        cache: dict = {}
        flat = [rollout(*t, cache=cache) for t in tasks]
    out = {}
    i = 0
    for name, policy in sorted(policies.items()):
        records = flat[i:i + n_scenarios]
        i += n_scenarios
        report = summarize(name, records, eval_model_id=eval_model.id)
        nab = report.n_aborted
        if nab:
            logger.warning("%s: %d scenarios aborted and excluded", name, nab)
        out[name] = (report, records)
    return out


def paired_one_sided_pvalue(costs_a, costs_b) -> float:
    """P-value for H1: mean(a) < mean(b) over paired scenarios."""
    a = np.asarray(costs_a, dtype=float)
    b = np.asarray(costs_b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise ContractViolationError("paired test needs equal-length samples")
    diff = a - b
    sd = diff.std(ddof=1)
    if sd == 0.0:
        return 0.0 if diff.mean() < 0 else 1.0
    t_stat = diff.mean() / (sd / np.sqrt(diff.size))
    return float(stats.t.cdf(t_stat, df=diff.size - 1))


def fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def metrics_csv(reports: list) -> str:
    """One row per policy, mean and worst-5% columns per metric."""
    cols = ["policy", "n_scenarios", "n_aborted", "zero_shed_hour_fraction",
            "eval_model"]
    cols += [f"mean_{m}" for m in MetricsReport.METRICS]
    cols += [f"worst5_{m}" for m in MetricsReport.METRICS]
    lines = [",".join(cols)]
    for r in reports:
        row = [r.policy, str(r.n_scenarios), str(r.n_aborted),
               fmt(r.zero_shed_hour_fraction), str(r.eval_model_id)]
        row += [fmt(r.mean[m]) for m in MetricsReport.METRICS]
        row += [fmt(r.worst5[m]) for m in MetricsReport.METRICS]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def summary_csv(all_records: dict) -> str:
    """One row per (policy, scenario)."""
    cols = ["policy", "scenario_id", "aborted", "total_cost", "purchase_cost",
            "switching_cost", "load_loss_cost", "shed_mw", "failed_lines",
            "highest_hourly_shed_pct"]
    lines = [",".join(cols)]
    for name in sorted(all_records):
        for r in all_records[name]:
            lines.append(",".join([
                name, str(r.scenario_id), str(int(r.aborted)),
                fmt(r.total_cost), fmt(r.purchase_cost), fmt(r.switching_cost),
                fmt(r.load_loss_cost), fmt(r.shed_mw_total),
                str(r.failed_line_count), fmt(r.highest_hourly_shed_pct),
            ]))
    return "\n".join(lines) + "\n"


def histogram_csv(reports: list) -> str:
    cols = ["policy", "kind", "bin_lo", "bin_hi", "count"]
    lines = [",".join(cols)]
    for r in reports:
        for kind, hist in (("hourly", r.hourly_histogram), ("daily", r.daily_histogram)):
            for b in hist:
                lines.append(",".join([
                    r.policy, kind, fmt(b["lo"]), fmt(b["hi"]), str(b["count"])
                ]))
    return "\n".join(lines) + "\n"


def availability_csv(net: Network, all_records: dict) -> str:
    """Average end-of-horizon availability per fire-zone line and policy."""
    cols = ["policy", "line", "availability"]
    lines = [",".join(cols)]
    for name in sorted(all_records):
        records = [r for r in all_records[name] if not r.aborted]
        for li in net.fire_idx:
            lid = net.lines[li].id
            vals = []
            for r in records:
                failed = any(lid in h.failures for h in r.hours)
                vals.append(0.0 if failed else 1.0)
            lines.append(",".join([name, lid, fmt(float(np.mean(vals)) if vals else 1.0)]))
    return "\n".join(lines) + "\n"
