"""Approximate dynamic programming on post-decision line-status features.

Trains per-stage linear value functions by simulating trajectories,
solving the robust stage problem at every visited state, and refitting
ridge regressions on the collected (features, value) samples. Also hosts
an exact finite-horizon DP oracle for tiny instances.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from .errors import ContractViolationError, SizeCapError
from .network import FireSchedule, Network, SystemState, initial_state, make_state
from .solvers import EnumerationBackend, SolverBackend
from .stage import DispatchSolution, StageProblem, solve_stage
from .transition import AmbiguitySet, CandidateModel, sample_successor, survival_prob

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ValueFunction:
    """Stage-indexed weights over fire-zone line features."""

    t: int
    theta: tuple[float, ...]

    def __post_init__(self):
        if any(not np.isfinite(v) for v in self.theta):
            raise ContractViolationError("value function weights must be finite")


@dataclass(frozen=True)
class FeatureVector:
    phi: tuple[int, ...]

    def __post_init__(self):
        if any(v not in (0, 1) for v in self.phi):
            raise ContractViolationError("features must be binary")


@dataclass(frozen=True)
class AdpConfig:
    n_outer: int = 50
    m_traj: int = 20
    epsilon: float = 0.3
    eta: float = 1.0
    lam: float = 1.0
    tol: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.epsilon <= 1.0):
            raise ContractViolationError("epsilon must lie in [0, 1]")
        if self.eta <= 0.0:
            raise ContractViolationError("eta must be positive")
        if not (0.0 < self.lam <= 1.0):
            raise ContractViolationError("lambda must lie in (0, 1]")
        if self.tol <= 0.0:
            raise ContractViolationError("tol must be positive")
        if self.n_outer < 1 or self.m_traj < 1:
            raise ContractViolationError("n_outer and m_traj must be positive")


@dataclass
class ConvergenceReport:
    deltas: list
    converged: bool
    iterations: int


def features(net: Network, state: SystemState, sol: DispatchSolution) -> FeatureVector:
    """Post-decision features: available and energized, per fire-zone line."""
    phi = []
    for li in net.fire_idx:
        l = net.lines[li]
        status = sol.z_sw[l.id] if l.switchable else sol.w_op[l.id]
        phi.append(int(state.avail[li] and status))
    return FeatureVector(phi=tuple(phi))


def apply_switching(net: Network, state: SystemState, sol: DispatchSolution) -> SystemState:
    """Post-decision state: switch statuses replaced by the chosen ones."""
    switch = tuple(sol.z_sw[net.lines[li].id] for li in net.sw_idx)
    return replace(state, switch_status=switch)


def ridge_update(samples, eta: float) -> np.ndarray:
    """Solve the ridge normal equations over (features, value) samples."""
    if not samples:
        raise ContractViolationError("ridge update needs at least one sample")
    if eta <= 0.0:
        raise ContractViolationError("eta must be positive")
    X = np.array([list(phi.phi if isinstance(phi, FeatureVector) else phi)
                  for phi, _ in samples], dtype=float)
    y = np.array([nu for _, nu in samples], dtype=float)
    k = X.shape[1]
    return np.linalg.solve(X.T @ X + eta * np.eye(k), X.T @ y)


RANDOM_START_FRACTION = 0.35
RANDOM_START_SURVIVAL = 0.75


def _sample_initial(net: Network, schedule: FireSchedule,
                    rng: np.random.Generator) -> SystemState:
    """Training start distribution: canonical start or a degraded one.

    A minority of trajectories start from a randomly degraded grid
    (each fire-zone line dropped independently); switches start closed
    wherever available. Exploration during the trajectory supplies the
    rest of the state-space coverage.
    """
    if rng.random() > RANDOM_START_FRACTION:
        return initial_state(net, schedule)
    avail = [1] * net.n_lines
    for li in net.fire_idx:
        avail[li] = int(rng.random() < RANDOM_START_SURVIVAL)
    switch = tuple(avail[li] for li in net.sw_idx)
    return make_state(net, schedule, 1, tuple(avail), switch)


def _value_for(thetas: dict, t_next: int):
    vf = thetas.get(t_next)
    return vf


def _run_trajectory(net, ambiguity, schedule, config, backend, thetas_prev,
                    sample_model: CandidateModel, rng, cache=None) -> list:
    """One trajectory; returns [(t, phi, nu)] for stages 1..T-1."""
    state = _sample_initial(net, schedule, rng)
    out = []
    for t in range(1, net.horizon):
        key = (t, state.avail, state.switch_status) if cache is not None else None
        sol = None if cache is None else cache.get(key)
        if sol is None:
            problem = StageProblem(
                net=net, state=state, ambiguity=ambiguity,
                value_next=_value_for(thetas_prev, t + 1), lam=config.lam,
            )
            sol = solve_stage(problem, backend)
            if cache is not None:
                cache[key] = sol
        post = apply_switching(net, state, sol)
        out.append((t, features(net, state, sol), sol.objective))
        if t < net.horizon - 1:
            state = sample_successor(
                net, schedule, post, sol.abs_flows(net), sample_model,
                rng, explore_eps=config.epsilon,
            )
    return out


def train(net: Network, ambiguity: AmbiguitySet, schedule: FireSchedule,
          config: AdpConfig, backend: SolverBackend,
          workers: int = 1) -> tuple[list[ValueFunction], ConvergenceReport]:
    """Fit stage value functions by iterated simulation and regression.

    Returns one ValueFunction per stage t = 1..T-1 together with the
    sup-norm convergence trace. Transitions during training are sampled
    under the nominal candidate with epsilon-greedy exploration; targets
    are the robust stage values. Deterministic for a fixed seed at any
    worker count.
    """
    if net.horizon < 2:
        raise ContractViolationError("training requires a horizon of at least 2 stages")
    T = net.horizon
    k = len(net.fire_idx)
    sample_model = ambiguity.nominal()
    thetas = {t: ValueFunction(t=t, theta=(0.0,) * k) for t in range(1, T)}
    deltas = []
    converged = False
    iterations = 0

    for n in range(1, config.n_outer + 1):
        iterations = n
        if workers > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(
                    _trajectory_task,
                    [(net, ambiguity, schedule, config, backend, thetas,
                      sample_model, config.seed, n, m) for m in range(config.m_traj)],
                ))
        else:
            cache: dict = {}
            results = []
            for m in range(config.m_traj):
                rng = np.random.default_rng(
                    np.random.SeedSequence(config.seed, spawn_key=(n, m)))
                results.append(_run_trajectory(
                    net, ambiguity, schedule, config, backend, thetas,
                    sample_model, rng, cache=cache))
        buffers: dict[int, list] = {t: [] for t in range(1, T)}
        for traj in results:
            for t, phi, nu in traj:
                buffers[t].append((phi, nu))
        new_thetas = {}
        for t in range(1, T):
            theta = ridge_update(buffers[t], config.eta)
            new_thetas[t] = ValueFunction(t=t, theta=tuple(float(v) for v in theta))
        delta = max(
            float(np.max(np.abs(np.array(new_thetas[t].theta) - np.array(thetas[t].theta))))
            for t in range(1, T)
        )
        deltas.append(delta)
        thetas = new_thetas
        logger.info("outer iteration %d: sup-norm delta %.6g", n, delta)
        if delta < config.tol:
            converged = True
            break

    report = ConvergenceReport(deltas=deltas, converged=converged, iterations=iterations)
    return [thetas[t] for t in range(1, T)], report


_TRAIN_CACHE: dict = {}


def _trajectory_task(args):
    (net, ambiguity, schedule, config, backend, thetas, sample_model,
     seed, n, m) = args
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(n, m)))
    sig = (seed, n)
    if _TRAIN_CACHE.get("sig") != sig:
        _TRAIN_CACHE.clear()
        _TRAIN_CACHE["sig"] = sig
        _TRAIN_CACHE["memo"] = {}
    return _run_trajectory(net, ambiguity, schedule, config, backend,
                           thetas, sample_model, rng, cache=_TRAIN_CACHE["memo"])


def greedy_policy(thetas: list[ValueFunction], ambiguity: AmbiguitySet,
                  lam: float = 1.0):
    """Policy acting greedily against the learned value functions."""
    from .simulate import Policy

    return Policy(kind="ddu", thetas=tuple(thetas), ambiguity=ambiguity, lam=lam)


# ---------------------------------------------------------------------------
# Exact finite-horizon DP oracle for tiny instances.
# ---------------------------------------------------------------------------

MAX_DP_FIRE = 4
MAX_DP_SWITCH = 3
MAX_DP_HORIZON = 4
MAX_DP_LOADS = 4


@dataclass
class ExactDpResult:
    values: dict
    policy: dict
    initial_value: float
    worst_candidate_uniform: bool
    fire_idx: tuple
    sw_idx: tuple

    def value(self, t: int, avail_fire: tuple, z_prev: tuple) -> float:
        return self.values[(t, avail_fire, z_prev)]

    def action(self, t: int, avail_fire: tuple, z_prev: tuple):
        return self.policy[(t, avail_fire, z_prev)]


def _check_dp_instance(net: Network, horizon: int) -> None:
    if len(net.fire_idx) > MAX_DP_FIRE:
        raise SizeCapError(f"exact DP supports at most {MAX_DP_FIRE} fire-zone lines")
    if len(net.sw_idx) > MAX_DP_SWITCH:
        raise SizeCapError(f"exact DP supports at most {MAX_DP_SWITCH} switchable lines")
    if horizon > MAX_DP_HORIZON:
        raise SizeCapError(f"exact DP supports horizons up to {MAX_DP_HORIZON}")
    for l in net.lines:
        if l.r != 0.0 or l.x != 0.0:
            raise SizeCapError("exact DP oracle requires zero line impedances")
    for b in net.buses:
        if any(q != 0.0 for q in b.demand_q):
            raise SizeCapError("exact DP oracle requires zero reactive demand")


def _forest_orientation(net: Network, w: list) -> dict:
    """Map each energized line to the set of buses fed through it."""
    parent_line = {}
    order = []
    seen = set(net.sub_idx)
    queue = list(net.sub_idx)
    while queue:
        b = queue.pop(0)
        order.append(b)
        for li in net.lines_at_bus[b]:
            if not w[li]:
                continue
            i, j = net.endpoints(li)
            nxt = j if i == b else i
            if nxt not in seen:
                seen.add(nxt)
                parent_line[nxt] = li
                queue.append(nxt)
    downstream = {li: set() for li in range(net.n_lines) if w[li]}
    for b in reversed(order):
        if b in parent_line:
            chain = b
            # climb to accumulate b into every line on its path to the root
            while chain in parent_line:
                downstream[parent_line[chain]].add(b)
                li = parent_line[chain]
                i, j = net.endpoints(li)
                chain = i if chain == j else j
    return downstream


def exact_dp(net: Network, ambiguity: AmbiguitySet, schedule: FireSchedule,
             horizon: int, lam: float = 1.0, grid: int = 11) -> ExactDpResult:
    """Backward induction with exact clamped transition probabilities.

    Actions are enumerated exhaustively over switch configurations (the
    built-in backend's leaf derivation supplies the implied topology);
    the continuous dispatch reduces to served-load fractions, optimized
    by dense grid search with local polish. Restricted to tiny radial
    instances with zero impedances and reactive demand.
    """
    _check_dp_instance(net, horizon)
    fire = net.fire_idx
    sw = net.sw_idx
    costs = net.costs
    candidates = ambiguity.candidates
    worst_uniform = True
    worst_id = max(candidates, key=lambda c: sum(c.beta)).id

    def consistent_states(t: int):
        for af in itertools.product((0, 1), repeat=len(fire)):
            avail = [1] * net.n_lines
            for pos, li in enumerate(fire):
                avail[li] = af[pos]
            for zp in itertools.product((0, 1), repeat=len(sw)):
                if any(zp[pos] > avail[li] for pos, li in enumerate(sw)):
                    continue
                yield af, tuple(avail), zp

    values: dict = {}
    policy: dict = {}
    xs = np.linspace(0.0, 1.0, grid)

    for t in range(horizon, 0, -1):
        for af, avail, zp in consistent_states(t):
            state = make_state(net, schedule, t, avail, zp)
            best = -np.inf
            best_action = None
            live_sw = [li for li in sw if avail[li] == 1]
            for bits in itertools.product((0, 1), repeat=len(live_sw)):
                z = {li: 0 for li in sw}
                z.update(zip(live_sw, bits))
                leaf = EnumerationBackend._derive_leaf(net, state, z)
                if leaf is None:
                    continue
                w, iota = leaf
                obj, xstar, load_ids = _best_dispatch(
                    net, state, z, zp, w, iota, t, horizon, lam, xs,
                    candidates, values, fire, sw, schedule,
                )
                if obj is None:
                    continue
                if obj > best + 1e-12:
                    best = obj
                    best_action = (dict(z), dict(zip(load_ids, xstar)))
            if best_action is None:
                raise ContractViolationError("exact DP found no feasible action")
            values[(t, af, zp)] = best
            policy[(t, af, zp)] = best_action

    af0 = tuple(1 for _ in fire)
    zp0 = tuple(1 for _ in sw)
    init = values[(1, af0, zp0)]

    # Flag whether the adversary always picks the highest-risk candidate;
    # when it does, the robust value equals the value under that candidate.
    worst_uniform = _worst_uniform_check(net, ambiguity, schedule, horizon,
                                         lam, values, policy, fire, sw)
    return ExactDpResult(values=values, policy=policy, initial_value=init,
                         worst_candidate_uniform=worst_uniform,
                         fire_idx=fire, sw_idx=sw)


def _best_dispatch(net, state, z, zp, w, iota, t, horizon, lam, xs,
                   candidates, values, fire, sw, schedule):
    """Optimal served fractions for one (state, switch config)."""
    costs = net.costs
    downstream = _forest_orientation(net, w)
    load_bi = [bi for bi in range(net.n_buses)
               if iota[bi] == 0 and not net.buses[bi].is_substation
               and state.demand_p[bi] > 0.0]
    if len(load_bi) > MAX_DP_LOADS:
        raise SizeCapError("exact DP oracle supports at most 4 energized loads")
    y_cost = costs.c_switch * sum(
        abs(z[li] - zp[pos]) for pos, li in enumerate(sw))
    isolated = sum(state.demand_p[bi] for bi in range(net.n_buses)
                   if iota[bi] == 1)
    # Substation-local demand is always served straight from the injection.
    sub_demand = sum(state.demand_p[bi] for bi in net.sub_idx)
    demands = np.array([state.demand_p[bi] for bi in load_bi])

    flow_rows = []
    caps = []
    for li, members in downstream.items():
        row = [state.demand_p[bi] if bi in members else 0.0 for bi in load_bi]
        flow_rows.append((li, np.array(row)))
        caps.append(net.lines[li].f_max)

    live_fire = [li for li in fire if state.avail[li] == 1]

    def objective(X: np.ndarray) -> np.ndarray:
        served = X @ demands
        reward = (-costs.c_energy * (served + sub_demand) - y_cost
                  - costs.c_load_loss * ((demands.sum() - served) + isolated))
        feas = np.ones(X.shape[0], dtype=bool)
        flows = {}
        for (li, row), cap in zip(flow_rows, caps):
            f = X @ row
            flows[li] = f
            feas &= f <= cap + 1e-9
        if t == horizon:
            cont = 0.0
        else:
            cont = None
            for cand in candidates:
                probs = np.ones((X.shape[0], 1))
                for li in live_fire:
                    f = flows.get(li, np.zeros(X.shape[0]))
                    if state.fire[li]:
                        q = np.zeros(X.shape[0])
                    else:
                        q = np.clip(cand.gamma[li] - cand.beta[li] * f, 0.0, 1.0)
                    probs = np.concatenate([probs * (1 - q)[:, None], probs * q[:, None]], axis=1)
                succ_vals = np.empty(probs.shape[1])
                for mask in range(probs.shape[1]):
                    af_next = []
                    live_pos = 0
                    for pos, li in enumerate(fire):
                        if state.avail[li] == 0:
                            af_next.append(0)
                        else:
                            af_next.append((mask >> live_pos) & 1)
                            live_pos += 1
                    avail_next = [1] * net.n_lines
                    for pos, li in enumerate(fire):
                        avail_next[li] = af_next[pos]
                    z_carry = tuple(
                        min(z[li], avail_next[li]) for li in sw)
                    succ_vals[mask] = values[(t + 1, tuple(af_next), z_carry)]
                ci = probs @ succ_vals
                cont = ci if cont is None else np.minimum(cont, ci)
        total = reward + lam * cont
        total = np.where(feas, total, -np.inf)
        return total

    if not load_bi:
        val = float(objective(np.zeros((1, 0)))[0])
        return val, np.zeros(0), []

    grids = np.meshgrid(*([xs] * len(load_bi)), indexing="ij")
    X = np.stack([g.reshape(-1) for g in grids], axis=1)
    vals = objective(X)
    best_i = int(np.argmax(vals))
    if not np.isfinite(vals[best_i]):
        return None, None, None
    x0 = X[best_i]

    def neg(xvec):
        xvec = np.clip(xvec, 0.0, 1.0)
        v = objective(xvec[None, :])[0]
        return 1e12 if not np.isfinite(v) else -v

    res = minimize(neg, x0, method="Nelder-Mead",
                   options={"xatol": 1e-6, "fatol": 1e-9, "maxiter": 400})
    xstar = np.clip(res.x, 0.0, 1.0)
    best_val = -neg(xstar)
    if best_val < vals[best_i]:
        xstar, best_val = x0, float(vals[best_i])
    return float(best_val), xstar, [net.buses[bi].id for bi in load_bi]


def _worst_uniform_check(net, ambiguity, schedule, horizon, lam,
                         values, policy, fire, sw) -> bool:
    """True when the adversary's argmin is the max-beta candidate everywhere."""
    worst = ambiguity.worst()
    for (t, af, zp), (z, xmap) in policy.items():
        if t == horizon:
            continue
        avail = [1] * net.n_lines
        for pos, li in enumerate(fire):
            avail[li] = af[pos]
        state = make_state(net, schedule, t, tuple(avail), zp)
        w_iota = EnumerationBackend._derive_leaf(net, state, z)
        if w_iota is None:
            continue
        w, _ = w_iota
        downstream = _forest_orientation(net, w)
        flows = {}
        for li, members in downstream.items():
            flows[li] = sum(xmap.get(net.buses[bi].id, 0.0) * state.demand_p[bi]
                            for bi in members)
        conts = []
        for cand in ambiguity.candidates:
            total = 0.0
            live = [li for li in fire if state.avail[li] == 1]
            probs = np.ones(1)
            for li in live:
                q = survival_prob(cand.gamma[li], cand.beta[li], True,
                                  state.fire[li], flows.get(li, 0.0))
                probs = np.concatenate([probs * (1 - q), probs * q])
            for mask in range(probs.shape[0]):
                af_next = []
                live_pos = 0
                for pos, li in enumerate(fire):
                    if state.avail[li] == 0:
                        af_next.append(0)
                    else:
                        af_next.append((mask >> live_pos) & 1)
                        live_pos += 1
                avail_next = [1] * net.n_lines
                for pos, li in enumerate(fire):
                    avail_next[li] = af_next[pos]
                z_carry = tuple(min(z[li], avail_next[li]) for li in sw)
                total += probs[mask] * values[(t + 1, tuple(af_next), z_carry)]
            conts.append(total)
        if min(range(len(conts)), key=lambda i: (conts[i], i)) != \
                ambiguity.candidates.index(worst) and \
                abs(min(conts) - conts[ambiguity.candidates.index(worst)]) > 1e-9:
            return False
    return True
