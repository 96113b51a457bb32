"""Decision-dependent line-availability transition model.

Line failures are independent Bernoulli events whose survival probability
decreases with the active power flow carried by the line. The module
provides the exact product-form transition probabilities, their first-order
linearization with normalization, the candidate ambiguity set, factorized
expected features, and seeded successor sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractViolationError,
    DegenerateDistributionError,
    SizeCapError,
)
from .network import FireSchedule, Network, SystemState, make_state

# Successor enumeration is exponential in the number of available fire-zone
# lines; beyond the cap callers must use the factorized expectation path.
ENUMERATION_CAP = 12


@dataclass(frozen=True)
class CandidateModel:
    """One candidate transition law, parameterized per line.

    ``gamma``/``beta`` align with ``Network.lines``. ``id`` is the 1-based
    position of the candidate inside its ambiguity set.
    """

    id: int
    gamma: tuple[float, ...]
    beta: tuple[float, ...]


@dataclass(frozen=True)
class AmbiguitySet:
    candidates: tuple[CandidateModel, ...]
    delta: float

    def __post_init__(self):
        if len(self.candidates) < 1:
            raise ContractViolationError("ambiguity set needs at least one candidate")
        seen = {(c.gamma, c.beta) for c in self.candidates}
        if len(seen) != len(self.candidates):
            raise ContractViolationError("ambiguity set candidates must be distinct")

    @property
    def n(self) -> int:
        return len(self.candidates)

    def worst(self) -> CandidateModel:
        """Highest-risk candidate: largest total fire-zone beta."""
        return max(self.candidates, key=lambda c: (sum(c.beta), c.id))

    def nominal(self) -> CandidateModel:
        """Middle candidate (the unshifted one for odd-sized sets)."""
        return self.candidates[(len(self.candidates) - 1) // 2]


@dataclass(frozen=True)
class TransitionPattern:
    """One successor availability pattern over the fire-zone lines.

    ``survive`` holds line indices staying available (1 -> 1), ``fail``
    those failing (1 -> 0); ``stay_dead_count`` counts 0 -> 0 lines.
    """

    survive: frozenset[int]
    fail: frozenset[int]
    stay_dead_count: int

    def __post_init__(self):
        if self.survive & self.fail:
            raise ContractViolationError("pattern survive/fail sets overlap")


@dataclass(frozen=True)
class LinearizedTransition:
    """Affine approximation p(a) ~ c0 + sum_l c[l]*|f_l| of one pattern."""

    c0: float
    c: tuple[float, ...]

    def evaluate(self, abs_flows) -> float:
        return self.c0 + float(np.dot(self.c, abs_flows))


def survival_prob(gamma: float, beta: float, in_fire_zone: bool,
                  fire_flag: int, abs_flow: float) -> float:
    """One-period survival probability of an available line.

    Fire-zone lines survive with (1-fire) * clamp(gamma - beta*|f|, 0, 1);
    lines outside the zone never fail.
    """
    if abs_flow < 0:
        raise ContractViolationError("abs_flow must be non-negative")
    if not in_fire_zone:
        return 1.0
    if fire_flag:
        return 0.0
    return min(1.0, max(0.0, gamma - beta * abs_flow))


def build_candidates(net: Network, n: int, delta: float) -> AmbiguitySet:
    """Candidate set obtained by shifting fire-zone betas around nominal.

    Candidate i (1-based) uses beta_l + (i - (n+1)/2) * delta on fire-zone
    lines, clamped at zero; betas outside the zone and all gammas are kept.
    """
    if n < 1:
        raise ContractViolationError("need at least one candidate")
    if delta < 0:
        raise ContractViolationError("delta must be non-negative")
    gammas = tuple(l.gamma for l in net.lines)
    candidates = []
    for i in range(1, n + 1):
        shift = (i - (n + 1) / 2.0) * delta
        betas = tuple(
            max(0.0, l.beta + shift) if l.in_fire_zone else l.beta
            for l in net.lines
        )
        candidates.append(CandidateModel(id=i, gamma=gammas, beta=betas))
    return AmbiguitySet(candidates=tuple(candidates), delta=delta)


def zero_beta_candidates(net: Network) -> AmbiguitySet:
    """Singleton set with all betas zeroed: flow has no effect on failures.

    Used by the non-decision-dependent baseline at planning time.
    """
    gammas = tuple(l.gamma for l in net.lines)
    betas = tuple(0.0 for _ in net.lines)
    return AmbiguitySet(candidates=(CandidateModel(id=1, gamma=gammas, beta=betas),), delta=0.0)


def _fire_avail_lines(net: Network, state: SystemState) -> list[int]:
    return [li for li in net.fire_idx if state.avail[li] == 1]


def enumerate_patterns(net: Network, state: SystemState) -> list[TransitionPattern]:
    """All 2^k successor patterns of the currently available fire-zone lines."""
    live = _fire_avail_lines(net, state)
    k = len(live)
    if k > ENUMERATION_CAP:
        raise SizeCapError(f"{k} available fire-zone lines exceed the enumeration cap {ENUMERATION_CAP}")
    dead = sum(1 for li in net.fire_idx if state.avail[li] == 0)
    patterns = []
    for mask in range(1 << k):
        survive = frozenset(live[i] for i in range(k) if mask >> i & 1)
        fail = frozenset(live[i] for i in range(k) if not mask >> i & 1)
        patterns.append(TransitionPattern(survive=survive, fail=fail, stay_dead_count=dead))
    return patterns


def _line_survival(net: Network, state: SystemState, model: CandidateModel,
                   li: int, abs_flow: float) -> float:
    l = net.lines[li]
    return survival_prob(model.gamma[li], model.beta[li], l.in_fire_zone,
                         state.fire[li], abs_flow)


def exact_transition_prob(net: Network, state: SystemState, flows,
                          pattern: TransitionPattern, model: CandidateModel) -> float:
    """Exact product-form probability of one successor pattern.

    ``flows`` holds per-line |f^p| aligned with ``Network.lines``. Each
    survival factor is clamped to [0,1]; failure factors are the
    complements. Patterns resurrecting a failed line have probability 0.
    """
    live = set(_fire_avail_lines(net, state))
    for li in pattern.survive:
        if state.avail[li] == 0:
            return 0.0  # 0 -> 1 transitions are impossible
    if pattern.fail - live:
        raise ContractViolationError("pattern fails a line that is not currently available")
    if (pattern.survive | pattern.fail) != live:
        raise ContractViolationError("pattern does not cover the available fire-zone lines")
    prob = 1.0
    for li in pattern.survive:
        prob *= _line_survival(net, state, model, li, flows[li])
    for li in pattern.fail:
        prob *= 1.0 - _line_survival(net, state, model, li, flows[li])
    return prob


def pattern_probabilities(net: Network, state: SystemState, flows,
                          model: CandidateModel) -> np.ndarray:
    """Vector of exact probabilities for all patterns from enumerate_patterns.

    Index ``mask`` follows the same bit convention as enumerate_patterns
    (bit i set = i-th live fire-zone line survives). Vectorized so the
    full 2^k sweep stays cheap for property checks.
    """
    live = _fire_avail_lines(net, state)
    if len(live) > ENUMERATION_CAP:
        raise SizeCapError(f"{len(live)} available fire-zone lines exceed the enumeration cap")
    probs = np.array([1.0])
    for li in live:
        q = _line_survival(net, state, model, li, flows[li])
        # appending the block keeps line i on bit i of the pattern index
        probs = np.concatenate([probs * (1.0 - q), probs * q])
    return probs


def linearize(net: Network, state: SystemState, pattern: TransitionPattern,
              model: CandidateModel) -> LinearizedTransition:
    """First-order expansion of the pattern probability around zero flow.

    The fire mask is folded into the effective parameters, so the result
    matches exact_transition_prob exactly at zero flow and for single-line
    patterns.
    """
    lines = sorted(pattern.survive | pattern.fail)
    gam_eff = {li: (0.0 if state.fire[li] else model.gamma[li]) for li in lines}
    bet_eff = {li: (0.0 if state.fire[li] else model.beta[li]) for li in lines}

    def zero_factor(li: int) -> float:
        g = gam_eff[li]
        return g if li in pattern.survive else 1.0 - g

    c0 = 1.0
    for li in lines:
        c0 *= zero_factor(li)
    c = [0.0] * net.n_lines
    for li in lines:
        others = 1.0
        for lj in lines:
            if lj != li:
                others *= zero_factor(lj)
        c[li] = (-bet_eff[li] if li in pattern.survive else bet_eff[li]) * others
    return LinearizedTransition(c0=c0, c=tuple(c))


def normalized_probs(net: Network, state: SystemState, flows,
                     model: CandidateModel, use_linearized: bool = False) -> np.ndarray:
    """Normalized probabilities over all successor patterns.

    With ``use_linearized`` the per-pattern affine approximations are
    evaluated at the given flows, clamped at zero, then renormalized;
    otherwise the exact probabilities are used (already normalized, the
    division is a no-op up to rounding).
    """
    if use_linearized:
        patterns = enumerate_patterns(net, state)
        raw = np.array([
            max(0.0, linearize(net, state, p, model).evaluate(flows))
            for p in patterns
        ])
    else:
        raw = pattern_probabilities(net, state, flows, model)
    total = float(raw.sum())
    if total <= 0.0:
        raise DegenerateDistributionError("all successor probabilities are zero")
    return raw / total


def expected_features(net: Network, statuses, flows, fire_mask,
                      model: CandidateModel) -> tuple[float, ...]:
    """Factorized per-fire-zone-line expected features.

    ``statuses`` holds the post-decision energization flag per line
    (availability times switch/operational status). By independence the
    expectation of each feature is status * survival probability, which
    equals the full successor enumeration without ever forming it.
    """
    out = []
    for li in net.fire_idx:
        l = net.lines[li]
        q = survival_prob(model.gamma[li], model.beta[li], l.in_fire_zone,
                          fire_mask[li], flows[li])
        out.append(statuses[li] * q)
    return tuple(out)


def sample_successor(net: Network, schedule: FireSchedule, state: SystemState,
                     flows, model: CandidateModel, rng: np.random.Generator,
                     explore_eps: float = 0.0) -> SystemState:
    """Sample the next pre-decision state given realized flows.

    ``flows`` and the post-decision switch statuses must come from a solved
    stage; switch carry-over is taken from ``state.switch_status`` updated
    by the caller before sampling (see rollout/train call sites). With
    probability ``explore_eps`` a line's outcome is resampled uniformly
    over {0,1}, restricted to feasible transitions (no resurrection).

    One uniform draw is consumed per line (two when exploring) in line
    order, so streams stay aligned across policies under paired seeds.
    """
    if state.t + 1 > net.horizon:
        raise ContractViolationError("cannot sample beyond the horizon")
    next_avail = []
    for li in range(net.n_lines):
        explore = False
        if explore_eps > 0.0:
            explore = rng.random() < explore_eps
        u = rng.random()
        if state.avail[li] == 0:
            next_avail.append(0)
            continue
        if not net.lines[li].in_fire_zone:
            next_avail.append(1)
            continue
        if explore:
            next_avail.append(1 if u < 0.5 else 0)
            continue
        q = _line_survival(net, state, model, li, flows[li])
        next_avail.append(1 if u < q else 0)
    switch = tuple(
        min(state.switch_status[pos], next_avail[li])
        for pos, li in enumerate(net.sw_idx)
    )
    return make_state(net, schedule, state.t + 1, tuple(next_avail), switch)
