"""Radial distribution network data model, validation, and file ingestion.

Networks are loaded from a single JSON document (see ``serialize_network``
for the schema) and validated eagerly. All objects in this module are
immutable after construction and safe to share across worker processes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ContractViolationError, NetworkValidationError, ScheduleError


@dataclass(frozen=True)
class CostConfig:
    """Operating cost rates, all in dollars on the per-unit power base.

    ``c_energy`` is charged per unit of active power purchased at
    substations per hour, ``c_switch`` per switching operation, and
    ``c_load_loss`` per unit of active/reactive imbalance per hour.
    Shedding must be strictly more expensive than purchase.
    """

    c_energy: float
    c_switch: float
    c_load_loss: float


@dataclass(frozen=True)
class Bus:
    id: str
    is_substation: bool
    v_min: float
    v_max: float
    v_ref: float | None
    demand_p: tuple[float, ...]
    demand_q: tuple[float, ...]

    @property
    def v_min_sq(self) -> float:
        return self.v_min * self.v_min

    @property
    def v_max_sq(self) -> float:
        return self.v_max * self.v_max


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    r: float
    x: float
    f_max: float
    switchable: bool
    in_fire_zone: bool
    gamma: float
    beta: float


@dataclass(frozen=True)
class Network:
    """Validated network with derived index structures.

    Equality compares the declared data (buses, lines, horizon, costs,
    base); derived lookup tables are excluded so that a serialize/parse
    round trip yields an equal object.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    horizon: int
    costs: CostConfig
    base_mva: float

    # Derived indices, filled in __post_init__.
    bus_index: dict = field(default_factory=dict, compare=False, repr=False)
    line_index: dict = field(default_factory=dict, compare=False, repr=False)
    sub_idx: tuple = field(default=(), compare=False, repr=False)
    nonsub_idx: tuple = field(default=(), compare=False, repr=False)
    sw_idx: tuple = field(default=(), compare=False, repr=False)
    fire_idx: tuple = field(default=(), compare=False, repr=False)
    sw_pos: dict = field(default_factory=dict, compare=False, repr=False)
    fire_pos: dict = field(default_factory=dict, compare=False, repr=False)
    lines_at_bus: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        bus_index = {b.id: i for i, b in enumerate(self.buses)}
        line_index = {l.id: i for i, l in enumerate(self.lines)}
        sub_idx = tuple(i for i, b in enumerate(self.buses) if b.is_substation)
        nonsub_idx = tuple(i for i, b in enumerate(self.buses) if not b.is_substation)
        sw_idx = tuple(i for i, l in enumerate(self.lines) if l.switchable)
        fire_idx = tuple(i for i, l in enumerate(self.lines) if l.in_fire_zone)
        lines_at = [[] for _ in self.buses]
        for i, l in enumerate(self.lines):
            lines_at[bus_index[l.from_bus]].append(i)
            lines_at[bus_index[l.to_bus]].append(i)
        object.__setattr__(self, "bus_index", bus_index)
        object.__setattr__(self, "line_index", line_index)
        object.__setattr__(self, "sub_idx", sub_idx)
        object.__setattr__(self, "nonsub_idx", nonsub_idx)
        object.__setattr__(self, "sw_idx", sw_idx)
        object.__setattr__(self, "fire_idx", fire_idx)
        object.__setattr__(self, "sw_pos", {l: p for p, l in enumerate(sw_idx)})
        object.__setattr__(self, "fire_pos", {l: p for p, l in enumerate(fire_idx)})
        object.__setattr__(self, "lines_at_bus", tuple(tuple(v) for v in lines_at))

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    def endpoints(self, line_idx: int) -> tuple[int, int]:
        l = self.lines[line_idx]
        return self.bus_index[l.from_bus], self.bus_index[l.to_bus]


@dataclass(frozen=True)
class SystemState:
    """Pre-decision snapshot of the network at stage ``t``.

    ``avail`` and ``fire`` align with ``Network.lines``; ``switch_status``
    aligns with ``Network.sw_idx``; demands align with ``Network.buses``
    and carry the stage-``t`` slice of the bus profiles.
    """

    t: int
    avail: tuple[int, ...]
    fire: tuple[int, ...]
    switch_status: tuple[int, ...]
    demand_p: tuple[float, ...]
    demand_q: tuple[float, ...]


@dataclass(frozen=True)
class FireSchedule:
    """Deterministic per-line ignition hours.

    A line absent from ``ignitions`` never ignites; an ignited line stays
    fire-affected from its ignition hour onward.
    """

    ignitions: tuple[tuple[str, int], ...] = ()

    @staticmethod
    def empty() -> "FireSchedule":
        return FireSchedule(())

    @staticmethod
    def from_dict(data: dict, net: Network) -> "FireSchedule":
        raw = data.get("ignitions", {})
        if not isinstance(raw, dict):
            raise ScheduleError("'ignitions' must map line ids to hours")
        items = []
        for lid, hour in sorted(raw.items()):
            if lid not in net.line_index:
                raise ScheduleError(f"ignition references unknown line '{lid}'")
            if not net.lines[net.line_index[lid]].in_fire_zone:
                raise ScheduleError(f"line '{lid}' is outside the fire zone and cannot ignite")
            if not isinstance(hour, int) or hour < 1:
                raise ScheduleError(f"ignition hour for '{lid}' must be an integer >= 1")
            items.append((lid, hour))
        return FireSchedule(tuple(items))

    @staticmethod
    def from_file(path: str | Path, net: Network) -> "FireSchedule":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ScheduleError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
        return FireSchedule.from_dict(data, net)

    def mask(self, net: Network, t: int) -> tuple[int, ...]:
        """Fire flags per line at hour ``t`` (1-based)."""
        hours = dict(self.ignitions)
        out = []
        for l in net.lines:
            h = hours.get(l.id)
            out.append(1 if (h is not None and t >= h) else 0)
        return tuple(out)

    def to_dict(self) -> dict:
        return {"ignitions": {lid: h for lid, h in self.ignitions}}


def _req(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise NetworkValidationError(f"{where}: missing required field '{key}'")
    return mapping[key]


def parse_network(data: dict) -> Network:
    """Build and validate a Network from a parsed JSON document."""
    if not isinstance(data, dict):
        raise NetworkValidationError("top-level document must be an object")
    horizon = _req(data, "horizon", "network")
    if not isinstance(horizon, int) or horizon < 1:
        raise NetworkValidationError("horizon must be an integer >= 1")
    base_mva = float(data.get("base_mva", 1.0))
    if base_mva <= 0:
        raise NetworkValidationError("base_mva must be positive")

    costs_raw = _req(data, "costs", "network")
    costs = CostConfig(
        c_energy=float(_req(costs_raw, "c_energy", "costs")),
        c_switch=float(_req(costs_raw, "c_switch", "costs")),
        c_load_loss=float(_req(costs_raw, "c_load_loss", "costs")),
    )
    for name in ("c_energy", "c_switch", "c_load_loss"):
        if getattr(costs, name) < 0:
            raise NetworkValidationError(f"costs.{name} must be non-negative")
    if not costs.c_load_loss > costs.c_energy:
        raise NetworkValidationError("c_load_loss must exceed c_energy (shedding must dominate purchase)")

    defaults = data.get("defaults", {})
    d_gamma = defaults.get("gamma", 1.0)
    d_beta_fire = defaults.get("beta_fire_zone", 0.0)
    d_beta_out = defaults.get("beta_outside", 0.0)

    buses = []
    for raw in _req(data, "buses", "network"):
        bid = str(_req(raw, "id", "bus"))
        is_sub = bool(raw.get("is_substation", False))
        v_ref = raw.get("v_ref")
        dp = tuple(float(v) for v in _req(raw, "demand_p", f"bus {bid}"))
        dq = tuple(float(v) for v in _req(raw, "demand_q", f"bus {bid}"))
        buses.append(Bus(
            id=bid,
            is_substation=is_sub,
            v_min=float(_req(raw, "v_min", f"bus {bid}")),
            v_max=float(_req(raw, "v_max", f"bus {bid}")),
            v_ref=float(v_ref) if v_ref is not None else None,
            demand_p=dp,
            demand_q=dq,
        ))

    lines = []
    for raw in _req(data, "lines", "network"):
        lid = str(_req(raw, "id", "line"))
        fire = bool(raw.get("fire_zone", False))
        gamma = raw.get("gamma")
        beta = raw.get("beta")
        lines.append(Line(
            id=lid,
            from_bus=str(_req(raw, "from", f"line {lid}")),
            to_bus=str(_req(raw, "to", f"line {lid}")),
            r=float(_req(raw, "r", f"line {lid}")),
            x=float(_req(raw, "x", f"line {lid}")),
            f_max=float(_req(raw, "f_max", f"line {lid}")),
            switchable=bool(raw.get("switchable", False)),
            in_fire_zone=fire,
            gamma=float(gamma) if gamma is not None else float(d_gamma),
            beta=float(beta) if beta is not None else float(d_beta_fire if fire else d_beta_out),
        ))

    net = Network(buses=tuple(buses), lines=tuple(lines), horizon=horizon,
                  costs=costs, base_mva=base_mva)
    validate_network(net)
    return net


def validate_network(net: Network) -> None:
    """Raise NetworkValidationError naming the first violated invariant."""
    if len({b.id for b in net.buses}) != len(net.buses):
        raise NetworkValidationError("duplicate bus id")
    if len({l.id for l in net.lines}) != len(net.lines):
        raise NetworkValidationError("duplicate line id")
    if not net.sub_idx:
        raise NetworkValidationError("network has no substation")

    for b in net.buses:
        if not (0 < b.v_min < b.v_max):
            raise NetworkValidationError(f"bus {b.id}: voltage bounds must satisfy 0 < v_min < v_max")
        if b.is_substation:
            if b.v_ref is None:
                raise NetworkValidationError(f"bus {b.id}: substation requires v_ref")
            if not (b.v_min <= b.v_ref <= b.v_max):
                raise NetworkValidationError(f"bus {b.id}: v_ref outside [v_min, v_max]")
        elif b.v_ref is not None:
            raise NetworkValidationError(f"bus {b.id}: v_ref is only allowed on substations")
        for name, profile in (("demand_p", b.demand_p), ("demand_q", b.demand_q)):
            if len(profile) != net.horizon:
                raise NetworkValidationError(
                    f"bus {b.id}: {name} length {len(profile)} != horizon {net.horizon}")
            if any(v < 0 for v in profile):
                raise NetworkValidationError(f"bus {b.id}: {name} has negative entries")

    for l in net.lines:
        if l.from_bus not in net.bus_index or l.to_bus not in net.bus_index:
            raise NetworkValidationError(f"line {l.id}: endpoint references unknown bus")
        if l.from_bus == l.to_bus:
            raise NetworkValidationError(f"line {l.id}: endpoints must differ")
        if l.r < 0 or l.x < 0:
            raise NetworkValidationError(f"line {l.id}: impedances must be non-negative")
        if l.f_max <= 0:
            raise NetworkValidationError(f"line {l.id}: f_max must be positive")
        if not (0.0 <= l.gamma <= 1.0):
            raise NetworkValidationError(f"line {l.id}: gamma out of [0,1]")
        if l.beta < 0:
            raise NetworkValidationError(f"line {l.id}: beta must be non-negative")

    if not _connected_all_closed(net):
        raise NetworkValidationError("network disconnected (with all lines closed)")


def _connected_all_closed(net: Network) -> bool:
    """Breadth-first reachability over the undirected graph of all lines."""
    if net.n_buses == 0:
        return False
    seen = {0}
    queue = [0]
    while queue:
        b = queue.pop()
        for li in net.lines_at_bus[b]:
            i, j = net.endpoints(li)
            nxt = j if i == b else i
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == net.n_buses


def load_network(path: str | Path) -> Network:
    path = Path(path)
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise NetworkValidationError(
                f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_network(data)


def serialize_network(net: Network) -> dict:
    """Inverse of parse_network: per-line gamma/beta are written explicitly."""
    return {
        "base_mva": net.base_mva,
        "horizon": net.horizon,
        "costs": {
            "c_energy": net.costs.c_energy,
            "c_switch": net.costs.c_switch,
            "c_load_loss": net.costs.c_load_loss,
        },
        "buses": [
            {
                "id": b.id,
                "is_substation": b.is_substation,
                "v_min": b.v_min,
                "v_max": b.v_max,
                **({"v_ref": b.v_ref} if b.v_ref is not None else {}),
                "demand_p": list(b.demand_p),
                "demand_q": list(b.demand_q),
            }
            for b in net.buses
        ],
        "lines": [
            {
                "id": l.id,
                "from": l.from_bus,
                "to": l.to_bus,
                "r": l.r,
                "x": l.x,
                "f_max": l.f_max,
                "switchable": l.switchable,
                "fire_zone": l.in_fire_zone,
                "gamma": l.gamma,
                "beta": l.beta,
            }
            for l in net.lines
        ],
    }


def network_hash(net: Network) -> str:
    """Stable content hash used to pair checkpoints with networks."""
    blob = json.dumps(serialize_network(net), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def initial_state(net: Network, schedule: FireSchedule) -> SystemState:
    """Canonical start: all lines available, all switches closed, hour 1."""
    return SystemState(
        t=1,
        avail=tuple(1 for _ in net.lines),
        fire=schedule.mask(net, 1),
        switch_status=tuple(1 for _ in net.sw_idx),
        demand_p=tuple(b.demand_p[0] for b in net.buses),
        demand_q=tuple(b.demand_q[0] for b in net.buses),
    )


def make_state(net: Network, schedule: FireSchedule, t: int,
               avail: tuple[int, ...], switch_status: tuple[int, ...]) -> SystemState:
    """Assemble a stage-``t`` state, slicing demands and fire mask from profiles."""
    if not (1 <= t <= net.horizon):
        raise ScheduleError(f"stage {t} outside horizon 1..{net.horizon}")
    return SystemState(
        t=t,
        avail=tuple(avail),
        fire=schedule.mask(net, t),
        switch_status=tuple(switch_status),
        demand_p=tuple(b.demand_p[t - 1] for b in net.buses),
        demand_q=tuple(b.demand_q[t - 1] for b in net.buses),
    )


def check_state(net: Network, state: SystemState) -> None:
    """Raise if a SystemState violates its structural invariants."""
    if len(state.avail) != net.n_lines or len(state.fire) != net.n_lines:
        raise ContractViolationError("state vectors must align with network lines")
    if len(state.switch_status) != len(net.sw_idx):
        raise ContractViolationError("switch_status must align with switchable lines")
    if len(state.demand_p) != net.n_buses or len(state.demand_q) != net.n_buses:
        raise ContractViolationError("state demands must align with buses")
    for li, f in enumerate(state.fire):
        if f and not net.lines[li].in_fire_zone:
            raise ContractViolationError(f"fire flag set outside fire zone on line {net.lines[li].id}")
    for pos, li in enumerate(net.sw_idx):
        if state.switch_status[pos] > state.avail[li]:
            raise ContractViolationError(f"closed switch on unavailable line {net.lines[li].id}")
    if not (1 <= state.t <= net.horizon):
        raise ContractViolationError(f"stage {state.t} outside horizon")
