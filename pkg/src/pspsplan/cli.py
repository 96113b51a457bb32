"""Command-line entry point: train, evaluate, simulate, report.

Every command reads a JSON run configuration, writes its resolved copy
next to the outputs, and exits with a stable code: 0 success/converged,
2 usage error, 3 training stopped at the iteration cap, 4 solver failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from .adp import AdpConfig, ValueFunction, train
from .datasets import dataset_path
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    ContractViolationError,
    NetworkValidationError,
    PspsplanError,
    ScheduleError,
    SolverError,
)
from .network import (
    CostConfig,
    FireSchedule,
    Network,
    load_network,
    network_hash,
    validate_network,
)
from .simulate import (
    Policy,
    availability_csv,
    evaluate,
    histogram_csv,
    metrics_csv,
    rollout,
    summary_csv,
)
from .solvers import default_backend_name, make_backend
from .transition import AmbiguitySet, build_candidates, zero_beta_candidates

logger = logging.getLogger(__name__)

DEFAULTS = {
    "ambiguity": {"n_candidates": 3, "delta": 0.5},
    "adp": {"n_outer": 50, "m_traj": 20, "epsilon": 0.3, "eta": 1.0,
            "lambda": 1.0, "tol": 1e-3, "seed": 0},
    "evaluation": {"n_scenarios": 1000, "horizon": 20, "master_seed": 2024,
                   "eval_model": "worst",
                   "policies": ["ddu", "non_ddu", "greedy"]},
    "solver": {"backend": None, "mip_rel_gap": 0.0, "time_limit": 60.0},
    "workers": 1,
}


@dataclasses.dataclass
class RunConfig:
    network: str
    fire_schedule: str | None
    ambiguity_n: int
    ambiguity_delta: float
    costs: dict | None
    adp: AdpConfig
    n_scenarios: int
    horizon: int
    master_seed: int
    eval_model: str
    policies: list
    backend: str
    mip_rel_gap: float
    time_limit: float
    workers: int
    output_dir: str

    def resolved(self) -> dict:
        d = {
            "network": self.network,
            "fire_schedule": self.fire_schedule,
            "ambiguity": {"n_candidates": self.ambiguity_n, "delta": self.ambiguity_delta},
            "costs": self.costs,
            "adp": {"n_outer": self.adp.n_outer, "m_traj": self.adp.m_traj,
                    "epsilon": self.adp.epsilon, "eta": self.adp.eta,
                    "lambda": self.adp.lam, "tol": self.adp.tol, "seed": self.adp.seed},
            "evaluation": {"n_scenarios": self.n_scenarios, "horizon": self.horizon,
                           "master_seed": self.master_seed, "eval_model": self.eval_model,
                           "policies": list(self.policies)},
            "solver": {"backend": self.backend, "mip_rel_gap": self.mip_rel_gap,
                       "time_limit": self.time_limit},
            "workers": self.workers,
            "output_dir": self.output_dir,
        }
        return d


def load_run_config(path: str, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}") from exc
    overrides = overrides or {}

    def section(name):
        merged = dict(DEFAULTS.get(name, {}))
        merged.update(raw.get(name, {}))
        return merged

    if "network" not in raw:
        raise ConfigError("config missing required field 'network'")
    amb = section("ambiguity")
    adp_raw = section("adp")
    ev = section("evaluation")
    sol = section("solver")
    if "seed" in overrides:
        adp_raw["seed"] = overrides["seed"]
        ev["master_seed"] = overrides["seed"]
    try:
        adp = AdpConfig(
            n_outer=int(adp_raw["n_outer"]), m_traj=int(adp_raw["m_traj"]),
            epsilon=float(adp_raw["epsilon"]), eta=float(adp_raw["eta"]),
            lam=float(adp_raw["lambda"]), tol=float(adp_raw["tol"]),
            seed=int(adp_raw["seed"]),
        )
    except ContractViolationError as exc:
        raise ConfigError(f"adp: {exc}") from exc
    policies = list(ev.get("policies", DEFAULTS["evaluation"]["policies"]))
    for p in policies:
        if p not in ("ddu", "non_ddu", "greedy"):
            raise ConfigError(f"evaluation.policies: unknown policy kind '{p}'")
    backend = overrides.get("backend") or sol.get("backend") or default_backend_name()
    cfg = RunConfig(
        network=str(raw["network"]),
        fire_schedule=raw.get("fire_schedule"),
        ambiguity_n=int(amb["n_candidates"]),
        ambiguity_delta=float(amb["delta"]),
        costs=raw.get("costs"),
        adp=adp,
        n_scenarios=int(ev["n_scenarios"]),
        horizon=int(ev["horizon"]),
        master_seed=int(ev["master_seed"]),
        eval_model=ev["eval_model"],
        policies=policies,
        backend=str(backend),
        mip_rel_gap=float(sol["mip_rel_gap"]),
        time_limit=float(sol["time_limit"]),
        workers=int(overrides.get("workers", raw.get("workers", DEFAULTS["workers"]))),
        output_dir=str(overrides.get("output_dir", raw.get("output_dir", "runs/out"))),
    )
    if cfg.ambiguity_n < 1:
        raise ConfigError("ambiguity.n_candidates must be >= 1")
    if cfg.ambiguity_delta < 0:
        raise ConfigError("ambiguity.delta must be >= 0")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def materialize(cfg: RunConfig) -> tuple[Network, FireSchedule]:
    net = load_network(dataset_path(cfg.network))
    if cfg.costs:
        known = {"c_energy", "c_switch", "c_load_loss"}
        bad = set(cfg.costs) - known
        if bad:
            raise ConfigError(f"costs override has unknown fields {sorted(bad)}")
        merged = {
            "c_energy": cfg.costs.get("c_energy", net.costs.c_energy),
            "c_switch": cfg.costs.get("c_switch", net.costs.c_switch),
            "c_load_loss": cfg.costs.get("c_load_loss", net.costs.c_load_loss),
        }
        net = dataclasses.replace(net, costs=CostConfig(**merged))
        validate_network(net)
    if cfg.horizon > net.horizon:
        raise ConfigError(
            f"evaluation.horizon {cfg.horizon} exceeds network horizon {net.horizon}")
    if cfg.fire_schedule:
        schedule = FireSchedule.from_file(dataset_path(cfg.fire_schedule), net)
    else:
        schedule = FireSchedule.empty()
    return net, schedule


def ambiguity_for(cfg: RunConfig, net: Network, kind: str) -> AmbiguitySet:
    if kind == "non_ddu":
        return zero_beta_candidates(net)
    return build_candidates(net, cfg.ambiguity_n, cfg.ambiguity_delta)


def pick_eval_model(ambiguity: AmbiguitySet, selector) -> "CandidateModel":
    if selector == "worst":
        return ambiguity.worst()
    if selector == "nominal":
        return ambiguity.nominal()
    try:
        i = int(selector)
    except (TypeError, ValueError):
        raise ConfigError(f"eval_model must be 'worst', 'nominal', or an index: {selector!r}")
    if not (1 <= i <= ambiguity.n):
        raise ConfigError(f"eval_model index {i} outside 1..{ambiguity.n}")
    return ambiguity.candidates[i - 1]


def _write(path: Path, content: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(content)


def _write_resolved(cfg: RunConfig, outdir: Path) -> None:
    _write(outdir / "resolved_config.json",
           json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")


def checkpoint_path(outdir: Path, kind: str) -> Path:
    return outdir / f"checkpoint_{kind}.json"


def write_checkpoint(path: Path, kind: str, net: Network, cfg: RunConfig,
                     thetas: list[ValueFunction], report) -> None:
    blob = {
        "kind": kind,
        "network_hash": network_hash(net),
        "training_hash": hashlib.sha256(json.dumps(
            cfg.resolved()["adp"], sort_keys=True).encode()).hexdigest(),
        "lambda": cfg.adp.lam,
        "fire_lines": [net.lines[li].id for li in net.fire_idx],
        "stages": [vf.t for vf in thetas],
        "theta": [list(vf.theta) for vf in thetas],
        "ambiguity": {"n_candidates": cfg.ambiguity_n, "delta": cfg.ambiguity_delta,
                      "zero_beta": kind == "non_ddu"},
        "convergence": {"deltas": report.deltas, "converged": report.converged,
                        "iterations": report.iterations},
    }
    _write(path, json.dumps(blob, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: Path, net: Network) -> tuple[str, tuple[ValueFunction, ...], dict]:
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    blob = json.loads(path.read_text())
    if blob["network_hash"] != network_hash(net):
        raise CheckpointMismatchError(
            f"{path}: checkpoint was trained on a different network")
    thetas = tuple(
        ValueFunction(t=t, theta=tuple(v))
        for t, v in zip(blob["stages"], blob["theta"])
    )
    return blob["kind"], thetas, blob


def build_policy(kind: str, cfg: RunConfig, net: Network, outdir: Path) -> Policy:
    if kind == "greedy":
        return Policy(kind="greedy", thetas=None, ambiguity=None, lam=cfg.adp.lam)
    ambiguity = ambiguity_for(cfg, net, kind)
    _, thetas, _ = load_checkpoint(checkpoint_path(outdir, kind), net)
    return Policy(kind=kind, thetas=thetas, ambiguity=ambiguity, lam=cfg.adp.lam)


def cmd_train(cfg: RunConfig, policy_kind: str) -> int:
    net, schedule = materialize(cfg)
    outdir = Path(cfg.output_dir)
    ambiguity = ambiguity_for(cfg, net, policy_kind)
    backend = make_backend(cfg.backend, cfg.mip_rel_gap, cfg.time_limit)
    thetas, report = train(net, ambiguity, schedule, cfg.adp, backend,
                           workers=cfg.workers)
    write_checkpoint(checkpoint_path(outdir, policy_kind), policy_kind, net,
                     cfg, thetas, report)
    _write_resolved(cfg, outdir)
    logger.info("training %s: converged=%s after %d iterations",
                policy_kind, report.converged, report.iterations)
    return 0 if report.converged else 3


def archive_header(cfg: RunConfig, net: Network, eval_model_id: int) -> dict:
    return {
        "type": "header",
        "network_hash": network_hash(net),
        "base_mva": net.base_mva,
        "c_load_loss": net.costs.c_load_loss,
        "fire_lines": [net.lines[li].id for li in net.fire_idx],
        "policies": list(cfg.policies),
        "master_seed": cfg.master_seed,
        "n_scenarios": cfg.n_scenarios,
        "horizon": cfg.horizon,
        "eval_model": eval_model_id,
    }


def cmd_evaluate(cfg: RunConfig) -> int:
    net, schedule = materialize(cfg)
    outdir = Path(cfg.output_dir)
    backend = make_backend(cfg.backend, cfg.mip_rel_gap, cfg.time_limit)
    true_ambiguity = build_candidates(net, cfg.ambiguity_n, cfg.ambiguity_delta)
    eval_model = pick_eval_model(true_ambiguity, cfg.eval_model)
    policies = {kind: build_policy(kind, cfg, net, outdir) for kind in cfg.policies}
    results = evaluate(policies, net, schedule, cfg.n_scenarios, cfg.horizon,
                       cfg.master_seed, eval_model, backend, workers=cfg.workers)
    reports = [results[name][0] for name in sorted(results)]
    all_records = {name: results[name][1] for name in results}
    _write(outdir / "metrics.csv", metrics_csv(reports))
    _write(outdir / "summary.csv", summary_csv(all_records))
    _write(outdir / "histogram.csv", histogram_csv(reports))
    _write(outdir / "availability.csv", availability_csv(net, all_records))
    lines = [json.dumps(archive_header(cfg, net, eval_model.id), sort_keys=True)]
    for name in sorted(all_records):
        for rec in all_records[name]:
            lines.append(json.dumps(rec.to_dict(), sort_keys=True))
    _write(outdir / "records.jsonl", "\n".join(lines) + "\n")
    _write_resolved(cfg, outdir)
    logger.info("evaluation written to %s", outdir)
    return 0


def hour_line(hour) -> str:
    parts = []
    parts += [f"{lid} on" for lid in hour.switch_on]
    parts += [f"{lid} off" for lid in hour.switch_off]
    text = ", ".join(parts) if parts else "-"
    if hour.failures:
        text += " [" + ", ".join(f"{lid} fail" for lid in hour.failures) + "]"
    return f"Hour {hour.t}: {text}"


def cmd_simulate(cfg: RunConfig, policy_kind: str, scenario_id: int) -> int:
    if policy_kind not in ("ddu", "non_ddu", "greedy"):
        raise ConfigError(f"unknown policy kind '{policy_kind}'")
    net, schedule = materialize(cfg)
    outdir = Path(cfg.output_dir)
    backend = make_backend(cfg.backend, cfg.mip_rel_gap, cfg.time_limit)
    true_ambiguity = build_candidates(net, cfg.ambiguity_n, cfg.ambiguity_delta)
    eval_model = pick_eval_model(true_ambiguity, cfg.eval_model)
    policy = build_policy(policy_kind, cfg, net, outdir)
    rec = rollout(policy, net, schedule, cfg.horizon, cfg.master_seed,
                  scenario_id, eval_model, backend)
    print(f"Scenario {scenario_id} ({policy_kind}), master seed {cfg.master_seed}:")
    for hour in rec.hours:
        print(hour_line(hour))
    print(f"Total cost: {rec.total_cost:.2f} (purchase {rec.purchase_cost:.2f}, "
          f"switching {rec.switching_cost:.2f}, load loss {rec.load_loss_cost:.2f})")
    snapshot = {
        "scenario_id": scenario_id,
        "policy": policy_kind,
        "hours": [
            {"t": h.t, "energized_lines": h.energized_lines,
             "isolated_buses": h.isolated_buses, "fire": h.fire}
            for h in rec.hours
        ],
    }
    _write(outdir / f"scenario_{policy_kind}_{scenario_id}.json",
           json.dumps({"record": rec.to_dict(), "topology": snapshot},
                      indent=2, sort_keys=True) + "\n")
    _write_resolved(cfg, outdir)
    return 0


def cmd_report(run_dir: str) -> int:
    path = Path(run_dir) / "records.jsonl"
    if not path.exists():
        raise ConfigError(f"no scenario archive at {path}")
    header = None
    per_policy: dict[str, list] = {}
    with open(path) as fh:
        for line in fh:
            blob = json.loads(line)
            if blob.get("type") == "header":
                header = blob
                continue
            per_policy.setdefault(blob["policy"], []).append(blob)
    if header is None:
        raise ConfigError("archive missing header line")

    lines = ["policy,kind,bin_lo,bin_hi,count"]
    import numpy as np

    for name in sorted(per_policy):
        recs = [r for r in per_policy[name] if not r["aborted"]]
        hourly = [h["shed_mw"] for r in recs for h in r["hours"]]
        daily = [r["totals"]["shed_mw"] for r in recs]
        for kind, values in (("hourly", hourly), ("daily", daily)):
            top = max(max(values), 1e-9) if values else 1.0
            edges = np.linspace(0.0, top * (1 + 1e-12), 13)
            counts, _ = np.histogram(np.asarray(values, dtype=float), bins=edges)
            for i, c in enumerate(counts):
                lines.append(f"{name},{kind},{edges[i]:.12g},{edges[i + 1]:.12g},{int(c)}")
    _write(Path(run_dir) / "report_histogram.csv", "\n".join(lines) + "\n")

    avail = ["policy,line,availability"]
    for name in sorted(per_policy):
        recs = [r for r in per_policy[name] if not r["aborted"]]
        for lid in header["fire_lines"]:
            vals = []
            for r in recs:
                failed = any(lid in h["failures"] for h in r["hours"])
                vals.append(0.0 if failed else 1.0)
            avail.append(f"{name},{lid},{float(np.mean(vals)) if vals else 1.0:.12g}")
    _write(Path(run_dir) / "report_availability.csv", "\n".join(avail) + "\n")
    logger.info("report written to %s", run_dir)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pspsplan",
        description="Plan and evaluate proactive de-energization switching policies.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--backend", choices=["milp", "enumeration"],
                       help="solver backend override")
        p.add_argument("--workers", type=int, help="parallel worker count")
        p.add_argument("--output-dir", help="output directory override")

    p_train = sub.add_parser("train", help="fit value functions, write a checkpoint")
    common(p_train)
    p_train.add_argument("--policy", default="ddu", choices=["ddu", "non_ddu"])

    p_eval = sub.add_parser("evaluate", help="Monte Carlo policy comparison")
    common(p_eval)

    p_sim = sub.add_parser("simulate", help="replay one scenario hour by hour")
    common(p_sim)
    p_sim.add_argument("--policy", default="ddu")
    p_sim.add_argument("--scenario-id", type=int, default=0)

    p_rep = sub.add_parser("report", help="emit plot data from a scenario archive")
    p_rep.add_argument("--run-dir", required=True)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.run_dir)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.backend:
            overrides["backend"] = args.backend
        if args.workers is not None:
            overrides["workers"] = args.workers
        if args.output_dir:
            overrides["output_dir"] = args.output_dir
        cfg = load_run_config(args.config, overrides)
        if args.command == "train":
            return cmd_train(cfg, args.policy)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.policy, args.scenario_id)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, NetworkValidationError, ScheduleError,
            CheckpointMismatchError) as exc:
        logger.error("%s", exc)
        return 2
    except SolverError as exc:
        logger.error("solver failure: %s", exc)
        return 4
    except PspsplanError as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
