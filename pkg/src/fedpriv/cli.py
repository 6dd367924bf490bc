"""Command-line entry point: run experiments and the preset comparisons.

Subcommands: run, compare-aggregators, compare-comms, attack-eval,
budget-plan. Set FEDPRIV_LOG={error|info|debug} to control logging.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Any, Sequence

import numpy as np

from . import privacy, simulation
from .config import (
    ConfigError,
    ExperimentConfig,
    default_config,
    load_config,
)

logger = logging.getLogger("fedpriv.cli")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    level = _LOG_LEVELS.get(os.environ.get("FEDPRIV_LOG", "error").lower(), logging.ERROR)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(name)s %(message)s")


def _json_line(record: dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def _summary_record(
    cfg: ExperimentConfig, reports: list[simulation.RoundReport]
) -> dict[str, Any]:
    final_acc = reports[-1].accuracy if reports else None
    target = cfg.target_accuracy
    rtt = simulation.rounds_to_target(reports, target) if target else None
    return {
        "record": "summary",
        "rounds_completed": len(reports),
        "final_accuracy": final_acc,
        "total_mb_up": sum(r.bytes_up for r in reports) / 1e6,
        "total_mb_down": sum(r.bytes_down for r in reports) / 1e6,
        "total_seconds": sum(r.seconds for r in reports),
        "target_accuracy": target,
        "rounds_to_target": rtt,
    }


def write_metrics(
    path: str, cfg: ExperimentConfig, reports: list[simulation.RoundReport]
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(_json_line(r.to_record()) + "\n")
        fh.write(_json_line(_summary_record(cfg, reports)) + "\n")


_ROUND_KEYS = {
    "record", "round", "accuracy", "loss", "bytes_up", "bytes_down", "seconds",
    "participants", "filtered", "selected", "applied", "epsilon_spent",
    "staleness", "skipped", "krum_fallback", "mpc_plaintext_gap",
}
_SUMMARY_KEYS = {
    "record", "rounds_completed", "final_accuracy", "total_mb_up",
    "total_mb_down", "total_seconds", "target_accuracy", "rounds_to_target",
}


def validate_metrics_file(path: str) -> int:
    """Schema check over an emitted JSONL file; returns the record count."""
    count = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(rec, dict) or "record" not in rec:
                raise ValueError(f"{path}:{lineno}: missing record type")
            kind = rec["record"]
            if kind == "round":
                extra = set(rec) - _ROUND_KEYS
            elif kind == "summary":
                extra = set(rec) - _SUMMARY_KEYS
            else:
                raise ValueError(f"{path}:{lineno}: unknown record type {kind!r}")
            if extra:
                raise ValueError(f"{path}:{lineno}: unexpected keys {sorted(extra)}")
            count += 1
    return count


def _load(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _print_table(headers: list[str], rows: list[list[Any]]) -> None:
    def fmt(v: Any) -> str:
        if isinstance(v, float):
            return f"{v:.3f}"
        return "-" if v is None else str(v)

    cells = [[fmt(v) for v in row] for row in rows]
    widths = [
        max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
        for i, h in enumerate(headers)
    ]
    line = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
    print(line)
    print("  ".join("-" * w for w in widths))
    for row in cells:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)))


def _write_rows(path: str | None, rows: list[dict[str, Any]]) -> None:
    if not path:
        return
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(_json_line(row) + "\n")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    reports, _ = simulation.run_experiment(cfg)
    out = args.out or "metrics.jsonl"
    write_metrics(out, cfg, reports)
    summary = _summary_record(cfg, reports)
    print(
        f"completed {summary['rounds_completed']} rounds; "
        f"final accuracy {summary['final_accuracy']}; "
        f"{summary['total_mb_up']:.3f} MB up; "
        f"{summary['total_seconds']:.3f} simulated seconds; "
        f"metrics written to {out}"
    )
    return 0


def _median(values: Sequence[float]) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


def _run_strategies_once(
    cfg: ExperimentConfig, seed: int
) -> dict[str, tuple[float, float, int | None]]:
    """Per-strategy (final accuracy, MB up, rounds-to-target) on one seed."""
    finals: dict[str, tuple[list[simulation.RoundReport], float]] = {}
    for strategy in ("fedavg", "robust", "weighted"):
        run_cfg = dataclasses.replace(
            cfg,
            seed=seed,
            aggregator=dataclasses.replace(cfg.aggregator, strategy=strategy),
        )
        reports, _ = simulation.run_experiment(run_cfg)
        mb = sum(r.bytes_up for r in reports) / 1e6
        finals[strategy] = (reports, mb)
    best = max(r[-1].accuracy for r, _ in finals.values())
    target = cfg.target_accuracy if cfg.target_accuracy else 0.9 * best
    out = {}
    for strategy, (reports, mb) in finals.items():
        out[strategy] = (
            reports[-1].accuracy,
            mb,
            simulation.rounds_to_target(reports, target),
        )
    return out


def cmd_compare_aggregators(args: argparse.Namespace) -> int:
    cfg = _load(args)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    acc: dict[str, list[float]] = {}
    mb: dict[str, list[float]] = {}
    rtt: dict[str, list[float]] = {}
    for seed in seeds:
        for strategy, (a, m, r) in _run_strategies_once(cfg, seed).items():
            acc.setdefault(strategy, []).append(a)
            mb.setdefault(strategy, []).append(m)
            rtt.setdefault(strategy, []).append(
                float(r) if r is not None else float(cfg.rounds + 1)
            )
    rows = []
    for strategy in sorted(acc):
        rows.append(
            {
                "strategy": strategy,
                "final_accuracy": _median(acc[strategy]),
                "rounds_to_target": _median(rtt[strategy]),
                "participation": cfg.participation,
                "mb_up": _median(mb[strategy]),
            }
        )
    _print_table(
        ["strategy", "final_accuracy", "rounds_to_target", "participation", "mb_up"],
        [[r[k] for k in ("strategy", "final_accuracy", "rounds_to_target", "participation", "mb_up")] for r in rows],
    )
    _write_rows(args.out, rows)
    return 0


COMMS_PRESETS: dict[str, dict[str, Any]] = {
    "none": {"enabled": False},
    "sparsify": {
        "enabled": True, "sparsify": True, "delta_encoding": False,
        "quant_bits": None, "entropy_coding": False,
    },
    "sparsify+delta": {
        "enabled": True, "sparsify": True, "delta_encoding": True,
        "quant_bits": None, "entropy_coding": False,
    },
    "all": {
        "enabled": True, "sparsify": True, "delta_encoding": True,
        "quant_bits": 8, "entropy_coding": True,
    },
}


def run_comms_preset(
    cfg: ExperimentConfig, name: str, seed: int
) -> tuple[float, float, float]:
    """(MB up, total seconds, final accuracy) for one comms preset and seed."""
    overrides = COMMS_PRESETS[name]
    run_cfg = dataclasses.replace(
        cfg,
        seed=seed,
        comms=dataclasses.replace(cfg.comms, **overrides),
    )
    reports, _ = simulation.run_experiment(run_cfg)
    mb = sum(r.bytes_up for r in reports) / 1e6
    return mb, simulation.measure_latency(reports), reports[-1].accuracy


def cmd_compare_comms(args: argparse.Namespace) -> int:
    cfg = _load(args)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    order = ["none", "sparsify", "sparsify+delta", "all"]
    mb: dict[str, list[float]] = {name: [] for name in order}
    acc: dict[str, list[float]] = {name: [] for name in order}
    reduction: dict[str, list[float]] = {name: [] for name in order}
    for seed in seeds:
        per_seed = {name: run_comms_preset(cfg, name, seed) for name in order}
        base_secs = per_seed["none"][1]
        for name, (m, secs, a) in per_seed.items():
            mb[name].append(m)
            acc[name].append(a)
            reduction[name].append(100.0 * (base_secs - secs) / base_secs)
    rows = []
    for name in order:
        rows.append(
            {
                "strategy": name,
                "mb_up": _median(mb[name]),
                "delay_reduction_pct": _median(reduction[name]),
                "final_accuracy": _median(acc[name]),
            }
        )
    _print_table(
        ["strategy", "mb_up", "delay_reduction_pct", "final_accuracy"],
        [[r[k] for k in ("strategy", "mb_up", "delay_reduction_pct", "final_accuracy")] for r in rows],
    )
    _write_rows(args.out, rows)
    return 0


def run_attack_variant(
    cfg: ExperimentConfig, mode: str | None, defended: bool, seed: int
) -> tuple[float | None, float]:
    """(defense rate, final accuracy) for one attack mode (None = no attack)."""
    strategy = "robust" if defended else "fedavg"
    attack = dataclasses.replace(
        cfg.attack, active=mode is not None, mode=mode or "sign_flip"
    )
    run_cfg = dataclasses.replace(
        cfg,
        seed=seed,
        attack=attack,
        aggregator=dataclasses.replace(cfg.aggregator, strategy=strategy),
    )
    reports, state = simulation.run_experiment(run_cfg)
    rate = (
        simulation.defense_rate(reports, state.attack) if mode is not None else None
    )
    return rate, reports[-1].accuracy


def cmd_attack_eval(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if not cfg.attack.malicious and cfg.attack.count == 0:
        cfg = dataclasses.replace(
            cfg, attack=dataclasses.replace(cfg.attack, count=max(1, cfg.clients // 5))
        )
    seeds = [cfg.seed + i for i in range(args.seeds)]
    rows: list[dict[str, Any]] = []
    baseline_acc = _median(
        [run_attack_variant(cfg, None, True, s)[1] for s in seeds]
    )
    rows.append(
        {
            "attack": "none (baseline)",
            "defended": True,
            "defense_rate_pct": None,
            "accuracy_drop_pct": 0.0,
            "final_accuracy": baseline_acc,
        }
    )
    for mode in ("sign_flip", "norm_boost", "label_flip"):
        for defended in (True, False):
            rates = []
            accs = []
            for s in seeds:
                rate, acc = run_attack_variant(cfg, mode, defended, s)
                rates.append(rate)
                accs.append(acc)
            acc_med = _median(accs)
            rows.append(
                {
                    "attack": mode,
                    "defended": defended,
                    "defense_rate_pct": 100.0 * _median(rates),
                    "accuracy_drop_pct": 100.0 * (baseline_acc - acc_med),
                    "final_accuracy": acc_med,
                }
            )
    _print_table(
        ["attack", "defended", "defense_rate_pct", "accuracy_drop_pct", "final_accuracy"],
        [[r[k] for k in ("attack", "defended", "defense_rate_pct", "accuracy_drop_pct", "final_accuracy")] for r in rows],
    )
    _write_rows(args.out, rows)
    return 0


def budget_plan_rows(
    epsilon_total: float,
    rounds: int,
    clients: list[tuple[float, float]],
    denom: float | None,
) -> tuple[float, list[dict[str, Any]]]:
    eps_t = privacy.per_round_budget(epsilon_total, rounds)
    if denom is None:
        denom = sum(n * g for n, g in clients)
    rows = []
    for i, (n, g) in enumerate(clients):
        rows.append(
            {
                "client": i,
                "samples": n,
                "contribution": g,
                "epsilon_round": eps_t,
                "epsilon_client": privacy.per_client_budget(eps_t, n, g, denom),
            }
        )
    return eps_t, rows


def cmd_budget_plan(args: argparse.Namespace) -> int:
    clients = []
    for spec in args.client:
        try:
            n_str, gamma_str = spec.split(":")
            clients.append((float(n_str), float(gamma_str)))
        except ValueError:
            print(f"bad --client spec {spec!r}, expected N:GAMMA", file=sys.stderr)
            return 2
    if not clients:
        print("need at least one --client N:GAMMA", file=sys.stderr)
        return 2
    eps_t, rows = budget_plan_rows(
        args.epsilon_total, args.rounds, clients, args.denom
    )
    print(f"per-round budget: {eps_t!r}")
    _print_table(
        ["client", "samples", "contribution", "epsilon_round", "epsilon_client"],
        [[r[k] for k in ("client", "samples", "contribution", "epsilon_round", "epsilon_client")] for r in rows],
    )
    total = sum(r["epsilon_client"] for r in rows)
    print(f"sum of per-client budgets this round: {total!r}")
    _write_rows(args.out, rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedpriv",
        description="Privacy-preserving federated learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config path (defaults when omitted)")
        p.add_argument("--out", help="write JSONL output here")
        p.add_argument("--seed", type=int, help="override the config seed")

    p_run = sub.add_parser("run", help="run one experiment, write round metrics")
    common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_agg = sub.add_parser(
        "compare-aggregators", help="fedavg vs weighted vs robust on shared seeds"
    )
    common(p_agg)
    p_agg.add_argument("--seeds", type=int, default=5, help="seed count for medians")
    p_agg.set_defaults(fn=cmd_compare_aggregators)

    p_comms = sub.add_parser(
        "compare-comms", help="communication stack ablation on shared seeds"
    )
    common(p_comms)
    p_comms.add_argument("--seeds", type=int, default=5)
    p_comms.set_defaults(fn=cmd_compare_comms)

    p_attack = sub.add_parser("attack-eval", help="poisoning defense evaluation")
    common(p_attack)
    p_attack.add_argument("--seeds", type=int, default=5)
    p_attack.set_defaults(fn=cmd_attack_eval)

    p_budget = sub.add_parser("budget-plan", help="print the privacy budget split")
    p_budget.add_argument("--epsilon-total", type=float, required=True)
    p_budget.add_argument("--rounds", type=int, required=True)
    p_budget.add_argument(
        "--client", action="append", default=[], metavar="N:GAMMA",
        help="client sample count and contribution weight (repeatable)",
    )
    p_budget.add_argument(
        "--denom", type=float, default=None,
        help="explicit allocation denominator (defaults to sum of N*GAMMA)",
    )
    p_budget.add_argument("--out", help="write JSONL rows here")
    p_budget.set_defaults(fn=cmd_budget_plan)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
