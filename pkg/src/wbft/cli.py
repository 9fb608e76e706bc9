"""Command-line entry point: run experiments, evaluate the closed-form
models, dump weights and clusterings, and re-aggregate result CSVs."""
from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass
from fractions import Fraction
from pathlib import Path

from .analysis import (METRICS_COLUMNS, SecurityModelParams, aggregate, analytic_security,
                       expected_latency, mc_security, metrics_row)
from .channel import ChannelError, ChannelParams, channel_success_prob, solve_channel_latency
from .config import ConfigError, ScenarioConfig, load_config, load_scores
from .consensus import CSV_COLUMNS, ConsensusEngine, ConsensusMode
from .core import persist_ledger
from .simulation import audit, build_scenario, channel_params, run_simulation
from .weights import quality_weights, standardize_scores

log = logging.getLogger("wbft")

RUNS_COLUMNS = ("scenario_id", "mode", "seed", "p_l", "slot_seconds", "makespan_ticks",
                "makespan_seconds", "requests", "commits", "relay_messages", "audit")
SECURITY_COLUMNS = ("p", "analytic", "mc_estimate", "mc_stderr")
LATENCY_COLUMNS = ("participants", "p_l", "slot_seconds", "t_c", "attempt_success",
                   "expected_latency", "forward_error", "status")
WEIGHTS_COLUMNS = ("node", "average", "standardized", "weight")
CLUSTER_COLUMNS = ("node", "trust", "latency", "cluster", "role", "ccn")


class GridError(ValueError):
    pass


def parse_number(text: str) -> float:
    return float(Fraction(text.strip()))


def parse_grid(spec: str) -> list[float]:
    """``lo:hi:step`` (inclusive of hi) or a comma list; fractions allowed."""
    try:
        if ":" in spec:
            lo, hi, step = (Fraction(s.strip()) for s in spec.split(":"))
            if step <= 0 or hi < lo:
                raise GridError(f"invalid grid {spec!r}: need lo <= hi and step > 0")
            count = int((hi - lo) / step) + 1
            return [float(lo + i * step) for i in range(count)]
        return [parse_number(s) for s in spec.split(",") if s.strip()]
    except (ValueError, ZeroDivisionError) as exc:
        if isinstance(exc, GridError):
            raise
        raise GridError(f"invalid grid {spec!r}: {exc}") from None


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return f"{x:.12g}"
    return str(x)


def _write_csv(rows, header, path: str | Path | None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    text = buf.getvalue()
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


# --------------------------------------------------------------------- run


@dataclass(frozen=True)
class Job:
    scenario_id: str
    mode: str
    seed: int
    p_l: float | None
    ledger_dir: str | None


@dataclass
class JobResult:
    job: Job
    rounds: list[tuple]
    run: tuple
    problems: list[str]


def _scenario_id(cfg: ScenarioConfig, p_l: float | None) -> str:
    return cfg.scenario_id if p_l is None else f"{cfg.scenario_id}-pl{p_l:.4f}"


def plan_jobs(cfg: ScenarioConfig, modes=None, seeds=None, grid=None,
              ledger_root: str | None = None) -> list[Job]:
    modes = [ConsensusMode(m).value for m in (modes or cfg.consensus.mode_list())]
    seeds = list(seeds or cfg.seeds)
    points = grid if grid is not None else (cfg.channel.grid or [None])
    jobs = []
    for p in points:
        sid = _scenario_id(cfg, p)
        for m in modes:
            for s in seeds:
                ld = None if ledger_root is None else str(Path(ledger_root) / sid / m / f"seed{s}")
                jobs.append(Job(sid, m, s, p, ld))
    return sorted(jobs, key=lambda j: (j.scenario_id, j.mode, j.seed))


def execute_job(cfg: ScenarioConfig, job: Job) -> JobResult:
    res = run_simulation(cfg, mode=job.mode, seed=job.seed, p_l=job.p_l,
                         scenario_id=job.scenario_id)
    sc = res.scenario
    problems = audit(res)
    if job.ledger_dir:
        persist_ledger(job.ledger_dir, res.chains(), res.certificates)
    rounds = [tuple(getattr(r, c) for c in CSV_COLUMNS) for r in res.records]
    commits = sum(r.success for r in res.records)
    relay = sum(r.relay_messages for r in res.records)
    run = (job.scenario_id, job.mode, job.seed, sc.p_l, sc.slot * sc.tick_seconds, res.makespan,
           res.makespan * sc.tick_seconds, len(res.records), commits, relay,
           "ok" if not problems else "fail")
    return JobResult(job, rounds, run, problems)


def _execute(args):
    return execute_job(*args)


def run_jobs(cfg: ScenarioConfig, jobs: list[Job], workers: int = 1) -> list[JobResult]:
    """Each worker owns one scenario run; results come back in job order."""
    tasks = [(cfg, j) for j in jobs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(_execute, tasks, chunksize=1))
    return [execute_job(cfg, j) for j in jobs]


def summarize(results: list[JobResult], tick_seconds: float):
    records = [dict(zip(CSV_COLUMNS, r)) for res in results for r in res.rounds]
    spans = {(res.job.mode, res.job.scenario_id, res.job.seed): res.run[6] for res in results}
    return aggregate(records, spans, tick_seconds)


def write_run_outputs(out: Path, results: list[JobResult], tick_seconds: float):
    rounds = [r for res in results for r in res.rounds]
    _write_csv(rounds, CSV_COLUMNS, out / "rounds.csv")
    _write_csv([res.run for res in results], RUNS_COLUMNS, out / "runs.csv")
    metrics = summarize(results, tick_seconds)
    _write_csv([metrics_row(m) for m in metrics], METRICS_COLUMNS, out / "aggregate.csv")
    return metrics


def _print_table(metrics) -> None:
    print(f"{'scenario':<24} {'mode':<16} {'success':>8} {'latency_s':>11} {'tps':>10} "
          f"{'attempts':>8} {'msgs':>8}")
    for m in metrics:
        lat = "-" if m.mean_latency is None else f"{m.mean_latency:.4g}"
        print(f"{m.scenario_id:<24} {m.mode:<16} {m.success_rate:>8.3f} {lat:>11} "
              f"{m.throughput_tps:>10.4g} {m.mean_attempts:>8.2f} {m.messages_per_round:>8.1f}")


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    grid = parse_grid(args.grid) if args.grid else None
    seeds = [args.seed] if args.seed is not None else None
    modes = args.mode or None
    out = Path(args.out or "results")
    out.mkdir(parents=True, exist_ok=True)
    ledger_root = str(out / "ledgers") if args.persist_ledgers else None
    jobs = plan_jobs(cfg, modes, seeds, grid, ledger_root)
    workers = args.workers or os.cpu_count() or 1
    log.info("running %d scenario(s) on %d worker(s)", len(jobs), workers)
    results = run_jobs(cfg, jobs, workers)
    metrics = write_run_outputs(out, results, cfg.channel.tick_seconds)
    _print_table(metrics)
    bad = [(r.job, p) for r in results for p in r.problems]
    for job, p in bad:
        print(f"AUDIT FAIL {job.scenario_id} {job.mode} seed={job.seed}: {p}", file=sys.stderr)
    return 1 if bad else 0


# ---------------------------------------------------------------- security


def security_rows(n: int, sigma2: float, grid: list[float], trials: int, seed: int,
                  rule: str = "iid"):
    if not grid:
        raise GridError("empty p grid")
    rows = []
    for i, p in enumerate(grid):
        if not 0.0 <= p <= 1.0:
            raise GridError(f"p={p} outside [0, 1]")
        params = SecurityModelParams.of(n, sigma2, p)
        mc = mc_security(params, rule, trials, seed + i)
        rows.append((p, analytic_security(params), mc.estimate, mc.stderr))
    return rows


def cmd_security(args) -> int:
    grid = parse_grid(args.grid or "0.5:0.8:0.05")
    rows = security_rows(args.n, args.sigma2, grid, args.trials or 100_000,
                         args.seed or 0, args.rule)
    _write_csv(rows, SECURITY_COLUMNS, args.out)
    return 0


# ----------------------------------------------------------------- latency


def attempt_success(participants: int, p_l: float) -> float:
    """Chance one attempt reaches an equal-weight quorum in both phases when
    each follower's round trip survives with probability p_l^2."""
    m = participants
    need = math.floor(2 * m / 3) + 1 - 1    # followers needed besides the leader
    r = p_l * p_l
    phase = sum(math.comb(m - 1, j) * r ** j * (1 - r) ** (m - 1 - j)
                for j in range(max(0, need), m))
    return phase * phase


def latency_rows(params: ChannelParams, grid: list[float], participants: list[int]):
    rows = []
    for m in participants:
        for p in grid:
            try:
                t = solve_channel_latency(p, params)
            except ChannelError as exc:
                rows.append((m, p, "", "", "", "", "", f"error: {exc}"))
                continue
            err = abs(channel_success_prob(params.with_slot(t)) - p)
            q = attempt_success(m, p)
            exp = expected_latency(m, t, q) if q > 0 else float("inf")
            rows.append((m, p, t, 2 * m * t, q, exp, err, "ok"))
    return rows


def cmd_latency(args) -> int:
    params = channel_params(load_config(args.config)) if args.config else ChannelParams()
    grid = parse_grid(args.grid or "0.6:0.95:0.05")
    rows = latency_rows(params, grid, args.participants or [10])
    _write_csv(rows, LATENCY_COLUMNS, args.out)
    return 0


# ----------------------------------------------------------------- weights


def weights_rows(scores_path: str):
    m = load_scores(scores_path)
    means = m.column_means()
    std = standardize_scores(means)
    a = quality_weights(dict(enumerate(std))).a
    return [(name, means[j], std[j], a[j]) for j, name in enumerate(m.nodes)]


def cmd_weights(args) -> int:
    scores = args.scores
    if scores is None and args.config:
        scores = load_config(args.config).nodes.scores_file
    _write_csv(weights_rows(scores or "builtin:volunteer-scores"), WEIGHTS_COLUMNS, args.out)
    return 0


# ----------------------------------------------------------------- cluster


def cluster_rows(cfg: ScenarioConfig, seed: int | None = None, epoch: int = 0):
    sc = build_scenario(cfg, seed=seed)
    sc.mode = ConsensusMode.WBFT
    c = ConsensusEngine(sc).clustering(epoch)
    ccns = set(c.ccns)
    return [(j, sc.trust[j], sc.latency[j], c.assignment[j], "CCN" if j in ccns else "ECN",
             c.ccn_of(j)) for j in sorted(c.assignment)]


def cmd_cluster(args) -> int:
    cfg = load_config(args.config)
    _write_csv(cluster_rows(cfg, args.seed, args.epoch), CLUSTER_COLUMNS, args.out)
    return 0


# ------------------------------------------------------------------ report


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    root = Path(args.input)
    rounds = _read_csv(root / "rounds.csv")
    runs = _read_csv(root / "runs.csv")
    if args.mode:
        keep = {ConsensusMode(m).value for m in args.mode}
        rounds = [r for r in rounds if r["mode"] in keep]
    spans = {(r["mode"], r["scenario_id"], int(r["seed"])): float(r["makespan_seconds"])
             for r in runs}
    # tick size only scales latency; recover it from any run
    tick = float(runs[0]["makespan_seconds"]) / max(1, int(runs[0]["makespan_ticks"])) \
        if runs else 1.0
    if args.tick is not None:
        tick = args.tick
    metrics = aggregate(rounds, spans, tick)
    _write_csv([metrics_row(m) for m in metrics], METRICS_COLUMNS, args.out)
    return 0


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wbft", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log defaults and progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate every mode x P_l point x seed of a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default ./results)")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--mode", action="append", help="restrict to a mode (repeatable)")
    p.add_argument("--grid", help="P_l sweep lo:hi:step, overrides the config grid")
    p.add_argument("--persist-ledgers", action="store_true", help="write chains and proofs")
    p.add_argument("--workers", type=int, help="process pool size (default: CPU count)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("security", help="analytic vs Monte Carlo consensus security")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--sigma2", type=parse_number, default=1e-5)
    p.add_argument("--grid", help="p grid lo:hi:step or comma list (fractions allowed)")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--rule", choices=("iid", "truncated"), default="iid")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_security)

    p = sub.add_parser("latency", help="solved slot length and latency over a P_l grid")
    p.add_argument("--config", help="take channel parameters from a config")
    p.add_argument("--grid", help="P_l grid lo:hi:step")
    p.add_argument("--participants", type=int, action="append")
    p.add_argument("--out")
    p.set_defaults(func=cmd_latency)

    p = sub.add_parser("weights", help="averages, standardized scores and quality weights")
    p.add_argument("--scores", help="score CSV (default: the shipped table)")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("cluster", help="dump the clustering of a config at one epoch")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("report", help="re-aggregate rounds.csv and runs.csv of a run")
    p.add_argument("input", help="directory written by `wbft run`")
    p.add_argument("--mode", action="append")
    p.add_argument("--tick", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, GridError, OSError, ValueError) as exc:
        print(f"wbft {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
