"""Turn a ScenarioConfig into a runnable scenario and execute it."""
from __future__ import annotations

import random
from dataclasses import replace

from .channel import ChannelParams, channel_success_prob, min_slot, solve_channel_latency
from .config import ScenarioConfig, load_scores
from .consensus import ConsensusEngine, ConsensusMode, Scenario, SimulationResult
from .core import KeyedHashScheme, LlmProfile
from .hsc import HscParams
from .netsim import KeyedRng
from .weights import (RecalibrationParams, composite_weights, quality_weights,
                      sample_truncated_normal, standardize_scores, trust_weights)


def channel_params(cfg: ScenarioConfig) -> ChannelParams:
    c = cfg.channel
    return ChannelParams(c.bandwidth, c.capacity, c.rate, c.subcarriers, c.slot)


def resolve_channel(cfg: ScenarioConfig, p_l: float | None = None) -> tuple[float, float]:
    """(slot seconds, link success probability) for a fixed T or a target P_l."""
    params = channel_params(cfg)
    if cfg.channel.link_success is not None and p_l is None:
        # link success pinned directly; the slot is the given T or the smallest valid one
        return params.slot or min_slot(params), cfg.channel.link_success
    target = p_l if p_l is not None else (None if cfg.channel.slot else cfg.channel.target_pl)
    if target is None:
        return params.slot, channel_success_prob(params)
    t = solve_channel_latency(target, params)
    return t, target


def _quality_profile(cfg: ScenarioConfig):
    """Per-node (name, mean, stddev) plus the quality weight vector A."""
    if cfg.nodes.profiles:
        specs = cfg.nodes.profiles
        rows = [(p.name or f"node{j}", p.quality_mean, p.quality_stddev)
                for j, p in enumerate(specs)]
    else:
        m = load_scores(cfg.nodes.scores_file)
        means = m.column_means()
        n = cfg.node_count()
        rows = []
        for j in range(n):
            col = [r[j % len(m.nodes)] for r in m.scores]
            mu = means[j % len(m.nodes)]
            sd = (sum((x - mu) ** 2 for x in col) / len(col)) ** 0.5
            if cfg.nodes.quality_stddev is not None:
                sd = cfg.nodes.quality_stddev
            name = m.nodes[j % len(m.nodes)] + ("" if j < len(m.nodes) else f"#{j}")
            rows.append((name, mu, sd))
    means = [r[1] for r in rows]
    if max(means) - min(means) > 0:
        std = standardize_scores(means)
    else:
        std = [0.5] * len(means)
    a = quality_weights({j: max(v, 1e-12) for j, v in enumerate(std)})
    return rows, a


def build_scenario(cfg: ScenarioConfig, mode: ConsensusMode | str | None = None,
                   seed: int | None = None, p_l: float | None = None,
                   scenario_id: str | None = None) -> Scenario:
    seed = cfg.seeds[0] if seed is None else seed
    mode = ConsensusMode(mode or cfg.consensus.mode)
    rows, a = _quality_profile(cfg)
    n = len(rows)
    rng = random.Random(f"trust|{seed}")

    specs = cfg.nodes.profiles
    raw = sample_truncated_normal(n, cfg.trust.mean, cfg.trust.variance, rng)
    if specs:
        raw = [p.trust if p.trust is not None else raw[j] for j, p in enumerate(specs)]
        byz = {j: tuple(p.byzantine) for j, p in enumerate(specs) if p.byzantine}
    else:
        b = cfg.nodes.byzantine
        if b.placement == "ids":
            chosen = list(b.ids)
        else:
            chosen = sorted(range(n), key=lambda j: (raw[j], j))[:b.count]
        byz = {}
        for i, j in enumerate(sorted(chosen)):
            # rotate the behavior list so different nodes start on different flags
            k = i % len(b.behaviors)
            byz[j] = tuple(b.behaviors[k:] + b.behaviors[:k])
    b_w = trust_weights(dict(enumerate(raw)))
    w = composite_weights(a, b_w, cfg.consensus.alpha, cfg.consensus.beta)

    scheme = KeyedHashScheme()
    profiles = tuple(
        LlmProfile(j, rows[j][1], rows[j][2], raw[j], byz.get(j, ()), scheme.keyring(j, seed))
        for j in range(n))

    act_cfg = cfg.nodes.byzantine.activation
    activation = {j: (1.0 - raw[j] if act_cfg == "trust" else float(act_cfg)) for j in range(n)}

    slot_s, pl = resolve_channel(cfg, p_l)
    tick = cfg.channel.tick_seconds
    slot = max(1, round(slot_s / tick))

    krng = KeyedRng(seed)
    latency = {}
    for j in range(n):
        explicit = specs[j].latency if specs else None
        spread = 1.0 + cfg.nodes.latency_spread * krng.uniform("latency-base", j)
        latency[j] = explicit if explicit is not None else slot_s * spread

    h = cfg.hsc
    hsc = HscParams(h.omega, h.gamma, h.lambda_penalty, min(h.k_max, n), h.n_init)
    c = cfg.consensus
    return Scenario(
        profiles=profiles, scheme=scheme, mode=mode, base_weights=w,
        trust={j: raw[j] for j in range(n)}, latency=latency, activation=activation,
        p_l=pl, slot=slot, tick_seconds=tick, jitter=cfg.channel.jitter_ticks,
        retry_max=c.retry_max, backoff_base=c.retry_base_ticks, pipeline=c.pipeline,
        hsc=hsc, hsc_k=h.k, latency_noise=h.latency_noise,
        recal=RecalibrationParams(c.penalty, c.reward, 1.0, c.smoothing),
        recalibrate=c.recalibrate, abc_k=c.abc_k, entry=cfg.workload.entry,
        reroute=cfg.workload.reroute, reelect=cfg.workload.reelect,
        header_only_prob=cfg.workload.header_only_prob,
        replicate=cfg.workload.replicate, seed=seed,
        scenario_id=scenario_id or cfg.scenario_id)


def run_simulation(cfg: ScenarioConfig | Scenario, mode=None, seed: int | None = None,
                   p_l: float | None = None, requests: int | None = None,
                   scenario_id: str | None = None) -> SimulationResult:
    """Execute every UE request of the workload and return records plus ledgers."""
    if isinstance(cfg, Scenario):
        sc = cfg if mode is None else replace(cfg, mode=ConsensusMode(mode))
        count = requests or 0
    else:
        sc = build_scenario(cfg, mode, seed, p_l, scenario_id)
        count = cfg.workload.requests if requests is None else requests
    return ConsensusEngine(sc).run(range(count))


def audit(result: SimulationResult) -> list[str]:
    """Post-run safety checks; returns a list of violations (empty when clean).

    Every leader chain must verify, every block must carry a valid commit
    certificate, no two replicas may hold different blocks at one
    (leader, height), and with replication on all honest replicas must agree
    byte for byte at quiescence."""
    from .core import verify_certificate, verify_chain

    sc = result.scenario
    problems = []
    fkeys = {p.node: p.keys.follower_pair.public for p in sc.profiles}
    chains = result.chains()
    for leader, chain in chains.items():
        if not verify_chain(chain):
            problems.append(f"chain {leader} fails verification")
        certs = result.certificates.get(leader, [])
        if len(certs) != len(chain):
            problems.append(f"chain {leader}: {len(chain)} blocks but {len(certs)} certificates")
        for b, c in zip(chain.blocks, certs):
            if not verify_certificate(c, b, sc.scheme, fkeys):
                problems.append(f"chain {leader} height {b.height}: invalid certificate")
    seen: dict[tuple[int, int], bytes] = {}
    for node, ledger in result.replicas.items():
        for leader, chain in ledger.chains.items():
            for b in chain.blocks:
                d = b.digest()
                if seen.setdefault((leader, b.height), d) != d:
                    problems.append(f"fork at leader {leader} height {b.height}")
    if sc.replicate:
        honest = [p.node for p in sc.profiles if not p.byzantine]
        ref = {j: c.encode() for j, c in chains.items()}
        for node in honest:
            for leader in ref:
                if result.replicas[node].chain(leader).encode() != ref[leader]:
                    problems.append(f"replica {node} diverges on chain {leader}")
    return problems
