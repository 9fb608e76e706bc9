from dataclasses import replace

import pytest

from conftest import equal_profiles, lossless_config
from wbft.config import parse_config
from wbft.consensus import (ConsensusEngine, ConsensusMode, Phase, RetriesExhausted, RoundState,
                            backoff, follower_on_prepare, follower_on_proof, leader_prepare,
                            leader_tally_commit, leader_tally_prepare, recover_transaction,
                            retry_vote, run_round, sign_confirm)
from wbft.core import (Chain, CommitConfirm, KeyedHashScheme, LlmProfile, QuorumFailure,
                       digest, verify_chain)
from wbft.netsim import byzantine_mutate, encode_response
from wbft.simulation import audit, build_scenario, run_simulation

MODES = [m.value for m in ConsensusMode]


@pytest.fixture
def net():
    s = KeyedHashScheme()
    profs = {j: LlmProfile(j, 80, 0, 0.5, (), s.keyring(j)) for j in range(4)}
    fkeys = {j: p.keys.follower_pair.public for j, p in profs.items()}
    return s, profs, fkeys


def _prepare(s, profs, q_l=85.0):
    return leader_prepare(b"Q", profs[0], 0, 0, response=encode_response(0, 0, 0, q_l), scheme=s)


def test_follower_vote_rule(net):
    s, profs, _ = net
    p = _prepare(s, profs, 85.0)
    lpk = profs[0].keys.leader_pair.public
    assert follower_on_prepare(p, profs[1], encode_response(1, 0, 0, 70), scheme=s,
                               leader_pk=lpk).value == 1
    p = _prepare(s, profs, 70.0)
    assert follower_on_prepare(p, profs[1], encode_response(1, 0, 0, 85), scheme=s,
                               leader_pk=lpk).value == 0


def test_tampered_payload_discarded(net):
    s, profs, _ = net
    p = _prepare(s, profs)
    lpk = profs[0].keys.leader_pair.public
    assert follower_on_prepare(replace(p, height=5), profs[1], b"R|q=1", scheme=s,
                               leader_pk=lpk) is None
    fake = byzantine_mutate(p, "fake-response")
    assert follower_on_prepare(fake, profs[1], b"R|q=1", scheme=s, leader_pk=lpk) is None


def _state(s, profs, fkeys, yes=(1, 2, 3), weights=None):
    p = _prepare(s, profs)
    st = RoundState(request=0, leader=0, height=0, round=0)
    st.payload = p
    st.committee = (0, 1, 2, 3)
    lpk = profs[0].keys.leader_pair.public
    for j in (1, 2, 3):
        q = 70 if j in yes else 90
        st.votes[j] = follower_on_prepare(p, profs[j], encode_response(j, 0, 0, q), scheme=s,
                                          leader_pk=lpk)
    st.weights = weights or {j: 0.25 for j in range(4)}
    return st


def test_tally_prepare_equal_weights(net):
    s, profs, fkeys = net
    st = _state(s, profs, fkeys, yes=(1, 2))
    proof = leader_tally_prepare(st, st.weights, s, fkeys)
    assert proof.affirmative_weight() == pytest.approx(0.75)


def test_tally_prepare_exact_two_thirds_fails(net):
    s, profs, fkeys = net
    w = {0: 1 / 3, 1: 1 / 3, 2: 1 / 6, 3: 1 / 6}
    st = _state(s, profs, fkeys, yes=(1,), weights=w)
    with pytest.raises(QuorumFailure):
        leader_tally_prepare(st, w, s, fkeys)


def test_follower_on_proof_paths(net):
    s, profs, fkeys = net
    st = _state(s, profs, fkeys)
    proof = leader_tally_prepare(st, st.weights, s, fkeys)
    retained = {0: b"old"}
    c, flagged = follower_on_proof(proof, st.payload, profs[1], scheme=s, follower_keys=fkeys,
                                   retained=retained)
    assert c.value == 1 and not flagged and retained[0] == proof.digest()
    forged = byzantine_mutate(proof, "invalid-proof")
    c, flagged = follower_on_proof(forged, st.payload, profs[2], scheme=s, follower_keys=fkeys)
    assert c is None and flagged
    c, _ = follower_on_proof(proof, st.payload, profs[3], scheme=s, follower_keys=fkeys,
                             behavior="bad-vote")
    assert c.value == 0


def test_tally_commit_builds_block(net):
    s, profs, fkeys = net
    st = _state(s, profs, fkeys)
    st.proof = leader_tally_prepare(st, st.weights, s, fkeys)
    for j in (1, 2, 3):
        st.confirms[j] = sign_confirm(CommitConfirm(j, 0, 0, 0, 0, 1, st.proof.digest()),
                                      profs[j], s)
    block, cert = leader_tally_commit(st, st.weights, Chain(0), 10)
    assert block.height == 0 and block.response == st.payload.response
    assert cert.confirm_weight() == pytest.approx(1.0)
    st.confirms = {1: st.confirms[1]}
    with pytest.raises(QuorumFailure):
        leader_tally_commit(st, st.weights, Chain(0), 10)


def test_backoff_and_retry_exhaustion():
    assert backoff(3, 10) == 80
    st = RoundState(request=0, leader=0, height=0, round=0)
    for k in range(1, 4):
        retry_vote(st, 3, 10, 100)
        assert st.attempt == k and st.deadline == 100 + 10 * 2 ** k
    with pytest.raises(RetriesExhausted):
        retry_vote(st, 3, 10, 100)
    assert st.phase == Phase.FAILED


def test_recover_transaction():
    payload = b"resp"
    d = digest(payload)
    got, _ = recover_transaction(0, d, {0: None, 1: None, 2: payload})
    assert got == payload
    got, sent = recover_transaction(0, d, {1: b"wrong", 2: payload})
    assert got == payload and sent == 4
    got, _ = recover_transaction(0, d, {1: None, 2: None})
    assert got is None


@pytest.mark.parametrize("mode", MODES)
def test_honest_lossless_commits_first_attempt(mode):
    res = run_simulation(lossless_config(mode=mode, requests=30), mode=mode)
    assert all(r.success and r.attempts == 1 for r in res.records)
    assert audit(res) == []


@pytest.mark.parametrize("mode", MODES)
def test_lossless_latency_is_two_m_slots(mode):
    cfg = lossless_config(mode=mode, requests=1)
    sc = build_scenario(cfg, mode)
    rec = run_round(sc)
    assert rec.success and rec.latency_ticks == 2 * rec.K * sc.slot


def test_zero_requests():
    res = run_simulation(lossless_config(requests=0))
    assert res.records == [] and all(len(c) == 0 for c in res.chains().values())


def test_pbft_and_vaap_pair_exactly():
    cfg = parse_config({"nodes": {"byzantine": {"count": 3}},
                        "channel": {"tick_seconds": 1e-6, "target_pl": 0.8},
                        "workload": {"requests": 60}})
    a = run_simulation(cfg, "PBFT", 4).records
    b = run_simulation(cfg, "VaaP", 4).records
    assert [r.success for r in a] == [r.success for r in b]
    assert [r.attempts for r in a] == [r.attempts for r in b]


def test_pipeline_overlaps_and_commits_in_order():
    cfg = lossless_config(requests=40)
    sc = build_scenario(cfg, "WBFT")
    eng = ConsensusEngine(sc)
    peak = {"live": 0}
    orig = eng._tally_prepare

    def spy(st, now):
        orig(st, now)
        peak["live"] = max(peak["live"], max(len(v) for v in eng.inflight.values()))
    eng._tally_prepare = spy
    res = eng.run(range(40))
    assert peak["live"] == 2
    for chain in res.chains().values():
        assert verify_chain(chain)
        assert [b.height for b in chain.blocks] == list(range(len(chain)))
    stamps = {}
    for r in res.records:
        stamps.setdefault(r.leader, []).append((r.height, r.finish_tick))
    for pairs in stamps.values():
        pairs.sort()
        assert all(a[1] <= b[1] for a, b in zip(pairs, pairs[1:]))


def test_pipelining_shortens_lossless_makespan():
    cfg = lossless_config(requests=100)
    off = cfg.model_copy(deep=True)
    off.consensus.pipeline = False
    assert run_simulation(cfg, "WBFT", 1).makespan < run_simulation(off, "WBFT", 1).makespan


def test_invalid_proof_leader_is_rerouted():
    profs = equal_profiles(4, {0: ["invalid-proof"]})
    cfg = parse_config({"nodes": {"profiles": profs, "byzantine": {"activation": 1.0}},
                        "consensus": {"mode": "VaaP"}, "hsc": {"k_max": 4},
                        "channel": {"target_pl": None, "link_success": 1.0},
                        "workload": {"requests": 1, "entry": [0]}})
    rec = run_simulation(cfg).records[0]
    assert rec.success and rec.attempts == 2 and rec.leader == 1


def test_silent_leader_times_out_then_commits():
    profs = equal_profiles(4, {0: ["silent"]})
    cfg = parse_config({"nodes": {"profiles": profs, "byzantine": {"activation": 1.0}},
                        "consensus": {"mode": "VaaP", "retry_base_ticks": 0},
                        "hsc": {"k_max": 4},
                        "channel": {"target_pl": None, "link_success": 1.0},
                        "workload": {"requests": 1, "entry": [0]}})
    sc = build_scenario(cfg)
    rec = run_round(sc)
    assert rec.success and rec.attempts == 2
    # one silent attempt (2*m slots) plus one full attempt
    assert rec.latency_ticks == 2 * 4 * sc.slot * 2


def test_wbft_messages_linear_in_committee():
    res = run_simulation(lossless_config(n=20, requests=40))
    assert all(r.messages <= 6 * r.K for r in res.records)


def test_pbft_messages_quadratic():
    res = run_simulation(lossless_config(n=12, requests=5, mode="PBFT"))
    assert all(r.messages >= 11 ** 2 for r in res.records)


def test_abc_committee_static_top_trust():
    cfg = lossless_config(requests=30, mode="ABC-PBFT")
    sc = build_scenario(cfg, "ABC-PBFT")
    eng = ConsensusEngine(sc)
    top = eng.abc_committee()
    ranked = sorted(sc.trust, key=lambda j: -sc.trust[j])
    assert set(top) == set(ranked[:len(top)])
    eng.run(range(30))
    assert eng.abc_committee() == top
