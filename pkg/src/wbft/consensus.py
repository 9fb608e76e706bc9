"""Two-phase weighted consensus: prepare/commit steps, retry and recovery,
baseline modes, and an event-driven engine that runs them over the
simulated network."""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .core import (Block, Chain, CommitCertificate, CommitConfirm, HeightGap, KeyedHashScheme,
                   LedgerSet, LinkMismatch, LlmProfile, NodeId, Proof, QuorumFailure, VoteMsg,
                   ZERO_DIGEST, append_block, digest, make_certificate, make_proof,
                   verify_proof)
from .hsc import Clustering, HscParams, run_hsc
from .netsim import (EventQueue, KeyedRng, Medium, SimClock, behavior_active,
                     byzantine_mutate, deliver, encode_response, response_quality,
                     sample_response_quality)
from .weights import CompositeWeights, RecalibrationParams, RoundEvidence, recalibrate

ARQ_LIMIT = 100_000


class ConsensusMode(str, Enum):
    WBFT = "WBFT"
    WBFT_NO_HSC = "WBFT-no-HSC"
    WBFT_UNWEIGHTED = "WBFT-unweighted"
    PBFT = "PBFT"
    VAAP = "VaaP"
    ABC_PBFT = "ABC-PBFT"


@dataclass(frozen=True)
class ModeSpec:
    hsc: bool
    weighted: bool
    all_to_all: bool
    parallel: bool
    pipeline: bool
    static_committee: bool


MODE_SPECS = {
    ConsensusMode.WBFT: ModeSpec(True, True, False, True, True, False),
    ConsensusMode.WBFT_NO_HSC: ModeSpec(False, True, False, True, True, False),
    ConsensusMode.WBFT_UNWEIGHTED: ModeSpec(True, False, False, True, True, False),
    ConsensusMode.PBFT: ModeSpec(False, False, True, False, False, False),
    ConsensusMode.VAAP: ModeSpec(False, False, False, True, False, False),
    ConsensusMode.ABC_PBFT: ModeSpec(False, False, False, False, False, True),
}


class Phase(str, Enum):
    PREPARING = "preparing"
    COMMITTING = "committing"
    AWAITING = "awaiting"        # commit quorum reached, waiting for height h-1
    COMMITTED = "committed"
    FAILED = "failed"


class RetriesExhausted(Exception):
    pass


# ---------------------------------------------------------------- messages


@dataclass(frozen=True)
class PreparePayload:
    """Signed proposal. The response travels with its claimed digest so a
    follower can detect a substituted payload."""

    leader: NodeId
    round: int
    height: int
    attempt: int
    query: bytes
    response: bytes
    response_digest: bytes
    timestamp: int
    signature: object = None

    def signing_bytes(self) -> bytes:
        return b"|".join((b"prepare",
                          struct.pack(">IQQQQ", self.leader, self.round, self.height,
                                      self.attempt, self.timestamp),
                          digest(self.query), self.response_digest))


def leader_prepare(query: bytes, profile: LlmProfile, round: int, height: int, *,
                   response: bytes, scheme: KeyedHashScheme, attempt: int = 0,
                   timestamp: int = 0) -> PreparePayload:
    p = PreparePayload(profile.node, round, height, attempt, query, response, digest(response),
                       timestamp)
    return replace(p, signature=scheme.sign(p.signing_bytes(), profile.keys.leader_pair.secret,
                                            profile.node))


def verify_payload(payload: PreparePayload, scheme: KeyedHashScheme, leader_pk: bytes) -> bool:
    if payload.signature is None or payload.signature.signer != payload.leader:
        return False
    if digest(payload.response) != payload.response_digest:
        return False
    return scheme.verify(payload.signing_bytes(), payload.signature, leader_pk)


def sign_vote(vote: VoteMsg, profile: LlmProfile, scheme: KeyedHashScheme) -> VoteMsg:
    return replace(vote, signature=scheme.sign(vote.signing_bytes(),
                                               profile.keys.follower_pair.secret, profile.node))


def sign_confirm(c: CommitConfirm, profile: LlmProfile, scheme: KeyedHashScheme) -> CommitConfirm:
    return replace(c, signature=scheme.sign(c.signing_bytes(), profile.keys.follower_pair.secret,
                                            profile.node))


def follower_on_prepare(payload: PreparePayload, profile: LlmProfile, own_response: bytes, *,
                        scheme: KeyedHashScheme, leader_pk: bytes) -> VoteMsg | None:
    """Vote 1 iff the follower's own response is no better than the leader's;
    None (discard) when the payload fails verification."""
    if not verify_payload(payload, scheme, leader_pk):
        return None
    q_l = response_quality(payload.response)
    q_f = response_quality(own_response)
    value = int(q_l is not None and q_f is not None and q_f <= q_l)
    vote = VoteMsg(profile.node, payload.leader, payload.height, payload.round, payload.attempt,
                   value, payload.response_digest, own_response)
    return sign_vote(vote, profile, scheme)


def _valid_votes(votes: Iterable[VoteMsg], committee: Sequence[NodeId], scheme: KeyedHashScheme,
                 follower_keys: Mapping[NodeId, bytes]) -> list[VoteMsg]:
    members = set(committee)
    out = []
    for v in votes:
        if v.voter in members and v.signature is not None and v.signature.signer == v.voter \
                and scheme.verify(v.signing_bytes(), v.signature, follower_keys[v.voter]):
            out.append(v)
    return out


def leader_tally_prepare(state: "RoundState", weights: Mapping[NodeId, float],
                         scheme: KeyedHashScheme,
                         follower_keys: Mapping[NodeId, bytes]) -> Proof:
    """Proof over the committee's signed votes; raises ``QuorumFailure``."""
    votes = _valid_votes(state.votes.values(), state.committee, scheme, follower_keys)
    p = state.payload
    return make_proof(votes, weights, weights[state.leader], leader=state.leader,
                      height=state.height, round=state.round, attempt=state.attempt,
                      payload_digest=p.response_digest)


def follower_on_proof(proof: Proof, payload: PreparePayload | None, profile: LlmProfile, *,
                      scheme: KeyedHashScheme, follower_keys: Mapping[NodeId, bytes],
                      retained: dict[NodeId, bytes] | None = None,
                      behavior: str = "none") -> tuple[CommitConfirm | None, bool]:
    """Check the proof against the proposal this follower holds.

    Returns (confirm or None, leader_flagged). A valid proof replaces the
    retained proof of the previous height for that leader.
    """
    if behavior == "silent":
        return None, False
    valid = payload is not None and (
        (proof.leader, proof.height, proof.round, proof.attempt, proof.payload_digest)
        == (payload.leader, payload.height, payload.round, payload.attempt,
            payload.response_digest)) and verify_proof(proof, scheme, follower_keys)
    if not valid and behavior != "bad-vote":
        return None, payload is not None
    if valid and retained is not None:
        retained[proof.leader] = proof.digest()
    value = 0 if behavior == "bad-vote" else 1
    c = CommitConfirm(profile.node, proof.leader, proof.height, proof.round, proof.attempt, value,
                      proof.digest())
    return sign_confirm(c, profile, scheme), not valid


def leader_tally_commit(state: "RoundState", weights: Mapping[NodeId, float], chain: Chain,
                        timestamp: int) -> tuple[Block, CommitCertificate]:
    """Commit quorum over confirms, then the block extending ``chain``."""
    cert = make_certificate(state.proof, state.confirms.values(), weights)
    if chain.next_height != state.height:
        raise HeightGap(f"chain at {chain.next_height}, instance at {state.height}")
    block = Block.build(state.leader, state.height, state.round, chain.tip_digest, timestamp,
                        state.payload.response)
    return block, cert


def backoff(k: int, base: int) -> int:
    """Extra wait before retry k (k >= 1): base * 2**k."""
    return base * (1 << k)


def retry_vote(state: "RoundState", retry_max: int, base: int, now: int) -> "RoundState":
    """Next attempt of the same proposal with a fresh timestamp, or
    ``RetriesExhausted`` once ``retry_max`` retries were spent."""
    k = state.attempt + 1
    if k > retry_max:
        state.phase = Phase.FAILED
        raise RetriesExhausted(f"request {state.request} failed after {k} attempts")
    state.attempt = k
    state.phase = Phase.PREPARING
    state.votes.clear()
    state.confirms.clear()
    state.proof = None
    state.cert = None
    state.deadline = now + backoff(k, base)
    return state


def recover_transaction(follower: NodeId, wanted: bytes, holders: Mapping[NodeId, bytes | None],
                        reachable=lambda holder: True) -> tuple[bytes | None, int]:
    """GetData(wanted) to holders in NodeId order; the first answer whose
    digest matches is accepted. Returns (payload or None, messages sent)."""
    sent = 0
    for h in sorted(holders):
        if h == follower:
            continue
        sent += 1
        if not reachable(h):
            continue
        answer = holders[h]
        if answer is None:
            continue
        sent += 1
        if digest(answer) == wanted:
            return answer, sent
    return None, sent


# ----------------------------------------------------------------- scenario


@dataclass
class Scenario:
    """Static description of one simulation run."""

    profiles: tuple[LlmProfile, ...]
    scheme: KeyedHashScheme
    mode: ConsensusMode
    base_weights: CompositeWeights
    trust: dict[NodeId, float]
    latency: dict[NodeId, float]
    activation: dict[NodeId, float]
    p_l: float = 1.0
    slot: int = 1
    tick_seconds: float = 1e-4
    jitter: int = 0
    retry_max: int = 16
    backoff_base: int | None = None
    pipeline: bool = True
    hsc: HscParams = field(default_factory=HscParams)
    hsc_k: int | None = None
    latency_noise: float = 0.05
    recal: RecalibrationParams = field(default_factory=RecalibrationParams)
    recalibrate: bool = True
    abc_k: int | None = None
    entry: str | Sequence[NodeId] = "round-robin"
    reroute: str = "next"
    reelect: str = "always"
    header_only_prob: float = 0.0
    replicate: bool = True
    seed: int = 0
    scenario_id: str = "s0"

    @property
    def n(self) -> int:
        return len(self.profiles)

    @property
    def spec(self) -> ModeSpec:
        return MODE_SPECS[ConsensusMode(self.mode)]

    @property
    def pipelined(self) -> bool:
        return self.pipeline and self.spec.pipeline

    def retry_base(self) -> int:
        # default: one leader-follower round trip
        return self.backoff_base if self.backoff_base is not None else 2 * self.slot


@dataclass
class RoundRecord:
    scenario_id: str
    mode: str
    seed: int
    request_idx: int
    leader: NodeId
    K: int
    success: bool
    attempts: int
    latency_ticks: int
    messages: int
    committed_digest: str
    height: int = -1
    round: int = 0
    start_tick: int = 0
    finish_tick: int = 0
    relay_messages: int = 0


CSV_COLUMNS = ("scenario_id", "mode", "seed", "request_idx", "leader", "K", "success", "attempts",
               "latency_ticks", "messages", "committed_digest")


@dataclass
class RoundState:
    """One proposal instance (a UE request at one leader and height)."""

    request: int
    leader: NodeId
    height: int
    round: int
    attempt: int = 0
    phase: Phase = Phase.PREPARING
    payload: PreparePayload | None = None
    votes: dict[NodeId, VoteMsg] = field(default_factory=dict)
    proof: Proof | None = None
    confirms: dict[NodeId, CommitConfirm] = field(default_factory=dict)
    cert: CommitCertificate | None = None
    deadline: int = 0
    committee: tuple[NodeId, ...] = ()
    weights: dict[NodeId, float] = field(default_factory=dict)
    token: int = 0
    lane: int = 0
    started: int | None = None
    messages: int = 0
    received: dict[NodeId, PreparePayload] = field(default_factory=dict)
    flaggers: set = field(default_factory=set)
    violators: set = field(default_factory=set)
    leader_silent: bool = False

    @property
    def retry_count(self) -> int:
        return self.attempt


@dataclass
class SimulationResult:
    records: list[RoundRecord]
    replicas: dict[NodeId, LedgerSet]
    certificates: dict[NodeId, list[CommitCertificate]]
    makespan: int
    clusterings: dict[int, Clustering]
    scenario: Scenario

    def chains(self) -> dict[NodeId, Chain]:
        """Each leader's chain as held by the leader itself."""
        return {j: self.replicas[j].chain(j) for j in sorted(self.replicas)}


class _Replica:
    """Append-only list replica with in-order insertion of relayed blocks."""

    def __init__(self):
        self.blocks: dict[NodeId, list[Block]] = {}
        self.tips: dict[NodeId, bytes] = {}
        self.pending: dict[NodeId, dict[int, Block]] = {}

    def append(self, b: Block) -> None:
        chain = self.blocks.setdefault(b.leader, [])
        if b.height != len(chain):
            raise HeightGap(f"replica expected height {len(chain)}, got {b.height}")
        if b.prev_hash != self.tips.get(b.leader, ZERO_DIGEST):
            raise LinkMismatch(f"fork at leader {b.leader} height {b.height}")
        chain.append(b)
        self.tips[b.leader] = b.digest()

    def offer(self, b: Block) -> None:
        chain = self.blocks.setdefault(b.leader, [])
        if b.height < len(chain):
            if chain[b.height].digest() != b.digest():
                raise LinkMismatch(f"conflicting block at leader {b.leader} height {b.height}")
            return
        pend = self.pending.setdefault(b.leader, {})
        pend[b.height] = b
        while len(chain) in pend:
            self.append(pend.pop(len(chain)))

    def ledger(self) -> LedgerSet:
        return LedgerSet({j: Chain(j, tuple(bs)) for j, bs in sorted(self.blocks.items())})


# ------------------------------------------------------------------- engine


class ConsensusEngine:
    """Runs UE requests through the selected consensus mode on the event queue."""

    def __init__(self, sc: Scenario):
        self.sc = sc
        self.spec = sc.spec
        self.n = sc.n
        self.nodes = tuple(p.node for p in sc.profiles)
        self.prof = {p.node: p for p in sc.profiles}
        self.rng = KeyedRng(sc.seed)
        self.queue = EventQueue(SimClock(0, sc.tick_seconds))
        self.medium = Medium(sc.slot)
        self.follower_keys = {p.node: p.keys.follower_pair.public for p in sc.profiles}
        self.leader_keys = {p.node: p.keys.leader_pair.public for p in sc.profiles}
        self.views = {j: sc.base_weights for j in self.nodes}
        self.chains = {j: Chain(j) for j in self.nodes}
        self.replicas = {j: _Replica() for j in self.nodes}
        self.certs: dict[NodeId, list[CommitCertificate]] = {j: [] for j in self.nodes}
        self.retained = {j: {} for j in self.nodes}
        self.clusterings: dict[int, Clustering] = {}
        self.records: dict[int, RoundRecord] = {}
        self.lanes: dict[int, deque] = {}
        self.inflight: dict[int, list[RoundState]] = {}
        self.relay_messages = 0
        self._abc: tuple[NodeId, ...] | None = None
        self._tracked = self.spec.weighted or self.spec.hsc

    # -- committee and weights -------------------------------------------

    def _trust_view(self) -> dict[NodeId, float]:
        """System trust estimate: mean of every initiator's trust weights,
        scaled to a maximum of 1."""
        acc = {j: 0.0 for j in self.nodes}
        for v in self.views.values():
            b = v.b or v.w
            for j in self.nodes:
                acc[j] += b[j]
        top = max(acc.values())
        return {j: acc[j] / top for j in self.nodes}

    def clustering(self, epoch: int) -> Clustering:
        c = self.clusterings.get(epoch)
        if c is None:
            trust = self._trust_view()
            lat = {}
            for j in self.nodes:
                z = self.rng.normal("lat", epoch, j)
                lat[j] = self.sc.latency[j] * max(0.05, 1.0 + self.sc.latency_noise * z)
            seed = (self.sc.seed * 1_000_003 + epoch) % (2 ** 63)
            c = run_hsc(trust, lat, self.sc.hsc, seed=seed, k=self.sc.hsc_k)
            self.clusterings[epoch] = c
        return c

    def abc_committee(self) -> tuple[NodeId, ...]:
        if self._abc is None:
            k = self.sc.abc_k or self.clustering(0).k
            k = max(1, min(k, self.n))
            ranked = sorted(self.nodes, key=lambda j: (-self.sc.trust[j], j))
            self._abc = tuple(sorted(ranked[:k]))
        return self._abc

    def committee(self, leader: NodeId, epoch: int) -> tuple[NodeId, ...]:
        if self.spec.hsc:
            return tuple(sorted(set(self.clustering(epoch).ccns) | {leader}))
        if self.spec.static_committee:
            return tuple(sorted(set(self.abc_committee()) | {leader}))
        return self.nodes

    def quorum_weights(self, leader: NodeId, committee: Sequence[NodeId]) -> dict[NodeId, float]:
        if self.spec.weighted:
            return self.views[leader].restricted(committee)
        return {j: 1.0 / len(committee) for j in committee}

    # -- request routing -------------------------------------------------

    def entry_leader(self, r: int) -> NodeId:
        e = self.sc.entry
        if e == "round-robin":
            return self.nodes[r % self.n]
        if e == "random":
            return self.nodes[int(self.rng.uniform("entry", r) * self.n)]
        return list(e)[r % len(e)]

    def reroute_leader(self, state: RoundState) -> NodeId:
        pool = self.nodes
        if self.sc.reroute == "random":
            return pool[int(self.rng.uniform("reroute", state.request, state.attempt) * len(pool))]
        later = [j for j in pool if j > state.leader]
        return later[0] if later else pool[0]

    def lane_of(self, leader: NodeId) -> int:
        return leader if self.spec.parallel else -1

    # -- driver ----------------------------------------------------------

    def run(self, requests: Iterable[int]) -> SimulationResult:
        for r in requests:
            leader = self.entry_leader(r)
            self.lanes.setdefault(self.lane_of(leader), deque()).append((r, leader, None))
        for lane in sorted(self.lanes):
            self._try_start(lane, 0)
        handlers = {"start": self._on_start, "msg": self._on_msg, "deadline": self._on_deadline,
                    "timeout": self._on_timeout, "relay": self._on_relay,
                    "requeue": self._on_requeue}
        q = self.queue
        while q:
            ev = q.pop()
            handlers[ev.kind](ev.data, ev.at)
        records = [self.records[r] for r in sorted(self.records)]
        makespan = max((rec.finish_tick for rec in records), default=0)
        replicas = {j: self.replicas[j].ledger() for j in self.nodes}
        return SimulationResult(records, replicas, self.certs, makespan, self.clusterings,
                                self.sc)

    def _try_start(self, lane: int, now: int) -> None:
        waiting = self.lanes.get(lane)
        flying = self.inflight.setdefault(lane, [])
        while waiting:
            if flying:
                if not self.sc.pipelined or len(flying) >= 2:
                    return
                if flying[-1].phase not in (Phase.COMMITTING, Phase.AWAITING):
                    return
            r, leader, carry = waiting.popleft()
            st = RoundState(request=r, leader=leader, height=0, round=r // self.n, lane=lane)
            if carry is not None:
                st.attempt, st.started, st.messages = carry
            flying.append(st)
            self.queue.push(now, "start", (st, st.token))

    def _height_for(self, st: RoundState) -> int:
        ahead = 0
        for s in self.inflight.get(st.lane, ()):
            if s is st:
                break
            if s.leader == st.leader:
                ahead += 1
        return self.chains[st.leader].next_height + ahead

    # -- attempt lifecycle -----------------------------------------------

    def _on_start(self, data, now: int) -> None:
        st, tok = data
        if tok != st.token or st.phase in (Phase.COMMITTED,):
            return
        st.token += 1
        sc = self.sc
        st.phase = Phase.PREPARING
        st.votes.clear()
        st.confirms.clear()
        st.received.clear()
        st.flaggers.clear()
        st.violators.clear()
        st.proof = st.cert = st.payload = None
        st.leader_silent = False
        if st.started is None:
            st.started = now
        st.height = self._height_for(st)
        st.committee = self.committee(st.leader, st.round)
        st.weights = self.quorum_weights(st.leader, st.committee)
        m = len(st.committee)
        prof = self.prof[st.leader]
        beh = behavior_active(prof, sc.activation[st.leader], self.rng, st.request, st.attempt)
        if beh == "silent":
            st.leader_silent = True
            self.queue.push(now + 2 * m * sc.slot, "timeout", (st, st.token), prio=1)
            return
        q_l = sample_response_quality(prof, self.rng.draw("q", st.request, st.attempt, st.leader))
        response = encode_response(st.leader, st.request, st.attempt, q_l)
        query = f"Q|req={st.request}".encode()
        payload = leader_prepare(query, prof, st.round, st.height, response=response,
                                 scheme=sc.scheme, attempt=st.attempt, timestamp=now)
        st.payload = payload
        sent = byzantine_mutate(payload, beh)
        chan = (st.request, st.token)
        self.medium.release(chan)
        at = self.medium.reserve(chan, now)
        key = (st.request, st.attempt)
        for j in st.committee:
            if j == st.leader:
                continue
            st.messages += 1
            header_only = sc.header_only_prob > 0 and \
                self.rng.uniform("hdr", st.request, st.attempt, j) < sc.header_only_prob
            deliver(("prepare", st, st.token, (sent, header_only)), st.leader, j, sc.p_l,
                    self.rng, queue=self.queue, at=at, key=("prep",) + key, kind="msg",
                    jitter=sc.jitter)
        st.deadline = now + m * sc.slot
        self.queue.push(st.deadline, "deadline", (st, st.token, Phase.PREPARING), prio=1)

    def _on_msg(self, data, now: int) -> None:
        (kind, st, tok, body), src, dst = data
        if tok != st.token:
            return
        if kind == "prepare":
            self._follower_prepare(st, body, dst, now)
        elif kind == "vote":
            if st.phase == Phase.PREPARING:
                st.votes[src] = body
                if len(st.votes) == len(st.committee) - 1:
                    self._tally_prepare(st, now)
        elif kind == "proof":
            self._follower_proof(st, body, dst, now)
        elif kind == "confirm":
            if st.phase == Phase.COMMITTING:
                st.confirms[src] = body
                if len(st.confirms) == len(st.committee) - 1:
                    self._tally_commit(st, now)

    def _behavior(self, st: RoundState, node: NodeId) -> str:
        return behavior_active(self.prof[node], self.sc.activation[node], self.rng, st.request,
                               st.attempt)

    def _uplink(self, st: RoundState, kind: str, msg, src: NodeId, now: int, copies: int = 1):
        at = self.medium.reserve((st.request, st.token), now)
        st.messages += copies
        deliver((kind, st, st.token, msg), src, st.leader, self.sc.p_l, self.rng,
                queue=self.queue, at=at, key=(kind, st.request, st.attempt), kind="msg",
                jitter=self.sc.jitter)

    def _follower_prepare(self, st: RoundState, body, j: NodeId, now: int) -> None:
        payload, header_only = body
        sc = self.sc
        beh = self._behavior(st, j)
        if beh == "silent":
            return
        if header_only:
            holders = {h: self._held_response(st, h) for h in st.committee}
            got, sent = recover_transaction(
                j, payload.response_digest, holders,
                reachable=lambda h: self.rng.uniform("getdata", st.request, st.attempt, j, h)
                < sc.p_l * sc.p_l)
            st.messages += sent
            if got is None:
                return
            payload = replace(payload, response=got)
        prof = self.prof[j]
        q_f = sample_response_quality(prof, self.rng.draw("q", st.request, st.attempt, j))
        own = encode_response(j, st.request, st.attempt, q_f)
        vote = follower_on_prepare(payload, prof, own, scheme=sc.scheme,
                                   leader_pk=self.leader_keys[st.leader])
        if vote is None:
            st.flaggers.add(j)
            return
        st.received[j] = payload
        if beh == "bad-vote":
            vote = byzantine_mutate(vote, beh, resign=lambda v: sign_vote(v, prof, sc.scheme))
        copies = self.n - 1 if self.spec.all_to_all else 1
        self._uplink(st, "vote", vote, j, now, copies)

    def _held_response(self, st: RoundState, h: NodeId) -> bytes | None:
        if h == st.leader:
            beh = self._behavior(st, h)
            sent = byzantine_mutate(st.payload, beh) if beh != "silent" else None
            return None if sent is None else sent.response
        p = st.received.get(h)
        if p is None:
            return None
        if self._behavior(st, h) == "fake-response":
            return b"FAKE|" + p.response
        return p.response

    def _tally_prepare(self, st: RoundState, now: int) -> None:
        if st.phase != Phase.PREPARING:
            return
        sc = self.sc
        self._check_votes(st)
        try:
            proof = leader_tally_prepare(st, st.weights, sc.scheme, self.follower_keys)
        except QuorumFailure:
            self._attempt_failed(st, now)
            return
        st.proof = proof
        st.phase = Phase.COMMITTING
        beh = self._behavior(st, st.leader)
        sent = byzantine_mutate(proof, beh) if beh == "invalid-proof" else proof
        at = self.medium.reserve((st.request, st.token), now)
        for j in st.committee:
            if j == st.leader:
                continue
            st.messages += 1
            deliver(("proof", st, st.token, sent), st.leader, j, sc.p_l, self.rng,
                    queue=self.queue, at=at, key=("proof", st.request, st.attempt), kind="msg",
                    jitter=sc.jitter)
        st.deadline = now + len(st.committee) * sc.slot
        self.queue.push(st.deadline, "deadline", (st, st.token, Phase.COMMITTING), prio=1)
        self._try_start(st.lane, now)

    def _check_votes(self, st: RoundState) -> None:
        """A vote whose bit contradicts the attached response is a detectable
        protocol violation."""
        q_l = response_quality(st.payload.response)
        for j, v in st.votes.items():
            q_f = response_quality(v.follower_response)
            if q_f is None or q_l is None:
                continue
            if v.value != int(q_f <= q_l):
                st.violators.add(j)

    def _follower_proof(self, st: RoundState, proof: Proof, j: NodeId, now: int) -> None:
        sc = self.sc
        beh = self._behavior(st, j)
        if beh == "silent":
            return
        payload = st.received.get(j)
        if payload is None:
            # missed the proposal: fetch the response by its hash before confirming
            holders = {h: self._held_response(st, h) for h in st.committee}
            got, sent = recover_transaction(
                j, proof.payload_digest, holders,
                reachable=lambda h: self.rng.uniform("getdata", st.request, st.attempt, j, h)
                < sc.p_l * sc.p_l)
            st.messages += sent
            if got is None:
                return
            payload = replace(st.payload, response=got)
        confirm, flagged = follower_on_proof(proof, payload, self.prof[j], scheme=sc.scheme,
                                             follower_keys=self.follower_keys,
                                             retained=self.retained[j], behavior=beh)
        if flagged and beh == "none":
            st.flaggers.add(j)
        if confirm is not None:
            self._uplink(st, "confirm", confirm, j, now)

    def _tally_commit(self, st: RoundState, now: int) -> None:
        if st.phase != Phase.COMMITTING:
            return
        for j, c in st.confirms.items():
            if c.value != 1:
                st.violators.add(j)
        try:
            st.cert = make_certificate(st.proof, st.confirms.values(), st.weights)
        except QuorumFailure:
            self._attempt_failed(st, now)
            return
        st.phase = Phase.AWAITING
        self._drain(st.leader, st.lane, now)

    def _on_deadline(self, data, now: int) -> None:
        st, tok, phase = data
        if tok != st.token or st.phase != phase:
            return
        if phase == Phase.PREPARING:
            self._tally_prepare(st, now)
        else:
            self._tally_commit(st, now)

    def _on_timeout(self, data, now: int) -> None:
        st, tok = data
        if tok == st.token:
            self._attempt_failed(st, now)

    # -- outcomes --------------------------------------------------------

    def _drain(self, leader: NodeId, lane: int, now: int) -> None:
        """Append awaiting instances strictly in height order."""
        progressed = True
        while progressed:
            progressed = False
            for st in list(self.inflight.get(lane, ())):
                if st.leader == leader and st.phase == Phase.AWAITING \
                        and st.height == self.chains[leader].next_height:
                    self._commit(st, now)
                    progressed = True
        self._try_start(lane, now)

    def _commit(self, st: RoundState, now: int) -> None:
        block, cert = leader_tally_commit(st, st.weights, self.chains[st.leader], now)
        self.chains[st.leader] = append_block(self.chains[st.leader], block)
        self.certs[st.leader].append(cert)
        st.phase = Phase.COMMITTED
        self.inflight[st.lane].remove(st)
        self.medium.release((st.request, st.token))
        relay = self._disseminate(block, st, now)
        self._record(st, now, True, block.digest().hex(), relay)
        self._evidence(st)

    def _disseminate(self, block: Block, st: RoundState, now: int) -> int:
        """Leader to CCNs, CCNs to their ECNs (direct to all without HSC);
        each hop retransmits until delivered."""
        self.replicas[st.leader].offer(block)
        if not self.sc.replicate:
            return 0
        sent = 0
        arrival = {st.leader: now}
        if self.spec.hsc:
            cl = self.clustering(st.round)
            first = [c for c in cl.ccns if c != st.leader]
            plan = [(st.leader, c) for c in first]
            plan += [(cl.ccn_of(j), j) for j in self.nodes if j != st.leader and j not in first]
        else:
            plan = [(st.leader, j) for j in self.nodes if j != st.leader]
        for src, dst in plan:
            if src not in arrival:
                src = st.leader
            tries = 1
            while self.rng.uniform("relay", st.request, block.height, src, dst, tries) >= self.sc.p_l:
                tries += 1
                if tries > ARQ_LIMIT:
                    raise RuntimeError("relay did not get through")
            sent += tries
            arrival[dst] = arrival[src] + tries * self.sc.slot
            self.queue.push(arrival[dst], "relay", (block, dst))
        self.relay_messages += sent
        return sent

    def _on_relay(self, data, now: int) -> None:
        block, dst = data
        self.replicas[dst].offer(block)

    def _attempt_failed(self, st: RoundState, now: int) -> None:
        self._evidence(st)
        self.medium.release((st.request, st.token))
        st.token += 1
        sc = self.sc
        lane = st.lane
        reroute = st.leader_silent or bool(st.flaggers) or self.sc.reelect == "always"
        try:
            retry_vote(st, sc.retry_max, sc.retry_base(), now)
        except RetriesExhausted:
            self.inflight[lane].remove(st)
            self._reheight(lane, st.leader, st.height, now)
            self._record(st, now, False, "", 0)
            self._try_start(lane, now)
            return
        wake = st.deadline
        old_leader, old_height = st.leader, st.height
        if reroute:
            st.leader = self.reroute_leader(st)
        new_lane = self.lane_of(st.leader)
        if new_lane != lane:
            self.inflight[lane].remove(st)
            self._reheight(lane, old_leader, old_height, now)
            self.queue.push(wake, "requeue", (st, new_lane))
            self._try_start(lane, now)
        else:
            self.queue.push(wake, "start", (st, st.token))

    def _on_requeue(self, data, now: int) -> None:
        st, lane = data
        self.lanes.setdefault(lane, deque()).appendleft(
            (st.request, st.leader, (st.attempt, st.started, st.messages)))
        self._try_start(lane, now)

    def _reheight(self, lane: int, leader: NodeId, height: int, now: int) -> None:
        """Successors of a removed instance restart one height lower."""
        for s in self.inflight.get(lane, ()):
            if s.leader == leader and s.height > height and s.phase != Phase.FAILED:
                self.medium.release((s.request, s.token))
                s.token += 1
                s.phase = Phase.PREPARING
                self.queue.push(now, "start", (s, s.token))

    def _record(self, st: RoundState, now: int, ok: bool, dig: str, relay: int) -> None:
        self.records[st.request] = RoundRecord(
            self.sc.scenario_id, ConsensusMode(self.sc.mode).value, self.sc.seed, st.request,
            st.leader, len(st.committee), ok, st.attempt + 1, now - (st.started or 0),
            st.messages, dig, st.height if ok else -1, st.round, st.started or 0, now, relay)

    # -- recalibration ---------------------------------------------------

    def _evidence(self, st: RoundState) -> None:
        if not (self._tracked and self.sc.recalibrate):
            return
        q_l = response_quality(st.payload.response) if st.payload else None
        members = set(st.committee)
        ev = {}
        for j in self.nodes:
            if j == st.leader:
                ev[j] = RoundEvidence(False, True, None)
                continue
            if j not in members:
                ev[j] = RoundEvidence(False, False, None)
                continue
            v = st.votes.get(j)
            outcome = None
            if v is not None and q_l is not None:
                q_f = response_quality(v.follower_response)
                outcome = None if q_f is None else float(q_f >= q_l)
            seen = v is not None or j in st.confirms
            ev[j] = RoundEvidence(j in st.violators, seen, outcome)
        self.views[st.leader] = recalibrate(self.views[st.leader], ev, self.sc.recal)
        for f in sorted(st.flaggers):
            fev = {j: RoundEvidence(j == st.leader, j == f, None) for j in self.nodes}
            self.views[f] = recalibrate(self.views[f], fev, self.sc.recal)


def run_round(scenario: Scenario, request_idx: int = 0) -> RoundRecord:
    """Drive a single UE request to completion on a fresh network."""
    return ConsensusEngine(scenario).run([request_idx]).records[0]
