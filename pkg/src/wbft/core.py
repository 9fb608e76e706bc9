"""Shared domain types: keys, signed messages, proofs, blocks and chains.

Signatures use a keyed-hash stand-in (HMAC-SHA256) behind ``KeyedHashScheme``;
public keys are resolved to their secret through the scheme's registry, which
plays the role of a PKI oracle inside one simulated scenario.
"""
from __future__ import annotations

import hashlib
import hmac
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

NodeId = int

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)

# Sums landing within this distance of 2/3 count as "not above" it, so an
# exact-2/3 weight never passes because of float rounding.
QUORUM_EPS = 1e-12
QUORUM_THRESHOLD = 2.0 / 3.0

BEHAVIORS = ("none", "bad-vote", "invalid-proof", "fake-response", "silent")


class QuorumFailure(Exception):
    """Affirmative weight did not strictly exceed 2/3."""

    def __init__(self, weight: float):
        super().__init__(f"affirmative weight {weight:.6f} does not exceed 2/3")
        self.weight = weight


class ChainError(ValueError):
    pass


class LinkMismatch(ChainError):
    pass


class HeightGap(ChainError):
    pass


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def exceeds_quorum(weight: float) -> bool:
    return weight > QUORUM_THRESHOLD + QUORUM_EPS


# --------------------------------------------------------------------------- keys


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    secret: bytes | None = field(default=None, repr=False)


@dataclass(frozen=True)
class KeyRing:
    leader_pair: KeyPair
    follower_pair: KeyPair

    def public(self) -> "KeyRing":
        return KeyRing(KeyPair(self.leader_pair.public), KeyPair(self.follower_pair.public))


@dataclass(frozen=True)
class Signature:
    signer: NodeId
    tag: bytes


class KeyedHashScheme:
    """HMAC tags keyed by the signer's secret; verification looks the secret up
    from the public key in this scheme's registry."""

    def __init__(self) -> None:
        self._secrets: dict[bytes, bytes] = {}

    def keygen(self, seed: bytes) -> KeyPair:
        secret = digest(b"wbft-secret|" + seed)
        public = digest(b"wbft-public|" + secret)
        self._secrets[public] = secret
        return KeyPair(public, secret)

    def keyring(self, node: NodeId, scenario_seed: int = 0) -> KeyRing:
        base = f"{scenario_seed}|{node}".encode()
        return KeyRing(self.keygen(base + b"|leader"), self.keygen(base + b"|follower"))

    def sign(self, msg: bytes, secret: bytes, signer: NodeId) -> Signature:
        return Signature(signer, hmac.digest(secret, msg, "sha256"))

    def verify(self, msg: bytes, sig: Signature, public: bytes) -> bool:
        secret = self._secrets.get(public)
        if secret is None:
            return False
        expected = hmac.digest(secret, msg, "sha256")
        return hmac.compare_digest(expected, sig.tag)


# ------------------------------------------------------------------ profiles


@dataclass(frozen=True)
class LlmProfile:
    node: NodeId
    quality_mean: float
    quality_stddev: float
    trust_param: float
    byzantine: tuple[str, ...] = ()
    keys: KeyRing | None = None

    def __post_init__(self):
        if not 0.0 <= self.quality_mean <= 100.0:
            raise ValueError(f"quality_mean {self.quality_mean} outside [0, 100]")
        if self.quality_stddev < 0:
            raise ValueError("quality_stddev must be non-negative")
        if not 0.0 < self.trust_param < 1.0:
            raise ValueError(f"trust_param {self.trust_param} outside (0, 1)")
        for b in self.byzantine:
            if b not in BEHAVIORS or b == "none":
                raise ValueError(f"unknown byzantine behavior {b!r}")

    @property
    def is_byzantine(self) -> bool:
        return bool(self.byzantine)


# ------------------------------------------------------------------ messages


@dataclass(frozen=True)
class VoteMsg:
    voter: NodeId
    leader: NodeId
    height: int
    round: int
    attempt: int
    value: int
    payload_digest: bytes
    follower_response: bytes = b""
    signature: Signature | None = None

    def signing_bytes(self) -> bytes:
        return b"|".join((
            b"vote",
            struct.pack(">IIQQQB", self.voter, self.leader, self.height, self.round,
                        self.attempt, self.value),
            self.payload_digest,
            digest(self.follower_response),
        ))


@dataclass(frozen=True)
class CommitConfirm:
    voter: NodeId
    leader: NodeId
    height: int
    round: int
    attempt: int
    value: int
    proof_digest: bytes
    signature: Signature | None = None

    def signing_bytes(self) -> bytes:
        return b"|".join((
            b"confirm",
            struct.pack(">IIQQQB", self.voter, self.leader, self.height, self.round,
                        self.attempt, self.value),
            self.proof_digest,
        ))


@dataclass(frozen=True)
class Proof:
    """Bundle of signed affirmative votes plus the weights they were counted at."""

    leader: NodeId
    height: int
    round: int
    attempt: int
    payload_digest: bytes
    votes: tuple[VoteMsg, ...]
    weights: tuple[tuple[NodeId, float], ...]
    leader_weight: float
    aggregate_tag: bytes

    def affirmative_weight(self) -> float:
        w = dict(self.weights)
        return self.leader_weight + sum(w.get(v.voter, 0.0) for v in self.votes if v.value == 1)

    def digest(self) -> bytes:
        return digest(encode_proof(self))


def _aggregate_tag(leader: NodeId, height: int, round_: int, attempt: int,
                   payload_digest: bytes, votes: Sequence[VoteMsg],
                   weights: Sequence[tuple[NodeId, float]], leader_weight: float) -> bytes:
    h = hashlib.sha256()
    h.update(struct.pack(">IQQQ", leader, height, round_, attempt))
    h.update(payload_digest)
    for v in votes:
        h.update(v.signature.tag if v.signature else ZERO_DIGEST)
    for node, w in weights:
        h.update(struct.pack(">Id", node, w))
    h.update(struct.pack(">d", leader_weight))
    return h.digest()


def make_proof(votes: Iterable[VoteMsg], weights: Mapping[NodeId, float], leader_weight: float,
               *, leader: NodeId | None = None, height: int | None = None,
               round: int | None = None, attempt: int | None = None,
               payload_digest: bytes | None = None) -> Proof:
    """Build a proof from signature-checked votes, or raise ``QuorumFailure``.

    Votes must all reference the same (leader, height, round, attempt, payload).
    Only affirmative votes are embedded.
    """
    weights = getattr(weights, "w", weights)
    votes = list(votes)
    if votes:
        ref = votes[0]
        leader = ref.leader if leader is None else leader
        height = ref.height if height is None else height
        round = ref.round if round is None else round
        attempt = ref.attempt if attempt is None else attempt
        payload_digest = ref.payload_digest if payload_digest is None else payload_digest
    if None in (leader, height, round, attempt, payload_digest):
        raise ValueError("empty vote list needs explicit instance fields")

    seen: set[NodeId] = set()
    affirmative = []
    for v in votes:
        if (v.leader, v.height, v.round, v.attempt, v.payload_digest) != (
                leader, height, round, attempt, payload_digest):
            raise ValueError(f"vote from {v.voter} references a different instance")
        if v.voter in seen or v.voter == leader:
            continue
        seen.add(v.voter)
        if v.value == 1:
            affirmative.append(v)
    affirmative.sort(key=lambda v: v.voter)
    total = leader_weight + sum(weights[v.voter] for v in affirmative)
    if not exceeds_quorum(total):
        raise QuorumFailure(total)
    wts = tuple((v.voter, float(weights[v.voter])) for v in affirmative)
    tag = _aggregate_tag(leader, height, round, attempt, payload_digest, affirmative, wts,
                         leader_weight)
    return Proof(leader, height, round, attempt, payload_digest, tuple(affirmative), wts,
                 float(leader_weight), tag)


def verify_proof(proof: Proof, scheme: KeyedHashScheme,
                 follower_keys: Mapping[NodeId, bytes]) -> bool:
    """Re-check a proof from its contents alone: signatures, instance binding,
    aggregate tag and the strict 2/3 weight rule."""
    weights = dict(proof.weights)
    if len(weights) != len(proof.weights) or len(proof.votes) != len(weights):
        return False
    if not 0.0 <= proof.leader_weight <= 1.0:
        return False
    if sum(weights.values()) + proof.leader_weight > 1.0 + 1e-9:
        return False
    for v in proof.votes:
        if (v.leader, v.height, v.round, v.attempt, v.payload_digest) != (
                proof.leader, proof.height, proof.round, proof.attempt, proof.payload_digest):
            return False
        if v.value != 1 or v.voter not in weights or v.signature is None:
            return False
        if v.signature.signer != v.voter:
            return False
        pk = follower_keys.get(v.voter)
        if pk is None or not scheme.verify(v.signing_bytes(), v.signature, pk):
            return False
    expected = _aggregate_tag(proof.leader, proof.height, proof.round, proof.attempt,
                              proof.payload_digest, proof.votes, proof.weights,
                              proof.leader_weight)
    if not hmac.compare_digest(expected, proof.aggregate_tag):
        return False
    return exceeds_quorum(proof.affirmative_weight())


@dataclass(frozen=True)
class CommitCertificate:
    """A prepare proof plus the signed commit confirmations that closed it."""

    proof: Proof
    confirms: tuple[CommitConfirm, ...]
    weights: tuple[tuple[NodeId, float], ...]

    def confirm_weight(self) -> float:
        w = dict(self.weights)
        return self.proof.leader_weight + sum(w.get(c.voter, 0.0) for c in self.confirms
                                              if c.value == 1)


def make_certificate(proof: Proof, confirms: Iterable[CommitConfirm],
                     weights: Mapping[NodeId, float]) -> CommitCertificate:
    """Bundle affirmative confirms for ``proof`` or raise ``QuorumFailure``."""
    weights = getattr(weights, "w", weights)
    pd = proof.digest()
    seen: set[NodeId] = set()
    chosen = []
    for c in sorted(confirms, key=lambda c: c.voter):
        if c.voter in seen or c.voter == proof.leader or c.value != 1 or c.proof_digest != pd:
            continue
        seen.add(c.voter)
        chosen.append(c)
    total = proof.leader_weight + sum(weights[c.voter] for c in chosen)
    if not exceeds_quorum(total):
        raise QuorumFailure(total)
    wts = tuple((c.voter, float(weights[c.voter])) for c in chosen)
    return CommitCertificate(proof, tuple(chosen), wts)


def verify_certificate(cert: CommitCertificate, block: "Block", scheme: KeyedHashScheme,
                       follower_keys: Mapping[NodeId, bytes]) -> bool:
    """Proof valid, confirms bound to it and signed, confirm weight above 2/3,
    and the block carries the proposed response."""
    p = cert.proof
    if not verify_proof(p, scheme, follower_keys):
        return False
    if (block.leader, block.height, block.response_hash) != (p.leader, p.height, p.payload_digest):
        return False
    weights = dict(cert.weights)
    if len(weights) != len(cert.confirms) or sum(weights.values()) + p.leader_weight > 1.0 + 1e-9:
        return False
    pd = p.digest()
    for c in cert.confirms:
        if c.value != 1 or c.proof_digest != pd or c.voter not in weights:
            return False
        if (c.leader, c.height, c.round, c.attempt) != (p.leader, p.height, p.round, p.attempt):
            return False
        if c.signature is None or c.signature.signer != c.voter:
            return False
        pk = follower_keys.get(c.voter)
        if pk is None or not scheme.verify(c.signing_bytes(), c.signature, pk):
            return False
    return exceeds_quorum(cert.confirm_weight())


# -------------------------------------------------------------------- blocks

_BLOCK_HEADER = struct.Struct(">IQQ32s32sQI")


@dataclass(frozen=True)
class Block:
    leader: NodeId
    height: int
    round: int
    prev_hash: bytes
    response_hash: bytes
    timestamp: int
    response: bytes

    @classmethod
    def build(cls, leader: NodeId, height: int, round: int, prev_hash: bytes,
              timestamp: int, response: bytes) -> "Block":
        return cls(leader, height, round, prev_hash, digest(response), timestamp, response)

    def encode(self) -> bytes:
        return _BLOCK_HEADER.pack(self.leader, self.height, self.round, self.prev_hash,
                                  self.response_hash, self.timestamp,
                                  len(self.response)) + self.response

    @classmethod
    def decode(cls, data: bytes, offset: int = 0) -> tuple["Block", int]:
        leader, height, rnd, prev, rh, ts, n = _BLOCK_HEADER.unpack_from(data, offset)
        start = offset + _BLOCK_HEADER.size
        if start + n > len(data):
            raise ValueError("truncated block record")
        return cls(leader, height, rnd, prev, rh, ts, bytes(data[start:start + n])), start + n

    def digest(self) -> bytes:
        return digest(self.encode())


@dataclass(frozen=True)
class Chain:
    leader: NodeId
    blocks: tuple[Block, ...] = ()

    @property
    def tip_digest(self) -> bytes:
        return self.blocks[-1].digest() if self.blocks else ZERO_DIGEST

    @property
    def next_height(self) -> int:
        return len(self.blocks)

    def __len__(self):
        return len(self.blocks)

    def encode(self) -> bytes:
        return b"".join(b.encode() for b in self.blocks)

    @classmethod
    def decode(cls, leader: NodeId, data: bytes) -> "Chain":
        blocks = []
        pos = 0
        while pos < len(data):
            b, pos = Block.decode(data, pos)
            blocks.append(b)
        return cls(leader, tuple(blocks))


def append_block(chain: Chain, block: Block) -> Chain:
    if block.leader != chain.leader:
        raise LinkMismatch(f"block of leader {block.leader} on chain {chain.leader}")
    if block.height != chain.next_height:
        raise HeightGap(f"expected height {chain.next_height}, got {block.height}")
    if block.prev_hash != chain.tip_digest:
        raise LinkMismatch(f"prev_hash does not match tip at height {block.height}")
    if block.response_hash != digest(block.response):
        raise LinkMismatch("response_hash does not match payload")
    return Chain(chain.leader, chain.blocks + (block,))


def verify_chain(chain: Chain) -> bool:
    prev = ZERO_DIGEST
    for h, b in enumerate(chain.blocks):
        if b.leader != chain.leader or b.height != h or b.prev_hash != prev:
            return False
        if b.response_hash != digest(b.response):
            return False
        prev = b.digest()
    return True


@dataclass
class LedgerSet:
    """One node's replicas of every leader's chain."""

    chains: dict[NodeId, Chain] = field(default_factory=dict)

    def chain(self, leader: NodeId) -> Chain:
        c = self.chains.get(leader)
        if c is None:
            c = self.chains[leader] = Chain(leader)
        return c

    def append(self, block: Block) -> None:
        self.chains[block.leader] = append_block(self.chain(block.leader), block)


# -------------------------------------------------------------- serialization


def _sig_dict(s: Signature | None):
    return None if s is None else {"signer": s.signer, "tag": s.tag.hex()}


def _sig_obj(d) -> Signature | None:
    return None if d is None else Signature(d["signer"], bytes.fromhex(d["tag"]))


def vote_to_dict(v: VoteMsg) -> dict:
    return {"voter": v.voter, "leader": v.leader, "height": v.height, "round": v.round,
            "attempt": v.attempt, "value": v.value, "payload_digest": v.payload_digest.hex(),
            "follower_response": v.follower_response.hex(), "signature": _sig_dict(v.signature)}


def vote_from_dict(d: dict) -> VoteMsg:
    return VoteMsg(d["voter"], d["leader"], d["height"], d["round"], d["attempt"], d["value"],
                   bytes.fromhex(d["payload_digest"]), bytes.fromhex(d["follower_response"]),
                   _sig_obj(d["signature"]))


def confirm_to_dict(c: CommitConfirm) -> dict:
    return {"voter": c.voter, "leader": c.leader, "height": c.height, "round": c.round,
            "attempt": c.attempt, "value": c.value, "proof_digest": c.proof_digest.hex(),
            "signature": _sig_dict(c.signature)}


def confirm_from_dict(d: dict) -> CommitConfirm:
    return CommitConfirm(d["voter"], d["leader"], d["height"], d["round"], d["attempt"],
                         d["value"], bytes.fromhex(d["proof_digest"]), _sig_obj(d["signature"]))


def proof_to_dict(p: Proof) -> dict:
    return {"leader": p.leader, "height": p.height, "round": p.round, "attempt": p.attempt,
            "payload_digest": p.payload_digest.hex(),
            "votes": [vote_to_dict(v) for v in p.votes],
            "weights": [[n, w] for n, w in p.weights],
            "leader_weight": p.leader_weight, "aggregate_tag": p.aggregate_tag.hex()}


def proof_from_dict(d: dict) -> Proof:
    return Proof(d["leader"], d["height"], d["round"], d["attempt"],
                 bytes.fromhex(d["payload_digest"]),
                 tuple(vote_from_dict(v) for v in d["votes"]),
                 tuple((int(n), float(w)) for n, w in d["weights"]),
                 float(d["leader_weight"]), bytes.fromhex(d["aggregate_tag"]))


def certificate_to_dict(c: CommitCertificate) -> dict:
    return {"proof": proof_to_dict(c.proof), "confirms": [confirm_to_dict(x) for x in c.confirms],
            "weights": [[n, w] for n, w in c.weights]}


def certificate_from_dict(d: dict) -> CommitCertificate:
    return CommitCertificate(proof_from_dict(d["proof"]),
                             tuple(confirm_from_dict(x) for x in d["confirms"]),
                             tuple((int(n), float(w)) for n, w in d["weights"]))


def encode_certificate(c: CommitCertificate) -> bytes:
    return json.dumps(certificate_to_dict(c), sort_keys=True, separators=(",", ":")).encode()


def decode_certificate(data: bytes) -> CommitCertificate:
    return certificate_from_dict(json.loads(data))


def encode_proof(p: Proof) -> bytes:
    return json.dumps(proof_to_dict(p), sort_keys=True, separators=(",", ":")).encode()


def decode_proof(data: bytes) -> Proof:
    return proof_from_dict(json.loads(data))


def encode_signature(s: Signature) -> bytes:
    return struct.pack(">I", s.signer) + s.tag


def decode_signature(data: bytes) -> Signature:
    return Signature(struct.unpack(">I", data[:4])[0], bytes(data[4:]))


def encode_keyring(k: KeyRing) -> bytes:
    """Public halves only; secrets never leave the node."""
    return k.leader_pair.public + k.follower_pair.public


def decode_keyring(data: bytes) -> KeyRing:
    return KeyRing(KeyPair(bytes(data[:DIGEST_SIZE])), KeyPair(bytes(data[DIGEST_SIZE:])))


# ---------------------------------------------------------------- persistence


def persist_ledger(out_dir: str | Path, chains: Mapping[NodeId, Chain],
                   proofs: Mapping[NodeId, Sequence[CommitCertificate]] | None = None) -> Path:
    """Write one binary file per leader chain, optional commit-certificate
    files (one JSON line per block, height order), and a manifest of leader
    ids and tip digests."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"chains": []}
    for leader in sorted(chains):
        chain = chains[leader]
        (out / f"chain_{leader}.bin").write_bytes(chain.encode())
        entry = {"leader": leader, "length": len(chain), "tip": chain.tip_digest.hex()}
        if proofs is not None:
            lines = [encode_certificate(c).decode() for c in proofs.get(leader, ())]
            (out / f"proofs_{leader}.jsonl").write_text("".join(l + "\n" for l in lines))
            entry["proofs"] = len(lines)
        manifest["chains"].append(entry)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_ledger(in_dir: str | Path) -> tuple[dict[NodeId, Chain],
                                            dict[NodeId, list[CommitCertificate]]]:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    chains: dict[NodeId, Chain] = {}
    proofs: dict[NodeId, list[CommitCertificate]] = {}
    for entry in manifest["chains"]:
        leader = entry["leader"]
        chain = Chain.decode(leader, (src / f"chain_{leader}.bin").read_bytes())
        if chain.tip_digest.hex() != entry["tip"]:
            raise ChainError(f"manifest tip mismatch for leader {leader}")
        chains[leader] = chain
        pf = src / f"proofs_{leader}.jsonl"
        if pf.exists():
            proofs[leader] = [decode_certificate(l.encode())
                              for l in pf.read_text().splitlines() if l]
    return chains, proofs
