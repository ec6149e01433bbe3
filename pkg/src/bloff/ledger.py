"""Ledger data model: transactions, blocks, chains, and their validation.

Transactions carry either a log digest (anchor) or a node admission
(registration). Canonical byte layouts are bit-exact and normative; the
JSON-lines chain file is a carrier whose hashes and signatures are always
computed over the canonical bytes, never over the JSON.

All validation is pure. A constructed ``Chain`` is treated as immutable;
concurrent readers are safe.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field

from .crypto import (
    DIGEST_LEN,
    KEY_LEN,
    SIGNATURE_LEN,
    ZERO_DIGEST,
    Digest,
    KeyPair,
    Signature,
    hex_to_bytes,
    sha256_digest,
    sign,
    verify_signature,
)

TX_VERSION = 1
BLOCK_VERSION = 1

KIND_ANCHOR = 0x01
KIND_REGISTRATION = 0x02

MAX_SOURCE_ID_BYTES = 64
MAX_U64 = 2**64 - 1

HEADER_LEN = 1 + DIGEST_LEN + DIGEST_LEN + 8 + 1 + 8  # 82 bytes

# Fixed JSON key order for canonical chain-file lines.
_BLOCK_JSON_KEYS = (
    "version",
    "prev_hash",
    "merkle_root",
    "timestamp",
    "difficulty",
    "nonce",
    "block_hash",
    "txs",
)


class NodeRole(enum.Enum):
    CSP_MINER = "csp-miner"
    DEVICE = "device"
    STAKEHOLDER = "stakeholder"


ROLE_TO_BYTE = {
    NodeRole.CSP_MINER: 0x01,
    NodeRole.DEVICE: 0x02,
    NodeRole.STAKEHOLDER: 0x03,
}
BYTE_TO_ROLE = {b: r for r, b in ROLE_TO_BYTE.items()}

# Roles whose keys may submit anchor transactions; stakeholders verify only.
ANCHOR_ROLES = (NodeRole.CSP_MINER, NodeRole.DEVICE)


class TxDecodeError(ValueError):
    """Raised when bytes cannot be parsed as a transaction at all."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class ChainValidationError(Exception):
    """Chain replay failure, carrying the 1-based height and a reason tag."""

    def __init__(self, height: int, reason: str):
        super().__init__(f"invalid chain at height {height}: {reason}")
        self.height = height
        self.reason = reason


class ChainFileError(Exception):
    """Chain file line that cannot be decoded, carrying the 1-based line number."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"chain file line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


def _check_u64(value: int, what: str) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value <= MAX_U64:
        raise ValueError(f"{what} must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class AnchorTransaction:
    """Signed record binding a log digest to a submitter key and capture time."""

    log_hash: Digest
    source_id: str
    capture_timestamp: int
    submitter_pubkey: bytes
    signature: Signature
    version: int = TX_VERSION

    def __post_init__(self) -> None:
        if len(self.source_id.encode("utf-8")) > MAX_SOURCE_ID_BYTES:
            raise ValueError(f"source_id exceeds {MAX_SOURCE_ID_BYTES} bytes")
        _check_u64(self.capture_timestamp, "capture_timestamp")
        if len(self.submitter_pubkey) != KEY_LEN:
            raise ValueError("submitter_pubkey must be 32 bytes")

    @property
    def kind(self) -> int:
        return KIND_ANCHOR


@dataclass(frozen=True)
class RegistrationTransaction:
    """Admission of a new node key, sponsored by an existing csp-miner.

    ``role_byte`` is kept raw so that wire values outside the known range can
    be represented and reported by ``verify_tx`` instead of crashing decode.
    """

    new_node_pubkey: bytes
    role_byte: int
    submitter_pubkey: bytes
    signature: Signature
    version: int = TX_VERSION

    def __post_init__(self) -> None:
        if len(self.new_node_pubkey) != KEY_LEN:
            raise ValueError("new_node_pubkey must be 32 bytes")
        if not 0 <= self.role_byte <= 255:
            raise ValueError("role_byte out of range")
        if len(self.submitter_pubkey) != KEY_LEN:
            raise ValueError("submitter_pubkey must be 32 bytes")

    @property
    def kind(self) -> int:
        return KIND_REGISTRATION

    @property
    def role(self) -> NodeRole | None:
        return BYTE_TO_ROLE.get(self.role_byte)


Transaction = AnchorTransaction | RegistrationTransaction


def _tx_payload_bytes(tx: Transaction) -> bytes:
    if isinstance(tx, AnchorTransaction):
        source = tx.source_id.encode("utf-8")
        return (
            bytes(tx.log_hash)
            + bytes([len(source)])
            + source
            + struct.pack(">Q", tx.capture_timestamp)
        )
    return bytes(tx.new_node_pubkey) + bytes([tx.role_byte])


def tx_preamble_bytes(tx: Transaction) -> bytes:
    """Everything the submitter signs: all canonical bytes before the signature."""
    return bytes([tx.version, tx.kind]) + _tx_payload_bytes(tx) + tx.submitter_pubkey


def canonical_tx_bytes(tx: Transaction) -> bytes:
    return tx_preamble_bytes(tx) + bytes(tx.signature)


def tx_id(tx: Transaction) -> Digest:
    """Stable transaction id: hash of the full canonical bytes, signature included."""
    return sha256_digest(canonical_tx_bytes(tx))


def decode_tx(raw: bytes) -> Transaction:
    """Parse canonical transaction bytes, rejecting structural problems.

    Semantic problems (unknown role byte, wrong version, bad signature) are
    left to ``verify_tx`` so that gossip handling can report them uniformly.
    """
    if len(raw) < 2:
        raise TxDecodeError("bad-length")
    version, kind = raw[0], raw[1]
    body = raw[2:]
    if kind == KIND_ANCHOR:
        if len(body) < DIGEST_LEN + 1:
            raise TxDecodeError("bad-length")
        log_hash = Digest(body[:DIGEST_LEN])
        source_len = body[DIGEST_LEN]
        if source_len > MAX_SOURCE_ID_BYTES:
            raise TxDecodeError("bad-source-id")
        offset = DIGEST_LEN + 1
        expected = offset + source_len + 8 + KEY_LEN + SIGNATURE_LEN
        if len(body) != expected:
            raise TxDecodeError("bad-length")
        source_raw = body[offset:offset + source_len]
        try:
            source_id = source_raw.decode("utf-8")
        except UnicodeDecodeError:
            raise TxDecodeError("bad-source-id") from None
        if source_id.encode("utf-8") != source_raw:
            raise TxDecodeError("bad-source-id")
        offset += source_len
        (capture_timestamp,) = struct.unpack(">Q", body[offset:offset + 8])
        offset += 8
        pubkey = body[offset:offset + KEY_LEN]
        signature = Signature(body[offset + KEY_LEN:])
        return AnchorTransaction(
            log_hash=log_hash,
            source_id=source_id,
            capture_timestamp=capture_timestamp,
            submitter_pubkey=pubkey,
            signature=signature,
            version=version,
        )
    if kind == KIND_REGISTRATION:
        if len(body) != KEY_LEN + 1 + KEY_LEN + SIGNATURE_LEN:
            raise TxDecodeError("bad-length")
        new_pubkey = body[:KEY_LEN]
        role_byte = body[KEY_LEN]
        pubkey = body[KEY_LEN + 1:KEY_LEN + 1 + KEY_LEN]
        signature = Signature(body[KEY_LEN + 1 + KEY_LEN:])
        return RegistrationTransaction(
            new_node_pubkey=new_pubkey,
            role_byte=role_byte,
            submitter_pubkey=pubkey,
            signature=signature,
            version=version,
        )
    raise TxDecodeError("bad-kind")


def verify_tx(tx: Transaction) -> str | None:
    """Validate one transaction in isolation. Returns a reason tag or None.

    Checks version, field ranges and the signature over the canonical
    preamble. Registration sponsorship is a chain-context rule checked by
    ``validate_block``, not here.
    """
    if tx.version != TX_VERSION:
        return "bad-version"
    if isinstance(tx, RegistrationTransaction) and tx.role is None:
        return "bad-role-tag"
    if isinstance(tx, AnchorTransaction):
        if len(tx.source_id.encode("utf-8")) > MAX_SOURCE_ID_BYTES:
            return "bad-length"
    if not verify_signature(tx.submitter_pubkey, tx_preamble_bytes(tx), tx.signature):
        return "bad-signature"
    return None


def verify_tx_bytes(raw: bytes) -> str | None:
    """Total validity check over wire bytes: decode failures become reasons."""
    try:
        tx = decode_tx(raw)
    except TxDecodeError as exc:
        return exc.reason
    return verify_tx(tx)


def build_anchor_tx(
    log_hash: Digest,
    source_id: str,
    capture_timestamp: int,
    keypair: KeyPair,
) -> AnchorTransaction:
    """Construct and sign an anchor transaction; the result passes verify_tx."""
    unsigned = AnchorTransaction(
        log_hash=log_hash,
        source_id=source_id,
        capture_timestamp=capture_timestamp,
        submitter_pubkey=keypair.public_key,
        signature=Signature(bytes(SIGNATURE_LEN)),
    )
    signature = sign(keypair.secret_key, tx_preamble_bytes(unsigned))
    return AnchorTransaction(
        log_hash=log_hash,
        source_id=source_id,
        capture_timestamp=capture_timestamp,
        submitter_pubkey=keypair.public_key,
        signature=signature,
    )


def build_registration_tx(
    new_node_pubkey: bytes,
    role: NodeRole,
    sponsor: KeyPair,
) -> RegistrationTransaction:
    """Construct and sign a registration sponsored by ``sponsor``."""
    unsigned = RegistrationTransaction(
        new_node_pubkey=new_node_pubkey,
        role_byte=ROLE_TO_BYTE[role],
        submitter_pubkey=sponsor.public_key,
        signature=Signature(bytes(SIGNATURE_LEN)),
    )
    signature = sign(sponsor.secret_key, tx_preamble_bytes(unsigned))
    return RegistrationTransaction(
        new_node_pubkey=new_node_pubkey,
        role_byte=ROLE_TO_BYTE[role],
        submitter_pubkey=sponsor.public_key,
        signature=signature,
    )


# ---------------------------------------------------------------------------
# Merkle tree
# ---------------------------------------------------------------------------

_LEAF_PREFIX = b"\x00"
_NODE_PREFIX = b"\x01"


def merkle_leaf(txid: Digest) -> Digest:
    return sha256_digest(_LEAF_PREFIX + txid)


def merkle_node(left: Digest, right: Digest) -> Digest:
    return sha256_digest(_NODE_PREFIX + left + right)


def merkle_root(transactions: list[Transaction]) -> Digest:
    """Binary hash tree over tx ids; an odd level duplicates its last node."""
    if not transactions:
        raise ValueError("merkle root of an empty transaction list is undefined")
    level = [merkle_leaf(tx_id(tx)) for tx in transactions]
    while len(level) > 1:
        if len(level) % 2 == 1:
            level.append(level[-1])
        level = [merkle_node(level[i], level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockHeader:
    prev_hash: Digest
    merkle_root: Digest
    timestamp: int
    difficulty: int
    nonce: int
    version: int = BLOCK_VERSION

    def __post_init__(self) -> None:
        _check_u64(self.timestamp, "timestamp")
        _check_u64(self.nonce, "nonce")
        if not 0 <= self.difficulty <= 255:
            raise ValueError("difficulty must be in 0..255")
        if not 0 <= self.version <= 255:
            raise ValueError("version must be in 0..255")


def header_bytes(header: BlockHeader) -> bytes:
    return (
        bytes([header.version])
        + bytes(header.prev_hash)
        + bytes(header.merkle_root)
        + struct.pack(">Q", header.timestamp)
        + bytes([header.difficulty])
        + struct.pack(">Q", header.nonce)
    )


def decode_header(raw: bytes) -> BlockHeader:
    if len(raw) != HEADER_LEN:
        raise ValueError(f"header must be {HEADER_LEN} bytes, got {len(raw)}")
    version = raw[0]
    prev_hash = Digest(raw[1:33])
    root = Digest(raw[33:65])
    (timestamp,) = struct.unpack(">Q", raw[65:73])
    difficulty = raw[73]
    (nonce,) = struct.unpack(">Q", raw[74:82])
    return BlockHeader(
        prev_hash=prev_hash,
        merkle_root=root,
        timestamp=timestamp,
        difficulty=difficulty,
        nonce=nonce,
        version=version,
    )


def block_hash(header: BlockHeader) -> Digest:
    return sha256_digest(header_bytes(header))


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...]

    @property
    def hash(self) -> Digest:
        return block_hash(self.header)


def encode_block(block: Block) -> bytes:
    """Canonical binary block: header, tx count, then length-prefixed txs."""
    parts = [header_bytes(block.header), struct.pack(">I", len(block.transactions))]
    for tx in block.transactions:
        raw = canonical_tx_bytes(tx)
        parts.append(struct.pack(">I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def decode_block(raw: bytes) -> Block:
    if len(raw) < HEADER_LEN + 4:
        raise ValueError("block bytes too short")
    header = decode_header(raw[:HEADER_LEN])
    (count,) = struct.unpack(">I", raw[HEADER_LEN:HEADER_LEN + 4])
    offset = HEADER_LEN + 4
    txs = []
    for _ in range(count):
        if offset + 4 > len(raw):
            raise ValueError("truncated block bytes")
        (tx_len,) = struct.unpack(">I", raw[offset:offset + 4])
        offset += 4
        if offset + tx_len > len(raw):
            raise ValueError("truncated block bytes")
        txs.append(decode_tx(raw[offset:offset + tx_len]))
        offset += tx_len
    if offset != len(raw):
        raise ValueError("trailing bytes after block")
    return Block(header=header, transactions=tuple(txs))


def encode_blocks(blocks: list[Block]) -> bytes:
    """Length-prefixed block sequence, used by chain-response payloads."""
    parts = [struct.pack(">I", len(blocks))]
    for block in blocks:
        raw = encode_block(block)
        parts.append(struct.pack(">I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def decode_blocks(raw: bytes) -> list[Block]:
    if len(raw) < 4:
        raise ValueError("chain bytes too short")
    (count,) = struct.unpack(">I", raw[:4])
    offset = 4
    blocks = []
    for _ in range(count):
        if offset + 4 > len(raw):
            raise ValueError("truncated chain bytes")
        (block_len,) = struct.unpack(">I", raw[offset:offset + 4])
        offset += 4
        if offset + block_len > len(raw):
            raise ValueError("truncated chain bytes")
        blocks.append(decode_block(raw[offset:offset + block_len]))
        offset += block_len
    if offset != len(raw):
        raise ValueError("trailing bytes after chain")
    return blocks


# ---------------------------------------------------------------------------
# JSON-lines chain file codec
# ---------------------------------------------------------------------------


def block_to_json_line(block: Block) -> str:
    """One canonical JSON line per block: fixed key order, compact separators,
    lowercase hex. The loader rejects any other rendering byte-for-byte."""
    obj = {
        "version": block.header.version,
        "prev_hash": block.header.prev_hash.hex(),
        "merkle_root": block.header.merkle_root.hex(),
        "timestamp": block.header.timestamp,
        "difficulty": block.header.difficulty,
        "nonce": block.header.nonce,
        "block_hash": block.hash.hex(),
        "txs": [canonical_tx_bytes(tx).hex() for tx in block.transactions],
    }
    return json.dumps(obj, separators=(",", ":"))


def _strict_int(value: object, what: str, upper: int) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value <= upper:
        raise ValueError(f"{what} is not an integer in range")
    return value


def block_from_json_line(line: str, line_no: int = 0) -> Block:
    """Parse one chain-file line, enforcing the canonical rendering.

    The stored block_hash field must equal the hash recomputed from the
    canonical header bytes; with that, any single-byte change to a serialized
    header is detectable without relying on probabilistic checks.
    """
    try:
        obj = json.loads(line)
        if not isinstance(obj, dict) or set(obj) != set(_BLOCK_JSON_KEYS):
            raise ValueError("unexpected fields")
        header = BlockHeader(
            prev_hash=Digest.from_hex(obj["prev_hash"]),
            merkle_root=Digest.from_hex(obj["merkle_root"]),
            timestamp=_strict_int(obj["timestamp"], "timestamp", MAX_U64),
            difficulty=_strict_int(obj["difficulty"], "difficulty", 255),
            nonce=_strict_int(obj["nonce"], "nonce", MAX_U64),
            version=_strict_int(obj["version"], "version", 255),
        )
        stated_hash = Digest.from_hex(obj["block_hash"])
        if not isinstance(obj["txs"], list):
            raise ValueError("txs is not a list")
        txs = tuple(decode_tx(hex_to_bytes(item)) for item in obj["txs"])
        block = Block(header=header, transactions=txs)
        if block_to_json_line(block) != line:
            raise ValueError("non-canonical block line")
        if stated_hash != block.hash:
            raise ValueError("block_hash field does not match header")
    except ChainFileError:
        raise
    except (ValueError, KeyError, TypeError, TxDecodeError) as exc:
        raise ChainFileError(line_no, str(exc)) from None
    return block


# ---------------------------------------------------------------------------
# Proof-of-work target
# ---------------------------------------------------------------------------


def leading_zero_bits(digest: bytes) -> int:
    """Count zero bits from the MSB of byte 0 downward."""
    count = 0
    for byte in digest:
        if byte == 0:
            count += 8
            continue
        # 8 - bit_length gives the zero bits at the top of this byte
        count += 8 - byte.bit_length()
        break
    return count


# ---------------------------------------------------------------------------
# Chain replay and validation
# ---------------------------------------------------------------------------


@dataclass
class Chain:
    """A fully validated block sequence plus the indexes derived by replay.

    Treated as immutable after construction: fork handling builds new Chain
    values instead of mutating, so concurrent verification reads are safe.
    """

    blocks: list[Block]
    registered_nodes: dict[bytes, NodeRole] = field(default_factory=dict)
    anchor_index: dict[Digest, list[tuple[int, int]]] = field(default_factory=dict)

    @property
    def height(self) -> int:
        return len(self.blocks)

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def genesis_hash(self) -> Digest:
        return self.blocks[0].hash

    def anchor_locations(self, log_hash: Digest) -> list[tuple[int, int]]:
        """All (height, tx index) pairs anchoring ``log_hash``; heights are 1-based."""
        return list(self.anchor_index.get(log_hash, ()))


def tx_context_reason(
    tx: Transaction,
    registered_nodes: dict[bytes, NodeRole],
    genesis: bool = False,
) -> str | None:
    """Registry rules shared by block validation, mining and submission.

    Anchors must come from a registered device or csp-miner key; registration
    sponsors must be registered csp-miners (the genesis block bootstraps the
    miner set and is exempt); a pubkey may be registered only once.
    """
    if isinstance(tx, AnchorTransaction):
        role = registered_nodes.get(tx.submitter_pubkey)
        if role is None:
            return "unregistered-submitter"
        if role not in ANCHOR_ROLES:
            return "role-not-permitted"
        return None
    if tx.new_node_pubkey in registered_nodes:
        return "already-registered"
    if genesis:
        return None
    if registered_nodes.get(tx.submitter_pubkey) != NodeRole.CSP_MINER:
        return "unregistered-sponsor"
    return None


def validate_block(
    block: Block,
    parent_header: BlockHeader | None,
    registered_nodes: dict[bytes, NodeRole],
) -> str | None:
    """Check one block against its parent and the registry built so far.

    ``parent_header`` is None only for the genesis block. Checks run in a
    fixed order and the first failure's reason tag is returned. The passed
    registry is not modified; use ``apply_block_registry`` to advance it.
    """
    if not block.transactions:
        return "empty-block"
    if block.header.version != BLOCK_VERSION:
        return "bad-version"
    if parent_header is None:
        if block.header.prev_hash != ZERO_DIGEST:
            return "bad-genesis-prev-hash"
    elif block.header.prev_hash != block_hash(parent_header):
        return "bad-linkage"
    if merkle_root(list(block.transactions)) != block.header.merkle_root:
        return "merkle-mismatch"
    if leading_zero_bits(block.hash) < block.header.difficulty:
        return "bad-pow"
    if parent_header is not None and block.header.timestamp < parent_header.timestamp:
        return "bad-timestamp"
    registry = dict(registered_nodes)
    for tx in block.transactions:
        reason = verify_tx(tx)
        if reason is not None:
            return reason
        reason = tx_context_reason(tx, registry, genesis=parent_header is None)
        if reason is not None:
            return reason
        apply_block_registry(registry, tx)
    return None


def apply_block_registry(registry: dict[bytes, NodeRole], tx: Transaction) -> None:
    """Registrations take effect immediately for later txs in the same block."""
    if isinstance(tx, RegistrationTransaction) and tx.role is not None:
        registry[tx.new_node_pubkey] = tx.role


def validate_chain(blocks: list[Block]) -> Chain:
    """Replay from genesis, rebuilding the registry and the anchor index.

    Raises ChainValidationError carrying the first failing 1-based height.
    """
    if not blocks:
        raise ChainValidationError(0, "empty-chain")
    registered: dict[bytes, NodeRole] = {}
    anchor_index: dict[Digest, list[tuple[int, int]]] = {}
    parent: BlockHeader | None = None
    for index, block in enumerate(blocks):
        height = index + 1
        reason = validate_block(block, parent, registered)
        if reason is not None:
            raise ChainValidationError(height, reason)
        for tx_index, tx in enumerate(block.transactions):
            apply_block_registry(registered, tx)
            if isinstance(tx, AnchorTransaction):
                anchor_index.setdefault(tx.log_hash, []).append((height, tx_index))
        parent = block.header
    return Chain(blocks=list(blocks), registered_nodes=registered, anchor_index=anchor_index)


def make_genesis(authorities: list[KeyPair], timestamp: int) -> Block:
    """Bootstrap block: a self-signed csp-miner registration per authority.

    Self-signing needs each authority's secret key, so this takes keypairs.
    Genesis requires no proof-of-work (difficulty 0) and is exempt from the
    sponsor-must-be-registered rule.
    """
    if not authorities:
        raise ValueError("at least one authority keypair is required")
    seen = set()
    txs = []
    for keypair in authorities:
        if keypair.public_key in seen:
            raise ValueError("duplicate authority public key")
        seen.add(keypair.public_key)
        txs.append(build_registration_tx(keypair.public_key, NodeRole.CSP_MINER, keypair))
    header = BlockHeader(
        prev_hash=ZERO_DIGEST,
        merkle_root=merkle_root(txs),
        timestamp=timestamp,
        difficulty=0,
        nonce=0,
    )
    return Block(header=header, transactions=tuple(txs))


def tx_to_dict(tx: Transaction) -> dict:
    """JSON-friendly view of a transaction, used by inspect and reports."""
    base = {
        "tx_id": tx_id(tx).hex(),
        "version": tx.version,
        "submitter_pubkey": tx.submitter_pubkey.hex(),
        "signature": tx.signature.hex(),
    }
    if isinstance(tx, AnchorTransaction):
        base["kind"] = "anchor"
        base["log_hash"] = tx.log_hash.hex()
        base["source_id"] = tx.source_id
        base["capture_timestamp"] = tx.capture_timestamp
    else:
        base["kind"] = "registration"
        base["new_node_pubkey"] = tx.new_node_pubkey.hex()
        base["role"] = tx.role.value if tx.role is not None else tx.role_byte
    return base
