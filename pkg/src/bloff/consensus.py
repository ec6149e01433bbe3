"""Proof-of-work mining, mempool management and longest-chain fork choice.

Mining is restricted to keys registered with the csp-miner role. Fork choice
is a strict total order: longer chain wins, ties broken by the byte-smaller
tip hash, so every node picks the same winner without coordination.

State mutation is expected to be serialized by one logical owner; nothing in
this module is internally locked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .crypto import Digest, KeyPair
from .ledger import (
    Block,
    BlockHeader,
    Chain,
    NodeRole,
    Transaction,
    apply_block_registry,
    block_hash,
    leading_zero_bits,
    merkle_root,
    tx_context_reason,
    tx_id,
    validate_chain,
    verify_tx,
)

DEFAULT_MEMPOOL_CAP = 10_000
DEFAULT_BLOCK_TX_CAP = 100
DEFAULT_ORPHAN_CAP = 100

MAX_NONCE = 2**64


class MiningError(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class Mempool:
    """Pending valid transactions, deduplicated by tx id, oldest first."""

    def __init__(self, capacity: int = DEFAULT_MEMPOOL_CAP):
        self.capacity = capacity
        self._txs: dict[Digest, Transaction] = {}

    def __len__(self) -> int:
        return len(self._txs)

    def __contains__(self, txid: Digest) -> bool:
        return txid in self._txs

    def add(self, tx: Transaction) -> str:
        """Admit ``tx`` if valid, new and within capacity.

        Returns "accepted", "duplicate", "full" or "invalid:<reason>".
        """
        txid = tx_id(tx)
        if txid in self._txs:
            return "duplicate"
        reason = verify_tx(tx)
        if reason is not None:
            return f"invalid:{reason}"
        if len(self._txs) >= self.capacity:
            return "full"
        self._txs[txid] = tx
        return "accepted"

    def readd(self, tx: Transaction) -> None:
        """Re-inject a transaction orphaned by a reorg.

        Ignores the capacity cap: an anchored digest must never be silently
        lost just because the pool happens to be full at reorg time.
        """
        txid = tx_id(tx)
        if txid not in self._txs and verify_tx(tx) is None:
            self._txs[txid] = tx

    def evict(self, txids) -> None:
        for txid in txids:
            self._txs.pop(txid, None)

    def oldest(self) -> list[Transaction]:
        return list(self._txs.values())


def check_pow(header: BlockHeader, difficulty: int) -> bool:
    """True iff the header hash has at least ``difficulty`` leading zero bits."""
    return leading_zero_bits(block_hash(header)) >= difficulty


def mine_block(
    pool: Mempool,
    parent_header: BlockHeader,
    difficulty: int,
    miner: KeyPair,
    timestamp: int,
    registered_nodes: dict[bytes, NodeRole],
    block_tx_cap: int = DEFAULT_BLOCK_TX_CAP,
) -> Block:
    """Seal a block over the oldest minable transactions, up to the cap.

    The nonce search starts at 0 and is fully deterministic for fixed inputs.
    Transactions that are not yet valid in context (an anchor whose submitter
    is unregistered, a replayed registration) stay in the pool untouched.
    """
    if registered_nodes.get(miner.public_key) != NodeRole.CSP_MINER:
        raise MiningError("miner-not-registered")
    registry = dict(registered_nodes)
    selected: list[Transaction] = []
    for tx in pool.oldest():
        if tx_context_reason(tx, registry) is not None:
            continue
        selected.append(tx)
        apply_block_registry(registry, tx)
        if len(selected) >= block_tx_cap:
            break
    if not selected:
        raise MiningError("no-work")
    root = merkle_root(selected)
    # A timestamp below the parent's would make the block invalid; clamp.
    timestamp = max(timestamp, parent_header.timestamp)
    prev = block_hash(parent_header)
    for nonce in range(MAX_NONCE):
        header = BlockHeader(
            prev_hash=prev,
            merkle_root=root,
            timestamp=timestamp,
            difficulty=difficulty,
            nonce=nonce,
        )
        if check_pow(header, difficulty):
            return Block(header=header, transactions=tuple(selected))
    raise MiningError("nonce-exhausted")  # pragma: no cover - 2**64 attempts


def choose_chain(candidate_a: Chain, candidate_b: Chain) -> Chain:
    """Deterministic fork choice between two validated chains.

    Longer wins; equal length falls back to the byte-lexicographically
    smaller tip hash. Chains must share a genesis block.
    """
    if candidate_a.genesis_hash != candidate_b.genesis_hash:
        raise ValueError("incompatible-genesis")
    if candidate_a.height != candidate_b.height:
        return candidate_a if candidate_a.height > candidate_b.height else candidate_b
    if bytes(candidate_a.tip.hash) <= bytes(candidate_b.tip.hash):
        return candidate_a
    return candidate_b


@dataclass
class NodeState:
    """Fork-choice state plus the best chain and the mempool of one node.

    ``known_blocks`` holds every structurally accepted block; ``best`` is the
    validated chain selected by ``choose_chain`` over everything known.
    """

    best: Chain
    mempool: Mempool = field(default_factory=Mempool)
    known_blocks: dict[Digest, Block] = field(default_factory=dict)
    orphans: dict[Digest, list[Block]] = field(default_factory=dict)
    orphan_cap: int = DEFAULT_ORPHAN_CAP

    def __post_init__(self) -> None:
        for block in self.best.blocks:
            self.known_blocks[block.hash] = block

    @property
    def best_tip(self) -> Digest:
        return self.best.tip.hash

    def _ancestry(self, tip: Block) -> list[Block] | None:
        """Walk prev_hash links back to genesis; None if any link is missing."""
        blocks = [tip]
        genesis_hash = self.best.blocks[0].hash
        while blocks[-1].hash != genesis_hash:
            parent = self.known_blocks.get(blocks[-1].header.prev_hash)
            if parent is None:
                return None
            blocks.append(parent)
        return list(reversed(blocks))

    def _switch_to(self, new_best: Chain) -> None:
        """Adopt ``new_best``: re-inject orphaned anchors, evict mined ones."""
        new_ids = {tx_id(tx) for b in new_best.blocks for tx in b.transactions}
        for block in self.best.blocks:
            for tx in block.transactions:
                if tx_id(tx) not in new_ids:
                    self.mempool.readd(tx)
        self.mempool.evict(new_ids)
        self.best = new_best

    def apply_block(self, block: Block) -> str:
        """Store a block and update fork choice.

        Returns "accepted-best", "accepted-side", "duplicate", "orphaned" or
        "rejected:<reason>". Orphans (unknown parent) are held, bounded, and
        retried once their parent arrives. Invalid blocks leave the state
        unchanged.
        """
        if block.hash in self.known_blocks:
            return "duplicate"
        if block.header.prev_hash not in self.known_blocks:
            queue = self.orphans.setdefault(block.header.prev_hash, [])
            queue.append(block)
            total = sum(len(v) for v in self.orphans.values())
            while total > self.orphan_cap:
                oldest_key = next(iter(self.orphans))
                self.orphans[oldest_key].pop(0)
                if not self.orphans[oldest_key]:
                    del self.orphans[oldest_key]
                total -= 1
            return "orphaned"

        parent = self.known_blocks[block.header.prev_hash]
        ancestry = self._ancestry(parent)
        if ancestry is None:
            return "rejected:missing-ancestry"
        try:
            candidate = validate_chain(ancestry + [block])
        except Exception as exc:
            reason = getattr(exc, "reason", str(exc))
            return f"rejected:{reason}"
        self.known_blocks[block.hash] = block

        status = "accepted-side"
        if choose_chain(candidate, self.best) is candidate and candidate.tip.hash != self.best_tip:
            self._switch_to(candidate)
            status = "accepted-best"

        # Grown chain may unblock held orphans.
        waiting = self.orphans.pop(block.hash, [])
        for orphan in waiting:
            inner = self.apply_block(orphan)
            if inner == "accepted-best":
                status = "accepted-best"
        return status

    def adopt_chain(self, blocks: list[Block]) -> bool:
        """Consider a full chain received from a peer; adopt it if it wins.

        Returns True when the best tip changed.
        """
        try:
            candidate = validate_chain(blocks)
        except Exception:
            return False
        if candidate.genesis_hash != self.best.genesis_hash:
            return False
        if choose_chain(candidate, self.best) is not candidate:
            return False
        if candidate.tip.hash == self.best_tip:
            return False
        for block in candidate.blocks:
            self.known_blocks[block.hash] = block
        self._switch_to(candidate)
        return True
