"""Append-only chain persistence as JSON Lines, one block per line.

The main file always holds exactly the current best chain; blocks displaced
or beaten by fork choice go to a ``forks.jsonl`` sidecar so the audit
artifact stays linear and human-inspectable. Appends are flushed and fsynced
before being acknowledged; reorgs rewrite through a temp file and an atomic
rename, so a crash leaves either the old or the new file state.

Indexes are in-memory only and rebuilt by full re-validation on load.
"""

from __future__ import annotations

import json
import os

from .ledger import (
    Block,
    Chain,
    ChainFileError,
    block_from_json_line,
    block_to_json_line,
    validate_chain,
)


class StoreError(Exception):
    pass


def load_chain(path: str) -> Chain:
    """Parse and fully re-validate a chain file.

    Raises ChainFileError (with the 1-based line number) for lines that do
    not decode, and ChainValidationError (height, reason) when replay fails.
    """
    if not os.path.exists(path):
        raise StoreError(f"chain file not found: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ChainFileError(0, f"not utf-8: {exc}") from None
    if not text.endswith("\n"):
        last = text.count("\n") + 1
        raise ChainFileError(last, "truncated line (missing terminator)")
    blocks = []
    for line_no, line in enumerate(text.split("\n")[:-1], start=1):
        blocks.append(block_from_json_line(line, line_no))
    return validate_chain(blocks)


def write_chain(path: str, blocks: list[Block]) -> None:
    """Atomically replace ``path`` with the given block sequence."""
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for block in blocks:
            fh.write(block_to_json_line(block) + "\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class BlockStore:
    """Chain file plus its in-memory validated Chain and fork sidecar."""

    def __init__(self, path: str, chain: Chain):
        self.path = path
        self.chain = chain

    @property
    def forks_path(self) -> str:
        return os.path.join(os.path.dirname(self.path) or ".", "forks.jsonl")

    @classmethod
    def open(cls, path: str) -> "BlockStore":
        return cls(path, load_chain(path))

    @classmethod
    def create(cls, path: str, genesis: Block) -> "BlockStore":
        if os.path.exists(path):
            raise StoreError(f"chain file already exists: {path}")
        chain = validate_chain([genesis])
        write_chain(path, [genesis])
        return cls(path, chain)

    def append_block(self, block: Block) -> None:
        """Persist a block already validated and chosen as the best-tip extension.

        The line is flushed and fsynced before the in-memory chain advances,
        so an I/O failure surfaces without corrupting state.
        """
        if block.header.prev_hash != self.chain.tip.hash:
            raise StoreError("block does not extend the stored tip")
        new_chain = validate_chain(self.chain.blocks + [block])
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(block_to_json_line(block) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self.chain = new_chain

    def record_fork(self, block: Block) -> None:
        """Append a losing-fork block to the sidecar file."""
        with open(self.forks_path, "a", encoding="utf-8") as fh:
            fh.write(block_to_json_line(block) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def replace_chain(self, chain: Chain) -> None:
        """Reorg: atomically rewrite the main file; displaced blocks become forks."""
        new_hashes = {b.hash for b in chain.blocks}
        displaced = [b for b in self.chain.blocks if b.hash not in new_hashes]
        write_chain(self.path, chain.blocks)
        for block in displaced:
            self.record_fork(block)
        self.chain = chain


# ---------------------------------------------------------------------------
# Pending-transaction sidecar for the offline CLI pipeline
# ---------------------------------------------------------------------------


def load_mempool_file(path: str) -> list[bytes]:
    """Read pending raw transactions (one ``{"tx": hex}`` object per line)."""
    if not os.path.exists(path):
        return []
    raw_txs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh.read().splitlines(), start=1):
            if not line:
                continue
            try:
                obj = json.loads(line)
                raw_txs.append(bytes.fromhex(obj["tx"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise StoreError(f"mempool file line {line_no}: {exc}") from None
    return raw_txs


def append_mempool_file(path: str, raw_txs: list[bytes]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for raw in raw_txs:
            fh.write(json.dumps({"tx": raw.hex()}) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def write_mempool_file(path: str, raw_txs: list[bytes]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for raw in raw_txs:
            fh.write(json.dumps({"tx": raw.hex()}) + "\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
