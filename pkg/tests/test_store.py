"""Chain file persistence: load/append roundtrips and corruption detection."""

import time

import pytest

from bloff.consensus import Mempool, mine_block
from bloff.ledger import (
    ChainFileError,
    ChainValidationError,
    block_to_json_line,
    make_genesis,
    validate_chain,
)
from bloff.store import (
    BlockStore,
    StoreError,
    append_mempool_file,
    load_chain,
    load_mempool_file,
    write_chain,
    write_mempool_file,
)
from conftest import GENESIS_TS, build_chain


def write_chain_file(tmp_path, chain, name="chain.jsonl"):
    path = tmp_path / name
    write_chain(str(path), chain.blocks)
    return path


class TestLoadChain:
    def test_fresh_genesis_file_loads_height_1(self, tmp_path, miner):
        genesis = make_genesis([miner], GENESIS_TS)
        store = BlockStore.create(str(tmp_path / "chain.jsonl"), genesis)
        assert store.chain.height == 1
        reloaded = load_chain(str(tmp_path / "chain.jsonl"))
        assert reloaded.blocks == [genesis]

    def test_append_then_reload_identical(self, tmp_path, miner, device):
        chain, _ = build_chain(miner, device, [b"a", b"b"], txs_per_block=1)
        path = write_chain_file(tmp_path, validate_chain(chain.blocks[:1]))
        store = BlockStore.open(str(path))
        for block in chain.blocks[1:]:
            store.append_block(block)
        reloaded = load_chain(str(path))
        assert reloaded.blocks == chain.blocks
        assert reloaded.tip.hash == chain.tip.hash
        assert reloaded.anchor_index == chain.anchor_index

    def test_missing_file(self, tmp_path):
        with pytest.raises(StoreError):
            load_chain(str(tmp_path / "absent.jsonl"))

    def test_truncated_last_line_names_the_line(self, tmp_path, miner, device):
        chain, _ = build_chain(miner, device, [b"a"])
        path = write_chain_file(tmp_path, chain)
        data = path.read_bytes()
        path.write_bytes(data[:-10])  # chop terminator and tail
        with pytest.raises(ChainFileError) as err:
            load_chain(str(path))
        assert err.value.line_no == len(chain.blocks)

    def test_single_hex_digit_mutation_refuses_with_position(self, tmp_path, miner, device, rng):
        chain, _ = build_chain(miner, device, [b"a", b"b", b"c"], txs_per_block=2)
        path = write_chain_file(tmp_path, chain)
        original = path.read_bytes()
        hex_positions = [i for i, b in enumerate(original) if chr(b) in "0123456789abcdef"]
        for _ in range(120):
            position = rng.choice(hex_positions)
            replacement = rng.choice([c for c in "0123456789abcdef" if c != chr(original[position])])
            mutated = original[:position] + replacement.encode() + original[position + 1:]
            path.write_bytes(mutated)
            with pytest.raises((ChainFileError, ChainValidationError)) as err:
                load_chain(str(path))
            assert getattr(err.value, "line_no", None) or getattr(err.value, "height", None)
        path.write_bytes(original)
        load_chain(str(path))

    def test_interior_blank_line_rejected(self, tmp_path, miner, device):
        chain, _ = build_chain(miner, device, [b"a"])
        path = write_chain_file(tmp_path, chain)
        lines = path.read_text().splitlines()
        path.write_text(lines[0] + "\n\n" + "\n".join(lines[1:]) + "\n")
        with pytest.raises(ChainFileError):
            load_chain(str(path))


class TestBlockStore:
    def test_append_requires_tip_extension(self, tmp_path, miner, device):
        chain, _ = build_chain(miner, device, [b"a", b"b"], txs_per_block=1)
        path = write_chain_file(tmp_path, validate_chain(chain.blocks[:2]))
        store = BlockStore.open(str(path))
        with pytest.raises(StoreError):
            store.append_block(chain.blocks[3])  # skips a height

    def test_losing_fork_goes_to_sidecar(self, tmp_path, miner, device):
        chain, _ = build_chain(miner, device, [b"main"])
        path = write_chain_file(tmp_path, chain)
        store = BlockStore.open(str(path))

        pool = Mempool()
        from bloff.ingest import LogRecord, build_anchor_for_record

        record = LogRecord(raw=b"fork payload", source_id="dev", capture_timestamp=GENESIS_TS + 50)
        pool.add(build_anchor_for_record(record, device))
        fork_block = mine_block(
            pool,
            chain.blocks[-2].header,
            0,
            miner,
            GENESIS_TS + 50,
            validate_chain(chain.blocks[:-1]).registered_nodes,
        )
        store.record_fork(fork_block)

        main_lines = path.read_text().splitlines()
        fork_lines = open(store.forks_path).read().splitlines()
        assert block_to_json_line(fork_block) in fork_lines
        assert block_to_json_line(fork_block) not in main_lines
        load_chain(str(path))  # main file still the untouched best chain

    def test_replace_chain_moves_displaced_blocks_to_forks(self, tmp_path, miner, device):
        chain, _ = build_chain(miner, device, [b"one", b"two"], txs_per_block=1)
        short = validate_chain(chain.blocks[:3])
        path = write_chain_file(tmp_path, short)
        store = BlockStore.open(str(path))

        # A competing longer branch from height 2.
        base = validate_chain(chain.blocks[:2])
        pool = Mempool()
        from bloff.ingest import LogRecord, build_anchor_for_record

        for i in range(2):
            record = LogRecord(
                raw=f"branch {i}".encode(), source_id="dev", capture_timestamp=GENESIS_TS + 60 + i
            )
            pool.add(build_anchor_for_record(record, device))
        blocks = list(base.blocks)
        working = base
        for i in range(2):
            block = mine_block(
                pool, working.tip.header, 0, miner, GENESIS_TS + 60 + i,
                working.registered_nodes, block_tx_cap=1,
            )
            blocks.append(block)
            working = validate_chain(blocks)
            pool.evict({__import__("bloff.ledger", fromlist=["tx_id"]).tx_id(t) for t in block.transactions})

        store.replace_chain(working)
        assert load_chain(str(path)).tip.hash == working.tip.hash
        displaced_line = block_to_json_line(short.blocks[2])
        assert displaced_line in open(store.forks_path).read().splitlines()

    def test_create_refuses_overwrite(self, tmp_path, miner):
        genesis = make_genesis([miner], GENESIS_TS)
        BlockStore.create(str(tmp_path / "chain.jsonl"), genesis)
        with pytest.raises(StoreError):
            BlockStore.create(str(tmp_path / "chain.jsonl"), genesis)

    def test_thousand_appends_load_under_5s(self, tmp_path, miner, device):
        """Desk-scale load budget: 1,000 single-tx blocks."""
        from bloff.ingest import LogRecord, build_anchor_for_record
        from bloff.ledger import tx_id

        genesis = make_genesis([miner], GENESIS_TS)
        base, _ = build_chain(miner, device, [])
        path = write_chain_file(tmp_path, base)
        store = BlockStore.open(str(path))
        chain = store.chain
        blocks = list(chain.blocks)
        pool = Mempool()
        for i in range(1000):
            record = LogRecord(
                raw=f"bulk {i}".encode(), source_id="dev", capture_timestamp=GENESIS_TS + 100 + i
            )
            pool.add(build_anchor_for_record(record, device))
        registered = chain.registered_nodes
        parent = chain.tip.header
        appended = []
        for i in range(1000):
            block = mine_block(
                pool, parent, 0, miner, GENESIS_TS + 100 + i, registered, block_tx_cap=1
            )
            pool.evict({tx_id(tx) for tx in block.transactions})
            appended.append(block)
            parent = block.header
        # Bulk write: equivalent bytes to 1,000 sequential appends.
        with open(path, "a", encoding="utf-8") as fh:
            for block in appended:
                fh.write(block_to_json_line(block) + "\n")
        started = time.perf_counter()
        reloaded = load_chain(str(path))
        elapsed = time.perf_counter() - started
        assert reloaded.height == base.height + 1000
        assert elapsed < 5.0, f"load took {elapsed:.2f}s"


class TestMempoolFile:
    def test_roundtrip(self, tmp_path):
        path = str(tmp_path / "mempool.jsonl")
        assert load_mempool_file(path) == []
        append_mempool_file(path, [b"\x01\x02", b"\x03"])
        assert load_mempool_file(path) == [b"\x01\x02", b"\x03"]
        write_mempool_file(path, [b"\x09"])
        assert load_mempool_file(path) == [b"\x09"]

    def test_malformed_line_reported(self, tmp_path):
        path = tmp_path / "mempool.jsonl"
        path.write_text('{"tx": "zz"}\n')
        with pytest.raises(StoreError, match="line 1"):
            load_mempool_file(str(path))
