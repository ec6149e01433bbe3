"""Runnable node roles: one state machine, two transports.

``NodeLogic`` is the transport-agnostic message handler shared verbatim by
the deterministic in-process simulator and the live TCP runtime, so both
modes exercise identical behavior. The live runtime wraps it in a single
serialized event loop: inbound gossip, submissions and mining all pass
through one queue; verification elsewhere reads immutable chain snapshots.

Wire protocol (live mode): newline-delimited JSON over TCP, one message per
line, ``{"kind": ..., "payload": "<hex>", "from": ..., "to": ...}`` with the
same four kinds as the simulator fabric.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

from .consensus import (
    DEFAULT_BLOCK_TX_CAP,
    DEFAULT_MEMPOOL_CAP,
    DEFAULT_ORPHAN_CAP,
    Mempool,
    MiningError,
    NodeState,
    mine_block,
)
from .crypto import KeyPair, sha256_digest
from .ledger import (
    Block,
    Chain,
    NodeRole,
    Transaction,
    TxDecodeError,
    canonical_tx_bytes,
    decode_block,
    decode_blocks,
    decode_tx,
    encode_block,
    encode_blocks,
    tx_context_reason,
    verify_tx,
)
from .store import BlockStore

logger = logging.getLogger(__name__)

MSG_TX = "tx-gossip"
MSG_BLOCK = "block-gossip"
MSG_CHAIN_REQUEST = "chain-request"
MSG_CHAIN_RESPONSE = "chain-response"

BROADCAST = "*"

_SEEN_CAP = 100_000


@dataclass
class NodeConfig:
    role: NodeRole
    key_path: str
    chain_path: str
    difficulty: int = 0
    listen: str | None = None  # "host:port"
    peers: list[str] = field(default_factory=list)
    mempool_cap: int = DEFAULT_MEMPOOL_CAP
    block_tx_cap: int = DEFAULT_BLOCK_TX_CAP
    orphan_cap: int = DEFAULT_ORPHAN_CAP


def default_home() -> str:
    return os.environ.get("BLOFF_HOME", ".")


class NodeLogic:
    """Role-aware node behavior over a NodeState, independent of transport.

    Handlers return outbound messages as ``(kind, payload, destination)``
    tuples, destination being a node id or ``"*"`` for all neighbors. The
    ``submit_tx`` method satisfies the ingest layer's SubmitTarget protocol.
    """

    def __init__(
        self,
        node_id: str,
        keypair: KeyPair,
        role: NodeRole,
        chain: Chain,
        difficulty: int = 0,
        mempool_cap: int = DEFAULT_MEMPOOL_CAP,
        block_tx_cap: int = DEFAULT_BLOCK_TX_CAP,
        orphan_cap: int = DEFAULT_ORPHAN_CAP,
    ):
        self.node_id = node_id
        self.keypair = keypair
        self.role = role
        self.difficulty = difficulty
        self.block_tx_cap = block_tx_cap
        self.state = NodeState(
            best=chain, mempool=Mempool(mempool_cap), orphan_cap=orphan_cap
        )
        self._seen: set[bytes] = set()

    # -- helpers ------------------------------------------------------------

    @property
    def chain(self) -> Chain:
        return self.state.best

    def _mark_seen(self, payload: bytes) -> bool:
        """Dedup flood gossip by payload hash; True when already seen."""
        key = bytes(sha256_digest(payload))
        if key in self._seen:
            return True
        if len(self._seen) >= _SEEN_CAP:
            self._seen.clear()
        self._seen.add(key)
        return False

    def startup_messages(self) -> list[tuple[str, bytes, str]]:
        """Ask neighbors for their chains on boot, to catch up after downtime."""
        return [(MSG_CHAIN_REQUEST, b"", BROADCAST)]

    # -- local submission ----------------------------------------------------

    def submit_tx(self, tx: Transaction) -> tuple[bool, str | None]:
        """Admit a locally submitted transaction after full context checks.

        Unlike gossip admission, local submission enforces the registry rules
        up front so an unregistered or verify-only key gets an actionable
        rejection instead of a transaction stuck in the pool.
        """
        reason = verify_tx(tx)
        if reason is None:
            reason = tx_context_reason(tx, self.chain.registered_nodes)
        if reason is not None:
            return False, reason
        status = self.state.mempool.add(tx)
        if status in ("accepted", "duplicate"):
            self._mark_seen(canonical_tx_bytes(tx))
            return True, None
        return False, status

    def submit_messages(self, tx: Transaction) -> list[tuple[str, bytes, str]]:
        return [(MSG_TX, canonical_tx_bytes(tx), BROADCAST)]

    # -- mining ---------------------------------------------------------------

    def maybe_mine(self, timestamp: int) -> Block | None:
        """Mine one block if this node may and there is work; apply it locally."""
        if self.role != NodeRole.CSP_MINER:
            return None
        if len(self.state.mempool) == 0:
            return None
        try:
            block = mine_block(
                self.state.mempool,
                self.chain.tip.header,
                self.difficulty,
                self.keypair,
                timestamp,
                self.chain.registered_nodes,
                block_tx_cap=self.block_tx_cap,
            )
        except MiningError:
            return None
        status = self.state.apply_block(block)
        if status != "accepted-best":  # pragma: no cover - defensive
            logger.warning("own mined block not adopted: %s", status)
            return None
        self._mark_seen(encode_block(block))
        return block

    def block_messages(self, block: Block) -> list[tuple[str, bytes, str]]:
        return [(MSG_BLOCK, encode_block(block), BROADCAST)]

    # -- inbound messages ------------------------------------------------------

    def handle_message(
        self, kind: str, payload: bytes, sender: str
    ) -> list[tuple[str, bytes, str]]:
        if kind == MSG_TX:
            return self._handle_tx(payload)
        if kind == MSG_BLOCK:
            return self._handle_block(payload, sender)
        if kind == MSG_CHAIN_REQUEST:
            return [(MSG_CHAIN_RESPONSE, encode_blocks(self.chain.blocks), sender)]
        if kind == MSG_CHAIN_RESPONSE:
            return self._handle_chain_response(payload)
        logger.debug("%s: ignoring unknown message kind %r", self.node_id, kind)
        return []

    def _handle_tx(self, payload: bytes) -> list[tuple[str, bytes, str]]:
        if self._mark_seen(payload):
            return []
        try:
            tx = decode_tx(payload)
        except TxDecodeError as exc:
            logger.debug("%s: dropping undecodable tx: %s", self.node_id, exc.reason)
            return []
        if verify_tx(tx) is not None:
            return []
        # Context rules (registration ordering) are re-checked at mining time,
        # so structurally valid gossip is pooled even if not yet minable.
        self.state.mempool.add(tx)
        return [(MSG_TX, payload, BROADCAST)]

    def _handle_block(self, payload: bytes, sender: str) -> list[tuple[str, bytes, str]]:
        if self._mark_seen(payload):
            return []
        try:
            block = decode_block(payload)
        except (ValueError, TxDecodeError) as exc:
            logger.debug("%s: dropping undecodable block: %s", self.node_id, exc)
            return []
        status = self.state.apply_block(block)
        if status.startswith("rejected"):
            logger.debug("%s: block rejected: %s", self.node_id, status)
            return []
        out = [(MSG_BLOCK, payload, BROADCAST)]
        if status == "orphaned":
            out.append((MSG_CHAIN_REQUEST, b"", sender))
        return out

    def _handle_chain_response(self, payload: bytes) -> list[tuple[str, bytes, str]]:
        try:
            blocks = decode_blocks(payload)
        except (ValueError, TxDecodeError) as exc:
            logger.debug("%s: dropping undecodable chain: %s", self.node_id, exc)
            return []
        if self.state.adopt_chain(blocks):
            # Push the improvement so the winner floods outward hop by hop.
            return [(MSG_CHAIN_RESPONSE, encode_blocks(self.chain.blocks), BROADCAST)]
        return []


# ---------------------------------------------------------------------------
# Live TCP runtime
# ---------------------------------------------------------------------------


def encode_wire(kind: str, payload: bytes, from_id: str, to_id: str) -> bytes:
    obj = {"kind": kind, "payload": payload.hex(), "from": from_id, "to": to_id}
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8")


def decode_wire(line: bytes) -> tuple[str, bytes, str, str]:
    obj = json.loads(line.decode("utf-8"))
    return obj["kind"], bytes.fromhex(obj["payload"]), obj["from"], obj["to"]


class _Conn:
    """One bidirectional line connection, inbound or outbound."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.alive = True
        self._lock = threading.Lock()

    def send(self, data: bytes) -> bool:
        with self._lock:
            if not self.alive:
                return False
            try:
                self.sock.sendall(data)
                return True
            except OSError:
                self.close()
                return False

    def close(self) -> None:
        self.alive = False
        try:
            self.sock.close()
        except OSError:
            pass


class LiveNode:
    """A running node: TCP server, peer connections, one event loop thread.

    All chain and mempool mutations happen on the event loop thread; socket
    readers only enqueue. Every connection is bidirectional: gossip flows to
    outbound peers and inbound connections alike, and replies travel back on
    the connection the request arrived on. Mining runs inline on the loop
    whenever the node is a csp-miner and has pending work.
    """

    def __init__(self, config: NodeConfig, keypair: KeyPair, store: BlockStore):
        from .crypto import node_id as short_id

        self.config = config
        self.store = store
        self.logic = NodeLogic(
            node_id=short_id(keypair.public_key),
            keypair=keypair,
            role=config.role,
            chain=store.chain,
            difficulty=config.difficulty,
            mempool_cap=config.mempool_cap,
            block_tx_cap=config.block_tx_cap,
            orphan_cap=config.orphan_cap,
        )
        self.inbox: queue.Queue = queue.Queue()
        self._conns: list[_Conn] = []
        self._conns_lock = threading.Lock()
        self._server: socket.socket | None = None
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    # -- transport ----------------------------------------------------------

    def _track(self, conn: _Conn) -> None:
        with self._conns_lock:
            self._conns = [c for c in self._conns if c.alive] + [conn]
        thread = threading.Thread(target=self._read_conn, args=(conn,), daemon=True)
        thread.start()
        self._threads.append(thread)

    def _serve(self) -> None:
        assert self._server is not None
        while not self._stop.is_set():
            try:
                sock, _ = self._server.accept()
            except OSError:
                return
            self._track(_Conn(sock))

    def _connect_peers(self) -> None:
        """Keep outbound connections to the configured peers alive."""
        established: dict[str, _Conn] = {}
        while not self._stop.is_set():
            for address in self.config.peers:
                current = established.get(address)
                if current is not None and current.alive:
                    continue
                host, port = address.rsplit(":", 1)
                try:
                    sock = socket.create_connection((host, int(port)), timeout=2)
                except OSError:
                    continue
                conn = _Conn(sock)
                established[address] = conn
                self._track(conn)
                # A fresh link is a chance to catch up on missed blocks.
                conn.send(
                    encode_wire(MSG_CHAIN_REQUEST, b"", self.logic.node_id, BROADCAST)
                )
            self._stop.wait(1.0)

    def _read_conn(self, conn: _Conn) -> None:
        buf = b""
        while not self._stop.is_set() and conn.alive:
            try:
                data = conn.sock.recv(1 << 16)
            except OSError:
                break
            if not data:
                break
            buf += data
            while b"\n" in buf:
                line, buf = buf.split(b"\n", 1)
                if not line:
                    continue
                try:
                    kind, payload, from_id, _ = decode_wire(line)
                except (ValueError, KeyError) as exc:
                    logger.debug("dropping malformed wire line: %s", exc)
                    continue
                self.inbox.put((kind, payload, from_id, conn))
        conn.close()

    def _send_out(self, messages, origin: _Conn | None = None) -> None:
        for kind, payload, dest in messages:
            data = encode_wire(kind, payload, self.logic.node_id, dest)
            if dest == BROADCAST:
                with self._conns_lock:
                    targets = [c for c in self._conns if c.alive]
                for conn in targets:
                    conn.send(data)
            elif origin is not None:
                origin.send(data)

    # -- persistence ----------------------------------------------------------

    def _persist_if_changed(self) -> None:
        best = self.logic.chain
        stored = self.store.chain
        if best.tip.hash == stored.tip.hash:
            return
        if best.height > stored.height and best.blocks[: stored.height] == stored.blocks:
            for block in best.blocks[stored.height:]:
                self.store.append_block(block)
        else:
            self.store.replace_chain(best)

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        if self.config.listen:
            host, port = self.config.listen.rsplit(":", 1)
            self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self._server.bind((host, int(port)))
            self._server.listen(16)
            thread = threading.Thread(target=self._serve, daemon=True)
            thread.start()
            self._threads.append(thread)
        if self.config.peers:
            thread = threading.Thread(target=self._connect_peers, daemon=True)
            thread.start()
            self._threads.append(thread)

    def stop(self) -> None:
        self._stop.set()
        if self._server is not None:
            try:
                self._server.close()
            except OSError:
                pass
        with self._conns_lock:
            for conn in self._conns:
                conn.close()

    def run(self) -> None:
        """Serialized event loop; returns when ``stop()`` is called."""
        self.start()
        try:
            while not self._stop.is_set():
                try:
                    event = self.inbox.get(timeout=0.05)
                except queue.Empty:
                    event = None
                if event is not None:
                    kind, payload, from_id, conn = event
                    out = self.logic.handle_message(kind, payload, from_id)
                    self._persist_if_changed()
                    self._send_out(out, origin=conn)
                mined = self.logic.maybe_mine(int(time.time()))
                if mined is not None:
                    logger.info(
                        "mined block %s at height %d",
                        mined.hash.hex()[:16],
                        self.logic.chain.height,
                    )
                    self._persist_if_changed()
                    self._send_out(self.logic.block_messages(mined))
        finally:
            self.stop()


def run_node(config: NodeConfig) -> None:
    """Load keys and chain, then run the node until interrupted.

    Startup failures (unreadable key, invalid chain file) raise; the CLI
    turns them into a nonzero exit with the reason.
    """
    from .crypto import load_keypair

    keypair = load_keypair(config.key_path)
    store = BlockStore.open(config.chain_path)
    node = LiveNode(config, keypair, store)
    try:
        node.run()
    except KeyboardInterrupt:
        node.stop()


# ---------------------------------------------------------------------------
# Lightweight client helpers (used by the CLI to talk to a running node)
# ---------------------------------------------------------------------------


def fetch_chain(address: str, timeout: float = 10.0) -> list[Block]:
    """Ask a running node for its full best chain.

    The connection may also carry unrelated gossip the node broadcasts while
    we wait; skip anything that is not the chain response.
    """
    host, port = address.rsplit(":", 1)
    deadline = time.monotonic() + timeout
    with socket.create_connection((host, int(port)), timeout=timeout) as sock:
        sock.sendall(encode_wire(MSG_CHAIN_REQUEST, b"", "client", BROADCAST))
        sock.settimeout(timeout)
        buf = b""
        while time.monotonic() < deadline:
            while b"\n" in buf:
                line, buf = buf.split(b"\n", 1)
                if not line:
                    continue
                kind, payload, _, _ = decode_wire(line)
                if kind == MSG_CHAIN_RESPONSE:
                    return decode_blocks(payload)
            data = sock.recv(1 << 20)
            if not data:
                break
            buf += data
    raise TimeoutError(f"no chain response from {address}")


def send_txs(address: str, txs: list[Transaction], timeout: float = 10.0) -> None:
    """Gossip signed transactions to a running node."""
    host, port = address.rsplit(":", 1)
    with socket.create_connection((host, int(port)), timeout=timeout) as sock:
        for tx in txs:
            sock.sendall(encode_wire(MSG_TX, canonical_tx_bytes(tx), "client", BROADCAST))
