"""In-process audit ledger: client registry, round lifecycle, hash commitments, blob store.

Every mutation is appended to an event log (JSON lines with seq, op, args and
a logical tick); replaying the log rebuilds the same state.
"""
from __future__ import annotations

import enum
import gzip
import hashlib
import json
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (AlreadyRegistered, DuplicateSubmission, IntegrityError, InvalidInput,
                     LedgerError, NoOpenRound, PurgedError, Unregistered, UnknownRound)

HEADER = struct.Struct("<QQQ")
GZIP_LEVEL = 6


def canonical_bytes(round_id: int, client_id: int, vec) -> bytes:
    """(round, client, d) as little-endian u64, then the data as little-endian f64."""
    v = np.ascontiguousarray(np.asarray(vec, dtype="<f8").ravel())
    return HEADER.pack(int(round_id), int(client_id), len(v)) + v.tobytes()


def parse_canonical(data: bytes) -> tuple[int, int, np.ndarray]:
    if len(data) < HEADER.size:
        raise InvalidInput("buffer shorter than the canonical header")
    r, c, d = HEADER.unpack_from(data)
    if len(data) != HEADER.size + 8 * d:
        raise InvalidInput(f"header says d={d} but payload has {len(data) - HEADER.size} bytes")
    return r, c, np.frombuffer(data, dtype="<f8", offset=HEADER.size).copy()


def commit_hash(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def verify(data: bytes, h: bytes) -> bool:
    return commit_hash(data) == bytes(h)


class Status(str, enum.Enum):
    OPEN = "Open"
    FINALIZED = "Finalized"


@dataclass
class RoundRecord:
    round_id: int
    start_tick: int
    end_tick: int | None = None
    submissions: dict[int, bytes] = field(default_factory=dict)
    aggregate_hash: bytes | None = None
    status: Status = Status.OPEN

    def snapshot(self) -> dict:
        return {"round": self.round_id, "start": self.start_tick, "end": self.end_tick,
                "submissions": {str(k): v.hex() for k, v in sorted(self.submissions.items())},
                "aggregate_hash": self.aggregate_hash.hex() if self.aggregate_hash else None,
                "status": self.status.value}


@dataclass(frozen=True)
class BlobRef:
    round_id: int
    client_id: int
    path: str
    hash: bytes
    compressed: bool


def _hash32(h) -> bytes:
    h = bytes.fromhex(h) if isinstance(h, str) else bytes(h)
    if len(h) != 32:
        raise InvalidInput(f"hash must be 32 bytes, got {len(h)}")
    return h


class Ledger:
    """Single-writer ledger. ``root`` holds the blob store and the event log."""

    def __init__(self, root: str | Path | None = None, keep_rounds: int | None = None,
                 compress: bool = True):
        if keep_rounds is not None and keep_rounds < 1:
            raise InvalidInput("keep_rounds must be >= 1")
        self.root = Path(root) if root is not None else None
        self.keep_rounds = keep_rounds
        self.compress = compress
        self.clients: dict[str, int] = {}
        self.rounds: list[RoundRecord] = []
        self.current_round: int | None = None
        self.tick = 0
        self.events: list[dict] = []
        self.purged: set[int] = set()
        self._replaying = False
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    # -- event log

    def _log(self, op: str, **args):
        self.tick += 1
        ev = {"seq": len(self.events), "op": op, "args": args, "tick": self.tick}
        self.events.append(ev)
        if self.root is not None and not self._replaying:
            with open(self.root / "events.jsonl", "a") as fh:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")

    @classmethod
    def replay(cls, events: Iterable[dict]) -> "Ledger":
        # retention is not re-run: purges come back as their own events
        led = cls(None)
        led._replaying = True
        for ev in events:
            a = ev["args"]
            op = ev["op"]
            if op == "register":
                led.register_client(a["addr"], a["id"])
            elif op == "register_batch":
                led.register_batch(a["addrs"], a["ids"])
            elif op == "start_round":
                led.start_round()
            elif op == "submit":
                led.submit_update(a["addr"], a["hash"])
            elif op == "finalize":
                led.finalize_round(a["hash"])
            elif op == "purge":
                led.purged.add(int(a["round"]))
                led._log("purge", round=int(a["round"]))
            else:
                raise LedgerError(f"unknown event op {op!r}")
            if led.tick != ev["tick"]:
                raise IntegrityError(f"tick mismatch at seq {ev['seq']}")
        led._replaying = False
        return led

    @staticmethod
    def read_events(path: str | Path) -> list[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def snapshot(self) -> dict:
        return {"clients": dict(sorted(self.clients.items())),
                "rounds": [r.snapshot() for r in self.rounds],
                "current_round": self.current_round, "tick": self.tick,
                "purged": sorted(self.purged)}

    # -- registry

    def register_client(self, addr: str, client_id: int):
        if addr in self.clients:
            raise AlreadyRegistered(addr)
        self.clients[addr] = int(client_id)
        self._log("register", addr=addr, id=int(client_id))

    def register_batch(self, addrs: Sequence[str], ids: Sequence[int]):
        if len(addrs) != len(ids):
            raise InvalidInput("addresses and ids differ in length")
        seen = set()
        for a in addrs:
            if a in self.clients or a in seen:
                raise AlreadyRegistered(a)
            seen.add(a)
        for a, i in zip(addrs, ids):
            self.clients[a] = int(i)
        self._log("register_batch", addrs=list(addrs), ids=[int(i) for i in ids])

    def client_id(self, addr: str) -> int:
        if addr not in self.clients:
            raise Unregistered(addr)
        return self.clients[addr]

    # -- rounds

    def _open(self) -> RoundRecord:
        if self.current_round is None:
            raise NoOpenRound("no round is open")
        return self.rounds[self.current_round]

    def start_round(self) -> int:
        if self.current_round is not None:
            raise LedgerError(f"round {self.current_round} is still open")
        rid = len(self.rounds)
        self._log("start_round")
        self.rounds.append(RoundRecord(rid, self.tick))
        self.current_round = rid
        return rid

    def submit_update(self, addr: str, h) -> None:
        rec = self._open()
        cid = self.client_id(addr)
        h = _hash32(h)
        if cid in rec.submissions:
            raise DuplicateSubmission(f"client {cid} already submitted in round {rec.round_id}")
        rec.submissions[cid] = h
        self._log("submit", addr=addr, hash=h.hex())

    def finalize_round(self, agg_hash) -> None:
        rec = self._open()
        agg_hash = _hash32(agg_hash)
        self._log("finalize", hash=agg_hash.hex())
        rec.aggregate_hash = agg_hash
        rec.status = Status.FINALIZED
        rec.end_tick = self.tick
        self.current_round = None
        self._apply_retention()

    # -- queries

    def _round(self, rid: int) -> RoundRecord:
        if not 0 <= rid < len(self.rounds):
            raise UnknownRound(rid)
        return self.rounds[rid]

    def get_round_info(self, rid: int) -> dict:
        rec = self._round(rid)
        return {"round": rid, "status": rec.status.value, "start": rec.start_tick,
                "end": rec.end_tick, "submissions": len(rec.submissions),
                "aggregate_hash": rec.aggregate_hash}

    def has_submitted(self, rid: int, client_id: int) -> bool:
        return int(client_id) in self._round(rid).submissions

    def get_update_hash(self, rid: int, client_id: int) -> bytes | None:
        return self._round(rid).submissions.get(int(client_id))

    # -- blob store

    def _blob_path(self, rid: int, cid: int, compressed: bool) -> Path:
        if self.root is None:
            raise LedgerError("ledger has no blob directory")
        return self.root / "rounds" / str(rid) / (f"{cid}.grad" + (".gz" if compressed else ""))

    def store_blob(self, data: bytes, compress: bool | None = None) -> BlobRef:
        """Store canonical bytes off-chain; round and client come from the header."""
        rid, cid, _ = parse_canonical(data)
        compress = self.compress if compress is None else compress
        p = self._blob_path(rid, cid, compress)
        p.parent.mkdir(parents=True, exist_ok=True)
        payload = gzip.compress(data, compresslevel=GZIP_LEVEL, mtime=0) if compress else data
        p.write_bytes(payload)
        return BlobRef(rid, cid, str(p), commit_hash(data), compress)

    def load_blob(self, ref: BlobRef) -> bytes:
        if ref.round_id in self.purged:
            raise PurgedError(f"round {ref.round_id} blobs were purged by retention")
        raw = Path(ref.path).read_bytes()
        data = gzip.decompress(raw) if ref.compressed else raw
        expected = self.get_update_hash(ref.round_id, ref.client_id) if (
            0 <= ref.round_id < len(self.rounds)) else None
        if not verify(data, expected or ref.hash):
            raise IntegrityError(f"blob for round {ref.round_id}, client {ref.client_id} "
                                 "does not match its committed hash")
        return data

    def _apply_retention(self):
        if self.keep_rounds is None:
            return
        last = len(self.rounds) - 1
        for rid in range(0, last - self.keep_rounds + 1):
            if rid in self.purged:
                continue
            if self.root is not None:
                shutil.rmtree(self.root / "rounds" / str(rid), ignore_errors=True)
            self.purged.add(rid)
            self._log("purge", round=rid)

    def audit(self, rid: int) -> dict[int, bool]:
        """Re-verify every stored blob of a finalized round against its hash."""
        rec = self._round(rid)
        out = {}
        for cid, h in sorted(rec.submissions.items()):
            for comp in (True, False):
                p = self._blob_path(rid, cid, comp)
                if p.exists():
                    out[cid] = verify(self.load_blob(BlobRef(rid, cid, str(p), h, comp)), h)
                    break
        return out
