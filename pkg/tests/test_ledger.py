import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectral_sentinel.errors import (AlreadyRegistered, DuplicateSubmission, IntegrityError,
                                      NoOpenRound, PurgedError, Unregistered, UnknownRound)
from spectral_sentinel.ledger import (Ledger, canonical_bytes, commit_hash,
                                      parse_canonical, verify)
from spectral_sentinel.errors import InvalidInput


def test_sha256_known_answers():
    assert commit_hash(b"").hex() == (
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855")
    assert commit_hash(b"abc").hex() == (
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")


def test_canonical_layout():
    b = canonical_bytes(3, 7, [1.0, -2.0])
    assert len(b) == 24 + 16
    assert b[:8] == (3).to_bytes(8, "little") and b[16:24] == (2).to_bytes(8, "little")
    r, c, v = parse_canonical(b)
    assert (r, c) == (3, 7)
    np.testing.assert_array_equal(v, [1.0, -2.0])
    with pytest.raises(InvalidInput):
        parse_canonical(b[:-1])


@settings(max_examples=25)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=20))
def test_canonical_round_trip(vals):
    _, _, v = parse_canonical(canonical_bytes(0, 1, vals))
    np.testing.assert_array_equal(v, vals)


def test_bit_flip_fuzz_never_verifies():
    r = np.random.default_rng(0)
    data = canonical_bytes(1, 2, r.normal(size=64))
    h = commit_hash(data)
    buf = bytearray(data)
    for _ in range(1000):
        bit = int(r.integers(0, 8 * len(buf)))
        buf[bit // 8] ^= 1 << (bit % 8)
        assert not verify(bytes(buf), h)
        buf[bit // 8] ^= 1 << (bit % 8)
    assert verify(bytes(buf), h)


def _round(L, rid, addrs, d=8, seed=0):
    r = np.random.default_rng(seed)
    L.start_round()
    refs = []
    for a in addrs:
        data = canonical_bytes(rid, L.client_id(a), r.normal(size=d))
        L.submit_update(a, commit_hash(data))
        if L.root is not None:
            refs.append(L.store_blob(data))
    L.finalize_round(commit_hash(b"agg%d" % rid))
    return refs


def test_lifecycle_and_errors(tmp_path):
    L = Ledger(tmp_path)
    L.register_client("a", 0)
    L.register_client("b", 1)
    with pytest.raises(AlreadyRegistered):
        L.register_client("a", 5)
    with pytest.raises(NoOpenRound):
        L.submit_update("a", b"\0" * 32)
    L.start_round()
    L.submit_update("a", b"\1" * 32)
    with pytest.raises(DuplicateSubmission):
        L.submit_update("a", b"\2" * 32)
    with pytest.raises(Unregistered):
        L.submit_update("zz", b"\1" * 32)
    with pytest.raises(InvalidInput):
        L.submit_update("b", b"short")
    assert L.has_submitted(0, 0) and not L.has_submitted(0, 1)
    L.finalize_round(b"\3" * 32)
    info = L.get_round_info(0)
    assert info["status"] == "Finalized" and info["submissions"] == 1
    assert info["start"] < info["end"]
    with pytest.raises(UnknownRound):
        L.get_round_info(5)
    assert L.get_update_hash(0, 1) is None


def test_batch_registration_is_one_event():
    L = Ledger()
    L.register_batch([f"c{i}" for i in range(100)], list(range(100)))
    assert len(L.events) == 1 and L.client_id("c42") == 42
    with pytest.raises(AlreadyRegistered):
        L.register_batch(["c1", "new"], [1, 2])
    assert "new" not in L.clients


def test_blob_store_compression_and_audit(tmp_path):
    L = Ledger(tmp_path)
    L.register_client("a", 0)
    L.start_round()
    # float32-valued gradients: the low mantissa bytes are zero and compress
    vec = np.random.default_rng(1).normal(size=10**6).astype(np.float32).astype(np.float64)
    data = canonical_bytes(0, 0, vec)
    L.submit_update("a", commit_hash(data))
    ref = L.store_blob(data)
    L.finalize_round(commit_hash(b"x"))
    ratio = (tmp_path / "rounds" / "0" / "0.grad.gz").stat().st_size / len(data)
    assert 0.2 <= ratio <= 0.8
    assert L.load_blob(ref) == data
    assert L.audit(0) == {0: True}


def test_tampered_blob_detected(tmp_path):
    L = Ledger(tmp_path, compress=False)
    L.register_batch(["a", "b"], [0, 1])
    refs = _round(L, 0, ["a", "b"])
    raw = bytearray((tmp_path / "rounds" / "0" / "1.grad").read_bytes())
    raw[-1] ^= 0x01
    (tmp_path / "rounds" / "0" / "1.grad").write_bytes(bytes(raw))
    assert L.load_blob(refs[0])
    with pytest.raises(IntegrityError):
        L.load_blob(refs[1])


def test_retention_purges_old_rounds(tmp_path):
    L = Ledger(tmp_path, keep_rounds=2)
    L.register_batch(["a", "b"], [0, 1])
    refs = [_round(L, r, ["a", "b"], seed=r) for r in range(4)]
    assert L.purged == {0, 1}
    assert not (tmp_path / "rounds" / "0").exists()
    with pytest.raises(PurgedError):
        L.load_blob(refs[0][0])
    assert L.load_blob(refs[3][1])
    # hashes survive retention
    assert L.get_update_hash(0, 0) is not None


def test_replay_reproduces_state(tmp_path):
    L = Ledger(tmp_path, keep_rounds=2)
    L.register_batch(["a", "b", "c"], [0, 1, 2])
    L.register_client("d", 3)
    for r in range(5):
        _round(L, r, ["a", "c", "d"], seed=r)
    L.start_round()
    L.submit_update("b", b"\7" * 32)
    events = Ledger.read_events(tmp_path / "events.jsonl")
    assert events == json.loads(json.dumps(L.events))
    R = Ledger.replay(events)
    assert R.snapshot() == L.snapshot()


def test_replay_rejects_tampered_log():
    L = Ledger()
    L.register_client("a", 0)
    L.start_round()
    ev = json.loads(json.dumps(L.events))
    ev[1]["tick"] = 99
    with pytest.raises(IntegrityError):
        Ledger.replay(ev)
