import os
import socket
import struct
import threading

import pytest

from helpers import PCR, SCHEMES, bundle_fields, honest_host
from vpcrbind.attest import (
    Challenge,
    MalformedBundle,
    ProtocolError,
    Reason,
    Scheme,
    Verdict,
    attest,
    challenge,
    decode_bundle,
    recv_frame,
    request_bundle,
    send_frame,
    serve,
    verify_bundle,
)
from vpcrbind.perf import OpCounters

NONCE = bytes(range(20))


def verdict_of(raw, host, nonce=NONCE):
    try:
        return verify_bundle(decode_bundle(raw), nonce, host.trusted_keys(), modulus=host.device.modulus)
    except MalformedBundle:
        return None


@pytest.mark.parametrize("scheme", SCHEMES)
def test_honest_bundle_verifies(scheme):
    host = honest_host(scheme)
    for k in host.vtpms:
        b = host.attest(k, PCR, NONCE)
        assert verify_bundle(b, NONCE, host.trusted_keys()) == Verdict(True)
        again = decode_bundle(b.to_bytes())
        assert again.to_bytes() == b.to_bytes()
        assert verify_bundle(again, NONCE, list(host.trusted_keys().values())).accepted


def test_tree_snapshot_root_is_quoted_pcr():
    host = honest_host(Scheme.TREE)
    b = host.attest(1, PCR, NONCE)
    assert b.tree.root == b.hwquote.value == host.device.pcr_read(PCR)


def test_short_nonce_refused():
    host = honest_host(Scheme.TREE)
    with pytest.raises(ValueError):
        host.attest(1, PCR, b"short")


@pytest.mark.parametrize("scheme", SCHEMES)
def test_stale_nonce(scheme):
    host = honest_host(scheme)
    b = host.attest(1, PCR, NONCE)
    v = verify_bundle(b, os.urandom(20), host.trusted_keys())
    assert v.reason is Reason.STALE_NONCE


def test_forged_leaf_root_mismatch():
    host = honest_host(Scheme.TREE)
    b = host.attest(1, PCR, NONCE)
    b.tree.set_leaf(5, os.urandom(20))
    assert verify_bundle(b, NONCE, host.trusted_keys()).reason is Reason.ROOT_MISMATCH


def test_altered_inc_entry_replay_mismatch():
    import dataclasses

    host = honest_host(Scheme.INCREMENTAL)
    b = host.attest(1, PCR, NONCE)
    e = b.inc_log[2]
    b.inc_log[2] = dataclasses.replace(e, vpcr_new=os.urandom(20))
    assert verify_bundle(b, NONCE, host.trusted_keys()).reason is Reason.REPLAY_MISMATCH


@pytest.mark.parametrize("scheme", SCHEMES)
def test_untrusted_keys(scheme):
    host = honest_host(scheme)
    other = honest_host(scheme, seed=99)
    b = host.attest(1, PCR, NONCE)
    assert verify_bundle(b, NONCE, other.trusted_keys()).reason is Reason.BAD_V_SIGNATURE
    keys = dict(host.trusted_keys())
    del keys[host.device.aik.key_id]
    assert verify_bundle(b, NONCE, keys).reason is Reason.BAD_HW_SIGNATURE


@pytest.mark.parametrize("scheme", SCHEMES)
def test_tampered_vpcr_fails(scheme):
    host = honest_host(scheme)
    host.tamper(2, PCR, os.urandom(20))
    b = host.attest(2, PCR, NONCE)
    assert verify_bundle(b, NONCE, host.trusted_keys()).reason is Reason.SML_MISMATCH


@pytest.mark.parametrize("scheme", SCHEMES)
def test_rml(scheme):
    host = honest_host(scheme)
    b = host.attest(1, PCR, NONCE)
    allowed = {e.measurement for e in b.vtpm_sml}
    assert verify_bundle(b, NONCE, host.trusted_keys(), rml=allowed).accepted
    allowed.pop()
    assert verify_bundle(b, NONCE, host.trusted_keys(), rml=allowed).reason is Reason.RML_VIOLATION


@pytest.mark.parametrize("scheme", SCHEMES)
def test_every_bit_flip_rejected(scheme):
    host = honest_host(scheme, n=2, u=2, height=2)
    raw = host.attest(2, PCR, NONCE).to_bytes()
    assert verdict_of(raw, host).accepted
    for name, start, end in bundle_fields(raw):
        for pos in range(start, end):
            for bit in range(8):
                bad = bytearray(raw)
                bad[pos] ^= 1 << bit
                v = verdict_of(bytes(bad), host)
                assert v is None or not v.accepted, (name, pos, bit)


def test_description_flips_are_harmless_or_rejected():
    host = honest_host(Scheme.TREE, n=2, u=2, height=2, description=b"/usr/bin/x")
    raw = host.attest(1, PCR, NONCE).to_bytes()
    ok = verdict_of(raw, host)
    start = raw.index(b"/usr/bin/x")
    for pos in range(start, start + 10):
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        v = verdict_of(bytes(bad), host)
        assert v is None or v == ok


def test_verification_counters():
    host = honest_host(Scheme.TREE, n=4, u=2, height=3)
    b = host.attest(1, PCR, NONCE)
    c = OpCounters()
    assert verify_bundle(b, NONCE, host.trusted_keys(), counters=c).accepted
    assert c.hashes == len(b.vtpm_sml) + (1 << 3) - 1

    host = honest_host(Scheme.INCREMENTAL, n=4, u=2)
    b = host.attest(1, PCR, NONCE)
    c = OpCounters()
    assert verify_bundle(b, NONCE, host.trusted_keys(), counters=c).accepted
    nu = len(b.inc_log)
    assert nu == 8
    assert (c.divs, c.mults) == (nu, nu + 4)
    assert c.hashes == len(b.vtpm_sml) + 4 + 2 * nu


def test_attest_type_checks():
    host = honest_host(Scheme.TREE)
    with pytest.raises(TypeError):
        attest(NONCE, host.vtpms[1], host.device, host.trees[PCR], Scheme.INCREMENTAL, PCR)


# protocol ---------------------------------------------------------------------------


def start_server(host, once=True):
    listener = socket.create_server(("127.0.0.1", 0))
    port = listener.getsockname()[1]

    def provide(req):
        if req.scheme is not host.scheme:
            raise ValueError("wrong scheme")
        return host.attest(req.vtpm_id, req.pcr_index, req.nonce)

    t = threading.Thread(target=serve, args=(listener, provide, once), daemon=True)
    t.start()
    return listener, port, t


@pytest.mark.parametrize("scheme", SCHEMES)
def test_loopback(scheme):
    host = honest_host(scheme)
    listener, port, t = start_server(host)
    with listener:
        v = challenge(("127.0.0.1", port), scheme, 2, PCR, host.trusted_keys())
        t.join(5)
    assert v.accepted


def test_loopback_wrong_scheme():
    host = honest_host(Scheme.TREE)
    listener, port, t = start_server(host)
    with listener:
        with pytest.raises(ProtocolError):
            challenge(("127.0.0.1", port), Scheme.INCREMENTAL, 1, PCR, host.trusted_keys())
        t.join(5)


def test_wrong_version_rejected():
    host = honest_host(Scheme.TREE)
    listener, port, t = start_server(host)
    with listener, socket.create_connection(("127.0.0.1", port)) as s:
        req = bytearray(Challenge(Scheme.TREE, 1, PCR, NONCE).to_bytes())
        req[0] = 9
        send_frame(s, bytes(req))
        resp = recv_frame(s)
        t.join(5)
    assert resp[0] == 1 and b"version" in resp
    with pytest.raises(ProtocolError):
        Challenge.from_bytes(bytes(req))


def test_truncated_frame():
    a, b = socket.socketpair()
    with a, b:
        a.sendall(struct.pack(">I", 10) + b"abc")
        a.shutdown(socket.SHUT_WR)
        with pytest.raises(ProtocolError):
            recv_frame(b)


def test_oversized_frame():
    a, b = socket.socketpair()
    with a, b:
        a.sendall(struct.pack(">I", 1 << 30))
        with pytest.raises(ProtocolError):
            recv_frame(b)


def test_server_truncates_mid_response():
    listener = socket.create_server(("127.0.0.1", 0))
    port = listener.getsockname()[1]

    def bad_server():
        conn, _ = listener.accept()
        with conn:
            recv_frame(conn)
            conn.sendall(struct.pack(">I", 100) + b"\x00partial")

    t = threading.Thread(target=bad_server, daemon=True)
    t.start()
    with listener:
        with pytest.raises(ProtocolError):
            request_bundle(("127.0.0.1", port), Challenge(Scheme.TREE, 1, PCR, NONCE), timeout=5)
        t.join(5)


def test_timeout():
    listener = socket.create_server(("127.0.0.1", 0))
    port = listener.getsockname()[1]
    with listener:
        # accepted by the kernel backlog but never answered
        with pytest.raises(TimeoutError):
            request_bundle(("127.0.0.1", port), Challenge(Scheme.TREE, 1, PCR, NONCE), timeout=0.3)


def test_connection_refused():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(OSError):
        request_bundle(("127.0.0.1", port), Challenge(Scheme.TREE, 1, PCR, NONCE), timeout=2)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_bundle_log_limited_to_quoted_pcr(scheme):
    import dataclasses

    from vpcrbind.vtpm import SmlEntry

    host = honest_host(scheme, seed=1, extra_pcr=None)
    host.measure(1, 3, bytes(20))
    b = host.attest(1, PCR, NONCE)
    assert b.vtpm_sml and all(e.pcr_index == PCR for e in b.vtpm_sml)
    forged = dataclasses.replace(b, vtpm_sml=b.vtpm_sml + [SmlEntry(3, bytes(20))])
    v = verify_bundle(forged, NONCE, host.trusted_keys(), modulus=host.device.modulus)
    assert v.reason is Reason.SML_MISMATCH
