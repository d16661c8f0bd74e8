import random

import pytest

import oracles
from conftest import rand_digest
from vpcrbind.crypto import HmacKey
from vpcrbind.vtpm import (
    SmlEntry,
    VQuote,
    VTpm,
    decode_sml,
    encode_sml,
    replay_sml,
    verify_vquote,
    vtpm_extend,
    vtpm_tamper,
)


def test_extend_from_reset(rng):
    v = VTpm(1, HmacKey(b"v1"))
    m = rand_digest(rng)
    old, new = vtpm_extend(v, 10, m, b"init")
    assert old == bytes(20)
    assert new == oracles.sha1(bytes(20) + m) == v.vpcrs[10]
    assert v.sml == [SmlEntry(10, m, b"init")]


def test_sml_replay_matches(rng):
    v = VTpm(2, HmacKey(b"v2"))
    for _ in range(40):
        vtpm_extend(v, rng.randrange(24), rand_digest(rng))
    assert replay_sml(v.sml) == v.vpcrs
    ms = [e.measurement for e in v.sml if e.pcr_index == 10]
    assert v.vpcrs[10] == oracles.vpcr_fold(ms)


def test_extend_order_matters(rng):
    a, b = rand_digest(rng), rand_digest(rng)
    v1, v2 = VTpm(1, HmacKey(b"x")), VTpm(1, HmacKey(b"x"))
    vtpm_extend(v1, 0, a)
    vtpm_extend(v1, 0, b)
    vtpm_extend(v2, 0, b)
    vtpm_extend(v2, 0, a)
    assert v1.vpcrs[0] != v2.vpcrs[0]


def test_extend_history_injective():
    r = random.Random(11)
    seen = set()
    for _ in range(10_000):
        ms = [r.randbytes(20) for _ in range(r.randint(1, 8))]
        seen.add(oracles.vpcr_fold(ms))
    assert len(seen) == 10_000


def test_quote(rng):
    v1 = VTpm(1, HmacKey(b"v1"))
    v2 = VTpm(2, HmacKey(b"v2"))
    vtpm_extend(v1, 10, rand_digest(rng))
    q = v1.quote(10, b"n" * 16)
    assert verify_vquote(q, v1.vaik.verifier())
    forged = VQuote(q.vtpm_id, q.pcr_index, q.nonce, rand_digest(rng), q.signature, q.key_id)
    assert not verify_vquote(forged, v1.vaik.verifier())
    assert not verify_vquote(q, v2.vaik.verifier())
    q2 = v2.quote(10, b"n" * 16)
    swapped = VQuote(1, q2.pcr_index, q2.nonce, q2.vpcr, q2.signature, q2.key_id)
    assert not verify_vquote(swapped, v2.vaik.verifier())


def test_tamper(rng):
    v = VTpm(1, HmacKey(b"v1"))
    vtpm_extend(v, 10, rand_digest(rng))
    sml = list(v.sml)
    forged = rand_digest(rng)
    vtpm_tamper(v, 10, forged)
    assert v.vpcrs[10] == forged
    assert v.sml == sml
    assert replay_sml(v.sml)[10] != forged


def test_sml_serialization(rng):
    v = VTpm(1, HmacKey(b"v1"))
    for n in range(5):
        vtpm_extend(v, n, rand_digest(rng), f"file{n}".encode())
    raw = encode_sml(v.sml)
    assert decode_sml(raw) == v.sml
    for cut in range(len(raw)):
        with pytest.raises(ValueError):
            decode_sml(raw[:cut])


def test_validation():
    with pytest.raises(ValueError):
        VTpm(0)
    v = VTpm(1, HmacKey(b"k"))
    with pytest.raises(ValueError):
        vtpm_extend(v, 24, bytes(20))
    with pytest.raises(ValueError):
        vtpm_extend(v, 0, bytes(19))
