import os

import pytest

from helpers import PCR, SCHEMES, honest_host
from vpcrbind.attest import Scheme
from vpcrbind.crypto import HmacKey
from vpcrbind.host import CapacityExhausted, Host, StateDir, TamperDetected, UnknownVtpm, load_trusted
from vpcrbind.incbind import inc_replay


@pytest.mark.parametrize("scheme", SCHEMES)
def test_lockstep(scheme):
    host = honest_host(scheme, n=4, u=4)
    if scheme is Scheme.TREE:
        assert host.trees[PCR].root == host.device.pcr_read(PCR)
        for k, v in host.vtpms.items():
            assert host.trees[PCR].leaves[k - 1] == v.vpcrs[PCR]
    else:
        acc = host.accs[PCR]
        assert inc_replay(acc.initial, acc.log) == host.device.pcr_read(PCR)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_tamper_then_measure(scheme):
    host = honest_host(scheme)
    before = host.device.pcr_read(PCR)
    v = host.vtpms[2]
    sml_len = len(v.sml)
    host.tamper(2, PCR, os.urandom(20))
    forged = v.vpcrs[PCR]
    with pytest.raises(TamperDetected):
        host.measure(2, PCR, os.urandom(20))
    assert host.device.pcr_read(PCR) == before
    assert len(v.sml) == sml_len and v.vpcrs[PCR] == forged
    # other vTPMs unaffected
    host.measure(1, PCR, os.urandom(20))


@pytest.mark.parametrize("scheme", SCHEMES)
def test_tamper_with_true_value_is_noop(scheme):
    host = honest_host(scheme)
    host.tamper(1, PCR, host.vtpms[1].vpcrs[PCR])
    host.measure(1, PCR, os.urandom(20))


def test_unbound_pcr_only_touches_vtpm():
    host = honest_host(Scheme.TREE)
    before = host.device.pcr_read(PCR)
    host.measure(1, 5, os.urandom(20))
    assert host.device.pcr_read(PCR) == before


def test_capacity():
    host = Host(Scheme.TREE, height=1, aik=HmacKey(b"a"))
    host.create_vtpms(2)
    with pytest.raises(CapacityExhausted):
        host.create_vtpm()


def test_unknown_vtpm():
    host = honest_host(Scheme.TREE)
    with pytest.raises(UnknownVtpm):
        host.measure(99, PCR, bytes(20))


def test_incremental_late_join():
    host = Host(Scheme.INCREMENTAL, aik=HmacKey(b"a"))
    host.create_vtpm(1, HmacKey(b"1"))
    assert host.accs[PCR].setup_vpcrs == {1: bytes(20)}
    host.measure(1, PCR, os.urandom(20))
    host.create_vtpm(2, HmacKey(b"2"))
    host.measure(2, PCR, os.urandom(20))
    b = host.attest(2, PCR, bytes(16))
    from vpcrbind.attest import verify_bundle

    assert verify_bundle(b, bytes(16), host.trusted_keys()).accepted


@pytest.mark.parametrize("scheme", SCHEMES)
def test_state_round_trip(tmp_path, scheme):
    sd = StateDir(tmp_path / "st")
    host = Host(scheme, (PCR, 11), height=3, aik=sd.aik())
    host.create_vtpms(3, vaik_for=sd.vaik)
    for k in (1, 2, 3, 1):
        host.measure(k, PCR, os.urandom(20), b"m")
    sd.save(host)
    again = sd.load()
    assert again.to_dict() == host.to_dict()
    assert again.trusted_keys().keys() == host.trusted_keys().keys()
    assert load_trusted(sd.trusted_file).keys() == host.trusted_keys().keys()
    again.measure(2, PCR, os.urandom(20))
    again.measure(3, 11, os.urandom(20))
