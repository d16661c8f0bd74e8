import random

from vpcrbind.attest import Scheme
from vpcrbind.crypto import HmacKey
from vpcrbind.host import Host

PCR = 10


def honest_host(scheme, seed=0, n=3, u=3, height=3, description=b"", extra_pcr=None):
    """A platform with ``n`` vTPMs, each extended ``u`` times on the bound PCR."""
    rng = random.Random(seed)
    pcrs = (PCR,) if extra_pcr is None else (PCR, extra_pcr)
    host = Host(scheme, pcrs, height=height, aik=HmacKey(b"aik-%d" % seed))
    host.create_vtpms(n, vaik_for=lambda k: HmacKey(b"vaik-%d-%d" % (seed, k)))
    order = [k for k in host.vtpms for _ in range(u)]
    rng.shuffle(order)
    for k in order:
        host.measure(k, PCR, rng.randbytes(20), description)
        if rng.random() < 0.3:
            host.measure(k, 3, rng.randbytes(20), description)
    return host


def bundle_fields(raw):
    """(name, start, end) byte ranges of every part of a serialized bundle."""
    names = [
        "nonce", "vtpm_id", "pcr_index", "vpcr", "vsig", "vkey_id",
        "hw_mode", "hw_value", "hw_sig", "hw_key_id", "vtpm_sml", "proof_a", "proof_b",
    ]
    out = [("magic", 0, 4), ("version", 4, 5), ("scheme", 5, 6)]
    off = 6
    for name in names:
        n = int.from_bytes(raw[off : off + 4], "big")
        out.append((name + ".len", off, off + 4))
        out.append((name, off + 4, off + 4 + n))
        off += 4 + n
    assert off == len(raw)
    return out


SCHEMES = [Scheme.TREE, Scheme.INCREMENTAL]
