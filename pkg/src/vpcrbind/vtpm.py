"""Software vTPM instances: vPCR banks, stored measurement log, vAIK quotes."""

import struct
from dataclasses import dataclass, field

from . import crypto
from .crypto import ZERO_DIGEST, check_digest160
from .hwtpm import NUM_PCRS, check_index

SML_VERSION = 1
MAX_DESCRIPTION = 255


@dataclass(frozen=True)
class SmlEntry:
    pcr_index: int
    measurement: bytes
    description: bytes = b""


@dataclass(frozen=True)
class VQuote:
    vtpm_id: int
    pcr_index: int
    nonce: bytes
    vpcr: bytes
    signature: bytes
    key_id: str

    def message(self) -> bytes:
        return vquote_message(self.vtpm_id, self.pcr_index, self.nonce, self.vpcr)


def vquote_message(k: int, i: int, nonce: bytes, vpcr: bytes) -> bytes:
    return b"VQUT" + struct.pack(">II", k, i) + struct.pack(">I", len(nonce)) + nonce + vpcr


@dataclass
class VTpm:
    id: int
    vaik: crypto.Signer = field(default_factory=crypto.Ed25519Signer, repr=False)
    vpcrs: list[bytes] = field(default_factory=lambda: [ZERO_DIGEST] * NUM_PCRS)
    sml: list[SmlEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.id < 1:
            raise ValueError("vTPM ids start at 1")

    def extend(self, i: int, measurement: bytes, description: bytes = b"") -> tuple[bytes, bytes]:
        return vtpm_extend(self, i, measurement, description)

    def quote(self, i: int, nonce: bytes) -> VQuote:
        return vtpm_quote(self, i, nonce)


def vtpm_extend(v: VTpm, i: int, measurement: bytes, description: bytes = b"") -> tuple[bytes, bytes]:
    """Extend vPCR ``i`` and log the measurement; returns (old, new)."""
    check_index(i)
    measurement = check_digest160(measurement, "measurement")
    if isinstance(description, str):
        description = description.encode()
    if len(description) > MAX_DESCRIPTION:
        raise ValueError(f"description longer than {MAX_DESCRIPTION} bytes")
    old = v.vpcrs[i]
    new = crypto.sha1(old + measurement)
    v.vpcrs[i] = new
    v.sml.append(SmlEntry(i, measurement, bytes(description)))
    return old, new


def vtpm_quote(v: VTpm, i: int, nonce: bytes) -> VQuote:
    check_index(i)
    if not nonce:
        raise ValueError("nonce must be non-empty")
    sig = v.vaik.sign(vquote_message(v.id, i, nonce, v.vpcrs[i]))
    return VQuote(v.id, i, bytes(nonce), v.vpcrs[i], sig, v.vaik.key_id)


def vtpm_tamper(v: VTpm, i: int, forged: bytes) -> None:
    """Overwrite a vPCR behind the binding layer (attack injection)."""
    check_index(i)
    v.vpcrs[i] = check_digest160(forged, "forged value")


def replay_sml(sml: list[SmlEntry], counters=None) -> list[bytes]:
    vpcrs = [ZERO_DIGEST] * NUM_PCRS
    for e in sml:
        vpcrs[e.pcr_index] = crypto.sha1(vpcrs[e.pcr_index] + e.measurement)
    if counters is not None:
        counters.hashes += len(sml)
    return vpcrs


def verify_vquote(q: VQuote, verifier: crypto.Verifier) -> bool:
    return q.key_id == verifier.key_id and verifier.verify(q.message(), q.signature)


def encode_sml(sml: list[SmlEntry]) -> bytes:
    out = [struct.pack(">BI", SML_VERSION, len(sml))]
    for e in sml:
        out.append(struct.pack(">B20sB", e.pcr_index, e.measurement, len(e.description)) + e.description)
    return b"".join(out)


def decode_sml(data: bytes) -> list[SmlEntry]:
    if len(data) < 5:
        raise ValueError("SML too short")
    version, count = struct.unpack_from(">BI", data)
    if version != SML_VERSION:
        raise ValueError(f"unsupported SML version {version}")
    off = 5
    sml = []
    for _ in range(count):
        if off + 22 > len(data):
            raise ValueError("SML truncated")
        i, m, dlen = struct.unpack_from(">B20sB", data, off)
        off += 22
        if off + dlen > len(data):
            raise ValueError("SML truncated")
        sml.append(SmlEntry(check_index(i), m, data[off : off + dlen]))
        off += dlen
    if off != len(data):
        raise ValueError("trailing bytes after SML")
    return sml

