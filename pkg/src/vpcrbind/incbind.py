"""Incremental-hash binding: setup product, update driver and replayable log."""

import struct
from dataclasses import dataclass, field

from . import crypto
from .crypto import M521, RESIDUE_SIZE, Modulus, check_digest160
from .hwtpm import HwTpm, PcrMode, check_index, increment_hash_value, vtpm_tag
from .perf import OpCounters

SML_VERSION = 1

_ENTRY = struct.Struct(f">IIB20s20s{RESIDUE_SIZE}s{RESIDUE_SIZE}s")
_SETUP_ITEM = struct.Struct(">I20s")


class ReplayMismatch(Exception):
    def __init__(self, seq: int, msg: str = "replay mismatch"):
        super().__init__(f"{msg} at seq {seq}")
        self.seq = seq


class DesyncDetected(RuntimeError):
    pass


@dataclass(frozen=True)
class IncSmlEntry:
    seq: int
    k: int
    i: int
    vpcr_old: bytes
    vpcr_new: bytes
    pcr_before: int
    pcr_after: int

    def to_bytes(self) -> bytes:
        return _ENTRY.pack(
            self.seq,
            self.k,
            self.i,
            self.vpcr_old,
            self.vpcr_new,
            crypto.encode_residue(self.pcr_before),
            crypto.encode_residue(self.pcr_after),
        )

    @classmethod
    def from_bytes(cls, b: bytes) -> "IncSmlEntry":
        seq, k, i, old, new, before, after = _ENTRY.unpack(b)
        return cls(seq, k, check_index(i), old, new, crypto.decode_residue(before), crypto.decode_residue(after))


@dataclass
class IncAccumulator:
    i: int
    initial: int
    log: list[IncSmlEntry] = field(default_factory=list)
    setup_vpcrs: dict[int, bytes] = field(default_factory=dict)

    @property
    def current(self) -> int:
        return self.log[-1].pcr_after if self.log else self.initial

    def sml_bytes(self) -> bytes:
        return encode_inc_sml(self.i, self.initial, self.log)


def setup_term(k: int, vpcr: bytes, m: Modulus = M521) -> int:
    return crypto.to_residue(crypto.sha512(vtpm_tag(k) + vpcr), m)


def setup_product(vpcrs: dict[int, bytes], m: Modulus = M521, counters: OpCounters | None = None) -> int:
    acc = 1
    for k, v in vpcrs.items():
        acc = crypto.mod_mult(acc, setup_term(k, check_digest160(v, "vpcr"), m), m)
    if counters is not None:
        counters.hashes += len(vpcrs)
        counters.mults += len(vpcrs)
    return acc


def inc_setup(
    vpcrs: dict[int, bytes], i: int, m: Modulus | None = None, tpm: HwTpm | None = None
) -> int:
    """Product of every vTPM's hashed vPCR; loads it into ``tpm`` when given."""
    if not vpcrs:
        raise ValueError("setup needs at least one vTPM")
    if m is None:
        m = tpm.modulus if tpm is not None else M521
    value = setup_product(vpcrs, m)
    if tpm is not None:
        tpm.bind_index(i, PcrMode.INCREMENTAL, value)
    return value


def inc_update(acc: IncAccumulator, tpm: HwTpm, k: int, vpcr_old: bytes, vpcr_new: bytes) -> IncSmlEntry:
    before = acc.current
    after = tpm.increment_hash(acc.i, k, vpcr_old, vpcr_new)
    entry = IncSmlEntry(len(acc.log), k, acc.i, bytes(vpcr_old), bytes(vpcr_new), before, after)
    acc.log.append(entry)
    expected = increment_hash_value(before, k, vpcr_old, vpcr_new, tpm.modulus)
    if expected != after:
        raise DesyncDetected(f"device value diverged from the local log at seq {entry.seq}")
    return entry


def inc_replay(
    initial: int, log: list[IncSmlEntry], m: Modulus = M521, counters: OpCounters | None = None
) -> int:
    """Re-run every logged update from ``initial`` and return the final value.

    Raises :class:`ReplayMismatch` at the first entry that is out of sequence
    or whose stored values disagree with the recomputation.
    """
    value = initial
    for pos, e in enumerate(log):
        if e.seq != pos:
            raise ReplayMismatch(pos, "sequence gap")
        if e.pcr_before != value:
            raise ReplayMismatch(e.seq, "pcr_before does not match running value")
        value = increment_hash_value(value, e.k, e.vpcr_old, e.vpcr_new, m)
        if counters is not None:
            counters.hashes += 2
            counters.divs += 1
            counters.mults += 1
        if value != e.pcr_after:
            raise ReplayMismatch(e.seq)
    return value


def replay_vpcrs(setup_vpcrs: dict[int, bytes], log: list[IncSmlEntry]) -> dict[int, bytes]:
    """Latest vPCR per vTPM implied by the log; checks each update continues its predecessor."""
    latest = dict(setup_vpcrs)
    for e in log:
        if e.k in latest and latest[e.k] != e.vpcr_old:
            raise ReplayMismatch(e.seq, f"vTPM {e.k} old value breaks the chain")
        latest[e.k] = e.vpcr_new
    return latest


def encode_inc_sml(i: int, initial: int, log: list[IncSmlEntry]) -> bytes:
    head = struct.pack(">BB", SML_VERSION, i) + crypto.encode_residue(initial) + struct.pack(">I", len(log))
    return head + b"".join(e.to_bytes() for e in log)


def decode_inc_sml(data: bytes) -> tuple[int, int, list[IncSmlEntry]]:
    head = 2 + RESIDUE_SIZE + 4
    if len(data) < head:
        raise ValueError("incremental SML too short")
    version, i = struct.unpack_from(">BB", data)
    if version != SML_VERSION:
        raise ValueError(f"unsupported incremental SML version {version}")
    initial = crypto.decode_residue(data[2 : 2 + RESIDUE_SIZE])
    (count,) = struct.unpack_from(">I", data, 2 + RESIDUE_SIZE)
    if len(data) != head + count * _ENTRY.size:
        raise ValueError("incremental SML length does not match its entry count")
    log = [
        IncSmlEntry.from_bytes(data[off : off + _ENTRY.size])
        for off in range(head, len(data), _ENTRY.size)
    ]
    return check_index(i), initial, log


def encode_setup(vpcrs: dict[int, bytes]) -> bytes:
    return struct.pack(">I", len(vpcrs)) + b"".join(_SETUP_ITEM.pack(k, v) for k, v in sorted(vpcrs.items()))


def decode_setup(data: bytes) -> dict[int, bytes]:
    if len(data) < 4:
        raise ValueError("setup map too short")
    (count,) = struct.unpack_from(">I", data)
    if len(data) != 4 + count * _SETUP_ITEM.size:
        raise ValueError("setup map length does not match its count")
    out = {}
    for off in range(4, len(data), _SETUP_ITEM.size):
        k, v = _SETUP_ITEM.unpack_from(data, off)
        if k in out or (out and k < max(out)):
            raise ValueError("setup map must list vTPM ids in strictly increasing order")
        out[k] = v
    return out

