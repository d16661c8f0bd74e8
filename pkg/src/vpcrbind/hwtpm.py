"""Simulated hardware TPM with the leaf-update and incremental-hash commands.

Two binding schemes share one device: a PCR index is either bound to a
host-side hash tree (the PCR holds the tree root) or to the incremental
accumulator (the PCR holds a residue modulo a large prime).  Each index is
bound once, at setup.

Commands can be issued through the Python methods or as raw byte blocks via
:meth:`HwTpm.transmit`.  All multi-byte fields are big-endian.
"""

import enum
import struct
import threading
from dataclasses import dataclass

from . import crypto
from .crypto import SHA1_SIZE, check_digest160
from .perf import OpCounters

NUM_PCRS = 24

TAG_RQU_COMMAND = 0x00C1
TAG_RSP_COMMAND = 0x00C4

ORD_UPDATE_LEAF_INIT = 0x20000001
ORD_UPDATE_LEAF = 0x20000002
ORD_INCREMENT_HASH = 0x20000003

HEADER = struct.Struct(">HII")  # tag, paramSize, ordinal
_INIT_BODY = struct.Struct(">IH20s20s")
_LEAF_BODY = struct.Struct(">I20s")
_INC_BODY = struct.Struct(">II20s20s")

UPDATE_LEAF_INIT_SIZE = HEADER.size + _INIT_BODY.size  # 56
UPDATE_LEAF_SIZE = HEADER.size + _LEAF_BODY.size  # 34
INCREMENT_HASH_SIZE = HEADER.size + _INC_BODY.size  # 58

SIBLING_LEFT_FLAG = 0x80000000


class TpmError(Exception):
    code = 0x0800_0000


class WrongMode(TpmError):
    code = 0x0800_0001


class SessionBusy(TpmError):
    code = 0x0800_0002


class NoSession(TpmError):
    code = 0x0800_0003


class Tampered(TpmError):
    """Recomputed old root differs from the stored PCR."""

    code = 0x0800_0004


class MalformedBlock(TpmError):
    code = 0x0800_0005


_ERRORS = {cls.code: cls for cls in (TpmError, WrongMode, SessionBusy, NoSession, Tampered, MalformedBlock)}


class PcrMode(enum.Enum):
    UNBOUND = 0
    TREE = 1
    INCREMENTAL = 2


def check_index(i: int) -> int:
    if not isinstance(i, int) or not 0 <= i < NUM_PCRS:
        raise ValueError(f"PCR index must be in [0, {NUM_PCRS - 1}]")
    return i


def vtpm_tag(k: int) -> bytes:
    return struct.pack(">I", k)


def increment_hash_value(
    pcr: int, k: int, vpcr_old: bytes, vpcr_new: bytes, m: crypto.Modulus = crypto.M521
) -> int:
    """The accumulator transition: divide out the old term, multiply in a history-bearing new one."""
    old_term = crypto.to_residue(crypto.sha512(vtpm_tag(k) + vpcr_old), m)
    h = crypto.mod_div(pcr, old_term, m)
    new_term = crypto.to_residue(crypto.sha512(vtpm_tag(k) + vpcr_new + crypto.encode_residue(pcr)), m)
    return crypto.mod_mult(h, new_term, m)


# Command codec ----------------------------------------------------------------


@dataclass(frozen=True)
class UpdateLeafInit:
    pcr_index: int
    height: int
    vpcr_old: bytes
    vpcr_new: bytes
    ordinal = ORD_UPDATE_LEAF_INIT


@dataclass(frozen=True)
class UpdateLeaf:
    pcr_index: int
    sibling: bytes
    sibling_is_left: bool
    ordinal = ORD_UPDATE_LEAF


@dataclass(frozen=True)
class IncrementHash:
    pcr_index: int
    vtpm_id: int
    vpcr_old: bytes
    vpcr_new: bytes
    ordinal = ORD_INCREMENT_HASH


def encode_command(cmd) -> bytes:
    if isinstance(cmd, UpdateLeafInit):
        body = _INIT_BODY.pack(cmd.pcr_index, cmd.height, cmd.vpcr_old, cmd.vpcr_new)
    elif isinstance(cmd, UpdateLeaf):
        if cmd.pcr_index & SIBLING_LEFT_FLAG:
            raise ValueError("PCR index collides with the sibling flag bit")
        word = cmd.pcr_index | (SIBLING_LEFT_FLAG if cmd.sibling_is_left else 0)
        body = _LEAF_BODY.pack(word, cmd.sibling)
    elif isinstance(cmd, IncrementHash):
        body = _INC_BODY.pack(cmd.pcr_index, cmd.vtpm_id, cmd.vpcr_old, cmd.vpcr_new)
    else:
        raise TypeError(f"not a command: {cmd!r}")
    for d in (getattr(cmd, a, None) for a in ("vpcr_old", "vpcr_new", "sibling")):
        if d is not None and len(d) != SHA1_SIZE:
            raise ValueError("digest fields must be 20 bytes")
    return HEADER.pack(TAG_RQU_COMMAND, HEADER.size + len(body), cmd.ordinal) + body


_SIZES = {
    ORD_UPDATE_LEAF_INIT: UPDATE_LEAF_INIT_SIZE,
    ORD_UPDATE_LEAF: UPDATE_LEAF_SIZE,
    ORD_INCREMENT_HASH: INCREMENT_HASH_SIZE,
}


def decode_command(block: bytes):
    if len(block) < HEADER.size:
        raise MalformedBlock(f"block too short ({len(block)} bytes)")
    tag, size, ordinal = HEADER.unpack_from(block)
    if tag != TAG_RQU_COMMAND:
        raise MalformedBlock(f"bad tag 0x{tag:04x}")
    if size != len(block):
        raise MalformedBlock(f"paramSize {size} != block length {len(block)}")
    if ordinal not in _SIZES:
        raise MalformedBlock(f"unknown ordinal 0x{ordinal:08x}")
    if size != _SIZES[ordinal]:
        raise MalformedBlock(f"ordinal 0x{ordinal:08x} expects {_SIZES[ordinal]} bytes")
    body = block[HEADER.size:]
    if ordinal == ORD_UPDATE_LEAF_INIT:
        return UpdateLeafInit(*_INIT_BODY.unpack(body))
    if ordinal == ORD_UPDATE_LEAF:
        word, sibling = _LEAF_BODY.unpack(body)
        return UpdateLeaf(word & ~SIBLING_LEFT_FLAG, sibling, bool(word & SIBLING_LEFT_FLAG))
    return IncrementHash(*_INC_BODY.unpack(body))


def encode_response(code: int, body: bytes = b"") -> bytes:
    return struct.pack(">HII", TAG_RSP_COMMAND, 10 + len(body), code) + body


def decode_response(resp: bytes) -> bytes:
    """Return the response body, raising the matching :class:`TpmError` on failure."""
    if len(resp) < 10:
        raise MalformedBlock("response too short")
    tag, size, code = struct.unpack_from(">HII", resp)
    if tag != TAG_RSP_COMMAND or size != len(resp):
        raise MalformedBlock("bad response header")
    if code:
        raise _ERRORS.get(code, TpmError)(resp[10:].decode(errors="replace"))
    return resp[10:]


# Device ----------------------------------------------------------------------


@dataclass
class UpdateSession:
    c: int = 0
    tmp_old: bytes | None = None
    tmp_new: bytes | None = None

    def clear(self):
        self.c = 0
        self.tmp_old = self.tmp_new = None


@dataclass(frozen=True)
class HwQuote:
    pcr_index: int
    mode: PcrMode
    nonce: bytes
    value: bytes  # 20-byte root or 66-byte residue encoding
    signature: bytes
    key_id: str

    def message(self) -> bytes:
        return quote_message(self.pcr_index, self.mode, self.nonce, self.value)

    def residue(self) -> int:
        return crypto.decode_residue(self.value)


def quote_message(i: int, mode: PcrMode, nonce: bytes, value: bytes) -> bytes:
    return b"HWQT" + struct.pack(">IB", i, mode.value) + _lp(nonce) + _lp(value)


def _lp(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


class HwTpm:
    """The hardware TPM.

    Every command runs under one device lock, so a handle can be shared by
    threads and observable transitions are linearizable.
    """

    def __init__(self, aik: crypto.Signer | None = None, modulus: crypto.Modulus = crypto.M521):
        self.aik = aik if aik is not None else crypto.Ed25519Signer()
        self.modulus = modulus
        self.modes = {i: PcrMode.UNBOUND for i in range(NUM_PCRS)}
        self.tree_pcrs: dict[int, bytes] = {}
        self.inc_pcrs: dict[int, int] = {}
        self.sessions = {i: UpdateSession() for i in range(NUM_PCRS)}
        self.counters = OpCounters()
        self.lock = threading.RLock()

    def bind_index(self, i: int, mode: PcrMode, initial) -> None:
        """Setup phase: fix the mode of index ``i`` and load its initial value."""
        check_index(i)
        with self.lock:
            if self.modes[i] is not PcrMode.UNBOUND:
                raise WrongMode(f"PCR {i} is already bound")
            if mode is PcrMode.TREE:
                self.tree_pcrs[i] = check_digest160(initial, "initial root")
            elif mode is PcrMode.INCREMENTAL:
                self.inc_pcrs[i] = self.modulus.check(initial)
            else:
                raise ValueError("cannot bind to UNBOUND")
            self.modes[i] = mode

    def _require(self, i: int, mode: PcrMode):
        check_index(i)
        if self.modes[i] is not mode:
            raise WrongMode(f"PCR {i} is {self.modes[i].name}, not {mode.name}")

    def _count_command(self, size: int):
        self.counters.commands += 1
        self.counters.command_bytes += size

    def update_leaf_init(self, i: int, vpcr_old: bytes, vpcr_new: bytes, height: int) -> None:
        with self.lock:
            self._count_command(UPDATE_LEAF_INIT_SIZE)
            self._require(i, PcrMode.TREE)
            if height < 1:
                raise ValueError("tree height must be >= 1")
            s = self.sessions[i]
            if s.c != 0:
                raise SessionBusy(f"a hash tree update is running on PCR {i}")
            s.c = height
            s.tmp_old = check_digest160(vpcr_old, "vpcr_old")
            s.tmp_new = check_digest160(vpcr_new, "vpcr_new")

    def update_leaf(self, i: int, sibling: bytes, sibling_is_left: bool = False) -> bytes | None:
        """Fold one sibling into the running session.

        Returns ``None`` while levels remain and the new PCR value once the
        root is reached.  Raises :class:`Tampered` if the recomputed old root
        does not match the stored PCR; the PCR is then left untouched.
        """
        with self.lock:
            self._count_command(UPDATE_LEAF_SIZE)
            self._require(i, PcrMode.TREE)
            s = self.sessions[i]
            if s.c == 0:
                raise NoSession(f"no hash tree update running on PCR {i}")
            sibling = check_digest160(sibling, "sibling")
            if sibling_is_left:
                s.tmp_old = crypto.sha1(sibling + s.tmp_old)
                s.tmp_new = crypto.sha1(sibling + s.tmp_new)
            else:
                s.tmp_old = crypto.sha1(s.tmp_old + sibling)
                s.tmp_new = crypto.sha1(s.tmp_new + sibling)
            self.counters.hashes += 2
            s.c -= 1
            if s.c > 0:
                return None
            old_root, new_root = s.tmp_old, s.tmp_new
            s.clear()
            if old_root != self.tree_pcrs[i]:
                raise Tampered(f"hash tree bound to PCR {i} is tampered")
            self.tree_pcrs[i] = new_root
            return new_root

    def update_abort(self, i: int) -> None:
        check_index(i)
        with self.lock:
            self.sessions[i].clear()

    def session(self, i: int) -> UpdateSession:
        return self.sessions[check_index(i)]

    def increment_hash(self, i: int, k: int, vpcr_old: bytes, vpcr_new: bytes) -> int:
        with self.lock:
            self._count_command(INCREMENT_HASH_SIZE)
            self._require(i, PcrMode.INCREMENTAL)
            new = increment_hash_value(
                self.inc_pcrs[i],
                k,
                check_digest160(vpcr_old, "vpcr_old"),
                check_digest160(vpcr_new, "vpcr_new"),
                self.modulus,
            )
            self.counters.hashes += 2
            self.counters.divs += 1
            self.counters.mults += 1
            self.inc_pcrs[i] = new
            return new

    def pcr_read(self, i: int):
        check_index(i)
        with self.lock:
            mode = self.modes[i]
            if mode is PcrMode.TREE:
                return self.tree_pcrs[i]
            if mode is PcrMode.INCREMENTAL:
                return self.inc_pcrs[i]
            raise WrongMode(f"PCR {i} is not bound")

    def quote(self, i: int, nonce: bytes) -> HwQuote:
        if not nonce:
            raise ValueError("nonce must be non-empty")
        with self.lock:
            value = self.pcr_read(i)
            mode = self.modes[i]
            if mode is PcrMode.INCREMENTAL:
                value = crypto.encode_residue(value)
            sig = self.aik.sign(quote_message(i, mode, nonce, value))
            return HwQuote(i, mode, bytes(nonce), value, sig, self.aik.key_id)

    def transmit(self, block: bytes) -> bytes:
        """Execute one raw command block and return the raw response."""
        try:
            cmd = decode_command(block)
            if isinstance(cmd, UpdateLeafInit):
                self.update_leaf_init(cmd.pcr_index, cmd.vpcr_old, cmd.vpcr_new, cmd.height)
                return encode_response(0)
            if isinstance(cmd, UpdateLeaf):
                root = self.update_leaf(cmd.pcr_index, cmd.sibling, cmd.sibling_is_left)
                return encode_response(0, root or b"")
            value = self.increment_hash(cmd.pcr_index, cmd.vtpm_id, cmd.vpcr_old, cmd.vpcr_new)
            return encode_response(0, crypto.encode_residue(value))
        except TpmError as e:
            return encode_response(e.code, str(e).encode())
        except ValueError as e:
            return encode_response(TpmError.code, str(e).encode())


def verify_quote(q: HwQuote, verifier: crypto.Verifier) -> bool:
    return q.key_id == verifier.key_id and verifier.verify(q.message(), q.signature)
