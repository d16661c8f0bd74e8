"""Quote bundles, challenger-side verification and the attestation wire protocol.

Bundle layout: ``b"QBND" | version:u8 | scheme:u8`` followed by a fixed
sequence of fields, each prefixed with a 4-byte big-endian length.  Frames on
the wire use the same 4-byte length prefix.
"""

import enum
import os
import socket
import struct
from dataclasses import dataclass, field

from . import crypto
from .crypto import SHA1_SIZE, M521, Modulus
from .hwtpm import HwQuote, HwTpm, PcrMode, verify_quote
from .incbind import (
    IncAccumulator,
    ReplayMismatch,
    decode_inc_sml,
    decode_setup,
    encode_inc_sml,
    encode_setup,
    inc_replay,
    replay_vpcrs,
    setup_product,
)
from .perf import OpCounters
from .treebind import HashTreeStore, build_levels
from .vtpm import SmlEntry, VQuote, VTpm, decode_sml, encode_sml, replay_sml, verify_vquote

BUNDLE_MAGIC = b"QBND"
BUNDLE_VERSION = 1
PROTOCOL_VERSION = 1
MIN_NONCE = 16
MAX_FRAME = 64 << 20


class Scheme(enum.IntEnum):
    TREE = 1
    INCREMENTAL = 2


class Reason(enum.Enum):
    BAD_V_SIGNATURE = "BadVSignature"
    BAD_HW_SIGNATURE = "BadHwSignature"
    SML_MISMATCH = "SmlMismatch"
    ROOT_MISMATCH = "RootMismatch"
    REPLAY_MISMATCH = "ReplayMismatch"
    STALE_NONCE = "StaleNonce"
    RML_VIOLATION = "RmlViolation"


class MalformedBundle(ValueError):
    pass


class ProtocolError(Exception):
    pass


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: Reason | None = None
    detail: str = ""

    def __post_init__(self):
        if self.accepted and self.reason is not None:
            raise ValueError("an accepted verdict carries no failure reason")

    def __str__(self):
        if self.accepted:
            return "ACCEPTED"
        return f"REJECTED {self.reason.value}" + (f": {self.detail}" if self.detail else "")


@dataclass
class QuoteBundle:
    scheme: Scheme
    nonce: bytes
    vquote: VQuote
    hwquote: HwQuote
    vtpm_sml: list[SmlEntry]
    # Tree proof
    leaf_index: int | None = None
    tree: HashTreeStore | None = None
    # Incremental proof
    setup_vpcrs: dict[int, bytes] = field(default_factory=dict)
    inc_initial: int | None = None
    inc_log: list = field(default_factory=list)

    def to_bytes(self) -> bytes:
        return encode_bundle(self)


# Serialization --------------------------------------------------------------------


def _lp(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def encode_bundle(b: QuoteBundle) -> bytes:
    vq, hq = b.vquote, b.hwquote
    fields = [
        b.nonce,
        struct.pack(">I", vq.vtpm_id),
        struct.pack(">B", vq.pcr_index),
        vq.vpcr,
        vq.signature,
        vq.key_id.encode(),
        struct.pack(">B", hq.mode.value),
        hq.value,
        hq.signature,
        hq.key_id.encode(),
        encode_sml(b.vtpm_sml),
    ]
    if b.scheme is Scheme.TREE:
        fields += [struct.pack(">I", b.leaf_index), b.tree.to_bytes()]
    else:
        fields += [encode_setup(b.setup_vpcrs), encode_inc_sml(vq.pcr_index, b.inc_initial, b.inc_log)]
    head = BUNDLE_MAGIC + struct.pack(">BB", BUNDLE_VERSION, b.scheme.value)
    return head + b"".join(_lp(f) for f in fields)


def _split_fields(data: bytes, off: int, count: int) -> list[bytes]:
    out = []
    for _ in range(count):
        if off + 4 > len(data):
            raise MalformedBundle("truncated field header")
        (n,) = struct.unpack_from(">I", data, off)
        off += 4
        if off + n > len(data):
            raise MalformedBundle("truncated field body")
        out.append(data[off : off + n])
        off += n
    if off != len(data):
        raise MalformedBundle("trailing bytes after bundle")
    return out


def _u(fmt: str, raw: bytes, what: str):
    if len(raw) != struct.calcsize(fmt):
        raise MalformedBundle(f"bad {what} field width")
    return struct.unpack(fmt, raw)[0]


def decode_bundle(data: bytes) -> QuoteBundle:
    if len(data) < 6 or data[:4] != BUNDLE_MAGIC:
        raise MalformedBundle("not a quote bundle")
    version, scheme = data[4], data[5]
    if version != BUNDLE_VERSION:
        raise MalformedBundle(f"unsupported bundle version {version}")
    try:
        scheme = Scheme(scheme)
    except ValueError:
        raise MalformedBundle(f"unknown scheme {scheme}") from None
    f = _split_fields(data, 6, 13)
    try:
        nonce = f[0]
        k = _u(">I", f[1], "vtpm id")
        i = _u(">B", f[2], "pcr index")
        if len(f[3]) != SHA1_SIZE:
            raise MalformedBundle("bad vPCR width")
        vq = VQuote(k, i, nonce, f[3], f[4], f[5].decode("ascii"))
        mode = PcrMode(_u(">B", f[6], "mode"))
        expected_mode = PcrMode.TREE if scheme is Scheme.TREE else PcrMode.INCREMENTAL
        if mode is not expected_mode:
            raise MalformedBundle("hardware quote mode does not match the scheme")
        width = SHA1_SIZE if mode is PcrMode.TREE else crypto.RESIDUE_SIZE
        if len(f[7]) != width:
            raise MalformedBundle("bad PCR value width")
        hq = HwQuote(i, mode, nonce, f[7], f[8], f[9].decode("ascii"))
        sml = decode_sml(f[10])
        b = QuoteBundle(scheme, nonce, vq, hq, sml)
        if scheme is Scheme.TREE:
            b.leaf_index = _u(">I", f[11], "leaf index")
            b.tree = HashTreeStore.from_bytes(f[12])
        else:
            b.setup_vpcrs = decode_setup(f[11])
            inc_i, b.inc_initial, b.inc_log = decode_inc_sml(f[12])
            if inc_i != i:
                raise MalformedBundle("incremental SML bound to another PCR")
    except MalformedBundle:
        raise
    except (ValueError, IndexError, UnicodeDecodeError) as e:
        raise MalformedBundle(str(e)) from e
    return b


# Attester / challenger ----------------------------------------------------------------------


def attest(nonce: bytes, v: VTpm, device: HwTpm, binding, scheme: Scheme, i: int | None = None) -> QuoteBundle:
    """Assemble evidence for vPCR ``i`` of ``v``.

    ``binding`` is the :class:`HashTreeStore` or :class:`IncAccumulator`
    bound to that index.  The proof snapshot and the hardware quote are
    taken under the device lock.
    """
    if len(nonce) < MIN_NONCE:
        raise ValueError(f"nonce must be at least {MIN_NONCE} bytes")
    if i is None:
        i = binding.pcr_index if scheme is Scheme.TREE else binding.i
    vq = v.quote(i, nonce)
    with device.lock:
        hq = device.quote(i, nonce)
        # only the quoted index's entries: nothing else in the bundle is signed over
        b = QuoteBundle(scheme, bytes(nonce), vq, hq, [e for e in v.sml if e.pcr_index == i])
        if scheme is Scheme.TREE:
            if not isinstance(binding, HashTreeStore):
                raise TypeError("tree scheme needs a HashTreeStore")
            b.leaf_index = v.id - 1
            b.tree = HashTreeStore.from_bytes(binding.to_bytes())
        else:
            if not isinstance(binding, IncAccumulator):
                raise TypeError("incremental scheme needs an IncAccumulator")
            b.setup_vpcrs = dict(binding.setup_vpcrs)
            b.inc_initial = binding.initial
            b.inc_log = list(binding.log)
    return b


def _trusted_map(trusted) -> dict:
    if isinstance(trusted, dict):
        return trusted
    return {v.key_id: v for v in trusted}


def verify_bundle(
    b: QuoteBundle,
    expected_nonce: bytes,
    trusted,
    rml: set[bytes] | None = None,
    modulus: Modulus = M521,
    counters: OpCounters | None = None,
) -> Verdict:
    """Check a bundle; the first failing check determines the verdict.

    ``trusted`` maps key ids to verifiers (or is an iterable of verifiers).
    ``rml`` is an optional allow-list of measurement digests.
    """
    keys = _trusted_map(trusted)
    if len(expected_nonce) < MIN_NONCE or b.nonce != expected_nonce:
        return Verdict(False, Reason.STALE_NONCE)
    vq, hq = b.vquote, b.hwquote
    if vq.nonce != b.nonce or hq.nonce != b.nonce:
        return Verdict(False, Reason.STALE_NONCE, "quote nonce differs from bundle nonce")

    vkey = keys.get(vq.key_id)
    if vkey is None or not verify_vquote(vq, vkey):
        return Verdict(False, Reason.BAD_V_SIGNATURE)
    hkey = keys.get(hq.key_id)
    if hkey is None or not verify_quote(hq, hkey):
        return Verdict(False, Reason.BAD_HW_SIGNATURE)
    if hq.pcr_index != vq.pcr_index:
        return Verdict(False, Reason.BAD_HW_SIGNATURE, "quotes cover different PCRs")

    i = vq.pcr_index
    if any(e.pcr_index != i for e in b.vtpm_sml):
        return Verdict(False, Reason.SML_MISMATCH, "log carries entries for another PCR")
    if replay_sml(b.vtpm_sml, counters)[i] != vq.vpcr:
        return Verdict(False, Reason.SML_MISMATCH)
    if rml is not None:
        for e in b.vtpm_sml:
            if e.measurement not in rml:
                return Verdict(False, Reason.RML_VIOLATION, e.measurement.hex())

    if b.scheme is Scheme.TREE:
        return _verify_tree(b, counters)
    return _verify_incremental(b, modulus, counters)


def _verify_tree(b: QuoteBundle, counters) -> Verdict:
    t = b.tree
    if t.pcr_index != b.vquote.pcr_index:
        return Verdict(False, Reason.ROOT_MISMATCH, "snapshot bound to another PCR")
    if b.leaf_index != b.vquote.vtpm_id - 1 or b.leaf_index >= t.capacity:
        return Verdict(False, Reason.ROOT_MISMATCH, "leaf index does not belong to the quoted vTPM")
    levels = build_levels(t.height, t.leaves, counters)
    if levels[-1][0] != b.hwquote.value:
        return Verdict(False, Reason.ROOT_MISMATCH)
    if t.leaves[b.leaf_index] != b.vquote.vpcr:
        return Verdict(False, Reason.ROOT_MISMATCH, "quoted vPCR is not the leaf value")
    return Verdict(True)


def _verify_incremental(b: QuoteBundle, m: Modulus, counters) -> Verdict:
    i = b.vquote.pcr_index
    if setup_product(b.setup_vpcrs, m, counters) != b.inc_initial:
        return Verdict(False, Reason.REPLAY_MISMATCH, "initial value is not the setup product")
    for e in b.inc_log:
        if e.i != i:
            return Verdict(False, Reason.REPLAY_MISMATCH, f"entry {e.seq} logged for PCR {e.i}")
    try:
        final = inc_replay(b.inc_initial, b.inc_log, m, counters)
        latest = replay_vpcrs(b.setup_vpcrs, b.inc_log)
    except ReplayMismatch as e:
        return Verdict(False, Reason.REPLAY_MISMATCH, str(e))
    if final != b.hwquote.residue():
        return Verdict(False, Reason.REPLAY_MISMATCH, "replayed value differs from the signed PCR")
    if latest.get(b.vquote.vtpm_id) != b.vquote.vpcr:
        return Verdict(False, Reason.REPLAY_MISMATCH, "quoted vPCR is not the last logged value")
    return Verdict(True)


# Wire protocol -------------------------------------------------------------------


def send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(struct.pack(">I", len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout:
            raise TimeoutError("attestation peer timed out") from None
        if not chunk:
            raise ProtocolError(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket) -> bytes:
    (n,) = struct.unpack(">I", _recv_exact(sock, 4))
    if n > MAX_FRAME:
        raise ProtocolError(f"frame of {n} bytes exceeds limit")
    return _recv_exact(sock, n)


@dataclass(frozen=True)
class Challenge:
    scheme: Scheme
    vtpm_id: int
    pcr_index: int
    nonce: bytes

    def to_bytes(self) -> bytes:
        return struct.pack(">BBIB", PROTOCOL_VERSION, self.scheme.value, self.vtpm_id, self.pcr_index) + self.nonce

    @classmethod
    def from_bytes(cls, data: bytes) -> "Challenge":
        if len(data) < 7:
            raise ProtocolError("challenge too short")
        version, scheme, k, i = struct.unpack_from(">BBIB", data)
        if version != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {version}")
        try:
            scheme = Scheme(scheme)
        except ValueError:
            raise ProtocolError(f"unknown scheme {scheme}") from None
        return cls(scheme, k, i, data[7:])


STATUS_OK = 0
STATUS_ERROR = 1


def handle_connection(conn: socket.socket, provide) -> None:
    """Serve one challenge.  ``provide(challenge) -> QuoteBundle``."""
    try:
        req = Challenge.from_bytes(recv_frame(conn))
        bundle = provide(req)
        send_frame(conn, bytes([STATUS_OK]) + bundle.to_bytes())
    except (ProtocolError, ValueError, KeyError, LookupError) as e:
        try:
            send_frame(conn, bytes([STATUS_ERROR]) + str(e).encode())
        except OSError:
            pass


def serve(listener: socket.socket, provide, once: bool = False, timeout: float | None = 10.0) -> None:
    """Accept connections and answer each with one bundle; returns once the listener is closed."""
    while True:
        try:
            conn, _ = listener.accept()
        except OSError:
            if listener.fileno() == -1:
                return
            raise
        with conn:
            conn.settimeout(timeout)
            try:
                handle_connection(conn, provide)
            except (OSError, TimeoutError):
                pass
        if once:
            return


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host, int(port)


def request_bundle(addr, req: Challenge, timeout: float = 10.0) -> bytes:
    if isinstance(addr, str):
        addr = parse_addr(addr)
    with socket.create_connection(addr, timeout=timeout) as sock:
        sock.settimeout(timeout)
        send_frame(sock, req.to_bytes())
        resp = recv_frame(sock)
    if not resp:
        raise ProtocolError("empty response")
    if resp[0] == STATUS_ERROR:
        raise ProtocolError("attester: " + resp[1:].decode(errors="replace"))
    if resp[0] != STATUS_OK:
        raise ProtocolError(f"unknown response status {resp[0]}")
    return resp[1:]


def challenge(
    addr,
    scheme: Scheme,
    vtpm_id: int,
    pcr_index: int,
    trusted,
    nonce: bytes | None = None,
    expected_nonce: bytes | None = None,
    rml: set[bytes] | None = None,
    modulus: Modulus = M521,
    timeout: float = 10.0,
) -> Verdict:
    """Run one attestation round trip and verify the answer.

    Raises :class:`MalformedBundle` for undecodable evidence and
    :class:`ProtocolError` / ``OSError`` for transport failures.
    """
    nonce = nonce if nonce is not None else os.urandom(20)
    raw = request_bundle(addr, Challenge(scheme, vtpm_id, pcr_index, nonce), timeout)
    bundle = decode_bundle(raw)
    if bundle.scheme is not scheme:
        raise ProtocolError("attester answered with another scheme")
    return verify_bundle(bundle, expected_nonce if expected_nonce is not None else nonce, trusted, rml, modulus)
