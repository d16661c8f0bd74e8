"""A platform: one hardware TPM, its vTPMs and the binding state tying them together.

The measurement driver lives here: a vPCR extend is first applied to the
vTPM, then pushed through the active binding scheme.  Persistence helpers
write a state directory with write-temp-then-rename.
"""

import json
import os
import tempfile
import threading
from pathlib import Path

from . import crypto
from .attest import QuoteBundle, Scheme, attest
from .crypto import ZERO_DIGEST, Modulus
from .hwtpm import HwTpm, PcrMode, Tampered, check_index
from .incbind import (
    IncAccumulator,
    decode_inc_sml,
    decode_setup,
    encode_setup,
    inc_setup,
    inc_update,
    replay_vpcrs,
)
from .treebind import HashTreeStore, bind_update, new_tree
from .vtpm import VTpm, decode_sml, encode_sml, vtpm_extend, vtpm_tamper

STATE_VERSION = 1


class TamperDetected(Exception):
    pass


class UnknownVtpm(KeyError):
    pass


class CapacityExhausted(RuntimeError):
    pass


class Host:
    def __init__(
        self,
        scheme: Scheme,
        pcrs=(10,),
        height: int = 4,
        modulus: Modulus = crypto.M521,
        aik: crypto.Signer | None = None,
    ):
        self.scheme = Scheme(scheme)
        self.pcrs = tuple(sorted(set(check_index(i) for i in pcrs)))
        self.height = height
        self.device = HwTpm(aik, modulus)
        self.vtpms: dict[int, VTpm] = {}
        self.trees: dict[int, HashTreeStore] = {}
        self.accs: dict[int, IncAccumulator] = {}
        self._latest: dict[int, dict[int, bytes]] = {}
        self.lock = threading.RLock()
        if self.scheme is Scheme.TREE:
            for i in self.pcrs:
                t = new_tree(height, pcr_index=i)
                self.trees[i] = t
                self.device.bind_index(i, PcrMode.TREE, t.root)

    def vtpm(self, k: int) -> VTpm:
        try:
            return self.vtpms[k]
        except KeyError:
            raise UnknownVtpm(f"no vTPM with id {k}") from None

    def create_vtpms(self, n: int, vaik_for=None) -> list[int]:
        """Create ``n`` vTPMs at once; under incremental binding they share one setup product."""
        with self.lock:
            start = max(self.vtpms, default=0) + 1
            ids = list(range(start, start + n))
            if self.scheme is Scheme.TREE and ids and ids[-1] > 1 << self.height:
                raise CapacityExhausted(f"tree of height {self.height} holds {1 << self.height} vTPMs")
            fresh = [VTpm(k, vaik_for(k)) if vaik_for else VTpm(k) for k in ids]
            for v in fresh:
                self.vtpms[v.id] = v
            if self.scheme is Scheme.INCREMENTAL:
                for v in fresh:
                    self._join_incremental(v.id, fresh)
            return ids

    def create_vtpm(self, k: int | None = None, vaik: crypto.Signer | None = None) -> VTpm:
        with self.lock:
            if k is None:
                k = max(self.vtpms, default=0) + 1
            if k in self.vtpms:
                raise ValueError(f"vTPM {k} already exists")
            if self.scheme is Scheme.TREE and k > 1 << self.height:
                raise CapacityExhausted(f"tree of height {self.height} holds {1 << self.height} vTPMs")
            v = VTpm(k, vaik) if vaik is not None else VTpm(k)
            self.vtpms[k] = v
            if self.scheme is Scheme.INCREMENTAL:
                self._join_incremental(k, [v])
            return v

    def _join_incremental(self, k: int, batch: list[VTpm]):
        for i in self.pcrs:
            if i not in self.accs:
                setup = {v.id: v.vpcrs[i] for v in batch}
                initial = inc_setup(setup, i, tpm=self.device)
                self.accs[i] = IncAccumulator(i, initial, setup_vpcrs=setup)
                self._latest[i] = dict(setup)
            elif k not in self._latest[i]:
                # late joiner: logged as an update from the reset value
                inc_update(self.accs[i], self.device, k, ZERO_DIGEST, ZERO_DIGEST)
                self._latest[i][k] = ZERO_DIGEST

    def measure(self, k: int, i: int, measurement: bytes, description: bytes = b"") -> tuple[bytes, bytes]:
        """Extend vPCR ``i`` of vTPM ``k`` and bind the result.

        Raises :class:`TamperDetected` (vTPM rolled back) when the binding
        layer rejects the update.
        """
        with self.lock:
            v = self.vtpm(k)
            old, new = vtpm_extend(v, i, measurement, description)
            if i not in self.pcrs:
                return old, new
            try:
                if self.scheme is Scheme.TREE:
                    bind_update(self.trees[i], self.device, k - 1, new, vpcr_old=old)
                else:
                    if self._latest[i].get(k) != old:
                        raise TamperDetected(f"vPCR {i} of vTPM {k} does not continue its logged history")
                    inc_update(self.accs[i], self.device, k, old, new)
                    self._latest[i][k] = new
            except (Tampered, TamperDetected) as e:
                v.sml.pop()
                v.vpcrs[i] = old
                if isinstance(e, TamperDetected):
                    raise
                raise TamperDetected(str(e)) from e
            return old, new

    def tamper(self, k: int, i: int, forged: bytes) -> None:
        vtpm_tamper(self.vtpm(k), i, forged)

    def binding(self, i: int):
        if i not in self.pcrs:
            raise KeyError(f"PCR {i} is not bound")
        if self.scheme is Scheme.TREE:
            return self.trees[i]
        if i not in self.accs:
            raise KeyError(f"PCR {i} has no vTPMs yet")
        return self.accs[i]

    def attest(self, k: int, i: int, nonce: bytes) -> QuoteBundle:
        with self.lock:
            return attest(nonce, self.vtpm(k), self.device, self.binding(i), self.scheme, i)

    def trusted_keys(self) -> dict:
        keys = {self.device.aik.key_id: self.device.aik.verifier()}
        for v in self.vtpms.values():
            keys[v.vaik.key_id] = v.vaik.verifier()
        return keys

    # persistence ---------------------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "version": STATE_VERSION,
            "scheme": self.scheme.name.lower(),
            "pcrs": list(self.pcrs),
            "height": self.height,
            "modulus": hex(self.device.modulus.m),
            "hw_pcrs": {},
            "vtpms": {},
            "trees": {},
            "incremental": {},
        }
        for i in self.pcrs:
            mode = self.device.modes[i]
            if mode is PcrMode.TREE:
                d["hw_pcrs"][str(i)] = self.device.tree_pcrs[i].hex()
            elif mode is PcrMode.INCREMENTAL:
                d["hw_pcrs"][str(i)] = hex(self.device.inc_pcrs[i])
        for k, v in sorted(self.vtpms.items()):
            d["vtpms"][str(k)] = {"vpcrs": [p.hex() for p in v.vpcrs], "sml": encode_sml(v.sml).hex()}
        for i, t in self.trees.items():
            d["trees"][str(i)] = t.to_bytes().hex()
        for i, acc in self.accs.items():
            d["incremental"][str(i)] = {
                "setup": encode_setup(acc.setup_vpcrs).hex(),
                "sml": acc.sml_bytes().hex(),
            }
        return d

    @classmethod
    def from_dict(cls, d: dict, aik: crypto.Signer, vaiks: dict[int, crypto.Signer]) -> "Host":
        if d.get("version") != STATE_VERSION:
            raise ValueError("unsupported state version")
        scheme = Scheme[d["scheme"].upper()]
        h = cls.__new__(cls)
        h.scheme = scheme
        h.pcrs = tuple(d["pcrs"])
        h.height = d["height"]
        h.device = HwTpm(aik, Modulus(int(d["modulus"], 16)))
        h.vtpms, h.trees, h.accs, h._latest = {}, {}, {}, {}
        h.lock = threading.RLock()
        for si, val in d["hw_pcrs"].items():
            i = int(si)
            if scheme is Scheme.TREE:
                h.device.bind_index(i, PcrMode.TREE, bytes.fromhex(val))
            else:
                h.device.bind_index(i, PcrMode.INCREMENTAL, int(val, 16))
        for sk, vd in d["vtpms"].items():
            k = int(sk)
            h.vtpms[k] = VTpm(
                k,
                vaiks[k],
                [bytes.fromhex(p) for p in vd["vpcrs"]],
                decode_sml(bytes.fromhex(vd["sml"])),
            )
        for si, raw in d["trees"].items():
            h.trees[int(si)] = HashTreeStore.from_bytes(bytes.fromhex(raw))
        for si, inc in d["incremental"].items():
            i = int(si)
            setup = decode_setup(bytes.fromhex(inc["setup"]))
            _, initial, log = decode_inc_sml(bytes.fromhex(inc["sml"]))
            h.accs[i] = IncAccumulator(i, initial, log, setup)
            h._latest[i] = replay_vpcrs(setup, log)
        return h


def atomic_write(path: Path, data: bytes, mode: int = 0o644) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.chmod(tmp, mode)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class StateDir:
    """On-disk layout: ``state.json``, ``trusted.json`` and ``keys/*.seed``."""

    def __init__(self, root):
        self.root = Path(root)
        self.keys = self.root / "keys"
        self.state_file = self.root / "state.json"
        self.trusted_file = self.root / "trusted.json"
        self.lock_file = self.root / "lock"

    def exists(self) -> bool:
        return self.state_file.exists()

    def _key(self, name: str) -> crypto.Ed25519Signer:
        path = self.keys / f"{name}.seed"
        if path.exists():
            return crypto.Ed25519Signer(path.read_bytes())
        signer = crypto.Ed25519Signer()
        self.keys.mkdir(parents=True, exist_ok=True)
        atomic_write(path, signer.seed(), 0o600)
        return signer

    def aik(self) -> crypto.Ed25519Signer:
        return self._key("aik")

    def vaik(self, k: int) -> crypto.Ed25519Signer:
        return self._key(f"vtpm-{k}")

    def load(self) -> Host:
        d = json.loads(self.state_file.read_text())
        vaiks = {int(k): self.vaik(int(k)) for k in d["vtpms"]}
        return Host.from_dict(d, self.aik(), vaiks)

    def save(self, host: Host) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        trusted = {
            kid: ver.public_bytes.hex()
            for kid, ver in host.trusted_keys().items()
            if isinstance(ver, crypto.Ed25519Verifier)
        }
        atomic_write(self.trusted_file, json.dumps(trusted, indent=1, sort_keys=True).encode())
        atomic_write(self.state_file, json.dumps(host.to_dict(), indent=1).encode())


def load_trusted(path) -> dict:
    raw = json.loads(Path(path).read_text())
    out = {}
    for kid, pub in raw.items():
        ver = crypto.Ed25519Verifier(bytes.fromhex(pub))
        if ver.key_id != kid:
            raise ValueError(f"trusted key {kid} does not match its public key")
        out[kid] = ver
    return out
