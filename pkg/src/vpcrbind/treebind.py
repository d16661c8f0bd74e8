"""Host-side hash tree binding same-index vPCRs to one hardware PCR."""

import struct
from dataclasses import dataclass, field

from . import crypto
from .crypto import SHA1_SIZE, ZERO_DIGEST, check_digest160
from .hwtpm import HwTpm, Tampered, TpmError, check_index
from .perf import OpCounters

MAX_HEIGHT = 20
SNAPSHOT_VERSION = 1


class HeightOutOfRange(ValueError):
    pass


class LeafOutOfRange(IndexError):
    pass


class DeviceDesync(RuntimeError):
    """The device accepted an update but its root disagrees with ours."""


@dataclass
class HashTreeStore:
    height: int
    pcr_index: int
    # levels[0] are the leaves, levels[height] == [root]
    levels: list[list[bytes]] = field(repr=False)

    @property
    def leaves(self) -> list[bytes]:
        return self.levels[0]

    @property
    def capacity(self) -> int:
        return 1 << self.height

    @property
    def root(self) -> bytes:
        return self.levels[self.height][0]

    def node(self, level: int, index: int) -> bytes:
        return self.levels[level][index]

    def set_leaf(self, leaf: int, value: bytes) -> None:
        """Write a leaf and recompute its ancestors."""
        self._check_leaf(leaf)
        self.levels[0][leaf] = check_digest160(value, "leaf")
        idx = leaf
        for lvl in range(1, self.height + 1):
            idx >>= 1
            below = self.levels[lvl - 1]
            self.levels[lvl][idx] = crypto.sha1(below[2 * idx] + below[2 * idx + 1])

    def _check_leaf(self, leaf: int):
        if not 0 <= leaf < self.capacity:
            raise LeafOutOfRange(f"leaf {leaf} outside tree of {self.capacity} leaves")

    def to_bytes(self) -> bytes:
        return struct.pack(">BBB", SNAPSHOT_VERSION, self.height, self.pcr_index) + b"".join(self.leaves)

    @classmethod
    def from_bytes(cls, data: bytes) -> "HashTreeStore":
        if len(data) < 3:
            raise ValueError("tree snapshot too short")
        version, height, pcr_index = struct.unpack_from(">BBB", data)
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported tree snapshot version {version}")
        if not 1 <= height <= MAX_HEIGHT:
            raise HeightOutOfRange(height)
        check_index(pcr_index)
        body = data[3:]
        if len(body) != (1 << height) * SHA1_SIZE:
            raise ValueError("tree snapshot length does not match its height")
        leaves = [body[j : j + SHA1_SIZE] for j in range(0, len(body), SHA1_SIZE)]
        return cls(height, pcr_index, build_levels(height, leaves))


def build_levels(height: int, leaves: list[bytes], counters: OpCounters | None = None) -> list[list[bytes]]:
    levels = [list(leaves)]
    for _ in range(height):
        below = levels[-1]
        levels.append([crypto.sha1(below[j] + below[j + 1]) for j in range(0, len(below), 2)])
        if counters is not None:
            counters.hashes += len(below) // 2
    return levels


def recompute_root(height: int, leaves: list[bytes], counters: OpCounters | None = None) -> bytes:
    """Root of the full tree over ``leaves``, computed from scratch."""
    if len(leaves) != 1 << height:
        raise ValueError("leaf count must be 2**height")
    return build_levels(height, leaves, counters)[-1][0]


def new_tree(height: int, default_leaf: bytes = ZERO_DIGEST, pcr_index: int = 10) -> HashTreeStore:
    if not 1 <= height <= MAX_HEIGHT:
        raise HeightOutOfRange(f"tree height must be in [1, {MAX_HEIGHT}], got {height}")
    check_index(pcr_index)
    node = check_digest160(default_leaf, "default leaf")
    levels = []
    # every level of a uniform tree is a single repeated digest
    for lvl in range(height + 1):
        levels.append([node] * (1 << (height - lvl)))
        node = crypto.sha1(node + node)
    return HashTreeStore(height, pcr_index, levels)


def sibling_path(t: HashTreeStore, leaf: int) -> list[tuple[bytes, bool]]:
    """Siblings from the leaf level up, each with its is-left flag."""
    t._check_leaf(leaf)
    path = []
    idx = leaf
    for lvl in range(t.height):
        sib = idx ^ 1
        path.append((t.levels[lvl][sib], sib < idx))
        idx >>= 1
    return path


def fold_path(leaf_value: bytes, path: list[tuple[bytes, bool]]) -> bytes:
    node = leaf_value
    for sib, is_left in path:
        node = crypto.sha1(sib + node) if is_left else crypto.sha1(node + sib)
    return node


def root(t: HashTreeStore) -> bytes:
    return t.root


def bind_update(
    t: HashTreeStore,
    tpm: HwTpm,
    leaf: int,
    vpcr_new: bytes,
    vpcr_old: bytes | None = None,
) -> bytes:
    """Drive one leaf update through the device and mirror it locally.

    ``vpcr_old`` defaults to the stored leaf; the measurement driver passes
    the vTPM's own previous value instead, so a vPCR altered behind the
    binding layer is caught by the device.  Returns the new root.  On
    :class:`Tampered` the local tree is left unchanged.
    """
    path = sibling_path(t, leaf)
    old = t.leaves[leaf] if vpcr_old is None else check_digest160(vpcr_old, "vpcr_old")
    vpcr_new = check_digest160(vpcr_new, "vpcr_new")
    tpm.update_leaf_init(t.pcr_index, old, vpcr_new, t.height)
    result = None
    try:
        for sib, is_left in path:
            result = tpm.update_leaf(t.pcr_index, sib, is_left)
    except Tampered:
        raise
    except (TpmError, ValueError):
        tpm.update_abort(t.pcr_index)
        raise
    if result is None:
        tpm.update_abort(t.pcr_index)
        raise DeviceDesync("device session did not terminate after a full path")
    t.set_leaf(leaf, vpcr_new)
    if t.root != result:
        raise DeviceDesync("device root differs from the local recomputation")
    return result
