"""LPC-bus / SHA-1 cycle cost model and operation counters.

The default ``CostModel`` regenerates the hash-transmission and tree-update
cycle tables exactly. Absolute FPGA timings for the incremental scheme are
not modelled; only operation counts are reported for it.
"""

import csv
import io
import math
import random
from dataclasses import dataclass, fields

IO_WRITE = "iowrite"
DMA = "dma"
PARALLEL = "parallel"
SERIAL = "serial"

UPDATE_LEAF_INIT_BYTES = 56
UPDATE_LEAF_BYTES = 34
HASH_BYTES = 20


@dataclass(frozen=True)
class CostModel:
    bus_cycles_per_byte: int = 2  # 4-bit LPC data path
    io_write_overhead: int = 11  # per byte of a hash, I/O write cycles
    dma_block_overhead: int = 24  # per 4-byte block
    block_bytes: int = 4
    sha1_cycles: int = 175
    freq_tpm: float = 33.0  # MHz
    freq_fpga: float = 128.7  # MHz

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")

    def hash_tx_cycles(self, mode: str = DMA) -> int:
        data = self.bus_cycles_per_byte * HASH_BYTES
        if mode == IO_WRITE:
            return data + HASH_BYTES * self.io_write_overhead
        if mode == DMA:
            blocks = math.ceil(HASH_BYTES / self.block_bytes)
            return data + blocks * self.dma_block_overhead
        raise ValueError(f"unknown transfer mode {mode!r}")

    def cmd_tx_cycles(self, nbytes: int) -> int:
        if nbytes <= 0:
            raise ValueError("block size must be positive")
        blocks = math.ceil(nbytes / self.block_bytes)
        return self.bus_cycles_per_byte * nbytes + blocks * self.dma_block_overhead

    def tree_sha_cycles(self, h: int, mode: str = PARALLEL) -> int:
        if mode == PARALLEL:
            return h * self.sha1_cycles
        if mode == SERIAL:
            return 2 * h * self.sha1_cycles
        raise ValueError(f"unknown hashing mode {mode!r}")

    def tree_cmd_cycles(self, h: int) -> int:
        return self.cmd_tx_cycles(UPDATE_LEAF_INIT_BYTES) + h * self.cmd_tx_cycles(
            UPDATE_LEAF_BYTES
        )

    def tree_update_cycles(self, h: int, mode: str = PARALLEL) -> int:
        if h < 1:
            raise ValueError("tree height must be >= 1")
        return self.tree_sha_cycles(h, mode) + self.tree_cmd_cycles(h)


DEFAULT_MODEL = CostModel()


def hash_tx_cycles(mode: str = DMA, model: CostModel = DEFAULT_MODEL) -> int:
    return model.hash_tx_cycles(mode)


def cmd_tx_cycles(nbytes: int, model: CostModel = DEFAULT_MODEL) -> int:
    return model.cmd_tx_cycles(nbytes)


def tree_update_cycles(h: int, mode: str = PARALLEL, model: CostModel = DEFAULT_MODEL) -> int:
    return model.tree_update_cycles(h, mode)


def cycles_to_time(cycles: int, mhz: float) -> float:
    """Microseconds taken by ``cycles`` at ``mhz``."""
    if mhz <= 0:
        raise ValueError("frequency must be positive")
    return cycles / mhz


@dataclass
class OpCounters:
    hashes: int = 0
    mults: int = 0
    divs: int = 0
    commands: int = 0
    command_bytes: int = 0

    def reset(self):
        self.hashes = self.mults = self.divs = 0
        self.commands = self.command_bytes = 0

    def snapshot(self) -> "OpCounters":
        return OpCounters(**vars(self))

    def __sub__(self, other: "OpCounters") -> "OpCounters":
        return OpCounters(**{k: v - getattr(other, k) for k, v in vars(self).items()})


# Table rows ---------------------------------------------------------------

TABLE3_HEIGHTS = (2, 10, 20)
PUBLISHED_LPC_SHARE = 0.80


def table1_rows(model: CostModel = DEFAULT_MODEL) -> list[dict]:
    rows = []
    for mode, label in ((IO_WRITE, "I/O Write"), (DMA, "DMA Write")):
        data = model.bus_cycles_per_byte * HASH_BYTES
        total = model.hash_tx_cycles(mode)
        rows.append(
            {
                "mode": label,
                "hash_cycles": data,
                "overhead_cycles": total - data,
                "total_cycles": total,
                "time_us_tpm": round(cycles_to_time(total, model.freq_tpm), 2),
            }
        )
    return rows


def command_rows(model: CostModel = DEFAULT_MODEL) -> list[dict]:
    rows = []
    for name, size in (("TPM_Update_Leaf_Init", UPDATE_LEAF_INIT_BYTES), ("TPM_Update_Leaf", UPDATE_LEAF_BYTES)):
        c = model.cmd_tx_cycles(size)
        rows.append(
            {
                "command": name,
                "bytes": size,
                "cycles": c,
                "time_us_tpm": round(cycles_to_time(c, model.freq_tpm), 2),
            }
        )
    return rows


def table3_rows(model: CostModel = DEFAULT_MODEL, heights=TABLE3_HEIGHTS) -> list[dict]:
    rows = []
    for mode in (PARALLEL, SERIAL):
        for h in heights:
            sha = model.tree_sha_cycles(h, mode)
            cmd = model.tree_cmd_cycles(h)
            total = sha + cmd
            rows.append(
                {
                    "design": mode,
                    "h": h,
                    "sha1_cycles": sha,
                    "command_cycles": cmd,
                    "total_cycles": total,
                    "time_us_tpm": round(cycles_to_time(total, model.freq_tpm), 1),
                    "time_us_fpga": round(cycles_to_time(total, model.freq_fpga), 1),
                    "bus_share": round(cmd / total, 4),
                }
            )
    return rows


# Scaling sweeps driven by live operation counters ---------------------------


def _rand_digest(rng: random.Random) -> bytes:
    return rng.randbytes(HASH_BYTES)


def tree_update_counts(n: int, rng: random.Random) -> OpCounters:
    """Device counters for one leaf update on a tree sized for ``n`` vTPMs."""
    from .hwtpm import HwTpm, PcrMode
    from .treebind import bind_update, new_tree

    height = max(1, math.ceil(math.log2(n)))
    tree = new_tree(height, pcr_index=0)
    tpm = HwTpm()
    tpm.bind_index(0, PcrMode.TREE, tree.root)
    before = tpm.counters.snapshot()
    bind_update(tree, tpm, rng.randrange(n), _rand_digest(rng))
    return tpm.counters - before


def incremental_update_counts(n: int, u: int, rng: random.Random) -> OpCounters:
    """Device counters for the last of ``n*u`` incremental updates."""
    from .hwtpm import HwTpm, PcrMode
    from .incbind import IncAccumulator, inc_setup, inc_update

    vpcrs = {k: _rand_digest(rng) for k in range(1, n + 1)}
    tpm = HwTpm()
    initial = inc_setup(vpcrs, 0, tpm=tpm)
    acc = IncAccumulator(0, initial)
    last = OpCounters()
    for _ in range(u):
        for k in vpcrs:
            new = _rand_digest(rng)
            before = tpm.counters.snapshot()
            inc_update(acc, tpm, k, vpcrs[k], new)
            last = tpm.counters - before
            vpcrs[k] = new
    return last


def incremental_verify_counts(n: int, u: int, rng: random.Random) -> OpCounters:
    """Challenger-side counters for replaying ``n*u`` incremental updates."""
    from .hwtpm import HwTpm, PcrMode
    from .incbind import IncAccumulator, inc_replay, inc_setup, inc_update

    vpcrs = {k: _rand_digest(rng) for k in range(1, n + 1)}
    tpm = HwTpm()
    initial = inc_setup(vpcrs, 0, tpm=tpm)
    acc = IncAccumulator(0, initial)
    for _ in range(u):
        for k in vpcrs:
            new = _rand_digest(rng)
            inc_update(acc, tpm, k, vpcrs[k], new)
            vpcrs[k] = new
    counters = OpCounters()
    inc_replay(initial, acc.log, tpm.modulus, counters=counters)
    return counters


def tree_verify_counts(n: int) -> OpCounters:
    from .treebind import new_tree, recompute_root

    height = max(1, math.ceil(math.log2(n)))
    tree = new_tree(height, pcr_index=0)
    counters = OpCounters()
    recompute_root(tree.height, tree.leaves, counters=counters)
    return counters


def scaling_rows(ns=(2, 4, 8, 16), us=range(1, 17), seed: int = 0) -> list[dict]:
    rng = random.Random(seed)
    rows = []
    for n in ns:
        t_upd = tree_update_counts(n, rng)
        t_ver = tree_verify_counts(n)
        for u in us:
            i_upd = incremental_update_counts(n, u, rng)
            i_ver = incremental_verify_counts(n, u, rng)
            rows.append(
                {
                    "n": n,
                    "u": u,
                    "tree_update_hashes": t_upd.hashes,
                    "tree_update_commands": t_upd.commands,
                    "tree_verify_hashes": t_ver.hashes,
                    "inc_update_hashes": i_upd.hashes,
                    "inc_update_mults": i_upd.mults,
                    "inc_update_divs": i_upd.divs,
                    "inc_verify_ops": i_ver.hashes + i_ver.mults + i_ver.divs,
                }
            )
    return rows


def linear_fit_r2(xs, ys) -> float:
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    syy = sum((y - my) ** 2 for y in ys)
    if syy == 0:
        return 1.0
    return (sxy * sxy) / (sxx * syy)


# Report formatting -------------------------------------------------------------


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def emit_tables(fmt: str = "text", model: CostModel = DEFAULT_MODEL) -> str:
    t1 = table1_rows(model)
    cmds = command_rows(model)
    t3 = table3_rows(model)
    if fmt == "csv":
        return "\n".join(["# table1", _csv(t1), "# commands", _csv(cmds), "# table3", _csv(t3)])
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")

    out = ["Hash value transmission (20 bytes)"]
    out.append(f"{'mode':<10} {'hash':>5} {'overhead':>9} {'total':>6} {'@%gMHz' % model.freq_tpm:>9}")
    for r in t1:
        out.append(
            f"{r['mode']:<10} {r['hash_cycles']:>5} {r['overhead_cycles']:>9} "
            f"{r['total_cycles']:>6} {r['time_us_tpm']:>7.2f}us"
        )
    out.append("")
    out.append("Command block transmission")
    for r in cmds:
        out.append(f"{r['command']:<22} {r['bytes']:>3} B {r['cycles']:>5} cycles {r['time_us_tpm']:>7.2f}us")
    out.append("")
    out.append("Hash tree update")
    out.append(
        f"{'design':<9} {'h':>3} {'sha1':>6} {'command':>8} {'total':>6} "
        f"{'@%gMHz' % model.freq_tpm:>10} {'@%gMHz' % model.freq_fpga:>11} {'bus':>6}"
    )
    for r in t3:
        out.append(
            f"{r['design']:<9} {r['h']:>3} {r['sha1_cycles']:>6} {r['command_cycles']:>8} "
            f"{r['total_cycles']:>6} {r['time_us_tpm']:>8.1f}us {r['time_us_fpga']:>9.1f}us "
            f"{100 * r['bus_share']:>5.1f}%"
        )
    shares = [r["bus_share"] for r in t3]
    out.append("")
    out.append(
        f"LPC command share of cycles: {100 * min(shares):.1f}% to {100 * max(shares):.1f}% "
        f"(published claim: about {PUBLISHED_LPC_SHARE:.0%}; the model does not reach it)"
    )
    out.append(
        "Incremental-hash timings are FPGA measurements and are not modelled; "
        "run `bench --mode scaling` for operation-count complexity."
    )
    return "\n".join(out) + "\n"


def emit_scaling(fmt: str = "text", ns=(2, 4, 8, 16), us=range(1, 17)) -> str:
    rows = scaling_rows(ns, us)
    if fmt == "csv":
        return _csv(rows)
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    out = [
        f"{'n':>3} {'u':>3} {'tree_upd_h':>10} {'tree_ver_h':>10} "
        f"{'inc_upd(h/m/d)':>14} {'inc_ver_ops':>11}"
    ]
    for r in rows:
        out.append(
            f"{r['n']:>3} {r['u']:>3} {r['tree_update_hashes']:>10} {r['tree_verify_hashes']:>10} "
            f"{'%d/%d/%d' % (r['inc_update_hashes'], r['inc_update_mults'], r['inc_update_divs']):>14} "
            f"{r['inc_verify_ops']:>11}"
        )
    xs = [r["n"] * r["u"] for r in rows]
    ys = [r["inc_verify_ops"] for r in rows]
    out.append("")
    out.append(f"incremental verify ops vs n*u: R^2 = {linear_fit_r2(xs, ys):.6f}")
    out.append("Absolute microsecond figures for the incremental scheme are not reproducible by this model.")
    return "\n".join(out) + "\n"
