import csv
import io
import random

import pytest

from vpcrbind import perf
from vpcrbind.perf import DMA, IO_WRITE, PARALLEL, SERIAL, CostModel, cmd_tx_cycles, cycles_to_time, hash_tx_cycles, tree_update_cycles


def test_hash_transmission():
    assert hash_tx_cycles(IO_WRITE) == 260
    assert hash_tx_cycles(DMA) == 160
    assert cycles_to_time(260, 33) == pytest.approx(7.88, abs=0.01)


def test_command_transmission():
    assert cmd_tx_cycles(56) == 448 == 112 + 14 * 24
    assert cmd_tx_cycles(34) == 284 == 68 + 9 * 24
    assert cmd_tx_cycles(4) == 32
    with pytest.raises(ValueError):
        cmd_tx_cycles(0)


@pytest.mark.parametrize(
    "h,mode,cycles",
    [(2, PARALLEL, 1366), (10, PARALLEL, 5038), (20, PARALLEL, 9628), (2, SERIAL, 1716), (10, SERIAL, 6788), (20, SERIAL, 13128)],
)
def test_tree_update_cycles(h, mode, cycles):
    assert tree_update_cycles(h, mode) == cycles


def test_cycles_to_time():
    assert cycles_to_time(1366, 33) == pytest.approx(41.4, abs=0.05)
    assert cycles_to_time(5038, 128.7) == pytest.approx(39.2, abs=0.1)
    assert cycles_to_time(0, 33) == 0
    with pytest.raises(ValueError):
        cycles_to_time(1, 0)


def test_model_validation():
    with pytest.raises(ValueError):
        CostModel(sha1_cycles=0)
    with pytest.raises(ValueError):
        tree_update_cycles(0)


def test_bus_share_parallel_h10():
    row = next(r for r in perf.table3_rows() if r["design"] == PARALLEL and r["h"] == 10)
    assert row["command_cycles"] == 448 + 2840
    assert row["bus_share"] == pytest.approx(0.653, abs=0.001)


def test_text_report():
    out = perf.emit_tables()
    assert any(line.split()[:2] == ["parallel", "10"] and "5038" in line for line in out.splitlines())
    assert "80%" in out


def test_csv_report():
    out = perf.emit_tables("csv")
    section = out.split("# table3\n")[1]
    rows = list(csv.DictReader(io.StringIO(section)))
    assert [int(r["total_cycles"]) for r in rows] == [1366, 5038, 9628, 1716, 6788, 13128]


def test_scaling_counters():
    rows = perf.scaling_rows(ns=(2, 4, 8, 16), us=(1, 4, 8))
    for r in rows:
        assert (r["inc_update_hashes"], r["inc_update_mults"], r["inc_update_divs"]) == (2, 1, 1)
        l = max(1, (r["n"] - 1).bit_length())
        assert r["tree_update_hashes"] == 2 * l
        assert r["tree_verify_hashes"] == (1 << l) - 1
        assert r["inc_verify_ops"] == 4 * r["n"] * r["u"]
    xs = [r["n"] * r["u"] for r in rows]
    assert perf.linear_fit_r2(xs, [r["inc_verify_ops"] for r in rows]) > 0.999


def test_counters_arith():
    a = perf.OpCounters(hashes=5, mults=2)
    b = a.snapshot()
    a.hashes += 3
    assert (a - b).hashes == 3
    a.reset()
    assert a == perf.OpCounters()
