import os
import random
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from vpcrbind.crypto import HmacKey  # noqa: E402
from vpcrbind.hwtpm import HwTpm  # noqa: E402


@pytest.fixture
def rng():
    return random.Random(0x5EED)


@pytest.fixture
def tpm():
    return HwTpm(aik=HmacKey(b"device aik"))


def rand_digest(rng):
    return rng.randbytes(20)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
