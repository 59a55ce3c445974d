import numpy as np
import pytest

from tailtp.dataio import SynthConfig, assemble, preprocess, synth_generate

TINY_SYNTH = SynthConfig(users=60, items=40, clusters=4, max_len=40, seed=3)


@pytest.fixture(scope="session")
def tiny_bundle():
    seqs, vocab = preprocess(synth_generate(TINY_SYNTH))
    return assemble(seqs, vocab, window=4, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed after the run even when output is captured
CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
