import numpy as np
import pytest

from dialograph.corpus import Dialogue, Utterance

# criterion -> (passed, detail); filled by the acceptance module
ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split()[0])):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def make_dialogue(did, speakers, feats, label=None, dialogue_feature=None):
    feats = np.asarray(feats, dtype=np.float32)
    utts = tuple(Utterance(i + 1, s, feats[i]) for i, s in enumerate(speakers))
    g = feats.mean(axis=0) if dialogue_feature is None else np.asarray(dialogue_feature, dtype=np.float32)
    return Dialogue(did, utts, g, label)


def random_dialogue(rng, did="d", d_h=4, m=None, n_speakers=2, label=None):
    m = int(rng.integers(1, 8)) if m is None else m
    speakers = [f"S{int(rng.integers(n_speakers))}" for _ in range(m)]
    return make_dialogue(did, speakers, rng.normal(size=(m, d_h)), label)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
