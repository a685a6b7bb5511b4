import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from avse import data
from avse.dsp import Waveform

settings.register_profile(
    "avse", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("avse")


@pytest.fixture(scope="session")
def utterance() -> Waveform:
    return data.synth_utterance(data.SynthVoiceSpec.for_speaker(7, 3, duration=1.2))


@pytest.fixture(scope="session")
def other_utterance() -> Waveform:
    return data.synth_utterance(data.SynthVoiceSpec.for_speaker(11, 5, duration=1.2))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A few mixtures per split; enough for plumbing tests."""
    out = tmp_path_factory.mktemp("small_corpus")
    cfg = data.CorpusConfig(seed=3, clean_per_split={"train": 4, "val": 2, "test": 2},
                            speakers_per_split={"train": 2, "val": 2, "test": 2})
    return data.make_dataset(cfg, out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def accept(request):
    """Record one acceptance verdict; returned value is the pass flag."""
    def record(name: str, passed: bool, detail: str = "") -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        request.config.acceptance_lines.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)
