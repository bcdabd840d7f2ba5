import numpy as np
import pytest

from wsod.data import SynthConfig, gen_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_synth():
    cfg = SynthConfig(n_images=12, height=10, width=10, depth=6, num_classes=2, object_min=4,
                      object_max=7, n_random=4, n_jitter=2, n_distractors=1)
    return gen_synthetic(cfg, 5)




def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance as acc
    except ImportError:
        return
    if not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.RESULTS[name])
    for table in acc.TABLES:
        terminalreporter.write_line("")
        for line in table.splitlines():
            terminalreporter.write_line(line)
