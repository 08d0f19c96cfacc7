import numpy as np
import pytest
from hypothesis import settings

from contour_rl.data import SynthParams, synth_sample

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def synth_samples():
    return [synth_sample(SynthParams(seed=s)) for s in range(6)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def ring_mask(h, w, r0, c0, r1, c1):
    """One-pixel-thick rectangle outline."""
    m = np.zeros((h, w), dtype=np.uint8)
    m[r0, c0:c1 + 1] = 1
    m[r1, c0:c1 + 1] = 1
    m[r0:r1 + 1, c0] = 1
    m[r0:r1 + 1, c1] = 1
    return m


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """``acceptance(n, ok, detail)`` records and prints one criterion verdict."""
    store = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        store[n] = line
        print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPTANCE, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for n in sorted(store):
            terminalreporter.write_line(store[n])
