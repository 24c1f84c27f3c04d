import numpy as np
import pytest

from adcds.core import DefectClass, ProcessStep
from adcds.synthgen import DefectSpec, PatternSpec, inject_defect, new_sample


def flat_spec(**kw) -> PatternSpec:
    """Two-valued pattern: no roughness, no noise."""
    base = dict(pitch=32, line_width=16, orientation="vertical",
                line_intensity=150, space_intensity=90,
                edge_roughness_sigma=0.0, noise_sigma=0.0, seed=1)
    base.update(kw)
    return PatternSpec(**base)


def sample_with(step, name, anchor=(3, 100), extent=10, size=256, spec=None,
                rng=None, **dkw):
    s = new_sample(spec or flat_spec(), size, size, step, rng=rng)
    return inject_defect(s, DefectSpec(DefectClass(step, name), anchor,
                                       extent, **dkw))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def adi():
    return ProcessStep.ADI


@pytest.fixture
def aei():
    return ProcessStep.AEI


# ---------------------------------------------------- acceptance summary

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict; printed in the terminal summary."""
    log = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        log[number] = (ok, detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(_ACCEPTANCE_KEY, None)
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        ok, detail = log[n]
        terminalreporter.write_line(
            f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
