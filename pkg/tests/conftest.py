import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adastep.denoiser import Denoiser, DenoiserArch, init_denoiser_params  # noqa: E402
from adastep.prompts import Universe  # noqa: E402


@pytest.fixture(scope="session")
def tiny_denoiser():
    """Untrained but deterministic predictor; enough to exercise plumbing."""
    arch = DenoiserArch(hidden=(16, 16), temb_dim=8, cond_dim=8)
    params = init_denoiser_params(arch, seed=0)
    params["out.w"] = params["out.w"] * 10.0
    return Denoiser(params, arch, universe=Universe())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from verdicts import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
