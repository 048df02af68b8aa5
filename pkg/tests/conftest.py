import numpy as np
import pytest

from procdur.synthgen import SynthSpec, generate, generate_traced


@pytest.fixture(scope="session")
def small_synth():
    """A handful of short synthetic procedures with every channel present."""
    spec = SynthSpec(n_procedures=12, overall_mean=90.0, d_img=8, seed=7)
    return generate(spec)


@pytest.fixture(scope="session")
def synth120():
    records, traces = generate_traced(SynthSpec(n_procedures=120, seed=3))
    return records, traces


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
