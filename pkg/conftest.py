import pytest

from skinfcn.parallel import get_num_threads, set_num_threads
from skinfcn.schemas.architecture import DESK, MICRO
from skinfcn.synth import synth_generate
from skinfcn.tensor import check_finite_enabled, set_check_finite


@pytest.fixture(autouse=True)
def strict_engine():
    """Every test runs single-threaded with the NaN/Inf check enabled."""
    previous_finite, previous_threads = check_finite_enabled(), get_num_threads()
    set_check_finite(True)
    set_num_threads(1)
    yield
    set_check_finite(previous_finite)
    set_num_threads(previous_threads)


@pytest.fixture
def micro_config():
    return MICRO


@pytest.fixture
def desk_config():
    return DESK


@pytest.fixture
def synth_dataset(tmp_path):
    """Six 64x64 synthetic samples with their manifest."""
    out_dir = tmp_path / "synth"
    manifest = synth_generate(count=6, size=64, seed=7, out_dir=out_dir)
    return out_dir, manifest
