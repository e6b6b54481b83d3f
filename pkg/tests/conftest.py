import pytest

from llmhara import RunConfig
from llmhara.fixtures import build_fixtures, load_item


@pytest.fixture(scope="session")
def caem():
    return load_item("caem")


@pytest.fixture(scope="session")
def elk():
    return load_item("elk")


@pytest.fixture
def caem_script(caem):
    """Fresh scripted provider + expected outcome for a full 6 x 20 CAEM run."""
    return build_fixtures(caem, seed=7)


@pytest.fixture
def small_script(caem):
    return build_fixtures(caem, seed=3, geometries=3, events_per_pair=(1, 2))


@pytest.fixture
def small_config():
    return RunConfig(geometries_requested=3, ledger_fsync=False)


@pytest.fixture
def fast_config():
    return RunConfig(ledger_fsync=False)
