import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from voltplan import bundled_case
from voltplan.grid_model import load_case
from voltplan.timeseries import SynthConfig, baseline_snapshot, synthesize_year


@pytest.fixture(scope="session")
def net2():
    return load_case(bundled_case("case_2bus"))


@pytest.fixture(scope="session")
def net5():
    return load_case(bundled_case("case_5bus"))


@pytest.fixture(scope="session")
def net14():
    return load_case(bundled_case("case_14bus"))


@pytest.fixture(scope="session")
def snap14(net14):
    return baseline_snapshot(net14)


@pytest.fixture(scope="session")
def year14(net14):
    """The pipeline's reference synthetic year (hourly, 25% PV)."""
    return synthesize_year(net14, SynthConfig(
        seed=42, pv_penetration=0.25, flat_shape_buses=("12", "13", "14")))


@pytest.fixture(scope="session")
def week14(net14):
    """A small 7-day set for cheap end-to-end style tests."""
    return synthesize_year(net14, SynthConfig(
        seed=3, pv_penetration=0.2, days=7, start="2030-06-01",
        flat_shape_buses=("12", "13", "14")))
