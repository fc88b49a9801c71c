"""voltplan: reactive power planning for sub-transmission grids.

Pipeline: screen a year of snapshots for the worst voltage deviations,
solve a relaxed planning OPF per scenario to site and size capacitors and
inductors at minimum investment cost, fuse the per-scenario plans into one
final plan, and verify it by re-simulating the year.
"""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def bundled_case(name: str) -> Path:
    """Path to a bundled case file, e.g. bundled_case("case_14bus")."""
    if not name.endswith(".json"):
        name = name + ".json"
    return Path(str(resources.files("voltplan").joinpath("cases", name)))
