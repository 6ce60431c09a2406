"""Regenerate the bundled 10x10 grid fixture (nodes.csv, links.csv, od.csv)."""

import sys
from pathlib import Path

from decarbsim.demand import save_od, synthetic_od
from decarbsim.network import grid_network, save_network


def main(out: Path) -> None:
    g = grid_network(10)
    save_network(g, out)
    save_od(synthetic_od(g), out / "od.csv")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parents[1] / "src/decarbsim/data/grid10")
