"""Shared fixtures: small graphs, the bundled emission tables and CSV writers."""

from __future__ import annotations

import csv

import pytest

from decarbsim.emissions import load_emission_config
from decarbsim.network import Link, NetworkGraph, Node, grid_network


def write_network(directory, nodes, links):
    """Write nodes.csv / links.csv; ``links`` rows are (id, from, to, length, lanes, ffs)."""
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "nodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "kind"])
        for nid in nodes:
            w.writerow([nid, "ordinary"])
    with open(directory / "links.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "from", "to", "length_m", "lanes", "ffs_mps"])
        w.writerows(links)
    return directory


RING_LINKS = [(0, 1, 2, 300.0, 1, 12.0), (1, 2, 3, 300.0, 1, 12.0), (2, 3, 4, 300.0, 1, 12.0),
              (3, 4, 1, 300.0, 1, 12.0)]


@pytest.fixture
def ring_dir(tmp_path):
    return write_network(tmp_path / "ring", [1, 2, 3, 4], RING_LINKS)


@pytest.fixture(scope="session")
def emission_model():
    return load_emission_config()


@pytest.fixture(scope="session")
def grid4():
    return grid_network(4)


def line_graph(lengths, ffs=15.0, lanes=1):
    """Nodes 0..n joined by one-way links 0..n-1 plus return links so the graph is strongly connected."""
    n = len(lengths)
    nodes = [Node(i) for i in range(n + 1)]
    links = [Link(i, i, i + 1, float(L), lanes, ffs) for i, L in enumerate(lengths)]
    links += [Link(n + i, i + 1, i, float(L), lanes, ffs) for i, L in enumerate(lengths)]
    return NetworkGraph(nodes, links)


def two_route_graph(short=(400.0, 400.0), long=(600.0, 600.0), ffs=12.0):
    """Origin 0, destination 3; route A through node 1 (links 0, 1), route B through node 2 (links 2, 3)."""
    nodes = [Node(i) for i in range(4)]
    links = [
        Link(0, 0, 1, short[0], 1, ffs), Link(1, 1, 3, short[1], 1, ffs),
        Link(2, 0, 2, long[0], 1, ffs), Link(3, 2, 3, long[1], 1, ffs),
        Link(4, 3, 0, 500.0, 1, ffs), Link(5, 1, 0, 400.0, 1, ffs), Link(6, 2, 0, 600.0, 1, ffs),
    ]
    return NetworkGraph(nodes, links)


# -- acceptance report ---------------------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints one PASS/FAIL line, then returns ``ok``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {n:>2} {'PASS' if ok else 'FAIL'}: {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
