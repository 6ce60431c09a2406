"""Network graph loading, travel times, interval aggregation and state series.

Groups: file loading and validation, travel time with the speed floor,
interval states from trajectories, padded state windows, round trip.
"""

from __future__ import annotations

import numpy as np
import pytest

from conftest import RING_LINKS, write_network
from decarbsim.network import (
    WINDOW,
    Link,
    LinkState,
    NetworkError,
    StateHistory,
    grid_network,
    interval_states,
    link_travel_time,
    load_network,
    record_interval_state,
    save_network,
)
from decarbsim.scenario import load_config


def test_ring_fixture_loads(ring_dir):
    g = load_network(ring_dir)
    assert (g.n_nodes, g.n_links) == (4, 4)
    assert g.strongly_connected


def test_zero_length_names_the_link(tmp_path):
    links = RING_LINKS[:3] + [(7, 4, 1, 0.0, 1, 12.0)]
    d = write_network(tmp_path / "bad", [1, 2, 3, 4], links)
    with pytest.raises(NetworkError, match="non-positive length, link 7"):
        load_network(d)


@pytest.mark.parametrize("links, nodes, msg", [
    (RING_LINKS + [(0, 1, 3, 100.0, 1, 10.0)], [1, 2, 3, 4], "duplicate link id 0"),
    (RING_LINKS + [(9, 1, 99, 100.0, 1, 10.0)], [1, 2, 3, 4], "dangling node reference 99, link 9"),
    (RING_LINKS, [1, 2, 3, 4, 5], "node 5 is not referenced"),
    (RING_LINKS + [(9, 2, 2, 100.0, 1, 10.0)], [1, 2, 3, 4], "self-loop, link 9"),
])
def test_load_errors(tmp_path, links, nodes, msg):
    d = write_network(tmp_path / "bad", nodes, links)
    with pytest.raises(NetworkError, match=msg):
        load_network(d)


def test_duplicate_node_id(tmp_path):
    d = write_network(tmp_path / "bad", [1, 2, 3, 4, 4], RING_LINKS)
    with pytest.raises(NetworkError, match="duplicate node id 4"):
        load_network(d)


def test_weakly_connected_graph_warns(tmp_path, caplog):
    d = write_network(tmp_path / "chain", [1, 2, 3], [(0, 1, 2, 100.0, 1, 10.0), (1, 2, 3, 100.0, 1, 10.0)])
    g = load_network(d)
    assert not g.strongly_connected
    assert "not strongly connected" in caplog.text


def test_bundled_grid_counts():
    g = load_network(load_config().network_dir())
    n = 10
    assert g.n_nodes == n * n
    assert g.n_links == 2 * 2 * n * (n - 1) == 360
    assert g.strongly_connected


def test_round_trip(tmp_path):
    g = grid_network(5, arterial_rows=(2,))
    save_network(g, tmp_path / "g")
    assert load_network(tmp_path / "g") == g


# -- travel time ---------------------------------------------------------------

LINK = Link(1, 0, 1, 500.0, 1, 12.0)


def test_travel_time_division():
    assert link_travel_time(LINK, 10.0) == (50.0, False)


def test_travel_time_clamped_at_floor():
    tt, clamped = link_travel_time(Link(2, 0, 1, 100.0, 1, 12.0), LinkState(2, 0, 0.0, 0.0, 0.0), v_floor=0.5)
    assert tt == pytest.approx(200.0)
    assert clamped


def test_free_flow_identity():
    g = grid_network(4)
    tt = [link_travel_time(l, l.free_flow_speed)[0] for l in g.links]
    np.testing.assert_allclose(tt, g.free_flow_times(), rtol=1e-12)


# -- interval aggregation ------------------------------------------------------------

class Rec:
    def __init__(self, t, link_id, speed):
        self.t, self.link_id, self.speed = t, link_id, speed


def _graph_600():
    return grid_network(2, length=600.0, ffs=20.0)


def test_single_vehicle_space_mean_speed():
    g = _graph_600()
    recs = [Rec(t, 0, 10.0) for t in range(60)]
    st = {s.link_id: s for s in record_interval_state(recs, 0, g)}
    assert st[0].space_mean_speed == pytest.approx(10.0)


def test_empty_link_convention():
    g = _graph_600()
    st = {s.link_id: s for s in record_interval_state([], 0, g)}
    assert (st[3].space_mean_speed, st[3].density, st[3].flow) == (20.0, 0.0, 0.0)


def test_two_vehicle_space_mean_is_distance_over_time():
    g = _graph_600()
    recs = [Rec(t, 0, 10.0) for t in range(60)] + [Rec(t, 0, 20.0) for t in range(60)]
    st = {s.link_id: s for s in record_interval_state(recs, 0, g)}
    assert st[0].space_mean_speed == pytest.approx(1800.0 / 120.0)


def test_records_outside_interval_ignored():
    g = _graph_600()
    recs = [Rec(t, 0, 5.0) for t in range(60, 120)]
    assert record_interval_state(recs, 0, g)[0].density == 0.0
    assert record_interval_state(recs, 1, g)[0].space_mean_speed == pytest.approx(5.0)


def test_flow_is_density_times_speed():
    g = grid_network(4)
    rng = np.random.default_rng(3)
    vs = rng.uniform(0, 120, g.n_links) * (rng.random(g.n_links) > 0.3)
    dist = vs * rng.uniform(0.5, 11.0, g.n_links)
    speed, density, flow = interval_states(g, vs, dist)
    np.testing.assert_allclose(flow, density * speed * 3.6, rtol=1e-9)
    assert np.all(speed <= g.ffs * 1.05)
    assert np.all(np.isfinite(flow)) and np.all(flow >= 0)


# -- state series --------------------------------------------------------------------

def _history(values, g=None):
    g = g or grid_network(2)
    h = StateHistory(g)
    for v in values:
        row = np.full(g.n_links, float(v))
        h.append(row, row, row, row, row)
    return h


def test_series_padding_single_value():
    h = _history([3.2])
    s = h.get_state_series(0, "ghg_er", 0)
    assert len(s) == WINDOW
    assert np.all(s == 3.2)  # 249 pad entries repeat the earliest value, then 3.2


def test_series_window_arithmetic():
    h = _history(range(301))
    s = h.get_state_series(1, "nox_er", 300)
    np.testing.assert_array_equal(s, np.arange(51, 301))


def test_series_empty_history_uses_free_flow():
    g = grid_network(2, ffs=13.0)
    s = StateHistory(g).get_state_series(2, "speed", 0)
    assert len(s) == WINDOW and np.all(s == 13.0)


@pytest.mark.parametrize("now", [0, 1, 100, 249, 250, 400])
def test_series_length_always_window(now):
    h = _history(range(now + 1))
    assert len(h.get_state_series(0, "speed", now)) == WINDOW


def test_unknown_link_lookup():
    with pytest.raises(KeyError):
        _history([1.0]).get_state_series(999, "speed", 0)
