import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scg import knowledge as kn
from scg import traffic as tr
from scg.tree import SceneNode, make_chain, validate

LAY = tr.intersection_layout()


def _scene(lanes_vehicles, layout=LAY):
    """``lanes_vehicles[road][lane]`` = list of vehicle property rows."""
    roads = []
    for road, lanes in zip(layout.roads, lanes_vehicles):
        lnodes = []
        for lane, rows in zip(road.lanes, lanes):
            v = [SceneNode(tr.VEHICLE, r) for r in rows]
            lnodes.append(SceneNode(tr.LANE, [lane.offset, lane.direction], [make_chain(v, tr.SCHEMA, 1.0)]))
        roads.append(SceneNode(tr.ROAD, list(road.values()), [make_chain(lnodes, tr.SCHEMA, 1.0)]))
    return SceneNode(tr.ROOT, [], [make_chain(roads, tr.SCHEMA, 0.0)])


def test_empty_dataset():
    assert tr.gen_traffic_dataset(LAY, 0, 0) == []


def test_mean_vehicle_count():
    trees = tr.gen_traffic_dataset(LAY, 500, 0)
    # independent count by node type name
    def count(n):
        return (tr.SCHEMA.types[n.type].name == "Vehicle") + sum(count(c) for c in n.children)
    mean = np.mean([count(t) for t in trees])
    assert 2.0 <= mean <= 8.0


def test_generated_vehicles_inside_roads():
    trees, truth = tr.gen_traffic_dataset(LAY, 60, 3, return_truth=True)
    for t, insts in zip(trees, truth):
        validate(t, tr.SCHEMA)
        for inst in insts:
            road = LAY.roads[inst.road]
            rel = inst.footprint() - np.asarray(road.origin)
            u, v = rel @ road.axis, rel @ road.normal
            assert u.min() >= -1e-9 and u.max() <= road.length + 1e-9
            assert np.abs(v).max() <= road.width / 2 + 1e-9


def test_instantiate_matches_generator_poses():
    trees, truth = tr.gen_traffic_dataset(LAY, 100, 7, return_truth=True)
    for t, insts in zip(trees, truth):
        got = tr.instantiate(t, LAY)
        assert len(got) == len(insts)
        for a, b in zip(got, insts):
            assert not a.clamped
            assert abs(a.x - b.x) < 1e-9 and abs(a.y - b.y) < 1e-9 and abs(a.theta - b.theta) < 1e-9
            assert (a.length, a.width, a.height) == (b.length, b.width, b.height)


def test_zero_offsets_follow_lane():
    rows = [[0.0, 0.0, 0.0, 4.5, 1.8, 1.5], [30.0, 0.0, 0.0, 4.5, 1.8, 1.5]]
    tree = _scene([[rows, []], [[], rows]])
    insts = tr.instantiate(tree, LAY)
    for inst in insts:
        road = LAY.roads[inst.road]
        lane = road.lanes[inst.lane]
        origin, u = tr.lane_frame(road.values(), (lane.offset, lane.direction))
        assert inst.theta == lane.direction
    first = insts[0]
    origin, _ = tr.lane_frame(LAY.roads[0].values(), (LAY.roads[0].lanes[0].offset, 0.0))
    assert (first.x, first.y) == pytest.approx(tuple(origin), abs=1e-12)


def test_on_layout_scene_has_zero_loss_targets():
    rows = [[10.0, 0.0, 0.0, 4.5, 1.8, 1.5]]
    tree = _scene([[rows, rows], [rows, []]])
    ks = tr.rules_traffic(LAY, which=(1, 2))
    for t in kn.apply_knowledge(tree, ks, tr.SCHEMA):
        assert t.type is None
        assert np.allclose(t.values[t.mask], tree.get(t.path).props[t.mask], atol=1e-12)


def test_off_layout_road_is_pinned():
    tree = _scene([[[], []], [[], []]])
    tree.children[0].children[0].props[0] += 3.0
    targets = kn.apply_knowledge(tree, tr.rules_traffic(LAY, which=(1,)), tr.SCHEMA)
    road = next(t for t in targets if t.node_type == tr.ROAD and t.mask.all())
    assert np.allclose(road.values, LAY.roads[0].values())


def test_surplus_road_retyped():
    three = tr.RoadLayout(LAY.roads + [tr.straight_layout().roads[0]])
    tree = _scene([[[], []]] * 3, three)
    targets = kn.apply_knowledge(tree, tr.rules_traffic(LAY, which=(1,)), tr.SCHEMA)
    assert any(t.type == tr.SCHEMA.stop for t in targets)


def test_heading_twenty_degrees_targets_zero():
    tree = _scene([[[[10.0, 0.0, math.radians(20), 4.5, 1.8, 1.5]], []], [[], []]])
    targets = kn.apply_knowledge(tree, tr.rules_traffic(LAY, which=(2,)), tr.SCHEMA)
    assert len(targets) == 1 and targets.targets[0].values[2] == 0.0


def test_heading_tolerance_clips_to_band():
    rows = [[10.0, 0.0, math.radians(20), 4.5, 1.8, 1.5], [20.0, 0.0, math.radians(-3), 4.5, 1.8, 1.5]]
    tree = _scene([[rows, []], [[], []]])
    targets = kn.apply_knowledge(tree, kn.KnowledgeSet([tr.heading_rule(tolerance_deg=5.0)]), tr.SCHEMA)
    got = sorted(t.values[2] for t in targets)
    assert got == pytest.approx([math.radians(-3), math.radians(5)], abs=1e-15)


def test_gap_push_symmetric():
    # two 4.5 m vehicles whose bumpers are 1 m apart
    rows = [[20.0, 0.0, 0.0, 4.5, 1.8, 1.5], [25.5, 0.0, 0.0, 4.5, 1.8, 1.5]]
    tree = _scene([[rows, []], [[], []]])
    targets = kn.apply_knowledge(tree, tr.rules_traffic(LAY, gap_min=4.0, which=(3,)), tr.SCHEMA)
    s = sorted(t.values[0] for t in targets)
    assert len(s) == 2
    assert s[1] - s[0] - 4.5 == pytest.approx(4.0)
    assert np.mean(s) == pytest.approx(22.75)


def test_gather_pulls_far_vehicle_in():
    rows = [[5.0, 0.0, 0.0, 4.5, 1.8, 1.5], [40.0, 0.0, 0.0, 4.5, 1.8, 1.5], [75.0, 0.0, 0.0, 4.5, 1.8, 1.5]]
    tree = _scene([[rows, []], [[], []]])
    targets = kn.apply_knowledge(tree, tr.rules_traffic(LAY, which=(3,)), tr.SCHEMA)
    moved = tree.copy()
    for t in targets:
        moved.get(t.path).props[:] = t.values
    a = tr.audit(moved, LAY)
    assert a["max_distance"] <= tr.GATHER_RADIUS + 1e-6
    assert a["min_gap"] >= tr.GAP_MIN - 1e-9


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 80), min_size=2, max_size=6), st.floats(0.5, 8.0))
def test_separate_invariants(s, gap):
    lengths = np.linspace(3.8, 5.2, len(s))
    out = tr.separate(s, lengths, gap)
    order = np.argsort(np.asarray(s), kind="stable")
    ls = lengths[order]
    gaps = np.diff(out[order]) - 0.5 * (ls[:-1] + ls[1:])
    assert np.all(gaps >= gap - 1e-9)
    assert np.mean(out) == pytest.approx(np.mean(s), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_gather_targets_are_self_consistent(seed):
    """Applying the gather targets yields a scene that needs no further moves
    unless separation and the radius conflict."""
    tree, _ = tr.random_traffic_scene(LAY, np.random.default_rng(seed), lam=4.0)
    ks = tr.rules_traffic(LAY, which=(3,))
    moved = tree.copy()
    for t in kn.apply_knowledge(tree, ks, tr.SCHEMA):
        moved.get(t.path).props[:] = t.values
    a = tr.audit(moved, LAY)
    assert a["min_gap"] >= tr.GAP_MIN - 1e-6
    assert a["max_distance"] <= tr.GATHER_RADIUS + 0.1 or a["min_gap"] <= tr.GAP_MIN + 1e-6


def test_layout_file_round_trip(tmp_path):
    LAY.save(tmp_path / "lay.json")
    back = tr.RoadLayout.load(tmp_path / "lay.json")
    assert back.to_dict() == LAY.to_dict()
    with pytest.raises(ValueError):
        tr.RoadLayout([tr.Road((0, 0), 0.0, 10.0, 2.0, [tr.Lane(1.5, 0.0)])])


def test_rules_parameter_check():
    with pytest.raises(ValueError):
        tr.rules_traffic(LAY, gap_min=30.0, gather_radius=25.0)
