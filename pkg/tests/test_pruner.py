from __future__ import annotations

import math
from decimal import Decimal, getcontext

import numpy as np
import pytest

from conftest import conv_chain, conv_node, make_graph, single_conv
from edgepress.accountant import count_params
from edgepress.executor import run_outputs
from edgepress.fixtures import gen_fixture, random_inputs
from edgepress.graph import Node, validate
from edgepress.pruner import (
    DependencyGroup, Exclusions, ImportanceScore, PruneError, PruningSchedule, Slot, apply_prune,
    build_dependency_groups, eligible_groups, mask_channels, plan_step, run_schedule, score_channels,
)


def conv_weights(o, i, k=3, seed=0):
    return np.random.default_rng(seed).standard_normal((o, i, k, k)).astype(np.float32)


def roles(group: DependencyGroup) -> set[tuple[str, str]]:
    return {(s.node, s.role) for s in group.slots}


def two_branch(kind: str, ca=8, cb=8, seed=0):
    """convA, convB on x, merged by Add or Concat, then convC."""
    c_in = (ca + cb) if kind == "concat" else ca
    consts = {"wa": conv_weights(ca, 2, 3, seed), "wb": conv_weights(cb, 2, 1, seed + 1),
              "wc": conv_weights(3, c_in, 1, seed + 2)}
    merge = Node("m", "Concat" if kind == "concat" else "Add", ["a:0", "b:0"], ["m:0"],
                 {"axis": 1} if kind == "concat" else {})
    nodes = [conv_node("A", "x", "wa", None, "a:0", padding=1), conv_node("B", "x", "wb", None, "b:0"), merge,
             conv_node("C", "m:0", "wc", None, "y")]
    return make_graph((1, 2, 5, 5), nodes, consts, ["y"])


def test_chain_forms_one_group():
    g = conv_chain()
    groups = build_dependency_groups(g)
    prunable = [grp for grp in groups if grp.prunable]
    assert len(prunable) == 1
    assert roles(prunable[0]) == {("a", "conv-out-channels"), ("a", "bias"), ("b", "conv-in-channels")}
    assert prunable[0].width == 4


def test_output_channels_are_fixed():
    g = conv_chain()
    fixed = [grp for grp in build_dependency_groups(g) if not grp.prunable]
    assert len(fixed) == 1 and fixed[0].hosts == ["b"]


def test_residual_add_couples_both_producers():
    g = two_branch("add")
    groups = [grp for grp in build_dependency_groups(g) if grp.prunable]
    assert len(groups) == 1
    r = roles(groups[0])
    assert {("A", "conv-out-channels"), ("B", "conv-out-channels"), ("C", "conv-in-channels")} <= r


def test_concat_groups_map_to_consumer_offsets():
    g = two_branch("concat")
    groups = [grp for grp in build_dependency_groups(g) if grp.prunable]
    assert len(groups) == 2
    by_host = {grp.hosts[0]: grp for grp in groups}
    c_in = lambda grp: [s for s in grp.slots if s.role == "conv-in-channels"][0].indices
    assert c_in(by_host["A"]) == [(i,) for i in range(8)]
    assert c_in(by_host["B"]) == [(i,) for i in range(8, 16)]


def test_zeroing_branch_channel_touches_only_its_concat_slot():
    g = two_branch("concat")
    x = random_inputs(g, 1, 3)[0]
    from edgepress.executor import run
    base = run(g, [x])["m:0"]
    g2 = g.copy()
    g2.constants["wb"][3] = 0.0
    moved = run(g2, [x])["m:0"]
    changed = [c for c in range(16) if not np.array_equal(base[0, c], moved[0, c])]
    assert changed == [11]


def test_score_is_l2_norm():
    w = np.stack([np.ones((1, 2, 2)), 2 * np.ones((1, 2, 2))]).astype(np.float32)
    g = single_conv(w)
    groups = build_dependency_groups(g)
    scores = score_channels(g, groups)
    assert [s.score for s in scores] == [2.0, 4.0]


def test_zero_channel_scores_zero_and_goes_first():
    g = conv_chain(c_mid=5)
    g.constants["wa"][2] = 0.0
    g.constants["ba"][2] = 0.0
    g.constants["wb"][:, 2] = 0.0
    groups = build_dependency_groups(g)
    scores = score_channels(g, groups)
    gid = eligible_groups(groups, PruningSchedule(0.5, 1))[0].id
    mine = [s for s in scores if s.group == gid]
    assert mine[2].score == 0.0
    plan = plan_step(groups, scores, PruningSchedule(0.2, 1), 0)
    assert plan == {gid: [2]}


def synthetic(width, scores, excluded=False):
    grp = DependencyGroup(0, [Slot("n", "conv-out-channels", [(i,) for i in range(width)])], width, True)
    sc = [ImportanceScore(0, i, s) for i, s in enumerate(scores)]
    excl = (lambda _g: True) if excluded else Exclusions()
    return grp, sc, excl


def test_ties_broken_by_lower_index():
    grp, sc, excl = synthetic(6, [1.0] * 6)
    plan = plan_step([grp], sc, PruningSchedule(0.5, 1, exclusions=excl), 0)
    assert plan == {0: [0, 1, 2]}


def test_per_step_from_high_precision():
    getcontext().prec = 40
    exact = 1 - Decimal("0.3") ** (Decimal(1) / Decimal(6))
    s = PruningSchedule(0.7, 6)
    assert abs(Decimal(s.per_step) - exact) < Decimal("1e-14")
    assert str(exact).startswith("0.181811")


def test_width_ten_loses_one_channel():
    grp, sc, excl = synthetic(10, list(range(10, 0, -1)))
    sched = PruningSchedule(0.7, 6, exclusions=excl, target="channels")
    assert math.floor(sched.per_step * 10) == 1
    assert plan_step([grp], sc, sched, 0) == {0: [9]}


def test_one_shot_halving():
    grp, sc, excl = synthetic(8, [float(v) for v in range(8)])
    assert plan_step([grp], sc, PruningSchedule(0.5, 1, exclusions=excl), 0) == {0: [0, 1, 2, 3]}


def test_excluded_group_selects_nothing():
    grp, sc, excl = synthetic(8, [0.0] * 8, excluded=True)
    assert plan_step([grp], sc, PruningSchedule(0.5, 1, exclusions=excl), 0) == {}


def test_exclusion_by_node_id_and_tag():
    g = conv_chain()
    grp = [x for x in build_dependency_groups(g) if x.prunable][0]
    assert Exclusions(node_ids=("a",))(grp)
    assert not Exclusions()(grp)
    grp.node_tags["a"] = ("head",)
    assert Exclusions()(grp)


def test_prune_one_of_two_filters():
    g = conv_chain(c_mid=2)
    groups = build_dependency_groups(g)
    gid = [x.id for x in groups if x.prunable][0]
    out = apply_prune(g, groups, {gid: [0]})
    assert g.constants["wa"].shape == (2, 3, 3, 3)
    assert out.constants["wa"].shape == (1, 3, 3, 3)
    assert out.constants["ba"].shape == (1,)
    assert out.constants["wb"].shape == (2, 1, 1, 1)
    assert validate(out).ok


def test_prune_rejects_emptying_a_group():
    g = conv_chain(c_mid=2)
    groups = build_dependency_groups(g)
    gid = [x.id for x in groups if x.prunable][0]
    with pytest.raises(PruneError):
        apply_prune(g, groups, {gid: [0, 1]})
    with pytest.raises(PruneError):
        apply_prune(g, groups, {99: [0]})


def test_split_sizes_follow_pruning(toy):
    groups = build_dependency_groups(toy)
    split = next(n for n in toy.nodes if n.op_kind == "Split")
    grp = next(x for x in groups if x.prunable and any(s.node == split.id for s in x.slots))
    seg = next(s for s in grp.slots if s.role == "split-segment")
    # drop one channel from whichever segment the first group channel maps to
    out = apply_prune(toy, groups, {grp.id: [0]})
    assert validate(out).ok
    new = out.node(split.id).attrs["split"]
    assert sum(new) == sum(split.attrs["split"]) - len(seg.indices[0])


def test_concat_pruning_validates_when_allowed(toy):
    sched = PruningSchedule(0.5, 1, exclusions=Exclusions(tags=(), concat=False), target="channels")
    res = run_schedule(toy, sched)
    assert validate(res.final).ok
    assert res.metrics[-1]["params"] < res.metrics[0]["params"]


def test_toy_has_default_excluded_groups(toy):
    groups = [x for x in build_dependency_groups(toy) if x.prunable]
    excl = Exclusions()
    assert any(excl(x) for x in groups)
    assert any(not excl(x) for x in groups)


@pytest.mark.parametrize("kind", ["chain", "residual", "concat"])
def test_mask_equivalence(kind):
    for seed in range(5):
        g = gen_fixture(kind, seed)
        groups = build_dependency_groups(g)
        sched = PruningSchedule(0.5, 1, exclusions=Exclusions(tags=(), concat=False), target="channels")
        plan = plan_step(groups, score_channels(g, groups), sched, 0)
        x = random_inputs(g, 1, seed)[0]
        a = run_outputs(mask_channels(g, groups, plan), x)
        b = run_outputs(apply_prune(g, groups, plan), x) if plan else run_outputs(g, x)
        assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_schedule_reaches_thirty_percent(toy):
    res = run_schedule(toy, PruningSchedule(0.7, 6))
    assert len(res.metrics) == 7 and not res.stopped_early
    retained = count_params(res.final) / count_params(toy)
    assert abs(retained - 0.30) <= 0.03
    params = [m["params"] for m in res.metrics]
    assert params == sorted(params, reverse=True)


def test_constant_metric_never_stops(toy):
    res = run_schedule(toy, PruningSchedule(0.5, 3), eval_fn=lambda g: 0.7)
    assert not res.stopped_early and len(res.graphs) == 4


def test_metric_drop_stops_after_step_one(toy):
    p0 = count_params(toy)
    res = run_schedule(toy, PruningSchedule(0.7, 6, stop_threshold=0.2),
                       eval_fn=lambda g: 1.0 if count_params(g) == p0 else 0.5)
    assert res.stopped_early and len(res.metrics) == 2


def test_hook_may_not_change_topology(toy):
    def bad(g, step):
        g = g.copy()
        g.nodes = g.nodes[:-1]
        return g
    with pytest.raises(PruneError, match="topology"):
        run_schedule(toy, PruningSchedule(0.5, 2), hook=bad)


def test_schedule_validates_arguments():
    for kw in ({"r_target": 0.0, "k": 2}, {"r_target": 1.0, "k": 2}, {"r_target": 0.5, "k": 0},
               {"r_target": 0.5, "k": 1, "scope": "layer"}):
        with pytest.raises(ValueError):
            PruningSchedule(**kw)


def test_global_scope_prunes_across_groups(toy):
    res = run_schedule(toy, PruningSchedule(0.7, 6, scope="global"))
    retained = res.metrics[-1]["retained"]
    assert abs(retained - 0.30) <= 0.03
    assert validate(res.final).ok
