"""Structured channel pruning.

Channels are coupled with a union-find over individual channel slots:
conv in/out channels, activation-tensor channels and per-channel constant
operands. Every equivalence class that contains a conv output channel is
one prunable channel; classes touching the same set of (node, role) slots
form a DependencyGroup.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from edgepress.accountant import count_macs, count_params
from edgepress.graph import GraphError, ModelGraph, infer_shapes, refresh_specs, validate

ROLES = ("conv-out-channels", "conv-in-channels", "bias", "concat-segment", "add-operand",
         "split-segment", "const-operand")
PASS_THROUGH = ("MaxPool", "Upsample", "SiLU", "Sigmoid", "Identity")
# absorbs float error in products like (1 - 0.8) * 5 that are integral in exact arithmetic
FLOOR_EPS = 1e-9


class PruneError(GraphError):
    pass


@dataclass
class Slot:
    node: str
    role: str
    # indices[i]: positions in this slot's channel dimension for group channel i
    indices: list[tuple[int, ...]]


@dataclass
class DependencyGroup:
    id: int
    slots: list[Slot]
    width: int
    prunable: bool
    node_tags: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def slot_nodes(self, role: str | None = None) -> list[str]:
        return [s.node for s in self.slots if role is None or s.role == role]

    @property
    def hosts(self) -> list[str]:
        return self.slot_nodes("conv-out-channels")


@dataclass(frozen=True)
class ImportanceScore:
    group: int
    channel: int
    score: float


@dataclass
class Exclusions:
    """Which groups plan_step must leave alone.

    By default a group is excluded when its channels reach a Concat or when
    it holds the output channels of a node tagged ``head``.
    """

    node_ids: tuple[str, ...] = ()
    tags: tuple[str, ...] = ("head",)
    concat: bool = True

    def __call__(self, group: DependencyGroup) -> bool:
        if self.concat and group.slot_nodes("concat-segment"):
            return True
        for s in group.slots:
            if s.node in self.node_ids:
                return True
            if s.role == "conv-out-channels" and set(group.node_tags.get(s.node, ())) & set(self.tags):
                return True
        return False


@dataclass
class PruningSchedule:
    r_target: float
    k: int
    scope: str = "local"
    normalization: str = "mean"  # global scope only: "mean" | "raw"
    exclusions: Callable[[DependencyGroup], bool] = field(default_factory=Exclusions)
    stop_threshold: float = 0.20
    target: str = "params"  # "params" | "channels"

    def __post_init__(self):
        if not 0.0 < self.r_target < 1.0:
            raise ValueError(f"r_target must lie in (0, 1), got {self.r_target}")
        if int(self.k) < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.scope not in ("local", "global"):
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.normalization not in ("mean", "raw"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.target not in ("params", "channels"):
            raise ValueError(f"unknown target {self.target!r}")

    @property
    def per_step(self) -> float:
        """Fraction removed per step so that k compounding steps remove r_target."""
        return 1.0 - (1.0 - self.r_target) ** (1.0 / self.k)

    def retained_after(self, steps: int) -> float:
        return (1.0 - self.per_step) ** steps


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def build_dependency_groups(g: ModelGraph) -> list[DependencyGroup]:
    shapes = infer_shapes(g)
    uf = _UnionFind()
    fixed: set = set()
    consts = g.constants

    def ch(t: str) -> int:
        s = shapes[t]
        return s[1] if len(s) == 4 else 1

    def link_tensors(a: str, b: str, offset_b: int = 0, n: int | None = None):
        for c in range(ch(a) if n is None else n):
            uf.union(("t", a, c), ("t", b, offset_b + c))

    for t in g.graph_inputs:
        fixed.update(("t", t, c) for c in range(ch(t)))
    for t in g.graph_outputs:
        fixed.update(("t", t, c) for c in range(ch(t)))

    for n in g.topological_order():
        op = n.op_kind
        if op == "Conv2d":
            x, y = n.inputs[0], n.outputs[0]
            if n.inputs[1] not in consts:
                raise PruneError(f"conv {n.id} kernel is not a constant; prune before quantizing", n.id)
            groups = int(n.attrs.get("groups", 1))
            out_ch, in_ch = ch(y), ch(x)
            for c in range(out_ch):
                uf.union(("out", n.id, c), ("t", y, c))
            for c in range(in_ch):
                uf.union(("in", n.id, c), ("t", x, c))
            if groups == in_ch == out_ch and groups > 1:
                for c in range(out_ch):
                    uf.union(("in", n.id, c), ("out", n.id, c))
            elif groups != 1:
                raise PruneError(f"grouped conv {n.id} with groups={groups} has no propagation rule", n.id)
        elif op in ("Add", "Mul"):
            y = n.outputs[0]
            for t in n.inputs:
                if t in consts:
                    if consts[t].ndim == 4 and consts[t].shape[1] == ch(y) and ch(y) > 1:
                        for c in range(ch(y)):
                            uf.union(("k", n.id, t, c), ("t", y, c))
                    elif consts[t].size != 1 and not (consts[t].ndim == 4 and consts[t].shape[1] == 1):
                        raise PruneError(f"{op} {n.id} constant operand layout has no propagation rule", n.id)
                elif ch(t) == ch(y):
                    link_tensors(t, y)
                else:
                    raise PruneError(f"{op} {n.id} broadcasts over channels", n.id)
        elif op == "Concat":
            y = n.outputs[0]
            if int(n.attrs.get("axis", 1)) == 1:
                off = 0
                for t in n.inputs:
                    link_tensors(t, y, off)
                    off += ch(t)
            else:
                for t in n.inputs:
                    link_tensors(t, y)
        elif op == "Split":
            x = n.inputs[0]
            if int(n.attrs.get("axis", 1)) == 1:
                off = 0
                for t in n.outputs:
                    link_tensors(t, x, off)
                    off += ch(t)
            else:
                for t in n.outputs:
                    link_tensors(t, x)
        elif op in PASS_THROUGH:
            link_tensors(n.inputs[0], n.outputs[0])
        else:
            raise PruneError(f"op {op} at node {n.id} has no channel propagation rule", n.id)

    classes: dict = {}
    for item in list(uf.parent):
        classes.setdefault(uf.find(item), []).append(item)

    producers = g.producers()
    consumers = g.consumers()
    nodes = {n.id: n for n in g.nodes}
    by_signature: dict = {}
    for members in classes.values():
        outs = sorted((m[1], m[2]) for m in members if m[0] == "out")
        if not outs:
            continue
        slot_idx: dict[tuple[str, str], list[int]] = {}

        def put(node: str, role: str, idx: int):
            slot_idx.setdefault((node, role), []).append(idx)

        for m in members:
            kind = m[0]
            if kind == "out":
                put(m[1], "conv-out-channels", m[2])
                if len(nodes[m[1]].inputs) > 2:
                    put(m[1], "bias", m[2])
            elif kind == "in":
                put(m[1], "conv-in-channels", m[2])
            elif kind == "k":
                put(m[1], "const-operand", m[3])
            else:
                t, c = m[1], m[2]
                p = producers.get(t)
                if p is not None and p.op_kind == "Concat":
                    put(p.id, "concat-segment", c)
                if p is not None and p.op_kind in ("Add", "Mul"):
                    put(p.id, "add-operand", c)
                for cn in consumers.get(t, []):
                    if cn.op_kind == "Split":
                        put(cn.id, "split-segment", c)
        key = tuple(sorted(slot_idx))
        is_fixed = any(m in fixed for m in members)
        by_signature.setdefault(key, []).append((outs[0], slot_idx, is_fixed))

    groups: list[DependencyGroup] = []
    for key, chans in sorted(by_signature.items(), key=lambda kv: min(c[0] for c in kv[1])):
        chans.sort(key=lambda c: c[0])
        slots = [Slot(node, role, [tuple(sorted(c[1][(node, role)])) for c in chans]) for node, role in key]
        slots.sort(key=lambda s: (ROLES.index(s.role), s.node))
        tags = {s.node: tuple(nodes[s.node].tags) for s in slots}
        groups.append(DependencyGroup(
            id=len(groups), slots=slots, width=len(chans),
            prunable=not any(c[2] for c in chans), node_tags=tags,
        ))
    return groups


def _slot_sq(g: ModelGraph, slot: Slot) -> np.ndarray:
    """Sum of squared weights per group channel for one slot."""
    n = g.node(slot.node)
    if slot.role == "conv-out-channels":
        w = g.constants[n.inputs[1]].astype(np.float64)
        per = (w ** 2).reshape(w.shape[0], -1).sum(axis=1)
    elif slot.role == "bias":
        per = g.constants[n.inputs[2]].astype(np.float64) ** 2
    elif slot.role == "conv-in-channels":
        if int(n.attrs.get("groups", 1)) != 1:
            return np.zeros(len(slot.indices))  # depthwise: counted with the out slot
        w = g.constants[n.inputs[1]].astype(np.float64)
        per = (w ** 2).sum(axis=(0, 2, 3))
    elif slot.role == "const-operand":
        t = next(t for t in n.inputs if t in g.constants and g.constants[t].ndim == 4)
        w = g.constants[t].astype(np.float64)
        per = (w ** 2).sum(axis=(0, 2, 3))
    else:
        return np.zeros(len(slot.indices))
    return np.array([per[list(ix)].sum() for ix in slot.indices])


def score_channels(g: ModelGraph, groups: Sequence[DependencyGroup], scope: str = "local",
                   normalization: str = "mean") -> list[ImportanceScore]:
    """L2 norm of every weight a channel owns, across all of its slots.

    In global scope with ``normalization="mean"`` each group's scores are
    divided by that group's mean so layers of different fan-in compare.
    """
    out: list[ImportanceScore] = []
    for grp in groups:
        sq = np.zeros(grp.width)
        for s in grp.slots:
            sq += _slot_sq(g, s)
        sc = np.sqrt(sq)
        if scope == "global" and normalization == "mean":
            mean = sc.mean()
            if mean > 0:
                sc = sc / mean
        out.extend(ImportanceScore(grp.id, i, float(v)) for i, v in enumerate(sc))
    return out


def eligible_groups(groups: Iterable[DependencyGroup], schedule: PruningSchedule) -> list[DependencyGroup]:
    return [grp for grp in groups if grp.prunable and grp.width > 1 and not schedule.exclusions(grp)]


def plan_step(groups: Sequence[DependencyGroup], scores: Sequence[ImportanceScore],
              schedule: PruningSchedule, step_index: int,
              fraction: float | None = None) -> dict[int, list[int]]:
    """Channels to remove this step, as ``{group id: sorted channel indices}``.

    Local scope takes ``floor(fraction * width)`` lowest-scored channels of
    each eligible group; global scope takes ``floor(fraction * total)``
    lowest across all eligible groups. Every group keeps at least one
    channel; ties go to the lower (group, channel) index.
    """
    if not 0 <= step_index < schedule.k:
        raise PruneError(f"step_index {step_index} outside schedule of k={schedule.k}")
    frac = schedule.per_step if fraction is None else fraction
    if not 0.0 <= frac < 1.0:
        raise PruneError(f"per-step fraction {frac} would empty a group")
    by_group: dict[int, list[ImportanceScore]] = {}
    for s in scores:
        by_group.setdefault(s.group, []).append(s)
    elig = eligible_groups(groups, schedule)
    plan: dict[int, list[int]] = {}
    if schedule.scope == "local":
        for grp in elig:
            n = min(math.floor(frac * grp.width + FLOOR_EPS), grp.width - 1)
            if n <= 0:
                continue
            ranked = sorted(by_group[grp.id], key=lambda s: (s.score, s.channel))
            plan[grp.id] = sorted(s.channel for s in ranked[:n])
        return plan
    total = sum(grp.width for grp in elig)
    n = math.floor(frac * total + FLOOR_EPS)
    width = {grp.id: grp.width for grp in elig}
    pool = sorted((s for s in scores if s.group in width), key=lambda s: (s.score, s.group, s.channel))
    taken: dict[int, int] = {}
    for s in pool:
        if n <= 0:
            break
        if taken.get(s.group, 0) >= width[s.group] - 1:
            continue
        plan.setdefault(s.group, []).append(s.channel)
        taken[s.group] = taken.get(s.group, 0) + 1
        n -= 1
    return {gid: sorted(chs) for gid, chs in plan.items()}


def apply_prune(g: ModelGraph, groups: Sequence[DependencyGroup], plan: dict[int, list[int]]) -> ModelGraph:
    """Physically remove the planned channels; the result is dense and validated."""
    by_id = {grp.id: grp for grp in groups}
    drop: dict[tuple[str, str], set[int]] = {}
    for gid, chans in plan.items():
        if gid not in by_id:
            raise PruneError(f"unknown group {gid} in prune set")
        grp = by_id[gid]
        chans = set(chans)
        if any(c < 0 or c >= grp.width for c in chans) or len(chans) >= grp.width:
            raise PruneError(f"inconsistent prune set for group {gid} of width {grp.width}")
        for s in grp.slots:
            idx = drop.setdefault((s.node, s.role), set())
            for c in chans:
                idx.update(s.indices[c])
    out = g.copy()
    nodes = {n.id: n for n in out.nodes}
    for (nid, role), idx in sorted(drop.items()):
        n = nodes[nid]
        idx = sorted(idx)
        if role == "conv-out-channels":
            k = n.inputs[1]
            out.constants[k] = np.delete(out.constants[k], idx, axis=0)
            if int(n.attrs.get("groups", 1)) > 1:
                n.attrs["groups"] = int(out.constants[k].shape[0])
        elif role == "bias":
            b = n.inputs[2]
            out.constants[b] = np.delete(out.constants[b], idx, axis=0)
        elif role == "conv-in-channels":
            if int(n.attrs.get("groups", 1)) == 1:
                k = n.inputs[1]
                out.constants[k] = np.delete(out.constants[k], idx, axis=1)
        elif role == "const-operand":
            t = next(t for t in n.inputs if t in out.constants and out.constants[t].ndim == 4)
            out.constants[t] = np.delete(out.constants[t], idx, axis=1)
        elif role == "split-segment":
            sizes = [int(v) for v in n.attrs["split"]]
            off, new = 0, []
            for sz in sizes:
                new.append(sz - sum(1 for i in idx if off <= i < off + sz))
                off += sz
            n.attrs["split"] = new
    try:
        refresh_specs(out)
    except GraphError as e:
        raise PruneError(f"pruned graph is inconsistent: {e}", e.node_id)
    report = validate(out)
    if not report.ok:
        raise PruneError(f"pruned graph fails validation: {report.issues[0]}")
    return out


def mask_channels(g: ModelGraph, groups: Sequence[DependencyGroup], plan: dict[int, list[int]]) -> ModelGraph:
    """Zero the planned channels' producer weights (kernel rows, biases) in place of removal."""
    by_id = {grp.id: grp for grp in groups}
    out = g.copy()
    nodes = {n.id: n for n in out.nodes}
    for gid, chans in plan.items():
        for s in by_id[gid].slots:
            idx = sorted({i for c in chans for i in s.indices[c]})
            n = nodes[s.node]
            if s.role == "conv-out-channels":
                out.constants[n.inputs[1]][idx] = 0.0
            elif s.role == "bias":
                out.constants[n.inputs[2]][idx] = 0.0
    return out


RecoveryHook = Callable[[ModelGraph, int], ModelGraph]


def identity_hook(g: ModelGraph, step: int) -> ModelGraph:
    return g


def _signature(g: ModelGraph):
    return (
        [(n.id, n.op_kind, tuple(n.inputs), tuple(n.outputs)) for n in g.nodes],
        {t: tuple(s.shape) for t, s in g.tensors.items()},
    )


@dataclass
class ScheduleResult:
    graphs: list[ModelGraph]
    metrics: list[dict]
    stopped_early: bool
    baseline_metric: float

    @property
    def final(self) -> ModelGraph:
        return self.graphs[-1]


def _search_fraction(g: ModelGraph, groups, scores, schedule, step: int, target_params: float):
    """Channel fraction whose plan lands the parameter count closest to target."""
    elig = eligible_groups(groups, schedule)
    if not elig:
        return {}, g
    if schedule.scope == "local":
        cands = sorted({n / grp.width for grp in elig for n in range(1, grp.width)})
    else:
        total = sum(grp.width for grp in elig)
        cands = [n / total for n in range(1, total)]
    cands = [0.0] + cands

    cache: dict[int, tuple] = {}

    def attempt(i: int):
        if i not in cache:
            plan = plan_step(groups, scores, schedule, step, fraction=cands[i])
            pruned = apply_prune(g, groups, plan) if plan else g
            cache[i] = (plan, pruned, count_params(pruned))
        return cache[i]

    lo, hi = 0, len(cands) - 1
    if attempt(hi)[2] > target_params:
        return attempt(hi)[:2]
    # smallest index with params <= target
    while lo < hi:
        mid = (lo + hi) // 2
        if attempt(mid)[2] <= target_params:
            hi = mid
        else:
            lo = mid + 1
    best = lo
    if lo > 0 and abs(attempt(lo - 1)[2] - target_params) < abs(attempt(lo)[2] - target_params):
        best = lo - 1
    return attempt(best)[:2]


def run_schedule(g: ModelGraph, schedule: PruningSchedule,
                 eval_fn: Callable[[ModelGraph], float] | None = None,
                 hook: RecoveryHook | None = None) -> ScheduleResult:
    """Iterate score -> plan -> apply -> hook -> eval for up to k steps.

    With ``schedule.target == "params"`` each step removes channels until
    the parameter count is nearest ``P0 * (1 - per_step) ** (step + 1)``;
    with ``"channels"`` each group loses ``floor(per_step * width)``.
    Stops once the metric falls below ``(1 - stop_threshold) * baseline``.
    """
    eval_fn = eval_fn or (lambda _g: 1.0)
    hook = hook or identity_hook
    p0 = count_params(g)
    baseline = float(eval_fn(g))
    graphs = [g]
    metrics = [{"step": 0, "pruned_channels": 0, "params": p0, "macs": count_macs(g),
                "retained": 1.0, "metric": baseline}]
    stopped = False
    cur = g
    for step in range(schedule.k):
        groups = build_dependency_groups(cur)
        scores = score_channels(cur, groups, schedule.scope, schedule.normalization)
        if schedule.target == "channels":
            plan = plan_step(groups, scores, schedule, step)
            pruned = apply_prune(cur, groups, plan) if plan else cur
        else:
            plan, pruned = _search_fraction(cur, groups, scores, schedule, step,
                                            p0 * schedule.retained_after(step + 1))
        before = _signature(pruned)
        nxt = hook(pruned, step)
        if _signature(nxt) != before:
            raise PruneError(f"recovery hook changed graph topology or shapes at step {step + 1}")
        cur = nxt
        metric = float(eval_fn(cur))
        params = count_params(cur)
        graphs.append(cur)
        metrics.append({
            "step": step + 1,
            "pruned_channels": int(sum(len(v) for v in plan.values())),
            "params": params,
            "macs": count_macs(cur),
            "retained": params / p0 if p0 else 1.0,
            "metric": metric,
        })
        if metric < (1.0 - schedule.stop_threshold) * baseline:
            stopped = True
            break
    return ScheduleResult(graphs=graphs, metrics=metrics, stopped_early=stopped, baseline_metric=baseline)
