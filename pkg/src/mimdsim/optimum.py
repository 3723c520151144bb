"""Best fixed-rate-per-path throughput, as an explicit linear program.

The yardstick assignment gives every path one constant rate over its active
window; a path active during rounds [s, e] loads each resource on its route
during [s + pre_delay, e + pre_delay]. Constraint rows exist only for
(resource, round) pairs where some path is present, and rounds with an
identical active set collapse to the binding (minimum-capacity) row, which
keeps the LP tiny regardless of horizon length.

``solve_opt`` uses a dense LP solver; ``brute_force_opt`` is an independent
exhaustive grid enumeration for cross-checking small instances in tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from .model import Scenario, require_valid

FEASIBILITY_ATOL = 1e-9
OPTIMALITY_RTOL = 1e-6


class OptimumError(RuntimeError):
    """The solver could not produce a solution."""


class UnboundedOptimumError(OptimumError):
    """A positively valued path meets no finite capacity: opt is unbounded."""


@dataclass(frozen=True)
class OptimumSolution:
    """Fixed per-path rates plus the achieved weighted throughput."""

    rates: dict[str, float]
    opt_value: float
    tight_constraints: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class _Segment:
    """Rounds [lo, hi) of one resource with a constant active set and capacity."""

    resource_id: str
    lo: int
    hi: int
    cap: float
    active: tuple[int, ...]   # connection indices loading the resource here


def _segments(scenario: Scenario) -> list[_Segment]:
    horizon = scenario.horizon
    if horizon < 0:
        return []
    out: list[_Segment] = []
    for r in scenario.resources:
        spans = []
        for k, c in enumerate(scenario.connections):
            if r.id not in c.route:
                continue
            shift = c.total_delay - c.hop_delays[c.route.index(r.id)]
            spans.append((k, c.start + shift, c.end + shift + 1))
        if not spans:
            continue
        cuts = {0, horizon + 1}
        cuts.update(fr for fr, _ in r.capacity.steps if 0 <= fr <= horizon)
        for _, a, b in spans:
            cuts.add(min(max(a, 0), horizon + 1))
            cuts.add(min(max(b, 0), horizon + 1))
        bounds = sorted(cuts)
        for lo, hi in zip(bounds, bounds[1:]):
            active = tuple(k for k, a, b in spans if a <= lo and hi <= b)
            if active:
                out.append(_Segment(r.id, lo, hi, r.capacity.at(lo), active))
    return out


def _weights(scenario: Scenario) -> list[float]:
    return [c.value * c.duration for c in scenario.connections]


def _tight_pairs(
    scenario: Scenario, segments: list[_Segment], rates: dict[str, float]
) -> tuple[tuple[str, int], ...]:
    conns = scenario.connections
    pairs: list[tuple[str, int]] = []
    for seg in segments:
        if math.isinf(seg.cap):
            continue
        load = math.fsum(rates[conns[k].id] for k in seg.active)
        if load >= seg.cap - 1e-7 * max(1.0, seg.cap):
            pairs.extend((seg.resource_id, t) for t in range(seg.lo, seg.hi))
    return tuple(pairs)


def solve_opt(scenario: Scenario) -> OptimumSolution:
    """Maximize total weighted throughput over fixed per-path rates.

    Raises UnboundedOptimumError when a positively weighted path traverses
    no finite capacity. Paths with zero weight are assigned rate 0 (any
    capacity they would use is better spent elsewhere).
    """
    require_valid(scenario)
    conns = scenario.connections
    weights = _weights(scenario)
    segments = _segments(scenario)
    var_of = [k for k, w in enumerate(weights) if w > 0]
    rates = {c.id: 0.0 for c in conns}
    if not var_of:
        return OptimumSolution(rates, 0.0, _tight_pairs(scenario, segments, rates))

    col = {k: j for j, k in enumerate(var_of)}
    rows: dict[tuple[int, ...], float] = {}
    for seg in segments:
        if math.isinf(seg.cap):
            continue
        members = tuple(sorted(col[k] for k in seg.active if k in col))
        if not members:
            continue
        if members not in rows or seg.cap < rows[members]:
            rows[members] = seg.cap

    constrained = set()
    for members in rows:
        constrained.update(members)
    for k in var_of:
        if col[k] not in constrained:
            raise UnboundedOptimumError(
                f"unbounded: path {conns[k].id!r} meets no finite capacity"
            )

    n = len(var_of)
    a_ub = np.zeros((len(rows), n))
    b_ub = np.zeros(len(rows))
    for i, (members, cap) in enumerate(sorted(rows.items())):
        a_ub[i, list(members)] = 1.0
        b_ub[i] = cap
    c_obj = np.array([-weights[k] for k in var_of])
    res = linprog(c_obj, A_ub=a_ub, b_ub=b_ub, bounds=[(0, None)] * n, method="highs")
    if res.status == 3:
        raise UnboundedOptimumError("unbounded")
    if res.status != 0:
        raise OptimumError(f"LP solve failed with status {res.status}: {res.message}")

    for k in var_of:
        rates[conns[k].id] = max(0.0, float(res.x[col[k]]))
    for seg in segments:
        load = math.fsum(rates[conns[k].id] for k in seg.active)
        if load > seg.cap + FEASIBILITY_ATOL:
            raise OptimumError(
                f"infeasible LP answer at {seg.resource_id!r} rounds "
                f"[{seg.lo},{seg.hi}): load {load} > cap {seg.cap}"
            )
    value = math.fsum(weights[k] * rates[conns[k].id] for k in range(len(conns)))
    return OptimumSolution(rates, value, _tight_pairs(scenario, segments, rates))


def brute_force_opt(scenario: Scenario, resolution: float) -> OptimumSolution:
    """Exhaustive grid search over per-path rate vectors (tests only).

    Enumerates multiples of ``resolution`` per path up to the path's single
    tightest capacity and returns the best feasible vector; independent of
    the LP route.
    """
    require_valid(scenario)
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    conns = scenario.connections
    if len(conns) > 4:
        raise ValueError("too many paths for brute force (max 4)")
    weights = _weights(scenario)
    segments = _segments(scenario)
    rates = {c.id: 0.0 for c in conns}
    if not conns:
        return OptimumSolution(rates, 0.0, ())

    ubs = []
    for k, c in enumerate(conns):
        caps = [seg.cap for seg in segments if k in seg.active and not math.isinf(seg.cap)]
        if not caps:
            if weights[k] > 0:
                raise UnboundedOptimumError(
                    f"unbounded: path {c.id!r} meets no finite capacity"
                )
            ubs.append(0.0)
        else:
            ubs.append(min(caps))

    axes = []
    cells = 1
    for ub in ubs:
        count = int(math.floor(ub / resolution + 1e-9)) + 1
        axes.append(resolution * np.arange(count))
        cells *= count
    if cells > 20_000_000:
        raise ValueError(f"grid too large ({cells} cells); coarsen the resolution")

    n = len(conns)
    shaped = [ax.reshape([-1 if i == k else 1 for i in range(n)]) for k, ax in enumerate(axes)]
    objective = sum(weights[k] * shaped[k] for k in range(n)) + np.zeros([len(a) for a in axes])
    for seg in segments:
        if math.isinf(seg.cap):
            continue
        load = sum(shaped[k] for k in seg.active) + np.zeros(objective.shape)
        objective[load > seg.cap + 1e-9] = -np.inf

    best_flat = int(np.argmax(objective))
    best_idx = np.unravel_index(best_flat, objective.shape)
    for k, c in enumerate(conns):
        rates[c.id] = float(axes[k][best_idx[k]])
    value = math.fsum(weights[k] * rates[conns[k].id] for k in range(n))
    return OptimumSolution(rates, value, _tight_pairs(scenario, segments, rates))


def solution_to_dict(solution: OptimumSolution) -> dict:
    return {
        "rates": dict(solution.rates),
        "opt_value": solution.opt_value,
        "tight_constraints": [[rid, t] for rid, t in solution.tight_constraints],
    }


def export_solution(solution: OptimumSolution, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(solution_to_dict(solution), indent=2, sort_keys=True) + "\n")
    return path
