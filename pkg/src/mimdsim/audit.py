"""Post-run verification and measurement over immutable traces.

Two per-path inequalities are checked as numeric slacks (LHS minus RHS, so
negative means violated):

* throughput floor: total received must cover (beta/alpha - 1) times the
  total lost, minus a warm-up allowance of (delay + 1) * start_rate / alpha;
* loss floor: the summed per-round loss fractions must reach a rate-derived
  bound built from the duration, the delay, and the log of the peak
  received rate over the start rate.

The loss floor's derivation assumes the start rate is no larger than
beta * U / (beta - alpha) where U is the peak per-round received amount
(a run that starts absurdly above capacity can legitimately dip below the
stated bound); the randomized suites keep starts feasible so both slacks
must be non-negative up to float tolerance.

Fairness is measured as the smallest eps for which each path's cumulative
loss fraction is within (1 + eps) of the summed per-resource loss ratios it
traversed. The final report pairs the protocol's weighted throughput with
the fixed-rate optimum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .kernel import RunTrace
from .optimum import OptimumSolution


class AuditError(RuntimeError):
    """Inconsistent audit inputs (e.g. positive throughput against opt = 0)."""


@dataclass
class AuditReport:
    """Everything the auditor measures for one run."""

    weighted_throughput: float
    total_lost_paths: float
    total_lost_resources: float
    lemma1_slack: dict[str, float]
    lemma3_slack: dict[str, float | None]   # None marks a degenerate path (never received)
    measured_epsilon_hat: float
    U: dict[str, float]
    b: float | None
    c: float | None
    per_path_b: dict[str, float]
    per_path_c: dict[str, float | None]
    duration_threshold: float | None
    opt_value: float | None
    competitive_ratio: float | None


def max_received(trace: RunTrace, path_id: str) -> float:
    """Peak per-round amount received on the path over its arrival window."""
    c = trace.scenario.connection(path_id)
    rec = trace.paths[path_id]
    return max((rec.rcvd[t] for t in c.shifted_window().rounds()), default=0.0)


def check_lemma1(trace: RunTrace, path_id: str) -> float:
    """Slack of the throughput floor; >= 0 (up to float noise) on every run."""
    c = trace.scenario.connection(path_id)
    rec = trace.paths[path_id]
    window = c.shifted_window().rounds()
    total_rcvd = math.fsum(rec.rcvd[t] for t in window)
    total_lost = math.fsum(rec.lost[t] for t in window)
    rhs = (c.beta / c.alpha - 1.0) * total_lost - (c.total_delay + 1) * c.start_rate / c.alpha
    return total_rcvd - rhs


def check_lemma3(trace: RunTrace, path_id: str) -> float | None:
    """Slack of the loss floor, or None when the path never received anything."""
    c = trace.scenario.connection(path_id)
    rec = trace.paths[path_id]
    peak = max_received(trace, path_id)
    if peak <= 0.0:
        return None
    total_lsr = math.fsum(rec.lsr[t] for t in c.shifted_window().rounds())
    growth = (
        c.alpha * (1.0 - c.beta) / (c.beta * (1.0 + c.alpha))
        * (c.duration - 1 - c.total_delay)
    )
    log_term = (
        (1.0 - c.beta) / c.beta
        * (1 + c.total_delay)
        * math.log(c.beta * peak / ((c.beta - c.alpha) * c.start_rate))
    )
    return total_lsr - (growth - log_term)


def sent_ceiling_slack(trace: RunTrace, path_id: str) -> float:
    """max allowed send minus actual max send; >= 0 up to 1e-9 relative.

    The ceiling is max(start_rate, peak_received * beta / (beta - alpha)).
    """
    c = trace.scenario.connection(path_id)
    rec = trace.paths[path_id]
    peak_sent = max((rec.sent[t] for t in c.active_window().rounds()), default=0.0)
    ceiling = max(c.start_rate, max_received(trace, path_id) * c.beta / (c.beta - c.alpha))
    return ceiling * (1.0 + 1e-9) - peak_sent


def _fairness_sides(trace: RunTrace, path_id: str) -> tuple[float, float]:
    """(cumulative loss fraction, cumulative traversed resource loss ratios)."""
    c = trace.scenario.connection(path_id)
    rec = trace.paths[path_id]
    lhs_terms = []
    rhs_terms = []
    for t in c.shifted_window().rounds():
        lhs_terms.append(rec.lost[t] / rec.sent[t - c.total_delay])
        for hop, rid in enumerate(c.route):
            u = t - c.hop_delays[hop]
            led = trace.resources[rid]
            into = led.into[u]
            if into > 0.0:
                rhs_terms.append(led.lost[u] / into)
    return math.fsum(lhs_terms), math.fsum(rhs_terms)


def measure_fairness(trace: RunTrace) -> float:
    """Smallest eps making the fair-loss condition hold, maximized over paths.

    Convention: a path with no loss and no traversed loss contributes 0; a
    path losing packets while its resources report no loss ratio yields inf
    (unreachable for kernel-produced traces).
    """
    if not trace.scenario.connections:
        return 0.0
    # max over paths; can be negative when every path is under par
    values = []
    for c in trace.scenario.connections:
        lhs, rhs = _fairness_sides(trace, c.id)
        if rhs == 0.0:
            values.append(0.0 if lhs == 0.0 else math.inf)
        else:
            values.append(lhs / rhs - 1.0)
    return max(values)


def theorem_parameters(epsilon: float, val: float, beta_scale: float = 1.0) -> tuple[float, float]:
    """Protocol parameters for a target eps: beta = beta_scale * eps and
    alpha = eps * beta * val, which makes alpha < beta automatic."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0,1), got {epsilon}")
    if not 0.0 < val <= 1.0:
        raise ValueError(f"val must lie in (0,1], got {val}")
    if not 0.0 < beta_scale <= 1.0:
        raise ValueError(f"beta_scale must lie in (0,1], got {beta_scale}")
    beta = beta_scale * epsilon
    alpha = epsilon * beta * val
    return alpha, beta


def weighted_throughput(trace: RunTrace) -> float:
    return math.fsum(
        c.value * math.fsum(trace.paths[c.id].rcvd[t] for t in c.shifted_window().rounds())
        for c in trace.scenario.connections
    )


def competitive_ratio(trace: RunTrace, opt: OptimumSolution | None) -> AuditReport:
    """Assemble the full report; opt may be None when it was unbounded."""
    scenario = trace.scenario
    throughput = weighted_throughput(trace)
    total_lost_paths = math.fsum(
        math.fsum(trace.paths[c.id].lost[t] for t in c.shifted_window().rounds())
        for c in scenario.connections
    )
    total_lost_resources = math.fsum(
        math.fsum(led.lost) for led in trace.resources.values()
    )

    lemma1 = {c.id: check_lemma1(trace, c.id) for c in scenario.connections}
    lemma3 = {c.id: check_lemma3(trace, c.id) for c in scenario.connections}
    peaks = {c.id: max_received(trace, c.id) for c in scenario.connections}

    per_path_b = {c.id: (c.beta / c.alpha - 1.0) * c.value for c in scenario.connections}
    per_path_c: dict[str, float | None] = {}
    threshold_terms = []
    for c in scenario.connections:
        peak = peaks[c.id]
        if peak <= 0.0 or c.value <= 0.0:
            per_path_c[c.id] = None
            continue
        log_term = math.log(c.beta * peak / ((c.beta - c.alpha) * c.start_rate))
        frac = (1 + c.total_delay) / c.duration
        per_path_c[c.id] = (
            c.alpha * (1.0 - c.beta) / (c.beta * (1.0 + c.alpha) * c.value) * (1.0 - frac)
            - (1.0 - c.beta) / (c.beta * c.value) * frac * log_term
        )
        if peak > c.start_rate:
            threshold_terms.append(
                (1 + c.total_delay) * math.log(peak / c.start_rate)
                / (scenario.epsilon ** 2 * c.beta * c.value)
            )

    finite_c = [v for v in per_path_c.values() if v is not None]
    report = AuditReport(
        weighted_throughput=throughput,
        total_lost_paths=total_lost_paths,
        total_lost_resources=total_lost_resources,
        lemma1_slack=lemma1,
        lemma3_slack=lemma3,
        measured_epsilon_hat=measure_fairness(trace),
        U=peaks,
        b=min(per_path_b.values()) if per_path_b else None,
        c=min(finite_c) if finite_c else None,
        per_path_b=per_path_b,
        per_path_c=per_path_c,
        duration_threshold=max(threshold_terms) if threshold_terms else None,
        opt_value=None,
        competitive_ratio=None,
    )
    if opt is not None:
        report.opt_value = opt.opt_value
        if opt.opt_value <= 0.0:
            if throughput > 1e-9:
                raise AuditError(
                    f"positive throughput {throughput} against opt_value 0: "
                    "the optimum and the trace cannot come from the same scenario"
                )
            report.competitive_ratio = 0.0
        else:
            report.competitive_ratio = throughput / opt.opt_value
    return report


def _fmt(x: float | None) -> str:
    return "n/a" if x is None else f"{x:.6g}"


def summary_line(report: AuditReport) -> str:
    lemma1_min = min(report.lemma1_slack.values(), default=None)
    lemma3_values = [v for v in report.lemma3_slack.values() if v is not None]
    lemma3_min = min(lemma3_values) if lemma3_values else None
    return (
        f"ratio={_fmt(report.competitive_ratio)} "
        f"eps_hat={_fmt(report.measured_epsilon_hat)} "
        f"lemma1_min_slack={_fmt(lemma1_min)} "
        f"lemma3_min_slack={_fmt(lemma3_min)}"
    )


def report_to_dict(report: AuditReport) -> dict:
    return {
        "weighted_throughput": report.weighted_throughput,
        "total_lost_paths": report.total_lost_paths,
        "total_lost_resources": report.total_lost_resources,
        "lemma1_slack": dict(report.lemma1_slack),
        "lemma3_slack": dict(report.lemma3_slack),
        "measured_epsilon_hat": report.measured_epsilon_hat,
        "U": dict(report.U),
        "b": report.b,
        "c": report.c,
        "per_path_b": dict(report.per_path_b),
        "per_path_c": dict(report.per_path_c),
        "duration_threshold": report.duration_threshold,
        "opt_value": report.opt_value,
        "competitive_ratio": report.competitive_ratio,
    }


def export_report(report: AuditReport, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n")
    return path
