"""Command-line front end: ``emsbrq bounds | curves | simulate``.

Settings come from an optional flat ``key = value`` file (``#`` starts a comment);
any flag given on the command line overrides the file.  Exit codes: 0 ok, 1 usage,
2 guard violation or infeasible input, 3 a simulation exceeded its bound.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import bounds, schemes, simulate
from .bounds import MessageSchedule
from .channel import ChannelParams, capacity

EXIT_OK, EXIT_USAGE, EXIT_GUARD, EXIT_VALIDATION = 0, 1, 2, 3

CSV_HEADER = ("scheme", "M1", "epsilon", "avg_blocks", "avg_blocklength", "avg_nats",
              "rate_bits", "eps_certified", "truncation_gap")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run.  ``log_m1_min``/``log_m1_max`` default to ``0.2T``/``2.5T`` nats."""

    delta0: float = 0.30
    delta1: float = 0.05
    q: float = 0.6
    T: int = 100
    epsilon: float = 1e-3
    beta: float = 0.9
    step: float | None = None
    horizon: int = schemes.DEFAULT_HORIZON
    p_min: float = schemes.DEFAULT_P_MIN
    max_expansions: int = schemes.DEFAULT_MAX_EXPANSIONS
    log_m1_min: float | None = None
    log_m1_max: float | None = None
    points: int = 40
    schemes: str = ",".join(schemes.SCHEMES)
    seed: int = 0
    jobs: int = 1
    csv: str | None = None
    svg: str | None = None
    json: str | None = None
    rounding: str = "pessimistic"
    rate_unit: str = "bits"

    def __post_init__(self):
        self.params  # validates the channel
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon={self.epsilon} outside (0, 1)")
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta={self.beta} outside (0, 1]")
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")
        for name in ("horizon", "points", "jobs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.max_expansions < 0:
            raise ValueError("max_expansions must be non-negative")
        if not 0 <= self.p_min < 1:
            raise ValueError("p_min outside [0, 1)")
        lo, hi = self.sweep_range
        if not 0 < lo <= hi:
            raise ValueError(f"sweep range [{lo}, {hi}] is empty or non-positive")
        bad = [s for s in self.scheme_list if s not in schemes.SCHEMES]
        if bad:
            raise ValueError(f"unknown schemes {bad}; choose from {schemes.SCHEMES}")
        if self.rounding not in ("pessimistic", "optimistic", "nearest"):
            raise ValueError(f"unknown rounding {self.rounding!r}")
        if self.rate_unit not in ("bits", "nats"):
            raise ValueError("rate_unit must be bits or nats")

    @property
    def params(self) -> ChannelParams:
        return ChannelParams(self.delta0, self.delta1, self.q, self.T)

    @property
    def grid_step(self) -> float:
        return schemes.curve_step(self.params) if self.step is None else self.step

    @property
    def sweep_range(self) -> tuple[float, float]:
        lo = 0.2 * self.T if self.log_m1_min is None else self.log_m1_min
        hi = 2.5 * self.T if self.log_m1_max is None else self.log_m1_max
        return lo, hi

    @property
    def scheme_list(self) -> tuple:
        return tuple(s.strip() for s in self.schemes.split(",") if s.strip())

    def sweep(self) -> np.ndarray:
        """``ln M1`` values, evenly spaced (so ``M1`` is log-uniform)."""
        lo, hi = self.sweep_range
        return np.linspace(lo, hi, self.points) if self.points > 1 else np.array([lo])


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if raw.lower() in ("none", "") and "None" in kind:
        return None
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines; unknown keys are rejected."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, raw)
        except ValueError as exc:
            raise UsageError(f"config line {lineno}: {exc}") from None
    return out


def load_config(path: str | None, overrides: dict) -> RunConfig:
    base = parse_config_text(Path(path).read_text()) if path else {}
    base.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**base)


# --- argument parsing -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.replace(" ", "").split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


_FLAG_HELP = {
    "delta0": "crossover probability in the bad state (0.30)",
    "delta1": "crossover probability in the good state (0.05)",
    "q": "probability of the good state (0.6)",
    "T": "channel uses per block (100)",
    "epsilon": "target error probability (1e-3)",
    "beta": "BRQ-SF stop-probability cap (0.9)",
    "step": "grid step in nats (bounds 1e-5, curves 1e-4 per channel use)",
    "horizon": "maximum number of blocks (20)",
    "p_min": "prune state paths below this probability (1e-9)",
    "max_expansions": "maximum message-set expansions (5)",
    "log_m1_min": "smallest ln M1 in the sweep, nats (0.2 T)",
    "log_m1_max": "largest ln M1 in the sweep, nats (2.5 T)",
    "points": "sweep points per scheme (40)",
    "schemes": "comma-separated subset of " + ",".join(schemes.SCHEMES),
    "seed": "simulation seed (0)",
    "jobs": "worker processes for sweeps (1)",
    "csv": "write the curve CSV here instead of stdout",
    "svg": "also draw the curves as SVG",
    "json": "write the JSON result here",
    "rounding": "pessimistic, optimistic or nearest",
    "rate_unit": "bits or nats",
}


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value file")
    for f in fields(RunConfig):
        kind = f.type
        conv = int if kind.startswith("int") else float if kind.startswith("float") else str
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=conv, default=None,
                       help=_FLAG_HELP.get(f.name))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emsbrq", description="Achievable rates for a block-fading BSC with delayed CSIT.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    b = sub.add_parser("bounds", help="evaluate the tree-code error bounds")
    _add_config_flags(b)
    b.add_argument("--M", dest="sizes", type=_float_list, required=True, help="M_1,...,M_N")
    b.add_argument("--states", type=_int_list, required=True, help="s_1,...,s_N")
    b.add_argument("--method", choices=("both", "thm1", "prop1", "sf"), default="both")
    b.add_argument("--gammas", type=_float_list, help="threshold increments for --method sf")

    c = sub.add_parser("curves", help="sweep rate curves for every scheme")
    _add_config_flags(c)

    s = sub.add_parser("simulate", help="Monte Carlo check of a bound")
    _add_config_flags(s)
    s.add_argument("--mode", choices=("ems", "emssf"), default="ems")
    s.add_argument("--M", dest="sizes", type=_int_list, required=True)
    s.add_argument("--states", type=_int_list, required=True,
                   help="one state per block; for emssf its length is the horizon")
    s.add_argument("--trials", type=int, default=100_000)
    s.add_argument("--gamma", type=float, help="decoder threshold (ems)")
    s.add_argument("--gammas", type=_float_list, help="threshold increments (emssf)")
    return parser


def _overrides(ns) -> dict:
    return {f.name: getattr(ns, f.name) for f in fields(RunConfig)}


# --- bounds -----------------------------------------------------------------------------

def cmd_bounds(cfg: RunConfig, sizes, states, method: str = "both", gammas=None, out=None) -> dict:
    out = sys.stdout if out is None else out
    params = cfg.params
    step = cfg.step or bounds.DEFAULT_STEP
    sched = MessageSchedule.from_sizes(sizes, gammas)
    result: dict = {"M": list(sizes), "states": list(states), "step": step, "rounding": cfg.rounding}
    if method == "sf":
        if sched.gamma is None:
            sched = MessageSchedule(sched.log_sizes, simulate.gammas_for_epsilon(sizes, cfg.epsilon))
        sf = bounds.emssf_bound_loosened(params, states, sched, step, cfg.rounding)
        result.update(gammas=list(sched.gamma), epsilon_bound=sf.epsilon_bound,
                      expected_blocks=sf.expected_tau, expected_nats=sf.expected_nats,
                      tail_prob=sf.tail_prob)
        print(f"sf     eps <= {sf.epsilon_bound:.10g}   E[tau] = {sf.expected_tau:.6f} blocks", file=out)
    else:
        cache = bounds.DensityCache(params, step)
        if method in ("both", "thm1"):
            t1 = bounds.ems_bound_thm1(params, states, sched, step, cfg.rounding, cache)
            result["thm1"] = t1.as_dict()
            print(f"thm1   eps <= {t1.epsilon_bound:.10g}", file=out)
        if method in ("both", "prop1"):
            p1 = bounds.ems_bound_prop1(params, states, sched, step, cfg.rounding, cache)
            result["prop1"] = p1.as_dict()
            print(f"prop1  eps <= {p1.epsilon_bound:.10g}", file=out)
        if method == "both":
            diff = abs(t1.epsilon_bound - p1.epsilon_bound)
            result["difference"] = diff
            print(f"|thm1 - prop1| = {diff:.3g}", file=out)
    return result


# --- curves -----------------------------------------------------------------------------

_WORKER_CACHE: dict = {}


def _evaluate(task):
    cfg, name, log_m1 = task
    params = cfg.params
    key = (params, cfg.grid_step)
    cache = _WORKER_CACHE.get(key)
    if cache is None:
        cache = _WORKER_CACHE.setdefault(key, bounds.DensityCache(params, cfg.grid_step))
    try:
        return schemes.evaluate_scheme(name, params, float(log_m1), cfg.epsilon, beta=cfg.beta,
                                       horizon=cfg.horizon, p_min=cfg.p_min,
                                       max_expansions=cfg.max_expansions, step=cfg.grid_step,
                                       cache=cache if name in ("vld", "brq_csit") else None)
    except ValueError:
        return schemes.SchemeCurvePoint(name, float(log_m1), cfg.epsilon, math.nan, math.nan, math.nan,
                                        math.nan, math.nan, params.T, feasible=False)


def compute_curves(cfg: RunConfig) -> list:
    """All ``(scheme, ln M1)`` points, ordered by scheme then ``ln M1``."""
    tasks = [(cfg, name, lm) for name in cfg.scheme_list for lm in cfg.sweep()]
    if cfg.jobs > 1:
        # map preserves task order, so the output does not depend on scheduling
        with ProcessPoolExecutor(cfg.jobs) as pool:
            points = list(pool.map(_evaluate, tasks, chunksize=1))
    else:
        points = [_evaluate(t) for t in tasks]
    return points


def _fmt(x: float) -> str:
    return "NaN" if x is None or not math.isfinite(x) else f"{x:.10g}"


def _fmt_m1(log_m1: float) -> str:
    return f"{math.exp(log_m1):.10g}" if log_m1 < 709 else f"exp({log_m1:.10g})"


def curves_csv(cfg: RunConfig, points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerow(["capacity", "NaN", _fmt(cfg.epsilon), "NaN", "NaN", "NaN",
                _fmt(capacity(cfg.params)), "NaN", "NaN"])
    for p in points:
        # rows the solver could not produce carry NaN; horizon losses show in the last column
        w.writerow([p.scheme, _fmt_m1(p.log_m1), _fmt(p.epsilon_target), _fmt(p.avg_blocks),
                    _fmt(p.avg_blocklength), _fmt(p.avg_nats), _fmt(p.rate_bits),
                    _fmt(p.eps_certified), _fmt(p.truncation_gap)])
    return buf.getvalue()


_COLORS = {"fixed": "#777777", "vld": "#1f77b4", "vlsf": "#2ca02c", "brq_csit": "#d62728",
           "brq_sf": "#9467bd", "capacity": "#000000"}


def curves_svg(cfg: RunConfig, points, width: int = 640, height: int = 420) -> str:
    """Minimal rate versus average blocklength plot."""
    cap = capacity(cfg.params)
    good = [p for p in points if math.isfinite(p.rate_bits) and math.isfinite(p.avg_blocklength)]
    xmax = max([p.avg_blocklength for p in good], default=1.0) * 1.05
    ymax = cap * 1.1
    ml, mr, mt, mb = 60, 120, 20, 50
    pw, ph = width - ml - mr, height - mt - mb

    def xy(x, y):
        return ml + pw * x / xmax, mt + ph * (1 - y / ymax)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
             f'<text x="{ml + pw / 2}" y="{height - 10}" text-anchor="middle" font-size="12">'
             f'average blocklength (channel uses)</text>',
             f'<text x="15" y="{mt + ph / 2}" font-size="12" transform="rotate(-90 15 {mt + ph / 2})" '
             f'text-anchor="middle">rate (bits/use)</text>']
    for k in range(5):
        xv, yv = xmax * k / 4, ymax * k / 4
        x, _ = xy(xv, 0)
        _, y = xy(0, yv)
        parts.append(f'<text x="{x:.1f}" y="{mt + ph + 15}" font-size="10" text-anchor="middle">{xv:.0f}</text>')
        parts.append(f'<text x="{ml - 5}" y="{y:.1f}" font-size="10" text-anchor="end">{yv:.2f}</text>')
    x0, y0 = xy(0, cap)
    x1, _ = xy(xmax, cap)
    parts.append(f'<line x1="{x0:.1f}" y1="{y0:.1f}" x2="{x1:.1f}" y2="{y0:.1f}" '
                 f'stroke="black" stroke-dasharray="4 3"/>')
    names = ["capacity"] + [s for s in cfg.scheme_list]
    for name in cfg.scheme_list:
        pts = sorted((p.avg_blocklength, p.rate_bits) for p in good if p.scheme == name)
        if pts:
            coords = " ".join("{:.1f},{:.1f}".format(*xy(x, y)) for x, y in pts)
            parts.append(f'<polyline points="{coords}" fill="none" stroke="{_COLORS[name]}" stroke-width="1.5"/>')
    for i, name in enumerate(names):
        y = mt + 15 + 16 * i
        parts.append(f'<line x1="{width - mr + 10}" y1="{y - 4}" x2="{width - mr + 30}" y2="{y - 4}" '
                     f'stroke="{_COLORS[name]}" stroke-width="2"/>')
        parts.append(f'<text x="{width - mr + 35}" y="{y}" font-size="11">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_curves(cfg: RunConfig, out=None) -> str:
    out = sys.stdout if out is None else out
    points = compute_curves(cfg)
    text = curves_csv(cfg, points)
    if cfg.csv:
        Path(cfg.csv).write_text(text)
    else:
        out.write(text)
    if cfg.svg:
        Path(cfg.svg).write_text(curves_svg(cfg, points))
    if cfg.json:
        Path(cfg.json).write_text(json.dumps([p.as_dict() for p in points], indent=1, default=str))
    return text


# --- simulate ---------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, mode: str, sizes, states, trials: int, gamma=None, gammas=None,
                 out=None) -> simulate.TrialReport:
    out = sys.stdout if out is None else out
    params = cfg.params
    step = cfg.step or bounds.DEFAULT_STEP
    if mode == "ems":
        if math.prod(sizes) == 1:
            report = simulate.TrialReport("ems", trials, 0, 0.0, *simulate.clopper_pearson(0, trials),
                                          0.0, seed=cfg.seed)
        else:
            report = simulate.feinstein_trials(params, states, sizes, trials, cfg.seed, gamma, step=step)
    else:
        if gammas is None:
            gammas = simulate.gammas_for_epsilon(sizes, cfg.epsilon)
        report = simulate.emssf_trials(params, states, sizes, gammas, trials, cfg.seed, step)
    text = report.to_json()
    if cfg.json:
        Path(cfg.json).write_text(text + "\n")
    print(text, file=out)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: empirical {report.error_rate:.6g} (+3 sigma {3 * report.sigma:.2g}) "
          f"vs bound {report.bound_value:.6g}", file=out)
    return report


# --- entry point ------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError("choose a command: bounds, curves or simulate")
        cfg = load_config(ns.config, _overrides(ns))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError, OSError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_GUARD
    try:
        if ns.command == "bounds":
            res = cmd_bounds(cfg, ns.sizes, ns.states, ns.method, ns.gammas)
            print(json.dumps(res, indent=1, default=float))
            if cfg.json:
                Path(cfg.json).write_text(json.dumps(res, indent=1, default=float) + "\n")
        elif ns.command == "curves":
            cmd_curves(cfg)
        else:
            report = cmd_simulate(cfg, ns.mode, ns.sizes, ns.states, ns.trials, ns.gamma, ns.gammas)
            if not report.passed:
                return EXIT_VALIDATION
    except ValueError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_GUARD
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
