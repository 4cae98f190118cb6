"""Command line front end: load a scenario, optimise mechanisms, write CSV and SVG results.

    drmech optimize --mechanism base,robust --starts 20 --out runs/a
    drmech sweep --mu 0.1,0.1666666666666667,0.3333333333333333,1 --out runs/sweep
    drmech simulate --mechanism broadcast --users 100000 --out runs/sim
    drmech report --out runs/sweep
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import re
import sys
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from drmech.mechanisms import dictatorial_bound
from drmech.microsim import analytic_fractions, binomial_z_scores, sample_population, simulate_plan
from drmech.model import Scenario, ScenarioError, validate_scenario
from drmech.optimizer import OptimizerOptions, mu_sweep

MECHANISMS = ("base", "optimized", "robust", "broadcast", "dictatorial")
SWEEP_MU = (1 / 10, 1 / 6, 1 / 3, 1.0)
COLUMNS = ("mechanism", "mu", "seed", "starts", "production_cost", "discounts_paid", "wasted_discounts",
           "total_cost", "savings_fraction", "dictatorial_savings_fraction", "wall_time_s")
SIM_COLUMNS = ("mechanism", "mu", "seed", "users", "production_cost", "discounts_paid", "wasted_discounts",
               "total_cost", "analytic_total_cost", "relative_error", "max_abs_z", "within_2sigma")


class ScenarioFileError(ValueError):
    """Scenario file could not be read; the message carries ``path:line`` context."""


def default_scenario_path() -> Path:
    return Path(str(resources.files("drmech") / "data" / "ontario24.scenario"))


def _line_of(text: str, key: str) -> int | None:
    match = re.search(rf'"{re.escape(key)}"\s*:', text)
    return text.count("\n", 0, match.start()) + 1 if match else None


def load_scenario(path) -> Scenario:
    """Parse and validate a JSON scenario file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioFileError(f"{path}: cannot read scenario file ({exc.strerror})") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioFileError(f"{path}:{exc.lineno}: malformed scenario file: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ScenarioFileError(f"{path}:1: scenario file must contain a JSON object")
    try:
        return validate_scenario(raw)
    except ScenarioError as exc:
        line = _line_of(text, exc.field)
        where = f"{path}:{line}" if line is not None else str(path)
        raise ScenarioFileError(f"{where}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ScenarioFileError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class RunManifest:
    scenario_path: Path
    mechanisms: tuple[str, ...]
    options: OptimizerOptions = field(default_factory=OptimizerOptions)
    # flexibility values to sweep; None keeps the scenario's own mu
    mu_values: tuple[float, ...] | None = None
    out_dir: Path = Path("results")
    users: int | None = None
    command: str = "optimize"

    def __post_init__(self):
        if not self.mechanisms:
            raise ValueError("no mechanisms selected")
        unknown = [m for m in self.mechanisms if m not in MECHANISMS]
        if unknown:
            raise ValueError(f"unknown mechanism(s): {', '.join(unknown)}; choose from {', '.join(MECHANISMS)}")
        if self.mu_values is not None:
            if not self.mu_values or any(not (math.isfinite(v) and v > 0) for v in self.mu_values):
                raise ValueError("sweep values must be finite and positive")
        if self.users is not None and self.users < 1:
            raise ValueError("users must be at least 1")

    @property
    def seed(self) -> int:
        return self.options.seed


def _fmt(value) -> str:
    return repr(float(value))


def _mu_label(scenario: Scenario) -> float:
    mu = scenario.discomfort.mu
    return float(mu[0]) if np.all(mu == mu[0]) else float("nan")


def _row(name, scenario, breakdown_or_none, starts, seed, dict_frac, wall, prod=None):
    if breakdown_or_none is None:
        total, discounts, wasted = prod, 0.0, 0.0
    else:
        prod = breakdown_or_none.production
        discounts = breakdown_or_none.discounts_paid
        wasted = breakdown_or_none.wasted_discounts
        total = prod + discounts
    return {
        "mechanism": name, "mu": _fmt(_mu_label(scenario)), "seed": str(seed), "starts": str(starts),
        "production_cost": _fmt(prod), "discounts_paid": _fmt(discounts), "wasted_discounts": _fmt(wasted),
        "total_cost": _fmt(total), "savings_fraction": _fmt(1.0 - total / scenario.baseline_cost),
        "dictatorial_savings_fraction": _fmt(dict_frac), "wall_time_s": f"{wall:.3f}",
    }


class _CsvSink:
    """Appends rows and flushes after each, so a failed run keeps what finished."""

    def __init__(self, path: Path, columns):
        self._fh = path.open("w", encoding="utf-8", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=columns, lineterminator="\n")
        self._writer.writeheader()
        self._fh.flush()

    def write(self, row):
        self._writer.writerow(row)
        self._fh.flush()

    def close(self):
        self._fh.close()


def run(manifest: RunManifest, log=sys.stderr) -> int:
    """Execute a manifest; returns the process exit status."""
    scenario = load_scenario(manifest.scenario_path)
    out = Path(manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    optimized_names = [m for m in manifest.mechanisms if m != "dictatorial"]

    sink = _CsvSink(out / "results.csv", COLUMNS)
    sim_sink = _CsvSink(out / "simulation.csv", SIM_COLUMNS) if manifest.users else None
    failures = 0
    try:
        for sc, results, error in mu_sweep(scenario, optimized_names, manifest.options, manifest.mu_values):
            mu_now = _mu_label(sc)
            t0 = time.perf_counter()
            _, dict_saving = dictatorial_bound(sc)
            dict_frac = dict_saving / sc.baseline_cost
            dict_wall = time.perf_counter() - t0
            if error is not None:
                failures += 1
                print(f"error: mu={mu_now!r}: {error}", file=log)
                for rec in error.per_start[:10]:
                    print(f"  start {rec.index} ({rec.kind}): {rec.status}", file=log)
            for name in manifest.mechanisms:
                if name == "dictatorial":
                    sink.write(_row(name, sc, None, 0, manifest.seed, dict_frac, dict_wall,
                                    prod=sc.baseline_cost - dict_saving))
                    continue
                if name not in results:
                    continue
                res = results[name]
                sink.write(_row(name, sc, res.best_breakdown, res.starts, manifest.seed, dict_frac, res.wall_time))
                print(f"mu={mu_now:.6g} {name:<10} savings {res.best_breakdown.savings_fraction:.4%} "
                      f"(dictatorial {dict_frac:.4%}) in {res.wall_time:.1f}s", file=log)
                if sim_sink is not None:
                    sim_sink.write(_simulate_row(sc, name, res.best_plan, res.best_breakdown, manifest))
    finally:
        sink.close()
        if sim_sink is not None:
            sim_sink.close()

    write_figures(out)
    return 1 if failures else 0


def _simulate_row(sc, name, plan, analytic, manifest):
    pop = sample_population(sc, manifest.users, manifest.seed)
    sim = simulate_plan(sc, plan, pop)
    z = np.abs(binomial_z_scores(sim, analytic_fractions(sc, plan)))
    z = z[~np.isnan(z)]
    b = sim.breakdown
    return {
        "mechanism": name, "mu": _fmt(_mu_label(sc)), "seed": str(manifest.seed), "users": str(manifest.users),
        "production_cost": _fmt(b.production), "discounts_paid": _fmt(b.discounts_paid),
        "wasted_discounts": _fmt(b.wasted_discounts), "total_cost": _fmt(b.total),
        "analytic_total_cost": _fmt(analytic.total), "relative_error": _fmt(b.total / analytic.total - 1.0),
        "max_abs_z": _fmt(z.max() if z.size else 0.0),
        "within_2sigma": _fmt(np.mean(z <= 2) if z.size else 1.0),
    }


# ---------------------------------------------------------------- figures

PALETTE = {"base": "#8da0cb", "robust": "#66c2a5", "broadcast": "#e78ac3", "optimized": "#fc8d62"}


def read_results(path) -> list[dict]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _svg(width, height, body, title):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">\n'
            f"<title>{title}</title>\n" + "\n".join(body) + "\n</svg>\n")


def _axis(body, x0, y0, plot_w, plot_h, top, label):
    body.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + plot_w}" y2="{y0}" stroke="black"/>')
    body.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y0 - plot_h}" stroke="black"/>')
    for k in range(6):
        v = top * k / 5
        y = y0 - plot_h * k / 5
        body.append(f'<line x1="{x0 - 4}" y1="{y:.1f}" x2="{x0}" y2="{y:.1f}" stroke="black"/>')
        body.append(f'<text x="{x0 - 6}" y="{y + 4:.1f}" text-anchor="end">{100 * v:.1f}%</text>')
    body.append(f'<text x="14" y="{y0 - plot_h / 2:.1f}" transform="rotate(-90 14 {y0 - plot_h / 2:.1f})" '
                f'text-anchor="middle">{label}</text>')


def _legend(body, names, x, y):
    for k, name in enumerate(names):
        body.append(f'<rect x="{x}" y="{y + 18 * k}" width="12" height="12" fill="{PALETTE.get(name, "#999")}"/>')
        body.append(f'<text x="{x + 18}" y="{y + 18 * k + 10}">{name}</text>')


def savings_svg(rows) -> str:
    """Grouped bars of savings fraction per mechanism and mu, dictatorial bound dashed."""
    mus = sorted({float(r["mu"]) for r in rows})
    names = [m for m in ("base", "robust", "broadcast", "optimized") if any(r["mechanism"] == m for r in rows)]
    value = {(r["mechanism"], float(r["mu"])): float(r["savings_fraction"]) for r in rows}
    bound = {float(r["mu"]): float(r["dictatorial_savings_fraction"]) for r in rows}
    top = max([0.01] + [v for v in value.values()] + list(bound.values())) * 1.1
    x0, y0, plot_h, group_w = 70, 330, 280, max(60, 22 * len(names) + 30)
    width = x0 + group_w * max(len(mus), 1) + 140
    body = []
    _axis(body, x0, y0, group_w * len(mus), plot_h, top, "savings (fraction of baseline cost)")
    bar_w = (group_w - 30) / max(len(names), 1)
    for g, mu in enumerate(mus):
        gx = x0 + 15 + g * group_w
        for k, name in enumerate(names):
            v = max(value.get((name, mu), 0.0), 0.0)
            h = plot_h * v / top
            body.append(f'<rect x="{gx + k * bar_w:.1f}" y="{y0 - h:.1f}" width="{bar_w - 2:.1f}" height="{h:.1f}" '
                        f'fill="{PALETTE[name]}"><title>{name} mu={mu!r}: {v!r}</title></rect>')
        yb = y0 - plot_h * bound[mu] / top
        body.append(f'<line x1="{gx - 5}" y1="{yb:.1f}" x2="{gx + group_w - 25}" y2="{yb:.1f}" stroke="black" '
                    f'stroke-dasharray="6,4"><title>dictatorial mu={mu!r}: {bound[mu]!r}</title></line>')
        body.append(f'<text x="{gx + (group_w - 30) / 2:.1f}" y="{y0 + 18}" text-anchor="middle">'
                    f'mu = {mu:.4g}</text>')
    _legend(body, names, width - 120, 40)
    body.append(f'<line x1="{width - 120}" y1="{40 + 18 * len(names) + 6}" x2="{width - 108}" '
                f'y2="{40 + 18 * len(names) + 6}" stroke="black" stroke-dasharray="3,2"/>')
    body.append(f'<text x="{width - 102}" y="{40 + 18 * len(names) + 10}">dictatorial</text>')
    return _svg(width, y0 + 40, body, "Savings per mechanism and flexibility")


def components_svg(rows, mu=None) -> str:
    """Per mechanism: production saving split into net saving, useful discounts and wasted discounts.

    Uses the mu closest to 1/3 unless ``mu`` is given.
    """
    mus = sorted({float(r["mu"]) for r in rows})
    if mu is None:
        mu = min(mus, key=lambda v: abs(v - 1 / 3)) if mus else 0.0
    picked = [r for r in rows if float(r["mu"]) == mu and r["mechanism"] != "dictatorial"]
    parts = []
    for r in picked:
        baseline = float(r["total_cost"]) / (1.0 - float(r["savings_fraction"]))
        prod_saving = (baseline - float(r["production_cost"])) / baseline
        wasted = float(r["wasted_discounts"]) / baseline
        useful = float(r["discounts_paid"]) / baseline - wasted
        parts.append((r["mechanism"], prod_saving, useful, wasted))
    top = max([0.01] + [p[1] for p in parts]) * 1.1
    x0, y0, plot_h, slot = 70, 330, 280, 80
    width = x0 + slot * max(len(parts), 1) + 170
    body = []
    _axis(body, x0, y0, slot * len(parts), plot_h, top, "fraction of baseline cost")
    colors = (("net saving", "#1b9e77"), ("useful discounts", "#7570b3"), ("wasted discounts", "#d95f02"))
    for k, (name, prod_saving, useful, wasted) in enumerate(parts):
        x = x0 + 15 + k * slot
        net = prod_saving - useful - wasted
        y = y0
        for (label, color), v in zip(colors, (net, useful, wasted)):
            h = plot_h * max(v, 0.0) / top
            body.append(f'<rect x="{x}" y="{y - h:.1f}" width="{slot - 30}" height="{h:.1f}" fill="{color}">'
                        f"<title>{name} {label}: {v!r}</title></rect>")
            y -= h
        body.append(f'<text x="{x + (slot - 30) / 2}" y="{y0 + 18}" text-anchor="middle">{name}</text>')
    for k, (label, color) in enumerate(colors):
        body.append(f'<rect x="{width - 150}" y="{40 + 18 * k}" width="12" height="12" fill="{color}"/>')
        body.append(f'<text x="{width - 132}" y="{40 + 18 * k + 10}">{label}</text>')
    body.append(f'<text x="{x0}" y="20">production saving breakdown at mu = {mu:.4g}</text>')
    return _svg(width, y0 + 40, body, "Cost components per mechanism")


def write_figures(out_dir) -> None:
    out = Path(out_dir)
    rows = read_results(out / "results.csv")
    (out / "savings.svg").write_text(savings_svg(rows), encoding="utf-8")
    (out / "components.svg").write_text(components_svg(rows), encoding="utf-8")


# ---------------------------------------------------------------- argument parsing


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _names(text: str) -> tuple[str, ...]:
    names = tuple(v.strip() for v in text.split(",") if v.strip())
    if names == ("all",):
        return MECHANISMS
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drmech", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("optimize", "optimise mechanisms on one scenario"),
                            ("simulate", "optimise, then replay each optimum with sampled users"),
                            ("sweep", "optimise across flexibility values mu")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--scenario", type=Path, default=None, help="scenario JSON (default: shipped ontario24)")
        p.add_argument("--mechanism", type=_names, default=("base", "robust", "broadcast", "optimized", "dictatorial"),
                       help="comma-separated subset of " + ",".join(MECHANISMS) + " (or 'all')")
        p.add_argument("--starts", type=int, default=OptimizerOptions.starts)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--mu", type=_floats, default=None,
                       help="comma-separated flexibility values" + (" (default 1/10,1/6,1/3,1)" if name == "sweep" else ""))
        p.add_argument("--out", type=Path, default=Path("results"))
        p.add_argument("--smoothing", type=_floats, default=OptimizerOptions.smoothing,
                       help="broadcast smoothing temperatures as fractions of the flat rate")
        p.add_argument("--max-iters", type=int, default=OptimizerOptions.max_iters)
        if name == "simulate":
            p.add_argument("--users", type=int, default=100_000)
    p = sub.add_parser("report", help="redraw figures from an existing results.csv")
    p.add_argument("--out", type=Path, default=Path("results"))
    return parser


def manifest_from_args(args) -> RunManifest:
    mu_values = args.mu
    if mu_values is None and args.command == "sweep":
        mu_values = SWEEP_MU
    options = replace(OptimizerOptions(), starts=args.starts, seed=args.seed, smoothing=tuple(args.smoothing),
                      max_iters=args.max_iters)
    return RunManifest(scenario_path=args.scenario or default_scenario_path(), mechanisms=tuple(args.mechanism),
                       options=options, mu_values=mu_values, out_dir=args.out,
                       users=getattr(args, "users", None), command=args.command)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            write_figures(args.out)
            return 0
        return run(manifest_from_args(args))
    except (ScenarioFileError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
