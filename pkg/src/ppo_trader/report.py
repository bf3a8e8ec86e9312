"""Profit rates, comparison tables and trade plots from episode traces."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence
from xml.etree import ElementTree

import matplotlib
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure

from .env import BUY, SELL, read_trace, write_trace

logger = logging.getLogger(__name__)

COMPARISON_COLUMNS = ("strategy", "profit_rate_percent")
PRICE_COLOR = "0.25"
NETWORTH_COLOR = "tab:green"
BUY_COLOR = "green"
SELL_COLOR = "red"
SVG_NS = "{http://www.w3.org/2000/svg}"
SVG_RC = {"svg.hashsalt": "ppo-trader", "svg.fonttype": "path", "path.simplify": False}


class ReportError(ValueError):
    pass


def profit_rate(rows: Sequence[Mapping], initial_cash: float) -> float:
    if not rows:
        raise ReportError("empty trace")
    final = float(rows[-1]["net_worth"])
    return (final - initial_cash) / initial_cash * 100.0


def replay_net_worth(rows: Sequence[Mapping]) -> list[float]:
    """Net worth recomputed from the cash, holdings and close columns."""
    return [float(r["cash"]) + float(r["holdings"]) * float(r["close"]) for r in rows]


@dataclass(frozen=True)
class ComparisonRow:
    strategy: str
    profit_rate: float


def build_comparison(rates: Mapping[str, float] | Sequence[tuple[str, float]]) -> list[ComparisonRow]:
    """Rows sorted by profit rate, highest first; ties ordered by name."""
    items = list(rates.items()) if isinstance(rates, Mapping) else list(rates)
    if not items:
        raise ReportError("comparison needs at least one trace")
    names = [n for n, _ in items]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ReportError(f"duplicate strategy names: {', '.join(dupes)}")
    rows = [ComparisonRow(n, float(v)) for n, v in items]
    return sorted(rows, key=lambda r: (-r.profit_rate, r.strategy))


def write_comparison(rows: Sequence[ComparisonRow], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARISON_COLUMNS)
        for r in rows:
            writer.writerow([r.strategy, f"{r.profit_rate:.2f}"])


def read_comparison(path: str | Path) -> list[ComparisonRow]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [ComparisonRow(r["strategy"], float(r["profit_rate_percent"])) for r in csv.DictReader(fh)]


def render_comparison(rows: Sequence[ComparisonRow]) -> str:
    """Fixed-width text table, percentages with two decimals."""
    header = ("Strategy", "Profit rate (%)")
    cells = [(r.strategy, f"{r.profit_rate:.2f}") for r in rows]
    w0 = max(len(header[0]), *(len(c[0]) for c in cells))
    w1 = max(len(header[1]), *(len(c[1]) for c in cells))
    lines = [f"{header[0]:<{w0}}  {header[1]:>{w1}}", f"{'-' * w0}  {'-' * w1}"]
    lines += [f"{a:<{w0}}  {b:>{w1}}" for a, b in cells]
    return "\n".join(lines) + "\n"


def parse_rendered(text: str) -> list[ComparisonRow]:
    rows = []
    for line in text.splitlines()[2:]:
        if line.strip():
            name, value = line.rsplit(None, 1)
            rows.append(ComparisonRow(name.strip(), float(value)))
    return rows


# ---------------------------------------------------------------------------
# Plot
# ---------------------------------------------------------------------------

def trade_figure(rows: Sequence[Mapping], title: str = "") -> Figure:
    steps = [int(r["step"]) for r in rows]
    close = [float(r["close"]) for r in rows]
    worth = [float(r["net_worth"]) for r in rows]
    fig = Figure(figsize=(8, 5))
    FigureCanvasSVG(fig)
    ax_p, ax_w = fig.subplots(2, 1, sharex=True)
    ax_p.plot(steps, close, color=PRICE_COLOR, lw=1.0, label="close", gid="price")
    for kind, color, marker in ((BUY, BUY_COLOR, "^"), (SELL, SELL_COLOR, "v")):
        pts = [(s, c) for s, c, r in zip(steps, close, rows)
               if r["action_kind"] == kind and float(r["quantity"]) > 0]
        ax_p.plot([p[0] for p in pts], [p[1] for p in pts], ls="none", marker=marker, ms=6,
                  color=color, label=kind, gid=f"{kind}-markers")
    ax_p.set_ylabel("Price (USD)")
    ax_p.legend(loc="upper left", frameon=False, fontsize=8)
    ax_w.plot(steps, worth, color=NETWORTH_COLOR, lw=1.2, gid="net-worth")
    ax_w.set_ylabel("Net worth (USD)")
    ax_w.set_xlabel("Step")
    if title:
        ax_p.set_title(title)
    fig.tight_layout()
    return fig


def render_trade_plot(rows: Sequence[Mapping], path: str | Path, title: str = "") -> Path:
    """Price with buy/sell markers above the net-worth curve, as SVG."""
    path = Path(path)
    fig = trade_figure(rows, title)
    buf = io.BytesIO()
    with matplotlib.rc_context(SVG_RC):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    try:
        path.write_bytes(buf.getvalue())
    except OSError as exc:
        raise ReportError(f"cannot write plot to {path}: {exc}") from exc
    return path


def count_markers(svg: str, kind: str) -> int:
    """Marker glyphs inside the ``<kind>-markers`` group of a rendered plot."""
    root = ElementTree.fromstring(svg)
    for group in root.iter(f"{SVG_NS}g"):
        if group.get("id") == f"{kind}-markers":
            return sum(1 for _ in group.iter(f"{SVG_NS}use"))
    return 0


# ---------------------------------------------------------------------------
# Run report
# ---------------------------------------------------------------------------

def trace_filename(name: str, seed: int) -> str:
    return f"{name}_{seed}.csv"


def split_trace_filename(filename: str) -> tuple[str, int]:
    stem = Path(filename).stem
    name, _, seed = stem.rpartition("_")
    if not name or not seed.isdigit():
        raise ReportError(f"trace file {filename!r} is not named <strategy>_<seed>.csv")
    return name, int(seed)


def save_traces(traces: Mapping[str, tuple[Sequence[Mapping], float]], directory: str | Path,
                seed: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, (rows, cash) in traces.items():
        write_trace(rows, directory / trace_filename(name, seed), cash)


def load_traces(directory: str | Path) -> tuple[dict[str, tuple[list[dict], float]], list[int]]:
    traces, seeds = {}, set()
    for path in sorted(Path(directory).glob("*.csv")):
        name, seed = split_trace_filename(path.name)
        if name in traces:
            raise ReportError(f"several traces for strategy {name!r} in {directory}")
        traces[name] = read_trace(path)
        seeds.add(seed)
    return traces, sorted(seeds)


def _training_summary(log_path: Path) -> list[str]:
    with log_path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return ["training log is empty"]
    first, last = rows[0], rows[-1]
    return [
        f"iterations: {last['iteration']}",
        f"mean reward: first {float(first['mean_reward']):.4f}, last {float(last['mean_reward']):.4f}",
    ]


def summarize_run(run_dir: str | Path, traces: Mapping[str, tuple[Sequence[Mapping], float]],
                  training_log: str | Path | None = None, config_text: str | None = None,
                  seeds: Sequence[int] = ()) -> list[str]:
    """Write ``comparison.csv``, one SVG per trace and ``report.txt``.

    Missing inputs are listed in the report instead of aborting; the list is
    also returned.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    missing: list[str] = []

    rates = {}
    for name, (rows, cash) in traces.items():
        if not rows:
            missing.append(f"trace {name} (empty)")
            continue
        rates[name] = profit_rate(rows, cash)
    table = build_comparison(rates) if rates else []
    if table:
        write_comparison(table, run_dir / "comparison.csv")
    else:
        missing.append("strategy traces")

    plots = []
    for name in sorted(rates):
        plots.append(render_trade_plot(traces[name][0], run_dir / f"{name}.svg", title=name).name)

    log_lines: list[str] = []
    if training_log is None or not Path(training_log).is_file():
        missing.append("training log")
    else:
        log_lines = _training_summary(Path(training_log))

    out = ["Backtest report", "===============", ""]
    out.append("Seeds: " + (", ".join(str(s) for s in seeds) if seeds else "unknown"))
    out.append("")
    out.append("Profit rates on the test segment")
    out.append("")
    out.append(render_comparison(table).rstrip("\n") if table else "(no traces)")
    out.append("")
    out.append("Plots: " + (", ".join(plots) if plots else "none"))
    out.append("")
    out.append("Agent training")
    out += log_lines or ["(training log missing)"]
    out.append("")
    if missing:
        out.append("Missing inputs:")
        out += [f"  - {m}" for m in missing]
        out.append("")
    if config_text is not None:
        out.append("Resolved configuration")
        out.append("")
        out.append(config_text.rstrip("\n"))
        out.append("")
    (run_dir / "report.txt").write_text("\n".join(out), encoding="utf-8")
    for m in missing:
        logger.warning("report input missing: %s", m)
    return missing
