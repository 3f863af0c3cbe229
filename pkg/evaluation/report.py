"""Run reports for experience extraction: a JSON document plus a Markdown summary."""

from __future__ import annotations

from pathlib import Path

from scripts.run_store import dump_json

REPORT_JSON = "report.json"
REPORT_MD = "report.md"


def _num(value, digits: int = 4) -> str:
    return "—" if value is None else f"{value:.{digits}f}"


def _pct(value) -> str:
    return "—" if value is None else f"{value * 100:.1f}%"


def _histogram(title: str, histogram: dict[str, int]) -> list[str]:
    lines = [f"**{title}**", "", "| Bin | Count |", "|---|---|"]
    lines += [f"| {label} | {count} |" for label, count in histogram.items()]
    return lines + [""]


def render_markdown(report: dict) -> str:
    """Render an extraction report as Markdown tables."""
    settings = report.get("settings") or {}
    lines = [
        "# Experience extraction report",
        "",
        "Settings: " + ", ".join(f"{k}={v}" for k, v in settings.items()),
        "",
        "| Epoch | Mean reward | Rollouts | Parsed | Pairs | Edits | Library | Version | "
        "Similarity | Bracket match |",
        "|" + "|".join(["---"] * 10) + "|",
    ]
    for row in report.get("epochs", []):
        stats = row.get("stats") or {}
        lines.append(
            "| {epoch} | {mean} | {rollouts} | {parsed} | {pairs} | {edits} | {size} | "
            "{version} | {sim} | {bracket} |".format(
                epoch=row["epoch"],
                mean=_num(row.get("mean_reward")),
                rollouts=row.get("rollouts", 0),
                parsed=row.get("parsed", 0),
                pairs=row.get("pairs", 0),
                edits=row.get("applied_edits", 0),
                size=row.get("library_size", 0),
                version=row.get("library_version", 0),
                sim=_num(stats.get("similarity_mean")),
                bracket=_pct(stats.get("bracket_match_rate")),
            )
        )

    skipped = [(row["epoch"], task) for row in report.get("epochs", [])
               for task in row.get("skipped_tasks", [])]
    if skipped:
        lines.append("")
        lines.append("**Skipped tasks:**")
        for epoch, task in skipped:
            lines.append(f"- epoch {epoch}: {task}")

    overall = report.get("stats")
    if overall:
        lines += ["", "## All rollouts", "",
                  f"Rollouts: {overall['rollouts']}, parsed: {overall['parsed']}, "
                  f"mean reward: {_num(overall['mean_reward'])}, "
                  f"bracket match: {_pct(overall['bracket_match_rate'])}, "
                  f"mean curve similarity: {_num(overall['similarity_mean'])}", ""]
        lines += _histogram("Reward histogram (bin lower edge, width 0.05)",
                            overall["reward_histogram"])
        lines += _histogram("Curve-count histogram", overall["curve_count_histogram"])
    return "\n".join(lines).rstrip("\n") + "\n"


def write_report(report: dict, out_dir: Path) -> tuple[Path, Path]:
    """Write report.json and report.md into out_dir; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / REPORT_JSON
    md_path = out_dir / REPORT_MD
    json_path.write_text(dump_json(report), encoding="utf-8")
    md_path.write_text(render_markdown(report), encoding="utf-8")
    return json_path, md_path
