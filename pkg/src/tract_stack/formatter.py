"""Formatter: plain-text tables and JSON output for CLI commands."""

import json


def _table(headers, rows) -> str:
    widths = [
        max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
        for i, h in enumerate(headers)
    ]

    def _row(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    lines = [_row(headers), "  ".join("-" * w for w in widths)]
    for r in rows:
        lines.append(_row(r))
    return "\n".join(lines)


def format_history(records, as_json=False) -> str:
    """Per-epoch training history.

    Plain: Epoch | Train Loss | Val Dice | LR | FG Weight.
    JSON: list of record dicts.
    """
    if as_json:
        return json.dumps([r.as_record() for r in records], indent=2)

    if not records:
        return "No epochs recorded."

    rows = [
        (str(r.epoch), f"{r.train_loss:.5f}", f"{r.val_dice:.4f}", f"{r.lr:.6g}", f"{r.fg_weight:.3f}")
        for r in records
    ]
    return _table(("Epoch", "Train Loss", "Val Dice", "LR", "FG Weight"), rows)


def format_report(report, as_json=False) -> str:
    """Per-subject Dice scores followed by the mean ± std line."""
    if as_json:
        return json.dumps(
            {"entries": report.records(), "mean": report.mean, "std": report.std, "n": report.n},
            indent=2,
        )

    if not report.entries:
        return "No subjects evaluated."

    rows = [(e.subject, e.bundle, e.method, f"{e.dice:.4f}") for e in report.entries]
    table = _table(("Subject", "Bundle", "Method", "Dice"), rows)
    return f"{table}\n\nmean {report.mean:.4f} ± {report.std:.4f} (n={report.n})"


def format_comparison(reports, as_json=False) -> str:
    """One summary row per method."""
    if as_json:
        return json.dumps(
            [
                {"method": r.method, "bundle": r.bundle, "mean": r.mean, "std": r.std, "n": r.n}
                for r in reports
            ],
            indent=2,
        )

    if not reports:
        return "No methods evaluated."

    rows = [(r.method, r.bundle, f"{r.mean:.4f}", f"{r.std:.4f}", str(r.n)) for r in reports]
    return _table(("Method", "Bundle", "Mean Dice", "Std", "N"), rows)


def format_gradcheck(results, as_json=False) -> str:
    if as_json:
        return json.dumps([r.as_record() for r in results], indent=2)

    rows = [
        (r.op, f"{r.max_rel_error:.3e}", f"{r.threshold:.0e}", "ok" if r.passed else "FAIL")
        for r in results
    ]
    return _table(("Op", "Max Rel Error", "Threshold", "Status"), rows)
