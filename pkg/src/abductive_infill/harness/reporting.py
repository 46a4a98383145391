"""Table-style metric reports and failure-case dumps."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from ..errors import InputError
from ..metrics import METRIC_NAMES, SIMPLIFIED_NOTE, sentence_scores

COLUMNS = ("Bleu-4", "METEOR*", "ROUGE-L", "Cider", "Embed*")
FAILURE_CATEGORIES = ("causal-chain", "negation", "open-domain over-generation")


def report_dict(rows: Sequence[dict]) -> dict:
    return {"rows": list(rows), "columns": list(METRIC_NAMES), "notes": [SIMPLIFIED_NOTE]}


def markdown_table(rows: Sequence[dict]) -> str:
    lines = [
        "| Model | " + " | ".join(COLUMNS) + " |",
        "|---|" + "---:|" * len(COLUMNS),
    ]
    for row in rows:
        vals = " | ".join(f"{row[m]:.2f}" for m in METRIC_NAMES)
        lines.append(f"| {row['name']} | {vals} |")
    lines.append("")
    lines.append(f"\\* {SIMPLIFIED_NOTE} ROUGE-L is LCS F1 (beta = 1); Cider is CIDEr-D x10.")
    return "\n".join(lines) + "\n"


def write_report(rows: Sequence[dict], out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js = out_dir / "report.json"
    js.write_text(json.dumps(report_dict(rows), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    md = out_dir / "report.md"
    md.write_text(markdown_table(rows), encoding="utf-8")
    return js, md


def load_report_rows(source: str | Path) -> list[dict]:
    path = Path(source)
    if path.is_dir():
        path = path / "report.json"
    if not path.exists():
        raise InputError(f"no report.json at {source}")
    rows = json.loads(path.read_text(encoding="utf-8"))["rows"]
    if len(rows) == 1 and Path(source).is_dir():
        rows = [{**rows[0], "name": Path(source).name}]
    return rows


def merge_reports(sources: Sequence[str | Path]) -> list[dict]:
    rows = []
    for src in sources:
        rows.extend(load_report_rows(src))
    return rows


def failure_report(
    predictions: dict[str, Sequence[str]],
    instances,
    n: int,
    metric: str = "rouge_l",
    encoder=None,
) -> str:
    """Markdown blocks for the `n` lowest-scoring instances.

    Instances are ranked by the first model's per-instance `metric`, ascending
    (corpus order breaks ties). Each block ends with an empty ``category:`` line
    for manual tagging.
    """
    if not predictions:
        raise InputError("need predictions from at least one model")
    names = list(predictions)
    for name in names:
        if len(predictions[name]) != len(instances):
            raise InputError(f"{name}: {len(predictions[name])} predictions for {len(instances)} instances")
    refs = [list(inst.gold_hyps) or [""] for inst in instances]
    scores = sentence_scores(metric, list(predictions[names[0]]), refs, encoder)
    order = sorted(range(len(instances)), key=lambda i: (scores[i], i))[: max(0, min(n, len(instances)))]

    out = [
        f"# Failure cases (lowest {metric} of {names[0]})",
        "",
        "Tag each case with one of: " + ", ".join(FAILURE_CATEGORIES) + ".",
        "",
    ]
    for rank, i in enumerate(order, start=1):
        inst = instances[i]
        out += [
            f"## Case {rank}: {inst.id} ({metric} = {scores[i]:.2f})",
            "",
            "| Past Observation | Future Observation |",
            "|---|---|",
            f"| {inst.obs1} | {inst.obs2} |",
            "",
            "**Answer Hypothesis**",
            "",
            "; ".join(inst.gold_hyps) or "(none)",
            "",
        ]
        for name in names:
            out += [f"**{name}**", "", predictions[name][i] or "(empty)", ""]
        out += ["category:", ""]
    return "\n".join(out)
