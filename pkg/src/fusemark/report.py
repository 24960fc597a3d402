"""Static report: markdown summary, CSV tables and PNG trajectory plots.

Output is a pure function of the bundle, so rendering twice yields
byte-identical files.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from fusemark.attacks import DETECT_CLASSES, AttackReport  # noqa: E402
from fusemark.pipeline import TABLE_ATTACKS, ResultsBundle  # noqa: E402

ATTACK_TITLES = {"finetune": "Fine-tuning", "transfer": "Transfer learning", "prune": "Pruning",
                 "overwrite": "Overwriting"}
STRENGTH_LABELS = {"finetune": "iteration", "transfer": "iteration", "prune": "pruning ratio",
                   "overwrite": "epoch"}
SUMMARY_COLUMNS = ["run_id", "dataset", "arch", "mode", "effectiveness", "fidelity_watermarked", "fidelity_clean",
                   "fidelity_delta", "finetune", "transfer", "prune", "overwrite"]
PRUNE_SUMMARY_RATIO = 0.8


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def attack_summary(attack_id: str, report: AttackReport) -> float:
    """Single robustness number per attack: final ASR, or ASR at ratio 0.8 for pruning."""
    if attack_id == "prune":
        for pt in report.trajectory:
            if abs(pt.strength - PRUNE_SUMMARY_RATIO) < 1e-9:
                return pt.asr
    return report.final.asr


def summary_row(bundle: ResultsBundle) -> dict:
    eff, fid = bundle.effectiveness or {}, bundle.fidelity or {}
    row = {"run_id": bundle.run_id, "dataset": bundle.meta.get("dataset"), "arch": bundle.meta.get("arch"),
           "mode": (bundle.meta.get("key") or {}).get("mode"), "effectiveness": eff.get("asr"),
           "fidelity_watermarked": fid.get("watermarked"), "fidelity_clean": fid.get("clean"),
           "fidelity_delta": fid.get("delta")}
    for a in TABLE_ATTACKS:
        row[a] = attack_summary(a, bundle.robustness[a]) if a in bundle.robustness else None
    return row


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([_fmt(v) if not isinstance(v, str) else v for v in r])
    return buf.getvalue()


def trajectory_table(report: AttackReport) -> tuple[list[str], list[list]]:
    extras = sorted({k for pt in report.trajectory for k in pt.extra})
    header = ["strength", "benign_accuracy", "asr", *extras]
    rows = [[pt.strength, pt.benign_accuracy, pt.asr, *[pt.extra.get(k) for k in extras]] for pt in report.trajectory]
    return header, rows


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=100, format="png", metadata={"Software": None})
    plt.close(fig)


def plot_trajectory(attack_id: str, report: AttackReport, path: Path) -> None:
    x = [pt.strength for pt in report.trajectory]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(x, [pt.asr for pt in report.trajectory], "o-", label="authentication success rate")
    ax.plot(x, [pt.benign_accuracy for pt in report.trajectory], "s--", label="benign accuracy")
    if attack_id == "overwrite":
        ax.plot(x, [pt.extra.get("new_asr") for pt in report.trajectory], "^:", label="new watermark asr")
    if attack_id == "transfer" and any(pt.extra.get("target_accuracy") is not None for pt in report.trajectory):
        ax.plot(x, [pt.extra.get("target_accuracy") for pt in report.trajectory], "d-.", label="target-task accuracy")
    ax.set_xlabel(STRENGTH_LABELS.get(attack_id, "strength"))
    ax.set_ylabel("rate")
    ax.set_ylim(0, 1.05)
    ax.set_title(ATTACK_TITLES.get(attack_id, attack_id))
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_confusion(det: dict, path: Path) -> None:
    counts = det["counts"]
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    ax.imshow(counts, cmap="Blues")
    for i, row in enumerate(counts):
        for j, v in enumerate(row):
            ax.text(j, i, str(v), ha="center", va="center", fontsize=9)
    ticks = range(len(DETECT_CLASSES))
    ax.set_xticks(ticks, DETECT_CLASSES, rotation=20, fontsize=8)
    ax.set_yticks(ticks, DETECT_CLASSES, fontsize=8)
    ax.set_xlabel("ground truth")
    ax.set_ylabel("prediction")
    fig.tight_layout()
    _save(fig, path)


def render_report(bundle: ResultsBundle, out_dir: str | Path) -> dict[str, Path]:
    """Write report.md, results.csv, per-attack CSVs and plots; return the written paths."""
    out = Path(out_dir)
    (out / "attacks").mkdir(parents=True, exist_ok=True)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    missing = bundle.missing_sections()

    row = summary_row(bundle)
    written["results.csv"] = out / "results.csv"
    written["results.csv"].write_text(_csv_text(SUMMARY_COLUMNS + ["partial"],
                                                [[row[c] for c in SUMMARY_COLUMNS] + [bool(missing)]]))

    lines = [f"# Watermark run `{bundle.run_id}`", ""]
    if missing:
        lines += ["**PARTIAL REPORT**: missing " + ", ".join(missing), ""]
    meta = bundle.meta
    if meta:
        key = meta.get("key") or {}
        lines += [f"- dataset: {meta.get('dataset')}, architecture: {meta.get('arch')}, master seed: {meta.get('seed')}",
                  f"- key: {key.get('mode')} fusion of classes {key.get('source_class_a')} and "
                  f"{key.get('source_class_b')} labelled {key.get('target_class')}, {key.get('count')} triggers", ""]
    lines += ["## Summary", "",
              "| Effectiveness | Fidelity (wm / clean / delta) | Fine-tuning | Transfer learning | Pruning @0.8 | Overwriting |",
              "|---|---|---|---|---|---|",
              f"| {_fmt(row['effectiveness'])} | {_fmt(row['fidelity_watermarked'])} / {_fmt(row['fidelity_clean'])} / "
              f"{_fmt(row['fidelity_delta'])} | {_fmt(row['finetune'])} | {_fmt(row['transfer'])} | "
              f"{_fmt(row['prune'])} | {_fmt(row['overwrite'])} |", ""]
    if bundle.effectiveness:
        eff = bundle.effectiveness
        lines += [f"Verification: {eff.get('n_matched')}/{eff.get('n_queried')} triggers matched, threshold "
                  f"{_fmt(eff.get('threshold'))}, decision {_fmt(eff.get('decision'))}, chance-pass bound "
                  f"{eff.get('fp_bound'):.3e}."
                  + (f" Clean-model ASR on the same key: {_fmt(eff['clean_model_asr'])}."
                     if eff.get("clean_model_asr") is not None else ""), ""]

    for attack_id in sorted(bundle.robustness):
        rep = bundle.robustness[attack_id]
        header, rows = trajectory_table(rep)
        csv_path = out / "attacks" / f"{attack_id}.csv"
        csv_path.write_text(_csv_text(header, rows))
        plot_path = out / "plots" / f"{attack_id}.png"
        plot_trajectory(attack_id, rep, plot_path)
        written[f"attacks/{attack_id}.csv"] = csv_path
        written[f"plots/{attack_id}.png"] = plot_path
        lines += [f"## {ATTACK_TITLES.get(attack_id, attack_id)}", "", f"![{attack_id}](plots/{attack_id}.png)", "",
                  "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(_fmt(v) for v in r) + " |" for r in rows]
        if rep.flags:
            lines += ["", "Flags: " + ", ".join(f"{k}={v}" for k, v in sorted(rep.flags.items()))]
        lines.append("")

    if bundle.detectability:
        det = bundle.detectability
        plot_path = out / "plots" / "detect.png"
        plot_confusion(det, plot_path)
        written["plots/detect.png"] = plot_path
        header = ["prediction \\ truth", *DETECT_CLASSES]
        rows = [[DETECT_CLASSES[i], *r] for i, r in enumerate(det["counts"])]
        csv_path = out / "attacks" / "detect.csv"
        csv_path.write_text(_csv_text(header, rows))
        written["attacks/detect.csv"] = csv_path
        lines += ["## Trigger detectability", "", "![detect](plots/detect.png)", "",
                  "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(str(v) for v in r) + " |" for r in rows]
        lines += ["", "Recall: " + ", ".join(f"{c} {det['recall'][c]:.3f}" for c in DETECT_CLASSES), ""]

    written["report.md"] = out / "report.md"
    written["report.md"].write_text("\n".join(lines))
    return written
