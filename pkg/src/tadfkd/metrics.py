"""Run records, peak/converging accuracy, cross-teacher reports and diversity."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import BatchTooSmall, EmptyDataset, KTooLarge, MissingGroup

REPORT_DECIMALS = 6
_PAIR_BLOCK = 128  # rows per block of the pairwise-distance computation


def accuracy(model, x, y) -> float:
    """Fraction of argmax-correct eval-mode predictions (ties -> lowest index)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptyDataset("cannot score an empty dataset")
    pred = np.argmax(model.predict(x), axis=1)
    return float(np.mean(pred == y))


def _nan_to_none(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


@dataclass
class RunRecord:
    accuracies: list
    initial_accuracy: float = float("nan")
    seed: int = 0
    fingerprint: str = ""
    config: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    feature_spread: float = float("nan")
    class_entropy: float = float("nan")
    labels: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            "labels": self.labels,
            "initial_accuracy": self.initial_accuracy,
            "epochs": [{k: _nan_to_none(v) for k, v in e.items()} for e in self.epochs],
            "diversity": {
                "feature_spread": _nan_to_none(self.feature_spread),
                "class_entropy": _nan_to_none(self.class_entropy),
            },
        }

    def to_json(self) -> str:
        doc = self.summary()
        doc["config"] = self.config
        doc["accuracies"] = self.accuracies
        doc["iterations"] = [
            {k: _nan_to_none(v) for k, v in vars(r).items()} if not isinstance(r, dict) else r for r in self.iterations
        ]
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def selection_rates(self) -> list:
        return [e["mean_selection_rate"] for e in self.epochs]

    @classmethod
    def from_dir(cls, path) -> "RunRecord":
        """Rebuild a record from a run directory written by the distillation loop."""
        path = Path(path)
        cfg = json.loads((path / "config.json").read_text())
        summ = json.loads((path / "summary.json").read_text())
        with open(path / "telemetry.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        div = summ.get("diversity", {})
        return cls(
            accuracies=[e["student_accuracy"] for e in summ["epochs"]],
            initial_accuracy=summ["initial_accuracy"],
            seed=cfg["seed"],
            fingerprint=cfg["fingerprint"],
            config=cfg["config"],
            epochs=summ["epochs"],
            iterations=rows,
            feature_spread=div.get("feature_spread") or float("nan"),
            class_entropy=div.get("class_entropy") if div.get("class_entropy") is not None else float("nan"),
            labels=cfg.get("labels", {}),
        )


def _accs(run) -> list:
    return list(run.accuracies if isinstance(run, RunRecord) else run)


def acc_max(run) -> float:
    accs = _accs(run)
    if not accs:
        raise EmptyDataset("run has no recorded epochs")
    return float(max(accs))


def acc_last_k(run, k: int) -> float:
    """Mean accuracy over the final ``k`` epochs."""
    accs = _accs(run)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(accs):
        raise KTooLarge(f"k={k} exceeds the {len(accs)} recorded epochs")
    return math.fsum(accs[-k:]) / k


def _mean_sd(values) -> tuple[float, float]:
    values = sorted(values)
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var)


def _r(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else round(float(v), REPORT_DECIMALS)


@dataclass
class RobustnessReport:
    k: int
    rows: list  # one dict per (teacher, method)
    ranking: list  # methods ordered by mean converging accuracy

    def to_dict(self) -> dict:
        return {"k": self.k, "rows": self.rows, "ranking": self.ranking}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        cols = [
            ("teacher", "teacher"),
            ("method", "method"),
            ("runs", "runs"),
            ("teacher_acc", "teacher_acc"),
            ("acc_max", "acc_max"),
            ("acc_max_mean", "acc_max_mean"),
            ("acc_last_mean", f"acc_last[{self.k}]"),
            ("acc_last_sd", "sd"),
            ("acc_last_median", "median"),
            ("teacher_gap", "teacher_gap"),
            ("stability_gap", "stability_gap"),
        ]
        lines = []
        for method in self.ranking:
            rows = [r for r in self.rows if r["method"] == method]
            table = [[h for _, h in cols]] + [["-" if r[c] is None else str(r[c]) for c, _ in cols] for r in rows]
            widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
            lines.append(f"== {method} ==")
            for row in table:
                lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)).rstrip())
            lines.append("")
        lines.append("ranking (mean converging accuracy): " + " > ".join(self.ranking))
        return "\n".join(lines) + "\n"


def robustness_report(runs: Iterable[RunRecord], k: int, teachers=None, methods=None) -> RobustnessReport:
    """Aggregate runs grouped by ``labels['teacher']`` and ``labels['arm']``.

    When ``teachers``/``methods`` are given every combination must be present.
    """
    groups: dict = defaultdict(list)
    seen = set()
    for run in runs:
        teacher = str(run.labels.get("teacher", "teacher"))
        method = str(run.labels.get("arm", "method"))
        key = (teacher, method, run.seed)
        if key in seen:
            raise ValueError(f"duplicate run for teacher={teacher} method={method} seed={run.seed}")
        seen.add(key)
        groups[(teacher, method)].append(run)
    if teachers is not None and methods is not None:
        for t in teachers:
            for m in methods:
                if (str(t), str(m)) not in groups:
                    raise MissingGroup(f"no runs for teacher={t} method={m}")
    if not groups:
        raise MissingGroup("no runs to report")

    rows = []
    for (teacher, method), group in sorted(groups.items()):
        maxes = [acc_max(r) for r in group]
        lasts = [acc_last_k(r, k) for r in group]
        last_mean, last_sd = _mean_sd(lasts)
        peak = max(maxes)
        t_acc = group[0].labels.get("teacher_accuracy")
        rows.append(
            {
                "teacher": teacher,
                "method": method,
                "runs": len(group),
                "seeds": sorted(r.seed for r in group),
                "teacher_acc": _r(t_acc),
                "acc_max": _r(peak),
                "acc_max_mean": _r(_mean_sd(maxes)[0]),
                "acc_last_mean": _r(last_mean),
                "acc_last_sd": _r(last_sd),
                "acc_last_median": _r(float(np.median(sorted(lasts)))),
                "teacher_gap": _r(t_acc - peak) if t_acc is not None else None,
                "stability_gap": _r(peak - last_mean),
            }
        )
    by_method = defaultdict(list)
    for r in rows:
        by_method[r["method"]].append(r["acc_last_mean"])
    ranking = sorted(by_method, key=lambda m: (-math.fsum(by_method[m]) / len(by_method[m]), m))
    return RobustnessReport(k, rows, ranking)


def diversity_score(samples, teacher) -> tuple[float, float]:
    """(mean pairwise distance of teacher penultimate features, entropy of predicted-class histogram)."""
    samples = np.asarray(getattr(samples, "data", samples), dtype=np.float64)
    n = samples.shape[0]
    if n < 2:
        raise BatchTooSmall("diversity needs at least two samples")
    feats = teacher.penultimate(samples)
    total = 0.0
    for start in range(0, n - 1, _PAIR_BLOCK):
        rows = feats[start : start + _PAIR_BLOCK]
        diff = rows[:, None, :] - feats[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        # pairs (i, j) with j > i only
        upper = np.arange(n)[None, :] > np.arange(start, start + len(rows))[:, None]
        total += math.fsum(dist[upper])
    spread = total / (n * (n - 1) / 2)
    pred = np.argmax(teacher.predict(samples), axis=1)
    counts = np.bincount(pred, minlength=teacher.d_out).astype(np.float64)
    p = counts[counts > 0] / n
    entropy = float(-(p * np.log(p)).sum()) + 0.0
    return spread, entropy


# ---------------------------------------------------------------------------
# plots


def svg_line_plot(series: dict, title: str = "", width: int = 480, height: int = 320) -> str:
    """Plain SVG line chart; ``series`` maps a name to a list of accuracies per epoch."""
    pad_l, pad_r, pad_t, pad_b = 50, 120, 30, 40
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b
    n = max((len(v) for v in series.values()), default=1)
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]

    def px(i):
        return pad_l + (pw * i / max(1, n - 1))

    def py(a):
        return pad_t + ph * (1.0 - a)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>',
        f'<text x="{pad_l + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="11">epoch</text>',
        f'<text x="14" y="{pad_t + ph / 2:.1f}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {pad_t + ph / 2:.1f})">accuracy</text>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        out.append(
            f'<text x="{pad_l - 6}" y="{py(tick) + 4:.1f}" text-anchor="end" font-size="10">{tick:.2f}</text>'
        )
    for j, (name, values) in enumerate(sorted(series.items())):
        color = palette[j % len(palette)]
        pts = " ".join(f"{px(i):.2f},{py(v):.2f}" for i, v in enumerate(values))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = pad_t + 14 * j + 6
        out.append(f'<line x1="{pad_l + pw + 10}" y1="{ly}" x2="{pad_l + pw + 25}" y2="{ly}" stroke="{color}"/>')
        out.append(f'<text x="{pad_l + pw + 30}" y="{ly + 4}" font-size="10">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def mean_curve(runs) -> list:
    runs = list(runs)
    n = min(len(r.accuracies) for r in runs)
    return [math.fsum(sorted(r.accuracies[i] for r in runs)) / len(runs) for i in range(n)]


def write_report(runs: list, k: int, out_dir, teachers=None, methods=None) -> RobustnessReport:
    """Write report.txt, report.json and per-arm SVG accuracy plots."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = robustness_report(runs, k, teachers, methods)
    (out_dir / "report.txt").write_text(report.to_text())
    (out_dir / "report.json").write_text(report.to_json())
    by_arm = defaultdict(lambda: defaultdict(list))
    for r in runs:
        by_arm[r.labels.get("arm", "method")][r.labels.get("teacher", "teacher")].append(r)
    overall = {}
    for arm, by_teacher in sorted(by_arm.items()):
        series = {t: mean_curve(rs) for t, rs in by_teacher.items() if all(r.accuracies for r in rs)}
        (out_dir / f"{arm}_accuracy.svg").write_text(svg_line_plot(series, f"{arm}: student accuracy"))
        flat = [r for rs in by_teacher.values() for r in rs if r.accuracies]
        if flat:
            overall[arm] = mean_curve(flat)
    (out_dir / "accuracy.svg").write_text(svg_line_plot(overall, "student accuracy by method"))
    return report
