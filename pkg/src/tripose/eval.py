"""Nearest-neighbour classification rate and pose-error metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .imaging import MODALITIES, ConfigurationError, network_input

THRESHOLDS_DEG = (10.0, 20.0, 40.0)
CURVE_COLUMNS = ("epoch", "run", "loss", "class_rate", "tol10", "tol20", "tol40", "mean_err_deg")
SUMMARY_COLUMNS = ("run", "class_rate", "tol10", "tol20", "tol40", "mean_err_deg")


@dataclass
class EvalResult:
    classification_rate: float
    tolerance_hist: Dict[float, float]
    mean_ang_err_correct: float
    per_class: Dict[int, float] = field(default_factory=dict)
    count: int = 0
    errors_deg: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    correct: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def check(self) -> None:
        """Raise AssertionError if the histogram invariants are broken."""
        vals = [self.tolerance_hist[t] for t in sorted(self.tolerance_hist)]
        assert all(0.0 <= v <= 1.0 for v in vals)
        assert all(a <= b for a, b in zip(vals, vals[1:]))
        assert all(v <= self.classification_rate + 1e-12 for v in vals)

    def row(self) -> Dict[str, float]:
        out = {"class_rate": self.classification_rate}
        for t, v in self.tolerance_hist.items():
            out[f"tol{t:g}"] = v
        out["mean_err_deg"] = self.mean_ang_err_correct
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["count", self.count])
        w.writerow(["class_rate", repr(self.classification_rate)])
        for t in sorted(self.tolerance_hist):
            w.writerow([f"tol{t:g}", repr(self.tolerance_hist[t])])
        w.writerow(["mean_err_deg", repr(self.mean_ang_err_correct)])
        for c in sorted(self.per_class):
            w.writerow([f"class{c}", repr(self.per_class[c])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalResult":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        d = {k: v for k, v in rows}
        hist = {float(k[3:]): float(v) for k, v in d.items() if k.startswith("tol")}
        per_class = {int(k[5:]): float(v) for k, v in d.items() if k.startswith("class") and k != "class_rate"}
        return cls(float(d["class_rate"]), hist, float(d["mean_err_deg"]), per_class, int(d["count"]))

    def table(self, name: str = "run") -> str:
        return format_table([(name, self)])


def _angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise 2 arccos(|a.b|), evaluated as 4 atan2(|a - sb|, |a + sb|) with s = sign(a.b).

    Same value, but exact zero for identical poses where arccos near 1 is ill-conditioned.
    """
    s = np.where(np.einsum("ij,ij->i", a, b) < 0, -1.0, 1.0)[:, None]
    return 4.0 * np.arctan2(np.linalg.norm(a - s * b, axis=1), np.linalg.norm(a + s * b, axis=1))


def score(pred_classes, pred_quats, true_classes, true_quats,
          thresholds: Sequence[float] = THRESHOLDS_DEG) -> EvalResult:
    """Metrics from retrieved (class, pose) against the ground truth."""
    true_classes = np.asarray(true_classes)
    n = len(true_classes)
    if n == 0:
        raise ConfigurationError("cannot evaluate an empty test set")
    correct = np.asarray(pred_classes) == true_classes
    err = np.degrees(_angles(np.asarray(pred_quats, float), np.asarray(true_quats, float)))
    hist = {float(t): float(np.sum(correct & (err <= t)) / n) for t in thresholds}
    mean_err = float(err[correct].mean()) if correct.any() else float("nan")
    per_class = {int(c): float(correct[true_classes == c].mean()) for c in np.unique(true_classes)}
    return EvalResult(float(correct.mean()), hist, mean_err, per_class, n, err, correct)


def evaluate_descriptors(db, descriptors, class_ids, quats,
                         thresholds: Sequence[float] = THRESHOLDS_DEG) -> EvalResult:
    """1-NN retrieval of every descriptor in ``db``, then ``score``."""
    if len(descriptors) == 0:
        raise ConfigurationError("cannot evaluate an empty test set")
    _, idx = db.query_batch(descriptors, 1)
    idx = idx[:, 0]
    return score(db.class_ids[idx], db.quats[idx], class_ids, quats, thresholds)


def evaluate(net, db, test_set, thresholds: Sequence[float] = THRESHOLDS_DEG) -> EvalResult:
    """Embed ``test_set`` with ``net`` and score its nearest templates in ``db``."""
    if len(test_set) == 0:
        raise ConfigurationError("cannot evaluate an empty test set")
    modality = db.modality or test_set.meta.get("modality")
    if modality not in MODALITIES or net.in_channels != len(MODALITIES[modality]):
        raise ConfigurationError(f"network input ({net.in_channels} planes) does not match "
                                 f"modality {modality!r}")
    if test_set.meta.get("modality", modality) != modality:
        raise ConfigurationError("test set modality differs from the database's")
    desc = net.embed(network_input(test_set.planes, modality))
    return evaluate_descriptors(db, desc, test_set.class_ids, test_set.quats, thresholds)


def format_table(results: Sequence[Tuple[str, EvalResult]]) -> str:
    head = f"{'run':<16}{'class':>8}{'10deg':>8}{'20deg':>8}{'40deg':>8}{'err(deg)':>10}"
    lines = [head, "-" * len(head)]
    for name, r in results:
        h = [r.tolerance_hist.get(t, float("nan")) for t in THRESHOLDS_DEG]
        lines.append(f"{name:<16}{100 * r.classification_rate:>7.1f}%"
                     + "".join(f"{100 * v:>7.1f}%" for v in h)
                     + f"{r.mean_ang_err_correct:>10.2f}")
    return "\n".join(lines)


def compare_runs(results: Sequence[Tuple[str, EvalResult]], curves: Optional[Dict[str, list]] = None):
    """Summary table with deltas against the first run, plus a per-epoch curve CSV.

    ``curves`` maps a run name to a list of (epoch, loss, EvalResult).
    Returns (table text, summary CSV text, curve CSV text).
    """
    if len(results) < 2:
        raise ConfigurationError("compare_runs needs at least two results")
    base = results[0][1].row()
    lines = [format_table(results), "", "deltas vs " + results[0][0] + ":"]
    summary = io.StringIO()
    w = csv.writer(summary, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for name, r in results:
        row = r.row()
        w.writerow([name] + [f"{row[c]:.6f}" for c in SUMMARY_COLUMNS[1:]])
        delta = {k: row[k] - base[k] for k in row}
        lines.append(f"  {name:<14}" + "  ".join(f"{k} {v:+.4f}" for k, v in delta.items()))
    curve = io.StringIO()
    w = csv.writer(curve, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for name, points in (curves or {}).items():
        for epoch, loss, r in points:
            row = r.row()
            w.writerow([epoch, name, f"{loss:.6f}"] + [f"{row[c]:.6f}" for c in CURVE_COLUMNS[3:]])
    return "\n".join(lines), summary.getvalue(), curve.getvalue()
