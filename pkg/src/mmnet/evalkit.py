"""Benchmark-style metrics: CLE precision, IoU success + AUC, and a
reset-based accuracy/robustness protocol with a documented EAO-lite.

Two protocols fill different report columns: "ptb" consumes precomputed
trajectories and yields pre20/auc plus the two curves; "vot-lite" reruns a
tracker with resets and yields accuracy/robustness/eao_lite.  Columns a
protocol cannot compute are written as nan and skipped by the aggregate.

eao_lite is the single-sequence expected overlap with zeros filled from a
failure until re-initialization.  It is NOT the official sequence-length-
stratified EAO; every report header repeats this caveat.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

PRECISION_TAUS = np.arange(51, dtype=np.float64)          # 0..50 px
SUCCESS_TAUS = np.linspace(0.0, 1.0, 21)                  # 0, 0.05, ..., 1

EAO_CAVEAT = ("eao_lite is a single-sequence expected overlap "
              "(zeros filled from failure to re-init), not the official "
              "length-weighted EAO")


def iou(a, b) -> float:
    """Intersection over union of two (x, y, w, h) boxes; 0 on empty union."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    ix = max(ax, bx)
    iy = max(ay, by)
    ix2 = min(ax + aw, bx + bw)
    iy2 = min(ay + ah, by + bh)
    inter = max(0.0, ix2 - ix) * max(0.0, iy2 - iy)
    union = aw * ah + bw * bh - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def cle(a, b) -> float:
    """Euclidean distance between box centers."""
    ax = float(a[0]) + float(a[2]) / 2.0
    ay = float(a[1]) + float(a[3]) / 2.0
    bx = float(b[0]) + float(b[2]) / 2.0
    by = float(b[1]) + float(b[3]) / 2.0
    return float(np.hypot(ax - bx, ay - by))


def _check_lengths(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 4:
        raise InputError(
            f"trajectory/ground-truth mismatch: {pred.shape} vs {gt.shape}"
        )
    return pred, gt


def precision_curve(pred, gt):
    """(curve over tau=0..50 px, value at 20 px); curve is non-decreasing."""
    pred, gt = _check_lengths(pred, gt)
    errs = np.array([cle(p, g) for p, g in zip(pred, gt)])
    curve = np.array([(errs <= tau).mean() for tau in PRECISION_TAUS])
    return curve, float(curve[20])


def success_curve(pred, gt):
    """(curve over tau=0..1 in 21 steps, AUC = mean); strictly IoU > tau."""
    pred, gt = _check_lengths(pred, gt)
    overlaps = np.array([iou(p, g) for p, g in zip(pred, gt)])
    curve = np.array([(overlaps > tau).mean() for tau in SUCCESS_TAUS])
    return curve, float(curve.mean())


def vot_lite(runner, record, reinit_skip: int = 5, burnin: int = 10):
    """Reset protocol: (accuracy, robustness, eao_lite).

    runner(record, start) must return one box per frame for frames
    start..n-1, the first being its own echo of the ground-truth init.
    A failure is any tracked frame (after the init frame) whose IoU with
    ground truth hits 0; the tracker re-initializes reinit_skip frames
    later.  accuracy averages tracked IoU excluding the first `burnin`
    frames of each segment and the failure frame itself; robustness counts
    failures; eao_lite averages IoU over all frames with zeros standing in
    from each failure until its re-init (and to the end when no re-init
    fits).
    """
    n = len(record)
    if n < reinit_skip + 2:
        raise InputError(
            f"sequence of {n} frames is too short for reinit_skip {reinit_skip}"
        )
    gt = np.asarray(record.boxes, dtype=np.float64)
    overlap = np.zeros(n)          # zeros persist through failure gaps
    accuracy_samples = []
    robustness = 0
    start = 0
    while start is not None and start < n:
        boxes = np.asarray(runner(record, start), dtype=np.float64)
        if len(boxes) != n - start:
            raise InputError(
                f"runner returned {len(boxes)} boxes for {n - start} frames"
            )
        next_start = None
        for f in range(start, n):
            v = iou(boxes[f - start], gt[f])
            overlap[f] = v
            failed = v == 0.0 and f > start
            if not failed and f - start >= burnin:
                accuracy_samples.append(v)
            if failed:
                robustness += 1
                reinit = f + reinit_skip
                next_start = reinit if reinit < n else None
                break
        start = next_start
    if accuracy_samples:
        accuracy = float(np.mean(accuracy_samples))
    else:
        # degenerate: every segment died inside its burnin window
        tracked = overlap[overlap > 0]
        accuracy = float(tracked.mean()) if len(tracked) else 0.0
    return accuracy, robustness, float(overlap.mean())


# ------------------------------------------------------------------- report


SCALAR_COLUMNS = ("pre20", "auc", "accuracy", "robustness", "eao_lite")


@dataclass
class SequenceResult:
    name: str
    pre20: float = np.nan
    auc: float = np.nan
    accuracy: float = np.nan
    robustness: float = np.nan
    eao_lite: float = np.nan
    precision: np.ndarray | None = None   # 51-point curve (ptb protocol)
    success: np.ndarray | None = None     # 21-point curve (ptb protocol)


@dataclass
class MetricReport:
    protocol: str
    rows: list = field(default_factory=list)

    def aggregate(self) -> dict:
        """Unweighted nan-aware mean of each scalar column over sequences."""
        out = {}
        for col in SCALAR_COLUMNS:
            values = np.array([getattr(r, col) for r in self.rows], dtype=np.float64)
            finite = values[~np.isnan(values)]
            out[col] = float(finite.mean()) if len(finite) else float("nan")
        return out


def evaluate_ptb(pred, gt, name: str) -> SequenceResult:
    """No-reset protocol metrics for one precomputed trajectory."""
    p_curve, pre20 = precision_curve(pred, gt)
    s_curve, auc = success_curve(pred, gt)
    return SequenceResult(name=name, pre20=pre20, auc=auc,
                          precision=p_curve, success=s_curve)


def evaluate_vot_lite(runner, record, reinit_skip: int = 5,
                      burnin: int = 10) -> SequenceResult:
    accuracy, robustness, eao = vot_lite(runner, record, reinit_skip, burnin)
    return SequenceResult(name=record.name, accuracy=accuracy,
                          robustness=float(robustness), eao_lite=eao)


def _header_lines(protocol: str) -> str:
    return f"# protocol: {protocol}\n# note: {EAO_CAVEAT}\n"


def _fmt(v) -> str:
    return repr(float(v))


def write_report(report: MetricReport, out_dir: str, figures: bool = True) -> list:
    """Write per-sequence CSV, aggregate CSV, curve CSVs and SVG plots.

    Returns the list of file paths written.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []

    path = os.path.join(out_dir, "report.csv")
    with open(path, "w") as fh:
        fh.write(_header_lines(report.protocol))
        fh.write("sequence," + ",".join(SCALAR_COLUMNS) + "\n")
        for row in report.rows:
            cells = [row.name] + [_fmt(getattr(row, c)) for c in SCALAR_COLUMNS]
            fh.write(",".join(cells) + "\n")
    written.append(path)

    agg = report.aggregate()
    path = os.path.join(out_dir, "aggregate.csv")
    with open(path, "w") as fh:
        fh.write(_header_lines(report.protocol))
        fh.write("sequence," + ",".join(SCALAR_COLUMNS) + "\n")
        fh.write("mean," + ",".join(_fmt(agg[c]) for c in SCALAR_COLUMNS) + "\n")
    written.append(path)

    for row in report.rows:
        for kind, taus, curve in (("precision", PRECISION_TAUS, row.precision),
                                  ("success", SUCCESS_TAUS, row.success)):
            if curve is None:
                continue
            path = os.path.join(out_dir, f"{row.name}_{kind}.csv")
            with open(path, "w") as fh:
                fh.write("tau,value\n")
                for tau, value in zip(taus, curve):
                    fh.write(f"{_fmt(tau)},{_fmt(value)}\n")
            written.append(path)

    if figures:
        written.extend(_write_figures(report, out_dir))
    return written


def _write_figures(report: MetricReport, out_dir: str) -> list:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.fonttype"] = "path"   # self-contained paths only
    import matplotlib.pyplot as plt

    written = []
    for kind, taus, xlabel in (("precision", PRECISION_TAUS, "CLE threshold [px]"),
                               ("success", SUCCESS_TAUS, "IoU threshold")):
        curves = [(r.name, getattr(r, kind)) for r in report.rows
                  if getattr(r, kind) is not None]
        if not curves:
            continue
        fig, ax = plt.subplots(figsize=(5, 4))
        for name, curve in curves:
            ax.plot(taus, curve, label=name)
        if len(curves) > 1:
            mean = np.mean([c for _, c in curves], axis=0)
            ax.plot(taus, mean, "k--", label="mean")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("fraction of frames")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(f"{kind} ({report.protocol})")
        ax.legend(fontsize=7)
        ax.grid(alpha=0.3)
        path = os.path.join(out_dir, f"{kind}.svg")
        fig.savefig(path, format="svg", bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written


def read_report_csv(path: str):
    """Parse a report/aggregate CSV back into (protocol, [row dicts])."""
    protocol = None
    rows = []
    with open(path) as fh:
        header = None
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# protocol:"):
                    protocol = line.split(":", 1)[1].strip()
                continue
            if header is None:
                header = line.split(",")
                continue
            parts = line.split(",")
            row = {"sequence": parts[0]}
            for key, value in zip(header[1:], parts[1:]):
                row[key] = float(value)
            rows.append(row)
    return protocol, rows
