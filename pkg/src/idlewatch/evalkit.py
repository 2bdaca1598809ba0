"""Detection metrics: IOU, greedy matching, interpolated AP, trajectories.

Matching follows the Pascal-VOC convention: predictions are taken in
descending confidence order and greedily claim the unmatched
ground-truth box of highest IOU above the threshold. AP is the
all-point interpolated area under the precision-recall curve.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

Box = tuple[float, float, float, float]

IVD_CLASSES = ("moving", "off", "idling")


@dataclass(frozen=True)
class MatchConfig:
    iou_threshold: float = 0.5
    class_aware: bool = True

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union; degenerate boxes score 0 unless identical."""
    area_a = max(a[2] - a[0], 0.0) * max(a[3] - a[1], 0.0)
    area_b = max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)
    if area_a == 0.0 or area_b == 0.0:
        return 1.0 if a == b else 0.0
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (area_a + area_b - inter)


@dataclass(frozen=True)
class LabeledBox:
    box: Box
    label: str
    confidence: float = 1.0


@dataclass
class FrameMatches:
    tp: list[tuple[int, int]] = field(default_factory=list)  # (pred idx, gt idx)
    fp: list[int] = field(default_factory=list)
    fn: list[int] = field(default_factory=list)


def match_detections(preds: list[LabeledBox], gts: list[LabeledBox],
                     cfg: MatchConfig) -> FrameMatches:
    """Greedy confidence-ordered matching within one frame."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    taken = [False] * len(gts)
    result = FrameMatches()
    for pi in order:
        p = preds[pi]
        best_gi, best_iou = -1, 0.0
        for gi, g in enumerate(gts):
            if taken[gi]:
                continue
            if cfg.class_aware and g.label != p.label:
                continue
            v = iou(p.box, g.box)
            if v > best_iou:
                best_gi, best_iou = gi, v
        if best_gi >= 0 and best_iou >= cfg.iou_threshold:
            taken[best_gi] = True
            result.tp.append((pi, best_gi))
        else:
            result.fp.append(pi)
    result.fn = [gi for gi, t in enumerate(taken) if not t]
    return result


@dataclass
class ClassTally:
    """Ranked prediction outcomes plus the ground-truth count for one class."""

    records: list[tuple[float, bool]] = field(default_factory=list)  # (confidence, is_tp)
    n_gt: int = 0


def tally_frames(frames: list[tuple[list[LabeledBox], list[LabeledBox]]],
                 cfg: MatchConfig, classes=IVD_CLASSES) -> dict[str, ClassTally]:
    """Match every (preds, gts) frame and bucket outcomes per class."""
    tallies = {c: ClassTally() for c in classes}
    for preds, gts in frames:
        matches = match_detections(preds, gts, cfg)
        matched_preds = {pi for pi, _ in matches.tp}
        for g in gts:
            if g.label in tallies:
                tallies[g.label].n_gt += 1
        for pi, p in enumerate(preds):
            if p.label not in tallies:
                continue
            tallies[p.label].records.append((p.confidence, pi in matched_preds))
    return tallies


def pr_curve(records: list[tuple[float, bool]], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) arrays after sorting by descending confidence."""
    if n_gt == 0:
        raise ConfigError("PR curve undefined with zero ground-truth instances")
    if not records:
        return np.zeros(0), np.zeros(0)
    order = sorted(range(len(records)), key=lambda i: -records[i][0])
    tp = np.cumsum([1.0 if records[i][1] else 0.0 for i in order])
    fp = np.cumsum([0.0 if records[i][1] else 1.0 for i in order])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    return recall, precision


def average_precision(records: list[tuple[float, bool]], n_gt: int,
                      mode: str = "all_points") -> float:
    """Interpolated area under the PR curve for one class."""
    recall, precision = pr_curve(records, n_gt)
    if len(recall) == 0:
        return 0.0
    if mode == "11_point":
        ap = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            covered = precision[recall >= r]
            ap += (covered.max() if len(covered) else 0.0) / 11.0
        return float(ap)
    if mode != "all_points":
        raise ConfigError(f"unknown AP mode {mode!r}")
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def f_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    for name, v in (("precision", precision), ("recall", recall)):
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"{name} must be in [0, 1], got {v}")
    if precision == 0.0 and recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    per_class_ap: dict[str, dict[str, float | None]]  # threshold key -> class -> AP
    map_scores: dict[str, float]
    confusion: dict[str, dict[str, dict[str, int]]]  # threshold -> class -> {tp, fp, fn}
    audio_stage: dict[str, float]
    notes: list[str] = field(default_factory=list)
    latency: dict[str, float] | None = None

    def to_json(self) -> str:
        payload = {
            "per_class_ap": self.per_class_ap,
            "mAP": self.map_scores,
            "confusion": self.confusion,
            "audio_stage": self.audio_stage,
            "notes": self.notes,
        }
        if self.latency is not None:
            payload["latency"] = self.latency
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["per_class_ap"], d["mAP"], d["confusion"], d["audio_stage"],
                   d.get("notes", []), d.get("latency"))


def _round4(v: float | None) -> float | None:
    return None if v is None else round(v, 4)


def evaluate(frames: list[tuple[list[LabeledBox], list[LabeledBox]]],
             thresholds=(0.5, 0.75), classes=IVD_CLASSES,
             class_aware: bool = True, ap_mode: str = "all_points") -> EvalReport:
    """Full detection report over matched frames at each IOU threshold."""
    per_class: dict[str, dict[str, float | None]] = {}
    maps: dict[str, float] = {}
    confusion: dict[str, dict[str, dict[str, int]]] = {}
    notes: list[str] = []
    for thr in thresholds:
        cfg = MatchConfig(iou_threshold=thr, class_aware=class_aware)
        tallies = tally_frames(frames, cfg, classes)
        key = f"iou@{thr:g}"
        per_class[key] = {}
        confusion[key] = {}
        present = []
        for c in classes:
            tally = tallies[c]
            tp = sum(1 for _, is_tp in tally.records if is_tp)
            fp = len(tally.records) - tp
            confusion[key][c] = {"tp": tp, "fp": fp, "fn": tally.n_gt - tp}
            if tally.n_gt == 0:
                per_class[key][c] = None
                notes.append(f"{key}: class {c!r} has no ground truth; excluded from mAP")
                continue
            ap = average_precision(tally.records, tally.n_gt, ap_mode)
            per_class[key][c] = _round4(ap)
            present.append(ap)
        maps[key] = _round4(float(np.mean(present))) if present else 0.0
    audio = audio_stage_metrics(frames)
    return EvalReport(per_class, maps, confusion, audio, notes)


def audio_stage_metrics(frames) -> dict[str, float]:
    """Binary idling-vs-off metrics over stationary boxes, matched class-blind."""
    tp = fp = fn = tn = 0
    cfg = MatchConfig(iou_threshold=0.5, class_aware=False)
    for preds, gts in frames:
        stat_preds = [p for p in preds if p.label in ("off", "idling")]
        stat_gts = [g for g in gts if g.label in ("off", "idling")]
        matches = match_detections(stat_preds, stat_gts, cfg)
        for pi, gi in matches.tp:
            pred_fg = stat_preds[pi].label == "idling"
            true_fg = stat_gts[gi].label == "idling"
            tp += pred_fg and true_fg
            fp += pred_fg and not true_fg
            fn += true_fg and not pred_fg
            tn += not pred_fg and not true_fg
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return {
        "tp": tp, "fp": fp, "fn": fn, "tn": tn,
        "precision": round(precision, 4), "recall": round(recall, 4),
        "f_score": round(f_score(precision, recall), 4),
    }


def render_table(report: EvalReport) -> str:
    """Fixed-width summary table of AP per class and mAP per threshold."""
    classes = list(next(iter(report.per_class_ap.values())).keys())
    header = ["", "mAP"] + [f"AP {c.capitalize()}" for c in classes]
    rows = [header]
    for key in sorted(report.per_class_ap):
        row = [key, f"{report.map_scores[key]:.4f}"]
        for c in classes:
            ap = report.per_class_ap[key][c]
            row.append("--" if ap is None else f"{ap:.4f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    audio = report.audio_stage
    lines.append("")
    lines.append(
        f"audio stage: precision {audio['precision']:.4f}  recall {audio['recall']:.4f}"
        f"  f-score {audio['f_score']:.4f}"
    )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    track_id: int
    points: list[tuple[float, float, float, str]] = field(default_factory=list)  # (t, x, y, status)


def reconstruct_trajectories(stream, gate: float | None = None) -> list[Trajectory]:
    """Link boxes across ticks by nearest centroid within a distance gate.

    `stream` yields (t, [(box, status), ...]) in time order. The default
    gate is half the median box diagonal over the whole stream.
    """
    ticks = [(t, list(items)) for t, items in stream]
    if gate is None:
        diags = [
            math.hypot(b[2] - b[0], b[3] - b[1])
            for _, items in ticks for b, _ in items
        ]
        gate = 0.5 * float(np.median(diags)) if diags else 1.0
    trajectories: list[Trajectory] = []
    last_pos: dict[int, tuple[float, float]] = {}
    for t, items in ticks:
        centroids = [((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0) for b, _ in items]
        pairs = sorted(
            (math.hypot(cx - px, cy - py), tid, i)
            for tid, (px, py) in last_pos.items()
            for i, (cx, cy) in enumerate(centroids)
        )
        assigned_tracks: set[int] = set()
        assigned_items: set[int] = set()
        for d, tid, i in pairs:
            if d > gate or tid in assigned_tracks or i in assigned_items:
                continue
            assigned_tracks.add(tid)
            assigned_items.add(i)
            trajectories[tid].points.append((t, centroids[i][0], centroids[i][1], items[i][1]))
            last_pos[tid] = centroids[i]
        for i, (cx, cy) in enumerate(centroids):
            if i in assigned_items:
                continue
            tid = len(trajectories)
            trajectories.append(Trajectory(tid, [(t, cx, cy, items[i][1])]))
            last_pos[tid] = (cx, cy)
    return trajectories


def trajectories_to_csv(trajectories: list[Trajectory]) -> str:
    lines = ["track_id,t,x,y,status"]
    for traj in trajectories:
        for t, x, y, status in traj.points:
            lines.append(f"{traj.track_id},{t:.3f},{x:.2f},{y:.2f},{status}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# SVG export

_STATUS_COLORS = {"moving": "#2060d0", "off": "#20a040", "idling": "#d03020",
                  "error": "#808080"}


def pr_curve_svg(recall: np.ndarray, precision: np.ndarray, label: str,
                 size: int = 360) -> str:
    pad = 40
    span = size - 2 * pad

    def xy(r, p):
        return pad + r * span, pad + (1.0 - p) * span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#999"/>',
        f'<text x="{size // 2}" y="{size - 8}" text-anchor="middle" font-size="12">recall</text>',
        f'<text x="12" y="{size // 2}" font-size="12" transform="rotate(-90 12 {size // 2})" '
        f'text-anchor="middle">precision</text>',
        f'<text x="{size // 2}" y="20" text-anchor="middle" font-size="13">{label}</text>',
    ]
    if len(recall):
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in (xy(r, p) for r, p in zip(recall, precision)))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#d03020" stroke-width="1.5"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def trajectories_svg(trajectories: list[Trajectory], width: int = 640,
                     height: int = 360) -> str:
    """Top-down x/y view, one polyline per track, points colored by status."""
    pts = [(x, y) for traj in trajectories for _, x, y, _ in traj.points]
    if not pts:
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
                f'height="{height}"></svg>\n')
    xs, ys = zip(*pts)
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    sx = (width - 40) / max(x1 - x0, 1e-9)
    sy = (height - 40) / max(y1 - y0, 1e-9)

    def xy(x, y):
        return 20 + (x - x0) * sx, 20 + (y - y0) * sy

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for traj in trajectories:
        coords = [xy(x, y) for _, x, y, _ in traj.points]
        if len(coords) > 1:
            path = " ".join(f"{x:.1f},{y:.1f}" for x, y in coords)
            parts.append(f'<polyline points="{path}" fill="none" stroke="#bbb"/>')
        for (x, y), (_, _, _, status) in zip(coords, traj.points):
            color = _STATUS_COLORS.get(status, "#000")
            parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="2.5" fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
