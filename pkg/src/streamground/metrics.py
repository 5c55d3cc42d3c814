"""Grounding metrics: box IoU, temporal IoU, tube vIoU, and dataset reports.

Segments are inclusive frame-index intervals; temporal IoU counts frames.
Per-sample vIoU sums per-frame box IoUs over the temporal intersection and
divides by the temporal union size, so vIoU <= tIoU always holds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .engine import TubePrediction, ground
from .model import GroundingModel
from .synthworld import SyntheticEpisode

VIOU_THRESHOLDS = (0.3, 0.5)


def _corners(box) -> tuple[float, float, float, float]:
    cx, cy, w, h = (float(v) for v in np.asarray(box).reshape(-1))
    if w <= 0 or h <= 0:
        raise ValueError(f"box needs positive width/height, got w={w} h={h}")
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def box_iou(a, b) -> float:
    """Intersection-over-union of two (cx, cy, w, h) boxes."""
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def t_iou(gt: tuple[int, int], pred: tuple[int, int]) -> float:
    """Frame-set IoU of two inclusive segments."""
    gs, ge = int(gt[0]), int(gt[1])
    ps, pe = int(pred[0]), int(pred[1])
    if gs > ge or ps > pe:
        raise ValueError(f"segments must satisfy s <= e, got {gt} and {pred}")
    inter = max(0, min(ge, pe) - max(gs, ps) + 1)
    union = (ge - gs + 1) + (pe - ps + 1) - inter
    return inter / union


def v_iou(gt_segment: tuple[int, int], gt_boxes: np.ndarray,
          pred_segment: tuple[int, int], pred_boxes: np.ndarray) -> float:
    """Sum of per-frame IoUs over the segment intersection / union size."""
    gs, ge = int(gt_segment[0]), int(gt_segment[1])
    ps, pe = int(pred_segment[0]), int(pred_segment[1])
    if gs > ge or ps > pe:
        raise ValueError("segments must satisfy s <= e")
    lo, hi = max(gs, ps), min(ge, pe)
    union = (ge - gs + 1) + (pe - ps + 1) - max(0, hi - lo + 1)
    if hi < lo:
        return 0.0
    total = sum(box_iou(gt_boxes[t], pred_boxes[t]) for t in range(lo, hi + 1))
    return total / union


@dataclass
class EvalReport:
    m_tiou: float
    m_viou: float
    viou_at: dict[float, float]
    rows: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"m_tIoU": self.m_tiou, "m_vIoU": self.m_viou,
                "vIoU@R": {str(k): v for k, v in sorted(self.viou_at.items())},
                "samples": self.rows}


def summarize(rows: list[dict],
              thresholds=VIOU_THRESHOLDS) -> EvalReport:
    tious = [r["tIoU"] for r in rows]
    vious = [r["vIoU"] for r in rows]
    report = EvalReport(
        m_tiou=float(np.mean(tious)) if rows else 0.0,
        m_viou=float(np.mean(vious)) if rows else 0.0,
        viou_at={r: float(np.mean([v > r for v in vious])) if rows else 0.0
                 for r in thresholds},
        rows=rows)
    return report


def evaluate_tubes(episodes: list[SyntheticEpisode],
                   tubes: list[TubePrediction],
                   thresholds=VIOU_THRESHOLDS) -> EvalReport:
    rows = []
    for i, (ep, tube) in enumerate(zip(episodes, tubes)):
        rows.append({
            "sample": i,
            "tIoU": t_iou(ep.gt_segment, tube.segment),
            "vIoU": v_iou(ep.gt_segment, ep.gt_boxes, tube.segment, tube.boxes),
            "gt_segment": list(ep.gt_segment),
            "pred_segment": list(tube.segment),
        })
    return summarize(rows, thresholds)


def evaluate(model: GroundingModel, episodes: list[SyntheticEpisode],
             thresholds=VIOU_THRESHOLDS) -> EvalReport:
    """Ground every episode and aggregate the four headline metrics."""
    if not episodes:
        raise ValueError("need at least one evaluation episode")
    tubes = [ground(model, ep) for ep in episodes]
    return evaluate_tubes(episodes, tubes, thresholds)


def report_json(report: EvalReport) -> str:
    return json.dumps(report.as_dict(), indent=2, sort_keys=True)


def report_table(report: EvalReport) -> str:
    """Aligned-column text summary of the headline metrics."""
    cols = ["m_tIoU", "m_vIoU"] + [f"vIoU@{r}" for r in sorted(report.viou_at)]
    vals = [report.m_tiou, report.m_viou] + [report.viou_at[r]
                                             for r in sorted(report.viou_at)]
    head = "  ".join(f"{c:>8}" for c in cols)
    body = "  ".join(f"{100 * v:8.1f}" for v in vals)
    return head + "\n" + body + "\n"
