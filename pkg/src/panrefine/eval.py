"""Mask IOU, class-gated instance matching and refined-vs-unrefined reports."""

import csv
from dataclasses import dataclass, field
import io
import itertools

import numpy as np

from .depth_proc import HoleFillConfig, fill_holes
from .mask_refine import RefineConfig, refine_all


def instance_iou(a, b) -> float | None:
    """|a & b| / |a | b| for two boolean bitmaps; None when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return None
    return int(np.count_nonzero(a & b)) / union


def _bitmap(m):
    return m.bitmap if hasattr(m, "bitmap") else m


def _class(m):
    return m.label.class_id if hasattr(m, "label") else None


def _eligible_ious(preds, gts) -> dict:
    iou = {}
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if _class(p) == _class(g):
                v = instance_iou(_bitmap(p), _bitmap(g))
                if v:
                    iou[i, j] = v
    return iou


def match_instances(preds, gts) -> list:
    """Greedy class-gated matching: repeatedly take the highest-IOU remaining pair.

    Returns ``(pred_index, gt_index, iou)`` triples in pick order. Only pairs
    with the same class and IOU > 0 are eligible. When several top pairs tie
    and compete for the same instance, every choice is tried and the one whose
    descending IOU list is largest wins (lowest indices on a full tie), so the
    result is the best assignment in that order even with exact ties.
    """
    iou = _eligible_ious(preds, gts)
    memo = {}

    def solve(used_p: frozenset, used_g: frozenset) -> tuple:
        key = (used_p, used_g)
        if key in memo:
            return memo[key]
        left = {ij: v for ij, v in iou.items() if ij[0] not in used_p and ij[1] not in used_g}
        if not left:
            return ()
        top = max(left.values())
        tied = sorted(ij for ij, v in left.items() if v == top)
        # a tied pair sharing no instance with another tied pair is in every best answer
        forced = [
            (i, j) for i, j in tied
            if sum(1 for a, b in tied if a == i or b == j) == 1
        ]
        if forced:
            rest = solve(used_p | {i for i, _ in forced}, used_g | {j for _, j in forced})
            result = tuple((i, j, top) for i, j in forced) + rest
        else:
            result, best_key = None, None
            for i, j in tied:
                option = ((i, j, top),) + solve(used_p | {i}, used_g | {j})
                option_key = sorted((v for _, _, v in option), reverse=True)
                if best_key is None or option_key > best_key:
                    result, best_key = option, option_key
        memo[key] = result
        return result

    return list(solve(frozenset(), frozenset()))


def exhaustive_matching(preds, gts) -> list:
    """Brute-force matching whose descending IOU list is lexicographically largest.

    Exponential; meant as a reference for small instance counts.
    """
    iou = _eligible_ious(preds, gts)
    best, best_key = [], []
    n_p, n_g = len(preds), len(gts)
    slots = list(range(n_g)) + [None] * n_p
    for perm in set(itertools.permutations(slots, n_p)):
        pairs = [(i, j, iou[i, j]) for i, j in enumerate(perm) if j is not None and (i, j) in iou]
        key = sorted((v for _, _, v in pairs), reverse=True)
        if key > best_key:
            best, best_key = pairs, key
    return best


@dataclass
class IouReport:
    variant: str
    per_frame: list = field(default_factory=list)
    matched: int = 0
    unmatched: int = 0

    @property
    def values(self) -> list:
        return [v for frame in self.per_frame for v in frame]

    @property
    def mean_percent(self) -> float:
        vals = self.values
        return 100.0 * float(np.mean(vals)) if vals else 0.0


def frame_ious(preds, gts) -> tuple:
    """IOU per non-empty ground-truth instance (0 when unmatched), plus the match count."""
    gts = [g for g in gts if np.any(_bitmap(g))]
    scores = [0.0] * len(gts)
    pairs = match_instances(preds, gts)
    for _, j, v in pairs:
        scores[j] = v
    return scores, len(pairs)


def dataset_mask_iou(pred_frames, gt_frames, variant: str = "", things_only: bool = False) -> IouReport:
    """Instance-mean mask IOU over every ground-truth instance of every frame."""
    pred_frames, gt_frames = list(pred_frames), list(gt_frames)
    if len(pred_frames) != len(gt_frames):
        raise ValueError(f"{len(pred_frames)} predicted frames vs {len(gt_frames)} ground-truth frames")
    report = IouReport(variant)
    for preds, gts in zip(pred_frames, gt_frames):
        if things_only:
            preds = [p for p in preds if p.label.is_thing]
            gts = [g for g in gts if g.label.is_thing]
        scores, n_matched = frame_ious(preds, gts)
        report.per_frame.append(scores)
        report.matched += n_matched
        report.unmatched += len(scores) - n_matched
    return report


@dataclass
class ComparisonRow:
    variant: str
    mask_iou: float
    change: float | None


def comparison_rows(reports) -> list:
    rows, prev = [], None
    for r in reports:
        value = r.mean_percent
        rows.append(ComparisonRow(r.variant, value, None if prev is None else value - prev))
        prev = value
    return rows


def format_table(rows) -> str:
    header = ("Approach", "Mask IOU", "Changes")
    body = [
        (r.variant, f"{r.mask_iou:.4f}", "-" if r.change is None else f"{r.change:+.4f} {'↑' if r.change > 0 else '↓' if r.change < 0 else '='}")
        for r in rows
    ]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def format_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "mask_iou_percent", "change"])
    for r in rows:
        writer.writerow([r.variant, f"{r.mask_iou:.4f}", "" if r.change is None else f"{r.change:.4f}"])
    return buf.getvalue()


def refinement_report(sequence, refine_cfg=None, hole_cfg=None, workers: int = 1) -> list:
    """Mask IOU without and with refinement over a sequence with ground truth.

    Depth is hole-filled before refinement, and the kernel is never narrower
    than one depth unit. Only thing instances are scored, since stuff masks
    are never refined.
    """
    refine_cfg = (refine_cfg or RefineConfig()).with_resolution(1.0 / sequence.intrinsics.depth_scale)
    hole_cfg = hole_cfg or HoleFillConfig()
    raw, refined, gts = [], [], []
    for frame in sequence.frames(with_rgb=False):
        if frame.gt_masks is None:
            raise ValueError(f"frame {frame.index} has no ground-truth masks")
        depth = fill_holes(frame.depth, hole_cfg)
        raw.append(frame.masks)
        refined.append(refine_all(frame.masks, depth, refine_cfg, workers).masks)
        gts.append(frame.gt_masks)
    reports = [
        dataset_mask_iou(raw, gts, "without refinement", things_only=True),
        dataset_mask_iou(refined, gts, "with refinement", things_only=True),
    ]
    return comparison_rows(reports)
