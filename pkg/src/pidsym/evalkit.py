"""Scoring of recognized sheets against ground truth.

Localization is a class-agnostic greedy bbox matching at an IoU threshold;
classification is scored on top of the matched pairs, so a region must be
found before its class can count. Reports carry raw counts and derive
precision/recall/F1 on demand, per class and macro-averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ioutils import write_json

EVAL_SCHEMA_VERSION = 1

Box = tuple[float, float, float, float]


def box_iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = ((a[2] - a[0]) * (a[3] - a[1])
             + (b[2] - b[0]) * (b[3] - b[1]) - inter)
    return inter / union if union > 0.0 else 0.0


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def harmonic_f1(precision: float, recall: float) -> float:
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0.0 else 0.0


def prf(tp: int, fp: int, fn: int) -> PRF:
    """Precision/recall/F1 from counts; zero denominators score zero."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    return PRF(p, r, harmonic_f1(p, r))


def match_regions(pred_boxes: list[Box], gt_boxes: list[Box],
                  iou_threshold: float = 0.5):
    """Greedy one-to-one bbox matching by descending IoU.

    Only pairs at or above the threshold match; ties break on lower
    prediction index, then lower ground-truth index, so the result does
    not depend on input order beyond indexing. Returns
    (correct, false, missing, pairs) where pairs is a list of
    (pred_index, gt_index, iou).
    """
    cand = []
    for pi, pb in enumerate(pred_boxes):
        for gi, gb in enumerate(gt_boxes):
            v = box_iou(pb, gb)
            if v >= iou_threshold:
                cand.append((-v, pi, gi))
    cand.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    for nv, pi, gi in cand:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        pairs.append((pi, gi, -nv))
    correct = len(pairs)
    return (correct, len(pred_boxes) - correct, len(gt_boxes) - correct,
            pairs)


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class MatchReport:
    """Counts for one or more sheets; derived metrics via methods."""

    classes: dict[str, ClassCounts] = field(default_factory=dict)
    correct_regions: int = 0
    false_regions: int = 0
    missing_regions: int = 0

    def class_names(self) -> list[str]:
        return sorted(self.classes)

    def per_class_prf(self) -> dict[str, PRF]:
        return {name: prf(c.tp, c.fp, c.fn)
                for name, c in sorted(self.classes.items())}

    def macro_prf(self) -> PRF:
        per = self.per_class_prf()
        if not per:
            return PRF(0.0, 0.0, 0.0)
        n = len(per)
        return PRF(sum(v.precision for v in per.values()) / n,
                   sum(v.recall for v in per.values()) / n,
                   sum(v.f1 for v in per.values()) / n)

    def micro_prf(self) -> PRF:
        tp = sum(c.tp for c in self.classes.values())
        fp = sum(c.fp for c in self.classes.values())
        fn = sum(c.fn for c in self.classes.values())
        return prf(tp, fp, fn)


def _counts(report: MatchReport, name: str) -> ClassCounts:
    if name not in report.classes:
        report.classes[name] = ClassCounts()
    return report.classes[name]


def score_sheet(pred: list[tuple[str, Box]], gt: list[tuple[str, Box]],
                iou_threshold: float = 0.5) -> MatchReport:
    """Score one sheet's (class, bbox) predictions against ground truth.

    A matched pair with agreeing classes is a TP of that class; a matched
    pair with differing classes is an FP of the predicted class and an FN
    of the true one. Unmatched predictions are FPs, unmatched ground
    truth FNs, so per class TP + FN equals the ground-truth count.
    """
    correct, false, missing, pairs = match_regions(
        [b for _, b in pred], [b for _, b in gt], iou_threshold)
    report = MatchReport(correct_regions=correct, false_regions=false,
                         missing_regions=missing)
    matched_p = {pi for pi, _, _ in pairs}
    matched_g = {gi for _, gi, _ in pairs}
    for pi, gi, _ in pairs:
        pname, gname = pred[pi][0], gt[gi][0]
        if pname == gname:
            _counts(report, pname).tp += 1
        else:
            _counts(report, pname).fp += 1
            _counts(report, gname).fn += 1
    for pi in range(len(pred)):
        if pi not in matched_p:
            _counts(report, pred[pi][0]).fp += 1
    for gi in range(len(gt)):
        if gi not in matched_g:
            _counts(report, gt[gi][0]).fn += 1
    report.classes = dict(sorted(report.classes.items()))
    return report


def aggregate(reports: list[MatchReport]) -> MatchReport:
    """Count-sum reports; class set is the union in sorted order."""
    total = MatchReport()
    for r in reports:
        total.correct_regions += r.correct_regions
        total.false_regions += r.false_regions
        total.missing_regions += r.missing_regions
        for name, c in r.classes.items():
            t = _counts(total, name)
            t.tp += c.tp
            t.fp += c.fp
            t.fn += c.fn
    total.classes = dict(sorted(total.classes.items()))
    return total


def report_to_json(report: MatchReport) -> dict:
    per = report.per_class_prf()
    macro = report.macro_prf()
    micro = report.micro_prf()
    return {
        "schema_version": EVAL_SCHEMA_VERSION,
        "localization": {
            "correct_regions": report.correct_regions,
            "false_regions": report.false_regions,
            "missing_regions": report.missing_regions,
        },
        "classes": {
            name: {
                "tp": c.tp, "fp": c.fp, "fn": c.fn,
                "precision": per[name].precision,
                "recall": per[name].recall,
                "f1": per[name].f1,
            }
            for name, c in sorted(report.classes.items())
        },
        "macro": {"precision": macro.precision, "recall": macro.recall,
                  "f1": macro.f1},
        "micro": {"precision": micro.precision, "recall": micro.recall,
                  "f1": micro.f1},
    }


def write_report(path: str, report: MatchReport) -> None:
    write_json(path, report_to_json(report))


def report_table(report: MatchReport) -> str:
    """Fixed-width text table, one row per class plus a macro row."""
    rows = [f"{'class':<14s} {'tp':>5s} {'fp':>5s} {'fn':>5s} "
            f"{'prec':>7s} {'rec':>7s} {'f1':>7s}"]
    per = report.per_class_prf()
    for name, c in sorted(report.classes.items()):
        m = per[name]
        rows.append(f"{name:<14s} {c.tp:>5d} {c.fp:>5d} {c.fn:>5d} "
                    f"{m.precision:>7.4f} {m.recall:>7.4f} {m.f1:>7.4f}")
    macro = report.macro_prf()
    rows.append(f"{'macro':<14s} {'':>5s} {'':>5s} {'':>5s} "
                f"{macro.precision:>7.4f} {macro.recall:>7.4f} "
                f"{macro.f1:>7.4f}")
    rows.append(f"regions: correct={report.correct_regions} "
                f"false={report.false_regions} "
                f"missing={report.missing_regions}")
    return "\n".join(rows)
