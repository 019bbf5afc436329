"""Evaluation metrics: field F1, nTED accuracy, localization F1, layout mIoU, accuracy, ANLS.

Worked values used by the test-suite (each checked against an independent
oracle there):

* ``nted_accuracy``: one relabelled leaf in a 5-node tree gives 0.8.
* ``field_f1``: {menu: "hot coffee", total: "5"} vs {menu: "hot coffee", total: "6"}
  gives p = r = f1 = 0.5.
* ``anls("hott coffee", ["hot coffee"])`` = 10/11.
* ``localization_f1``: an extra prediction centred inside a don't-care quad
  leaves precision unchanged.
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .token_schema import ROOT, Branch, Leaf, Node

# --------------------------------------------------------------------------
# field F1
# --------------------------------------------------------------------------


def _roots(tree) -> list[Node]:
    if tree is None:
        return []
    if isinstance(tree, (list, tuple)):
        return list(tree)
    return [tree]


def field_pairs(tree) -> Counter:
    """Multiset of (field path, space-joined leaf text)."""
    out: Counter = Counter()

    def visit(node: Node, path: tuple[str, ...]):
        if isinstance(node, Leaf):
            out[("/".join(path), " ".join(node.segments))] += 1
            return
        sub = path if node.name == ROOT else path + (node.name,)
        for c in node.children:
            visit(c, sub)

    for t in _roots(tree):
        visit(t, ())
    return out


def prf(tp: int, n_pred: int, n_gt: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def field_counts(pred, gt) -> tuple[int, int, int]:
    """(tp, |pred|, |gt|) over flattened field pairs; a list of trees is pooled."""
    a, b = field_pairs(pred), field_pairs(gt)
    return sum((a & b).values()), sum(a.values()), sum(b.values())


def field_f1(pred, gt) -> tuple[float, float, float]:
    return prf(*field_counts(pred, gt))


# --------------------------------------------------------------------------
# tree edit distance
# --------------------------------------------------------------------------

@dataclass
class _N:
    label: str
    children: list["_N"] = field(default_factory=list)


def label_tree(tree) -> _N:
    """Ordered labelled tree: branches become field-name nodes, each segment a leaf node.

    The returned root is virtual (label ``ROOT``); it never counts as a node.
    """
    def conv(node: Node) -> list[_N]:
        if isinstance(node, Leaf):
            return [_N(s) for s in node.segments]
        kids = [k for c in node.children for k in conv(c)]
        return kids if node.name == ROOT else [_N("<" + node.name + ">", kids)]

    return _N("\x00root", [k for t in _roots(tree) for k in conv(t)])


def _size(n: _N) -> int:
    return 1 + sum(_size(c) for c in n.children)


def node_count(tree) -> int:
    return _size(label_tree(tree)) - 1


def _postorder(root: _N):
    labels, lmd = [], []

    def visit(n: _N) -> int:
        first = None
        for c in n.children:
            leftmost = visit(c)
            if first is None:
                first = leftmost
        labels.append(n.label)
        idx = len(labels) - 1
        lmd.append(idx if first is None else first)
        return lmd[idx]

    visit(root)
    return labels, lmd


def tree_edit_distance(a: _N, b: _N) -> int:
    """Zhang-Shasha ordered tree edit distance with unit costs."""
    la, ma = _postorder(a)
    lb, mb = _postorder(b)
    na, nb = len(la), len(lb)

    def keyroots(lmd):
        seen, out = set(), []
        for i in range(len(lmd) - 1, -1, -1):
            if lmd[i] not in seen:
                seen.add(lmd[i])
                out.append(i)
        return sorted(out)

    td = [[0] * nb for _ in range(na)]
    for i in keyroots(ma):
        for j in keyroots(mb):
            li, lj = ma[i], mb[j]
            w, h = i - li + 2, j - lj + 2
            fd = [[0] * h for _ in range(w)]
            for x in range(1, w):
                fd[x][0] = fd[x - 1][0] + 1
            for y in range(1, h):
                fd[0][y] = fd[0][y - 1] + 1
            for x in range(1, w):
                for y in range(1, h):
                    ii, jj = li + x - 1, lj + y - 1
                    if ma[ii] == li and mb[jj] == lj:
                        fd[x][y] = min(fd[x - 1][y] + 1, fd[x][y - 1] + 1,
                                       fd[x - 1][y - 1] + (la[ii] != lb[jj]))
                        td[ii][jj] = fd[x][y]
                    else:
                        fd[x][y] = min(fd[x - 1][y] + 1, fd[x][y - 1] + 1,
                                       fd[ma[ii] - li][mb[jj] - lj] + td[ii][jj])
    return td[na - 1][nb - 1]


def nted_accuracy(pred, gt) -> float:
    """max(0, 1 - TED(pred, gt) / TED(empty, gt)); an empty gt scores 1 only for an empty pred."""
    p, g = label_tree(pred), label_tree(gt)
    denom = _size(g) - 1
    if denom == 0:
        return 1.0 if _size(p) == 1 else 0.0
    return max(0.0, 1.0 - tree_edit_distance(p, g) / denom)


# --------------------------------------------------------------------------
# localization
# --------------------------------------------------------------------------

def normalize_text(s: str) -> str:
    return " ".join(s.lower().split())


def bbox_center(b: Sequence[float]) -> tuple[float, float]:
    return (b[0] + b[2]) / 2, (b[1] + b[3]) / 2


def point_in_quad(pt: Sequence[float], quad: Sequence[float]) -> bool:
    """Even-odd test on the 4-point polygon; points on an edge count as inside."""
    x, y = pt
    pts = [(quad[2 * i], quad[2 * i + 1]) for i in range(4)]
    inside = False
    for i in range(4):
        (x0, y0), (x1, y1) = pts[i], pts[(i + 1) % 4]
        cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
        if abs(cross) <= 1e-12 and min(x0, x1) - 1e-12 <= x <= max(x0, x1) + 1e-12 \
                and min(y0, y1) - 1e-12 <= y <= max(y0, y1) + 1e-12:
            return True
        if (y0 > y) != (y1 > y) and x < x0 + (y - y0) * (x1 - x0) / (y1 - y0):
            inside = not inside
    return inside


@dataclass
class LocCounts:
    matched: int
    n_pred: int
    n_gt: int
    absorbed: int

    @property
    def scores(self) -> tuple[float, float, float]:
        r = self.matched / self.n_gt if self.n_gt else 0.0
        denom = self.n_pred - self.absorbed
        p = self.matched / denom if denom else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return r, p, f


def localization_counts(pred_spans: Sequence[tuple[str, Sequence[float]]],
                        gt_spans: Sequence[tuple[str, Sequence[float]]],
                        dont_care: Sequence[Sequence[float]] = ()) -> LocCounts:
    # both lists are put in a canonical order first so the greedy result is order independent
    preds = sorted((normalize_text(t), tuple(b)) for t, b in pred_spans)
    gts = sorted((normalize_text(t), tuple(q)) for t, q in gt_spans)
    used = [False] * len(gts)
    matched = absorbed = 0
    for text, box in preds:
        c = bbox_center(box)
        for k, (gtext, quad) in enumerate(gts):
            if not used[k] and gtext == text and point_in_quad(c, quad):
                used[k] = True
                matched += 1
                break
        else:
            if any(point_in_quad(c, q) for q in dont_care):
                absorbed += 1
    return LocCounts(matched, len(preds), len(gts), absorbed)


def localization_f1(pred_spans, gt_spans, dont_care=()) -> tuple[float, float, float]:
    """(recall, precision, f1) of text+center-in-quad matching with don't-care absorption."""
    return localization_counts(pred_spans, gt_spans, dont_care).scores


# --------------------------------------------------------------------------
# layout, classification, ANLS
# --------------------------------------------------------------------------

def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def layout_miou(pred: Sequence[tuple[str, Sequence[float]]],
                gt: Sequence[tuple[str, Sequence[float]]]) -> float | None:
    """Mean over gt elements of the best same-category IoU; None for an empty gt."""
    if not gt:
        return None
    total = 0.0
    for cat, box in gt:
        total += max((box_iou(p, box) for c, p in pred if c == cat), default=0.0)
    return total / len(gt)


def classification_accuracy(preds: Sequence, gts: Sequence) -> float:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} labels")
    if not gts:
        return 0.0
    return sum(p == g for p, g in zip(preds, gts)) / len(gts)


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def anls(pred: str, gts: Sequence[str], threshold: float = 0.5) -> float:
    best = 0.0
    for g in gts:
        n = max(len(pred), len(g))
        s = 1.0 if n == 0 else 1.0 - levenshtein(pred, g) / n
        best = max(best, s if s >= threshold else 0.0)
    return best


# --------------------------------------------------------------------------
# corpus evaluation
# --------------------------------------------------------------------------

METRICS = ("field_f1", "nted", "loc_recall", "loc_precision", "loc_f1", "miou", "accuracy", "anls")


@dataclass
class EvalReport:
    task: str
    scores: dict[str, float | None]
    counts: dict[str, int]
    per_document: list[dict]

    def to_json(self) -> dict:
        return {"task": self.task, "scores": self.scores, "counts": self.counts,
                "per_document": self.per_document}

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(("id",) + METRICS)
                for row in self.per_document:
                    w.writerow([row["id"]] + ["" if row.get(m) is None else repr(row[m]) for m in METRICS])


def _mean(xs) -> float | None:
    xs = [x for x in xs if x is not None]
    return sum(xs) / len(xs) if xs else None


def _answer(tree) -> str | None:
    vals = [t for (path, t) in field_pairs(tree) if path.split("/")[-1] == "answer"]
    return vals[0] if vals else None


def evaluate(results: dict[str, dict], docs: Sequence[tuple[str, object]], task: str) -> EvalReport:
    """Score result JSON records (keyed by id) against gt ``(id, SynthDoc)`` pairs.

    Missing predictions count as empty outputs.
    """
    from .token_schema import tree_from_json

    rows: list[dict] = []
    ftp = fpred = fgt = 0
    loc = LocCounts(0, 0, 0, 0)
    labels_p, labels_g = [], []
    for doc_id, doc in docs:
        res = results.get(doc_id, {"parse": None, "spans": []})
        row: dict = {"id": doc_id}
        spans = res.get("spans") or []
        pred_spans = [(s.get("text", ""), s["bbox"]) for s in spans if s.get("bbox") is not None and "text" in s]
        if task in ("ocr", "parse", "multi", "scene"):
            parsed = res.get("parse")
            if task == "multi":
                pred_tree = [tree_from_json(t) for t in (parsed or [])]
                gt_tree = list(doc.instances or [])
            else:
                pred_tree = tree_from_json(parsed) if parsed is not None else None
                gt_tree = doc.parse
            tp, n_p, n_g = field_counts(pred_tree, gt_tree)
            ftp, fpred, fgt = ftp + tp, fpred + n_p, fgt + n_g
            row["field_f1"] = prf(tp, n_p, n_g)[2]
            row["nted"] = nted_accuracy(pred_tree, gt_tree)
            if task in ("parse", "multi"):
                key = [(w.text, w.quad) for w in doc.words if w.field is not None and w.quad is not None]
                care = [w.quad for w in doc.words if w.field is None and w.quad is not None]
            else:
                key = [(w.text, w.quad) for w in doc.words if w.quad is not None]
                care = []
            c = localization_counts(pred_spans, key, care)
            loc = LocCounts(loc.matched + c.matched, loc.n_pred + c.n_pred, loc.n_gt + c.n_gt,
                            loc.absorbed + c.absorbed)
            row["loc_recall"], row["loc_precision"], row["loc_f1"] = c.scores
            gt_ans = _answer(gt_tree)
            if gt_ans is not None:
                row["anls"] = anls(_answer(pred_tree) or "", [gt_ans])
        if task in ("layout", "scene"):
            pred_el = [(s["category"], s["bbox"]) for s in spans if "category" in s and s.get("bbox") is not None]
            row["miou"] = layout_miou(pred_el, list(doc.layout or []))
        if task == "class":
            labels_p.append(res.get("parse"))
            labels_g.append(doc.label)
            row["accuracy"] = float(res.get("parse") == doc.label)
        rows.append(row)
    scores: dict[str, float | None] = {m: None for m in METRICS}
    counts: dict[str, int] = {"documents": len(rows)}
    if task in ("ocr", "parse", "multi", "scene"):
        scores["field_f1"] = prf(ftp, fpred, fgt)[2]
        scores["nted"] = _mean(r["nted"] for r in rows)
        scores["loc_recall"], scores["loc_precision"], scores["loc_f1"] = loc.scores
        scores["anls"] = _mean(r.get("anls") for r in rows)
        counts.update(field_tp=ftp, field_pred=fpred, field_gt=fgt, loc_matched=loc.matched,
                      loc_pred=loc.n_pred, loc_gt=loc.n_gt, loc_absorbed=loc.absorbed)
    if task in ("layout", "scene"):
        scores["miou"] = _mean(r.get("miou") for r in rows)
    if task == "class":
        scores["accuracy"] = classification_accuracy(labels_p, labels_g)
    return EvalReport(task, scores, counts, rows)
