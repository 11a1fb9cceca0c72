"""Rotated-box IoU, difficulty bucketing, and average precision at 40 points.

The production IoU path clips one rectangle against the other exactly
(convex polygon intersection, at most an octagon) and is checked against a
rasterization oracle kept here for tests and self-checks. AP follows the
40-recall-point interpolated-precision definition, with the standard
convention that ground truths outside the evaluated difficulty bucket are
ignored: they neither count as misses nor turn their matches into false
positives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import read_label_file
from .errors import DomainError, EvaluationError
from .head import detection_from_label

DIFFICULTIES = ("easy", "moderate", "hard")

# KITTI-convention gates: min 2D box height, max occlusion, max truncation
DIFFICULTY_RULES = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}


@dataclass
class BevBox:
    """Ground-plane rectangle: center (x, z), extent (l, w), yaw angle."""

    cx: float
    cz: float
    length: float
    width: float
    angle: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise DomainError(f"box extents must be positive: {self.length} x {self.width}")

    @property
    def area(self):
        return self.length * self.width

    def corners(self):
        """4x2 corner array, counter-clockwise in the (x, z) plane."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        half = np.array([[self.length / 2, self.width / 2],
                         [-self.length / 2, self.width / 2],
                         [-self.length / 2, -self.width / 2],
                         [self.length / 2, -self.width / 2]])
        rot = np.array([[c, s], [-s, c]])  # matches rotation about the vertical axis
        pts = half @ rot.T + np.array([self.cx, self.cz])
        if _signed_area(pts) < 0:
            pts = pts[::-1]
        return pts


def bev_box_of(obj):
    """BevBox from anything exposing bev_box()/bev_footprint()."""
    if isinstance(obj, BevBox):
        return obj
    if hasattr(obj, "bev_box"):
        return BevBox(*obj.bev_box())
    if hasattr(obj, "bev_footprint"):
        return BevBox(*obj.bev_footprint())
    raise TypeError(f"cannot derive a BEV box from {type(obj).__name__}")


def _signed_area(pts):
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject, clip):
    """Sutherland-Hodgman: clip `subject` by convex CCW polygon `clip`."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            return []
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = (b[0] - a[0], b[1] - a[1])
        input_pts = output
        output = []

        def inside(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0

        def intersect(p, q):
            # line a-b with segment p-q
            dp = (q[0] - p[0], q[1] - p[1])
            denom = edge[0] * dp[1] - edge[1] * dp[0]
            t = (edge[0] * (a[1] - p[1]) - edge[1] * (a[0] - p[0])) / denom
            return (p[0] + t * dp[0], p[1] + t * dp[1])

        prev = input_pts[-1]
        prev_in = inside(prev)
        for cur in input_pts:
            cur_in = inside(cur)
            if cur_in:
                if not prev_in:
                    output.append(intersect(prev, cur))
                output.append(tuple(cur))
            elif prev_in:
                output.append(intersect(prev, cur))
            prev, prev_in = cur, cur_in
    return output


def bev_intersection_area(a, b):
    box_a, box_b = bev_box_of(a), bev_box_of(b)
    # canonical operand order makes the float arithmetic, and therefore the
    # result, exactly symmetric in (a, b)
    key = lambda box: (box.cx, box.cz, box.length, box.width, box.angle)
    if key(box_b) < key(box_a):
        box_a, box_b = box_b, box_a
    pa = [tuple(p) for p in box_a.corners()]
    pb = [tuple(p) for p in box_b.corners()]
    poly = _clip_polygon(pa, pb)
    if len(poly) < 3:
        return 0.0
    pts = np.asarray(poly)
    return abs(_signed_area(pts))


def rotated_bev_iou(a, b):
    """Exact intersection-over-union of two rotated ground-plane rectangles."""
    box_a, box_b = bev_box_of(a), bev_box_of(b)
    inter = bev_intersection_area(box_a, box_b)
    union = box_a.area + box_b.area - inter
    return inter / union if union > 0 else 0.0


def rasterized_bev_iou(a, b, resolution=500):
    """Rasterization oracle: cell-center point sampling of the intersection.

    Only the overlap of the two bounding boxes is rasterized; box areas are
    analytic, so the grid error enters through the intersection term alone
    and the half-in half-out boundary cells largely cancel.
    """
    box_a, box_b = bev_box_of(a), bev_box_of(b)
    ca, cb = box_a.corners(), box_b.corners()
    lo = np.maximum(ca.min(axis=0), cb.min(axis=0))
    hi = np.minimum(ca.max(axis=0), cb.max(axis=0))
    union_no_inter = box_a.area + box_b.area
    if (hi <= lo).any():
        return 0.0
    xs = lo[0] + (np.arange(resolution) + 0.5) * (hi[0] - lo[0]) / resolution
    zs = lo[1] + (np.arange(resolution) + 0.5) * (hi[1] - lo[1]) / resolution
    cell = ((hi[0] - lo[0]) / resolution) * ((hi[1] - lo[1]) / resolution)
    gx, gz = np.meshgrid(xs, zs)

    def inside(box):
        c, s = math.cos(box.angle), math.sin(box.angle)
        dx = gx - box.cx
        dz = gz - box.cz
        # inverse of the corner rotation
        u = c * dx - s * dz
        v = s * dx + c * dz
        return (np.abs(u) <= box.length / 2) & (np.abs(v) <= box.width / 2)

    inter = float((inside(box_a) & inside(box_b)).sum()) * cell
    union = union_no_inter - inter
    return float(inter / union) if union > 0 else 0.0


def iou_3d(a, b):
    """Volume IoU for upright boxes: BEV intersection times vertical overlap."""
    inter_area = bev_intersection_area(a, b)
    ya0, ya1 = a.vertical_range()
    yb0, yb1 = b.vertical_range()
    overlap = max(0.0, min(ya1, yb1) - max(ya0, yb0))
    inter = inter_area * overlap
    vol_a = bev_box_of(a).area * (ya1 - ya0)
    vol_b = bev_box_of(b).area * (yb1 - yb0)
    union = vol_a + vol_b - inter
    return inter / union if union > 0 else 0.0


# -- difficulty ----------------------------------------------------------------------


def assign_difficulty(obj):
    """KITTI-convention bucket from 2D box height, occlusion, truncation."""
    height = obj.bbox2d[3] - obj.bbox2d[1]
    for name in DIFFICULTIES:
        min_h, max_occ, max_trunc = DIFFICULTY_RULES[name]
        if height >= min_h and obj.occlusion <= max_occ and obj.truncation <= max_trunc:
            return name
    return "ignored"


_BUCKET_ACCEPTS = {
    "easy": ("easy",),
    "moderate": ("easy", "moderate"),
    "hard": ("easy", "moderate", "hard"),
    "overall": ("easy", "moderate", "hard", "ignored"),
}


# -- AP40 ---------------------------------------------------------------------------------


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5})
    default_threshold: float = 0.5
    recall_points: int = 40
    classes: tuple = ("Car", "Pedestrian", "Cyclist")
    difficulties: tuple = ("easy", "moderate", "hard", "overall")

    def threshold_for(self, class_name):
        thr = self.iou_thresholds.get(class_name, self.default_threshold)
        if not 0 < thr <= 1:
            raise DomainError(f"IoU threshold for {class_name} must be in (0,1], got {thr}")
        return thr


def _match_image(preds, counted_gt, ignored_gt, iou_fn, threshold):
    """Greedy score-descending matching for one image and one class."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    taken = [False] * len(counted_gt)
    rows = []  # (score, tp, ignored_pred)
    for i in order:
        det = preds[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(counted_gt):
            if taken[j]:
                continue
            iou = iou_fn(det, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= threshold:
            taken[best_j] = True
            rows.append((det.score, 1, 0))
            continue
        absorbed = any(iou_fn(det, gt) >= threshold for gt in ignored_gt)
        rows.append((det.score, 0, 1 if absorbed else 0))
    return rows, sum(taken)


def average_precision_40(predictions, ground_truth, config=None, metric="3d",
                         difficulty="moderate", class_name="Car"):
    """AP at 40 recall points for one class and difficulty bucket.

    predictions: {image_id: [Detection3D]}; ground_truth: {image_id:
    [LabeledObject]}. Returns None when the bucket holds no ground truth.
    """
    config = config or EvalConfig()
    if difficulty not in _BUCKET_ACCEPTS:
        raise DomainError(f"unknown difficulty {difficulty!r}")
    accepts = _BUCKET_ACCEPTS[difficulty]
    threshold = config.threshold_for(class_name)
    if metric == "3d":
        iou_fn = lambda det, gt: iou_3d(det, gt)
    elif metric == "bev":
        iou_fn = lambda det, gt: rotated_bev_iou(det, gt)
    else:
        raise DomainError(f"unknown metric {metric!r}")

    all_rows = []
    n_gt = 0
    for image_id, gts in ground_truth.items():
        counted, ignored = [], []
        for obj in gts:
            if obj.ignorable:
                continue
            if obj.class_name != class_name:
                continue
            det = detection_from_label(obj)
            if assign_difficulty(obj) in accepts:
                counted.append(det)
            else:
                ignored.append(det)
        preds = [d for d in predictions.get(image_id, []) if d.class_name == class_name]
        rows, _ = _match_image(preds, counted, ignored, iou_fn, threshold)
        all_rows.extend(rows)
        n_gt += len(counted)

    if n_gt == 0:
        return None
    return _ap_from_rows(all_rows, n_gt, config.recall_points)


def _ap_from_rows(rows, n_gt, recall_points=40):
    rows = sorted((r for r in rows if not r[2]), key=lambda r: -r[0])
    if not rows:
        return 0.0
    tps = np.cumsum([r[1] for r in rows])
    fps = np.cumsum([1 - r[1] for r in rows])
    recalls = tps / n_gt
    precisions = tps / np.maximum(tps + fps, 1)
    total = 0.0
    for k in range(1, recall_points + 1):
        r = k / recall_points
        reachable = precisions[recalls >= r - 1e-12]
        total += float(reachable.max()) if reachable.size else 0.0
    return total / recall_points


def evaluate_all(predictions, ground_truth, config=None):
    """AP table over classes x difficulties x {3d, bev}, values in percent."""
    config = config or EvalConfig()
    results = {}
    for metric in ("3d", "bev"):
        for cls in config.classes:
            for diff in config.difficulties:
                ap = average_precision_40(predictions, ground_truth, config,
                                          metric=metric, difficulty=diff, class_name=cls)
                results[(metric, cls, diff)] = None if ap is None else 100.0 * ap
    return results


def format_report(results, config=None):
    """Plain-text table plus machine-readable key=value lines."""
    config = config or EvalConfig()
    lines = []
    kv = []
    for metric in ("3d", "bev"):
        lines.append(f"AP40 ({metric.upper()}, percent)")
        header = f"{'class':<12}" + "".join(f"{d:>10}" for d in config.difficulties)
        lines.append(header)
        for cls in config.classes:
            row = f"{cls:<12}"
            for diff in config.difficulties:
                val = results.get((metric, cls, diff))
                row += f"{'n/a':>10}" if val is None else f"{val:>10.2f}"
                key = f"ap{metric}.{cls}.{diff}"
                kv.append(f"{key}=" + ("n/a" if val is None else f"{val:.2f}"))
            lines.append(row)
        lines.append("")
    return "\n".join(lines), "\n".join(kv) + "\n"


def load_directory_pairs(gt_dir, pred_dir):
    """Label files matched by stem; unmatched stems raise with the full list."""
    gt_files = {p.stem: p for p in sorted(Path(gt_dir).glob("*.txt"))}
    pred_files = {p.stem: p for p in sorted(Path(pred_dir).glob("*.txt"))}
    missing = sorted(set(gt_files) ^ set(pred_files))
    if missing:
        raise EvaluationError("unmatched file stems: " + ", ".join(missing))
    ground_truth = {}
    predictions = {}
    for stem, path in gt_files.items():
        ground_truth[stem] = read_label_file(path)
        predictions[stem] = [detection_from_label(o)
                             for o in read_label_file(pred_files[stem]) if not o.ignorable]
    return predictions, ground_truth
