"""Testing protocol and metric suite.

The protocol draws, per trial and per assignment, a nested support set
(1-shot picks are kept when moving to 3- and 5-shot) together with one
static query set shared by all shot counts, classifies every query against
the class prototypes, and tallies one-vs-rest confusion counts. Accuracy,
macro precision, macro recall, and per-class true/false authentication
rates are aggregated as mean and standard deviation across trials.

Metric arithmetic runs on exact rationals (fractions of integer counts), so
identities such as TAR + FAR = 1 and the balanced-query equality of macro
recall and accuracy hold exactly, not merely to rounding.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .errors import ValidationError
from .head import HeadParams, head_forward
from .protonet import classify, compute_prototypes
from .rng import named_stream
from .store import DatasetManifest, EmbeddingRecord

CATEGORY_ATTRS = ("race", "gender", "age_group")
# Fixed stream indices so a category keeps its random draws regardless of
# which other categories are present.
_CATEGORY_STREAM = {"class": 0, "race": 1, "gender": 2, "age_group": 3}


@dataclass
class ConfusionCounts:
    """One-vs-rest confusion tallies per class over one assignment."""

    class_ids: list[int]
    tp: dict[int, int]
    fp: dict[int, int]
    tn: dict[int, int]
    fn: dict[int, int]
    total: int


@dataclass
class AssignmentResult:
    shot: int
    predictions: list[tuple[int, int, float]]  # (true class, predicted class, min distance)
    counts: ConfusionCounts
    support_ids: dict[int, list[str]]
    query_ids: list[str]


@dataclass
class MetricRow:
    category: str
    backbone: str
    shot: int
    metric: str
    mean: float
    std: float


@dataclass
class TarFarRow:
    category: str
    class_name: str
    shot: int
    tar_mean: float | None
    far_mean: float | None


@dataclass
class EvalReport:
    backbone: str
    trials: int
    assignments: int
    shots: list[int]
    categories: list[str]
    rows: list[MetricRow] = field(default_factory=list)
    tar_far_rows: list[TarFarRow] = field(default_factory=list)
    details: list[AssignmentResult] = field(default_factory=list)
    detail_keys: list[tuple[str, int, int, int]] = field(default_factory=list)
    # detail_keys[i] = (category, trial, assignment, shot) for details[i]

    def accuracy(self, category: str, shot: int) -> float:
        for row in self.rows:
            if row.category == category and row.shot == shot and row.metric == "accuracy":
                return row.mean
        raise KeyError((category, shot))

    def to_metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["category", "backbone", "shot", "metric", "mean", "std"])
        for row in self.rows:
            writer.writerow([row.category, row.backbone, row.shot, row.metric,
                             repr(row.mean), repr(row.std)])
        return buf.getvalue()

    def to_tarfar_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["category", "class", "shot", "tar_mean", "far_mean"])
        for row in self.tar_far_rows:
            writer.writerow([row.category, row.class_name, row.shot,
                             "" if row.tar_mean is None else repr(row.tar_mean),
                             "" if row.far_mean is None else repr(row.far_mean)])
        return buf.getvalue()

    def to_table(self) -> str:
        return render_table(
            [(row.category, row.backbone, row.shot, row.metric, row.mean, row.std)
             for row in self.rows])


def format_mean_std(mean: float, std: float) -> str:
    """Percent with two decimals, e.g. '88.29 ± 2.35'."""
    return f"{100.0 * mean:.2f} ± {100.0 * std:.2f}"


def render_table(entries) -> str:
    """Human-readable grid: Shot x Model x Metric rows, one column per
    category, cells formatted as percent mean ± std."""
    categories = sorted({e[0] for e in entries})
    shots = sorted({e[2] for e in entries})
    backbones = sorted({e[1] for e in entries})
    metrics = ["accuracy", "precision", "recall"]
    cells = {(e[0], e[1], e[2], e[3]): format_mean_std(e[4], e[5]) for e in entries}

    header = ["Shot", "Model", "Metric"] + categories
    body = []
    for shot in shots:
        for backbone in backbones:
            for metric in metrics:
                row = [f"{shot}-shot", backbone, metric.capitalize()]
                for cat in categories:
                    row.append(cells.get((cat, backbone, shot, metric), "-"))
                body.append(row)
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) if body else len(header[i])
              for i in range(len(header))]
    def fmt(row):
        return " | ".join(cell.ljust(w) for cell, w in zip(row, widths))
    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule] + [fmt(r) for r in body]) + "\n"


# ---------------------------------------------------------------------------
# counts and metrics
# ---------------------------------------------------------------------------

def tally_confusion(truths: list[int], preds: list[int],
                    class_ids: list[int]) -> ConfusionCounts:
    total = len(truths)
    tp = {c: 0 for c in class_ids}
    fp = {c: 0 for c in class_ids}
    fn = {c: 0 for c in class_ids}
    for t, p in zip(truths, preds):
        if t == p:
            tp[t] += 1
        else:
            fn[t] += 1
            fp[p] += 1
    tn = {c: total - tp[c] - fp[c] - fn[c] for c in class_ids}
    return ConfusionCounts(list(class_ids), tp, fp, tn, fn, total)


def metrics(counts: ConfusionCounts):
    """(accuracy, macro precision, macro recall) as exact-rational floats.

    Classes that never received a positive prediction contribute precision 0
    rather than being dropped; same for recall of classes with no queries.
    """
    if counts.total <= 0:
        raise ValidationError("metrics need at least one query")
    k = len(counts.class_ids)
    accuracy = Fraction(sum(counts.tp.values()), counts.total)
    precision = Fraction(0)
    recall = Fraction(0)
    for c in counts.class_ids:
        denom_p = counts.tp[c] + counts.fp[c]
        denom_r = counts.tp[c] + counts.fn[c]
        if denom_p > 0:
            precision += Fraction(counts.tp[c], denom_p)
        if denom_r > 0:
            recall += Fraction(counts.tp[c], denom_r)
    return float(accuracy), float(precision / k), float(recall / k)


def tar_far(counts: ConfusionCounts) -> dict[int, tuple[float | None, float | None]]:
    """Per class: TAR = TN / (FP + TN) and FAR = FP / (FP + TN), exactly as
    defined; they sum to 1 by construction. Classes with FP + TN = 0 map to
    (None, None) instead of dividing by zero."""
    out = {}
    for c in counts.class_ids:
        denom = counts.fp[c] + counts.tn[c]
        if denom == 0:
            out[c] = (None, None)
        else:
            out[c] = (float(Fraction(counts.tn[c], denom)),
                      float(Fraction(counts.fp[c], denom)))
    return out


def aggregate_trials(values) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation (divisor N)."""
    values = list(values)
    if not values:
        raise ValidationError("aggregate_trials needs a non-empty list")
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / len(values)
    return float(mean), float(np.sqrt(var))


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------

def embed_records(params: HeadParams, records: list[EmbeddingRecord],
                  ablation: str = "full", dim_vit: int | None = None) -> np.ndarray:
    x = np.asarray([rec.vector for rec in records], dtype=np.float64)
    if ablation == "vit_only":
        if dim_vit is None:
            raise ValidationError("vit_only ablation needs dim_vit")
        x[:, dim_vit:] = 0.0
    elif ablation != "full":
        raise ValidationError(f"ablation must be 'full' or 'vit_only', got {ablation!r}")
    z, _ = head_forward(params, x, "eval")
    return z


def run_assignment(support: list[EmbeddingRecord], query: list[EmbeddingRecord],
                   params: HeadParams, ablation: str = "full",
                   dim_vit: int | None = None, shot: int = 0) -> AssignmentResult:
    """Embed (eval mode), build prototypes, classify every query, tally."""
    support_classes = sorted({rec.class_id for rec in support})
    missing = {rec.class_id for rec in query} - set(support_classes)
    if missing:
        raise ValidationError(f"query classes {sorted(missing)} have no support records")

    z_sup = embed_records(params, support, ablation, dim_vit)
    z_qry = embed_records(params, query, ablation, dim_vit)
    groups = {c: z_sup[[i for i, r in enumerate(support) if r.class_id == c]]
              for c in support_classes}
    protos = compute_prototypes(groups)

    preds, truths, predictions = [], [], []
    sq = np.sum((z_qry[:, None, :] - protos.prototypes[None, :, :]) ** 2, axis=2)
    for i, rec in enumerate(query):
        pred = classify(z_qry[i], protos)
        preds.append(pred)
        truths.append(rec.class_id)
        predictions.append((rec.class_id, pred, float(np.sqrt(sq[i].min()))))
    counts = tally_confusion(truths, preds, support_classes)

    support_ids: dict[int, list[str]] = {c: [] for c in support_classes}
    for rec in support:
        support_ids[rec.class_id].append(rec.id)
    return AssignmentResult(shot, predictions, counts, support_ids,
                            [rec.id for rec in query])


def detect_categories(manifest: DatasetManifest) -> list[str]:
    """Demographic attributes present in the data, else the plain class task."""
    present = []
    for idx, name in enumerate(CATEGORY_ATTRS):
        if any(rec.attrs[idx] is not None for rec in manifest.records):
            present.append(name)
    return present or ["class"]


def category_view(manifest: DatasetManifest, category: str) -> DatasetManifest:
    """Re-label the manifest so the category's attribute value is the class.

    "class" returns the manifest unchanged. Records missing the attribute
    are dropped; remaining attribute values become the class table.
    """
    if category == "class":
        return manifest
    if category not in CATEGORY_ATTRS:
        raise ValidationError(f"unknown category {category!r}")
    idx = CATEGORY_ATTRS.index(category)
    values = sorted({rec.attrs[idx] for rec in manifest.records
                     if rec.attrs[idx] is not None})
    if not values:
        raise ValidationError(f"no records carry the {category} attribute")
    to_id = {v: i for i, v in enumerate(values)}
    records = [replace(rec, class_id=to_id[rec.attrs[idx]])
               for rec in manifest.records if rec.attrs[idx] is not None]
    return DatasetManifest(manifest.dim_vit, manifest.dim_resnet,
                           manifest.backbone_tag, {i: v for v, i in to_id.items()},
                           records)


def _eval_threads(threads: int | None) -> int:
    if threads is None:
        raw = os.environ.get("FAIRPROTO_THREADS", "1")
        try:
            threads = int(raw)
        except ValueError:
            raise ValidationError(f"FAIRPROTO_THREADS must be an integer, got {raw!r}")
    if threads == 0:
        threads = os.cpu_count() or 1
    return max(1, threads)


def run_protocol(manifest: DatasetManifest, params: HeadParams,
                 shots: list[int] = (1, 3, 5), assignments: int = 5, trials: int = 10,
                 queries_per_class: int = 10, seed: int = 0, *,
                 ablation: str = "full", categories: list[str] | None = None,
                 threads: int | None = None) -> EvalReport:
    """Full protocol: per category, per trial, per assignment, draw nested
    supports plus static queries and evaluate every shot count. Metrics are
    averaged over assignments within a trial, then reported as mean ± std
    across trials."""
    from .store import nested_support_query  # local import to avoid cycle at module load

    shots = sorted(int(s) for s in shots)
    if trials < 1 or assignments < 1:
        raise ValidationError("trials and assignments must be >= 1")
    if categories is None:
        categories = detect_categories(manifest)
    report = EvalReport(manifest.backbone_tag, trials, assignments, shots, list(categories))

    for category in categories:
        view = category_view(manifest, category)
        stream_idx = _CATEGORY_STREAM.get(category, 9)
        class_names = view.class_table

        def run_trial(trial: int):
            per_assignment = []
            for a in range(assignments):
                rng = named_stream(seed, "protocol", stream_idx, trial, a)
                nested = nested_support_query(view, shots, queries_per_class, rng)
                for shot in shots:
                    support, query = nested[shot]
                    result = run_assignment(support, query, params, ablation,
                                            view.dim_vit, shot)
                    per_assignment.append((a, shot, result))
            return per_assignment

        n_threads = _eval_threads(threads)
        if n_threads > 1:
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                trial_results = list(pool.map(run_trial, range(trials)))
        else:
            trial_results = [run_trial(t) for t in range(trials)]

        # aggregate: trial value = mean over assignments, report mean/std over trials
        metric_trials = {(shot, m): [] for shot in shots
                         for m in ("accuracy", "precision", "recall")}
        tarfar_trials = {(shot, c): {"tar": [], "far": []}
                         for shot in shots for c in class_names}
        for trial, results in enumerate(trial_results):
            by_shot: dict[int, list[AssignmentResult]] = {s: [] for s in shots}
            for a, shot, result in results:
                by_shot[shot].append(result)
                report.details.append(result)
                report.detail_keys.append((category, trial, a, shot))
            for shot in shots:
                accs, precs, recs = [], [], []
                per_class = {c: {"tar": [], "far": []} for c in class_names}
                for result in by_shot[shot]:
                    acc, prec, rec = metrics(result.counts)
                    accs.append(acc)
                    precs.append(prec)
                    recs.append(rec)
                    for c, (t_rate, f_rate) in tar_far(result.counts).items():
                        if t_rate is not None:
                            per_class[c]["tar"].append(t_rate)
                            per_class[c]["far"].append(f_rate)
                metric_trials[(shot, "accuracy")].append(float(np.mean(accs)))
                metric_trials[(shot, "precision")].append(float(np.mean(precs)))
                metric_trials[(shot, "recall")].append(float(np.mean(recs)))
                for c in class_names:
                    if per_class[c]["tar"]:
                        tarfar_trials[(shot, c)]["tar"].append(float(np.mean(per_class[c]["tar"])))
                        tarfar_trials[(shot, c)]["far"].append(float(np.mean(per_class[c]["far"])))

        for shot in shots:
            for m in ("accuracy", "precision", "recall"):
                mean, std = aggregate_trials(metric_trials[(shot, m)])
                report.rows.append(MetricRow(category, manifest.backbone_tag,
                                             shot, m, mean, std))
            for c in sorted(class_names):
                vals = tarfar_trials[(shot, c)]
                if vals["tar"]:
                    tar_mean = float(np.mean(vals["tar"]))
                    far_mean = float(np.mean(vals["far"]))
                else:
                    tar_mean = far_mean = None
                report.tar_far_rows.append(TarFarRow(category, class_names[c],
                                                     shot, tar_mean, far_mean))
    return report
