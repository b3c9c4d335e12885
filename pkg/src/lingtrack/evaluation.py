"""Metrics, threshold calibration, statistical tests, and report assembly.

All functions consume :class:`PredictionRecord` lists; a record is one
(model, sequence, frame) prediction.  Positive classification at a
threshold ``t`` means ``score >= t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import normalize_tokens

MIN_WORD_SUPPORT = 20
MCNEMAR_EXACT_LIMIT = 25


@dataclass(frozen=True)
class PredictionRecord:
    sequence_id: str
    frame_index: int
    score: float
    label: int
    sentence: str = ""
    model_id: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def write_predictions(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_predictions(path) -> list[PredictionRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            out.append(PredictionRecord(**json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# scalar metrics


def f_beta(tp: int, fp: int, fn: int, beta: float = 0.5) -> float:
    denom = (1 + beta**2) * tp + beta**2 * fn + fp
    if denom == 0:
        return 0.0
    return (1 + beta**2) * tp / denom


def mcc(tp: int, fp: int, fn: int, tn: int) -> float:
    denom = math.sqrt(
        float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    )
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / denom


def confusion(records, threshold: float) -> tuple[int, int, int, int]:
    tp = fp = fn = tn = 0
    for rec in records:
        predicted = rec.score >= threshold
        if predicted and rec.label:
            tp += 1
        elif predicted:
            fp += 1
        elif rec.label:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def _sorted_scores_labels(records):
    # descending score, record order breaking ties deterministically
    order = sorted(range(len(records)), key=lambda i: (-records[i].score, i))
    scores = np.array([records[i].score for i in order])
    labels = np.array([records[i].label for i in order])
    return scores, labels


def average_precision(records) -> float:
    """All-points AP: mean of precision-at-rank over the positives, in
    score-descending order."""
    _, labels = _sorted_scores_labels(records)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    cum_tp = np.cumsum(labels)
    ranks = np.arange(1, len(labels) + 1)
    return float((cum_tp[labels == 1] / ranks[labels == 1]).sum() / n_pos)


def roc_auc(records) -> float:
    """Mann-Whitney statistic: P(pos > neg) + P(tie)/2."""
    pos = np.array([r.score for r in records if r.label])
    neg = np.array([r.score for r in records if not r.label])
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("ROC AUC needs both classes")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (len(pos) * len(neg)))


def candidate_thresholds(records) -> list[float]:
    distinct = sorted({r.score for r in records})
    mids = [(a + b) / 2 for a, b in zip(distinct, distinct[1:])]
    return sorted({0.0, 1.0, *mids})


def calibrate_threshold(records, beta: float = 0.5) -> tuple[float, float]:
    """Sweep score midpoints (plus {0,1}) for the best F-beta.

    Returns (threshold, objective value); ties go to the lowest threshold.
    """
    if not any(r.label for r in records) or all(r.label for r in records):
        raise ValueError("threshold calibration needs both classes")
    best_t, best_f = None, -1.0
    for t in candidate_thresholds(records):
        tp, fp, fn, _ = confusion(records, t)
        f = f_beta(tp, fp, fn, beta)
        if f > best_f + 1e-15:
            best_t, best_f = t, f
    return best_t, best_f


# ---------------------------------------------------------------------------
# statistical tests


def _exact_binomial_two_sided(b: int, c: int) -> float:
    n = b + c
    if n == 0:
        return 1.0
    k = min(b, c)
    tail = sum(math.comb(n, i) for i in range(k + 1)) * 0.5**n
    return min(1.0, 2 * tail)


def _chi2_sf_1df(x: float) -> float:
    return math.erfc(math.sqrt(x / 2))


def mcnemar(records_a, records_b, thresholds: tuple[float, float] = (0.5, 0.5)) -> float:
    """Two-sided McNemar p-value on the discordant prediction counts.

    Exact binomial below 25 discordant pairs, chi-square with continuity
    correction above.  Records must align on (sequence, frame).
    """
    keyed_b = {(r.sequence_id, r.frame_index): r for r in records_b}
    if len(keyed_b) != len(records_a):
        raise ValueError("record sets are not aligned")
    t_a, t_b = thresholds
    b = c = 0
    for rec_a in records_a:
        rec_b = keyed_b.get((rec_a.sequence_id, rec_a.frame_index))
        if rec_b is None:
            raise ValueError(
                f"no aligned record for {(rec_a.sequence_id, rec_a.frame_index)}"
            )
        right_a = (rec_a.score >= t_a) == bool(rec_a.label)
        right_b = (rec_b.score >= t_b) == bool(rec_b.label)
        if right_a and not right_b:
            b += 1
        elif right_b and not right_a:
            c += 1
    if b + c < MCNEMAR_EXACT_LIMIT:
        return _exact_binomial_two_sided(b, c)
    stat = (abs(b - c) - 1) ** 2 / (b + c)
    return _chi2_sf_1df(stat)


# ---------------------------------------------------------------------------
# grouped analyses


def per_word_metrics(records, min_support: int = MIN_WORD_SUPPORT) -> dict:
    """AP per vocabulary word over the records whose sentence contains it.

    Words with insufficient support, or whose record subset is single-class,
    are reported in ``skipped`` with the reason.
    """
    if not records:
        raise ValueError("no records")
    by_word: dict[str, list[PredictionRecord]] = {}
    for rec in records:
        for word in set(normalize_tokens(rec.sentence)):
            by_word.setdefault(word, []).append(rec)
    table, skipped = {}, {}
    for word, subset in sorted(by_word.items()):
        if len(subset) < min_support:
            skipped[word] = "insufficient support"
            continue
        labels = {r.label for r in subset}
        if labels == {0} or labels == {1}:
            skipped[word] = "single-class subset"
            continue
        table[word] = {
            "support": len(subset),
            "ap": average_precision(subset),
            "roc_auc": roc_auc(subset),
        }
    return {"words": table, "skipped": skipped}


def ap_per_sequence(records) -> dict[str, float]:
    by_seq: dict[str, list[PredictionRecord]] = {}
    for rec in records:
        by_seq.setdefault(rec.sequence_id, []).append(rec)
    out = {}
    for seq, subset in sorted(by_seq.items()):
        if any(r.label for r in subset):
            out[seq] = average_precision(subset)
    return out


def per_sequence_bootstrap(
    records, n_resamples: int = 1000, alpha: float = 0.05, rng_seed: int = 0
) -> dict:
    """Mean per-sequence AP with a percentile bootstrap CI over sequences."""
    seq_ap = ap_per_sequence(records)
    if len(seq_ap) < 2:
        raise ValueError("need at least two sequences")
    values = np.array(list(seq_ap.values()))
    rng = np.random.default_rng(rng_seed)
    means = np.array([
        values[rng.integers(len(values), size=len(values))].mean()
        for _ in range(n_resamples)
    ])
    lo, hi = np.percentile(means, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return {
        "per_sequence": seq_ap,
        "mean_ap": float(values.mean()),
        "ci_low": float(lo),
        "ci_high": float(hi),
        "alpha": alpha,
        "n_resamples": n_resamples,
    }


# ---------------------------------------------------------------------------
# report assembly


@dataclass
class MetricsReport:
    model_id: str
    ap: float
    roc_auc: float
    val_threshold: float
    optimal_threshold: float
    threshold_diff: float
    f_beta_val: float
    mcc_val: float
    f_beta_optimal: float
    mcc_optimal: float
    pr_curve: list[tuple[float, float, float]] = field(default_factory=list)
    roc_curve: list[tuple[float, float, float]] = field(default_factory=list)
    per_word: dict = field(default_factory=dict)
    per_sequence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def pr_curve(records) -> list[tuple[float, float, float]]:
    """(threshold, precision, recall) at every candidate threshold."""
    points = []
    for t in candidate_thresholds(records):
        tp, fp, fn, _ = confusion(records, t)
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        points.append((t, precision, recall))
    return points


def roc_curve(records) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr) at every candidate threshold."""
    points = []
    for t in candidate_thresholds(records):
        tp, fp, fn, tn = confusion(records, t)
        fpr = fp / (fp + tn) if fp + tn else 0.0
        tpr = tp / (tp + fn) if tp + fn else 0.0
        points.append((t, fpr, tpr))
    return points


def majority_baseline(records) -> list[PredictionRecord]:
    """Constant-score predictor emitting the majority class."""
    positive_rate = sum(r.label for r in records) / len(records)
    constant = 1.0 if positive_rate >= 0.5 else 0.0
    return [
        PredictionRecord(
            r.sequence_id, r.frame_index, constant, r.label, r.sentence,
            model_id="majority_baseline",
        )
        for r in records
    ]


def build_report(
    records_by_model: dict[str, list[PredictionRecord]],
    val_records_by_model: dict[str, list[PredictionRecord]] | None = None,
    beta: float = 0.5,
    include_baseline: bool = True,
    grouped: bool = True,
) -> dict[str, MetricsReport]:
    """One report per model with every summary column.

    The dagger threshold comes from the validation records when present,
    else defaults to 0.5; the starred metrics use the optimal threshold
    found on the test records themselves.
    """
    records_by_model = dict(records_by_model)
    if include_baseline and records_by_model:
        any_records = next(iter(records_by_model.values()))
        records_by_model["majority_baseline"] = majority_baseline(any_records)

    reports = {}
    for model_id, records in records_by_model.items():
        val_records = (val_records_by_model or {}).get(model_id)
        if val_records:
            val_threshold, _ = calibrate_threshold(val_records, beta)
        else:
            val_threshold = 0.5
        try:
            optimal_threshold, _ = calibrate_threshold(records, beta)
        except ValueError:
            optimal_threshold = 0.5
        tp, fp, fn, tn = confusion(records, val_threshold)
        tp_o, fp_o, fn_o, tn_o = confusion(records, optimal_threshold)
        reports[model_id] = MetricsReport(
            model_id=model_id,
            ap=average_precision(records),
            roc_auc=roc_auc(records),
            val_threshold=val_threshold,
            optimal_threshold=optimal_threshold,
            threshold_diff=optimal_threshold - val_threshold,
            f_beta_val=f_beta(tp, fp, fn, beta),
            mcc_val=mcc(tp, fp, fn, tn),
            f_beta_optimal=f_beta(tp_o, fp_o, fn_o, beta),
            mcc_optimal=mcc(tp_o, fp_o, fn_o, tn_o),
            pr_curve=pr_curve(records),
            roc_curve=roc_curve(records),
            per_word=per_word_metrics(records) if grouped else {},
            per_sequence=(
                per_sequence_bootstrap(records)
                if grouped and len(ap_per_sequence(records)) >= 2
                else {}
            ),
        )
    return reports


SUMMARY_COLUMNS = [
    "model_id", "ap", "roc_auc", "f_beta_val", "mcc_val", "val_threshold",
    "optimal_threshold", "threshold_diff", "f_beta_optimal", "mcc_optimal",
]


def write_report(reports: dict[str, MetricsReport], out_dir) -> None:
    """JSON per model plus a summary CSV and curve CSVs."""
    import csv
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for model_id in sorted(reports):
            rep = reports[model_id].to_dict()
            writer.writerow([rep[c] for c in SUMMARY_COLUMNS])
    for model_id, report in reports.items():
        with open(out_dir / f"report_{model_id}.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        for curve in ("pr_curve", "roc_curve"):
            with open(out_dir / f"{curve}_{model_id}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(
                    ["threshold", "precision", "recall"]
                    if curve == "pr_curve"
                    else ["threshold", "fpr", "tpr"]
                )
                writer.writerows(getattr(report, curve))
