"""Metrics, subject-independent cross-validation, bias diagnostics, statistics.

The harness partitions *sessions* into k folds (subjects belong to exactly
one session, so the split is automatically subject-independent), trains on
k-1 folds, predicts every non-anchor segment of the held-out fold, and pools
the held-out predictions per seed. F1 is reported overall and per age
tercile, and a ridge-regression age probe on frozen variation embeddings
quantifies how much age information survives in the representation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import betainc

from .data import Dataset, SubjectRecord
from .pipeline import (
    FinetuneConfig,
    ModelBundle,
    ModelVariant,
    PretrainConfig,
    anchors_by_subject,
    finetune,
    predict_batch,
    pretrain_vm,
    training_instances,
    variation_embeddings,
)
from .seeding import STREAM_SPLIT, substream

__all__ = [
    "TooFewSessions",
    "TooFewSubjects",
    "TooFewPoints",
    "TooFewSamples",
    "ConstantInput",
    "LengthMismatch",
    "UndefinedMetric",
    "split_sessions_kfold",
    "split_hash",
    "f1_score",
    "age_tercile_groups",
    "GROUP_NAMES",
    "t_sf",
    "pearson_r",
    "welch_one_tailed",
    "holm_adjust",
    "fit_age_probe",
    "EvalHooks",
    "SeedResult",
    "EvalReport",
    "evaluate",
    "export_embeddings",
]

REPORT_VERSION = 1
GROUP_NAMES = ("young", "mid", "old")


class TooFewSessions(ValueError):
    pass


class TooFewSubjects(ValueError):
    pass


class TooFewPoints(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


class ConstantInput(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class UndefinedMetric(ValueError):
    """F1 with no positives anywhere; an error rather than a silent zero."""


# ---------------------------------------------------------------------------
# Splits and metrics
# ---------------------------------------------------------------------------


def split_sessions_kfold(session_ids: Sequence[str], k: int, seed: int) -> list[list[str]]:
    """Uniform random partition of sessions into k folds, sizes within 1."""
    ids = sorted(session_ids)
    if k < 1 or k > len(ids):
        raise TooFewSessions(f"cannot split {len(ids)} sessions into {k} folds")
    rng = substream(seed, STREAM_SPLIT)
    order = rng.permutation(len(ids))
    folds: list[list[str]] = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(ids[idx])
    return [sorted(f) for f in folds]


def split_hash(folds: Sequence[Sequence[str]]) -> str:
    """Stable digest of a fold split, for cross-run comparability checks."""
    return hashlib.sha256(json.dumps([list(f) for f in folds]).encode()).hexdigest()[:16]


def f1_score(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """2TP / (2TP + FP + FN) with hearing loss (1) as the positive class."""
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise LengthMismatch("empty inputs")
    tp = fp = fn = 0
    for p, y in zip(predictions, labels):
        if p not in (0, 1) or y not in (0, 1):
            raise ValueError("predictions and labels must be binary")
        if p == 1 and y == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif y == 1:
            fn += 1
    denom = 2 * tp + fp + fn
    if denom == 0:
        raise UndefinedMetric("no positives in predictions or labels")
    return 2 * tp / denom


def age_tercile_groups(subjects: Sequence[SubjectRecord]) -> tuple[list[str], list[str], list[str]]:
    """Sort by age and split into young/mid/old, remainders to younger groups."""
    if len(subjects) < 3:
        raise TooFewSubjects(f"need at least 3 subjects, got {len(subjects)}")
    ordered = sorted(subjects, key=lambda s: (s.age, s.subject_id))
    n = len(ordered)
    q, r = divmod(n, 3)
    sizes = [q + (1 if g < r else 0) for g in range(3)]
    groups = []
    start = 0
    for size in sizes:
        groups.append([s.subject_id for s in ordered[start : start + size]])
        start += size
    return tuple(groups)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t, via the regularized incomplete beta."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if np.isinf(t):
        return 0.0 if t > 0 else 1.0
    x = df / (df + t * t)
    half = 0.5 * float(betainc(df / 2.0, 0.5, x))
    return half if t >= 0 else 1.0 - half


def pearson_r(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Sample Pearson r with its t statistic and two-sided p-value."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise LengthMismatch(f"{x.shape} vs {y.shape}")
    n = x.size
    if n < 3:
        raise TooFewPoints(f"need at least 3 points, got {n}")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt((xc * xc).sum()))
    sy = float(np.sqrt((yc * yc).sum()))
    if sx == 0.0 or sy == 0.0:
        raise ConstantInput("pearson_r requires non-constant inputs")
    r = float((xc * yc).sum() / (sx * sy))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, np.inf if r > 0 else -np.inf, 0.0
    t = r * np.sqrt(n - 2) / np.sqrt(1.0 - r * r)
    p = 2.0 * t_sf(abs(t), n - 2)
    return r, float(t), float(p)


def welch_one_tailed(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, float]:
    """Welch's t-test of H1: mean(a) > mean(b); returns (t, df, one-tailed p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise TooFewSamples("need at least two scores per method")
    va = float(a.var(ddof=1)) / len(a)
    vb = float(b.var(ddof=1)) / len(b)
    diff = float(a.mean() - b.mean())
    if va + vb == 0.0:
        # degenerate zero-variance samples: the ordering is deterministic
        if diff > 0:
            return np.inf, float(len(a) + len(b) - 2), 0.0
        if diff < 0:
            return -np.inf, float(len(a) + len(b) - 2), 1.0
        return 0.0, float(len(a) + len(b) - 2), 0.5
    t = diff / np.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    return float(t), float(df), t_sf(float(t), df)


def holm_adjust(p_values: Sequence[float]) -> list[float]:
    """Holm-Bonferroni step-down adjustment; monotone in the raw p ranks."""
    m = len(p_values)
    order = sorted(range(m), key=lambda i: p_values[i])
    adjusted = [0.0] * m
    running = 0.0
    for rank, idx in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p_values[idx]))
        adjusted[idx] = running
    return adjusted


def fit_age_probe(
    embeddings: np.ndarray, ages: np.ndarray, ridge: float = 1e-6
) -> tuple[np.ndarray, float]:
    """Ridge least squares from frozen embeddings to age.

    Independent of the adversarial head by construction, so the diagnostic
    cannot be gamed by the age estimator's own weights. Returns (weights,
    intercept) for predictions X @ w + intercept.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(ages, dtype=np.float64)
    x_mean = x.mean(axis=0)
    y_mean = y.mean()
    xc = x - x_mean
    w = np.linalg.solve(xc.T @ xc + ridge * np.eye(x.shape[1]), xc.T @ (y - y_mean))
    return w, float(y_mean - x_mean @ w)


# ---------------------------------------------------------------------------
# The cross-validation harness
# ---------------------------------------------------------------------------


@dataclass
class EvalHooks:
    """Optional instrumentation for protocol-integrity checks.

    `on_train_subset(seed, fold, session_ids, dataset)` fires with the exact
    sub-dataset handed to the training stages; `on_prediction(seed, fold,
    segment, prob)` fires once per held-out prediction.
    """

    on_train_subset: Callable | None = None
    on_prediction: Callable | None = None


@dataclass
class SeedResult:
    seed: int
    split_digest: str
    fold_f1: list[float]
    overall_f1: float
    group_f1: dict[str, float | None]
    probe_r: float | None
    probe_t: float | None
    probe_p: float | None
    n_predictions: int
    n_skipped_subjects: int
    pretrain_loss: list[list[float]] = field(default_factory=list)
    finetune_loss: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "split_digest": self.split_digest,
            "fold_f1": self.fold_f1,
            "overall_f1": self.overall_f1,
            "group_f1": self.group_f1,
            "probe": {"r": self.probe_r, "t": self.probe_t, "p": self.probe_p},
            "n_predictions": self.n_predictions,
            "n_skipped_subjects": self.n_skipped_subjects,
            "pretrain_loss": self.pretrain_loss,
            "finetune_loss": self.finetune_loss,
        }


def _mean_std(values: Sequence[float]) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "per_seed": list(values)}
    mean = float(np.mean(vals))
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return {"mean": mean, "std": std, "per_seed": list(values)}


@dataclass
class EvalReport:
    variant: str
    k: int
    seeds: list[int]
    seed_results: list[SeedResult]
    counts: dict

    def overall(self) -> dict:
        return _mean_std([r.overall_f1 for r in self.seed_results])

    def group(self, name: str) -> dict:
        return _mean_std([r.group_f1.get(name) for r in self.seed_results])

    def probe(self) -> dict:
        rs = [r.probe_r for r in self.seed_results]
        ps = [r.probe_p for r in self.seed_results]
        abs_rs = [abs(r) for r in rs if r is not None]
        return {
            "mean_abs_r": float(np.mean(abs_rs)) if abs_rs else None,
            "per_seed_r": rs,
            "per_seed_p": ps,
        }

    def to_dict(self) -> dict:
        return {
            "report_version": REPORT_VERSION,
            "variant": self.variant,
            "k": self.k,
            "seeds": self.seeds,
            "overall_f1": self.overall(),
            "group_f1": {name: self.group(name) for name in GROUP_NAMES},
            "age_probe": self.probe(),
            "counts": self.counts,
            "per_seed": [r.to_dict() for r in self.seed_results],
        }


def _derived_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def evaluate(
    dataset: Dataset,
    variant: ModelVariant,
    k: int,
    seeds: Sequence[int],
    pretrain_config: PretrainConfig | None = None,
    finetune_config: FinetuneConfig | None = None,
    hooks: EvalHooks | None = None,
    probe: bool = True,
) -> EvalReport:
    """Subject-independent k-fold cross-validation over multiple seeds.

    For every (seed, fold): pre-train (variation-modeling variants only) and
    fine-tune on the k-1 training folds, then predict each non-anchor
    segment of the held-out fold exactly once. Per seed, predictions pooled
    across folds give the overall F1 and per-age-group F1; the age probe is
    fit per fold on training embeddings and correlated with true age at the
    subject level. Reported numbers aggregate mean +/- std over seeds.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    pretrain_config = pretrain_config or PretrainConfig()
    finetune_config = finetune_config or FinetuneConfig()
    hooks = hooks or EvalHooks()
    groups = dict(zip(GROUP_NAMES, age_tercile_groups(list(dataset.subjects.values()))))
    group_of = {sid: name for name, ids in groups.items() for sid in ids}

    seed_results = []
    total_skipped = 0
    for seed in seeds:
        folds = split_sessions_kfold(dataset.session_ids(), k, seed)
        digest = split_hash(folds)
        fold_f1s: list[float] = []
        preds: list[int] = []
        labels: list[int] = []
        pred_groups: list[str] = []
        probe_preds: dict[str, list[float]] = {}
        skipped: set[str] = set()
        pretrain_traces: list[list[float]] = []
        finetune_traces: list[dict] = []

        for fold_idx, held_out in enumerate(folds):
            train_sessions = sorted(set(dataset.session_ids()) - set(held_out))
            train_ds = dataset.subset_by_sessions(train_sessions)
            if hooks.on_train_subset:
                hooks.on_train_subset(seed, fold_idx, train_sessions, train_ds)

            encoder = None
            if variant.uses_pretraining:
                pre_cfg = replace(pretrain_config, seed=_derived_seed(seed, 101, fold_idx))
                encoder, trace = pretrain_vm(train_ds, pre_cfg)
                pretrain_traces.append(trace)
            fit_cfg = replace(finetune_config, seed=_derived_seed(seed, 102, fold_idx))
            bundle, traces = finetune(train_ds, encoder, variant, fit_cfg)
            finetune_traces.append(traces)

            test_ds = dataset.subset_by_sessions(held_out)
            instances, missing = training_instances(test_ds, variant)
            skipped.update(missing if variant.uses_anchor else [])
            if not instances:
                fold_f1s.append(None)
                continue
            anchors, _ = anchors_by_subject(test_ds)
            kw = {}
            if variant.uses_anchor:
                kw["anchors"] = [anchors[s.subject_id] for s in instances]
            if variant.uses_age_input:
                kw["ages"] = [test_ds.subjects[s.subject_id].age for s in instances]
            probs = predict_batch(bundle, instances, **kw)
            if hooks.on_prediction:
                for seg, prob in zip(instances, probs):
                    hooks.on_prediction(seed, fold_idx, seg, float(prob))
            fold_preds = [int(p > 0.5) for p in probs]
            fold_labels = [test_ds.subjects[s.subject_id].hearing_status for s in instances]
            preds.extend(fold_preds)
            labels.extend(fold_labels)
            pred_groups.extend(group_of[s.subject_id] for s in instances)
            try:
                fold_f1s.append(f1_score(fold_preds, fold_labels))
            except UndefinedMetric:
                fold_f1s.append(None)

            if probe and variant.uses_anchor:
                tr_instances, _ = training_instances(train_ds, variant)
                tr_anchors, _ = anchors_by_subject(train_ds)
                emb_tr = variation_embeddings(
                    bundle, tr_instances, [tr_anchors[s.subject_id] for s in tr_instances]
                )
                ages_tr = np.array(
                    [train_ds.subjects[s.subject_id].age for s in tr_instances], dtype=np.float64
                )
                w, intercept = fit_age_probe(emb_tr, ages_tr)
                emb_te = variation_embeddings(
                    bundle, instances, [anchors[s.subject_id] for s in instances]
                )
                for seg, age_hat in zip(instances, emb_te @ w + intercept):
                    probe_preds.setdefault(seg.subject_id, []).append(float(age_hat))

        overall = f1_score(preds, labels)
        group_f1: dict[str, float | None] = {}
        for name in GROUP_NAMES:
            sel = [i for i, g in enumerate(pred_groups) if g == name]
            if not sel:
                group_f1[name] = None
                continue
            try:
                group_f1[name] = f1_score([preds[i] for i in sel], [labels[i] for i in sel])
            except UndefinedMetric:
                group_f1[name] = None

        probe_r = probe_t = probe_p = None
        if probe_preds:
            subject_ids = sorted(probe_preds)
            true_ages = [dataset.subjects[s].age for s in subject_ids]
            mean_preds = [float(np.mean(probe_preds[s])) for s in subject_ids]
            probe_r, probe_t, probe_p = pearson_r(true_ages, mean_preds)

        total_skipped += len(skipped)
        seed_results.append(SeedResult(
            seed=seed,
            split_digest=digest,
            fold_f1=fold_f1s,
            overall_f1=overall,
            group_f1=group_f1,
            probe_r=probe_r,
            probe_t=probe_t,
            probe_p=probe_p,
            n_predictions=len(preds),
            n_skipped_subjects=len(skipped),
            pretrain_loss=pretrain_traces,
            finetune_loss=finetune_traces,
        ))

    counts = {
        "subjects": dataset.manifest.n_subjects,
        "sessions": dataset.manifest.n_sessions,
        "segments": dataset.manifest.n_segments,
        "skipped_subject_folds": total_skipped,
    }
    return EvalReport(
        variant=variant.value, k=k, seeds=list(seeds),
        seed_results=seed_results, counts=counts,
    )


# ---------------------------------------------------------------------------
# Embedding export
# ---------------------------------------------------------------------------


def export_embeddings(bundle: ModelBundle, dataset: Dataset, path) -> int:
    """Write one row per non-anchor segment: ids, age, label, 2H embedding.

    Tab-separated with a header; floats via repr, so values round-trip
    exactly. Returns the number of rows written.
    """
    instances, _ = training_instances(dataset, bundle.variant)
    anchors, _ = anchors_by_subject(dataset)
    emb = variation_embeddings(bundle, instances, [anchors[s.subject_id] for s in instances])
    width = emb.shape[1]
    header = ["segment_id", "subject_id", "age", "hearing_status"] + [
        f"e{i}" for i in range(width)
    ]
    with open(Path(path), "w") as fh:
        fh.write("\t".join(header) + "\n")
        for seg, row in zip(instances, emb):
            rec = dataset.subjects[seg.subject_id]
            cells = [seg.segment_id, seg.subject_id, str(rec.age), str(rec.hearing_status)]
            cells.extend(repr(v) for v in row)
            fh.write("\t".join(cells) + "\n")
    return len(instances)
