"""ZSL / GZSL prediction, calibrated stacking and accuracy metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class EvalReport:
    """ZSL and GZSL accuracies in percent; U/S/H are ``None`` in ZSL mode."""
    T1: float
    U: float | None
    S: float | None
    H: float | None
    per_class: dict[int, float] = field(default_factory=dict)
    gamma_cs: float = 0.0
    p: int | None = None
    confusion: dict[str, int] = field(default_factory=dict)
    mode: str = "gzsl"

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return json.dumps(d, sort_keys=True)


def _argmax_lowest_id(scores: np.ndarray, classes: list[int]) -> np.ndarray:
    """Row-wise argmax over columns; ties resolve to the smallest class id."""
    order = np.argsort(np.asarray(classes), kind="stable")
    ranked = np.asarray(scores)[:, order]
    return np.asarray(classes)[order][np.argmax(ranked, axis=1)]


def predict(scores, classes: list[int], candidates=None, gamma_cs: float = 0.0,
            seen=()) -> np.ndarray:
    """Argmax over ``candidates`` of ``score - gamma_cs * [class is seen]``.

    ``scores`` is ``[N, C]`` with column ``j`` belonging to ``classes[j]``.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    classes = list(classes)
    if candidates is None:
        candidates = classes
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    if gamma_cs < 0:
        raise ValueError("gamma_cs must be >= 0")
    cols = [classes.index(c) for c in candidates]
    sub = scores[:, cols].copy()
    seen = set(seen)
    if gamma_cs:
        sub -= gamma_cs * np.array([c in seen for c in candidates], dtype=np.float64)
    return _argmax_lowest_id(sub, list(candidates))


def predict_zsl(scores, classes, unseen) -> np.ndarray:
    return predict(scores, classes, candidates=list(unseen))


def predict_gzsl(scores, classes, seen, unseen, gamma_cs: float = 0.0) -> np.ndarray:
    return predict(scores, classes, candidates=list(seen) + list(unseen),
                   gamma_cs=gamma_cs, seen=seen)


def per_class_accuracy(predictions, labels, class_set) -> dict[int, float]:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    out = {}
    for c in class_set:
        mask = labels == c
        if not mask.any():
            raise ValueError(f"class {c} has no test images")
        out[int(c)] = 100.0 * float(np.mean(predictions[mask] == c))
    return out


def per_class_top1(predictions, labels, class_set) -> float:
    """Mean over classes of per-class accuracy, in percent."""
    acc = per_class_accuracy(predictions, labels, class_set)
    return float(np.mean(list(acc.values())))


def harmonic_mean(U: float, S: float) -> float:
    if U < 0 or S < 0:
        raise ValueError("accuracies must be non-negative")
    return 0.0 if U + S == 0 else 2.0 * U * S / (U + S)


def gzsl_metrics(scores, classes, labels, seen, unseen, seen_mask, gamma_cs: float):
    """U, S, H for one calibration factor; ``seen_mask`` flags seen-class test rows."""
    preds = predict_gzsl(scores, classes, seen, unseen, gamma_cs)
    seen_mask = np.asarray(seen_mask, dtype=bool)
    present_seen = [c for c in seen if np.any(labels[seen_mask] == c)]
    U = per_class_top1(preds[~seen_mask], labels[~seen_mask], unseen)
    S = per_class_top1(preds[seen_mask], labels[seen_mask], present_seen) if present_seen \
        else 0.0
    return U, S, harmonic_mean(U, S), preds


def select_gamma_cs(scores, classes, labels, seen, unseen, seen_mask, grid) -> float:
    """Calibration factor with the highest H on the given pool (first on ties)."""
    best_g, best_h = None, -1.0
    for g in grid:
        h = gzsl_metrics(scores, classes, labels, seen, unseen, seen_mask, g)[2]
        if h > best_h:
            best_g, best_h = g, h
    return float(best_g)


def evaluate_scores(scores, classes, labels, seen, unseen, seen_mask, gamma_cs=0.0,
                    p=None, mode: str = "gzsl") -> EvalReport:
    """Build the report from a precomputed ``[N, C]`` score matrix of test images.

    ``mode="zsl"`` only ranks unseen classes on unseen images; per-class
    accuracies then refer to those predictions.
    """
    if mode not in ("zsl", "gzsl"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    labels = np.asarray(labels)
    seen_mask = np.asarray(seen_mask, dtype=bool)
    unseen_rows = ~seen_mask
    zsl = predict_zsl(scores[unseen_rows], classes, unseen)
    T1 = per_class_top1(zsl, labels[unseen_rows], unseen)
    if mode == "zsl":
        return EvalReport(T1=T1, U=None, S=None, H=None,
                          per_class=per_class_accuracy(zsl, labels[unseen_rows], unseen),
                          gamma_cs=float(gamma_cs), p=p, mode="zsl")
    U, S, H, preds = gzsl_metrics(scores, classes, labels, seen, unseen, seen_mask, gamma_cs)
    present = [c for c in classes if np.any(labels == c)]
    per_class = per_class_accuracy(preds, labels, present)
    confusion = {
        "unseen_as_seen": int(np.sum(np.isin(preds[unseen_rows], list(seen)))),
        "seen_as_unseen": int(np.sum(np.isin(preds[seen_mask], list(unseen)))),
    }
    return EvalReport(T1=T1, U=U, S=S, H=H, per_class=per_class, gamma_cs=float(gamma_cs),
                      p=p, confusion=confusion)


def evaluate(model, dataset, split=None, p: int | None = None, gamma_cs: float | None = 0.0,
             partial: bool = True, gamma_grid=None, mode: str = "gzsl") -> EvalReport:
    """Score the test pool of ``split`` with ``model`` and report T1/U/S/H.

    ``gamma_cs=None`` picks the calibration factor on this same pool over
    ``gamma_grid`` (use it on a validation view, not on the test split).
    """
    split = split or dataset.split
    cfg = model.cfg
    p = (cfg.eval.p or cfg.alignment.p) if p is None else p
    if not 1 <= p <= model.k:
        raise ValueError(f"p={p} must lie in [1, k={model.k}]")
    classes = sorted(split.seen) + sorted(split.unseen)
    text = model.class_embeddings(dataset.docs.embeddings, classes)
    test = np.asarray(split.test_images, dtype=np.int64)
    labels = dataset.bank.labels[test]
    scores = model.score(dataset.bank.features[test], text, p=p if partial else None)
    seen_mask = np.isin(labels, split.seen)
    if gamma_cs is None:
        grid = gamma_grid if gamma_grid is not None else cfg.eval.gamma_grid
        gamma_cs = select_gamma_cs(scores, classes, labels, split.seen, split.unseen,
                                   seen_mask, grid)
    return evaluate_scores(scores, classes, labels, split.seen, split.unseen, seen_mask,
                           gamma_cs, p if partial else None, mode)
