"""Embedding storage and the retrieval / evaluation protocols.

Patch-level search is exhaustive leave-one-out k-NN with majority voting;
slide-level search ranks slides by the median of per-patch minimum
distances.  A softmax-regression probe with stratified folds covers the
supervised evaluation path.  Everything is exact and deterministic; no
approximate indexing.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ClassTooSmall,
    EmptySet,
    InsufficientNeighbors,
    InsufficientSlides,
    LengthMismatch,
)

VOTE_SIZES = (1, 3, 5)
METRIC_NAMES = {1: "top1", 3: "mv3", 5: "mv5"}


@dataclass
class EmbeddingStore:
    """Row-major feature matrix plus per-row metadata.

    meta[i] holds slide_id, label, optional patch coords and patient_id.
    """

    vectors: np.ndarray
    meta: list[dict]

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or len(self.vectors) != len(self.meta):
            raise LengthMismatch(
                f"{self.vectors.shape} rows vs {len(self.meta)} meta entries"
            )
        if len(self.vectors) and not np.isfinite(self.vectors).all():
            raise ValueError("embedding matrix contains NaN or Inf")

    def __len__(self) -> int:
        return len(self.vectors)

    def labels(self) -> list:
        return [m["label"] for m in self.meta]


def save_store(store: EmbeddingStore, out_dir: str | Path) -> None:
    """embeddings.bin (little-endian f32, row-major) + embeddings.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "embeddings.bin").write_bytes(
        np.ascontiguousarray(store.vectors, dtype="<f4").tobytes()
    )
    sidecar = {
        "rows": int(store.vectors.shape[0]),
        "dim": int(store.vectors.shape[1]) if store.vectors.size else 0,
        "meta": store.meta,
    }
    (out / "embeddings.json").write_text(
        json.dumps(sidecar, indent=1), encoding="utf-8"
    )


def load_store(in_dir: str | Path) -> EmbeddingStore:
    src = Path(in_dir)
    sidecar = json.loads((src / "embeddings.json").read_text(encoding="utf-8"))
    raw = (src / "embeddings.bin").read_bytes()
    vectors = np.frombuffer(raw, dtype="<f4").reshape(sidecar["rows"], sidecar["dim"])
    return EmbeddingStore(vectors=vectors.copy(), meta=sidecar["meta"])


@dataclass
class RetrievalResult:
    """Ranked neighbors plus per-metric verdicts and aggregates."""

    neighbor_ids: list[list[int]]
    distances: list[list[float]]
    verdicts: dict[str, list]
    accuracy: dict[str, float]
    macro_f1: dict[str, float]
    truths: list = field(default_factory=list)


def _vote(labels: list, order_rank: dict) -> object:
    """Majority label; ties go to the tied label seen earliest in rank order."""
    counts = Counter(labels)
    best = max(counts.values())
    tied = {lab for lab, c in counts.items() if c == best}
    return min(tied, key=lambda lab: order_rank[lab])


def _verdicts_from_ranking(
    ranked_labels: list[list], truths: list, k: int
) -> tuple[dict, dict, dict]:
    verdicts: dict[str, list] = {}
    accuracy: dict[str, float] = {}
    f1: dict[str, float] = {}
    for m in VOTE_SIZES:
        if m > k:
            continue
        name = METRIC_NAMES[m]
        preds = []
        for labels in ranked_labels:
            top = labels[:m]
            first_rank = {}
            for r, lab in enumerate(top):
                first_rank.setdefault(lab, r)
            preds.append(_vote(top, first_rank))
        verdicts[name] = preds
        accuracy[name] = float(np.mean([p == t for p, t in zip(preds, truths)]))
        f1[name] = macro_f1(preds, truths)
    return verdicts, accuracy, f1


def _exclusion_groups(store: EmbeddingStore, exclusion: str) -> list:
    """Group key per row; rows sharing a key are never retrieved for each
    other.  self -> row identity, same_slide -> slide, same_patient ->
    patient when present (falling back to the slide)."""
    if exclusion == "self":
        return list(range(len(store)))
    if exclusion == "same_slide":
        return [("s", m["slide_id"]) for m in store.meta]
    if exclusion == "same_patient":
        return [
            ("p", m["patient_id"]) if m.get("patient_id") is not None
            else ("s", m["slide_id"])
            for m in store.meta
        ]
    raise ValueError(f"unknown exclusion {exclusion!r}")


def knn_leave_one_out(
    store: EmbeddingStore, k: int = 5, exclusion: str = "self"
) -> RetrievalResult:
    """Exact Euclidean k-NN over all rows with leave-one-out exclusion.

    Neighbors are ordered by (distance, row index).  Verdicts cover top1
    and majority votes at 3 and 5 where k allows.
    """
    n = len(store)
    if n == 0:
        raise EmptySet("store is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    groups = _exclusion_groups(store, exclusion)
    vecs = store.vectors.astype(np.float64)
    labels = store.labels()
    neighbor_ids: list[list[int]] = []
    distances: list[list[float]] = []
    ranked_labels: list[list] = []
    for i in range(n):
        dist = np.sqrt(((vecs - vecs[i]) ** 2).sum(axis=1))
        eligible = np.array([groups[j] != groups[i] for j in range(n)])
        idx = np.flatnonzero(eligible)
        if len(idx) < k:
            raise InsufficientNeighbors(
                f"row {i}: {len(idx)} eligible neighbors, need {k}"
            )
        order = idx[np.lexsort((idx, dist[idx]))][:k]
        neighbor_ids.append([int(j) for j in order])
        distances.append([float(dist[j]) for j in order])
        ranked_labels.append([labels[j] for j in order])
    verdicts, accuracy, f1 = _verdicts_from_ranking(ranked_labels, labels, k)
    return RetrievalResult(
        neighbor_ids=neighbor_ids,
        distances=distances,
        verdicts=verdicts,
        accuracy=accuracy,
        macro_f1=f1,
        truths=labels,
    )


def wsi_distance(query_rows: np.ndarray, target_rows: np.ndarray) -> float:
    """Median over query patches of each patch's minimum distance to the
    target's patches; an even count averages the two middle values."""
    q = np.asarray(query_rows, dtype=np.float64)
    t = np.asarray(target_rows, dtype=np.float64)
    if q.size == 0 or t.size == 0:
        raise EmptySet("wsi_distance needs non-empty patch sets")
    mins = np.empty(len(q))
    for i in range(len(q)):
        mins[i] = np.sqrt(((t - q[i]) ** 2).sum(axis=1)).min()
    return float(np.median(mins))


def wsi_leave_one_out(
    store: EmbeddingStore, k: int = 5, exclude_same_patient: bool = True
) -> RetrievalResult:
    """Slide-level retrieval: rank other slides by wsi_distance and vote.

    Slides of the query's patient are excluded when patient ids exist and
    exclude_same_patient is set.  Slide label = label of its rows.
    """
    slide_ids = sorted({m["slide_id"] for m in store.meta})
    if len(slide_ids) < 2:
        raise InsufficientSlides(f"{len(slide_ids)} slides, need at least 2")
    rows = {sid: np.flatnonzero([m["slide_id"] == sid for m in store.meta])
            for sid in slide_ids}
    vecs = store.vectors.astype(np.float64)
    label_of = {}
    patient_of = {}
    for m in store.meta:
        label_of[m["slide_id"]] = m["label"]
        patient_of[m["slide_id"]] = m.get("patient_id")
    neighbor_ids: list[list[int]] = []
    distances: list[list[float]] = []
    ranked_labels: list[list] = []
    for qi, sid in enumerate(slide_ids):
        cands = []
        for ti, tid in enumerate(slide_ids):
            if tid == sid:
                continue
            if (
                exclude_same_patient
                and patient_of[sid] is not None
                and patient_of[sid] == patient_of[tid]
            ):
                continue
            d = wsi_distance(vecs[rows[sid]], vecs[rows[tid]])
            cands.append((d, ti))
        if len(cands) < k:
            raise InsufficientNeighbors(
                f"slide {sid}: {len(cands)} eligible slides, need {k}"
            )
        cands.sort()
        top = cands[:k]
        neighbor_ids.append([ti for _, ti in top])
        distances.append([d for d, _ in top])
        ranked_labels.append([label_of[slide_ids[ti]] for _, ti in top])
    truths = [label_of[sid] for sid in slide_ids]
    verdicts, accuracy, f1 = _verdicts_from_ranking(ranked_labels, truths, k)
    return RetrievalResult(
        neighbor_ids=neighbor_ids,
        distances=distances,
        verdicts=verdicts,
        accuracy=accuracy,
        macro_f1=f1,
        truths=truths,
    )


def macro_f1(preds: list, truths: list) -> float:
    """Unweighted mean of per-class F1 over classes present on either side;
    a class with zero precision + recall contributes 0."""
    if len(preds) != len(truths):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truths)} truths")
    classes = sorted(set(preds) | set(truths))
    scores = []
    for cls in classes:
        tp = sum(1 for p, t in zip(preds, truths) if p == cls and t == cls)
        fp = sum(1 for p, t in zip(preds, truths) if p == cls and t != cls)
        fn = sum(1 for p, t in zip(preds, truths) if p != cls and t == cls)
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores)) if scores else 0.0


def probe_loss(w: np.ndarray, x: np.ndarray, y_onehot: np.ndarray) -> float:
    """Mean cross-entropy of softmax(x @ w.T) against one-hot targets."""
    logits = x @ w.T
    logits = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(logits).sum(axis=1))
    return float(np.mean(log_z - (logits * y_onehot).sum(axis=1)))


def probe_grad(w: np.ndarray, x: np.ndarray, y_onehot: np.ndarray) -> np.ndarray:
    """Analytic gradient of probe_loss in w: (softmax - y)^T x / n."""
    logits = x @ w.T
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    p = e / e.sum(axis=1, keepdims=True)
    return (p - y_onehot).T @ x / len(x)


def train_probe(
    x: np.ndarray, y: np.ndarray, n_classes: int, epochs: int, lr: float
) -> tuple[np.ndarray, list[float]]:
    """Full-batch gradient descent from zero weights; x gains a bias column.

    Returns the weight matrix (n_classes, dim + 1) and the loss history.
    """
    xb = np.hstack([x, np.ones((len(x), 1))])
    y_onehot = np.zeros((len(x), n_classes))
    y_onehot[np.arange(len(x)), y] = 1.0
    w = np.zeros((n_classes, xb.shape[1]))
    history = []
    for _ in range(epochs):
        history.append(probe_loss(w, xb, y_onehot))
        w = w - lr * probe_grad(w, xb, y_onehot)
    history.append(probe_loss(w, xb, y_onehot))
    return w, history


def predict_probe(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    xb = np.hstack([x, np.ones((len(x), 1))])
    return np.argmax(xb @ w.T, axis=1)


def stratified_folds(y: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Shuffled per-class round-robin fold assignment."""
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=np.int64)
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if len(idx) < folds:
            raise ClassTooSmall(f"class {cls!r} has {len(idx)} rows, need {folds}")
        rng.shuffle(idx)
        fold_of[idx] = np.arange(len(idx)) % folds
    return fold_of


@dataclass
class ProbeResult:
    fold_accuracy: list[float]
    fold_macro_f1: list[float]
    accuracy: str
    macro_f1: str
    folds: int
    epochs: int
    lr: float
    seed: int
    loss_histories: list[list[float]] = field(default_factory=list, repr=False)


def _mean_std(values: list[float]) -> str:
    mean = float(np.mean(values)) * 100.0
    std = float(np.std(values, ddof=1)) * 100.0 if len(values) > 1 else 0.0
    return f"{mean:.2f}±{std:.2f}"


def linear_probe_cv(
    store: EmbeddingStore,
    folds: int = 5,
    epochs: int = 200,
    lr: float = 0.1,
    seed: int = 0,
) -> ProbeResult:
    """Stratified k-fold softmax-regression probe on frozen embeddings.

    Per fold, a single linear layer is trained on the other folds with
    full-batch gradient descent; reports accuracy and macro-F1 as
    "mean±std" percentage strings across folds.
    """
    labels = store.labels()
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ClassTooSmall("probe needs at least 2 classes")
    class_idx = {c: i for i, c in enumerate(classes)}
    y = np.array([class_idx[lab] for lab in labels])
    x = store.vectors.astype(np.float64)
    fold_of = stratified_folds(y, folds, seed)
    accs, f1s, histories = [], [], []
    for fold in range(folds):
        test = fold_of == fold
        w, history = train_probe(x[~test], y[~test], len(classes), epochs, lr)
        preds = predict_probe(w, x[test])
        truth = y[test]
        accs.append(float(np.mean(preds == truth)))
        f1s.append(macro_f1(list(preds), list(truth)))
        histories.append(history)
    return ProbeResult(
        fold_accuracy=accs,
        fold_macro_f1=f1s,
        accuracy=_mean_std(accs),
        macro_f1=_mean_std(f1s),
        folds=folds,
        epochs=epochs,
        lr=lr,
        seed=seed,
        loss_histories=histories,
    )
