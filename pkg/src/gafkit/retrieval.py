"""Embedding extraction, exact Euclidean retrieval, KNN classification,
confusion matrices, and the linear probe."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import ClipDataset
from .fileio import (expect_eof, read_f32_array, read_magic, read_str, read_u16,
                     read_u32, write_f32_array, write_magic, write_str, write_u16,
                     write_u32)
from .gafnet import GafModel, pool_gaf
from .training import TrainerState, lr_at

GAFI_MAGIC = b"GAFI"
GAFI_VERSION = 1


@dataclass
class RetrievalIndex:
    """Labeled embedding database supporting exact Euclidean k-NN queries."""

    embeddings: np.ndarray  # (N, D) float32
    labels: np.ndarray  # (N,) int
    clip_ids: list[str]
    class_set: tuple[str, ...]

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.ndim != 2 or len(self.embeddings) < 1:
            raise ValueError("embeddings must be a nonempty (N, D) matrix")
        if not (len(self.embeddings) == len(self.labels) == len(self.clip_ids)):
            raise ValueError("embeddings, labels, and clip ids must align")
        if not np.all(np.isfinite(self.embeddings)):
            raise ValueError("embeddings contain non-finite values")
        if self.labels.min() < 0 or self.labels.max() >= len(self.class_set):
            raise ValueError("labels outside the class set")


@dataclass
class EvalReport:
    hit_at_k: dict[int, float]
    knn_accuracy: dict[int, float]
    confusion: np.ndarray  # (C, C) counts, rows = ground truth
    per_class_accuracy: dict[str, float]
    class_set: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "hit_at_k": {str(k): v for k, v in sorted(self.hit_at_k.items())},
            "knn_accuracy": {str(k): v for k, v in sorted(self.knn_accuracy.items())},
            "confusion": self.confusion.tolist(),
            "per_class_accuracy": dict(sorted(self.per_class_accuracy.items())),
            "class_set": list(self.class_set),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def extract_embeddings(state_or_model: TrainerState | GafModel, dataset: ClipDataset,
                       batch_size: int = 32) -> RetrievalIndex:
    """One embedding per clip, computed on the original (unmodified) frames."""
    model = state_or_model.model if isinstance(state_or_model, TrainerState) else state_or_model
    cfg = dataset.config
    ps = model.cfg.encoder.patch_size
    if cfg.width % ps or cfg.height % ps:
        raise ValueError(
            f"dataset frames {cfg.width}x{cfg.height} incompatible with patch size {ps}"
        )
    model.eval()
    frames_all = dataset.frames("original")
    boxes = None
    if model.cfg.feature_mode == "cropped":
        r = np.float32(cfg.agent_radius)
        boxes = np.concatenate([dataset.centers - r, dataset.centers + r], axis=-1)
    out = np.empty((len(dataset), model.cfg.width), dtype=np.float32)
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = slice(start, min(start + batch_size, len(dataset)))
            frames = torch.from_numpy(frames_all[idx])
            b = torch.from_numpy(boxes[idx]) if boxes is not None else None
            out[idx] = model.gaf(frames, b).numpy()
    return RetrievalIndex(embeddings=out, labels=dataset.labels.copy(),
                          clip_ids=list(dataset.clip_ids),
                          class_set=dataset.class_set)


def _distances(index: RetrievalIndex, query: np.ndarray, metric: str) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    emb = index.embeddings.astype(np.float64)
    if metric == "euclidean":
        return np.sqrt(((emb - q) ** 2).sum(axis=1))
    if metric == "cosine":  # exploratory only; retrieval quality is reported on euclidean
        qn = q / max(np.linalg.norm(q), 1e-12)
        en = emb / np.clip(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12, None)
        return 1.0 - en @ qn
    raise ValueError(f"unknown metric {metric!r}")


def nearest(index: RetrievalIndex, query: np.ndarray, k: int,
            metric: str = "euclidean") -> list[tuple[str, float]]:
    """Exact k nearest rows, ascending by distance; ties break on smaller clip id."""
    n = len(index.embeddings)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    dists = _distances(index, query, metric)
    order = sorted(range(n), key=lambda i: (dists[i], index.clip_ids[i]))[:k]
    return [(index.clip_ids[i], float(dists[i])) for i in order]


def _neighbor_label_matrix(index: RetrievalIndex, queries: np.ndarray,
                           k_max: int) -> np.ndarray:
    """Labels of the k_max nearest database rows for each query row."""
    if not 1 <= k_max <= len(index.embeddings):
        raise ValueError(f"k must be in [1, {len(index.embeddings)}], got {k_max}")
    out = np.empty((len(queries), k_max), dtype=np.int64)
    id_order = np.argsort(np.asarray(index.clip_ids))  # stable tie-break helper
    rank_of = np.empty(len(index.clip_ids), dtype=np.int64)
    rank_of[id_order] = np.arange(len(index.clip_ids))
    emb = index.embeddings.astype(np.float64)
    for qi, q in enumerate(np.asarray(queries, dtype=np.float64)):
        d = np.sqrt(((emb - q) ** 2).sum(axis=1))
        order = np.lexsort((rank_of, d))[:k_max]
        out[qi] = index.labels[order]
    return out


def hit_at_k(index: RetrievalIndex, queries: np.ndarray, query_labels: np.ndarray,
             k: int) -> float:
    """Fraction of queries whose top-k retrieved set shares their label."""
    if len(queries) == 0:
        raise ValueError("queries must be nonempty")
    neighbors = _neighbor_label_matrix(index, queries, k)
    hits = (neighbors == np.asarray(query_labels)[:, None]).any(axis=1)
    return float(hits.mean())


def knn_classify(index: RetrievalIndex, query: np.ndarray, k: int) -> str:
    """Majority label among the k nearest; ties go to the nearest tied label."""
    ranked = _neighbor_label_matrix(index, np.asarray(query)[None, :], k)[0]
    counts = np.bincount(ranked, minlength=len(index.class_set))
    best = counts.max()
    for label in ranked:  # nearest-first scan resolves ties deterministically
        if counts[label] == best:
            return index.class_set[label]
    raise AssertionError("unreachable")


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray,
                     num_classes: int) -> np.ndarray:
    """Counts with rows indexed by ground truth and columns by prediction."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must have equal length")
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (labels, predictions), 1)
    return matrix


def evaluate(index: RetrievalIndex, query_index: RetrievalIndex,
             hit_ks=(1, 2, 3), knn_ks=range(1, 21)) -> EvalReport:
    """Full retrieval report: Hit@K sweep, KNN accuracy sweep, confusion of the
    1-NN classifier, and per-class accuracy."""
    n = len(index.embeddings)
    hit_ks = sorted(set(int(k) for k in hit_ks if 1 <= int(k) <= n))
    knn_ks = sorted(set(int(k) for k in knn_ks if 1 <= int(k) <= n))
    if not hit_ks and not knn_ks:
        raise ValueError("no valid k values for this index size")
    k_max = max(hit_ks + knn_ks)
    neighbors = _neighbor_label_matrix(index, query_index.embeddings, k_max)
    truth = query_index.labels
    hits = {k: float((neighbors[:, :k] == truth[:, None]).any(axis=1).mean())
            for k in hit_ks}

    knn_acc = {}
    preds_k1 = None
    for k in knn_ks:
        preds = np.empty(len(truth), dtype=np.int64)
        for qi in range(len(truth)):
            ranked = neighbors[qi, :k]
            counts = np.bincount(ranked, minlength=len(index.class_set))
            best = counts.max()
            preds[qi] = next(lab for lab in ranked if counts[lab] == best)
        knn_acc[k] = float((preds == truth).mean())
        if k == 1:
            preds_k1 = preds
    if preds_k1 is None:
        preds_k1 = neighbors[:, 0]
    confusion = confusion_matrix(preds_k1, truth, len(index.class_set))
    per_class = {}
    for ci, cls in enumerate(index.class_set):
        total = int(confusion[ci].sum())
        per_class[cls] = float(confusion[ci, ci] / total) if total else float("nan")
    return EvalReport(hit_at_k=hits, knn_accuracy=knn_acc, confusion=confusion,
                      per_class_accuracy=per_class, class_set=index.class_set)


# -- linear probe ----------------------------------------------------------------


@dataclass
class ProbeResult:
    accuracy: float
    per_class_accuracy: dict[str, float]
    confusion: np.ndarray
    history: list[dict] = field(default_factory=list)


def train_linear_head(embeddings: np.ndarray, labels: np.ndarray, num_classes: int,
                      epochs: int = 100, lr: float = 0.05, seed: int = 0) -> torch.nn.Linear:
    """Fit a single linear classifier on fixed embeddings with cross-entropy."""
    torch.manual_seed(seed)
    head = torch.nn.Linear(embeddings.shape[1], num_classes)
    x = torch.from_numpy(np.asarray(embeddings, dtype=np.float32))
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(head(x), y)
        loss.backward()
        opt.step()
    return head


def linear_probe(state: TrainerState, train_dataset: ClipDataset,
                 test_dataset: ClipDataset, epochs: int = 5, lr: float = 5e-4,
                 batch_size: int | None = None) -> ProbeResult:
    """Attach a linear classifier to the video embedding and fine-tune the whole
    network with class supervision; reports test accuracy and confusion."""
    model = copy.deepcopy(state.model)
    model.train()
    num_classes = len(train_dataset.class_set)
    torch.manual_seed(state.run.seed + 101)
    head = torch.nn.Linear(model.cfg.width, num_classes)
    bs = batch_size or state.run.batch_size
    frames_all = train_dataset.frames("original")
    labels_all = train_dataset.labels
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([state.run.seed, 101])))
    history = []
    if epochs > 0:
        params = [p for p in model.parameters() if p.requires_grad] + list(head.parameters())
        opt = torch.optim.Adam(params, lr=lr)
        steps_per_epoch = math.ceil(len(train_dataset) / bs)
        total_steps = epochs * steps_per_epoch
        for epoch in range(epochs):
            perm = rng.permutation(len(train_dataset))
            running = 0.0
            for b_i, start in enumerate(range(0, len(train_dataset), bs)):
                idx = perm[start:start + bs]
                for group in opt.param_groups:
                    group["lr"] = lr_at(epoch * steps_per_epoch + b_i, total_steps, lr)
                frames = torch.from_numpy(frames_all[idx])
                logits = head(model.gaf(frames))
                loss = torch.nn.functional.cross_entropy(
                    logits, torch.from_numpy(labels_all[idx]))
                opt.zero_grad()
                loss.backward()
                opt.step()
                running += float(loss.detach())
            history.append({"epoch": epoch, "loss": running / steps_per_epoch})

    model.eval()
    test_frames = test_dataset.frames("original")
    preds = np.empty(len(test_dataset), dtype=np.int64)
    with torch.no_grad():
        for start in range(0, len(test_dataset), 64):
            sl = slice(start, min(start + 64, len(test_dataset)))
            logits = head(model.gaf(torch.from_numpy(test_frames[sl])))
            preds[sl] = logits.argmax(dim=1).numpy()
    confusion = confusion_matrix(preds, test_dataset.labels, num_classes)
    accuracy = float((preds == test_dataset.labels).mean())
    per_class = {}
    for ci, cls in enumerate(test_dataset.class_set):
        total = int(confusion[ci].sum())
        per_class[cls] = float(confusion[ci, ci] / total) if total else float("nan")
    return ProbeResult(accuracy=accuracy, per_class_accuracy=per_class,
                       confusion=confusion, history=history)


# -- GAFI index file ---------------------------------------------------------------


def save_index(index: RetrievalIndex, path: str) -> None:
    with open(path, "wb") as fh:
        write_magic(fh, GAFI_MAGIC, GAFI_VERSION)
        n, d = index.embeddings.shape
        write_u32(fh, n)
        write_u32(fh, d)
        write_f32_array(fh, index.embeddings)
        fh.write(np.ascontiguousarray(index.labels, dtype="<u2").tobytes())
        write_u16(fh, len(index.class_set))
        for cls in index.class_set:
            write_str(fh, cls)
        for cid in index.clip_ids:
            write_str(fh, cid)


def load_index(path: str) -> RetrievalIndex:
    with open(path, "rb") as fh:
        read_magic(fh, GAFI_MAGIC, GAFI_VERSION)
        n = read_u32(fh)
        d = read_u32(fh)
        embeddings = read_f32_array(fh, (n, d))
        raw = fh.read(2 * n)
        labels = np.frombuffer(raw, dtype="<u2").astype(np.int64)
        class_set = tuple(read_str(fh) for _ in range(read_u16(fh)))
        clip_ids = [read_str(fh) for _ in range(n)]
        expect_eof(fh)
    return RetrievalIndex(embeddings=embeddings, labels=labels, clip_ids=clip_ids,
                          class_set=class_set)
