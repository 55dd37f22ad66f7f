"""Loss, Adam, leave-one-speaker-out folds, WAR/UAR metrics, training and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .model import ModelConfig, Params, forward, init_params

logger = logging.getLogger(__name__)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label], via log-sum-exp."""
    return ad.cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: Params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(m, v, 0, lr, beta1, beta2, eps)


def adam_step(params: Params, grads: Dict[str, Optional[np.ndarray]], state: AdamState) -> Tuple[Params, AdamState]:
    """One bias-corrected Adam update; returns new parameter tensors and state."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_params: Params = {}
    new_m, new_v = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        dt = p.dtype.type
        m = dt(b1) * state.m[name] + dt(1.0 - b1) * g
        v = dt(b2) * state.v[name] + dt(1.0 - b2) * (g * g)
        update = dt(state.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        new_params[name] = Tensor(p.data - update, requires_grad=p.requires_grad)
        new_m[name], new_v[name] = m, v
    return new_params, replace(state, m=new_m, v=new_v, step=step)


# ---------------------------------------------------------------------------
# data


@dataclass
class LabeledDataset:
    """Segments with integer labels; ``features`` has shape ``(n, c, f, d)``."""

    features: np.ndarray
    labels: np.ndarray
    speakers: np.ndarray
    clip_ids: List[str]
    k: int
    label_names: List[str] = field(default_factory=list)
    speaker_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.speakers = np.asarray(self.speakers, dtype=np.int64)
        n = len(self.labels)
        if self.features.shape[0] != n or len(self.speakers) != n or len(self.clip_ids) != n:
            raise ValueError("features, labels, speakers and clip ids must have equal length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValueError(f"labels must lie in [0, {self.k})")
        if not self.label_names:
            self.label_names = [str(i) for i in range(self.k)]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            self.features[idx],
            self.labels[idx],
            self.speakers[idx],
            [self.clip_ids[i] for i in idx],
            self.k,
            list(self.label_names),
            list(self.speaker_names),
        )


def loso_splits(ds: LabeledDataset) -> List[Tuple[np.ndarray, np.ndarray]]:
    """One (train_idx, test_idx) pair per speaker, in ascending speaker order."""
    speakers = np.unique(ds.speakers)
    if len(speakers) < 2:
        raise ValueError("leave-one-speaker-out needs at least two speakers")
    folds = []
    for spk in speakers:
        test = np.flatnonzero(ds.speakers == spk)
        train = np.flatnonzero(ds.speakers != spk)
        test_clips = {ds.clip_ids[i] for i in test}
        if any(ds.clip_ids[i] in test_clips for i in train):
            raise ValueError(f"a clip of speaker {spk} also appears under another speaker")
        folds.append((train, test))
    return folds


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EvalReport:
    confusion: np.ndarray
    war: float
    uar: float
    label_names: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "war": self.war,
            "uar": self.uar,
            "labels": list(self.label_names),
        }

    def to_text(self) -> str:
        k = self.confusion.shape[0]
        names = self.label_names or [str(i) for i in range(k)]
        width = max(6, max(len(n) for n in names) + 1)
        lines = ["truth \\ pred".ljust(width + 6) + "".join(n.rjust(width) for n in names)]
        for name, row in zip(names, self.confusion):
            lines.append(name.ljust(width + 6) + "".join(str(int(v)).rjust(width) for v in row))
        lines.append(f"WAR {self.war:.4f}")
        lines.append(f"UAR {self.uar:.4f}")
        return "\n".join(lines) + "\n"


def confusion_matrix(truth: Sequence[int], pred: Sequence[int], k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return cm


def compute_metrics(confusion, label_names: Optional[List[str]] = None) -> EvalReport:
    """WAR = trace / total; UAR = mean recall over classes with support."""
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion matrix has negative counts")
    total = int(cm.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    support = cm.sum(axis=1)
    # Exact rationals so balanced supports give WAR == UAR bit-for-bit.
    war = Fraction(int(np.trace(cm)), total)
    recalls = [Fraction(int(cm[c, c]), int(support[c])) for c in range(cm.shape[0]) if support[c] > 0]
    uar = sum(recalls, Fraction(0)) / len(recalls)
    return EvalReport(cm.astype(np.int64), float(war), float(uar), list(label_names or []))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHyper:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"


@dataclass
class TrainedModel:
    cfg: ModelConfig
    params: Params
    norm_mean: np.ndarray
    norm_std: np.ndarray
    history: List[dict] = field(default_factory=list)

    def normalize(self, features: np.ndarray) -> np.ndarray:
        dt = next(iter(self.params.values())).dtype
        out = (features - self.norm_mean[:, None]) / self.norm_std[:, None]
        return out.astype(dt, copy=False)

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        out["normalizer.mean"] = self.norm_mean
        out["normalizer.std"] = self.norm_std
        return out

    def to_bytes(self, extra: Optional[dict] = None) -> bytes:
        return checkpoint.dumps(self.cfg, self.tensors(), extra)

    def save(self, path, extra: Optional[dict] = None) -> None:
        checkpoint.save(path, self.cfg, self.tensors(), extra)

    @classmethod
    def from_tensors(cls, cfg: ModelConfig, tensors: Dict[str, np.ndarray]) -> "TrainedModel":
        tensors = dict(tensors)
        mean = tensors.pop("normalizer.mean")
        std = tensors.pop("normalizer.std")
        params = {name: Tensor(arr, requires_grad=True) for name, arr in tensors.items()}
        return cls(cfg, params, mean, std)

    @classmethod
    def load(cls, path) -> Tuple["TrainedModel", dict]:
        cfg, tensors, extra = checkpoint.load(path)
        return cls.from_tensors(cfg, tensors), extra


def feature_stats(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Corpus-wide mean and standard deviation, broadcast to one entry per Mel band.

    A single pair of statistics is used on purpose: per-band standardization
    flattens the background level of every band, and the model (shared 1x1
    embedding, full-band windows, mean pooling) cannot tell bands apart by
    position, so it would lose most of the cue that separates the classes.
    """
    f = features.shape[2]
    mean = float(features.mean(dtype=np.float64))
    std = float(features.std(dtype=np.float64))
    std = std if std > 1e-8 else 1.0
    return np.full(f, mean, np.float32), np.full(f, std, np.float32)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *stream]))


def iterate_batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_fold(
    train: LabeledDataset,
    cfg: ModelConfig,
    hyper: TrainHyper = TrainHyper(),
    fold: int = 0,
    eval_set: Optional[LabeledDataset] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainedModel:
    """Train one model with seeded shuffling; deterministic for fixed inputs."""
    if len(train) == 0:
        raise ValueError("cannot train on an empty dataset")
    if train.k != cfg.k:
        raise ValueError(f"dataset has k={train.k} classes, model expects k={cfg.k}")
    dtype = np.dtype(hyper.dtype)
    norm_mean, norm_std = feature_stats(train.features)
    params = init_params(cfg, seed=int(np.random.SeedSequence([hyper.seed, fold]).generate_state(1)[0]), dtype=dtype)
    model = TrainedModel(cfg, params, norm_mean, norm_std)
    x_all = model.normalize(train.features)
    state = AdamState.create(params, hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)

    for epoch in range(hyper.epochs):
        total_loss = 0.0
        truth, preds = [], []
        for idx in iterate_batches(len(train), hyper.batch_size, _rng(hyper.seed, fold, epoch)):
            x = Tensor(x_all[idx], dtype=dtype)
            y = train.labels[idx]
            with ad.Tape() as tape:
                logits = forward(x, cfg, model.params)
                loss = cross_entropy(logits, y)
            tape.backward(loss, model.params.values())
            grads = {name: p.grad for name, p in model.params.items()}
            model.params, state = adam_step(model.params, grads, state)
            total_loss += loss.item() * len(idx)
            truth.append(y)
            preds.append(logits.data.argmax(axis=-1))
        report = compute_metrics(confusion_matrix(np.concatenate(truth), np.concatenate(preds), cfg.k))
        record = {
            "epoch": epoch,
            "fold": fold,
            "split": "train",
            "loss": total_loss / len(train),
            "war": report.war,
            "uar": report.uar,
        }
        model.history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        logger.info("fold %d epoch %d loss %.4f war %.4f", fold, epoch, record["loss"], record["war"])
        if eval_set is not None and len(eval_set):
            test_loss = mean_loss(model, eval_set, hyper.batch_size)
            rep = evaluate(model, eval_set, "segment", hyper.batch_size)
            record = {"epoch": epoch, "fold": fold, "split": "test", "loss": test_loss, "war": rep.war, "uar": rep.uar}
            model.history.append(record)
            if on_epoch is not None:
                on_epoch(record)
    return model


# ---------------------------------------------------------------------------
# evaluation


def segment_probabilities(model: TrainedModel, ds: LabeledDataset, batch_size: int = 64) -> np.ndarray:
    x_all = model.normalize(ds.features)
    out = []
    for idx in iterate_batches(len(ds), batch_size):
        logits = forward(Tensor(x_all[idx]), model.cfg, model.params)
        out.append(ad.softmax(logits, axis=-1).data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.k))


def mean_loss(model: TrainedModel, ds: LabeledDataset, batch_size: int = 64) -> float:
    x_all = model.normalize(ds.features)
    total = 0.0
    for idx in iterate_batches(len(ds), batch_size):
        logits = forward(Tensor(x_all[idx]), model.cfg, model.params)
        total += cross_entropy(logits, ds.labels[idx]).item() * len(idx)
    return total / len(ds)


def vote_clips(probs: np.ndarray, labels: np.ndarray, clip_ids: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    """Average segment probabilities per clip; argmax ties go to the lowest class."""
    order: Dict[str, int] = {}
    for cid in clip_ids:
        order.setdefault(cid, len(order))
    groups = np.array([order[c] for c in clip_ids], dtype=np.int64)
    sums = np.zeros((len(order), probs.shape[1]))
    np.add.at(sums, groups, probs)
    counts = np.bincount(groups, minlength=len(order))[:, None]
    clip_labels = np.zeros(len(order), dtype=np.int64)
    clip_labels[groups] = labels
    return (sums / counts).argmax(axis=1), clip_labels


def evaluate(model: TrainedModel, ds: LabeledDataset, vote: str = "segment", batch_size: int = 64) -> EvalReport:
    """Score a test set per segment, or per clip by probability averaging."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty test set")
    if ds.k != model.cfg.k:
        raise ValueError(f"test set has k={ds.k} classes, model expects k={model.cfg.k}")
    probs = segment_probabilities(model, ds, batch_size)
    if vote == "segment":
        truth, pred = ds.labels, probs.argmax(axis=1)
    elif vote == "clip":
        pred, truth = vote_clips(probs, ds.labels, ds.clip_ids)
    else:
        raise ValueError(f"vote must be 'segment' or 'clip', got {vote!r}")
    return compute_metrics(confusion_matrix(truth, pred, model.cfg.k), ds.label_names)


def nearest_centroid_accuracy(train: LabeledDataset, test: LabeledDataset) -> float:
    """Sanity baseline: classify mean log-Mel vectors by the nearest class centroid."""
    def embed(ds):
        return ds.features.mean(axis=(1, 3))

    tr, te = embed(train), embed(test)
    centroids = np.stack([tr[train.labels == c].mean(axis=0) for c in range(train.k)])
    dist = ((te[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float((dist.argmin(axis=1) == test.labels).mean())
