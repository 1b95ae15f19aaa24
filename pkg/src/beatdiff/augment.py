"""Beat classifier and the real-only vs real+synthetic augmentation comparison."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted
from torch import nn

from . import checkpoint as ckpt
from .ingest.dataset import BeatDataset
from .signal import CLASSES, BeatClass, Heartbeat, TaskKind


POOLED = 8  # time cells kept after the last conv stage


class _ConvNet(nn.Module):
    def __init__(self, channels, kernels, n_features, n_classes):
        super().__init__()
        layers, c_in = [], 1
        for c, k in zip(channels, kernels):
            layers += [nn.Conv1d(c_in, c, k, padding=k // 2), nn.ReLU(), nn.MaxPool1d(2)]
            c_in = c
        self.body = nn.Sequential(*layers[:-1], nn.AdaptiveAvgPool1d(POOLED), nn.Flatten())
        self.features = nn.Sequential(nn.Linear(c_in * POOLED, n_features), nn.ReLU())
        self.head = nn.Linear(n_features, n_classes)

    def embed(self, x):
        return self.features(self.body(x[:, None, :] - 0.5))

    def forward(self, x):
        return self.head(self.embed(x))


class BeatClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Small 1-D CNN: three conv stages, pooling to a fixed number of time cells, one hidden layer.

    ``transform`` returns the hidden-layer activations (``n_features`` wide), the
    feature space used for classifier-based FID.
    """

    def __init__(
        self,
        channels=(16, 32, 64),
        kernels=(7, 5, 5),
        n_features=64,
        learning_rate=1e-3,
        epochs=20,
        batch_size=64,
        classes=("N", "V", "F"),
        random_state=0,
    ):
        self.channels = channels
        self.kernels = kernels
        self.n_features = n_features
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.classes = classes
        self.random_state = random_state

    def _build(self):
        return _ConvNet(tuple(self.channels), tuple(self.kernels), self.n_features, len(self.classes)).double()

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if X.shape[0] == 0:
            raise ValueError("empty training set")
        self.classes_ = np.array([BeatClass.parse(c).value for c in self.classes])
        lookup = {c: i for i, c in enumerate(self.classes_)}
        unknown = set(y.tolist()) - set(lookup)
        if unknown:
            raise ValueError(f"labels outside the class list: {sorted(unknown)}")
        if len(set(y.tolist())) < 2:
            raise ValueError("degenerate training set: fewer than two classes")
        targets = torch.as_tensor([lookup[v] for v in y])
        xt = torch.as_tensor(X)
        rng = np.random.default_rng(self.random_state)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.random_state)
            net = self._build()
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        loss_fn = nn.CrossEntropyLoss()
        net.train()
        for _ in range(self.epochs):
            order = rng.permutation(X.shape[0])
            for start in range(0, order.size, self.batch_size):
                idx = torch.as_tensor(order[start : start + self.batch_size])
                opt.zero_grad()
                loss_fn(net(xt[idx]), targets[idx]).backward()
                opt.step()
        net.eval()
        self.net_ = net
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected beats of length {self.n_features_in_}")
        return torch.as_tensor(X)

    def predict_proba(self, X):
        with torch.no_grad():
            return torch.softmax(self.net_(self._check(X)), dim=1).numpy()

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def transform(self, X):
        with torch.no_grad():
            return self.net_.embed(self._check(X)).numpy()

    def save(self, path):
        check_is_fitted(self)
        params = self.get_params()
        params = {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
        ckpt.save(path, {"kind": "classifier", "params": params, "length": self.n_features_in_}, ckpt.state_dict_arrays(self.net_))

    @classmethod
    def load(cls, path) -> "BeatClassifier":
        manifest, arrays = ckpt.load(path)
        if manifest.get("kind") != "classifier":
            raise ValueError(f"{path} is not a classifier checkpoint")
        p = manifest["params"]
        clf = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in p.items()})
        clf.classes_ = np.array([BeatClass.parse(c).value for c in clf.classes])
        clf.n_features_in_ = int(manifest["length"])
        clf.net_ = ckpt.load_state_arrays(clf._build(), arrays).eval()
        return clf


def train_classifier(train: BeatDataset, **params) -> BeatClassifier:
    if not len(train):
        raise ValueError("empty training set")
    return BeatClassifier(**params).fit(train.X, train.y)


@dataclass
class ClassificationReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray
    classes: Sequence[str]
    setting: str = ""
    audit: Dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, y_true, y_pred, classes, setting="", audit=None) -> "ClassificationReport":
        classes = list(classes)
        pos = {c: i for i, c in enumerate(classes)}
        k = len(classes)
        conf = np.zeros((k, k), dtype=np.int64)
        for t, p in zip(y_true, y_pred):
            if t not in pos or p not in pos:
                raise ValueError(f"class mismatch: {t!r}/{p!r} not in {classes}")
            conf[pos[t], pos[p]] += 1
        tp = np.diag(conf).astype(float)
        pred_tot, true_tot = conf.sum(0), conf.sum(1)
        prec = np.divide(tp, pred_tot, out=np.zeros(k), where=pred_tot > 0)
        rec = np.divide(tp, true_tot, out=np.zeros(k), where=true_tot > 0)
        f1 = np.divide(2 * prec * rec, prec + rec, out=np.zeros(k), where=(prec + rec) > 0)
        total = conf.sum()
        acc = float(tp.sum() / total) if total else 0.0
        return cls(acc, float(prec.mean()), float(rec.mean()), float(f1.mean()), conf, classes, setting, dict(audit or {}))

    def as_row(self):
        return {"setting": self.setting, "accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1}


def evaluate_classifier(clf: BeatClassifier, test: BeatDataset, setting: str = "") -> ClassificationReport:
    """Accuracy plus macro precision/recall/F1 (0/0 counted as 0)."""
    check_is_fitted(clf)
    missing = set(test.y.tolist()) - set(clf.classes_.tolist())
    if missing:
        raise ValueError(f"class mismatch: test classes {sorted(missing)} unknown to the classifier")
    return ClassificationReport.from_predictions(test.y, clf.predict(test.X), clf.classes_, setting)


def balancing_counts(ds: BeatDataset) -> Dict[str, int]:
    """Synthetic beats per class needed to lift every class to the majority count."""
    counts = {c.value: int(np.sum(ds.y == c.value)) for c in CLASSES}
    top = max(counts.values())
    return {c: top - n for c, n in counts.items() if n > 0}


def synthesize_augmentation(diffusion, counts: Dict[str, int], seed: int = 0, length: int = 270) -> BeatDataset:
    """Generated beats per class; ``diffusion`` is a fitted BeatDiffusion or a DiffusionCheckpoint."""
    from .engine import SynthesisRequest, synthesize_batch

    model = getattr(diffusion, "checkpoint_", diffusion)
    reqs = [
        SynthesisRequest(TaskKind.GENERATION, c, seed=(seed, BeatClass(c).index, i))
        for c in sorted(counts, key=lambda c: counts[c], reverse=True)
        for i in range(counts[c])
    ]
    if not reqs:
        return BeatDataset([])
    X = synthesize_batch(reqs, model.model, model.schedule, model.spectral, model.beat_length)
    beats = [Heartbeat(x, r.label, "synthetic", i) for i, (x, r) in enumerate(zip(X, reqs))]
    return BeatDataset(beats, "train", {"synthetic": "generated"})


def run_settings(real_train: BeatDataset, real_test: BeatDataset, diffusion, n_synth=None, seed: int = 0, **clf_params):
    """Compare a classifier trained on real data only with one trained on real + generated beats.

    ``n_synth`` is an int (beats per class), a per-class dict, or None to
    balance every class up to the majority count. Both runs share one classifier
    configuration and seed.
    """
    if n_synth is None:
        counts = balancing_counts(real_train)
    elif isinstance(n_synth, dict):
        counts = {BeatClass.parse(c).value: int(n) for c, n in n_synth.items()}
    else:
        counts = {c.value: int(n_synth) for c in real_train.classes()}
    params = dict(clf_params, random_state=clf_params.get("random_state", seed))
    audit = {"seed": seed, "classifier": {k: v for k, v in BeatClassifier(**params).get_params().items()}, "n_synth": counts}

    clf1 = train_classifier(real_train, **params)
    rep1 = evaluate_classifier(clf1, real_test, "setting1-real")
    rep1.audit = dict(audit)

    synth = synthesize_augmentation(diffusion, counts, seed) if sum(counts.values()) else BeatDataset([])
    augmented = BeatDataset(list(real_train.beats) + list(synth.beats), "train")
    clf6 = train_classifier(augmented, **params)
    rep6 = evaluate_classifier(clf6, real_test, "setting6-real+synthetic")
    rep6.audit = dict(audit, n_train=len(augmented))
    rep1.audit["n_train"] = len(real_train)
    return rep1, rep6


def reports_csv(reports: Sequence[ClassificationReport], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setting", "accuracy", "precision", "recall", "f1"])
    for r in reports:
        w.writerow([r.setting, repr(r.accuracy), repr(r.precision), repr(r.recall), repr(r.f1)])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def reports_text(reports: Sequence[ClassificationReport]) -> str:
    lines = [f"{'setting':<26}{'acc':>8}{'prec':>8}{'rec':>8}{'f1':>8}"]
    for r in reports:
        lines.append(f"{r.setting:<26}{r.accuracy:>8.4f}{r.precision:>8.4f}{r.recall:>8.4f}{r.f1:>8.4f}")
    return "\n".join(lines)
