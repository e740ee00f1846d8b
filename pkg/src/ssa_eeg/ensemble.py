"""One CNN per grouped component, majority voting, subject-level evaluation.

Class 1 ("dyslexic") is the positive class: sensitivity is its recall and
specificity the recall of class 0 ("control").
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.model_selection import StratifiedKFold

from .config import PipelineConfig
from .errors import ClassImbalanceError, InvalidFolds, InvalidGroupCount
from .nn import CnnModel, TrainHyper, default_model, predict_from_probs, train
from .spectral import FeatureDataset, label_to_int

log = logging.getLogger(__name__)


def vote(predictions: Sequence) -> int:
    """Majority class over ``(class, prob_vector)`` pairs.

    A split vote goes to the class with the larger summed probability; if
    that is tied too, class 0 wins.
    """
    if len(predictions) == 0:
        raise ValueError("vote needs at least one prediction")
    counts = [0, 0]
    mass = [0.0, 0.0]
    for cls, probs in predictions:
        counts[int(cls)] += 1
        mass[0] += float(probs[0])
        mass[1] += float(probs[1])
    if counts[0] != counts[1]:
        return int(counts[1] > counts[0])
    return int(mass[1] > mass[0])


@dataclass(frozen=True)
class EnsembleHyper:
    lr: float = 1e-3
    epochs: int = 60
    batch: int = 8
    dropout: float = 0.5
    dense_units: int = 32
    filters: tuple[int, ...] = (8, 16, 32)

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "EnsembleHyper":
        c = cfg.cnn
        return cls(c.lr, c.epochs, c.batch, c.dropout, c.dense_units, tuple(c.filters))


def member_seed(master: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(master), *map(int, path)]).generate_state(1)[0])


@dataclass
class EnsembleModel:
    members: list[CnnModel]
    groups: list[int]

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        shapes = {m.input_shape for m in self.members}
        if len(shapes) != 1:
            raise ValueError(f"members disagree on input shape: {shapes}")

    def member_probs(self, x: np.ndarray) -> np.ndarray:
        """Members x N x 2 probabilities for an N x G x C x C feature tensor."""
        return np.stack([m.predict_proba(x[:, [g]]) for m, g in zip(self.members, self.groups)])

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        probs = self.member_probs(x)
        return combine(probs), probs.mean(axis=0)

    def save(self, directory, hyper: EnsembleHyper | None = None) -> Path:
        directory = Path(directory)
        for i, (m, g) in enumerate(zip(self.members, self.groups)):
            m.save(directory / f"member_{i}", {"group": g, **(asdict(hyper) if hyper else {})})
        (directory / "ensemble.json").write_text(json.dumps(
            {"groups": self.groups, "vote": "majority/probability-sum/class-0"}, indent=1))
        return directory

    @classmethod
    def load(cls, directory) -> "EnsembleModel":
        directory = Path(directory)
        meta = json.loads((directory / "ensemble.json").read_text())
        members = [CnnModel.load(directory / f"member_{i}") for i in range(len(meta["groups"]))]
        return cls(members, list(meta["groups"]))


def combine(member_probs: np.ndarray) -> np.ndarray:
    """Vote per sample over a Members x N x 2 probability stack."""
    classes = predict_from_probs(member_probs.reshape(-1, 2)).reshape(member_probs.shape[:2])
    return np.array([vote(list(zip(classes[:, j], member_probs[:, j])))
                     for j in range(member_probs.shape[1])], dtype=int)


def _check_classes(labels: np.ndarray, subjects: Sequence[str]) -> None:
    per_class = [len({s for s, y in zip(subjects, labels) if y == c}) for c in (0, 1)]
    if min(per_class) < 2:
        raise ClassImbalanceError(f"need >= 2 subjects per class, got {per_class}")


def train_member(ds: FeatureDataset, group: int, hyper: EnsembleHyper, seed: int) -> CnnModel:
    x = ds.tensor(group)
    model = default_model(x.shape[-1], seed, hyper.filters, hyper.dense_units, hyper.dropout)
    train(model, x, ds.labels(), TrainHyper(hyper.lr, hyper.epochs, hyper.batch, seed))
    return model


def train_ensemble(ds: FeatureDataset, n_members: int, hyper: EnsembleHyper | None = None,
                   seed: int = 0, *, _fold: int = 0) -> EnsembleModel:
    """Train members on the first ``n_members`` groups (highest variance first)."""
    hyper = hyper or EnsembleHyper()
    G = ds.samples[0].n_groups
    if not 1 <= n_members <= G:
        raise InvalidGroupCount(f"members={n_members} outside [1, {G}]")
    _check_classes(ds.labels(), [s.subject_id for s in ds.samples])
    members = [train_member(ds, g, hyper, member_seed(seed, _fold, g)) for g in range(n_members)]
    return EnsembleModel(members, list(range(n_members)))


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass
class Confusion:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "Confusion":
        y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
        return cls(int(np.sum((y_true == 1) & (y_pred == 1))),
                   int(np.sum((y_true == 0) & (y_pred == 0))),
                   int(np.sum((y_true == 0) & (y_pred == 1))),
                   int(np.sum((y_true == 1) & (y_pred == 0))))

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.tn + other.tn,
                         self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else float("nan")

    @property
    def sensitivity(self) -> float:
        pos = self.tp + self.fn
        return self.tp / pos if pos else float("nan")

    @property
    def specificity(self) -> float:
        neg = self.tn + self.fp
        return self.tn / neg if neg else float("nan")

    def metrics(self) -> dict:
        return {"accuracy": self.accuracy, "sensitivity": self.sensitivity,
                "specificity": self.specificity}


@dataclass
class EvalReport:
    n_members: int
    confusion: Confusion
    folds: list[Confusion] = field(default_factory=list)
    predictions: dict = field(default_factory=dict)  # subject_id -> predicted class

    @property
    def accuracy(self) -> float:
        return self.confusion.accuracy

    @property
    def sensitivity(self) -> float:
        return self.confusion.sensitivity

    @property
    def specificity(self) -> float:
        return self.confusion.specificity

    def summary(self) -> dict:
        return {"members": self.n_members, **asdict(self.confusion),
                **self.confusion.metrics(),
                "folds": [{**asdict(f), **f.metrics()} for f in self.folds],
                "predictions": dict(sorted(self.predictions.items()))}


@dataclass
class _FoldPlan:
    index: int
    train_subjects: list[str]
    test_subjects: list[str]


def subject_folds(ds: FeatureDataset, folds: int, seed: int) -> list[_FoldPlan]:
    """Stratified k-fold over subjects (never over samples)."""
    subjects = ds.subject_ids
    label_of = {s.subject_id: label_to_int(s.label) for s in ds.samples}
    y = np.array([label_of[s] for s in subjects])
    minority = int(min(np.sum(y == 0), np.sum(y == 1)))
    if folds < 2 or folds > minority:
        raise InvalidFolds(f"folds={folds} needs 2 <= folds <= minority subject count ({minority})")
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed % (2 ** 32))
    plans = []
    for i, (tr, te) in enumerate(skf.split(np.zeros(len(y)), y)):
        plans.append(_FoldPlan(i, [subjects[j] for j in tr], [subjects[j] for j in te]))
    return plans


class _MemberCache:
    """Test-fold probabilities per (fold, group), trained at most once."""

    def __init__(self, ds: FeatureDataset, plans, hyper: EnsembleHyper, seed: int):
        self.ds, self.plans, self.hyper, self.seed = ds, plans, hyper, seed
        self._probs: dict = {}

    def probs(self, fold: int, group: int) -> np.ndarray:
        key = (fold, group)
        if key not in self._probs:
            plan = self.plans[fold]
            train_ds = self.ds.subset(plan.train_subjects)
            _check_classes(train_ds.labels(), [s.subject_id for s in train_ds.samples])
            model = train_member(train_ds, group, self.hyper, member_seed(self.seed, fold, group))
            test_ds = self.ds.subset(plan.test_subjects)
            self._probs[key] = model.predict_proba(test_ds.tensor(group))
            log.info("fold %d group %d trained", fold, group)
        return self._probs[key]


def _report(ds: FeatureDataset, plans, cache: _MemberCache, n_members: int) -> EvalReport:
    total = Confusion()
    per_fold = []
    preds: dict = {}
    for plan in plans:
        test_ds = ds.subset(plan.test_subjects)
        stack = np.stack([cache.probs(plan.index, g) for g in range(n_members)])
        sample_cls = combine(stack)
        sample_prob = stack.mean(axis=0)
        # subject-level decision: vote over that subject's samples (one in subject mode)
        by_subject: dict = {}
        for s, c, p in zip(test_ds.samples, sample_cls, sample_prob):
            by_subject.setdefault(s.subject_id, []).append((c, p))
        label_of = {s.subject_id: label_to_int(s.label) for s in test_ds.samples}
        ids = sorted(by_subject)
        y_pred = [vote(by_subject[i]) for i in ids]
        y_true = [label_of[i] for i in ids]
        conf = Confusion.from_predictions(y_true, y_pred)
        per_fold.append(conf)
        total = total + conf
        preds.update(zip(ids, (int(v) for v in y_pred)))
    return EvalReport(n_members, total, per_fold, preds)


def cross_validate(ds: FeatureDataset, folds: int = 4, n_members: int = 4,
                   hyper: EnsembleHyper | None = None, seed: int = 0) -> EvalReport:
    hyper = hyper or EnsembleHyper()
    G = ds.samples[0].n_groups
    if not 1 <= n_members <= G:
        raise InvalidGroupCount(f"members={n_members} outside [1, {G}]")
    plans = subject_folds(ds, folds, seed)
    return _report(ds, plans, _MemberCache(ds, plans, hyper, seed), n_members)


def sweep_groups(ds: FeatureDataset, members_range: Iterable[int], folds: int = 4,
                 hyper: EnsembleHyper | None = None, seed: int = 0) -> list[tuple[int, EvalReport]]:
    """Cross-validated report for every ensemble size in ``members_range``.

    Member k of every fold is the same model for all sizes that include it,
    so each (fold, group) network is trained once.
    """
    hyper = hyper or EnsembleHyper()
    sizes = list(members_range)
    G = ds.samples[0].n_groups
    for k in sizes:
        if not 1 <= k <= G:
            raise InvalidGroupCount(f"members={k} outside [1, {G}]")
    plans = subject_folds(ds, folds, seed)
    cache = _MemberCache(ds, plans, hyper, seed)
    return [(k, _report(ds, plans, cache, k)) for k in sizes]


# --------------------------------------------------------------------------
# report emission
# --------------------------------------------------------------------------

FOLD_COLUMNS = ("members", "fold", "tp", "tn", "fp", "fn", "accuracy", "sensitivity", "specificity")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def reports_csv(reports: Sequence[tuple[int, EvalReport]]) -> str:
    """One row per ensemble size per fold."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FOLD_COLUMNS)
    for k, rep in reports:
        for i, conf in enumerate(rep.folds):
            m = conf.metrics()
            w.writerow([k, i, conf.tp, conf.tn, conf.fp, conf.fn,
                        _fmt(m["accuracy"]), _fmt(m["sensitivity"]), _fmt(m["specificity"])])
    return buf.getvalue()


def summary_csv(reports: Sequence[tuple[int, EvalReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("members", "tp", "tn", "fp", "fn", "accuracy", "sensitivity", "specificity"))
    for k, rep in reports:
        c = rep.confusion
        w.writerow([k, c.tp, c.tn, c.fp, c.fn, _fmt(c.accuracy), _fmt(c.sensitivity),
                    _fmt(c.specificity)])
    return buf.getvalue()


def report_json(rep: EvalReport, extra: dict | None = None) -> str:
    return json.dumps({**(extra or {}), **rep.summary()}, indent=1, sort_keys=True)
