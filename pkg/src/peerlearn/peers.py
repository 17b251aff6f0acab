"""Peer classifiers and the peer-learning ensemble.

:class:`PeerClassifier` is a softmax head (linear, or with one ReLU hidden
layer) over precomputed feature vectors, restricted to a subset of classes
and trained by seeded mini-batch gradient descent under one of the losses in
:mod:`peerlearn.losses`.

:class:`PeerLearningClassifier` partitions the classes into head/body/tail
groups from training frequencies, trains one peer per token of a peer spec
such as ``"HBT_B_T"`` on the instances of its groups, and combines the peers'
opinions with :func:`peerlearn.voting.consensus_vote`. Its training objective
is the sum of the peers' ``alpha``-weighted losses.
"""
from __future__ import annotations

import json
import logging
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import losses as L
from .data import PredictionRecords, _ensure_parent
from .exceptions import ConfigError, InputError, NumericError, ParseError, TrainingError
from .taxonomy import (
    FrequencyPartitioner,
    GroupPartition,
    format_peer_config,
    parse_peer_config,
    peer_class_subset,
)
from .voting import PeerPrediction, batch_vote

logger = logging.getLogger(__name__)

MODEL_FORMAT = "peerlearn-model"
MODEL_VERSION = 1
_EPS = 1e-12


def _as_features(X, n_features=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise InputError(f"expected a 2-d feature matrix, got shape {X.shape}")
    if n_features is not None and X.shape[1] != n_features:
        raise InputError(f"expected {n_features} features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        row = int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])
        raise InputError(f"non-finite feature values in row {row}")
    return X


class PeerView(NamedTuple):
    classes: list
    index: np.ndarray
    X: np.ndarray
    y: np.ndarray


def peer_targets(X, y, partition: GroupPartition, group_set) -> PeerView:
    """Instances whose label lies in ``group_set``, labels re-indexed to the subset.

    ``y`` in the returned view holds positions into ``classes``.
    """
    classes = peer_class_subset(partition, group_set)
    y = np.asarray(y, dtype=np.int64)
    index = np.flatnonzero(np.isin(y, classes))
    if index.size == 0:
        raise ConfigError(
            f"no training instances for group set {format_peer_config([group_set])}")
    lookup = {c: i for i, c in enumerate(classes)}
    y_local = np.array([lookup[int(c)] for c in y[index]], dtype=np.int64)
    return PeerView(classes, index, np.asarray(X)[index], y_local)


class PeerClassifier(ClassifierMixin, BaseEstimator):
    """Softmax classifier over a class subset trained with a long-tail loss.

    Parameters
    ----------
    loss : {"cross_entropy", "focal", "ldam", "class_balanced"}
    gamma, beta, margin_scale, logit_scale : float or None
        Loss hyperparameters; None picks the loss default. ``margin_scale``
        None means the rarest class gets an LDAM margin of 0.5.
    alpha : float
        Weight of this peer's loss in the ensemble objective.
    classes : sequence of int or None
        Output classes. Defaults to the labels seen in ``fit``.
    hidden_units : int
        0 for a linear head, otherwise the width of one ReLU hidden layer.
    cosine_head : bool or None
        Use cosine-similarity logits (unit-normalized features and weight
        rows, no bias). None enables it exactly for LDAM, whose logit scale
        assumes logits in [-1, 1].
    epochs, batch_size, learning_rate, weight_decay, momentum
        Mini-batch gradient descent settings.
    random_state : int
        Seed for initialization and batch shuffling.
    """

    def __init__(self, loss="cross_entropy", gamma=None, beta=None, margin_scale=None,
                 logit_scale=None, alpha=1.0, classes=None, hidden_units=0, cosine_head=None,
                 epochs=100, batch_size=64, learning_rate=0.1, weight_decay=0.0, momentum=0.0,
                 random_state=0):
        self.loss = loss
        self.gamma = gamma
        self.beta = beta
        self.margin_scale = margin_scale
        self.logit_scale = logit_scale
        self.alpha = alpha
        self.classes = classes
        self.hidden_units = hidden_units
        self.cosine_head = cosine_head
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.random_state = random_state

    def _loss_spec(self) -> L.LossSpec:
        kind = L.normalize_kind(self.loss)
        kw = {}
        if kind == L.FOCAL:
            kw["gamma"] = self.gamma
        elif kind == L.CLASS_BALANCED:
            kw["beta"] = self.beta
        elif kind == L.LDAM:
            kw["margin_scale"] = self.margin_scale
            kw["logit_scale"] = self.logit_scale
        return L.LossSpec(kind, **kw)

    def _check_params(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("weight_decay must be >= 0 and momentum in [0, 1)")
        if self.hidden_units < 0:
            raise ConfigError("hidden_units must be >= 0")

    def _prepare(self, X, y):
        self._check_params()
        X = _as_features(X)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (X.shape[0],):
            raise InputError("y must be 1-d with one label per row of X")
        if len(y) == 0:
            raise InputError("cannot fit on zero instances")
        if self.classes is None:
            classes = np.unique(y)
        else:
            classes = np.asarray(sorted(set(int(c) for c in self.classes)), dtype=np.int64)
            if classes.size == 0:
                raise ConfigError("classes must be nonempty")
        missing = np.setdiff1d(y, classes)
        if missing.size:
            raise InputError(f"labels {missing.tolist()} are not among the peer's classes")
        self.classes_ = classes
        self.n_features_in_ = X.shape[1]
        y_local = np.searchsorted(classes, y)
        self.class_counts_ = np.bincount(y_local, minlength=len(classes))

        spec = self._loss_spec()
        self.margins_ = None
        self.class_weights_ = None
        if spec.kind == L.LDAM:
            if spec.margin_scale is None:
                spec = spec.with_margin_scale(L.ldam_default_scale(self.class_counts_))
            self.margins_ = L.ldam_margins(self.class_counts_, spec.margin_scale)
        elif spec.kind == L.CLASS_BALANCED:
            self.class_weights_ = L.class_balanced_weights(self.class_counts_, spec.beta)
        self.loss_spec_ = spec
        self.cosine_ = spec.kind == L.LDAM if self.cosine_head is None else bool(self.cosine_head)
        self._init_params(np.random.default_rng(self.random_state))
        return X, y_local

    def _init_params(self, rng):
        k, d = len(self.classes_), self.n_features_in_
        if self.hidden_units:
            h = self.hidden_units
            self.hidden_weights_ = rng.normal(scale=np.sqrt(2.0 / d), size=(h, d))
            self.hidden_bias_ = np.zeros(h)
            self.coef_ = rng.normal(scale=np.sqrt(1.0 / h), size=(k, h))
        else:
            self.hidden_weights_ = None
            self.hidden_bias_ = None
            if self.cosine_:
                self.coef_ = rng.normal(scale=np.sqrt(1.0 / d), size=(k, d))
            else:
                self.coef_ = np.zeros((k, d))
        self.intercept_ = np.zeros(k)

    def _params(self):
        names = ["coef_"] if self.cosine_ else ["coef_", "intercept_"]
        if self.hidden_weights_ is not None:
            names += ["hidden_weights_", "hidden_bias_"]
        return names

    def _forward(self, X):
        pre = None
        feats = X
        if self.hidden_weights_ is not None:
            pre = X @ self.hidden_weights_.T + self.hidden_bias_
            feats = np.maximum(pre, 0.0)
        if not self.cosine_:
            return feats @ self.coef_.T + self.intercept_, (pre, feats, None)
        f_norm = np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), _EPS)
        w_norm = np.maximum(np.linalg.norm(self.coef_, axis=1, keepdims=True), _EPS)
        f_hat, w_hat = feats / f_norm, self.coef_ / w_norm
        z = f_hat @ w_hat.T
        return z, (pre, feats, (z, f_hat, f_norm, w_hat, w_norm))

    def _objective(self, X, y_local):
        """alpha * mean loss on (X, y_local) and its parameter gradients."""
        with np.errstate(over="ignore", invalid="ignore"):
            logits, cache = self._forward(X)
        loss, g = L.batch_loss(self.loss_spec_, logits, y_local,
                               margins=self.margins_, class_weights=self.class_weights_)
        g = self.alpha * g
        pre, feats, cos = cache
        grads = {}
        if cos is None:
            grads["coef_"] = g.T @ feats
            grads["intercept_"] = g.sum(axis=0)
            d_feats = g @ self.coef_
        else:
            z, f_hat, f_norm, w_hat, w_norm = cos
            grads["coef_"] = (g.T @ f_hat - (g * z).sum(axis=0)[:, None] * w_hat) / w_norm
            d_feats = (g @ w_hat - (g * z).sum(axis=1)[:, None] * f_hat) / f_norm
        if pre is not None:
            dpre = d_feats * (pre > 0)
            grads["hidden_weights_"] = dpre.T @ X
            grads["hidden_bias_"] = dpre.sum(axis=0)
        return self.alpha * loss, grads

    def loss_and_gradient(self, X, y):
        """Weighted loss and parameter gradients at the current parameters.

        ``y`` holds global class ids, all of which must belong to ``classes_``.
        Weight decay is not included.
        """
        check_is_fitted(self, "coef_")
        X = _as_features(X, self.n_features_in_)
        return self._objective(X, self._to_local(y))

    def _to_local(self, y):
        y = np.asarray(y, dtype=np.int64)
        pos = np.searchsorted(self.classes_, y)
        pos = np.minimum(pos, len(self.classes_) - 1)
        if np.any(self.classes_[pos] != y):
            raise InputError("labels outside the peer's classes")
        return pos

    def fit(self, X, y):
        X, y_local = self._prepare(X, y)
        rng = np.random.default_rng(self.random_state)
        m = len(y_local)
        velocity = {name: np.zeros_like(getattr(self, name)) for name in self._params()}
        curve = [self._full_loss(X, y_local, epoch=0)]
        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(m)
            for start in range(0, m, self.batch_size):
                batch = order[start:start + self.batch_size]
                try:
                    loss, grads = self._objective(X[batch], y_local[batch])
                except NumericError:
                    raise TrainingError(f"non-finite logits in epoch {epoch}", epoch=epoch) from None
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite loss in epoch {epoch}", epoch=epoch)
                for name, grad in grads.items():
                    param = getattr(self, name)
                    if self.weight_decay and name in ("coef_", "hidden_weights_"):
                        grad = grad + self.weight_decay * param
                    v = velocity[name]
                    v *= self.momentum
                    v -= self.learning_rate * grad
                    param += v
            curve.append(self._full_loss(X, y_local, epoch))
        self.loss_curve_ = curve
        return self

    def _full_loss(self, X, y_local, epoch):
        try:
            loss, _ = self._objective(X, y_local)
        except NumericError:
            loss = float("nan")
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss after epoch {epoch}", epoch=epoch)
        return loss

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return self._forward(_as_features(X, self.n_features_in_))[0]

    def predict_proba(self, X):
        return L.softmax(self.decision_function(X))

    def predict_with_confidence(self, X):
        """Labels (lowest class id on ties) and their in-subset softmax probability."""
        proba = self.predict_proba(X)
        pos = proba.argmax(axis=1)
        return self.classes_[pos], proba[np.arange(len(pos)), pos]

    def predict(self, X):
        return self.predict_with_confidence(X)[0]

    def peer_predict(self, x) -> PeerPrediction:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise InputError("peer_predict takes a single feature vector")
        labels, conf = self.predict_with_confidence(x)
        return PeerPrediction(int(labels[0]), float(conf[0]))


class PeerLearningClassifier(ClassifierMixin, BaseEstimator):
    """Ensemble of peers trained on frequency-group subsets, combined by voting.

    Parameters
    ----------
    peers : str
        Peer spec, e.g. ``"HBT_B_T"``.
    losses : str, dict or list
        One loss for every peer, or one entry per peer. A dict entry holds
        ``kind`` plus optional ``gamma``, ``beta``, ``margin_scale``,
        ``logit_scale``.
    alphas : float, list or None
        Per-peer loss weights (default 1 for every peer).
    t_head, t_body : int or None
        Frequency cutoffs. Leave both None for rank-tertile cutoffs.
    num_classes : int or None
        Defaults to ``max(y) + 1``.
    minority_penalty : float
        Multiplier on single-vote candidates during voting (1.0 = off).
    allow_uncovered : bool
        Accept peer specs that leave some group without a peer.
    """

    def __init__(self, peers="HBT_B_T", losses="cross_entropy", alphas=None, t_head=None,
                 t_body=None, num_classes=None, hidden_units=0, cosine_head=None, epochs=100,
                 batch_size=64,
                 learning_rate=0.1, weight_decay=0.0, momentum=0.0, minority_penalty=1.0,
                 allow_uncovered=False, random_state=0):
        self.peers = peers
        self.losses = losses
        self.alphas = alphas
        self.t_head = t_head
        self.t_body = t_body
        self.num_classes = num_classes
        self.hidden_units = hidden_units
        self.cosine_head = cosine_head
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.minority_penalty = minority_penalty
        self.allow_uncovered = allow_uncovered
        self.random_state = random_state

    def _per_peer(self, value, n, name):
        if isinstance(value, (list, tuple)):
            if len(value) != n:
                raise ConfigError(f"{name} lists {len(value)} entries for {n} peers")
            return list(value)
        return [value] * n

    def _peer_estimator(self, i, loss, alpha, classes) -> PeerClassifier:
        spec = L.LossSpec.from_dict(loss)
        return PeerClassifier(
            loss=spec.kind, gamma=spec.gamma, beta=spec.beta, margin_scale=spec.margin_scale,
            logit_scale=spec.logit_scale, alpha=alpha, classes=classes,
            hidden_units=self.hidden_units, cosine_head=self.cosine_head, epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            momentum=self.momentum, random_state=self.random_state + i)

    def fit(self, X, y):
        X = _as_features(X)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (X.shape[0],):
            raise InputError("y must be 1-d with one label per row of X")
        if self.minority_penalty <= 0:
            raise ConfigError("minority_penalty must be > 0")
        group_sets = parse_peer_config(self.peers)
        n = len(group_sets)
        k = self.num_classes if self.num_classes is not None else int(y.max()) + 1
        partitioner = FrequencyPartitioner(self.t_head, self.t_body, num_classes=k).fit(y)
        self.frequencies_ = partitioner.frequencies_
        self.partition_ = partitioner.partition_
        self.classes_ = np.arange(k)
        self.n_features_in_ = X.shape[1]
        self.group_sets_ = group_sets

        covered = set()
        for gs in group_sets:
            covered.update(peer_class_subset(self.partition_, gs))
        uncovered = sorted(set(range(k)) - covered)
        if uncovered and not self.allow_uncovered:
            raise ConfigError(
                f"peer spec {self.peers!r} leaves classes {uncovered} without a peer; "
                "set allow_uncovered=True to accept")

        alphas = self._per_peer(1.0 if self.alphas is None else self.alphas, n, "alphas")
        losses = self._per_peer(self.losses, n, "losses")
        self.estimators_ = []
        for i, (gs, loss, alpha) in enumerate(zip(group_sets, losses, alphas)):
            view = peer_targets(X, y, self.partition_, gs)
            peer = self._peer_estimator(i, loss, alpha, view.classes)
            logger.info("training peer %d (%s) on %d instances, %d classes",
                        i, format_peer_config([gs]), len(view.index), len(view.classes))
            try:
                peer.fit(view.X, y[view.index])
            except TrainingError as exc:
                raise TrainingError(f"peer {i}: {exc}", epoch=exc.epoch, peer=i) from None
            self.estimators_.append(peer)
        self.loss_curve_ = list(np.sum([p.loss_curve_ for p in self.estimators_], axis=0))
        return self

    @property
    def n_peers(self) -> int:
        return len(self.estimators_)

    def total_loss(self, X, y) -> float:
        """Sum over peers of ``alpha_i`` times the peer's mean loss on its own instances."""
        check_is_fitted(self, "estimators_")
        X = _as_features(X, self.n_features_in_)
        y = np.asarray(y, dtype=np.int64)
        total = 0.0
        for peer in self.estimators_:
            mask = np.isin(y, peer.classes_)
            if mask.any():
                total += peer.loss_and_gradient(X[mask], y[mask])[0]
        return total

    def predict_peers(self, X):
        """Per-peer labels and confidences, each of shape (n_samples, n_peers)."""
        check_is_fitted(self, "estimators_")
        X = _as_features(X, self.n_features_in_)
        out = [p.predict_with_confidence(X) for p in self.estimators_]
        return np.column_stack([o[0] for o in out]), np.column_stack([o[1] for o in out])

    def ensemble_predict(self, x) -> list:
        return [p.peer_predict(x) for p in self.estimators_]

    def peer_votes(self, X) -> list:
        labels, conf = self.predict_peers(X)
        return [[PeerPrediction(int(l), float(c)) for l, c in zip(lr, cr)]
                for lr, cr in zip(labels, conf)]

    def vote(self, X):
        """Voted labels and vote scores."""
        results = batch_vote(self.peer_votes(X), self.minority_penalty)
        return (np.array([r.label for r in results], dtype=np.int64),
                np.array([r.score for r in results], dtype=np.float64))

    def predict(self, X):
        return self.vote(X)[0]

    def prediction_records(self, dataset) -> PredictionRecords:
        return PredictionRecords(dataset.instance_ids, dataset.scene_ids, dataset.y,
                                 self.peer_votes(dataset.X))


def _flat(a):
    return None if a is None else [float(v) for v in np.asarray(a).ravel()]


def save_model(model: PeerLearningClassifier, path) -> None:
    """Write a fitted ensemble as line-delimited JSON (header + one line per peer)."""
    check_is_fitted(model, "estimators_")
    _ensure_parent(path)
    header = {
        "format": MODEL_FORMAT, "version": MODEL_VERSION,
        "num_classes": len(model.classes_), "feature_dim": model.n_features_in_,
        "num_peers": model.n_peers, "peer_spec": format_peer_config(model.group_sets_),
        "partition": model.partition_.to_dict(), "minority_penalty": model.minority_penalty,
        "hidden_units": model.hidden_units,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for i, p in enumerate(model.estimators_):
            rec = {"peer": i, "classes": [int(c) for c in p.classes_],
                   "loss": p.loss_spec_.to_dict(), "alpha": float(p.alpha),
                   "cosine": bool(p.cosine_),
                   "weights": _flat(p.coef_), "bias": _flat(p.intercept_),
                   "hidden_weights": _flat(p.hidden_weights_),
                   "hidden_bias": _flat(p.hidden_bias_)}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_model(path) -> PeerLearningClassifier:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:]]
    except (IndexError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: malformed model file ({exc})") from None
    if header.get("format") != MODEL_FORMAT or header.get("version") != MODEL_VERSION:
        raise ParseError(f"{path}:1: not a {MODEL_FORMAT} v{MODEL_VERSION} file", 1)
    if len(records) != header["num_peers"]:
        raise ParseError(f"{path}: header promises {header['num_peers']} peers, "
                         f"found {len(records)}", len(lines) + 1)
    d = header["feature_dim"]
    hidden = header.get("hidden_units", 0)
    model = PeerLearningClassifier(peers=header["peer_spec"],
                                   losses=[r["loss"] for r in records],
                                   alphas=[r["alpha"] for r in records],
                                   num_classes=header["num_classes"], hidden_units=hidden,
                                   minority_penalty=header["minority_penalty"])
    model.partition_ = GroupPartition.from_dict(header["partition"])
    model.t_head, model.t_body = model.partition_.thresholds
    model.group_sets_ = parse_peer_config(header["peer_spec"])
    model.classes_ = np.arange(header["num_classes"])
    model.n_features_in_ = d
    model.estimators_ = []
    for i, r in enumerate(records):
        spec = L.LossSpec.from_dict(r["loss"])
        peer = model._peer_estimator(i, spec.to_dict(), r["alpha"], r["classes"])
        peer.classes_ = np.asarray(r["classes"], dtype=np.int64)
        peer.n_features_in_ = d
        peer.loss_spec_ = spec
        peer.cosine_ = bool(r.get("cosine", False))
        k = len(peer.classes_)
        width = hidden if hidden else d
        peer.coef_ = np.asarray(r["weights"], dtype=np.float64).reshape(k, width)
        peer.intercept_ = np.asarray(r["bias"], dtype=np.float64)
        if hidden:
            peer.hidden_weights_ = np.asarray(r["hidden_weights"]).reshape(hidden, d)
            peer.hidden_bias_ = np.asarray(r["hidden_bias"], dtype=np.float64)
        else:
            peer.hidden_weights_ = peer.hidden_bias_ = None
        model.estimators_.append(peer)
    return model
