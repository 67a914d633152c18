"""sklearn-style estimator API.

Thin facades over the functional core so the pieces compose with the wider
ecosystem (get_params/set_params, clone, pipelines operating on image
batches). X is always a float32 (n_samples, C, H, W) array; y may use any
integer label vocabulary and is encoded against `classes_` like other sklearn
classifiers.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .distill import DistillConfig, DistilledBuffer, distill
from .errors import ValidationError
from .data import LabeledSet
from .models import DEFAULT_WIDTHS, build_model, convnet_ladder, convnet_spec, forward
from .seeding import derive_seed
from .training import GrowthPolicy, OptimizerConfig, grow_if_needed, train_model
from .validation import check_images, check_labels


def _encode(X, y, classes=None):
    X = check_images(X)
    y = np.asarray(y)
    classes = np.unique(y) if classes is None else np.asarray(classes)
    encoded = np.searchsorted(classes, y)
    if np.any(classes[encoded] != y):
        raise ValidationError("y contains labels outside the declared classes")
    encoded = check_labels(encoded, len(X), len(classes))
    return X, encoded, classes


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """A single ConvNetD model with the package's training defaults."""

    def __init__(
        self,
        depth=3,
        width=None,
        epochs=300,
        optimizer="adam",
        lr=0.01,
        momentum=0.9,
        weight_decay=5e-4,
        batch_size=256,
        lr_schedule="constant",
        random_state=0,
    ):
        self.depth = depth
        self.width = width
        self.epochs = epochs
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.lr_schedule = lr_schedule
        self.random_state = random_state

    def _opt(self):
        return OptimizerConfig(
            kind=self.optimizer,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            lr_schedule=self.lr_schedule,
        )

    def fit(self, X, y):
        X, encoded, self.classes_ = _encode(X, y)
        self.spec_ = convnet_spec(
            self.depth, X.shape[1:], len(self.classes_), width=self.width
        )
        data = LabeledSet(X, encoded, len(self.classes_))
        model = build_model(self.spec_, seed=derive_seed(self.random_state, "init"))
        self.model_, self.flops_spent_ = train_model(
            model, data, self._opt(), seed=derive_seed(self.random_state, "train")
        )
        return self

    def decision_function(self, X):
        if not hasattr(self, "model_"):
            raise ValidationError("fit must be called before predict")
        return forward(self.model_, check_images(X))

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def predict_proba(self, X):
        logits = self.decision_function(X)
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)


class DatasetDistiller(BaseEstimator):
    """Distribution-matching distiller: fit learns `ipc` synthetic images per
    class; `fit_resample` returns them as a condensed (X, y) pair."""

    def __init__(
        self,
        ipc=10,
        outer_steps=100,
        synth_lr=1.0,
        real_batch_per_class=256,
        init_mode="real_sample",
        dsa=True,
        depth=4,
        width=None,
        random_state=0,
    ):
        self.ipc = ipc
        self.outer_steps = outer_steps
        self.synth_lr = synth_lr
        self.real_batch_per_class = real_batch_per_class
        self.init_mode = init_mode
        self.dsa = dsa
        self.depth = depth
        self.width = width
        self.random_state = random_state

    def fit(self, X, y):
        X, encoded, self.classes_ = _encode(X, y)
        spec = convnet_spec(self.depth, X.shape[1:], len(self.classes_), width=self.width)
        cfg = DistillConfig(
            distill_spec=spec,
            ipc=self.ipc,
            outer_steps=self.outer_steps,
            synth_lr=self.synth_lr,
            real_batch_per_class=self.real_batch_per_class,
            init_mode=self.init_mode,
            dsa_enabled=self.dsa,
            seed=self.random_state,
        )
        diag = {}
        synthetic = distill(LabeledSet(X, encoded, len(self.classes_)), cfg, diagnostics=diag)
        self.synthetic_images_ = synthetic.images
        self.synthetic_labels_ = self.classes_[synthetic.labels]
        self.loss_history_ = diag["loss_history"]
        return self

    def fit_resample(self, X, y):
        self.fit(X, y)
        return self.synthetic_images_, self.synthetic_labels_


class IncrementalClassifier(ClassifierMixin, BaseEstimator):
    """The incremental cycle behind a partial_fit interface.

    Each partial_fit call distills the arriving chunk into the buffer, trains
    a fresh model on the whole buffer, and grows the architecture along the
    D2/D3/D4 ladder when accuracy on an internal holdout (a seeded fraction
    of every chunk) falls below the standard. Pass `classes` on the first
    call, as with other sklearn partial_fit estimators.
    """

    def __init__(
        self,
        ipc=10,
        outer_steps=100,
        synth_lr=1.0,
        widths=tuple(DEFAULT_WIDTHS.values()),
        a_standard=None,
        relative_factor=0.95,
        epochs=300,
        optimizer="adam",
        lr=0.01,
        batch_size=256,
        holdout_fraction=0.2,
        dsa=True,
        random_state=0,
    ):
        self.ipc = ipc
        self.outer_steps = outer_steps
        self.synth_lr = synth_lr
        self.widths = widths
        self.a_standard = a_standard
        self.relative_factor = relative_factor
        self.epochs = epochs
        self.optimizer = optimizer
        self.lr = lr
        self.batch_size = batch_size
        self.holdout_fraction = holdout_fraction
        self.dsa = dsa
        self.random_state = random_state

    def partial_fit(self, X, y, classes=None):
        if not hasattr(self, "classes_"):
            if classes is None:
                raise ValidationError("classes must be passed on the first partial_fit call")
            self.classes_ = np.asarray(classes)
            widths = tuple(self.widths)
            self._step = 0
            self._best_acc = 0.0
        X, encoded, _ = _encode(X, y, self.classes_)
        if not hasattr(self, "buffer_"):
            self.ladder_ = convnet_ladder(
                X.shape[1:], len(self.classes_),
                widths={2: self.widths[0], 3: self.widths[1], 4: self.widths[2]},
            )
            self.policy_ = GrowthPolicy(
                ladder=self.ladder_,
                a_standard=self.a_standard,
                relative_factor=self.relative_factor,
            )
            self.buffer_ = DistilledBuffer(X.shape[1:], len(self.classes_))
            self.spec_ = self.ladder_[0]
            self._holdouts = []
        self._step += 1
        t = self._step

        rng = np.random.default_rng(derive_seed(self.random_state, "holdout", t))
        n_hold = int(round(self.holdout_fraction * len(X)))
        hold_idx = rng.choice(len(X), size=n_hold, replace=False) if n_hold else np.array([], int)
        train_mask = np.ones(len(X), bool)
        train_mask[hold_idx] = False
        chunk = LabeledSet(X[train_mask], encoded[train_mask], len(self.classes_))
        if n_hold:
            self._holdouts.append(LabeledSet(X[hold_idx], encoded[hold_idx], len(self.classes_)))

        cfg = DistillConfig(
            distill_spec=self.ladder_[-1],
            ipc=self.ipc,
            outer_steps=self.outer_steps,
            synth_lr=self.synth_lr,
            dsa_enabled=self.dsa,
            seed=derive_seed(self.random_state, "distill", t),
        )
        self.buffer_.append_step(t, distill(chunk, cfg))
        self._train_current(t)

        if self._holdouts:
            acc = self._holdout_accuracy()
            best = max(self._best_acc, acc)
            new_spec = grow_if_needed(self.spec_, acc, self.policy_, best_so_far=best)
            if new_spec != self.spec_:
                self.spec_ = new_spec
                self._train_current(t, tag="grow")
                acc = self._holdout_accuracy()
            self._best_acc = max(best, acc)
        return self

    def _train_current(self, t, tag="train"):
        opt = OptimizerConfig(
            kind=self.optimizer, lr=self.lr, batch_size=self.batch_size, epochs=self.epochs
        )
        model = build_model(self.spec_, seed=derive_seed(self.random_state, "init", t, tag))
        self.model_, _ = train_model(
            model, self.buffer_.merged_set(), opt,
            seed=derive_seed(self.random_state, tag, t),
        )

    def _holdout_accuracy(self):
        union = LabeledSet.concat(self._holdouts)
        pred = np.argmax(forward(self.model_, union.images), axis=1)
        return float((pred == union.labels).mean())

    def predict(self, X):
        if not hasattr(self, "model_"):
            raise ValidationError("partial_fit must be called before predict")
        return self.classes_[np.argmax(forward(self.model_, check_images(X)), axis=1)]
