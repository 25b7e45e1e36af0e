"""scikit-learn style wrapper around noise-injected adversarial training."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .attacks import AttackConfig, pgd
from .data import Dataset
from .exceptions import ContractError
from .nn import apply_defense, build_cnn, build_mlp, defense_modes
from .rng import SeedStreams
from .tensor import softmax
from .training import Checkpoint, EvalResult, TrainConfig, evaluate, predict_logits, train


def check_unit_interval(X, name="X"):
    """Inputs must already be scaled to [0, 1]; attacks clip to that box."""
    if X.size and (np.min(X) < 0.0 or np.max(X) > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]; got range [{np.min(X)}, {np.max(X)}]")
    return X


class NoiseInjectedClassifier(ClassifierMixin, BaseEstimator):
    """Small MLP/CNN trained with PGD adversarial training and learned colored noise.

    Parameters
    ----------
    defense : {"none", "adv-train", "pni-w", "cni-w", "cni-a", "cni-w+a"}
        ``none`` is clean training; ``adv-train`` adds PGD examples without
        noise; the rest add noise to weights (``-w``), layer outputs
        (``-a``) or both.  ``pni-w`` forces ``rank=0``.
    rank : int
        Number of columns of the low-rank covariance factor.
    epsilon, k, step, random_start, eot_samples
        Training-time PGD budget (``step=None`` means ``2.5 * epsilon / k``).
    loss_mix : float
        Weight of the adversarial loss; ignored (0) for ``defense="none"``.
    val_fraction : float
        Held-out share of the training data used for checkpoint selection
        when ``fit`` is not given an explicit validation set.

    Predictions are random for noisy defenses: every call draws fresh noise.
    """

    def __init__(
        self,
        defense="cni-w",
        rank=5,
        arch="mlp",
        hidden=(64,),
        channels=(8, 16),
        epochs=50,
        batch_size=128,
        lr=0.1,
        momentum=0.9,
        lr_milestones=None,
        weight_decay=1e-4,
        v_weight_decay=1e-3,
        epsilon=8 / 255,
        k=7,
        step=None,
        random_start=True,
        eot_samples=1,
        loss_mix=0.5,
        val_fraction=0.1,
        val_draws=1,
        random_state=0,
    ):
        self.defense = defense
        self.rank = rank
        self.arch = arch
        self.hidden = hidden
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.lr_milestones = lr_milestones
        self.weight_decay = weight_decay
        self.v_weight_decay = v_weight_decay
        self.epsilon = epsilon
        self.k = k
        self.step = step
        self.random_start = random_start
        self.eot_samples = eot_samples
        self.loss_mix = loss_mix
        self.val_fraction = val_fraction
        self.val_draws = val_draws
        self.random_state = random_state

    # -- configuration -------------------------------------------------------
    def attack_config(self) -> AttackConfig:
        return AttackConfig(self.epsilon, self.k, self.step, self.random_start, self.eot_samples)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            lr_milestones=None if self.lr_milestones is None else list(self.lr_milestones),
            weight_decay=self.weight_decay,
            v_weight_decay=self.v_weight_decay,
            attack=self.attack_config(),
            loss_mix=0.0 if self.defense == "none" else self.loss_mix,
            seed=int(self.random_state),
            val_draws=self.val_draws,
        )

    def _build_model(self, input_shape, n_classes):
        seed = int(self.random_state)
        if self.arch == "mlp":
            model = build_mlp(int(np.prod(input_shape)), list(self.hidden), n_classes, seed=seed)
        elif self.arch == "cnn":
            if len(input_shape) != 3:
                raise ValueError(f"cnn expects C x H x W inputs, got per-sample shape {input_shape}")
            model = build_cnn(tuple(input_shape), n_classes, tuple(self.channels), seed=seed)
        else:
            raise ValueError(f"unknown arch {self.arch!r}")
        return apply_defense(model, self.defense, self.rank, seed=seed)

    def _model_input(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.arch == "mlp":
            return X.reshape(X.shape[0], -1)
        return X

    # -- fitting -------------------------------------------------------------
    def fit(self, X, y, X_val=None, y_val=None, metrics_path=None):
        """Train, keeping the epoch with the best clean validation accuracy.

        ``metrics_path`` appends per-epoch history rows to a CSV file.
        """
        defense_modes(self.defense)
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        check_classification_targets(y)
        check_unit_interval(X)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = X.shape[1:]
        if X_val is None:
            X, X_val, y_enc, yv = train_test_split(
                X, y_enc, test_size=self.val_fraction, random_state=self.random_state, stratify=y_enc
            )
        else:
            X_val = check_unit_interval(check_array(X_val, allow_nd=True, dtype=np.float64), "X_val")
            yv = np.searchsorted(self.classes_, np.asarray(y_val))
        n_cls = len(self.classes_)
        train_set = Dataset(self._model_input(X), y_enc, n_cls, "train")
        val_set = Dataset(self._model_input(X_val), yv, n_cls, "val")
        self.model_ = self._build_model(self.input_shape_, n_cls)
        result = train(self.model_, train_set, val_set, self.train_config(), metrics_path=metrics_path)
        self.checkpoint_ = result.best
        self.history_ = [(c.epoch, c.val_accuracy) for c in result.history]
        self.best_epoch_ = result.best.epoch
        self.n_train_steps_ = result.steps
        return self

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, classes=None, **params):
        """Wrap a stored checkpoint; architecture and noise come from the file."""
        est = cls(random_state=ck.config.seed, **params)
        est.model_ = ck.to_model()
        est.checkpoint_ = ck
        n_cls = est.model_.n_classes
        est.classes_ = np.arange(n_cls) if classes is None else np.asarray(classes)
        est.input_shape_ = tuple(est.model_.input_shape)
        est.n_features_in_ = int(np.prod(est.input_shape_))
        est.arch = "cnn" if len(est.input_shape_) == 3 else "mlp"
        est.best_epoch_ = ck.epoch
        return est

    # -- prediction ----------------------------------------------------------
    def _check_X(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if int(np.prod(X.shape[1:])) != self.n_features_in_:
            raise ValueError(f"X has {int(np.prod(X.shape[1:]))} features, expected {self.n_features_in_}")
        return self._model_input(X)

    def decision_function(self, X, random_state=None):
        X = self._check_X(X)
        streams = SeedStreams(random_state) if random_state is not None else None
        return predict_logits(self.model_, X, streams)

    def predict_proba(self, X, random_state=None):
        return softmax(self.decision_function(X, random_state))

    def predict(self, X, random_state=None):
        scores = self.decision_function(X, random_state)
        return self.classes_[np.argmax(scores, axis=1)]

    # -- robustness ----------------------------------------------------------
    def _encode(self, y):
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= len(self.classes_)) or np.any(self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y):
            raise ContractError("y contains labels unseen during fit")
        return idx

    def perturb(self, X, y, attack: AttackConfig | None = None, random_state=0):
        """PGD adversarial examples against this model (same shape as ``X``)."""
        X = np.asarray(X, dtype=np.float64)
        xm = self._check_X(X)
        adv = pgd(self.model_, xm, self._encode(y), attack or self.attack_config(), SeedStreams(random_state))
        return adv.reshape(X.shape)

    def robust_score(self, X, y, attack: AttackConfig | None = None, n_noise_draws=1, random_state=0) -> EvalResult:
        """Accuracy over ``n_noise_draws`` noisy evaluations, clean when ``attack`` is None."""
        xm = self._check_X(X)
        ds = Dataset(xm, self._encode(y), len(self.classes_), "eval")
        return evaluate(self.model_, ds, attack, n_noise_draws, SeedStreams(random_state))
