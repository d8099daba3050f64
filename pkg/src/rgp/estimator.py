"""Scikit-learn style classifier trained with differential privacy.

``DPMLPClassifier`` wraps the training loop: it builds a small ReLU network
(optionally with a convolutional front end), chooses the noise multiplier
(given directly or calibrated from a target epsilon), and runs one of the
training methods:

* ``rgp``: private steps through low-rank gradient carriers derived from
  historical weight updates;
* ``rgp-random``: same, but with history-independent random carriers;
* ``dpsgd``: private steps with dense per-sample gradients;
* ``nonprivate-full`` / ``nonprivate-linear``: plain SGD on all layers or
  on the classification head only.
"""

import math
import warnings

import numpy as np

from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import seeding
from .analysis import track_stable_rank as _layer_stable_ranks
from .errors import ConfigError
from .nn import GradStorageCounter, build_convnet, build_mlp
from .optimizer import (HistoryState, MomentumSGD, dpsgd_step, nonprivate_step,
                        rgp_step)
from .privacy import RdpAccountant, calibrate_sigma
from .seeding import seeded_rng

METHODS = ("rgp", "rgp-random", "dpsgd", "nonprivate-full", "nonprivate-linear")
PRIVATE_METHODS = ("rgp", "rgp-random", "dpsgd")

__all__ = ["DPMLPClassifier", "METHODS", "PRIVATE_METHODS"]


class DPMLPClassifier(BaseEstimator, ClassifierMixin):
    """Small neural-network classifier with differentially private training.

    Parameters mirror the training configuration: exactly one of
    ``noise_multiplier`` and ``target_epsilon`` must be given for the private
    methods.  ``sampling="poisson"`` includes each sample independently with
    probability ``batch_size / n`` (the model the accountant assumes);
    ``"fixed"`` uses shuffled fixed-size batches and is accounted with the
    same q as an approximation.
    """

    def __init__(self, hidden_sizes=(64,), method="rgp", rank=4, power_iters=1,
                 warmup_steps=5, residual=True, clip_norm=1.0,
                 noise_multiplier=None, target_epsilon=None, delta=1e-5,
                 batch_size=64, sampling="poisson", epochs=10, max_steps=None,
                 lr=0.1, momentum=0.9, seed=0,
                 conv_channels=(), kernel_size=3, conv_stride=1,
                 conv_padding=0, input_shape=None,
                 track_stable_rank=False, track_residuals=False,
                 track_every_epochs=1, dense_check=False):
        self.hidden_sizes = hidden_sizes
        self.method = method
        self.rank = rank
        self.power_iters = power_iters
        self.warmup_steps = warmup_steps
        self.residual = residual
        self.clip_norm = clip_norm
        self.noise_multiplier = noise_multiplier
        self.target_epsilon = target_epsilon
        self.delta = delta
        self.batch_size = batch_size
        self.sampling = sampling
        self.epochs = epochs
        self.max_steps = max_steps
        self.lr = lr
        self.momentum = momentum
        self.seed = seed
        self.conv_channels = conv_channels
        self.kernel_size = kernel_size
        self.conv_stride = conv_stride
        self.conv_padding = conv_padding
        self.input_shape = input_shape
        self.track_stable_rank = track_stable_rank
        self.track_residuals = track_residuals
        self.track_every_epochs = track_every_epochs
        self.dense_check = dense_check

    # ------------------------------------------------------------------
    def _validate_config(self, n_samples):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.sampling not in ("poisson", "fixed"):
            raise ConfigError("sampling must be 'poisson' or 'fixed'")
        if self.seed is None or int(self.seed) < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.method in PRIVATE_METHODS:
            has_sigma = self.noise_multiplier is not None
            has_eps = self.target_epsilon is not None
            if has_sigma == has_eps:
                raise ConfigError(
                    "provide exactly one of noise_multiplier and target_epsilon")
            if not 0.0 < self.delta < 1.0:
                raise ConfigError("delta must lie in (0, 1)")
            if self.delta >= 1.0 / n_samples:
                warnings.warn(
                    f"delta={self.delta} is not below 1/n={1.0 / n_samples:.3g}; "
                    "the guarantee is weaker than conventional",
                    UserWarning, stacklevel=3)
        if self.method in ("rgp", "rgp-random") and self.rank < 1:
            raise ConfigError("rank must be a positive integer")

    def _build_network(self, n_features, n_classes, rng):
        hidden = tuple(int(h) for h in self.hidden_sizes)
        if self.conv_channels:
            if self.input_shape is None:
                raise ConfigError("conv layers require input_shape=(c, h, w)")
            shape = tuple(int(s) for s in self.input_shape)
            if len(shape) != 3 or int(np.prod(shape)) != n_features:
                raise ConfigError(
                    f"input_shape {shape} does not match {n_features} features")
            return build_convnet(shape, tuple(self.conv_channels), self.kernel_size,
                                 self.conv_stride, self.conv_padding,
                                 hidden, n_classes, rng)
        return build_mlp(n_features, hidden, n_classes, rng)

    def _reshape(self, x):
        if self.conv_channels:
            return x.reshape((x.shape[0],) + tuple(int(s) for s in self.input_shape))
        return x

    # ------------------------------------------------------------------
    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        n, n_features = X.shape
        self._validate_config(n)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = n_features

        rng_init = seeded_rng(self.seed, seeding.INIT)
        net = self._build_network(n_features, len(self.classes_), rng_init)

        batch = min(int(self.batch_size), n)
        q = batch / n
        if self.sampling == "poisson":
            steps_per_epoch = math.ceil(n / batch)
        else:
            steps_per_epoch = max(n // batch, 1)
        total_steps = int(self.epochs) * steps_per_epoch
        if self.max_steps is not None:
            total_steps = min(total_steps, int(self.max_steps))
        if total_steps < 1:
            raise ConfigError("the configuration yields zero training steps")

        private = self.method in PRIVATE_METHODS
        accountant = None
        sigma = None
        if private:
            if self.noise_multiplier is not None:
                sigma = float(self.noise_multiplier)
                if sigma <= 0:
                    raise ConfigError("noise_multiplier must be positive")
            else:
                sigma = calibrate_sigma(q, total_steps, float(self.target_epsilon),
                                        float(self.delta))
            accountant = RdpAccountant(q, sigma)

        optimizer = MomentumSGD(float(self.lr), float(self.momentum))
        history = HistoryState.capture(net, int(self.warmup_steps))
        counter = GradStorageCounter()
        for layer in net.trainable_layers:
            layer.residual_enabled = bool(self.residual)

        track_interval = max(int(self.track_every_epochs), 1) * steps_per_epoch
        metrics = []
        perm = None
        x_train = self._reshape(X)
        for step in range(1, total_steps + 1):
            if self.sampling == "poisson":
                rng = seeded_rng(self.seed, seeding.BATCH, step)
                idx = np.flatnonzero(rng.random(n) < q)
            else:
                epoch, pos = divmod(step - 1, steps_per_epoch)
                if pos == 0:
                    perm = seeded_rng(self.seed, seeding.BATCH, epoch).permutation(n)
                idx = perm[pos * batch:(pos + 1) * batch]
            bx, by = x_train[idx], y_idx[idx]
            at_boundary = step % track_interval == 0 or step == total_steps

            if self.method in ("rgp", "rgp-random"):
                record = rgp_step(
                    net, bx, by, step=step, history=history, rank=int(self.rank),
                    power_iters=int(self.power_iters), clip_norm=float(self.clip_norm),
                    noise_multiplier=sigma, optimizer=optimizer, denom=batch,
                    seed=self.seed, accountant=accountant,
                    random_subspace=self.method == "rgp-random", counter=counter,
                    dense_check=self.dense_check,
                    track_residuals=self.track_residuals and at_boundary)
            elif self.method == "dpsgd":
                record = dpsgd_step(
                    net, bx, by, step=step, clip_norm=float(self.clip_norm),
                    noise_multiplier=sigma, optimizer=optimizer, denom=batch,
                    seed=self.seed, accountant=accountant, counter=counter)
            else:
                record = nonprivate_step(
                    net, bx, by, step=step, optimizer=optimizer,
                    head_only=self.method == "nonprivate-linear")
            if private:
                record["epsilon"] = accountant.epsilon(float(self.delta))
            if self.track_stable_rank and at_boundary and len(idx) > 0:
                record["stable_ranks"] = _layer_stable_ranks(net, bx, by)
                record["epoch"] = step // steps_per_epoch
            metrics.append(record)

        self.network_ = net
        self.sigma_ = sigma
        self.epsilon_ = accountant.epsilon(float(self.delta)) if private else None
        self.accountant_ = accountant
        self.metrics_ = metrics
        self.n_iter_ = total_steps
        self.steps_per_epoch_ = steps_per_epoch
        self.sampling_q_ = q
        self.sampling_approximation_ = self.sampling == "fixed"
        self.grad_counter_ = counter
        return self

    # ------------------------------------------------------------------
    def _logits(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        logits, _ = self.network_.forward(self._reshape(X))
        return logits

    def decision_function(self, X):
        return self._logits(X)

    def predict_proba(self, X):
        logits = self._logits(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def loss_per_sample(self, X, y):
        """Cross-entropy loss of each sample (used by the MI evaluation)."""
        logits = self._logits(X)
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.array_equal(self.classes_[idx], y):
            raise ValueError("y contains labels unseen during fit")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return -log_probs[np.arange(len(y)), idx]
