"""scikit-learn compatible wrapper around the training loop.

Unlike the rest of the package, the estimator takes one sample per *row*,
following scikit-learn conventions, and transposes internally.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .network import forward, per_sample_loss
from .training import TrainConfig, Trainer


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class GaussNewtonNetwork(BaseEstimator):
    """Feedforward network trained with a Kronecker-factored Gauss-Newton method.

    With ``y=None`` the network is fitted as an autoencoder on ``X``. For
    ``loss="binary_mixture"`` the output layer has three units and ``y`` holds
    0/1 labels; otherwise the output width follows ``y`` (or ``X``).

    Parameters mirror :class:`kfgn.training.TrainConfig`; ``random_state``
    plays the role of its seed.
    """

    def __init__(
        self,
        hidden_layer_sizes=(32,),
        transfer="relu",
        loss="squared",
        optimizer="kfra",
        batch_size=250,
        max_updates=500,
        eta=1e-5,
        tau=1e-2,
        gamma=1e-2,
        curvature_ema=False,
        inversion="approx",
        lr=1e-3,
        kfac_samples=1,
        random_state=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.transfer = transfer
        self.loss = loss
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.max_updates = max_updates
        self.eta = eta
        self.tau = tau
        self.gamma = gamma
        self.curvature_ema = curvature_ema
        self.inversion = inversion
        self.lr = lr
        self.kfac_samples = kfac_samples
        self.random_state = random_state

    def _targets(self, X, y):
        if y is None:
            return X.T
        y = np.asarray(y, dtype=np.float64)
        return y.reshape(1, -1) if y.ndim == 1 else y.T

    def fit(self, X, y=None):
        if y is None:
            X = check_array(X, dtype=np.float64)
        else:
            X, y = check_X_y(X, y, dtype=np.float64, multi_output=True, y_numeric=True)
        Y = self._targets(X, y)
        out_dim = 3 if self.loss == "binary_mixture" else Y.shape[0]
        sizes = [X.shape[1], *self.hidden_layer_sizes, out_dim]
        cfg = TrainConfig(
            dataset={"kind": "curves"},
            network={"layer_sizes": sizes, "transfer": self.transfer, "loss": self.loss},
            optimizer=self.optimizer,
            batch_size=min(self.batch_size, X.shape[0]),
            max_updates=self.max_updates,
            seed=self.random_state,
            eta=self.eta,
            tau=self.tau,
            gamma=self.gamma,
            curvature_ema=self.curvature_ema,
            inversion=self.inversion,
            lr=self.lr,
            kfac_samples=self.kfac_samples,
        )
        self.spec_ = cfg.spec()
        result = Trainer(self.spec_, cfg).run(X.T, Y)
        self.coefs_ = result.params
        self.coefs_avg_ = result.params_avg
        self.loss_curve_ = result.log.column("train_loss")
        self.status_ = result.status
        self.n_features_in_ = X.shape[1]
        return self

    def _output(self, X):
        check_is_fitted(self, "coefs_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the network expects {self.n_features_in_}")
        return forward(self.spec_, self.coefs_, X.T)

    def decision_function(self, X):
        """Raw network outputs, one row per sample."""
        return self._output(X).output.T

    def predict_proba(self, X):
        """Class probabilities ``[p(y=0), p(y=1)]`` for the binary losses."""
        h = self._output(X).output
        if self.loss == "binary_mixture":
            p = _sigmoid(h[0]) * _sigmoid(h[1]) + (1 - _sigmoid(h[0])) * _sigmoid(h[2])
        elif self.loss == "bernoulli_xent" and h.shape[0] == 1:
            p = _sigmoid(h[0])
        else:
            raise AttributeError("predict_proba needs a single binary output")
        return np.column_stack([1 - p, p])

    def predict(self, X):
        """0/1 labels for single-output binary models, Bernoulli means for
        cross-entropy autoencoders and raw outputs for squared loss."""
        h = self._output(X).output
        if self.loss == "binary_mixture" or (self.loss == "bernoulli_xent" and h.shape[0] == 1):
            return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)
        if self.loss == "bernoulli_xent":
            return _sigmoid(h).T
        return h.T

    def transform(self, X):
        """Activations of the narrowest hidden layer (the code of an autoencoder)."""
        cache = self._output(X)
        hidden = list(self.spec_.layer_sizes[1:-1])
        if not hidden:
            raise AttributeError("network has no hidden layer")
        lam = 1 + int(np.argmin(hidden))
        return cache.A[lam].T

    def score(self, X, y=None):
        """Negative mean loss, so larger is better."""
        cache = self._output(X)
        X = check_array(X, dtype=np.float64)
        Y = self._targets(X, y)
        return -float(np.mean(per_sample_loss(self.spec_, cache.output, Y)))
