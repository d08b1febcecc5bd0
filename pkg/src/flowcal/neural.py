"""From-scratch feed-forward networks with hand-derived backpropagation.

Layers compute activation(w x + b); layer 1 is the input-adjacent layer.
Supported activations are tanh and identity.  No automatic differentiation:
gradients are assembled in reverse over cached activations, and
:func:`gradient_check` verifies them against central finite differences.

The shared-encoder architecture couples three MLPs: an encoder ending in a
tanh layer (so latent coordinates live in (-1, 1)), a decoder head that
reconstructs the input, and a regression head that predicts the simulator
response.  :class:`AutoencoderRegressor` wraps it in the sklearn estimator
API and owns the input/output scaling.

Networks are immutable during inference; training mutates one network and is
single-threaded.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .errors import NumericError

_ACTIVATIONS = ("tanh", "identity")


@dataclass(frozen=True)
class LayerSpec:
    input_width: int
    output_width: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_width < 1 or self.output_width < 1:
            raise ValueError("layer widths must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class MLPNetwork:
    """Weights w_l of shape (output_width, input_width) plus bias vectors."""

    specs: tuple[LayerSpec, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        for a, b in zip(self.specs, self.specs[1:]):
            if a.output_width != b.input_width:
                raise ValueError("adjacent layer widths do not chain")

    @property
    def input_width(self) -> int:
        return self.specs[0].input_width

    @property
    def output_width(self) -> int:
        return self.specs[-1].output_width

    def copy(self) -> "MLPNetwork":
        return MLPNetwork(
            self.specs,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


def init_mlp(widths, rng, hidden_activation="tanh", output_activation="identity"):
    """Seeded Glorot-uniform initialization: U(+-sqrt(6/(fan_in+fan_out)))."""
    specs = []
    for i, (p_in, p_out) in enumerate(zip(widths, widths[1:])):
        act = output_activation if i == len(widths) - 2 else hidden_activation
        specs.append(LayerSpec(p_in, p_out, act))
    weights, biases = [], []
    for spec in specs:
        bound = np.sqrt(6.0 / (spec.input_width + spec.output_width))
        weights.append(rng.uniform(-bound, bound, size=(spec.output_width, spec.input_width)))
        biases.append(np.zeros(spec.output_width))
    return MLPNetwork(tuple(specs), weights, biases)


def _apply(activation: str, s: np.ndarray) -> np.ndarray:
    return np.tanh(s) if activation == "tanh" else s


def forward(net: MLPNetwork, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one vector or a batch of row vectors."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = np.atleast_2d(x)
    if a.shape[1] != net.input_width:
        raise ValueError(f"input width {a.shape[1]} != {net.input_width}")
    for spec, w, b in zip(net.specs, net.weights, net.biases):
        a = _apply(spec.activation, a @ w.T + b)
    return a[0] if single else a


def _forward_cached(net: MLPNetwork, X: np.ndarray) -> list[np.ndarray]:
    """All layer activations, a[0] being the input batch."""
    cache = [np.atleast_2d(np.asarray(X, dtype=float))]
    for spec, w, b in zip(net.specs, net.weights, net.biases):
        cache.append(_apply(spec.activation, cache[-1] @ w.T + b))
    return cache


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __iadd__(self, other: "Gradients"):
        for w, ow in zip(self.weights, other.weights):
            w += ow
        for b, ob in zip(self.biases, other.biases):
            b += ob
        return self


def backprop(net: MLPNetwork, cache: list[np.ndarray], grad_out: np.ndarray):
    """Reverse pass from d(loss)/d(output); returns (grads, d(loss)/d(input))."""
    g = np.atleast_2d(grad_out)
    grads_w: list[np.ndarray] = [None] * len(net.weights)
    grads_b: list[np.ndarray] = [None] * len(net.biases)
    for l in range(len(net.weights) - 1, -1, -1):
        if net.specs[l].activation == "tanh":
            g = g * (1.0 - cache[l + 1] ** 2)
        grads_w[l] = g.T @ cache[l]
        grads_b[l] = g.sum(axis=0)
        if not np.all(np.isfinite(grads_w[l])):
            raise NumericError(f"non-finite gradient at layer {l + 1}")
        g = g @ net.weights[l]
    return Gradients(grads_w, grads_b), g


def mse_loss(predicted: np.ndarray, observed: np.ndarray) -> float:
    """Mean over samples of the squared Euclidean error."""
    predicted = np.atleast_2d(np.asarray(predicted, dtype=float))
    observed = np.atleast_2d(np.asarray(observed, dtype=float))
    if predicted.shape != observed.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {observed.shape}")
    n = predicted.shape[0]
    if n == 0:
        raise ValueError("mse_loss needs at least one sample")
    return float(np.sum((predicted - observed) ** 2) / n)


def boundary_penalty(predicted: np.ndarray, lower, upper) -> float:
    """Quadratic cost of leaving the box [lower, upper], summed over samples."""
    predicted = np.atleast_2d(np.asarray(predicted, dtype=float))
    lower = np.broadcast_to(np.asarray(lower, dtype=float), predicted.shape[1:])
    upper = np.broadcast_to(np.asarray(upper, dtype=float), predicted.shape[1:])
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound")
    over = np.maximum(0.0, predicted - upper)
    under = np.maximum(0.0, lower - predicted)
    return float(np.sum(over**2) + np.sum(under**2))


def _boundary_penalty_grad(predicted, lower, upper):
    # subgradient of max(0, .)^2 taken as 0 exactly at the boundary
    over = np.maximum(0.0, predicted - upper)
    under = np.maximum(0.0, lower - predicted)
    return 2.0 * over - 2.0 * under


def mse_gradients(net: MLPNetwork, X, Y, lower=None, upper=None, penalty_weight=0.0):
    """Loss and exact gradients of mse (optionally plus the boundary penalty)."""
    cache = _forward_cached(net, X)
    pred = cache[-1]
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = pred.shape[0]
    loss = mse_loss(pred, Y)
    grad_out = 2.0 * (pred - Y) / n
    if penalty_weight != 0.0 and lower is not None:
        loss += penalty_weight * boundary_penalty(pred, lower, upper)
        grad_out = grad_out + penalty_weight * _boundary_penalty_grad(pred, lower, upper)
    grads, _ = backprop(net, cache, grad_out)
    return loss, grads


def sgd_step(net: MLPNetwork, grads: Gradients, learning_rate: float) -> None:
    for w, gw in zip(net.weights, grads.weights):
        w -= learning_rate * gw
    for b, gb in zip(net.biases, grads.biases):
        b -= learning_rate * gb


def relative_gradient_error(analytic: float, numeric: float) -> float:
    """|a - n| scaled by max(|a|, |n|, 1); absolute below unit scale."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)


def _numeric_check(params: list[np.ndarray], analytic: list[np.ndarray], loss_fn, h: float) -> float:
    worst = 0.0
    for arr, grad in zip(params, analytic):
        flat = arr.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, relative_gradient_error(gflat[i], numeric))
    return worst


def gradient_check(net: MLPNetwork, X, Y, h: float = 1e-5,
                   lower=None, upper=None, penalty_weight: float = 0.0) -> float:
    """Max relative error of backprop vs central differences over all parameters."""
    if h <= 0:
        raise ValueError("h must be positive")
    _, grads = mse_gradients(net, X, Y, lower, upper, penalty_weight)

    def loss_fn():
        loss, _ = mse_gradients(net, X, Y, lower, upper, penalty_weight)
        return loss

    params = list(net.weights) + list(net.biases)
    analytic = list(grads.weights) + list(grads.biases)
    return _numeric_check(params, analytic, loss_fn, h)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 500
    batch_size: int = 16
    l2_penalty: float = 1e-4
    penalty_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be > 0 and batch_size >= 1")


@dataclass
class SharedEncoderNetwork:
    """Encoder feeding both a reconstruction decoder and a regression head."""

    encoder: MLPNetwork
    decoder: MLPNetwork
    regressor: MLPNetwork

    def __post_init__(self):
        d = self.encoder.output_width
        if self.decoder.input_width != d or self.regressor.input_width != d:
            raise ValueError("heads must consume the encoder's latent width")

    @property
    def latent_dim(self) -> int:
        return self.encoder.output_width

    def parts(self) -> tuple[MLPNetwork, MLPNetwork, MLPNetwork]:
        return self.encoder, self.decoder, self.regressor

    def copy(self) -> "SharedEncoderNetwork":
        return SharedEncoderNetwork(
            self.encoder.copy(), self.decoder.copy(), self.regressor.copy()
        )


def build_shared_encoder(input_dim, output_dim, latent_dim, rng,
                         encoder_hidden=(16,), decoder_hidden=(16,),
                         regressor_hidden=(32,)) -> SharedEncoderNetwork:
    encoder = init_mlp(
        [input_dim, *encoder_hidden, latent_dim], rng, output_activation="tanh"
    )
    decoder = init_mlp([latent_dim, *decoder_hidden, input_dim], rng)
    regressor = init_mlp([latent_dim, *regressor_hidden, output_dim], rng)
    return SharedEncoderNetwork(encoder, decoder, regressor)


def encode(cnet: SharedEncoderNetwork, x: np.ndarray) -> np.ndarray:
    """Latent coordinates in (-1, 1)^d (the encoder ends in tanh)."""
    return forward(cnet.encoder, x)


def decode(cnet: SharedEncoderNetwork, z: np.ndarray, lower=None, upper=None) -> np.ndarray:
    """Decoder output, hard-clipped to [lower, upper] when bounds are given."""
    out = forward(cnet.decoder, z)
    if lower is not None:
        out = np.clip(out, lower, upper)
    return out


def combined_loss_and_grads(cnet: SharedEncoderNetwork, X, Y, lower, upper,
                            penalty_weight: float, l2_penalty: float):
    """Joint loss (regression mse + reconstruction mse + boundary penalty +
    l2 on weights) and exact gradients for all three subnetworks."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = X.shape[0]

    enc_cache = _forward_cached(cnet.encoder, X)
    z = enc_cache[-1]
    dec_cache = _forward_cached(cnet.decoder, z)
    reg_cache = _forward_cached(cnet.regressor, z)
    x_rec, y_pred = dec_cache[-1], reg_cache[-1]

    loss = mse_loss(y_pred, Y) + mse_loss(x_rec, X)
    loss += penalty_weight * boundary_penalty(x_rec, lower, upper)

    reg_grad_out = 2.0 * (y_pred - Y) / n
    dec_grad_out = 2.0 * (x_rec - X) / n
    dec_grad_out = dec_grad_out + penalty_weight * _boundary_penalty_grad(x_rec, lower, upper)

    reg_grads, g_z_reg = backprop(cnet.regressor, reg_cache, reg_grad_out)
    dec_grads, g_z_dec = backprop(cnet.decoder, dec_cache, dec_grad_out)
    enc_grads, _ = backprop(cnet.encoder, enc_cache, g_z_reg + g_z_dec)

    if l2_penalty != 0.0:
        for part, grads in zip(cnet.parts(), (enc_grads, dec_grads, reg_grads)):
            for w, gw in zip(part.weights, grads.weights):
                loss += l2_penalty * float(np.sum(w**2))
                gw += 2.0 * l2_penalty * w
    return loss, (enc_grads, dec_grads, reg_grads)


def train_combined(cnet: SharedEncoderNetwork, inputs, outputs, lower, upper,
                   cfg: TrainConfig) -> list[float]:
    """Mini-batch SGD on the joint objective; returns the per-epoch loss trace.

    Inputs are expected already scaled to the working box (see
    :class:`AutoencoderRegressor` for the raw-space wrapper); ``lower`` and
    ``upper`` are the bounds in that same space.  Deterministic per seed.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    Y = np.atleast_2d(np.asarray(outputs, dtype=float))
    if X.shape[0] != Y.shape[0]:
        raise ValueError("inputs and outputs must have the same sample count")
    rng = np.random.default_rng(cfg.seed)
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(X.shape[0])
        try:
            for start in range(0, X.shape[0], cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                _, (enc_g, dec_g, reg_g) = combined_loss_and_grads(
                    cnet, X[idx], Y[idx], lower, upper, cfg.penalty_weight, cfg.l2_penalty
                )
                sgd_step(cnet.encoder, enc_g, cfg.learning_rate)
                sgd_step(cnet.decoder, dec_g, cfg.learning_rate)
                sgd_step(cnet.regressor, reg_g, cfg.learning_rate)
            epoch_loss, _ = combined_loss_and_grads(
                cnet, X, Y, lower, upper, cfg.penalty_weight, cfg.l2_penalty
            )
        except NumericError as err:
            raise NumericError(f"training diverged at epoch {epoch + 1}: {err}") from err
        if not np.isfinite(epoch_loss):
            raise NumericError(f"training diverged at epoch {epoch + 1}")
        trace.append(epoch_loss)
    return trace


def mlp_to_dict(net: MLPNetwork) -> dict:
    return {
        "layers": [
            {"in": s.input_width, "out": s.output_width, "activation": s.activation}
            for s in net.specs
        ],
        "weights": [w.ravel().tolist() for w in net.weights],  # row-major
        "biases": [b.tolist() for b in net.biases],
    }


def mlp_from_dict(doc: dict) -> MLPNetwork:
    specs = tuple(
        LayerSpec(d["in"], d["out"], d["activation"]) for d in doc["layers"]
    )
    weights = [
        np.array(w, dtype=float).reshape(s.output_width, s.input_width)
        for w, s in zip(doc["weights"], specs)
    ]
    biases = [np.array(b, dtype=float) for b in doc["biases"]]
    return MLPNetwork(specs, weights, biases)


def mlp_to_json(net: MLPNetwork) -> str:
    return json.dumps({"format_version": 1, "network": mlp_to_dict(net)}, sort_keys=True)


def mlp_from_json(text: str) -> MLPNetwork:
    return mlp_from_dict(json.loads(text)["network"])


class AutoencoderRegressor(BaseEstimator, TransformerMixin):
    """Shared-encoder autoencoder + regressor over box-bounded inputs.

    fit(X, y) scales X affinely from [lower, upper] to [-1, 1] (tanh saturates
    on raw inputs), standardizes y, and jointly trains encoder, decoder and
    regression head by mini-batch SGD.  transform(X) returns latent
    coordinates in (-1, 1)^latent_dim; inverse_transform(Z) decodes and clips
    back into the bounds; predict(X) returns the regression output in raw
    units.
    """

    def __init__(self, latent_dim=5, encoder_hidden=(16,), decoder_hidden=(16,),
                 regressor_hidden=(32,), learning_rate=1e-2, epochs=500,
                 batch_size=16, l2_penalty=1e-4, penalty_weight=1.0, seed=0,
                 bounds=None):
        self.latent_dim = latent_dim
        self.encoder_hidden = encoder_hidden
        self.decoder_hidden = decoder_hidden
        self.regressor_hidden = regressor_hidden
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.l2_penalty = l2_penalty
        self.penalty_weight = penalty_weight
        self.seed = seed
        self.bounds = bounds

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("AutoencoderRegressor is not fitted")

    def _resolve_bounds(self, X):
        if self.bounds is None:
            return X.min(axis=0), X.max(axis=0)
        lower, upper = self.bounds
        p = X.shape[1]
        return (
            np.broadcast_to(np.asarray(lower, dtype=float), (p,)).copy(),
            np.broadcast_to(np.asarray(upper, dtype=float), (p,)).copy(),
        )

    def _scale_x(self, X):
        span = self.upper_ - self.lower_
        return 2.0 * (X - self.lower_) / span - 1.0

    def _unscale_x(self, Xs):
        return self.lower_ + (Xs + 1.0) * (self.upper_ - self.lower_) / 2.0

    def fit(self, X, y):
        X = check_array(X, dtype=float)
        y = check_array(y, dtype=float, ensure_2d=False)
        if y.ndim == 1:
            y = y[:, None]
        self.lower_, self.upper_ = self._resolve_bounds(X)
        if np.any(self.upper_ <= self.lower_):
            raise ValueError("bounds must satisfy lower < upper")
        self.y_mean_ = y.mean(axis=0)
        y_std = y.std(axis=0)
        self.y_std_ = np.where(y_std < 1e-12, 1.0, y_std)

        rng = np.random.default_rng(self.seed)
        self.net_ = build_shared_encoder(
            X.shape[1], y.shape[1], self.latent_dim, rng,
            self.encoder_hidden, self.decoder_hidden, self.regressor_hidden,
        )
        cfg = TrainConfig(
            learning_rate=self.learning_rate, epochs=self.epochs,
            batch_size=self.batch_size, l2_penalty=self.l2_penalty,
            penalty_weight=self.penalty_weight, seed=self.seed,
        )
        self.loss_trace_ = train_combined(
            self.net_, self._scale_x(X), (y - self.y_mean_) / self.y_std_,
            -1.0, 1.0, cfg,
        )
        return self

    def transform(self, X):
        self._check_fitted()
        X = check_array(X, dtype=float)
        return encode(self.net_, self._scale_x(X))

    def inverse_transform(self, Z):
        self._check_fitted()
        Z = check_array(Z, dtype=float)
        return self._unscale_x(decode(self.net_, Z, -1.0, 1.0))

    def predict(self, X):
        self._check_fitted()
        X = check_array(X, dtype=float)
        y_std = forward(self.net_.regressor, encode(self.net_, self._scale_x(X)))
        return y_std * self.y_std_ + self.y_mean_

    def to_json(self) -> str:
        self._check_fitted()
        doc = {
            "format_version": 1,
            "params": {
                "latent_dim": self.latent_dim,
                "encoder_hidden": list(self.encoder_hidden),
                "decoder_hidden": list(self.decoder_hidden),
                "regressor_hidden": list(self.regressor_hidden),
                "learning_rate": self.learning_rate,
                "epochs": self.epochs,
                "batch_size": self.batch_size,
                "l2_penalty": self.l2_penalty,
                "penalty_weight": self.penalty_weight,
                "seed": self.seed,
            },
            "scaling": {
                "lower": self.lower_.tolist(),
                "upper": self.upper_.tolist(),
                "y_mean": self.y_mean_.tolist(),
                "y_std": self.y_std_.tolist(),
            },
            "encoder": mlp_to_dict(self.net_.encoder),
            "decoder": mlp_to_dict(self.net_.decoder),
            "regressor": mlp_to_dict(self.net_.regressor),
            "loss_trace": self.loss_trace_,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AutoencoderRegressor":
        doc = json.loads(text)
        params = dict(doc["params"])
        for key in ("encoder_hidden", "decoder_hidden", "regressor_hidden"):
            params[key] = tuple(params[key])
        est = cls(**params)
        est.lower_ = np.array(doc["scaling"]["lower"], dtype=float)
        est.upper_ = np.array(doc["scaling"]["upper"], dtype=float)
        est.y_mean_ = np.array(doc["scaling"]["y_mean"], dtype=float)
        est.y_std_ = np.array(doc["scaling"]["y_std"], dtype=float)
        est.net_ = SharedEncoderNetwork(
            mlp_from_dict(doc["encoder"]),
            mlp_from_dict(doc["decoder"]),
            mlp_from_dict(doc["regressor"]),
        )
        est.loss_trace_ = list(doc["loss_trace"])
        return est
