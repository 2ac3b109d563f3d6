"""Fully-connected regression networks mapping standardized dB channels to RU power fractions.

The network predicts ``nu[m, k] = eta[m, k] * beta[m, k]`` (each RU's share of its
budget given to user ``k``) through a logistic output, so predictions always lie
in ``[0, 1]``. Hidden layers use smooth activations so input gradients exist
everywhere.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (
    LN2,
    FeatureStats,
    flatten,
    project_feasible,
    standardize,
    unflatten,
)
from .errors import DivergedLoss, ShapeMismatch
from .rng import stream


def _expit(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _silu_grad(z, a):
    s = _expit(z)
    return s + a * (1.0 - s)


# name -> (activation(z), derivative(z, activation(z)))
ACTIVATIONS = {
    "softplus": (_softplus, lambda z, a: _expit(z)),
    "silu": (lambda z: z * _expit(z), _silu_grad),
    "sigmoid": (_expit, lambda z, a: a * (1.0 - a)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "linear": (lambda z: z, lambda z, a: np.ones_like(z)),
}


@dataclass
class MlpModel:
    widths: list
    weights: list
    biases: list
    hidden_activation: str = "silu"
    output_activation: str = "sigmoid"
    feature_stats: FeatureStats = None
    grid: tuple = None
    fingerprint: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise ShapeMismatch("layer count does not match widths")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[i], self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise ShapeMismatch(f"layer {i} has shape {w.shape}/{b.shape}")
        for tag in (self.hidden_activation, self.output_activation):
            if tag not in ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")

    @property
    def n_inputs(self):
        return self.widths[0]

    def copy(self):
        return MlpModel(
            list(self.widths),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.output_activation,
            self.feature_stats,
            self.grid,
            dict(self.fingerprint),
        )


def init_mlp(n_inputs, hidden, n_outputs, seed=0, hidden_activation="silu", output_activation="sigmoid"):
    widths = [n_inputs, *hidden, n_outputs]
    rng = stream(seed, "init", 0)
    weights = [rng.standard_normal((a, b)) * np.sqrt(2.0 / a) for a, b in zip(widths[:-1], widths[1:])]
    biases = [np.zeros(b) for b in widths[1:]]
    return MlpModel(widths, weights, biases, hidden_activation, output_activation)


def _forward(model, x):
    """Forward pass keeping ``(pre-activation, activation)`` per layer for backprop."""
    a = np.asarray(x, dtype=float)
    if a.shape[-1] != model.n_inputs:
        raise ShapeMismatch(f"expected {model.n_inputs} inputs, got {a.shape[-1]}")
    cache = [(None, a)]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        act = ACTIVATIONS[model.output_activation if i == last else model.hidden_activation][0]
        a = act(z)
        cache.append((z, a))
    return cache


def _backward(model, cache, grad_out, want_params=True):
    last = len(model.weights) - 1
    grads_w, grads_b = [None] * len(model.weights), [None] * len(model.weights)
    delta = grad_out
    for i in range(last, -1, -1):
        z, a = cache[i + 1]
        deriv = ACTIVATIONS[model.output_activation if i == last else model.hidden_activation][1]
        delta = delta * deriv(z, a)
        if want_params:
            grads_w[i] = cache[i][1].T @ delta
            grads_b[i] = delta.sum(axis=0)
        delta = delta @ model.weights[i].T
    return grads_w, grads_b, delta


def forward(model, x):
    return _forward(model, x)[-1][1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 256
    epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.05
    loss: str = "mse"
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be positive and batch_size >= 1")
        if self.loss != "mse":
            raise ValueError("only the mse loss on power fractions is supported")


def training_arrays(beta, eta, stats):
    """Standardized features and ``nu = eta * beta`` targets, both ``(N, M*K)``."""
    return standardize(beta, stats), flatten(np.asarray(eta) * np.asarray(beta))


def _dataset_digest(beta, eta):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(beta, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(eta, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def mse(model, x, y):
    return float(np.mean((forward(model, x) - y) ** 2))


def train(model, dataset, cfg=TrainConfig(), log=None):
    """Fit ``model`` to the training split of ``dataset`` with Adam and early stopping.

    The last ``val_fraction`` of the (seed-shuffled) training split is held out for
    early stopping; the weights with the lowest validation loss are returned.

    Returns
    -------
    model : MlpModel
        A trained copy; the input model is not modified.
    history : dict
        ``train_loss`` and ``val_loss`` per epoch, ``best_epoch``.
    """
    beta, eta = dataset.train
    if len(beta) == 0:
        raise ValueError("empty training split")
    x, y = training_arrays(beta, eta, dataset.feature_stats)
    order = stream(cfg.seed, "shuffle", 0).permutation(len(x))
    n_val = int(round(cfg.val_fraction * len(x)))
    if n_val >= len(x):
        n_val = 0
    val_idx, fit_idx = order[len(x) - n_val :], order[: len(x) - n_val]
    x_fit, y_fit = x[fit_idx], y[fit_idx]
    x_val, y_val = (x[val_idx], y[val_idx]) if n_val else (x_fit, y_fit)

    model = model.copy()
    model.feature_stats = dataset.feature_stats
    model.grid = dataset.config.shape
    # Start the output layer at the mean target so early epochs are not spent on the offset.
    mean = np.clip(y_fit.mean(axis=0), 1e-6, 1 - 1e-6)
    if model.output_activation == "sigmoid":
        model.biases[-1] = np.log(mean / (1.0 - mean))

    params = model.weights + model.biases
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    step = 0
    history = {"train_loss": [], "val_loss": []}
    best, best_loss, best_epoch, stale = None, np.inf, -1, 0
    rng = stream(cfg.seed, "shuffle", 1)
    n_layers = len(model.weights)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(x_fit))
        total = 0.0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            cache = _forward(model, x_fit[idx])
            err = cache[-1][1] - y_fit[idx]
            total += float((err * err).sum())
            gw, gb, _ = _backward(model, cache, 2.0 * err / err.size)
            step += 1
            lr = cfg.learning_rate * np.sqrt(1 - cfg.beta2**step) / (1 - cfg.beta1**step)
            for j, g in enumerate(gw + gb):
                m1[j] = cfg.beta1 * m1[j] + (1 - cfg.beta1) * g
                m2[j] = cfg.beta2 * m2[j] + (1 - cfg.beta2) * g * g
                params[j] -= lr * m1[j] / (np.sqrt(m2[j]) + cfg.epsilon)
        train_loss = total / y_fit.size
        val_loss = mse(model, x_val, y_val)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise DivergedLoss(f"non-finite loss at epoch {epoch}")
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val_loss)
        if log is not None:
            log(f"epoch {epoch:3d}  train {train_loss:.3e}  val {val_loss:.3e}")
        if val_loss < best_loss:
            best_loss, best_epoch, stale = val_loss, epoch, 0
            best = [p.copy() for p in params]
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.weights = best[:n_layers]
    model.biases = best[n_layers:]
    history["best_epoch"] = best_epoch
    history["best_val_loss"] = float(best_loss)
    model.fingerprint = {
        "train_config": asdict(cfg),
        "dataset": _dataset_digest(beta, eta),
        "n_train": int(len(x_fit)),
        "n_val": int(n_val),
        "best_epoch": int(best_epoch),
        "best_val_loss": float(best_loss),
    }
    return model, history


def sum_se_and_grad(nu, g):
    """Sum spectral efficiency and its gradient w.r.t. the power fractions ``nu``.

    ``nu`` and ``g = P_t beta / sigma^2`` are ``(B, M, K)``. With ``eta = nu / beta``,
    ``sqrt(eta) beta = sqrt(nu g) * sigma / sqrt(P_t)`` and the SINR becomes
    ``(sum_m sqrt(nu_mk g_mk))^2 / (sum_m g_mk sum_l nu_ml + 1)``.
    """
    root = np.sqrt(nu * g)
    amp = root.sum(axis=-2)
    interf = (g * nu.sum(axis=-1)[..., :, None]).sum(axis=-2) + 1.0
    sinr = amp**2 / interf
    se = np.log2(1.0 + sinr)
    w = 1.0 / ((1.0 + sinr) * LN2)
    with np.errstate(divide="ignore", invalid="ignore"):
        d_num = np.where(nu > 0, (w * amp / interf)[..., None, :] * g / root, 0.0)
    d_den = (g * (w * sinr / interf)[..., None, :]).sum(axis=-1)
    return se.sum(axis=-1), d_num - d_den[..., :, None]


def input_gradient(model, x, beta_belief, p_t, noise_power):
    """Exact gradient of the users' sum SE w.r.t. the standardized input ``x``.

    Power coefficients are recovered as ``nu(x) / beta_belief`` and SE is evaluated
    on ``beta_belief``; the belief is a constant, so only the model path carries
    gradient.

    Returns ``(J, dJ/dx)`` with shapes ``(B,)`` and ``(B, M*K)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    beta_belief = np.asarray(beta_belief, dtype=float).reshape((len(x),) + np.shape(beta_belief)[-2:])
    m, k = beta_belief.shape[-2:]
    cache = _forward(model, x)
    nu = unflatten(cache[-1][1], m, k)
    j, d_nu = sum_se_and_grad(nu, p_t * beta_belief / noise_power)
    _, _, grad = _backward(model, cache, flatten(d_nu), want_params=False)
    return j, grad


def predict_allocation(model, beta_reported):
    """The central processor's inference path: standardize, predict, divide, project.

    The returned coefficients are feasible with respect to ``beta_reported``.
    """
    beta_reported = np.asarray(beta_reported, dtype=float)
    m, k = beta_reported.shape[-2:]
    x = standardize(beta_reported, model.feature_stats)
    nu = unflatten(forward(model, x), m, k)
    return project_feasible(beta_reported, nu / beta_reported)


# Binary container: magic, u64 header length, JSON header, then W0, b0, W1, b1, ...
# as float64 little-endian, each W row-major with shape (fan_in, fan_out).
MODEL_MAGIC = b"DMIMOMD1"


def model_bytes(model):
    header = {
        "widths": list(model.widths),
        "hidden_activation": model.hidden_activation,
        "output_activation": model.output_activation,
        "feature_stats": None if model.feature_stats is None else model.feature_stats.to_dict(),
        "grid": None if model.grid is None else list(model.grid),
        "fingerprint": model.fingerprint,
        "blocks": "W0 b0 W1 b1 ... ; W shape (fan_in, fan_out), row-major",
    }
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [MODEL_MAGIC, struct.pack("<Q", len(blob)), blob]
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def model_digest(model):
    return hashlib.sha256(model_bytes(model)).hexdigest()


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write(model_bytes(model))


def load_model(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    off = len(MODEL_MAGIC)
    (n,) = struct.unpack("<Q", raw[off : off + 8])
    off += 8
    header = json.loads(raw[off : off + n].decode())
    off += n
    values = np.frombuffer(raw[off:], dtype="<f8").astype(float)
    widths = header["widths"]
    weights, biases, pos = [], [], 0
    for a, b in zip(widths[:-1], widths[1:]):
        weights.append(values[pos : pos + a * b].reshape(a, b))
        pos += a * b
        biases.append(values[pos : pos + b].copy())
        pos += b
    if pos != values.size:
        raise ShapeMismatch(f"{path}: weight payload does not match widths")
    stats = header["feature_stats"]
    return MlpModel(
        widths,
        weights,
        biases,
        header["hidden_activation"],
        header["output_activation"],
        None if stats is None else FeatureStats.from_dict(stats),
        None if header["grid"] is None else tuple(header["grid"]),
        header["fingerprint"],
    )
