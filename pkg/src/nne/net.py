"""Single-hidden-layer network mapping moment vectors to parameter estimates.

The net has three output heads.  A point head emits mu only.  The
``point+diag_var`` head emits mu plus per-coordinate log-variances, and
``point+full_cov`` emits mu plus the lower-triangular entries of a Cholesky
factor T with exp-transformed diagonal, so V = T T' is positive definite for
any finite weights.  Losses: c1 is mean squared error over coordinates, c2 is
the Gaussian negative log-density up to constants, and both are instances of a
pluggable log-density family (the normal family is the only one shipped).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import RngStream, TrainingSet, as_generator

LOGVAR_CLAMP = (-10.0, 10.0)

_HEADS = ("point", "point+diag_var", "point+full_cov")
_ACTIVATIONS = ("relu", "sigmoid")


class TrainingError(RuntimeError):
    """Raised when training cannot proceed (bad inputs or diverging loss)."""


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden_units: int
    activation: str
    p: int
    head: str

    def __post_init__(self):
        if self.input_dim < 1 or self.p < 1:
            raise ValueError("input_dim and p must be at least 1")
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be at least 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in _HEADS:
            raise ValueError(f"unknown head {self.head!r}")

    def raw_width(self) -> int:
        if self.head == "point":
            return self.p
        if self.head == "point+diag_var":
            return 2 * self.p
        return self.p + self.p * (self.p + 1) // 2


@dataclass(frozen=True)
class TrainSpec:
    loss: str = "c2_diag"
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 25
    validation_fraction: float = 0.10

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 0:
            raise ValueError("max_epochs, batch_size >= 1 and patience >= 0 required")


class NormalFamily:
    """Gaussian log-density family; structure picks the covariance shape.

    identity reproduces the squared-error loss exactly, diag and full give the
    log|V| + r'V^{-1}r objective with the corresponding V parameterization.
    """

    STRUCTURES = ("identity", "diag", "full")

    def __init__(self, structure: str):
        if structure not in self.STRUCTURES:
            raise ValueError(f"unknown structure {structure!r}")
        self.structure = structure

    def __repr__(self):
        return f"NormalFamily({self.structure!r})"

    def head(self) -> str:
        return {"identity": "point", "diag": "point+diag_var", "full": "point+full_cov"}[
            self.structure
        ]

    def raw_width(self, p: int) -> int:
        if self.structure == "identity":
            return p
        if self.structure == "diag":
            return 2 * p
        return p + p * (p + 1) // 2

    def loss_and_grad(self, raw, theta, clamp=LOGVAR_CLAMP):
        """Mean loss over the batch and its gradient with respect to raw outputs."""
        raw = np.asarray(raw, dtype=float)
        theta = np.asarray(theta, dtype=float)
        B, p = theta.shape
        lo, hi = clamp
        draw = np.empty_like(raw)
        if self.structure == "identity":
            r = raw - theta
            value = float((r**2).sum(axis=1).mean())
            draw[:] = 2.0 * r / B
            return value, draw
        mu = raw[:, :p]
        r = theta - mu
        if self.structure == "diag":
            s_raw = raw[:, p:]
            s = np.clip(s_raw, lo, hi)
            active = (s_raw > lo) & (s_raw < hi)
            v = np.exp(s)
            value = float((s + r**2 / v).sum(axis=1).mean())
            draw[:, :p] = -2.0 * r / v / B
            draw[:, p:] = (1.0 - r**2 / v) * active / B
            return value, draw
        rows, cols = np.tril_indices(p)
        diag_pos = np.flatnonzero(rows == cols)
        tr = raw[:, p:]
        s_raw = tr[:, diag_pos]
        s = np.clip(s_raw, lo, hi)
        active = (s_raw > lo) & (s_raw < hi)
        Tkk = np.exp(s)
        T = np.zeros((B, p, p))
        T[:, rows, cols] = tr
        T[:, np.arange(p), np.arange(p)] = Tkk
        alpha = np.linalg.solve(T, r[:, :, None])[:, :, 0]
        gamma = np.linalg.solve(np.transpose(T, (0, 2, 1)), alpha[:, :, None])[:, :, 0]
        value = float((2.0 * s.sum(axis=1) + (alpha**2).sum(axis=1)).mean())
        dT = -2.0 * gamma[:, :, None] * alpha[:, None, :]
        tr_grad = dT[:, rows, cols]
        d_diag = (dT[:, np.arange(p), np.arange(p)] + 2.0 / Tkk) * Tkk * active
        tr_grad[:, diag_pos] = d_diag
        draw[:, :p] = -2.0 * gamma / B
        draw[:, p:] = tr_grad / B
        return value, draw


LOSS_FAMILIES = {
    "c1": NormalFamily("identity"),
    "c2_diag": NormalFamily("diag"),
    "c2_full": NormalFamily("full"),
}
_FAMILY_FOR_HEAD = {fam.head(): fam for fam in LOSS_FAMILIES.values()}


def resolve_family(loss) -> NormalFamily:
    if isinstance(loss, str):
        try:
            return LOSS_FAMILIES[loss]
        except KeyError:
            raise ValueError(f"unknown loss {loss!r}") from None
    if hasattr(loss, "loss_and_grad") and hasattr(loss, "head"):
        return loss
    raise ValueError(f"loss must be a name or a density family, got {loss!r}")


def net_config_for(loss, input_dim: int, p: int, hidden_units: int, activation: str = "relu") -> NetConfig:
    """Config whose head matches the requested loss."""
    family = resolve_family(loss)
    return NetConfig(
        input_dim=input_dim,
        hidden_units=hidden_units,
        activation=activation,
        p=p,
        head=family.head(),
    )


def init_weights(config: NetConfig, rng) -> dict:
    """Uniform fan-in-scaled initialization for weights and biases."""
    gen = as_generator(rng)
    a0 = 1.0 / np.sqrt(config.input_dim)
    a1 = 1.0 / np.sqrt(config.hidden_units)
    w = config.raw_width()
    return {
        "W0": gen.uniform(-a0, a0, size=(config.hidden_units, config.input_dim)),
        "b0": gen.uniform(-a0, a0, size=config.hidden_units),
        "W1": gen.uniform(-a1, a1, size=(w, config.hidden_units)),
        "b1": gen.uniform(-a1, a1, size=w),
    }


def _activation(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return 1.0 / (1.0 + np.exp(-z))


def _activation_grad(z, a, kind):
    if kind == "relu":
        return (z > 0.0).astype(float)
    return a * (1.0 - a)


def _raw_outputs(weights, M, activation):
    Z0 = M @ weights["W0"].T + weights["b0"]
    A = _activation(Z0, activation)
    raw = A @ weights["W1"].T + weights["b1"]
    return raw, Z0, A


def net_loss(weights, moments, thetas, config: NetConfig, clamp=LOGVAR_CLAMP, family=None) -> float:
    if family is None:
        family = _FAMILY_FOR_HEAD[config.head]
    raw, _, _ = _raw_outputs(weights, np.asarray(moments, dtype=float), config.activation)
    value, _ = family.loss_and_grad(raw, np.asarray(thetas, dtype=float), clamp)
    return value


def net_loss_grad(weights, moments, thetas, config: NetConfig, clamp=LOGVAR_CLAMP, family=None):
    """Loss and its gradient with respect to every weight array."""
    if family is None:
        family = _FAMILY_FOR_HEAD[config.head]
    M = np.asarray(moments, dtype=float)
    raw, Z0, A = _raw_outputs(weights, M, config.activation)
    value, draw = family.loss_and_grad(raw, np.asarray(thetas, dtype=float), clamp)
    dW1 = draw.T @ A
    db1 = draw.sum(axis=0)
    dA = draw @ weights["W1"]
    dZ0 = dA * _activation_grad(Z0, A, config.activation)
    dW0 = dZ0.T @ M
    db0 = dZ0.sum(axis=0)
    return value, {"W0": dW0, "b0": db0, "W1": dW1, "b1": db1}


def _head_outputs(raw, config: NetConfig, clamp):
    p = config.p
    lo, hi = clamp
    if config.head == "point":
        return raw, None
    mu = raw[:, :p]
    if config.head == "point+diag_var":
        v = np.exp(np.clip(raw[:, p:], lo, hi))
        V = np.zeros((raw.shape[0], p, p))
        V[:, np.arange(p), np.arange(p)] = v
        return mu, V
    rows, cols = np.tril_indices(p)
    diag_pos = np.flatnonzero(rows == cols)
    tr = raw[:, p:].copy()
    tr[:, diag_pos] = np.exp(np.clip(tr[:, diag_pos], lo, hi))
    T = np.zeros((raw.shape[0], p, p))
    T[:, rows, cols] = tr
    return mu, T @ np.transpose(T, (0, 2, 1))


@dataclass
class TrainedNet:
    config: NetConfig
    weights: dict
    input_mean: np.ndarray
    input_sd: np.ndarray
    clamp: tuple = LOGVAR_CLAMP
    meta: dict = field(default_factory=dict)

    def _standardize(self, m):
        x = np.asarray(m, dtype=float)
        if x.shape[-1] != self.config.input_dim:
            raise ValueError(
                f"moment vector has length {x.shape[-1]}, net expects {self.config.input_dim}"
            )
        return (x - self.input_mean) / self.input_sd

    def raw(self, m):
        x = np.atleast_2d(self._standardize(m))
        out, _, _ = _raw_outputs(self.weights, x, self.config.activation)
        return out

    def dumps(self) -> str:
        payload = {
            "format": "nne-trained-net",
            "version": 1,
            "config": {
                "input_dim": self.config.input_dim,
                "hidden_units": self.config.hidden_units,
                "activation": self.config.activation,
                "p": self.config.p,
                "head": self.config.head,
            },
            "clamp": list(self.clamp),
            "input_mean": self.input_mean.tolist(),
            "input_sd": self.input_sd.tolist(),
            "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.weights.items()},
            "meta": self.meta,
        }
        return json.dumps(payload, indent=1)

    @classmethod
    def loads(cls, text: str) -> "TrainedNet":
        payload = json.loads(text)
        if payload.get("format") != "nne-trained-net":
            raise ValueError("not a serialized trained net")
        config = NetConfig(**payload["config"])
        weights = {
            k: np.asarray(v["data"], dtype=float).reshape(v["shape"])
            for k, v in payload["weights"].items()
        }
        return cls(
            config=config,
            weights=weights,
            input_mean=np.asarray(payload["input_mean"], dtype=float),
            input_sd=np.asarray(payload["input_sd"], dtype=float),
            clamp=tuple(payload["clamp"]),
            meta=payload.get("meta", {}),
        )

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "TrainedNet":
        return cls.loads(Path(path).read_text())


def forward(net: TrainedNet, m):
    """Point estimate and covariance (or None for the point head)."""
    x = np.asarray(m, dtype=float)
    single = x.ndim == 1
    raw = net.raw(x)
    mu, V = _head_outputs(raw, net.config, net.clamp)
    if single:
        return mu[0], None if V is None else V[0]
    return mu, V


def _as_arrays(examples):
    if isinstance(examples, TrainingSet):
        return examples.thetas, examples.moments
    if isinstance(examples, tuple) and len(examples) == 2:
        return np.atleast_2d(np.asarray(examples[0], dtype=float)), np.atleast_2d(
            np.asarray(examples[1], dtype=float)
        )
    thetas = np.vstack([np.asarray(ex.theta, dtype=float) for ex in examples])
    moments = np.vstack([np.asarray(ex.moments, dtype=float) for ex in examples])
    return thetas, moments


def loss_c1(net: TrainedNet, examples) -> float:
    thetas, moments = _as_arrays(examples)
    if len(thetas) == 0:
        raise ValueError("empty example set")
    mu, _ = forward(net, moments)
    return float(((mu - thetas) ** 2).sum(axis=1).mean())


def loss_c2(net: TrainedNet, examples) -> float:
    if net.config.head == "point":
        raise ValueError("loss_c2 needs a variance head")
    thetas, moments = _as_arrays(examples)
    if len(thetas) == 0:
        raise ValueError("empty example set")
    raw = net.raw(moments)
    family = _FAMILY_FOR_HEAD[net.config.head]
    value, _ = family.loss_and_grad(raw, thetas, net.clamp)
    return value


def train(examples, config: NetConfig, spec: TrainSpec, rng) -> TrainedNet:
    """Mini-batch Adam with early stopping on the held-out last tenth."""
    thetas, moments = _as_arrays(examples)
    L = thetas.shape[0]
    if L < 2:
        raise TrainingError("need at least 2 examples")
    if moments.shape[1] != config.input_dim or thetas.shape[1] != config.p:
        raise TrainingError(
            f"examples have dims ({moments.shape[1]}, {thetas.shape[1]}), "
            f"config expects ({config.input_dim}, {config.p})"
        )
    if not (np.all(np.isfinite(moments)) and np.all(np.isfinite(thetas))):
        raise TrainingError("non-finite values in training examples")
    family = resolve_family(spec.loss)
    if family.head() != config.head:
        raise TrainingError(f"loss {spec.loss!r} needs head {family.head()!r}, config has {config.head!r}")

    n_val = min(max(1, round(L * spec.validation_fraction)), L - 1)
    n_train = L - n_val
    mean = moments[:n_train].mean(axis=0)
    sd = np.maximum(moments[:n_train].std(axis=0), 1e-12)
    X = (moments - mean) / sd
    Xtr, Ttr = X[:n_train], thetas[:n_train]
    Xva, Tva = X[n_train:], thetas[n_train:]

    gen = as_generator(rng)
    weights = init_weights(config, gen)
    adam_m = {k: np.zeros_like(v) for k, v in weights.items()}
    adam_v = {k: np.zeros_like(v) for k, v in weights.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0

    best_val = np.inf
    best_weights = {k: v.copy() for k, v in weights.items()}
    best_epoch = 0
    stale = 0
    epoch = 0
    for epoch in range(1, spec.max_epochs + 1):
        perm = gen.permutation(n_train)
        for start in range(0, n_train, spec.batch_size):
            idx = perm[start : start + spec.batch_size]
            value, grads = net_loss_grad(weights, Xtr[idx], Ttr[idx], config, LOGVAR_CLAMP, family)
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, batch starting {start}"
                )
            t += 1
            for k in weights:
                adam_m[k] = beta1 * adam_m[k] + (1 - beta1) * grads[k]
                adam_v[k] = beta2 * adam_v[k] + (1 - beta2) * grads[k] ** 2
                mhat = adam_m[k] / (1 - beta1**t)
                vhat = adam_v[k] / (1 - beta2**t)
                weights[k] -= spec.learning_rate * mhat / (np.sqrt(vhat) + eps)
        val = net_loss(weights, Xva, Tva, config, LOGVAR_CLAMP, family)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        if val < best_val:
            best_val = val
            best_weights = {k: v.copy() for k, v in weights.items()}
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= spec.patience:
                break

    train_loss = net_loss(best_weights, Xtr, Ttr, config, LOGVAR_CLAMP, family)
    meta = {
        "train_loss": float(train_loss),
        "val_loss": float(best_val),
        "best_epoch": int(best_epoch),
        "epochs_run": int(epoch),
        "n_train": int(n_train),
        "n_val": int(n_val),
        "loss": spec.loss if isinstance(spec.loss, str) else repr(spec.loss),
    }
    if isinstance(rng, RngStream):
        meta["seed_path"] = rng.seed_path()
    return TrainedNet(
        config=config,
        weights=best_weights,
        input_mean=mean,
        input_sd=sd,
        clamp=LOGVAR_CLAMP,
        meta=meta,
    )


def select_hidden_nodes(examples, candidates, config_template: NetConfig, spec: TrainSpec, rng) -> int:
    """Candidate with the smallest validation loss; ties keep the earliest."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("need at least one candidate")
    if len(candidates) == 1:
        return candidates[0]
    best_idx = 0
    best_val = np.inf
    for i, h in enumerate(candidates):
        config = replace(config_template, hidden_units=int(h))
        sub = rng.substream("hidden", int(h)) if isinstance(rng, RngStream) else rng
        net = train(examples, config, spec, sub)
        if net.meta["val_loss"] < best_val:
            best_val = net.meta["val_loss"]
            best_idx = i
    return candidates[best_idx]
