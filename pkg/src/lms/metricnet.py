"""Learned metric approximator.

A small dense network maps a latent point straight to predictions of the
metric and cometric, replacing Jacobian-based evaluation whose cost scales
with the ambient dimension.  The network predicts the upper-triangular half
of each matrix; predictions are mirrored to full symmetric matrices, so
symmetry holds structurally.  Training minimizes

    |g_t - g_p|^2/|g_t|^2 + |ginv_t - ginv_p|^2/|ginv_t|^2 + |ginv_p g_p - I|^2

(Frobenius norms throughout); the inverse-consistency term keeps the
predicted pair close to actual inverses without any projection layer.
Backpropagation and Adam are implemented here directly: the model must stay
portable through the plain-JSON weights format.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .decoders import layers_from_json, layers_to_json
from .geometry import MetricError, exp_map

__all__ = [
    "TrainConfig",
    "MetricNetModel",
    "TrainError",
    "BenchmarkReport",
    "approximation_loss",
    "train",
    "benchmark",
    "save_model",
    "load_model",
]


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TrainConfig:
    """Sampling region and optimizer settings for approximator training."""

    region: np.ndarray  # (d, 2) box, columns lo/hi
    n_samples: int = 10_000
    batch_size: int = 128
    learning_rate: float = 1e-3
    epochs: int = 200
    seed: int = 0
    hidden: tuple = (64, 64)
    val_fraction: float = 0.1

    def __post_init__(self):
        region = np.asarray(self.region, dtype=float)
        if region.ndim != 2 or region.shape[1] != 2:
            raise ValueError("region must be a (d, 2) box")
        if not (region[:, 1] > region[:, 0]).all():
            raise ValueError("region box is degenerate")
        if self.n_samples < 10 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("counts must be positive (n_samples >= 10)")
        if len(self.hidden) != 2:
            raise ValueError("exactly two hidden layers")
        object.__setattr__(self, "region", region)


@dataclass(eq=False)
class MetricNetModel:
    """Trained approximator: two tanh hidden layers, linear output of size
    d(d+1) holding the upper triangles of (g, g^-1)."""

    dim: int
    weights: tuple
    biases: tuple
    region: np.ndarray
    n_samples: int = 0
    history: dict = field(default_factory=dict)  # epoch -> train/val losses

    def __post_init__(self):
        d = self.dim
        t = d * (d + 1) // 2
        if self.weights[0].shape[1] != d or self.weights[-1].shape[0] != 2 * t:
            raise ValueError("layer sizes do not match latent dimension")
        self._iu = np.triu_indices(d)

    def forward(self, Z):
        W1, W2, W3 = self.weights
        b1, b2, b3 = self.biases
        H1 = np.tanh(Z @ W1.T + b1)
        H2 = np.tanh(H1 @ W2.T + b2)
        return H2 @ W3.T + b3

    def predict_batch(self, Z):
        """Symmetrized (g, g^-1) predictions for a (B, d) batch.

        Raises MetricError when a prediction is not positive-definite."""
        Z = np.asarray(Z, dtype=float)
        out = self.forward(Z)
        t = self.dim * (self.dim + 1) // 2
        G = _sym_from_tri(out[:, :t], self.dim, self._iu)
        Ginv = _sym_from_tri(out[:, t:], self.dim, self._iu)
        for M, what in ((G, "metric"), (Ginv, "cometric")):
            try:
                np.linalg.cholesky(M)
            except np.linalg.LinAlgError:
                eig = np.linalg.eigvalsh(M)
                b = int(np.argmin(eig[:, 0]))
                raise MetricError(
                    f"predicted {what} not positive-definite at z={Z[b]}: "
                    f"smallest eigenvalue {eig[b, 0]:.6e}"
                ) from None
        return G, Ginv

    def predict(self, z):
        G, Ginv = self.predict_batch(np.asarray(z, dtype=float)[None])
        return G[0], Ginv[0]


def _sym_from_tri(U, d, iu):
    # mirror the upper triangle; off-diagonals are copied, not halved
    B = U.shape[0]
    M = np.zeros((B, d, d))
    M[:, iu[0], iu[1]] = U
    M[:, iu[1], iu[0]] = U
    return M


def _tri_from_sym_grad(dM, iu):
    # adjoint of _sym_from_tri: off-diagonal parameters feed two entries
    dU = dM[:, iu[0], iu[1]].copy()
    off = iu[0] != iu[1]
    dU[:, off] += dM[:, iu[1][off], iu[0][off]]
    return dU


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _loss_batch(Gt, Ginvt, Gp, Ginvp):
    n1 = (Gt**2).sum(axis=(1, 2))
    n2 = (Ginvt**2).sum(axis=(1, 2))
    if (n1 == 0).any() or (n2 == 0).any():
        raise ValueError("degenerate target: zero-norm metric or cometric")
    E = np.einsum("bij,bjk->bik", Ginvp, Gp) - np.eye(Gt.shape[1])
    return (
        ((Gp - Gt) ** 2).sum(axis=(1, 2)) / n1
        + ((Ginvp - Ginvt) ** 2).sum(axis=(1, 2)) / n2
        + (E**2).sum(axis=(1, 2))
    ), E, n1, n2


def approximation_loss(g_true, ginv_true, g_pred, ginv_pred):
    """Relative Frobenius errors of both predictions plus the
    inverse-consistency penalty |ginv_p g_p - I|^2."""
    args = [np.asarray(a, dtype=float)[None] for a in (g_true, ginv_true, g_pred, ginv_pred)]
    losses, _, _, _ = _loss_batch(*args)
    return float(losses[0])


def _loss_and_output_grad(Gt, Ginvt, Gp, Ginvp):
    B = Gt.shape[0]
    losses, E, n1, n2 = _loss_batch(Gt, Ginvt, Gp, Ginvp)
    dGp = 2.0 * (Gp - Gt) / n1[:, None, None]
    dGp += 2.0 * np.einsum("bmi,bmj->bij", Ginvp, E)  # Ginvp^T E
    dGinvp = 2.0 * (Ginvp - Ginvt) / n2[:, None, None]
    dGinvp += 2.0 * np.einsum("bim,bjm->bij", E, Gp)  # E Gp^T
    return float(losses.mean()), dGp / B, dGinvp / B


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _init_params(d, hidden, rng):
    t = d * (d + 1) // 2
    sizes = [d, hidden[0], hidden[1], 2 * t]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def _forward_cached(params, Z):
    W1, b1, W2, b2, W3, b3 = params
    A1 = Z @ W1.T + b1
    H1 = np.tanh(A1)
    A2 = H1 @ W2.T + b2
    H2 = np.tanh(A2)
    return H1, H2, H2 @ W3.T + b3


def _loss_and_grads(params, Z, Gt, Ginvt, d, iu):
    W1, b1, W2, b2, W3, b3 = params
    H1, H2, out = _forward_cached(params, Z)
    t = d * (d + 1) // 2
    Gp = _sym_from_tri(out[:, :t], d, iu)
    Ginvp = _sym_from_tri(out[:, t:], d, iu)
    loss, dGp, dGinvp = _loss_and_output_grad(Gt, Ginvt, Gp, Ginvp)
    dOut = np.concatenate([_tri_from_sym_grad(dGp, iu), _tri_from_sym_grad(dGinvp, iu)], axis=1)
    dW3 = dOut.T @ H2
    db3 = dOut.sum(axis=0)
    dH2 = dOut @ W3
    dA2 = dH2 * (1.0 - H2**2)
    dW2 = dA2.T @ H1
    db2 = dA2.sum(axis=0)
    dH1 = dA2 @ W2
    dA1 = dH1 * (1.0 - H1**2)
    dW1 = dA1.T @ Z
    db1 = dA1.sum(axis=0)
    return loss, [dW1, db1, dW2, db2, dW3, db3]


def _params_loss(params, Z, Gt, Ginvt, d, iu):
    _, _, out = _forward_cached(params, Z)
    t = d * (d + 1) // 2
    Gp = _sym_from_tri(out[:, :t], d, iu)
    Ginvp = _sym_from_tri(out[:, t:], d, iu)
    losses, _, _, _ = _loss_batch(Gt, Ginvt, Gp, Ginvp)
    return float(losses.mean())


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g**2
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _sample_targets(provider, Z, chunk=512):
    """Exact (g, g^-1) targets; isolated provider failures are skipped."""
    good_z, good_g, good_gi = [], [], []
    skipped = 0
    for start in range(0, len(Z), chunk):
        block = Z[start : start + chunk]
        try:
            G, Gi = provider.metric_and_cometric_batch(block)
            good_z.append(block)
            good_g.append(G)
            good_gi.append(Gi)
        except MetricError:
            for z in block:  # find the offenders one by one
                try:
                    G, Gi = provider.metric_and_cometric_batch(z[None])
                except MetricError:
                    skipped += 1
                    continue
                good_z.append(z[None])
                good_g.append(G)
                good_gi.append(Gi)
    if skipped > 0.01 * len(Z):
        raise TrainError(f"exact provider failed at {skipped}/{len(Z)} sampled points")
    return np.concatenate(good_z), np.concatenate(good_g), np.concatenate(good_gi), skipped


def train(provider, cfg):
    """Fit the approximator to an exact provider over cfg.region.

    Deterministic given cfg.seed; returns the model with per-epoch train and
    validation losses recorded (epoch 0 is the pre-training evaluation).
    """
    d = provider.dim
    if cfg.region.shape[0] != d:
        raise ValueError("region dimension does not match the provider")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed]))
    Z = rng.uniform(cfg.region[:, 0], cfg.region[:, 1], size=(cfg.n_samples, d))
    Z, Gt, Ginvt, skipped = _sample_targets(provider, Z)

    n = len(Z)
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    Zv, Gv, Giv = Z[val_idx], Gt[val_idx], Ginvt[val_idx]
    Ztr, Gtr, Gitr = Z[train_idx], Gt[train_idx], Ginvt[train_idx]

    weights, biases = _init_params(d, cfg.hidden, rng)
    params = [weights[0], biases[0], weights[1], biases[1], weights[2], biases[2]]
    iu = np.triu_indices(d)
    opt = _Adam(params, cfg.learning_rate)

    history = {"epoch": [0], "train": [_params_loss(params, Ztr, Gtr, Gitr, d, iu)],
               "val": [_params_loss(params, Zv, Gv, Giv, d, iu)]}
    n_train = len(Ztr)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            loss, grads = _loss_and_grads(params, Ztr[sel], Gtr[sel], Gitr[sel], d, iu)
            opt.step(params, grads)
            total += loss * len(sel)
        history["epoch"].append(epoch)
        history["train"].append(total / n_train)
        history["val"].append(_params_loss(params, Zv, Gv, Giv, d, iu))

    return MetricNetModel(
        dim=d,
        weights=(params[0], params[2], params[4]),
        biases=(params[1], params[3], params[5]),
        region=cfg.region,
        n_samples=n,
        history=history,
    )


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkReport:
    exact_seconds: float
    learned_seconds: float
    speedup: float
    endpoint_exact: np.ndarray
    endpoint_learned: np.ndarray
    endpoint_rel_diff: float


def benchmark(exact, learned, z0, v, steps=100, repeats=3):
    """Time the same geodesic-integration workload (RK4 incl. Christoffel
    evaluation) under both providers; the ratio may honestly fall below 1
    when the decoder is tiny."""

    def run(provider):
        best = np.inf
        end = None
        for _ in range(repeats):
            t0 = time.perf_counter()
            path = exp_map(provider, z0, v, steps=steps)
            best = min(best, time.perf_counter() - t0)
            end = path.endpoint
        return best, end

    exact_s, end_exact = run(exact)
    learned_s, end_learned = run(learned)
    scale = max(np.linalg.norm(end_exact - np.asarray(z0, dtype=float)), 1e-12)
    return BenchmarkReport(
        exact_seconds=exact_s,
        learned_seconds=learned_s,
        speedup=exact_s / learned_s,
        endpoint_exact=end_exact,
        endpoint_learned=end_learned,
        endpoint_rel_diff=float(np.linalg.norm(end_learned - end_exact) / scale),
    )


# ---------------------------------------------------------------------------
# serialization (shared layer schema + a "metricnet" header)
# ---------------------------------------------------------------------------


def save_model(path, model):
    doc = {
        "metricnet": {
            "dim": int(model.dim),
            "region": [[float(lo), float(hi)] for lo, hi in model.region],
            "n_samples": int(model.n_samples),
            "final_train_loss": float(model.history["train"][-1]) if model.history else None,
            "final_val_loss": float(model.history["val"][-1]) if model.history else None,
        },
        "layers": layers_to_json(model.weights, model.biases, ["tanh", "tanh", "identity"]),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "metricnet" not in doc:
        raise ValueError(f"{path}: not a metric approximator file")
    header = doc["metricnet"]
    weights, biases, _ = layers_from_json(doc["layers"])
    return MetricNetModel(
        dim=int(header["dim"]),
        weights=weights,
        biases=biases,
        region=np.asarray(header["region"], dtype=float),
        n_samples=int(header.get("n_samples", 0)),
    )
