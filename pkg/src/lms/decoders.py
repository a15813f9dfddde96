"""Smooth decoder maps from a low-dimensional latent space into data space.

A decoder f: R^d -> R^n is the sole source of geometry downstream: the
pullback metric is Jf(z)^T Jf(z).  Jacobians are computed by forward-mode
differentiation (all d tangent directions propagated in one sweep), never
by finite differences.  Decoders are immutable and every operation here is
a pure function of (decoder, inputs).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "DecoderError",
    "Decoder",
    "LinearDecoder",
    "SphereDecoder",
    "ParaboloidDecoder",
    "MLPDecoder",
    "ProjectionResult",
    "decode",
    "jacobian",
    "value_and_jacobian",
    "project_to_latent",
    "stereographic_latent",
    "decoder_from_config",
    "load_decoder",
    "save_decoder",
]


class DecoderError(ValueError):
    """Bad decoder input, malformed weights, or non-finite decoder output."""


# ---------------------------------------------------------------------------
# forward-mode duals
# ---------------------------------------------------------------------------


class _Dual:
    """Batched value/tangent pair for forward-mode differentiation.

    ``val`` has shape (B,), ``tan`` shape (B, k): k directional derivatives
    are carried simultaneously, i.e. k dual sweeps in a single pass.
    """

    __slots__ = ("val", "tan")

    def __init__(self, val, tan):
        self.val = val
        self.tan = tan

    def __add__(self, other):
        if isinstance(other, _Dual):
            return _Dual(self.val + other.val, self.tan + other.tan)
        return _Dual(self.val + other, self.tan)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, _Dual):
            return _Dual(self.val - other.val, self.tan - other.tan)
        return _Dual(self.val - other, self.tan)

    def __rsub__(self, other):
        return _Dual(other - self.val, -self.tan)

    def __mul__(self, other):
        if isinstance(other, _Dual):
            return _Dual(
                self.val * other.val,
                self.tan * other.val[:, None] + other.tan * self.val[:, None],
            )
        return _Dual(self.val * other, self.tan * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, _Dual):
            inv = 1.0 / other.val
            val = self.val * inv
            return _Dual(val, (self.tan - other.tan * val[:, None]) * inv[:, None])
        return _Dual(self.val / other, self.tan / other)

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        val = other * inv
        return _Dual(val, -self.tan * (val * inv)[:, None])

    def __neg__(self):
        return _Dual(-self.val, -self.tan)


def _seed_duals(Z):
    """One dual per latent coordinate, tangents seeded with the identity."""
    B, d = Z.shape
    eye = np.eye(d)
    return [_Dual(Z[:, k], np.broadcast_to(eye[k], (B, d)).copy()) for k in range(d)]


def _collect_duals(outputs):
    """Stack a list of n output duals into values (B, n) and tangents (B, n, d)."""
    vals = np.stack([o.val for o in outputs], axis=1)
    tans = np.stack([o.tan for o in outputs], axis=1)
    return vals, tans


# ---------------------------------------------------------------------------
# decoder kinds
# ---------------------------------------------------------------------------


class Decoder:
    """Base class. Subclasses implement `_decode` and `_value_and_jacobian`
    on (B, d) batches; the public functions below handle single points."""

    kind: str
    latent_dim: int
    ambient_dim: int

    def _decode(self, Z):
        raise NotImplementedError

    def _value_and_jacobian(self, Z):
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class LinearDecoder(Decoder):
    """f(z) = A z for a fixed n x d matrix A."""

    matrix: np.ndarray
    kind = "analytic-linear"

    def __post_init__(self):
        A = np.asarray(self.matrix, dtype=float)
        if A.ndim != 2:
            raise DecoderError("linear decoder needs a 2-D matrix")
        if not np.isfinite(A).all():
            raise DecoderError("non-finite entries in decoder matrix")
        object.__setattr__(self, "matrix", A)

    @property
    def latent_dim(self):
        return self.matrix.shape[1]

    @property
    def ambient_dim(self):
        return self.matrix.shape[0]

    def _decode(self, Z):
        return Z @ self.matrix.T

    def _value_and_jacobian(self, Z):
        J = np.broadcast_to(self.matrix, (Z.shape[0],) + self.matrix.shape)
        return Z @ self.matrix.T, J.copy()


@dataclass(frozen=True, eq=False)
class SphereDecoder(Decoder):
    """Inverse stereographic embedding of the plane onto a radius-R sphere,
    f(z) = R (2 z1, 2 z2, 1 - |z|^2) / (1 + |z|^2).

    The pullback metric is conformal, 4 R^2 / (1 + |z|^2)^2 * I, so every
    geometric quantity has a closed form; this decoder doubles as the test
    oracle geometry.
    """

    radius: float = 1.0
    kind = "analytic-sphere"
    latent_dim = 2
    ambient_dim = 3

    def __post_init__(self):
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise DecoderError("sphere radius must be positive and finite")

    def _decode(self, Z):
        s = (Z**2).sum(axis=1)
        w = self.radius / (1.0 + s)
        return np.stack([2.0 * Z[:, 0] * w, 2.0 * Z[:, 1] * w, (1.0 - s) * w], axis=1)

    def _value_and_jacobian(self, Z):
        z1, z2 = _seed_duals(Z)
        s = z1 * z1 + z2 * z2
        w = self.radius / (s + 1.0)
        return _collect_duals([z1 * 2.0 * w, z2 * 2.0 * w, (1.0 - s) * w])


@dataclass(frozen=True, eq=False)
class ParaboloidDecoder(Decoder):
    """f(z) = (z, |z|^2): the d-dimensional paraboloid in R^(d+1)."""

    dim: int = 2
    kind = "analytic-paraboloid"

    def __post_init__(self):
        if self.dim < 1:
            raise DecoderError("paraboloid dimension must be >= 1")

    @property
    def latent_dim(self):
        return self.dim

    @property
    def ambient_dim(self):
        return self.dim + 1

    def _decode(self, Z):
        return np.concatenate([Z, (Z**2).sum(axis=1, keepdims=True)], axis=1)

    def _value_and_jacobian(self, Z):
        coords = _seed_duals(Z)
        s = coords[0] * coords[0]
        for c in coords[1:]:
            s = s + c * c
        return _collect_duals(coords + [s])


def _softplus(x):
    return np.logaddexp(0.0, x)


# (value, derivative-at-preactivation) pairs
_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - np.tanh(a) ** 2),
    "softplus": (_softplus, expit),
    "sigmoid": (expit, lambda a: expit(a) * (1.0 - expit(a))),
    "identity": (lambda a: a, lambda a: np.ones_like(a)),
}


@dataclass(frozen=True, eq=False)
class MLPDecoder(Decoder):
    """Dense feed-forward decoder; layer i computes act_i(W_i x + b_i)."""

    weights: tuple
    biases: tuple
    activations: tuple
    kind = "mlp"

    def __post_init__(self):
        Ws = tuple(np.asarray(W, dtype=float) for W in self.weights)
        bs = tuple(np.asarray(b, dtype=float) for b in self.biases)
        acts = tuple(self.activations)
        if not (len(Ws) == len(bs) == len(acts)) or not Ws:
            raise DecoderError("mismatched layer lists")
        for i, (W, b, a) in enumerate(zip(Ws, bs, acts)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise DecoderError(f"layer {i}: weight/bias shapes do not conform")
            if a not in _ACTIVATIONS:
                raise DecoderError(f"layer {i}: unknown activation {a!r}")
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise DecoderError(f"layer {i}: non-finite weights")
            if i > 0 and W.shape[1] != Ws[i - 1].shape[0]:
                raise DecoderError(f"layer {i}: input dim {W.shape[1]} != previous output")
        object.__setattr__(self, "weights", Ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "activations", acts)

    @property
    def latent_dim(self):
        return self.weights[0].shape[1]

    @property
    def ambient_dim(self):
        return self.weights[-1].shape[0]

    def _decode(self, Z):
        V = Z
        for W, b, a in zip(self.weights, self.biases, self.activations):
            V = _ACTIVATIONS[a][0](V @ W.T + b)
        return V

    def _value_and_jacobian(self, Z):
        B, d = Z.shape
        V = Z
        T = np.broadcast_to(np.eye(d), (B, d, d)).copy()
        for W, b, a in zip(self.weights, self.biases, self.activations):
            A = V @ W.T + b
            T = np.einsum("oi,bid->bod", W, T)
            f, df = _ACTIVATIONS[a]
            V = f(A)
            T = df(A)[:, :, None] * T
        return V, T


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def _as_batch(decoder, z):
    Z = np.asarray(z, dtype=float)
    single = Z.ndim == 1
    if single:
        Z = Z[None]
    if Z.ndim != 2 or Z.shape[1] != decoder.latent_dim:
        raise DecoderError(
            f"latent input has shape {np.shape(z)}, expected dimension {decoder.latent_dim}"
        )
    if not np.isfinite(Z).all():
        raise DecoderError("non-finite latent coordinates")
    return Z, single


def decode(decoder, z):
    """Evaluate f(z). Accepts a single point (d,) or a batch (B, d)."""
    Z, single = _as_batch(decoder, z)
    X = decoder._decode(Z)
    if not np.isfinite(X).all():
        raise DecoderError(f"{decoder.kind} decoder produced non-finite output (bad weights?)")
    return X[0] if single else X


def value_and_jacobian(decoder, z):
    """f(z) together with the exact Jacobian, shape (n, d) or (B, n, d)."""
    Z, single = _as_batch(decoder, z)
    X, J = decoder._value_and_jacobian(Z)
    if not (np.isfinite(X).all() and np.isfinite(J).all()):
        raise DecoderError(f"{decoder.kind} decoder produced non-finite output (bad weights?)")
    return (X[0], J[0]) if single else (X, J)


def jacobian(decoder, z):
    """Exact Jacobian Jf(z) by forward-mode differentiation."""
    return value_and_jacobian(decoder, z)[1]


def stereographic_latent(y, radius=1.0):
    """Latent coordinates of an ambient point via forward stereographic
    projection of y (radially normalized onto the sphere first)."""
    y = np.asarray(y, dtype=float)
    norm = np.linalg.norm(y)
    if norm == 0.0:
        return np.zeros(2)
    p = radius * y / norm
    denom = radius + p[2]
    if abs(denom) < 1e-12 * radius:
        raise DecoderError("ambient point maps to the projection pole")
    return p[:2] / denom


def _default_init(decoder, y):
    if isinstance(decoder, SphereDecoder):
        return stereographic_latent(y, decoder.radius)
    if isinstance(decoder, LinearDecoder):
        return np.linalg.lstsq(decoder.matrix, y, rcond=None)[0]
    if isinstance(decoder, ParaboloidDecoder):
        return y[: decoder.dim].copy()
    return np.zeros(decoder.latent_dim)


@dataclass(frozen=True)
class ProjectionResult:
    """Outcome of projecting an ambient point to latent coordinates."""

    z: np.ndarray
    residual: float
    grad_norm: float
    iterations: int
    converged: bool


def project_to_latent(
    decoder,
    y,
    z0=None,
    grad_tol=1e-10,
    max_iter=10_000,
    armijo_c=1e-4,
    shrink=0.5,
):
    """Local minimizer of |f(z) - y|^2 by gradient descent with backtracking.

    The gradient is 2 Jf(z)^T (f(z) - y); iteration stops when its norm drops
    below ``grad_tol`` or after ``max_iter`` steps (non-convergence is
    reported through the result and a warning, never silently).
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (decoder.ambient_dim,):
        raise DecoderError(f"ambient input has shape {y.shape}, expected ({decoder.ambient_dim},)")
    if not np.isfinite(y).all():
        raise DecoderError("non-finite ambient coordinates")
    z = np.asarray(z0, dtype=float).copy() if z0 is not None else _default_init(decoder, y)

    fx, J = value_and_jacobian(decoder, z)
    r = fx - y
    F = float(r @ r)
    grad = 2.0 * J.T @ r
    step = 1.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gn2 = float(grad @ grad)
        if gn2 <= grad_tol**2:
            converged = True
            it -= 1
            break
        # Armijo backtracking along the steepest-descent direction
        accepted = False
        while step > 1e-20:
            z_try = z - step * grad
            r_try = decode(decoder, z_try) - y
            F_try = float(r_try @ r_try)
            if F_try <= F - armijo_c * step * gn2:
                accepted = True
                break
            step *= shrink
        if not accepted:
            break  # step underflow: cannot make progress in float64
        z = z_try
        fx, J = value_and_jacobian(decoder, z)
        r = fx - y
        F = float(r @ r)
        grad = 2.0 * J.T @ r
        step = min(step * 2.0, 1e12)

    grad_norm = float(np.linalg.norm(grad))
    converged = converged or grad_norm <= grad_tol
    result = ProjectionResult(
        z=z,
        residual=float(np.linalg.norm(decode(decoder, z) - y)),
        grad_norm=grad_norm,
        iterations=it,
        converged=converged,
    )
    if not converged:
        warnings.warn(
            f"projection did not converge: |grad|={result.grad_norm:.3e}, "
            f"residual={result.residual:.6e} after {it} iterations",
            stacklevel=2,
        )
    return result


# ---------------------------------------------------------------------------
# weights file format
# ---------------------------------------------------------------------------
#
# {"layers": [{"rows": r, "cols": c, "weights": [r*c row-major floats],
#              "bias": [r floats], "activation": "tanh"}, ...]}
#
# rows = layer output dimension, cols = input dimension.  The same layer
# schema is reused by the metric-approximator model file (with an extra
# header) and by the external VAE trainer.


def layers_to_json(weights, biases, activations):
    layers = []
    for W, b, a in zip(weights, biases, activations):
        layers.append(
            {
                "rows": int(W.shape[0]),
                "cols": int(W.shape[1]),
                "weights": [float(x) for x in np.asarray(W).ravel()],
                "bias": [float(x) for x in np.asarray(b)],
                "activation": str(a),
            }
        )
    return layers


def layers_from_json(layers):
    weights, biases, activations = [], [], []
    for i, layer in enumerate(layers):
        try:
            rows, cols = int(layer["rows"]), int(layer["cols"])
            W = np.asarray(layer["weights"], dtype=float).reshape(rows, cols)
            b = np.asarray(layer["bias"], dtype=float)
            a = str(layer["activation"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DecoderError(f"malformed layer {i} in weights file: {exc}") from exc
        weights.append(W)
        biases.append(b)
        activations.append(a)
    return tuple(weights), tuple(biases), tuple(activations)


def save_decoder(path, decoder):
    if not isinstance(decoder, MLPDecoder):
        raise DecoderError("only mlp decoders are serialized to weights files")
    doc = {"layers": layers_to_json(decoder.weights, decoder.biases, decoder.activations)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_decoder(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "layers" not in doc:
        raise DecoderError(f"{path}: not a weights file (missing 'layers')")
    weights, biases, activations = layers_from_json(doc["layers"])
    return MLPDecoder(weights=weights, biases=biases, activations=activations)


def decoder_from_config(cfg):
    """Build a decoder from a config mapping, e.g. {"kind": "analytic-sphere",
    "radius": 1.0} or {"kind": "mlp", "path": "decoder.json"}."""
    if isinstance(cfg, str):
        return load_decoder(cfg)
    kind = cfg.get("kind")
    if kind == "analytic-sphere":
        return SphereDecoder(radius=float(cfg.get("radius", 1.0)))
    if kind == "analytic-linear":
        return LinearDecoder(matrix=np.asarray(cfg["matrix"], dtype=float))
    if kind == "analytic-paraboloid":
        return ParaboloidDecoder(dim=int(cfg.get("dim", 2)))
    if kind == "mlp":
        if "path" in cfg:
            return load_decoder(cfg["path"])
        weights, biases, activations = layers_from_json(cfg["layers"])
        return MLPDecoder(weights=weights, biases=biases, activations=activations)
    raise DecoderError(f"unknown decoder kind {kind!r}")
