"""Pullback Riemannian geometry on the latent space.

Everything is parametric over a MetricProvider, so the exact decoder-derived
metric and a learned approximation are interchangeable.  Metric derivatives
use central finite differences (the learned provider has no analytic
derivative); geodesics and transport use fixed-step RK4; the Log map is
solved by Levenberg-damped Gauss-Newton shooting.

All providers are immutable after construction and every operation is a pure
function, safe for unrestricted concurrent evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoders import value_and_jacobian

__all__ = [
    "MetricError",
    "GeodesicError",
    "LogMapError",
    "MetricProvider",
    "PullbackMetric",
    "LearnedMetric",
    "TangentVector",
    "GeodesicPath",
    "CurvatureResult",
    "christoffel",
    "christoffel_batch",
    "curvature",
    "curvature_batch",
    "exp_map",
    "exp_map_batch",
    "log_map",
    "log_map_batch",
    "distance",
    "parallel_transport",
]


class MetricError(RuntimeError):
    """Metric evaluation failed (not positive-definite or ill-conditioned)."""


class GeodesicError(RuntimeError):
    """Geodesic integration produced a non-finite state."""


class LogMapError(RuntimeError):
    """Shooting did not converge; carries the best velocities found."""

    def __init__(self, message, velocities=None, residuals=None, indices=None):
        super().__init__(message)
        self.velocities = velocities
        self.residuals = residuals
        self.indices = indices


@dataclass(frozen=True)
class TangentVector:
    base: np.ndarray
    vec: np.ndarray


@dataclass(frozen=True)
class GeodesicPath:
    """Discretized geodesic: node times in [0, 1], positions and velocities."""

    times: np.ndarray
    points: np.ndarray
    velocities: np.ndarray

    @property
    def endpoint(self):
        return self.points[-1]


# ---------------------------------------------------------------------------
# metric providers
# ---------------------------------------------------------------------------


class MetricProvider:
    """Supplies g, g^-1 and (by finite differences downstream) their
    derivatives at any latent point.  Batch methods take (B, d) arrays."""

    dim: int
    fd_step: float

    def metric_batch(self, Z):
        raise NotImplementedError

    def cometric_batch(self, Z):
        raise NotImplementedError

    def metric_and_cometric_batch(self, Z):
        return self.metric_batch(Z), self.cometric_batch(Z)

    def metric(self, z):
        return self.metric_batch(np.asarray(z, dtype=float)[None])[0]

    def cometric(self, z):
        return self.cometric_batch(np.asarray(z, dtype=float)[None])[0]


def _validate_spd(G, Z, cond_limit, eig_floor, what="metric"):
    """Hard guard: symmetric positive-definite and decently conditioned.
    Near-singular metrics silently corrupt Christoffels and bridge weights,
    so this fails loudly with the offending point and eigenvalue."""
    if not np.isfinite(G).all():
        raise MetricError(f"non-finite {what} encountered")
    sym_err = np.abs(G - np.swapaxes(G, -1, -2)).max()
    if sym_err > 1e-12:
        raise MetricError(f"{what} asymmetric by {sym_err:.3e}")
    eig = np.linalg.eigvalsh(G)
    lo, hi = eig[..., 0], eig[..., -1]
    bad = (lo <= eig_floor) | (hi > cond_limit * np.maximum(lo, np.finfo(float).tiny))
    if bad.any():
        b = int(np.argmax(bad))
        raise MetricError(
            f"{what} not usable at z={np.asarray(Z)[b]}: smallest eigenvalue "
            f"{lo[b]:.6e}, largest {hi[b]:.6e} (rank deficiency or bad approximator)"
        )


def _chol_inverse(G):
    # symmetric factorization G = L L^T, inverse as L^-T L^-1 (exactly symmetric)
    L = np.linalg.cholesky(G)
    Li = np.linalg.inv(L)
    return np.einsum("bki,bkj->bij", Li, Li)


class PullbackMetric(MetricProvider):
    """Exact pullback metric g = Jf^T Jf of a decoder."""

    def __init__(self, decoder, fd_step=1e-4, cond_limit=1e8, eig_floor=1e-12):
        self.decoder = decoder
        self.dim = decoder.latent_dim
        self.fd_step = float(fd_step)
        self.cond_limit = float(cond_limit)
        self.eig_floor = float(eig_floor)

    def metric_batch(self, Z):
        Z = np.asarray(Z, dtype=float)
        _, J = value_and_jacobian(self.decoder, Z)
        G = np.einsum("bni,bnj->bij", J, J)
        _validate_spd(G, Z, self.cond_limit, self.eig_floor)
        return G

    def cometric_batch(self, Z):
        return _chol_inverse(self.metric_batch(Z))

    def metric_and_cometric_batch(self, Z):
        G = self.metric_batch(Z)
        return G, _chol_inverse(G)


class LearnedMetric(MetricProvider):
    """Metric provider backed by a trained approximator network.

    The network predicts g and g^-1 directly; the cometric is the network
    output, not a numerical inverse of the predicted metric.
    """

    def __init__(self, model, fd_step=1e-4, cond_limit=1e8, eig_floor=1e-12):
        self.model = model
        self.dim = model.dim
        self.fd_step = float(fd_step)
        self.cond_limit = float(cond_limit)
        self.eig_floor = float(eig_floor)

    def metric_batch(self, Z):
        Z = np.asarray(Z, dtype=float)
        G, _ = self.model.predict_batch(Z)
        _validate_spd(G, Z, self.cond_limit, self.eig_floor)
        return G

    def cometric_batch(self, Z):
        Z = np.asarray(Z, dtype=float)
        _, Ginv = self.model.predict_batch(Z)
        _validate_spd(Ginv, Z, self.cond_limit, self.eig_floor, what="cometric")
        return Ginv

    def metric_and_cometric_batch(self, Z):
        Z = np.asarray(Z, dtype=float)
        G, Ginv = self.model.predict_batch(Z)
        _validate_spd(G, Z, self.cond_limit, self.eig_floor)
        _validate_spd(Ginv, Z, self.cond_limit, self.eig_floor, what="cometric")
        return G, Ginv


# ---------------------------------------------------------------------------
# Christoffel symbols and curvature
# ---------------------------------------------------------------------------


def christoffel_batch(provider, Z):
    """Gamma^j_kl = 1/2 g^jm (d_k g_ml + d_l g_mk - d_m g_kl), with dg by
    central differences of the provider's metric.  Output (B, d, d, d)
    indexed [j, k, l]; symmetric in (k, l) by construction."""
    Z = np.asarray(Z, dtype=float)
    B, d = Z.shape
    h = provider.fd_step
    offsets = h * np.eye(d)
    stencil = np.concatenate(
        [(Z[:, None, :] + offsets).reshape(-1, d), (Z[:, None, :] - offsets).reshape(-1, d)]
    )
    gs = provider.metric_batch(stencil)
    gp = gs[: B * d].reshape(B, d, d, d)
    gm = gs[B * d :].reshape(B, d, d, d)
    dg = (gp - gm) / (2.0 * h)  # [b, k, i, j] = d_k g_ij
    ginv = provider.cometric_batch(Z)
    S = dg.transpose(0, 2, 1, 3) + dg.transpose(0, 2, 3, 1) - dg
    return 0.5 * np.einsum("bjm,bmkl->bjkl", ginv, S)


def christoffel(provider, z):
    return christoffel_batch(provider, np.asarray(z, dtype=float)[None])[0]


@dataclass(frozen=True)
class CurvatureResult:
    riemann: np.ndarray  # R^i_jkl
    ricci: np.ndarray
    scalar: float


def curvature_batch(provider, Z, step=1e-3):
    """Riemann tensor R^i_jkl from central differences of the Christoffel
    symbols; Ricci by contraction, scalar by cometric trace.

    ``step`` is the outer difference step on Gamma; it is wider than the
    metric step so the noise of the inner differences stays subdominant.
    """
    Z = np.asarray(Z, dtype=float)
    B, d = Z.shape
    offsets = step * np.eye(d)
    stencil = np.concatenate(
        [(Z[:, None, :] + offsets).reshape(-1, d), (Z[:, None, :] - offsets).reshape(-1, d)]
    )
    gam_s = christoffel_batch(provider, stencil)
    gp = gam_s[: B * d].reshape(B, d, d, d, d)
    gm = gam_s[B * d :].reshape(B, d, d, d, d)
    dgam = (gp - gm) / (2.0 * step)  # [b, k, a, b1, c] = d_k Gamma^a_b1c
    gam = christoffel_batch(provider, Z)

    # R^i_jkl = d_k G^i_lj - d_l G^i_kj + G^i_km G^m_lj - G^i_lm G^m_kj
    t1 = dgam.transpose(0, 2, 4, 1, 3)  # [b, i, j, k, l] = d_k Gamma^i_lj
    t2 = t1.transpose(0, 1, 2, 4, 3)
    q1 = np.einsum("bikm,bmlj->bijkl", gam, gam)
    q2 = np.einsum("bilm,bmkj->bijkl", gam, gam)
    riemann = t1 - t2 + q1 - q2
    ricci = np.einsum("bijil->bjl", riemann)
    ginv = provider.cometric_batch(Z)
    scalar = np.einsum("bjl,bjl->b", ginv, ricci)
    return riemann, ricci, scalar


def curvature(provider, z, step=1e-3):
    riemann, ricci, scalar = curvature_batch(provider, np.asarray(z, dtype=float)[None], step)
    return CurvatureResult(riemann=riemann[0], ricci=ricci[0], scalar=float(scalar[0]))


# ---------------------------------------------------------------------------
# geodesics
# ---------------------------------------------------------------------------


def _geodesic_acceleration(provider, Z, V):
    gam = christoffel_batch(provider, Z)
    return -np.einsum("bjkl,bk,bl->bj", gam, V, V)


def exp_map_batch(provider, Z0, V0, steps=100):
    """Integrate the geodesic system z'' = -Gamma(z)[z', z'] over t in [0, 1]
    for a batch of initial conditions with fixed-step RK4.

    Returns (times (S+1,), points (B, S+1, d), velocities (B, S+1, d)).
    """
    Z0 = np.atleast_2d(np.asarray(Z0, dtype=float))
    V0 = np.atleast_2d(np.asarray(V0, dtype=float))
    if Z0.shape[0] == 1 and V0.shape[0] > 1:
        Z0 = np.broadcast_to(Z0, V0.shape).copy()
    if steps < 2:
        raise ValueError("geodesic integration needs at least 2 steps")
    B, d = Z0.shape
    dt = 1.0 / steps
    times = np.linspace(0.0, 1.0, steps + 1)
    points = np.empty((B, steps + 1, d))
    vels = np.empty((B, steps + 1, d))
    Z, V = Z0.copy(), V0.copy()
    points[:, 0], vels[:, 0] = Z, V
    for k in range(steps):
        a1 = _geodesic_acceleration(provider, Z, V)
        z2, v2 = Z + 0.5 * dt * V, V + 0.5 * dt * a1
        a2 = _geodesic_acceleration(provider, z2, v2)
        z3, v3 = Z + 0.5 * dt * v2, V + 0.5 * dt * a2
        a3 = _geodesic_acceleration(provider, z3, v3)
        z4, v4 = Z + dt * v3, V + dt * a3
        a4 = _geodesic_acceleration(provider, z4, v4)
        Z = Z + dt / 6.0 * (V + 2.0 * v2 + 2.0 * v3 + v4)
        V = V + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        if not (np.isfinite(Z).all() and np.isfinite(V).all()):
            raise GeodesicError(f"non-finite geodesic state at step {k + 1}")
        points[:, k + 1], vels[:, k + 1] = Z, V
    return times, points, vels


def exp_map(provider, z, v, steps=100):
    """Exponential map: the geodesic from z with initial velocity v."""
    times, points, vels = exp_map_batch(provider, np.asarray(z, float)[None],
                                        np.asarray(v, float)[None], steps)
    return GeodesicPath(times=times, points=points[0], velocities=vels[0])


def log_map_batch(
    provider,
    z,
    targets,
    steps=100,
    tol=1e-8,
    max_iter=100,
    damping=1e-8,
    fd_step=1e-6,
):
    """Shooting solve for initial velocities: endpoint(exp(z, v)) = target.

    Levenberg-damped Gauss-Newton with a finite-difference Jacobian of the
    endpoint map; all endpoint integrations for one iteration run as a single
    batched exp_map call.  Raises LogMapError with the best velocities and
    residuals if some target does not converge.
    """
    z = np.asarray(z, dtype=float)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    B, d = targets.shape

    def endpoints(Vs):
        _, pts, _ = exp_map_batch(provider, np.broadcast_to(z, Vs.shape).copy(), Vs, steps)
        return pts[:, -1]

    V = targets - z
    r = endpoints(V) - targets
    rn = np.linalg.norm(r, axis=1)
    lam = np.full(B, damping)
    active = rn > tol
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        A = len(idx)
        # FD Jacobian of the endpoint map, all perturbations in one batch
        eye = fd_step * np.eye(d)
        pert = np.concatenate(
            [(V[idx, None, :] + eye).reshape(-1, d), (V[idx, None, :] - eye).reshape(-1, d)]
        )
        ends = endpoints(pert)
        Jp = ends[: A * d].reshape(A, d, d)  # [a, k (direction), out]
        Jm = ends[A * d :].reshape(A, d, d)
        J = (Jp - Jm).transpose(0, 2, 1) / (2.0 * fd_step)  # [a, out, in]
        JtJ = np.einsum("aoi,aoj->aij", J, J)
        JtJ += lam[idx, None, None] * np.eye(d)
        rhs = -np.einsum("aoi,ao->ai", J, r[idx])
        delta = np.linalg.solve(JtJ, rhs[..., None])[..., 0]
        Vc = V[idx] + delta
        rc = endpoints(Vc) - targets[idx]
        rcn = np.linalg.norm(rc, axis=1)
        better = rcn < rn[idx]
        acc = idx[better]
        V[acc] = Vc[better]
        r[acc] = rc[better]
        rn[acc] = rcn[better]
        lam[acc] = np.maximum(lam[acc] * 0.3, damping)
        lam[idx[~better]] = np.minimum(lam[idx[~better]] * 10.0, 1e8)
        active = rn > tol
    if active.any():
        raise LogMapError(
            f"log map failed for {int(active.sum())}/{B} targets "
            f"(worst endpoint error {rn[active].max():.3e})",
            velocities=V,
            residuals=rn,
            indices=np.flatnonzero(active),
        )
    return V


def log_map(provider, z1, z2, **kwargs):
    """Inverse of the exponential map: v with Exp_{z1}(v) = z2."""
    V = log_map_batch(provider, z1, np.asarray(z2, dtype=float)[None], **kwargs)
    return TangentVector(base=np.asarray(z1, dtype=float), vec=V[0])


def distance(provider, z1, z2, **kwargs):
    """Geodesic distance |Log_{z1}(z2)|_g (the g-norm, not its square)."""
    v = log_map(provider, z1, z2, **kwargs).vec
    g = provider.metric(z1)
    return float(np.sqrt(v @ g @ v))


# ---------------------------------------------------------------------------
# parallel transport
# ---------------------------------------------------------------------------


def _path_arrays(path):
    if isinstance(path, GeodesicPath):
        return path.times, path.points
    times, points = path
    return np.asarray(times, dtype=float), np.asarray(points, dtype=float)


def parallel_transport(provider, path, v0, substeps=1):
    """Transport v0 along a discretized path by integrating
    v' = -Gamma(z)[z', v] with RK4 on each segment (piecewise-linear z).

    Returns the transported vector at every path node, shape (nodes, d).
    The transport equation is linear in v, so the RK4 stage matrices depend
    only on the segment geometry and are evaluated in one batched call.
    """
    times, points = _path_arrays(path)
    v = np.asarray(v0, dtype=float).copy()
    n_nodes, d = points.shape
    out = np.empty((n_nodes, d))
    out[0] = v
    for i in range(n_nodes - 1):
        dt_seg = times[i + 1] - times[i]
        zdot = (points[i + 1] - points[i]) / dt_seg
        h = dt_seg / substeps
        for s in range(substeps):
            t0 = (s + 0.0) / substeps
            stages = points[i] + np.outer([t0, t0 + 0.5 / substeps, t0 + 1.0 / substeps],
                                          points[i + 1] - points[i])
            gam = christoffel_batch(provider, stages)
            M = -np.einsum("bjkl,k->bjl", gam, zdot)  # v' = M(t) v
            k1 = M[0] @ v
            k2 = M[1] @ (v + 0.5 * h * k1)
            k3 = M[1] @ (v + 0.5 * h * k2)
            k4 = M[2] @ (v + h * k3)
            v = v + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(v).all():
            raise GeodesicError(f"non-finite transported vector at node {i + 1}")
        out[i + 1] = v
    return out
