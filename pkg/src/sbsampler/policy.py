"""Quadratic twisting policies: evaluation, composition, fitting, warm starts.

A policy is the positive function psi with -log psi(x) = x'Ax + x'b + c.
The quadratic coefficient A is either a full symmetric matrix or, in
diagonal mode, a length-d vector holding diag(A).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import SingularDesign
from .linalg import symmetrize


@dataclass(frozen=True)
class QuadraticPolicy:
    a: np.ndarray  # (d, d) symmetric, or (d,) in diagonal mode
    b: np.ndarray  # (d,)
    c: float
    diagonal: bool = False

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if self.diagonal:
            a = np.atleast_1d(a)
        else:
            a = symmetrize(np.atleast_2d(a))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", float(self.c))

    @property
    def dim(self):
        return self.b.shape[0]

    def a_matrix(self):
        return np.diag(self.a) if self.diagonal else self.a

    def log_value(self, x):
        """log psi(x), vectorized over the leading axis."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        if self.diagonal:
            quad = pts**2 @ self.a
        else:
            quad = ((pts @ self.a) * pts).sum(axis=1)
        out = -(quad + pts @ self.b + self.c)
        return float(out[0]) if single else out

    def grad_log(self, x):
        """grad log psi(x) = -(2 A x + b)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        if self.diagonal:
            out = -(2.0 * pts * self.a + self.b)
        else:
            out = -(2.0 * pts @ self.a + self.b)
        return out[0] if single else out

    def hess_log(self):
        """Constant Hessian of log psi: -2A."""
        return -2.0 * self.a_matrix()

    def is_identity(self, tol=0.0):
        return (
            np.all(np.abs(self.a) <= tol)
            and np.all(np.abs(self.b) <= tol)
            and abs(self.c) <= tol
        )

    def to_full(self):
        if not self.diagonal:
            return self
        return QuadraticPolicy(np.diag(self.a), self.b, self.c, diagonal=False)

    def __mul__(self, other):
        return multiply(self, other)

    def __neg__(self):
        return QuadraticPolicy(-self.a, -self.b, -self.c, diagonal=self.diagonal)

    def params(self):
        """Flat parameter vector (A entries, b, c) used for convergence monitoring."""
        if self.diagonal:
            a_part = self.a
        else:
            a_part = self.a[_triu_idx(self.dim, 0)]
        return np.concatenate([a_part, self.b, [self.c]])

    @staticmethod
    def from_params(theta, dim, diagonal):
        theta = np.asarray(theta, dtype=float)
        if diagonal:
            a = theta[:dim]
            b = theta[dim : 2 * dim]
            c = theta[2 * dim]
        else:
            k = dim * (dim + 1) // 2
            a = np.zeros((dim, dim))
            iu = _triu_idx(dim, 0)
            a[iu] = theta[:k]
            a = a + np.triu(a, 1).T
            b = theta[k : k + dim]
            c = theta[k + dim]
        return QuadraticPolicy(a, b, c, diagonal=diagonal)


def identity_policy(dim, diagonal=False):
    a = np.zeros(dim) if diagonal else np.zeros((dim, dim))
    return QuadraticPolicy(a, np.zeros(dim), 0.0, diagonal=diagonal)


def multiply(p1: QuadraticPolicy, p2: QuadraticPolicy):
    """Pointwise product of policies: coefficients add exactly in log-scale."""
    if p1.dim != p2.dim:
        raise ValueError("policy dimension mismatch")
    if p1.diagonal != p2.diagonal:
        p1, p2 = p1.to_full(), p2.to_full()
    return QuadraticPolicy(p1.a + p2.a, p1.b + p2.b, p1.c + p2.c, diagonal=p1.diagonal)


def warm_start(psi_t: QuadraticPolicy, psi_tm1: QuadraticPolicy):
    """Coefficient-wise linear extrapolation 2 psi_t - psi_tm1 (in log-space)."""
    if psi_t.diagonal != psi_tm1.diagonal or psi_t.dim != psi_tm1.dim:
        raise ValueError("warm start requires matching mode and dimension")
    return QuadraticPolicy(
        2.0 * psi_t.a - psi_tm1.a,
        2.0 * psi_t.b - psi_tm1.b,
        2.0 * psi_t.c - psi_tm1.c,
        diagonal=psi_t.diagonal,
    )


def n_parameters(dim, diagonal):
    return 2 * dim + 1 if diagonal else dim * (dim + 1) // 2 + dim + 1


@lru_cache(maxsize=None)
def _triu_idx(d, k):
    iu, ju = np.triu_indices(d, k=k)
    return iu, ju


def quadratic_features(x, diagonal):
    """Design matrix for -log psi regression: quadratic, linear and constant columns.

    Full mode columns: x_i^2, then x_i x_j (i<j, doubled to absorb symmetry),
    then x_i, then 1. Diagonal mode drops the cross terms.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    n_cross = 0 if diagonal else d * (d - 1) // 2
    out = np.empty((n, 2 * d + n_cross + 1))
    np.square(x, out=out[:, :d])
    if n_cross:
        iu, ju = _triu_idx(d, 1)
        np.multiply(x[:, iu], x[:, ju], out=out[:, d : d + n_cross])
        out[:, d : d + n_cross] *= 2.0
    out[:, d + n_cross : 2 * d + n_cross] = x
    out[:, -1] = 1.0
    return out


def _coeffs_from_solution(beta, dim, diagonal):
    # Regression fits y ~ F @ beta with y = -log psi, so beta holds (A, b, c)
    # directly in the feature layout of quadratic_features.
    if diagonal:
        a = beta[:dim]
        b = beta[dim : 2 * dim]
        c = beta[2 * dim]
    else:
        a = np.zeros((dim, dim))
        a[np.diag_indices(dim)] = beta[:dim]
        iu, ju = _triu_idx(dim, 1)
        off = beta[dim : dim + iu.size]
        a[iu, ju] = off
        a[ju, iu] = off
        b = beta[dim + iu.size : dim + iu.size + dim]
        c = beta[dim + iu.size + dim]
    return QuadraticPolicy(a, b, c, diagonal=diagonal)


def ridge_lstsq(design, targets, ridge):
    """Solve (F'F + ridge I) beta = F'y by Cholesky; SingularDesign on failure."""
    gram = design.T @ design
    if ridge > 0.0:
        gram = gram + ridge * np.eye(gram.shape[0])
    rhs = design.T @ targets
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise SingularDesign(f"normal equations singular (ridge={ridge:g})") from exc
    y = np.linalg.solve(chol, rhs)
    return np.linalg.solve(chol.T, y)


def fit_quadratic(xs, ys, diagonal=False, ridge=None):
    """Least-squares fit of -(x'Ax + x'b + c) to targets ys.

    Feature columns are centered and scaled internally (raw monomials are
    badly conditioned once particles drift from the origin); the ridge
    penalty applies in that standardized space and the coefficients are
    mapped back exactly. ``ridge=None`` selects the default 1e-8 * N.
    The standardized normal equations are assembled from one gram pass over
    the raw features.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.asarray(ys, dtype=float)
    n, d = xs.shape
    n_par = n_parameters(d, diagonal)
    if n < n_par:
        raise SingularDesign(f"{n} points cannot identify {n_par} parameters")
    if not np.all(np.isfinite(ys)):
        raise SingularDesign("non-finite regression targets")
    if ridge is None:
        ridge = 1e-8 * n

    features = quadratic_features(xs, diagonal)
    targets = -ys
    gram = features.T @ features
    rhs = features.T @ targets
    col_sum = gram[-1]  # intercept row of the gram = column sums
    center = col_sum / n
    center[-1] = 0.0  # keep the intercept column at 1
    var = np.diag(gram) / n - center**2
    scale = np.sqrt(np.maximum(var, 0.0))
    scale[scale == 0.0] = 1.0
    scale[-1] = 1.0

    gram_c = gram - np.outer(col_sum, center) - np.outer(center, col_sum) + n * np.outer(center, center)
    rhs_c = rhs - center * targets.sum()
    gram_std = gram_c / np.outer(scale, scale)
    rhs_std = rhs_c / scale

    gram_std.flat[:: gram_std.shape[0] + 1] += ridge
    try:
        beta_std = np.linalg.solve(gram_std, rhs_std)
    except np.linalg.LinAlgError as exc:
        raise SingularDesign(f"normal equations singular (ridge={ridge:g})") from exc
    beta = beta_std / scale
    beta[-1] -= np.sum(beta[:-1] * center[:-1])
    return _coeffs_from_solution(beta, d, diagonal)


class PolicySequence:
    """Per-time policies over an index range; the entry at t0 is the identity."""

    def __init__(self, t0, t1, dim, diagonal=False):
        self.t0 = int(t0)
        self.t1 = int(t1)
        self.dim = int(dim)
        self.diagonal = bool(diagonal)
        self._policies = {
            t: identity_policy(dim, diagonal) for t in range(self.t0, self.t1 + 1)
        }

    def __getitem__(self, t):
        return self._policies[t]

    def __setitem__(self, t, policy):
        if t == self.t0 and not policy.is_identity():
            raise ValueError("the policy at the left endpoint is fixed to the identity")
        self._policies[t] = policy

    def times(self):
        return range(self.t0, self.t1 + 1)

    def refine(self, increments):
        """Multiply per-time increments into the sequence (identity at t0)."""
        for t, phi in increments.items():
            if t == self.t0:
                continue
            self._policies[t] = multiply(self._policies[t], phi)

    def params(self):
        """Concatenated parameters for t in (t0:t1], for convergence monitoring."""
        return np.concatenate([self._policies[t].params() for t in range(self.t0 + 1, self.t1 + 1)])

    def set_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        per = n_parameters(self.dim, self.diagonal)
        for k, t in enumerate(range(self.t0 + 1, self.t1 + 1)):
            self._policies[t] = QuadraticPolicy.from_params(
                theta[k * per : (k + 1) * per], self.dim, self.diagonal
            )

    def monitor_params(self):
        """A and b coefficients only. The intercepts drift by a constant per
        iteration when the Radon-Nikodym targets are unnormalized, and they
        cancel in both twisted kernels and weights, so the stationarity
        monitor excludes them."""
        return np.concatenate(
            [self._policies[t].params()[:-1] for t in range(self.t0 + 1, self.t1 + 1)]
        )

    def set_monitor_params(self, theta):
        """Inverse of monitor_params; the current intercepts are kept."""
        theta = np.asarray(theta, dtype=float)
        per = n_parameters(self.dim, self.diagonal) - 1
        for k, t in enumerate(range(self.t0 + 1, self.t1 + 1)):
            block = np.append(theta[k * per : (k + 1) * per], self._policies[t].c)
            self._policies[t] = QuadraticPolicy.from_params(block, self.dim, self.diagonal)

    def copy(self):
        out = PolicySequence(self.t0, self.t1, self.dim, self.diagonal)
        out._policies = dict(self._policies)
        return out

    def to_dict(self):
        return {
            "t0": self.t0,
            "t1": self.t1,
            "dim": self.dim,
            "diagonal": self.diagonal,
            "policies": [
                {
                    "t": t,
                    "a": np.asarray(self._policies[t].a).tolist(),
                    "b": self._policies[t].b.tolist(),
                    "c": self._policies[t].c,
                }
                for t in self.times()
            ],
        }

    @staticmethod
    def from_dict(payload):
        seq = PolicySequence(payload["t0"], payload["t1"], payload["dim"], payload["diagonal"])
        for block in payload["policies"]:
            pol = QuadraticPolicy(
                np.asarray(block["a"], dtype=float),
                np.asarray(block["b"], dtype=float),
                block["c"],
                diagonal=payload["diagonal"],
            )
            if block["t"] != seq.t0:
                seq[block["t"]] = pol
        return seq

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @staticmethod
    def load(path):
        with open(path, encoding="utf-8") as fh:
            return PolicySequence.from_dict(json.load(fh))
