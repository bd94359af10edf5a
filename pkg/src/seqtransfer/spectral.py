"""Spectral estimation of the task models and the task-transition matrix.

Multi-view moment estimation, whitening, robust tensor power decomposition,
parameter recovery with simplex repair, column alignment, and the
h-dependent error-bound schedule.

Observations live in dimension d = S*A*(S+U), which can be large; every
covariance and pseudo-inverse is handled in an orthonormal basis of the
observation span (rank <= number of observations), which is exact because
all estimated moments live in that span.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .mdp import TabularMdp
from .ptum import EmpiricalModel

PINV_RCOND = 1e-10


class DegenerateMomentsError(RuntimeError):
    """Empirical moments lost the rank needed for recovery."""


class DecompositionFailureError(RuntimeError):
    """The tensor power method found no positive eigenvalue."""


@dataclass(frozen=True)
class ObservationLayout:
    """Fixed (s, a, u) then (s, a, s') row-major layout of an observation."""

    num_states: int
    num_actions: int
    num_rewards: int

    @property
    def dim(self) -> int:
        S, A, U = self.num_states, self.num_actions, self.num_rewards
        return S * A * (S + U)

    @property
    def reward_dim(self) -> int:
        return self.num_states * self.num_actions * self.num_rewards

    def vectorize(self, q: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Concatenate [vec(q); vec(p)]."""
        return np.concatenate([np.ravel(q), np.ravel(p)])

    def unpack(self, vec: np.ndarray):
        """Inverse of vectorize; returns (q, p)."""
        S, A, U = self.num_states, self.num_actions, self.num_rewards
        if vec.shape != (self.dim,):
            raise ValueError(f"observation must have dimension {self.dim}")
        q = vec[: self.reward_dim].reshape(S, A, U)
        p = vec[self.reward_dim:].reshape(S, A, S)
        return q, p

    def project_column(self, col: np.ndarray) -> np.ndarray:
        """Repair every (s, a)-block of a column onto the simplex."""
        q, p = self.unpack(col)
        q = np.apply_along_axis(project_simplex, 2, q)
        p = np.apply_along_axis(project_simplex, 2, p)
        return self.vectorize(q, p)


def vectorize_observation(emp: EmpiricalModel, layout: ObservationLayout) -> np.ndarray:
    """Flatten the empirical reward and transition distributions.

    Requires at least one sample in every (s, a).
    """
    if emp.min_count() < 1:
        raise ValueError("every state-action pair needs at least one sample")
    n = emp.counts[:, :, None]
    return layout.vectorize(emp.reward_counts / n, emp.next_counts / n)


def project_simplex(raw: np.ndarray) -> np.ndarray:
    """Clip negatives and renormalize; uniform if everything clips to zero."""
    raw = np.asarray(raw, dtype=float)
    if raw.size == 0:
        raise ValueError("empty vector")
    clipped = np.maximum(raw, 0.0)
    total = clipped.sum()
    if total <= 0.0:
        return np.full(raw.shape, 1.0 / raw.size)
    return clipped / total


def _truncated_pinv(mat: np.ndarray, rank: int | None = None) -> np.ndarray:
    """SVD pseudo-inverse with relative cutoff and optional rank cap."""
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    if s.size == 0 or s[0] <= 0:
        raise DegenerateMomentsError("zero covariance matrix")
    keep = s > PINV_RCOND * s[0]
    if rank is not None:
        keep &= np.arange(s.size) < rank
    if not np.any(keep):
        raise DegenerateMomentsError("covariance rank collapsed")
    return vt[keep].T @ np.diag(1.0 / s[keep]) @ u[:, keep].T


@dataclass
class MomentSet:
    """Second/third-moment estimates from m observation triples.

    All matrices are stored in the reduced orthonormal basis ``basis``
    (d x r); ``sigma_full(i, j)`` reconstitutes the full covariance when d
    is small enough to want it.
    """

    basis: np.ndarray            # (d, r)
    sigma: dict                  # (i, j) -> (r, r) covariance in reduced coords
    view1: np.ndarray            # (m, r) transformed first views
    view2: np.ndarray            # (m, r) transformed second views
    view3: np.ndarray            # (m, r) raw third views
    m2: np.ndarray               # (r, r) symmetrized second cross moment
    num_triples: int

    def sigma_full(self, i: int, j: int) -> np.ndarray:
        return self.basis @ self.sigma[(i, j)] @ self.basis.T

    def m2_full(self) -> np.ndarray:
        return self.basis @ self.m2 @ self.basis.T

    def whitened_third_moment(self, w_reduced: np.ndarray) -> np.ndarray:
        """Contract the implicit third moment with W on all modes, then
        symmetrize; returns a k x k x k tensor."""
        a = self.view1 @ w_reduced
        b = self.view2 @ w_reduced
        c = self.view3 @ w_reduced
        t = np.einsum("li,lj,lk->ijk", a, b, c) / self.num_triples
        return symmetrize_tensor(t)


def symmetrize_tensor(t: np.ndarray) -> np.ndarray:
    """Average over the six mode permutations of a cubic tensor."""
    return (
        t
        + t.transpose(0, 2, 1)
        + t.transpose(1, 0, 2)
        + t.transpose(1, 2, 0)
        + t.transpose(2, 0, 1)
        + t.transpose(2, 1, 0)
    ) / 6.0


def estimate_moments(observations, rank: int | None = None) -> MomentSet:
    """Cross-view covariances and cross moments from consecutive triples.

    ``rank`` caps the pseudo-inverse rank of the view-transformation
    covariances (low-rank pre-truncation); pass the number of hidden tasks
    for stability.
    """
    obs = np.asarray(observations, dtype=float)
    if obs.ndim != 2 or obs.shape[0] < 3:
        raise ValueError("need at least 3 observations")
    h, d = obs.shape
    m = h // 3
    trimmed = obs[: 3 * m]

    # Orthonormal basis of the observation span; everything downstream is
    # exact in these coordinates.
    q_basis, _ = np.linalg.qr(trimmed.T)
    coords = trimmed @ q_basis  # (3m, r)
    o1, o2, o3 = coords[0::3], coords[1::3], coords[2::3]

    sigma = {}
    for (i, oi), (j, oj) in [((1, o1), (2, o2)), ((2, o2), (1, o1)),
                             ((3, o3), (1, o1)), ((3, o3), (2, o2))]:
        sigma[(i, j)] = oi.T @ oj / m

    try:
        pinv_12 = _truncated_pinv(sigma[(1, 2)], rank)
        pinv_21 = _truncated_pinv(sigma[(2, 1)], rank)
    except DegenerateMomentsError:
        raise
    view1 = o1 @ pinv_12.T @ sigma[(3, 2)].T
    view2 = o2 @ pinv_21.T @ sigma[(3, 1)].T
    m2 = view1.T @ view2 / m
    m2 = (m2 + m2.T) / 2.0
    return MomentSet(
        basis=q_basis, sigma=sigma, view1=view1, view2=view2, view3=o3,
        m2=m2, num_triples=m,
    )


def whiten(m2: np.ndarray, k: int, rank_tol: float = 1e-12):
    """Whitening matrix from the top-k eigenpairs of a symmetric PSD matrix.

    Returns W with W^T m2 W = I_k.  Raises when fewer than k eigenvalues
    clear the rank tolerance (empirical rank deficiency).
    """
    sym = (m2 + m2.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    order = np.argsort(vals)[::-1][:k]
    top_vals = vals[order]
    if top_vals.size < k or np.any(top_vals <= rank_tol * max(vals.max(), 1.0)):
        raise DegenerateMomentsError(
            f"second moment has fewer than {k} usable eigenvalues"
        )
    return vecs[:, order] / np.sqrt(top_vals)


def _power_iterate(t3: np.ndarray, v: np.ndarray, iters: int) -> np.ndarray:
    for _ in range(iters):
        w = np.einsum("ijk,j,k->i", t3, v, v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v
        v = w / norm
    return v


def rtp_decompose(t3: np.ndarray, k: int, restarts: int = 100, iters: int = 100,
                  rng=None):
    """Robust tensor power method: restarted, deflated power iteration.

    Returns k (eigenvalue, eigenvector) pairs with positive eigenvalues,
    the sign absorbed into the eigenvector.
    """
    if restarts < 1 or iters < 1:
        raise ValueError("restarts and iterations must be at least 1")
    if rng is None:
        rng = np.random.default_rng()
    t3 = np.asarray(t3, dtype=float)
    dim = t3.shape[0]
    pairs = []
    work = t3.copy()
    for _ in range(k):
        best_val, best_vec = -math.inf, None
        for _ in range(restarts):
            v0 = rng.standard_normal(dim)
            v0 /= np.linalg.norm(v0)
            v = _power_iterate(work, v0, iters)
            lam = float(np.einsum("ijk,i,j,k->", work, v, v, v))
            if abs(lam) > best_val:
                best_val, best_vec = abs(lam), (v if lam >= 0 else -v)
        if best_vec is None or best_val <= 0.0:
            raise DecompositionFailureError("no positive eigenvalue found")
        v = _power_iterate(work, best_vec, iters)
        lam = float(np.einsum("ijk,i,j,k->", work, v, v, v))
        if lam < 0:
            lam, v = -lam, -v
        if lam <= 0.0:
            raise DecompositionFailureError("deflation exhausted the spectrum")
        pairs.append((lam, v))
        work = work - lam * np.einsum("i,j,k->ijk", v, v, v)
    return pairs


@dataclass
class HmmEstimate:
    """Estimated observation matrix, task-transition matrix and byproducts."""

    observation: np.ndarray      # (d, k), columns are flattened models
    transition: np.ndarray       # (k, k), column-stochastic after projection
    third_view: np.ndarray       # (d, k) conditional third-view means
    eigenvalues: np.ndarray      # (k,)
    eigenvectors: np.ndarray     # (k, k) whitened-space eigenvectors
    layout: ObservationLayout
    permutation: np.ndarray | None = None

    @property
    def num_tasks(self) -> int:
        return self.observation.shape[1]

    @property
    def raw_weights(self) -> np.ndarray:
        """Unnormalized component weights omega_j = lambda_j^-2."""
        return self.eigenvalues ** -2.0

    @property
    def stationary_weights(self) -> np.ndarray:
        """raw_weights normalized to a distribution."""
        w = self.raw_weights
        return w / w.sum()

    def to_json_dict(self) -> dict:
        return {
            "O": self.observation.T.tolist(),  # column-major: one list per column
            "T": self.transition.tolist(),
            "lambda": self.eigenvalues.tolist(),
            "omega": self.stationary_weights.tolist(),
            "permutation": None if self.permutation is None else self.permutation.tolist(),
        }


def recover_parameters(moments: MomentSet, eigpairs, w_reduced: np.ndarray,
                       layout: ObservationLayout) -> HmmEstimate:
    """Back out the observation and transition matrices from RTP eigenpairs.

    ``w_reduced`` must be the whitening matrix in the moment set's reduced
    coordinates.  Columns are repaired onto the simplex blockwise.
    """
    lams = np.array([lam for lam, _ in eigpairs])
    vecs = np.stack([v for _, v in eigpairs], axis=1)  # (k, k)
    k = lams.shape[0]
    wt_pinv = _truncated_pinv(w_reduced.T)             # (r, k) pseudo-inverse of W^T
    mu3_reduced = wt_pinv @ (vecs * lams[None, :])     # (r, k)
    pinv_31 = _truncated_pinv(moments.sigma[(3, 1)], k)
    obs_reduced = moments.sigma[(2, 1)] @ pinv_31 @ mu3_reduced
    obs_full = moments.basis @ obs_reduced             # (d, k)
    trans = _truncated_pinv(obs_reduced, k) @ mu3_reduced

    obs_proj = np.stack(
        [layout.project_column(obs_full[:, j]) for j in range(k)], axis=1
    )
    trans_proj = np.stack([project_simplex(trans[:, j]) for j in range(k)], axis=1)
    return HmmEstimate(
        observation=obs_proj,
        transition=trans_proj,
        third_view=moments.basis @ mu3_reduced,
        eigenvalues=lams,
        eigenvectors=vecs,
        layout=layout,
    )


def align_columns(new: HmmEstimate, reference) -> np.ndarray:
    """Permutation perm with new column perm[j] matching reference column j.

    ``reference`` is an HmmEstimate or a plain (d, k) matrix.  Solved as an
    exact assignment over the column-distance cost matrix.
    """
    ref = reference.observation if isinstance(reference, HmmEstimate) else np.asarray(reference)
    if ref.shape != new.observation.shape:
        raise ValueError("dimension mismatch between estimate and reference")
    k = ref.shape[1]
    cost = np.empty((k, k))
    for j in range(k):
        cost[j] = np.linalg.norm(new.observation - ref[:, j:j + 1], axis=0)
    _, perm = linear_sum_assignment(cost)
    return perm


def apply_permutation(est: HmmEstimate, perm: np.ndarray) -> HmmEstimate:
    """Relabel the estimate so column j becomes old column perm[j]."""
    perm = np.asarray(perm, dtype=int)
    return HmmEstimate(
        observation=est.observation[:, perm],
        transition=est.transition[np.ix_(perm, perm)],
        third_view=est.third_view[:, perm],
        eigenvalues=est.eigenvalues[perm],
        eigenvectors=est.eigenvectors[:, perm],
        layout=est.layout,
        permutation=perm,
    )


def spectral_estimate(observations, k: int, layout: ObservationLayout,
                      restarts: int = 100, iters: int = 100, rng=None,
                      reference=None) -> HmmEstimate:
    """Full pipeline: moments, whitening, RTP, recovery, optional alignment."""
    moments = estimate_moments(observations, rank=k)
    w = whiten(moments.m2, k)
    t3 = moments.whitened_third_moment(w)
    pairs = rtp_decompose(t3, k, restarts=restarts, iters=iters, rng=rng)
    est = recover_parameters(moments, pairs, w, layout)
    if reference is not None:
        est = apply_permutation(est, align_columns(est, reference))
    return est


def unpack_models(est: HmmEstimate, reward_support, gamma: float):
    """One TabularMdp per column of the estimated observation matrix."""
    support = np.asarray(reward_support, dtype=float)
    if support.shape[0] != est.layout.num_rewards:
        raise ValueError("support length does not match the layout")
    models = []
    for j in range(est.num_tasks):
        q, p = est.layout.unpack(est.observation[:, j])
        models.append(TabularMdp(p=p, reward_support=support, q=q, gamma=gamma))
    return models


def model_error_bound(h: int, rho, delta_prime: float, S: int, A: int, U: int):
    """The four h-dependent error bounds and the burn-in check.

    ``rho`` is either a scalar applied to all four channels or a 4-tuple
    (reward, transition, reward-std, transition-std); returns a dict with
    the bounds, their max, and whether the burn-in condition holds.
    """
    if h < 1:
        raise ValueError("h must be at least 1")
    if not 0.0 < delta_prime < 1.0:
        raise ValueError("delta_prime must be in (0, 1)")
    if np.ndim(rho) == 0:
        rhos = (float(rho),) * 4
    else:
        rhos = tuple(float(x) for x in rho)
        if len(rhos) != 4:
            raise ValueError("rho must be scalar or length 4")
    if any(r < 0 for r in rhos):
        raise ValueError("rho constants must be non-negative")
    d = S * A * (S + U)
    c = math.pi ** 2 * h * h * S * A * (S + U) / delta_prime
    rate = math.sqrt(math.log(c) / h)
    bounds = tuple(r * rate for r in rhos)
    burn_in_ok = h > rhos[0] * math.log(2.0 * h * h * S * A * (S + U) / delta_prime)
    return {
        "reward": bounds[0],
        "transition": bounds[1],
        "reward_std": bounds[2],
        "transition_std": bounds[3],
        "max": max(bounds),
        "burn_in_ok": burn_in_ok,
        "dim": d,
    }
