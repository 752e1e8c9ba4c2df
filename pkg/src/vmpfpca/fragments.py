"""The five fragment updates driving the FPCA variational scheme.

Three are standard building blocks (Gaussian prior, scalar inverse G-Wishart
prior, scalar iterated inverse G-Wishart); the other two carry the model:
the functional-principal-component Gaussian likelihood fragment and the
Gaussian penalization fragment.  The likelihood fragment is fully batched
across curves: the per-curve Gram matrices C_i'C_i and projections C_i'y_i
are cached once per fit and every per-iteration quantity is an einsum over
the curve axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expfam import (
    GaussianVecParams,
    GaussianVechParams,
    InvChiSqParams,
    duplication_matrix,
    gaussian_moments_to_vec,
    gaussian_moments_to_vech,
    invchisq_mean_reciprocal,
    invert_spd,
    vec,
)
from .graph import G_FULL, Message

# ---------------------------------------------------------------------------
# Prior fragments


def gaussian_prior_message(mean: np.ndarray, cov: np.ndarray, basis: str = "vec") -> Message:
    """Constant message emitted by a Gaussian prior factor.

    ``basis`` selects the sufficient-statistic basis of the receiving node:
    "vec" for (x, vec(xx')), "vech" for (x, vech(xx')).
    """
    if basis == "vec":
        return Message(gaussian_moments_to_vec(mean, cov))
    if basis == "vech":
        return Message(gaussian_moments_to_vech(mean, cov))
    raise ValueError(f"unknown basis {basis!r}")


def igw_prior_message(scale_hyper: float) -> Message:
    """Constant message of the scalar inverse G-Wishart prior with hyperparameter A.

    The auxiliary variable has an inverse chi-squared density with shape 1 and
    scale 1/A^2, so the natural parameters are (-3/2, -1/(2 A^2)).
    """
    if scale_hyper <= 0:
        raise ValueError("scale hyperparameter must be positive")
    return Message(InvChiSqParams(-1.5, -0.5 / scale_hyper**2), graph_tag=G_FULL)


def iterated_igw_messages(
    npbf_sigsq: InvChiSqParams,
    npbf_a: InvChiSqParams,
    edge_name: str = "iterated inverse G-Wishart",
) -> tuple[Message, Message]:
    """Scalar iterated inverse G-Wishart fragment for sigma^2 | a ~ Inv-chi^2(1, 1/a).

    Returns (message to sigma^2, message to a).  Each outgoing message uses the
    reciprocal mean computed from the combined natural parameters on the
    opposite edge.
    """
    try:
        e_recip_a = invchisq_mean_reciprocal(npbf_a)
        e_recip_sigsq = invchisq_mean_reciprocal(npbf_sigsq)
    except Exception as err:
        raise type(err)(f"{edge_name}: {err}") from err
    to_sigsq = Message(InvChiSqParams(-1.5, -0.5 * e_recip_a), graph_tag=G_FULL)
    to_a = Message(InvChiSqParams(-0.5, -0.5 * e_recip_sigsq), graph_tag=G_FULL)
    return to_sigsq, to_a


# ---------------------------------------------------------------------------
# Likelihood fragment


@dataclass(frozen=True)
class LikelihoodCache:
    """Iteration-invariant per-curve quantities derived from the design matrices."""

    gram: np.ndarray  # (n, P, P) with P = 2 + K; C_i' C_i
    proj: np.ndarray  # (n, P); C_i' y_i
    sq_norm: np.ndarray  # (n,); y_i' y_i
    counts: np.ndarray  # (n,); number of observations per curve

    @property
    def num_curves(self) -> int:
        return self.gram.shape[0]

    @property
    def num_coefs(self) -> int:
        return self.gram.shape[1]


def build_likelihood_cache(design_matrices, responses) -> LikelihoodCache:
    """Precompute C_i'C_i, C_i'y_i, y_i'y_i and T_i for every curve."""
    grams, projs, sq_norms, counts = [], [], [], []
    for design, y in zip(design_matrices, responses):
        y = np.asarray(y, dtype=float).reshape(-1)
        if design.shape[0] != y.size:
            raise ValueError("design matrix and response length disagree")
        grams.append(design.T @ design)
        projs.append(design.T @ y)
        sq_norms.append(float(y @ y))
        counts.append(y.size)
    return LikelihoodCache(
        gram=np.stack(grams),
        proj=np.stack(projs),
        sq_norm=np.asarray(sq_norms),
        counts=np.asarray(counts, dtype=float),
    )


@dataclass(frozen=True)
class LikelihoodExpectations:
    """Cached optimal-posterior expectations used by the likelihood messages."""

    zt_mean: np.ndarray  # (n, L+1); E(zeta-tilde_i) = (1, E(zeta_i)')'
    zt_cov: np.ndarray  # (n, L+1, L+1); blockdiag(0, Cov(zeta_i))
    zt_second: np.ndarray  # (n, L+1, L+1); E(zeta-tilde zeta-tilde')
    v_mean: np.ndarray  # (P, L+1); columns E(nu_mu), E(nu_psi_1), ...
    vpsi_mean: np.ndarray  # (P, L)
    h_cross: np.ndarray  # (n, L); E of V_psi' C_i'C_i nu_mu
    h_psi: np.ndarray  # (n, L, L); E of V_psi' C_i'C_i V_psi
    h_full: np.ndarray  # (n, L+1, L+1); same with the mean-function column included


def likelihood_expectations(
    cache: LikelihoodCache,
    nu_mean: np.ndarray,
    nu_cov: np.ndarray,
    zeta_means: np.ndarray,
    zeta_covs: np.ndarray,
) -> LikelihoodExpectations:
    """All moment summaries the likelihood messages need, batched over curves."""
    n, num_coefs = cache.num_curves, cache.num_coefs
    num_eigen = zeta_means.shape[1]
    blocks = num_eigen + 1
    if nu_mean.size != blocks * num_coefs:
        raise ValueError(
            f"nu has length {nu_mean.size}, expected {blocks}*{num_coefs}"
        )

    zt_mean = np.column_stack([np.ones(n), zeta_means])
    zt_cov = np.zeros((n, blocks, blocks))
    zt_cov[:, 1:, 1:] = zeta_covs
    zt_second = zt_cov + zt_mean[:, :, None] * zt_mean[:, None, :]

    v_mean = nu_mean.reshape(blocks, num_coefs).T
    vpsi_mean = v_mean[:, 1:]

    # E(H_i)[a, b] = tr{E(nu_b nu_a') C_i'C_i}; one einsum covers every curve
    # and block pair, with a = b = 0 giving the mean-function term.
    second_moment = nu_cov + np.outer(nu_mean, nu_mean)
    block_tensor = second_moment.reshape(blocks, num_coefs, blocks, num_coefs)
    h_full = np.einsum("bqap,ipq->iab", block_tensor, cache.gram)
    h_full = 0.5 * (h_full + h_full.transpose(0, 2, 1))

    return LikelihoodExpectations(
        zt_mean=zt_mean,
        zt_cov=zt_cov,
        zt_second=zt_second,
        v_mean=v_mean,
        vpsi_mean=vpsi_mean,
        h_cross=h_full[:, 1:, 0],
        h_psi=h_full[:, 1:, 1:],
        h_full=h_full,
    )


def likelihood_message_to_nu(
    cache: LikelihoodCache, expectations: LikelihoodExpectations, e_recip_eps: float
) -> Message:
    """Likelihood message to the stacked spline coefficients, in the vec basis."""
    blocks = expectations.zt_mean.shape[1]
    num_coefs = cache.num_coefs
    dim = blocks * num_coefs
    eta1 = e_recip_eps * np.einsum(
        "ia,ip->ap", expectations.zt_mean, cache.proj
    ).reshape(dim)
    precision = np.einsum("iab,ipq->apbq", expectations.zt_second, cache.gram).reshape(dim, dim)
    eta2 = -0.5 * e_recip_eps * vec(precision)
    return Message(GaussianVecParams(eta1, eta2))


def likelihood_messages_to_zeta(
    cache: LikelihoodCache, expectations: LikelihoodExpectations, e_recip_eps: float
) -> list[Message]:
    """Likelihood messages to each score vector, in the vech basis."""
    num_eigen = expectations.vpsi_mean.shape[1]
    eta1 = e_recip_eps * (
        np.einsum("pl,ip->il", expectations.vpsi_mean, cache.proj) - expectations.h_cross
    )
    # Column-major vec of each (L, L) slice, then apply D_L'.
    vec_h = expectations.h_psi.transpose(0, 2, 1).reshape(-1, num_eigen * num_eigen)
    eta2 = -0.5 * e_recip_eps * vec_h @ duplication_matrix(num_eigen)
    return [
        Message(GaussianVechParams(eta1[i], eta2[i])) for i in range(cache.num_curves)
    ]


def likelihood_expected_sq_norms(
    cache: LikelihoodCache, expectations: LikelihoodExpectations
) -> np.ndarray:
    """Per-curve E||y_i - C_i V zeta-tilde_i||^2 under the optimal posterior."""
    cross = np.einsum("pa,ip->ia", expectations.v_mean, cache.proj)
    return (
        cache.sq_norm
        - 2.0 * np.einsum("ia,ia->i", expectations.zt_mean, cross)
        + np.einsum("iab,iba->i", expectations.zt_second, expectations.h_full)
    )


def likelihood_message_to_sigsq_eps(
    cache: LikelihoodCache, expectations: LikelihoodExpectations
) -> Message:
    """Likelihood message to the noise variance, tagged with the full graph."""
    eta1 = -0.5 * float(cache.counts.sum())
    eta2 = -0.5 * float(likelihood_expected_sq_norms(cache, expectations).sum())
    return Message(InvChiSqParams(eta1, eta2), graph_tag=G_FULL)


# ---------------------------------------------------------------------------
# Penalization fragment


@dataclass(frozen=True)
class PenalizationHyper:
    """Fixed prior structure of the spline-coefficient blocks."""

    beta_mean: np.ndarray  # (2,) shared by the mean-function and eigenfunction blocks
    beta_cov: np.ndarray  # (2, 2)
    num_eigen: int
    num_splines: int

    def mean_vector(self) -> np.ndarray:
        block = np.concatenate([self.beta_mean, np.zeros(self.num_splines)])
        return np.tile(block, self.num_eigen + 1)


def penalization_messages(
    hyper: PenalizationHyper,
    nu_mean: np.ndarray,
    nu_cov: np.ndarray,
    e_recip_mu: float,
    e_recip_psi: np.ndarray,
) -> tuple[Message, Message, list[Message]]:
    """Messages to nu (vec basis), to sigma^2_mu and to each sigma^2_psi_l.

    The expected inverse prior covariance of nu is block diagonal: each block
    stacks the fixed 2x2 inverse of the linear-part covariance on top of
    E(1/sigma^2) times the identity on the spline part.
    """
    num_eigen, num_splines = hyper.num_eigen, hyper.num_splines
    num_coefs = 2 + num_splines
    dim = (num_eigen + 1) * num_coefs
    if nu_mean.size != dim:
        raise ValueError(f"nu has length {nu_mean.size}, expected {dim}")
    e_recip_psi = np.asarray(e_recip_psi, dtype=float).reshape(-1)
    if e_recip_psi.size != num_eigen:
        raise ValueError("need one reciprocal-variance expectation per eigenfunction")

    beta_prec = invert_spd(hyper.beta_cov, context="linear-part prior covariance")
    expected_prec = np.zeros((dim, dim))
    for block, e_recip in enumerate(np.concatenate([[e_recip_mu], e_recip_psi])):
        start = block * num_coefs
        expected_prec[start : start + 2, start : start + 2] = beta_prec
        spline = slice(start + 2, start + num_coefs)
        expected_prec[spline, spline] = e_recip * np.eye(num_splines)

    to_nu = Message(
        GaussianVecParams(expected_prec @ hyper.mean_vector(), -0.5 * vec(expected_prec))
    )

    def sq_norm_message(block: int) -> Message:
        start = block * num_coefs + 2
        spline = slice(start, start + num_splines)
        expected_sq = float(
            nu_mean[spline] @ nu_mean[spline] + np.trace(nu_cov[spline, spline])
        )
        return Message(
            InvChiSqParams(-0.5 * num_splines, -0.5 * expected_sq), graph_tag=G_FULL
        )

    to_sigsq_mu = sq_norm_message(0)
    to_sigsq_psi = [sq_norm_message(l + 1) for l in range(num_eigen)]
    return to_nu, to_sigsq_mu, to_sigsq_psi
