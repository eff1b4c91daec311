"""Training objectives and variational bounds.

The ELBO with Bernoulli likelihood and analytic Gaussian KL, the
beta-weighted variant, the information-maximizing objective built on a
variational MI lower bound (f-dual KL conjugate or Donsker-Varadhan),
the MMD-regularized baseline, and the batch-permutation trick that turns
a posterior sample batch into approximate marginal samples.

Scalar losses are 1x1 graph nodes; the training loop decides which
parameters each one updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.stats import gaussian_kde

from . import autodiff as ad
from .nets import PIXEL_FLOOR

SCORE_CLAMP = 50.0  # critic scores pass through exp; clamp keeps it finite

KIND_KL_F_DUAL = "kl-f-dual"
KIND_DONSKER_VARADHAN = "donsker-varadhan"
KIND_GENERIC_F_DUAL = "generic-f-dual"


@dataclass(frozen=True)
class DivergenceSpec:
    """A variational-bound flavor: which transform hits the marginal scores."""

    kind: str
    conjugate: Optional[Callable[[ad.Node], ad.Node]] = None


def kl_f_dual() -> DivergenceSpec:
    return DivergenceSpec(KIND_KL_F_DUAL)


def donsker_varadhan() -> DivergenceSpec:
    return DivergenceSpec(KIND_DONSKER_VARADHAN)


def generic_f_dual(f: Callable[[float], float],
                   conjugate: Callable[[ad.Node], ad.Node]) -> DivergenceSpec:
    """Bound for a user-supplied convex f with f(1)=0 and its conjugate f*.

    The conjugate acts on graph nodes so gradients flow; f itself is only
    spot-checked here (f(1)=0 and midpoint convexity on a coarse grid).
    """
    if abs(f(1.0)) > 1e-9:
        raise ValueError(f"f(1) must be 0, got {f(1.0)!r}")
    grid = np.linspace(0.2, 5.0, 9)
    for a in grid:
        for b in grid:
            if f(0.5 * (a + b)) > 0.5 * (f(a) + f(b)) + 1e-9:
                raise ValueError(f"f fails midpoint convexity between {a} and {b}")
    return DivergenceSpec(KIND_GENERIC_F_DUAL, conjugate)


@dataclass(frozen=True)
class ObjectiveConfig:
    alpha: float = 10.0
    beta: float = 1.0
    divergence: DivergenceSpec = field(default_factory=kl_f_dual)
    mmd_alpha: float = 0.0
    mmd_lambda: float = 1000.0
    mmd_bandwidths: Optional[tuple] = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")


def _require_finite(name: str, node: ad.Node) -> ad.Node:
    if not np.all(np.isfinite(node.value)):
        raise ad.NumericError(f"{name} is non-finite")
    return node


# ---------------------------------------------------------------------------
# ELBO pieces
# ---------------------------------------------------------------------------

def bernoulli_log_likelihood(x: ad.Node, reconstruction: ad.Node) -> ad.Node:
    """Batch mean of per-example Bernoulli log-likelihood."""
    xhat = ad.clip(reconstruction, PIXEL_FLOOR, 1.0 - PIXEL_FLOOR)
    one_minus_x = ad.add_scalar(ad.negate(x), 1.0)
    one_minus_xhat = ad.add_scalar(ad.negate(xhat), 1.0)
    ll = ad.add(ad.mul(x, ad.log(xhat)), ad.mul(one_minus_x, ad.log(one_minus_xhat)))
    return ad.mean_all(ad.sum_rows(ll))


def kl_to_standard_normal_per_example(posterior) -> ad.Node:
    """Analytic KL(q(z|x) || N(0,I)) per example, as an nx1 node."""
    mu2 = ad.square(posterior.mean)
    var = ad.exp(posterior.log_var)
    inner = ad.sub(ad.add(mu2, var), ad.add_scalar(posterior.log_var, 1.0))
    return ad.scale(ad.sum_rows(inner), 0.5)


def elbo_terms(x: ad.Node, posterior, reconstruction: ad.Node):
    """Returns (recon_ll, kl), both batch-mean scalars.  ELBO = recon_ll - kl."""
    recon_ll = _require_finite("reconstruction log-likelihood",
                               bernoulli_log_likelihood(x, reconstruction))
    kl = _require_finite("kl term",
                         ad.mean_all(kl_to_standard_normal_per_example(posterior)))
    return recon_ll, kl


# ---------------------------------------------------------------------------
# marginal sampling by permutation
# ---------------------------------------------------------------------------

def sample_batch_permutation(rng: np.random.Generator, b: int) -> np.ndarray:
    """Uniform random permutation of 0..b-1, rejecting the identity for b > 1."""
    if b < 1:
        raise ValueError("batch size must be positive")
    if b == 1:
        return np.zeros(1, dtype=np.intp)
    identity = np.arange(b)
    while True:
        perm = rng.permutation(b)
        if not np.array_equal(perm, identity):
            return perm


def permute_codes(z: ad.Node, permutation) -> ad.Node:
    return ad.permute_rows(z, permutation)


# ---------------------------------------------------------------------------
# MI lower bounds
# ---------------------------------------------------------------------------

def mi_lower_bound(spec: DivergenceSpec, t_joint: ad.Node, t_marg: ad.Node) -> ad.Node:
    if t_joint.value.shape != t_marg.value.shape:
        raise ad.ShapeError(
            f"score shapes differ: {t_joint.value.shape} vs {t_marg.value.shape}")
    tj = ad.clip(t_joint, -SCORE_CLAMP, SCORE_CLAMP)
    tm = ad.clip(t_marg, -SCORE_CLAMP, SCORE_CLAMP)
    joint_term = ad.mean_all(tj)
    if spec.kind == KIND_KL_F_DUAL:
        marg_term = ad.mean_all(ad.exp(ad.add_scalar(tm, -1.0)))
    elif spec.kind == KIND_DONSKER_VARADHAN:
        marg_term = ad.logmeanexp_all(tm)
    elif spec.kind == KIND_GENERIC_F_DUAL:
        marg_term = ad.mean_all(spec.conjugate(tm))
    else:
        raise ValueError(f"unknown divergence kind {spec.kind!r}")
    return _require_finite("mi lower bound", ad.sub(joint_term, marg_term))


class LossParts(NamedTuple):
    """Everything the training step needs from one objective evaluation."""

    vae_loss: ad.Node
    critic_loss: Optional[ad.Node]
    recon_ll: ad.Node
    kl: ad.Node
    mi_bound: Optional[ad.Node]


def infomax_loss(config: ObjectiveConfig, x: ad.Node, posterior,
                 reconstruction: ad.Node,
                 t_joint: Optional[ad.Node] = None,
                 t_marg: Optional[ad.Node] = None) -> LossParts:
    """Main-network and critic losses for one batch.

    With alpha = 0 (or no critic scores) this is exactly the beta-weighted
    negative ELBO: the MI term is omitted from the graph, not multiplied
    by zero, so the reduction is bitwise.
    """
    recon_ll, kl = elbo_terms(x, posterior, reconstruction)
    penalized = ad.sub(recon_ll, ad.scale(kl, config.beta))
    if config.alpha == 0.0:
        return LossParts(ad.negate(penalized), None, recon_ll, kl, None)
    if t_joint is None or t_marg is None:
        raise ValueError("critic scores are required when alpha > 0")
    bound = mi_lower_bound(config.divergence, t_joint, t_marg)
    vae_loss = ad.negate(ad.add(penalized, ad.scale(bound, config.alpha)))
    return LossParts(vae_loss, ad.negate(bound), recon_ll, kl, bound)


# ---------------------------------------------------------------------------
# MMD baseline
# ---------------------------------------------------------------------------

def default_mmd_bandwidths(z_dim: int) -> tuple:
    return tuple(z_dim * 2.0 ** k for k in range(-2, 3))


def pairwise_sq_dists(a: ad.Node, b: ad.Node) -> ad.Node:
    n, m = a.value.shape[0], b.value.shape[0]
    a2 = ad.broadcast_cols(ad.sum_rows(ad.square(a)), m)
    b2 = ad.transpose(ad.broadcast_cols(ad.sum_rows(ad.square(b)), n))
    cross = ad.scale(ad.matmul(a, ad.transpose(b)), -2.0)
    return ad.add(ad.add(a2, b2), cross)


def _kernel_sum(d2: ad.Node, bandwidths) -> ad.Node:
    total = None
    for bw in bandwidths:
        term = ad.exp(ad.scale(d2, -1.0 / float(bw)))
        total = term if total is None else ad.add(total, term)
    return total


def mmd_squared(a: ad.Node, b: ad.Node, bandwidths, unbiased: bool = True) -> ad.Node:
    """Multi-bandwidth RBF MMD^2; the unbiased form drops within-set diagonals."""
    n, m = a.value.shape[0], b.value.shape[0]
    if unbiased and (n < 2 or m < 2):
        raise ValueError("unbiased MMD needs at least 2 samples per set")
    kaa = _kernel_sum(pairwise_sq_dists(a, a), bandwidths)
    kbb = _kernel_sum(pairwise_sq_dists(b, b), bandwidths)
    kab = _kernel_sum(pairwise_sq_dists(a, b), bandwidths)
    cross = ad.scale(ad.sum_all(kab), -2.0 / (n * m))
    if unbiased:
        mask_a = ad.constant(1.0 - np.eye(n))
        mask_b = ad.constant(1.0 - np.eye(m))
        within_a = ad.scale(ad.sum_all(ad.mul(kaa, mask_a)), 1.0 / (n * (n - 1)))
        within_b = ad.scale(ad.sum_all(ad.mul(kbb, mask_b)), 1.0 / (m * (m - 1)))
    else:
        within_a = ad.mean_all(kaa)
        within_b = ad.mean_all(kbb)
    return ad.add(ad.add(within_a, within_b), cross)


def mmd_infovae_loss(config: ObjectiveConfig, x: ad.Node, posterior,
                     reconstruction: ad.Node, z: ad.Node,
                     prior_samples: np.ndarray) -> LossParts:
    """MMD-regularized objective: -recon_ll + (1-a)kl + (a+lambda-1) MMD^2."""
    if prior_samples.shape[0] != z.value.shape[0]:
        raise ad.ShapeError(
            f"prior sample count {prior_samples.shape[0]} != batch size {z.value.shape[0]}")
    recon_ll, kl = elbo_terms(x, posterior, reconstruction)
    bandwidths = config.mmd_bandwidths or default_mmd_bandwidths(z.value.shape[1])
    m2 = mmd_squared(z, ad.constant(prior_samples), bandwidths, unbiased=True)
    kl_coeff = 1.0 - config.mmd_alpha
    mmd_coeff = config.mmd_alpha + config.mmd_lambda - 1.0
    loss = ad.add(ad.add(ad.negate(recon_ll), ad.scale(kl, kl_coeff)),
                  ad.scale(m2, mmd_coeff))
    return LossParts(_require_finite("mmd objective", loss), None, recon_ll, kl, None)


# ---------------------------------------------------------------------------
# diagnostic KL decomposition
# ---------------------------------------------------------------------------

class KlDecomposition(NamedTuple):
    kl_qzx_p: float
    kl_qz_p_estimate: float
    mi_identity_residual: float


def decomposed_kl_terms(kl_per_example: np.ndarray, z: np.ndarray,
                        mi_estimate: Optional[float] = None) -> KlDecomposition:
    """Diagnostic split of the rate term.

    The identity E_x[KL(q(z|x)||p)] = I(x;z) + KL(q(z)||p) is reported as
    its three pieces.  The aggregate-posterior KL is estimated by fitting a
    Gaussian KDE on half the latent samples and scoring the other half
    (diagnostic-grade only).  Without an external MI estimate the residual
    is zero by construction.
    """
    kl_qzx_p = float(np.mean(kl_per_example))
    z = np.asarray(z, dtype=np.float64)
    n, d = z.shape
    half = n // 2
    if half < 2:
        raise ValueError("need at least 4 latent samples for the split estimate")
    kde = gaussian_kde(z[:half].T)
    tail = z[half:]
    log_q = kde.logpdf(tail.T)
    log_p = -0.5 * (d * np.log(2.0 * np.pi) + np.sum(tail * tail, axis=1))
    kl_qz_p = float(np.mean(log_q - log_p))
    if mi_estimate is None:
        mi_estimate = kl_qzx_p - kl_qz_p
    residual = kl_qzx_p - kl_qz_p - float(mi_estimate)
    return KlDecomposition(kl_qzx_p, kl_qz_p, residual)
