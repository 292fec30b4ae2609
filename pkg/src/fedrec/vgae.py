"""Variational graph auto-encoder: Gaussian posterior from two propagated
linear heads, Bernoulli edge likelihood, a learned diagonal prior, and the
reparameterized evidence lower bound.

The mean head is linear (means must be unbounded) and the variance head is
softplus-activated (variances must stay positive); the edge likelihood is
always computed in the softplus form so large logits never overflow.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import Decoder
from .graph import MarketGraph, PropagationMatrix, normalize_adjacency

# the full O(n^2) likelihood is exact below this; above it, non-edge terms
# are subsampled (NEGATIVES_PER_EDGE zero-cells per edge, rescaled)
EXACT_LIKELIHOOD_LIMIT = 512
NEGATIVES_PER_EDGE = 5

# softplus underflows to exactly 0.0 for pre-activations below ~-745; this
# floor keeps variances strictly positive without perturbing normal values
VARIANCE_FLOOR = 1e-30


@dataclass
class GaussianPosterior:
    """Per-item diagonal Gaussian over embeddings; ``var`` is already positive."""

    mean: Tensor
    var: Tensor

    @property
    def shape(self) -> tuple[int, int]:
        return self.mean.shape


class PriorParams:
    """Diagonal Gaussian prior with zero mean and a learned variance map.

    Per-item variances are softplus(X @ W), strictly positive; W starts at
    zero so the initial variance is softplus(0) = ln 2 everywhere.
    """

    def __init__(self, weight: Tensor):
        self.weight = weight

    @classmethod
    def init(cls, n_features: int, n_components: int) -> "PriorParams":
        return cls(ad.parameter(np.zeros((n_features, n_components)), name="prior_weight"))

    def variance(self, features: np.ndarray) -> Tensor:
        pre = ad.matmul(ad.constant(features), self.weight)
        return ad.add(ad.softplus(pre), ad.constant(VARIANCE_FLOOR))


class VgaeEncoder:
    """Posterior parameterization: two propagated linear heads over X."""

    def __init__(self, w_mean: Tensor, w_var: Tensor, propagation: PropagationMatrix):
        if w_mean.shape != w_var.shape:
            raise ad.ShapeMismatchError(
                f"head shapes differ: {w_mean.shape} vs {w_var.shape}"
            )
        self.w_mean = w_mean
        self.w_var = w_var
        self.propagation = propagation

    @classmethod
    def init(cls, propagation: PropagationMatrix, n_features: int, n_components: int,
             rng: np.random.Generator) -> "VgaeEncoder":
        from .encoder import init_weight

        return cls(
            ad.parameter(init_weight(rng, n_features, n_components), name="w_mean"),
            ad.parameter(init_weight(rng, n_features, n_components), name="w_var"),
            propagation,
        )

    @classmethod
    def from_weights(cls, weights, propagation: PropagationMatrix) -> "VgaeEncoder":
        w_mean, w_var = weights
        return cls(
            ad.parameter(np.array(w_mean), name="w_mean"),
            ad.parameter(np.array(w_var), name="w_var"),
            propagation,
        )

    @property
    def params(self) -> list[Tensor]:
        return [self.w_mean, self.w_var]

    def weight_values(self) -> list[np.ndarray]:
        return [self.w_mean.value.copy(), self.w_var.value.copy()]

    def posterior(self, features: np.ndarray) -> GaussianPosterior:
        return encode_posterior(self.w_mean, self.w_var, features, self.propagation)


def encode_posterior(w_mean: Tensor, w_var: Tensor, features: np.ndarray,
                     propagation: PropagationMatrix) -> GaussianPosterior:
    """Posterior mean M = S^m X W1 (linear) and variance V = softplus(S^m X W2)."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != propagation.n_items:
        raise ad.ShapeMismatchError(
            f"features have {features.shape[0]} rows, propagation expects "
            f"{propagation.n_items}"
        )
    if features.shape[1] != w_mean.shape[0]:
        raise ad.ShapeMismatchError(
            f"features have dim {features.shape[1]}, heads expect {w_mean.shape[0]}"
        )
    propagated = ad.constant(propagation.propagate(features))
    mean = ad.matmul(propagated, w_mean)
    var = ad.add(ad.softplus(ad.matmul(propagated, w_var)), ad.constant(VARIANCE_FLOOR))
    return GaussianPosterior(mean=mean, var=var)


def sample_embeddings(posterior: GaussianPosterior, noise: np.ndarray) -> Tensor:
    """Reparameterized draw Z = M + sqrt(V) * noise; differentiable in M, V."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != posterior.shape:
        raise ad.ShapeMismatchError(
            f"noise shape {noise.shape} does not match posterior {posterior.shape}"
        )
    return ad.add(posterior.mean, ad.mul(ad.sqrt(posterior.var), ad.constant(noise)))


def sample_negative_cells(adjacency: np.ndarray, n_samples: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Uniform zero-cells of the adjacency (diagonal included), as (m, 2)."""
    n = adjacency.shape[0]
    out = np.empty((n_samples, 2), dtype=np.int64)
    filled = 0
    while filled < n_samples:
        cand = rng.integers(0, n, size=(2 * (n_samples - filled), 2))
        keep = adjacency[cand[:, 0], cand[:, 1]] == 0
        cand = cand[keep][: n_samples - filled]
        out[filled:filled + cand.shape[0]] = cand
        filled += cand.shape[0]
    return out


def edge_loglik(decoder: Decoder, embeddings: Tensor, adjacency: np.ndarray,
                rng: np.random.Generator | None = None) -> Tensor:
    """Bernoulli log-likelihood of the full adjacency under the inner-product
    decoder, summed over all ordered cells including the diagonal.

    Exact for n <= EXACT_LIKELIHOOD_LIMIT. Above that an rng must be supplied
    and the non-edge sum is estimated from NEGATIVES_PER_EDGE sampled
    zero-cells per observed directed edge, rescaled to the full count.
    """
    adjacency = np.asarray(adjacency, dtype=np.float64)
    n = adjacency.shape[0]
    if embeddings.shape[0] != n:
        raise ad.ShapeMismatchError(
            f"embeddings have {embeddings.shape[0]} rows, adjacency is {n}x{n}"
        )
    if n <= EXACT_LIKELIHOOD_LIMIT:
        logits = ad.add(
            ad.mul(decoder.theta1, ad.matmul(embeddings, ad.transpose(embeddings))),
            decoder.theta2,
        )
        # per cell: A log sigma(s) + (1-A) log(1-sigma(s)) = A s - softplus(s)
        hits = ad.mul(ad.constant(adjacency), logits)
        return ad.sum_all(ad.sub(hits, ad.softplus(logits)))
    if rng is None:
        raise ValueError(
            f"edge_loglik: n={n} exceeds the exact limit; supply an rng for "
            "subsampled non-edge terms"
        )
    pos_cells = np.argwhere(adjacency > 0)
    n_zero = n * n - pos_cells.shape[0]
    n_sample = min(n_zero, NEGATIVES_PER_EDGE * max(pos_cells.shape[0], 1))
    neg_cells = sample_negative_cells(adjacency, n_sample, rng)
    pos_logits = _cell_logits(decoder, embeddings, pos_cells)
    pos_term = ad.sum_all(ad.sub(pos_logits, ad.softplus(pos_logits)))
    neg_term = ad.scale(
        ad.sum_all(ad.softplus(_cell_logits(decoder, embeddings, neg_cells))),
        n_zero / n_sample,
    )
    return ad.sub(pos_term, neg_term)


def _cell_logits(decoder: Decoder, embeddings: Tensor, cells: np.ndarray) -> Tensor:
    za = ad.gather_rows(embeddings, cells[:, 0])
    zb = ad.gather_rows(embeddings, cells[:, 1])
    return ad.add(ad.mul(decoder.theta1, ad.rowwise_inner(za, zb)), decoder.theta2)


def kl_diag_gaussians(posterior: GaussianPosterior, prior: PriorParams,
                      features: np.ndarray) -> Tensor:
    """Sum over items of KL(N(m, diag v) || N(0, diag alpha(X))), closed form."""
    if np.any(posterior.var.value <= 0):
        raise ValueError("kl_diag_gaussians: nonpositive posterior variance")
    alpha = prior.variance(features)
    ratio = ad.div(posterior.var, alpha)
    fit = ad.div(ad.square(posterior.mean), alpha)
    log_ratio = ad.sub(ad.log(alpha), ad.log(posterior.var))
    per_dim = ad.add(ad.add(ratio, fit), ad.sub(log_ratio, ad.constant(1.0)))
    return ad.scale(ad.sum_all(per_dim), 0.5)


def elbo(decoder: Decoder, prior: PriorParams, encoder: VgaeEncoder,
         features: np.ndarray, adjacency: np.ndarray, noise: np.ndarray,
         rng: np.random.Generator | None = None) -> Tensor:
    """Single-sample evidence lower bound: reconstruction minus KL.

    Deterministic once ``noise`` is fixed; differentiable w.r.t. decoder,
    prior, and both encoder heads.
    """
    posterior = encoder.posterior(features)
    z = sample_embeddings(posterior, noise)
    recon = edge_loglik(decoder, z, adjacency, rng=rng)
    return ad.sub(recon, kl_diag_gaussians(posterior, prior, features))


@dataclass
class LocalVgaeResult:
    encoder: VgaeEncoder
    decoder: Decoder
    prior: PriorParams
    losses: list[float]

    def mean_embeddings(self, features: np.ndarray) -> np.ndarray:
        return self.encoder.posterior(features).mean.value


def train_local_vgae(
    market: MarketGraph,
    n_components: int,
    steps: int,
    learning_rate: float,
    seed: int,
    power: int = 3,
    propagation: PropagationMatrix | None = None,
) -> LocalVgaeResult:
    """Per-market variational training from scratch (the local stage that
    heterogeneity diagnostics build on). Loss values are per adjacency cell."""
    rng = np.random.default_rng(seed)
    prop = propagation if propagation is not None else normalize_adjacency(
        market.dense_adjacency(), power
    )
    encoder = VgaeEncoder.init(prop, market.feature_dim, n_components, rng)
    decoder = Decoder.init_calibrated(market.dense_adjacency().mean())
    prior = PriorParams.init(market.feature_dim, n_components)
    params = [*encoder.params, *decoder.params, prior.weight]
    opt = ad.OptimizerState(learning_rate)
    adjacency = market.dense_adjacency()
    scale = 1.0 / market.n_items**2
    losses = []
    for _ in range(steps):
        noise = rng.standard_normal((market.n_items, n_components))
        ad.zero_grads(params)
        loss = ad.scale(
            ad.neg(elbo(decoder, prior, encoder, market.features, adjacency, noise, rng=rng)),
            scale,
        )
        loss.backward()
        ad.sgd_step(params, opt)
        losses.append(loss.item())
    return LocalVgaeResult(encoder=encoder, decoder=decoder, prior=prior, losses=losses)
