"""Recommendation encoder-decoder: propagated linear embedding, inner-product
logistic scoring, and the pairwise ranking loss used by the non-variational
baselines.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import MarketGraph, PropagationMatrix

# paper-scale defaults; synthetic desk-scale data uses smaller dims via config
DEFAULT_FEATURE_DIM = 768
DEFAULT_EMBEDDING_DIM = 128


def init_weight(rng: np.random.Generator, n_features: int, n_components: int) -> np.ndarray:
    """Uniform init in [-1/sqrt(d), 1/sqrt(d)]."""
    bound = 1.0 / np.sqrt(n_features)
    return rng.uniform(-bound, bound, size=(n_features, n_components))


class SgcEncoder:
    """Single collapsed propagation-then-linear map with a sigmoid output.

    Z = sigmoid(S^m X W); the propagation power is baked into the cached
    PropagationMatrix.
    """

    def __init__(self, weight: Tensor, propagation: PropagationMatrix):
        if weight.shape[1] > weight.shape[0]:
            raise ValueError(
                f"embedding dim {weight.shape[1]} exceeds feature dim {weight.shape[0]}"
            )
        self.weight = weight
        self.propagation = propagation

    @classmethod
    def init(cls, propagation: PropagationMatrix, n_features: int, n_components: int,
             rng: np.random.Generator) -> "SgcEncoder":
        w = ad.parameter(init_weight(rng, n_features, n_components), name="weight")
        return cls(w, propagation)

    def embed(self, features: np.ndarray) -> Tensor:
        """Embed all items; output entries lie strictly in (0, 1)."""
        return ad.sigmoid(self.linear(features))

    def linear(self, features: np.ndarray) -> Tensor:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != self.propagation.n_items:
            raise ad.ShapeMismatchError(
                f"features have {features.shape[0]} rows, propagation expects "
                f"{self.propagation.n_items}"
            )
        if features.shape[1] != self.weight.shape[0]:
            raise ad.ShapeMismatchError(
                f"features have dim {features.shape[1]}, weight expects "
                f"{self.weight.shape[0]}"
            )
        return ad.matmul(ad.constant(self.propagation.propagate(features)), self.weight)


@dataclass
class Decoder:
    """Logistic regressor on embedding inner products: r = sigmoid(t1*<za,zb> + t2)."""

    theta1: Tensor
    theta2: Tensor

    @classmethod
    def init(cls) -> "Decoder":
        return cls(ad.parameter(1.0, name="theta1"), ad.parameter(0.0, name="theta2"))

    @classmethod
    def init_calibrated(cls, density: float) -> "Decoder":
        """Bias initialized at the logit of the graph density.

        Starting the bias several units away from the density logit makes the
        early slope gradient chase the density mismatch instead of the
        ranking signal, which can push the slope through zero and invert
        every score; calibration removes that failure mode.
        """
        density = float(np.clip(density, 1e-6, 1.0 - 1e-6))
        bias = float(np.log(density / (1.0 - density)))
        return cls(ad.parameter(1.0, name="theta1"),
                   ad.parameter(bias, name="theta2"))

    @property
    def params(self) -> list[Tensor]:
        return [self.theta1, self.theta2]

    def values(self) -> tuple[float, float]:
        return self.theta1.item(), self.theta2.item()


def score_pair(decoder: Decoder, z_a: np.ndarray, z_b: np.ndarray) -> float:
    """Relationship strength for one item pair, in (0, 1). Plain-float path."""
    z_a = np.asarray(z_a, dtype=np.float64).ravel()
    z_b = np.asarray(z_b, dtype=np.float64).ravel()
    if z_a.shape != z_b.shape:
        raise ad.ShapeMismatchError(
            f"score_pair: embedding dims differ, {z_a.shape} vs {z_b.shape}"
        )
    t1, t2 = decoder.values()
    x = t1 * float(z_a @ z_b) + t2
    return float(1.0 / (1.0 + np.exp(-x))) if x >= 0 else float(np.exp(x) / (1.0 + np.exp(x)))


def score_matrix(theta: tuple[float, float], embeddings: np.ndarray) -> np.ndarray:
    """All-pairs decoder logits t1 * Z Z^T + t2 (left unsquashed: sigmoid is
    monotone, so rankings can use the logits directly)."""
    t1, t2 = theta
    return t1 * (embeddings @ embeddings.T) + t2


def pair_scores(decoder: Decoder, embeddings: Tensor, pairs: np.ndarray) -> Tensor:
    """Differentiable scores for an (m, 2) index array, as an (m, 1) tensor."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    za = ad.gather_rows(embeddings, pairs[:, 0])
    zb = ad.gather_rows(embeddings, pairs[:, 1])
    inner = ad.rowwise_inner(za, zb)
    return ad.sigmoid(ad.add(ad.mul(decoder.theta1, inner), decoder.theta2))


def bpr_loss(decoder: Decoder, triplets: np.ndarray, embeddings: Tensor) -> Tensor:
    """Mean pairwise ranking loss over (query, positive, negative) triplets.

    -log sigmoid(r+ - r-) averaged over triplets, computed with the stable
    softplus form.
    """
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if triplets.shape[0] == 0:
        raise ValueError("bpr_loss: empty triplet list")
    r_pos = pair_scores(decoder, embeddings, triplets[:, [0, 1]])
    r_neg = pair_scores(decoder, embeddings, triplets[:, [0, 2]])
    margin = ad.sub(r_pos, r_neg)
    return ad.reduce_mean(ad.softplus(ad.neg(margin)))


@dataclass
class BprTrainResult:
    weight: np.ndarray
    theta: tuple[float, float]
    losses: list[float]
    embeddings: np.ndarray


def train_bpr(
    market: MarketGraph,
    propagation: PropagationMatrix,
    weight_init: np.ndarray,
    epochs: int,
    learning_rate: float,
    rng: np.random.Generator,
    negatives_per_positive: int = 1,
) -> BprTrainResult:
    """Local ranking training: one full-batch step per epoch, negatives
    resampled from the non-neighbor set each epoch."""
    from .data import sample_negatives  # local import avoids a module cycle

    encoder = SgcEncoder(ad.parameter(weight_init.copy(), name="weight"), propagation)
    # center initial pair scores at zero: embeddings live in (0,1), so raw
    # inner products start near k/4 and would saturate the score sigmoid
    z0 = encoder.embed(market.features).value
    center = float(np.einsum(
        "ij,ij->i", z0[market.train_pairs[:, 0]], z0[market.train_pairs[:, 1]]
    ).mean()) if market.train_pairs.size else 0.0
    decoder = Decoder(ad.parameter(1.0, name="theta1"),
                      ad.parameter(-center, name="theta2"))
    params = [encoder.weight, *decoder.params]
    opt = ad.OptimizerState(learning_rate)
    losses = []
    for _ in range(epochs):
        triplets = sample_negatives(
            market, negatives_per_positive, seed=int(rng.integers(2**32))
        )
        ad.zero_grads(params)
        loss = bpr_loss(decoder, triplets, encoder.embed(market.features))
        loss.backward()
        ad.sgd_step(params, opt)
        losses.append(loss.item())
    z_final = encoder.embed(market.features).value
    return BprTrainResult(
        weight=encoder.weight.value.copy(),
        theta=decoder.values(),
        losses=losses,
        embeddings=z_final,
    )
