"""Personalized federated optimization.

Each round a client receives the global feature weights (and, in the
structure-sharing variant, the global graph summary), re-initializes its
private decoder/prior/cluster state, and alternates two proximal solves:
(a) the private decoder and prior against the client reconstruction loss,
(b) the shared feature heads and cluster centers against the same loss plus
quadratic couplings that moderate how far the client drifts from the global
point. The server then mixes the returned client points into the new global
point. Also provides the one-step-gradient update variant and plain
federated averaging for the non-personalized baseline.

All client objectives are scaled by 1/n_items^2 — a uniform positive factor
that leaves minimizers and the relative term weights unchanged but keeps the
standard learning-rate grid usable across market sizes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .encoder import Decoder, train_bpr
from .graph import MarketGraph, PropagationMatrix, normalize_adjacency
from .summary import (
    ClusterMemory,
    GraphSummary,
    structural_penalty,
    summarize,
    summarize_embeddings,
)
from .vgae import PriorParams, VgaeEncoder, kl_diag_gaussians, edge_loglik, sample_embeddings

DEFAULT_LAMBDA_W_GRID = (0.1, 1.0, 10.0, 100.0, 1000.0)
DEFAULT_LAMBDA_S_GRID = (0.001, 0.01, 0.1, 1.0, 10.0)


@dataclass
class AdaptationConfig:
    """Federation hyper-parameters; lambda grids default to the sweep values
    in DEFAULT_LAMBDA_W_GRID / DEFAULT_LAMBDA_S_GRID."""

    lambda_w: float = 1.0
    lambda_s: float = 0.01
    n_tau: int = 30
    n_r: int = 2
    inner_steps: int = 20
    server_mix: float = 0.9
    learning_rate: float = 0.1
    negatives_per_positive: int = 1

    def __post_init__(self):
        if self.lambda_w < 0 or self.lambda_s < 0:
            raise ValueError("adaptation weights must be nonnegative")
        if not 0.0 < self.server_mix <= 1.0:
            raise ValueError(f"server_mix must be in (0, 1], got {self.server_mix}")
        if self.n_tau < 0 or self.n_r < 0 or self.inner_steps < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @property
    def epochs_per_round(self) -> int:
        # ranking-loss baselines get the same per-round step budget
        return self.n_r * self.inner_steps


@dataclass
class ClientReturn:
    """What a client is allowed to send back: adapted feature weights, the
    adapted summary (structure-sharing mode only), and scalar diagnostics."""

    market_id: str
    phi: list[np.ndarray]
    xi: GraphSummary | None
    local_metrics: dict = field(default_factory=dict)


def client_objective(
    decoder: Decoder,
    prior: PriorParams,
    memory: ClusterMemory | None,
    encoder: VgaeEncoder,
    market: MarketGraph,
    noise: np.ndarray,
    *,
    xi=None,
    phi_anchor=None,
    xi_anchor=None,
    lambda_w: float = 0.0,
    lambda_s: float = 0.0,
    include_structure: bool = True,
    scaled: bool = True,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Single differentiable client objective.

    Negative evidence bound of the market graph, plus (in structure mode) the
    reconstruction penalty through the cluster summary, plus optional
    quadratic couplings to the global anchors. ``xi=None`` expresses the
    summary live from the current embedding draw; passing an array freezes it.

    With ``scaled=True`` (the training form) every term is reduced to an O(1)
    scale so the adaptation grids moderate comparably across market sizes:
    the reconstruction part is averaged per adjacency cell, the feature
    coupling acts on the (size-free) weight matrices directly, and the
    summary coupling is divided by n^2 because summary entries aggregate
    O(n / clusters) embedding rows.
    """
    features = market.features
    adjacency = market.dense_adjacency()
    posterior = encoder.posterior(features)
    z = sample_embeddings(posterior, noise)
    recon = edge_loglik(decoder, z, adjacency, rng=rng)
    loss = ad.sub(kl_diag_gaussians(posterior, prior, features), recon)
    if include_structure:
        if memory is None:
            raise ValueError("structure mode requires a cluster memory")
        xi_t = summarize_embeddings(memory, z) if xi is None else _as_tensor(xi)
        loss = ad.add(loss, structural_penalty(decoder, memory, xi_t, adjacency, z))
    cell_scale = 1.0 / market.n_items**2
    if scaled:
        loss = ad.scale(loss, cell_scale)
    if include_structure and xi_anchor is not None and lambda_s > 0:
        gap = ad.frobenius_sq(ad.sub(xi_t, ad.constant(_xi_array(xi_anchor))))
        loss = ad.add(loss, ad.scale(gap, lambda_s * (cell_scale if scaled else 1.0)))
    if phi_anchor is not None and lambda_w > 0:
        for p, anchor in zip(encoder.params, phi_anchor):
            gap = ad.sub(p, ad.constant(anchor))
            loss = ad.add(loss, ad.scale(ad.frobenius_sq(gap), lambda_w))
    return loss


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return ad.constant(_xi_array(x))


def _xi_array(x) -> np.ndarray:
    return x.xi if isinstance(x, GraphSummary) else np.asarray(x, dtype=np.float64)


def local_loss(decoder, prior, memory, encoder, xi, market, noise,
               include_structure: bool = True) -> Tensor:
    """Unscaled client loss: negative evidence bound plus (optionally) the
    structural reconstruction penalty at a frozen summary."""
    return client_objective(
        decoder, prior, memory, encoder, market, noise,
        xi=xi, include_structure=include_structure, scaled=False,
    )


def proximal_solve(objective_fn, params, anchors, weight: float,
                   learning_rate: float, steps: int) -> list[float]:
    """SGD on objective_fn() + weight * sum_j ||p_j - anchor_j||^2.

    The generic proximal inner solve: drive ``steps`` high enough and this
    converges to the proximal point of the objective at the anchors.
    """
    params = list(params)
    anchor_consts = [ad.constant(np.asarray(a, dtype=np.float64)) for a in anchors]
    opt = ad.OptimizerState(learning_rate)
    losses = []
    for _ in range(steps):
        ad.zero_grads(params)
        loss = objective_fn()
        for p, anchor in zip(params, anchor_consts):
            loss = ad.add(loss, ad.scale(ad.frobenius_sq(ad.sub(p, anchor)), weight))
        if not np.isfinite(loss.value).all():
            raise NonFiniteError("proximal solve diverged")
        loss.backward()
        ad.sgd_step(params, opt)
        losses.append(loss.item())
    return losses


def adapt_client(
    phi_star,
    xi_star,
    market: MarketGraph,
    config: AdaptationConfig,
    *,
    seed: int = 0,
    include_structure: bool = True,
    propagation: PropagationMatrix | None = None,
    power: int = 3,
    tau: float = 1.0,
    cutoff: int = 20,
) -> ClientReturn:
    """One client adaptation pass from the global point.

    Runs ``config.n_r`` outer iterations; each iteration solves the private
    decoder/prior first (summary frozen), then the feature heads and cluster
    centers under the proximal couplings (summary expressed live), then
    refreshes the frozen summary from a fresh embedding draw. Client state is
    rebuilt from scratch every call, so the result is a pure function of
    (globals, market, config, seed).
    """
    rng = np.random.default_rng(seed)
    prop = propagation if propagation is not None else normalize_adjacency(
        market.dense_adjacency(), power
    )
    n = market.n_items
    n_components = phi_star[0].shape[1]
    encoder = VgaeEncoder.from_weights(phi_star, prop)
    density = market.dense_adjacency().mean()
    decoder = Decoder.init_calibrated(density)
    prior = PriorParams.init(market.feature_dim, n_components)
    phi_anchor = [np.array(w) for w in phi_star]

    memory = None
    xi_frozen = None
    if include_structure:
        if xi_star is None:
            raise ValueError("structure mode requires a global summary")
        post = encoder.posterior(market.features)
        z0 = post.mean.value + np.sqrt(post.var.value) * rng.standard_normal((n, n_components))
        memory = ClusterMemory.from_embeddings(z0, _xi_array(xi_star).shape[0], rng, tau)
        xi_frozen = summarize(memory, z0).xi

    private_params = [*decoder.params, prior.weight]
    shared_params = list(encoder.params) + ([memory.centers] if memory else [])
    all_params = private_params + shared_params
    private_opt = ad.OptimizerState(config.learning_rate)
    shared_opt = ad.OptimizerState(config.learning_rate)
    iteration_losses = []

    def step(train_params, opt, **kwargs):
        noise = rng.standard_normal((n, n_components))
        ad.zero_grads(all_params)
        loss = client_objective(
            decoder, prior, memory, encoder, market, noise,
            include_structure=include_structure, **kwargs,
        )
        if not np.isfinite(loss.value).all():
            raise NonFiniteError(f"client {market.market_id!r} diverged")
        loss.backward()
        ad.sgd_step(train_params, opt)
        return loss.item()

    for _ in range(config.n_r):
        for _ in range(config.inner_steps):
            step(private_params, private_opt, xi=xi_frozen)
        for _ in range(config.inner_steps):
            step(
                shared_params, shared_opt,
                xi=None,
                phi_anchor=phi_anchor,
                xi_anchor=xi_star if include_structure else None,
                lambda_w=config.lambda_w,
                lambda_s=config.lambda_s if include_structure else 0.0,
            )
        if include_structure:
            draw = rng.standard_normal((n, n_components))
            post = encoder.posterior(market.features)
            z = post.mean.value + np.sqrt(post.var.value) * draw
            xi_frozen = summarize(memory, z).xi
        iteration_losses.append(_deterministic_loss(
            decoder, prior, memory, encoder, market, phi_anchor, xi_star,
            config, include_structure,
        ))

    metrics = {
        "losses": iteration_losses,
        "loss": iteration_losses[-1] if iteration_losses else _deterministic_loss(
            decoder, prior, memory, encoder, market, phi_anchor, xi_star,
            config, include_structure,
        ),
    }
    if market.test_pairs.size:
        from .metrics import evaluate_market

        z_eval = encoder.posterior(market.features).mean.value
        result = evaluate_market(z_eval, decoder.values(), market, cutoff)
        metrics["mrr"] = result.mrr
        metrics["ndcg"] = result.ndcg
    return ClientReturn(
        market_id=market.market_id,
        phi=encoder.weight_values(),
        xi=summarize(memory, encoder.posterior(market.features).mean.value)
        if include_structure else None,
        local_metrics=metrics,
    )


def _deterministic_loss(decoder, prior, memory, encoder, market, phi_anchor,
                        xi_star, config, include_structure) -> float:
    """Objective value at zero reparameterization noise — the reported trace
    loss is a deterministic function of the parameters."""
    noise = np.zeros((market.n_items, phi_anchor[0].shape[1]))
    loss = client_objective(
        decoder, prior, memory, encoder, market, noise,
        xi=None,
        phi_anchor=phi_anchor,
        xi_anchor=xi_star if include_structure else None,
        lambda_w=config.lambda_w,
        lambda_s=config.lambda_s if include_structure else 0.0,
        include_structure=include_structure,
    )
    return loss.item()


def server_update(returns, phi_star, xi_star, config: AdaptationConfig):
    """Convex mixing of the client means into the new global point:
    g' = (1 - beta) g + beta * mean(clients). Permutation-invariant."""
    returns = list(returns)
    if not returns:
        raise ValueError("server_update: no successful client returns")
    beta = config.server_mix
    phi_new = []
    for j, g in enumerate(phi_star):
        mean = np.mean([r.phi[j] for r in returns], axis=0)
        phi_new.append((1.0 - beta) * np.asarray(g) + beta * mean)
    xi_new = None
    if xi_star is not None:
        xi_returns = [r.xi.xi for r in returns if r.xi is not None]
        if len(xi_returns) != len(returns):
            raise ValueError("server_update: missing summary in a client return")
        xi_new = (1.0 - beta) * _xi_array(xi_star) + beta * np.mean(xi_returns, axis=0)
    return phi_new, xi_new


def one_step_update(w, loss_grad_fns, step_size: float,
                    hessian_step: float = 1e-4) -> np.ndarray:
    """Meta-update that optimizes the post-one-gradient-step average loss.

    w' = w - a * mean_i (I - a H_i(w)) grad_i(w - a grad_i(w)), with the
    Hessian-vector products taken by central differences of the gradients.
    Each loss_grad_fn maps a parameter vector to (loss, gradient).
    """
    w = np.asarray(w, dtype=np.float64)
    terms = []
    for i, fn in enumerate(loss_grad_fns):
        loss0, g0 = fn(w)
        g0 = np.asarray(g0, dtype=np.float64)
        if not (np.isfinite(loss0) and np.isfinite(g0).all()):
            raise NonFiniteError(f"one_step_update: client {i} loss/gradient not finite")
        inner = w - step_size * g0
        _, g_inner = fn(inner)
        g_inner = np.asarray(g_inner, dtype=np.float64)
        g_up = np.asarray(fn(w + hessian_step * g_inner)[1], dtype=np.float64)
        g_down = np.asarray(fn(w - hessian_step * g_inner)[1], dtype=np.float64)
        hvp = (g_up - g_down) / (2.0 * hessian_step)
        if not (np.isfinite(g_inner).all() and np.isfinite(hvp).all()):
            raise NonFiniteError(f"one_step_update: client {i} produced non-finite terms")
        terms.append(g_inner - step_size * hvp)
    return w - step_size * np.mean(terms, axis=0)


def fedavg_round(clients, weight: np.ndarray, config: AdaptationConfig):
    """Plain federated averaging round over ranking-loss clients.

    ``clients`` is a list of (market, propagation, seed); each trains its own
    copy of the feature weights from the global value, and the server
    averages the results weighted by train-pair counts. Decoder parameters
    stay local.
    """
    clients = list(clients)
    if not clients:
        raise ValueError("fedavg_round: no clients")
    results = []
    counts = []
    for market, propagation, seed in clients:
        rng = np.random.default_rng(seed)
        res = train_bpr(
            market, propagation, np.array(weight),
            epochs=config.epochs_per_round,
            learning_rate=config.learning_rate,
            rng=rng,
            negatives_per_positive=config.negatives_per_positive,
        )
        results.append(res)
        counts.append(market.train_pairs.shape[0])
    counts = np.asarray(counts, dtype=np.float64)
    stacked = np.stack([r.weight for r in results])
    new_weight = np.tensordot(counts / counts.sum(), stacked, axes=1)
    return new_weight, results
