"""Transductive fine-tuning solver over fixed, precomputed features.

The classifier is a set of per-class prototypes scored by a distance
softmax: p(c | x) = softmax_c(-(tau/2) * ||theta_c - x'||^2). Fine-tuning
minimizes a weighted sum of three terms,

    lambda_ce * (support cross-entropy)
  + alpha_cond * (mean query posterior entropy)
  + sum_c marginal_c * log(marginal_c),

so confident query predictions are rewarded while a collapse onto a single
class is penalized through the query-marginal term.

From iteration ``transform_start`` onward the features x' are the
unit-normalized outputs of the norm-induced map (variant "ft_tim") or of a
plain linear map (variant "linear_transform"); before that, and always for
variant "tim_baseline", x' is the unit-normalized input feature. Gradients
are exact and flow through the map and its post-normalization.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .features import (
    DegenerateVectorError,
    Episode,
    FeatureBank,
    l2_normalize_rows,
    load_feature_bank,
    write_feature_bank,
)
from .transform import init_transform, norm_induced_map

VARIANTS = ("ft_tim", "tim_baseline", "linear_transform")
UPDATE_RULES = ("plain_gradient", "adaptive_moment")

# Clamp probabilities here before taking logs: keeps -inf out of the loss
# without measurably moving 64-bit gradients.
PROB_FLOOR = 1e-300


class EpisodeFailure(RuntimeError):
    """The solver aborted an episode (degenerate transform or non-finite math)."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class TimConfig:
    """All solver hyperparameters. Defaults follow the standard fine-tuning
    recipe: the transform matrix trains at 0.01 starting from iteration 200,
    prototypes train throughout."""

    tau: float = 15.0
    lambda_ce: float = 0.1
    alpha_cond: float = 1.0
    iterations: int = 1000
    transform_start: int = 200
    lr_theta: float = 1e-4
    lr_w: float = 0.01
    update_rule: str = "adaptive_moment"
    variant: str = "ft_tim"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda_ce < 0 or self.alpha_cond < 0:
            raise ValueError("loss weights must be non-negative")
        if self.iterations < 0 or self.transform_start < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.lr_theta <= 0 or self.lr_w <= 0:
            raise ValueError("learning rates must be positive")
        if self.update_rule not in UPDATE_RULES:
            raise ValueError(f"update_rule must be one of {UPDATE_RULES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SolverState:
    """Fitted solver state: prototypes, transform matrix, final query
    posteriors and their class marginal, plus the loss trace."""

    prototypes: np.ndarray
    W: np.ndarray
    posteriors: np.ndarray
    marginal: np.ndarray
    iter: int
    loss_trace: list[tuple[float, float, float]] = field(default_factory=list)


class LossTerms(NamedTuple):
    total: float
    cross_entropy: float
    conditional_entropy: float
    marginal_term: float


class RunResult(NamedTuple):
    predictions: np.ndarray
    state: SolverState
    trace: list[tuple[float, float, float]]


class SemiSupervisedResult(NamedTuple):
    heldout_predictions: np.ndarray
    state: SolverState


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _squared_distances(features: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    f2 = np.einsum("ij,ij->i", features, features)
    p2 = np.einsum("ij,ij->i", prototypes, prototypes)
    d2 = f2[:, None] + p2[None, :] - 2.0 * (features @ prototypes.T)
    return np.maximum(d2, 0.0)


def posteriors(features: np.ndarray, prototypes: np.ndarray, tau: float) -> np.ndarray:
    """Distance-softmax class posteriors, one simplex row per feature row."""
    return _softmax_rows(-(tau / 2.0) * _squared_distances(features, prototypes))


def transform_active(iteration: int, config: TimConfig) -> bool:
    return config.variant != "tim_baseline" and iteration >= config.transform_start


def _pipeline(
    X: np.ndarray, W: np.ndarray, active: bool, variant: str
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Features fed to the classifier: (z, raw, raw_norms).

    raw and raw_norms are None when the transform is inactive (z is then the
    input itself, assumed unit-normalized).
    """
    if not active:
        return X, None, None
    if variant == "linear_transform":
        raw = X @ W.T
    else:
        raw = norm_induced_map(X, W)
    norms = np.linalg.norm(raw, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateVectorError(
            f"transformed feature {int(zero[0])} is the zero vector"
        )
    return raw / norms[:, None], raw, norms


def _init_prototypes(support_x: np.ndarray, labels: np.ndarray, C: int) -> np.ndarray:
    # one-shot: the normalized support feature itself; multi-shot: class mean
    theta = np.empty((C, support_x.shape[1]))
    for c in range(C):
        theta[c] = support_x[labels == c].mean(axis=0)
    return theta


def _loss_terms(
    p_support: np.ndarray,
    labels: np.ndarray,
    p_query: np.ndarray,
    config: TimConfig,
) -> LossTerms:
    ns = p_support.shape[0]
    nq = p_query.shape[0]
    picked = np.maximum(p_support[np.arange(ns), labels], PROB_FLOOR)
    ce = -(config.lambda_ce / ns) * float(np.sum(np.log(picked)))
    logq = np.log(np.maximum(p_query, PROB_FLOOR))
    cond = -(config.alpha_cond / nq) * float(np.sum(p_query * logq))
    marginal = p_query.mean(axis=0)
    marg = float(np.sum(marginal * np.log(np.maximum(marginal, PROB_FLOOR))))
    return LossTerms(ce + cond + marg, ce, cond, marg)


def _logit_grads(
    p_support: np.ndarray,
    labels: np.ndarray,
    p_query: np.ndarray,
    config: TimConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """d(loss)/d(logits) for support rows and query rows."""
    ns, C = p_support.shape
    nq = p_query.shape[0]
    onehot = np.zeros((ns, C))
    onehot[np.arange(ns), labels] = 1.0
    g_support = (config.lambda_ce / ns) * (p_support - onehot)

    logq = np.log(np.maximum(p_query, PROB_FLOOR))
    row_entropy = -np.sum(p_query * logq, axis=1)
    g_cond = (config.alpha_cond / nq) * p_query * (-logq - row_entropy[:, None])

    log_marginal = np.log(np.maximum(p_query.mean(axis=0), PROB_FLOOR)) / nq
    g_marg = p_query * (log_marginal[None, :] - (p_query @ log_marginal)[:, None])
    return g_support, g_cond + g_marg


def _param_grads(
    G: np.ndarray, z: np.ndarray, theta: np.ndarray, tau: float
) -> tuple[np.ndarray, np.ndarray]:
    """Map logit gradients to (d loss/d theta, d loss/d z).

    The logit is -(tau/2)||theta_c - z_i||^2, so d/d theta_c = -tau (theta_c - z_i)
    and d/d z_i = tau (theta_c - z_i).
    """
    col = G.sum(axis=0)
    grad_theta = -tau * (col[:, None] * theta - G.T @ z)
    row = G.sum(axis=1)
    grad_z = tau * (G @ theta - row[:, None] * z)
    return grad_theta, grad_z


def _grad_through_normalization(
    grad_z: np.ndarray, raw: np.ndarray, norms: np.ndarray
) -> np.ndarray:
    # z = r/||r||  =>  J^T g = g/||r|| - r (r.g)/||r||^3
    dot = np.sum(raw * grad_z, axis=1, keepdims=True)
    n = norms[:, None]
    return grad_z / n - raw * (dot / n**3)


def _grad_w(
    grad_raw: np.ndarray, X: np.ndarray, W: np.ndarray, variant: str
) -> np.ndarray:
    if variant == "linear_transform":
        return grad_raw.T @ X
    # raw[i, j] = -0.5||x_i - w_j||^2: d raw[i, j]/d w_j = x_i - w_j
    col = grad_raw.sum(axis=0)
    return grad_raw.T @ X - col[:, None] * W


def _episode_arrays(episode: Episode) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    support_x, labels, query_x = episode.solver_inputs()
    return (
        l2_normalize_rows(support_x),
        np.asarray(labels, dtype=np.int64),
        l2_normalize_rows(query_x),
    )


def tim_loss(episode: Episode, state: SolverState, config: TimConfig) -> LossTerms:
    """Loss terms at the given state, using the representation in effect
    at ``state.iter`` (raw before transform_start, transformed after)."""
    sx, labels, qx = _episode_arrays(episode)
    active = transform_active(state.iter, config)
    X = np.vstack([sx, qx])
    z, _, _ = _pipeline(X, state.W, active, config.variant)
    ns = sx.shape[0]
    p = posteriors(z, state.prototypes, config.tau)
    return _loss_terms(p[:ns], labels, p[ns:], config)


def tim_gradients(
    episode: Episode, state: SolverState, config: TimConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of the total loss w.r.t. prototypes and W.

    The W gradient is the zero matrix whenever the transform is inactive at
    ``state.iter`` (and always for variant "tim_baseline").
    """
    sx, labels, qx = _episode_arrays(episode)
    active = transform_active(state.iter, config)
    X = np.vstack([sx, qx])
    z, raw, norms = _pipeline(X, state.W, active, config.variant)
    ns = sx.shape[0]
    p = posteriors(z, state.prototypes, config.tau)
    p_s, p_q = p[:ns], p[ns:]
    g_s, g_q = _logit_grads(p_s, labels, p_q, config)
    G = np.vstack([g_s, g_q])
    grad_theta, grad_z = _param_grads(G, z, state.prototypes, config.tau)
    if active:
        grad_raw = _grad_through_normalization(grad_z, raw, norms)
        grad_W = _grad_w(grad_raw, X, state.W, config.variant)
    else:
        grad_W = np.zeros_like(state.W)
    if not (np.all(np.isfinite(grad_theta)) and np.all(np.isfinite(grad_W))):
        raise EpisodeFailure("non-finite gradient", iteration=state.iter)
    return grad_theta, grad_W


class _Adam:
    """Standard adaptive-moment updater for one parameter group."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)


def run_ft_tim(
    episode: Episode,
    config: TimConfig,
    on_iteration: Callable[[int, np.ndarray, LossTerms], None] | None = None,
) -> RunResult:
    """Run the full inference loop on one episode.

    Performs ``config.iterations`` update iterations (W first, then
    prototypes, from gradients computed once per iteration), then scores the
    queries in a final pass. The loss trace has iterations + 1 entries of
    (cross_entropy, conditional_entropy, marginal_term); entry j is the loss
    after j updates. Deterministic for a fixed (episode, config).

    Raises:
        EpisodeFailure: on a degenerate transform output or non-finite
            gradient; carries the failing iteration.
    """
    sx, labels, qx = _episode_arrays(episode)
    C = episode.num_classes
    ns = sx.shape[0]
    X = np.vstack([sx, qx])
    theta = _init_prototypes(sx, labels, C)
    W = init_transform(sx, mode="gram")
    adam_theta = _Adam(theta.shape) if config.update_rule == "adaptive_moment" else None
    adam_w = _Adam(W.shape) if config.update_rule == "adaptive_moment" else None
    trace: list[tuple[float, float, float]] = []

    def features(iteration: int):
        try:
            return _pipeline(X, W, transform_active(iteration, config), config.variant)
        except DegenerateVectorError as exc:
            raise EpisodeFailure(str(exc), iteration=iteration) from exc

    for it in range(config.iterations):
        active = transform_active(it, config)
        z, raw, norms = features(it)
        p = posteriors(z, theta, config.tau)
        p_s, p_q = p[:ns], p[ns:]
        terms = _loss_terms(p_s, labels, p_q, config)
        trace.append((terms.cross_entropy, terms.conditional_entropy,
                      terms.marginal_term))
        if on_iteration is not None:
            on_iteration(it, p_q, terms)

        g_s, g_q = _logit_grads(p_s, labels, p_q, config)
        G = np.vstack([g_s, g_q])
        grad_theta, grad_z = _param_grads(G, z, theta, config.tau)
        if not np.all(np.isfinite(grad_theta)):
            raise EpisodeFailure("non-finite prototype gradient", iteration=it)
        if active:
            grad_raw = _grad_through_normalization(grad_z, raw, norms)
            grad_W = _grad_w(grad_raw, X, W, config.variant)
            if not np.all(np.isfinite(grad_W)):
                raise EpisodeFailure("non-finite transform gradient", iteration=it)
            if adam_w is not None:
                W = W - adam_w.step(grad_W, config.lr_w)
            else:
                W = W - config.lr_w * grad_W
        if adam_theta is not None:
            theta = theta - adam_theta.step(grad_theta, config.lr_theta)
        else:
            theta = theta - config.lr_theta * grad_theta

    # scoring pass at iteration index `iterations`
    z, _, _ = features(config.iterations)
    p = posteriors(z, theta, config.tau)
    p_s, p_q = p[:ns], p[ns:]
    terms = _loss_terms(p_s, labels, p_q, config)
    trace.append((terms.cross_entropy, terms.conditional_entropy,
                  terms.marginal_term))
    state = SolverState(
        prototypes=theta,
        W=W,
        posteriors=p_q,
        marginal=p_q.mean(axis=0),
        iter=config.iterations,
        loss_trace=trace,
    )
    return RunResult(np.argmax(p_q, axis=1), state, trace)


def predict_features(
    vectors: np.ndarray, state: SolverState, config: TimConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Classify new vectors through a fitted state's pipeline.

    Returns (predicted labels, posterior rows)."""
    x = l2_normalize_rows(vectors)
    z, _, _ = _pipeline(x, state.W, transform_active(state.iter, config),
                        config.variant)
    p = posteriors(z, state.prototypes, config.tau)
    return np.argmax(p, axis=1), p


def run_semi_supervised(episode: Episode, config: TimConfig) -> SemiSupervisedResult:
    """Fit on support plus unlabeled queries, then classify the held-out split.

    Raises:
        ValueError: if the episode has no held-out split.
    """
    if episode.heldout_vectors is None or len(episode.heldout_vectors) == 0:
        raise ValueError("episode has no held-out split")
    result = run_ft_tim(episode, config)
    preds, _ = predict_features(episode.heldout_vectors, result.state, config)
    return SemiSupervisedResult(preds, result.state)


def save_checkpoint(state: SolverState, directory: str | Path) -> None:
    """Dump W, prototypes (feature-table files) and the loss trace (JSON)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d = state.W.shape[0]
    write_feature_bank(
        FeatureBank(dim=d, class_ids=np.arange(d), vectors=state.W),
        directory / "transform.csv",
    )
    write_feature_bank(
        FeatureBank(
            dim=state.prototypes.shape[1],
            class_ids=np.arange(state.prototypes.shape[0]),
            vectors=state.prototypes,
        ),
        directory / "prototypes.csv",
    )
    payload = {
        "iterations": state.iter,
        "loss_trace": [list(t) for t in state.loss_trace],
    }
    (directory / "trace.json").write_text(
        json.dumps(payload, indent=2) + "\n", encoding="utf-8"
    )


def load_checkpoint(directory: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Load (W, prototypes, trace payload) written by :func:`save_checkpoint`."""
    directory = Path(directory)
    W = load_feature_bank(directory / "transform.csv").vectors
    prototypes = load_feature_bank(directory / "prototypes.csv").vectors
    payload = json.loads((directory / "trace.json").read_text(encoding="utf-8"))
    return W, prototypes, payload
