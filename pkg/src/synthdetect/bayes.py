"""The Bayesian decision head and its inference machinery.

The head is a two-layer MLP (feature_dim -> 512 with dropout -> 1) whose
weights carry an isotropic Gaussian prior with precision ``alpha``; outputs
are modeled as Gaussian around the network value with noise precision
``beta``. Point training minimizes the negative unnormalized log posterior
(``map_objective``); the predictive distribution around that point comes from
a Gauss-Newton curvature approximation, giving the input-dependent variance

    var(z) = 1/beta + g^T (alpha*I + beta*H)^{-1} g,   g = d f(z,w) / d w.

A mean-field variational alternative (``elbo``) trains per-weight means and
log-stds by reparameterized sampling; scores are then taken at the q means.

At full scale the head has ~7.9M weights, so the regularized solve uses
conjugate gradients with Hessian-vector products H v = sum_n g_n (g_n . v);
the dense matrix is only formed below a configurable dimension threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .preprocess import NormStats, preprocess_pixels
from .tensor import GradTape, Tensor, backward

DENSE_DIM_LIMIT = 4096
LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(ArithmeticError):
    """An iterative solve or optimization lost its footing."""


class UntrainedModelError(RuntimeError):
    """Scoring requested from a model that never went through training."""


# --- heads -------------------------------------------------------------------


class BayesianHead:
    """Two fully connected layers with dropout between them (no activation:
    the conv stack already squashed features through sigmoids)."""

    def __init__(self, d_in: int, hidden: int = 512, alpha: float = 1e-2,
                 beta: float = 100.0, dropout_rate: float = 0.5,
                 rng: np.random.Generator | None = None):
        if alpha <= 0 or beta <= 0:
            raise ValueError(f"precisions must be positive, got alpha={alpha}, beta={beta}")
        self.d_in = d_in
        self.hidden = hidden
        self.alpha = alpha
        self.beta = beta
        self.dropout_rate = dropout_rate
        self.w1 = Tensor(np.zeros((hidden, d_in)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(np.zeros((1, hidden)), requires_grad=True)
        self.b2 = Tensor(np.zeros(1), requires_grad=True)
        if rng is not None:
            self.xavier_init(rng)

    def xavier_init(self, rng: np.random.Generator) -> None:
        for w in (self.w1, self.w2):
            d_out, d_in = w.shape
            bound = np.sqrt(6.0 / (d_in + d_out))
            w.assign(rng.uniform(-bound, bound, size=w.shape))
        self.b1.assign(np.zeros(self.hidden))
        self.b2.assign(np.zeros(1))

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("fc1.weights", self.w1), ("fc1.bias", self.b1),
                ("fc2.weights", self.w2), ("fc2.bias", self.b2)]

    @property
    def weight_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def forward(self, z, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        return self.forward_with(z, [p for _, p in self.parameters()], training, rng)

    def forward_with(self, z, weights, training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
        w1, b1, w2, b2 = weights
        zt = z if isinstance(z, Tensor) else Tensor(z)
        h = T.linear(zt, w1, b1)
        h = T.dropout(h, self.dropout_rate, training, rng)
        out = T.linear(h, w2, b2)
        return T.reshape(out, (out.shape[0],)) if out.ndim == 2 else out

    def flat_weights(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for _, p in self.parameters()])

    def set_flat_weights(self, vec: np.ndarray) -> None:
        if vec.size != self.weight_count:
            raise ValueError(f"expected {self.weight_count} weights, got {vec.size}")
        pos = 0
        for _, p in self.parameters():
            p.assign(vec[pos:pos + p.size].reshape(p.shape))
            pos += p.size


class LinearHead:
    """Single linear map f(z) = w . z, no bias: the conjugate-regression
    reference point for the curvature machinery."""

    def __init__(self, d_in: int, alpha: float = 1.0, beta: float = 1.0):
        if alpha <= 0 or beta <= 0:
            raise ValueError(f"precisions must be positive, got alpha={alpha}, beta={beta}")
        self.d_in = d_in
        self.alpha = alpha
        self.beta = beta
        self.dropout_rate = 0.0
        self.w = Tensor(np.zeros((1, d_in)), requires_grad=True)
        self._zero_bias = Tensor(np.zeros(1))  # constant, carries no gradient

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("w", self.w)]

    @property
    def weight_count(self) -> int:
        return self.d_in

    def forward(self, z, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        return self.forward_with(z, [self.w], training, rng)

    def forward_with(self, z, weights, training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
        zt = z if isinstance(z, Tensor) else Tensor(z)
        out = T.linear(zt, weights[0], self._zero_bias)
        return T.reshape(out, (out.shape[0],)) if out.ndim == 2 else out

    def flat_weights(self) -> np.ndarray:
        return self.w.data.reshape(-1).copy()

    def set_flat_weights(self, vec: np.ndarray) -> None:
        self.w.assign(vec.reshape(1, self.d_in))


# --- densities and objectives -------------------------------------------------


def log_prior(w: np.ndarray, alpha: float) -> float:
    """log N(w | 0, alpha^-1 I)."""
    if alpha <= 0:
        raise ValueError(f"prior precision must be positive, got {alpha}")
    w = np.asarray(w, dtype=np.float64)
    return 0.5 * w.size * (math.log(alpha) - LOG_2PI) - 0.5 * alpha * float(w @ w)


def log_likelihood(targets: np.ndarray, outputs: np.ndarray, beta: float) -> float:
    """Sum over samples of log N(y_n | f_n, beta^-1)."""
    if beta <= 0:
        raise ValueError(f"noise precision must be positive, got {beta}")
    targets = np.asarray(targets, dtype=np.float64)
    outputs = np.asarray(outputs, dtype=np.float64)
    if targets.shape != outputs.shape:
        raise ValueError(f"targets {targets.shape} and outputs {outputs.shape} differ")
    resid = targets - outputs
    n = targets.size
    return 0.5 * n * (math.log(beta) - LOG_2PI) - 0.5 * beta * float(resid @ resid)


def map_objective(outputs: Tensor, targets: np.ndarray,
                  prior_params: list[Tensor], alpha: float, beta: float) -> Tensor:
    """Negative unnormalized log posterior: -log_likelihood - log_prior.

    ``outputs`` must be recorded on an active tape; gradients then reach both
    the feature extractor (through the likelihood) and the prior-covered head
    weights.
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError(f"precisions must be positive, got alpha={alpha}, beta={beta}")
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != outputs.shape:
        raise T.ShapeError(f"targets {targets.shape} / outputs {outputs.shape} mismatch")
    resid = outputs - targets
    sse = T.sum_all(resid * resid)
    w_dim = sum(p.size for p in prior_params)
    sq_norm = None
    for p in prior_params:
        term = T.sum_all(p * p)
        sq_norm = term if sq_norm is None else sq_norm + term
    n = targets.size
    const = (-0.5 * n * (math.log(beta) - LOG_2PI)
             - 0.5 * w_dim * (math.log(alpha) - LOG_2PI))
    obj = 0.5 * beta * sse + const
    if sq_norm is not None:
        obj = obj + 0.5 * alpha * sq_norm
    return obj


# --- Gauss-Newton curvature and solves -----------------------------------------


def head_weight_gradient(head, z_row: np.ndarray) -> np.ndarray:
    """Flat gradient of the scalar output w.r.t. the head weights (inference
    mode: dropout off), evaluated at the current weights."""
    with GradTape() as tape:
        out = head.forward(np.asarray(z_row)[None, :], training=False)
        loss = T.sum_all(out)
    grads = backward(loss, tape)
    return np.concatenate([grads[p.uid].reshape(-1) for _, p in head.parameters()])


def per_sample_gradients(head, features: np.ndarray) -> np.ndarray:
    """Rows g_n = grad_w f(z_n, w) for each feature row, as [N, W]."""
    features = np.asarray(features, dtype=np.float64)
    return np.stack([head_weight_gradient(head, row) for row in features])


class GaussNewtonCurvature:
    """H = sum_n g_n g_n^T over a batch of feature rows, held as an operator.

    The per-sample gradient block is cached when N*W stays under
    ``cache_limit`` elements; otherwise every matvec recomputes gradients
    blockwise so H is never materialized at full scale.
    """

    def __init__(self, head, features: np.ndarray, block_size: int = 256,
                 cache_limit: int = 2 ** 25):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValueError(f"need a non-empty [N, d] feature batch, got {features.shape}")
        self.head = head
        self.features = features
        self.block_size = block_size
        self.dim = head.weight_count
        self._cached: np.ndarray | None = None
        if features.shape[0] * self.dim <= cache_limit:
            self._cached = per_sample_gradients(head, features)

    def _blocks(self):
        if self._cached is not None:
            yield self._cached
            return
        for start in range(0, self.features.shape[0], self.block_size):
            yield per_sample_gradients(self.head, self.features[start:start + self.block_size])

    def matvec(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros(self.dim)
        for G in self._blocks():
            out += G.T @ (G @ v)
        return out

    def dense(self, limit: int = DENSE_DIM_LIMIT) -> np.ndarray:
        if self.dim > limit:
            raise ValueError(f"refusing to materialize {self.dim}x{self.dim} curvature (limit {limit})")
        H = np.zeros((self.dim, self.dim))
        for G in self._blocks():
            H += G.T @ G
        return H


def cg_solve(matvec, b: np.ndarray, rtol: float = 1e-12,
             max_iter: int | None = None) -> np.ndarray:
    """Conjugate gradients for SPD systems; raises if the residual never
    reaches 1e-6 of ||b|| within the iteration budget."""
    b = np.asarray(b, dtype=np.float64)
    n = b.size
    if max_iter is None:
        max_iter = max(10 * n, 100)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rtr = float(r @ r)
    bnorm = math.sqrt(float(b @ b))
    if bnorm == 0.0:
        return x
    tol = rtol * bnorm
    for _ in range(max_iter):
        if math.sqrt(rtr) <= tol:
            break
        Ap = matvec(p)
        denom = float(p @ Ap)
        if denom <= 0.0:
            raise NumericalError("conjugate gradients met a non-positive curvature direction")
        step = rtr / denom
        x += step * p
        r -= step * Ap
        rtr_new = float(r @ r)
        p = r + (rtr_new / rtr) * p
        rtr = rtr_new
    if math.sqrt(rtr) > 1e-6 * bnorm:
        raise NumericalError(f"conjugate gradients stalled at residual {math.sqrt(rtr):.3e}")
    return x


def solve_regularized(curvature: GaussNewtonCurvature, alpha: float, beta: float,
                      b: np.ndarray, method: str = "cg") -> np.ndarray:
    """x = (alpha*I + beta*H)^-1 b."""
    if method == "dense":
        A = alpha * np.eye(curvature.dim) + beta * curvature.dense()
        return np.linalg.solve(A, b)
    if method == "cg":
        return cg_solve(lambda v: alpha * v + beta * curvature.matvec(v), b)
    raise ValueError(f"unknown solve method {method!r}")


def predictive(z_row: np.ndarray, head, curvature: GaussNewtonCurvature,
               method: str = "cg") -> tuple[float, float]:
    """Gaussian predictive (mean, variance) at one feature vector.

    Mean is the inference-mode network output at the current weights; the
    variance adds the weight-uncertainty quadratic form to the noise floor
    1/beta, so it can never fall below 1/beta.
    """
    z_row = np.asarray(z_row, dtype=np.float64)
    mean = float(head.forward(z_row[None, :], training=False).data[0])
    g = head_weight_gradient(head, z_row)
    u = solve_regularized(curvature, head.alpha, head.beta, g, method=method)
    var = 1.0 / head.beta + float(g @ u)
    return mean, var


# --- variational path ----------------------------------------------------------


class VariationalPosterior:
    """Mean-field Gaussian over the head weights: one (mean, log_std) pair per
    weight, stored per parameter tensor. Standard deviations are exp(log_std),
    hence strictly positive after any update."""

    def __init__(self, head, rng: np.random.Generator | None = None,
                 init_log_std: float = -4.0):
        self.head = head
        self.means: list[Tensor] = []
        self.log_stds: list[Tensor] = []
        for _, p in head.parameters():
            self.means.append(Tensor(p.data, requires_grad=True))
            self.log_stds.append(Tensor(np.full(p.shape, init_log_std), requires_grad=True))
        if rng is not None:
            # keep whatever initialization the head carried; only q widths reset
            pass

    def parameters(self) -> list[Tensor]:
        return [*self.means, *self.log_stds]

    def sample_weights(self, rng: np.random.Generator) -> list[Tensor]:
        drawn = []
        for m, ls in zip(self.means, self.log_stds):
            eps = rng.standard_normal(m.shape)
            drawn.append(m + T.exp(ls) * eps)
        return drawn

    def mean_weights_flat(self) -> np.ndarray:
        return np.concatenate([m.data.reshape(-1) for m in self.means])

    def stds_flat(self) -> np.ndarray:
        return np.concatenate([np.exp(ls.data).reshape(-1) for ls in self.log_stds])


def kl_to_prior(q: VariationalPosterior, alpha: float) -> Tensor:
    """Closed-form KL( q || N(0, alpha^-1 I) ), summed over all weights."""
    if alpha <= 0:
        raise ValueError(f"prior precision must be positive, got {alpha}")
    total = None
    count = 0
    for m, ls in zip(q.means, q.log_stds):
        count += m.size
        sigma2 = T.exp(ls * 2.0)
        term = T.sum_all(sigma2 * (0.5 * alpha)) + T.sum_all(m * m * (0.5 * alpha)) \
            - T.sum_all(ls)
        total = term if total is None else total + term
    return total + (-0.5 * math.log(alpha) - 0.5) * count


def elbo(head, q: VariationalPosterior, features, targets: np.ndarray,
         alpha: float, beta: float, n_mc: int, rng: np.random.Generator,
         training: bool = False, dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Monte-Carlo evidence lower bound E_q[log p(D|w)] - KL(q || prior).

    Sampling is reparameterized, so gradients reach the q means and log-stds
    (and, when ``features`` is a recorded tensor, the extractor beneath it).
    """
    if n_mc < 1:
        raise ValueError("need at least one Monte-Carlo sample")
    targets = np.asarray(targets, dtype=np.float64)
    n = targets.size
    loglik = None
    for _ in range(n_mc):
        weights = q.sample_weights(rng)
        out = head.forward_with(features, weights, training=training, rng=dropout_rng)
        resid = out - targets
        term = T.sum_all(resid * resid) * (-0.5 * beta) \
            + 0.5 * n * (math.log(beta) - LOG_2PI)
        loglik = term if loglik is None else loglik + term
    return loglik * (1.0 / n_mc) - kl_to_prior(q, alpha)


# --- scoring bundle --------------------------------------------------------------


@dataclass
class Detector:
    """Everything needed to score raw pixels: extractor, head, normalization
    statistics, the stored decision threshold, and the training mode used."""

    cnn: "FineToCoarseCnn"
    head: BayesianHead
    norm: NormStats | None = None
    gamma: float | None = None
    mode: str = "map"
    trained: bool = False

    def preprocess(self, pixels: np.ndarray) -> np.ndarray:
        if self.norm is None:
            raise UntrainedModelError("no normalization statistics; train first")
        return preprocess_pixels(pixels, self.cnn.config.input_size, self.norm)

    def score_batch(self, pixel_list) -> np.ndarray:
        """Posterior scores (predictive means, inference mode) for raw images."""
        if not self.trained:
            raise UntrainedModelError("cannot score with an untrained model")
        batch = np.stack([self.preprocess(p) for p in pixel_list])
        z = self.cnn.forward_features(Tensor(batch), training=False)
        return self.head.forward(z, training=False).data.copy()

    def score_pixels(self, pixels: np.ndarray) -> float:
        return float(self.score_batch([pixels])[0])

    def curvature_from_pixels(self, pixel_list, block_size: int = 256) -> GaussNewtonCurvature:
        batch = np.stack([self.preprocess(p) for p in pixel_list])
        z = self.cnn.forward_features(Tensor(batch), training=False)
        return GaussNewtonCurvature(self.head, z.data, block_size=block_size)


def posterior_score(pixels: np.ndarray, detector: Detector) -> float:
    """The scalar a threshold is applied to: the predictive mean at the
    trained weights (q means under variational training)."""
    return detector.score_pixels(pixels)
