"""Prototype-based NBNL head: scores, classifier, losses and their gradients.

A descriptor ``z`` is scored against the ``p`` prototypes of class ``y`` by

    omega(z, W_y) = (sum_s max(0, <z, s>)^q)^(1/q)

and an image by averaging ``omega`` within each scale and then across
scales. Arrays use the layout ``W: (k, p, D)``, descriptors ``(n, D)``.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import numerics


@dataclass(frozen=True)
class NbnlConfig:
    k: int
    p: int = 2
    q: float = 10.0

    def __post_init__(self):
        if self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")
        if self.p < 1:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


@dataclass
class PrototypeBank:
    W: np.ndarray
    config: NbnlConfig

    def __post_init__(self):
        c = self.config
        if self.W.ndim != 3 or self.W.shape[:2] != (c.k, c.p):
            raise ValueError(f"prototype array must be ({c.k}, {c.p}, D), got dims {self.W.shape}")

    @property
    def dim(self) -> int:
        return self.W.shape[2]

    def copy(self) -> PrototypeBank:
        return PrototypeBank(self.W.copy(), self.config)


def project_unit_ball(W: np.ndarray) -> np.ndarray:
    """Rescale rows with L2 norm above 1 back onto the sphere (in place)."""
    norms = np.linalg.norm(W, axis=-1, keepdims=True)
    over = norms > 1.0
    if np.any(over):
        np.divide(W, norms, out=W, where=over)
    return W


def init_prototypes(
    descriptors_by_class: Sequence[np.ndarray],
    config: NbnlConfig,
    rng: np.random.Generator,
    sigma: float = 0.01,
    dtype=np.float64,
) -> PrototypeBank:
    """Pick ``p`` random class descriptors per class, jitter them, project."""
    if len(descriptors_by_class) != config.k:
        raise ValueError(f"need descriptors for {config.k} classes, got {len(descriptors_by_class)}")
    rows = []
    for y, pool in enumerate(descriptors_by_class):
        pool = np.atleast_2d(pool)
        if pool.shape[0] == 0:
            raise ValueError(f"no descriptors for class {y}")
        idx = rng.choice(pool.shape[0], size=config.p, replace=pool.shape[0] < config.p)
        rows.append(pool[idx] + rng.normal(0.0, sigma, (config.p, pool.shape[1])))
    W = np.stack(rows).astype(dtype)
    return PrototypeBank(project_unit_ball(W), config)


# ---------------------------------------------------------------------------
# omega
# ---------------------------------------------------------------------------


def _check_q(q: float) -> None:
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")


def _omega_parts(Z: np.ndarray, W: np.ndarray, q: float) -> tuple[np.ndarray, np.ndarray]:
    """Scores ``(n, k)`` and the factors ``(a_s / omega)^(q-1)`` as ``(n, k, p)``.

    The sum is scaled by the largest active term so large ``q`` cannot
    overflow or underflow. The factor is zero wherever the hinge is inactive.
    """
    _check_q(q)
    k, p, d = W.shape
    if Z.shape[-1] != d:
        raise ValueError(f"descriptor dim {Z.shape[-1]} != prototype dim {d}")
    a = np.maximum(Z @ W.reshape(k * p, d).T, 0).reshape(Z.shape[0], k, p)
    top = a.max(axis=2)
    live = ~(top <= 0)  # NaN counts as live so it propagates instead of being masked to 0
    safe_top = np.where(live, top, 1.0)
    ratio = a / safe_top[:, :, None]
    om = np.where(live, safe_top * np.power(np.power(ratio, q).sum(axis=2), 1.0 / q), 0.0)
    safe_om = np.where(live, om, 1.0)
    if q == 1:
        factor = (a > 0).astype(a.dtype)
    else:
        factor = np.power(a / safe_om[:, :, None], q - 1)
    factor = factor * live[:, :, None]
    return om, factor


def omega(z, W_y, q: float) -> float:
    """Score of one descriptor against one class's ``(p, D)`` prototypes."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    W_y = np.atleast_2d(np.asarray(W_y, dtype=np.float64))
    om, _ = _omega_parts(z, W_y[None], q)
    return float(om[0, 0])


def omega_backward(z, W_y, q: float, grad: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """``(d omega/d z, d omega/d W_y)`` scaled by ``grad``; zero where omega is 0."""
    z = np.asarray(z, dtype=np.float64)
    W_y = np.atleast_2d(np.asarray(W_y, dtype=np.float64))
    _, factor = _omega_parts(z.reshape(1, -1), W_y[None], q)
    f = factor[0, 0] * grad
    return f @ W_y, np.outer(f, z)


def omega_scores(Z: np.ndarray, W: np.ndarray, q: float) -> np.ndarray:
    """``omega(z, W_y)`` for every descriptor row and class: ``(n, k)``."""
    return _omega_parts(np.atleast_2d(Z), W, q)[0]


def block_pipeline_scores(grid: np.ndarray, W: np.ndarray, q: float) -> np.ndarray:
    """omega over a ``(D, h, w)`` descriptor grid built from layer primitives.

    1x1 convolution with the ``k*p`` prototypes as filters, ReLU, power
    ``q``, a grouped all-ones convolution summing each class's ``p``
    channels, then power ``1/q``. Returns ``(k, h, w)``.
    """
    _check_q(q)
    k, p, d = W.shape
    filters = W.reshape(k * p, d, 1, 1)
    x = numerics.relu(numerics.conv2d(grid, filters, None, stride=1))
    x = numerics.pow_elem(x, q)
    # grouped conv with fixed ones: group g sees channels [g*p, (g+1)*p)
    ones = np.ones((1, p, 1, 1), dtype=x.dtype)
    summed = np.concatenate(
        [numerics.conv2d(x[g * p : (g + 1) * p], ones, None, stride=1) for g in range(k)], axis=0
    )
    return numerics.pow_elem(summed, 1.0 / q)


# ---------------------------------------------------------------------------
# image-level scores and classifier
# ---------------------------------------------------------------------------


def bar_omega(descriptors, W_y, q: float) -> float:
    """Mean omega over the descriptors of a single scale."""
    Z = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    if Z.shape[0] == 0 or Z.size == 0:
        raise ValueError("scale has no descriptors")
    W_y = np.atleast_2d(np.asarray(W_y, dtype=np.float64))
    return float(omega_scores(Z, W_y[None], q).mean())


def likelihood_h(scales: Sequence, W_y, q: float) -> float:
    """Mean over scales of the per-scale normalized score."""
    if len(scales) == 0:
        raise ValueError("no scales given")
    return float(np.mean([bar_omega(s, W_y, q) for s in scales]))


def class_likelihoods(scales: Sequence, bank: PrototypeBank) -> np.ndarray:
    """``h(x; W_y)`` for every class, shape ``(k,)``."""
    if len(scales) == 0:
        raise ValueError("no scales given")
    per_scale = []
    for s in scales:
        Z = np.atleast_2d(s)
        if Z.shape[0] == 0 or Z.size == 0:
            raise ValueError("scale has no descriptors")
        per_scale.append(omega_scores(Z, bank.W, bank.config.q).mean(axis=0))
    return np.mean(per_scale, axis=0)


def batch_likelihoods(scales: Sequence[np.ndarray], bank: PrototypeBank) -> np.ndarray:
    """``h`` for a batch: ``scales[s]`` is ``(N, eta_s, D)``; returns ``(N, k)``."""
    total = 0.0
    for s in scales:
        n, eta, d = s.shape
        total = total + omega_scores(s.reshape(n * eta, d), bank.W, bank.config.q).reshape(n, eta, -1).mean(
            axis=1
        )
    return total / len(scales)


def classify_nbnl(scales: Sequence, bank: PrototypeBank) -> int:
    """argmax_y h(x; W_y); ``np.argmax`` resolves ties to the lowest label."""
    return int(np.argmax(class_likelihoods(scales, bank)))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def descriptor_loss(u, y: int) -> float:
    """Softmax log-loss ``-u_y + log sum exp(u)``."""
    u = np.asarray(u, dtype=np.float64)
    if not 0 <= y < u.shape[-1]:
        raise ValueError(f"label {y} out of range for {u.shape[-1]} classes")
    return float(-u[y] + numerics.logsumexp(u))


def image_loss(scales: Sequence, bank: PrototypeBank, y: int) -> float:
    """Log-loss of the image-level likelihoods (the quantity the surrogate bounds)."""
    return descriptor_loss(class_likelihoods(scales, bank), y)


def surrogate_batch(
    scales: Sequence[np.ndarray],
    bank: PrototypeBank,
    labels,
    weights=None,
) -> tuple[float, np.ndarray, list[np.ndarray]]:
    """Per-descriptor log-loss averaged within scales, across scales and images.

    ``scales[s]`` is ``(N, eta_s, D)``. Each image's contribution is weighted
    by ``weights`` (default ``1/N``). Returns the loss, the gradient with
    respect to the prototypes, and one ``(N, eta_s, D)`` gradient per scale.
    """
    labels = np.asarray(labels, dtype=int)
    k, q = bank.config.k, bank.config.q
    if np.any((labels < 0) | (labels >= k)):
        raise ValueError(f"label out of range for k={k}")
    n_img = labels.shape[0]
    img_w = np.full(n_img, 1.0 / n_img) if weights is None else np.asarray(weights, dtype=np.float64)
    m = len(scales)
    if m == 0:
        raise ValueError("no scales given")
    W = bank.W
    W_flat = W.reshape(-1, W.shape[2])
    grad_W = np.zeros_like(W)
    grads = []
    total = 0.0
    for s in scales:
        n, eta, d = s.shape
        if n != n_img or eta == 0:
            raise ValueError(f"scale dims {s.shape} inconsistent with {n_img} images")
        Z = s.reshape(n * eta, d)
        om, factor = _omega_parts(Z, W, q)
        y_rep = np.repeat(labels, eta)
        lse = numerics.logsumexp(om, axis=1)
        losses = lse - om[np.arange(n * eta), y_rep]
        w = np.repeat(img_w, eta) / (m * eta)
        total += float(np.dot(w, losses))
        g_u = numerics.softmax(om, axis=1)
        g_u[np.arange(n * eta), y_rep] -= 1.0
        g_u *= w[:, None].astype(g_u.dtype)
        coef = (g_u[:, :, None] * factor).reshape(n * eta, -1)  # (n*eta, k*p)
        grads.append((coef @ W_flat).reshape(n, eta, d))
        grad_W += (coef.T @ Z).reshape(W.shape)
    return total, grad_W, grads


def surrogate_loss(
    scales: Sequence, bank: PrototypeBank, y: int
) -> tuple[float, np.ndarray, list[np.ndarray]]:
    """Jensen upper bound on :func:`image_loss` for one image, with gradients.

    ``scales`` holds one ``(eta_s, D)`` array per scale; the returned
    descriptor gradients have the same shapes.
    """
    batched = [np.atleast_2d(np.asarray(s))[None] for s in scales]
    value, grad_W, grads = surrogate_batch(batched, bank, [y])
    return value, grad_W, [g[0] for g in grads]
