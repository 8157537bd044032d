"""Central finite-difference checks of the hand-written backward passes.

Everything runs in float64. The error of one trial is
``|analytic - numeric| / max(|analytic|, |numeric|)`` over a random subset
of coordinates (vector norms); :func:`grad_check` reports the worst trial.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from . import nbnl, numerics
from .fcn import ConvLayerSpec, FcnModel, FcnTopology, ScalePyramidConfig, fcn_backward, fcn_forward
from .nbnl import NbnlConfig, PrototypeBank
from .training import batch_loss_and_grads

STEP = 1e-5
COMPONENTS = ("linear", "batch_norm", "omega", "surrogate", "fcn_layers", "full")
DEFAULT_TOLERANCES = {
    "linear": 1e-9,
    "batch_norm": 1e-5,
    "omega": 1e-5,
    "surrogate": 1e-5,
    "fcn_layers": 1e-4,
    "full": 1e-4,
}


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f: Callable[[], float], x: np.ndarray, coords: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to flat ``coords`` of ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    out = np.empty(len(coords))
    for j, c in enumerate(coords):
        old = flat[c]
        flat[c] = old + step
        fp = f()
        flat[c] = old - step
        fm = f()
        flat[c] = old
        out[j] = (fp - fm) / (2 * step)
    return out


def _coords(rng, x, limit=24):
    return rng.choice(x.size, size=min(limit, x.size), replace=False)


def _compare(rng, f, pairs) -> float:
    """``pairs``: (tensor, analytic grad). Stacks the sampled coordinates of all tensors."""
    analytic, numeric = [], []
    for x, g in pairs:
        c = _coords(rng, x)
        analytic.append(np.ravel(g)[c])
        numeric.append(numeric_grad(f, x, c))
    return relative_error(np.concatenate(analytic), np.concatenate(numeric))


def tiny_topology(normalize: bool = True, batch_norm: bool = True) -> FcnTopology:
    return FcnTopology(
        (ConvLayerSpec(3, 1, 2, 4), ConvLayerSpec(3, 2, 4, 5), ConvLayerSpec(1, 1, 5, 6, relu=False)),
        normalize,
        batch_norm,
    )


# ---------------------------------------------------------------------------
# per-component trials
# ---------------------------------------------------------------------------


def _trial_linear(rng):
    c, o, k, s = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 3)
    x = rng.standard_normal((2, c, k + rng.integers(0, 5), k + rng.integers(0, 5)))
    w = rng.standard_normal((o, c, k, k))
    b = rng.standard_normal(o)
    G = rng.standard_normal(numerics.conv2d(x, w, b, s).shape)
    f = lambda: float((G * numerics.conv2d(x, w, b, s)).sum())
    gx, gw, gb = numerics.conv2d_backward(G, x, w, s)
    return _compare(rng, f, [(x, gx), (w, gw), (b, gb)])


def _trial_batch_norm(rng):
    n, d = rng.integers(2, 9), rng.integers(1, 5)
    x = rng.standard_normal((n, d)) * rng.uniform(0.5, 3) + rng.uniform(-2, 2)
    state = numerics.BatchNormState.create(d)
    state.gamma[:] = rng.uniform(0.5, 2, d)
    state.beta[:] = rng.standard_normal(d)
    G = rng.standard_normal((n, d))
    f = lambda: float((G * numerics.batch_norm(x, state.copy(), "train")[0]).sum())
    _, cache = numerics.batch_norm(x, state.copy(), "train")
    gx, gg, gb = numerics.batch_norm_backward(G, cache)
    return _compare(rng, f, [(x, gx), (state.gamma, gg), (state.beta, gb)])


def _trial_omega(rng):
    d, p = rng.integers(2, 9), rng.integers(1, 5)
    q = float(rng.choice([1, 2, 4, 10]))
    z = rng.standard_normal(d)
    W = rng.standard_normal((p, d))
    W[0] = np.abs(W[0]) * np.sign(z)  # at least one active hinge
    gz, gW = nbnl.omega_backward(z, W, q)
    f = lambda: nbnl.omega(z, W, q)
    return _compare(rng, f, [(z, gz), (W, gW)])


def _trial_surrogate(rng):
    k, p, d = rng.integers(2, 5), rng.integers(1, 4), rng.integers(2, 7)
    q = float(rng.choice([1, 2, 4, 10]))
    m = rng.integers(1, 4)
    scales = [rng.standard_normal((rng.integers(1, 6), d)) * 0.6 for _ in range(m)]
    bank = PrototypeBank(rng.standard_normal((k, p, d)) * 0.6, NbnlConfig(int(k), int(p), q))
    y = int(rng.integers(0, k))
    _, gW, gZ = nbnl.surrogate_loss(scales, bank, y)
    f = lambda: nbnl.surrogate_loss(scales, bank, y)[0]
    return _compare(rng, f, [(bank.W, gW)] + list(zip(scales, gZ)))


def _tiny_model(rng, normalize=True, batch_norm=True) -> FcnModel:
    topo = tiny_topology(normalize, batch_norm)
    model = FcnModel.init(topo, rng, ScalePyramidConfig((1.0, 1.5), 8), dtype=np.float64)
    for b in model.biases:
        b[:] = rng.standard_normal(b.shape) * 0.1
    if model.bn is not None:
        model.bn.gamma[:] = rng.uniform(0.5, 1.5, model.bn.gamma.shape)
        model.bn.beta[:] = rng.standard_normal(model.bn.beta.shape) * 0.1
    return model


KINK_MARGIN = 1e-3


def _relu_margin(model: FcnModel, x: np.ndarray) -> float:
    """Smallest |pre-activation| feeding a ReLU; finite differences straddling a kink are meaningless."""
    _, cache = fcn_forward(model, x, train=True)
    margins = [np.abs(a).min() for spec, a in zip(model.topology.layers, cache.pre_activations) if spec.relu]
    return min(margins, default=np.inf)


def _hinge_margin(model: FcnModel, x: np.ndarray, W: np.ndarray) -> float:
    """Smallest |<z, s>| between descriptors and prototypes (the omega hinge)."""
    z, _ = fcn_forward(model, x, train=True)
    return float(np.abs(z.reshape(-1, W.shape[2]) @ W.reshape(-1, W.shape[2]).T).min())


def _draw_clear_of_kinks(rng, model, draw, W=None):
    while True:
        x = draw()
        xs = x if isinstance(x, list) else [x]
        if all(_relu_margin(model, xi) > KINK_MARGIN for xi in xs) and (
            W is None or all(_hinge_margin(model, xi, W) > KINK_MARGIN for xi in xs)
        ):
            return x


def _trial_fcn_layers(rng):
    model = _tiny_model(rng, normalize=bool(rng.integers(0, 2)), batch_norm=bool(rng.integers(0, 2)))
    x = _draw_clear_of_kinks(rng, model, lambda: rng.standard_normal((2, 2, 9, 9)))
    out, cache = fcn_forward(model, x, train=True)
    G = rng.standard_normal(out.shape)
    grads = fcn_backward(model, G, cache)
    f = lambda: float((G * fcn_forward(model, x, train=True)[0]).sum())
    params = model.parameters()
    # one check per layer: a bias feeding batch norm alone has an exactly zero gradient
    groups: dict[str, list] = {}
    for name in params:
        groups.setdefault(name.rsplit(".", 1)[0], []).append((params[name], grads[name]))
    return max(_compare(rng, f, pairs) for pairs in groups.values())


def _trial_full(rng):
    model = _tiny_model(rng)
    k = 3
    bank = PrototypeBank(
        nbnl.project_unit_ball(rng.standard_normal((k, 2, model.topology.descriptor_dim))),
        NbnlConfig(k, 2, float(rng.choice([2, 4, 10]))),
    )
    scaled = _draw_clear_of_kinks(
        rng, model, lambda: [rng.uniform(0, 1, (3, 2, r, r)) for r in model.pyramid.resolutions()], bank.W
    )
    labels = rng.integers(0, k, 3)
    _, grads, gW = batch_loss_and_grads(model, bank, scaled, labels)
    f = lambda: batch_loss_and_grads(model, bank, scaled, labels)[0]
    params = model.parameters()
    return _compare(rng, f, [(bank.W, gW)] + [(params[n], grads[n]) for n in params])


_TRIALS = {
    "linear": _trial_linear,
    "batch_norm": _trial_batch_norm,
    "omega": _trial_omega,
    "surrogate": _trial_surrogate,
    "fcn_layers": _trial_fcn_layers,
    "full": _trial_full,
}


def grad_check(component: str, trials: int = 20, seed: int = 0) -> float:
    """Worst relative error between analytic and finite-difference gradients."""
    if component not in _TRIALS:
        raise ValueError(f"unknown component {component!r}; choose from {', '.join(COMPONENTS)}")
    rng = np.random.default_rng(seed)
    return max(_TRIALS[component](rng) for _ in range(trials))
