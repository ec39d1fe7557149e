"""Central finite differences and the gradient-check registry.

Checks run in float64 so the numeric side has headroom over the float32
training path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from volnet import ops
from volnet.tensor import Tape, Tensor

TOLERANCE = 1e-3


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-3, coords=None) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64).

    ``coords`` restricts evaluation to the given flat indices; other entries
    are left at zero.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size) if coords is None else coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Tensor(base)))
        flat[i] = orig - h
        fm = _scalar(f(Tensor(base)))
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return Tensor(grad.reshape(base.shape))


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max over coordinates of ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: list[np.ndarray],
    h: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Compare tape gradients of ``fn(*inputs)`` to central differences.

    Returns the max relative error over all inputs (and over at most
    ``max_coords`` randomly chosen coordinates per input).
    """
    rng = np.random.default_rng(seed)
    leaves = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in inputs]
    with Tape() as tape:
        loss = fn(*leaves)
    grads = tape.backward(loss)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        g = grads.grad_of(leaf)
        analytic = np.zeros(leaf.shape) if g is None else g.data
        coords = None
        if max_coords is not None and leaf.size > max_coords:
            coords = rng.choice(leaf.size, size=max_coords, replace=False)

        def f(t, k=k):
            args = [t if j == k else Tensor(leaves[j].data) for j in range(len(leaves))]
            return fn(*args)

        numeric = finite_diff_grad(f, leaf, h=h, coords=coords).data
        if coords is not None:
            analytic = analytic.reshape(-1)[coords]
            numeric = numeric.reshape(-1)[coords]
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _rand(rng, *shape):
    return rng.uniform(-1, 1, size=shape)


def _away_from_zero(rng, *shape, margin=0.05):
    x = _rand(rng, *shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


# -- registry ----------------------------------------------------------------
# Each check takes a seed and returns the max relative error. Ops are looked up
# through their modules at call time so a patched kernel is what gets checked.

def _check_add(seed):
    rng = np.random.default_rng(seed)
    return check_gradients(lambda a, b: ops.sum_(ops.mul(ops.add(a, b), ops.add(a, b))),
                           [_rand(rng, 2, 3), _rand(rng, 3)], seed=seed)


def _check_mul(seed):
    rng = np.random.default_rng(seed)
    return check_gradients(lambda a, b: ops.sum_(ops.mul(ops.mul(a, b), a)), [_rand(rng, 2, 3), _rand(rng, 3)], seed=seed)


def _check_relu(seed):
    rng = np.random.default_rng(seed)
    w = _rand(rng, 4, 5)
    return check_gradients(lambda x: ops.sum_(ops.mul(ops.relu(x), Tensor(w))), [_away_from_zero(rng, 4, 5)], seed=seed)


def _check_matmul(seed):
    rng = np.random.default_rng(seed)
    w = _rand(rng, 4, 3)
    return check_gradients(lambda a, b: ops.sum_(ops.mul(ops.matmul(a, b), Tensor(w))),
                           [_rand(rng, 4, 5), _rand(rng, 5, 3)], seed=seed)


def _check_conv3d(seed):
    rng = np.random.default_rng(seed)
    w_out = _rand(rng, 2, 3, 4, 2, 2)
    return check_gradients(
        lambda x, w, b: ops.sum_(ops.mul(ops.conv3d(x, w, b, stride=(1, 2, 2), padding=1), Tensor(w_out))),
        [_rand(rng, 2, 2, 4, 4, 3), _rand(rng, 3, 2, 3, 3, 3), _rand(rng, 3)],
        seed=seed,
    )


def _check_pool(seed):
    rng = np.random.default_rng(seed)
    w = _rand(rng, 2, 3)
    return check_gradients(lambda x: ops.sum_(ops.mul(ops.avgpool3d_global(x), Tensor(w))),
                           [_rand(rng, 2, 3, 2, 3, 2)], seed=seed)


def _check_batchnorm(seed, train=True):
    rng = np.random.default_rng(seed)
    w = _rand(rng, 3, 2, 2, 2, 2)
    state = ops.BatchNormState(2)
    state.running_mean[:] = rng.uniform(-0.5, 0.5, 2)
    state.running_var[:] = rng.uniform(0.5, 2.0, 2)
    return check_gradients(
        lambda x, g, b: ops.sum_(ops.mul(ops.batchnorm3d(x, g, b, state, train=train), Tensor(w))),
        [_rand(rng, 3, 2, 2, 2, 2), _rand(rng, 2), _rand(rng, 2)],
        seed=seed,
    )


def _check_softmax(seed):
    rng = np.random.default_rng(seed)
    w = _rand(rng, 3, 5)
    return check_gradients(lambda x: ops.sum_(ops.mul(ops.softmax(x, axis=-1), Tensor(w))), [_rand(rng, 3, 5)], seed=seed)


def _check_plumbing(seed):
    rng = np.random.default_rng(seed)
    w = _rand(rng, 4, 6)

    def f(a, b):
        t = ops.permute(ops.reshape(a, (2, 3, 2)), (2, 0, 1))
        t = ops.reshape(t, (2, 6))
        t = ops.concat([t, ops.reshape(b, (2, 6))], axis=0)
        return ops.sum_(ops.mul(ops.slice_(ops.add(t, t), (slice(0, 4), slice(None))), Tensor(w)))

    return check_gradients(f, [_rand(rng, 12), _rand(rng, 3, 4)], seed=seed)


def _check_bce(seed):
    from volnet import optim

    rng = np.random.default_rng(seed)
    y = Tensor(rng.integers(0, 2, size=6).astype(np.float64))
    return check_gradients(lambda x: optim.bce_with_logits(x, y), [rng.uniform(-10, 10, 6)], seed=seed)


def _check_linear(seed):
    from volnet import layers

    rng = np.random.default_rng(seed)
    w = _rand(rng, 3, 2)
    return check_gradients(lambda x, wt, b: ops.sum_(ops.mul(layers.linear_forward(x, wt, b), Tensor(w))),
                           [_rand(rng, 3, 4), _rand(rng, 4, 2), _rand(rng, 2)], seed=seed)


def _check_mha(seed):
    from volnet import layers

    rng = np.random.default_rng(seed)
    cfg = layers.MHAConfig(num_heads=4, embed_dim=8)
    w = _rand(rng, 2, 5, 8)
    names = ["q_weight", "k_weight", "v_weight", "o_weight", "o_bias"]

    def f(x, wq, wk, wv, wo, bo):
        params = dict(zip(names, (wq, wk, wv, wo, bo)))
        return ops.sum_(ops.mul(layers.mha_forward(x, cfg, params), Tensor(w)))

    inputs = [_rand(rng, 2, 5, 8)] + [_rand(rng, 8, 8) * 0.5 for _ in range(4)] + [_rand(rng, 8)]
    return check_gradients(f, inputs, seed=seed)


def _check_block(seed, stride=2):
    from volnet import layers

    rng = np.random.default_rng(seed)
    cin, cout = 2, (3 if stride == 2 else 2)
    cfg = layers.BlockConfig(cin, cout, stride)
    specs = layers.block_param_specs(cfg)
    states = {name: ops.BatchNormState(n) for name, n in layers.block_bn_specs(cfg)}
    names = [s.name for s in specs]
    x0 = _rand(rng, 2, cin, 4, 4, 4)
    out_sp = 4 // stride
    w = _rand(rng, 2, cout, out_sp, out_sp, out_sp)

    def f(x, *vals):
        params = dict(zip(names, vals))
        return ops.sum_(ops.mul(layers.basic_block_forward(x, cfg, params, states, train=True), Tensor(w)))

    vals = [rng.uniform(0.5, 1.5, s.shape) if s.init == "ones" else _rand(rng, *s.shape) * 0.5 for s in specs]
    return check_gradients(f, [x0] + vals, h=1e-5, seed=seed)


def _check_model(seed, variant="with_mha"):
    from volnet import model

    cfg = model.ModelConfig.tiny(variant)
    mp = model.build_model(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(3, 1, 8, 16, 16))
    names = list(mp.params)
    y = Tensor(np.array([0.0, 1.0, 1.0]))

    def f(x, *vals):
        from volnet import optim

        swapped = model.ModelParams(cfg, dict(zip(names, vals)), mp.bn_state)
        return optim.bce_with_logits(model.forward(swapped, x, train=True), y)

    vals = [mp.params[n].data.astype(np.float64) for n in names]
    return check_gradients(f, [x0] + vals, h=1e-5, max_coords=6, seed=seed)


REGISTRY: dict[str, Callable[[int], float]] = {
    "add": _check_add,
    "mul": _check_mul,
    "relu": _check_relu,
    "matmul": _check_matmul,
    "conv3d": _check_conv3d,
    "avgpool3d_global": _check_pool,
    "batchnorm3d_train": _check_batchnorm,
    "batchnorm3d_eval": lambda s: _check_batchnorm(s, train=False),
    "softmax": _check_softmax,
    "reshape_permute_concat_slice": _check_plumbing,
    "bce_with_logits": _check_bce,
    "linear": _check_linear,
    "mha": _check_mha,
    "basic_block_stride1": lambda s: _check_block(s, stride=1),
    "basic_block_stride2": _check_block,
    "model_tiny_plain": lambda s: _check_model(s, "plain"),
    "model_tiny_with_mha": _check_model,
}


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err)) and self.max_rel_err < TOLERANCE


def run_checks(scope: str = "all", seed: int = 0, registry: dict | None = None) -> list[CheckResult]:
    registry = REGISTRY if registry is None else registry
    if scope == "all":
        names = list(registry)
    elif scope in registry:
        names = [scope]
    else:
        raise KeyError(f"unknown gradcheck scope {scope!r}; choose 'all' or one of {sorted(registry)}")
    results = []
    for name in names:
        t0 = time.perf_counter()
        err = registry[name](seed)
        results.append(CheckResult(name, err, time.perf_counter() - t0))
    return results
