"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

STEP = 1e-5


def numeric_grad(f, x, step=STEP):
    """d f / d x for scalar ``f``; perturbs ``x`` in place and restores it."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f()
        x[i] = orig - step
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a, b):
    """max |a - b| relative to the larger gradient scale. The 1e-6 floor keeps
    structurally-zero gradients (e.g. through a width-2 LayerNorm) from
    dividing difference-quotient round-off by round-off."""
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-6)
    return float(np.abs(a - b).max() / scale)


def generic_point(module, seed=0):
    """Randomize LayerNorm gain/offset: width-1 branches output exactly beta,
    which sits on the LeakyReLU kink at the default beta = 0."""
    rng = np.random.default_rng(seed)
    for name, p in module.named_parameters().items():
        if name.endswith("norm.gamma"):
            p[...] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith("norm.beta"):
            p[...] = rng.uniform(-0.5, 0.5, p.shape)
    return module


def scalar_loss_check(module, x, weights):
    """Compare analytic parameter and input gradients of sum(w * f(x))
    against central differences; returns the worst relative error.

    Each tensor is measured against its own scale, floored at 1e-3 of the
    largest gradient anywhere: tensors whose true gradient is ~1e-10 sit at
    the difference quotient's truncation floor and carry no signal.
    """

    def loss():
        return float(np.sum(weights * module.forward(x)))

    module.forward(x)
    pairs = [(module.backward(weights), numeric_grad(loss, x))]
    analytic = {k: v.copy() for k, v in module.named_gradients().items()}
    for name, p in module.named_parameters().items():
        pairs.append((analytic[name], numeric_grad(loss, p)))
    top = max(max(np.abs(a).max(), np.abs(n).max()) for a, n in pairs)
    return max(
        np.abs(a - n).max() / max(np.abs(a).max(), np.abs(n).max(), 1e-3 * top) for a, n in pairs
    )
