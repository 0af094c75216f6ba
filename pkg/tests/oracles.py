"""Independent dense oracles built on jax autodiff (float64)."""

import jax
import jax.numpy as jnp
import numpy as np

jax.config.update("jax_enable_x64", True)

JAX_ACT = {
    "tanh": jnp.tanh,
    "sin": jnp.sin,
    "erf": jax.scipy.special.erf,
    "softplus": jax.nn.softplus,
    "identity": lambda v: v,
}


def fcnn_fn(cfg):
    """theta, x -> outputs, re-deriving the flat layout from the widths alone."""
    w = cfg.widths

    def f(theta, x):
        off, h = 0, x
        for l in range(1, len(w)):
            if l > 1 or cfg.apply_input_activation:
                h = JAX_ACT[cfg.activation](h)
            W = theta[off:off + w[l] * w[l - 1]].reshape(w[l], w[l - 1])
            off += w[l] * w[l - 1]
            b = theta[off:off + w[l]]
            off += w[l]
            h = W @ h + b
        return h

    return f


def mixed_directional(f, dirs):
    """theta -> d^k/dt_1..dt_k f(theta + sum t_j v_j) at t = 0, by nested jvp."""
    g = f
    for v in dirs:
        g = (lambda inner, vec: lambda th: jax.jvp(inner, (th,), (vec,))[1])(g, jnp.asarray(v))
    return g


def dense_correlation(cfg, theta, D, d, inputs, i0=0, idx=None):
    """C^{D,d} from jax: value (D=0), gradient (D=1) or dense Hessian (D=2).

    The gradients g_a = grad F_{i_a}(x_a) are evaluated at theta and held fixed.
    """
    f = fcnn_fn(cfg)
    theta = jnp.asarray(theta)
    idx = idx or (0,) * (d + 1)
    gs = [jax.grad(lambda th, x=x, i=i: f(th, jnp.asarray(x))[i])(theta)
          for x, i in zip(inputs[1:], idx[1:])]
    h = mixed_directional(lambda th: f(th, jnp.asarray(inputs[0]))[i0], gs)
    if D == 0:
        out = h(theta)
    elif D == 1:
        out = jax.grad(h)(theta)
    else:
        out = jax.hessian(h)(theta)
    return np.asarray(out)
