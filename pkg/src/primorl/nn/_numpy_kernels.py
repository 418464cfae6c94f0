"""Pure-numpy MLP kernels (fallback backend).

Semantics must match ``_ckernels`` exactly: hidden layers apply
swish(z) = z * sigmoid(z), the output layer is linear, and the VJP
returns parameter gradients plus the input gradient.
"""

import numpy as np
from scipy.special import expit as _sigmoid

NAME = "numpy"


def mlp_forward(Ws, bs, X, need_cache):
    """Run the network on a batch X (B, d_in).

    Returns (Y, cache) where cache is (acts, zs, sigs) when requested:
    acts[l] is the input to layer l, zs/sigs hold the biased pre-activation
    and its sigmoid for every hidden layer.
    """
    A = X
    acts = [X]
    zs, sigs = [], []
    for W, b in zip(Ws[:-1], bs[:-1]):
        Z = A @ W
        Z += b
        S = _sigmoid(Z)
        A = Z * S
        if need_cache:
            zs.append(Z)
            sigs.append(S)
            acts.append(A)
    Y = A @ Ws[-1]
    Y += bs[-1]
    if not need_cache:
        return Y, None
    return Y, (acts, zs, sigs)


def mlp_vjp(Ws, bs, cache, dY):
    """Vector-Jacobian product: gradients of sum(dY * Y) w.r.t. params and X."""
    acts, zs, sigs = cache
    L = len(Ws)
    gWs = [None] * L
    gbs = [None] * L
    gWs[L - 1] = acts[L - 1].T @ dY
    gbs[L - 1] = dY.sum(axis=0)
    dA = dY @ Ws[L - 1].T
    for l in range(L - 2, -1, -1):
        Z, S = zs[l], sigs[l]
        dZ = dA * (S * (1.0 + Z * (1.0 - S)))
        gWs[l] = acts[l].T @ dZ
        gbs[l] = dZ.sum(axis=0)
        dA = dZ @ Ws[l].T
    return gWs, gbs, dA
