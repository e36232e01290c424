"""Selective state-space sequence transform (input-dependent linear recurrence).

The recurrence over a length-L token sequence is

    h_t = Abar_t * h_{t-1} + Bbar_t * x_t        Abar_t = exp(dt_t * A)
    y_t = C_t . h_t + D * x_t                    Bbar_t = dt_t * B_t

with A strictly negative (stored as -exp(A_log)), per-token dt produced by a
softplus projection, and per-token B_t / C_t linear projections of the token.
Two evaluation paths share this contract: a plain sequential loop and an
associative scan (pairs combine as (a2*a1, a2*b1 + b2)). Both run their inner
recurrence in float64.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class SsmState:
    """Hidden state handed between scans, shape [C, S]."""

    def __init__(self, h: Tensor):
        self.h = h

    @staticmethod
    def zeros(d_model: int, d_state: int) -> "SsmState":
        return SsmState(Tensor(np.zeros((d_model, d_state))))


class SsmParams:
    """Parameters of one scan direction over width-C tokens.

    dt_bias is initialised so softplus(dt_bias) lands log-uniformly in
    [dt_min, dt_max]; A_log follows the usual 1..S ladder per state column.
    """

    def __init__(self, d_model: int, d_state: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 0.1):
        self.d_model = d_model
        self.d_state = d_state
        scale = d_model ** -0.5
        self.A_log = Tensor(
            np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_model, 1)),
            requires_grad=True,
        )
        self.W_delta = Tensor(rng.standard_normal((d_model, d_model)) * scale,
                              requires_grad=True)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_model))
        self.dt_bias = Tensor(np.log(np.expm1(dt)), requires_grad=True)
        self.W_B = Tensor(rng.standard_normal((d_model, d_state)) * scale,
                          requires_grad=True)
        self.W_C = Tensor(rng.standard_normal((d_model, d_state)) * scale,
                          requires_grad=True)
        self.D = Tensor(np.ones(d_model), requires_grad=True)

    def per_token(self, x: Tensor):
        """Project tokens ``x[L,C]`` to (dt [L,C], B [L,S], C [L,S])."""
        dt = T.softplus(T.matmul(x, self.W_delta) + self.dt_bias)
        b = T.matmul(x, self.W_B)
        c = T.matmul(x, self.W_C)
        return dt, b, c


def _linear_scan_forward(da: np.ndarray, u: np.ndarray, h0: np.ndarray,
                         mode: str) -> np.ndarray:
    """All prefix states of h_t = da_t * h_{t-1} + u_t over axis -3.

    Shapes: da, u are [..., L, C, S]; h0 is [..., C, S]. float64 throughout.
    """
    length = da.shape[-3]
    if mode == "sequential":
        out = np.empty_like(u)
        h = h0
        for t in range(length):
            h = da[..., t, :, :] * h + u[..., t, :, :]
            out[..., t, :, :] = h
        return out
    if mode == "parallel":
        a = da.copy()
        b = u.copy()
        b[..., 0, :, :] += da[..., 0, :, :] * h0
        d = 1
        while d < length:
            a_new = a.copy()
            b_new = b.copy()
            sl_hi = (Ellipsis, slice(d, None), slice(None), slice(None))
            sl_lo = (Ellipsis, slice(None, -d), slice(None), slice(None))
            b_new[sl_hi] = b[sl_hi] + a[sl_hi] * b[sl_lo]
            a_new[sl_hi] = a[sl_hi] * a[sl_lo]
            a, b = a_new, b_new
            d *= 2
        return b
    raise ValueError(f"unknown scan mode {mode!r}")


def linear_scan(da: Tensor, u: Tensor, h0: Tensor, mode: str = "sequential") -> Tensor:
    """Differentiable prefix recurrence; returns every state h_t.

    The adjoint is itself a reversed scan: with upstream grads g_t,
    lam_t = g_t + da_{t+1} * lam_{t+1}, then grad(u_t) = lam_t,
    grad(da_t) = lam_t * h_{t-1} and grad(h0) = da_0 * lam_0.
    """
    da, u, h0 = T.as_tensor(da), T.as_tensor(u), T.as_tensor(h0)
    if da.shape != u.shape:
        raise ValueError(f"scan operand shapes differ: {da.shape} vs {u.shape}")
    if da.shape[-3] < 1:
        raise ValueError("scan needs at least one step")
    da64 = da.data.astype(np.float64)
    u64 = u.data.astype(np.float64)
    h064 = h0.data.astype(np.float64)
    h = _linear_scan_forward(da64, u64, h064, mode)
    out = h.astype(da.dtype)

    def bwd(g):
        g64 = g.astype(np.float64)
        rev = (Ellipsis, slice(None, None, -1), slice(None), slice(None))
        ar = np.ones_like(da64)
        ar[..., 1:, :, :] = da64[rev][..., :-1, :, :]
        lam = _linear_scan_forward(ar, g64[rev], np.zeros_like(h064), mode)[rev]
        prev_h = np.concatenate([h064[..., None, :, :], h[..., :-1, :, :]], axis=-3)
        g_da = (lam * prev_h).astype(da.dtype)
        g_u = lam.astype(u.dtype)
        g_h0 = (da64[..., 0, :, :] * lam[..., 0, :, :]).astype(h0.dtype)
        return g_da, g_u, g_h0

    return T.make_node(out, (da, u, h0), bwd)


def _scan(x: Tensor, p: SsmParams, h0, mode: str):
    if not np.isfinite(x.data).all():
        raise ValueError("selective scan input contains non-finite values")
    length, c = x.shape
    s = p.d_state
    if h0 is None:
        h0 = Tensor(np.zeros((c, s)))
    elif isinstance(h0, SsmState):
        h0 = h0.h
    dt, b, ct = p.per_token(x)
    a = T.neg(T.exp(p.A_log))
    dt3 = T.reshape(dt, (length, c, 1))
    da = T.exp(T.mul(dt3, a))
    u = T.mul(T.mul(dt3, T.reshape(b, (length, 1, s))), T.reshape(x, (length, c, 1)))
    h = linear_scan(da, u, h0, mode=mode)
    y = T.tsum(T.mul(h, T.reshape(ct, (length, 1, s))), axis=2) + T.mul(p.D, x)
    return y, SsmState(h[length - 1])


def selective_scan_sequential(x: Tensor, p: SsmParams, h0=None):
    """Reference path: token-by-token recurrence. Returns (y [L,C], final state)."""
    return _scan(x, p, h0, "sequential")


def selective_scan_parallel(x: Tensor, p: SsmParams, h0=None):
    """Associative-scan path; same contract as the sequential scan."""
    return _scan(x, p, h0, "parallel")


def bidirectional_scan(x: Tensor, p_fwd: SsmParams, p_bwd: SsmParams,
                       h0_fwd=None, h0_bwd=None, mode: str = "sequential",
                       return_state: bool = False):
    """Forward scan plus un-reversed scan of the reversed sequence, summed."""
    yf, state = _scan(x, p_fwd, h0_fwd, mode)
    yb, _ = _scan(T.flip_rows(x), p_bwd, h0_bwd, mode)
    y = yf + T.flip_rows(yb)
    if return_state:
        return y, state
    return y
