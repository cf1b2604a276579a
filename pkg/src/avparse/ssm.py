"""Selective state-space scan kernels and the Mamba-style block.

The sequential scan is composed from primitive autodiff ops and serves as the
ground-truth oracle. The parallel variant runs an associative prefix scan in
raw numpy inside a single fused graph node with a hand-derived adjoint; it is
the engine the model trains with. Backward and dynamic scans are defined as
compositions (reversal / soft mixture over cyclic rotations) of either engine.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tt
from .errors import ContractError, ShapeError
from .layers import LayerNorm, Module
from .tensor import Tensor


# -- parameters ---------------------------------------------------------------


class SharedMatrixHandle(Module):
    """One input-projection matrix shared by both modalities' scan branches.

    The mixing scalars are stored pre-sigmoid; ``active=False`` is a hard-off
    switch that bypasses the shared matrix entirely (the private projection is
    used unmodified and no gradient reaches the shared parameters).
    """

    def __init__(self, d_inner: int, d_state: int, rng: np.random.Generator, active: bool = True):
        super().__init__()
        self.active = active
        self.w_shared = self._register(
            "w_shared", rng.standard_normal((d_inner, d_state)) / np.sqrt(d_inner)
        )
        self.alpha_a = self._register("alpha_a", np.zeros(1))
        self.alpha_v = self._register("alpha_v", np.zeros(1))

    def effective(self, w_private: Tensor, modality: str) -> Tensor:
        if not self.active:
            return w_private
        alpha = self.alpha_a if modality == "a" else self.alpha_v
        s = tt.sigmoid(alpha)
        return (1.0 - s) * w_private + s * self.w_shared


class SsmParams(Module):
    """Parameters of one selective-scan branch.

    The state matrix is stored as ``a_log`` with ``A = -exp(a_log)``, keeping
    every decay strictly inside the unit circle after discretization. The
    timestep projection is low-rank with its bias initialized so softplus
    lands in roughly [0.001, 0.1].
    """

    def __init__(self, d_inner: int, d_state: int, rng: np.random.Generator,
                 dt_rank: int, shared: SharedMatrixHandle | None = None,
                 modality: str | None = None):
        super().__init__()
        self.d_inner = d_inner
        self.d_state = d_state
        self.shared = shared  # not registered here; the owning module registers it once
        self.modality = modality
        a_row = np.log(np.arange(1, d_state + 1, dtype=np.float64))
        self.a_log = self._register("a_log", np.tile(a_row, (d_inner, 1)))
        self.w_b = self._register("w_b", rng.standard_normal((d_inner, d_state)) / np.sqrt(d_inner))
        self.w_c = self._register("w_c", rng.standard_normal((d_inner, d_state)) / np.sqrt(d_inner))
        self.w_dt1 = self._register("w_dt1", rng.standard_normal((d_inner, dt_rank)) / np.sqrt(d_inner))
        self.w_dt2 = self._register("w_dt2", rng.standard_normal((dt_rank, d_inner)) / np.sqrt(dt_rank))
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=d_inner))
        self.b_dt = self._register("b_dt", np.log(np.expm1(dt)))
        self.d_skip = self._register("d_skip", np.ones(d_inner))

    def effective_b_weight(self) -> Tensor:
        if self.shared is None:
            return self.w_b
        return self.shared.effective(self.w_b, self.modality)

    def project(self, u: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Per-step (delta, B, C) coefficients derived from the input."""
        delta = tt.softplus(tt.matmul(tt.matmul(u, self.w_dt1), self.w_dt2) + self.b_dt)
        b_coef = tt.matmul(u, self.effective_b_weight())
        c_coef = tt.matmul(u, self.w_c)
        return delta, b_coef, c_coef


# -- discretization ------------------------------------------------------------


def discretize(delta: Tensor, a_log: Tensor, b_coef: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order hold for the state matrix, Euler for the input matrix.

    ``A_bar = exp(delta * A)`` with ``A = -exp(a_log)``; ``B_bar = delta * B``.
    """
    if np.any(delta.data <= 0.0):
        raise ContractError("discretize requires strictly positive delta")
    t_len, d_inner = delta.shape
    d_state = a_log.shape[1]
    a_neg = -tt.exp(a_log)
    delta3 = tt.reshape(delta, (t_len, d_inner, 1))
    a3 = tt.reshape(a_neg, (1, d_inner, d_state))
    a_bar = tt.exp(delta3 * a3)
    b3 = tt.reshape(b_coef, (t_len, 1, d_state))
    b_bar = delta3 * b3
    return a_bar, b_bar


# -- scan engines ---------------------------------------------------------------


def scan_compose(p: tuple[np.ndarray, np.ndarray], q: tuple[np.ndarray, np.ndarray]):
    """Compose two linear-recurrence elements: apply ``p`` first, then ``q``."""
    a1, b1 = p
    a2, b2 = q
    return a1 * a2, a2 * b1 + b2


def linear_scan_parallel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inclusive prefix scan of ``h_t = a_t h_{t-1} + b_t`` (h_{-1} = 0).

    Hillis-Steele doubling along axis 0; O(T log T) element operations but
    fully vectorized over the trailing axes.
    """
    a = a.copy()
    b = b.copy()
    t_len = a.shape[0]
    offset = 1
    while offset < t_len:
        b[offset:] = b[offset:] + a[offset:] * b[:-offset]
        a[offset:] = a[offset:] * a[:-offset]
        offset *= 2
    return b


def linear_scan_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    h = np.zeros_like(b[0])
    out = np.empty_like(b)
    for t in range(b.shape[0]):
        h = a[t] * h + b[t]
        out[t] = h
    return out


def _scan_primitive(u: Tensor, delta: Tensor, b_coef: Tensor, c_coef: Tensor,
                    a_log: Tensor, d_skip: Tensor) -> Tensor:
    """Step-by-step recurrence built from primitive ops (the oracle path)."""
    t_len, d_inner = u.shape
    d_state = a_log.shape[1]
    a_bar, b_bar = discretize(delta, a_log, b_coef)
    h = tt.zeros((d_inner, d_state))
    ys = []
    for t in range(t_len):
        a_t = tt.reshape(tt.narrow(a_bar, 0, t, 1), (d_inner, d_state))
        b_t = tt.reshape(tt.narrow(b_bar, 0, t, 1), (d_inner, d_state))
        u_t = tt.reshape(tt.narrow(u, 0, t, 1), (d_inner, 1))
        c_t = tt.narrow(c_coef, 0, t, 1)  # [1, N]
        h = a_t * h + b_t * u_t
        y_t = tt.tsum(h * c_t, axis=1, keepdims=True)  # [D, 1]
        ys.append(tt.transpose(y_t))
    y = tt.concat(ys, axis=0)
    return y + d_skip * u


def _scan_fused(u: Tensor, delta: Tensor, b_coef: Tensor, c_coef: Tensor,
                a_log: Tensor, d_skip: Tensor) -> Tensor:
    """Single graph node: parallel-scan forward, hand-derived adjoint backward."""
    ud, dd = u.data, delta.data
    bd, cd = b_coef.data, c_coef.data
    a_neg = -np.exp(a_log.data)  # [D, N]
    da = np.exp(dd[:, :, None] * a_neg[None])  # [T, D, N]
    bu = dd[:, :, None] * bd[:, None, :] * ud[:, :, None]
    h = linear_scan_parallel(da, bu)  # [T, D, N]
    y = np.einsum("tdn,tn->td", h, cd) + d_skip.data[None, :] * ud

    def backward():
        gy = out.grad
        t_len = ud.shape[0]
        # adjoint of the recurrence, computed by a reverse sweep
        dh = np.empty_like(h)
        carry = np.zeros_like(h[0])
        for t in range(t_len - 1, -1, -1):
            dh[t] = gy[t][:, None] * cd[t][None, :] + carry
            carry = da[t] * dh[t]
        g_da = np.empty_like(h)
        g_da[0] = 0.0
        np.multiply(dh[1:], h[:-1], out=g_da[1:])
        g_da *= da  # gradient through the exp argument of the decay
        dh_b = np.einsum("tdn,tn->td", dh, bd)
        g_delta = np.einsum("tdn,dn->td", g_da, a_neg) + dh_b * ud
        g_u = dh_b * dd + d_skip.data[None, :] * gy
        g_b = np.einsum("tdn,td->tn", dh, dd * ud)
        g_c = np.einsum("td,tdn->tn", gy, h)
        u._accumulate(g_u)
        delta._accumulate(g_delta)
        b_coef._accumulate(g_b)
        c_coef._accumulate(g_c)
        a_log._accumulate(np.einsum("tdn,td->dn", g_da, dd) * a_neg)
        d_skip._accumulate((gy * ud).sum(0))

    out = tt._make(y, (u, delta, b_coef, c_coef, a_log, d_skip), backward)
    return out


def _dyn_fused(u: Tensor, delta: Tensor, b_coef: Tensor, c_coef: Tensor,
               probs: Tensor, a_log: Tensor, d_skip: Tensor) -> Tensor:
    """Whole dynamic mixture as one node.

    The per-step decay and input arrays are discretized once and gathered
    into all T cyclic rotations; the recurrence then runs as a single
    rotation-batched sweep. One graph node replaces T scans plus glue.
    """
    ud, dd, bd, cd, pd = u.data, delta.data, b_coef.data, c_coef.data, probs.data
    t_len = ud.shape[0]
    srange = np.arange(t_len)
    idx = (srange[None, :] + srange[:, None]) % t_len  # idx[s, t] = (t + s) % T
    inv_idx = (srange[None, :] - srange[:, None]) % t_len
    rows = srange[:, None]
    a_neg = -np.exp(a_log.data)
    da_base = np.exp(dd[:, :, None] * a_neg[None])  # [T, D, N]
    bu_base = (dd * ud)[:, :, None] * bd[:, None, :]
    da = da_base[idx]  # [S, T, D, N], rotation-gathered
    bu = bu_base[idx]
    c_rot = cd[idx]
    u_rot = ud[idx]
    h = np.empty_like(bu)
    acc = np.zeros_like(bu[:, 0])
    for t in range(t_len):
        acc = da[:, t] * acc + bu[:, t]
        h[:, t] = acc
    y_rot = np.einsum("stdn,stn->std", h, c_rot) + d_skip.data * u_rot
    y_un = y_rot[rows, inv_idx]  # rotation undone per start position
    out_data = np.einsum("s,std->td", pd, y_un)

    def backward():
        g = out.grad
        d_rot = dd[idx]
        b_rot = bd[idx]
        g_yrot = pd[:, None, None] * g[idx]
        dh = np.empty_like(h)
        carry = np.zeros_like(h[:, 0])
        for t in range(t_len - 1, -1, -1):
            dh[:, t] = g_yrot[:, t, :, None] * c_rot[:, t, None, :] + carry
            carry = da[:, t] * dh[:, t]
        # gradient through the exp argument of the decay: dh * h_prev * da
        g_da = np.empty_like(h)
        g_da[:, 0] = 0.0
        np.multiply(dh[:, 1:], h[:, :-1], out=g_da[:, 1:])
        g_da *= da
        dh_b = np.einsum("stdn,stn->std", dh, b_rot)
        g_d_rot = np.einsum("stdn,dn->std", g_da, a_neg) + dh_b * u_rot
        g_u_rot = dh_b * d_rot + d_skip.data * g_yrot
        g_b_rot = np.einsum("stdn,std->stn", dh, d_rot * u_rot)
        g_c_rot = np.einsum("std,stdn->stn", g_yrot, h)
        u._accumulate(g_u_rot[rows, inv_idx].sum(0))
        delta._accumulate(g_d_rot[rows, inv_idx].sum(0))
        b_coef._accumulate(g_b_rot[rows, inv_idx].sum(0))
        c_coef._accumulate(g_c_rot[rows, inv_idx].sum(0))
        probs._accumulate(np.einsum("std,td->s", y_un, g))
        a_log._accumulate(np.einsum("stdn,std->dn", g_da, d_rot) * a_neg)
        d_skip._accumulate((g_yrot * u_rot).sum((0, 1)))

    out = tt._make(out_data, (u, delta, b_coef, c_coef, probs, a_log, d_skip), backward)
    return out


def scan_core(u: Tensor, delta: Tensor, b_coef: Tensor, c_coef: Tensor,
              a_log: Tensor, d_skip: Tensor, engine: str = "parallel") -> Tensor:
    """Run the recurrence on explicit per-step coefficients."""
    if engine == "sequential":
        return _scan_primitive(u, delta, b_coef, c_coef, a_log, d_skip)
    if engine == "parallel":
        return _scan_fused(u, delta, b_coef, c_coef, a_log, d_skip)
    raise ContractError(f"unknown scan engine {engine!r}")


# -- public scan operations -------------------------------------------------------


def _check_scan_input(x: Tensor, params: SsmParams) -> None:
    if x.data.ndim != 2 or x.shape[1] != params.d_inner:
        raise ShapeError(f"scan input must be [T, {params.d_inner}], got {x.shape}")


def selective_scan_sequential(x: Tensor, params: SsmParams) -> Tensor:
    _check_scan_input(x, params)
    delta, b_coef, c_coef = params.project(x)
    return _scan_primitive(x, delta, b_coef, c_coef, params.a_log, params.d_skip)


def selective_scan_parallel(x: Tensor, params: SsmParams) -> Tensor:
    _check_scan_input(x, params)
    delta, b_coef, c_coef = params.project(x)
    return _scan_fused(x, delta, b_coef, c_coef, params.a_log, params.d_skip)


def selective_scan(x: Tensor, params: SsmParams, engine: str = "parallel") -> Tensor:
    if engine == "sequential":
        return selective_scan_sequential(x, params)
    if engine == "parallel":
        return selective_scan_parallel(x, params)
    raise ContractError(f"unknown scan engine {engine!r}")


def selective_scan_backward(x: Tensor, params: SsmParams, engine: str = "parallel") -> Tensor:
    """Scan in reversed segment order; output restored to input orientation."""
    xr = tt.reverse(x, axis=0)
    yr = selective_scan(xr, params, engine=engine)
    return tt.reverse(yr, axis=0)


def dynamic_mixture(x: Tensor, params: SsmParams, probs: Tensor,
                    engine: str = "parallel") -> Tensor:
    """Soft mixture of forward scans over all cyclic start positions.

    ``probs`` has one weight per start segment; start ``s`` rotates the
    sequence so segment ``s`` is scanned first, and the scan output is
    rotated back before weighting. The parallel engine batches every
    rotation into one fused prefix scan; the sequential engine composes the
    mixture term by term and is the oracle the fused path is tested against.
    """
    t_len = x.shape[0]
    if probs.shape != (t_len,):
        raise ShapeError(f"start distribution must have shape [{t_len}], got {probs.shape}")
    if engine == "parallel":
        _check_scan_input(x, params)
        delta, b_coef, c_coef = params.project(x)
        return _dyn_fused(x, delta, b_coef, c_coef, probs, params.a_log, params.d_skip)
    total = None
    for s in range(t_len):
        xs = tt.rotate(x, axis=0, offset=s)
        ys = tt.rotate(selective_scan(xs, params, engine=engine), axis=0, offset=-s)
        term = ys * tt.narrow(probs, 0, s, 1)
        total = term if total is None else total + term
    return total


def selective_scan_dynamic(x: Tensor, params: SsmParams, start_logits: Tensor,
                           engine: str = "parallel") -> Tensor:
    probs = tt.softmax(start_logits, axis=0)
    return dynamic_mixture(x, params, probs, engine=engine)


# -- full block --------------------------------------------------------------------


def default_dt_rank(d_model: int) -> int:
    return max(1, math.ceil(d_model / 16))


class MambaBlock(Module):
    """Norm -> gated dual-branch -> causal depthwise conv -> selective scan.

    Shape-preserving: ``[T, d] -> [T, d]`` with a residual connection.
    """

    def __init__(self, d_model: int, rng: np.random.Generator, d_state: int = 16,
                 expand: int = 2, d_conv: int = 4,
                 shared: SharedMatrixHandle | None = None, modality: str | None = None):
        super().__init__()
        self.d_model = d_model
        self.d_inner = expand * d_model
        self.norm = self._child("norm", LayerNorm(d_model))
        self.w_in_x = self._register(
            "w_in_x", rng.standard_normal((d_model, self.d_inner)) / np.sqrt(d_model))
        self.w_in_z = self._register(
            "w_in_z", rng.standard_normal((d_model, self.d_inner)) / np.sqrt(d_model))
        self.conv_w = self._register(
            "conv_w", rng.standard_normal((d_conv, self.d_inner)) / np.sqrt(d_conv))
        self.conv_b = self._register("conv_b", np.zeros(self.d_inner))
        self.ssm = self._child(
            "ssm", SsmParams(self.d_inner, d_state, rng, default_dt_rank(d_model),
                             shared=shared, modality=modality))
        self.w_out = self._register(
            "w_out", rng.standard_normal((self.d_inner, d_model)) / np.sqrt(self.d_inner))
        self.b_out = self._register("b_out", np.zeros(d_model))

    def __call__(self, x: Tensor, engine: str = "parallel") -> Tensor:
        u = self.norm(x)
        xm = tt.matmul(u, self.w_in_x)
        z = tt.matmul(u, self.w_in_z)
        xc = tt.silu(tt.conv1d_depthwise(xm, self.conv_w, self.conv_b))
        y = selective_scan(xc, self.ssm, engine=engine)
        return tt.matmul(y * tt.silu(z), self.w_out) + self.b_out + x
