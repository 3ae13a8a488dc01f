"""State-space core: zero-order-hold discretization, linear recurrence and the
input-dependent selective scan.

A is diagonal per channel and stored as ``[D, N]``; h is ``[D, N]`` per
sequence. The fused :func:`scan` op runs the recurrence in numpy and carries
its own reverse pass, which keeps a length-L scan one graph node instead of
~10·L.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

# below this |ΔA| the ZOH input factor switches to its Taylor series
ZOH_SERIES_THRESHOLD = 1e-6
_DPHI_SERIES_THRESHOLD = 1e-3


def _phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z with the removable singularity filled in."""
    small = np.abs(z) < ZOH_SERIES_THRESHOLD
    zs = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2.0 + z * z / 6.0, np.expm1(zs) / zs)


def _dphi(z: np.ndarray) -> np.ndarray:
    small = np.abs(z) < _DPHI_SERIES_THRESHOLD
    zs = np.where(small, 1.0, z)
    exact = (zs * np.exp(zs) - np.expm1(zs)) / (zs * zs)
    series = 0.5 + z / 3.0 + z * z / 8.0 + z ** 3 / 30.0
    return np.where(small, series, exact)


def discretize(A, B, delta, mode: str = "zoh"):
    """Zero-order hold for diagonal A: returns (A_bar, B_bar).

    A_bar = exp(ΔA); B_bar = (ΔA)^-1 (exp(ΔA) - 1) ΔB, or ΔB in ``euler`` mode.
    Arguments broadcast elementwise.
    """
    A, B, delta = (np.asarray(v, dtype=float) for v in (A, B, delta))
    if np.any(delta <= 0):
        raise ValueError("timescale delta must be positive")
    z = delta * A
    A_bar = np.exp(z)
    if mode == "zoh":
        B_bar = delta * _phi(z) * B
    elif mode == "euler":
        B_bar = delta * B
    else:
        raise ValueError(f"unknown discretization mode {mode!r}")
    return A_bar, B_bar


def recurrence(A_bar, B_bar, C, x, method: str = "sequential") -> np.ndarray:
    """h_t = A_bar h_{t-1} + B_bar x_t, y_t = C h_t with h_0 = 0.

    x is ``[L, D]``. A_bar and B_bar broadcast to ``[L, D, N]`` (a constant
    ``[N]`` or ``[D, N]`` is an LTI system), C to ``[L, N]``.
    ``method="parallel"`` evaluates the same recurrence with a log-depth
    associative scan.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    L, D = x.shape
    A_bar = np.asarray(A_bar, dtype=float)
    B_bar = np.asarray(B_bar, dtype=float)
    C = np.asarray(C, dtype=float)
    N = max(np.atleast_1d(A_bar).shape[-1], np.atleast_1d(B_bar).shape[-1], np.atleast_1d(C).shape[-1])
    for name, arr in (("A_bar", A_bar), ("B_bar", B_bar)):
        if arr.ndim == 3 and arr.shape[0] != L:
            raise ValueError(f"{name} has {arr.shape[0]} steps, input has {L}")
    if C.ndim == 2 and C.shape[0] != L:
        raise ValueError(f"C has {C.shape[0]} steps, input has {L}")
    a = np.broadcast_to(A_bar, (L, D, N))
    b = np.broadcast_to(B_bar, (L, D, N)) * x[:, :, None]
    c = np.broadcast_to(C, (L, N))
    if method == "sequential":
        h = np.zeros((L, D, N))
        prev = np.zeros((D, N))
        for t in range(L):
            prev = a[t] * prev + b[t]
            h[t] = prev
    elif method == "parallel":
        h = parallel_linear_scan(a, b)
    else:
        raise ValueError(f"unknown method {method!r}")
    return np.einsum("ldn,ln->ld", h, c)


def parallel_linear_scan(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inclusive scan of h_t = a_t h_{t-1} + b_t along axis 0 (Hillis-Steele).

    Combines (a1, b1) then (a2, b2) into (a2 a1, a2 b1 + b2) in log2(L) sweeps.
    """
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    L = a.shape[0]
    step = 1
    while step < L:
        a_prev, b_prev = a[:-step].copy(), b[:-step].copy()
        b[step:] = a[step:] * b_prev + b[step:]
        a[step:] = a[step:] * a_prev
        step *= 2
    return b


def ode_reference(A, B, C, x, delta: float, substeps: int = 100) -> np.ndarray:
    """Integrate h' = A h + B x, y = C h with RK4, x held constant per step.

    A ``[n, n]``, B ``[n, m]``, C ``[p, n]``, x ``[L, m]``; returns y ``[L, p]``
    sampled at the end of every step.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    C = np.asarray(C, dtype=float).reshape(-1, n)
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    dt = delta / substeps
    h = np.zeros(n)
    ys = np.empty((len(x), C.shape[0]))
    for k, xk in enumerate(x):
        drive = B @ xk
        for _ in range(substeps):
            k1 = A @ h + drive
            k2 = A @ (h + 0.5 * dt * k1) + drive
            k3 = A @ (h + 0.5 * dt * k2) + drive
            k4 = A @ (h + dt * k3) + drive
            h = h + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        ys[k] = C @ h
    return ys


# ---------------------------------------------------------------------------
# differentiable scan


def scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, mode: str = "zoh") -> Tensor:
    """Selective scan as a single graph node.

    u, delta: ``[..., L, D]``; A: ``[D, N]``; B, C: ``[..., L, N]``.
    Returns y ``[..., L, D]``.
    """
    ud, dd, Ad, Bd, Cd = u.data, delta.data, A.data, B.data, C.data
    if ud.shape != dd.shape:
        raise ValueError(f"u {ud.shape} and delta {dd.shape} differ")
    if Bd.shape[:-1] != ud.shape[:-1] or Cd.shape != Bd.shape:
        raise ValueError(f"B/C shapes {Bd.shape}/{Cd.shape} do not match u {ud.shape}")
    L = ud.shape[-2]
    z = dd[..., None] * Ad                      # [..., L, D, N]
    dA = np.exp(z)
    if mode == "zoh":
        phi = _phi(z)
        Bbar = dd[..., None] * phi * Bd[..., None, :]
    elif mode == "euler":
        phi = None
        Bbar = dd[..., None] * Bd[..., None, :]
    else:
        raise ValueError(f"unknown discretization mode {mode!r}")
    Bu = Bbar * ud[..., None]
    hs = np.empty_like(Bu)
    h = np.zeros(Bu.shape[:-3] + Bu.shape[-2:])
    for t in range(L):
        h = dA[..., t, :, :] * h + Bu[..., t, :, :]
        hs[..., t, :, :] = h
    y = np.einsum("...ldn,...ln->...ld", hs, Cd)

    def bw(gy):
        gC = np.einsum("...ld,...ldn->...ln", gy, hs)
        ghs = np.empty_like(hs)
        gh = np.zeros_like(h)
        for t in range(L - 1, -1, -1):
            gh = gy[..., t, :, None] * Cd[..., t, None, :] + gh
            ghs[..., t, :, :] = gh
            gh = gh * dA[..., t, :, :]
        h_prev = np.zeros_like(hs)
        h_prev[..., 1:, :, :] = hs[..., :-1, :, :]
        g_dA = ghs * h_prev * dA                 # d/dz of exp(z)
        gBbar = ghs * ud[..., None]
        gu = (ghs * Bbar).sum(-1)
        if mode == "zoh":
            dfac = phi + z * _dphi(z)            # d(Δ·φ(ΔA))/dΔ
            gdelta = (g_dA * Ad).sum(-1) + (gBbar * Bd[..., None, :] * dfac).sum(-1)
            gA_terms = g_dA * dd[..., None] + gBbar * Bd[..., None, :] * dd[..., None] ** 2 * _dphi(z)
            gB = (gBbar * dd[..., None] * phi).sum(-2)
        else:
            gdelta = (g_dA * Ad).sum(-1) + (gBbar * Bd[..., None, :]).sum(-1)
            gA_terms = g_dA * dd[..., None]
            gB = (gBbar * dd[..., None]).sum(-2)
        gA = gA_terms.reshape(-1, *Ad.shape).sum(0)
        return gu, gdelta, gA, gB, gC

    return T.make(y, (u, delta, A, B, C), bw, "selective_scan")


@dataclass
class SelectiveProjections:
    """Parameters that turn each position x_t into (Δ_t, B_t, C_t).

    x_proj maps D -> R + 2N (low-rank Δ input, B, C); dt_proj lifts R -> D with
    a bias; A = -exp(a_log).
    """

    x_proj: Parameter       # [D, R + 2N]
    dt_proj: Parameter      # [R, D]
    dt_bias: Parameter      # [D]
    a_log: Parameter        # [D, N]
    mode: str = "zoh"

    @property
    def rank(self) -> int:
        return self.dt_proj.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.x_proj, self.dt_proj, self.dt_bias, self.a_log]

    @classmethod
    def init(cls, D: int, N: int, rng: np.random.Generator, name: str = "",
             rank: int | None = None, dt_min: float = 1e-3, dt_max: float = 0.1,
             mode: str = "zoh") -> "SelectiveProjections":
        R = rank if rank is not None else dt_rank(D)
        x_proj = rng.normal(0.0, D ** -0.5, size=(D, R + 2 * N))
        dt_proj = rng.uniform(-1.0, 1.0, size=(R, D)) * R ** -0.5
        # initial Δ log-uniform in [dt_min, dt_max]; bias is its softplus inverse
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=D))
        dt_bias = dt + np.log(-np.expm1(-dt))
        a_log = np.log(np.tile(np.arange(1, N + 1, dtype=float), (D, 1)))
        p = f"{name}." if name else ""
        return cls(Parameter(x_proj, p + "x_proj"), Parameter(dt_proj, p + "dt_proj"),
                   Parameter(dt_bias, p + "dt_bias"), Parameter(a_log, p + "a_log"), mode)


def dt_rank(d_model: int) -> int:
    return math.ceil(d_model / 16)


def _project(x: Tensor, proj: SelectiveProjections):
    R, N = proj.rank, proj.d_state
    dbc = x @ proj.x_proj
    dt_in, B, C = T.split(dbc, [R, N, N], axis=-1)
    delta = T.softplus(dt_in @ proj.dt_proj + proj.dt_bias)
    A = -T.exp(proj.a_log)
    return delta, A, B, C


def selective_scan(x: Tensor, proj: SelectiveProjections) -> Tensor:
    """S6: per-position Δ, B, C from x, then the discretized recurrence."""
    delta, A, B, C = _project(x, proj)
    return scan(x, delta, A, B, C, mode=proj.mode)


def selective_scan_reference(x: Tensor, proj: SelectiveProjections) -> Tensor:
    """Position-by-position loop built only from primitive tensor ops.

    Independent of :func:`scan`'s fused forward and hand-written backward;
    serves as its oracle.
    """
    delta, A, B, C = _project(x, proj)
    L = x.shape[-2]
    lead = x.shape[:-2]
    D, N = proj.a_log.shape
    h = T.Tensor(np.zeros(lead + (D, N)))
    ys = []
    for t in range(L):
        d_t = T.reshape(delta[..., t, :], lead + (D, 1))
        dA = T.exp(d_t * A)
        if proj.mode == "zoh":
            bbar = (dA - 1.0) * T.power(A, -1.0) * T.reshape(B[..., t, :], lead + (1, N))
        else:
            bbar = d_t * T.reshape(B[..., t, :], lead + (1, N))
        u_t = T.reshape(x[..., t, :], lead + (D, 1))
        h = dA * h + bbar * u_t
        c_t = T.reshape(C[..., t, :], lead + (N, 1))
        ys.append(T.reshape(h @ c_t, lead + (D,)))
    return T.stack(ys, axis=-2)
