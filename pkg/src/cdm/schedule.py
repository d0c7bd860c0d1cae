"""Diffusion process math: noise schedules, forward marginals and posteriors,
reverse-process parameterizations, Gaussian KL, and per-term bound assembly.

All schedule tables are float64. Timesteps are 1-based (t in 1..T); t may be a
scalar or a per-sample integer array. Functions operate on numpy arrays and on
graph tensors where a differentiable path is needed (loss terms).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor
from . import tensor as tt

POSTERIOR_VAR_FLOOR = 1e-20


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep constants of one diffusion process (arrays indexed t-1)."""

    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    posterior_var: np.ndarray

    def tail_alpha_bar(self) -> float:
        return float(self.alpha_bar[-1])


@dataclass
class PosteriorStats:
    """Gaussian forward-process posterior q(x_{t-1} | x_t, x_0)."""

    mean: np.ndarray
    variance: np.ndarray  # scalar per sample (same for every element)


def build_schedule(kind: str, T: int, beta_start: float | None = None,
                   beta_end: float | None = None) -> NoiseSchedule:
    """Build a linear or cosine beta schedule with T steps.

    Linear endpoints default to the standard 1e-4..0.02 rescaled by 1000/T.
    The cosine schedule uses squared-cosine cumulative signal with offset
    0.008 and betas clipped to <= 0.999.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "linear":
        for name, v in (("beta_start", beta_start), ("beta_end", beta_end)):
            if v is not None and not 0.0 < v < 1.0:
                raise ValueError(f"{name}={v} outside (0, 1)")
        if beta_start is None:
            beta_start = 1e-4 * (1000.0 / T)
        if beta_end is None:
            beta_end = 0.02 * (1000.0 / T)
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        def f(u):
            return np.cos((u / T + 0.008) / 1.008 * np.pi / 2.0) ** 2

        steps = np.arange(T + 1, dtype=np.float64)
        bar = f(steps) / f(np.float64(0.0))
        beta = np.clip(1.0 - bar[1:] / bar[:-1], 0.0, 0.999)
    else:
        raise ValueError(f"unknown schedule kind '{kind}'")
    if np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise ValueError("realized betas leave (0, 1); check endpoints")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    posterior_var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    if alpha_bar[-1] >= 1e-3:
        warnings.warn(f"alpha_bar[T] = {alpha_bar[-1]:.3g} >= 1e-3; "
                      "terminal marginal is far from standard normal", stacklevel=2)
    return NoiseSchedule(kind=kind, T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         alpha_bar_prev=alpha_bar_prev, posterior_var=posterior_var)


def _check_t(t, T: int) -> np.ndarray:
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError("t must be integer-valued")
    if t.size == 0 or np.min(t) < 1 or np.max(t) > T:
        raise ValueError(f"t out of range 1..{T}")
    return t


def _per_sample(values: np.ndarray, ref_ndim: int) -> np.ndarray:
    """Reshape per-sample values (N,) for broadcasting against (N, ...)."""
    v = np.asarray(values)
    if v.ndim == 0:
        return v
    return v.reshape(v.shape + (1,) * (ref_ndim - 1))


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _is_graph(x) -> bool:
    return isinstance(x, Tensor) and (x.requires_grad or x._parents)


def _const_full(values, ref_shape, dtype) -> Tensor:
    """Full-shape constant tensor from scalar, per-sample, or full values."""
    v = np.asarray(values)
    if v.ndim == 1 and len(ref_shape) > 1 and v.shape[0] == ref_shape[0]:
        v = v.reshape(v.shape + (1,) * (len(ref_shape) - 1))
    return Tensor(np.ascontiguousarray(np.broadcast_to(v, ref_shape)).astype(dtype))


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """Forward marginal draw: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    t = _check_t(t, sched.T)
    x0d, epsd = _data(x0), _data(eps)
    if x0d.shape != epsd.shape:
        raise ValueError(f"eps shape {epsd.shape} != x0 shape {x0d.shape}")
    ab = sched.alpha_bar[t - 1]
    c_sig = _per_sample(np.sqrt(ab), x0d.ndim).astype(x0d.dtype)
    c_noise = _per_sample(np.sqrt(1.0 - ab), x0d.ndim).astype(x0d.dtype)
    out = c_sig * x0d + c_noise * epsd
    return Tensor(out) if isinstance(x0, Tensor) else out


def posterior_mean_variance(x0, xt, t, sched: NoiseSchedule) -> PosteriorStats:
    """Forward-process posterior q(x_{t-1} | x_t, x_0); not differentiable."""
    t = _check_t(t, sched.T)
    x0d, xtd = _data(x0), _data(xt)
    idx = t - 1
    coef_x0 = np.sqrt(sched.alpha_bar_prev[idx]) * sched.beta[idx] / (1.0 - sched.alpha_bar[idx])
    coef_xt = np.sqrt(sched.alpha[idx]) * (1.0 - sched.alpha_bar_prev[idx]) / (1.0 - sched.alpha_bar[idx])
    mean = (_per_sample(coef_x0, x0d.ndim) * x0d.astype(np.float64)
            + _per_sample(coef_xt, x0d.ndim) * xtd.astype(np.float64)).astype(x0d.dtype)
    return PosteriorStats(mean=mean, variance=np.asarray(sched.posterior_var[idx]))


def reverse_mean_from_eps(xt, eps_pred, alpha_t, beta_t, alpha_bar_t):
    """mu = (x_t - beta/sqrt(1-abar) * eps) / sqrt(alpha), from explicit values.

    Differentiable in eps_pred (and xt) when they are graph tensors.
    """
    if _is_graph(eps_pred) or _is_graph(xt):
        e = eps_pred if isinstance(eps_pred, Tensor) else Tensor(eps_pred)
        x = xt if isinstance(xt, Tensor) else Tensor(xt)
        dt = e.dtype
        c1 = _const_full(np.asarray(beta_t) / np.sqrt(1.0 - np.asarray(alpha_bar_t)), e.shape, dt)
        c2 = _const_full(1.0 / np.sqrt(np.asarray(alpha_t)), e.shape, dt)
        return tt.mul(tt.sub(x, tt.mul(e, c1)), c2)
    xd, ed = _data(xt), _data(eps_pred)
    c1 = _per_sample(np.asarray(beta_t) / np.sqrt(1.0 - np.asarray(alpha_bar_t)), xd.ndim)
    c2 = _per_sample(1.0 / np.sqrt(np.asarray(alpha_t)), xd.ndim)
    out = ((xd - c1.astype(xd.dtype) * ed) * c2.astype(xd.dtype))
    return Tensor(out) if isinstance(xt, Tensor) or isinstance(eps_pred, Tensor) else out


def mu_from_eps(xt, t, eps_pred, sched: NoiseSchedule):
    """Reverse-process mean from the noise parameterization."""
    t = _check_t(t, sched.T)
    idx = t - 1
    return reverse_mean_from_eps(xt, eps_pred, sched.alpha[idx], sched.beta[idx],
                                 sched.alpha_bar[idx])


def sigma_from_v_values(v_pred, beta_t, posterior_var_t):
    """Elementwise variance: exp(log btilde + (log beta - log btilde) * v)."""
    log_lo = np.log(np.maximum(np.asarray(posterior_var_t, dtype=np.float64),
                               POSTERIOR_VAR_FLOOR))
    log_hi = np.log(np.asarray(beta_t, dtype=np.float64))
    if _is_graph(v_pred):
        dt = v_pred.dtype
        lo = _const_full(log_lo, v_pred.shape, dt)
        span = _const_full(log_hi - log_lo, v_pred.shape, dt)
        return tt.exp(tt.add(lo, tt.mul(span, v_pred)))
    vd = np.clip(_data(v_pred), 0.0, 1.0)
    lo = _per_sample(log_lo, vd.ndim).astype(vd.dtype)
    span = _per_sample(log_hi - log_lo, vd.ndim).astype(vd.dtype)
    out = np.exp(lo + span * vd)
    return Tensor(out) if isinstance(v_pred, Tensor) else out


def sigma_from_v(v_pred, t, sched: NoiseSchedule):
    """Per-element reverse variance interpolated between btilde_t and beta_t."""
    t = _check_t(t, sched.T)
    idx = t - 1
    return sigma_from_v_values(v_pred, sched.beta[idx], sched.posterior_var[idx])


def gaussian_kl(m1, v1, m2, v2):
    """KL(N(m1, v1) || N(m2, v2)) per element, in nats."""
    if any(_is_graph(a) for a in (m1, v1, m2, v2)):
        ref = next(a for a in (m1, v1, m2, v2) if _is_graph(a))
        dt, shape = ref.dtype, ref.shape

        def lift(a):
            if isinstance(a, Tensor):
                return a
            return _const_full(np.asarray(a, dtype=np.float64), shape, dt)

        m1t, v1t, m2t, v2t = lift(m1), lift(v1), lift(m2), lift(v2)
        ratio = tt.sub(tt.log(v2t), tt.log(v1t))
        dm = tt.sub(m1t, m2t)
        quad = tt.div(tt.add(v1t, tt.square(dm)), v2t)
        return tt.mul(tt.add(ratio, tt.sub(quad, Tensor(np.ones((), dtype=dt)))),
                      Tensor(np.asarray(0.5, dtype=dt)))
    m1d, v1d, m2d, v2d = (_data(a).astype(np.float64) for a in (m1, v1, m2, v2))
    if np.min(v1d) <= 0.0 or np.min(v2d) <= 0.0:
        raise ValueError("gaussian_kl requires positive variances")
    out = 0.5 * (np.log(v2d / v1d) + (v1d + (m1d - m2d) ** 2) / v2d - 1.0)
    if any(isinstance(a, Tensor) for a in (m1, v1, m2, v2)):
        return Tensor(out)
    return out


def gaussian_nll(x, mean, var):
    """-log N(x; mean, var) per element (continuous density), in nats."""
    if any(_is_graph(a) for a in (mean, var)):
        ref = next(a for a in (mean, var) if _is_graph(a))
        dt, shape = ref.dtype, ref.shape

        def lift(a):
            if isinstance(a, Tensor):
                return a
            return _const_full(np.asarray(a, dtype=np.float64), shape, dt)

        xt, mt, vt = lift(x), lift(mean), lift(var)
        two_pi = Tensor(np.asarray(2.0 * np.pi, dtype=dt))
        quad = tt.div(tt.square(tt.sub(xt, mt)), vt)
        return tt.mul(tt.add(tt.log(tt.mul(vt, two_pi)), quad),
                      Tensor(np.asarray(0.5, dtype=dt)))
    xd, md, vd = (_data(a).astype(np.float64) for a in (x, mean, var))
    out = 0.5 * (np.log(2.0 * np.pi * vd) + (xd - md) ** 2 / vd)
    if any(isinstance(a, Tensor) for a in (x, mean, var)):
        return Tensor(out)
    return out


def _model_variance(v_pred, t: int, sched: NoiseSchedule) -> np.ndarray:
    if v_pred is not None:
        return _data(sigma_from_v(_data(v_pred), t, sched))
    if t == 1:
        # fixed-variance decoders fall back to beta_1 (btilde_1 is zero)
        return np.asarray(sched.beta[0])
    return np.asarray(sched.posterior_var[t - 1])


def elbo_terms(x0, model, sched: NoiseSchedule, cond=None,
               rng: np.random.Generator | None = None,
               noise: dict[int, np.ndarray] | None = None) -> dict:
    """Per-term variational bound values in nats, summed per example.

    ``model(x_t, t, cond) -> (eps_pred, v_pred_or_None)``. Each term uses one
    forward-marginal draw x_t ~ q(x_t | x_0) (from ``noise[t]`` when given).
    Returns {"L_T": (N,), "kl": {t: (N,)}, "decoder_nll": (N,), "total": (N,)}.
    """
    x0d = _data(x0).astype(np.float64)
    n = x0d.shape[0]
    if rng is None and noise is None:
        raise ValueError("either rng or explicit noise draws are required")

    def draw(t):
        if noise is not None and t in noise:
            return np.asarray(noise[t], dtype=np.float64)
        return rng.standard_normal(x0d.shape)

    def per_example(term):
        return term.reshape(n, -1).sum(axis=1)

    ab_T = sched.alpha_bar[-1]
    l_t = per_example(gaussian_kl(np.sqrt(ab_T) * x0d, 1.0 - ab_T, 0.0, 1.0))

    kls: dict[int, np.ndarray] = {}
    total = l_t.copy()
    for t in range(2, sched.T + 1):
        xt = q_sample(x0d, t, draw(t), sched)
        post = posterior_mean_variance(x0d, xt, t, sched)
        eps_pred, v_pred = model(xt, t, cond)
        mu = _data(mu_from_eps(xt, t, _data(eps_pred), sched))
        var = _model_variance(v_pred, t, sched)
        kl = per_example(gaussian_kl(post.mean, post.variance, mu, var))
        kls[t] = kl
        total = total + kl

    x1 = q_sample(x0d, 1, draw(1), sched)
    eps_pred, v_pred = model(x1, 1, cond)
    mu1 = _data(mu_from_eps(x1, 1, _data(eps_pred), sched))
    var1 = _model_variance(v_pred, 1, sched)
    dec = per_example(gaussian_nll(x0d, mu1, var1))
    total = total + dec
    return {"L_T": l_t, "kl": kls, "decoder_nll": dec, "total": total}
