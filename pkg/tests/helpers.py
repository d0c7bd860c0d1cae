"""Shared test utilities: finite-difference gradient oracle."""

import numpy as np

from cdm.tensor import Tensor


def directional_gradcheck(make_loss, inputs, dtype, h, tol, probes, rng,
                          per_probe_tol=None, floor=None):
    """Check autodiff against central finite differences on random directions.

    ``make_loss(*tensors) -> scalar Tensor`` must be a pure function of its
    inputs. For each probe, all inputs are perturbed jointly along a random
    unit direction and the directional derivative from autodiff is compared
    against (f(x+hv) - f(x-hv)) / 2h evaluated in the same dtype.

    Asserts the aggregate relative error ||analytic - fd|| / ||fd|| <= tol
    over all probes, and each probe individually against ``per_probe_tol``
    (float32 evaluation noise makes single low-magnitude probes unreliable
    at 1e-3, so the per-probe bound defaults looser there).

    Returns the aggregate relative error.
    """
    dtype = np.dtype(dtype)
    if floor is None:
        floor = 1e-4 if dtype == np.float32 else 1e-10
    if per_probe_tol is None:
        per_probe_tol = max(tol, 1e-2) if dtype == np.float32 else tol
    base = [np.ascontiguousarray(a, dtype=dtype) for a in inputs]

    params = [Tensor(a.copy(), requires_grad=True) for a in base]
    loss = make_loss(*params)
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def eval_at(arrays):
        return make_loss(*[Tensor(a) for a in arrays]).item()

    # absolute noise floor of the central difference: loss values are only
    # resolved to ~eps * |f|, which divides through by 2h
    f0 = abs(eval_at(base))
    fd_noise = 16.0 * np.finfo(dtype).eps * max(1.0, f0) / (2.0 * h)

    analytic_all = np.zeros(probes)
    fd_all = np.zeros(probes)
    for i in range(probes):
        dirs = [rng.standard_normal(a.shape) for a in base]
        norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [(d / norm).astype(dtype) for d in dirs]
        analytic = sum(float((g.astype(np.float64) * d.astype(np.float64)).sum())
                       for g, d in zip(grads, dirs))
        plus = eval_at([a + h * d for a, d in zip(base, dirs)])
        minus = eval_at([a - h * d for a, d in zip(base, dirs)])
        fd = (plus - minus) / (2.0 * h)
        err = abs(analytic - fd)
        bound = per_probe_tol * max(abs(analytic), abs(fd), floor) + fd_noise
        assert err <= bound, \
            f"probe {i}: directional derivative mismatch: {analytic} vs {fd} (err {err:.3g})"
        analytic_all[i] = analytic
        fd_all[i] = fd
    denom = max(float(np.linalg.norm(analytic_all)), float(np.linalg.norm(fd_all)), floor)
    aggregate = float(np.linalg.norm(analytic_all - fd_all)) / denom
    assert aggregate <= tol, f"aggregate gradient error {aggregate:.3g} > {tol}"
    return aggregate


def weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    """Scalar projection sum(w * y), a generic loss head for gradcheck."""
    return (y * Tensor(np.asarray(w, dtype=y.dtype))).sum()


class GaussianChainOracle:
    """Closed-form optimal reverse model for scalar data x0 ~ N(m0, v0).

    With Gaussian data every forward marginal and reverse conditional is
    Gaussian and affine, so the exact marginal-posterior reverse model (and
    the exact data NLL under it) can be computed without any learning. The
    model is exposed through the standard (eps, v) parameterization.
    """

    def __init__(self, sched, m0: float, v0: float):
        from cdm.schedule import POSTERIOR_VAR_FLOOR

        self.sched = sched
        self.m0, self.v0 = m0, v0
        T = sched.T
        # marginal moments, index t = 0..T
        self.M = np.concatenate(([m0], np.sqrt(sched.alpha_bar) * m0))
        self.V = np.concatenate(([v0], sched.alpha_bar * v0 + (1.0 - sched.alpha_bar)))
        # reverse conditionals x_{t-1} | x_t ~ N(a_t x_t + b_t, c_t), t = 1..T
        self.a = np.zeros(T + 1)
        self.b = np.zeros(T + 1)
        self.c = np.zeros(T + 1)
        for t in range(1, T + 1):
            cov = np.sqrt(sched.alpha[t - 1]) * self.V[t - 1]
            self.a[t] = cov / self.V[t]
            self.b[t] = self.M[t - 1] - self.a[t] * self.M[t]
            self.c[t] = self.V[t - 1] - cov * cov / self.V[t]
        # v-head encoding of c_t within the [btilde, beta] log bracket
        lo = np.log(np.maximum(sched.posterior_var, POSTERIOR_VAR_FLOOR))
        hi = np.log(sched.beta)
        self.v_enc = (np.log(self.c[1:]) - lo) / (hi - lo)
        assert np.all(self.v_enc > 0.0) and np.all(self.v_enc <= 1.0 + 1e-12)

    def reverse_mean_var(self, x_t, t: int):
        return self.a[t] * x_t + self.b[t], self.c[t]

    def __call__(self, x_t, t: int, cond=None):
        """(eps_pred, v_pred) reproducing the exact reverse conditional."""
        s = self.sched
        mu, _ = self.reverse_mean_var(x_t, t)
        eps = (x_t - np.sqrt(s.alpha[t - 1]) * mu) * np.sqrt(1.0 - s.alpha_bar[t - 1]) / s.beta[t - 1]
        v = np.full_like(np.asarray(x_t, dtype=np.float64), self.v_enc[t - 1])
        return eps, v

    def prior_chain_moments(self, t_start: int | None = None,
                            start_mean: float = 0.0, start_var: float = 1.0):
        """Mean/variance of x0 under the model chain started at t_start."""
        t_start = self.sched.T if t_start is None else t_start
        m, v = start_mean, start_var
        for t in range(t_start, 0, -1):
            m = self.a[t] * m + self.b[t]
            v = self.a[t] ** 2 * v + self.c[t]
        return m, v

    def exact_nll(self) -> float:
        """Cross-entropy E_{x0~q}[-log p(x0)] with p from the N(0,1) prior."""
        mp, vp = self.prior_chain_moments()
        return 0.5 * np.log(2.0 * np.pi * vp) + (self.v0 + (self.m0 - mp) ** 2) / (2.0 * vp)

    def grid_nll(self, half_width: float = 12.0, n: int = 2401) -> float:
        """Same quantity via density propagation on a grid (independent route)."""
        xs = np.linspace(-half_width, half_width, n)
        dx = xs[1] - xs[0]
        dens = np.exp(-0.5 * xs ** 2) / np.sqrt(2.0 * np.pi)
        for t in range(self.sched.T, 0, -1):
            kern = np.exp(-0.5 * (xs[:, None] - (self.a[t] * xs[None, :] + self.b[t])) ** 2
                          / self.c[t]) / np.sqrt(2.0 * np.pi * self.c[t])
            dens = kern @ dens * dx
        q0 = np.exp(-0.5 * (xs - self.m0) ** 2 / self.v0) / np.sqrt(2.0 * np.pi * self.v0)
        return float(np.trapezoid(-q0 * np.log(np.maximum(dens, 1e-300)), xs))
