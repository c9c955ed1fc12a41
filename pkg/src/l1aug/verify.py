"""Estimation-error bound experiments on synthetic systems with known errors.

The harness builds systems where the true field, the disturbance, and the
model error are closed-form, so the model-error bound eps_l is exact rather
than estimated. It then runs the adaptive machinery against the synthetic
model (anchoring and switching included) while co-integrating the
prediction-error dynamics in continuous time, and records the estimation
error e(t) = true rate - affine model rate - uncertainty estimate at a dense
grid of times. The headline checks: e stays below eps_l + eps_a on the first
sampling interval, and its supremum afterwards shrinks linearly with the
sampling time toward a 2 eps_a floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .affine import AffineModel, affinize, switching_check
from .envsim import ConfigError, rk4_step
from .l1core import L1Config, adapt, decompose, filter_step

Array = np.ndarray


class _AnalyticModel:
    """Closed-form rate model wrapped in the ensemble prediction protocol."""

    def __init__(self, fn: Callable[[Array, Array], Array], jac_u: Callable[[Array, Array], Array] | None, m: int):
        self._fn = fn
        self._jac_u = jac_u
        self._m = m

    def predict_mean(self, x: Array, u: Array) -> Array:
        return self._fn(np.asarray(x, dtype=float), np.asarray(u, dtype=float))

    def jacobian_u(self, x: Array, u: Array) -> Array:
        if self._jac_u is not None:
            return self._jac_u(np.asarray(x, dtype=float), np.asarray(u, dtype=float))
        # Central differences; exact for models affine or quadratic in u.
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        h = 1e-6
        cols = []
        for j in range(self._m):
            e = np.zeros_like(u)
            e[j] = h
            cols.append((self._fn(x, u + e) - self._fn(x, u - e)) / (2 * h))
        return np.stack(cols, axis=1)


@dataclass(frozen=True)
class SyntheticSpec:
    """A fully known system for exercising the estimation-error bound.

    The synthetic learned model is F + delta (rates, not increments), so the
    residual error is W - delta and eps_l must upper-bound its norm over the
    test box; ``check_assumption_bound`` spot-checks that by sampling.
    """

    n: int
    m: int
    drift: Callable[[Array, Array], Array]
    disturbance: Callable[[float, Array, Array], Array]
    model_error: Callable[[Array, Array], Array]
    eps_l: float
    eps_a: float
    x0: Array
    u_star: Callable[[float], Array]
    state_low: Array
    state_high: Array
    input_low: Array
    input_high: Array
    t_max: float = 6.0
    ts_grid: tuple[float, ...] = (0.02, 0.01, 0.005)
    substeps: int = 8
    model_jacobian_u: Callable[[Array, Array], Array] | None = None

    def __post_init__(self):
        if self.eps_l < 0 or self.eps_a <= 0:
            raise ConfigError("SyntheticSpec: need eps_l >= 0 and eps_a > 0")
        if self.t_max <= 0 or not self.ts_grid:
            raise ConfigError("SyntheticSpec: need t_max > 0 and a nonempty ts_grid")

    def model(self) -> _AnalyticModel:
        def fhat(x: Array, u: Array) -> Array:
            return self.drift(x, u) + self.model_error(x, u)

        return _AnalyticModel(fhat, self.model_jacobian_u, self.m)

    def residual_error(self, t: float, x: Array, u: Array) -> Array:
        """l(t, x, u) = true rate minus model rate = W - delta."""
        return self.disturbance(t, x, u) - self.model_error(x, u)


@dataclass
class ErrorTrace:
    """Dense estimation-error record for one sampling time."""

    ts: float
    times: Array
    e_norms: Array
    sigma_per_interval: Array
    first_interval_max: float
    post_sup: float
    n_intervals: int
    switch_count: int


def run_bound_experiment(spec: SyntheticSpec, cfg: L1Config) -> ErrorTrace:
    """Drive the synthetic system with the adaptive loop and record e(t).

    Between samples the true state and the prediction error are integrated
    jointly with RK4 substeps, which keeps the interval response of the error
    dynamics exact to well below the bound tolerances. The estimate update,
    the matched/unmatched split, the filter, and the switching law run at the
    sample boundaries exactly as in the discrete controller.
    """
    ts = cfg.ts
    n_int = int(round(spec.t_max / ts))
    model = spec.model()

    x = spec.x0.astype(float).copy()
    xtilde = np.zeros(spec.n)
    sigma_rate = np.zeros(spec.n)
    q = np.zeros(spec.m)
    am: AffineModel | None = None

    times: list[float] = []
    e_norms: list[float] = []
    sigmas = np.zeros((n_int, spec.n))
    switch_count = 0

    for i in range(n_int):
        t0 = i * ts
        u_rl = np.asarray(spec.u_star(t0), dtype=float)
        if am is None:
            am = affinize(model, u_rl)
        elif switching_check(am, x, u_rl, spec.eps_a).switch:
            am = affinize(model, u_rl)
            switch_count += 1

        sigma_rate = adapt(xtilde, cfg)
        sigmas[i] = sigma_rate
        f_anchor, jac = am.parts(x)
        sigma_m, _ = decompose(jac * ts, sigma_rate, ts)
        q, u_a = filter_step(q, sigma_m, cfg)
        u = np.clip(u_rl + u_a, spec.input_low, spec.input_high)

        anchor = am

        def joint_field(t: float, z: Array) -> Array:
            xt, et = z[: spec.n], z[spec.n :]
            rate_true = spec.drift(xt, u) + spec.disturbance(t, xt, u)
            d = rate_true - anchor.predict(xt, u)
            return np.concatenate([rate_true, cfg.as_diag * et + sigma_rate - d])

        def record(t: float, xt: Array) -> None:
            d = spec.drift(xt, u) + spec.disturbance(t, xt, u) - anchor.predict(xt, u)
            times.append(t)
            e_norms.append(float(np.linalg.norm(d - sigma_rate)))

        z = np.concatenate([x, xtilde])
        h = ts / spec.substeps
        record(t0, x)
        for k in range(spec.substeps):
            z = rk4_step(joint_field, t0 + k * h, z, h)
            if k < spec.substeps - 1:
                record(t0 + (k + 1) * h, z[: spec.n])
        x, xtilde = z[: spec.n], z[spec.n :]

    times_arr = np.asarray(times)
    e_arr = np.asarray(e_norms)
    first_mask = times_arr < ts
    return ErrorTrace(
        ts=ts,
        times=times_arr,
        e_norms=e_arr,
        sigma_per_interval=sigmas,
        first_interval_max=float(e_arr[first_mask].max()),
        post_sup=float(e_arr[~first_mask].max()),
        n_intervals=n_int,
        switch_count=switch_count,
    )


def check_assumption_bound(spec: SyntheticSpec, samples: int, rng: np.random.Generator) -> dict:
    """Monte-Carlo estimate of sup ||true rate - model rate|| over the test box."""
    if samples < 1:
        raise ConfigError("check_assumption_bound: samples must be >= 1")
    worst = 0.0
    for _ in range(samples):
        t = rng.uniform(0.0, spec.t_max)
        x = rng.uniform(spec.state_low, spec.state_high)
        u = rng.uniform(spec.input_low, spec.input_high)
        worst = max(worst, float(np.linalg.norm(spec.residual_error(t, x, u))))
    return {"sup_estimate": worst, "eps_l": spec.eps_l, "passed": worst <= spec.eps_l, "samples": samples}


def fit_sup_line(ts_values: Array, sups: Array, eps_a: float) -> dict:
    """Least-squares slope of sup(ts) through the fixed 2*eps_a intercept."""
    ts_values = np.asarray(ts_values, dtype=float)
    sups = np.asarray(sups, dtype=float)
    shifted = sups - 2.0 * eps_a
    slope = float(shifted @ ts_values / (ts_values @ ts_values))
    fitted = 2.0 * eps_a + slope * ts_values
    rel_residual = float(np.linalg.norm(sups - fitted) / max(np.linalg.norm(sups), 1e-300))
    return {"intercept": 2.0 * eps_a, "slope": slope, "rel_residual": rel_residual}


def run_ts_grid(spec: SyntheticSpec, as_value: float = -1.0, omega_factor: float = 0.35) -> dict:
    """Run the bound experiment across the sampling-time grid and judge it.

    Checks, per sampling time: the first-interval bound eps_l + eps_a; across
    the grid: monotone post-interval sups and a halving ratio of the
    2*eps_a-shifted sups inside [1.5, 2.5] wherever the shifted value stays
    positive. Also reports the fitted slope line and switch-storm flags
    (more than half the steps switching).
    """
    traces = []
    for ts in spec.ts_grid:
        cfg = L1Config(ts=ts, as_diag=np.full(spec.n, as_value), omega=omega_factor / ts, eps_a=spec.eps_a)
        traces.append(run_bound_experiment(spec, cfg))

    first_bound = spec.eps_l + spec.eps_a + 1e-12
    first_ok = [tr.first_interval_max <= first_bound for tr in traces]
    sups = np.asarray([tr.post_sup for tr in traces])
    ts_values = np.asarray([tr.ts for tr in traces])
    order = np.argsort(-ts_values)
    sups_sorted = sups[order]
    monotone = bool(np.all(np.diff(sups_sorted) <= 1e-12))

    ratios = []
    ratios_ok = True
    shifted = sups_sorted - 2.0 * spec.eps_a
    for a, b in zip(shifted[:-1], shifted[1:]):
        if a > 0 and b > 0:
            ratio = float(a / b)
            ratios.append(ratio)
            ratios_ok = ratios_ok and (1.5 <= ratio <= 2.5)
        else:
            ratios.append(float("nan"))

    fit = fit_sup_line(ts_values, sups, spec.eps_a)
    # When every sup already sits below the 2*eps_a floor the bound holds
    # trivially and no sampling-time trend is measurable.
    trend_measurable = bool(np.any(shifted > 0))
    slope_ok = fit["slope"] >= 0.0 or not trend_measurable
    report = {
        "per_ts": [
            {
                "ts": tr.ts,
                "first_interval_max": tr.first_interval_max,
                "post_sup": tr.post_sup,
                "switch_count": tr.switch_count,
                "n_intervals": tr.n_intervals,
                "switch_storm": tr.switch_count > 0.5 * tr.n_intervals,
            }
            for tr in traces
        ],
        "first_interval_bound": first_bound,
        "first_interval_pass": all(first_ok),
        "monotone_pass": monotone,
        "halving_ratios": ratios,
        "halving_pass": ratios_ok,
        "fit": fit,
        "trend_measurable": trend_measurable,
        "slope_nonnegative": slope_ok,
        "pass": all(first_ok) and monotone and ratios_ok and slope_ok,
    }
    return report


# --- Spec presets -----------------------------------------------------------


def scalar_constant_spec(
    d: float = 0.5,
    eps_a: float = 0.1,
    t_max: float = 3.0,
    ts_grid: tuple[float, ...] = (0.1,),
) -> SyntheticSpec:
    """Scalar integrator with a constant matched disturbance and exact model.

    The model is affine in u, so the affinization error is identically zero
    and the residual error is exactly the constant d; eps_l = |d|.
    """

    def drift(x, u):
        return np.array([u[0]])

    def disturbance(t, x, u):
        return np.array([d])

    def model_error(x, u):
        return np.zeros(1)

    return SyntheticSpec(
        n=1, m=1, drift=drift, disturbance=disturbance, model_error=model_error,
        eps_l=abs(d), eps_a=eps_a,
        x0=np.zeros(1), u_star=lambda t: np.zeros(1),
        state_low=np.array([-5.0]), state_high=np.array([5.0]),
        input_low=np.array([-3.0]), input_high=np.array([3.0]),
        t_max=t_max, ts_grid=tuple(ts_grid),
    )


def default_synthetic_spec(
    eps_a: float = 2e-4,
    t_max: float = 6.0,
    ts_grid: tuple[float, ...] = (0.02, 0.01, 0.005),
) -> SyntheticSpec:
    """Planar nonlinear system with a time-varying disturbance and model error.

    eps_l is the analytic triangle-inequality bound on ||W - delta||; the
    model error includes a mild input nonlinearity so the switching law is
    exercised without storming at the default tolerance.
    """
    w_const = 0.25
    w_amp = 0.45
    w_freq = 1.7
    d1 = 0.12
    d2 = 0.08
    du = 0.05

    def drift(x, u):
        return np.array([x[1], -1.2 * x[0] - 0.6 * x[1] + 0.4 * math.sin(x[0]) + u[0]])

    def disturbance(t, x, u):
        return np.array([0.0, w_const + w_amp * math.sin(w_freq * t)])

    def model_error(x, u):
        return np.array([d1 * math.sin(x[0]), d2 * math.tanh(x[1]) + du * math.sin(1.3 * u[0])])

    # sup||W - delta|| <= sqrt(d1^2 + (w_const + w_amp + d2 + du)^2)
    eps_l = math.sqrt(d1**2 + (w_const + w_amp + d2 + du) ** 2)

    def u_star(t):
        return np.array([0.8 * math.sin(1.1 * t) + 0.5 * math.sin(0.37 * t + 0.5) + 0.3 * math.sin(2.3 * t + 1.1)])

    return SyntheticSpec(
        n=2, m=1, drift=drift, disturbance=disturbance, model_error=model_error,
        eps_l=eps_l, eps_a=eps_a,
        x0=np.array([0.3, 0.0]), u_star=u_star,
        state_low=np.array([-4.0, -4.0]), state_high=np.array([4.0, 4.0]),
        input_low=np.array([-2.0]), input_high=np.array([2.0]),
        t_max=t_max, ts_grid=ts_grid,
    )


SPEC_PRESETS: dict[str, Callable[..., SyntheticSpec]] = {
    "default": default_synthetic_spec,
    "scalar_constant": scalar_constant_spec,
}


def make_synthetic_spec(preset: str, **kwargs) -> SyntheticSpec:
    if preset not in SPEC_PRESETS:
        raise ConfigError(f"unknown synthetic preset {preset!r}; expected one of {sorted(SPEC_PRESETS)}")
    import inspect

    builder = SPEC_PRESETS[preset]
    allowed = set(inspect.signature(builder).parameters)
    unknown = set(kwargs) - allowed
    if unknown:
        raise ConfigError(f"preset {preset}: unknown params {sorted(unknown)}; allowed: {sorted(allowed)}")
    return builder(**kwargs)
