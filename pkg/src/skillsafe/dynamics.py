"""Agent dynamics models and their control-affine decompositions.

Three continuous-time models are integrated with an explicit Euler step:

* ``frenet_bicycle``: kinematic bicycle in path coordinates
  (arc position p, lateral offset d, heading error psi, speed v),
  controls (accel, w) with the virtual steering input w = tan(steer):

      p'   = v cos(psi) / (1 - d kappa(p))
      d'   = v sin(psi)
      psi' = (v / L) w - kappa(p) p'
      v'   = accel

  The w substitution keeps the model affine in the control, so every
  barrier and Lyapunov derivative downstream stays exact.

* ``double_integrator``: planar point mass (px, py, vx, vy) driven by
  accelerations (ax, ay).

* ``cartesian_bicycle``: planar bicycle (px, py, cos_t, sin_t, v) with
  controls (accel, w); the heading is carried as a unit vector and
  renormalised after each step.

Velocity caps are applied after the Euler update so the affine
decomposition remains exact at the pre-clamp point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import DomainError, SingularityError

FRENET = "frenet_bicycle"
DOUBLE_INTEGRATOR = "double_integrator"
CARTESIAN = "cartesian_bicycle"

MODELS = (FRENET, DOUBLE_INTEGRATOR, CARTESIAN)

SINGULARITY_EPS = 1e-3


@dataclass(frozen=True)
class BicycleFrenetState:
    p: float
    d: float
    psi: float
    v: float


@dataclass(frozen=True)
class DoubleIntegratorState:
    px: float
    py: float
    vx: float
    vy: float


@dataclass(frozen=True)
class BicycleCartesianState:
    px: float
    py: float
    cos_t: float
    sin_t: float
    v: float


@dataclass(frozen=True)
class DynamicsParams:
    """Model constants, integration step and control/velocity boxes.

    ``curvature`` may be a constant or a function of arc position; it is
    only consulted by the path-coordinate model.
    """

    model: str
    dt: float = 0.1
    wheelbase: float = 3.0
    curvature: float | Callable[[float], float] = 0.0
    accel_min: float = -5.0
    accel_max: float = 3.0
    steer_abs_max: float = 0.5
    v_min: float = 0.0
    v_max: float = 5.0

    def kappa(self, p: float) -> float:
        if callable(self.curvature):
            return float(self.curvature(p))
        return float(self.curvature)


def road_params(dt: float = 0.1, wheelbase: float = 3.0,
                curvature: float | Callable[[float], float] = 0.0,
                accel_min: float = -5.0, accel_max: float = 3.0,
                steer_abs_max: float = 0.5, v_max: float = 5.0) -> DynamicsParams:
    return DynamicsParams(model=FRENET, dt=dt, wheelbase=wheelbase,
                          curvature=curvature, accel_min=accel_min,
                          accel_max=accel_max, steer_abs_max=steer_abs_max,
                          v_min=0.0, v_max=v_max)


def planar_params(model: str = DOUBLE_INTEGRATOR, dt: float = 0.1,
                  accel_bound: float = 1.0, v_cap: float = 10.0,
                  steer_abs_max: float = 1.47, wheelbase: float = 1.0) -> DynamicsParams:
    return DynamicsParams(model=model, dt=dt, wheelbase=wheelbase,
                          accel_min=-accel_bound, accel_max=accel_bound,
                          steer_abs_max=steer_abs_max, v_min=-v_cap, v_max=v_cap)


def state_to_array(state) -> np.ndarray:
    if isinstance(state, BicycleFrenetState):
        return np.array([state.p, state.d, state.psi, state.v])
    if isinstance(state, DoubleIntegratorState):
        return np.array([state.px, state.py, state.vx, state.vy])
    if isinstance(state, BicycleCartesianState):
        return np.array([state.px, state.py, state.cos_t, state.sin_t, state.v])
    raise DomainError(f"unknown state type {type(state)!r}")


def state_from_array(model: str, arr: np.ndarray):
    if model == FRENET:
        return BicycleFrenetState(*map(float, arr))
    if model == DOUBLE_INTEGRATOR:
        return DoubleIntegratorState(*map(float, arr))
    if model == CARTESIAN:
        return BicycleCartesianState(*map(float, arr))
    raise DomainError(f"unknown model {model!r}")


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"non-finite {what}: {arr!r}")


def affine_decomposition(model: str, state, params: DynamicsParams):
    """Drift f(s) and control matrix g(s) with sdot = f + g @ u.

    Control order is (accel, w) for the bicycle models and (ax, ay) for
    the double integrator.
    """
    x = state_to_array(state)
    _check_finite(x, "state")

    if model == DOUBLE_INTEGRATOR:
        f = np.array([x[2], x[3], 0.0, 0.0])
        g = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        return f, g

    if model == FRENET:
        p, d, psi, v = x
        kap = params.kappa(p)
        denom = 1.0 - d * kap
        if denom <= SINGULARITY_EPS:
            raise SingularityError(
                f"1 - d*kappa = {denom:.6g} at p={p:.3f}, d={d:.3f}")
        p_dot = v * math.cos(psi) / denom
        f = np.array([p_dot, v * math.sin(psi), -kap * p_dot, 0.0])
        g = np.array([
            [0.0, 0.0],
            [0.0, 0.0],
            [0.0, v / params.wheelbase],
            [1.0, 0.0],
        ])
        return f, g

    if model == CARTESIAN:
        px, py, c, s, v = x
        f = np.array([v * c, v * s, 0.0, 0.0, 0.0])
        rate = v / params.wheelbase
        # cos' = -sin * (v/L) w, sin' = cos * (v/L) w, v' = accel
        g = np.array([
            [0.0, 0.0],
            [0.0, 0.0],
            [0.0, -s * rate],
            [0.0, c * rate],
            [1.0, 0.0],
        ])
        return f, g

    raise DomainError(f"unknown model {model!r}")


def control_bounds(model: str, params: DynamicsParams):
    """Per-input control box (lower, upper) under the virtual-steer map."""
    if model == DOUBLE_INTEGRATOR:
        return (np.array([params.accel_min, params.accel_min]),
                np.array([params.accel_max, params.accel_max]))
    if model in (FRENET, CARTESIAN):
        w_max = math.tan(params.steer_abs_max)
        return (np.array([params.accel_min, -w_max]),
                np.array([params.accel_max, w_max]))
    raise DomainError(f"unknown model {model!r}")


def _clamp_velocity(model: str, arr: np.ndarray, params: DynamicsParams):
    clamped = False
    if model == DOUBLE_INTEGRATOR:
        for i in (2, 3):
            v = min(max(arr[i], params.v_min), params.v_max)
            clamped = clamped or (v != arr[i])
            arr[i] = v
    else:
        idx = 3 if model == FRENET else 4
        v = min(max(arr[idx], params.v_min), params.v_max)
        clamped = clamped or (v != arr[idx])
        arr[idx] = v
    return arr, clamped


def step_with_info(model: str, state, control: np.ndarray, params: DynamicsParams):
    """Euler update; returns (next_state, velocity_was_clamped)."""
    u = np.asarray(control, dtype=float)
    _check_finite(u, "control")
    lo, hi = control_bounds(model, params)
    if np.any(u < lo - 1e-9) or np.any(u > hi + 1e-9):
        raise DomainError(f"control {u!r} outside bounds [{lo!r}, {hi!r}]")

    f, g = affine_decomposition(model, state, params)
    nxt = state_to_array(state) + params.dt * (f + g @ u)
    nxt, clamped = _clamp_velocity(model, nxt, params)

    if model == CARTESIAN:
        norm = math.hypot(nxt[2], nxt[3])
        if norm <= 0.0:
            raise DomainError("degenerate heading vector")
        nxt[2] /= norm
        nxt[3] /= norm

    _check_finite(nxt, "next state")
    return state_from_array(model, nxt), clamped


def step(model: str, state, control: np.ndarray, params: DynamicsParams):
    """Euler update at params.dt with post-step velocity clamping."""
    return step_with_info(model, state, control, params)[0]


def fallback_control(model: str, state, params: DynamicsParams) -> np.ndarray:
    """Maximum braking toward zero velocity with zero steering.

    Used when the constraint rows of the per-step program admit no
    control; the step is logged and excluded from the safety certificate.
    """
    lo, hi = control_bounds(model, params)
    if model == DOUBLE_INTEGRATOR:
        want = -state_to_array(state)[2:] / params.dt
        return np.clip(want, lo, hi)
    v = state.v
    want_a = min(max(-v / params.dt, lo[0]), hi[0])
    return np.array([want_a, 0.0])


def with_dt(params: DynamicsParams, dt: float) -> DynamicsParams:
    return replace(params, dt=dt)
