"""Update rules: norm-constrained RMSprop and Adam, with their schedules.

The RMSprop variant rescales the whole preconditioned gradient to an exact
global length ell_t (one scalar over the concatenated parameter vector), with
ell following a geometric decay; that rescaling is the defining property, so
the norm arithmetic runs in float64 regardless of parameter dtype.  Adam is
the standard bias-corrected rule with a linearly decaying learning rate.

Both schedules branch at their endpoints so t=0 and t>=total_steps return the
configured values exactly, with no floating-point drift.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SCHEDULE_KINDS = ("linear", "exponential")


@dataclass(frozen=True)
class Schedule:
    kind: str
    start: float
    end: float
    total_steps: int

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule {self.kind!r}; expected {SCHEDULE_KINDS}")
        if self.total_steps < 1:
            raise ConfigError("schedule needs total_steps >= 1")
        if self.kind == "exponential" and (self.start <= 0 or self.end <= 0):
            raise ConfigError("exponential schedule needs positive endpoints")

    def value(self, t):
        return schedule_value(self, t)


def schedule_value(schedule, t):
    """Schedule value at step t; clamps beyond total_steps, exact endpoints."""
    if t < 0:
        raise ConfigError("schedule step must be nonnegative")
    if t == 0:
        return schedule.start
    if t >= schedule.total_steps:
        return schedule.end
    frac = t / schedule.total_steps
    if schedule.kind == "linear":
        return schedule.start + (schedule.end - schedule.start) * frac
    return schedule.start * (schedule.end / schedule.start) ** frac


def _zeros_like_params(params):
    return {name: np.zeros_like(arr) for name, arr in params.items()}


@dataclass
class RmsNormState:
    """Mean-square accumulators plus the ell decay schedule."""

    acc: dict
    schedule: Schedule
    rho: float = 0.9
    eps: float = 1e-8
    step: int = 0

    kind = "rmsprop-normalized"

    @classmethod
    def init(cls, params, schedule, rho=0.9, eps=1e-8):
        return cls(acc=_zeros_like_params(params), schedule=schedule, rho=rho, eps=eps)

    def current_ell(self):
        return schedule_value(self.schedule, self.step)

    def tensors(self):
        return {f"opt.acc.{name}": arr for name, arr in self.acc.items()}

    def scalars(self):
        return {
            "kind": self.kind,
            "rho": self.rho,
            "eps": self.eps,
            "step": self.step,
            "schedule": vars(self.schedule) | {},
        }


@dataclass
class AdamState:
    """First/second moment accumulators plus the linear lr schedule."""

    m: dict
    v: dict
    schedule: Schedule
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    kind = "adam"

    @classmethod
    def init(cls, params, schedule, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(m=_zeros_like_params(params), v=_zeros_like_params(params),
                   schedule=schedule, beta1=beta1, beta2=beta2, eps=eps)

    def current_lr(self):
        return schedule_value(self.schedule, self.step)

    def tensors(self):
        out = {f"opt.m.{name}": arr for name, arr in self.m.items()}
        out.update({f"opt.v.{name}": arr for name, arr in self.v.items()})
        return out

    def scalars(self):
        return {
            "kind": self.kind,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "schedule": vars(self.schedule) | {},
        }


def rmsprop_normalized_step(params, grads, state):
    """One update of global length ell_t (exactly, up to dtype rounding).

    acc <- rho*acc + (1-rho)*g^2; v* = g/sqrt(acc+eps); the concatenated v*
    is rescaled to 2-norm ell_t and subtracted.  An all-zero v* (possible
    only for all-zero grads) skips the update with a warning instead of
    dividing by zero.
    """
    if params.keys() != state.acc.keys() or params.keys() != grads.keys():
        raise ConfigError("optimizer state does not match parameter tensors")
    ell = schedule_value(state.schedule, state.step)
    state.step += 1
    vstar = {}
    sq_sum = 0.0
    for name in sorted(params):
        g = grads[name]
        acc = state.acc[name]
        acc *= state.rho
        acc += (1.0 - state.rho) * np.square(g)
        v = g / np.sqrt(acc + state.eps)
        vstar[name] = v
        sq_sum += float(np.sum(np.square(v), dtype=np.float64))
    if sq_sum == 0.0:
        warnings.warn("all-zero update direction; skipping the parameter update")
        return params
    scale = ell / np.sqrt(sq_sum)
    for name in sorted(params):
        arr = params[name]
        arr -= np.asarray(scale * vstar[name], dtype=arr.dtype)
    return params


def adam_step(params, grads, state):
    """One bias-corrected Adam update at the scheduled learning rate."""
    if params.keys() != state.m.keys() or params.keys() != grads.keys():
        raise ConfigError("optimizer state does not match parameter tensors")
    lr = schedule_value(state.schedule, state.step)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        arr = params[name]
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        arr -= np.asarray(update, dtype=arr.dtype)
    return params


def make_optimizer(name, params, lr_start, lr_min, ell_start, ell_end, total_steps):
    """Optimizer state from config values."""
    if name == "adam":
        sched = Schedule("linear", lr_start, lr_min, total_steps)
        return AdamState.init(params, sched)
    if name == "rmsprop-normalized":
        sched = Schedule("exponential", ell_start, ell_end, total_steps)
        return RmsNormState.init(params, sched)
    raise ConfigError(f"unknown optimizer {name!r}; expected adam or rmsprop-normalized")


def optimizer_step(params, grads, state):
    if isinstance(state, AdamState):
        return adam_step(params, grads, state)
    if isinstance(state, RmsNormState):
        return rmsprop_normalized_step(params, grads, state)
    raise ConfigError(f"unknown optimizer state {type(state).__name__}")


def optimizer_from_parts(scalars, tensors):
    """Rebuild optimizer state from checkpoint scalars + tensor payloads."""
    sched = Schedule(**scalars["schedule"])
    kind = scalars["kind"]
    if kind == "adam":
        m = {k[len("opt.m."):]: v for k, v in tensors.items() if k.startswith("opt.m.")}
        v = {k[len("opt.v."):]: t for k, t in tensors.items() if k.startswith("opt.v.")}
        return AdamState(m=m, v=v, schedule=sched, beta1=scalars["beta1"],
                         beta2=scalars["beta2"], eps=scalars["eps"], step=scalars["step"])
    if kind == "rmsprop-normalized":
        acc = {k[len("opt.acc."):]: v for k, v in tensors.items() if k.startswith("opt.acc.")}
        return RmsNormState(acc=acc, schedule=sched, rho=scalars["rho"],
                            eps=scalars["eps"], step=scalars["step"])
    raise ConfigError(f"unknown optimizer kind {kind!r} in checkpoint")
