"""Blend weights for the 3D and 2D guidance terms after the stage switch.

The clock ``i`` counts stage-2 iterations, starting at 0 at the switch, and
``T_opt`` is the number of stage-2 iterations in the run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import NumericError

KINDS = ("EXP", "LINEAR", "LOG")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "EXP"
    T_opt: int = 1
    verbatim_eq9: bool = False
    clamp: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"schedule kind must be one of {KINDS}, got {self.kind!r}")
        if self.T_opt < 1:
            raise ValueError("T_opt must be at least 1")


def prior_weights(spec: ScheduleSpec, i):
    """Return ``(w_3d, w_2d)`` at stage-2 iteration ``i``.

    The default LINEAR and LOG forms hand weight from the 3D term to the 2D
    term as ``i`` grows.  ``verbatim_eq9`` selects the literal forms
    ``i/T`` and ``log2(i/T)`` for the 3D weight instead.
    """
    if not 0 <= i <= spec.T_opt:
        raise ValueError(f"iteration {i} outside [0, {spec.T_opt}]")
    frac = i / spec.T_opt
    if spec.kind == "EXP":
        w3 = math.exp(-frac)
        return w3, 1.0 - w3
    if spec.kind == "LINEAR":
        if spec.verbatim_eq9:
            return frac, 1.0 - frac
        return 1.0 - frac, frac
    # LOG
    if spec.verbatim_eq9:
        if frac == 0.0:
            if not spec.clamp:
                raise NumericError("log2(0) in verbatim logarithmic schedule", flag="log-of-zero")
            w3 = 0.0
        else:
            w3 = math.log2(frac)
            if spec.clamp:
                w3 = min(1.0, max(0.0, w3))
        return w3, 1.0 - w3
    w2 = math.log2(1.0 + frac)
    return 1.0 - w2, w2


def dynamic_prior_loss(grad_3d, grad_2d, weights):
    """Blend two :class:`c123.guidance.GuidanceGradient` objects into one image-space gradient."""
    if grad_3d.grad.shape != grad_2d.grad.shape:
        raise ValueError(f"gradient shapes differ: {grad_3d.grad.shape} vs {grad_2d.grad.shape}")
    w3, w2 = weights
    return w3 * grad_3d.weighted + w2 * grad_2d.weighted
