"""
When to hand over from structure to texture
===========================================

The detector watches multi-view similarity every h steps and fires once the
mean relative increment over the last L detections drops below delta.  After
that the two guidance signals are blended on a schedule.
"""

import math

from c123.boundary import BoundaryConfig, SimilarityHistory, changing_rate, should_transition
from c123.scheduler import ScheduleSpec, prior_weights

cfg = BoundaryConfig()  # h=20, L=5, delta=0.00025
history = SimilarityHistory()
for k in range(1, 200):
    history.append(k, 0.8 * (1 - math.exp(-k / 10)))
    if should_transition(history, cfg):
        break
print(f"fires at detection {k}, iteration {k * cfg.h}, rate {changing_rate(history, cfg.L):.6f}")

# with 10000 steps total, the blend runs over what is left
spec_kw = dict(T_opt=10000 - k * cfg.h)
for kind in ("EXP", "LINEAR", "LOG"):
    spec = ScheduleSpec(kind=kind, **spec_kw)
    marks = [prior_weights(spec, round(f * spec.T_opt)) for f in (0, 0.25, 0.5, 0.75, 1)]
    print(kind.ljust(6), "  ".join(f"{w3:.3f}/{w2:.3f}" for w3, w2 in marks))
