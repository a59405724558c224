"""Project-wide numerical constants.

All epsilon floors live here so every module agrees on them.
"""

# Floor added to the aleatoric/epistemic/shape heads after softplus.  The
# virtual-observation count is a ratio of the two uncertainties, so both
# denominators must stay strictly positive.
EPS_UNCERTAINTY = 1e-6

# Below this accumulated rendering weight a ray is treated as empty and the
# background fallback kicks in (normalized weights would be 0/0 otherwise).
EPS_WEIGHT = 1e-8

# Epistemic uncertainty reported for empty rays: an unsupervised ray is
# maximal model ignorance.
EU_EMPTY_RAY = 1.0

# exp() inputs are clamped here; softplus switches to the identity above 30.
EXP_CLAMP = 700.0
SOFTPLUS_LINEAR_ABOVE = 30.0
