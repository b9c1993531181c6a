"""Reference update-rule texts in the infix grammar.

The momentum weights ``c_i`` inside ``TIME_DECAY_RULE`` are not published
with the rule; the values used here (0.1 * 0.8**i) are illustrative.
``sign(u)`` is written as ``pow_s(u, 0)``, which is exactly sign(u).
"""

_TANH_TERMS = " + ".join(f"{0.1 * 0.8 ** i!r}*tanh(g[{i}])" for i in range(20))

# Time-decaying step size wrapped around an erfc/sinh/tanh momentum core.
TIME_DECAY_RULE = f"0.013*exp(-0.835*asinh(t[0]))*(erfc(sinh(g[0]) + {_TANH_TERMS}) - 1)"

# DM rule distilled on the MLP problem.
DM_MLP_RULE = (
    "-0.02*g[0] - 0.01*pow_s(g[0]*g[1], 0)*sinh(sqrt_s(pow_s(asinh(g[0]), 2.2)"
    " + 0.7*pow_s(asinh(g[1]), 2.3) + 0.5*pow_s(asinh(g[3]), 1.7)"
    " + 0.2*pow_s(asinh(g[4]), 2.1)))"
)

# Same problem with hyperbolic operators excluded from the search.
DM_MLP_RULE_NO_HYPERBOLIC = (
    "-0.02*g[0] - 0.01*pow_s(g[0]*g[1], 0)*sqrt_s(sq(g[0]) + 0.9*sq(g[1])"
    " + 0.8*sq(g[2]) + 0.7*sq(g[3]) + 0.5*pow_s(g[4], 2.4) + 0.4*sq(g[5])"
    " + 0.3*g[6] + 0.1*pow_s(g[7], 2.5))"
)

# DM rule distilled on the CIFAR-MLP problem: Adam-like with tanh thresholding.
DM_CIFAR_RULE = (
    "-0.02*(g[0] + 0.4*g[1] + 0.2*g[2] - 0.01*tanh(g[3]) - 0.01*tanh(g[4]))"
    "/sqrt_s(sq(g[0]) + sq(g[1]) + sq(g[2]))"
)

ALL_RULES = {
    "time_decay": TIME_DECAY_RULE,
    "dm_mlp": DM_MLP_RULE,
    "dm_mlp_no_hyperbolic": DM_MLP_RULE_NO_HYPERBOLIC,
    "dm_cifar": DM_CIFAR_RULE,
}
