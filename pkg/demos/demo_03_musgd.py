"""
MuSGD on a quadratic bowl
=========================

Matrix parameters take a blend of the raw momentum and its orthogonalized version.
"""

# %%
# Orthogonalization
# -----------------
# Five Newton-Schulz steps bring a random matrix close to the polar factor U V^T.
import numpy as np

from yolo26desk.optim import (ACCURATE_SCHEDULE, MUON_QUINTIC, MomentumState, MuSGDConfig, musgd_step,
                              newton_schulz_orthogonalize, route_params)

rng = np.random.default_rng(0)
m = rng.standard_normal((64, 48))
u, _, vt = np.linalg.svd(m, full_matrices=False)
polar = u @ vt
for name, coeffs in (("fixed quintic", MUON_QUINTIC), ("schedule", ACCURATE_SCHEDULE)):
    o = newton_schulz_orthogonalize(m, 5, coeffs)
    print(f"{name:14s} rel err {np.linalg.norm(o - polar) / np.linalg.norm(polar):.4f}  "
          f"singular values {np.linalg.svd(o, compute_uv=False)[[0, -1]].round(3)}")

# %%
# Descending the bowl
# -------------------
# f(W) = 0.5 ||W - W*||^2 with the default config.
target = rng.standard_normal((16, 12))
params = {"w": np.zeros_like(target)}
routes = route_params([("w", target.shape)])
state, cfg = MomentumState(), MuSGDConfig()
for step in range(101):
    diff = params["w"] - target
    if step % 20 == 0:
        print(f"step {step:3d} loss {0.5 * np.sum(diff * diff):8.4f}")
    musgd_step(params, {"w": diff}, state, cfg, routes)

# %%
# With blend_lambda = 0 the same call is plain SGD with momentum.
print(route_params([("conv.weight", (32, 16, 3, 3)), ("conv.bias", (32,))]))
