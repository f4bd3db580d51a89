"""Fitting one template to a family of similar systems.

Generates projectile trajectories for a sweep of the drag property G,
fits the known structural form to every system, and shows how the fitted
extrinsic parameters trace the hidden intrinsic property.
"""
import numpy as np

from sysform import dimensionalize, fit_all, gen_projectile, parse
from sysform.expr import canonical_string

angle = np.deg2rad(40.0)
collection = gen_projectile(
    g_values=np.linspace(1.0, 5.0, 12),
    launch_angle=angle,
    n_points=40,
    x_max_fraction=0.8,
    noise_sd=0.0,
    seed=7,
)

template = dimensionalize(parse("x + ln(x)"))
print("template:", canonical_string(template.expression))
print("roles:   ", template.slot_roles)

result = fit_all(template, collection, np.random.default_rng(1))
print(f"mean L1 over {len(collection)} systems: {result.mean_l1:.3e}\n")

# The slope slot should equal sec(angle)/G + tan(angle) exactly.
slope_slot = template.linear_slot
sec = 1.0 / np.cos(angle)
print(f"{'system':8s} {'G':>5s} {'fitted slope':>14s} {'sec/G + tan':>14s}")
for ds, row in zip(collection, result.theta_matrix):
    g = ds.annotations["G"]
    truth = sec / g + np.tan(angle)
    print(f"{ds.system_id:8s} {g:5.2f} {row[slope_slot]:14.6f} {truth:14.6f}")
