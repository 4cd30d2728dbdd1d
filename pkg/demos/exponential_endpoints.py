"""
Sampling times for exponential growth
=====================================

Fit ``log y = log b + a t`` from ``m`` noisy samples on ``[0, 1]`` and let the
sampling times train together with the network that estimates ``(log b, a)``.
The least-squares risk is minimised by putting every time at an endpoint, with
roughly ``m (sqrt 2 - 1)`` of them at ``t = 1``.
"""

import math
from pathlib import Path

from nodeoed.analytic import optimal_split, risk_endpoint
from nodeoed.experiments import default_config, run_exponential, run_sweep

out = Path("runs") / "demos" / "exponential"

# closed-form reference for a few budgets
for m in (3, 10, 50):
    k, F = optimal_split(m)
    print(f"m={m:3d}  k*={k:3d}  F(k*)={F:.4f}  F(k*+1)={risk_endpoint(m, k + 1):.4f}")

# three sampling times, trained jointly with a 2m -> 256 -> 2 network
cfg = default_config("exponential", budget=3, epochs=4000, batch_size=1024)
trace, summary = run_exponential(cfg, out / "m3")
print("final times:", [round(t, 4) for t in summary["final_design"]])
print("points at 0 / 1:", summary["k0"], summary["k1"])

# larger budgets drift towards the predicted fractions
rows = run_sweep(default_config("exponential"), [10, 20, 30], out / "sweep")
for r in rows:
    print(f"m={r['m']}: learned k1/m = {r['k1_fraction']:.3f}  (limit {math.sqrt(2) - 1:.3f})")
print(f"plots: {out / 'm3' / 'locations.svg'}, {out / 'sweep' / 'fractions.svg'}")
