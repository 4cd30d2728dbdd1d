"""
Adding angles in rounds
=======================

Start from five equidistant views of five fixed objects.  Each round trains
the network and five new angles while the angles and data already acquired
enter as fixed inputs, then "measures" the objects at the new angles.
"""

from pathlib import Path

import numpy as np

from nodeoed.experiments import default_config, run_ct_adaptive

out = Path("runs") / "demos" / "adaptive"
state = run_ct_adaptive(default_config("ct", adaptive=True, increment=5, rounds=2), n_truths=5, out_dir=out)
for i, med in enumerate(state.medians):
    print(f"round {i}: {5 * (i + 1)} angles, median MSE over the objects {med:.5f}")
print("all angles:", np.round(np.sort(state.design), 3).tolist())
print("stored measurements:", state.measurements.shape)
