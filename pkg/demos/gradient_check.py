"""
Checking every derivative
=========================

Each hand-written derivative is compared with central finite differences at
step ``1e-6 (1 + |value|)``: network layers, the three losses, interpolation
with respect to query coordinates, sinogram resampling, the Radon transform
with respect to images and angles, and the full training losses with respect
to the design.
"""

from nodeoed.gradcheck import run_suite

for r in run_suite(seed=0):
    print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:34s} {r.error:.1e}  (tol {r.tol:.0e})")
