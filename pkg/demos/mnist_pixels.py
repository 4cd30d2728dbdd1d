"""
Choosing pixels on MNIST
========================

Each image is observed at ``M`` continuous pixel coordinates via bilinear
interpolation.  The coordinates and a one-hidden-layer network are trained
together, then compared with the highest-variance pixels and with random
pixels, both held fixed while only the network trains.

Pass a directory with the four IDX files as the first argument to use the
full dataset; otherwise the 5000-image sample bundled with ``mlxtend`` is used.
"""

import sys
from pathlib import Path

import numpy as np

from nodeoed.experiments import default_config, image_data, run_image

out = Path("runs") / "demos" / "mnist"
cfg = default_config("image", budget=10, data_dir=sys.argv[1] if len(sys.argv) > 1 else None)
data = image_data(cfg)
print(f"{data.train_images.shape[0]} training and {data.test_images.shape[0]} test images")

rec = run_image(cfg, out / "mse", data=data)
print(f"reconstruction MSE  node {rec['node'].mean:.4f}  variance {rec['variance'].mean:.4f}  "
      f"random {np.mean([r.mean for r in rec['random']]):.4f}")

cls = run_image(cfg.replace(loss="cce"), out / "cce", data=data)
print(f"classification accuracy  node {cls['node'].mean:.3f}  variance {cls['variance'].mean:.3f}  "
      f"random {np.mean([r.mean for r in cls['random']]):.3f}")
print(f"pixel layouts: {out / 'mse' / 'node' / 'design.svg'}")
