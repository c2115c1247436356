"""Follow one attack from inversion to the emitted image.

    python demos/02_single_attack.py [image_index]

Needs the fixtures from ``01_fixtures.py``. The script inverts one validation
image into a pivot code, tunes a private copy of the synthesis weights around
that pivot, and prints what the stopping rule decided.
"""

import sys

import numpy as np
import torch

from aptbench.attack import apt_attack, latent_only_attack, locality_radius_unit
from aptbench.config import RunConfig
from aptbench.models import classify
from aptbench.plots import image_grid, plot_traces
from aptbench.workspace import Workspace

cfg = RunConfig()
ws = Workspace.from_config(cfg)
fx = ws.fixtures(["conv", "mlp", "oracle"])
val = ws.dataset(cfg).split("val")

k = int(sys.argv[1]) if len(sys.argv) > 1 else 0
x, y = val.tensors()
x, y, image_id = x[k], int(y[k]), int(val.ids[k])
print(f"image {image_id}, class {y}")

# stage 1: find the pivot; the generator weights stay untouched
(pivot,) = ws.pivots(x[None], torch.tensor([y]), [image_id], fx, cfg.inversion)
print(f"inversion: perceptual loss {pivot.initial_lpips:.4f} -> {pivot.trace[-1][0]:.4f}")

# stage 2: tune the weights around the pivot until the target is fooled or
# the reconstruction drifts past d
alpha = cfg.attack.alpha_rel * locality_radius_unit(fx.G)
rec = apt_attack(x, pivot, fx, cfg.attack, y, image_id, alpha=alpha)
print(f"apt: {rec.stop_reason} after {rec.iterations_used} iterations, decoy class {rec.c_any}")
print(f"     L_pt at emission {rec.L_pt_at_emission}, predictions {rec.predicted}")

# the same budget spent on the code alone
lat = latent_only_attack(x, pivot, fx, cfg.attack, y, image_id, alpha=alpha)
print(f"latent: {lat.stop_reason} after {lat.iterations_used} iterations, predictions {lat.predicted}")

with torch.no_grad():
    conf = classify(fx.handle("conv"), x[None])[0, y]
print(f"target confidence in the true class: {conf:.3f} -> {rec.conf_true_after}")

row = [x.numpy(), rec.image, lat.image]
print("images (input, apt, latent):", image_grid([row], ws.reports / f"demo-attack-{image_id}.png", scale=6))
print("loss traces:", plot_traces([rec.trace], ws.reports / f"demo-attack-{image_id}-trace.png"))
if rec.emitted:
    print(f"max pixel change {np.abs(rec.image - x.numpy()).max():.3f}")
