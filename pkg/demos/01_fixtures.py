"""Build the frozen fixtures and look at what the generator learned.

Run from the repository root:

    python demos/01_fixtures.py

Everything is written under $APTBENCH_HOME (default ``runs``). Pretraining
takes a few minutes on one CPU and is skipped when the checkpoints exist.
"""

import torch

from aptbench.config import RunConfig
from aptbench.experiments import ingest_data, pretrain_all
from aptbench.models import classify
from aptbench.plots import image_grid
from aptbench.pretrain import sample_images
from aptbench.workspace import Workspace

cfg = RunConfig()
ws = Workspace.from_config(cfg)

data = ingest_data(ws, cfg)
print({s: len(data.split(s)) for s in ("train", "val", "test")})

# perceptual net first (it guides the GAN), then the classifier zoo, then the GAN
metas = pretrain_all(ws, cfg)
for name, meta in sorted(metas.items()):
    if "test_accuracy" in meta:
        print(f"{name:>10}: test accuracy {meta['test_accuracy']:.3f}")

fx = ws.fixtures(["oracle"])

# one row per class, eight samples each
classes = torch.arange(10).repeat_interleave(8)
samples = sample_images(fx.G, classes, seed=0)
rows = [[samples[c * 8 + k].numpy() for k in range(8)] for c in range(10)]
print("samples:", image_grid(rows, ws.reports / "demo-samples.png"))

# does the held-out oracle agree with the conditioning class?
with torch.no_grad():
    agree = (classify(fx.handle("oracle"), samples).argmax(-1) == classes).float().mean()
print(f"oracle agrees with the conditioning class on {agree:.0%} of samples")

# the discriminators should score real digits above uniform noise
real, _ = data.split("val").tensors()
noise = torch.rand(64, 1, 16, 16) * 2 - 1
with torch.no_grad():
    print("realness real / noise:", [f"{r.mean():.3f} / {n.mean():.3f}" for r, n in zip(fx.D(real[:64]), fx.D(noise))])
