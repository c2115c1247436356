"""Latent optimization of (w, n) against a frozen generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .config import InversionConfig
from .losses import noise_reg, perceptual_distance
from .models import Generator, ImageClassifier, NumericalFault

OPTIMIZER = {"name": "adam", "betas": (0.9, 0.999), "noise_renorm": True}


def lr_schedule(it: int, cfg: InversionConfig) -> float:
    """Linear warmup from 0, constant plateau, cosine ramp to 0 over the tail."""
    if not 0 <= it < cfg.iterations:
        raise ValueError(f"iteration {it} outside [0, {cfg.iterations})")
    if it < cfg.warmup_iters:
        return cfg.lr_max * it / cfg.warmup_iters
    tail_start = cfg.iterations - cfg.cosine_tail_iters
    if it < tail_start:
        return cfg.lr_max
    k = it - tail_start
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * k / cfg.cosine_tail_iters))


@dataclass
class PivotState:
    w_p: torch.Tensor  # (L, S)
    noise: list[torch.Tensor]  # one (1, H, W) map per layer
    final_loss: float
    trace: list[tuple[float, float, float]] = field(default_factory=list)  # (lpips, noise_reg, total)
    image_id: int | None = None
    seed: int = 0

    @property
    def initial_lpips(self) -> float:
        return self.trace[0][0]

    def to_arrays(self) -> dict:
        out = {"w_p": self.w_p.detach().cpu().numpy()}
        for i, n in enumerate(self.noise):
            out[f"noise{i}"] = n.detach().cpu().numpy()
        return out


def _seed_for(base: int, key: int) -> int:
    return (base * 1_000_003 + key * 7919 + 17) % (2**63)


def class_mean_styles(G: Generator, classes: torch.Tensor, samples: int, seed: int) -> torch.Tensor:
    """Mean mapped style vector per class, one row per entry of ``classes``."""
    means = {}
    for c in sorted(set(classes.tolist())):
        gen = torch.Generator().manual_seed(_seed_for(seed, 100_000 + c))
        means[c] = G.class_mean_style(c, samples, gen)[0]
    return torch.stack([means[c] for c in classes.tolist()])


def invert_batch(
    images: torch.Tensor,
    classes: torch.Tensor,
    G: Generator,
    pnet: ImageClassifier,
    cfg: InversionConfig,
    image_ids=None,
) -> list[PivotState]:
    """Invert every image independently; returns one PivotState per image.

    A single style row per image is optimized and broadcast to all synthesis
    layers; the expanded matrix is returned as the pivot. Each image has its
    own noise initialization stream keyed by ``(cfg.seed, image_id)``, so the
    result for an image does not depend on what else is in the batch.
    """
    cfg.validate()
    b = images.shape[0]
    ids = list(range(b)) if image_ids is None else [int(i) for i in image_ids]
    classes = torch.as_tensor(classes, dtype=torch.long)
    L = G.cfg.num_layers
    with torch.no_grad():
        w = class_mean_styles(G, classes, cfg.class_mean_samples, cfg.seed).clone()
    shapes = G.synthesis.noise_shapes()
    noise_rows = []
    for i in ids:
        gen = torch.Generator().manual_seed(_seed_for(cfg.seed, i))
        noise_rows.append([torch.randn(1, 1, h, wd, dtype=images.dtype, generator=gen) for h, wd in shapes])
    noise = [torch.cat([row[k] for row in noise_rows]) for k in range(len(shapes))]
    w.requires_grad_(True)
    for n in noise:
        n.requires_grad_(True)
    opt = torch.optim.Adam([w] + noise, lr=0.0, betas=OPTIMIZER["betas"])
    traces: list[list[tuple[float, float, float]]] = [[] for _ in range(b)]
    before = {k: v.clone() for k, v in G.synthesis.params().items()}
    feats = pnet.features
    for it in range(cfg.iterations):
        lr = lr_schedule(it, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        x_gen = G.synthesize(w.unsqueeze(1).expand(-1, L, -1), noise)
        lp = perceptual_distance(images, x_gen, feats)
        reg = noise_reg(noise)
        loss = lp + cfg.lambda_n * reg
        if not torch.isfinite(loss).all():
            raise NumericalFault(f"inversion diverged at iteration {it}; trace tail {traces[0][-3:]}")
        for j, (a, r, t) in enumerate(zip(lp.tolist(), reg.tolist(), loss.tolist())):
            traces[j].append((a, r, t))
        opt.zero_grad()
        loss.sum().backward()
        opt.step()
        if OPTIMIZER["noise_renorm"]:
            with torch.no_grad():
                for n in noise:
                    n -= n.mean(dim=(1, 2, 3), keepdim=True)
                    n *= n.square().mean(dim=(1, 2, 3), keepdim=True).rsqrt()
    for k, v in G.synthesis.params().items():
        if not torch.equal(v, before[k]):
            raise RuntimeError(f"generator weight {k} changed during inversion")
    out = []
    for j in range(b):
        out.append(
            PivotState(
                w_p=w[j].detach().unsqueeze(0).expand(L, -1).clone(),
                noise=[n[j].detach().clone() for n in noise],
                final_loss=traces[j][-1][2],
                trace=traces[j],
                image_id=ids[j],
                seed=cfg.seed,
            )
        )
    return out


def invert(x: torch.Tensor, c: int, G: Generator, pnet: ImageClassifier, cfg: InversionConfig, image_id=None) -> PivotState:
    """Single-image form of :func:`invert_batch`."""
    x = x.reshape(1, *x.shape[-3:])
    return invert_batch(x, torch.tensor([c]), G, pnet, cfg, None if image_id is None else [image_id])[0]


def stack_pivots(pivots: list[PivotState]) -> tuple[torch.Tensor, list[torch.Tensor]]:
    w = torch.stack([p.w_p for p in pivots])
    noise = [torch.stack([p.noise[k] for p in pivots]) for k in range(len(pivots[0].noise))]
    return w, noise
