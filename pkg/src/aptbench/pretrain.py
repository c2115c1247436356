"""Training of the frozen fixtures: classifiers, perceptual network and the
conditional GAN.

Order matters: the perceptual network is trained first because the GAN uses
it as an auxiliary class head that keeps the generator class-conditional.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import torch
import torch.nn.functional as F

from .config import ModelConfig, TrainConfig, config_hash, to_dict
from .data import Dataset
from .models import (
    DiscriminatorSet,
    Generator,
    ImageClassifier,
    NumericalFault,
    argmax_lowest,
    freeze,
    model_meta,
    module_bundle,
)

log = logging.getLogger(__name__)


def _write_log(path: Path | None, records: list[dict]) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _shift_augment(x: torch.Tensor, gen: torch.Generator, max_shift: int = 1) -> torch.Tensor:
    dx, dy = torch.randint(-max_shift, max_shift + 1, (2,), generator=gen).tolist()
    return torch.roll(x, shifts=(dy, dx), dims=(-2, -1))


@torch.no_grad()
def accuracy(net: ImageClassifier, images: torch.Tensor, labels: torch.Tensor, batch: int = 512) -> float:
    correct = 0
    for i in range(0, len(labels), batch):
        pred = argmax_lowest(net(images[i : i + batch]))
        correct += int((pred == labels[i : i + batch]).sum())
    return correct / len(labels)


def train_classifier(
    data: Dataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    arch: str,
    log_path: Path | None = None,
) -> dict:
    """Supervised training of one zoo member; returns a checkpoint bundle.

    The clean test accuracy is recorded in the bundle metadata.
    """
    torch.manual_seed(cfg.seed)
    net = ImageClassifier(model_cfg, arch, mean=data.mean, std=data.std)
    x, y = data.split("train").tensors()
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    records = []
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(y), generator=gen)
        total, n = 0.0, 0
        for i in range(0, len(y), cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            xb = x[idx]
            if arch == "oracle":
                xb = _shift_augment(xb, gen)
            loss = F.cross_entropy(net(xb), y[idx])
            if not torch.isfinite(loss):
                raise NumericalFault(f"{arch}: non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            n += len(idx)
        records.append({"epoch": epoch, "loss": total / n})
    freeze(net)
    xv, yv = data.split("val").tensors()
    xt, yt = data.split("test").tensors()
    meta = model_meta(
        model_cfg,
        kind="classifier",
        arch=arch,
        dataset_id=data.dataset_id,
        seed=cfg.seed,
        config_hash=config_hash({"model": to_dict(model_cfg), "train": to_dict(cfg), "arch": arch, "data": data.dataset_id}),
        train_config=to_dict(cfg),
        val_accuracy=accuracy(net, xv, yv),
        test_accuracy=accuracy(net, xt, yt),
        final_loss=records[-1]["loss"] if records else None,
    )
    if arch == "perceptual":
        meta["taps"] = [list(t.shape[1:]) for t in net.features(xt[:1])]
    _write_log(log_path, records)
    log.info("%s: test accuracy %.4f", arch, meta["test_accuracy"])
    return module_bundle(net, meta)


def train_perceptual(data: Dataset, model_cfg: ModelConfig, cfg: TrainConfig, log_path: Path | None = None) -> dict:
    return train_classifier(data, model_cfg, cfg, "perceptual", log_path)


def _r1(d: DiscriminatorSet, real: torch.Tensor) -> torch.Tensor:
    real = real.detach().requires_grad_(True)
    score = sum(s.sum() for s in d.logits(real))
    (g,) = torch.autograd.grad(score, real, create_graph=True)
    return g.square().sum(dim=(1, 2, 3)).mean()


def train_gan(
    data: Dataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    aux: ImageClassifier,
    log_path: Path | None = None,
) -> dict:
    """Adversarial training against the multi-scale discriminator set.

    Non-saturating loss per scale, summed over scales, R1 on real images, and
    a cross-entropy term from the frozen ``aux`` classifier on generated
    samples.
    """
    torch.manual_seed(cfg.seed)
    G = Generator(model_cfg)
    D = DiscriminatorSet(model_cfg)
    x, y = data.split("train").tensors()
    gen = torch.Generator().manual_seed(cfg.seed)
    opt_g = torch.optim.Adam(
        [
            {"params": G.synthesis.parameters()},
            {"params": G.mapping.parameters(), "lr": cfg.lr * cfg.mapping_lr_mult},
        ],
        lr=cfg.lr,
        betas=(0.0, 0.99),
    )
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.d_lr, betas=(0.0, 0.99))
    freeze(aux)
    records = []
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(y), generator=gen)
        sums = {"d_loss": 0.0, "g_loss": 0.0, "aux_ce": 0.0, "mode_seeking": 0.0}
        steps = 0
        for i in range(0, len(y) - cfg.batch_size + 1, cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            real, c = x[idx], y[idx]
            b = len(idx)

            z = G.sample_z(b, gen)
            fake = G(z, c, G.make_noise(b, gen)).detach()
            d_loss = sum(F.softplus(-s).mean() for s in D.logits(real)) + sum(
                F.softplus(s).mean() for s in D.logits(fake)
            )
            d_total = d_loss + 0.5 * cfg.r1_gamma * _r1(D, real)
            opt_d.zero_grad()
            d_total.backward()
            opt_d.step()

            z = G.sample_z(b, gen)
            half = b // 2
            w = G.map_latent(z, c)
            # pairs (i, i + half) share noise so their spread must come from z
            noise = [torch.cat([n[:half], n[:half], n[2 * half :]]) for n in G.make_noise(b, gen)]
            fake = G.synthesize(w, noise)
            adv = sum(F.softplus(-s).mean() for s in D.logits(fake))
            ce = F.cross_entropy(aux(fake), c)
            # mode seeking: pairs of samples sharing a class should differ
            spread = (fake[:half] - fake[half : 2 * half]).abs().mean(dim=(1, 2, 3)) / (
                (z[:half] - z[half : 2 * half]).abs().mean(dim=1) + 1e-5
            )
            ms = 1.0 / (spread.mean() + 1e-5)
            g_loss = adv + cfg.aux_class_weight * ce + cfg.mode_seeking_weight * ms
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            d_val, g_val = float(d_total.detach()), float(g_loss.detach())
            if not (math.isfinite(d_val) and math.isfinite(g_val)):
                raise NumericalFault(f"GAN diverged at epoch {epoch}, step {steps}: d={d_val} g={g_val}")
            sums["d_loss"] += float(d_loss.detach())
            sums["g_loss"] += float(adv.detach())
            sums["aux_ce"] += float(ce.detach())
            sums["mode_seeking"] += float(ms.detach())
            steps += 1
        rec = {"epoch": epoch, **{k: v / max(steps, 1) for k, v in sums.items()}}
        records.append(rec)
        log.info("gan epoch %d %s", epoch, rec)
    freeze(G)
    freeze(D)
    module = torch.nn.ModuleDict({"G": G, "D": D})
    meta = model_meta(
        model_cfg,
        kind="gan",
        dataset_id=data.dataset_id,
        seed=cfg.seed,
        config_hash=config_hash({"model": to_dict(model_cfg), "train": to_dict(cfg), "data": data.dataset_id}),
        train_config=to_dict(cfg),
        final_g_loss=records[-1]["g_loss"] if records else None,
        final_d_loss=records[-1]["d_loss"] if records else None,
    )
    _write_log(log_path, records)
    return module_bundle(module, meta)


@torch.no_grad()
def sample_images(G: Generator, classes: torch.Tensor, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    z = G.sample_z(len(classes), gen)
    return G(z, classes, G.make_noise(len(classes), gen))
