"""Fine-tuning a classifier on attack images and the before/after comparison."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import FinetuneConfig, config_hash, to_dict
from .evaluate import accuracy_confidence
from .models import ClassifierHandle, NumericalFault, copy_module, freeze, module_bundle


@dataclass
class FinetuneSet:
    images: torch.Tensor  # (N, C, H, W)
    labels: torch.Tensor  # (N,) original true classes
    image_ids: list[int]
    campaign_id: str

    def __len__(self) -> int:
        return len(self.labels)


def finetuned_id(classifier_id: str, campaign_id: str) -> str:
    return f"{classifier_id}-apt-ft-{campaign_id}"


def build_finetune_set(records: Sequence, campaign_id: str, num_classes: int | None = None) -> FinetuneSet:
    """Collect emitted attack images, each labeled with its source's true class.

    Attacks that emitted nothing are left out.
    """
    rs = [r for r in records if r.emitted]
    if not rs:
        raise ValueError(f"campaign {campaign_id} emitted no images")
    labels = torch.tensor([r.true_class for r in rs], dtype=torch.long)
    if num_classes is not None and not bool(((labels >= 0) & (labels < num_classes)).all()):
        raise ValueError("label outside the class range")
    images = torch.from_numpy(np.stack([np.asarray(r.image, dtype=np.float32) for r in rs]))
    return FinetuneSet(images, labels, [r.image_id for r in rs], campaign_id)


def finetune(
    handle: ClassifierHandle,
    apt_set: FinetuneSet,
    clean_images: torch.Tensor,
    clean_labels: torch.Tensor,
    cfg: FinetuneConfig,
    log_path: Path | None = None,
) -> ClassifierHandle:
    """Fine-tune a copy of ``handle``'s network on mixed clean/attack batches.

    Each batch holds ``round(mix_ratio * batch_size)`` attack images and fills
    the rest with clean training images. An epoch is one pass over the attack
    set (or over the clean set when ``mix_ratio`` is 0). The original network
    is not modified.
    """
    cfg.validate()
    net = copy_module(handle.require())
    dtype = next(net.parameters()).dtype
    for p in net.parameters():
        p.requires_grad_(True)
    net.train()
    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    n_apt = int(round(cfg.mix_ratio * cfg.batch_size))
    n_clean = cfg.batch_size - n_apt
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    steps = math.ceil(len(apt_set) / n_apt) if n_apt else math.ceil(len(clean_labels) / cfg.batch_size)
    xa, ya = apt_set.images.to(dtype), apt_set.labels
    xc, yc = clean_images.to(dtype), clean_labels
    log = []
    for epoch in range(cfg.epochs):
        perm_a = torch.randperm(len(ya), generator=gen)
        perm_c = torch.randperm(len(yc), generator=gen)
        total_apt = 0.0
        seen_apt = 0
        for s in range(steps):
            xs, ys = [], []
            if n_apt:
                ia = perm_a[s * n_apt : (s + 1) * n_apt]
                xs.append(xa[ia])
                ys.append(ya[ia])
            if n_clean:
                ic = perm_c[torch.arange(s * n_clean, (s + 1) * n_clean) % len(yc)]
                xs.append(xc[ic])
                ys.append(yc[ic])
            logits = net(torch.cat(xs))
            losses = F.cross_entropy(logits, torch.cat(ys), reduction="none")
            loss = losses.mean()
            if not torch.isfinite(loss):
                raise NumericalFault(f"fine-tuning diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if n_apt:
                k = len(ys[0])
                total_apt += float(losses[:k].detach().sum())
                seen_apt += k
        log.append({"epoch": epoch, "apt_loss": total_apt / max(seen_apt, 1)})
    freeze(net)
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log))
    meta = dict(handle.meta)
    meta.update(
        parent=handle.id,
        finetune_campaign=apt_set.campaign_id,
        finetune_image_ids=sorted(int(i) for i in apt_set.image_ids),
        finetune_config=to_dict(cfg),
        finetune_log=log,
    )
    meta["config_hash"] = config_hash({"parent": handle.meta.get("config_hash"), "campaign": apt_set.campaign_id, "ft": to_dict(cfg)})
    return ClassifierHandle(finetuned_id(handle.id, apt_set.campaign_id), handle.arch, net, meta)


def handle_bundle(handle: ClassifierHandle) -> dict:
    return module_bundle(handle.require(), handle.meta)


def before_after_eval(
    before: ClassifierHandle,
    after: ClassifierHandle,
    held_out: Sequence,
    clean_images=None,
    clean_labels=None,
) -> dict:
    """Score both classifiers on the same held-out attack images.

    ``held_out`` are attack records generated against ``before``. Raises when
    any of their source images was part of ``after``'s fine-tuning set.
    """
    used = set(after.meta.get("finetune_image_ids", []))
    ids = {r.image_id for r in held_out}
    leak = sorted(i for i in ids & used if i is not None)
    if leak:
        raise ValueError(f"held-out attacks share {len(leak)} source images with the fine-tuning set, e.g. {leak[:5]}")
    rs = [r for r in held_out if r.emitted]
    if not rs:
        raise ValueError("held-out campaign emitted no images")
    x = torch.from_numpy(np.stack([np.asarray(r.image, dtype=np.float32) for r in rs]))
    y = torch.tensor([r.true_class for r in rs])
    report: dict = {"before_id": before.id, "after_id": after.id, "held_out_count": len(rs)}
    for key, h in (("before", before), ("after", after)):
        acc, conf = accuracy_confidence(h, x, y)
        report[key] = {"acc": acc, "conf": conf}
        if clean_images is not None:
            acc, conf = accuracy_confidence(h, clean_images, clean_labels)
            report[key].update(clean_acc=acc, clean_conf=conf)
    report["delta"] = {k: report["after"][k] - report["before"][k] for k in report["before"]}
    return report
