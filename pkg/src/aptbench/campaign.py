"""Attack campaigns: image selection, filtering, batched execution and the
on-disk manifest.

A campaign directory holds ``campaign.json`` (configuration, seeds, counts),
``manifest.jsonl`` (one attack record per line, ordered by image id),
``images/`` (PNG plus a float32 ``.npy`` sidecar per emitted image) and
``traces/`` (per-iteration loss terms of every attack).
"""

from __future__ import annotations

import json
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .attack import AttackRecord, attack_batch, locality_radius_unit, random_sample_attack
from .config import AttackConfig, CampaignConfig, InversionConfig, config_hash, to_dict
from .data import Split, sample_per_class
from .inversion import OPTIMIZER
from .models import argmax_lowest, classify
from .workspace import Workspace, file_sha256


class CampaignExists(FileExistsError):
    pass


@dataclass
class Campaign:
    campaign_id: str
    directory: Path
    records: list[AttackRecord]
    info: dict
    inputs: Split | None = None  # filtered source images, aligned with records

    @property
    def emitted(self) -> list[AttackRecord]:
        return [r for r in self.records if r.emitted]


def campaign_key(attack: AttackConfig, camp: CampaignConfig, inv: InversionConfig, split: str, fixture_hashes: dict, select_seed: int) -> str:
    return config_hash(
        {"attack": to_dict(attack), "campaign": to_dict(camp), "inversion": to_dict(inv), "split": split, "fixtures": fixture_hashes, "select_seed": select_seed}
    )


def make_campaign_id(attack: AttackConfig, split: str, key: str, tag: str | None = None) -> str:
    parts = [tag or attack.mode, attack.target, split, f"s{attack.seed}", key[:10]]
    return "-".join(parts)


def filter_correct(split: Split, handle) -> tuple[Split, list[int]]:
    """Keep the images ``handle`` classifies correctly; return the dropped ids too."""
    x, y = split.tensors(next(handle.require().parameters()).dtype)
    with torch.no_grad():
        pred = argmax_lowest(classify(handle, x))
    keep = (pred == y).numpy()
    kept = Split(split.images[keep], split.labels[keep], split.ids[keep])
    return kept, split.ids[~keep].tolist()


def _to_png(img: np.ndarray, path: Path) -> None:
    a = np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    if a.shape[0] == 1:
        Image.fromarray(a[0], mode="L").save(path)
    else:
        Image.fromarray(np.moveaxis(a, 0, -1)).save(path)


def run_campaign(
    ws: Workspace,
    images: Split | None,
    attack: AttackConfig,
    inv: InversionConfig,
    camp: CampaignConfig,
    split_name: str = "val",
    select_seed: int = 0,
    tag: str | None = None,
    force: bool = False,
    workers: int = 1,
    chunk: int = 100,
    random_classes: list[int] | None = None,
    refuse_existing: bool = False,
) -> Campaign:
    """Run one attack campaign and write it under ``runs/<campaign-id>``.

    ``images`` is the candidate set; those the target misclassifies are
    excluded and counted. For ``attack.mode == "random"`` pass
    ``random_classes`` instead. A campaign whose directory already holds a
    complete manifest is loaded instead of recomputed, unless ``force``; with
    ``refuse_existing`` it raises CampaignExists instead.
    """
    attack.validate()
    evaluated = list(dict.fromkeys([attack.target, *camp.transfer, camp.oracle]))
    fx = ws.fixtures(evaluated)  # fails before any work if something is missing
    hashes = ws.fixture_hashes(["gan", "perceptual", *evaluated])
    key = campaign_key(attack, camp, inv, split_name, hashes, select_seed)
    cid = make_campaign_id(attack, split_name, key, tag)
    out = ws.run_dir(cid)
    if (out / "campaign.json").exists() and not force:
        if refuse_existing:
            raise CampaignExists(f"campaign {cid} already exists at {out}; pass --force to recompute")
        return load_campaign(out)
    if out.exists():
        shutil.rmtree(out)
    gan_hash = hashes["gan"]

    info = {
        "campaign_id": cid,
        "config_hash": key,
        "attack": to_dict(attack),
        "campaign": to_dict(camp),
        "inversion": to_dict(inv),
        "inversion_optimizer": {**OPTIMIZER, "betas": list(OPTIMIZER["betas"])},
        "split": split_name,
        "select_seed": select_seed,
        "fixtures": hashes,
    }
    alpha = attack.alpha_rel * locality_radius_unit(fx.G)
    info["alpha"] = alpha
    if attack.mode == "random":
        if random_classes is None:
            raise ValueError("random-sample campaigns need random_classes")
        records = random_sample_attack(random_classes, fx, attack)
        inputs = None
        info["counts"] = {"requested": len(random_classes), "attacked": len(records)}
    else:
        if images is None:
            raise ValueError("manipulation campaigns need an image set")
        inputs, dropped = filter_correct(images, fx.handle(attack.target))
        info["counts"] = {"sampled": len(images), "filtered_out": len(dropped), "attacked": len(inputs)}
        info["filtered_out_ids"] = [int(i) for i in dropped]
        x, y = inputs.tensors()
        pivots = ws.pivots(x, y, inputs.ids, fx, inv)
        info["pivot_final_loss"] = [p.final_loss for p in pivots]
        bounds = [(s, min(s + chunk, len(y))) for s in range(0, len(y), chunk)]

        def job(b):
            s, e = b
            return attack_batch(x[s:e], y[s:e], inputs.ids[s:e], pivots[s:e], fx, attack, alpha=alpha)

        if workers > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(workers) as pool:
                parts = list(pool.map(job, bounds))
        else:
            parts = [job(b) for b in bounds]
        records = sorted((r for p in parts for r in p), key=lambda r: r.image_id)
    if file_sha256(ws.checkpoint("gan")) != gan_hash:
        raise RuntimeError("generator checkpoint changed during the campaign")
    info["counts"]["emitted"] = sum(r.emitted for r in records)
    write_campaign(out, records, info)
    return Campaign(cid, out, records, info, inputs)


def write_campaign(out: Path, records: list[AttackRecord], info: dict) -> None:
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    lines = []
    for k, r in enumerate(records):
        name = str(r.image_id) if r.image_id is not None else f"r{k}"
        if r.emitted:
            np.save(out / "images" / f"{name}.npy", r.image.astype(np.float32))
            _to_png(r.image, out / "images" / f"{name}.png")
            r_json = {**r.to_json(), "image_ref": f"images/{name}.png", "array_ref": f"images/{name}.npy",
                      "array_shape": list(r.image.shape), "array_dtype": "float32"}
        else:
            r_json = {**r.to_json(), "image_ref": None, "array_ref": None}
        if r.trace:
            with open(out / "traces" / f"{name}.jsonl", "w") as fh:
                fh.writelines(json.dumps(t, sort_keys=True) + "\n" for t in r.trace)
        lines.append(json.dumps(r_json, sort_keys=True))
    (out / "manifest.jsonl").write_text("".join(l + "\n" for l in lines))
    # written last: its presence marks a complete campaign
    (out / "campaign.json").write_text(json.dumps(info, indent=1, sort_keys=True))


def load_campaign(out: str | Path, with_traces: bool = False) -> Campaign:
    out = Path(out)
    if not (out / "campaign.json").exists():
        raise FileNotFoundError(f"{out} is not a finished campaign; run `aptbench attack` first")
    info = json.loads((out / "campaign.json").read_text())
    records = []
    for k, line in enumerate((out / "manifest.jsonl").read_text().splitlines()):
        d = json.loads(line)
        array_ref = d.pop("array_ref", None)
        for extra in ("image_ref", "array_shape", "array_dtype"):
            d.pop(extra, None)
        r = AttackRecord.from_json(d)
        if array_ref:
            r.image = np.load(out / array_ref)
        name = str(r.image_id) if r.image_id is not None else f"r{k}"
        tpath = out / "traces" / f"{name}.jsonl"
        if with_traces and tpath.exists():
            r.trace = [json.loads(t) for t in tpath.read_text().splitlines()]
        records.append(r)
    return Campaign(info["campaign_id"], out, records, info)


def select_images(split: Split, camp: CampaignConfig, seed: int) -> Split:
    return sample_per_class(split, camp.per_class, seed)


def variant(attack: AttackConfig, **changes) -> AttackConfig:
    """Copy of ``attack`` with top-level fields and/or loss weights replaced."""
    wkeys = {k: v for k, v in changes.items() if hasattr(attack.weights, k)}
    rest = {k: v for k, v in changes.items() if k not in wkeys}
    return replace(attack, weights=replace(attack.weights, **wkeys), **rest)
