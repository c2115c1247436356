"""End-to-end procedures built from the library pieces: pretraining the
fixtures, ablations, distance sweeps, robust fine-tuning and reports.
"""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .campaign import Campaign, load_campaign, run_campaign, select_images, variant
from .config import RunConfig, config_hash, to_dict
from .data import Dataset, ingest
from .evaluate import (
    class_preservation_rate,
    evaluate_campaign,
    fooling_rate,
    mean_of,
    transfer_matrix,
    emitted_set,
)
from .models import CheckpointError, build_from_bundle, load_checkpoint, save_checkpoint
from .plots import image_grid, plot_matrix, plot_traces
from .pretrain import train_classifier, train_gan
from .robustify import before_after_eval, build_finetune_set, finetune, finetuned_id, handle_bundle
from .workspace import FIXTURES, MissingPrerequisite, Workspace

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_rec", "no_ce", "no_pg", "latent")
D_VALUES = (0.2, 0.3, 0.4)


class OutputExists(FileExistsError):
    """An artifact with a different configuration already sits at the target path."""


def with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    """Route the experiment seed into the attack and fine-tuning streams."""
    seed = cfg.seed if seed is None else seed
    return replace(cfg, seed=seed, attack=replace(cfg.attack, seed=seed), finetune=replace(cfg.finetune, seed=seed))


def fixture_hash(cfg: RunConfig, name: str) -> str:
    if name == "gan":
        return config_hash({"model": to_dict(cfg.model), "train": to_dict(cfg.gan), "data": cfg.data.dataset_id})
    return config_hash({"model": to_dict(cfg.model), "train": to_dict(cfg.classifier), "arch": name, "data": cfg.data.dataset_id})


def ingest_data(ws: Workspace, cfg: RunConfig) -> Dataset:
    ingest(cfg.data.dataset_id, ws.data_root, cfg.data.split)
    return Dataset(cfg.data.dataset_id, ws.data_root)


def pretrain_all(ws: Workspace, cfg: RunConfig, force: bool = False, names: Sequence[str] = FIXTURES) -> dict[str, dict]:
    """Train every missing fixture; returns the metadata of each.

    An existing checkpoint trained under the same configuration is kept. One
    trained under a different configuration is only replaced with ``force``.
    """
    data = ws.dataset(cfg)
    out = {}
    # the GAN's auxiliary class head is the perceptual net, so it goes first
    for name in sorted(names, key=lambda n: (n != "perceptual", n == "gan")):
        path = ws.checkpoint(name)
        want = fixture_hash(cfg, name)
        if path.exists():
            try:
                meta = load_checkpoint(path)["meta"]
            except CheckpointError:
                meta = {}
            if meta.get("config_hash") == want and not force:
                out[name] = meta
                continue
            if not force:
                raise OutputExists(f"{path} was trained with a different configuration; pass --force to retrain")
        if name == "gan":
            pnet = build_from_bundle(load_checkpoint(ws.checkpoint("perceptual")))
            bundle = train_gan(data, cfg.model, cfg.gan, pnet, ws.log(name))
        else:
            bundle = train_classifier(data, cfg.model, cfg.classifier, name, ws.log(name))
        if bundle["meta"]["config_hash"] != want:
            raise RuntimeError(f"{name}: config hash mismatch after training")
        save_checkpoint(path, bundle)
        out[name] = load_checkpoint(path)["meta"]
    return out


def attack_images(ws: Workspace, cfg: RunConfig, split: str = "val", per_class: int | None = None):
    data = ws.dataset(cfg)
    camp = cfg.campaign if per_class is None else replace(cfg.campaign, per_class=per_class)
    return select_images(data.split(split), camp, cfg.campaign.select_seed)


def campaign_for(ws: Workspace, cfg: RunConfig, attack=None, split: str = "val", per_class: int | None = None, tag=None, force=False, workers=1) -> Campaign:
    attack = cfg.attack if attack is None else attack
    images = attack_images(ws, cfg, split, per_class)
    camp = cfg.campaign if per_class is None else replace(cfg.campaign, per_class=per_class)
    return run_campaign(ws, images, attack, cfg.inversion, camp, split, cfg.campaign.select_seed, tag, force, workers)


def ablation_variant(cfg: RunConfig, name: str):
    a = cfg.attack
    return {
        "full": a,
        "no_rec": variant(a, lambda_rec=0.0),
        "no_ce": variant(a, lambda_ce=0.0),
        "no_pg": variant(a, lambda_pg=0.0),
        "latent": variant(a, mode="latent"),
    }[name]


def summarize(c: Campaign, target: str, oracle: str) -> dict:
    em = c.emitted
    return {
        "campaign_id": c.campaign_id,
        "attacked": len(c.records),
        "emitted": len(em),
        "fooling_rate": fooling_rate(c.records, target) if c.records else None,
        "class_preservation": class_preservation_rate(c.records, oracle) if em else None,
        "mean_L_pt": mean_of(r.L_pt_at_emission for r in em),
        "mean_realness": mean_of(r.realness for r in em),
        "stop_reasons": {k: sum(r.stop_reason == k for r in c.records) for k in sorted({r.stop_reason for r in c.records})},
    }


def _grid_rows(campaigns: dict[str, Campaign], per_row: int = 10) -> list[list]:
    first = next(iter(campaigns.values()))
    ids, seen = [], set()
    for r in first.records:
        if r.true_class not in seen:
            ids.append(r.image_id)
            seen.add(r.true_class)
        if len(ids) == per_row:
            break
    rows = []
    for c in campaigns.values():
        by_id = {r.image_id: r for r in c.records}
        rows.append([by_id[i].image if i in by_id and by_id[i].emitted else None for i in ids])
    return rows, ids


def _source_row(ws: Workspace, cfg: RunConfig, ids) -> list:
    data = ws.dataset(cfg)
    return [img for img in data.by_ids(ids).images.astype(np.float32)]


def _write_report(ws: Workspace, name: str, report: dict, table: str) -> list[Path]:
    ws.reports.mkdir(parents=True, exist_ok=True)
    jp = ws.reports / f"{name}.json"
    tp = ws.reports / f"{name}.txt"
    jp.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    tp.write_text(table + "\n")
    return [jp, tp]


def _table(rows: list[dict], cols: Sequence[str], first: str) -> str:
    def fmt(v):
        if v is None:
            return "-"
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    head = [first, *cols]
    body = [[str(r[first]), *(fmt(r.get(c)) for c in cols)] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    line = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return "\n".join([line(head), *(line(b) for b in body)])


def run_ablation(ws: Workspace, cfg: RunConfig, variants: Sequence[str] = ABLATIONS, workers: int = 1, force=False) -> tuple[dict, list[Path]]:
    """One campaign per objective variant on a shared image set and seed."""
    unknown = set(variants) - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation variants {sorted(unknown)}")
    camps = {v: campaign_for(ws, cfg, ablation_variant(cfg, v), tag=v, force=force, workers=workers) for v in variants}
    ids = [sorted(r.image_id for r in c.records) for c in camps.values()]
    if any(i != ids[0] for i in ids):
        raise RuntimeError("ablation variants attacked different images")
    t, o = cfg.attack.target, cfg.campaign.oracle
    report = {"seed": cfg.attack.seed, "image_ids": ids[0], "variants": {v: summarize(c, t, o) for v, c in camps.items()}}
    rows = [{"variant": v, **s} for v, s in report["variants"].items()]
    table = _table(rows, ["attacked", "emitted", "fooling_rate", "mean_L_pt", "mean_realness", "class_preservation"], "variant")
    name = f"ablation-s{cfg.attack.seed}"
    files = _write_report(ws, name, report, table)
    grid, gid = _grid_rows(camps)
    files.append(image_grid([_source_row(ws, cfg, gid), *grid], ws.reports / f"{name}.png"))
    return report, files


def run_d_sweep(ws: Workspace, cfg: RunConfig, values: Sequence[float] = D_VALUES, workers: int = 1, force=False) -> tuple[dict, list[Path]]:
    """Campaigns at several distance bounds on a shared image set."""
    camps = {}
    for d in values:
        a = variant(cfg.attack, d=float(d))
        camps[f"{float(d):g}"] = campaign_for(ws, cfg, a, tag="full" if float(d) == cfg.attack.d else f"d{float(d):g}", force=force, workers=workers)
    t, o = cfg.attack.target, cfg.campaign.oracle
    report = {"seed": cfg.attack.seed, "d": {k: summarize(c, t, o) for k, c in camps.items()}}
    for k, c in camps.items():
        bad = [r.image_id for r in c.emitted if r.L_pt_at_emission > float(k)]
        report["d"][k]["bound_violations"] = len(bad)
    rows = [{"d": k, **s} for k, s in report["d"].items()]
    table = _table(rows, ["attacked", "emitted", "fooling_rate", "class_preservation", "mean_L_pt", "bound_violations"], "d")
    name = f"sweep-d-s{cfg.attack.seed}"
    files = _write_report(ws, name, report, table)
    grid, gid = _grid_rows(camps)
    files.append(image_grid([_source_row(ws, cfg, gid), *grid], ws.reports / f"{name}.png"))
    return report, files


def evaluate_run(ws: Workspace, cfg: RunConfig, campaign_id: str) -> tuple[dict, list[Path]]:
    """Accuracy/confidence, FID and class preservation for one campaign."""
    c = load_campaign(ws.run_dir(campaign_id))
    info = c.info
    target = info["attack"]["target"]
    camp = info["campaign"]
    zoo_ids = list(dict.fromkeys([target, *camp["transfer"], camp["oracle"]]))
    fx = ws.fixtures(zoo_ids)
    data = ws.dataset(cfg)
    if c.records and c.records[0].image_id is not None:
        src = data.by_ids([r.image_id for r in c.records])
        xc, yc = src.tensors()
    else:
        xc, yc = emitted_set(c.records)
    ref = torch.from_numpy(data.split("train").images).float()
    rep = evaluate_campaign(c.records, xc, yc, fx.classifiers, target, camp["oracle"], fx.pnet, ref)
    rep.meta.update(campaign_id=campaign_id, counts=info.get("counts"))
    report = json.loads(rep.to_json())
    rows = []
    for cid in sorted(rep.clean):
        rows.append(
            {
                "classifier": cid + ("*" if cid == target else ""),
                "clean_acc": rep.clean[cid]["acc"],
                "clean_conf": rep.clean[cid]["conf"],
                "apt_acc": rep.attacked.get(cid, {}).get("acc"),
                "apt_conf": rep.attacked.get(cid, {}).get("conf"),
            }
        )
    table = _table(rows, ["clean_acc", "clean_conf", "apt_acc", "apt_conf"], "classifier") if rows else "empty"
    if rep.fid:
        table += "\n\n" + "\n".join(f"FID {k}: {v:.4f}" for k, v in sorted(rep.fid.items()))
    table += f"\nclass preservation ({camp['oracle']}): {rep.class_preservation}"
    return report, _write_report(ws, f"eval-{campaign_id}", report, table)


def run_robustify(ws: Workspace, cfg: RunConfig, train_per_class: int = 10, workers: int = 1, force=False) -> tuple[dict, list[Path]]:
    """Attack training images, fine-tune the target on them and compare both
    classifiers on a held-out attack campaign built from validation images.
    """
    data = ws.dataset(cfg)
    target = cfg.attack.target
    train_c = campaign_for(ws, cfg, split="train", per_class=train_per_class, tag="ft", force=force, workers=workers)
    held = campaign_for(ws, cfg, tag="full", force=force, workers=workers)
    fx = ws.fixtures([target])
    ft_set = build_finetune_set(train_c.records, train_c.campaign_id, data.num_classes)
    xtr, ytr = data.split("train").tensors()
    new_id = finetuned_id(target, train_c.campaign_id)
    ckpt = ws.checkpoint(new_id)
    handle = None
    if ckpt.exists() and not force:
        handle = ws.load_classifier(new_id)
    else:
        handle = finetune(fx.handle(target), ft_set, xtr, ytr, cfg.finetune, ws.log(new_id))
        save_checkpoint(ckpt, handle_bundle(handle))
    xt, yt = data.split("test").tensors()
    report = before_after_eval(fx.handle(target), handle, held.records, xt, yt)
    report.update(train_campaign=train_c.campaign_id, held_out_campaign=held.campaign_id, finetune_set_size=len(ft_set))
    rows = [{"model": k, **report[k]} for k in ("before", "after", "delta")]
    table = _table(rows, ["acc", "conf", "clean_acc", "clean_conf"], "model")
    return report, _write_report(ws, f"robustify-s{cfg.attack.seed}", report, table)


def render_report(ws: Workspace, campaign_ids: Sequence[str]) -> list[Path]:
    """Tables and trace plots for finished campaigns."""
    ws.reports.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    rows = []
    sets = {}
    camps = []
    for cid in campaign_ids:
        c = load_campaign(ws.run_dir(cid), with_traces=True)
        camps.append(c)
        target = c.info["attack"]["target"]
        oracle = c.info["campaign"]["oracle"]
        if not c.records:
            rows.append({"campaign": cid, "attacked": 0})
            continue
        rows.append({"campaign": cid, **{k: v for k, v in summarize(c, target, oracle).items() if k != "campaign_id" and k != "stop_reasons"}})
        if c.emitted:
            sets.setdefault(target, [])
            sets[target].append(c)
        traces = [r.trace for r in c.records if r.trace]
        if traces:
            files.append(plot_traces(traces, ws.reports / f"traces-{cid}.png"))
    cols = ["attacked", "emitted", "fooling_rate", "class_preservation", "mean_L_pt", "mean_realness"]
    table = _table(rows, cols, "campaign") if any(r.get("attacked") for r in rows) else "empty"
    if sets:
        zoo_ids = sorted({cid for cs in sets.values() for c in cs for cid in c.records[0].fooled})
        fx = ws.fixtures(zoo_ids)
        stacked = {}
        for src, cs in sorted(sets.items()):
            xs, ys = zip(*(emitted_set(c.records) for c in cs))
            stacked[src] = (torch.cat(xs), torch.cat(ys))
        tm = transfer_matrix(stacked, fx.classifiers)
        table += "\n\n" + tm.table()
        files.append(plot_matrix(tm.accuracy, tm.sources, tm.evaluated, ws.reports / "transfer.png", "accuracy on attack sets"))
    name = "report-" + config_hash(list(campaign_ids))[:10]
    tp = ws.reports / f"{name}.txt"
    tp.write_text(table + "\n")
    jp = ws.reports / f"{name}.json"
    jp.write_text(json.dumps({"campaigns": list(campaign_ids), "rows": rows}, indent=1, sort_keys=True) + "\n")
    return [jp, tp, *files]
