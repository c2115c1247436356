"""On-disk layout of a benchmark home directory.

::

    <home>/data/<dataset_id>/          ingested arrays + split manifest
    <home>/checkpoints/<name>.npz      pretrained and fine-tuned models
    <home>/logs/<name>.jsonl           training logs
    <home>/pivots/<key>/<image_id>.npz inversion cache
    <home>/runs/<campaign-id>/         attack campaigns
    <home>/reports/                    evaluation, ablation and sweep reports
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np
import torch

from .attack import Fixtures
from .config import InversionConfig, RunConfig, config_hash, to_dict
from .data import Dataset
from .inversion import PivotState, invert_batch
from .models import ClassifierHandle, build_from_bundle, load_checkpoint

FIXTURES = ("perceptual", "conv", "mlp", "oracle", "gan")
HOME_ENV = "APTBENCH_HOME"


class MissingPrerequisite(RuntimeError):
    """An input artifact is absent; the message names the command that makes it."""


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    def __init__(self, home: str | Path):
        self.home = Path(home)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Workspace":
        return cls(os.environ.get(HOME_ENV) or cfg.output_root)

    @property
    def data_root(self) -> Path:
        return self.home / "data"

    def checkpoint(self, name: str) -> Path:
        return self.home / "checkpoints" / f"{name}.npz"

    def log(self, name: str) -> Path:
        return self.home / "logs" / f"{name}.jsonl"

    def run_dir(self, campaign_id: str) -> Path:
        return self.home / "runs" / campaign_id

    @property
    def reports(self) -> Path:
        return self.home / "reports"

    # -- loading --------------------------------------------------------

    def dataset(self, cfg: RunConfig) -> Dataset:
        if not (self.data_root / cfg.data.dataset_id / "manifest.json").exists():
            raise MissingPrerequisite(f"dataset {cfg.data.dataset_id!r} not found under {self.data_root}; run `aptbench ingest` first")
        return Dataset(cfg.data.dataset_id, self.data_root)

    def _require(self, name: str) -> Path:
        path = self.checkpoint(name)
        if not path.exists():
            raise MissingPrerequisite(f"checkpoint {path} is missing; run `aptbench pretrain` first")
        return path

    def load_classifier(self, name: str) -> ClassifierHandle:
        path = self.checkpoint(name)
        if not path.exists():
            hint = "`aptbench finetune`" if "-apt-ft-" in name else "`aptbench pretrain`"
            raise MissingPrerequisite(f"checkpoint {path} is missing; run {hint} first")
        bundle = load_checkpoint(path)
        return ClassifierHandle(name, bundle["meta"]["arch"], build_from_bundle(bundle), bundle["meta"])

    def fixtures(self, classifier_ids) -> Fixtures:
        """Load the GAN, perceptual net and the named classifiers.

        Every checkpoint is checked for presence before any is loaded.
        """
        names = ["gan", "perceptual", *classifier_ids]
        for n in names:
            if n in FIXTURES:
                self._require(n)
            elif not self.checkpoint(n).exists():
                self.load_classifier(n)  # raises with a hint
        gan = build_from_bundle(load_checkpoint(self.checkpoint("gan")))
        pnet = build_from_bundle(load_checkpoint(self.checkpoint("perceptual")))
        zoo = {cid: self.load_classifier(cid) for cid in dict.fromkeys(classifier_ids)}
        return Fixtures(gan["G"], gan["D"], pnet, zoo)

    def fixture_hashes(self, names) -> dict[str, str]:
        return {n: file_sha256(self._require(n) if n in FIXTURES else self.checkpoint(n)) for n in names}

    # -- pivots ------------------------------------------------------------

    def pivot_dir(self, inv: InversionConfig) -> Path:
        key = config_hash({"gan": file_sha256(self._require("gan")), "perceptual": file_sha256(self._require("perceptual")), "inv": to_dict(inv)})
        return self.home / "pivots" / key

    def pivots(self, images: torch.Tensor, labels, image_ids, fx: Fixtures, inv: InversionConfig, chunk: int = 100) -> list[PivotState]:
        """Inversions for ``image_ids``, computed on demand and cached on disk."""
        root = self.pivot_dir(inv)
        root.mkdir(parents=True, exist_ok=True)
        ids = [int(i) for i in image_ids]
        labels = torch.as_tensor(labels)
        missing = [j for j, i in enumerate(ids) if not (root / f"{i}.npz").exists()]
        for s in range(0, len(missing), chunk):
            part = missing[s : s + chunk]
            sel = torch.tensor(part)
            for p in invert_batch(images[sel], labels[sel], fx.G, fx.pnet, inv, [ids[j] for j in part]):
                save_pivot(root / f"{p.image_id}.npz", p)
        return [load_pivot(root / f"{i}.npz") for i in ids]


def save_pivot(path: Path, p: PivotState) -> None:
    arrays = p.to_arrays()
    arrays["trace"] = np.asarray(p.trace, dtype=np.float64)
    arrays["info"] = np.asarray([p.final_loss, -1 if p.image_id is None else p.image_id, p.seed], dtype=np.float64)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_pivot(path: Path) -> PivotState:
    with np.load(path) as z:
        n_noise = sum(1 for k in z.files if k.startswith("noise"))
        info = z["info"]
        return PivotState(
            w_p=torch.from_numpy(z["w_p"].copy()),
            noise=[torch.from_numpy(z[f"noise{i}"].copy()) for i in range(n_noise)],
            final_loss=float(info[0]),
            trace=[tuple(r) for r in z["trace"].tolist()],
            image_id=None if info[1] < 0 else int(info[1]),
            seed=int(info[2]),
        )
