"""Toy dataset ingestion: 10-class handwritten digits at 16x16.

The source images are the 8x8 digits bundled with scikit-learn, bilinearly
upsampled and mapped to the generator range [-1, 1].
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

DATASETS = ("digits16",)
SPLITS = ("train", "val", "test")


class ChecksumError(RuntimeError):
    pass


@dataclass
class Split:
    images: np.ndarray  # (N, C, H, W) float64 in [-1, 1]
    labels: np.ndarray  # (N,) int64
    ids: np.ndarray  # (N,) int64, global image ids

    def __len__(self) -> int:
        return len(self.labels)

    def tensors(self, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.from_numpy(self.images).to(dtype), torch.from_numpy(self.labels)


def _digits16() -> tuple[np.ndarray, np.ndarray]:
    from sklearn.datasets import load_digits

    raw = load_digits()
    x = torch.from_numpy(raw.images.astype(np.float64) / 16.0)[:, None]
    x = F.interpolate(x, size=(16, 16), mode="bilinear", align_corners=False)
    x = x.clamp(0.0, 1.0) * 2.0 - 1.0
    return x.numpy(), raw.target.astype(np.int64)


def _checksum(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _split_indices(n: int, fractions: tuple[float, float, float], seed: int = 0) -> dict[str, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }


def ingest(dataset_id: str, root: str | Path, fractions=(0.8, 0.1, 0.1)) -> Path:
    """Generate the dataset under ``root/dataset_id`` and verify checksums.

    Rerunning is a no-op when the stored arrays match their manifest. A stored
    array that no longer matches its recorded checksum raises ChecksumError.
    """
    if dataset_id not in DATASETS:
        raise ValueError(f"unknown dataset {dataset_id!r}; known: {DATASETS}")
    out = Path(root) / dataset_id
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        verify(dataset_id, root)
        return out
    images, labels = _digits16()
    idx = _split_indices(len(labels), tuple(fractions))
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "data.npz", images=images, labels=labels)
    manifest = {
        "dataset_id": dataset_id,
        "shape": list(images.shape[1:]),
        "num_classes": int(labels.max()) + 1,
        "checksum": _checksum(images, labels),
        "splits": {k: v.tolist() for k, v in idx.items()},
        "mean": float(images.mean()),
        "std": float(images.std()),
    }
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return out


def verify(dataset_id: str, root: str | Path) -> dict:
    out = Path(root) / dataset_id
    manifest = json.loads((out / "manifest.json").read_text())
    with np.load(out / "data.npz") as z:
        got = _checksum(z["images"], z["labels"])
    if got != manifest["checksum"]:
        raise ChecksumError(f"{out / 'data.npz'}: checksum mismatch")
    return manifest


class Dataset:
    """Loaded dataset with its train/val/test splits."""

    def __init__(self, dataset_id: str, root: str | Path):
        self.manifest = verify(dataset_id, root)
        self.dataset_id = dataset_id
        with np.load(Path(root) / dataset_id / "data.npz") as z:
            self.images = z["images"]
            self.labels = z["labels"]
        self.num_classes = self.manifest["num_classes"]
        self.mean = self.manifest["mean"]
        self.std = self.manifest["std"]

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        ids = np.asarray(self.manifest["splits"][name], dtype=np.int64)
        return Split(self.images[ids], self.labels[ids], ids)

    def by_ids(self, ids) -> Split:
        ids = np.asarray(ids, dtype=np.int64)
        return Split(self.images[ids], self.labels[ids], ids)


def sample_per_class(split: Split, per_class: int, seed: int) -> Split:
    """Draw ``per_class`` images of each class, returned sorted by image id."""
    rng = np.random.default_rng(seed)
    chosen = []
    for c in np.unique(split.labels):
        pos = np.flatnonzero(split.labels == c)
        chosen.append(rng.choice(pos, size=min(per_class, len(pos)), replace=False))
    pos = np.concatenate(chosen)
    pos = pos[np.argsort(split.ids[pos])]
    return Split(split.images[pos], split.labels[pos], split.ids[pos])
