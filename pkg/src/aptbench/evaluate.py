"""Accuracy/confidence, Frechet distance, transfer and class-preservation metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .models import ClassifierHandle, ImageClassifier, argmax_lowest, classify

PSD_TOL = 1e-6


class NotPSDError(ValueError):
    """A covariance (or covariance product) has clearly negative eigenvalues."""


@torch.no_grad()
def accuracy_confidence(handle: ClassifierHandle, images, labels, batch: int = 512) -> tuple[float, float]:
    """Top-1 accuracy and mean softmax probability of the true label.

    Ties in the argmax go to the lowest class index.
    """
    images = torch.as_tensor(images)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(images) == 0:
        raise ValueError("cannot score an empty image set")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    net = handle.require()
    dtype = next(net.parameters()).dtype
    correct = 0
    conf = 0.0
    for i in range(0, len(images), batch):
        x = images[i : i + batch].to(dtype)
        y = labels[i : i + batch]
        p = classify(handle, x)
        correct += int((argmax_lowest(p) == y).sum())
        conf += float(p[torch.arange(len(y)), y].double().sum())
    return correct / len(images), conf / len(images)


@dataclass
class FeatureStats:
    """Running first and second moments of a feature set.

    Sums are kept in float64 around a fixed shift (the first batch mean), which
    keeps the one-pass covariance accurate. Two stats merge exactly.
    """

    dim: int
    count: int = 0
    shift: np.ndarray | None = None
    s1: np.ndarray | None = None
    s2: np.ndarray | None = None

    def update(self, feats) -> "FeatureStats":
        f = np.asarray(feats, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != self.dim:
            raise ValueError(f"expected (N, {self.dim}) features, got {f.shape}")
        if len(f) == 0:
            return self
        if self.shift is None:
            self.shift = f.mean(axis=0)
            self.s1 = np.zeros(self.dim)
            self.s2 = np.zeros((self.dim, self.dim))
        c = f - self.shift
        self.s1 += c.sum(axis=0)
        self.s2 += c.T @ c
        self.count += len(f)
        return self

    def merge(self, other: "FeatureStats") -> "FeatureStats":
        if other.dim != self.dim:
            raise ValueError("feature dimensions differ")
        out = FeatureStats(self.dim)
        for s in (self, other):
            if s.count == 0:
                continue
            if out.shift is None:
                out.shift, out.s1, out.s2 = s.shift.copy(), np.zeros(self.dim), np.zeros((self.dim, self.dim))
            # re-center the other sums on out.shift
            delta = s.shift - out.shift
            out.s2 += s.s2 + np.outer(s.s1, delta) + np.outer(delta, s.s1) + s.count * np.outer(delta, delta)
            out.s1 += s.s1 + s.count * delta
            out.count += s.count
        return out

    @property
    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no features accumulated")
        return self.shift + self.s1 / self.count

    @property
    def cov(self) -> np.ndarray:
        """Unbiased sample covariance (divides by count - 1)."""
        if self.count < 2:
            raise ValueError("covariance needs at least two samples")
        m = self.s1 / self.count
        c = (self.s2 - self.count * np.outer(m, m)) / (self.count - 1)
        return 0.5 * (c + c.T)

    @classmethod
    def from_moments(cls, mean, cov, count: int = 2) -> "FeatureStats":
        """Stats with a prescribed mean and covariance (for analytic checks)."""
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        s = cls(len(mean), count=count, shift=mean.copy(), s1=np.zeros(len(mean)), s2=cov * (count - 1))
        return s


def penultimate_embedder(net: ImageClassifier) -> Callable[[torch.Tensor], torch.Tensor]:
    return net.penultimate


@torch.no_grad()
def feature_stats(images, embed: Callable[[torch.Tensor], torch.Tensor] | ImageClassifier, batch: int = 256) -> FeatureStats:
    """Embed ``images`` in batches and accumulate their feature statistics."""
    if isinstance(embed, ImageClassifier):
        net = embed
        embed = net.penultimate
        dtype = next(net.parameters()).dtype
    else:
        dtype = torch.float32
    images = torch.as_tensor(images)
    stats = None
    for i in range(0, len(images), batch):
        f = embed(images[i : i + batch].to(dtype)).double().cpu().numpy()
        stats = FeatureStats(f.shape[1]) if stats is None else stats
        stats.update(f)
    if stats is None:
        raise ValueError("cannot compute statistics of an empty image set")
    return stats


def _sym_sqrt(a: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    return vecs @ np.diag(np.sqrt(_clamp_eigs(vals, what))) @ vecs.T


def _clamp_eigs(vals: np.ndarray, what: str) -> np.ndarray:
    top = max(float(np.max(np.abs(vals))), 0.0)
    bad = vals < -PSD_TOL * max(top, 1e-300)
    if bad.any():
        raise NotPSDError(f"{what} is not positive semidefinite: eigenvalues {np.sort(vals[bad])[:5].tolist()} (max |eig| {top:.3e})")
    return np.clip(vals, 0.0, None)


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """``Tr((A B)^{1/2})`` via the symmetric form ``(A^{1/2} B A^{1/2})^{1/2}``."""
    ra = _sym_sqrt(cov_a, "first covariance")
    m = ra @ cov_b @ ra
    vals = np.linalg.eigvalsh(0.5 * (m + m.T))
    return float(np.sqrt(_clamp_eigs(vals, "covariance product")).sum())


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    if a.dim != b.dim:
        raise ValueError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    if a.count < 2 or b.count < 2:
        raise ValueError("each feature set needs at least two samples")
    ca, cb = a.cov, b.cov
    diff = a.mean - b.mean
    # symmetrize the cross term so fid(a, b) == fid(b, a) to rounding
    tr_cross = 0.5 * (trace_sqrt_product(ca, cb) + trace_sqrt_product(cb, ca))
    val = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * tr_cross)
    return max(val, 0.0)


def fooling_rate(records: Sequence, classifier_id: str) -> float:
    """Fraction of attacks whose emitted image is misclassified by ``classifier_id``.

    Attacks that emitted nothing count as not fooling.
    """
    if not records:
        raise ValueError("no attack records")
    return sum(bool(r.emitted and r.fooled.get(classifier_id, False)) for r in records) / len(records)


def class_preservation_rate(records: Sequence, oracle: ClassifierHandle | str) -> float:
    """Fraction of emitted images the oracle still assigns to their true class."""
    oid = oracle if isinstance(oracle, str) else oracle.id
    emitted = [r for r in records if r.emitted]
    if not emitted:
        raise ValueError("no emitted images to judge")
    for r in emitted:
        if oid not in r.predicted:
            raise KeyError(f"records were not judged by oracle {oid!r}")
    return sum(r.predicted[oid] == r.true_class for r in emitted) / len(emitted)


def emitted_set(records: Sequence) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack the emitted images of ``records`` with their true labels."""
    rs = [r for r in records if r.emitted]
    if not rs:
        return torch.empty(0), torch.empty(0, dtype=torch.long)
    return torch.from_numpy(np.stack([r.image for r in rs])), torch.tensor([r.true_class for r in rs])


@dataclass
class TransferMatrix:
    sources: list[str]
    evaluated: list[str]
    accuracy: list[list[float]]
    counts: list[int]

    def diagonal(self) -> dict[str, float]:
        return {s: self.accuracy[i][self.evaluated.index(s)] for i, s in enumerate(self.sources) if s in self.evaluated}

    def table(self) -> str:
        width = max(8, *(len(e) + 2 for e in self.evaluated))
        head = "source \\ eval".ljust(14) + "".join(e.rjust(width) for e in self.evaluated) + "n".rjust(6)
        lines = [head]
        for s, row, n in zip(self.sources, self.accuracy, self.counts):
            cells = "".join((f"{v:.3f}" + ("*" if s == e else " ")).rjust(width) for v, e in zip(row, self.evaluated))
            lines.append(s.ljust(14) + cells + str(n).rjust(6))
        lines.append("* attacked classifier evaluated on its own attack set")
        return "\n".join(lines)


def transfer_matrix(sets: dict[str, tuple], zoo: dict[str, ClassifierHandle]) -> TransferMatrix:
    """Accuracy of every zoo classifier on every source's attack set.

    ``sets`` maps a source classifier id to ``(images, labels)``; entry
    ``(s, e)`` is the accuracy of ``e`` on the images generated against ``s``.
    """
    sources = list(sets)
    evaluated = list(zoo)
    acc = []
    counts = []
    for s in sources:
        images, labels = sets[s]
        counts.append(len(labels))
        acc.append([accuracy_confidence(zoo[e], images, labels)[0] for e in evaluated])
    return TransferMatrix(sources, evaluated, acc, counts)


@dataclass
class EvalReport:
    clean: dict[str, dict[str, float]] = field(default_factory=dict)  # classifier -> {acc, conf}
    attacked: dict[str, dict[str, float]] = field(default_factory=dict)
    fid: dict[str, float] = field(default_factory=dict)
    transfer: dict | None = None
    class_preservation: float | None = None
    fooling_rate: float | None = None
    counts: dict[str, int] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        for part in (self.clean, self.attacked):
            for cid, v in part.items():
                if not 0.0 <= v["acc"] <= 1.0:
                    raise ValueError(f"accuracy of {cid} outside [0, 1]")

    def to_json(self) -> str:
        self.validate()
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def evaluate_campaign(
    records: Sequence,
    clean_images,
    clean_labels,
    zoo: dict[str, ClassifierHandle],
    target: str,
    oracle: str,
    embed: ImageClassifier | None = None,
    reference_images=None,
) -> EvalReport:
    """Score one campaign against its clean inputs.

    ``clean_images`` are the filtered inputs the campaign attacked (aligned
    with ``records``). FID is computed on the penultimate features of
    ``embed`` between ``reference_images`` and both the clean inputs and the
    emitted images.
    """
    rep = EvalReport()
    adv, adv_labels = emitted_set(records)
    for cid, h in sorted(zoo.items()):
        a, c = accuracy_confidence(h, clean_images, clean_labels)
        rep.clean[cid] = {"acc": a, "conf": c}
        if len(adv_labels):
            a, c = accuracy_confidence(h, adv, adv_labels)
            rep.attacked[cid] = {"acc": a, "conf": c}
    rep.counts = {"attacks": len(records), "emitted": int(len(adv_labels))}
    if records:
        rep.fooling_rate = fooling_rate(records, target)
    if len(adv_labels):
        rep.class_preservation = class_preservation_rate(records, oracle)
    if embed is not None and reference_images is not None and len(adv_labels) >= 2:
        ref = feature_stats(reference_images, embed)
        rep.fid = {
            "reference_vs_clean": fid(ref, feature_stats(clean_images, embed)),
            "reference_vs_attacked": fid(ref, feature_stats(adv, embed)),
        }
    rep.meta = {"target": target, "oracle": oracle}
    return rep


def mean_of(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None
