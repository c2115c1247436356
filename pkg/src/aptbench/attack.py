"""Pivotal-tuning attacks and the latent-space baselines.

Every attack owns a private copy of the synthesis weights and a private RNG
stream keyed by ``(seed, image_id)``. The engine advances a whole batch of
attacks in lock-step with stacked weights; an attack that stops is simply
dropped from the active set, so its outcome does not depend on the rest of
the batch.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .config import AttackConfig
from .inversion import PivotState, stack_pivots
from .losses import apt_total, fooling_loss, loss_rec, pg_from_scores
from .models import ClassifierHandle, DiscriminatorSet, Generator, ImageClassifier, argmax_lowest, classify

STOP_REASONS = ("fooled_within_d", "hit_distance_bound", "max_iters", "non_finite")


@dataclass
class AttackRecord:
    image_id: int | None
    true_class: int
    c_any: int
    mode: str
    target: str
    d: float
    stop_reason: str
    emitted: bool
    L_pt_at_emission: float | None
    iterations_used: int
    emitted_iteration: int | None
    conf_true_before: float | None
    conf_true_after: float | None = None
    fooled: dict[str, bool] = field(default_factory=dict)
    predicted: dict[str, int] = field(default_factory=dict)
    realness: float | None = None
    image: np.ndarray | None = field(default=None, repr=False)
    trace: list[dict] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k not in ("image", "trace")}
        out["fooled"] = dict(sorted(self.fooled.items()))
        out["predicted"] = dict(sorted(self.predicted.items()))
        return out

    @classmethod
    def from_json(cls, data: dict) -> "AttackRecord":
        return cls(**data)


def _stream_seed(seed: int, image_id: int | None, salt: str) -> int:
    h = hashlib.sha256(f"{seed}:{image_id}:{salt}".encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


def choose_fool_target(true_class: int, num_classes: int, rng: np.random.Generator) -> int:
    """Uniform draw among the classes other than ``true_class``."""
    if num_classes < 2:
        raise ValueError("need at least two classes to pick a decoy")
    k = int(rng.integers(num_classes - 1))
    return k if k < true_class else k + 1


@torch.no_grad()
def locality_radius_unit(G: Generator, samples: int = 256, seed: int = 0) -> float:
    """Typical within-class distance ``E||w_z - mean_c||_F`` of the mapped codes."""
    gen = torch.Generator().manual_seed(seed)
    dists = []
    for c in range(G.cfg.num_classes):
        w = G.map_latent(G.sample_z(samples, gen), torch.full((samples,), c))
        dists.append((w - w.mean(dim=0)).flatten(1).norm(dim=1).mean())
    return float(torch.stack(dists).mean())


class _FlatAdam:
    """Adam over a ``(B, P)`` block of per-attack parameters.

    Rows are independent problems. :meth:`keep` drops finished rows so later
    steps touch only the live ones. Each step matches ``torch.optim.Adam``.
    """

    def __init__(self, flat: torch.Tensor, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.x = flat.detach().clone()
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = torch.zeros_like(self.x)
        self.v = torch.zeros_like(self.x)
        self.t = 0

    def keep(self, rows: torch.Tensor) -> None:
        self.x, self.m, self.v = self.x[rows], self.m[rows], self.v[rows]

    @torch.no_grad()
    def step(self, grad: torch.Tensor) -> None:
        # all live rows have taken the same number of steps
        self.t += 1
        self.m.mul_(self.b1).add_(grad, alpha=1 - self.b1)
        self.v.mul_(self.b2).addcmul_(grad, grad, value=1 - self.b2)
        bc1 = 1 - self.b1**self.t
        bc2 = math.sqrt(1 - self.b2**self.t)
        denom = (self.v.sqrt() / bc2).add_(self.eps)
        self.x.addcdiv_(self.m, denom, value=-self.lr / bc1)


def _flatten(tensors: Sequence[torch.Tensor]) -> tuple[torch.Tensor, list[tuple[int, ...]]]:
    b = tensors[0].shape[0]
    return torch.cat([t.reshape(b, -1) for t in tensors], dim=1), [tuple(t.shape[1:]) for t in tensors]


def _unflatten(flat: torch.Tensor, shapes: list[tuple[int, ...]]) -> list[torch.Tensor]:
    sizes = [math.prod(s) for s in shapes]
    return [p.reshape(flat.shape[0], *s) for p, s in zip(torch.split(flat, sizes, dim=1), shapes)]


class StopRule:
    """Termination and emission logic of one attack.

    Iterate ``t`` is the state after ``t`` optimizer steps; iterate 0 (the
    untouched pivot reconstruction) is never emitted. The first of these ends
    the attack:

    * the iterate is within the bound (``L_pt <= d``) and misclassified:
      emit it (``fooled_within_d``);
    * the iterate leaves the bound after an earlier one was inside it: emit
      the latest in-bound misclassified iterate, else the latest in-bound one
      (``hit_distance_bound``);
    * ``t == max_iters``: emit as in the previous case if any iterate was
      in bound, else emit nothing (``max_iters``).
    """

    def __init__(self, d: float, max_iters: int):
        self.d = d
        self.max_iters = max_iters
        self.last_ok = None  # (payload, L_pt, t)
        self.last_ok_fooled = None

    def _best(self):
        return self.last_ok_fooled or self.last_ok or (None, None, None)

    def observe(self, t: int, l_pt: float, fooled: bool, payload=None):
        """Feed iterate ``t``; returns ``(reason, payload, L_pt, t_emit)`` once finished."""
        if t >= 1:
            if l_pt <= self.d:
                self.last_ok = (payload, l_pt, t)
                if fooled:
                    self.last_ok_fooled = self.last_ok
                    return ("fooled_within_d", payload, l_pt, t)
            elif self.last_ok is not None:
                return ("hit_distance_bound", *self._best())
        if t >= self.max_iters:
            return ("max_iters", *self._best())
        return None


@dataclass
class Fixtures:
    """Frozen models an attack needs."""

    G: Generator
    D: DiscriminatorSet
    pnet: ImageClassifier
    classifiers: dict[str, ClassifierHandle]

    def handle(self, cid: str) -> ClassifierHandle:
        if cid not in self.classifiers:
            raise KeyError(f"no classifier {cid!r}; available: {sorted(self.classifiers)}")
        return self.classifiers[cid]


@torch.no_grad()
def _judge(records: list[AttackRecord], images: list[torch.Tensor | None], fx: Fixtures) -> None:
    idx = [i for i, im in enumerate(images) if im is not None]
    if not idx:
        return
    batch = torch.stack([images[i] for i in idx])
    scores = torch.stack(fx.D(batch)).mean(dim=0)
    preds = {cid: argmax_lowest(classify(h, batch)) for cid, h in sorted(fx.classifiers.items())}
    probs_t = classify(fx.handle(records[idx[0]].target), batch)
    for j, i in enumerate(idx):
        r = records[i]
        r.realness = float(scores[j])
        r.predicted = {cid: int(p[j]) for cid, p in preds.items()}
        r.fooled = {cid: int(p[j]) != r.true_class for cid, p in preds.items()}
        r.conf_true_after = float(probs_t[j, r.true_class])
        r.image = batch[j].cpu().numpy()


def attack_batch(
    images: torch.Tensor,
    labels: torch.Tensor,
    image_ids: Sequence[int],
    pivots: Sequence[PivotState],
    fx: Fixtures,
    cfg: AttackConfig,
    alpha: float | None = None,
    keep_trace: bool = True,
) -> list[AttackRecord]:
    """Run one attack per image, all in lock-step.

    ``cfg.mode`` selects pivotal tuning of the synthesis weights (``"apt"``)
    or optimization of the pivot code and noise with frozen weights
    (``"latent"``). The objective and the stopping rule are the same.
    """
    cfg.validate()
    if cfg.mode not in ("apt", "latent"):
        raise ValueError(f"attack_batch does not run mode {cfg.mode!r}")
    G, target = fx.G, fx.handle(cfg.target)
    b = images.shape[0]
    labels = torch.as_tensor(labels, dtype=torch.long)
    ids = [int(i) for i in image_ids]
    K = G.cfg.num_classes
    weights = cfg.weights
    if alpha is None:
        alpha = cfg.alpha_rel * locality_radius_unit(G)
    feats = fx.pnet.features

    c_any = torch.tensor(
        [choose_fool_target(int(c), K, np.random.default_rng(_stream_seed(cfg.seed, i, "c_any"))) for c, i in zip(labels, ids)]
    )
    resample_rngs = [np.random.default_rng(_stream_seed(cfg.seed, i, "c_any_resample")) for i in ids]
    z_gens = [torch.Generator().manual_seed(_stream_seed(cfg.seed, i, "z")) for i in ids]

    w_p, noise = stack_pivots(list(pivots))
    w_p = w_p.to(images.dtype)
    noise = [n.to(images.dtype) for n in noise]
    theta = {k: v.detach() for k, v in G.synthesis.params().items()}
    if cfg.mode == "apt":
        names = list(theta)
        flat, shapes = _flatten([theta[k].unsqueeze(0).expand(b, *theta[k].shape) for k in names])
    else:
        names = []
        flat, shapes = _flatten([w_p] + list(noise))
    opt = _FlatAdam(flat, cfg.lr if cfg.mode == "apt" else cfg.latent_lr)
    rows = torch.arange(b)  # original index of each live attack, in optimizer row order

    with torch.no_grad():
        conf_before = classify(target, images)[torch.arange(b), labels]

    done = torch.zeros(b, dtype=torch.bool)
    rules = [StopRule(cfg.d, cfg.max_iters) for _ in range(b)]
    records: list[AttackRecord | None] = [None] * b
    emitted: list[torch.Tensor | None] = [None] * b
    traces: list[list[dict]] = [[] for _ in range(b)]

    def finish(i: int, reason: str, t: int, img, lpt, it) -> None:
        done[i] = True
        emitted[i] = img
        records[i] = AttackRecord(
            image_id=ids[i],
            true_class=int(labels[i]),
            c_any=int(c_any[i]),
            mode=cfg.mode,
            target=cfg.target,
            d=cfg.d,
            stop_reason=reason,
            emitted=img is not None,
            L_pt_at_emission=lpt,
            iterations_used=t,
            emitted_iteration=it,
            conf_true_before=float(conf_before[i]),
            trace=traces[i],
        )

    for t in range(cfg.max_iters + 1):
        if rows.numel() == 0:
            break
        last = t == cfg.max_iters
        z = torch.cat([torch.randn(1, G.cfg.z_dim, dtype=images.dtype, generator=z_gens[i]) for i in rows.tolist()])
        if cfg.resample_c_any and t > 0:
            for i in rows.tolist():
                c_any[i] = choose_fool_target(int(labels[i]), K, resample_rngs[i])
        with torch.no_grad():
            w_z = G.map_latent(z, labels[rows])
        leaf = opt.x.detach().requires_grad_(not last)
        with torch.set_grad_enabled(not last):
            leaves = _unflatten(leaf, shapes)
            if cfg.mode == "apt":
                theta_hat = dict(zip(names, leaves))
                w_act, n_act = w_p[rows], [n[rows] for n in noise]
            else:
                theta_hat = theta
                w_act, n_act = leaves[0], leaves[1:]
            L_rec, parts = loss_rec(images[rows], w_act, n_act, G.synthesize, theta, theta_hat, w_z, alpha, weights, feats)
            x_star = parts["x_p_star"]
            probs = classify(target, x_star)
            L_CE = fooling_loss(probs, c_any[rows])
            L_PG = pg_from_scores(fx.D(x_star))
            total, br = apt_total(L_rec, parts, L_CE, L_PG, weights)

        brd = br.detach()
        lpt = brd.L_pt
        fooled_now = argmax_lowest(probs.detach()) != labels[rows]
        finite = torch.isfinite(brd.total)
        step_rows = []
        for j, i in enumerate(rows.tolist()):
            if keep_trace:
                traces[i].append({"iter": t, **brd.record(j), "fooled": bool(fooled_now[j])})
            if not bool(finite[j]):
                finish(i, "non_finite", t, None, None, None)
                continue
            img = x_star[j].detach().clamp(-1, 1) if t >= 1 else None
            verdict = rules[i].observe(t, float(lpt[j]), bool(fooled_now[j]), img)
            if verdict is not None:
                reason, out_img, out_lpt, out_t = verdict
                finish(i, reason, t, out_img, out_lpt, out_t)
                continue
            step_rows.append(j)
        if last or not step_rows:
            break
        sel = torch.tensor(step_rows)
        (grad,) = torch.autograd.grad(total[sel].sum(), leaf)
        if len(step_rows) < len(rows):
            opt.keep(sel)
            rows, grad = rows[sel], grad[sel]
        opt.step(grad)

    _judge(records, emitted, fx)
    return records


def apt_attack(x, pivot: PivotState, fx: Fixtures, cfg: AttackConfig, true_class: int, image_id: int = 0, alpha=None) -> AttackRecord:
    """Pivotal-tuning attack on a single image."""
    cfg = cfg if cfg.mode == "apt" else _with_mode(cfg, "apt")
    return attack_batch(x.reshape(1, *x.shape[-3:]), torch.tensor([true_class]), [image_id], [pivot], fx, cfg, alpha)[0]


def latent_only_attack(x, pivot: PivotState, fx: Fixtures, cfg: AttackConfig, true_class: int, image_id: int = 0, alpha=None) -> AttackRecord:
    """Same loop as :func:`apt_attack` with the generator weights frozen."""
    return attack_batch(
        x.reshape(1, *x.shape[-3:]), torch.tensor([true_class]), [image_id], [pivot], fx, _with_mode(cfg, "latent"), alpha
    )[0]


def _with_mode(cfg: AttackConfig, mode: str) -> AttackConfig:
    from dataclasses import replace

    return replace(cfg, mode=mode)


def random_sample_attack(
    classes: Sequence[int], fx: Fixtures, cfg: AttackConfig, run_keys: Sequence[int] | None = None
) -> list[AttackRecord]:
    """Fool the target with freshly generated samples (no source image).

    Starts from a random latent of class ``c`` and optimizes the style code and
    noise against the fooling loss alone until the target misclassifies.
    """
    G, target = fx.G, fx.handle(cfg.target)
    classes = torch.as_tensor(list(classes), dtype=torch.long)
    b = len(classes)
    keys = list(range(b)) if run_keys is None else [int(k) for k in run_keys]
    K = G.cfg.num_classes
    gens = [torch.Generator().manual_seed(_stream_seed(cfg.seed, k, "random")) for k in keys]
    c_any = torch.tensor(
        [choose_fool_target(int(c), K, np.random.default_rng(_stream_seed(cfg.seed, k, "c_any"))) for c, k in zip(classes, keys)]
    )
    with torch.no_grad():
        z = torch.cat([G.sample_z(1, g) for g in gens])
        w = G.map_latent(z, classes)
        noise = [torch.cat(parts) for parts in zip(*[G.make_noise(1, g) for g in gens])]
        start = G.synthesize(w, noise)
        conf_before = classify(target, start)[torch.arange(b), classes]
    flat, shapes = _flatten([w] + noise)
    opt = _FlatAdam(flat, cfg.latent_lr)
    rows = torch.arange(b)
    done = torch.zeros(b, dtype=torch.bool)
    records: list[AttackRecord | None] = [None] * b
    emitted: list[torch.Tensor | None] = [None] * b
    for t in range(cfg.max_iters + 1):
        if rows.numel() == 0:
            break
        last = t == cfg.max_iters
        leaf = opt.x.detach().requires_grad_(not last)
        with torch.set_grad_enabled(not last):
            leaves = _unflatten(leaf, shapes)
            x = G.synthesize(leaves[0], leaves[1:])
            probs = classify(target, x)
            loss = fooling_loss(probs, c_any[rows])
        fooled_now = argmax_lowest(probs.detach()) != classes[rows]
        for j, i in enumerate(rows.tolist()):
            if (t >= 1 and bool(fooled_now[j])) or last:
                done[i] = True
                emitted[i] = x[j].detach().clamp(-1, 1)
                records[i] = AttackRecord(
                    image_id=None,
                    true_class=int(classes[i]),
                    c_any=int(c_any[i]),
                    mode="random",
                    target=cfg.target,
                    d=cfg.d,
                    stop_reason="fooled_within_d" if bool(fooled_now[j]) else "max_iters",
                    emitted=True,
                    L_pt_at_emission=None,
                    iterations_used=t,
                    emitted_iteration=t,
                    conf_true_before=float(conf_before[i]),
                )
        if last:
            break
        sel = torch.tensor([j for j, i in enumerate(rows.tolist()) if not bool(done[i])], dtype=torch.long)
        if sel.numel() == 0:
            break
        (grad,) = torch.autograd.grad(loss[sel].sum(), leaf)
        if sel.numel() < rows.numel():
            opt.keep(sel)
            rows, grad = rows[sel], grad[sel]
        opt.step(grad)
    _judge(records, emitted, fx)
    return records
