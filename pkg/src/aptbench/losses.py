"""Loss terms of the inversion and pivotal-tuning objectives.

All functions are batched: inputs carry a leading batch axis and the result
is one value per sample, shape ``(B,)``. Summing a batched loss gives each
sample's own gradient when the samples do not share parameters, which is how
attack campaigns tune many generator copies at once.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .config import LossWeights

EPS = 1e-12
FeatureFn = Callable[[torch.Tensor], Sequence[torch.Tensor]]


class ZeroDirection(ValueError):
    """The sampled style code coincides with the pivot; resample z."""


def _unit_channels(f: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    if f.dim() == 2:
        f = f[:, :, None, None]
    return f * torch.rsqrt(f.square().sum(dim=1, keepdim=True) + eps)


def perceptual_distance(x: torch.Tensor, y: torch.Tensor, features: FeatureFn) -> torch.Tensor:
    """LPIPS-style distance: unit-normalize each tap along channels, take the
    squared difference summed over channels, average over space, sum over taps.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    total = x.new_zeros(x.shape[0])
    for fx, fy in zip(features(x), features(y)):
        d = (_unit_channels(fx) - _unit_channels(fy)).square().sum(dim=1)
        total = total + d.mean(dim=(1, 2))
    return total


def l2_distance(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean squared pixel error per sample."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return (x - y).square().flatten(1).mean(dim=1)


def noise_reg(noise: Sequence[torch.Tensor], min_size: int = 4) -> torch.Tensor:
    """Multi-scale spatial autocorrelation penalty on noise maps.

    At every pyramid level (halving by 2x2 averaging while the map is at least
    ``min_size`` wide) the squared mean product of the map with its one-pixel
    circular shift is added, for both axes.
    """
    total = None
    for n in noise:
        n = n.reshape(n.shape[0], 1, *n.shape[-2:])
        while min(n.shape[-2:]) >= min_size:
            r = (n * torch.roll(n, 1, dims=3)).mean(dim=(1, 2, 3)).square()
            r = r + (n * torch.roll(n, 1, dims=2)).mean(dim=(1, 2, 3)).square()
            total = r if total is None else total + r
            n = F.avg_pool2d(n, 2)
    if total is None:
        raise ValueError("no noise map is large enough to regularize")
    return total


def loss_pt(x: torch.Tensor, x_p_star: torch.Tensor, weights: LossWeights, features: FeatureFn) -> torch.Tensor:
    return perceptual_distance(x, x_p_star, features) + weights.lambda_l2_p * l2_distance(x, x_p_star)


def loss_R(x_r: torch.Tensor, x_r_star: torch.Tensor, weights: LossWeights, features: FeatureFn) -> torch.Tensor:
    return perceptual_distance(x_r, x_r_star, features) + weights.lambda_l2_r * l2_distance(x_r, x_r_star)


def locality_step(w_p: torch.Tensor, w_z: torch.Tensor, alpha: float | torch.Tensor) -> torch.Tensor:
    """Move ``alpha`` (Frobenius norm) from the pivot toward ``w_z``."""
    diff = w_z - w_p
    norm = diff.flatten(1).norm(dim=1)
    if bool((norm == 0).any()):
        raise ZeroDirection("w_z equals w_p")
    alpha = torch.as_tensor(alpha, dtype=w_p.dtype).reshape(-1)
    return w_p + (alpha / norm).reshape(-1, *([1] * (w_p.dim() - 1))) * diff


def locality_sample(w_p, z, c, alpha, mapping, generator: torch.Generator | None = None, retries: int = 10):
    """Draw the locality code ``w_r`` for each pivot.

    ``mapping`` maps ``(z, c)`` to style codes; a fresh ``z`` is drawn when the
    direction degenerates.
    """
    for _ in range(retries):
        w_z = mapping(z, c)
        try:
            return locality_step(w_p, w_z, alpha)
        except ZeroDirection:
            z = torch.randn(z.shape, dtype=z.dtype, generator=generator)
    raise ZeroDirection(f"degenerate locality direction after {retries} draws")


def fooling_loss(probs: torch.Tensor, c_any: torch.Tensor) -> torch.Tensor:
    """Cross entropy toward the decoy class: ``-log p[c_any]``, clamped at EPS."""
    c_any = torch.as_tensor(c_any, dtype=torch.long).reshape(-1, 1)
    return -torch.log(probs.gather(1, c_any).squeeze(1).clamp_min(EPS))


def pg_from_scores(scores: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over discriminator scales of ``log(1 - D_l)``."""
    return sum(torch.log((1.0 - s).clamp_min(EPS)) for s in scores)


def projected_gan_loss(x: torch.Tensor, discriminators) -> torch.Tensor:
    return pg_from_scores(discriminators(x))


@dataclass
class LossBreakdown:
    """Per-sample values of every term of one objective evaluation."""

    lpips: torch.Tensor
    l2: torch.Tensor
    L_pt: torch.Tensor
    L_R: torch.Tensor
    L_rec: torch.Tensor
    L_CE: torch.Tensor
    L_PG: torch.Tensor
    total: torch.Tensor

    def detach(self) -> "LossBreakdown":
        return LossBreakdown(**{f.name: getattr(self, f.name).detach() for f in fields(self)})

    def record(self, i: int) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name)[i]) for f in fields(self)}


def loss_rec(
    x: torch.Tensor,
    w_p: torch.Tensor,
    noise: Sequence[torch.Tensor],
    synthesize: Callable,
    theta: dict,
    theta_hat: dict,
    w_z: torch.Tensor,
    alpha,
    weights: LossWeights,
    features: FeatureFn,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Reconstruction objective around the pivot.

    ``synthesize(w, noise, params)`` renders images; ``theta`` are the frozen
    original weights and ``theta_hat`` the weights being tuned. ``w_z`` is the
    freshly mapped code that sets the locality direction.
    Returns ``(L_rec, parts)`` where parts holds the intermediate images and
    terms.
    """
    w_r = locality_step(w_p, w_z, alpha)
    x_p_star = synthesize(w_p, noise, theta_hat)
    x_r_star = synthesize(w_r, noise, theta_hat)
    with torch.no_grad():
        x_r = synthesize(w_r, noise, theta)
    lp = perceptual_distance(x, x_p_star, features)
    l2 = l2_distance(x, x_p_star)
    L_pt = lp + weights.lambda_l2_p * l2
    L_R = loss_R(x_r, x_r_star, weights, features)
    parts = {"lpips": lp, "l2": l2, "L_pt": L_pt, "L_R": L_R, "x_p_star": x_p_star, "w_r": w_r}
    return L_pt + L_R, parts


def apt_total(
    L_rec: torch.Tensor,
    parts: dict[str, torch.Tensor],
    L_CE: torch.Tensor,
    L_PG: torch.Tensor,
    weights: LossWeights,
) -> tuple[torch.Tensor, LossBreakdown]:
    total = weights.lambda_rec * L_rec + weights.lambda_ce * L_CE + weights.lambda_pg * L_PG
    br = LossBreakdown(
        lpips=parts["lpips"],
        l2=parts["l2"],
        L_pt=parts["L_pt"],
        L_R=parts["L_R"],
        L_rec=L_rec,
        L_CE=L_CE,
        L_PG=L_PG,
        total=total,
    )
    return total, br
