"""Networks: style-based conditional generator, multi-scale discriminators,
classifier zoo and the frozen perceptual feature network.

The synthesis network is written functionally over a parameter dict so the
same code runs with one shared weight set ``(out, in, k, k)`` or a stack of
per-sample weight sets ``(B, out, in, k, k)``. Attack campaigns use the
stacked form to tune one private generator copy per image in a single pass.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig, to_dict

FORMAT_VERSION = 1
LRELU_GAIN = math.sqrt(2.0)

Params = dict[str, torch.Tensor]


class CheckpointError(RuntimeError):
    pass


class NumericalFault(FloatingPointError):
    """A forward pass or loss produced non-finite values."""


def _lrelu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, 0.2) * LRELU_GAIN


def _norm2(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return x * torch.rsqrt(x.square().mean(dim=1, keepdim=True) + eps)


# ---------------------------------------------------------------------------
# Generator


class MappingNetwork(nn.Module):
    """(z, class) -> style vector, broadcast to one row per synthesis layer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Parameter(torch.randn(cfg.num_classes, cfg.z_dim))
        dims = [2 * cfg.z_dim, cfg.mapping_hidden, cfg.mapping_hidden, cfg.style_dim]
        self.fcs = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, z: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.cfg.z_dim:
            raise ValueError(f"z must have shape (B, {self.cfg.z_dim}), got {tuple(z.shape)}")
        c = torch.as_tensor(c, dtype=torch.long).reshape(-1)
        if c.numel() != z.shape[0]:
            raise ValueError("one class label per latent required")
        if (c < 0).any() or (c >= self.cfg.num_classes).any():
            raise ValueError("class label out of range")
        h = torch.cat([_norm2(z), _norm2(self.embed[c])], dim=1)
        for i, fc in enumerate(self.fcs):
            h = fc(h)
            if i < len(self.fcs) - 1:
                h = _lrelu(h)
        return h.unsqueeze(1).expand(-1, self.cfg.num_layers, -1).contiguous()


class SynthesisNetwork(nn.Module):
    """Stack of style-modulated 3x3 convolutions with per-layer noise."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.layers[0][1]
        self.const = nn.Parameter(torch.randn(c0, 4, 4))
        cin = c0
        self.upsample: list[bool] = []
        prev = 4
        for i, (res, cout) in enumerate(cfg.layers):
            self.register_parameter(f"l{i}_weight", nn.Parameter(torch.randn(cout, cin, 3, 3)))
            self.register_parameter(f"l{i}_affine_w", nn.Parameter(torch.randn(cin, cfg.style_dim)))
            self.register_parameter(f"l{i}_affine_b", nn.Parameter(torch.ones(cin)))
            self.register_parameter(f"l{i}_bias", nn.Parameter(torch.zeros(cout)))
            self.register_parameter(f"l{i}_noise_strength", nn.Parameter(torch.zeros(1)))
            self.upsample.append(res != prev)
            prev = res
            cin = cout
        self.torgb_weight = nn.Parameter(torch.randn(cfg.img_channels, cin))
        self.torgb_bias = nn.Parameter(torch.zeros(cfg.img_channels))

    def params(self) -> Params:
        return dict(self.named_parameters())

    def noise_shapes(self) -> list[tuple[int, int]]:
        return [(res, res) for res, _ in self.cfg.layers]

    def forward(self, w: torch.Tensor, noise: list[torch.Tensor], params: Params | None = None) -> torch.Tensor:
        return synthesis_forward(self.cfg, self.upsample, params if params is not None else self.params(), w, noise)


def _modconv(x: torch.Tensor, weight: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
    """Modulated + demodulated 3x3 convolution.

    ``weight`` is (O, I, k, k) when shared across the batch, else (B, O, I, k, k).
    Modulation is applied to the activations and demodulation to the output,
    which is equivalent to scaling the kernel per sample.
    """
    b, cin, h, wd = x.shape
    s2 = style.square()
    x = x * style[:, :, None, None]
    if weight.dim() == 4:
        demod = torch.rsqrt(s2 @ weight.square().sum(dim=(2, 3)).T + 1e-8)
        y = F.conv2d(x, weight, padding=1)
    else:
        cout = weight.shape[1]
        demod = torch.rsqrt(torch.bmm(weight.square().sum(dim=(3, 4)), s2[:, :, None]).squeeze(2) + 1e-8)
        y = F.conv2d(x.reshape(1, b * cin, h, wd), weight.reshape(b * cout, cin, *weight.shape[3:]), padding=1, groups=b)
        y = y.reshape(b, cout, h, wd)
    return y * demod[:, :, None, None]


def synthesis_forward(cfg: ModelConfig, upsample: list[bool], p: Params, w: torch.Tensor, noise: list[torch.Tensor]) -> torch.Tensor:
    """Render images from style codes ``w`` (B, L, S) and noise maps.

    ``p`` holds either shared weights or per-sample weight stacks whose leading
    dimension equals the batch size.
    """
    if w.dim() != 3 or w.shape[1:] != (cfg.num_layers, cfg.style_dim):
        raise ValueError(f"style code must be (B, {cfg.num_layers}, {cfg.style_dim}), got {tuple(w.shape)}")
    if len(noise) != cfg.num_layers:
        raise ValueError(f"expected {cfg.num_layers} noise maps, got {len(noise)}")
    b = w.shape[0]
    batched = p["const"].dim() == 4
    if batched and p["const"].shape[0] != b:
        raise ValueError("per-sample weights must match the batch size")

    def bcast(t: torch.Tensor) -> torch.Tensor:
        # (B, ...) for stacked weights, (1, ...) for shared ones
        return t if batched else t.unsqueeze(0)

    x = bcast(p["const"]).expand(b, -1, -1, -1)
    for i, up in enumerate(upsample):
        if up:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        weight = p[f"l{i}_weight"]
        fan_in = weight.shape[-3] * weight.shape[-2] * weight.shape[-1]
        aw = bcast(p[f"l{i}_affine_w"]) / math.sqrt(cfg.style_dim)
        style = (w[:, i, None, :] * aw).sum(dim=-1) + bcast(p[f"l{i}_affine_b"])
        x = _modconv(x, weight / math.sqrt(fan_in), style)
        n = noise[i]
        if n.shape[-2:] != x.shape[-2:]:
            raise ValueError(f"noise map {i} has shape {tuple(n.shape[-2:])}, expected {tuple(x.shape[-2:])}")
        strength = bcast(p[f"l{i}_noise_strength"]).reshape(-1, 1, 1, 1)
        x = x + strength * n.reshape(b, 1, *n.shape[-2:])
        x = _lrelu(x + bcast(p[f"l{i}_bias"])[:, :, None, None])
    rgb_w = p["torgb_weight"] / math.sqrt(x.shape[1])
    if batched:
        y = torch.bmm(rgb_w, x.flatten(2)).reshape(b, -1, *x.shape[2:])
    else:
        y = F.conv2d(x, rgb_w[:, :, None, None])
    y = y + bcast(p["torgb_bias"])[:, :, None, None]
    return torch.tanh(y)


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg)
        self.synthesis = SynthesisNetwork(cfg)

    def map_latent(self, z: torch.Tensor, c) -> torch.Tensor:
        return self.mapping(z, c)

    def synthesize(self, w: torch.Tensor, noise: list[torch.Tensor], params: Params | None = None) -> torch.Tensor:
        return self.synthesis(w, noise, params)

    def make_noise(self, batch: int, generator: torch.Generator | None = None) -> list[torch.Tensor]:
        dt = self.synthesis.const.dtype
        return [torch.randn(batch, 1, h, w, dtype=dt, generator=generator) for h, w in self.synthesis.noise_shapes()]

    def sample_z(self, batch: int, generator: torch.Generator | None = None) -> torch.Tensor:
        return torch.randn(batch, self.cfg.z_dim, dtype=self.synthesis.const.dtype, generator=generator)

    def forward(self, z, c, noise=None):
        noise = noise if noise is not None else self.make_noise(z.shape[0])
        return self.synthesize(self.map_latent(z, c), noise)

    @torch.no_grad()
    def class_mean_style(self, c: int, samples: int = 512, generator: torch.Generator | None = None) -> torch.Tensor:
        z = self.sample_z(samples, generator)
        return self.map_latent(z, torch.full((samples,), c)).mean(dim=0)


def synthesize(G: Generator, w: torch.Tensor, noise: list[torch.Tensor], params: Params | None = None) -> torch.Tensor:
    """Render images and raise NumericalFault if any pixel is not finite.

    The attack loop calls ``G.synthesize`` directly and handles non-finite
    values per attack instead.
    """
    x = G.synthesize(w, noise, params)
    if not torch.isfinite(x).all():
        raise NumericalFault("synthesis produced non-finite pixels")
    return x


def clone_weights(params: Params) -> Params:
    """Deep, independent copy of a weight collection (detached, grad-enabled)."""
    return {k: v.detach().clone().requires_grad_(v.requires_grad) for k, v in params.items()}


def stack_weights(params: Params, n: int) -> Params:
    """``n`` independent copies of ``params`` stacked along a new leading axis."""
    return {k: v.detach().unsqueeze(0).repeat(n, *([1] * v.dim())).contiguous() for k, v in params.items()}


# ---------------------------------------------------------------------------
# Discriminators


class _DNet(nn.Module):
    def __init__(self, cin: int, ch: int, res: int):
        super().__init__()
        self.c1 = nn.Conv2d(cin, ch, 3, padding=1)
        self.c2 = nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1)
        self.c3 = nn.Conv2d(2 * ch, 2 * ch, 3, stride=2, padding=1)
        r = max(1, (res + 3) // 4)
        self.fc = nn.Linear(2 * ch * r * r, 1)

    def forward(self, x):
        x = F.leaky_relu(self.c1(x), 0.2)
        x = F.leaky_relu(self.c2(x), 0.2)
        x = F.leaky_relu(self.c3(x), 0.2)
        return self.fc(x.flatten(1)).squeeze(1)


class DiscriminatorSet(nn.Module):
    """One discriminator per scale; scale l sees the image downsampled 2**l times."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.nets = nn.ModuleList(
            _DNet(cfg.img_channels, cfg.d_channels, cfg.img_size // 2**l) for l in range(cfg.num_d_scales)
        )

    def logits(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        for l, net in enumerate(self.nets):
            xl = F.avg_pool2d(x, 2**l) if l else x
            out.append(net(xl))
        return out

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [torch.sigmoid(s) for s in self.logits(x)]


def discriminate(ds: DiscriminatorSet, x: torch.Tensor) -> list[torch.Tensor]:
    """Probability-of-real score per discriminator scale."""
    return ds(x)


# ---------------------------------------------------------------------------
# Classifier zoo and perceptual network

ARCHS = ("conv", "mlp", "oracle", "perceptual")
# per-architecture name of the feature stack, so checkpoints of different
# architectures never share parameter names
_STACK = {"conv": "convs", "mlp": "dense", "oracle": "pooled_convs", "perceptual": "taps"}


class ImageClassifier(nn.Module):
    """Classifier with its preprocessing (center crop + normalization) built in."""

    def __init__(self, cfg: ModelConfig, arch: str, mean: float = 0.0, std: float = 1.0):
        super().__init__()
        if arch not in ARCHS:
            raise ValueError(f"unknown architecture {arch!r}; known: {ARCHS}")
        self.cfg = cfg
        self.arch = arch
        self.crop = None if arch == "perceptual" else cfg.crop_size
        self.register_buffer("mean", torch.tensor(float(mean)))
        self.register_buffer("std", torch.tensor(float(std)))
        c = cfg.img_channels
        k = cfg.num_classes
        if arch == "conv":
            blocks = nn.ModuleList([
                nn.Conv2d(c, 16, 3, padding=1),
                nn.Conv2d(16, 32, 3, stride=2, padding=1),
                nn.Conv2d(32, 64, 3, stride=2, padding=1),
            ])
            self.head = nn.Linear(64, k)
        elif arch == "oracle":
            blocks = nn.ModuleList([
                nn.Conv2d(c, 24, 5, padding=2),
                nn.Conv2d(24, 48, 5, padding=2),
            ])
            self.head = nn.Linear(48 * (cfg.crop_size // 4) ** 2, k)
        elif arch == "mlp":
            n = c * cfg.crop_size**2
            blocks = nn.ModuleList([nn.Linear(n, 128), nn.Linear(128, 64)])
            self.head = nn.Linear(64, k)
        else:
            chans = (c,) + tuple(cfg.perceptual_channels)
            blocks = nn.ModuleList(
                nn.Conv2d(a, b, 3, stride=1 if i == 0 else 2, padding=1)
                for i, (a, b) in enumerate(zip(chans[:-1], chans[1:]))
            )
            self.head = nn.Linear(chans[-1], k)
        self.add_module(_STACK[arch], blocks)

    @property
    def blocks(self) -> nn.ModuleList:
        return self._modules[_STACK[self.arch]]

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        if self.crop is not None and self.crop < x.shape[-1]:
            top = (x.shape[-2] - self.crop) // 2
            left = (x.shape[-1] - self.crop) // 2
            x = x[..., top : top + self.crop, left : left + self.crop]
        return (x - self.mean) / self.std

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Post-activation output of every block (preprocessing included)."""
        h = self.preprocess(x)
        taps = []
        if self.arch == "mlp":
            h = h.flatten(1)
        for blk in self.blocks:
            h = F.leaky_relu(blk(h), 0.2)
            if self.arch == "oracle":
                h = F.max_pool2d(h, 2)
            taps.append(h)
        return taps

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)[-1]
        if self.arch in ("conv", "perceptual"):
            return h.mean(dim=(2, 3))
        return h.flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.penultimate(x))


@dataclass
class ClassifierHandle:
    id: str
    arch: str
    net: ImageClassifier | None = None
    meta: dict = field(default_factory=dict)

    @property
    def preprocessing(self) -> dict:
        if self.net is None:
            return {}
        return {"crop": self.net.crop, "mean": float(self.net.mean), "std": float(self.net.std)}

    def require(self) -> ImageClassifier:
        if self.net is None:
            raise RuntimeError(f"classifier {self.id!r} is not loaded")
        return self.net


def classify(handle: ClassifierHandle, x: torch.Tensor) -> torch.Tensor:
    """Class probabilities (B, K); preprocessing is applied inside the handle."""
    return torch.softmax(handle.require()(x), dim=-1)


def perceptual_embed(net: ImageClassifier, x: torch.Tensor) -> list[torch.Tensor]:
    return net.features(x)


def argmax_lowest(probs: torch.Tensor) -> torch.Tensor:
    """Argmax along the last axis, ties resolved toward the lowest index."""
    top = probs.max(dim=-1, keepdim=True).values
    hit = probs == top
    idx = torch.arange(probs.shape[-1]).expand_as(probs)
    return torch.where(hit, idx, probs.shape[-1]).min(dim=-1).values


# ---------------------------------------------------------------------------
# Checkpoints


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def save_checkpoint(path: str | Path, bundle: dict[str, Any]) -> Path:
    """Write ``{"params": {name: array}, "meta": {...}}`` as an .npz container.

    Metadata is stored as a JSON string alongside the arrays and always carries
    the format version.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(bundle.get("meta", {}))
    meta["format_version"] = FORMAT_VERSION
    arrays = {}
    for name, v in bundle["params"].items():
        arr = v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v)
        arrays["p:" + name] = arr
    meta["shapes"] = {k[2:]: [list(a.shape), str(a.dtype)] for k, a in arrays.items()}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expect_hash: str | None = None) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {meta.get('format_version')} != {FORMAT_VERSION}")
        if expect_hash is not None and meta.get("config_hash") != expect_hash:
            raise CheckpointError(f"{path}: config hash {meta.get('config_hash')} != expected {expect_hash}")
        params = {k[2:]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("p:")}
    for name, (shape, dtype) in meta["shapes"].items():
        if list(params[name].shape) != shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {list(params[name].shape)}, declared {shape}")
    return {"params": params, "meta": meta}


def module_bundle(module: nn.Module, meta: dict) -> dict:
    return {"params": {k: v for k, v in module.state_dict().items()}, "meta": meta}


def model_config_from_meta(meta: dict) -> ModelConfig:
    from .config import from_dict

    return from_dict(ModelConfig, meta["model"])


def build_from_bundle(bundle: dict) -> nn.Module:
    """Reconstruct a frozen module from a loaded checkpoint bundle."""
    meta = bundle["meta"]
    cfg = model_config_from_meta(meta)
    kind = meta["kind"]
    if kind == "gan":
        module = nn.ModuleDict({"G": Generator(cfg), "D": DiscriminatorSet(cfg)})
    elif kind == "classifier":
        module = ImageClassifier(cfg, meta["arch"])
    else:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    module.load_state_dict(bundle["params"])
    return freeze(module)


def model_meta(cfg: ModelConfig, **extra) -> dict:
    meta = {"model": to_dict(cfg)}
    meta.update(extra)
    return meta


def copy_module(module: nn.Module) -> nn.Module:
    return copy.deepcopy(module)
