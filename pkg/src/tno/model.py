"""Temporal neural operator: branch + temporal branch + trunk with Hadamard
fusion and a shared pointwise decoder, plus ablation variants and the plain
branch/trunk baseline with inner-product fusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .tensor import Tensor, concat, expand_spatial, hadamard, reduce_sum, reshape, transpose

VARIANTS = (
    "full",
    "no_tbranch",
    "no_unet",
    "one_step",
    "one_step_no_tbranch",
    "deeponet_onestep",
    "deeponet_multistep",
)
_ONE_STEP_VARIANTS = ("one_step", "one_step_no_tbranch", "deeponet_onestep")
_DEEPONET_VARIANTS = ("deeponet_onestep", "deeponet_multistep")
_NO_TBRANCH_VARIANTS = ("no_tbranch", "one_step_no_tbranch") + _DEEPONET_VARIANTS


@dataclass
class TNOConfig:
    """Architecture hyperparameters.

    L: history steps fed to the temporal branch. K: bundled future steps per
    forward pass. p: latent dimension shared by all three sub-networks.
    S: fixed internal pooling resolution (must be a multiple of 8 for the
    U-Net's three halvings to mirror exactly). The decoder reuses
    branch_activation for its hidden layers.
    """

    L: int = 1
    K: int = 4
    p: int = 20
    S: int = 16
    input_channels: int = 1
    variant: str = "full"
    branch_activation: str = "silu"
    tbranch_activation: str = "silu"
    trunk_activation: str = "tanh"
    branch_output_activation: str | None = None
    tbranch_output_activation: str | None = None
    unet_base_channels: int = 32
    decoder_hidden: list[int] | None = None
    trunk_hidden: list[int] = field(default_factory=lambda: [64, 64])
    dtype: str = "f32"

    def __post_init__(self):
        if self.L < 1 or self.K < 1 or self.p < 1 or self.S < 1:
            raise ValueError("L, K, p and S must all be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.variant in _ONE_STEP_VARIANTS and self.K != 1:
            raise ValueError(f"variant {self.variant!r} forces K = 1, got K = {self.K}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        for name in ("branch_activation", "tbranch_activation", "trunk_activation"):
            if getattr(self, name) not in nn.ACTIVATIONS:
                raise ValueError(f"{name} must be one of {nn.ACTIVATIONS}")
        for name in ("branch_output_activation", "tbranch_output_activation"):
            val = getattr(self, name)
            if val is not None and val not in nn.ACTIVATIONS:
                raise ValueError(f"{name} must be None or one of {nn.ACTIVATIONS}")
        if self.decoder_hidden is None:
            self.decoder_hidden = [2 * self.p, 2 * self.p]

    def to_dict(self) -> dict:
        return {
            "L": self.L, "K": self.K, "p": self.p, "S": self.S,
            "input_channels": self.input_channels, "variant": self.variant,
            "branch_activation": self.branch_activation,
            "tbranch_activation": self.tbranch_activation,
            "trunk_activation": self.trunk_activation,
            "branch_output_activation": self.branch_output_activation,
            "tbranch_output_activation": self.tbranch_output_activation,
            "unet_base_channels": self.unet_base_channels,
            "decoder_hidden": list(self.decoder_hidden),
            "trunk_hidden": list(self.trunk_hidden),
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TNOConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TNOConfig keys: {sorted(unknown)}")
        return cls(**d)

    def with_variant(self, variant: str) -> "TNOConfig":
        k = 1 if variant in _ONE_STEP_VARIANTS else self.K
        return replace(self, variant=variant, K=k)


@dataclass
class ForecastBundle:
    """A bundle of K predicted snapshots with their absolute lead times."""

    values: np.ndarray          # (K, H, W)
    lead_times: list[float]
    grid: dict

    def __post_init__(self):
        if len(self.lead_times) != self.values.shape[0]:
            raise ValueError("lead_times must have one entry per predicted snapshot")
        diffs = np.diff(self.lead_times)
        if len(diffs) and (np.any(diffs <= 0) or not np.allclose(diffs, diffs[0], rtol=1e-6)):
            raise ValueError("lead_times must be strictly increasing with uniform spacing")


def apply_pointwise(module: nn.Module, x: Tensor) -> Tensor:
    """Run a (N,C)->(N,Co) module independently at every pixel of (B,C,H,W)."""
    b, c, h, w = x.shape
    flat = reshape(transpose(x, (0, 2, 3, 1)), (b * h * w, c))
    y = module(flat)
    co = y.shape[1]
    return transpose(reshape(y, (b, h, w, co)), (0, 3, 1, 2))


def unet_param_count(p: int, c: int) -> int:
    """Closed-form parameter count of the U-Net below (weights + biases + BN)."""
    return 586 * c * c + 10 * p * c + 37 * c + p


def matched_pointwise_width(p: int, c: int) -> int:
    """Hidden width making a p->h->h->p pointwise MLP match the U-Net budget."""
    target = unet_param_count(p, c)
    h = -(p + 1) + math.sqrt((p + 1) ** 2 + target - p)
    return max(4, int(round(h)))


class UNet(nn.Module):
    """Encoder-decoder on a fixed S-by-S latent grid.

    Three stride-2 3x3 convs with batch norm, a stride-1 bottleneck conv,
    then three stride-2 4x4 deconvs each fed the matching-resolution encoder
    output by channel concatenation, and a final 1x1 projection back to p
    channels. Channel widths are [c, 2c, 4c] with the bottleneck at 4c.
    """

    def __init__(self, p: int, c: int, act: str, rng, dtype="f32"):
        super().__init__()
        self.act = act
        self.conv1 = nn.Conv2d(p, c, 3, 2, 1, rng, dtype=dtype)
        self.bn1 = nn.BatchNorm2d(c, dtype=dtype)
        self.conv2 = nn.Conv2d(c, 2 * c, 3, 2, 1, rng, dtype=dtype)
        self.bn2 = nn.BatchNorm2d(2 * c, dtype=dtype)
        self.conv3 = nn.Conv2d(2 * c, 4 * c, 3, 2, 1, rng, dtype=dtype)
        self.bn3 = nn.BatchNorm2d(4 * c, dtype=dtype)
        self.conv4 = nn.Conv2d(4 * c, 4 * c, 3, 1, 1, rng, dtype=dtype)
        self.bn4 = nn.BatchNorm2d(4 * c, dtype=dtype)
        self.deconv1 = nn.ConvTranspose2d(8 * c, 2 * c, 4, 2, 1, rng, dtype=dtype)
        self.deconv2 = nn.ConvTranspose2d(4 * c, c, 4, 2, 1, rng, dtype=dtype)
        self.deconv3 = nn.ConvTranspose2d(2 * c, c, 4, 2, 1, rng, dtype=dtype)
        self.out_conv = nn.Conv2d(c, p, 1, 1, 0, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        s = x.shape[-1]
        if x.shape[-2] != s or s % 8 != 0:
            raise ValueError(f"U-Net needs a square input with side divisible by 8, got {x.shape[-2:]}")
        a = self.act
        e1 = nn.activation(self.bn1(self.conv1(x)), a)
        e2 = nn.activation(self.bn2(self.conv2(e1)), a)
        e3 = nn.activation(self.bn3(self.conv3(e2)), a)
        m = nn.activation(self.bn4(self.conv4(e3)), a)
        d1 = nn.activation(self.deconv1(concat([m, e3], 1)), a)
        d2 = nn.activation(self.deconv2(concat([d1, e2], 1)), a)
        d3 = nn.activation(self.deconv3(concat([d2, e1], 1)), a)
        return self.out_conv(d3)


class PointwiseStack(nn.Module):
    """Drop-in U-Net replacement: a per-pixel MLP with a matched budget."""

    def __init__(self, p: int, c: int, act: str, rng, dtype="f32"):
        super().__init__()
        h = matched_pointwise_width(p, c)
        self.mlp = nn.MLP([p, h, h, p], act, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return apply_pointwise(self.mlp, x)


class DeepONetBranch(nn.Module):
    """Input-function encoder producing one global p-vector per sample."""

    def __init__(self, cin: int, p: int, s: int, act: str, rng, dtype="f32"):
        super().__init__()
        self.s = s
        self.encoder = nn.Conv2d(cin, p, 1, 1, 0, rng, dtype=dtype)
        self.mlp = nn.MLP([p * s * s, 4 * p, p], act, rng, dtype=dtype)

    def forward(self, v: Tensor) -> Tensor:
        h = self.encoder(v)
        q = nn.adaptive_avg_pool2d(h, self.s)
        b = q.shape[0]
        return self.mlp(reshape(q, (b, q.shape[1] * self.s * self.s)))


class TNOModel(nn.Module):
    """All variants behind one forward(v, u_hist, grid) -> (B,K,H,W)."""

    def __init__(self, config: TNOConfig, init_seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(init_seed)
        p, c, dt = config.p, config.unet_base_channels, config.dtype
        cv = config.input_channels
        self.is_deeponet = config.variant in _DEEPONET_VARIANTS
        self.has_tbranch = config.variant not in _NO_TBRANCH_VARIANTS

        if self.is_deeponet:
            # the baseline's input function carries the history channels too
            self.branch = DeepONetBranch(cv + config.L, p, config.S, config.branch_activation, rng, dt)
        else:
            self.encoder_b = nn.Conv2d(cv, p, 1, 1, 0, rng, dtype=dt)
            if self.has_tbranch:
                self.encoder_tb = nn.Conv2d(config.L, p, 1, 1, 0, rng, dtype=dt)
            net_cls = PointwiseStack if config.variant == "no_unet" else UNet
            self.unet_b = net_cls(p, c, config.branch_activation, rng, dt)
            if self.has_tbranch:
                self.unet_tb = net_cls(p, c, config.tbranch_activation, rng, dt)

        self.trunk = nn.MLP([3] + list(config.trunk_hidden) + [p], config.trunk_activation, rng,
                            final_act=config.trunk_activation, dtype=dt)
        if self.is_deeponet:
            if config.variant == "deeponet_multistep":
                self.out_proj = nn.Linear(p, config.K, rng, dtype=dt)
            else:
                self.out_bias = nn.Parameter(np.zeros(1, dtype=np.float64 if dt == "f64" else np.float32))
        else:
            self.decoder = nn.MLP([p] + list(config.decoder_hidden) + [config.K],
                                  config.branch_activation, rng, dtype=dt)

    # -- pieces ----------------------------------------------------------

    def encode_branch(self, v: Tensor) -> Tensor:
        if v.shape[1] != self.config.input_channels:
            raise ValueError(f"branch expects {self.config.input_channels} channels, got {v.shape[1]}")
        return self.encoder_b(v)

    def encode_tbranch(self, u_hist: Tensor) -> Tensor:
        if u_hist.shape[1] != self.config.L:
            raise ValueError(f"temporal branch expects {self.config.L} history channels, got {u_hist.shape[1]}")
        return self.encoder_tb(u_hist)

    def spatial_net(self, latent: Tensor, which: str) -> Tensor:
        """pool to S, run the branch's spatial net, upsample back."""
        h, w = latent.shape[-2:]
        q = nn.adaptive_avg_pool2d(latent, self.config.S)
        net = self.unet_b if which == "branch" else self.unet_tb
        u = net(q)
        return nn.bilinear_upsample2d(u, h, w)

    def trunk_forward(self, grid: Tensor) -> Tensor:
        if grid.shape[1] != 3:
            raise ValueError(f"trunk expects 3 grid channels (t, x, y), got {grid.shape[1]}")
        return apply_pointwise(self.trunk, grid)

    def fuse_decode(self, latents: list[Tensor]) -> Tensor:
        z = latents[0]
        for other in latents[1:]:
            z = hadamard(z, other)
        return apply_pointwise(self.decoder, z)

    # -- full forward ----------------------------------------------------

    def forward(self, v: Tensor, u_hist: Tensor, grid: Tensor) -> Tensor:
        cfg = self.config
        if v.ndim != 4 or u_hist.ndim != 4 or grid.ndim != 4:
            raise ValueError("forward expects batched NCHW tensors")
        if u_hist.shape[1] != cfg.L:
            raise ValueError(f"expected {cfg.L} history channels, got {u_hist.shape[1]}")
        if self.is_deeponet:
            bvec = self.branch(concat([v, u_hist], 1))
            ti = self.trunk_forward(grid)
            h, w = grid.shape[-2:]
            prod = hadamard(ti, expand_spatial(bvec, h, w))
            if cfg.variant == "deeponet_multistep":
                return apply_pointwise(self.out_proj, prod)
            summed = reduce_sum(prod, axis=1, keepdims=True)
            return summed + self.out_bias
        hb = self.encode_branch(v)
        ub = self.spatial_net(hb, "branch")
        if cfg.branch_output_activation:
            ub = nn.activation(ub, cfg.branch_output_activation)
        parts = [ub]
        if self.has_tbranch:
            htb = self.encode_tbranch(u_hist)
            utb = self.spatial_net(htb, "tbranch")
            if cfg.tbranch_output_activation:
                utb = nn.activation(utb, cfg.tbranch_output_activation)
            parts.append(utb)
        parts.append(self.trunk_forward(grid))
        return self.fuse_decode(parts)


def count_parameters(model: nn.Module) -> int:
    return model.num_parameters()


# ---------------------------------------------------------------------------
# single-sample convenience wrappers

def _batched(t: Tensor) -> Tensor:
    return reshape(t, (1,) + t.shape)


def encode_branch(v: Tensor, model: TNOModel) -> Tensor:
    out = model.encode_branch(_batched(v))
    return reshape(out, out.shape[1:])


def encode_tbranch(u_hist: Tensor, model: TNOModel) -> Tensor:
    out = model.encode_tbranch(_batched(u_hist))
    return reshape(out, out.shape[1:])


def unet_forward(latent: Tensor, which: str, model: TNOModel) -> Tensor:
    if which not in ("branch", "tbranch"):
        raise ValueError(f"which must be 'branch' or 'tbranch', got {which!r}")
    out = model.spatial_net(_batched(latent), which)
    return reshape(out, out.shape[1:])


def trunk_forward(grid: Tensor, model: TNOModel) -> Tensor:
    out = model.trunk_forward(_batched(grid))
    return reshape(out, out.shape[1:])


def fuse_and_decode(ub: Tensor, utb: Tensor, ti: Tensor, model: TNOModel) -> Tensor:
    if not (ub.shape == utb.shape == ti.shape):
        raise ValueError("fused latents must share one shape")
    out = model.fuse_decode([_batched(ub), _batched(utb), _batched(ti)])
    return reshape(out, out.shape[1:])


def tno_forward(v: Tensor, u_hist: Tensor, grid: Tensor, model: TNOModel,
                t0: float = 0.0, dt: float = 1.0) -> ForecastBundle:
    out = model(_batched(v), _batched(u_hist), _batched(grid))
    values = out.data[0]
    k = values.shape[0]
    lead = [t0 + (i + 1) * dt for i in range(k)]
    return ForecastBundle(values=values, lead_times=lead, grid={"H": values.shape[1], "W": values.shape[2]})


def deeponet_forward(v: Tensor, grid: Tensor, model: TNOModel) -> Tensor:
    """Inner-product fusion baseline on an input-function stack v."""
    if not model.is_deeponet:
        raise ValueError("deeponet_forward needs a deeponet-variant model")
    bvec = model.branch(_batched(v))
    ti = model.trunk_forward(_batched(grid))
    h, w = grid.shape[-2:]
    prod = hadamard(ti, expand_spatial(bvec, h, w))
    if model.config.variant == "deeponet_multistep":
        out = apply_pointwise(model.out_proj, prod)
    else:
        out = reduce_sum(prod, axis=1, keepdims=True) + model.out_bias
    return reshape(out, out.shape[1:])
