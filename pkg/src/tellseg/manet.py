"""Attention segmentation network: conv encoder, PAB + MFAB decoder, 1x1 head.

The encoder is a stack of strided conv/batchnorm/swish stages ending in a
low-resolution bottleneck (reference: 16x16 over 384 channels for 512-px
inputs). The decoder applies position-wise self-attention (PAB) at the
bottleneck, then fuses skip features level by level with channel-gated MFAB
blocks, and the head maps the finest decoder feature to a one-channel
probability map at input resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, ShapeError
from .geoingest import stream


@dataclass(frozen=True)
class ManetConfig:
    in_channels: int = 3
    input_resolution: int = 64
    encoder_widths: tuple = (16, 32, 64, 96)
    downsample_factors: tuple = (2, 2, 2, 2)
    pab_reduction: int = 8
    mfab_reduction: int = 4
    head_channels: int = 1
    mfab_count: int = -1  # -1 -> pyramid levels minus one

    def __post_init__(self):
        if len(self.encoder_widths) != len(self.downsample_factors):
            raise ConfigError("manet: encoder_widths and downsample_factors must align")
        if len(self.encoder_widths) < 2:
            raise ConfigError("manet: need at least two encoder stages")
        if any(w < 1 for w in self.encoder_widths):
            raise ConfigError("manet: all widths must be >= 1")
        n = self.input_resolution
        for f in self.downsample_factors:
            if f < 1 or n % f:
                raise ConfigError(
                    f"manet: resolution {self.input_resolution} not divisible by factors {self.downsample_factors}"
                )
            n //= f
        if n < 1:
            raise ConfigError("manet: bottleneck resolution collapsed to zero")
        expected = len(self.encoder_widths) - 1
        count = expected if self.mfab_count == -1 else self.mfab_count
        if count != expected:
            raise ConfigError(f"manet: mfab_count {count} != pyramid levels - 1 ({expected})")
        object.__setattr__(self, "mfab_count", count)

    @property
    def bottleneck_channels(self) -> int:
        return self.encoder_widths[-1]

    @property
    def bottleneck_resolution(self) -> int:
        n = self.input_resolution
        for f in self.downsample_factors:
            n //= f
        return n


def reference_config() -> ManetConfig:
    """512-px inputs funneled to a 16x16 bottleneck over 384 channels."""
    return ManetConfig(
        input_resolution=512,
        encoder_widths=(24, 48, 96, 192, 384),
        downsample_factors=(2, 2, 2, 2, 2),
    )


def desk_config() -> ManetConfig:
    """64-px desk-scale variant: four x2 stages down to a 4x4 bottleneck."""
    return ManetConfig()


_CONFIG_KEYS = (
    "in_channels",
    "input_resolution",
    "encoder_widths",
    "downsample_factors",
    "pab_reduction",
    "mfab_reduction",
    "head_channels",
    "mfab_count",
)


def config_to_text(config: ManetConfig) -> str:
    lines = []
    for key in _CONFIG_KEYS:
        val = getattr(config, key)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ManetConfig:
    kwargs = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"manet config: bad line {line!r}")
        key, val = line.split("=", 1)
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"manet config: unknown key {key!r}")
        if key in ("encoder_widths", "downsample_factors"):
            kwargs[key] = tuple(int(v) for v in val.split(","))
        else:
            kwargs[key] = int(val)
    return ManetConfig(**kwargs)


# ---------------------------------------------------------------------------
# layers


class Conv2d(tc.Block):
    def __init__(self, rng, in_ch, out_ch, kernel, stride=1, padding=0, bias=True):
        fan_in = in_ch * kernel * kernel
        bound = math.sqrt(6.0 / fan_in)
        self.weight = tc.parameter(rng.uniform(-bound, bound, size=(out_ch, in_ch, kernel, kernel)))
        self.bias = tc.parameter(np.zeros(out_ch)) if bias else None
        self.stride = stride
        self.padding = padding

    def params(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def __call__(self, x):
        out = tc.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is None:
            return out
        return tc.add(out, tc.reshape(self.bias, (1, self.bias.shape[0], 1, 1)))


class BatchNorm2d(tc.Block):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = tc.parameter(np.ones(channels))
        self.beta = tc.parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x, training):
        return tc.batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=training,
            momentum=self.momentum,
            eps=self.eps,
        )


class ConvBnSwish(tc.Block):
    def __init__(self, rng, in_ch, out_ch, kernel=3, stride=1, padding=1):
        # bias would be cancelled by the batchnorm mean subtraction
        self.conv = Conv2d(rng, in_ch, out_ch, kernel, stride=stride, padding=padding, bias=False)
        self.bn = BatchNorm2d(out_ch)

    def children(self):
        return {"conv": self.conv, "bn": self.bn}

    def __call__(self, x, training):
        return tc.swish(self.bn(self.conv(x), training))


class PAB(tc.Block):
    """Position-wise attention over the bottleneck; residual gate starts at 0."""

    def __init__(self, rng, channels, reduction):
        reduced = max(channels // reduction, 1)
        self.query = Conv2d(rng, channels, reduced, 1)
        self.key = Conv2d(rng, channels, reduced, 1)
        self.value = Conv2d(rng, channels, channels, 1)
        self.gate = tc.parameter(np.array(0.0))
        self.reduced = reduced

    def children(self):
        return {"query": self.query, "key": self.key, "value": self.value}

    def params(self):
        return {"gate": self.gate}

    def __call__(self, feat):
        b, c, h, w = feat.shape
        hw = h * w
        q = tc.reshape(self.query(feat), (b, self.reduced, hw))
        k = tc.reshape(self.key(feat), (b, self.reduced, hw))
        v = tc.reshape(self.value(feat), (b, c, hw))
        scores = tc.matmul(tc.transpose(q, (0, 2, 1)), k) * (1.0 / math.sqrt(self.reduced))
        attn = tc.softmax(scores, axis=-1)  # rows: one distribution per query position
        mixed = tc.matmul(v, tc.transpose(attn, (0, 2, 1)))
        out = tc.add(tc.mul(tc.reshape(mixed, (b, c, h, w)), self.gate), feat)
        return out, attn


class MFAB(tc.Block):
    """Fuse an upsampled decoder feature with a skip, then gate channels."""

    def __init__(self, rng, decoder_ch, skip_ch, out_ch, reduction):
        self.fuse = ConvBnSwish(rng, decoder_ch + skip_ch, out_ch)
        hidden = max(out_ch // reduction, 1)
        self.gate_fc1 = Conv2d(rng, out_ch, hidden, 1)
        self.gate_fc2 = Conv2d(rng, hidden, out_ch, 1)

    def children(self):
        return {"fuse": self.fuse, "gate_fc1": self.gate_fc1, "gate_fc2": self.gate_fc2}

    def __call__(self, decoder_feat, skip_feat, training):
        dh, dw = decoder_feat.shape[2], decoder_feat.shape[3]
        sh, sw = skip_feat.shape[2], skip_feat.shape[3]
        if sh % dh or sw % dw or sh // dh != sw // dw or sh == dh:
            raise ShapeError(
                f"mfab: skip dims {sh}x{sw} must be an integer multiple of decoder dims {dh}x{dw}"
            )
        up = tc.bilinear_upsample(decoder_feat, sh, sw)
        fused = self.fuse(tc.concat([up, skip_feat], axis=1), training)
        gates = tc.sigmoid(self.gate_fc2(tc.swish(self.gate_fc1(tc.global_avg_pool(fused)))))
        return tc.mul(fused, gates)


class Manet(tc.Block):
    def __init__(self, config: ManetConfig, seed: int = 0):
        self.config = config
        rng = stream(seed, "manet-init")
        self.stages = []
        in_ch = config.in_channels
        for width, factor in zip(config.encoder_widths, config.downsample_factors):
            self.stages.append(ConvBnSwish(rng, in_ch, width, stride=factor))
            in_ch = width
        self.pab = PAB(rng, config.bottleneck_channels, config.pab_reduction)
        self.mfabs = []
        widths = config.encoder_widths
        for level in range(len(widths) - 2, -1, -1):
            self.mfabs.append(MFAB(rng, widths[level + 1], widths[level], widths[level], config.mfab_reduction))
        self.head = Conv2d(rng, widths[0], config.head_channels, 1)
        self.train_mode = False

    def children(self):
        out = {f"encoder.stage{i + 1}": s for i, s in enumerate(self.stages)}
        out["pab"] = self.pab
        for i, m in enumerate(self.mfabs):
            out[f"mfab{i + 1}"] = m
        out["head"] = self.head
        return out

    # --- forward pieces ----------------------------------------------------

    def _check_input(self, x):
        n = self.config.input_resolution
        if x.shape[-3:] != (self.config.in_channels, n, n):
            raise ShapeError(
                f"manet: expected input (..,{self.config.in_channels},{n},{n}), got {x.shape}"
            )

    def encode(self, image):
        """Run the encoder: list of per-stage features, finest to coarsest."""
        x = tc.as_tensor(image)
        if x.data.ndim == 3:
            x = tc.reshape(x, (1,) + x.shape)
        self._check_input(x)
        pyramid = []
        for stage in self.stages:
            x = stage(x, self.train_mode)
            pyramid.append(x)
        return pyramid

    def decode(self, pyramid):
        """PAB at the bottleneck, then one MFAB per remaining pyramid level."""
        if len(pyramid) != len(self.mfabs) + 1:
            raise ConfigError(
                f"manet: pyramid has {len(pyramid)} levels but decoder expects {len(self.mfabs) + 1}"
            )
        feat, _ = self.pab(pyramid[-1])
        for i, mfab in enumerate(self.mfabs):
            feat = mfab(feat, pyramid[len(pyramid) - 2 - i], self.train_mode)
        return feat

    def forward(self, batch) -> tc.Tensor:
        """(B,3,n,n) -> (B,n,n) probability maps, as a graph tensor."""
        x = tc.as_tensor(batch)
        if x.data.ndim == 3:
            x = tc.reshape(x, (1,) + x.shape)
        pyramid = self.encode(x)
        feat = self.decode(pyramid)
        logits = self.head(feat)
        n = self.config.input_resolution
        up = tc.bilinear_upsample(logits, n, n)
        probs = tc.sigmoid(up)
        return tc.reshape(probs, (probs.shape[0], n, n))

    def segment(self, image: np.ndarray) -> np.ndarray:
        """Single image (3,n,n) -> probability grid (n,n) in (0,1)."""
        return self.forward(image[None] if image.ndim == 3 else image).data[0]


def build_model(config: ManetConfig, seed: int = 0) -> Manet:
    return Manet(config, seed=seed)
