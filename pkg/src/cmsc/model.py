"""The convolutional multi-scale context model.

Each level is a stack of ten 3x3 convolutions: two sets at full level
resolution feeding 2x2 max pools, a middle set at quarter resolution, then
two sets interleaved with 2x2 upsampling back to level resolution. Filter
counts per set default to (32, 64, 128, 64, 32); the tenth convolution has
a single output channel squashed into [0,1].

Levels run coarse to fine, each scale twice the previous. The coarsest
level sees only the input frames downsampled to its scale; every finer
level additionally receives the upsampled prediction of the level below as
an extra input channel. The model reads a square context window but only
the central patch of the finest output is treated as valid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Tuple

import numpy as np

from .tensor import (
    SeededRng,
    ShapeError,
    Tensor,
    add,
    avgpool2,
    bounded_out,
    concat_channels,
    conv2d_same,
    crop,
    crop_center,
    maxpool2,
    mse_loss,
    relu,
    upsample2,
)


@dataclass(frozen=True)
class CmscConfig:
    n_levels: int = 4
    patch: int = 32
    context: int = 96
    n_input_frames: int = 4
    filters: Tuple[int, ...] = (32, 64, 128, 64, 32)
    deep_supervision: bool = True

    def __post_init__(self):
        if len(self.filters) != 5:
            raise ValueError("five filter set widths required")
        if self.context not in (self.patch, 3 * self.patch):
            raise ValueError(
                f"context {self.context} must equal patch ({self.patch}) "
                f"or 3x patch ({3 * self.patch})"
            )
        if self.n_levels < 1:
            raise ValueError("need at least one level")
        for s in self.scales():
            if s % 4 != 0:
                raise ValueError(f"level scale {s} not divisible by 4")

    def scales(self):
        """Level resolutions, coarse to fine; the finest equals the context."""
        return [self.context >> (self.n_levels - 1 - i) for i in range(self.n_levels)]

    def to_dict(self):
        return {
            "n_levels": self.n_levels,
            "patch": self.patch,
            "context": self.context,
            "n_input_frames": self.n_input_frames,
            "filters": list(self.filters),
            "deep_supervision": self.deep_supervision,
        }

    @staticmethod
    def from_dict(d):
        return CmscConfig(
            n_levels=int(d["n_levels"]),
            patch=int(d["patch"]),
            context=int(d["context"]),
            n_input_frames=int(d["n_input_frames"]),
            filters=tuple(int(f) for f in d["filters"]),
            deep_supervision=bool(d["deep_supervision"]),
        )


@dataclass(frozen=True)
class LevelSpec:
    name: str
    scale: int
    in_channels: int
    filters: Tuple[int, ...]

    def conv_channels(self):
        """(cin, cout) for the ten convolutions of this level."""
        f = self.filters
        chain = [self.in_channels, f[0], f[0], f[1], f[1], f[2], f[2], f[3], f[3], f[4], 1]
        return list(zip(chain[:-1], chain[1:]))


def level_specs(config):
    specs = []
    for i, scale in enumerate(config.scales()):
        extra = 0 if i == 0 else 1  # upsampled coarser prediction
        specs.append(
            LevelSpec(
                name=f"level{scale}",
                scale=scale,
                in_channels=config.n_input_frames + extra,
                filters=config.filters,
            )
        )
    return specs


def build_model(config, rng, dtype=np.float32):
    """Initialize all parameters, seeded; weights ~ U(+-1/sqrt(fan_in)), biases 0."""
    params = {}
    for spec in level_specs(config):
        for i, (cin, cout) in enumerate(spec.conv_channels(), start=1):
            bound = 1.0 / np.sqrt(cin * 9)
            w = rng.uniform(-bound, bound, (cout, cin, 3, 3)).astype(dtype)
            params[f"{spec.name}.conv{i}.weight"] = Tensor(w, requires_grad=True)
            params[f"{spec.name}.conv{i}.bias"] = Tensor(
                np.zeros(cout, dtype=dtype), requires_grad=True
            )
    return params


def constant_params(config, value=None, dtype=np.float64):
    """Positive all-equal weights and zero biases (receptive-field probing).

    ``value=None`` picks 1/(9*cin) per convolution, which keeps activations
    near the input magnitude through the whole stack; a fixed value would
    saturate the final tanh and numerically zero its derivative.
    """
    params = {}
    for spec in level_specs(config):
        for i, (cin, cout) in enumerate(spec.conv_channels(), start=1):
            w = value if value is not None else 1.0 / (9 * cin)
            params[f"{spec.name}.conv{i}.weight"] = Tensor(
                np.full((cout, cin, 3, 3), w, dtype=dtype), requires_grad=True
            )
            params[f"{spec.name}.conv{i}.bias"] = Tensor(
                np.zeros(cout, dtype=dtype), requires_grad=True
            )
    return params


def zero_grads(params):
    for p in params.values():
        p.zero_grad()


def downsample_pyramid(frames, config):
    """Repeated 2x2 average pooling of context-scale frames, one stack per level.

    Returns Tensors ordered coarse to fine; the finest entry is the input
    itself. Accepts (B, n, context, context) arrays or Tensors.
    """
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float32))
    if x.data.ndim != 4:
        raise ShapeError(f"expected (B, n, H, W) frames, got shape {x.shape}")
    b, n, h, w = x.shape
    if h != w or h != config.context:
        raise ShapeError(f"frames must be square {config.context}px, got {h}x{w}")
    stacks = [x]
    for _ in range(config.n_levels - 1):
        stacks.append(avgpool2(stacks[-1]))
    return stacks[::-1]


def _level_forward(params, spec, x, probe_pool=False):
    def conv_block(h, i):
        w = params[f"{spec.name}.conv{i}.weight"]
        b = params[f"{spec.name}.conv{i}.bias"]
        return conv2d_same(h, w, b)

    def pool(h):
        if probe_pool:
            return avgpool2(h)
        out, _ = maxpool2(h)
        return out

    h = relu(conv_block(x, 1))
    h = relu(conv_block(h, 2))
    h = pool(h)
    h = relu(conv_block(h, 3))
    h = relu(conv_block(h, 4))
    h = pool(h)
    h = relu(conv_block(h, 5))
    h = relu(conv_block(h, 6))
    h = upsample2(h)
    h = relu(conv_block(h, 7))
    h = relu(conv_block(h, 8))
    h = upsample2(h)
    h = relu(conv_block(h, 9))
    return bounded_out(conv_block(h, 10))


def forward(params, config, frames, probe_pool=False):
    """Run all levels coarse to fine.

    Returns (central patch prediction (B,1,patch,patch), per-level outputs).
    """
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float32))
    if x.data.ndim != 4 or x.shape[1] != config.n_input_frames:
        raise ShapeError(
            f"expected (B, {config.n_input_frames}, {config.context}, {config.context}) "
            f"input, got {x.shape}"
        )
    stacks = downsample_pyramid(x, config)
    outputs = []
    prev = None
    for spec, stack in zip(level_specs(config), stacks):
        inp = stack if prev is None else concat_channels([stack, upsample2(prev)])
        out = _level_forward(params, spec, inp, probe_pool=probe_pool)
        outputs.append(out)
        prev = out
    return crop_center(outputs[-1], config.patch), outputs


def training_loss(level_outputs, target_context, config):
    """L2 loss against the next frame.

    With deep supervision (the default) every level is scored on the
    central patch at its own scale against the target down-averaged to
    that scale; otherwise only the finest level's central patch counts.
    """
    tgt = (
        target_context
        if isinstance(target_context, Tensor)
        else Tensor(np.asarray(target_context, dtype=np.float32))
    )
    if tgt.data.ndim != 4 or tgt.shape[2] != config.context or tgt.shape[3] != config.context:
        raise ShapeError(f"target must be (B,1,{config.context},{config.context}), got {tgt.shape}")
    if not config.deep_supervision:
        return mse_loss(crop_center(level_outputs[-1], config.patch), crop_center(tgt, config.patch))
    targets = [tgt]
    for _ in range(config.n_levels - 1):
        targets.append(avgpool2(targets[-1]))
    targets = targets[::-1]
    total = None
    for out, spec, tscaled in zip(level_outputs, level_specs(config), targets):
        side = spec.scale * config.patch // config.context
        term = mse_loss(crop_center(out, side), crop_center(tscaled, side))
        total = term if total is None else add(total, term)
    return total


class Footprint(NamedTuple):
    top: int
    left: int
    height: int
    width: int


def receptive_field_probe(config, pixel):
    """Bounding box of input pixels that influence one central-patch output pixel.

    ``pixel`` is (row, col) within the central patch. The probe model has
    strictly positive fan-in-normalized constant weights so no ReLU is dead
    and no activation saturates, and pooling is treated as full-window
    (average) aggregation so the box reflects the geometric receptive field
    rather than one max routing. Runs in float64 with gradients enabled on
    the input frames.
    """
    py, px = pixel
    if not (0 <= py < config.patch and 0 <= px < config.patch):
        raise ValueError(f"pixel {pixel} outside the {config.patch}px central patch")
    params = constant_params(config, dtype=np.float64)
    frames = Tensor(
        np.full((1, config.n_input_frames, config.context, config.context), 0.5, dtype=np.float64),
        requires_grad=True,
    )
    _, outputs = forward(params, config, frames, probe_pool=True)
    offset = (config.context - config.patch) // 2
    probe = crop(outputs[-1], offset + py, offset + px, 1, 1)
    probe.backward()
    g = np.abs(frames.grad).sum(axis=(0, 1))
    ys, xs = np.nonzero(g > 0)
    if ys.size == 0:
        raise RuntimeError("probe produced an empty footprint")
    return Footprint(
        top=int(ys.min()),
        left=int(xs.min()),
        height=int(ys.max() - ys.min() + 1),
        width=int(xs.max() - xs.min() + 1),
    )
