"""The ConvNetD model family.

Each block is conv3x3 (pad 1, no bias) -> group norm -> ReLU -> 2x2 average
pool with stride 2; odd spatial dims are replicate-padded on the right/bottom
before pooling (ceil semantics), so every paper input shape survives four
blocks. After the blocks: flatten -> single linear classifier with bias.

Construction is fully seeded: identical (spec, seed) gives bit-identical
parameters. Conv and linear weights use fan-in-scaled uniform init
U(-sqrt(6/fan_in), +sqrt(6/fan_in)); norm scale 1, shift 0; linear bias 0.

`backward` also returns gradients with respect to the input pixels, which the
distillation update needs. A float64 mode exists for gradient-check tests.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import LabeledSet
from .errors import NumericError, ValidationError
from .validation import check_image_batch

PER_CHANNEL = "per-channel"

# Uniform per-block widths for the paper's ladder: ConvNetD2/D3/D4.
DEFAULT_WIDTHS = {2: 8, 3: 64, 4: 128}


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor: D blocks with given output widths."""

    depth: int
    block_widths: tuple
    input_shape: tuple  # (C, H, W)
    class_count: int
    norm_groups: object = PER_CHANNEL  # positive int or "per-channel"

    def __post_init__(self):
        object.__setattr__(self, "block_widths", tuple(int(w) for w in self.block_widths))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.depth < 1:
            raise ValidationError(f"depth must be >= 1, got {self.depth}")
        if len(self.block_widths) != self.depth:
            raise ValidationError(
                f"block_widths has {len(self.block_widths)} entries for depth {self.depth}"
            )
        if any(w < 1 for w in self.block_widths):
            raise ValidationError(f"block widths must be positive, got {self.block_widths}")
        if len(self.input_shape) != 3:
            raise ValidationError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.class_count < 1:
            raise ValidationError(f"class_count must be >= 1, got {self.class_count}")
        if self.norm_groups != PER_CHANNEL:
            if not isinstance(self.norm_groups, int) or self.norm_groups < 1:
                raise ValidationError(f"norm_groups must be a positive int or {PER_CHANNEL!r}")
            for w in self.block_widths:
                if w % self.norm_groups != 0:
                    raise ValidationError(
                        f"norm_groups {self.norm_groups} does not divide width {w}"
                    )
        c, h, w = self.input_shape
        if c < 1 or h < 1 or w < 1:
            trace = " -> ".join(f"{hh}x{ww}" for hh, ww in [(h, w)])
            raise ValidationError(
                f"input shape collapses below 1x1: shape path {trace}"
            )

    def groups_for(self, width):
        return width if self.norm_groups == PER_CHANNEL else self.norm_groups

    def spatial_trace(self):
        """(H, W) after each block's pool, ceil semantics."""
        _, h, w = self.input_shape
        trace = []
        for _ in range(self.depth):
            h = (h + 1) // 2
            w = (w + 1) // 2
            trace.append((h, w))
        return trace

    @property
    def flatten_dim(self):
        h, w = self.spatial_trace()[-1]
        return self.block_widths[-1] * h * w

    @property
    def name(self):
        return f"ConvNetD{self.depth}"

    def to_dict(self):
        return {
            "depth": self.depth,
            "block_widths": list(self.block_widths),
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "norm_groups": self.norm_groups,
        }

    @staticmethod
    def from_dict(d):
        return ModelSpec(
            depth=int(d["depth"]),
            block_widths=tuple(d["block_widths"]),
            input_shape=tuple(d["input_shape"]),
            class_count=int(d["class_count"]),
            norm_groups=d.get("norm_groups", PER_CHANNEL),
        )


def convnet_spec(depth, input_shape, class_count, width=None, norm_groups=PER_CHANNEL):
    """ConvNetD{depth} spec with uniform block width (paper defaults 8/64/128)."""
    if width is None:
        if depth not in DEFAULT_WIDTHS:
            raise ValidationError(f"no default width for depth {depth}; pass width=")
        width = DEFAULT_WIDTHS[depth]
    return ModelSpec(depth, (width,) * depth, tuple(input_shape), class_count, norm_groups)


def convnet_ladder(input_shape, class_count, widths=None, norm_groups=PER_CHANNEL):
    """The D2 -> D3 -> D4 capacity ladder. `widths` overrides the per-depth
    uniform widths, e.g. {2: 4, 3: 8, 4: 16} for desk-scale runs."""
    widths = dict(DEFAULT_WIDTHS if widths is None else widths)
    return tuple(
        convnet_spec(d, input_shape, class_count, width=widths[d], norm_groups=norm_groups)
        for d in (2, 3, 4)
    )


def _ceil_pool(x):
    h, w = x.shape[-2:]
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return F.avg_pool2d(x, kernel_size=2, stride=2)


class GroupNorm(nn.Module):
    """Group normalization (biased variance, eps inside the sqrt, affine).

    Implemented directly rather than via nn.GroupNorm, whose functional guard
    rejects the batch=1, single-channel case this package legitimately hits
    (the statistics are per-sample, so batch size is irrelevant)."""

    eps = 1e-5

    def __init__(self, groups, channels):
        super().__init__()
        self.groups = groups
        self.channels = channels
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        n, c, h, w = x.shape
        g = x.reshape(n, self.groups, -1)
        mean = g.mean(dim=2, keepdim=True)
        var = g.var(dim=2, unbiased=False, keepdim=True)
        g = (g - mean) / torch.sqrt(var + self.eps)
        shape = (1, c, 1, 1)
        return g.reshape(n, c, h, w) * self.weight.view(shape) + self.bias.view(shape)


class ConvNet(nn.Module):
    """ConvNetD instance; carries its spec and init seed."""

    def __init__(self, spec: ModelSpec, seed: int, dtype=torch.float32):
        super().__init__()
        self.spec = spec
        self.seed = int(seed)
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        c_in = spec.input_shape[0]
        for w in spec.block_widths:
            self.convs.append(nn.Conv2d(c_in, w, kernel_size=3, padding=1, bias=False))
            self.norms.append(GroupNorm(spec.groups_for(w), w))
            c_in = w
        self.classifier = nn.Linear(spec.flatten_dim, spec.class_count, bias=True)
        self.to(dtype)
        self._init_parameters()

    def _init_parameters(self):
        g = torch.Generator().manual_seed(self.seed & 0x7FFF_FFFF_FFFF_FFFF)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * 9
                bound = math.sqrt(6.0 / fan_in)
                conv.weight.uniform_(-bound, bound, generator=g)
            for norm in self.norms:
                norm.weight.fill_(1.0)
                norm.bias.fill_(0.0)
            bound = math.sqrt(6.0 / self.classifier.in_features)
            self.classifier.weight.uniform_(-bound, bound, generator=g)
            self.classifier.bias.fill_(0.0)

    def features(self, x):
        for conv, norm in zip(self.convs, self.norms):
            x = _ceil_pool(F.relu(norm(conv(x))))
        return torch.flatten(x, 1)

    def forward(self, x):
        return self.classifier(self.features(x))

    @property
    def dtype(self):
        return self.classifier.weight.dtype

    def param_count(self):
        return sum(p.numel() for p in self.parameters())


def build_model(spec: ModelSpec, seed: int, dtype=torch.float32) -> ConvNet:
    """Initialize a ConvNet; (spec, seed) fully determines the parameters."""
    return ConvNet(spec, seed, dtype=dtype)


def _batch_tensor(model, batch, requires_grad=False):
    images = batch.images if isinstance(batch, LabeledSet) else batch
    images = check_image_batch(images, model.spec.input_shape, name="batch")
    x = torch.from_numpy(np.ascontiguousarray(images)).to(model.dtype)
    if requires_grad:
        x.requires_grad_(True)
    return x


def forward(model: ConvNet, batch) -> np.ndarray:
    """Logits (batch, class_count) for a LabeledSet or raw image array."""
    with torch.no_grad():
        return model(_batch_tensor(model, batch)).numpy()


def embed(model: ConvNet, batch) -> np.ndarray:
    """Flattened features after the final block (the classifier input)."""
    with torch.no_grad():
        return model.features(_batch_tensor(model, batch)).numpy()


def cross_entropy_loss(model: ConvNet, batch: LabeledSet, reduction="mean"):
    """Per-spec training cost: softmax cross entropy over the batch."""
    x = _batch_tensor(model, batch)
    y = torch.from_numpy(batch.labels)
    with torch.no_grad():
        return float(F.cross_entropy(model(x), y, reduction=reduction))


def backward(model: ConvNet, batch: LabeledSet, loss="cross_entropy", reduction="mean"):
    """Gradients of the loss for every parameter tensor and for the inputs.

    `loss` is "cross_entropy" or a callable (logits, labels) -> scalar tensor.
    Returns (param_grads: dict name -> array, input_grads: array like images).
    """
    x = _batch_tensor(model, batch, requires_grad=True)
    y = torch.from_numpy(batch.labels)
    logits = model(x)
    if loss == "cross_entropy":
        per_sample = F.cross_entropy(logits, y, reduction="none")
        if not torch.isfinite(per_sample).all():
            bad = int(torch.nonzero(~torch.isfinite(per_sample))[0])
            raise NumericError(f"non-finite loss at batch index {bad}")
        value = per_sample.mean() if reduction == "mean" else per_sample.sum()
    elif callable(loss):
        value = loss(logits, y)
        if not torch.isfinite(value):
            raise NumericError("non-finite custom loss")
    else:
        raise ValidationError(f"loss must be 'cross_entropy' or a callable, got {loss!r}")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(value, (x,) + params)
    param_grads = {n: g.detach().numpy().copy() for n, g in zip(names, grads[1:])}
    return param_grads, grads[0].detach().numpy().copy()
