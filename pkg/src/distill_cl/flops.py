"""Analytic FLOPs accounting for ModelSpec.

Conventions (one consistent cost model; the paper only reports relative
FLOPs, so the fractions are convention-independent):

- One multiply-accumulate = 2 FLOPs. Conv (3x3, pad 1, stride 1):
  2*9*C_in*C_out*H*W. Linear: 2*F*classes (bias folded into the accumulator).
- Group norm over groups of E = (C/G)*H*W elements: per group,
  mean (E adds + 1 div) + variance (3E + 1) + inv-std (3) + normalize/affine
  (4E), i.e. 8E + 5 per group (8S + 5 per channel in the per-channel default).
- ReLU: 1 FLOP per element. 2x2 average pool: 3 adds + 1 div = 4 FLOPs per
  output element (ceil padding keeps windows full).
- Backward: 2x the forward MAC cost (grad-input plus grad-weight passes) plus
  1x the forward elementwise cost.
- Optimizer update: 2 FLOPs per parameter per update step (charged by the
  trainer per step, not per sample).
"""

from dataclasses import dataclass

from .errors import ValidationError
from .models import ModelSpec


@dataclass(frozen=True)
class FlopsCount:
    """Per-sample FLOPs of one spec; unit: MAC pairs counted as 2 FLOPs."""

    forward_per_sample: int
    train_step_per_sample: int
    mac_forward: int        # conv + linear contribution to forward
    elementwise_forward: int  # norm + relu + pool contribution to forward
    param_count: int

    def __post_init__(self):
        if self.forward_per_sample <= 0:
            raise ValidationError("forward_per_sample must be positive")
        if self.train_step_per_sample < 2 * self.forward_per_sample:
            raise ValidationError("train_step_per_sample must be >= 2x forward")

    @property
    def update_flops_per_step(self):
        return 2 * self.param_count


def count_flops(spec: ModelSpec) -> FlopsCount:
    """Closed-form per-sample counts for `spec` under the module cost model."""
    c_in, h, w = spec.input_shape
    mac = 0
    elem = 0
    params = 0
    for width in spec.block_widths:
        s = h * w  # conv output spatial == input spatial (pad 1, stride 1)
        mac += 2 * 9 * c_in * width * s
        params += 9 * c_in * width
        elem += 8 * width * s + 5 * spec.groups_for(width)  # group norm
        params += 2 * width
        elem += width * s  # relu
        h = (h + 1) // 2
        w = (w + 1) // 2
        elem += 4 * width * h * w  # 2x2 average pool
        c_in = width
    flat = spec.flatten_dim
    mac += 2 * flat * spec.class_count
    params += flat * spec.class_count + spec.class_count
    forward = mac + elem
    return FlopsCount(
        forward_per_sample=forward,
        train_step_per_sample=forward + 2 * mac + elem,
        mac_forward=mac,
        elementwise_forward=elem,
        param_count=params,
    )


def train_flops(spec: ModelSpec, samples_per_step, param_updates=None):
    """Total FLOPs for a training run given per-update-step sample counts.

    `samples_per_step` is an iterable of batch sizes (one per optimizer step);
    each step also pays 2 FLOPs per parameter for the update.
    """
    fc = count_flops(spec)
    sizes = list(samples_per_step)
    n_updates = len(sizes) if param_updates is None else param_updates
    return sum(sizes) * fc.train_step_per_sample + n_updates * fc.update_flops_per_step
