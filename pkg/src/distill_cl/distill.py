"""Distribution-matching dataset distillation.

A small synthetic set (IPC images per class) is optimized so that, under
freshly re-initialized feature extractors, its per-class mean embedding
matches that of the real data:

    loss = sum_c || mean_c psi(real) - mean_c psi(synthetic) ||_2

Each outer step draws a new seeded model, samples a real batch per class,
optionally applies one shared augmentation draw to both sides, and takes one
plain gradient-descent step on the synthetic pixels only (clamped to [0, 1]).
The real data is never modified.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .augment import DSA_OPS, dsa_apply_tensor, sample_draw
from .data import BYTES_PER_VALUE, LabeledSet
from .errors import NumericError, ValidationError
from .flops import count_flops
from .models import ConvNet, ModelSpec, build_model
from .seeding import derive_seed


@dataclass(frozen=True)
class DistillConfig:
    distill_spec: ModelSpec
    ipc: int = 10
    outer_steps: int = 1000
    synth_lr: float = 1.0
    real_batch_per_class: int = 256
    init_mode: str = "real_sample"  # real_sample | noise
    dsa_enabled: bool = True
    dsa_ops: tuple = DSA_OPS
    seed: int = 0
    lr_end_factor: float = 0.1  # cosine decay target as a fraction of synth_lr

    def __post_init__(self):
        if self.ipc < 1:
            raise ValidationError(f"ipc must be >= 1, got {self.ipc}")
        if self.outer_steps < 1:
            raise ValidationError(f"outer_steps must be >= 1, got {self.outer_steps}")
        if self.synth_lr < 0:
            raise ValidationError(f"synth_lr must be >= 0, got {self.synth_lr}")
        if self.real_batch_per_class < 1:
            raise ValidationError("real_batch_per_class must be >= 1")
        if self.init_mode not in ("real_sample", "noise"):
            raise ValidationError(f"init_mode must be real_sample or noise, got {self.init_mode!r}")


class DistilledBuffer:
    """Append-only store of per-step synthetic slices; the only retained memory.

    Byte size is exact: image_count * C*H*W * 4 (float32), which backs the
    memory-fraction claims.
    """

    def __init__(self, image_shape, class_count):
        self.image_shape = tuple(image_shape)
        self.class_count = int(class_count)
        self.entries = []  # (step_id, class_id, images (n, C, H, W))

    @property
    def image_count(self):
        return sum(len(images) for _, _, images in self.entries)

    @property
    def byte_size(self):
        c, h, w = self.image_shape
        return self.image_count * c * h * w * BYTES_PER_VALUE

    @property
    def step_ids(self):
        return sorted({step_id for step_id, _, _ in self.entries})

    def append_step(self, step_id, synthetic: LabeledSet):
        if step_id in self.step_ids:
            raise ValidationError(f"step_id {step_id} already recorded in buffer")
        if synthetic.image_shape != self.image_shape:
            raise ValidationError(
                f"synthetic image shape {synthetic.image_shape} != buffer {self.image_shape}"
            )
        if synthetic.class_count != self.class_count:
            raise ValidationError("synthetic class_count does not match buffer")
        for c in synthetic.classes_present():
            idx = synthetic.indices_of(c)
            self.entries.append((int(step_id), int(c), synthetic.images[idx].copy()))
        return self

    def merged_set(self) -> LabeledSet:
        if not self.entries:
            raise ValidationError("buffer is empty")
        images = np.concatenate([imgs for _, _, imgs in self.entries], axis=0)
        labels = np.concatenate(
            [np.full(len(imgs), c, dtype=np.int64) for _, c, imgs in self.entries]
        )
        return LabeledSet(images, labels, self.class_count)


def append_step(buffer: DistilledBuffer, step_id, synthetic: LabeledSet) -> DistilledBuffer:
    return buffer.append_step(step_id, synthetic)


def init_synthetic(real: LabeledSet, cfg: DistillConfig, diagnostics=None) -> LabeledSet:
    """IPC synthetic images per class present in `real`.

    real_sample mode copies seeded random real images (falling back to
    sampling with replacement for undersized classes, flagged in
    `diagnostics`); noise mode draws uniform [0, 1) pixels.
    """
    rng = np.random.default_rng(derive_seed(cfg.seed, "init"))
    classes = real.classes_present()
    shape = real.image_shape
    images, labels = [], []
    for c in classes:
        if cfg.init_mode == "noise":
            images.append(rng.uniform(0.0, 1.0, size=(cfg.ipc,) + shape).astype(np.float32))
        else:
            idx = real.indices_of(c)
            if len(idx) >= cfg.ipc:
                chosen = rng.choice(idx, size=cfg.ipc, replace=False)
            else:
                chosen = rng.choice(idx, size=cfg.ipc, replace=True)
                if diagnostics is not None:
                    diagnostics.setdefault("replacement_classes", []).append(int(c))
            images.append(real.images[chosen].copy())
        labels.append(np.full(cfg.ipc, c, dtype=np.int64))
    return LabeledSet(np.concatenate(images), np.concatenate(labels), real.class_count)


# Smoothing constant for the per-class norm: the distance is computed as
# sq / (sqrt(sq + eps^2) + eps), which equals the Euclidean norm to within
# eps, is exactly zero when the means coincide, and keeps the gradient from
# blowing up to unit magnitude on ulp-level mismatches.
_NORM_EPS = 1e-4


def _per_class_terms(model, real_x, real_y, syn_x, syn_y, draw):
    """Per-class distance terms between mean embeddings; skips classes with no
    real samples. Returns (terms dict class -> tensor, skipped class list).

    Real and synthetic go through one concatenated forward pass so identical
    inputs produce identical features regardless of batch composition."""
    x = torch.cat([real_x, syn_x.to(real_x.dtype)], dim=0)
    if draw is not None:
        x = dsa_apply_tensor(x, draw)
    feats = model.features(x)
    feat_real, feat_syn = feats[: len(real_x)], feats[len(real_x):]
    eps = torch.as_tensor(_NORM_EPS, dtype=feats.dtype)
    terms, skipped = {}, []
    for c in sorted(set(syn_y.tolist())):
        real_mask = real_y == c
        if not bool(real_mask.any()):
            skipped.append(int(c))
            continue
        mu_real = feat_real[real_mask].mean(dim=0)
        mu_syn = feat_syn[syn_y == c].mean(dim=0)
        sq = ((mu_real - mu_syn) ** 2).sum()
        terms[int(c)] = sq / (torch.sqrt(sq + eps * eps) + eps)
    return terms, skipped


def dm_loss(model: ConvNet, real: LabeledSet, synthetic: LabeledSet, draw=None, diagnostics=None):
    """Distribution-matching loss between real and synthetic sets under `model`."""
    if real.class_count != synthetic.class_count:
        raise ValidationError("real and synthetic must share a class vocabulary")
    real_x = torch.from_numpy(np.ascontiguousarray(real.images)).to(model.dtype)
    syn_x = torch.from_numpy(np.ascontiguousarray(synthetic.images)).to(model.dtype)
    with torch.no_grad():
        terms, skipped = _per_class_terms(
            model, real_x, torch.from_numpy(real.labels), syn_x, synthetic.labels, draw
        )
    if diagnostics is not None and skipped:
        diagnostics.setdefault("skipped_classes", []).extend(skipped)
    if not terms:
        return 0.0
    return float(sum(terms.values()))


def dm_loss_grads(model: ConvNet, real: LabeledSet, synthetic: LabeledSet, draw=None):
    """dm_loss value plus its gradients w.r.t. synthetic pixels and model
    parameters (the pixel gradient is what the distillation update applies)."""
    real_x = torch.from_numpy(np.ascontiguousarray(real.images)).to(model.dtype)
    syn_x = torch.from_numpy(np.ascontiguousarray(synthetic.images)).to(model.dtype)
    syn_x.requires_grad_(True)
    terms, _ = _per_class_terms(
        model, real_x, torch.from_numpy(real.labels), syn_x, synthetic.labels, draw
    )
    if not terms:
        return 0.0, np.zeros_like(synthetic.images), {
            n: np.zeros(p.shape, dtype=synthetic.images.dtype)
            for n, p in model.named_parameters()
        }
    loss = sum(terms.values())
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, (syn_x,) + params, allow_unused=True)
    param_grads = {
        n: (g.detach().numpy().copy() if g is not None else np.zeros(p.shape))
        for n, p, g in zip(names, params, grads[1:])
    }
    return float(loss.detach()), grads[0].detach().numpy().copy(), param_grads


def _sample_real_batch(real: LabeledSet, cfg: DistillConfig, step_index):
    rng = np.random.default_rng(derive_seed(cfg.seed, "batch", step_index))
    picks = []
    for c in real.classes_present():
        idx = real.indices_of(c)
        n = min(cfg.real_batch_per_class, len(idx))
        picks.append(rng.choice(idx, size=n, replace=False))
    return real.subset(np.concatenate(picks))


def _synth_lr_at(cfg, k):
    if cfg.outer_steps == 1:
        return cfg.synth_lr
    lo = cfg.lr_end_factor * cfg.synth_lr
    cos = 0.5 * (1.0 + math.cos(math.pi * k / (cfg.outer_steps - 1)))
    return lo + (cfg.synth_lr - lo) * cos


def distill(real: LabeledSet, cfg: DistillConfig, diagnostics=None) -> LabeledSet:
    """Compress `real` into IPC synthetic images per present class.

    Each of the K outer steps re-initializes a fresh distillation model
    (seeded from cfg.seed and the step index) and descends the synthetic
    pixels once; pixels are clamped to [0, 1] after each update. Fills
    `diagnostics` (if given) with loss history, skip/fallback flags and the
    exact FLOPs charge.
    """
    if cfg.distill_spec.input_shape != real.image_shape:
        raise ValidationError(
            f"distill_spec input shape {cfg.distill_spec.input_shape} != data {real.image_shape}"
        )
    diag = diagnostics if diagnostics is not None else {}
    synth = init_synthetic(real, cfg, diag)
    syn_y = synth.labels
    syn_x = torch.from_numpy(synth.images.copy())
    syn_x.requires_grad_(True)

    fc = count_flops(cfg.distill_spec)
    flops = 0
    losses = []
    skipped_total = 0
    for k in range(cfg.outer_steps):
        model = build_model(cfg.distill_spec, seed=derive_seed(cfg.seed, "model", k))
        real_batch = _sample_real_batch(real, cfg, k)
        draw = None
        if cfg.dsa_enabled:
            draw_rng = np.random.default_rng(derive_seed(cfg.seed, "draw", k))
            draw = sample_draw(draw_rng, real.image_shape, cfg.dsa_ops)
        real_x = torch.from_numpy(np.ascontiguousarray(real_batch.images))
        terms, skipped = _per_class_terms(
            model, real_x, torch.from_numpy(real_batch.labels), syn_x, syn_y, draw
        )
        skipped_total += len(skipped)
        if not terms:
            losses.append(0.0)
            continue
        loss = sum(terms.values())
        if not torch.isfinite(loss):
            bad = [c for c, t in terms.items() if not torch.isfinite(t)]
            raise NumericError(
                f"non-finite distillation loss at outer step {k} (class {bad[0]})"
            )
        (grad,) = torch.autograd.grad(loss, syn_x)
        with torch.no_grad():
            syn_x -= _synth_lr_at(cfg, k) * grad
            syn_x.clamp_(0.0, 1.0)
        losses.append(float(loss.detach()))
        # charge: forward+backward of the distillation net over the matching batch
        flops += (len(real_batch) + len(syn_y)) * fc.train_step_per_sample

    diag["loss_history"] = losses
    diag["skipped_class_terms"] = skipped_total
    diag["flops"] = flops
    return LabeledSet(syn_x.detach().numpy(), syn_y.copy(), real.class_count)


def distill_flops_estimate(real_class_sizes, cfg: DistillConfig):
    """Analytic FLOPs charge for `distill` given per-class sample counts."""
    fc = count_flops(cfg.distill_spec)
    batch = sum(min(cfg.real_batch_per_class, n) for n in real_class_sizes)
    synth = cfg.ipc * len(real_class_sizes)
    return cfg.outer_steps * (batch + synth) * fc.train_step_per_sample
