"""The incremental training cycle and its comparison regimes.

Per step: distill the arriving subset, train a fresh model on the accumulated
synthetic buffer, validate on the union of all test sets so far, grow the
architecture along the ladder if accuracy falls below standard (retraining at
the larger size before recording), then move to the next step. Regimes:

- adaptive: the cycle above, starting at the smallest ladder spec.
- fixed_largest: same buffers, always the largest spec.
- cumulative_baseline: the upper bound; retrains the largest spec on all real
  data seen so far.
- naive_forgetting: one warm-started largest-spec model trained on the current
  real subset only.

Every FLOP charged is derived from the analytic per-sample counts, so the
run-level totals are exactly reproducible from the configuration.
"""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledSet
from .distill import DistillConfig, DistilledBuffer, distill
from .errors import DistillCLError, NumericError, ValidationError
from .flops import count_flops
from .models import ConvNet, ModelSpec, build_model
from .scenarios import Scenario, scenario_manifest
from .seeding import derive_seed

REGIMES = ("adaptive", "fixed_largest", "cumulative_baseline", "naive_forgetting")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"  # adam | sgd_momentum
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 256
    epochs: int = 300
    lr_schedule: str = "constant"  # constant | cosine

    def __post_init__(self):
        if self.kind not in ("adam", "sgd_momentum"):
            raise ValidationError(f"optimizer kind must be adam or sgd_momentum, got {self.kind!r}")
        if self.lr <= 0 and self.lr != 0.0:
            raise ValidationError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValidationError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")


@dataclass(frozen=True)
class GrowthPolicy:
    """Capacity ladder plus the accuracy standard that triggers promotion.

    a_standard None selects the relative rule: grow when the step accuracy
    falls below relative_factor x the best accuracy achieved so far.
    """

    ladder: tuple
    a_standard: float = None
    relative_factor: float = 0.95
    max_growths_per_step: int = 1

    def __post_init__(self):
        object.__setattr__(self, "ladder", tuple(self.ladder))
        if not self.ladder:
            raise ValidationError("ladder must be non-empty")
        costs = [count_flops(s).forward_per_sample for s in self.ladder]
        if any(b <= a for a, b in zip(costs, costs[1:])):
            raise ValidationError(f"ladder must strictly increase in FLOPs, got {costs}")
        if self.a_standard is not None and not 0.0 < self.a_standard <= 1.0:
            raise ValidationError(f"a_standard must be in (0, 1], got {self.a_standard}")
        if self.max_growths_per_step < 0:
            raise ValidationError("max_growths_per_step must be >= 0")

    @property
    def largest(self):
        return self.ladder[-1]


@dataclass
class StepMetrics:
    t: int
    model_spec_used: dict
    accuracy: float
    train_flops: int
    distill_flops: int
    cumulative_flops: int
    buffer_bytes: int
    wall_time: float
    grew: bool = False
    flags: list = field(default_factory=list)


@dataclass
class RunLog:
    scenario: dict  # scenario manifest
    regime: str
    master_seed: int
    steps: list
    config: dict = field(default_factory=dict)

    @property
    def end_accuracy(self):
        return self.steps[-1].accuracy

    @property
    def average_accuracy(self):
        return float(np.mean([s.accuracy for s in self.steps]))

    @property
    def cumulative_flops(self):
        return self.steps[-1].cumulative_flops


def train_model(model: ConvNet, data: LabeledSet, opt: OptimizerConfig, seed=0):
    """Train in place for opt.epochs; returns (model, exact flops_spent).

    flops_spent = sum over update steps of batch_size x train_step_per_sample
    plus 2 FLOPs per parameter per update step.
    """
    n = len(data)
    if n == 0:
        raise ValidationError("training data is empty")
    if data.image_shape != model.spec.input_shape:
        raise ValidationError(
            f"data image shape {data.image_shape} != model input {model.spec.input_shape}"
        )
    bs = min(opt.batch_size, n)
    x_all = torch.from_numpy(np.ascontiguousarray(data.images)).to(model.dtype)
    y_all = torch.from_numpy(data.labels)

    if opt.kind == "adam":
        optimizer = torch.optim.Adam(
            model.parameters(), lr=opt.lr, weight_decay=opt.weight_decay
        )
    else:
        optimizer = torch.optim.SGD(
            model.parameters(), lr=opt.lr, momentum=opt.momentum,
            weight_decay=opt.weight_decay,
        )
    steps_per_epoch = math.ceil(n / bs)
    scheduler = None
    if opt.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=max(1, opt.epochs * steps_per_epoch)
        )

    g = torch.Generator().manual_seed(derive_seed(seed, "shuffle"))
    fc = count_flops(model.spec)
    flops = 0
    model.train()
    for epoch in range(opt.epochs):
        perm = torch.randperm(n, generator=g)
        for s in range(steps_per_epoch):
            idx = perm[s * bs : (s + 1) * bs]
            loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch step {s}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
            flops += len(idx) * fc.train_step_per_sample + fc.update_flops_per_step
    model.eval()
    return model, flops


def validate(model: ConvNet, scenario: Scenario, upto_t, batch_size=512):
    """Accuracy over the union of test sets 1..upto_t (micro-average; argmax
    prediction, ties broken toward the lowest class index)."""
    union = scenario.cumulative_test(upto_t)
    if len(union) == 0:
        raise ValidationError(f"empty cumulative test set through step {upto_t}")
    x_all = torch.from_numpy(np.ascontiguousarray(union.images)).to(model.dtype)
    correct = 0
    with torch.no_grad():
        for b0 in range(0, len(union), batch_size):
            logits = model(x_all[b0 : b0 + batch_size]).numpy()
            pred = np.argmax(logits, axis=1)  # first max -> lowest class index
            correct += int((pred == union.labels[b0 : b0 + batch_size]).sum())
    return correct / len(union)


def grow_if_needed(spec: ModelSpec, accuracy, policy: GrowthPolicy, best_so_far=None):
    """Next ladder entry if accuracy is strictly below the standard, else spec."""
    if spec not in policy.ladder:
        raise ValidationError("spec is not on the policy ladder")
    if policy.a_standard is not None:
        threshold = policy.a_standard
    else:
        if best_so_far is None:
            raise ValidationError("relative growth rule requires best_so_far")
        threshold = policy.relative_factor * best_so_far
    if accuracy < threshold:
        i = policy.ladder.index(spec)
        if i + 1 < len(policy.ladder):
            return policy.ladder[i + 1]
    return spec


def _touch(hook, regime, at_step, source, source_step):
    if hook is not None:
        hook({"regime": regime, "at_step": at_step, "source": source, "source_step": source_step})


def run_incremental(
    scenario: Scenario,
    distill_cfg: DistillConfig,
    opt: OptimizerConfig,
    policy: GrowthPolicy,
    regime: str,
    master_seed=0,
    real_opt: OptimizerConfig = None,
    mixed_training=False,
    data_access_hook=None,
    distill_cache=None,
) -> RunLog:
    """Execute one regime over the scenario and return the complete RunLog.

    `real_opt` configures training on real data (cumulative/naive regimes);
    it defaults to `opt` with 30 epochs. `distill_cache` (a dict) lets several
    regimes over the same scenario share distillation work; FLOPs are charged
    either way. `data_access_hook` is called with every dataset read.
    """
    if regime not in REGIMES:
        raise ValidationError(f"unknown regime {regime!r}, expected one of {REGIMES}")
    if real_opt is None:
        real_opt = replace(opt, epochs=30)

    uses_buffer = regime in ("adaptive", "fixed_largest")
    buffer = DistilledBuffer(scenario.image_shape, scenario.class_count)
    spec_cur = policy.ladder[0] if regime == "adaptive" else policy.largest
    warm_model = None  # naive regime and mixed mode carry the model across steps
    best_acc = 0.0
    cumulative = 0
    metrics = []

    def make_log():
        return RunLog(
            scenario=scenario_manifest(scenario),
            regime=regime,
            master_seed=master_seed,
            steps=metrics,
            config=_config_snapshot(distill_cfg, opt, real_opt, policy, mixed_training),
        )

    stage = "start"
    for step in scenario.steps:
        t = step.t
        t0 = time.perf_counter()
        flags = []
        distill_flops = 0
        train_flops = 0
        grew = False

        try:
            if uses_buffer:
                stage = "distill"
                _touch(data_access_hook, regime, t, "real_train", t)
                cache_key = (t, distill_cfg.ipc, distill_cfg.outer_steps, master_seed)
                diag = {}
                if distill_cache is not None and cache_key in distill_cache:
                    synthetic, distill_flops = distill_cache[cache_key]
                else:
                    step_cfg = replace(distill_cfg, seed=derive_seed(master_seed, "distill", t))
                    synthetic = distill(step.train, step_cfg, diagnostics=diag)
                    distill_flops = diag["flops"]
                    if distill_cache is not None:
                        distill_cache[cache_key] = (synthetic, distill_flops)
                if diag.get("replacement_classes"):
                    flags.append(f"init_with_replacement:{diag['replacement_classes']}")

                if mixed_training:
                    _touch(data_access_hook, regime, t, "buffer", None)
                    parts = [step.train]
                    if buffer.entries:
                        parts.append(buffer.merged_set())
                    train_set = LabeledSet.concat(parts)
                    buffer.append_step(t, synthetic)
                else:
                    buffer.append_step(t, synthetic)
                    _touch(data_access_hook, regime, t, "buffer", None)
                    train_set = buffer.merged_set()

                stage = "train"
                if mixed_training and warm_model is not None and warm_model.spec == spec_cur:
                    model = warm_model
                else:
                    model = build_model(spec_cur, seed=derive_seed(master_seed, "init", t))
                model, f = train_model(
                    model, train_set, opt, seed=derive_seed(master_seed, "train", t)
                )
                train_flops += f
                stage = "validate"
                acc = validate(model, scenario, t)

                if regime == "adaptive":
                    stage = "grow"
                    for gi in range(policy.max_growths_per_step):
                        best = max(best_acc, acc)
                        new_spec = grow_if_needed(spec_cur, acc, policy, best_so_far=best)
                        if new_spec == spec_cur:
                            if spec_cur == policy.largest and _below_standard(acc, policy, best):
                                flags.append("ladder_exhausted")
                            break
                        spec_cur = new_spec
                        grew = True
                        model = build_model(
                            spec_cur, seed=derive_seed(master_seed, "init", t, "grow", gi)
                        )
                        model, f = train_model(
                            model, train_set, opt,
                            seed=derive_seed(master_seed, "train", t, "grow", gi),
                        )
                        train_flops += f
                        acc = validate(model, scenario, t)
                warm_model = model

            elif regime == "cumulative_baseline":
                stage = "train"
                for past in scenario.steps[:t]:
                    _touch(data_access_hook, regime, t, "real_train", past.t)
                train_set = LabeledSet.concat([s.train for s in scenario.steps[:t]])
                model = build_model(policy.largest, seed=derive_seed(master_seed, "init", t))
                model, f = train_model(
                    model, train_set, real_opt, seed=derive_seed(master_seed, "train", t)
                )
                train_flops += f
                stage = "validate"
                acc = validate(model, scenario, t)

            else:  # naive_forgetting
                stage = "train"
                _touch(data_access_hook, regime, t, "real_train", t)
                if warm_model is None:
                    warm_model = build_model(
                        policy.largest, seed=derive_seed(master_seed, "init", 1)
                    )
                warm_model, f = train_model(
                    warm_model, step.train, real_opt, seed=derive_seed(master_seed, "train", t)
                )
                train_flops += f
                stage = "validate"
                acc = validate(warm_model, scenario, t)
        except DistillCLError as e:
            e.args = (f"step {t}, stage {stage}: {e}",)
            e.partial_log = make_log()
            raise

        for past in scenario.steps[:t]:
            _touch(data_access_hook, regime, t, "real_test", past.t)

        best_acc = max(best_acc, acc)
        cumulative += distill_flops + train_flops
        metrics.append(
            StepMetrics(
                t=t,
                model_spec_used=(spec_cur if uses_buffer else policy.largest).to_dict(),
                accuracy=acc,
                train_flops=train_flops,
                distill_flops=distill_flops,
                cumulative_flops=cumulative,
                buffer_bytes=buffer.byte_size,
                wall_time=time.perf_counter() - t0,
                grew=grew,
                flags=flags,
            )
        )

    return make_log()


def _config_snapshot(distill_cfg, opt, real_opt, policy, mixed_training):
    return {
        "distill": {
            "ipc": distill_cfg.ipc,
            "outer_steps": distill_cfg.outer_steps,
            "synth_lr": distill_cfg.synth_lr,
            "real_batch_per_class": distill_cfg.real_batch_per_class,
            "init_mode": distill_cfg.init_mode,
            "dsa_enabled": distill_cfg.dsa_enabled,
            "dsa_ops": list(distill_cfg.dsa_ops),
            "distill_spec": distill_cfg.distill_spec.to_dict(),
        },
        "optimizer": dict(opt.__dict__),
        "real_optimizer": dict(real_opt.__dict__),
        "policy": {
            "ladder": [s.to_dict() for s in policy.ladder],
            "a_standard": policy.a_standard,
            "relative_factor": policy.relative_factor,
            "max_growths_per_step": policy.max_growths_per_step,
        },
        "mixed_training": mixed_training,
    }


def _below_standard(accuracy, policy, best):
    threshold = policy.a_standard if policy.a_standard is not None else policy.relative_factor * best
    return accuracy < threshold


def aggregate(log: RunLog, reference: RunLog) -> dict:
    """Tables-style aggregates for one run, FLOPs relative to the
    fixed-largest reference on the same scenario."""
    if reference.regime != "fixed_largest":
        raise ValidationError("reference log must come from the fixed_largest regime")
    if not _same_scenario(log.scenario, reference.scenario):
        raise ValidationError("log and reference were produced on different scenarios")
    full_bytes = _full_train_bytes(log.scenario)
    return {
        "end_accuracy": log.end_accuracy,
        "average_accuracy": log.average_accuracy,
        "needed_flops_fraction": log.cumulative_flops / reference.cumulative_flops,
        "memory_fraction": log.steps[-1].buffer_bytes / full_bytes,
    }


def _full_train_bytes(manifest):
    c, h, w = manifest["image_shape"]
    return manifest["full_train_size"] * c * h * w * 4


def _same_scenario(a, b):
    keys = ("kind", "dataset", "seed", "steps", "full_train_size")
    if any(a[k] != b[k] for k in keys):
        return False
    return [s["train_checksum"] for s in a["per_step"]] == [
        s["train_checksum"] for s in b["per_step"]
    ]
