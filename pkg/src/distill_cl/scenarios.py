"""Incremental-learning scenarios: timestamped train/test subset sequences.

class_incremental partitions the label space into disjoint per-step class
groups (seeded order). rotated_mnist is the domain-drift schedule: step 1 is
the unmodified data; at step i in 2..N every train image is rotated clockwise
by an independent angle from U([20(i-2), 20(i-1)]) degrees and every test
image from U([0, 20(i-1)]), bilinear with zero fill. Generation is pure given
seeds, so a manifest of parameters plus content checksums regenerates any
scenario bit-for-bit.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledSet
from .errors import ValidationError
from .imageops import rotate_images
from .seeding import derive_seed

CLASS_INCREMENTAL = "class_incremental"
DOMAIN_DRIFT = "domain_drift"
CUSTOM = "custom"


@dataclass
class ScenarioStep:
    t: int  # 1-based
    train: LabeledSet
    test: LabeledSet
    classes_present: frozenset
    train_angles: np.ndarray = None
    test_angles: np.ndarray = None

    def __post_init__(self):
        if self.train.image_shape != self.test.image_shape:
            raise ValidationError(f"step {self.t}: train/test image shapes differ")
        if self.train.class_count != self.test.class_count:
            raise ValidationError(f"step {self.t}: train/test class vocabularies differ")
        actual = frozenset(self.train.classes_present())
        if self.classes_present != actual:
            raise ValidationError(
                f"step {self.t}: classes_present {sorted(self.classes_present)} "
                f"!= train labels {sorted(actual)}"
            )


@dataclass
class Scenario:
    steps: list
    kind: str
    dataset_name: str
    full_train_size: int  # size of the underlying corpus (fraction denominators)
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if [s.t for s in self.steps] != list(range(1, len(self.steps) + 1)):
            raise ValidationError("step indices must be 1..N contiguous")
        if self.kind == CLASS_INCREMENTAL:
            seen = set()
            for s in self.steps:
                if seen & s.classes_present:
                    raise ValidationError(
                        f"class_incremental steps must be class-disjoint (step {s.t})"
                    )
                seen |= s.classes_present

    def __len__(self):
        return len(self.steps)

    @property
    def image_shape(self):
        return self.steps[0].train.image_shape

    @property
    def class_count(self):
        return self.steps[0].train.class_count

    @property
    def full_train_bytes(self):
        c, h, w = self.image_shape
        return self.full_train_size * c * h * w * 4

    def cumulative_test(self, upto_t) -> LabeledSet:
        if not 1 <= upto_t <= len(self.steps):
            raise ValidationError(f"upto_t must be in 1..{len(self.steps)}, got {upto_t}")
        return LabeledSet.concat([s.test for s in self.steps[:upto_t]])


def class_incremental(train, test, classes_per_step, seed, dataset_name="dataset"):
    """Split into N steps of `classes_per_step` seeded-shuffled classes each;
    a non-dividing remainder becomes a final smaller step (flagged)."""
    if classes_per_step < 1:
        raise ValidationError("classes_per_step must be >= 1")
    if classes_per_step > train.class_count:
        raise ValidationError(
            f"classes_per_step {classes_per_step} > class_count {train.class_count}"
        )
    rng = np.random.default_rng(derive_seed(seed, "class_order"))
    order = rng.permutation(train.class_count)
    groups = [order[i : i + classes_per_step] for i in range(0, len(order), classes_per_step)]
    remainder = len(order) % classes_per_step != 0
    steps = []
    for t, group in enumerate(groups, start=1):
        group = [int(c) for c in group]
        steps.append(
            ScenarioStep(
                t=t,
                train=train.class_subset(group),
                test=test.class_subset(group),
                classes_present=frozenset(group),
            )
        )
    return Scenario(
        steps=steps,
        kind=CLASS_INCREMENTAL,
        dataset_name=dataset_name,
        full_train_size=len(train),
        seed=seed,
        params={
            "classes_per_step": classes_per_step,
            "class_order": [int(c) for c in order],
            "remainder_step": remainder,
        },
    )


def rotated_mnist(train, test, steps=10, seed=0, dataset_name="mnist"):
    """Domain-drift schedule over growing clockwise rotations (all classes at
    every step; step 1 bit-identical to the source data)."""
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    all_classes = frozenset(train.classes_present())
    out = []
    for i in range(1, steps + 1):
        if i == 1:
            out.append(
                ScenarioStep(
                    t=1,
                    train=LabeledSet(train.images.copy(), train.labels.copy(), train.class_count),
                    test=LabeledSet(test.images.copy(), test.labels.copy(), test.class_count),
                    classes_present=all_classes,
                )
            )
            continue
        rng = np.random.default_rng(derive_seed(seed, "rotation", i))
        train_angles = rng.uniform(20.0 * (i - 2), 20.0 * (i - 1), size=len(train))
        test_angles = rng.uniform(0.0, 20.0 * (i - 1), size=len(test))
        out.append(
            ScenarioStep(
                t=i,
                train=LabeledSet(
                    np.clip(rotate_images(train.images, train_angles), 0.0, 1.0),
                    train.labels.copy(),
                    train.class_count,
                ),
                test=LabeledSet(
                    np.clip(rotate_images(test.images, test_angles), 0.0, 1.0),
                    test.labels.copy(),
                    test.class_count,
                ),
                classes_present=all_classes,
                train_angles=train_angles,
                test_angles=test_angles,
            )
        )
    return Scenario(
        steps=out,
        kind=DOMAIN_DRIFT,
        dataset_name=dataset_name,
        full_train_size=len(train),
        seed=seed,
        params={"steps": steps, "angle_step_deg": 20.0},
    )


def scenario_manifest(scenario: Scenario) -> dict:
    """Everything needed to regenerate the scenario, plus content checksums."""
    return {
        "kind": scenario.kind,
        "dataset": scenario.dataset_name,
        "seed": scenario.seed,
        "params": scenario.params,
        "steps": len(scenario),
        "full_train_size": scenario.full_train_size,
        "image_shape": list(scenario.image_shape),
        "class_count": scenario.class_count,
        "per_step": [
            {
                "t": s.t,
                "train_size": len(s.train),
                "test_size": len(s.test),
                "classes_present": sorted(s.classes_present),
                "train_checksum": s.train.checksum(),
                "test_checksum": s.test.checksum(),
            }
            for s in scenario.steps
        ],
    }
