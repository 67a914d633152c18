"""INI-style experiment configuration.

Flat sections (meta, scenario, distill, train, policy, run) with typed keys;
parsing validates every field and reports all problems at once. A parsed
config round-trips losslessly through `to_ini`, and its canonical text is
what the reproducibility manifest hashes.
"""

import configparser
import hashlib
import io
import os
from dataclasses import dataclass, replace

import numpy as np

from .augment import DSA_OPS
from .data import load_dataset, synthetic_digits
from .distill import DistillConfig
from .errors import ConfigError
from .models import convnet_ladder
from .scenarios import DOMAIN_DRIFT, class_incremental, rotated_mnist
from .seeding import derive_seed
from .training import REGIMES, GrowthPolicy, OptimizerConfig

CACHE_ENV = "DISTILL_CL_CACHE"
DEFAULT_CACHE = os.path.join(os.path.expanduser("~"), ".cache", "distill-cl")

SCENARIO_KINDS = ("class_incremental", "rotated")
DATASETS = ("mnist", "cifar10", "array_import", "synthetic")


@dataclass(frozen=True)
class ExperimentConfig:
    # meta
    schema: int = 1
    master_seed: int = 0
    # scenario
    kind: str = "class_incremental"
    dataset: str = "synthetic"
    source: str = ""  # raw dir (mnist/cifar10) or manifest dir (array_import)
    steps: int = 10  # rotated schedule length
    classes_per_step: int = 1
    train_limit: int = 0  # 0 = no cap (stratified subsample otherwise)
    test_limit: int = 0
    train_size: int = 10000  # synthetic corpus only
    test_size: int = 2000
    noise: float = 0.25
    # distill
    ipc: int = 10
    outer_steps: int = 1000
    synth_lr: float = 1.0
    real_batch_per_class: int = 256
    init_mode: str = "real_sample"
    dsa: bool = True
    # train
    optimizer: str = "adam"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 256
    epochs_buffer: int = 300
    epochs_real: int = 30
    lr_schedule: str = "constant"
    # policy
    widths: tuple = (8, 64, 128)  # D2, D3, D4 uniform block widths
    a_standard: float = None  # None = relative rule
    relative_factor: float = 0.95
    max_growths_per_step: int = 1
    # run
    regimes: tuple = REGIMES
    output: str = "out"


_SECTIONS = {
    "meta": ("schema", "master_seed"),
    "scenario": (
        "kind", "dataset", "source", "steps", "classes_per_step",
        "train_limit", "test_limit", "train_size", "test_size", "noise",
    ),
    "distill": ("ipc", "outer_steps", "synth_lr", "real_batch_per_class", "init_mode", "dsa"),
    "train": (
        "optimizer", "lr", "momentum", "weight_decay", "batch_size",
        "epochs_buffer", "epochs_real", "lr_schedule",
    ),
    "policy": ("widths", "a_standard", "relative_factor", "max_growths_per_step"),
    "run": ("regimes", "output"),
}

# applied by --desk-scale: narrow ladder, short schedules, capped corpora
DESK_SCALE_OVERRIDES = {
    "widths": (4, 8, 16),
    "real_batch_per_class": 64,
    "epochs_buffer": 150,
    "epochs_real": 3,
    "outer_steps": 100,
    "a_standard": 0.9,
    "train_size": 10000,
    "test_size": 2000,
    "train_limit": 10000,
    "test_limit": 2000,
}


def _format_value(name, value):
    if name == "widths":
        return ",".join(str(w) for w in value)
    if name == "regimes":
        return ",".join(value)
    if name == "a_standard":
        return "relative" if value is None else repr(float(value))
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_ini(cfg: ExperimentConfig) -> str:
    out = io.StringIO()
    for section, keys in _SECTIONS.items():
        out.write(f"[{section}]\n")
        for key in keys:
            out.write(f"{key} = {_format_value(key, getattr(cfg, key))}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(to_ini(cfg).encode("utf-8")).hexdigest()


class _Parser:
    def __init__(self):
        self.errors = []

    def take(self, section, key, raw, kind, default, choices=None, minimum=None):
        where = f"[{section}] {key}"
        if raw is None:
            return default
        raw = raw.strip()
        try:
            if kind == "int":
                value = int(raw)
            elif kind == "float":
                value = float(raw)
            elif kind == "bool":
                if raw.lower() in ("on", "true", "yes", "1"):
                    value = True
                elif raw.lower() in ("off", "false", "no", "0"):
                    value = False
                else:
                    raise ValueError(f"expected on/off, got {raw!r}")
            elif kind == "widths":
                value = tuple(int(v) for v in raw.split(","))
                if len(value) != 3 or any(w < 1 for w in value):
                    raise ValueError("expected three positive ints (D2,D3,D4 widths)")
            elif kind == "regimes":
                value = tuple(v.strip() for v in raw.split(",") if v.strip())
                bad = [v for v in value if v not in REGIMES]
                if bad or not value:
                    raise ValueError(f"unknown regimes {bad}; expected among {REGIMES}")
            elif kind == "a_standard":
                if raw.lower() == "relative":
                    value = None
                else:
                    value = float(raw)
                    if not 0.0 < value <= 1.0:
                        raise ValueError("must be in (0, 1] or 'relative'")
            else:
                value = raw
        except ValueError as e:
            self.errors.append(f"{where}: {e}")
            return default
        if choices is not None and value not in choices:
            self.errors.append(f"{where}: {value!r} not in {choices}")
            return default
        if minimum is not None and value < minimum:
            self.errors.append(f"{where}: must be >= {minimum}, got {value}")
            return default
        return value


def from_ini(text) -> ExperimentConfig:
    """Parse config text; raises ConfigError listing every invalid field."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError([f"unparseable config: {e}"]) from None

    known = {(s, k) for s, keys in _SECTIONS.items() for k in keys}
    p = _Parser()
    for section in cp.sections():
        if section not in _SECTIONS:
            p.errors.append(f"unknown section [{section}]")
            continue
        for key in cp[section]:
            if (section, key) not in known:
                p.errors.append(f"unknown key [{section}] {key}")

    def raw(section, key):
        return cp.get(section, key, fallback=None)

    d = ExperimentConfig()  # defaults
    cfg = ExperimentConfig(
        schema=p.take("meta", "schema", raw("meta", "schema"), "int", d.schema, choices=(1,)),
        master_seed=p.take("meta", "master_seed", raw("meta", "master_seed"), "int", d.master_seed, minimum=0),
        kind=p.take("scenario", "kind", raw("scenario", "kind"), "str", d.kind, choices=SCENARIO_KINDS),
        dataset=p.take("scenario", "dataset", raw("scenario", "dataset"), "str", d.dataset, choices=DATASETS),
        source=p.take("scenario", "source", raw("scenario", "source"), "str", d.source),
        steps=p.take("scenario", "steps", raw("scenario", "steps"), "int", d.steps, minimum=1),
        classes_per_step=p.take("scenario", "classes_per_step", raw("scenario", "classes_per_step"), "int", d.classes_per_step, minimum=1),
        train_limit=p.take("scenario", "train_limit", raw("scenario", "train_limit"), "int", d.train_limit, minimum=0),
        test_limit=p.take("scenario", "test_limit", raw("scenario", "test_limit"), "int", d.test_limit, minimum=0),
        train_size=p.take("scenario", "train_size", raw("scenario", "train_size"), "int", d.train_size, minimum=10),
        test_size=p.take("scenario", "test_size", raw("scenario", "test_size"), "int", d.test_size, minimum=10),
        noise=p.take("scenario", "noise", raw("scenario", "noise"), "float", d.noise, minimum=0.0),
        ipc=p.take("distill", "ipc", raw("distill", "ipc"), "int", d.ipc, minimum=1),
        outer_steps=p.take("distill", "outer_steps", raw("distill", "outer_steps"), "int", d.outer_steps, minimum=1),
        synth_lr=p.take("distill", "synth_lr", raw("distill", "synth_lr"), "float", d.synth_lr),
        real_batch_per_class=p.take("distill", "real_batch_per_class", raw("distill", "real_batch_per_class"), "int", d.real_batch_per_class, minimum=1),
        init_mode=p.take("distill", "init_mode", raw("distill", "init_mode"), "str", d.init_mode, choices=("real_sample", "noise")),
        dsa=p.take("distill", "dsa", raw("distill", "dsa"), "bool", d.dsa),
        optimizer=p.take("train", "optimizer", raw("train", "optimizer"), "str", d.optimizer, choices=("adam", "sgd_momentum")),
        lr=p.take("train", "lr", raw("train", "lr"), "float", d.lr, minimum=0.0),
        momentum=p.take("train", "momentum", raw("train", "momentum"), "float", d.momentum, minimum=0.0),
        weight_decay=p.take("train", "weight_decay", raw("train", "weight_decay"), "float", d.weight_decay, minimum=0.0),
        batch_size=p.take("train", "batch_size", raw("train", "batch_size"), "int", d.batch_size, minimum=1),
        epochs_buffer=p.take("train", "epochs_buffer", raw("train", "epochs_buffer"), "int", d.epochs_buffer, minimum=1),
        epochs_real=p.take("train", "epochs_real", raw("train", "epochs_real"), "int", d.epochs_real, minimum=1),
        lr_schedule=p.take("train", "lr_schedule", raw("train", "lr_schedule"), "str", d.lr_schedule, choices=("constant", "cosine")),
        widths=p.take("policy", "widths", raw("policy", "widths"), "widths", d.widths),
        a_standard=p.take("policy", "a_standard", raw("policy", "a_standard"), "a_standard", d.a_standard),
        relative_factor=p.take("policy", "relative_factor", raw("policy", "relative_factor"), "float", d.relative_factor, minimum=0.0),
        max_growths_per_step=p.take("policy", "max_growths_per_step", raw("policy", "max_growths_per_step"), "int", d.max_growths_per_step, minimum=0),
        regimes=p.take("run", "regimes", raw("run", "regimes"), "regimes", d.regimes),
        output=p.take("run", "output", raw("run", "output"), "str", d.output),
    )
    if cfg.synth_lr <= 0:
        p.errors.append(f"[distill] synth_lr: must be > 0, got {cfg.synth_lr}")
    if cfg.dataset in ("mnist", "cifar10", "array_import") and not cfg.source:
        # resolvable from the cache root at build time; only array_import requires it
        if cfg.dataset == "array_import":
            p.errors.append("[scenario] source: required for array_import")
    if p.errors:
        raise ConfigError(p.errors)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return from_ini(f.read())


def apply_desk_scale(cfg: ExperimentConfig) -> ExperimentConfig:
    return replace(cfg, **DESK_SCALE_OVERRIDES)


def cache_root():
    return os.environ.get(CACHE_ENV, DEFAULT_CACHE)


def _stratified_limit(labeled, limit, seed):
    if limit <= 0 or limit >= len(labeled):
        return labeled
    rng = np.random.default_rng(derive_seed(seed, "limit", len(labeled)))
    share = limit / len(labeled)
    picks = []
    for c in labeled.classes_present():
        idx = labeled.indices_of(c)
        take = max(1, int(round(share * len(idx))))
        picks.append(rng.choice(idx, size=min(take, len(idx)), replace=False))
    idx = np.sort(np.concatenate(picks))[:limit]
    return labeled.subset(idx)


def build_corpus(cfg: ExperimentConfig):
    """Resolve the (train, test) corpus for a config."""
    if cfg.dataset == "synthetic":
        return synthetic_digits(
            cfg.train_size, cfg.test_size, seed=derive_seed(cfg.master_seed, "corpus"),
            noise=cfg.noise,
        )
    source = cfg.source or os.path.join(cache_root(), cfg.dataset, "raw")
    train, test = load_dataset(cfg.dataset, source)
    train = _stratified_limit(train, cfg.train_limit, cfg.master_seed)
    test = _stratified_limit(test, cfg.test_limit, cfg.master_seed + 1)
    return train, test


def build_experiment(cfg: ExperimentConfig):
    """Turn a config into (scenario, distill_cfg, opt, real_opt, policy)."""
    train, test = build_corpus(cfg)
    if cfg.kind == "class_incremental":
        scenario = class_incremental(
            train, test, cfg.classes_per_step, seed=cfg.master_seed, dataset_name=cfg.dataset
        )
    else:
        scenario = rotated_mnist(
            train, test, steps=cfg.steps, seed=cfg.master_seed, dataset_name=cfg.dataset
        )

    ladder = convnet_ladder(
        scenario.image_shape, scenario.class_count,
        widths={2: cfg.widths[0], 3: cfg.widths[1], 4: cfg.widths[2]},
    )
    policy = GrowthPolicy(
        ladder=ladder,
        a_standard=cfg.a_standard,
        relative_factor=cfg.relative_factor,
        max_growths_per_step=cfg.max_growths_per_step,
    )
    dsa_ops = DSA_OPS
    if scenario.kind == DOMAIN_DRIFT:
        dsa_ops = tuple(op for op in DSA_OPS if op != "rotate")
    distill_cfg = DistillConfig(
        distill_spec=policy.largest,
        ipc=cfg.ipc,
        outer_steps=cfg.outer_steps,
        synth_lr=cfg.synth_lr,
        real_batch_per_class=cfg.real_batch_per_class,
        init_mode=cfg.init_mode,
        dsa_enabled=cfg.dsa,
        dsa_ops=dsa_ops,
        seed=cfg.master_seed,
    )
    opt = OptimizerConfig(
        kind=cfg.optimizer, lr=cfg.lr, momentum=cfg.momentum,
        weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
        epochs=cfg.epochs_buffer, lr_schedule=cfg.lr_schedule,
    )
    real_opt = replace(opt, epochs=cfg.epochs_real)
    return scenario, distill_cfg, opt, real_opt, policy
