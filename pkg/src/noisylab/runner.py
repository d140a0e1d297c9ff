"""Config-driven experiment orchestration: training runs, checkpoints, suites."""

from __future__ import annotations

import base64
import copy
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import adapters as adapters_mod
from .backbone import Backbone, BackboneConfig, load_pretrained
from .baselines import (
    DEFAULT_LAMBDA,
    PARADIGMS,
    TWIN_METHODS,
    TWIN_STEPS,
    KeepRateSchedule,
    init_paradigm,
    init_twin,
    inverse_frequency_weights,
    paradigm_step,
)
from .curriculum import Batch, cufit_step, init_cufit
from .datahub import (
    CorruptionMask,
    LabeledDataset,
    NoiseSpec,
    batches,
    inject_symmetric_noise,
    load_image_folder,
    load_packed,
    make_synthetic,
)
from .metrics import (
    EpochRecord,
    ModuleRecord,
    RunLog,
    SelectionStats,
    accuracy,
    emit_curves,
    last_k_mean,
    per_class_accuracy,
)
from .tensorio import load_tensors, save_tensors

log = logging.getLogger(__name__)

METHODS = ("CUFIT",) + PARADIGMS + TWIN_METHODS
OUT_ENV = "NOISYLAB_OUT"
EVAL_CHUNK = 256


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass
class DatasetSpec:
    source: str = "synthetic"  # synthetic | packed | image_folder
    train_path: str | None = None
    test_path: str | None = None
    train_manifest: str | None = None
    test_manifest: str | None = None
    class_count: int | None = None
    classes: int = 8
    n_per_class: int = 150
    test_per_class: int = 50
    dim: int = 16
    cluster_sep: float = 6.0
    image_shape: list[int] | None = field(default_factory=lambda: [16, 16, 3])
    layout_seed: int = 100


@dataclass
class NoiseConfig:
    rate: float = 0.0
    seed: int | None = None  # defaults to the run seed


@dataclass
class BackboneSpec:
    kind: str = "synthetic"  # synthetic | pretrained
    weights_path: str | None = None
    seed: int = 1
    weight_gain: float = 0.5
    depth: int = 2
    token_dim: int = 32
    head_count: int = 4
    patch_size: int = 4
    input_size: list[int] = field(default_factory=lambda: [16, 16])
    channels: int = 3
    mlp_ratio: float = 4.0
    layer_scale: bool = False
    final_norm: bool = True
    pixel_mean: list[float] | None = field(default_factory=lambda: [0.5, 0.5, 0.5])
    pixel_std: list[float] | None = field(default_factory=lambda: [0.2, 0.2, 0.2])

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            depth=self.depth,
            token_dim=self.token_dim,
            head_count=self.head_count,
            patch_size=self.patch_size,
            input_size=tuple(self.input_size),
            channels=self.channels,
            mlp_ratio=self.mlp_ratio,
            layer_scale=self.layer_scale,
            final_norm=self.final_norm,
            pixel_mean=None if self.pixel_mean is None else tuple(self.pixel_mean),
            pixel_std=None if self.pixel_std is None else tuple(self.pixel_std),
        )


@dataclass
class KeepRateConfig:
    tau: float | None = None  # defaults to the injected noise rate
    warmup_epochs: int = 10


@dataclass
class ExperimentConfig:
    method: str = "CUFIT"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    adapter: dict = field(default_factory=lambda: {"kind": "lora", "rank": 16})
    epochs: int = 100
    batch_size: int = 32
    base_lr: float | None = None  # 1e-3, or 1e-4 for FULL
    lr_decay_epochs: list[int] = field(default_factory=lambda: [50, 75, 90])
    lr_decay_factor: float = 0.1
    seed: int = 0
    keep_rate: KeepRateConfig | None = None
    twin_lambda: float | None = None
    loss_weighting: bool = False
    threads: int = 1
    checkpoint_every: int = 1
    out_dir: str | None = None

    # -- derived ----------------------------------------------------------

    @property
    def lr(self) -> float:
        if self.base_lr is not None:
            return self.base_lr
        return 1e-4 if self.method == "FULL" else 1e-3

    def lr_schedule(self) -> "LrSchedule":
        return LrSchedule(self.lr, tuple(self.lr_decay_epochs), self.lr_decay_factor)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> "ExperimentConfig":
        self.method = self.method.upper()
        if self.method not in METHODS:
            raise ConfigError("method", f"unknown method {self.method!r}; expected one of {list(METHODS)}")
        if self.method == "CUFIT" and self.keep_rate is not None:
            raise ConfigError("keep_rate", "CUFIT selects by agreement and accepts no keep-rate / noise-rate setting")
        if self.method not in TWIN_METHODS and self.keep_rate is not None:
            raise ConfigError("keep_rate", f"only used by {list(TWIN_METHODS)}")
        if self.twin_lambda is not None and self.method not in ("JOCOR", "CODIS"):
            raise ConfigError("twin_lambda", "only used by JOCOR and CODIS")
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError("base_lr", f"must be positive, got {self.lr}")
        if list(self.lr_decay_epochs) != sorted(self.lr_decay_epochs):
            raise ConfigError("lr_decay_epochs", "must be sorted")
        if not 0.0 <= self.noise.rate <= 1.0:
            raise ConfigError("noise.rate", f"must be in [0, 1], got {self.noise.rate}")
        if self.dataset.source not in ("synthetic", "packed", "image_folder"):
            raise ConfigError("dataset.source", f"unknown source {self.dataset.source!r}")
        if self.backbone.kind not in ("synthetic", "pretrained"):
            raise ConfigError("backbone.kind", f"unknown kind {self.backbone.kind!r}")
        if self.backbone.kind == "pretrained" and not self.backbone.weights_path:
            raise ConfigError("backbone.weights_path", "required for a pretrained backbone")
        try:
            self.backbone.backbone_config()
        except ValueError as exc:
            raise ConfigError("backbone", str(exc)) from None
        if self.method not in ("FULL", "LINEAR_PROBE"):
            try:
                adapters_mod.check_variant(self.variant(), self.backbone.backbone_config())
            except (ValueError, TypeError) as exc:
                raise ConfigError("adapter", str(exc)) from None
        return self

    def variant(self):
        return adapters_mod.variant_from_dict(self.adapter)


def _build(cls, data, prefix=""):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "config", f"expected a table, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(prefix + key, "unknown field")
        sub = {"dataset": DatasetSpec, "noise": NoiseConfig, "backbone": BackboneSpec, "keep_rate": KeepRateConfig}
        if cls is ExperimentConfig and key in sub:
            kwargs[key] = _build(sub[key], value, prefix + key + ".")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, copy.deepcopy(data)).validate()


def _read_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as f:
        try:
            return tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("config", f"{path}: {exc}") from None


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    data = _read_toml(path)
    data.pop("suite", None)
    data.update(overrides or {})
    return config_from_dict(data)


def method_schema(method: str) -> set[str]:
    """Config fields that configure ``method`` itself (beyond data, backbone and schedule)."""
    method = method.upper()
    fields = {"adapter"} if method not in ("FULL", "LINEAR_PROBE") else set()
    if method in TWIN_METHODS:
        fields |= {"keep_rate.tau", "keep_rate.warmup_epochs"}
    if method in ("JOCOR", "CODIS"):
        fields.add("twin_lambda")
    return fields


# --------------------------------------------------------------------------
# Learning-rate schedule
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    base: float
    decay_epochs: tuple[int, ...] = (50, 75, 90)
    factor: float = 0.1


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    decays = sum(1 for e in schedule.decay_epochs if e <= epoch)
    return schedule.base * schedule.factor**decays


# --------------------------------------------------------------------------
# Data and backbone construction
# --------------------------------------------------------------------------


def build_datasets(config: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    spec = config.dataset
    if spec.source == "synthetic":
        shape = None if spec.image_shape is None else tuple(spec.image_shape)
        common = dict(k=spec.classes, dim=spec.dim, cluster_sep=spec.cluster_sep,
                      image_shape=shape, layout_seed=spec.layout_seed)
        train = make_synthetic(n_per_class=spec.n_per_class, seed=spec.layout_seed * 7919 + 1,
                               split="train", name="synthetic-train", **common)
        test = make_synthetic(n_per_class=spec.test_per_class, seed=spec.layout_seed * 7919 + 2,
                              split="test", name="synthetic-test", **common)
        return train, test
    if spec.source == "packed":
        if not spec.train_path or not spec.test_path:
            raise ConfigError("dataset.train_path", "packed datasets need train_path and test_path")
        train = load_packed(spec.train_path, split="train")
        test = load_packed(spec.test_path, split="test")
        # Packed train files may already carry noisy observed labels; noise is re-derived from true labels.
        return train, test
    if not (spec.train_path and spec.train_manifest and spec.test_path and spec.test_manifest):
        raise ConfigError("dataset", "image_folder needs train_path/train_manifest/test_path/test_manifest")
    size = tuple(config.backbone.input_size)
    ch = config.backbone.channels
    train = load_image_folder(spec.train_path, spec.train_manifest, size, spec.class_count, ch, "train")
    test = load_image_folder(spec.test_path, spec.test_manifest, size, spec.class_count or train.class_count,
                             ch, "test")
    return train, test


def build_backbone(config: ExperimentConfig) -> Backbone:
    spec = config.backbone
    bcfg = spec.backbone_config()
    if spec.kind == "pretrained":
        return load_pretrained(spec.weights_path, bcfg)
    return Backbone.synthetic(bcfg, seed=spec.seed, weight_gain=spec.weight_gain)


def check_compatibility(config: ExperimentConfig, train: LabeledDataset, test: LabeledDataset) -> None:
    if train.is_image != test.is_image or train.input_shape != test.input_shape:
        raise ConfigError("dataset", f"train inputs {train.input_shape} and test inputs {test.input_shape} differ")
    if train.class_count != test.class_count:
        raise ConfigError("dataset", f"class counts differ: train {train.class_count}, test {test.class_count}")
    if not train.is_image:
        if config.method != "LINEAR_PROBE":
            raise ConfigError("method", f"{config.method} needs images; the dataset holds cached features")
        return
    expected = (*config.backbone.input_size, config.backbone.channels)
    if train.input_shape != tuple(expected):
        raise ConfigError("dataset", f"image shape {train.input_shape} does not match backbone input {expected}")


def frozen_features(backbone: Backbone, inputs: np.ndarray) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for i in range(0, len(inputs), EVAL_CHUNK):
            out.append(backbone.forward_features(torch.from_numpy(inputs[i : i + EVAL_CHUNK])))
    return torch.cat(out) if out else torch.zeros(0, backbone.config.token_dim)


# --------------------------------------------------------------------------
# Method drivers
# --------------------------------------------------------------------------


class _Driver:
    """Uniform epoch-level interface over CUFIT, paradigms and two-network methods."""

    main: str

    def __init__(self, config, train, test, mask, backbone):
        self.config = config
        self.train, self.test, self.mask = train, test, mask
        self.backbone = backbone
        self.images = torch.from_numpy(np.array(train.inputs)) if train.is_image else None
        self.labels = torch.from_numpy(np.array(train.observed_labels))
        self.flipped = mask.flipped
        self.test_inputs = torch.from_numpy(np.array(test.inputs))
        self.weights = (
            inverse_frequency_weights(train.observed_labels, train.class_count) if config.loss_weighting else None
        )

    def _chunks(self, fn, inputs):
        with torch.no_grad():
            return torch.cat([fn(inputs[i : i + EVAL_CHUNK]) for i in range(0, len(inputs), EVAL_CHUNK)])

    def modules(self) -> dict[str, torch.nn.Module]:
        raise NotImplementedError

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        raise NotImplementedError


class CufitDriver(_Driver):
    main = "lam"

    def __init__(self, config, train, test, mask, backbone):
        super().__init__(config, train, test, mask, backbone)
        self.features = frozen_features(backbone, np.array(train.inputs))
        self.test_features = frozen_features(backbone, np.array(test.inputs))
        self.state = init_cufit(backbone, config.variant(), train.class_count, config.seed, config.lr, self.weights)

    def set_lr(self, lr):
        self.state.set_lr(lr)

    def train_epoch(self, epoch):
        stats = {"lpm": SelectionStats(), "iam": SelectionStats()}
        losses = {"lpm": [], "iam": [], "lam": []}
        for index in batches(len(self.train), self.config.batch_size, self.config.seed, epoch):
            idx = torch.from_numpy(index)
            batch = Batch(self.images[idx], self.features[idx], self.labels[idx], index)
            _, sel, batch_losses = cufit_step(self.state, batch)
            stats["lpm"] += SelectionStats.from_masks(sel.lpm_agree, self.flipped[index])
            stats["iam"] += SelectionStats.from_masks(sel.iam_agree, self.flipped[index])
            for name, (value, count) in batch_losses.items():
                if count:
                    losses[name].append(value)
        return {name: (stats.get(name), _mean(losses[name])) for name in losses}

    def predict(self):
        st = self.state
        return {
            "lpm": self._chunks(lambda f: st.lpm(f), self.test_features).argmax(1),
            "iam": self._chunks(lambda x: st.iam.logits(self.backbone, x), self.test_inputs).argmax(1),
            "lam": self._chunks(lambda x: st.lam.logits(self.backbone, x), self.test_inputs).argmax(1),
        }

    def modules(self):
        return self.state.modules()

    def optimizers(self):
        return self.state.optimizers


class ParadigmDriver(_Driver):
    main = "net"

    def __init__(self, config, train, test, mask, backbone):
        super().__init__(config, train, test, mask, backbone)
        self.feature_mode = not train.is_image
        self.model = init_paradigm(config.method, backbone, train.class_count, _variant_or_none(config),
                                   config.seed, config.lr, self.weights, self.feature_mode)
        self.features = None
        if config.method == "LINEAR_PROBE":
            self.features = (torch.from_numpy(np.array(train.inputs)) if self.feature_mode
                             else frozen_features(backbone, np.array(train.inputs)))
            self.test_features = (self.test_inputs if self.feature_mode
                                  else frozen_features(backbone, np.array(test.inputs)))

    def set_lr(self, lr):
        self.model.set_lr(lr)

    def train_epoch(self, epoch):
        losses = []
        for index in batches(len(self.train), self.config.batch_size, self.config.seed, epoch):
            idx = torch.from_numpy(index)
            if self.features is not None:
                losses.append(paradigm_step(self.model, self.labels[idx], features=self.features[idx]))
            else:
                losses.append(paradigm_step(self.model, self.labels[idx], images=self.images[idx]))
        return {"net": (None, _mean(losses))}

    def predict(self):
        if self.features is not None:
            return {"net": self._chunks(lambda f: self.model.net.head(f), self.test_features).argmax(1)}
        return {"net": self._chunks(lambda x: self.model.logits(images=x), self.test_inputs).argmax(1)}

    def modules(self):
        return self.model.modules()

    def optimizers(self):
        return {"net": self.model.optimizer}


class TwinDriver(_Driver):
    main = "a"

    def __init__(self, config, train, test, mask, backbone):
        super().__init__(config, train, test, mask, backbone)
        kr = config.keep_rate or KeepRateConfig()
        tau = config.noise.rate if kr.tau is None else kr.tau
        self.schedule = KeepRateSchedule(min(tau, 0.999), kr.warmup_epochs)
        self.lam = config.twin_lambda if config.twin_lambda is not None else DEFAULT_LAMBDA.get(config.method)
        self.twin = init_twin(backbone, config.variant(), train.class_count, config.method, config.seed,
                              config.lr, self.weights)

    def set_lr(self, lr):
        self.twin.set_lr(lr)

    def train_epoch(self, epoch):
        step = TWIN_STEPS[self.config.method]
        extra = {} if self.lam is None else {"lam": self.lam}
        stats = {"a": SelectionStats(), "b": SelectionStats()}
        for index in batches(len(self.train), self.config.batch_size, self.config.seed, epoch):
            idx = torch.from_numpy(index)
            _, selections = step(self.twin, self.images[idx], self.labels[idx], self.schedule, epoch, **extra)
            for name, sel in selections.items():
                stats[name] += SelectionStats.from_masks(sel, self.flipped[index])
        return {name: (s, None) for name, s in stats.items()}

    def predict(self):
        tw = self.twin
        return {
            "a": self._chunks(lambda x: tw.net_a.logits(self.backbone, x), self.test_inputs).argmax(1),
            "b": self._chunks(lambda x: tw.net_b.logits(self.backbone, x), self.test_inputs).argmax(1),
        }

    def modules(self):
        return self.twin.modules()

    def optimizers(self):
        return {"a": self.twin.opt_a, "b": self.twin.opt_b}


def _variant_or_none(config):
    return config.variant() if config.method == "SINGLE_ADAPTER" else None


def _mean(values):
    return float(np.mean(values)) if values else None


def make_driver(config, train, test, mask, backbone) -> _Driver:
    if config.method == "CUFIT":
        return CufitDriver(config, train, test, mask, backbone)
    if config.method in PARADIGMS:
        return ParadigmDriver(config, train, test, mask, backbone)
    return TwinDriver(config, train, test, mask, backbone)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(driver: _Driver, out_dir: Path, epoch: int, config: ExperimentConfig) -> Path:
    tensors = {}
    for name, module in driver.modules().items():
        for pname, t in module.state_dict().items():
            tensors[f"model/{name}/{pname}"] = t
    groups = {}
    for name, opt in driver.optimizers().items():
        sd = opt.state_dict()
        for idx, state in sd["state"].items():
            for key, value in state.items():
                tensors[f"optim/{name}/{idx}/{key}"] = torch.as_tensor(value, dtype=torch.float32)
        groups[name] = sd["param_groups"]
    path = out_dir / "checkpoint.vitw"
    save_tensors(path, tensors)
    manifest = {
        "epoch": epoch,
        "config_hash": config.config_hash(),
        "method": config.method,
        "param_groups": groups,
        "rng": {
            "batch_seed": config.seed,
            "next_epoch": epoch,
            "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
        },
    }
    tmp = out_dir / "checkpoint.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(out_dir / "checkpoint.json")
    return path


def load_checkpoint(driver: _Driver, out_dir: Path, config: ExperimentConfig) -> int:
    """Restore driver state; returns the number of completed epochs."""
    manifest = json.loads((out_dir / "checkpoint.json").read_text())
    if manifest["config_hash"] != config.config_hash():
        raise ConfigError("config", f"checkpoint in {out_dir} was written by a different config")
    tensors = load_tensors(out_dir / "checkpoint.vitw")
    for name, module in driver.modules().items():
        prefix = f"model/{name}/"
        sd = {k[len(prefix):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix)}
        module.load_state_dict(sd)
    for name, opt in driver.optimizers().items():
        prefix = f"optim/{name}/"
        state: dict[int, dict] = {}
        for key, value in tensors.items():
            if key.startswith(prefix):
                idx, skey = key[len(prefix):].split("/", 1)
                state.setdefault(int(idx), {})[skey] = torch.from_numpy(value)
        opt.load_state_dict({"state": state, "param_groups": manifest["param_groups"][name]})
    rng = np.frombuffer(base64.b64decode(manifest["rng"]["torch"]), dtype=np.uint8).copy()
    torch.set_rng_state(torch.from_numpy(rng))
    return int(manifest["epoch"])


# --------------------------------------------------------------------------
# Runs
# --------------------------------------------------------------------------


@dataclass
class RunResult:
    log: RunLog
    out_dir: Path
    backbone_checksum_before: str
    backbone_checksum_after: str
    driver: _Driver = field(repr=False)


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def run_experiment(config: ExperimentConfig, resume: bool = False, stop_after: int | None = None) -> RunResult:
    """Train ``config.method`` and evaluate on the test split after every epoch.

    Writes ``config.json``, ``runlog.jsonl``, ``timing.json``,
    ``corruption_mask.csv`` and ``checkpoint.{vitw,json}`` into the output
    directory. ``stop_after`` ends the run early (as if interrupted) after
    that many completed epochs.
    """
    config.validate()
    out_dir = Path(config.out_dir) if config.out_dir else default_out_root() / f"{config.method.lower()}-{config.config_hash()}"
    out_dir.mkdir(parents=True, exist_ok=True)

    prev_threads = torch.get_num_threads()
    torch.set_num_threads(max(1, config.threads))
    torch.manual_seed(config.seed)
    try:
        noisy, test, mask, backbone = prepare(config)
        before = backbone.checksum()

        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        mask.save(out_dir / "corruption_mask.csv")

        driver = make_driver(config, noisy, test, mask, backbone)
        schedule = config.lr_schedule()
        run_log = RunLog(config=config.to_dict(), seed=config.seed, label=out_dir.name)
        start = 0
        if resume and (out_dir / "checkpoint.json").exists():
            start = load_checkpoint(driver, out_dir, config)
            previous = RunLog.load(out_dir / "runlog.jsonl")
            for record in previous.records[:start]:
                run_log.append(record)
            run_log.wall_clock = previous.wall_clock[:start]
            log.info("resumed %s at epoch %d", out_dir, start)

        end = config.epochs if stop_after is None else min(config.epochs, stop_after)
        for epoch in range(start, end):
            t0 = time.perf_counter()
            lr = lr_at(schedule, epoch)
            driver.set_lr(lr)
            train_stats = driver.train_epoch(epoch)
            record = _evaluate(driver, test, epoch, lr, train_stats)
            run_log.append(record, time.perf_counter() - t0)
            run_log.save(out_dir / "runlog.jsonl")
            (out_dir / "timing.json").write_text(json.dumps(run_log.wall_clock))
            if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == end:
                save_checkpoint(driver, out_dir, epoch + 1, config)
            log.info("%s epoch %d acc %.4f", config.method, epoch, record.test_accuracy)
        after = backbone.checksum()
        if config.method == "FULL":
            after = driver.model.backbone.checksum()
        return RunResult(run_log, out_dir, before, after, driver)
    finally:
        torch.set_num_threads(prev_threads)


def prepare(config: ExperimentConfig, test_set: LabeledDataset | None = None):
    """Datasets, corruption mask and backbone for ``config``.

    With a positive noise rate the observed train labels are regenerated from
    the true labels; at rate 0 the observed labels are kept as loaded (real
    annotation noise in packed or image-folder data stays in place).
    """
    train, test = build_datasets(config)
    if test_set is not None:
        test = test_set
    check_compatibility(config, train, test)
    if config.noise.rate > 0:
        noise_seed = config.seed if config.noise.seed is None else config.noise.seed
        noisy, mask = inject_symmetric_noise(train.with_observed(train.true_labels),
                                             NoiseSpec(config.noise.rate, noise_seed))
    else:
        noisy, mask = train, CorruptionMask.from_dataset(train)
    backbone = build_backbone(config) if noisy.is_image else _feature_backbone(config, noisy)
    return noisy, test, mask, backbone


def _feature_backbone(config, dataset) -> Backbone:
    # Cached-feature datasets bypass the backbone; a placeholder keeps checksums uniform.
    spec = dataclasses.replace(config.backbone, depth=1, token_dim=dataset.input_shape[0], head_count=1,
                               patch_size=1, input_size=[1, 1], pixel_mean=None, pixel_std=None)
    return Backbone.synthetic(spec.backbone_config(), seed=spec.seed)


def _evaluate(driver: _Driver, test: LabeledDataset, epoch: int, lr: float, train_stats) -> EpochRecord:
    predictions = driver.predict()
    labels = test.true_labels
    modules = {}
    for name, pred in predictions.items():
        stats, loss = train_stats.get(name, (None, None))
        modules[name] = ModuleRecord.from_stats(stats, test_accuracy=accuracy(pred, labels), train_loss=loss)
    main = predictions[driver.main]
    per_class = per_class_accuracy(main, labels, test.class_count)
    macro = None if any(a is None for a in per_class) else float(np.mean(per_class))
    return EpochRecord(epoch=epoch, test_accuracy=accuracy(main, labels), per_class_accuracy=per_class,
                       macro_accuracy=macro, lr=lr, modules=modules)


def evaluate_run(run_dir, test_set: LabeledDataset | None = None) -> dict:
    """Reload a finished run's checkpoint and evaluate it on ``test_set`` (default: its own test split)."""
    run_dir = Path(run_dir)
    config = config_from_dict(json.loads((run_dir / "config.json").read_text()))
    config.out_dir = str(run_dir)
    noisy, test, mask, backbone = prepare(config, test_set)
    driver = make_driver(config, noisy, test, mask, backbone)
    epoch = load_checkpoint(driver, run_dir, config)
    pred = driver.predict()[driver.main]
    per_class = per_class_accuracy(pred, test.true_labels, test.class_count)
    return {
        "epoch": epoch,
        "method": config.method,
        "test_accuracy": accuracy(pred, test.true_labels),
        "macro_accuracy": None if any(a is None for a in per_class) else float(np.mean(per_class)),
        "per_class_accuracy": per_class,
    }


# --------------------------------------------------------------------------
# Suites
# --------------------------------------------------------------------------


@dataclass
class SuiteCell:
    method: str
    noise_rate: float
    seed: int
    out_dir: str
    last10: float | None = None
    error: str | None = None


def _cell_dir(root: Path, method: str, rate: float, seed: int) -> Path:
    return root / f"{method.lower()}_rho{rate:g}_seed{seed}"


def _run_cell(args):
    base, method, rate, seed, out_dir, k = args
    data = copy.deepcopy(base)
    data.update(method=method, seed=seed, out_dir=str(out_dir))
    data.setdefault("noise", {})["rate"] = rate
    if method == "CUFIT" or method not in TWIN_METHODS:
        data.pop("keep_rate", None)
    if method not in ("JOCOR", "CODIS"):
        data.pop("twin_lambda", None)
    try:
        result = run_experiment(config_from_dict(data))
        return last_k_mean(result.log, min(k, len(result.log.records))), None
    except Exception as exc:  # reported per cell; the suite continues
        return None, f"{type(exc).__name__}: {exc}"


def run_suite(base: dict, methods, noise_rates, seeds=(0, 1, 2), out_dir=None, workers: int = 1,
              last_k: int = 10) -> dict:
    """Run methods x noise rates x seeds, then write tables and curves.

    ``base`` is an experiment-config dict; ``method``, ``seed``, ``noise.rate``
    and ``out_dir`` are overridden per cell. Returns ``{"cells", "table"}``
    where ``table[method][rate]`` is the mean over seeds of each cell's
    last-``last_k``-epoch mean accuracy.
    """
    if not methods or not noise_rates or not seeds:
        raise ConfigError("suite", "needs at least one method, noise rate and seed")
    root = Path(out_dir) if out_dir else default_out_root() / "suite"
    root.mkdir(parents=True, exist_ok=True)
    grid = list(itertools.product([m.upper() for m in methods], noise_rates, seeds))
    jobs = [(base, m, r, s, _cell_dir(root, m, r, s), last_k) for m, r, s in grid]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_cell, jobs))
    else:
        outcomes = [_run_cell(job) for job in jobs]

    cells = [SuiteCell(m, r, s, str(_cell_dir(root, m, r, s)), v, e) for (m, r, s), (v, e) in zip(grid, outcomes)]
    table: dict[str, dict[float, float | None]] = {}
    for m in dict.fromkeys(c.method for c in cells):
        table[m] = {}
        for r in noise_rates:
            values = [c.last10 for c in cells if c.method == m and c.noise_rate == r and c.last10 is not None]
            table[m][r] = float(np.mean(values)) if values else None

    with open(root / "cells.csv", "w", encoding="utf-8") as f:
        f.write("method,noise_rate,seed,last10_mean,error\n")
        for c in cells:
            err = "" if c.error is None else '"' + c.error.replace('"', "'") + '"'
            f.write(f"{c.method},{c.noise_rate!r},{c.seed},{'' if c.last10 is None else repr(c.last10)},{err}\n")
    with open(root / "table.csv", "w", encoding="utf-8") as f:
        f.write("method," + ",".join(f"rho={r:g}" for r in noise_rates) + "\n")
        for m, row in table.items():
            f.write(m + "," + ",".join("" if row[r] is None else repr(row[r]) for r in noise_rates) + "\n")

    for r in noise_rates:
        logs = {}
        for c in cells:
            if c.noise_rate == r and c.seed == seeds[0] and c.error is None:
                logs[c.method] = RunLog.load(Path(c.out_dir) / "runlog.jsonl", label=c.method)
        if logs:
            try:
                emit_curves(logs, root / "curves" / f"rho{r:g}")
            except ValueError as exc:
                log.warning("curves for rho=%g skipped: %s", r, exc)
    return {"cells": cells, "table": table, "out_dir": root}
