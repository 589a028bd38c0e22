"""Training pipelines for the frequency-decomposition defense and the baselines.

Defense kinds:

``none``          plain cross-entropy, pixel-domain model
``infodecom``     retained DCT channels, clustering regularizer on the smashed
                  data, per-epoch FSInfo-calibrated Gaussian noise
``nopeek``        cross-entropy + alpha * distance correlation(x, z)
``shredder``      learnable additive noise tensor, cross-entropy - coeff * mean|delta|
``dfil_def``      per-epoch dFIL-calibrated noise, no decomposition
``fsinfo_guard``  per-epoch FSInfo-calibrated noise, no decomposition
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .calibration import NoiseScale, PrivacyBudget, calibrate, perturb
from .datasets import DatasetSplit, iterate_batches, load_cifar10, synthetic_shapes, to_unit_range
from .engine import AdamState, Tensor, adam_step, no_grad, zero_grads
from .frequency import decompose, default_retained_set
from .losses import clustering_loss, cross_entropy, distance_correlation, noise_norm_penalty, random_pairing
from .models import (
    Sequential,
    SplitModelSpec,
    build_split_model,
    frequency_model_spec,
    load_params,
    pixel_model_spec,
    save_params,
)

log = logging.getLogger(__name__)

DEFENSES = ("none", "infodecom", "nopeek", "shredder", "dfil_def", "fsinfo_guard")
STD_FLOOR = 1e-6
DEFAULT_FREQ_GAIN = 0.1
NOISE_DEFENSES = {"infodecom": "fsinfo", "fsinfo_guard": "fsinfo", "dfil_def": "dfil"}

# independent RNG streams per run
_INIT, _SHUFFLE, _NOISE, _PAIR, _CALIB, _EVAL, _DELTA = range(7)


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, step: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}, step {step}: {detail}")
        self.epoch = epoch
        self.step = step


@dataclass
class DataConfig:
    kind: str = "synthetic"
    path: str = ""
    n: int = 1600
    classes: int = 4
    height: int = 16
    width: int = 16
    jitter: float = 1.0
    aux_fraction: float = 0.2
    test_fraction: float = 0.2
    train_limit: int = 0
    test_limit: int = 0
    seed: int = 0

    def load(self) -> DatasetSplit:
        if self.kind == "synthetic":
            return synthetic_shapes(self.n, self.classes, (self.height, self.width), seed=self.seed,
                                    test_fraction=self.test_fraction, aux_fraction=self.aux_fraction,
                                    jitter=self.jitter)
        if self.kind == "cifar10":
            if not self.path:
                raise ValueError("data.path is required for cifar10")
            return load_cifar10(self.path, aux_fraction=self.aux_fraction, seed=self.seed,
                                train_limit=self.train_limit or None, test_limit=self.test_limit or None)
        raise ValueError(f"unknown dataset kind {self.kind!r}")


@dataclass
class TrainConfig:
    defense: str = "infodecom"
    retained: int = 54
    lam: float = 10.0
    fsinfo: float = -1.0
    dfil: float = 1.0
    nopeek_alpha: float = 0.5
    shredder_coeff: float = 1.0
    shredder_init: float = 0.1
    force_sigma: float | None = None
    calib_size: int = 8
    epochs: int = 30
    batch_size: int = 64
    lr: float = 3e-4
    weight_decay: float = 0.01
    seed: int = 0
    bottom_channels: int = 0
    bottom_gain: float = 0.0
    top_channels: int = 64
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        if self.defense not in DEFENSES:
            raise ValueError(f"defense must be one of {DEFENSES}, got {self.defense!r}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.calib_size <= 0:
            raise ValueError("calib_size must be positive")
        if self.defense == "infodecom":
            default_retained_set(self.retained)
            if self.lam < 0:
                raise ValueError("lambda must be non-negative")
        if self.defense == "dfil_def" and self.dfil <= 0:
            raise ValueError("dfil target must be positive")
        if self.force_sigma is not None and self.force_sigma < 0:
            raise ValueError("force_sigma must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def budget(self) -> PrivacyBudget | None:
        kind = NOISE_DEFENSES.get(self.defense)
        if kind is None:
            return None
        return PrivacyBudget(kind, self.fsinfo if kind == "fsinfo" else self.dfil)


def model_spec_for(config: TrainConfig, image_shape, num_classes: int) -> SplitModelSpec:
    hw = tuple(image_shape[1:])
    if config.defense == "infodecom":
        return frequency_model_spec(config.retained, num_classes, hw,
                                    bottom_channels=config.bottom_channels or 192,
                                    top_channels=config.top_channels)
    return pixel_model_spec(num_classes, hw, bottom_channels=config.bottom_channels or 16)


class DefensePipeline:
    """Everything the client runs: preprocessing, bottom model, and perturbation."""

    def __init__(self, kind: str, bottom: Sequential, retained=None, sigma: float = 0.0,
                 delta: Tensor | None = None, coef_mean=None, coef_std=None):
        self.kind = kind
        self.bottom = bottom
        self.retained = tuple(retained) if retained is not None else None
        self.sigma = float(sigma)
        self.delta = delta
        self.coef_mean = None if coef_mean is None else np.asarray(coef_mean, dtype=np.float64)
        self.coef_std = None if coef_std is None else np.asarray(coef_std, dtype=np.float64)

    def raw_coefficients(self, x: np.ndarray) -> np.ndarray:
        return decompose(to_unit_range(np.asarray(x, dtype=np.float64)), self.retained).data

    def fit_standardization(self, x: np.ndarray) -> None:
        """Per-channel mean/std of the retained coefficients over ``x`` (fixed afterwards)."""
        c = self.raw_coefficients(x)
        self.coef_mean = c.mean(axis=(0, 2, 3))
        self.coef_std = np.maximum(c.std(axis=(0, 2, 3)), STD_FLOOR)

    def preprocess(self, x: np.ndarray) -> np.ndarray:
        """Normalized images ``(N,3,H,W)`` to bottom-model inputs."""
        x = np.asarray(x, dtype=np.float64)
        if self.retained is None:
            return x
        c = self.raw_coefficients(x)
        if self.coef_mean is not None:
            c = (c - self.coef_mean[:, None, None]) / self.coef_std[:, None, None]
        return c

    def deterministic(self, inputs: Tensor) -> Tensor:
        """Bottom output plus any fixed additive tensor; no random noise."""
        z = self.bottom(inputs)
        if self.delta is not None:
            z = z + self.delta
        return z

    def __call__(self, inputs: Tensor) -> Tensor:
        return self.deterministic(inputs)

    @property
    def is_affine(self) -> bool:
        return self.bottom.is_affine

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.bottom.parameters())
        if self.delta is not None:
            params["delta"] = self.delta
        return params

    def smash(self, inputs, rng: np.random.Generator, sigma: float | None = None) -> Tensor:
        inputs = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        z = self.deterministic(inputs)
        s = self.sigma if sigma is None else sigma
        return perturb(z, s, rng) if s > 0 else z

    def client_forward(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        with no_grad():
            return self.smash(self.preprocess(x), rng).data

    @property
    def z_shape(self) -> tuple[int, ...]:
        return self.bottom.output_shape

    def fingerprint(self) -> str:
        fp = self.bottom.fingerprint()
        if self.delta is not None:
            fp = hashlib.sha256(fp.encode() + self.delta.data.tobytes()).hexdigest()
        return fp


@dataclass
class TrainReport:
    config: dict
    seed: int
    epochs: list = field(default_factory=list)
    calibration: list = field(default_factory=list)
    sigma: float | None = None
    accuracy: float = float("nan")
    wall_clock_s: float = 0.0

    def deterministic_view(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock_s")
        return d

    def to_jsonl(self, timing: bool = True) -> str:
        """One JSON record per line; ``timing=False`` drops the wall clock so reruns are byte-identical."""
        lines = [json.dumps({"record": "epoch", **e}, sort_keys=True) for e in self.epochs]
        lines += [json.dumps({"record": "calibration", **c}, sort_keys=True) for c in self.calibration]
        lines.append(json.dumps({"record": "summary", "config": self.config, "seed": self.seed,
                                 "sigma": self.sigma, "accuracy": self.accuracy,
                                 **({"wall_clock_s": self.wall_clock_s} if timing else {})}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainReport":
        epochs, calib, summary = [], [], None
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("record")
            if kind == "epoch":
                epochs.append(rec)
            elif kind == "calibration":
                calib.append(rec)
            else:
                summary = rec
        if summary is None:
            raise ValueError("report has no summary record")
        return cls(config=summary["config"], seed=summary["seed"], epochs=epochs, calibration=calib,
                   sigma=summary["sigma"], accuracy=summary["accuracy"],
                   wall_clock_s=summary.get("wall_clock_s", 0.0))


@dataclass
class TrainResult:
    pipeline: DefensePipeline
    top: Sequential
    spec: SplitModelSpec
    report: TrainReport
    data: DatasetSplit


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _calibrate_epoch(pipeline: DefensePipeline, inputs: np.ndarray, config: TrainConfig,
                     rng: np.random.Generator, epoch: int) -> NoiseScale:
    if config.force_sigma is not None:
        return NoiseScale(float(config.force_sigma), config.budget, epoch=epoch, calib_size=0)
    idx = np.sort(rng.choice(len(inputs), size=min(config.calib_size, len(inputs)), replace=False))
    return calibrate(pipeline, inputs[idx], config.budget, epoch=epoch, params=pipeline.parameters())


def train(config: TrainConfig, data: DatasetSplit | None = None) -> TrainResult:
    """Train a split model under ``config.defense``; returns the deployable pipeline and report."""
    t0 = time.perf_counter()
    data = data if data is not None else config.data.load()
    seed = config.seed
    spec = model_spec_for(config, data.image_shape, data.num_classes)
    bottom, top = build_split_model(spec, seed=seed)
    gain = config.bottom_gain or (DEFAULT_FREQ_GAIN if config.defense == "infodecom" else 1.0)
    for p in bottom.parameters().values():
        p.data *= gain
    retained = default_retained_set(config.retained) if config.defense == "infodecom" else None
    delta = None
    if config.defense == "shredder":
        delta = Tensor(_rng(seed, _DELTA).normal(0.0, config.shredder_init, size=bottom.output_shape),
                       requires_grad=True)
    pipeline = DefensePipeline(config.defense, bottom, retained, 0.0, delta)
    if retained is not None:
        pipeline.fit_standardization(data.train_x)

    train_in = pipeline.preprocess(data.train_x)
    train_y = data.train_y
    model_params = {**bottom.parameters(), **top.parameters()}
    opt = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    delta_opt = AdamState(lr=config.lr, weight_decay=0.0)
    shuffle_rng, noise_rng = _rng(seed, _SHUFFLE), _rng(seed, _NOISE)
    pair_rng, calib_rng = _rng(seed, _PAIR), _rng(seed, _CALIB)
    budget = config.budget
    report = TrainReport(config=config.to_dict(), seed=seed)

    for epoch in range(config.epochs):
        sigma = 0.0
        if budget is not None:
            scale = _calibrate_epoch(pipeline, train_in, config, calib_rng, epoch)
            sigma = scale.sigma
            report.calibration.append(scale.to_dict())
        elif config.force_sigma is not None:
            sigma = float(config.force_sigma)
        sums = {"ce": 0.0, "cl": 0.0, "reg": 0.0, "total": 0.0}
        steps = 0
        for step, idx in enumerate(iterate_batches(len(train_y), config.batch_size, shuffle_rng)):
            zero_grads(model_params)
            if delta is not None:
                delta.grad = None
            xin = Tensor(train_in[idx])
            z = pipeline.deterministic(xin)
            z_tilde = perturb(z, sigma, noise_rng) if sigma > 0 else z
            ce = cross_entropy(top(z_tilde), train_y[idx])
            loss = ce
            cl_val = reg_val = 0.0
            if config.defense == "infodecom" and config.lam > 0 and len(idx) > 1:
                cl = clustering_loss(z, random_pairing(len(idx), pair_rng))
                cl_val = cl.item()
                loss = loss + cl * config.lam
            elif config.defense == "nopeek" and config.nopeek_alpha > 0 and len(idx) > 1:
                dc = distance_correlation(data.train_x[idx], z)
                reg_val = dc.item()
                loss = loss + dc * config.nopeek_alpha
            elif config.defense == "shredder":
                pen = noise_norm_penalty(delta)
                reg_val = pen.item()
                if config.shredder_coeff != 0:
                    loss = loss - pen * config.shredder_coeff
            if not math.isfinite(loss.item()):
                raise DivergenceError(epoch, step, f"loss = {loss.item()}")
            try:
                loss.backward()
            except FloatingPointError as exc:
                raise DivergenceError(epoch, step, str(exc)) from None
            adam_step(model_params, {k: p.grad for k, p in model_params.items()}, opt)
            if delta is not None:
                adam_step({"delta": delta}, {"delta": delta.grad}, delta_opt)
            sums["ce"] += ce.item()
            sums["cl"] += cl_val
            sums["reg"] += reg_val
            sums["total"] += loss.item()
            steps += 1
        rec = {k: v / steps for k, v in sums.items()}
        rec.update(epoch=epoch, sigma=sigma)
        report.epochs.append(rec)
        log.info("epoch %d/%d ce=%.4f cl=%.4f sigma=%.4g", epoch + 1, config.epochs, rec["ce"], rec["cl"], sigma)

    # deployment keeps the last epoch's calibrated scale
    noisy = budget is not None or config.force_sigma is not None
    pipeline.sigma = sigma if noisy else 0.0
    report.sigma = pipeline.sigma if noisy else None
    report.accuracy = evaluate_utility(pipeline, top, data.test_x, data.test_y, seed=seed)
    report.wall_clock_s = time.perf_counter() - t0
    return TrainResult(pipeline, top, spec, report, data)


def train_infodecom(config: TrainConfig, data: DatasetSplit | None = None) -> TrainResult:
    if config.defense != "infodecom":
        raise ValueError("train_infodecom requires defense = 'infodecom'")
    return train(config, data)


def train_baseline(config: TrainConfig, data: DatasetSplit | None = None) -> TrainResult:
    if config.defense == "infodecom":
        raise ValueError("use train_infodecom for the infodecom defense")
    return train(config, data)


def predict(pipeline: DefensePipeline, top: Sequential, x: np.ndarray, seed: int = 0,
            batch_size: int = 256) -> np.ndarray:
    """Logits for normalized images through the deployed pipeline (fresh noise per call)."""
    rng = _rng(seed, _EVAL)
    out = []
    with no_grad():
        for idx in iterate_batches(len(x), batch_size):
            z = pipeline.smash(pipeline.preprocess(x[idx]), rng)
            out.append(top(z).data)
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate_utility(pipeline: DefensePipeline, top: Sequential, x: np.ndarray, y: np.ndarray,
                     seed: int = 0) -> float:
    if len(y) == 0:
        raise ValueError("test set is empty")
    logits = predict(pipeline, top, x, seed=seed)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


# -- persistence ------------------------------------------------------------------

def save_run(result: TrainResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = result.pipeline
    save_params(p.bottom.parameters(), out / "bottom.svpm")
    save_params(result.top.parameters(), out / "top.svpm")
    if p.delta is not None:
        save_params({"delta": p.delta}, out / "delta.svpm")
    deployment = {"defense": p.kind, "retained": list(p.retained) if p.retained else None,
                  "sigma": p.sigma, "model": result.spec.to_dict(), "config": result.report.config,
                  "coef_mean": None if p.coef_mean is None else p.coef_mean.tolist(),
                  "coef_std": None if p.coef_std is None else p.coef_std.tolist()}
    (out / "deployment.json").write_text(json.dumps(deployment, indent=2, sort_keys=True) + "\n")
    (out / "train_report.jsonl").write_text(result.report.to_jsonl(timing=False))
    (out / "timing.json").write_text(json.dumps({"train_wall_clock_s": result.report.wall_clock_s}) + "\n")
    return out


def load_run(run_dir) -> tuple[DefensePipeline, Sequential, SplitModelSpec, dict]:
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "deployment.json").read_text())
    spec = SplitModelSpec.from_dict(meta["model"])
    bottom, top = build_split_model(spec, seed=0)
    bottom.load_state(load_params(run_dir / "bottom.svpm"))
    top.load_state(load_params(run_dir / "top.svpm"))
    delta = None
    if (run_dir / "delta.svpm").exists():
        delta = Tensor(load_params(run_dir / "delta.svpm", {"delta": bottom.output_shape})["delta"],
                       requires_grad=True)
    pipeline = DefensePipeline(meta["defense"], bottom, meta["retained"], meta["sigma"], delta,
                               meta.get("coef_mean"), meta.get("coef_std"))
    return pipeline, top, spec, meta
