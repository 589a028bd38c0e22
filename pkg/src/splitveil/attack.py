"""Data-reconstruction attack: an inverse network trained on auxiliary data.

The attacker has black-box query access to the deployed client pipeline
(preprocessing, bottom model, noise) and a labelled auxiliary set drawn from
the training distribution. It learns a decoder from the perturbed smashed
data back to the normalized RGB image and is scored by MSE on held-out
test images.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .datasets import denormalize, iterate_batches
from .defense import DefensePipeline
from .engine import AdamState, Tensor, adam_step, no_grad, zero_grads
from .losses import mse_loss, per_sample_mse
from .models import Sequential, build_decoder

_DEC_SHUFFLE, _DEC_NOISE, _DEC_EVAL = 101, 102, 103


@dataclass
class AttackConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.0
    width: int = 32
    seed: int = 0
    grid_images: int = 8

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown attack config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AttackReport:
    config: dict
    seed: int
    mean_mse: float
    per_image_mse: list
    loss_history: list = field(default_factory=list)
    pipeline_fingerprint: str = ""
    grid_path: str | None = None
    wall_clock_s: float = 0.0

    def deterministic_view(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock_s")
        d.pop("grid_path")
        return d

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"


def _query(pipeline: DefensePipeline, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One black-box query: fresh noise each call, nothing flows back into the pipeline."""
    with no_grad():
        return pipeline.smash(pipeline.preprocess(x), rng).data


class InverseNetwork:
    """Decoder preceded by a fixed per-channel standardization of the observed smashed data.

    The statistics come from one pass of queries over the auxiliary set, so
    the attack does not depend on the overall scale of the defended ``z``.
    """

    def __init__(self, decoder: Sequential, mean: np.ndarray, std: np.ndarray):
        self.decoder = decoder
        self.mean = mean
        self.std = std

    def __call__(self, z) -> Tensor:
        z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
        return self.decoder(Tensor((z - self.mean) / self.std))

    def parameters(self) -> dict[str, Tensor]:
        return self.decoder.parameters()


def train_inverse_network(pipeline: DefensePipeline, aux_x: np.ndarray, config: AttackConfig
                          ) -> tuple[InverseNetwork, list[float]]:
    """Fit a decoder from perturbed smashed data to the normalized raw image."""
    if len(aux_x) == 0:
        raise ValueError("auxiliary set is empty")
    image_shape = tuple(aux_x.shape[1:])
    decoder = build_decoder(pipeline.z_shape, image_shape, seed=config.seed, width=config.width)
    noise_rng = np.random.default_rng([config.seed, _DEC_NOISE])
    observed = np.concatenate([_query(pipeline, aux_x[idx], noise_rng)
                               for idx in iterate_batches(len(aux_x), 256)])
    axes = (0,) + tuple(range(2, observed.ndim))
    net = InverseNetwork(decoder, observed.mean(axis=axes, keepdims=True)[0],
                         np.maximum(observed.std(axis=axes, keepdims=True)[0], 1e-12))
    params = net.parameters()
    opt = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    shuffle_rng = np.random.default_rng([config.seed, _DEC_SHUFFLE])
    history = []
    for _ in range(config.epochs):
        total, count = 0.0, 0
        for idx in iterate_batches(len(aux_x), config.batch_size, shuffle_rng):
            z = _query(pipeline, aux_x[idx], noise_rng)
            zero_grads(params)
            loss = mse_loss(net(z), aux_x[idx])
            if not np.isfinite(loss.item()):
                raise FloatingPointError("inverse network training diverged")
            loss.backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, opt)
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / count)
    return net, history


def reconstruct(decoder: InverseNetwork, pipeline: DefensePipeline, x: np.ndarray, seed: int = 0,
                batch_size: int = 256) -> np.ndarray:
    rng = np.random.default_rng([seed, _DEC_EVAL])
    out = []
    with no_grad():
        for idx in iterate_batches(len(x), batch_size):
            out.append(decoder(_query(pipeline, x[idx], rng)).data)
    return np.concatenate(out)


def save_grid(originals: np.ndarray, recons: np.ndarray, path, scale: int = 4) -> Path:
    """PNG with originals on the top row and reconstructions below (normalized inputs)."""
    from PIL import Image

    n = len(originals)
    rows = [np.concatenate(list(denormalize(block).transpose(0, 2, 3, 1)), axis=1)
            for block in (originals, recons)] if n else []
    grid = np.clip(np.concatenate(rows, axis=0), 0.0, 1.0) if rows else np.zeros((1, 1, 3))
    img = Image.fromarray(np.round(grid * 255).astype(np.uint8))
    if scale > 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path


def score(x: np.ndarray, recons: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean and per-image MSE; the mean is taken over the per-image values."""
    errors = per_sample_mse(x, recons)
    if errors.size == 0:
        raise ValueError("cannot score an empty set")
    return float(errors.mean()), errors


def run_attack(pipeline: DefensePipeline, aux_x: np.ndarray, test_x: np.ndarray,
               config: AttackConfig | None = None, grid_path=None,
               decoder: InverseNetwork | None = None) -> tuple[AttackReport, InverseNetwork]:
    """Train the inverse network on ``aux_x`` (unless ``decoder`` is given) and score it on ``test_x``.

    The pipeline's parameters are hashed before and after; any change is an error.
    """
    config = config or AttackConfig()
    if len(test_x) == 0:
        raise ValueError("victim test set is empty")
    t0 = time.perf_counter()
    before = pipeline.fingerprint()
    history: list[float] = []
    if decoder is None:
        decoder, history = train_inverse_network(pipeline, aux_x, config)
    recons = reconstruct(decoder, pipeline, test_x, seed=config.seed)
    if pipeline.fingerprint() != before:
        raise RuntimeError("attack modified the defended pipeline's parameters")
    mean, errors = score(test_x, recons)
    saved = None
    if grid_path is not None:
        k = min(config.grid_images, len(test_x))
        saved = str(save_grid(test_x[:k], recons[:k], grid_path))
    report = AttackReport(config=config.to_dict(), seed=config.seed, mean_mse=mean,
                          per_image_mse=errors.tolist(), loss_history=history,
                          pipeline_fingerprint=before, grid_path=saved,
                          wall_clock_s=time.perf_counter() - t0)
    return report, decoder
