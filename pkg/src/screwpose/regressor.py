"""Keypoint regressor: a from-scratch MLP trained with SGD + momentum.

The network maps a flattened standard-pose patch to the 6 keypoints (12
scalars, fixed order A1..A3, B1..B3, x before y). Parameters live in
float64; checkpoints quantize to float32, and training returns the
quantized best-validation snapshot so results are identical whether or
not a checkpoint visits disk.

All random draws (init, augmentation, shuffling) go through the
inverse-CDF sampler so runs reproduce across platforms.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import ImagePose, ProjectionGeometry
from .noise import Annotation, normal_draws
from .patchify import (
    EstimateOutOfImage,
    Patch,
    PatchSpec,
    extract_patch,
    image_to_patch_coords,
)
from .phantom import ScrewModel, screw_keypoints

log = logging.getLogger(__name__)


class ShapeMismatch(Exception):
    pass


class DivergenceDetected(Exception):
    """Training loss left the finite range; the learning rate is too hot."""


@dataclass
class KeypointSet:
    """Six points in normalized patch coordinates, order A1 A2 A3 B1 B2 B3."""

    points: np.ndarray  # (6, 2)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(6, 2)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("keypoints must be finite")

    def flat(self) -> np.ndarray:
        return self.points.reshape(12).copy()

    @staticmethod
    def from_flat(v) -> "KeypointSet":
        return KeypointSet(np.asarray(v, dtype=np.float64).reshape(6, 2))


@dataclass
class NetworkConfig:
    input_size: int = 64 * 32
    hidden: tuple[int, ...] = (256, 64)
    output_size: int = 12
    leaky_slope: float = 0.01
    seed: int = 0
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 40
    decay_epochs: tuple[int, ...] = (20, 32)
    decay_factor: float = 0.3

    def __post_init__(self):
        if self.output_size != 12:
            raise ValueError("output width is fixed to 12 (6 keypoints)")
        if min(self.input_size, self.batch_size, self.epochs) <= 0:
            raise ValueError("sizes must be positive")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("bad optimizer hyperparameters")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_size, *self.hidden, self.output_size)

    def to_json(self) -> dict:
        return {
            "input_size": self.input_size,
            "hidden": list(self.hidden),
            "output_size": self.output_size,
            "leaky_slope": self.leaky_slope,
            "seed": self.seed,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "decay_epochs": list(self.decay_epochs),
            "decay_factor": self.decay_factor,
        }

    @staticmethod
    def from_json(d: dict) -> "NetworkConfig":
        kw = dict(d)
        for key in ("hidden", "decay_epochs"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return NetworkConfig(**kw)


def config_hash(config: NetworkConfig) -> str:
    return hashlib.sha256(
        json.dumps(config.to_json(), sort_keys=True).encode()).hexdigest()[:12]


class MLPRegressor:
    """Plain fully connected network; weights[i] has shape (fan_in, fan_out)."""

    def __init__(self, config: NetworkConfig, weights, biases):
        self.config = config
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        sizes = config.layer_sizes
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ShapeMismatch(f"layer {i}: got {w.shape}/{b.shape}")

    @classmethod
    def initialize(cls, config: NetworkConfig) -> "MLPRegressor":
        rng = np.random.default_rng(config.seed)
        sizes = config.layer_sizes
        weights, biases = [], []
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            last = i == len(sizes) - 2
            # He-style scale for the hidden layers, gentler for the output
            std = (1.0 / np.sqrt(fan_in)) if last else np.sqrt(2.0 / fan_in)
            w = normal_draws(rng, fan_in * fan_out).reshape(fan_in, fan_out) * std
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(config, weights, biases)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.config.input_size:
            raise ShapeMismatch(
                f"input width {x.shape[1]} != {self.config.input_size}")
        return x if not single else x  # caller tracks single-ness

    def _forward_full(self, x: np.ndarray):
        """Returns (pre-activations per layer, activations per layer, output)."""
        a = x
        zs, acts = [], [a]
        slope = self.config.leaky_slope
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            zs.append(z)
            a = z if i == n_layers - 1 else np.where(z > 0.0, z, slope * z)
            acts.append(a)
        return zs, acts

    def forward_array(self, x) -> np.ndarray:
        single = np.asarray(x).ndim == 1
        xb = self._check_input(x)
        _, acts = self._forward_full(xb)
        out = acts[-1]
        return out[0] if single else out

    def predict(self, patch: Patch) -> np.ndarray:
        """Estimator-facing inference on one patch; returns the flat 12-vector."""
        return self.forward_array(patch.pixels.reshape(-1))

    def gradients(self, x, target):
        """Exact MSE gradients (mean over batch elements and the 12 outputs)."""
        xb = self._check_input(x)
        tb = np.atleast_2d(np.asarray(target, dtype=np.float64))
        if tb.shape != (xb.shape[0], self.config.output_size):
            raise ShapeMismatch(f"target shape {tb.shape} does not match batch")
        zs, acts = self._forward_full(xb)
        out = acts[-1]
        diff = out - tb
        loss = float((diff * diff).mean())
        n_elems = diff.size
        slope = self.config.leaky_slope

        grad_w = [None] * len(self.weights)
        grad_b = [None] * len(self.biases)
        dz = 2.0 * diff / n_elems
        for i in range(len(self.weights) - 1, -1, -1):
            grad_w[i] = acts[i].T @ dz
            grad_b[i] = dz.sum(axis=0)
            if i > 0:
                da = dz @ self.weights[i].T
                dz = da * np.where(zs[i - 1] > 0.0, 1.0, slope)
        return grad_w, grad_b, loss

    def copy(self) -> "MLPRegressor":
        return MLPRegressor(self.config, [w.copy() for w in self.weights],
                            [b.copy() for b in self.biases])


def forward(model: MLPRegressor, patch) -> KeypointSet:
    """Evaluate the network on a patch (Patch or raw pixel array)."""
    pixels = getattr(patch, "pixels", patch)
    return KeypointSet.from_flat(model.forward_array(
        np.asarray(pixels).reshape(-1)))


def backward(model: MLPRegressor, patch, target):
    """MSE gradients for a single patch/target pair."""
    pixels = getattr(patch, "pixels", patch)
    t = target.flat() if isinstance(target, KeypointSet) else target
    return model.gradients(np.asarray(pixels).reshape(1, -1),
                           np.asarray(t).reshape(1, -1))


# ------------------------------------------------------------ checkpoints

_CKPT_MAGIC = "screwpose-checkpoint-v1"


@dataclass
class ModelCheckpoint:
    config: NetworkConfig
    epoch: int
    val_error: float
    weights: list  # float32 arrays
    biases: list   # float32 arrays

    def to_model(self) -> MLPRegressor:
        return MLPRegressor(self.config,
                            [w.astype(np.float64) for w in self.weights],
                            [b.astype(np.float64) for b in self.biases])

    @staticmethod
    def snapshot(model: MLPRegressor, epoch: int,
                 val_error: float) -> "ModelCheckpoint":
        return ModelCheckpoint(
            config=model.config,
            epoch=epoch,
            val_error=float(val_error),
            weights=[w.astype(np.float32) for w in model.weights],
            biases=[b.astype(np.float32) for b in model.biases],
        )

    def save(self, path) -> None:
        """Header JSON line + little-endian float32 blob in layer order."""
        header = {
            "magic": _CKPT_MAGIC,
            "config": self.config.to_json(),
            "config_hash": config_hash(self.config),
            "epoch": self.epoch,
            "val_error": self.val_error,
        }
        blob = b"".join(
            np.ascontiguousarray(arr, dtype="<f4").tobytes()
            for pair in zip(self.weights, self.biases) for arr in pair)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            f.write(blob)

    @staticmethod
    def load(path) -> "ModelCheckpoint":
        with open(path, "rb") as f:
            header = json.loads(f.readline().decode())
            if header.get("magic") != _CKPT_MAGIC:
                raise ValueError(f"{path} is not a checkpoint file")
            blob = f.read()
        config = NetworkConfig.from_json(header["config"])
        sizes = config.layer_sizes
        weights, biases = [], []
        offset = 0
        flat = np.frombuffer(blob, dtype="<f4")
        for i in range(len(sizes) - 1):
            n_w = sizes[i] * sizes[i + 1]
            weights.append(flat[offset:offset + n_w].reshape(
                sizes[i], sizes[i + 1]).copy())
            offset += n_w
            biases.append(flat[offset:offset + sizes[i + 1]].copy())
            offset += sizes[i + 1]
        if offset != flat.size:
            raise ValueError("checkpoint blob size mismatch")
        return ModelCheckpoint(config, int(header["epoch"]),
                               float(header["val_error"]), weights, biases)


# ---------------------------------------------------------- training data

@dataclass
class AugmentSpec:
    """Deviations applied to the annotated pose to form initial estimates."""

    position_sigma_px: float = 5.0
    alpha_sigma_deg: float = 10.0

    def to_json(self) -> dict:
        return {"position_sigma_px": self.position_sigma_px,
                "alpha_sigma_deg": self.alpha_sigma_deg}

    @staticmethod
    def from_json(d: dict) -> "AugmentSpec":
        return AugmentSpec(**d)


@dataclass
class TrainingSample:
    pixels: np.ndarray  # (patch_height, patch_width) float32
    target: np.ndarray  # (12,) float64
    image_id: str


def sample_initial_estimate(ip: ImagePose, augment: AugmentSpec,
                            rng: np.random.Generator) -> ImagePose:
    """Perturbed starting pose; same distribution at train and eval time."""
    z = normal_draws(rng, 3)
    return ip.replace(
        u=ip.u + augment.position_sigma_px * z[0],
        v=ip.v + augment.position_sigma_px * z[1],
        alpha_deg=ip.alpha_deg + augment.alpha_sigma_deg * z[2],
    )


def keypoint_targets(kp_pixels: np.ndarray, frame) -> np.ndarray:
    """Project keypoint pixels through a patch frame to the flat 12-vector."""
    return image_to_patch_coords(kp_pixels, frame).reshape(12)


def make_training_set(images, annotations, g: ProjectionGeometry,
                      screw: ScrewModel, spec: PatchSpec,
                      augment: AugmentSpec, patches_per_image: int,
                      master_seed: int):
    """Yield TrainingSamples: perturbed-estimate patches with propagated targets.

    images: iterable of (image_id, pixel array); annotations: image_id ->
    list of Annotation. Each (image, annotation) pair contributes
    patches_per_image samples; estimates that leave the image are skipped
    and counted in the log.
    """
    skipped = 0
    for image_id, pixels in images:
        for k, ann in enumerate(annotations.get(image_id, [])):
            kp_px = screw_keypoints(screw, ann.world_pose, g).pixels
            rng = np.random.default_rng(
                np.random.SeedSequence([master_seed & 0x7FFFFFFF,
                                        _stable_id(image_id), k]))
            for _ in range(patches_per_image):
                est = sample_initial_estimate(ann.image_pose, augment, rng)
                try:
                    patch = extract_patch(pixels, est, spec)
                except EstimateOutOfImage:
                    skipped += 1
                    continue
                yield TrainingSample(
                    pixels=patch.pixels.astype(np.float32),
                    target=keypoint_targets(kp_px, patch.frame),
                    image_id=image_id,
                )
    if skipped:
        log.info("make_training_set: skipped %d out-of-image estimates", skipped)


def _stable_id(image_id: str) -> int:
    return int.from_bytes(
        hashlib.sha256(image_id.encode()).digest()[:4], "little")


def samples_to_arrays(stream) -> tuple[np.ndarray, np.ndarray]:
    """Materialize a sample stream into (X, Y) training matrices."""
    xs, ys = [], []
    for s in stream:
        xs.append(s.pixels.reshape(-1))
        ys.append(s.target)
    if not xs:
        raise ValueError("empty training stream")
    return np.stack(xs).astype(np.float32), np.stack(ys).astype(np.float64)


# ------------------------------------------------------------------ train

@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    train_losses: list
    val_errors: list


def train(config: NetworkConfig, train_stream, val_stream) -> TrainResult:
    """Minibatch SGD with momentum; returns the best-validation checkpoint.

    Fully deterministic given config.seed: init, shuffle order and the
    floating-point schedule are all fixed.
    """
    x_train, y_train = (train_stream if isinstance(train_stream, tuple)
                        else samples_to_arrays(train_stream))
    x_val, y_val = (val_stream if isinstance(val_stream, tuple)
                    else samples_to_arrays(val_stream))
    if x_train.shape[0] == 0 or x_val.shape[0] == 0:
        raise ValueError("empty training or validation stream")

    model = MLPRegressor.initialize(config)
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    lr = config.learning_rate

    best: ModelCheckpoint | None = None
    train_losses: list[float] = []
    val_errors: list[float] = []
    n = x_train.shape[0]

    for epoch in range(1, config.epochs + 1):
        if epoch in config.decay_epochs:
            lr *= config.decay_factor
        order = np.random.default_rng(
            np.random.SeedSequence([config.seed, epoch])).permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = x_train[idx].astype(np.float64)
            yb = y_train[idx]
            with np.errstate(invalid="ignore", over="ignore"):
                gw, gb, loss = model.gradients(xb, yb)
            if not np.isfinite(loss):
                raise DivergenceDetected(
                    f"non-finite loss at epoch {epoch} (lr={lr:g})")
            for i in range(len(model.weights)):
                vel_w[i] = config.momentum * vel_w[i] - lr * gw[i]
                vel_b[i] = config.momentum * vel_b[i] - lr * gb[i]
                model.weights[i] += vel_w[i]
                model.biases[i] += vel_b[i]
            epoch_loss += loss
            n_batches += 1
        train_losses.append(epoch_loss / max(n_batches, 1))

        val_err = evaluate_mse(model, x_val, y_val)
        val_errors.append(val_err)
        if best is None or val_err < best.val_error:
            best = ModelCheckpoint.snapshot(model, epoch, val_err)
        log.debug("epoch %d: train %.6f val %.6f", epoch,
                  train_losses[-1], val_err)

    return TrainResult(checkpoint=best, train_losses=train_losses,
                       val_errors=val_errors)


def evaluate_mse(model: MLPRegressor, x: np.ndarray, y: np.ndarray,
                 batch: int = 1024) -> float:
    total = 0.0
    count = 0
    for start in range(0, x.shape[0], batch):
        xb = x[start:start + batch].astype(np.float64)
        out = model.forward_array(xb)
        diff = out - y[start:start + batch]
        total += float((diff * diff).sum())
        count += diff.size
    return total / count
