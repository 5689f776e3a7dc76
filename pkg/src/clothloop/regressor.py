"""PointNet-style point regressor with hand-written backpropagation.

A shared per-point encoder (3 -> 64 -> 128 by default) feeds a symmetric
max-pool. Per-point heads decode ``[first encoder layer || global feature]``
(192 -> 128 -> outputs); the pooled head decodes the global feature alone.
Clouds are mean-centered before the encoder.

With default widths the encoder holds 8,576 parameters, a per-point decoder
24,704 + 129 x outputs, and a pooled decoder 16,512 + 129 x outputs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike

from clothloop.errors import InputError, NumericalError
from clothloop.mesh import FloatArray, PointCloud
from clothloop.nn import Adam, Params, check_finite, relu, sigmoid, warmup_cosine
from clothloop.util.enum.head_kind import HeadKind
from clothloop.util.serialize import read_arrays, write_arrays

logger = logging.getLogger("clothloop")

@dataclass(eq=False)
class RegressorParams:
    """Weights of one regressor head plus what is needed to use them."""

    head: HeadKind
    outputs: int
    weights: Params
    loss: str = ""
    triples: str = ""

    def __post_init__(self) -> None:
        """Fill the default loss and validate shapes."""
        if not self.loss:
            self.loss = self.head.loss
        if self.loss not in {"l1", "l2"}:
            msg = f"unknown loss {self.loss!r}"
            raise InputError(msg)
        if self.head is HeadKind.VECTOR and self.outputs != 3:  # noqa: PLR2004
            msg = "vector heads have exactly 3 outputs"
            raise InputError(msg)
        if self.triples and len(self.triples) * 3 != self.outputs:
            msg = f"triple layout {self.triples!r} does not cover {self.outputs} outputs"
            raise InputError(msg)
        w = self.weights
        enc1, enc2, dec1 = w["enc1_W"].shape[1], w["enc2_W"].shape[1], w["dec1_W"].shape[1]
        dec_in = enc1 + enc2 if self.head.per_point else enc2
        expected = {
            "enc1_W": (3, enc1),
            "enc1_b": (enc1,),
            "enc2_W": (enc1, enc2),
            "enc2_b": (enc2,),
            "dec1_W": (dec_in, dec1),
            "dec1_b": (dec1,),
            "out_W": (dec1, self.outputs),
            "out_b": (self.outputs,),
        }
        for name, shape in expected.items():
            if w[name].shape != shape:
                msg = f"{name} has shape {w[name].shape}; expected {shape}"
                raise InputError(msg)
            check_finite(name, w[name])

    @classmethod
    def init(
        cls,
        head: HeadKind,
        outputs: int,
        rng: np.random.Generator,
        encoder: tuple[int, int] = (64, 128),
        decoder: int = 128,
        triples: str = "",
    ) -> RegressorParams:
        """He-uniform initialization.

        Args:
            head: Output head kind.
            outputs: K for heatmaps, 3 for vectors, any multiple of 3 for pooled.
            rng: Random generator.
            encoder: Widths of the two encoder layers.
            decoder: Width of the hidden decoder layer.
            triples: Pooled layout; one ``p`` (point) or ``d`` (direction) per 3 outputs.

        Returns:
            RegressorParams: Fresh parameters.
        """
        enc1, enc2 = encoder
        dec_in = enc1 + enc2 if head.per_point else enc2
        shapes = {"enc1": (3, enc1), "enc2": (enc1, enc2), "dec1": (dec_in, decoder), "out": (decoder, outputs)}
        weights: Params = {}
        for name, (fan_in, fan_out) in shapes.items():
            bound = math.sqrt(6.0 / fan_in) * (0.1 if name == "out" else 1.0)
            weights[f"{name}_W"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            weights[f"{name}_b"] = np.zeros(fan_out)
        return cls(head, outputs, weights, triples=triples)

    @property
    def parameter_count(self) -> int:
        """Total number of scalars."""
        return int(sum(a.size for a in self.weights.values()))

    def copy(self) -> RegressorParams:
        """Deep copy."""
        return RegressorParams(
            self.head, self.outputs, {k: v.copy() for k, v in self.weights.items()}, self.loss, self.triples
        )

    def save(self, path: Path) -> None:
        """Write the binary parameter file."""
        meta = {
            "kind": "regressor",
            "head": self.head.value,
            "outputs": self.outputs,
            "loss": self.loss,
            "triples": self.triples,
            "normalization": {"center": "mean", "scale": 1.0},
        }
        write_arrays(path, meta, {name: self.weights[name] for name in sorted(self.weights)})

    @classmethod
    def load(cls, path: Path) -> RegressorParams:
        """Read a parameter file written by :meth:`save`."""
        meta, arrays = read_arrays(path)
        if meta.get("kind") != "regressor":
            msg = f"{path} does not hold regressor parameters"
            raise InputError(msg)
        return cls(HeadKind(meta["head"]), int(meta["outputs"]), arrays, meta["loss"], meta.get("triples", ""))


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and augmentation settings."""

    epochs: int = 80
    batch_size: int = 24
    learning_rate: float = 1e-4
    warmup_epochs: int = 10
    noise: float = 0.002
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_deg: float = 15.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    encoder: tuple[int, int] = (64, 128)
    decoder: int = 128

    def __post_init__(self) -> None:
        """Check ranges."""
        if self.epochs < 1 or self.batch_size < 1:
            msg = "epochs and batch size must be at least 1"
            raise InputError(msg)
        if self.learning_rate < 0:
            msg = "learning rate must not be negative"
            raise InputError(msg)

    @classmethod
    def from_settings(cls, settings: dict[str, Any]) -> TrainConfig:
        """Build from a converted settings dictionary."""
        return cls(
            epochs=int(settings["EPOCHS"]),
            batch_size=int(settings["BATCH_SIZE"]),
            learning_rate=float(settings["LEARNING_RATE"]),
            warmup_epochs=int(settings["WARMUP_EPOCHS"]),
            noise=float(settings["AUG_NOISE"]),
            scale_range=(float(settings["AUG_SCALE_MIN"]), float(settings["AUG_SCALE_MAX"])),
            rotation_deg=float(settings["AUG_ROTATION_DEG"]),
            encoder=(int(settings["ENCODER_WIDTH_1"]), int(settings["ENCODER_WIDTH_2"])),
            decoder=int(settings["DECODER_WIDTH"]),
        )

    @property
    def augments(self) -> bool:
        """Whether any augmentation is active."""
        return self.noise > 0 or self.scale_range != (1.0, 1.0) or self.rotation_deg > 0

    def learning_rate_at(self, epoch: int) -> float:
        """Scheduled learning rate for a 0-based epoch."""
        return warmup_cosine(epoch, self.epochs, self.warmup_epochs, self.learning_rate)


@dataclass(eq=False)
class Sample:
    """One training pair: points with per-point or pooled targets."""

    points: FloatArray
    target: FloatArray
    mask: FloatArray | None = None

    def __post_init__(self) -> None:
        """Normalize dtypes."""
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.target = np.asarray(self.target, dtype=float)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=float)


@dataclass
class _Cache:
    x: FloatArray
    pre1: FloatArray
    h1: FloatArray
    pre2: FloatArray
    argmax: np.ndarray
    dec_in: FloatArray
    pre3: FloatArray
    d1: FloatArray
    raw: FloatArray
    norm: FloatArray | None = None


def _point_triples(params: RegressorParams) -> np.ndarray:
    """Indices of pooled outputs that are points (shifted by the centroid)."""
    return np.array([i for i, kind in enumerate(params.triples) if kind == "p"], dtype=np.int64)


def _forward(params: RegressorParams, points: FloatArray) -> tuple[FloatArray, _Cache]:
    """Batched forward pass on (B, N, 3) points."""
    w = params.weights
    centroid = points.mean(axis=1, keepdims=True)
    x = points - centroid
    pre1 = x @ w["enc1_W"] + w["enc1_b"]
    h1 = relu(pre1)
    check_finite("enc1", h1)
    pre2 = h1 @ w["enc2_W"] + w["enc2_b"]
    h2 = relu(pre2)
    check_finite("enc2", h2)
    argmax = h2.argmax(axis=1)
    g = np.take_along_axis(h2, argmax[:, None, :], axis=1)[:, 0, :]
    if not params.head.per_point:
        dec_in = g
    else:
        dec_in = np.concatenate([h1, np.broadcast_to(g[:, None, :], (*h1.shape[:2], g.shape[1]))], axis=2)
    pre3 = dec_in @ w["dec1_W"] + w["dec1_b"]
    d1 = relu(pre3)
    check_finite("dec1", d1)
    raw = d1 @ w["out_W"] + w["out_b"]
    check_finite("out", raw)
    cache = _Cache(x, pre1, h1, pre2, argmax, dec_in, pre3, d1, raw)
    if params.head is HeadKind.HEATMAP:
        y = sigmoid(raw)
    elif params.head is HeadKind.VECTOR:
        cache.norm = np.maximum(np.linalg.norm(raw, axis=-1, keepdims=True), 1e-12)
        y = raw / cache.norm
    else:
        y = raw.copy()
        shifted = _point_triples(params)
        if len(shifted):
            y3 = y.reshape(len(y), -1, 3)
            y3[:, shifted, :] += centroid
    return y, cache


def forward(params: RegressorParams, cloud: PointCloud | ArrayLike) -> FloatArray:
    """Outputs for one cloud.

    Returns:
        FloatArray: (N, outputs) per-point values, or (outputs,) for the pooled head.

    Raises:
        NumericalError: If a layer produces NaN or inf (the message names it).
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        msg = "cannot run the regressor on an empty cloud"
        raise InputError(msg)
    y, _ = _forward(params, points[None])
    return y[0]


def _loss_and_grads(
    params: RegressorParams, points: FloatArray, targets: FloatArray, masks: FloatArray | None, weight: float
) -> tuple[float, Params]:
    """Mean loss over a stacked batch and its exact gradients."""
    y, c = _forward(params, points)
    w = params.weights
    batch = len(points)
    diff = y - targets
    if params.head is HeadKind.POOLED:
        mask = np.ones_like(diff) if masks is None else masks
        denom = np.maximum(mask.sum(axis=-1, keepdims=True), 1.0)
        per_entry = mask / denom
    else:
        per_entry = np.full_like(diff, 1.0 / (diff.shape[1] * diff.shape[2]))
    if params.loss == "l2":
        loss = weight * float(np.sum(per_entry * diff**2)) / batch
        dy = weight * 2.0 * per_entry * diff / batch
    else:
        loss = weight * float(np.sum(per_entry * np.abs(diff))) / batch
        dy = weight * per_entry * np.sign(diff) / batch
    if params.head is HeadKind.HEATMAP:
        draw = dy * y * (1.0 - y)
    elif params.head is HeadKind.VECTOR:
        draw = (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / c.norm
    else:
        draw = dy

    grads: Params = {}
    hid = c.d1.shape[-1]
    grads["out_W"] = c.d1.reshape(-1, hid).T @ draw.reshape(-1, params.outputs)
    grads["out_b"] = draw.reshape(-1, params.outputs).sum(axis=0)
    dpre3 = (draw @ w["out_W"].T) * (c.pre3 > 0)
    grads["dec1_W"] = c.dec_in.reshape(-1, c.dec_in.shape[-1]).T @ dpre3.reshape(-1, hid)
    grads["dec1_b"] = dpre3.reshape(-1, hid).sum(axis=0)
    ddec = dpre3 @ w["dec1_W"].T
    enc1 = c.h1.shape[-1]
    if not params.head.per_point:
        dg = ddec
        dh1 = np.zeros_like(c.h1)
    else:
        dh1 = ddec[..., :enc1].copy()
        dg = ddec[..., enc1:].sum(axis=1)
    dh2 = np.zeros_like(c.pre2)
    np.put_along_axis(dh2, c.argmax[:, None, :], dg[:, None, :], axis=1)
    dpre2 = dh2 * (c.pre2 > 0)
    enc2 = c.pre2.shape[-1]
    grads["enc2_W"] = c.h1.reshape(-1, enc1).T @ dpre2.reshape(-1, enc2)
    grads["enc2_b"] = dpre2.reshape(-1, enc2).sum(axis=0)
    dh1 += dpre2 @ w["enc2_W"].T
    dpre1 = dh1 * (c.pre1 > 0)
    grads["enc1_W"] = c.x.reshape(-1, 3).T @ dpre1.reshape(-1, enc1)
    grads["enc1_b"] = dpre1.reshape(-1, enc1).sum(axis=0)
    return loss, grads


def gradients(params: RegressorParams, batch: list[Sample], weight: float = 1.0) -> tuple[float, Params]:
    """Mean loss over ``batch`` and exact gradients for every parameter.

    Samples with equal point counts are stacked; groups are combined in
    proportion to their size.

    Args:
        params: Current parameters.
        batch: Training samples.
        weight: Loss multiplier.

    Returns:
        tuple: (loss, gradients keyed like ``params.weights``).
    """
    if not batch:
        msg = "empty batch"
        raise InputError(msg)
    groups: dict[int, list[Sample]] = {}
    for sample in batch:
        groups.setdefault(len(sample.points), []).append(sample)
    total_loss = 0.0
    total: Params = {k: np.zeros_like(v) for k, v in params.weights.items()}
    for samples in groups.values():
        points = np.stack([s.points for s in samples])
        targets = np.stack([s.target for s in samples])
        masks = None
        if params.head is HeadKind.POOLED and any(s.mask is not None for s in samples):
            masks = np.stack([np.ones_like(s.target) if s.mask is None else s.mask for s in samples])
        share = len(samples) / len(batch)
        loss, grads = _loss_and_grads(params, points, targets, masks, weight * share)
        total_loss += loss
        for k, g in grads.items():
            total[k] += g
    return total_loss, total


def _rotation_z(angle: float) -> FloatArray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment(sample: Sample, params: RegressorParams, cfg: TrainConfig, rng: np.random.Generator) -> Sample:
    """Random scale and z-rotation about the centroid plus point jitter.

    Direction targets rotate with the cloud; pooled point targets are scaled
    and rotated about the same centroid.
    """
    if not cfg.augments:
        return sample
    scale = rng.uniform(*cfg.scale_range)
    rot = _rotation_z(math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)))
    centroid = sample.points.mean(axis=0)
    points = scale * (sample.points - centroid) @ rot.T + centroid
    if cfg.noise > 0:
        points = points + rng.normal(0.0, cfg.noise, points.shape)
    target = sample.target
    if params.head is HeadKind.VECTOR:
        target = target @ rot.T
    elif params.head is HeadKind.POOLED and params.triples:
        t3 = target.reshape(-1, 3).copy()
        for i, kind in enumerate(params.triples):
            t3[i] = scale * (t3[i] - centroid) @ rot.T + centroid if kind == "p" else t3[i] @ rot.T
        target = t3.reshape(target.shape)
    return Sample(points, target, sample.mask)


def train(
    params: RegressorParams,
    dataset: list[Sample],
    cfg: TrainConfig,
    rng: np.random.Generator,
    weight: float = 1.0,
) -> tuple[RegressorParams, list[float]]:
    """Minibatch Adam with warm-up plus cosine schedule and augmentation.

    Args:
        params: Starting parameters (not modified).
        dataset: Training samples.
        cfg: Optimization settings.
        rng: Random generator for shuffling and augmentation.
        weight: Loss multiplier.

    Returns:
        tuple: Trained parameters and the per-epoch sample-weighted mean loss.

    Raises:
        NumericalError: If a batch loss is NaN (message names epoch and batch).
    """
    if not dataset:
        msg = "training dataset is empty"
        raise InputError(msg)
    trained = params.copy()
    optimizer = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    curve: list[float] = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate_at(epoch)
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [augment(dataset[i], trained, cfg, rng) for i in order[start : start + cfg.batch_size]]
            loss, grads = gradients(trained, batch, weight)
            if not math.isfinite(loss):
                msg = f"training loss became {loss} at epoch {epoch + 1}, batch {b + 1}"
                raise NumericalError(msg)
            optimizer.step(trained.weights, grads, lr)
            epoch_loss += loss * len(batch)
        curve.append(epoch_loss / len(dataset))
        logger.debug("epoch %d/%d lr=%.2e loss=%.6f", epoch + 1, cfg.epochs, lr, curve[-1])
    return trained, curve
