"""Cloth state estimation.

Synthetic correspondences stand in for a dense image matcher; hierarchical
feature matching pulls the simulated mesh toward each observation with
correspondence pins and oriented keypoint regions; a chamfer violation
backtracks one frame, regenerates perturbed training shapes there and
retrains the keypoint detector.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from clothloop.cpd import CPDConfig, cpd_register
from clothloop.errors import EstimationAborted, InputError, NumericalError
from clothloop.heatmap import (
    CodecConfig,
    Heatmap,
    KeypointAnnotation,
    OrientedKeypointSet,
    angular_error,
    decode_frames,
    decode_positions,
    encode,
    keypoints_from_mesh,
    midline_key_vertices,
)
from clothloop.mesh import (
    DeformableMesh,
    FloatArray,
    IntArray,
    PointCloud,
    chamfer,
    nearest_vertices,
    vertex_frames,
    vertex_l2,
)
from clothloop.regressor import RegressorParams, Sample, TrainConfig, forward, train
from clothloop.render import Camera, occluded, render
from clothloop.sim import ClothSimulator, ControlRegion, RigidPose, SimConfig, SimState
from clothloop.util.enum.head_kind import HeadKind
from clothloop.util.enum.variant import KeypointSource, Variant
from clothloop.util.enum.warning_types import WarningTypes
from clothloop.util.serialize import write_heatmap, write_keypoints, write_rows

logger = logging.getLogger("clothloop")

SHAPE_BATCH = 32
METRIC_COLUMNS = (
    "frame",
    "chamfer",
    "threshold",
    "backtracked",
    "vertex_l2",
    "detector_position_m",
    "detector_z_deg",
    "detector_x_deg",
)
DETECTOR_CURVE_COLUMNS = ("step", "round", "epoch", "heatmap_loss", "normal_loss", "midline_loss")


@dataclass(frozen=True)
class OcclusionRegion:
    """A half-plane or sphere that hides vertices from the matcher.

    Half-planes hide points with ``(x - point) . normal > 0``; spheres hide
    points within ``radius`` of ``point``. With ``track_vertex`` set the
    region is re-anchored at that vertex (plus ``point`` as an offset) on
    every mesh it is applied to.
    """

    kind: str = "half-plane"
    point: tuple[float, float, float] = (0.0, 0.0, 0.0)
    normal: tuple[float, float, float] = (1.0, 0.0, 0.0)
    radius: float = 0.0
    track_vertex: int | None = None

    def __post_init__(self) -> None:
        """Check the kind and its parameters."""
        if self.kind not in {"half-plane", "sphere"}:
            msg = f"unknown occlusion region kind {self.kind!r}"
            raise InputError(msg)
        if self.kind == "half-plane" and not np.any(self.normal):
            msg = "half-plane occluder needs a non-zero normal"
            raise InputError(msg)
        if self.kind == "sphere" and self.radius <= 0:
            msg = "sphere occluder needs a positive radius"
            raise InputError(msg)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> OcclusionRegion:
        """Build from a scenario ``occlusion.regions`` entry."""
        track = data.get("track_vertex")
        return cls(
            kind=str(data.get("kind", "half-plane")),
            point=tuple(float(c) for c in data.get("point", (0.0, 0.0, 0.0))),
            normal=tuple(float(c) for c in data.get("normal", (1.0, 0.0, 0.0))),
            radius=float(data.get("radius", 0.0)),
            track_vertex=None if track is None else int(track),
        )

    def hides(self, mesh: DeformableMesh) -> NDArray[np.bool_]:
        """Mask of the mesh vertices inside the region."""
        anchor = np.asarray(self.point, dtype=float)
        if self.track_vertex is not None:
            if not 0 <= self.track_vertex < mesh.vertex_count:
                msg = f"occluder tracks vertex {self.track_vertex}, which is not on the mesh"
                raise InputError(msg)
            anchor = anchor + mesh.vertices[self.track_vertex]
        rel = mesh.vertices - anchor
        if self.kind == "sphere":
            return np.linalg.norm(rel, axis=1) <= self.radius
        return rel @ np.asarray(self.normal, dtype=float) > 0


@dataclass(frozen=True)
class OcclusionSpec:
    """Occluding regions, self-occlusion and random dropout of matches."""

    regions: tuple[OcclusionRegion, ...] = ()
    self_occlusion: bool = False
    dropout: float = 0.0

    def __post_init__(self) -> None:
        """Check the dropout rate."""
        if not 0 <= self.dropout < 1:
            msg = f"correspondence dropout must lie in [0, 1) (got {self.dropout})"
            raise InputError(msg)

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> OcclusionSpec:
        """Build from a scenario ``occlusion`` block (absent means no occlusion)."""
        if not data:
            return cls()
        return cls(
            regions=tuple(OcclusionRegion.from_dict(r) for r in data.get("regions", [])),
            self_occlusion=bool(data.get("self_occlusion", False)),
            dropout=float(data.get("dropout", 0.0)),
        )

    def hidden(
        self, true_prev: DeformableMesh, true_next: DeformableMesh, camera: Camera | None = None
    ) -> NDArray[np.bool_]:
        """Vertices hidden at either end of a frame pair."""
        mask = np.zeros(true_prev.vertex_count, dtype=bool)
        for region in self.regions:
            mask |= region.hides(true_prev) | region.hides(true_next)
        if self.self_occlusion and camera is not None:
            mask |= _self_hidden(true_prev, camera) | _self_hidden(true_next, camera)
        return mask


def _self_hidden(mesh: DeformableMesh, camera: Camera) -> NDArray[np.bool_]:
    # a vertex shares its first incident face, so that face must not count as a blocker
    first_face = np.full(mesh.vertex_count, -1, dtype=np.int64)
    for corner in range(3):
        ids = mesh.faces[:, corner]
        unset = first_face[ids] < 0
        first_face[ids[unset]] = np.flatnonzero(unset)
    return ~camera.in_view(mesh.vertices) | occluded(mesh, camera.position, mesh.vertices, first_face)


@dataclass(eq=False)
class CorrespondenceSet:
    """Matched points: a source on the cloth at t-1 and its observed target at t."""

    source_vertices: IntArray
    sources: FloatArray
    targets: FloatArray
    occlusion_rate: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        """Normalize shapes and check the targets."""
        self.source_vertices = np.asarray(self.source_vertices, dtype=np.int64).reshape(-1)
        self.sources = np.asarray(self.sources, dtype=float).reshape(-1, 3)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1, 3)
        if not len(self.source_vertices) == len(self.sources) == len(self.targets):
            msg = "correspondence arrays disagree in length"
            raise InputError(msg)
        if not np.all(np.isfinite(self.targets)):
            msg = "correspondence targets must be finite"
            raise InputError(msg)

    def __len__(self) -> int:
        """Number of pairs."""
        return len(self.targets)

    @classmethod
    def empty(cls) -> CorrespondenceSet:
        """A set with no pairs."""
        return cls(np.empty(0, dtype=np.int64), np.empty((0, 3)), np.empty((0, 3)), 1.0)


def oracle_correspondences(
    true_prev: DeformableMesh,
    true_next: DeformableMesh,
    occlusion: OcclusionSpec,
    rng: np.random.Generator,
    count: int = 0,
    noise_sigma: float = 0.0,
    camera: Camera | None = None,
) -> CorrespondenceSet:
    """Synthesize matches between two ground-truth frames.

    Args:
        true_prev: Ground truth at t-1.
        true_next: Vertex-aligned ground truth at t.
        occlusion: What hides vertices from the matcher.
        rng: Random generator for dropout, subsampling and noise.
        count: Maximum number of pairs (0 keeps every visible vertex).
        noise_sigma: Standard deviation of the target noise in meters.
        camera: Needed for self-occlusion.

    Returns:
        CorrespondenceSet: Possibly empty set of pairs, sorted by vertex.
    """
    if true_prev.vertex_count != true_next.vertex_count:
        msg = "correspondence frames are not vertex-aligned"
        raise InputError(msg)
    visible = np.flatnonzero(~occlusion.hidden(true_prev, true_next, camera))
    if occlusion.dropout > 0 and len(visible):
        visible = visible[rng.random(len(visible)) >= occlusion.dropout]
    if 0 < count < len(visible):
        visible = np.sort(rng.choice(visible, size=count, replace=False))
    targets = true_next.vertices[visible].copy()
    if noise_sigma > 0:
        targets += rng.normal(0.0, noise_sigma, targets.shape)
    if not len(visible):
        logger.warning("%s: every vertex is occluded; no correspondences this frame", WarningTypes.EMPTY_CORRESPONDENCES.name)
    return CorrespondenceSet(
        visible,
        true_prev.vertices[visible].copy(),
        targets,
        1.0 - len(visible) / true_prev.vertex_count,
        noise_sigma,
    )


@dataclass(frozen=True)
class EstimationConfig:
    """Everything the estimation loop needs, one sub-config per module."""

    variant: Variant = Variant.FULL
    keypoint_source: KeypointSource = KeypointSource.DETECTOR
    chamfer_threshold: float = math.inf
    threshold_scale: float = 2.0
    shapes_per_retrain: int = 500
    rs_shapes: int = 700
    perturbation: float = 0.05
    correspondences: int = 150
    correspondence_noise: float = 0.0
    on_repeated_backtrack: str = "abort"
    cloud_points: int = 400
    depth_noise: float = 0.0
    threads: int = 1
    camera: Camera = field(default_factory=Camera)
    sim: SimConfig = field(default_factory=SimConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cpd: CPDConfig = field(default_factory=lambda: CPDConfig(normalize=True))

    def __post_init__(self) -> None:
        """Check ranges."""
        if self.chamfer_threshold <= 0 or self.threshold_scale <= 0:
            msg = "chamfer threshold must be positive"
            raise InputError(msg)
        if self.shapes_per_retrain < 1 or self.rs_shapes < 1:
            msg = "shape counts must be at least 1"
            raise InputError(msg)
        if self.on_repeated_backtrack not in {"abort", "continue"}:
            msg = f"ON_REPEATED_BACKTRACK must be abort or continue (got {self.on_repeated_backtrack!r})"
            raise InputError(msg)

    @classmethod
    def from_settings(
        cls,
        settings: dict[str, Any],
        variant: Variant = Variant.FULL,
        keypoint_source: KeypointSource = KeypointSource.DETECTOR,
        camera: Camera | None = None,
    ) -> EstimationConfig:
        """Build from a converted settings dictionary."""
        return cls(
            variant=variant,
            keypoint_source=keypoint_source,
            chamfer_threshold=float(settings["CHAMFER_THRESHOLD"]),
            threshold_scale=float(settings["CHAMFER_THRESHOLD_SCALE"]),
            shapes_per_retrain=int(settings["SHAPES_PER_RETRAIN"]),
            rs_shapes=int(settings["RS_SHAPES"]),
            perturbation=float(settings["PERTURBATION"]),
            correspondences=int(settings["CORRESPONDENCES"]),
            correspondence_noise=float(settings["CORRESPONDENCE_NOISE"]),
            on_repeated_backtrack=str(settings["ON_REPEATED_BACKTRACK"]).lower(),
            cloud_points=int(settings["CLOUD_POINTS"]),
            depth_noise=float(settings["DEPTH_NOISE"]),
            threads=max(1, int(settings["THREADS"])),
            camera=camera or Camera(),
            sim=SimConfig.from_settings(settings),
            codec=CodecConfig.from_settings(settings),
            train=TrainConfig.from_settings(settings),
            cpd=CPDConfig.from_settings(settings),
        )

    def threshold_for(self, mesh: DeformableMesh) -> float:
        """Absolute chamfer threshold, or the scaled mean edge length when that is infinite."""
        if math.isfinite(self.chamfer_threshold):
            return self.chamfer_threshold
        return self.threshold_scale * mesh.mean_edge_length


def _correspondence_pins(estimate: DeformableMesh, corr: CorrespondenceSet) -> tuple[IntArray, FloatArray]:
    """Snap sources to the estimate and average targets that land on one vertex."""
    snapped = nearest_vertices(estimate, corr.sources)
    vertices, inverse = np.unique(snapped, return_inverse=True)
    sums = np.zeros((len(vertices), 3))
    np.add.at(sums, inverse, corr.targets)
    counts = np.bincount(inverse, minlength=len(vertices))[:, None]
    targets = sums / counts
    targets[:, 2] = np.maximum(targets[:, 2], 0.0)
    return vertices, targets


def _keypoint_regions(
    estimate: DeformableMesh,
    keypoints: OrientedKeypointSet,
    key_vertices: IntArray,
    use_frames: bool,  # noqa: FBT001
) -> tuple[list[ControlRegion], list[RigidPose]]:
    regions, poses = [], []
    for k, vertex in enumerate(key_vertices):
        region = ControlRegion.around(estimate, int(vertex))
        if use_frames:
            pose = RigidPose.from_frame(keypoints.frames[k], keypoints.positions[k])
        else:
            pose = RigidPose(region.pose.rotation, np.asarray(keypoints.positions[k], dtype=float))
        lowest = float(region.member_targets(pose)[:, 2].min())
        if lowest < 0:
            pose = pose.translated([0.0, 0.0, -lowest])
        regions.append(region)
        poses.append(pose)
    return regions, poses


def hfm_step(
    state: SimState,
    mesh: DeformableMesh,
    corr: CorrespondenceSet,
    keypoints: OrientedKeypointSet | None,
    key_vertices: ArrayLike,
    cfg: EstimationConfig,
    simulator: ClothSimulator | None = None,
) -> SimState:
    """One hierarchical feature matching step.

    Correspondence vertices are pulled straight to their targets and keypoint
    regions to their decoded poses, as the variant allows. Pins are held while
    the free vertices relax and released on return.

    Args:
        state: Estimate at t-1.
        mesh: Mesh sharing the simulated topology.
        corr: Matches from t-1 to t.
        keypoints: Oriented keypoints observed at t, or None.
        key_vertices: Vertex of each keypoint, in keypoint order.
        cfg: Estimation settings (the variant selects the control inputs).
        simulator: Simulator to reuse; one is built from ``cfg.sim`` if omitted.

    Returns:
        SimState: Estimate at t, unpinned and at rest.
    """
    simulator = simulator or ClothSimulator(mesh, cfg.sim)
    key_vertices = np.asarray(key_vertices, dtype=np.int64)
    estimate = mesh.with_vertices(state.positions)
    variant = cfg.variant

    point_pins = None
    if variant.uses_correspondences and len(corr):
        point_pins = _correspondence_pins(estimate, corr)

    regions: list[ControlRegion] = []
    poses: list[RigidPose] = []
    if variant.uses_keypoints and keypoints is not None:
        if len(keypoints) != len(key_vertices):
            msg = f"{len(keypoints)} keypoints for {len(key_vertices)} key vertices"
            raise InputError(msg)
        regions, poses = _keypoint_regions(estimate, keypoints, key_vertices, variant.uses_frames)

    if point_pins is not None and regions:
        members = np.concatenate([r.members for r in regions])
        conflicts = np.intersect1d(point_pins[0], members)
        if len(conflicts):
            logger.warning(
                "%s: %d correspondence pins fall inside keypoint regions; keypoint pins win",
                WarningTypes.PIN_CONFLICT.name,
                len(conflicts),
            )

    if point_pins is None and not regions:
        settled = simulator.relax(state)
    else:
        dragged = simulator.drag_regions(state.released(), regions, poses, point_pins=point_pins)
        settled = simulator.relax(dragged, keep_pins=True)
    return SimState(settled.positions, np.zeros_like(settled.positions), time=settled.time)


def _perturb_batch(
    simulator: ClothSimulator, start: FloatArray, key_vertices: IntArray, targets: FloatArray
) -> FloatArray:
    batch = len(targets)
    x = np.broadcast_to(start, (batch, *start.shape)).copy()
    v = np.zeros_like(x)
    origin = start[key_vertices]
    steps = simulator.config.drag_steps
    for s in range(1, steps + 1):
        alpha = s / steps
        x, v = simulator.integrate(x, v, key_vertices, (1 - alpha) * origin + alpha * targets)
    for _ in range(simulator.config.relax_steps):
        x, v = simulator.integrate(x, v, key_vertices, targets)
    return x


def generate_shapes(
    base: DeformableMesh,
    key_vertices: ArrayLike,
    count: int,
    perturbation: float,
    sim_config: SimConfig,
    seed: int,
    threads: int = 1,
) -> list[DeformableMesh]:
    """Randomly perturbed shapes around ``base``.

    Each shape moves every key vertex by a uniform offset in
    ``[-perturbation, perturbation]`` per axis (never below the ground),
    drags them there and relaxes with the key vertices held. Shapes use
    independent child seeds, so the result does not depend on ``threads``.

    Raises:
        InputError: If ``count < 1``.
    """
    if count < 1:
        msg = f"need at least one shape (got {count})"
        raise InputError(msg)
    key_vertices = np.asarray(key_vertices, dtype=np.int64)
    children = np.random.SeedSequence(seed).spawn(count)
    offsets = np.stack(
        [np.random.default_rng(c).uniform(-perturbation, perturbation, (len(key_vertices), 3)) for c in children]
    )
    targets = base.vertices[key_vertices] + offsets
    targets[..., 2] = np.maximum(targets[..., 2], 0.0)

    simulator = ClothSimulator(base, sim_config)
    chunks = [slice(s, min(s + SHAPE_BATCH, count)) for s in range(0, count, SHAPE_BATCH)]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda c: _perturb_batch(simulator, base.vertices, key_vertices, targets[c]), chunks))
    logger.debug("generated %d perturbed shapes around the current estimate", count)
    return [base.with_vertices(p) for p in np.concatenate(results)]


@dataclass(eq=False)
class KeypointDetector:
    """Heatmap, normal and midline regressors plus the decoding that joins them."""

    heatmap: RegressorParams
    normal: RegressorParams
    midline: RegressorParams
    shapes_seen: int = 0

    HEADS = ("heatmap", "normal", "midline")

    @classmethod
    def init(cls, keypoints: int, rng: np.random.Generator, train_config: TrainConfig | None = None) -> KeypointDetector:
        """Fresh detector for ``keypoints`` keypoints."""
        cfg = train_config or TrainConfig()
        return cls(
            RegressorParams.init(HeadKind.HEATMAP, keypoints, rng, cfg.encoder, cfg.decoder),
            RegressorParams.init(HeadKind.VECTOR, 3, rng, cfg.encoder, cfg.decoder),
            RegressorParams.init(HeadKind.VECTOR, 3, rng, cfg.encoder, cfg.decoder),
        )

    def copy(self) -> KeypointDetector:
        """Deep copy."""
        return KeypointDetector(self.heatmap.copy(), self.normal.copy(), self.midline.copy(), self.shapes_seen)

    def predict_heatmap(self, cloud: PointCloud) -> Heatmap:
        """Per-point keypoint probabilities for one observation."""
        return Heatmap(forward(self.heatmap, cloud))

    def detect(self, cloud: PointCloud, codec: CodecConfig) -> OrientedKeypointSet:
        """Oriented keypoints for one observation.

        Raises:
            InputError: If a decoded keypoint has no cloud point nearby.
            NumericalError: If a heatmap column or a direction average degenerates.
        """
        positions = decode_positions(self.predict_heatmap(cloud), cloud, codec.top_fraction)
        return decode_frames(
            positions,
            cloud,
            forward(self.normal, cloud),
            forward(self.midline, cloud),
            codec.frame_radius,
        )

    def save(self, directory: Path) -> None:
        """One parameter file per head."""
        directory.mkdir(parents=True, exist_ok=True)
        for head in self.HEADS:
            getattr(self, head).save(directory / f"{head}.params")

    @classmethod
    def load(cls, directory: Path) -> KeypointDetector:
        """Read a detector written by :meth:`save`."""
        return cls(*(RegressorParams.load(directory / f"{head}.params") for head in cls.HEADS))


@dataclass(eq=False)
class TrainingSet:
    """Per-head samples rendered from a list of shapes."""

    heatmap: list[Sample] = field(default_factory=list)
    normal: list[Sample] = field(default_factory=list)
    midline: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        """Number of rendered shapes."""
        return len(self.heatmap)


def build_training_set(
    shapes: Sequence[DeformableMesh],
    key_vertices: ArrayLike,
    cfg: EstimationConfig,
    rng: np.random.Generator,
) -> TrainingSet:
    """Render every shape and label the cloud with heatmaps and direction fields.

    Shapes the camera cannot see well enough are skipped.
    """
    annotation = KeypointAnnotation(tuple(int(k) for k in np.asarray(key_vertices)), cfg.codec.sigma)
    data = TrainingSet()
    for i, shape in enumerate(shapes):
        try:
            rendered = render(shape, cfg.camera, cfg.cloud_points, rng, cfg.depth_noise)
        except InputError as err:
            logger.debug("skipping training shape %d: %s", i, err)
            continue
        frames = vertex_frames(shape)
        points = rendered.cloud.points
        data.heatmap.append(Sample(points, encode(shape, rendered.cloud, annotation).probs))
        data.normal.append(Sample(points, rendered.interpolate(shape, frames[:, :, 2], normalize=True)))
        data.midline.append(Sample(points, rendered.interpolate(shape, frames[:, :, 0], normalize=True)))
    if not len(data):
        msg = "no training shape was visible to the camera"
        raise InputError(msg)
    return data


def train_detector(
    shapes: Sequence[DeformableMesh],
    key_vertices: ArrayLike,
    cfg: EstimationConfig,
    rng: np.random.Generator,
    warm_start: KeypointDetector | None = None,
) -> tuple[KeypointDetector, dict[str, list[float]]]:
    """Train (or continue training) a detector on rendered shapes.

    Returns:
        tuple: The detector and one loss curve per head.
    """
    key_vertices = np.asarray(key_vertices, dtype=np.int64)
    data = build_training_set(shapes, key_vertices, cfg, rng)
    detector = warm_start.copy() if warm_start is not None else KeypointDetector.init(len(key_vertices), rng, cfg.train)
    curves: dict[str, list[float]] = {}
    for head in KeypointDetector.HEADS:
        params, curves[head] = train(getattr(detector, head), getattr(data, head), cfg.train, rng)
        setattr(detector, head, params)
    detector.shapes_seen += len(data)
    logger.info("trained keypoint detector on %d rendered shapes", len(data))
    return detector, curves


def train_detector_rs(
    initial: DeformableMesh,
    key_vertices: ArrayLike,
    n_shapes: int,
    cfg: EstimationConfig,
    seed: int,
) -> tuple[KeypointDetector, dict[str, list[float]]]:
    """One-shot detector trained on perturbations of the initial shape only, with its loss curves."""
    shapes = generate_shapes(initial, key_vertices, n_shapes, cfg.perturbation, cfg.sim, seed, cfg.threads)
    return train_detector(shapes, key_vertices, cfg, np.random.default_rng(seed))


def detector_errors(
    detector: KeypointDetector,
    meshes: Sequence[DeformableMesh],
    key_vertices: ArrayLike,
    cfg: EstimationConfig,
    rng: np.random.Generator,
) -> tuple[float, float, float]:
    """Mean (position m, z deg, x deg) detection error over rendered meshes.

    Meshes whose detection fails count with the worst possible angles and the
    distance between the cloud centroid and the true keypoints.
    """
    errors = []
    for mesh in meshes:
        truth = keypoints_from_mesh(mesh, key_vertices)
        cloud = render(mesh, cfg.camera, cfg.cloud_points, rng, cfg.depth_noise).cloud
        try:
            errors.append(angular_error(detector.detect(cloud, cfg.codec), truth))
        except (InputError, NumericalError) as err:
            logger.debug("detection failed during evaluation: %s", err)
            miss = float(np.linalg.norm(truth.positions - cloud.points.mean(axis=0), axis=1).mean())
            errors.append((miss, 180.0, 180.0))
    return tuple(float(v) for v in np.mean(errors, axis=0))  # type: ignore[return-value]


@dataclass
class FrameEvent:
    """One line of the estimation event log."""

    frame: int
    variant: str
    chamfer: float
    threshold: float
    backtracked: bool = False
    vertex_l2: float | None = None
    detector_position: float | None = None
    detector_z_deg: float | None = None
    detector_x_deg: float | None = None

    def as_json(self) -> str:
        """JSON-lines record; non-finite numbers become null."""
        data = {
            k: None if isinstance(v, float) and not math.isfinite(v) else v for k, v in asdict(self).items()
        }
        return json.dumps(data, sort_keys=True)


@dataclass(eq=False)
class EstimationResult:
    """Estimated meshes per frame, the event log and the final detector.

    ``detector_curves`` holds one per-head loss curve dict per training round
    (the initial training first); ``keypoints`` and ``heatmaps`` hold, per frame,
    the output of the detector current at that frame (keypoints only where they decode).
    """

    meshes: list[DeformableMesh]
    events: list[FrameEvent]
    detector: KeypointDetector | None = None
    detector_curves: list[dict[str, list[float]]] = field(default_factory=list)
    keypoints: dict[int, OrientedKeypointSet] = field(default_factory=dict)
    heatmaps: dict[int, Heatmap] = field(default_factory=dict)

    @property
    def backtracks(self) -> int:
        """Number of backtracking rounds."""
        return sum(e.backtracked for e in self.events)

    @property
    def final_vertex_l2(self) -> float | None:
        """Vertex error of the last frame, when ground truth was given."""
        return self.events[-1].vertex_l2 if self.events else None

    def write_events(self, path: Path) -> None:
        """Write the event log as JSON lines."""
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(e.as_json() + "\n" for e in self.events))

    def write_metrics(self, path: Path) -> None:
        """Write one CSV row per frame; missing values are left empty."""

        def cell(value: float | None) -> str:
            return "" if value is None or not math.isfinite(value) else f"{value:.9f}"

        write_rows(
            path,
            METRIC_COLUMNS,
            [
                [
                    e.frame,
                    cell(e.chamfer),
                    cell(e.threshold),
                    int(e.backtracked),
                    cell(e.vertex_l2),
                    cell(e.detector_position),
                    cell(e.detector_z_deg),
                    cell(e.detector_x_deg),
                ]
                for e in self.events
            ],
        )

    def write_detector_curve(self, path: Path) -> None:
        """Write one row per epoch of every training round; ``step`` counts epochs across rounds."""
        rows = []
        for round_index, curves in enumerate(self.detector_curves):
            per_head = [curves[head] for head in KeypointDetector.HEADS]
            for epoch, losses in enumerate(zip(*per_head, strict=True)):
                rows.append([len(rows), round_index, epoch, *(f"{v:.9g}" for v in losses)])
        write_rows(path, DETECTOR_CURVE_COLUMNS, rows)

    def write_detections(self, directory: Path) -> list[Path]:
        """Write ``keypoints/frame_NNN.json`` and ``heatmaps/frame_NNN.csv`` per decoded frame.

        Returns:
            list[Path]: The written files.
        """
        written = []
        for frame, keypoints in sorted(self.keypoints.items()):
            path = directory / "keypoints" / f"frame_{frame:03d}.json"
            write_keypoints(path, keypoints)
            written.append(path)
        for frame, heatmap in sorted(self.heatmaps.items()):
            path = directory / "heatmaps" / f"frame_{frame:03d}.csv"
            write_heatmap(path, heatmap)
            written.append(path)
        return written


class _Tracker:
    """Mutable per-sequence state of the estimation loop."""

    def __init__(
        self,
        initial: DeformableMesh,
        cfg: EstimationConfig,
        occlusion: OcclusionSpec,
        seed: int,
        detector: KeypointDetector | None,
    ) -> None:
        self.cfg = cfg
        self.occlusion = occlusion
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.simulator = ClothSimulator(initial, cfg.sim)
        self.key_vertices = midline_key_vertices(initial)
        self.detector = detector
        self.retrains = 0
        self.curves: list[dict[str, list[float]]] = []

    @property
    def needs_detector(self) -> bool:
        return self.cfg.variant.uses_keypoints and self.cfg.keypoint_source is KeypointSource.DETECTOR

    def child_seed(self) -> int:
        self.retrains += 1
        return int(np.random.SeedSequence([self.seed, self.retrains]).generate_state(1)[0])

    def prepare(self, initial: DeformableMesh) -> None:
        """Train the first detector on perturbations of the initial shape."""
        if not self.needs_detector or self.detector is not None:
            return
        cfg = self.cfg
        if cfg.variant is Variant.RS:
            self.detector, curves = train_detector_rs(initial, self.key_vertices, cfg.rs_shapes, cfg, self.child_seed())
            self.curves.append(curves)
            return
        shapes = generate_shapes(
            initial, self.key_vertices, cfg.shapes_per_retrain, cfg.perturbation, cfg.sim, self.child_seed(), cfg.threads
        )
        self.detector, curves = train_detector(shapes, self.key_vertices, cfg, self.rng)
        self.curves.append(curves)

    def retrain(self, previous: DeformableMesh) -> None:
        """Warm-started retraining on shapes generated around the previous estimate."""
        cfg = self.cfg
        shapes = generate_shapes(
            previous, self.key_vertices, cfg.shapes_per_retrain, cfg.perturbation, cfg.sim, self.child_seed(), cfg.threads
        )
        self.detector, curves = train_detector(shapes, self.key_vertices, cfg, self.rng, warm_start=self.detector)
        self.curves.append(curves)

    def keypoints(self, frame: int, observation: PointCloud, truth: DeformableMesh | None) -> OrientedKeypointSet | None:
        if not self.cfg.variant.uses_keypoints:
            return None
        if self.cfg.keypoint_source is KeypointSource.ORACLE:
            if truth is None:
                msg = "oracle keypoints need ground-truth meshes"
                raise InputError(msg)
            return keypoints_from_mesh(truth, self.key_vertices)
        try:
            return self.detector.detect(observation, self.cfg.codec)  # type: ignore[union-attr]
        except (InputError, NumericalError) as err:
            logger.info("frame %d: keypoint detection failed (%s); matching without keypoints", frame, err)
            return None

    def step(
        self,
        frame: int,
        previous: DeformableMesh,
        observation: PointCloud,
        corr: CorrespondenceSet,
        truth: DeformableMesh | None,
    ) -> tuple[DeformableMesh, float]:
        state = hfm_step(
            SimState.at_rest(previous),
            previous,
            corr,
            self.keypoints(frame, observation, truth),
            self.key_vertices,
            self.cfg,
            self.simulator,
        )
        estimate = previous.with_vertices(state.positions)
        return estimate, chamfer(estimate, observation)


def estimate_sequence(
    initial: DeformableMesh,
    observations: Sequence[PointCloud],
    truths: Sequence[DeformableMesh],
    cfg: EstimationConfig,
    occlusion: OcclusionSpec | None = None,
    seed: int = 0,
    detector: KeypointDetector | None = None,
) -> EstimationResult:
    """Track the cloth through a sequence of observations.

    Frame 0 is the initial mesh. Every later frame runs one HFM step (or one
    CPD registration for the CPD baseline); a chamfer distance above the
    threshold backtracks to the previous estimate, retrains the detector on
    shapes perturbed from it and re-runs the frame once.

    Args:
        initial: Mesh aligned with the first observation.
        observations: One point cloud per frame.
        truths: Ground-truth meshes per frame, used by the correspondence
            oracle, oracle keypoints and scoring.
        cfg: Estimation settings.
        occlusion: What hides the cloth from the matcher.
        seed: Seed for every random draw of the run.
        detector: Pretrained detector to start from.

    Returns:
        EstimationResult: Estimates, event log, the final detector, its loss curves and detections.

    Raises:
        InputError: On an empty or misaligned sequence.
        EstimationAborted: When a frame still violates the threshold after
            retraining and ``on_repeated_backtrack`` is ``abort``.
    """
    if not observations:
        msg = "observation sequence is empty"
        raise InputError(msg)
    if len(truths) != len(observations):
        msg = f"{len(truths)} ground-truth meshes for {len(observations)} observations"
        raise InputError(msg)
    occlusion = occlusion or OcclusionSpec()
    threshold = cfg.threshold_for(initial)
    tracker = _Tracker(initial, cfg, occlusion, seed, detector)
    variant = cfg.variant

    meshes = [initial.copy()]
    events = [FrameEvent(0, variant.value, chamfer(initial, observations[0]), threshold, vertex_l2=vertex_l2(initial, truths[0]))]
    keypoints: dict[int, OrientedKeypointSet] = {}
    heatmaps: dict[int, Heatmap] = {}
    if variant is not Variant.CPD:
        tracker.prepare(initial)

    for t in range(1, len(observations)):
        previous = meshes[-1]
        event = FrameEvent(t, variant.value, math.nan, threshold)
        if variant is Variant.CPD:
            result = cpd_register(previous.vertices, observations[t], cfg.cpd)
            estimate = previous.with_vertices(result.displaced)
            event.chamfer = chamfer(estimate, observations[t])
        else:
            corr = oracle_correspondences(
                truths[t - 1],
                truths[t],
                occlusion,
                tracker.rng,
                cfg.correspondences,
                cfg.correspondence_noise,
                cfg.camera,
            )
            estimate, event.chamfer = tracker.step(t, previous, observations[t], corr, truths[t])
            if event.chamfer > threshold and variant.retrains and tracker.needs_detector:
                logger.warning(
                    "%s: frame %d chamfer %.4f m exceeds %.4f m; retraining at frame %d",
                    WarningTypes.BACKTRACK.name,
                    t,
                    event.chamfer,
                    threshold,
                    t - 1,
                )
                event.backtracked = True
                tracker.retrain(previous)
                retry, retry_chamfer = tracker.step(t, previous, observations[t], corr, truths[t])
                if retry_chamfer > threshold:
                    if cfg.on_repeated_backtrack == "abort":
                        msg = (
                            f"frame {t} still exceeds the chamfer threshold after retraining "
                            f"({retry_chamfer:.4f} m > {threshold:.4f} m)"
                        )
                        raise EstimationAborted(msg)
                    logger.warning(
                        "%s: frame %d still at %.4f m after retraining; keeping the best attempt",
                        WarningTypes.BACKTRACK_EXHAUSTED.name,
                        t,
                        retry_chamfer,
                    )
                if retry_chamfer <= event.chamfer:
                    estimate, event.chamfer = retry, retry_chamfer
        event.vertex_l2 = vertex_l2(estimate, truths[t])
        if tracker.needs_detector and tracker.detector is not None:
            truth_keypoints = keypoints_from_mesh(truths[t], tracker.key_vertices)
            try:
                heatmaps[t] = tracker.detector.predict_heatmap(observations[t])
                keypoints[t] = tracker.detector.detect(observations[t], cfg.codec)
                errors = angular_error(keypoints[t], truth_keypoints)
            except (InputError, NumericalError):
                errors = (math.nan, math.nan, math.nan)
            event.detector_position, event.detector_z_deg, event.detector_x_deg = errors
        logger.debug("frame %d: chamfer %.4f, vertex L2 %.4f", t, event.chamfer, event.vertex_l2)
        meshes.append(estimate)
        events.append(event)
    return EstimationResult(meshes, events, tracker.detector, tracker.curves, keypoints, heatmaps)


def with_variant(cfg: EstimationConfig, variant: Variant) -> EstimationConfig:
    """Copy of ``cfg`` running another variant."""
    return replace(cfg, variant=variant)
