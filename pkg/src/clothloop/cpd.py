"""Non-rigid Coherent Point Drift with objective tracking."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import ArrayLike
from scipy import linalg
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from clothloop.errors import InputError, NumericalError
from clothloop.mesh import FloatArray, PointCloud
from clothloop.util.enum.warning_types import WarningTypes

logger = logging.getLogger("clothloop")

SIGMA2_FLOOR = 1e-12


@dataclass(frozen=True)
class CPDConfig:
    """Kernel width, smoothness weight, outlier weight and iteration cap."""

    beta: float = 2.0
    lam: float = 3.0
    w: float = 0.1
    iterations: int = 50
    tolerance: float = 1e-8
    normalize: bool = False

    def __post_init__(self) -> None:
        """Check ranges."""
        if self.beta <= 0 or self.lam <= 0:
            msg = "CPD beta and lambda must be positive"
            raise InputError(msg)
        if not 0 <= self.w < 1:
            msg = f"CPD outlier weight must lie in [0, 1) (got {self.w})"
            raise InputError(msg)

    @classmethod
    def from_settings(cls, settings: dict[str, Any], normalize: bool = True) -> CPDConfig:  # noqa: FBT001, FBT002
        """Build from a converted settings dictionary."""
        return cls(
            beta=float(settings["CPD_BETA"]),
            lam=float(settings["CPD_LAMBDA"]),
            w=float(settings["CPD_W"]),
            iterations=int(settings["CPD_ITERATIONS"]),
            normalize=normalize,
        )


@dataclass(eq=False)
class CPDResult:
    """Registration output."""

    source: FloatArray
    displaced: FloatArray
    sigma2: float
    W: FloatArray
    iterations: int
    objectives: list[float] = field(default_factory=list)

    @property
    def displacement_norm(self) -> float:
        """Frobenius norm of the applied displacement field."""
        return float(np.linalg.norm(self.displaced - self.source))


def gaussian_kernel(Y: FloatArray, beta: float) -> FloatArray:
    """G_ij = exp(-|y_i - y_j|^2 / (2 beta^2))."""
    return np.exp(-cdist(Y, Y, "sqeuclidean") / (2 * beta**2))


def _outlier_constant(sigma2: float, w: float, M: int, N: int, D: int) -> float:
    return (2 * math.pi * sigma2) ** (D / 2) * w / (1 - w) * M / N


def responsibilities(T: FloatArray, X: FloatArray, sigma2: float, w: float) -> FloatArray:
    """E-step posterior P[m, n] that target point n came from source point m."""
    M, D = T.shape
    N = len(X)
    logits = -cdist(T, X, "sqeuclidean") / (2 * sigma2)
    denom_log = np.logaddexp(
        logsumexp(logits, axis=0),
        math.log(_outlier_constant(sigma2, w, M, N, D)) if w > 0 else -np.inf,
    )
    return np.exp(logits - denom_log[None, :])


def objective(
    T: FloatArray, X: FloatArray, W: FloatArray, G: FloatArray, sigma2: float, w: float, lam: float
) -> float:
    """Negative log-likelihood of X under the mixture plus lambda/2 tr(W^T G W)."""
    M, D = T.shape
    N = len(X)
    logits = -cdist(T, X, "sqeuclidean") / (2 * sigma2)
    gauss = logsumexp(logits, axis=0) + math.log(1 - w) - math.log(M) - (D / 2) * math.log(2 * math.pi * sigma2)
    per_point = np.logaddexp(gauss, math.log(w / N)) if w > 0 else gauss
    return float(-per_point.sum() + lam / 2 * np.trace(W.T @ G @ W))


def _solve(A: FloatArray, B: FloatArray, loading: float) -> FloatArray:
    try:
        solution = linalg.solve(A, B, assume_a="gen")
        if np.all(np.isfinite(solution)):
            return solution
    except linalg.LinAlgError:
        pass
    logger.warning(
        "%s: singular CPD system; adding %.3e diagonal loading",
        WarningTypes.CPD_DIAGONAL_LOADING.name,
        loading,
    )
    try:
        solution = linalg.solve(A + loading * np.eye(len(A)), B, assume_a="gen")
    except linalg.LinAlgError as err:
        msg = "CPD system stays singular after diagonal loading"
        raise NumericalError(msg) from err
    if not np.all(np.isfinite(solution)):
        msg = "CPD system stays singular after diagonal loading"
        raise NumericalError(msg)
    return solution


def cpd_register(
    source: PointCloud | ArrayLike,
    target: PointCloud | ArrayLike,
    config: CPDConfig | None = None,
) -> CPDResult:
    """Register ``source`` onto ``target`` with a smooth displacement field.

    Each iteration computes responsibilities with a uniform outlier term, then
    solves ``(diag(P1) G + lambda sigma^2 I) W = P X - diag(P1) Y`` (the
    ``diag(P1)``-premultiplied form, valid when some P1 entries vanish), moves
    the source to ``Y + G W`` and refits sigma^2. Iteration stops after
    ``iterations`` rounds or once sigma^2 changes by less than ``tolerance``.

    Args:
        source: Points to move (Y, M x 3).
        target: Points to reach (X, N x 3).
        config: CPD parameters.

    Returns:
        CPDResult: Displaced source, final sigma^2, W and objective history.

    Raises:
        InputError: On empty clouds.
        NumericalError: If the linear system cannot be solved.
    """
    cfg = config or CPDConfig()
    Y = (source.points if isinstance(source, PointCloud) else np.asarray(source, dtype=float)).reshape(-1, 3)
    X = (target.points if isinstance(target, PointCloud) else np.asarray(target, dtype=float)).reshape(-1, 3)
    if len(Y) == 0 or len(X) == 0:
        msg = "CPD needs non-empty source and target clouds"
        raise InputError(msg)

    y_mean = np.zeros(3)
    x_mean = np.zeros(3)
    x_scale = y_scale = 1.0
    if cfg.normalize:
        x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
        x_scale = float(np.sqrt(np.mean(np.sum((X - x_mean) ** 2, axis=1)))) or 1.0
        y_scale = float(np.sqrt(np.mean(np.sum((Y - y_mean) ** 2, axis=1)))) or 1.0
    Xn = (X - x_mean) / x_scale
    Yn = (Y - y_mean) / y_scale

    M, D = Yn.shape
    N = len(Xn)
    G = gaussian_kernel(Yn, cfg.beta)
    W = np.zeros((M, D))
    T = Yn.copy()
    sigma2 = max(float(cdist(Yn, Xn, "sqeuclidean").sum()) / (D * M * N), SIGMA2_FLOOR)
    history = [objective(T, Xn, W, G, sigma2, cfg.w, cfg.lam)]
    iterations = 0
    for iterations in range(1, cfg.iterations + 1):  # noqa: B007
        P = responsibilities(T, Xn, sigma2, cfg.w)
        P1 = P.sum(axis=1)
        Pt1 = P.sum(axis=0)
        PX = P @ Xn
        Np = float(P1.sum())
        A = P1[:, None] * G + cfg.lam * sigma2 * np.eye(M)
        B = PX - P1[:, None] * Yn
        W = _solve(A, B, loading=max(cfg.lam * sigma2, 1e-8))
        T = Yn + G @ W
        if Np <= 0:
            msg = "CPD assigned every target point to the outlier component"
            raise NumericalError(msg)
        residual = float(Pt1 @ np.sum(Xn**2, axis=1) - 2 * np.sum(PX * T) + P1 @ np.sum(T**2, axis=1))
        previous = sigma2
        sigma2 = max(residual / (Np * D), SIGMA2_FLOOR)
        history.append(objective(T, Xn, W, G, sigma2, cfg.w, cfg.lam))
        if abs(previous - sigma2) < cfg.tolerance:
            break

    displaced = T * x_scale + x_mean if cfg.normalize else T
    return CPDResult(Y, displaced, sigma2 * x_scale**2, W, iterations, history)
