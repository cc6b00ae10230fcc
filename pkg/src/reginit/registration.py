"""Intensity-based iterative pose refinement.

Each iteration renders the moving image at the current pose plus the twelve
central-difference probes, evaluates ``1 - similarity`` against the target and
takes a momentum gradient step with separate rotation and translation step
scales. The loop stops when the best loss has not improved (relatively) by
more than ``conv_tol`` over the last ``conv_window`` iterations or has dropped
below ``conv_abs_loss``, or after ``max_iters`` iterations.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateInputError, DivergedError, InvalidArgumentError
from .geometry import CameraGeometry, PoseParams
from .projector import DetectorImage, ProjectionConfig, render_stack
from .similarity import SimilarityKind, similarity_loss

# guards the relative-improvement denominator against division by zero
_LOSS_FLOOR = 1e-9


@dataclass(frozen=True)
class OptimizerConfig:
    """Step scales are calibrated on the default phantom and geometry at 128x128."""

    lr_rot_deg: float = 30.0
    lr_trans_mm: float = 100.0
    momentum: float = 0.8
    fd_step_rot_deg: float = 0.1
    fd_step_trans_mm: float = 0.5
    max_iters: int = 300
    conv_tol: float = 1e-5
    conv_window: int = 10
    conv_abs_loss: float = 1e-4
    # per-axis multipliers on the group step scales (rx, ry, rz, tx, ty, tz); the
    # out-of-plane axes have much flatter loss curvature than the in-plane ones
    axis_gains: tuple[float, ...] = (5.0, 5.0, 1.0, 1.0, 1.0, 60.0)

    def __post_init__(self):
        object.__setattr__(self, "axis_gains", tuple(float(g) for g in self.axis_gains))
        if len(self.axis_gains) != 6 or not all(g > 0 and math.isfinite(g) for g in self.axis_gains):
            raise InvalidArgumentError("axis_gains must be 6 positive finite numbers")
        for name in ("lr_rot_deg", "lr_trans_mm", "fd_step_rot_deg", "fd_step_trans_mm"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgumentError("momentum must lie in [0, 1)")
        if self.max_iters < 1 or self.conv_window < 1:
            raise InvalidArgumentError("max_iters and conv_window must be >= 1")
        if not (self.conv_tol >= 0 and self.conv_abs_loss >= 0):
            raise InvalidArgumentError("conv_tol and conv_abs_loss must be non-negative")

    @property
    def step_scales(self) -> np.ndarray:
        return np.array([self.lr_rot_deg] * 3 + [self.lr_trans_mm] * 3) * np.array(self.axis_gains)

    @property
    def fd_steps(self) -> np.ndarray:
        return np.array([self.fd_step_rot_deg] * 3 + [self.fd_step_trans_mm] * 3)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["axis_gains"] = list(self.axis_gains)
        return d


@dataclass
class RegistrationResult:
    theta_final: PoseParams
    iterations: int
    converged: bool
    loss_trace: list[float]
    theta_trace: list[PoseParams] = field(default_factory=list)

    def to_dict(self, include_theta_trace: bool = False) -> dict:
        d = {
            "theta_final": self.theta_final.to_dict(),
            "iterations": self.iterations,
            "converged": self.converged,
            "loss_trace": list(self.loss_trace),
        }
        if include_theta_trace:
            d["theta_trace"] = [p.to_dict() for p in self.theta_trace]
        return d


@dataclass(frozen=True)
class RegistrationProblem:
    """Everything the loss depends on except the pose. Never holds the true pose."""

    target: DetectorImage
    volume: object
    cam: CameraGeometry
    kind: SimilarityKind = SimilarityKind.grad_ncc
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)

    def losses(self, poses) -> np.ndarray:
        images = render_stack(self.volume, poses, self.cam, self.projection)
        return np.array([similarity_loss(self.kind, self.target.data, im) for im in images])

    def loss(self, theta: PoseParams) -> float:
        return float(self.losses([theta])[0])

    def _probes(self, theta: PoseParams, steps: np.ndarray) -> list[PoseParams]:
        base = theta.as_array()
        poses = []
        for i in range(6):
            for sign in (1.0, -1.0):
                a = base.copy()
                a[i] += sign * steps[i]
                poses.append(PoseParams.from_array(a))
        return poses

    def gradient(self, theta: PoseParams, steps) -> np.ndarray:
        """Central-difference gradient, per degree for rotations and per mm for translations."""
        steps = np.asarray(steps, dtype=np.float64)
        vals = self.losses(self._probes(theta, steps))
        return (vals[0::2] - vals[1::2]) / (2.0 * steps)

    def loss_and_gradient(self, theta: PoseParams, steps) -> tuple[float, np.ndarray]:
        steps = np.asarray(steps, dtype=np.float64)
        vals = self.losses([theta] + self._probes(theta, steps))
        return float(vals[0]), (vals[1::2] - vals[2::2]) / (2.0 * steps)


def loss_at(theta, target, volume, cam, kind=SimilarityKind.grad_ncc, projection=None) -> float:
    problem = RegistrationProblem(target, volume, cam, SimilarityKind(kind), projection or ProjectionConfig())
    return problem.loss(theta)


def gradient_fd(theta, target, volume, cam, kind=SimilarityKind.grad_ncc, opt=None, projection=None) -> np.ndarray:
    opt = opt or OptimizerConfig()
    problem = RegistrationProblem(target, volume, cam, SimilarityKind(kind), projection or ProjectionConfig())
    return problem.gradient(theta, opt.fd_steps)


def has_converged(trace, window: int, tol: float, abs_loss: float = 0.0) -> bool:
    """Convergence predicate, evaluated once more than ``window`` losses exist.

    True if the best loss improved by less than ``tol`` (relative) over the
    last ``window`` iterations, or the best loss is at most ``abs_loss``.
    """
    if len(trace) <= window:
        return False
    best_before = min(trace[: len(trace) - window])
    best_now = min(best_before, min(trace[len(trace) - window :]))
    if best_now <= abs_loss:
        return True
    return (best_before - best_now) / max(best_before, _LOSS_FLOOR) < tol


def register(
    target: DetectorImage,
    volume,
    cam: CameraGeometry,
    theta0: PoseParams,
    opt: OptimizerConfig | None = None,
    kind=SimilarityKind.grad_ncc,
    projection: ProjectionConfig | None = None,
    record_thetas: bool = False,
) -> RegistrationResult:
    """Refine ``theta0`` by momentum gradient descent on the similarity loss.

    The returned pose is the lowest-loss pose visited.
    """
    opt = opt or OptimizerConfig()
    problem = RegistrationProblem(target, volume, cam, SimilarityKind(kind), projection or ProjectionConfig())
    scales, steps = opt.step_scales, opt.fd_steps

    theta = theta0
    velocity = np.zeros(6)
    trace: list[float] = []
    thetas: list[PoseParams] = []
    best_loss, best_theta = math.inf, theta0
    converged = False
    for _ in range(opt.max_iters):
        try:
            loss, grad = problem.loss_and_gradient(theta, steps)
        except DegenerateInputError as exc:
            # the moving image went blank, e.g. the volume left the field of view
            raise DivergedError(f"degenerate moving image at iteration {len(trace)}: {exc}", trace) from exc
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise DivergedError(f"non-finite loss or gradient at iteration {len(trace)}", trace)
        trace.append(loss)
        if record_thetas:
            thetas.append(theta)
        if loss < best_loss:
            best_loss, best_theta = loss, theta
        if has_converged(trace, opt.conv_window, opt.conv_tol, opt.conv_abs_loss):
            converged = True
            break
        velocity = opt.momentum * velocity - scales * grad
        theta = PoseParams.from_array(theta.as_array() + velocity)
    return RegistrationResult(best_theta, len(trace), converged, trace, thetas)
