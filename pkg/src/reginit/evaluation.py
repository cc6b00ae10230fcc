"""Paired registration experiments, error statistics and significance tests."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import DivergedError, InvalidArgumentError
from .geometry import IDENTITY_POSE, CameraGeometry, PoseParams, PoseRange, derive_seed, make_rng, sample_pose
from .initializer.inputs import InitializerVariant
from .initializer.model import predict_initial_pose
from .projector import ProjectionConfig, add_noise, render_drr
from .registration import OptimizerConfig, register
from .similarity import SimilarityKind


class InitMethod(str, enum.Enum):
    original = "original"
    proposed_1 = "proposed_1"
    proposed_2_pe = "proposed_2_pe"
    proposed_2_pe_ac = "proposed_2_pe_ac"

    @property
    def variant(self) -> InitializerVariant | None:
        return _VARIANTS.get(self)


_VARIANTS = {
    InitMethod.proposed_1: InitializerVariant.target_only,
    InitMethod.proposed_2_pe: InitializerVariant.two_image_pe,
    InitMethod.proposed_2_pe_ac: InitializerVariant.two_image_pe_ac,
}


def method_for_variant(variant) -> InitMethod:
    variant = InitializerVariant(variant)
    return next(m for m, v in _VARIANTS.items() if v is variant)


@dataclass
class CaseResult:
    case_id: int
    environment: str
    init_method: InitMethod
    theta_true: PoseParams
    theta_init: PoseParams
    theta_final: PoseParams
    iterations: int
    converged: bool
    volume_id: str = ""
    diverged: bool = False

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "environment": self.environment,
            "init_method": InitMethod(self.init_method).value,
            "volume_id": self.volume_id,
            "theta_true": self.theta_true.to_dict(),
            "theta_init": self.theta_init.to_dict(),
            "theta_final": self.theta_final.to_dict(),
            "iterations": self.iterations,
            "converged": self.converged,
            "diverged": self.diverged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaseResult":
        return cls(
            case_id=int(d["case_id"]),
            environment=d["environment"],
            init_method=InitMethod(d["init_method"]),
            theta_true=PoseParams.from_dict(d["theta_true"]),
            theta_init=PoseParams.from_dict(d["theta_init"]),
            theta_final=PoseParams.from_dict(d["theta_final"]),
            iterations=int(d["iterations"]),
            converged=bool(d["converged"]),
            volume_id=d.get("volume_id", ""),
            diverged=bool(d.get("diverged", False)),
        )


# -- error statistics ---------------------------------------------------------


def pose_errors(theta_est: PoseParams, theta_true: PoseParams) -> np.ndarray:
    """Absolute per-component errors; angle differences wrapped to [-180, 180) first."""
    d = theta_est.as_array() - theta_true.as_array()
    d[:3] = (d[:3] + 180.0) % 360.0 - 180.0
    return np.abs(d)


def case_rmse(theta_est: PoseParams, theta_true: PoseParams) -> tuple[float, float]:
    """Per-case (rotation RMSE over 3 angles, translation RMSE over 3 offsets)."""
    e = pose_errors(theta_est, theta_true)
    return float(np.sqrt(np.mean(e[:3] ** 2))), float(np.sqrt(np.mean(e[3:] ** 2)))


TABLE_COLUMNS = ("mean_iters", "rot_rmse_deg", "trans_rmse_mm", "rot_mae_deg", "xy_trans_mae_mm", "z_trans_mae_mm")


@dataclass
class ErrorStats:
    n_cases: int
    mean_iters: float | None
    rot_rmse_deg: float
    trans_rmse_mm: float
    rot_mae_deg: float
    xy_trans_mae_mm: float
    z_trans_mae_mm: float

    def to_dict(self) -> dict:
        return {"n_cases": self.n_cases, **{c: getattr(self, c) for c in TABLE_COLUMNS}}


def error_stats(errors: np.ndarray, iterations=None) -> ErrorStats:
    """Pool per-component errors of all cases; ``errors`` has shape (n_cases, 6)."""
    e = np.asarray(errors, dtype=np.float64).reshape(-1, 6)
    if len(e) == 0:
        raise InvalidArgumentError("cannot aggregate an empty result set")
    rot, trans = e[:, :3], e[:, 3:]
    return ErrorStats(
        n_cases=len(e),
        mean_iters=None if iterations is None else float(np.mean(iterations)),
        rot_rmse_deg=float(np.sqrt(np.mean(rot**2))),
        trans_rmse_mm=float(np.sqrt(np.mean(trans**2))),
        rot_mae_deg=float(np.mean(rot)),
        xy_trans_mae_mm=float(np.mean(trans[:, :2])),
        z_trans_mae_mm=float(np.mean(trans[:, 2])),
    )


@dataclass
class ErrorReport:
    """Statistics per (environment, init method), after registration and for the raw initializer."""

    registration: dict[tuple[str, str], ErrorStats] = field(default_factory=dict)
    initializer: dict[tuple[str, str], ErrorStats] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, str, ErrorStats]]:
        out = []
        envs = list(dict.fromkeys(env for env, _ in self.registration))
        for env in envs:
            for (e, m), s in self.initializer.items():
                if e == env:
                    out.append((env, "initializer", m, s))
            for (e, m), s in self.registration.items():
                if e == env:
                    out.append((env, "registration", m, s))
        return out

    def to_dict(self) -> dict:
        return {
            "pooling": "per-component errors pooled over all cases of a group",
            "rows": [
                {"environment": env, "stage": stage, "init_method": m, **s.to_dict()}
                for env, stage, m, s in self.rows()
            ],
        }


def aggregate(results) -> ErrorReport:
    """Group by (environment, init method) in first-appearance order and pool errors."""
    results = list(results)
    if not results:
        raise InvalidArgumentError("cannot aggregate an empty result set")
    groups: dict[tuple[str, str], list[CaseResult]] = {}
    for r in results:
        groups.setdefault((r.environment, InitMethod(r.init_method).value), []).append(r)
    report = ErrorReport()
    for key, rs in groups.items():
        rs = sorted(rs, key=lambda r: r.case_id)
        final = np.stack([pose_errors(r.theta_final, r.theta_true) for r in rs])
        init = np.stack([pose_errors(r.theta_init, r.theta_true) for r in rs])
        report.registration[key] = error_stats(final, [r.iterations for r in rs])
        report.initializer[key] = error_stats(init)
    return report


def paired_one_tailed_ttest(deltas) -> tuple[float, float]:
    """One-sample t-test of mean(deltas) > 0; returns (t, upper-tail p), df = n - 1."""
    d = np.asarray(deltas, dtype=np.float64).ravel()
    n = len(d)
    if n < 2:
        raise InvalidArgumentError("paired t-test needs at least two deltas")
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 0.5
        return (math.inf, 0.0) if mean > 0 else (-math.inf, 1.0)
    t = mean / (sd / math.sqrt(n))
    return t, float(stats.t.sf(t, n - 1))


def rmse_deltas(results, environment: str, baseline="original", method="proposed_1"):
    """Per-case (rotation, translation) RMSE of ``baseline`` minus that of ``method``."""
    base = {r.case_id: r for r in results if r.environment == environment and r.init_method == baseline}
    prop = {r.case_id: r for r in results if r.environment == environment and r.init_method == method}
    ids = sorted(set(base) & set(prop))
    rot, trans = [], []
    for cid in ids:
        rb, tb = case_rmse(base[cid].theta_final, base[cid].theta_true)
        rp, tp = case_rmse(prop[cid].theta_final, prop[cid].theta_true)
        rot.append(rb - rp)
        trans.append(tb - tp)
    return ids, np.array(rot), np.array(trans)


# -- experiment driver --------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    n_cases: int = 100
    seed: int = 0
    cam: CameraGeometry = field(default_factory=CameraGeometry)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    similarity: SimilarityKind = SimilarityKind.grad_ncc
    noise_sigma: float = 0.0
    naive_init: str = "identity"


def sample_cases(pose_range: PoseRange, n_cases: int, seed: int, environment: str) -> list[PoseParams]:
    rng = make_rng(derive_seed(seed, "cases", environment))
    return [sample_pose(pose_range, rng) for _ in range(n_cases)]


def _naive_pose(cfg: ExperimentConfig, pose_range: PoseRange, environment: str, case_id: int) -> PoseParams:
    if cfg.naive_init == "identity":
        return IDENTITY_POSE
    if cfg.naive_init == "random":
        return sample_pose(pose_range, make_rng(derive_seed(cfg.seed, "naive", environment, case_id)))
    raise InvalidArgumentError(f"unknown naive_init mode {cfg.naive_init!r}")


# worker state for process pools: set once per worker by _init_worker
_WORKER: dict = {}


def _init_worker(volumes, references, cfg):
    _WORKER.update(volumes=volumes, references=references, cfg=cfg)


def _run_case(task):
    case_id, environment, method, theta_true, theta_init, volume_id = task
    cfg: ExperimentConfig = _WORKER["cfg"]
    volume = _WORKER["volumes"][volume_id]
    target = _render_target(volume, theta_true, cfg, environment, case_id)
    try:
        res = register(target, volume, cfg.cam, theta_init, cfg.optimizer, cfg.similarity, cfg.projection)
        final, iters, conv, div = res.theta_final, res.iterations, res.converged, False
    except DivergedError as exc:
        final, iters, conv, div = theta_init, len(exc.trace), False, True
    return CaseResult(case_id, environment, method, theta_true, theta_init, final, iters, conv, volume_id, div)


def _render_target(volume, theta_true, cfg: ExperimentConfig, environment: str, case_id: int):
    target = render_drr(volume, theta_true, cfg.cam, cfg.projection)
    if cfg.noise_sigma > 0:
        target = add_noise(target, cfg.noise_sigma, make_rng(derive_seed(cfg.seed, "noise", environment, case_id)))
    return target


def run_experiment(
    volumes: dict,
    environments: dict[str, PoseRange],
    init_methods,
    cfg: ExperimentConfig,
    models: dict | None = None,
    threads: int = 1,
    progress=None,
) -> tuple[list[CaseResult], ErrorReport | None]:
    """Paired registration experiment.

    Every init method sees the same sequence of true poses and targets per
    environment, so per-case differences are paired. ``models`` maps
    ``(environment, method)`` to a trained :class:`RegressorModel` for each
    proposed method. Returns the case results in (environment, case, method)
    order and their aggregate (``None`` when there are no cases).
    """
    methods = [InitMethod(m) for m in init_methods]
    models = models or {}
    for env in environments:
        for m in methods:
            if m is not InitMethod.original and (env, m.value) not in models:
                raise InvalidArgumentError(f"no trained model for ({env}, {m.value})")
    vids = list(volumes)
    if not vids:
        raise InvalidArgumentError("need at least one test volume")
    references = {}
    if any(m.variant is not None and m.variant.needs_reference for m in methods):
        references = {vid: render_drr(v, IDENTITY_POSE, cfg.cam, cfg.projection) for vid, v in volumes.items()}

    tasks = []
    for env, prange in environments.items():
        truths = sample_cases(prange, cfg.n_cases, cfg.seed, env)
        for case_id, theta_true in enumerate(truths):
            vid = vids[case_id % len(vids)]
            target = None
            for m in methods:
                if m is InitMethod.original:
                    theta_init = _naive_pose(cfg, prange, env, case_id)
                else:
                    if target is None:
                        target = _render_target(volumes[vid], theta_true, cfg, env, case_id)
                    model = models[(env, m.value)]
                    ref = references.get(vid) if model.variant.needs_reference else None
                    theta_init = predict_initial_pose(model, target, reference=ref)
                tasks.append((case_id, env, m, theta_true, theta_init, vid))

    results = []
    if threads <= 1:
        _init_worker(volumes, references, cfg)
        for i, task in enumerate(tasks):
            results.append(_run_case(task))
            if progress is not None:
                progress(i + 1, len(tasks), results[-1])
    else:
        with ProcessPoolExecutor(threads, initializer=_init_worker, initargs=(volumes, references, cfg)) as pool:
            for i, r in enumerate(pool.map(_run_case, tasks, chunksize=1)):
                results.append(r)
                if progress is not None:
                    progress(i + 1, len(tasks), r)
    report = aggregate(results) if results else None
    return results, report


# -- export -------------------------------------------------------------------


def write_jsonl(results, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in results:
            d = r.to_dict()
            if extra:
                d.update(extra)
            fh.write(json.dumps(d, sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> list[CaseResult]:
    with Path(path).open() as fh:
        return [CaseResult.from_dict(json.loads(line)) for line in fh if line.strip()]


def report_csv_text(report: ErrorReport, provenance: dict | None = None) -> str:
    buf = io.StringIO()
    buf.write("# rotation errors pooled over rx, ry, rz of all cases; translation RMSE over tx, ty, tz; "
              "xy MAE over tx, ty; z MAE over tz\n")
    if provenance is not None:
        buf.write("# provenance: " + json.dumps(provenance, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("environment", "stage", "init_method", "n_cases") + TABLE_COLUMNS)
    for env, stage, m, s in report.rows():
        vals = [("" if getattr(s, c) is None else f"{getattr(s, c):.6f}") for c in TABLE_COLUMNS]
        w.writerow([env, stage, m, s.n_cases] + vals)
    return buf.getvalue()


def write_report_csv(report: ErrorReport, path, provenance: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_csv_text(report, provenance))
    return path


def write_deltas_csv(results, path, methods=None, provenance: dict | None = None) -> Path:
    """Per-case RMSE differences (original minus proposed), the box-plot data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    results = list(results)
    envs = list(dict.fromkeys(r.environment for r in results))
    present = list(dict.fromkeys(InitMethod(r.init_method).value for r in results))
    methods = methods or [m for m in present if m != InitMethod.original.value]
    buf = io.StringIO()
    if provenance is not None:
        buf.write("# provenance: " + json.dumps(provenance, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["environment", "init_method", "case_id", "rot_rmse_delta_deg", "trans_rmse_delta_mm"])
    for env in envs:
        for m in methods:
            ids, rot, trans = rmse_deltas(results, env, InitMethod.original.value, m)
            for cid, a, b in zip(ids, rot, trans):
                w.writerow([env, m, cid, f"{a:.6f}", f"{b:.6f}"])
    path.write_text(buf.getvalue())
    return path


def significance_table(results) -> list[dict]:
    """One-tailed paired t-tests of original vs each proposed method, per environment."""
    results = list(results)
    envs = list(dict.fromkeys(r.environment for r in results))
    present = list(dict.fromkeys(InitMethod(r.init_method).value for r in results))
    rows = []
    for env in envs:
        for m in present:
            if m == InitMethod.original.value or InitMethod.original.value not in present:
                continue
            ids, rot, trans = rmse_deltas(results, env, InitMethod.original.value, m)
            if len(ids) < 2:
                continue
            for quantity, d in (("rotation", rot), ("translation", trans)):
                t, p = paired_one_tailed_ttest(d)
                rows.append({"environment": env, "init_method": m, "quantity": quantity,
                             "n": len(ids), "mean_delta": float(np.mean(d)), "t": t, "p": p})
    return rows
