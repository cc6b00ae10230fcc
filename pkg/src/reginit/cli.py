"""``reginit`` command line: phantom, gen-data, train-init, register, evaluate, export.

Every subcommand reads the run configuration (``--config FILE``, else
``$REGINIT_CONFIG``, else built-in defaults), applies flag overrides, validates
the result before doing any work, and embeds a provenance block in what it
writes. On success a one-line JSON summary goes to stdout and the exit code
is 0. On failure a single JSON line ``{"error": ..., "message": ..., "path": ...}``
goes to stderr and the exit code is 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path


from . import __version__
from .config import RunConfig, load_config
from .errors import ArtifactExistsError, FormatError, InvalidArgumentError, RegInitError
from .evaluation import (
    ExperimentConfig,
    InitMethod,
    run_experiment,
    significance_table,
    write_deltas_csv,
    write_jsonl,
    write_report_csv,
)
from .geometry import IDENTITY_POSE, PoseParams, PoseRange
from .initializer import (
    InitializerVariant,
    RegressorModel,
    generate_dataset,
    load_dataset,
    load_model,
    predict_initial_pose,
    reference_images,
    save_dataset,
    save_model,
    train,
)
from .projector import export_png16, load_image, render_drr
from .registration import register
from .similarity import difference_map, export_difference_png
from .volume import PhantomKind, PhantomSpec, load_volume, make_phantom, read_raw, write_raw

DIFF_HELP = (
    "difference maps show normalized moving minus target; colormap: blue = -limit, "
    "white = 0, red = +limit (default limit 1.0)"
)


class _JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", f"{self.prog}: {message}")
        sys.exit(2)


def _emit_error(kind: str, message: str, path=None) -> None:
    payload = {"error": kind, "message": message}
    if path is not None:
        payload["path"] = str(path)
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


def _emit(summary: dict) -> None:
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")


def _guard(paths, overwrite: bool) -> None:
    for p in paths:
        if Path(p).exists() and not overwrite:
            exc = ArtifactExistsError(f"{p} exists; pass --overwrite to replace it")
            exc.filename = str(p)
            raise exc


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        exc = FileNotFoundError(f"{what} not found: {p}")
        exc.filename = str(p)
        raise exc
    return p


def _stem_files(stem) -> list[Path]:
    s = Path(stem)
    if s.suffix in (".json", ".raw"):
        s = s.with_suffix("")
    return [s.with_suffix(".json"), s.with_suffix(".raw")]


def _volume_id(stem) -> str:
    return _stem_files(stem)[0].with_suffix("").name


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _load_volume_checked(stem):
    json_path, raw_path = _stem_files(stem)
    _require(json_path, "volume header")
    _require(raw_path, "volume data")
    return load_volume(stem)


# -- configuration ------------------------------------------------------------


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    top = {}
    # for `phantom`, --seed is the phantom shape seed rather than the root seed
    keys = ("threads",) if args.command == "phantom" else ("seed", "threads")
    for key in keys + ("noise_sigma", "naive_init", "output_dir"):
        val = getattr(args, key, None)
        if val is not None:
            top[key] = val
    if getattr(args, "similarity", None) is not None:
        top["similarity"] = args.similarity
    if top:
        cfg = replace(cfg, **top)
    if getattr(args, "n_samples_per_ray", None) is not None:
        cfg = replace(cfg, projection=replace(cfg.projection, n_samples_per_ray=args.n_samples_per_ray))
    if getattr(args, "max_iters", None) is not None:
        cfg = replace(cfg, optimizer=replace(cfg.optimizer, max_iters=args.max_iters))
    return cfg


def _environment(cfg: RunConfig, name: str) -> PoseRange:
    if name not in cfg.environments:
        raise InvalidArgumentError(f"unknown environment {name!r}; configured: {sorted(cfg.environments)}")
    return cfg.environments[name]


# -- phantom ------------------------------------------------------------------


def cmd_phantom(args, cfg: RunConfig) -> dict:
    ph = cfg.phantom
    dims = args.dims if args.dims is not None else ph.dims
    spacing = args.spacing if args.spacing is not None else ph.spacing_mm
    spec = PhantomSpec(
        kind=PhantomKind(args.kind or ph.kind),
        seed=args.seed if args.seed is not None else ph.train_seeds[0],
        intensity_scale=args.intensity_scale if args.intensity_scale is not None else ph.intensity_scale,
    )
    _guard(_stem_files(args.out), args.overwrite)
    vol = make_phantom(dims, spacing, spec)
    prov = cfg.provenance(command="phantom", phantom={"kind": spec.kind.value, "seed": spec.seed,
                                                      "intensity_scale": spec.intensity_scale,
                                                      "dims": dims, "spacing_mm": spacing})
    json_path, raw_path = write_raw(args.out, vol.data, vol.spacing_mm, {"kind": "volume", "provenance": prov})
    return {
        "command": "phantom",
        "header": str(json_path),
        "data": str(raw_path),
        "dims": list(vol.dims),
        "mass": round(vol.total_mass(), 6),
        "centroid_voxel": [round(float(c), 6) for c in vol.centroid_voxel()],
    }


# -- gen-data -----------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> dict:
    env = args.environment
    prange = _environment(cfg, env)
    volumes = {}
    for stem in args.volumes:
        vid = _volume_id(stem)
        if vid in volumes:
            raise InvalidArgumentError(f"duplicate volume id {vid!r}")
        volumes[vid] = _load_volume_checked(stem)
    out = Path(args.out)
    _guard([out / "manifest.json"], args.overwrite)
    n = args.n if args.n is not None else cfg.training.n_train_samples
    seed = args.data_seed if args.data_seed is not None else cfg.derive_seed("dataset", env)
    samples = generate_dataset(volumes, prange, n, seed, cfg.camera, cfg.projection, cfg.noise_sigma)
    refs = reference_images(volumes, cfg.camera, cfg.projection)
    meta = {
        "environment": env,
        "pose_range": prange.to_dict(),
        "camera": cfg.camera.to_dict(),
        "n_samples_per_ray": cfg.projection.n_samples_per_ray,
        "noise_sigma": cfg.noise_sigma,
        "volumes": {vid: _file_digest(_stem_files(s)[1]) for vid, s in zip(volumes, args.volumes)},
        "provenance": cfg.provenance(command="gen-data", dataset_seed=seed, n=n, environment=env),
    }
    manifest = save_dataset(out, samples, refs, meta)
    return {"command": "gen-data", "manifest": str(manifest), "n": n, "seed": seed, "environment": env}


# -- train-init ---------------------------------------------------------------


def cmd_train_init(args, cfg: RunConfig) -> dict:
    data_dir = Path(args.data)
    _require(data_dir / "manifest.json", "dataset manifest")
    variant = InitializerVariant(args.variant)
    out = Path(args.out)
    loss_csv = out.with_name(out.name + ".loss.csv")
    _guard([out, loss_csv], args.overwrite)
    samples, refs, meta = load_dataset(data_dir)
    if "pose_range" not in meta:
        raise FormatError(f"{data_dir / 'manifest.json'}: dataset meta lacks pose_range")
    prange = PoseRange.from_dict(meta["pose_range"])
    env = meta.get("environment", "custom")

    tc = cfg.training
    overrides = {k: v for k, v in (("epochs", args.epochs), ("batch_size", args.batch_size),
                                   ("learning_rate", args.lr), ("optimizer", args.optimizer)) if v is not None}
    seed = args.train_seed if args.train_seed is not None else cfg.derive_seed("model", env, variant.value)
    tc = replace(tc, seed=seed, n_train_samples=len(samples), **overrides)
    model = RegressorModel.create(variant, prange, seed=cfg.derive_seed("model-init", env, variant.value))
    log = None
    if args.verbose:
        def log(epoch, loss):
            sys.stderr.write(f"epoch {epoch + 1}/{tc.epochs} loss {loss:.6f}\n")
    model, trace = train(model, samples, tc, refs, log)
    prov = cfg.provenance(command="train-init", environment=env, variant=variant.value, training=tc.to_dict(),
                          dataset_manifest=_file_digest(data_dir / "manifest.json"))
    save_model(model, out, prov)
    loss_csv.parent.mkdir(parents=True, exist_ok=True)
    with loss_csv.open("w", newline="") as fh:
        fh.write("# provenance: " + json.dumps(prov, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(trace):
            w.writerow([i + 1, f"{v:.9g}"])
    return {"command": "train-init", "model": str(out), "loss_csv": str(loss_csv),
            "final_loss": trace[-1], "epochs": tc.epochs, "variant": variant.value}


# -- register -----------------------------------------------------------------


def _parse_pose(text: str) -> PoseParams:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise InvalidArgumentError(f"pose must be 6 comma-separated numbers, got {text!r}") from exc
    if len(vals) != 6:
        raise InvalidArgumentError(f"pose must be 6 comma-separated numbers, got {len(vals)}")
    return PoseParams.from_array(vals)


def cmd_register(args, cfg: RunConfig) -> dict:
    method = InitMethod(args.init)
    volume = _load_volume_checked(args.volume)
    target_files = _stem_files(args.target)
    for p in target_files:
        _require(p, "target image")
    if method is not InitMethod.original:
        if args.model is None:
            raise InvalidArgumentError(f"--init {method.value} needs --model")
        _require(args.model, "model file")
    out = Path(args.out)
    outputs = [out]
    if args.theta_csv:
        outputs.append(Path(args.theta_csv))
    if args.diff_png:
        prefix = Path(args.diff_png)
        for stage in ("initial", "final"):
            outputs.append(prefix.with_name(f"{prefix.name}_{stage}.png"))
            outputs.extend(_stem_files(prefix.with_name(f"{prefix.name}_{stage}")))
    _guard(outputs, args.overwrite)

    target = load_image(args.target)
    if target.shape != (cfg.camera.detector_rows, cfg.camera.detector_cols):
        raise InvalidArgumentError(
            f"target is {target.shape[0]}x{target.shape[1]} but the camera detector is "
            f"{cfg.camera.detector_rows}x{cfg.camera.detector_cols}"
        )
    initializer = {"method": method.value}
    if method is InitMethod.original:
        theta_init = _parse_pose(args.theta0) if args.theta0 else IDENTITY_POSE
    else:
        model = load_model(args.model)
        if model.variant is not method.variant:
            raise InvalidArgumentError(
                f"{args.model} holds a {model.variant.value} model, --init {method.value} needs {method.variant.value}"
            )
        theta_init = predict_initial_pose(model, target, volume, cfg.camera, cfg.projection)
        initializer.update(model=str(args.model), model_digest=_file_digest(args.model))

    res = register(target, volume, cfg.camera, theta_init, cfg.optimizer, cfg.similarity, cfg.projection,
                   record_thetas=bool(args.theta_csv))
    prov = cfg.provenance(
        command="register",
        volume=_file_digest(_stem_files(args.volume)[1]),
        target=_file_digest(target_files[1]),
        theta_init=theta_init.to_dict(),
    )
    body = {"result": res.to_dict(), "initializer": initializer, "provenance": prov}
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")

    if args.theta_csv:
        p = Path(args.theta_csv)
        p.parent.mkdir(parents=True, exist_ok=True)
        with p.open("w", newline="") as fh:
            fh.write("# provenance: " + json.dumps(prov, sort_keys=True) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loss", "rx_deg", "ry_deg", "rz_deg", "tx_mm", "ty_mm", "tz_mm"])
            for i, (loss, th) in enumerate(zip(res.loss_trace, res.theta_trace)):
                w.writerow([i, f"{loss:.9g}"] + [f"{v:.9g}" for v in th.as_array()])
    if args.diff_png:
        prefix = Path(args.diff_png)
        for stage, theta in (("initial", theta_init), ("final", res.theta_final)):
            moving = render_drr(volume, theta, cfg.camera, cfg.projection)
            diff = difference_map(moving.data, target.data)
            stem = prefix.with_name(f"{prefix.name}_{stage}")
            write_raw(stem, diff.T[:, :, None], target.pixel_spacing_mm,
                      {"kind": "difference_map", "stage": stage, "provenance": prov})
            export_difference_png(diff, stem.with_suffix(".png"), args.diff_limit)
    return {"command": "register", "out": str(out), "iterations": res.iterations, "converged": res.converged,
            "theta_final": res.theta_final.to_dict()}


# -- evaluate -----------------------------------------------------------------


def _parse_model_specs(specs) -> dict:
    models = {}
    for spec in specs or []:
        key, sep, path = spec.partition("=")
        env, sep2, method = key.partition(":")
        if not (sep and sep2 and env and method and path):
            raise InvalidArgumentError(f"--model expects ENV:METHOD=PATH, got {spec!r}")
        models[(env, InitMethod(method).value)] = Path(path)
    return models


def cmd_evaluate(args, cfg: RunConfig) -> dict:
    envs = args.environments or list(cfg.environments)
    ranges = {e: _environment(cfg, e) for e in envs}
    methods = [InitMethod(m).value for m in (args.methods or [m.value for m in InitMethod])]
    model_paths = _parse_model_specs(args.model)
    for env in envs:
        for m in methods:
            if m != InitMethod.original.value:
                if (env, m) not in model_paths:
                    raise InvalidArgumentError(f"no --model given for {env}:{m}")
                _require(model_paths[(env, m)], "model file")
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "evaluate"
    files = {name: out / name for name in ("results.jsonl", "table.csv", "deltas.csv", "report.json")}
    _guard(files.values(), args.overwrite)

    if args.volumes:
        volumes = {}
        for stem in args.volumes:
            volumes[_volume_id(stem)] = _load_volume_checked(stem)
        volume_prov = {vid: _file_digest(_stem_files(s)[1]) for vid, s in zip(volumes, args.volumes)}
    else:
        ph = cfg.phantom
        volumes = {f"test{s}": make_phantom(ph.dims, ph.spacing_mm, PhantomSpec(ph.kind, s, ph.intensity_scale))
                   for s in ph.test_seeds}
        volume_prov = {vid: f"phantom:{ph.kind.value}:{s}" for vid, s in zip(volumes, ph.test_seeds)}
    models = {}
    for key, path in model_paths.items():
        if key[0] in envs and key[1] in methods:
            model = load_model(path)
            if model.variant is not InitMethod(key[1]).variant:
                raise InvalidArgumentError(f"{path} holds a {model.variant.value} model, not {key[1]}")
            models[key] = model

    n_cases = args.n_cases if args.n_cases is not None else cfg.evaluation.n_cases
    exp = ExperimentConfig(n_cases=n_cases, seed=cfg.seed, cam=cfg.camera, projection=cfg.projection,
                           optimizer=cfg.optimizer, similarity=cfg.similarity, noise_sigma=cfg.noise_sigma,
                           naive_init=cfg.naive_init)
    progress = None
    if args.verbose:
        def progress(i, n, r):
            sys.stderr.write(f"[{i}/{n}] {r.environment} case {r.case_id} {r.init_method.value} "
                             f"iters {r.iterations}\n")
    results, report = run_experiment(volumes, ranges, methods, exp, models, cfg.threads, progress)

    prov = cfg.provenance(command="evaluate", n_cases=n_cases, environments=envs, methods=methods,
                          volumes=volume_prov,
                          models={f"{e}:{m}": _file_digest(p) for (e, m), p in sorted(model_paths.items())})
    line_prov = {"config_hash": prov["config_hash"], "root_seed": cfg.seed, "version": __version__}
    write_jsonl(results, files["results.jsonl"], {"provenance": line_prov})
    if report is None:
        raise InvalidArgumentError("n_cases is 0; nothing to report")
    write_report_csv(report, files["table.csv"], prov)
    write_deltas_csv(results, files["deltas.csv"], provenance=prov)
    summary = {"report": report.to_dict(), "significance": significance_table(results), "provenance": prov}
    files["report.json"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"command": "evaluate", "out": str(out), "n_results": len(results),
            "rows": len(report.rows())}


# -- export -------------------------------------------------------------------


def cmd_export(args, cfg: RunConfig) -> dict:
    for p in _stem_files(args.input):
        _require(p, "input image")
    _guard([args.out], args.overwrite)
    arr, header = read_raw(args.input)
    if arr.shape[2] != 1:
        raise FormatError(f"{args.input}: export handles 2D images (nz = 1), got dims {list(arr.shape)}")
    kind = header.get("kind", "detector_image")
    if kind == "difference_map":
        export_difference_png(arr[:, :, 0].T, args.out, args.diff_limit)
    else:
        export_png16(load_image(args.input), args.out)
    return {"command": "export", "out": str(args.out), "kind": kind}


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (default: $REGINIT_CONFIG, else built-in)")
    common.add_argument("--seed", type=int, help="root seed override")
    common.add_argument("--threads", type=int, help="maximum worker processes")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("--similarity", choices=["ncc", "grad_ncc"])
    common.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    common.add_argument("--n-samples-per-ray", type=int, dest="n_samples_per_ray")
    common.add_argument("--max-iters", type=int, dest="max_iters")
    common.add_argument("--output-dir", dest="output_dir")
    common.add_argument("--verbose", action="store_true", help="progress on stderr")

    parser = _JsonArgumentParser(prog="reginit", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"reginit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_JsonArgumentParser)

    p = sub.add_parser("phantom", parents=[common], help="write a synthetic phantom volume")
    p.add_argument("--kind", choices=[k.value for k in PhantomKind])
    p.add_argument("--dims", type=int)
    p.add_argument("--spacing", type=float, help="voxel spacing in mm")
    p.add_argument("--intensity-scale", type=float, dest="intensity_scale")
    p.add_argument("--out", required=True, help="output stem; writes <stem>.json and <stem>.raw")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("gen-data", parents=[common], help="render a training dataset")
    p.add_argument("--volumes", nargs="+", required=True, help="volume stems")
    p.add_argument("--environment", default="standard")
    p.add_argument("--n", type=int, help="number of samples (default: training.n_train_samples)")
    p.add_argument("--data-seed", type=int, dest="data_seed")
    p.add_argument("--out", required=True, help="dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-init", parents=[common], help="train an initializer model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--variant", required=True, choices=[v.value for v in InitializerVariant])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--train-seed", type=int, dest="train_seed")
    p.add_argument("--out", required=True, help="model file; the loss CSV goes to <out>.loss.csv")
    p.set_defaults(func=cmd_train_init)

    p = sub.add_parser("register", parents=[common], help="register one target image", epilog=DIFF_HELP)
    p.add_argument("--volume", required=True)
    p.add_argument("--target", required=True, help="target image stem")
    p.add_argument("--init", default="original", choices=[m.value for m in InitMethod])
    p.add_argument("--model", help="model file for proposed_* init")
    p.add_argument("--theta0", help="initial pose rx,ry,rz,tx,ty,tz for --init original (default identity)")
    p.add_argument("--out", required=True, help="result JSON")
    p.add_argument("--theta-csv", dest="theta_csv", help="per-iteration loss and pose CSV")
    p.add_argument("--diff-png", dest="diff_png", help="prefix for <prefix>_{initial,final}.png/.json/.raw")
    p.add_argument("--diff-limit", type=float, default=1.0, dest="diff_limit")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", parents=[common], help="paired registration experiment")
    p.add_argument("--volumes", nargs="+", help="test volume stems (default: phantoms from phantom.test_seeds)")
    p.add_argument("--model", action="append", metavar="ENV:METHOD=PATH")
    p.add_argument("--methods", nargs="+", choices=[m.value for m in InitMethod])
    p.add_argument("--environments", nargs="+")
    p.add_argument("--n-cases", type=int, dest="n_cases")
    p.add_argument("--out", help="output directory (default: <output_dir>/evaluate)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export", parents=[common], help="convert a raw image to PNG", epilog=DIFF_HELP)
    p.add_argument("--input", required=True, help="image stem")
    p.add_argument("--out", required=True, help="PNG path")
    p.add_argument("--diff-limit", type=float, default=1.0, dest="diff_limit")
    p.set_defaults(func=cmd_export)
    return parser


def _error_path(exc) -> str | None:
    return getattr(exc, "filename", None)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        summary = args.func(args, cfg)
    except (RegInitError, ValueError) as exc:
        _emit_error(type(exc).__name__, str(exc), _error_path(exc))
        return 1
    except OSError as exc:
        _emit_error(type(exc).__name__, str(exc), _error_path(exc))
        return 1
    _emit(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
