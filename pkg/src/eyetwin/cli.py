"""Command-line entry points for every pipeline stage.

Each subcommand resolves its inputs from defaults, then an optional flat
key=value config file, then explicit flags (flags win). Successful runs
print a one-line JSON summary on stdout and exit 0; failures print a
machine-readable error object on stderr and exit 1. Heavy imports stay
inside the commands so `--help` is instant.
"""

from __future__ import annotations

import csv
import functools
import json
import sys
import time
from pathlib import Path

import click

from .config import ConfigError, load_config, resolve


def _fail(code: str, message: str) -> None:
    click.echo(json.dumps({"error": code, "message": message}), err=True)
    sys.exit(1)


def _json_default(o):
    import numpy as np

    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        from .diffusion import CheckpointError

        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail("bad-config", str(exc))
        except CheckpointError as exc:
            _fail("bad-checkpoint", str(exc))
        except (FileNotFoundError, NotADirectoryError, IsADirectoryError) as exc:
            _fail("missing-file", str(exc))
        except (ValueError, KeyError) as exc:
            _fail("invalid-input", str(exc))

    return wrapper


def _resolve(config_path, defaults: dict, flags: dict) -> dict:
    file_values = load_config(config_path) if config_path else {}
    return resolve(defaults, file_values, flags)


def _emit(payload: dict) -> None:
    click.echo(json.dumps(payload))


def _config_option(fn):
    return click.option(
        "--config", "config_path", type=click.Path(exists=True, dir_okay=False),
        default=None, help="flat key=value config file; flags override it",
    )(fn)


@click.group()
@click.version_option(package_name="eyetwin")
def main():
    """Eye-globe digital twin pipeline."""


# ---------------------------------------------------------------------------


@main.command()
@_config_option
@click.option("--n", type=int, default=None, help="cohort size")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--voxels/--no-voxels", default=None, help="also write occupancy grids")
@click.option("--spacing", type=float, default=None, help="voxel pitch, mm")
@click.option("--laterality", type=click.Choice(["OD", "OS", "both"]), default=None)
@_guard
def synth(config_path, **flags):
    """Sample a synthetic cohort and write the dataset directory."""
    opts = _resolve(config_path, {
        "n": 200, "seed": 0, "out": "data", "voxels": False,
        "spacing": 1.0, "laterality": "both",
    }, flags)
    from .cohort import CohortConfig, make_cohort, write_dataset

    sides = ("OD", "OS") if opts["laterality"] == "both" else (opts["laterality"],)
    cases = make_cohort(opts["n"], seed=opts["seed"],
                        cfg=CohortConfig(lateralities=sides))
    out = write_dataset(cases, opts["out"], voxels=opts["voxels"],
                        spacing=opts["spacing"])
    _emit({"cases": len(cases), "seed": opts["seed"], "out": str(out)})


@main.command()
@_config_option
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(), default=None)
@click.option("--spacing", type=float, default=None, help="voxel pitch when no grids stored")
@click.option("--smooth-iters", type=int, default=None)
@_guard
def reconstruct(config_path, data, **flags):
    """Voxelize (or load stored grids) and extract smoothed surface meshes."""
    opts = _resolve(config_path, {
        "out": "recon", "spacing": 1.0, "smooth_iters": 10,
    }, flags)
    from .cohort import load_dataset, voxelize
    from .geometry import (TriangleMesh, load_voxel_grid, marching_cubes,
                           save_mesh_ply, taubin_smooth)

    out = Path(opts["out"])
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    voxel_dir = Path(data) / "voxels"
    n = 0
    for params, record, mesh in load_dataset(data):
        if (voxel_dir / f"{params.case_id}.vox").exists():
            grid = load_voxel_grid(voxel_dir / params.case_id)
        else:
            grid = voxelize(mesh, spacing=opts["spacing"])
        raw = marching_cubes(grid)
        smooth = taubin_smooth(raw, iterations=opts["smooth_iters"])
        tagged = TriangleMesh(smooth.vertices, smooth.faces,
                              laterality=record.laterality)
        save_mesh_ply(tagged, out / "meshes" / f"{params.case_id}.ply")
        n += 1
    _emit({"cases": n, "out": str(out)})


@main.command()
@_config_option
@click.option("--meshes", "mesh_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="directory with (or containing meshes/ of) PLY files")
@click.option("--out", type=click.Path(), default=None, help="shape matrix file")
@_guard
def register(config_path, mesh_dir, **flags):
    """Register every mesh onto the reference topology; write shape vectors."""
    opts = _resolve(config_path, {"out": "shapes.bin"}, flags)
    from .geometry import load_mesh_ply
    from .registration import EyeRegistration, save_shapes

    root = Path(mesh_dir)
    if (root / "meshes").is_dir():
        root = root / "meshes"
    files = sorted(root.glob("*.ply"))
    if not files:
        raise FileNotFoundError(f"no PLY meshes under {root}")
    pipe = EyeRegistration().fit()
    shapes, rms = [], []
    for f in files:
        result = pipe.register(load_mesh_ply(f), source_id=f.stem)
        shapes.append(result.shape)
        rms.append(result.report["projection_rms_mm"])
    out = save_shapes(opts["out"], shapes)
    _emit({
        "shapes": len(shapes), "out": str(out),
        "mean_projection_rms_mm": sum(rms) / len(rms),
    })


@main.command("build-3dmm")
@_config_option
@click.option("--shapes", "shapes_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--laterality", type=click.Choice(["OD", "OS"]), default=None)
@click.option("--out", type=click.Path(), default=None)
@_guard
def build_3dmm_cmd(config_path, shapes_path, **flags):
    """Fit the PCA shape model on one laterality's registered shapes."""
    opts = _resolve(config_path, {"laterality": "OD", "out": "model.3dmm"}, flags)
    from .morphable import build_3dmm, save_3dmm
    from .registration import load_shapes

    side = opts["laterality"]
    shapes = [s for s in load_shapes(shapes_path) if s.laterality == side]
    if len(shapes) < 2:
        raise ValueError(f"need at least 2 shapes with laterality {side}")
    model = build_3dmm(shapes, laterality=side)
    out = save_3dmm(model, opts["out"])
    _emit({
        "out": str(out), "laterality": side, "exemplars": model.n_exemplars,
        "dim": model.dim, "n_vertices": model.n_vertices,
    })


@main.command("train")
@_config_option
@click.option("--shapes", "shapes_path", type=click.Path(exists=True, dir_okay=False),
              required=True)
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="shape model (.3dmm)")
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None,
              help="dataset directory for metadata + embeddings")
@click.option("--out", type=click.Path(), default=None, help="checkpoint path")
@click.option("--steps", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--lambda-cd", type=float, default=None)
@click.option("--dropout", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--width", type=int, default=None)
@click.option("--blocks", type=int, default=None)
@click.option("--log", "log_path", type=click.Path(), default=None)
@_guard
def train_cmd(config_path, shapes_path, model_path, data, **flags):
    """Train the conditional denoiser on registered shapes."""
    opts = _resolve(config_path, {
        "out": "model.ddpm", "steps": 600, "batch_size": 16, "lr": 1e-4,
        "lambda_cd": 1.0, "dropout": 0.5, "seed": 0, "width": 256,
        "blocks": 4, "log_path": None,
    }, flags)
    import numpy as np

    from .conditioning import (ConditionSources, FileEmbeddingProvider,
                               LateralityTable, build_condition, read_records)
    from .diffusion import TrainConfig, save_checkpoint, train
    from .morphable import encode, load_3dmm
    from .registration import load_shapes

    model = load_3dmm(model_path)
    shapes = [s for s in load_shapes(shapes_path)
              if s.laterality == model.laterality]
    if not shapes:
        raise ValueError(f"no shapes match model laterality {model.laterality!r}")
    latents = np.stack([encode(s, model).alpha for s in shapes])
    vertices = np.stack([s.as_matrix() for s in shapes])

    sources = None
    if data is not None:
        records = {r.case_id: r for r in read_records(Path(data) / "manifest.csv")}
        emb_dir = Path(data) / "embeddings"
        provider = FileEmbeddingProvider(emb_dir) if emb_dir.is_dir() else None
        sources = []
        for s in shapes:
            rec = records.get(s.source_id)
            if rec is None:
                raise KeyError(f"case {s.source_id!r} missing from manifest")
            cfp = None
            if provider is not None and rec.embedding_id:
                cfp = provider.get(rec.embedding_id)
            sources.append(ConditionSources(
                cfp=cfp, laterality=rec.laterality, al=rec.al_mm, se=rec.se_d,
            ))

    table = LateralityTable()
    condition_fn = lambda src: build_condition(src, table).vector  # noqa: E731
    result = train(
        latents, vertices, sources, model, condition_fn,
        TrainConfig(
            batch_size=opts["batch_size"], steps=opts["steps"], lr=opts["lr"],
            lambda_cd=opts["lambda_cd"], dropout_p=opts["dropout"],
            seed=opts["seed"], width=opts["width"], blocks=opts["blocks"],
            log_path=opts["log_path"],
        ),
        table=table,
    )
    out = save_checkpoint(opts["out"], result.denoiser, result.schedule,
                          result.whitening, result.config, table=result.table)
    from .diffusion import architecture_hash

    _emit({
        "out": str(out),
        "checkpoint_hash": architecture_hash(result.denoiser),
        "steps": opts["steps"],
        "final_loss_mse": result.log[-1]["loss_mse"] if result.log else None,
        "final_loss_cd": result.log[-1]["loss_cd"] if result.log else None,
    })


def _load_stack(ckpt, model_paths, data=None, expected_hash=None,
                tta_k=4, steps=10):
    """Shared by generate/counterfactual/serve: checkpoint -> ModelStack."""
    from .conditioning import FileEmbeddingProvider, LateralityTable
    from .diffusion import architecture_hash, load_checkpoint
    from .morphable import ModelRegistry, load_3dmm
    from .stack import ModelStack

    denoiser, sched, whitening, _, table = load_checkpoint(ckpt, expected_hash)
    registry = ModelRegistry([load_3dmm(p) for p in model_paths])
    provider = None
    if data is not None:
        emb_dir = Path(data) / "embeddings"
        if emb_dir.is_dir():
            provider = FileEmbeddingProvider(emb_dir)
    sides = registry.lateralities()
    return ModelStack(
        denoiser=denoiser, schedule=sched, whitening=whitening,
        models=registry, table=table or LateralityTable(), provider=provider,
        checkpoint_hash=architecture_hash(denoiser),
        default_laterality="OD" if "OD" in sides else sides[0],
        tta_k=tta_k, steps=steps,
    )


@main.command()
@_config_option
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--model", "model_paths", type=click.Path(exists=True, dir_okay=False),
              multiple=True, required=True, help="shape model(s), one per laterality")
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--al", type=float, default=None)
@click.option("--se", type=float, default=None)
@click.option("--laterality", type=click.Choice(["OD", "OS"]), default=None)
@click.option("--cfp-id", default=None)
@click.option("--unconditional", is_flag=True, default=False)
@click.option("--tta-k", type=int, default=None)
@click.option("--steps", type=int, default=None, help="sampling steps")
@click.option("--seed", type=int, default=None)
@click.option("--expected-hash", default=None, help="pin the checkpoint hash")
@click.option("--out", type=click.Path(), default=None, help="output mesh path")
@_guard
def generate(config_path, ckpt, model_paths, data, unconditional, **flags):
    """Generate one globe from conditions; write the mesh, print the readout."""
    opts = _resolve(config_path, {
        "al": None, "se": None, "laterality": None, "cfp_id": None,
        "tta_k": 4, "steps": 10, "seed": 0, "expected_hash": None,
        "out": "generated.ply",
    }, flags)
    conditioned = any(
        opts[k] is not None for k in ("al", "se", "laterality", "cfp_id")
    )
    if not conditioned and not unconditional:
        raise ValueError(
            "no conditioning given; pass --unconditional for a free draw"
        )
    from .geometry import save_mesh_ply

    t0 = time.perf_counter()
    stack = _load_stack(ckpt, model_paths, data, opts["expected_hash"],
                        tta_k=opts["tta_k"], steps=opts["steps"])
    sources = stack.sources_for(
        al=opts["al"], se=opts["se"], laterality=opts["laterality"],
        cfp_id=opts["cfp_id"],
    )
    result = stack.generate(sources, seed=opts["seed"])
    out = Path(opts["out"])
    save_mesh_ply(result.mesh, out)
    _emit({
        "mesh": str(out),
        "q": result.q.q, "rx": result.q.rx, "rz": result.q.rz,
        "latent_digest": result.latent_digest, "seed": result.seed,
        "checkpoint_hash": stack.checkpoint_hash,
        "timing_ms": (time.perf_counter() - t0) * 1e3,
    })


@main.command()
@_config_option
@click.option("--out", type=click.Path(), default=None, help="report directory")
@click.option("--n-cases", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--train-steps", type=int, default=None)
@click.option("--tta-k", type=int, default=None)
@click.option("--eval-samples", type=int, default=None)
@click.option("--baseline-mm", type=float, default=None)
@click.option("--from-voxels/--direct-meshes", default=None,
              help="run the voxel reconstruction stage or register directly")
@click.option("--ablation/--no-ablation", default=None)
@click.option("--ablation-seeds", default=None, help="comma-separated, e.g. 0,1,2")
@_guard
def evaluate(config_path, **flags):
    """Full experiment: prepare, train, score, trends, optional ablation."""
    opts = _resolve(config_path, {
        "out": "eval", "n_cases": 200, "seed": 0, "train_steps": None,
        "tta_k": 4, "eval_samples": 10000, "baseline_mm": 0.8,
        "from_voxels": True, "ablation": True, "ablation_seeds": "0,1,2",
    }, flags)
    from .evaluate import ExperimentConfig, run_evaluation

    kwargs = dict(
        n_cases=opts["n_cases"], seed=opts["seed"], tta_k=opts["tta_k"],
        eval_samples=opts["eval_samples"], baseline_mm=opts["baseline_mm"],
        from_voxels=opts["from_voxels"],
    )
    if opts["train_steps"] is not None:
        kwargs["train_steps"] = opts["train_steps"]
    config = ExperimentConfig(**kwargs)
    seeds = tuple(int(s) for s in str(opts["ablation_seeds"]).split(","))
    report = run_evaluation(config, include_ablation=opts["ablation"],
                            ablation_seeds=seeds)

    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    timings = report.pop("timings")
    (out / "report.json").write_text(
        json.dumps(report, indent=1, default=_json_default)
    )
    (out / "timings.json").write_text(
        json.dumps(timings, indent=1, default=_json_default)
    )
    rows = report["headline"]["rows"]
    with open(out / "cases.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    _emit({
        "out": str(out),
        "beat_fraction": report["headline"]["beat_fraction"],
        "mean_chamfer": report["headline"]["mean_chamfer"],
        "mean_baseline": report["headline"]["mean_baseline"],
        "end_to_end_seconds": timings["end_to_end_seconds"],
    })


@main.command()
@_config_option
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--model", "model_paths", type=click.Path(exists=True, dir_okay=False),
              multiple=True, required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--case-id", required=True, help="factual case anchoring the embedding")
@click.option("--point", "points", multiple=True,
              help="counterfactual 'AL,SE' pair; repeatable")
@click.option("--grid/--no-grid", default=None,
              help="sample counterfactuals from cohort metadata clusters")
@click.option("--k", type=int, default=None, help="metadata clusters for --grid")
@click.option("--per-cluster", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--tta-k", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@_guard
def counterfactual(config_path, ckpt, model_paths, data, case_id, points, **flags):
    """Regenerate one eye under altered metadata; write report, CSV, meshes."""
    opts = _resolve(config_path, {
        "grid": False, "k": 4, "per_cluster": 12, "seed": 0, "tta_k": 4,
        "out": "counterfactual",
    }, flags)
    from .conditioning import read_records
    from .counterfactual import MetaPoint, counterfactual_generate, make_smote_grid
    from .geometry import save_mesh_ply

    records = {r.case_id: r for r in read_records(Path(data) / "manifest.csv")}
    if case_id not in records:
        raise KeyError(f"unknown case {case_id!r}")
    metas = []
    for spec in points:
        al, _, se = spec.partition(",")
        metas.append(MetaPoint(float(al), float(se)))
    if opts["grid"]:
        pool = [MetaPoint(r.al_mm, r.se_d) for r in records.values()]
        metas += make_smote_grid(pool, k=opts["k"],
                                 per_cluster=opts["per_cluster"],
                                 seed=opts["seed"])
    if not metas:
        raise ValueError("no counterfactual points; pass --point or --grid")

    stack = _load_stack(ckpt, model_paths, data, tta_k=opts["tta_k"])
    report = counterfactual_generate(case_id, records[case_id], metas, stack,
                                     seed=opts["seed"])
    out = Path(opts["out"])
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, row in enumerate(report.rows):
        name = "factual.ply" if row.is_factual else f"cf{i:03d}.ply"
        save_mesh_ply(row.mesh, out / "meshes" / name)
        rows.append({
            "al": row.meta.al, "se": row.meta.se, "q": row.q.q,
            "is_factual": row.is_factual, "mesh": f"meshes/{name}",
            "latent_digest": row.latent_digest,
        })
    payload = {
        "case_id": case_id, "rows": rows,
        "embedding_digest": report.embedding_digest,
        "seed": report.seed, "checkpoint_hash": stack.checkpoint_hash,
    }
    (out / "report.json").write_text(json.dumps(payload, indent=1))
    with open(out / "rows.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    _emit({"out": str(out), "rows": len(rows),
           "embedding_digest": report.embedding_digest})


@main.command()
@_config_option
@click.option("--ckpt", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--model", "model_paths", type=click.Path(exists=True, dir_okay=False),
              multiple=True, required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.option("--cors-origin", "cors_origins", multiple=True)
@click.option("--cache-size", type=int, default=None)
@click.option("--workers", type=int, default=None)
@_guard
def serve(config_path, ckpt, model_paths, data, cors_origins, **flags):
    """Load the model snapshot and serve the what-if HTTP API."""
    opts = _resolve(config_path, {
        "host": "127.0.0.1", "port": 8000, "cache_size": 256, "workers": 2,
    }, flags)
    import uvicorn

    from .conditioning import read_records
    from .service import build_app, case_listing

    stack = _load_stack(ckpt, model_paths, data)
    cases = []
    if data is not None and (Path(data) / "manifest.csv").exists():
        cases = case_listing(read_records(Path(data) / "manifest.csv"))
    app = build_app(
        stack, cases=cases,
        cors_origins=tuple(cors_origins) or ("*",),
        mesh_cache_size=opts["cache_size"], workers=opts["workers"],
    )
    uvicorn.run(app, host=opts["host"], port=opts["port"])


if __name__ == "__main__":
    main()
