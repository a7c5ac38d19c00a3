"""Config-driven runs: build data and model, pretrain, train, evaluate, write artifacts."""

from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from . import config as cfgmod
from . import geometry, metrics, signals
from .model import BASE_WIDTHS, WIDER_WIDTHS, Block, MoeModel, PlainINR, neural_experts_config
from .training import (PretrainTarget, TrainSchedule, attach_fixed_router, make_pretrain_target,
                       pretrain_manager, train)

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    metrics: dict[str, float]
    series: dict[str, list]
    artifacts: dict[str, dict] = field(default_factory=dict)
    n_params: int = 0
    iter_time_ms: float = 0.0
    notes: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        m = {k: ("inf" if isinstance(v, float) and np.isinf(v) else v) for k, v in self.metrics.items()}
        return {"metrics": m, "series": self.series, "artifacts": self.artifacts, "n_params": self.n_params,
                "iter_time_ms": self.iter_time_ms, "notes": self.notes}


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- builders ----------------------------------------------------------------

def build_dataset(cfg: dict):
    exp = cfg["experiment"]
    modality, src = exp["modality"], exp["input"]
    if modality == "image":
        if src == "bundled":
            return signals.bundled_image()
        return signals.load_image(src, exp["crop_square"], exp["downscale"])
    if modality == "audio":
        if src == "synthetic":
            return signals.AudioDataset.from_samples(signals.synth_two_speakers(), 16000)
        return signals.load_audio(src)
    s = cfg["sdf"]
    if src in signals.ANALYTIC_SHAPES:
        cloud = signals.ANALYTIC_SHAPES[src][0](s["cloud_points"])
    else:
        cloud = signals.load_point_cloud(src)
    return signals.SdfDataset(cloud, tuple(s["counts"]), s["sigma_coarse"], s["sigma_fine"])


def build_model(cfg: dict, in_dim: int, out_dim: int):
    m = cfg["model"]
    seed = cfg["experiment"]["seed"]
    common = dict(activation=m["activation"], w0=m["w0"], first_w0=m.get("first_w0"), ff_freqs=m["ff_freqs"],
                  ff_sigma=m["ff_sigma"], finer_bias=m["finer_bias"])
    arch = m["architecture"]
    if arch in ("base", "wider"):
        widths = m.get("hidden_widths") or (BASE_WIDTHS if arch == "base" else WIDER_WIDTHS)
        return PlainINR(in_dim, out_dim, widths, seed=seed, **common)
    over = {k: Block.parse(m[k]) for k in ("encoder", "expert", "manager_encoder", "manager_head") if k in m}
    cond = "none" if arch == "vanilla-moe" else m["conditioning"]
    conf = neural_experts_config(in_dim, out_dim, m["size"], n_experts=m["n_experts"], conditioning=cond,
                                 **common, **over)
    return MoeModel(conf, seed=seed)


def build_schedule(cfg: dict) -> TrainSchedule:
    t, p = cfg["train"], cfg["pretrain"]
    return TrainSchedule(total_iters=t["total_iters"], pretrain_iters=p["iters"], t_all=t["t_all"], t_e=t["t_e"],
                         batch_size=t.get("batch_size"), lr=t["lr"], lr_decay=t["lr_decay"],
                         pretrain_lr=p.get("lr"), pretrain_batch=p.get("batch_size"),
                         seed=cfg["experiment"]["seed"], log_every=t["log_every"],
                         snapshot_every=t["snapshot_every"])


def build_target(cfg: dict, dataset, n_experts: int):
    kind = cfg["pretrain"]["kind"]
    seed = cfg["experiment"]["seed"]
    if cfg["experiment"]["modality"] == "sdf":
        rng = np.random.default_rng(seed)
        x, y, _ = dataset.batch(rng, None, 0)
        dom = signals.SDF_DOMAIN
        cells = cfg["pretrain"].get("cells", 64)
        if kind == "kmeans":
            return make_pretrain_target(kind, x, n_experts, seed, values=y)
        return make_pretrain_target(kind, x, n_experts, seed, cells=cells, domain=dom)
    return make_pretrain_target(kind, dataset.coords, n_experts, seed, values=dataset.values)


def aux_labels(cfg: dict, dataset) -> np.ndarray | None:
    t = cfg["train"]
    if not t["aux_segmentation"]:
        return None
    if t.get("aux_labels"):
        labels = np.loadtxt(t["aux_labels"], dtype=np.int64).reshape(-1)
    elif cfg["experiment"]["input"] == "synthetic":
        labels = signals.synth_speaker_labels()
    else:
        raise cfgmod.ConfigError("train: aux_segmentation needs aux_labels for recorded audio")
    if len(labels) != len(dataset.coords):
        raise cfgmod.ConfigError("train: aux_labels must have one label per sample")
    return labels


# -- evaluation and artifacts ------------------------------------------------

def _unit(x: np.ndarray) -> np.ndarray:
    m = np.max(np.abs(x))
    return x / m if m > 0 else x


def image_artifacts(ds, recon: np.ndarray, experts: np.ndarray, out: Path) -> dict[str, Path]:
    img = np.clip(ds.image(recon), 0, 1)
    gray = metrics.to_gray(img)
    grad = np.hypot(ndimage.sobel(gray, axis=0), ndimage.sobel(gray, axis=1))
    lap = ndimage.laplace(gray)
    err = np.abs(img - ds.image()).mean(axis=-1)
    files = {
        "reconstruction": out / "reconstruction.png",
        "gradient": out / "gradient_sobel.png",
        "laplacian": out / "laplacian.png",
        "error": out / "error.png",
        "experts": out / "experts.png",
    }
    signals.write_png(files["reconstruction"], img)
    signals.write_png(files["gradient"], _unit(grad))
    signals.write_png(files["laplacian"], 0.5 + 0.5 * _unit(lap))
    signals.write_png(files["error"], _unit(err))
    signals.write_png(files["experts"], geometry.expert_colors(experts).reshape(ds.height, ds.width, 3) / 255.0)
    return files


def audio_artifacts(ds, recon: np.ndarray, experts: np.ndarray, out: Path) -> dict[str, Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = np.arange(len(ds.values)) / ds.sample_rate
    gt, rc = ds.values[:, 0], recon[:, 0]
    fig, axes = plt.subplots(3, 1, figsize=(10, 6), sharex=True)
    axes[0].plot(t, gt, lw=0.5, color="k")
    axes[0].set_ylabel("ground truth")
    colors = geometry.expert_colors(experts) / 255.0
    axes[1].scatter(t, rc, c=colors, s=0.5)
    axes[1].set_ylabel("reconstruction")
    axes[2].plot(t, rc - gt, lw=0.5, color="r")
    axes[2].set_ylabel("error")
    axes[2].set_xlabel("time (s)")
    files = {"waveform": out / "waveform.png", "audio": out / "reconstruction.wav"}
    fig.tight_layout()
    fig.savefig(files["waveform"], dpi=100)
    plt.close(fig)
    signals.write_wav(files["audio"], np.clip(rc, -1, 1), ds.sample_rate)
    return files


def gt_grid(cfg: dict, dataset, resolution: int) -> metrics.GridField:
    src = cfg["experiment"]["input"]
    if src in signals.ANALYTIC_SHAPES:
        return metrics.GridField.from_function(signals.ANALYTIC_SHAPES[src][1], resolution)
    return metrics.GridField.from_function(lambda p: signals.sdf_ground_truth(p, dataset.cloud), resolution)


def sdf_evaluation(cfg: dict, model, dataset, out: Path | None) -> tuple[dict[str, float], dict[str, Path]]:
    s = cfg["sdf"]
    res = s["eval_resolution"]
    pred, _ = geometry.eval_grid(model, res, cap=s["resolution_cap"])
    gt = gt_grid(cfg, dataset, res)
    vals = {"iou": metrics.iou_grid(pred, gt)}
    try:
        vals["trimap_iou"] = metrics.trimap_iou(pred, gt, s["trimap_d"])
    except ValueError:
        vals["trimap_iou"] = float("nan")
    if s["mesh_resolution"] != res:
        pred, _ = geometry.eval_grid(model, s["mesh_resolution"], cap=s["resolution_cap"])
    mesh = geometry.marching_cubes(pred)
    files: dict[str, Path] = {}
    if mesh.is_empty:
        vals["chamfer"] = float("nan")
    else:
        pts = geometry.sample_surface(mesh, s["chamfer_points"], seed=cfg["experiment"]["seed"])
        vals["chamfer"] = metrics.chamfer(pts, dataset.cloud.points)
    if out is None:
        return vals, files
    _, experts = model.route_and_reconstruct(mesh.vertices) if not mesh.is_empty else (None, np.zeros(0, int))
    err = np.abs(signals.sdf_ground_truth(mesh.vertices, dataset.cloud)) if not mesh.is_empty else np.zeros(0)
    files["mesh"] = geometry.export_mesh(mesh, out / "mesh.ply")
    files["mesh_obj"] = geometry.export_mesh(mesh, out / "mesh.obj")
    files["mesh_error"] = geometry.export_mesh(
        geometry.TriangleMesh(mesh.vertices, mesh.triangles, geometry.error_colors(err)), out / "mesh_error.ply")
    files["mesh_experts"] = geometry.export_mesh(
        geometry.TriangleMesh(mesh.vertices, mesh.triangles, geometry.expert_colors(experts)),
        out / "mesh_experts.ply")
    files["error_values"] = out / "mesh_error_values.csv"
    np.savetxt(files["error_values"], err, fmt="%.9g", header="abs_sdf_error", comments="")
    return vals, files


def final_metrics(cfg: dict, model, dataset) -> tuple[dict[str, float], np.ndarray | None, np.ndarray | None]:
    modality = cfg["experiment"]["modality"]
    if modality == "sdf":
        return {}, None, None
    recon, experts = model.route_and_reconstruct(dataset.coords)
    recon = recon.astype(np.float64)
    wanted = cfg["experiment"].get("metrics", [])
    vals = {}
    if "mse" in wanted:
        vals["mse"] = metrics.mse(recon, dataset.values)
    if "psnr" in wanted:
        vals["psnr"] = metrics.psnr(np.clip(recon, 0, 1), dataset.values)
    if "ssim" in wanted and modality == "image":
        vals["ssim"] = metrics.ssim(np.clip(dataset.image(recon), 0, 1), dataset.image())
    return vals, recon, experts


def _log_metric(cfg: dict, dataset):
    """Cheap metric recorded on every log row ("psnr" for images, "mse" for audio)."""
    modality = cfg["experiment"]["modality"]
    if modality == "sdf":
        return None

    def evaluate(model):
        recon, _ = model.route_and_reconstruct(dataset.coords)
        err = metrics.mse(recon, dataset.values)
        if modality == "image":
            return {"psnr": metrics.psnr(np.clip(recon, 0, 1), dataset.values)}
        return {"mse": err}

    return evaluate


def write_log_csv(path: Path, rows: list[dict]) -> None:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: metrics.format_metric(v) if isinstance(v, float) else v for k, v in r.items()})


def run(cfg: dict, out_dir: Path | None = None, artifacts: bool = True) -> EvalReport:
    """Pretrain, train, evaluate and (optionally) write every artifact for one config."""
    cfg = copy.deepcopy(cfg)
    out = Path(out_dir) if out_dir is not None else Path(cfg["experiment"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg["experiment"]["output_dir"] = str(out)
    (out / "config.toml").write_text(cfgmod.dump_toml(cfg))
    dtype = np.float32 if cfg["experiment"]["precision"] == 32 else np.float64
    with ad.default_dtype(dtype), ad.finite_checks(dtype == np.float64):
        dataset = build_dataset(cfg)
        if hasattr(dataset, "coords"):
            dataset.coords = dataset.coords.astype(dtype)
            dataset.values = dataset.values.astype(dtype)
        in_dim = 3 if cfg["experiment"]["modality"] == "sdf" else dataset.coords.shape[1]
        out_dim = 1 if cfg["experiment"]["modality"] != "image" else 3
        model = build_model(cfg, in_dim, out_dim)
        schedule = build_schedule(cfg)
        curve: list[float] = []
        aux = None
        if isinstance(model, MoeModel):
            kind = cfg["pretrain"]["kind"]
            if kind != "none":
                target = build_target(cfg, dataset, model.config.n_experts)
                if kind.startswith("fixed-"):
                    attach_fixed_router(model, target)
                else:
                    curve = pretrain_manager(model, target, schedule)
            labels = aux_labels(cfg, dataset)
            if labels is not None:
                aux = PretrainTarget("aux", labels, dataset.coords, model.config.n_experts)
        tlog = train(model, dataset, schedule, aux_target=aux, evaluate=_log_metric(cfg, dataset))
        vals, recon, experts = final_metrics(cfg, model, dataset)
        files: dict[str, Path] = {}
        if cfg["experiment"]["modality"] == "sdf":
            sdf_vals, files = sdf_evaluation(cfg, model, dataset, out if artifacts else None)
            vals.update(sdf_vals)
        elif artifacts:
            maker = image_artifacts if cfg["experiment"]["modality"] == "image" else audio_artifacts
            files = maker(dataset, recon, experts, out)
        vals["final_loss"] = tlog.final_loss

    log_path = out / "log.csv"
    write_log_csv(log_path, tlog.rows)
    files["log"] = log_path
    if curve:
        np.savetxt(out / "pretrain_ce.csv", np.asarray(curve), fmt="%.9g", header="ce", comments="")
        files["pretrain_ce"] = out / "pretrain_ce.csv"
    if artifacts:
        files["model"] = out / "model.bin"
        model.save(files["model"])
    files["config"] = out / "config.toml"
    metric_key = "psnr" if cfg["experiment"]["modality"] == "image" else "mse"
    series = {"iter": [r["iter"] for r in tlog.rows], "loss": [r["loss"] for r in tlog.rows]}
    if tlog.rows and metric_key in tlog.rows[0]:
        series[metric_key] = [r[metric_key] for r in tlog.rows]
    report = EvalReport(vals, series, {k: {"path": p.name, "sha256": sha256(p)} for k, p in files.items()},
                        model.n_params, tlog.iter_time_ms,
                        {"chamfer": metrics.CHAMFER_DEFINITION} if "chamfer" in vals else {})
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return report


# -- matrices and reports ----------------------------------------------------

def expand_matrix(cfg: dict, axes: dict[str, list]) -> list[tuple[dict, dict]]:
    if not axes or any(len(v) == 0 for v in axes.values()):
        raise cfgmod.ConfigError("matrix needs at least one non-empty override axis")
    keys = list(axes)
    cells = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        child = cfg
        for k, v in zip(keys, combo):
            child = cfgmod.set_key(child, k, v)
        cells.append((dict(zip(keys, combo)), child))
    return cells


def _run_cell(args):
    raw, out_dir, artifacts = args
    try:
        cfg = cfgmod.validate(raw)
        rep = run(cfg, out_dir, artifacts)
        return {"status": "ok", "n_params": rep.n_params, "iter_time_ms": rep.iter_time_ms, **rep.metrics}
    except Exception as exc:  # a failing cell must not stop the matrix
        return {"status": f"failed: {type(exc).__name__}: {exc}"}


def run_matrix(raw: dict, axes: dict[str, list], out_dir: Path, workers: int = 1,
               artifacts: bool = True) -> list[dict]:
    """Run the cartesian product of ``axes`` overrides; returns one row per cell."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = expand_matrix(raw, axes)
    jobs = [(child, out_dir / f"cell{i:03d}", artifacts) for i, (_, child) in enumerate(cells)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    rows = []
    for i, ((over, _), res) in enumerate(zip(cells, results)):
        rows.append({"cell": f"cell{i:03d}", **{k: json.dumps(v) if isinstance(v, list) else v
                                                  for k, v in over.items()}, **res})
    write_log_csv(out_dir / "matrix.csv", rows)
    return rows


def read_series(run_dir: Path) -> tuple[str, list[int], list[float]]:
    path = Path(run_dir) / "log.csv"
    if not path.exists():
        raise FileNotFoundError(f"no log.csv in {run_dir}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return "loss", [], []
    key = next((k for k in ("psnr", "mse") if k in rows[0]), "loss")
    return key, [int(r["iter"]) for r in rows], [float(r[key]) for r in rows]


def emit_report(run_dirs: list[Path], out_dir: Path | None = None) -> Path:
    """Metric-vs-iteration plot (all runs overlaid) and a markdown summary."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dirs = [Path(d) for d in run_dirs]
    out_dir = Path(out_dir) if out_dir is not None else run_dirs[0]
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["# Run summary", ""]
    fig, ax = plt.subplots(figsize=(6, 4))
    plotted = 0
    for d in run_dirs:
        key, it, vals = read_series(d)
        if not vals:
            lines.append(f"- `{d.name}`: no data")
            continue
        ax.plot(it, vals, label=d.name)
        plotted += 1
        ax.set_ylabel(key)
        lines.append(f"- `{d.name}`: final {key} = {metrics.format_metric(vals[-1])} at iteration {it[-1]}")
        rep = d / "report.json"
        if rep.exists():
            data = json.loads(rep.read_text())
            for k, v in sorted(data["metrics"].items()):
                lines.append(f"  - {k}: {v if isinstance(v, str) else metrics.format_metric(float(v))}")
            if data.get("notes"):
                for k, v in data["notes"].items():
                    lines.append(f"  - {k} definition: {v}")
    if plotted == 0:
        lines.insert(2, "No data: the metric series is empty.")
    ax.set_xlabel("iteration")
    if plotted:
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "report.png", dpi=100)
    plt.close(fig)
    summary = out_dir / "summary.md"
    summary.write_text("\n".join(lines) + "\n")
    return summary
