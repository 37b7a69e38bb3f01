"""Stage functions behind the command line.

Output layout under ``out``::

    geometries/<gid>/tree.txt, meta.json
    simulations/<gid>-bc<k>/X.f32t, sim.json
    cases/<gid>-bc<k>-tr<j>/Y.f32t, Z.f32t, Xhat.f32t, case.json
    model/params/<name>.f32t, checkpoint.json, loss_history.csv
    reports/*.csv, summary.json, report.txt

Every file is written to a temporary name and renamed into place, and a
manifest only ever references files that already exist.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import metrics, tensorfile
from ._validation import check_consistent_case
from .config import PipelineConfig, derived_rng, derived_seed
from .features import FeatureNorms, FeatureTensor, SphereSampling, compute_features, disassemble
from .hemo import (InjectionParams, TransportConfig, WaveformParams, injection_rate,
                   sample_waveform_params, simulate_transport, total_flow, waveform)
from .nn.estimator import ConcentrationReconstructor
from .nn.model import ModelConfig
from .nn.train import BranchSample, TrainConfig, train
from .projector import AttenuationModel, CArmTrajectory, ProjectionStack, forward_project
from .vessel_tree import (TreeGenParams, VesselTree, decompose, export_centerlines,
                          generate_tree, import_centerlines, recombine)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class MissingArtifactError(RuntimeError):
    """An upstream stage has not produced a file this stage needs."""

    def __init__(self, path: Path, stage: str):
        super().__init__(f"missing {path}; run the '{stage}' stage first")
        self.path = path
        self.stage = stage


# --------------------------------------------------------------------------
# identifiers and layout
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CaseKey:
    geometry: str
    bc: int
    trajectory: int

    @property
    def sim(self) -> str:
        return f"{self.geometry}-bc{self.bc}"

    @property
    def case(self) -> str:
        return f"{self.sim}-tr{self.trajectory}"


def geometry_ids(cfg: PipelineConfig) -> list[str]:
    return [f"g{i:02d}" for i in range(cfg.global_.n_geometries)]


def geometry_split(cfg: PipelineConfig, gid: str) -> str:
    i = int(gid[1:])
    g = cfg.global_
    if i < g.n_train:
        return "train"
    return "val" if i < g.n_train + g.n_val else "test"


def sim_ids(cfg: PipelineConfig) -> list[tuple[str, int]]:
    return [(gid, k) for gid in geometry_ids(cfg) for k in range(cfg.simulate.n_bcs)]


def case_keys(cfg: PipelineConfig) -> list[CaseKey]:
    return [CaseKey(gid, k, j) for gid, k in sim_ids(cfg)
            for j in range(len(cfg.project.trajectories))]


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    def geometry_dir(self, gid: str) -> Path:
        return self.root / "geometries" / gid

    def tree_path(self, gid: str) -> Path:
        return self.geometry_dir(gid) / "tree.txt"

    def sim_dir(self, sim: str) -> Path:
        return self.root / "simulations" / sim

    def case_dir(self, case: str) -> Path:
        return self.root / "cases" / case

    def manifest_path(self, case: str) -> Path:
        return self.case_dir(case) / "case.json"

    @property
    def model_dir(self) -> Path:
        return self.root / "model"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    def rel(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, stage)
    return path


def _write_json(path: Path, obj) -> None:
    tensorfile.atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _read_json(path: Path, stage: str):
    return json.loads(_require(path, stage).read_text(encoding="utf-8"))


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    tensorfile.atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def _save_tensor(path: Path, array) -> None:
    tensorfile.save(path, array)


def _load_tensor(path: Path, stage: str) -> np.ndarray:
    return tensorfile.load(_require(path, stage)).astype(np.float64)


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# configuration -> domain objects
# --------------------------------------------------------------------------

def tree_params(cfg: PipelineConfig) -> TreeGenParams:
    g = cfg.generate
    return TreeGenParams(
        depth=g.depth,
        branch_length=(g.branch_length_min, g.branch_length_max),
        root_length=g.root_length,
        root_radius=g.root_radius,
        murray_exponent=g.murray_exponent,
        tortuosity_amplitude=g.tortuosity_amplitude,
        tortuosity_wavelength=g.tortuosity_wavelength,
        siphon_probability=g.siphon_probability,
        half_angle=(g.half_angle_min, g.half_angle_max),
        asymmetry=(g.asymmetry_min, g.asymmetry_max),
        node_spacing=g.node_spacing,
    )


def boundary_conditions(cfg: PipelineConfig, gid: str, k: int):
    """Waveform, injection and transport settings of one simulation."""
    s = cfg.simulate
    rng = derived_rng(cfg.seed, f"{gid}-bc{k}")
    wave = sample_waveform_params(rng, (s.q_mean, s.q_mean_sd), (s.cycle_length, s.cycle_length_sd))
    wave = replace(wave, profile=s.profiles[k % len(s.profiles)])
    t_inj = s.pre_injection_cycles * wave.cycle_length
    inj = InjectionParams(s.q_max, t_inj, s.t_lag, s.mixing)
    t0 = max(0.0, t_inj - s.acquisition_lead)
    tcfg = TransportConfig(s.diffusion, t0 + (s.n_frames - 1) / s.frame_rate, s.max_dt,
                           s.frame_rate, t0)
    if tcfg.n_frames != s.n_frames:
        raise RuntimeError(f"frame count drifted: {tcfg.n_frames} != {s.n_frames}")
    return wave, inj, tcfg


def trajectory(cfg: PipelineConfig, j: int) -> CArmTrajectory:
    p = cfg.project
    alpha0, beta = p.trajectories[j]
    return CArmTrajectory(alpha0, beta, p.delta_alpha, cfg.simulate.frame_rate, cfg.simulate.n_frames,
                          p.sid, p.sdd, p.det_rows, p.det_cols, p.pixel_pitch)


def attenuation(cfg: PipelineConfig) -> AttenuationModel:
    p = cfg.project
    return AttenuationModel(p.w_ip, p.mu_rho_ip, p.mu_rho_w, p.rho_ca, p.noise_sigma)


def model_config(cfg: PipelineConfig) -> ModelConfig:
    t = cfg.train
    return ModelConfig(tuple(t.channels), tuple(t.kernel), t.slope, t.eps)


def train_config(cfg: PipelineConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=t.epochs, lr=t.lr, seed=derived_seed(cfg.seed, "train"),
                       lr_schedule=t.lr_schedule, lr_min=t.lr_min)


def load_tree(layout: Layout, cfg: PipelineConfig, gid: str) -> VesselTree:
    text = _require(layout.tree_path(gid), "generate").read_text(encoding="utf-8")
    return import_centerlines(text, gamma=cfg.generate.flow_gamma)


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def _generate_one(args) -> str:
    cfg, out, gid = args
    layout = Layout(out)
    params = tree_params(cfg)
    seed = derived_seed(cfg.seed, gid)
    tree = generate_tree(params, seed, gamma=cfg.generate.flow_gamma)
    tensorfile.atomic_write_bytes(layout.tree_path(gid), export_centerlines(tree).encode("utf-8"))
    _write_json(layout.geometry_dir(gid) / "meta.json", {
        "geometry": gid,
        "seed": seed,
        "split": geometry_split(cfg, gid),
        "n_nodes": tree.n_nodes,
        "n_branches": len(tree.branches),
        "params": asdict(params),
        "flow_gamma": cfg.generate.flow_gamma,
    })
    return gid


def run_generate(cfg: PipelineConfig, out, jobs: int = 1) -> list[str]:
    gids = _map(_generate_one, [(cfg, str(out), gid) for gid in geometry_ids(cfg)], jobs)
    logger.info("generated %d geometries", len(gids))
    return gids


def _simulate_one(args) -> str:
    cfg, out, gid, k = args
    layout = Layout(out)
    tree = load_tree(layout, cfg, gid)
    wave, inj, tcfg = boundary_conditions(cfg, gid, k)
    conc = simulate_transport(tree, wave, inj, tcfg)
    sim = f"{gid}-bc{k}"
    d = layout.sim_dir(sim)
    _save_tensor(d / "X.f32t", conc.values)
    meta = dict(conc.meta)
    meta.update(simulation=sim, geometry=gid, n_nodes=tree.n_nodes, n_frames=tcfg.n_frames,
                first_frame_time=float(conc.frame_times[0]))
    _write_json(d / "sim.json", meta)
    return sim


def run_simulate(cfg: PipelineConfig, out, jobs: int = 1) -> list[str]:
    layout = Layout(out)
    for gid in geometry_ids(cfg):
        _require(layout.tree_path(gid), "generate")
    sims = _map(_simulate_one, [(cfg, str(out), gid, k) for gid, k in sim_ids(cfg)], jobs)
    logger.info("simulated %d boundary-condition sets", len(sims))
    return sims


def _base_manifest(cfg: PipelineConfig, layout: Layout, key: CaseKey, sim_meta: dict,
                   tree: VesselTree) -> dict:
    traj = trajectory(cfg, key.trajectory)
    return {
        "case": key.case,
        "geometry": key.geometry,
        "simulation": key.sim,
        "split": geometry_split(cfg, key.geometry),
        "seed": cfg.seed,
        "n_nodes": tree.n_nodes,
        "n_frames": traj.n_frames,
        "waveform": sim_meta["waveform"],
        "injection": sim_meta["injection"],
        "transport": sim_meta["transport"],
        "trajectory": asdict(traj),
        "attenuation": asdict(attenuation(cfg)),
        "files": {
            "tree": layout.rel(layout.tree_path(key.geometry)),
            "X": layout.rel(layout.sim_dir(key.sim) / "X.f32t"),
        },
    }


def _project_one(args) -> str:
    cfg, out, key = args
    layout = Layout(out)
    tree = load_tree(layout, cfg, key.geometry)
    sim_dir = layout.sim_dir(key.sim)
    X = _load_tensor(sim_dir / "X.f32t", "simulate")
    sim_meta = _read_json(sim_dir / "sim.json", "simulate")
    traj = trajectory(cfg, key.trajectory)
    check_consistent_case(tree.n_nodes, traj.n_frames, X=(X, 0, 1))
    atten = attenuation(cfg)
    rng = derived_rng(cfg.seed, f"{key.case}/noise") if atten.noise_sigma > 0 else None
    stack = forward_project(tree, X, traj, atten, rng=rng)
    d = layout.case_dir(key.case)
    _save_tensor(d / "Y.f32t", stack.frames)
    manifest = _base_manifest(cfg, layout, key, sim_meta, tree)
    manifest["files"]["Y"] = layout.rel(d / "Y.f32t")
    _write_json(layout.manifest_path(key.case), manifest)
    return key.case


def run_project(cfg: PipelineConfig, out, jobs: int = 1) -> list[str]:
    layout = Layout(out)
    for gid, k in sim_ids(cfg):
        _require(layout.sim_dir(f"{gid}-bc{k}") / "X.f32t", "simulate")
    cases = _map(_project_one, [(cfg, str(out), key) for key in case_keys(cfg)], jobs)
    logger.info("projected %d cases", len(cases))
    return cases


def _featurize_one(args) -> str:
    cfg, out, key = args
    layout = Layout(out)
    manifest = _read_json(layout.manifest_path(key.case), "project")
    tree = load_tree(layout, cfg, key.geometry)
    traj = trajectory(cfg, key.trajectory)
    Y = _load_tensor(layout.case_dir(key.case) / "Y.f32t", "project")
    check_consistent_case(tree.n_nodes, traj.n_frames, Y=(Y, None, 0))
    mu = attenuation(cfg).mu_eff
    feats = compute_features(tree, ProjectionStack(Y, traj), mu,
                             SphereSampling(cfg.featurize.sphere_points), cfg.featurize.u_cap)
    path = layout.case_dir(key.case) / "Z.f32t"
    _save_tensor(path, feats.values)
    manifest["files"]["Z"] = layout.rel(path)
    manifest["feature_norms"] = asdict(feats.norms)
    _write_json(layout.manifest_path(key.case), manifest)
    return key.case


def run_featurize(cfg: PipelineConfig, out, jobs: int = 1) -> list[str]:
    layout = Layout(out)
    for key in case_keys(cfg):
        _require(layout.manifest_path(key.case), "project")
    cases = _map(_featurize_one, [(cfg, str(out), key) for key in case_keys(cfg)], jobs)
    logger.info("computed features for %d cases", len(cases))
    return cases


@dataclass(frozen=True, eq=False)
class CaseData:
    key: CaseKey
    manifest: dict
    tree: VesselTree
    X: np.ndarray
    Z: np.ndarray


def load_case(layout: Layout, cfg: PipelineConfig, key: CaseKey, tree: VesselTree | None = None) -> CaseData:
    manifest = _read_json(layout.manifest_path(key.case), "project")
    if "Z" not in manifest["files"]:
        raise MissingArtifactError(layout.case_dir(key.case) / "Z.f32t", "featurize")
    tree = tree if tree is not None else load_tree(layout, cfg, key.geometry)
    X = _load_tensor(layout.root / manifest["files"]["X"], "simulate")
    Z = _load_tensor(layout.root / manifest["files"]["Z"], "featurize")
    check_consistent_case(tree.n_nodes, manifest["n_frames"], X=(X, 0, 1), Z=(Z, 1, 2))
    return CaseData(key, manifest, tree, X, Z)


def branch_samples(cases: Iterable[CaseData]) -> list[BranchSample]:
    samples = []
    for c in cases:
        for view in decompose(c.tree):
            samples.append(BranchSample(c.Z[:, view.indices, :], c.X[view.indices, :], c.key.case,
                                        c.key.geometry, c.manifest["split"], view.branch_id))
    return samples


def _iter_cases(layout: Layout, cfg: PipelineConfig, keys: Iterable[CaseKey]):
    trees: dict[str, VesselTree] = {}
    for key in keys:
        if key.geometry not in trees:
            trees[key.geometry] = load_tree(layout, cfg, key.geometry)
        yield load_case(layout, cfg, key, trees[key.geometry])


def save_checkpoint(layout: Layout, model_cfg: ModelConfig, train_cfg: TrainConfig,
                    params: dict[str, np.ndarray], history, best_epoch: int) -> None:
    d = layout.model_dir
    entries = {}
    for name in sorted(params):
        path = d / "params" / f"{name}.f32t"
        _save_tensor(path, params[name])
        entries[name] = {"file": layout.rel(path), "shape": list(params[name].shape)}
    _write_csv(d / "loss_history.csv", ("epoch", "train_mae", "val_mae"), history)
    _write_json(d / "checkpoint.json", {
        "model": asdict(model_cfg),
        "train": asdict(train_cfg),
        "params": entries,
        "best_epoch": best_epoch,
        "best_val_mae": min(h[2] for h in history),
    })


def load_checkpoint(layout: Layout) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    meta = _read_json(layout.model_dir / "checkpoint.json", "train")
    m = meta["model"]
    model_cfg = ModelConfig(tuple(m["channels"]), tuple(m["kernel"]), m["slope"], m["eps"],
                            m["in_channels"])
    arrays = {}
    for name, entry in meta["params"].items():
        arr = _load_tensor(layout.root / entry["file"], "train")
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, manifest says {entry['shape']}")
        arrays[name] = arr
    return model_cfg, arrays


def run_train(cfg: PipelineConfig, out, jobs: int = 1) -> dict:
    """Fit the model on train-split branches, selecting the epoch by validation MAE.

    Training runs single-threaded regardless of ``jobs``.
    """
    layout = Layout(out)
    keys = [k for k in case_keys(cfg) if geometry_split(cfg, k.geometry) in ("train", "val")]
    samples = branch_samples(_iter_cases(layout, cfg, keys))
    model_cfg, train_cfg = model_config(cfg), train_config(cfg)
    n_train = sum(s.split == "train" for s in samples)
    logger.info("training on %d branch samples, validating on %d", n_train, len(samples) - n_train)
    start = time.perf_counter()
    result = train(samples, model_cfg, train_cfg)
    logger.info("training took %.1f s; best epoch %d (val MAE %.5f)", time.perf_counter() - start,
                result.best_epoch, result.best_val)
    save_checkpoint(layout, model_cfg, train_cfg, result.params, result.history, result.best_epoch)
    return {"best_epoch": result.best_epoch, "best_val_mae": result.best_val,
            "history": result.history}


def _infer_one(args) -> str:
    cfg, out, key = args
    layout = Layout(out)
    model_cfg, arrays = load_checkpoint(layout)
    est = ConcentrationReconstructor.from_params(arrays, channels=model_cfg.channels,
                                                 kernel=model_cfg.kernel, slope=model_cfg.slope,
                                                 eps=model_cfg.eps)
    c = load_case(layout, cfg, key)
    views = decompose(c.tree)
    parts = est.predict([c.Z[:, v.indices, :] for v in views], clip=True)
    # bifurcation-region nodes are not predicted and stay NaN
    xhat = recombine(views, parts, c.tree.n_nodes)
    path = layout.case_dir(key.case) / "Xhat.f32t"
    _save_tensor(path, xhat)
    manifest = dict(c.manifest)
    manifest["files"] = dict(manifest["files"], Xhat=layout.rel(path))
    _write_json(layout.manifest_path(key.case), manifest)
    return key.case


def run_infer(cfg: PipelineConfig, out, jobs: int = 1, cases: Sequence[str] | None = None) -> list[str]:
    layout = Layout(out)
    _require(layout.model_dir / "checkpoint.json", "train")
    keys = case_keys(cfg)
    if cases:
        known = {k.case: k for k in keys}
        missing = [c for c in cases if c not in known]
        if missing:
            raise ValueError(f"unknown case id(s): {', '.join(missing)}")
        keys = [known[c] for c in cases]
    done = _map(_infer_one, [(cfg, str(out), key) for key in keys], jobs)
    logger.info("inferred %d cases", len(done))
    return done


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

@dataclass
class CaseEvaluation:
    case: str
    geometry: str
    split: str
    model: list[metrics.ErrorRecord]
    baseline: list[metrics.ErrorRecord]
    branches: list[metrics.BranchCase]
    points: tuple[np.ndarray, np.ndarray]  # (gt, pred) on evaluated nodes


def _mean_flow(manifest: dict) -> float:
    """Mean total inlet flow over the acquisition window in ml/s."""
    wave = WaveformParams(**manifest["waveform"])
    inj = InjectionParams(**manifest["injection"])
    tc = manifest["transport"]
    t = tc["t_start"] + np.arange(manifest["n_frames"]) / tc["frame_rate"]
    return float(np.mean(total_flow(waveform(wave, t), injection_rate(inj, t), inj.mixing)))


def evaluate_case(c: CaseData, xhat: np.ndarray, threshold: float) -> CaseEvaluation:
    norms = FeatureNorms(**c.manifest["feature_norms"])
    _, U, V = disassemble(FeatureTensor(c.Z, norms))
    baseline = c.Z[0]
    q = _mean_flow(c.manifest)
    model_recs, base_recs, rows = [], [], []
    gts, preds = [], []
    for view in decompose(c.tree):
        idx = view.indices
        gt, pred = c.X[idx], xhat[idx]
        if not np.all(np.isfinite(pred)):
            raise ValueError(f"{c.key.case}: prediction missing on branch {view.branch_id}")
        name = f"{c.key.geometry}:{view.branch_id}"
        model_recs.append(metrics.error_record(c.key.case, name, gt, pred, threshold))
        base_recs.append(metrics.error_record(c.key.case, name, gt, baseline[idx], threshold))
        keep = gt > threshold
        ape = np.abs(gt[keep] - pred[keep]) / gt[keep]
        branch = c.tree.branch(view.branch_id)
        rows.append(metrics.BranchCase(
            case=c.key.case, branch=name,
            gt_mean=float(gt.mean()), pred_mean=float(pred.mean()),
            signed_error=float(np.mean(pred - gt)),
            radius=float(c.tree.radii[idx].mean()),
            diffusivity=metrics.diffusivity(gt),
            overlap=float(U[idx].mean()),
            foreshortening=float(V[idx].mean()),
            flow_rate=q * branch.flow_fraction,
            ape_mean=float(ape.mean()) if ape.size else math.nan,
            ape_median=float(np.median(ape)) if ape.size else math.nan,
            ape_std=float(ape.std()) if ape.size else math.nan,
        ))
        gts.append(gt.ravel())
        preds.append(pred.ravel())
    return CaseEvaluation(c.key.case, c.key.geometry, c.manifest["split"], model_recs, base_recs, rows,
                          (np.concatenate(gts), np.concatenate(preds)))


def _pooled(records: Sequence[metrics.ErrorRecord]) -> tuple[float, float]:
    n = sum(r.n for r in records)
    n_ape = sum(r.n_ape for r in records)
    mae = sum(r.abs_sum for r in records) / n
    mape = 100.0 * sum(r.ape_sum for r in records) / n_ape if n_ape else math.nan
    return mae, mape


def _summary_block(evals: Sequence[CaseEvaluation]) -> dict:
    model = [r for e in evals for r in e.model]
    base = [r for e in evals for r in e.baseline]
    gt = np.concatenate([e.points[0] for e in evals])
    pred = np.concatenate([e.points[1] for e in evals])
    mae, mape = _pooled(model)
    b_mae, b_mape = _pooled(base)
    block = {"n_cases": len(evals), "n_points": int(gt.size), "n_excluded": int(sum(r.n - r.n_ape for r in model)),
             "mae": mae, "mape": mape, "baseline_mae": b_mae, "baseline_mape": b_mape,
             "mae_ratio": mae / b_mae if b_mae > 0 else math.nan}
    try:
        block["r2"] = metrics.r_squared(gt, pred)
    except metrics.UndefinedMetricError:
        block["r2"] = math.nan
    for split in ("by_branch", "by_case"):
        for metric in ("mae", "mape"):
            s = metrics.aggregate(model, split, metric)
            block[f"{metric}_{split}"] = asdict(s)
    return block


def _finite(obj):
    # JSON has no NaN
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def run_eval(cfg: PipelineConfig, out, jobs: int = 1) -> dict:
    layout = Layout(out)
    threshold = cfg.eval.mape_threshold
    evals: list[CaseEvaluation] = []
    for c in _iter_cases(layout, cfg, case_keys(cfg)):
        if "Xhat" not in c.manifest["files"]:
            raise MissingArtifactError(layout.case_dir(c.key.case) / "Xhat.f32t", "infer")
        xhat = _load_tensor(layout.root / c.manifest["files"]["Xhat"], "infer")
        check_consistent_case(c.tree.n_nodes, c.manifest["n_frames"], Xhat=(xhat, 0, 1))
        evals.append(evaluate_case(c, xhat, threshold))

    rdir = layout.reports_dir
    case_rows = []
    for e in evals:
        mae, mape = _pooled(e.model)
        b_mae, _ = _pooled(e.baseline)
        n = sum(r.n for r in e.model)
        n_ape = sum(r.n_ape for r in e.model)
        case_rows.append((e.case, e.geometry, e.split, n, n - n_ape, mae, mape, b_mae))
    _write_csv(rdir / "metrics_cases.csv",
               ("case", "geometry", "split", "n_points", "n_excluded", "mae", "mape_percent", "baseline_mae"),
               case_rows)
    _write_csv(rdir / "metrics_branches.csv",
               ("case", "split", "branch", "n_points", "n_excluded", "mae", "mape_percent", "baseline_mae",
                "gt_mean", "pred_mean", "signed_error", "radius", "diffusivity", "overlap",
                "foreshortening", "flow_rate"),
               [(r.case, e.split, r.branch, r.n, r.n - r.n_ape, r.mae, r.mape, b.mae, bc.gt_mean,
                 bc.pred_mean, bc.signed_error, bc.radius, bc.diffusivity, bc.overlap, bc.foreshortening,
                 bc.flow_rate)
                for e in evals for r, b, bc in zip(e.model, e.baseline, e.branches)])

    test = [e for e in evals if e.split == "test"] or [e for e in evals if e.split == "val"]
    report_split = test[0].split if test else "none"
    rows = [bc for e in test for bc in e.branches]
    _write_csv(rdir / "bland_altman.csv", ("case", "branch", "mean_concentration", "signed_error", "radius"),
               metrics.bland_altman_rows(rows))
    stride = max(1, cfg.eval.regression_stride)
    _write_csv(rdir / "regression_points.csv", ("case", "gt", "pred"),
               [(e.case, float(g), float(p)) for e in test
                for g, p in zip(e.points[0][::stride], e.points[1][::stride])])
    _write_csv(rdir / "correlations.csv", ("parameter", "statistic", "mean_r", "n_branches", "n_skipped"),
               [(c.parameter, c.statistic, c.mean_r, c.n_branches, c.n_skipped)
                for c in metrics.correlation_table(rows)])

    summary = {"report_split": report_split, "mape_threshold": threshold,
               "splits": {s: _summary_block([e for e in evals if e.split == s])
                          for s in SPLITS if any(e.split == s for e in evals)}}
    _write_json(rdir / "summary.json", _finite(summary))
    return summary


def run_report(cfg: PipelineConfig, out, jobs: int = 1) -> str:
    """Plain-text digest of the evaluation reports."""
    layout = Layout(out)
    summary = _read_json(layout.reports_dir / "summary.json", "eval")
    lines = [f"{'split':<6} {'cases':>5} {'MAE':>9} {'MAPE %':>8} {'R2':>7} {'baseline MAE':>13} {'ratio':>6}"]

    def fmt(v, spec):
        return format(v, spec) if v is not None else "nan"

    for split, b in summary["splits"].items():
        lines.append(f"{split:<6} {b['n_cases']:>5} {fmt(b['mae'], '9.5f')} {fmt(b['mape'], '8.2f')} "
                     f"{fmt(b['r2'], '7.4f')} {fmt(b['baseline_mae'], '13.5f')} {fmt(b['mae_ratio'], '6.3f')}")
    lines.append("")
    lines.append(f"branch-wise Pearson correlations ({summary['report_split']} split):")
    with open(_require(layout.reports_dir / "correlations.csv", "eval"), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            r = float(row["mean_r"])
            lines.append(f"  {row['parameter']:<15} {row['statistic']:<11} "
                         f"{'nan' if math.isnan(r) else format(r, '+.3f')}  (n={row['n_branches']})")
    text = "\n".join(lines) + "\n"
    tensorfile.atomic_write_bytes(layout.reports_dir / "report.txt", text.encode("utf-8"))
    return text


STAGES = {
    "generate": run_generate,
    "simulate": run_simulate,
    "project": run_project,
    "featurize": run_featurize,
    "train": run_train,
    "infer": run_infer,
    "eval": run_eval,
    "report": run_report,
}


def run_all(cfg: PipelineConfig, out, jobs: int = 1) -> dict:
    for name in ("generate", "simulate", "project", "featurize", "train", "infer", "eval"):
        start = time.perf_counter()
        STAGES[name](cfg, out, jobs=jobs)
        logger.info("stage %s finished in %.1f s", name, time.perf_counter() - start)
    return json.loads((Layout(out).reports_dir / "summary.json").read_text(encoding="utf-8"))
