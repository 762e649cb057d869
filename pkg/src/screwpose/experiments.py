"""Dataset generation and the experiment drivers (noise sweep, size sweep).

Layout under the dataset root:
    dataset.json
    <split>/images/<id>[_v<k>].png  (+ .npy float32 sidecar)
    <split>/meta.json

and under the experiment root:
    annotations/eta<e>/<split>.k<k>.json
    models/<condition>.ckpt
    results/<experiment>/{errors.csv, summary.csv, fit.csv, provenance.json}

Sweeps are controlled comparisons: test images, repetitions, initial
estimates and the network init share seeds across conditions; only the
training annotations (and training subset) differ.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    anatomy_specs_from,
    augment_from,
    geometry_from,
    network_config_from,
    patch_spec_from,
    screw_from,
)
from .geometry import (
    ImagePose,
    ProjectionGeometry,
    WorldPose,
    forward_angle_error,
    position_error_mm,
    rotate_geometry,
    unit,
    vec3,
    world_to_image_pose,
)
from .estimator import EstimatorConfig, estimate
from .noise import (
    NoiseLevel,
    annotate_dataset,
    derived_seed,
    normal_draws,
    save_annotations,
)
from .phantom import AnatomySpec, ScrewModel, generate_anatomy, local_frame
from .regressor import (
    ModelCheckpoint,
    make_training_set,
    sample_initial_estimate,
    samples_to_arrays,
    train,
)
from .renderer import (
    geometry_id,
    render_anatomy,
    save_png16,
    screw_image,
)
from .stats import linear_fit, summarize

log = logging.getLogger(__name__)


class SizeExceedsDataset(Exception):
    pass


def code_hash() -> str:
    """Hash of the package sources, recorded in provenance."""
    digest = hashlib.sha256()
    pkg = Path(__file__).parent
    for path in sorted(pkg.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()[:16]


def _stable_id(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


# ------------------------------------------------------------ pose sampling

def reference_poses(anatomy: AnatomySpec, g: ProjectionGeometry, n: int,
                    master_seed: int, surface_scale: float,
                    tilt_max_deg: float) -> list[WorldPose]:
    """Procedural stand-ins for clinically plausible reference poses.

    Positions sit on a scaled copy of the anatomy shell; axes stay within
    a bounded tilt against the base detector plane so forward angles
    remain well conditioned.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence([master_seed & 0x7FFFFFFF, anatomy.seed, 11]))
    center = np.array(anatomy.center, dtype=np.float64)
    semi = np.array(anatomy.shell_semi_axes, dtype=np.float64) * surface_scale
    poses = []
    for _ in range(n):
        z = normal_draws(rng, 3)
        direction = unit(z)
        origin = center + semi * direction
        tilt = math.radians((2.0 * rng.random() - 1.0) * tilt_max_deg)
        phi = 2.0 * math.pi * rng.random()
        in_plane = (math.cos(phi) * g.detector_u
                    + math.sin(phi) * g.detector_v)
        axis = math.cos(tilt) * in_plane + math.sin(tilt) * g.normal
        poses.append(WorldPose(origin, unit(axis)))
    return poses


def sample_pose_near(ref: WorldPose, rng: np.random.Generator,
                     position_sigma_mm: float,
                     cone_deg: float) -> WorldPose:
    """Vicinity sampling: normal position jitter, uniform cone on the axis."""
    z = normal_draws(rng, 3)
    origin = ref.origin + position_sigma_mm * z
    theta = math.radians(cone_deg) * math.sqrt(rng.random())
    phi = 2.0 * math.pi * rng.random()
    frame = local_frame(ref.axis)
    axis = (math.cos(theta) * frame[0]
            + math.sin(theta) * (math.cos(phi) * frame[1]
                                 + math.sin(phi) * frame[2]))
    return WorldPose(origin, unit(axis))


# ------------------------------------------------------------------ dataset

SPLITS = ("train", "validation", "test", "expert")


@dataclass
class ViewRecord:
    png: str
    raw: str | None
    image_pose: ImagePose

    def to_json(self) -> dict:
        return {"png": self.png, "raw": self.raw,
                "image_pose": self.image_pose.to_json()}

    @staticmethod
    def from_json(d: dict) -> "ViewRecord":
        return ViewRecord(d["png"], d.get("raw"),
                          ImagePose.from_json(d["image_pose"]))


@dataclass
class SplitRecord:
    image_id: str
    anatomy_seed: int
    reference_index: int
    world_pose: WorldPose
    views: list

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "anatomy_seed": self.anatomy_seed,
            "reference_index": self.reference_index,
            "world_pose": self.world_pose.to_json(),
            "views": [v.to_json() for v in self.views],
        }

    @staticmethod
    def from_json(d: dict) -> "SplitRecord":
        return SplitRecord(
            image_id=d["image_id"],
            anatomy_seed=int(d["anatomy_seed"]),
            reference_index=int(d["reference_index"]),
            world_pose=WorldPose.from_json(d["world_pose"]),
            views=[ViewRecord.from_json(v) for v in d["views"]],
        )


@dataclass
class Dataset:
    root: Path
    lo: float
    hi: float
    screw: ScrewModel
    view_geometries: dict      # split -> list[ProjectionGeometry]
    splits: dict               # split -> list[SplitRecord]
    meta: dict = field(default_factory=dict)

    @staticmethod
    def load(root) -> "Dataset":
        root = Path(root)
        header = json.loads((root / "dataset.json").read_text())
        view_geoms = {}
        splits = {}
        for split in header["splits"]:
            meta = json.loads((root / split / "meta.json").read_text())
            view_geoms[split] = [ProjectionGeometry.from_json(g)
                                 for g in meta["views"]]
            splits[split] = [SplitRecord.from_json(r) for r in meta["records"]]
        return Dataset(
            root=root,
            lo=float(header["lo"]),
            hi=float(header["hi"]),
            screw=ScrewModel.from_json(header["screw"]),
            view_geometries=view_geoms,
            splits=splits,
            meta=header,
        )

    def geometry(self, split: str, view: int = 0) -> ProjectionGeometry:
        return self.view_geometries[split][view]

    def load_pixels(self, split: str, rec: SplitRecord,
                    view: int = 0) -> np.ndarray:
        """Float line integrals: raw sidecar when present, PNG otherwise."""
        vr = rec.views[view]
        if vr.raw:
            path = self.root / split / vr.raw
            if path.exists():
                return np.load(path).astype(np.float64)
        from .renderer import load_png16
        return load_png16(self.root / split / vr.png, self.lo, self.hi)


def split_counts(cfg: dict) -> dict:
    d = cfg["dataset"]
    factor = float(d["factor"])
    return {
        "train": max(1, round(d["images"]["train"] * factor)),
        "validation": max(1, round(d["images"]["validation"] * factor)),
        "test": max(1, round(d["images"]["test"] * factor)),
        "expert": max(1, round(d["images"]["expert"] * factor)),
    }


def generate_dataset(cfg: dict, out_dir=None) -> Dataset:
    """Render every split to disk; deterministic in the master seed."""
    d = cfg["dataset"]
    root = Path(out_dir if out_dir is not None else d["out_dir"])
    master = int(cfg["master_seed"])
    g = geometry_from(cfg)
    screw = screw_from(cfg)
    anatomies = anatomy_specs_from(cfg)
    if len(anatomies) < 3:
        raise ValueError("leave-one-anatomy-out needs three anatomy seeds")
    counts = split_counts(cfg)
    step = float(d["step_mm"])
    write_raw = bool(d["write_raw_sidecar"])
    second_angles = [float(a) for a in d["second_view_angles_deg"]]
    anatomy_center = vec3(cfg["anatomy"]["center"])

    # split -> (anatomy specs used, view geometries)
    expert_views = [g] + [rotate_geometry(g, g.detector_v, a, anatomy_center)
                          for a in second_angles]
    plan = {
        "train": ([anatomies[0], anatomies[1]], [g]),
        "validation": ([anatomies[0], anatomies[1]], [g]),
        "test": ([anatomies[2]], [g]),
        "expert": ([anatomies[2]], expert_views),
    }

    refs = {
        a.seed: reference_poses(a, g, int(d["references_per_anatomy"]),
                                master, float(d["surface_scale"]),
                                float(d["reference_tilt_max_deg"]))
        for a in anatomies
    }

    volumes = {}
    anatomy_cache = {}

    def anatomy_image(spec: AnatomySpec, geom: ProjectionGeometry):
        key = (spec.seed, geometry_id(geom))
        if key not in anatomy_cache:
            if spec.seed not in volumes:
                log.info("generating anatomy %d", spec.seed)
                volumes[spec.seed] = generate_anatomy(spec)
            log.info("rendering anatomy %d for geometry %s", spec.seed, key[1])
            anatomy_cache[key] = render_anatomy(volumes[spec.seed], geom, step)
        return anatomy_cache[key]

    hi = 0.0
    split_records: dict[str, list[SplitRecord]] = {}
    for split_idx, split in enumerate(SPLITS):
        specs, views = plan[split]
        records = []
        for i in range(counts[split]):
            spec = specs[i % len(specs)]
            ref_list = refs[spec.seed]
            ref_idx = i % len(ref_list)
            rng = np.random.default_rng(np.random.SeedSequence(
                [master & 0x7FFFFFFF, split_idx, i]))
            wp = sample_pose_near(ref_list[ref_idx], rng,
                                  float(d["position_sigma_mm"]),
                                  float(d["direction_cone_deg"]))
            image_id = f"{split}_{i:05d}"
            view_recs = []
            for v_idx, geom in enumerate(views):
                suffix = f"_v{v_idx}" if len(views) > 1 else ""
                pixels = anatomy_image(spec, geom) + screw_image(screw, wp, geom)
                hi = max(hi, float(pixels.max()))
                img_dir = root / split / "images"
                img_dir.mkdir(parents=True, exist_ok=True)
                # sidecars are always written during generation (the global
                # PNG window needs a second pass); dropped later if disabled
                np.save(img_dir / f"{image_id}{suffix}.npy",
                        pixels.astype(np.float32))
                view_recs.append(ViewRecord(
                    png=f"images/{image_id}{suffix}.png",
                    raw=f"images/{image_id}{suffix}.npy" if write_raw else None,
                    image_pose=world_to_image_pose(wp, geom),
                ))
            records.append(SplitRecord(
                image_id=image_id,
                anatomy_seed=spec.seed,
                reference_index=ref_idx,
                world_pose=wp,
                views=view_recs,
            ))
        split_records[split] = records
        log.info("split %s: %d scenes rendered", split, len(records))

    lo = 0.0
    # second pass: quantize PNGs with the global window
    for split in SPLITS:
        for rec in split_records[split]:
            for vr in rec.views:
                raw_path = (root / split / vr.png).with_suffix(".npy")
                pixels = np.load(raw_path).astype(np.float64)
                save_png16(root / split / vr.png, pixels, lo, hi)
                if not write_raw:
                    raw_path.unlink()
        meta = {
            "split": split,
            "lo": lo,
            "hi": hi,
            "views": [geom.to_json() for geom in plan[split][1]],
            "records": [r.to_json() for r in split_records[split]],
        }
        (root / split / "meta.json").write_text(
            json.dumps(meta, sort_keys=True, indent=1))

    header = {
        "version": __version__,
        "master_seed": master,
        "lo": lo,
        "hi": hi,
        "factor": d["factor"],
        "step_mm": step,
        "geometry": g.to_json(),
        "screw": screw.to_json(),
        "anatomy_seeds": [a.seed for a in anatomies],
        "held_out_anatomy_seed": anatomies[2].seed,
        "splits": {s: counts[s] for s in SPLITS},
        "code_hash": code_hash(),
    }
    (root / "dataset.json").write_text(json.dumps(header, sort_keys=True,
                                                  indent=1))
    return Dataset.load(root)


# --------------------------------------------------------------- evaluation

def evaluate_model(dataset: Dataset, model, cfg: dict,
                   split: str = "test") -> list[dict]:
    """Run the estimator over a split; rows follow the results CSV schema.

    Initial-estimate seeds depend only on (image, repetition), never on the
    trained condition, so sweep conditions stay directly comparable.
    """
    g = dataset.geometry(split, 0)
    est_cfg = EstimatorConfig(
        model=model,
        patch_spec=patch_spec_from(cfg),
        iterations=int(cfg["estimator"]["iterations"]),
        min_line_angle_deg=float(cfg["estimator"]["min_line_angle_deg"]),
    )
    augment = augment_from(cfg)
    reps = int(cfg["experiment"]["repetitions"])
    master = int(cfg["master_seed"])
    rows = []
    for rec in dataset.splits[split]:
        pixels = dataset.load_pixels(split, rec, 0)
        gt_ip = rec.views[0].image_pose
        for rep in range(reps):
            rng = np.random.default_rng(np.random.SeedSequence(
                [master & 0x7FFFFFFF, _stable_id(rec.image_id), rep, 97]))
            initial = sample_initial_estimate(gt_ip, augment, rng)
            result = estimate(pixels, initial, est_cfg)
            pose = result.pose
            rows.append({
                "image_id": rec.image_id,
                "repetition": rep,
                "iterations": len(result.trace),
                "x_instr_gt_u": gt_ip.u,
                "x_instr_gt_v": gt_ip.v,
                "x_instr_est_u": pose.u,
                "x_instr_est_v": pose.v,
                "alpha_gt_deg": gt_ip.alpha_deg,
                "alpha_est_deg": pose.alpha_deg,
                "position_error_mm": position_error_mm(
                    rec.world_pose, (pose.u, pose.v), g),
                "forward_angle_error_deg": forward_angle_error(
                    gt_ip.alpha_deg, pose.alpha_deg),
                "fallback": int(result.fallback_used),
                "aborted": int(result.aborted),
                "trace_position_errors_mm": [
                    position_error_mm(rec.world_pose, (p.u, p.v), g)
                    for p in result.trace],
            })
    return rows


def _train_condition(dataset: Dataset, cfg: dict, label: str,
                     train_records, annotations_train, annotations_val,
                     epochs_override=None, models_dir=None):
    """Shared train path for sweep conditions; returns the trained model."""
    g = dataset.geometry("train", 0)
    spec = patch_spec_from(cfg)
    augment = augment_from(cfg)
    net = network_config_from(cfg)
    if epochs_override is not None:
        # keep the decay points at the same fractions of the schedule
        decay = tuple(max(1, round(e * epochs_override / net.epochs))
                      for e in net.decay_epochs)
        net.epochs = int(epochs_override)
        net.decay_epochs = decay
    master = int(cfg["master_seed"])
    t_cfg = cfg["training"]

    def image_stream(split, records):
        for rec in records:
            yield rec.image_id, dataset.load_pixels(split, rec, 0)

    train_samples = make_training_set(
        image_stream("train", train_records), annotations_train, g,
        dataset.screw, spec, augment,
        int(t_cfg["patches_per_image"]),
        derived_seed(master, f"{label}:train-patches", 0))
    val_samples = make_training_set(
        image_stream("validation", dataset.splits["validation"]),
        annotations_val, g, dataset.screw, spec, augment,
        int(t_cfg["val_patches_per_image"]),
        derived_seed(master, "val-patches", 0))

    x_train, y_train = samples_to_arrays(train_samples)
    x_val, y_val = samples_to_arrays(val_samples)
    log.info("[%s] training on %d samples (val %d), %d epochs", label,
             len(x_train), len(x_val), net.epochs)
    result = train(net, (x_train, y_train), (x_val, y_val))
    log.info("[%s] best val %.6f at epoch %d", label,
             result.checkpoint.val_error, result.checkpoint.epoch)
    if models_dir is not None:
        models_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint.save(models_dir / f"{label}.ckpt")
    return result


@dataclass
class Condition:
    label: str
    value: float
    rows: list
    summary_position: dict
    summary_angle: dict
    train_result: object = None


@dataclass
class ExperimentResult:
    name: str
    conditions: list
    fits: list
    out_dir: Path | None


def _condition_package(label, value, rows) -> Condition:
    pos = np.array([r["position_error_mm"] for r in rows])
    ang = np.array([r["forward_angle_error_deg"] for r in rows])
    return Condition(
        label=label,
        value=float(value),
        rows=rows,
        summary_position=summarize(pos),
        summary_angle=summarize(ang),
    )


def _annotate_split(dataset: Dataset, cfg: dict, split: str, eta: float,
                    k: int, ann_dir: Path | None):
    g = dataset.geometry(split, 0)
    items = [(r.image_id, r.world_pose) for r in dataset.splits[split]]
    master = int(cfg["master_seed"])
    seed = derived_seed(master, f"annotations:{split}:eta={eta:g}:k={k}", 0)
    anns = annotate_dataset(items, g, NoiseLevel(eta), k, seed)
    if ann_dir is not None:
        save_annotations(ann_dir / f"eta{eta:g}" / f"{split}.k{k}.json", anns)
    return anns


def run_noise_sweep(cfg: dict, dataset: Dataset | None = None,
                    etas=None, write: bool = True) -> ExperimentResult:
    """Train one model per noise level, evaluate on shared test conditions."""
    if dataset is None:
        dataset = Dataset.load(cfg["dataset"]["out_dir"])
    exp_root = Path(cfg["experiment"]["out_dir"])
    etas = [float(e) for e in (etas if etas is not None
                               else cfg["experiment"]["etas"])]
    ann_dir = exp_root / "annotations" if write else None
    models_dir = exp_root / "models" if write else None

    conditions = []
    for eta in etas:
        label = f"eta{eta:g}"
        ann_train = _annotate_split(dataset, cfg, "train", eta, 1, ann_dir)
        ann_val = _annotate_split(dataset, cfg, "validation", eta, 1, ann_dir)
        tr = _train_condition(dataset, cfg, label,
                              dataset.splits["train"], ann_train, ann_val,
                              models_dir=models_dir)
        rows = evaluate_model(dataset, tr.checkpoint.to_model(), cfg)
        cond = _condition_package(label, eta, rows)
        cond.train_result = tr
        conditions.append(cond)

    medians_pos = [c.summary_position["median"] for c in conditions]
    medians_ang = [abs(c.summary_angle["q75"] - c.summary_angle["q25"])
                   for c in conditions]
    fits = []
    if len(set(etas)) >= 2:
        f = linear_fit(etas, medians_pos)
        f["metric"] = "median_position_error_mm"
        fits.append(f)
        f2 = linear_fit(etas, medians_ang)
        f2["metric"] = "forward_angle_error_iqr_deg"
        fits.append(f2)

    result = ExperimentResult("noise_sweep", conditions, fits,
                              exp_root / "results" / "noise_sweep"
                              if write else None)
    if write:
        _write_experiment(result, cfg, condition_key="eta")
    return result


def resolve_sweep_sizes(cfg: dict, n_train: int) -> list[int]:
    """Paper-scale size list scaled by the dataset factor, clipped and deduped."""
    factor = float(cfg["dataset"]["factor"])
    paper = [int(s) for s in cfg["experiment"]["sizes"]]
    if cfg["experiment"].get("include_interpolated_size"):
        paper = sorted(set(paper) | {2500})
    # round half up so 625 * 0.1 lands on 63
    sizes = sorted({max(1, math.floor(s * factor + 0.5)) for s in paper})
    return [s for s in sizes if s <= n_train]


def run_size_sweep(cfg: dict, dataset: Dataset | None = None,
                   sizes=None, eta: float | None = None,
                   triple_annotation_on_max: bool | None = None,
                   write: bool = True) -> ExperimentResult:
    """Train on nested subsets at fixed noise; gradient updates equalized.

    The epoch count for size s is ceil(base_epochs * s_max / s), counting
    annotations as samples, so every condition sees the same number of
    gradient updates as the largest one.
    """
    if dataset is None:
        dataset = Dataset.load(cfg["dataset"]["out_dir"])
    exp_root = Path(cfg["experiment"]["out_dir"])
    train_records = dataset.splits["train"]
    n_train = len(train_records)
    if sizes is None:
        sizes = resolve_sweep_sizes(cfg, n_train)
    sizes = sorted(int(s) for s in sizes)
    if not sizes:
        raise SizeExceedsDataset("no usable sizes")
    if sizes[-1] > n_train:
        raise SizeExceedsDataset(
            f"size {sizes[-1]} exceeds train split ({n_train})")
    eta = float(cfg["experiment"]["size_sweep_eta"] if eta is None else eta)
    if triple_annotation_on_max is None:
        triple_annotation_on_max = bool(
            cfg["experiment"]["triple_annotation_on_max"])
    base_epochs = int(cfg["network"]["epochs"])
    s_max = sizes[-1]
    ann_dir = exp_root / "annotations" if write else None
    models_dir = exp_root / "models" if write else None

    # one annotation pass; per-image derived seeds make subsets consistent
    ann_train = _annotate_split(dataset, cfg, "train", eta, 1, ann_dir)
    ann_val = _annotate_split(dataset, cfg, "validation", eta, 1, ann_dir)

    conditions = []
    plans = [(f"n{s}", s, train_records[:s], ann_train, s) for s in sizes]
    if triple_annotation_on_max:
        ann_triple = _annotate_split(dataset, cfg, "train", eta, 3, ann_dir)
        plans.append((f"n{s_max}x3", 3 * s_max, train_records[:s_max],
                      ann_triple, 3 * s_max))

    for label, value, records, anns, effective in plans:
        epochs = max(1, math.ceil(base_epochs * s_max / effective))
        tr = _train_condition(dataset, cfg, label, records, anns, ann_val,
                              epochs_override=epochs, models_dir=models_dir)
        rows = evaluate_model(dataset, tr.checkpoint.to_model(), cfg)
        cond = _condition_package(label, value, rows)
        cond.train_result = tr
        conditions.append(cond)

    untripled = conditions[:len(sizes)]
    fits = []
    if len(sizes) >= 2:
        f = linear_fit(np.log2([c.value for c in untripled]),
                       [c.summary_position["median"] for c in untripled])
        f["metric"] = "median_position_error_mm_vs_log2_size"
        fits.append(f)

    result = ExperimentResult("size_sweep", conditions, fits,
                              exp_root / "results" / "size_sweep"
                              if write else None)
    if write:
        _write_experiment(result, cfg, condition_key="size")
    return result


# ----------------------------------------------------------------- outputs

_ERROR_COLUMNS = (
    "image_id", "repetition", "iterations",
    "x_instr_gt_u", "x_instr_gt_v", "x_instr_est_u", "x_instr_est_v",
    "alpha_gt_deg", "alpha_est_deg",
    "position_error_mm", "forward_angle_error_deg", "fallback", "aborted",
)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (np.floating,)):
        return repr(float(value))
    return str(value)


def write_errors_csv(path, conditions, condition_key: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("condition", condition_key) + _ERROR_COLUMNS)
        for cond in conditions:
            for row in cond.rows:
                w.writerow([cond.label, _fmt(cond.value)]
                           + [_fmt(row[c]) for c in _ERROR_COLUMNS])


def write_summary_csv(path, conditions, condition_key: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ("n", "mean", "std", "median", "q25", "q75", "q05", "q95", "max")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("condition", condition_key, "metric") + fields)
        for cond in conditions:
            for metric, summ in (
                    ("position_error_mm", cond.summary_position),
                    ("forward_angle_error_deg", cond.summary_angle)):
                w.writerow([cond.label, _fmt(cond.value), metric]
                           + [_fmt(summ[k]) for k in fields])


def write_fit_csv(path, fits) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("metric", "slope", "intercept", "r_squared"))
        for fit in fits:
            w.writerow([fit["metric"], _fmt(fit["slope"]),
                        _fmt(fit["intercept"]), _fmt(fit["r_squared"])])


def _write_experiment(result: ExperimentResult, cfg: dict,
                      condition_key: str) -> None:
    out = result.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_errors_csv(out / "errors.csv", result.conditions, condition_key)
    write_summary_csv(out / "summary.csv", result.conditions, condition_key)
    write_fit_csv(out / "fit.csv", result.fits)
    iteration_medians = {}
    for cond in result.conditions:
        traces = [r["trace_position_errors_mm"] for r in cond.rows
                  if r["trace_position_errors_mm"]]
        if traces:
            depth = min(len(t) for t in traces)
            iteration_medians[cond.label] = [
                float(np.median([t[i] for t in traces])) for i in range(depth)]
    provenance = {
        "experiment": result.name,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "code_hash": code_hash(),
        "master_seed": cfg["master_seed"],
        "conditions": [c.label for c in result.conditions],
        "condition_key": condition_key,
        "iteration_medians": iteration_medians,
        "config": cfg,
        "best_epochs": {
            c.label: (c.train_result.checkpoint.epoch
                      if c.train_result else None)
            for c in result.conditions},
        "val_errors": {
            c.label: (c.train_result.checkpoint.val_error
                      if c.train_result else None)
            for c in result.conditions},
    }
    (out / "provenance.json").write_text(
        json.dumps(provenance, sort_keys=True, indent=1))
