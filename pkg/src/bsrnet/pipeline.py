"""End-to-end pipeline: data, Phase-I pretraining and clustering, Phase-II
mean-teacher training, evaluation and the ablation over arms A-E.

Run directory layout (``out_dir``)::

    config.txt                      config echo
    data/                           dataset (unless data_dir is set)
    phase1/backbone.ckpt, log.csv
    subclass/balanced/              <id>.lab + subclass_map.json + stats.json
    subclass/plain/                 same, unconstrained k-means (arm D)
    phase2_<arm>/model.ckpt, log.csv, metrics.csv, summary.json
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from . import objectives as obj
from . import segnet as sn
from .balclust import SubclassMap, census, generate_subclass_labels
from .config import RunConfig
from .metrics import EvalReport, evaluate_model
from .synthdata import (DatasetSplit, SceneSpec, build_split, load_split, read_raster, save_split,
                        write_raster)

logger = logging.getLogger(__name__)

LOG_FIELDS = ("iteration", "sup", "con_model", "con_task", "total", "active_beta2")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


class MissingArtifact(RuntimeError):
    pass


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_log(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([r["iteration"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])
    _atomic_text(path, buf.getvalue())


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    config: str = ""

    def record(self, iteration: int, lb: obj.LossBreakdown) -> None:
        if self.rows and iteration != self.rows[-1]["iteration"] + 1:
            raise ValueError("log iterations must be consecutive")
        self.rows.append({"iteration": iteration, "sup": lb.sup, "con_model": lb.con_model,
                          "con_task": lb.con_task, "total": lb.total, "active_beta2": lb.active_beta2})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])


# ---------------------------------------------------------------------------
# data


def scene_spec(cfg: RunConfig) -> SceneSpec:
    return SceneSpec(height=cfg.height, width=cfg.width, K=cfg.k)


def generate_data(cfg: RunConfig) -> DatasetSplit:
    split = build_split(scene_spec(cfg), cfg.n_labeled, cfg.n_unlabeled, cfg.n_test, cfg.data_seed)
    save_split(split, cfg.data_path)
    return split


def load_data(cfg: RunConfig, create: bool = False) -> DatasetSplit:
    if not (cfg.data_path / "manifest.json").exists():
        if create:
            return generate_data(cfg)
        raise MissingArtifact(f"no dataset at {cfg.data_path}; run `bsr gen-data` first")
    return load_split(cfg.data_path)


class _Cycler:
    """Endless index stream over ``n`` items, reshuffled every epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.buf: list[int] = []

    def take(self, count: int) -> np.ndarray:
        while len(self.buf) < count:
            self.buf.extend(self.rng.permutation(self.n).tolist())
        out, self.buf = self.buf[:count], self.buf[count:]
        return np.array(out)


def _images(samples, idx) -> np.ndarray:
    return np.stack([samples[i].image[None] for i in idx])


def _arch(cfg: RunConfig, scs_classes=None) -> sn.ArchSpec:
    return sn.ArchSpec(cfg.k + 1, scs_classes, cfg.levels, cfg.base_channels)


def _perturb(cfg: RunConfig, *key) -> sn.Perturbation:
    return sn.Perturbation(cfg.noise_sigma, cfg.noise_clip, seed=[cfg.train_seed, *key])


def _step(params: sn.ModelParams, grads: dict, opt: gc.OptimizerState, iteration: int) -> None:
    pairs = [gc.GradPair(k, params.arrays[k], grads[k]) for k in params.arrays]
    try:
        gc.sgd_update(pairs, opt)
    except gc.NonFiniteGradientError as exc:
        raise TrainingDiverged(iteration, f"gradient for {exc.name}") from exc


# ---------------------------------------------------------------------------
# Phase I


def phase1_train(cfg: RunConfig, split: DatasetSplit | None = None, write: bool = True):
    """Supervised single-decoder backbone on the labeled set; returns ``(params, TrainLog)``."""
    split = split if split is not None else load_data(cfg)
    if not split.labeled:
        raise ValueError("phase 1 needs at least one labeled image")
    params = sn.init_params(_arch(cfg), cfg.init_seed)
    opt = gc.OptimizerState(cfg.learning_rate, cfg.momentum)
    cyc = _Cycler(len(split.labeled), np.random.default_rng([cfg.train_seed, 11]))
    log = TrainLog(config=cfg.to_text())
    t0 = time.perf_counter()
    for it in range(cfg.phase1_iters):
        idx = cyc.take(cfg.labeled_per_batch)
        x = _images(split.labeled, idx)
        y = np.stack([split.labeled[i].label for i in idx])
        noise = _perturb(cfg, 12, it).sample(x.shape)
        preds, cache = sn.forward_train(params, x, "mos", noise)
        loss, dmos = obj.seg_loss_and_grad(preds.mos, y)
        if not np.isfinite(loss):
            raise TrainingDiverged(it)
        log.record(it, obj.LossBreakdown(loss, 0.0, 0.0, loss, 0.0))
        _step(params, sn.backward(params, cache, dmos=dmos), opt, it)
    log.wall_clock = time.perf_counter() - t0
    if write:
        out = Path(cfg.out_dir) / "phase1"
        out.mkdir(parents=True, exist_ok=True)
        sn.save_checkpoint(out / "backbone.ckpt", sn.pack_models(params))
        _write_log(out / "log.csv", log.rows)
    return params, log


def load_backbone(cfg: RunConfig) -> sn.ModelParams:
    path = Path(cfg.out_dir) / "phase1" / "backbone.ckpt"
    if not path.exists():
        raise MissingArtifact(f"no Phase-I backbone at {path}; run `bsr phase1` first")
    student, _ = sn.unpack_models(sn.load_checkpoint(path))
    return student


def check_lossless(sub_labels, labels, smap: SubclassMap) -> int:
    """Number of pixels where parent(subclass label) differs from the label."""
    parent = np.asarray(smap.parent_of)
    return int(sum((parent[s] != np.asarray(y)).sum() for s, y in zip(sub_labels, labels)))


def subclass_dir(cfg: RunConfig, balanced: bool = True) -> Path:
    return Path(cfg.out_dir) / "subclass" / ("balanced" if balanced else "plain")


def phase1_cluster(cfg: RunConfig, backbone: sn.ModelParams | None = None,
                   split: DatasetSplit | None = None, write: bool = True) -> dict:
    """Balanced and plain subclass labels for the labeled set.

    Returns ``{"balanced": SubclassResult, "plain": SubclassResult}``.
    """
    split = split if split is not None else load_data(cfg)
    backbone = backbone if backbone is not None else load_backbone(cfg)
    images = [s.image for s in split.labeled]
    labels = [s.label for s in split.labeled]
    results = {}
    for name, balanced in (("balanced", True), ("plain", False)):
        res = generate_subclass_labels(images, labels, backbone, cfg.k, balanced=balanced,
                                       seed=cfg.cluster_seed, max_points_per_class=cfg.max_points_per_class,
                                       max_iters=cfg.cluster_iters, split_background=cfg.split_background)
        bad = check_lossless(res.sub_labels, labels, res.smap)
        if bad:
            raise RuntimeError(f"{name} subclass labels disagree with class labels on {bad} pixels")
        results[name] = res
        if write:
            out = subclass_dir(cfg, balanced)
            out.mkdir(parents=True, exist_ok=True)
            for s, sub in zip(split.labeled, res.sub_labels):
                write_raster(out / f"{s.id}.lab", sub, "lab")
            res.smap.save(out / "subclass_map.json")
            stats = {"census": res.census.pixel_count.tolist(),
                     "cluster_sizes": {str(c): v.tolist() for c, v in res.cluster_sizes.items()},
                     "subclass_pixels": subclass_populations(res.sub_labels, res.smap).tolist()}
            _atomic_text(out / "stats.json", json.dumps(stats, indent=1))
    return results


def subclass_populations(sub_labels, smap: SubclassMap) -> np.ndarray:
    flat = np.concatenate([np.ravel(s) for s in sub_labels])
    return np.bincount(flat, minlength=smap.k_sub + 1)


def foreground_balance_ratio(sub_labels, smap: SubclassMap) -> float:
    """Largest over smallest pixel population among foreground subclasses."""
    pops = subclass_populations(sub_labels, smap)
    fg = pops[np.asarray(smap.parent_of) != 0]
    fg = fg[fg > 0]
    return float(fg.max() / fg.min())


def load_subclasses(cfg: RunConfig, split: DatasetSplit, balanced: bool = True):
    d = subclass_dir(cfg, balanced)
    if not (d / "subclass_map.json").exists():
        raise MissingArtifact(f"no subclass labels at {d}; run `bsr cluster` first")
    smap = SubclassMap.load(d / "subclass_map.json")
    subs = [read_raster(d / f"{s.id}.lab", "lab") for s in split.labeled]
    return subs, smap


# ---------------------------------------------------------------------------
# Phase II


@dataclass(frozen=True)
class ArmPlan:
    use_unlabeled: bool
    use_scs: bool
    task_consistency: bool
    balanced: bool = True


ARM_PLANS = {
    "A": ArmPlan(False, False, False),
    "B": ArmPlan(True, False, False),
    "C": ArmPlan(True, True, False),
    "D": ArmPlan(True, True, True, balanced=False),
    "E": ArmPlan(True, True, True),
}


def arm_weights(cfg: RunConfig, plan: ArmPlan) -> obj.LossWeights:
    return obj.LossWeights(
        alpha=cfg.alpha if plan.use_scs else 0.0,
        beta1=cfg.beta1 if plan.use_unlabeled else 0.0,
        beta2_final=cfg.beta2_final if plan.task_consistency else 0.0,
        warmup_fraction=cfg.warmup_fraction,
        total_iters=cfg.total_iters,
    )


@dataclass
class Phase2Result:
    student: sn.ModelParams
    teacher: sn.TeacherState
    log: TrainLog
    smap: SubclassMap | None = None


def phase2_train(cfg: RunConfig, arm: str | None = None, split: DatasetSplit | None = None,
                 backbone: sn.ModelParams | None = None, subclasses=None, write: bool = True,
                 test_set=None) -> Phase2Result:
    """Mean-teacher training for one ablation arm.

    ``subclasses`` is ``(sub_labels, SubclassMap)``; when omitted it is read
    from the run directory (balanced, or plain for arm D).  ``backbone`` is
    the Phase-I model used for warm start; it is loaded when needed.
    """
    arm = arm or cfg.ablation_arm
    plan = ARM_PLANS[arm]
    if cfg.detach_scs:
        plan = ArmPlan(plan.use_unlabeled, False, False, plan.balanced)
    split = split if split is not None else load_data(cfg)
    if not split.labeled:
        raise ValueError("phase 2 needs at least one labeled image")
    weights = arm_weights(cfg, plan)

    smap, sub_labels = None, None
    if plan.use_scs:
        if subclasses is None:
            subclasses = load_subclasses(cfg, split, plan.balanced)
        sub_labels, smap = subclasses
        if len(sub_labels) != len(split.labeled):
            raise ValueError("subclass labels do not match the labeled set")

    if cfg.warm_start:
        backbone = backbone if backbone is not None else load_backbone(cfg)
        student = (sn.extend_with_scs(backbone, smap.k_sub + 1, cfg.init_seed) if plan.use_scs
                   else backbone.copy())
    else:
        student = sn.init_params(_arch(cfg, smap.k_sub + 1 if plan.use_scs else None), cfg.init_seed)
    teacher = sn.make_teacher(student, cfg.ema_decay)
    opt = gc.OptimizerState(cfg.learning_rate, cfg.momentum)
    heads = "both" if plan.use_scs else "mos"

    lab_cyc = _Cycler(len(split.labeled), np.random.default_rng([cfg.train_seed, 21]))
    unl_cyc = _Cycler(len(split.unlabeled), np.random.default_rng([cfg.train_seed, 22]))
    nl = cfg.labeled_per_batch
    log = TrainLog(config=cfg.to_text())
    t0 = time.perf_counter()

    for it in range(cfg.total_iters):
        li = lab_cyc.take(nl)
        x_l = _images(split.labeled, li)
        y_l = np.stack([split.labeled[i].label for i in li])
        if plan.use_unlabeled:
            ui = unl_cyc.take(cfg.unlabeled_per_batch)
            x = np.concatenate([x_l, _images(split.unlabeled, ui)])
        else:
            x = x_l
        s_noise = _perturb(cfg, 23, it).sample(x.shape)
        s_pred, cache = sn.forward_train(student, x, heads, s_noise)

        # supervised part on the labeled half
        dmos = np.zeros_like(s_pred.mos)
        dscs = np.zeros_like(s_pred.scs) if plan.use_scs else None
        lab_pred = sn.PredictionMaps(s_pred.mos[:nl], s_pred.scs[:nl] if plan.use_scs else None)
        if plan.use_scs:
            y_sub = np.stack([sub_labels[i] for i in li])
            sup, g_mos, g_scs = obj.sup_loss_and_grad(lab_pred, y_l, y_sub, weights)
            dscs[:nl] += g_scs
        else:
            sup, g_mos = obj.seg_loss_and_grad(lab_pred.mos, y_l)
        dmos[:nl] += g_mos

        con_model = con_task = 0.0
        beta2 = weights.beta2_at(it)
        if plan.use_unlabeled:
            # teacher sees the consistency inputs with its own perturbation; no gradient flows back
            c0 = 0 if cfg.consistency_on_labeled else nl
            t_noise = _perturb(cfg, 24, it).sample(x.shape)[c0:]
            t_pred = sn.forward(teacher.params, x[c0:] + t_noise, heads)
            s_sub = sn.PredictionMaps(s_pred.mos[c0:], s_pred.scs[c0:] if plan.use_scs else None)
            con_model, g_mos, g_scs = obj.model_consistency_and_grad(s_sub, t_pred)
            dmos[c0:] += weights.beta1 * g_mos
            if g_scs is not None:
                dscs[c0:] += weights.beta1 * g_scs
            if plan.use_scs:
                u_t_scs = t_pred.scs[nl - c0:]
                con_task, g_task = obj.task_consistency_and_grad(u_t_scs, s_pred.mos[nl:], smap, cfg.map_mode)
                if beta2:
                    dmos[nl:] += beta2 * g_task

        lb = obj.total_loss(sup, con_model, con_task, weights, it)
        if not np.isfinite(lb.total):
            raise TrainingDiverged(it)
        log.record(it, lb)
        grads = sn.backward(student, cache, dmos=dmos, dscs=dscs)
        _step(student, grads, opt, it)
        sn.ema_update(teacher, student)

        if cfg.eval_every and test_set is not None and (it + 1) % cfg.eval_every == 0:
            rep = evaluate_model(teacher.params, test_set, cfg.k, cfg.eval_mode)
            log.snapshots.append({"iteration": it, "mean_dice": rep.mean_dice, "dice": rep.dice})

    log.wall_clock = time.perf_counter() - t0
    result = Phase2Result(student, teacher, log, smap)
    if write:
        out = Path(cfg.out_dir) / f"phase2_{arm}"
        out.mkdir(parents=True, exist_ok=True)
        sn.save_checkpoint(out / "model.ckpt", sn.pack_models(student, teacher))
        _write_log(out / "log.csv", log.rows)
        _atomic_text(out / "config.txt", cfg.replace(ablation_arm=arm).to_text())
    return result


# ---------------------------------------------------------------------------
# evaluation


def write_report(report: EvalReport, out: Path, meta: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _atomic_text(out / "metrics.csv", report.to_csv())
    summary = report.summary()
    if meta:
        summary.update(meta)
    _atomic_text(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True))


def seed_meta(cfg: RunConfig) -> dict:
    return {"seeds": {"data": cfg.data_seed, "init": cfg.init_seed, "train": cfg.train_seed,
                      "cluster": cfg.cluster_seed}}


def evaluate_cmd(cfg: RunConfig, checkpoint, use_student: bool = False, out: Path | None = None,
                 split: DatasetSplit | None = None) -> EvalReport:
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise MissingArtifact(f"checkpoint not found: {checkpoint}")
    student, teacher = sn.unpack_models(sn.load_checkpoint(checkpoint))
    role = "student" if use_student or teacher is None else "teacher"
    params = student if role == "student" else teacher
    split = split if split is not None else load_data(cfg)
    report = evaluate_model(params, split.test, cfg.k, cfg.eval_mode)
    out = out if out is not None else checkpoint.parent / f"eval_{role}"
    write_report(report, out, {"role": role, "checkpoint": str(checkpoint), **seed_meta(cfg)})
    return report


def smallest_classes(split: DatasetSplit, K: int, count: int = 2) -> list[int]:
    """Foreground classes with the fewest test-set pixels."""
    pops = census([s.label for s in split.test], K).pixel_count[1:]
    return sorted((np.argsort(pops, kind="stable")[:count] + 1).tolist())


def run_arm(cfg: RunConfig, arm: str, split: DatasetSplit, backbone, subclasses) -> tuple[EvalReport, Phase2Result]:
    res = phase2_train(cfg, arm, split=split, backbone=backbone, subclasses=subclasses, test_set=split.test)
    report = evaluate_model(res.teacher.params, split.test, cfg.k, cfg.eval_mode)
    meta = {"arm": arm, "role": "teacher", "train_seconds": res.log.wall_clock,
            "snapshots": res.log.snapshots, **seed_meta(cfg)}
    write_report(report, Path(cfg.out_dir) / f"phase2_{arm}", meta)
    return report, res


# ---------------------------------------------------------------------------
# ablation


def ablate(cfg: RunConfig, arms=("A", "B", "C", "D", "E")) -> dict:
    """Run every arm for every seed on one shared dataset; write ``ablation.csv``."""
    t0, cpu0 = time.perf_counter(), time.process_time()
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    _atomic_text(root / "config.txt", cfg.to_text())
    split = load_data(cfg, create=True)
    small = smallest_classes(split, cfg.k)
    per_seed: dict[int, dict] = {}
    failures = []
    for seed in cfg.seeds:
        scfg = cfg.replace(out_dir=str(root / "ablation" / f"seed{seed}"), data_dir=str(cfg.data_path),
                           init_seed=seed, train_seed=seed, cluster_seed=seed)
        Path(scfg.out_dir).mkdir(parents=True, exist_ok=True)
        backbone, _ = phase1_train(scfg, split)
        clusters = phase1_cluster(scfg, backbone, split)
        ratios = {k: foreground_balance_ratio(v.sub_labels, v.smap) for k, v in clusters.items()}
        per_seed[seed] = {"balance_ratio": ratios, "arms": {}}
        for arm in arms:
            plan = ARM_PLANS[arm]
            res = clusters["balanced" if plan.balanced else "plain"]
            try:
                rep, _ = run_arm(scfg, arm, split, backbone, (res.sub_labels, res.smap))
                per_seed[seed]["arms"][arm] = {"dice": rep.dice, "ji": rep.ji, "mean_dice": rep.mean_dice,
                                               "small_dice": float(np.mean([rep.dice[c - 1] for c in small]))}
                logger.info("seed %d arm %s: mean dice %.4f", seed, arm, rep.mean_dice)
            except Exception as exc:  # keep going with the remaining arms
                logger.exception("seed %d arm %s failed", seed, arm)
                failures.append({"seed": seed, "arm": arm, "error": repr(exc)})

    table = []
    for arm in arms:
        runs = [per_seed[s]["arms"][arm] for s in cfg.seeds if arm in per_seed[s]["arms"]]
        if runs:
            dice = np.mean([r["dice"] for r in runs], axis=0).tolist()
            row = {"arm": arm, "dice": dice, "mean_dice": float(np.mean([r["mean_dice"] for r in runs])),
                   "small_dice": float(np.mean([r["small_dice"] for r in runs])), "n_seeds": len(runs)}
        else:
            row = {"arm": arm, "dice": [float("nan")] * cfg.k, "mean_dice": float("nan"),
                   "small_dice": float("nan"), "n_seeds": 0}
        table.append(row)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm"] + [f"dice_{c}" for c in range(1, cfg.k + 1)] + ["mean_dice", "small_dice"])
    for row in table:
        w.writerow([row["arm"]] + [f"{d:.6f}" for d in row["dice"]]
                   + [f"{row['mean_dice']:.6f}", f"{row['small_dice']:.6f}"])
    _atomic_text(root / "ablation.csv", buf.getvalue())
    summary = {"table": table, "per_seed": {str(k): v for k, v in per_seed.items()},
               "smallest_classes": small, "failures": failures,
               "wall_clock_seconds": time.perf_counter() - t0, "cpu_seconds": time.process_time() - cpu0}
    _atomic_text(root / "ablation.json", json.dumps(summary, indent=1))
    return summary
