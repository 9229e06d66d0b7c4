"""Stage orchestration: data -> train-ae -> fit-ot -> train-gan -> eval.

Every stage writes into a directory named by a digest of its config slice
and its upstream digest; a `done.json` marker there lets `resume` reuse it.
Stages always read their inputs back from upstream artifacts so cached and
fresh runs see bit-identical data.
"""
from __future__ import annotations

import dataclasses as dc
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .aegan import (
    AeSchedule,
    Autoencoder,
    AutoencoderSpec,
    GanModel,
    GaussianLatentSampler,
    OtLatentSampler,
    TrainSchedule,
    encode_dataset,
    generate,
    train_autoencoder,
    train_gan,
    write_history_csv,
)
from .config import RunConfig
from .core import PointCloud, RngStream, uniform_cube_sample
from .datasets import DATASET_KINDS, load_idx, make_dataset
from .extension import ExtendedMap, build_rips, choose_epsilon, sample_latent_batch
from .metrics import (
    ModeSpec,
    cell_uniformity,
    coverage,
    exact_w2,
    nearest_code_gap,
    nearest_code_projection,
)
from .plots import emit_plots
from .saver import ArtifactSaver
from .sdot import CubeScaling, SdotProblem, SolverConfig, from_checkpoint, solve, to_checkpoint
from .utils import digest, read_json, serialize_json, stage_dir, write_json, write_rows

STAGES = ("train-ae", "fit-ot", "train-gan", "eval")
DATA_STAGE = "data"
_STREAMS = {DATA_STAGE: 0, "train-ae": 1, "fit-ot": 2, "train-gan": 3, "eval": 4}
_SECTIONS = {DATA_STAGE: "data", "train-ae": "autoencoder", "fit-ot": "ot", "train-gan": "gan", "eval": "eval"}
_UPSTREAM = {DATA_STAGE: None, "train-ae": DATA_STAGE, "fit-ot": "train-ae", "train-gan": "fit-ot", "eval": "train-gan"}


class StageFailed(RuntimeError):
    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


@dc.dataclass
class StageRecord:
    name: str
    status: str = "pending"  # pending | completed | cached | failed
    digest: str = ""
    directory: str = ""
    checkpoints: Dict[str, str] = dc.field(default_factory=dict)
    metrics: Dict[str, Any] = dc.field(default_factory=dict)
    error: str = ""


@dc.dataclass
class RunManifest:
    run_id: str
    config: Dict[str, Any]
    dataset: StageRecord
    stages: List[StageRecord]

    def stage(self, name: str) -> StageRecord:
        if name == DATA_STAGE:
            return self.dataset
        for rec in self.stages:
            if rec.name == name:
                return rec
        raise KeyError(name)

    def to_json(self) -> Dict[str, Any]:
        return dc.asdict(self)

    @staticmethod
    def from_json(d: Dict[str, Any]) -> "RunManifest":
        return RunManifest(
            run_id=d["run_id"],
            config=d["config"],
            dataset=StageRecord(**d["dataset"]),
            stages=[StageRecord(**s) for s in d["stages"]],
        )


def config_snapshot(cfg: RunConfig) -> Dict[str, Any]:
    snap = cfg.to_mapping()
    snap.pop("out_dir", None)
    snap.pop("logging", None)
    return snap


def run_id_for(cfg: RunConfig) -> str:
    return "run-" + digest(config_snapshot(cfg))


def stage_digests(cfg: RunConfig) -> Dict[str, str]:
    snap = config_snapshot(cfg)
    out: Dict[str, str] = {}
    for name in (DATA_STAGE, *STAGES):
        up = _UPSTREAM[name]
        out[name] = digest({"stage": name, "seed": cfg.seed, "config": snap[_SECTIONS[name]], "upstream": out[up] if up else None})
    return out


def manifest_path(out_dir: Path, run_id: str) -> Path:
    return Path(out_dir) / run_id / "manifest.json"


def load_manifest(out_dir: Path, run_id: str) -> RunManifest:
    return RunManifest.from_json(read_json(manifest_path(out_dir, run_id)))


def _labels_rows(labels: Optional[np.ndarray]):
    return [] if labels is None else [[int(v)] for v in labels]


class Pipeline:
    def __init__(self, cfg: RunConfig, out_dir: Optional[Path] = None, resume: bool = False) -> None:
        self.cfg = cfg
        self.out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
        self.resume = resume
        self.rng = RngStream(cfg.seed)
        self.digests = stage_digests(cfg)
        self.run_id = run_id_for(cfg)
        self.saver = ArtifactSaver()
        self.manifest = RunManifest(
            run_id=self.run_id,
            config=config_snapshot(cfg),
            dataset=StageRecord(name=DATA_STAGE),
            stages=[StageRecord(name=s) for s in STAGES],
        )

    # ------------------------------------------------------------ helpers

    def dir_of(self, name: str) -> Path:
        return stage_dir(self.out_dir, name, self.digests[name])

    def _rel(self, p: Path) -> str:
        return Path(p).relative_to(self.out_dir).as_posix()

    def _write_manifest(self) -> Path:
        path = manifest_path(self.out_dir, self.run_id)
        write_json(path, self.manifest.to_json())
        write_json(path.parent / "config.json", self.manifest.config)
        return path

    def _save_csv(self, path: Path, cloud: PointCloud) -> None:
        self.saver.submit(path, cloud.to_csv)

    def _save_json(self, path: Path, d: Dict[str, Any]) -> None:
        self.saver.submit_text(path, serialize_json(d))

    def _load_dataset(self) -> Tuple[PointCloud, Optional[ModeSpec]]:
        d = self.dir_of(DATA_STAGE)
        points = PointCloud.from_csv(d / "dataset.csv")
        modes_json = read_json(d / "modes.json")
        return points, (ModeSpec.from_json(modes_json) if modes_json.get("centers") else None)

    def _load_codes(self) -> PointCloud:
        return PointCloud.from_csv(self.dir_of("train-ae") / "codes.csv")

    def _load_autoencoder(self) -> Autoencoder:
        return Autoencoder.from_checkpoint(read_json(self.dir_of("train-ae") / "autoencoder.json"))

    def _load_extended_map(self, codes: PointCloud) -> Tuple[ExtendedMap, float]:
        ckpt = read_json(self.dir_of("fit-ot") / "potential.json")
        potential, stats, _ = from_checkpoint(ckpt)
        eps = float(ckpt["epsilon"])
        scaling = CubeScaling.from_json(ckpt["scaling"]) if ckpt.get("scaling") else None
        emap = ExtendedMap(
            problem=SdotProblem(scaling.apply(codes) if scaling is not None else codes),
            potential=potential,
            cell_stats=stats,
            rips=build_rips(codes, eps),
            neighbor_count=self.cfg.ot.neighbor_count,
            scaling=scaling,
        )
        return emap, eps

    def _sampler(self, codes: PointCloud):
        if self.cfg.gan.latent_source == "gaussian":
            return GaussianLatentSampler.from_codes(codes)
        return OtLatentSampler(self._load_extended_map(codes)[0])

    # ------------------------------------------------------------ stages

    def stage_data(self, rng: RngStream, out: Path) -> Tuple[Dict[str, str], Dict[str, Any]]:
        dc_ = self.cfg.data
        labels = None
        modes = None
        if dc_.kind in DATASET_KINDS:
            ds = make_dataset(dc_.kind, dc_.params, rng)
            points, labels, modes = ds.points, ds.labels, ds.modes
        elif dc_.kind == "idx":
            points = load_idx(Path(dc_.path))
        elif dc_.kind == "csv":
            points = PointCloud.from_csv(Path(dc_.path))
        else:
            raise ValueError(f"unknown data kind '{dc_.kind}'")
        if dc_.limit > 0:
            points = points.subset(np.arange(min(dc_.limit, len(points))))
            labels = None if labels is None else labels[: len(points)]
        if len(points) == 0:
            raise ValueError("dataset is empty")
        self._save_csv(out / "dataset.csv", points)
        self.saver.submit(out / "labels.csv", lambda p: write_rows(p, ["label"], _labels_rows(labels)))
        self._save_json(out / "modes.json", modes.to_json() if modes is not None else {})
        ckpts = {"dataset": out / "dataset.csv", "labels": out / "labels.csv", "modes": out / "modes.json"}
        metrics = {"kind": dc_.kind, "n": len(points), "dim": points.dim, "modes": 0 if modes is None else len(modes.centers)}
        return {k: self._rel(v) for k, v in ckpts.items()}, metrics

    def stage_train_ae(self, rng: RngStream, out: Path):
        a = self.cfg.autoencoder
        x, _ = self._load_dataset()
        res = train_autoencoder(
            x,
            AutoencoderSpec(latent_dim=a.latent_dim, hidden=tuple(a.hidden), activation=a.activation),
            AeSchedule(epochs=a.epochs, batch_size=a.batch_size, lr=a.lr, mse_threshold=a.mse_threshold),
            rng,
        )
        codes = encode_dataset(res.autoencoder, x)
        self._save_json(out / "autoencoder.json", res.autoencoder.to_checkpoint())
        self.saver.submit(out / "ae_history.csv", lambda p: write_rows(p, ["epoch", "mse"], [[i + 1, v] for i, v in enumerate(res.history)]))
        self._save_csv(out / "codes.csv", codes)
        metrics = {
            "final_mse": res.final_mse,
            "reached_threshold": res.reached_threshold,
            "epochs": a.epochs,
            "latent_dim": a.latent_dim,
        }
        ckpts = {"autoencoder": out / "autoencoder.json", "history": out / "ae_history.csv", "codes": out / "codes.csv"}
        return {k: self._rel(v) for k, v in ckpts.items()}, metrics

    def stage_fit_ot(self, rng: RngStream, out: Path):
        o = self.cfg.ot
        codes = self._load_codes()
        scaling = CubeScaling.fit(codes, o.normalize_margin) if o.normalize else None
        problem = SdotProblem(scaling.apply(codes) if scaling is not None else codes)
        solver = SolverConfig(
            mc_samples=max(o.mc_samples, 10 * problem.n),
            step_size=o.step_size,
            max_iterations=o.max_iterations,
            tolerance=o.tolerance,
            optimizer=o.optimizer,
            verify_samples=o.verify_samples,
            patience=o.patience,
            decay=o.decay,
            chunk_size=o.chunk_size,
            workers=o.workers,
        )
        res = solve(problem, solver, rng.spawn(0))
        eps = float(o.epsilon) if o.epsilon is not None else choose_epsilon(codes, o.expected_modes)
        rips = build_rips(codes, eps)
        self._save_json(out / "potential.json", to_checkpoint(problem, res, epsilon=eps, seed=self.cfg.seed, scaling=scaling))
        self._save_json(out / "rips.json", rips.summary())
        metrics = {
            "converged": res.converged,
            "iterations": res.iterations,
            "max_deviation": res.stats.max_deviation(problem.weights),
            "empty_cells": res.stats.empty_count,
            "tolerance": solver.resolved_tolerance(problem.n),
            "epsilon": eps,
            "edge_count": len(rips.edges),
            "component_count": rips.component_count,
            "scale": scaling.scale if scaling is not None else 1.0,
        }
        ckpts = {"potential": out / "potential.json", "rips": out / "rips.json"}
        return {k: self._rel(v) for k, v in ckpts.items()}, metrics

    def stage_train_gan(self, rng: RngStream, out: Path):
        g = self.cfg.gan
        x, _ = self._load_dataset()
        ae = self._load_autoencoder()
        codes = self._load_codes()
        schedule = TrainSchedule(
            lr_g=g.lr_g,
            R=g.R,
            T_inner=g.T_inner,
            beta=g.beta,
            alpha_hidden=g.alpha_hidden,
            alpha_last_numerator=g.alpha_last_numerator,
            batch_size=g.batch_size,
            epochs=g.epochs,
            fake_ratio=g.fake_ratio,
            use_feature_loss=g.use_feature_loss,
        )
        res = train_gan(ae, self._sampler(codes), x, schedule, rng, codes=codes, disc_hidden=tuple(g.disc_hidden))
        self._save_json(out / "gan.json", res.model.to_checkpoint())
        self.saver.submit(out / "history.csv", lambda p: write_history_csv(res.history, p))
        trained = [r for r in res.history if r.epoch > 0]
        metrics = {
            "epochs": g.epochs,
            "latent_source": g.latent_source,
            "alpha": [float(v) for v in res.alpha],
            "lr_d": schedule.lr_d,
            "l_img_epoch0": res.history[0].l_img,
            "l_img_final": res.history[-1].l_img,
            "d_real_ge_fake_fraction": (
                float(np.mean([r.d_real_mean >= r.d_fake_mean for r in trained])) if trained else None
            ),
        }
        ckpts = {"gan": out / "gan.json", "history": out / "history.csv"}
        return {k: self._rel(v) for k, v in ckpts.items()}, metrics

    def stage_eval(self, rng: RngStream, out: Path):
        ev = self.cfg.eval
        _, modes = self._load_dataset()
        codes = self._load_codes()
        emap, eps = self._load_extended_map(codes)
        model = GanModel.from_checkpoint(read_json(self.dir_of("train-gan") / "gan.json"))

        latents = sample_latent_batch(emap, ev.samples, rng.spawn(0), self.cfg.ot.chunk_size, self.cfg.ot.workers)
        latent_cloud = PointCloud(latents.points, dim=emap.dim)
        gap = nearest_code_gap(latent_cloud, codes)
        head = latent_cloud.subset(np.arange(min(ev.w2_samples, len(latent_cloud))))
        w2 = exact_w2(head, nearest_code_projection(head, codes))
        labels = emap.rips.labels[latents.vertices]
        crossing = int(np.sum(latents.interpolated & np.any(labels != labels[:, :1], axis=1)))

        sampler = GaussianLatentSampler.from_codes(codes) if self.cfg.gan.latent_source == "gaussian" else OtLatentSampler(emap)
        generated = generate(model, sampler, ev.samples, rng.spawn(1))
        uniform = PointCloud(uniform_cube_sample(rng.spawn(2), emap.dim, ev.uniformity_samples))
        uni = cell_uniformity(uniform, emap.problem, emap.potential)

        report: Dict[str, Any] = {
            "run_id": self.run_id,
            "latent_source": self.cfg.gan.latent_source,
            "samples": ev.samples,
            "certificate": {
                "epsilon": eps,
                "max_gap": gap.max,
                "mean_gap": gap.mean,
                "projection_w2_bound": gap.rms,
                "exact_w2_subset": w2,
                "subset_size": len(head),
                "holds": bool(gap.max <= eps and w2 <= eps),
            },
            "interpolated_fraction": float(latents.interpolated.mean()),
            "cross_component_samples": crossing,
            "uniformity": {"statistic": uni.statistic, "p_value": uni.p_value, "rejects": uni.rejects},
            "coverage": None,
        }
        if modes is not None and modes.centers.dim == generated.dim:
            if ev.mode_radius is not None:
                modes = dc.replace(modes, radius=ev.mode_radius)
            report["coverage"] = coverage(generated, modes).to_json()
        self._save_csv(out / "latent_samples.csv", latent_cloud)
        self._save_csv(out / "generated.csv", generated)
        self._save_json(out / "report.json", report)
        ckpts = {"report": out / "report.json", "latent_samples": out / "latent_samples.csv", "generated": out / "generated.csv"}
        return {k: self._rel(v) for k, v in ckpts.items()}, report

    # ------------------------------------------------------------ driver

    def _run_stage(self, name: str, fn: Callable[[RngStream, Path], Tuple[Dict[str, str], Dict[str, Any]]]) -> None:
        rec = self.manifest.stage(name)
        out = self.dir_of(name)
        rec.digest = self.digests[name]
        rec.directory = self._rel(out)
        marker = out / "done.json"
        if self.resume and marker.exists():
            done = read_json(marker)
            if done.get("digest") == rec.digest:
                rec.status, rec.checkpoints, rec.metrics = "cached", done["checkpoints"], done["metrics"]
                logging.info("Stage %s: cached (%s)", name, rec.directory)
                return
        logging.info("Stage %s: start (%s)", name, rec.directory)
        try:
            ckpts, metrics = fn(self.rng.spawn(_STREAMS[name]), out)
            failures = self.saver.flush()
            if failures:
                raise OSError("; ".join(f"{p}: {e}" for p, e in failures))
        except Exception as e:
            self.saver.flush()
            rec.status, rec.error = "failed", f"{type(e).__name__}: {e}"
            logging.exception("Stage %s failed", name)
            self._write_manifest()
            raise StageFailed(name, rec.error) from e
        rec.status, rec.checkpoints, rec.metrics = "completed", ckpts, metrics
        write_json(marker, {"stage": name, "digest": rec.digest, "checkpoints": ckpts, "metrics": metrics})
        logging.info("Stage %s: completed", name)

    def run(self, until: Optional[str] = None) -> RunManifest:
        stages = {
            DATA_STAGE: self.stage_data,
            "train-ae": self.stage_train_ae,
            "fit-ot": self.stage_fit_ot,
            "train-gan": self.stage_train_gan,
            "eval": self.stage_eval,
        }
        if until is not None and until not in stages:
            raise ValueError(f"unknown stage '{until}'")
        try:
            for name in (DATA_STAGE, *STAGES):
                self._run_stage(name, stages[name])
                if name == until:
                    break
        finally:
            self.saver.stop()
        path = self._write_manifest()
        logging.info("Manifest written: %s", path)
        return self.manifest


def run_pipeline(cfg: RunConfig, out_dir: Optional[Path] = None, resume: bool = False, until: Optional[str] = None) -> RunManifest:
    return Pipeline(cfg, out_dir=out_dir, resume=resume).run(until=until)


def emit_run_plots(manifest: RunManifest, out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    gan = manifest.stage("train-gan")
    if gan.status not in ("completed", "cached"):
        raise FileNotFoundError("GAN training history is missing; run the train-gan stage first")
    codes = PointCloud.from_csv(out_dir / manifest.stage("train-ae").checkpoints["codes"])
    ev = manifest.stage("eval")
    samples = PointCloud.from_csv(out_dir / ev.checkpoints["latent_samples"]) if ev.status in ("completed", "cached") else None
    eps = manifest.stage("fit-ot").metrics.get("epsilon")
    return emit_plots(out_dir / gan.checkpoints["history"], out_dir / manifest.run_id / "figures", codes=codes, samples=samples, epsilon=eps)
