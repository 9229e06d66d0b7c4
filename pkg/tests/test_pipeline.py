from __future__ import annotations

import json
from pathlib import Path

import pytest
import yaml

from aeot_gan.config import ConfigError, RunConfig, load_config
from aeot_gan.main import main
from aeot_gan.pipeline import (
    STAGES,
    RunManifest,
    StageFailed,
    emit_run_plots,
    manifest_path,
    run_pipeline,
    stage_digests,
)

REPO_ROOT = Path(__file__).resolve().parents[1]


class TestConfig:
    def test_example_config_loads(self):
        cfg = load_config(REPO_ROOT / "config.example.yaml")
        assert cfg.gan.beta == 2000 and cfg.gan.R == 15 and cfg.gan.T_inner == 3
        assert cfg.gan.lr_g == pytest.approx(2e-5)
        assert cfg.gan.fake_ratio == 3 and cfg.gan.epochs == 500

    def test_preset_fills_schedule(self):
        cfg = RunConfig.from_mapping({"gan": {"preset": "cifar10"}})
        assert (cfg.gan.R, cfg.gan.T_inner) == (25.0, 10)

    def test_explicit_keys_beat_preset(self):
        cfg = RunConfig.from_mapping({"gan": {"preset": "celeba", "T_inner": 2}})
        assert (cfg.gan.R, cfg.gan.T_inner) == (15.0, 2)

    @pytest.mark.parametrize(
        "mapping",
        [
            {"gan": {"preset": "imagenet"}},
            {"gan": {"batch_size": 30}},
            {"gan": {"R": 1.0}},
            {"ot": {"epsilon": -1.0}},
            {"ot": {"unknown_key": 1}},
        ],
    )
    def test_invalid(self, mapping):
        with pytest.raises(ConfigError):
            RunConfig.from_mapping(mapping)

    def test_json_config(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"seed": 9}))
        assert load_config(path).seed == 9

    def test_unreadable(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.yaml")


class TestStageDigests:
    def test_downstream_only(self, tiny_run_mapping):
        base = stage_digests(RunConfig.from_mapping(tiny_run_mapping))
        tiny_run_mapping["gan"]["epochs"] = 3
        changed = stage_digests(RunConfig.from_mapping(tiny_run_mapping))
        for name in ("data", "train-ae", "fit-ot"):
            assert base[name] == changed[name]
        for name in ("train-gan", "eval"):
            assert base[name] != changed[name]

    def test_logging_and_out_dir_do_not_matter(self, tiny_run_mapping):
        base = stage_digests(RunConfig.from_mapping(tiny_run_mapping))
        tiny_run_mapping["out_dir"] = "/elsewhere"
        tiny_run_mapping["logging"] = {"level": "DEBUG"}
        assert stage_digests(RunConfig.from_mapping(tiny_run_mapping)) == base


class TestRunPipeline:
    def test_full_run_resume_and_determinism(self, tiny_run_mapping, tmp_path):
        cfg = RunConfig.from_mapping(tiny_run_mapping)
        out_a, out_b = tmp_path / "a", tmp_path / "b"

        manifest = run_pipeline(cfg, out_dir=out_a)
        assert manifest.dataset.status == "completed"
        assert [s.name for s in manifest.stages] == list(STAGES)
        assert all(s.status == "completed" for s in manifest.stages)

        report = manifest.stage("eval").metrics
        cert = report["certificate"]
        assert cert["max_gap"] <= cert["epsilon"]
        assert cert["exact_w2_subset"] <= cert["epsilon"]
        assert cert["holds"]
        assert report["cross_component_samples"] == 0
        assert manifest.stage("fit-ot").metrics["empty_cells"] == 0
        assert report["run_id"] == manifest.run_id
        assert len(report["coverage"]["counts"]) == 3

        gan = manifest.stage("train-gan").metrics
        assert gan["lr_d"] == pytest.approx(1e-4 / 15)

        path_a = manifest_path(out_a, manifest.run_id)
        first = path_a.read_bytes()
        written = RunManifest.from_json(json.loads(first))

        resumed = run_pipeline(cfg, out_dir=out_a, resume=True)
        assert resumed.dataset.status == "cached"
        assert all(s.status == "cached" for s in resumed.stages)
        assert [s.metrics for s in resumed.stages] == [s.metrics for s in written.stages]

        run_pipeline(cfg, out_dir=out_b)
        assert manifest_path(out_b, manifest.run_id).read_bytes() == first
        for rel in ("eval", "train-gan", "fit-ot"):
            rec = manifest.stage(rel)
            for ckpt in rec.checkpoints.values():
                assert (out_a / ckpt).read_bytes() == (out_b / ckpt).read_bytes()

        figures = emit_run_plots(manifest, out_a)
        assert {p.name for p in figures} == {"losses.svg", "discriminator.svg", "latent.svg"}

    def test_until_stops_early(self, tiny_run_mapping, tmp_path):
        manifest = run_pipeline(RunConfig.from_mapping(tiny_run_mapping), out_dir=tmp_path, until="train-ae")
        assert manifest.stage("train-ae").status == "completed"
        assert manifest.stage("fit-ot").status == "pending"
        assert (tmp_path / manifest.stage("train-ae").checkpoints["codes"]).exists()

    def test_resume_reuses_autoencoder(self, tiny_run_mapping, tmp_path):
        cfg = RunConfig.from_mapping(tiny_run_mapping)
        run_pipeline(cfg, out_dir=tmp_path, until="train-ae")
        manifest = run_pipeline(cfg, out_dir=tmp_path, resume=True, until="fit-ot")
        assert manifest.stage("train-ae").status == "cached"
        assert manifest.stage("fit-ot").status == "completed"

    def test_failed_stage_is_recorded(self, tmp_path):
        cfg = RunConfig.from_mapping({"data": {"kind": "idx", "path": str(tmp_path / "missing.idx")}})
        with pytest.raises(StageFailed) as err:
            run_pipeline(cfg, out_dir=tmp_path)
        assert err.value.stage == "data"
        run_ids = [p for p in tmp_path.iterdir() if p.name.startswith("run-")]
        written = RunManifest.from_json(json.loads((run_ids[0] / "manifest.json").read_text()))
        assert written.dataset.status == "failed"
        assert "missing.idx" in written.dataset.error


class TestMain:
    def write_config(self, tmp_path, mapping) -> Path:
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump(mapping))
        return path

    def test_make_data(self, tiny_run_mapping, tmp_path):
        cfg = self.write_config(tmp_path, tiny_run_mapping)
        out = tmp_path / "out"
        assert main(["make-data", "--config", str(cfg), "--out", str(out), "--seed", "5"]) == 0
        data_dirs = list((out / "stages").glob("data-*"))
        assert len(data_dirs) == 1
        assert {p.name for p in data_dirs[0].iterdir()} >= {"dataset.csv", "labels.csv", "modes.json", "done.json"}

    def test_missing_config_without_fallback(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == 2

    def test_data_error_exit_code(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = self.write_config(tmp_path, {"data": {"kind": "idx", "path": str(tmp_path / "missing.idx")}})
        assert main(["make-data", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 3

    def test_plot_without_run(self, tiny_run_mapping, tmp_path):
        cfg = self.write_config(tmp_path, tiny_run_mapping)
        assert main(["plot", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 3

    def test_invalid_config_does_not_fall_back(self, tiny_run_mapping, tmp_path, monkeypatch):
        monkeypatch.chdir(REPO_ROOT)
        tiny_run_mapping["ot"]["bogus"] = 1
        cfg = self.write_config(tmp_path, tiny_run_mapping)
        out = tmp_path / "out"
        assert main(["make-data", "--config", str(cfg), "--out", str(out)]) == 2
        assert not out.exists()


def example_mapping() -> dict:
    return yaml.safe_load((REPO_ROOT / "config.example.yaml").read_text())


@pytest.fixture(scope="module")
def reference_out(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("reference")


@pytest.mark.slow
class TestReferenceRun:
    def test_fit_ot_converges_without_empty_cells(self, reference_out):
        cfg = load_config(REPO_ROOT / "config.example.yaml")
        manifest = run_pipeline(cfg, out_dir=reference_out, resume=True, until="fit-ot")
        ot = manifest.stage("fit-ot").metrics
        assert ot["converged"]
        assert ot["empty_cells"] == 0
        assert ot["max_deviation"] <= ot["tolerance"]
        assert ot["component_count"] == 3

    def test_acceptance_after_200_gan_epochs(self, reference_out):
        mapping = example_mapping()
        mapping["gan"]["epochs"] = 200
        manifest = run_pipeline(RunConfig.from_mapping(mapping), out_dir=reference_out, resume=True)
        assert manifest.stage("train-ae").metrics["final_mse"] < 1e-3

        report = manifest.stage("eval").metrics
        assert report["certificate"]["holds"]
        cov = report["coverage"]
        assert all(abs(share - 1.0 / 3.0) <= 0.05 for share in cov["shares"])
        assert cov["gap_fraction"] < 0.02

        gan = manifest.stage("train-gan").metrics
        assert gan["d_real_ge_fake_fraction"] >= 0.9
        assert gan["l_img_final"] < gan["l_img_epoch0"]


@pytest.mark.slow
class TestLatentSourceAblation:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gaussian_latents_fill_the_gaps(self, seed, tmp_path):
        mapping = example_mapping()
        mapping["seed"] = seed
        mapping["data"] = {"kind": "segments", "params": {"k": 3, "per_mode": 300}}
        mapping["autoencoder"].update({"hidden": [32, 32], "epochs": 200})
        mapping["gan"]["epochs"] = 2
        mapping["eval"].update({"samples": 5000, "w2_samples": 256, "uniformity_samples": 20000})

        gaps = {}
        for source in ("ot", "gaussian"):
            mapping["gan"]["latent_source"] = source
            manifest = run_pipeline(RunConfig.from_mapping(mapping), out_dir=tmp_path, resume=True)
            gaps[source] = manifest.stage("eval").metrics["coverage"]["gap_fraction"]
        assert gaps["gaussian"] > gaps["ot"]
