import json
import math
import os
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from kf_minset import config as cfgmod
from kf_minset import io as kio
from kf_minset import pipeline
from kf_minset.cli import main
from kf_minset.errors import BadMagic, ConfigError, CountMismatch, StageError
from kf_minset.geometry import translation_distance

SMALL = {
    "version": 1,
    "seed": 3,
    "dataset": {"type": "synthetic", "synthetic": {"trajectory": {"kind": "circle", "radius": 20.0, "laps": 2}}},
    "methods": [{"name": "all"}, {"name": "msa"}],
    "record_timing": False,
}


def small_cfg(tmp_path, **over):
    doc = json.loads(json.dumps(SMALL))
    for k, v in over.items():
        doc[k] = v
    doc["output_dir"] = str(tmp_path / "out")
    return cfgmod.parse(json.dumps(doc))


def write_cfg(tmp_path, doc=None, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc or SMALL))
    return p


def snapshot(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestBatch:
    def test_artifacts_and_rows(self, tmp_path):
        cfg = small_cfg(tmp_path)
        report, runs = pipeline.run_batch(cfg)
        assert [r.method for r in report.rows] == ["all", "msa"]
        out = Path(cfg.output_dir)
        for label in ("all", "msa"):
            for f in ("kept_ids.txt", "candidates.csv", "graph.txt", "optimized.txt", "lm_log.csv"):
                assert (out / label / f).exists()
        assert (out / "msa" / "windows.csv").exists()
        assert (out / "report.txt").exists() and (out / "summary.csv").exists()
        assert runs[1].result.kept < runs[0].result.kept
        assert report.rows[0].kept == len(runs[0].kept_ids)

    def test_noise_free(self, tmp_path):
        synth = {"trajectory": {"kind": "circle", "radius": 20.0, "laps": 2}, "odom_sigma_t": 0.0, "odom_sigma_r": 0.0}
        cfg = small_cfg(tmp_path, dataset={"type": "synthetic", "synthetic": synth},
                        loop={"sigma_t": 0.0, "sigma_r": 0.0})
        report, runs = pipeline.run_batch(cfg)
        for r in report.rows:
            assert r.after.ate_trans < 1e-6
        assert runs[1].result.kept < runs[0].result.kept
        # the baseline is alignment roundoff, so nothing is gained or lost
        assert all(row[2] == 0.0 or math.isnan(row[2]) for row in report.summary_rows())

    def test_deterministic(self, tmp_path):
        cfg = small_cfg(tmp_path)
        pipeline.run_batch(cfg)
        first = snapshot(cfg.output_dir)
        shutil.rmtree(cfg.output_dir)
        pipeline.run_batch(cfg)
        assert snapshot(cfg.output_dir) == first

    def test_evaluate_from_artifacts(self, tmp_path):
        cfg = small_cfg(tmp_path)
        report, _ = pipeline.run_batch(cfg)
        summary = (Path(cfg.output_dir) / "summary.csv").read_text()
        again = pipeline.stage_eval(cfg)
        assert again.summary_csv() == summary == report.summary_csv()

    def test_composed_odometry_information(self, tmp_path):
        cfg = small_cfg(tmp_path)
        info = pipeline.odometry_information(cfg, 4)
        # four steps of variance sigma^2 each
        assert np.allclose(np.diag(info), [1 / (4 * 0.05**2)] * 3 + [1 / (4 * 0.002**2)] * 3)

    def test_graph_edges_follow_kept_sequence(self, tmp_path):
        cfg = small_cfg(tmp_path)
        _, runs = pipeline.run_batch(cfg)
        for r in runs:
            g = r.graph
            g.check_partition()
            assert [(e.i, e.j) for e in g.odometry_edges] == list(zip(r.kept_ids, r.kept_ids[1:]))


class TestOnline:
    def test_series(self, tmp_path):
        cfg = small_cfg(tmp_path, record_timing=True)
        report, runs = pipeline.run_online(cfg)
        all_run, msa_run = runs
        mem = [b for _, b in all_run.series["memory"]]
        assert all(b > a for a, b in zip(mem, mem[1:]))
        assert len(all_run.series["query_time"]) == len(all_run.kept_ids)
        assert len(msa_run.series["query_time"]) == len(msa_run.kept_ids)
        assert msa_run.series["memory"][-1][1] < all_run.series["memory"][-1][1]
        assert len(all_run.series["pgo_time"]) == math.ceil(len(all_run.kept_ids) / cfg.reopt_every)
        out = Path(cfg.output_dir) / "msa"
        assert (out / "memory.csv").read_text().startswith("step,bytes\n")
        assert (out / "query_time.csv").read_text().startswith("step,seconds\n")
        assert (out / "pgo_time.csv").read_text().startswith("step,seconds\n")

    def test_matches_batch_with_single_solve(self, tmp_path):
        base = small_cfg(tmp_path)
        ds = pipeline.load_dataset(base)
        cfg = cfgmod.RunConfig(**{**base.__dict__, "reopt_every": len(ds)})
        _, batch = pipeline.run_batch(cfg, dataset=ds)
        _, online = pipeline.run_online(cfg, dataset=ds)
        for b, o in zip(batch, online):
            assert b.kept_ids == o.kept_ids
            for i in b.kept_ids:
                assert translation_distance(b.optimized[i], o.optimized[i]) < 1e-9
                assert np.abs(b.optimized[i].q - o.optimized[i].q).max() < 1e-9


class TestFiles:
    def test_files_dataset_matches_synthetic(self, tmp_path):
        cfg = small_cfg(tmp_path)
        ds = pipeline.load_dataset(cfg)
        pipeline.export_dataset(ds, tmp_path / "data", "tum")
        d = tmp_path / "data"
        files = {"poses": str(d / "gt.tum"), "format": "tum", "descriptors": str(d / "descriptors.kfd1"),
                 "odometry": str(d / "odom.tum"), "channels": str(d / "channels.csv")}
        fcfg = small_cfg(tmp_path, dataset={"type": "files", "files": files, "synthetic": None})
        fds = pipeline.load_dataset(fcfg)
        assert len(fds) == len(ds) and fds.gt_loop_pairs == ds.gt_loop_pairs and not fds.no_drift
        for a, b in zip(ds.keyframes, fds.keyframes):
            assert np.allclose(a.descriptor, b.descriptor, atol=1e-6)
            assert a.spaciousness == b.spaciousness

    def test_single_trajectory_is_no_drift(self, tmp_path, circle_world):
        d = tmp_path / "data"
        pipeline.export_dataset(circle_world, d, "kitti")
        files = {"poses": str(d / "gt.kitti"), "descriptors": str(d / "descriptors.kfd1")}
        fds = pipeline.load_dataset(small_cfg(tmp_path, dataset={"type": "files", "files": files}))
        assert fds.no_drift and fds.odom_poses == fds.gt_poses

    def test_count_mismatch(self, tmp_path, circle_world):
        d = tmp_path / "data"
        pipeline.export_dataset(circle_world, d, "kitti")
        D = kio.read_kfd1(d / "descriptors.kfd1")
        kio.write_kfd1(d / "descriptors.kfd1", D[:-1])
        files = {"poses": str(d / "gt.kitti"), "descriptors": str(d / "descriptors.kfd1")}
        with pytest.raises(CountMismatch):
            pipeline.load_dataset(small_cfg(tmp_path, dataset={"type": "files", "files": files}))

    def test_bad_magic(self, tmp_path, circle_world):
        d = tmp_path / "data"
        pipeline.export_dataset(circle_world, d, "kitti")
        (d / "descriptors.kfd1").write_bytes(b"XXXX" + bytes(8))
        files = {"poses": str(d / "gt.kitti"), "descriptors": str(d / "descriptors.kfd1")}
        with pytest.raises(BadMagic):
            pipeline.load_dataset(small_cfg(tmp_path, dataset={"type": "files", "files": files}))


class TestThreads:
    def test_cap(self, monkeypatch):
        monkeypatch.setenv("KF_MINSET_THREADS", "1")
        assert pipeline.threads_cap(5) == 1
        monkeypatch.setenv("KF_MINSET_THREADS", "0")
        assert 1 <= pipeline.threads_cap(5) <= 5
        monkeypatch.setenv("KF_MINSET_THREADS", "abc")
        with pytest.raises(ConfigError):
            pipeline.threads_cap(2)

    def test_thread_count_does_not_change_output(self, tmp_path, monkeypatch):
        cfg = small_cfg(tmp_path)
        monkeypatch.setenv("KF_MINSET_THREADS", "1")
        pipeline.run_batch(cfg)
        one = snapshot(cfg.output_dir)
        shutil.rmtree(cfg.output_dir)
        monkeypatch.setenv("KF_MINSET_THREADS", "2")
        pipeline.run_batch(cfg)
        assert snapshot(cfg.output_dir) == one


class TestCli:
    def test_run_batch(self, tmp_path, capsys):
        out = tmp_path / "o"
        assert main(["run-batch", "--config", str(write_cfg(tmp_path)), "--out", str(out)]) == 0
        assert "[summary]" in capsys.readouterr().out
        assert (out / "summary.csv").exists()

    def test_staged_matches_batch(self, tmp_path):
        cfg = write_cfg(tmp_path)
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["run-batch", "--config", str(cfg), "--out", str(a)]) == 0
        for cmd in ("sample", "loops", "pgo", "eval"):
            assert main([cmd, "--config", str(cfg), "--out", str(b)]) == 0
        assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
        for label in ("all", "msa"):
            for f in ("kept_ids.txt", "candidates.csv", "graph.txt", "optimized.txt"):
                assert (a / label / f).read_bytes() == (b / label / f).read_bytes(), (label, f)

    def test_synth_and_seed(self, tmp_path):
        out = tmp_path / "s"
        assert main(["synth", "--config", str(write_cfg(tmp_path)), "--out", str(out), "--seed", "18446744073709551615",
                     "--format", "tum"]) == 0
        assert {p.name for p in out.iterdir()} == {"gt.tum", "odom.tum", "descriptors.kfd1", "channels.csv"}

    def test_method_filter(self, tmp_path):
        out = tmp_path / "m"
        assert main(["run-batch", "--config", str(write_cfg(tmp_path)), "--out", str(out), "--method", "msa"]) == 0
        assert (out / "summary.csv").read_text().splitlines()[1].startswith("msa,")
        assert not (out / "all").exists()

    def test_run_online(self, tmp_path):
        out = tmp_path / "on"
        assert main(["run-online", "--config", str(write_cfg(tmp_path)), "--out", str(out)]) == 0
        assert (out / "all" / "memory.csv").exists()

    @pytest.mark.parametrize("argv_tail", [
        ["--method", "nope"],
        ["--seed", "-1"],
        ["--seed", "18446744073709551616"],
    ])
    def test_config_errors(self, tmp_path, argv_tail):
        assert main(["run-batch", "--config", str(write_cfg(tmp_path)), "--out", str(tmp_path / "x")] + argv_tail) == 1

    def test_bad_config_file(self, tmp_path):
        bad = write_cfg(tmp_path, {"version": 1, "methods": []})
        assert main(["run-batch", "--config", str(bad)]) == 1
        assert main(["run-batch", "--config", str(tmp_path / "missing.json")]) == 1
        assert main(["frobnicate", "--config", str(bad)]) == 1

    def test_pipeline_error(self, tmp_path, capsys):
        # pgo before loops: the graph dump is missing
        assert main(["pgo", "--config", str(write_cfg(tmp_path)), "--out", str(tmp_path / "empty")]) == 2
        assert main(["eval", "--config", str(write_cfg(tmp_path)), "--out", str(tmp_path / "empty")]) == 2

    def test_stage_error_names_stage(self, tmp_path):
        cfg = small_cfg(tmp_path)
        with pytest.raises(StageError) as exc:
            pipeline.stage_pgo(cfg)
        assert "pgo" in str(exc.value)

    def test_console_script(self, tmp_path):
        exe = shutil.which("kf-minset")
        cmd = [exe] if exe else [sys.executable, "-m", "kf_minset.cli"]
        env = dict(os.environ, KF_MINSET_THREADS="1")
        r = subprocess.run(cmd + ["synth", "--config", str(write_cfg(tmp_path)), "--out", str(tmp_path / "c")],
                           capture_output=True, text=True, env=env, timeout=300)
        assert r.returncode == 0, r.stderr
        r = subprocess.run(cmd + ["sample", "--config", str(tmp_path / "nope.json")], capture_output=True, text=True,
                           env=env, timeout=300)
        assert r.returncode == 1
