import csv
import json
import time

import numpy as np
import pytest

from emslam.cli import main


def write_config(path, world=None, noise=None, em=None):
    doc = {
        "world": {
            "num_landmarks": 6,
            "num_classes": 4,
            "num_keyframes": 12,
            "arena_half_extent": 10.0,
            "detections_range": [0, 4],
            "clutter_rate": 0.3,
            "seed": 11,
        },
        "noise": {"sigma_position": 0.2, "sigma_angle": 0.05, "epsilon_objectness": 0.01},
        "em": {"max_em_iterations": 6},
    }
    if world:
        doc["world"].update(world)
    if noise:
        doc["noise"].update(noise)
    if em:
        doc["em"].update(em)
    path.write_text(json.dumps(doc))
    return path


def run_pipeline(tmp_path, tag, world=None, noise=None, em=None):
    config = write_config(tmp_path / f"config_{tag}.json", world=world, noise=noise, em=em)
    out = tmp_path / f"out_{tag}"
    assert main(["simulate", "--config", str(config), "--out", str(out)]) == 0
    assert (
        main(
            [
                "slam",
                "--bundles",
                str(out / "bundles.jsonl"),
                "--config",
                str(config),
                "--out",
                str(out),
            ]
        )
        == 0
    )
    return config, out


class TestSimulate:
    def test_writes_three_files(self, tmp_path):
        config = write_config(tmp_path / "config.json")
        out = tmp_path / "out"
        assert main(["simulate", "--config", str(config), "--out", str(out)]) == 0
        for name in ("world.json", "bundles.jsonl", "groundtruth.jsonl"):
            assert (out / name).exists()

    def test_same_seed_identical_bytes(self, tmp_path):
        config = write_config(tmp_path / "config.json")
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        assert main(["simulate", "--config", str(config), "--out", str(out1)]) == 0
        assert main(["simulate", "--config", str(config), "--out", str(out2)]) == 0
        for name in ("world.json", "bundles.jsonl", "groundtruth.jsonl"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_seed_flag_changes_output(self, tmp_path):
        config = write_config(tmp_path / "config.json")
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        assert main(["simulate", "--config", str(config), "--out", str(out1)]) == 0
        assert (
            main(["simulate", "--config", str(config), "--out", str(out2), "--seed", "99"])
            == 0
        )
        assert (out1 / "bundles.jsonl").read_bytes() != (out2 / "bundles.jsonl").read_bytes()

    def test_malformed_json_reports_location(self, tmp_path, capsys):
        config = tmp_path / "broken.json"
        config.write_text('{"world": {"num_landmarks": }')
        out = tmp_path / "out"
        assert main(["simulate", "--config", str(config), "--out", str(out)]) == 1
        err = capsys.readouterr().err
        assert "line 1" in err

    def test_unknown_key_named(self, tmp_path, capsys):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"world": {"num_landmurks": 3}}))
        out = tmp_path / "out"
        assert main(["simulate", "--config", str(config), "--out", str(out)]) == 1
        assert "num_landmurks" in capsys.readouterr().err

    def test_dim_flag(self, tmp_path):
        config = write_config(tmp_path / "config.json")
        out = tmp_path / "out"
        assert main(
            ["simulate", "--config", str(config), "--out", str(out), "--dim", "128"]
        ) == 0
        world = json.loads((out / "world.json").read_text())
        assert world["world_spec"]["latent_dim"] == 128
        assert world["class_priors"]["dim"] == 128


class TestSlam:
    def test_outputs_written(self, tmp_path):
        _, out = run_pipeline(tmp_path, "main")
        for name in ("trajectory.txt", "landmarks.jsonl", "em_log.csv"):
            assert (out / name).exists()
        with open(out / "em_log.csv") as handle:
            rows = list(csv.DictReader(handle))
        assert rows[0]["iter"] == "0"
        assert all(float(r["objective"]) >= 0.0 for r in rows)

    def test_noise_free_final_objective_not_above_initial(self, tmp_path):
        # Noise-free bundles, sane model sigmas: every residual stays at zero
        # once the map exists, so the logged objective must not grow.
        sim_config = write_config(
            tmp_path / "sim.json",
            world={
                "clutter_rate": 0.0,
                "sigma_odo_pos": 1e-12,
                "sigma_odo_rot": 1e-12,
                "latent_sampling_std": 0.0,
            },
            noise={"sigma_position": 1e-12, "sigma_angle": 1e-12},
        )
        slam_config = write_config(tmp_path / "slam.json")
        out = tmp_path / "out_nf"
        assert main(["simulate", "--config", str(sim_config), "--out", str(out)]) == 0
        assert (
            main(
                [
                    "slam",
                    "--bundles",
                    str(out / "bundles.jsonl"),
                    "--config",
                    str(slam_config),
                    "--out",
                    str(out),
                ]
            )
            == 0
        )
        with open(out / "em_log.csv") as handle:
            rows = list(csv.DictReader(handle))
        objectives = [float(r["objective"]) for r in rows]
        assert objectives[-1] <= objectives[0] + 1e-9

    def test_missing_bundles_file(self, tmp_path, capsys):
        config = write_config(tmp_path / "config.json")
        code = main(
            [
                "slam",
                "--bundles",
                str(tmp_path / "missing.jsonl"),
                "--config",
                str(config),
                "--out",
                str(tmp_path / "out"),
            ]
        )
        assert code == 1

    def test_empty_bundles_rejected(self, tmp_path, capsys):
        config = write_config(tmp_path / "config.json")
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        code = main(
            [
                "slam",
                "--bundles",
                str(empty),
                "--config",
                str(config),
                "--out",
                str(tmp_path / "out"),
            ]
        )
        assert code == 1
        assert "no keyframes" in capsys.readouterr().err

    def test_single_thread_rerun_identical_bytes(self, tmp_path):
        config = write_config(tmp_path / "config.json")
        out = tmp_path / "out"
        assert main(["simulate", "--config", str(config), "--out", str(out)]) == 0
        outs = []
        for tag in ("r1", "r2"):
            run_dir = tmp_path / tag
            assert (
                main(
                    [
                        "slam",
                        "--bundles",
                        str(out / "bundles.jsonl"),
                        "--config",
                        str(config),
                        "--out",
                        str(run_dir),
                    ]
                )
                == 0
            )
            outs.append(run_dir)
        assert (outs[0] / "trajectory.txt").read_bytes() == (
            outs[1] / "trajectory.txt"
        ).read_bytes()
        assert (outs[0] / "landmarks.jsonl").read_bytes() == (
            outs[1] / "landmarks.jsonl"
        ).read_bytes()

    def test_exact_association_mode_small_scene(self, tmp_path):
        config = write_config(
            tmp_path / "config.json",
            world={"num_landmarks": 3, "num_keyframes": 6, "detections_range": [0, 2],
                   "clutter_rate": 0.0},
        )
        out = tmp_path / "out"
        assert main(["simulate", "--config", str(config), "--out", str(out)]) == 0
        assert (
            main(
                [
                    "slam",
                    "--bundles",
                    str(out / "bundles.jsonl"),
                    "--config",
                    str(config),
                    "--out",
                    str(out),
                    "--assoc",
                    "exact",
                ]
            )
            == 0
        )

    def test_higher_latent_dim_is_slower(self, tmp_path):
        # Mirrors the dimensionality/runtime trade-off directionally; the
        # exact ratio is not asserted.
        def timed_run(tag, dim):
            config = write_config(
                tmp_path / f"config_{tag}.json",
                world={"num_keyframes": 40, "num_landmarks": 12, "latent_dim": dim,
                       "detections_range": [0, 8]},
                em={"max_em_iterations": 4},
            )
            out = tmp_path / f"out_{tag}"
            assert main(["simulate", "--config", str(config), "--out", str(out)]) == 0
            start = time.perf_counter()
            assert (
                main(
                    [
                        "slam",
                        "--bundles",
                        str(out / "bundles.jsonl"),
                        "--config",
                        str(config),
                        "--out",
                        str(out),
                    ]
                )
                == 0
            )
            return time.perf_counter() - start

        wall_16 = timed_run("d16", 16)
        wall_128 = timed_run("d128", 128)
        assert wall_128 > wall_16


class TestEval:
    def test_eval_on_pipeline_outputs(self, tmp_path):
        _, out = run_pipeline(tmp_path, "eval")
        code = main(
            [
                "eval",
                "--trajectory",
                str(out / "trajectory.txt"),
                "--groundtruth",
                str(out / "groundtruth.jsonl"),
                "--landmarks",
                str(out / "landmarks.jsonl"),
                "--out",
                str(out),
            ]
        )
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert set(metrics) == {"ate_m", "rpe_m", "class_acc", "acc_pi6", "mederr_deg"}
        assert metrics["ate_m"] >= 0.0
        assert (out / "trajectories.csv").exists()
        with open(out / "trajectories.csv") as handle:
            header = handle.readline().strip()
        assert header == "t,est_x,est_y,est_z,ref_x,ref_y,ref_z"

    def test_perfect_inputs_give_zero_ate_full_accuracy(self, tmp_path):
        # Write the ground truth itself as the estimate.
        from emslam.fileio import (
            read_groundtruth,
            write_groundtruth,
            write_landmarks,
            write_trajectory,
        )
        from emslam.observation_model import Landmark
        from emslam.simulator import WorldSpec, generate_observations, generate_world
        from emslam.observation_model import NoiseConfig

        spec = WorldSpec(num_landmarks=5, num_classes=4, num_keyframes=8, seed=21)
        gt, table = generate_world(spec)
        generate_observations(gt, table, NoiseConfig(), spec)
        out = tmp_path / "out"
        out.mkdir()
        write_groundtruth(out / "groundtruth.jsonl", gt, table)
        write_trajectory(out / "trajectory.txt", gt.trajectory)
        write_landmarks(
            out / "landmarks.jsonl",
            [
                Landmark(
                    id=lm.id,
                    latent_mean=table.center(lm.class_id),
                    position=lm.position,
                    orientation=lm.orientation,
                )
                for lm in gt.landmarks
            ],
        )
        code = main(
            [
                "eval",
                "--trajectory",
                str(out / "trajectory.txt"),
                "--groundtruth",
                str(out / "groundtruth.jsonl"),
                "--landmarks",
                str(out / "landmarks.jsonl"),
                "--out",
                str(out),
            ]
        )
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["ate_m"] < 1e-6
        assert metrics["rpe_m"] < 1e-6
        assert metrics["class_acc"] == 1.0
        assert metrics["acc_pi6"] == 1.0
        assert metrics["mederr_deg"] < 1e-4

    def test_missing_file_nonzero_exit(self, tmp_path, capsys):
        code = main(
            [
                "eval",
                "--trajectory",
                str(tmp_path / "nope.txt"),
                "--groundtruth",
                str(tmp_path / "nope.jsonl"),
                "--landmarks",
                str(tmp_path / "nope2.jsonl"),
            ]
        )
        assert code == 1
        assert "not found" in capsys.readouterr().err

    def test_length_mismatch_rejected(self, tmp_path, capsys):
        _, out = run_pipeline(tmp_path, "mismatch")
        trajectory = (out / "trajectory.txt").read_text().strip().splitlines()
        (out / "short.txt").write_text("\n".join(trajectory[:-2]) + "\n")
        code = main(
            [
                "eval",
                "--trajectory",
                str(out / "short.txt"),
                "--groundtruth",
                str(out / "groundtruth.jsonl"),
                "--landmarks",
                str(out / "landmarks.jsonl"),
            ]
        )
        assert code == 1
        assert "mismatch" in capsys.readouterr().err
