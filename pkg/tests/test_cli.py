import numpy as np
import pytest

from voxfuse import io as vio
from voxfuse.cli import main
from voxfuse.meshing import marching_cubes
from voxfuse.metrics import fscore

SPHERE_SCENE = """
primitives:
  - {shape: sphere, center: [0, 0, 0], radius: 0.3, class_id: 1}
camera: {width: 96, height: 96, fov_deg: 55}
trajectory: {kind: orbit, radius: 1.0, frames: 16, elevation_deg: 30}
volume: {voxel_size: 0.01, truncation: 0.05}
"""


@pytest.fixture(scope="session")
def sphere_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    scene = root / "scene.yaml"
    scene.write_text(SPHERE_SCENE)
    out = root / "data"
    assert main(["synth", str(scene), str(out), "--noise", "none"]) == 0
    return out


class TestSynthCommand:
    def test_writes_complete_dataset(self, sphere_dataset):
        assert len(list((sphere_dataset / "depth").glob("*.png"))) == 16
        assert len(list((sphere_dataset / "labels").glob("*.png"))) == 16
        assert len(list((sphere_dataset / "scores").glob("*.png"))) == 16
        assert (sphere_dataset / "trajectory.txt").is_file()
        assert (sphere_dataset / "config.yaml").is_file()
        assert (sphere_dataset / "gt" / "mesh.ply").is_file()
        assert (sphere_dataset / "gt" / "volume.vxf").is_file()
        poses = vio.load_trajectory(sphere_dataset / "trajectory.txt")
        assert len(poses) == 16

    def test_same_seed_bit_identical(self, tmp_path):
        scene = tmp_path / "scene.yaml"
        scene.write_text(SPHERE_SCENE.replace("frames: 16", "frames: 3"))
        for out in ("a", "b"):
            assert main(["synth", str(scene), str(tmp_path / out),
                         "--noise", "heavy", "--seed", "9"]) == 0
        for sub in ("depth", "labels", "scores"):
            for fa in sorted((tmp_path / "a" / sub).glob("*.png")):
                fb = tmp_path / "b" / sub / fa.name
                assert fa.read_bytes() == fb.read_bytes()

    def test_missing_scene_file_is_usage_error(self, tmp_path):
        assert main(["synth", str(tmp_path / "missing.yaml"), str(tmp_path / "o")]) == 1

    def test_default_noise_dataset_fuses_well(self, tmp_path):
        # the default noise preset stays mild enough for a >= 95 F-score
        # with the default outlier filter
        scene = tmp_path / "scene.yaml"
        scene.write_text(SPHERE_SCENE)
        out = tmp_path / "noisy"
        assert main(["synth", str(scene), str(out), "--noise", "default"]) == 0
        mesh_path = tmp_path / "m.ply"
        assert main(["fuse", str(out), "-o", str(mesh_path)]) == 0
        report = fscore(vio.load_mesh_ply(mesh_path),
                        vio.load_mesh_ply(out / "gt" / "mesh.ply"), threshold=0.01)
        assert report.f1 >= 95.0


class TestFuseCommand:
    def test_fuse_reconstructs_sphere(self, sphere_dataset, tmp_path):
        mesh_path = tmp_path / "out.ply"
        ckpt = tmp_path / "vol.vxf"
        code = main(["fuse", str(sphere_dataset), "-o", str(mesh_path),
                     "--checkpoint", str(ckpt), "--fps-report"])
        assert code == 0
        assert mesh_path.is_file() and ckpt.is_file()
        mesh = vio.load_mesh_ply(mesh_path)
        gt = vio.load_mesh_ply(sphere_dataset / "gt" / "mesh.ply")
        report = fscore(mesh, gt, threshold=0.01)
        assert report.f1 >= 99.0
        # semantics enabled by default: the sphere class is on the mesh
        assert np.all(mesh.vertex_labels == 1)

    def test_no_semantics_leaves_labels_zero(self, sphere_dataset, tmp_path):
        mesh_path = tmp_path / "plain.ply"
        assert main(["fuse", str(sphere_dataset), "-o", str(mesh_path),
                     "--no-semantics"]) == 0
        mesh = vio.load_mesh_ply(mesh_path)
        assert np.all(mesh.vertex_labels == 0)

    def test_missing_pose_file_is_data_error(self, sphere_dataset, tmp_path, capsys):
        import shutil
        broken = tmp_path / "broken"
        shutil.copytree(sphere_dataset, broken)
        (broken / "trajectory.txt").unlink()
        code = main(["fuse", str(broken), "-o", str(tmp_path / "m.ply")])
        assert code == 2
        assert "trajectory.txt" in capsys.readouterr().err

    def test_determinism_byte_identical_outputs(self, sphere_dataset, tmp_path):
        out = []
        for name in ("m1.ply", "m2.ply"):
            path = tmp_path / name
            assert main(["fuse", str(sphere_dataset), "-o", str(path)]) == 0
            out.append(path.read_bytes())
        assert out[0] == out[1]


class TestEvalCommand:
    def test_identical_meshes_report_full_score(self, sphere_dataset, tmp_path, capsys):
        gt = sphere_dataset / "gt" / "mesh.ply"
        code = main(["eval", str(gt), str(gt), "--iou",
                     "--report-csv", str(tmp_path / "r.csv"),
                     "--iou-csv", str(tmp_path / "i.csv")])
        assert code == 0
        text = capsys.readouterr().out
        assert "f1 100.00" in text
        recon = (tmp_path / "r.csv").read_text().splitlines()
        assert recon[0] == "threshold,precision,recall,f1"
        assert recon[1] == "0.010000,100.000000,100.000000,100.000000"
        iou = (tmp_path / "i.csv").read_text().splitlines()
        assert iou[0] == "class_id,class_name,iou,support"
        assert iou[1].startswith("1,class_1,1.000000,")

    def test_eval_matches_library_call(self, sphere_dataset, tmp_path, capsys):
        mesh_path = tmp_path / "m.ply"
        assert main(["fuse", str(sphere_dataset), "-o", str(mesh_path)]) == 0
        capsys.readouterr()
        gt_path = sphere_dataset / "gt" / "mesh.ply"
        assert main(["eval", str(mesh_path), str(gt_path),
                     "--report-csv", str(tmp_path / "r.csv")]) == 0
        row = (tmp_path / "r.csv").read_text().splitlines()[1].split(",")
        report = fscore(vio.load_mesh_ply(mesh_path), vio.load_mesh_ply(gt_path),
                        threshold=0.01, seed=0)
        assert float(row[1]) == pytest.approx(report.precision, abs=5e-7)
        assert float(row[2]) == pytest.approx(report.recall, abs=5e-7)
        assert float(row[3]) == pytest.approx(report.f1, abs=5e-7)

    def test_checkpoint_input(self, sphere_dataset, tmp_path, capsys):
        ckpt = tmp_path / "v.vxf"
        assert main(["fuse", str(sphere_dataset), "-o", str(tmp_path / "m.ply"),
                     "--checkpoint", str(ckpt)]) == 0
        assert main(["eval", str(ckpt), str(sphere_dataset / "gt" / "mesh.ply"),
                     "--filter", "2", "--iou"]) == 0
        assert "mean iou" in capsys.readouterr().out


class TestSweepCommand:
    def test_single_threshold_matches_eval(self, sphere_dataset, tmp_path):
        csv_path = tmp_path / "sweep.csv"
        assert main(["sweep", str(sphere_dataset), "--thresholds", "0",
                     "--csv", str(csv_path)]) == 0
        rows = csv_path.read_text().splitlines()
        assert rows[0] == "threshold,precision,recall,f1"
        assert len(rows) == 2
        # noiseless fuse at threshold 0 is essentially perfect
        assert float(rows[1].split(",")[3]) >= 99.0

    def test_empty_threshold_list_is_usage_error(self, sphere_dataset):
        assert main(["sweep", str(sphere_dataset), "--thresholds", " "]) == 1

    def test_rows_sorted_by_threshold(self, sphere_dataset, tmp_path):
        csv_path = tmp_path / "sweep.csv"
        assert main(["sweep", str(sphere_dataset), "--thresholds", "4,0,2",
                     "--csv", str(csv_path)]) == 0
        rows = [r.split(",")[0] for r in csv_path.read_text().splitlines()[1:]]
        assert rows == ["0", "2", "4"]


class TestInfoCommand:
    def test_dataset_info(self, sphere_dataset, capsys):
        assert main(["info", str(sphere_dataset)]) == 0
        out = capsys.readouterr().out
        assert "16 frames" in out

    def test_checkpoint_info(self, sphere_dataset, tmp_path, capsys):
        ckpt = tmp_path / "v.vxf"
        main(["fuse", str(sphere_dataset), "-o", str(tmp_path / "m.ply"),
              "--checkpoint", str(ckpt)])
        capsys.readouterr()
        assert main(["info", str(ckpt)]) == 0
        out = capsys.readouterr().out
        assert "occupied" in out and "weight histogram" in out

    def test_mesh_info(self, sphere_dataset, capsys):
        assert main(["info", str(sphere_dataset / "gt" / "mesh.ply")]) == 0
        assert "vertices" in capsys.readouterr().out


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, sphere_dataset):
        assert main(["fuse", str(sphere_dataset), "--bogus"]) == 1

    def test_unknown_command_is_usage_error(self):
        assert main(["frobnicate"]) == 1

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0
