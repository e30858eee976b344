import numpy as np
import pytest

from chiraldet.cli import main
from chiraldet.data import (
    DEFAULT_SCHEME,
    toy_axial_molecule,
    write,
)
from chiraldet.geometry import ChiralUnit, Molecule, UnitKind, mirror
from chiraldet.gradcheck import TINY_CONFIG
from chiraldet.model import AdamState, init_model, save_checkpoint


def canonical_molecule():
    coords = np.array(
        [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, -0.5], [0, 0, 0.5]], dtype=float
    )
    zs = np.array([6, 7, 8, 9, 15])
    return Molecule(
        coords=coords,
        atomic_numbers=zs,
        features=DEFAULT_SCHEME.featurize_all(zs),
        chiral_units=(ChiralUnit(kind=UnitKind.CENTER, center_atoms=(0,), related=(1, 2, 3, 4)),),
        id="canon",
    ).validate()


@pytest.fixture
def canon_file(tmp_path):
    path = tmp_path / "canon.chimol"
    write(canonical_molecule(), path)
    return path


@pytest.fixture
def tiny_ckpt(tmp_path):
    model = init_model(TINY_CONFIG)
    path = tmp_path / "tiny.ckpt"
    save_checkpoint(model, path, AdamState.for_model(model))
    return path


class TestChirality:
    def test_canonical_r(self, canon_file, capsys):
        assert main(["chirality", str(canon_file)]) == 0
        assert "unit 0: P=+1.000000 R" in capsys.readouterr().out

    def test_mirror_s(self, tmp_path, capsys):
        path = tmp_path / "m.chimol"
        write(mirror(canonical_molecule()), path)
        assert main(["chirality", str(path)]) == 0
        assert "unit 0: P=-1.000000 S" in capsys.readouterr().out

    def test_multi_unit_order_matches_oracle(self, tmp_path, capsys):
        from chiraldet.data import parse
        from chiraldet.geometry import unit_products

        rng = np.random.default_rng(2)
        coords = rng.uniform(-2.0, 2.0, size=(10, 3))
        zs = np.array([6, 7, 8, 9, 15, 6, 16, 17, 35, 5])
        units = (
            ChiralUnit(kind=UnitKind.CENTER, center_atoms=(0,), related=(1, 2, 3, 4)),
            ChiralUnit(kind=UnitKind.CENTER, center_atoms=(5,), related=(6, 7, 8, 9)),
        )
        mol = Molecule(
            coords=coords, atomic_numbers=zs,
            features=DEFAULT_SCHEME.featurize_all(zs), chiral_units=units, id="multi",
        ).validate()
        path = tmp_path / "multi.chimol"
        write(mol, path)
        assert main(["chirality", str(path)]) == 0
        out = capsys.readouterr().out.splitlines()
        products = unit_products(parse(path))
        assert len(out) == 2
        for i, line in enumerate(out):
            assert line.startswith(f"unit {i}: P={products[i]:+.6f}")

    def test_parse_error_exit_2(self, tmp_path, capsys):
        path = tmp_path / "bad.chimol"
        path.write_text("2\n\nC 0 0 0\nC 1 0 0\nCHIRAL center 0 9 9 9 9\n")
        assert main(["chirality", str(path)]) == 2
        assert "line" in capsys.readouterr().err

    def test_missing_file_exit_2(self):
        assert main(["chirality", "nope.chimol"]) == 2


class TestInvariance:
    def test_pass_on_chiral_molecule(self, canon_file, capsys):
        assert main(["invariance", str(canon_file), "--trials", "200"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("PASS")

    def test_degenerate_warns_and_passes(self, tmp_path, capsys):
        # planar: all four substituents in the xy-plane
        coords = np.array(
            [[0, 0, 0], [1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], dtype=float
        )
        zs = np.array([6, 7, 8, 9, 15])
        mol = Molecule(
            coords=coords,
            atomic_numbers=zs,
            features=DEFAULT_SCHEME.featurize_all(zs),
            chiral_units=(
                ChiralUnit(kind=UnitKind.CENTER, center_atoms=(0,), related=(1, 2, 3, 4)),
            ),
            id="flat",
        )
        path = tmp_path / "flat.chimol"
        write(mol, path)
        assert main(["invariance", str(path), "--trials", "10"]) == 0
        captured = capsys.readouterr()
        assert "Degenerate" in captured.err

    def test_zero_trials_usage_error(self, canon_file):
        assert main(["invariance", str(canon_file), "--trials", "0"]) == 2


class TestGen:
    def test_writes_dataset_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "ds"
        assert main(["gen", "--task", "rs", "--count", "8", "--seed", "3",
                     "--out", str(out)]) == 0
        manifest = (out / "manifest.tsv").read_text().strip().splitlines()
        assert len(manifest) == 8
        assert len(list(out.glob("*.chimol"))) == 8

    def test_deterministic_under_seed(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["gen", "--task", "rs", "--count", "4", "--seed", "7", "--out", str(a)])
        main(["gen", "--task", "rs", "--count", "4", "--seed", "7", "--out", str(b)])
        for f in sorted(a.iterdir()):
            assert f.read_bytes() == (b / f.name).read_bytes()

    def test_axial_task(self, tmp_path):
        out = tmp_path / "ax"
        assert main(["gen", "--task", "axial", "--count", "4", "--seed", "1",
                     "--out", str(out)]) == 0
        assert len(list(out.glob("*.chimol"))) == 4


class TestTrainEval:
    def test_train_then_eval(self, tmp_path, capsys):
        ds = tmp_path / "ds"
        main(["gen", "--task", "rs", "--count", "40", "--seed", "5", "--out", str(ds)])
        run = tmp_path / "run"
        rc = main(["train", "--data", str(ds), "--out", str(run), "--config", "tiny",
                   "--epochs", "2", "--lr", "2e-3"])
        assert rc == 0
        assert (run / "model.ckpt").exists()
        metrics = (run / "metrics.log").read_text().splitlines()
        assert len(metrics) == 2 and metrics[0].startswith("epoch=0")
        capsys.readouterr()
        assert main(["eval", "--ckpt", str(run / "model.ckpt"), "--data", str(ds)]) == 0
        out = capsys.readouterr().out
        assert out.startswith("accuracy=")

    def test_eval_missing_checkpoint(self, tmp_path):
        ds = tmp_path / "ds"
        main(["gen", "--task", "rs", "--count", "4", "--seed", "5", "--out", str(ds)])
        assert main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(ds)]) == 2

    def test_eval_corrupt_checkpoint(self, tmp_path, tiny_ckpt):
        ds = tmp_path / "ds"
        main(["gen", "--task", "rs", "--count", "4", "--seed", "5", "--out", str(ds)])
        raw = bytearray(tiny_ckpt.read_bytes())
        raw[-40] ^= 0xFF
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(raw))
        assert main(["eval", "--ckpt", str(bad), "--data", str(ds)]) == 2

    def test_empty_manifest(self, tmp_path, tiny_ckpt):
        ds = tmp_path / "empty"
        ds.mkdir()
        (ds / "manifest.tsv").write_text("")
        assert main(["eval", "--ckpt", str(tiny_ckpt), "--data", str(ds)]) == 2


class TestEmbedAttn:
    def test_embed_mirror_pair_differs(self, tmp_path, tiny_ckpt, capsys):
        a = tmp_path / "a.chimol"
        b = tmp_path / "b.chimol"
        write(canonical_molecule(), a)
        write(mirror(canonical_molecule()), b)
        out = tmp_path / "emb.csv"
        assert main(["embed", "--ckpt", str(tiny_ckpt), str(a), str(b),
                     "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("id,e0")
        v1 = np.array([float(x) for x in lines[1].split(",")[1:]])
        v2 = np.array([float(x) for x in lines[2].split(",")[1:]])
        assert np.linalg.norm(v1 - v2) > 1e-6

    def test_attn_rows(self, tmp_path, tiny_ckpt, canon_file):
        out = tmp_path / "attn.csv"
        assert main(["attn", "--ckpt", str(tiny_ckpt), str(canon_file),
                     "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "id,query,weights"
        assert lines[1].startswith("canon,keys,")
        weights = [float(x) for x in lines[2].split(",")[2:]]
        assert abs(sum(weights) - 1.0) < 1e-9


class TestRotateAxis:
    def test_sweep_rows_and_arcs(self, tmp_path, tiny_ckpt, capsys):
        path = tmp_path / "toy.chimol"
        write(toy_axial_molecule(), path)
        assert main(["rotate-axis", str(path), "--ckpt", str(tiny_ckpt),
                     "--step", "20"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 19  # header + 18 conformers
        signs = [int(line.split(",")[2]) for line in lines[1:]]
        changes = sum(1 for i in range(18) if signs[i] != signs[(i + 1) % 18])
        assert changes == 2
        assert signs.count(1) == 9 and signs.count(-1) == 9


class TestCliContract:
    @pytest.mark.parametrize("cmd", ["chirality", "invariance", "gradcheck", "gen",
                                     "train", "eval", "embed", "rotate-axis", "attn"])
    def test_help_exits_zero(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        assert "--seed" in capsys.readouterr().out

    def test_unknown_flag_usage_code(self, canon_file, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["chirality", str(canon_file), "--frobnicate"])
        assert exc.value.code == 2

    def test_bad_config_key_rejected(self, tmp_path, canon_file):
        cfg = tmp_path / "cfg"
        cfg.write_text("bogus_key=1\n")
        ds = tmp_path / "ds"
        main(["gen", "--task", "rs", "--count", "4", "--seed", "1", "--out", str(ds)])
        assert main(["train", "--data", str(ds), "--config", str(cfg),
                     "--out", str(tmp_path / "r")]) == 2


class TestGradcheckCmd:
    def test_pass_and_negative_control(self, capsys):
        assert main(["gradcheck", "--seed", "1"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 7
        assert main(["gradcheck", "--seed", "1", "--sabotage", "encoder"]) == 1
        captured = capsys.readouterr()
        assert "FAIL encoder.kernel" in captured.out
        assert "encoder" in captured.err

    def test_repeat_runs_identical(self, capsys):
        main(["gradcheck", "--seed", "2"])
        first = capsys.readouterr().out
        main(["gradcheck", "--seed", "2"])
        assert capsys.readouterr().out == first
