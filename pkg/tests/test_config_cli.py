import math

import numpy as np
import pytest

from vesselnet import modelio
from vesselnet.cli import main
from vesselnet.config import RunConfig
from vesselnet.errors import ConfigError
from vesselnet.preprocess import read_pnm, write_pgm, write_ppm
from vesselnet.synthetic import synthetic_fundus

SMALL = """\
# small run for tests
epochs = 1
samples_per_image = 60
synthetic_images = 4
synthetic_size = 24
eq_window = 5
learning_rate = 0.05
quant_rounds = 1
folds = 2
eval_max_pixels = 150
"""


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.threshold_mode == "stddev" and cfg.prune_k == 1.0
        assert cfg.eq_window % 2 == 1

    def test_parse(self):
        cfg = RunConfig.parse(SMALL)
        assert cfg.epochs == 1 and cfg.learning_rate == 0.05 and cfg.folds == 2
        assert cfg.batch_size == RunConfig().batch_size

    def test_round_trip(self):
        cfg = RunConfig.parse(SMALL).replace(seed=9, threshold_mode="variance")
        assert RunConfig.parse(cfg.to_text()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="line 2.*bogus"):
            RunConfig.parse("seed=1\nbogus=3\n")

    @pytest.mark.parametrize("text", ["eq_window=4", "vessel_fraction=1", "folds=1",
                                      "threshold_mode=median", "learning_rate=-1",
                                      "epochs=0", "tolerance=nan", "seed=abc", "no equals"])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            RunConfig.parse(text)

    def test_schedule(self):
        s = RunConfig(prune_k=2.5, tolerance=0.02).schedule()
        assert s.prune_k == 2.5 and s.tolerance == 0.02

    def test_infinite_tolerance_allowed(self):
        assert math.isinf(RunConfig.parse("tolerance=inf").tolerance)


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestReport:
    def test_reference_counts_and_chain(self, capsys):
        code, out, _ = run(["report"], capsys)
        assert code == 0
        for n in ("576", "18432", "14400", "1000", "40"):
            assert f",{n}," in out
        assert "64M × 9×9N" in out and "2N" in out
        assert "522896" in out

    def test_writes_figure(self, tmp_path, capsys):
        code, _, _ = run(["report", "--out-dir", str(tmp_path)], capsys)
        assert code == 0
        assert (tmp_path / "weights.png").stat().st_size > 0
        assert (tmp_path / "complexity.csv").read_text().startswith("layer,kind")

    def test_echoes_config(self, capsys):
        _, out, _ = run(["report", "--seed", "4"], capsys)
        assert "# seed=4" in out

    def test_missing_model(self, tmp_path, capsys):
        code, _, err = run(["report", str(tmp_path / "none.tqns")], capsys)
        assert code == 2 and "none.tqns" in err

    def test_corrupt_model(self, tmp_path, capsys):
        bad = tmp_path / "bad.tqns"
        bad.write_bytes(b"TQNS\x01\x00")
        code, _, err = run(["report", str(bad)], capsys)
        assert code == 1 and "bad.tqns" in err


class TestErrors:
    def test_missing_data_dir(self, tmp_path, capsys):
        missing = tmp_path / "stare"
        code, _, err = run(["train", str(missing), "-o", str(tmp_path / "m.tqns")], capsys)
        assert code == 2 and str(missing) in err

    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("eq_window=4\n")
        code, _, err = run(["report", "--config", str(cfg)], capsys)
        assert code == 2 and "eq_window" in err

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["frobnicate"])
        assert info.value.code == 2

    def test_prune_requires_quantized(self, tmp_path, capsys):
        model = tmp_path / "ref.tqns"
        from vesselnet.netcore import reference_architecture
        modelio.save_model(reference_architecture(), model)
        code, _, err = run(["prune", str(model), "--synthetic", "-o", str(tmp_path / "p.tqns")],
                           capsys)
        assert code == 2 and "quantize" in err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """train -> quantize on a tiny synthetic run, shared by the pipeline tests."""
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "small.cfg"
    cfg.write_text(SMALL)
    common = ["--config", str(cfg), "--synthetic", "--out-dir", str(d)]
    assert main(["train", "-o", str(d / "base.tqns")] + common) == 0
    assert main(["quantize", str(d / "base.tqns"), "-o", str(d / "quant.tqns")] + common) == 0
    return d, common


class TestPipeline:
    def test_outputs(self, pipeline):
        d, _ = pipeline
        for name in ("train_log.csv", "training.png", "quantize_history.csv"):
            assert (d / name).exists()
        net = modelio.load_model(d / "quant.tqns")
        assert all(l.quantized for l in net.dense_layers())

    def test_same_seed_same_bytes(self, pipeline, tmp_path):
        d, common = pipeline
        assert main(["train", "-o", str(tmp_path / "again.tqns"), "--no-figures"] + common) == 0
        assert (tmp_path / "again.tqns").read_bytes() == (d / "base.tqns").read_bytes()

    def test_prune(self, pipeline, capsys):
        d, common = pipeline
        code = main(["prune", str(d / "quant.tqns"), "-o", str(d / "pruned.tqns")] + common)
        out = capsys.readouterr().out
        assert code == 0
        assert "# conv_removal_fraction=" in out
        assert (d / "prune_history.csv").exists() and (d / "sparsity.png").exists()
        net = modelio.load_model(d / "pruned.tqns")
        assert all(l.mask is not None for l in net.conv_layers())

    def test_prune_k_zero(self, pipeline, tmp_path, capsys):
        d, common = pipeline
        cfg = tmp_path / "k0.cfg"
        cfg.write_text(SMALL + "prune_k = 0\n")
        args = ["prune", str(d / "quant.tqns"), "-o", str(tmp_path / "same.tqns"),
                "--synthetic", "--config", str(cfg), "--out-dir", str(tmp_path)]
        code = main(args)
        out = capsys.readouterr().out
        assert code == 0 and "# warning: k=0" in out
        assert (tmp_path / "same.tqns").read_bytes() == (d / "quant.tqns").read_bytes()

    def test_segment(self, pipeline, tmp_path, capsys):
        d, common = pipeline
        images, _ = synthetic_fundus(1, size=20, seed=8)
        write_ppm(tmp_path / "img.ppm", images[0].rgb)
        prefix = tmp_path / "seg" / "img"
        code = main(["segment", str(d / "quant.tqns"), str(tmp_path / "img.ppm"), str(prefix)])
        assert code == 0
        prob = read_pnm(f"{prefix}.prob.pgm")
        mask = read_pnm(f"{prefix}.mask.pgm")
        assert prob.shape == mask.shape == (20, 20)
        assert set(np.unique(mask)) <= {0, 255}
        assert (tmp_path / "seg" / "img.png").exists()

    def test_eval(self, pipeline, capsys):
        d, common = pipeline
        code = main(["eval", str(d / "quant.tqns")] + common)
        out = capsys.readouterr().out
        assert code == 0
        rows = [l for l in out.splitlines() if l and not l.startswith("#")]
        assert rows[0].startswith("image,sen,spe")
        assert rows[-1].startswith("pooled,")
        assert (d / "roc.csv").exists() and (d / "roc.png").exists()

    def test_eval_stare_layout_with_fov(self, pipeline, tmp_path, capsys):
        d, _ = pipeline
        images, labels = synthetic_fundus(2, size=24, seed=9)
        fov_dir = tmp_path / "fov"
        fov_dir.mkdir()
        fov = np.zeros((24, 24), np.uint8)
        fov[4:20, 4:20] = 255
        for i, (im, lab) in enumerate(zip(images, labels), 1):
            write_ppm(tmp_path / f"im{i:04d}.ppm", im.rgb)
            write_ppm(tmp_path / f"im{i:04d}.ah.ppm", np.repeat(lab[..., None], 3, axis=2))
            write_pgm(fov_dir / f"im{i:04d}.fov.pgm", fov)
        out_dir = tmp_path / "out"
        code = main(["eval", str(d / "quant.tqns"), str(tmp_path), "--fov", str(fov_dir),
                     "--out-dir", str(out_dir), "--no-figures"])
        out = capsys.readouterr().out
        assert code == 0
        rows = {l.split(",")[0]: l.split(",") for l in out.splitlines() if l and l[0] != "#"}
        assert {"im0001", "im0002", "pooled", "pooled_without_fov"} <= set(rows)
        counts = lambda r: sum(int(x) for x in r[6:10])
        assert counts(rows["pooled"]) == 2 * 16 * 16
        assert counts(rows["pooled_without_fov"]) == 2 * 24 * 24


def test_xval_five_folds(tmp_path, capsys):
    cfg = tmp_path / "x.cfg"
    cfg.write_text(SMALL.replace("folds = 2", "folds = 5").replace("synthetic_images = 4",
                                                                   "synthetic_images = 10"))
    code = main(["xval", "--synthetic", "--config", str(cfg), "--out-dir", str(tmp_path)])
    out = capsys.readouterr().out
    assert code == 0
    rows = [l.split(",") for l in out.splitlines() if l and not l.startswith("#")]
    folds = {r[0] for r in rows[1:] if r[0].isdigit()}
    assert folds == {"0", "1", "2", "3", "4"}
    assert sum(r[0] == "mean" for r in rows) == 3
    assert (tmp_path / "xval_roc.png").exists()


def test_xval_too_few_images(tmp_path, capsys):
    cfg = tmp_path / "x.cfg"
    cfg.write_text(SMALL.replace("folds = 2", "folds = 5"))
    code = main(["xval", "--synthetic", "--config", str(cfg), "--out-dir", str(tmp_path)])
    assert code == 2
