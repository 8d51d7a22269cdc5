import pytest

from tlkit.cli import main
from tlkit.scoremap import read_manifest, read_scoremap
from tlkit.synth import DatasetConfig
from tlkit.trainer import TrainConfig
from tlkit.vit import tiny_config


@pytest.fixture
def configs(tmp_path):
    data = DatasetConfig(image_size=32, scoremap_grid=8, samples_train=16, samples_val=8)
    model = tiny_config(num_classes=9, image_size=32, patch_convs=((4, 4, 8), (2, 2, -1)))
    (tmp_path / "data.cfg").write_text(data.to_text())
    (tmp_path / "model.cfg").write_text(model.to_text())
    (tmp_path / "train.cfg").write_text("batch_size=8\nepochs=1\nwarmup_epochs=0\n")
    return tmp_path


def test_annotate_train_eval(configs, capsys):
    d = configs
    assert main(["annotate", "--dataset", str(d / "data.cfg"), "--out", str(d / "maps"), "--topk", "5"]) == 0
    rows = read_manifest(d / "maps" / "manifest.tsv")
    assert [r[0] for r in rows] == list(range(16))
    sp = read_scoremap(d / "maps" / rows[0][1])
    assert sp.k == 5 and sp.grid == (8, 8) and sp.num_classes == 9

    args = ["train", "--dataset", str(d / "data.cfg"), "--scoremaps", str(d / "maps"),
            "--model", str(d / "model.cfg"), "--train", str(d / "train.cfg"), "--out", str(d / "run")]
    assert main(args) == 0
    lines = (d / "run" / "metrics.log").read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("0\t0\t")
    assert "top1=" in capsys.readouterr().out

    assert main(["eval", "--checkpoint", str(d / "run" / "checkpoint.tlck"), "--dataset", str(d / "data.cfg")]) == 0
    out = capsys.readouterr().out.strip()
    assert out.startswith("top1=") and 0.0 <= float(out[5:]) <= 1.0


def test_train_requires_scoremaps(configs, capsys):
    d = configs
    args = ["train", "--dataset", str(d / "data.cfg"), "--model", str(d / "model.cfg"),
            "--train", str(d / "train.cfg"), "--out", str(d / "run")]
    assert main(args) == 2
    assert "scoremaps" in capsys.readouterr().err


def test_bad_config_exits_nonzero(configs, capsys):
    (configs / "bad.cfg").write_text("depth=2\nnum_heads=3\nembed_dim=16\n")
    assert main(["gradcheck", "--model", str(configs / "bad.cfg")]) == 2
    assert "num_heads" in capsys.readouterr().err


def test_gradcheck_passes(tmp_path, capsys):
    (tmp_path / "m.cfg").write_text(tiny_config(depth=1).to_text())
    assert main(["gradcheck", "--model", str(tmp_path / "m.cfg")]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "blocks.0.attn.qkv.weight" in out


def test_gradcheck_fails_with_impossible_tolerance(tmp_path, capsys):
    (tmp_path / "m.cfg").write_text(tiny_config(depth=1).to_text())
    assert main(["gradcheck", "--model", str(tmp_path / "m.cfg"), "--tol", "1e-30"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_train_config_file_round_trip(tmp_path):
    (tmp_path / "t.cfg").write_text("batch_size=8\ntoken_labeling_enabled=false\n")
    cfg = TrainConfig.from_text((tmp_path / "t.cfg").read_text())
    assert cfg.batch_size == 8 and not cfg.token_labeling_enabled
