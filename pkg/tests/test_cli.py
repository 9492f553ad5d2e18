import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from apnet.cli import build_parser, main, overlay, palette
from apnet.data import SynthSpec, generate, load_labels, read_manifest
from apnet.model import ApnetConfig, init_params, save_checkpoint


def files_under(path):
    return sorted(str(p.relative_to(path)) for p in path.rglob("*") if p.is_file())


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--side", "32", "--series", "5", "--slices", "2", "--seed", "4"]) == 0
    return out


def test_synth_outputs(dataset):
    names = set(files_under(dataset))
    assert {"manifest.tsv", "train.tsv", "val.tsv", "test.tsv", "config.json"} <= names
    total = sum(len(read_manifest(dataset / f"{s}.tsv").entries) for s in ("train", "val", "test"))
    assert total == len(read_manifest(dataset / "manifest.tsv").entries) == 10
    echoed = json.loads((dataset / "config.json").read_text())
    assert echoed["synth"]["side"] == 32 and echoed["synth"]["seed"] == 4 and echoed["data"]["n_series"] == 5


def test_synth_config_roundtrip(dataset, tmp_path):
    assert main(["synth", "--config", str(dataset / "config.json"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "manifest.tsv").read_text() == (dataset / "manifest.tsv").read_text()
    for name in read_manifest(dataset / "manifest.tsv").entries:
        assert (tmp_path / name.labels).read_bytes() == (dataset / name.labels).read_bytes()


def test_augment_expands_manifest(dataset, tmp_path):
    out = tmp_path / "aug"
    assert main(["augment", "--manifest", str(dataset / "train.tsv"), "--out", str(out), "--factor", "3", "--seed", "2"]) == 0
    src = read_manifest(dataset / "train.tsv")
    aug = read_manifest(out / "manifest.tsv")
    aug.validate()
    assert len(aug.entries) == 3 * len(src.entries)
    assert aug.series_ids == src.series_ids
    # copy 0 is the original, later copies differ
    first = src.entries[0]
    np.testing.assert_array_equal(load_labels(out / aug.entries[0].labels), load_labels(dataset / first.labels))
    assert not np.array_equal(load_labels(out / aug.entries[1].labels), load_labels(dataset / first.labels))


def test_train_is_byte_deterministic(dataset, tmp_path):
    args = ["train", "--manifest", str(dataset / "train.tsv"), "--preset", "apnet2+DA", "--iters", "8", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "history.tsv").read_bytes() == (tmp_path / "b" / "history.tsv").read_bytes()
    # the echoed config reproduces the run
    echoed = tmp_path / "a" / "config.json"
    assert json.loads(echoed.read_text())["model"]["scales"] == [1.0, 0.75]
    assert main(["train", "--manifest", str(dataset / "train.tsv"), "--config", str(echoed), "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "history.tsv").read_bytes() == (tmp_path / "c" / "history.tsv").read_bytes()


def test_eval_and_infer(dataset, tmp_path, capsys):
    assert main(["train", "--manifest", str(dataset / "train.tsv"), "--val-manifest", str(dataset / "val.tsv"),
                 "--val-every", "5", "--iters", "10", "--out", str(tmp_path / "t")]) == 0
    assert main(["eval", "--checkpoint", str(tmp_path / "t" / "checkpoint_best.npz"),
                 "--manifest", str(dataset / "test.tsv"), "--out", str(tmp_path / "e")]) == 0
    text = capsys.readouterr().out
    assert "PixelAcc" in text and "attention weights" in text
    rows = (tmp_path / "e" / "report.tsv").read_text().splitlines()
    assert rows[0] == "class_id\tclass_name\tIoU(%)" and rows[-1].startswith("\tmIoU\t")
    assert len(rows) == 1 + 6 + 2
    assert (tmp_path / "e" / "attention.tsv").exists()
    image = dataset / read_manifest(dataset / "test.tsv").entries[0].image
    assert main(["infer", "--checkpoint", str(tmp_path / "t" / "checkpoint_last.npz"), "--image", str(image),
                 "--out", str(tmp_path / "i")]) == 0
    lab = load_labels(tmp_path / "i" / f"{image.stem}_labels.png")
    assert lab.shape == (32, 32) and lab.max() < 6
    with Image.open(tmp_path / "i" / f"{image.stem}_overlay.png") as im:
        assert im.mode == "RGB" and im.size == (32, 32)


def test_eval_perfect_fixture(tmp_path, capsys):
    """A model whose score map copies a one-hot 'image' predicts perfectly."""
    spec = SynthSpec(side=16, n_pairs=0, n_unpaired=1, radius_range=(0.2, 0.25), noise=0, blur=0, seed=1)
    generate(spec, 2, 1, tmp_path / "d")
    cfg = ApnetConfig(scales=[1.0], num_classes=2, input_size=16, backbone_channels=[1, 1, 1], use_spp=False)
    params = init_params(cfg)
    # the prediction ignores the image: constant logits favour background
    for c in params.backbone:
        c.weight.data[:] = 0
    params.score.weight.data[:] = 0
    params.score.bias.data[:] = [1.0, 0.0]
    save_checkpoint(tmp_path / "m.npz", params, cfg)
    # ground truth that is all background
    m = read_manifest(tmp_path / "d" / "manifest.tsv")
    for e in m.entries:
        Image.fromarray(np.zeros((16, 16), np.uint8)).save(tmp_path / "d" / e.labels)
    assert main(["eval", "--checkpoint", str(tmp_path / "m.npz"), "--manifest", str(tmp_path / "d" / "manifest.tsv"),
                 "--out", str(tmp_path / "e")]) == 0
    rows = (tmp_path / "e" / "report.tsv").read_text().splitlines()[1:]
    values = [r.split("\t")[2] for r in rows]
    assert values == ["100.00", "absent", "100.00", "100.00"]


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--seeds", "1", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "tiny APNet" in text and "max rel err" in text and "FAIL" not in text
    assert (tmp_path / "gradcheck.txt").exists()
    assert main(["gradcheck", "--seeds", "1", "--tolerance", "1e-30"]) == 1


def test_error_exit_codes(dataset, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"base_lr": -1}}))
    base = ["train", "--manifest", str(dataset / "train.tsv"), "--out", str(tmp_path / "x")]
    assert main(base + ["--config", str(bad)]) == 3
    bad.write_text(json.dumps({"train": {"learning_rate": 1}}))
    assert main(base + ["--config", str(bad)]) == 3
    assert "valid keys" in capsys.readouterr().err
    bad.write_text("{not json")
    assert main(base + ["--config", str(bad)]) == 3
    assert main(["train", "--manifest", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "x")]) == 4
    (tmp_path / "junk.npz").write_bytes(b"xx")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.npz"), "--manifest", str(dataset / "test.tsv"),
                 "--out", str(tmp_path / "y")]) == 4
    assert main(["synth", "--out", str(tmp_path / "z"), "--side", "16", "--config", str(_crowded(tmp_path))]) == 7
    assert main(["synth", "--out", str(tmp_path / "w"), "--side", "20"]) == 3
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 2


def _crowded(tmp_path):
    p = tmp_path / "crowded.json"
    p.write_text(json.dumps({"synth": {"n_pairs": 5, "radius_range": [0.2, 0.3]}}))
    return p


def test_writes_stay_inside_out(dataset, tmp_path):
    before = set(files_under(dataset))
    out = tmp_path / "aug"
    main(["augment", "--manifest", str(dataset / "train.tsv"), "--out", str(out), "--factor", "2"])
    assert set(files_under(dataset)) == before
    assert all(not p.startswith("..") for p in files_under(out))


def test_help_documents_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, sp in sub.choices.items():
        for action in sp._actions:
            if action.dest != "help":
                assert action.help, f"{name} {action.option_strings} lacks help text"


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "apnet", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gradcheck" in r.stdout


def test_palette_and_overlay():
    pal = palette()
    assert pal.shape == (256, 3) and pal.dtype == np.uint8
    assert (pal[0] == 0).all() and len({tuple(c) for c in pal}) == 256
    np.testing.assert_array_equal(pal[1], [128, 0, 0])
    np.testing.assert_array_equal(pal[2], [0, 128, 0])
    img = np.full((2, 2), 100, np.uint8)
    out = overlay(img, np.array([[0, 1], [0, 0]]))
    np.testing.assert_array_equal(out[0, 0], [100, 100, 100])
    np.testing.assert_array_equal(out[0, 1], [114, 50, 50])
