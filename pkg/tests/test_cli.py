import hashlib
import json
import shutil

import numpy as np
import pytest
from PIL import Image

from hsmae.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from hsmae.cli import main
from hsmae.datacube import load_cube
from hsmae.metrics import read_csv_rows
from hsmae.model import IdentityModel, is_encoder_param
from hsmae.patching import MaskPlan


def _sha(p):
    return hashlib.sha256(p.read_bytes()).hexdigest()


def _gen(out, count=3, seed=7, extra=()):
    args = ["gen-synthetic", "--out", str(out), "--count", str(count), "--h", "16", "--w", "16", "--c", "24", "--seed", str(seed)]
    assert main(args + list(extra)) == 0


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    _gen(root / "data", count=4, extra=["--hsi-sensor", "desk", "--msi-sensor", "sentinel2"])
    assert main(["match-bands", "--msi", "sentinel2", "--hsi", "desk", "--out", str(root / "m.json")]) == 0
    assert main(["pretrain", "--dataset", str(root / "data"), "--out", str(root / "pre"), "--preset", "desk",
                 "--mask", "spectral", "--ratio", "0.75", "--steps", "3", "--batch-size", "2"]) == 0
    return root


def test_gen_synthetic_reproducible(tmp_path):
    _gen(tmp_path / "a")
    _gen(tmp_path / "b")
    files = sorted((tmp_path / "a" / "hsi").glob("*.hsc"))
    assert len(files) == 3
    for f in files:
        assert _sha(f) == _sha(tmp_path / "b" / "hsi" / f.name)
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert set(man) >= {"command", "argv", "config", "inputs", "outputs", "tool_version", "wall_clock_s"}


@pytest.mark.parametrize(
    "argv",
    [
        ["gen-synthetic", "--out", "x", "--count", "1", "--h", "8", "--w", "8"],
        ["gen-synthetic", "--out", "x", "--count", "0", "--h", "8", "--w", "8", "--c", "4"],
        ["pretrain", "--dataset", "d", "--out", "o", "--ratio", "1.5"],
        ["eval", "--checkpoint", "c", "--dataset", "d", "--out", "o", "--mask", "fixed-bands"],
        ["no-such-command"],
    ],
)
def test_usage_errors_exit_2(tmp_path, monkeypatch, argv):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_runtime_errors_exit_1(tmp_path):
    save_checkpoint(tmp_path / "id.smae", Checkpoint(IdentityModel()))
    assert main(["eval", "--checkpoint", str(tmp_path / "id.smae"), "--dataset", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == 1
    assert main(["finetune", "--checkpoint", str(tmp_path / "id.smae"), "--dataset", str(tmp_path),
                 "--matches", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 1


def test_pretrain_outputs(trained):
    rows = read_csv_rows((trained / "pre" / "metrics.csv").read_text())
    assert [int(r["step"]) for r in rows] == [0, 1, 2]
    ck = load_checkpoint(trained / "pre" / "model.smae")
    assert ck.step == 3 and ck.model.config.preset == "desk"


def test_finetune_frozen_and_deterministic(trained):
    argv = ["finetune", "--checkpoint", str(trained / "pre" / "model.smae"), "--dataset", str(trained / "data"),
            "--matches", str(trained / "m.json"), "--steps", "2", "--batch-size", "2", "--frozen"]
    assert main(argv + ["--out", str(trained / "ft1")]) == 0
    assert main(argv + ["--out", str(trained / "ft2")]) == 0
    assert _sha(trained / "ft1" / "model.smae") == _sha(trained / "ft2" / "model.smae")
    base = load_checkpoint(trained / "pre" / "model.smae").model
    tuned = load_checkpoint(trained / "ft1" / "model.smae").model
    for n in base.params:
        if is_encoder_param(n):
            assert base.params[n].tobytes() == tuned.params[n].tobytes()


def test_reconstruct_artifacts(trained):
    out = trained / "rec" / "r0.hsc"
    assert main(["reconstruct", "--checkpoint", str(trained / "pre" / "model.smae"),
                 "--input", str(trained / "data" / "msi" / "sample_0000.hsc"), "--matches", str(trained / "m.json"),
                 "--truth", str(trained / "data" / "hsi" / "sample_0000.hsc"),
                 "--out", str(out), "--pixels", "1,2;15,0"]) == 0
    cube = load_cube(out)
    assert cube.shape == (16, 16, 24)
    plan = MaskPlan.from_dict(json.loads(out.with_suffix(".plan.json").read_text()))
    pm = plan.pixel_mask()
    rows = read_csv_rows(out.with_suffix(".spectra.csv").read_text())
    assert len(rows) == 2 * 24
    for r in rows:
        assert int(r["masked"]) == int(pm[int(r["i"]), int(r["j"]), int(r["band"])])
        assert r["true"] != ""
    img = Image.open(out.with_suffix(".png"))
    assert img.size == (16, 16) and img.mode == "RGB"


def test_eval_identity_on_copied_pairs(tmp_path):
    _gen(tmp_path / "d", extra=["--hsi-sensor", "desk"])
    shutil.copytree(tmp_path / "d" / "hsi", tmp_path / "d" / "msi")
    assert main(["match-bands", "--msi", "desk", "--hsi", "desk", "--out", str(tmp_path / "self.json")]) == 0
    save_checkpoint(tmp_path / "id.smae", Checkpoint(IdentityModel()))
    assert main(["eval", "--checkpoint", str(tmp_path / "id.smae"), "--dataset", str(tmp_path / "d"),
                 "--matches", str(tmp_path / "self.json"), "--out", str(tmp_path / "ev")]) == 0
    rep = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert rep["ssim"] == pytest.approx(1.0, abs=1e-12)
    rows = read_csv_rows((tmp_path / "ev" / "samples.csv").read_text())
    assert len(rows) == 3
    assert rep["total_mse"] == pytest.approx(np.mean([float(r["total_mse"]) for r in rows]), rel=1e-12)


def test_eval_random_masks_summary_is_csv_mean(trained):
    out = trained / "ev_rand"
    assert main(["eval", "--checkpoint", str(trained / "pre" / "model.smae"), "--dataset", str(trained / "data"),
                 "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    rows = read_csv_rows((out / "samples.csv").read_text())
    for key in ("total_mse", "masked_mse", "unmasked_mse", "ssim"):
        assert rep[key] == pytest.approx(np.mean([float(r[key]) for r in rows]), rel=1e-12)


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preset": "desk", "train": {"steps": 2, "batch_size": 1}}))
    _gen(tmp_path / "d", count=2, extra=["--hsi-sensor", "desk"])
    assert main(["--config", str(cfg), "pretrain", "--dataset", str(tmp_path / "d"), "--out", str(tmp_path / "p"),
                 "--steps", "1"]) == 0
    man = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert man["config"]["train"]["steps"] == 1
    assert man["config"]["train"]["batch_size"] == 1


def test_precision_flag_writes_f64(tmp_path):
    _gen(tmp_path / "d", count=2, extra=["--hsi-sensor", "desk"])
    assert main(["--precision", "f64", "pretrain", "--dataset", str(tmp_path / "d"), "--out", str(tmp_path / "p"),
                 "--steps", "1", "--batch-size", "2"]) == 0
    head = json.loads((tmp_path / "p" / "model.smae").read_bytes().split(b"\n", 1)[0])
    assert head["dtype"] == "f64le"
