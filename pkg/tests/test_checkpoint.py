import zipfile

import numpy as np
import pytest

from hyperconv.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from hyperconv.config import format_text, parse_text
from hyperconv.symmetry import verify_invariance


def test_round_trip_is_exact(make_model, rng, tmp_path):
    model = make_model("eq5")
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == model.config
    assert all(np.array_equal(back.params[k].data, p.data) for k, p in model.params.items())
    assert all(np.array_equal(back.buffers[k], b) for k, b in model.buffers.items())
    report = verify_invariance(model, back, rng.normal(size=(4, 2, 16, 16)))
    assert report.max_deviation == 0.0


def test_truncated_file(make_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(make_model(), path)
    data = path.read_bytes()
    for cut in (10, len(data) // 2, len(data) - 5):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_refuses_non_finite(make_model, tmp_path):
    model = make_model()
    model.params["head.bias"].data[1] = np.nan
    path = tmp_path / "m.ckpt"
    with pytest.raises(CheckpointError, match="non-finite"):
        save_checkpoint(model, path)
    assert not path.exists()


def rewrite(path, manifest_edit=None, drop=None, replace=None):
    with zipfile.ZipFile(path) as zf:
        items = {n: zf.read(n) for n in zf.namelist()}
    if manifest_edit:
        manifest = parse_text(items["manifest.txt"].decode())
        manifest_edit(manifest)
        items["manifest.txt"] = format_text(manifest).encode()
    if drop:
        del items[drop]
    if replace:
        items.update(replace)
    with zipfile.ZipFile(path, "w") as zf:
        for n, b in items.items():
            zf.writestr(n, b)


def saved(make_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(make_model(), path)
    return path


def test_manifest_shape_mismatch(make_model, tmp_path):
    path = saved(make_model, tmp_path)
    rewrite(path, manifest_edit=lambda m: m.update({"record.param/head.bias": "4"}))
    with pytest.raises(CheckpointError, match="head.bias"):
        load_checkpoint(path)


def test_manifest_config_mismatch(make_model, tmp_path):
    path = saved(make_model, tmp_path)
    rewrite(path, manifest_edit=lambda m: m.update({"network.stem_channels": "5"}))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_record(make_model, tmp_path):
    path = saved(make_model, tmp_path)
    rewrite(path, drop="param/head.bias.tnsr")
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(path)


def test_bad_version_and_record(make_model, tmp_path):
    path = saved(make_model, tmp_path)
    rewrite(path, manifest_edit=lambda m: m.update({"format": "7"}))
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(path)
    path = saved(make_model, tmp_path)
    rewrite(path, replace={"param/head.bias.tnsr": b"JUNKJUNKJUNK"})
    with pytest.raises(CheckpointError, match="head.bias"):
        load_checkpoint(path)
