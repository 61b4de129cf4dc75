import dataclasses
import json

import numpy as np
import pytest

from dialograph.checkpoint import BLOB, MANIFEST, CheckpointError, load_checkpoint, save_checkpoint
from dialograph.model import ModelConfig, init_params

CFG = ModelConfig(d_h=4, num_classes=3, d_s=2, d_model=16, num_heads=8, num_layers=2)


def test_round_trip_exact_at_single_precision(tmp_path):
    params = init_params(CFG, 0)
    save_checkpoint(params, CFG, tmp_path)
    back, cfg = load_checkpoint(tmp_path, expected=CFG)
    assert cfg == CFG
    for name, arr in params.items():
        np.testing.assert_array_equal(back[name], arr.astype("<f4").astype(np.float64))
    # a second save of the loaded values is byte-identical
    save_checkpoint(back, cfg, tmp_path / "again")
    assert (tmp_path / BLOB).read_bytes() == (tmp_path / "again" / BLOB).read_bytes()


def test_manifest_layout(tmp_path):
    save_checkpoint(init_params(CFG, 0), CFG, tmp_path)
    man = json.loads((tmp_path / MANIFEST).read_text())
    assert man["config"] == dataclasses.asdict(CFG)
    offsets = [t["offset"] for t in man["tensors"]]
    sizes = [int(np.prod(t["shape"])) * 4 for t in man["tensors"]]
    assert offsets == list(np.cumsum([0] + sizes[:-1]))
    assert (tmp_path / BLOB).stat().st_size == sum(sizes)


def test_truncated_blob(tmp_path):
    save_checkpoint(init_params(CFG, 0), CFG, tmp_path)
    blob = tmp_path / BLOB
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(tmp_path)


def test_corrupt_manifest(tmp_path):
    save_checkpoint(init_params(CFG, 0), CFG, tmp_path)
    (tmp_path / MANIFEST).write_text("{not json")
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(tmp_path)


def test_shape_mismatch(tmp_path):
    save_checkpoint(init_params(CFG, 0), CFG, tmp_path)
    man = json.loads((tmp_path / MANIFEST).read_text())
    man["tensors"][0]["shape"] = [1, 1]
    (tmp_path / MANIFEST).write_text(json.dumps(man))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(tmp_path)


def test_config_mismatch_lists_field(tmp_path):
    save_checkpoint(init_params(CFG, 0), CFG, tmp_path)
    with pytest.raises(CheckpointError, match="num_heads"):
        load_checkpoint(tmp_path, expected=dataclasses.replace(CFG, num_heads=4))


def test_missing_files(tmp_path):
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(tmp_path)
