import json
import struct

import numpy as np
import pytest
import torch
import torch.nn as nn

from _helpers import gradient_check
from epnet.analysis import count_params
from epnet.errors import CheckpointError, ConfigError, DimensionError
from epnet.imageio import read_png, write_png
from epnet.network import (
    MAGIC,
    ModelConfig,
    build_model,
    desnow_image,
    infer,
    load_checkpoint,
    pad_to_multiple,
    restore,
    save_checkpoint,
)

SMALL = ModelConfig(channels=(4, 8, 16, 32, 64, 128), hor_depth=1, shuffle_groups=4)


class Padded(nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward(self, x):
        return infer(self.model, x)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(channels=(16, 32, 64, 128, 256))
    with pytest.raises(ConfigError):
        ModelConfig(channels=(16, 32, 64, 128, 256, 500))
    with pytest.raises(ConfigError):
        ModelConfig(hor_depth=-1)
    with pytest.raises(ConfigError):
        ModelConfig(channels=(2, 4, 8, 16, 32, 64))  # groups do not divide 4


def test_default_param_count_within_budget():
    n = count_params().total_params
    assert abs(n - 65.56e6) / 65.56e6 <= 0.02


def test_live_count_matches_closed_form_default():
    assert build_model().num_params() == count_params().total_params


def test_hor_increment():
    counts = [count_params(ModelConfig(hor_depth=d)).total_params for d in range(4)]
    assert np.all(np.diff(counts) == 2_638_080)


def test_ablation_counts():
    full = count_params().total_params
    wo_eam = ModelConfig(wo_eam=True)
    assert count_params(wo_eam).total_params < full
    for cfg in (wo_eam, ModelConfig(cimb_to_se_resblock=True), ModelConfig(wo_ln=True),
                ModelConfig(eam_from_fin=True)):
        assert build_model(cfg).num_params() == count_params(cfg).total_params


def test_init_is_deterministic():
    a = build_model(SMALL, seed=3).state_dict()
    b = build_model(SMALL, seed=3).state_dict()
    c = build_model(SMALL, seed=4).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_forward_shape():
    m = build_model(ModelConfig.tiny())
    with torch.no_grad():
        assert m(torch.rand(1, 3, 256, 256)).shape == (1, 3, 256, 256)


def test_forward_rejects_indivisible():
    with pytest.raises(DimensionError):
        build_model(SMALL)(torch.rand(1, 3, 48, 64))


@pytest.mark.parametrize("h,w", [(8, 8), (33, 47), (64, 96), (5, 70)])
def test_padded_inference_restores_dims(h, w):
    with torch.no_grad():
        assert infer(build_model(SMALL), torch.rand(1, 3, h, w)).shape == (1, 3, h, w)


def test_reflect_pad_matches_numpy_for_large_pads():
    x = torch.arange(5 * 3, dtype=torch.float64).view(1, 1, 5, 3)
    got, dims = pad_to_multiple(x, 32)
    assert dims == (5, 3)
    want = np.pad(x[0, 0].numpy(), ((0, 27), (0, 29)), mode="reflect")
    np.testing.assert_array_equal(got[0, 0].numpy(), want)


def test_zero_head_is_identity():
    m = build_model(SMALL, head_scale=0.0)
    x = torch.rand(2, 3, 64, 32)
    with torch.no_grad():
        assert torch.equal(m(x), x)


def test_forward_deterministic():
    m = build_model(SMALL)
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(m(x), m(x))


def test_full_network_gradients():
    m = build_model(SMALL, seed=1)
    x = torch.rand(1, 3, 8, 8, generator=torch.Generator().manual_seed(5))
    assert gradient_check(Padded(m), [x], max_entries=5) <= 1e-5


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m = build_model(SMALL, seed=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    m2 = load_checkpoint(path)
    assert m2.cfg == m.cfg
    x = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(m(x), m2(x))


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model(SMALL), path)
    data = path.read_bytes()
    for cut in (4, len(MAGIC) + 4, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def _rewrite_manifest(path, edit):
    data = path.read_bytes()
    head = len(MAGIC) + 8
    (n,) = struct.unpack("<Q", data[len(MAGIC):head])
    manifest = json.loads(data[head:head + n])
    edit(manifest)
    blob = json.dumps(manifest).encode()
    path.write_bytes(MAGIC + struct.pack("<Q", len(blob)) + blob + data[head + n:])


def test_wrong_shape_in_manifest(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model(SMALL), path)

    def edit(man):
        entry = next(e for e in man["tensors"] if e["name"] == "head.weight")
        entry["shape"] = [entry["shape"][1], entry["shape"][0], 3, 3]

    _rewrite_manifest(path, edit)
    with pytest.raises(CheckpointError, match="head.weight"):
        load_checkpoint(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model(SMALL), path)
    _rewrite_manifest(path, lambda man: man.update(format_version=99))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"hello world, definitely not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# -- image-level inference -------------------------------------------------------

def test_tiled_equals_untiled_when_tile_covers_image():
    m = build_model(SMALL)
    img = np.random.default_rng(0).uniform(0, 1, (64, 80, 3))
    assert np.array_equal(restore(m, img), restore(m, img, tile=128))


def test_tiling_weights_partition_unity():
    # identity network: any blend of its tiles must reproduce the input
    m = build_model(SMALL, head_scale=0.0)
    img = np.random.default_rng(1).uniform(0, 1, (150, 230, 3))
    out = restore(m, img, tile=96, overlap=32)
    np.testing.assert_allclose(out, img, atol=1e-6)


def test_desnow_image_writes_png(tmp_path):
    m = build_model(SMALL)
    src = tmp_path / "in.png"
    write_png(src, np.random.default_rng(2).uniform(0, 1, (40, 72, 3)))
    rep = desnow_image(m, src, tmp_path / "a.png", tile=32 + 16, overlap=16)
    desnow_image(m, src, tmp_path / "b.png", tile=32 + 16, overlap=16)
    assert read_png(tmp_path / "a.png").shape == (40, 72, 3)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert (rep["width"], rep["height"]) == (72, 40)


def test_desnow_missing_input(tmp_path):
    with pytest.raises(OSError):
        desnow_image(build_model(SMALL), tmp_path / "missing.png", tmp_path / "o.png")


def test_tiled_close_to_untiled_on_trained_model(tmp_path, pair_dir):
    from epnet.snow import SynthConfig, generate_snow_params, procedural_scene, synthesize_snow
    from epnet.train import TrainConfig, train

    cfg = TrainConfig(batch_size=4, patch_size=64, total_steps=300, checkpoint_every=0,
                      head_scale=0.1)
    m = load_checkpoint(train(SMALL, cfg, pair_dir, tmp_path / "run").checkpoint)
    clean = procedural_scene(np.random.default_rng(3), (256, 256))
    img = synthesize_snow(clean, generate_snow_params(SynthConfig(rng_seed=3), (256, 256)))
    diff = np.abs(restore(m, img) - restore(m, img, tile=128, overlap=32))
    # global SE pooling lets tiling shift every pixel slightly, not only the overlaps
    assert diff.mean() <= 2 / 255
