import struct

import numpy as np
import pytest

from conftest import TINY
from spikemlp.config import NetworkConfig, RunConfig, variant
from spikemlp.layers import BatchNorm, Linear, Projection
from spikemlp.network import (Checkpoint, CheckpointError, Network, checkpoint_of, count_params,
                              load_checkpoint, network_from_checkpoint, reload_with_T, save_checkpoint)

rng = np.random.default_rng(3)


def test_single_projection_count():
    proj = Projection(Linear(3, 4), BatchNorm(4))
    assert sum(p.data.size for p in proj.parameters()) == 20


@pytest.mark.parametrize("cfg", [TINY, TINY.replace(stage_layers=(2, 1, 1), img_size=(64, 64), alpha=2),
                                 TINY.replace(c1=6, stage_layers=(3,), head_pool=False)])
def test_closed_form_matches_enumeration(cfg):
    assert count_params(cfg) == Network(cfg).num_params()


@pytest.mark.parametrize("name,published", [("MLP-SPE-T", 25e6), ("MLP-SPE-S", 38e6), ("MLP-SPE-B", 66e6)])
def test_published_sizes(name, published):
    assert abs(count_params(variant(name)) - published) <= 0.1 * published


def test_tiny_stage_geometry():
    net = Network(TINY)
    assert [(TINY.stage_channels(s), TINY.stage_size(s)) for s in range(2)] == [(12, (8, 8)), (24, (4, 4))]
    assert net.stages[1].spe.out_channels == 24


def test_full_size_variant_builds():
    net = Network(variant("MLP-SPE-T"))
    assert net.num_params() == count_params(variant("MLP-SPE-T"))


def test_same_seed_same_init():
    a, b = Network(TINY), Network(TINY)
    for (na, pa), (nb, pb) in zip(a.named_parameters().items(), b.named_parameters().items()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    c = Network(TINY.replace(seed=1))
    assert not np.array_equal(c.named_parameters()["stage1.patch.conv.weight"].data,
                              a.named_parameters()["stage1.patch.conv.weight"].data)


def test_forward_shapes_and_time_axis():
    net = Network(TINY).eval()
    x = rng.random((3, 3, 32, 32))
    assert net.forward(x, 4).shape == (4, 3, 2)
    assert net.forward(x, 8).shape == (8, 3, 2)
    one = net.forward(x, 1).data
    assert np.array_equal(one[0], net.forward(x, 4).data[0])  # step 1 does not depend on T


def test_zero_image_zero_classifier():
    net = Network(TINY).eval()
    net.head.classifier.weight.data[:] = 0.0
    assert not net.forward(np.zeros((2, 3, 32, 32)), 4).data.any()


def test_bad_input_shape():
    with pytest.raises(ValueError):
        Network(TINY).forward(np.zeros((1, 3, 16, 16)))


def test_checkpoint_round_trip(tmp_path, trained_tiny):
    x = rng.random((4, 3, 32, 32))
    path = tmp_path / "c.smlx"
    run = RunConfig(network=TINY, epochs=3)
    save_checkpoint(trained_tiny, path, run, epoch=1)
    net, ckpt = load_checkpoint(path)
    assert ckpt.run == run and ckpt.epoch == 1
    assert np.array_equal(net.eval().forward(x).data, trained_tiny.forward(x).data)
    assert Checkpoint.load(path).to_bytes() == path.read_bytes()


def test_folded_checkpoint_round_trip(tmp_path, trained_tiny):
    folded = trained_tiny.fold()
    path = tmp_path / "f.smlx"
    save_checkpoint(folded, path)
    net, ckpt = load_checkpoint(path)
    assert ckpt.folded and net.is_folded
    x = rng.random((2, 3, 32, 32))
    assert np.array_equal(net.forward(x).data, folded.forward(x).data)


def test_reload_at_longer_T(tmp_path, trained_tiny):
    path = tmp_path / "c.smlx"
    save_checkpoint(trained_tiny, path)
    net = reload_with_T(path, 6)
    assert net.config.T == 6
    assert net.eval().forward(rng.random((2, 3, 32, 32))).shape == (6, 2, 2)


def _corrupt_blob_length(buf: bytes) -> bytes:
    meta_len = struct.unpack("<I", buf[8:12])[0]
    first = 12 + meta_len + 4  # first blob name length
    name_len = struct.unpack("<I", buf[first:first + 4])[0]
    dims_at = first + 4 + name_len + 5
    dim0 = struct.unpack("<I", buf[dims_at:dims_at + 4])[0]
    return buf[:dims_at] + struct.pack("<I", dim0 + 1) + buf[dims_at + 4:]


def test_corrupt_checkpoints_raise_named_errors():
    good = checkpoint_of(Network(TINY)).to_bytes()
    with pytest.raises(CheckpointError, match="bad magic"):
        Checkpoint.from_bytes(b"XXXX" + good[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        Checkpoint.from_bytes(good[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        Checkpoint.from_bytes(good + b"\0")
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(good[:4] + struct.pack("<I", 99) + good[8:])
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(_corrupt_blob_length(good))


def test_mismatched_tensors_leave_no_partial_load():
    ckpt = checkpoint_of(Network(TINY))
    name = next(iter(ckpt.tensors))
    ckpt.tensors[name] = np.zeros(3)
    with pytest.raises(CheckpointError, match="shape mismatch"):
        network_from_checkpoint(ckpt)
    ckpt = checkpoint_of(Network(TINY))
    del ckpt.tensors[name]
    with pytest.raises(CheckpointError, match="missing"):
        network_from_checkpoint(ckpt)


def test_fold_equivalence_network(trained_tiny, tiny_data):
    x = tiny_data[1].images[:32]
    ref = trained_tiny.forward(x).data
    folded = trained_tiny.fold()
    got = folded.forward(x).data
    assert got.dtype == np.float32
    assert np.abs(ref).mean() > 0  # logits carry signal
    assert np.max(np.abs(got - ref)) < 1e-5


def test_bad_config_rejected():
    from spikemlp.config import ConfigError
    with pytest.raises(ConfigError):
        NetworkConfig(c1=13, stage_layers=(1, 1))
    with pytest.raises(ConfigError):
        NetworkConfig.from_dict({"c1": 12, "bogus": 1})
