import struct
import zlib

import numpy as np
import pytest

from sonores.network import NetworkConfig, build_network
from sonores.tensor import Tensor
from sonores.weights_io import (
    WeightsCorruptError,
    WeightsFormatError,
    WeightsShapeError,
    load_weights,
    read_weights_file,
    save_weights,
)


def micro_cfg(seed=0):
    return NetworkConfig(
        input_channels=3,
        input_size=16,
        block_kind="basic",
        stage_depths=(1, 1, 1, 1),
        stage_widths=(2, 2, 2, 2),
        dense_units=4,
        frozen_stages=frozenset(),
        seed=seed,
    )


def test_roundtrip_forward_bit_exact(tmp_path):
    net = build_network(micro_cfg(seed=3))
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 16, 16)).astype(np.float32))
    before = net.forward(x).data.copy()
    path = tmp_path / "net.w"
    save_weights(net, path)
    other = build_network(micro_cfg(seed=99))
    load_weights(path, other)
    after = other.forward(x).data
    assert np.array_equal(before, after)


def test_running_stats_roundtrip(tmp_path):
    net = build_network(micro_cfg())
    net.forward(
        Tensor(np.random.default_rng(1).normal(size=(4, 3, 16, 16)).astype(np.float32)),
        training=True,
        rng=np.random.default_rng(2),
    )
    path = tmp_path / "net.w"
    save_weights(net, path)
    other = build_network(micro_cfg(seed=50))
    load_weights(path, other)
    for name, bn in net.bn_states.items():
        assert np.array_equal(bn.running_mean, other.bn_states[name].running_mean)
        assert np.array_equal(bn.running_var, other.bn_states[name].running_var)


def test_shape_mismatch_names_tensor(tmp_path):
    net = build_network(micro_cfg())
    path = tmp_path / "net.w"
    save_weights(net, path)
    tensors = read_weights_file(path)
    # rewrite independently with one tensor shape altered
    victim = "head.dense1.weight"
    tensors[victim] = np.zeros((3, 3), dtype=np.float32)
    bad = tmp_path / "bad.w"
    _write_file(bad, tensors)
    with pytest.raises(WeightsShapeError) as exc:
        load_weights(bad, build_network(micro_cfg()))
    assert victim in str(exc.value)


def test_crc_corruption_detected(tmp_path):
    net = build_network(micro_cfg())
    path = tmp_path / "net.w"
    save_weights(net, path)
    blob = bytearray(path.read_bytes())
    blob[40] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(WeightsCorruptError):
        read_weights_file(path)


def test_bad_magic_and_version_rejected(tmp_path):
    path = tmp_path / "junk.w"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(WeightsFormatError):
        read_weights_file(path)

    net = build_network(micro_cfg())
    good = tmp_path / "net.w"
    save_weights(net, good)
    blob = bytearray(good.read_bytes())
    struct.pack_into("<I", blob, 4, 999)  # version
    body = bytes(blob[:-4])
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    with pytest.raises(WeightsFormatError):
        read_weights_file(path)


def _write_file(path, tensors):
    """Independent writer following the published layout (not save_weights)."""
    out = bytearray()
    out += b"SNRW"
    out += struct.pack("<II", 1, len(tensors))
    for name, arr in tensors.items():
        enc = name.encode("utf-8")
        out += struct.pack("<I", len(enc)) + enc
        out += struct.pack("<I", arr.ndim)
        for d in arr.shape:
            out += struct.pack("<I", d)
        out += arr.astype("<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    path.write_bytes(bytes(out))


def test_externally_produced_file_loads_and_runs(tmp_path):
    # pretrained-import path: a third-party writer fills every tensor with
    # constants; the file must load and drive a forward pass
    net = build_network(micro_cfg())
    template = {
        name: np.full(arr.shape, 0.01, dtype=np.float32)
        for name, arr in _collect(net).items()
    }
    for name in template:
        if name.endswith("running_var"):
            template[name][:] = 1.0
    path = tmp_path / "external.w"
    _write_file(path, template)
    load_weights(path, net)
    assert np.allclose(net.params["stem.conv.kernel"].data, 0.01)
    probs = net.forward(Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32)))
    assert 0.0 < probs.item() < 1.0


def _collect(net):
    out = {name: p.data for name, p in net.params.items()}
    for name, bn in net.bn_states.items():
        out[f"{name}.running_mean"] = bn.running_mean
        out[f"{name}.running_var"] = bn.running_var
    return out
