import struct
from dataclasses import replace

import numpy as np
import pytest
import torch

from cpca.checkpoint import (Checkpoint, config_digest, decode, encode, load_checkpoint,
                             pack_state, restore_bank, restore_model, restore_optimizer,
                             save_checkpoint)
from cpca.errors import (CheckpointCorruptError, CheckpointDigestError, CheckpointError,
                         CheckpointVersionError)
from cpca.model import ArchConfig, init_params
from cpca.optim import SGD
from cpca.proto_bank import PrototypeBank

ARCH = ArchConfig(feature_dim=4, widths=(8,), num_classes=3)


def _ckpt():
    net = init_params(ARCH)
    bank = PrototypeBank(torch.randn(3, 4, dtype=torch.float64), torch.tensor([True, True, False]),
                         5, 10, 0.9, 0.8)
    opt = SGD(list(net.named_parameters()))
    for b in opt.buffers.values():
        b.normal_()
    return net, bank, opt, Checkpoint(pack_state(net, bank, opt), 5, "adapt", config_digest(ARCH),
                                      {"inference_mode": "concat"})


def test_roundtrip_is_byte_identical(tmp_path):
    *_, ck = _ckpt()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, ck)
    save_checkpoint(p2, load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes()[:4] == b"CPCA"
    assert not list(tmp_path.glob("*.tmp"))


def test_restore_everything(tmp_path):
    net, bank, opt, ck = _ckpt()
    save_checkpoint(tmp_path / "c", ck)
    back = load_checkpoint(tmp_path / "c", config_digest(ARCH))
    assert back.iteration == 5 and back.phase == "adapt" and back.meta["inference_mode"] == "concat"
    net2 = restore_model(init_params(replace(ARCH, seed=9)), back.tensors)
    assert all(torch.equal(a, b) for a, b in zip(net.parameters(), net2.parameters()))
    bank2 = restore_bank(back.tensors)
    assert torch.equal(bank2.prototypes, bank.prototypes)
    assert bank2.valid.tolist() == [True, True, False] and (bank2.t, bank2.T) == (5, 10)
    opt2 = restore_optimizer(SGD(list(net2.named_parameters())), back.tensors)
    assert all(torch.equal(opt.buffers[n], opt2.buffers[n]) for n in opt.buffers)


def test_truncated_is_corrupt(tmp_path):
    *_, ck = _ckpt()
    data = encode(ck)
    for cut in (3, 10, len(data) // 2, len(data) - 1):
        with pytest.raises(CheckpointCorruptError):
            decode(data[:cut])
    with pytest.raises(CheckpointCorruptError):
        decode(data + b"\0")
    with pytest.raises(CheckpointCorruptError):
        decode(b"XXXX" + data[4:])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_version_mismatch():
    *_, ck = _ckpt()
    data = bytearray(encode(ck))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(CheckpointVersionError) as err:
        decode(bytes(data))
    assert err.value.code == "version"


def test_digest_mismatch_for_other_num_classes(tmp_path):
    *_, ck = _ckpt()
    save_checkpoint(tmp_path / "c", ck)
    with pytest.raises(CheckpointDigestError) as err:
        load_checkpoint(tmp_path / "c", config_digest(replace(ARCH, num_classes=5)))
    assert err.value.code == "digest"
    # seed is not part of the architecture digest
    assert config_digest(replace(ARCH, seed=3)) == config_digest(ARCH)


def test_error_codes_are_distinct():
    codes = {CheckpointCorruptError.code, CheckpointVersionError.code, CheckpointDigestError.code}
    assert len(codes) == 3
    assert all(issubclass(c, CheckpointError) for c in
               (CheckpointCorruptError, CheckpointVersionError, CheckpointDigestError))


def test_model_architecture_mismatch():
    *_, ck = _ckpt()
    with pytest.raises(CheckpointCorruptError):
        restore_model(init_params(replace(ARCH, widths=(8, 8))), ck.tensors)


def test_float32_values_survive_exactly():
    net = init_params(ARCH)
    net2 = restore_model(init_params(replace(ARCH, seed=4)), decode(encode(
        Checkpoint(pack_state(net)))).tensors)
    for a, b in zip(net.state_dict().values(), net2.state_dict().values()):
        assert a.dtype == b.dtype and torch.equal(a, b)
    assert np.asarray(pack_state(net)["model.head_c.weight"]).dtype == np.float64
