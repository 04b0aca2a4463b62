"""Checkpoint serialization round-trips."""

import numpy as np
import pytest

from meshseg.checkpoint import load_checkpoint, save_checkpoint
from meshseg.errors import ContractViolation
from meshseg.layers import SegmentationNet
from meshseg.meshio import CellDescriptors
from meshseg.optim import AdamState


def small_net(variant="full", seed=0):
    return SegmentationNet(3, K=4, variant=variant,
                           rng=np.random.default_rng(seed))


def random_descriptors(m, seed=0):
    rng = np.random.default_rng(seed)
    return CellDescriptors(coords=rng.normal(size=(m, 12)),
                           normals=rng.normal(size=(m, 12)))


@pytest.mark.parametrize("variant", ["full", "TSGCN-N", "L-fusion"])
def test_roundtrip_bitwise(tmp_path, variant):
    net = small_net(variant)
    # move running stats off their init values so they are actually tested
    desc = random_descriptors(16, seed=1)
    net.forward(desc, train=True)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, net)
    net2, adam = load_checkpoint(path)
    assert adam is None
    assert net2.variant == net.variant
    assert (net2.n_classes, net2.K) == (net.n_classes, net.K)
    p1, p2 = net.named_parameters(), net2.named_parameters()
    assert p1.keys() == p2.keys()
    for name in p1:
        np.testing.assert_array_equal(p1[name].data, p2[name].data)
    b1, b2 = net.named_buffers(), net2.named_buffers()
    assert b1.keys() == b2.keys()
    for name in b1:
        np.testing.assert_array_equal(b1[name], b2[name])
    # the restored model predicts identically in eval mode
    np.testing.assert_array_equal(net.forward(desc, train=False).data,
                                  net2.forward(desc, train=False).data)


def test_roundtrip_with_optimizer_state(tmp_path):
    net = small_net()
    params = net.named_parameters()
    state = AdamState(params)
    state.step = 7
    rng = np.random.default_rng(2)
    for name in state.m:
        state.m[name][:] = rng.normal(size=state.m[name].shape)
        state.v[name][:] = rng.random(size=state.v[name].shape)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, net, adam=state)
    _, state2 = load_checkpoint(path)
    assert state2.step == 7
    for name in state.m:
        np.testing.assert_array_equal(state.m[name], state2.m[name])
        np.testing.assert_array_equal(state.v[name], state2.v[name])


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(ContractViolation):
        load_checkpoint(path)


def test_truncated_file_rejected(tmp_path):
    net = small_net()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, net)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises((ContractViolation, Exception)):
        load_checkpoint(path)
