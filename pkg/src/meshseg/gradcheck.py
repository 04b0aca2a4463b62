"""Central finite-difference verification of every layer's gradients.

Shared by the test suite and the `meshseg gradcheck` command.  Each check
builds a small random instance, differentiates a random scalar projection of
the output, and compares against central differences (h = 1e-5) coordinate
by coordinate on a sampled subset.  Inputs are jittered away from kinks
(LeakyReLU zeros, max-pool ties).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .knn import build_knn
from .layers import (BatchNorm, GraphLayer, Linear, SegmentationNet,
                     SelfAttentionFuse, meshwise_normalize,
                     softmax_over_neighbors)
from .meshio import CellDescriptors

H = 1e-5
TOL = 1e-4


def fd_check(make_loss, tensors: dict[str, Tensor], rng,
             n_coords=8, h=H) -> float:
    """Max relative error between tape gradients and central differences.

    make_loss is re-evaluated from the tensors' current data, so it must
    rebuild the computation each call.
    """
    with Tape() as tape:
        loss = make_loss()
        tape.backward(loss)
    worst = 0.0
    for t in tensors.values():
        analytic = np.zeros(t.data.size) if t.grad is None \
            else t.grad.ravel().copy()
        size = t.data.size
        coords = rng.choice(size, size=min(n_coords, size), replace=False)
        a = analytic[coords]
        f = np.empty_like(a)
        flat = t.data.ravel()
        for out_i, ci in enumerate(coords):
            orig = flat[ci]

            def central(step):
                flat[ci] = orig + step
                lp = float(make_loss().data)
                flat[ci] = orig - step
                lm = float(make_loss().data)
                flat[ci] = orig
                return (lp - lm) / (2 * step)

            # Richardson extrapolation of the central difference removes the
            # O(h^2) truncation term, which otherwise dominates on deep
            # compositions with large third derivatives
            f[out_i] = (4.0 * central(h / 2) - central(h)) / 3.0
        # the 1e-6 floor absorbs central-difference noise (~1e-11 at h=1e-5)
        # on coordinates whose true gradient is identically zero, e.g. a bias
        # feeding straight into batch norm
        err = np.max(np.abs(a - f)) / (np.max(np.abs(a)) + np.max(np.abs(f))
                                       + 1e-6)
        worst = max(worst, err)
    return worst


def _proj_loss(out: Tensor, R: np.ndarray) -> Tensor:
    return ad.sum_(out * Tensor(R))


def check_linear(rng):
    x = Tensor(rng.normal(size=(8, 5)), requires_grad=True)
    lin = Linear(5, 4, rng)
    R = rng.normal(size=(8, 4))
    tensors = {"x": x, **lin.named_parameters("lin")}
    return fd_check(lambda: _proj_loss(lin(x), R), tensors, rng)


def check_batch_norm(rng):
    x = Tensor(rng.normal(size=(9, 4)), requires_grad=True)
    bn = BatchNorm(4)
    bn.gamma.data = rng.normal(1.0, 0.2, size=4)
    bn.beta.data = rng.normal(size=4)
    R = rng.normal(size=(9, 4))
    tensors = {"x": x, **bn.named_parameters("bn")}
    return fd_check(lambda: _proj_loss(bn(x, train=True), R), tensors, rng)


def check_leaky_relu(rng):
    vals = rng.normal(size=(6, 3))
    vals += np.sign(vals) * 0.05  # keep clear of the kink
    x = Tensor(vals, requires_grad=True)
    R = rng.normal(size=(6, 3))
    return fd_check(lambda: _proj_loss(ad.leaky_relu(x, 0.01), R),
                    {"x": x}, rng)


def check_softmax_over_neighbors(rng):
    x = Tensor(rng.normal(size=(4, 5, 3)), requires_grad=True)
    R = rng.normal(size=(4, 5, 3))
    return fd_check(lambda: _proj_loss(softmax_over_neighbors(x), R),
                    {"x": x}, rng)


def _graph_layer_err(rng, agg):
    m, d_in, d_out, k = 10, 6, 8, 3
    F = Tensor(rng.normal(size=(m, d_in)), requires_grad=True)
    graph = build_knn(F.data, k)
    layer = GraphLayer(d_in, d_out, agg, rng)
    R = rng.normal(size=(m, d_out))
    tensors = {"F": F, **layer.named_parameters("layer")}
    # graph is frozen here: its dependence on F is piecewise constant
    return fd_check(lambda: _proj_loss(layer(F, graph, train=True), R),
                    tensors, rng)


def check_attention_aggregate(rng):
    return _graph_layer_err(rng, "attention")


def check_maxpool_aggregate(rng):
    return _graph_layer_err(rng, "maxpool")


def check_meshwise_normalize(rng):
    fc = Tensor(rng.normal(size=(7, 9)) + 0.5, requires_grad=True)
    fn = Tensor(rng.normal(size=(7, 9)) - 0.5, requires_grad=True)
    R = rng.normal(size=(7, 18))

    def loss():
        a, b = meshwise_normalize(fc, fn)
        return _proj_loss(ad.concat([a, b], axis=-1), R)

    return fd_check(loss, {"fc": fc, "fn": fn}, rng)


def check_self_attention_fuse(rng):
    fuse = SelfAttentionFuse(6, rng)
    fc = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    fn = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    R = rng.normal(size=(5, 12))
    tensors = {"fc": fc, "fn": fn, **fuse.named_parameters("fuse")}
    return fd_check(lambda: _proj_loss(fuse(fc, fn, train=True), R),
                    tensors, rng)


def check_cross_entropy(rng):
    logits = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    labels = rng.integers(0, 4, size=6)

    def loss():
        return ad.cross_entropy(ad.softmax(logits, axis=1), labels)

    return fd_check(loss, {"logits": logits}, rng)


def check_full_network(rng, n_cells=24, n_tensors=12):
    desc = CellDescriptors(coords=rng.normal(size=(n_cells, 12)),
                           normals=rng.normal(size=(n_cells, 12)))
    labels = rng.integers(0, 4, size=n_cells)
    net = SegmentationNet(4, K=5, variant="full", rng=rng)

    def loss():
        return ad.cross_entropy(net.forward(desc, train=True), labels)

    params = net.named_parameters()
    names = sorted(params)
    picked = list(rng.choice(len(names), size=min(n_tensors, len(names)),
                             replace=False))
    chosen = {names[i]: params[names[i]] for i in picked}
    chosen["head.final.W"] = params["head.final.W"]
    return fd_check(loss, chosen, rng, n_coords=5)


ALL_CHECKS = [
    ("linear", check_linear),
    ("batch_norm", check_batch_norm),
    ("leaky_relu", check_leaky_relu),
    ("softmax_over_neighbors", check_softmax_over_neighbors),
    ("attention_aggregate", check_attention_aggregate),
    ("maxpool_aggregate", check_maxpool_aggregate),
    ("meshwise_normalize", check_meshwise_normalize),
    ("self_attention_fuse", check_self_attention_fuse),
    ("cross_entropy", check_cross_entropy),
    ("full_network", check_full_network),
]


def run_all(seed=0):
    """Run every check; returns [(name, max_rel_err, passed)]."""
    results = []
    for name, fn in ALL_CHECKS:
        err = fn(np.random.default_rng(seed))
        results.append((name, err, err < TOL))
    return results
