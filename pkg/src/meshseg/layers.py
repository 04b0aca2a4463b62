"""Network building blocks and the two-stream segmentation model.

The model runs two parallel streams over per-cell features: one on the
coordinate half of the descriptors (graph-attention aggregation) and one on
the normal half (graph max-pooling), both walking the same KNN graphs that
are rebuilt per layer from the coordinate stream's current features.  The
streams' multi-scale outputs are fused (norm-equalization + self-attention
gating) and a shared per-cell head emits class probabilities.

All ablation variants from the experiment grid are wired here; the variant
only changes the architecture, never anything about data handling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, DegenerateBatchError
from .knn import KnnGraph, build_knn
from .meshio import CellDescriptors

LEAKY_SLOPE = 0.01
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
STREAM_WIDTHS = (64, 128, 256)
FUSED_WIDTH = 512


def softmax_over_neighbors(scores: Tensor) -> Tensor:
    """Normalize (M, K, k) scores over the K neighbors, per channel."""
    return ad.softmax(scores, axis=1)


def init_weight(rng, d_in, d_out, scale=1.0):
    s = scale * np.sqrt(1.0 / d_in)
    return rng.uniform(-s, s, size=(d_in, d_out))


class Linear:
    """Per-cell affine map, i.e. a 1D convolution with kernel size 1."""

    def __init__(self, d_in, d_out, rng, scale=1.0, bias=None):
        self.d_in, self.d_out = d_in, d_out
        self.W = Tensor(init_weight(rng, d_in, d_out, scale), requires_grad=True)
        b = np.zeros(d_out) if bias is None else np.asarray(bias, dtype=float)
        self.b = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.d_in:
            raise ContractViolation(
                f"linear expects width {self.d_in}, got {x.data.shape[-1]}")
        return ad.matmul(x, self.W) + self.b

    def named_parameters(self, prefix):
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}

    def named_buffers(self, prefix):
        return {}


class BatchNorm:
    """Per-channel standardization over the rows of one mesh's forward pass.

    Train mode normalizes with batch statistics (biased variance) and updates
    running statistics with momentum 0.1; eval mode uses the running stats.
    """

    def __init__(self, d):
        self.d = d
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if train:
            if x.data.shape[0] < 2:
                raise DegenerateBatchError(
                    "batch norm in train mode needs at least 2 rows")
            out, mu, var = ad.batch_norm_train(x, self.gamma, self.beta,
                                               BN_EPS)
            self.running_mean *= 1.0 - BN_MOMENTUM
            self.running_mean += BN_MOMENTUM * mu
            self.running_var *= 1.0 - BN_MOMENTUM
            self.running_var += BN_MOMENTUM * var
            return out
        xhat = (x - Tensor(self.running_mean)) / Tensor(
            np.sqrt(self.running_var + BN_EPS))
        return xhat * self.gamma + self.beta

    def named_parameters(self, prefix):
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}

    def named_buffers(self, prefix):
        return {f"{prefix}.running_mean": self.running_mean,
                f"{prefix}.running_var": self.running_var}


class ConvBNRelu:
    """1D Conv (shared linear) + batch norm + LeakyReLU."""

    def __init__(self, d_in, d_out, rng):
        self.linear = Linear(d_in, d_out, rng)
        self.bn = BatchNorm(d_out)

    def __call__(self, x, train):
        return ad.leaky_relu(self.bn(self.linear(x), train), LEAKY_SLOPE)

    def named_parameters(self, prefix):
        return {**self.linear.named_parameters(prefix + ".linear"),
                **self.bn.named_parameters(prefix + ".bn")}

    def named_buffers(self, prefix):
        return self.bn.named_buffers(prefix + ".bn")


class InputTransform:
    """Learned d x d alignment of the raw per-cell input.

    A shared per-cell MLP (d -> 64 -> 128), a max-reduction over cells, and a
    dense map (128 -> 64 -> d*d) whose final layer starts at exactly the
    identity (zero weights, identity bias), so the transform is the identity
    at step 0.
    """

    def __init__(self, d, rng):
        self.d = d
        self.l1 = ConvBNRelu(d, 64, rng)
        self.l2 = ConvBNRelu(64, 128, rng)
        self.fc1 = Linear(128, 64, rng)
        self.fc2 = Linear(64, d * d, rng, scale=0.0,
                          bias=np.eye(d).ravel())

    def matrix(self, x: Tensor, train: bool) -> Tensor:
        h = self.l2(self.l1(x, train), train)
        g = ad.reshape(ad.max_(h, axis=0), (1, 128))
        t = self.fc2(ad.leaky_relu(self.fc1(g), LEAKY_SLOPE))
        return ad.reshape(t, (self.d, self.d))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return ad.matmul(x, self.matrix(x, train))

    def named_parameters(self, prefix):
        out = {}
        for name, sub in (("l1", self.l1), ("l2", self.l2),
                          ("fc1", self.fc1), ("fc2", self.fc2)):
            out.update(sub.named_parameters(f"{prefix}.{name}"))
        return out

    def named_buffers(self, prefix):
        return {**self.l1.named_buffers(prefix + ".l1"),
                **self.l2.named_buffers(prefix + ".l2")}


def _per_edge(fn, x3: Tensor, train) -> Tensor:
    """Apply a per-row block to a (M, K, d) tensor by flattening the edges."""
    m, k, d = x3.data.shape
    flat = ad.reshape(x3, (m * k, d))
    out = fn(flat, train)
    return ad.reshape(out, (m, k, out.data.shape[-1]))


def edge_affine(F: Tensor, graph: KnnGraph, lin: Linear,
                diff=False) -> Tensor:
    """Per-edge linear map without materializing the edge concatenation.

    With W split as [W1; W2] over the two concatenated halves,
    (f_i (+) f_ij) W + b  ==  (F W1 + b)[i] + (F W2)[ij], and the diff form
    ((f_i - f_ij) (+) f_ij) W + b uses W2 - W1 for the neighbor half.  This
    turns M*K-row matrix products into M-row ones.
    """
    W, b = lin.W, lin.b
    d = F.data.shape[1]
    if W.data.shape[0] != 2 * d:
        raise ContractViolation("edge map width must be twice the feature width")
    w_center = W.data[:d]
    w_neighbor = W.data[d:] - w_center if diff else W.data[d:]
    center = F.data @ w_center + b.data
    neighbor = F.data @ w_neighbor
    idx = graph.neighbor_indices
    out_data = center[:, None, :] + neighbor[idx]

    def bwd(g):
        k = g.shape[-1]
        d_center = g.sum(axis=1)
        d_neighbor = graph.segment_sum(g.reshape(-1, k))
        if b.requires_grad:
            b.accumulate_grad(d_center.sum(axis=0))
        if W.requires_grad:
            g1 = F.data.T @ d_center
            g2 = F.data.T @ d_neighbor
            if diff:
                g1 = g1 - g2
            W.accumulate_grad(np.concatenate([g1, g2], axis=0))
        if F.requires_grad:
            F.accumulate_grad(d_center @ w_center.T + d_neighbor @ w_neighbor.T)

    return ad.custom_op(out_data, (F, W, b), bwd, "edge_affine")


def calibrate_neighbors(F: Tensor, graph: KnnGraph, mlp: ConvBNRelu,
                        train: bool) -> Tensor:
    """Re-express each neighbor feature relative to its center:
    MLP(f_i (+) f_ij) for every edge, giving (M, K, k)."""
    pre = edge_affine(F, graph, mlp.linear)
    return _per_edge(lambda x, t: ad.leaky_relu(mlp.bn(x, t), LEAKY_SLOPE),
                     pre, train)


def attention_aggregate(F: Tensor, calibrated: Tensor, graph: KnnGraph,
                        att_lin: Linear) -> Tensor:
    """Convex per-channel combination of calibrated neighbor features.

    Scores come from a per-edge linear map of (f_i - f_ij) (+) f_ij followed
    by LeakyReLU, normalized over the K neighbors channel-wise.
    """
    scores = ad.leaky_relu(edge_affine(F, graph, att_lin, diff=True),
                           LEAKY_SLOPE)
    alpha = softmax_over_neighbors(scores)
    return ad.weighted_sum_neighbors(alpha, calibrated)


def maxpool_aggregate(calibrated: Tensor) -> Tensor:
    """Channel-wise max over the K calibrated neighbor features."""
    return ad.max_(calibrated, axis=1)


class GraphLayer:
    """One graph-convolution layer: calibrate neighbors, then aggregate by
    softmax attention or channel-wise max."""

    def __init__(self, d_in, d_out, agg, rng):
        if agg not in ("attention", "maxpool"):
            raise ContractViolation(f"unknown aggregation {agg!r}")
        self.agg = agg
        self.calib = ConvBNRelu(2 * d_in, d_out, rng)
        self.att_lin = Linear(2 * d_in, d_out, rng) if agg == "attention" else None

    def __call__(self, F: Tensor, graph: KnnGraph, train: bool) -> Tensor:
        calibrated = calibrate_neighbors(F, graph, self.calib, train)
        if self.agg == "attention":
            return attention_aggregate(F, calibrated, graph, self.att_lin)
        return maxpool_aggregate(calibrated)

    def named_parameters(self, prefix):
        out = self.calib.named_parameters(prefix + ".calib")
        if self.att_lin is not None:
            out.update(self.att_lin.named_parameters(prefix + ".att"))
        return out

    def named_buffers(self, prefix):
        return self.calib.named_buffers(prefix + ".calib")


def meshwise_normalize(fc: Tensor, fn: Tensor):
    """Rescale paired rows so both end up with the same Euclidean norm.

    delta_c = |f_n| / (|f_c| + |f_n|), delta_n = |f_c| / (|f_c| + |f_n|);
    when both norms are zero both factors fall back to 1/2.
    """
    if fc.data.shape[0] != fn.data.shape[0]:
        raise ContractViolation("row counts differ")
    nc = ad.sqrt(ad.sum_(fc * fc, axis=1, keepdims=True))
    nn = ad.sqrt(ad.sum_(fn * fn, axis=1, keepdims=True))
    s = nc + nn
    pos = s.data > 0.0
    s_safe = ad.where_mask(pos, s, Tensor(np.ones_like(s.data)))
    half = Tensor(np.full_like(s.data, 0.5))
    dc = ad.where_mask(pos, nn / s_safe, half)
    dn = ad.where_mask(pos, nc / s_safe, half)
    return fc * dc, fn * dn


class SelfAttentionFuse:
    """Gate the concatenated stream features element-wise:
    beta = ConvBNRelu(f_c (+) f_n), output beta (*) (f_c (+) f_n)."""

    def __init__(self, width, rng):
        self.mlp = ConvBNRelu(2 * width, 2 * width, rng)

    def __call__(self, fc: Tensor, fn: Tensor, train: bool) -> Tensor:
        cat = ad.concat([fc, fn], axis=-1)
        beta = self.mlp(cat, train)
        return beta * cat

    def named_parameters(self, prefix):
        return self.mlp.named_parameters(prefix + ".mlp")

    def named_buffers(self, prefix):
        return self.mlp.named_buffers(prefix + ".mlp")


class PredictHead:
    """Three Conv+BN+LeakyReLU stages, a plain linear map to C logits, then a
    row-wise softmax.  The final layer starts near zero so an untrained model
    predicts close to uniform."""

    def __init__(self, d_in, n_classes, rng):
        self.stages = [ConvBNRelu(d_in, 512, rng),
                       ConvBNRelu(512, 256, rng),
                       ConvBNRelu(256, 128, rng)]
        self.final = Linear(128, n_classes, rng, scale=0.01)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        for stage in self.stages:
            x = stage(x, train)
        return ad.softmax(self.final(x), axis=1)

    def named_parameters(self, prefix):
        out = {}
        for i, stage in enumerate(self.stages, start=1):
            out.update(stage.named_parameters(f"{prefix}.stage{i}"))
        out.update(self.final.named_parameters(prefix + ".final"))
        return out

    def named_buffers(self, prefix):
        out = {}
        for i, stage in enumerate(self.stages, start=1):
            out.update(stage.named_buffers(f"{prefix}.stage{i}"))
        return out


class Stream:
    """One branch: input transform plus three graph-convolution layers."""

    def __init__(self, d_in, agg, rng, layer_in_widths=None):
        self.transform = InputTransform(d_in, rng)
        ins = layer_in_widths or (d_in,) + STREAM_WIDTHS[:-1]
        self.layers = [GraphLayer(di, do, agg, rng)
                       for di, do in zip(ins, STREAM_WIDTHS)]

    def named_parameters(self, prefix):
        out = self.transform.named_parameters(prefix + ".transform")
        for i, layer in enumerate(self.layers, start=1):
            out.update(layer.named_parameters(f"{prefix}.layer{i}"))
        return out

    def named_buffers(self, prefix):
        out = self.transform.named_buffers(prefix + ".transform")
        for i, layer in enumerate(self.layers, start=1):
            out.update(layer.named_buffers(f"{prefix}.layer{i}"))
        return out


# ----------------------------------------------------------- variant grid

TWO_STREAM_AGGS = {
    "A+M": ("attention", "maxpool"),
    "M+M": ("maxpool", "maxpool"),
    "A+A": ("attention", "attention"),
    "M+A": ("maxpool", "attention"),
}

_ALIASES = {
    "full": "A+M",
    "H-fusion": "A+M",
    "C-only": "TSGCN-C",
    "N-only": "TSGCN-N",
    "single-stream": "TSGCN-S",
    "concat-fusion": "TSGCN-Concatenation",
    "norm-only": "TSGCN-Normalization",
    "attention-only": "TSGCN-Attention",
}

SINGLE_STREAM = {
    "TSGCN-C": ("coords", "attention"),
    "TSGCN-N": ("normals", "maxpool"),
    "TSGCN-S": ("both", "attention"),
}

FUSE_MODES = {
    "A+M": "norm_att", "M+M": "norm_att", "A+A": "norm_att",
    "M+A": "norm_att", "L-fusion": "norm_att",
    "TSGCN-Concatenation": "concat",
    "TSGCN-Normalization": "norm",
    "TSGCN-Attention": "att",
}

VARIANT_NAMES = sorted(set(list(TWO_STREAM_AGGS) + list(SINGLE_STREAM)
                           + list(FUSE_MODES) + list(_ALIASES)))


def canonical_variant(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in set(TWO_STREAM_AGGS) | set(SINGLE_STREAM) | set(FUSE_MODES):
        raise ContractViolation(f"unknown variant {name!r}")
    return name


@dataclass
class ForwardTrace:
    """Intermediate features kept around for tests and debugging."""
    graphs: list
    probs: Tensor


class SegmentationNet:
    """The full segmentation model, in any of the ablation wirings."""

    def __init__(self, n_classes, K=32, variant="full", rng=None):
        rng = rng or np.random.default_rng(0)
        self.n_classes = n_classes
        self.K = K
        self.variant = canonical_variant(variant)
        v = self.variant

        if v in SINGLE_STREAM:
            inp, agg = SINGLE_STREAM[v]
            d_in = 24 if inp == "both" else 12
            self.single_input = inp
            self.stream = Stream(d_in, agg, rng)
            self.fuse_mlp = ConvBNRelu(sum(STREAM_WIDTHS), FUSED_WIDTH, rng)
            self.head = PredictHead(FUSED_WIDTH, n_classes, rng)
        else:
            c_agg, n_agg = TWO_STREAM_AGGS.get(v, TWO_STREAM_AGGS["A+M"])
            self.low_fusion = v == "L-fusion"
            ins = None
            if self.low_fusion:
                # each later layer consumes both streams' previous outputs
                ins = (12, 2 * STREAM_WIDTHS[0], 2 * STREAM_WIDTHS[1])
            self.c_stream = Stream(12, c_agg, rng, layer_in_widths=ins)
            self.n_stream = Stream(12, n_agg, rng, layer_in_widths=ins)
            self.fuse_c = ConvBNRelu(sum(STREAM_WIDTHS), FUSED_WIDTH, rng)
            self.fuse_n = ConvBNRelu(sum(STREAM_WIDTHS), FUSED_WIDTH, rng)
            self.fuse_mode = FUSE_MODES[v]
            if self.fuse_mode in ("norm_att", "att"):
                self.att_fuse = SelfAttentionFuse(FUSED_WIDTH, rng)
            self.head = PredictHead(2 * FUSED_WIDTH, n_classes, rng)

    # -------------------------------------------------------- forward

    def forward(self, desc: CellDescriptors, train: bool,
                return_trace=False):
        if desc.coords.shape[0] < 2:
            raise ContractViolation("need at least 2 cells")
        if self.variant in SINGLE_STREAM:
            out = self._forward_single(desc, train)
        else:
            out = self._forward_two(desc, train)
        return out if return_trace else out.probs

    def _forward_single(self, desc, train):
        if self.single_input == "coords":
            x = desc.coords
        elif self.single_input == "normals":
            x = desc.normals
        else:
            x = np.hstack([desc.coords, desc.normals])
        cur = self.stream.transform(Tensor(x), train)
        feats, graphs = [], []
        for layer in self.stream.layers:
            graph = build_knn(cur.data, self.K)
            graphs.append(graph)
            cur = layer(cur, graph, train)
            feats.append(cur)
        fused = self.fuse_mlp(ad.concat(feats, axis=-1), train)
        return ForwardTrace(graphs, self.head(fused, train))

    def _forward_two(self, desc, train):
        cur_c = self.c_stream.transform(Tensor(desc.coords), train)
        cur_n = self.n_stream.transform(Tensor(desc.normals), train)
        feats_c, feats_n, graphs = [], [], []
        n_layers = len(self.c_stream.layers)
        for l in range(n_layers):
            graph = build_knn(cur_c.data, self.K)
            graphs.append(graph)
            oc = self.c_stream.layers[l](cur_c, graph, train)
            on = self.n_stream.layers[l](cur_n, graph, train)
            feats_c.append(oc)
            feats_n.append(on)
            if self.low_fusion and l + 1 < n_layers:
                cur_c = cur_n = ad.concat([oc, on], axis=-1)
            else:
                cur_c, cur_n = oc, on
        fc = self.fuse_c(ad.concat(feats_c, axis=-1), train)
        fn = self.fuse_n(ad.concat(feats_n, axis=-1), train)
        mode = self.fuse_mode
        if mode == "norm_att":
            hc, hn = meshwise_normalize(fc, fn)
            h = self.att_fuse(hc, hn, train)
        elif mode == "norm":
            hc, hn = meshwise_normalize(fc, fn)
            h = ad.concat([hc, hn], axis=-1)
        elif mode == "att":
            h = self.att_fuse(fc, fn, train)
        else:
            h = ad.concat([fc, fn], axis=-1)
        return ForwardTrace(graphs, self.head(h, train))

    # ---------------------------------------------------- param access

    def named_parameters(self):
        out = {}
        if self.variant in SINGLE_STREAM:
            out.update(self.stream.named_parameters("stream"))
            out.update(self.fuse_mlp.named_parameters("fuse"))
        else:
            out.update(self.c_stream.named_parameters("c_stream"))
            out.update(self.n_stream.named_parameters("n_stream"))
            out.update(self.fuse_c.named_parameters("fuse_c"))
            out.update(self.fuse_n.named_parameters("fuse_n"))
            if self.fuse_mode in ("norm_att", "att"):
                out.update(self.att_fuse.named_parameters("att_fuse"))
        out.update(self.head.named_parameters("head"))
        return out

    def named_buffers(self):
        out = {}
        if self.variant in SINGLE_STREAM:
            out.update(self.stream.named_buffers("stream"))
            out.update(self.fuse_mlp.named_buffers("fuse"))
        else:
            out.update(self.c_stream.named_buffers("c_stream"))
            out.update(self.n_stream.named_buffers("n_stream"))
            out.update(self.fuse_c.named_buffers("fuse_c"))
            out.update(self.fuse_n.named_buffers("fuse_n"))
            if self.fuse_mode in ("norm_att", "att"):
                out.update(self.att_fuse.named_buffers("att_fuse"))
        out.update(self.head.named_buffers("head"))
        return out
