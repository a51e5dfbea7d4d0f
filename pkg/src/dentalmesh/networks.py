"""Network architectures and training losses.

ToothSegNet is the stage-1 graph segmentation network: a shared MLP lifts
the 15 per-cell features to 64 channels, a learned 64x64 feature transform
canonicalizes them, then two graph-pooling stages (EdgeConv over kNN
graphs, k=6 and a parallel k=6/k=12 pair at 512 channels) feed a dense
fusion of local, transformed, and globally pooled features into the
per-cell classification head. All pointwise convs carry batch norm and
ReLU except the final one.

PointHeatmapNet is the stage-2 regressor: a PointNet-style segmentation
trunk over the same 15 features with a sigmoid head, one output column per
landmark heatmap. GraphHeatmapNet reuses the ToothSegNet trunk with the
sigmoid head for the architecture comparison.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import BatchNormState, Parameter, Tensor
from .errors import CheckpointError

NUM_CLASSES = 15  # gingiva + 14 teeth
GDL_SMOOTH = 1e-5


# ---------------------------------------------------------------------------
# module plumbing

class Module:
    """Base with recursive parameter/buffer discovery in insertion order."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                out.append((path, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{path}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{path}.{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> list[tuple[str, BatchNormState]]:
        out = []
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, BatchNormState):
                out.append((path, value))
            elif isinstance(value, Module):
                out.extend(value.named_buffers(f"{path}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_buffers(f"{path}.{i}."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        for name, state in self.named_buffers():
            out[f"{name}.running_mean"] = state.mean
            out[f"{name}.running_var"] = state.var
            out[f"{name}.steps"] = np.array([float(state.steps)])
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        if set(arrays.keys()) != set(expected.keys()):
            missing = sorted(set(expected) - set(arrays))[:3]
            extra = sorted(set(arrays) - set(expected))[:3]
            raise CheckpointError(
                f"state keys do not match architecture (missing {missing}, extra {extra})"
            )
        for name, p in self.named_parameters():
            if arrays[name].shape != p.data.shape:
                raise CheckpointError(
                    f"parameter {name}: checkpoint shape {arrays[name].shape} "
                    f"!= model shape {p.data.shape}"
                )
            p.data = arrays[name].astype(np.float64).copy()
        for name, state in self.named_buffers():
            state.mean = arrays[f"{name}.running_mean"].reshape(state.mean.shape).copy()
            state.var = arrays[f"{name}.running_var"].reshape(state.var.shape).copy()
            state.steps = int(arrays[f"{name}.steps"][0])


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Conv1x1(Module):
    """Shared pointwise linear layer: every cell through the same weights."""

    def __init__(self, rng, cin: int, cout: int, name: str = "conv"):
        self.weight = Parameter(_glorot(rng, cin, cout), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, name: str = "bn"):
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), f"{name}.beta")
        self.state = BatchNormState(channels)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self.state, training)


class ConvBlock(Module):
    """Pointwise conv + batch norm + ReLU."""

    def __init__(self, rng, cin: int, cout: int, name: str = "block"):
        self.conv = Conv1x1(rng, cin, cout, name)
        self.bn = BatchNorm(cout, name)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ad.relu(self.bn(self.conv(x), training))


class Dense(Module):
    """Linear on the pooled (1, C) row; optionally ReLU."""

    def __init__(self, rng, cin: int, cout: int, name: str = "dense",
                 activation: bool = True):
        self.weight = Parameter(_glorot(rng, cin, cout), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias")
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.add(ad.matmul(x, self.weight), self.bias)
        return ad.relu(out) if self.activation else out


class EdgeConv(Module):
    """Single shared conv on (center - neighbor, center) pairs, BN, ReLU,
    then a per-cell max over the neighbor list.

    The conv is evaluated at cell level and gathered per edge (a linear map
    distributes over the subtraction), which cuts the matmul cost by the
    neighbor count against the naive per-edge form. An inference-only
    chunked path keeps peak memory flat on large meshes.
    """

    def __init__(self, rng, cin: int, cout: int, k: int, name: str = "edgeconv"):
        self.cin = cin
        self.k = k
        # rows 0..cin-1 act on the difference, rows cin..2cin-1 on the center
        self.weight = Parameter(_glorot(rng, 2 * cin, cout), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias")
        self.bn = BatchNorm(cout, name)

    def _split(self) -> tuple[Tensor, Tensor]:
        idx = np.arange(2 * self.cin)
        w_diff = ad.gather_rows(self.weight, idx[: self.cin])
        w_center = ad.gather_rows(self.weight, idx[self.cin :])
        return w_diff, w_center

    def __call__(self, x: Tensor, graph, training: bool) -> Tensor:
        nbrs = np.asarray(getattr(graph, "neighbors", graph), dtype=np.int64)
        if not training and not ad.grad_enabled():
            return Tensor(self._infer(x.data, nbrs))
        w_diff, w_center = self._split()
        p = ad.matmul(x, w_diff)
        a = ad.add(ad.add(p, ad.matmul(x, w_center)), self.bias)
        n, k = nbrs.shape
        src = np.repeat(np.arange(n, dtype=np.int64), k)
        edge = ad.sub(ad.gather_rows(a, src), ad.gather_rows(p, nbrs.reshape(-1)))
        edge = ad.relu(self.bn(edge, training))
        cout = edge.data.shape[1]
        return ad.max_over_axis(ad.reshape(edge, (n, k, cout)), axis=1)

    def _infer(self, x: np.ndarray, nbrs: np.ndarray) -> np.ndarray:
        w = self.weight.data
        p = x @ w[: self.cin]
        a = p + x @ w[self.cin :] + self.bias.data
        inv = 1.0 / np.sqrt(self.bn.state.var + 1e-5)
        rm = self.bn.state.mean
        gamma = self.bn.gamma.data
        beta = self.bn.beta.data
        n, k = nbrs.shape
        cout = w.shape[1]
        out = np.empty((n, cout), dtype=np.float64)
        chunk = max(1, int(2**22 // max(k * cout, 1)))
        for lo in range(0, n, chunk):
            hi = min(lo + chunk, n)
            e = a[lo:hi, None, :] - p[nbrs[lo:hi]]
            e = gamma * ((e - rm) * inv) + beta
            np.maximum(e, 0.0, out=e)
            out[lo:hi] = e.max(axis=1)
        return out


# ---------------------------------------------------------------------------
# feature transform

class FeatureTransform(Module):
    """Predicts a 64x64 matrix from the 64-channel features, PointNet style.

    Convs (64, 128, 1024), global max pool, dense (512, 256), and a final
    dense layer initialized to emit the identity matrix.
    """

    def __init__(self, rng, channels: int = 64):
        self.channels = channels
        self.conv1 = ConvBlock(rng, channels, 64, "ftm.conv1")
        self.conv2 = ConvBlock(rng, 64, 128, "ftm.conv2")
        self.conv3 = ConvBlock(rng, 128, 1024, "ftm.conv3")
        self.fc1 = Dense(rng, 1024, 512, "ftm.fc1")
        self.fc2 = Dense(rng, 512, 256, "ftm.fc2")
        self.out = Dense(rng, 256, channels * channels, "ftm.out", activation=False)
        self.out.weight.data[:] = 0.0
        self.out.bias.data = np.eye(channels, dtype=np.float64).reshape(-1)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = self.conv3(self.conv2(self.conv1(x, training), training), training)
        g = ad.global_max_pool(h)
        t = self.out(self.fc2(self.fc1(g)))
        return ad.reshape(t, (self.channels, self.channels))


# ---------------------------------------------------------------------------
# networks

class ToothSegNet(Module):
    """Stage-1 segmentation network; head selects softmax or sigmoid.

    forward() consumes the (N, 15) feature tensor plus the two kNN graphs
    (k=6 and k=12) and returns (N, out_channels). With the softmax head the
    rows are probability distributions over gingiva + 14 teeth. adjacency
    'dynamic' rebuilds the graphs in feature space per forward pass instead
    (ablation only) and ignores the supplied graphs.
    """

    uses_graphs = True

    def __init__(self, seed: int = 0, in_dim: int = 15,
                 out_channels: int = NUM_CLASSES, head: str = "softmax",
                 adjacency: str = "static"):
        if head not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown head {head!r}")
        if adjacency not in ("static", "dynamic"):
            raise ValueError(f"unknown adjacency mode {adjacency!r}")
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        self.out_channels = out_channels
        self.head = head
        self.adjacency = adjacency
        self.mlp1 = [ConvBlock(rng, in_dim, 64, "mlp1.0"),
                     ConvBlock(rng, 64, 64, "mlp1.1")]
        self.ftm = FeatureTransform(rng, 64)
        self.glm1 = EdgeConv(rng, 64, 64, k=6, name="glm1")
        self.mlp2 = [ConvBlock(rng, 64, 64, "mlp2.0"),
                     ConvBlock(rng, 64, 128, "mlp2.1"),
                     ConvBlock(rng, 128, 512, "mlp2.2")]
        self.glm2_k6 = EdgeConv(rng, 512, 512, k=6, name="glm2.k6")
        self.glm2_k12 = EdgeConv(rng, 512, 512, k=12, name="glm2.k12")
        self.glm2_fuse = ConvBlock(rng, 1024, 512, "glm2.fuse")
        self.mlp3 = [ConvBlock(rng, 1152, 256, "mlp3.0"),
                     ConvBlock(rng, 256, 128, "mlp3.1")]
        self.head_conv = Conv1x1(rng, 128, out_channels, "head")

    def arch_tag(self) -> str:
        return (f"tooth-seg-net/v1 in={self.in_dim} out={self.out_channels} "
                f"head={self.head} adjacency={self.adjacency}")

    def forward(self, features: Tensor, graph6=None, graph12=None,
                training: bool = False) -> Tensor:
        x = features if isinstance(features, Tensor) else Tensor(features)
        n = x.data.shape[0]
        if self.adjacency == "static" and (graph6 is None or graph12 is None):
            raise ValueError("static adjacency requires both kNN graphs")
        for block in self.mlp1:
            x = block(x, training)
        transform = self.ftm(x, training)
        x = ad.matmul(x, transform)
        if self.adjacency == "dynamic":
            graph6 = geometry.knn_graph(x.data, 6, space="feature-space")
        g1 = self.glm1(x, graph6, training)
        h = g1
        for block in self.mlp2:
            h = block(h, training)
        if self.adjacency == "dynamic":
            graph6 = geometry.knn_graph(h.data, 6, space="feature-space")
            graph12 = geometry.knn_graph(h.data, 12, space="feature-space")
        e6 = self.glm2_k6(h, graph6, training)
        e12 = self.glm2_k12(h, graph12, training)
        g2 = self.glm2_fuse(ad.concat([e6, e12], axis=1), training)
        pooled = ad.broadcast_tile(ad.global_max_pool(g2), n)
        fused = ad.concat([x, g1, g2, pooled], axis=1)
        for block in self.mlp3:
            fused = block(fused, training)
        logits = self.head_conv(fused)
        if self.head == "softmax":
            return ad.softmax_rows(logits)
        return ad.sigmoid(logits)

    __call__ = forward


class PointHeatmapNet(Module):
    """Stage-2 heatmap regressor: pointwise trunk, global context, sigmoid.

    Local convs (64, 64), trunk convs (64, 128, 1024), global max pool
    tiled back and concatenated with the 64-channel local features, head
    convs (512, 256, 128) and a final conv with sigmoid, one column per
    landmark of the tooth the model serves.
    """

    uses_graphs = False

    def __init__(self, seed: int = 0, in_dim: int = 15, out_channels: int = 1):
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        self.out_channels = out_channels
        self.local = [ConvBlock(rng, in_dim, 64, "local.0"),
                      ConvBlock(rng, 64, 64, "local.1")]
        self.trunk = [ConvBlock(rng, 64, 64, "trunk.0"),
                      ConvBlock(rng, 64, 128, "trunk.1"),
                      ConvBlock(rng, 128, 1024, "trunk.2")]
        self.headc = [ConvBlock(rng, 1088, 512, "head.0"),
                      ConvBlock(rng, 512, 256, "head.1"),
                      ConvBlock(rng, 256, 128, "head.2")]
        self.out = Conv1x1(rng, 128, out_channels, "out")

    def arch_tag(self) -> str:
        return f"point-heatmap-net/v1 in={self.in_dim} out={self.out_channels}"

    def forward(self, features: Tensor, training: bool = False) -> Tensor:
        x = features if isinstance(features, Tensor) else Tensor(features)
        n = x.data.shape[0]
        for block in self.local:
            x = block(x, training)
        h = x
        for block in self.trunk:
            h = block(h, training)
        pooled = ad.broadcast_tile(ad.global_max_pool(h), n)
        h = ad.concat([x, pooled], axis=1)
        for block in self.headc:
            h = block(h, training)
        return ad.sigmoid(self.out(h))

    __call__ = forward


def make_graph_heatmap_net(seed: int, out_channels: int,
                           adjacency: str = "static") -> ToothSegNet:
    """Segmentation trunk with a sigmoid heatmap head (architecture ablation)."""
    return ToothSegNet(seed=seed, out_channels=out_channels, head="sigmoid",
                       adjacency=adjacency)


# ---------------------------------------------------------------------------
# losses

def one_hot(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def generalized_dice_loss(probs: Tensor, target_onehot: np.ndarray,
                          smooth: float = GDL_SMOOTH) -> Tensor:
    """Generalized Dice loss with inverse squared class-volume weights.

    Classes absent from the target get weight 0 (their volume is zero and
    the inverse-square weight would be infinite). Value lies in [0, 1]; a
    perfect prediction scores 0.
    """
    target = np.asarray(target_onehot, dtype=np.float64)
    if probs.data.shape != target.shape:
        raise ValueError(
            f"probs shape {probs.data.shape} != target shape {target.shape}"
        )
    vol = target.sum(axis=0)
    weight = np.where(vol > 0, 1.0 / np.maximum(vol, 1.0) ** 2, 0.0)
    inter = ad.reduce_sum(ad.mul(probs, target), axis=0)
    total = ad.add(ad.reduce_sum(probs, axis=0), vol)
    num = ad.add(ad.mul(ad.reduce_sum(ad.mul(inter, weight)), 2.0), smooth)
    den = ad.add(ad.reduce_sum(ad.mul(total, weight)), smooth)
    return ad.sub(1.0, ad.div(num, den))


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over all entries."""
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ValueError(
            f"pred shape {pred.data.shape} != target shape {target.shape}"
        )
    diff = ad.sub(pred, target)
    return ad.reduce_mean(ad.mul(diff, diff))
