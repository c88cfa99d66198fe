"""The completion network: dynamic-graph feature encoder, multi-resolution
latent assembly, point pyramid decoder, and the GAN discriminator.

The generator encodes the input cloud at three farthest-point-sampled
resolutions (N, N/2, N/4) with stacks of dynamic edge-convolution layers,
concatenates max-pooled features of the last four layers of every stack
into the latent vector, and decodes coarse/middle/fine point sets by
expanding parent points with predicted child offsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .geom import fps_sample, fps_seed_index, knn

DEFAULT_LAYER_DIMS = (64, 128, 256, 512, 1024)
DEFAULT_DISC_DIMS = (64, 64, 128, 256)
DEFAULT_DISC_CLASSIFIER = (256, 128, 16, 1)


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters; defaults are the production scale,
    toy overrides are allowed everywhere."""

    k: int = 20
    layer_dims: tuple = DEFAULT_LAYER_DIMS
    n_in: int = 8192
    m_out: int = 8192
    m1: int = 2048
    m2: int = 4096
    disc_dims: tuple = DEFAULT_DISC_DIMS
    disc_classifier: tuple = DEFAULT_DISC_CLASSIFIER
    blocks: tuple = (2, 2, 2)

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        object.__setattr__(self, "disc_dims", tuple(int(d) for d in self.disc_dims))
        object.__setattr__(self, "disc_classifier", tuple(int(d) for d in self.disc_classifier))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if len(self.layer_dims) < 2:
            raise ValueError("need at least 2 encoder layers")
        if self.n_in % 4 != 0:
            raise ValueError("input size must be divisible by 4")
        if self.m_out % self.m2 != 0 or self.m2 % self.m1 != 0:
            raise ValueError("output sizes must nest: m1 | m2 | m_out")
        if self.k >= self.n_in // 4:
            raise ValueError("k must be smaller than the smallest resolution")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if len(self.blocks) != 3 or any(b < 1 for b in self.blocks):
            raise ValueError("blocks must be three positive counts")
        if self.disc_classifier[-1] != 1:
            raise ValueError("discriminator classifier must end in a single logit")

    @property
    def resolutions(self) -> tuple:
        return (self.n_in, self.n_in // 2, self.n_in // 4)

    @property
    def pooled_dims(self) -> tuple:
        """Layer widths that get max-pooled into the latent (last four)."""
        return self.layer_dims[-4:]

    @property
    def latent_per_resolution(self) -> int:
        return sum(self.pooled_dims)

    @property
    def latent_total(self) -> int:
        return 3 * self.latent_per_resolution

    @property
    def fc_widths(self) -> tuple:
        """Decoder trunk widths; the paper-scale config yields (1920, 1024, 512)."""
        return (self.latent_per_resolution, self.layer_dims[-1], self.layer_dims[-2])

    @property
    def disc_latent(self) -> int:
        """Pooled discriminator latent width (last three stack layers)."""
        return sum(self.disc_dims[-3:])

    def to_dict(self) -> dict:
        return {
            "k": self.k, "layer_dims": list(self.layer_dims),
            "n_in": self.n_in, "m_out": self.m_out, "m1": self.m1, "m2": self.m2,
            "disc_dims": list(self.disc_dims),
            "disc_classifier": list(self.disc_classifier),
            "blocks": list(self.blocks),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkConfig":
        return cls(
            k=doc["k"], layer_dims=tuple(doc["layer_dims"]),
            n_in=doc["n_in"], m_out=doc["m_out"], m1=doc["m1"], m2=doc["m2"],
            disc_dims=tuple(doc["disc_dims"]),
            disc_classifier=tuple(doc["disc_classifier"]),
            blocks=tuple(doc["blocks"]),
        )


def _kaiming(rng, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


@dataclass
class EdgeConvLayer:
    """One dynamic edge-convolution layer: shared linear map over
    [x_i, x_j - x_i] edges, max aggregation, batch norm, ReLU.

    No bias on the linear map: the following batch norm would cancel a
    per-channel constant exactly (beta provides the shift instead).
    """

    weight: Tensor
    gamma: Tensor
    beta: Tensor
    bn: BatchNormState

    @classmethod
    def create(cls, rng, d_in, d_out, dtype=np.float32) -> "EdgeConvLayer":
        return cls(
            weight=ad.parameter(_kaiming(rng, 2 * d_in, d_out, dtype), dtype=dtype),
            gamma=ad.parameter(np.ones(d_out, dtype=dtype), dtype=dtype),
            beta=ad.parameter(np.zeros(d_out, dtype=dtype), dtype=dtype),
            bn=BatchNormState.create(d_out, dtype=dtype),
        )


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, rng, d_in, d_out, dtype=np.float32) -> "Linear":
        bound = 1.0 / np.sqrt(d_in)
        return cls(
            weight=ad.parameter(_kaiming(rng, d_in, d_out, dtype), dtype=dtype),
            bias=ad.parameter(rng.uniform(-bound, bound, size=d_out).astype(dtype), dtype=dtype),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


@dataclass
class GeneratorWeights:
    """All learnable generator state: three per-resolution edge-conv
    stacks, the decoder trunk, and the coordinate heads."""

    stacks: list          # [resolution][layer] of EdgeConvLayer
    fc1: Linear
    fc2: Linear
    fc3: Linear
    head_coarse: Linear
    head_middle: Linear
    head_fine: Linear

    def named_parameters(self):
        for r, stack in enumerate(self.stacks):
            for l, layer in enumerate(stack):
                yield f"gen.stack{r}.layer{l}.weight", layer.weight
                yield f"gen.stack{r}.layer{l}.gamma", layer.gamma
                yield f"gen.stack{r}.layer{l}.beta", layer.beta
        for name in ("fc1", "fc2", "fc3", "head_coarse", "head_middle", "head_fine"):
            lin = getattr(self, name)
            yield f"gen.{name}.weight", lin.weight
            yield f"gen.{name}.bias", lin.bias

    def named_buffers(self):
        for r, stack in enumerate(self.stacks):
            for l, layer in enumerate(stack):
                yield f"gen.stack{r}.layer{l}.running_mean", layer.bn, "running_mean"
                yield f"gen.stack{r}.layer{l}.running_var", layer.bn, "running_var"

    def parameters(self):
        return [t for _, t in self.named_parameters()]


@dataclass
class DiscriminatorWeights:
    stack: list           # EdgeConvLayer list
    classifier: list      # Linear list, last one outputs the logit

    def named_parameters(self):
        for l, layer in enumerate(self.stack):
            yield f"disc.layer{l}.weight", layer.weight
            yield f"disc.layer{l}.gamma", layer.gamma
            yield f"disc.layer{l}.beta", layer.beta
        for i, lin in enumerate(self.classifier):
            yield f"disc.fc{i}.weight", lin.weight
            yield f"disc.fc{i}.bias", lin.bias

    def named_buffers(self):
        for l, layer in enumerate(self.stack):
            yield f"disc.layer{l}.running_mean", layer.bn, "running_mean"
            yield f"disc.layer{l}.running_var", layer.bn, "running_var"

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def init_generator(cfg: NetworkConfig, rng, dtype=np.float32) -> GeneratorWeights:
    stacks = []
    for _ in range(3):
        stack = []
        d_in = 3
        for d_out in cfg.layer_dims:
            stack.append(EdgeConvLayer.create(rng, d_in, d_out, dtype))
            d_in = d_out
        stacks.append(stack)
    w1, w2, w3 = cfg.fc_widths
    return GeneratorWeights(
        stacks=stacks,
        fc1=Linear.create(rng, cfg.latent_total, w1, dtype),
        fc2=Linear.create(rng, w1, w2, dtype),
        fc3=Linear.create(rng, w2, w3, dtype),
        head_coarse=Linear.create(rng, w3, cfg.m1 * 3, dtype),
        head_middle=Linear.create(rng, w2, cfg.m2 * 3, dtype),
        head_fine=Linear.create(rng, w1, cfg.m_out * 3, dtype),
    )


def init_discriminator(cfg: NetworkConfig, rng, dtype=np.float32) -> DiscriminatorWeights:
    stack = []
    d_in = 3
    for d_out in cfg.disc_dims:
        stack.append(EdgeConvLayer.create(rng, d_in, d_out, dtype))
        d_in = d_out
    classifier = []
    d_in = cfg.disc_latent
    for d_out in cfg.disc_classifier:
        classifier.append(Linear.create(rng, d_in, d_out, dtype))
        d_in = d_out
    return DiscriminatorWeights(stack=stack, classifier=classifier)


def edge_features(features: Tensor, neighbors: np.ndarray, layer: EdgeConvLayer) -> Tensor:
    """Per-edge vectors: shared linear map over [x_i, x_j - x_i].

    features is (n, d); neighbors is the (n, k) index array of each
    point's graph neighbors. Returns (n, k, d_out).

    The map factors as x_i @ W_top + (x_j - x_i) @ W_bot, evaluated as two
    per-point products instead of one per-edge product (k times cheaper).
    """
    n, d = features.shape
    k = neighbors.shape[1]
    w_top = ad.slice_rows(layer.weight, 0, d)
    w_bot = ad.slice_rows(layer.weight, d, 2 * d)
    center = ad.sub(ad.matmul(features, w_top), ad.matmul(features, w_bot))  # (x_i W_top - x_i W_bot)
    relative = ad.matmul(features, w_bot)
    center_idx = np.repeat(np.arange(n), k).reshape(n, k)
    return ad.add(ad.gather_rows(relative, neighbors),
                  ad.gather_rows(center, center_idx))


def dgcfe_layer(features: Tensor, k: int, layer: EdgeConvLayer,
                training: bool, update_running: bool = True) -> Tensor:
    """One dynamic-graph layer: k-NN is recomputed in the current feature
    space, edge features are max-aggregated over neighbors, then batch
    norm and ReLU."""
    n = features.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be below the point count {n}")
    neighbors = knn(features.data, k)
    edges = edge_features(features, neighbors, layer)
    pooled = ad.reduce_max(edges, axis=1)
    normed = ad.batch_norm(pooled, layer.gamma, layer.beta, layer.bn,
                           training=training, update_running=update_running)
    return ad.relu(normed)


def _run_stack(points: np.ndarray, stack, k: int, training: bool,
               update_running: bool, pooled_count: int) -> Tensor:
    """Run an edge-conv stack and concat the point-pooled outputs of the
    last ``pooled_count`` layers into one feature vector."""
    feats = ad.constant(points.astype(stack[0].weight.dtype))
    outputs = []
    for layer in stack:
        feats = dgcfe_layer(feats, k, layer, training, update_running)
        outputs.append(feats)
    pooled = [ad.reduce_max(t, axis=0) for t in outputs[-pooled_count:]]
    return ad.concat(pooled, axis=0)


def mrdg_encode(points: np.ndarray, gw: GeneratorWeights, cfg: NetworkConfig,
                training: bool = False, update_running: bool = True) -> Tensor:
    """Multi-resolution encoding into the latent vector.

    The cloud is FPS-downsampled twice (N -> N/2 -> N/4, seeded at the
    lexicographically smallest point so encoding is permutation
    invariant); each resolution runs its own layer stack.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) != cfg.n_in:
        raise ValueError(f"encoder expects exactly {cfg.n_in} points, got {len(points)}")
    if cfg.n_in % 4 != 0:
        raise ValueError("input size must be divisible by 4")
    n, n2, n4 = cfg.resolutions
    half = points[fps_sample(points, n2, fps_seed_index(points))]
    quarter = half[fps_sample(half, n4, fps_seed_index(half))]
    per_res = []
    for pts, stack in zip((points, half, quarter), gw.stacks):
        per_res.append(_run_stack(pts, stack, cfg.k, training, update_running,
                                  pooled_count=min(4, len(cfg.layer_dims))))
    return ad.concat(per_res, axis=0)


def ppd_decode(latent: Tensor, gw: GeneratorWeights, cfg: NetworkConfig):
    """Point pyramid decoding: coarse centers from the deepest trunk
    feature, then children expanded from each parent with predicted
    relative offsets. Returns (coarse, middle, fine) coordinate tensors."""
    if latent.shape != (cfg.latent_total,):
        raise ValueError(f"latent width {latent.shape} does not match config {cfg.latent_total}")
    v = ad.reshape(latent, (1, cfg.latent_total))
    h1 = ad.relu(gw.fc1(v))
    h2 = ad.relu(gw.fc2(h1))
    h3 = ad.relu(gw.fc3(h2))

    coarse = ad.reshape(gw.head_coarse(h3), (cfg.m1, 3))

    def expand(parents, head_out, n_parent, n_child):
        children_per = n_child // n_parent
        offsets = ad.reshape(head_out, (n_child, 3))
        rep = np.repeat(np.arange(n_parent), children_per)
        return ad.add(ad.gather_rows(parents, rep), offsets)

    middle = expand(coarse, gw.head_middle(h2), cfg.m1, cfg.m2)
    fine = expand(middle, gw.head_fine(h1), cfg.m2, cfg.m_out)
    return coarse, middle, fine


def generator_forward(points: np.ndarray, gw: GeneratorWeights, cfg: NetworkConfig,
                      training: bool = False, update_running: bool = True):
    latent = mrdg_encode(points, gw, cfg, training, update_running)
    return ppd_decode(latent, gw, cfg)


def discriminator_forward(cloud, dw: DiscriminatorWeights, cfg: NetworkConfig,
                          training: bool = False, update_running: bool = True) -> Tensor:
    """Probability in (0, 1) that the cloud is a real missing region.

    Accepts a raw (m, 3) array or a coordinate Tensor from the generator
    (gradients then flow back into the generator).
    """
    feats = cloud if isinstance(cloud, Tensor) else ad.constant(
        np.asarray(cloud, dtype=np.float64).astype(dw.stack[0].weight.dtype))
    outputs = []
    for layer in dw.stack:
        feats = dgcfe_layer(feats, cfg.k, layer, training, update_running)
        outputs.append(feats)
    pooled = [ad.reduce_max(t, axis=0) for t in outputs[-3:]]
    h = ad.reshape(ad.concat(pooled, axis=0), (1, cfg.disc_latent))
    for lin in dw.classifier[:-1]:
        h = ad.relu(lin(h))
    logit = dw.classifier[-1](h)
    return ad.reshape(ad.sigmoid(logit), (1,))
