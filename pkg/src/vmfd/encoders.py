"""Toy point encoder, projection heads and exact manual backpropagation.

All parameters live in plain float64 arrays; :meth:`DistillationModel.parameters`
exposes them as an ordered name -> array mapping that the optimizer updates
in place.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._binio import atomic_write_bytes, decode, encode
from .utils.validation import DegenerateInputError, check_generator

__all__ = [
    "CHECKPOINT_VERSION",
    "DistillationModel",
    "HeadCache",
    "MlpCache",
    "MlpParams",
    "ProjectionHead",
    "backward_3d",
    "encode_3d",
    "head_backward",
    "image_features",
    "load_checkpoint",
    "mlp_backward",
    "normalize_backward",
    "pixel_lookup",
    "project_and_normalize",
    "save_checkpoint",
]

CHECKPOINT_MAGIC = b"VMFDCKPT"
CHECKPOINT_VERSION = 1


def _uniform_init(fan_in: int, shape, rng: np.random.Generator) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class MlpParams:
    """tanh MLP; ``weights[l]`` has shape (out, in). Biases start at zero."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {l}: weight {W.shape} and bias {b.shape} are inconsistent")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l} input size {W.shape[1]} does not match previous output")

    @classmethod
    def init(cls, sizes, rng=None) -> MlpParams:
        rng = check_generator(rng)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(_uniform_init(fan_in, (fan_out, fan_in), rng))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]


@dataclass
class ProjectionHead:
    """Linear map followed by row-wise l2 normalization."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("head weight must be (C_out, C_in) with a (C_out,) bias")

    @classmethod
    def init(cls, c_in: int, c_out: int, rng=None) -> ProjectionHead:
        rng = check_generator(rng)
        return cls(_uniform_init(c_in, (c_out, c_in), rng), _uniform_init(c_in, (c_out,), rng))

    @classmethod
    def orthogonal(cls, c_in: int, c_out: int, rng=None) -> ProjectionHead:
        """Bias-free head with orthonormal rows (columns when ``c_out > c_in``)."""
        rng = check_generator(rng)
        q, _ = np.linalg.qr(rng.standard_normal((max(c_in, c_out), min(c_in, c_out))))
        weight = q.T if c_out <= c_in else q
        return cls(np.ascontiguousarray(weight[:c_out, :c_in]), np.zeros(c_out))


@dataclass
class MlpCache:
    activations: list[np.ndarray]  # input followed by every layer output


@dataclass
class HeadCache:
    inputs: np.ndarray
    norms: np.ndarray
    outputs: np.ndarray


def encode_3d(params: MlpParams, point_inputs) -> tuple[np.ndarray, MlpCache]:
    x = np.asarray(point_inputs, dtype=np.float64)
    acts = [x]
    for W, b in zip(params.weights, params.biases):
        x = np.tanh(x @ W.T + b)
        acts.append(x)
    return x, MlpCache(acts)


def mlp_backward(params: MlpParams, cache: MlpCache, upstream: np.ndarray):
    """Gradients of the weights, biases and input given d loss / d output."""
    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.biases)
    delta = upstream
    for l in range(len(params.weights) - 1, -1, -1):
        out = cache.activations[l + 1]
        delta = delta * (1.0 - out * out)
        grad_w[l] = delta.T @ cache.activations[l]
        grad_b[l] = delta.sum(axis=0)
        delta = delta @ params.weights[l]
    return grad_w, grad_b, delta


def project_and_normalize(head: ProjectionHead, features) -> tuple[np.ndarray, HeadCache]:
    features = np.asarray(features, dtype=np.float64)
    g = features @ head.weight.T + head.bias
    norms = np.linalg.norm(g, axis=1)
    if np.any(norms == 0.0):
        i = int(np.flatnonzero(norms == 0.0)[0])
        raise DegenerateInputError(f"row {i} projects to the zero vector; cannot normalize")
    out = g / norms[:, None]
    return out, HeadCache(features, norms, out)


def normalize_backward(upstream, normalized, norms) -> np.ndarray:
    """Apply the Jacobian ``(I - g g^T) / ||g||`` of row normalization."""
    radial = np.einsum("ij,ij->i", upstream, normalized)
    return (upstream - radial[:, None] * normalized) / norms[:, None]


def head_backward(head: ProjectionHead, cache: HeadCache, upstream):
    dg = normalize_backward(upstream, cache.outputs, cache.norms)
    return dg.T @ cache.inputs, dg.sum(axis=0), dg @ head.weight


@dataclass
class ForwardCache:
    trunk: MlpCache
    pp: HeadCache
    sem: HeadCache


@dataclass
class DistillationModel:
    """Shared 3D trunk with decoupled point-level and semantic heads, plus frozen-by-default 2D heads."""

    trunk: MlpParams
    head_pp: ProjectionHead
    head_sem: ProjectionHead
    head_pp_2d: ProjectionHead
    head_sem_2d: ProjectionHead
    train_2d_heads: bool = False
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, input_dim: int = 6, hidden=(32, 32), c3d: int = 16, c: int = 8,
             d2: int = 16, train_2d_heads: bool = False, rng=None) -> DistillationModel:
        rng = check_generator(rng)
        trunk = MlpParams.init([input_dim, *hidden, c3d], rng)
        return cls(trunk, ProjectionHead.orthogonal(c3d, c, rng), ProjectionHead.orthogonal(c3d, c, rng),
                   ProjectionHead.orthogonal(d2, c, rng), ProjectionHead.orthogonal(d2, c, rng),
                   train_2d_heads)

    def parameters(self, trainable_only: bool = False) -> dict[str, np.ndarray]:
        params = {}
        for l, (W, b) in enumerate(zip(self.trunk.weights, self.trunk.biases)):
            params[f"trunk.W{l}"] = W
            params[f"trunk.b{l}"] = b
        heads = [("pp", self.head_pp), ("sem", self.head_sem)]
        if self.train_2d_heads or not trainable_only:
            heads += [("pp2d", self.head_pp_2d), ("sem2d", self.head_sem_2d)]
        for name, head in heads:
            params[f"{name}.W"] = head.weight
            params[f"{name}.b"] = head.bias
        return params

    def trunk_features(self, point_inputs) -> np.ndarray:
        return encode_3d(self.trunk, point_inputs)[0]

    def forward_3d(self, point_inputs):
        h, trunk_cache = encode_3d(self.trunk, point_inputs)
        f3d, pp_cache = project_and_normalize(self.head_pp, h)
        g3d, sem_cache = project_and_normalize(self.head_sem, h)
        return f3d, g3d, ForwardCache(trunk_cache, pp_cache, sem_cache)

    def forward_2d(self, pixel_descriptors):
        f2d, pp_cache = project_and_normalize(self.head_pp_2d, pixel_descriptors)
        g2d, sem_cache = project_and_normalize(self.head_sem_2d, pixel_descriptors)
        return f2d, g2d, (pp_cache, sem_cache)


def backward_3d(model: DistillationModel, cache: ForwardCache, upstream_pp, upstream_sem) -> dict[str, np.ndarray]:
    """Exact parameter gradients of the point branch; the two head paths sum at the trunk."""
    grads = {}
    dW, db, dh_pp = head_backward(model.head_pp, cache.pp, upstream_pp)
    grads["pp.W"], grads["pp.b"] = dW, db
    dW, db, dh_sem = head_backward(model.head_sem, cache.sem, upstream_sem)
    grads["sem.W"], grads["sem.b"] = dW, db
    gw, gb, _ = mlp_backward(model.trunk, cache.trunk, dh_pp + dh_sem)
    for l, (w, b) in enumerate(zip(gw, gb)):
        grads[f"trunk.W{l}"] = w
        grads[f"trunk.b{l}"] = b
    return grads


def backward_2d(model: DistillationModel, caches, upstream_pp, upstream_sem) -> dict[str, np.ndarray]:
    pp_cache, sem_cache = caches
    grads = {}
    grads["pp2d.W"], grads["pp2d.b"], _ = head_backward(model.head_pp_2d, pp_cache, upstream_pp)
    grads["sem2d.W"], grads["sem2d.b"], _ = head_backward(model.head_sem_2d, sem_cache, upstream_sem)
    return grads


def pixel_lookup(scene, pairs) -> np.ndarray:
    """Raw per-pair pixel descriptors."""
    uv = np.asarray(pairs.pixel_uv)
    cams = np.asarray(pairs.camera_index)
    n_cam, H, W, _ = scene.pixel_descriptors.shape
    if uv.size and (uv[:, 0].min() < 0 or uv[:, 0].max() >= W or uv[:, 1].min() < 0
                    or uv[:, 1].max() >= H or cams.min() < 0 or cams.max() >= n_cam):
        raise IndexError("pixel coordinate outside the image")
    return scene.pixel_descriptors[cams, uv[:, 1], uv[:, 0]]


def image_features(scene, pairs, model: DistillationModel):
    """Per-pair 2D embeddings from the scene's pixel descriptors through the 2D heads."""
    return model.forward_2d(pixel_lookup(scene, pairs))


def save_checkpoint(path, model: DistillationModel, meta: dict) -> None:
    arrays = model.parameters()
    meta = dict(meta, trunk_sizes=model.trunk.sizes, train_2d_heads=model.train_2d_heads)
    atomic_write_bytes(path, encode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, arrays, meta))


def load_checkpoint(path) -> DistillationModel:
    with open(path, "rb") as fh:
        arrays, meta = decode(fh.read(), CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    n_layers = len(meta["trunk_sizes"]) - 1
    trunk = MlpParams([arrays[f"trunk.W{l}"] for l in range(n_layers)],
                      [arrays[f"trunk.b{l}"] for l in range(n_layers)])

    def head(name):
        return ProjectionHead(arrays[f"{name}.W"], arrays[f"{name}.b"])

    return DistillationModel(trunk, head("pp"), head("sem"), head("pp2d"), head("sem2d"),
                             bool(meta["train_2d_heads"]), meta)
