"""The three learned components: a permutation-invariant mesh autoencoder
built from edge-convolution blocks, a per-point template deformation decoder
with skip connections, and an order-preserving shape VAE over correspondence
sets.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import NeighborIndex, _as_float, knn, knn_batch
from .tensor import Tensor, batch_norm_train, concat, gather, grad_enabled, leaky_relu

LEAKY_SLOPE = 0.2


class Module:
    """Minimal parameter container: explicit registration, recursive state."""

    def __init__(self):
        self._children: dict[str, Module] = {}
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    def register(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        arr = np.asarray(data, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def parameters(self) -> list[Tensor]:
        out = list(self._params.values())
        for child in self._children.values():
            out.extend(child.parameters())
        return out

    def named_state(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {prefix + k: v.data for k, v in self._params.items()}
        state.update({prefix + k: v for k, v in self._buffers.items()})
        for name, child in self._children.items():
            state.update(child.named_state(prefix + name + "."))
        return state

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, t in self._params.items():
            key = prefix + k
            if key not in state:
                raise ValidationError(f"missing parameter {key!r} in state")
            src = np.asarray(state[key])
            if src.shape != t.data.shape:
                raise ValidationError(
                    f"parameter {key!r} shape {src.shape} != expected {t.data.shape}")
            t.data = src.astype(t.data.dtype, copy=True)
        for k, buf in self._buffers.items():
            key = prefix + k
            if key not in state:
                raise ValidationError(f"missing buffer {key!r} in state")
            src = np.asarray(state[key])
            if src.shape != buf.shape:
                raise ValidationError(f"buffer {key!r} shape {src.shape} != expected {buf.shape}")
            buf[...] = src
        for name, child in self._children.items():
            child.load_state(state, prefix + name + ".")

    def set_training(self, flag: bool) -> None:
        self.training = flag
        for child in self._children.values():
            child.set_training(flag)

    def cast(self, dtype) -> None:
        """Convert all parameters and buffers to the given float dtype."""
        for t in self._params.values():
            t.data = t.data.astype(dtype, copy=False)
        for key, buf in list(self._buffers.items()):
            new = buf.astype(dtype, copy=False)
            self._buffers[key] = new
            for attr, value in vars(self).items():
                if value is buf:
                    setattr(self, attr, new)
        for child in self._children.values():
            child.cast(dtype)

    def param_hash(self) -> bytes:
        state = self.named_state()
        h = hashlib.sha256()
        for key in sorted(state):
            h.update(key.encode())
            h.update(np.ascontiguousarray(state[key]).tobytes())
        return h.digest()


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, shape,
                     slope: float = LEAKY_SLOPE) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = self.add_param("weight", _kaiming_uniform(rng, in_features,
                                                                (in_features, out_features)))
        self.bias = self.add_param("bias", np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class BatchNorm(Module):
    """Feature-wise batch normalization over axis 0 of an (n, d) input."""

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(num_features))
        self.beta = self.add_param("beta", np.zeros(num_features))
        self.running_mean = self.add_buffer("running_mean", np.zeros(num_features))
        self.running_var = self.add_buffer("running_var", np.ones(num_features))

    def __call__(self, x: Tensor) -> Tensor:
        if self.training:
            n = x.shape[0]
            if n < 2:
                raise ValidationError(f"batch norm in train mode needs n >= 2, got {n}")
            out, mean, var = batch_norm_train(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            self.running_mean *= 1.0 - m
            self.running_mean += m * mean
            self.running_var *= 1.0 - m
            self.running_var += m * var * n / (n - 1)
            return out
        scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
        shift = self.beta.data - self.running_mean * scale
        if not (grad_enabled() and x.requires_grad):
            out = x.data * scale
            out += shift
            return Tensor(out)
        return x * scale + shift


class EdgeConv(Module):
    """Edge feature set per point: linear(concat(x_i, x_j - x_i)) -> batch
    norm -> leaky ReLU, max-aggregated over the k neighbor edges.

    The shared linear map is stored as two blocks (self point, neighbor
    offset) so the self contribution is one matmul over points instead of a
    gather over all edges.
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        full = _kaiming_uniform(rng, 2 * in_features, (2 * in_features, out_features))
        self.weight_self = self.add_param("weight_self", full[:in_features])
        self.weight_offset = self.add_param("weight_offset", full[in_features:])
        self.norm = self.register("norm", BatchNorm(out_features))

    def __call__(self, x: Tensor, neighbors: np.ndarray) -> Tensor:
        n, d = x.shape
        if neighbors.shape[0] != n:
            raise ValidationError(
                f"neighbor index rows {neighbors.shape[0]} != point count {n}")
        k = neighbors.shape[1]
        d_out = self.out_features
        xj = gather(x, neighbors)
        offsets = xj - x.reshape((n, 1, d))
        h = (offsets.reshape((n * k, d)) @ self.weight_offset).reshape((n, k, d_out)) \
            + (x @ self.weight_self).reshape((n, 1, d_out))
        h = leaky_relu(self.norm(h.reshape((n * k, d_out))), LEAKY_SLOPE)
        return h.reshape((n, k, d_out)).max(axis=1)


def _mlp(widths: list[int], rng: np.random.Generator, parent: Module,
         prefix: str) -> list[Linear]:
    layers = []
    for i in range(len(widths) - 1):
        layers.append(parent.register(f"{prefix}{i}", Linear(widths[i], widths[i + 1], rng)))
    return layers


# -- mesh autoencoder ----------------------------------------------------------


@dataclass
class MeshAutoencoderConfig:
    n_vertices: int
    latent_dim: int = 32
    k: int = 8
    edgeconv_widths: tuple = (64, 64, 128)
    head_widths: tuple = (128,)
    decoder_widths: tuple = (256, 512)

    def __post_init__(self):
        if self.k < 1 or self.latent_dim < 1 or self.n_vertices < 1:
            raise ValidationError("k, latent_dim, n_vertices must all be positive")
        if any(w < 1 for w in self.edgeconv_widths + self.head_widths + self.decoder_widths):
            raise ValidationError("layer widths must be positive")


class MeshAutoencoder(Module):
    """Permutation-invariant mesh encoder plus a fully connected vertex decoder.

    The first edge-convolution block consumes surface (geodesic) neighbors;
    later blocks recompute k-NN in feature space each forward pass. Global
    aggregation concatenates max-pool and average-pool over points.
    """

    def __init__(self, config: MeshAutoencoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        dims = (3,) + tuple(config.edgeconv_widths)
        self.blocks = [self.register(f"edgeconv{i}", EdgeConv(dims[i], dims[i + 1], rng))
                       for i in range(len(config.edgeconv_widths))]
        head_dims = [2 * dims[-1], *config.head_widths, config.latent_dim]
        self.head = _mlp(head_dims, rng, self, "head")
        dec_dims = [config.latent_dim, *config.decoder_widths, 3 * config.n_vertices]
        self.decoder = _mlp(dec_dims, rng, self, "decoder")

    def encode_batch(self, vertices, surface_neighbors: list[NeighborIndex]) -> Tensor:
        """Latent descriptors (b, latent_dim) for a stack of meshes (b, n, 3).

        Meshes are concatenated along the point axis so every layer runs one
        matmul for the whole batch; batch-norm statistics span all edges of
        the batch.
        """
        verts = _as_float(vertices)
        n = self.config.n_vertices
        if verts.ndim != 3 or verts.shape[1:] != (n, 3):
            raise ValidationError(f"expected padded vertex stack (b, {n}, 3), got {verts.shape}")
        b = verts.shape[0]
        if len(surface_neighbors) != b:
            raise ValidationError("one surface neighbor index per mesh is required")
        offsets = (np.arange(b) * n)[:, None, None]
        nbrs = np.concatenate([s.indices[None] for s in surface_neighbors]) + offsets
        feats = self.blocks[0](Tensor(verts.reshape(b * n, 3)), nbrs.reshape(b * n, -1))
        for block in self.blocks[1:]:
            dyn = knn_batch(feats.data.reshape(b, n, -1), self.config.k)
            feats = block(feats, (dyn + offsets).reshape(b * n, self.config.k))
        grouped = feats.reshape((b, n, feats.shape[1]))
        h = concat([grouped.max(axis=1), grouped.mean(axis=1)], axis=1)
        for layer in self.head[:-1]:
            h = leaky_relu(layer(h), LEAKY_SLOPE)
        return self.head[-1](h)

    def encode(self, vertices, surface_neighbors: NeighborIndex) -> Tensor:
        """Global latent descriptor of one mesh; output length latent_dim."""
        verts = _as_float(vertices)
        if verts.shape != (self.config.n_vertices, 3):
            raise ValidationError(
                f"expected padded vertices ({self.config.n_vertices}, 3), got {verts.shape}")
        z = self.encode_batch(verts[None], [surface_neighbors])
        return z.reshape((self.config.latent_dim,))

    def decode_batch(self, z: Tensor) -> Tensor:
        """Ordered vertex reconstructions (b, n, 3) from latent codes (b, L)."""
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ValidationError(
                f"latent batch must be (b, {self.config.latent_dim}), got {z.shape}")
        h = z
        for layer in self.decoder[:-1]:
            h = leaky_relu(layer(h), LEAKY_SLOPE)
        return self.decoder[-1](h).reshape((z.shape[0], self.config.n_vertices, 3))

    def decode(self, z: Tensor) -> Tensor:
        """Ordered vertex reconstruction (n, 3) from a latent code."""
        if z.shape != (self.config.latent_dim,):
            raise ValidationError(
                f"latent size mismatch: expected ({self.config.latent_dim},), got {z.shape}")
        return self.decode_batch(z.reshape((1, self.config.latent_dim))).reshape(
            (self.config.n_vertices, 3))


# -- template deformation decoder ----------------------------------------------


@dataclass
class DeformerConfig:
    latent_dim: int = 32
    widths: tuple = (512, 256, 128)
    skip_layers: tuple = (1, 2)  # hidden layers whose input re-concatenates (z, point)

    def __post_init__(self):
        if any(w < 1 for w in self.widths):
            raise ValidationError("layer widths must be positive")
        if any(i < 1 or i >= len(self.widths) for i in self.skip_layers):
            raise ValidationError("skip layers must index hidden layers 1..len(widths)-1")


class TemplateDeformer(Module):
    """Per-point decoder mapping (latent, template point) to the displaced
    point, applied independently to each template point so the output index
    order equals the template index order.

    The final layer always sees the raw (latent, point) input; its weights
    start as identity on the point block (and small elsewhere) so the initial
    output approximates the template.
    """

    def __init__(self, config: DeformerConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        in_dim = config.latent_dim + 3
        dims = [in_dim, *config.widths]
        self.hidden = []
        for i in range(len(config.widths)):
            d_in = dims[i] + (in_dim if i in config.skip_layers else 0)
            self.hidden.append(self.register(f"hidden{i}", Linear(d_in, dims[i + 1], rng)))
        w_last = config.widths[-1]
        out_w = np.zeros((w_last + in_dim, 3))
        out_w[:w_last] = 0.05 * _kaiming_uniform(rng, w_last, (w_last, 3))
        out_w[w_last + config.latent_dim:] = np.eye(3)
        self.out = self.register("out", Linear(w_last + in_dim, 3, rng))
        self.out.weight.data[...] = out_w
        self.out.bias.data[...] = 0.0

    def deform_batch(self, z: Tensor, template) -> Tensor:
        """Displaced templates (b, M, 3) for latent codes (b, L); each template
        point is processed independently."""
        cfg = self.config
        if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
            raise ValidationError(
                f"latent batch must be (b, {cfg.latent_dim}), got {z.shape}")
        tpl = _as_float(template).astype(z.data.dtype, copy=False)
        if tpl.ndim != 2 or tpl.shape[1] != 3:
            raise ValidationError(f"template must be (M, 3), got {tpl.shape}")
        b = z.shape[0]
        m = tpl.shape[0]
        z_rows = gather(z, np.repeat(np.arange(b), m))
        x0 = concat([z_rows, Tensor(np.tile(tpl, (b, 1)))], axis=1)
        h = leaky_relu(self.hidden[0](x0), LEAKY_SLOPE)
        for i, layer in enumerate(self.hidden[1:], start=1):
            inp = concat([h, x0], axis=1) if i in cfg.skip_layers else h
            h = leaky_relu(layer(inp), LEAKY_SLOPE)
        return self.out(concat([h, x0], axis=1)).reshape((b, m, 3))

    def __call__(self, z: Tensor, template) -> Tensor:
        cfg = self.config
        if z.shape != (cfg.latent_dim,):
            raise ValidationError(
                f"latent size mismatch: expected ({cfg.latent_dim},), got {z.shape}")
        tpl = _as_float(template)
        out = self.deform_batch(z.reshape((1, cfg.latent_dim)), tpl)
        return out.reshape((tpl.shape[0], 3))


# -- order-preserving shape VAE --------------------------------------------------


@dataclass
class ShapeVAEConfig:
    num_points: int
    latent_dim: int = 32
    encoder_widths: tuple = (256, 128)
    decoder_widths: tuple = (128, 256)
    logvar_bound: float = 10.0

    def __post_init__(self):
        if self.num_points < 1 or self.latent_dim < 1:
            raise ValidationError("num_points and latent_dim must be positive")


class ShapeVAE(Module):
    """Fully connected VAE over flattened correspondence sets.

    Keeps input/output ordering (no pooling or other permutation-invariant
    layers); log-variances are clamped to +-logvar_bound.
    """

    def __init__(self, config: ShapeVAEConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        flat = 3 * config.num_points
        enc_dims = [flat, *config.encoder_widths]
        self.encoder = _mlp(enc_dims, rng, self, "encoder")
        self.mu_head = self.register("mu_head", Linear(enc_dims[-1], config.latent_dim, rng))
        self.logvar_head = self.register("logvar_head",
                                         Linear(enc_dims[-1], config.latent_dim, rng))
        dec_dims = [config.latent_dim, *config.decoder_widths, flat]
        self.decoder = _mlp(dec_dims, rng, self, "decoder")

    def _check_flat(self, x: Tensor) -> None:
        flat = 3 * self.config.num_points
        if x.ndim != 2 or x.shape[1] != flat:
            raise ValidationError(
                f"expected (batch, {flat}) flattened correspondences, got {x.shape}")

    def encode(self, flat: Tensor):
        """Posterior (mu, log_var), each (batch, latent_dim)."""
        self._check_flat(flat)
        h = flat
        for layer in self.encoder:
            h = leaky_relu(layer(h), LEAKY_SLOPE)
        b = self.config.logvar_bound
        return self.mu_head(h), self.logvar_head(h).clip(-b, b)

    def decode(self, z: Tensor) -> Tensor:
        """Flattened correspondence reconstruction (batch, 3*num_points)."""
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ValidationError(
                f"latent batch must be (b, {self.config.latent_dim}), got {z.shape}")
        h = z
        for layer in self.decoder[:-1]:
            h = leaky_relu(layer(h), LEAKY_SLOPE)
        return self.decoder[-1](h)


def reparameterize(mu: Tensor, log_var: Tensor, rng: np.random.Generator) -> Tensor:
    """z = mu + exp(log_var / 2) * eps with eps ~ N(0, I); deterministic for a
    seeded generator, gradients flow to mu and log_var."""
    if mu.shape != log_var.shape:
        raise ValidationError(f"mu/log_var shape mismatch: {mu.shape} vs {log_var.shape}")
    eps = rng.standard_normal(mu.shape).astype(mu.data.dtype, copy=False)
    return mu + (log_var * 0.5).exp() * Tensor(eps)


def flatten_sets(sets: np.ndarray) -> np.ndarray:
    """Stack correspondence sets (N, M, 3) into VAE rows (N, 3M)."""
    sets = np.asarray(sets, dtype=np.float64)
    return sets.reshape(sets.shape[0], -1)
