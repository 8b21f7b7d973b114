"""Shape-statistics evaluation over correspondence models: PCA modes,
compactness / generalization / specificity curves, linear and VAE mode
sweeps, and the held-out distance report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import ValidationError
from .losses import two_way_chamfer
from .networks import MeshAutoencoder, ShapeVAE, TemplateDeformer, flatten_sets
from .tensor import Tensor, no_grad
from .trainer import infer

METRICS_HEADER = "sample_id,chamfer_l1,surface_to_surface_mm"


@dataclass
class PCAModel:
    """Mean, orthonormal modes (columns), and per-mode variances (descending)."""

    mean: np.ndarray        # (3M,)
    modes: np.ndarray       # (3M, r)
    variances: np.ndarray   # (r,)

    @property
    def rank(self) -> int:
        return len(self.variances)

    @property
    def num_points(self) -> int:
        return len(self.mean) // 3


@dataclass
class ShapeStats:
    """The three standard model-quality curves, indexed by mode count 1..r."""

    compactness: np.ndarray
    generalization: np.ndarray
    specificity: np.ndarray

    def __post_init__(self):
        if not len(self.compactness) == len(self.generalization) == len(self.specificity):
            raise ValidationError("shape-statistic curves must have equal length")


@dataclass
class ModeSweep:
    """Shapes generated along one mode of variation.

    ``values`` are the sweep parameters (multiples of the mode's std);
    ``shapes[i]`` is the (M, 3) shape at values[i]; ``signed_displacement[i]``
    holds per-point signed distances from the base shape for plotting.
    """

    mode: int
    scale: float  # sqrt eigenvalue (PCA) or latent std (VAE)
    values: list[float]
    shapes: list[np.ndarray]
    signed_displacement: list[np.ndarray]


def _as_matrix(correspondences) -> np.ndarray:
    sets = np.asarray(correspondences, dtype=np.float64)
    if sets.ndim != 3 or sets.shape[2] != 3:
        raise ValidationError(f"expected (N, M, 3) correspondence sets, got {sets.shape}")
    return flatten_sets(sets)


def fit_pca(correspondences) -> PCAModel:
    """Eigen-decomposition of the sample covariance (divisor N-1) of flattened
    correspondence sets; mode signs fixed so the largest-magnitude coefficient
    of each mode is positive."""
    x = _as_matrix(correspondences)
    n = len(x)
    if n < 2:
        raise ValidationError(f"PCA needs at least 2 shapes, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    r = min(n - 1, x.shape[1])
    variances = (svals[:r] ** 2) / (n - 1)
    modes = vt[:r].T
    for j in range(r):
        col = modes[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            modes[:, j] = -col
    return PCAModel(mean=mean, modes=modes, variances=variances)


def project(model: PCAModel, shapes: np.ndarray, n_modes: int) -> np.ndarray:
    """Coefficients of the centered shapes on the first ``n_modes`` modes."""
    return (shapes - model.mean) @ model.modes[:, :n_modes]


def reconstruct(model: PCAModel, coefficients: np.ndarray, n_modes: int) -> np.ndarray:
    return model.mean + coefficients @ model.modes[:, :n_modes].T


def _mean_point_distance(a_flat: np.ndarray, b_flat: np.ndarray) -> float:
    """Mean per-point Euclidean distance between flattened (3M,) shapes."""
    d = (a_flat - b_flat).reshape(-1, 3)
    return float(np.linalg.norm(d, axis=1).mean())


def compactness(model: PCAModel) -> np.ndarray:
    """Cumulative explained-variance ratio per mode count."""
    total = model.variances.sum()
    if total <= 0:
        return np.ones(model.rank)
    return np.cumsum(model.variances) / total


def generalization(model: PCAModel, test_sets) -> np.ndarray:
    """Mean reconstruction distance (mm) of held-out shapes per mode count."""
    x = _as_matrix(test_sets)
    if x.shape[1] != len(model.mean):
        raise ValidationError(
            f"test shapes have {x.shape[1] // 3} points, model has {model.num_points}")
    curve = np.empty(model.rank)
    for m in range(1, model.rank + 1):
        recon = reconstruct(model, project(model, x, m), m)
        curve[m - 1] = np.mean([_mean_point_distance(a, b) for a, b in zip(x, recon)])
    return curve


def specificity(model: PCAModel, training_sets, n_modes: int, n_samples: int = 100,
                seed: int = 0) -> float:
    """Mean distance from random model samples to their nearest training shape.

    Coefficients are drawn from N(0, diag(variances[:n_modes])).
    """
    if not 1 <= n_modes <= model.rank:
        raise ValidationError(f"n_modes must be in [1, {model.rank}], got {n_modes}")
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    train = _as_matrix(training_sets)
    rng = np.random.default_rng(seed)
    coeff = rng.standard_normal((n_samples, n_modes)) * np.sqrt(model.variances[:n_modes])
    samples = reconstruct(model, coeff, n_modes)
    total = 0.0
    for s in samples:
        total += min(_mean_point_distance(s, t) for t in train)
    return total / n_samples


def shape_stats(model: PCAModel, training_sets, test_sets, n_specificity_samples: int = 100,
                seed: int = 0) -> ShapeStats:
    """All three curves over mode counts 1..rank."""
    spec = np.array([specificity(model, training_sets, m, n_specificity_samples, seed)
                     for m in range(1, model.rank + 1)])
    return ShapeStats(compactness=compactness(model),
                      generalization=generalization(model, test_sets),
                      specificity=spec)


def pca_mode_sweep(model: PCAModel, mode: int, k_sigmas=(-2.0, -1.0, 0.0, 1.0, 2.0)) -> ModeSweep:
    """Shapes mean + k * sqrt(variance) * mode for each k (mode is 1-based)."""
    if not 1 <= mode <= model.rank:
        raise ValidationError(f"mode must be in [1, {model.rank}], got {mode}")
    vec = model.modes[:, mode - 1]
    sigma = float(np.sqrt(model.variances[mode - 1]))
    shapes, signed = [], []
    mode_pts = vec.reshape(-1, 3)
    for k in k_sigmas:
        flat = model.mean + (k * sigma) * vec
        shape = flat.reshape(-1, 3)
        disp = shape - model.mean.reshape(-1, 3)
        sign = np.sign(np.einsum("ij,ij->i", disp, mode_pts))
        sign[sign == 0] = 1.0
        shapes.append(shape)
        signed.append(sign * np.linalg.norm(disp, axis=1))
    return ModeSweep(mode=mode, scale=sigma, values=[float(k) for k in k_sigmas],
                     shapes=shapes, signed_displacement=signed)


def latent_codes(vae: ShapeVAE, correspondences) -> np.ndarray:
    """Posterior means (N, latent_dim) of the training correspondences."""
    flat = _as_matrix(correspondences)
    was_training = vae.training
    vae.set_training(False)
    with no_grad():
        mu, _ = vae.encode(Tensor(flat))
    vae.set_training(was_training)
    return mu.data.copy()


def vae_mode_sweep(vae: ShapeVAE, train_latents: np.ndarray, mode_rank: int,
                   k_sigmas=(-2.0, -1.0, 0.0, 1.0, 2.0),
                   base_latent: np.ndarray | None = None) -> ModeSweep:
    """Sweep along the latent dimension whose training-posterior std ranks
    ``mode_rank``-th (1-based, descending std); the base latent defaults to
    the mean training latent."""
    train_latents = np.asarray(train_latents, dtype=np.float64)
    if train_latents.ndim != 2:
        raise ValidationError(f"train latents must be (N, L), got {train_latents.shape}")
    latent_dim = train_latents.shape[1]
    if not 1 <= mode_rank <= latent_dim:
        raise ValidationError(f"mode_rank must be in [1, {latent_dim}], got {mode_rank}")
    stds = train_latents.std(axis=0, ddof=1)
    order = np.argsort(-stds, kind="stable")
    dim = int(order[mode_rank - 1])
    std = float(stds[dim])
    base = train_latents.mean(axis=0) if base_latent is None else np.asarray(base_latent, float)

    was_training = vae.training
    vae.set_training(False)
    shapes, signed = [], []
    with no_grad():
        base_shape = vae.decode(Tensor(base[None, :])).data[0].reshape(-1, 3)
        for k in k_sigmas:
            z = base.copy()
            z[dim] += k * std
            shape = vae.decode(Tensor(z[None, :])).data[0].reshape(-1, 3)
            disp = shape - base_shape
            norms = np.linalg.norm(disp, axis=1)
            shapes.append(shape)
            signed.append(np.sign(k if k != 0 else 1.0) * norms)
    vae.set_training(was_training)
    return ModeSweep(mode=dim + 1, scale=std, values=[float(k) for k in k_sigmas],
                     shapes=shapes, signed_displacement=signed)


def evaluate_test(meshes, mae: MeshAutoencoder, deformer: TemplateDeformer,
                  template: np.ndarray, sample_ids=None):
    """Per-sample unsquared two-way Chamfer (correspondences vs vertices) and
    mean point-to-surface distance; returns (rows, summary dict)."""
    meshes = list(meshes)
    if not meshes:
        raise ValidationError("no meshes to evaluate")
    ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(len(meshes))]
    rows = []
    for sid, mesh in zip(ids, meshes):
        corr = infer(mae, deformer, mesh, template)
        with no_grad():
            cd = two_way_chamfer(Tensor(corr), Tensor(mesh.vertices), norm="l1").item()
        _, s2s = geometry.point_to_mesh_distance(corr, mesh)
        rows.append({"sample_id": sid, "chamfer_l1": cd, "surface_to_surface_mm": s2s,
                     "correspondences": corr})
    cds = np.array([r["chamfer_l1"] for r in rows])
    s2ss = np.array([r["surface_to_surface_mm"] for r in rows])
    summary = {"chamfer_l1_mean": float(cds.mean()), "chamfer_l1_std": float(cds.std(ddof=0)),
               "surface_to_surface_mean": float(s2ss.mean()),
               "surface_to_surface_std": float(s2ss.std(ddof=0))}
    return rows, summary


def metrics_csv_text(rows, summary) -> str:
    """Render the metric report: one row per sample plus mean/std rows."""
    lines = [METRICS_HEADER + "\n"]
    for r in rows:
        lines.append(f"{r['sample_id']},{r['chamfer_l1']!r},{r['surface_to_surface_mm']!r}\n")
    lines.append(f"mean,{summary['chamfer_l1_mean']!r},{summary['surface_to_surface_mean']!r}\n")
    lines.append(f"std,{summary['chamfer_l1_std']!r},{summary['surface_to_surface_std']!r}\n")
    return "".join(lines)
