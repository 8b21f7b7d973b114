"""Two-stage optimization: burn-in on the correspondence networks, then
strict per-epoch alternation with the shape VAE, refreshing the working
template from the VAE prior at regular intervals.

Checkpoints are npz containers holding every parameter tensor, optimizer
moments, RNG states, the working template, and the loss history; a resumed
run reproduces the uninterrupted one step for step.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from . import geometry
from .errors import CheckpointError, NumericError, ValidationError
from .losses import LossWeights, correspondence_loss, vae_loss
from .networks import (DeformerConfig, MeshAutoencoder, MeshAutoencoderConfig, ShapeVAE,
                       ShapeVAEConfig, TemplateDeformer, flatten_sets, reparameterize)
from .optim import Adam, StepSchedule
from .tensor import Tensor, backward, gather, no_grad

CHECKPOINT_VERSION = 1

PHASE_BURN_IN = "burn_in"
PHASE_CORRESPONDENCE = "correspondence"
PHASE_VAE = "vae"

HISTORY_FIELDS = ("epoch", "phase", "lr", "alpha", "chamfer_l2", "chamfer_l1",
                  "vertex_mse", "vae_recon", "vae_kl", "wall_ms")


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 10
    lr_mae: float = 0.01
    lr_spvae: float = 0.0009
    lr_step_interval: int = 200
    lr_step_factor: float = 0.5
    alpha_start: float = 0.01
    alpha_end: float = 1.0
    alpha_ramp_epochs: int = 100
    gamma: float = 0.01
    kl_weight: float = 1.0
    burn_in_epochs: int = 100
    template_refresh_interval: int = 10
    prior_sample_count: int = 500
    latent_dim: int = 32
    knn_k: int = 8
    edgeconv_widths: tuple = (64, 64, 128)
    head_widths: tuple = (128,)
    decoder_widths: tuple = (256, 512)
    deformer_widths: tuple = (512, 256, 128)
    deformer_skip_layers: tuple = (1, 2)
    vae_encoder_widths: tuple = (256, 128)
    vae_decoder_widths: tuple = (128, 256)
    precision: int = 64  # float bits for training arrays; 32 trades accuracy for speed
    seed: int = 0

    def validate(self, n_meshes: int) -> None:
        if self.precision not in (32, 64):
            raise ValidationError(f"precision must be 32 or 64, got {self.precision}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if not 0 <= self.burn_in_epochs < self.epochs:
            raise ValidationError(
                f"burn_in_epochs must satisfy 0 <= burn_in < epochs, got "
                f"{self.burn_in_epochs} vs {self.epochs}")
        if self.batch_size > n_meshes:
            raise ValidationError(
                f"batch_size {self.batch_size} exceeds dataset size {n_meshes}")
        if self.template_refresh_interval < 1 or self.prior_sample_count < 1:
            raise ValidationError("refresh interval and prior sample count must be positive")
        if self.alpha_ramp_epochs < 1:
            raise ValidationError("alpha_ramp_epochs must be >= 1")
        if self.alpha_end < self.alpha_start:
            raise ValidationError("alpha ramp must be non-decreasing (alpha_end >= alpha_start)")
        for name in ("lr_mae", "lr_spvae", "alpha_start", "alpha_end", "gamma", "kl_weight"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")

    def alpha_at(self, epoch: int) -> float:
        """Linear ramp from alpha_start to alpha_end over the first
        alpha_ramp_epochs epochs, then constant."""
        frac = min(epoch / self.alpha_ramp_epochs, 1.0)
        return self.alpha_start + (self.alpha_end - self.alpha_start) * frac

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in known:
                raise ValidationError(f"unknown config key {key!r}")
            default = known[key].default
            if isinstance(default, tuple):
                if isinstance(value, (str, int, float)):
                    value = [value]
                kwargs[key] = tuple(int(v) for v in value)
            elif isinstance(default, int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


def parse_config_file(path) -> dict:
    """Flat ``key = value`` text; '#' comments; tuples are comma-separated."""
    raw: dict = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            raw[key] = [v.strip() for v in value.split(",")] if "," in value else value
    return raw


def write_config_file(config: TrainConfig, path, extra: dict | None = None) -> None:
    lines = []
    for key, value in config.to_dict().items():
        value = ",".join(str(v) for v in value) if isinstance(value, list) else value
        lines.append(f"{key} = {value}\n")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}\n")
    _atomic_write_text(path, "".join(lines))


def _atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_history_csv(history: list[dict], path) -> None:
    lines = [",".join(HISTORY_FIELDS) + "\n"]
    for row in history:
        cells = []
        for name in HISTORY_FIELDS:
            v = row.get(name)
            cells.append("" if v is None else (v if isinstance(v, str) else repr(v)))
        lines.append(",".join(str(c) for c in cells) + "\n")
    _atomic_write_text(path, "".join(lines))


class Trainer:
    """Owns all mutable training state for one run."""

    def __init__(self, meshes, template: np.ndarray, config: TrainConfig,
                 val_meshes=()):
        meshes = list(meshes)
        if len(meshes) < 2:
            raise ValidationError(f"need at least 2 training meshes, got {len(meshes)}")
        config.validate(len(meshes))
        counts = {m.n_vertices for m in meshes}
        if len(counts) != 1:
            raise ValidationError(
                f"meshes must share one padded vertex count, got {sorted(counts)}")
        template = np.asarray(template, dtype=np.float64)
        if template.ndim != 2 or template.shape[1] != 3:
            raise ValidationError(f"template must be (M, 3), got {template.shape}")

        self.meshes = meshes
        self.val_meshes = list(val_meshes)
        self.config = config
        self.dtype = np.float32 if config.precision == 32 else np.float64
        self.template = template.astype(self.dtype)
        self.initial_template = template.copy()
        self.n_vertices = meshes[0].n_vertices
        self.num_points = len(template)
        self._train_verts = [m.vertices.astype(self.dtype) for m in meshes]

        seeds = np.random.SeedSequence(config.seed).spawn(4)
        init_rng = np.random.default_rng(seeds[0])
        self.shuffle_rng = np.random.default_rng(seeds[1])
        self.noise_rng = np.random.default_rng(seeds[2])
        self.template_rng = np.random.default_rng(seeds[3])

        self.mae = MeshAutoencoder(
            MeshAutoencoderConfig(
                n_vertices=self.n_vertices, latent_dim=config.latent_dim, k=config.knn_k,
                edgeconv_widths=tuple(config.edgeconv_widths),
                head_widths=tuple(config.head_widths),
                decoder_widths=tuple(config.decoder_widths)),
            init_rng)
        self.deformer = TemplateDeformer(
            DeformerConfig(latent_dim=config.latent_dim,
                           widths=tuple(config.deformer_widths),
                           skip_layers=tuple(config.deformer_skip_layers)),
            init_rng)
        self.vae = ShapeVAE(
            ShapeVAEConfig(num_points=self.num_points, latent_dim=config.latent_dim,
                           encoder_widths=tuple(config.vae_encoder_widths),
                           decoder_widths=tuple(config.vae_decoder_widths)),
            init_rng)

        if self.dtype == np.float32:
            for model in (self.mae, self.deformer, self.vae):
                model.cast(np.float32)

        self.opt_corr = Adam(self.mae.parameters() + self.deformer.parameters(),
                             lr=config.lr_mae)
        self.opt_vae = Adam(self.vae.parameters(), lr=config.lr_spvae)
        self.sched_corr = StepSchedule(config.lr_mae, config.lr_step_interval,
                                       config.lr_step_factor)
        self.sched_vae = StepSchedule(config.lr_spvae, config.lr_step_interval,
                                      config.lr_step_factor)

        self.epoch = 0
        self.alternating_done = 0
        self.history: list[dict] = []
        self.val_history: list[dict] = []
        self.best_val_loss = np.inf
        self.best_state: dict | None = None

        self._geo = [geometry.geodesic_knn(m, config.knn_k) for m in meshes]
        self._geo_val = [geometry.geodesic_knn(m, config.knn_k) for m in self.val_meshes]

    # -- phase logic -----------------------------------------------------

    def phase_of(self, epoch: int) -> str:
        if epoch < self.config.burn_in_epochs:
            return PHASE_BURN_IN
        # first alternating epoch trains the VAE (it has never been updated)
        return PHASE_VAE if (epoch - self.config.burn_in_epochs) % 2 == 0 else PHASE_CORRESPONDENCE

    # -- training --------------------------------------------------------

    def run(self, until_epoch: int | None = None) -> list[dict]:
        """Train from the current epoch up to ``until_epoch`` (exclusive,
        default config.epochs); returns the accumulated history."""
        target = self.config.epochs if until_epoch is None else until_epoch
        if target > self.config.epochs:
            raise ValidationError(f"until_epoch {target} exceeds configured epochs")
        while self.epoch < target:
            self.train_epoch()
        return self.history

    def train_epoch(self) -> dict:
        epoch = self.epoch
        phase = self.phase_of(epoch)
        start = time.perf_counter()
        try:
            if phase == PHASE_VAE:
                row = self._vae_epoch(epoch)
            else:
                row = self._correspondence_epoch(epoch, phase)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}: {exc}") from exc
        row["wall_ms"] = (time.perf_counter() - start) * 1e3
        self.history.append(row)
        self.epoch += 1
        if phase != PHASE_BURN_IN:
            self.alternating_done += 1
            if self.alternating_done % self.config.template_refresh_interval == 0:
                self.refresh_template()
        if self.val_meshes and phase != PHASE_VAE:
            self._evaluate_validation(epoch)
        return row

    def _correspondence_epoch(self, epoch: int, phase: str) -> dict:
        cfg = self.config
        alpha = cfg.alpha_at(epoch)
        weights = LossWeights(alpha=alpha, gamma=cfg.gamma)
        lr = self.sched_corr(epoch)
        self.opt_corr.lr = lr
        self.mae.set_training(True)
        self.deformer.set_training(True)

        order = self.shuffle_rng.permutation(len(self.meshes))
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            try:
                self.opt_corr.zero_grad()
                b = len(batch)
                m = self.num_points
                n = self.n_vertices
                verts = np.stack([self._train_verts[i] for i in batch])
                z = self.mae.encode_batch(verts, [self._geo[i] for i in batch])
                v_hat = self.mae.decode_batch(z).reshape((b * n, 3))
                corr = self.deformer.deform_batch(z, self.template).reshape((b * m, 3))
                totals = []
                for j, i in enumerate(batch):
                    corr_j = gather(corr, np.arange(j * m, (j + 1) * m))
                    v_hat_j = gather(v_hat, np.arange(j * n, (j + 1) * n))
                    parts = correspondence_loss(self._train_verts[i], corr_j, v_hat_j,
                                                weights)
                    totals.append(parts.total)
                    sums += (parts.chamfer_l2.item(), parts.chamfer_l1.item(),
                             parts.vertex_mse.item())
                batch_loss = totals[0]
                for t in totals[1:]:
                    batch_loss = batch_loss + t
                batch_loss = batch_loss * (1.0 / len(totals))
                backward(batch_loss)
                self.opt_corr.step()
            except NumericError as exc:
                raise NumericError(f"batch starting at sample {start}: {exc}") from exc
        means = sums / len(order)
        return {"epoch": epoch, "phase": phase, "lr": lr, "alpha": alpha,
                "chamfer_l2": means[0], "chamfer_l1": means[1], "vertex_mse": means[2],
                "vae_recon": None, "vae_kl": None, "wall_ms": None}

    def _vae_epoch(self, epoch: int) -> dict:
        cfg = self.config
        lr = self.sched_vae(epoch)
        self.opt_vae.lr = lr
        corr = self.current_correspondences()  # detached from the deformer graph
        flat = flatten_sets(corr)
        self.vae.set_training(True)

        order = self.shuffle_rng.permutation(len(flat))
        sums = np.zeros(2)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            try:
                self.opt_vae.zero_grad()
                x = Tensor(flat[batch])
                mu, log_var = self.vae.encode(x)
                z = reparameterize(mu, log_var, self.noise_rng)
                x_hat = self.vae.decode(z)
                parts = vae_loss(x, x_hat, mu, log_var, beta=cfg.kl_weight)
                backward(parts.total)
                self.opt_vae.step()
            except NumericError as exc:
                raise NumericError(f"batch starting at sample {start}: {exc}") from exc
            sums += (parts.reconstruction.item() * len(batch),
                     parts.kl.item() * len(batch))
        means = sums / len(order)
        return {"epoch": epoch, "phase": PHASE_VAE, "lr": lr, "alpha": cfg.alpha_at(epoch),
                "chamfer_l2": None, "chamfer_l1": None, "vertex_mse": None,
                "vae_recon": means[0], "vae_kl": means[1], "wall_ms": None}

    def current_correspondences(self) -> np.ndarray:
        """Eval-mode forward of every training mesh through the correspondence
        networks; plain arrays (no gradient coupling across modules)."""
        self.mae.set_training(False)
        self.deformer.set_training(False)
        out = np.empty((len(self.meshes), self.num_points, 3), dtype=self.dtype)
        chunk = self.config.batch_size
        with no_grad():
            for start in range(0, len(self.meshes), chunk):
                idx = range(start, min(start + chunk, len(self.meshes)))
                verts = np.stack([self._train_verts[i] for i in idx])
                z = self.mae.encode_batch(verts, [self._geo[i] for i in idx])
                out[start:start + len(verts)] = self.deformer.deform_batch(
                    z, self.template).data
        return out

    def refresh_template(self) -> None:
        """Replace the working template with the prior-mean decode."""
        new = update_template(self.vae, self.config.prior_sample_count, self.template_rng)
        if new.shape != self.template.shape:
            raise ValidationError("refreshed template changed size")
        self.template = new

    def _evaluate_validation(self, epoch: int) -> None:
        # Constant weights (ramp endpoint) keep epochs comparable.
        weights = LossWeights(alpha=self.config.alpha_end, gamma=self.config.gamma)
        self.mae.set_training(False)
        self.deformer.set_training(False)
        total = 0.0
        with no_grad():
            for mesh, geo in zip(self.val_meshes, self._geo_val):
                z = self.mae.encode(mesh.vertices, geo)
                v_hat = self.mae.decode(z)
                corr = self.deformer(z, self.template)
                parts = correspondence_loss(mesh.vertices, corr, v_hat, weights)
                total += parts.total.item()
        mean = total / len(self.val_meshes)
        self.val_history.append({"epoch": epoch, "val_loss": mean})
        if mean < self.best_val_loss:
            self.best_val_loss = mean
            self.best_state = self._model_state()

    # -- inference ---------------------------------------------------------

    def infer(self, mesh: geometry.Mesh) -> np.ndarray:
        """Correspondences for one mesh: a single eval-mode forward pass."""
        return infer(self.mae, self.deformer, mesh, self.template)

    # -- checkpointing -------------------------------------------------------

    def _model_state(self) -> dict:
        state = {}
        state.update(self.mae.named_state("mae."))
        state.update(self.deformer.named_state("deformer."))
        state.update(self.vae.named_state("vae."))
        return {k: v.copy() for k, v in state.items()}

    def save(self, path) -> None:
        arrays = {f"model/{k}": v for k, v in self._model_state().items()}
        for tag, opt in (("corr", self.opt_corr), ("vae", self.opt_vae)):
            st = opt.state_dict()
            arrays[f"opt_{tag}/t"] = np.asarray(st["t"])
            for i, m in enumerate(st["m"]):
                arrays[f"opt_{tag}/m{i}"] = m
            for i, v in enumerate(st["v"]):
                arrays[f"opt_{tag}/v{i}"] = v
        if self.best_state is not None:
            arrays.update({f"best/{k}": v for k, v in self.best_state.items()})
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "alternating_done": self.alternating_done,
            "n_vertices": self.n_vertices,
            "num_points": self.num_points,
            "history": self.history,
            "val_history": self.val_history,
            "best_val_loss": None if not np.isfinite(self.best_val_loss) else self.best_val_loss,
            "rng": {
                "shuffle": self.shuffle_rng.bit_generator.state,
                "noise": self.noise_rng.bit_generator.state,
                "template": self.template_rng.bit_generator.state,
            },
        }
        arrays["template"] = self.template
        arrays["initial_template"] = self.initial_template
        arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path, meshes, val_meshes=()) -> "Trainer":
        try:
            data = np.load(path)
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
        if "meta_json" not in data:
            raise CheckpointError(f"{path}: not a trainer checkpoint (missing metadata)")
        meta = json.loads(bytes(data["meta_json"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
        config = TrainConfig.from_dict(meta["config"])
        template = data["template"]
        if len(template) != meta["num_points"]:
            raise CheckpointError(f"{path}: template size does not match recorded num_points")

        trainer = cls(meshes, data["initial_template"], config, val_meshes=val_meshes)
        if trainer.n_vertices != meta["n_vertices"]:
            raise CheckpointError(
                f"{path}: checkpoint expects meshes with {meta['n_vertices']} vertices, "
                f"got {trainer.n_vertices}")
        if trainer.num_points != meta["num_points"]:
            raise CheckpointError(
                f"{path}: checkpoint template has {meta['num_points']} points, "
                f"initial template has {trainer.num_points}")
        trainer.template = template.copy()
        model_state = {k[len("model/"):]: data[k] for k in data.files if k.startswith("model/")}
        trainer.mae.load_state(model_state, "mae.")
        trainer.deformer.load_state(model_state, "deformer.")
        trainer.vae.load_state(model_state, "vae.")
        for tag, opt in (("corr", trainer.opt_corr), ("vae", trainer.opt_vae)):
            n = len(opt.params)
            opt.load_state_dict({
                "t": int(data[f"opt_{tag}/t"]),
                "m": [data[f"opt_{tag}/m{i}"] for i in range(n)],
                "v": [data[f"opt_{tag}/v{i}"] for i in range(n)],
            })
        best = {k[len("best/"):]: data[k] for k in data.files if k.startswith("best/")}
        trainer.best_state = best or None
        trainer.best_val_loss = meta["best_val_loss"] if meta["best_val_loss"] is not None else np.inf
        trainer.epoch = int(meta["epoch"])
        trainer.alternating_done = int(meta["alternating_done"])
        trainer.history = meta["history"]
        trainer.val_history = meta["val_history"]
        trainer.shuffle_rng.bit_generator.state = meta["rng"]["shuffle"]
        trainer.noise_rng.bit_generator.state = meta["rng"]["noise"]
        trainer.template_rng.bit_generator.state = meta["rng"]["template"]
        return trainer


def update_template(vae: ShapeVAE, count: int, rng: np.random.Generator) -> np.ndarray:
    """Decode ``count`` draws from the standard-normal prior and average them
    pointwise (per correspondence index)."""
    if count < 1:
        raise ValidationError(f"prior sample count must be >= 1, got {count}")
    z = rng.standard_normal((count, vae.config.latent_dim))
    was_training = vae.training
    vae.set_training(False)
    with no_grad():
        decoded = vae.decode(Tensor(z)).data
    vae.set_training(was_training)
    # anchored mean: exact when all samples coincide (constant decoder)
    mean = decoded[0] + (decoded - decoded[0]).mean(axis=0)
    return mean.reshape(vae.config.num_points, 3)


def infer(mae: MeshAutoencoder, deformer: TemplateDeformer, mesh: geometry.Mesh,
          template: np.ndarray) -> np.ndarray:
    """Predicted correspondences for one mesh: encode + deform, eval mode,
    no per-sample optimization."""
    if mesh.n_vertices != mae.config.n_vertices:
        raise ValidationError(
            f"mesh has {mesh.n_vertices} vertices, model expects {mae.config.n_vertices}")
    geo = geometry.geodesic_knn(mesh, mae.config.k)
    mae.set_training(False)
    deformer.set_training(False)
    with no_grad():
        z = mae.encode(mesh.vertices, geo)
        corr = deformer(z, template)
    return corr.data.copy()
