"""GAN training loop, differentiable losses, and the checkpoint codec.

Generator and discriminator take alternating Adam steps. The generator
minimizes the weighted sum of the multi-resolution completion loss and
its adversarial term; the discriminator maximizes the usual real/fake
log-likelihood. Every run is fully determined by the seed.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .errors import DataFileError, TrainingDiverged
from .geom import fps_sample, fps_seed_index
from .network import (DiscriminatorWeights, GeneratorWeights, NetworkConfig,
                      discriminator_forward, generator_forward,
                      init_discriminator, init_generator)
from .popsim import DatasetManifest

# normalization rules recorded in checkpoints
NORM_AABB_UNIT_CUBE = 1
_NORM_RULES = {NORM_AABB_UNIT_CUBE: "uniform scale of the input cloud Aabb into the unit cube"}

PROB_LO = 1e-7
PROB_HI = 1.0 - 1e-7


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 200
    loss_stop: float = 0.1
    # (first epoch, alpha) entries; epochs are 0-based
    alpha_schedule: tuple = ((0, 0.01), (30, 0.05), (81, 0.1))
    lambda_com: float = 0.9
    lambda_adv: float = 0.1
    val_interval: int = 10
    seed: int = 0
    adv_mode: str = "nonsaturating"

    def __post_init__(self):
        starts = [s for s, _ in self.alpha_schedule]
        if starts != sorted(starts) or not starts or starts[0] != 0:
            raise ValueError("alpha schedule must start at epoch 0 and be ordered")
        if abs(self.lambda_com + self.lambda_adv - 1.0) > 1e-9:
            raise ValueError("lambda_com + lambda_adv must equal 1")
        if min(self.lambda_com, self.lambda_adv) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.adv_mode not in ("nonsaturating", "minimax"):
            raise ValueError(f"unknown adversarial mode {self.adv_mode!r}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.val_interval < 1:
            raise ValueError("batch size, epochs, and validation interval must be positive")

    def alpha_for_epoch(self, epoch: int) -> float:
        value = self.alpha_schedule[0][1]
        for start, a in self.alpha_schedule:
            if epoch >= start:
                value = a
        return value

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "batch_size": self.batch_size, "max_epochs": self.max_epochs,
            "loss_stop": self.loss_stop,
            "alpha_schedule": [list(e) for e in self.alpha_schedule],
            "lambda_com": self.lambda_com, "lambda_adv": self.lambda_adv,
            "val_interval": self.val_interval, "seed": self.seed, "adv_mode": self.adv_mode,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        if "alpha_schedule" in doc:
            doc["alpha_schedule"] = tuple((int(s), float(a)) for s, a in doc["alpha_schedule"])
        return cls(**doc)


def normalization_params(points: np.ndarray):
    """Offset/scale of the unit-cube normalization (rule 1): subtract the
    Aabb min, divide by the largest extent (aspect preserved)."""
    pts = np.asarray(points, dtype=np.float64)
    lo = pts.min(axis=0)
    scale = float((pts.max(axis=0) - lo).max())
    if scale <= 0:
        scale = 1.0
    return lo, scale


def normalize_points(points, offset, scale):
    return (np.asarray(points, dtype=np.float64) - offset) / scale


def denormalize_points(points, offset, scale):
    return np.asarray(points, dtype=np.float64) * scale + offset


def chamfer_loss_graph(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable symmetric chamfer between predicted coordinates and a
    fixed target; nearest-neighbor assignments are data (recomputed each
    forward), gradients flow through the coordinates."""
    gt = np.asarray(gt, dtype=np.float64)
    pred_np = pred.data.astype(np.float64)
    tree_gt = cKDTree(gt)
    tree_pred = cKDTree(pred_np)
    _, nn_of_pred = tree_gt.query(pred_np, k=1)
    _, nn_of_gt = tree_pred.query(gt, k=1)

    gt_c = ad.constant(gt[nn_of_pred].astype(pred.dtype))
    d1 = ad.sub(pred, gt_c)
    term1 = ad.reduce_mean(ad.reduce_sum(ad.square(d1), axis=1), axis=0)

    matched = ad.gather_rows(pred, nn_of_gt)
    d2 = ad.sub(matched, ad.constant(gt.astype(pred.dtype)))
    term2 = ad.reduce_mean(ad.reduce_sum(ad.square(d2), axis=1), axis=0)
    return ad.add(term1, term2)


def completion_loss_graph(fine, middle, coarse, gt, gt_mid, gt_coarse, alpha: float) -> Tensor:
    """Multi-stage completion loss on the graph: fine + alpha*middle +
    2*alpha*coarse chamfer terms."""
    loss = chamfer_loss_graph(fine, gt)
    loss = ad.add(loss, ad.scalar_mul(chamfer_loss_graph(middle, gt_mid), alpha))
    return ad.add(loss, ad.scalar_mul(chamfer_loss_graph(coarse, gt_coarse), 2.0 * alpha))


def _log_prob(p: Tensor) -> Tensor:
    return ad.log(ad.clamp(p, PROB_LO, PROB_HI))


def _log_one_minus(p: Tensor) -> Tensor:
    one = ad.constant(np.ones(p.shape, dtype=p.dtype))
    return ad.log(ad.clamp(ad.sub(one, p), PROB_LO, PROB_HI))


def discriminator_loss_graph(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """Negated real/fake log-likelihood (the discriminator maximizes
    sum(log d_real) + sum(log(1 - d_fake)))."""
    gain = ad.add(ad.reduce_sum(_log_prob(d_real)), ad.reduce_sum(_log_one_minus(d_fake)))
    return ad.scalar_mul(gain, -1.0)


def generator_adv_graph(d_fake: Tensor, mode: str) -> Tensor:
    if mode == "nonsaturating":
        return ad.scalar_mul(ad.reduce_sum(_log_prob(d_fake)), -1.0)
    return ad.reduce_sum(_log_one_minus(d_fake))


@dataclass
class TrainSample:
    """One preprocessed sample: normalized input/targets and the FPS
    target pyramid."""

    inputs: np.ndarray
    gt: np.ndarray
    gt_mid: np.ndarray
    gt_coarse: np.ndarray
    offset: np.ndarray
    scale: float


def prepare_sample(surface_points, occluded_points, cfg: NetworkConfig) -> TrainSample:
    offset, scale = normalization_params(surface_points)
    inputs = normalize_points(surface_points, offset, scale)
    gt = normalize_points(occluded_points, offset, scale)
    gt_mid = gt[fps_sample(gt, cfg.m2, fps_seed_index(gt))] if len(gt) >= cfg.m2 else gt
    gt_coarse = gt[fps_sample(gt, cfg.m1, fps_seed_index(gt))] if len(gt) >= cfg.m1 else gt
    return TrainSample(inputs=inputs, gt=gt, gt_mid=gt_mid, gt_coarse=gt_coarse,
                       offset=offset, scale=scale)


def load_training_samples(manifest: DatasetManifest, base_dir, cfg: NetworkConfig):
    from .ply import load_ply

    base = Path(base_dir)
    train, val = [], []
    for rec in manifest.records:
        surface = load_ply(base / rec.surface_path)
        occluded = load_ply(base / rec.occluded_path)
        if len(surface) != rec.n_in or len(occluded) != rec.m_out:
            raise DataFileError(base / rec.surface_path,
                                f"sample {rec.sample_id} does not round-trip to its recorded point counts")
        sample = prepare_sample(surface.points, occluded.points, cfg)
        (train if rec.split == "train" else val).append(sample)
    return train, val


@dataclass
class Checkpoint:
    """Trained state: architecture, normalization rule, parameter arrays."""

    config: NetworkConfig
    norm_rule: int
    arrays: dict

    def generator(self) -> GeneratorWeights:
        gw = init_generator(self.config, np.random.default_rng(0))
        _assign(gw, self.arrays)
        return gw

    def discriminator(self) -> DiscriminatorWeights:
        dw = init_discriminator(self.config, np.random.default_rng(0))
        _assign(dw, self.arrays)
        return dw


def _state_arrays(gw: GeneratorWeights, dw: DiscriminatorWeights) -> dict:
    arrays = {}
    for name, p in list(gw.named_parameters()) + list(dw.named_parameters()):
        arrays[name] = p.data.astype(np.float32).copy()
    for name, state, attr in list(gw.named_buffers()) + list(dw.named_buffers()):
        arrays[name] = getattr(state, attr).astype(np.float32).copy()
    return arrays


def _assign(weights, arrays: dict):
    for name, p in weights.named_parameters():
        if name not in arrays:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        if arrays[name].shape != p.data.shape:
            raise ValueError(f"checkpoint parameter {name!r} has shape {arrays[name].shape}, expected {p.data.shape}")
        p.data = arrays[name].astype(p.data.dtype).copy()
    for name, state, attr in weights.named_buffers():
        if name not in arrays:
            raise ValueError(f"checkpoint is missing buffer {name!r}")
        setattr(state, attr, arrays[name].astype(np.float32).copy())


CHECKPOINT_MAGIC = b"CPCN"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, ckpt: Checkpoint):
    import json

    cfg_blob = json.dumps(ckpt.config.to_dict(), sort_keys=True).encode("utf-8")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(cfg_blob))
    out += cfg_blob
    out += struct.pack("<I", ckpt.norm_rule)
    names = sorted(ckpt.arrays)
    out += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f4")
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            out += struct.pack("<I", d)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> Checkpoint:
    import json

    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataFileError(path, f"cannot read: {e.strerror}")

    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise DataFileError(path, "checkpoint truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise DataFileError(path, "not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise DataFileError(path, f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    try:
        cfg = NetworkConfig.from_dict(json.loads(bytes(take(cfg_len)).decode("utf-8")))
    except (ValueError, KeyError) as e:
        raise DataFileError(path, f"bad embedded network config: {e}")
    (norm_rule,) = struct.unpack("<I", take(4))
    if norm_rule not in _NORM_RULES:
        raise DataFileError(path, f"unknown normalization rule id {norm_rule}")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        n_items = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(4 * n_items), dtype="<f4").reshape(shape)
        arrays[name] = np.array(data)
    if pos != len(blob):
        raise DataFileError(path, f"{len(blob) - pos} trailing bytes after checkpoint payload")
    return Checkpoint(config=cfg, norm_rule=norm_rule, arrays=arrays)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epochs_run: int
    history: list = field(default_factory=list)  # per-epoch dict rows
    best_val_cd: float | None = None


def _batched(order, size):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def train(manifest: DatasetManifest, base_dir, net_cfg: NetworkConfig, tc: TrainConfig,
          log_path=None) -> TrainResult:
    """Run the alternating GAN loop over a prepared dataset.

    Validation chamfer is computed every ``val_interval`` epochs (and at
    the end); the checkpoint keeps the weights of the best validation
    pass. Stops early once the epoch-mean generator loss drops below
    ``loss_stop``.
    """
    if not manifest.records:
        raise ValueError("dataset manifest has no samples")
    train_samples, val_samples = load_training_samples(manifest, base_dir, net_cfg)
    if not train_samples:
        raise ValueError("dataset has no training split")

    rng = np.random.default_rng(tc.seed)
    gw = init_generator(net_cfg, rng)
    dw = init_discriminator(net_cfg, rng)
    gen_params = gw.parameters()
    disc_params = dw.parameters()
    gen_opt = AdamState.create(gen_params, lr=tc.lr)
    disc_opt = AdamState.create(disc_params, lr=tc.lr)

    best_val = None
    best_arrays = None
    history = []
    epochs_run = 0

    log_file = open(log_path, "w", newline="") if log_path else None
    writer = None
    if log_file:
        writer = csv.writer(log_file)
        writer.writerow(["epoch", "l_com", "l_adv", "val_cd", "alpha"])

    def validate():
        if not val_samples:
            return None
        cds = []
        for s in val_samples:
            _, _, fine = generator_forward(s.inputs, gw, net_cfg, training=False)
            from .metrics import chamfer_sq
            cds.append(chamfer_sq(fine.data.astype(np.float64), s.gt))
        return float(np.mean(cds))

    try:
        for epoch in range(tc.max_epochs):
            alpha = tc.alpha_for_epoch(epoch)
            order = rng.permutation(len(train_samples))
            epoch_com, epoch_adv, epoch_total = [], [], []

            for batch_no, batch_idx in enumerate(_batched(order, tc.batch_size)):
                batch = [train_samples[i] for i in batch_idx]

                # generator step; the fine outputs double (detached) as the
                # discriminator step's fakes, saving a second forward pass
                ad.zero_grads(gen_params)
                ad.zero_grads(disc_params)
                com_terms = []
                d_fake_terms = []
                fakes = []
                for s in batch:
                    coarse, middle, fine = generator_forward(s.inputs, gw, net_cfg,
                                                             training=True, update_running=True)
                    fakes.append(fine.data.copy())
                    com_terms.append(completion_loss_graph(
                        fine, middle, coarse, s.gt, s.gt_mid, s.gt_coarse, alpha))
                    d_fake_terms.append(discriminator_forward(fine, dw, net_cfg,
                                                              training=True, update_running=False))
                l_com = ad.scalar_mul(
                    ad.reduce_sum(ad.concat([ad.reshape(t, (1,)) for t in com_terms], axis=0)),
                    1.0 / len(batch))
                l_adv = generator_adv_graph(ad.concat(d_fake_terms, axis=0), tc.adv_mode)
                g_loss = ad.add(ad.scalar_mul(l_com, tc.lambda_com),
                                ad.scalar_mul(l_adv, tc.lambda_adv))
                if not np.isfinite(g_loss.data).all():
                    raise TrainingDiverged(epoch, batch_no, "generator loss is not finite")
                com_val, adv_val, total_val = l_com.item(), l_adv.item(), g_loss.item()
                ad.backward(g_loss)
                ad.zero_grads(disc_params)  # discard D grads from the G pass
                ad.adam_step(gen_params, None, gen_opt)

                # discriminator step on the same (now detached) fakes
                d_real = ad.concat([discriminator_forward(s.gt, dw, net_cfg, training=True)
                                    for s in batch], axis=0)
                d_fake = ad.concat([discriminator_forward(f, dw, net_cfg,
                                                          training=True, update_running=False)
                                    for f in fakes], axis=0)
                d_loss = discriminator_loss_graph(d_real, d_fake)
                if not np.isfinite(d_loss.data).all():
                    raise TrainingDiverged(epoch, batch_no, "discriminator loss is not finite")
                ad.backward(d_loss)
                ad.adam_step(disc_params, None, disc_opt)

                epoch_com.append(com_val)
                epoch_adv.append(adv_val)
                epoch_total.append(total_val)

            epochs_run = epoch + 1
            mean_total = float(np.mean(epoch_total))
            is_last = (epoch + 1 == tc.max_epochs) or (mean_total < tc.loss_stop)
            val_cd = None
            if (epoch + 1) % tc.val_interval == 0 or is_last:
                val_cd = validate()
                if val_cd is not None and (best_val is None or val_cd < best_val):
                    best_val = val_cd
                    best_arrays = _state_arrays(gw, dw)

            row = {"epoch": epoch, "l_com": float(np.mean(epoch_com)),
                   "l_adv": float(np.mean(epoch_adv)), "val_cd": val_cd,
                   "alpha": alpha, "total": mean_total}
            history.append(row)
            if writer:
                writer.writerow([epoch, f"{row['l_com']:.8g}", f"{row['l_adv']:.8g}",
                                 "" if val_cd is None else f"{val_cd:.8g}", f"{alpha:.8g}"])
                log_file.flush()
            if mean_total < tc.loss_stop:
                break
    finally:
        if log_file:
            log_file.close()

    arrays = best_arrays if best_arrays is not None else _state_arrays(gw, dw)
    ckpt = Checkpoint(config=net_cfg, norm_rule=NORM_AABB_UNIT_CUBE, arrays=arrays)
    return TrainResult(checkpoint=ckpt, epochs_run=epochs_run, history=history,
                       best_val_cd=best_val)
