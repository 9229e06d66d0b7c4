"""Autoencoder phase and the OT-seeded GAN phase.

The generator starts as a copy of the trained decoder. Each discriminator
step is followed by `T_inner` generator steps minimizing
L_adv + L_feat + beta * L_img on batches whose fake half mixes paired
reconstructions with decodes of fresh latent samples.
"""
from __future__ import annotations

import csv
import dataclasses as dc
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .config import SCHEDULE_PRESETS
from .core import DimensionMismatchError, PointCloud, RngStream
from .extension import ExtendedMap, sample_latent_batch
from .neuralnet import (
    AdamState,
    Mlp,
    adam_step,
    backward,
    forward,
    init,
    mlp_specs,
)

LOG_CLAMP = 1e-12
HISTORY_COLUMNS = ("epoch", "L_img", "L_feat", "L_adv_disc", "L_adv_gen", "d_real_mean", "d_fake_mean")


class TrainingDivergedError(RuntimeError):
    def __init__(self, stage: str, epoch: int, last_model: Any = None) -> None:
        super().__init__(f"{stage} training diverged (non-finite loss) at epoch {epoch}")
        self.stage = stage
        self.epoch = epoch
        self.last_model = last_model


# ---------------------------------------------------------------- autoencoder


@dc.dataclass
class Autoencoder:
    encoder: Mlp
    decoder: Mlp

    def __post_init__(self) -> None:
        if self.encoder.out_dim != self.decoder.in_dim:
            raise DimensionMismatchError("encoder output and decoder input dimensions differ")
        if self.decoder.out_dim != self.encoder.in_dim:
            raise DimensionMismatchError("decoder output and encoder input dimensions differ")

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim

    @property
    def data_dim(self) -> int:
        return self.encoder.in_dim

    def encode(self, x: np.ndarray) -> np.ndarray:
        return forward(self.encoder, x)[0]

    def decode(self, z: np.ndarray) -> np.ndarray:
        return forward(self.decoder, z)[0]

    def copy(self) -> "Autoencoder":
        return Autoencoder(self.encoder.copy(), self.decoder.copy())

    def to_checkpoint(self) -> Dict[str, Any]:
        return {"encoder": self.encoder.to_checkpoint(), "decoder": self.decoder.to_checkpoint()}

    @staticmethod
    def from_checkpoint(d: Dict[str, Any]) -> "Autoencoder":
        return Autoencoder(Mlp.from_checkpoint(d["encoder"]), Mlp.from_checkpoint(d["decoder"]))


@dc.dataclass
class AutoencoderSpec:
    latent_dim: int = 2
    hidden: Sequence[int] = (64, 64)
    activation: str = "leaky_relu"


@dc.dataclass
class AeSchedule:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    mse_threshold: float = 1e-3


@dc.dataclass
class AeTrainResult:
    autoencoder: Autoencoder
    history: List[float]
    final_mse: float
    reached_threshold: bool


def build_autoencoder(data_dim: int, spec: AutoencoderSpec, rng: RngStream) -> Autoencoder:
    hidden = list(spec.hidden)
    encoder = init(mlp_specs(data_dim, hidden, spec.latent_dim, spec.activation), rng.spawn(0))
    decoder = init(mlp_specs(spec.latent_dim, hidden[::-1], data_dim, spec.activation), rng.spawn(1))
    return Autoencoder(encoder, decoder)


def reconstruction_mse(ae: Autoencoder, x: np.ndarray) -> float:
    x = np.atleast_2d(x)
    return float(np.mean((ae.decode(ae.encode(x)) - x) ** 2))


def _ae_step(ae: Autoencoder, states: Tuple[AdamState, AdamState], x: np.ndarray):
    z, enc_trace = forward(ae.encoder, x)
    xr, dec_trace = forward(ae.decoder, z)
    up = 2.0 * (xr - x) / x.size
    g_dec = backward(ae.decoder, dec_trace, up)
    g_enc = backward(ae.encoder, enc_trace, g_dec.inputs)
    encoder, s_enc = adam_step(ae.encoder, states[0], g_enc)
    decoder, s_dec = adam_step(ae.decoder, states[1], g_dec)
    return Autoencoder(encoder, decoder), (s_enc, s_dec)


def train_autoencoder(dataset: PointCloud, spec: AutoencoderSpec, schedule: AeSchedule, rng: RngStream) -> AeTrainResult:
    """Minimize mean ||x - g(f(x))||^2 with Adam; history holds the
    full-dataset reconstruction MSE after every epoch."""
    if len(dataset) == 0:
        raise ValueError("autoencoder training needs a non-empty dataset")
    x_all = dataset.points
    ae = build_autoencoder(dataset.dim, spec, rng.spawn(0))
    states = (
        AdamState.for_params(ae.encoder.parameters(), schedule.lr),
        AdamState.for_params(ae.decoder.parameters(), schedule.lr),
    )
    shuffle = rng.spawn(1)
    bs = max(1, min(schedule.batch_size, len(dataset)))
    history: List[float] = []
    for epoch in range(schedule.epochs):
        last_good = ae
        order = shuffle.spawn(epoch).generator().permutation(len(dataset))
        for s in range(0, len(order), bs):
            ae, states = _ae_step(ae, states, x_all[order[s : s + bs]])
        mse = reconstruction_mse(ae, x_all) if _finite(ae.encoder, ae.decoder) else float("nan")
        if not np.isfinite(mse):
            logging.error("Autoencoder diverged at epoch %d", epoch + 1)
            raise TrainingDivergedError("autoencoder", epoch + 1, last_model=last_good)
        history.append(mse)
        if epoch == 0 or (epoch + 1) % 25 == 0 or epoch + 1 == schedule.epochs:
            logging.info("AE epoch %d/%d: mse=%.6g", epoch + 1, schedule.epochs, mse)
    final = history[-1] if history else reconstruction_mse(ae, x_all)
    reached = final < schedule.mse_threshold
    if not reached:
        logging.warning("AE reconstruction mse %.6g above threshold %.3g", final, schedule.mse_threshold)
    return AeTrainResult(autoencoder=ae, history=history, final_mse=final, reached_threshold=reached)


def encode_dataset(ae: Autoencoder, dataset: PointCloud) -> PointCloud:
    if len(dataset) == 0:
        return PointCloud.empty(ae.latent_dim)
    return PointCloud(ae.encode(dataset.points), dim=ae.latent_dim)


def _finite(*nets: Mlp) -> bool:
    return all(np.all(np.isfinite(p)) for net in nets for p in net.parameters())


# ---------------------------------------------------------------- losses


@dc.dataclass(frozen=True)
class PairedTriple:
    x: np.ndarray
    z: np.ndarray
    recon: np.ndarray


@dc.dataclass(frozen=True)
class PairedBatch:
    """Row-aligned real samples, their codes and the generator's reconstructions."""

    x: np.ndarray
    z: np.ndarray
    recon: np.ndarray

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @staticmethod
    def from_triples(triples: Sequence[PairedTriple]) -> "PairedBatch":
        return PairedBatch(
            x=np.array([t.x for t in triples], dtype=np.float64),
            z=np.array([t.z for t in triples], dtype=np.float64),
            recon=np.array([t.recon for t in triples], dtype=np.float64),
        )

    def triples(self) -> List[PairedTriple]:
        return [PairedTriple(self.x[i], self.z[i], self.recon[i]) for i in range(len(self))]


Triples = Union[PairedBatch, Sequence[PairedTriple]]


def _as_batch(triples: Triples) -> PairedBatch:
    batch = triples if isinstance(triples, PairedBatch) else PairedBatch.from_triples(list(triples))
    if len(batch) == 0:
        raise ValueError("loss needs at least one paired triple")
    return batch


def content_loss(triples: Triples) -> float:
    b = _as_batch(triples)
    return float(np.mean(np.sum((b.recon - b.x) ** 2, axis=1)))


def feature_weights(encoder: Mlp, codes: PointCloud, alpha_hidden: float = 0.06, last_numerator: float = 2.0) -> np.ndarray:
    """alpha^(l) = alpha_hidden below the last layer, last_numerator / mean ||z|| at it."""
    mean_norm = float(np.mean(np.linalg.norm(codes.points, axis=1))) if len(codes) else 0.0
    alpha = np.full(len(encoder.layers), float(alpha_hidden))
    alpha[-1] = last_numerator / max(mean_norm, 1e-12)
    return alpha


def _feature_terms(b: PairedBatch, encoder: Mlp, alpha: np.ndarray):
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape[0] != len(encoder.layers):
        raise ValueError(f"need {len(encoder.layers)} feature weights, got {alpha.shape[0]}")
    _, tx = forward(encoder, b.x)
    _, tr = forward(encoder, b.recon)
    diffs = [fr - fx for fx, fr in zip(tx.features, tr.features)]
    k = len(b)
    loss = float(sum(a * np.sum(d * d) for a, d in zip(alpha, diffs)) / k)
    layer_grads = [2.0 * a * d / k for a, d in zip(alpha, diffs)]
    return loss, tr, layer_grads


def feature_loss(triples: Triples, frozen_encoder: Mlp, alpha: Sequence[float] | np.ndarray) -> float:
    return _feature_terms(_as_batch(triples), frozen_encoder, np.asarray(alpha, dtype=np.float64))[0]


@dc.dataclass(frozen=True)
class AdversarialLosses:
    disc_loss: float
    gen_loss: float
    d_real: float
    d_fake: float


def _clamped_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, LOG_CLAMP))


def adversarial_losses(disc: Mlp, real: np.ndarray, fake: np.ndarray) -> AdversarialLosses:
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("adversarial losses need non-empty real and fake batches")
    pr = forward(disc, real)[0][:, 0]
    pf = forward(disc, fake)[0][:, 0]
    return AdversarialLosses(
        disc_loss=float(-_clamped_log(pr).mean() - _clamped_log(1.0 - pf).mean()),
        gen_loss=float(-_clamped_log(pf).mean()),
        d_real=float(pr.mean()),
        d_fake=float(pf.mean()),
    )


# ---------------------------------------------------------------- latent sources


class LatentSampler(Protocol):
    dim: int

    def sample(self, count: int, rng: RngStream) -> np.ndarray: ...


@dc.dataclass(frozen=True)
class OtLatentSampler:
    emap: ExtendedMap

    @property
    def dim(self) -> int:
        return self.emap.dim

    def sample(self, count: int, rng: RngStream) -> np.ndarray:
        return sample_latent_batch(self.emap, count, rng).points


@dc.dataclass(frozen=True)
class GaussianLatentSampler:
    """Spherical Gaussian matched to the codes' mean and average spread."""

    mean: np.ndarray
    scale: float

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @staticmethod
    def from_codes(codes: PointCloud) -> "GaussianLatentSampler":
        pts = codes.points
        return GaussianLatentSampler(mean=pts.mean(axis=0), scale=float(np.sqrt(pts.var(axis=0).mean())))

    def sample(self, count: int, rng: RngStream) -> np.ndarray:
        return self.mean + self.scale * rng.generator().normal(size=(count, self.dim))


def as_sampler(sampler: Union[LatentSampler, ExtendedMap]) -> LatentSampler:
    return OtLatentSampler(sampler) if isinstance(sampler, ExtendedMap) else sampler


# ---------------------------------------------------------------- GAN phase


@dc.dataclass
class TrainSchedule:
    lr_g: float = 2e-5
    R: float = 15.0
    T_inner: int = 3
    beta: float = 2000.0
    alpha_hidden: float = 0.06
    alpha_last_numerator: float = 2.0
    batch_size: int = 64
    epochs: int = 500
    fake_ratio: int = 3
    use_feature_loss: bool = True

    @property
    def lr_d(self) -> float:
        return self.lr_g / self.R

    @staticmethod
    def from_preset(name: str, **overrides: Any) -> "TrainSchedule":
        R, T = SCHEDULE_PRESETS[name.lower()]
        params = {"R": R, "T_inner": T}
        params.update(overrides)
        return TrainSchedule(**params)

    def validate(self) -> None:
        if self.R <= 1:
            raise ValueError("R must be > 1")
        if self.T_inner < 1:
            raise ValueError("T_inner must be >= 1")
        if self.beta < 0 or self.alpha_hidden < 0 or self.alpha_last_numerator < 0:
            raise ValueError("loss weights must be >= 0")
        if self.fake_ratio < 1:
            raise ValueError("fake_ratio must be >= 1")
        if self.batch_size % (self.fake_ratio + 1) != 0:
            raise ValueError(f"batch size {self.batch_size} not divisible by {self.fake_ratio + 1}")


@dc.dataclass
class ComposedBatch:
    real: np.ndarray  # (B, D): paired samples first, then random samples
    fake_latents: np.ndarray  # (B, d): paired codes first, then sampled latents
    fake: np.ndarray  # (B, D): generator outputs for fake_latents
    paired_indices: np.ndarray
    triples: PairedBatch

    @property
    def paired_count(self) -> int:
        return int(self.paired_indices.shape[0])


def compose_batches(
    dataset: PointCloud,
    codes: PointCloud,
    sampler: Union[LatentSampler, ExtendedMap],
    generator: Mlp,
    batch_size: int,
    rng: RngStream,
    fake_ratio: int = 3,
) -> ComposedBatch:
    if batch_size < fake_ratio + 1 or batch_size % (fake_ratio + 1) != 0:
        raise ValueError(f"batch size {batch_size} must be a positive multiple of {fake_ratio + 1}")
    if len(dataset) != len(codes) or len(dataset) == 0:
        raise ValueError("dataset and codes must be non-empty and aligned")
    sampler = as_sampler(sampler)
    n = len(dataset)
    q = batch_size // (fake_ratio + 1)
    gen = rng.generator()
    paired = gen.choice(n, size=q, replace=n < q)
    others = gen.choice(n, size=batch_size - q, replace=n < batch_size - q)
    latents = np.concatenate([codes.points[paired], sampler.sample(batch_size - q, rng.spawn(0))])
    fake = forward(generator, latents)[0]
    real = dataset.points[np.concatenate([paired, others])]
    triples = PairedBatch(x=dataset.points[paired], z=codes.points[paired], recon=fake[:q])
    return ComposedBatch(real=real, fake_latents=latents, fake=fake, paired_indices=paired, triples=triples)


@dc.dataclass
class GanModel:
    generator: Mlp
    discriminator: Mlp
    frozen_encoder: Mlp

    def to_checkpoint(self) -> Dict[str, Any]:
        return {
            "generator": self.generator.to_checkpoint(),
            "discriminator": self.discriminator.to_checkpoint(),
            "frozen_encoder": self.frozen_encoder.to_checkpoint(),
        }

    @staticmethod
    def from_checkpoint(d: Dict[str, Any]) -> "GanModel":
        return GanModel(
            generator=Mlp.from_checkpoint(d["generator"]),
            discriminator=Mlp.from_checkpoint(d["discriminator"]),
            frozen_encoder=Mlp.from_checkpoint(d["frozen_encoder"]),
        )


@dc.dataclass(frozen=True)
class EpochRecord:
    epoch: int
    l_img: float
    l_feat: float
    l_adv_disc: float
    l_adv_gen: float
    d_real_mean: float
    d_fake_mean: float

    def row(self) -> List[Any]:
        return [self.epoch, self.l_img, self.l_feat, self.l_adv_disc, self.l_adv_gen, self.d_real_mean, self.d_fake_mean]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.row()[1:])))


@dc.dataclass
class GanTrainResult:
    model: GanModel
    history: List[EpochRecord]
    alpha: np.ndarray


def build_discriminator(data_dim: int, hidden: Sequence[int], rng: RngStream) -> Mlp:
    return init(mlp_specs(data_dim, list(hidden), 1, "leaky_relu", final_activation="sigmoid"), rng)


def _disc_step(disc: Mlp, state: AdamState, real: np.ndarray, fake: np.ndarray):
    x = np.concatenate([real, fake])
    p, trace = forward(disc, x)
    p = p[:, 0]
    nr = real.shape[0]
    pr, pf = p[:nr], p[nr:]
    # d/dp of -mean log p_r - mean log(1 - p_f), zero where the log is clamped
    up = np.concatenate([
        np.where(pr > LOG_CLAMP, -1.0 / (np.maximum(pr, LOG_CLAMP) * nr), 0.0),
        np.where(1.0 - pf > LOG_CLAMP, 1.0 / (np.maximum(1.0 - pf, LOG_CLAMP) * fake.shape[0]), 0.0),
    ])
    grads = backward(disc, trace, up[:, None])
    loss = float(-_clamped_log(pr).mean() - _clamped_log(1.0 - pf).mean())
    disc, state = adam_step(disc, state, grads)
    return disc, state, loss, float(pr.mean()), float(pf.mean())


def generator_objective(
    model: GanModel,
    batch: ComposedBatch,
    alpha: np.ndarray,
    beta: float,
    use_feature_loss: bool = True,
):
    """Loss parts and the gradient bundle of L_adv_gen + L_feat + beta * L_img
    with respect to the generator parameters."""
    g = model.generator
    fake, g_trace = forward(g, batch.fake_latents)
    p, d_trace = forward(model.discriminator, fake)
    p = p[:, 0]
    m = fake.shape[0]
    gen_adv = float(-_clamped_log(p).mean())
    up_p = np.where(p > LOG_CLAMP, -1.0 / (np.maximum(p, LOG_CLAMP) * m), 0.0)
    g_fake = backward(model.discriminator, d_trace, up_p[:, None]).inputs

    q = batch.paired_count
    paired = PairedBatch(x=batch.triples.x, z=batch.triples.z, recon=fake[:q])
    l_img = content_loss(paired)
    g_fake[:q] += beta * 2.0 * (fake[:q] - paired.x) / q
    l_feat = 0.0
    if use_feature_loss:
        l_feat, f_trace, layer_grads = _feature_terms(paired, model.frozen_encoder, alpha)
        zero = np.zeros_like(f_trace.outputs[-1])
        g_fake[:q] += backward(model.frozen_encoder, f_trace, zero, layer_upstreams=layer_grads).inputs
    grads = backward(g, g_trace, g_fake)
    return gen_adv, l_feat, l_img, grads


def train_gan(
    ae: Autoencoder,
    sampler: Union[LatentSampler, ExtendedMap],
    dataset: PointCloud,
    schedule: TrainSchedule,
    rng: RngStream,
    codes: Optional[PointCloud] = None,
    disc_hidden: Sequence[int] = (64, 64),
    on_epoch: Optional[Callable[[int, GanModel, EpochRecord], None]] = None,
) -> GanTrainResult:
    schedule.validate()
    sampler = as_sampler(sampler)
    if sampler.dim != ae.latent_dim:
        raise DimensionMismatchError("latent sampler and autoencoder disagree on latent dim")
    codes = codes if codes is not None else encode_dataset(ae, dataset)
    alpha = feature_weights(ae.encoder, codes, schedule.alpha_hidden, schedule.alpha_last_numerator)
    model = GanModel(
        generator=ae.decoder.copy(),
        discriminator=build_discriminator(dataset.dim, disc_hidden, rng.spawn(0)),
        frozen_encoder=ae.encoder.copy(),
    )
    d_state = AdamState.for_params(model.discriminator.parameters(), schedule.lr_d)
    g_state = AdamState.for_params(model.generator.parameters(), schedule.lr_g)
    steps = max(1, len(dataset) // schedule.batch_size)
    history: List[EpochRecord] = []
    logging.info(
        "GAN training: epochs=%d steps/epoch=%d lr_G=%.3g lr_D=%.3g T=%d beta=%g alpha=%s",
        schedule.epochs, steps, schedule.lr_g, schedule.lr_d, schedule.T_inner, schedule.beta,
        np.array2string(alpha, precision=4),
    )

    def batch_for(stream: RngStream) -> ComposedBatch:
        return compose_batches(dataset, codes, sampler, model.generator, schedule.batch_size, stream, schedule.fake_ratio)

    epoch_rng = rng.spawn(1)
    # epoch 0 is an evaluation pass: the warm-started generator before any update
    for epoch in range(schedule.epochs + 1):
        last_good = dc.replace(model)
        sums = np.zeros(6)
        for s in range(steps):
            stream = epoch_rng.spawn(epoch).spawn(s)
            b = batch_for(stream.spawn(0))
            if epoch == 0:
                adv = adversarial_losses(model.discriminator, b.real, b.fake)
                d_loss, d_real, d_fake = adv.disc_loss, adv.d_real, adv.d_fake
            else:
                disc, d_state, d_loss, d_real, d_fake = _disc_step(model.discriminator, d_state, b.real, b.fake)
                model = dc.replace(model, discriminator=disc)
            parts = np.zeros(3)
            inner = 1 if epoch == 0 else schedule.T_inner
            for t in range(inner):
                gb = b if epoch == 0 else batch_for(stream.spawn(1 + t))
                gen_adv, l_feat, l_img, grads = generator_objective(model, gb, alpha, schedule.beta, schedule.use_feature_loss)
                parts += (l_img, l_feat, gen_adv)
                if epoch > 0:
                    gen, g_state = adam_step(model.generator, g_state, grads)
                    model = dc.replace(model, generator=gen)
            parts /= inner
            sums += (parts[0], parts[1], d_loss, parts[2], d_real, d_fake)
        rec = EpochRecord(epoch, *(float(v) for v in sums / steps))
        if not rec.is_finite() or not _finite(model.generator, model.discriminator):
            logging.error("GAN diverged at epoch %d", epoch)
            raise TrainingDivergedError("gan", epoch, last_model=last_good)
        history.append(rec)
        logging.info(
            "GAN epoch %d: L_img=%.5g L_feat=%.5g L_adv_D=%.4g L_adv_G=%.4g d_real=%.3f d_fake=%.3f",
            epoch, rec.l_img, rec.l_feat, rec.l_adv_disc, rec.l_adv_gen, rec.d_real_mean, rec.d_fake_mean,
        )
        if on_epoch is not None:
            on_epoch(epoch, model, rec)
    return GanTrainResult(model=model, history=history, alpha=alpha)


def generate(model: GanModel, sampler: Union[LatentSampler, ExtendedMap], count: int, rng: RngStream) -> PointCloud:
    if count < 0:
        raise ValueError("count must be >= 0")
    if count == 0:
        return PointCloud.empty(model.generator.out_dim)
    sampler = as_sampler(sampler)
    return PointCloud(forward(model.generator, sampler.sample(count, rng))[0], dim=model.generator.out_dim)


def write_history_csv(history: Sequence[EpochRecord], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            w.writerow([rec.epoch] + [repr(float(v)) for v in rec.row()[1:]])


def read_history_csv(path: Path) -> List[EpochRecord]:
    with Path(path).open("r", encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        EpochRecord(int(r["epoch"]), *(float(r[c]) for c in HISTORY_COLUMNS[1:]))
        for r in rows
    ]
