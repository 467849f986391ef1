"""Toy class-conditional latent diffusion: autoencoder, denoiser, sampler, cache."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from . import tensor as T
from .nn import DOWNSAMPLE, DenoiserNet, ImageToLatent, LatentDecoder
from .optim import AdamW, cosine_lr
from .rng import stream
from .tensor import Tensor

log = logging.getLogger(__name__)


class DiffusionDivergence(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DiffusionConfig:
    n_steps: int = 50
    # scaled-linear betas over reference_steps, subsampled to n_steps
    beta_start: float = 0.00085
    beta_end: float = 0.012
    reference_steps: int = 1000
    x0_clip: float = 3.0
    latent_channels: int = 4
    prompts_per_class: int = 10
    count: int = 20
    batch_size: int = 2
    ae_steps: int = 600
    ae_lr: float = 2e-3
    ae_batch: int = 32
    denoiser_epochs: int = 150
    denoiser_lr: float = 2e-3
    denoiser_batch: int = 64
    denoiser_hidden: int = 64


class NoiseSchedule:
    """Variance schedule; ``alpha_bar(0) == 1`` is the clean-signal limit."""

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0:
            raise ValueError("betas must be a non-empty 1-d array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(betas) < 0):
            raise ValueError("betas must be non-decreasing")
        self.betas = betas
        self.alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])

    @classmethod
    def linear(cls, n_steps: int, beta_start: float, beta_end: float) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, n_steps))

    @classmethod
    def scaled_linear(cls, n_steps: int = 50, beta_start: float = 0.00085,
                      beta_end: float = 0.012, reference_steps: int = 1000) -> "NoiseSchedule":
        """Every ``reference_steps // n_steps``-th cumulative alpha of a scaled-linear schedule."""
        if reference_steps % n_steps:
            raise ValueError("reference_steps must be a multiple of n_steps")
        fine = np.linspace(beta_start ** 0.5, beta_end ** 0.5, reference_steps) ** 2
        stride = reference_steps // n_steps
        ab = np.cumprod(1.0 - fine)[stride - 1::stride]
        return cls(1.0 - ab / np.concatenate([[1.0], ab[:-1]]))

    @classmethod
    def from_config(cls, cfg: "DiffusionConfig") -> "NoiseSchedule":
        return cls.scaled_linear(cfg.n_steps, cfg.beta_start, cfg.beta_end, cfg.reference_steps)

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t):
        return self.alpha_bars[t]

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.betas, dtype="<f8").tobytes()).hexdigest()


def add_noise(x0: np.ndarray, t, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise``; ``t`` may be per-sample."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > sched.n_steps):
        raise ValueError(f"timestep outside [0, {sched.n_steps}]")
    if np.shape(noise) != np.shape(x0):
        raise ValueError(f"noise shape {np.shape(noise)} differs from x0 shape {np.shape(x0)}")
    ab = sched.alpha_bar(t_arr)
    if t_arr.ndim:
        ab = ab.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def _mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = T.sub(pred, Tensor(target))
    return T.mean_all(T.mul(diff, diff))


def train_autoencoder(images: np.ndarray, cfg: DiffusionConfig, rng: np.random.Generator):
    """Fit encoder/decoder on reconstruction MSE; returns (encoder, decoder, losses)."""
    enc = ImageToLatent(rng, cfg.latent_channels)
    dec = LatentDecoder(rng, cfg.latent_channels)
    params = T.ParameterSet()
    params.merge("enc", enc.params)
    params.merge("dec", dec.params)
    opt = AdamW(params, weight_decay=0.0)
    losses = []
    n = len(images)
    for step in range(cfg.ae_steps):
        idx = rng.choice(n, size=min(cfg.ae_batch, n), replace=False)
        batch = images[idx]
        params.zero_grad()
        with T.Tape() as tape:
            loss = _mse(dec.net(enc(Tensor(batch))), batch)
        if not np.isfinite(loss.item()):
            raise DiffusionDivergence(f"autoencoder loss became {loss.item()} at step {step}")
        tape.backward(loss)
        opt.step(cosine_lr(step, cfg.ae_steps, cfg.ae_lr))
        losses.append(loss.item())
    return enc, dec, losses


@dataclass
class DenoiserReport:
    epoch_mse: list = field(default_factory=list)
    val_mse_initial: float = float("nan")
    val_mse_final: float = float("nan")


def _val_draws(latents: np.ndarray, n_steps: int, rng: np.random.Generator, repeats: int = 4):
    n = len(latents)
    t = rng.integers(1, n_steps + 1, size=n * repeats)
    eps = rng.normal(size=(n * repeats,) + latents.shape[1:])
    return np.tile(np.arange(n), repeats), t, eps


def denoiser_mse(net: DenoiserNet, latents: np.ndarray, tokens: np.ndarray, sched: NoiseSchedule,
                 draws) -> float:
    idx, t, eps = draws
    xt = add_noise(latents[idx], t, eps, sched)
    pred = net(Tensor(xt), t, tokens[idx])
    return float(np.mean((pred.data - eps) ** 2))


def train_denoiser(latents: np.ndarray, tokens: np.ndarray, sched: NoiseSchedule,
                   cfg: DiffusionConfig, rng: np.random.Generator, n_tokens: int,
                   net: DenoiserNet | None = None, val_fraction: float = 0.1):
    """Epsilon-prediction training; returns (net, DenoiserReport).

    Fewer than 10 samples: validation reuses the training samples.  Training
    sets smaller than one batch are repeated to fill it.
    """
    latents = np.asarray(latents, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(latents)
    if n == 0:
        raise ValueError("empty latent dataset")
    if net is None:
        net = DenoiserNet(rng, n_tokens, sched.n_steps, cfg.latent_channels, cfg.denoiser_hidden,
                          prompts_per_class=cfg.prompts_per_class, alpha_bars=sched.alpha_bars)
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction)) if n >= 10 else 0
    val_idx, tr_idx = (perm[:n_val], perm[n_val:]) if n_val else (perm, perm)
    draws = _val_draws(latents[val_idx], sched.n_steps, rng)
    report = DenoiserReport()
    report.val_mse_initial = denoiser_mse(net, latents[val_idx], tokens[val_idx], sched, draws)

    opt = AdamW(net.params, weight_decay=0.0)
    if len(tr_idx) < cfg.denoiser_batch:
        # tiny datasets are tiled so every step still sees a full batch of noise draws
        tr_idx = np.resize(tr_idx, cfg.denoiser_batch)
    batch = cfg.denoiser_batch
    steps_per_epoch = -(-len(tr_idx) // batch)
    total = cfg.denoiser_epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.denoiser_epochs):
        order = rng.permutation(tr_idx)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * batch:(s + 1) * batch]
            t = rng.integers(1, sched.n_steps + 1, size=len(idx))
            eps = rng.normal(size=latents[idx].shape)
            xt = add_noise(latents[idx], t, eps, sched)
            net.params.zero_grad()
            with T.Tape() as tape:
                loss = _mse(net(Tensor(xt), t, tokens[idx]), eps)
            value = loss.item()
            if not np.isfinite(value):
                raise DiffusionDivergence(
                    f"denoiser loss became {value} at epoch {epoch}, step {s} "
                    f"(lr={cosine_lr(step, total, cfg.denoiser_lr):.3g})")
            tape.backward(loss)
            opt.step(cosine_lr(step, total, cfg.denoiser_lr))
            step += 1
            losses.append(value)
        report.epoch_mse.append(float(np.mean(losses)))
    report.val_mse_final = denoiser_mse(net, latents[val_idx], tokens[val_idx], sched, draws)
    return net, report


def sample_latents(net: DenoiserNet, tokens, seeds, sched: NoiseSchedule, latent_shape,
                   x0_clip: float | None = 3.0) -> np.ndarray:
    """Deterministic first-order (DDIM, eta=0) sampling, one noise seed per sample.

    The clean-latent estimate is clipped to ``[-x0_clip, x0_clip]`` and the
    noise estimate recomputed from it before each update.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    x = np.stack([np.random.default_rng(int(s)).normal(size=latent_shape) for s in seeds])
    for t in range(sched.n_steps, 0, -1):
        ab_t = sched.alpha_bar(t)
        ab_prev = sched.alpha_bar(t - 1)
        eps = net(Tensor(x), np.full(len(x), t), tokens).data
        x0 = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
        if x0_clip is not None:
            x0 = np.clip(x0, -x0_clip, x0_clip)
            eps = (x - np.sqrt(ab_t) * x0) / np.sqrt(1.0 - ab_t)
        x = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite latent at sampler step t={t}")
    return x


def sample_latent(net: DenoiserNet, token: int, sched: NoiseSchedule, seed: int,
                  latent_shape, x0_clip: float | None = 3.0) -> np.ndarray:
    return sample_latents(net, [token], [seed], sched, latent_shape, x0_clip)[0]


@dataclass
class GenerationRecord:
    latent: np.ndarray
    image: np.ndarray
    label: int
    token: int
    seed: int


def decode_one(decoder: LatentDecoder, latent: np.ndarray) -> np.ndarray:
    return decoder.decode(Tensor(latent[None])).data[0]


def generate_class_set(net: DenoiserNet, decoder: LatentDecoder, class_label: int,
                       sched: NoiseSchedule, seed_base: int, count: int = 20,
                       batch_size: int = 2, prompts_per_class: int = 10,
                       latent_shape=(4, 4, 4), x0_clip: float | None = 3.0) -> list[GenerationRecord]:
    """``count`` (latent, decoded image) pairs for one class.

    Records are grouped ``batch_size`` per condition token; each class owns
    ``prompts_per_class`` tokens ``class_label * prompts_per_class + variant``.
    """
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    if count > 10_000:
        raise ValueError("count above 10000 would collide seed ranges")
    records = []
    for i in range(count):
        token = class_label * prompts_per_class + (i // batch_size) % prompts_per_class
        seed = seed_base + class_label * 10_000 + i
        latent = sample_latent(net, token, sched, seed, latent_shape, x0_clip)
        records.append(GenerationRecord(latent, decode_one(decoder, latent), class_label, token, seed))
    return records


@dataclass
class Generator:
    encoder: ImageToLatent
    decoder: LatentDecoder
    denoiser: DenoiserNet
    sched: NoiseSchedule
    cfg: DiffusionConfig
    ae_losses: list
    denoiser_report: DenoiserReport
    image_size: int = 32

    @property
    def latent_shape(self) -> tuple:
        return (self.cfg.latent_channels, self.image_size // DOWNSAMPLE, self.image_size // DOWNSAMPLE)

    def encode(self, images: np.ndarray) -> np.ndarray:
        return self.encoder(Tensor(images)).data * self.decoder.latent_scale


def build_generator(images: np.ndarray, labels: np.ndarray, variants: np.ndarray,
                    cfg: DiffusionConfig, seed: int) -> Generator:
    """Autoencoder first, then the denoiser on scaled latents (two-stage)."""
    enc, dec, ae_losses = train_autoencoder(images, cfg, stream(seed, "autoencoder"))
    raw = enc(Tensor(images)).data
    dec.latent_scale = float(1.0 / raw.std())
    latents = raw * dec.latent_scale
    tokens = labels * cfg.prompts_per_class + variants % cfg.prompts_per_class
    n_tokens = int(labels.max() + 1) * cfg.prompts_per_class
    sched = NoiseSchedule.from_config(cfg)
    net, report = train_denoiser(latents, tokens, sched, cfg, stream(seed, "denoiser"), n_tokens)
    log.info("denoiser val mse %.4f -> %.4f", report.val_mse_initial, report.val_mse_final)
    return Generator(enc, dec, net, sched, cfg, ae_losses, report, images.shape[-1])


class GenerationCache:
    """Generated records grouped by class, with the decoder that produced the images."""

    def __init__(self, by_class: dict, sched_digest: str = "", decoder: LatentDecoder | None = None,
                 count_hint: str = ""):
        self.by_class = {int(c): list(r) for c, r in by_class.items()}
        self.sched_digest = sched_digest
        self.decoder = decoder
        self.count_hint = count_hint

    def records(self, class_label: int) -> list[GenerationRecord]:
        return self.by_class.get(int(class_label), [])

    def manifest(self) -> dict:
        return {
            "classes": {str(c): {"count": len(r), "seeds": [x.seed for x in r]}
                        for c, r in sorted(self.by_class.items())},
            "schedule_hash": self.sched_digest,
        }

    def save(self, directory) -> None:
        d = Path(directory)
        for c, recs in sorted(self.by_class.items()):
            tensors = {
                "latents": np.stack([r.latent for r in recs]) if recs else np.zeros((0,)),
                "images": np.stack([r.image for r in recs]) if recs else np.zeros((0,)),
            }
            meta = {"class": c, "labels": [r.label for r in recs], "tokens": [r.token for r in recs],
                    "seeds": [r.seed for r in recs]}
            io.save_tensors(d / f"class_{c:03d}.bin", tensors, meta)
        if self.decoder is not None:
            io.save_tensors(d / "decoder.bin", self.decoder.params.state(),
                            {"latent_scale": self.decoder.latent_scale,
                             "latent_channels": self.decoder.latent_channels})
        io.write_json(d / "manifest.json", self.manifest())

    @classmethod
    def load(cls, directory, count_hint: str = "") -> "GenerationCache":
        d = Path(directory)
        manifest = io.read_json(d / "manifest.json")
        by_class = {}
        for c in manifest["classes"]:
            tensors, meta = io.load_tensors(d / f"class_{int(c):03d}.bin")
            recs = [GenerationRecord(tensors["latents"][i], tensors["images"][i], meta["labels"][i],
                                     meta["tokens"][i], meta["seeds"][i])
                    for i in range(len(meta["seeds"]))]
            by_class[int(c)] = recs
        decoder = None
        if (d / "decoder.bin").exists():
            state, meta = io.load_tensors(d / "decoder.bin")
            decoder = LatentDecoder(np.random.default_rng(0), meta["latent_channels"])
            decoder.params.load_state(state)
            decoder.latent_scale = meta["latent_scale"]
        return cls(by_class, manifest["schedule_hash"], decoder, count_hint)


def build_cache(gen: Generator, n_classes: int, seed: int, count: int | None = None,
                batch_size: int | None = None) -> GenerationCache:
    count = gen.cfg.count if count is None else count
    batch_size = gen.cfg.batch_size if batch_size is None else batch_size
    by_class = {c: generate_class_set(gen.denoiser, gen.decoder, c, gen.sched, seed, count,
                                      batch_size, gen.cfg.prompts_per_class, gen.latent_shape,
                                      gen.cfg.x0_clip)
                for c in range(n_classes)}
    return GenerationCache(by_class, gen.sched.digest(), gen.decoder)


def config_dict(cfg: DiffusionConfig) -> dict:
    return asdict(cfg)
