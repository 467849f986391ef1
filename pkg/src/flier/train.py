"""Smoothed cross-entropy, the latent-factor joint loss and the two-phase training loop."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import io
from . import tensor as T
from .data import AUGMENTATIONS, Episode, augment
from .metrics import EvalResult, evaluate
from .nn import FlierModel
from .optim import AdamW, EmaShadow, cosine_lr, llrd_scale
from .rng import stream
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

PHASE_ORDERS = ("V-first", "G-first")
MODES = ("flier", "augdata", "finetune")


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.5
    epsilon: float = 0.1
    gamma: float = 1.0
    base_lr: float = 1e-4
    weight_decay: float = 0.05
    epochs: int = 40
    batch_size: int = 64
    llrd_decay: float = 0.7
    ema_momentum: float = 0.9998
    phase_order: str = "V-first"
    seed: int = 0
    augment: tuple = ()
    eval_every: int = 0  # 0: evaluate only after the last epoch

    def __post_init__(self):
        self.augment = tuple(self.augment)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError(f"ema_momentum must lie in [0, 1], got {self.ema_momentum}")
        if self.phase_order not in PHASE_ORDERS:
            raise ValueError(f"phase_order must be one of {PHASE_ORDERS}, got {self.phase_order!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ValueError("base_lr and weight_decay must be non-negative")
        if not 0.0 < self.llrd_decay <= 1.0:
            raise ValueError(f"llrd_decay must lie in (0, 1], got {self.llrd_decay}")
        bad = set(self.augment) - set(AUGMENTATIONS)
        if bad:
            raise ValueError(f"unknown augmentations {sorted(bad)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = list(self.augment)
        return d


# --- losses --------------------------------------------------------------------

def smooth_targets(targets, n: int, epsilon: float) -> np.ndarray:
    """Label-smoothed target rows: ``eps/n`` everywhere plus ``1 - eps`` on the target."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if np.any(targets < 0) or np.any(targets >= n):
        raise ValueError(f"target outside [0, {n}): {targets.tolist()}")
    y = np.full((len(targets), n), epsilon / n)
    y[np.arange(len(targets)), targets] += 1.0 - epsilon
    return y


def smoothed_ce(logits: Tensor, targets, epsilon: float, gamma: float = 1.0) -> Tensor:
    """Batch mean of ``-sum_i y_i log p_i`` with ``p = softmax(logits / gamma)``.

    Log-probabilities come from the fused log-softmax, never from ``log(p)``.
    """
    B, n = logits.shape
    y = smooth_targets(targets, n, epsilon)
    logp = T.log_softmax_temp(logits, gamma)
    return T.scale(T.sum_all(T.mul(logp, Tensor(y))), -1.0 / B)


def joint_loss(loss_vp: Tensor, loss_lgp: Tensor, alpha: float) -> Tensor:
    """``alpha * L_LG' + (1 - alpha) * L_V'``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return T.add(T.scale(loss_lgp, alpha), T.scale(loss_vp, 1.0 - alpha))


# --- report ----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss_v: float | None
    loss_vp: float | None
    loss_lgp: float | None
    loss_g: float | None
    lr: float
    acc_raw: float | None = None
    acc_ema: float | None = None


@dataclass
class TrainReport:
    mode: str
    config: dict
    epochs: list = field(default_factory=list)
    final_raw: EvalResult | None = None
    final_ema: EvalResult | None = None
    steps: int = 0
    test_hash: str = ""

    @property
    def best(self) -> EvalResult:
        """The better of raw and EMA weights; ties go to raw."""
        if self.final_ema is not None and self.final_ema.top1 > self.final_raw.top1:
            return self.final_ema
        return self.final_raw

    def losses(self, key: str) -> list:
        return [getattr(r, key) for r in self.epochs]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "config": self.config,
            "steps": self.steps,
            "test_hash": self.test_hash,
            "epochs": [asdict(r) for r in self.epochs],
            "final": {
                "raw": self.final_raw.to_dict() if self.final_raw else None,
                "ema": self.final_ema.to_dict() if self.final_ema else None,
                "best": self.best.to_dict() if self.final_raw else None,
            },
        }

    def to_text(self) -> str:
        def fmt(x):
            return "-" if x is None else f"{x:.6f}"

        lines = [f"# mode={self.mode} steps={self.steps}",
                 "epoch\tL_V\tL_V'\tL_LG'\tL_G\tlr\tacc_raw\tacc_ema"]
        for r in self.epochs:
            lines.append("\t".join([str(r.epoch), fmt(r.loss_v), fmt(r.loss_vp), fmt(r.loss_lgp),
                                    fmt(r.loss_g), f"{r.lr:.6e}", fmt(r.acc_raw), fmt(r.acc_ema)]))
        if self.final_raw is not None:
            b = self.best
            lines.append(f"final top1={b.top1:.6f} top{b.k}={b.top5:.6f} weights={b.weights_used}")
        return "\n".join(lines) + "\n"


# --- training loop ---------------------------------------------------------------

def build_model(n_classes: int, seed: int, latent_channels: int = 4,
                image_size: int = 32) -> FlierModel:
    """Fresh model; image and latent halves draw from separate seed streams."""
    return FlierModel(stream(seed, "init", "image"), stream(seed, "init", "latent"), n_classes,
                      image_size=image_size, latent_channels=latent_channels)


def effective_epochs(cfg: TrainConfig, shots: int) -> int:
    return cfg.epochs * 2 if shots in (1, 2) else cfg.epochs


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _check_finite(value: float, epoch: int, phase: str) -> None:
    if not np.isfinite(value):
        raise TrainingDivergence(f"non-finite loss {value} at epoch {epoch}, phase {phase}")


class _Engine:
    def __init__(self, episode: Episode, model: FlierModel, cfg: TrainConfig, mode: str,
                 test: tuple | None, skip_phase_g: bool = False):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if len(episode.train_labels) == 0:
            raise ValueError("empty episode")
        self.ep, self.model, self.cfg, self.mode, self.test = episode, model, cfg, mode, test
        self.phases = ["V"] if (mode == "finetune" or skip_phase_g) else ["V", "G"]
        if cfg.phase_order == "G-first":
            self.phases.reverse()
        # augdata is the joint phase with the latent branch detached
        self.alpha = 0.0 if mode == "augdata" else cfg.alpha
        self.epochs = effective_epochs(cfg, episode.shots)
        self.batch_v = min(cfg.batch_size, len(episode.train_labels))
        self.batch_g = max(1, min(cfg.batch_size, len(episode.generated_labels)))
        n_v = -(-len(episode.train_labels) // self.batch_v)
        n_g = -(-len(episode.generated_labels) // self.batch_g)
        per_epoch = n_v + (n_g if "G" in self.phases else 0)
        self.total_steps = self.epochs * per_epoch
        self.params = model.params
        self.opt = AdamW(self.params, cfg.weight_decay)
        self.ema = EmaShadow(self.params, cfg.ema_momentum)
        top = self.params.max_depth()
        self.llrd = {k: llrd_scale(self.params.depth(k), top, cfg.llrd_decay) for k in self.params}
        self.image_names = set(model.group("image_encoder") + model.group("probe_v"))
        self.latent_names = set(model.group("latent_encoder") + model.group("probe_l"))
        self.step = 0
        self.rng = {p: {"shuffle": stream(cfg.seed, "train", "shuffle", p),
                        "aug": stream(cfg.seed, "train", "augment", p)} for p in ("V", "G")}

    def _lrs(self) -> tuple[float, dict]:
        lr = cosine_lr(self.step, self.total_steps, self.cfg.base_lr)
        return lr, {k: lr * s for k, s in self.llrd.items()}

    def _apply(self, loss: Tensor, tape: Tape, names: set) -> None:
        self.params.zero_grad()
        tape.backward(loss)
        for k in self.params:
            p = self.params[k]
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        _, lrs = self._lrs()
        self.opt.step(lrs, names)
        self.step += 1
        self.ema.update(self.params)

    def _images(self, images: np.ndarray, phase: str) -> Tensor:
        return Tensor(augment(images, self.cfg.augment, self.rng[phase]["aug"]))

    def phase_v(self, epoch: int) -> float:
        ep, cfg = self.ep, self.cfg
        losses = []
        for idx in _batches(len(ep.train_labels), self.batch_v, self.rng["V"]["shuffle"]):
            with Tape() as tape:
                logits = self.model.image_logits(self._images(ep.train_images[idx], "V"))
                loss = smoothed_ce(logits, ep.train_labels[idx], cfg.epsilon, cfg.gamma)
            _check_finite(loss.item(), epoch, "V")
            losses.append(loss.item())
            self._apply(loss, tape, self.image_names)
        return float(np.mean(losses))

    def phase_g(self, epoch: int) -> tuple[float, float | None, float]:
        ep, cfg, a = self.ep, self.cfg, self.alpha
        vp, lgp, g = [], [], []
        for idx in _batches(len(ep.generated_labels), self.batch_g, self.rng["G"]["shuffle"]):
            labels = ep.generated_labels[idx]
            images = self._images(ep.generated_images[idx], "G")
            latents = Tensor(ep.latents[idx])
            # a branch with zero weight runs off the tape: reported, never trained
            with Tape() as tape:
                if a < 1.0:
                    loss_vp = smoothed_ce(self.model.image_logits(images), labels, cfg.epsilon,
                                          cfg.gamma)
                if a > 0.0 and self.mode == "flier":
                    loss_lgp = smoothed_ce(self.model.latent_logits(latents), labels, cfg.epsilon,
                                           cfg.gamma)
            if a >= 1.0:
                loss_vp = smoothed_ce(self.model.image_logits(images), labels, cfg.epsilon,
                                      cfg.gamma)
            if a <= 0.0 and self.mode == "flier":
                loss_lgp = smoothed_ce(self.model.latent_logits(latents), labels, cfg.epsilon,
                                       cfg.gamma)
            if self.mode == "flier":
                with tape:
                    loss = joint_loss(loss_vp, loss_lgp, a)
                lgp.append(loss_lgp.item())
            else:
                loss = loss_vp
            _check_finite(loss.item(), epoch, "G")
            vp.append(loss_vp.item())
            g.append(loss.item())
            names = set()
            if a < 1.0:
                names |= self.image_names
            if a > 0.0 and self.mode == "flier":
                names |= self.latent_names
            self._apply(loss, tape, names)
        return float(np.mean(vp)), (float(np.mean(lgp)) if lgp else None), float(np.mean(g))

    def evaluate(self) -> tuple[EvalResult, EvalResult]:
        images, labels = self.test
        raw = evaluate(self.model, images, labels, self.cfg.gamma, weights_used="raw")
        with self.ema.applied(self.params):
            ema = evaluate(self.model, images, labels, self.cfg.gamma, weights_used="ema")
        return raw, ema

    def run(self) -> TrainReport:
        cfg = self.cfg
        report = TrainReport(self.mode, cfg.to_dict())
        if self.test is not None:
            h = hashlib.sha256(np.ascontiguousarray(self.test[0], dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(self.test[1], dtype="<i8").tobytes())
            report.test_hash = h.hexdigest()
        for epoch in range(self.epochs):
            lr = self._lrs()[0]
            rec = EpochRecord(epoch, None, None, None, None, lr)
            for phase in self.phases:
                if phase == "V":
                    rec.loss_v = self.phase_v(epoch)
                else:
                    rec.loss_vp, rec.loss_lgp, rec.loss_g = self.phase_g(epoch)
            last = epoch == self.epochs - 1
            periodic = cfg.eval_every and (epoch + 1) % cfg.eval_every == 0
            if self.test is not None and (last or periodic):
                raw, ema = self.evaluate()
                rec.acc_raw, rec.acc_ema = raw.top1, ema.top1
                if last:
                    report.final_raw, report.final_ema = raw, ema
            report.epochs.append(rec)
            log.debug("epoch %d %s", epoch, rec)
        report.steps = self.step
        self.params.zero_grad()
        return report


def train_flier(episode: Episode, model: FlierModel, cfg: TrainConfig, test: tuple | None = None,
                skip_phase_g: bool = False) -> tuple[TrainReport, EmaShadow]:
    """Two-phase joint training; ``test`` is an ``(images, labels)`` pair for evaluation."""
    eng = _Engine(episode, model, cfg, "flier", test, skip_phase_g)
    return eng.run(), eng.ema


def train_baseline_finetune(episode: Episode, model: FlierModel, cfg: TrainConfig,
                            use_generated: bool, test: tuple | None = None
                            ) -> tuple[TrainReport, EmaShadow]:
    """Image encoder and probe only; with ``use_generated`` the generated images join training."""
    if use_generated and len(episode.generated_labels) == 0:
        raise ValueError("use_generated=True but the episode holds no generated images")
    eng = _Engine(episode, model, cfg, "augdata" if use_generated else "finetune", test)
    return eng.run(), eng.ema


def save_checkpoint(path, model: FlierModel, ema: EmaShadow, report: TrainReport) -> None:
    tensors = {f"raw/{k}": v for k, v in model.params.state().items()}
    tensors.update({f"ema/{k}": v for k, v in ema.shadow.items()})
    io.save_tensors(path, tensors, {"n_classes": model.n_classes, "report": report.to_dict()})


def load_checkpoint(path) -> tuple[FlierModel, EmaShadow, dict]:
    tensors, meta = io.load_tensors(path)
    model = build_model(meta["n_classes"], 0)
    model.params.load_state({k: tensors[f"raw/{k}"] for k in model.params})
    ema = EmaShadow(model.params, meta["report"]["config"]["ema_momentum"])
    for k in model.params:
        ema.shadow[k] = tensors[f"ema/{k}"]
    return model, ema, meta
