"""Training the inner encoder against the differentiable turbo receiver.

The gradient path is

    BCE(LLRs, bits) -> turbo adjoint -> observations -> power norm -> CNN weights.

The receiver's symbol tables are treated as constants inside one update and
re-derived from the current encoder every ``refresh_period`` updates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .bcjr import BcjrConfig
from .cnn import CnnModel, model_masks, random_model, vjp
from .codes import normalize_power, normalize_power_backward, random_bipolar
from .sim import snr_to_sigma2
from .system import SerialCode, inner_trellises, outer_trellis
from .turbo import TurboConfig, TurboTrellises, turbo_backward, turbo_forward


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def bce_loss(llr, u):
    """Mean of ``-log sigmoid(L * u)`` over all bits."""
    z = np.asarray(llr, dtype=float) * np.asarray(u, dtype=float)
    if z.size == 0:
        raise ValueError("empty input")
    return float(np.mean(np.logaddexp(0.0, -z)))


def bce_grad(llr, u):
    llr = np.asarray(llr, dtype=float)
    u = np.asarray(u, dtype=float)
    if llr.shape != u.shape:
        raise ValueError("LLRs and bits must have the same shape")
    # d/dL softplus(-L u) = -u * sigmoid(-L u)
    return -u * 0.5 * (1.0 - np.tanh(0.5 * llr * u)) / llr.size


# Optimizers --------------------------------------------------------------


class Sgd:
    def __init__(self, lr, momentum=0.0):
        self.lr, self.momentum = lr, momentum
        self._v = None

    def step(self, params, grads):
        if self.momentum == 0.0:
            return [p - self.lr * g for p, g in zip(params, grads)]
        if self._v is None:
            self._v = [np.zeros_like(p) for p in params]
        self._v = [self.momentum * v + g for v, g in zip(self._v, grads)]
        return [p - self.lr * v for p, v in zip(params, self._v)]


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self._m = self._v = None
        self._t = 0

    def step(self, params, grads):
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        self._m = [b1 * m + (1 - b1) * g for m, g in zip(self._m, grads)]
        self._v = [b2 * v + (1 - b2) * g * g for v, g in zip(self._v, grads)]
        c1 = 1 - b1 ** self._t
        c2 = 1 - b2 ** self._t
        return [
            p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            for p, m, v in zip(params, self._m, self._v)
        ]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1000
    lr: float = 1e-5
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    snr_db: float = 4.0
    iterations: int = 2
    updates: int = 1000
    seed: int = 0
    refresh_period: int = 1
    mode: str = "log-map"
    wrap: int = 16
    divergence_factor: float = 10.0
    divergence_patience: int = 50
    groups: int = 1  # >1 keeps the inner kernels block-diagonal

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.updates < 1:
            raise ValueError("updates must be >= 1")
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be >= 1")
        if self.groups < 1:
            raise ValueError("groups must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    def make_optimizer(self):
        if self.optimizer == "adam":
            return Adam(self.lr, self.beta1, self.beta2, self.eps)
        return Sgd(self.lr, self.momentum)

    def bcjr(self, sigma2=1.0):
        return BcjrConfig(self.mode, self.wrap, sigma2)


@dataclass
class TrainResult:
    model: CnnModel
    history: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def losses(self):
        return np.array([h["loss"] for h in self.history])

    def history_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.history[0]))
            w.writeheader()
            for h in self.history:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in h.items()})


def _trellises(code, windows, raw):
    scale = 1.0 / math.sqrt(float(np.mean(raw ** 2)))
    return TurboTrellises(outer_trellis(code), inner_trellises(code, windows, scale))


def loss_and_grad(code: SerialCode, windows, u, noise, sigma2, cfg: TrainConfig,
                  trellises=None):
    """One forward/backward pass on a batch with fixed noise.

    Returns ``(loss, weight_grads, llr, trellises)``; ``weight_grads`` is a
    flat list aligned with ``CnnModel.params()``.
    """
    coded_perm = code.coded(u)
    model = code.inner_model
    raw = code.inner(coded_perm)
    x = normalize_power(raw, axes=(1, 2))
    y = x + noise
    if trellises is None:
        trellises = _trellises(code, windows, raw)
    tcfg = TurboConfig(code.interleaver, cfg.iterations, cfg.bcjr(sigma2), cfg.bcjr())
    llr, _, saved = turbo_forward(tcfg, trellises, y)
    loss = bce_loss(llr, u)
    g_y = turbo_backward(tcfg, trellises, saved, bce_grad(llr, u))["y"]
    g_raw = normalize_power_backward(raw, g_y, axes=(1, 2))
    _, _, grads = vjp(model, coded_perm, g_raw)
    return loss, [a for pair in grads for a in pair], llr, trellises


def train_encoder(code: SerialCode, windows, cfg: TrainConfig, log=None) -> TrainResult:
    """Optimize ``code.inner_model`` for BCE at the output of the turbo receiver.

    ``windows`` fixes the contributing window of each inner stream for the
    whole run.  The batch for update ``i`` is drawn from
    ``default_rng([seed, i])``, so runs are reproducible.
    """
    sigma2 = float(snr_to_sigma2(cfg.snr_db, code.rate))
    opt = cfg.make_optimizer()
    masks = model_masks(code.inner_model, cfg.groups) if cfg.groups > 1 else None
    history = []
    trellises = None
    version = 0
    initial = None
    streak = 0
    for step in range(cfg.updates):
        rng = np.random.default_rng([cfg.seed, step])
        u = random_bipolar(rng, (cfg.batch_size, code.k))
        noise = math.sqrt(sigma2) * rng.standard_normal((cfg.batch_size, code.k, code.streams))
        if step % cfg.refresh_period == 0:
            trellises = None
            version += 1
        loss, grads, _, trellises = loss_and_grad(code, windows, u, noise, sigma2, cfg,
                                                 trellises)
        if masks is not None:
            grads = [g * masks[i // 2] if i % 2 == 0 else g for i, g in enumerate(grads)]
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        history.append({"update": step, "loss": loss, "grad_norm": gnorm,
                        "table_version": version, "table_age": step % cfg.refresh_period})
        if log is not None:
            log(history[-1])
        if initial is None:
            initial = loss
        streak = streak + 1 if loss > cfg.divergence_factor * initial else 0
        if streak >= cfg.divergence_patience:
            raise TrainingDiverged(
                f"loss above {cfg.divergence_factor}x initial for {streak} updates", history
            )
        params = opt.step(code.inner_model.params(), grads)
        code = code.with_model(code.inner_model.with_params(params))
    return TrainResult(code.inner_model, history, {**asdict(cfg), "windows": list(windows)})


def finetune_encoder(code: SerialCode, windows, cfg: TrainConfig | None = None, log=None):
    """Fine-tune an existing inner encoder for a (reduced) receiver."""
    return train_encoder(code, windows, cfg or TrainConfig(), log)


def train_inner_from_scratch(code: SerialCode, windows, cfg: TrainConfig,
                             depths=(2, 16, 2), kernel_sizes=(3, 3), init_seed=0, log=None):
    """Train a randomly initialized inner CNN with the outer code held fixed."""
    model = random_model(depths, kernel_sizes, init_seed, groups=cfg.groups)
    result = train_encoder(code.with_model(model), windows, cfg, log)
    result.config.update(init_seed=init_seed, depths=list(depths),
                         kernel_sizes=list(kernel_sizes))
    return result


def validate(code: SerialCode, windows, snr_db, iterations=2, blocks=10_000,
             seed=12345, mode="log-map", wrap=16, batch_size=1000):
    """BCE and BLER of the matched receiver on a fixed validation set."""
    sigma2 = float(snr_to_sigma2(snr_db, code.rate))
    cfg = TrainConfig(iterations=iterations, mode=mode, wrap=wrap)
    tcfg = TurboConfig(code.interleaver, iterations, cfg.bcjr(sigma2), cfg.bcjr())
    trellises = TurboTrellises(outer_trellis(code), inner_trellises(code, windows))
    from .turbo import turbo_decode

    total, errors, done, b = 0.0, 0, 0, 0
    while done < blocks:
        n = min(batch_size, blocks - done)
        rng = np.random.default_rng([seed, b])
        u = random_bipolar(rng, (n, code.k))
        noise = math.sqrt(sigma2) * rng.standard_normal((n, code.k, code.streams))
        llr, _ = turbo_decode(tcfg, trellises, code.encode(u) + noise)
        total += bce_loss(llr, u) * n
        errors += int(np.any(np.where(llr >= 0, 1.0, -1.0) != u, axis=1).sum())
        done += n
        b += 1
    return {"bce": total / blocks, "bler": errors / blocks, "block_errors": errors,
            "blocks": blocks}
