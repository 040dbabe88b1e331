"""Serially concatenated code: outer encoder, interleaver, inner encoder, norm.

``SerialCode`` holds the transmitter; ``SerialCode.decoder_trellises`` builds
the matching classical receiver from the analysis and trellis modules.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .analysis import (
    DEFAULT_THRESHOLD,
    estimate_memory,
    flip_energy,
    select_window,
    split_inner_streams,
)
from .bcjr import BcjrConfig
from .cnn import CnnEncoder, CnnModel, model_from_dict
from .codes import (
    Interleaver,
    MultiStreamEncoder,
    PolynomialEncoder,
    normalize_power,
    random_bipolar,
)
from .trellis import build_from_cnn, build_from_polynomial
from .turbo import TurboConfig, TurboTrellises

G0_TAPS = (-2, 0, 1)
G1_TAPS = (-1, 0, 3)
POWER_SAMPLES = 4096


def outer_code(taps=(G0_TAPS, G1_TAPS)) -> MultiStreamEncoder:
    return MultiStreamEncoder([PolynomialEncoder(tuple(t)) for t in taps])


@dataclass(eq=False)
class SerialCode:
    """``u -> outer -> interleave -> inner -> per-block power normalization``.

    ``u`` is ``(B, k)`` bipolar; the transmitted block is ``(B, k, F)`` with
    one column per inner output stream, so ``n = k * F`` channel uses.
    """

    outer: MultiStreamEncoder
    interleaver: Interleaver
    inner_model: CnnModel

    def __post_init__(self):
        if self.outer.out_depth != self.inner_model.in_depth:
            raise ValueError("outer output depth must match the inner input depth")

    @property
    def k(self):
        return len(self.interleaver)

    @property
    def streams(self):
        return self.inner_model.out_depth

    @property
    def rate(self):
        return 1.0 / self.streams

    @property
    def inner(self):
        return CnnEncoder(self.inner_model)

    def with_model(self, model):
        return replace(self, inner_model=model)

    def coded(self, u):
        """Interleaved outer codeword ``(B, k, F_c)``: the inner encoder input."""
        u = np.asarray(u, dtype=float)
        c = self.outer(u[:, :, None])
        return self.interleaver.interleave(c, axis=1)

    def encode_raw(self, u):
        return self.inner(self.coded(u))

    def encode(self, u):
        return normalize_power(self.encode_raw(u), axes=(1, 2))

    def symbol_scale(self, samples=POWER_SAMPLES, seed=0):
        """``1 / sqrt(E[raw^2])``: maps raw inner outputs to the channel scale."""
        rng = np.random.default_rng(seed)
        u = random_bipolar(rng, (max(1, samples // self.k), self.k))
        return float(1.0 / np.sqrt(np.mean(self.encode_raw(u) ** 2)))


@dataclass(frozen=True)
class ReceiverConfig:
    iterations: int = 6
    mode: str = "log-map"
    wrap: int = 16
    damping: float | None = None
    tailbiting: str = "wrap"
    windows: tuple | None = None  # per inner stream (lo, hi); None = estimate
    memory: int | None = None  # cap per stream when estimating
    threshold: float = DEFAULT_THRESHOLD

    def bcjr(self, sigma2=1.0):
        return BcjrConfig(self.mode, self.wrap, sigma2, self.damping, self.tailbiting)


def inner_windows(code: SerialCode, threshold=DEFAULT_THRESHOLD, memory=None):
    """Contributing window per inner stream, optionally capped at ``memory``."""
    out = []
    for stream in split_inner_streams(code.inner):
        flip = flip_energy(stream)
        prof = estimate_memory(flip, threshold)
        if memory is not None and prof.memory > memory:
            out.append(select_window(flip, memory))
        else:
            out.append(prof.contributing)
    return tuple(out)


def inner_trellises(code: SerialCode, windows, scale=None):
    if scale is None:
        scale = code.symbol_scale()
    streams = split_inner_streams(code.inner)
    return [build_from_cnn(s, w, scale=scale) for s, w in zip(streams, windows)]


def outer_trellis(code: SerialCode):
    return build_from_polynomial(code.outer)


@dataclass(eq=False)
class Receiver:
    """Classical turbo receiver matched to a :class:`SerialCode`."""

    code: SerialCode
    config: ReceiverConfig = field(default_factory=ReceiverConfig)
    trellises: TurboTrellises | None = None
    windows: tuple | None = None

    def __post_init__(self):
        if self.trellises is None:
            self.refresh()

    def refresh(self, scale=None):
        cfg = self.config
        if self.windows is None:
            self.windows = cfg.windows or inner_windows(self.code, cfg.threshold, cfg.memory)
        self.trellises = TurboTrellises(
            outer_trellis(self.code), inner_trellises(self.code, self.windows, scale)
        )

    def turbo_config(self, sigma2, iterations=None):
        cfg = self.config
        return TurboConfig(
            self.code.interleaver,
            iterations or cfg.iterations,
            cfg.bcjr(sigma2),
            cfg.bcjr(1.0),
        )


# Desk-scale fixture ------------------------------------------------------

DESK_K = 32
DESK_DEPTHS = (2, 16, 2)
DESK_KERNELS = (3, 3)
DESK_WINDOW = (-2, 1)


def desk_code(model: CnnModel | None = None, k=DESK_K):
    """Outer G0/G1, linear interleaver, inner 2-16-2 CNN (shipped weights)."""
    if model is None:
        model = load_desk_model()
    return SerialCode(outer_code(), Interleaver.linear(k), model)


def load_desk_model() -> CnnModel:
    text = resources.files("neuralbcjr").joinpath("data/desk_inner.json").read_text()
    return model_from_dict(json.loads(text))
