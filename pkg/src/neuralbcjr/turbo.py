"""Serial turbo decoding: inner BCJR -> deinterleave -> outer BCJR -> interleave.

The inner code consists of one trellis per coded stream (stream ``f`` reads
observation column ``f``); the outer code is either one joint trellis with a
binary output per stream or a list of single-stream trellises whose
uncoded-bit LLRs are summed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .bcjr import BcjrConfig, branch_metrics, branch_metrics_backward, run_backward, run_forward
from .codes import Interleaver
from .trellis import Trellis


@dataclass(frozen=True)
class TurboConfig:
    interleaver: Interleaver
    iterations: int = 6
    inner: BcjrConfig = field(default_factory=BcjrConfig)
    outer: BcjrConfig = field(default_factory=BcjrConfig)
    outer_mode: str = "joint"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.outer_mode not in ("joint", "per-stream"):
            raise ValueError("outer_mode must be 'joint' or 'per-stream'")

    def with_sigma2(self, sigma2):
        from dataclasses import replace

        return replace(self, inner=replace(self.inner, sigma2=sigma2))


@dataclass
class TurboTrellises:
    outer: Trellis | list
    inner: list

    @property
    def streams(self):
        return len(self.inner)


def _outer_list(tr: TurboTrellises, mode):
    if mode == "joint":
        if not isinstance(tr.outer, Trellis):
            raise ValueError("joint mode needs a single outer trellis")
        if tr.outer.depth != tr.streams:
            raise ValueError("outer trellis depth must equal the number of inner streams")
        return [tr.outer]
    outer = list(tr.outer) if not isinstance(tr.outer, Trellis) else [tr.outer]
    if len(outer) != tr.streams or any(t.depth != 1 for t in outer):
        raise ValueError("per-stream mode needs one single-output trellis per stream")
    return outer


def _clip(x, c):
    return np.clip(x, -c, c)


def _run(cfg: TurboConfig, trellises: TurboTrellises, y, u=None, keep=False):
    y = np.asarray(y, dtype=float)
    if y.ndim != 3 or y.shape[2] != trellises.streams:
        raise ValueError(f"y must be (B, k, {trellises.streams})")
    b, k, n_streams = y.shape
    if len(cfg.interleaver) != k:
        raise ValueError("interleaver length does not match the block length")
    outers = _outer_list(trellises, cfg.outer_mode)
    iv = cfg.interleaver
    ci, co = cfg.inner, cfg.outer
    outer_ext = np.zeros((b, k, n_streams))
    trace, tapes = [], []
    prev = None
    for it in range(cfg.iterations):
        prior_perm = iv.interleave(outer_ext, axis=1)
        inner_ext_perm = np.empty_like(prior_perm)
        inner_tapes = []
        for f, tr in enumerate(trellises.inner):
            gamma = branch_metrics(tr, y[:, :, f : f + 1], prior_perm[:, :, f], None,
                                   ci.sigma2, ci.clip)
            post, tape = run_forward(tr, gamma, ci, ("uncoded",), keep)
            inner_ext_perm[:, :, f] = ci.damping * (post["uncoded"] - _clip(prior_perm[:, :, f], ci.clip))
            inner_tapes.append(tape)
        inner_ext = iv.deinterleave(inner_ext_perm, axis=1)
        outer_tapes = []
        next_outer_ext = np.empty_like(inner_ext)
        info_llr = np.zeros((b, k))
        for j, tr in enumerate(outers):
            cols = slice(None) if cfg.outer_mode == "joint" else slice(j, j + 1)
            la = inner_ext[:, :, cols]
            gamma = branch_metrics(tr, None, None, la, co.sigma2, co.clip)
            post, tape = run_forward(tr, gamma, co, ("uncoded", "coded"), keep)
            info_llr += post["uncoded"]
            next_outer_ext[:, :, cols] = co.damping * (post["coded"] - _clip(la, co.clip))
            outer_tapes.append(tape)
        entry = {
            "iteration": it + 1,
            "mean_abs_llr": float(np.mean(np.abs(info_llr))),
            "sign_flips": 0 if prev is None else int(np.sum(np.sign(info_llr) != np.sign(prev))),
        }
        if u is not None:
            errs = np.where(info_llr >= 0, 1.0, -1.0) != u
            entry["bit_errors"] = int(errs.sum())
            entry["ber"] = float(errs.mean())
            entry["block_errors"] = int(errs.any(axis=1).sum())
            entry["bler"] = float(errs.any(axis=1).mean())
        trace.append(entry)
        if keep:
            tapes.append((prior_perm, inner_ext, inner_tapes, outer_tapes))
        outer_ext = next_outer_ext
        prev = info_llr
    return info_llr, trace, tapes


def turbo_decode(cfg: TurboConfig, trellises: TurboTrellises, y, u=None):
    """Iteratively decode ``y`` of shape ``(B, k, F)`` (or ``(k, F)``).

    Returns ``(info_llr, trace)``; ``trace`` has one dict per iteration with the
    mean |LLR|, sign flips against the previous iteration and, when the true
    bits ``u`` are given, error counts.
    """
    y = np.asarray(y, dtype=float)
    single = y.ndim == 2
    if single:
        y = y[None]
        u = None if u is None else np.asarray(u)[None]
    info_llr, trace, _ = _run(cfg, trellises, y, u)
    return (info_llr[0] if single else info_llr), trace


def turbo_forward(cfg, trellises, y, u=None):
    """Batched forward pass that keeps what :func:`turbo_backward` needs."""
    info_llr, trace, tapes = _run(cfg, trellises, y, u, keep=True)
    return info_llr, trace, (np.asarray(y, dtype=float), tapes)


def turbo_backward(cfg: TurboConfig, trellises: TurboTrellises, saved, grad_info_llr):
    """Adjoint of the unrolled decoder for upstream ``d loss / d info_llr``.

    Returns ``{"y": (B, k, F), "symbols": [per inner trellis (W, 1)]}``.
    """
    y, tapes = saved
    iv = cfg.interleaver
    ci, co = cfg.inner, cfg.outer
    outers = _outer_list(trellises, cfg.outer_mode)
    g_y = np.zeros_like(y)
    g_sym = [np.zeros_like(t.outputs) for t in trellises.inner]
    g_la_c = np.zeros_like(y)  # gradient w.r.t. the outer extrinsic of this iteration
    for it in range(len(tapes) - 1, -1, -1):
        prior_perm, inner_ext, inner_tapes, outer_tapes = tapes[it]
        last = it == len(tapes) - 1
        g_inner_ext = np.zeros_like(inner_ext)
        for j, (tr, tape) in enumerate(zip(outers, outer_tapes)):
            cols = slice(None) if cfg.outer_mode == "joint" else slice(j, j + 1)
            la = inner_ext[:, :, cols]
            g_coded_post = co.damping * g_la_c[:, :, cols]
            grads = {"coded": g_coded_post}
            if last:
                grads["uncoded"] = grad_info_llr
            gbar = run_backward(tape, grads)
            gin = branch_metrics_backward(tr, gbar, None, None, la, co.sigma2, co.clip)
            direct = np.where(np.abs(la) < co.clip, -g_coded_post, 0.0)
            g_inner_ext[:, :, cols] += gin["apriori_output"] + direct
        g_ext_pi = iv.interleave(g_inner_ext, axis=1)
        g_la_pi = np.zeros_like(prior_perm)
        for f, (tr, tape) in enumerate(zip(trellises.inner, inner_tapes)):
            la = prior_perm[:, :, f]
            g_post = ci.damping * g_ext_pi[:, :, f]
            gbar = run_backward(tape, {"uncoded": g_post})
            gin = branch_metrics_backward(tr, gbar, y[:, :, f : f + 1], la, None,
                                          ci.sigma2, ci.clip)
            g_y[:, :, f] += gin["y"][:, :, 0]
            g_sym[f] += gin["symbols"]
            g_la_pi[:, :, f] = gin["apriori_input"] + np.where(
                np.abs(la) < ci.clip, -g_post, 0.0
            )
        g_la_c = iv.deinterleave(g_la_pi, axis=1)
    return {"y": g_y, "symbols": g_sym}


def turbo_decode_backward(cfg, trellises, y, grad_info_llr):
    """Gradient of ``sum(info_llr * grad_info_llr)`` with respect to ``y`` and inner symbols."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 2
    if single:
        y = y[None]
        grad_info_llr = np.asarray(grad_info_llr)[None]
    _, _, saved = turbo_forward(cfg, trellises, y)
    out = turbo_backward(cfg, trellises, saved, grad_info_llr)
    if single:
        out["y"] = out["y"][0]
    return out


def trace_to_csv(trace, path):
    keys = list(trace[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(trace)
