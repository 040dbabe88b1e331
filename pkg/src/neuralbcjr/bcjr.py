"""Tail-biting BCJR decoding in the log domain, with its reverse-mode adjoint.

Arrays are batched: observations ``(B, N, F)``, a priori LLRs on input bits
``(B, N)`` and on output (coded) bits ``(B, N, F)``.  LLRs follow
``L = log p(+1) / p(-1)``.

Two tail-biting strategies are available.  ``"wrap"`` decodes the circularly
extended sequence of ``N + 2w`` steps from uniform path metrics and keeps the
middle ``N`` steps; it is the fast approximation used in turbo decoding.
``"exact"`` runs one recursion per possible start state, pinned at both ends,
and combines them, which gives the exact tail-biting posterior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trellis import Trellis

MODES = ("log-map", "max-log")
NEG = -1e30  # log-probability of a forbidden state


@dataclass(frozen=True)
class BcjrConfig:
    mode: str = "log-map"
    wrap: int = 16
    sigma2: float = 1.0
    damping: float | None = None
    tailbiting: str = "wrap"
    clip: float = 60.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.tailbiting not in ("wrap", "exact"):
            raise ValueError("tailbiting must be 'wrap' or 'exact'")
        if self.wrap < 0:
            raise ValueError("wrap length must be >= 0")
        if not self.sigma2 > 0:
            raise ValueError("noise variance must be positive")
        if self.damping is None:
            object.__setattr__(self, "damping", 1.0 if self.mode == "log-map" else 0.75)
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


def max_star(x, y, mode="log-map"):
    """``log(exp(x) + exp(y))`` or its max-log approximation."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m = np.maximum(x, y)
    if mode == "max-log":
        return m
    with np.errstate(invalid="ignore"):
        corr = np.log1p(np.exp(-np.abs(x - y)))
    return np.where(np.isneginf(m), m, m + np.where(np.isnan(corr), 0.0, corr))


def _reduce(x, axis, mode):
    m = np.max(x, axis=axis)
    if mode == "max-log":
        return m
    return m + np.log(np.sum(np.exp(x - np.expand_dims(m, axis)), axis=axis))


def _weights(x, axis, mode):
    """d reduce(x) / dx: softmax for log-MAP, first-argmax indicator for max-log."""
    if mode == "max-log":
        arg = np.argmax(x, axis=axis)
        return (np.arange(x.shape[axis]).reshape(
            [-1 if a == (axis % x.ndim) else 1 for a in range(x.ndim)]
        ) == np.expand_dims(arg, axis)).astype(float)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


# Branch metrics ------------------------------------------------------------


def _batch(x, ndim):
    """Add a batch axis when ``x`` has ``ndim - 1`` dimensions."""
    if x is None:
        return None, False
    x = np.asarray(x, dtype=float)
    if x.ndim == ndim - 1:
        return x[None], True
    return x, False


def _obs(trellis, y):
    y = np.asarray(y, dtype=float)
    if y.ndim == 2 and trellis.depth == 1:
        y = y[:, :, None]
    if y.ndim != 3 or y.shape[2] != trellis.depth:
        raise ValueError(f"observations must be (B, N, {trellis.depth})")
    return y


def branch_metrics(trellis: Trellis, y=None, apriori_input=None, apriori_output=None,
                   sigma2=1.0, clip=60.0, length=None):
    """Branch metrics ``gamma`` of shape ``(B, N, W)``.

    ``gamma_t(w) = 1/2 La_in[t + hi] * b(w) + 1/2 sum_f La_out[t, f] * c_f(w)
                   - sum_f |y[t, f] - x_f(w)|^2 / (2 sigma2)``

    Missing inputs contribute nothing; ``y=None`` is the noiseless-prior-only
    limit.  A priori values are clipped to ``+-clip``.
    """
    if sigma2 <= 0:
        raise ValueError("noise variance must be positive")
    parts = [a for a in (y, apriori_input, apriori_output) if a is not None]
    if not parts and length is None:
        raise ValueError("need observations or a priori information")
    b = parts[0].shape[0] if parts else 1
    n = parts[0].shape[1] if parts else length
    gamma = np.zeros((b, n, trellis.n_transitions))
    if apriori_input is not None:
        la = np.clip(apriori_input, -clip, clip)
        if la.shape != (b, n):
            raise ValueError("input a priori must be (B, N)")
        la_step = np.roll(la, -trellis.alignment, axis=1)
        gamma += 0.5 * la_step[:, :, None] * trellis.input_bit
    if apriori_output is not None:
        if not trellis.binary:
            raise ValueError("output a priori needs a trellis with binary outputs")
        lo = np.clip(apriori_output, -clip, clip)
        if lo.shape != (b, n, trellis.depth):
            raise ValueError(f"output a priori must be (B, N, {trellis.depth})")
        gamma += 0.5 * np.einsum("btf,wf->btw", lo, trellis.outputs)
    if y is not None:
        y = _obs(trellis, y)
        if y.shape[:2] != (b, n):
            raise ValueError("observation length mismatch")
        d = y[:, :, None, :] - trellis.outputs[None, None, :, :]
        gamma -= np.sum(d * d, axis=-1) / (2.0 * sigma2)
    return gamma


def gamma_inner(trellis, y, apriori, sigma2):
    """Branch metrics of an inner decoder (channel plus input-bit prior)."""
    y, single = _batch(y, 3 if np.ndim(y) == 3 or trellis.depth > 1 else 2)
    apriori, _ = _batch(apriori, 2)
    g = branch_metrics(trellis, y, apriori, None, sigma2)
    return g[0] if single else g


def gamma_outer(trellis, apriori):
    """Branch metrics of an outer decoder (coded-bit prior only)."""
    apriori, single = _batch(apriori, 3)
    g = branch_metrics(trellis, None, None, apriori)
    return g[0] if single else g


# Core recursions -------------------------------------------------------------
#
# With H = S/2, transition w = h*S + 2r + b (h = input bit, r < H, b in {0,1})
# leaves state 2r + b and enters state h*H + r.  Viewing per-step arrays as
# (B, 2, H, 2) = [h, r, b] turns both recursions into broadcasts plus a
# pairwise reduction, with no gathers.


def _pair(x, y, mode, weight=False):
    """``(reduce(x, y), weight of x)``; the weight is None unless requested.

    For log-MAP the reduction is ``max + log1p(exp(-|x - y|))``, which is
    several times faster than ``np.logaddexp``, and the weight of ``x`` is
    ``exp(x - reduce)``.
    """
    m = np.maximum(x, y)
    if mode == "max-log":
        return m, ((x >= y).astype(float) if weight else None)
    r = np.abs(x - y)
    np.negative(r, out=r)
    np.exp(r, out=r)
    np.log1p(r, out=r)
    r += m
    if not weight:
        return r, None
    return r, np.exp(x - r)


def _alpha_step(a, g, mode, weight=False):
    """One alpha update for ``a`` (B, S) and ``g`` (B, W).

    Returns the unnormalized next alpha and, optionally, the pair weights.
    """
    b, s = a.shape
    if s == 1:
        return _pair(a + g[:, :1], a + g[:, 1:], mode, weight)
    x = a.reshape(b, 1, s // 2, 2) + g.reshape(b, 2, s // 2, 2)
    r, p = _pair(x[..., 0], x[..., 1], mode, weight)
    return r.reshape(b, s), p


def _beta_step(bt, g, mode, weight=False):
    b, s = bt.shape
    if s == 1:
        return _pair(bt + g[:, :1], bt + g[:, 1:], mode, weight)
    x = bt.reshape(b, 2, s // 2, 1) + g.reshape(b, 2, s // 2, 2)
    r, p = _pair(x[:, 0], x[:, 1], mode, weight)
    return r.reshape(b, s), p


def _alpha_adjoint(abar, p, gbar, aprev):
    """Accumulate the adjoint of one alpha step into ``gbar`` (B, W) and
    ``aprev`` (B, S); ``p`` holds the step's pair weights."""
    b, s = abar.shape
    if s == 1:
        c0 = abar * p
        gbar[:, :1] += c0
        gbar[:, 1:] += abar - c0
        aprev += abar
        return
    ab = abar.reshape(b, 2, s // 2)
    c0 = ab * p
    c1 = ab - c0
    g4 = gbar.reshape(b, 2, s // 2, 2)
    g4[..., 0] += c0
    g4[..., 1] += c1
    a3 = aprev.reshape(b, s // 2, 2)
    a3[..., 0] += c0[:, 0] + c0[:, 1]
    a3[..., 1] += c1[:, 0] + c1[:, 1]


def _beta_adjoint(bbar, p, gbar, bnext):
    b, s = bbar.shape
    if s == 1:
        c0 = bbar * p
        gbar[:, :1] += c0
        gbar[:, 1:] += bbar - c0
        bnext += bbar
        return
    bb = bbar.reshape(b, s // 2, 2)
    c0 = bb * p
    c1 = bb - c0
    g4 = gbar.reshape(b, 2, s // 2, 2)
    g4[:, 0] += c0
    g4[:, 1] += c1
    n3 = bnext.reshape(b, 2, s // 2)
    n3[:, 0] += c0[..., 0] + c0[..., 1]
    n3[:, 1] += c1[..., 0] + c1[..., 1]


def _joint(alpha, g, beta):
    """``alpha[s'] + gamma[w] + beta[s]`` per transition; time-major inputs."""
    t, b, s = alpha.shape
    if s == 1:
        return alpha + g + beta
    x = (alpha.reshape(t, b, 1, s // 2, 2) + g.reshape(t, b, 2, s // 2, 2)
         + beta.reshape(t, b, 2, s // 2, 1))
    return x.reshape(t, b, 2 * s)


class _Tape:
    """Everything the adjoint needs from one forward run."""

    __slots__ = (
        "trellis", "cfg", "b", "n", "lanes", "wrap", "g", "alpha", "beta",
        "delta", "sets", "a_pos", "a_neg", "const", "targets", "pa", "pb",
    )


def _output_sets(trellis, targets):
    sets = []
    for tgt in targets:
        if tgt == "uncoded":
            sets.append(trellis.input_bit)
        elif tgt == "coded":
            if not trellis.binary:
                raise ValueError("coded-bit output needs a binary trellis")
            sets.extend(trellis.outputs[:, f] for f in range(trellis.depth))
        else:
            raise ValueError(f"unknown target {tgt!r}")
    return [(np.flatnonzero(s > 0), np.flatnonzero(s < 0)) for s in sets]


def run_forward(trellis: Trellis, gamma, cfg: BcjrConfig, targets=("uncoded",),
                keep_weights=False):
    """Forward-backward pass on branch metrics ``(B, N, W)``.

    Returns ``(llrs, tape)`` where ``llrs`` maps each target to per-step LLRs:
    ``"uncoded"`` gives ``(B, N)`` indexed by input bit, ``"coded"`` gives
    ``(B, N, F)`` indexed by output position.  ``keep_weights`` stores the
    per-step pair weights so that :func:`run_backward` need not recompute them.
    """
    b, n, _ = gamma.shape
    s_count = trellis.n_states
    mode = cfg.mode
    gt = np.ascontiguousarray(np.moveaxis(gamma, 1, 0))  # (N, B, W)
    if cfg.tailbiting == "wrap":
        w = cfg.wrap
        if w > n:
            raise ValueError(f"wrap length {w} exceeds block length {n}")
        g = np.concatenate([gt[n - w:], gt, gt[:w]], axis=0)
        lanes = 1
        a0 = np.zeros((b, s_count))
        b_end = a0
    else:
        w = 0
        lanes = s_count
        g = np.repeat(gt, lanes, axis=1)
        a0 = np.full((b * lanes, s_count), NEG)
        a0[np.arange(b * lanes), np.tile(np.arange(lanes), b)] = 0.0
        b_end = a0
    t_count, bl = g.shape[0], g.shape[1]

    alpha = np.empty((t_count + 1, bl, s_count))
    beta = np.empty((t_count + 1, bl, s_count))
    c_alpha = np.zeros((t_count + 1, bl))
    c_beta = np.zeros((t_count + 1, bl))
    pa = pb = None
    if keep_weights:
        pa = np.empty((t_count, bl, s_count))
        pb = np.empty((t_count, bl, s_count))
    alpha[0] = a0
    for t in range(t_count):
        a, p = _alpha_step(alpha[t], g[t], mode, keep_weights)
        if keep_weights:
            pa[t] = p.reshape(bl, s_count)
        peak = a.max(axis=1)
        alpha[t + 1] = a - peak[:, None]
        c_alpha[t + 1] = c_alpha[t] + peak
    beta[t_count] = b_end
    for t in range(t_count - 1, -1, -1):
        bb, p = _beta_step(beta[t + 1], g[t], mode, keep_weights)
        if keep_weights:
            pb[t] = p.reshape(bl, s_count)
        peak = bb.max(axis=1)
        beta[t] = bb - peak[:, None]
        c_beta[t] = c_beta[t + 1] + peak

    delta = _joint(alpha[w : w + n], g[w : w + n], beta[w + 1 : w + n + 1])  # (N, BL, W)
    sets = _output_sets(trellis, targets)
    a_pos = np.stack([_reduce(delta[:, :, p], 2, mode) for p, _ in sets], axis=-1)
    a_neg = np.stack([_reduce(delta[:, :, q], 2, mode) for _, q in sets], axis=-1)
    const = (c_alpha[w : w + n] + c_beta[w + 1 : w + n + 1])[:, :, None]
    if lanes == 1:
        llr = a_pos - a_neg
    else:
        shape = (n, b, lanes, len(sets))
        llr = (_reduce((a_pos + const).reshape(shape), 2, mode)
               - _reduce((a_neg + const).reshape(shape), 2, mode))
    llr = np.moveaxis(llr, 0, 1)  # (B, N, sets)

    tape = _Tape()
    tape.trellis, tape.cfg, tape.b, tape.n, tape.lanes = trellis, cfg, b, n, lanes
    tape.wrap, tape.g, tape.alpha, tape.beta = w, g, alpha, beta
    tape.delta, tape.sets = delta, sets
    tape.a_pos, tape.a_neg, tape.const = a_pos, a_neg, const
    tape.targets = tuple(targets)
    tape.pa, tape.pb = pa, pb

    out = {}
    k = 0
    for tgt in targets:
        if tgt == "uncoded":
            out[tgt] = np.roll(llr[:, :, k], trellis.alignment, axis=1)
            k += 1
        else:
            out[tgt] = llr[:, :, k : k + trellis.depth]
            k += trellis.depth
    return out, tape


def run_backward(tape: _Tape, grads: dict):
    """Adjoint of :func:`run_forward`: returns d/d gamma, shape ``(B, N, W)``."""
    trellis, mode = tape.trellis, tape.cfg.mode
    b, n, lanes, w = tape.b, tape.n, tape.lanes, tape.wrap
    w_count = trellis.n_transitions
    n_sets = len(tape.sets)

    gl = np.zeros((b, n, n_sets))
    k = 0
    for tgt in tape.targets:
        width = 1 if tgt == "uncoded" else trellis.depth
        gt = grads.get(tgt)
        if gt is not None:
            gt = np.asarray(gt, dtype=float)
            if tgt == "uncoded":
                gl[:, :, k] = np.roll(gt, -trellis.alignment, axis=1)
            else:
                gl[:, :, k : k + width] = gt
        k += width
    gl = np.moveaxis(gl, 1, 0)  # (N, B, sets)

    if lanes == 1:
        g_pos, g_neg = gl, -gl
    else:
        shape = (n, b, lanes, n_sets)
        rho_p = _weights((tape.a_pos + tape.const).reshape(shape), 2, mode)
        rho_n = _weights((tape.a_neg + tape.const).reshape(shape), 2, mode)
        g_pos = (gl[:, :, None] * rho_p).reshape(n, b * lanes, n_sets)
        g_neg = (-gl[:, :, None] * rho_n).reshape(n, b * lanes, n_sets)

    g, alpha, beta = tape.g, tape.alpha, tape.beta
    t_count, bl, s_count = g.shape[0], g.shape[1], trellis.n_states
    dbar = np.zeros((n, bl, w_count))
    for k, (p, q) in enumerate(tape.sets):
        if mode == "max-log":
            dbar[:, :, p] += g_pos[:, :, k, None] * _weights(tape.delta[:, :, p], 2, mode)
            dbar[:, :, q] += g_neg[:, :, k, None] * _weights(tape.delta[:, :, q], 2, mode)
            continue
        # softmax within each set: exp(delta - log-sum of the set)
        # (blend by exact 0/1 products: a difference with NEG would lose digits)
        pos = np.zeros(w_count)
        pos[p] = 1.0
        neg = 1.0 - pos
        a_set = tape.a_neg[:, :, k, None] * neg + tape.a_pos[:, :, k, None] * pos
        g_set = g_neg[:, :, k, None] * neg + g_pos[:, :, k, None] * pos
        dbar += g_set * np.exp(tape.delta - a_set)

    gbar = np.zeros_like(g)
    abar = np.zeros_like(alpha)
    bbar = np.zeros_like(beta)
    gbar[w : w + n] += dbar
    if s_count == 1:
        abar[w : w + n] += dbar.sum(axis=2, keepdims=True)
        bbar[w + 1 : w + n + 1] += dbar.sum(axis=2, keepdims=True)
    else:
        d5 = dbar.reshape(n, bl, 2, s_count // 2, 2)
        abar[w : w + n] += d5.sum(axis=2).reshape(n, bl, s_count)
        bbar[w + 1 : w + n + 1] += d5.sum(axis=4).reshape(n, bl, s_count)

    # Per-step normalization only shifts alpha/beta by constants that the
    # output differences cancel, so the adjoint ignores it.
    half = max(s_count // 2, 1)
    a_shape = (bl, 1) if s_count == 1 else (bl, 2, half)
    b_shape = (bl, 1) if s_count == 1 else (bl, half, 2)
    for t in range(t_count - 1, -1, -1):
        if tape.pa is not None:
            p = tape.pa[t].reshape(a_shape)
        else:
            p = _alpha_step(alpha[t], g[t], mode, True)[1]
        _alpha_adjoint(abar[t + 1], p, gbar[t], abar[t])
    for t in range(t_count):
        if tape.pb is not None:
            p = tape.pb[t].reshape(b_shape)
        else:
            p = _beta_step(beta[t + 1], g[t], mode, True)[1]
        _beta_adjoint(bbar[t], p, gbar[t], bbar[t + 1])

    if lanes > 1:
        out = gbar.reshape(n, b, lanes, w_count).sum(axis=2)
    else:
        out = gbar[w : w + n].copy()
        if w:
            out[n - w :] += gbar[:w]
            out[:w] += gbar[w + n :]
    return np.ascontiguousarray(np.moveaxis(out, 0, 1))


def branch_metrics_backward(trellis, gbar, y=None, apriori_input=None,
                            apriori_output=None, sigma2=1.0, clip=60.0):
    """Gradients of a scalar with respect to the inputs of :func:`branch_metrics`."""
    out = {}
    if apriori_input is not None:
        g = 0.5 * np.einsum("btw,w->bt", gbar, trellis.input_bit)
        g = np.roll(g, trellis.alignment, axis=1)
        out["apriori_input"] = np.where(np.abs(apriori_input) < clip, g, 0.0)
    if apriori_output is not None:
        g = 0.5 * np.einsum("btw,wf->btf", gbar, trellis.outputs)
        out["apriori_output"] = np.where(np.abs(apriori_output) < clip, g, 0.0)
    if y is not None:
        y = _obs(trellis, y)
        tot = gbar.sum(axis=2)[:, :, None]
        gx = np.einsum("btw,wf->btf", gbar, trellis.outputs)
        out["y"] = -(y * tot - gx) / sigma2
        gy = np.einsum("btw,btf->wf", gbar, y)
        out["symbols"] = (gy - trellis.outputs * gbar.sum(axis=(0, 1))[:, None]) / sigma2
    return out


# Public decoder --------------------------------------------------------------


def _prepare(trellis, y, apriori_input, apriori_output):
    single = (
        (apriori_input is not None and np.ndim(apriori_input) == 1)
        or (apriori_output is not None and np.ndim(apriori_output) == 2)
        or (y is not None and (np.ndim(y) == 1 or (np.ndim(y) == 2 and trellis.depth > 1)))
    )

    def lift(a):
        if a is None:
            return None
        a = np.asarray(a, dtype=float)
        if not np.all(np.isfinite(a)):
            raise ValueError("decoder inputs must be finite")
        return a[None] if single else a

    y = lift(y)
    if y is not None:
        y = _obs(trellis, y)
    return y, lift(apriori_input), lift(apriori_output), single


def decode(trellis: Trellis, config: BcjrConfig, y=None, apriori_input=None,
           apriori_output=None, target="uncoded"):
    """Decode one block or a batch; returns ``(posterior, extrinsic)``.

    ``target="uncoded"`` yields LLRs of the trellis input bits, ``"coded"`` of
    the (binary) output bits.  The extrinsic output is
    ``damping * (posterior - a priori)`` for the same bits; channel terms stay
    in the extrinsic part.
    """
    y, prior_in, prior_out, single = _prepare(trellis, y, apriori_input, apriori_output)
    gamma = branch_metrics(trellis, y, prior_in, prior_out, config.sigma2, config.clip)
    llrs, _ = run_forward(trellis, gamma, config, (target,))
    post = llrs[target]
    prior = prior_in if target == "uncoded" else prior_out
    ext = post if prior is None else post - np.clip(prior, -config.clip, config.clip)
    ext = config.damping * ext
    if single:
        return post[0], ext[0]
    return post, ext


def decode_backward(trellis: Trellis, config: BcjrConfig, y=None, apriori_input=None,
                    apriori_output=None, target="uncoded", grad_posterior=None,
                    grad_extrinsic=None):
    """Reverse-mode adjoint of :func:`decode`.

    Returns a dict with gradients for every supplied input (``"y"``,
    ``"apriori_input"``, ``"apriori_output"``) plus ``"symbols"`` (the trellis
    output table) when observations were given.
    """
    y_shape = None if y is None else np.shape(y)
    y, prior_in, prior_out, single = _prepare(trellis, y, apriori_input, apriori_output)
    gamma = branch_metrics(trellis, y, prior_in, prior_out, config.sigma2, config.clip)
    llrs, tape = run_forward(trellis, gamma, config, (target,), keep_weights=True)
    post = llrs[target]

    def lift(g):
        if g is None:
            return np.zeros_like(post)
        g = np.asarray(g, dtype=float)
        return g[None] if single else g

    g_ext = lift(grad_extrinsic)
    g_post = lift(grad_posterior) + config.damping * g_ext
    gbar = run_backward(tape, {target: g_post})
    grads = branch_metrics_backward(trellis, gbar, y, prior_in, prior_out, config.sigma2,
                                    config.clip)
    prior_key = "apriori_input" if target == "uncoded" else "apriori_output"
    prior = prior_in if target == "uncoded" else prior_out
    if prior is not None:
        direct = np.where(np.abs(prior) < config.clip, -config.damping * g_ext, 0.0)
        grads[prior_key] = grads[prior_key] + direct
    if single:
        grads = {k: (v if k == "symbols" else v[0]) for k, v in grads.items()}
    if "y" in grads:
        grads["y"] = grads["y"].reshape(y_shape)
    return grads
