"""1D circular-convolution networks with hand-written reverse-mode gradients.

Activations are laid out ``(B, N, depth)``.  A layer computes

    out[b, i, o] = act(bias[o] + sum_{d, j} kernel[d, o, j] * in[b, (i + j - c) mod N, d])

with ``c = (kappa - 1) // 2``, so the kernel is centred on the output position.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codes import BlockEncoder, InvalidInputError

ACTIVATIONS = ("elu", "linear")
WEIGHTS_FORMAT = "neuralbcjr-cnn"
WEIGHTS_VERSION = 1


class WeightFileError(ValueError):
    """Malformed, truncated or inconsistent weight file."""


@dataclass(frozen=True, eq=False)
class Layer:
    kernel: np.ndarray = field(repr=False)  # (in_depth, out_depth, kappa)
    bias: np.ndarray = field(repr=False)  # (out_depth,)
    activation: str = "linear"

    def __post_init__(self):
        kernel = np.asarray(self.kernel, dtype=float)
        bias = np.asarray(self.bias, dtype=float)
        if kernel.ndim != 3:
            raise InvalidInputError("kernel must be (in_depth, out_depth, kappa)")
        if kernel.shape[2] % 2 != 1:
            raise InvalidInputError(f"kernel size {kernel.shape[2]} must be odd")
        if bias.shape != (kernel.shape[1],):
            raise InvalidInputError("bias length must equal out_depth")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "bias", bias)

    @property
    def in_depth(self):
        return self.kernel.shape[0]

    @property
    def out_depth(self):
        return self.kernel.shape[1]

    @property
    def kappa(self):
        return self.kernel.shape[2]

    @property
    def offsets(self):
        c = (self.kappa - 1) // 2
        return np.arange(self.kappa) - c


@dataclass(frozen=True, eq=False)
class CnnModel:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InvalidInputError("model needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.out_depth != b.in_depth:
                raise InvalidInputError(
                    f"depth chain broken: {a.out_depth} feeds {b.in_depth}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def in_depth(self):
        return self.layers[0].in_depth

    @property
    def out_depth(self):
        return self.layers[-1].out_depth

    def params(self):
        """Flat list ``[kernel0, bias0, kernel1, bias1, ...]``."""
        out = []
        for layer in self.layers:
            out += [layer.kernel, layer.bias]
        return out

    def with_params(self, params):
        it = iter(params)
        return CnnModel(
            tuple(Layer(next(it), next(it), layer.activation) for layer in self.layers)
        )


def receptive_field(model: CnnModel) -> int:
    return sum(layer.kappa - 1 for layer in model.layers) + 1


def group_masks(depths, kernel_sizes, groups=1):
    """0/1 kernel masks for a grouped (block-diagonal) convolution stack.

    With ``groups = g`` every depth is split into ``g`` equal contiguous
    slices and slice ``i`` of a layer only reads slice ``i`` of its input, so
    output depth group ``i`` depends on input depth group ``i`` alone.
    """
    if isinstance(kernel_sizes, int):
        kernel_sizes = [kernel_sizes] * (len(depths) - 1)
    if groups < 1 or any(d % groups for d in depths):
        raise InvalidInputError(f"every depth must be divisible by groups={groups}")
    masks = []
    for d_in, d_out, kappa in zip(depths, depths[1:], kernel_sizes):
        gi = np.arange(d_in) // (d_in // groups)
        go = np.arange(d_out) // (d_out // groups)
        m = (gi[:, None] == go[None, :]).astype(float)
        masks.append(np.repeat(m[:, :, None], kappa, axis=2))
    return masks


def model_masks(model: CnnModel, groups=1):
    depths = [model.in_depth] + [layer.out_depth for layer in model.layers]
    return group_masks(depths, [layer.kappa for layer in model.layers], groups)


def random_model(depths, kernel_sizes, seed, hidden_activation="elu", groups=1):
    """Random model with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights.

    ``depths`` lists the feature depths from input to output, so a model with
    ``L`` layers needs ``L + 1`` depths.  The last layer is linear.  With
    ``groups > 1`` the kernels are block-diagonal (see :func:`group_masks`).
    """
    rng = np.random.default_rng(seed)
    if isinstance(kernel_sizes, int):
        kernel_sizes = [kernel_sizes] * (len(depths) - 1)
    if len(kernel_sizes) != len(depths) - 1:
        raise InvalidInputError("need one kernel size per layer")
    masks = group_masks(depths, kernel_sizes, groups)
    layers = []
    for li, kappa in enumerate(kernel_sizes):
        d_in, d_out = depths[li], depths[li + 1]
        bound = 1.0 / np.sqrt(d_in // groups * kappa)
        act = "linear" if li == len(kernel_sizes) - 1 else hidden_activation
        kernel = rng.uniform(-bound, bound, size=(d_in, d_out, kappa))
        if groups > 1:
            kernel = kernel * masks[li]
        layers.append(Layer(kernel, rng.uniform(-bound, bound, size=d_out), act))
    return CnnModel(tuple(layers))


def _unfold(x, offsets):
    n = x.shape[1]
    idx = (np.arange(n)[:, None] + offsets[None, :]) % n
    return x[:, idx, :]  # (B, N, kappa, D)


def _activate(z, activation):
    if activation == "linear":
        return z
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _activation_grad(z, activation):
    if activation == "linear":
        return np.ones_like(z)
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


def _check_input(model, v):
    v = np.asarray(v, dtype=float)
    single = v.ndim == 2
    if single:
        v = v[None]
    if v.ndim != 3 or v.shape[2] != model.in_depth:
        raise InvalidInputError(
            f"expected input depth {model.in_depth}, got shape {np.shape(v)}"
        )
    return v, single


def _forward_cached(model, v):
    acts = [v]
    pre = []
    x = v
    for layer in model.layers:
        xu = _unfold(x, layer.offsets)
        z = np.einsum("bnkd,dok->bno", xu, layer.kernel, optimize=True) + layer.bias
        pre.append(z)
        x = _activate(z, layer.activation)
        acts.append(x)
    return acts, pre


def forward(model: CnnModel, v):
    """Run the model on ``(N, F)`` or ``(B, N, F)`` input."""
    v, single = _check_input(model, v)
    acts, _ = _forward_cached(model, v)
    return acts[-1][0] if single else acts[-1]


def vjp(model: CnnModel, v, upstream):
    """Reverse pass for ``sum(forward(v) * upstream)``.

    Returns ``(output, input_grad, [(dkernel, dbias), ...])``.
    """
    v, single = _check_input(model, v)
    g = np.asarray(upstream, dtype=float)
    if single:
        g = g[None]
    acts, pre = _forward_cached(model, v)
    if g.shape != acts[-1].shape:
        raise InvalidInputError("upstream must match the output shape")
    grads = []
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        gz = g * _activation_grad(pre[li], layer.activation)
        xu = _unfold(acts[li], layer.offsets)
        dk = np.einsum("bnkd,bno->dok", xu, gz, optimize=True)
        db = gz.sum(axis=(0, 1))
        grads.append((dk, db))
        gu = np.einsum("bno,dok->bnkd", gz, layer.kernel, optimize=True)
        g = np.zeros_like(acts[li])
        for k, off in enumerate(layer.offsets):
            # input position (i + off) received weight from output i
            g += np.roll(gu[:, :, k, :], off, axis=1)
    grads.reverse()
    out = acts[-1]
    if single:
        return out[0], g[0], grads
    return out, g, grads


def input_gradient(model: CnnModel, v, out_pos: int, out_depth: int):
    """Gradient of one output entry with respect to the whole input."""
    v, single = _check_input(model, v)
    b, n, _ = v.shape
    up = np.zeros((b, n, model.out_depth))
    up[:, out_pos, out_depth] = 1.0
    _, g, _ = vjp(model, v, up)
    return g[0] if single else g


def weight_gradient(model: CnnModel, v, upstream) -> CnnModel:
    """Gradients of ``sum(forward(v) * upstream)`` packed as a CnnModel."""
    _, _, grads = vjp(model, v, upstream)
    return model.with_params([a for pair in grads for a in pair])


def binarize(x):
    """Sign with ``sign(0) = +1``."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def binarize_backward(x, upstream):
    """Saturated straight-through estimator: pass gradient where |x| < 1."""
    return np.where(np.abs(x) < 1.0, upstream, 0.0)


class CnnEncoder(BlockEncoder):
    """Block-encoder view of a CNN, optionally binarized and scaled."""

    def __init__(self, model: CnnModel, binarize_output=False, scale=1.0):
        self.model = model
        self.binarize_output = binarize_output
        self.scale = float(scale)
        self.in_depth = model.in_depth
        self.out_depth = model.out_depth
        half = (receptive_field(model) - 1) // 2
        self.window = (-half, half)

    def __call__(self, v):
        x = forward(self.model, self._check(v))
        if self.binarize_output:
            x = binarize(x)
        return self.scale * x

    def input_gradient(self, v, out_pos, out_depth):
        """Gradient of one output entry; passes the binarizer via the STE."""
        v = self._check(v)
        b, n, _ = v.shape
        up = np.zeros((b, n, self.out_depth))
        up[:, out_pos, out_depth] = self.scale
        if self.binarize_output:
            up = binarize_backward(forward(self.model, v), up)
        return vjp(self.model, v, up)[1]


# Weight files ----------------------------------------------------------------


def model_to_dict(model: CnnModel):
    return {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "layers": [
            {
                "in_depth": layer.in_depth,
                "out_depth": layer.out_depth,
                "kernel_size": layer.kappa,
                "activation": layer.activation,
                "kernel": layer.kernel.tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in model.layers
        ],
    }


def model_from_dict(doc) -> CnnModel:
    if not isinstance(doc, dict) or doc.get("format") != WEIGHTS_FORMAT:
        raise WeightFileError("not a CNN weight file")
    if doc.get("version") != WEIGHTS_VERSION:
        raise WeightFileError(
            f"unsupported weight file version {doc.get('version')!r}"
        )
    layers = []
    try:
        for li, entry in enumerate(doc["layers"]):
            kernel = np.asarray(entry["kernel"], dtype=float)
            bias = np.asarray(entry["bias"], dtype=float)
            shape = (entry["in_depth"], entry["out_depth"], entry["kernel_size"])
            if kernel.shape != shape:
                raise WeightFileError(
                    f"layer {li}: kernel shape {kernel.shape} != declared {shape}"
                )
            layers.append(Layer(kernel, bias, entry["activation"]))
        return CnnModel(tuple(layers))
    except (KeyError, TypeError) as exc:
        raise WeightFileError(f"missing or malformed field: {exc}") from exc
    except InvalidInputError as exc:
        raise WeightFileError(str(exc)) from exc


def save_weights(model: CnnModel, path):
    # json writes floats with repr(), which round-trips doubles exactly
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n")


def load_weights(path) -> CnnModel:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WeightFileError(
            f"{path}: parse error at line {exc.lineno} col {exc.colno}: {exc.msg}"
        ) from exc
    return model_from_dict(doc)
