"""Branch/trunk networks, DeepONet evaluation and checkpoint I/O.

A DeepONet evaluates ``<f_B(x_B), f_T(x_T)>`` where ``f_B`` and ``f_T`` are
MLPs that apply their activation after every layer except the last.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .linalg import as_matrix

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("identity", "relu", "abs")


class ShapeError(ValueError):
    pass


class UnsupportedOperationError(ValueError):
    pass


class CheckpointError(ValueError):
    """Malformed checkpoint file; ``location`` says where parsing failed."""

    def __init__(self, message: str, location: str = ""):
        super().__init__(f"{message} (at {location})" if location else message)
        self.location = location


class CheckpointVersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class Activation:
    kind: str = "abs"

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}; expected one of {ACTIVATIONS}")

    # All three are 1-Lipschitz and positively homogeneous. For abs the
    # product contraction holds with constant 1; relu does not satisfy it but
    # the field is kept uniform.
    @property
    def lipschitz_constant(self) -> float:
        return 1.0

    @property
    def contraction_constant(self) -> float:
        return 1.0

    @property
    def positively_homogeneous(self) -> bool:
        return True

    def __call__(self, z):
        if self.kind == "abs":
            return np.abs(z)
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        return z

    def derivative(self, z):
        """Derivative with value 0 at the kink."""
        if self.kind == "abs":
            return np.sign(z)
        if self.kind == "relu":
            return (z > 0).astype(np.float64)
        return np.ones_like(z)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Mlp:
    layers: tuple
    biases: Optional[tuple] = None
    activation: Activation = Activation("abs")

    def __post_init__(self):
        if len(self.layers) == 0:
            raise ShapeError("an MLP needs at least one layer")
        layers = tuple(_frozen(as_matrix(w, f"layer {i + 1}")) for i, w in enumerate(self.layers))
        for i in range(1, len(layers)):
            if layers[i].shape[1] != layers[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i + 1} expects input dim {layers[i].shape[1]} "
                    f"but layer {i} outputs {layers[i - 1].shape[0]}"
                )
        object.__setattr__(self, "layers", layers)
        if isinstance(self.activation, str):
            object.__setattr__(self, "activation", Activation(self.activation))
        if self.biases is not None:
            if len(self.biases) != len(layers):
                raise ShapeError(f"got {len(self.biases)} bias vectors for {len(layers)} layers")
            biases = []
            for i, (b, w) in enumerate(zip(self.biases, layers)):
                b = _frozen(np.asarray(b, dtype=np.float64).reshape(-1))
                if b.shape[0] != w.shape[0]:
                    raise ShapeError(f"bias {i + 1} has length {b.shape[0]}, layer has {w.shape[0]} rows")
                biases.append(b)
            object.__setattr__(self, "biases", tuple(biases))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].shape[0]

    @property
    def has_bias(self) -> bool:
        return self.biases is not None

    def widths(self) -> list[int]:
        """``[input_dim, rows(layer 1), ..., rows(layer q)]``."""
        return [self.input_dim] + [w.shape[0] for w in self.layers]


@dataclass(frozen=True)
class DeepONetModel:
    branch: Mlp
    trunk: Mlp

    def __post_init__(self):
        if self.branch.output_dim != self.trunk.output_dim:
            raise ShapeError(
                f"branch outputs {self.branch.output_dim} values but trunk outputs {self.trunk.output_dim}"
            )

    @property
    def p(self) -> int:
        return self.branch.output_dim

    @property
    def is_bias_free(self) -> bool:
        return not (self.branch.has_bias or self.trunk.has_bias)

    @property
    def is_symmetric(self) -> bool:
        return self.branch.depth == self.trunk.depth

    def with_layers(self, branch_layers, trunk_layers, branch_biases=None, trunk_biases=None) -> "DeepONetModel":
        return DeepONetModel(
            Mlp(tuple(branch_layers), branch_biases, self.branch.activation),
            Mlp(tuple(trunk_layers), trunk_biases, self.trunk.activation),
        )

    def __call__(self, x_B, x_T):
        return forward_deeponet(self, x_B, x_T)


# ---------------------------------------------------------------------------
# Forward / backward passes.
#
# These work on batches X of shape (m, d) and on weight stacks with arbitrary
# leading dimensions, e.g. (E, R, rows, cols) during the Rademacher ascent.


def forward_cache(layers: Sequence[np.ndarray], biases, act: Activation, X: np.ndarray):
    """Run an MLP on the rows of ``X``; return ``(output, cache)``.

    ``cache`` holds ``(inputs, pre_activation)`` per layer for :func:`backward`.
    """
    h = X
    cache = []
    q = len(layers)
    for i, w in enumerate(layers):
        z = h @ np.swapaxes(w, -1, -2)
        if biases is not None:
            z = z + biases[i][..., None, :]
        cache.append((h, z))
        h = act(z) if i < q - 1 else z
    return h, cache


def backward(layers: Sequence[np.ndarray], act: Activation, cache, grad_out: np.ndarray, with_bias: bool = False):
    """Reverse pass matching :func:`forward_cache`.

    ``grad_out`` is d(objective)/d(output) with the same shape as the output.
    Returns per-layer weight gradients (and bias gradients if requested).
    """
    q = len(layers)
    gw = [None] * q
    gb = [None] * q if with_bias else None
    g = grad_out
    for i in range(q - 1, -1, -1):
        h, z = cache[i]
        if i < q - 1:
            g = g * act.derivative(z)
        gw[i] = np.swapaxes(g, -1, -2) @ h
        if with_bias:
            gb[i] = g.sum(axis=-2)
        if i > 0:
            g = g @ layers[i]
    return (gw, gb) if with_bias else gw


def mlp_outputs(net: Mlp, X) -> np.ndarray:
    """Evaluate ``net`` on every row of ``X`` (shape ``(m, d)``)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ShapeError(f"layer 1 expects inputs of dim {net.input_dim}, got array of shape {X.shape}")
    out, _ = forward_cache(net.layers, net.biases, net.activation, X)
    return out


def forward_mlp(net: Mlp, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != net.input_dim:
        raise ShapeError(f"layer 1 expects input dim {net.input_dim}, got {x.shape[0]}")
    return mlp_outputs(net, x[None, :])[0]


def deeponet_outputs(model: DeepONetModel, X_B, X_T) -> np.ndarray:
    """Vectorized DeepONet over paired rows of ``X_B`` and ``X_T``."""
    fb = mlp_outputs(model.branch, X_B)
    ft = mlp_outputs(model.trunk, X_T)
    if fb.shape[0] != ft.shape[0]:
        raise ShapeError(f"{fb.shape[0]} branch inputs vs {ft.shape[0]} trunk inputs")
    return np.einsum("ij,ij->i", fb, ft)


def forward_deeponet(model: DeepONetModel, x_B, x_T) -> float:
    return float(forward_mlp(model.branch, x_B) @ forward_mlp(model.trunk, x_T))


# ---------------------------------------------------------------------------
# Construction helpers


def glorot_layers(widths: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    """Uniform +-sqrt(6/(fan_in+fan_out)) layers for ``widths = [in, h1, ..., out]``."""
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
    return layers


def init_deeponet(branch_widths, trunk_widths, activation="abs", rng=None) -> DeepONetModel:
    if branch_widths[-1] != trunk_widths[-1]:
        raise ShapeError("branch and trunk must share the output width p")
    rng = np.random.default_rng(0) if rng is None else rng
    act = Activation(activation) if isinstance(activation, str) else activation
    return DeepONetModel(
        Mlp(tuple(glorot_layers(branch_widths, rng)), None, act),
        Mlp(tuple(glorot_layers(trunk_widths, rng)), None, act),
    )


# ---------------------------------------------------------------------------
# Structural rewrites


def _prefix_identity(net: Mlp) -> Mlp:
    d = net.input_dim
    eye = np.eye(d)
    split = np.vstack([eye, -eye])  # z -> (relu(z), relu(-z))
    merge = np.hstack([eye, -eye])  # relu(z) - relu(-z) = z
    layers = (split, net.layers[0] @ merge) + net.layers[1:]
    biases = None
    if net.biases is not None:
        biases = (np.zeros(2 * d),) + net.biases
    return Mlp(layers, biases, net.activation)


def symmetrize_depth(model: DeepONetModel) -> DeepONetModel:
    """Pad the shallower side with exact ReLU identity blocks until depths match."""
    if model.is_symmetric:
        return model
    if model.branch.activation.kind != "relu" or model.trunk.activation.kind != "relu":
        raise UnsupportedOperationError("depth symmetrization needs relu activations on both sides")
    branch, trunk = model.branch, model.trunk
    while branch.depth < trunk.depth:
        branch = _prefix_identity(branch)
    while trunk.depth < branch.depth:
        trunk = _prefix_identity(trunk)
    return DeepONetModel(branch, trunk)


def gate_bound(net: Mlp, input_radius: float = 1.0) -> float:
    """Largest pre-activation magnitude over the box ``[-r, r]^d`` by interval propagation."""
    lo = np.full(net.input_dim, -float(input_radius))
    hi = -lo
    worst = 0.0
    for i, w in enumerate(net.layers):
        c = (lo + hi) / 2
        r = (hi - lo) / 2
        zc = w @ c
        zr = np.abs(w) @ r
        if net.biases is not None:
            zc = zc + net.biases[i]
        zlo, zhi = zc - zr, zc + zr
        if i == net.depth - 1:
            break
        worst = max(worst, float(np.max(np.maximum(np.abs(zlo), np.abs(zhi)), initial=0.0)))
        if net.activation.kind == "relu":
            lo, hi = np.maximum(zlo, 0.0), np.maximum(zhi, 0.0)
        elif net.activation.kind == "abs":
            lo = np.where((zlo <= 0) & (zhi >= 0), 0.0, np.minimum(np.abs(zlo), np.abs(zhi)))
            hi = np.maximum(np.abs(zlo), np.abs(zhi))
        else:
            lo, hi = zlo, zhi
    return worst


def _relu_net_to_abs(net: Mlp, bound: float) -> Mlp:
    # relu(z) = |z|/2 + |z + B|/4 - |z - B|/4 whenever |z| <= B
    layers, biases = [], []
    mix = None
    for i, w in enumerate(net.layers):
        w_in = w if mix is None else w @ mix
        if i == net.depth - 1:
            layers.append(w_in)
            biases.append(np.zeros(w.shape[0]))
            break
        h = w.shape[0]
        layers.append(np.vstack([w_in, w_in, w_in]))
        biases.append(np.concatenate([np.zeros(h), np.full(h, bound), np.full(h, -bound)]))
        eye = np.eye(h)
        mix = np.hstack([0.5 * eye, 0.25 * eye, -0.25 * eye])
    return Mlp(tuple(layers), tuple(biases), Activation("abs"))


def relu_to_abs(model: DeepONetModel, input_bound: Optional[float] = None, input_radius: float = 1.0) -> DeepONetModel:
    """Rewrite a bias-free ReLU DeepONet as an abs DeepONet with biases.

    Outputs agree for every input whose pre-activations stay within
    ``input_bound``. When ``input_bound`` is omitted it is derived from the
    box ``[-input_radius, input_radius]^d`` on both inputs.
    """
    if model.branch.activation.kind != "relu" or model.trunk.activation.kind != "relu":
        raise UnsupportedOperationError("relu_to_abs needs a relu model")
    if not model.is_bias_free:
        raise UnsupportedOperationError("relu_to_abs needs a bias-free model")
    if input_bound is None:
        input_bound = max(gate_bound(model.branch, input_radius), gate_bound(model.trunk, input_radius))
        if input_bound == 0.0:
            input_bound = 1.0
    if not input_bound > 0:
        raise ValueError(f"input_bound must be positive, got {input_bound}")
    return DeepONetModel(_relu_net_to_abs(model.branch, input_bound), _relu_net_to_abs(model.trunk, input_bound))


# ---------------------------------------------------------------------------
# Checkpoints


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _num_list(values) -> str:
    return "[" + ", ".join(_fmt(v) for v in values) + "]"


def _net_json(net: Mlp) -> str:
    layers = ", ".join(_num_list(w.reshape(-1)) for w in net.layers)
    shapes = ", ".join(f"[{w.shape[0]}, {w.shape[1]}]" for w in net.layers)
    biases = "null" if net.biases is None else "[" + ", ".join(_num_list(b) for b in net.biases) + "]"
    return f'{{"layers": [{layers}], "shapes": [{shapes}], "biases": {biases}}}'


def checkpoint_text(model: DeepONetModel) -> str:
    return (
        "{"
        f'"version": {CHECKPOINT_VERSION}, '
        f'"activation": {{"branch": "{model.branch.activation.kind}", "trunk": "{model.trunk.activation.kind}"}}, '
        f'"branch": {_net_json(model.branch)}, '
        f'"trunk": {_net_json(model.trunk)}'
        "}\n"
    )


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: DeepONetModel, path) -> None:
    atomic_write_text(path, checkpoint_text(model))


def _parse_net(obj, side: str, act: str) -> Mlp:
    if not isinstance(obj, dict):
        raise CheckpointError("expected an object", side)
    try:
        flat, shapes, biases = obj["layers"], obj["shapes"], obj["biases"]
    except KeyError as exc:
        raise CheckpointError(f"missing key {exc.args[0]!r}", side) from None
    if len(flat) != len(shapes):
        raise CheckpointError("layers and shapes differ in length", f"{side}.shapes")
    layers = []
    for i, (vals, shape) in enumerate(zip(flat, shapes)):
        loc = f"{side}.layers[{i}]"
        if not (isinstance(shape, list) and len(shape) == 2):
            raise CheckpointError("shape must be [rows, cols]", f"{side}.shapes[{i}]")
        r, c = shape
        if len(vals) != r * c:
            raise CheckpointError(f"expected {r * c} entries, found {len(vals)}", loc)
        layers.append(np.asarray(vals, dtype=np.float64).reshape(r, c))
    if biases is not None:
        biases = tuple(np.asarray(b, dtype=np.float64) for b in biases)
    try:
        return Mlp(tuple(layers), biases, Activation(act))
    except ValueError as exc:
        raise CheckpointError(str(exc), side) from None


def parse_checkpoint(text: str, source: str = "<string>") -> DeepONetModel:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(exc.msg, f"{source}:{exc.lineno}:{exc.colno}") from None
    if not isinstance(obj, dict) or "version" not in obj:
        raise CheckpointError("missing version field", source)
    if obj["version"] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {obj['version']!r}", source)
    acts = obj.get("activation")
    if not isinstance(acts, dict):
        raise CheckpointError("missing activation object", f"{source}:activation")
    for side in ("branch", "trunk"):
        if acts.get(side) not in ACTIVATIONS:
            raise CheckpointVersionError(f"unknown activation {acts.get(side)!r}", f"{source}:activation.{side}")
        if side not in obj:
            raise CheckpointError(f"missing {side} section", source)
    branch = _parse_net(obj["branch"], f"{source}:branch", acts["branch"])
    trunk = _parse_net(obj["trunk"], f"{source}:trunk", acts["trunk"])
    try:
        return DeepONetModel(branch, trunk)
    except ShapeError as exc:
        raise CheckpointError(str(exc), source) from None


def load_checkpoint(path) -> DeepONetModel:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_checkpoint(text, os.fspath(path))
