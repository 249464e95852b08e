"""Dense layers and MLPs in 2D (shared weight) and 3D (per-style weight) form."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from casep.nn import tape as T
from casep.nn.tape import Node, ShapeError, Tape

ACTIVATIONS = ("leaky_relu", "relu", "identity")


@dataclass(frozen=True)
class MlpSpec:
    """Shape of a plain MLP.

    ``styles`` selects the weight mode: ``None`` for 2D weights acting on
    (B, in_dim) inputs, an integer k for 3D weights acting on (B, k, in_dim)
    inputs with one independent matrix per style row.
    """

    in_dim: int
    out_dim: int
    depth: int = 4
    width: int = 64
    activation: str = "leaky_relu"
    slope: float = 0.2
    styles: int | None = None

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"invalid MLP dims: {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ValueError(f"leaky-relu slope must lie in (0, 1), got {self.slope}")
        if self.styles is not None and self.styles < 1:
            raise ValueError("styles must be >= 1")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.width] * (self.depth - 1) + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))

    def weight_shape(self, i: int) -> tuple[int, ...]:
        fan_in, fan_out = self.layer_dims()[i]
        if self.styles is None:
            return (fan_out, fan_in)
        return (self.styles, fan_out, fan_in)

    def bias_shape(self, i: int) -> tuple[int, ...]:
        fan_out = self.layer_dims()[i][1]
        return (fan_out,) if self.styles is None else (self.styles, fan_out)


def param_names(spec: MlpSpec, prefix: str) -> list[str]:
    names = []
    for i in range(spec.depth):
        names += [f"{prefix}{i}.W", f"{prefix}{i}.b"]
    return names


def linear_forward(w, M, b) -> np.ndarray:
    """``w @ M.T + b`` for a single vector or a batch of row vectors."""
    w = np.asarray(w, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if M.ndim != 2 or w.shape[-1] != M.shape[1] or b.shape != (M.shape[0],):
        raise ShapeError(f"linear_forward: w{w.shape} M{M.shape} b{b.shape}")
    return w @ M.T + b


def per_style_linear_forward(w, M, b) -> np.ndarray:
    """Row ``k`` of ``w`` (k, d_in) is mapped by its own ``M[k]``/``b[k]``."""
    w = np.asarray(w, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    squeeze = w.ndim == 2
    x = w[None] if squeeze else w
    if M.ndim != 3 or x.shape[1:] != (M.shape[0], M.shape[2]) or b.shape != M.shape[:2]:
        raise ShapeError(f"per_style_linear_forward: w{w.shape} M{M.shape} b{b.shape}")
    out = np.einsum("bki,koi->bko", x, M) + b
    return out[0] if squeeze else out


def _activate(x: Node, spec: MlpSpec) -> Node:
    if spec.activation == "identity":
        return x
    if spec.activation == "relu":
        return T.relu(x)
    return T.leaky_relu(x, spec.slope)


def mlp(x: Node, spec: MlpSpec, params: Mapping[str, Node], prefix: str = "",
        layers: range | None = None) -> Node:
    """Apply layers of an MLP on the tape; activation between layers, none after the last.

    ``layers`` restricts application to a contiguous sub-range, which is how a
    shared trunk and its branches are chained.
    """
    layers = range(spec.depth) if layers is None else layers
    op = T.linear if spec.styles is None else T.style_linear
    h = x
    for i in layers:
        W, b = params[f"{prefix}{i}.W"], params[f"{prefix}{i}.b"]
        if W.value.shape != spec.weight_shape(i) or b.value.shape != spec.bias_shape(i):
            raise ShapeError(f"{prefix}{i}: params {W.value.shape}/{b.value.shape} do not match spec")
        h = op(h, W, b)
        if i < spec.depth - 1:
            h = _activate(h, spec)
    return h


def mlp_forward(x, spec: MlpSpec, params: Mapping[str, np.ndarray], prefix: str = "",
                tape: Tape | None = None) -> tuple[np.ndarray, Tape, Node]:
    """Standalone forward pass; returns (output, tape, output node).

    Parameters are bound as named leaves so ``tape.backward`` yields their gradients.
    """
    tape = Tape() if tape is None else tape
    xn = x if isinstance(x, Node) else tape.param(x, "input")
    bound = {k: tape.param(v, k) for k, v in params.items() if k.startswith(prefix)}
    out = mlp(xn, spec, bound, prefix)
    return out.value, tape, out


# initialisation ---------------------------------------------------------------

def _gain(spec: MlpSpec) -> float:
    if spec.activation == "identity":
        return 1.0
    slope = 0.0 if spec.activation == "relu" else spec.slope
    return float(np.sqrt(2.0 / (1.0 + slope * slope)))


def init_random(spec: MlpSpec, rng: np.random.Generator, prefix: str = "",
                zero_last: bool = False) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases; optionally a zero output layer."""
    out = {}
    for i, (fan_in, _) in enumerate(spec.layer_dims()):
        std = _gain(spec) / np.sqrt(fan_in) if i < spec.depth - 1 else 1.0 / np.sqrt(fan_in)
        W = rng.standard_normal(spec.weight_shape(i)) * std
        if zero_last and i == spec.depth - 1:
            W = np.zeros(spec.weight_shape(i))
        out[f"{prefix}{i}.W"] = W
        out[f"{prefix}{i}.b"] = np.zeros(spec.bias_shape(i))
    return out


def identity_blocks(depth: int, dim: int, width: int, slope: float) -> list[np.ndarray]:
    """Weights whose leaky-relu composition is exactly the identity on R^dim.

    Uses lrelu(u) - lrelu(-u) = (1 + slope) u: every hidden layer carries
    the pair (u, -u). Needs width >= 2 * dim when depth > 1.
    """
    if depth == 1:
        return [np.eye(dim)]
    if width < 2 * dim:
        raise ValueError(f"identity init needs width >= {2 * dim}, got {width}")
    eye = np.eye(dim)
    k = 1.0 + slope
    first = np.zeros((width, dim))
    first[:dim], first[dim:2 * dim] = eye, -eye
    mid = np.zeros((width, width))
    mid[:dim, :dim], mid[:dim, dim:2 * dim] = eye / k, -eye / k
    mid[dim:2 * dim, :dim], mid[dim:2 * dim, dim:2 * dim] = -eye / k, eye / k
    last = np.zeros((dim, width))
    last[:, :dim], last[:, dim:2 * dim] = eye / k, -eye / k
    return [first] + [mid.copy() for _ in range(depth - 2)] + [last]


def init_identity(spec: MlpSpec, rng: np.random.Generator, prefix: str = "",
                  noise: float = 1e-3, layers: range | None = None) -> dict[str, np.ndarray]:
    """Near-identity init (exact identity plus N(0, noise^2) on each weight).

    ``layers`` picks which layers of the full identity chain to emit, so a
    trunk and a branch can each hold their share of one identity map.
    """
    if spec.in_dim != spec.out_dim:
        raise ValueError("identity init needs in_dim == out_dim")
    if spec.activation == "identity":
        slope = 1.0
    else:
        slope = 0.0 if spec.activation == "relu" else spec.slope
    blocks = identity_blocks(spec.depth, spec.in_dim, spec.width, slope)
    out = {}
    for i in (range(spec.depth) if layers is None else layers):
        W = blocks[i]
        if spec.styles is not None:
            W = np.broadcast_to(W, (spec.styles,) + W.shape).copy()
        out[f"{prefix}{i}.W"] = W + noise * rng.standard_normal(W.shape)
        out[f"{prefix}{i}.b"] = np.zeros(spec.bias_shape(i))
    return out
