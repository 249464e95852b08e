"""Separating network: branches that split a latent code into common and salient parts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from casep.nn import MlpSpec, Tape, init_identity, init_random, mlp
from casep.nn import tape as T
from casep.nn.tape import Node, ShapeError


@dataclass(frozen=True)
class SeparatorSpec:
    """Architecture of the separating network.

    ``styles`` switches to 3D (per-style) weights: the d_w latent is viewed as
    ``styles`` rows of width d_w / styles. ``shared_prefix_depth`` layers form a
    trunk shared by all branches (0 = fully independent branches).
    """

    d_w: int = 32
    depth: int = 4
    width: int = 64
    slope: float = 0.2
    styles: int | None = None
    shared_prefix_depth: int = 0
    n_salient: int = 1

    def __post_init__(self):
        if not 0 <= self.shared_prefix_depth < self.depth:
            raise ValueError("shared_prefix_depth must be in [0, depth)")
        if self.n_salient not in (1, 2):
            raise ValueError("n_salient must be 1 or 2")
        if self.styles is not None and self.d_w % self.styles:
            raise ValueError(f"d_w={self.d_w} is not divisible into {self.styles} styles")

    @property
    def branches(self) -> tuple[str, ...]:
        return ("c", "s") if self.n_salient == 1 else ("c", "s1", "s2")

    @property
    def mlp_spec(self) -> MlpSpec:
        d = self.d_w if self.styles is None else self.d_w // self.styles
        return MlpSpec(d, d, depth=self.depth, width=self.width, slope=self.slope, styles=self.styles)

    def to_dict(self) -> dict:
        return {"d_w": self.d_w, "depth": self.depth, "width": self.width, "slope": self.slope,
                "styles": self.styles, "shared_prefix_depth": self.shared_prefix_depth,
                "n_salient": self.n_salient}


@dataclass
class SeparatorParams:
    spec: SeparatorSpec
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "SeparatorParams":
        return SeparatorParams(self.spec, {k: v.copy() for k, v in self.params.items()})

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


@dataclass
class FactorPair:
    """Learned factors; multi-salient mode fills ``s2`` and ``s`` holds s1."""

    c: np.ndarray
    s: np.ndarray
    s2: np.ndarray | None = None

    @property
    def s1(self) -> np.ndarray:
        return self.s

    @property
    def salient(self) -> np.ndarray:
        return self.s if self.s2 is None else self.s + self.s2

    def reconstruction(self) -> np.ndarray:
        return self.c + self.salient


def init_separator(spec: SeparatorSpec, rng: np.random.Generator, noise: float = 1e-3) -> SeparatorParams:
    """Common branch = identity + N(0, noise^2) weight jitter; salient heads output exactly 0.

    A shared trunk carries the first layers of the identity chain, so the
    common branch stays near-identity end to end.
    """
    m = spec.shared_prefix_depth
    ms = spec.mlp_spec
    params: dict[str, np.ndarray] = {}
    if m:
        params.update(init_identity(ms, rng, "trunk.", noise, layers=range(m)))
    params.update(init_identity(ms, rng, "c.", noise, layers=range(m, spec.depth)))
    for name in spec.branches[1:]:
        full = init_random(ms, rng, f"{name}.", zero_last=True)
        params.update({k: v for k, v in full.items() if int(k.split(".")[1]) >= m})
    return SeparatorParams(spec, params)


def factor_nodes(w: Node, spec: SeparatorSpec, p: dict[str, Node]) -> dict[str, Node]:
    """Branch outputs on the tape, each shaped like ``w`` (B, d_w)."""
    if w.value.ndim != 2 or w.value.shape[1] != spec.d_w:
        raise ShapeError(f"expected (B, {spec.d_w}) latents, got {w.value.shape}")
    ms = spec.mlp_spec
    m = spec.shared_prefix_depth
    x = w if spec.styles is None else T.reshape(w, (w.value.shape[0], spec.styles, spec.d_w // spec.styles))
    h = x
    if m:
        # mlp() already applies the activation after every non-final layer
        h = mlp(x, ms, p, "trunk.", layers=range(m))
    out = {}
    for name in spec.branches:
        o = mlp(h, ms, p, f"{name}.", layers=range(m, spec.depth))
        if spec.styles is not None:
            o = T.reshape(o, (o.value.shape[0], spec.d_w))
        out[name] = o
    return out


def split(w, sep: SeparatorParams) -> FactorPair:
    """Deterministic decomposition of one latent (d_w,) or a batch (B, d_w)."""
    w = np.asarray(w, dtype=np.float64)
    single = w.ndim == 1
    tape = Tape()
    nodes = factor_nodes(tape.const(np.atleast_2d(w)), sep.spec, tape.bind(sep.params, trainable=False))
    vals = {k: (v.value[0] if single else v.value) for k, v in nodes.items()}
    if sep.spec.n_salient == 1:
        return FactorPair(vals["c"], vals["s"])
    return FactorPair(vals["c"], vals["s1"], vals["s2"])


def swap(fx: FactorPair, fy: FactorPair) -> tuple[np.ndarray, np.ndarray]:
    """(c_x + s_y, c_y + s_x): exchange salient parts, keep common parts."""
    if fx.c.shape != fy.c.shape:
        raise ShapeError("factor shapes differ")
    return fx.c + fy.salient, fy.c + fx.salient


def oracle_separator(world) -> SeparatorParams:
    """Depth-1 linear separator using the world's true subspace projectors."""
    d = world.cfg.d_w
    n_sal = world.cfg.n_salient
    spec = SeparatorSpec(d_w=d, depth=1, width=1, n_salient=n_sal)
    params = {"c.0.W": world.projector("c"), "c.0.b": np.zeros(d)}
    if n_sal == 1:
        params.update({"s.0.W": world.projector("s"), "s.0.b": np.zeros(d)})
    else:
        params.update({"s1.0.W": world.projector("s1"), "s1.0.b": np.zeros(d),
                       "s2.0.W": world.projector("s2"), "s2.0.b": np.zeros(d)})
    return SeparatorParams(spec, params)


def leak_separator(d_w: int, n_salient: int = 1) -> SeparatorParams:
    """c = w, salient parts = 0: the degenerate solution the regularizers must rule out."""
    spec = SeparatorSpec(d_w=d_w, depth=1, width=1, n_salient=n_salient)
    params = {"c.0.W": np.eye(d_w), "c.0.b": np.zeros(d_w)}
    for name in spec.branches[1:]:
        params[f"{name}.0.W"] = np.zeros((d_w, d_w))
        params[f"{name}.0.b"] = np.zeros(d_w)
    return SeparatorParams(spec, params)
