"""Mean-predictor MLP and the direction head with an orthogonalized output.

The head's trunk is an MLP whose last layer is widened K-fold: one
affine output block per direction. The raw directions d_1..d_K then pass
through a Gram-Schmidt output layer in which every previously derived
direction enters the projection terms through stop_grad, so direction k
receives gradient only through d_k. The squared residual norm of step k
doubles as the variance estimate sigma_k^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Var
from .errors import DegenerateDirections, ShapeMismatch

GS_DEGENERACY_RTOL = 1e-12


@dataclass(frozen=True)
class MlpConfig:
    """Fully-connected net: ``depth`` affine layers, leaky-ReLU between them."""

    in_dim: int
    out_dim: int
    hidden: int = 256
    depth: int = 5
    slope: float = 0.1

    def __post_init__(self):
        # depth 1 degenerates to a single affine map, which is still useful
        # for exactness tests
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.in_dim < 1 or self.out_dim < 1 or self.hidden < 1:
            raise ValueError("dimensions must be >= 1")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(out, in) shape of each affine layer."""
        if self.depth == 1:
            return [(self.out_dim, self.in_dim)]
        dims = [(self.hidden, self.in_dim)]
        dims += [(self.hidden, self.hidden)] * (self.depth - 2)
        dims.append((self.out_dim, self.hidden))
        return dims


def init_mlp(cfg: MlpConfig, rng: np.random.Generator, prefix: str = "") -> ParamStore:
    """Uniform +-sqrt(1/fan_in) init for weights and biases."""
    params = ParamStore()
    for i, (out, inp) in enumerate(cfg.layer_dims()):
        s = np.sqrt(1.0 / inp)
        params.add(f"{prefix}W{i}", rng.uniform(-s, s, size=(out, inp)))
        params.add(f"{prefix}b{i}", rng.uniform(-s, s, size=out))
    return params


def mlp_forward(cfg: MlpConfig, leaves: dict[str, Var], x: Var, prefix: str = "") -> Var:
    """Alternating affine / leaky-ReLU stack; last layer has no activation."""
    if x.shape != (cfg.in_dim,):
        raise ShapeMismatch(f"mlp input {x.shape}, expected ({cfg.in_dim},)")
    h = x
    for i in range(cfg.depth):
        h = ad.add(ad.matmul(leaves[f"{prefix}W{i}"], h), leaves[f"{prefix}b{i}"])
        if i < cfg.depth - 1:
            h = ad.leaky_relu(h, cfg.slope)
    return h


class MeanModel:
    """Conditional-mean predictor x_hat = f(y)."""

    def __init__(self, cfg: MlpConfig, seed: int = 0, params: ParamStore | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_mlp(cfg, np.random.default_rng(seed))

    def forward(self, tape: Tape, leaves: dict[str, Var], y: np.ndarray) -> Var:
        return mlp_forward(self.cfg, leaves, tape.constant(y))

    def predict(self, y: np.ndarray) -> np.ndarray:
        tape = Tape()
        leaves = self.params.leaves(tape)
        return self.forward(tape, leaves, y).value


def mean_predict(model: MeanModel, y: np.ndarray) -> np.ndarray:
    return model.predict(y)


@dataclass(frozen=True)
class NppcHeadConfig:
    """Direction head: K directions in d_x dims from a measurement of d_y dims."""

    K: int
    d_x: int
    d_y: int
    hidden: int = 256
    depth: int = 5
    slope: float = 0.1
    include_mean_input: bool = True

    def __post_init__(self):
        if not (1 <= self.K <= self.d_x):
            raise ValueError(f"need 1 <= K <= d_x, got K={self.K}, d_x={self.d_x}")
        if self.depth < 2:
            raise ValueError("head needs a trunk plus output layer (depth >= 2)")

    @property
    def in_dim(self) -> int:
        return self.d_y + (self.d_x if self.include_mean_input else 0)

    def trunk_config(self) -> MlpConfig:
        # trunk = all layers but the widened output one, ending activated
        return MlpConfig(
            in_dim=self.in_dim,
            out_dim=self.hidden,
            hidden=self.hidden,
            depth=self.depth - 1,
            slope=self.slope,
        )


@dataclass
class GsOutput:
    """Orthogonalized head output, as tape Vars.

    ``w`` are the unit directions, ``sigma2`` the squared residual norms
    (the per-direction variance estimates) and ``raw`` the pre-layer
    directions. ``collapsed_at`` is the first degenerate index when the
    layer was built in truncating mode, else None.
    """

    w: list[Var]
    sigma2: list[Var]
    raw: list[Var]
    collapsed_at: int | None = None

    @property
    def k_effective(self) -> int:
        return len(self.w)

    def freeze(self) -> "NppcOutput":
        return NppcOutput(
            W=np.stack([v.value for v in self.w]),
            sigma2=np.array([float(s.value) for s in self.sigma2]),
            raw_dirs=np.stack([v.value for v in self.raw]),
        )


@dataclass(frozen=True)
class NppcOutput:
    """Plain-array head output: orthonormal rows W (K x d_x), variance
    estimates sigma2 (K,) and the raw directions that produced them."""

    W: np.ndarray
    sigma2: np.ndarray
    raw_dirs: np.ndarray


def gram_schmidt_stopgrad(
    tape: Tape,
    raw: list[Var],
    fixed_prefix: list[np.ndarray] | tuple = (),
    on_degenerate: str = "raise",
) -> GsOutput:
    """Gram-Schmidt output layer with stop-gradient on derived directions.

    Each direction is orthogonalized against ``fixed_prefix`` (constants,
    used by the iterative per-PC scheme) and against all previously
    produced w_l, the latter wrapped in stop_grad inside both the
    projection coefficient and the subtraction. Projection coefficients
    are taken against the original d_k (the classical expression), and
    sigma2[k] is the squared norm of the projected residual.

    on_degenerate: "raise" aborts on residual collapse; "truncate" stops
    at the collapsed index and records it (training skips those terms).
    """
    ws: list[Var] = []
    sig2: list[Var] = []
    collapsed = None
    for k, d in enumerate(raw):
        r = d
        for wf in fixed_prefix:
            wc = tape.constant(wf)
            r = ad.sub(r, ad.mul(ad.dot(d, wc), wc))
        for w_prev in ws:
            wsg = ad.stop_grad(w_prev)
            r = ad.sub(r, ad.mul(ad.dot(d, wsg), wsg))
        s2 = ad.sqnorm(r)
        norm = float(np.sqrt(s2.value))
        dscale = float(np.linalg.norm(d.value))
        if norm < GS_DEGENERACY_RTOL * dscale or norm == 0.0:
            if on_degenerate == "truncate":
                collapsed = k
                break
            raise DegenerateDirections(k, norm, dscale)
        ws.append(ad.div_scalar(r, ad.sqrt(s2)))
        sig2.append(s2)
    return GsOutput(w=ws, sigma2=sig2, raw=list(raw[: len(ws)]), collapsed_at=collapsed)


class NppcHead:
    """Predicts K orthonormal posterior directions and their variances."""

    def __init__(self, cfg: NppcHeadConfig, seed: int = 0, params: ParamStore | None = None):
        self.cfg = cfg
        if params is not None:
            self.params = params
        else:
            rng = np.random.default_rng(seed)
            trunk_cfg = cfg.trunk_config()
            self.params = init_mlp(trunk_cfg, rng)
            s = np.sqrt(1.0 / cfg.hidden)
            for k in range(cfg.K):
                self.params.add(f"out_w{k}", rng.uniform(-s, s, size=(cfg.d_x, cfg.hidden)))
                self.params.add(f"out_b{k}", rng.uniform(-s, s, size=cfg.d_x))

    def _input(self, tape: Tape, y: np.ndarray, xhat) -> Var:
        y_var = tape.constant(np.asarray(y, dtype=np.float64))
        if not self.cfg.include_mean_input:
            return y_var
        if xhat is None:
            raise ShapeMismatch("head configured with include_mean_input but no x_hat given")
        xh = xhat if isinstance(xhat, Var) else tape.constant(np.asarray(xhat, dtype=np.float64))
        return ad.concat([y_var, xh])

    def forward_raw(self, tape: Tape, leaves: dict[str, Var], y: np.ndarray, xhat) -> list[Var]:
        """Trunk plus the K widened output blocks: raw directions d_1..d_K."""
        h = mlp_forward(self.cfg.trunk_config(), leaves, self._input(tape, y, xhat))
        h = ad.leaky_relu(h, self.cfg.slope)
        return [
            ad.add(ad.matmul(leaves[f"out_w{k}"], h), leaves[f"out_b{k}"])
            for k in range(self.cfg.K)
        ]

    def forward(
        self,
        tape: Tape,
        leaves: dict[str, Var],
        y: np.ndarray,
        xhat,
        on_degenerate: str = "raise",
    ) -> GsOutput:
        raw = self.forward_raw(tape, leaves, y, xhat)
        return gram_schmidt_stopgrad(tape, raw, on_degenerate=on_degenerate)

    def predict(self, y: np.ndarray, xhat: np.ndarray | None = None) -> NppcOutput:
        tape = Tape()
        leaves = self.params.leaves(tape)
        return self.forward(tape, leaves, y, xhat).freeze()


class OrthogonalizedHead:
    """A base head whose output is additionally orthogonalized against the
    (frozen) directions of earlier single-direction models.

    With no predecessors this is exactly the base head: same parameters,
    same tape graph, same numbers.
    """

    def __init__(self, base: NppcHead, predecessors: list["OrthogonalizedHead"] | None = None):
        self.base = base
        self.predecessors = list(predecessors or [])
        # predecessors are frozen, so their directions per input are too
        self._prefix_cache: dict[bytes, list[np.ndarray]] = {}

    @property
    def cfg(self) -> NppcHeadConfig:
        return self.base.cfg

    @property
    def params(self) -> ParamStore:
        return self.base.params

    def _prefix_dirs(self, y: np.ndarray, xhat) -> list[np.ndarray]:
        if not self.predecessors:
            return []
        xh = xhat.value if isinstance(xhat, Var) else np.asarray(xhat, dtype=np.float64)
        key = np.asarray(y, dtype=np.float64).tobytes() + (b"" if xh is None else xh.tobytes())
        cached = self._prefix_cache.get(key)
        if cached is None:
            cached = []
            for pred in self.predecessors:
                out = pred.predict(y, xh)
                cached.extend(out.W)
            self._prefix_cache[key] = cached
        return cached

    def forward(
        self,
        tape: Tape,
        leaves: dict[str, Var],
        y: np.ndarray,
        xhat,
        on_degenerate: str = "raise",
    ) -> GsOutput:
        raw = self.base.forward_raw(tape, leaves, y, xhat)
        return gram_schmidt_stopgrad(
            tape, raw, fixed_prefix=self._prefix_dirs(y, xhat), on_degenerate=on_degenerate
        )

    def predict(self, y: np.ndarray, xhat: np.ndarray | None = None) -> NppcOutput:
        tape = Tape()
        leaves = self.params.leaves(tape)
        return self.forward(tape, leaves, y, xhat).freeze()


class IterativeEnsemble:
    """Stack of sequentially trained single-direction heads, presented as
    one multi-direction predictor."""

    def __init__(self, stages: list[OrthogonalizedHead]):
        if not stages:
            raise ValueError("need at least one stage")
        self.stages = list(stages)

    def predict(self, y: np.ndarray, xhat: np.ndarray | None = None) -> NppcOutput:
        outs = [stage.predict(y, xhat) for stage in self.stages]
        return NppcOutput(
            W=np.concatenate([o.W for o in outs]),
            sigma2=np.concatenate([o.sigma2 for o in outs]),
            raw_dirs=np.concatenate([o.raw_dirs for o in outs]),
        )


def nppc_forward(head, y: np.ndarray, xhat, tape: Tape | None = None):
    """Run the direction head. With a tape, returns the GsOutput whose
    Vars participate in losses; without one, returns plain arrays."""
    if tape is None:
        return head.predict(y, xhat)
    leaves = head.params.leaves(tape)
    return head.forward(tape, leaves, y, xhat)


@dataclass
class JointModel:
    """Mean predictor and direction head trained together."""

    mean: MeanModel
    head: NppcHead

    @classmethod
    def create(cls, mean_cfg: MlpConfig, head_cfg: NppcHeadConfig, seed: int = 0) -> "JointModel":
        rng = np.random.default_rng(seed)
        mean = MeanModel(mean_cfg, params=init_mlp(mean_cfg, rng))
        head = NppcHead(head_cfg, seed=int(rng.integers(0, 2**31 - 1)))
        return cls(mean=mean, head=head)
