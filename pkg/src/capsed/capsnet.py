"""Capsule network for frame-wise polyphonic sound event detection.

Pipeline per context window ``(T, F, C)``:

* CNN blocks: conv (same padding) -> activation -> optional batch norm ->
  max pooling on the frequency axis only -> dropout.
* Primary capsules: one convolution with ``J*M`` kernels whose ``(T, F', J*M)``
  output is reshaped to ``(T, F'*J, M)`` and squashed per M-vector.
* Detection capsules: for every frame, each primary capsule ``i`` predicts
  ``u_hat[i, j] = W[i, j] @ u[i]`` for every class capsule ``j`` (the same ``W``
  at every frame), and routing-by-agreement produces the class vectors.  The
  last class capsule stands for "no event".
* Predictions are the Euclidean norms of the non-background class capsules.

``head="cnn"`` swaps the capsule layers for a time-distributed sigmoid MLP.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ShapeError
from .tensor import Tensor

M_PLUS = 0.9
M_MINUS = 0.1
DOWN_WEIGHT = 0.5


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class ConvBlockConfig:
    n_kernels: int
    kernel: tuple[int, int] = (3, 3)
    pool: int = 2
    activation: str = "relu"
    dropout: float = 0.0
    batchnorm: bool = False
    l2: bool = False

    def __post_init__(self):
        self.kernel = tuple(self.kernel)


@dataclass
class PrimaryCapsConfig:
    n_caps: int = 8  # M, also the length of every primary capsule vector
    n_kernels: int = 8  # J
    kernel: tuple[int, int] = (3, 3)
    dropout: float = 0.0

    def __post_init__(self):
        self.kernel = tuple(self.kernel)


@dataclass
class DetectionCapsConfig:
    n_classes: int = 3  # K targets; one background capsule is appended
    dim: int = 8  # G

    @property
    def n_total(self) -> int:
        return self.n_classes + 1


@dataclass
class RoutingConfig:
    iterations: int = 3
    mode: str = "reset"  # "reset" or "persistent"
    # persistent carry: "window" seeds frame t of the next window with the final
    # logits of frame t of the previous one; "frame" chains t -> t+1 and
    # window -> window through the last frame.
    carry: str = "window"
    stop_alpha_grad: bool = False


@dataclass
class ModelConfig:
    input_shape: tuple[int, int, int] = (256, 40, 1)
    blocks: list[ConvBlockConfig] = field(default_factory=lambda: [ConvBlockConfig(16)])
    primary: PrimaryCapsConfig = field(default_factory=PrimaryCapsConfig)
    detection: DetectionCapsConfig = field(default_factory=DetectionCapsConfig)
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    head: str = "capsule"
    mlp_dims: list[int] = field(default_factory=list)
    mlp_activation: str = "sigmoid"  # hidden feedforward layers of the cnn head
    l2_lambda: float = 0.01

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.validate()

    def validate(self) -> None:
        if self.head not in ("capsule", "cnn"):
            raise ConfigError(f"unknown head {self.head!r}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (T, F, C) with positive extents, got {self.input_shape}")
        if not self.blocks:
            raise ConfigError("at least one CNN block is required")
        for b in self.blocks:
            if b.n_kernels < 1 or min(b.kernel) < 1 or b.pool < 1:
                raise ConfigError(f"invalid CNN block {b}")
            if b.activation not in ("relu", "tanh"):
                raise ConfigError(f"unknown activation {b.activation!r}")
            if not 0.0 <= b.dropout < 1.0:
                raise ConfigError("dropout must lie in [0, 1)")
        self.reduced_freq()
        if self.mlp_activation not in ("sigmoid", "relu", "tanh"):
            raise ConfigError(f"unknown MLP activation {self.mlp_activation!r}")
        if self.detection.n_classes < 1:
            raise ConfigError("need at least one target class")
        if self.head == "capsule":
            if self.routing.iterations < 1:
                raise ConfigError("routing needs at least one iteration")
            if self.routing.mode not in ("reset", "persistent"):
                raise ConfigError(f"unknown routing mode {self.routing.mode!r}")
            if self.routing.carry not in ("window", "frame"):
                raise ConfigError(f"unknown persistent carry {self.routing.carry!r}")
            if min(self.primary.n_caps, self.primary.n_kernels, self.detection.dim) < 2:
                raise ConfigError("capsule counts and dimensions (M, J, G) must be at least 2")
            if not 0.0 <= self.primary.dropout < 1.0:
                raise ConfigError("capsule dropout must lie in [0, 1)")

    def reduced_freq(self) -> int:
        """Frequency extent after all pooling; leftover bins of each pool are dropped."""
        f = self.input_shape[1]
        for b in self.blocks:
            if b.pool > f:
                raise ConfigError(f"pooling by {b.pool} collapses the frequency axis (F={f})")
            f //= b.pool
        return f

    @property
    def n_primary(self) -> int:
        return self.reduced_freq() * self.primary.n_kernels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        for b in d["blocks"]:
            b["kernel"] = list(b["kernel"])
        d["primary"]["kernel"] = list(d["primary"]["kernel"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        return cls(
            input_shape=tuple(d.pop("input_shape")),
            blocks=[ConvBlockConfig(**b) for b in d.pop("blocks")],
            primary=PrimaryCapsConfig(**d.pop("primary", {})),
            detection=DetectionCapsConfig(**d.pop("detection", {})),
            routing=RoutingConfig(**d.pop("routing", {})),
            **d,
        )


# ---------------------------------------------------------------------------
# Capsule operations
# ---------------------------------------------------------------------------

def squash(s: Tensor, axis: int = -1) -> Tensor:
    return tn.squash(s, axis=axis)


@dataclass
class RoutingState:
    """Routing logits carried between windows of one stream (persistent mode)."""

    beta: np.ndarray | None = None
    stream_ids: tuple | None = None


@dataclass
class RouteResult:
    v: Tensor  # (..., K_total, G)
    beta: Tensor  # (..., N_in, K_total) after the last update
    alpha: Tensor  # (..., N_in, K_total) couplings of the last iteration
    alphas: list[np.ndarray] = field(default_factory=list, repr=False)
    betas: list[np.ndarray] = field(default_factory=list, repr=False)


def route(u_hat: Tensor, iterations: int, beta=None, stop_alpha_grad: bool = False) -> RouteResult:
    """Routing-by-agreement over prediction vectors ``u_hat`` of shape ``(..., N_in, K_total, G)``.

    Each iteration: couplings are the softmax of the logits over output
    capsules, every output sums its weighted predictions and is squashed, then
    each logit grows by the dot product of prediction and output.  ``beta``
    (defaults to zeros) seeds the logits.
    """
    if iterations < 1:
        raise ConfigError("routing needs at least one iteration")
    u_hat = tn.as_tensor(u_hat)
    if u_hat.ndim < 3:
        raise ShapeError(f"u_hat must be (..., N_in, K_total, G), got {u_hat.shape}")
    lead = u_hat.shape[:-1]
    if beta is None:
        beta = Tensor(np.zeros(lead))
    beta = tn.as_tensor(beta)
    if beta.shape != lead:
        raise ShapeError(f"routing logits shape {beta.shape} != {lead}")
    letters = "abcdefhi"[: u_hat.ndim - 3]
    sum_sub = f"{letters}nk,{letters}nkg->{letters}kg"
    agree_sub = f"{letters}nkg,{letters}kg->{letters}nk"
    result = RouteResult(None, None, None)
    for _ in range(iterations):
        alpha = tn.softmax_axis(beta, axis=-1)
        if stop_alpha_grad:
            alpha = alpha.detach()
        s = tn.einsum(sum_sub, alpha, u_hat)
        v = squash(s)
        beta = beta + tn.einsum(agree_sub, u_hat, v)
        result.alphas.append(alpha.data)
        result.betas.append(beta.data)
    result.v, result.beta, result.alpha = v, beta, alpha
    return result


def primary_capsules(fmap: Tensor, kernels: Tensor, bias: Tensor, n_caps: int, n_kernels: int) -> Tensor:
    """``(..., T, F', Q)`` feature maps to squashed capsules ``(..., T, F'*J, M)``."""
    h = tn.conv2d(fmap, kernels, bias)
    *lead, T, F, ch = h.shape
    if ch != n_caps * n_kernels:
        raise ShapeError(f"primary convolution yields {ch} channels, expected J*M = {n_kernels * n_caps}")
    return squash(h.reshape(*lead, T, F * n_kernels, n_caps))


def detection_capsules(u: Tensor, W: Tensor, iterations: int, mode: str = "reset",
                       state: RoutingState | None = None, carry: str = "window",
                       stop_alpha_grad: bool = False) -> tuple[Tensor, RoutingState]:
    """Time-distributed class capsules from primary capsules ``u`` of shape ``(..., T, N_in, M)``.

    Returns capsule vectors ``(..., T, K_total, G)`` and the routing state to
    hand to the next window of the same stream.  Persistent mode needs a state
    object (use ``RoutingState()`` at the start of a stream).  Carried logits
    enter as constants.
    """
    u, W = tn.as_tensor(u), tn.as_tensor(W)
    if W.ndim != 4 or u.shape[-2:] != (W.shape[0], W.shape[2]):
        raise ShapeError(f"capsules {u.shape} do not match transformation weights {W.shape}")
    if mode not in ("reset", "persistent"):
        raise ConfigError(f"unknown routing mode {mode!r}")
    if mode == "persistent" and state is None:
        raise ConfigError("persistent routing needs a stream RoutingState")
    letters = "abcdef"[: u.ndim - 2]
    u_hat = tn.einsum(f"{letters}nm,nkmg->{letters}nkg", u, W)
    lead = u_hat.shape[:-1]  # (..., T, N, K)
    if mode == "reset":
        res = route(u_hat, iterations, None, stop_alpha_grad)
        return res.v, RoutingState(res.beta.data.copy())

    if carry == "window":
        beta0 = state.beta if state.beta is not None else np.zeros(lead)
        if beta0.shape != lead:
            raise ShapeError(f"carried routing logits {beta0.shape} do not match {lead}")
        res = route(u_hat, iterations, Tensor(beta0), stop_alpha_grad)
        return res.v, RoutingState(res.beta.data.copy(), state.stream_ids)

    frame_lead = lead[:-3] + lead[-2:]
    beta = Tensor(state.beta) if state.beta is not None else Tensor(np.zeros(frame_lead))
    if beta.shape != frame_lead:
        raise ShapeError(f"carried routing logits {beta.shape} do not match {frame_lead}")
    T = u_hat.shape[-4]
    outs = []
    for t in range(T):
        res = route(u_hat[(Ellipsis, t, slice(None), slice(None), slice(None))], iterations, beta, stop_alpha_grad)
        outs.append(res.v)
        beta = res.beta
    return tn.stack(outs, axis=u_hat.ndim - 4), RoutingState(beta.data.copy(), state.stream_ids)


def capsule_probabilities(v: Tensor, n_classes: int) -> Tensor:
    """Norms of the first ``n_classes`` capsules (the background capsule is dropped)."""
    return tn.norm(v, axis=-1)[..., :n_classes]


def with_background(targets: np.ndarray) -> np.ndarray:
    """Append the "no event active" column to ``(..., K)`` targets."""
    targets = np.asarray(targets, dtype=np.float64)
    bg = (targets.sum(axis=-1, keepdims=True) == 0).astype(np.float64)
    return np.concatenate([targets, bg], axis=-1)


def _masked_frame_mean(per_frame: Tensor, mask) -> Tensor:
    if mask is None:
        return per_frame.mean()
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != per_frame.shape:
        raise ShapeError(f"mask shape {mask.shape} != {per_frame.shape}")
    total = mask.sum()
    if total == 0:
        raise ShapeError("mask selects no frames")
    return (per_frame * mask).sum() * (1.0 / total)


def margin_loss(v: Tensor, targets: np.ndarray, mask=None) -> Tensor:
    """Margin loss summed over class capsules, averaged over (valid) frames.

    ``targets`` has the same leading shape as ``v`` minus the last axis, i.e.
    ``(..., K_total)`` including the background column.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != v.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match capsules {v.shape[:-1]}")
    if not np.all((targets == 0) | (targets == 1)):
        raise ShapeError("targets must be 0 or 1")
    n = tn.norm(v, axis=-1)
    present = tn.relu(M_PLUS - n) ** 2
    absent = tn.relu(n - M_MINUS) ** 2
    per_class = present * targets + absent * (DOWN_WEIGHT * (1.0 - targets))
    return _masked_frame_mean(per_class.sum(axis=-1), mask)


def bce_loss(logits: Tensor, targets: np.ndarray, mask=None) -> Tensor:
    """Frame-wise binary cross-entropy, averaged over classes and (valid) frames."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    return _masked_frame_mean(tn.bce_with_logits(logits, targets).mean(axis=-1), mask)


def cnn_head(fmap: Tensor, layers: list[tuple[Tensor, Tensor]], activation: str = "sigmoid") -> tuple[Tensor, Tensor]:
    """Time-distributed MLP over ``(..., T, F', Q)`` flattened per frame; returns (logits, probs)."""
    *lead, T, F, Q = fmap.shape
    h = fmap.reshape(*lead, T, F * Q)
    act = tn.ACTIVATIONS[activation]
    for i, (w, b) in enumerate(layers):
        h = tn.dense(h, w, b)
        if i < len(layers) - 1:
            h = act(h)
    return h, tn.sigmoid(h)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Glorot-uniform with Keras fan rules: leading axes form the receptive field."""
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        rf = int(np.prod(shape[:-2]))
        fan_in, fan_out = shape[-2] * rf, shape[-1] * rf
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ModelOutput:
    probs: Tensor  # (..., T, K)
    capsules: Tensor | None = None  # (..., T, K_total, G)
    logits: Tensor | None = None  # cnn head
    state: RoutingState | None = None


class CapsNet:
    """Parameters plus the forward pass for a :class:`ModelConfig`.

    ``head="cnn"`` builds the comparison network with the same CNN blocks.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        cin = config.input_shape[2]
        for i, b in enumerate(config.blocks):
            self._add(f"block{i}.kernel", glorot_uniform(rng, (*b.kernel, cin, b.n_kernels)))
            self._add(f"block{i}.bias", np.zeros(b.n_kernels))
            if b.batchnorm:
                self._add(f"block{i}.gamma", np.ones(b.n_kernels))
                self._add(f"block{i}.beta", np.zeros(b.n_kernels))
                self.buffers[f"block{i}.running_mean"] = np.zeros(b.n_kernels)
                self.buffers[f"block{i}.running_var"] = np.ones(b.n_kernels)
            cin = b.n_kernels
        f_red = config.reduced_freq()
        if config.head == "capsule":
            p, d = config.primary, config.detection
            self._add("primary.kernel", glorot_uniform(rng, (*p.kernel, cin, p.n_kernels * p.n_caps)))
            self._add("primary.bias", np.zeros(p.n_kernels * p.n_caps))
            self._add("detection.W", glorot_uniform(rng, (f_red * p.n_kernels, d.n_total, p.n_caps, d.dim)))
        else:
            dims = [f_red * cin, *config.mlp_dims, config.detection.n_classes]
            for i in range(len(dims) - 1):
                name = f"mlp{i}" if i < len(dims) - 2 else "out"
                self._add(f"{name}.weight", glorot_uniform(rng, (dims[i], dims[i + 1])))
                self._add(f"{name}.bias", np.zeros(dims[i + 1]))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    # -- bookkeeping --------------------------------------------------------
    def census(self) -> dict[str, int]:
        """Trainable parameter counts per layer group plus ``"total"``."""
        groups: dict[str, int] = {}
        for name, t in self.params.items():
            group = name.split(".")[0]
            groups[group] = groups.get(group, 0) + t.size
        groups["total"] = sum(t.size for t in self.params.values())
        return groups

    @property
    def n_params(self) -> int:
        return self.census()["total"]

    def l2_params(self) -> list[Tensor]:
        return [self.params[f"block{i}.kernel"] for i, b in enumerate(self.config.blocks) if b.l2]

    def get_weights(self) -> dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def set_weights(self, weights: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if weights[k].shape != t.shape:
                raise ShapeError(f"{k}: shape {weights[k].shape} != {t.shape}")
            t.data = np.array(weights[k], dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(weights[k], dtype=np.float64)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- forward -------------------------------------------------------------
    def features(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        h = tn.as_tensor(x)
        for i, b in enumerate(self.config.blocks):
            h = tn.conv2d(h, self.params[f"block{i}.kernel"], self.params[f"block{i}.bias"])
            h = tn.ACTIVATIONS[b.activation](h)
            if b.batchnorm:
                h = tn.batch_norm(h, self.params[f"block{i}.gamma"], self.params[f"block{i}.beta"],
                                  self.buffers[f"block{i}.running_mean"], self.buffers[f"block{i}.running_var"],
                                  training)
            if b.pool > 1:
                h = tn.max_pool_freq(h, b.pool)
            h = tn.dropout(h, b.dropout, training, rng)
        return h

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None,
                state: RoutingState | None = None) -> ModelOutput:
        """Run a batch ``(B, T, F, C)`` (or a single ``(T, F, C)`` window)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-3:] != self.config.input_shape:
            raise ShapeError(f"input windows {x.shape[-3:]} do not match model input {self.config.input_shape}")
        h = self.features(x, training, rng)
        cfg = self.config
        if cfg.head == "cnn":
            n_layers = len(cfg.mlp_dims) + 1
            layers = [(self.params[f"mlp{i}.weight"], self.params[f"mlp{i}.bias"]) for i in range(n_layers - 1)]
            layers.append((self.params["out.weight"], self.params["out.bias"]))
            logits, probs = cnn_head(h, layers, cfg.mlp_activation)
            return ModelOutput(probs=probs, logits=logits)
        p = cfg.primary
        u = primary_capsules(h, self.params["primary.kernel"], self.params["primary.bias"], p.n_caps, p.n_kernels)
        u = tn.dropout(u, p.dropout, training, rng)
        r = cfg.routing
        v, new_state = detection_capsules(u, self.params["detection.W"], r.iterations, r.mode, state, r.carry,
                                          r.stop_alpha_grad)
        return ModelOutput(probs=capsule_probabilities(v, cfg.detection.n_classes), capsules=v, state=new_state)

    __call__ = forward

    def loss(self, out: ModelOutput, targets: np.ndarray, mask=None) -> Tensor:
        """Training objective: margin loss (capsules) or BCE (cnn), plus L2 on flagged blocks."""
        if self.config.head == "capsule":
            total = margin_loss(out.capsules, with_background(targets), mask)
        else:
            total = bce_loss(out.logits, targets, mask)
        l2 = self.l2_params()
        if l2:
            total = total + tn.l2_penalty(l2, self.config.l2_lambda)
        return total

    def macs_per_frame(self) -> int:
        """Rough multiply-accumulate count of one forward frame (search budget)."""
        cfg = self.config
        f, cin, macs = cfg.input_shape[1], cfg.input_shape[2], 0
        for b in cfg.blocks:
            macs += f * b.kernel[0] * b.kernel[1] * cin * b.n_kernels
            f //= b.pool
            cin = b.n_kernels
        if cfg.head == "capsule":
            p, d = cfg.primary, cfg.detection
            macs += f * p.kernel[0] * p.kernel[1] * cin * p.n_kernels * p.n_caps
            n_in = f * p.n_kernels
            macs += n_in * d.n_total * d.dim * (p.n_caps + 2 * cfg.routing.iterations)
        else:
            dims = [f * cin, *cfg.mlp_dims, cfg.detection.n_classes]
            macs += sum(a * b for a, b in zip(dims[:-1], dims[1:]))
        return int(macs)


def build_model(config: ModelConfig, seed: int = 0) -> CapsNet:
    return CapsNet(config, seed)


# ---------------------------------------------------------------------------
# Published best configurations (binaural/monaural STFT input, F = 513)
# ---------------------------------------------------------------------------

def _preset(kernels, kdim, pools, M, pk, J, G, r, n_classes, channels=1, context_T=256, F=513) -> ModelConfig:
    return ModelConfig(
        input_shape=(context_T, F, channels),
        blocks=[ConvBlockConfig(k, (kdim, kdim), p, "relu", 0.0, True, False) for k, p in zip(kernels, pools)],
        primary=PrimaryCapsConfig(M, J, (pk, pk)),
        detection=DetectionCapsConfig(n_classes, G),
        routing=RoutingConfig(r),
    )


PRESETS = {
    "home": lambda **kw: _preset([32, 32, 8], 6, [4, 3, 2], 8, 4, 9, 11, 3, 11, **kw),
    "residential": lambda **kw: _preset([4, 16, 32, 4], 4, [2, 2, 2, 2], 7, 3, 16, 8, 4, 7, **kw),
    "street": lambda **kw: _preset([4, 16, 32, 4], 4, [2, 2, 2, 2], 7, 3, 16, 8, 4, 6, **kw),
}
PRESET_PARAMS = {"home": 267_000, "residential": 252_000, "street": 223_000}


def preset(name: str, **kwargs) -> ModelConfig:
    try:
        return PRESETS[name](**kwargs)
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
