"""The dual-branch alignment recognizer.

Two residual trunks share one architecture but not weights: the *base* trunk
classifies the raw image and exposes a shallow tap (1/4 resolution) and a deep
tap (1/16 resolution); the *grid network* fuses both taps and regresses the
six affine parameters; the *alignment* trunk classifies the image re-sampled
under that affine map. At inference the descriptor is the renormalized
concatenation of both branch embeddings.

The grid head starts at zero weights with an identity bias, so an untrained
model warps with exactly the identity and both branches see the same pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .affine import IDENTITY_THETA, bilinear_sample, make_grid
from .autodiff import Tensor, add
from .errors import DimensionError, UsageError
from .serialize import load_checkpoint, save_checkpoint


@dataclass
class ModelConfig:
    input_size: tuple[int, int, int] = (3, 224, 224)
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    num_classes: int = 2
    ibn_enabled: bool = False
    embed_dim: int = 64
    affine_enabled: bool = True
    param_dtype: str = "float64"

    def __post_init__(self):
        c, h, w = self.input_size
        if c != 3:
            raise DimensionError("input must have 3 channels")
        if h % 16 or w % 16:
            raise DimensionError("input height/width must be divisible by 16")
        if len(self.stage_channels) != 4 or any(ch < 1 for ch in self.stage_channels):
            raise DimensionError("stage_channels must be 4 positive ints")
        if self.num_classes < 2:
            raise DimensionError("need at least 2 identity classes")
        if self.embed_dim < 1:
            raise DimensionError("embed_dim must be positive")
        if self.param_dtype not in ("float32", "float64"):
            raise DimensionError("param_dtype must be float32 or float64")

    @property
    def dtype(self):
        return np.float32 if self.param_dtype == "float32" else np.float64


@dataclass
class _Fwd:
    """Outputs of one training forward pass."""

    base_logits: Tensor
    align_logits: Tensor
    fused_embed: Tensor
    theta: Tensor
    base_embed: Tensor = field(repr=False, default=None)
    align_embed: Tensor = field(repr=False, default=None)


class EpanModel:
    """Holds all learnable state and the forward computations."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.training = True
        self.params: dict[str, Tensor] = {}
        self.stats: dict[str, np.ndarray] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameter construction ---------------------------------------------

    def _conv(self, rng, name: str, c_out: int, c_in: int, k: int = 3) -> None:
        std = np.sqrt(2.0 / (c_in * k * k))
        w = rng.normal(0.0, std, (c_out, c_in, k, k)).astype(self.config.dtype)
        self.params[name + ".w"] = Tensor(w, requires_grad=True)

    def _norm(self, rng, name: str, ch: int, kind: str) -> None:
        dt = self.config.dtype
        self.params[name + ".gamma"] = Tensor(np.ones(ch, dt), requires_grad=True)
        self.params[name + ".beta"] = Tensor(np.zeros(ch, dt), requires_grad=True)
        if kind == "batch":
            self.stats[name + ".running_mean"] = np.zeros(ch, dt)
            self.stats[name + ".running_var"] = np.ones(ch, dt)

    def _linear(self, rng, name: str, out_dim: int, in_dim: int,
                zero: bool = False, bias_init=None) -> None:
        dt = self.config.dtype
        if zero:
            w = np.zeros((out_dim, in_dim), dt)
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / in_dim), (out_dim, in_dim)).astype(dt)
        b = np.zeros(out_dim, dt) if bias_init is None else np.asarray(bias_init, dt)
        self.params[name + ".w"] = Tensor(w, requires_grad=True)
        self.params[name + ".b"] = Tensor(b, requires_grad=True)

    def _norm_kind(self, trunk: bool, stage: int) -> str:
        if trunk and self.config.ibn_enabled and stage <= 2:
            return "instance"
        return "batch"

    def _init_params(self, rng) -> None:
        cfg = self.config
        for prefix in ("base", "align"):
            c_in = 3
            for s, ch in enumerate(cfg.stage_channels, start=1):
                kind = self._norm_kind(True, s)
                self._conv(rng, f"{prefix}.s{s}.down", ch, c_in)
                self._norm(rng, f"{prefix}.s{s}.down.n", ch, kind)
                self._conv(rng, f"{prefix}.s{s}.res.conv1", ch, ch)
                self._norm(rng, f"{prefix}.s{s}.res.n1", ch, kind)
                self._conv(rng, f"{prefix}.s{s}.res.conv2", ch, ch)
                self._norm(rng, f"{prefix}.s{s}.res.n2", ch, kind)
                c_in = ch
            self._linear(rng, f"{prefix}.embed", cfg.embed_dim, cfg.stage_channels[3])
            self._linear(rng, f"{prefix}.cls", cfg.num_classes, cfg.embed_dim)
        cc = cfg.stage_channels[1] + cfg.stage_channels[3]
        self._conv(rng, "grid.res.conv1", cc, cc)
        self._norm(rng, "grid.res.n1", cc, "batch")
        self._conv(rng, "grid.res.conv2", cc, cc)
        self._norm(rng, "grid.res.n2", cc, "batch")
        # average-pool to a coarse map but keep the coarse positions: the
        # head must see where content sits, not just how much there is
        ph, pw = self._grid_pooled_shape()
        self._linear(rng, "grid.head", 6, cc * ph * pw,
                     zero=True, bias_init=IDENTITY_THETA)

    # -- modes / state --------------------------------------------------------

    def train(self) -> "EpanModel":
        self.training = True
        return self

    def eval(self) -> "EpanModel":
        self.training = False
        return self

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.stats)
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.state_arrays())

    def load(self, path) -> "EpanModel":
        arrays = load_checkpoint(path)
        return self.load_state(arrays)

    def load_state(self, arrays: dict[str, np.ndarray]) -> "EpanModel":
        dt = self.config.dtype
        for name, p in self.params.items():
            if name not in arrays:
                raise DimensionError(f"checkpoint is missing parameter {name}")
            arr = np.asarray(arrays[name], dtype=dt)
            if arr.shape != p.data.shape:
                raise DimensionError(
                    f"checkpoint shape {arr.shape} != model shape {p.data.shape} for {name}"
                )
            p.data = arr
        for name in self.stats:
            if name in arrays:
                self.stats[name] = np.asarray(arrays[name], dtype=dt)
        return self

    # -- forward pieces -------------------------------------------------------

    def _apply_norm(self, name: str, x: Tensor, kind: str) -> Tensor:
        gamma = self.params[name + ".gamma"]
        beta = self.params[name + ".beta"]
        if kind == "instance":
            return ops.instance_norm(x, gamma, beta)
        return ops.batch_norm(
            x, gamma, beta,
            self.stats[name + ".running_mean"],
            self.stats[name + ".running_var"],
            training=self.training,
        )

    def _res_block(self, name: str, x: Tensor, kind: str) -> Tensor:
        y = ops.conv2d(x, self.params[name + ".conv1.w"], stride=1, pad=1)
        y = ops.relu(self._apply_norm(name + ".n1", y, kind))
        y = ops.conv2d(y, self.params[name + ".conv2.w"], stride=1, pad=1)
        y = self._apply_norm(name + ".n2", y, kind)
        return ops.relu(add(x, y))

    def _trunk(self, prefix: str, x: Tensor) -> tuple[Tensor, Tensor]:
        """Run the 4-stage trunk; returns the stage-2 and stage-4 taps."""
        tap2 = None
        for s in range(1, 5):
            kind = self._norm_kind(True, s)
            x = ops.conv2d(x, self.params[f"{prefix}.s{s}.down.w"], stride=2, pad=1)
            x = ops.relu(self._apply_norm(f"{prefix}.s{s}.down.n", x, kind))
            x = self._res_block(f"{prefix}.s{s}.res", x, kind)
            if s == 2:
                tap2 = x
        return tap2, x

    def _head(self, prefix: str, tap4: Tensor) -> tuple[Tensor, Tensor]:
        feat = ops.global_avg_pool(tap4)
        embed = ops.linear(feat, self.params[f"{prefix}.embed.w"],
                           self.params[f"{prefix}.embed.b"])
        logits = ops.linear(embed, self.params[f"{prefix}.cls.w"],
                            self.params[f"{prefix}.cls.b"])
        return logits, embed

    @staticmethod
    def _lift(x: Tensor) -> tuple[Tensor, bool]:
        if x.ndim == 3:
            return x.reshape((1,) + x.shape), True
        if x.ndim == 4:
            return x, False
        raise DimensionError(f"expected [3,H,W] or [B,3,H,W], got {x.shape}")

    def _check_input(self, x4: Tensor) -> None:
        c, h, w = self.config.input_size
        if x4.shape[1:] != (c, h, w):
            raise DimensionError(
                f"input {x4.shape[1:]} does not match configured size {(c, h, w)}"
            )

    # -- public forward -------------------------------------------------------

    def base_forward(self, image: Tensor):
        """(tap2 [C2,H/4,W/4], tap4 [C4,H/16,W/16], logits [C], embed [E])."""
        x, single = self._lift(image)
        self._check_input(x)
        tap2, tap4 = self._trunk("base", x)
        logits, embed = self._head("base", tap4)
        if single:
            return (tap2.reshape(tap2.shape[1:]), tap4.reshape(tap4.shape[1:]),
                    logits.reshape(logits.shape[1:]), embed.reshape(embed.shape[1:]))
        return tap2, tap4, logits, embed

    def _grid_pooled_shape(self) -> tuple[int, int]:
        th, tw = self.config.input_size[1] // 16, self.config.input_size[2] // 16
        k = 2 if (th % 2 == 0 and tw % 2 == 0) else 1
        return th // k, tw // k

    def grid_network(self, tap2: Tensor, tap4: Tensor) -> Tensor:
        """Regress the six warp parameters from the two feature taps."""
        single = tap2.ndim == 3
        if single:
            tap2 = tap2.reshape((1,) + tap2.shape)
            tap4 = tap4.reshape((1,) + tap4.shape)
        pooled = ops.avg_pool(tap2, tap2.shape[-1] // tap4.shape[-1])
        fused = ops.concat([pooled, tap4], axis=1)
        y = self._res_block("grid.res", fused, "batch")
        ph, _ = self._grid_pooled_shape()
        if tap4.shape[-2] // max(ph, 1) > 1:
            y = ops.avg_pool(y, tap4.shape[-2] // ph)
        v = y.reshape((y.shape[0], -1))
        theta = ops.linear(v, self.params["grid.head.w"], self.params["grid.head.b"])
        return theta.reshape((6,)) if single else theta

    def aligned_input(self, image: Tensor, theta) -> Tensor:
        """The alignment branch's input: the image re-sampled under theta."""
        _, h, w = self.config.input_size
        x, single = self._lift(image)
        grid = make_grid(theta, h, w)
        warped = bilinear_sample(x, grid)
        return warped.reshape(warped.shape[1:]) if single else warped

    def align_forward(self, image: Tensor, theta):
        """(logits [C], embed [E]) of the re-aligned image."""
        x, single = self._lift(image)
        self._check_input(x)
        warped = self.aligned_input(x, theta)
        _, tap4 = self._trunk("align", warped)
        logits, embed = self._head("align", tap4)
        if single:
            return logits.reshape(logits.shape[1:]), embed.reshape(embed.shape[1:])
        return logits, embed

    def _identity_theta(self, batch: int) -> Tensor:
        theta = np.tile(np.asarray(IDENTITY_THETA, self.config.dtype), (batch, 1))
        return Tensor(theta)

    def fuse_embeddings(self, base_embed: Tensor, align_embed: Tensor) -> Tensor:
        fused = ops.concat(
            [ops.l2_normalize(base_embed, axis=-1), ops.l2_normalize(align_embed, axis=-1)],
            axis=-1,
        )
        return ops.l2_normalize(fused, axis=-1)

    def forward_train(self, images: Tensor) -> _Fwd:
        """Full training pass: raw-branch, warp regression, aligned branch."""
        x, _ = self._lift(images)
        self._check_input(x)
        tap2, tap4, base_logits, base_embed = self.base_forward(x)
        if self.config.affine_enabled:
            theta = self.grid_network(tap2, tap4)
        else:
            theta = self._identity_theta(x.shape[0])
        align_logits, align_embed = self.align_forward(x, theta)
        fused = self.fuse_embeddings(base_embed, align_embed)
        return _Fwd(base_logits, align_logits, fused, theta, base_embed, align_embed)

    def infer_embedding(self, image: Tensor) -> Tensor:
        """Unit-norm retrieval descriptor [2*embed_dim] (eval mode)."""
        if self.training:
            raise UsageError("infer_embedding requires eval mode; call model.eval()")
        x, single = self._lift(image)
        out = self.forward_train(x)
        fused = out.fused_embed
        return fused.reshape(fused.shape[1:]) if single else fused
