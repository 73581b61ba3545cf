"""Network assembly: stem, stages of hyperbolic blocks, pooled linear head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Iterator, Optional

import numpy as np

from .blocks import ACTIVATION_POSITIONS, BlockConfig, BlockVariant, block_forward, init_block
from .nn import Activation, BatchNormState, ConvSpec, batchnorm, conv2d, global_avg_pool, linear
from .tensor import Tensor

PLACEMENTS = ("at_downsample", "all_blocks")


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "eq3"
    stage_depths: tuple[int, ...] = (3, 4, 6, 3)
    stem_channels: int = 64
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    stage_strides: Optional[tuple[int, ...]] = None  # default: 1 then 2 for later stages
    num_classes: int = 100
    in_channels: int = 3
    image_size: int = 224
    expansion: int = 4
    weight_shared: bool = True
    batchnorm: bool = True
    activation: str = "softball"
    activation_placement: str = "at_downsample"
    activation_position: str = "after_residual"
    activation_radius: Optional[float] = None
    hardtanh_min: float = -1.0
    hardtanh_max: float = 1.0
    padding_mode: str = "zero-dirichlet"

    def __post_init__(self):
        if self.stage_strides is None:
            object.__setattr__(self, "stage_strides", (1,) + (2,) * (len(self.stage_depths) - 1))
        for name in ("stage_depths", "stage_channels", "stage_strides"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        BlockVariant(self.variant)
        k = len(self.stage_depths)
        if k == 0 or len(self.stage_channels) != k or len(self.stage_strides) != k:
            raise ValueError(
                "inconsistent channel progression: stage_depths, stage_channels and "
                "stage_strides must have the same non-zero length"
            )
        if min(self.stage_depths) < 1 or min(self.stage_channels) < 1 or self.stem_channels < 1:
            raise ValueError("inconsistent channel progression: depths and widths must be positive")
        if any(s not in (1, 2) for s in self.stage_strides):
            raise ValueError("stage strides must be 1 or 2")
        if self.num_classes < 2 or self.in_channels < 1:
            raise ValueError("need at least two classes and one input channel")
        if self.activation_placement not in PLACEMENTS:
            raise ValueError(f"activation_placement must be one of {PLACEMENTS}")
        if self.activation_position not in ACTIVATION_POSITIONS:
            raise ValueError(f"activation_position must be one of {ACTIVATION_POSITIONS}")
        self.activation_spec()

    def activation_spec(self) -> Optional[Activation]:
        if self.activation == "identity":
            return None
        return Activation(self.activation, self.hardtanh_min, self.hardtanh_max, self.activation_radius)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**values)


# Full-width reference configurations (100-class head, [3, 4, 6, 3]) and their expected sizes.
REFERENCE_CONFIGS = {
    "eq3": NetworkConfig(variant="eq3"),
    "eq3-no-ws": NetworkConfig(variant="eq3", weight_shared=False),
    "eq3-no-ws-x6": NetworkConfig(variant="eq3", weight_shared=False, expansion=6),
    "eq4": NetworkConfig(variant="eq4"),
    "eq5": NetworkConfig(variant="eq5"),
    "eq6": NetworkConfig(variant="eq6"),
    "eq7-no-ws-x6": NetworkConfig(variant="eq7", weight_shared=False, expansion=6),
}

REFERENCE_PARAMETER_COUNTS = {
    "eq3": 8.61e6,
    "eq3-no-ws": 8.73e6,
    "eq3-no-ws-x6": 13.0e6,
    "eq4": 5.70e6,
    "eq5": 4.26e6,
    "eq6": 5.61e6,
    "eq7-no-ws-x6": 13.0e6,
}


def block_configs(cfg: NetworkConfig) -> list[tuple[str, int, BlockConfig]]:
    """``(prefix, stage index, BlockConfig)`` for every block in order."""
    act = cfg.activation_spec()
    out = []
    width = cfg.stem_channels
    for s, (depth, channels, stride) in enumerate(zip(cfg.stage_depths, cfg.stage_channels, cfg.stage_strides)):
        for b in range(depth):
            first = b == 0
            use_act = act is not None and (cfg.activation_placement == "all_blocks" or first)
            out.append(
                (
                    f"stages.{s}.{b}",
                    s,
                    BlockConfig(
                        variant=BlockVariant(cfg.variant),
                        channels=channels,
                        in_channels=width if first else channels,
                        expansion=cfg.expansion,
                        weight_shared=cfg.weight_shared,
                        stride=stride if first else 1,
                        activation=act if use_act else None,
                        batchnorm=cfg.batchnorm,
                        padding_mode=cfg.padding_mode,
                        activation_position=cfg.activation_position,
                    ),
                )
            )
        width = channels
    return out


class Model:
    """Weights, running statistics and the forward pass of one network."""

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.training = False
        self._blocks = block_configs(config)

    # -- mode and bookkeeping ------------------------------------------------
    def train(self, mode: bool = True) -> "Model":
        self.training = mode
        return self

    def eval(self) -> "Model":
        return self.train(False)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def blocks(self) -> list[tuple[str, int, BlockConfig]]:
        return self._blocks

    def block_weights(self, prefix: str) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
        cut = len(prefix) + 1
        w = {k[cut:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}
        b = {k[cut:]: v for k, v in self.buffers.items() if k.startswith(prefix + ".")}
        return w, b

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param:{k}": v.data for k, v in self.params.items()}
        state.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return state

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        clone = Model(self.config, params, buffers)
        clone.training = self.training
        return clone

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p.data)) for p in self.params.values()) and all(
            np.all(np.isfinite(b)) for b in self.buffers.values()
        )

    # -- forward -------------------------------------------------------------------------
    def _bn(self, x: Tensor, prefix: str) -> Tensor:
        if f"{prefix}.gamma" not in self.params:
            return x
        state = BatchNormState(
            gamma=self.params[f"{prefix}.gamma"],
            beta=self.params[f"{prefix}.beta"],
            running_mean=self.buffers[f"{prefix}.running_mean"],
            running_var=self.buffers[f"{prefix}.running_var"],
            training=self.training,
        )
        return batchnorm(x, state)

    def stem(self, x: Tensor) -> Tensor:
        c = self.config
        x = conv2d(x, self.params["stem.conv1"], ConvSpec(c.in_channels, c.stem_channels, (7, 7), 2))
        x = self._bn(x, "stem.bn1")
        x = conv2d(x, self.params["stem.conv2"], ConvSpec(c.stem_channels, c.stem_channels, (3, 3), 2))
        return self._bn(x, "stem.bn2")

    def features(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected images [N, {self.config.in_channels}, H, W], got {x.shape}")
        h = self.stem(x)
        for prefix, _, bcfg in self._blocks:
            w, b = self.block_weights(prefix)
            h = block_forward(h, bcfg, w, b, training=self.training)
        return h

    def forward(self, x) -> Tensor:
        pooled = global_avg_pool(self.features(x))
        return linear(pooled, self.params["head.weight"], self.params["head.bias"])

    __call__ = forward

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits without recording gradients."""
        was = self.training
        self.eval()
        saved = {k: p.requires_grad for k, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            chunks = [self.forward(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
        finally:
            for k, p in self.params.items():
                p.requires_grad = saved[k]
            self.train(was)
        return np.concatenate(chunks, axis=0)


def build_network(cfg: NetworkConfig, seed: int = 0) -> Model:
    """Allocate and initialize every weight of ``cfg``."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    def bn(prefix, channels):
        if cfg.batchnorm:
            params[f"{prefix}.gamma"] = np.ones(channels)
            params[f"{prefix}.beta"] = np.zeros(channels)
            buffers[f"{prefix}.running_mean"] = np.zeros(channels)
            buffers[f"{prefix}.running_var"] = np.ones(channels)

    c0, cs = cfg.in_channels, cfg.stem_channels
    params["stem.conv1"] = rng.normal(0, 1 / np.sqrt(c0 * 49), (cs, c0, 7, 7))
    bn("stem.bn1", cs)
    params["stem.conv2"] = rng.normal(0, 1 / np.sqrt(cs * 9), (cs, cs, 3, 3))
    bn("stem.bn2", cs)

    blocks = block_configs(cfg)
    for prefix, _, bcfg in blocks:
        p, b = init_block(bcfg, rng, depth=len(blocks))
        params.update({f"{prefix}.{k}": v for k, v in p.items()})
        buffers.update({f"{prefix}.{k}": v for k, v in b.items()})

    last = cfg.stage_channels[-1]
    params["head.weight"] = rng.normal(0, 1 / np.sqrt(last), (cfg.num_classes, last))
    params["head.bias"] = np.zeros(cfg.num_classes)
    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    return Model(cfg, tensors, buffers)


def count_parameters(model: Model) -> int:
    """Trainable scalars; a shared 3x3 bank counts once."""
    return int(sum(p.size for p in model.params.values()))


def with_overrides(cfg: NetworkConfig, **changes) -> NetworkConfig:
    return replace(cfg, **changes)
