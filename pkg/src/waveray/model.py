"""Classifier assembly: backbone, optional ray encoder, linear head.

The ray budget k (0..3) switches layers on in a fixed order: k >= 1 adds
ray layers to the first refinement stage, k >= 2 to the second, and k = 3
adds the token encoder (projection plus one ray layer) between the
backbone and the head.  With k < 3 the head sits on global average
pooling of the deepest map; with k = 3 it sits on mean-pooled tokens.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _as_tensor, _record_op
from .backbone import Backbone, BackboneConfig, FeaturePyramid
from .errors import ConfigError, DataError, ShapeError
from .rays import RayEncoder, RayField


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rays: int = 0
    d_model: int = 256
    classes: int = 1000
    input_extent: int = 224
    n_origins: int = 12
    share_ray_fields: bool = False

    def validate(self) -> None:
        self.backbone.validate()
        if not 0 <= self.rays <= 3:
            raise ConfigError(f"rays must be between 0 and 3, got {self.rays}")
        if self.classes < 2:
            raise ConfigError(f"need at least two classes, got {self.classes}")
        if self.d_model < 1:
            raise ConfigError(f"d_model must be positive, got {self.d_model}")
        if self.n_origins < 1:
            raise ConfigError(f"n_origins must be positive, got {self.n_origins}")
        # stem /2, extraction /4, then one halving per refinement stage
        # except the last: the input must survive every decimation evenly.
        divisor = 8 * (2 ** (self.backbone.refinement_stages - 1))
        if self.input_extent < 14 or self.input_extent % divisor:
            raise ConfigError(
                f"input extent {self.input_extent} is not a multiple of {divisor}"
            )
        # power-of-two extents at the ray-layer resolutions are enforced at
        # run time by the spectral op itself, so parameter counting works
        # for configurations whose ray layers could never execute.

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["extraction_channels"] = list(self.backbone.extraction_channels)
        d["backbone"]["refinement_channels"] = list(self.backbone.refinement_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bb = dict(d["backbone"])
        bb["extraction_channels"] = tuple(bb["extraction_channels"])
        bb["refinement_channels"] = tuple(bb["refinement_channels"])
        rest = {k: v for k, v in d.items() if k != "backbone"}
        return cls(backbone=BackboneConfig(**bb), **rest)


def table1_config(rays: int = 0, classes: int = 1000) -> ModelConfig:
    """The full-scale configuration: 224 input, 4096-wide deepest stage."""
    return ModelConfig(
        backbone=BackboneConfig(
            stem_channels=32,
            extraction_channels=(32, 48, 64),
            refinement_channels=(64, 512, 4096),
            blocks_per_stage=6,
            refinement_stages=2,
        ),
        rays=rays,
        d_model=256,
        classes=classes,
        input_extent=224,
    )


def desk_config(rays: int = 0, classes: int = 3, input_extent: int = 32) -> ModelConfig:
    """A small configuration that trains in seconds on a CPU."""
    return ModelConfig(
        backbone=BackboneConfig(
            stem_channels=8,
            extraction_channels=(8, 12, 16),
            refinement_channels=(16, 32, 64),
            blocks_per_stage=2,
            refinement_stages=2,
        ),
        rays=rays,
        d_model=32,
        classes=classes,
        input_extent=input_extent,
    )


def cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer labels under row-wise softmax.

    Computed through a log-sum-exp shift, so large logits do not overflow.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, classes), got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"labels must lie in [0, {k}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    picked = z[np.arange(n), labels]
    out = np.asarray((lse.ravel() - picked).mean(), dtype=z.dtype)

    def bw(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _record_op(out, (logits,), bw)


class WaveletClassifier:
    """The full model: backbone, optional encoder, linear head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        per_stage = config.backbone.ray_layers_per_stage
        counts = [0] * config.backbone.refinement_stages
        for i in range(min(config.rays, 2, config.backbone.refinement_stages)):
            counts[i] = per_stage
        shared = RayField(config.n_origins) if (config.share_ray_fields and config.rays) else None
        self.backbone = Backbone(config.backbone, rng, ray_layer_counts=counts,
                                 n_origins=config.n_origins, shared_field=shared)
        deep_c = config.backbone.refinement_channels[-1]
        if config.rays >= 3:
            self.encoder = RayEncoder(deep_c, d_model=config.d_model, n_layers=1,
                                      n_origins=config.n_origins, rng=rng)
            if shared is not None:
                for layer in self.encoder.layers:
                    layer.field = shared
            head_in = config.d_model
        else:
            self.encoder = None
            head_in = deep_c
        self.head_w = Tensor(rng.normal(0.0, 0.02, (head_in, config.classes)),
                             requires_grad=True)
        self.head_b = Tensor(np.zeros(config.classes), requires_grad=True)
        self._params = self._collect_params()

    def _collect_params(self) -> dict[str, Tensor]:
        named = list(self.backbone.named_params())
        if self.encoder is not None:
            named.extend(self.encoder.named_params("encoder"))
        named.append(("head.w", self.head_w))
        named.append(("head.b", self.head_b))
        out: dict[str, Tensor] = {}
        seen: set[int] = set()
        for name, t in named:
            if name in out:
                raise ConfigError(f"duplicate parameter name {name!r}")
            if id(t) in seen:  # shared field registered under its first name
                continue
            seen.add(id(t))
            out[name] = t
        return out

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def _check_images(self, images: Tensor) -> None:
        e = self.config.input_extent
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected an Nx3x{e}x{e} batch, got shape {images.shape}")
        if images.shape[2] != e or images.shape[3] != e:
            raise ConfigError(
                f"model configured for {e}x{e} inputs, got {images.shape[2]}x{images.shape[3]}"
            )

    def forward(self, images) -> Tensor:
        return self.forward_with_aux(images)[0]

    def forward_with_aux(self, images) -> tuple[Tensor, dict]:
        images = _as_tensor(images)
        self._check_images(images)
        pyramid, maps = self.backbone.forward(images)
        deep = pyramid.deepest
        if self.encoder is not None:
            tokens, emaps = self.encoder.forward(deep)
            maps = maps + emaps
            pooled = ad.reduce_mean(tokens, axis=1)
        else:
            pooled = ad.global_avg_pool(deep)
        logits = ad.add(ad.matmul(pooled, self.head_w), self.head_b)
        return logits, {"pyramid": pyramid, "maps": maps, "pooled": pooled}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self._params) - set(arrays))
        extra = sorted(set(arrays) - set(self._params))
        if missing or extra:
            raise ConfigError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for name, p in self._params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise ConfigError(
                    f"parameter {name!r} has shape {arr.shape}, expected {p.shape}"
                )
            p.data = np.ascontiguousarray(arr, dtype=p.dtype)
            p.grad = None

    def ray_fields(self) -> list[RayField]:
        fields = []
        seen = set()
        for stage in self.backbone.stages:
            for ray in stage.ray_layers:
                if id(ray.field) not in seen:
                    seen.add(id(ray.field))
                    fields.append(ray.field)
        if self.encoder is not None:
            for layer in self.encoder.layers:
                if id(layer.field) not in seen:
                    seen.add(id(layer.field))
                    fields.append(layer.field)
        return fields


def classifier_forward(images, model: WaveletClassifier) -> Tensor:
    return model.forward(images)


def param_count(config: ModelConfig) -> tuple[dict[str, int], int]:
    """Per-component parameter counts and the total for a configuration.

    Components follow the top-level parameter name segments (stem,
    extract0, stage0, ..., encoder, head).
    """
    model = WaveletClassifier(config, seed=0)
    per: dict[str, int] = {}
    for name, p in model.parameters().items():
        key = name.split(".", 1)[0]
        per[key] = per.get(key, 0) + p.size
    return per, sum(per.values())
