"""Registration networks: three patch-token families, single or multi
scale, mapping an image pair to a stationary velocity field and the
displacement fields derived from it.

Each child network embeds both images with one shared patch embedding,
extracts features per stream through shared-weight blocks, fuses the two
streams (sum + blocks, or windowed cross attention), and reads out a
2-channel velocity on the token grid through a small head whose final
layer starts at zero so an untrained model is the identity transform.
Child velocities are resampled to the finest grid and combined by fixed
weights; the fused velocity is exponentiated forward and backward and
upsampled to image resolution.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import svf
from .blocks import MixerBlock, MlpBlock, PatchEmbed, SwinCrossBlock, TokenMap
from .gradcore import (
    ContractError,
    DimensionError,
    ParamSet,
    Tensor,
    add,
    cmul,
    gelu,
    linear,
    reshape,
    transpose,
)
from .svf import VELOCITY, VectorField, integrate_svf, resample_field

FAMILIES = ("pure_mlp", "mlp_mixer", "swin_trans")


class ConfigError(ValueError):
    """A model or training configuration is invalid."""


@dataclass
class ScaleConfig:
    """One child network: patch size, attention geometry (swin only), fusion weight."""

    patch: int
    window: int | None = None
    heads: int | None = None
    weight: float = 1.0

    def to_dict(self) -> dict:
        d = {"patch": self.patch, "weight": self.weight}
        if self.window is not None:
            d["window"] = self.window
        if self.heads is not None:
            d["heads"] = self.heads
        return d


@dataclass
class ModelConfig:
    family: str = "pure_mlp"
    scales: list[ScaleConfig] = field(default_factory=lambda: [ScaleConfig(patch=4)])
    dim: int = 128
    depth_extract: int = 4
    depth_cross: int = 4
    image_size: int = 128
    integration_steps: int = 7
    hidden_ratio: int = 4
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "scales": [s.to_dict() for s in self.scales],
            "dim": self.dim,
            "depth_extract": self.depth_extract,
            "depth_cross": self.depth_cross,
            "image_size": self.image_size,
            "integration_steps": self.integration_steps,
            "hidden_ratio": self.hidden_ratio,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        try:
            scales = [ScaleConfig(**s) for s in d.pop("scales")]
            return cls(scales=scales, **d)
        except TypeError as e:
            raise ConfigError(f"bad model config field: {e}") from e

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family '{self.family}' (expected one of {FAMILIES})")
        if not self.scales:
            raise ConfigError("a model needs at least one scale")
        if self.dim < 1 or self.depth_extract < 0 or self.depth_cross < 1:
            raise ConfigError("dim must be >= 1 and depth_cross >= 1")
        for s in self.scales:
            if self.image_size % s.patch:
                raise ConfigError(f"patch {s.patch} does not divide image size {self.image_size}")
            grid = self.image_size // s.patch
            if self.family == "swin_trans":
                if s.window is None or s.heads is None:
                    raise ConfigError("swin scales need window and heads")
                if grid % s.window:
                    raise ConfigError(
                        f"window {s.window} does not divide token grid {grid} "
                        f"(image {self.image_size}, patch {s.patch})"
                    )
                if self.dim % s.heads:
                    raise ConfigError(f"dim {self.dim} not divisible by {s.heads} heads")
            if s.weight < 0:
                raise ConfigError("scale weights must be non-negative")


@dataclass
class RegistrationResult:
    """Fused velocity plus image-resolution forward/inverse displacements.

    ``disp_forward`` warps the moving image toward the fixed one;
    ``disp_inverse`` is the exponential of the negated velocity, so the
    two compose to near identity.
    """

    velocity: VectorField
    disp_forward: VectorField
    disp_inverse: VectorField


class ChildModel:
    """Single-scale network producing a velocity on its token grid."""

    def __init__(
        self,
        pset: ParamSet,
        prefix: str,
        cfg: ModelConfig,
        scale: ScaleConfig,
        head_init: str,
    ):
        self.patch = scale.patch
        self.grid = cfg.image_size // scale.patch
        self.embed = PatchEmbed(pset, f"{prefix}.embed", scale.patch, cfg.dim)
        n_tokens = self.grid * self.grid

        def extract_block(i: int):
            if cfg.family == "mlp_mixer":
                return MixerBlock(pset, f"{prefix}.extract{i}", cfg.dim, n_tokens, cfg.hidden_ratio)
            return MlpBlock(pset, f"{prefix}.extract{i}", cfg.dim, cfg.hidden_ratio)

        self.extract = [extract_block(i) for i in range(cfg.depth_extract)]

        self.family = cfg.family
        if cfg.family == "swin_trans":
            self.cross = [
                SwinCrossBlock(
                    pset,
                    f"{prefix}.cross{i}",
                    cfg.dim,
                    self.grid,
                    self.grid,
                    scale.window,
                    scale.heads,
                    cfg.hidden_ratio,
                )
                for i in range(cfg.depth_cross)
            ]
        elif cfg.family == "mlp_mixer":
            self.cross = [
                MixerBlock(pset, f"{prefix}.cross{i}", cfg.dim, n_tokens, cfg.hidden_ratio)
                for i in range(cfg.depth_cross)
            ]
        else:
            self.cross = [
                MlpBlock(pset, f"{prefix}.cross{i}", cfg.dim, cfg.hidden_ratio)
                for i in range(cfg.depth_cross)
            ]

        self.head_w1 = pset.add(f"{prefix}.head.fc1.w", (cfg.dim, cfg.dim))
        self.head_b1 = pset.add(f"{prefix}.head.fc1.b", (cfg.dim,), init="zeros")
        head_w2_init = "zeros" if head_init == "zeros" else "trunc_normal"
        self.head_w2 = pset.add(f"{prefix}.head.fc2.w", (cfg.dim, 2), init=head_w2_init)
        self.head_b2 = pset.add(f"{prefix}.head.fc2.b", (2,), init="zeros")

    def extract_features(self, img) -> TokenMap:
        """Shared-weight feature extractor; both streams call this."""
        t = self.embed(img)
        for block in self.extract:
            t = block(t)
        return t

    def velocity(self, fix, mov) -> VectorField:
        fix_feat = self.extract_features(fix)
        mov_feat = self.extract_features(mov)
        if self.family == "swin_trans":
            t = mov_feat
            for block in self.cross:
                t = block(fix_feat, t)
        else:
            t = fix_feat.with_data(add(fix_feat.data, mov_feat.data))
            for block in self.cross:
                t = block(t)
        h = linear(t.data, self.head_w1, self.head_b1)
        h = gelu(h)
        h = linear(h, self.head_w2, self.head_b2)
        v = reshape(h, (self.grid, self.grid, 2))
        v = transpose(v, (2, 0, 1))
        return VectorField(v, VELOCITY)


def fuse_multiscale(fields: list[VectorField], weights: list[float]) -> VectorField:
    """Weighted sum of child velocities on the finest child grid.

    Coarser fields are resampled up (with unit conversion) before the sum.
    """
    if not fields:
        raise ContractError("fuse_multiscale needs at least one field")
    if len(fields) != len(weights):
        raise ContractError("one weight per field required")
    finest = max(fields, key=lambda f: f.height * f.width)
    th, tw = finest.height, finest.width
    acc: Tensor | None = None
    for f, w in zip(fields, weights):
        resampled = resample_field(f, th, tw) if (f.height, f.width) != (th, tw) else f
        term = cmul(resampled.data, float(w))
        acc = term if acc is None else add(acc, term)
    return VectorField(acc, fields[0].kind)


class RegistrationModel:
    """A configured family with its parameters; maps image pairs to fields."""

    def __init__(self, config: ModelConfig, dtype=np.float32, head_init: str = "zeros"):
        config.validate()
        self.config = config
        self.params = ParamSet(config.seed, dtype=dtype)
        self.children = [
            ChildModel(self.params, f"child{i}", config, scale, head_init)
            for i, scale in enumerate(config.scales)
        ]
        self.weights = [s.weight for s in config.scales]

    @property
    def dtype(self):
        return self.params.dtype

    def _check_images(self, fix, mov) -> tuple[Tensor, Tensor]:
        s = self.config.image_size
        out = []
        for img in (fix, mov):
            t = img if isinstance(img, Tensor) else Tensor(np.asarray(img), dtype=self.dtype)
            if t.shape != (s, s):
                raise DimensionError(f"expected {s}x{s} images, got {t.shape}")
            out.append(t)
        return out[0], out[1]

    def child_velocities(self, fix, mov) -> list[VectorField]:
        fix_t, mov_t = self._check_images(fix, mov)
        return [c.velocity(fix_t, mov_t) for c in self.children]

    def fused_velocity(self, fix, mov) -> VectorField:
        return fuse_multiscale(self.child_velocities(fix, mov), self.weights)

    def register(self, fix, mov) -> RegistrationResult:
        """Full pipeline: fused velocity, forward and inverse displacement
        at image resolution. Differentiable end to end."""
        s = self.config.image_size
        v = self.fused_velocity(fix, mov)
        fwd = integrate_svf(v, self.config.integration_steps)
        bwd = integrate_svf(svf.negate_field(v), self.config.integration_steps)
        return RegistrationResult(
            velocity=v,
            disp_forward=resample_field(fwd, s, s),
            disp_inverse=resample_field(bwd, s, s),
        )


def init_model(config: ModelConfig, dtype=np.float32, head_init: str = "zeros") -> RegistrationModel:
    """Build a model with deterministic seeded parameters.

    ``head_init='zeros'`` (default) starts at the identity transform;
    ``'random'`` is used by the gradient checker, which must evaluate at
    a generic point (at exactly zero displacement the bilinear warp sits
    on an interpolation-cell corner where central differences straddle a
    derivative kink).
    """
    if head_init not in ("zeros", "random"):
        raise ConfigError(f"unknown head_init '{head_init}'")
    return RegistrationModel(config, dtype=dtype, head_init=head_init)


def register(model: RegistrationModel, fix, mov) -> RegistrationResult:
    return model.register(fix, mov)


# ---------------------------------------------------------------------------
# shipped presets


def _swin_scales() -> list[ScaleConfig]:
    return [
        ScaleConfig(patch=4, window=8, heads=32, weight=0.5),
        ScaleConfig(patch=8, window=4, heads=16, weight=0.3),
        ScaleConfig(patch=16, window=2, heads=8, weight=0.2),
    ]


def _plain_scales() -> list[ScaleConfig]:
    return [
        ScaleConfig(patch=4, weight=0.5),
        ScaleConfig(patch=8, weight=0.3),
        ScaleConfig(patch=16, weight=0.2),
    ]


def preset(name: str) -> ModelConfig:
    """Named model configurations.

    ``*_s`` are single-scale (patch 4), ``*_m`` multi-scale with patches
    4/8/16 and fusion weights 0.5/0.3/0.2; swin variants use windows
    8/4/2 with 32/16/8 heads. ``*_desk`` are small CPU test presets.
    """
    presets = {
        "pure_mlp_s": ModelConfig(family="pure_mlp", scales=[ScaleConfig(patch=4, weight=1.0)]),
        "mlp_mixer_s": ModelConfig(family="mlp_mixer", scales=[ScaleConfig(patch=4, weight=1.0)]),
        "swin_trans_s": ModelConfig(
            family="swin_trans", scales=[ScaleConfig(patch=4, window=8, heads=32, weight=1.0)]
        ),
        "pure_mlp_m": ModelConfig(family="pure_mlp", scales=_plain_scales()),
        "mlp_mixer_m": ModelConfig(family="mlp_mixer", scales=_plain_scales()),
        "swin_trans_m": ModelConfig(family="swin_trans", scales=_swin_scales()),
        "pure_mlp_desk": ModelConfig(
            family="pure_mlp",
            scales=[ScaleConfig(patch=4, weight=1.0)],
            dim=16,
            depth_extract=1,
            depth_cross=1,
            image_size=64,
        ),
        "mlp_mixer_desk": ModelConfig(
            family="mlp_mixer",
            scales=[ScaleConfig(patch=4, weight=1.0)],
            dim=16,
            depth_extract=1,
            depth_cross=1,
            image_size=64,
        ),
        "swin_trans_desk": ModelConfig(
            family="swin_trans",
            scales=[ScaleConfig(patch=4, window=4, heads=4, weight=1.0)],
            dim=16,
            depth_extract=1,
            depth_cross=1,
            image_size=64,
        ),
    }
    if name not in presets:
        raise ConfigError(f"unknown preset '{name}' (available: {sorted(presets)})")
    return presets[name]


PRESET_NAMES = (
    "pure_mlp_s",
    "mlp_mixer_s",
    "swin_trans_s",
    "pure_mlp_m",
    "mlp_mixer_m",
    "swin_trans_m",
    "pure_mlp_desk",
    "mlp_mixer_desk",
    "swin_trans_desk",
)


# ---------------------------------------------------------------------------
# checkpoints ("PRCK": magic, u32 header length, JSON header, f32 LE payload)

_CKPT_MAGIC = b"PRCK"


class CheckpointError(ValueError):
    """Checkpoint file is malformed or fails its integrity hash."""


def save_checkpoint(model: RegistrationModel, path) -> None:
    names = model.params.names()
    payload = b"".join(
        np.ascontiguousarray(model.params[n].data, dtype="<f4").tobytes() for n in names
    )
    header = {
        "format_version": 1,
        "config": model.config.to_dict(),
        "params": [[n, list(model.params[n].shape)] for n in names],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path, dtype=np.float32) -> RegistrationModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable header ({e})") from e
        payload = fh.read()
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: payload hash mismatch, file corrupt")
    config = ModelConfig.from_dict(header["config"])
    model = RegistrationModel(config, dtype=dtype)
    offset = 0
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        arrays[name] = arr
        offset += n * 4
    if offset != len(payload):
        raise CheckpointError(f"{path}: payload size does not match parameter table")
    if set(arrays) != set(model.params.names()):
        raise CheckpointError(f"{path}: parameter names do not match the stored config")
    model.params.load_arrays(arrays)
    return model
