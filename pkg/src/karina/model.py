"""Model assembly and checkpointing.

The network keeps full spatial resolution end to end: a stem conv lifts
input channels onto the first stage width, stages chain residual blocks
with norm+conv transitions where the width changes, and a final 3x3 plus
1x1 head drop back onto output channels.  No pooling, no striding; depth
and width carry all the capacity.

Checkpoints are a single binary file: magic, version, the canonical
config text, then each parameter as name + extents + raw little-endian
float32.  Loading rebuilds the model from the embedded config and fills
parameters by name, so a checkpoint is self-describing.
"""

from __future__ import annotations

import struct
from contextlib import nullcontext
from dataclasses import dataclass, fields, replace

import numpy as np

from karina import engine
from karina.layers import Conv2d, ConvNextBlock, DepthScale, LayerNormChannels, Module
from karina.padding import PaddingMode

CHECKPOINT_MAGIC = b"KRNA"
CHECKPOINT_VERSION = 1


class ModelError(Exception):
    """Invalid configuration, input, or checkpoint."""


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 67
    out_channels: int = 67
    stage_dims: tuple = (96, 192, 384, 768)
    depths: tuple = (3, 3, 9, 3)
    stem_kernel: int = 3
    padding_mode: str = "geocyclic"
    se_enabled: bool = True
    reduction_ratio: int = 4
    layer_scale_init: float = 1e-6
    drop_path_rate: float = 0.0

    def validate(self):
        if self.in_channels < 1:
            raise ModelError(f"in_channels must be positive, got {self.in_channels}")
        if self.out_channels < 1:
            raise ModelError(f"out_channels must be positive, got {self.out_channels}")
        if not self.stage_dims:
            raise ModelError("stage_dims must not be empty")
        if any(int(d) < 1 for d in self.stage_dims):
            raise ModelError(f"stage_dims must be positive, got {self.stage_dims}")
        if len(self.depths) != len(self.stage_dims):
            raise ModelError(
                f"depths has {len(self.depths)} entries for {len(self.stage_dims)} stages"
            )
        if any(int(d) < 1 for d in self.depths):
            raise ModelError(f"every stage needs at least one block, got depths {self.depths}")
        if self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            raise ModelError(f"stem_kernel must be odd and positive, got {self.stem_kernel}")
        PaddingMode.parse(self.padding_mode)
        if self.reduction_ratio < 1:
            raise ModelError(f"reduction_ratio must be positive, got {self.reduction_ratio}")
        if self.se_enabled:
            for d in self.stage_dims:
                if d % self.reduction_ratio:
                    raise ModelError(
                        f"reduction_ratio {self.reduction_ratio} must divide stage dim {d}"
                    )
        if self.layer_scale_init < 0:
            raise ModelError(f"layer_scale_init must be non-negative, got {self.layer_scale_init}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ModelError(f"drop_path_rate must sit in [0, 1), got {self.drop_path_rate}")
        return self

    def to_text(self):
        """Canonical key=value lines, sorted by key; round-trips exactly."""
        out = []
        for f in sorted(fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                out.append(f"{f.name}={','.join(str(int(e)) for e in v)}")
            elif isinstance(v, bool):
                out.append(f"{f.name}={'true' if v else 'false'}")
            elif isinstance(v, float):
                out.append(f"{f.name}={v!r}")
            else:
                out.append(f"{f.name}={v}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text):
        known = {f.name: f for f in fields(cls)}
        got = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ModelError(f"config line {lineno} is not key=value: {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in known:
                raise ModelError(f"unknown config key {key!r}")
            if key in ("stage_dims", "depths"):
                got[key] = tuple(int(t) for t in raw.split(","))
            elif key in ("layer_scale_init", "drop_path_rate"):
                got[key] = float(raw)
            elif key == "se_enabled":
                if raw not in ("true", "false"):
                    raise ModelError(f"se_enabled must be true or false, got {raw!r}")
                got[key] = raw == "true"
            elif key == "padding_mode":
                got[key] = raw
            else:
                got[key] = int(raw)
        return cls(**got).validate()


class Stem(Module):
    def __init__(self, in_channels, dim, kernel, mode, rng, dtype):
        self.conv = Conv2d(in_channels, dim, kernel, padding_mode=mode, rng=rng, dtype=dtype)
        self.norm = LayerNormChannels(dim, dtype=dtype)

    def __call__(self, x):
        return self.norm(self.conv(x))


class Stage(Module):
    def __init__(self, transition, blocks):
        self.transition = transition
        self.blocks = blocks


class KarinaModel(Module):
    """Same-resolution forecast network over (channels, lat, lon) planes."""

    def __init__(self, config, seed=0, dtype=np.float32):
        config.validate()
        self.config = config
        self.seed = int(seed)
        self.dtype = np.dtype(dtype).type
        self.mode = "train"
        mode = PaddingMode.parse(config.padding_mode)
        rng = np.random.default_rng([int(seed), 0])
        self._droppath_rng = np.random.default_rng([int(seed), 1])

        dims = tuple(int(d) for d in config.stage_dims)
        self.stem = Stem(config.in_channels, dims[0], config.stem_kernel, mode, rng, dtype)
        stages = []
        prev = dims[0]
        for i, (dim, depth) in enumerate(zip(dims, config.depths)):
            transition = None
            if i > 0 and dim != prev:
                transition = DepthScale(prev, dim, padding_mode=mode, rng=rng, dtype=dtype)
            blocks = [
                ConvNextBlock(
                    dim,
                    se_enabled=config.se_enabled,
                    reduction=config.reduction_ratio,
                    layer_scale_init=config.layer_scale_init,
                    drop_path_rate=config.drop_path_rate,
                    padding_mode=mode,
                    rng=rng,
                    dtype=dtype,
                )
                for _ in range(int(depth))
            ]
            stages.append(Stage(transition, blocks))
            prev = dim
        self.stages = stages
        self.final = Conv2d(dims[-1], dims[-1], 3, padding_mode=mode, rng=rng, dtype=dtype)
        self.head = Conv2d(dims[-1], config.out_channels, 1, padding_mode=mode, rng=rng, dtype=dtype)
        self.assign_names()

    def named_parameters(self, prefix=""):
        skip = {"config", "seed", "dtype", "mode"}
        for attr, value in vars(self).items():
            if attr in skip or attr.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.named_parameters(prefix + attr + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{attr}.{i}.")

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def forward(self, x):
        if not isinstance(x, engine.Tensor):
            x = engine.Tensor(np.asarray(x, dtype=self.dtype))
        if x.data.dtype.type is not self.dtype:
            raise ModelError(
                f"input dtype {x.data.dtype} does not match model dtype {np.dtype(self.dtype)}"
            )
        if x.data.ndim not in (3, 4):
            raise ModelError(f"input must be (C,H,W) or (B,C,H,W), got {x.data.shape}")
        if x.data.shape[-3] != self.config.in_channels:
            raise ModelError(
                f"input has {x.data.shape[-3]} channels, model expects {self.config.in_channels}"
            )
        train = self.mode == "train"
        ctx = nullcontext() if train else engine.no_grad()
        with ctx:
            t = self.stem(x)
            for stage in self.stages:
                if stage.transition is not None:
                    t = stage.transition(t)
                for block in stage.blocks:
                    t = block(t, train=train, rng=self._droppath_rng)
            t = self.final(t)
            t = self.head(t)
        return t

    __call__ = forward


def build(config=None, seed=0, dtype=np.float32, **overrides):
    """Construct a model, applying keyword overrides onto the config."""
    config = config or ModelConfig()
    if overrides:
        config = replace(config, **overrides)
    return KarinaModel(config.validate(), seed=seed, dtype=dtype)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise ModelError(f"checkpoint truncated while reading {what}")
    return buf


def save_checkpoint(model, path):
    """Write config text plus every parameter as raw little-endian float32."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        cfg = model.config.to_text().encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        named = list(model.named_parameters())
        fh.write(struct.pack("<I", len(named)))
        for name, p in named:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", p.data.ndim))
            for ext in p.data.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def checkpoint_size(model):
    """Exact on-disk byte count for this model's checkpoint."""
    total = 4 + 4 + 4 + len(model.config.to_text().encode("utf-8")) + 4
    for name, p in model.named_parameters():
        total += 4 + len(name.encode("utf-8")) + 4 + 4 * p.data.ndim + 4 * p.data.size
    return total


def load_checkpoint(path, dtype=np.float32, expect_config=None):
    """Rebuild the model a checkpoint describes and fill its parameters.

    expect_config, when given, must agree with the embedded config; the
    first differing field is named in the error.
    """
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise ModelError(f"not a model checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise ModelError(
                f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = ModelConfig.from_text(_read_exact(fh, cfg_len, "config").decode("utf-8"))
        if expect_config is not None:
            for f in fields(ModelConfig):
                a, b = getattr(config, f.name), getattr(expect_config, f.name)
                if a != b:
                    raise ModelError(
                        f"checkpoint config field {f.name} is {a!r}, expected {b!r}"
                    )
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        stored = {}
        order = []
        for _ in range(n_params):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, f"{name} extent"))[0]
                for _ in range(rank)
            )
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(fh, 4 * count, f"{name} data")
            stored[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
            order.append(name)
        if len(order) != len(stored):
            raise ModelError("checkpoint repeats a parameter name")
        trailing = fh.read(1)
        if trailing:
            raise ModelError("checkpoint has trailing bytes after the last parameter")

    model = KarinaModel(config, seed=0, dtype=dtype)
    model_named = dict(model.named_parameters())
    missing = sorted(set(model_named) - set(stored))
    extra = sorted(set(stored) - set(model_named))
    if missing or extra:
        raise ModelError(
            f"checkpoint parameter names disagree with config: missing {missing[:3]}, "
            f"unexpected {extra[:3]}"
        )
    for name, p in model_named.items():
        arr = stored[name]
        if arr.shape != p.data.shape:
            raise ModelError(
                f"checkpoint parameter {name} has shape {arr.shape}, model wants {p.data.shape}"
            )
        p.data[...] = arr.astype(p.data.dtype)
    return model
