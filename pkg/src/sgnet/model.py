"""The 2D/3D CNN classifier: three conv blocks (conv -> batchnorm -> ReLU ->
maxpool) followed by dropout on the flattened features and a dense layer that
returns raw pre-softmax scores for the two classes.

Also owns the binary checkpoint format (magic "SGCKPT1\\0").
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import ConfigError, FormatError, ShapeError

CHECKPOINT_MAGIC = b"SGCKPT1\x00"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    spatial_rank: int = 2
    input_extents: tuple[int, ...] = (30, 36)
    conv_filters: tuple[int, int, int] = (8, 8, 16)
    kernel_extent: int = 4
    pool_extent: int = 2
    dropout_p: float = 0.5
    l2_coeff: float = 0.001
    n_classes: int = 2

    def __post_init__(self):
        self.input_extents = tuple(int(e) for e in self.input_extents)
        self.conv_filters = tuple(int(f) for f in self.conv_filters)
        self.validate()

    def validate(self) -> None:
        if self.spatial_rank not in (2, 3):
            raise ConfigError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        if len(self.input_extents) != self.spatial_rank:
            raise ConfigError(
                f"input_extents {self.input_extents} does not match rank {self.spatial_rank}")
        if len(self.conv_filters) != 3 or any(f < 1 for f in self.conv_filters):
            raise ConfigError(f"conv_filters must be three positive counts, got {self.conv_filters}")
        if self.n_classes != 2:
            raise ConfigError("the classifier is strictly binary (n_classes must be 2)")
        if self.kernel_extent < 1 or self.pool_extent < 2:
            raise ConfigError("kernel_extent must be >= 1 and pool_extent >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        for e in self.input_extents:
            reduced = e
            for _ in range(3):
                reduced //= self.pool_extent
            if reduced < 1:
                raise ConfigError(f"input extent {e} collapses below 1 after three pool layers")

    def feature_extents(self) -> tuple[int, ...]:
        """Spatial extents of the third conv block's ReLU output (pre-pool)."""
        ext = list(self.input_extents)
        for _ in range(2):
            ext = [e // self.pool_extent for e in ext]
        return tuple(ext)

    def flat_features(self) -> int:
        ext = [e for e in self.input_extents]
        for _ in range(3):
            ext = [e // self.pool_extent for e in ext]
        return int(self.conv_filters[2] * np.prod(ext))

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        """Canonical name -> shape map; defines checkpoint record order."""
        k = (self.kernel_extent,) * self.spatial_rank
        chans = (1,) + self.conv_filters
        shapes: dict[str, tuple[int, ...]] = {}
        for i in range(3):
            shapes[f"conv{i + 1}.kernel"] = (chans[i + 1], chans[i]) + k
            shapes[f"conv{i + 1}.bias"] = (chans[i + 1],)
            for stat in ("scale", "shift", "running_mean", "running_var"):
                shapes[f"bn{i + 1}.{stat}"] = (chans[i + 1],)
        shapes["dense.weight"] = (self.flat_features(), self.n_classes)
        shapes["dense.bias"] = (self.n_classes,)
        return shapes

    def to_dict(self) -> dict:
        return {
            "spatial_rank": self.spatial_rank,
            "input_extents": list(self.input_extents),
            "conv_filters": list(self.conv_filters),
            "kernel_extent": self.kernel_extent,
            "pool_extent": self.pool_extent,
            "dropout_p": self.dropout_p,
            "l2_coeff": self.l2_coeff,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            spatial_rank=int(d["spatial_rank"]),
            input_extents=tuple(d["input_extents"]),
            conv_filters=tuple(d["conv_filters"]),
            kernel_extent=int(d["kernel_extent"]),
            pool_extent=int(d["pool_extent"]),
            dropout_p=float(d["dropout_p"]),
            l2_coeff=float(d["l2_coeff"]),
            n_classes=int(d["n_classes"]),
        )


@dataclass
class ForwardPass:
    """Forward result retaining what Grad-CAM needs: the third conv block's
    post-ReLU feature maps, still graph-linked to the logits."""
    logits: Tensor          # (batch, 2) raw pre-softmax scores
    features: Tensor        # (batch, C3, *feature_extents)


class Model:
    """Parameter set + architecture descriptor.

    Immutable during inference; training mutates parameters in place and
    requires exclusive access.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 bn_states: list[BatchNormState], step: int = 0):
        self.config = config
        self.params = params
        self.bn_states = bn_states
        self.step = step

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.params.items()]

    def weight_tensors(self) -> list[Tensor]:
        """Conv kernels and the dense weight matrix (L2-penalized set)."""
        return [self.params[n] for n in
                ("conv1.kernel", "conv2.kernel", "conv3.kernel", "dense.weight")]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {n: t.data for n, t in self.params.items()}
        for i, st in enumerate(self.bn_states):
            out[f"bn{i + 1}.running_mean"] = st.mean
            out[f"bn{i + 1}.running_var"] = st.var
        return out

    def state_copy(self) -> dict[str, np.ndarray]:
        return {n: a.copy() for n, a in self.named_arrays().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, a in self.named_arrays().items():
            np.copyto(a, state[n])


def init(config: ModelConfig, seed: int) -> Model:
    """He-initialized model: weights ~ N(0, sqrt(2/fan_in)), biases zero,
    batchnorm scale 1 / shift 0, running stats (0, 1)."""
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = ad.default_dtype()
    shapes = config.parameter_shapes()
    params: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if name.endswith(".kernel"):
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name == "dense.weight":
            fan_in = shape[0]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith(".scale"):
            data = np.ones(shape)
        elif name.endswith((".bias", ".shift")):
            data = np.zeros(shape)
        else:
            continue  # running stats live in BatchNormState
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    bn_states = [BatchNormState(c, dtype=dtype) for c in config.conv_filters]
    return Model(config, params, bn_states)


def forward(model: Model, batch, training: bool = False,
            rng: np.random.Generator | None = None,
            apply_dropout: bool | None = None,
            update_stats: bool | None = None) -> ForwardPass:
    """Run the network; returns logits plus the retained third-block features.

    ``training`` selects batch statistics for batchnorm and enables dropout;
    ``apply_dropout``/``update_stats`` override those two aspects separately
    (attack and saliency passes run the deterministic function).
    """
    x = ad.as_tensor(batch)
    cfg = model.config
    expected = (1,) + cfg.input_extents
    if x.ndim != cfg.spatial_rank + 2 or x.shape[1:] != expected:
        raise ShapeError(
            f"batch shape {x.shape} does not match (n, 1, {', '.join(map(str, cfg.input_extents))})")
    if apply_dropout is None:
        apply_dropout = training
    if update_stats is None:
        update_stats = training
    h = x
    features: Tensor | None = None
    for i in range(3):
        h = ad.conv_same(h, model.params[f"conv{i + 1}.kernel"], model.params[f"conv{i + 1}.bias"])
        h = ad.batchnorm(h, model.params[f"bn{i + 1}.scale"], model.params[f"bn{i + 1}.shift"],
                         model.bn_states[i], training=training, update_stats=update_stats)
        h = ad.relu(h)
        if i == 2:
            features = h
        h = ad.maxpool(h, cfg.pool_extent)
    flat = ad.flatten(h)
    flat = ad.dropout(flat, cfg.dropout_p, rng, training=apply_dropout)
    logits = ad.dense(flat, model.params["dense.weight"], model.params["dense.bias"])
    assert features is not None
    return ForwardPass(logits=logits, features=features)


def predict_proba(model: Model, batch) -> Tensor:
    """Softmax class probabilities in inference mode; column 1 is the
    positive (disease) class."""
    with ad.no_grad():
        fp = forward(model, batch, training=False)
        return ad.softmax(fp.logits)


def l2_penalty(model: Model) -> Tensor:
    """l2_coeff times the summed squared elements of all weight tensors
    (biases and batchnorm parameters excluded)."""
    weights = model.weight_tensors()
    total = ad.sum_squares(weights[0])
    for w in weights[1:]:
        total = ad.add(total, ad.sum_squares(w))
    return ad.mul(Tensor(np.asarray(model.config.l2_coeff, weights[0].data.dtype)), total)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

def save(model: Model, path) -> None:
    """Write the checkpoint: magic, version u32, length-prefixed JSON header
    ({"config", "step"}), then one record per tensor in canonical order
    (u16 name length, name, u8 rank, u32 extents, little-endian f32 payload).
    """
    header = json.dumps({"config": model.config.to_dict(), "step": model.step},
                        sort_keys=True).encode("utf-8")
    arrays = model.named_arrays()
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(header))
    buf += header
    for name in model.config.parameter_shapes():
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb))
        buf += nb
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("file truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def done(self) -> bool:
        return self.pos == len(self.blob)


def load(path) -> Model:
    """Read a checkpoint; validates magic, version, and that every tensor
    shape matches what the embedded config dictates."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
        config = ModelConfig.from_dict(meta["config"])
        step = int(meta["step"])
    except (KeyError, ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"bad checkpoint header: {e}") from e
    arrays: dict[str, np.ndarray] = {}
    shapes = config.parameter_shapes()
    for name, shape in shapes.items():
        got = r.take(r.u16()).decode("utf-8")
        if got != name:
            raise FormatError(f"tensor record {got!r} where {name!r} expected")
        rank = r.u8()
        extents = struct.unpack(f"<{rank}I", r.take(4 * rank))
        if extents != shape:
            raise FormatError(f"tensor {name} has extents {extents}, config dictates {shape}")
        payload = r.take(4 * int(np.prod(extents)))
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(extents).astype(np.float32)
    if not r.done():
        raise FormatError("trailing bytes after final tensor record")
    params = {n: Tensor(arrays[n], requires_grad=True)
              for n in shapes if not n.startswith("bn") or n.split(".")[1] in ("scale", "shift")}
    bn_states = []
    for i in range(3):
        st = BatchNormState(config.conv_filters[i], dtype=np.float32)
        st.mean = arrays[f"bn{i + 1}.running_mean"].copy()
        st.var = arrays[f"bn{i + 1}.running_var"].copy()
        bn_states.append(st)
    return Model(config, params, bn_states, step=step)
