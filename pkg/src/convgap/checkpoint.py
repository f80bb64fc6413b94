"""Checkpoint container: a directory holding ``manifest.json`` and ``weights.bin``.

The manifest carries the model config, free-form metadata (chat-template
token sequences live under ``template.*`` keys), and a tensor table mapping
each name to ``{"dtype": "f32", "shape": [...], "byte_offset": n}``. The blob
is little-endian float32, row-major, tensors concatenated in table order.

Linear weights are stored ``[d_in, d_out]`` so that activations are
multiplied on the left (``x @ W``).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from convgap.errors import CheckpointFormatError, ConfigError

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "weights.bin"
_F32 = np.dtype("<f4")

TEMPLATE_KEYS = (
    "template.system_prefix",
    "template.user_prefix",
    "template.assistant_prefix",
    "template.turn_suffix",
)

MLP_PARTS = ("up", "gate", "down")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_mlp: int
    vocab_size: int
    norm_kind: str = "rmsnorm"
    tied_unembedding: bool = False
    positional_kind: str = "rotary"
    family_id: str = "synthetic"
    moe_flag: bool = False
    gated_mlp: bool = True
    norm_eps: float = 1e-5
    rope_base: float = 10000.0
    max_positions: int = 512

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_mlp < 1:
            raise ConfigError(f"d_mlp must be >= 1, got {self.d_mlp}")
        if self.norm_kind not in ("rmsnorm", "layernorm"):
            raise ConfigError(f"unknown norm_kind {self.norm_kind!r}")
        if self.positional_kind not in ("rotary", "learned", "none"):
            raise ConfigError(f"unknown positional_kind {self.positional_kind!r}")
        if self.positional_kind == "rotary" and self.head_dim % 2:
            raise ConfigError("rotary embeddings need an even head dimension")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)


def mlp_tensor_names(layer: int, config: ModelConfig) -> list[str]:
    parts = MLP_PARTS if config.gated_mlp else ("up", "down")
    return [f"layers.{layer}.mlp.{p}.weight" for p in parts]


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor table (name -> shape), in blob order."""
    d, v, m = config.d_model, config.vocab_size, config.d_mlp
    layernorm = config.norm_kind == "layernorm"
    shapes: dict[str, tuple[int, ...]] = {"embed.weight": (v, d)}
    if config.positional_kind == "learned":
        shapes["pos_embed.weight"] = (config.max_positions, d)

    def norm(prefix):
        shapes[f"{prefix}.weight"] = (d,)
        if layernorm:
            shapes[f"{prefix}.bias"] = (d,)

    for i in range(config.n_layers):
        norm(f"layers.{i}.attn_norm")
        for p in ("q", "k", "v", "o"):
            shapes[f"layers.{i}.attn.{p}.weight"] = (d, d)
        norm(f"layers.{i}.mlp_norm")
        shapes[f"layers.{i}.mlp.up.weight"] = (d, m)
        if config.gated_mlp:
            shapes[f"layers.{i}.mlp.gate.weight"] = (d, m)
        shapes[f"layers.{i}.mlp.down.weight"] = (m, d)
    norm("final_norm")
    if not config.tied_unembedding:
        shapes["unembed.weight"] = (d, v)
    return shapes


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Validated, immutable model: config + float32 tensors + metadata."""

    config: ModelConfig
    tensors: Mapping[str, np.ndarray]
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        validate_tensors(self.config, self.tensors)
        frozen = {}
        for name, arr in self.tensors.items():
            arr = np.asarray(arr, dtype=np.float32)
            if arr.flags.writeable:
                arr = arr.copy()
                arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "tensors", frozen)
        object.__setattr__(self, "metadata", dict(self.metadata))

    @cached_property
    def weights64(self) -> dict[str, np.ndarray]:
        """Float64 views of every tensor, used by the forward engine."""
        out = {name: arr.astype(np.float64) for name, arr in self.tensors.items()}
        if self.config.tied_unembedding:
            out["unembed.weight"] = out["embed.weight"].T.copy()
        return out

    @property
    def role(self) -> str | None:
        return self.metadata.get("role")

    def template(self, key: str) -> list[int] | None:
        seq = self.metadata.get(f"template.{key}")
        return None if seq is None else [int(t) for t in seq]

    def is_paired_with(self, other: "Checkpoint") -> bool:
        if self.config != other.config:
            return False
        return all(
            other.tensors[n].shape == a.shape for n, a in self.tensors.items()
        ) and set(self.tensors) == set(other.tensors)


def validate_tensors(config: ModelConfig, tensors: Mapping[str, np.ndarray]) -> None:
    expected = expected_shapes(config)
    for name, shape in expected.items():
        if name not in tensors:
            raise CheckpointFormatError("missing tensor", tensor=name)
        got = tuple(np.shape(tensors[name]))
        if got != shape:
            raise CheckpointFormatError(f"shape {list(got)} != expected {list(shape)}", tensor=name)
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise CheckpointFormatError("unexpected tensor for this config", tensor=extra[0])


def write_container(path, tensors: Mapping[str, np.ndarray], header: Mapping[str, Any]) -> Path:
    """Write ``tensors`` (in the given order) plus ``header`` fields to a container dir."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = {}
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype=_F32)
            table[name] = {"dtype": "f32", "shape": list(data.shape), "byte_offset": offset}
            fh.write(data.tobytes(order="C"))
            offset += data.nbytes
    manifest = {"format_version": FORMAT_VERSION, **header, "tensors": table}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_container(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise CheckpointFormatError(f"no {MANIFEST} in {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"unreadable manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"format_version {version!r} unsupported (expected {FORMAT_VERSION})")
    bpath = path / BLOB
    if not bpath.is_file():
        raise CheckpointFormatError(f"no {BLOB} in {path}")
    blob = bpath.read_bytes()
    tensors = {}
    for name, entry in manifest.get("tensors", {}).items():
        if entry.get("dtype") != "f32":
            raise CheckpointFormatError(f"dtype {entry.get('dtype')!r} unsupported", tensor=name)
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = int(entry["byte_offset"])
        end = start + count * _F32.itemsize
        if start < 0 or end > len(blob):
            have = max(0, len(blob) - start) // _F32.itemsize
            raise CheckpointFormatError(
                f"truncated blob: need {count} floats at byte {start}, blob holds {have}", tensor=name
            )
        arr = np.frombuffer(blob, dtype=_F32, count=count, offset=start).reshape(shape)
        tensors[name] = arr
    return manifest, tensors


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    ordered = {name: ckpt.tensors[name] for name in expected_shapes(ckpt.config)}
    header = {"kind": "checkpoint", "config": ckpt.config.to_dict(), "metadata": ckpt.metadata}
    return write_container(path, ordered, header)


def load_checkpoint(path) -> Checkpoint:
    manifest, tensors = read_container(path)
    if manifest.get("kind", "checkpoint") != "checkpoint":
        raise CheckpointFormatError(f"container kind {manifest.get('kind')!r} is not a checkpoint")
    if "config" not in manifest:
        raise CheckpointFormatError("manifest has no config")
    config = ModelConfig.from_dict(manifest["config"])
    return Checkpoint(config=config, tensors=tensors, metadata=manifest.get("metadata", {}))
