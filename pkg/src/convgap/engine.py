"""Pre-norm decoder forward pass with residual capture, MLP-window grafts and residual hooks.

Block layout: ``x += attn(norm(x)); x += mlp(norm(x))``. The residual is
captured after each full block, so the capture at layer ``L-1`` decoded
through the final norm and unembedding is exactly the model's output.
All arithmetic runs in float64 on float32-stored weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from convgap.checkpoint import Checkpoint, mlp_tensor_names
from convgap.errors import HookError, MoERejectedError, TokenRangeError, UnpairedCheckpointsError, WindowError

_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True, eq=False)
class LayerTrace:
    tokens: np.ndarray  # [T] int
    residuals: np.ndarray  # [T, n_captured, d_model] float64
    final_logits: np.ndarray  # [T, vocab] float64
    layers: tuple[int, ...]
    capture_policy: str  # "all_layers" | "subset"

    def residual(self, layer: int) -> np.ndarray:
        try:
            return self.residuals[:, self.layers.index(layer)]
        except ValueError:
            raise KeyError(f"layer {layer} not captured (captured: {self.layers})") from None

    @property
    def n_positions(self) -> int:
        return len(self.tokens)


def apply_norm(x: np.ndarray, model: Checkpoint, prefix: str) -> np.ndarray:
    w = model.weights64
    eps = model.config.norm_eps
    if model.config.norm_kind == "rmsnorm":
        return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * w[f"{prefix}.weight"]
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * w[f"{prefix}.weight"] + w[f"{prefix}.bias"]


def readout_logits(model: Checkpoint, residual: np.ndarray) -> np.ndarray:
    """Final norm + unembedding over the last axis of ``residual``."""
    residual = np.asarray(residual, dtype=np.float64)
    return apply_norm(residual, model, "final_norm") @ model.weights64["unembed.weight"]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _rope(x: np.ndarray, base: float) -> np.ndarray:
    # x: [H, T, dh]; half-split rotation convention
    _, t, dh = x.shape
    half = dh // 2
    inv = base ** (-np.arange(half, dtype=np.float64) * 2.0 / dh)
    ang = np.arange(t, dtype=np.float64)[:, None] * inv[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)


def _attention(h: np.ndarray, model: Checkpoint, layer: int) -> np.ndarray:
    cfg = model.config
    w = model.weights64
    p = f"layers.{layer}.attn"
    t = h.shape[0]
    nh, dh = cfg.n_heads, cfg.head_dim

    def heads(m):
        return m.reshape(t, nh, dh).transpose(1, 0, 2)

    q = heads(h @ w[f"{p}.q.weight"])
    k = heads(h @ w[f"{p}.k.weight"])
    v = heads(h @ w[f"{p}.v.weight"])
    if cfg.positional_kind == "rotary":
        q = _rope(q, cfg.rope_base)
        k = _rope(k, cfg.rope_base)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    out = softmax(scores) @ v  # [H, T, dh]
    return out.transpose(1, 0, 2).reshape(t, cfg.d_model) @ w[f"{p}.o.weight"]


def _mlp(h: np.ndarray, model: Checkpoint, layer: int) -> np.ndarray:
    w = model.weights64
    p = f"layers.{layer}.mlp"
    up = h @ w[f"{p}.up.weight"]
    if model.config.gated_mlp:
        g = h @ w[f"{p}.gate.weight"]
        act = g / (1.0 + np.exp(-g)) * up
    else:
        act = 0.5 * up * (1.0 + np.tanh(_GELU_C * (up + 0.044715 * up**3)))
    return act @ w[f"{p}.down.weight"]


def _check_tokens(model: Checkpoint, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size < 1:
        raise TokenRangeError("token sequence must be non-empty")
    bad = (tokens < 0) | (tokens >= model.config.vocab_size)
    if bad.any():
        raise TokenRangeError(
            f"token id {int(tokens[bad][0])} outside vocab of size {model.config.vocab_size}"
        )
    if model.config.positional_kind == "learned" and tokens.size > model.config.max_positions:
        raise TokenRangeError(f"sequence length {tokens.size} exceeds max_positions")
    return tokens


def forward_trace(
    model: Checkpoint,
    tokens: Sequence[int],
    layers: Iterable[int] | None = None,
    hooks: Sequence = (),
) -> LayerTrace:
    """Teacher-forced forward pass capturing the post-block residual at each requested layer.

    ``hooks`` are callables ``hook(layer, residual) -> residual`` exposing a
    ``layers`` attribute; each runs after the block of every layer it lists.
    """
    cfg = model.config
    tokens = _check_tokens(model, tokens)
    n = cfg.n_layers
    capture = tuple(range(n)) if layers is None else tuple(sorted(set(int(l) for l in layers)))
    if any(l < 0 or l >= n for l in capture):
        raise HookError(f"capture layers {capture} outside [0, {n})")
    for hook in hooks:
        if any(l < 0 or l >= n for l in hook.layers):
            raise HookError(f"hook references layer outside [0, {n}): {tuple(hook.layers)}")

    w = model.weights64
    x = w["embed.weight"][tokens]
    if cfg.positional_kind == "learned":
        x = x + w["pos_embed.weight"][: len(tokens)]
    captured = []
    for layer in range(n):
        x = x + _attention(apply_norm(x, model, f"layers.{layer}.attn_norm"), model, layer)
        x = x + _mlp(apply_norm(x, model, f"layers.{layer}.mlp_norm"), model, layer)
        for hook in hooks:
            if layer in hook.layers:
                x = hook(layer, x)
        if layer in capture:
            captured.append(x)
    residuals = np.stack(captured, axis=1) if captured else np.zeros((len(tokens), 0, cfg.d_model))
    return LayerTrace(
        tokens=tokens,
        residuals=residuals,
        final_logits=readout_logits(model, x),
        layers=capture,
        capture_policy="all_layers" if len(capture) == n else "subset",
    )


def require_dense(*models: Checkpoint) -> None:
    for m in models:
        if m.config.moe_flag:
            raise MoERejectedError(
                f"checkpoint family {m.config.family_id!r} is MoE-flagged; dense MLP interventions are undefined"
            )


def check_window(window: Sequence[int], n_layers: int) -> tuple[int, ...]:
    layers = tuple(sorted(set(int(l) for l in window)))
    if not layers:
        raise WindowError("empty layer window")
    if layers[0] < 0 or layers[-1] >= n_layers:
        raise WindowError(f"window {layers[0]}-{layers[-1]} outside [0, {n_layers})")
    return layers


def substitute_mlp_window(host: Checkpoint, donor: Checkpoint, window: Sequence[int]) -> Checkpoint:
    """Host checkpoint with the MLP weights of ``window`` layers taken from ``donor``."""
    require_dense(host, donor)
    if not host.is_paired_with(donor):
        raise UnpairedCheckpointsError("host and donor configs/tensor tables differ")
    layers = check_window(window, host.config.n_layers)
    tensors = dict(host.tensors)
    for layer in layers:
        for name in mlp_tensor_names(layer, host.config):
            tensors[name] = donor.tensors[name]
    meta = dict(host.metadata)
    meta["mlp_substitution"] = {
        "donor_role": donor.role,
        "layers": list(layers),
    }
    return Checkpoint(config=host.config, tensors=tensors, metadata=meta)


class ResidualPerturbation:
    """Adds a seeded random unit direction, scaled per layer/position, to the residual.

    One standard-normal direction is drawn per position and reused across the
    window's layers, so the perturbation persists through the window the way a
    real residual edit does; ``per_layer_directions=True`` draws afresh per layer.

    With ``base`` (host residuals, ``[T, n_layers, d]``) the residual at each
    window layer is *replaced* by ``base + perturbation``, so the perturbed
    residual deviates from the host trace by exactly the requested norm.
    Without it the perturbation is simply added.
    """

    def __init__(self, window, magnitudes, seed, base=None, per_layer_directions=False):
        self.layers = tuple(window)
        mags = np.asarray(magnitudes, dtype=np.float64)
        if mags.ndim != 2 or mags.shape[1] != len(self.layers):
            raise HookError(
                f"magnitudes shape {mags.shape} does not match [positions, {len(self.layers)} window layers]"
            )
        if (mags < 0).any() or not np.isfinite(mags).all():
            raise HookError("magnitudes must be finite and non-negative")
        self.magnitudes = mags
        self.seed = seed
        self.base = None if base is None else np.asarray(base, dtype=np.float64)
        self.per_layer_directions = per_layer_directions
        self._dirs = None

    def _directions(self, t: int, d: int) -> np.ndarray:
        if self._dirs is None:
            rng = np.random.default_rng(self.seed)
            k = len(self.layers) if self.per_layer_directions else 1
            raw = rng.standard_normal((k, t, d))
            norms = np.linalg.norm(raw, axis=-1, keepdims=True)
            self._dirs = raw / norms
        return self._dirs

    def offsets(self, layer: int, t: int, d: int) -> np.ndarray:
        j = self.layers.index(layer)
        dirs = self._directions(t, d)
        u = dirs[j] if self.per_layer_directions else dirs[0]
        return u * self.magnitudes[:, j : j + 1]

    def __call__(self, layer: int, residual: np.ndarray) -> np.ndarray:
        t, d = residual.shape
        if self.magnitudes.shape[0] != t:
            raise HookError(f"magnitudes cover {self.magnitudes.shape[0]} positions, sequence has {t}")
        start = residual if self.base is None else self.base[:, layer]
        return start + self.offsets(layer, t, d)


def residual_perturbation_hook(window, magnitudes, seed, base=None, per_layer_directions=False):
    if any(l < 0 for l in window) or len(window) == 0:
        raise HookError(f"invalid window {tuple(window)}")
    return ResidualPerturbation(window, magnitudes, seed, base=base, per_layer_directions=per_layer_directions)
