"""Raw and tuned lenses: decode a residual into a next-token distribution.

The raw lens is the model's own readout (final norm + unembedding). The tuned
lens puts a per-layer affine translator in front of it, fitted by plain
full-batch (or seeded minibatch) gradient descent on KL(lens || final).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from convgap.checkpoint import Checkpoint, read_container, write_container
from convgap.engine import forward_trace, readout_logits, softmax
from convgap.errors import CheckpointFormatError, LensFitDivergedError
from convgap.metrics import EPS

log = logging.getLogger(__name__)


def _check_dim(residual, model):
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape[-1] != model.config.d_model:
        raise ValueError(f"residual has dimension {residual.shape[-1]}, model expects {model.config.d_model}")
    return residual


def raw_decode(residual, model: Checkpoint) -> np.ndarray:
    return softmax(readout_logits(model, _check_dim(residual, model)))


def tuned_decode(residual, translator, model: Checkpoint) -> np.ndarray:
    """``translator`` is a ``(weight [d, d], bias [d])`` pair; applied as ``x @ W + b``."""
    weight, bias = translator
    residual = _check_dim(residual, model)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    d = model.config.d_model
    if weight.shape != (d, d) or bias.shape != (d,):
        raise ValueError(f"translator shapes {weight.shape}/{bias.shape} do not match d_model={d}")
    return softmax(readout_logits(model, residual @ weight + bias))


class RawLens:
    kind = "raw"

    def __init__(self, model: Checkpoint):
        self.model = model

    def decode(self, residual, layer: int | None = None) -> np.ndarray:
        return raw_decode(residual, self.model)

    def decode_all(self, residuals: np.ndarray) -> np.ndarray:
        """Decode ``[..., L, d]`` residual stacks to ``[..., L, V]``."""
        return raw_decode(residuals, self.model)


@dataclass
class TunedLens:
    model: Checkpoint
    weights: np.ndarray  # [L-1, d, d]
    biases: np.ndarray  # [L-1, d]
    meta: dict[str, Any] = field(default_factory=dict)
    kind: str = "tuned"

    @classmethod
    def identity(cls, model: Checkpoint, meta=None) -> "TunedLens":
        n, d = model.config.n_layers, model.config.d_model
        w = np.broadcast_to(np.eye(d), (n - 1, d, d)).copy()
        return cls(model, w, np.zeros((n - 1, d)), dict(meta or {}))

    def translator(self, layer: int):
        n = self.model.config.n_layers
        if layer == n - 1:
            d = self.model.config.d_model
            return np.eye(d), np.zeros(d)
        return self.weights[layer], self.biases[layer]

    def decode(self, residual, layer: int) -> np.ndarray:
        if layer == self.model.config.n_layers - 1:
            return raw_decode(residual, self.model)
        return tuned_decode(residual, self.translator(layer), self.model)

    def decode_all(self, residuals: np.ndarray) -> np.ndarray:
        residuals = _check_dim(residuals, self.model)
        mapped = np.einsum("...ld,lde->...le", residuals[..., :-1, :], self.weights) + self.biases
        # final layer stays on the raw readout, bit-identical to the model output
        stacked = np.concatenate([mapped, residuals[..., -1:, :]], axis=-2)
        return raw_decode(stacked, self.model)

    def save(self, path) -> Path:
        tensors = {}
        for i in range(self.weights.shape[0]):
            tensors[f"lens.layer{i}.weight"] = self.weights[i]
            tensors[f"lens.layer{i}.bias"] = self.biases[i]
        header = {"kind": "tuned_lens", "config": self.model.config.to_dict(), "fit": self.meta}
        return write_container(path, tensors, header)


def load_tuned_lens(path, model: Checkpoint) -> TunedLens:
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "tuned_lens":
        raise CheckpointFormatError(f"container kind {manifest.get('kind')!r} is not a tuned lens")
    if manifest.get("config") != model.config.to_dict():
        raise CheckpointFormatError("tuned lens was fitted for a different model config")
    n, d = model.config.n_layers, model.config.d_model
    ws, bs = [], []
    for i in range(n - 1):
        for name, shape, dest in ((f"lens.layer{i}.weight", (d, d), ws), (f"lens.layer{i}.bias", (d,), bs)):
            if name not in tensors:
                raise CheckpointFormatError("missing tensor", tensor=name)
            if tensors[name].shape != shape:
                raise CheckpointFormatError(f"shape {list(tensors[name].shape)} != {list(shape)}", tensor=name)
            dest.append(tensors[name].astype(np.float64))
    return TunedLens(model, np.stack(ws), np.stack(bs), dict(manifest.get("fit", {})))


def _norm_forward(x, model):
    cfg = model.config
    w = model.weights64
    eps = cfg.norm_eps
    if cfg.norm_kind == "rmsnorm":
        r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
        return x * r * w["final_norm.weight"], (r,)
    xc = x - x.mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    n = xc * r
    return n * w["final_norm.weight"] + w["final_norm.bias"], (r, n)


def _norm_backward(gy, x, cache, model):
    w = model.weights64["final_norm.weight"]
    d = x.shape[-1]
    gw = gy * w
    if model.config.norm_kind == "rmsnorm":
        (r,) = cache
        return r * gw - (r**3) * x * np.sum(gw * x, axis=-1, keepdims=True) / d
    r, n = cache
    return r * (gw - gw.mean(axis=-1, keepdims=True) - n * np.mean(gw * n, axis=-1, keepdims=True))


def log_target(final: np.ndarray) -> np.ndarray:
    """Log of the epsilon-floored, renormalized final distribution (the KL reference)."""
    low = (final < EPS).any(axis=-1, keepdims=True)
    fq = np.maximum(final, EPS)
    q = np.where(low, fq / fq.sum(axis=-1, keepdims=True), final)
    return np.log(q)


def lens_loss_and_grad(weight, bias, residuals, log_final, model: Checkpoint):
    """Mean KL(softmax(readout(x @ W + b)) || final) and its gradient w.r.t. (W, b)."""
    x = residuals @ weight + bias
    y, cache = _norm_forward(x, model)
    z = y @ model.weights64["unembed.weight"]
    z = z - z.max(axis=-1, keepdims=True)
    logq = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    q = np.exp(logq)
    g = logq - log_final
    per = np.sum(q * g, axis=-1)
    n = residuals.shape[0]
    dz = q * (g - per[:, None]) / n
    dy = dz @ model.weights64["unembed.weight"].T
    dx = _norm_backward(dy, x, cache, model)
    return float(per.mean()), residuals.T @ dx, dx.sum(axis=0)


def collect_fit_data(model: Checkpoint, corpus: Sequence[Sequence[int]]):
    """Stack residuals ``[N, L, d]`` and final distributions ``[N, V]`` over all corpus positions."""
    res, fin = [], []
    for tokens in corpus:
        tr = forward_trace(model, tokens)
        res.append(tr.residuals)
        fin.append(softmax(tr.final_logits))
    return np.concatenate(res, axis=0), np.concatenate(fin, axis=0)


def split_corpus(corpus: Sequence, holdout: float = 0.2):
    """Fixed-order split: the last ``holdout`` fraction of sequences is held out."""
    n_hold = int(round(len(corpus) * holdout))
    cut = len(corpus) - n_hold
    return list(corpus[:cut]), list(corpus[cut:])


def fit_tuned_lens(
    model: Checkpoint,
    corpus: Sequence[Sequence[int]],
    steps: int = 200,
    step_size: float = 0.1,
    batch: int | None = None,
    seed: int = 0,
    log_every: int = 10,
    corpus_id: str = "",
) -> TunedLens:
    """Fit one affine translator per non-final layer from identity initialization.

    ``batch=None`` runs full-batch descent; otherwise minibatches are drawn by a
    seeded per-epoch shuffle. The full-data loss is logged every ``log_every``
    steps (and at the end) into ``lens.meta["history"]``.
    """
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    n_layers, d = model.config.n_layers, model.config.d_model
    residuals, finals = collect_fit_data(model, corpus)
    log_final = log_target(finals)
    lens = TunedLens.identity(model)
    history: dict[str, list] = {}
    initial, final_loss = [], []
    for layer in range(n_layers - 1):
        X = residuals[:, layer]
        W = lens.weights[layer]
        b = lens.biases[layer]
        rng = np.random.default_rng([seed, layer])
        order = np.arange(len(X))
        cursor = len(X)
        loss0, _, _ = lens_loss_and_grad(W, b, X, log_final, model)
        trail = [(0, loss0)]
        for step in range(1, steps + 1):
            if batch is None or batch >= len(X):
                idx = slice(None)
            else:
                if cursor + batch > len(X):
                    order = rng.permutation(len(X))
                    cursor = 0
                idx = order[cursor : cursor + batch]
                cursor += batch
            loss, gW, gb = lens_loss_and_grad(W, b, X[idx], log_final[idx], model)
            if not np.isfinite(loss) or not (np.isfinite(gW).all() and np.isfinite(gb).all()):
                raise LensFitDivergedError(layer, step, loss)
            W -= step_size * gW
            b -= step_size * gb
            if step % log_every == 0 or step == steps:
                full, _, _ = lens_loss_and_grad(W, b, X, log_final, model)
                if not np.isfinite(full):
                    raise LensFitDivergedError(layer, step, full)
                trail.append((step, full))
        history[str(layer)] = trail
        initial.append(loss0)
        final_loss.append(trail[-1][1])
        log.debug("layer %d: loss %.4f -> %.4f", layer, loss0, trail[-1][1])
    lens.meta = {
        "corpus_id": corpus_id,
        "steps": steps,
        "step_size": step_size,
        "batch": batch,
        "seed": seed,
        "n_samples": int(len(residuals)),
        "initial_loss": initial,
        "final_loss": final_loss,
        "history": history,
        "objective": "KL(lens || final)",
    }
    return lens
