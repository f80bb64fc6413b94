"""Paired tiny checkpoints with a planted late-layer divergence.

The PT-like model is a seeded random pre-norm decoder with a few built-in
structures that make effects checkable:

* the unembedding has a steeply decaying spectrum, so one residual direction
  (the "readout direction") dominates the logits;
* the last residual channel is a template flag: template control tokens write
  it, a first-layer attention value/output slot copies it forward, nothing else reads or
  writes it, and the unembedding ignores it;
* the second-to-last channel is a relay: empty in the base model and invisible
  to attention and the unembedding;
* a handful of MLP hidden units are left dead in the base model.

The IT-like model differs only in MLP weights inside the divergence window:
down-projections gain a strength-scaled, position-dependent write along the
readout direction (ramped toward the last window layer, so late layers keep
moving the prediction). Earlier window layers also write the relay channel,
which dead units in the last window layer turn into an extra readout push, so
removing any part of the window weakens the late effect. With template
sensitivity another set of dead units in the last window layer fires on the
template flag and pushes along a second readout direction.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from convgap.checkpoint import Checkpoint, ModelConfig, expected_shapes, save_checkpoint
from convgap.engine import check_window
from convgap.interventions import depth_windows

TEMPLATE = {
    "template.system_prefix": [1],
    "template.user_prefix": [2],
    "template.assistant_prefix": [3],
    "template.turn_suffix": [4],
}
TEMPLATE_IDS = sorted({t for seq in TEMPLATE.values() for t in seq})
N_TEMPLATE_UNITS = 8
N_RELAY_UNITS = 8

FLAG_VALUE = 4.0
ATTN_SCALE = 0.5
MLP_SCALE = 1.0
READOUT_GAIN = 1.5
READOUT_DECAY = 0.8
PLANT_SCALE = 8.0
TEMPLATE_GAIN = 6.0
TEMPLATE_SCALE = 1.0
RELAY_WRITE = 2.0
RELAY_GAIN = 2.0
RELAY_SCALE = 4.0


def default_config(**overrides) -> ModelConfig:
    base = dict(
        n_layers=8,
        d_model=64,
        n_heads=4,
        d_mlp=128,
        vocab_size=256,
        norm_kind="rmsnorm",
        positional_kind="rotary",
        gated_mlp=True,
        family_id="synthetic",
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 7
    config: ModelConfig = dataclasses.field(default_factory=default_config)
    divergence_strength: float = 0.5
    divergence_window: tuple[int, ...] | None = None
    template_sensitivity: float = 0.0

    def __post_init__(self):
        if self.divergence_strength < 0 or self.template_sensitivity < 0:
            raise ValueError("strength and template sensitivity must be non-negative")
        reserved = N_TEMPLATE_UNITS + N_RELAY_UNITS
        if self.config.d_mlp <= reserved:
            raise ValueError(f"d_mlp must exceed {reserved} reserved units")
        if self.config.d_model < 4:
            raise ValueError("d_model must be at least 4")
        if self.config.vocab_size <= max(TEMPLATE_IDS) + 1:
            raise ValueError("vocab too small for template control tokens")
        check_window(self.window, self.config.n_layers)

    @property
    def window(self) -> tuple[int, ...]:
        if self.divergence_window is not None:
            return tuple(sorted(self.divergence_window))
        n = self.config.n_layers
        if n >= 8:
            return depth_windows(n)["late"].layers
        return (n - 1,)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config.to_dict(),
            "divergence_strength": self.divergence_strength,
            "divergence_window": list(self.window),
            "template_sensitivity": self.template_sensitivity,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        return cls(
            seed=int(data["seed"]),
            config=ModelConfig.from_dict(data["config"]),
            divergence_strength=float(data["divergence_strength"]),
            divergence_window=tuple(data["divergence_window"]),
            template_sensitivity=float(data.get("template_sensitivity", 0.0)),
        )


def _base_tensors(cfg: ModelConfig, rng: np.random.Generator):
    d, m, v = cfg.d_model, cfg.d_mlp, cfg.vocab_size
    flag, relay = d - 1, d - 2
    feat = d - 2
    units = slice(m - N_TEMPLATE_UNITS - N_RELAY_UNITS, m)
    t: dict[str, np.ndarray] = {}

    emb = rng.standard_normal((v, d))
    emb[:, feat:] = 0.0
    emb[TEMPLATE_IDS, flag] = FLAG_VALUE
    t["embed.weight"] = emb
    if cfg.positional_kind == "learned":
        pos = 0.1 * rng.standard_normal((cfg.max_positions, d))
        pos[:, feat:] = 0.0
        t["pos_embed.weight"] = pos

    def norm(prefix):
        t[f"{prefix}.weight"] = np.ones(d)
        if cfg.norm_kind == "layernorm":
            t[f"{prefix}.bias"] = np.zeros(d)

    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        norm(f"{p}.attn_norm")
        wq, wk, wv = (rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(3))
        wo = ATTN_SCALE * rng.standard_normal((d, d)) / np.sqrt(d)
        for w in (wq, wk, wv):
            w[feat:, :] = 0.0
        # layer 0 copies the template flag forward through value/output slot d-1;
        # later layers neither read nor write it, so it stays a small constant channel
        wv[:, feat:] = 0.0
        wo[feat:, :] = 0.0
        wo[:, feat:] = 0.0
        if i == 0:
            wv[flag, flag] = 1.0
            wo[flag, flag] = 1.0
        t[f"{p}.attn.q.weight"], t[f"{p}.attn.k.weight"] = wq, wk
        t[f"{p}.attn.v.weight"], t[f"{p}.attn.o.weight"] = wv, wo

        norm(f"{p}.mlp_norm")
        up = rng.standard_normal((d, m)) / np.sqrt(d)
        gate = rng.standard_normal((d, m)) / np.sqrt(d)
        down = MLP_SCALE * rng.standard_normal((m, d)) / np.sqrt(m)
        up[feat:, :] = 0.0
        gate[feat:, :] = 0.0
        up[:, units] = 0.0
        gate[:, units] = 0.0
        down[units, :] = 0.0
        down[:, feat:] = 0.0
        t[f"{p}.mlp.up.weight"] = up
        if cfg.gated_mlp:
            t[f"{p}.mlp.gate.weight"] = gate
        t[f"{p}.mlp.down.weight"] = down

    norm("final_norm")
    basis, _ = np.linalg.qr(rng.standard_normal((feat, feat)))
    spectrum = READOUT_GAIN * READOUT_DECAY ** np.arange(feat)
    unembed = np.zeros((d, v))
    unembed[:feat] = basis @ (spectrum[:, None] * rng.standard_normal((feat, v)))
    readout_dir = np.zeros(d)
    readout_dir[:feat] = basis[:, 0]
    template_dir = np.zeros(d)
    template_dir[:feat] = basis[:, 1]
    if cfg.tied_unembedding:
        # tied models read out through the embedding; keep the flag channel out of it
        readout_dir = np.zeros(d)
        readout_dir[:feat] = emb[:, :feat].T @ rng.standard_normal(v)
        readout_dir /= np.linalg.norm(readout_dir)
        template_dir = np.zeros(d)
        template_dir[:feat] = emb[:, :feat].T @ rng.standard_normal(v)
        template_dir -= (template_dir @ readout_dir) * readout_dir
        template_dir /= np.linalg.norm(template_dir)
    else:
        t["unembed.weight"] = unembed
    return t, readout_dir, template_dir


def make_paired_checkpoints(spec: SynthSpec) -> tuple[Checkpoint, Checkpoint]:
    cfg = spec.config
    base, readout, template_dir = _base_tensors(cfg, np.random.default_rng([spec.seed, 0]))
    it = {k: v.copy() for k, v in base.items()}

    window = spec.window
    rng = np.random.default_rng([spec.seed, 1])
    m = cfg.d_mlp
    flag, relay = cfg.d_model - 1, cfg.d_model - 2
    live = m - N_TEMPLATE_UNITS - N_RELAY_UNITS
    relay_units = slice(live, live + N_RELAY_UNITS)
    s = spec.divergence_strength
    ts = s * spec.template_sensitivity
    for j, layer in enumerate(window):
        ramp = (j + 1) / len(window)
        g = rng.standard_normal(live) / np.sqrt(live)
        g_relay = rng.standard_normal(live) / np.sqrt(live)
        if s > 0:
            it[f"layers.{layer}.mlp.down.weight"][:live] += s * PLANT_SCALE * ramp * np.outer(g, readout)
            if layer != window[-1]:
                it[f"layers.{layer}.mlp.down.weight"][:live, relay] += s * RELAY_WRITE * g_relay
            elif len(window) > 1:
                # x * silu(x) >= 0, so the relay push has a fixed sign whatever the relay's sign
                it[f"layers.{layer}.mlp.up.weight"][relay, relay_units] = RELAY_GAIN
                if cfg.gated_mlp:
                    it[f"layers.{layer}.mlp.gate.weight"][relay, relay_units] = RELAY_GAIN
                it[f"layers.{layer}.mlp.down.weight"][relay_units] = s * RELAY_SCALE * readout / N_RELAY_UNITS
        if ts > 0 and layer == window[-1]:
            # template units live only in the last window layer, so they move the
            # final readout away from what the layer below already predicts
            units = slice(live + N_RELAY_UNITS, m)
            it[f"layers.{layer}.mlp.up.weight"][flag, units] = TEMPLATE_GAIN
            if cfg.gated_mlp:
                it[f"layers.{layer}.mlp.gate.weight"][flag, units] = TEMPLATE_GAIN
            it[f"layers.{layer}.mlp.down.weight"][units] = ts * TEMPLATE_SCALE * template_dir / N_TEMPLATE_UNITS

    order = list(expected_shapes(cfg))
    meta = {**TEMPLATE, "synth_spec": spec.to_dict()}
    pt_ckpt = Checkpoint(cfg, {k: base[k].astype(np.float32) for k in order}, {**meta, "role": "pt"})
    it_ckpt = Checkpoint(cfg, {k: it[k].astype(np.float32) for k in order}, {**meta, "role": "it"})
    return pt_ckpt, it_ckpt


def write_pair(spec: SynthSpec, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    pt, it = make_paired_checkpoints(spec)
    pt_path = save_checkpoint(pt, out / "pt")
    it_path = save_checkpoint(it, out / "it")
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return pt_path, it_path


def oracle_gap_delta(pair, corpus, fraction: float = 0.2) -> float:
    """IT-minus-PT mean raw-lens late gap recomputed on the pure-Python dense oracle.

    Averaged per prompt, then over prompts (matching the engine-side pipeline).
    """
    from convgap import oracle

    pt, it = pair
    means = []
    for model in (pt, it):
        dense = oracle.DenseOracle(model)
        per_prompt = []
        for tokens in corpus:
            curves = oracle.convergence_curves(dense, list(tokens))
            gaps = [oracle.late_gap(c, fraction) for c in curves]
            per_prompt.append(sum(gaps) / len(gaps))
        means.append(sum(per_prompt) / len(per_prompt))
    return means[1] - means[0]
