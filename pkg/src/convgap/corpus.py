"""Pre-tokenized prompt corpora (JSONL: prompt_id, cluster_id, tokens, register?)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from convgap.errors import SchemaError


@dataclass(frozen=True)
class Prompt:
    prompt_id: str
    cluster_id: str
    tokens: tuple[int, ...]
    register: str | None = None

    def to_json(self) -> dict:
        out = {"prompt_id": self.prompt_id, "cluster_id": self.cluster_id, "tokens": list(self.tokens)}
        if self.register is not None:
            out["register"] = self.register
        return out


def parse_prompt(record) -> Prompt:
    if not isinstance(record, dict):
        raise SchemaError("record is not an object")
    for key in ("prompt_id", "cluster_id", "tokens"):
        if key not in record:
            raise SchemaError(f"missing field {key!r}")
    tokens = record["tokens"]
    if not isinstance(tokens, list) or not tokens or not all(isinstance(t, int) and t >= 0 for t in tokens):
        raise SchemaError("tokens must be a non-empty list of non-negative ints", path="tokens")
    return Prompt(str(record["prompt_id"]), str(record["cluster_id"]), tuple(tokens), record.get("register"))


def read_prompts(path, strict: bool = True) -> tuple[list[Prompt], int]:
    """Return (prompts, malformed_count). ``strict`` raises on the first bad line instead."""
    prompts, malformed = [], 0
    seen = set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            prompt = parse_prompt(json.loads(line))
            if prompt.prompt_id in seen:
                raise SchemaError(f"duplicate prompt_id {prompt.prompt_id!r}")
        except (json.JSONDecodeError, SchemaError) as exc:
            if strict:
                raise SchemaError(str(exc), path=f"{path}:{lineno}") from exc
            malformed += 1
            continue
        seen.add(prompt.prompt_id)
        prompts.append(prompt)
    return prompts, malformed


def write_prompts(path, prompts: Iterable[Prompt]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for p in prompts:
            fh.write(json.dumps(p.to_json()) + "\n")
    return path


def make_synthetic_corpus(
    n_prompts: int = 200,
    n_tokens: int = 32,
    vocab_size: int = 256,
    seed: int = 0,
    n_clusters: int = 40,
    low: int = 16,
) -> list[Prompt]:
    """Uniform byte-level token sequences, assigned round-robin to clusters.

    Ids below ``low`` are left out so template control tokens never appear in
    prompt bodies.
    """
    rng = np.random.default_rng(seed)
    toks = rng.integers(low, vocab_size, size=(n_prompts, n_tokens))
    width = len(str(n_prompts - 1))
    return [
        Prompt(f"p{i:0{width}d}", f"c{i % n_clusters:03d}", tuple(int(t) for t in toks[i]))
        for i in range(n_prompts)
    ]
