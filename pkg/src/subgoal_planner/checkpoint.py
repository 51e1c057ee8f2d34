"""Checkpoint format: a text key-value header followed by little-endian float32 payloads.

Layout::

    subgoal-planner-checkpoint 1
    config <json>            model configuration
    vocab <json>             text vocabulary tokens
    classes <json>           action / object / receptacle names
    meta <json>              free-form run metadata (epoch, step, train config)
    param <name> <shape> <offset> <count>
    ...
    end
    <payload bytes>

``shape`` is comma-separated (``-`` for a scalar) and ``offset`` counts bytes from the
start of the payload.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .heads import Vocabs
from .vocab import TextVocab

MAGIC = "subgoal-planner-checkpoint 1"
PAYLOAD_DTYPE = np.dtype("<f4")
OPTIM_PREFIX = "optim."


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: TextVocab
    vocabs: Vocabs
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def model_params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if not k.startswith(OPTIM_PREFIX)}

    @property
    def optim_params(self) -> dict[str, np.ndarray]:
        n = len(OPTIM_PREFIX)
        return {k[n:]: v for k, v in self.params.items() if k.startswith(OPTIM_PREFIX)}


def _shape_text(shape) -> str:
    return ",".join(str(s) for s in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(s) for s in text.split(","))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    lines = [
        MAGIC,
        "config " + json.dumps(ckpt.config.__dict__, sort_keys=True),
        "vocab " + json.dumps(ckpt.vocab.tokens),
        "classes " + json.dumps(ckpt.vocabs.to_dict(), sort_keys=True),
        "meta " + json.dumps(ckpt.meta, sort_keys=True),
    ]
    payloads = []
    offset = 0
    for name, arr in ckpt.params.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"parameter name {name!r} contains whitespace")
        data = np.asarray(arr, dtype=PAYLOAD_DTYPE)  # tobytes() is C-ordered; keeps 0-d shapes
        lines.append(f"param {name} {_shape_text(data.shape)} {offset} {data.size}")
        payloads.append(data.tobytes())
        offset += data.nbytes
    lines.append("end")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for p in payloads:
            fh.write(p)
    tmp.replace(path)


def read_header(fh) -> tuple[dict, list[tuple[str, tuple[int, ...], int, int]]]:
    first = fh.readline().decode("utf-8").rstrip("\n")
    if first != MAGIC:
        raise CheckpointError(f"not a checkpoint (header {first[:40]!r})")
    fields: dict = {}
    entries = []
    while True:
        raw = fh.readline()
        if not raw:
            raise CheckpointError("header ended without 'end'")
        line = raw.decode("utf-8").rstrip("\n")
        if line == "end":
            return fields, entries
        key, _, value = line.partition(" ")
        if key == "param":
            parts = value.split(" ")
            if len(parts) != 4:
                raise CheckpointError(f"malformed param line {line!r}")
            entries.append((parts[0], _parse_shape(parts[1]), int(parts[2]), int(parts[3])))
        else:
            try:
                fields[key] = json.loads(value)
            except json.JSONDecodeError as exc:
                raise CheckpointError(f"malformed {key} line: {exc}") from None


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        fields, entries = read_header(fh)
        payload = fh.read()
    for key in ("config", "vocab", "classes"):
        if key not in fields:
            raise CheckpointError(f"header is missing {key!r}")
    params = {}
    for name, shape, offset, count in entries:
        end = offset + count * PAYLOAD_DTYPE.itemsize
        if end > len(payload) or int(np.prod(shape, dtype=np.int64)) != count:
            raise CheckpointError(f"payload for {name} is truncated or inconsistent")
        data = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=count, offset=offset)
        params[name] = data.astype(np.float64).reshape(shape)
    return Checkpoint(
        config=ModelConfig(**fields["config"]),
        vocab=TextVocab(fields["vocab"]),
        vocabs=Vocabs.from_dict(fields["classes"]),
        params=params,
        meta=fields.get("meta", {}),
    )


def inspect_checkpoint(path) -> dict:
    """Header summary without decoding payloads."""
    with open(path, "rb") as fh:
        fields, entries = read_header(fh)
    model = [e for e in entries if not e[0].startswith(OPTIM_PREFIX)]
    return {
        "config": fields.get("config"),
        "meta": fields.get("meta", {}),
        "vocab_size": len(fields.get("vocab", [])),
        "classes": {k: len(v) for k, v in fields.get("classes", {}).items()},
        "n_tensors": len(model),
        "n_parameters": sum(e[3] for e in model),
        "has_optimizer": len(model) != len(entries),
        "params": [{"name": n, "shape": list(s), "offset": o} for n, s, o, _ in entries],
    }
