"""Trainable prompt vectors and how they are injected into the frozen model.

Two modes:

* ``input``: ``l`` vectors are prepended to the embedded unit sequence.
* ``deep``: the same input vectors, plus per-layer key and value vectors that
  replace the first ``l`` rows of every attention block's key/value input.
  The query path always sees the unmodified block input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

if TYPE_CHECKING:
    from .ulm import ULMConfig

MODES = ("input", "deep")
INIT_STD = 0.02


@dataclass
class PromptSet:
    mode: str
    input_prompts: Tensor
    key_prompts: list[Tensor] = field(default_factory=list)
    value_prompts: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"prompt mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "input" and (self.key_prompts or self.value_prompts):
            raise ValueError("input-mode prompts carry no key/value prompts")
        if len(self.key_prompts) != len(self.value_prompts):
            raise ValueError("key and value prompts must cover the same layers")
        shape = self.input_prompts.shape
        for t in self.key_prompts + self.value_prompts:
            if t.shape != shape:
                raise ValueError(f"prompt tensor shape {t.shape} != {shape}")

    @property
    def length(self) -> int:
        return self.input_prompts.shape[0]

    @property
    def width(self) -> int:
        return self.input_prompts.shape[1]

    @property
    def deep(self) -> bool:
        return self.mode == "deep"

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"input": self.input_prompts}
        for i, (k, v) in enumerate(zip(self.key_prompts, self.value_prompts)):
            out[f"key.{i}"] = k
            out[f"value.{i}"] = v
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors())

    @classmethod
    def from_named(cls, mode: str, named: dict[str, np.ndarray]) -> "PromptSet":
        n_layers = sum(1 for k in named if k.startswith("key."))
        return cls(
            mode=mode,
            input_prompts=Tensor(named["input"], trainable=True),
            key_prompts=[Tensor(named[f"key.{i}"], trainable=True) for i in range(n_layers)],
            value_prompts=[Tensor(named[f"value.{i}"], trainable=True) for i in range(n_layers)],
        )


def prompt_init(mode: str, length: int, config: "ULMConfig", seed: int = 0) -> PromptSet:
    if not 1 <= length <= config.max_len - 1:
        raise ValueError(f"prompt length {length} outside [1, {config.max_len - 1}]")
    if mode not in MODES:
        raise ValueError(f"prompt mode must be one of {MODES}, got {mode!r}")
    rng = np.random.default_rng(seed)
    shape = (length, config.d_model)

    def draw() -> Tensor:
        return Tensor(rng.normal(0.0, INIT_STD, size=shape), trainable=True)

    input_prompts = draw()
    keys, values = [], []
    if mode == "deep":
        for _ in range(config.n_layers):
            keys.append(draw())
            values.append(draw())
    return PromptSet(mode, input_prompts, keys, values)


def apply_input_prompts(embeddings: Tensor, prompts: PromptSet) -> Tensor:
    """Prepend the input prompt rows to ``embeddings`` (``[T, d]`` or ``[B, T, d]``)."""
    if embeddings.shape[-1] != prompts.width:
        raise ad.ContractError(
            f"apply_input_prompts: embedding width {embeddings.shape[-1]} != prompt width {prompts.width}")
    if prompts.length == 0:
        return embeddings
    return ad.concat_rows(prompts.input_prompts, embeddings)


def apply_deep_prompts(x: Tensor, key_prompts: Tensor, value_prompts: Tensor,
                       w_key: Tensor, w_value: Tensor) -> tuple[Tensor, Tensor]:
    """Keys and values with the first ``l`` rows of ``x`` replaced by prompts."""
    n = key_prompts.shape[0]
    rows = x.shape[-2]
    if n > rows:
        raise ad.ContractError(f"apply_deep_prompts: prompt length {n} exceeds sequence length {rows}")
    if value_prompts.shape != key_prompts.shape:
        raise ad.ContractError(
            f"apply_deep_prompts: key prompts {key_prompts.shape} vs value prompts {value_prompts.shape}")
    if n == 0:
        return ad.matmul(x, w_key), ad.matmul(x, w_value)
    rest = ad.slice_rows(x, n, rows)
    keys = ad.matmul(ad.concat_rows(key_prompts, rest), w_key)
    values = ad.matmul(ad.concat_rows(value_prompts, rest), w_value)
    return keys, values


def count_trainable_params(mode: str, length: int, d_model: int, n_layers: int) -> int:
    if mode == "input":
        return length * d_model
    if mode == "deep":
        return length * d_model * (1 + 2 * n_layers)
    raise ValueError(f"prompt mode must be one of {MODES}, got {mode!r}")
