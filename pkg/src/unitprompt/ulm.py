"""Causal Transformer decoder over discrete units (pre-norm, tied embeddings)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .optim import Adam, NonFiniteLoss, TrainConfig
from .prompt import PromptSet, apply_deep_prompts, apply_input_prompts

log = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass(frozen=True)
class ULMConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_units: int = 100
    max_len: int = 256

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "n_units", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ULMConfig.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")

    # specials follow the unit ids
    @property
    def pad_id(self) -> int:
        return self.n_units

    @property
    def eos_id(self) -> int:
        return self.n_units + 1

    @property
    def sep_id(self) -> int:
        return self.n_units + 2

    @property
    def vocab_size(self) -> int:
        return self.n_units + 3


def param_shapes(config: ULMConfig) -> dict[str, tuple[int, ...]]:
    """Ordered manifest of every named parameter and its shape."""
    d, f = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_len, d),
    }
    for i in range(config.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "attn.w_query": (d, d), p + "attn.w_key": (d, d),
            p + "attn.w_value": (d, d), p + "attn.w_out": (d, d),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "ffn.w_in": (d, f), p + "ffn.b_in": (f,),
            p + "ffn.w_out": (f, d), p + "ffn.b_out": (d,),
        })
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    return shapes


def count_params(config: ULMConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(config).values())


class ULM:
    def __init__(self, config: ULMConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise ValueError("parameter names do not match the config manifest")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape} != {shape}")
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.trainable = flag
            t.requires_grad = flag
            t.grad = None

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def astype(self, dtype) -> "ULM":
        return ULM(self.config, {k: Tensor(t.values.astype(dtype), trainable=t.trainable, dtype=dtype)
                                 for k, t in self.params.items()})

    def copy(self) -> "ULM":
        return ULM(self.config, {k: Tensor(t.values.copy(), trainable=t.trainable, dtype=t.values.dtype)
                                 for k, t in self.params.items()})

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(t.values.tobytes())
        return h.hexdigest()


def ulm_init(config: ULMConfig, seed: int = 0) -> ULM:
    """Matrices and embeddings ~ N(0, 0.02); layer-norm gains 1, biases 0."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            values = np.ones(shape)
        elif name.endswith((".bias", ".b_in", ".b_out")):
            values = np.zeros(shape)
        else:
            values = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = Tensor(values, trainable=True)
    return ULM(config, params)


def causal_mask(n: int, dtype=np.float32) -> np.ndarray:
    return np.triu(np.full((n, n), ad.MASK_VALUE, dtype=dtype), k=1)


def ulm_forward(ulm: ULM, units, prompts: PromptSet | None = None) -> Tensor:
    """Next-unit logits.

    ``units`` is a 1-d sequence (returns ``[S, V]``) or a right-padded
    ``[B, T]`` batch (returns ``[B, S, V]``), with ``S = l + T``.
    """
    cfg = ulm.config
    ids = np.asarray(units, dtype=np.int64)
    if ids.ndim not in (1, 2) or ids.shape[-1] == 0:
        raise ad.ContractError(f"ulm_forward: expected a non-empty [B, T] unit array, got {ids.shape}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ad.ContractError(f"ulm_forward: unit id outside [0, {cfg.vocab_size})")
    n_prompt = prompts.length if prompts is not None else 0
    seq = n_prompt + ids.shape[-1]
    if seq > cfg.max_len:
        raise ad.ContractError(f"ulm_forward: sequence length {seq} exceeds max_len {cfg.max_len}")
    if prompts is not None and prompts.deep and len(prompts.key_prompts) != cfg.n_layers:
        raise ad.ContractError("ulm_forward: deep prompts must cover every layer")

    p = ulm.params
    x = ad.embedding(p["tok_emb"], ids)
    if prompts is not None:
        x = apply_input_prompts(x, prompts)
    x = ad.add(x, ad.slice_rows(p["pos_emb"], 0, seq))
    mask = causal_mask(seq, x.values.dtype)
    n_heads = cfg.n_heads
    inv_sqrt = 1.0 / math.sqrt(cfg.d_model // n_heads)
    deep = prompts is not None and prompts.deep and n_prompt > 0

    for i in range(cfg.n_layers):
        pre = f"blocks.{i}."
        a = ad.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
        q = ad.matmul(a, p[pre + "attn.w_query"])
        if deep:
            k, v = apply_deep_prompts(a, prompts.key_prompts[i], prompts.value_prompts[i],
                                      p[pre + "attn.w_key"], p[pre + "attn.w_value"])
        else:
            k = ad.matmul(a, p[pre + "attn.w_key"])
            v = ad.matmul(a, p[pre + "attn.w_value"])
        qh = ad.split_heads(q, n_heads)
        kh = ad.split_heads(k, n_heads)
        vh = ad.split_heads(v, n_heads)
        scores = ad.scale(ad.matmul(qh, kh, transpose_b=True), inv_sqrt)
        attn = ad.softmax(scores, mask)
        ctx = ad.merge_heads(ad.matmul(attn, vh))
        x = ad.add(x, ad.matmul(ctx, p[pre + "attn.w_out"]))

        h = ad.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        h = ad.gelu(ad.add(ad.matmul(h, p[pre + "ffn.w_in"]), p[pre + "ffn.b_in"]))
        h = ad.add(ad.matmul(h, p[pre + "ffn.w_out"]), p[pre + "ffn.b_out"])
        x = ad.add(x, h)

    x = ad.layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])
    return ad.matmul(x, p["tok_emb"], transpose_b=True)


# --------------------------------------------------------------------------
# pre-training
# --------------------------------------------------------------------------


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def lm_batch(seqs: Sequence[Sequence[int]], config: ULMConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(inputs, targets, mask) for next-unit prediction with EOS appended."""
    full = [list(s) + [config.eos_id] for s in seqs]
    arr = pad_batch(full, config.pad_id)
    inputs, targets = arr[:, :-1], arr[:, 1:]
    mask = (targets != config.pad_id).astype(np.float32)
    return inputs, targets, mask


def lm_loss(ulm: ULM, seqs: Sequence[Sequence[int]]) -> Tensor:
    inputs, targets, mask = lm_batch(seqs, ulm.config)
    return ad.cross_entropy(ulm_forward(ulm, inputs), targets, mask)


def evaluate_lm(ulm: ULM, seqs: Sequence[Sequence[int]], batch_size: int = 32,
                include_eos: bool = True) -> float:
    """Mean per-token cross-entropy (nats) of the next-unit predictions."""
    total, count = 0.0, 0.0
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i:i + batch_size]
        inputs, targets, mask = lm_batch(chunk, ulm.config)
        if not include_eos:
            mask = mask * (targets != ulm.config.eos_id)
        n = float(mask.sum())
        if n == 0:
            continue
        loss = ad.cross_entropy(ulm_forward(ulm, inputs), targets, mask)
        total += loss.item() * n
        count += n
    return total / count


def ulm_pretrain(ulm: ULM, corpus: Sequence[Sequence[int]], cfg: TrainConfig,
                 valid: Sequence[Sequence[int]] | None = None) -> tuple[ULM, dict]:
    """Next-unit cross-entropy training of every model parameter, in place."""
    if not corpus:
        raise ValueError("pre-training corpus is empty")
    n_units = ulm.config.n_units
    for s in corpus:
        if len(s) == 0 or min(s) < 0 or max(s) >= n_units:
            raise ValueError("corpus sequences must be non-empty and contain only unit ids")
        if len(s) + 1 > ulm.config.max_len:
            raise ValueError(f"corpus sequence of length {len(s)} exceeds max_len")
    ulm.set_trainable(True)
    opt = Adam(ulm.tensors(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
               eps=cfg.adam_eps, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)
    history: dict = {"loss": [], "valid_loss": []}
    for step in range(cfg.steps):
        idx = rng.integers(0, len(corpus), size=cfg.batch_size)
        opt.zero_grad()
        with Graph() as graph:
            loss = lm_loss(ulm, [corpus[i] for i in idx])
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLoss(step, value)
        graph.backward(loss)
        opt.lr = cfg.lr_at(step)
        opt.step()
        history["loss"].append(value)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("pretrain step %d loss %.4f", step + 1, value)
    opt.zero_grad()
    if valid:
        history["valid_loss"].append(evaluate_lm(ulm, valid))
    return ulm, history
