"""Llama2-family decoder workloads with Medusa-style decode heads.

Every decode iteration is described as a flat list of :class:`OpDescriptor`
records carrying exact byte and FLOP counts.  For the cost models the same
information is also available as an :class:`OpTable`, a column-oriented
numpy view in which identical per-layer operators are stored once with a
multiplicity, so that costing a 32-layer model touches ~20 rows instead of
~350 objects.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation

GB = 1e9


class OpKind(enum.IntEnum):
    FC = 0
    ATTENTION_SCORE = 1
    ATTENTION_CONTEXT = 2
    DECODE_HEAD = 3
    NONLINEAR = 4

    @property
    def is_matrix(self) -> bool:
        return self is not OpKind.NONLINEAR

    @property
    def is_attention(self) -> bool:
        return self in (OpKind.ATTENTION_SCORE, OpKind.ATTENTION_CONTEXT)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    n_layers: int
    d_model: int
    n_heads: int
    d_head: int
    d_ffn: int
    vocab: int
    n_decode_heads: int = 4
    bytes_per_weight: int = 1
    bytes_per_kv: int = 1

    def __post_init__(self):
        counts = ("n_layers", "d_model", "n_heads", "d_head", "d_ffn", "vocab", "n_decode_heads")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"ModelSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigurationError(
                f"d_model ({self.d_model}) != n_heads * d_head ({self.n_heads} * {self.d_head})"
            )
        if self.bytes_per_weight not in (1, 2):
            raise ConfigurationError(f"bytes_per_weight must be 1 or 2, got {self.bytes_per_weight}")
        if self.bytes_per_kv not in (1, 2):
            raise ConfigurationError(f"bytes_per_kv must be 1 or 2, got {self.bytes_per_kv}")

    def kv_bytes_per_token(self) -> int:
        """K and V bytes appended to the cache per generated token, all layers."""
        return 2 * self.n_layers * self.d_model * self.bytes_per_kv


_PRESETS: dict[str, dict] = {
    "llama2-7b": dict(n_layers=32, d_model=4096, n_heads=32, d_head=128, d_ffn=11008, vocab=32000),
    "llama2-13b": dict(n_layers=40, d_model=5120, n_heads=40, d_head=128, d_ffn=13824, vocab=32000),
}

PRESET_NAMES = tuple(_PRESETS)


def build_model_spec(preset: str, **overrides) -> ModelSpec:
    """Return the named model preset, optionally with field overrides.

    >>> build_model_spec("llama2-7b", n_decode_heads=2).n_decode_heads
    2
    """
    try:
        fields = dict(_PRESETS[preset])
    except KeyError:
        raise ConfigurationError(
            f"unknown model preset {preset!r}; expected one of {', '.join(PRESET_NAMES)}"
        ) from None
    unknown = set(overrides) - set(ModelSpec.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"unknown ModelSpec override(s): {sorted(unknown)}")
    fields.update(overrides)
    fields.setdefault("name", preset)
    if "d_head" not in overrides and ("d_model" in overrides or "n_heads" in overrides):
        fields["d_head"] = fields["d_model"] // fields["n_heads"]
    return ModelSpec(**fields)


def layer_weight_bytes(spec: ModelSpec) -> int:
    d, f = spec.d_model, spec.d_ffn
    return (4 * d * d + 3 * d * f) * spec.bytes_per_weight


def total_weight_bytes(spec: ModelSpec) -> int:
    """All resident weight bytes: blocks, LM head, decode heads and the embedding table."""
    head = spec.d_model * spec.vocab * spec.bytes_per_weight
    return spec.n_layers * layer_weight_bytes(spec) + head * (2 + spec.n_decode_heads)


@dataclass(frozen=True)
class OpDescriptor:
    kind: OpKind
    m: int
    n: int
    k: int
    weight_bytes: int
    activation_bytes: int
    flops: int
    pim_eligible: bool
    name: str = ""
    layer: int = -1


@dataclass
class KVState:
    """Tokens currently held in the KV cache; only ever grows within a run."""

    seq_len: int = 0

    def __post_init__(self):
        if self.seq_len < 0:
            raise ContractViolation("seq_len must be >= 0")

    def append(self, tokens: int) -> None:
        if tokens < 0:
            raise ContractViolation("KV cache cannot shrink")
        self.seq_len += tokens


def _matrix(kind, m, n, k, spec, *, weight_bytes=None, act=None, eligible, name, layer):
    bw = spec.bytes_per_weight
    if weight_bytes is None:
        weight_bytes = n * k * bw
    if act is None:
        act = (m * k + m * n) * bw
    return OpDescriptor(kind, m, n, k, int(weight_bytes), int(act), 2 * m * n * k, eligible, name, layer)


def _nonlinear(m, width, flops_per_elem, act_factor, spec, *, name, layer):
    return OpDescriptor(
        OpKind.NONLINEAR, m, width, 1, 0,
        act_factor * m * width * spec.bytes_per_weight,
        flops_per_elem * m * width, False, name, layer,
    )


def _layer_ops(spec: ModelSpec, layer: int, m: int, seq_len: int, eligible: bool,
               ctx: int | None = None) -> list[OpDescriptor]:
    d, f, h = spec.d_model, spec.d_ffn, spec.n_heads
    # Decode attends over the cached tokens; the draft tokens' own K/V stay on chip.
    ctx = max(seq_len, 1) if ctx is None else ctx
    kv_bytes = seq_len * d * spec.bytes_per_kv
    att_act = (m * d + m * ctx * h) * spec.bytes_per_weight
    p = f"L{layer}."
    return [
        _nonlinear(m, d, 4, 2, spec, name=p + "attn_norm", layer=layer),
        _matrix(OpKind.FC, m, 3 * d, d, spec, eligible=eligible, name=p + "qkv", layer=layer),
        _matrix(OpKind.ATTENTION_SCORE, m, ctx, d, spec, weight_bytes=kv_bytes, act=att_act,
                eligible=eligible, name=p + "attn_score", layer=layer),
        _nonlinear(m, ctx * h, 5, 2, spec, name=p + "softmax", layer=layer),
        _matrix(OpKind.ATTENTION_CONTEXT, m, d, ctx, spec, weight_bytes=kv_bytes, act=att_act,
                eligible=eligible, name=p + "attn_context", layer=layer),
        _matrix(OpKind.FC, m, d, d, spec, eligible=eligible, name=p + "o_proj", layer=layer),
        _nonlinear(m, d, 4, 2, spec, name=p + "ffn_norm", layer=layer),
        _matrix(OpKind.FC, m, f, d, spec, eligible=eligible, name=p + "ffn_up", layer=layer),
        _matrix(OpKind.FC, m, f, d, spec, eligible=eligible, name=p + "ffn_gate", layer=layer),
        _nonlinear(m, f, 6, 3, spec, name=p + "swiglu", layer=layer),
        _matrix(OpKind.FC, m, d, f, spec, eligible=eligible, name=p + "ffn_down", layer=layer),
    ]


def _tail_ops(spec: ModelSpec, m: int, eligible: bool) -> list[OpDescriptor]:
    d, v = spec.d_model, spec.vocab
    ops = [
        _nonlinear(m, d, 4, 2, spec, name="final_norm", layer=spec.n_layers),
        _matrix(OpKind.FC, m, v, d, spec, eligible=eligible, name="lm_head", layer=spec.n_layers),
    ]
    for i in range(spec.n_decode_heads):
        ops.append(_matrix(OpKind.DECODE_HEAD, m, v, d, spec, eligible=eligible,
                           name=f"decode_head{i}", layer=spec.n_layers))
    return ops


def decode_op_graph(spec: ModelSpec, kv: KVState, l_spec: int) -> list[OpDescriptor]:
    """Operators of one verification pass over ``l_spec`` tree tokens."""
    if l_spec < 1:
        raise ContractViolation(f"l_spec must be >= 1, got {l_spec}")
    ops: list[OpDescriptor] = []
    for layer in range(spec.n_layers):
        ops.extend(_layer_ops(spec, layer, l_spec, kv.seq_len, True))
    ops.extend(_tail_ops(spec, l_spec, True))
    return ops


def prefill_op_graph(spec: ModelSpec, l_in: int) -> list[OpDescriptor]:
    """Operators of the prompt pass; always executed on the NPU."""
    if l_in < 1:
        raise ContractViolation(f"l_in must be >= 1, got {l_in}")
    ops: list[OpDescriptor] = []
    for layer in range(spec.n_layers):
        ops.extend(_layer_ops(spec, layer, l_in, 0, False, ctx=l_in))
    ops.extend(_tail_ops(spec, l_in, False))
    return ops


@dataclass(frozen=True)
class OpTable:
    """Column-oriented operator list.  Row ``i`` stands for ``count[i]`` identical ops."""

    kind: np.ndarray
    m: np.ndarray
    n: np.ndarray
    k: np.ndarray
    weight_bytes: np.ndarray
    activation_bytes: np.ndarray
    flops: np.ndarray
    pim_eligible: np.ndarray
    count: np.ndarray
    names: tuple = field(default=(), compare=False)

    @classmethod
    def from_ops(cls, ops: Iterable[OpDescriptor], counts: Sequence[int] | None = None) -> "OpTable":
        ops = list(ops)
        if counts is None:
            counts = [1] * len(ops)
        f = lambda attr: np.array([float(getattr(o, attr)) for o in ops], dtype=float)
        return cls(
            kind=np.array([int(o.kind) for o in ops], dtype=int),
            m=f("m"), n=f("n"), k=f("k"),
            weight_bytes=f("weight_bytes"), activation_bytes=f("activation_bytes"), flops=f("flops"),
            pim_eligible=np.array([bool(o.pim_eligible) for o in ops], dtype=bool),
            count=np.asarray(counts, dtype=float),
            names=tuple(o.name for o in ops),
        )

    def __len__(self) -> int:
        return len(self.kind)

    @property
    def is_matrix(self) -> np.ndarray:
        return self.kind != int(OpKind.NONLINEAR)

    def total(self, column: str) -> float:
        return float(np.dot(getattr(self, column), self.count))

    def subset(self, mask: np.ndarray) -> "OpTable":
        names = tuple(n for n, keep in zip(self.names, mask) if keep) if self.names else ()
        return OpTable(
            self.kind[mask], self.m[mask], self.n[mask], self.k[mask], self.weight_bytes[mask],
            self.activation_bytes[mask], self.flops[mask], self.pim_eligible[mask],
            self.count[mask], names,
        )


def as_table(ops) -> OpTable:
    if isinstance(ops, OpTable):
        return ops
    return OpTable.from_ops(ops)


def _compressed(spec: ModelSpec, m: int, seq_len: int, eligible: bool, ctx: int | None = None) -> OpTable:
    layer = _layer_ops(spec, 0, m, seq_len, eligible, ctx)
    tail = _tail_ops(spec, m, eligible)
    counts = [spec.n_layers] * len(layer) + [1] * len(tail)
    return OpTable.from_ops(layer + tail, counts)


def decode_table(spec: ModelSpec, seq_len: int, l_spec: int) -> OpTable:
    """Compressed equivalent of :func:`decode_op_graph` for the cost models."""
    if l_spec < 1:
        raise ContractViolation(f"l_spec must be >= 1, got {l_spec}")
    return _compressed(spec, l_spec, seq_len, True)


def prefill_table(spec: ModelSpec, l_in: int) -> OpTable:
    if l_in < 1:
        raise ContractViolation(f"l_in must be >= 1, got {l_in}")
    return _compressed(spec, l_in, 0, False, ctx=l_in)

