"""Model assembly: encoder backbone, bottleneck adapters, classification heads.

The backbone is pluggable; a miniature transformer encoder with seeded
random initialization ships for desk-scale work. Bottleneck adapters are
residual down/up projections inserted after each layer's feed-forward
sub-layer; when any adapter is attached, the backbone is frozen and only
adapters and the head train. Adapters can be stacked, with lower stacks
frozen. Two heads are available: a linear classifier over the
first-position hidden state, and a prompt head (affine, GELU, layer norm,
affine) that scores verbalizer tokens at mask positions; class logits are
the sums of the per-mask token logits. A third, parameter-free readout
does the same over the backbone's language-model logits for full-model
prompt training.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch
from torch import Tensor, nn

from .corpus import LABEL_ORDER, Label
from .encoding import EncodedInput, PatternVerbalizerPair

CHECKPOINT_FORMAT = "argstance-trainable-v1"

_ACTIVATIONS: dict[str, Callable[[], nn.Module]] = {
    "gelu": nn.GELU,
    "relu": nn.ReLU,
    "silu": nn.SiLU,
}


class Backbone(nn.Module, ABC):
    """Encoder interface: per-position hidden states and LM logits.

    ``layer_adapters``, when given, holds one callable per encoder layer
    (or None) that is applied to the feed-forward output of that layer.
    """

    hidden_size: int
    layer_count: int

    @abstractmethod
    def encode(
        self,
        inputs: Sequence[EncodedInput],
        layer_adapters: Optional[Sequence[Optional[Callable[[Tensor], Tensor]]]] = None,
    ) -> tuple[Tensor, Tensor]:
        """Hidden states (batch, length, hidden) and a boolean validity mask."""

    @abstractmethod
    def lm_logits(
        self,
        inputs: Sequence[EncodedInput],
        layer_adapters: Optional[Sequence[Optional[Callable[[Tensor], Tensor]]]] = None,
    ) -> Tensor:
        """Per-position vocabulary logits (batch, length, vocab)."""


class _EncoderLayer(nn.Module):
    def __init__(self, hidden_size: int, num_heads: int, ffn_size: int):
        super().__init__()
        if hidden_size % num_heads != 0:
            raise ValueError(f"hidden size {hidden_size} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = hidden_size // num_heads
        self.q = nn.Linear(hidden_size, hidden_size)
        self.k = nn.Linear(hidden_size, hidden_size)
        self.v = nn.Linear(hidden_size, hidden_size)
        self.out = nn.Linear(hidden_size, hidden_size)
        self.attn_norm = nn.LayerNorm(hidden_size, eps=1e-5)
        self.ffn_in = nn.Linear(hidden_size, ffn_size)
        self.ffn_out = nn.Linear(ffn_size, hidden_size)
        self.ffn_norm = nn.LayerNorm(hidden_size, eps=1e-5)
        self.act = nn.GELU()

    def forward(
        self,
        x: Tensor,
        valid: Tensor,
        adapter: Optional[Callable[[Tensor], Tensor]] = None,
    ) -> Tensor:
        batch, length, hidden = x.shape

        def heads(t: Tensor) -> Tensor:
            return t.view(batch, length, self.num_heads, self.head_dim).transpose(1, 2)

        scores = heads(self.q(x)) @ heads(self.k(x)).transpose(-1, -2)
        scores = scores / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        context = torch.softmax(scores, dim=-1) @ heads(self.v(x))
        context = context.transpose(1, 2).reshape(batch, length, hidden)
        x = self.attn_norm(x + self.out(context))
        h = self.ffn_out(self.act(self.ffn_in(x)))
        if adapter is not None:
            h = adapter(h)
        return self.ffn_norm(x + h)


class MiniBackbone(Backbone):
    """A small transformer encoder with deterministic seeded initialization.

    Satisfies the backbone interface at configurable width, depth and
    vocabulary so the full pipeline can run and be tested on a CPU. The
    initialization depends only on the given seed, never on global RNG
    state.
    """

    def __init__(
        self,
        vocab_size: int,
        hidden_size: int = 64,
        layer_count: int = 2,
        num_heads: int = 4,
        ffn_size: Optional[int] = None,
        max_positions: int = 256,
        pad_id: int = 0,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.hidden_size = hidden_size
        self.layer_count = layer_count
        self.max_positions = max_positions
        self.pad_id = pad_id
        self.embed = nn.Embedding(vocab_size, hidden_size)
        self.pos_embed = nn.Embedding(max_positions, hidden_size)
        self.layers = nn.ModuleList(
            _EncoderLayer(hidden_size, num_heads, ffn_size or 4 * hidden_size)
            for _ in range(layer_count)
        )
        self.lm_head = nn.Linear(hidden_size, vocab_size)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, param in self.named_parameters():
                # Unit-scale embeddings and fan-in-scaled projections keep
                # attention scores at O(1), so even an untrained frozen
                # backbone produces input-dependent features.
                if "embed" in name and param.dim() > 1:
                    param.normal_(0.0, 1.0, generator=generator)
                elif param.dim() > 1:
                    param.normal_(0.0, 1.0 / math.sqrt(param.shape[1]), generator=generator)
                elif "norm" in name and name.endswith("weight"):
                    param.fill_(1.0)
                else:
                    param.zero_()
        self.to(dtype)

    def _batch_tensors(self, inputs: Sequence[EncodedInput]) -> tuple[Tensor, Tensor]:
        if not inputs:
            raise ValueError("empty input batch")
        lengths = [len(x) for x in inputs]
        longest = max(lengths)
        if longest > self.max_positions:
            raise ValueError(
                f"input length {longest} exceeds backbone capacity {self.max_positions}"
            )
        ids = torch.full((len(inputs), longest), self.pad_id, dtype=torch.long)
        valid = torch.zeros((len(inputs), longest), dtype=torch.bool)
        for row, encoded in enumerate(inputs):
            ids[row, : len(encoded)] = torch.tensor(encoded.ids, dtype=torch.long)
            valid[row, : len(encoded)] = True
        return ids, valid

    def encode(self, inputs, layer_adapters=None):
        if layer_adapters is not None and len(layer_adapters) != self.layer_count:
            raise ValueError(
                f"got {len(layer_adapters)} adapter hooks for {self.layer_count} layers"
            )
        ids, valid = self._batch_tensors(inputs)
        positions = torch.arange(ids.shape[1])
        x = self.embed(ids) + self.pos_embed(positions)[None, :, :]
        for index, layer in enumerate(self.layers):
            adapter = layer_adapters[index] if layer_adapters is not None else None
            x = layer(x, valid, adapter=adapter)
        return x, valid

    def lm_logits(self, inputs, layer_adapters=None):
        hidden, _ = self.encode(inputs, layer_adapters=layer_adapters)
        return self.lm_head(hidden)


@dataclass(frozen=True)
class AdapterConfig:
    """Bottleneck adapter settings: one residual block after each layer's FFN."""

    name: str
    reduction_factor: int = 16
    activation: str = "gelu"

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("adapter name must be non-empty")
        if self.reduction_factor < 1:
            raise ValueError("reduction factor must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}; choose from {sorted(_ACTIVATIONS)}"
            )

    def bottleneck_size(self, hidden_size: int) -> int:
        if hidden_size % self.reduction_factor != 0:
            raise ValueError(
                f"hidden size {hidden_size} not divisible by reduction factor "
                f"{self.reduction_factor}"
            )
        return hidden_size // self.reduction_factor


class Adapter(nn.Module):
    """Residual bottleneck block: h + up(act(down(h))), applied position-wise.

    The up-projection starts at zero, so a freshly attached adapter leaves
    the backbone function unchanged.
    """

    def __init__(self, hidden_size: int, config: AdapterConfig, generator: torch.Generator):
        super().__init__()
        bottleneck = config.bottleneck_size(hidden_size)
        self.down = nn.Linear(hidden_size, bottleneck)
        self.up = nn.Linear(bottleneck, hidden_size)
        self.act = _ACTIVATIONS[config.activation]()
        with torch.no_grad():
            self.down.weight.normal_(0.0, 0.02, generator=generator)
            self.down.bias.zero_()
            self.up.weight.zero_()
            self.up.bias.zero_()

    def forward(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.down.in_features:
            raise ValueError(
                f"adapter expects width {self.down.in_features}, got {h.shape[-1]}"
            )
        return h + self.up(self.act(self.down(h)))


class AdapterBank(nn.Module):
    """One adapter per backbone layer, trained (or frozen) as a unit."""

    def __init__(self, config: AdapterConfig, hidden_size: int, layer_count: int, seed: int = 0):
        super().__init__()
        self.config = config
        self.name = config.name
        generator = torch.Generator().manual_seed(seed)
        self.layers = nn.ModuleList(
            Adapter(hidden_size, config, generator) for _ in range(layer_count)
        )


class StandardHead(nn.Module):
    """Linear classifier over the first-position hidden state."""

    def __init__(self, hidden_size: int, n_classes: int, seed: int = 0):
        super().__init__()
        self.proj = nn.Linear(hidden_size, n_classes)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.proj.weight.normal_(0.0, 0.02, generator=generator)
            self.proj.bias.zero_()

    def forward(self, hidden: Tensor) -> Tensor:
        return self.proj(hidden[:, 0, :])


class PetHead(nn.Module):
    """Prompt head scoring verbalizer tokens at mask positions.

    Affine projection, GELU, layer normalization, then an affine map onto
    the verbalizer vocabulary.
    """

    def __init__(self, hidden_size: int, verbalizer_vocab_size: int, seed: int = 0):
        super().__init__()
        self.project = nn.Linear(hidden_size, hidden_size)
        self.act = nn.GELU()
        self.norm = nn.LayerNorm(hidden_size, eps=1e-5)
        self.emit = nn.Linear(hidden_size, verbalizer_vocab_size)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.project.weight.normal_(0.0, 0.02, generator=generator)
            self.project.bias.zero_()
            self.emit.weight.normal_(0.0, 0.02, generator=generator)
            self.emit.bias.zero_()

    def forward(self, mask_hidden: Tensor) -> Tensor:
        return self.emit(self.norm(self.act(self.project(mask_hidden))))


def sum_verbalizer_logits(
    mask_logits: Tensor, token_rows: Sequence[Sequence[int]]
) -> Tensor:
    """Reduce per-mask token logits (batch, masks, vocab) to class logits.

    Class c gets the sum over the first len(tokens) mask positions of the
    logit of its j-th token at mask j; surplus masks beyond a verbalizer's
    own length do not contribute to that class.
    """
    if any(len(row) > mask_logits.shape[1] for row in token_rows):
        raise ValueError("a verbalizer has more tokens than there are mask positions")
    columns = []
    for row in token_rows:
        total = mask_logits[:, 0, row[0]]
        for j, token in enumerate(row[1:], start=1):
            total = total + mask_logits[:, j, token]
        columns.append(total)
    return torch.stack(columns, dim=1)


def _gather_mask_hidden(hidden: Tensor, inputs: Sequence[EncodedInput], k: int) -> Tensor:
    rows = []
    for encoded in inputs:
        if len(encoded.mask_positions) != k:
            raise ValueError(
                f"input has {len(encoded.mask_positions)} mask positions, expected {k}"
            )
        rows.append(list(encoded.mask_positions))
    index = torch.tensor(rows, dtype=torch.long)
    batch = torch.arange(len(inputs))[:, None]
    return hidden[batch, index]


HEAD_STANDARD = "standard"
HEAD_PET = "pet"
HEAD_PET_LM = "pet_lm"


class ModelAssembly(nn.Module):
    """Backbone plus optional stacked adapter banks plus one classification head.

    Owns the trainable/frozen partition: attaching adapters freezes every
    backbone parameter, and stacking freezes the lower banks.
    """

    def __init__(
        self,
        backbone: Backbone,
        banks: Sequence[AdapterBank],
        head_kind: str,
        head: Optional[nn.Module],
        pvp: Optional[PatternVerbalizerPair],
        n_classes: int,
    ):
        super().__init__()
        if head_kind not in (HEAD_STANDARD, HEAD_PET, HEAD_PET_LM):
            raise ValueError(f"unknown head kind {head_kind!r}")
        if head_kind in (HEAD_PET, HEAD_PET_LM):
            if pvp is None or not pvp.validated:
                raise ValueError("prompt heads require a verbalized pattern set")
        self.backbone = backbone
        self.adapters = nn.ModuleList(banks)
        self.head_kind = head_kind
        self.head = head
        self.pvp = pvp
        self.n_classes = n_classes
        if pvp is not None:
            self._vocab_rows = [pvp.vocab_index_rows()[label] for label in LABEL_ORDER]
            self._token_rows = [pvp.verbalizer_token_ids[label] for label in LABEL_ORDER]

    def layer_hooks(self) -> Optional[list[Optional[Callable[[Tensor], Tensor]]]]:
        if not len(self.adapters):
            return None
        hooks: list[Optional[Callable[[Tensor], Tensor]]] = []
        for index in range(self.backbone.layer_count):
            stack = [bank.layers[index] for bank in self.adapters]

            def hook(h: Tensor, stack=stack) -> Tensor:
                for adapter in stack:
                    h = adapter(h)
                return h

            hooks.append(hook)
        return hooks

    def forward(self, inputs: Sequence[EncodedInput]) -> Tensor:
        """Class logits (batch, n_classes) for a batch of encoded inputs."""
        hooks = self.layer_hooks()
        if self.head_kind == HEAD_STANDARD:
            hidden, _ = self.backbone.encode(inputs, layer_adapters=hooks)
            return self.head(hidden)
        k = self.pvp.mask_count
        if self.head_kind == HEAD_PET:
            hidden, _ = self.backbone.encode(inputs, layer_adapters=hooks)
            mask_logits = self.head(_gather_mask_hidden(hidden, inputs, k))
            return sum_verbalizer_logits(mask_logits, self._vocab_rows)
        lm = self.backbone.lm_logits(inputs, layer_adapters=hooks)
        return sum_verbalizer_logits(_gather_mask_hidden(lm, inputs, k), self._token_rows)

    def trainable_parameter_names(self) -> set[str]:
        return {name for name, p in self.named_parameters() if p.requires_grad}

    def predict(self, inputs: Sequence[EncodedInput]) -> list[Label]:
        """Argmax labels; only meaningful for 5-class assemblies."""
        with torch.no_grad():
            indices = self.forward(inputs).argmax(dim=1).tolist()
        return [LABEL_ORDER[i] for i in indices]


def _component_of(name: str, assembly: ModelAssembly) -> str:
    if name.startswith("backbone."):
        return "backbone"
    if name.startswith("adapters."):
        index = int(name.split(".")[1])
        return f"adapter:{assembly.adapters[index].name}"
    if name.startswith("head."):
        return "head"
    return "other"


def assemble(
    backbone: Backbone,
    adapter_configs: Sequence[AdapterConfig] = (),
    head_kind: str = HEAD_STANDARD,
    *,
    n_classes: int = len(LABEL_ORDER),
    pvp: Optional[PatternVerbalizerPair] = None,
    seed: int = 0,
) -> ModelAssembly:
    """Build a fresh assembly; attaching any adapter freezes the backbone."""
    banks = [
        AdapterBank(config, backbone.hidden_size, backbone.layer_count, seed=seed + index)
        for index, config in enumerate(adapter_configs)
    ]
    backbone.requires_grad_(not banks)
    for bank in banks:
        bank.requires_grad_(True)
    head = _make_head(backbone.hidden_size, head_kind, n_classes, pvp, seed)
    dtype = next(backbone.parameters()).dtype
    assembly = ModelAssembly(backbone, banks, head_kind, head, pvp, n_classes)
    return assembly.to(dtype)


def _make_head(
    hidden_size: int,
    head_kind: str,
    n_classes: int,
    pvp: Optional[PatternVerbalizerPair],
    seed: int,
) -> Optional[nn.Module]:
    if head_kind == HEAD_STANDARD:
        return StandardHead(hidden_size, n_classes, seed=seed + 1000)
    if head_kind == HEAD_PET:
        if pvp is None or not pvp.validated:
            raise ValueError("prompt head requires a verbalized pattern set")
        return PetHead(hidden_size, len(pvp.verbalizer_vocab), seed=seed + 1000)
    return None


def stack_adapters(
    base: ModelAssembly,
    upper: AdapterConfig,
    head_kind: str = HEAD_STANDARD,
    *,
    n_classes: int = len(LABEL_ORDER),
    pvp: Optional[PatternVerbalizerPair] = None,
    seed: int = 0,
) -> ModelAssembly:
    """Freeze the base assembly's adapters and stack a fresh trainable one on top.

    Per layer the feed-forward output passes through the lower (frozen)
    adapters first, then the new one. The returned assembly carries a fresh
    head; only that head and the new adapter train.
    """
    if not len(base.adapters):
        raise ValueError("base assembly has no adapters to stack on")
    base.backbone.requires_grad_(False)
    lower = list(base.adapters)
    for bank in lower:
        bank.requires_grad_(False)
    names = {bank.name for bank in lower}
    if upper.name in names:
        raise ValueError(f"adapter name {upper.name!r} already used in the stack")
    new_bank = AdapterBank(
        upper, base.backbone.hidden_size, base.backbone.layer_count, seed=seed
    )
    head = _make_head(base.backbone.hidden_size, head_kind, n_classes, pvp, seed)
    dtype = next(base.backbone.parameters()).dtype
    assembly = ModelAssembly(
        base.backbone, lower + [new_bank], head_kind, head, pvp, n_classes
    )
    return assembly.to(dtype)


@dataclass(frozen=True)
class ParameterReport:
    """Exact parameter counts per component plus the fp32 checkpoint payload size."""

    total: int
    trainable: int
    by_component: dict[str, int]
    serialized_bytes_fp32: int

    def __post_init__(self) -> None:
        if self.trainable > self.total:
            raise ValueError("trainable count exceeds total")
        if sum(self.by_component.values()) != self.total:
            raise ValueError("component counts do not sum to total")


def count_parameters(assembly: ModelAssembly) -> ParameterReport:
    """Tensor-enumeration parameter accounting over the whole assembly."""
    total = 0
    trainable = 0
    by_component: dict[str, int] = {}
    for name, param in assembly.named_parameters():
        n = param.numel()
        total += n
        if param.requires_grad:
            trainable += n
        component = _component_of(name, assembly)
        by_component[component] = by_component.get(component, 0) + n
    return ParameterReport(
        total=total,
        trainable=trainable,
        by_component=by_component,
        serialized_bytes_fp32=4 * trainable,
    )


def serialize_trainable(assembly: ModelAssembly, path: str | Path) -> None:
    """Write all trainable parameters plus a manifest; frozen tensors are excluded."""
    manifest = []
    tensors: dict[str, Tensor] = {}
    for name, param in assembly.named_parameters():
        if not param.requires_grad:
            continue
        tensors[name] = param.detach().clone()
        manifest.append(
            {
                "name": name,
                "component": _component_of(name, assembly),
                "shape": list(param.shape),
                "role": "trainable",
            }
        )
    torch.save(
        {"format": CHECKPOINT_FORMAT, "manifest": manifest, "tensors": tensors},
        str(path),
    )


def deserialize_trainable(path: str | Path, assembly: ModelAssembly) -> ModelAssembly:
    """Restore trainable parameters bit-exactly from a checkpoint.

    The checkpoint must cover exactly the assembly's trainable partition;
    any missing, extra, or shape-mismatched tensor raises an error naming it.
    """
    payload = torch.load(str(path), weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a trainable-parameter checkpoint: {path}")
    tensors = payload["tensors"]
    current = {
        name: param for name, param in assembly.named_parameters() if param.requires_grad
    }
    for entry in payload["manifest"]:
        name = entry["name"]
        if name not in current:
            raise ValueError(f"checkpoint tensor {name!r} is not trainable in this assembly")
        if list(current[name].shape) != list(entry["shape"]):
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint {entry['shape']}, "
                f"assembly {list(current[name].shape)}"
            )
    missing = set(current) - {entry["name"] for entry in payload["manifest"]}
    if missing:
        raise ValueError(f"checkpoint lacks trainable tensors: {sorted(missing)}")
    with torch.no_grad():
        for entry in payload["manifest"]:
            current[entry["name"]].copy_(tensors[entry["name"]])
    return assembly
