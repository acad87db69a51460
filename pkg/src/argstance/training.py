"""Training recipes for all model variants with deterministic seeding.

Every source of randomness (batch order, masking for the auxiliary
language-model objective) is driven by explicit seeds, and the number of
compute threads is pinned during a run, so two runs with the same
configuration and seed produce bit-identical parameters on one machine.
"""

from __future__ import annotations

import hashlib
import logging
import random
import time
from dataclasses import dataclass, field, replace
from math import ceil, floor
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch
from torch import nn

from . import evaluation
from .corpus import (
    LABEL_ORDER,
    NEAR_DOMAIN_ORDER,
    Label,
    LabeledDataset,
    NearDomainExample,
)
from .encoding import (
    EncodedInput,
    PatternVerbalizerPair,
    Tokenizer,
    build_pet_input,
    build_sam_input,
    build_standard_input,
)
from .model import ModelAssembly, ParameterReport, count_parameters

logger = logging.getLogger(__name__)

VARIANTS = (
    "ft",
    "ft_sam",
    "adapter",
    "adapter_sam",
    "pet_full",
    "adapter_pet",
    "adapter_sam_pet",
)

#: Input construction per variant: plain contextual input, topic-prefixed
#: input, prompt-masked input, or topic-prefixed prompt-masked input.
INPUT_STYLES = {
    "ft": "standard",
    "adapter": "standard",
    "ft_sam": "sam",
    "adapter_sam": "sam",
    "pet_full": "pet",
    "adapter_pet": "pet",
    "adapter_sam_pet": "sam_pet",
}

_MLM_RATE = 0.15


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    variant: str
    learning_rate: float
    epochs: int
    batch_size: int = 16
    warmup_fraction: float = 0.1
    seed: int = 0
    best_epoch_selection: bool = False
    lm_loss_weight: float = 1e-4
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")


_VARIANT_DEFAULTS = {
    "ft": (5e-6, 30),
    "ft_sam": (5e-6, 30),
    "adapter": (5e-5, 30),
    "adapter_sam": (5e-5, 30),
    "adapter_pet": (5e-5, 30),
    "adapter_sam_pet": (5e-5, 30),
    "pet_full": (1e-5, 10),
}


def default_config(variant: str, **overrides) -> TrainConfig:
    """The standard recipe for a variant; keyword arguments override fields."""
    if variant not in _VARIANT_DEFAULTS:
        raise ValueError(f"unknown variant {variant!r}")
    lr, epochs = _VARIANT_DEFAULTS[variant]
    config = TrainConfig(variant=variant, learning_rate=lr, epochs=epochs)
    return replace(config, **overrides) if overrides else config


def near_domain_config(kind: str, **overrides) -> TrainConfig:
    """Recipe for the near-domain pre-training step.

    ``kind`` is "full" (all backbone parameters, short) or "adapter"
    (frozen backbone, adapter recipe).
    """
    if kind == "full":
        config = TrainConfig(variant="ft", learning_rate=5e-6, epochs=2)
    elif kind == "adapter":
        config = TrainConfig(variant="adapter", learning_rate=5e-5, epochs=30)
    else:
        raise ValueError(f"unknown near-domain kind {kind!r}")
    return replace(config, **overrides) if overrides else config


def lr_schedule(
    step: int, total_steps: int, peak_lr: float, warmup_fraction: float
) -> float:
    """Linear warm-up from zero to the peak, then linear decay to zero."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = floor(warmup_fraction * total_steps)
    if warmup_steps > 0 and step <= warmup_steps:
        return peak_lr * step / warmup_steps
    return peak_lr * (total_steps - step) / (total_steps - warmup_steps)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    """Per-epoch loss/learning-rate/wall-clock records for one run."""

    epochs: list[EpochStats] = field(default_factory=list)
    step_lrs: list[float] = field(default_factory=list)
    dev_macro_f1: list[float] = field(default_factory=list)
    best_epoch: Optional[int] = None
    total_seconds: float = 0.0
    parameter_report: Optional[ParameterReport] = None

    @property
    def epoch_count(self) -> int:
        return len(self.epochs)

    def write_csv(self, path: str | Path) -> None:
        import csv

        with Path(path).open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(("epoch", "loss", "lr", "seconds"))
            for stats in self.epochs:
                writer.writerow(
                    (stats.epoch, f"{stats.loss:.8f}", f"{stats.lr:.10g}", f"{stats.seconds:.4f}")
                )


def derive_seed(root: int, *parts) -> int:
    """A stable 63-bit seed from a root seed and a label path.

    Hash-based, so adding new consumers never perturbs existing ones.
    """
    text = "|".join([str(root)] + [str(p) for p in parts])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)


def make_input_builder(
    variant: str,
    tokenizer: Tokenizer,
    max_len: int,
    pvp: Optional[PatternVerbalizerPair] = None,
    topic: Optional[str] = None,
) -> Callable[[object], EncodedInput]:
    """The input-construction function a variant trains and predicts with."""
    style = INPUT_STYLES[variant]
    if style in ("sam", "sam_pet") and not topic:
        raise ValueError(f"variant {variant!r} needs a topic for its input")
    if style in ("pet", "sam_pet"):
        if pvp is None or not pvp.validated:
            raise ValueError(f"variant {variant!r} needs a verbalized pattern set")
    if style == "standard":
        return lambda unit: build_standard_input(unit, tokenizer, max_len)
    if style == "sam":
        return lambda unit: build_sam_input(topic, unit, tokenizer, max_len)
    if style == "pet":
        return lambda unit: build_pet_input(unit, pvp, tokenizer, max_len)
    return lambda unit: build_pet_input(unit, pvp, tokenizer, max_len, topic=topic)


def _frozen_digest(assembly: ModelAssembly) -> str:
    digest = hashlib.sha256()
    for name, param in assembly.named_parameters():
        if not param.requires_grad:
            digest.update(name.encode("utf-8"))
            digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _batches(n: int, size: int) -> list[list[int]]:
    return [list(range(i, min(i + size, n))) for i in range(0, n, size)]


def _mlm_step(
    assembly: ModelAssembly,
    pool: Sequence[EncodedInput],
    rng: random.Random,
    batch_size: int,
    mask_id: int,
    special_ids: frozenset[int],
) -> Optional[torch.Tensor]:
    """Masked-token prediction loss on a random batch from the unlabeled pool."""
    batch = rng.sample(range(len(pool)), min(batch_size, len(pool)))
    masked_inputs: list[EncodedInput] = []
    rows: list[int] = []
    cols: list[int] = []
    targets: list[int] = []
    for row, index in enumerate(batch):
        encoded = pool[index]
        maskable = [i for i, t in enumerate(encoded.ids) if t not in special_ids]
        if not maskable:
            masked_inputs.append(encoded)
            continue
        n_mask = max(1, round(_MLM_RATE * len(maskable)))
        positions = sorted(rng.sample(maskable, n_mask))
        ids = list(encoded.ids)
        for pos in positions:
            rows.append(row)
            cols.append(pos)
            targets.append(ids[pos])
            ids[pos] = mask_id
        masked_inputs.append(
            EncodedInput(ids=tuple(ids), mask_positions=(), segments=encoded.segments)
        )
    if not targets:
        return None
    logits = assembly.backbone.lm_logits(masked_inputs, layer_adapters=assembly.layer_hooks())
    picked = logits[torch.tensor(rows), torch.tensor(cols)]
    return nn.functional.cross_entropy(picked, torch.tensor(targets, dtype=torch.long))


def _dev_macro_f1(
    assembly: ModelAssembly, dev_items: Sequence[tuple[EncodedInput, int]], n_classes: int,
    batch_size: int,
) -> float:
    gold = [target for _, target in dev_items]
    pred: list[int] = []
    assembly.eval()
    with torch.no_grad():
        for chunk in _batches(len(dev_items), batch_size):
            logits = assembly([dev_items[i][0] for i in chunk])
            pred.extend(logits.argmax(dim=1).tolist())
    assembly.train()
    grid = evaluation.confusion(gold, pred, labels=range(n_classes))
    return evaluation.metrics(grid).macro_f1


def _fit(
    assembly: ModelAssembly,
    items: Sequence[tuple[EncodedInput, int]],
    config: TrainConfig,
    *,
    n_classes: int,
    dev_items: Optional[Sequence[tuple[EncodedInput, int]]] = None,
    lm_pool: Optional[Sequence[EncodedInput]] = None,
    mask_id: Optional[int] = None,
    special_ids: Optional[frozenset[int]] = None,
) -> TrainLog:
    if not items:
        raise ValueError("training set is empty")
    trainable = [p for p in assembly.parameters() if p.requires_grad]
    if not trainable:
        raise ValueError("assembly has no trainable parameters")
    frozen_before = _frozen_digest(assembly)

    log = TrainLog()
    optimizer = torch.optim.AdamW(trainable, lr=0.0, weight_decay=config.weight_decay)
    steps_per_epoch = ceil(len(items) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    rng = random.Random(derive_seed(config.seed, "batch-order"))
    lm_rng = random.Random(derive_seed(config.seed, "lm-masking"))

    best_score = float("-inf")
    best_state: Optional[dict[str, torch.Tensor]] = None

    previous_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    run_start = time.perf_counter()
    try:
        assembly.train()
        step = 0
        for epoch in range(1, config.epochs + 1):
            epoch_start = time.perf_counter()
            order = list(range(len(items)))
            rng.shuffle(order)
            losses: list[float] = []
            lr = 0.0
            for chunk in _batches(len(order), config.batch_size):
                lr = lr_schedule(step, total_steps, config.learning_rate, config.warmup_fraction)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                log.step_lrs.append(lr)
                batch = [items[order[i]] for i in chunk]
                logits = assembly([encoded for encoded, _ in batch])
                targets = torch.tensor([target for _, target in batch], dtype=torch.long)
                loss = nn.functional.cross_entropy(logits, targets)
                if lm_pool is not None and config.lm_loss_weight > 0:
                    lm_loss = _mlm_step(
                        assembly, lm_pool, lm_rng, config.batch_size, mask_id, special_ids
                    )
                    if lm_loss is not None:
                        loss = loss + config.lm_loss_weight * lm_loss
                loss.backward()
                nn.utils.clip_grad_norm_(trainable, config.max_grad_norm)
                optimizer.step()
                optimizer.zero_grad()
                losses.append(float(loss.detach()))
                step += 1
            log.epochs.append(
                EpochStats(
                    epoch=epoch,
                    loss=sum(losses) / len(losses),
                    lr=lr,
                    seconds=time.perf_counter() - epoch_start,
                )
            )
            if config.best_epoch_selection:
                score = _dev_macro_f1(assembly, dev_items, n_classes, config.batch_size)
                log.dev_macro_f1.append(score)
                if score > best_score:
                    best_score = score
                    log.best_epoch = epoch
                    best_state = {
                        name: p.detach().clone()
                        for name, p in assembly.named_parameters()
                        if p.requires_grad
                    }
        if best_state is not None:
            with torch.no_grad():
                for name, param in assembly.named_parameters():
                    if param.requires_grad:
                        param.copy_(best_state[name])
    finally:
        torch.set_num_threads(previous_threads)
        assembly.eval()

    log.total_seconds = time.perf_counter() - run_start
    log.parameter_report = count_parameters(assembly)
    if _frozen_digest(assembly) != frozen_before:
        raise RuntimeError("frozen parameters changed during training")
    return log


def train(
    assembly: ModelAssembly,
    train_ds: LabeledDataset,
    dev_ds: Optional[LabeledDataset],
    config: TrainConfig,
    input_builder: Callable[[object], EncodedInput],
    *,
    tokenizer: Optional[Tokenizer] = None,
    lm_builder: Optional[Callable[[object], EncodedInput]] = None,
) -> tuple[ModelAssembly, TrainLog]:
    """Cross-entropy training over class logits for the five sentence codes.

    With best-epoch selection enabled, a dev set is required and the
    parameters of the epoch with the highest dev macro-F1 are restored at
    the end. The "pet_full" variant additionally minimizes a masked-token
    language objective over the training texts; this needs ``tokenizer``
    (for the mask and special ids) and ``lm_builder`` for the plain
    encoding of the pool.
    """
    if config.best_epoch_selection and dev_ds is None:
        raise ValueError("best-epoch selection requires a dev set")
    if not config.best_epoch_selection and dev_ds is not None:
        logger.info("dev set provided but best-epoch selection is off; it will be ignored")
    label_index = {label: i for i, label in enumerate(LABEL_ORDER)}
    items = [(input_builder(u), label_index[u.label]) for u in train_ds.units]
    dev_items = None
    if config.best_epoch_selection:
        dev_items = [(input_builder(u), label_index[u.label]) for u in dev_ds.units]

    lm_pool = None
    mask_id = None
    special_ids = None
    if config.variant == "pet_full":
        if tokenizer is None or lm_builder is None:
            raise ValueError("pet_full needs tokenizer and lm_builder for the LM objective")
        lm_pool = [lm_builder(u) for u in train_ds.units]
        mask_id = tokenizer.mask_id
        special_ids = frozenset(
            (tokenizer.pad_id, tokenizer.begin_id, tokenizer.end_id,
             tokenizer.sep_id, tokenizer.mask_id)
        )

    log = _fit(
        assembly,
        items,
        config,
        n_classes=len(LABEL_ORDER),
        dev_items=dev_items,
        lm_pool=lm_pool,
        mask_id=mask_id,
        special_ids=special_ids,
    )
    return assembly, log


def pretrain_near_domain(
    assembly: ModelAssembly,
    examples: Sequence[NearDomainExample],
    config: TrainConfig,
    *,
    tokenizer: Tokenizer,
    max_len: int,
) -> tuple[ModelAssembly, TrainLog]:
    """Three-class stance training on topic-prefixed near-domain data.

    The trained backbone (full variant) or adapter (frozen-backbone
    variant) then seeds the subsequent task training.
    """
    if assembly.n_classes != len(NEAR_DOMAIN_ORDER):
        raise ValueError(
            f"near-domain pre-training needs a {len(NEAR_DOMAIN_ORDER)}-class head, "
            f"assembly has {assembly.n_classes}"
        )
    if not examples:
        raise ValueError("near-domain dataset is empty")
    stance_index = {stance: i for i, stance in enumerate(NEAR_DOMAIN_ORDER)}
    items = [
        (build_sam_input(ex.topic, ex, tokenizer, max_len), stance_index[ex.stance])
        for ex in examples
    ]
    log = _fit(assembly, items, config, n_classes=len(NEAR_DOMAIN_ORDER))
    return assembly, log


def predict_labels(
    assembly: ModelAssembly,
    units: Sequence,
    input_builder: Callable[[object], EncodedInput],
    batch_size: int = 32,
) -> list[Label]:
    """Deterministic batched prediction of sentence codes."""
    if assembly.n_classes != len(LABEL_ORDER):
        raise ValueError("label prediction needs a five-class assembly")
    assembly.eval()
    encoded = [input_builder(u) for u in units]
    labels: list[Label] = []
    with torch.no_grad():
        for chunk in _batches(len(encoded), batch_size):
            logits = assembly([encoded[i] for i in chunk])
            labels.extend(LABEL_ORDER[i] for i in logits.argmax(dim=1).tolist())
    return labels


def predict_logits(
    assembly: ModelAssembly,
    units: Sequence,
    input_builder: Callable[[object], EncodedInput],
    batch_size: int = 32,
) -> torch.Tensor:
    """Raw class logits, batched exactly like ``predict_labels``."""
    assembly.eval()
    encoded = [input_builder(u) for u in units]
    pieces = []
    with torch.no_grad():
        for chunk in _batches(len(encoded), batch_size):
            pieces.append(assembly([encoded[i] for i in chunk]))
    return torch.cat(pieces, dim=0)
