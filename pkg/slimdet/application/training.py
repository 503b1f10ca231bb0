"""
Toy-scale training: LR schedule, layer freezing, scratch initialisation and
an SGD-with-momentum loop over the detection losses.

Batch norm runs on its fixed running statistics, so gamma and beta are the
only BN learnables and frozen layers stay bitwise untouched.
"""
import math
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from loguru import logger
from tqdm import tqdm

from ..domain.configs import FreezeMode, TrainConfig
from ..domain.engine import ParamGrads, build_network
from ..domain.entities import (
    ConvBlock,
    ConvLayer,
    EpochRecord,
    LossBreakdown,
    NetworkDef,
    Sample,
    TrainHistory,
    WeightsHeader,
    WeightStore,
)
from ..domain.errors import DivergenceDetected, RangeOutOfBounds, TrainingError
from ..domain.graph import conv_in_channels, infer_shapes
from ..domain.losses import total_loss
from ..domain.prune import pruning_units
from ..domain.rng import SplitMix64, derive_seed
from ..infrastructure.augment import basic_transforms, letterbox, mosaic

FreezeTable = Dict[str, Dict[str, List[Tuple[int, int]]]]

SPARSE_GAMMA = 0.01
TRAINABLE_PARAMS = ("kernel", "bias", "bn_gamma", "bn_beta")


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """base_lr * decay ** floor(epoch / lr_step_every)."""
    if epoch < 0:
        raise ValueError(f"Epoch must be >= 0, got {epoch}")
    return config.base_lr * config.lr_decay ** (epoch // config.lr_step_every)


def resolve_freeze_ranges(
    net: NetworkDef, config: TrainConfig, table: Optional[FreezeTable] = None
) -> List[Tuple[int, int]]:
    """Explicit config ranges, else the table entry for the network and freeze mode.

    Raises:
        TrainingError: If freezing is requested but no ranges are known for the network
        RangeOutOfBounds: If a range reaches past the last layer
    """
    if config.freeze is FreezeMode.NONE:
        return []
    if config.freeze_ranges is not None:
        ranges = [tuple(r) for r in config.freeze_ranges]
    else:
        entry = (table or {}).get(net.source_name, {})
        if config.freeze.value not in entry:
            raise TrainingError(
                f"No '{config.freeze.value}' freeze ranges for network '{net.source_name}'"
            )
        ranges = entry[config.freeze.value]
    for start, end in ranges:
        if start < 0 or end < start or end >= len(net.layers):
            raise RangeOutOfBounds(start, end, len(net.layers))
    return [(int(a), int(b)) for a, b in ranges]


def trainable_mask(net: NetworkDef, ranges: Sequence[Tuple[int, int]]) -> Dict[int, bool]:
    """Per conv layer: True when its kernel, bias and BN parameters may change."""
    for start, end in ranges:
        if start < 0 or end < start or end >= len(net.layers):
            raise RangeOutOfBounds(start, end, len(net.layers))
    frozen = {i for start, end in ranges for i in range(start, end + 1)}
    return {i: i not in frozen for i in net.conv_indices()}


def init_store(net: NetworkDef, seed: int) -> WeightStore:
    """He-normal kernels, gamma ~ U(0, 1), beta = mean = 0, var = 1, zero biases."""
    rng = SplitMix64(seed)
    in_channels = conv_in_channels(net, infer_shapes(net))
    blocks: Dict[int, ConvBlock] = {}
    for i in net.conv_indices():
        layer: ConvLayer = net.layers[i]
        c = in_channels[i]
        fan_in = c * layer.size * layer.size
        count = layer.filters * fan_in
        kernel = (rng.normal_array(count) * math.sqrt(2.0 / fan_in)).astype(np.float32)
        kernel = kernel.reshape(layer.filters, c, layer.size, layer.size)
        if layer.batch_normalize:
            blocks[i] = ConvBlock(
                kernel=kernel,
                bn_beta=np.zeros(layer.filters, dtype=np.float32),
                bn_gamma=rng.random_array(layer.filters).astype(np.float32),
                bn_mean=np.zeros(layer.filters, dtype=np.float32),
                bn_var=np.ones(layer.filters, dtype=np.float32),
            )
        else:
            blocks[i] = ConvBlock(kernel=kernel, bias=np.zeros(layer.filters, dtype=np.float32))
    logger.debug(f"Initialised {len(blocks)} conv blocks for '{net.source_name}' (seed {seed})")
    return WeightStore(header=WeightsHeader(), blocks=blocks)


def prunable_bn_layers(net: NetworkDef) -> List[int]:
    """Conv layers whose gammas drive pruning; the sparsity penalty applies only here."""
    members: Set[int] = set()
    for group in pruning_units(net).values():
        members.update(group)
    return sorted(members)


def gamma_sparsity(store: WeightStore, layers: Sequence[int]) -> float:
    """Fraction of |gamma| below SPARSE_GAMMA across `layers`."""
    gammas = [np.abs(store.blocks[i].bn_gamma) for i in layers if store.blocks[i].batch_normalize]
    if not gammas:
        return 0.0
    stacked = np.concatenate(gammas)
    return float(np.mean(stacked < SPARSE_GAMMA))


class SgdMomentum:
    """SGD with momentum, kernel-only weight decay and global-norm clipping."""

    def __init__(
        self,
        trainable: Dict[int, bool],
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        grad_clip: Optional[float] = 10.0,
    ) -> None:
        self.trainable = trainable
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self._velocity: Dict[Tuple[int, str], np.ndarray] = {}

    def _gradients(
        self, store: WeightStore, grads: ParamGrads
    ) -> Dict[Tuple[int, str], np.ndarray]:
        out = {}
        for layer in sorted(grads.layers):
            if not self.trainable.get(layer, False):
                continue
            for name in TRAINABLE_PARAMS:
                g = grads.get(layer, name)
                if g is None:
                    continue
                g = g.astype(np.float64)
                if name == "kernel" and self.weight_decay > 0.0:
                    g = g + self.weight_decay * store.blocks[layer].kernel
                out[(layer, name)] = g
        return out

    def step(
        self,
        store: WeightStore,
        grads: ParamGrads,
        lr: float,
        penalty: Optional[Dict[int, np.ndarray]] = None,
    ) -> float:
        """
        Update `store` in place; returns the pre-clipping gradient norm.

        `penalty` maps conv layers to gamma subgradients of the sparsity term. They join
        the data gradient after clipping, so the clip never scales the penalty.
        """
        updates = self._gradients(store, grads)
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in updates.values()))
        scale = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / norm
        steps = {key: scale * g for key, g in updates.items()}
        for layer, g in (penalty or {}).items():
            if not self.trainable.get(layer, False):
                continue
            key = (layer, "bn_gamma")
            g = g.astype(np.float64)
            steps[key] = steps[key] + g if key in steps else g
        for key, g in steps.items():
            layer, name = key
            param = getattr(store.blocks[layer], name)
            v = self._velocity.get(key)
            v = -lr * g if v is None else self.momentum * v - lr * g
            self._velocity[key] = v
            param += v.astype(param.dtype)
        return norm


class ToyTrainer:
    """Runs the training loop for one network and configuration."""

    def __init__(
        self,
        net: NetworkDef,
        store: WeightStore,
        config: TrainConfig,
        freeze_table: Optional[FreezeTable] = None,
        threads: int = 1,
        conv_method: str = "reference",
        progress: bool = False,
    ) -> None:
        self.net = net
        self.store = store.copy()
        self.config = config
        self.progress = progress
        self.trainable = trainable_mask(net, resolve_freeze_ranges(net, config, freeze_table))
        self.sparsity_layers = prunable_bn_layers(net)
        self.network = build_network(net, self.store, threads, conv_method)
        self.optimizer = SgdMomentum(
            self.trainable, config.momentum, config.weight_decay, config.grad_clip
        )
        self._plain: Dict[str, Sample] = {}

    def _prepare(self, samples: Sequence[Sample], index: int, epoch: int) -> Sample:
        """Network-sized input for one batch slot, augmented under its derived seed."""
        config = self.config
        sample = samples[index]
        seed = derive_seed(config.seed, f"{epoch}:{sample.source_id}")
        size = (self.net.input_width, self.net.input_height)
        if config.mosaic and len(samples) >= 4:
            rng = SplitMix64(seed)
            others = [rng.randint(0, len(samples) - 1) for _ in range(3)]
            parts = [
                basic_transforms(samples[k], config.augment, derive_seed(seed, str(n)))
                for n, k in enumerate([index] + others)
            ]
            return mosaic(parts, seed, *size, config.augment)
        if not config.augment.is_identity:
            return letterbox(basic_transforms(sample, config.augment, seed), *size)
        if sample.source_id not in self._plain:
            self._plain[sample.source_id] = letterbox(sample, *size)
        return self._plain[sample.source_id]

    def _batch_step(
        self, batch: Sequence[Sample], lr: float, epoch: int, step: int
    ) -> LossBreakdown:
        x = np.stack([s.image for s in batch]).astype(np.float32)
        heads = self.network.forward(x, keep_cache=True)
        per_image = [{o: f[k] for o, f in heads.items()} for k in range(len(batch))]
        lam = self.config.sparsity.lam
        loss, head_grads, gamma_grads = total_loss(
            per_image,
            [s.gts for s in batch],
            self.net,
            self.config.loss_weights,
            self.config.ignore_iou,
            self.store,
            self.sparsity_layers,
            lam,
        )
        if not math.isfinite(loss.total):
            raise DivergenceDetected(epoch, step, loss.total)
        grads = self.network.backward(
            {o: np.stack([g[o] for g in head_grads]) for o in heads}
        )
        self.network.release()
        self.optimizer.step(self.store, grads, lr, gamma_grads)
        return loss

    def fit(
        self, samples: Sequence[Sample], label: str = "train"
    ) -> Tuple[WeightStore, TrainHistory]:
        """
        Train for `config.epochs` epochs over `samples`.

        Returns:
            Trained weights and one history record per epoch

        Raises:
            DivergenceDetected: If the loss becomes non-finite
        """
        if not samples:
            raise TrainingError("Cannot train on an empty dataset")
        config = self.config
        frozen = sum(1 for t in self.trainable.values() if not t)
        logger.info(
            f"{label}: {config.epochs} epochs over {len(samples)} samples, batch "
            f"{config.batch_size}, lr {config.base_lr:g}, lambda {config.sparsity.lam:g}, "
            f"mosaic {config.mosaic}, {frozen} frozen conv layers"
        )
        history = TrainHistory()
        epochs = tqdm(range(config.epochs), desc=label, disable=not self.progress)
        for epoch in epochs:
            lr = lr_schedule(epoch, config)
            order = SplitMix64(derive_seed(config.seed, f"epoch-{epoch}")).shuffled(
                range(len(samples))
            )
            epoch_loss = LossBreakdown()
            steps = 0
            for start in range(0, len(order), config.batch_size):
                chunk = order[start : start + config.batch_size]
                batch = [self._prepare(samples, k, epoch) for k in chunk]
                epoch_loss = epoch_loss + self._batch_step(batch, lr, epoch, steps)
                steps += 1
            record = EpochRecord(
                epoch=epoch,
                lr=lr,
                loss=epoch_loss.scaled(1.0 / steps),
                gamma_sparsity=gamma_sparsity(self.store, self.sparsity_layers),
            )
            history.records.append(record)
            logger.debug(
                f"{label} epoch {epoch}: loss {record.loss.total:.5f}, lr {lr:g}, "
                f"gamma sparsity {record.gamma_sparsity:.3f}"
            )
        last = history.records[-1]
        logger.info(
            f"{label} finished: loss {history.records[0].loss.total:.5f} -> "
            f"{last.loss.total:.5f}, gamma sparsity {last.gamma_sparsity:.3f}"
        )
        return self.store, history


def train_toy(
    net: NetworkDef,
    config: TrainConfig,
    samples: Sequence[Sample],
    store: Optional[WeightStore] = None,
    freeze_table: Optional[FreezeTable] = None,
    threads: int = 1,
    progress: bool = False,
) -> Tuple[WeightStore, TrainHistory]:
    """Train from `store` (pretrained init) or from a seeded scratch initialisation."""
    if store is None:
        store = init_store(net, config.seed)
    trainer = ToyTrainer(net, store, config, freeze_table, threads, progress=progress)
    return trainer.fit(samples, "train")


def fine_tune(
    net: NetworkDef,
    store: WeightStore,
    config: TrainConfig,
    samples: Sequence[Sample],
    freeze_table: Optional[FreezeTable] = None,
    threads: int = 1,
    progress: bool = False,
) -> Tuple[WeightStore, TrainHistory]:
    """Continue training a (pruned) model; the configured sparsity defaults to off."""
    trainer = ToyTrainer(net, store, config, freeze_table, threads, progress=progress)
    return trainer.fit(samples, "fine-tune")
