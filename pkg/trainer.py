"""Supervised training of tokenizer + backbone + head under the chronological split."""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from alarm import ProbabilityTrace
from backbone import LOSS_EPS, MemoryState, TitansModel
from component_logger import component_logger
from errors import TrainingError
from numkernel import AdamOptimizer, ParameterSet, clip_by_global_norm, global_norm
from signal_processing import SEGMENT_SECONDS, LabeledSegment, fit_channel_stats

logger = logging.getLogger("trainer")

HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "grad_norm"]


@dataclass
class TrainingSequence:
    indices: np.ndarray       # positions into the owning segment list, strictly increasing t_start
    label: int
    t_start: float
    chain: int = 0

    def __len__(self) -> int:
        return int(self.indices.size)


@dataclass
class SequenceSet:
    """Segments plus the label-homogeneous windows drawn from them."""
    segments: List[LabeledSegment]
    sequences: List[TrainingSequence]

    def __len__(self) -> int:
        return len(self.sequences)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=np.int64)

    def class_counts(self) -> Dict[str, int]:
        labels = self.labels()
        return {"preictal": int(np.sum(labels == 1)), "interictal": int(np.sum(labels == 0))}

    def batch(self, which: Sequence[int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(unique segments (N, C, T), index (B, L) into them, labels (B,))."""
        rows = np.stack([self.sequences[i].indices for i in which])
        unique, inverse = np.unique(rows, return_inverse=True)
        data = np.stack([self.segments[j].data for j in unique]).astype(np.float64)
        labels = np.array([self.sequences[i].label for i in which], dtype=np.float64)
        return data, inverse.reshape(rows.shape).astype(np.int64), labels

    def unique_segments(self, which: Sequence[int]) -> int:
        return int(np.unique(np.concatenate([self.sequences[i].indices for i in which])).size)


@dataclass
class FitResult:
    params: ParameterSet
    history: pd.DataFrame
    best_epoch: int
    best_val_loss: float
    stopped_early: bool = False
    sampler_report: Dict = field(default_factory=dict)


def bce_loss(p, y) -> float:
    """Binary cross-entropy averaged over predictions, p clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(p, dtype=np.float64), LOSS_EPS, 1.0 - LOSS_EPS)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def make_chains(segments: Sequence[LabeledSegment], cadence: float = SEGMENT_SECONDS) -> List[List[int]]:
    """Runs of segments exactly one cadence apart inside one labeled interval.

    Half-overlapping training windows form two interleaved chains.
    """
    groups: Dict[Tuple[float, int], List[int]] = {}
    for i, seg in enumerate(segments):
        groups.setdefault((seg.interval_start, seg.label), []).append(i)
    chains: List[List[int]] = []
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda i: segments[i].t_start)
        open_chains: Dict[int, List[int]] = {}
        for i in members:
            t = segments[i].t_start
            tail = open_chains.pop(int(round((t - cadence) * 1000)), None)
            chain = tail if tail is not None else []
            chain.append(i)
            open_chains[int(round(t * 1000))] = chain
            if tail is None:
                chains.append(chain)
    chains.sort(key=lambda c: segments[c[0]].t_start)
    return chains


def make_sequences(segments: Sequence[LabeledSegment], context_segments: int,
                   stride_segments: int = 1) -> List[TrainingSequence]:
    """Sliding windows of context_segments consecutive same-label segments; short chains are skipped."""
    if context_segments < 1 or stride_segments < 1:
        raise ValueError("context and stride must be >= 1")
    sequences: List[TrainingSequence] = []
    for chain_id, chain in enumerate(make_chains(segments)):
        for start in range(0, len(chain) - context_segments + 1, stride_segments):
            idx = np.array(chain[start:start + context_segments], dtype=np.int64)
            first = segments[idx[0]]
            sequences.append(TrainingSequence(idx, int(first.label), float(first.t_start), chain_id))
    return sequences


def sequence_set(segments: Sequence[LabeledSegment], context_segments: int, stride_segments: int = 1) -> SequenceSet:
    segments = list(segments)
    return SequenceSet(segments, make_sequences(segments, context_segments, stride_segments))


class BalancedSampler:
    """Class-balanced epochs: equal pre-ictal and inter-ictal halves per batch.

    Each class contributes at most max_per_epoch / 2 sequences. Picks are
    sorted in time before chunking so a batch reuses overlapping segments.
    """

    def __init__(self, labels: Sequence[int], batch_size: int = 16, max_per_epoch: int = 512, seed: int = 7):
        labels = np.asarray(labels)
        self.pre = np.flatnonzero(labels == 1)
        self.inter = np.flatnonzero(labels == 0)
        self.half = max(1, batch_size // 2)
        self.cap = max(self.half, max_per_epoch // 2)
        self.seed = seed

    def report(self) -> Dict[str, float]:
        ratio = len(self.pre) / len(self.inter) if len(self.inter) else float("inf")
        return {"preictal": len(self.pre), "interictal": len(self.inter), "ratio": round(ratio, 4),
                "per_class_cap": self.cap}

    def _chunks(self, pool: np.ndarray, rng: np.random.Generator) -> List[np.ndarray]:
        picked = np.sort(rng.choice(pool, size=min(len(pool), self.cap), replace=False))
        return [picked[i:i + self.half] for i in range(0, len(picked), self.half)]

    def epoch(self, epoch: int) -> List[List[int]]:
        rng = np.random.default_rng([self.seed, epoch])
        pre = self._chunks(self.pre, rng)
        inter = self._chunks(self.inter, rng)
        n = max(len(pre), len(inter))
        batches = [np.concatenate([pre[i % len(pre)], inter[i % len(inter)]]).tolist() for i in range(n)]
        order = rng.permutation(n)
        return [batches[i] for i in order]


def _split_batch(data: SequenceSet, batch: List[int], max_segments: int) -> List[List[int]]:
    """Greedy split so no sub-batch needs more than max_segments unique segments."""
    parts: List[List[int]] = []
    current: List[int] = []
    for i in batch:
        if current and data.unique_segments(current + [i]) > max_segments:
            parts.append(current)
            current = []
        current.append(i)
    if current:
        parts.append(current)
    return parts


def batch_loss_and_grads(model: TitansModel, data: SequenceSet, batch: List[int],
                         max_segments: int) -> Tuple[float, Dict[str, np.ndarray]]:
    total = 0.0
    grads: Dict[str, np.ndarray] = {}
    for part in _split_batch(data, batch, max_segments):
        weight = len(part) / len(batch)
        segs, index, labels = data.batch(part)
        loss, part_grads = model.loss_and_grads(segs, index, labels)
        total += weight * loss
        for name, g in part_grads.items():
            grads[name] = grads[name] + weight * g if name in grads else weight * g
    return total, grads


def evaluate_loss(model: TitansModel, data: SequenceSet, batch_size: int, max_segments: int) -> float:
    """Mean final-token BCE over every sequence, in a fixed order."""
    if not len(data):
        return float("nan")
    total = 0.0
    order = list(range(len(data)))
    for start in range(0, len(order), batch_size):
        for part in _split_batch(data, order[start:start + batch_size], max_segments):
            segs, index, labels = data.batch(part)
            total += model.loss(segs, index, labels) * len(part)
    return total / len(data)


def _diagnostics(model: TitansModel, epoch: int, step: int, loss: float, grads: Dict[str, np.ndarray]) -> Dict:
    return {
        "epoch": epoch,
        "step": step,
        "loss": loss,
        "grad_norm": global_norm(grads) if grads else None,
        "non_finite_params": [n for n, v in model.params.items() if not np.all(np.isfinite(v))],
        "non_finite_grads": [n for n, g in grads.items() if not np.all(np.isfinite(g))],
    }


def fit(model: TitansModel, train: SequenceSet, val: SequenceSet, config,
        history_path: Optional[str] = None, checkpoint_path: Optional[str] = None) -> FitResult:
    """Adam on final-token BCE with global-norm clipping and early stopping on validation loss.

    The returned (and saved) parameters are those of the best validation epoch.
    """
    counts = train.class_counts()
    if counts["preictal"] == 0 or counts["interictal"] == 0:
        raise TrainingError("training data must contain both classes", {"class_counts": counts})

    stats = fit_channel_stats(train.segments)
    model.params["norm.mean"] = stats.mean
    model.params["norm.std"] = stats.std

    sampler = BalancedSampler(train.labels(), config.batch_size, config.max_sequences_per_epoch, config.seed)
    logger.info(f"Training sequences {counts}, sampler {sampler.report()}, validation {len(val)}")
    optimizer = AdamOptimizer(lr=config.lr)
    trainable = set(model.trainable)

    best_params = model.params.copy()
    best_val, best_epoch = math.inf, 0
    stale = 0
    stopped_early = False
    rows = []
    show_progress = logger.getEffectiveLevel() <= logging.INFO

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        batches = sampler.epoch(epoch)
        losses, norms = [], []
        for step, batch in enumerate(tqdm(batches, desc=f"epoch {epoch}", leave=False, disable=not show_progress)):
            loss, grads = batch_loss_and_grads(model, train, batch, config.max_batch_segments)
            grads = {n: g for n, g in grads.items() if n in trainable}
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}",
                                    _diagnostics(model, epoch, step, loss, grads))
            grads, norm = clip_by_global_norm(grads, config.clip_norm)
            optimizer.step(model.params, grads)
            losses.append(loss)
            norms.append(norm)

        train_loss = float(np.mean(losses)) if losses else float("nan")
        val_loss = evaluate_loss(model, val, config.batch_size, config.max_batch_segments)
        if not math.isfinite(val_loss) and len(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}",
                                _diagnostics(model, epoch, -1, val_loss, {}))
        score = val_loss if len(val) else train_loss
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                     "grad_norm": float(np.mean(norms)) if norms else 0.0})
        elapsed = time.perf_counter() - started
        component_logger.log_usage("trainer", "epoch", {"epoch": epoch, "batches": len(batches)}, elapsed_s=elapsed)
        logger.info(f"epoch {epoch}: train {train_loss:.5f} val {val_loss:.5f} ({elapsed:.1f}s)")

        if score < best_val:
            best_val, best_epoch = score, epoch
            best_params = model.params.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(f"Early stop at epoch {epoch}; best epoch {best_epoch} (val {best_val:.5f})")
                stopped_early = True
                break

    if not len(val) and config.epochs:
        logger.warning("Empty validation split: best epoch chosen on training loss")
    model.params = best_params
    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    if history_path:
        history.to_csv(history_path, index=False, float_format="%.10g")
    if checkpoint_path:
        model.params.save(checkpoint_path)
    return FitResult(model.params, history, best_epoch, best_val, stopped_early, sampler.report())


def predict_trace(model: TitansModel, segments: Sequence[LabeledSegment], context_segments: int = 12) -> ProbabilityTrace:
    """Stream every contiguous chain through the model in context-sized calls.

    The memory state (recurrent vectors plus attention prefix) is carried
    across calls within a chain and reset at every gap.
    """
    segments = sorted(segments, key=lambda s: s.t_start)
    probs = np.zeros(len(segments))
    for chain in make_chains(segments):
        state = MemoryState.zeros(model.backbone, 1)
        for start in range(0, len(chain), context_segments):
            part = chain[start:start + context_segments]
            batch = np.stack([segments[i].data for i in part]).astype(np.float64)
            p, state = model.forward_segments(batch, state, start_step=state.step)
            probs[part] = p
    return ProbabilityTrace(
        t_start=np.array([s.t_start for s in segments]),
        p=probs,
        labels=np.array([s.label for s in segments], dtype=np.int64),
    )
