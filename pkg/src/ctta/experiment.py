"""Run adaptation methods over a target stream and collect online metrics."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import adapt, metrics, nn
from .adapt import AdaptConfig, Adapter
from .nn import ModelState
from .stream import StreamBatch, StreamSpec, materialize

logger = logging.getLogger(__name__)


@dataclass
class MethodRun:
    name: str
    cfg: AdaptConfig
    log: metrics.MetricsLog
    seconds: float

    @property
    def summary(self) -> metrics.Summary:
        return metrics.summarize(self.log)


def run_method(
    source: ModelState,
    batches: Iterable[StreamBatch],
    cfg: AdaptConfig,
    adapter_factory: Callable[[ModelState, AdaptConfig], Adapter] = Adapter,
) -> metrics.MetricsLog:
    """Online protocol: predict each batch, record against its labels, move on.

    The adapter only ever sees ``batch.view`` (images plus segment metadata).
    Each batch's prediction is recorded before the next batch is handed over.
    """
    adapter = adapter_factory(source, cfg)
    log = metrics.MetricsLog()
    for batch in batches:
        images, info = batch.view
        out = adapter.step(images, info)
        metrics.record(log, info, out.probs, batch.labels, out.loss, out.restored_frac)
    return log


def run_methods(
    source: ModelState,
    spec: StreamSpec | Sequence[StreamBatch],
    configs: dict[str, AdaptConfig],
) -> dict[str, MethodRun]:
    """Run each named config over the same stream; runs are independent of ordering."""
    batches = materialize(spec) if isinstance(spec, StreamSpec) else list(spec)
    results = {}
    for name, cfg in configs.items():
        t0 = time.perf_counter()
        log = run_method(source, batches, cfg)
        dt = time.perf_counter() - t0
        logger.info("%s: mean error %.4f (%.1fs)", name, log.mean_error(), dt)
        results[name] = MethodRun(name, cfg, log, dt)
    return results


def ablation_configs(base: AdaptConfig) -> dict[str, AdaptConfig]:
    """The three incremental CoTTA rows: weight-avg, +aug-avg, +restore."""
    cotta = base.with_(method=adapt.Method.COTTA)
    return {
        "cotta_weight_avg": cotta.with_(enable_weight_avg=True, enable_aug_avg=False, enable_restore=False),
        "cotta_weight_aug_avg": cotta.with_(enable_weight_avg=True, enable_aug_avg=True, enable_restore=False),
        "cotta_full": cotta.with_(enable_weight_avg=True, enable_aug_avg=True, enable_restore=True),
    }


def comparison_table(runs: dict[str, MethodRun], by: str = "kind") -> tuple[list[str], list[tuple[str, list[float], float]]]:
    """Rows of (method, per-column mean errors, overall mean); columns are kinds or segments."""
    columns: list[str] = []
    per_run = {}
    for name, run in runs.items():
        s = run.summary
        means = s.kind_means if by == "kind" else s.segment_means
        per_run[name] = (means, s.overall)
        for k in means:
            if k not in columns:
                columns.append(k)
    rows = [(name, [per_run[name][0].get(c, float("nan")) for c in columns], per_run[name][1]) for name in runs]
    return columns, rows


def pretrained_source(
    architecture_id: str,
    num_classes: int,
    train_size: int,
    test_size: int,
    epochs: int,
    seed: int,
    batch_size: int = 64,
    lr: float = 1e-3,
) -> nn.PretrainResult:
    """Build and pretrain a source model on clean glyphs; accuracy is on a held-out split."""
    from .stream import make_glyph_dataset

    train = make_glyph_dataset(train_size, num_classes, seed)
    test = make_glyph_dataset(test_size, num_classes, seed + 1_000_003)
    model = nn.build_model(architecture_id, num_classes, seed)
    return nn.pretrain(model, train.images, train.labels, epochs, seed, batch_size, lr, test.images, test.labels)


def seed_means(values: dict[str, list[float]]) -> dict[str, tuple[float, float]]:
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in values.items()}
