"""Multi-seed pipeline runs shared by the slow test modules.

Each seed's base models are trained once and handed to every pipeline that
needs them, so the fine-tuning, stronger-base and self-training checks do
not retrain them.
"""

from functools import lru_cache

import numpy as np

from mhrnnt.experiments import (
    BASE_VARIANTS,
    PipelineConfig,
    base_training_set,
    build_datasets,
    run_finetune,
    run_selftrain,
    train_base,
)

SEEDS = tuple(range(5))


def config(seed: int, **kw) -> PipelineConfig:
    return PipelineConfig(seed=seed, bases=BASE_VARIANTS, **kw)


@lru_cache(maxsize=None)
def bases(seed: int, n: int = 2):
    cfg = config(seed)
    data = build_datasets(cfg)
    out = dict(bases(seed, n - 1)) if n > 1 else {}
    i = n - 1
    out[cfg.bases[i].name] = train_base(cfg, base_training_set(cfg, i, data["train"]), data["dev"], i)
    return out


@lru_cache(maxsize=None)
def finetune_record(seed: int):
    """Bases 1-2, SH and MH(1+2) fine-tuning, two iterations."""
    cfg = config(seed, iterations=2, mh_groups=((0, 1),))
    return run_finetune(cfg, modes=("sh", "mh"), bases=bases(seed, 2))


@lru_cache(maxsize=None)
def stronger_base_record(seed: int):
    """Bases 1-4, MH(1+3) and MH(1-4) fine-tuning."""
    cfg = config(seed, mh_groups=((0, 2), (0, 1, 2, 3)))
    return run_finetune(cfg, modes=("mh",), bases=bases(seed, 4))


@lru_cache(maxsize=None)
def selftrain_record(seed: int):
    cfg = config(seed, mh_groups=((0, 1),))
    return run_selftrain(cfg, modes=("sh", "mh"), bases=bases(seed, 2))


def mean_wer(records, method: str, condition: str = "noisy") -> float:
    return float(np.mean([r.wer(method, condition) for r in records]))
