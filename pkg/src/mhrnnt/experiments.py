"""Pseudo-label pipelines: unsupervised fine-tuning and self-training.

Fine-tuning decodes unlabeled test audio with one or more base models and
continues training base model 1 on those hypotheses, optionally repeating
with the fine-tuned models as decoders. Self-training pools labeled
training data with pseudo-labeled extra data and trains a fresh model.

Every stage records what it produced in an :class:`ExperimentRecord`.
Hypotheses are keyed by ``(dataset, producer)``: the decode of a model on a
dataset serves both as pseudo-labels and as that model's scored output, so
report numbers can always be recomputed from the stored hypothesis files.
"""

import hashlib
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from . import __name__ as _pkg
from .checkpoint import Checkpoint, read_checkpoint, save_checkpoint
from .datagen import CorpusSpec, Dataset, generate, generate_with_labels, save_dataset, strip_labels
from .decode import ScoredHypothesis, beam_decode, read_hypotheses, write_hypotheses
from .exceptions import ContractViolation, DataFormatError, IncompleteRecord, PairingError, ValidationError
from .model import ModelConfig, TransducerModel, init_model
from .scoring import ScoreReport, score_set, write_report
from .training import train

log = logging.getLogger(__name__)

MODES = ("sh", "mh")


def derive_seed(seed: int, *parts) -> int:
    """Stable 31-bit seed for a named sub-task of run ``seed``."""
    return zlib.crc32(":".join(map(str, (seed,) + parts)).encode()) & 0x7FFFFFFF


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    learning_rate: float
    epochs: int
    batch_size: int = 4
    clip_norm: Optional[float] = 5.0
    halve_on_worse: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError(f"bad schedule: epochs={self.epochs}, batch_size={self.batch_size}")


@dataclass(frozen=True)
class BaseModelSpec:
    """One base model variant: its decoder dropout and training speed factors."""

    name: str
    dropout_rate: float = 0.1
    speed_factors: Tuple[float, ...] = (1.0,)

    def __post_init__(self):
        object.__setattr__(self, "speed_factors", tuple(float(s) for s in self.speed_factors))
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"{self.name}: dropout_rate must lie in [0, 1)")
        if not self.name or "/" in self.name:
            raise ValidationError(f"bad base model name {self.name!r}")


SPEED_FACTORS = (0.75, 1.0, 1.25)

BASE_VARIANTS = (
    BaseModelSpec("base1", 0.1),
    BaseModelSpec("base2", 0.5),
    BaseModelSpec("base3", 0.1, SPEED_FACTORS),
    BaseModelSpec("base4", 0.5, SPEED_FACTORS),
)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a pipeline run depends on.

    ``bases`` lists the base models in producer order; base 1 is the model
    that gets fine-tuned. SH uses base 1 alone. MH uses every base unless
    ``mh_groups`` names subsets (tuples of 0-based indices into ``bases``,
    each starting with 0), one MH run per group.
    """

    mode: str = "mh"
    iterations: int = 1
    beam: int = 4
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    bases: Tuple[BaseModelSpec, ...] = BASE_VARIANTS[:2]
    mh_groups: Optional[Tuple[Tuple[int, ...], ...]] = None
    corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(utterance_count=200))
    dev_count: int = 30
    test_count: int = 400
    unlabeled_count: int = 400
    train_condition: str = "clean"
    test_conditions: Tuple[str, ...] = ("noisy",)
    unlabeled_condition: str = "noisy"
    base_training: Schedule = Schedule(learning_rate=0.3, epochs=15)
    finetune: Schedule = Schedule(learning_rate=0.02, epochs=1, batch_size=8)
    # None means: same schedule as base training
    selftrain: Optional[Schedule] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", str(self.mode).lower())
        object.__setattr__(self, "bases", tuple(self.bases))
        object.__setattr__(self, "test_conditions", tuple(self.test_conditions))
        if self.mh_groups is not None:
            object.__setattr__(self, "mh_groups", tuple(tuple(int(i) for i in g) for g in self.mh_groups))
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations not in (1, 2):
            raise ValidationError(f"iterations must be 1 or 2, got {self.iterations}")
        if self.beam < 1:
            raise ValidationError(f"beam must be >= 1, got {self.beam}")
        if not self.bases:
            raise ValidationError("at least one base model is required")
        names = [b.name for b in self.bases]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate base model names: {names}")
        for g in self.mh_groups or ():
            if not g or g[0] != 0 or len(set(g)) != len(g) or max(g) >= len(self.bases) or min(g) < 0:
                raise ValidationError(f"bad MH group {g}: indices must be distinct, start with 0, index bases")
        if self.mode == "mh" and self.mh_groups is None and len(self.bases) < 2:
            log.warning("MH mode with a single base model reduces to SH")
        for cond in (self.train_condition, self.unlabeled_condition, *self.test_conditions):
            if cond not in self.corpus.conditions:
                raise ValidationError(f"unknown condition {cond!r}")
        if min(self.dev_count, self.test_count, self.unlabeled_count) < 0:
            raise ValidationError("dataset sizes must be >= 0")
        if self.model.vocab_size != self.corpus.vocab_size or self.model.feat_dim != self.corpus.feat_dim:
            raise ValidationError("model and corpus disagree on vocab_size / feat_dim")

    @property
    def selftrain_schedule(self) -> Schedule:
        return self.selftrain or self.base_training

    def groups(self, mode: Optional[str] = None) -> Tuple[Tuple[int, ...], ...]:
        """Base-index groups whose hypotheses feed each run of ``mode``."""
        mode = mode or self.mode
        if mode == "sh":
            return ((0,),)
        return self.mh_groups or (tuple(range(len(self.bases))),)

    def corpus_spec(self) -> CorpusSpec:
        return self.corpus.replace(seed=self.seed)

    def replace(self, **changes) -> "PipelineConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "iterations": self.iterations,
            "beam": self.beam,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "bases": [
                {"name": b.name, "dropout_rate": b.dropout_rate, "speed_factors": list(b.speed_factors)}
                for b in self.bases
            ],
            "mh_groups": None if self.mh_groups is None else [list(g) for g in self.mh_groups],
            "corpus": self.corpus.to_dict(),
            "dev_count": self.dev_count,
            "test_count": self.test_count,
            "unlabeled_count": self.unlabeled_count,
            "train_condition": self.train_condition,
            "test_conditions": list(self.test_conditions),
            "unlabeled_condition": self.unlabeled_condition,
            "base_training": asdict(self.base_training),
            "finetune": asdict(self.finetune),
            "selftrain": None if self.selftrain is None else asdict(self.selftrain),
        }
        out["corpus"].pop("seed")
        out["model"].pop("seed")
        out["model"].pop("dropout_rate")
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "PipelineConfig":
        """Build from a (possibly partial) nested mapping, e.g. parsed YAML."""
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        kw = {}
        try:
            for key in ("mode", "iterations", "beam", "seed", "dev_count", "test_count",
                        "unlabeled_count", "train_condition", "unlabeled_condition"):
                if key in data:
                    kw[key] = data[key]
            if "test_conditions" in data:
                conds = data["test_conditions"]
                kw["test_conditions"] = (conds,) if isinstance(conds, str) else tuple(conds)
            if data.get("model") is not None:
                kw["model"] = ModelConfig(**{k: v for k, v in data["model"].items() if k != "seed"})
            if data.get("bases") is not None:
                kw["bases"] = tuple(BaseModelSpec(**b) for b in data["bases"])
            if data.get("mh_groups") is not None:
                kw["mh_groups"] = tuple(tuple(g) for g in data["mh_groups"])
            if data.get("corpus") is not None:
                corpus = {k: v for k, v in data["corpus"].items() if k != "seed"}
                kw["corpus"] = CorpusSpec.from_dict(corpus)
            for key in ("base_training", "finetune", "selftrain"):
                if data.get(key) is not None:
                    defaults = asdict(getattr(cls, key)) if getattr(cls, key) is not None else {}
                    if key == "selftrain":
                        defaults = asdict(cls.base_training)
                    kw[key] = Schedule(**{**defaults, **data[key]})
        except TypeError as exc:
            raise ValidationError(f"bad config: {exc}") from None
        if "model" not in kw and "corpus" in kw:
            kw["model"] = ModelConfig(vocab_size=kw["corpus"].vocab_size, feat_dim=kw["corpus"].feat_dim)
        return cls(**kw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- data --------------------------------------------------------------------

def test_set_name(condition: str) -> str:
    return f"test-{condition}"


def build_datasets(config: PipelineConfig) -> Dict[str, Dataset]:
    """Labeled train/dev sets and one labeled test set per test condition."""
    spec = config.corpus_spec()
    data = {
        "train": generate(spec, "train", config.train_condition),
        "dev": generate(spec.replace(utterance_count=config.dev_count), "dev", config.train_condition),
    }
    for cond in config.test_conditions:
        data[test_set_name(cond)] = generate(spec.replace(utterance_count=config.test_count), "test", cond)
    return data


def build_unlabeled(config: PipelineConfig) -> Tuple[Dataset, Dict[str, Tuple[int, ...]]]:
    """Extra untranscribed data for self-training plus its withheld transcripts."""
    spec = config.corpus_spec().replace(utterance_count=config.unlabeled_count)
    return generate_with_labels(spec, config.unlabeled_condition)


def base_training_set(config: PipelineConfig, index: int, train_set: Optional[Dataset] = None) -> Dataset:
    """Training data for base ``index``: the shared set, or a speed-perturbed copy."""
    base = config.bases[index]
    if base.speed_factors == (1.0,) and train_set is not None:
        return train_set
    spec = config.corpus_spec().replace(speed_factors=base.speed_factors)
    return generate(spec, "train", config.train_condition)


# -- stages ------------------------------------------------------------------

def _fit(model, dataset_features, targets, schedule: Schedule, seed: int, dev: Optional[Dataset]):
    return train(
        model, dataset_features, targets,
        epochs=schedule.epochs,
        learning_rate=schedule.learning_rate,
        batch_size=schedule.batch_size,
        seed=seed,
        dev_features=dev.features if dev is not None and len(dev) else None,
        dev_targets=dev.labels if dev is not None and len(dev) else None,
        halve_on_worse=schedule.halve_on_worse,
        clip_norm=schedule.clip_norm,
    )


def base_model_config(config: PipelineConfig, index: int) -> ModelConfig:
    b = config.bases[index]
    return config.model.replace(dropout_rate=b.dropout_rate, seed=derive_seed(config.seed, "init", index))


def train_base(config: PipelineConfig, labeled_train: Dataset, dev: Optional[Dataset], index: int = 0) -> Checkpoint:
    """Train base model ``index`` with the standard loss; best dev-loss epoch wins."""
    if not labeled_train.is_labeled():
        raise ContractViolation("base training needs transcribed data")
    name = config.bases[index].name
    result = _fit(
        init_model(base_model_config(config, index)),
        labeled_train.features, labeled_train.labels,
        config.base_training, derive_seed(config.seed, "train", index), dev,
    )
    meta = {
        "name": name,
        "stage": "base",
        "train_data": labeled_train.content_hash(),
        "train_utterances": len(labeled_train),
        "best_epoch": result.best_epoch,
        "history": result.history,
    }
    return Checkpoint(result.model, meta)


@dataclass(frozen=True)
class HypothesisSet:
    """The M 1-best hypotheses of one utterance, in producer order."""

    utt_id: str
    hypotheses: Tuple[ScoredHypothesis, ...]

    def __post_init__(self):
        if not self.hypotheses:
            raise ContractViolation(f"{self.utt_id}: empty hypothesis set")

    @property
    def transcripts(self) -> List[Tuple[int, ...]]:
        return [h.transcript for h in self.hypotheses]

    @property
    def producers(self) -> List[str]:
        return [h.producer_id for h in self.hypotheses]

    def __len__(self):
        return len(self.hypotheses)


def _name_of(ckpt, default: str) -> str:
    if isinstance(ckpt, Checkpoint):
        return str(ckpt.metadata.get("name", default))
    return default


def _model_of(ckpt) -> TransducerModel:
    return ckpt.model if isinstance(ckpt, Checkpoint) else ckpt


def decode_dataset(model, dataset: Dataset, beam: int, producer_id: str) -> Dict[str, ScoredHypothesis]:
    m = _model_of(model)
    return {u.id: beam_decode(m, u.features, beam_size=beam, producer_id=producer_id)[0] for u in dataset}


def pseudo_label(checkpoints: Sequence, unlabeled: Dataset, beam: int,
                 decoded: Optional[Sequence[Mapping[str, ScoredHypothesis]]] = None) -> Dict[str, HypothesisSet]:
    """Decode ``unlabeled`` with every checkpoint; one HypothesisSet per utterance.

    ``decoded`` may supply already computed per-producer decodes (same order
    as ``checkpoints``) so a decode is never run twice.
    """
    if not checkpoints:
        raise ContractViolation("pseudo-labeling needs at least one model")
    if decoded is None:
        decoded = [decode_dataset(c, unlabeled, beam, _name_of(c, f"model{i + 1}")) for i, c in enumerate(checkpoints)]
    return {
        u.id: HypothesisSet(u.id, tuple(per_model[u.id] for per_model in decoded))
        for u in unlabeled
    }


def _targets_for(dataset: Dataset, hypothesis_sets: Mapping[str, HypothesisSet]):
    missing = [uid for uid in dataset.ids if uid not in hypothesis_sets]
    if missing:
        raise PairingError(f"{len(missing)} utterances have no hypotheses, e.g. {missing[0]!r}")
    targets = []
    for uid in dataset.ids:
        hs = hypothesis_sets[uid]
        targets.append(hs.transcripts[0] if len(hs) == 1 else hs)
    return targets


def finetune(base, unlabeled: Dataset, hypothesis_sets: Mapping[str, HypothesisSet],
             config: PipelineConfig, seed_key: str = "") -> Checkpoint:
    """Continue training ``base`` on pseudo-labels of ``unlabeled``.

    A one-hypothesis set trains with the standard loss, a larger set with
    the summed multi-hypothesis loss. All parameters are updated; there is
    no dev set (the data is untranscribed), so the final epoch is returned.
    """
    if config.mode == "sh" and any(len(h) != 1 for h in hypothesis_sets.values()):
        raise ContractViolation("SH fine-tuning takes exactly one hypothesis per utterance")
    targets = _targets_for(unlabeled, hypothesis_sets)
    result = _fit(
        _model_of(base), unlabeled.features, targets, config.finetune,
        derive_seed(config.seed, "finetune", seed_key), None,
    )
    producers = sorted({p for h in hypothesis_sets.values() for p in h.producers})
    meta = {
        "stage": "finetune",
        "parent": _name_of(base, ""),
        "producers": producers,
        "adapt_data": unlabeled.content_hash(),
        "history": result.history,
    }
    return Checkpoint(result.model, meta)


# -- records -----------------------------------------------------------------

@dataclass
class ResultRow:
    """One table cell: ``method`` evaluated on ``dataset``."""

    method: str
    condition: str
    dataset: str
    checkpoint: str
    report: ScoreReport

    @property
    def wer(self) -> float:
        return self.report.wer


@dataclass
class ExperimentRecord:
    config: PipelineConfig
    kind: str = ""
    checkpoints: Dict[str, Checkpoint] = field(default_factory=dict)
    # (dataset, producer) -> utt id -> hypothesis
    hypotheses: Dict[Tuple[str, str], Dict[str, ScoredHypothesis]] = field(default_factory=dict)
    # (dataset, checkpoint that was fine-tuned on them, iteration) -> producers used
    pseudo_labels: List[dict] = field(default_factory=list)
    references: Dict[str, Dict[str, Tuple[int, ...]]] = field(default_factory=dict)
    results: List[ResultRow] = field(default_factory=list)

    def add_checkpoint(self, name: str, ckpt: Checkpoint) -> Checkpoint:
        if name in self.checkpoints:
            raise ContractViolation(f"checkpoint {name!r} recorded twice")
        ckpt.metadata["name"] = name
        self.checkpoints[name] = ckpt
        return ckpt

    def decode(self, name: str, dataset_name: str, dataset: Dataset) -> Dict[str, ScoredHypothesis]:
        """Decode ``dataset`` with checkpoint ``name`` once; later calls reuse it."""
        key = (dataset_name, name)
        if key not in self.hypotheses:
            self.hypotheses[key] = decode_dataset(self.checkpoints[name], dataset, self.config.beam, name)
        return self.hypotheses[key]

    def evaluate(self, method: str, name: str, dataset_name: str, dataset: Dataset, condition: str) -> ResultRow:
        hyps = self.decode(name, dataset_name, dataset)
        refs = self.references.setdefault(dataset_name, dataset.label_map())
        report = score_set(refs, hyps, condition=condition, model_id=name, stage=method)
        row = ResultRow(method, condition, dataset_name, name, report)
        self.results.append(row)
        return row

    def wer(self, method: str, condition: str) -> float:
        for row in self.results:
            if row.method == method and row.condition == condition:
                return row.wer
        raise KeyError((method, condition))

    def methods(self) -> List[str]:
        return list(dict.fromkeys(r.method for r in self.results))


# -- pipelines -----------------------------------------------------------------

def _base_method(config: PipelineConfig, index: int) -> str:
    return f"Base model {index + 1}"


def _group_tag(mode: str, group: Sequence[int]) -> str:
    return "sh" if mode == "sh" else "mh" + "".join(str(i + 1) for i in group)


def _method_label(kind: str, mode: str, group: Sequence[int]) -> str:
    m = len(group)
    noun = "hypothesis" if m == 1 else "hypotheses"
    what = "fine-tuning" if kind == "finetune" else "self-training"
    # name the bases unless they are simply the first m
    which = "" if tuple(group) == tuple(range(m)) else ", bases " + "+".join(str(i + 1) for i in group)
    return f"{mode.upper()} {what} ({m} {noun}{which})"


def train_bases(config: PipelineConfig, record: ExperimentRecord, data: Mapping[str, Dataset],
                indices: Sequence[int], bases: Optional[Mapping[str, Checkpoint]] = None) -> List[str]:
    """Train (or adopt from ``bases``) the requested base models; returns their names."""
    names = []
    for i in indices:
        name = config.bases[i].name
        if name not in record.checkpoints:
            if bases is not None and name in bases:
                ckpt = Checkpoint(bases[name].model, dict(bases[name].metadata))
            else:
                log.info("training %s", name)
                ckpt = train_base(config, base_training_set(config, i, data["train"]), data["dev"], i)
            record.add_checkpoint(name, ckpt)
        names.append(name)
    return names


def iterate_finetune(config: PipelineConfig, record: ExperimentRecord, producers: Sequence[str],
                     dataset_name: str, test_audio: Dataset, tag: str) -> str:
    """Fine-tune ``producers[0]`` on hypotheses from all ``producers``.

    With two iterations every producer is fine-tuned in iteration 1 and the
    fine-tuned models re-decode the audio for iteration 2, in which only the
    first model is fine-tuned again. Returns the final checkpoint name.
    """
    unlabeled = strip_labels(test_audio)
    current = list(producers)
    for it in range(1, config.iterations + 1):
        decoded = [record.decode(name, dataset_name, unlabeled) for name in current]
        sets = pseudo_label([record.checkpoints[n] for n in current], unlabeled, config.beam, decoded)
        targets = current[:1] if it == config.iterations else current
        next_names = []
        for j, name in enumerate(targets):
            new_name = f"{tag}-ft{it}.{producers[j]}"
            ckpt = finetune(record.checkpoints[name], unlabeled, sets, config,
                            seed_key=f"{dataset_name}:{tag}:{it}:{j}")
            record.add_checkpoint(new_name, ckpt)
            record.pseudo_labels.append({
                "dataset": dataset_name, "iteration": it, "finetuned": new_name,
                "producers": list(current),
            })
            next_names.append(new_name)
        current = next_names
    return current[0]


def run_finetune(config: PipelineConfig, modes: Optional[Sequence[str]] = None,
                 bases: Optional[Mapping[str, Checkpoint]] = None,
                 run_dir=None) -> ExperimentRecord:
    """Base models, then SH and/or MH fine-tuning on each test condition.

    Rows are the participating base models followed by one row per
    fine-tuning run (and per iteration when there are two).
    """
    modes = tuple(modes or (config.mode,))
    for m in modes:
        if m not in MODES:
            raise ValidationError(f"unknown mode {m!r}")
    record = ExperimentRecord(config, kind="finetune")
    data = build_datasets(config)
    runs = [(m, g) for m in modes for g in config.groups(m)]
    needed = sorted({i for _, g in runs for i in g})
    train_bases(config, record, data, needed, bases)
    for cond in config.test_conditions:
        ds_name = test_set_name(cond)
        ds = data[ds_name]
        for i in needed:
            record.evaluate(_base_method(config, i), config.bases[i].name, ds_name, ds, cond)
        for mode, group in runs:
            tag = _group_tag(mode, group)
            producers = [config.bases[i].name for i in group]
            final = iterate_finetune(config, record, producers, ds_name, ds, f"{cond}.{tag}")
            label = _method_label("finetune", mode, group)
            if config.iterations == 2:
                record.evaluate(f"{label}, iteration 1", f"{cond}.{tag}-ft1.{producers[0]}", ds_name, ds, cond)
                label += ", iteration 2"
            record.evaluate(label, final, ds_name, ds, cond)
    if run_dir is not None:
        save_record(record, run_dir)
    return record


def selftrain(config: PipelineConfig, record: ExperimentRecord, producers: Sequence[str],
              labeled_train: Dataset, unlabeled_extra: Dataset, dev: Optional[Dataset], name: str,
              labels: Optional[Mapping[str, Sequence[int]]] = None) -> Checkpoint:
    """Train a fresh model on labeled data pooled with pseudo-labeled extra data.

    The fresh model starts from base model 1's initialization and seed, so
    with no extra data the result equals base model 1. ``labels`` replaces
    the pseudo-labels with true transcripts (the supervised upper bound).
    """
    ids = set(labeled_train.ids)
    overlap = [uid for uid in unlabeled_extra.ids if uid in ids]
    if overlap:
        raise ContractViolation(f"labeled and unlabeled data share ids, e.g. {overlap[0]!r}")
    if labels is not None:
        missing = [uid for uid in unlabeled_extra.ids if uid not in labels]
        if missing:
            raise PairingError(f"no transcript for {len(missing)} extra utterances, e.g. {missing[0]!r}")
        extra_targets = [tuple(labels[uid]) for uid in unlabeled_extra.ids]
    elif len(unlabeled_extra):
        decoded = [record.decode(p, "unlabeled", unlabeled_extra) for p in producers]
        sets = pseudo_label([record.checkpoints[p] for p in producers], unlabeled_extra, config.beam, decoded)
        extra_targets = _targets_for(unlabeled_extra, sets)
        record.pseudo_labels.append({"dataset": "unlabeled", "iteration": 1, "finetuned": name,
                                     "producers": list(producers)})
    else:
        extra_targets = []
    features = labeled_train.features + unlabeled_extra.features
    targets = list(labeled_train.labels) + extra_targets
    result = _fit(init_model(base_model_config(config, 0)), features, targets,
                  config.selftrain_schedule, derive_seed(config.seed, "train", 0), dev)
    meta = {"stage": "selftrain", "producers": list(producers) if labels is None else ["reference"],
            "history": result.history, "best_epoch": result.best_epoch,
            "pooled_utterances": len(features)}
    return record.add_checkpoint(name, Checkpoint(result.model, meta))


def run_selftrain(config: PipelineConfig, modes: Optional[Sequence[str]] = None,
                  supervised: bool = True, bases: Optional[Mapping[str, Checkpoint]] = None,
                  run_dir=None) -> ExperimentRecord:
    """Base models, SH/MH self-training and the supervised upper bound."""
    modes = tuple(modes or (config.mode,))
    record = ExperimentRecord(config, kind="selftrain")
    data = build_datasets(config)
    unlabeled, withheld = build_unlabeled(config)
    runs = [(m, g) for m in modes for g in config.groups(m)]
    needed = sorted({i for _, g in runs for i in g})
    train_bases(config, record, data, needed, bases)
    rows = [(_base_method(config, i), config.bases[i].name) for i in needed]
    for mode, group in runs:
        producers = [config.bases[i].name for i in group]
        name = f"{_group_tag(mode, group)}-selftrain"
        selftrain(config, record, producers, data["train"], unlabeled, data["dev"], name)
        rows.append((_method_label("selftrain", mode, group), name))
    if supervised:
        selftrain(config, record, [], data["train"], unlabeled, data["dev"], "supervised", labels=withheld)
        rows.append(("Supervised training", "supervised"))
    for cond in config.test_conditions:
        ds_name = test_set_name(cond)
        for method, name in rows:
            record.evaluate(method, name, ds_name, data[ds_name], cond)
    if run_dir is not None:
        save_record(record, run_dir)
    return record


# -- reports -------------------------------------------------------------------

@dataclass
class ReportBundle:
    """Rows are methods, columns conditions, cells pooled WER in percent."""

    kind: str
    conditions: List[str]
    rows: Dict[str, Dict[str, float]]
    reports: List[ScoreReport]
    config_hash: str = ""

    def render(self) -> str:
        lines = [f"# table={self.kind}\tconfig_hash={self.config_hash}\tunit=WER%"]
        lines.append("\t".join(["method"] + self.conditions))
        for method, cells in self.rows.items():
            vals = [f"{cells[c]:.2f}" if c in cells else "-" for c in self.conditions]
            lines.append("\t".join([method] + vals))
        return "\n".join(lines) + "\n"


def run_report(record: ExperimentRecord) -> ReportBundle:
    """Tabulate every result row of ``record``, re-scoring from its hypotheses."""
    if record is None or not record.results:
        raise IncompleteRecord("record has no scored results")
    conditions = list(dict.fromkeys(r.condition for r in record.results))
    rows: Dict[str, Dict[str, float]] = {}
    reports = []
    for r in record.results:
        key = (r.dataset, r.checkpoint)
        if key not in record.hypotheses or r.dataset not in record.references:
            raise IncompleteRecord(f"no hypotheses or references for {r.checkpoint} on {r.dataset}")
        report = score_set(record.references[r.dataset], record.hypotheses[key],
                           condition=r.condition, model_id=r.checkpoint, stage=r.method)
        rows.setdefault(r.method, {})[r.condition] = report.wer
        reports.append(report)
    return ReportBundle(record.kind, conditions, rows, reports, record.config.config_hash())


# -- persistence -------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _safe(name: str) -> str:
    return name.replace("/", "_")


def write_references(path, refs: Mapping[str, Sequence[int]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("#utt_id\tlabels\n")
        for uid in sorted(refs):
            f.write(f"{uid}\t{' '.join(map(str, refs[uid]))}\n")
    return path


def read_references(path) -> Dict[str, Tuple[int, ...]]:
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            uid, sep, labels = line.partition("\t")
            if not sep:
                raise DataFormatError(f"{path}:{lineno}: expected 2 fields")
            out[uid] = tuple(int(x) for x in labels.split())
    return out


def write_manifest(run_dir, command: str, config: Optional[PipelineConfig], extra: Optional[dict] = None) -> Path:
    """``manifest.json`` listing every file under ``run_dir`` with its sha256.

    Contains no timestamps or host details, so identical runs write
    identical manifests.
    """
    from . import __version__

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    artifacts = [
        {"path": str(p.relative_to(run_dir)), "sha256": _sha256(p)}
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp")
    ]
    manifest = {
        "tool": _pkg,
        "version": __version__,
        "command": command,
        "config": None if config is None else config.to_dict(),
        "config_hash": None if config is None else config.config_hash(),
        "seed": None if config is None else config.seed,
        "artifacts": artifacts,
        **(extra or {}),
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def save_record(record: ExperimentRecord, run_dir) -> Path:
    """Write checkpoints, hypothesis files, references, reports and an index."""
    run_dir = Path(run_dir)
    index = {"kind": record.kind, "config": record.config.to_dict(), "checkpoints": {},
             "hypotheses": [], "references": {}, "results": [], "pseudo_labels": record.pseudo_labels}
    for name, ckpt in record.checkpoints.items():
        rel = f"checkpoints/{_safe(name)}.ckpt"
        save_checkpoint(ckpt.model, run_dir / rel, ckpt.metadata)
        index["checkpoints"][name] = rel
    for (ds, producer), hyps in record.hypotheses.items():
        rel = f"hyps/{ds}/{_safe(producer)}.tsv"
        write_hypotheses(run_dir / rel, hyps)
        index["hypotheses"].append({"dataset": ds, "producer": producer, "path": rel})
    for ds, refs in record.references.items():
        rel = f"refs/{ds}.tsv"
        write_references(run_dir / rel, refs)
        index["references"][ds] = rel
    for r in record.results:
        rel = f"reports/{r.dataset}/{_safe(r.checkpoint)}.tsv"
        write_report(r.report, run_dir / rel)
        index["results"].append({"method": r.method, "condition": r.condition, "dataset": r.dataset,
                                 "checkpoint": r.checkpoint, "report": rel, "wer": r.wer})
    (run_dir / "record.json").write_text(json.dumps(index, indent=2) + "\n")
    if record.results:
        (run_dir / "summary.tsv").write_text(run_report(record).render())
    write_manifest(run_dir, record.kind, record.config)
    return run_dir


def load_record(run_dir) -> ExperimentRecord:
    run_dir = Path(run_dir)
    path = run_dir / "record.json"
    if not path.exists():
        raise IncompleteRecord(f"{run_dir} has no record.json")
    try:
        index = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    config = PipelineConfig.from_dict(index["config"])
    record = ExperimentRecord(config, kind=index.get("kind", ""), pseudo_labels=index.get("pseudo_labels", []))
    for name, rel in index["checkpoints"].items():
        record.checkpoints[name] = read_checkpoint(run_dir / rel)
    for h in index["hypotheses"]:
        record.hypotheses[(h["dataset"], h["producer"])] = read_hypotheses(run_dir / h["path"])
    for ds, rel in index["references"].items():
        record.references[ds] = read_references(run_dir / rel)
    for r in index["results"]:
        refs = record.references.get(r["dataset"])
        hyps = record.hypotheses.get((r["dataset"], r["checkpoint"]))
        if refs is None or hyps is None:
            raise IncompleteRecord(f"result {r['method']!r} lacks its hypotheses or references")
        report = score_set(refs, hyps, r["condition"], r["checkpoint"], r["method"])
        record.results.append(ResultRow(r["method"], r["condition"], r["dataset"], r["checkpoint"], report))
    return record


def save_datasets(config: PipelineConfig, out_dir) -> Dict[str, Path]:
    """Materialize every dataset a pipeline would generate under ``out_dir/data``."""
    out_dir = Path(out_dir)
    data = build_datasets(config)
    unlabeled, withheld = build_unlabeled(config)
    paths = {name: save_dataset(ds, out_dir / "data" / name) for name, ds in data.items()}
    paths["unlabeled"] = save_dataset(unlabeled, out_dir / "data" / "unlabeled")
    write_references(out_dir / "data" / "unlabeled" / "withheld_labels.tsv", withheld)
    for i, b in enumerate(config.bases):
        if b.speed_factors != (1.0,):
            name = f"train-{b.name}"
            paths[name] = save_dataset(base_training_set(config, i), out_dir / "data" / name)
    return paths
