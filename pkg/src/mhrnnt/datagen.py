"""Deterministic synthetic corpora of (feature sequence, transcript) pairs.

Every label owns a fixed prototype vector. An utterance is a label string;
each label is rendered as ``round(k * s)`` frames of its prototype plus the
condition's channel shift plus Gaussian noise, where ``k`` is the nominal
frames-per-label and ``s`` a speed factor. Adjacent labels are never equal,
so a label change is always visible in the features.

Randomness is derived per utterance from ``(seed, split, condition, index,
speed)``; generating utterances in any order gives the same corpus.
"""

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ContractViolation, DataFormatError, PairingError, ValidationError

FORMAT_TAG = "mhrnnt-dataset"
FORMAT_VERSION = 1
SPLITS = ("train", "dev", "test", "unlabeled")


@dataclass(frozen=True)
class Condition:
    noise_sigma: float = 0.0
    # magnitude of a seed-derived direction, or an explicit vector
    channel_shift: Union[float, Tuple[float, ...]] = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not isinstance(self.channel_shift, (int, float)):
            object.__setattr__(self, "channel_shift", tuple(float(v) for v in self.channel_shift))


DEFAULT_CONDITIONS = {
    "clean": Condition(noise_sigma=0.4, channel_shift=0.0),
    "noisy": Condition(noise_sigma=0.6, channel_shift=1.0),
}


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 12
    feat_dim: int = 8
    utterance_count: int = 100
    min_len: int = 3
    max_len: int = 6
    frames_per_label: int = 4
    speed_factors: Tuple[float, ...] = (1.0,)
    conditions: Mapping[str, Condition] = field(default_factory=lambda: dict(DEFAULT_CONDITIONS))
    prototype_scale: float = 1.0
    # frames of silence (zero prototype) appended after the last label
    trailing_silence: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValidationError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.frames_per_label < 1:
            raise ValidationError("frames_per_label must be >= 1")
        if self.vocab_size < 2:
            raise ValidationError("vocab_size must be >= 2 (adjacent labels differ)")
        if self.trailing_silence < 0:
            raise ValidationError("trailing_silence must be >= 0")
        if self.utterance_count < 0:
            raise ValidationError("utterance_count must be >= 0")
        if any(s <= 0 for s in self.speed_factors):
            raise ValidationError(f"speed factors must be positive: {self.speed_factors}")
        object.__setattr__(self, "speed_factors", tuple(float(s) for s in self.speed_factors))
        conds = {}
        for name, cond in dict(self.conditions).items():
            conds[name] = cond if isinstance(cond, Condition) else Condition(**cond)
        object.__setattr__(self, "conditions", conds)

    @classmethod
    def from_dict(cls, data: Mapping) -> "CorpusSpec":
        data = dict(data)
        if "speed_factors" in data:
            data["speed_factors"] = tuple(data["speed_factors"])
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["speed_factors"] = list(self.speed_factors)
        out["conditions"] = {
            k: {"noise_sigma": c.noise_sigma,
                "channel_shift": c.channel_shift if isinstance(c.channel_shift, (int, float))
                else list(c.channel_shift)}
            for k, c in self.conditions.items()
        }
        return out

    def replace(self, **changes) -> "CorpusSpec":
        return replace(self, **changes)


@dataclass
class Utterance:
    id: str
    condition: str
    features: np.ndarray  # (T, d) float32
    labels: Optional[Tuple[int, ...]] = None

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    utterances: List[Utterance]
    split: str = "train"

    def __post_init__(self):
        ids = [u.id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise ValidationError("utterance ids must be unique")
        if self.split == "unlabeled" and any(u.labels is not None for u in self.utterances):
            raise ValidationError("an unlabeled split cannot carry transcripts")

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def ids(self) -> List[str]:
        return [u.id for u in self.utterances]

    @property
    def features(self) -> List[np.ndarray]:
        return [u.features for u in self.utterances]

    @property
    def labels(self) -> List[Optional[Tuple[int, ...]]]:
        return [u.labels for u in self.utterances]

    def label_map(self) -> Dict[str, Tuple[int, ...]]:
        return {u.id: u.labels for u in self.utterances if u.labels is not None}

    def is_labeled(self) -> bool:
        return all(u.labels is not None for u in self.utterances)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for u in self.utterances:
            h.update(u.id.encode())
            h.update(np.ascontiguousarray(u.features, dtype="<f4").tobytes())
            h.update(repr(u.labels).encode())
        return h.hexdigest()[:16]

    def concat(self, other: "Dataset", split: Optional[str] = None) -> "Dataset":
        return Dataset(self.utterances + other.utterances, split or self.split)


def _name_code(name: str) -> int:
    return zlib.crc32(name.encode())


def prototypes(spec: CorpusSpec) -> np.ndarray:
    """(V, d) prototype matrix; row ``k - 1`` belongs to label ``k``."""
    rng = np.random.default_rng([spec.seed, _name_code("prototypes")])
    protos = rng.normal(size=(spec.vocab_size, spec.feat_dim)) * spec.prototype_scale
    diffs = protos[:, None, :] - protos[None, :, :]
    dist = np.sqrt((diffs ** 2).sum(-1)) + np.eye(spec.vocab_size)
    if dist.min() <= 0:
        raise ValidationError("prototype draw produced coincident prototypes")
    return protos


def channel_shift(spec: CorpusSpec, condition: str) -> np.ndarray:
    cond = spec.conditions[condition]
    if isinstance(cond.channel_shift, (int, float)):
        rng = np.random.default_rng([spec.seed, _name_code("shift"), _name_code(condition)])
        direction = rng.normal(size=spec.feat_dim)
        return float(cond.channel_shift) * direction / np.linalg.norm(direction)
    vec = np.asarray(cond.channel_shift, dtype=np.float64)
    if vec.shape != (spec.feat_dim,):
        raise ValidationError(f"channel_shift for {condition} must have length {spec.feat_dim}")
    return vec


def frames_for_speed(frames_per_label: int, speed: float) -> int:
    """Per-label frame count under a speed factor (round half up, at least 1)."""
    return max(1, int(np.floor(frames_per_label * speed + 0.5)))


def sample_labels(rng, spec: CorpusSpec) -> Tuple[int, ...]:
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    labels = [int(rng.integers(1, spec.vocab_size + 1))]
    for _ in range(length - 1):
        # uniform over the V - 1 labels that differ from the previous one
        nxt = int(rng.integers(1, spec.vocab_size))
        labels.append(nxt + 1 if nxt >= labels[-1] else nxt)
    return tuple(labels)


def render(spec: CorpusSpec, labels: Sequence[int], condition: str, speed: float, rng) -> np.ndarray:
    protos = prototypes(spec)
    cond = spec.conditions[condition]
    n = frames_for_speed(spec.frames_per_label, speed)
    clean = np.repeat(protos[np.asarray(labels) - 1], n, axis=0)
    if spec.trailing_silence:
        clean = np.vstack([clean, np.zeros((spec.trailing_silence, spec.feat_dim))])
    noise = rng.normal(size=clean.shape) * cond.noise_sigma
    return (clean + channel_shift(spec, condition) + noise).astype(np.float32)


def generate_utterance(spec: CorpusSpec, split: str, condition: str, index: int,
                       speed_index: int = 0, keep_labels: Optional[bool] = None) -> Utterance:
    label_rng = np.random.default_rng([spec.seed, _name_code(split), _name_code(condition), index])
    labels = sample_labels(label_rng, spec)
    speed = spec.speed_factors[speed_index]
    noise_rng = np.random.default_rng(
        [spec.seed, _name_code(split), _name_code(condition), index, speed_index, 1]
    )
    feats = render(spec, labels, condition, speed, noise_rng)
    uid = f"{split}-{condition}-{index:05d}"
    if len(spec.speed_factors) > 1:
        uid += f"-sp{speed:g}"
    if keep_labels is None:
        keep_labels = split != "unlabeled"
    return Utterance(uid, condition, feats, labels if keep_labels else None)


def generate(spec: CorpusSpec, split: str, condition: str = "clean") -> Dataset:
    """Generate ``utterance_count`` utterances (times the number of speed factors)."""
    if split not in SPLITS:
        raise ValidationError(f"unknown split {split!r}; expected one of {SPLITS}")
    if condition not in spec.conditions:
        raise ValidationError(f"unknown condition {condition!r}")
    utts = [
        generate_utterance(spec, split, condition, i, s)
        for i in range(spec.utterance_count)
        for s in range(len(spec.speed_factors))
    ]
    return Dataset(utts, split)


def generate_with_labels(spec: CorpusSpec, condition: str) -> Tuple[Dataset, Dict[str, Tuple[int, ...]]]:
    """The ``unlabeled`` split plus its withheld reference transcripts."""
    full = Dataset([
        generate_utterance(spec, "unlabeled", condition, i, s, keep_labels=True)
        for i in range(spec.utterance_count)
        for s in range(len(spec.speed_factors))
    ], "test")
    return strip_labels(full), full.label_map()


def strip_labels(dataset: Dataset) -> Dataset:
    """Copy of ``dataset`` with every transcript removed; input is untouched."""
    return Dataset(
        [Utterance(u.id, u.condition, u.features, None) for u in dataset.utterances],
        "unlabeled",
    )


def attach_labels(dataset: Dataset, labels: Mapping[str, Sequence[int]], split: str = "train") -> Dataset:
    """Re-pair a stripped dataset with transcripts by utterance id."""
    missing = [u.id for u in dataset.utterances if u.id not in labels]
    if missing:
        raise PairingError(f"no transcript for {len(missing)} utterances, e.g. {missing[0]}")
    return Dataset(
        [Utterance(u.id, u.condition, u.features, tuple(int(x) for x in labels[u.id]))
         for u in dataset.utterances],
        split,
    )


def nearest_prototype_accuracy(spec: CorpusSpec, dataset: Dataset, condition: str = None) -> float:
    """Fraction of frames whose nearest (shift-corrected) prototype is the true label."""
    protos = prototypes(spec)
    hits = total = 0
    for u in dataset:
        n = frames_for_speed(spec.frames_per_label, 1.0)
        truth = np.repeat(np.asarray(u.labels), n)
        x = u.features[:truth.size].astype(np.float64) - channel_shift(spec, condition or u.condition)
        d2 = ((x[:, None, :] - protos[None, :, :]) ** 2).sum(-1)
        hits += int((d2.argmin(1) + 1 == truth).sum())
        total += truth.size
    return hits / total


# -- file format -----------------------------------------------------------

def save_dataset(dataset: Dataset, directory) -> Path:
    """Write ``records.jsonl`` and ``features.bin`` under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    offset = 0
    with open(directory / "features.bin", "wb") as blob, open(directory / "records.jsonl", "w") as rec:
        rec.write(json.dumps({"format": FORMAT_TAG, "version": FORMAT_VERSION, "split": dataset.split}) + "\n")
        for u in dataset.utterances:
            feats = np.ascontiguousarray(u.features, dtype="<f4")
            T, d = feats.shape
            blob.write(struct.pack("<ii", T, d))
            blob.write(feats.tobytes())
            rec.write(json.dumps({
                "id": u.id,
                "condition": u.condition,
                "labels": None if u.labels is None else " ".join(map(str, u.labels)),
                "offset": offset,
            }) + "\n")
            offset += 8 + feats.nbytes
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    blob = (directory / "features.bin").read_bytes()
    with open(directory / "records.jsonl") as f:
        header = json.loads(f.readline())
        if header.get("format") != FORMAT_TAG:
            raise DataFormatError(f"{directory} is not a dataset directory")
        if header.get("version") != FORMAT_VERSION:
            raise ContractViolation(f"dataset version {header.get('version')} is not supported")
        utts = []
        for line in f:
            if not line.strip():
                continue
            r = json.loads(line)
            off = r["offset"]
            if off + 8 > len(blob):
                raise DataFormatError(f"feature blob truncated at {r['id']}")
            T, d = struct.unpack_from("<ii", blob, off)
            end = off + 8 + 4 * T * d
            if end > len(blob):
                raise DataFormatError(f"feature blob truncated at {r['id']}")
            feats = np.frombuffer(blob[off + 8:end], dtype="<f4").reshape(T, d).astype(np.float32)
            labels = None if r["labels"] is None else tuple(int(x) for x in r["labels"].split())
            utts.append(Utterance(r["id"], r["condition"], feats, labels))
    return Dataset(utts, header["split"])


def iter_batches(n: int, batch_size: int, rng) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
