"""Deterministic SGD training, checkpoints and loss logs."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, StandardizationStats, Vocabulary
from .model import ImaginetParams, init_params, loss

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
F32_MAX = float(np.finfo(np.float32).max)


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch, last_good: ImaginetParams, checkpoint=None):
        super().__init__(f"loss became non-finite at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.last_good = last_good
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    seed: int = 0
    hidden: int = 256
    emb: int = 256
    alpha: float = 0.5
    lr: float = 0.5
    batch_size: int = 16
    epochs: int = 10
    clip: float = 5.0
    checkpoint_dir: str | None = None
    visual_encoder: str = "gru"
    min_count: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        for name in ("hidden", "emb", "batch_size", "epochs", "min_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.clip <= 0 or self.lr <= 0:
            raise ValueError("clip and lr must be positive")


@dataclass
class EpochLoss:
    epoch: int
    total: float
    textual: float
    visual: float


@dataclass
class TrainResult:
    params: ImaginetParams
    history: list[EpochLoss] = field(default_factory=list)


def clip_gradients(grads: dict[str, np.ndarray], threshold: float) -> float:
    """Rescale ``grads`` in place to global norm <= threshold; return the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if norm > threshold:
        scale = threshold / norm
        for g in grads.values():
            g *= scale
    return norm


def sgd_step(params: ImaginetParams, grads: dict[str, np.ndarray], lr: float) -> None:
    for name, tensor in params.named_tensors().items():
        tensor -= lr * grads[name]


def train(config: TrainConfig, corpus: Corpus, params: ImaginetParams | None = None) -> TrainResult:
    if corpus.features is None:
        raise ValueError("training needs feature vectors for every sentence")
    sids = [s.sid for s in corpus.sentences]
    missing = [s for s in sids if s not in corpus.features]
    if missing:
        raise ValueError(f"no feature vector for {missing[:5]}")
    if params is None:
        params = init_params(
            len(corpus.vocab), config.emb, config.hidden, corpus.features.dim,
            alpha=config.alpha, seed=config.seed, visual_encoder=config.visual_encoder,
        )
    encoded = {s: corpus.vocab.encode(corpus.sentence(s)) for s in sids}
    shuffle_rng = np.random.default_rng([config.seed, 1])
    result = TrainResult(params)
    last_good = params.copy()
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(sids))
        sums = np.zeros(3)
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = [sids[i] for i in order[start:start + config.batch_size]]
            batch = [(encoded[s], corpus.features[s]) for s in chunk]
            res = loss(params, batch)
            ok = np.isfinite(res.total) and all(np.all(np.isfinite(g)) for g in res.grads.values())
            if ok:
                clip_gradients(res.grads, config.clip)
                sgd_step(params, res.grads, config.lr)
                # parameters must stay storable as float32
                ok = all(np.all(np.abs(t) <= F32_MAX) for t in params.named_tensors().values())
            if not ok:
                ckpt = None
                if config.checkpoint_dir:
                    ckpt = save(last_good, config, config.checkpoint_dir, corpus.vocab, corpus.stats)
                raise TrainingDiverged(epoch, b, last_good, ckpt)
            sums += len(chunk) * np.array([res.total, res.textual, res.visual])
        mean = sums / len(sids)
        result.history.append(EpochLoss(epoch, *map(float, mean)))
        log.info("epoch %d  L=%.5f  LT=%.5f  LV=%.5f", epoch, *mean)
        last_good = params.copy()
    if config.checkpoint_dir:
        save(params, config, config.checkpoint_dir, corpus.vocab, corpus.stats)
    return result


def write_loss_log(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "L", "LT", "LV"])
        for row in history:
            w.writerow([row.epoch, repr(row.total), repr(row.textual), repr(row.visual)])


def read_loss_log(path) -> list[EpochLoss]:
    with open(path, encoding="utf-8") as fh:
        return [
            EpochLoss(int(r["epoch"]), float(r["L"]), float(r["LT"]), float(r["LV"]))
            for r in csv.DictReader(fh)
        ]


# -- checkpoints ------------------------------------------------------------


def save(params: ImaginetParams, config: TrainConfig, path, vocab: Vocabulary,
         stats: StandardizationStats | None = None) -> Path:
    """Write ``manifest.json`` + ``tensors.bin`` (little-endian float32) under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in params.named_tensors().items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32-le",
        "alpha": params.alpha,
        "visual_encoder": params.visual_encoder,
        "config": asdict(config),
        "vocabulary": vocab.forms,
        "feature_stats": None if stats is None else {
            "mean": [float(x) for x in stats.mean], "std": [float(x) for x in stats.std],
        },
        "tensors": entries,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (path / BLOB).write_bytes(b"".join(chunks))
    return path


@dataclass
class Checkpoint:
    params: ImaginetParams
    config: TrainConfig
    vocab: Vocabulary
    stats: StandardizationStats | None


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path / MANIFEST}: {exc}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r}")
    blob = (path / BLOB).read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape))
        start = entry["offset"]
        if entry["nbytes"] != nbytes or start + nbytes > len(blob):
            raise CheckpointError(
                f"tensor {entry['name']!r}: blob holds {max(0, len(blob) - start)} bytes "
                f"at offset {start}, manifest needs {nbytes}"
            )
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape)
    if manifest["tensors"]:
        last = manifest["tensors"][-1]
        if last["offset"] + last["nbytes"] != len(blob):
            raise CheckpointError(f"blob has {len(blob)} bytes, manifest describes {last['offset'] + last['nbytes']}")
    params = ImaginetParams.from_tensors(tensors, manifest["alpha"], manifest["visual_encoder"])
    fs = manifest.get("feature_stats")
    stats = None if fs is None else StandardizationStats(np.array(fs["mean"]), np.array(fs["std"]))
    return Checkpoint(params, TrainConfig(**manifest["config"]), Vocabulary(manifest["vocabulary"]), stats)
