"""Annotated sentences, feature vectors, vocabulary and the synthetic micro-world."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

END_FORM = "<end>"
END_POS = "END"
END_DEPREL = "end"
UNK_FORM = "<unk>"

POSITION_BINS = ("first", "second", "third", "middle", "antepenult", "penult", "last")


class CorpusError(ValueError):
    """Malformed or inconsistent corpus input."""


@dataclass(frozen=True)
class Token:
    form: str
    pos: str
    deprel: str
    index: int
    position_bin: str | None  # None for the end marker

    @property
    def is_end(self) -> bool:
        return self.position_bin is None


@dataclass(frozen=True)
class AnnotatedSentence:
    sid: str
    tokens: tuple[Token, ...]  # content tokens followed by the end marker

    @property
    def content(self) -> tuple[Token, ...]:
        return self.tokens[:-1]

    @property
    def forms(self) -> list[str]:
        return [t.form for t in self.tokens]

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_triples(cls, sid: str, triples: Sequence[tuple[str, str, str]]) -> "AnnotatedSentence":
        if not triples:
            raise CorpusError(f"sentence {sid!r} has no tokens")
        n = len(triples)
        toks = [
            Token(form, pos, deprel, i, position_bin(i, n))
            for i, (form, pos, deprel) in enumerate(triples)
        ]
        toks.append(Token(END_FORM, END_POS, END_DEPREL, n, None))
        return cls(sid, tuple(toks))

    def without(self, i: int) -> "AnnotatedSentence":
        """The sentence with content token ``i`` removed (bins are recomputed)."""
        content = self.content
        if not 0 <= i < len(content):
            raise IndexError(f"no content token {i} in sentence {self.sid!r}")
        rest = [(t.form, t.pos, t.deprel) for j, t in enumerate(content) if j != i]
        if not rest:
            # only the end marker remains
            return AnnotatedSentence(self.sid, (Token(END_FORM, END_POS, END_DEPREL, 0, None),))
        return AnnotatedSentence.from_triples(self.sid, rest)


def position_bin(index: int, length: int) -> str:
    """Coarse position of a content token.

    End-relative bins win collisions on short sentences, in the order
    last > penult > antepenult > first > second > third > middle.
    """
    if not 0 <= index < length:
        raise IndexError(f"index {index} out of range for length {length}")
    from_end = length - 1 - index
    if from_end == 0:
        return "last"
    if from_end == 1:
        return "penult"
    if from_end == 2:
        return "antepenult"
    if index == 0:
        return "first"
    if index == 1:
        return "second"
    if index == 2:
        return "third"
    return "middle"


# -- annotation files -------------------------------------------------------


def load_annotated(path) -> list[AnnotatedSentence]:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise CorpusError(f"{path}: empty annotation file")
    sentences: list[AnnotatedSentence] = []
    seen: set[str] = set()
    sid: str | None = None
    triples: list[tuple[str, str, str]] = []
    header_line = 0

    def flush():
        nonlocal sid, triples
        if sid is None:
            return
        if not triples:
            raise CorpusError(f"{path}:{header_line}: sentence {sid!r} has no tokens")
        sentences.append(AnnotatedSentence.from_triples(sid, triples))
        sid, triples = None, []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if not body.startswith("id"):
                continue
            key, sep, value = body.partition("=")
            if not sep or key.strip() != "id" or not value.strip():
                raise CorpusError(f"{path}:{lineno}: malformed sentence header {line!r}")
            flush()
            sid = value.strip()
            if sid in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate sentence id {sid!r}")
            seen.add(sid)
            header_line = lineno
            continue
        if sid is None:
            raise CorpusError(f"{path}:{lineno}: token line outside a sentence (missing '# id = ...')")
        cols = line.split("\t")
        if len(cols) != 3 or not all(c.strip() for c in cols):
            raise CorpusError(
                f"{path}:{lineno}: expected FORM<TAB>POS<TAB>DEPREL, got {len(cols)} column(s)"
            )
        triples.append(tuple(c.strip() for c in cols))
    flush()
    if not sentences:
        raise CorpusError(f"{path}: no sentences found")
    return sentences


def write_annotated(path, sentences: Iterable[AnnotatedSentence]) -> None:
    lines = []
    for s in sentences:
        lines.append(f"# id = {s.sid}")
        lines.extend(f"{t.form}\t{t.pos}\t{t.deprel}" for t in s.content)
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


# -- feature files ----------------------------------------------------------


@dataclass
class FeatureTable:
    ids: list[str]
    values: np.ndarray  # (n, dim) float64

    def __post_init__(self):
        self._row = {sid: i for i, sid in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __getitem__(self, sid: str) -> np.ndarray:
        return self.values[self._row[sid]]

    def __contains__(self, sid: str) -> bool:
        return sid in self._row

    def rows(self, sids: Sequence[str]) -> np.ndarray:
        return self.values[[self._row[s] for s in sids]]


def load_features(path, ids: Iterable[str] | None = None) -> FeatureTable:
    known = set(ids) if ids is not None else None
    out_ids: list[str] = []
    rows: list[list[float]] = []
    dim = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        sid, sep, rest = raw.partition("\t")
        if not sep:
            raise CorpusError(f"{path}:{lineno}: expected <id><TAB><floats>")
        sid = sid.strip()
        if known is not None and sid not in known:
            raise CorpusError(f"{path}:{lineno}: unknown id {sid!r}")
        if sid in out_ids:
            raise CorpusError(f"{path}:{lineno}: duplicate id {sid!r}")
        try:
            vec = [float(x) for x in rest.split()]
        except ValueError as exc:
            raise CorpusError(f"{path}:{lineno}: non-numeric field ({exc})") from None
        if not vec:
            raise CorpusError(f"{path}:{lineno}: empty feature vector")
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise CorpusError(f"{path}:{lineno}: dimension {len(vec)} differs from {dim}")
        out_ids.append(sid)
        rows.append(vec)
    if not rows:
        raise CorpusError(f"{path}: no feature vectors")
    return FeatureTable(out_ids, np.array(rows, dtype=np.float64))


def write_features(path, table: FeatureTable) -> None:
    # repr() of a Python float round-trips exactly
    lines = [
        sid + "\t" + " ".join(repr(float(x)) for x in row)
        for sid, row in zip(table.ids, table.values)
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return self.mean + self.std * values


def standardize(values: np.ndarray, fit_rows=None) -> tuple[np.ndarray, StandardizationStats]:
    """Z-score every column with statistics taken from ``fit_rows`` only."""
    values = np.asarray(values, dtype=np.float64)
    fit = values if fit_rows is None else values[fit_rows]
    if fit.shape[0] == 0:
        raise CorpusError("standardize: empty fit split")
    mean = fit.mean(axis=0)
    std = fit.std(axis=0)
    bad = np.flatnonzero(std == 0)
    if bad.size:
        raise CorpusError(f"standardize: zero variance in dimension(s) {bad.tolist()}")
    stats = StandardizationStats(mean, std)
    return stats.apply(values), stats


# -- vocabulary -------------------------------------------------------------


@dataclass
class Vocabulary:
    forms: list[str]  # id -> form; 0 is <unk>, 1 is <end>
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.forms[:2] != [UNK_FORM, END_FORM]:
            raise CorpusError("vocabulary must start with the reserved <unk>, <end> forms")
        self.index = {f: i for i, f in enumerate(self.forms)}

    def __len__(self) -> int:
        return len(self.forms)

    @property
    def unk_id(self) -> int:
        return 0

    @property
    def end_id(self) -> int:
        return 1

    def id(self, form: str) -> int:
        return self.index.get(form, 0)

    def encode(self, sentence: AnnotatedSentence) -> np.ndarray:
        return np.array([self.id(t.form) for t in sentence.tokens], dtype=np.int64)


def build_vocab(sentences: Iterable[AnnotatedSentence], min_count: int = 1) -> Vocabulary:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(t.form for s in sentences for t in s.content)
    kept = sorted(f for f, c in counts.items() if c >= min_count and f not in (UNK_FORM, END_FORM))
    return Vocabulary([UNK_FORM, END_FORM] + kept)


# -- corpus -----------------------------------------------------------------


@dataclass
class Corpus:
    sentences: list[AnnotatedSentence]
    vocab: Vocabulary
    features: FeatureTable | None = None  # standardized
    stats: StandardizationStats | None = None

    def __post_init__(self):
        self._by_id = {s.sid: s for s in self.sentences}

    def sentence(self, sid: str) -> AnnotatedSentence:
        return self._by_id[sid]

    @classmethod
    def from_files(cls, annotation_path, feature_path=None, min_count: int = 1, vocab=None):
        sentences = load_annotated(annotation_path)
        vocab = vocab or build_vocab(sentences, min_count)
        if feature_path is None:
            return cls(sentences, vocab)
        raw = load_features(feature_path, [s.sid for s in sentences])
        missing = [s.sid for s in sentences if s.sid not in raw]
        if missing:
            raise CorpusError(f"no feature vector for sentence(s) {missing[:5]}")
        std, stats = standardize(raw.values)
        return cls(sentences, vocab, FeatureTable(list(raw.ids), std), stats)


# -- synthetic micro-world --------------------------------------------------

COLORS = ("red", "green", "blue", "yellow", "black", "white")
SHAPES = ("circle", "square", "triangle", "star", "cube", "ball")
ATTRIBUTES = COLORS + SHAPES
LANDMARK = "wall"


def attribute_vector(words: Iterable[str]) -> np.ndarray:
    """Multi-hot over colors then shapes for the attribute words present."""
    vec = np.zeros(len(ATTRIBUTES))
    for w in words:
        if w in ATTRIBUTES:
            vec[ATTRIBUTES.index(w)] = 1.0
    return vec


def _caption(objects: list[tuple[str, str]]) -> list[tuple[str, str, str]]:
    (c1, s1), rest = objects[0], objects[1:]
    triples = [("the", "DT", "det"), (c1, "JJ", "amod"), (s1, "NN", "nsubj")]
    if len(rest) == 2:
        c2, s2 = rest.pop(0)
        triples += [("and", "CC", "cc"), ("the", "DT", "det"), (c2, "JJ", "amod"), (s2, "NN", "conj")]
    triples += [("is", "VBZ", "root"), ("near", "IN", "prep"), ("a", "DT", "det")]
    if rest:
        c3, s3 = rest[0]
        triples += [(c3, "JJ", "amod"), (s3, "NN", "pobj")]
    else:
        triples += [(LANDMARK, "NN", "pobj")]
    return triples


def gen_microworld(seed: int, n_scenes: int) -> tuple[list[AnnotatedSentence], FeatureTable]:
    """Random scenes of 1-3 colored shapes with template captions.

    Every caption contains both determiners, so neither determiner's presence
    says anything about the scene.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    rng = np.random.default_rng(seed)
    sentences, ids, rows = [], [], []
    width = len(str(n_scenes - 1))
    for i in range(n_scenes):
        n_obj = int(rng.integers(1, 4))
        objects = [
            (COLORS[int(rng.integers(len(COLORS)))], SHAPES[int(rng.integers(len(SHAPES)))])
            for _ in range(n_obj)
        ]
        sid = f"scene{i:0{width}d}"
        sentences.append(AnnotatedSentence.from_triples(sid, _caption(objects)))
        ids.append(sid)
        rows.append(attribute_vector(w for obj in objects for w in obj))
    return sentences, FeatureTable(ids, np.array(rows))
