"""Synthetic speech-translation quadruples, manifests, and the vocabulary.

The synthetic language: a fixed inventory of phonemes, each with a random
template feature vector; words are short phoneme strings; an utterance is a
word sequence rendered as phonemes (``<space>`` between words), each phoneme
held for a random number of frames with Gaussian noise on its template. The
translation maps every word through a dictionary and then reverses
consecutive chunks of ``reorder_window`` words (2 = swap adjacent pairs).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng as rng_mod

SPACE = "<space>"
SPECIALS = ("<asr>", "<st>", "<eos>", "<pad>")
BLANK = "<blank>"
MANIFEST_FORMAT = "costt-manifest"
MANIFEST_VERSION = 1


class CorpusError(ValueError):
    pass


class ManifestError(CorpusError):
    pass


@dataclass
class Quadruple:
    id: str
    features: np.ndarray  # [T_raw, d_feat] float64
    phonemes: list[str]
    transcript: list[str]
    translation: list[str]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Quadruple):
            return NotImplemented
        return (
            self.id == other.id
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and self.phonemes == other.phonemes
            and self.transcript == other.transcript
            and self.translation == other.translation
        )


@dataclass
class TextPair:
    id: str
    transcript: list[str]
    translation: list[str]


@dataclass
class SynthConfig:
    n_phonemes: int = 20
    n_words: int = 60
    phonemes_per_word: tuple[int, int] = (2, 4)
    words_per_utterance: tuple[int, int] = (3, 6)
    frames_per_phoneme: tuple[int, int] = (6, 9)
    d_feat: int = 16
    sigma: float = 0.5
    dictionary: str = "identity"  # identity | permutation | path to a "source<TAB>target" file
    reorder_window: int = 2
    space_separator: bool = True
    n_train: int = 500
    n_dev: int = 50
    n_test: int = 50
    n_text: int = 2000
    seed: int = 0

    def validate(self) -> None:
        for name in ("phonemes_per_word", "words_per_utterance", "frames_per_phoneme"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise CorpusError(f"{name} must be a non-empty positive range, got {(lo, hi)}")
        if self.sigma < 0:
            raise CorpusError("sigma must be >= 0")
        if self.n_phonemes < 2 or self.n_words < 1 or self.d_feat < 1:
            raise CorpusError("n_phonemes >= 2, n_words >= 1 and d_feat >= 1 are required")
        if min(self.n_train, self.n_dev, self.n_test) < 0 or self.n_text < 0:
            raise CorpusError("corpus sizes must be non-negative")
        if self.reorder_window < 0:
            raise CorpusError("reorder_window must be >= 0")


@dataclass
class Language:
    """The generating process behind a synthetic corpus."""

    phonemes: list[str]
    templates: dict[str, np.ndarray]
    lexicon: dict[str, list[str]]
    dictionary: dict[str, str]
    reorder_window: int
    space_separator: bool

    def pronounce(self, words: Sequence[str]) -> list[str]:
        out: list[str] = []
        for i, w in enumerate(words):
            if i and self.space_separator:
                out.append(SPACE)
            out.extend(self.lexicon[w])
        return out

    def translate(self, words: Sequence[str]) -> list[str]:
        mapped = [self.dictionary[w] for w in words]
        k = self.reorder_window
        if k < 2:
            return mapped
        out: list[str] = []
        for i in range(0, len(mapped), k):
            out.extend(reversed(mapped[i : i + k]))
        return out


@dataclass
class SynthCorpus:
    train: list[Quadruple]
    dev: list[Quadruple]
    test: list[Quadruple]
    text: list[TextPair]
    language: Language = field(repr=False)


def _load_dictionary(spec: str, words: list[str], rng: np.random.Generator) -> dict[str, str]:
    if spec == "identity":
        return {w: w for w in words}
    if spec == "permutation":
        targets = [f"t{i:02d}" for i in range(len(words))]
        perm = rng.permutation(len(words))
        return {w: targets[j] for w, j in zip(words, perm)}
    path = Path(spec)
    if not path.is_file():
        raise CorpusError(f"dictionary must be 'identity', 'permutation' or a file path; got {spec!r}")
    mapping: dict[str, str] = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not all(p.strip() for p in parts):
            raise CorpusError(f"{path}:{n}: expected 'source<TAB>target'")
        mapping[parts[0].strip()] = parts[1].strip()
    missing = [w for w in words if w not in mapping]
    if missing:
        raise CorpusError(f"dictionary {path} has no entry for {missing[0]!r} ({len(missing)} words missing)")
    return mapping


def make_language(cfg: SynthConfig) -> Language:
    cfg.validate()
    r = rng_mod.stream(cfg.seed, "data", "language")
    phonemes = [f"p{i:02d}" for i in range(cfg.n_phonemes)]
    inventory = phonemes + ([SPACE] if cfg.space_separator else [])
    templates = {p: r.normal(size=cfg.d_feat) for p in inventory}
    lo, hi = cfg.phonemes_per_word
    capacity = sum(cfg.n_phonemes * (cfg.n_phonemes - 1) ** (n - 1) for n in range(lo, hi + 1))
    if capacity < cfg.n_words:
        raise CorpusError(f"cannot form {cfg.n_words} distinct words from {cfg.n_phonemes} phonemes")
    words = [f"w{i:02d}" for i in range(cfg.n_words)]
    seen: set[tuple[str, ...]] = set()
    lexicon: dict[str, list[str]] = {}
    for w in words:
        while True:
            n = int(r.integers(lo, hi + 1))
            pron = [phonemes[int(r.integers(cfg.n_phonemes))]]
            while len(pron) < n:
                p = phonemes[int(r.integers(cfg.n_phonemes))]
                if p != pron[-1]:
                    pron.append(p)
            if tuple(pron) not in seen:
                seen.add(tuple(pron))
                lexicon[w] = pron
                break
    dictionary = _load_dictionary(cfg.dictionary, words, r)
    return Language(inventory, templates, lexicon, dictionary, cfg.reorder_window, cfg.space_separator)


def render(lang: Language, phonemes: Sequence[str], cfg: SynthConfig, r: np.random.Generator) -> np.ndarray:
    lo, hi = cfg.frames_per_phoneme
    rows = []
    for p in phonemes:
        k = int(r.integers(lo, hi + 1))
        rows.append(np.tile(lang.templates[p], (k, 1)) + cfg.sigma * r.normal(size=(k, cfg.d_feat)))
    return np.concatenate(rows, axis=0)


def synth_generate(cfg: SynthConfig) -> SynthCorpus:
    """Generate train/dev/test quadruples and text-only pairs, disjoint by word sequence."""
    lang = make_language(cfg)
    words = sorted(lang.lexicon)
    r = rng_mod.stream(cfg.seed, "data", "sentences")
    lo, hi = cfg.words_per_utterance
    total = cfg.n_train + cfg.n_dev + cfg.n_test + cfg.n_text
    space = sum(len(words) ** n for n in range(lo, hi + 1))
    if total > space:
        raise CorpusError(f"asked for {total} distinct utterances but only {space} exist")
    sentences: list[tuple[str, ...]] = []
    seen: set[tuple[str, ...]] = set()
    while len(sentences) < total:
        n = int(r.integers(lo, hi + 1))
        s = tuple(words[int(i)] for i in r.integers(len(words), size=n))
        if s not in seen:
            seen.add(s)
            sentences.append(s)

    def speech(split: str, chunk: list[tuple[str, ...]]) -> list[Quadruple]:
        out = []
        for i, s in enumerate(chunk):
            ur = rng_mod.stream(cfg.seed, "data", split, i)
            phon = lang.pronounce(s)
            out.append(Quadruple(f"{split}-{i:05d}", render(lang, phon, cfg, ur), phon, list(s), lang.translate(s)))
        return out

    a = cfg.n_train
    b = a + cfg.n_dev
    c = b + cfg.n_test
    return SynthCorpus(
        train=speech("train", sentences[:a]),
        dev=speech("dev", sentences[a:b]),
        test=speech("test", sentences[b:c]),
        text=[TextPair(f"text-{i:05d}", list(s), lang.translate(s)) for i, s in enumerate(sentences[c:])],
        language=lang,
    )


def stack_frames(x: np.ndarray, right_context: int = 5) -> np.ndarray:
    """Concatenate each frame with the next ``right_context`` frames (zeros past the end)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"expected [T>=1, d] features, got {x.shape}")
    if right_context <= 0:
        return x.copy()
    T, d = x.shape
    padded = np.concatenate([x, np.zeros((right_context, d))], axis=0)
    return np.concatenate([padded[k : k + T] for k in range(right_context + 1)], axis=1)


# -- manifests ---------------------------------------------------------------
def save_manifest(records: Sequence[Quadruple | TextPair], path: str | os.PathLike) -> None:
    """Write line-delimited JSON records; speech features go to a float64 sidecar ``<path>.feats``."""
    path = Path(path)
    speech = any(isinstance(r, Quadruple) for r in records) or not records
    if speech and any(isinstance(r, TextPair) for r in records):
        raise CorpusError("a manifest holds either speech quadruples or text pairs, not both")
    d_feat = records[0].features.shape[1] if records and speech else 0
    lines = [json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
                         "kind": "speech" if speech else "text", "d_feat": d_feat,
                         "sidecar": path.name + ".feats" if speech else None})]
    offset = 0
    blobs = []
    for r in records:
        rec = {"id": r.id}
        if isinstance(r, Quadruple):
            if r.features.ndim != 2 or r.features.shape[1] != d_feat:
                raise CorpusError(f"{r.id}: feature dim {r.features.shape} does not match d_feat={d_feat}")
            blob = np.ascontiguousarray(r.features, dtype="<f8").tobytes()
            rec["feature_ref"] = {"offset": offset, "length": int(r.features.shape[0])}
            rec["phonemes"] = " ".join(r.phonemes)
            offset += len(blob)
            blobs.append(blob)
        rec["transcript"] = " ".join(r.transcript)
        rec["translation"] = " ".join(r.translation)
        lines.append(json.dumps(rec))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if speech:
        Path(str(path) + ".feats").write_bytes(b"".join(blobs))


def _field(rec: dict, name: str, lineno: int, path: Path):
    if name not in rec:
        raise ManifestError(f"{path}:{lineno}: missing field {name!r}")
    return rec[name]


def load_manifest(path: str | os.PathLike) -> list[Quadruple] | list[TextPair]:
    path = Path(path)
    text = path.read_text(encoding="utf-8").splitlines()
    if not text:
        raise ManifestError(f"{path}:1: missing header")
    try:
        header = json.loads(text[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:1: bad header ({exc.msg})") from None
    if header.get("format") != MANIFEST_FORMAT or header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}:1: not a {MANIFEST_FORMAT} v{MANIFEST_VERSION} header")
    kind = header.get("kind")
    d_feat = int(header.get("d_feat", 0))
    sidecar = None
    if kind == "speech" and len(text) > 1:
        side = path.parent / header["sidecar"]
        if not side.is_file():
            raise ManifestError(f"{path}: feature file not found: {side}")
        sidecar = side.read_bytes()
    out: list = []
    for lineno, line in enumerate(text[1:], 2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
        rid = _field(rec, "id", lineno, path)
        transcript = str(_field(rec, "transcript", lineno, path)).split()
        translation = str(_field(rec, "translation", lineno, path)).split()
        if kind == "text":
            out.append(TextPair(rid, transcript, translation))
            continue
        ref = _field(rec, "feature_ref", lineno, path)
        try:
            off, rows = int(ref["offset"]), int(ref["length"])
        except (KeyError, TypeError, ValueError):
            raise ManifestError(f"{path}:{lineno}: field 'feature_ref' needs integer offset and length") from None
        nbytes = rows * d_feat * 8
        if off < 0 or off + nbytes > len(sidecar):
            raise ManifestError(f"{path}:{lineno}: features for sample {rid!r} are truncated in {header['sidecar']}")
        feats = np.frombuffer(sidecar, dtype="<f8", count=rows * d_feat, offset=off).astype(np.float64)
        phon = str(_field(rec, "phonemes", lineno, path)).split()
        out.append(Quadruple(rid, feats.reshape(rows, d_feat), phon, transcript, translation))
    return out


# -- vocabulary --------------------------------------------------------------
_PREFIX = {"phoneme": "phn:", "source": "src:", "target": "tgt:"}


class Vocabulary:
    """Token/id maps over V (specials, phonemes, source, target) plus blank as the last id of V'."""

    def __init__(self, entries: Sequence[tuple[str, str]], collisions: Sequence[str] = ()):
        self.tokens = [t for t, _ in entries]
        self.partitions = [p for _, p in entries]
        if self.tokens[: len(SPECIALS)] != list(SPECIALS):
            raise CorpusError("vocabulary must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise CorpusError("vocabulary tokens must be unique")
        self.collisions = list(collisions)
        self._index = {}
        for i, (tok, part) in enumerate(entries):
            self._index[(part, self._surface(tok, part))] = i
        self.asr, self.st, self.eos, self.pad = range(4)

    @staticmethod
    def _surface(token: str, partition: str) -> str:
        pre = _PREFIX.get(partition)
        return token[len(pre):] if pre and token.startswith(pre) else token

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.partitions == other.partitions

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def blank(self) -> int:
        return len(self.tokens)

    @property
    def size_with_blank(self) -> int:
        return len(self.tokens) + 1

    def ids(self, partition: str) -> list[int]:
        return [i for i, p in enumerate(self.partitions) if p == partition]

    def encode(self, tokens: Iterable[str], partition: str) -> list[int]:
        out = []
        for t in tokens:
            key = (partition, t) if partition != "special" else ("special", t)
            if key not in self._index:
                raise KeyError(f"{t!r} is not a {partition} token")
            out.append(self._index[key])
        return out

    def token(self, i: int) -> str:
        return BLANK if i == self.blank else self.tokens[i]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [BLANK if i == self.blank else self._surface(self.tokens[i], self.partitions[i]) for i in ids]

    def save(self, path: str | os.PathLike) -> None:
        lines = [f"{t}\t{p}" for t, p in zip(self.tokens, self.partitions)] + [f"{BLANK}\tblank"]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        entries = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusError(f"{path}:{n}: expected 'token<TAB>partition'")
            entries.append((parts[0], parts[1]))
        if not entries or entries[-1] != (BLANK, "blank"):
            raise CorpusError(f"{path}: last line must be the blank symbol")
        return cls(entries[:-1])


def build_vocab(corpora: Iterable[Sequence[Quadruple | TextPair]]) -> Vocabulary:
    """Specials, then phonemes, source tokens and target tokens (each sorted); blank is implicit last."""
    phon: set[str] = set()
    src: set[str] = set()
    tgt: set[str] = set()
    empty = True
    for corpus in corpora:
        for r in corpus:
            empty = False
            if isinstance(r, Quadruple):
                phon.update(r.phonemes)
            src.update(r.transcript)
            tgt.update(r.translation)
    if empty:
        raise CorpusError("cannot build a vocabulary from empty corpora")
    entries = [(s, "special") for s in SPECIALS]
    taken = set(SPECIALS) | {BLANK}
    collisions = []
    for part, items in (("phoneme", phon), ("source", src), ("target", tgt)):
        for t in sorted(items):
            shown = t
            if t in taken:
                shown = _PREFIX[part] + t
                collisions.append(t)
            taken.add(shown)
            entries.append((shown, part))
    return Vocabulary(entries, collisions)
