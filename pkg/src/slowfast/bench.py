"""Synthetic multilingual benchmark built from vocabulary-permuted clone languages.

Every language shares one probabilistic grammar over "base" sentences;
language k renders a base sentence by mapping each content token into its
own block of ids, so languages share no content vocabulary. Language 0 is
the identity and plays the source language.

Two tasks read labels off the base sentence, so labels are identical in
every language:

* classification -- the topic (one of ``n_topics``) of the subject noun.
  Every other content word follows the same topic only with probability
  ``topic_coherence``, so bag-of-words evidence is noisy and the subject
  position settles ambiguous cases;
* tagging -- BIO tags for name runs, typed PER after a title word and LOC
  after a preposition.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import CLS, FIRST_CONTENT_ID, IGNORE, PAD, ModelParams, forward, pad_batch
from . import numcore as nc

TAGS = ("O", "B-PER", "I-PER", "B-LOC", "I-LOC")
O, B_PER, I_PER, B_LOC, I_LOC = range(5)
TASK_KINDS = ("classification", "tagging")


@dataclass(frozen=True)
class GrammarSpec:
    n_topics: int = 3
    nouns_per_topic: int = 6
    verbs_per_topic: int = 4
    adjectives_per_topic: int = 3
    n_determiners: int = 4
    n_titles: int = 4
    n_prepositions: int = 4
    n_names: int = 24
    n_fillers: int = 4
    topic_coherence: float = 0.85
    front_entity_rate: float = 0.3
    max_adjectives: int = 2
    max_trailing_entities: int = 2

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class Lexicon:
    """Base-language token ids for each word class."""

    def __init__(self, g: GrammarSpec):
        nxt = FIRST_CONTENT_ID

        def take(n):
            nonlocal nxt
            ids = np.arange(nxt, nxt + n)
            nxt += n
            return ids

        self.determiners = take(g.n_determiners)
        self.adjectives = [take(g.adjectives_per_topic) for _ in range(g.n_topics)]
        self.nouns = [take(g.nouns_per_topic) for _ in range(g.n_topics)]
        self.verbs = [take(g.verbs_per_topic) for _ in range(g.n_topics)]
        self.titles = take(g.n_titles)
        self.prepositions = take(g.n_prepositions)
        self.names = take(g.n_names)
        self.fillers = take(g.n_fillers)
        self.end = self.fillers[0]
        self.size = nxt - FIRST_CONTENT_ID
        self.max_id = nxt - 1


@dataclass
class BaseCorpus:
    sentences: list
    classes: np.ndarray
    tags: list
    grammar: GrammarSpec = field(default_factory=GrammarSpec)

    def __len__(self) -> int:
        return len(self.sentences)


def _pick(rng, arr):
    return int(arr[rng.integers(len(arr))])


def _sentence(rng: np.random.Generator, g: GrammarSpec, lex: Lexicon):
    toks, tags = [CLS], [IGNORE]

    def emit(tok, tag=O):
        toks.append(int(tok))
        tags.append(tag)

    def noisy(topic):
        if rng.random() < g.topic_coherence:
            return topic
        return int(rng.integers(g.n_topics))

    def noun_phrase(topic, subject=False):
        emit(_pick(rng, lex.determiners))
        for _ in range(rng.integers(g.max_adjectives + 1)):
            emit(_pick(rng, lex.adjectives[noisy(topic)]))
        emit(_pick(rng, lex.nouns[topic if subject else noisy(topic)]))

    def entity():
        if rng.random() < 0.5:
            emit(_pick(rng, lex.titles))
            b, i = B_PER, I_PER
        else:
            emit(_pick(rng, lex.prepositions))
            b, i = B_LOC, I_LOC
        for j in range(1 + rng.integers(2)):
            emit(_pick(rng, lex.names), b if j == 0 else i)

    label = int(rng.integers(g.n_topics))
    if rng.random() < g.front_entity_rate:
        entity()
        emit(lex.fillers[1])
    noun_phrase(label, subject=True)
    emit(_pick(rng, lex.verbs[noisy(label)]))
    noun_phrase(label)
    for _ in range(rng.integers(g.max_trailing_entities + 1)):
        entity()
    emit(lex.end)
    return np.array(toks, dtype=np.int64), label, np.array(tags, dtype=np.int64)


def generate_corpus(grammar: GrammarSpec, size: int, seed: int) -> BaseCorpus:
    """``size`` base sentences with their class and tag labels."""
    rng = np.random.default_rng(seed)
    lex = Lexicon(grammar)
    sents, classes, tags = [], [], []
    for _ in range(size):
        s, c, t = _sentence(rng, grammar, lex)
        sents.append(s)
        classes.append(c)
        tags.append(t)
    return BaseCorpus(sents, np.array(classes, dtype=np.int64), tags, grammar)


@dataclass(frozen=True)
class SyntheticLanguage:
    lang_id: int
    permutation: np.ndarray  # full id -> id table; specials map to themselves
    block_size: int = 0  # content ids available to each language

    def render(self, base_ids: np.ndarray) -> np.ndarray:
        return self.permutation[np.asarray(base_ids)]

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(len(self.permutation))
        return inv

    def unrender(self, ids: np.ndarray) -> np.ndarray:
        return self.inverse()[np.asarray(ids)]


def make_languages(num_langs: int, vocab_size: int, seed: int) -> list[SyntheticLanguage]:
    """Language 0 is the identity; language k moves the first content block
    (where base sentences live) onto block k with a random in-block shuffle.

    The content range is cut into ``num_langs`` equal blocks, so languages
    share no content ids -- only CLS/SEP/MASK and positions are common.
    """
    if num_langs < 2:
        raise ValueError(f"need at least 2 languages (one source, one non-source), got {num_langs}")
    block = (vocab_size - FIRST_CONTENT_ID) // num_langs
    if block < 2:
        raise ValueError(f"vocab_size {vocab_size} leaves fewer than 2 content tokens per language")
    rng = np.random.default_rng(seed)
    langs = [SyntheticLanguage(0, np.arange(vocab_size), block)]
    base = np.arange(FIRST_CONTENT_ID, FIRST_CONTENT_ID + block)
    for k in range(1, num_langs):
        perm = np.arange(vocab_size)
        target = base + k * block
        shuffled = rng.permutation(block)
        perm[base] = target[shuffled]
        perm[target[shuffled]] = base  # keep a bijection; base sentences never use block k
        langs.append(SyntheticLanguage(k, perm, block))
    return langs


def check_lexicon_fits(grammar: GrammarSpec, languages: Sequence[SyntheticLanguage]) -> None:
    lex = Lexicon(grammar)
    block = min(lang.block_size for lang in languages)
    if lex.size > block:
        raise ValueError(f"grammar needs {lex.size} content ids per language but the vocabulary "
                         f"only has {block} per language; raise vocab_size or shrink the grammar")


def code_switch(base_ids: np.ndarray, lang: SyntheticLanguage, languages: Sequence[SyntheticLanguage],
                rate: float, rng: np.random.Generator) -> np.ndarray:
    """Render in ``lang`` but swap each content token into a random other
    language with probability ``rate``."""
    out = lang.render(base_ids)
    if rate <= 0 or len(languages) < 2:
        return out
    content = np.asarray(base_ids) >= FIRST_CONTENT_ID
    flip = content & (rng.random(len(out)) < rate)
    for pos in np.flatnonzero(flip):
        other = languages[rng.integers(len(languages))]
        out[pos] = other.permutation[base_ids[pos]]
    return out


def pretraining_corpus(languages: Sequence[SyntheticLanguage], grammar: GrammarSpec, per_language: int,
                       seed: int, code_switch_rate: float = 0.0) -> list[np.ndarray]:
    """Non-parallel MLM corpus: distinct base sentences for every language."""
    check_lexicon_fits(grammar, languages)
    base = generate_corpus(grammar, per_language * len(languages), seed)
    rng = np.random.default_rng(seed + 1)
    out = []
    for k, lang in enumerate(languages):
        for s in base.sentences[k * per_language:(k + 1) * per_language]:
            out.append(code_switch(s, lang, languages, code_switch_rate, rng))
    order = np.random.default_rng(seed + 2).permutation(len(out))
    return [out[i] for i in order]


@dataclass(frozen=True)
class TaskInstance:
    tokens: np.ndarray
    label: object  # int class id or per-token tag array
    language: int
    base_index: int = -1


@dataclass
class DataSplit:
    kind: str
    train: list
    validation: dict
    test: dict
    few_shot: dict
    languages: list

    def sizes(self) -> dict:
        return {
            "train": len(self.train),
            "validation": {k: len(v) for k, v in self.validation.items()},
            "test": {k: len(v) for k, v in self.test.items()},
            "few_shot": {k: len(v) for k, v in self.few_shot.items()},
        }


def _instance(kind, corpus: BaseCorpus, i: int, lang: SyntheticLanguage) -> TaskInstance:
    label = int(corpus.classes[i]) if kind == "classification" else corpus.tags[i]
    return TaskInstance(lang.render(corpus.sentences[i]), label, lang.lang_id, i)


def make_task(kind: str, corpus: BaseCorpus, languages: Sequence[SyntheticLanguage], n_train: int,
              n_validation: int, n_test: int, few_shot_m: int = 0, few_shot_pool: int = 20,
              seed: int = 0) -> DataSplit:
    """Zero-shot (M = 0) or few-shot split over a parallel base corpus.

    Base sentences are partitioned into train / validation / test. The
    few-shot pool (``few_shot_pool`` per non-source language) is carved out
    of the validation block, so validation shrinks by the pool's total size;
    ``few_shot_m`` examples per non-source language are then drawn from it
    into the training set.
    """
    if kind not in TASK_KINDS:
        raise ValueError(f"task kind must be one of {TASK_KINDS}, got {kind!r}")
    if few_shot_m < 0:
        raise ValueError(f"few-shot count must be >= 0, got {few_shot_m}")
    if few_shot_m > few_shot_pool:
        raise ValueError(f"few-shot count {few_shot_m} exceeds the pool of {few_shot_pool}")
    non_source = [lang for lang in languages if lang.lang_id != 0]
    pool_total = few_shot_pool * len(non_source)
    if pool_total >= n_validation:
        raise ValueError(f"few-shot pool ({pool_total}) must be smaller than validation ({n_validation})")
    need = n_train + n_validation + n_test
    if need > len(corpus):
        raise ValueError(f"corpus has {len(corpus)} sentences, split needs {need}")
    check_lexicon_fits(corpus.grammar, languages)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    train_idx = order[:n_train]
    val_idx = order[n_train:n_train + n_validation]
    test_idx = order[n_train + n_validation:need]
    pool_idx, val_idx = val_idx[:pool_total], val_idx[pool_total:]
    src = languages[0]
    train = [_instance(kind, corpus, int(i), src) for i in train_idx]
    few_shot = {}
    for j, lang in enumerate(non_source):
        block = pool_idx[j * few_shot_pool:(j + 1) * few_shot_pool]
        few_shot[lang.lang_id] = [_instance(kind, corpus, int(i), lang) for i in block]
        if few_shot_m:
            pick = rng.choice(few_shot_pool, size=few_shot_m, replace=False)
            train.extend(few_shot[lang.lang_id][p] for p in pick)
    validation = {lang.lang_id: [_instance(kind, corpus, int(i), lang) for i in val_idx] for lang in languages}
    test = {lang.lang_id: [_instance(kind, corpus, int(i), lang) for i in test_idx] for lang in languages}
    return DataSplit(kind, train, validation, test, few_shot, [lang.lang_id for lang in languages])


def batch_arrays(kind: str, instances: Sequence[TaskInstance]):
    """(ids, flat labels) ready for the model; tagging labels cover every position."""
    ids = pad_batch([x.tokens for x in instances])
    if kind == "classification":
        return ids, np.array([x.label for x in instances], dtype=np.int64)
    labels = np.full(ids.shape, IGNORE, dtype=np.int64)
    for r, x in enumerate(instances):
        labels[r, : len(x.label)] = x.label
    return ids, labels.reshape(-1)


def spans(tags: Sequence[int]) -> set:
    """Typed (start, end, type) runs from a BIO sequence; stray I- tags open a span."""
    out = set()
    start = kind = None
    for i, t in enumerate(list(tags) + [O]):
        t = int(t)
        begins = t in (B_PER, B_LOC)
        cont = (t == I_PER and kind == "PER") or (t == I_LOC and kind == "LOC")
        if start is not None and not cont:
            out.add((start, i, kind))
            start = kind = None
        if begins or (t in (I_PER, I_LOC) and start is None):
            start, kind = i, "PER" if t in (B_PER, I_PER) else "LOC"
    return out


def span_f1(gold_seqs: Sequence[Sequence[int]], pred_seqs: Sequence[Sequence[int]]) -> float:
    tp = n_gold = n_pred = 0
    for g, p in zip(gold_seqs, pred_seqs):
        gs, ps = spans(g), spans(p)
        tp += len(gs & ps)
        n_gold += len(gs)
        n_pred += len(ps)
    if tp == 0:
        return 0.0
    prec, rec = tp / n_pred, tp / n_gold
    return 2 * prec * rec / (prec + rec)


def predict(params: ModelParams, kind: str, instances: Sequence[TaskInstance], batch_size: int = 128):
    """Class ids (classification) or one tag array per instance (tagging)."""
    preds = []
    with nc.no_grad():
        for start in range(0, len(instances), batch_size):
            chunk = instances[start:start + batch_size]
            ids, _ = batch_arrays(kind, chunk)
            logits, _ = forward(params, ids, kind)
            if kind == "classification":
                preds.extend(int(c) for c in logits.data.argmax(axis=1))
            else:
                best = logits.data.argmax(axis=1).reshape(ids.shape)
                preds.extend(best[r, 1:len(x.tokens)] for r, x in enumerate(chunk))
    return preds


def score(kind: str, instances: Sequence[TaskInstance], preds) -> float:
    """Accuracy or span F1, as a percentage."""
    if kind == "classification":
        gold = np.array([x.label for x in instances])
        return 100.0 * float((gold == np.asarray(preds)).mean())
    gold = [np.asarray(x.label)[1:] for x in instances]
    return 100.0 * span_f1(gold, preds)


def evaluate(params: ModelParams, split: DataSplit, which: str = "test", limit: Optional[int] = None) -> dict:
    """Per-language metric (accuracy or span F1, in percent) on ``which``."""
    sets = getattr(split, which)
    out = {}
    for lang, instances in sets.items():
        if not instances:
            raise ValueError(f"no {which} data for language {lang}")
        inst = instances[:limit] if limit else instances
        out[lang] = score(split.kind, inst, predict(params, split.kind, inst))
    return out


# ---- dataset files ----------------------------------------------------------

def _format_label(label) -> str:
    if isinstance(label, (int, np.integer)):
        return str(int(label))
    return " ".join(str(int(t)) for t in label)


def write_instances(path, instances: Sequence[TaskInstance]) -> None:
    with open(path, "w") as fh:
        for x in instances:
            fh.write(f"{x.language}\t{' '.join(str(int(t)) for t in x.tokens)}\t{_format_label(x.label)}\n")


def read_instances(path, kind: str) -> list[TaskInstance]:
    out = []
    with open(path) as fh:
        for line in fh:
            lang, toks, label = line.rstrip("\n").split("\t")
            tokens = np.array([int(t) for t in toks.split()], dtype=np.int64)
            if kind == "classification":
                lab = int(label)
            else:
                lab = np.array([int(t) for t in label.split()], dtype=np.int64)
            out.append(TaskInstance(tokens, lab, int(lang)))
    return out


def write_split(directory, split: DataSplit, seed: int, grammar: GrammarSpec) -> None:
    os.makedirs(directory, exist_ok=True)
    write_instances(os.path.join(directory, "train.tsv"), split.train)
    for part in ("validation", "test", "few_shot"):
        for lang, instances in getattr(split, part).items():
            write_instances(os.path.join(directory, f"{part}.{lang}.tsv"), instances)
    manifest = {"kind": split.kind, "seed": seed, "grammar_hash": grammar.digest(),
                "languages": split.languages, "sizes": split.sizes()}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def read_split(directory) -> DataSplit:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    kind = manifest["kind"]
    langs = manifest["languages"]
    parts = {}
    for part in ("validation", "test", "few_shot"):
        parts[part] = {}
        for lang in langs:
            path = os.path.join(directory, f"{part}.{lang}.tsv")
            if os.path.exists(path):
                parts[part][lang] = read_instances(path, kind)
    train = read_instances(os.path.join(directory, "train.tsv"), kind)
    return DataSplit(kind, train, parts["validation"], parts["test"], parts["few_shot"], langs)
