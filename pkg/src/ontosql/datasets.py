"""Corpus loading and batching.

Dialogues use one generic JSON schema:
``[{"id": str, "turns": [{"speaker": "user"|"system", "text": str}]}, ...]``.
Document corpora (title + abstract) are wrapped as single-turn pseudo
dialogues so the pipeline can treat both uniformly.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

from .ontology import OntologyGraph, deserialize

logger = logging.getLogger(__name__)

SPEAKERS = ("user", "system")


class CorpusFormatError(ValueError):
    pass


@dataclass
class DialogueRecord:
    id: str
    turns: list[tuple[str, str]]

    def validate(self) -> None:
        if not self.id:
            raise CorpusFormatError("dialogue id must be non-empty")
        if not self.turns:
            raise CorpusFormatError(f"dialogue {self.id!r} has no turns")
        for index, (speaker, _text) in enumerate(self.turns):
            expected = SPEAKERS[index % 2]
            if speaker not in SPEAKERS:
                raise CorpusFormatError(
                    f"dialogue {self.id!r} turn {index}: unknown speaker {speaker!r}"
                )
            if speaker != expected:
                raise CorpusFormatError(
                    f"dialogue {self.id!r} turn {index}: expected {expected!r}, "
                    f"got {speaker!r}"
                )


@dataclass
class Corpus:
    name: str
    items: list[DialogueRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def validate(self) -> None:
        seen = set()
        for record in self.items:
            if record.id in seen:
                raise CorpusFormatError(f"duplicate dialogue id {record.id!r}")
            seen.add(record.id)


def _read_json_list(path: str | Path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise CorpusFormatError(f"{path}: corpus file must contain a JSON list")
    return data


def load_dialogues(path: str | Path, strict: bool = False) -> Corpus:
    """Load the generic dialogue schema; malformed records abort in strict
    mode and are skipped with a warning otherwise."""
    items = []
    for index, raw in enumerate(_read_json_list(path)):
        try:
            record = _parse_dialogue(raw, index)
            record.validate()
        except CorpusFormatError as exc:
            if strict:
                raise CorpusFormatError(f"{path}: item {index}: {exc}") from exc
            logger.warning("%s: skipping item %d: %s", path, index, exc)
            continue
        items.append(record)
    corpus = Corpus(name=Path(path).stem, items=items)
    corpus.validate()
    return corpus


def _parse_dialogue(raw: object, index: int) -> DialogueRecord:
    if not isinstance(raw, dict):
        raise CorpusFormatError(f"item {index} is not an object")
    try:
        dialogue_id = str(raw["id"])
        turns = [
            (str(turn["speaker"]), str(turn["text"])) for turn in raw["turns"]
        ]
    except (KeyError, TypeError) as exc:
        raise CorpusFormatError(f"item {index} is malformed: {exc}") from exc
    return DialogueRecord(id=dialogue_id, turns=turns)


def load_documents(path: str | Path, strict: bool = False) -> Corpus:
    """Load title/abstract documents as single-turn pseudo dialogues."""
    items = []
    for index, raw in enumerate(_read_json_list(path)):
        try:
            if not isinstance(raw, dict):
                raise CorpusFormatError(f"item {index} is not an object")
            doc_id = str(raw.get("id", index))
            title = raw.get("title")
            if not title:
                raise CorpusFormatError(f"item {index} has no title")
            abstract = raw.get("abstract", "") or ""
            text = f"title: {title}\nabstract: {abstract}"
            record = DialogueRecord(id=doc_id, turns=[("user", text)])
            record.validate()
        except CorpusFormatError as exc:
            if strict:
                raise CorpusFormatError(f"{path}: {exc}") from exc
            logger.warning("%s: skipping item %d: %s", path, index, exc)
            continue
        items.append(record)
    corpus = Corpus(name=Path(path).stem, items=items)
    corpus.validate()
    return corpus


def batch(corpus: Corpus, size: int) -> list[list[DialogueRecord]]:
    """Contiguous batches in corpus order; the last one may be short."""
    if size < 1:
        raise ValueError("batch size must be >= 1")
    return [
        corpus.items[start:start + size]
        for start in range(0, len(corpus.items), size)
    ]


def permute(corpus: Corpus, seed: int) -> Corpus:
    """Seeded uniform shuffle of the item order."""
    items = list(corpus.items)
    random.Random(seed).shuffle(items)
    return Corpus(name=corpus.name, items=items)


def load_gold_ontology(path: str | Path) -> OntologyGraph:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
