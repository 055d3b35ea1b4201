"""Text banks: class identifiers, canonical descriptions, and paraphrases.

A vocabulary is a JSON file of the form::

    {
      "task": "gesture" | "phase",
      "classes": [
        {"id": "G1", "canonical": "...", "paraphrases": ["...", "...", "...", "..."]},
        ...
      ]
    }

Two banks ship with the package: 15 surgical gestures (G1..G15) and 7
surgical phases (P1..P7). Canonical descriptions are the curated dataset
descriptions; the four paraphrases per class are hand-written for this
repository (see the "notes" field in the data files).

Vocabularies are immutable after load and safe to share across workers.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

PARAPHRASES_PER_CLASS = 4

#: Required class-id sets per task. Entry order in the file is preserved,
#: but the id set must match exactly.
TASK_CLASS_IDS = {
    "gesture": tuple(f"G{i}" for i in range(1, 16)),
    "phase": tuple(f"P{i}" for i in range(1, 8)),
}

_CLASS_ID_RE = re.compile(r"^[A-Z][0-9]+$")

_BUNDLED_FILES = {"gesture": "jigsaws_gestures.json", "phase": "cholec80_phases.json"}


class VocabularyError(ValueError):
    """A vocabulary file or entry violates the schema."""


@dataclass(frozen=True)
class ClassEntry:
    """One class: a short code, a canonical sentence, and 4 paraphrases."""

    class_id: str
    canonical: str
    paraphrases: tuple[str, ...]

    def __post_init__(self):
        if not _CLASS_ID_RE.match(self.class_id):
            raise VocabularyError(
                f"class id {self.class_id!r} does not match letter+integer"
            )
        if not self.canonical.strip():
            raise VocabularyError(f"{self.class_id}: canonical description is empty")
        if len(self.paraphrases) != PARAPHRASES_PER_CLASS:
            raise VocabularyError(
                f"{self.class_id}: expected {PARAPHRASES_PER_CLASS} paraphrases, "
                f"got {len(self.paraphrases)}"
            )
        texts = [self.canonical, *self.paraphrases]
        if any(not t.strip() for t in self.paraphrases):
            raise VocabularyError(f"{self.class_id}: empty paraphrase")
        if len(set(texts)) != len(texts):
            raise VocabularyError(
                f"{self.class_id}: canonical and paraphrases must be pairwise distinct"
            )

    @property
    def all_texts(self) -> list[str]:
        """Canonical first, then the 4 paraphrases (length 5)."""
        return [self.canonical, *self.paraphrases]


@dataclass(frozen=True)
class ClassVocabulary:
    """Ordered class entries for one task ("gesture" or "phase")."""

    task: str
    entries: tuple[ClassEntry, ...]

    def __post_init__(self):
        if self.task not in TASK_CLASS_IDS:
            raise VocabularyError(
                f"unknown task {self.task!r}; expected one of {sorted(TASK_CLASS_IDS)}"
            )
        expected = TASK_CLASS_IDS[self.task]
        ids = [e.class_id for e in self.entries]
        if len(ids) != len(expected):
            raise VocabularyError(
                f"wrong entry count: expected {len(expected)}, got {len(ids)}"
            )
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise VocabularyError(f"duplicate class ids: {dupes}")
        if set(ids) != set(expected):
            missing = sorted(set(expected) - set(ids))
            raise VocabularyError(f"missing class ids for task {self.task}: {missing}")

    @property
    def class_ids(self) -> list[str]:
        return [e.class_id for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, class_id: str) -> bool:
        return any(e.class_id == class_id for e in self.entries)

    def entry(self, class_id: str) -> ClassEntry:
        for e in self.entries:
            if e.class_id == class_id:
                return e
        raise KeyError(f"unknown class id {class_id!r} for task {self.task!r}")


def _entry_from_dict(obj: dict, index: int) -> ClassEntry:
    try:
        class_id = obj["id"]
        canonical = obj["canonical"]
        paraphrases = obj["paraphrases"]
    except (KeyError, TypeError) as exc:
        raise VocabularyError(f"class entry #{index}: missing field {exc}") from exc
    if not isinstance(paraphrases, list):
        raise VocabularyError(f"{class_id}: paraphrases must be a list")
    return ClassEntry(str(class_id), str(canonical), tuple(str(p) for p in paraphrases))


def load_vocabulary(path: str | Path) -> ClassVocabulary:
    """Load and validate a vocabulary file. Entry order is preserved."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise VocabularyError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict) or "task" not in raw or "classes" not in raw:
        raise VocabularyError(f"{path}: expected object with 'task' and 'classes'")
    entries = tuple(
        _entry_from_dict(obj, i) for i, obj in enumerate(raw["classes"])
    )
    return ClassVocabulary(task=raw["task"], entries=entries)


def save_vocabulary(vocab: ClassVocabulary, path: str | Path) -> None:
    """Write a vocabulary back to JSON (round-trips through load_vocabulary)."""
    payload = {
        "task": vocab.task,
        "classes": [
            {"id": e.class_id, "canonical": e.canonical, "paraphrases": list(e.paraphrases)}
            for e in vocab.entries
        ],
    }
    Path(path).write_text(
        json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def bundled_vocabulary(task: str) -> ClassVocabulary:
    """Load one of the two vocabularies shipped with the package."""
    if task not in _BUNDLED_FILES:
        raise VocabularyError(f"no bundled vocabulary for task {task!r}")
    ref = resources.files("surgline.data").joinpath(_BUNDLED_FILES[task])
    with resources.as_file(ref) as path:
        return load_vocabulary(path)


def prompts_for_class(
    vocab: ClassVocabulary, class_id: str, mode: str = "all_texts"
) -> list[str]:
    """Texts used for a class.

    ``canonical_only`` returns ``[canonical]``; ``all_texts`` returns the
    canonical followed by the 4 paraphrases (length 5, canonical first).
    """
    entry = vocab.entry(class_id)
    if mode == "canonical_only":
        return [entry.canonical]
    if mode == "all_texts":
        return entry.all_texts
    raise ValueError(f"unknown prompt mode {mode!r}")


def narrative_for(vocab: ClassVocabulary, class_id: str) -> str:
    """The sentence used in timeline reports: the canonical description.

    Deterministic so that generated timelines are stable across runs.
    """
    return vocab.entry(class_id).canonical
