"""Instruction templates, guideline registry and the closed-vocabulary tokenizer."""
from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .data_synth import CAPTION_WORDS, Sample, SequenceKind, stage1_group

STAGE1_TARGETS = ("T2W", "ADC&DWI")


class Stage(str, enum.Enum):
    SEQUENCE_DISCRIMINATION = "SequenceDiscrimination"
    GUIDELINE_CAPTIONING = "GuidelineCaptioning"


@dataclass(frozen=True)
class InstructionRecord:
    stage: Stage
    prompt: str
    target: str


@dataclass(frozen=True)
class GuidelineRegistry:
    sections: dict[int, str]
    version: str

    def __post_init__(self):
        if sorted(self.sections) != [1, 2, 3, 4, 5]:
            raise ValueError(f"registry must define scores 1..5, got {sorted(self.sections)}")
        texts = [self.sections[s].strip() for s in range(1, 6)]
        if not all(texts) or len(set(texts)) != 5:
            raise ValueError("guideline sections must be non-empty and mutually distinct")

    def text(self) -> str:
        return " ".join(self.sections[s] for s in range(1, 6))


def _asset(name: str, asset_dir: str | Path | None) -> str:
    if asset_dir is not None:
        return (Path(asset_dir) / name).read_text()
    return (resources.files("guideline_distill") / "assets" / "instructions" / name).read_text()


def load_registry(asset_dir: str | Path | None = None) -> GuidelineRegistry:
    raw = json.loads(_asset("guideline.json", asset_dir))
    return GuidelineRegistry({int(k): v for k, v in raw["sections"].items()}, raw["version"])


@dataclass(frozen=True)
class Templates:
    stage1: str
    stage2: str

    @classmethod
    def load(cls, asset_dir: str | Path | None = None) -> "Templates":
        return cls(_asset("stage1.txt", asset_dir).strip(), _asset("stage2.txt", asset_dir).strip())


_DEFAULT_TEMPLATES: Templates | None = None


def default_templates() -> Templates:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = Templates.load()
    return _DEFAULT_TEMPLATES


def render_stage1(kind: SequenceKind, templates: Templates | None = None) -> InstructionRecord:
    templates = templates or default_templates()
    return InstructionRecord(Stage.SEQUENCE_DISCRIMINATION, templates.stage1, stage1_group(kind))


def render_stage2(registry: GuidelineRegistry, sample: Sample, templates: Templates | None = None) -> InstructionRecord:
    """Guideline-captioning instruction: all five sections in the prompt, caption as target."""
    if not getattr(sample, "caption", None):
        raise ValueError(f"sample {getattr(sample, 'id', '?')} has no caption")
    templates = templates or default_templates()
    prompt = templates.stage2.replace("{guideline}", registry.text())
    return InstructionRecord(Stage.GUIDELINE_CAPTIONING, prompt, sample.caption)


# ---------------------------------------------------------------- tokenizer

# A piece is a word, a digit, a punctuation mark (each with at most one leading
# space), or a lone whitespace character. Every character falls in exactly one
# class, so concatenating the pieces always reproduces the input.
_PIECE = re.compile(r" ?[A-Za-z][A-Za-z0-9&]*| ?[0-9]| ?[^\sA-Za-z0-9]|\s")


def pieces(text: str) -> list[str]:
    return _PIECE.findall(text)


class Tokenizer:
    """Word-level tokenizer over a closed vocabulary with byte fallback.

    Ids 0..3 are pad, begin, end and the image-prompt placeholder; the next
    256 ids are raw bytes; vocabulary pieces follow in sorted order.
    """

    PAD, BOS, EOS, IMG = 0, 1, 2, 3
    N_SPECIAL = 4
    BYTE_OFFSET = N_SPECIAL

    def __init__(self, vocab_pieces):
        self.pieces = sorted(set(vocab_pieces))
        self._offset = self.BYTE_OFFSET + 256
        self._to_id = {p: self._offset + i for i, p in enumerate(self.pieces)}

    @property
    def vocab_size(self) -> int:
        return self._offset + len(self.pieces)

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for piece in pieces(text):
            tid = self._to_id.get(piece)
            if tid is None:
                ids.extend(self.BYTE_OFFSET + b for b in piece.encode("utf-8"))
            else:
                ids.append(tid)
        return ids

    def detokenize(self, ids) -> str:
        out = bytearray()
        for tid in ids:
            tid = int(tid)
            if tid < self.N_SPECIAL:
                continue
            if tid < self._offset:
                out.append(tid - self.BYTE_OFFSET)
            else:
                out.extend(self.pieces[tid - self._offset].encode("utf-8"))
        return out.decode("utf-8", errors="replace")

    @classmethod
    def from_corpus(cls, texts) -> "Tokenizer":
        vocab = set()
        for text in texts:
            vocab.update(pieces(text))
        return cls(vocab)


def default_tokenizer(registry: GuidelineRegistry | None = None, templates: Templates | None = None) -> Tokenizer:
    registry = registry or load_registry()
    templates = templates or default_templates()
    words = list(CAPTION_WORDS) + list(STAGE1_TARGETS) + list("0123456789") + list(".,;:?&")
    corpus = [templates.stage1, templates.stage2.replace("{guideline}", registry.text()), *STAGE1_TARGETS]
    corpus += [w for word in words for w in (word, " " + word)]
    return Tokenizer.from_corpus(corpus)
