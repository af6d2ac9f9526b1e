"""Template-based caption diversity: instruction assembly, a template bank,
captioner clients (HTTP and deterministic mock), and pattern-diversity
reporting.

The mock captioner doubles as the noise oracle: it renders known attribute
words into a skeleton and records exactly which slots were corrupted, so
token-level noise detection can be scored against ground truth.
"""

from __future__ import annotations

import hashlib
import json
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractViolation, FormatError, ProtocolError, TransportError
from .tokenizer import split_words

STATIC_INSTRUCTION = (
    "Write a description about the overall appearance of the person in the image, "
    "including the attributes: clothing, shoes, hairstyle, gender and belongings. "
    "If any attribute is not visible, you can ignore it. "
    "Do not imagine any contents that are not in the image."
)

_DYNAMIC_PREFIX = (
    "Generate a description about the overall appearance of the person, "
    "including clothing, shoes, hairstyle, gender, and belongings, "
    "in a style similar to the template: '"
)
_DYNAMIC_SUFFIX = (
    "'. If some requirements in the template are not visible, you can ignore them. "
    "Do not imagine any contents that are not in the image."
)


def static_instruction() -> str:
    """The fixed captioning instruction; byte-stable across runs and platforms."""
    return STATIC_INSTRUCTION


def dynamic_instruction(template: str) -> str:
    """The template-parameterized instruction with ``template`` spliced in."""
    if not template:
        raise ContractViolation("dynamic instruction needs a non-empty template")
    return _DYNAMIC_PREFIX + template + _DYNAMIC_SUFFIX


@dataclass(frozen=True)
class TemplateBank:
    """Ordered caption skeletons with {category} slots."""

    templates: tuple[str, ...]
    bank_id: str = "default"
    source_note: str = ""

    def __post_init__(self):
        if not self.templates:
            raise ContractViolation("template bank must be non-empty")
        if any(not t.strip() for t in self.templates):
            raise ContractViolation("template bank contains an empty template")
        if len(set(self.templates)) != len(self.templates):
            raise ContractViolation("template bank contains duplicates")

    def __len__(self) -> int:
        return len(self.templates)


def load_template_bank(path=None, bank_id: str | None = None) -> TemplateBank:
    """One template per line, '#' comments and blank lines skipped."""
    if path is None:
        text = resources.files("namtde").joinpath("data/template_bank.txt").read_text("utf-8")
        bank_id = bank_id or "builtin-46"
    else:
        text = Path(path).read_text(encoding="utf-8")
        bank_id = bank_id or Path(path).stem
    templates = []
    note = ""
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            if not note:
                note = stripped.lstrip("# ").strip()
            continue
        templates.append(stripped)
    return TemplateBank(templates=tuple(templates), bank_id=bank_id, source_note=note)


def save_template_bank(path, bank: TemplateBank) -> None:
    lines = [f"# {bank.source_note}"] if bank.source_note else []
    lines.extend(bank.templates)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class CaptionRecord:
    """One generated caption. ``source`` is "<kind>:<captioner>" where kind is
    static or dynamic; noise_labels (when present) flag corrupted words."""

    image_id: str
    text: str
    source: str
    template_index: int | None = None
    noise_labels: tuple[bool, ...] | None = None
    caption_id: str = ""

    def __post_init__(self):
        kind = self.source.split(":", 1)[0]
        if kind not in ("static", "dynamic"):
            raise ContractViolation(f"bad caption source {self.source!r}")
        if (kind == "dynamic") != (self.template_index is not None):
            raise ContractViolation("dynamic captions carry a template index, static never do")
        if not self.text:
            raise ContractViolation("caption text must be non-empty")
        if self.noise_labels is not None and len(self.noise_labels) != len(split_words(self.text)):
            raise ContractViolation("noise_labels length must equal the caption's word count")

    @property
    def kind(self) -> str:
        return self.source.split(":", 1)[0]


def save_captions(path, records: Iterable[CaptionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "image_id": rec.image_id,
                        "text": rec.text,
                        "source": rec.source,
                        "template_index": rec.template_index,
                        "noise_labels": list(rec.noise_labels) if rec.noise_labels is not None else None,
                        "caption_id": rec.caption_id,
                    }
                )
                + "\n"
            )


def load_captions(path) -> list[CaptionRecord]:
    records = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            records.append(
                CaptionRecord(
                    image_id=raw["image_id"],
                    text=raw["text"],
                    source=raw["source"],
                    template_index=raw.get("template_index"),
                    noise_labels=tuple(raw["noise_labels"]) if raw.get("noise_labels") is not None else None,
                    caption_id=raw.get("caption_id", ""),
                )
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}:{ln}: bad caption record") from exc
    return records


@dataclass(frozen=True)
class CaptionerEndpoint:
    base_url: str
    timeout: float = 10.0
    retry_budget: int = 2
    backoff: float = 0.25

    def __post_init__(self):
        if self.retry_budget < 0:
            raise ContractViolation("retry budget must be >= 0")
        if self.timeout <= 0:
            raise ContractViolation("timeout must be positive")


def caption_image(
    endpoint: CaptionerEndpoint,
    image_ref: str,
    instruction: str,
    source: str = "static:remote",
    caption_id: str = "",
) -> CaptionRecord:
    """POST /caption and wrap the reply; retries with exponential backoff.

    Unreachable/5xx/timeout failures are retried up to the budget and end in
    TransportError; a 200 with an unparseable body is a ProtocolError right
    away since retrying cannot fix it.
    """
    url = endpoint.base_url.rstrip("/") + "/caption"
    body = json.dumps({"image_ref": image_ref, "instruction": instruction}).encode("utf-8")
    last_error: Exception | None = None
    for attempt in range(endpoint.retry_budget + 1):
        if attempt:
            time.sleep(endpoint.backoff * (2 ** (attempt - 1)))
        req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=endpoint.timeout) as resp:
                payload = resp.read()
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
            last_error = exc
            continue
        try:
            reply = json.loads(payload.decode("utf-8"))
            text = reply["caption"]
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise ProtocolError(f"malformed captioner response: {payload[:200]!r}") from exc
        if not isinstance(text, str) or not text:
            raise ProtocolError("captioner returned an empty caption")
        return CaptionRecord(image_id=image_ref, text=text, source=source, caption_id=caption_id)
    raise TransportError(
        f"captioner at {endpoint.base_url} unreachable after {endpoint.retry_budget + 1} attempts: {last_error}"
    )


def caption_images(
    endpoint: CaptionerEndpoint,
    requests: Sequence[tuple[str, str, str, str]],
    max_in_flight: int = 1,
) -> list[CaptionRecord]:
    """Caption many (image_ref, instruction, source, caption_id) tuples,
    optionally with a bounded number of concurrent calls."""
    if max_in_flight < 1:
        raise ContractViolation("max_in_flight must be >= 1")
    if max_in_flight == 1:
        return [caption_image(endpoint, *req) for req in requests]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(lambda req: caption_image(endpoint, *req), requests))


class MockCaptionerClient:
    """Transport-free stand-in for a remote captioner: deterministic caption
    for a given (image_ref, instruction, seed)."""

    _OPENERS = ("a person", "someone", "the pedestrian", "a figure", "this person")
    _VERBS = ("wearing", "dressed in", "sporting", "clothed in")
    _EXTRAS = ("walking by", "standing still", "in the frame", "near the curb", "mid stride")

    def __init__(self, seed: int = 0, captioner_id: str = "mock-remote"):
        self.seed = seed
        self.captioner_id = captioner_id

    def caption(self, image_ref: str, instruction: str, source: str = "static:mock-remote") -> CaptionRecord:
        digest = hashlib.sha256(f"{self.seed}|{image_ref}|{instruction}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        words = [
            self._OPENERS[rng.integers(len(self._OPENERS))],
            self._VERBS[rng.integers(len(self._VERBS))],
            "plain clothes,",
            self._EXTRAS[rng.integers(len(self._EXTRAS))],
        ]
        return CaptionRecord(image_id=image_ref, text=" ".join(words), source=source)


_SLOT_RE = re.compile(r"\{([a-z_]+)\}")

DEFAULT_STATIC_SKELETONS = {
    "mock0": "a person wearing a {color} {garment} with {shoes} and carrying a {item}",
    "mock1": "this person is dressed in a {color} {garment}, wears {shoes}, and carries a {item}",
}


def mock_caption(
    attributes: Mapping[str, str],
    pools: Mapping[str, Sequence[str]],
    noise_rate: float,
    rng: np.random.Generator,
    *,
    bank: TemplateBank | None = None,
    template_index: int | None = None,
    skeleton: str | None = None,
    image_id: str = "",
    caption_id: str = "",
    captioner_id: str = "mock0",
) -> CaptionRecord:
    """Render attribute words into a skeleton, corrupting each slot with
    probability ``noise_rate`` by a same-category distractor absent from the
    image. The returned noise labels are exact by construction.
    """
    if not attributes:
        raise ContractViolation("mock_caption needs at least one attribute")
    if not 0.0 <= noise_rate <= 1.0:
        raise ContractViolation("noise_rate must lie in [0, 1]")
    if template_index is not None:
        if bank is None:
            raise ContractViolation("template_index given without a bank")
        if not 0 <= template_index < len(bank):
            raise ContractViolation(f"template index {template_index} outside bank of {len(bank)}")
        skeleton = bank.templates[template_index]
        source = f"dynamic:{captioner_id}"
    else:
        if skeleton is None:
            skeleton = DEFAULT_STATIC_SKELETONS.get(captioner_id, DEFAULT_STATIC_SKELETONS["mock0"])
        source = f"static:{captioner_id}"

    words: list[str] = []
    labels: list[bool] = []
    pieces = _SLOT_RE.split(skeleton)
    # re.split alternates literal text and captured slot names.
    for i, piece in enumerate(pieces):
        if i % 2 == 0:
            fillers = split_words(piece)
            words.extend(fillers)
            labels.extend([False] * len(fillers))
            continue
        category = piece
        if category not in attributes:
            raise ContractViolation(f"skeleton slot {{{category}}} has no attribute")
        word = attributes[category]
        noisy = rng.random() < noise_rate
        if noisy:
            candidates = [w for w in pools.get(category, ()) if w != word]
            if not candidates:
                raise ContractViolation(f"no distractor available for category {category!r}")
            word = candidates[int(rng.integers(len(candidates)))]
        words.append(word)
        labels.append(noisy)
    text = _render_with_words(skeleton, words)
    return CaptionRecord(
        image_id=image_id,
        text=text,
        source=source,
        template_index=template_index,
        noise_labels=tuple(labels),
        caption_id=caption_id,
    )


def _render_with_words(skeleton: str, words: list[str]) -> str:
    """Substitute slot occurrences left to right with the already-chosen words,
    keeping the skeleton's punctuation. ``words`` holds fillers and slot words
    in caption order, matching how the label list was built."""
    pieces = _SLOT_RE.split(skeleton)
    out = []
    word_pos = 0
    for i, piece in enumerate(pieces):
        if i % 2 == 0:
            out.append(piece)
            word_pos += len(split_words(piece))
        else:
            out.append(words[word_pos])
            word_pos += 1
    return "".join(out)


@dataclass(frozen=True)
class DiversityReport:
    n_captions: int
    distinct_skeletons: int
    skeleton_ratio: float
    distinct_four_gram_ratio: float
    four_gram_total: int


SLOT_MARKER = "_"


def skeleton_fingerprint(text: str, attribute_vocab: set[str]) -> str:
    """The caption's word sequence with attribute words replaced by a marker."""
    return " ".join(SLOT_MARKER if w in attribute_vocab else w for w in split_words(text))


def diversity_report(captions: Sequence[CaptionRecord], attribute_vocab: Iterable[str]) -> DiversityReport:
    if not captions:
        raise ContractViolation("diversity report needs at least one caption")
    vocab = set(attribute_vocab)
    skeletons = {skeleton_fingerprint(c.text, vocab) for c in captions}
    grams: list[tuple[str, ...]] = []
    for c in captions:
        words = split_words(c.text)
        grams.extend(tuple(words[i : i + 4]) for i in range(len(words) - 3))
    total = len(grams)
    distinct_ratio = (len(set(grams)) / total) if total else 1.0
    return DiversityReport(
        n_captions=len(captions),
        distinct_skeletons=len(skeletons),
        skeleton_ratio=len(skeletons) / len(captions),
        distinct_four_gram_ratio=distinct_ratio,
        four_gram_total=total,
    )
