"""Synthetic oracle dataset: images are patch-feature blocks carrying known
attribute signatures, captions come from the mock captioner with exact noise
labels, and splits are identity-disjoint.

Attribute signature vectors are orthonormal columns of a seeded QR factor;
filler patches and per-image jitter live in the orthogonal complement of the
signature span, so a distractor word's best patch similarity is exactly zero
while a clean word's stays near one. That construction is what lets noise
detection be scored against ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nm
from .errors import ContractViolation, CorruptionError, FormatError
from .tde import CaptionRecord, TemplateBank, load_captions, load_template_bank, mock_caption, save_captions

DATASET_VERSION = 1

DEFAULT_CATEGORIES: dict[str, tuple[str, ...]] = {
    "color": ("black", "blue", "green", "grey", "orange", "purple", "red", "yellow"),
    "garment": ("coat", "dress", "hoodie", "jacket", "jeans", "shirt", "skirt", "sweater"),
    "shoes": ("boots", "heels", "sandals", "sneakers"),
    "item": ("backpack", "handbag", "suitcase", "umbrella"),
}


@dataclass(frozen=True)
class AttributeSpec:
    """Attribute vocabulary (grouped by category), signature vectors, and the
    complement basis used for filler patches."""

    categories: dict[str, tuple[str, ...]]
    patch_dim: int
    signatures: dict[str, np.ndarray]
    complement: np.ndarray  # (patch_dim, patch_dim - V) orthonormal columns

    @property
    def k(self) -> int:
        return len(self.categories)

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return tuple(w for words in self.categories.values() for w in words)

    def pools(self) -> dict[str, tuple[str, ...]]:
        return dict(self.categories)


def make_attribute_spec(
    categories: Mapping[str, Sequence[str]] | None = None,
    patch_dim: int = 32,
    seed: int = 0,
) -> AttributeSpec:
    cats = {k: tuple(v) for k, v in (categories or DEFAULT_CATEGORIES).items()}
    if len(cats) < 2:
        raise ContractViolation("need at least two attribute categories")
    for name, words in cats.items():
        if not words:
            raise ContractViolation(f"category {name!r} is empty")
        if len(set(words)) != len(words):
            raise ContractViolation(f"category {name!r} has duplicate words")
    vocab = tuple(w for words in cats.values() for w in words)
    if len(set(vocab)) != len(vocab):
        raise ContractViolation("attribute words must be unique across categories")
    if len(vocab) >= patch_dim:
        raise ContractViolation(
            f"{len(vocab)} attribute words do not fit orthogonally in patch_dim {patch_dim}"
        )
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((patch_dim, patch_dim)))
    signatures = {w: q[:, i].copy() for i, w in enumerate(vocab)}
    complement = q[:, len(vocab) :].copy()
    gram = np.abs(q[:, : len(vocab)].T @ q[:, : len(vocab)] - np.eye(len(vocab)))
    if gram.max() >= 0.2:
        raise ContractViolation("signature vectors are not near-orthogonal")
    return AttributeSpec(categories=cats, patch_dim=patch_dim, signatures=signatures, complement=complement)


@dataclass(frozen=True)
class ImageExample:
    image_id: str
    identity_id: str
    patches: np.ndarray  # (M, patch_dim)
    attributes: dict[str, str]

    def __eq__(self, other):
        return (
            isinstance(other, ImageExample)
            and self.image_id == other.image_id
            and self.identity_id == other.identity_id
            and self.attributes == other.attributes
            and np.array_equal(self.patches, other.patches)
        )


@dataclass(frozen=True)
class SplitManifest:
    train_identities: tuple[str, ...]
    test_identities: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.train_identities) & set(self.test_identities)
        if overlap:
            raise ContractViolation(f"split is not identity-disjoint: {sorted(overlap)[:3]}")


@dataclass
class Dataset:
    spec: AttributeSpec
    images: list[ImageExample]
    captions: list[CaptionRecord]
    split: SplitManifest
    m_patches: int
    noise_rate: float
    seed: int
    manifest: dict = field(default_factory=dict)

    @property
    def patch_dim(self) -> int:
        return self.spec.patch_dim

    @property
    def identities(self) -> tuple[str, ...]:
        seen = dict.fromkeys(img.identity_id for img in self.images)
        return tuple(seen)

    def images_by_identity(self) -> dict[str, list[ImageExample]]:
        out: dict[str, list[ImageExample]] = {}
        for img in self.images:
            out.setdefault(img.identity_id, []).append(img)
        return out

    def captions_by_image(self) -> dict[str, list[CaptionRecord]]:
        out: dict[str, list[CaptionRecord]] = {}
        for cap in self.captions:
            out.setdefault(cap.image_id, []).append(cap)
        return out

    def image_index(self) -> dict[str, ImageExample]:
        return {img.image_id: img for img in self.images}

    def equals(self, other: "Dataset") -> bool:
        return (
            self.images == other.images
            and self.captions == other.captions
            and self.split == other.split
            and self.m_patches == other.m_patches
            and self.noise_rate == other.noise_rate
            and self.seed == other.seed
            and self.spec.categories == other.spec.categories
            and all(
                np.array_equal(self.spec.signatures[w], other.spec.signatures[w])
                for w in self.spec.vocabulary
            )
        )


def _identity_images(
    spec: AttributeSpec,
    identity_id: str,
    attributes: dict[str, str],
    images_per_identity: int,
    m_patches: int,
    jitter: float,
    rng: np.random.Generator,
) -> list[ImageExample]:
    images = []
    n_comp = spec.complement.shape[1]
    for j in range(images_per_identity):
        patches = np.zeros((m_patches, spec.patch_dim))
        order = rng.permutation(m_patches)
        attr_words = list(attributes.values())
        for slot, word in enumerate(attr_words):
            direction = spec.complement @ rng.standard_normal(n_comp)
            direction /= np.linalg.norm(direction)
            patches[order[slot]] = spec.signatures[word] + jitter * direction
        for slot in range(len(attr_words), m_patches):
            filler = spec.complement @ rng.standard_normal(n_comp)
            patches[order[slot]] = filler / np.linalg.norm(filler)
        images.append(
            ImageExample(
                image_id=f"{identity_id}.im{j}",
                identity_id=identity_id,
                patches=patches,
                attributes=dict(attributes),
            )
        )
    return images


def gen_corpus(
    out_dir,
    spec: AttributeSpec | None = None,
    n_identities: int = 500,
    images_per_identity: int = 2,
    captions_per_image: int = 4,
    noise_rate: float = 0.3,
    seed: int = 0,
    m_patches: int = 12,
    jitter: float = 0.05,
    test_fraction: float = 0.5,
    bank: TemplateBank | None = None,
) -> Dataset:
    """Generate and persist a synthetic dataset; deterministic for a fixed seed.

    Captions alternate static/dynamic across two mock captioners; ground-truth
    noise labels are stored with every caption.
    """
    if min(n_identities, images_per_identity, captions_per_image) < 1:
        raise ContractViolation("corpus counts must be positive")
    if not 0.0 <= noise_rate <= 1.0:
        raise ContractViolation("noise_rate must lie in [0, 1]")
    spec = spec or make_attribute_spec(seed=seed)
    if spec.k > m_patches:
        raise ContractViolation(f"{spec.k} attributes need at least {spec.k} patches")
    if noise_rate > 0.0:
        for name, words in spec.categories.items():
            if len(words) < 2:
                raise ContractViolation(f"category {name!r} has no distractors for noise injection")
    bank = bank or load_template_bank()

    root = np.random.SeedSequence(seed)
    children = root.spawn(n_identities)
    images: list[ImageExample] = []
    captions: list[CaptionRecord] = []
    for idx in range(n_identities):
        rng = np.random.default_rng(children[idx])
        identity_id = f"id{idx:04d}"
        attributes = {
            cat: words[int(rng.integers(len(words)))] for cat, words in spec.categories.items()
        }
        identity_images = _identity_images(
            spec, identity_id, attributes, images_per_identity, m_patches, jitter, rng
        )
        images.extend(identity_images)
        for img in identity_images:
            for c in range(captions_per_image):
                captioner_id = f"mock{(c // 2) % 2}"
                dynamic = c % 2 == 1
                captions.append(
                    mock_caption(
                        attributes,
                        spec.pools(),
                        noise_rate,
                        rng,
                        bank=bank if dynamic else None,
                        template_index=int(rng.integers(len(bank))) if dynamic else None,
                        image_id=img.image_id,
                        caption_id=f"{img.image_id}.c{c}",
                        captioner_id=captioner_id,
                    )
                )

    identity_ids = [f"id{i:04d}" for i in range(n_identities)]
    split = split_identities(identity_ids, test_fraction, seed)
    dataset = Dataset(
        spec=spec,
        images=images,
        captions=captions,
        split=split,
        m_patches=m_patches,
        noise_rate=noise_rate,
        seed=seed,
    )
    save_dataset(out_dir, dataset)
    return dataset


def split_identities(identity_ids: Sequence[str], test_fraction: float, seed: int) -> SplitManifest:
    """Identity-level split: no identity appears on both sides."""
    if not 0.0 < test_fraction < 1.0:
        raise ContractViolation("test_fraction must lie strictly between 0 and 1")
    ids = list(identity_ids)
    if len(ids) < 2:
        raise ContractViolation("need at least two identities to split")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5917]))
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_test = int(round(len(ids) * test_fraction))
    n_test = min(max(n_test, 1), len(ids) - 1)
    return SplitManifest(
        train_identities=tuple(sorted(order[n_test:])),
        test_identities=tuple(sorted(order[:n_test])),
    )


def split_corpus(dataset: Dataset, test_fraction: float, seed: int) -> SplitManifest:
    return split_identities(dataset.identities, test_fraction, seed)


def save_dataset(out_dir, dataset: Dataset) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    patch_stack = np.stack([img.patches for img in dataset.images])
    nm.write_blob(out / "patches.bin", patch_stack)
    sig_stack = np.stack([dataset.spec.signatures[w] for w in dataset.spec.vocabulary])
    nm.write_blob(out / "signatures.bin", sig_stack)
    nm.write_blob(out / "complement.bin", dataset.spec.complement)
    save_captions(out / "captions.jsonl", dataset.captions)
    (out / "splits.json").write_text(
        json.dumps(
            {
                "train_identities": list(dataset.split.train_identities),
                "test_identities": list(dataset.split.test_identities),
            },
            indent=1,
        ),
        encoding="utf-8",
    )
    files = ["patches.bin", "signatures.bin", "complement.bin", "captions.jsonl", "splits.json"]
    manifest = {
        "version": DATASET_VERSION,
        "seed": dataset.seed,
        "noise_rate": dataset.noise_rate,
        "m_patches": dataset.m_patches,
        "patch_dim": dataset.spec.patch_dim,
        "categories": {k: list(v) for k, v in dataset.spec.categories.items()},
        "counts": {
            "identities": len(dataset.identities),
            "images": len(dataset.images),
            "captions": len(dataset.captions),
        },
        "images": [
            {"image_id": img.image_id, "identity_id": img.identity_id, "attributes": img.attributes}
            for img in dataset.images
        ],
        "checksums": {name: nm.file_sha256(out / name) for name in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{root}: no manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise FormatError(f"{manifest_path}: not valid JSON") from exc
    if manifest.get("version") != DATASET_VERSION:
        raise FormatError(f"{root}: dataset version {manifest.get('version')} unsupported")
    for name, expected in manifest["checksums"].items():
        actual = nm.file_sha256(root / name)
        if actual != expected:
            raise CorruptionError(f"{root}/{name}: checksum mismatch")

    patch_stack = nm.read_blob(root / "patches.bin")
    signatures = nm.read_blob(root / "signatures.bin")
    complement = nm.read_blob(root / "complement.bin")
    categories = {k: tuple(v) for k, v in manifest["categories"].items()}
    vocab = tuple(w for words in categories.values() for w in words)
    spec = AttributeSpec(
        categories=categories,
        patch_dim=int(manifest["patch_dim"]),
        signatures={w: signatures[i] for i, w in enumerate(vocab)},
        complement=complement,
    )
    images = [
        ImageExample(
            image_id=entry["image_id"],
            identity_id=entry["identity_id"],
            patches=patch_stack[i],
            attributes=dict(entry["attributes"]),
        )
        for i, entry in enumerate(manifest["images"])
    ]
    captions = load_captions(root / "captions.jsonl")
    splits = json.loads((root / "splits.json").read_text(encoding="utf-8"))
    split = SplitManifest(
        train_identities=tuple(splits["train_identities"]),
        test_identities=tuple(splits["test_identities"]),
    )
    return Dataset(
        spec=spec,
        images=images,
        captions=captions,
        split=split,
        m_patches=int(manifest["m_patches"]),
        noise_rate=float(manifest["noise_rate"]),
        seed=int(manifest["seed"]),
        manifest=manifest,
    )


def ingest_external(annotations_json, patches_blob, out_dir, test_fraction: float = 0.5, seed: int = 0) -> Dataset:
    """Pass-through ingestion of an external annotation file.

    Expects a JSON list of {"image_id", "identity_id", "captions": [str, ...]}
    plus a patch-feature blob aligned with the list order. No noise labels.
    """
    try:
        entries = json.loads(Path(annotations_json).read_text(encoding="utf-8"))
        patch_stack = nm.read_blob(patches_blob)
    except ValueError as exc:
        raise FormatError(f"{annotations_json}: not valid JSON") from exc
    if len(entries) != patch_stack.shape[0]:
        raise FormatError(
            f"{len(entries)} annotation entries vs {patch_stack.shape[0]} patch blocks"
        )
    m_patches, patch_dim = patch_stack.shape[1], patch_stack.shape[2]
    default_vocab = sum(len(v) for v in DEFAULT_CATEGORIES.values())
    if patch_dim > default_vocab:
        spec = make_attribute_spec(patch_dim=patch_dim, seed=seed)
    elif patch_dim >= 3:
        # External features can be narrower than the default attribute
        # vocabulary; a placeholder spec keeps the dataset container uniform.
        spec = make_attribute_spec(
            {"slot_a": ("alpha",), "slot_b": ("beta",)}, patch_dim=patch_dim, seed=seed
        )
    else:
        raise FormatError(f"patch features of width {patch_dim} are too narrow")
    images = []
    captions = []
    for i, entry in enumerate(entries):
        images.append(
            ImageExample(
                image_id=entry["image_id"],
                identity_id=entry["identity_id"],
                patches=patch_stack[i],
                attributes={},
            )
        )
        for c, text in enumerate(entry["captions"]):
            captions.append(
                CaptionRecord(
                    image_id=entry["image_id"],
                    text=text,
                    source="static:external",
                    caption_id=f"{entry['image_id']}.c{c}",
                )
            )
    identity_ids = list(dict.fromkeys(img.identity_id for img in images))
    split = split_identities(identity_ids, test_fraction, seed)
    dataset = Dataset(
        spec=spec,
        images=images,
        captions=captions,
        split=split,
        m_patches=m_patches,
        noise_rate=0.0,
        seed=seed,
    )
    save_dataset(out_dir, dataset)
    return dataset
