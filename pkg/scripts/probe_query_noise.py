"""Diagnostic: rank1 measured separately over clean queries and queries
carrying at least one corrupted word — the gap is what masking-based
training is supposed to shrink."""

import json
import pathlib
import sys

import numpy as np

from namtde.corpus import load_dataset
from namtde.encoders import encode_text_batch
from namtde.evaluation import _chunks, _encode_gallery, rank_k
from namtde.tokenizer import tokenize
from namtde.trainer import checkpoint_load


def split_rank1(state, dataset):
    identities = set(dataset.split.test_identities)
    images = [img for img in dataset.images if img.identity_id in identities]
    by_image = dataset.captions_by_image()
    gallery = _encode_gallery(state, images)
    gallery_ids = [img.identity_id for img in images]
    seqs, qids, noisy_flags = [], [], []
    for img in images:
        for cap in by_image.get(img.image_id, ()):
            seqs.append(tokenize(cap.text, state.vocab, caption_id=cap.caption_id))
            qids.append(img.identity_id)
            noisy_flags.append(any(cap.noise_labels or ()))
    rows = []
    for chunk in _chunks(seqs, 64):
        rows.append(encode_text_batch(chunk, state.params, state.encoder_config).global_embeddings.data)
    queries = np.vstack(rows)
    queries = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    sim = queries @ gallery.T
    out = {}
    for tag, keep in (("clean", [not f for f in noisy_flags]), ("noisy", noisy_flags)):
        idx = [i for i, k in enumerate(keep) if k]
        out[tag] = (
            round(rank_k(sim[idx], [qids[i] for i in idx], gallery_ids, 1), 4),
            len(idx),
        )
    return out


if __name__ == "__main__":
    ds = load_dataset(sys.argv[1])
    for ckpt in sys.argv[2:]:
        state = checkpoint_load(pathlib.Path(ckpt))
        print(json.dumps({"ckpt": ckpt, **split_rank1(state, ds)}))
