"""Corpus-level evaluation: decompose every manifest image, featurize, train, score."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .classify import compute_metrics, fuse_features, predict, train, MetricsReport
from .detail import Variant, compose_all
from .fitting import decompose
from .synth import SyntheticModel, load_model, read_manifest

FUSION_PAIR = (Variant.IN_A, Variant.IN_G)
EVAL_CHOICES = [v.value for v in Variant] + ["fuse-sf", "fuse-ff"]


def required_variants(spec: str) -> list[Variant]:
    if spec in ("fuse-sf", "fuse-ff"):
        return list(FUSION_PAIR)
    return [Variant(spec)]


def featurize_image(pixels: np.ndarray, model: SyntheticModel, variants) -> dict:
    from .classify import extract_features

    d = decompose(pixels, model.mesh, model.camera, model.texture_model)
    imgs = compose_all(d, model.mesh, model.camera, model.texture_model, pixels, variants)
    return {v: extract_features(img) for v, img in imgs.items()}


@dataclass
class CorpusFeatures:
    features: dict          # Variant -> (n, 194)
    labels: np.ndarray      # 1 = fake
    paths: list


def corpus_features(manifest, variants=None, model: SyntheticModel | None = None,
                    workers: int = 1) -> CorpusFeatures:
    manifest = Path(manifest)
    records = read_manifest(manifest)
    root = manifest.parent
    if model is None:
        model = load_model(root / "model.json")
    variants = [Variant(v) for v in (variants or list(Variant))]

    def job(rec):
        return featurize_image(formats.read_ppm(root / rec["path"]), model, variants)

    if workers <= 1:
        rows = [job(r) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(job, records))
    feats = {v: np.stack([r[v] for r in rows]) for v in variants}
    labels = np.array([1.0 if r["label"] == "fake" else 0.0 for r in records])
    return CorpusFeatures(feats, labels, [r["path"] for r in records])


def split_indices(n: int, split: float, seed: int):
    if not 0.0 < split < 1.0:
        raise ValueError("split must lie strictly between 0 and 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B1]))
    perm = rng.permutation(n)
    cut = int(round(split * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def train_eval(corpus: CorpusFeatures, spec: str, split: float = 0.7, seed: int = 0,
               lr: float = 0.1, epochs: int = 200, l2: float = 1e-4) -> MetricsReport:
    """Train on a seeded image-level split and report test-set metrics."""
    y = corpus.labels
    tr, te = split_indices(len(y), split, seed)
    if y[tr].min() == y[tr].max() or y[te].min() == y[te].max():
        raise ValueError("split leaves a single class in train or test")
    if spec == "fuse-ff":
        X = fuse_features(corpus.features[FUSION_PAIR[0]], corpus.features[FUSION_PAIR[1]])
        m = train(X[tr], y[tr], lr, epochs, l2, variant=spec)
        scores = predict(m, X[te])
    elif spec == "fuse-sf":
        # Sum of the two streams' real confidences; a larger sum is more real,
        # so the fake score is the sum of fake-probabilities.
        scores = np.zeros(len(te))
        for v in FUSION_PAIR:
            X = corpus.features[v]
            m = train(X[tr], y[tr], lr, epochs, l2, variant=v.value)
            scores += predict(m, X[te])
    else:
        X = corpus.features[Variant(spec)]
        m = train(X[tr], y[tr], lr, epochs, l2, variant=spec)
        scores = predict(m, X[te])
    return compute_metrics(scores, y[te])
