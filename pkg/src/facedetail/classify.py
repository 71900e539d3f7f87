"""Hand-crafted grid features, a logistic-regression detector and AP/AUC/EER.

Scores are fake-probabilities: higher means more likely fake.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRID = 8
N_FEATURES = 3 * GRID * GRID + 2
GRAY = np.array([0.299, 0.587, 0.114])


def _as_gray(pixels):
    pixels = np.asarray(pixels, dtype=np.float64)
    return pixels @ GRAY if pixels.ndim == 3 else pixels


def laplacian_abs(gray: np.ndarray, valid: np.ndarray):
    """|4-neighbour Laplacian| where a texel and its four neighbours are valid."""
    lap = np.zeros_like(gray)
    ok = np.zeros_like(valid)
    c = gray[1:-1, 1:-1]
    lap[1:-1, 1:-1] = np.abs(gray[:-2, 1:-1] + gray[2:, 1:-1] + gray[1:-1, :-2]
                             + gray[1:-1, 2:] - 4 * c)
    ok[1:-1, 1:-1] = (valid[1:-1, 1:-1] & valid[:-2, 1:-1] & valid[2:, 1:-1]
                      & valid[1:-1, :-2] & valid[1:-1, 2:])
    return np.where(ok, lap, 0.0), ok


def _cell_sums(values, edges_r, edges_c):
    return np.add.reduceat(np.add.reduceat(values, edges_r[:-1], axis=0),
                           edges_c[:-1], axis=1)


def extract_features(pixels, validity=None) -> np.ndarray:
    """194 features: per cell of an 8x8 grid [mean, stdev, mean |Laplacian|]
    of the masked grayscale, then the global [mean, stdev].

    ``pixels`` may be an image array or any object with ``pixels`` and
    ``validity`` attributes.
    """
    if validity is None and hasattr(pixels, "validity"):
        validity = pixels.validity
    if hasattr(pixels, "pixels"):
        pixels = pixels.pixels
    g = _as_gray(pixels)
    h, w = g.shape
    if h < GRID or w < GRID:
        raise ValueError(f"input must be at least {GRID}x{GRID}, got {w}x{h}")
    valid = np.ones_like(g, dtype=bool) if validity is None else np.asarray(validity, dtype=bool)
    g = np.where(valid, g, 0.0)
    er = np.linspace(0, h, GRID + 1).round().astype(int)
    ec = np.linspace(0, w, GRID + 1).round().astype(int)
    n = _cell_sums(valid.astype(np.float64), er, ec)
    s1 = _cell_sums(g, er, ec)
    s2 = _cell_sums(g * g, er, ec)
    safe = np.maximum(n, 1.0)
    mean = np.where(n > 0, s1 / safe, 0.0)
    var = np.where(n > 0, s2 / safe - mean * mean, 0.0)
    std = np.sqrt(np.maximum(var, 0.0))
    lap, lap_ok = laplacian_abs(g, valid)
    nl = _cell_sums(lap_ok.astype(np.float64), er, ec)
    lmean = np.where(nl > 0, _cell_sums(lap, er, ec) / np.maximum(nl, 1.0), 0.0)
    cells = np.stack([mean, std, lmean], axis=-1).reshape(-1)
    if valid.any():
        gv = g[valid]
        glob = np.array([gv.mean(), gv.std()])
    else:
        glob = np.zeros(2)
    return np.concatenate([cells, glob])


@dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray
    variant: str = ""
    loss_history: tuple = ()

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": float(self.bias),
                "mean": self.mean.tolist(), "std": self.std.tolist(),
                "variant": self.variant}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        return cls(np.array(d["weights"]), float(d["bias"]), np.array(d["mean"]),
                   np.array(d["std"]), d.get("variant", ""))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_loss_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float):
    """Mean logistic loss + (l2/2)|w|^2 and its gradient in (w, b)."""
    z = X @ w + b
    # log(1 + e^z) - y z, computed stably
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w)
    r = sigmoid(z) - y
    gw = X.T @ r / len(y) + l2 * w
    gb = float(np.mean(r))
    return float(loss), gw, gb


def _labels(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.dtype.kind in "US":
        if not np.isin(arr, ["real", "fake"]).all():
            raise ValueError("string labels must be 'real' or 'fake'")
        return (arr == "fake").astype(np.float64)
    return arr.astype(np.float64)


def train(features, labels, lr: float = 0.1, epochs: int = 200, l2: float = 1e-4,
          variant: str = "") -> LinearModel:
    """Full-batch gradient descent on standardized features, starting at zero.

    A step that would raise the loss is halved until it does not, so the
    training loss never increases between epochs.
    """
    X = np.asarray(features, dtype=np.float64)
    y = _labels(labels)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("features must be (n, d) with one label per row")
    if len(y) < 2 or y.min() == y.max():
        raise ValueError("training needs at least two samples from both classes")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Z = (X - mu) / sd
    w = np.zeros(X.shape[1])
    b = 0.0
    loss, gw, gb = logistic_loss_grad(w, b, Z, y, l2)
    history = [loss]
    for _ in range(epochs):
        step = lr
        for _ in range(60):
            w_new = w - step * gw
            b_new = b - step * gb
            new_loss, ngw, ngb = logistic_loss_grad(w_new, b_new, Z, y, l2)
            if new_loss <= loss:
                break
            step *= 0.5
        else:
            break
        w, b, loss, gw, gb = w_new, b_new, new_loss, ngw, ngb
        history.append(loss)
    return LinearModel(w, b, mu, sd, variant, tuple(history))


def predict(model: LinearModel, features) -> np.ndarray:
    """Fake-probability for each row (or a single vector)."""
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    X2 = X[None, :] if single else X
    if X2.shape[1] != len(model.weights):
        raise ValueError(
            f"feature dimension {X2.shape[1]} does not match model ({len(model.weights)})")
    p = sigmoid(((X2 - model.mean) / model.std) @ model.weights + model.bias)
    return p[0] if single else p


def fuse_scores(p_img, p_detail):
    """Score fusion of two real-class confidences: real iff their sum exceeds 1."""
    p_img = np.asarray(p_img, dtype=np.float64)
    p_detail = np.asarray(p_detail, dtype=np.float64)
    if np.any((p_img < 0) | (p_img > 1) | (p_detail < 0) | (p_detail > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    real = p_img + p_detail > 1.0
    if real.ndim == 0:
        return "real" if real else "fake"
    return np.where(real, "real", "fake")


def fuse_features(f_img, f_detail) -> np.ndarray:
    """Feature fusion: image features first, then detail features."""
    return np.concatenate([np.asarray(f_img), np.asarray(f_detail)], axis=-1)


@dataclass(frozen=True)
class MetricsReport:
    ap: float
    auc: float
    eer: float
    n_real: int = 0
    n_fake: int = 0

    def to_dict(self) -> dict:
        return {"ap": self.ap, "auc": self.auc, "eer": self.eer,
                "n_real": self.n_real, "n_fake": self.n_fake}


def _roc_points(scores, y):
    """Cumulative (fp, tp) counts at each distinct threshold, highest first."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    yy = y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(yy)[last]
    fp = np.cumsum(1 - yy)[last]
    return np.r_[0.0, fp], np.r_[0.0, tp]


def auc_score(scores, labels) -> float:
    """P(random fake outscores random real), ties counting 1/2 (rank form)."""
    from scipy.stats import rankdata

    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    n_pos = y.sum()
    n_neg = len(y) - n_pos
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def compute_metrics(scores, labels) -> MetricsReport:
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_fake = int(y.sum())
    n_real = len(y) - n_fake
    if n_fake == 0 or n_real == 0:
        raise ValueError("metrics need both real and fake samples")
    fp, tp = _roc_points(s, y)
    # AP: step-wise sum of precision over recall increments.
    recall = tp / n_fake
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 1.0)
    ap = float(np.sum(np.diff(recall) * precision[1:]))
    # EER: where FPR meets FNR, interpolating linearly along the ROC polyline.
    fpr = fp / n_real
    fnr = 1.0 - tp / n_fake
    d = fpr - fnr
    k = int(np.flatnonzero(d >= 0)[0])
    if k == 0 or d[k] == 0:
        eer = float(fpr[k])
    else:
        t = -d[k - 1] / (d[k] - d[k - 1])
        eer = float(fpr[k - 1] + t * (fpr[k] - fpr[k - 1]))
    return MetricsReport(ap, auc_score(s, y), eer, n_real, n_fake)
