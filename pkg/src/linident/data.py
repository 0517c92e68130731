"""Dataset generators and loaders.

* radial Gaussian classification data with optional pure-noise dimensions,
  plus relabelling by a trained teacher model;
* smooth synthetic images, top/bottom patch pairs with brightness/contrast
  augmentation, and a CIFAR-10 binary reader;
* a first-order Markov token corpus.

All generators are deterministic given their seed.
"""

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import EmbeddingTable, apply_linear_transform, encode_f, encode_g

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


class MalformedFileError(ValueError):
    pass


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) ints in [0, K)
    n_classes: int
    noise_dims: int = 0

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.n_classes, self.noise_dims)


@dataclass(frozen=True)
class PatchPairSet:
    top: np.ndarray  # (n, d)
    bottom: np.ndarray  # (n, d)
    image_ids: np.ndarray  # (n,)

    def __post_init__(self):
        if self.top.shape != self.bottom.shape or len(self.image_ids) != len(self.top):
            raise ValueError("top, bottom and image_ids must have matching lengths")

    def __len__(self):
        return len(self.top)

    def subset(self, idx):
        return PatchPairSet(self.top[idx], self.bottom[idx], self.image_ids[idx])


@dataclass(frozen=True)
class TokenCorpus:
    tokens: np.ndarray  # (length,)
    vocab: int
    context: int = 1  # window n - 1

    def __post_init__(self):
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= self.vocab):
            raise ValueError("token ids must lie in [0, vocab)")

    def __len__(self):
        return max(len(self.tokens) - self.context, 0)

    def examples(self, idx=None):
        """Return ``(contexts, next_tokens)`` for positions ``context..length-1``."""
        starts = np.arange(len(self)) if idx is None else np.asarray(idx)
        offsets = np.arange(self.context)
        contexts = self.tokens[starts[:, None] + offsets]
        return contexts, self.tokens[starts + self.context]


# ---------------------------------------------------------------------------
# Radial classification data
# ---------------------------------------------------------------------------


def radial_labels(xy, n_classes):
    """Equal angular sectors anchored at angle 0, counter-clockwise."""
    xy = np.asarray(xy, dtype=np.float64)
    angle = np.mod(np.arctan2(xy[:, 1], xy[:, 0]), 2 * np.pi)
    labels = np.floor(n_classes * angle / (2 * np.pi)).astype(np.int64)
    return np.minimum(labels, n_classes - 1)


def radial_gaussian(n, n_classes=18, sigma=3.0, noise_dims=20, seed=0):
    """2-D isotropic Gaussian points labelled by angular sector.

    `noise_dims` standard-normal columns are appended after the two
    coordinates; they never influence the label.
    """
    if n_classes < 2 or n < n_classes:
        raise ValueError("need n_classes >= 2 and n >= n_classes")
    rng = np.random.default_rng(seed)
    xy = rng.normal(0.0, sigma, size=(n, 2))
    noise = rng.standard_normal((n, noise_dims))
    inputs = np.hstack([xy, noise])
    return LabeledDataset(inputs, radial_labels(xy, n_classes), n_classes, noise_dims)


def teacher_relabel(teacher, inputs):
    """Labels ``argmax_y f(x)ᵀ g(y)`` under `teacher`; ties go to the lowest index."""
    if not isinstance(teacher.g, EmbeddingTable):
        raise TypeError("teacher must use an embedding-table context map")
    logits = encode_f(teacher, inputs) @ encode_g(teacher, np.arange(teacher.g.n_labels)).T
    return np.argmax(logits, axis=1)


def temper_teacher(teacher, inputs, logit_scale=8.0):
    """Rescale the teacher's context vectors so its logits have std `logit_scale`.

    The rescaling is a linear map on g, so the tempered teacher stays in the
    same model family and has the same argmax labels.
    """
    if not logit_scale > 0:
        raise ValueError("logit_scale must be positive")
    logits = encode_f(teacher, inputs) @ encode_g(teacher, np.arange(teacher.g.n_labels)).T
    spread = float(np.std(logits))
    if spread == 0.0:
        raise ValueError("teacher logits are constant")
    M = teacher.repr_dim
    return apply_linear_transform(teacher, np.eye(M), (logit_scale / spread) * np.eye(M))


def teacher_sample(teacher, inputs, seed=0):
    """Labels drawn from the teacher's softmax ``p(y | x)`` over all K labels."""
    if not isinstance(teacher.g, EmbeddingTable):
        raise TypeError("teacher must use an embedding-table context map")
    logits = encode_f(teacher, inputs) @ encode_g(teacher, np.arange(teacher.g.n_labels)).T
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    cumulative = np.cumsum(p / p.sum(axis=1, keepdims=True), axis=1)
    u = np.random.default_rng(seed).random(len(cumulative))[:, None]
    return np.minimum((cumulative <= u).sum(axis=1), teacher.g.n_labels - 1)


# ---------------------------------------------------------------------------
# Images and patches
# ---------------------------------------------------------------------------


def synthetic_images(n, size=32, channels=3, latent_dim=8, n_basis=24, seed=0):
    """Smooth random images in [0, 1] driven by a per-image latent vector.

    Each image is ``sigmoid(sum_j (z @ P)_j * basis_j)`` over a fixed bank of
    random low-frequency plane waves. The latent vector is shared by the
    whole image, so its top and bottom halves are statistically dependent.
    The basis bank depends on `seed` only through a fixed offset, so the
    generator with different seeds samples different images from the same
    distribution.
    """
    bank_rng = np.random.default_rng(0x5EED)
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    freqs = bank_rng.uniform(-3.0, 3.0, size=(n_basis, 2)) * (2 * np.pi / size)
    phases = bank_rng.uniform(0, 2 * np.pi, size=(n_basis, channels))
    basis = np.cos(
        freqs[:, 0, None, None, None] * rows + freqs[:, 1, None, None, None] * cols
        + phases[:, :, None, None]
    )  # (n_basis, channels, size, size)
    mixing = bank_rng.standard_normal((latent_dim, n_basis)) / np.sqrt(latent_dim)

    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, latent_dim))
    coeffs = z @ mixing
    logits = np.einsum("nb,bchw->nchw", coeffs, basis)
    return 1.0 / (1.0 + np.exp(-logits))


@dataclass(frozen=True)
class PatchGeometry:
    height: int = 8
    width: int = 14


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    brightness: float = 0.2
    contrast_low: float = 0.8
    contrast_high: float = 1.25


def augment_patch(patch, brightness, contrast):
    """Contrast about the patch mean, then additive brightness, clamped to [0, 1]."""
    mean = patch.mean()
    return np.clip((patch - mean) * contrast + mean + brightness, 0.0, 1.0)


def patch_pairs(images, geometry=PatchGeometry(), augment=AugmentConfig(), seed=0):
    """One random crop from the top half and one from the bottom half per image.

    `images` has shape (n, C, H, W) or (n, H, W) with values in [0, 1].
    Patches are flattened channel-major.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    n, _, H, W = images.shape
    ph, pw = geometry.height, geometry.width
    if H < 2 * ph or W < pw or ph < 1 or pw < 1:
        raise GeometryError(f"{ph}x{pw} patches do not fit in half of a {H}x{W} image")
    rng = np.random.default_rng(seed)
    half = H // 2
    tops, bottoms = [], []
    for i in range(n):
        r0 = rng.integers(0, half - ph + 1)
        c0 = rng.integers(0, W - pw + 1)
        r1 = half + rng.integers(0, H - half - ph + 1)
        c1 = rng.integers(0, W - pw + 1)
        top = images[i, :, r0:r0 + ph, c0:c0 + pw]
        bottom = images[i, :, r1:r1 + ph, c1:c1 + pw]
        if augment.enabled:
            b = rng.uniform(-augment.brightness, augment.brightness, size=2)
            c = np.exp(rng.uniform(np.log(augment.contrast_low), np.log(augment.contrast_high), size=2))
            top = augment_patch(top, b[0], c[0])
            bottom = augment_patch(bottom, b[1], c[1])
        tops.append(top.ravel())
        bottoms.append(bottom.ravel())
    return PatchPairSet(np.array(tops), np.array(bottoms), np.arange(n))


def load_cifar10(path):
    """Read a CIFAR-10 binary-version file.

    Returns
    -------
    images : ndarray, shape (n, 3, 32, 32), values ``byte / 255``
    labels : ndarray, shape (n,)
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise MalformedFileError(
            f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD} bytes"
        )
    records = raw.reshape(-1, CIFAR_RECORD)
    images = records[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float64) / 255.0
    return images, records[:, 0].astype(np.int64)


# ---------------------------------------------------------------------------
# Token corpus
# ---------------------------------------------------------------------------


def markov_transitions(vocab, temperature=1.0, seed=0, rank=None):
    """Row-stochastic matrix ``softmax(logits / temperature)``.

    Logits are standard normal, or a product of two Gaussian factors when
    `rank` is given (then ``rank`` bounds the rank of the logit matrix).
    """
    rng = np.random.default_rng(seed)
    if rank is None:
        logits = rng.standard_normal((vocab, vocab))
    else:
        logits = rng.standard_normal((vocab, rank)) @ rng.standard_normal((rank, vocab))
        logits /= np.sqrt(rank)
    logits = logits / temperature
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def markov_corpus(vocab, length, temperature=1.0, seed=0, context=1, rank=None,
                  rollout_seed=None):
    """Roll out a first-order Markov chain over ``vocab`` tokens.

    `seed` fixes the transition matrix; `rollout_seed` (if given) draws a
    different trajectory from the same chain, e.g. for held-out text.
    """
    if vocab < 8:
        raise ValueError("vocab must be at least 8")
    transitions = markov_transitions(vocab, temperature, seed, rank)
    cumulative = np.cumsum(transitions, axis=1)
    key = (1,) if rollout_seed is None else (1, rollout_seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))
    u = rng.random(length)
    tokens = np.empty(length, dtype=np.int64)
    state = int(rng.integers(vocab))
    for t in range(length):
        state = min(int(np.searchsorted(cumulative[state], u[t], side="right")), vocab - 1)
        tokens[t] = state
    return TokenCorpus(tokens, vocab, context)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def write_table(path, header, rows, meta=None):
    """CSV with a header row; `meta` (if given) goes to ``<path>.json``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    if meta is not None:
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def export_dataset(path, dataset, generator, params, seed):
    """Write any generated dataset as CSV plus a JSON sidecar."""
    if isinstance(dataset, LabeledDataset):
        d = dataset.inputs.shape[1]
        header = [f"x{j}" for j in range(d)] + ["label"]
        rows = (list(x) + [int(y)] for x, y in zip(dataset.inputs, dataset.labels))
    elif isinstance(dataset, PatchPairSet):
        d = dataset.top.shape[1]
        header = ["image_id"] + [f"top{j}" for j in range(d)] + [f"bottom{j}" for j in range(d)]
        rows = (
            [int(i)] + list(t) + list(b)
            for i, t, b in zip(dataset.image_ids, dataset.top, dataset.bottom)
        )
    elif isinstance(dataset, TokenCorpus):
        header = ["token"]
        rows = ([int(t)] for t in dataset.tokens)
    else:
        raise TypeError(f"cannot export {type(dataset).__name__}")
    meta = {"generator": generator, "seed": seed, "parameters": params}
    write_table(path, header, rows, meta)


def read_dataset(path):
    """Inverse of :func:`export_dataset` (reads the sidecar to pick the type)."""
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    with path.open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        body = [row for row in reader]
    if header == ["token"]:
        tokens = np.array([int(r[0]) for r in body], dtype=np.int64)
        p = meta["parameters"]
        return TokenCorpus(tokens, int(p["vocab"]), int(p.get("context", 1))), meta
    if header[-1] == "label":
        arr = np.array(body, dtype=np.float64).reshape(len(body), len(header))
        p = meta["parameters"]
        return LabeledDataset(
            arr[:, :-1], arr[:, -1].astype(np.int64), int(p["n_classes"]), int(p.get("noise_dims", 0))
        ), meta
    arr = np.array(body, dtype=np.float64).reshape(len(body), len(header))
    d = (arr.shape[1] - 1) // 2
    return PatchPairSet(arr[:, 1:1 + d], arr[:, 1 + d:], arr[:, 0].astype(np.int64)), meta
