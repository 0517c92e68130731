"""Softmax discriminative models of the form p(y | x, S) ∝ exp(f(x)ᵀ g(y)).

A :class:`CanonicalModel` pairs a data encoder ``f`` with a context map ``g``.
Architectures are small frozen descriptors; all trainable arrays live in one
ordered ``params`` dict keyed ``"f.<name>"`` / ``"g.<name>"``. Gradients,
optimizer state and checkpoints reuse the same keys and order.

Supported encoders for ``f``: :class:`MlpArch` (optionally over token-id
inputs) and :class:`LogBilinearArch`. Context maps for ``g``: an MLP,
an :class:`EmbeddingTable`, or :class:`SharedWithF` (metric learning, g = f).
"""

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import SINGULAR_COND, SingularMatrixError, as_matrix, condition_number

ACTIVATIONS = ("relu", "tanh")
CHECKPOINT_FORMAT = "linident-checkpoint/1"


class ShapeError(ValueError):
    pass


class UnknownLabelError(KeyError):
    pass


class CandidateMissingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpArch:
    """Fully connected network; hidden layers use `activation`, output is affine.

    ``sizes = (d_in, h_1, ..., h_L, M)``. When `token_vocab` is set the input
    is an integer array of shape (n, context) and ``d_in`` must equal
    ``context * token_vocab`` (one-hot concatenation).
    """

    sizes: tuple
    activation: str = "relu"
    token_vocab: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ShapeError(f"invalid layer sizes {self.sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.token_vocab is not None and self.sizes[0] % self.token_vocab:
            raise ShapeError("input size must be a multiple of token_vocab")

    @property
    def out_dim(self):
        return self.sizes[-1]

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def param_shapes(self):
        shapes = {}
        for k, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            shapes[f"W{k}"] = (fan_out, fan_in)
            shapes[f"b{k}"] = (fan_out,)
        return shapes


@dataclass(frozen=True)
class EmbeddingTable:
    """Lookup table ``g(y) = W[y]`` over labels ``0..K-1``; W has shape (K, M)."""

    n_labels: int
    dim: int

    @property
    def out_dim(self):
        return self.dim

    def param_shapes(self):
        return {"W": (self.n_labels, self.dim)}


@dataclass(frozen=True)
class LogBilinearArch:
    """Log-bilinear context encoder ``f(w_1..w_c) = sum_i C_i r_{w_i}``.

    Parameters are the context word vectors ``R`` (V, M) and one M x M
    position matrix per context slot, stacked as ``C`` (c, M, M).
    """

    vocab: int
    context: int
    dim: int

    @property
    def out_dim(self):
        return self.dim

    def param_shapes(self):
        return {"R": (self.vocab, self.dim), "C": (self.context, self.dim, self.dim)}


@dataclass(frozen=True)
class SharedWithF:
    """Context map that reuses the data encoder: ``g = f``."""

    def param_shapes(self):
        return {}


_ARCH_TYPES = {
    "mlp": MlpArch,
    "embedding_table": EmbeddingTable,
    "log_bilinear": LogBilinearArch,
    "shared_with_f": SharedWithF,
}
_ARCH_TAGS = {v: k for k, v in _ARCH_TYPES.items()}


def arch_to_dict(arch):
    d = {"type": _ARCH_TAGS[type(arch)]}
    for name in arch.__dataclass_fields__:
        value = getattr(arch, name)
        d[name] = list(value) if isinstance(value, tuple) else value
    return d


def arch_from_dict(d):
    d = dict(d)
    cls = _ARCH_TYPES[d.pop("type")]
    if cls is MlpArch:
        d["sizes"] = tuple(d["sizes"])
    return cls(**d)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CanonicalModel:
    f: object
    g: object
    params: dict = field(repr=False)

    def __post_init__(self):
        if isinstance(self.f, (EmbeddingTable, SharedWithF)):
            raise TypeError("f must be an MLP or log-bilinear encoder")
        if not isinstance(self.g, SharedWithF) and self.g.out_dim != self.f.out_dim:
            raise ShapeError(
                f"f and g must share the representation dimension "
                f"({self.f.out_dim} != {self.g.out_dim})"
            )
        expected = self.param_shapes()
        if list(expected) != list(self.params):
            raise ShapeError(f"parameter keys {list(self.params)} != {list(expected)}")
        for key, shape in expected.items():
            if self.params[key].shape != shape:
                raise ShapeError(f"{key}: shape {self.params[key].shape} != {shape}")

    @property
    def repr_dim(self):
        return self.f.out_dim

    @property
    def activation(self):
        return getattr(self.f, "activation", None)

    def param_shapes(self):
        return _param_shapes(self.f, self.g)

    def with_params(self, params):
        return CanonicalModel(self.f, self.g, dict(params))

    def n_params(self):
        return sum(int(np.prod(s)) for s in self.param_shapes().values())


def _param_shapes(f, g):
    shapes = {f"f.{k}": v for k, v in f.param_shapes().items()}
    shapes.update({f"g.{k}": v for k, v in g.param_shapes().items()})
    return shapes


def _init_block(rng, arch, prefix):
    out = {}
    if isinstance(arch, MlpArch):
        for k, (fan_in, fan_out) in enumerate(zip(arch.sizes[:-1], arch.sizes[1:])):
            out[f"{prefix}.W{k}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_out, fan_in))
            out[f"{prefix}.b{k}"] = np.zeros(fan_out)
    elif isinstance(arch, EmbeddingTable):
        out[f"{prefix}.W"] = rng.normal(0.0, np.sqrt(1.0 / arch.dim), (arch.n_labels, arch.dim))
    elif isinstance(arch, LogBilinearArch):
        out[f"{prefix}.R"] = rng.normal(0.0, np.sqrt(1.0 / arch.dim), (arch.vocab, arch.dim))
        out[f"{prefix}.C"] = rng.normal(
            0.0, np.sqrt(1.0 / arch.dim), (arch.context, arch.dim, arch.dim)
        )
    return out


def init_model(f, g, seed):
    """Randomly initialise a model.

    Weights are Gaussian with std ``sqrt(2 / fan_in)``, biases zero; tables use
    std ``sqrt(1 / M)``.
    """
    rng = np.random.default_rng(seed)
    params = _init_block(rng, f, "f")
    params.update(_init_block(rng, g, "g"))
    return CanonicalModel(f, g, params)


def zero_model(f, g):
    return CanonicalModel(f, g, {k: np.zeros(s) for k, s in _param_shapes(f, g).items()})


# ---------------------------------------------------------------------------
# Forward / backward passes
# ---------------------------------------------------------------------------


def _one_hot_tokens(ids, vocab):
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("token inputs must be integer ids")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError("token id out of range")
    n, c = ids.shape
    x = np.zeros((n, c * vocab))
    cols = ids + vocab * np.arange(c)
    x[np.arange(n)[:, None], cols] = 1.0
    return x


def _act(z, activation):
    return np.maximum(z, 0.0) if activation == "relu" else np.tanh(z)


def _act_grad(z, a, activation):
    return (z > 0).astype(np.float64) if activation == "relu" else 1.0 - a * a


def _mlp_forward(arch, params, prefix, x):
    if arch.token_vocab is not None:
        h = _one_hot_tokens(x, arch.token_vocab)
    else:
        h = np.asarray(x, dtype=np.float64)
        if h.ndim == 1:
            h = h[None, :]
    if h.shape[1] != arch.sizes[0]:
        raise ShapeError(f"expected input dim {arch.sizes[0]}, got {h.shape[1]}")
    cache = [h]
    last = arch.n_layers - 1
    for k in range(arch.n_layers):
        z = h @ params[f"{prefix}.W{k}"].T + params[f"{prefix}.b{k}"]
        h = z if k == last else _act(z, arch.activation)
        cache.append((z, h))
    return h, cache


def _mlp_backward(arch, params, prefix, cache, dout, grads):
    delta = dout
    last = arch.n_layers - 1
    for k in range(last, -1, -1):
        z, a = cache[k + 1]
        if k != last:
            delta = delta * _act_grad(z, a, arch.activation)
        h_in = cache[0] if k == 0 else cache[k][1]
        grads[f"{prefix}.W{k}"] += delta.T @ h_in
        grads[f"{prefix}.b{k}"] += delta.sum(axis=0)
        if k > 0:
            delta = delta @ params[f"{prefix}.W{k}"]


def _check_labels(arch, y):
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        raise UnknownLabelError(f"labels must be integers, got dtype {y.dtype}")
    if y.size and (y.min() < 0 or y.max() >= arch.n_labels):
        bad = y[(y < 0) | (y >= arch.n_labels)][0]
        raise UnknownLabelError(f"label {int(bad)} outside [0, {arch.n_labels})")
    return y


def _logbilinear_ids(arch, x):
    ids = np.asarray(x)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.shape[1] != arch.context or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"expected integer context of length {arch.context}")
    if ids.size and (ids.min() < 0 or ids.max() >= arch.vocab):
        raise ShapeError("token id out of range")
    return ids


def _forward(arch, params, prefix, x):
    """Return (output, cache) for one encoder block."""
    if isinstance(arch, MlpArch):
        return _mlp_forward(arch, params, prefix, x)
    if isinstance(arch, EmbeddingTable):
        y = np.atleast_1d(_check_labels(arch, x))
        return params[f"{prefix}.W"][y], y
    if isinstance(arch, LogBilinearArch):
        ids = _logbilinear_ids(arch, x)
        r = params[f"{prefix}.R"][ids]  # (n, c, M)
        out = np.einsum("bcm,cnm->bn", r, params[f"{prefix}.C"])
        return out, (ids, r)
    raise TypeError(f"cannot evaluate {arch!r}")


def _backward(arch, params, prefix, cache, dout, grads):
    if isinstance(arch, MlpArch):
        _mlp_backward(arch, params, prefix, cache, dout, grads)
    elif isinstance(arch, EmbeddingTable):
        np.add.at(grads[f"{prefix}.W"], cache, dout)
    elif isinstance(arch, LogBilinearArch):
        ids, r = cache
        grads[f"{prefix}.C"] += np.einsum("bn,bcm->cnm", dout, r)
        dr = np.einsum("bn,cnm->bcm", dout, params[f"{prefix}.C"])
        np.add.at(grads[f"{prefix}.R"], ids, dr)


def encode_f(model, x, capture_layers=False):
    """Data representation ``f(x)`` for a batch of inputs, shape (n, M).

    With ``capture_layers=True`` also returns the list of every layer's
    output (hidden activations after the nonlinearity, then the final
    representation). Log-bilinear encoders expose the summed context vector
    only.
    """
    out, cache = _forward(model.f, model.params, "f", x)
    if not capture_layers:
        return out
    if isinstance(model.f, MlpArch):
        layers = [h for _, h in cache[1:]]
    else:
        layers = [out]
    return out, layers


def encode_g(model, y):
    """Context representation ``g(y)`` for a batch of targets, shape (n, M)."""
    if isinstance(model.g, SharedWithF):
        return encode_f(model, y)
    out, _ = _forward(model.g, model.params, "g", y)
    return out


def logsumexp_rows(logits):
    """Row-wise log-sum-exp with max subtraction; ``-inf`` entries are ignored."""
    m = np.max(logits, axis=1, keepdims=True)
    with np.errstate(under="ignore"):
        s = np.sum(np.exp(logits - m), axis=1, keepdims=True)
    return (m + np.log(s))[:, 0]


def _payload_index(pool, y):
    y = np.asarray(y)
    for i, item in enumerate(pool):
        if np.asarray(item).shape == y.shape and np.array_equal(item, y):
            return i
    return -1


def log_prob(model, x, y, S):
    """``log p(y | x, S)`` for a single triple.

    Raises
    ------
    CandidateMissingError
        If `y` is not a member of `S`.
    """
    pool = np.asarray(S)
    idx = _payload_index(pool, y)
    if idx < 0:
        raise CandidateMissingError("target is not in the candidate set")
    fx = encode_f(model, np.asarray(x)[None, ...])[0]
    logits = encode_g(model, pool) @ fx
    return float(logits[idx] - logsumexp_rows(logits[None, :])[0])


def z_normalizer(model, x, pool, mask=None):
    """``Z(x, S) = log sum_{y' in S} exp(f(x)ᵀ g(y'))`` for each row of `x`.

    `mask` (n, T) selects the candidate set of each row out of `pool`;
    default is the whole pool for every row.
    """
    logits = encode_f(model, x) @ encode_g(model, pool).T
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    return logsumexp_rows(logits)


# ---------------------------------------------------------------------------
# Candidate batches and the training objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateBatch:
    """Minibatch of (x, y, S) triples.

    Candidate payloads are stored once in `pool`; each example's candidate
    set is a row of the boolean `candidates` mask (n, T) and its target is
    the pool index `positives[i]`.
    """

    inputs: np.ndarray
    pool: np.ndarray
    candidates: np.ndarray
    positives: np.ndarray

    def __post_init__(self):
        n = len(self.inputs)
        if n == 0:
            raise ValueError("batch must be non-empty")
        cand = np.asarray(self.candidates, dtype=bool)
        pos = np.asarray(self.positives, dtype=np.int64)
        if cand.shape != (n, len(self.pool)) or pos.shape != (n,):
            raise ShapeError("inconsistent batch shapes")
        if not np.all(cand[np.arange(n), pos]):
            raise CandidateMissingError("every target must be in its candidate set")
        if np.any(cand.sum(axis=1) < 2):
            raise ValueError("every candidate set needs at least 2 members")
        object.__setattr__(self, "candidates", cand)
        object.__setattr__(self, "positives", pos)

    def __len__(self):
        return len(self.inputs)

    def triples(self):
        for i in range(len(self)):
            S = [self.pool[j] for j in np.flatnonzero(self.candidates[i])]
            yield self.inputs[i], self.pool[self.positives[i]], S

    @classmethod
    def from_triples(cls, triples):
        """Build a batch from ``(x, y, S)`` triples, de-duplicating payloads."""
        pool, keys, rows = [], {}, []
        inputs, positives = [], []

        def key_of(item):
            a = np.ascontiguousarray(item)
            return (a.dtype.str, a.shape, a.tobytes())

        for x, y, S in triples:
            idx = []
            for item in S:
                k = key_of(item)
                if k not in keys:
                    keys[k] = len(pool)
                    pool.append(np.asarray(item))
                idx.append(keys[k])
            ky = key_of(y)
            if ky not in keys or keys[ky] not in idx:
                raise CandidateMissingError("target is not in the candidate set")
            inputs.append(np.asarray(x))
            positives.append(keys[ky])
            rows.append(idx)
        mask = np.zeros((len(rows), len(pool)), dtype=bool)
        for i, idx in enumerate(rows):
            mask[i, idx] = True
        return cls(np.stack(inputs), np.stack(pool), mask, np.array(positives))


def batch_log_probs(model, batch):
    """Per-example log-probabilities of the positives, shape (n,)."""
    logits = encode_f(model, batch.inputs) @ encode_g(model, batch.pool).T
    logits = np.where(batch.candidates, logits, -np.inf)
    lse = logsumexp_rows(logits)
    return logits[np.arange(len(batch)), batch.positives] - lse


def nll(model, batch):
    return float(-np.mean(batch_log_probs(model, batch)))


def nll_and_grads(model, batch):
    """Mean negative log-likelihood of `batch` and its gradient.

    Returns
    -------
    loss : float
    grads : dict
        Same keys and shapes as ``model.params``.
    """
    n = len(batch)
    params = model.params
    F, f_cache = _forward(model.f, params, "f", batch.inputs)
    shared = isinstance(model.g, SharedWithF)
    if shared:
        G, g_cache = _forward(model.f, params, "f", batch.pool)
    else:
        G, g_cache = _forward(model.g, params, "g", batch.pool)

    logits = np.where(batch.candidates, F @ G.T, -np.inf)
    lse = logsumexp_rows(logits)
    rows = np.arange(n)
    loss = float(-np.mean(logits[rows, batch.positives] - lse))

    with np.errstate(under="ignore"):
        delta = np.exp(logits - lse[:, None])
    delta[rows, batch.positives] -= 1.0
    delta /= n
    dF = delta @ G
    dG = delta.T @ F

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    _backward(model.f, params, "f", f_cache, dF, grads)
    if shared:
        _backward(model.f, params, "f", g_cache, dG, grads)
    else:
        _backward(model.g, params, "g", g_cache, dG, grads)
    return loss, grads


# ---------------------------------------------------------------------------
# Linear reparameterisation
# ---------------------------------------------------------------------------


def _check_transform(m, dim, name):
    m = as_matrix(m, name)
    if m.shape != (dim, dim):
        raise ShapeError(f"{name} must be {dim}x{dim}, got {m.shape}")
    cond = condition_number(m)
    if not cond < SINGULAR_COND:
        raise SingularMatrixError(f"{name} is not invertible (cond={cond:.3g})", cond)
    return m


def _transform_block(arch, params, prefix, T):
    if isinstance(arch, MlpArch):
        last = arch.n_layers - 1
        params[f"{prefix}.W{last}"] = T @ params[f"{prefix}.W{last}"]
        params[f"{prefix}.b{last}"] = T @ params[f"{prefix}.b{last}"]
    elif isinstance(arch, EmbeddingTable):
        params[f"{prefix}.W"] = params[f"{prefix}.W"] @ T.T
    elif isinstance(arch, LogBilinearArch):
        params[f"{prefix}.C"] = np.einsum("ij,cjm->cim", T, params[f"{prefix}.C"])


def apply_linear_transform(model, A, B):
    """Model with ``f'(x) = A f(x)`` and ``g'(y) = B g(y)``.

    Realised exactly by left-multiplying the final affine layer (or table)
    of each side. For a shared encoder ``A`` and ``B`` must coincide.
    """
    M = model.repr_dim
    A = _check_transform(A, M, "A")
    B = _check_transform(B, M, "B")
    params = {k: v.copy() for k, v in model.params.items()}
    _transform_block(model.f, params, "f", A)
    if isinstance(model.g, SharedWithF):
        if not np.allclose(A, B, rtol=0.0, atol=1e-12):
            raise ValueError("a shared encoder needs A == B")
    else:
        _transform_block(model.g, params, "g", B)
    return model.with_params(params)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model, seed=None, iteration=None, extra=None):
    """Write a JSON header line followed by one base64 line per parameter block.

    Blocks are little-endian float64 in ``model.params`` order.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "architecture": {"f": arch_to_dict(model.f), "g": arch_to_dict(model.g)},
        "M": model.repr_dim,
        "activation": model.activation,
        "seed": seed,
        "iteration": iteration,
        "blocks": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }
    if extra:
        header["extra"] = extra
    lines = [json.dumps(header, sort_keys=True)]
    for v in model.params.values():
        raw = np.ascontiguousarray(v, dtype="<f8").tobytes()
        lines.append(base64.b64encode(raw).decode("ascii"))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`. Returns ``(model, header)``."""
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    blocks = header["blocks"]
    if len(lines) - 1 != len(blocks):
        raise ValueError(f"{path}: expected {len(blocks)} parameter blocks")
    params = {}
    for spec, line in zip(blocks, lines[1:]):
        arr = np.frombuffer(base64.b64decode(line), dtype="<f8")
        params[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float64)
    arch = header["architecture"]
    model = CanonicalModel(arch_from_dict(arch["f"]), arch_from_dict(arch["g"]), params)
    return model, header
