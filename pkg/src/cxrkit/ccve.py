"""Cluster-conditioned contrastive image/text encoder (CCVE), desk scale.

Image path::

    x --(filter k, c x c)--> y --(conv m x c2 x c2 + b, relu)--> h
      --(global mean)--> pooled --(proj)--> z --(L2)--> image embedding

Text path: mean of token embeddings -> projection -> L2 normalise.

Training minimises the symmetric contrastive loss between the two with
hand-derived gradients; everything runs in float64 numpy.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import Divergence, EmptyText, KernelTooLarge, ModelFormatError, ZeroNorm

logger = logging.getLogger(__name__)

MODEL_FORMAT = "cxrkit-ccve"
MODEL_VERSION = 1
MAX_INV_TAU = 200.0
INIT_TAU = 0.07
NORM_EPS = 1e-12

PARAM_NAMES = ("filters", "conv_w", "conv_b", "proj_w", "proj_b",
               "tok_emb", "text_w", "text_b", "log_inv_tau")


@dataclass
class CcveModel:
    params: Dict[str, np.ndarray]
    vocab: Tuple[str, ...]
    freeze_filters: bool = False
    _index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._index = {tok: i for i, tok in enumerate(self.vocab)}

    @property
    def K(self) -> int:
        return self.params["filters"].shape[0]

    @property
    def c(self) -> int:
        return self.params["filters"].shape[1]

    @property
    def d(self) -> int:
        return self.params["proj_w"].shape[0]

    @property
    def inv_tau(self) -> float:
        return float(np.exp(self.params["log_inv_tau"]))

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.params.items()}

    def token_ids(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self._index[t] for t in tokens if t in self._index], dtype=np.int64)

    def filter_for(self, cluster: int) -> int:
        """Filter index used for a sample of ``cluster``; a single-filter model shares it."""
        if self.K == 1:
            return 0
        if not 0 <= cluster < self.K:
            raise ValueError(f"cluster {cluster} out of range for K={self.K}")
        return cluster

    def copy(self) -> "CcveModel":
        return CcveModel({k: v.copy() for k, v in self.params.items()}, self.vocab, self.freeze_filters)


@dataclass
class TrainSample:
    image: np.ndarray
    tokens: Tuple[str, ...]
    cluster: int
    id: str = ""


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 0.2
    seed: int = 0


def delta_kernel(c: int) -> np.ndarray:
    k = np.zeros((c, c))
    k[c // 2, c // 2] = 1.0
    return k


def init_model(vocab: Sequence[str], K: int = 13, c: int = 3, c2: int = 3, m: int = 8,
               d: int = 16, dt: int = 16, seed: int = 0, filter_noise: float = 0.05,
               freeze_filters: bool = False) -> CcveModel:
    """Filters start at the delta kernel plus uniform noise; the rest is scaled Gaussian."""
    if c % 2 == 0:
        raise ValueError("filter size must be odd so the delta kernel is centred")
    rng = np.random.default_rng(seed)
    filters = np.repeat(delta_kernel(c)[None], K, axis=0)
    if filter_noise:
        filters = filters + rng.uniform(-filter_noise, filter_noise, size=filters.shape)
    params = {
        "filters": filters,
        "conv_w": rng.normal(0.0, 1.0 / c2, size=(m, c2, c2)),
        "conv_b": np.full(m, 0.01),
        "proj_w": rng.normal(0.0, 1.0 / math.sqrt(m), size=(d, m)),
        "proj_b": np.zeros(d),
        "tok_emb": rng.normal(0.0, 1.0, size=(len(vocab), dt)),
        "text_w": rng.normal(0.0, 1.0 / math.sqrt(dt), size=(d, dt)),
        "text_b": np.zeros(d),
        "log_inv_tau": np.array(math.log(1.0 / INIT_TAU)),
    }
    return CcveModel(params, tuple(vocab), freeze_filters)


def cve_model(vocab: Sequence[str], **kwargs) -> CcveModel:
    """Plain contrastive baseline: one frozen identity filter."""
    kwargs.update(K=1, filter_noise=0.0, freeze_filters=True)
    return init_model(vocab, **kwargs)


# --------------------------------------------------------------------------- convolutions

def conv2d_valid(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Stride-1 valid cross-correlation."""
    image = np.asarray(image, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    kh, kw = kernel.shape
    if image.shape[0] < kh or image.shape[1] < kw:
        raise KernelTooLarge(f"kernel {kernel.shape} larger than image {image.shape}")
    return np.einsum("ijkl,kl->ij", sliding_window_view(image, (kh, kw)), kernel)


def _windows(x: np.ndarray, c: int) -> np.ndarray:
    # (B, H, W) -> (B, H-c+1, W-c+1, c, c)
    if x.shape[1] < c or x.shape[2] < c:
        raise KernelTooLarge(f"kernel {c}x{c} larger than image {x.shape[1:]}")
    return sliding_window_view(x, (c, c), axis=(1, 2))


# --------------------------------------------------------------------------- forward passes

def _normalize(z: np.ndarray, what: str, offset: int = 0):
    norms = np.linalg.norm(z, axis=1)
    bad = np.flatnonzero(norms < NORM_EPS)
    if bad.size:
        raise ZeroNorm(f"{what} embedding {offset + bad[0]} has zero norm", row=int(offset + bad[0]))
    return z / norms[:, None], norms


def _image_forward(p, x: np.ndarray, fidx: np.ndarray):
    """x: (B, H, W) equal-sized images; fidx: filter index per image."""
    filt = p["filters"][fidx]
    c = filt.shape[-1]
    c2 = p["conv_w"].shape[-1]
    xw = _windows(x, c)
    y = np.einsum("bijkl,bkl->bij", xw, filt)
    yw = _windows(y, c2)
    u = np.einsum("bijkl,mkl->bmij", yw, p["conv_w"]) + p["conv_b"][None, :, None, None]
    h = np.maximum(u, 0.0)
    pooled = h.mean(axis=(2, 3))
    z = pooled @ p["proj_w"].T + p["proj_b"]
    return z, (xw, y, yw, u, pooled)


def _image_backward(p, fidx, cache, dz, grads):
    xw, y, yw, u, pooled = cache
    grads["proj_w"] += dz.T @ pooled
    grads["proj_b"] += dz.sum(axis=0)
    dpooled = dz @ p["proj_w"]
    hw = u.shape[2] * u.shape[3]
    du = np.where(u > 0.0, dpooled[:, :, None, None] / hw, 0.0)
    grads["conv_b"] += du.sum(axis=(0, 2, 3))
    grads["conv_w"] += np.einsum("bmij,bijkl->mkl", du, yw)
    c2 = p["conv_w"].shape[-1]
    H2, W2 = u.shape[2], u.shape[3]
    dy = np.zeros_like(y)
    for a in range(c2):
        for b in range(c2):
            dy[:, a:a + H2, b:b + W2] += np.einsum("bmij,m->bij", du, p["conv_w"][:, a, b])
    dfilt = np.einsum("bij,bijkl->bkl", dy, xw)
    np.add.at(grads["filters"], fidx, dfilt)


def _text_forward(p, ids: Sequence[np.ndarray]):
    emb = p["tok_emb"]
    t0 = np.stack([emb[i].mean(axis=0) for i in ids])
    return t0 @ p["text_w"].T + p["text_b"], t0


def _text_backward(p, ids, t0, dz, grads):
    grads["text_w"] += dz.T @ t0
    grads["text_b"] += dz.sum(axis=0)
    dt0 = dz @ p["text_w"]
    for b, i in enumerate(ids):
        np.add.at(grads["tok_emb"], i, dt0[b] / len(i))


def _normalize_backward(e, norms, de):
    # d(z/|z|) = (I - e e^T) / |z|
    return (de - e * np.sum(e * de, axis=1, keepdims=True)) / norms[:, None]


def _group_by_shape(images: Sequence[np.ndarray]) -> Dict[Tuple[int, int], List[int]]:
    groups: Dict[Tuple[int, int], List[int]] = {}
    for i, img in enumerate(images):
        groups.setdefault(np.shape(img), []).append(i)
    return groups


def _encode_images_raw(model: CcveModel, images, filters):
    """Unnormalised image outputs plus per-group caches for backprop."""
    z = np.empty((len(images), model.d))
    caches = []
    for _, idx in _group_by_shape(images).items():
        x = np.stack([np.asarray(images[i], dtype=float) for i in idx])
        fidx = np.asarray([filters[i] for i in idx], dtype=np.int64)
        zi, cache = _image_forward(model.params, x, fidx)
        z[idx] = zi
        caches.append((idx, fidx, cache))
    return z, caches


def encode_image(model: CcveModel, image: np.ndarray, k: int) -> np.ndarray:
    if not 0 <= k < model.K:
        raise ValueError(f"filter index {k} out of range for K={model.K}")
    z, _ = _encode_images_raw(model, [image], [k])
    return _normalize(z, "image")[0][0]


def _token_ids(model: CcveModel, tokens: Sequence[str]) -> np.ndarray:
    ids = model.token_ids(tokens)
    if ids.size == 0:
        raise EmptyText(f"no in-vocabulary tokens in {list(tokens)[:8]!r}")
    return ids


def encode_text(model: CcveModel, tokens: Sequence[str]) -> np.ndarray:
    z, _ = _text_forward(model.params, [_token_ids(model, tokens)])
    return _normalize(z, "text")[0][0]


def embed_all(model: CcveModel, image: np.ndarray) -> np.ndarray:
    """K x d matrix, row k = image seen through filter k."""
    z, _ = _encode_images_raw(model, [image] * model.K, list(range(model.K)))
    return _normalize(z, "filter")[0]


# --------------------------------------------------------------------------- loss

def _log_softmax(s: np.ndarray, axis: int) -> np.ndarray:
    mx = s.max(axis=axis, keepdims=True)
    return s - mx - np.log(np.exp(s - mx).sum(axis=axis, keepdims=True))


def clip_loss(Z: np.ndarray, T: np.ndarray, inv_tau: float) -> float:
    """Symmetric cross-entropy of inv_tau * Z T^T with diagonal targets."""
    S = inv_tau * (Z @ T.T)
    return float(-0.5 * (np.mean(np.diag(_log_softmax(S, 1))) + np.mean(np.diag(_log_softmax(S, 0)))))


def _clip_loss_grad(S: np.ndarray):
    B = S.shape[0]
    lr, lc = _log_softmax(S, 1), _log_softmax(S, 0)
    loss = -0.5 * (np.mean(np.diag(lr)) + np.mean(np.diag(lc)))
    eye = np.eye(B)
    dS = 0.5 * ((np.exp(lr) - eye) + (np.exp(lc) - eye)) / B
    return float(loss), dS


# --------------------------------------------------------------------------- batch loss + gradient

@dataclass
class _Batch:
    images: List[np.ndarray]
    filters: List[int]
    ids: List[np.ndarray]


def _prepare(model: CcveModel, batch: Sequence[TrainSample]) -> _Batch:
    if not batch:
        raise ValueError("empty batch")
    return _Batch([s.image for s in batch], [model.filter_for(s.cluster) for s in batch],
                  [_token_ids(model, s.tokens) for s in batch])


def _loss_and_grad(model: CcveModel, prep: _Batch, need_grad: bool = True):
    p = model.params
    zi, caches = _encode_images_raw(model, prep.images, prep.filters)
    Z, zn = _normalize(zi, "image")
    zt, t0 = _text_forward(p, prep.ids)
    T, tn = _normalize(zt, "text")
    s = float(np.exp(p["log_inv_tau"]))
    G = Z @ T.T
    loss, dS = _clip_loss_grad(s * G)
    if not need_grad:
        return loss, None

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    grads["log_inv_tau"] = np.array(np.sum(dS * G) * s)
    dZ = s * dS @ T
    dT = s * dS.T @ Z
    dzi = _normalize_backward(Z, zn, dZ)
    for idx, fidx, cache in caches:
        _image_backward(p, fidx, cache, dzi[idx], grads)
    _text_backward(p, prep.ids, t0, _normalize_backward(T, tn, dT), grads)
    return loss, grads


def batch_loss(model: CcveModel, batch: Sequence[TrainSample]) -> float:
    return _loss_and_grad(model, _prepare(model, batch), need_grad=False)[0]


def backward(model: CcveModel, batch: Sequence[TrainSample]) -> Dict[str, np.ndarray]:
    """Exact gradient of the batch contrastive loss w.r.t. every parameter."""
    return _loss_and_grad(model, _prepare(model, batch))[1]


def grad_check(model: CcveModel, batch: Sequence[TrainSample], epsilon: float = 1e-5,
               gradient: Optional[Dict[str, np.ndarray]] = None,
               threshold: float = 1e-8) -> Tuple[float, Tuple[str, Tuple[int, ...]]]:
    """Worst relative error between central differences and the analytic gradient.

    Entries where both estimates are below ``threshold`` in magnitude are skipped.
    Returns ``(max_error, (param_name, index))``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    prep = _prepare(model, batch)
    if gradient is None:
        gradient = _loss_and_grad(model, prep)[1]
    probe = model.copy()
    worst, where = 0.0, ("", ())
    for name in PARAM_NAMES:
        arr = probe.params[name]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + epsilon
            up = _loss_and_grad(probe, prep, need_grad=False)[0]
            arr[idx] = orig - epsilon
            down = _loss_and_grad(probe, prep, need_grad=False)[0]
            arr[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            analytic = float(gradient[name][idx])
            scale = max(abs(numeric), abs(analytic))
            if scale <= threshold:
                continue
            err = abs(numeric - analytic) / scale
            if err > worst:
                worst, where = err, (name, tuple(int(i) for i in idx))
    return worst, where


# --------------------------------------------------------------------------- training

def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    pos = 0
    while True:
        if pos + batch_size > n:
            perm = np.concatenate([perm[pos:], rng.permutation(n)])
            pos = 0
        yield perm[pos:pos + batch_size]
        pos += batch_size


def train(model: CcveModel, dataset: Sequence[TrainSample], config: TrainConfig):
    """Plain mini-batch gradient descent. Returns ``(trained_model, loss_history)``.

    The input model is not modified.
    """
    if not dataset:
        raise ValueError("empty training set")
    if config.batch_size < 1 or config.steps < 0:
        raise ValueError("batch_size must be >= 1 and steps >= 0")
    covered = {model.filter_for(s.cluster) for s in dataset}
    if len(covered) < model.K:
        logger.warning("training data covers %d of %d filters", len(covered), model.K)

    model = model.copy()
    rng = np.random.default_rng(config.seed)
    ids = [_token_ids(model, s.tokens) for s in dataset]
    filters = [model.filter_for(s.cluster) for s in dataset]
    images = [np.asarray(s.image, dtype=float) for s in dataset]
    max_log = math.log(MAX_INV_TAU)
    history: List[float] = []
    stream = _batches(len(dataset), min(config.batch_size, len(dataset)), rng)
    for step in range(config.steps):
        sel = next(stream)
        prep = _Batch([images[i] for i in sel], [filters[i] for i in sel], [ids[i] for i in sel])
        loss, grads = _loss_and_grad(model, prep)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise Divergence(f"non-finite loss at step {step}", step)
        history.append(loss)
        for name, g in grads.items():
            if name == "filters" and model.freeze_filters:
                continue
            model.params[name] -= config.learning_rate * g
        model.params["log_inv_tau"] = np.array(min(float(model.params["log_inv_tau"]), max_log))
    return model, history


# --------------------------------------------------------------------------- evaluation

def own_embeddings(model: CcveModel, dataset: Sequence[TrainSample]) -> np.ndarray:
    """Image embeddings through each sample's own cluster filter."""
    z, _ = _encode_images_raw(model, [s.image for s in dataset],
                              [model.filter_for(s.cluster) for s in dataset])
    return _normalize(z, "image")[0]


def text_embeddings(model: CcveModel, dataset: Sequence[TrainSample]) -> np.ndarray:
    z, _ = _text_forward(model.params, [_token_ids(model, s.tokens) for s in dataset])
    return _normalize(z, "text")[0]


def one_per_cluster_batches(dataset: Sequence[TrainSample]) -> List[List[int]]:
    """Batches holding one sample of each cluster, so every retrieval target is unique."""
    by_cluster: Dict[int, List[int]] = {}
    for i, s in enumerate(dataset):
        by_cluster.setdefault(s.cluster, []).append(i)
    rounds = min(len(v) for v in by_cluster.values())
    keys = sorted(by_cluster)
    return [[by_cluster[k][r] for k in keys] for r in range(rounds)]


def retrieval_accuracy(model: CcveModel, dataset: Sequence[TrainSample]) -> float:
    """Mean of image->text and text->image top-1 accuracy over one-per-cluster batches."""
    Z = own_embeddings(model, dataset)
    T = text_embeddings(model, dataset)
    hits = total = 0
    for batch in one_per_cluster_batches(dataset):
        S = Z[batch] @ T[batch].T
        target = np.arange(len(batch))
        hits += int(np.sum(S.argmax(axis=1) == target)) + int(np.sum(S.argmax(axis=0) == target))
        total += 2 * len(batch)
    return hits / total if total else 0.0


def cluster_silhouette(model: CcveModel, dataset: Sequence[TrainSample]) -> float:
    from sklearn.metrics import silhouette_score

    labels = np.array([s.cluster for s in dataset])
    return float(silhouette_score(own_embeddings(model, dataset), labels, metric="euclidean"))


# --------------------------------------------------------------------------- persistence

def _expected_shapes(K, c, c2, m, d, dt, V):
    return {"filters": (K, c, c), "conv_w": (m, c2, c2), "conv_b": (m,), "proj_w": (d, m),
            "proj_b": (d,), "tok_emb": (V, dt), "text_w": (d, dt), "text_b": (d,), "log_inv_tau": ()}


def model_header(model: CcveModel) -> dict:
    p = model.params
    return {"format": MODEL_FORMAT, "version": MODEL_VERSION, "K": model.K, "c": model.c,
            "c2": p["conv_w"].shape[1], "m": p["conv_w"].shape[0], "d": model.d,
            "dt": p["tok_emb"].shape[1], "V": len(model.vocab), "freeze_filters": model.freeze_filters}


def model_to_json(model: CcveModel) -> str:
    doc = dict(model_header(model))
    doc["vocab"] = list(model.vocab)
    doc["params"] = {name: {"shape": list(model.params[name].shape),
                            "data": [float(v) for v in np.ravel(model.params[name])]}
                     for name in PARAM_NAMES}
    return json.dumps(doc, sort_keys=True) + "\n"


def model_from_json(text: str) -> CcveModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file is not JSON: {exc}") from exc
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model format {doc.get('format')!r} v{doc.get('version')!r}")
    try:
        expected = _expected_shapes(*(int(doc[k]) for k in ("K", "c", "c2", "m", "d", "dt", "V")))
        vocab = tuple(doc["vocab"])
        raw = doc["params"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"model header incomplete: {exc}") from exc
    if len(vocab) != expected["tok_emb"][0]:
        raise ModelFormatError("vocabulary size does not match header V")
    params = {}
    for name, shape in expected.items():
        entry = raw.get(name)
        if entry is None or tuple(entry["shape"]) != shape:
            raise ModelFormatError(f"parameter {name}: expected shape {shape}")
        arr = np.asarray(entry["data"], dtype=float)
        if arr.size != math.prod(shape) or not np.all(np.isfinite(arr)):
            raise ModelFormatError(f"parameter {name}: bad data")
        params[name] = arr.reshape(shape)
    return CcveModel(params, vocab, bool(doc.get("freeze_filters", False)))


def load_model(path) -> CcveModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_json(fh.read())
