"""Text-encoder surrogate and the static embedding index built from it.

The production system distills a large language model; here a deliberately
small trainable stand-in plays that role: hashed token embeddings, mean
pooling, a 3-layer reduction MLP, and L2 normalization to unit length. It is
pretrained on click/no-click pairs (clicked treated as relevant), fine-tuned
on 4-level relevance labels at a reduced learning rate, then frozen. Ranking
code never calls the encoder at training time; it reads the precomputed
index, falling back to an on-the-fly encode (counted) only on cache misses.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from time import time

import numpy as np

from . import autodiff as ad
from .errors import (
    DatasetParseError,
    EmbeddingLookupError,
    TrainingError,
    ValidationError,
)

PAIR_KEY_SEP = ""


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace tokenization."""
    return text.lower().split()


@lru_cache(maxsize=65536)
def token_id(token: str, vocab_size: int) -> int:
    """Stable hash of a token into [0, vocab_size)."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % vocab_size


@dataclass
class EncoderConfig:
    vocab_size: int = 4096
    d_raw: int = 64
    d: int = 32
    seed: int = 0
    lr: float = 0.5
    batch_size: int = 256
    epochs: int = 5
    finetune_lr_factor: float = 0.1
    finetune_epochs: int = 5

    def __post_init__(self):
        if self.vocab_size < 1 or self.d_raw < 1 or self.d < 1:
            raise ValidationError("vocab_size, d_raw and d must be positive")
        if self.finetune_lr_factor < 0:
            raise ValidationError("finetune_lr_factor must be >= 0")


@dataclass
class EncoderParams:
    """Token table (with CLS/SEP rows), reduction MLP, and training heads.

    token_table row vocab_size is CLS, row vocab_size+1 is SEP. The CLS row
    doubles as the sentinel pooled alone for empty token lists. Heads exist
    only for training and never contribute to index embeddings.
    """

    config: EncoderConfig
    token_table: ad.Parameter
    reduce: list[ad.DenseLayer]
    binary_head: ad.DenseLayer
    rsl_head: ad.DenseLayer | None = None

    @property
    def cls_id(self) -> int:
        return self.config.vocab_size

    @property
    def sep_id(self) -> int:
        return self.config.vocab_size + 1

    def params(self) -> dict[str, ad.Parameter]:
        out = {self.token_table.name: self.token_table}
        for layer in self.reduce + [self.binary_head] + ([self.rsl_head] if self.rsl_head else []):
            for p in layer.params():
                out[p.name] = p
        return out

    def trainable(self) -> list[ad.Parameter]:
        return list(self.params().values())


def init_encoder(config: EncoderConfig) -> EncoderParams:
    rng = np.random.default_rng(config.seed)
    table = ad.Parameter(
        "enc.tokens",
        rng.normal(0.0, 0.1, size=(config.vocab_size + 2, config.d_raw)),
        "stage1",
    )
    reduce = [
        ad.dense_layer(rng, config.d_raw, config.d_raw, "relu", "enc.reduce0", "stage1"),
        ad.dense_layer(rng, config.d_raw, config.d, "relu", "enc.reduce1", "stage1"),
        ad.dense_layer(rng, config.d, config.d, "linear", "enc.reduce2", "stage1"),
    ]
    binary_head = ad.dense_layer(rng, config.d, 1, "linear", "enc.click_head", "stage1")
    return EncoderParams(config, table, reduce, binary_head)


def _add_rsl_head(params: EncoderParams):
    if params.rsl_head is None:
        rng = np.random.default_rng(params.config.seed + 1)
        params.rsl_head = ad.dense_layer(rng, params.config.d, 4, "linear", "enc.rsl_head", "stage1")


# ---------------------------------------------------------------------------
# encoding


def _text_ids(params: EncoderParams, text: str) -> list[int]:
    ids = [token_id(t, params.config.vocab_size) for t in tokenize(text)]
    return ids if ids else [params.cls_id]


def _pair_ids(params: EncoderParams, query: str, item: str) -> list[int]:
    v = params.config.vocab_size
    return (
        [params.cls_id]
        + [token_id(t, v) for t in tokenize(query)]
        + [params.sep_id]
        + [token_id(t, v) for t in tokenize(item)]
        + [params.sep_id]
    )


def encode_bags(params: EncoderParams, flat_ids: np.ndarray, offsets: np.ndarray) -> ad.Tensor:
    """Unit-norm embeddings for a batch of token bags (tape-aware)."""
    pooled = ad.embedding_bag_mean(params.token_table, flat_ids, offsets)
    reduced = ad.mlp_apply(params.reduce, pooled)
    return ad.l2_normalize(reduced)


def _encode_id_lists(params: EncoderParams, id_lists: list[list[int]]) -> np.ndarray:
    flat = np.array([i for ids in id_lists for i in ids], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum([len(ids) for ids in id_lists])]).astype(np.int64)
    return encode_bags(params, flat, offsets).data


def encode_text(params: EncoderParams, text: str) -> np.ndarray:
    """Unit-length embedding of a bare text; empty text pools the CLS row."""
    return _encode_id_lists(params, [_text_ids(params, text)])[0]


def encode_pair(params: EncoderParams, query: str, item: str) -> np.ndarray:
    """Unit-length relevance embedding of [CLS] query [SEP] item [SEP]."""
    return _encode_id_lists(params, [_pair_ids(params, query, item)])[0]


# ---------------------------------------------------------------------------
# training


def _bag_batch(id_lists: list[list[int]], rows: np.ndarray):
    lists = [id_lists[r] for r in rows]
    flat = np.array([i for ids in lists for i in ids], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum([len(ids) for ids in lists])]).astype(np.int64)
    return flat, offsets


def pretrain_encoder(
    pairs: list[tuple[str, str, int]], config: EncoderConfig
) -> tuple[EncoderParams, list[float]]:
    """Binary cross-entropy pretraining on (query, item, clicked) pairs.

    Clicked is treated as the relevance signal. Returns the trained params and
    the per-epoch mean loss trace (empty when epochs == 0).
    """
    if not pairs:
        raise ValidationError("pretrain needs at least one pair")
    labels_all = np.array([int(c) for _, _, c in pairs], dtype=np.float64)
    if labels_all.min() == labels_all.max():
        raise TrainingError("pretrain needs both clicked and unclicked pairs")

    params = init_encoder(config)
    if config.epochs == 0:
        return params, []

    id_lists = [_pair_ids(params, q, i) for q, i, _ in pairs]
    rng = np.random.default_rng(config.seed + 17)
    trainable = params.trainable()
    trace = []
    for _ in range(config.epochs):
        order = rng.permutation(len(pairs))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            rows = order[lo : lo + config.batch_size]
            flat, offsets = _bag_batch(id_lists, rows)
            y = labels_all[rows]
            ad.zero_grad(trainable)
            with ad.Tape() as tape:
                emb = encode_bags(params, flat, offsets)
                logits = ad.affine(emb, params.binary_head.W, params.binary_head.b)
                p = ad.sigmoid(logits.reshape((rows.size,)))
                loss = -(
                    ad.Tensor(y) * ad.log(p) + ad.Tensor(1.0 - y) * ad.log(1.0 - p)
                ).mean()
            tape.backward(loss)
            _sgd(trainable, config.lr)
            epoch_losses.append(loss.item())
        trace.append(float(np.mean(epoch_losses)))
    return params, trace


def finetune_encoder(
    params: EncoderParams, labeled_pairs: list[tuple[str, str, int]], config: EncoderConfig
) -> tuple[EncoderParams, list[float]]:
    """4-class cross-entropy fine-tune on (query, item, rsl) at a reduced rate.

    rsl labels are 1..4. An empty input (or a zero lr factor) leaves the
    parameters unchanged. Mutates and returns `params`.
    """
    for _, _, rsl in labeled_pairs:
        if rsl not in (1, 2, 3, 4):
            raise ValidationError(f"rsl label {rsl!r} outside 1..4")
    _add_rsl_head(params)
    lr = config.lr * config.finetune_lr_factor
    if not labeled_pairs or lr == 0.0 or config.finetune_epochs == 0:
        return params, []

    id_lists = [_pair_ids(params, q, i) for q, i, _ in labeled_pairs]
    labels = np.array([rsl - 1 for _, _, rsl in labeled_pairs], dtype=np.int64)
    rng = np.random.default_rng(config.seed + 29)
    trainable = params.trainable()
    trace = []
    for _ in range(config.finetune_epochs):
        order = rng.permutation(len(labeled_pairs))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            rows = order[lo : lo + config.batch_size]
            flat, offsets = _bag_batch(id_lists, rows)
            ad.zero_grad(trainable)
            with ad.Tape() as tape:
                emb = encode_bags(params, flat, offsets)
                logits = ad.affine(emb, params.rsl_head.W, params.rsl_head.b)
                logp = ad.log_softmax(logits)
                loss = -ad.select_columns(logp, labels[rows]).mean()
            tape.backward(loss)
            _sgd(trainable, lr)
            epoch_losses.append(loss.item())
        trace.append(float(np.mean(epoch_losses)))
    return params, trace


def _sgd(params: list[ad.Parameter], lr: float):
    for p in params:
        p.data -= lr * p.grad


# ---------------------------------------------------------------------------
# the static index


@dataclass
class EmbeddingIndex:
    """Exact-match store of text and pair embeddings from one encoder state."""

    dim: int
    checkpoint_id: str
    text: dict[str, np.ndarray] = field(default_factory=dict)
    pair: dict[str, np.ndarray] = field(default_factory=dict)
    cache_misses: int = 0
    built_at: float | None = None
    _encoder: EncoderParams | None = None

    def attach_encoder(self, params: EncoderParams):
        self._encoder = params

    def lookup_text(self, text: str) -> np.ndarray:
        hit = self.text.get(text)
        if hit is not None:
            return hit
        if self._encoder is None:
            raise EmbeddingLookupError(f"text not indexed and no encoder attached: {text!r}")
        self.cache_misses += 1
        vec = encode_text(self._encoder, text)
        self.text[text] = vec
        return vec

    def lookup_pair(self, query: str, item: str) -> np.ndarray:
        key = query + PAIR_KEY_SEP + item
        hit = self.pair.get(key)
        if hit is not None:
            return hit
        if self._encoder is None:
            raise EmbeddingLookupError(f"pair not indexed and no encoder attached: {key!r}")
        self.cache_misses += 1
        vec = encode_pair(self._encoder, query, item)
        self.pair[key] = vec
        return vec


def build_index(
    params: EncoderParams,
    texts: list[str],
    pairs: list[tuple[str, str]],
    checkpoint_id: str,
    batch_size: int = 1024,
) -> EmbeddingIndex:
    """Encode every distinct text and pair once. Deterministic for fixed inputs."""
    index = EmbeddingIndex(dim=params.config.d, checkpoint_id=checkpoint_id, built_at=time())
    uniq_texts = sorted(set(texts))
    uniq_pairs = sorted(set(pairs))
    for lo in range(0, len(uniq_texts), batch_size):
        chunk = uniq_texts[lo : lo + batch_size]
        vecs = _encode_id_lists(params, [_text_ids(params, t) for t in chunk])
        for t, v in zip(chunk, vecs):
            index.text[t] = v
    for lo in range(0, len(uniq_pairs), batch_size):
        chunk = uniq_pairs[lo : lo + batch_size]
        vecs = _encode_id_lists(params, [_pair_ids(params, q, i) for q, i in chunk])
        for (q, i), v in zip(chunk, vecs):
            index.pair[q + PAIR_KEY_SEP + i] = v
    return index


_ENCODER_META_INT = ("vocab_size", "d_raw", "d", "seed", "batch_size", "epochs", "finetune_epochs")
_ENCODER_META_FLOAT = ("lr", "finetune_lr_factor")


def save_encoder(params: EncoderParams, path) -> None:
    """Persist encoder weights plus enough config to rebuild them."""
    from .checkpoint import save_params

    meta = {k: str(getattr(params.config, k)) for k in _ENCODER_META_INT}
    meta.update({k: repr(getattr(params.config, k)) for k in _ENCODER_META_FLOAT})
    meta["has_rsl_head"] = "1" if params.rsl_head is not None else "0"
    save_params(path, params.params(), meta)


def load_encoder(path) -> EncoderParams:
    """Rebuild an EncoderParams from a checkpoint; shapes are re-validated."""
    from .checkpoint import load_params

    loaded, meta = load_params(path)
    kw: dict = {k: int(meta[k]) for k in _ENCODER_META_INT}
    kw.update({k: float(meta[k]) for k in _ENCODER_META_FLOAT})
    params = init_encoder(EncoderConfig(**kw))
    if meta.get("has_rsl_head") == "1":
        _add_rsl_head(params)
    expected = params.params()
    if set(expected) != set(loaded):
        missing = sorted(set(expected) ^ set(loaded))
        raise ValidationError(f"encoder checkpoint parameter set mismatch: {missing[:4]}")
    for name, p in expected.items():
        if loaded[name].data.shape != p.data.shape:
            raise ValidationError(f"encoder checkpoint parameter {name} has wrong shape")
        p.data[...] = loaded[name].data
    return params


def encoder_digest(params: EncoderParams) -> str:
    from .checkpoint import params_digest

    return params_digest(params.params())


def _fmt(x: float) -> str:
    return format(x, ".17g")


def save_index(index: EmbeddingIndex, path):
    """Write `dim=<d> checkpoint=<id>` then one `<kind>\\t<key>\\t<csv>` per entry."""
    lines = [f"dim={index.dim} checkpoint={index.checkpoint_id}"]
    for key in sorted(index.text):
        if "\t" in key or "\n" in key:
            raise ValidationError(f"text key contains tab/newline: {key!r}")
        lines.append("text\t" + key + "\t" + ",".join(_fmt(v) for v in index.text[key]))
    for key in sorted(index.pair):
        if "\t" in key or "\n" in key:
            raise ValidationError(f"pair key contains tab/newline: {key!r}")
        lines.append("pair\t" + key + "\t" + ",".join(_fmt(v) for v in index.pair[key]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_index(path) -> EmbeddingIndex:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetParseError(1, "empty index file")
    header = lines[0].split(" ")
    if len(header) != 2 or not header[0].startswith("dim=") or not header[1].startswith("checkpoint="):
        raise DatasetParseError(1, f"bad index header: {lines[0]!r}")
    try:
        dim = int(header[0][4:])
    except ValueError:
        raise DatasetParseError(1, f"bad dim in header: {lines[0]!r}") from None
    index = EmbeddingIndex(dim=dim, checkpoint_id=header[1][len("checkpoint="):])
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 3 or fields[0] not in ("text", "pair"):
            raise DatasetParseError(lineno, "expected <kind>\\t<key>\\t<values>")
        kind, key, values_s = fields
        try:
            vec = np.array([float(v) for v in values_s.split(",")], dtype=np.float64)
        except ValueError as e:
            raise DatasetParseError(lineno, f"bad vector: {e}") from None
        if vec.size != dim:
            raise DatasetParseError(lineno, f"vector length {vec.size} != dim {dim}")
        (index.text if kind == "text" else index.pair)[key] = vec
    return index
