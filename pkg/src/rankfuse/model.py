"""Fusion ranking network.

Three cooperating parts produce a personalized click score:

* a base module emitting one conditional click probability per relevance
  level (independent sigmoid heads),
* a relevance-level module emitting a distribution over the four levels
  (softmax head) from relevance flags plus frozen text embeddings,
* a preference-incentive module that attends over the user's clicked
  history and rescales the fused score by tau in (0,2).

The fused score is the dot product of the first two outputs; the final
score is clamp(tau * fused) so it stays a valid Bernoulli parameter.
Text/pair embeddings always come from the static index (they are model
inputs, never trained here).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .data import HISTORY_LIMIT, Sample, derive_flags
from .encoder import EmbeddingIndex, token_id, tokenize
from .errors import DimensionError, ValidationError

SCORE_EPS = 1e-7
VARIANTS = ("full", "no-prim", "base-only")
N_LEVELS = 4
FIELD_NAMES = ("user", "item", "query_category", "item_category", "query_tokens", "item_tokens")


@dataclass
class ModelConfig:
    variant: str = "full"
    d: int = 32
    field_dim: int = 16
    user_buckets: int = 1024
    item_buckets: int = 4096
    category_buckets: int = 64
    token_buckets: int = 512
    base_hidden: tuple[int, ...] = (64, 32)
    rsl_hidden: tuple[int, ...] = (32,)
    incentive_hidden: tuple[int, ...] = (16,)
    head_count: int = 1
    use_wide: bool = False
    base_uses_r_cur: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant {self.variant!r} not in {VARIANTS}")
        for name in ("d", "field_dim", "user_buckets", "item_buckets", "category_buckets", "token_buckets", "head_count"):
            if int(getattr(self, name)) <= 0:
                raise ValidationError(f"{name} must be positive")
        self.base_hidden = tuple(int(v) for v in self.base_hidden)
        self.rsl_hidden = tuple(int(v) for v in self.rsl_hidden)
        self.incentive_hidden = tuple(int(v) for v in self.incentive_hidden)
        if self.d % self.head_count != 0:
            raise ValidationError("d must be divisible by head_count")
        if self.variant == "base-only" and self.use_wide:
            raise ValidationError("base-only scores from id/token embeddings alone; no wide term")


# ---------------------------------------------------------------------------
# feature extraction (hashing trick over ids and tokens)


def user_slot(user_id: int, config: ModelConfig) -> int:
    return int(user_id) % config.user_buckets


def item_slot(item_id: int, config: ModelConfig) -> int:
    return int(item_id) % config.item_buckets


def category_slot(text: str, config: ModelConfig) -> int:
    toks = tokenize(text)
    if not toks:
        return 0
    return token_id(toks[0], config.category_buckets)


def token_slots(text: str, config: ModelConfig) -> list[int]:
    """Sorted unique token buckets: a multi-hot id set."""
    return sorted({token_id(t, config.token_buckets) for t in tokenize(text)})


# ---------------------------------------------------------------------------
# parameters


@dataclass
class AttentionParams:
    w_q: ad.Parameter
    w_k: ad.Parameter
    w_v: ad.Parameter
    head_count: int = 1

    def __post_init__(self):
        d = self.w_q.data.shape[0]
        for w in (self.w_q, self.w_k, self.w_v):
            if w.data.shape != (d, d):
                raise DimensionError("attention projections must be square and equal-sized")
        if d % self.head_count != 0:
            raise ValidationError("attention dim must divide into heads")

    def params(self) -> list[ad.Parameter]:
        return [self.w_q, self.w_k, self.w_v]


@dataclass
class PreferenceContext:
    q_cur_emb: np.ndarray
    q_seq_emb: list[np.ndarray]
    r_seq_emb: list[np.ndarray]
    r_cur_emb: np.ndarray

    def __post_init__(self):
        if len(self.q_seq_emb) != len(self.r_seq_emb):
            raise DimensionError("query and relevance history lengths differ")
        if len(self.q_seq_emb) > HISTORY_LIMIT:
            raise ValidationError(f"history longer than {HISTORY_LIMIT}")


@dataclass
class ModelParams:
    config: ModelConfig
    embeddings: dict[str, ad.Parameter]
    base_layers: list[ad.DenseLayer]
    wide: ad.DenseLayer | None = None
    rsl_layers: list[ad.DenseLayer] | None = None
    attention: AttentionParams | None = None
    incentive_layers: list[ad.DenseLayer] | None = None

    def all_params(self) -> dict[str, ad.Parameter]:
        out = {p.name: p for p in self.embeddings.values()}
        for layer in self.base_layers:
            for p in layer.params():
                out[p.name] = p
        if self.wide is not None:
            for p in self.wide.params():
                out[p.name] = p
        if self.rsl_layers is not None:
            for layer in self.rsl_layers:
                for p in layer.params():
                    out[p.name] = p
        if self.attention is not None:
            for p in self.attention.params():
                out[p.name] = p
        if self.incentive_layers is not None:
            for layer in self.incentive_layers:
                for p in layer.params():
                    out[p.name] = p
        return out

    def by_group(self) -> dict[str, list[ad.Parameter]]:
        groups: dict[str, list[ad.Parameter]] = {}
        for p in self.all_params().values():
            groups.setdefault(p.group, []).append(p)
        return groups


def _mlp(rng, dims: tuple[int, ...], prefix: str, group: str, out_activation="linear"):
    layers = []
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        act = "relu" if i < len(dims) - 2 else out_activation
        layers.append(ad.dense_layer(rng, fi, fo, act, f"{prefix}.{i}", group))
    return layers


def base_input_dim(config: ModelConfig) -> int:
    n = len(FIELD_NAMES) * config.field_dim
    if config.variant == "base-only":
        return n
    n += 2  # relevance flags
    if config.base_uses_r_cur:
        n += config.d
    return n


def build_model(config: ModelConfig) -> ModelParams:
    """Deterministic seeded initialization of every parameter group."""
    rng = np.random.default_rng(config.seed)
    sizes = {
        "user": config.user_buckets,
        "item": config.item_buckets,
        "query_category": config.category_buckets,
        "item_category": config.category_buckets,
        "query_tokens": config.token_buckets,
        "item_tokens": config.token_buckets,
    }
    embeddings = {
        name: ad.Parameter(f"emb.{name}", rng.normal(0.0, 0.1, size=(sizes[name], config.field_dim)), "base")
        for name in FIELD_NAMES
    }
    n_heads = 1 if config.variant == "base-only" else N_LEVELS
    base_layers = _mlp(rng, (base_input_dim(config),) + config.base_hidden + (n_heads,), "base", "base")
    params = ModelParams(config=config, embeddings=embeddings, base_layers=base_layers)
    if config.use_wide:
        params.wide = ad.dense_layer(rng, 2, n_heads, "linear", "wide", "base")
    if config.variant == "base-only":
        return params
    params.rsl_layers = _mlp(rng, (2 + 3 * config.d,) + config.rsl_hidden + (N_LEVELS,), "rsl", "rsl-finetune")
    scale = 1.0 / np.sqrt(config.d)
    params.attention = AttentionParams(
        ad.Parameter("attn.w_q", rng.normal(0.0, scale, size=(config.d, config.d)), "prim"),
        ad.Parameter("attn.w_k", rng.normal(0.0, scale, size=(config.d, config.d)), "prim"),
        ad.Parameter("attn.w_v", rng.normal(0.0, scale, size=(config.d, config.d)), "prim"),
        head_count=config.head_count,
    )
    params.incentive_layers = _mlp(rng, (2 * config.d,) + config.incentive_hidden + (1,), "incentive", "prim")
    return params


# checkpoint meta <-> config

_META_INT = ("d", "field_dim", "user_buckets", "item_buckets", "category_buckets", "token_buckets", "head_count", "seed")
_META_BOOL = ("use_wide", "base_uses_r_cur")
_META_TUPLE = ("base_hidden", "rsl_hidden", "incentive_hidden")


def config_to_meta(config: ModelConfig) -> dict[str, str]:
    meta = {"variant": config.variant}
    for k in _META_INT:
        meta[k] = str(getattr(config, k))
    for k in _META_BOOL:
        meta[k] = "1" if getattr(config, k) else "0"
    for k in _META_TUPLE:
        meta[k] = ",".join(str(v) for v in getattr(config, k))
    return meta


def config_from_meta(meta: dict[str, str]) -> ModelConfig:
    kw: dict = {"variant": meta["variant"]}
    for k in _META_INT:
        kw[k] = int(meta[k])
    for k in _META_BOOL:
        kw[k] = meta[k] == "1"
    for k in _META_TUPLE:
        kw[k] = tuple(int(v) for v in meta[k].split(",")) if meta[k] else ()
    return ModelConfig(**kw)


def save_model(params: ModelParams, path: str, extra_meta: dict[str, str] | None = None) -> None:
    from .checkpoint import save_params

    meta = config_to_meta(params.config)
    if extra_meta:
        meta.update(extra_meta)
    save_params(path, params.all_params(), meta)


def load_model(path: str) -> tuple[ModelParams, dict[str, str]]:
    """Rebuild a ModelParams from a checkpoint; shapes are re-validated."""
    from .checkpoint import load_params

    loaded, meta = load_params(path)
    config = config_from_meta(meta)
    params = build_model(config)
    expected = params.all_params()
    if set(expected) != set(loaded):
        missing = sorted(set(expected) ^ set(loaded))
        raise ValidationError(f"checkpoint parameter set mismatch: {missing[:4]}")
    for name, p in expected.items():
        q = loaded[name]
        if q.data.shape != p.data.shape or q.group != p.group:
            raise ValidationError(f"checkpoint parameter {name} has wrong shape or group")
        p.data[...] = q.data
    return params, meta


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    size: int
    user_ids: np.ndarray
    item_ids: np.ndarray
    qcat_ids: np.ndarray
    icat_ids: np.ndarray
    qtok_flat: np.ndarray
    qtok_off: np.ndarray
    itok_flat: np.ndarray
    itok_off: np.ndarray
    flags: np.ndarray
    qtext_emb: np.ndarray
    itext_emb: np.ndarray
    pair_emb: np.ndarray
    y: np.ndarray
    rsl: np.ndarray
    group_keys: np.ndarray
    hist_rows: np.ndarray
    hist_q_emb: np.ndarray
    hist_r_emb: np.ndarray
    hist_mask: np.ndarray


def _flatten_bags(bags: list[list[int]], rows: np.ndarray):
    lists = [bags[r] for r in rows]
    flat = np.array([i for ids in lists for i in ids], dtype=np.int64)
    off = np.zeros(len(lists) + 1, dtype=np.int64)
    np.cumsum([len(ids) for ids in lists], out=off[1:])
    return flat, off


class TrainingCache:
    """Precomputed ids and frozen embeddings for repeated batch slicing.

    Unique texts and pairs are looked up once (sorted order, so encoder
    fallbacks are deterministic); per-sample rows then index into the two
    embedding matrices. Histories are stored ragged and padded per batch.
    """

    def __init__(self, samples: list[Sample], index: EmbeddingIndex, config: ModelConfig):
        if not samples:
            raise ValidationError("no samples to cache")
        if index.dim != config.d:
            raise DimensionError(f"index dim {index.dim} != model d {config.d}")
        self.config = config
        self.n = len(samples)

        texts: set[str] = set()
        pairs: set[tuple[str, str]] = set()
        for s in samples:
            texts.add(s.query_text)
            texts.add(s.item_text)
            pairs.add((s.query_text, s.item_text))
            for q, i in s.history:
                texts.add(q)
                pairs.add((q, i))
        text_list = sorted(texts)
        pair_list = sorted(pairs)
        self.text_row = {t: i for i, t in enumerate(text_list)}
        self.pair_row = {p: i for i, p in enumerate(pair_list)}
        self.text_mat = np.stack([index.lookup_text(t) for t in text_list])
        self.pair_mat = np.stack([index.lookup_pair(q, i) for q, i in pair_list])

        self.user_ids = np.array([user_slot(s.user_id, config) for s in samples], dtype=np.int64)
        self.item_ids = np.array([item_slot(s.item_id, config) for s in samples], dtype=np.int64)
        self.qcat_ids = np.array([category_slot(s.query_text, config) for s in samples], dtype=np.int64)
        self.icat_ids = np.array([category_slot(s.item_text, config) for s in samples], dtype=np.int64)
        self.qtok = [token_slots(s.query_text, config) for s in samples]
        self.itok = [token_slots(s.item_text, config) for s in samples]
        self.flags = np.array(
            [[float(s.category_match), float(s.contains_query)] for s in samples], dtype=np.float64
        )
        self.qtext_rows = np.array([self.text_row[s.query_text] for s in samples], dtype=np.int64)
        self.itext_rows = np.array([self.text_row[s.item_text] for s in samples], dtype=np.int64)
        self.pair_rows = np.array(
            [self.pair_row[(s.query_text, s.item_text)] for s in samples], dtype=np.int64
        )
        self.y = np.array([float(s.click) for s in samples], dtype=np.float64)
        self.rsl = np.array([int(s.rsl) for s in samples], dtype=np.int64)

        # listwise grouping: impressions sharing (user, query) form one list
        group_list = sorted({(s.user_id, s.query_text) for s in samples})
        group_id = {g: i for i, g in enumerate(group_list)}
        self.group_keys = np.array(
            [group_id[(s.user_id, s.query_text)] for s in samples], dtype=np.int64
        )

        hq: list[int] = []
        hr: list[int] = []
        self.hist_off = np.zeros(self.n + 1, dtype=np.int64)
        for i, s in enumerate(samples):
            for q, it in s.history:
                hq.append(self.text_row[q])
                hr.append(self.pair_row[(q, it)])
            self.hist_off[i + 1] = len(hq)
        self.hist_q_rows = np.array(hq, dtype=np.int64)
        self.hist_r_rows = np.array(hr, dtype=np.int64)

    def batch(self, rows: np.ndarray) -> Batch:
        rows = np.asarray(rows, dtype=np.int64)
        qtok_flat, qtok_off = _flatten_bags(self.qtok, rows)
        itok_flat, itok_off = _flatten_bags(self.itok, rows)

        lens = self.hist_off[rows + 1] - self.hist_off[rows]
        hist_rows = np.nonzero(lens > 0)[0].astype(np.int64)
        if hist_rows.size:
            width = int(lens.max())
            sub = rows[hist_rows]
            flat_q = np.concatenate(
                [self.hist_q_rows[self.hist_off[r] : self.hist_off[r + 1]] for r in sub]
            )
            flat_r = np.concatenate(
                [self.hist_r_rows[self.hist_off[r] : self.hist_off[r + 1]] for r in sub]
            )
            off = np.zeros(sub.size + 1, dtype=np.int64)
            np.cumsum(lens[hist_rows], out=off[1:])
            pad_q, mask = kernels.pad_segments(flat_q, off, width)
            pad_r, _ = kernels.pad_segments(flat_r, off, width)
            hist_q_emb = self.text_mat[pad_q]
            hist_r_emb = self.pair_mat[pad_r]
        else:
            d = self.config.d
            hist_q_emb = np.zeros((0, 0, d))
            hist_r_emb = np.zeros((0, 0, d))
            mask = np.zeros((0, 0), dtype=bool)

        return Batch(
            size=rows.size,
            user_ids=self.user_ids[rows],
            item_ids=self.item_ids[rows],
            qcat_ids=self.qcat_ids[rows],
            icat_ids=self.icat_ids[rows],
            qtok_flat=qtok_flat,
            qtok_off=qtok_off,
            itok_flat=itok_flat,
            itok_off=itok_off,
            flags=self.flags[rows],
            qtext_emb=self.text_mat[self.qtext_rows[rows]],
            itext_emb=self.text_mat[self.itext_rows[rows]],
            pair_emb=self.pair_mat[self.pair_rows[rows]],
            y=self.y[rows],
            rsl=self.rsl[rows],
            group_keys=self.group_keys[rows],
            hist_rows=hist_rows,
            hist_q_emb=hist_q_emb,
            hist_r_emb=hist_r_emb,
            hist_mask=mask,
        )


def build_batch(samples: list[Sample], index: EmbeddingIndex, config: ModelConfig) -> Batch:
    cache = TrainingCache(samples, index, config)
    return cache.batch(np.arange(len(samples), dtype=np.int64))


# ---------------------------------------------------------------------------
# forward passes (batched, tape-aware)


def field_embeddings(params: ModelParams, batch: Batch) -> ad.Tensor:
    e = params.embeddings
    parts = [
        ad.embedding(e["user"], batch.user_ids),
        ad.embedding(e["item"], batch.item_ids),
        ad.embedding(e["query_category"], batch.qcat_ids),
        ad.embedding(e["item_category"], batch.icat_ids),
        ad.embedding_bag_mean(e["query_tokens"], batch.qtok_flat, batch.qtok_off),
        ad.embedding_bag_mean(e["item_tokens"], batch.itok_flat, batch.itok_off),
    ]
    return ad.concat(parts, axis=-1)


def _base_input(params: ModelParams, batch: Batch) -> ad.Tensor:
    fields = field_embeddings(params, batch)
    if params.config.variant == "base-only":
        return fields
    parts = [fields, ad.Tensor(batch.flags)]
    if params.config.base_uses_r_cur:
        parts.append(ad.Tensor(batch.pair_emb))
    return ad.concat(parts, axis=-1)


def base_logits_batch(params: ModelParams, batch: Batch) -> ad.Tensor:
    logits = ad.mlp_apply(params.base_layers, _base_input(params, batch))
    if params.wide is not None:
        logits = ad.add(logits, ad.affine(ad.Tensor(batch.flags), params.wide.W, params.wide.b))
    return logits


def base_forward_batch(params: ModelParams, batch: Batch) -> ad.Tensor:
    """Per-level conditional click probabilities, each an independent sigmoid."""
    return ad.sigmoid(base_logits_batch(params, batch))


def rsl_logits_batch(params: ModelParams, batch: Batch) -> ad.Tensor:
    if params.rsl_layers is None:
        raise ValidationError("variant has no relevance-level module")
    x = ad.concat(
        [
            ad.Tensor(batch.flags),
            ad.Tensor(batch.qtext_emb),
            ad.Tensor(batch.itext_emb),
            ad.Tensor(batch.pair_emb),
        ],
        axis=-1,
    )
    return ad.mlp_apply(params.rsl_layers, x)


def rsl_forward_batch(params: ModelParams, batch: Batch) -> ad.Tensor:
    """Distribution over the four relevance levels (softmax head)."""
    return ad.softmax(rsl_logits_batch(params, batch))


def _split_heads(x: ad.Tensor, h: int) -> ad.Tensor:
    b, d = x.data.shape
    return ad.reshape(x, (b, h, d // h))


def _attention_parts(
    attn: AttentionParams,
    q_cur: np.ndarray,
    hist_q: np.ndarray,
    hist_r: np.ndarray,
    mask: np.ndarray,
) -> tuple[ad.Tensor, ad.Tensor, int, int]:
    if hist_q.shape[0] == 0:
        raise ValidationError("attention needs at least one history entry")
    h = attn.head_count
    b, L, d = hist_q.shape
    e = d // h
    q = _split_heads(ad.matmul(ad.Tensor(q_cur), attn.w_q), h)
    k = ad.reshape(ad.matmul(ad.Tensor(hist_q.reshape(b * L, d)), attn.w_k), (b, L, h, e))
    v = ad.reshape(ad.matmul(ad.Tensor(hist_r.reshape(b * L, d)), attn.w_v), (b, L, h, e))
    scores = ad.mul(ad.attn_scores(q, k), 1.0 / np.sqrt(e))
    weights = ad.softmax(scores, mask=np.broadcast_to(mask[:, None, :], scores.data.shape))
    return weights, v, b, d


def attention_expectation(
    attn: AttentionParams,
    q_cur: np.ndarray,
    hist_q: np.ndarray,
    hist_r: np.ndarray,
    mask: np.ndarray,
) -> ad.Tensor:
    """Target attention over history: softmax(QK^T/sqrt(e)) mixing projected
    relevance embeddings. Returns [B, d]."""
    weights, v, b, d = _attention_parts(attn, q_cur, hist_q, hist_r, mask)
    return ad.reshape(ad.attn_mix(weights, v), (b, d))


def attention_weights(
    attn: AttentionParams,
    q_cur: np.ndarray,
    hist_q: np.ndarray,
    hist_r: np.ndarray,
    mask: np.ndarray,
) -> np.ndarray:
    """Attention distribution per (row, head) over history slots, [B, h, L].
    Masked slots carry exactly zero weight."""
    weights, _, _, _ = _attention_parts(attn, q_cur, hist_q, hist_r, mask)
    return weights.data


def prim_tau_batch(params: ModelParams, batch: Batch) -> ad.Tensor:
    """tau per sample; rows with empty history get exactly 1."""
    if params.attention is None or params.incentive_layers is None:
        raise ValidationError("variant has no preference-incentive module")
    if batch.hist_rows.size == 0:
        return ad.Tensor(np.ones(batch.size))
    q_cur = batch.qtext_emb[batch.hist_rows]
    r_cur = batch.pair_emb[batch.hist_rows]
    r_expect = attention_expectation(
        params.attention, q_cur, batch.hist_q_emb, batch.hist_r_emb, batch.hist_mask
    )
    z = ad.mlp_apply(
        params.incentive_layers, ad.concat([ad.Tensor(r_cur), r_expect], axis=-1)
    )
    tau_sub = ad.mul(ad.sigmoid(ad.reshape(z, (batch.hist_rows.size,))), 2.0)
    return ad.row_scatter(tau_sub, batch.hist_rows, batch.size, fill=1.0)


def score_batch(params: ModelParams, batch: Batch) -> dict[str, ad.Tensor]:
    """All score components; 'final' is always present and clamp-bounded."""
    variant = params.config.variant
    if variant == "base-only":
        p = ad.reshape(base_forward_batch(params, batch), (batch.size,))
        return {"final": ad.clamp(p, SCORE_EPS, 1.0 - SCORE_EPS)}
    base = base_forward_batch(params, batch)
    rsl = rsl_forward_batch(params, batch)
    fused = ad.tsum(ad.mul(base, rsl), axis=-1)
    out = {"base": base, "rsl": rsl, "fused": fused}
    if variant == "full":
        tau = prim_tau_batch(params, batch)
        out["tau"] = tau
        out["final"] = ad.clamp(ad.mul(tau, fused), SCORE_EPS, 1.0 - SCORE_EPS)
    else:
        out["tau"] = ad.Tensor(np.ones(batch.size))
        out["final"] = ad.clamp(fused, SCORE_EPS, 1.0 - SCORE_EPS)
    return out


def score_dataset(
    params: ModelParams,
    samples: list[Sample],
    index: EmbeddingIndex,
    batch_size: int = 4096,
) -> np.ndarray:
    """Final scores for a sample list, batched, no tape."""
    cache = TrainingCache(samples, index, params.config)
    out = np.empty(len(samples))
    for lo in range(0, len(samples), batch_size):
        rows = np.arange(lo, min(lo + batch_size, len(samples)), dtype=np.int64)
        out[rows] = score_batch(params, cache.batch(rows))["final"].data
    return out


# ---------------------------------------------------------------------------
# single-sample operations


@dataclass
class ScoreBreakdown:
    rsl_out: np.ndarray
    base_out: np.ndarray
    fused: float
    tau: float
    final: float

    def to_line(self) -> str:
        t = ",".join(f"{v:.17g}" for v in self.rsl_out)
        g = ",".join(f"{v:.17g}" for v in self.base_out)
        return f"{self.final:.17g}\t{self.fused:.17g}\t{self.tau:.17g}\t{t}\t{g}"


def _singleton(sample: Sample, index: EmbeddingIndex, params: ModelParams) -> Batch:
    return build_batch([sample], index, params.config)


def rsl_forward(sample: Sample, index: EmbeddingIndex, params: ModelParams) -> np.ndarray:
    return rsl_forward_batch(params, _singleton(sample, index, params)).data[0]


def base_forward(sample: Sample, index: EmbeddingIndex, params: ModelParams) -> np.ndarray:
    return base_forward_batch(params, _singleton(sample, index, params)).data[0]


def fuse(g: np.ndarray, T: np.ndarray) -> float:
    """Total click probability: sum_i P(click|level i) * P(level i)."""
    g = np.asarray(g, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if g.shape != (N_LEVELS,) or T.shape != (N_LEVELS,):
        raise DimensionError(f"fuse expects two length-{N_LEVELS} vectors")
    return float(g @ T)


def extract_history_preferences(
    history: list[tuple[str, str]], index: EmbeddingIndex
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Embeds each history entry: query text plus the clicked pair."""
    if len(history) > HISTORY_LIMIT:
        raise ValidationError(f"history longer than {HISTORY_LIMIT}")
    q_seq = [index.lookup_text(q) for q, _ in history]
    r_seq = [index.lookup_pair(q, i) for q, i in history]
    return q_seq, r_seq


def current_preference(ctx: PreferenceContext, attn: AttentionParams) -> np.ndarray:
    """Expected relevance embedding under attention to the current query."""
    m = len(ctx.q_seq_emb)
    if m == 0:
        raise ValidationError("empty history: cold-start handling is the caller's")
    hist_q = np.stack(ctx.q_seq_emb)[None, :, :]
    hist_r = np.stack(ctx.r_seq_emb)[None, :, :]
    mask = np.ones((1, m), dtype=bool)
    return attention_expectation(attn, ctx.q_cur_emb[None, :], hist_q, hist_r, mask).data[0]


def incentive(r_cur_emb: np.ndarray, r_expect_emb: np.ndarray, layers) -> float:
    """tau = 2*sigmoid(z) in (0,2); callers use tau=1 for empty histories."""
    r_cur_emb = np.asarray(r_cur_emb, dtype=np.float64)
    r_expect_emb = np.asarray(r_expect_emb, dtype=np.float64)
    if r_cur_emb.shape != r_expect_emb.shape or r_cur_emb.ndim != 1:
        raise DimensionError("incentive expects two equal-length vectors")
    z = ad.mlp_apply(layers, ad.Tensor(np.concatenate([r_cur_emb, r_expect_emb])[None, :]))
    return float(2.0 * ad.np_sigmoid(z.data[0, 0]))


def personalized_score(sample: Sample, index: EmbeddingIndex, params: ModelParams) -> ScoreBreakdown:
    """Full per-sample breakdown; undefined for the base-only variant."""
    if params.config.variant == "base-only":
        raise ValidationError("base-only variant has no fusion breakdown")
    batch = _singleton(sample, index, params)
    out = score_batch(params, batch)
    return ScoreBreakdown(
        rsl_out=out["rsl"].data[0].copy(),
        base_out=out["base"].data[0].copy(),
        fused=float(out["fused"].data[0]),
        tau=float(out["tau"].data[0]),
        final=float(out["final"].data[0]),
    )


def sample_for_scoring(
    user_id: int,
    query_text: str,
    item_id: int,
    item_text: str,
    history: list[tuple[str, str]],
) -> Sample:
    """Inference-time record: labels are placeholders, flags recomputed."""
    cm, cq = derive_flags(query_text, item_text)
    return Sample(
        user_id=user_id,
        query_text=query_text,
        item_id=item_id,
        item_text=item_text,
        category_match=cm,
        contains_query=cq,
        rsl=1,
        click=0,
        history=list(history),
    )
