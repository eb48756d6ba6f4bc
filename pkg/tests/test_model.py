import numpy as np
import pytest

from rankfuse import autodiff as ad
from rankfuse import model as md
from rankfuse.checkpoint import params_digest
from rankfuse.data import Sample
from rankfuse.encoder import PAIR_KEY_SEP, EmbeddingIndex
from rankfuse.errors import DimensionError, ValidationError


def tiny_config(**kw):
    defaults = dict(
        variant="full",
        d=8,
        field_dim=4,
        user_buckets=16,
        item_buckets=32,
        category_buckets=8,
        token_buckets=32,
        base_hidden=(8,),
        rsl_hidden=(8,),
        incentive_hidden=(4,),
        seed=5,
    )
    defaults.update(kw)
    return md.ModelConfig(**defaults)


def make_index(samples, d, seed=11):
    """Deterministic fake index covering every text/pair the samples use."""
    rng = np.random.default_rng(seed)
    idx = EmbeddingIndex(dim=d, checkpoint_id="fixture")
    texts, pairs = set(), set()
    for s in samples:
        texts.update([s.query_text, s.item_text])
        pairs.add((s.query_text, s.item_text))
        for q, i in s.history:
            texts.add(q)
            pairs.add((q, i))
    for t in sorted(texts):
        v = rng.normal(size=d)
        idx.text[t] = v / np.linalg.norm(v)
    for q, i in sorted(pairs):
        v = rng.normal(size=d)
        idx.pair[q + PAIR_KEY_SEP + i] = v / np.linalg.norm(v)
    return idx


def make_samples(n, seed=3, with_history=True):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        u = int(rng.integers(0, 6))
        q = f"cat{int(rng.integers(0, 3))} d{int(rng.integers(0, 5))}"
        it = f"cat{int(rng.integers(0, 3))} d{int(rng.integers(0, 5))} d{int(rng.integers(5, 9))}"
        hist = []
        if with_history and rng.random() < 0.6:
            for _ in range(int(rng.integers(1, 4))):
                hist.append((f"cat{int(rng.integers(0, 3))} h", f"cat{int(rng.integers(0, 3))} h x"))
        out.append(
            Sample(
                user_id=u,
                query_text=q,
                item_id=int(rng.integers(0, 20)),
                item_text=it,
                category_match=int(q.split()[0] == it.split()[0]),
                contains_query=0,
                rsl=int(rng.integers(1, 5)),
                click=int(rng.random() < 0.4),
                history=hist,
            )
        )
    return out


def zero_layers(layers):
    for layer in layers:
        layer.W.data[...] = 0.0
        layer.b.data[...] = 0.0


# ---------------------------------------------------------------------------
# config / params


def test_config_validation():
    with pytest.raises(ValidationError):
        md.ModelConfig(variant="fancy")
    with pytest.raises(ValidationError):
        md.ModelConfig(d=10, head_count=4)
    with pytest.raises(ValidationError):
        md.ModelConfig(variant="base-only", use_wide=True)
    with pytest.raises(ValidationError):
        md.ModelConfig(field_dim=0)


def test_group_partition():
    params = md.build_model(tiny_config())
    groups = {name: p.group for name, p in params.all_params().items()}
    assert all(g == "base" for n, g in groups.items() if n.startswith(("emb.", "base.")))
    assert all(g == "rsl-finetune" for n, g in groups.items() if n.startswith("rsl."))
    assert all(g == "prim" for n, g in groups.items() if n.startswith(("attn.", "incentive.")))
    assert set(params.by_group()) == {"base", "rsl-finetune", "prim"}

    solo = md.build_model(tiny_config(variant="base-only"))
    assert set(solo.by_group()) == {"base"}
    assert solo.rsl_layers is None and solo.attention is None
    # single-head output
    assert solo.base_layers[-1].W.data.shape[1] == 1


def test_build_model_deterministic():
    a = md.build_model(tiny_config())
    b = md.build_model(tiny_config())
    assert params_digest(a.all_params()) == params_digest(b.all_params())


def test_checkpoint_roundtrip(tmp_path):
    params = md.build_model(tiny_config(use_wide=True))
    path = str(tmp_path / "model.ckpt")
    md.save_model(params, path, extra_meta={"note": "x"})
    back, meta = md.load_model(path)
    assert meta["note"] == "x"
    assert back.config == params.config
    assert params_digest(back.all_params()) == params_digest(params.all_params())

    # a checkpoint missing parameters is rejected
    from rankfuse.checkpoint import save_params

    subset = dict(list(params.all_params().items())[:3])
    save_params(str(tmp_path / "bad.ckpt"), subset, md.config_to_meta(params.config))
    with pytest.raises(ValidationError):
        md.load_model(str(tmp_path / "bad.ckpt"))


# ---------------------------------------------------------------------------
# forwards


def test_rsl_output_simplex_and_uniform_at_zero():
    samples = make_samples(12)
    cfg = tiny_config()
    params = md.build_model(cfg)
    batch = md.build_batch(samples, make_index(samples, cfg.d), cfg)
    out = md.rsl_forward_batch(params, batch).data
    assert np.all(out > 0) and np.all(out < 1)
    assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-9

    zero_layers(params.rsl_layers)
    out = md.rsl_forward_batch(params, batch).data
    assert np.allclose(out, 0.25, atol=0)


def test_base_output_independent_sigmoids():
    samples = make_samples(12)
    cfg = tiny_config()
    params = md.build_model(cfg)
    batch = md.build_batch(samples, make_index(samples, cfg.d), cfg)
    out = md.base_forward_batch(params, batch).data
    assert out.shape == (12, 4)
    assert np.all(out > 0) and np.all(out < 1)

    zero_layers(params.base_layers)
    out = md.base_forward_batch(params, batch).data
    assert np.allclose(out, 0.5, atol=0)


def test_rsl_hand_trace_single_layer():
    # one affine layer over [flags, q_emb, i_emb, pair_emb] then softmax
    samples = make_samples(3, with_history=False)
    cfg = tiny_config(rsl_hidden=())
    params = md.build_model(cfg)
    idx = make_index(samples, cfg.d)
    batch = md.build_batch(samples, idx, cfg)

    rng = np.random.default_rng(0)
    W = rng.normal(size=(2 + 3 * cfg.d, 4))
    b = rng.normal(size=4)
    params.rsl_layers[0].W.data[...] = W
    params.rsl_layers[0].b.data[...] = b

    x = np.concatenate([batch.flags, batch.qtext_emb, batch.itext_emb, batch.pair_emb], axis=-1)
    logits = x @ W + b
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    expect = e / e.sum(axis=-1, keepdims=True)
    got = md.rsl_forward_batch(params, batch).data
    assert np.abs(got - expect).max() < 1e-12


def test_base_hand_trace_single_layer():
    samples = make_samples(3, with_history=False)
    cfg = tiny_config(base_hidden=())
    params = md.build_model(cfg)
    idx = make_index(samples, cfg.d)
    batch = md.build_batch(samples, idx, cfg)

    rng = np.random.default_rng(1)
    n_in = md.base_input_dim(cfg)
    W = rng.normal(size=(n_in, 4))
    b = rng.normal(size=4)
    params.base_layers[0].W.data[...] = W
    params.base_layers[0].b.data[...] = b

    fields = np.concatenate(
        [
            params.embeddings["user"].data[batch.user_ids],
            params.embeddings["item"].data[batch.item_ids],
            params.embeddings["query_category"].data[batch.qcat_ids],
            params.embeddings["item_category"].data[batch.icat_ids],
            np.stack([
                params.embeddings["query_tokens"].data[batch.qtok_flat[s:e2]].mean(axis=0)
                for s, e2 in zip(batch.qtok_off[:-1], batch.qtok_off[1:])
            ]),
            np.stack([
                params.embeddings["item_tokens"].data[batch.itok_flat[s:e2]].mean(axis=0)
                for s, e2 in zip(batch.itok_off[:-1], batch.itok_off[1:])
            ]),
        ],
        axis=-1,
    )
    x = np.concatenate([fields, batch.flags, batch.pair_emb], axis=-1)
    expect = 1.0 / (1.0 + np.exp(-(x @ W + b)))
    got = md.base_forward_batch(params, batch).data
    assert np.abs(got - expect).max() < 1e-12


def test_fuse_examples():
    assert md.fuse(np.array([0.1, 0.2, 0.3, 0.4]), np.array([0.0, 0.0, 1.0, 0.0])) == pytest.approx(0.3)
    T = np.array([0.7, 0.1, 0.1, 0.1])
    assert md.fuse(np.array([0.6, 0.6, 0.6, 0.6]), T) == pytest.approx(0.6)
    assert md.fuse(np.array([0.0, 0.0, 0.0, 1.0]), np.full(4, 0.25)) == pytest.approx(0.25)
    with pytest.raises(DimensionError):
        md.fuse(np.ones(3), np.full(4, 0.25))

    rng = np.random.default_rng(2)
    for _ in range(200):
        g = rng.uniform(1e-6, 1 - 1e-6, size=4)
        t = rng.dirichlet(np.ones(4))
        assert 0.0 < md.fuse(g, t) < 1.0


# ---------------------------------------------------------------------------
# history / attention / incentive


def test_extract_history_preferences():
    samples = make_samples(6)
    idx = make_index(samples, 8)
    assert md.extract_history_preferences([], idx) == ([], [])

    hist = [h for s in samples for h in s.history][:2]
    q_seq, r_seq = md.extract_history_preferences(hist, idx)
    misses_before = idx.cache_misses
    assert len(q_seq) == len(r_seq) == len(hist)
    assert np.array_equal(q_seq[0], idx.lookup_text(hist[0][0]))
    assert np.array_equal(r_seq[0], idx.lookup_pair(*hist[0]))
    assert idx.cache_misses == misses_before

    with pytest.raises(ValidationError):
        md.extract_history_preferences([("q", "i")] * 51, idx)


def _attn(d, seed=4, head_count=1, identity=False):
    rng = np.random.default_rng(seed)
    mk = lambda n: ad.Parameter(n, np.eye(d) if identity else rng.normal(0, 0.3, size=(d, d)), "prim")
    return md.AttentionParams(mk("attn.w_q"), mk("attn.w_k"), mk("attn.w_v"), head_count)


def test_attention_single_entry_exact():
    d = 8
    attn = _attn(d)
    rng = np.random.default_rng(7)
    q_cur, q1, r1 = rng.normal(size=(3, d))
    ctx = md.PreferenceContext(q_cur, [q1], [r1], r1)
    out = md.current_preference(ctx, attn)
    assert np.array_equal(out, r1 @ attn.w_v.data)


def test_attention_identical_keys_mean():
    d = 8
    attn = _attn(d)
    rng = np.random.default_rng(8)
    q_cur = rng.normal(size=d)
    q1 = rng.normal(size=d)
    rs = [rng.normal(size=d) for _ in range(4)]
    ctx = md.PreferenceContext(q_cur, [q1] * 4, rs, rs[0])
    out = md.current_preference(ctx, attn)
    expect = np.stack([r @ attn.w_v.data for r in rs]).mean(axis=0)
    assert np.abs(out - expect).max() < 1e-12


def test_attention_hand_trace_two_entries():
    # identity projections, d=4, single head: weights = softmax(q.k_i / 2)
    d = 4
    attn = _attn(d, identity=True)
    q_cur = np.array([1.0, 0.5, -0.25, 2.0])
    k1 = np.array([0.5, 1.0, 0.0, -1.0])
    k2 = np.array([-1.0, 0.25, 2.0, 0.5])
    r1 = np.array([1.0, 0.0, 2.0, -1.0])
    r2 = np.array([0.0, 3.0, -2.0, 1.0])
    z = np.array([q_cur @ k1, q_cur @ k2]) / np.sqrt(d)
    w = np.exp(z - z.max())
    w = w / w.sum()
    expect = w[0] * r1 + w[1] * r2
    got = md.current_preference(md.PreferenceContext(q_cur, [k1, k2], [r1, r2], r1), attn)
    assert np.abs(got - expect).max() < 1e-12


def test_attention_output_in_hull_of_projected_values():
    d = 6
    attn = _attn(d, seed=9)
    rng = np.random.default_rng(10)
    q_cur = rng.normal(size=d)
    qs = [rng.normal(size=d) for _ in range(5)]
    rs = [rng.normal(size=d) for _ in range(5)]
    out = md.current_preference(md.PreferenceContext(q_cur, qs, rs, rs[0]), attn)
    projected = np.stack([r @ attn.w_v.data for r in rs])
    for _ in range(25):
        direction = rng.normal(size=d)
        vals = projected @ direction
        assert vals.min() - 1e-9 <= out @ direction <= vals.max() + 1e-9


def test_attention_permutation_equivariance():
    d = 8
    attn = _attn(d, seed=12)
    rng = np.random.default_rng(13)
    q_cur = rng.normal(size=d)
    qs = [rng.normal(size=d) for _ in range(6)]
    rs = [rng.normal(size=d) for _ in range(6)]
    base = md.current_preference(md.PreferenceContext(q_cur, qs, rs, rs[0]), attn)
    perm = rng.permutation(6)
    shuffled = md.current_preference(
        md.PreferenceContext(q_cur, [qs[i] for i in perm], [rs[i] for i in perm], rs[0]), attn
    )
    assert np.abs(base - shuffled).max() < 1e-12


def test_attention_multi_head_shapes_and_bounds():
    d = 8
    attn = _attn(d, seed=14, head_count=2)
    rng = np.random.default_rng(15)
    q_cur = rng.normal(size=d)
    qs = [rng.normal(size=d) for _ in range(3)]
    rs = [rng.normal(size=d) for _ in range(3)]
    out = md.current_preference(md.PreferenceContext(q_cur, qs, rs, rs[0]), attn)
    assert out.shape == (d,)
    assert np.all(np.isfinite(out))


def test_attention_rejects_empty_history():
    attn = _attn(4)
    ctx = md.PreferenceContext(np.zeros(4), [], [], np.zeros(4))
    with pytest.raises(ValidationError):
        md.current_preference(ctx, attn)


def test_incentive_neutral_and_range():
    cfg = tiny_config()
    params = md.build_model(cfg)
    zero_layers(params.incentive_layers)
    rng = np.random.default_rng(16)
    r_cur, r_expect = rng.normal(size=(2, cfg.d))
    assert md.incentive(r_cur, r_expect, params.incentive_layers) == 1.0

    params2 = md.build_model(tiny_config(seed=77))
    for _ in range(100):
        a, b = rng.normal(size=(2, cfg.d))
        tau = md.incentive(a, b, params2.incentive_layers)
        assert 0.0 < tau < 2.0
    with pytest.raises(DimensionError):
        md.incentive(np.zeros(3), np.zeros(4), params.incentive_layers)


# ---------------------------------------------------------------------------
# composition


def test_cold_start_tau_exactly_one():
    samples = [make_samples(1, with_history=False)[0]]
    cfg = tiny_config()
    params = md.build_model(cfg)
    bd = md.personalized_score(samples[0], make_index(samples, cfg.d), params)
    assert bd.tau == 1.0
    assert bd.final == bd.fused  # clamp inactive at interior values


def test_breakdown_consistency_random():
    samples = make_samples(20)
    cfg = tiny_config()
    params = md.build_model(cfg)
    idx = make_index(samples, cfg.d)
    for s in samples:
        bd = md.personalized_score(s, idx, params)
        assert abs(bd.fused - float(bd.base_out @ bd.rsl_out)) < 1e-12
        assert bd.final == float(np.clip(bd.tau * bd.fused, md.SCORE_EPS, 1 - md.SCORE_EPS))
        assert 0.0 < bd.fused < 1.0
        assert 0.0 < bd.tau < 2.0
        assert md.SCORE_EPS <= bd.final <= 1 - md.SCORE_EPS


def test_clamp_engages_at_ceiling():
    samples = make_samples(4, with_history=True)
    samples = [s for s in samples if s.history][:1]
    cfg = tiny_config()
    params = md.build_model(cfg)
    idx = make_index(samples, cfg.d)
    # saturate every base head and the incentive logit
    for layer in params.base_layers:
        layer.W.data[...] = 0.0
        layer.b.data[...] = 0.0
    params.base_layers[-1].b.data[...] = 40.0
    params.incentive_layers[-1].b.data[...] = 40.0
    bd = md.personalized_score(samples[0], idx, params)
    assert bd.final == 1.0 - 1e-7
    assert bd.tau > 1.99


def test_score_batch_no_prim_and_base_only():
    samples = make_samples(10)
    cfg = tiny_config(variant="no-prim")
    params = md.build_model(cfg)
    idx = make_index(samples, cfg.d)
    out = md.score_batch(params, md.build_batch(samples, idx, cfg))
    assert np.all(out["tau"].data == 1.0)
    assert np.array_equal(
        out["final"].data, np.clip(out["fused"].data, md.SCORE_EPS, 1 - md.SCORE_EPS)
    )

    solo_cfg = tiny_config(variant="base-only")
    solo = md.build_model(solo_cfg)
    out2 = md.score_batch(solo, md.build_batch(samples, idx, solo_cfg))
    assert set(out2) == {"final"}
    assert np.all((out2["final"].data > 0) & (out2["final"].data < 1))
    with pytest.raises(ValidationError):
        md.personalized_score(samples[0], idx, solo)


def test_ranking_scale_invariance_pre_clamp():
    samples = make_samples(15)
    cfg = tiny_config()
    params = md.build_model(cfg)
    idx = make_index(samples, cfg.d)
    bds = [md.personalized_score(s, idx, params) for s in samples]
    pre = np.array([b.tau * b.fused for b in bds])
    for c in (0.3, 2.5, 17.0):
        assert np.argmax(pre) == np.argmax(c * pre)


def test_cache_slicing_matches_direct_batch():
    samples = make_samples(30, seed=21)
    cfg = tiny_config()
    params = md.build_model(cfg)
    idx = make_index(samples, cfg.d)
    cache = md.TrainingCache(samples, idx, cfg)
    rows = np.array([3, 7, 11, 18, 25], dtype=np.int64)
    got = md.score_batch(params, cache.batch(rows))["final"].data
    direct = md.score_batch(params, md.build_batch([samples[i] for i in rows], idx, cfg))["final"].data
    assert np.array_equal(got, direct)


def test_index_dim_mismatch_rejected():
    samples = make_samples(3)
    cfg = tiny_config()
    with pytest.raises(DimensionError):
        md.build_batch(samples, make_index(samples, cfg.d + 1), cfg)


def test_full_composition_finite_difference():
    samples = make_samples(4, seed=31)
    if not any(s.history for s in samples):
        samples[0].history.append(("cat0 h", "cat0 h x"))
    cfg = tiny_config()
    params = md.build_model(cfg)
    idx = make_index(samples, cfg.d)
    cache = md.TrainingCache(samples, idx, cfg)
    rows = np.arange(4, dtype=np.int64)
    plist = list(params.all_params().values())

    def loss_fn():
        out = md.score_batch(params, cache.batch(rows))
        return ad.tsum(out["final"])

    err = ad.finite_difference_check(loss_fn, plist)
    assert err < 1e-4, err


def test_breakdown_line_format():
    samples = make_samples(2)
    cfg = tiny_config()
    params = md.build_model(cfg)
    bd = md.personalized_score(samples[0], make_index(samples, cfg.d), params)
    line = bd.to_line()
    fields = line.split("\t")
    assert len(fields) == 5
    assert float(fields[0]) == bd.final
    assert float(fields[1]) == bd.fused
    assert float(fields[2]) == bd.tau
    assert [float(v) for v in fields[3].split(",")] == list(bd.rsl_out)
    assert [float(v) for v in fields[4].split(",")] == list(bd.base_out)


def test_probability_invariants_sweep():
    rng = np.random.default_rng(40)
    cfg = tiny_config()
    for trial in range(25):
        params = md.build_model(tiny_config(seed=trial))
        samples = make_samples(8, seed=100 + trial)
        idx = make_index(samples, cfg.d, seed=200 + trial)
        out = md.score_batch(params, md.build_batch(samples, idx, cfg))
        rsl = out["rsl"].data
        base = out["base"].data
        assert np.abs(rsl.sum(axis=-1) - 1).max() < 1e-9
        assert np.all((base > 0) & (base < 1))
        assert np.all((out["fused"].data > 0) & (out["fused"].data < 1))
        assert np.all((out["tau"].data > 0) & (out["tau"].data < 2))
