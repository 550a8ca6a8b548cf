import numpy as np
import pytest

from conftest import random_pair
from conductor.data import PAD_ID, TokenizedPair
from conductor.model import (
    SITES,
    CrossEncoder,
    ModelConfig,
    NeuronId,
    PruningMask,
    embed_batch,
    enumerate_neurons,
    group_by_length,
    site_offsets,
)
from conductor.tape import record_forward


def test_neuron_count_and_order(random_model):
    cfg = random_model.config
    neurons = enumerate_neurons(cfg)
    assert len(neurons) == cfg.num_neurons == cfg.num_layers * (5 * cfg.d_model + cfg.d_ff) == 448
    assert neurons[0] == NeuronId(0, SITES[0], 0)
    offs = site_offsets(cfg)
    for (layer, site), start in offs.items():
        assert neurons[start] == NeuronId(layer, site, 0)


@pytest.mark.parametrize("kwargs", [dict(d_model=6, num_heads=4), dict(num_layers=0), dict(seed=-1)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


def test_forward_shapes_and_batching(random_model, spec, rng):
    pairs = [random_pair(rng, spec) for _ in range(3)]
    single = np.stack([random_model.logits(p) for p in pairs])
    batch = random_model.forward(embed_batch(random_model, pairs))
    assert batch.shape == (3, 2)
    np.testing.assert_allclose(batch, single, rtol=1e-12, atol=1e-12)


def test_every_site_is_marked(random_model, spec, rng):
    emb = random_model.embed(random_pair(rng, spec))
    _, trace = record_forward(lambda o, e: random_model.apply(o, e), emb)
    for layer in range(random_model.config.num_layers):
        for site in SITES:
            v = trace.value(("site", layer, site))
            assert v.shape == (len(emb), random_model.config.site_width(site))
    for layer in range(random_model.config.num_layers + 1):
        assert trace.value(("resid", layer)).shape == emb.shape


def test_mask_zeroes_site_activations(random_model, spec, rng):
    emb = random_model.embed(random_pair(rng, spec))
    mask = PruningMask({NeuronId(1, "ffn_intermediate", 5), NeuronId(0, "query_proj", 2)})
    _, trace = record_forward(lambda o, e: random_model.apply(o, e, mask), emb)
    assert np.all(trace.value(("site", 1, "ffn_intermediate"))[:, 5] == 0)
    assert np.all(trace.value(("site", 0, "query_proj"))[:, 2] == 0)
    assert not np.array_equal(random_model.forward(emb, mask), random_model.forward(emb))


def test_empty_mask_is_identity(random_model, spec, rng):
    emb = random_model.embed(random_pair(rng, spec))
    assert np.array_equal(random_model.forward(emb, PruningMask()), random_model.forward(emb))


def test_mask_out_of_range(random_model):
    with pytest.raises(ValueError):
        PruningMask({NeuronId(9, "query_proj", 0)}).validate(random_model.config)
    with pytest.raises(ValueError):
        PruningMask({NeuronId(0, "ffn_intermediate", 64)}).validate(random_model.config)


def test_pad_row_is_zero(random_model):
    assert np.all(random_model.params["tok_emb"][PAD_ID] == 0)


def test_persistence_roundtrip(random_model, tmp_path, spec, rng):
    path = random_model.save(tmp_path / "sub" / "m.json")
    loaded = CrossEncoder.load(path)
    assert loaded.content_hash == random_model.content_hash
    assert loaded.vocab.tokens == random_model.vocab.tokens
    emb = random_model.embed(random_pair(rng, spec))
    assert np.array_equal(loaded.forward(emb), random_model.forward(emb))


def test_bad_checkpoint_version(random_model):
    text = random_model.to_json().replace('"format_version":1', '"format_version":99')
    with pytest.raises(ValueError, match="format_version"):
        CrossEncoder.from_json(text)


def test_embed_validates(random_model):
    with pytest.raises(ValueError, match="out of range"):
        random_model.embed(TokenizedPair.build([999], [3]))
    with pytest.raises(ValueError, match="max_seq_len"):
        random_model.embed(TokenizedPair.build([3] * 10, [3] * 10))


def test_group_by_length():
    assert group_by_length(["aa", "b", "cc", "ddd"]) == [[1], [0, 2], [3]]


# independent reference forward: plain numpy, masked activations replaced by literal zeros
def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-12) * g + b


def _gelu(x):
    from math import erf, sqrt

    return np.vectorize(lambda v: 0.5 * v * (1 + erf(v / sqrt(2))))(x)


def reference_forward(model, emb, dead=frozenset()):
    P, cfg = model.params, model.config
    dh = cfg.d_model // cfg.num_heads

    def site(x, layer, name, w, b):
        y = x @ P[f"L{layer}.{w}"] + P[f"L{layer}.{b}"]
        for n in dead:
            if n.layer == layer and n.site == name:
                y[:, n.unit] = 0.0
        return y

    h = _ln(emb, P["emb_ln_g"], P["emb_ln_b"])
    for l in range(cfg.num_layers):
        q, k, v = (site(h, l, s, w, b) for s, w, b in
                   (("query_proj", "wq", "bq"), ("key_proj", "wk", "bk"), ("value_proj", "wv", "bv")))
        ctx = np.zeros_like(q)
        for i in range(cfg.num_heads):
            sl = slice(i * dh, (i + 1) * dh)
            s = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
            a = np.exp(s - s.max(-1, keepdims=True))
            ctx[:, sl] = (a / a.sum(-1, keepdims=True)) @ v[:, sl]
        h = _ln(h + site(ctx, l, "attention_output", "wo", "bo"), P[f"L{l}.ln1_g"], P[f"L{l}.ln1_b"])
        f = _gelu(site(h, l, "ffn_intermediate", "w1", "b1"))
        h = _ln(h + site(f, l, "ffn_output", "w2", "b2"), P[f"L{l}.ln2_g"], P[f"L{l}.ln2_b"])
    pooled = np.tanh(h[0] @ P["pool_w"] + P["pool_b"])
    return pooled @ P["cls_w"] + P["cls_b"]


@pytest.fixture
def tiny(spec):
    from conductor.model import init_params

    cfg = ModelConfig(num_layers=2, d_model=8, num_heads=2, d_ff=12, vocab_size=len(spec.vocab()),
                      max_seq_len=spec.seq_len, seed=4)
    p = init_params(cfg)
    r = np.random.default_rng(9)
    # nonzero biases so post-bias masking is exercised
    for k in p:
        if k.split(".")[-1] in ("bq", "bk", "bv", "bo", "b1", "b2", "pool_b", "cls_b"):
            p[k] = p[k] + r.normal(0, 0.3, size=p[k].shape)
    return CrossEncoder(cfg, p, spec.vocab())


@pytest.mark.parametrize("seed", range(5))
def test_mask_locality_against_reference_forward(tiny, spec, seed):
    rng = np.random.default_rng(seed)
    emb = tiny.embed(random_pair(rng, spec))
    neurons = enumerate_neurons(tiny.config)
    dead = frozenset(neurons[i] for i in rng.choice(len(neurons), size=int(rng.integers(0, 30)), replace=False))
    np.testing.assert_allclose(tiny.forward(emb, PruningMask(dead)), reference_forward(tiny, emb, dead),
                               rtol=1e-10, atol=1e-12)


def test_full_mask_leaves_only_residual_flow(tiny, spec, rng):
    emb = tiny.embed(random_pair(rng, spec))
    full = PruningMask(enumerate_neurons(tiny.config))
    P = tiny.params
    h = _ln(emb, P["emb_ln_g"], P["emb_ln_b"])
    for l in range(tiny.config.num_layers):
        h = _ln(_ln(h, P[f"L{l}.ln1_g"], P[f"L{l}.ln1_b"]), P[f"L{l}.ln2_g"], P[f"L{l}.ln2_b"])
    by_hand = np.tanh(h[0] @ P["pool_w"] + P["pool_b"]) @ P["cls_w"] + P["cls_b"]
    np.testing.assert_allclose(tiny.forward(emb, full), by_hand, rtol=1e-10, atol=1e-12)


def test_masking_ffn_output_unit_matters_iff_active(tiny, spec, rng):
    emb = tiny.embed(random_pair(rng, spec))
    _, trace = record_forward(lambda o, e: tiny.apply(o, e), emb)
    base = tiny.forward(emb)
    W = tiny.params["L1.w2"]
    # a unit whose activation is exactly zero: zero its weights and bias
    tiny.params["L1.w2"] = W.copy()
    tiny.params["L1.w2"][:, 3] = 0.0
    tiny.params["L1.b2"] = tiny.params["L1.b2"].copy()
    tiny.params["L1.b2"][3] = 0.0
    quiet = tiny.forward(emb)
    assert np.array_equal(tiny.forward(emb, PruningMask({NeuronId(1, "ffn_output", 3)})), quiet)
    tiny.params["L1.w2"] = W
    act = trace.value(("site", 1, "ffn_output"))
    for unit in range(tiny.config.d_model):
        changed = not np.array_equal(tiny.forward(emb, PruningMask({NeuronId(1, "ffn_output", unit)})), base)
        assert changed == bool(np.any(act[:, unit] != 0))


def test_predict_label_probabilities(random_model, spec, rng, monkeypatch):
    import math

    from conductor.data import RELEVANT

    pair = random_pair(rng, spec)
    monkeypatch.setattr(random_model, "logits", lambda p, mask=None: np.array([math.log(3), 0.0]))
    label, probs = random_model.predict_label(pair)
    assert label == RELEVANT
    np.testing.assert_allclose(probs, [0.75, 0.25], rtol=0, atol=1e-15)
    monkeypatch.setattr(random_model, "logits", lambda p, mask=None: np.zeros(2))
    assert np.array_equal(random_model.predict_label(pair)[1], [0.5, 0.5])
    monkeypatch.undo()
    for _ in range(20):
        probs = random_model.predict_label(random_pair(rng, spec))[1]
        assert abs(probs.sum() - 1.0) <= 1e-12


def test_embed_matches_parameter_lookup(random_model, spec, rng):
    pair = random_pair(rng, spec)
    P = random_model.params
    emb = random_model.embed(pair)
    for i, (t, s) in enumerate(zip(pair.token_ids, pair.segment_ids)):
        np.testing.assert_array_equal(emb[i], P["tok_emb"][t] + P["pos_emb"][i] + P["seg_emb"][s])


def test_neuron_count_formula_property():
    r = np.random.default_rng(3)
    for _ in range(50):
        h = int(r.integers(1, 4))
        cfg = ModelConfig(num_layers=int(r.integers(1, 4)), d_model=h * int(r.integers(1, 5)), num_heads=h,
                          d_ff=int(r.integers(1, 20)))
        n = enumerate_neurons(cfg)
        assert len(n) == cfg.num_layers * (5 * cfg.d_model + cfg.d_ff) and n == enumerate_neurons(cfg)
    assert len(enumerate_neurons(ModelConfig(num_layers=2, d_model=8, num_heads=2, d_ff=16))) == 112
    assert len(enumerate_neurons(ModelConfig(num_layers=1, d_model=1, num_heads=1, d_ff=1))) == 6


def test_swapping_distractors_keeps_pair_logits(random_model, spec):
    from conductor.ablation import rerank
    from conductor.data import generate_synthetic_corpus

    c = generate_synthetic_corpus(spec, 2, seed=3)
    qid = sorted(c.candidates)[0]
    pids = list(c.candidates[qid])
    a = dict(rerank(random_model, c, qid, pids))
    pids[1], pids[5] = pids[5], pids[1]
    assert dict(rerank(random_model, c, qid, pids)) == a
