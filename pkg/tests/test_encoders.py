import numpy as np
import pytest
import torch

import oracles
from mscpt.data import write_embedding_cache
from mscpt.encoders import (EncoderError, ImageTower, PromptGenerator, PromptState, TextTower, Tokenizer,
                            generate_low_prompts, load_cached_embeddings)


def tiny_text(L=1, d=4, heads=2, vocab=12, seed=0):
    torch.manual_seed(seed)
    tower = TextTower(vocab, d, L, heads, 16, 3).double().requires_grad_(False)
    # hand-set scale: push the default init away from near-zero values
    with torch.no_grad():
        for p in tower.parameters():
            p.mul_(3.0)
    return tower


def tiny_image(L=1, d=4, heads=2, F=5, seed=0):
    torch.manual_seed(seed)
    tower = ImageTower(F, d, L, heads, 3).double().requires_grad_(False)
    with torch.no_grad():
        for p in tower.parameters():
            p.mul_(3.0)
    return tower


def test_tokenizer_roundtrip():
    tok = Tokenizer.fit(["tissue showing acinar", "Acinar, solid!"])
    ids = tok.encode("acinar solid unknownword")
    assert ids[0] == Tokenizer.CLS and ids[-1] == Tokenizer.EOT
    assert ids[-2] == Tokenizer.UNK
    assert [tok.itos[i] for i in ids[1:3]] == ["acinar", "solid"]


@pytest.mark.derived
@pytest.mark.parametrize("heads", [1, 2])
def test_text_frozen_matches_one_layer_oracle(heads):
    tower = tiny_text(heads=heads)
    seqs = [[1, 5, 6, 7, 2], [1, 9, 2]]
    emb, trace = tower.encode_frozen(seqs)
    for i, s in enumerate(seqs):
        e, tr = oracles.text_frozen(tower, s, heads)
        np.testing.assert_allclose(emb[i].numpy(), e, atol=1e-6)
        np.testing.assert_allclose(trace[i].numpy(), tr, atol=1e-6)


def test_text_frozen_shapes_and_determinism():
    tower = tiny_text(L=2)
    a = tower.encode_frozen([[1, 4, 2]])
    b = tower.encode_frozen([[1, 4, 2]])
    assert a[0].shape == (1, 3) and a[1].shape == (1, 2, 4)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_text_frozen_rejects_bad_sequences():
    tower = tiny_text()
    with pytest.raises(EncoderError, match="eot"):
        tower.encode_frozen([[1, 4, 5]])
    with pytest.raises(EncoderError, match="context limit"):
        tower.encode_frozen([[1] + [4] * 20 + [2]])


@pytest.mark.derived
@pytest.mark.parametrize("L", [1, 2])
def test_text_prompted_matches_oracle(L):
    tower = tiny_text(L=L)
    rng = np.random.default_rng(0)
    p_glob = rng.standard_normal((L, 2, 4))
    p_low = rng.standard_normal((L, 3, 4))
    words = [5, 6, 7]
    z = tower.encode_prompted([words], torch.as_tensor(p_glob), torch.as_tensor(p_low)[None])
    np.testing.assert_allclose(z[0].numpy(), oracles.text_prompted(tower, words, p_glob, p_low, 2), atol=1e-6)


def test_text_prompted_batch_with_padding_matches_single_rows():
    tower = tiny_text(L=2)
    pg = torch.randn(2, 2, 4, dtype=torch.float64)
    pl = torch.randn(2, 2, 3, 4, dtype=torch.float64)
    words = [[5, 6, 7, 8], [9]]
    batch = tower.encode_prompted(words, pg, pl)
    for i, w in enumerate(words):
        single = tower.encode_prompted([w], pg, pl[i:i + 1])
        torch.testing.assert_close(batch[i], single[0], atol=1e-10, rtol=0)


@pytest.mark.derived
def test_zero_prompts_match_padded_frozen_oracle():
    tower = tiny_text(L=2)
    g = PromptGenerator(4).double()  # zero-initialised output layer
    traces = torch.randn(3, 2, 4, dtype=torch.float64)
    p_low = generate_low_prompts(traces, g)
    assert torch.count_nonzero(p_low) == 0
    p_glob = torch.zeros(2, 2, 4, dtype=torch.float64)
    words = [5, 6]
    z = tower.encode_prompted([words], p_glob, p_low[None])
    want = oracles.text_prompted(tower, words, np.zeros((2, 2, 4)), np.zeros((2, 3, 4)), 2)
    np.testing.assert_allclose(z[0].detach().numpy(), want, atol=1e-6)


def test_prompt_layout_at_every_layer():
    tower = tiny_text(L=2)
    pg = torch.randn(2, 2, 4, dtype=torch.float64)
    pl = torch.randn(1, 2, 3, 4, dtype=torch.float64)
    seen = []

    def observe(layer, x, spans):
        width = 1 + 2 + 3 + 4 + 1
        assert x.shape[1] == width
        assert spans["glob"] == (1, 3) and spans["low"] == (3, 6) and spans["eot"] == [10]
        torch.testing.assert_close(x[0, 1:3], pg[layer])
        torch.testing.assert_close(x[0, 3:6], pl[0, layer])
        seen.append(layer)

    tower.encode_prompted([[5, 6, 7, 8]], pg, pl, observer=observe)
    assert seen == [0, 1]


def test_prompted_width_over_context_limit():
    tower = tiny_text()
    with pytest.raises(EncoderError, match="context limit"):
        tower.encode_prompted([[5] * 10], torch.zeros(1, 2, 4, dtype=torch.float64),
                              torch.zeros(1, 1, 5, 4, dtype=torch.float64))


@pytest.mark.derived
@pytest.mark.parametrize("p_len", [0, 2])
def test_image_matches_oracle(p_len):
    tower = tiny_image(L=2)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 2, 5))
    p_vis = rng.standard_normal((2, p_len, 4)) if p_len else None
    out = tower(x, None if p_vis is None else torch.as_tensor(p_vis))
    for i in range(3):
        np.testing.assert_allclose(out[i].numpy(), oracles.image_forward(tower, x[i], 2, p_vis), atol=1e-6)


def test_image_zero_length_prompt_is_frozen_pass():
    tower = tiny_image()
    x = torch.randn(4, 1, 5, dtype=torch.float64)
    torch.testing.assert_close(tower(x, torch.zeros(1, 0, 4, dtype=torch.float64)), tower(x), atol=0, rtol=0)


def test_image_prompt_depth_mismatch():
    tower = tiny_image(L=2)
    with pytest.raises(EncoderError, match="depth"):
        tower(torch.randn(2, 1, 5, dtype=torch.float64), torch.zeros(1, 2, 4, dtype=torch.float64))


def test_generate_low_prompts_shapes_and_mismatch():
    g = PromptGenerator(4).double()
    with torch.no_grad():
        g.fc2.weight.normal_()
    out = generate_low_prompts([torch.randn(2, 4, dtype=torch.float64) for _ in range(5)], g)
    assert out.shape == (2, 5, 4)
    with pytest.raises(EncoderError, match="mismatched"):
        generate_low_prompts([torch.zeros(2, 4), torch.zeros(3, 4)], g)


@pytest.mark.derived
def test_grad_g_matches_finite_differences():
    torch.manual_seed(0)
    g = PromptGenerator(4).double()
    with torch.no_grad():
        g.fc2.weight.normal_(std=0.5)
    traces = torch.randn(3, 2, 4, dtype=torch.float64)
    w = torch.randn(2, 3, 4, dtype=torch.float64)

    def f():
        return (torch.tanh(generate_low_prompts(traces, g)) * w).sum()

    f().backward()
    for p in g.parameters():
        assert oracles.rel_err(p.grad, oracles.central_fd(f, p)) <= 1e-4


@pytest.mark.derived
def test_grad_p_glob_matches_finite_differences():
    tower = tiny_text(L=2)
    p_glob = torch.randn(2, 2, 4, dtype=torch.float64, requires_grad=True)
    p_low = torch.randn(2, 2, 1, 4, dtype=torch.float64)
    before = tower.encode_prompted([[5, 6], [7]], p_glob.detach(), p_low)

    def f():
        return tower.encode_prompted([[5, 6], [7]], p_glob, p_low).pow(2).sum()

    f().backward()
    assert oracles.rel_err(p_glob.grad, oracles.central_fd(f, p_glob)) <= 1e-4
    with torch.no_grad():
        after = tower.encode_prompted([[5, 6], [7]], p_glob + 0.1 * torch.randn_like(p_glob), p_low)
    assert (before - after).abs().max() > 1e-8


@pytest.mark.derived
def test_grad_p_vis_matches_finite_differences():
    tower = tiny_image(L=2)
    p_vis = torch.randn(2, 2, 4, dtype=torch.float64, requires_grad=True)
    x = torch.randn(3, 1, 5, dtype=torch.float64)

    def f():
        return tower(x, p_vis).sin().sum()

    f().backward()
    assert oracles.rel_err(p_vis.grad, oracles.central_fd(f, p_vis)) <= 1e-4


def test_prompt_state_shapes():
    ps = PromptState(3, 2, 2, 4, 8)
    assert ps.p_glob.shape == (3, 2, 8) and ps.p_vis.shape == (2, 4, 8)


def test_embedding_cache_roundtrip(tmp_path, rng):
    mats = {("b1", "high"): rng.standard_normal((5, 3)).astype("<f4"),
            ("b2", "low"): rng.standard_normal((2, 3)).astype("<f4")}
    manifest = write_embedding_cache(mats, tmp_path / "cache")
    cache = load_cached_embeddings(manifest)
    for key, m in mats.items():
        got = cache.get(*key)
        assert got.tobytes() == m.tobytes()
    assert cache.row_ids("b1", "high") == list(range(5))
    with pytest.raises(KeyError, match="b3"):
        cache.get("b3", "high")


def test_embedding_cache_empty(tmp_path):
    cache = load_cached_embeddings(write_embedding_cache({}, tmp_path / "c"))
    assert cache.keys() == []


def test_embedding_cache_truncated_payload(tmp_path, rng):
    manifest = write_embedding_cache({("b", "high"): rng.standard_normal((4, 2))}, tmp_path / "c")
    payload = next(p for p in (tmp_path / "c").iterdir() if p.name != manifest.name)
    payload.write_bytes(payload.read_bytes()[:-4])
    with pytest.raises(EncoderError, match="bytes"):
        load_cached_embeddings(manifest)


def test_embedding_cache_row_id_mismatch(tmp_path, rng):
    import json
    manifest = write_embedding_cache({("b", "high"): rng.standard_normal((4, 2))}, tmp_path / "c")
    meta = json.loads(manifest.read_text())
    meta["entries"][0]["row_ids"] = [0, 1, 2]
    manifest.write_text(json.dumps(meta))
    with pytest.raises(EncoderError, match="row ids"):
        load_cached_embeddings(manifest)
