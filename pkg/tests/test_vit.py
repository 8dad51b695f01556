"""Encoder tests: tokenization arithmetic, positional interpolation, a fully
independent single-block forward oracle, and projection-head contracts.
"""

import numpy as np
import pytest
from scipy.special import erf

from memssl import autodiff as ad
from memssl import vit
from memssl.autodiff import Tensor, backward, grad_check
from memssl.seeding import derived_rng
from memssl.vit import ViTConfig, encode, encode_batch, init_encoder_params, patchify, project

TINY = ViTConfig(
    patch_size=8,
    embed_dim=32,
    depth=1,
    heads=2,
    global_view_px=16,
    local_view_px=8,
    proj_hidden_dim=32,
    proj_out_dim=8,
)

DESK = ViTConfig(
    patch_size=8,
    embed_dim=64,
    depth=4,
    heads=4,
    global_view_px=64,
    local_view_px=32,
    proj_hidden_dim=128,
    proj_out_dim=32,
)


def tiny_params(seed=0, config=TINY):
    return init_encoder_params(config, derived_rng(seed, "init"))


class TestPatchify:
    def test_standard_global_count(self):
        view = np.zeros((224, 224, 3), dtype=np.float32)
        assert patchify(view, 16).shape == (196, 16 * 16 * 3)

    def test_standard_local_count(self):
        view = np.zeros((96, 96, 3), dtype=np.float32)
        assert patchify(view, 16).shape == (36, 16 * 16 * 3)

    def test_small_grid(self):
        view = np.zeros((32, 32, 3), dtype=np.float32)
        assert patchify(view, 8).shape == (16, 192)

    def test_non_divisible_is_error(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((30, 30, 3), dtype=np.float32), 8)

    def test_row_major_order(self):
        # encode the patch coordinates in the pixels and read them back
        view = np.zeros((4, 4, 1), dtype=np.float32)
        for i in range(4):
            for j in range(4):
                view[i, j, 0] = 10 * i + j
        tokens = patchify(view, 2)
        # patch (0,0) holds pixels (0,0),(0,1),(1,0),(1,1) flattened row-major
        np.testing.assert_array_equal(tokens[0], [0, 1, 10, 11])
        # second patch is to the right, not below
        np.testing.assert_array_equal(tokens[1], [2, 3, 12, 13])


class TestPositionalInterpolation:
    def test_identity_when_grids_match(self):
        pos = np.random.default_rng(0).normal(size=(10, 4)).astype(np.float32)
        out = vit.interpolate_pos_embed(pos, 3, 3)
        np.testing.assert_array_equal(out, pos)

    def test_constant_grid_preserved(self):
        pos = np.full((5, 2), 3.25, dtype=np.float32)
        out = vit.interpolate_pos_embed(pos, 2, 5)
        np.testing.assert_allclose(out, 3.25, atol=1e-6)

    def test_hand_bilinear_center(self):
        # 2x2 grid {0,1,1,2} -> 3x3: center is the mean of the four corners
        pos = np.array([[9.0], [0.0], [1.0], [1.0], [2.0]], dtype=np.float32)
        out = vit.interpolate_pos_embed(pos, 2, 3)
        assert out.shape == (10, 1)
        assert out[0, 0] == 9.0  # [CLS] entry untouched
        center = out[1 + 4, 0]  # row 1, col 1 of the 3x3 grid
        assert abs(center - 1.0) < 1e-6


class TestEncode:
    def test_deterministic(self):
        params = tiny_params()
        view = np.random.default_rng(3).uniform(size=(16, 16, 3)).astype(np.float32)
        a = encode(view, params, TINY)
        b = encode(view, params, TINY)
        assert a.data.tobytes() == b.data.tobytes()

    def test_output_length_both_resolutions(self):
        params = tiny_params()
        rng = np.random.default_rng(4)
        for px in (TINY.global_view_px, TINY.local_view_px):
            view = rng.uniform(size=(px, px, 3)).astype(np.float32)
            out = encode(view, params, TINY)
            assert out.shape == (TINY.embed_dim,)

    def test_positions_are_active(self):
        # swapping two patch tiles must change the embedding
        params = tiny_params()
        rng = np.random.default_rng(5)
        view = rng.uniform(size=(16, 16, 3)).astype(np.float32)
        swapped = view.copy()
        swapped[:8, :8], swapped[:8, 8:] = view[:8, 8:].copy(), view[:8, :8].copy()
        a = encode(view, params, TINY).data
        b = encode(swapped, params, TINY).data
        assert np.abs(a - b).max() > 1e-6

    def test_matches_independent_single_block_oracle(self):
        params = tiny_params(seed=11)
        rng = np.random.default_rng(6)
        view = rng.uniform(size=(16, 16, 3)).astype(np.float32)
        got = encode(view, params, TINY).data

        expected = _oracle_forward(view, {k: v.data.astype(np.float64) for k, v in params.items()}, TINY)
        np.testing.assert_allclose(got, expected, atol=1e-5)


def _oracle_forward(view, p, cfg):
    """Independent float64 forward of the depth-1 encoder, written from the
    definitions (no engine code)."""

    def ln(x, gamma, beta):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * gamma + beta

    def gelu(x):
        return 0.5 * x * (1 + erf(x / np.sqrt(2.0)))

    ps = cfg.patch_size
    g = cfg.global_view_px // ps
    tokens = []
    for bi in range(g):
        for bj in range(g):
            tile = view[bi * ps : (bi + 1) * ps, bj * ps : (bj + 1) * ps, :]
            tokens.append(tile.reshape(-1))
    x = np.stack(tokens).astype(np.float64) @ p["encoder.patch.weight"] + p["encoder.patch.bias"]
    x = np.concatenate([p["encoder.cls"], x], axis=0)
    x = x + p["encoder.pos"]

    d, heads = cfg.embed_dim, cfg.heads
    dh = d // heads
    h = ln(x, p["encoder.blocks.0.ln1.gamma"], p["encoder.blocks.0.ln1.beta"])
    qkv = h @ p["encoder.blocks.0.attn.qkv.weight"] + p["encoder.blocks.0.attn.qkv.bias"]
    q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
    ctx = np.zeros_like(q)
    for head in range(heads):
        sl = slice(head * dh, (head + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        scores -= scores.max(axis=1, keepdims=True)
        att = np.exp(scores)
        att /= att.sum(axis=1, keepdims=True)
        ctx[:, sl] = att @ v[:, sl]
    x = x + (ctx @ p["encoder.blocks.0.attn.proj.weight"] + p["encoder.blocks.0.attn.proj.bias"])

    h = ln(x, p["encoder.blocks.0.ln2.gamma"], p["encoder.blocks.0.ln2.beta"])
    f = gelu(h @ p["encoder.blocks.0.mlp.fc1.weight"] + p["encoder.blocks.0.mlp.fc1.bias"])
    x = x + (f @ p["encoder.blocks.0.mlp.fc2.weight"] + p["encoder.blocks.0.mlp.fc2.bias"])

    x = ln(x, p["encoder.norm.gamma"], p["encoder.norm.beta"])
    return x[0]


class TestProject:
    def test_unit_norm_random_inputs(self):
        params = tiny_params()
        rng = np.random.default_rng(7)
        for _ in range(5):
            cls = Tensor(rng.normal(size=TINY.embed_dim).astype(np.float32))
            out = project(cls, params)
            assert abs(np.linalg.norm(out.data) - 1.0) < 1e-5

    def test_full_scale_head_dimensions(self):
        cfg = ViTConfig(
            patch_size=16,
            embed_dim=768,
            depth=1,
            heads=12,
            global_view_px=224,
            local_view_px=96,
            proj_hidden_dim=2048,
            proj_out_dim=256,
        )
        params = init_encoder_params(cfg, derived_rng(0, "init"))
        assert params["head.fc1.weight"].shape == (768, 2048)
        assert params["head.fc2.weight"].shape == (2048, 2048)
        assert params["head.fc3.weight"].shape == (2048, 256)
        out = project(Tensor(np.random.default_rng(1).normal(size=768).astype(np.float32)), params)
        assert out.shape == (256,)
        assert abs(np.linalg.norm(out.data) - 1.0) < 1e-5

    def test_zero_final_weight_gives_normalized_bias(self):
        params = tiny_params()
        params["head.fc3.weight"] = Tensor(np.zeros_like(params["head.fc3.weight"].data))
        bias = np.arange(1.0, TINY.proj_out_dim + 1, dtype=np.float32)
        params["head.fc3.bias"] = Tensor(bias.copy())
        out = project(Tensor(np.ones(TINY.embed_dim, dtype=np.float32)), params)
        np.testing.assert_allclose(out.data, bias / np.linalg.norm(bias), atol=1e-6)

    def test_projected_embeddings_on_sphere_both_resolutions(self):
        params = tiny_params()
        rng = np.random.default_rng(8)
        for px in (16, 8):
            views = rng.uniform(size=(3, px, px, 3)).astype(np.float32)
            out = vit.project_batch(encode_batch(views, params, TINY), params)
            np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-5)


class TestEncoderGradients:
    def test_composite_gradient_selected_params(self):
        """Scalar of project(encode(view)) vs finite differences for a few
        representative parameter tensors (the full sweep runs in acceptance)."""
        rng = np.random.default_rng(9)
        view = rng.uniform(size=(16, 16, 3)).astype(np.float64)
        params64 = {
            k: Tensor(v.data.astype(np.float64), requires_grad=True)
            for k, v in tiny_params(seed=2).items()
        }
        w = np.cos(np.arange(TINY.proj_out_dim) * 0.31 + 0.1)

        for pname in ("encoder.pos", "encoder.blocks.0.attn.qkv.weight", "head.fc3.bias"):

            def closure(t, _name=pname):
                trial = dict(params64)
                trial[_name] = t
                emb = project(encode(view, trial, TINY), trial)
                return ad.mean_all(ad.multiply(emb, Tensor(w)))

            # h=1e-6: the projection output norm is ~5e-4 at init, so a 1e-4
            # probe step is a large relative perturbation of the normalized
            # vector and central differences lose quadratic accuracy
            err = grad_check(closure, params64[pname].data, h=1e-6)
            assert err < 1e-4, f"{pname}: {err}"
