import numpy as np
import pytest

from fusionrep import encoders, fusion, model, nn
from fusionrep import tensor as T
from fusionrep.encoders import BOS_ID, PAD_ID
from fusionrep.nn import ConfigError

from conftest import tiny_model_cfg


def inputs(cfg, n=3, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(n, cfg.image.seq_len, cfg.image.input_dim))
    tokens = np.stack([encoders.tokenize("ab" * i, cfg.text) for i in range(n)])
    return images, tokens


class TestEncoders:
    def test_image_funnel_shrinks_tokens(self, model_cfg):
        params = model.init_model(model_cfg, 0)
        images, _ = inputs(model_cfg)
        h = encoders.encode_image(params, model_cfg.image, images)
        assert h.shape == (3, model_cfg.image.output_tokens(), 8)
        assert model_cfg.image.output_tokens() == 2

    def test_image_shape_is_validated(self, model_cfg):
        params = model.init_model(model_cfg, 0)
        with pytest.raises(T.ShapeError):
            encoders.encode_image(params, model_cfg.image, np.zeros((1, 5, 3)))

    def test_tokenize_pads_and_truncates(self, model_cfg):
        ids = encoders.tokenize("hello world", model_cfg.text)
        assert ids[0] == BOS_ID and len(ids) == model_cfg.text.seq_len
        assert list(ids[1:]) == list(b"hello")
        assert list(encoders.tokenize("", model_cfg.text)[1:]) == [PAD_ID] * 5

    def test_pad_tokens_do_not_influence_text_embedding(self, model_cfg):
        params = model.init_model(model_cfg, 0)
        ids = encoders.tokenize("ab", model_cfg.text)
        other = ids.copy()
        params["text.stem.tok"].data[PAD_ID] += 5.0
        a = model.text_embedding(params, model_cfg, ids[None]).data
        params["text.stem.tok"].data[PAD_ID] -= 5.0
        b = model.text_embedding(params, model_cfg, other[None]).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            encoders.image_config(d_model=10, heads=4).validate()

    def test_locked_layers_out_of_range(self):
        with pytest.raises(ConfigError):
            encoders.image_config(locked_layers=9).validate()


class TestFusion:
    def test_embeddings_are_unit_rows(self, model_cfg):
        params = model.init_model(model_cfg, 1)
        images, tokens = inputs(model_cfg)
        for e in (
            model.image_embedding(params, model_cfg, images),
            model.text_embedding(params, model_cfg, tokens),
            model.fusion_embedding(params, model_cfg, images, tokens),
        ):
            assert e.shape == (3, 8)
            np.testing.assert_allclose(np.linalg.norm(e.data, axis=1), 1.0, atol=1e-12)

    def test_needs_a_modality(self, model_cfg):
        params = model.init_model(model_cfg, 1)
        with pytest.raises(ConfigError):
            fusion.fuse(params, model_cfg.fusion, None, None)

    def test_fusion_depends_on_both_modalities(self, model_cfg):
        params = model.init_model(model_cfg, 2)
        images, tokens = inputs(model_cfg, n=2)
        base = model.fusion_embedding(params, model_cfg, images, tokens).data
        swapped_text = model.fusion_embedding(params, model_cfg, images, tokens[::-1]).data
        swapped_img = model.fusion_embedding(params, model_cfg, images[::-1], tokens).data
        assert not np.allclose(base, swapped_text)
        assert not np.allclose(base, swapped_img)

    def test_rows_are_independent(self, model_cfg):
        params = model.init_model(model_cfg, 3)
        images, tokens = inputs(model_cfg, n=3)
        full = model.fusion_embedding(params, model_cfg, images, tokens).data
        one = model.fusion_embedding(params, model_cfg, images[1:2], tokens[1:2]).data
        np.testing.assert_allclose(full[1:2], one, atol=1e-12)


class TestParams:
    def test_every_parameter_has_one_known_group(self, model_cfg):
        params = model.init_model(model_cfg, 0)
        assert set(params.groups.values()) <= set(nn.GROUPS)
        assert params.groups["loss.t"] == "loss"
        assert all(params.groups[n] == "image" for n in params.names("image."))

    def test_unshared_scalars(self):
        params = model.init_model(tiny_model_cfg(share=False), 0)
        assert "loss.t_p2p" in params and "loss.c_p2p" in params

    def test_trainable_count_falls_with_locked_depth(self):
        counts = [model.init_model(tiny_model_cfg(locked_image=n), 0).trainable_count() for n in range(3)]
        assert counts[0] > counts[1] > counts[2]

    def test_locking_all_freezes_stem(self):
        params = model.init_model(tiny_model_cfg(locked_image=2), 0)
        assert all(params.is_locked(n) for n in params.names("image."))
        assert not any(params.is_locked(n) for n in params.names("text."))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, model_cfg):
        params = model.init_model(model_cfg, 4)
        params.set_locked("image.stem.pos", True)
        state = {"lion.m.loss.t": np.array(0.25)}
        model.save_checkpoint(tmp_path / "a.pckpt", params, state, {"step": 3})
        p2, s2, meta = model.load_checkpoint(tmp_path / "a.pckpt")
        assert meta["step"] == 3
        assert list(p2) == list(params)
        for name in params:
            assert np.array_equal(p2[name].data, params[name].data)
            assert p2.groups[name] == params.groups[name]
        assert p2.is_locked("image.stem.pos")
        assert s2["lion.m.loss.t"] == 0.25

    def test_rejects_foreign_file(self, tmp_path):
        (tmp_path / "x").write_bytes(b"nope" * 10)
        with pytest.raises(model.CheckpointError):
            model.load_checkpoint(tmp_path / "x")

    def test_rejects_truncated_payload(self, tmp_path, model_cfg):
        path = tmp_path / "a.pckpt"
        model.save_checkpoint(path, model.init_model(model_cfg, 0), {}, {})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(model.CheckpointError):
            model.load_checkpoint(path)
