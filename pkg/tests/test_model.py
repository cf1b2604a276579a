"""Network blocks against hand-computed oracles, plus the loss."""

import numpy as np
import pytest

from avparse import tensor as tt
from avparse.errors import ContractError, ShapeError, VocabularyError
from avparse.model import (AVMambaNet, ChannelEnhancement, CrossModalFusion,
                           HybridAttention, MILHead, ModelConfig, ModelOutputs,
                           SemanticConditioning, TemporalSpatialAttention,
                           compute_loss, embed_label_sets, film_residual,
                           text_vector)
from avparse.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestTemporalSpatialAttention:
    def test_zero_input_zero_biases_gives_zero(self, rng):
        tsa = TemporalSpatialAttention(4, rng, d_state=4, expand=2, d_conv=4)
        for name, p in tsa.parameters().items():
            if name.split(".")[-1] in ("b", "conv_b", "b_out", "b_dt"):
                p.data[...] = 0.0
        out = tsa(Tensor(np.zeros((3, 4))))
        assert np.allclose(out.data, 0.0)

    def test_weights_strictly_in_unit_interval(self, rng):
        tsa = TemporalSpatialAttention(5, rng, d_state=4, expand=2, d_conv=4)
        x = Tensor(rng.standard_normal((6, 5)) * 2)
        w = tsa.channel_weights(x)
        refined = x * w
        s = tsa.temporal_weights(refined)
        assert np.all(w.data > 0) and np.all(w.data < 1)
        assert np.all(s.data > 0) and np.all(s.data < 1)
        # every output entry is strictly shrunk in magnitude
        out = tsa(x)
        assert np.all(np.abs(out.data) <= np.abs(x.data))

    def test_matches_manual_two_stage_application(self, rng):
        tsa = TemporalSpatialAttention(4, rng, d_state=4, expand=2, d_conv=4)
        x = Tensor(rng.standard_normal((3, 4)))
        w = tsa.channel_weights(x).data
        refined = x.data * w
        s = tsa.temporal_weights(Tensor(refined)).data
        assert np.abs(tsa(x).data - refined * s).max() < 1e-12


class TestCrossModalFusion:
    def test_output_shapes(self, rng):
        amf = CrossModalFusion(6, rng, d_state=4, expand=2, d_conv=4)
        f_a = Tensor(rng.standard_normal((5, 6)))
        f_v = Tensor(rng.standard_normal((5, 6)))
        out_a, out_v, mix = amf(f_a, f_v)
        assert out_a.shape == out_v.shape == mix.shape == (5, 6)

    def test_hard_off_sharing_ignores_shared_matrices(self, rng):
        amf = CrossModalFusion(4, rng, d_state=3, expand=2, d_conv=4, sharing_active=False)
        f_a = Tensor(rng.standard_normal((4, 4)))
        f_v = Tensor(rng.standard_normal((4, 4)))
        base = [t.data.copy() for t in amf(f_a, f_v)]
        for handle in amf.handles.values():
            handle.w_shared.data += 50.0
        after = [t.data for t in amf(f_a, f_v)]
        for b, a in zip(base, after):
            assert np.array_equal(b, a)

    def test_shared_gradient_is_sum_of_modality_gradients(self, rng):
        amf = CrossModalFusion(4, rng, d_state=3, expand=2, d_conv=4)
        f_a = Tensor(rng.standard_normal((4, 4)))
        f_v = Tensor(rng.standard_normal((4, 4)))
        shared = amf.handles["fwd"].w_shared

        def loss(which):
            out_a, out_v, _ = amf(f_a, f_v)
            if which == "a":
                return tt.tsum(out_a)
            if which == "v":
                return tt.tsum(out_v)
            return tt.tsum(out_a) + tt.tsum(out_v)

        loss("a").backward()
        g_a = shared.grad.copy()
        amf.reset_grads()
        assert np.abs(g_a).max() > 0  # single-modality loss reaches the shared matrix
        loss("v").backward()
        g_v = shared.grad.copy()
        amf.reset_grads()
        loss("both").backward()
        assert np.abs(shared.grad - (g_a + g_v)).max() < 1e-10
        amf.reset_grads()


class TestChannelEnhancement:
    def test_zero_inputs_zero_biases(self, rng):
        mfe = ChannelEnhancement(3, rng)
        zero = Tensor(np.zeros((2, 3)))
        out_a, out_v = mfe(zero, zero, zero)
        # e = sigmoid(0) = 0.5 -> factor 1.5, applied to zero features
        assert np.allclose(mfe.factors(zero, zero, zero).data, 1.5)
        assert np.allclose(out_a.data, 0.0) and np.allclose(out_v.data, 0.0)

    def test_factors_strictly_between_one_and_two(self, rng):
        # scale kept moderate: float64 sigmoid saturates exactly past |x|~37
        mfe = ChannelEnhancement(4, rng)
        f_a = Tensor(rng.standard_normal((5, 4)) * 2)
        f_v = Tensor(rng.standard_normal((5, 4)) * 2)
        mix = Tensor(rng.standard_normal((5, 4)))
        e = mfe.factors(f_a, f_v, mix).data
        assert np.all(e > 1.0) and np.all(e < 2.0)

    def test_matches_hand_formula(self, rng):
        mfe = ChannelEnhancement(3, rng)
        f_a = rng.standard_normal((2, 3))
        f_v = rng.standard_normal((2, 3))
        mix = rng.standard_normal((2, 3))
        out_a, out_v = mfe(Tensor(f_a), Tensor(f_v), Tensor(mix))
        p_w, p_b = mfe.p.w.data, mfe.p.b.data
        q_w, q_b = mfe.q.w.data, mfe.q.b.data
        e = sigmoid((f_a * f_v) @ p_w + p_b + mix @ q_w + q_b)
        assert np.abs(out_a.data - f_a * (1 + e)).max() < 1e-12
        assert np.abs(out_v.data - f_v * (1 + e)).max() < 1e-12


class TestTextEmbedding:
    def test_deterministic(self):
        a = text_vector("A photo of", "Violin", 16)
        b = text_vector("A photo of", "Violin", 16)
        assert np.array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1.0)

    def test_prefix_distinguishes_modalities(self):
        a = text_vector("this is a sound of", "Violin", 16)
        v = text_vector("A photo of", "Violin", 16)
        assert not np.allclose(a, v)

    def test_empty_set_gives_zero_vector(self):
        out = embed_label_sets([set(), {"Dog"}], "v", ["Dog", "Violin"], 8)
        assert np.array_equal(out[0], np.zeros(8))
        assert np.linalg.norm(out[1]) == pytest.approx(1.0)

    def test_two_category_segment_is_mean(self):
        out = embed_label_sets([["Dog", "Violin"]], "v", ["Dog", "Violin"], 8)
        expected = (text_vector("A photo of", "Dog", 8)
                    + text_vector("A photo of", "Violin", 8)) / 2.0
        assert np.abs(out[0] - expected).max() < 1e-15

    def test_unknown_category_rejected(self):
        with pytest.raises(VocabularyError):
            embed_label_sets([{"Spaceship"}], "a", ["Dog"], 8)


class TestSemanticConditioning:
    def test_film_residual_zero_is_identity(self, rng):
        f = Tensor(rng.standard_normal((3, 4)))
        zeros = Tensor(np.zeros((3, 4)))
        assert np.array_equal(film_residual(f, zeros, zeros).data, f.data)

    def test_film_residual_unit_scale_doubles(self, rng):
        f = Tensor(rng.standard_normal((3, 4)))
        out = film_residual(f, Tensor(np.ones((3, 4))), Tensor(np.zeros((3, 4))))
        assert np.abs(out.data - 2.0 * f.data).max() < 1e-15

    def test_matches_hand_formula(self, rng):
        plsim = SemanticConditioning(3, 5, rng)
        f_a = rng.standard_normal((2, 3))
        f_v = rng.standard_normal((2, 3))
        text_a = rng.standard_normal((2, 5))
        text_v = rng.standard_normal((2, 5))
        out_a, out_v = plsim(Tensor(f_a), Tensor(f_v), Tensor(text_a), Tensor(text_v))

        def mlp(m, x):
            hidden = np.maximum(x @ m.fc1.w.data + m.fc1.b.data, 0.0)
            return hidden @ m.fc2.w.data + m.fc2.b.data

        expected_a = f_a * mlp(plsim.a_scale, text_a) + mlp(plsim.a_bias, text_a) + f_a
        expected_v = f_v * mlp(plsim.v_scale, text_v) + mlp(plsim.v_bias, text_v) + f_v
        assert np.abs(out_a.data - expected_a).max() < 1e-12
        assert np.abs(out_v.data - expected_v).max() < 1e-12

    def test_zeroed_mlps_make_stage_identity(self, rng):
        plsim = SemanticConditioning(4, 6, rng)
        for p in plsim.parameters().values():
            p.data[...] = 0.0
        f_a = Tensor(rng.standard_normal((3, 4)))
        f_v = Tensor(rng.standard_normal((3, 4)))
        out_a, out_v = plsim(f_a, f_v, Tensor(rng.standard_normal((3, 6))),
                             Tensor(rng.standard_normal((3, 6))))
        assert np.array_equal(out_a.data, f_a.data)
        assert np.array_equal(out_v.data, f_v.data)


class TestHybridAttention:
    def test_attention_rows_sum_to_one(self, rng):
        han = HybridAttention(4, rng)
        f = Tensor(rng.standard_normal((6, 4)))
        _, weights = han.self_a(f, f)
        assert np.abs(weights.data.sum(axis=1) - 1.0).max() < 1e-12

    def test_t1_self_attention_is_value_projection(self, rng):
        han = HybridAttention(4, rng)
        f = Tensor(rng.standard_normal((1, 4)))
        out, _ = han.self_a(f, f)
        expected = f.data @ han.self_a.wv.w.data + han.self_a.wv.b.data
        assert out.shape == (1, 4)
        assert np.abs(out.data - expected).max() < 1e-12

    def test_two_segment_hand_computed(self, rng):
        han = HybridAttention(2, rng)
        attn = han.self_a
        f = np.array([[1.0, 0.5], [-0.5, 2.0]])
        out, _ = attn(Tensor(f), Tensor(f))
        q = f @ attn.wq.w.data + attn.wq.b.data
        k = f @ attn.wk.w.data + attn.wk.b.data
        v = f @ attn.wv.w.data + attn.wv.b.data
        scores = q @ k.T / np.sqrt(2.0)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        w = e / e.sum(axis=1, keepdims=True)
        assert np.abs(out.data - w @ v).max() < 1e-10

    def test_residual_structure(self, rng):
        han = HybridAttention(3, rng)
        f_a = Tensor(rng.standard_normal((4, 3)))
        f_v = Tensor(rng.standard_normal((4, 3)))
        g_a, g_v = han(f_a, f_v)
        self_a = han.self_a(f_a, f_a)[0].data
        cross_a = han.cross_a(f_a, f_v)[0].data
        assert np.abs(g_a.data - (f_a.data + self_a + cross_a)).max() < 1e-12
        assert g_v.shape == (4, 3)


class TestMILHead:
    def test_symmetric_uniform_attention_reduces_to_mean(self, rng):
        head = MILHead(4, 3, rng)
        for linear in (head.time_score, head.mod_score):
            for p in linear.parameters().values():
                p.data[...] = 0.0  # uniform softmax everywhere
        g = Tensor(rng.standard_normal((5, 4)))
        out = head(g, g)
        expected = out.seg_prob_a.data.mean(axis=0)
        assert np.abs(out.video_prob.data - expected).max() < 1e-12

    def test_video_prob_strictly_inside_unit_interval(self, rng):
        head = MILHead(4, 6, rng)
        out = head(Tensor(rng.standard_normal((5, 4)) * 3),
                   Tensor(rng.standard_normal((5, 4)) * 3))
        assert np.all(out.video_prob.data > 0.0)
        assert np.all(out.video_prob.data < 1.0)

    def test_matches_hand_computed_weighted_sum(self, rng):
        head = MILHead(3, 2, rng)
        g_a = rng.standard_normal((4, 3))
        g_v = rng.standard_normal((4, 3))
        out = head(Tensor(g_a), Tensor(g_v))

        def lin(linear, x):
            return x @ linear.w.data + linear.b.data

        def softmax0(x):
            e = np.exp(x - x.max(axis=0, keepdims=True))
            return e / e.sum(axis=0, keepdims=True)

        p_a, p_v = sigmoid(lin(head.classifier, g_a)), sigmoid(lin(head.classifier, g_v))
        wt_a, wt_v = softmax0(lin(head.time_score, g_a)), softmax0(lin(head.time_score, g_v))
        mod = softmax0(np.stack([
            lin(head.mod_score, g_a.mean(axis=0, keepdims=True))[0],
            lin(head.mod_score, g_v.mean(axis=0, keepdims=True))[0],
        ]))
        expected = mod[0] * (wt_a * p_a).sum(axis=0) + mod[1] * (wt_v * p_v).sum(axis=0)
        assert np.abs(out.video_prob.data - expected).max() < 1e-10
        # diagnostics expose the attention distributions
        assert np.abs(out.diagnostics["w_mod"].sum(axis=0) - 1.0).max() < 1e-9


class TestFullModel:
    def make_net(self, **overrides):
        cfg = ModelConfig(n_segments=4, dim=8, n_classes=3, d_state=4,
                          d_audio_in=5, d_visual_in=7, text_dim=6, **overrides)
        return AVMambaNet(cfg, seed=3), cfg

    def test_output_shapes(self, rng):
        net, cfg = self.make_net()
        out = net.forward(rng.standard_normal((4, 5)), rng.standard_normal((4, 7)))
        assert out.seg_prob_a.shape == (4, 3)
        assert out.seg_prob_v.shape == (4, 3)
        assert out.video_prob.shape == (3,)
        assert np.all(out.video_prob.data > 0) and np.all(out.video_prob.data < 1)

    def test_stage_shapes_preserved(self, rng):
        net, cfg = self.make_net()
        _, stages = net.forward(rng.standard_normal((4, 5)), rng.standard_normal((4, 7)),
                                return_stages=True)
        for name in ("tsa_out_a", "tsa_out_v", "amf_out_a", "amf_out_v", "amf_mix",
                     "mfe_out_a", "mfe_out_v", "plsim_out_a", "plsim_out_v"):
            stage = getattr(stages, name)
            assert stage is not None and stage.shape == (4, 8), name

    def test_feature_width_mismatch_rejected(self, rng):
        net, _ = self.make_net()
        with pytest.raises(ShapeError):
            net.forward(rng.standard_normal((4, 9)), rng.standard_normal((4, 7)))

    def test_videos_independent_of_batch_order(self, rng):
        net, _ = self.make_net()
        videos = [(rng.standard_normal((4, 5)), rng.standard_normal((4, 7)))
                  for _ in range(3)]
        first = [net.forward(a, v).video_prob.data.copy() for a, v in videos]
        second = [net.forward(a, v).video_prob.data.copy() for a, v in reversed(videos)]
        for got, expected in zip(reversed(second), first):
            assert np.array_equal(got, expected)

    def test_zeroed_plsim_equals_structurally_ablated_model(self, rng):
        net_full, cfg = self.make_net()
        for name, p in net_full.parameters().items():
            if name.startswith("plsim."):
                p.data[...] = 0.0
        net_ablated = AVMambaNet(
            ModelConfig(n_segments=4, dim=8, n_classes=3, d_state=4, d_audio_in=5,
                        d_visual_in=7, text_dim=6, use_plsim=False), seed=9)
        full_params = net_full.parameters()
        for name, p in net_ablated.parameters().items():
            p.data[...] = full_params[name].data
        audio = rng.standard_normal((4, 5))
        visual = rng.standard_normal((4, 7))
        text = rng.standard_normal((4, 6))
        out_full = net_full.forward(audio, visual, text, text)
        out_ablated = net_ablated.forward(audio, visual)
        assert np.array_equal(out_full.video_prob.data, out_ablated.video_prob.data)
        assert np.array_equal(out_full.seg_prob_a.data, out_ablated.seg_prob_a.data)

    def test_hanbaseline_census_when_everything_disabled(self):
        cfg = ModelConfig(n_segments=4, dim=8, n_classes=3, d_state=4, d_audio_in=5,
                          d_visual_in=7, use_tsa=False, amf_mode="off",
                          use_mfe=False, use_plsim=False)
        net = AVMambaNet(cfg, seed=0)
        prefixes = {name.split(".")[0] for name in net.parameters()}
        assert prefixes == {"proj_a", "proj_v", "han", "mmil"}

    def test_paper_scale_parameter_count_band(self):
        net = AVMambaNet(ModelConfig.paper_scale(), seed=0)
        count = net.parameter_count()
        assert 3.8e6 <= count <= 15.2e6, f"parameter count {count} outside band"


class TestLoss:
    def make_outputs(self, rng, t=4, c=3):
        return ModelOutputs(
            seg_prob_a=tt.sigmoid(Tensor(rng.standard_normal((t, c)))),
            seg_prob_v=tt.sigmoid(Tensor(rng.standard_normal((t, c)))),
            video_prob=tt.sigmoid(Tensor(rng.standard_normal(c))),
        )

    @staticmethod
    def bce_reference(p, y, eps=1e-7):
        p = np.clip(p, eps, 1 - eps)
        return -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()

    def test_saturated_predictions_near_zero_loss(self):
        t, c = 4, 3
        label = np.ones(c)
        near_one = np.full((t, c), 1.0 - 1e-12)
        outputs = ModelOutputs(Tensor(near_one), Tensor(near_one),
                               Tensor(np.full(c, 1.0 - 1e-12)))
        loss = compute_loss(outputs, label, np.ones((t, c)), np.ones((t, c)))
        assert loss.item() <= 3.1e-7

    def test_zero_lambdas_reduce_to_video_bce(self, rng):
        out = self.make_outputs(rng)
        label = np.array([1.0, 0.0, 1.0])
        pseudo = np.ones((4, 3))
        loss = compute_loss(out, label, pseudo, pseudo,
                            lambda_audio=0.0, lambda_visual=0.0)
        assert loss.item() == pytest.approx(
            self.bce_reference(out.video_prob.data, label), abs=1e-12)

    def test_matches_independent_reference(self, rng):
        out = self.make_outputs(rng)
        label = np.array([1.0, 0.0, 0.0])
        pseudo_a = (rng.random((4, 3)) < 0.4).astype(float)
        pseudo_v = (rng.random((4, 3)) < 0.4).astype(float)
        loss = compute_loss(out, label, pseudo_a, pseudo_v,
                            lambda_audio=0.7, lambda_visual=1.3)
        expected = (self.bce_reference(out.video_prob.data, label)
                    + 0.7 * self.bce_reference(out.seg_prob_a.data, pseudo_a)
                    + 1.3 * self.bce_reference(out.seg_prob_v.data, pseudo_v))
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_null_segments_masked_out(self, rng):
        out = self.make_outputs(rng)
        label = np.array([1.0, 0.0, 0.0])
        pseudo = (rng.random((4, 3)) < 0.4).astype(float)
        null = np.array([False, True, False, True])
        pseudo_masked = pseudo.copy()
        pseudo_masked[null] = 0.0
        loss = compute_loss(out, label, pseudo_masked, None, null_a=null,
                            lambda_visual=0.0)
        rows = ~null
        expected = (self.bce_reference(out.video_prob.data, label)
                    + self.bce_reference(out.seg_prob_a.data[rows], pseudo_masked[rows]))
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_all_null_pseudo_term_dropped(self, rng):
        out = self.make_outputs(rng)
        label = np.array([1.0, 0.0, 0.0])
        loss = compute_loss(out, label, np.zeros((4, 3)), None,
                            null_a=np.ones(4, dtype=bool), lambda_visual=0.0)
        assert loss.item() == pytest.approx(
            self.bce_reference(out.video_prob.data, label), abs=1e-12)

    def test_nonbinary_labels_rejected(self, rng):
        out = self.make_outputs(rng)
        with pytest.raises(ContractError):
            compute_loss(out, np.array([0.5, 0.0, 1.0]))

    def test_gradient_flows(self, rng):
        x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        out = ModelOutputs(tt.sigmoid(x), tt.sigmoid(Tensor(rng.standard_normal((4, 3)))),
                           tt.sigmoid(Tensor(rng.standard_normal(3))))
        loss = compute_loss(out, np.array([1.0, 0.0, 1.0]), np.ones((4, 3)), None)
        loss.backward()
        assert x.grad is not None and np.abs(x.grad).max() > 0
