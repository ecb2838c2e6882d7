#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "rdk/backbone.hpp"

using namespace rdk;

namespace {

// Independent straight-line reimplementation of the decoder pass for miniature
// configurations, written directly against the architecture definition with
// plain loops. Shares no code with the library forward.
std::vector<double> oracle_forward(const BackboneWeights<double>& w, const std::vector<int>& tokens) {
    const size_t L = w.config.layers, d = w.config.d_model, heads = w.config.heads,
                 dff = w.config.d_ff, V = w.config.vocab_size, T = tokens.size();
    const size_t hd = d / heads;

    auto rms = [&](std::vector<double>& row, const double* gain) {
        double ss = 0;
        for (size_t j = 0; j < d; ++j) ss += row[j] * row[j];
        const double r = std::sqrt(ss / double(d) + 1e-6);
        std::vector<double> out(d);
        for (size_t j = 0; j < d; ++j) out[j] = row[j] * gain[j] / r;
        return out;
    };
    auto matvec = [](const double* m, const std::vector<double>& x, size_t din, size_t dout) {
        std::vector<double> out(dout, 0.0);
        for (size_t p = 0; p < din; ++p)
            for (size_t j = 0; j < dout; ++j) out[j] += x[p] * m[p * dout + j];
        return out;
    };
    auto gelu_s = [](double x) {
        const double u = std::sqrt(2.0 / 3.14159265358979323846) * (x + 0.044715 * x * x * x);
        return 0.5 * x * (1.0 + std::tanh(u));
    };

    std::vector<std::vector<double>> h(T);
    for (size_t i = 0; i < T; ++i) {
        h[i].assign(w.embedding.data() + size_t(tokens[i]) * d, w.embedding.data() + size_t(tokens[i] + 1) * d);
    }
    for (size_t l = 0; l < L; ++l) {
        const auto& ly = w.layers[l];
        std::vector<std::vector<double>> q(T), k(T), v(T);
        for (size_t i = 0; i < T; ++i) {
            auto n1 = rms(h[i], ly.gain_attn.data());
            q[i] = matvec(ly.proj[0].data(), n1, d, d);
            k[i] = matvec(ly.proj[1].data(), n1, d, d);
            v[i] = matvec(ly.proj[2].data(), n1, d, d);
        }
        for (size_t i = 0; i < T; ++i) {
            std::vector<double> attn(d, 0.0);
            for (size_t hh = 0; hh < heads; ++hh) {
                const size_t off = hh * hd;
                std::vector<double> sc(i + 1);
                double mx = -1e300;
                for (size_t j = 0; j <= i; ++j) {
                    double s = 0;
                    for (size_t c = 0; c < hd; ++c) s += q[i][off + c] * k[j][off + c];
                    sc[j] = s / std::sqrt(double(hd));
                    mx = std::max(mx, sc[j]);
                }
                double z = 0;
                for (size_t j = 0; j <= i; ++j) {
                    sc[j] = std::exp(sc[j] - mx);
                    z += sc[j];
                }
                for (size_t j = 0; j <= i; ++j)
                    for (size_t c = 0; c < hd; ++c) attn[off + c] += sc[j] / z * v[j][off + c];
            }
            auto o = matvec(ly.proj[3].data(), attn, d, d);
            for (size_t j = 0; j < d; ++j) h[i][j] += o[j];
        }
        for (size_t i = 0; i < T; ++i) {
            auto n2 = rms(h[i], ly.gain_ff.data());
            auto f = matvec(ly.proj[4].data(), n2, d, dff);
            for (auto& x : f) x = gelu_s(x);
            auto f2 = matvec(ly.proj[5].data(), f, dff, d);
            for (size_t j = 0; j < d; ++j) h[i][j] += f2[j];
        }
    }
    std::vector<double> logits(T * V);
    for (size_t i = 0; i < T; ++i) {
        auto hf = rms(h[i], w.final_gain.data());
        for (size_t t = 0; t < V; ++t) {
            double acc = 0;
            for (size_t j = 0; j < d; ++j) acc += hf[j] * w.embedding.data()[t * d + j];
            logits[i * V + t] = acc;
        }
    }
    return logits;
}

WorldConfig small_world_config() {
    WorldConfig c;
    c.n_items = 40;
    c.n_categories = 2;
    c.n_intents = 8;  // 4 crossed + 4 plain
    c.n_rules = 3;
    c.n_sessions = 30;
    c.seed = 3;
    return c;
}

}  // namespace

TEST_CASE("miniature forward matches the straight-line oracle") {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.d_model = 4;
    cfg.heads = 1;
    cfg.d_ff = 8;
    cfg.t_max = 16;
    cfg.vocab_size = 5;
    auto w = BackboneWeights<double>::init(cfg, 99);
    std::vector<int> tokens{1, 3, 0, 4, 2};
    auto logits = forward_logits(tokens, w);
    auto expect = oracle_forward(w, tokens);
    REQUIRE(logits.size() == expect.size());
    for (size_t i = 0; i < expect.size(); ++i) {
        CHECK(logits.values()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
    }

    // and a two-layer multihead variant
    cfg.layers = 2;
    cfg.heads = 2;
    auto w2 = BackboneWeights<double>::init(cfg, 100);
    auto l2 = forward_logits(tokens, w2);
    auto e2 = oracle_forward(w2, tokens);
    for (size_t i = 0; i < e2.size(); ++i) {
        CHECK(l2.values()[i] == doctest::Approx(e2[i]).epsilon(1e-6));
    }
}

TEST_CASE("null delta hook equals hook returning undefined tensors") {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.d_ff = 16;
    cfg.t_max = 16;
    cfg.vocab_size = 9;
    auto w = BackboneWeights<float>::init(cfg, 5);
    std::vector<int> tokens{1, 2, 3, 4};
    auto a = forward_logits(tokens, w);
    DeltaHook<float> hook = [](size_t, Slot, const Tensor<float>&) { return Tensor<float>(); };
    auto b = forward_logits(tokens, w, hook);
    CHECK(a.values() == b.values());
}

TEST_CASE("causality: changing the last token leaves earlier logits bit-identical") {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.d_model = 16;
    cfg.heads = 4;
    cfg.d_ff = 32;
    cfg.t_max = 16;
    cfg.vocab_size = 11;
    auto w = BackboneWeights<float>::init(cfg, 6);
    std::vector<int> tokens{1, 5, 7, 2, 9};
    auto a = forward_logits(tokens, w);
    tokens.back() = 3;
    auto b = forward_logits(tokens, w);
    const size_t v = cfg.vocab_size;
    for (size_t i = 0; i + 1 < tokens.size(); ++i) {
        for (size_t j = 0; j < v; ++j) {
            CHECK(a.values()[i * v + j] == b.values()[i * v + j]);
        }
    }
}

TEST_CASE("overlong input raises a context-length error") {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.d_model = 4;
    cfg.heads = 1;
    cfg.d_ff = 8;
    cfg.t_max = 4;
    cfg.vocab_size = 5;
    auto w = BackboneWeights<float>::init(cfg, 1);
    std::vector<int> tokens{0, 1, 2, 3, 4};
    CHECK_THROWS_WITH_AS(forward_logits(tokens, w), doctest::Contains("context length"),
                         ValidationError);
}

TEST_CASE("pretrain: NLL drops, weights freeze, determinism holds") {
    auto wc = small_world_config();
    auto world = generate_world(wc, wc.seed);
    auto sessions = generate_sessions(world, wc, wc.seed);
    auto vocab = Vocab::build(wc.n_categories, wc.n_intents, wc.n_rules, wc.n_items, wc.vocab_ceiling);
    auto store = KnowledgeStore::from_records(oracle_distill_all(world, sessions));
    auto corpus = build_pretrain_corpus(sessions, vocab, store, wc.p_max);
    REQUIRE(corpus.size() == sessions.size() * 2);

    ModelConfig cfg;
    cfg.layers = 2;
    cfg.d_model = 32;
    cfg.heads = 2;
    cfg.d_ff = 64;
    cfg.t_max = 128;
    cfg.vocab_size = vocab.size();

    auto run = [&](uint64_t seed) {
        auto w = BackboneWeights<float>::init(cfg, seed);
        PretrainParams pp;
        pp.epochs = 2;
        auto res = pretrain_backbone(w, corpus, pp, seed);
        return std::pair{std::move(w), res};
    };
    auto [w1, r1] = run(11);
    CHECK(w1.frozen);
    CHECK(r1.final_nll < 0.8f * r1.initial_nll);  // >= 20% reduction
    CHECK(w1.content_hash() == w1.frozen_hash);

    // frozen contract: parameters stopped tracking gradients
    for (auto& p : w1.parameters()) CHECK_FALSE(p.requires_grad());

    auto [w2, r2] = run(11);
    CHECK(w1.frozen_hash == w2.frozen_hash);  // bit-identical across runs

    auto [w3, r3] = run(12);
    CHECK(w1.frozen_hash != w3.frozen_hash);

    // empty corpus is rejected
    auto fresh = BackboneWeights<float>::init(cfg, 1);
    CHECK_THROWS_AS(pretrain_backbone(fresh, {}, PretrainParams{}, 1), ValidationError);
}

TEST_CASE("teacher-forced pass and incremental generation agree position-wise") {
    auto wc = small_world_config();
    auto world = generate_world(wc, wc.seed);
    auto sessions = generate_sessions(world, wc, wc.seed);
    auto vocab = Vocab::build(wc.n_categories, wc.n_intents, wc.n_rules, wc.n_items, wc.vocab_ceiling);

    ModelConfig cfg;
    cfg.layers = 2;
    cfg.d_model = 32;
    cfg.heads = 2;
    cfg.d_ff = 64;
    cfg.t_max = 128;
    cfg.vocab_size = vocab.size();
    auto w = BackboneWeights<float>::init(cfg, 21);

    const auto& s = sessions[0];
    auto input = serialize_session(s, InputVariant::raw, vocab, nullptr);
    auto target = serialize_bundles(s.bundles, 0, vocab, wc.p_max);
    std::vector<int> full = input.tokens;
    full.insert(full.end(), target.tokens.begin(), target.tokens.end());
    std::vector<int> tf_input(full.begin(), full.end() - 1);

    auto graph_logits = forward_logits(tf_input, w);
    const size_t v = cfg.vocab_size;

    IncrementalModel inc(w, nullptr);
    auto last = inc.prefill(input.tokens);

    // prompt rows match the teacher-forced pass
    const auto& pl = inc.prompt_logits();
    for (size_t i = 0; i < input.tokens.size(); ++i) {
        for (size_t j = 0; j < v; ++j) {
            CHECK(std::abs(pl[i * v + j] - graph_logits.values()[i * v + j]) < 1e-4f);
        }
    }
    // generation steps over the target tokens match later rows
    std::vector<float> row = last;
    for (size_t p = input.tokens.size(); p + 1 < full.size(); ++p) {
        for (size_t j = 0; j < v; ++j) {
            CHECK(std::abs(row[j] - graph_logits.values()[(p - 1) * v + j]) < 1e-4f);
        }
        row = inc.step(full[p]);
    }
}

TEST_CASE("sequence_nll masks prompt positions") {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.d_ff = 16;
    cfg.t_max = 16;
    cfg.vocab_size = 7;
    auto w = BackboneWeights<float>::init(cfg, 3);
    std::vector<int> seq{1, 4, 5, 2};
    // loss over targets only (positions >= 2) differs from loss over all
    auto l_all = sequence_nll(seq, 1, w).item();
    auto l_tail = sequence_nll(seq, 2, w).item();
    CHECK(l_all != doctest::Approx(l_tail));
    CHECK_THROWS_AS(sequence_nll({1}, 1, w), ValidationError);
}
