#pragma once

// The frozen student stand-in: a small pre-norm decoder-only transformer with
// learned RMS-norm gains, no projection biases, and an output head tied to the
// token embedding. Two forward paths exist: a graph path used by training and
// verification (autodiff-capable, adapter deltas injected through hooks), and
// an incremental float path with KV caches used by generation. Both follow the
// same per-row arithmetic.

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "rdk/serialize.hpp"
#include "rdk/tensor.hpp"

namespace rdk {

struct ModelConfig {
    size_t layers = 4;
    size_t d_model = 128;
    size_t heads = 4;
    size_t d_ff = 256;
    size_t t_max = 256;
    size_t vocab_size = 0;

    void validate() const {
        if (layers == 0 || d_model == 0 || heads == 0 || d_ff == 0 || vocab_size == 0) {
            throw ConfigError("model config: all dimensions must be positive");
        }
        if (d_model % heads != 0) {
            throw ConfigError("model config: d_model " + std::to_string(d_model) +
                              " not divisible by heads " + std::to_string(heads));
        }
    }
    bool operator==(const ModelConfig&) const = default;
};

// Adapted projection slots within one transformer block.
enum class Slot : int { q = 0, k = 1, v = 2, o = 3, ff_in = 4, ff_out = 5 };
constexpr size_t kNumSlots = 6;
const char* slot_name(Slot s);

inline std::pair<size_t, size_t> slot_dims(const ModelConfig& cfg, Slot s) {
    switch (s) {
        case Slot::ff_in: return {cfg.d_model, cfg.d_ff};
        case Slot::ff_out: return {cfg.d_ff, cfg.d_model};
        default: return {cfg.d_model, cfg.d_model};
    }
}

template <class Real>
struct BackboneWeights {
    struct Layer {
        Tensor<Real> proj[kNumSlots];  // q, k, v, o, ff_in, ff_out
        Tensor<Real> gain_attn;        // pre-attention norm gain [1 x d]
        Tensor<Real> gain_ff;          // pre-feedforward norm gain [1 x d]
    };

    ModelConfig config;
    Tensor<Real> embedding;  // [V x d]; also the output head
    std::vector<Layer> layers;
    Tensor<Real> final_gain;  // [1 x d]
    bool frozen = false;
    uint64_t frozen_hash = 0;

    static BackboneWeights init(const ModelConfig& cfg, uint64_t seed) {
        cfg.validate();
        BackboneWeights w;
        w.config = cfg;
        Rng rng(derive_seed(seed, "backbone-init"));
        const Real std_init = Real(0.02);
        w.embedding = Tensor<Real>::randn({cfg.vocab_size, cfg.d_model}, rng, std_init, true);
        w.layers.resize(cfg.layers);
        for (auto& layer : w.layers) {
            for (size_t s = 0; s < kNumSlots; ++s) {
                auto [din, dout] = slot_dims(cfg, static_cast<Slot>(s));
                layer.proj[s] = Tensor<Real>::randn({din, dout}, rng, std_init, true);
            }
            layer.gain_attn = Tensor<Real>::full({1, cfg.d_model}, Real(1), true);
            layer.gain_ff = Tensor<Real>::full({1, cfg.d_model}, Real(1), true);
        }
        w.final_gain = Tensor<Real>::full({1, cfg.d_model}, Real(1), true);
        return w;
    }

    std::vector<Tensor<Real>> parameters() {
        std::vector<Tensor<Real>> out{embedding};
        for (auto& layer : layers) {
            for (size_t s = 0; s < kNumSlots; ++s) out.push_back(layer.proj[s]);
            out.push_back(layer.gain_attn);
            out.push_back(layer.gain_ff);
        }
        out.push_back(final_gain);
        return out;
    }

    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        auto eat = [&h](const Tensor<Real>& t) {
            h = fnv1a64(t.data(), t.size() * sizeof(Real), h);
        };
        eat(embedding);
        for (const auto& layer : layers) {
            for (size_t s = 0; s < kNumSlots; ++s) eat(layer.proj[s]);
            eat(layer.gain_attn);
            eat(layer.gain_ff);
        }
        eat(final_gain);
        return h;
    }

    // Freezing stops gradient tracking and pins the content hash.
    void freeze() {
        frozen = true;
        frozen_hash = content_hash();
        for (auto& p : non_const_params()) p.node()->requires_grad = false;
    }

    void check_frozen_unchanged(const std::string& who) const {
        if (!frozen) throw ValidationError(who + ": backbone must be frozen");
        if (content_hash() != frozen_hash) {
            throw ValidationError(who + ": frozen backbone hash changed");
        }
    }

private:
    std::vector<Tensor<Real>> non_const_params() { return parameters(); }
};

// Delta hook: extra output added to the frozen projection at (layer, slot),
// computed from the same input rows the projection consumes. Null = frozen
// forward.
template <class Real>
using DeltaHook = std::function<Tensor<Real>(size_t layer, Slot slot, const Tensor<Real>& x)>;

// Called with each block's input rows before any block computation; routers
// derive per-layer weights here.
template <class Real>
using LayerBeginHook = std::function<void(size_t layer, const Tensor<Real>& h_in)>;

// Causal decoder body (everything before the final norm and tied head).
template <class Real>
Tensor<Real> forward_hidden(const std::vector<int>& tokens, const BackboneWeights<Real>& w,
                            const DeltaHook<Real>& delta = nullptr,
                            const LayerBeginHook<Real>& layer_begin = nullptr) {
    if (tokens.empty()) throw ValidationError("forward: empty input");
    if (tokens.size() > w.config.t_max) {
        throw ValidationError("forward: input of " + std::to_string(tokens.size()) +
                              " tokens exceeds context length " + std::to_string(w.config.t_max));
    }
    auto h = gather_rows(w.embedding, tokens);
    for (size_t l = 0; l < w.config.layers; ++l) {
        const auto& layer = w.layers[l];
        if (layer_begin) layer_begin(l, h);
        auto project = [&](Slot s, const Tensor<Real>& x) {
            auto base = matmul(x, layer.proj[static_cast<size_t>(s)]);
            if (!delta) return base;
            auto extra = delta(l, s, x);
            return extra.defined() ? add(base, extra) : base;
        };
        auto n1 = rmsnorm_rows(h, layer.gain_attn);
        auto attn = causal_self_attention(project(Slot::q, n1), project(Slot::k, n1),
                                          project(Slot::v, n1), w.config.heads);
        h = add(h, project(Slot::o, attn));
        auto n2 = rmsnorm_rows(h, layer.gain_ff);
        auto f = gelu(project(Slot::ff_in, n2));
        h = add(h, project(Slot::ff_out, f));
    }
    return h;
}

// Final norm plus tied output head over the given hidden rows.
template <class Real>
Tensor<Real> head_logits(const Tensor<Real>& hidden, const BackboneWeights<Real>& w) {
    return matmul_transposed_b(rmsnorm_rows(hidden, w.final_gain), w.embedding);
}

// Causal decoder pass over the whole token sequence; returns [T x V] logits.
template <class Real>
Tensor<Real> forward_logits(const std::vector<int>& tokens, const BackboneWeights<Real>& w,
                            const DeltaHook<Real>& delta = nullptr,
                            const LayerBeginHook<Real>& layer_begin = nullptr) {
    return head_logits(forward_hidden(tokens, w, delta, layer_begin), w);
}

// Next-token LM loss over the whole sequence (pretraining) or over target
// positions only (expert / fusion training). Rows [0, T-2] of the logits score
// tokens [1, T-1].
template <class Real>
Tensor<Real> sequence_nll(const std::vector<int>& tokens, size_t loss_from,
                          const BackboneWeights<Real>& w, const DeltaHook<Real>& delta = nullptr,
                          const LayerBeginHook<Real>& layer_begin = nullptr) {
    if (tokens.size() < 2) throw ValidationError("sequence_nll: need at least two tokens");
    if (loss_from < 1 || loss_from >= tokens.size()) {
        throw ValidationError("sequence_nll: loss boundary outside the sequence");
    }
    std::vector<int> input(tokens.begin(), tokens.end() - 1);
    auto hidden = forward_hidden(input, w, delta, layer_begin);
    // the head only needs the rows that carry loss: row i scores token i+1
    const size_t row0 = loss_from - 1;
    auto logits = head_logits(slice_rows(hidden, row0, input.size()), w);
    std::vector<int> targets(input.size() - row0);
    std::vector<char> mask(targets.size(), 1);
    for (size_t i = 0; i < targets.size(); ++i) targets[i] = tokens[row0 + i + 1];
    return masked_next_token_nll(logits, targets, mask);
}

// ---------------------------------------------------------------- pretraining

using PretrainCorpus = std::vector<std::vector<int>>;

// One LM sequence per (train session, input variant): serialized input
// concatenated with the session's targets, permutation rotated by session id.
PretrainCorpus build_pretrain_corpus(const std::vector<Session>& train_sessions, const Vocab& vocab,
                                     const KnowledgeStore& knowledge, size_t p_max);

struct PretrainResult {
    float initial_nll = 0.0f;
    float final_nll = 0.0f;
};

struct PretrainParams {
    size_t epochs = 18;
    float lr = 1e-3f;
};

// Next-token training over all positions; freezes the weights afterwards.
PretrainResult pretrain_backbone(BackboneWeights<float>& weights, const PretrainCorpus& corpus,
                                 const PretrainParams& params, uint64_t seed,
                                 std::ostream* log = nullptr);

// ---------------------------------------------------------------- inference

// Per-row adapter interface for the incremental path. Stateful: routers fix
// their per-layer weights in begin_layer during prefill and reuse them for
// every decode step of the session.
struct RowAdapter {
    virtual ~RowAdapter() = default;
    // block input rows (t x d) at the given layer, prompt rows only
    virtual void begin_layer(size_t layer, const float* h, size_t t, size_t d) {
        (void)layer;
        (void)h;
        (void)t;
        (void)d;
    }
    // add the adapter delta for input row x at (layer, slot) into out
    virtual void apply(size_t layer, Slot slot, const float* x, float* out) = 0;
};

// KV-cached decoder session. prefill() consumes the prompt as one block
// (layer-by-layer, so pooled router contexts see the full prompt); step()
// appends one token. Logits of the last position are returned by both.
class IncrementalModel {
public:
    IncrementalModel(const BackboneWeights<float>& w, RowAdapter* adapter);

    std::vector<float> prefill(const std::vector<int>& prompt);
    std::vector<float> step(int token);

    // logits rows for every prompt position of the last prefill (tests)
    const std::vector<float>& prompt_logits() const { return prompt_logits_; }
    size_t position() const { return pos_; }

private:
    const BackboneWeights<float>& w_;
    RowAdapter* adapter_;
    size_t pos_ = 0;
    // per layer: cached k / v rows, row-major [pos x d]
    std::vector<std::vector<float>> kcache_, vcache_;
    std::vector<float> prompt_logits_;

    void project_row(size_t layer, Slot slot, const float* x, float* out) const;
    std::vector<float> logits_row(const float* h) const;
};

}  // namespace rdk
