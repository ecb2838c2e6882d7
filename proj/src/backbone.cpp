#include "rdk/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace rdk {

const char* slot_name(Slot s) {
    switch (s) {
        case Slot::q: return "q";
        case Slot::k: return "k";
        case Slot::v: return "v";
        case Slot::o: return "o";
        case Slot::ff_in: return "ff_in";
        case Slot::ff_out: return "ff_out";
    }
    return "?";
}

// The student is pretrained on raw sessions and on intent-annotated sessions
// only. Distilled-knowledge formats involving rule tokens are never seen here:
// the high-level and merged experts must learn to handle them through their
// adapters, the same position a pretrained student LLM is in when distilled
// context formats first appear at fine-tuning time.
PretrainCorpus build_pretrain_corpus(const std::vector<Session>& train_sessions, const Vocab& vocab,
                                     const KnowledgeStore& knowledge, size_t p_max) {
    PretrainCorpus corpus;
    corpus.reserve(train_sessions.size() * 2);
    for (const auto& s : train_sessions) {
        const size_t count = target_permutation_count(s.bundles.size(), p_max);
        const size_t perm = static_cast<size_t>(s.session_id) % count;
        const auto target = serialize_bundles(s.bundles, perm, vocab, p_max);
        for (auto variant : {InputVariant::raw, InputVariant::fine}) {
            const auto input = serialize_session(
                s, variant, vocab, variant == InputVariant::raw ? nullptr : &knowledge);
            std::vector<int> seq = input.tokens;
            seq.insert(seq.end(), target.tokens.begin(), target.tokens.end());
            corpus.push_back(std::move(seq));
        }
    }
    return corpus;
}

namespace {

float corpus_mean_nll(const BackboneWeights<float>& w, const PretrainCorpus& corpus) {
    double total = 0.0;
    for (const auto& seq : corpus) total += sequence_nll(seq, 1, w).item();
    return static_cast<float>(total / static_cast<double>(corpus.size()));
}

}  // namespace

PretrainResult pretrain_backbone(BackboneWeights<float>& weights, const PretrainCorpus& corpus,
                                 const PretrainParams& params, uint64_t seed, std::ostream* log) {
    if (corpus.empty()) throw ValidationError("pretrain: empty corpus");
    for (const auto& seq : corpus) {
        if (seq.size() < 2) throw ValidationError("pretrain: corpus sequence shorter than 2 tokens");
        if (seq.size() - 1 > weights.config.t_max) {
            throw ValidationError("pretrain: corpus sequence of " + std::to_string(seq.size()) +
                                  " tokens exceeds context length " +
                                  std::to_string(weights.config.t_max));
        }
    }
    if (weights.frozen) throw ValidationError("pretrain: weights already frozen");

    PretrainResult result;
    result.initial_nll = corpus_mean_nll(weights, corpus);

    auto params_vec = weights.parameters();
    AdamState<float> adam;
    adam.lr = params.lr;
    adam.init(params_vec);

    Rng order_rng(derive_seed(seed, "pretrain-order"));
    std::vector<size_t> order(corpus.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    double last_epoch_mean = 0.0;
    for (size_t epoch = 0; epoch < params.epochs; ++epoch) {
        order_rng.shuffle(order);
        double epoch_total = 0.0;
        for (size_t idx : order) {
            auto loss = sequence_nll(corpus[idx], 1, weights);
            epoch_total += loss.item();
            backward(loss);
            adam_step(params_vec, adam);
        }
        last_epoch_mean = epoch_total / static_cast<double>(corpus.size());
        if (log) {
            (*log) << "[pretrain] epoch " << (epoch + 1) << "/" << params.epochs << " mean nll "
                   << last_epoch_mean << "\n";
        }
    }
    result.final_nll = static_cast<float>(last_epoch_mean);
    weights.freeze();
    return result;
}

// ---------------------------------------------------------------- inference

namespace {

inline void rms_row(const float* x, const float* gain, float* out, size_t d) {
    float ss = 0.0f;
    for (size_t j = 0; j < d; ++j) ss += x[j] * x[j];
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(d) + 1e-6f);
    for (size_t j = 0; j < d; ++j) out[j] = x[j] * gain[j] * inv;
}

inline float gelu_scalar(float x) {
    constexpr float kC = 0.7978845608028653558798921198687637f;
    const float u = kC * (x + 0.044715f * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(u));
}

}  // namespace

IncrementalModel::IncrementalModel(const BackboneWeights<float>& w, RowAdapter* adapter)
    : w_(w), adapter_(adapter) {
    kcache_.resize(w.config.layers);
    vcache_.resize(w.config.layers);
    for (size_t l = 0; l < w.config.layers; ++l) {
        kcache_[l].reserve(w.config.t_max * w.config.d_model);
        vcache_[l].reserve(w.config.t_max * w.config.d_model);
    }
}

void IncrementalModel::project_row(size_t layer, Slot slot, const float* x, float* out) const {
    const auto [din, dout] = slot_dims(w_.config, slot);
    const float* wmat = w_.layers[layer].proj[static_cast<size_t>(slot)].data();
    std::fill(out, out + dout, 0.0f);
    for (size_t p = 0; p < din; ++p) {
        const float xv = x[p];
        if (xv == 0.0f) continue;
        const float* wrow = wmat + p * dout;
        for (size_t j = 0; j < dout; ++j) out[j] += xv * wrow[j];
    }
    if (adapter_) adapter_->apply(layer, slot, x, out);
}

std::vector<float> IncrementalModel::logits_row(const float* h) const {
    const size_t d = w_.config.d_model, v = w_.config.vocab_size;
    std::vector<float> hf(d);
    rms_row(h, w_.final_gain.data(), hf.data(), d);
    std::vector<float> logits(v);
    detail::gemm_nt(hf.data(), w_.embedding.data(), logits.data(), 1, d, v, false);
    return logits;
}

std::vector<float> IncrementalModel::prefill(const std::vector<int>& prompt) {
    if (prompt.empty()) throw ValidationError("prefill: empty prompt");
    if (prompt.size() > w_.config.t_max) {
        throw ValidationError("prefill: prompt of " + std::to_string(prompt.size()) +
                              " tokens exceeds context length " + std::to_string(w_.config.t_max));
    }
    const size_t t = prompt.size(), d = w_.config.d_model, heads = w_.config.heads;
    const size_t hd = d / heads;
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
    pos_ = 0;
    for (auto& c : kcache_) c.clear();
    for (auto& c : vcache_) c.clear();

    std::vector<float> h(t * d);
    for (size_t i = 0; i < t; ++i) {
        const int id = prompt[i];
        if (id < 0 || static_cast<size_t>(id) >= w_.config.vocab_size) {
            throw ValidationError("prefill: token id out of range");
        }
        std::copy_n(w_.embedding.data() + static_cast<size_t>(id) * d, d, h.data() + i * d);
    }

    std::vector<float> n(t * d), q(t * d), attn(t * d), scores(t), f;
    for (size_t l = 0; l < w_.config.layers; ++l) {
        if (adapter_) adapter_->begin_layer(l, h.data(), t, d);
        auto& kc = kcache_[l];
        auto& vc = vcache_[l];
        kc.assign(t * d, 0.0f);
        vc.assign(t * d, 0.0f);
        for (size_t i = 0; i < t; ++i) rms_row(h.data() + i * d, w_.layers[l].gain_attn.data(),
                                               n.data() + i * d, d);
        for (size_t i = 0; i < t; ++i) {
            project_row(l, Slot::q, n.data() + i * d, q.data() + i * d);
            project_row(l, Slot::k, n.data() + i * d, kc.data() + i * d);
            project_row(l, Slot::v, n.data() + i * d, vc.data() + i * d);
        }
        std::fill(attn.begin(), attn.end(), 0.0f);
        for (size_t hh = 0; hh < heads; ++hh) {
            const size_t off = hh * hd;
            for (size_t i = 0; i < t; ++i) {
                const float* qi = q.data() + i * d + off;
                float mx = -std::numeric_limits<float>::infinity();
                for (size_t j = 0; j <= i; ++j) {
                    const float* kj = kc.data() + j * d + off;
                    float s = 0.0f;
                    for (size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
                    s *= inv_sqrt;
                    scores[j] = s;
                    mx = std::max(mx, s);
                }
                float z = 0.0f;
                for (size_t j = 0; j <= i; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    z += scores[j];
                }
                const float inv = 1.0f / z;
                float* orow = attn.data() + i * d + off;
                for (size_t j = 0; j <= i; ++j) {
                    const float p = scores[j] * inv;
                    const float* vj = vc.data() + j * d + off;
                    for (size_t c = 0; c < hd; ++c) orow[c] += p * vj[c];
                }
            }
        }
        std::vector<float> proj(d);
        for (size_t i = 0; i < t; ++i) {
            project_row(l, Slot::o, attn.data() + i * d, proj.data());
            float* hrow = h.data() + i * d;
            for (size_t j = 0; j < d; ++j) hrow[j] += proj[j];
        }
        f.assign(w_.config.d_ff, 0.0f);
        for (size_t i = 0; i < t; ++i) {
            rms_row(h.data() + i * d, w_.layers[l].gain_ff.data(), n.data() + i * d, d);
            project_row(l, Slot::ff_in, n.data() + i * d, f.data());
            for (auto& x : f) x = gelu_scalar(x);
            project_row(l, Slot::ff_out, f.data(), proj.data());
            float* hrow = h.data() + i * d;
            for (size_t j = 0; j < d; ++j) hrow[j] += proj[j];
        }
    }
    pos_ = t;

    prompt_logits_.clear();
    prompt_logits_.reserve(t * w_.config.vocab_size);
    std::vector<float> last;
    for (size_t i = 0; i < t; ++i) {
        last = logits_row(h.data() + i * d);
        prompt_logits_.insert(prompt_logits_.end(), last.begin(), last.end());
    }
    return last;
}

std::vector<float> IncrementalModel::step(int token) {
    if (pos_ == 0) throw ValidationError("step: prefill must run first");
    if (pos_ >= w_.config.t_max) throw ValidationError("step: context length exceeded");
    if (token < 0 || static_cast<size_t>(token) >= w_.config.vocab_size) {
        throw ValidationError("step: token id out of range");
    }
    const size_t d = w_.config.d_model, heads = w_.config.heads, hd = d / heads;
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));

    std::vector<float> h(d);
    std::copy_n(w_.embedding.data() + static_cast<size_t>(token) * d, d, h.data());

    std::vector<float> n(d), q(d), attn(d), proj(d), scores(pos_ + 1), f(w_.config.d_ff);
    for (size_t l = 0; l < w_.config.layers; ++l) {
        auto& kc = kcache_[l];
        auto& vc = vcache_[l];
        rms_row(h.data(), w_.layers[l].gain_attn.data(), n.data(), d);
        project_row(l, Slot::q, n.data(), q.data());
        const size_t row = pos_;
        kc.resize((row + 1) * d);
        vc.resize((row + 1) * d);
        project_row(l, Slot::k, n.data(), kc.data() + row * d);
        project_row(l, Slot::v, n.data(), vc.data() + row * d);

        std::fill(attn.begin(), attn.end(), 0.0f);
        for (size_t hh = 0; hh < heads; ++hh) {
            const size_t off = hh * hd;
            const float* qh = q.data() + off;
            float mx = -std::numeric_limits<float>::infinity();
            for (size_t j = 0; j <= row; ++j) {
                const float* kj = kc.data() + j * d + off;
                float s = 0.0f;
                for (size_t c = 0; c < hd; ++c) s += qh[c] * kj[c];
                s *= inv_sqrt;
                scores[j] = s;
                mx = std::max(mx, s);
            }
            float z = 0.0f;
            for (size_t j = 0; j <= row; ++j) {
                scores[j] = std::exp(scores[j] - mx);
                z += scores[j];
            }
            const float inv = 1.0f / z;
            float* orow = attn.data() + off;
            for (size_t j = 0; j <= row; ++j) {
                const float p = scores[j] * inv;
                const float* vj = vc.data() + j * d + off;
                for (size_t c = 0; c < hd; ++c) orow[c] += p * vj[c];
            }
        }
        project_row(l, Slot::o, attn.data(), proj.data());
        for (size_t j = 0; j < d; ++j) h[j] += proj[j];
        rms_row(h.data(), w_.layers[l].gain_ff.data(), n.data(), d);
        project_row(l, Slot::ff_in, n.data(), f.data());
        for (auto& x : f) x = gelu_scalar(x);
        project_row(l, Slot::ff_out, f.data(), proj.data());
        for (size_t j = 0; j < d; ++j) h[j] += proj[j];
    }
    pos_ += 1;
    return logits_row(h.data());
}

}  // namespace rdk
