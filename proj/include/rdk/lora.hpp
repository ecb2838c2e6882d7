#pragma once

// LoRA adapters over the frozen backbone, and the training of the knowledge
// experts. Every attention projection and both feed-forward projections of
// every layer are adapted; all adapters of an expert set share rank, scale and
// adapted-layer set so that weighted fusion and TIES stay shape-compatible.

#include <array>
#include <ostream>

#include "rdk/backbone.hpp"

namespace rdk {

struct LoraConfig {
    size_t rank = 16;
    float scale = 16.0f;  // applied as scale/rank, so the 16/16 default is a plain sum
    float init_std = 0.02f;

    bool operator==(const LoraConfig&) const = default;
};

enum class ExpertKind { base, high_level, fine_grained, merged_baseline };
constexpr size_t kNumExperts = 3;  // the fused set: base, high-level, fine-grained

const char* expert_name(ExpertKind k);
ExpertKind expert_from_name(const std::string& name);
InputVariant expert_variant(ExpertKind k);

template <class Real>
struct LoraAdapter {
    LoraConfig config;
    ModelConfig model;
    struct SlotPair {
        Tensor<Real> a;  // [d_in x r]
        Tensor<Real> b;  // [r x d_out]
    };
    std::vector<std::array<SlotPair, kNumSlots>> layers;

    // A ~ N(0, init_std^2), B = 0: a fresh adapter is an exact no-op.
    static LoraAdapter init(const ModelConfig& model, const LoraConfig& cfg, uint64_t seed) {
        model.validate();
        if (cfg.rank < 1) throw ConfigError("lora: rank must be >= 1");
        for (size_t s = 0; s < kNumSlots; ++s) {
            auto [din, dout] = slot_dims(model, static_cast<Slot>(s));
            if (cfg.rank >= std::min(din, dout)) {
                throw ConfigError("lora: rank " + std::to_string(cfg.rank) +
                                  " is not low-rank for slot " + slot_name(static_cast<Slot>(s)) +
                                  " of " + std::to_string(din) + "x" + std::to_string(dout));
            }
        }
        LoraAdapter ad;
        ad.config = cfg;
        ad.model = model;
        Rng rng(derive_seed(seed, "lora-init"));
        ad.layers.resize(model.layers);
        for (auto& layer : ad.layers) {
            for (size_t s = 0; s < kNumSlots; ++s) {
                auto [din, dout] = slot_dims(model, static_cast<Slot>(s));
                layer[s].a = Tensor<Real>::randn({din, cfg.rank}, rng,
                                                 static_cast<Real>(cfg.init_std), true);
                layer[s].b = Tensor<Real>::zeros({cfg.rank, dout}, true);
            }
        }
        return ad;
    }

    Real multiplier() const {
        return static_cast<Real>(config.scale) / static_cast<Real>(config.rank);
    }

    std::vector<Tensor<Real>> parameters() {
        std::vector<Tensor<Real>> out;
        for (auto& layer : layers) {
            for (auto& sp : layer) {
                out.push_back(sp.a);
                out.push_back(sp.b);
            }
        }
        return out;
    }

    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& layer : layers) {
            for (const auto& sp : layer) {
                h = fnv1a64(sp.a.data(), sp.a.size() * sizeof(Real), h);
                h = fnv1a64(sp.b.data(), sp.b.size() * sizeof(Real), h);
            }
        }
        return h;
    }

    void set_trainable(bool on) {
        for (auto& p : parameters()) p.node()->requires_grad = on;
    }
};

// (scale/rank) * H A B at the given layer and slot.
template <class Real>
Tensor<Real> lora_delta(const Tensor<Real>& h, const LoraAdapter<Real>& adapter, size_t layer,
                        Slot slot) {
    if (layer >= adapter.layers.size()) {
        throw DimensionError("lora_delta: layer " + std::to_string(layer) + " not adapted");
    }
    const auto& sp = adapter.layers[layer][static_cast<size_t>(slot)];
    return scale(matmul(matmul(h, sp.a), sp.b), adapter.multiplier());
}

template <class Real>
DeltaHook<Real> single_adapter_hook(const LoraAdapter<Real>& adapter) {
    return [&adapter](size_t layer, Slot slot, const Tensor<Real>& x) {
        return lora_delta(x, adapter, layer, slot);
    };
}

// The fused expert set E = {base, high-level, fine-grained}, in that order.
template <class Real>
struct ExpertSet {
    LoraAdapter<Real> base, high, fine;

    void validate() const {
        const auto check = [&](const LoraAdapter<Real>& ad, const char* who) {
            if (!(ad.config == base.config) || !(ad.model == base.model) ||
                ad.layers.size() != base.layers.size()) {
                throw ValidationError(std::string("expert set: ") + who +
                                      " adapter is not shape-compatible with the base adapter");
            }
        };
        check(high, "high-level");
        check(fine, "fine-grained");
    }

    const LoraAdapter<Real>& at(size_t e) const {
        switch (e) {
            case 0: return base;
            case 1: return high;
            case 2: return fine;
        }
        throw DimensionError("expert index out of range");
    }
    LoraAdapter<Real>& at(size_t e) {
        return const_cast<LoraAdapter<Real>&>(static_cast<const ExpertSet*>(this)->at(e));
    }
};

// ---------------------------------------------------------------- training

struct TrainHyper {
    size_t epochs = 3;
    float lr = 2e-4f;
};

struct ExpertTrainResult {
    double first_epoch_mean_nll = 0.0;
    double last_epoch_mean_nll = 0.0;
    uint64_t backbone_hash_before = 0;
    uint64_t backbone_hash_after = 0;
};

// One training example: expert-specific input plus one permuted target.
struct TrainExample {
    std::vector<int> tokens;
    size_t prompt_length = 0;
};

std::vector<TrainExample> build_expert_examples(const std::vector<Session>& sessions,
                                                InputVariant variant, const Vocab& vocab,
                                                const KnowledgeStore* knowledge, size_t p_max);

// Maximizes the target log-likelihood of the permutation-augmented stream,
// leaving the frozen backbone untouched (hash-checked).
LoraAdapter<float> train_expert(ExpertKind kind, const std::vector<Session>& train_split,
                                const KnowledgeStore& knowledge,
                                const BackboneWeights<float>& backbone, const Vocab& vocab,
                                size_t p_max, const LoraConfig& lora_cfg, const TrainHyper& hyper,
                                uint64_t seed, ExpertTrainResult* result = nullptr,
                                std::ostream* log = nullptr);

// Mean masked NLL over a held-out split, canonical (index-0) targets, no
// parameter mutation. adapter == nullptr evaluates the bare frozen backbone.
float expert_eval_loss(const LoraAdapter<float>* adapter, ExpertKind kind,
                       const std::vector<Session>& split, const KnowledgeStore* knowledge,
                       const BackboneWeights<float>& backbone, const Vocab& vocab, size_t p_max);

// Incremental-path adapter for a single expert.
class SingleRowAdapter : public RowAdapter {
public:
    explicit SingleRowAdapter(const LoraAdapter<float>& adapter);
    void apply(size_t layer, Slot slot, const float* x, float* out) override;

private:
    const LoraAdapter<float>& adapter_;
    std::vector<float> tmp_r_, tmp_out_;
};

}  // namespace rdk
