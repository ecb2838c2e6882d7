#pragma once

// Expert-combination strategies over a frozen backbone and a frozen expert
// set: uniform averaging, a pre-merged TIES delta, learned static layer-wise
// coefficients, and the input-aware dynamic router. The router pools the block
// input over prompt positions only, so a session's layer weights are fixed
// across decode steps and identical between teacher-forced and generation
// passes.

#include <array>
#include <ostream>

#include "rdk/lora.hpp"

namespace rdk {

enum class FusionKind { average, ties, static_coeffs, dynamic };

const char* fusion_name(FusionKind k);
FusionKind fusion_from_name(const std::string& name);

// Per-layer router: alpha^l = softmax(W^l z^l + b^l), zero-initialized so the
// starting point is exact uniform averaging.
template <class Real>
struct RouterParams {
    ModelConfig model;
    std::vector<Tensor<Real>> weight;  // per layer [d x K]
    std::vector<Tensor<Real>> bias;    // per layer [1 x K]

    static RouterParams init(const ModelConfig& cfg) {
        RouterParams r;
        r.model = cfg;
        for (size_t l = 0; l < cfg.layers; ++l) {
            r.weight.push_back(Tensor<Real>::zeros({cfg.d_model, kNumExperts}, true));
            r.bias.push_back(Tensor<Real>::zeros({1, kNumExperts}, true));
        }
        return r;
    }

    std::vector<Tensor<Real>> parameters() {
        std::vector<Tensor<Real>> out;
        for (size_t l = 0; l < weight.size(); ++l) {
            out.push_back(weight[l]);
            out.push_back(bias[l]);
        }
        return out;
    }

    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (size_t l = 0; l < weight.size(); ++l) {
            h = fnv1a64(weight[l].data(), weight[l].size() * sizeof(Real), h);
            h = fnv1a64(bias[l].data(), bias[l].size() * sizeof(Real), h);
        }
        return h;
    }

    void set_trainable(bool on) {
        for (auto& p : parameters()) p.node()->requires_grad = on;
    }
};

// Input-agnostic learned layer-wise coefficients, initialized to 1/K.
template <class Real>
struct StaticCoeffs {
    ModelConfig model;
    std::vector<Tensor<Real>> gamma;  // per layer [1 x K], unconstrained reals

    static StaticCoeffs init(const ModelConfig& cfg) {
        StaticCoeffs s;
        s.model = cfg;
        for (size_t l = 0; l < cfg.layers; ++l) {
            s.gamma.push_back(
                Tensor<Real>::full({1, kNumExperts}, Real(1) / Real(kNumExperts), true));
        }
        return s;
    }

    std::vector<Tensor<Real>> parameters() { return gamma; }

    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& g : gamma) h = fnv1a64(g.data(), g.size() * sizeof(Real), h);
        return h;
    }

    void set_trainable(bool on) {
        for (auto& p : gamma) p.node()->requires_grad = on;
    }
};

struct TiesConfig {
    double density = 0.2;  // fraction of entries kept per expert, by magnitude
    // sign ties elect positive

    void validate() const {
        if (!(density > 0.0) || density > 1.0) {
            throw ConfigError("ties: density must be in (0, 1]");
        }
    }
};

// Dense per-layer, per-slot merged deltas (scale already composed in).
template <class Real>
struct MergedDelta {
    ModelConfig model;
    std::vector<std::array<Tensor<Real>, kNumSlots>> layers;

    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& layer : layers)
            for (const auto& t : layer) h = fnv1a64(t.data(), t.size() * sizeof(Real), h);
        return h;
    }
};

struct RouteTrace {
    int session_id = -1;
    std::vector<std::vector<float>> pooled;  // per layer, d values (z^l)
    std::vector<std::array<float, kNumExperts>> alpha;  // per layer
};

// ---------------------------------------------------------------- operations

// alpha^l from the previous layer's output rows; pooling covers prompt rows
// only.
template <class Real>
Tensor<Real> route_weights(const Tensor<Real>& h_prev, size_t prompt_length,
                           const RouterParams<Real>& router, size_t layer) {
    if (prompt_length == 0) throw ValidationError("route_weights: prompt length must be >= 1");
    if (layer >= router.weight.size()) {
        throw DimensionError("route_weights: layer " + std::to_string(layer) + " out of range");
    }
    auto z = mean_rows(h_prev, 0, std::min(prompt_length, h_prev.shape()[0]));
    return softmax_rows(add(matmul(z, router.weight[layer]), router.bias[layer]));
}

// Dense (scale/rank) * A B for every layer and slot of one adapter.
template <class Real>
MergedDelta<Real> compose_dense_deltas(const LoraAdapter<Real>& adapter) {
    MergedDelta<Real> out;
    out.model = adapter.model;
    out.layers.resize(adapter.layers.size());
    for (size_t l = 0; l < adapter.layers.size(); ++l) {
        for (size_t s = 0; s < kNumSlots; ++s) {
            const auto& sp = adapter.layers[l][s];
            out.layers[l][s] = scale(matmul(sp.a, sp.b), adapter.multiplier());
            out.layers[l][s].node()->requires_grad = false;
        }
    }
    return out;
}

// TIES: trim to the top ceil(density * n) entries per expert by magnitude,
// elect the entry sign by summed trimmed mass (ties positive), then average
// the trimmed values agreeing with the elected sign.
template <class Real>
MergedDelta<Real> ties_merge(const std::vector<MergedDelta<Real>>& experts, const TiesConfig& cfg);

// Uniform mean of dense deltas (the pre-merged form of Average).
template <class Real>
MergedDelta<Real> average_merge(const std::vector<MergedDelta<Real>>& experts);

// ---------------------------------------------------------------- forward

// Everything a fused forward needs; exactly the members demanded by the
// strategy must be present.
template <class Real>
struct FusionSpec {
    FusionKind kind = FusionKind::average;
    const ExpertSet<Real>* experts = nullptr;      // average / static / dynamic
    const RouterParams<Real>* router = nullptr;    // dynamic
    const StaticCoeffs<Real>* coeffs = nullptr;    // static
    const MergedDelta<Real>* merged = nullptr;     // ties

    void validate(const ModelConfig& cfg) const {
        switch (kind) {
            case FusionKind::average:
                if (!experts) throw ValidationError("fusion: Average requires an expert set");
                break;
            case FusionKind::ties:
                if (!merged) throw ValidationError("fusion: Ties requires a pre-merged delta");
                break;
            case FusionKind::static_coeffs:
                if (!experts || !coeffs) {
                    throw ValidationError("fusion: Static requires experts and coefficients");
                }
                break;
            case FusionKind::dynamic:
                if (!experts || !router) {
                    throw ValidationError("fusion: Dynamic requires experts and a router");
                }
                break;
        }
        if (experts) {
            experts->validate();
            if (!(experts->base.model == cfg)) {
                throw ValidationError("fusion: expert set built for a different model config");
            }
        }
    }
};

// Graph-path hooks for one fused forward. Keep the object alive for the
// duration of the pass; per-layer alphas live here.
template <class Real>
class FusedGraph {
public:
    FusedGraph(const BackboneWeights<Real>& backbone, const FusionSpec<Real>& spec,
               size_t prompt_length, RouteTrace* trace = nullptr)
        : spec_(spec), prompt_length_(prompt_length), trace_(trace) {
        spec.validate(backbone.config);
        layer_alpha_.resize(backbone.config.layers);
    }

    LayerBeginHook<Real> begin_hook() {
        if (spec_.kind != FusionKind::dynamic) return nullptr;
        return [this](size_t layer, const Tensor<Real>& h_in) {
            layer_alpha_[layer] = route_weights(h_in, prompt_length_, *spec_.router, layer);
            if (trace_) {
                auto z = mean_rows(h_in, 0, std::min(prompt_length_, h_in.shape()[0]));
                trace_->pooled.emplace_back();
                for (size_t j = 0; j < z.size(); ++j) {
                    trace_->pooled.back().push_back(static_cast<float>(z.data()[j]));
                }
                std::array<float, kNumExperts> a{};
                for (size_t e = 0; e < kNumExperts; ++e) {
                    a[e] = static_cast<float>(layer_alpha_[layer].data()[e]);
                }
                trace_->alpha.push_back(a);
            }
        };
    }

    DeltaHook<Real> delta_hook() {
        return [this](size_t layer, Slot slot, const Tensor<Real>& x) -> Tensor<Real> {
            switch (spec_.kind) {
                case FusionKind::ties:
                    return matmul(x, spec_.merged->layers[layer][static_cast<size_t>(slot)]);
                case FusionKind::average: {
                    Tensor<Real> total;
                    for (size_t e = 0; e < kNumExperts; ++e) {
                        auto d = lora_delta(x, spec_.experts->at(e), layer, slot);
                        total = total.defined() ? add(total, d) : d;
                    }
                    return scale(total, Real(1) / Real(kNumExperts));
                }
                case FusionKind::static_coeffs:
                case FusionKind::dynamic: {
                    const Tensor<Real>& w = spec_.kind == FusionKind::static_coeffs
                                                ? spec_.coeffs->gamma[layer]
                                                : layer_alpha_[layer];
                    Tensor<Real> total;
                    for (size_t e = 0; e < kNumExperts; ++e) {
                        auto d = scale_by_scalar(lora_delta(x, spec_.experts->at(e), layer, slot),
                                                 select_scalar(w, e));
                        total = total.defined() ? add(total, d) : d;
                    }
                    return total;
                }
            }
            return Tensor<Real>();
        };
    }

private:
    const FusionSpec<Real>& spec_;
    size_t prompt_length_;
    RouteTrace* trace_;
    std::vector<Tensor<Real>> layer_alpha_;
};

template <class Real>
Tensor<Real> fused_forward(const std::vector<int>& tokens, size_t prompt_length,
                           const BackboneWeights<Real>& backbone, const FusionSpec<Real>& spec,
                           RouteTrace* trace = nullptr) {
    FusedGraph<Real> graph(backbone, spec, prompt_length, trace);
    return forward_logits(tokens, backbone, graph.delta_hook(), graph.begin_hook());
}

// ---------------------------------------------------------------- merging

template <class Real>
MergedDelta<Real> ties_merge(const std::vector<MergedDelta<Real>>& experts, const TiesConfig& cfg) {
    cfg.validate();
    if (experts.empty()) throw ValidationError("ties_merge: no expert deltas given");
    const auto& first = experts.front();
    for (const auto& e : experts) {
        if (e.layers.size() != first.layers.size()) {
            throw DimensionError("ties_merge: expert delta layer counts differ");
        }
        for (size_t l = 0; l < e.layers.size(); ++l) {
            for (size_t s = 0; s < kNumSlots; ++s) {
                if (e.layers[l][s].shape() != first.layers[l][s].shape()) {
                    throw DimensionError("ties_merge: delta shape mismatch at layer " +
                                         std::to_string(l) + " slot " +
                                         slot_name(static_cast<Slot>(s)));
                }
            }
        }
    }

    MergedDelta<Real> out;
    out.model = first.model;
    out.layers.resize(first.layers.size());
    const size_t k_experts = experts.size();

    for (size_t l = 0; l < first.layers.size(); ++l) {
        for (size_t s = 0; s < kNumSlots; ++s) {
            const size_t n = first.layers[l][s].size();
            const size_t keep = std::min<size_t>(
                n, static_cast<size_t>(std::ceil(cfg.density * static_cast<double>(n))));

            // trim: per expert, zero everything but the top `keep` magnitudes
            // (ties in magnitude resolved by lower index)
            std::vector<std::vector<Real>> trimmed(k_experts);
            std::vector<size_t> idx(n);
            for (size_t e = 0; e < k_experts; ++e) {
                const Real* src = experts[e].layers[l][s].data();
                trimmed[e].assign(n, Real(0));
                for (size_t i = 0; i < n; ++i) idx[i] = i;
                std::sort(idx.begin(), idx.end(), [src](size_t a, size_t b) {
                    const Real ma = std::abs(src[a]), mb = std::abs(src[b]);
                    if (ma != mb) return ma > mb;
                    return a < b;
                });
                for (size_t i = 0; i < keep; ++i) trimmed[e][idx[i]] = src[idx[i]];
            }

            // elect sign by summed trimmed mass (ties positive), then average
            // the agreeing trimmed values
            std::vector<Real> merged(n, Real(0));
            for (size_t i = 0; i < n; ++i) {
                Real total = Real(0);
                for (size_t e = 0; e < k_experts; ++e) total += trimmed[e][i];
                const bool positive = total >= Real(0);
                Real agree_sum = Real(0);
                size_t agree_count = 0;
                for (size_t e = 0; e < k_experts; ++e) {
                    const Real v = trimmed[e][i];
                    if ((positive && v > Real(0)) || (!positive && v < Real(0))) {
                        agree_sum += v;
                        ++agree_count;
                    }
                }
                merged[i] = agree_count ? agree_sum / static_cast<Real>(agree_count) : Real(0);
            }
            out.layers[l][s] =
                Tensor<Real>::from(first.layers[l][s].shape(), std::move(merged), false);
        }
    }
    return out;
}

template <class Real>
MergedDelta<Real> average_merge(const std::vector<MergedDelta<Real>>& experts) {
    if (experts.empty()) throw ValidationError("average_merge: no expert deltas given");
    const auto& first = experts.front();
    MergedDelta<Real> out;
    out.model = first.model;
    out.layers.resize(first.layers.size());
    for (size_t l = 0; l < first.layers.size(); ++l) {
        for (size_t s = 0; s < kNumSlots; ++s) {
            const size_t n = first.layers[l][s].size();
            std::vector<Real> merged(n, Real(0));
            for (const auto& e : experts) {
                if (e.layers[l][s].shape() != first.layers[l][s].shape()) {
                    throw DimensionError("average_merge: delta shape mismatch");
                }
                const Real* src = e.layers[l][s].data();
                for (size_t i = 0; i < n; ++i) merged[i] += src[i];
            }
            const Real count = static_cast<Real>(experts.size());
            for (auto& v : merged) v /= count;
            out.layers[l][s] =
                Tensor<Real>::from(first.layers[l][s].shape(), std::move(merged), false);
        }
    }
    return out;
}

// ---------------------------------------------------------------- training

struct FusionTrainResult {
    std::vector<std::pair<float, float>> grid;  // (lr, validation nll)
    float chosen_lr = 0.0f;
    float val_nll_before = 0.0f;  // at initialization (== Average for both modes)
    float val_nll_after = 0.0f;
    uint64_t backbone_hash_before = 0, backbone_hash_after = 0;
    std::array<uint64_t, kNumExperts> expert_hash_before{}, expert_hash_after{};
};

struct FusionTrainParams {
    std::vector<float> lr_grid = {1e-4f, 1e-3f, 1e-2f};
    size_t epochs = 1;  // per grid point
};

// Trains the router (Dynamic) on raw inputs against permutation-augmented
// targets, grid-searching the learning rate by validation NLL (ties take the
// smaller rate). Backbone and experts stay frozen, enforced by hash.
RouterParams<float> train_router(const std::vector<Session>& train_split,
                                 const std::vector<Session>& val_split,
                                 const BackboneWeights<float>& backbone,
                                 const ExpertSet<float>& experts, const Vocab& vocab, size_t p_max,
                                 const FusionTrainParams& params, uint64_t seed,
                                 FusionTrainResult* result = nullptr, std::ostream* log = nullptr);

// Same loop with the static coefficients in place of the router.
StaticCoeffs<float> train_static(const std::vector<Session>& train_split,
                                 const std::vector<Session>& val_split,
                                 const BackboneWeights<float>& backbone,
                                 const ExpertSet<float>& experts, const Vocab& vocab, size_t p_max,
                                 const FusionTrainParams& params, uint64_t seed,
                                 FusionTrainResult* result = nullptr, std::ostream* log = nullptr);

// Mean masked NLL of a fused model over a split (canonical targets, raw input).
float fused_eval_loss(const std::vector<Session>& split, const BackboneWeights<float>& backbone,
                      const FusionSpec<float>& spec, const Vocab& vocab, size_t p_max);

// ---------------------------------------------------------------- inference

// Incremental-path fused adapter. Dynamic weights are fixed per session at
// prefill time from the pooled prompt context.
class FusedRowAdapter : public RowAdapter {
public:
    FusedRowAdapter(const BackboneWeights<float>& backbone, const FusionSpec<float>& spec);

    void begin_layer(size_t layer, const float* h, size_t t, size_t d) override;
    void apply(size_t layer, Slot slot, const float* x, float* out) override;

    const std::vector<std::array<float, kNumExperts>>& alphas() const { return alphas_; }
    const std::vector<std::vector<float>>& pooled() const { return pooled_; }

private:
    const FusionSpec<float>& spec_;
    std::vector<std::array<float, kNumExperts>> alphas_;  // per layer
    std::vector<std::vector<float>> pooled_;              // per layer z
    std::vector<float> scratch_r_, scratch_out_;
};

// Single prompt-only forward capturing the per-layer expert weights, plus the
// CSV emission used by the layer-trace analysis workflow.
RouteTrace route_trace(const Session& session, const BackboneWeights<float>& backbone,
                       const ExpertSet<float>& experts, const RouterParams<float>& router,
                       const Vocab& vocab);
void write_route_trace_csv(const std::string& path, const RouteTrace& trace);
std::string route_trace_csv(const RouteTrace& trace);

}  // namespace rdk
