#include "rdk/fusion.hpp"

#include <cstdio>
#include <fstream>

namespace rdk {

const char* fusion_name(FusionKind k) {
    switch (k) {
        case FusionKind::average: return "average";
        case FusionKind::ties: return "ties";
        case FusionKind::static_coeffs: return "static";
        case FusionKind::dynamic: return "dynamic";
    }
    return "?";
}

FusionKind fusion_from_name(const std::string& name) {
    if (name == "average") return FusionKind::average;
    if (name == "ties") return FusionKind::ties;
    if (name == "static") return FusionKind::static_coeffs;
    if (name == "dynamic") return FusionKind::dynamic;
    throw ValidationError("unknown fusion strategy: " + name);
}

float fused_eval_loss(const std::vector<Session>& split, const BackboneWeights<float>& backbone,
                      const FusionSpec<float>& spec, const Vocab& vocab, size_t p_max) {
    if (split.empty()) throw ValidationError("fused_eval_loss: empty split");
    double total = 0.0;
    for (const auto& s : split) {
        const auto input = serialize_session(s, InputVariant::raw, vocab, nullptr);
        const auto target = serialize_bundles(s.bundles, 0, vocab, p_max);
        std::vector<int> tokens = input.tokens;
        tokens.insert(tokens.end(), target.tokens.begin(), target.tokens.end());
        FusedGraph<float> graph(backbone, spec, input.prompt_length);
        total += sequence_nll(tokens, input.prompt_length, backbone, graph.delta_hook(),
                              graph.begin_hook())
                     .item();
    }
    return static_cast<float>(total / static_cast<double>(split.size()));
}

namespace {

void require_frozen_experts(const ExpertSet<float>& experts, const char* who) {
    for (size_t e = 0; e < kNumExperts; ++e) {
        for (const auto& sp : experts.at(e).layers) {
            for (const auto& pair : sp) {
                if (pair.a.requires_grad() || pair.b.requires_grad()) {
                    throw ValidationError(std::string(who) + ": experts must be frozen");
                }
            }
        }
    }
}

// Shared grid-search loop for the router and the static coefficients: train a
// fresh candidate per learning rate on raw inputs over permutation-augmented
// targets, keep the candidate with the lowest validation NLL (ties -> smaller
// rate, grid order).
template <class ParamT, class MakeSpec, class MakeParams>
ParamT train_fusion_impl(const char* who, FusionKind /*kind*/,
                         const std::vector<Session>& train_split,
                         const std::vector<Session>& val_split,
                         const BackboneWeights<float>& backbone, const ExpertSet<float>& experts,
                         const Vocab& vocab, size_t p_max, const FusionTrainParams& params,
                         uint64_t seed, FusionTrainResult* result, std::ostream* log,
                         MakeSpec make_spec, MakeParams make_params) {
    backbone.check_frozen_unchanged(who);
    experts.validate();
    require_frozen_experts(experts, who);
    if (train_split.empty() || val_split.empty()) {
        throw ValidationError(std::string(who) + ": empty split");
    }
    if (params.lr_grid.empty()) throw ConfigError(std::string(who) + ": empty learning-rate grid");

    FusionTrainResult res;
    res.backbone_hash_before = backbone.content_hash();
    for (size_t e = 0; e < kNumExperts; ++e) res.expert_hash_before[e] = experts.at(e).content_hash();

    const auto examples =
        build_expert_examples(train_split, InputVariant::raw, vocab, nullptr, p_max);

    {
        ParamT init = ParamT::init(backbone.config);
        auto spec = make_spec(init);
        res.val_nll_before = fused_eval_loss(val_split, backbone, spec, vocab, p_max);
    }

    ParamT best = ParamT::init(backbone.config);
    float best_val = std::numeric_limits<float>::infinity();
    bool have_best = false;

    for (float lr : params.lr_grid) {
        ParamT cand = ParamT::init(backbone.config);
        auto cand_params = make_params(cand);
        AdamState<float> adam;
        adam.lr = lr;
        adam.init(cand_params);

        Rng order_rng(derive_seed(seed, std::string(who) + "-order"));
        std::vector<size_t> order(examples.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;

        auto spec = make_spec(cand);
        for (size_t epoch = 0; epoch < params.epochs; ++epoch) {
            order_rng.shuffle(order);
            double total = 0.0;
            for (size_t idx : order) {
                const auto& ex = examples[idx];
                FusedGraph<float> graph(backbone, spec, ex.prompt_length);
                auto loss = sequence_nll(ex.tokens, ex.prompt_length, backbone, graph.delta_hook(),
                                         graph.begin_hook());
                total += loss.item();
                backward(loss);
                adam_step(cand_params, adam);
            }
            if (log) {
                (*log) << "[" << who << "] lr " << lr << " epoch " << (epoch + 1) << "/"
                       << params.epochs << " train nll "
                       << total / static_cast<double>(examples.size()) << "\n";
            }
        }
        const float val = fused_eval_loss(val_split, backbone, spec, vocab, p_max);
        res.grid.emplace_back(lr, val);
        if (log) (*log) << "[" << who << "] lr " << lr << " validation nll " << val << "\n";
        if (!have_best || val < best_val) {
            best = std::move(cand);
            best_val = val;
            res.chosen_lr = lr;
            have_best = true;
        }
    }
    res.val_nll_after = best_val;

    res.backbone_hash_after = backbone.content_hash();
    for (size_t e = 0; e < kNumExperts; ++e) res.expert_hash_after[e] = experts.at(e).content_hash();
    if (res.backbone_hash_after != res.backbone_hash_before) {
        throw ValidationError(std::string(who) + ": frozen backbone hash changed");
    }
    for (size_t e = 0; e < kNumExperts; ++e) {
        if (res.expert_hash_after[e] != res.expert_hash_before[e]) {
            throw ValidationError(std::string(who) + ": frozen expert hash changed");
        }
    }
    if (result) *result = res;
    return best;
}

}  // namespace

RouterParams<float> train_router(const std::vector<Session>& train_split,
                                 const std::vector<Session>& val_split,
                                 const BackboneWeights<float>& backbone,
                                 const ExpertSet<float>& experts, const Vocab& vocab, size_t p_max,
                                 const FusionTrainParams& params, uint64_t seed,
                                 FusionTrainResult* result, std::ostream* log) {
    const ExpertSet<float>* experts_ptr = &experts;
    return train_fusion_impl<RouterParams<float>>(
        "train_router", FusionKind::dynamic, train_split, val_split, backbone, experts, vocab,
        p_max, params, seed, result, log,
        [experts_ptr](const RouterParams<float>& r) {
            FusionSpec<float> spec;
            spec.kind = FusionKind::dynamic;
            spec.experts = experts_ptr;
            spec.router = &r;
            return spec;
        },
        [](RouterParams<float>& r) { return r.parameters(); });
}

StaticCoeffs<float> train_static(const std::vector<Session>& train_split,
                                 const std::vector<Session>& val_split,
                                 const BackboneWeights<float>& backbone,
                                 const ExpertSet<float>& experts, const Vocab& vocab, size_t p_max,
                                 const FusionTrainParams& params, uint64_t seed,
                                 FusionTrainResult* result, std::ostream* log) {
    const ExpertSet<float>* experts_ptr = &experts;
    return train_fusion_impl<StaticCoeffs<float>>(
        "train_static", FusionKind::static_coeffs, train_split, val_split, backbone, experts, vocab,
        p_max, params, seed, result, log,
        [experts_ptr](const StaticCoeffs<float>& c) {
            FusionSpec<float> spec;
            spec.kind = FusionKind::static_coeffs;
            spec.experts = experts_ptr;
            spec.coeffs = &c;
            return spec;
        },
        [](StaticCoeffs<float>& c) { return c.parameters(); });
}

// ---------------------------------------------------------------- inference

FusedRowAdapter::FusedRowAdapter(const BackboneWeights<float>& backbone,
                                 const FusionSpec<float>& spec)
    : spec_(spec) {
    spec.validate(backbone.config);
    alphas_.resize(backbone.config.layers);
    pooled_.resize(backbone.config.layers);
    size_t max_dim = backbone.config.d_model;
    max_dim = std::max(max_dim, backbone.config.d_ff);
    if (spec.experts) scratch_r_.resize(spec.experts->base.config.rank);
    scratch_out_.resize(max_dim);
    for (auto& a : alphas_) a.fill(1.0f / static_cast<float>(kNumExperts));
}

void FusedRowAdapter::begin_layer(size_t layer, const float* h, size_t t, size_t d) {
    switch (spec_.kind) {
        case FusionKind::average:
            alphas_[layer].fill(1.0f / static_cast<float>(kNumExperts));
            return;
        case FusionKind::ties:
            return;
        case FusionKind::static_coeffs: {
            const float* g = spec_.coeffs->gamma[layer].data();
            for (size_t e = 0; e < kNumExperts; ++e) alphas_[layer][e] = g[e];
            return;
        }
        case FusionKind::dynamic: {
            if (t == 0) throw ValidationError("fused prefill: empty prompt block");
            std::vector<float>& z = pooled_[layer];
            z.assign(d, 0.0f);
            for (size_t i = 0; i < t; ++i) {
                const float* row = h + i * d;
                for (size_t j = 0; j < d; ++j) z[j] += row[j];
            }
            const float inv = 1.0f / static_cast<float>(t);
            for (auto& v : z) v *= inv;
            const float* w = spec_.router->weight[layer].data();
            const float* b = spec_.router->bias[layer].data();
            float logits[kNumExperts];
            for (size_t e = 0; e < kNumExperts; ++e) logits[e] = 0.0f;
            for (size_t j = 0; j < d; ++j) {
                const float zj = z[j];
                if (zj == 0.0f) continue;
                const float* wrow = w + j * kNumExperts;
                for (size_t e = 0; e < kNumExperts; ++e) logits[e] += zj * wrow[e];
            }
            float mx = -std::numeric_limits<float>::infinity();
            for (size_t e = 0; e < kNumExperts; ++e) {
                logits[e] += b[e];
                mx = std::max(mx, logits[e]);
            }
            float zsum = 0.0f;
            for (size_t e = 0; e < kNumExperts; ++e) {
                logits[e] = std::exp(logits[e] - mx);
                zsum += logits[e];
            }
            for (size_t e = 0; e < kNumExperts; ++e) alphas_[layer][e] = logits[e] / zsum;
            return;
        }
    }
}

void FusedRowAdapter::apply(size_t layer, Slot slot, const float* x, float* out) {
    if (spec_.kind == FusionKind::ties) {
        const auto& delta = spec_.merged->layers[layer][static_cast<size_t>(slot)];
        const size_t din = delta.shape()[0], dout = delta.shape()[1];
        const float* m = delta.data();
        for (size_t p = 0; p < din; ++p) {
            const float xv = x[p];
            if (xv == 0.0f) continue;
            const float* mrow = m + p * dout;
            for (size_t j = 0; j < dout; ++j) out[j] += xv * mrow[j];
        }
        return;
    }

    const bool averaged = spec_.kind == FusionKind::average;
    const auto [din, dout] = slot_dims(spec_.experts->base.model, slot);
    float* acc = averaged ? scratch_out_.data() : nullptr;
    if (averaged) std::fill(acc, acc + dout, 0.0f);

    for (size_t e = 0; e < kNumExperts; ++e) {
        const auto& ad = spec_.experts->at(e);
        const auto& sp = ad.layers[layer][static_cast<size_t>(slot)];
        const size_t r = ad.config.rank;
        const float mult = ad.multiplier();
        const float w = alphas_[layer][e];

        float* tmp = scratch_r_.data();
        std::fill(tmp, tmp + r, 0.0f);
        const float* amat = sp.a.data();
        for (size_t p = 0; p < din; ++p) {
            const float xv = x[p];
            if (xv == 0.0f) continue;
            const float* arow = amat + p * r;
            for (size_t c = 0; c < r; ++c) tmp[c] += xv * arow[c];
        }
        const float* bmat = sp.b.data();
        if (averaged) {
            for (size_t c = 0; c < r; ++c) {
                const float tv = tmp[c];
                if (tv == 0.0f) continue;
                const float* brow = bmat + c * dout;
                for (size_t j = 0; j < dout; ++j) acc[j] += (tv * brow[j]) * mult;
            }
        } else {
            // out += ((x A B) * mult) * w, matching the graph op nesting
            for (size_t j = 0; j < dout; ++j) scratch_out_[j] = 0.0f;
            for (size_t c = 0; c < r; ++c) {
                const float tv = tmp[c];
                if (tv == 0.0f) continue;
                const float* brow = bmat + c * dout;
                for (size_t j = 0; j < dout; ++j) scratch_out_[j] += tv * brow[j];
            }
            for (size_t j = 0; j < dout; ++j) out[j] += (scratch_out_[j] * mult) * w;
        }
    }
    if (averaged) {
        const float inv = 1.0f / static_cast<float>(kNumExperts);
        for (size_t j = 0; j < dout; ++j) out[j] += acc[j] * inv;
    }
}

RouteTrace route_trace(const Session& session, const BackboneWeights<float>& backbone,
                       const ExpertSet<float>& experts, const RouterParams<float>& router,
                       const Vocab& vocab) {
    FusionSpec<float> spec;
    spec.kind = FusionKind::dynamic;
    spec.experts = &experts;
    spec.router = &router;
    spec.validate(backbone.config);

    const auto input = serialize_session(session, InputVariant::raw, vocab, nullptr);
    FusedRowAdapter adapter(backbone, spec);
    IncrementalModel model(backbone, &adapter);
    model.prefill(input.tokens);

    RouteTrace trace;
    trace.session_id = session.session_id;
    trace.alpha = adapter.alphas();
    trace.pooled = adapter.pooled();
    for (const auto& row : trace.alpha) {
        float total = 0.0f;
        for (float a : row) {
            if (a < 0.0f) throw ValidationError("route_trace: negative expert weight");
            total += a;
        }
        if (std::abs(total - 1.0f) > 1e-6f) {
            throw ValidationError("route_trace: expert weights do not sum to 1");
        }
    }
    return trace;
}

std::string route_trace_csv(const RouteTrace& trace) {
    std::string out = "layer,alpha_base,alpha_high,alpha_fine\n";
    char buf[128];
    for (size_t l = 0; l < trace.alpha.size(); ++l) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g\n", l, trace.alpha[l][0],
                      trace.alpha[l][1], trace.alpha[l][2]);
        out += buf;
    }
    return out;
}

void write_route_trace_csv(const std::string& path, const RouteTrace& trace) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write trace file: " + path);
    out << route_trace_csv(trace);
}

}  // namespace rdk
