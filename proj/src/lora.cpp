#include "rdk/lora.hpp"

namespace rdk {

const char* expert_name(ExpertKind k) {
    switch (k) {
        case ExpertKind::base: return "base";
        case ExpertKind::high_level: return "high";
        case ExpertKind::fine_grained: return "fine";
        case ExpertKind::merged_baseline: return "merged";
    }
    return "?";
}

ExpertKind expert_from_name(const std::string& name) {
    if (name == "base") return ExpertKind::base;
    if (name == "high") return ExpertKind::high_level;
    if (name == "fine") return ExpertKind::fine_grained;
    if (name == "merged") return ExpertKind::merged_baseline;
    throw ValidationError("unknown expert kind: " + name);
}

InputVariant expert_variant(ExpertKind k) {
    switch (k) {
        case ExpertKind::base: return InputVariant::raw;
        case ExpertKind::high_level: return InputVariant::high;
        case ExpertKind::fine_grained: return InputVariant::fine;
        case ExpertKind::merged_baseline: return InputVariant::merged;
    }
    return InputVariant::raw;
}

std::vector<TrainExample> build_expert_examples(const std::vector<Session>& sessions,
                                                InputVariant variant, const Vocab& vocab,
                                                const KnowledgeStore* knowledge, size_t p_max) {
    std::vector<TrainExample> out;
    for (const auto& s : sessions) {
        const auto input = serialize_session(s, variant, vocab, knowledge);
        for (const auto& target : all_targets(s, vocab, p_max)) {
            TrainExample ex;
            ex.tokens = input.tokens;
            ex.tokens.insert(ex.tokens.end(), target.tokens.begin(), target.tokens.end());
            ex.prompt_length = input.prompt_length;
            out.push_back(std::move(ex));
        }
    }
    return out;
}

LoraAdapter<float> train_expert(ExpertKind kind, const std::vector<Session>& train_split,
                                const KnowledgeStore& knowledge,
                                const BackboneWeights<float>& backbone, const Vocab& vocab,
                                size_t p_max, const LoraConfig& lora_cfg, const TrainHyper& hyper,
                                uint64_t seed, ExpertTrainResult* result, std::ostream* log) {
    backbone.check_frozen_unchanged("train_expert");
    if (train_split.empty()) throw ValidationError("train_expert: empty training split");

    const InputVariant variant = expert_variant(kind);
    const KnowledgeStore* store = variant == InputVariant::raw ? nullptr : &knowledge;
    auto examples = build_expert_examples(train_split, variant, vocab, store, p_max);

    const uint64_t expert_seed = derive_seed(seed, std::string("expert-") + expert_name(kind));
    auto adapter = LoraAdapter<float>::init(backbone.config, lora_cfg, expert_seed);
    auto params = adapter.parameters();
    AdamState<float> adam;
    adam.lr = hyper.lr;
    adam.init(params);

    ExpertTrainResult res;
    res.backbone_hash_before = backbone.content_hash();

    auto hook = single_adapter_hook(adapter);
    Rng order_rng(derive_seed(expert_seed, "order"));
    std::vector<size_t> order(examples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        order_rng.shuffle(order);
        double total = 0.0;
        for (size_t idx : order) {
            const auto& ex = examples[idx];
            auto loss = sequence_nll(ex.tokens, ex.prompt_length, backbone, hook);
            total += loss.item();
            backward(loss);
            adam_step(params, adam);
        }
        const double mean = total / static_cast<double>(examples.size());
        if (epoch == 0) res.first_epoch_mean_nll = mean;
        res.last_epoch_mean_nll = mean;
        if (log) {
            (*log) << "[train-expert " << expert_name(kind) << "] epoch " << (epoch + 1) << "/"
                   << hyper.epochs << " mean nll " << mean << "\n";
        }
    }

    res.backbone_hash_after = backbone.content_hash();
    backbone.check_frozen_unchanged("train_expert (post)");
    if (result) *result = res;
    return adapter;
}

SingleRowAdapter::SingleRowAdapter(const LoraAdapter<float>& adapter) : adapter_(adapter) {
    tmp_r_.resize(adapter.config.rank);
    tmp_out_.resize(std::max(adapter.model.d_model, adapter.model.d_ff));
}

void SingleRowAdapter::apply(size_t layer, Slot slot, const float* x, float* out) {
    const auto& sp = adapter_.layers[layer][static_cast<size_t>(slot)];
    const auto [din, dout] = slot_dims(adapter_.model, slot);
    const size_t r = adapter_.config.rank;
    const float mult = adapter_.multiplier();

    float* tmp = tmp_r_.data();
    std::fill(tmp, tmp + r, 0.0f);
    const float* amat = sp.a.data();
    for (size_t p = 0; p < din; ++p) {
        const float xv = x[p];
        if (xv == 0.0f) continue;
        const float* arow = amat + p * r;
        for (size_t c = 0; c < r; ++c) tmp[c] += xv * arow[c];
    }
    float* delta = tmp_out_.data();
    std::fill(delta, delta + dout, 0.0f);
    const float* bmat = sp.b.data();
    for (size_t c = 0; c < r; ++c) {
        const float tv = tmp[c];
        if (tv == 0.0f) continue;
        const float* brow = bmat + c * dout;
        for (size_t j = 0; j < dout; ++j) delta[j] += tv * brow[j];
    }
    for (size_t j = 0; j < dout; ++j) out[j] += delta[j] * mult;
}

float expert_eval_loss(const LoraAdapter<float>* adapter, ExpertKind kind,
                       const std::vector<Session>& split, const KnowledgeStore* knowledge,
                       const BackboneWeights<float>& backbone, const Vocab& vocab, size_t p_max) {
    backbone.check_frozen_unchanged("expert_eval_loss");
    if (split.empty()) throw ValidationError("expert_eval_loss: empty split");
    const InputVariant variant = expert_variant(kind);
    if (variant != InputVariant::raw && knowledge == nullptr) {
        throw ValidationError("expert_eval_loss: variant requires a knowledge store");
    }
    const KnowledgeStore* store = variant == InputVariant::raw ? nullptr : knowledge;
    DeltaHook<float> hook = adapter ? single_adapter_hook(*adapter) : DeltaHook<float>();

    double total = 0.0;
    for (const auto& s : split) {
        const auto input = serialize_session(s, variant, vocab, store);
        const auto target = serialize_bundles(s.bundles, 0, vocab, p_max);
        std::vector<int> tokens = input.tokens;
        tokens.insert(tokens.end(), target.tokens.begin(), target.tokens.end());
        total += sequence_nll(tokens, input.prompt_length, backbone, hook).item();
    }
    return static_cast<float>(total / static_cast<double>(split.size()));
}

}  // namespace rdk
