#include "rdk/pipeline.hpp"

#include <chrono>
#include <fstream>

#include <json.hpp>

namespace rdk {

using nlohmann::json;

void PipelineConfig::validate() const {
    world.validate();
    if (model.d_model == 0 || model.layers == 0) throw ConfigError("pipeline: bad model config");
    decode.validate();
    ties.validate();
    if (pool_growing_sequence) {
        throw ConfigError("pool_growing_sequence is reserved and not implemented; "
                          "routing pools over prompt positions only");
    }
}

std::string PipelineConfig::to_json() const {
    json j{{"world",
            {{"n_items", world.n_items},
             {"n_categories", world.n_categories},
             {"n_intents", world.n_intents},
             {"n_rules", world.n_rules},
             {"n_sessions", world.n_sessions},
             {"bundles_per_session_weights", world.bundles_per_session_weights},
             {"bundle_size_weights", world.bundle_size_weights},
             {"distractor_rate", world.distractor_rate},
             {"p_max", world.p_max},
             {"vocab_ceiling", world.vocab_ceiling}}},
           {"model",
            {{"layers", model.layers},
             {"d_model", model.d_model},
             {"heads", model.heads},
             {"d_ff", model.d_ff},
             {"t_max", model.t_max}}},
           {"lora", {{"rank", lora.rank}, {"scale", lora.scale}, {"init_std", lora.init_std}}},
           {"pretrain", {{"epochs", pretrain.epochs}, {"lr", pretrain.lr}}},
           {"expert", {{"epochs", expert.epochs}, {"lr", expert.lr}}},
           {"fusion", {{"lr_grid", fusion.lr_grid}, {"epochs", fusion.epochs}}},
           {"ties", {{"density", ties.density}}},
           {"decode",
            {{"temperature", decode.temperature},
             {"tts_temperature", decode.tts_temperature},
             {"n_samples", decode.n_samples},
             {"max_length", decode.max_length}}},
           {"seed", seed},
           {"pool_growing_sequence", pool_growing_sequence}};
    return j.dump(2);
}

PipelineConfig PipelineConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("invalid pipeline config JSON: ") + e.what());
    }
    PipelineConfig cfg;
    if (j.contains("world")) {
        const auto& w = j.at("world");
        cfg.world.n_items = w.value("n_items", cfg.world.n_items);
        cfg.world.n_categories = w.value("n_categories", cfg.world.n_categories);
        cfg.world.n_intents = w.value("n_intents", cfg.world.n_intents);
        cfg.world.n_rules = w.value("n_rules", cfg.world.n_rules);
        cfg.world.n_sessions = w.value("n_sessions", cfg.world.n_sessions);
        cfg.world.bundles_per_session_weights =
            w.value("bundles_per_session_weights", cfg.world.bundles_per_session_weights);
        cfg.world.bundle_size_weights =
            w.value("bundle_size_weights", cfg.world.bundle_size_weights);
        cfg.world.distractor_rate = w.value("distractor_rate", cfg.world.distractor_rate);
        cfg.world.p_max = w.value("p_max", cfg.world.p_max);
        cfg.world.vocab_ceiling = w.value("vocab_ceiling", cfg.world.vocab_ceiling);
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        cfg.model.layers = m.value("layers", cfg.model.layers);
        cfg.model.d_model = m.value("d_model", cfg.model.d_model);
        cfg.model.heads = m.value("heads", cfg.model.heads);
        cfg.model.d_ff = m.value("d_ff", cfg.model.d_ff);
        cfg.model.t_max = m.value("t_max", cfg.model.t_max);
    }
    if (j.contains("lora")) {
        const auto& l = j.at("lora");
        cfg.lora.rank = l.value("rank", cfg.lora.rank);
        cfg.lora.scale = l.value("scale", cfg.lora.scale);
        cfg.lora.init_std = l.value("init_std", cfg.lora.init_std);
    }
    if (j.contains("pretrain")) {
        cfg.pretrain.epochs = j.at("pretrain").value("epochs", cfg.pretrain.epochs);
        cfg.pretrain.lr = j.at("pretrain").value("lr", cfg.pretrain.lr);
    }
    if (j.contains("expert")) {
        cfg.expert.epochs = j.at("expert").value("epochs", cfg.expert.epochs);
        cfg.expert.lr = j.at("expert").value("lr", cfg.expert.lr);
    }
    if (j.contains("fusion")) {
        cfg.fusion.lr_grid = j.at("fusion").value("lr_grid", cfg.fusion.lr_grid);
        cfg.fusion.epochs = j.at("fusion").value("epochs", cfg.fusion.epochs);
    }
    if (j.contains("ties")) cfg.ties.density = j.at("ties").value("density", cfg.ties.density);
    if (j.contains("decode")) {
        const auto& d = j.at("decode");
        cfg.decode.temperature = d.value("temperature", cfg.decode.temperature);
        cfg.decode.tts_temperature = d.value("tts_temperature", cfg.decode.tts_temperature);
        cfg.decode.n_samples = d.value("n_samples", cfg.decode.n_samples);
        cfg.decode.max_length = d.value("max_length", cfg.decode.max_length);
    }
    cfg.seed = j.value("seed", cfg.seed);
    cfg.pool_growing_sequence = j.value("pool_growing_sequence", cfg.pool_growing_sequence);
    cfg.validate();
    return cfg;
}

PipelineConfig PipelineConfig::from_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config file: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json(text);
}

uint64_t pipeline_seed(const PipelineConfig& cfg, const std::string& role) {
    return derive_seed(cfg.seed, role);
}

PreparedWorld prepare_world(const PipelineConfig& cfg) {
    cfg.validate();
    PreparedWorld pw;
    pw.world = generate_world(cfg.world, cfg.seed);
    pw.sessions = generate_sessions(pw.world, cfg.world, cfg.seed);
    pw.split = split_chronological(pw.sessions);
    pw.vocab = Vocab::build(cfg.world.n_categories, cfg.world.n_intents, cfg.world.n_rules,
                            cfg.world.n_items, cfg.world.vocab_ceiling);
    pw.knowledge_records = oracle_distill_all(pw.world, pw.sessions);
    pw.store = KnowledgeStore::from_records(pw.knowledge_records);
    return pw;
}

std::vector<PredictionRecord> generate_predictions(const std::vector<Session>& split,
                                                   const ModelBundle& model, const Vocab& vocab,
                                                   const DecodeConfig& config, std::ostream* log) {
    model.validate();
    config.validate();
    std::vector<PredictionRecord> out;
    out.reserve(split.size());
    size_t done = 0;
    for (const auto& s : split) {
        TtsReport rep;
        PredictionRecord rec;
        rec.session_id = s.session_id;
        rec.bundles = tts_generate(s, model, vocab, config, &rep);
        rec.n_candidates = rep.n_candidates;
        rec.vote_count = rep.vote_count;
        rec.truncated = rep.any_truncated;
        out.push_back(std::move(rec));
        ++done;
        if (log && done % 100 == 0) {
            (*log) << "  generated " << done << "/" << split.size() << " sessions\n";
        }
    }
    return out;
}

PipelineResult run_full_pipeline(const PipelineConfig& cfg, std::ostream* log) {
    const auto t0 = std::chrono::steady_clock::now();
    PipelineResult result;

    auto pw = prepare_world(cfg);
    if (log) {
        (*log) << "world: " << pw.sessions.size() << " sessions, vocab " << pw.vocab.size()
               << ", split " << pw.split.train.size() << "/" << pw.split.val.size() << "/"
               << pw.split.test.size() << "\n";
    }

    ModelConfig mc = cfg.model;
    mc.vocab_size = pw.vocab.size();
    mc.validate();

    auto backbone = BackboneWeights<float>::init(mc, pipeline_seed(cfg, "backbone"));
    auto corpus = build_pretrain_corpus(pw.split.train, pw.vocab, pw.store, cfg.world.p_max);
    result.pretrain =
        pretrain_backbone(backbone, corpus, cfg.pretrain, pipeline_seed(cfg, "pretrain"), log);
    if (log) {
        (*log) << "pretrain: nll " << result.pretrain.initial_nll << " -> "
               << result.pretrain.final_nll << " over " << corpus.size() << " sequences\n";
    }

    ExpertSet<float> experts;
    LoraAdapter<float> merged_baseline;
    for (auto kind : {ExpertKind::base, ExpertKind::high_level, ExpertKind::fine_grained,
                      ExpertKind::merged_baseline}) {
        ExpertTrainResult tr;
        auto adapter = train_expert(kind, pw.split.train, pw.store, backbone, pw.vocab,
                                    cfg.world.p_max, cfg.lora, cfg.expert,
                                    pipeline_seed(cfg, "experts"), &tr, log);
        result.expert_train[expert_name(kind)] = tr;
        switch (kind) {
            case ExpertKind::base: experts.base = std::move(adapter); break;
            case ExpertKind::high_level: experts.high = std::move(adapter); break;
            case ExpertKind::fine_grained: experts.fine = std::move(adapter); break;
            case ExpertKind::merged_baseline: merged_baseline = std::move(adapter); break;
        }
    }
    for (size_t e = 0; e < kNumExperts; ++e) experts.at(e).set_trainable(false);
    merged_baseline.set_trainable(false);

    std::vector<MergedDelta<float>> deltas;
    for (size_t e = 0; e < kNumExperts; ++e) deltas.push_back(compose_dense_deltas(experts.at(e)));
    auto ties = ties_merge(deltas, cfg.ties);

    auto router = train_router(pw.split.train, pw.split.val, backbone, experts, pw.vocab,
                               cfg.world.p_max, cfg.fusion, pipeline_seed(cfg, "router"),
                               &result.router_train, log);
    auto coeffs = train_static(pw.split.train, pw.split.val, backbone, experts, pw.vocab,
                               cfg.world.p_max, cfg.fusion, pipeline_seed(cfg, "static"),
                               &result.static_train, log);

    FusionSpec<float> spec_avg, spec_ties, spec_static, spec_dyn;
    spec_avg.kind = FusionKind::average;
    spec_avg.experts = &experts;
    spec_ties.kind = FusionKind::ties;
    spec_ties.merged = &ties;
    spec_static.kind = FusionKind::static_coeffs;
    spec_static.experts = &experts;
    spec_static.coeffs = &coeffs;
    spec_dyn.kind = FusionKind::dynamic;
    spec_dyn.experts = &experts;
    spec_dyn.router = &router;

    struct Arm {
        std::string name;
        ModelBundle model;
        size_t n_samples;
    };
    std::vector<Arm> arms;
    auto expert_arm = [&](const std::string& name, const LoraAdapter<float>& ad, ExpertKind kind) {
        ModelBundle m;
        m.backbone = &backbone;
        m.single = &ad;
        m.variant = expert_variant(kind);
        m.knowledge = m.variant == InputVariant::raw ? nullptr : &pw.store;
        arms.push_back({name, m, 1});
    };
    expert_arm("expert_base", experts.base, ExpertKind::base);
    expert_arm("expert_high", experts.high, ExpertKind::high_level);
    expert_arm("expert_fine", experts.fine, ExpertKind::fine_grained);
    expert_arm("expert_merged", merged_baseline, ExpertKind::merged_baseline);
    auto fused_arm = [&](const std::string& name, const FusionSpec<float>& spec, size_t n) {
        ModelBundle m;
        m.backbone = &backbone;
        m.fusion = &spec;
        arms.push_back({name, m, n});
    };
    fused_arm("fuse_average", spec_avg, 1);
    fused_arm("fuse_ties", spec_ties, 1);
    fused_arm("fuse_static", spec_static, 1);
    fused_arm("fuse_dynamic", spec_dyn, 1);
    fused_arm("fuse_dynamic_tts", spec_dyn, cfg.decode.n_samples);

    for (const auto& arm : arms) {
        DecodeConfig dc = cfg.decode;
        dc.n_samples = arm.n_samples;
        dc.seed = pipeline_seed(cfg, "decode-" + arm.name);
        auto preds = generate_predictions(pw.split.test, arm.model, pw.vocab, dc, log);
        result.arms[arm.name] = evaluate_predictions(preds, pw.split.test);
        if (log) {
            const auto& r = result.arms[arm.name];
            (*log) << arm.name << ": P " << r.precision << "  R " << r.recall << "  Cov "
                   << (r.coverage ? *r.coverage : 0.0) << "\n";
        }
    }

    for (const auto& s : pw.split.test) {
        result.test_traces.push_back(route_trace(s, backbone, experts, router, pw.vocab));
    }
    result.sample_trace = route_trace(pw.split.test.front(), backbone, experts, router, pw.vocab);
    result.sample_trace_repeat =
        route_trace(pw.split.test.front(), backbone, experts, router, pw.vocab);
    result.split_fp = split_fingerprint(pw.split.test);
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log) (*log) << "pipeline wall time: " << result.wall_seconds << " s\n";
    return result;
}

}  // namespace rdk
