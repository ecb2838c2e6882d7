// rdk: command-line surface for the bundle-generation pipeline. Subcommands
// cover the full flow: worldgen -> distill -> pretrain -> train-expert (x4) ->
// merge / train-fusion -> generate -> eval / compare / trace. Every run writes
// a manifest sufficient to reproduce its artifacts bit for bit.
//
// Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "rdk/pipeline.hpp"

namespace fs = std::filesystem;
using namespace rdk;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CommonOpts {
    std::string config_path;
    uint64_t seed_flag = 0;
    bool seed_set = false;
};

PipelineConfig resolve_config(const CommonOpts& opts) {
    PipelineConfig cfg;
    if (!opts.config_path.empty()) cfg = PipelineConfig::from_json_file(opts.config_path);
    if (const char* env = std::getenv("RDK_SEED")) {
        cfg.seed = std::strtoull(env, nullptr, 10);
    }
    if (opts.seed_set) cfg.seed = opts.seed_flag;
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "JSON config file");
    cmd->add_option("--seed", opts.seed_flag, "global seed (overrides config and RDK_SEED)")
        ->each([&opts](const std::string&) { opts.seed_set = true; });
}

std::vector<std::string> split_list(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

RunManifest make_manifest(const std::string& subcommand, const PipelineConfig& cfg, int argc,
                          char** argv) {
    RunManifest m;
    m.subcommand = subcommand;
    for (int i = 0; i < argc; ++i) m.argv.emplace_back(argv[i]);
    m.config_json = cfg.to_json();
    m.seed = cfg.seed;
    return m;
}

void finish_manifest(RunManifest& m, const std::string& out_dir) {
    fs::create_directories(out_dir);
    write_manifest(out_dir + "/" + m.subcommand + ".manifest.json", m);
}

struct DataDir {
    World world;
    std::vector<Session> sessions;
    SplitSessions split;
    Vocab vocab;
    std::string world_path, sessions_path, vocab_path;
};

DataDir load_data(const std::string& dir) {
    DataDir d;
    d.world_path = dir + "/world.json";
    d.sessions_path = dir + "/sessions.jsonl";
    d.vocab_path = dir + "/vocab.json";
    d.world = read_world_json(d.world_path);
    d.sessions = read_sessions_jsonl(d.sessions_path);
    d.split = split_chronological(d.sessions);
    d.vocab = Vocab::read_file(d.vocab_path);
    return d;
}

KnowledgeStore load_store(const std::string& path, RunManifest& manifest) {
    auto loaded = load_knowledge_jsonl(path);
    if (loaded.empty_warning) {
        std::cerr << "warning: knowledge file " << path << " is empty\n";
    }
    manifest.input_hashes[path] = file_content_hash(path);
    return KnowledgeStore::from_records(loaded.records);
}

const std::vector<Session>& pick_split(const DataDir& d, const std::string& name) {
    if (name == "train") return d.split.train;
    if (name == "val") return d.split.val;
    if (name == "test") return d.split.test;
    throw UsageError("unknown split: " + name);
}

// ------------------------------------------------------------- subcommands

int cmd_worldgen(const CommonOpts& common, const std::string& out_dir, int argc, char** argv) {
    auto cfg = resolve_config(common);
    auto manifest = make_manifest("worldgen", cfg, argc, argv);
    fs::create_directories(out_dir);

    auto world = generate_world(cfg.world, cfg.seed);
    auto sessions = generate_sessions(world, cfg.world, cfg.seed);
    auto vocab = Vocab::build(cfg.world.n_categories, cfg.world.n_intents, cfg.world.n_rules,
                              cfg.world.n_items, cfg.world.vocab_ceiling);

    const auto world_path = out_dir + "/world.json";
    const auto sessions_path = out_dir + "/sessions.jsonl";
    const auto vocab_path = out_dir + "/vocab.json";
    const auto config_path = out_dir + "/config.json";
    write_world_json(world_path, world);
    write_sessions_jsonl(sessions_path, sessions);
    vocab.write_file(vocab_path);
    {
        std::ofstream out(config_path, std::ios::binary);
        out << cfg.to_json() << "\n";
    }
    manifest.derived_seeds["world"] = hash_hex(derive_seed(cfg.seed, "world"));
    manifest.derived_seeds["sessions"] = hash_hex(derive_seed(cfg.seed, "sessions"));
    for (const auto& p : {world_path, sessions_path, vocab_path, config_path}) {
        manifest.artifact_hashes[p] = file_content_hash(p);
    }
    finish_manifest(manifest, out_dir);
    auto split = split_chronological(sessions);
    std::cout << "world: " << sessions.size() << " sessions (" << split.train.size() << "/"
              << split.val.size() << "/" << split.test.size() << " split), vocab " << vocab.size()
              << " tokens -> " << out_dir << "\n";
    return 0;
}

int cmd_distill(const CommonOpts& common, const std::string& teacher, const std::string& data_dir,
                const std::string& in_path, const std::string& out_path,
                const std::string& templates_dir, int argc, char** argv) {
    auto cfg = resolve_config(common);
    auto manifest = make_manifest("distill", cfg, argc, argv);

    std::vector<KnowledgeRecord> records;
    if (teacher == "oracle") {
        auto d = load_data(data_dir);
        manifest.input_hashes[d.world_path] = file_content_hash(d.world_path);
        manifest.input_hashes[d.sessions_path] = file_content_hash(d.sessions_path);
        records = oracle_distill_all(d.world, d.sessions);
    } else if (teacher == "file") {
        if (in_path.empty()) throw UsageError("--teacher file requires --in knowledge.jsonl");
        auto loaded = load_knowledge_jsonl(in_path);
        if (loaded.empty_warning) std::cerr << "warning: " << in_path << " is empty\n";
        manifest.input_hashes[in_path] = file_content_hash(in_path);
        records = std::move(loaded.records);
    } else {
        throw UsageError("--teacher must be 'oracle' or 'file'");
    }
    write_knowledge_jsonl(out_path, records);
    manifest.artifact_hashes[out_path] = file_content_hash(out_path);

    if (!templates_dir.empty()) {
        emit_prompt_templates(templates_dir);
        for (const auto& name :
             {"high_level_reflection_prompt.txt", "fine_grained_cot_prompt.txt"}) {
            const auto p = templates_dir + "/" + name;
            manifest.artifact_hashes[p] = file_content_hash(p);
        }
    }
    finish_manifest(manifest, fs::path(out_path).parent_path().string().empty()
                                  ? "."
                                  : fs::path(out_path).parent_path().string());
    std::cout << "distilled " << records.size() << " knowledge records -> " << out_path << "\n";
    return 0;
}

int cmd_pretrain(const CommonOpts& common, const std::string& data_dir,
                 const std::string& knowledge_path, const std::string& out_path, int argc,
                 char** argv) {
    auto cfg = resolve_config(common);
    auto manifest = make_manifest("pretrain", cfg, argc, argv);
    auto d = load_data(data_dir);
    auto store = load_store(knowledge_path, manifest);
    manifest.input_hashes[d.sessions_path] = file_content_hash(d.sessions_path);

    ModelConfig mc = cfg.model;
    mc.vocab_size = d.vocab.size();
    mc.validate();
    auto backbone = BackboneWeights<float>::init(mc, derive_seed(cfg.seed, "backbone"));
    auto corpus = build_pretrain_corpus(d.split.train, d.vocab, store, cfg.world.p_max);
    auto result =
        pretrain_backbone(backbone, corpus, cfg.pretrain, derive_seed(cfg.seed, "pretrain"),
                          &std::cerr);
    save_backbone(out_path, backbone);
    manifest.derived_seeds["backbone"] = hash_hex(derive_seed(cfg.seed, "backbone"));
    manifest.derived_seeds["pretrain"] = hash_hex(derive_seed(cfg.seed, "pretrain"));
    manifest.artifact_hashes[out_path] = file_content_hash(out_path);
    finish_manifest(manifest, fs::path(out_path).parent_path().string().empty()
                                  ? "."
                                  : fs::path(out_path).parent_path().string());
    std::cout << "pretrained on " << corpus.size() << " sequences, nll " << result.initial_nll
              << " -> " << result.final_nll << ", frozen hash " << hash_hex(backbone.frozen_hash)
              << " -> " << out_path << "\n";
    return 0;
}

int cmd_train_expert(const CommonOpts& common, const std::string& expert,
                     const std::string& backbone_path, const std::string& data_dir,
                     const std::string& knowledge_path, bool knowledge_given,
                     const std::string& out_path, int argc, char** argv) {
    const ExpertKind kind = expert_from_name(expert);
    if (kind == ExpertKind::base && knowledge_given) {
        throw UsageError("the base expert takes raw input only; --knowledge is not allowed");
    }
    auto cfg = resolve_config(common);
    auto manifest = make_manifest("train-expert", cfg, argc, argv);
    auto d = load_data(data_dir);
    auto backbone = load_backbone(backbone_path);
    manifest.input_hashes[backbone_path] = file_content_hash(backbone_path);

    KnowledgeStore store;
    if (kind != ExpertKind::base) store = load_store(knowledge_path, manifest);

    ExpertTrainResult result;
    auto adapter = train_expert(kind, d.split.train, store, backbone, d.vocab, cfg.world.p_max,
                                cfg.lora, cfg.expert, derive_seed(cfg.seed, "experts"), &result,
                                &std::cerr);
    save_adapter(out_path, adapter, kind);
    manifest.derived_seeds["experts"] = hash_hex(derive_seed(cfg.seed, "experts"));
    manifest.artifact_hashes[out_path] = file_content_hash(out_path);
    finish_manifest(manifest, fs::path(out_path).parent_path().string().empty()
                                  ? "."
                                  : fs::path(out_path).parent_path().string());
    std::cout << "expert " << expert << ": train nll " << result.first_epoch_mean_nll << " -> "
              << result.last_epoch_mean_nll << "; backbone hash "
              << hash_hex(result.backbone_hash_before) << " == "
              << hash_hex(result.backbone_hash_after) << " -> " << out_path << "\n";
    return 0;
}

int cmd_merge(const CommonOpts& common, const std::string& strategy,
              const std::string& experts_csv, double density, bool density_given,
              const std::string& out_path, int argc, char** argv) {
    if (strategy != "ties" && strategy != "average") {
        throw UsageError("--strategy must be 'ties' or 'average'");
    }
    if (strategy == "average" && density_given) {
        throw UsageError("--density applies to the ties strategy only");
    }
    auto cfg = resolve_config(common);
    auto manifest = make_manifest("merge", cfg, argc, argv);

    auto paths = split_list(experts_csv);
    if (strategy == "ties" && paths.size() != kNumExperts) {
        throw ValidationError("ties merge requires exactly " + std::to_string(kNumExperts) +
                              " expert checkpoints, got " + std::to_string(paths.size()));
    }
    if (paths.empty()) throw UsageError("--experts requires at least one checkpoint");

    std::vector<MergedDelta<float>> deltas;
    for (const auto& p : paths) {
        auto [adapter, kind] = load_adapter(p);
        (void)kind;
        manifest.input_hashes[p] = file_content_hash(p);
        deltas.push_back(compose_dense_deltas(adapter));
    }
    TiesConfig tc = cfg.ties;
    if (density_given) tc.density = density;
    MergedDelta<float> merged =
        strategy == "ties" ? ties_merge(deltas, tc) : average_merge(deltas);
    save_merged(out_path, merged, strategy, strategy == "ties" ? tc.density : 1.0);
    manifest.artifact_hashes[out_path] = file_content_hash(out_path);
    finish_manifest(manifest, fs::path(out_path).parent_path().string().empty()
                                  ? "."
                                  : fs::path(out_path).parent_path().string());
    std::cout << "merged " << paths.size() << " experts with " << strategy << " -> " << out_path
              << "\n";
    return 0;
}

ExpertSet<float> load_expert_set(const std::vector<std::string>& paths, RunManifest& manifest) {
    if (paths.size() != kNumExperts) {
        throw ValidationError("expected " + std::to_string(kNumExperts) +
                              " expert checkpoints (base,high,fine), got " +
                              std::to_string(paths.size()));
    }
    ExpertSet<float> set;
    bool seen[kNumExperts] = {};
    for (const auto& p : paths) {
        auto [adapter, kind] = load_adapter(p);
        manifest.input_hashes[p] = file_content_hash(p);
        switch (kind) {
            case ExpertKind::base: set.base = std::move(adapter); seen[0] = true; break;
            case ExpertKind::high_level: set.high = std::move(adapter); seen[1] = true; break;
            case ExpertKind::fine_grained: set.fine = std::move(adapter); seen[2] = true; break;
            default:
                throw ValidationError(p + ": the merged baseline does not participate in fusion");
        }
    }
    if (!seen[0] || !seen[1] || !seen[2]) {
        throw ValidationError("expert set needs one each of base, high, fine adapters");
    }
    for (size_t e = 0; e < kNumExperts; ++e) set.at(e).set_trainable(false);
    set.validate();
    return set;
}

int cmd_train_fusion(const CommonOpts& common, const std::string& mode,
                     const std::string& backbone_path, const std::string& experts_csv,
                     const std::string& data_dir, const std::string& lr_grid_csv,
                     const std::string& out_path, int argc, char** argv) {
    if (mode != "dynamic" && mode != "static") {
        throw UsageError("--mode must be 'dynamic' or 'static'");
    }
    auto cfg = resolve_config(common);
    auto manifest = make_manifest("train-fusion", cfg, argc, argv);
    auto d = load_data(data_dir);
    auto backbone = load_backbone(backbone_path);
    manifest.input_hashes[backbone_path] = file_content_hash(backbone_path);
    auto experts = load_expert_set(split_list(experts_csv), manifest);

    FusionTrainParams params = cfg.fusion;
    if (!lr_grid_csv.empty()) {
        params.lr_grid.clear();
        for (const auto& s : split_list(lr_grid_csv)) params.lr_grid.push_back(std::stof(s));
    }

    FusionTrainResult result;
    const auto role = mode == "dynamic" ? "router" : "static";
    if (mode == "dynamic") {
        auto router = train_router(d.split.train, d.split.val, backbone, experts, d.vocab,
                                   cfg.world.p_max, params, derive_seed(cfg.seed, role), &result,
                                   &std::cerr);
        save_router(out_path, router);
    } else {
        auto coeffs = train_static(d.split.train, d.split.val, backbone, experts, d.vocab,
                                   cfg.world.p_max, params, derive_seed(cfg.seed, role), &result,
                                   &std::cerr);
        save_static(out_path, coeffs);
    }

    // frozen-parameter audit, printed and enforced
    std::cout << "frozen-parameter audit:\n"
              << "  theta  " << hash_hex(result.backbone_hash_before) << " -> "
              << hash_hex(result.backbone_hash_after) << "\n";
    const char* names[kNumExperts] = {"base", "high", "fine"};
    for (size_t e = 0; e < kNumExperts; ++e) {
        std::cout << "  phi_" << names[e] << " " << hash_hex(result.expert_hash_before[e])
                  << " -> " << hash_hex(result.expert_hash_after[e]) << "\n";
    }
    std::cout << "grid:";
    for (auto [lr, nll] : result.grid) std::cout << " lr " << lr << " val-nll " << nll << ";";
    std::cout << " chosen lr " << result.chosen_lr << "\n";

    manifest.derived_seeds[role] = hash_hex(derive_seed(cfg.seed, role));
    manifest.artifact_hashes[out_path] = file_content_hash(out_path);
    finish_manifest(manifest, fs::path(out_path).parent_path().string().empty()
                                  ? "."
                                  : fs::path(out_path).parent_path().string());
    std::cout << "fusion (" << mode << ") -> " << out_path << "\n";
    return 0;
}

int cmd_generate(const CommonOpts& common, const std::string& fusion_name_opt,
                 const std::string& expert_name_opt, const std::string& backbone_path,
                 const std::string& experts_csv, const std::string& router_path,
                 const std::string& static_path, const std::string& merged_path,
                 const std::string& knowledge_path, const std::string& data_dir,
                 const std::string& split_name, long tts_n, double temperature,
                 bool temperature_given, const std::string& out_path, int argc, char** argv) {
    if (fusion_name_opt.empty() == expert_name_opt.empty()) {
        throw UsageError("choose exactly one of --fusion or --expert");
    }
    auto cfg = resolve_config(common);
    auto manifest = make_manifest("generate", cfg, argc, argv);
    auto d = load_data(data_dir);
    auto backbone = load_backbone(backbone_path);
    manifest.input_hashes[backbone_path] = file_content_hash(backbone_path);

    DecodeConfig dc = cfg.decode;
    if (tts_n > 0) dc.n_samples = static_cast<size_t>(tts_n);
    if (temperature_given) dc.tts_temperature = static_cast<float>(temperature);
    dc.seed = derive_seed(cfg.seed, "decode-" + (fusion_name_opt.empty() ? "expert_" + expert_name_opt
                                                                         : "fuse_" + fusion_name_opt));
    dc.validate();

    KnowledgeStore store;
    ExpertSet<float> experts;
    LoraAdapter<float> single;
    RouterParams<float> router;
    StaticCoeffs<float> coeffs;
    MergedDelta<float> merged;
    FusionSpec<float> spec;
    ModelBundle model;
    model.backbone = &backbone;

    if (!expert_name_opt.empty()) {
        const auto kind = expert_from_name(expert_name_opt);
        auto [adapter, stored_kind] = load_adapter(split_list(experts_csv).at(0));
        if (stored_kind != kind) {
            throw ValidationError("adapter checkpoint holds the '" +
                                  std::string(expert_name(stored_kind)) + "' expert, not '" +
                                  expert_name_opt + "'");
        }
        manifest.input_hashes[split_list(experts_csv).at(0)] =
            file_content_hash(split_list(experts_csv).at(0));
        single = std::move(adapter);
        model.single = &single;
        model.variant = expert_variant(kind);
        if (model.variant != InputVariant::raw) {
            store = load_store(knowledge_path, manifest);
            model.knowledge = &store;
        }
    } else {
        const auto kind = fusion_from_name(fusion_name_opt);
        spec.kind = kind;
        if (kind == FusionKind::ties) {
            if (merged_path.empty()) throw UsageError("--fusion ties requires --merged");
            merged = load_merged(merged_path);
            manifest.input_hashes[merged_path] = file_content_hash(merged_path);
            spec.merged = &merged;
        } else {
            experts = load_expert_set(split_list(experts_csv), manifest);
            spec.experts = &experts;
            if (kind == FusionKind::dynamic) {
                if (router_path.empty()) throw UsageError("--fusion dynamic requires --router");
                router = load_router(router_path);
                manifest.input_hashes[router_path] = file_content_hash(router_path);
                spec.router = &router;
            } else if (kind == FusionKind::static_coeffs) {
                if (static_path.empty()) throw UsageError("--fusion static requires --static");
                coeffs = load_static(static_path);
                manifest.input_hashes[static_path] = file_content_hash(static_path);
                spec.coeffs = &coeffs;
            }
        }
        model.fusion = &spec;
    }

    const auto& split = pick_split(d, split_name);
    auto preds = generate_predictions(split, model, d.vocab, dc, &std::cerr);
    write_predictions_jsonl(out_path, preds);
    manifest.artifact_hashes[out_path] = file_content_hash(out_path);
    finish_manifest(manifest, fs::path(out_path).parent_path().string().empty()
                                  ? "."
                                  : fs::path(out_path).parent_path().string());
    std::cout << "generated " << preds.size() << " predictions (" << split_name << ", N "
              << dc.n_samples << ") -> " << out_path << "\n";
    return 0;
}

int cmd_eval(const CommonOpts& common, const std::string& predictions_path,
             const std::string& data_dir, const std::string& split_name,
             const std::string& out_path, int argc, char** argv) {
    auto cfg = resolve_config(common);
    auto manifest = make_manifest("eval", cfg, argc, argv);
    auto d = load_data(data_dir);
    auto preds = read_predictions_jsonl(predictions_path);
    manifest.input_hashes[predictions_path] = file_content_hash(predictions_path);
    auto report = evaluate_predictions(preds, pick_split(d, split_name));
    write_report_json(out_path, report);
    manifest.artifact_hashes[out_path] = file_content_hash(out_path);
    finish_manifest(manifest, fs::path(out_path).parent_path().string().empty()
                                  ? "."
                                  : fs::path(out_path).parent_path().string());
    std::cout << report_table(report);
    return 0;
}

int cmd_compare(const std::string& runs_csv, const std::string& baseline,
                const std::string& out_path) {
    std::vector<NamedReport> runs;
    for (const auto& pair : split_list(runs_csv)) {
        const auto eq = pair.find('=');
        if (eq == std::string::npos) {
            throw UsageError("--runs expects name=report.json[,name=report.json...]");
        }
        NamedReport nr;
        nr.name = pair.substr(0, eq);
        nr.report = read_report_json(pair.substr(eq + 1));
        runs.push_back(std::move(nr));
    }
    auto cmp = compare_strategies(std::move(runs), baseline);
    if (!out_path.empty()) {
        std::ofstream out(out_path, std::ios::binary);
        if (!out) throw IoError("cannot write comparison: " + out_path);
        out << cmp.json << "\n";
    }
    std::cout << cmp.table;
    return 0;
}

int cmd_trace(const CommonOpts& common, int session_id, const std::string& backbone_path,
              const std::string& experts_csv, const std::string& router_path,
              const std::string& data_dir, const std::string& out_path, int argc, char** argv) {
    auto cfg = resolve_config(common);
    auto manifest = make_manifest("trace", cfg, argc, argv);
    auto d = load_data(data_dir);
    auto backbone = load_backbone(backbone_path);
    manifest.input_hashes[backbone_path] = file_content_hash(backbone_path);
    auto experts = load_expert_set(split_list(experts_csv), manifest);
    auto router = load_router(router_path);
    manifest.input_hashes[router_path] = file_content_hash(router_path);

    const Session* found = nullptr;
    for (const auto& s : d.sessions) {
        if (s.session_id == session_id) found = &s;
    }
    if (!found) throw ValidationError("session " + std::to_string(session_id) + " not found");

    auto trace = route_trace(*found, backbone, experts, router, d.vocab);
    write_route_trace_csv(out_path, trace);
    manifest.artifact_hashes[out_path] = file_content_hash(out_path);
    finish_manifest(manifest, fs::path(out_path).parent_path().string().empty()
                                  ? "."
                                  : fs::path(out_path).parent_path().string());
    std::cout << route_trace_csv(trace);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"RouteDK-style bundle generation: knowledge-specific LoRA experts over a frozen "
                 "backbone with routed fusion and test-time scaling"};
    app.require_subcommand(1);

    CommonOpts common;

    // worldgen
    auto* worldgen = app.add_subcommand("worldgen", "generate the synthetic world and sessions");
    std::string wg_out = "data";
    add_common(worldgen, common);
    worldgen->add_option("--out", wg_out, "output directory");

    // distill
    auto* distill = app.add_subcommand("distill", "produce or ingest distilled knowledge");
    std::string di_teacher = "oracle", di_data = "data", di_in, di_out = "data/knowledge.jsonl",
                di_templates;
    add_common(distill, common);
    distill->add_option("--teacher", di_teacher, "oracle | file");
    distill->add_option("--data", di_data, "data directory (oracle teacher)");
    distill->add_option("--in", di_in, "external knowledge.jsonl (file teacher)");
    distill->add_option("--out", di_out, "output knowledge.jsonl");
    distill->add_option("--emit-templates", di_templates, "also write teacher prompt templates");

    // pretrain
    auto* pretrain = app.add_subcommand("pretrain", "train and freeze the backbone");
    std::string pt_data = "data", pt_knowledge, pt_out = "ckpt/backbone.rdk";
    add_common(pretrain, common);
    pretrain->add_option("--data", pt_data, "data directory");
    pretrain->add_option("--knowledge", pt_knowledge, "knowledge.jsonl");
    pretrain->add_option("--out", pt_out, "backbone checkpoint");

    // train-expert
    auto* texp = app.add_subcommand("train-expert", "train one LoRA expert");
    std::string te_expert, te_backbone = "ckpt/backbone.rdk", te_data = "data", te_knowledge,
                te_out;
    add_common(texp, common);
    texp->add_option("--expert", te_expert, "base | high | fine | merged")->required();
    texp->add_option("--backbone", te_backbone, "backbone checkpoint");
    texp->add_option("--data", te_data, "data directory");
    auto* te_kopt = texp->add_option("--knowledge", te_knowledge, "knowledge.jsonl");
    texp->add_option("--out", te_out, "adapter checkpoint");

    // merge
    auto* merge = app.add_subcommand("merge", "merge expert deltas (ties or average)");
    std::string mg_strategy = "ties", mg_experts, mg_out = "ckpt/merged.rdk";
    double mg_density = 0.2;
    add_common(merge, common);
    merge->add_option("--strategy", mg_strategy, "ties | average");
    merge->add_option("--experts", mg_experts, "comma-separated adapter checkpoints")->required();
    auto* mg_dopt = merge->add_option("--density", mg_density, "ties trim density in (0,1]");
    merge->add_option("--out", mg_out, "merged checkpoint");

    // train-fusion
    auto* tfus = app.add_subcommand("train-fusion", "train the router or static coefficients");
    std::string tf_mode = "dynamic", tf_backbone = "ckpt/backbone.rdk", tf_experts,
                tf_data = "data", tf_grid, tf_out;
    add_common(tfus, common);
    tfus->add_option("--mode", tf_mode, "dynamic | static");
    tfus->add_option("--backbone", tf_backbone, "backbone checkpoint");
    tfus->add_option("--experts", tf_experts, "base,high,fine adapter checkpoints")->required();
    tfus->add_option("--data", tf_data, "data directory");
    tfus->add_option("--lr-grid", tf_grid, "comma-separated learning rates");
    tfus->add_option("--out", tf_out, "router/static checkpoint");

    // generate
    auto* gen = app.add_subcommand("generate", "decode predictions for a split");
    std::string g_fusion, g_expert, g_backbone = "ckpt/backbone.rdk", g_experts, g_router,
                g_static, g_merged, g_knowledge, g_data = "data", g_split = "test",
                g_out = "predictions.jsonl";
    long g_tts = -1;
    double g_temp = 0.7;
    add_common(gen, common);
    gen->add_option("--fusion", g_fusion, "average | ties | static | dynamic");
    gen->add_option("--expert", g_expert, "base | high | fine | merged (single-expert run)");
    gen->add_option("--backbone", g_backbone, "backbone checkpoint");
    gen->add_option("--experts", g_experts, "adapter checkpoints");
    gen->add_option("--router", g_router, "router checkpoint (dynamic)");
    gen->add_option("--static", g_static, "static-coefficients checkpoint");
    gen->add_option("--merged", g_merged, "merged-delta checkpoint (ties)");
    gen->add_option("--knowledge", g_knowledge, "knowledge.jsonl (expert variants)");
    gen->add_option("--data", g_data, "data directory");
    gen->add_option("--split", g_split, "train | val | test");
    gen->add_option("--tts", g_tts, "number of sampled candidates N");
    auto* g_topt = gen->add_option("--temperature", g_temp, "TTS sampling temperature");
    gen->add_option("--out", g_out, "predictions.jsonl");

    // eval
    auto* eval = app.add_subcommand("eval", "score predictions against ground truth");
    std::string ev_pred = "predictions.jsonl", ev_data = "data", ev_split = "test",
                ev_out = "report.json";
    add_common(eval, common);
    eval->add_option("--predictions", ev_pred, "predictions.jsonl");
    eval->add_option("--data", ev_data, "data directory");
    eval->add_option("--split", ev_split, "train | val | test");
    eval->add_option("--out", ev_out, "report.json");

    // compare
    auto* compare = app.add_subcommand("compare", "compare named run reports");
    std::string cp_runs, cp_baseline, cp_out;
    compare->add_option("--runs", cp_runs, "name=report.json,name=report.json,...")->required();
    compare->add_option("--baseline", cp_baseline, "baseline run name");
    compare->add_option("--out", cp_out, "comparison JSON");

    // trace
    auto* trace = app.add_subcommand("trace", "emit the per-layer expert-weight trace");
    std::string tr_backbone = "ckpt/backbone.rdk", tr_experts, tr_router, tr_data = "data",
                tr_out = "trace.csv";
    int tr_session = -1;
    add_common(trace, common);
    trace->add_option("--session", tr_session, "session id")->required();
    trace->add_option("--backbone", tr_backbone, "backbone checkpoint");
    trace->add_option("--experts", tr_experts, "base,high,fine adapter checkpoints")->required();
    trace->add_option("--router", tr_router, "router checkpoint")->required();
    trace->add_option("--data", tr_data, "data directory");
    trace->add_option("--out", tr_out, "trace CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    }

    try {
        if (worldgen->parsed()) return cmd_worldgen(common, wg_out, argc, argv);
        if (distill->parsed()) {
            return cmd_distill(common, di_teacher, di_data, di_in, di_out, di_templates, argc,
                               argv);
        }
        if (pretrain->parsed()) {
            if (pt_knowledge.empty()) pt_knowledge = pt_data + "/knowledge.jsonl";
            return cmd_pretrain(common, pt_data, pt_knowledge, pt_out, argc, argv);
        }
        if (texp->parsed()) {
            const bool kgiven = te_kopt->count() > 0;
            if (te_knowledge.empty()) te_knowledge = te_data + "/knowledge.jsonl";
            if (te_out.empty()) te_out = "ckpt/expert_" + te_expert + ".rdk";
            return cmd_train_expert(common, te_expert, te_backbone, te_data, te_knowledge, kgiven,
                                    te_out, argc, argv);
        }
        if (merge->parsed()) {
            return cmd_merge(common, mg_strategy, mg_experts, mg_density, mg_dopt->count() > 0,
                             mg_out, argc, argv);
        }
        if (tfus->parsed()) {
            if (tf_out.empty()) tf_out = tf_mode == "dynamic" ? "ckpt/router.rdk" : "ckpt/static.rdk";
            return cmd_train_fusion(common, tf_mode, tf_backbone, tf_experts, tf_data, tf_grid,
                                    tf_out, argc, argv);
        }
        if (gen->parsed()) {
            if (g_knowledge.empty()) g_knowledge = g_data + "/knowledge.jsonl";
            return cmd_generate(common, g_fusion, g_expert, g_backbone, g_experts, g_router,
                                g_static, g_merged, g_knowledge, g_data, g_split, g_tts, g_temp,
                                g_topt->count() > 0, g_out, argc, argv);
        }
        if (eval->parsed()) return cmd_eval(common, ev_pred, ev_data, ev_split, ev_out, argc, argv);
        if (compare->parsed()) return cmd_compare(cp_runs, cp_baseline, cp_out);
        if (trace->parsed()) {
            return cmd_trace(common, tr_session, tr_backbone, tr_experts, tr_router, tr_data,
                             tr_out, argc, argv);
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
