#pragma once

// End-to-end orchestration: world -> oracle knowledge -> frozen backbone ->
// knowledge experts -> merges and fusion training -> per-arm generation and
// evaluation. The CLI drives the same steps through checkpoints; the
// acceptance suite drives this in-process.

#include <map>
#include <ostream>

#include "rdk/checkpoint.hpp"
#include "rdk/eval.hpp"

namespace rdk {

struct PipelineConfig {
    WorldConfig world;
    ModelConfig model;  // vocab_size derived from the world when 0
    LoraConfig lora;
    PretrainParams pretrain;
    TrainHyper expert;
    FusionTrainParams fusion;
    TiesConfig ties;
    DecodeConfig decode;
    uint64_t seed = 1;
    // Reserved: recompute the pooled router context over the growing sequence
    // at each decode step. Not implemented; prompt-only pooling is the
    // documented behavior, and enabling this flag is rejected.
    bool pool_growing_sequence = false;

    void validate() const;
    std::string to_json() const;
    static PipelineConfig from_json(const std::string& text);
    static PipelineConfig from_json_file(const std::string& path);
};

// Deterministic per-role seeds, all derived from the global seed.
uint64_t pipeline_seed(const PipelineConfig& cfg, const std::string& role);

struct PreparedWorld {
    World world;
    std::vector<Session> sessions;
    SplitSessions split;
    Vocab vocab;
    std::vector<KnowledgeRecord> knowledge_records;
    KnowledgeStore store;
};

PreparedWorld prepare_world(const PipelineConfig& cfg);

// Generation over a whole split; one prediction per session.
std::vector<PredictionRecord> generate_predictions(const std::vector<Session>& split,
                                                   const ModelBundle& model, const Vocab& vocab,
                                                   const DecodeConfig& config,
                                                   std::ostream* log = nullptr);

struct PipelineResult {
    PretrainResult pretrain;
    std::map<std::string, ExpertTrainResult> expert_train;  // by expert name
    FusionTrainResult router_train, static_train;
    std::map<std::string, MetricsReport> arms;
    std::vector<RouteTrace> test_traces;  // dynamic-router trace per test session
    RouteTrace sample_trace, sample_trace_repeat;
    std::string split_fp;
    double wall_seconds = 0.0;
};

// Arm names: expert_base, expert_high, expert_fine, expert_merged,
// fuse_average, fuse_ties, fuse_static, fuse_dynamic, fuse_dynamic_tts.
PipelineResult run_full_pipeline(const PipelineConfig& cfg, std::ostream* log = nullptr);

}  // namespace rdk
