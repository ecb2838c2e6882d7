#pragma once

// Session-level precision / recall and bundle-level coverage. A predicted
// bundle is a hit when it matches or is a subset of a ground-truth bundle; it
// is assigned to the truth bundle maximizing |b∩g|/|g| (ties to the lowest
// truth index). Corpus numbers are macro averages over sessions; coverage
// averages over the sessions where it is defined.

#include <optional>
#include <string>
#include <vector>

#include "rdk/decode.hpp"

namespace rdk {

struct SessionResult {
    int session_id = 0;
    NormalizedBundleSet predicted;
    // per predicted bundle: matched truth index, or nullopt when not a hit
    std::vector<std::optional<size_t>> assignment;
    double precision = 0.0;
    double recall = 0.0;
    std::optional<double> coverage;  // absent when the session has no hits
};

struct MetricsReport {
    double precision = 0.0;
    double recall = 0.0;
    std::optional<double> coverage;
    size_t n_sessions = 0;
    size_t n_sessions_with_coverage = 0;
    std::string split_fingerprint;
    std::vector<SessionResult> per_session;
};

std::vector<std::optional<size_t>> match_hits(const NormalizedBundleSet& predicted,
                                              const std::vector<std::vector<int>>& truth);

SessionResult session_metrics(int session_id, const NormalizedBundleSet& predicted,
                              const std::vector<std::vector<int>>& truth);

MetricsReport aggregate(std::vector<SessionResult> results, std::string split_fingerprint);

// Stable identifier of an evaluation split (session ids in order).
std::string split_fingerprint(const std::vector<Session>& sessions);

// Evaluate a prediction file against its sessions (by id).
MetricsReport evaluate_predictions(const std::vector<PredictionRecord>& predictions,
                                   const std::vector<Session>& sessions);

struct NamedReport {
    std::string name;
    MetricsReport report;
};

struct Comparison {
    std::string json;
    std::string table;
};

// Rows sorted by run name; deltas and relative improvement against the named
// baseline (default: lexicographically first run). All runs must carry the
// same split fingerprint.
Comparison compare_strategies(std::vector<NamedReport> runs, const std::string& baseline = "");

void write_report_json(const std::string& path, const MetricsReport& report);
MetricsReport read_report_json(const std::string& path);
std::string report_table(const MetricsReport& report);

}  // namespace rdk
