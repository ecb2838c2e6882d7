#include "rdk/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

namespace rdk {

using nlohmann::json;

std::vector<std::optional<size_t>> match_hits(const NormalizedBundleSet& predicted,
                                              const std::vector<std::vector<int>>& truth) {
    std::vector<std::set<int>> truth_sets;
    for (const auto& g : truth) truth_sets.emplace_back(g.begin(), g.end());

    std::vector<std::optional<size_t>> assign(predicted.bundles.size());
    for (size_t bi = 0; bi < predicted.bundles.size(); ++bi) {
        const auto& b = predicted.bundles[bi];
        double best_ratio = -1.0;
        for (size_t gi = 0; gi < truth.size(); ++gi) {
            bool subset = true;
            for (int v : b) {
                if (!truth_sets[gi].count(v)) {
                    subset = false;
                    break;
                }
            }
            if (!subset) continue;
            const double ratio =
                static_cast<double>(b.size()) / static_cast<double>(truth[gi].size());
            if (ratio > best_ratio) {  // ties keep the lowest truth index
                best_ratio = ratio;
                assign[bi] = gi;
            }
        }
    }
    return assign;
}

SessionResult session_metrics(int session_id, const NormalizedBundleSet& predicted,
                              const std::vector<std::vector<int>>& truth) {
    if (truth.empty()) throw ValidationError("session_metrics: empty ground truth");
    SessionResult res;
    res.session_id = session_id;
    res.predicted = predicted;
    res.assignment = match_hits(predicted, truth);

    size_t hits = 0;
    double ratio_sum = 0.0;
    std::set<size_t> covered;
    for (size_t bi = 0; bi < predicted.bundles.size(); ++bi) {
        if (!res.assignment[bi]) continue;
        ++hits;
        const size_t gi = *res.assignment[bi];
        ratio_sum += static_cast<double>(predicted.bundles[bi].size()) /
                     static_cast<double>(truth[gi].size());
        // recall: a truth bundle counts once if any hit lies inside it
        for (size_t gj = 0; gj < truth.size(); ++gj) {
            std::set<int> gset(truth[gj].begin(), truth[gj].end());
            bool subset = true;
            for (int v : predicted.bundles[bi]) {
                if (!gset.count(v)) {
                    subset = false;
                    break;
                }
            }
            if (subset) covered.insert(gj);
        }
    }
    res.precision = predicted.bundles.empty()
                        ? 0.0
                        : static_cast<double>(hits) / static_cast<double>(predicted.bundles.size());
    res.recall = static_cast<double>(covered.size()) / static_cast<double>(truth.size());
    if (hits > 0) res.coverage = ratio_sum / static_cast<double>(hits);
    return res;
}

MetricsReport aggregate(std::vector<SessionResult> results, std::string fingerprint) {
    if (results.empty()) throw ValidationError("aggregate: no session results");
    MetricsReport rep;
    rep.n_sessions = results.size();
    rep.split_fingerprint = std::move(fingerprint);
    double p = 0.0, r = 0.0, c = 0.0;
    for (const auto& res : results) {
        p += res.precision;
        r += res.recall;
        if (res.coverage) {
            c += *res.coverage;
            rep.n_sessions_with_coverage += 1;
        }
    }
    rep.precision = p / static_cast<double>(results.size());
    rep.recall = r / static_cast<double>(results.size());
    if (rep.n_sessions_with_coverage > 0) {
        rep.coverage = c / static_cast<double>(rep.n_sessions_with_coverage);
    }
    rep.per_session = std::move(results);
    return rep;
}

std::string split_fingerprint(const std::vector<Session>& sessions) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& s : sessions) h = fnv1a64(&s.session_id, sizeof(s.session_id), h);
    return hash_hex(h);
}

MetricsReport evaluate_predictions(const std::vector<PredictionRecord>& predictions,
                                   const std::vector<Session>& sessions) {
    std::map<int, const Session*> by_id;
    for (const auto& s : sessions) by_id[s.session_id] = &s;
    std::vector<SessionResult> results;
    for (const auto& p : predictions) {
        auto it = by_id.find(p.session_id);
        if (it == by_id.end()) {
            throw ValidationError("evaluate: prediction for unknown session " +
                                  std::to_string(p.session_id));
        }
        results.push_back(session_metrics(p.session_id, p.bundles, it->second->bundles));
    }
    return aggregate(std::move(results), split_fingerprint(sessions));
}

namespace {

json report_to_json(const MetricsReport& rep, bool with_sessions = true) {
    json j{{"precision", rep.precision},
           {"recall", rep.recall},
           {"coverage", rep.coverage ? json(*rep.coverage) : json(nullptr)},
           {"n_sessions", rep.n_sessions},
           {"n_sessions_with_coverage", rep.n_sessions_with_coverage},
           {"split_fingerprint", rep.split_fingerprint},
           {"averaging", "macro (per-session mean; coverage over sessions with hits)"}};
    if (with_sessions) {
        json per = json::array();
        for (const auto& s : rep.per_session) {
            json assign = json::array();
            for (const auto& a : s.assignment) assign.push_back(a ? json(*a) : json(nullptr));
            per.push_back({{"session_id", s.session_id},
                           {"bundles", s.predicted.bundles},
                           {"assignment", assign},
                           {"precision", s.precision},
                           {"recall", s.recall},
                           {"coverage", s.coverage ? json(*s.coverage) : json(nullptr)}});
        }
        j["per_session"] = per;
    }
    return j;
}

}  // namespace

void write_report_json(const std::string& path, const MetricsReport& report) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write report file: " + path);
    out << report_to_json(report).dump(2) << "\n";
}

MetricsReport read_report_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read report file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError("invalid report JSON in " + path + ": " + e.what());
    }
    MetricsReport rep;
    rep.precision = j.at("precision").get<double>();
    rep.recall = j.at("recall").get<double>();
    if (!j.at("coverage").is_null()) rep.coverage = j.at("coverage").get<double>();
    rep.n_sessions = j.at("n_sessions").get<size_t>();
    rep.n_sessions_with_coverage = j.at("n_sessions_with_coverage").get<size_t>();
    rep.split_fingerprint = j.at("split_fingerprint").get<std::string>();
    if (j.contains("per_session")) {
        for (const auto& js : j.at("per_session")) {
            SessionResult s;
            s.session_id = js.at("session_id").get<int>();
            s.predicted.bundles = js.at("bundles").get<std::vector<std::vector<int>>>();
            for (const auto& ja : js.at("assignment")) {
                s.assignment.push_back(ja.is_null() ? std::optional<size_t>{}
                                                    : std::optional<size_t>{ja.get<size_t>()});
            }
            s.precision = js.at("precision").get<double>();
            s.recall = js.at("recall").get<double>();
            if (!js.at("coverage").is_null()) s.coverage = js.at("coverage").get<double>();
            rep.per_session.push_back(std::move(s));
        }
    }
    return rep;
}

std::string report_table(const MetricsReport& rep) {
    char buf[256];
    std::string out = "metric      value\n";
    std::snprintf(buf, sizeof(buf), "precision   %.4f\nrecall      %.4f\n", rep.precision,
                  rep.recall);
    out += buf;
    if (rep.coverage) {
        std::snprintf(buf, sizeof(buf), "coverage    %.4f  (over %zu/%zu sessions with hits)\n",
                      *rep.coverage, rep.n_sessions_with_coverage, rep.n_sessions);
    } else {
        std::snprintf(buf, sizeof(buf), "coverage    n/a     (no session had hits)\n");
    }
    out += buf;
    std::snprintf(buf, sizeof(buf), "sessions    %zu\n", rep.n_sessions);
    out += buf;
    out += "averaging   macro (per-session mean; coverage over sessions with hits)\n";
    return out;
}

Comparison compare_strategies(std::vector<NamedReport> runs, const std::string& baseline) {
    if (runs.size() < 2) throw ValidationError("compare: need at least two named runs");
    std::sort(runs.begin(), runs.end(),
              [](const NamedReport& a, const NamedReport& b) { return a.name < b.name; });
    for (size_t i = 1; i < runs.size(); ++i) {
        if (runs[i].report.split_fingerprint != runs[0].report.split_fingerprint) {
            throw ValidationError("compare: runs evaluated on different splits (" + runs[i].name +
                                  " vs " + runs[0].name + ")");
        }
    }
    std::string base_name = baseline.empty() ? runs.front().name : baseline;
    const NamedReport* base = nullptr;
    for (const auto& r : runs) {
        if (r.name == base_name) base = &r;
    }
    if (!base) throw ValidationError("compare: baseline run '" + base_name + "' not found");

    auto pct = [](double v, double b) {
        if (b == 0.0) return std::string("n/a");
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%+.2f%%", 100.0 * (v - b) / b);
        return std::string(buf);
    };
    auto cov = [](const MetricsReport& r) { return r.coverage ? *r.coverage : 0.0; };

    json jruns = json::array();
    std::string table =
        "run                 precision  recall     coverage   dP         dR         dCov       "
        "improveP   improveR\n";
    for (const auto& r : runs) {
        const double dp = r.report.precision - base->report.precision;
        const double dr = r.report.recall - base->report.recall;
        const double dc = cov(r.report) - cov(base->report);
        jruns.push_back({{"name", r.name},
                         {"precision", r.report.precision},
                         {"recall", r.report.recall},
                         {"coverage", r.report.coverage ? json(*r.report.coverage) : json(nullptr)},
                         {"delta_precision", dp},
                         {"delta_recall", dr},
                         {"delta_coverage", dc},
                         {"improve_precision", pct(r.report.precision, base->report.precision)},
                         {"improve_recall", pct(r.report.recall, base->report.recall)}});
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "%-19s %-10.4f %-10.4f %-10.4f %-+10.4f %-+10.4f %-+10.4f %-10s %-10s\n",
                      r.name.c_str(), r.report.precision, r.report.recall, cov(r.report), dp, dr,
                      dc, pct(r.report.precision, base->report.precision).c_str(),
                      pct(r.report.recall, base->report.recall).c_str());
        table += buf;
    }
    json out{{"baseline", base_name},
             {"split_fingerprint", runs[0].report.split_fingerprint},
             {"runs", jruns}};
    return Comparison{out.dump(2), table};
}

}  // namespace rdk
