#ifndef DBF_EXPERIMENT_HPP
#define DBF_EXPERIMENT_HPP

#include <map>

#include "dbf/dbf.hpp"
#include "dbf/dbf_train.hpp"
#include "dbf/envs.hpp"
#include "dbf/filters.hpp"
#include "dbf/metrics.hpp"

namespace dbf {

// ---------------------------------------------------------------------------
// Experiment orchestration: generate or load data, optionally train, filter,
// score, and emit reports. Every artifact carries the config hash and seed.
// ---------------------------------------------------------------------------

struct MetricValue {
    std::vector<double> per_trajectory;
    double mean = 0.0;
    double stddev = 0.0;

    static MetricValue aggregate(std::vector<double> values);
};

struct MetricReport {
    std::map<std::string, MetricValue> metrics;
    json extra;  // timings, diagnostics, config echo

    json to_json() const;
    static MetricReport from_json(const json& j);
};

struct ExperimentConfig {
    json env;
    std::string filter_kind;  // kf | enkf | etkf | pf | dbf
    json filter_params;       // per-filter knobs (n_ens, n_p, inflation, ...)
    json training;            // dbf training spec; may name a checkpoint instead
    int test_count = 10;
    int test_steps = 80;
    uint64_t seed = 0;
    int threads = 1;
    int final_k = 10;
    std::string out_dir;

    static ExperimentConfig from_json(const json& j);
    json to_json() const;
};

/// FNV-1a over the canonical config dump.
uint64_t config_hash(const json& j);

/// Per-trajectory point predictions of the physical state, one matrix per
/// test trajectory.
struct FilterRun {
    std::vector<MatrixXd> predictions;             // T x d_z each
    std::vector<FilterResult> beliefs;             // dbf only
    std::vector<std::vector<MatrixXd>> members;    // ensemble/particle samples per step
    double wall_seconds = 0.0;
};

FilterRun run_filter(const ExperimentConfig& cfg, const Environment& env,
                     const TrajectoryBatch& test, const DBFModel* model);

/// Assemble an untrained model (architecture + init) for an environment from
/// a training spec.
DBFModel build_dbf_model(const json& training, const Environment& env, uint64_t seed);

/// Metrics for a finished filter run.
MetricReport score_run(const ExperimentConfig& cfg, const Environment& env,
                       const TrajectoryBatch& test, const FilterRun& run,
                       const DBFModel* model);

MetricReport run_experiment(const ExperimentConfig& cfg);

/// Cartesian sweep over config patches; per-cell failures are recorded and
/// the sweep continues. Returns the combined table (also written as CSV when
/// out_dir is set).
json sweep(const json& sweep_config);

/// Combined comparison table over several filters on a shared test set,
/// mirroring the filter x sigma x metric layout.
json compare(const json& compare_config);

// belief files: means + covariances (block-packed or dense) + manifest
void save_filter_results(const std::vector<FilterResult>& runs, const std::string& dir,
                         const json& manifest_extra = {});
std::vector<FilterResult> load_filter_results(const std::string& dir);

void write_report_files(const MetricReport& report, const ExperimentConfig& cfg);

} // namespace dbf

#endif
