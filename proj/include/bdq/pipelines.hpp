#ifndef BDQ_PIPELINES_HPP_
#define BDQ_PIPELINES_HPP_

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bdq/calibration.hpp"
#include "bdq/quantizer.hpp"
#include "bdq/transforms.hpp"
#include "bdq/types.hpp"

namespace bdq {

enum class PipelineId { none, rot, diag, bdq, kron };

PipelineId parse_pipeline(const std::string& s);
std::string to_string(PipelineId p);

// One comparison row. Flatness fields use the optimized metric (best row and
// column weights) of the matrix before/after the pipeline's transform;
// weight_mse is the reconstruction error of the studied tensor mapped back to
// its original coordinates.
struct PipelineRow {
  PipelineId id = PipelineId::none;
  double flatness_before = 0.0;
  double flatness_after = 0.0;
  double weight_mse = 0.0;
  double output_mse = 0.0;
  double occupancy = 0.0;
  double wall_time_ms = 0.0;
};

struct CompareOptions {
  std::vector<PipelineId> pipelines = {PipelineId::none, PipelineId::rot,
                                       PipelineId::diag, PipelineId::bdq,
                                       PipelineId::kron};
  int bits = 4;
  std::uint64_t seed = 0;
  QuantMode mode = QuantMode::paper_max_abs;
  Granularity study_granularity = Granularity::per_row;
  Granularity counterpart_granularity = Granularity::per_tensor;
  int calib_steps = 300;
  double calib_lr = 0.05;
  bool timing = false;  // wall_time fields are omitted from reports otherwise
};

struct ComparisonReport {
  std::vector<PipelineRow> rows;
  Index rows_dim = 0;
  Index cols_dim = 0;
  int bits = 4;
  std::uint64_t seed = 0;
  std::string matrix_label;
  std::optional<OutlierProfile> profile;
  bool timing = false;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

// The studied tensor sits on the left of the product y = study * counterpart;
// the clean counterpart weight is sampled from the seed. Pairs act on the
// contracted (channel) dimension, with output-side scales compensated after
// the product.
ComparisonReport run_compare(const Matrix& study, const CompareOptions& opts,
                             const std::string& matrix_label = "",
                             const std::optional<OutlierProfile>& profile = std::nullopt);

// Seed sweep with worker threads (capped by BDQ_THREADS); rows are assembled
// in seed order.
std::vector<ComparisonReport> run_compare_sweep(const OutlierProfile& base_profile,
                                                Index rows, Index cols, int n_seeds,
                                                const CompareOptions& opts);

struct NetExperimentOptions {
  std::vector<Index> dims = {16, 16, 8};
  double sigma = 0.25;
  double k = 100.0;
  double outlier_frac = 0.01;
  int bits = 4;
  Index calib_size = 128;
  Index heldout_size = 64;
  int epochs = 300;
  double learning_rate = 5e-3;
  double delta = 0.5;
  CalibLoss loss = CalibLoss::rce;
};

struct NetExperimentResult {
  double mse_none = 0.0;
  double mse_rot = 0.0;
  double mse_bdq = 0.0;  // rotation plus calibrated diagonals
};

NetExperimentResult net_experiment(std::uint64_t seed, const NetExperimentOptions& opts);

struct NetOrderingSummary {
  double median_none = 0.0;
  double median_rot = 0.0;
  double median_bdq = 0.0;
  int wins_vs_rot = 0;
  int wins_vs_none = 0;
  int seeds = 0;
};

NetOrderingSummary net_ordering_study(int n_seeds, const NetExperimentOptions& opts);

// Tiny-calibration-set long-run probe: fraction of seeds whose held-out loss
// curve attains its minimum strictly before the final epoch.
struct OverfitProbeSummary {
  int seeds = 0;
  int with_interior_minimum = 0;
  double median_best_epoch_fraction = 0.0;
};

OverfitProbeSummary overfitting_probe(int n_seeds, int epochs, Index calib_size,
                                      CalibLoss loss);

// Serialization helpers for the remaining domain types.
nlohmann::json flatness_state_to_json(const FlatnessState& state);
nlohmann::json error_report_to_json(const ErrorReport& report);
void save_pair(const TransformPair& pair, const std::string& json_path,
               std::uint64_t seed, bool with_hadamard);
TransformPair load_pair(const std::string& json_path);

}  // namespace bdq

#endif  // BDQ_PIPELINES_HPP_
