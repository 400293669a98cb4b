#include "bdq/pipelines.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "bdq/flatness.hpp"
#include "bdq/matrix_io.hpp"
#include "bdq/numerics.hpp"

namespace bdq {

PipelineId parse_pipeline(const std::string& s) {
  if (s == "none") return PipelineId::none;
  if (s == "rot") return PipelineId::rot;
  if (s == "diag") return PipelineId::diag;
  if (s == "bdq") return PipelineId::bdq;
  if (s == "kron") return PipelineId::kron;
  throw std::invalid_argument("unknown pipeline: " + s);
}

std::string to_string(PipelineId p) {
  switch (p) {
    case PipelineId::none: return "none";
    case PipelineId::rot: return "rot";
    case PipelineId::diag: return "diag";
    case PipelineId::bdq: return "bdq";
    case PipelineId::kron: return "kron";
  }
  return "?";
}

namespace {

Matrix scale_cols(const Matrix& m, const Vector& s) {
  Matrix out = m;
  out.array().rowwise() *= s.transpose().array();
  return out;
}

Matrix scale_rows(const Matrix& m, const Vector& s) {
  Matrix out = m;
  out.array().colwise() *= s.array();
  return out;
}

// Channel-side scales of the optimal bidiagonal flattening of `study`,
// normalized to unit geometric mean. Dividing the channels by the optimizer's
// d2 suppresses heavy channels; the sample-side d1 is absorbed exactly by
// per-row quantization of the studied tensor.
Vector flatness_channel_scales(const Matrix& study) {
  const Vector d2 = optimize_flatness(study).transform.d2;
  const double geomean = std::exp(d2.array().log().mean());
  return (d2 / geomean).cwiseInverse();
}

struct PipelineTransform {
  Vector lam1;   // channel scales applied to the study matrix
  Vector lam2;   // output scales applied after the product
  Matrix rot;    // orthogonal factor over channels (empty = identity)
  const KroneckerTransform* kron = nullptr;

  Matrix forward_study(const Matrix& a) const {
    Matrix x = scale_cols(a, lam1);
    if (kron) return kronecker_apply(x, *kron, KronSide::right);
    if (rot.size()) return x * rot;
    return x;
  }
  Matrix inverse_study(const Matrix& xt) const {
    Matrix x = xt;
    if (kron) {
      const KroneckerTransform t{kron->P1.transpose(), kron->P2.transpose()};
      x = kronecker_apply(x, t, KronSide::right);
    } else if (rot.size()) {
      x = x * rot.transpose();
    }
    return scale_cols(x, lam1.cwiseInverse());
  }
  Matrix forward_counterpart(const Matrix& w) const {
    Matrix wd = scale_cols(scale_rows(w, lam1.cwiseInverse()), lam2.cwiseInverse());
    if (kron) {
      const KroneckerTransform t{kron->P1.transpose(), kron->P2.transpose()};
      return kronecker_apply(wd, t, KronSide::left);
    }
    if (rot.size()) return rot.transpose() * wd;
    return wd;
  }
};

// Gradient descent on the quantized-output error over the log scales, with
// rounding handled by the straight-through estimator. Deterministic.
void calibrate_scales(const Matrix& a, const Matrix& w, const Matrix& rot,
                      const Matrix& y_ref, const QuantSpec& study_spec,
                      const QuantSpec& counter_spec, int steps, double lr,
                      Vector* log1, Vector* log2) {
  const double denom = double(y_ref.size());
  double best_loss = std::numeric_limits<double>::infinity();
  Vector best1 = *log1, best2 = *log2;
  for (int t = 0; t < steps; ++t) {
    const Vector lam1 = log1->array().exp();
    const Vector lam2 = log2->array().exp();
    const Matrix xt = scale_cols(a, lam1) * rot;
    const Matrix wd = scale_cols(scale_rows(w, lam1.cwiseInverse()), lam2.cwiseInverse());
    const Matrix wt = rot.transpose() * wd;

    const QuantizedTensor qx = quantize(xt, study_spec);
    const QuantizedTensor qw = quantize(wt, counter_spec);
    const Matrix xq = dequantize(qx);
    const Matrix wq = dequantize(qw);
    const BoolArray mx = !clipped_mask(xt, qx).array();
    const BoolArray mw = !clipped_mask(wt, qw).array();

    const Matrix y = scale_cols(xq * wq, lam2);
    const double loss = (y - y_ref).array().square().mean();
    if (loss < best_loss) {
      best_loss = loss;
      best1 = *log1;
      best2 = *log2;
    }

    const Matrix gy = 2.0 * (y - y_ref) / denom;
    Vector g2 = (gy.array() * y.array()).colwise().sum().transpose();
    const Matrix gp = scale_cols(gy, lam2);
    const Matrix gxq = gp * wq.transpose();
    const Matrix gwq = xq.transpose() * gp;
    const Matrix gxt = mx.select(gxq, 0.0);
    const Matrix gwt = mw.select(gwq, 0.0);
    const Matrix gwd = rot * gwt;
    Vector g1 = ((gxt * rot.transpose()).array() * scale_cols(a, lam1).array())
                    .colwise()
                    .sum()
                    .transpose();
    g1 -= Vector((gwd.array() * wd.array()).rowwise().sum());
    g2 -= Vector((gwd.array() * wd.array()).colwise().sum().transpose());

    const double lr_t = lr * 0.5 * (1.0 + std::cos(M_PI * double(t) / double(steps)));
    *log1 -= lr_t * g1;
    *log2 -= lr_t * g2;
  }
  *log1 = best1;
  *log2 = best2;
}

std::pair<Index, Index> square_factorization(Index n) {
  for (Index r = static_cast<Index>(std::sqrt(double(n))); r >= 2; --r)
    if (n % r == 0) return {r, n / r};
  throw std::invalid_argument("kron: no nontrivial factorization of dimension " +
                              std::to_string(n));
}

}  // namespace

ComparisonReport run_compare(const Matrix& study, const CompareOptions& opts,
                             const std::string& matrix_label,
                             const std::optional<OutlierProfile>& profile) {
  require_finite(study, "run_compare");
  const Index n = study.cols();

  QuantSpec study_spec;
  study_spec.bits = opts.bits;
  study_spec.mode = opts.mode;
  study_spec.granularity = opts.study_granularity;
  QuantSpec counter_spec = study_spec;
  counter_spec.granularity = opts.counterpart_granularity;

  // Clean counterpart weight and the full-precision reference.
  OutlierProfile wp;
  wp.sigma = 1.0 / std::sqrt(double(n));
  wp.seed = opts.seed + 0x5eed;
  const Matrix w = sample_matrix(wp, n, n);
  const Matrix y_ref = study * w;

  const double flat_before = optimize_flatness(study).state.F;

  ComparisonReport report;
  report.rows_dim = study.rows();
  report.cols_dim = study.cols();
  report.bits = opts.bits;
  report.seed = opts.seed;
  report.matrix_label = matrix_label;
  report.profile = profile;
  report.timing = opts.timing;

  Matrix rotation;  // shared by rot and bdq
  KroneckerTransform kron_t;

  for (PipelineId id : opts.pipelines) {
    const auto t0 = std::chrono::steady_clock::now();
    PipelineTransform pt;
    pt.lam1 = Vector::Ones(n);
    pt.lam2 = Vector::Ones(n);

    switch (id) {
      case PipelineId::none:
        break;
      case PipelineId::rot:
        if (!rotation.size()) rotation = random_rotation(n, opts.seed + 1);
        pt.rot = rotation;
        break;
      case PipelineId::diag:
        pt.lam1 = flatness_channel_scales(study);
        break;
      case PipelineId::bdq: {
        if (!rotation.size()) rotation = random_rotation(n, opts.seed + 1);
        pt.rot = rotation;
        Vector log1 = flatness_channel_scales(study).array().log();
        Vector log2 = Vector::Zero(n);
        calibrate_scales(study, w, rotation, y_ref, study_spec, counter_spec,
                         opts.calib_steps, opts.calib_lr, &log1, &log2);
        pt.lam1 = log1.array().exp();
        pt.lam2 = log2.array().exp();
        break;
      }
      case PipelineId::kron: {
        const auto [r, s] = square_factorization(n);
        kron_t.P1 = random_rotation(r, opts.seed + 2, false);
        kron_t.P2 = random_rotation(s, opts.seed + 3, false);
        pt.kron = &kron_t;
        break;
      }
    }

    const Matrix xt = pt.forward_study(study);
    const Matrix wt = pt.forward_counterpart(w);
    const QuantizedTensor qx = quantize(xt, study_spec);
    const Matrix xq = dequantize(qx);
    const Matrix wq = fake_quantize(wt, counter_spec);
    const Matrix y = scale_cols(xq * wq, pt.lam2);

    PipelineRow row;
    row.id = id;
    row.flatness_before = flat_before;
    row.flatness_after = optimize_flatness(xt).state.F;
    row.weight_mse = (pt.inverse_study(xq) - study).array().square().mean();
    row.output_mse = (y - y_ref).array().square().mean();
    row.occupancy = bin_occupancy(qx).uniformity;
    row.wall_time_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    report.rows.push_back(row);
  }
  return report;
}

nlohmann::json ComparisonReport::to_json() const {
  nlohmann::json j;
  j["rows_dim"] = rows_dim;
  j["cols_dim"] = cols_dim;
  j["bits"] = bits;
  j["seed"] = seed;
  if (!matrix_label.empty()) j["matrix"] = matrix_label;
  if (profile) {
    j["profile"] = {{"sigma", profile->sigma},
                    {"k", profile->k},
                    {"outlier_frac", profile->outlier_frac},
                    {"seed", profile->seed}};
  }
  j["pipelines"] = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json row;
    row["pipeline"] = to_string(r.id);
    row["flatness_before"] = r.flatness_before;
    row["flatness_after"] = r.flatness_after;
    row["weight_mse"] = r.weight_mse;
    row["output_mse"] = r.output_mse;
    row["bin_occupancy_uniformity"] = r.occupancy;
    if (timing) row["wall_time_ms"] = r.wall_time_ms;
    j["pipelines"].push_back(row);
  }
  return j;
}

std::string ComparisonReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "pipeline,flatness_before,flatness_after,weight_mse,output_mse,"
         "bin_occupancy_uniformity";
  if (timing) out << ",wall_time_ms";
  out << '\n';
  for (const auto& r : rows) {
    out << to_string(r.id) << ',' << r.flatness_before << ',' << r.flatness_after
        << ',' << r.weight_mse << ',' << r.output_mse << ',' << r.occupancy;
    if (timing) out << ',' << r.wall_time_ms;
    out << '\n';
  }
  return out.str();
}

std::vector<ComparisonReport> run_compare_sweep(const OutlierProfile& base_profile,
                                                Index rows, Index cols, int n_seeds,
                                                const CompareOptions& opts) {
  std::vector<ComparisonReport> reports(static_cast<std::size_t>(n_seeds));
  unsigned workers = std::thread::hardware_concurrency();
  if (const char* env = std::getenv("BDQ_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) workers = std::min(workers, static_cast<unsigned>(cap));
  }
  workers = std::max(1u, std::min(workers, static_cast<unsigned>(n_seeds)));

  std::atomic<int> next{0};
  auto work = [&]() {
    for (int i = next.fetch_add(1); i < n_seeds; i = next.fetch_add(1)) {
      OutlierProfile p = base_profile;
      p.seed = base_profile.seed + static_cast<std::uint64_t>(i);
      CompareOptions o = opts;
      o.seed = p.seed;
      const Matrix study = sample_matrix(p, rows, cols);
      reports[static_cast<std::size_t>(i)] = run_compare(study, o, "", p);
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < workers; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  return reports;
}

namespace {

ToyNetwork build_net(std::uint64_t seed, const NetExperimentOptions& opts) {
  OutlierProfile wp;
  wp.sigma = opts.sigma;
  wp.k = opts.k;
  wp.outlier_frac = opts.outlier_frac;
  wp.seed = seed;
  std::vector<Nonlinearity> acts(opts.dims.size() - 1, Nonlinearity::relu);
  acts.back() = Nonlinearity::none;
  return ToyNetwork::chain(opts.dims, acts, wp);
}

double heldout_mse(const ToyNetwork& net, const Matrix& xh, const Matrix& y_ref,
                   const QuantSpec& act_spec, const QuantSpec& w_spec) {
  const Matrix y = network_forward(net, xh, &act_spec, &w_spec);
  return (y - y_ref).array().square().mean();
}

}  // namespace

NetExperimentResult net_experiment(std::uint64_t seed, const NetExperimentOptions& opts) {
  ToyNetwork net = build_net(seed, opts);

  OutlierProfile xp;
  xp.seed = seed + 100;
  const Matrix xc = sample_matrix(xp, opts.calib_size, opts.dims.front());
  OutlierProfile hp;
  hp.seed = seed + 200;
  const Matrix xh = sample_matrix(hp, opts.heldout_size, opts.dims.front());

  QuantSpec w_spec;
  w_spec.bits = opts.bits;
  QuantSpec act_spec = w_spec;
  act_spec.granularity = Granularity::per_row;

  const Matrix y_ref = network_forward(net, xh, nullptr, nullptr);

  NetExperimentResult result;
  result.mse_none = heldout_mse(net, xh, y_ref, act_spec, w_spec);

  ToyNetwork rot_net = net;
  for (std::size_t l = 0; l < net.layers.size(); ++l)
    rot_net.pairs[l].R =
        random_rotation(net.layers[l].weight.rows(), seed + 500 + l);
  result.mse_rot = heldout_mse(rot_net, xh, y_ref, act_spec, w_spec);

  CalibrationConfig cfg;
  cfg.learning_rate = opts.learning_rate;
  cfg.epochs = opts.epochs;
  cfg.delta = opts.delta;
  cfg.loss = opts.loss;
  cfg.seed = seed;
  const CalibrationResult calib = calibrate(rot_net, xc, xh, w_spec, cfg);
  ToyNetwork bdq_net = rot_net;
  bdq_net.pairs = calib.pairs;
  result.mse_bdq = heldout_mse(bdq_net, xh, y_ref, act_spec, w_spec);
  return result;
}

namespace {
double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}
}  // namespace

NetOrderingSummary net_ordering_study(int n_seeds, const NetExperimentOptions& opts) {
  NetOrderingSummary s;
  s.seeds = n_seeds;
  std::vector<double> none_v, rot_v, bdq_v;
  for (int i = 0; i < n_seeds; ++i) {
    const NetExperimentResult r = net_experiment(static_cast<std::uint64_t>(i), opts);
    none_v.push_back(r.mse_none);
    rot_v.push_back(r.mse_rot);
    bdq_v.push_back(r.mse_bdq);
    if (r.mse_bdq < r.mse_rot) ++s.wins_vs_rot;
    if (r.mse_bdq < r.mse_none) ++s.wins_vs_none;
  }
  s.median_none = median_of(none_v);
  s.median_rot = median_of(rot_v);
  s.median_bdq = median_of(bdq_v);
  return s;
}

OverfitProbeSummary overfitting_probe(int n_seeds, int epochs, Index calib_size,
                                      CalibLoss loss) {
  OverfitProbeSummary s;
  s.seeds = n_seeds;
  std::vector<double> fractions;
  NetExperimentOptions opts;
  for (int i = 0; i < n_seeds; ++i) {
    const std::uint64_t seed = static_cast<std::uint64_t>(i);
    ToyNetwork net = build_net(seed, opts);
    for (std::size_t l = 0; l < net.layers.size(); ++l)
      net.pairs[l].R = random_rotation(net.layers[l].weight.rows(), seed + 500 + l);

    OutlierProfile xp;
    xp.seed = seed + 100;
    const Matrix xc = sample_matrix(xp, calib_size, opts.dims.front());
    OutlierProfile hp;
    hp.seed = seed + 200;
    const Matrix xh = sample_matrix(hp, opts.heldout_size, opts.dims.front());

    QuantSpec spec;
    spec.bits = opts.bits;
    CalibrationConfig cfg;
    cfg.epochs = epochs;
    cfg.loss = loss;
    cfg.seed = seed;
    const CalibrationResult r = calibrate(net, xc, xh, spec, cfg);

    int best = 0;
    for (std::size_t e = 1; e < r.trace.size(); ++e)
      if (r.trace[e].heldout_loss < r.trace[static_cast<std::size_t>(best)].heldout_loss)
        best = static_cast<int>(e);
    if (best + 1 < static_cast<int>(r.trace.size())) ++s.with_interior_minimum;
    fractions.push_back(double(best) / double(std::max<std::size_t>(1, r.trace.size() - 1)));
  }
  s.median_best_epoch_fraction = median_of(fractions);
  return s;
}

nlohmann::json flatness_state_to_json(const FlatnessState& state) {
  nlohmann::json j;
  j["alpha"] = std::vector<double>(state.alpha.data(), state.alpha.data() + state.alpha.size());
  j["beta"] = std::vector<double>(state.beta.data(), state.beta.data() + state.beta.size());
  j["F"] = state.F;
  j["C"] = state.C;
  j["norm_residual"] = state.norm_residual;
  j["energy_residual"] = state.energy_residual;
  j["lambda1"] = state.lambda1;
  j["lambda2"] = state.lambda2;
  j["iterations"] = state.iterations;
  j["converged"] = state.converged;
  return j;
}

nlohmann::json error_report_to_json(const ErrorReport& r) {
  return nlohmann::json{{"mean", r.mean},
                        {"empirical_mse", r.empirical_mse},
                        {"max_abs", r.max_abs},
                        {"predicted_normal", r.predicted_normal},
                        {"predicted_outlier", r.predicted_outlier},
                        {"outlier_frac", r.outlier_frac},
                        {"total_predicted", r.total_predicted},
                        {"dominance_ratio", r.dominance_ratio}};
}

void save_pair(const TransformPair& pair, const std::string& json_path,
               std::uint64_t seed, bool with_hadamard) {
  std::string base = json_path;
  const auto pos = base.rfind(".json");
  if (pos != std::string::npos && pos == base.size() - 5) base.erase(pos);
  const std::string rot_path = base + "_R.bdq1";
  save_bdq1(pair.R, rot_path);

  nlohmann::json j;
  j["lambda1"] =
      std::vector<double>(pair.lambda1.data(), pair.lambda1.data() + pair.lambda1.size());
  j["lambda2"] =
      std::vector<double>(pair.lambda2.data(), pair.lambda2.data() + pair.lambda2.size());
  {
    const auto slash = rot_path.rfind('/');
    j["rotation_payload"] = slash == std::string::npos ? rot_path : rot_path.substr(slash + 1);
  }
  j["seed"] = seed;
  j["with_hadamard"] = with_hadamard;
  std::ofstream out(json_path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + json_path);
  out << j.dump(2) << '\n';
}

TransformPair load_pair(const std::string& json_path) {
  std::ifstream in(json_path);
  if (!in) throw std::runtime_error("cannot open " + json_path);
  nlohmann::json j;
  in >> j;
  TransformPair pair;
  const auto l1 = j["lambda1"].get<std::vector<double>>();
  const auto l2 = j["lambda2"].get<std::vector<double>>();
  pair.lambda1 = Eigen::Map<const Vector>(l1.data(), static_cast<Index>(l1.size()));
  pair.lambda2 = Eigen::Map<const Vector>(l2.data(), static_cast<Index>(l2.size()));
  std::string rp = j["rotation_payload"].get<std::string>();
  if (rp.find('/') == std::string::npos) {
    const auto slash = json_path.rfind('/');
    if (slash != std::string::npos) rp = json_path.substr(0, slash + 1) + rp;
  }
  pair.R = load_bdq1(rp);
  return pair;
}

}  // namespace bdq
