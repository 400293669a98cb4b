#include "bdq/calibration.hpp"

#include <cmath>
#include <fstream>

#include "bdq/flatness.hpp"
#include "bdq/numerics.hpp"

namespace bdq {

void ToyNetwork::validate() const {
  if (layers.empty()) throw std::invalid_argument("ToyNetwork: no layers");
  if (pairs.size() != layers.size())
    throw std::invalid_argument("ToyNetwork: one pair per layer required");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& w = layers[l].weight;
    if (l + 1 < layers.size() && w.cols() != layers[l + 1].weight.rows())
      throw std::invalid_argument("ToyNetwork: layer dimensions do not chain");
    pairs[l].validate(w.rows(), w.cols());
  }
}

ToyNetwork ToyNetwork::chain(const std::vector<Index>& dims,
                             const std::vector<Nonlinearity>& acts,
                             const OutlierProfile& weight_profile) {
  if (dims.size() < 2) throw std::invalid_argument("ToyNetwork: need >= 2 dims");
  if (acts.size() != dims.size() - 1)
    throw std::invalid_argument("ToyNetwork: one nonlinearity per layer");
  ToyNetwork net;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    OutlierProfile p = weight_profile;
    p.seed = weight_profile.seed + l;
    net.layers.push_back({sample_matrix(p, dims[l], dims[l + 1]), acts[l]});
    net.pairs.push_back(TransformPair::identity(dims[l], dims[l + 1]));
  }
  return net;
}

CalibLoss parse_calib_loss(const std::string& s) {
  if (s == "ce") return CalibLoss::ce;
  if (s == "rce") return CalibLoss::rce;
  throw std::invalid_argument("unknown loss: " + s);
}

std::string to_string(CalibLoss l) { return l == CalibLoss::ce ? "ce" : "rce"; }

void CalibrationConfig::validate() const {
  if (!(learning_rate > 0.0))
    throw std::invalid_argument("CalibrationConfig: learning_rate must be > 0");
  if (!(delta >= 0.0 && delta <= 1.0))
    throw std::invalid_argument("CalibrationConfig: delta must be in [0,1]");
  if (epochs < 1) throw std::invalid_argument("CalibrationConfig: epochs must be >= 1");
}

namespace {

void check_distribution(const Vector& v, const char* name) {
  if ((v.array() < 0.0).any())
    throw std::domain_error(std::string(name) + ": negative entry");
  if (std::abs(v.sum() - 1.0) > 1e-9)
    throw std::domain_error(std::string(name) + ": does not sum to 1");
}

}  // namespace

double cross_entropy(const Vector& q, const Vector& p) {
  if (q.size() != p.size()) throw std::invalid_argument("cross_entropy: size mismatch");
  check_distribution(q, "q");
  check_distribution(p, "p");
  double l = 0.0;
  for (Index i = 0; i < q.size(); ++i) {
    if (q[i] > 0.0) {
      if (!(p[i] > 0.0)) throw std::domain_error("cross_entropy: support violation");
      l -= q[i] * std::log(p[i]);
    }
  }
  return l;
}

double rce_loss(const Vector& q, const Vector& p, double delta) {
  if (q.size() != p.size()) throw std::invalid_argument("rce_loss: size mismatch");
  if (!(delta >= 0.0 && delta <= 1.0))
    throw std::invalid_argument("rce_loss: delta must be in [0,1]");
  check_distribution(q, "q");
  check_distribution(p, "p");
  double l = 0.0;
  for (Index i = 0; i < q.size(); ++i) {
    if (q[i] > 0.0) {
      if (!(p[i] > 0.0)) throw std::domain_error("rce_loss: support violation");
      l -= q[i] * std::log(p[i]);
    }
    if (p[i] > 0.0) {
      const double mix = delta * p[i] + (1.0 - delta) * q[i];
      if (!(mix > 0.0)) throw std::domain_error("rce_loss: zero mixture");
      l += p[i] * std::log(mix);
    }
  }
  return l;
}

Vector rce_gradient(const Vector& q, const Vector& p, double delta) {
  if (q.size() != p.size()) throw std::invalid_argument("rce_gradient: size mismatch");
  Vector g(p.size());
  for (Index i = 0; i < p.size(); ++i) {
    const double mix = delta * p[i] + (1.0 - delta) * q[i];
    double v = 0.0;
    if (q[i] > 0.0) {
      if (!(p[i] > 0.0)) throw std::domain_error("rce_gradient: support violation");
      v -= q[i] / p[i];
    }
    if (p[i] > 0.0 || mix > 0.0) {
      if (!(mix > 0.0)) throw std::domain_error("rce_gradient: zero mixture");
      v += std::log(mix) + delta * p[i] / mix;
    }
    g[i] = v;
  }
  return g;
}

Vector ce_gradient(const Vector& q, const Vector& p) {
  if (q.size() != p.size()) throw std::invalid_argument("ce_gradient: size mismatch");
  Vector g = Vector::Zero(p.size());
  for (Index i = 0; i < p.size(); ++i) {
    if (q[i] > 0.0) {
      if (!(p[i] > 0.0)) throw std::domain_error("ce_gradient: support violation");
      g[i] = -q[i] / p[i];
    }
  }
  return g;
}

Vector softmax(const Vector& logits) {
  const double m = logits.maxCoeff();
  Vector e = (logits.array() - m).exp();
  return e / e.sum();
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index b = 0; b < logits.rows(); ++b)
    out.row(b) = softmax(logits.row(b).transpose()).transpose();
  return out;
}

Vector loss_logit_gradient(const Vector& q, const Vector& logits, double delta,
                           CalibLoss loss) {
  const Vector p = softmax(logits);
  const Vector g = loss == CalibLoss::ce ? ce_gradient(q, p) : rce_gradient(q, p, delta);
  const double dot = g.dot(p);
  return p.array() * (g.array() - dot);
}

namespace {

struct FakeQuantResult {
  Matrix value;
  BoolArray pass;  // straight-through mask: true where not clipped
};

FakeQuantResult fq(const Matrix& m, const QuantSpec* spec) {
  if (!spec) return {m, BoolArray::Constant(m.rows(), m.cols(), true)};
  const QuantizedTensor q = quantize(m, *spec);
  return {dequantize(q), !clipped_mask(m, q).array()};
}

struct LayerCache {
  Vector c;         // prev lambda2 (.) lambda1
  Matrix u, v;      // scaled input, rotated input
  Matrix xq;        // quantized activation
  BoolArray mx;
  Matrix wd, wt;    // diagonally scaled weight, rotated weight
  Matrix wq;        // quantized weight
  BoolArray mw;
  Matrix z, h;
};

struct Params {
  std::vector<Vector> log1, log2;  // per-layer log diagonals
  std::vector<Matrix> skew;        // Cayley parameters (learn_rotation)
  std::vector<Matrix> rot;         // effective rotations
};

struct Grads {
  std::vector<Vector> g1, g2;
  std::vector<Matrix> gskew;
};

Matrix forward_pass(const ToyNetwork& net, const Params& prm, const Matrix& x,
                    const QuantSpec* act_spec, const QuantSpec* w_spec,
                    std::vector<LayerCache>* caches) {
  const std::size_t L = net.layers.size();
  Matrix h = x;
  if (caches) caches->resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    const Vector lam1 = prm.log1[l].array().exp();
    const Vector lam2 = prm.log2[l].array().exp();
    Vector c = lam1;
    if (l > 0) c.array() *= prm.log2[l - 1].array().exp();
    Matrix u = h;
    u.array().rowwise() *= c.transpose().array();
    Matrix v = u * prm.rot[l];
    FakeQuantResult a = fq(v, act_spec);

    Matrix wd = net.layers[l].weight;
    wd.array().colwise() /= lam1.array();
    wd.array().rowwise() /= lam2.transpose().array();
    Matrix wt = prm.rot[l].transpose() * wd;
    FakeQuantResult wq = fq(wt, w_spec);

    Matrix z = a.value * wq.value;
    Matrix hn = net.layers[l].act == Nonlinearity::relu ? z.cwiseMax(0.0) : z;
    if (caches) {
      auto& cc = (*caches)[l];
      cc.c = std::move(c);
      cc.u = std::move(u);
      cc.v = std::move(v);
      cc.xq = std::move(a.value);
      cc.mx = std::move(a.pass);
      cc.wd = std::move(wd);
      cc.wt = std::move(wt);
      cc.wq = std::move(wq.value);
      cc.mw = std::move(wq.pass);
      cc.z = z;
    }
    h = std::move(hn);
    if (caches) (*caches)[l].h = h;
  }
  Matrix y = h;
  y.array().rowwise() *= prm.log2.back().array().exp().transpose();
  return y;
}

Grads backward_pass(const ToyNetwork& net, const Params& prm,
                    const std::vector<LayerCache>& caches, const Matrix& y,
                    const Matrix& gy, bool learn_rotation) {
  const std::size_t L = net.layers.size();
  Grads g;
  g.g1.resize(L);
  g.g2.resize(L);
  if (learn_rotation) g.gskew.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    g.g1[l] = Vector::Zero(prm.log1[l].size());
    g.g2[l] = Vector::Zero(prm.log2[l].size());
  }

  // Output compensation: y = h (.) lambda2.
  g.g2[L - 1] += (gy.array() * y.array()).colwise().sum().matrix().transpose();
  Matrix gh = gy;
  gh.array().rowwise() *= prm.log2[L - 1].array().exp().transpose();

  for (std::size_t li = L; li-- > 0;) {
    const auto& cc = caches[li];
    Matrix gz = net.layers[li].act == Nonlinearity::relu
                    ? Matrix((cc.z.array() > 0.0).select(gh, 0.0))
                    : gh;
    Matrix gxq = gz * cc.wq.transpose();
    Matrix gwq = cc.xq.transpose() * gz;
    Matrix gv = (cc.mx).select(gxq, 0.0);
    Matrix gwt = (cc.mw).select(gwq, 0.0);
    Matrix gu = gv * prm.rot[li].transpose();
    Matrix gwd = prm.rot[li] * gwt;

    if (learn_rotation) {
      const Matrix grot = cc.u.transpose() * gv + cc.wd * gwt.transpose();
      const Matrix& s = prm.skew[li];
      const Matrix c = cayley_orthogonal(s);
      const Matrix gc = net.pairs[li].R.transpose() * grot;
      const Matrix id = Matrix::Identity(s.rows(), s.cols());
      const Matrix raw = -(id + c).transpose() * gc *
                         Matrix((id + s).transpose().partialPivLu().inverse());
      g.gskew[li] = (raw - Matrix(raw.transpose())) / 2.0;
    }

    const Vector cu = (gu.array() * cc.u.array()).colwise().sum();
    const Vector rowterm = (gwd.array() * cc.wd.array()).rowwise().sum();
    const Vector colterm = (gwd.array() * cc.wd.array()).colwise().sum();
    g.g1[li] += cu - rowterm;
    g.g2[li] -= colterm;
    if (li > 0) g.g2[li - 1] += cu;

    gh = gu;
    gh.array().rowwise() *= cc.c.transpose().array();
  }
  return g;
}

double batch_loss(const Matrix& q_rows, const Matrix& logits, double delta,
                  CalibLoss loss) {
  double total = 0.0;
  for (Index b = 0; b < logits.rows(); ++b) {
    const Vector p = softmax(logits.row(b).transpose());
    const Vector q = q_rows.row(b).transpose();
    total += loss == CalibLoss::ce ? cross_entropy(q, p) : rce_loss(q, p, delta);
  }
  return total / double(logits.rows());
}

}  // namespace

Matrix network_forward(const ToyNetwork& net, const Matrix& x,
                       const QuantSpec* act_spec, const QuantSpec* weight_spec) {
  net.validate();
  if (x.cols() != net.in_dim())
    throw std::invalid_argument("network_forward: input width mismatch");
  Params prm;
  const std::size_t L = net.layers.size();
  prm.log1.resize(L);
  prm.log2.resize(L);
  prm.rot.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    prm.log1[l] = net.pairs[l].lambda1.array().log();
    prm.log2[l] = net.pairs[l].lambda2.array().log();
    prm.rot[l] = net.pairs[l].R;
  }
  return forward_pass(net, prm, x, act_spec, weight_spec, nullptr);
}

CalibrationResult calibrate(const ToyNetwork& net, const Matrix& calib_inputs,
                            const Matrix& heldout_inputs, const QuantSpec& spec,
                            const CalibrationConfig& cfg) {
  net.validate();
  cfg.validate();
  spec.validate();
  if (calib_inputs.rows() == 0)
    throw std::invalid_argument("calibrate: empty calibration set");
  if (calib_inputs.cols() != net.in_dim())
    throw std::invalid_argument("calibrate: input width mismatch");

  QuantSpec act_spec = spec;
  act_spec.granularity = cfg.act_granularity;
  const QuantSpec w_spec = spec;

  const std::size_t L = net.layers.size();
  Params prm;
  prm.log1.resize(L);
  prm.log2.resize(L);
  prm.rot.resize(L);
  if (cfg.learn_rotation) prm.skew.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    prm.log1[l] = net.pairs[l].lambda1.array().log();
    prm.log2[l] = net.pairs[l].lambda2.array().log();
    prm.rot[l] = net.pairs[l].R;
    if (cfg.learn_rotation)
      prm.skew[l] = Matrix::Zero(net.pairs[l].R.rows(), net.pairs[l].R.cols());
  }

  // Full-precision teacher with identity pairs.
  ToyNetwork teacher = net;
  for (std::size_t l = 0; l < L; ++l)
    teacher.pairs[l] = TransformPair::identity(net.layers[l].weight.rows(),
                                               net.layers[l].weight.cols());
  const Matrix q_calib = softmax_rows(network_forward(teacher, calib_inputs, nullptr, nullptr));
  Matrix q_heldout;
  if (heldout_inputs.rows() > 0)
    q_heldout = softmax_rows(network_forward(teacher, heldout_inputs, nullptr, nullptr));

  Matrix ema_p;
  bool ema_ready = false;

  CalibrationResult result;
  const Index n = calib_inputs.rows();
  const Index batch = cfg.batch_size > 0 ? std::min<Index>(cfg.batch_size, n) : n;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Trace metrics at the parameters entering this epoch.
    std::vector<LayerCache> caches;
    const Matrix logits = forward_pass(net, prm, calib_inputs, &act_spec, &w_spec, &caches);
    const double train_loss = batch_loss(q_calib, logits, cfg.delta, cfg.loss);
    TraceRow row;
    row.epoch = epoch;
    row.train_loss = train_loss;
    row.heldout_loss = std::numeric_limits<double>::quiet_NaN();
    if (heldout_inputs.rows() > 0) {
      const Matrix hl = forward_pass(net, prm, heldout_inputs, &act_spec, &w_spec, nullptr);
      row.heldout_loss = batch_loss(q_heldout, hl, cfg.delta, cfg.loss);
    }
    double fsum = 0.0, wmax = 0.0;
    for (const auto& cc : caches) {
      fsum += flatness_of(cc.wt);
      wmax = std::max(wmax, cc.wt.array().abs().maxCoeff());
    }
    row.mean_flatness = fsum / double(L);
    row.max_abs_weight = wmax;
    result.trace.push_back(row);

    if (!std::isfinite(train_loss)) {
      result.diverged = true;
      break;
    }

    const double lr =
        cfg.learning_rate * 0.5 * (1.0 + std::cos(M_PI * double(epoch) / double(cfg.epochs)));

    for (Index start = 0; start < n; start += batch) {
      const Index count = std::min<Index>(batch, n - start);
      const Matrix xb = calib_inputs.middleRows(start, count);
      const Matrix qb = q_calib.middleRows(start, count);

      std::vector<LayerCache> bc;
      const Matrix yb = forward_pass(net, prm, xb, &act_spec, &w_spec, &bc);

      Matrix gy(yb.rows(), yb.cols());
      for (Index b = 0; b < yb.rows(); ++b) {
        Vector q = qb.row(b).transpose();
        const Vector p = softmax(yb.row(b).transpose());
        Vector p_used = p;
        double scale = 1.0;
        if (cfg.prediction_ema && ema_ready) {
          p_used = (1.0 - cfg.ema_decay) * p + cfg.ema_decay * ema_p.row(start + b).transpose();
          scale = 1.0 - cfg.ema_decay;
        }
        const Vector g = cfg.loss == CalibLoss::ce ? ce_gradient(q, p_used)
                                                   : rce_gradient(q, p_used, cfg.delta);
        const double dot = g.dot(p);
        gy.row(b) = scale / double(yb.rows()) * (p.array() * (g.array() - dot)).transpose();
      }

      const Grads grads = backward_pass(net, prm, bc, yb, gy, cfg.learn_rotation);
      for (std::size_t l = 0; l < L; ++l) {
        prm.log1[l] -= lr * grads.g1[l];
        prm.log2[l] -= lr * grads.g2[l];
        if (cfg.learn_rotation) {
          prm.skew[l] -= lr * grads.gskew[l];
          prm.rot[l] = net.pairs[l].R * cayley_orthogonal(prm.skew[l]);
        }
      }
    }

    if (cfg.prediction_ema) {
      const Matrix logits_now =
          forward_pass(net, prm, calib_inputs, &act_spec, &w_spec, nullptr);
      const Matrix p_now = softmax_rows(logits_now);
      if (!ema_ready) {
        ema_p = p_now;
        ema_ready = true;
      } else {
        ema_p = cfg.ema_decay * ema_p + (1.0 - cfg.ema_decay) * p_now;
      }
    }
  }

  result.pairs.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    result.pairs[l].lambda1 = prm.log1[l].array().exp();
    result.pairs[l].lambda2 = prm.log2[l].array().exp();
    result.pairs[l].R = prm.rot[l];
  }
  return result;
}

void save_trace_csv(const std::vector<TraceRow>& trace, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,train_loss,heldout_loss,mean_flatness,max_abs_weight\n";
  out.precision(17);
  for (const auto& r : trace)
    out << r.epoch << ',' << r.train_loss << ',' << r.heldout_loss << ','
        << r.mean_flatness << ',' << r.max_abs_weight << '\n';
}

}  // namespace bdq
