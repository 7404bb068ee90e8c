#include "volssl/cka.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "volssl/checkpoint.hpp"
#include "volssl/finetune.hpp"

namespace volssl {

using nlohmann::json;

Matrix gram_linear(const Matrix& x) {
  if (x.rows() < 2) throw std::invalid_argument("gram_linear: need at least 2 samples");
  if (!x.allFinite()) throw std::invalid_argument("gram_linear: non-finite feature entries");
  return x * x.transpose();
}

namespace {

struct HsicTerms {
  double value = 0.0;
  double scale = 0.0;  // magnitude of the contributing terms, for degeneracy checks
};

HsicTerms hsic_terms(const Matrix& k, const Matrix& l) {
  const Index n = k.rows();
  if (k.cols() != n || l.rows() != n || l.cols() != n) throw std::invalid_argument("hsic_unbiased: Gram matrices must be n x n and aligned");
  if (n < 4) throw std::invalid_argument("hsic_unbiased: need n >= 4 samples, got " + std::to_string(n));
  Matrix kt = k, lt = l;
  kt.diagonal().setZero();
  lt.diagonal().setZero();
  const double nd = static_cast<double>(n);
  const double trace = kt.cwiseProduct(lt).sum();
  const Eigen::VectorXd k1 = kt.rowwise().sum(), l1 = lt.rowwise().sum();
  const double second = k1.sum() * l1.sum() / ((nd - 1.0) * (nd - 2.0));
  const double third = 2.0 / (nd - 2.0) * k1.dot(l1);
  const double denom = nd * (nd - 3.0);
  return {(trace + second - third) / denom, (std::abs(trace) + std::abs(second) + std::abs(third)) / denom};
}

// Unbiased HSIC is unchanged by feature translation; centring first keeps large
// common offsets from cancelling catastrophically.
Matrix centered(const Matrix& x) { return x.rowwise() - x.colwise().mean(); }

double cka_from_means(double xy, double xx, const HsicTerms& xx_scale, double yy, const HsicTerms& yy_scale) {
  if (xx <= 1e-12 * xx_scale.scale || yy <= 1e-12 * yy_scale.scale) {
    throw DegenerateFeatures("cka: degenerate features (self-HSIC is zero)");
  }
  return xy / std::sqrt(xx * yy);
}

}  // namespace

double hsic_unbiased(const Matrix& k, const Matrix& l) { return hsic_terms(k, l).value; }

double minibatch_cka(const std::vector<Matrix>& xs, const std::vector<Matrix>& ys) {
  if (xs.empty() || xs.size() != ys.size()) throw std::invalid_argument("minibatch_cka: streams must be nonempty and aligned");
  double xy = 0.0, xx = 0.0, yy = 0.0;
  HsicTerms sx{}, sy{};
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].rows() != ys[i].rows()) throw std::invalid_argument("minibatch_cka: batch " + std::to_string(i) + " is misaligned");
    if (xs[i].rows() < 4) throw std::invalid_argument("minibatch_cka: batch size must be >= 4");
    const Matrix k = gram_linear(centered(xs[i])), l = gram_linear(centered(ys[i]));
    const HsicTerms a = hsic_terms(k, k), b = hsic_terms(l, l);
    xy += hsic_terms(k, l).value;
    xx += a.value;
    yy += b.value;
    sx.scale += a.scale;
    sy.scale += b.scale;
  }
  const auto m = static_cast<double>(xs.size());
  return cka_from_means(xy / m, xx / m, sx, yy / m, sy);
}

double cka(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) throw std::invalid_argument("cka: sample counts differ");
  return minibatch_cka(std::vector<Matrix>{x}, std::vector<Matrix>{y});
}

double minibatch_cka(const Matrix& x, const Matrix& y, Index k, Index batch_size) {
  if (x.rows() != y.rows()) throw std::invalid_argument("minibatch_cka: streams are misaligned");
  if (k < 1 || batch_size < 4) throw std::invalid_argument("minibatch_cka: need k >= 1 and batch_size >= 4");
  if (k * batch_size > x.rows()) throw std::invalid_argument("minibatch_cka: k * batch_size exceeds the sample count");
  std::vector<Matrix> xs, ys;
  for (Index i = 0; i < k; ++i) {
    xs.push_back(x.middleRows(i * batch_size, batch_size));
    ys.push_back(y.middleRows(i * batch_size, batch_size));
  }
  return minibatch_cka(xs, ys);
}

std::vector<int> default_taps(const EncoderConfig& enc) {
  std::vector<int> t(static_cast<std::size_t>(enc.total_blocks() + 1));
  std::iota(t.begin(), t.end(), 0);
  return t;
}

namespace {

Volume fit_probe(const Volume& v, const Shape3& target) {
  Shape3 padded{};
  for (int a = 0; a < 3; ++a) padded[a] = std::max(v.shape()[a], target[a]);
  const Volume p = padded == v.shape() ? v : reflect_pad(v, padded);
  Shape3 origin{};
  for (int a = 0; a < 3; ++a) origin[a] = (padded[a] - target[a]) / 2;
  return origin == Shape3{0, 0, 0} && padded == target ? p : crop(p, origin, target);
}

void check_taps(const EncoderConfig& enc, const std::vector<int>& taps) {
  const int max_tap = enc.total_blocks();
  for (int t : taps) {
    if (t < 0 || t > max_tap) throw std::out_of_range("tap " + std::to_string(t) + " outside [0, " + std::to_string(max_tap) + "]");
  }
}

}  // namespace

std::vector<Matrix> layer_features(const ParameterSet& params, const EncoderConfig& enc, const std::vector<Volume>& probes,
                                   const std::vector<int>& taps) {
  check_taps(enc, taps);
  NoGradGuard ng;
  std::vector<Matrix> out(taps.size());
  for (std::size_t p = 0; p < probes.size(); ++p) {
    const Volume v = fit_probe(probes[p], enc.input_shape);
    const EncoderOutput f = encode(ag::constant(v.as_column()), v.shape(), enc, params);
    for (std::size_t t = 0; t < taps.size(); ++t) {
      const Tensor pooled = ag::mean_rows(f.taps[static_cast<std::size_t>(taps[t])].tokens).value();
      if (p == 0) out[t].resize(static_cast<Index>(probes.size()), pooled.cols());
      for (Index c = 0; c < pooled.cols(); ++c) out[t](static_cast<Index>(p), c) = pooled[c];
    }
  }
  return out;
}

CKAMatrix layerwise_cka(const ParameterSet& a, const ParameterSet& b, const EncoderConfig& enc, const std::vector<Volume>& probes,
                        const CkaOptions& opts) {
  const std::vector<int> taps = opts.taps.empty() ? default_taps(enc) : opts.taps;
  check_taps(enc, taps);
  const auto n = static_cast<Index>(probes.size());
  if (n < 4) throw std::invalid_argument("layerwise_cka: need at least 4 probes");
  const Index bs = opts.batch_size == 0 ? n : opts.batch_size;
  if (bs < 4 || bs > n) throw std::invalid_argument("layerwise_cka: batch size must lie in [4, probes]");
  const Index k = n / bs;

  CKAMatrix m;
  m.taps_a = taps;
  if (opts.full_matrix) m.taps_b = taps;
  for (const auto& p : probes) m.probe_ids.push_back(p.id());
  m.batches = k;
  m.batch_size = bs;
  m.partition_seed = opts.partition_seed;
  m.partition.resize(static_cast<std::size_t>(n));
  std::iota(m.partition.begin(), m.partition.end(), Index{0});
  if (k > 1) {
    Rng rng(opts.partition_seed);
    shuffle(m.partition, rng);
  }

  auto reorder = [&](const Matrix& x) {
    Matrix r(k * bs, x.cols());
    for (Index i = 0; i < k * bs; ++i) r.row(i) = x.row(m.partition[static_cast<std::size_t>(i)]);
    return r;
  };
  std::vector<Matrix> fa = layer_features(a, enc, probes, taps), fb = layer_features(b, enc, probes, taps);
  for (auto& x : fa) x = reorder(x);
  for (auto& x : fb) x = reorder(x);
  const auto t = static_cast<Index>(taps.size());
  m.values = Matrix::Zero(t, opts.full_matrix ? t : 1);
  for (Index i = 0; i < t; ++i) {
    if (opts.full_matrix) {
      for (Index j = 0; j < t; ++j) m.values(i, j) = minibatch_cka(fa[i], fb[j], k, bs);
    } else {
      m.values(i, 0) = minibatch_cka(fa[i], fb[i], k, bs);
    }
  }
  return m;
}

CKAMatrix layerwise_cka(const std::filesystem::path& ckpt_a, const std::filesystem::path& ckpt_b, const std::vector<Volume>& probes,
                        const CkaOptions& opts) {
  CheckpointManifest ma, mb;
  const ParameterSet a = load_checkpoint(ckpt_a, &ma);
  const ParameterSet b = load_checkpoint(ckpt_b, &mb);
  if (ma.config_hash != mb.config_hash) {
    throw std::invalid_argument("layerwise_cka: encoder configs differ (" + ma.config_hash + " vs " + mb.config_hash + ")");
  }
  return layerwise_cka(a, b, EncoderConfig::from_json(ma.encoder_config), probes, opts);
}

std::string CKAMatrix::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  if (taps_b.empty()) {
    os << "tap,cka\n";
    for (std::size_t i = 0; i < taps_a.size(); ++i) os << taps_a[i] << ',' << values(static_cast<Index>(i), 0) << '\n';
    return os.str();
  }
  os << "tap_a,tap_b,cka\n";
  for (std::size_t i = 0; i < taps_a.size(); ++i)
    for (std::size_t j = 0; j < taps_b.size(); ++j)
      os << taps_a[i] << ',' << taps_b[j] << ',' << values(static_cast<Index>(i), static_cast<Index>(j)) << '\n';
  return os.str();
}

json CKAMatrix::to_json() const {
  json rows = json::array();
  for (Index i = 0; i < values.rows(); ++i) {
    json r = json::array();
    for (Index j = 0; j < values.cols(); ++j) r.push_back(values(i, j));
    rows.push_back(r);
  }
  return json{{"values", rows},       {"taps_a", taps_a},         {"taps_b", taps_b},
              {"probe_ids", probe_ids}, {"batches", batches},      {"batch_size", batch_size},
              {"partition_seed", partition_seed}, {"partition", partition}};
}

}  // namespace volssl
