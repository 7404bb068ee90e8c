#include "volssl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace volssl {

using nlohmann::json;

double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("dice: shape mismatch (" + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()) + " voxels)");
  }
  std::size_t inter = 0, p = 0, g = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    p += a;
    g += b;
    inter += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

double dice_for_class(std::span<const int> pred, std::span<const int> gt, int cls) {
  std::vector<std::uint8_t> a(pred.size()), b(gt.size());
  for (std::size_t i = 0; i < pred.size(); ++i) a[i] = pred[i] == cls;
  for (std::size_t i = 0; i < gt.size(); ++i) b[i] = gt[i] == cls;
  return dice(a, b);
}

json DiceReport::to_json() const {
  return json{{"volume_id", volume_id}, {"per_structure", per_structure}, {"mean", mean}, {"undefined", undefined}};
}

DiceReport dice_report(const LabelMap& pred, const LabelMap& gt, const std::vector<std::string>& structures,
                       const std::string& volume_id) {
  if (pred.shape != gt.shape) throw std::invalid_argument("dice_report: shape " + to_string(pred.shape) + " vs " + to_string(gt.shape));
  if (structures.empty()) throw std::invalid_argument("dice_report: no structures");
  DiceReport r;
  r.volume_id = volume_id;
  for (std::size_t k = 0; k < structures.size(); ++k) {
    const int cls = static_cast<int>(k) + 1;
    const bool absent = std::none_of(pred.labels.begin(), pred.labels.end(), [&](int l) { return l == cls; }) &&
                        std::none_of(gt.labels.begin(), gt.labels.end(), [&](int l) { return l == cls; });
    r.undefined += absent;
    const double d = dice_for_class(pred.labels, gt.labels, cls);
    r.per_structure[structures[k]] = d;
    r.mean += d;
  }
  r.mean /= static_cast<double>(structures.size());
  return r;
}

double performance_gap(double acc_m, double acc_ref) {
  if (!(acc_ref > 0.0)) throw std::invalid_argument("performance_gap: reference accuracy must be positive");
  return (acc_m - acc_ref) / acc_ref * 100.0;
}

std::map<std::string, double> modality_gap(const std::map<std::string, double>& dsc_a, const std::map<std::string, double>& dsc_b) {
  std::vector<std::string> diff;
  for (const auto& [k, v] : dsc_a)
    if (!dsc_b.count(k)) diff.push_back(k);
  for (const auto& [k, v] : dsc_b)
    if (!dsc_a.count(k)) diff.push_back(k);
  if (!diff.empty()) {
    std::string msg = "modality_gap: structure keys differ:";
    for (const auto& k : diff) msg += " " + k;
    throw std::invalid_argument(msg);
  }
  std::map<std::string, double> out;
  for (const auto& [k, v] : dsc_a) out[k] = dsc_b.at(k) - v;
  return out;
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("wilcoxon: samples must be paired (equal length)");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i] - b[i];
    if (!std::isfinite(x)) throw std::invalid_argument("wilcoxon: non-finite difference");
    if (x != 0.0) d.push_back(x);
  }
  WilcoxonResult r;
  r.n = static_cast<Index>(d.size());
  if (d.empty()) {
    r.degenerate = true;
    return r;
  }
  if (r.n < 5) throw std::invalid_argument("wilcoxon: need at least 5 non-zero differences, got " + std::to_string(r.n));

  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
  // Ranks are doubled so tied averages stay integral.
  std::vector<Index> rank2(d.size());
  double tie_term = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const auto t = static_cast<Index>(j - i + 1);
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = static_cast<Index>(i + j + 2);
    tie_term += static_cast<double>(t * t * t - t);
    i = j + 1;
  }
  Index w2 = 0, total2 = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    total2 += rank2[i];
    if (d[i] > 0) w2 += rank2[i];
  }
  r.w_plus = static_cast<double>(w2) / 2.0;
  const auto n = static_cast<double>(r.n);

  if (r.n <= kWilcoxonExactMax) {
    r.exact = true;
    // Number of sign assignments reaching each doubled rank sum.
    std::vector<double> count(static_cast<std::size_t>(total2 + 1), 0.0);
    count[0] = 1.0;
    Index reach = 0;
    for (Index rk : rank2) {
      for (Index s = reach; s >= 0; --s)
        if (count[s] != 0.0) count[s + rk] += count[s];
      reach += rk;
    }
    const double all = std::ldexp(1.0, static_cast<int>(r.n));
    double lower = 0.0, upper = 0.0;
    for (Index s = 0; s <= total2; ++s) {
      if (s <= w2) lower += count[s];
      if (s >= w2) upper += count[s];
    }
    r.p = std::min(1.0, 2.0 * std::min(lower, upper) / all);
    return r;
  }
  const double mean = n * (n + 1.0) / 4.0;
  const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
  if (var <= 0.0) {
    r.p = 1.0;
    return r;
  }
  const double z = (r.w_plus - mean) / std::sqrt(var);
  r.p = std::min(1.0, std::erfc(std::abs(z) / std::sqrt(2.0)));
  return r;
}

std::map<std::string, double> group_structures(const std::map<std::string, double>& per_structure,
                                               const std::map<std::string, std::vector<std::string>>& grouping) {
  std::set<std::string> covered;
  std::map<std::string, double> out;
  for (const auto& [group, members] : grouping) {
    if (members.empty()) throw std::invalid_argument("group_structures: group '" + group + "' is empty");
    double s = 0.0;
    for (const auto& m : members) {
      auto it = per_structure.find(m);
      if (it == per_structure.end()) throw std::invalid_argument("group_structures: unknown structure '" + m + "'");
      s += it->second;
      covered.insert(m);
    }
    out[group] = s / static_cast<double>(members.size());
  }
  for (const auto& [k, v] : per_structure) {
    if (!covered.count(k)) throw std::invalid_argument("group_structures: structure '" + k + "' not covered by any group");
  }
  return out;
}

std::string significance_stars(double p) {
  if (p < 0.001) return "***";
  if (p < 0.01) return "**";
  if (p < 0.05) return "*";
  return "";
}

std::string dice_reports_csv(const std::vector<DiceReport>& reports) {
  std::ostringstream os;
  os.precision(17);
  os << "volume_id,structure,dice\n";
  for (const auto& r : reports) {
    for (const auto& [k, v] : r.per_structure) os << r.volume_id << ',' << k << ',' << v << '\n';
    os << r.volume_id << ",mean," << r.mean << '\n';
  }
  return os.str();
}

}  // namespace volssl
