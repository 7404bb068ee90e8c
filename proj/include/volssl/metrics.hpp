#pragma once

// Dice scores, performance and modality gaps, and the paired Wilcoxon
// signed-rank test.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "volssl/volume.hpp"

namespace volssl {

/// 2|P & G| / (|P| + |G|); 1.0 when both masks are empty.
double dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
/// Dice of the binary masks {label == cls}.
double dice_for_class(std::span<const int> pred, std::span<const int> gt, int cls);

struct DiceReport {
  std::string volume_id;
  std::map<std::string, double> per_structure;
  double mean = 0.0;
  int undefined = 0;  // structures absent from both prediction and ground truth

  nlohmann::json to_json() const;
};

/// structures[k - 1] names class k; class 0 is background and not scored.
DiceReport dice_report(const LabelMap& pred, const LabelMap& gt, const std::vector<std::string>& structures,
                       const std::string& volume_id = "");

/// (acc_m - acc_ref) / acc_ref * 100.
double performance_gap(double acc_m, double acc_ref);

/// Per structure: B minus A.
std::map<std::string, double> modality_gap(const std::map<std::string, double>& dsc_a, const std::map<std::string, double>& dsc_b);

struct WilcoxonResult {
  double p = 1.0;
  double w_plus = 0.0;  // sum of ranks of positive differences
  Index n = 0;          // pairs after dropping zero differences
  bool exact = false;
  bool degenerate = false;  // every difference was zero
};

inline constexpr Index kWilcoxonExactMax = 20;

/// Two-sided paired test of a against b. Zero differences are dropped and tied
/// magnitudes receive average ranks. Exact null distribution for n <= 20,
/// normal approximation with tie correction above.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

/// Per-group arithmetic means. Every structure must belong to some group.
std::map<std::string, double> group_structures(const std::map<std::string, double>& per_structure,
                                               const std::map<std::string, std::vector<std::string>>& grouping);

/// "***", "**", "*" at 0.001 / 0.01 / 0.05, otherwise "".
std::string significance_stars(double p);

std::string dice_reports_csv(const std::vector<DiceReport>& reports);

}  // namespace volssl
