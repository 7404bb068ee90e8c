#pragma once

// Linear-kernel centered kernel alignment with the unbiased HSIC estimator,
// its minibatch form, and layerwise comparisons of two encoders.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "volssl/encoder.hpp"

namespace volssl {

using Matrix = Eigen::MatrixXd;

class DegenerateFeatures : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// K = X X^T. Rejects non-finite entries and fewer than two rows.
Matrix gram_linear(const Matrix& x);

/// Unbiased HSIC_1 of two n x n Gram matrices (n >= 4); diagonals are ignored.
double hsic_unbiased(const Matrix& k, const Matrix& l);

double cka(const Matrix& x, const Matrix& y);

/// Each of the three HSIC terms is averaged over aligned batch pairs before
/// the ratio is formed.
double minibatch_cka(const std::vector<Matrix>& xs, const std::vector<Matrix>& ys);
/// k contiguous batches of batch_size rows, in row order.
double minibatch_cka(const Matrix& x, const Matrix& y, Index k, Index batch_size);

/// Mean-pooled token features of the requested taps, one n x C matrix per tap.
/// Probes are centre-cropped or reflect-padded to the encoder input.
std::vector<Matrix> layer_features(const ParameterSet& params, const EncoderConfig& enc, const std::vector<Volume>& probes,
                                   const std::vector<int>& taps);

/// Tap ids 0..total_blocks (0 is the patch embedding).
std::vector<int> default_taps(const EncoderConfig& enc);

struct CkaOptions {
  std::vector<int> taps;       // empty: default_taps
  Index batch_size = 0;        // 0: one batch with every probe
  std::uint64_t partition_seed = 0;
  bool full_matrix = false;    // every tap of a against every tap of b
};

struct CKAMatrix {
  Matrix values;  // taps_a x taps_b, or taps x 1 for a profile
  std::vector<int> taps_a;
  std::vector<int> taps_b;
  std::vector<std::string> probe_ids;
  Index batches = 1;
  Index batch_size = 0;
  std::uint64_t partition_seed = 0;
  std::vector<Index> partition;  // probe order used for batching

  bool is_profile() const { return values.cols() == 1 && taps_b.empty(); }
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

CKAMatrix layerwise_cka(const ParameterSet& a, const ParameterSet& b, const EncoderConfig& enc, const std::vector<Volume>& probes,
                        const CkaOptions& opts = {});
/// Checkpoint form: both archives must carry the same encoder config hash.
CKAMatrix layerwise_cka(const std::filesystem::path& ckpt_a, const std::filesystem::path& ckpt_b, const std::vector<Volume>& probes,
                        const CkaOptions& opts = {});

}  // namespace volssl
