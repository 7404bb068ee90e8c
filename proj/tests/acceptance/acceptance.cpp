// Acceptance runner. Prints one PASS/FAIL line per criterion.
//
//   acceptance fast  [--out DIR]   criteria 1-6 and 9
//   acceptance smoke [--out DIR] [--config FILE] [--jobs N]   criteria 7 and 8

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include <Eigen/QR>

#include "CLI11.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "volssl/cka.hpp"
#include "volssl/experiment.hpp"
#include "volssl/finetune.hpp"
#include "volssl/metrics.hpp"
#include "volssl/phantom.hpp"
#include "volssl/pretext.hpp"

using namespace volssl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void report(int id, const std::string& name, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << " [exception: " << e.what() << "]";
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << ")" << o.detail.str() << " ["
            << std::fixed << std::setprecision(1) << secs << " s]" << std::endl;
}

Matrix gaussian(Index rows, Index cols, std::mt19937_64& gen) {
  std::normal_distribution<double> z;
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = z(gen);
  return m;
}

MethodConfig small_method(Method m) {
  MethodConfig mc;
  mc.method = m;
  mc.distill.head_output_dim = 16;
  mc.bottleneck_dim = 8;
  return mc;
}

PretextBatch tiny_batch(const MethodConfig& mc, const EncoderConfig& enc, std::uint64_t seed) {
  static const std::vector<Volume> pool = [&] {
    std::vector<Volume> p;
    for (int i = 0; i < 2; ++i) p.push_back(prepare_pretrain_volume(generate_phantom(40 + i, Modality::A, enc.input_shape).first));
    return p;
  }();
  Rng rng(seed);
  return make_pretext_batch(mc, enc, {&pool[0], &pool[1]}, rng);
}

// ---------------------------------------------------------------- 1

void gradient_suite(Outcome& o) {
  const EncoderConfig enc = encoder_preset("tiny");
  double worst = 0.0;
  int kinked = 0;
  for (Method m : all_methods()) {
    const MethodConfig mc = small_method(m);
    Rng rng(100 + static_cast<int>(m));
    TeacherStudentState st = make_state(enc, mc, rng);
    volssl::testing::generic_point(st.student, "head.", rng);
    const PretextBatch b = tiny_batch(mc, enc, 200 + static_cast<int>(m));
    Rng pick(300 + static_cast<int>(m));
    const auto r = volssl::testing::grad_check(st.student, [&] { return compute_pretext_loss(mc, enc, b, st).total; }, 12, pick);
    worst = std::max(worst, r.max_rel_error);
    kinked += r.kinked;
    o.require(r.checked >= 10 && r.max_rel_error < 1e-4, to_string(m) + " rel " + std::to_string(r.max_rel_error) + " at " + r.worst);
  }
  SegmentorConfig sc;
  sc.encoder = enc;
  sc.num_classes = 5;
  sc.decoder_base = 4;
  Rng rng(400);
  ParameterSet seg = build_segmentor(sc, rng);
  auto [v, l] = generate_phantom(41, Modality::A, enc.input_shape);
  const Volume x = prepare_finetune_volume(v);
  const LabelMap lab = task_labels(l, TaskMode::Organs);
  Rng pick(401);
  const auto r = volssl::testing::grad_check(seg, [&] { return seg_loss(segmentor_forward(seg, sc, x), lab.labels, TaskMode::Organs); }, 12, pick);
  worst = std::max(worst, r.max_rel_error);
  kinked += r.kinked;
  o.require(r.checked >= 10 && r.max_rel_error < 1e-4, "seg_loss rel " + std::to_string(r.max_rel_error) + " at " + r.worst);
  o.detail << " worst relative error " << std::scientific << std::setprecision(2) << worst << " over 10 objectives, " << kinked
           << " draws redrawn at leaky_relu kinks";
}

// ---------------------------------------------------------------- 2

void loss_identities(Outcome& o) {
  const EncoderConfig enc = encoder_preset("tiny");
  {
    const MethodConfig mc = small_method(Method::Smit);
    Rng rng(1);
    const TeacherStudentState st = make_state(enc, mc, rng);
    const PretextLoss l = loss_smit(mc, enc, tiny_batch(mc, enc, 2), st);
    const double expect = l.parts.at("mip") + 0.1 * l.parts.at("mpd") + 0.1 * l.parts.at("gtd");
    o.require(std::abs(l.total.value().item() - expect) <= 1e-12, "smit decomposition");
  }
  {
    MethodConfig mc = small_method(Method::Ibot);
    mc.lambda_g = 0.7;
    mc.lambda_p = 1.3;
    Rng rng(3);
    const TeacherStudentState st = make_state(enc, mc, rng);
    const PretextLoss l = loss_ibot(mc, enc, tiny_batch(mc, enc, 4), st);
    o.require(std::abs(l.total.value().item() - (0.7 * l.parts.at("global") + 1.3 * l.parts.at("patch"))) <= 1e-12, "ibot decomposition");
  }
  {
    MethodConfig mc = small_method(Method::SwinUnetrMulti);
    mc.w_rot = 0.5;
    mc.w_inpaint = 2.0;
    mc.w_contrast = 0.25;
    Rng rng(5);
    const TeacherStudentState st = make_state(enc, mc, rng);
    const PretextLoss l = loss_swinunetr_multi(mc, enc, tiny_batch(mc, enc, 6), st);
    const double expect = 0.5 * l.parts.at("rot") + 2.0 * l.parts.at("inpaint") + 0.25 * l.parts.at("contrast");
    o.require(std::abs(l.total.value().item() - expect) <= 1e-12, "swinunetr decomposition");
  }
  {
    Rng rng(7);
    const Shape3 grid{4, 4, 4}, patch{2, 2, 2};
    const MaskSpec mask = sample_mask(grid, 0.75, rng);
    const auto w = mask_voxel_weights(mask, patch);
    Tensor pred({512, 1}), target({512, 1});
    for (Index i = 0; i < 512; ++i) {
      pred[i] = rng.normal();
      target[i] = rng.normal();
    }
    const double base = loss_simmim(ag::constant(pred), target, mask, patch).value().item();
    bool invariant = true;
    for (int t = 0; t < 20; ++t) {
      Tensor p2 = pred, t2 = target;
      for (Index i = 0; i < 512; ++i)
        if (w[static_cast<std::size_t>(i)] == 0.0) {
          p2[i] += rng.normal() * 10.0;
          t2[i] -= rng.normal() * 10.0;
        }
      invariant = invariant && loss_simmim(ag::constant(p2), t2, mask, patch).value().item() == base;
    }
    o.require(invariant, "simmim unmasked invariance");
  }
  {
    const double single = loss_infonce(ag::constant(Tensor({2, 3}, std::vector<double>{0.3, -1, 2, 1, 0.5, 0})), {1, 0}, 0.5).value().item();
    o.require(std::abs(single) <= 1e-10, "infonce single pair");
    const Tensor simplex({4, 3}, std::vector<double>{1, 1, 1, 1, -1, -1, -1, 1, -1, -1, -1, 1});
    const double uniform = loss_infonce(ag::constant(simplex), {1, 0, 3, 2}, 0.5).value().item();
    o.require(std::abs(uniform - std::log(3.0)) <= 1e-10, "infonce uniform 2N=4");
    o.detail << " InfoNCE(single)=" << single << " InfoNCE(uniform)-ln3=" << uniform - std::log(3.0);
  }
}

// ---------------------------------------------------------------- 3

void masking_ema_temperature(Outcome& o) {
  Rng rng(11);
  int shapes = 0;
  for (int t = 0; t < 50; ++t) {
    const Shape3 g{2 + rng.below(7), 2 + rng.below(7), 2 + rng.below(7)};
    const Index n = volume_of(g);
    const MaskSpec m = sample_mask(g, 0.75, rng);
    std::set<Index> uniq(m.indices.begin(), m.indices.end());
    const bool ok = static_cast<Index>(m.indices.size()) == static_cast<Index>(std::floor(0.75 * static_cast<double>(n))) &&
                    uniq.size() == m.indices.size() && *uniq.rbegin() < n;
    shapes += ok;
  }
  o.require(shapes == 50, std::to_string(shapes) + "/50 mask sizes exact");

  ParameterSet student, teacher;
  Tensor s({3, 4});
  for (double& x : s.values()) x = rng.normal();
  student.add("w", s);
  teacher.add("w", Tensor({3, 4}, 0.25), false);
  ParameterSet fixed = student.clone(false);
  ema_update(fixed, student, 0.996);
  o.require(fixed.at("w").value().storage() == s.storage(), "EMA fixed point");
  ParameterSet keep = teacher.clone(false);
  ema_update(keep, student, 1.0);
  o.require(keep.at("w").value().storage() == teacher.at("w").value().storage(), "EMA m=1");
  ParameterSet copy = teacher.clone(false);
  ema_update(copy, student, 0.0);
  o.require(copy.at("w").value().storage() == s.storage(), "EMA m=0");

  const DistillConfig d;
  const double t0 = teacher_temperature(d, 0.0), tm = teacher_temperature(d, d.warmup_epochs / 2), tw = teacher_temperature(d, d.warmup_epochs);
  o.require(t0 == 0.04, "tau_t at epoch 0");
  o.require(tw == 0.07, "tau_t at warmup end");
  o.require(std::abs(tm - 0.055) <= 2.0 * std::numeric_limits<double>::epsilon() * 0.055, "tau_t at mid warmup");
  o.detail << " 50/50 masks exact; tau_t = " << std::setprecision(17) << t0 << ", " << tm << ", " << tw;
}

// ---------------------------------------------------------------- 4

void cka_suite(Outcome& o) {
  std::mt19937_64 gen(21);
  double self_err = 0.0, drift = 0.0, oracle_err = 0.0;
  for (int t = 0; t < 20; ++t) {
    const Matrix x = gaussian(32, 6, gen);
    const Matrix y = x.leftCols(4) + gaussian(32, 4, gen);
    self_err = std::max(self_err, std::abs(cka(x, x) - 1.0));
    const double base = cka(x, y);
    Eigen::HouseholderQR<Matrix> qr(gaussian(6, 6, gen));
    const Matrix q = qr.householderQ() * Matrix::Identity(6, 6);
    drift = std::max({drift, std::abs(cka(3.7 * x, y) - base), std::abs(cka(x * q, y) - base), std::abs(cka(x, -0.2 * y) - base)});
  }
  for (int t = 0; t < 100; ++t) {
    const Index n = 4 + t % 9;
    const Matrix x = gaussian(n, 3, gen);
    const Matrix y = gaussian(n, 5, gen) + x * gaussian(3, 5, gen);
    oracle_err = std::max(oracle_err, std::abs(cka(x, y) - volssl::testing::cka_brute_force(x, y)));
  }
  o.require(self_err <= 1e-10, "cka(X,X)");
  o.require(drift < 1e-8, "invariance drift");
  o.require(oracle_err < 1e-9, "oracle equality");

  double sum = 0.0, sq = 0.0;
  const int trials = 1000;
  for (int t = 0; t < trials; ++t) {
    const double h = hsic_unbiased(gram_linear(gaussian(64, 4, gen)), gram_linear(gaussian(64, 4, gen)));
    sum += h;
    sq += h * h;
  }
  const double mean = sum / trials;
  const double se = std::sqrt((sq / trials - mean * mean) / trials);
  o.require(std::abs(mean) <= 3.0 * se, "HSIC Monte-Carlo mean");

  int close = 0;
  for (int t = 0; t < 100; ++t) {
    const Matrix x = gaussian(64, 64, gen);
    const Matrix y = x * gaussian(64, 64, gen) / 8.0 + 0.5 * gaussian(64, 64, gen);
    close += std::abs(minibatch_cka(x, y, 8, 8) - cka(x, y)) < 0.05;
  }
  o.require(close >= 95, "minibatch concentration");
  o.detail << std::scientific << std::setprecision(2) << " self " << self_err << ", drift " << drift << ", oracle " << oracle_err
           << ", HSIC mean " << mean << " (SE " << se << "), minibatch " << close << "/100";
}

// ---------------------------------------------------------------- 5

void metrics_oracles(Outcome& o) {
  std::mt19937_64 gen(31);
  std::bernoulli_distribution coin(0.4);
  int dice_ok = 0;
  for (int t = 0; t < 100; ++t) {
    std::vector<std::uint8_t> a(200), b(200);
    for (auto& x : a) x = coin(gen);
    for (auto& x : b) x = coin(gen);
    dice_ok += dice(a, b) == volssl::testing::dice_by_counting(a, b);
  }
  o.require(dice_ok == 100, "dice oracle");

  std::normal_distribution<double> z;
  int wil_ok = 0, instances = 0;
  while (instances < 100) {
    const int n = 5 + instances % 6;
    std::vector<double> a(n), b(n);
    for (int i = 0; i < n; ++i) {
      a[i] = std::round(z(gen) * 3.0) / 3.0;
      b[i] = std::round((z(gen) + 0.4) * 3.0) / 3.0;
    }
    int nz = 0;
    for (int i = 0; i < n; ++i) nz += a[i] != b[i];
    if (nz < 5) continue;
    ++instances;
    wil_ok += std::abs(wilcoxon_signed_rank(a, b).p - volssl::testing::wilcoxon_enumerated(a, b)) <= 1e-12;
  }
  o.require(wil_ok == 100, "wilcoxon oracle");

  std::vector<double> ps;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> a(20), b(20);
    for (int i = 0; i < 20; ++i) {
      a[i] = z(gen);
      b[i] = z(gen);
    }
    ps.push_back(wilcoxon_signed_rank(a, b).p);
  }
  const double ks = volssl::testing::ks_uniform(ps);
  o.require(ks < 0.05, "null uniformity");

  o.require(performance_gap(0.8, 0.8) == 0.0, "gap identity");
  o.require(std::abs(performance_gap(0.72, 0.80) + 10.0) < 1e-12, "gap -10%");
  o.require(std::round(performance_gap(0.82, 0.87) * 100.0) / 100.0 == -5.75, "gap -5.75%");
  o.detail << " dice " << dice_ok << "/100, wilcoxon " << wil_ok << "/100, KS " << std::setprecision(4) << ks;
}

// ---------------------------------------------------------------- 6

void inference_contract(Outcome& o) {
  Rng rng(41);
  int covered = 0;
  for (int t = 0; t < 20; ++t) {
    const Shape3 shape{16 + rng.below(30), 16 + rng.below(30), 16 + rng.below(30)};
    const double overlap = rng.uniform(0.0, 0.9);
    const auto cov = coverage_map(shape, {16, 16, 16}, overlap);
    covered += *std::min_element(cov.begin(), cov.end()) >= 1;
  }
  o.require(covered == 20, std::to_string(covered) + "/20 fully covered");
  o.require(window_starts(32, 16, 0.5) == std::vector<Index>{0, 8, 16}, "three starts on a 2x axis");

  SegmentorConfig sc;
  sc.encoder = encoder_preset("tiny");
  sc.decoder_base = 4;
  Rng init(42);
  const ParameterSet ps = build_segmentor(sc, init);
  const Volume v = prepare_finetune_volume(generate_phantom(43, Modality::B, sc.encoder.input_shape).first);
  const Tensor direct = segmentor_forward(ps, sc, v).value();
  o.require(sliding_window_logits(ps, sc, v, 0.5).storage() == direct.storage(), "single window equals forward");
  o.detail << " " << covered << "/20 coverage, starts {0,8,16}";
}

// ---------------------------------------------------------------- 9

json repro_config() {
  return json::parse(R"({
    "schema_version": 1,
    "seed": 5,
    "dataset": {"shape": [20, 20, 20], "pretrain": 8, "train": 4, "val": 2, "test": 5},
    "methods": ["simmim", "dino"],
    "encoder": "tiny",
    "pretrain": {"steps": 4, "batch_size": 2, "warmup_steps": 1},
    "finetune": {"epochs": 3, "validate_every": 1, "batch_size": 2, "lr": 1e-3},
    "shots": [2, "full"],
    "seeds": [0, 1],
    "decoder_base": 4,
    "analysis": {"cka_probes": 4, "cka_shots": 2}
  })");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void reproducibility(Outcome& o, const fs::path& root) {
  const ExperimentConfig cfg = ExperimentConfig::from_json(repro_config());
  std::vector<std::string> bytes;
  for (const char* name : {"first", "second"}) {
    const fs::path d = root / "repro" / name;
    fs::remove_all(d);
    run_experiment(cfg, d);
    bytes.push_back(slurp(d / "report.json"));
  }
  o.require(!bytes[0].empty() && bytes[0] == bytes[1], "report bytes differ");
  o.detail << " " << bytes[0].size() << " identical bytes";
}

// ---------------------------------------------------------------- 7 and 8

json smoke_config() {
  return json::parse(R"({
    "schema_version": 1,
    "seed": 7,
    "dataset": {"shape": [32, 32, 32], "pretrain": 200, "train": 40, "val": 10, "test": 20, "modalities": ["A", "B"]},
    "methods": "all",
    "encoder": "desk-16",
    "pretrain": {"steps": 300, "batch_size": 2, "warmup_steps": 20, "lr": 5e-4},
    "finetune": {"epochs": 200, "patience": 20, "validate_every": 5, "batch_size": 3, "lr": 2e-4, "val_overlap": 0.0},
    "tasks": ["organs"],
    "shots": [5],
    "seeds": [0, 1, 2],
    "test_overlap": 0.5,
    "analysis": {"cka": true, "gaps": true, "wilcoxon": true, "cka_probes": 32, "cka_shots": 5, "cka_task": "organs", "cka_modality": "A"}
  })");
}

void ordinal_smoke(Outcome& o, const json& report) {
  for (const auto& cell : report.at("cells")) {
    const json& models = cell.at("models");
    const double scratch = models.at("scratch").at("mean").get<double>();
    o.detail << " " << cell.at("modality").get<std::string>() << ": scratch " << std::fixed << std::setprecision(4) << scratch;
    for (const char* m : {"simmim", "smit"}) {
      const double v = models.at(m).at("mean").get<double>();
      o.detail << ", " << m << " " << v;
      o.require(v >= scratch, std::string(m) + " below scratch on modality " + cell.at("modality").get<std::string>());
    }
    o.detail << ";";
  }
}

void feature_reuse(Outcome& o, const json& report) {
  int checked = 0;
  for (const auto& [method, s] : report.at("cka_summary").items()) {
    const double ft = s.at("mean_finetuned").get<double>();
    const double rnd = s.at("mean_random").get<double>();
    o.detail << " " << method << " " << std::fixed << std::setprecision(3) << ft << " vs " << rnd << ";";
    o.require(ft >= rnd, method + " fine-tuned CKA below random");
    ++checked;
  }
  o.require(checked > 0, "no CKA results");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string mode;
  std::string out = "acceptance_out";
  std::string config;
  int jobs = 1;
  app.add_option("mode", mode, "fast or smoke")->required()->check(CLI::IsMember({"fast", "smoke"}));
  app.add_option("--out", out, "working directory");
  app.add_option("--config", config, "smoke experiment config (default: built-in)");
  app.add_option("--jobs", jobs, "parallel jobs for the smoke run");
  CLI11_PARSE(app, argc, argv);
  const fs::path root(out);
  fs::create_directories(root);

  if (mode == "fast") {
    report(1, "loss gradient suite", gradient_suite);
    report(2, "loss identities", loss_identities);
    report(3, "masking, EMA and teacher temperature", masking_ema_temperature);
    report(4, "CKA suite", cka_suite);
    report(5, "metrics oracles", metrics_oracles);
    report(6, "inference contract", inference_contract);
    report(9, "reproducibility", [&](Outcome& o) { reproducibility(o, root); });
  } else {
    json report_json;
    bool ran = false;
    std::string error;
    try {
      const ExperimentConfig cfg = ExperimentConfig::from_json(config.empty() ? smoke_config() : json::parse(slurp(config)));
      RunOptions opts;
      opts.resume = true;
      opts.jobs = jobs;
      report_json = run_experiment(cfg, root / "smoke", opts);
      ran = true;
    } catch (const std::exception& e) {
      error = e.what();
    }
    report(7, "ordinal smoke benchmark", [&](Outcome& o) {
      if (!ran) throw std::runtime_error(error);
      ordinal_smoke(o, report_json);
    });
    report(8, "feature reuse", [&](Outcome& o) {
      if (!ran) throw std::runtime_error(error);
      feature_reuse(o, report_json);
    });
  }
  return failures == 0 ? 0 : 1;
}
