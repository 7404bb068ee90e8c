#include "volssl/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "volssl/checkpoint.hpp"
#include "volssl/cka.hpp"
#include "volssl/metrics.hpp"
#include "volssl/phantom.hpp"
#include "volssl/plot.hpp"

namespace volssl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::set<std::string> kTopLevelKeys{"schema_version", "seed",       "dataset",      "methods",      "include_scratch",
                                          "encoder",        "method_options", "pretrain",  "finetune",     "tasks",
                                          "shots",          "seeds",      "decoder_base", "test_overlap", "pretrain_pool_limit",
                                          "analysis",       "output_dir", "sweep"};

json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  return json::parse(is);
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << text;
  }
  fs::rename(tmp, p);
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

std::string hash_json(const json& j) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

bool job_done(const fs::path& dir, const std::string& hash) {
  const fs::path marker = dir / "done.json";
  if (!fs::exists(marker)) return false;
  try {
    return read_json(marker).value("hash", "") == hash;
  } catch (const std::exception&) {
    return false;
  }
}

void mark_done(const fs::path& dir, const std::string& hash) { write_json(dir / "done.json", json{{"hash", hash}}); }

std::mutex g_log_mutex;

void log_line(const std::string& msg) {
  std::lock_guard<std::mutex> lock(g_log_mutex);
  std::cerr << msg << std::endl;
}

struct Job {
  std::string stage;
  std::uint64_t seed = 0;
  std::function<void()> fn;
};

void run_jobs(std::vector<Job>& jobs, int workers) {
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (;;) {
      const std::size_t i = next++;
      if (i >= jobs.size()) return;
      try {
        jobs[i].fn();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
  if (n == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(jobs[i].stage, jobs[i].seed, e.what());
    }
  }
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

Index parse_shots(const json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() == "full") return 0;
    throw ConfigError("shots entries are integers or \"full\"");
  }
  const Index k = j.get<Index>();
  if (k <= 0) throw ConfigError("shot counts must be positive; use \"full\" for every training volume");
  return k;
}

json shots_json(Index k) { return k == 0 ? json("full") : json(k); }

// Ordering key with "full" last.
Index shots_key(Index k) { return k == 0 ? std::numeric_limits<Index>::max() : k; }

DatasetConfig dataset_config(const ExperimentConfig& cfg) {
  DatasetConfig d;
  d.seed = cfg.seed;
  d.shape = cfg.dataset.shape;
  if (cfg.dataset.pretrain > 0) d.splits.push_back({Split::Pretrain, cfg.dataset.pretrain_modality, cfg.dataset.pretrain, {}});
  for (Modality m : cfg.dataset.modalities) {
    d.splits.push_back({Split::Train, m, cfg.dataset.train, {}});
    d.splits.push_back({Split::Val, m, cfg.dataset.val, {}});
    d.splits.push_back({Split::Test, m, cfg.dataset.test, {}});
  }
  return d;
}

std::vector<ManifestEntry> pretrain_entries(const DatasetManifest& manifest, const ExperimentConfig& cfg) {
  std::vector<ManifestEntry> e = manifest.select(Split::Pretrain);
  std::sort(e.begin(), e.end(), [](const ManifestEntry& a, const ManifestEntry& b) { return a.pool_index < b.pool_index; });
  if (cfg.pretrain_pool_limit) e.resize(static_cast<std::size_t>(*cfg.pretrain_pool_limit));
  return e;
}

std::string cell_label(const std::string& task, const std::string& mod, const std::string& shots) { return task + "/" + mod + "/" + shots; }

}  // namespace

std::string shots_label(Index shots) { return shots == 0 ? "full" : std::to_string(shots); }

fs::path default_output_root() {
  if (const char* env = std::getenv(kOutputEnvVar); env && *env) return fs::path(env);
  return fs::path("runs");
}

// ---------------------------------------------------------------------------
// Config

std::vector<std::string> ExperimentConfig::model_names() const {
  std::vector<std::string> out;
  if (include_scratch) out.emplace_back("scratch");
  for (Method m : methods) out.push_back(to_string(m));
  return out;
}

void ExperimentConfig::validate() const {
  if (schema_version != kExperimentSchemaVersion) {
    throw ConfigError("unsupported schema_version " + std::to_string(schema_version) + " (expected " +
                      std::to_string(kExperimentSchemaVersion) + ")");
  }
  try {
    encoder.validate();
    method_options.validate();
    finetune.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (seeds.empty()) throw ConfigError("seeds must be nonempty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) throw ConfigError("seeds must be unique");
  if (shots.empty()) throw ConfigError("shots must be nonempty");
  for (std::size_t i = 1; i < shots.size(); ++i) {
    if (shots_key(shots[i]) <= shots_key(shots[i - 1])) throw ConfigError("shots must be sorted ascending without repeats, \"full\" last");
  }
  for (Index k : shots) {
    if (k > dataset.train) {
      throw ConfigError("shots " + std::to_string(k) + " exceed the " + std::to_string(dataset.train) + " training volumes per modality");
    }
  }
  if (methods.empty() && !include_scratch) throw ConfigError("no models: methods is empty and include_scratch is false");
  if (std::set<Method>(methods.begin(), methods.end()).size() != methods.size()) throw ConfigError("methods must be unique");
  if (tasks.empty()) throw ConfigError("tasks must be nonempty");
  if (dataset.modalities.empty()) throw ConfigError("dataset.modalities must be nonempty");
  if (dataset.train <= 0 || dataset.val <= 0 || dataset.test <= 0) throw ConfigError("dataset train/val/test counts must be positive");
  if (dataset.pretrain < 0) throw ConfigError("dataset.pretrain must be non-negative");
  if (!methods.empty() && dataset.pretrain == 0) throw ConfigError("pretraining methods need dataset.pretrain > 0");
  if (pretrain_pool_limit && (*pretrain_pool_limit <= 0 || *pretrain_pool_limit > dataset.pretrain)) {
    throw ConfigError("pretrain_pool_limit " + std::to_string(*pretrain_pool_limit) + " outside the generated pool of " +
                      std::to_string(dataset.pretrain));
  }
  if (pretrain.steps <= 0 || pretrain.batch_size <= 0 || pretrain.warmup_steps < 0) {
    throw ConfigError("pretrain steps and batch_size must be positive, warmup_steps non-negative");
  }
  if (decoder_base <= 0) throw ConfigError("decoder_base must be positive");
  if (!(test_overlap >= 0.0 && test_overlap < 1.0)) throw ConfigError("test_overlap must lie in [0, 1)");
  for (int a = 0; a < 3; ++a) {
    if (dataset.shape[a] < encoder.input_shape[a]) throw ConfigError("dataset shape is smaller than the encoder input on some axis");
  }
  if (analysis.cka && !methods.empty()) {
    if (std::find(shots.begin(), shots.end(), analysis.cka_shots) == shots.end()) {
      throw ConfigError("analysis.cka_shots " + shots_label(analysis.cka_shots) + " is not in the shots list");
    }
    if (std::find(tasks.begin(), tasks.end(), analysis.cka_task) == tasks.end()) throw ConfigError("analysis.cka_task is not in tasks");
    if (std::find(dataset.modalities.begin(), dataset.modalities.end(), analysis.cka_modality) == dataset.modalities.end()) {
      throw ConfigError("analysis.cka_modality is not a dataset modality");
    }
    if (analysis.cka_probes < 4 || analysis.cka_probes > dataset.pretrain) {
      throw ConfigError("analysis.cka_probes must lie in [4, dataset.pretrain]");
    }
  }
}

json ExperimentConfig::to_json() const {
  json ds{{"shape", dataset.shape},
          {"pretrain", dataset.pretrain},
          {"train", dataset.train},
          {"val", dataset.val},
          {"test", dataset.test},
          {"modalities", json::array()},
          {"pretrain_modality", to_string(dataset.pretrain_modality)}};
  for (Modality m : dataset.modalities) ds["modalities"].push_back(to_string(m));
  json meths = json::array();
  for (Method m : methods) meths.push_back(to_string(m));
  json mo = method_options.to_json();
  mo.erase("method");
  json ft = finetune.to_json();
  ft.erase("task");
  ft.erase("seed");
  json tk = json::array();
  for (TaskMode t : tasks) tk.push_back(to_string(t));
  json sh = json::array();
  for (Index k : shots) sh.push_back(shots_json(k));
  json j{{"schema_version", schema_version},
         {"seed", seed},
         {"dataset", ds},
         {"methods", meths},
         {"include_scratch", include_scratch},
         {"encoder", encoder.to_json()},
         {"method_options", mo},
         {"pretrain",
          {{"steps", pretrain.steps},
           {"batch_size", pretrain.batch_size},
           {"warmup_steps", pretrain.warmup_steps},
           {"lr", pretrain.optimizer.lr},
           {"beta1", pretrain.optimizer.beta1},
           {"beta2", pretrain.optimizer.beta2},
           {"eps", pretrain.optimizer.eps},
           {"weight_decay", pretrain.optimizer.weight_decay},
           {"clip_norm", pretrain.optimizer.clip_norm}}},
         {"finetune", ft},
         {"tasks", tk},
         {"shots", sh},
         {"seeds", seeds},
         {"decoder_base", decoder_base},
         {"test_overlap", test_overlap},
         {"analysis",
          {{"cka", analysis.cka},
           {"gaps", analysis.gaps},
           {"wilcoxon", analysis.wilcoxon},
           {"cka_probes", analysis.cka_probes},
           {"cka_batch_size", analysis.cka_batch_size},
           {"cka_shots", shots_json(analysis.cka_shots)},
           {"cka_task", to_string(analysis.cka_task)},
           {"cka_modality", to_string(analysis.cka_modality)}}}};
  j["encoder"]["preset"] = encoder_preset;
  if (pretrain_pool_limit) j["pretrain_pool_limit"] = *pretrain_pool_limit;
  if (!output_dir.empty()) j["output_dir"] = output_dir;
  if (!sweep.is_null()) j["sweep"] = sweep;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!kTopLevelKeys.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  ExperimentConfig c;
  try {
    c.schema_version = j.at("schema_version").get<int>();
    c.seed = j.value("seed", c.seed);
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      if (d.contains("shape")) c.dataset.shape = d.at("shape").get<Shape3>();
      c.dataset.pretrain = d.value("pretrain", c.dataset.pretrain);
      c.dataset.train = d.value("train", c.dataset.train);
      c.dataset.val = d.value("val", c.dataset.val);
      c.dataset.test = d.value("test", c.dataset.test);
      if (d.contains("modalities")) {
        c.dataset.modalities.clear();
        for (const auto& m : d.at("modalities")) c.dataset.modalities.push_back(modality_from_string(m.get<std::string>()));
      }
      if (d.contains("pretrain_modality")) c.dataset.pretrain_modality = modality_from_string(d.at("pretrain_modality").get<std::string>());
    }
    if (j.contains("methods")) {
      const json& m = j.at("methods");
      if (m.is_string() && m.get<std::string>() == "all") {
        c.methods = all_methods();
      } else {
        for (const auto& s : m) c.methods.push_back(method_from_string(s.get<std::string>()));
      }
    }
    c.include_scratch = j.value("include_scratch", c.include_scratch);
    json enc = j.contains("encoder") ? j.at("encoder") : json(c.encoder_preset);
    if (enc.is_string()) enc = json{{"preset", enc.get<std::string>()}};
    c.encoder_preset = enc.value("preset", std::string("custom"));
    c.encoder = EncoderConfig::from_json(enc);
    if (j.contains("method_options")) {
      json mo = j.at("method_options");
      mo["method"] = "simmim";
      c.method_options = MethodConfig::from_json(mo);
    }
    if (j.contains("pretrain")) {
      const json& p = j.at("pretrain");
      c.pretrain.steps = p.value("steps", c.pretrain.steps);
      c.pretrain.batch_size = p.value("batch_size", c.pretrain.batch_size);
      c.pretrain.warmup_steps = p.value("warmup_steps", c.pretrain.warmup_steps);
      c.pretrain.optimizer.lr = p.value("lr", c.pretrain.optimizer.lr);
      c.pretrain.optimizer.beta1 = p.value("beta1", c.pretrain.optimizer.beta1);
      c.pretrain.optimizer.beta2 = p.value("beta2", c.pretrain.optimizer.beta2);
      c.pretrain.optimizer.eps = p.value("eps", c.pretrain.optimizer.eps);
      c.pretrain.optimizer.weight_decay = p.value("weight_decay", c.pretrain.optimizer.weight_decay);
      c.pretrain.optimizer.clip_norm = p.value("clip_norm", c.pretrain.optimizer.clip_norm);
    }
    if (j.contains("finetune")) {
      json f = j.at("finetune");
      f.erase("task");
      f.erase("seed");
      c.finetune = FinetuneConfig::from_json(f);
    }
    if (j.contains("tasks")) {
      c.tasks.clear();
      for (const auto& t : j.at("tasks")) c.tasks.push_back(task_from_string(t.get<std::string>()));
    }
    if (j.contains("shots")) {
      c.shots.clear();
      for (const auto& s : j.at("shots")) c.shots.push_back(parse_shots(s));
    }
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.decoder_base = j.value("decoder_base", c.decoder_base);
    c.test_overlap = j.value("test_overlap", c.test_overlap);
    if (j.contains("pretrain_pool_limit")) c.pretrain_pool_limit = j.at("pretrain_pool_limit").get<Index>();
    if (j.contains("analysis")) {
      const json& a = j.at("analysis");
      c.analysis.cka = a.value("cka", c.analysis.cka);
      c.analysis.gaps = a.value("gaps", c.analysis.gaps);
      c.analysis.wilcoxon = a.value("wilcoxon", c.analysis.wilcoxon);
      c.analysis.cka_probes = a.value("cka_probes", c.analysis.cka_probes);
      c.analysis.cka_batch_size = a.value("cka_batch_size", c.analysis.cka_batch_size);
      if (a.contains("cka_shots")) c.analysis.cka_shots = parse_shots(a.at("cka_shots"));
      if (a.contains("cka_task")) c.analysis.cka_task = task_from_string(a.at("cka_task").get<std::string>());
      if (a.contains("cka_modality")) c.analysis.cka_modality = modality_from_string(a.at("cka_modality").get<std::string>());
    }
    c.output_dir = j.value("output_dir", std::string());
    if (j.contains("sweep")) c.sweep = j.at("sweep");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& file) {
  json j;
  try {
    j = read_json(file);
  } catch (const std::exception& e) {
    throw ConfigError("cannot load config " + file.string() + ": " + e.what());
  }
  return from_json(j);
}

std::string ExperimentConfig::hash() const {
  json j = to_json();
  j.erase("output_dir");
  return hash_json(j);
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

struct Paths {
  fs::path root;
  fs::path data;
  fs::path pretrain(const std::string& method, std::uint64_t seed) const {
    return root / "pretrain" / method / ("seed" + std::to_string(seed));
  }
  fs::path finetune(const std::string& model, TaskMode t, Modality m, Index shots, std::uint64_t seed) const {
    return root / "finetune" / model / (to_string(t) + "-" + to_string(m)) / ("shots" + shots_label(shots)) / ("seed" + std::to_string(seed));
  }
  fs::path cka(const std::string& method, std::uint64_t seed) const { return root / "cka" / method / ("seed" + std::to_string(seed)); }
};

std::string pretrain_hash(const ExperimentConfig& cfg, const std::string& data_hash, Method m, std::uint64_t seed) {
  MethodConfig mc = cfg.method_options;
  mc.method = m;
  json j{{"stage", "pretrain"},
         {"data", data_hash},
         {"encoder", cfg.encoder.to_json()},
         {"method", mc.to_json()},
         {"pretrain", cfg.to_json().at("pretrain")},
         {"pool_limit", cfg.pretrain_pool_limit ? json(*cfg.pretrain_pool_limit) : json()},
         {"seed", seed}};
  return hash_json(j);
}

bool keeps_checkpoint(const ExperimentConfig& cfg, const std::string& model, TaskMode t, Modality m, Index shots) {
  return cfg.analysis.cka && model != "scratch" && t == cfg.analysis.cka_task && m == cfg.analysis.cka_modality && shots == cfg.analysis.cka_shots;
}

std::string finetune_hash(const ExperimentConfig& cfg, const std::string& data_hash, const std::string& model, const std::string& upstream,
                          TaskMode t, Modality m, Index shots, std::uint64_t seed) {
  json j{{"stage", "finetune"},
         {"data", data_hash},
         {"model", model},
         {"upstream", upstream},
         {"encoder", cfg.encoder.to_json()},
         {"finetune", cfg.to_json().at("finetune")},
         {"task", to_string(t)},
         {"modality", to_string(m)},
         {"shots", shots},
         {"seed", seed},
         {"decoder_base", cfg.decoder_base},
         {"test_overlap", cfg.test_overlap},
         {"checkpoint", keeps_checkpoint(cfg, model, t, m, shots)}};
  return hash_json(j);
}

std::vector<Volume> load_probes(const fs::path& data_dir, const DatasetManifest& manifest, Index count) {
  std::vector<ManifestEntry> e = manifest.select(Split::Pretrain);
  std::sort(e.begin(), e.end(), [](const ManifestEntry& a, const ManifestEntry& b) { return a.pool_index < b.pool_index; });
  e.resize(static_cast<std::size_t>(std::min<Index>(count, static_cast<Index>(e.size()))));
  std::vector<Volume> out;
  for (const auto& x : e) out.push_back(prepare_finetune_volume(load_entry(data_dir, x).first));
  return out;
}

std::string prepare_data(const ExperimentConfig& cfg, const fs::path& dir, bool resume) {
  const DatasetConfig dc = dataset_config(cfg);
  const std::string h = hash_json(dc.to_json());
  if (job_done(dir, h)) return h;
  if (fs::exists(dir / "done.json") && !resume) throw ConfigError("dataset in " + dir.string() + " was built from a different config");
  fs::remove_all(dir);
  log_line("[data] generating phantoms into " + dir.string());
  build_manifest(dc, dir);
  mark_done(dir, h);
  return h;
}

}  // namespace

json run_experiment(const ExperimentConfig& cfg, const fs::path& out_dir, const RunOptions& opts) {
  cfg.validate();
  const Paths paths{out_dir, opts.data_dir ? *opts.data_dir : out_dir / "data"};
  const fs::path cfg_file = out_dir / "experiment.json";
  if (fs::exists(cfg_file) && !opts.resume) {
    throw ConfigError("partial or finished prior run detected in " + out_dir.string() + "; pass --resume to continue it");
  }
  fs::create_directories(out_dir);
  json stored = cfg.to_json();
  stored.erase("output_dir");
  write_json(cfg_file, stored);

  std::string data_hash;
  try {
    data_hash = prepare_data(cfg, paths.data, opts.resume || opts.data_dir.has_value());
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("generate", cfg.seed, e.what());
  }
  const DatasetManifest manifest = DatasetManifest::load(paths.data / "manifest.json");

  // Pretraining.
  std::vector<Volume> pool;
  std::vector<Job> jobs;
  std::map<std::pair<std::string, std::uint64_t>, std::string> pre_hash;
  for (Method m : cfg.methods) {
    for (std::uint64_t seed : cfg.seeds) {
      const std::string name = to_string(m);
      const std::string h = pretrain_hash(cfg, data_hash, m, seed);
      pre_hash[{name, seed}] = h;
      const fs::path dir = paths.pretrain(name, seed);
      if (job_done(dir, h)) continue;
      jobs.push_back({"pretrain/" + name, seed, [&cfg, &pool, dir, h, m, seed, name] {
                        const auto t0 = std::chrono::steady_clock::now();
                        fs::remove_all(dir);
                        PretrainConfig pc;
                        pc.method = cfg.method_options;
                        pc.method.method = m;
                        pc.encoder = cfg.encoder;
                        pc.steps = cfg.pretrain.steps;
                        pc.batch_size = cfg.pretrain.batch_size;
                        pc.warmup_steps = cfg.pretrain.warmup_steps;
                        pc.optimizer = cfg.pretrain.optimizer;
                        pc.seed = mix_seed(seed, "pretrain/" + name);
                        const PretrainResult r = pretrain(pc, pool, dir);
                        std::vector<double> tail;
                        for (std::size_t i = r.reports.size() >= 10 ? r.reports.size() - 10 : 0; i < r.reports.size(); ++i)
                          tail.push_back(r.reports[i].total);
                        write_json(dir / "summary.json", json{{"method", name},
                                                              {"seed", seed},
                                                              {"steps", pc.steps},
                                                              {"first_loss", r.reports.front().total},
                                                              {"final_loss", mean_of(tail)}});
                        mark_done(dir, h);
                        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                        log_line("[pretrain] " + name + " seed " + std::to_string(seed) + " done in " + std::to_string(static_cast<int>(secs)) + " s");
                      }});
    }
  }
  if (!jobs.empty()) {
    for (const auto& e : pretrain_entries(manifest, cfg)) pool.push_back(prepare_pretrain_volume(load_entry(paths.data, e).first));
    run_jobs(jobs, opts.jobs);
  }
  pool.clear();
  pool.shrink_to_fit();

  // Fine-tuning and test evaluation.
  jobs.clear();
  const std::vector<std::string> models = cfg.model_names();
  std::map<std::string, std::string> ft_hash;
  for (TaskMode task : cfg.tasks) {
    for (Modality mod : cfg.dataset.modalities) {
      for (Index shots : cfg.shots) {
        for (const std::string& model : models) {
          for (std::uint64_t seed : cfg.seeds) {
            const std::string upstream = model == "scratch" ? std::string("scratch") : pre_hash.at({model, seed});
            const std::string h = finetune_hash(cfg, data_hash, model, upstream, task, mod, shots, seed);
            const fs::path dir = paths.finetune(model, task, mod, shots, seed);
            ft_hash[dir.string()] = h;
            if (job_done(dir, h)) continue;
            const fs::path ckpt = paths.pretrain(model, seed) / "checkpoint";
            jobs.push_back({"finetune/" + model + "/" + to_string(task) + "-" + to_string(mod) + "/shots" + shots_label(shots), seed,
                            [&cfg, &manifest, &paths, dir, h, model, ckpt, task, mod, shots, seed] {
                              const auto t0 = std::chrono::steady_clock::now();
                              fs::remove_all(dir);
                              const auto train = load_labeled(paths.data, select_shots(manifest, mod, shots, mix_seed(seed, "shots")), task);
                              const auto val = load_labeled(paths.data, manifest.select(Split::Val, mod), task);
                              const auto test = load_labeled(paths.data, manifest.select(Split::Test, mod), task);
                              SegmentorConfig sc;
                              sc.encoder = cfg.encoder;
                              sc.num_classes = task_classes(task);
                              sc.decoder_base = cfg.decoder_base;
                              Rng init_rng(mix_seed(seed, "segmentor"));
                              const ParameterSet init = model == "scratch" ? build_segmentor(sc, init_rng)
                                                                           : build_segmentor(sc, init_rng, std::optional<fs::path>(ckpt));
                              FinetuneConfig fc = cfg.finetune;
                              fc.task = task;
                              fc.seed = mix_seed(seed, "finetune");
                              const FinetuneResult fr = finetune(sc, init, fc, train, val, shots_label(shots));
                              std::vector<DiceReport> reports;
                              const double test_mean = evaluate_segmentor(fr.params, sc, test, cfg.test_overlap, &reports);
                              fs::create_directories(dir);
                              write_text(dir / "record.csv", fr.record.to_csv());
                              write_text(dir / "test_dice.csv", dice_reports_csv(reports));
                              json rj = json::array();
                              for (const auto& r : reports) rj.push_back(r.to_json());
                              json train_ids = json::array();
                              for (const auto& lv : train) train_ids.push_back(lv.volume.id());
                              write_json(dir / "result.json", json{{"model", model},
                                                                   {"task", to_string(task)},
                                                                   {"modality", to_string(mod)},
                                                                   {"shots", shots_label(shots)},
                                                                   {"seed", seed},
                                                                   {"train_ids", train_ids},
                                                                   {"record", fr.record.to_json()},
                                                                   {"test_mean", test_mean},
                                                                   {"test", rj}});
                              if (keeps_checkpoint(cfg, model, task, mod, shots)) {
                                CheckpointManifest cm;
                                cm.kind = "segmentor";
                                cm.config_hash = cfg.encoder.hash();
                                cm.encoder_config = cfg.encoder.to_json();
                                cm.step = fr.record.best_epoch;
                                cm.extra = json{{"model", model}, {"task", to_string(task)}, {"num_classes", sc.num_classes},
                                                {"decoder_base", sc.decoder_base}};
                                save_checkpoint(dir / "checkpoint", fr.params, cm);
                              }
                              mark_done(dir, h);
                              const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                              log_line("[finetune] " + model + " " + to_string(task) + "-" + to_string(mod) + " shots " + shots_label(shots) +
                                       " seed " + std::to_string(seed) + ": test dice " + std::to_string(test_mean) + " (" +
                                       std::to_string(static_cast<int>(secs)) + " s)");
                            }});
          }
        }
      }
    }
  }
  run_jobs(jobs, opts.jobs);

  // Layerwise CKA: pretrained vs fine-tuned descendant and vs random init.
  jobs.clear();
  if (cfg.analysis.cka && !cfg.methods.empty()) {
    std::vector<Volume> probes;
    for (Method m : cfg.methods) {
      for (std::uint64_t seed : cfg.seeds) {
        const std::string name = to_string(m);
        const fs::path ft_dir = paths.finetune(name, cfg.analysis.cka_task, cfg.analysis.cka_modality, cfg.analysis.cka_shots, seed);
        const std::string h = hash_json(json{{"stage", "cka"},
                                             {"pretrain", pre_hash.at({name, seed})},
                                             {"finetune", ft_hash.at(ft_dir.string())},
                                             {"probes", cfg.analysis.cka_probes},
                                             {"batch_size", cfg.analysis.cka_batch_size},
                                             {"seed", seed}});
        const fs::path dir = paths.cka(name, seed);
        if (job_done(dir, h)) continue;
        const fs::path pre_ckpt = paths.pretrain(name, seed) / "checkpoint";
        jobs.push_back({"cka/" + name, seed, [&cfg, &probes, dir, h, pre_ckpt, ft_dir, name, seed] {
                          fs::remove_all(dir);
                          const ParameterSet pre = load_checkpoint(pre_ckpt);
                          const ParameterSet ft = load_checkpoint(ft_dir / "checkpoint");
                          Rng rng(mix_seed(seed, "cka-random"));
                          const ParameterSet rnd = init_encoder(cfg.encoder, rng);
                          CkaOptions o;
                          o.batch_size = cfg.analysis.cka_batch_size;
                          o.partition_seed = mix_seed(seed, "cka-partition");
                          const CKAMatrix a = layerwise_cka(pre, ft, cfg.encoder, probes, o);
                          const CKAMatrix b = layerwise_cka(pre, rnd, cfg.encoder, probes, o);
                          fs::create_directories(dir);
                          write_text(dir / "finetuned.csv", a.to_csv());
                          write_text(dir / "random.csv", b.to_csv());
                          std::vector<double> fa, fb;
                          for (Index i = 0; i < a.values.rows(); ++i) fa.push_back(a.values(i, 0));
                          for (Index i = 0; i < b.values.rows(); ++i) fb.push_back(b.values(i, 0));
                          write_json(dir / "cka.json", json{{"method", name},
                                                            {"seed", seed},
                                                            {"taps", a.taps_a},
                                                            {"finetuned", fa},
                                                            {"random", fb},
                                                            {"mean_finetuned", mean_of(fa)},
                                                            {"mean_random", mean_of(fb)},
                                                            {"detail_finetuned", a.to_json()},
                                                            {"detail_random", b.to_json()}});
                          mark_done(dir, h);
                          log_line("[cka] " + name + " seed " + std::to_string(seed) + ": finetuned " + std::to_string(mean_of(fa)) + ", random " +
                                   std::to_string(mean_of(fb)));
                        }});
      }
    }
    if (!jobs.empty()) {
      probes = load_probes(paths.data, manifest, cfg.analysis.cka_probes);
      run_jobs(jobs, opts.jobs);
    }
  }

  json report;
  try {
    report = assemble_report(cfg, out_dir);
    write_json(out_dir / "report.json", report);
    if (opts.plots) {
      const PlotSummary ps = emit_plots(report, out_dir / "plots");
      for (const auto& n : ps.notices) log_line("[plots] " + n);
    }
  } catch (const std::exception& e) {
    throw StageError("report", cfg.seed, e.what());
  }
  return report;
}

fs::path run_experiment(const fs::path& config_path, const std::optional<fs::path>& out_dir, const RunOptions& opts) {
  const ExperimentConfig cfg = ExperimentConfig::load(config_path);
  fs::path out = out_dir ? *out_dir : (cfg.output_dir.empty() ? default_output_root() / "experiment" : fs::path(cfg.output_dir));
  if (out.is_relative() && !out_dir && !cfg.output_dir.empty()) out = default_output_root() / out;
  run_experiment(cfg, out, opts);
  return out;
}

// ---------------------------------------------------------------------------
// Report

json assemble_report(const ExperimentConfig& cfg, const fs::path& out_dir) {
  const Paths paths{out_dir, out_dir / "data"};
  const std::vector<std::string> models = cfg.model_names();
  json report;
  report["kind"] = "benchmark";
  report["schema_version"] = kExperimentSchemaVersion;
  json stored = cfg.to_json();
  stored.erase("output_dir");
  report["config"] = stored;
  report["config_hash"] = cfg.hash();
  report["encoder_hash"] = cfg.encoder.hash();
  report["encoder_parameters"] = parameter_count(cfg.encoder);
  report["models"] = models;
  json notices = json::array();

  json rows = json::array();
  json cells = json::array();
  json significance = json::array();
  // (task, modality, shots) -> model -> structure -> per-seed values
  std::map<std::tuple<std::string, std::string, std::string>, std::map<std::string, std::map<std::string, std::vector<double>>>> structure_seeds;

  for (TaskMode task : cfg.tasks) {
    const std::vector<std::string>& structures = task_structures(task);
    for (Modality mod : cfg.dataset.modalities) {
      for (Index shots : cfg.shots) {
        const std::string ts = to_string(task), ms = to_string(mod), ss = shots_label(shots);
        json cell{{"task", ts}, {"modality", ms}, {"shots", ss}, {"models", json::object()}};
        std::map<std::string, std::vector<double>> per_volume;  // model -> (seed, volume) means
        std::map<std::string, double> model_mean;
        std::vector<std::size_t> cell_rows;
        for (const std::string& model : models) {
          std::vector<double> seed_means;
          std::map<std::string, std::vector<double>> struct_means;
          for (std::uint64_t seed : cfg.seeds) {
            const fs::path dir = paths.finetune(model, task, mod, shots, seed);
            const json r = read_json(dir / "result.json");
            json per_structure = json::object();
            json volumes = json::array();
            int undefined = 0;
            for (const std::string& s : structures) {
              std::vector<double> v;
              for (const auto& t : r.at("test")) v.push_back(t.at("per_structure").at(s).get<double>());
              per_structure[s] = mean_of(v);
              struct_means[s].push_back(mean_of(v));
            }
            for (const auto& t : r.at("test")) {
              undefined += t.at("undefined").get<int>();
              volumes.push_back(json{{"id", t.at("volume_id")}, {"mean", t.at("mean")}});
              per_volume[model].push_back(t.at("mean").get<double>());
            }
            json curve = json::array();
            for (const auto& e : r.at("record").at("epochs")) {
              if (!e.at("val_dice").is_null()) curve.push_back(json::array({e.at("epoch"), e.at("val_dice")}));
            }
            const double mean = r.at("test_mean").get<double>();
            seed_means.push_back(mean);
            cell_rows.push_back(rows.size());
            rows.push_back(json{{"model", model},
                                {"task", ts},
                                {"modality", ms},
                                {"shots", ss},
                                {"seed", seed},
                                {"mean_dice", mean},
                                {"per_structure", per_structure},
                                {"undefined", undefined},
                                {"best_epoch", r.at("record").at("best_epoch")},
                                {"early_stop_epoch", r.at("record").at("early_stop_epoch")},
                                {"best_val_dice", r.at("record").at("best_val_dice")},
                                {"curve", curve},
                                {"volumes", volumes}});
          }
          model_mean[model] = mean_of(seed_means);
          json ps = json::object();
          for (const auto& [s, v] : struct_means) ps[s] = mean_of(v);
          structure_seeds[{ts, ms, ss}][model] = struct_means;
          cell["models"][model] = json{{"mean", model_mean[model]}, {"std", std_of(seed_means)}, {"seeds", seed_means}, {"per_structure", ps}};
        }
        std::string best = models.front();
        for (const std::string& m : models)
          if (model_mean[m] > model_mean[best]) best = m;
        cell["best_model"] = best;
        cell["best_mean"] = model_mean[best];
        for (const std::string& m : models) {
          json gap;
          try {
            gap = performance_gap(model_mean[m], model_mean[best]);
          } catch (const std::exception& e) {
            notices.push_back(cell_label(ts, ms, ss) + ": gap undefined (" + e.what() + ")");
          }
          cell["models"][m]["gap"] = gap;
        }
        for (std::size_t i : cell_rows) {
          json gap;
          try {
            gap = performance_gap(rows[i]["mean_dice"].get<double>(), model_mean[best]);
          } catch (const std::exception&) {
          }
          rows[i]["gap_vs_best"] = gap;
        }
        cells.push_back(cell);

        if (cfg.analysis.wilcoxon) {
          const std::string ref = cfg.include_scratch ? std::string("scratch") : best;
          for (const std::string& m : models) {
            if (m == ref) continue;
            json e{{"task", ts}, {"modality", ms}, {"shots", ss}, {"model", m}, {"reference", ref}, {"pairs", "seed x test volume"}};
            try {
              const WilcoxonResult w = wilcoxon_signed_rank(per_volume[m], per_volume[ref]);
              e["p"] = w.p;
              e["w_plus"] = w.w_plus;
              e["n"] = w.n;
              e["exact"] = w.exact;
              e["degenerate"] = w.degenerate;
              e["stars"] = significance_stars(w.p);
            } catch (const std::exception& ex) {
              e["error"] = ex.what();
            }
            significance.push_back(e);
          }
        }
      }
    }
  }
  report["rows"] = rows;
  report["cells"] = cells;
  if (cfg.analysis.wilcoxon) report["significance"] = significance;

  const bool both = std::find(cfg.dataset.modalities.begin(), cfg.dataset.modalities.end(), Modality::A) != cfg.dataset.modalities.end() &&
                    std::find(cfg.dataset.modalities.begin(), cfg.dataset.modalities.end(), Modality::B) != cfg.dataset.modalities.end();
  if (cfg.analysis.gaps && both) {
    json gaps = json::array();
    for (TaskMode task : cfg.tasks) {
      for (Index shots : cfg.shots) {
        const std::string ts = to_string(task), ss = shots_label(shots);
        for (const std::string& model : models) {
          const auto& sa = structure_seeds.at({ts, "A", ss}).at(model);
          const auto& sb = structure_seeds.at({ts, "B", ss}).at(model);
          std::map<std::string, double> ma, mb;
          for (const auto& [s, v] : sa) ma[s] = mean_of(v);
          for (const auto& [s, v] : sb) mb[s] = mean_of(v);
          const std::map<std::string, double> g = modality_gap(ma, mb);
          std::vector<double> gv;
          for (const auto& [s, v] : g) gv.push_back(v);
          json e{{"task", ts}, {"shots", ss}, {"model", model}, {"per_structure", g}, {"mean_gap", mean_of(gv)}};
          if (cfg.analysis.wilcoxon) {
            std::vector<double> a, b;
            for (const auto& [s, v] : sa) a.insert(a.end(), v.begin(), v.end());
            for (const auto& [s, v] : sb) b.insert(b.end(), v.begin(), v.end());
            try {
              const WilcoxonResult w = wilcoxon_signed_rank(a, b);
              e["p"] = w.p;
              e["n"] = w.n;
              e["exact"] = w.exact;
              e["stars"] = significance_stars(w.p);
            } catch (const std::exception& ex) {
              e["p"] = nullptr;
              e["stars"] = "";
              e["error"] = ex.what();
            }
          }
          gaps.push_back(e);
        }
      }
    }
    report["modality_gaps"] = gaps;
  } else if (cfg.analysis.gaps) {
    notices.push_back("modality gaps need both modalities A and B");
  }

  json pre = json::array();
  for (Method m : cfg.methods)
    for (std::uint64_t seed : cfg.seeds) pre.push_back(read_json(paths.pretrain(to_string(m), seed) / "summary.json"));
  report["pretrain"] = pre;

  if (cfg.analysis.cka && !cfg.methods.empty()) {
    json entries = json::array();
    json summary = json::object();
    for (Method m : cfg.methods) {
      const std::string name = to_string(m);
      std::vector<std::vector<double>> ft, rd;
      std::vector<double> mf, mr;
      json taps;
      for (std::uint64_t seed : cfg.seeds) {
        json c = read_json(paths.cka(name, seed) / "cka.json");
        taps = c.at("taps");
        ft.push_back(c.at("finetuned").get<std::vector<double>>());
        rd.push_back(c.at("random").get<std::vector<double>>());
        mf.push_back(c.at("mean_finetuned").get<double>());
        mr.push_back(c.at("mean_random").get<double>());
        c.erase("detail_finetuned");
        c.erase("detail_random");
        entries.push_back(c);
      }
      std::vector<double> pf(ft.front().size()), pr(rd.front().size());
      for (std::size_t t = 0; t < pf.size(); ++t) {
        std::vector<double> a, b;
        for (std::size_t s = 0; s < ft.size(); ++s) {
          a.push_back(ft[s][t]);
          b.push_back(rd[s][t]);
        }
        pf[t] = mean_of(a);
        pr[t] = mean_of(b);
      }
      summary[name] = json{{"taps", taps}, {"finetuned", pf}, {"random", pr}, {"mean_finetuned", mean_of(mf)}, {"mean_random", mean_of(mr)}};
    }
    report["cka"] = entries;
    report["cka_summary"] = summary;
  } else if (cfg.analysis.cka) {
    notices.push_back("cka skipped: no pretrained methods");
  }
  report["notices"] = notices;
  return report;
}

BestReference best_reference(const json& report, const std::string& task, const std::string& modality, const std::string& shots) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<double>> vals;
  for (const auto& r : report.at("rows")) {
    if (r.at("task") != task || r.at("modality") != modality || r.at("shots") != shots) continue;
    const std::string m = r.at("model").get<std::string>();
    if (!vals.count(m)) order.push_back(m);
    vals[m].push_back(r.at("mean_dice").get<double>());
  }
  if (order.empty()) throw std::invalid_argument("best_reference: no rows for cell " + cell_label(task, modality, shots));
  BestReference best{order.front(), mean_of(vals[order.front()])};
  for (const auto& m : order) {
    const double v = mean_of(vals[m]);
    if (v > best.mean) best = {m, v};
  }
  return best;
}

// ---------------------------------------------------------------------------
// Sweeps

namespace {

json sweep_series(const std::vector<json>& reports, const std::vector<double>& xs, const std::vector<std::string>& labels,
                  const std::vector<std::vector<std::string>>& point_models, const std::vector<std::string>& series_models,
                  const ExperimentConfig& cfg) {
  json series = json::array();
  for (const std::string& sm : series_models) {
    for (TaskMode task : cfg.tasks) {
      for (Modality mod : cfg.dataset.modalities) {
        for (Index shots : cfg.shots) {
          const std::string ts = to_string(task), ms = to_string(mod), ss = shots_label(shots);
          json s{{"model", sm}, {"task", ts}, {"modality", ms}, {"shots", ss}, {"points", json::array()}};
          std::vector<double> means;
          for (std::size_t p = 0; p < reports.size(); ++p) {
            const auto& pm = point_models[p];
            const std::string model = std::find(pm.begin(), pm.end(), sm) != pm.end() ? sm : std::string("scratch");
            if (std::find(pm.begin(), pm.end(), model) == pm.end()) continue;
            for (const auto& c : reports[p].at("cells")) {
              if (c.at("task") != ts || c.at("modality") != ms || c.at("shots") != ss) continue;
              const json& mm = c.at("models").at(model);
              s["points"].push_back(json{{"x", xs[p]}, {"label", labels[p]}, {"source_model", model}, {"mean", mm.at("mean")},
                                         {"std", mm.at("std")}, {"seeds", mm.at("seeds")}});
              means.push_back(mm.at("mean").get<double>());
            }
          }
          bool mono = true;
          for (std::size_t i = 1; i < means.size(); ++i) mono = mono && means[i] >= means[i - 1];
          s["monotone_nondecreasing"] = mono;
          series.push_back(s);
        }
      }
    }
  }
  return series;
}

}  // namespace

json sweep_pretrain_size(const ExperimentConfig& cfg, const std::vector<Index>& sizes, const fs::path& out_dir, const RunOptions& opts) {
  cfg.validate();
  if (sizes.empty()) throw ConfigError("sweep sizes must be nonempty");
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] < 0) throw ConfigError("sweep sizes must be non-negative");
    if (i > 0 && sizes[i] <= sizes[i - 1]) throw ConfigError("sweep sizes must be strictly ascending");
    if (sizes[i] > cfg.dataset.pretrain) {
      throw ConfigError("sweep size " + std::to_string(sizes[i]) + " exceeds the generated pool of " + std::to_string(cfg.dataset.pretrain));
    }
  }
  if (sizes.back() > 0 && cfg.methods.empty()) throw ConfigError("a nonzero sweep size needs at least one method");
  fs::create_directories(out_dir);
  RunOptions sub = opts;
  sub.plots = false;
  sub.data_dir = out_dir / "data";
  prepare_data(cfg, *sub.data_dir, true);
  std::vector<json> reports;
  std::vector<double> xs;
  std::vector<std::string> labels;
  std::vector<std::vector<std::string>> point_models;
  for (Index size : sizes) {
    ExperimentConfig c = cfg;
    c.sweep = nullptr;
    c.analysis.cka = false;
    if (size == 0) {
      c.methods.clear();
      c.include_scratch = true;
      c.pretrain_pool_limit.reset();
    } else {
      c.include_scratch = false;
      c.pretrain_pool_limit = size;
    }
    log_line("[sweep] pretraining size " + std::to_string(size));
    reports.push_back(run_experiment(c, out_dir / ("size" + std::to_string(size)), sub));
    xs.push_back(static_cast<double>(size));
    labels.push_back(std::to_string(size));
    point_models.push_back(c.model_names());
  }
  std::vector<std::string> series_models;
  for (Method m : cfg.methods) series_models.push_back(to_string(m));
  if (series_models.empty()) series_models.emplace_back("scratch");
  json out{{"kind", "sweep"},
           {"sweep_kind", "pretrain_size"},
           {"schema_version", kExperimentSchemaVersion},
           {"config_hash", cfg.hash()},
           {"x_label", "pretraining volumes"},
           {"sizes", sizes},
           {"series", sweep_series(reports, xs, labels, point_models, series_models, cfg)}};
  write_json(out_dir / "report.json", out);
  if (opts.plots) emit_plots(out, out_dir / "plots");
  return out;
}

json sweep_capacity(const ExperimentConfig& cfg, const std::vector<EncoderConfig>& encoders, const fs::path& out_dir, const RunOptions& opts) {
  cfg.validate();
  if (encoders.empty()) throw ConfigError("capacity sweep needs at least one encoder");
  fs::create_directories(out_dir);
  RunOptions sub = opts;
  sub.plots = false;
  sub.data_dir = out_dir / "data";
  prepare_data(cfg, *sub.data_dir, true);
  std::vector<json> reports;
  std::vector<double> xs;
  std::vector<std::string> labels;
  std::vector<std::vector<std::string>> point_models;
  json points = json::array();
  for (std::size_t i = 0; i < encoders.size(); ++i) {
    ExperimentConfig c = cfg;
    c.sweep = nullptr;
    c.encoder = encoders[i];
    c.encoder_preset = "custom";
    c.analysis.cka = false;
    try {
      c.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("capacity sweep encoder " + std::to_string(i) + ": " + e.what());
    }
    const Index count = parameter_count(encoders[i]);
    log_line("[sweep] encoder " + std::to_string(i) + " with " + std::to_string(count) + " parameters");
    reports.push_back(run_experiment(c, out_dir / ("encoder" + std::to_string(i)), sub));
    xs.push_back(static_cast<double>(count));
    labels.push_back(encoders[i].hash());
    point_models.push_back(c.model_names());
    points.push_back(json{{"index", i}, {"encoder", encoders[i].to_json()}, {"parameters", count}});
  }
  json out{{"kind", "sweep"},
           {"sweep_kind", "capacity"},
           {"schema_version", kExperimentSchemaVersion},
           {"config_hash", cfg.hash()},
           {"x_label", "encoder parameters"},
           {"encoders", points},
           {"series", sweep_series(reports, xs, labels, point_models, cfg.model_names(), cfg)}};
  write_json(out_dir / "report.json", out);
  if (opts.plots) emit_plots(out, out_dir / "plots");
  return out;
}

json run_sweep(const ExperimentConfig& cfg, const fs::path& out_dir, const RunOptions& opts) {
  if (!cfg.sweep.is_object()) throw ConfigError("config has no sweep block");
  const std::string kind = cfg.sweep.value("kind", std::string());
  try {
    if (kind == "pretrain_size") return sweep_pretrain_size(cfg, cfg.sweep.at("sizes").get<std::vector<Index>>(), out_dir, opts);
    if (kind == "capacity") {
      std::vector<EncoderConfig> encs;
      for (json e : cfg.sweep.at("encoders")) {
        if (e.is_string()) e = json{{"preset", e.get<std::string>()}};
        encs.push_back(EncoderConfig::from_json(e));
      }
      return sweep_capacity(cfg, encs, out_dir, opts);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid sweep block: ") + e.what());
  }
  throw ConfigError("unknown sweep kind '" + kind + "' (expected pretrain_size or capacity)");
}

// ---------------------------------------------------------------------------
// Plots

PlotSummary emit_plots(const json& report, const fs::path& dir) {
  PlotSummary out;
  auto emit = [&](const std::string& name, const std::string& svg, const std::string& csv) {
    plot::write_figure(dir / name, svg, csv);
    out.files.push_back(dir / (name + ".svg"));
    out.files.push_back(dir / (name + ".csv"));
  };

  if (report.value("kind", std::string()) == "sweep") {
    std::vector<plot::LineSeries> lines;
    for (const auto& s : report.at("series")) {
      plot::LineSeries ls;
      ls.name = s.at("model").get<std::string>() + " " + s.at("task").get<std::string>() + "/" + s.at("modality").get<std::string>() + "/" +
                s.at("shots").get<std::string>();
      std::vector<plot::LineSeries> per_seed;
      for (const auto& p : s.at("points")) {
        ls.x.push_back(p.at("x").get<double>());
        ls.y.push_back(p.at("mean").get<double>());
        const auto seeds = p.at("seeds").get<std::vector<double>>();
        if (per_seed.size() < seeds.size()) per_seed.resize(seeds.size());
        for (std::size_t k = 0; k < seeds.size(); ++k) {
          per_seed[k].name = ls.name + " seed#" + std::to_string(k);
          per_seed[k].x.push_back(p.at("x").get<double>());
          per_seed[k].y.push_back(seeds[k]);
        }
      }
      lines.push_back(ls);
      for (auto& p : per_seed) lines.push_back(std::move(p));
    }
    const std::string x_label = report.value("x_label", std::string("x"));
    emit("sweep_curve", plot::line_chart_svg("Dice vs " + x_label, lines, x_label, "mean Dice"), plot::line_chart_csv(lines));
    return out;
  }

  const auto models = report.at("models").get<std::vector<std::string>>();
  const json& cells = report.at("cells");

  std::vector<std::string> cats;
  std::vector<plot::BarSeries> bars(models.size());
  for (std::size_t m = 0; m < models.size(); ++m) bars[m].name = models[m];
  for (const auto& c : cells) {
    cats.push_back(cell_label(c.at("task"), c.at("modality"), c.at("shots")));
    for (std::size_t m = 0; m < models.size(); ++m) bars[m].values.push_back(c.at("models").at(models[m]).at("mean").get<double>());
  }
  emit("dice_bars", plot::bar_chart_svg("Mean test Dice", cats, bars, "Dice"), plot::bar_chart_csv(cats, bars));

  std::vector<std::string> scats;
  std::vector<plot::BarSeries> sbars(models.size());
  for (std::size_t m = 0; m < models.size(); ++m) sbars[m].name = models[m];
  for (const auto& c : cells) {
    for (const auto& [s, v] : c.at("models").at(models.front()).at("per_structure").items()) {
      scats.push_back(cell_label(c.at("task"), c.at("modality"), c.at("shots")) + ":" + s);
      for (std::size_t m = 0; m < models.size(); ++m) sbars[m].values.push_back(c.at("models").at(models[m]).at("per_structure").at(s).get<double>());
    }
  }
  emit("structure_bars", plot::bar_chart_svg("Per-structure test Dice", scats, sbars, "Dice"), plot::bar_chart_csv(scats, sbars));

  if (report.contains("modality_gaps") && !report.at("modality_gaps").empty()) {
    std::map<std::string, std::size_t> series_index;
    std::vector<plot::BarSeries> gbars;
    for (const auto& g : report.at("modality_gaps")) {
      const std::string key = g.at("task").get<std::string>() + "/" + g.at("shots").get<std::string>();
      if (!series_index.count(key)) {
        series_index[key] = gbars.size();
        gbars.push_back(plot::BarSeries{key, {}, {}});
      }
      auto& b = gbars[series_index[key]];
      b.values.push_back(g.at("mean_gap").get<double>());
      b.annotations.push_back(g.value("stars", std::string()));
    }
    emit("modality_gap", plot::bar_chart_svg("Modality gap (B minus A)", models, gbars, "Dice difference"), plot::bar_chart_csv(models, gbars));
  } else {
    out.notices.push_back("modality_gap skipped: analysis.gaps disabled or a modality missing");
  }

  if (!cells.empty()) {
    const json& c0 = cells.front();
    std::vector<plot::LineSeries> curves;
    json first_seed;
    for (const auto& r : report.at("rows")) {
      if (r.at("task") != c0.at("task") || r.at("modality") != c0.at("modality") || r.at("shots") != c0.at("shots")) continue;
      if (first_seed.is_null()) first_seed = r.at("seed");
      if (r.at("seed") != first_seed) continue;
      plot::LineSeries ls;
      ls.name = r.at("model").get<std::string>();
      for (const auto& p : r.at("curve")) {
        ls.x.push_back(p.at(0).get<double>());
        ls.y.push_back(p.at(1).get<double>());
      }
      curves.push_back(ls);
    }
    emit("training_curves", plot::line_chart_svg("Validation Dice, " + cell_label(c0.at("task"), c0.at("modality"), c0.at("shots")), curves, "epoch", "Dice"),
         plot::line_chart_csv(curves));
  }

  std::vector<plot::BarSeries> panel;
  bool gaps_ok = true;
  for (const auto& c : cells) {
    plot::BarSeries b{cell_label(c.at("task"), c.at("modality"), c.at("shots")), {}, {}};
    for (const auto& m : models) {
      const json& g = c.at("models").at(m).at("gap");
      if (g.is_null()) gaps_ok = false;
      b.values.push_back(g.is_null() ? 0.0 : g.get<double>());
    }
    panel.push_back(b);
  }
  if (gaps_ok) {
    emit("gap_panel", plot::bar_chart_svg("Performance gap to the best model (%)", models, panel, "gap %"), plot::bar_chart_csv(models, panel));
  } else {
    out.notices.push_back("gap_panel skipped: undefined gap in some cell");
  }

  if (report.contains("cka_summary")) {
    std::vector<std::string> rows, cols;
    std::vector<std::vector<double>> vals;
    for (const auto& [method, s] : report.at("cka_summary").items()) {
      if (cols.empty())
        for (const auto& t : s.at("taps")) cols.push_back("t" + std::to_string(t.get<int>()));
      rows.push_back(method + " finetuned");
      vals.push_back(s.at("finetuned").get<std::vector<double>>());
      rows.push_back(method + " random");
      vals.push_back(s.at("random").get<std::vector<double>>());
    }
    emit("cka_heatmap", plot::heatmap_svg("Layerwise CKA to the pretrained encoder", rows, cols, vals), plot::heatmap_csv(rows, cols, vals));
  } else {
    out.notices.push_back("cka_heatmap skipped: analysis.cka disabled");
  }
  return out;
}

}  // namespace volssl
