#include <fcntl.h>
#include <signal.h>
#include <sys/utsname.h>
#include <unistd.h>

#include <torch/version.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>

#include "sslpoison/harness.hpp"
#include "sslpoison/metrics.hpp"
#include "sslpoison/random.hpp"

namespace fs = std::filesystem;

namespace sslpoison {

using nlohmann::json;

namespace {

/// Exclusive per-config lock file holding the owner's pid. A lock left by a
/// dead process is taken over.
class RunLock {
 public:
  explicit RunLock(fs::path path) : path_(std::move(path)) {
    for (int attempt = 0; attempt < 2; ++attempt) {
      fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd_ >= 0) break;
      if (errno != EEXIST) throw HarnessError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
      long pid = 0;
      std::ifstream(path_) >> pid;
      if (pid > 0 && (::kill(static_cast<pid_t>(pid), 0) == 0 || errno == EPERM)) {
        throw HarnessError("config is already running (pid " + std::to_string(pid) + ", lock " + path_.string() + ")");
      }
      fs::remove(path_);
    }
    if (fd_ < 0) throw HarnessError("cannot acquire lock " + path_.string());
    const auto pid = std::to_string(::getpid());
    if (::write(fd_, pid.data(), pid.size()) < 0) {
      // The pid is advisory; an empty lock still excludes other runs.
    }
  }
  ~RunLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

void write_text_atomic(const fs::path& path, const std::string& text) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw HarnessError("cannot write " + tmp);
    out << text;
    if (!out) throw HarnessError("write failed for " + tmp);
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw HarnessError("cannot read " + path.string());
  return json::parse(in);
}

std::map<std::string, std::string> environment_fingerprint() {
  std::map<std::string, std::string> env;
  env["torch"] = TORCH_VERSION;
  env["compiler"] = __VERSION__;
  env["cxx_standard"] = std::to_string(__cplusplus);
  env["torch_threads"] = std::to_string(torch::get_num_threads());
  utsname u{};
  if (::uname(&u) == 0) {
    env["os"] = std::string(u.sysname) + " " + u.release;
    env["machine"] = u.machine;
  }
  return env;
}

std::vector<ImageExample> seeded_sample(std::span<const ImageExample> pool, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  rnd::shuffle(idx, rng);
  idx.resize(std::min(n, idx.size()));
  std::sort(idx.begin(), idx.end());
  std::vector<ImageExample> out;
  for (auto i : idx) out.push_back(pool[i]);
  return out;
}

std::vector<ImageExample> of_class(std::span<const ImageExample> pool, int cls) {
  std::vector<ImageExample> out;
  for (const auto& ex : pool) {
    if (ex.label == cls) out.push_back(ex);
  }
  return out;
}

/// Attacker-side artifacts: surrogate and (for our attack) the generator.
struct CraftArtifacts {
  SurrogateBundle bundle;
  std::optional<GeneratorModel> generator;
  std::vector<CraftEpoch> history;
  std::string surrogate_checksum;
};

class Pipeline {
 public:
  Pipeline(const ExperimentConfig& config, const RunOptions& options, const fs::path& staging, ResultRecord& record)
      : cfg_(config), opt_(options), dir_(staging), rec_(record) {}

  void run(Stage& current) {
    current = Stage::data;
    load_victim();
    done(Stage::data);
    if (opt_.until == Stage::data) return;

    current = Stage::craft;
    if (cfg_.attack.kind == AttackKind::ours || cfg_.attack.kind == AttackKind::clb) craft();
    done(Stage::craft);
    if (opt_.until == Stage::craft) return;

    current = Stage::poison;
    poison();
    done(Stage::poison);
    if (opt_.until == Stage::poison) return;

    current = Stage::train;
    train();
    done(Stage::train);
    if (opt_.until == Stage::train) return;

    current = Stage::evaluate;
    evaluate();
    done(Stage::evaluate);
    if (opt_.until == Stage::evaluate) return;

    current = Stage::defend;
    defend();
    done(Stage::defend);
  }

 private:
  void log(const std::string& msg) const {
    if (opt_.log) opt_.log(msg);
  }
  void done(Stage s) { rec_.completed_stages.push_back(to_string(s)); }
  std::uint64_t seed(std::uint64_t component) const { return derive_seed(cfg_.seed, component); }
  void node(std::string artifact, std::string side, std::vector<std::string> inputs) {
    rec_.provenance.push_back({std::move(artifact), std::move(side), std::move(inputs)});
  }

  ClassifierSpec fitted(ClassifierSpec spec, const RawDataset& data) const {
    spec.num_classes = data.num_classes;
    spec.input = data.shape;
    return spec;
  }

  void load_victim() {
    victim_ = load_data(cfg_.data);
    if (cfg_.attack.target_class < 0 || cfg_.attack.target_class >= victim_.num_classes) {
      throw HarnessError("attack.target_class " + std::to_string(cfg_.attack.target_class) + " outside [0, " +
                         std::to_string(victim_.num_classes) + ")");
    }
    splits_ = make_ssl_splits(victim_, cfg_.n_labeled, seed(cfg_.split_seed));
    victim_checksum_ = checksum(victim_.train);
    node("victim_dataset", "victim", {});
    node("victim_splits", "victim", {"victim_dataset"});
    log("data: " + victim_.name + ", " + std::to_string(splits_.labeled.size()) + " labeled / " +
        std::to_string(splits_.unlabeled.size()) + " unlabeled");
  }

  // ------------------------------------------------------------------ craft

  RawDataset surrogate_dataset(int& surrogate_target) const {
    const auto& a = cfg_.attack;
    auto data = load_data(a.surrogate_data);
    surrogate_target = a.target_class;
    if (a.situation == Situation::s1) {
      data = substitute_class(data, a.substitute_slot, load_data(a.substitute_donor), a.target_class);
      surrogate_target = a.substitute_slot;
    }
    return data;
  }

  void craft() {
    const auto& a = cfg_.attack;
    const auto key = craft_hash(cfg_);
    const auto cache = fs::path(cfg_.output_dir) / "craft-cache" / key;
    int surrogate_target = 0;
    const auto sdata = surrogate_dataset(surrogate_target);

    node("surrogate_dataset", "attacker", a.situation == Situation::s1 ? std::vector<std::string>{"substitute_donor"}
                                                                      : std::vector<std::string>{});
    if (a.situation == Situation::s1) node("substitute_donor", "attacker", {});
    node("surrogate_model", "attacker", {"surrogate_dataset"});

    CraftArtifacts art;
    art.surrogate_checksum = checksum(sdata.train);
    if (art.surrogate_checksum == victim_checksum_) {
      rec_.warnings.push_back("surrogate training set is byte-identical to the victim training set");
    }
    const bool need_generator = a.kind == AttackKind::ours;
    const bool cached = !opt_.force && fs::exists(cache / "craft.json") &&
                        (!need_generator || fs::exists(cache / "generator.pt"));
    if (cached) {
      log("craft: reusing " + cache.string());
      const auto meta = read_json(cache / "craft.json");
      art.bundle.surrogate = load_classifier(cache / "surrogate.pt");
      art.bundle.dataset_id = sdata.name;
      art.bundle.validation_accuracy = meta.at("surrogate_accuracy").get<double>();
      select_target_pool(art.bundle, sdata.train, surrogate_target, a.pool_size, a.subset);
      if (need_generator) {
        art.generator = load_generator(cache / "generator.pt");
        for (const auto& e : meta.at("history")) {
          art.history.push_back({e.at("epoch").get<int>(), e.at("grad_match").get<double>(),
                                 e.at("instance").get<double>(), e.at("lambda_ins").get<double>()});
        }
      }
    } else {
      auto scfg = a.surrogate;
      scfg.model = fitted(scfg.model, sdata);
      scfg.seed = seed(a.surrogate.seed);
      log("craft: training surrogate on " + sdata.name);
      art.bundle = train_surrogate(sdata, scfg);
      log("craft: surrogate accuracy " + std::to_string(art.bundle.validation_accuracy));
      select_target_pool(art.bundle, sdata.train, surrogate_target, a.pool_size, a.subset);
      if (need_generator) {
        auto ccfg = a.craft;
        ccfg.seed = seed(a.craft.seed);
        auto result = craft_generator(art.bundle, sdata.train, ccfg, [&](const CraftEpoch& e) {
          log("craft: epoch " + std::to_string(e.epoch) + " L_bt " + std::to_string(e.grad_match) + " L_ins " +
              std::to_string(e.instance));
        });
        art.generator = std::move(result.generator);
        art.history = std::move(result.history);
      }
      const auto tmp = cache.string() + ".tmp-" + std::to_string(::getpid());
      fs::remove_all(tmp);
      fs::create_directories(tmp);
      save_classifier(art.bundle.surrogate, fs::path(tmp) / "surrogate.pt");
      if (art.generator) save_generator(*art.generator, fs::path(tmp) / "generator.pt");
      json hist = json::array();
      for (const auto& e : art.history) {
        hist.push_back({{"epoch", e.epoch}, {"grad_match", e.grad_match}, {"instance", e.instance},
                        {"lambda_ins", e.lambda_ins}});
      }
      write_text_atomic(fs::path(tmp) / "craft.json",
                        json{{"surrogate_accuracy", art.bundle.validation_accuracy},
                             {"surrogate_dataset", sdata.name},
                             {"surrogate_checksum", art.surrogate_checksum},
                             {"history", hist}}
                            .dump(2));
      fs::remove_all(cache);
      fs::create_directories(cache.parent_path());
      fs::rename(tmp, cache);
    }
    for (const auto& w : art.bundle.warnings) rec_.warnings.push_back(w);
    save_classifier(art.bundle.surrogate, dir_ / "surrogate.pt");
    rec_.artifacts["surrogate"] = "surrogate.pt";
    if (art.generator) {
      save_generator(*art.generator, dir_ / "generator.pt");
      rec_.artifacts["generator"] = "generator.pt";
      node("generator", "attacker", {"surrogate_model", "surrogate_dataset"});
    }
    rec_.craft_history = art.history;
    rec_.environment["surrogate_checksum"] = art.surrogate_checksum;
    craft_ = std::move(art);
  }

  // ----------------------------------------------------------------- poison

  void poison() {
    const auto& a = cfg_.attack;
    if (a.kind == AttackKind::none) {
      poisoned_ = splits_;
      pattern_ = a.patch;
      node("training_set", "victim", {"victim_splits"});
      return;
    }
    double fraction = a.label_fraction;
    if (fraction < 0.0) {
      fraction = a.situation == Situation::s2
                     ? static_cast<double>(splits_.labeled.size()) /
                           static_cast<double>(splits_.labeled.size() + splits_.unlabeled.size())
                     : 0.0;
    }
    plan_ = select_poison_set(splits_, a.target_class, a.poison_count, a.mode, seed(a.plan_seed), fraction);
    switch (a.kind) {
      case AttackKind::ours:
        poisoned_ = poison_unlabeled(*craft_.generator, plan_, splits_);
        pattern_ = &*craft_.generator;
        break;
      case AttackKind::badnets:
        poisoned_ = baseline_patch_poison(plan_, splits_, a.patch, PatchVariant::badnets);
        pattern_ = a.patch;
        break;
      case AttackKind::clb:
        poisoned_ = baseline_patch_poison(plan_, splits_, a.patch, PatchVariant::clb, &craft_.bundle, a.clb);
        pattern_ = a.patch;
        break;
      case AttackKind::none: break;
    }
    std::vector<ImageExample> poisons;
    for (const auto* split : {&poisoned_.unlabeled, &poisoned_.labeled}) {
      for (const auto& ex : *split) {
        if (ex.origin == Origin::poisoned) poisons.push_back(ex);
      }
    }
    const auto clean = gather_planned(plan_, splits_.unlabeled);
    const auto imp = imperceptibility(clean, poisons);
    rec_.metrics.psnr = imp.psnr;
    rec_.metrics.ssim = imp.ssim;
    rec_.metrics.linf = imp.linf;
    if (a.kind == AttackKind::ours && imp.linf > a.craft.generator.epsilon) {
      throw HarnessError("poison exceeds the budget: L-inf " + std::to_string(imp.linf) + " > " +
                         std::to_string(a.craft.generator.epsilon));
    }
    const auto summary = export_poisoned_set(poisons, plan_, dir_ / "poisons");
    rec_.artifacts["poison_manifest"] = fs::relative(summary.manifest, dir_).string();
    rec_.environment["poison_checksum"] = summary.checksum;
    node("poison_plan", "victim", {"victim_splits"});
    node("poisons", "attacker", a.kind == AttackKind::badnets ? std::vector<std::string>{"poison_plan"}
                                                               : std::vector<std::string>{"poison_plan", a.kind == AttackKind::ours ? "generator" : "surrogate_model"});
    node("training_set", "victim", {"victim_splits", "poisons"});
    log("poison: " + std::to_string(poisons.size()) + " poisons, PSNR " + std::to_string(imp.psnr) + ", L-inf " +
        std::to_string(imp.linf));
  }

  // ------------------------------------------------------------------ train

  void train() {
    const int target = cfg_.attack.target_class;
    auto scfg = cfg_.ssl;
    scfg.model = fitted(scfg.model, victim_);
    scfg.seed = seed(cfg_.ssl.seed);

    nontarget_ = non_target(poisoned_.validation, target);
    std::vector<ImageExample> poisoned_unlabeled;
    for (const auto& ex : poisoned_.unlabeled) {
      if (ex.origin == Origin::poisoned) poisoned_unlabeled.push_back(ex);
    }
    const auto c_sample = seeded_sample(nontarget_, static_cast<std::size_t>(cfg_.probes.c_sample), seed(cfg_.probes.seed));
    const auto c_pool = seeded_sample(of_class(poisoned_.validation, target),
                                      static_cast<std::size_t>(cfg_.probes.c_pool), seed(cfg_.probes.seed + 1));
    std::vector<EpochProbe> probes;
    if (cfg_.probes.asr) {
      probes.push_back([&](const ClassifierModel& m, EpochRecord& r) {
        r.asr = attack_success_rate(m, nontarget_, pattern_, target);
      });
    }
    if (cfg_.probes.d && !poisoned_unlabeled.empty()) {
      probes.push_back([&](const ClassifierModel& m, EpochRecord& r) {
        r.d = poison_fit_loss_D(m, poisoned_unlabeled, target);
      });
    }
    if (cfg_.probes.c && cfg_.attack.kind != AttackKind::none && !c_pool.empty()) {
      probes.push_back([&](const ClassifierModel& m, EpochRecord& r) {
        r.c = grad_match_degree_C(m, c_sample, pattern_, c_pool, target).value;
      });
    }
    log("train: " + to_string(scfg.algorithm) + ", " + std::to_string(scfg.epochs) + " epochs");
    auto result = train_ssl(poisoned_, scfg, probes);
    model_ = std::move(result.model);
    history_ = std::move(result.history);
    for (const auto& e : history_.epochs) {
      rec_.metrics.ca_curve.push_back(e.ca);
      if (e.asr) rec_.metrics.asr_curve.push_back(*e.asr);
      if (e.d) rec_.metrics.d_curve.push_back(*e.d);
      if (e.c) rec_.metrics.c_curve.push_back(*e.c);
      log("train: epoch " + std::to_string(e.epoch) + " CA " + std::to_string(e.ca) +
          (e.asr ? " ASR " + std::to_string(*e.asr) : std::string()));
    }
    save_classifier(model_, dir_ / "victim.pt");
    write_epochs_csv(history_, dir_ / "epochs.csv");
    rec_.artifacts["victim_model"] = "victim.pt";
    rec_.artifacts["epochs_csv"] = "epochs.csv";
    node("victim_model", "victim", {"training_set"});

    if (cfg_.sl_baseline) {
      auto sl = scfg;
      sl.algorithm = SslAlgorithm::supervised;
      DatasetSplits labeled_only = poisoned_;
      labeled_only.unlabeled.clear();
      const auto baseline = train_ssl(labeled_only, sl);
      rec_.metrics.sl_ca = clean_accuracy(baseline.model, poisoned_.validation);
    }
  }

  // --------------------------------------------------------------- evaluate

  void evaluate() {
    rec_.metrics.ca = clean_accuracy(model_, poisoned_.validation);
    rec_.metrics.asr = attack_success_rate(model_, nontarget_, pattern_, cfg_.attack.target_class);
    log("evaluate: CA " + std::to_string(rec_.metrics.ca) + " ASR " + std::to_string(*rec_.metrics.asr));
  }

  // ----------------------------------------------------------------- defend

  void defend() {
    const auto& d = cfg_.defenses;
    const int target = cfg_.attack.target_class;
    for (const auto& name : d.enabled) {
      log("defend: " + name);
      if (name == "ac") {
        auto o = d.ac;
        o.seed = seed(o.seed);
        rec_.defenses.push_back(activation_clustering(model_, poisoned_.labeled, o));
      } else if (name == "nc") {
        auto o = d.nc;
        o.seed = seed(o.seed);
        const auto sample = seeded_sample(poisoned_.validation, static_cast<std::size_t>(d.nc_sample), o.seed);
        rec_.defenses.push_back(neural_cleanse(model_, sample, o));
      } else if (name == "fp") {
        auto o = d.fp;
        o.seed = seed(o.seed);
        rec_.defenses.push_back(
            fine_prune(model_, poisoned_.labeled, poisoned_.labeled, poisoned_.validation, nontarget_, pattern_, target, o));
      } else if (name == "strip") {
        auto o = d.strip;
        o.seed = seed(o.seed);
        // Disjoint validation slices: triggered suspects, clean calibration, blend pool.
        auto shuffled = seeded_sample(poisoned_.validation, poisoned_.validation.size(), o.seed);
        const std::size_t n = static_cast<std::size_t>(d.strip_suspects);
        if (shuffled.size() < 3 * n) throw HarnessError("STRIP needs " + std::to_string(3 * n) + " validation examples");
        std::vector<ImageExample> suspects(shuffled.begin(), shuffled.begin() + n);
        const std::vector<ImageExample> calibration(shuffled.begin() + n, shuffled.begin() + 2 * n);
        const std::vector<ImageExample> pool(shuffled.begin() + 2 * n, shuffled.end());
        const auto triggered = apply_pattern_source(pattern_, to_tensor(suspects));
        for (std::size_t i = 0; i < suspects.size(); ++i) {
          suspects[i].pixels = to_pixels(triggered[static_cast<std::int64_t>(i)]);
        }
        rec_.defenses.push_back(strip(model_, suspects, calibration, pool, o));
      } else if (name == "depud") {
        auto o = d.depud;
        o.seed = seed(o.seed);
        o.model = fitted(o.model, victim_);
        rec_.defenses.push_back(depud(poisoned_.labeled, poisoned_.unlabeled, o));
      }
      const auto& r = rec_.defenses.back();
      for (const auto& note : r.notes) rec_.warnings.push_back(name + ": " + note);
    }
  }

  const ExperimentConfig& cfg_;
  const RunOptions& opt_;
  fs::path dir_;
  ResultRecord& rec_;

  RawDataset victim_;
  std::string victim_checksum_;
  DatasetSplits splits_;
  CraftArtifacts craft_;
  PoisonPlan plan_;
  DatasetSplits poisoned_;
  PatternSource pattern_;
  std::vector<ImageExample> nontarget_;
  ClassifierModel model_;
  TrainHistory history_;
};

bool covers(const ResultRecord& rec, Stage until) {
  return std::find(rec.completed_stages.begin(), rec.completed_stages.end(), to_string(until)) !=
         rec.completed_stages.end();
}

}  // namespace

RawDataset load_data(const DataSpec& spec) {
  if (spec.dataset == "toy-shapes") return make_toy_shapes(spec.toy);
  if (spec.root.empty()) throw HarnessError("dataset '" + spec.dataset + "' needs a root directory");
  return load_dataset(spec.dataset, spec.root);
}

ResultRecord run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const auto hash = config_hash(config);
  const fs::path root(config.output_dir);
  const auto final_dir = root / hash;

  auto cached = [&]() -> std::optional<ResultRecord> {
    if (options.force || !fs::exists(final_dir / "result.json")) return std::nullopt;
    auto rec = load_record(final_dir);
    if (rec.status == "failed" || !covers(rec, options.until)) return std::nullopt;
    rec.cached = true;
    return rec;
  };
  if (auto rec = cached()) return *rec;

  fs::create_directories(root);
  RunLock lock(root / (hash + ".lock"));
  if (auto rec = cached()) return *rec;  // finished by another process meanwhile

  const auto staging = root / (".staging-" + hash + "-" + std::to_string(::getpid()));
  fs::remove_all(staging);
  fs::create_directories(staging);

  ResultRecord rec;
  rec.config_hash = hash;
  rec.config = to_json(config);
  rec.environment = environment_fingerprint();
  const auto t0 = std::chrono::steady_clock::now();
  Stage current = Stage::data;
  try {
    Pipeline(config, options, staging, rec).run(current);
    rec.status = options.until == Stage::defend ? "ok" : "partial";
  } catch (const std::exception& e) {
    rec.status = "failed";
    rec.failed_stage = current;
    rec.error = e.what();
    if (options.log) options.log(to_string(current) + " failed: " + e.what());
  }
  rec.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  rec.artifacts["result"] = "result.json";
  write_text_atomic(staging / "result.json", to_json(rec).dump(2));

  // Publish: the run directory is replaced by a rename so readers never
  // see a half-written result.
  if (fs::exists(final_dir)) {
    const auto old = root / (".old-" + hash + "-" + std::to_string(::getpid()));
    fs::remove_all(old);
    fs::rename(final_dir, old);
    fs::rename(staging, final_dir);
    fs::remove_all(old);
  } else {
    fs::rename(staging, final_dir);
  }
  return rec;
}

}  // namespace sslpoison
