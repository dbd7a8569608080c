// Acceptance checks on the desk-scale toy setup. Prints one PASS/FAIL line
// per criterion and exits non-zero if any fails.
//
// The toy runs go through the experiment harness. By default they land in a
// fresh temporary directory; set SSLPOISON_ACCEPTANCE_DIR to keep (and reuse)
// them between invocations.
#include <torch/torch.h>

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "sslpoison/harness.hpp"

using namespace sslpoison;
namespace fs = std::filesystem;

namespace {

// Tolerances and thresholds, fixed here.
constexpr double kBudget = 27.0;
constexpr double kSecondOrderTol = 1e-3;
constexpr double kFallbackTol = 1e-2;
constexpr double kPoolLossTol = 1e-10;
constexpr double kCraftProgress = 0.5;
constexpr double kConsistencyGap = 15.0;
constexpr double kChanceMargin = 10.0;
constexpr double kMaxCaDrop = 2.0;
constexpr double kMetricTol = 1e-6;
constexpr double kUniformMse100Psnr = 28.13;
constexpr double kPsnrPrintTol = 0.005;  // 28.13 is the two-decimal value
constexpr double kDShrink = 0.5;
constexpr double kArithmeticTol = 1e-9;
constexpr double kMaxDepudAuroc = 0.70;
constexpr int kSeeds = 3;

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "PASS " : "FAIL ") << "[" << id << "] " << name << ": " << detail << std::endl;
  if (!pass) ++failures;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

std::string list(const std::vector<double>& v) {
  std::string s;
  for (const double x : v) s += (s.empty() ? "" : ",") + fmt(x, 3);
  return "{" + s + "}";
}

class Runs {
 public:
  explicit Runs(fs::path out) : out_(std::move(out)) {}

  /// FixMatch on toy shapes with the given attack; defaults elsewhere.
  ExperimentConfig config(AttackKind kind, PoisonMode mode, std::uint64_t seed, bool with_depud = false) const {
    ExperimentConfig c;
    c.name = "acceptance";
    c.attack.kind = kind;
    c.attack.mode = mode;
    c.seed = seed;
    c.output_dir = out_.string();
    if (with_depud) c.defenses.enabled = {"depud"};
    return c;
  }

  const ResultRecord& get(const ExperimentConfig& c, bool force = false) {
    const auto key = config_hash(c) + (force ? "-forced" : "");
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    RunOptions opt;
    opt.force = force;
    opt.log = [](const std::string& m) { std::cerr << "  [run] " << m << "\n"; };
    std::cerr << "run " << to_string(c.attack.kind) << "/" << to_string(c.attack.mode) << " seed " << c.seed << "\n";
    auto rec = run_experiment(c, opt);
    if (rec.status == "failed") throw std::runtime_error("toy run failed in " + to_string(*rec.failed_stage) + ": " + rec.error);
    return cache_.emplace(key, std::move(rec)).first->second;
  }

  [[nodiscard]] const fs::path& out() const { return out_; }

 private:
  fs::path out_;
  std::map<std::string, ResultRecord> cache_;
};

// ---------------------------------------------------------------- criteria

void budget_invariant(Runs& runs) {
  const auto cfg = runs.config(AttackKind::ours, PoisonMode::consistent, 0, true);
  const auto& rec = runs.get(cfg);
  const auto poisons = import_poisoned_set(runs.out() / rec.config_hash / "poisons").examples;
  std::map<std::string, const ImageExample*> clean;
  const auto raw = load_data(cfg.data);
  for (const auto& ex : raw.train) clean[ex.id] = &ex;
  double worst = 0.0;
  std::size_t checked = 0;
  for (const auto& p : poisons) {
    const auto it = clean.find(p.id);
    if (it == clean.end()) continue;
    worst = std::max(worst, oracles::brute_linf(*it->second, p));
    ++checked;
  }
  const bool pass = checked == poisons.size() && !poisons.empty() && worst <= kBudget;
  report(1, "budget invariant", pass,
         "max L-inf " + fmt(worst) + " <= " + fmt(kBudget) + " over " + std::to_string(checked) + "/" +
             std::to_string(poisons.size()) + " poisons");
}

void second_order() {
  const auto exact = oracles::lbt_generator_derivative(HvpMode::exact);
  const auto fallback = oracles::lbt_generator_derivative(HvpMode::finite_difference);
  const bool pass = exact.relative_error <= kSecondOrderTol && exact.surrogate_parameters <= 1000 &&
                    fallback.relative_error <= kFallbackTol;
  report(2, "second-order correctness", pass,
         "exact rel err " + fmt(exact.relative_error, 3) + " <= 1e-3, fd-hvp rel err " + fmt(fallback.relative_error, 3) +
             " <= 1e-2, surrogate " + std::to_string(exact.surrogate_parameters) + " params, " +
             std::to_string(exact.coordinates) + " coordinates, double precision");
}

void pool_identity(Runs& runs) {
  const auto cfg = runs.config(AttackKind::ours, PoisonMode::consistent, 0, true);
  const auto& rec = runs.get(cfg);
  SurrogateBundle bundle;
  bundle.surrogate = load_classifier(runs.out() / rec.config_hash / "surrogate.pt");
  const auto sdata = load_data(cfg.attack.surrogate_data);
  select_target_pool(bundle, sdata.train, cfg.attack.target_class, cfg.attack.pool_size);
  const double toy = grad_match_loss(bundle, to_tensor(bundle.target_pool)).item<double>();
  const auto tiny = oracles::tiny_bundle();
  const double dbl = grad_match_loss(tiny, to_tensor(tiny.target_pool).to(torch::kFloat64)).item<double>();
  const bool pass = std::abs(toy) <= kPoolLossTol && std::abs(dbl) <= kPoolLossTol;
  report(3, "gradient-matching identity", pass,
         "L_bt(pool) = " + fmt(toy, 3) + " (toy surrogate), " + fmt(dbl, 3) + " (double), tol 1e-10");
}

void crafting_progress(Runs& runs) {
  const auto& rec = runs.get(runs.config(AttackKind::ours, PoisonMode::consistent, 0, true));
  const double first = rec.craft_history.front().grad_match;
  const double last = rec.craft_history.back().grad_match;
  report(4, "crafting progress", last <= kCraftProgress * first,
         "E[L_bt] epoch 0 " + fmt(first) + " -> final " + fmt(last) + " (<= " + fmt(kCraftProgress * first) + ")");
}

void consistency_finding(Runs& runs) {
  std::vector<double> cons, incons;
  for (int s = 0; s < kSeeds; ++s) {
    cons.push_back(*runs.get(runs.config(AttackKind::badnets, PoisonMode::consistent, s)).metrics.asr);
    incons.push_back(*runs.get(runs.config(AttackKind::badnets, PoisonMode::inconsistent, s)).metrics.asr);
  }
  const double chance = 100.0 / load_data(runs.config(AttackKind::none, PoisonMode::consistent, 0).data).num_classes;
  const double gap = mean(cons) - mean(incons);
  const bool pass = gap >= kConsistencyGap && mean(incons) <= chance + kChanceMargin;
  report(5, "consistent vs inconsistent patch (FixMatch)", pass,
         "ASR consistent " + list(cons) + " mean " + fmt(mean(cons)) + ", inconsistent " + list(incons) + " mean " +
             fmt(mean(incons)) + "; gap " + fmt(gap) + " >= 15, inconsistent <= chance " + fmt(chance) + " + 10");
}

void attack_ordering(Runs& runs) {
  std::vector<double> ours_asr, clb_asr, ours_ca, clean_ca;
  for (int s = 0; s < kSeeds; ++s) {
    const auto& o = runs.get(runs.config(AttackKind::ours, PoisonMode::consistent, s, s == 0));
    ours_asr.push_back(*o.metrics.asr);
    ours_ca.push_back(o.metrics.ca);
    clb_asr.push_back(*runs.get(runs.config(AttackKind::clb, PoisonMode::consistent, s)).metrics.asr);
    clean_ca.push_back(runs.get(runs.config(AttackKind::none, PoisonMode::consistent, s)).metrics.ca);
  }
  const double drop = mean(clean_ca) - mean(ours_ca);
  const bool pass = mean(ours_asr) > mean(clb_asr) && drop <= kMaxCaDrop;
  report(6, "attack ordering (FixMatch)", pass,
         "ASR ours " + list(ours_asr) + " mean " + fmt(mean(ours_asr)) + " vs CLB " + list(clb_asr) + " mean " +
             fmt(mean(clb_asr)) + "; CA clean " + list(clean_ca) + " vs ours " + list(ours_ca) + ", drop " + fmt(drop) +
             " <= 2");
}

void metric_oracles() {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = fixtures::random_image("p", 8, 8, 3, rng());
    auto b = fixtures::random_image("p", 8, 8, 3, rng());
    if (trial % 2) {
      b = a;
      for (auto& p : b.pixels) p = static_cast<std::uint8_t>(std::clamp<int>(p + int(rng() % 31) - 15, 0, 255));
    }
    worst = std::max({worst, std::abs(psnr(a, b) - oracles::brute_psnr(a, b)),
                      std::abs(ssim(a, b) - oracles::brute_ssim(a, b)), std::abs(linf(a, b) - oracles::brute_linf(a, b))});
  }
  auto a = fixtures::random_image("u", 8, 8, 3, 5);
  for (auto& p : a.pixels) p = static_cast<std::uint8_t>(std::clamp<int>(p, 0, 245));
  auto b = a;
  for (auto& p : b.pixels) p = static_cast<std::uint8_t>(p + 10);
  const double uniform = psnr(a, b);
  const bool pass = worst <= kMetricTol && std::abs(uniform - kUniformMse100Psnr) <= kPsnrPrintTol;
  report(7, "metric oracles", pass,
         "max |lib - brute| " + fmt(worst, 3) + " <= 1e-6 over 50 random 8x8 pairs; PSNR(MSE 100) " + fmt(uniform, 6) +
             " = 28.13");
}

void dc_dynamics(Runs& runs) {
  const auto& m = runs.get(runs.config(AttackKind::ours, PoisonMode::consistent, 0, true)).metrics;
  const bool pass = !m.d_curve.empty() && m.d_curve.back() <= kDShrink * m.d_curve.front() &&
                    m.c_curve.back() < m.c_curve.front();
  report(8, "D/C dynamics", pass,
         "D " + fmt(m.d_curve.front()) + " -> " + fmt(m.d_curve.back()) + " (<= half), C " + fmt(m.c_curve.front()) +
             " -> " + fmt(m.c_curve.back()) + " (decreasing)");
}

void defense_arithmetic(Runs& runs) {
  const auto idx = anomaly_indices({10, 11, 9, 12, 10, 11, 9, 10, 11, 2});
  const double expected = 8.0 / 1.4826;
  const auto flagged = std::count_if(idx.begin(), idx.end(), [](double v) { return v > 2.0; });
  const double strip_h = mean_entropy(torch::full({16, 10}, 0.1, torch::kFloat64));

  const auto cfg = runs.config(AttackKind::badnets, PoisonMode::consistent, 0);
  const auto& rec = runs.get(cfg);
  const auto model = load_classifier(runs.out() / rec.config_hash / "victim.pt");
  const auto raw = load_data(cfg.data);
  const auto attack_set = non_target(raw.test, cfg.attack.target_class);
  FinePruneOptions fp;
  fp.rates = {0.0};
  fp.finetune_epochs = 0;
  const auto pruned = fine_prune(model, raw.train, raw.train, raw.test, attack_set, PatternSource(cfg.attack.patch),
                                 cfg.attack.target_class, fp);
  const double ca = clean_accuracy(model, raw.test);
  const double asr = attack_success_rate(model, attack_set, PatternSource(cfg.attack.patch), cfg.attack.target_class);
  const bool identity = pruned.series.at("ca")[0] == ca && pruned.series.at("asr")[0] == asr;

  const bool pass = std::abs(idx[9] - expected) <= kArithmeticTol && flagged == 1 &&
                    std::abs(strip_h - std::log(10.0)) <= kArithmeticTol && identity;
  report(9, "defense arithmetic", pass,
         "anomaly index " + fmt(idx[9], 12) + " vs 8/1.4826, flagged " + std::to_string(flagged) + "; STRIP entropy " +
             fmt(strip_h, 12) + " vs ln 10; fine-prune(0%, 0 epochs) CA " + fmt(pruned.series.at("ca")[0]) + "/" +
             fmt(ca) + " ASR " + fmt(pruned.series.at("asr")[0]) + "/" + fmt(asr));
}

double depud_auroc(const ResultRecord& rec) {
  for (const auto& d : rec.defenses) {
    if (d.defense == "depud" && d.summary.count("auroc")) return d.summary.at("auroc");
  }
  throw std::runtime_error("run " + rec.config_hash + " has no DePuD AUROC");
}

void depud_evasion(Runs& runs) {
  const double ours = depud_auroc(runs.get(runs.config(AttackKind::ours, PoisonMode::consistent, 0, true)));
  const double patch = depud_auroc(runs.get(runs.config(AttackKind::badnets, PoisonMode::consistent, 0, true)));
  report(10, "DePuD comparative evasion", ours < patch && ours <= kMaxDepudAuroc,
         "AUROC ours " + fmt(ours) + " < patch " + fmt(patch) + ", ours <= 0.70");
}

void determinism(Runs& runs) {
  // A reduced but complete toy config, computed twice from scratch.
  auto cfg = runs.config(AttackKind::ours, PoisonMode::consistent, 7);
  cfg.ssl.epochs = 3;
  cfg.attack.craft.epochs = 2;
  cfg.attack.surrogate.epochs = 6;
  const auto first = runs.get(cfg, true);
  RunOptions opt;
  opt.force = true;
  const auto again = run_experiment(cfg, opt);
  const bool pass = first.metrics.ca == again.metrics.ca && first.metrics.asr == again.metrics.asr &&
                    first.metrics.ca_curve == again.metrics.ca_curve;
  report(11, "determinism", pass,
         "CA " + fmt(first.metrics.ca, 10) + " / " + fmt(again.metrics.ca, 10) + ", ASR " +
             fmt(first.metrics.asr.value_or(-1), 10) + " / " + fmt(again.metrics.asr.value_or(-1), 10));
}

template <typename F>
void guarded(int id, const std::string& name, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    report(id, name, false, std::string("error: ") + e.what());
  }
}

}  // namespace

int main() {
  torch::set_num_threads(1);
  std::optional<fixtures::TempDir> tmp;
  fs::path out;
  if (const char* dir = std::getenv("SSLPOISON_ACCEPTANCE_DIR")) {
    out = dir;
  } else {
    tmp.emplace("acceptance");
    out = tmp->path();
  }
  std::cerr << "acceptance runs in " << out << "\n";
  Runs runs(out);

  guarded(1, "budget invariant", [&] { budget_invariant(runs); });
  guarded(2, "second-order correctness", [&] { second_order(); });
  guarded(3, "gradient-matching identity", [&] { pool_identity(runs); });
  guarded(4, "crafting progress", [&] { crafting_progress(runs); });
  guarded(5, "consistent vs inconsistent patch (FixMatch)", [&] { consistency_finding(runs); });
  guarded(6, "attack ordering (FixMatch)", [&] { attack_ordering(runs); });
  guarded(7, "metric oracles", [&] { metric_oracles(); });
  guarded(8, "D/C dynamics", [&] { dc_dynamics(runs); });
  guarded(9, "defense arithmetic", [&] { defense_arithmetic(runs); });
  guarded(10, "DePuD comparative evasion", [&] { depud_evasion(runs); });
  guarded(11, "determinism", [&] { determinism(runs); });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
