// Config-driven experiment runs: craft -> poison -> train -> evaluate ->
// defend, persisted as one directory per config hash.
#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sslpoison/attack.hpp"
#include "sslpoison/data_core.hpp"
#include "sslpoison/defenses.hpp"
#include "sslpoison/ssl_trainers.hpp"
#include "sslpoison/synthetic.hpp"

namespace sslpoison {

class HarnessError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Stage { data, craft, poison, train, evaluate, defend };
std::string to_string(Stage stage);
Stage stage_from_string(const std::string& s);

/// Raised inside a run; carries the stage that failed.
class StageFailure : public HarnessError {
 public:
  StageFailure(Stage stage, const std::string& what) : HarnessError(what), stage_(stage) {}
  [[nodiscard]] Stage stage() const { return stage_; }

 private:
  Stage stage_;
};

/// "none" runs the clean SSL baseline; "badnets" and "clb" paste a patch.
enum class AttackKind { none, ours, badnets, clb };
std::string to_string(AttackKind kind);
AttackKind attack_kind_from_string(const std::string& s);

/// standard: the default threat model. s1: surrogate dataset differs from
/// the victim's. s2: poisons are also labeled proportionally. s3: poisons
/// come from non-target classes.
enum class Situation { standard, s1, s2, s3 };
std::string to_string(Situation s);
Situation situation_from_string(const std::string& s);

struct DataSpec {
  std::string dataset = "toy-shapes";
  std::string root;
  /// toy-shapes generator options; ignored for on-disk datasets.
  ToyShapesOptions toy;
};

inline DataSpec toy_data(std::uint64_t seed) {
  DataSpec d;
  d.toy.seed = seed;
  return d;
}

/// Desk-scale defaults: width-16 small-cnn, short schedules.
inline ClassifierSpec toy_classifier() {
  ClassifierSpec s;
  s.width = 16;
  return s;
}

struct AttackSpec {
  AttackKind kind = AttackKind::ours;
  PoisonMode mode = PoisonMode::consistent;
  Situation situation = Situation::standard;
  int target_class = 1;
  int poison_count = 150;
  std::uint64_t plan_seed = 21;
  /// Share of poisons also placed in the labeled split; negative picks
  /// the labeled rate |X| / (|X| + |U|) in situation s2 and 0 otherwise.
  double label_fraction = -1.0;

  DataSpec surrogate_data = toy_data(2);
  /// Situation s1: the class slot of `surrogate_data` replaced by the
  /// target-class images of `substitute_donor`.
  int substitute_slot = 0;
  DataSpec substitute_donor = toy_data(3);

  SurrogateConfig surrogate = [] {
    SurrogateConfig c;
    c.model = toy_classifier();
    c.epochs = 15;
    c.seed = 11;
    return c;
  }();
  int pool_size = 64;
  ParameterSubset subset = ParameterSubset::all;
  CraftConfig craft = [] {  ///< craft.generator.epsilon is the budget
    CraftConfig c;
    c.epochs = 10;
    c.steps_per_epoch = 60;
    c.seed = 5;
    return c;
  }();
  PatchSpec patch = PatchSpec::standard();
  ClbOptions clb;
};

struct ProbeSpec {
  bool asr = true;
  bool d = true;
  bool c = true;
  int c_sample = 128;
  int c_pool = 64;
  std::uint64_t seed = 5;
};

struct DefenseSpec {
  std::vector<std::string> enabled;  ///< any of ac, nc, fp, strip, depud
  AcOptions ac;
  NcOptions nc;
  int nc_sample = 200;
  FinePruneOptions fp;
  StripOptions strip;
  int strip_suspects = 200;
  DepudOptions depud;
};

struct ExperimentConfig {
  std::string name;
  DataSpec data = toy_data(1);
  int n_labeled = 100;
  std::uint64_t split_seed = 7;
  AttackSpec attack;
  SSLConfig ssl = [] {
    SSLConfig c;
    c.model = toy_classifier();
    c.epochs = 20;
    c.seed = 3;
    return c;
  }();
  /// Also train a supervised model on the labeled split alone (SL CA).
  bool sl_baseline = false;
  ProbeSpec probes;
  DefenseSpec defenses;
  std::string output_dir = "runs";
  /// Mixed into every component seed.
  std::uint64_t seed = 0;

  /// Throws HarnessError naming the offending key.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
/// Unknown keys are errors; missing keys keep their defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json toml_to_json(const std::string& toml_text, const std::string& source = "config");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Sets a dotted key ("attack.epsilon") from a TOML literal; bare words are
/// taken as strings.
void set_override(nlohmann::json& config_json, const std::string& dotted_key, const std::string& literal);
/// Expands `key=v1,v2` sweeps into their cartesian product (first sweep
/// varies slowest).
std::vector<nlohmann::json> expand_sweeps(const nlohmann::json& base, const std::vector<std::string>& sweeps);

/// SHA-256 (hex) of the canonical JSON, output_dir excluded.
std::string config_hash(const ExperimentConfig& config);
/// Hash of the attacker-side inputs only (surrogate and crafting).
std::string craft_hash(const ExperimentConfig& config);
/// splitmix64 of the global seed and a component seed.
std::uint64_t derive_seed(std::uint64_t global, std::uint64_t component);

struct MetricsRecord {
  double ca = 0.0;
  std::optional<double> sl_ca;
  std::optional<double> asr;
  std::optional<double> psnr;
  std::optional<double> ssim;
  std::optional<double> linf;
  std::vector<double> ca_curve;
  std::vector<double> asr_curve;
  std::vector<double> d_curve;
  std::vector<double> c_curve;
};

struct ProvenanceNode {
  std::string artifact;
  std::string side;  ///< "attacker" or "victim"
  std::vector<std::string> inputs;
};

struct ResultRecord {
  std::string config_hash;
  nlohmann::json config;
  std::string status = "ok";  ///< ok, partial or failed
  std::optional<Stage> failed_stage;
  std::string error;
  std::vector<std::string> completed_stages;
  MetricsRecord metrics;
  std::vector<CraftEpoch> craft_history;
  std::vector<DefenseReport> defenses;
  std::map<std::string, std::string> artifacts;  ///< name -> path relative to the run dir
  std::vector<ProvenanceNode> provenance;
  std::vector<std::string> warnings;
  double wall_clock_seconds = 0.0;
  std::map<std::string, std::string> environment;
  bool cached = false;  ///< not persisted
};

nlohmann::json to_json(const ResultRecord& record);
ResultRecord record_from_json(const nlohmann::json& j);
ResultRecord load_record(const std::filesystem::path& run_dir);

struct ZeroKnowledgeAudit {
  bool passed = true;
  std::vector<std::string> violations;
};

/// Walks the provenance graph upstream from the crafting artifacts and
/// fails if any victim-side artifact is reachable.
ZeroKnowledgeAudit audit_zero_knowledge(const ResultRecord& record);

struct RunOptions {
  bool force = false;
  Stage until = Stage::defend;
  std::function<void(const std::string&)> log;
};

/// Runs (or loads from cache) one experiment. Stage failures are reported
/// in the returned record, never thrown; lock conflicts and invalid configs
/// throw HarnessError.
ResultRecord run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Loads the victim and surrogate datasets a config refers to.
RawDataset load_data(const DataSpec& spec);

// ----------------------------------------------------------------- report

/// Writes table.md, table.csv, comparison.md and one curves-<hash>.png
/// (plus .csv) per record into `out_dir`. Records on different datasets are
/// grouped into separate tables.
void write_report(const std::vector<ResultRecord>& records, const std::filesystem::path& out_dir);

/// Panels of line plots rendered to an RGB PNG; each series gets its own
/// panel with the name and y-range printed in the corner.
void plot_series(const std::vector<std::pair<std::string, std::vector<double>>>& series,
                 const std::filesystem::path& path);

}  // namespace sslpoison
