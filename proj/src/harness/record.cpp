#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "sslpoison/harness.hpp"

namespace sslpoison {

using nlohmann::json;

namespace {

// JSON has no infinity; non-finite values are stored as null and read back
// as +inf.
json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double read_number(const json& j) { return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>(); }

json series(const std::vector<double>& v) {
  json out = json::array();
  for (double x : v) out.push_back(number(x));
  return out;
}

std::vector<double> read_series(const json& j) {
  std::vector<double> out;
  for (const auto& x : j) out.push_back(read_number(x));
  return out;
}

template <typename T>
json optional_number(const std::optional<T>& v) {
  return v ? number(*v) : json(nullptr);
}

std::optional<double> read_optional(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

json report_json(const DefenseReport& r) {
  json s = json::object();
  for (const auto& [k, v] : r.summary) s[k] = number(v);
  json ser = json::object();
  for (const auto& [k, v] : r.series) ser[k] = series(v);
  return {{"defense", r.defense}, {"keys", r.keys},       {"scores", series(r.scores)}, {"flagged", r.flagged},
          {"suspicious", r.suspicious}, {"summary", s}, {"series", ser},              {"settings", r.settings},
          {"notes", r.notes}};
}

DefenseReport read_report(const json& j) {
  DefenseReport r;
  r.defense = j.at("defense").get<std::string>();
  r.keys = j.at("keys").get<std::vector<std::string>>();
  r.scores = read_series(j.at("scores"));
  r.flagged = j.at("flagged").get<std::vector<bool>>();
  r.suspicious = j.at("suspicious").get<bool>();
  for (const auto& [k, v] : j.at("summary").items()) r.summary[k] = read_number(v);
  for (const auto& [k, v] : j.at("series").items()) r.series[k] = read_series(v);
  r.settings = j.at("settings").get<std::map<std::string, std::string>>();
  r.notes = j.at("notes").get<std::vector<std::string>>();
  return r;
}

}  // namespace

json to_json(const ResultRecord& record) {
  const auto& m = record.metrics;
  json metrics = {{"ca", m.ca},
                  {"sl_ca", optional_number(m.sl_ca)},
                  {"asr", optional_number(m.asr)},
                  {"psnr", optional_number(m.psnr)},
                  {"ssim", optional_number(m.ssim)},
                  {"linf", optional_number(m.linf)},
                  {"ca_curve", series(m.ca_curve)},
                  {"asr_curve", series(m.asr_curve)},
                  {"d_curve", series(m.d_curve)},
                  {"c_curve", series(m.c_curve)}};
  json craft = json::array();
  for (const auto& e : record.craft_history) {
    craft.push_back({{"epoch", e.epoch}, {"grad_match", number(e.grad_match)}, {"instance", number(e.instance)},
                     {"lambda_ins", e.lambda_ins}});
  }
  json defenses = json::array();
  for (const auto& r : record.defenses) defenses.push_back(report_json(r));
  json provenance = json::array();
  for (const auto& n : record.provenance) {
    provenance.push_back({{"artifact", n.artifact}, {"side", n.side}, {"inputs", n.inputs}});
  }
  return {{"config_hash", record.config_hash},
          {"config", record.config},
          {"status", record.status},
          {"failed_stage", record.failed_stage ? json(to_string(*record.failed_stage)) : json(nullptr)},
          {"error", record.error},
          {"completed_stages", record.completed_stages},
          {"metrics", metrics},
          {"craft_history", craft},
          {"defenses", defenses},
          {"artifacts", record.artifacts},
          {"provenance", provenance},
          {"warnings", record.warnings},
          {"wall_clock_seconds", record.wall_clock_seconds},
          {"environment", record.environment}};
}

ResultRecord record_from_json(const json& j) {
  try {
    ResultRecord r;
    r.config_hash = j.at("config_hash").get<std::string>();
    r.config = j.at("config");
    r.status = j.at("status").get<std::string>();
    if (!j.at("failed_stage").is_null()) r.failed_stage = stage_from_string(j.at("failed_stage").get<std::string>());
    r.error = j.at("error").get<std::string>();
    r.completed_stages = j.at("completed_stages").get<std::vector<std::string>>();
    const auto& m = j.at("metrics");
    r.metrics.ca = m.at("ca").get<double>();
    r.metrics.sl_ca = read_optional(m, "sl_ca");
    r.metrics.asr = read_optional(m, "asr");
    r.metrics.psnr = read_optional(m, "psnr");
    r.metrics.ssim = read_optional(m, "ssim");
    r.metrics.linf = read_optional(m, "linf");
    r.metrics.ca_curve = read_series(m.at("ca_curve"));
    r.metrics.asr_curve = read_series(m.at("asr_curve"));
    r.metrics.d_curve = read_series(m.at("d_curve"));
    r.metrics.c_curve = read_series(m.at("c_curve"));
    for (const auto& e : j.at("craft_history")) {
      r.craft_history.push_back({e.at("epoch").get<int>(), read_number(e.at("grad_match")),
                                 read_number(e.at("instance")), e.at("lambda_ins").get<double>()});
    }
    for (const auto& d : j.at("defenses")) r.defenses.push_back(read_report(d));
    r.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    for (const auto& n : j.at("provenance")) {
      r.provenance.push_back({n.at("artifact").get<std::string>(), n.at("side").get<std::string>(),
                              n.at("inputs").get<std::vector<std::string>>()});
    }
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
    r.environment = j.at("environment").get<std::map<std::string, std::string>>();
    return r;
  } catch (const json::exception& e) {
    throw HarnessError(std::string("malformed result record: ") + e.what());
  }
}

ResultRecord load_record(const std::filesystem::path& run_dir) {
  const auto path = run_dir / "result.json";
  std::ifstream in(path);
  if (!in) throw HarnessError("no result record at " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw HarnessError(path.string() + ": " + e.what());
  }
  return record_from_json(j);
}

ZeroKnowledgeAudit audit_zero_knowledge(const ResultRecord& record) {
  ZeroKnowledgeAudit audit;
  std::map<std::string, const ProvenanceNode*> nodes;
  for (const auto& n : record.provenance) nodes[n.artifact] = &n;
  std::vector<std::string> frontier;
  for (const auto& n : record.provenance) {
    if (n.artifact == "generator" || n.artifact == "surrogate_model") frontier.push_back(n.artifact);
  }
  std::set<std::string> visited;
  while (!frontier.empty()) {
    const auto name = frontier.back();
    frontier.pop_back();
    if (!visited.insert(name).second) continue;
    const auto it = nodes.find(name);
    if (it == nodes.end()) {
      audit.passed = false;
      audit.violations.push_back("crafting input '" + name + "' has no provenance entry");
      continue;
    }
    if (it->second->side != "attacker") {
      audit.passed = false;
      audit.violations.push_back("crafting reaches victim-side artifact '" + name + "'");
    }
    for (const auto& in : it->second->inputs) frontier.push_back(in);
  }
  return audit;
}

}  // namespace sslpoison
