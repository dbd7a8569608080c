#include <openssl/evp.h>

#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <toml.hpp>

#include "sslpoison/harness.hpp"

namespace sslpoison {

using nlohmann::json;

namespace {

// ------------------------------------------------------------ enum codecs

void parse_enum(const std::string& s, ClassifierArch& out) { out = classifier_arch_from_string(s); }
void parse_enum(const std::string& s, GeneratorArch& out) { out = generator_arch_from_string(s); }
void parse_enum(const std::string& s, SslAlgorithm& out) { out = ssl_algorithm_from_string(s); }
void parse_enum(const std::string& s, PoisonMode& out) { out = poison_mode_from_string(s); }
void parse_enum(const std::string& s, ParameterSubset& out) { out = parameter_subset_from_string(s); }
void parse_enum(const std::string& s, HvpMode& out) { out = hvp_mode_from_string(s); }
void parse_enum(const std::string& s, AttackKind& out) { out = attack_kind_from_string(s); }
void parse_enum(const std::string& s, Situation& out) { out = situation_from_string(s); }

template <typename T>
json encode(const T& v) {
  if constexpr (std::is_enum_v<T>) {
    return to_string(v);
  } else {
    return v;
  }
}

/// Visitor that writes fields into a JSON object.
struct Writer {
  json& out;
  template <typename T>
  void operator()(const char* key, const T& v) {
    out[key] = encode(v);
  }
  template <typename F>
  void group(const char* key, F&& f) {
    json sub = json::object();
    Writer w{sub};
    f(w);
    out[key] = std::move(sub);
  }
};

/// Visitor that reads fields from a JSON object and rejects unknown keys.
struct Reader {
  const json& in;
  std::string path;
  std::set<std::string> seen{};

  template <typename T>
  void operator()(const char* key, T& v) {
    seen.insert(key);
    if (!in.contains(key)) return;
    const auto& node = in.at(key);
    const std::string where = path + key;
    try {
      if constexpr (std::is_enum_v<T>) {
        parse_enum(node.get<std::string>(), v);
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!node.is_boolean()) throw HarnessError(where + ": expected a boolean");
        v = node.get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!node.is_number_integer()) throw HarnessError(where + ": expected an integer");
        if (std::is_unsigned_v<T> && node.get<std::int64_t>() < 0) throw HarnessError(where + ": must be >= 0");
        v = node.get<T>();
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!node.is_number()) throw HarnessError(where + ": expected a number");
        v = node.get<T>();
      } else {
        v = node.get<T>();
      }
    } catch (const HarnessError&) {
      throw;
    } catch (const std::exception& e) {
      throw HarnessError(where + ": " + e.what());
    }
  }

  template <typename F>
  void group(const char* key, F&& f) {
    seen.insert(key);
    static const json empty = json::object();
    const json* sub = &empty;
    if (in.contains(key)) {
      if (!in.at(key).is_object()) throw HarnessError(path + key + ": expected a table");
      sub = &in.at(key);
    }
    Reader r{*sub, path + key + "."};
    f(r);
    r.finish();
  }

  void finish() const {
    for (const auto& [k, _] : in.items()) {
      if (!seen.count(k)) throw HarnessError("unknown config key '" + path + k + "'");
    }
  }
};

// ------------------------------------------------------------ field lists

template <typename V>
void visit(V& v, ToyShapesOptions& o) {
  v("num_classes", o.num_classes);
  v("train_per_class", o.train_per_class);
  v("test_per_class", o.test_per_class);
  v("image_size", o.image_size);
  v("pixel_noise", o.pixel_noise);
  v("hue_jitter", o.hue_jitter);
  v("max_rotation", o.max_rotation);
  v("distractor_rate", o.distractor_rate);
  v("seed", o.seed);
}

template <typename V>
void visit(V& v, DataSpec& o) {
  v("dataset", o.dataset);
  v("root", o.root);
  v.group("toy", [&](auto& s) { visit(s, o.toy); });
}

template <typename V>
void visit(V& v, ClassifierSpec& o) {
  v("arch", o.arch);
  v("width", o.width);
  v("dropout", o.dropout);
}

template <typename V>
void visit(V& v, AugmentOptions& o) {
  v("horizontal_flip", o.horizontal_flip);
  v("crop_padding", o.crop_padding);
  v("strong_ops", o.strong_ops);
  v("cutout_fraction", o.cutout_fraction);
}

template <typename V>
void visit(V& v, SSLConfig& o) {
  v("algorithm", o.algorithm);
  v.group("model", [&](auto& s) { visit(s, o.model); });
  v("epochs", o.epochs);
  v("steps_per_epoch", o.steps_per_epoch);
  v("labeled_batch", o.labeled_batch);
  v("unlabeled_batch", o.unlabeled_batch);
  v("lr", o.lr);
  v("momentum", o.momentum);
  v("weight_decay", o.weight_decay);
  v("threshold", o.threshold);
  v("ema_decay", o.ema_decay);
  v("unlabeled_weight", o.unlabeled_weight);
  v("ramp_fraction", o.ramp_fraction);
  v("vat_radius", o.vat_radius);
  v("vat_xi", o.vat_xi);
  v("mixup_alpha", o.mixup_alpha);
  v.group("augment", [&](auto& s) { visit(s, o.augment); });
  v("seed", o.seed);
}

template <typename V>
void visit(V& v, SurrogateConfig& o) {
  v.group("model", [&](auto& s) { visit(s, o.model); });
  v("epochs", o.epochs);
  v("batch_size", o.batch_size);
  v("lr", o.lr);
  v("momentum", o.momentum);
  v("weight_decay", o.weight_decay);
  v("augment", o.augment);
  v.group("augment_options", [&](auto& s) { visit(s, o.augment_options); });
  v("min_accuracy", o.min_accuracy);
  v("seed", o.seed);
}

template <typename V>
void visit(V& v, CraftConfig& o) {
  v("generator", o.generator.arch);
  v("generator_width", o.generator.width);
  v("epsilon", o.generator.epsilon);
  v("lambda_ins", o.lambda_ins);
  v("lambda_multiplier", o.lambda_multiplier);
  v("reference_period", o.reference_period);
  v("reference_epochs", o.reference_epochs);
  v("epochs", o.epochs);
  v("batch_size", o.batch_size);
  v("steps_per_epoch", o.steps_per_epoch);
  v("lr", o.lr);
  v("hvp", o.hvp);
  v("seed", o.seed);
}

template <typename V>
void visit(V& v, AttackSpec& o) {
  v("kind", o.kind);
  v("mode", o.mode);
  v("situation", o.situation);
  v("target_class", o.target_class);
  v("poison_count", o.poison_count);
  v("plan_seed", o.plan_seed);
  v("label_fraction", o.label_fraction);
  v.group("surrogate_data", [&](auto& s) { visit(s, o.surrogate_data); });
  v("substitute_slot", o.substitute_slot);
  v.group("substitute_donor", [&](auto& s) { visit(s, o.substitute_donor); });
  v.group("surrogate", [&](auto& s) { visit(s, o.surrogate); });
  v("pool_size", o.pool_size);
  v("subset", o.subset);
  v.group("craft", [&](auto& s) { visit(s, o.craft); });
  v.group("patch", [&](auto& s) {
    s("top", o.patch.top);
    s("left", o.patch.left);
    s("size", o.patch.size);
  });
  v.group("clb", [&](auto& s) {
    s("epsilon", o.clb.epsilon);
    s("steps", o.clb.steps);
    s("step_size", o.clb.step_size);
  });
}

template <typename V>
void visit(V& v, ProbeSpec& o) {
  v("asr", o.asr);
  v("d", o.d);
  v("c", o.c);
  v("c_sample", o.c_sample);
  v("c_pool", o.c_pool);
  v("seed", o.seed);
}

template <typename V>
void visit(V& v, DefenseSpec& o) {
  v("enabled", o.enabled);
  v.group("ac", [&](auto& s) {
    s("components", o.ac.components);
    s("size_threshold", o.ac.size_threshold);
    s("silhouette_threshold", o.ac.silhouette_threshold);
    s("min_examples", o.ac.min_examples);
    s("kmeans_iterations", o.ac.kmeans_iterations);
    s("seed", o.ac.seed);
  });
  v.group("nc", [&](auto& s) {
    s("flip_target", o.nc.flip_target);
    s("steps", o.nc.steps);
    s("batch_size", o.nc.batch_size);
    s("lr", o.nc.lr);
    s("initial_penalty", o.nc.initial_penalty);
    s("penalty_factor", o.nc.penalty_factor);
    s("patience", o.nc.patience);
    s("anomaly_threshold", o.nc.anomaly_threshold);
    s("sample", o.nc_sample);
    s("seed", o.nc.seed);
  });
  v.group("fp", [&](auto& s) {
    s("rates", o.fp.rates);
    s("finetune_epochs", o.fp.finetune_epochs);
    s("batch_size", o.fp.batch_size);
    s("lr", o.fp.lr);
    s("seed", o.fp.seed);
  });
  v.group("strip", [&](auto& s) {
    s("blends", o.strip.blends);
    s("percentile", o.strip.percentile);
    s("suspects", o.strip_suspects);
    s("seed", o.strip.seed);
  });
  v.group("depud", [&](auto& s) {
    s.group("model", [&](auto& m) { visit(m, o.depud.model); });
    s("epochs", o.depud.epochs);
    s("batch_size", o.depud.batch_size);
    s("steps_per_epoch", o.depud.steps_per_epoch);
    s("lr", o.depud.lr);
    s("base_weight_decay", o.depud.base_weight_decay);
    s("weight_decay_factor", o.depud.weight_decay_factor);
    s("dropout", o.depud.dropout);
    s("blur", o.depud.blur);
    s("auroc_threshold", o.depud.auroc_threshold);
    s("seed", o.depud.seed);
  });
}

template <typename V>
void visit(V& v, ExperimentConfig& o) {
  v("name", o.name);
  v("seed", o.seed);
  v("output_dir", o.output_dir);
  v("n_labeled", o.n_labeled);
  v("split_seed", o.split_seed);
  v("sl_baseline", o.sl_baseline);
  v.group("data", [&](auto& s) { visit(s, o.data); });
  v.group("attack", [&](auto& s) { visit(s, o.attack); });
  v.group("ssl", [&](auto& s) { visit(s, o.ssl); });
  v.group("probes", [&](auto& s) { visit(s, o.probes); });
  v.group("defenses", [&](auto& s) { visit(s, o.defenses); });
}

json toml_node_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    json out = json::object();
    for (const auto& [k, v] : *t) out[std::string(k.str())] = toml_node_to_json(v);
    return out;
  }
  if (const auto* a = node.as_array()) {
    json out = json::array();
    for (const auto& v : *a) out.push_back(toml_node_to_json(v));
    return out;
  }
  if (const auto* v = node.as_string()) return v->get();
  if (const auto* v = node.as_integer()) return v->get();
  if (const auto* v = node.as_floating_point()) return v->get();
  if (const auto* v = node.as_boolean()) return v->get();
  throw HarnessError("unsupported TOML value (dates and times are not config values)");
}

std::string sha256_hex(const std::string& text) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

}  // namespace

// ------------------------------------------------------------------ enums

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::data: return "data";
    case Stage::craft: return "craft";
    case Stage::poison: return "poison";
    case Stage::train: return "train";
    case Stage::evaluate: return "evaluate";
    case Stage::defend: return "defend";
  }
  return "?";
}

Stage stage_from_string(const std::string& s) {
  for (auto st : {Stage::data, Stage::craft, Stage::poison, Stage::train, Stage::evaluate, Stage::defend}) {
    if (to_string(st) == s) return st;
  }
  throw HarnessError("unknown stage: " + s);
}

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::none: return "none";
    case AttackKind::ours: return "ours";
    case AttackKind::badnets: return "badnets";
    case AttackKind::clb: return "clb";
  }
  return "?";
}

AttackKind attack_kind_from_string(const std::string& s) {
  for (auto k : {AttackKind::none, AttackKind::ours, AttackKind::badnets, AttackKind::clb}) {
    if (to_string(k) == s) return k;
  }
  throw HarnessError("unknown attack kind '" + s + "' (none, ours, badnets, clb)");
}

std::string to_string(Situation s) {
  switch (s) {
    case Situation::standard: return "default";
    case Situation::s1: return "S1";
    case Situation::s2: return "S2";
    case Situation::s3: return "S3";
  }
  return "?";
}

Situation situation_from_string(const std::string& s) {
  for (auto v : {Situation::standard, Situation::s1, Situation::s2, Situation::s3}) {
    if (to_string(v) == s) return v;
  }
  throw HarnessError("unknown situation '" + s + "' (default, S1, S2, S3)");
}

// ----------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  const std::set<std::string> known{"ac", "nc", "fp", "strip", "depud"};
  for (const auto& d : defenses.enabled) {
    if (!known.count(d)) throw HarnessError("defenses.enabled: unknown defense '" + d + "'");
  }
  if (n_labeled <= 0) throw HarnessError("n_labeled must be positive");
  const bool attacking = attack.kind != AttackKind::none;
  if (attacking && attack.poison_count <= 0) throw HarnessError("attack.poison_count must be positive");
  if (attack.situation == Situation::s3 && attack.mode != PoisonMode::inconsistent) {
    throw HarnessError("situation S3 requires attack.mode = \"inconsistent\"");
  }
  if (attack.situation == Situation::s1 && attack.kind != AttackKind::ours) {
    throw HarnessError("situation S1 concerns the surrogate dataset and needs attack.kind = \"ours\"");
  }
  if (attack.situation != Situation::s2 && attack.label_fraction > 0.0) {
    throw HarnessError("attack.label_fraction is only meaningful in situation S2");
  }
  if (attack.label_fraction > 1.0) throw HarnessError("attack.label_fraction must be <= 1");
  if (attack.pool_size <= 0) throw HarnessError("attack.pool_size must be positive");
  if (probes.c && probes.c_sample <= 0) throw HarnessError("probes.c_sample must be positive");
  if (output_dir.empty()) throw HarnessError("output_dir must not be empty");
  try {
    ssl.validate();
    if (attack.kind == AttackKind::ours) attack.craft.validate();
  } catch (const std::exception& e) {
    throw HarnessError(e.what());
  }
}

json to_json(const ExperimentConfig& config) {
  json out = json::object();
  Writer w{out};
  visit(w, const_cast<ExperimentConfig&>(config));
  return out;
}

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw HarnessError("config root must be a table");
  ExperimentConfig config;
  Reader r{j, ""};
  try {
    visit(r, config);
  } catch (const HarnessError&) {
    throw;
  } catch (const std::exception& e) {
    throw HarnessError(e.what());
  }
  r.finish();
  return config;
}

json toml_to_json(const std::string& toml_text, const std::string& source) {
  try {
    const auto table = toml::parse(toml_text, source);
    return toml_node_to_json(table);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << source << ":" << e.source().begin.line << ":" << e.source().begin.column << ": " << e.description();
    throw HarnessError(os.str());
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw HarnessError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(toml_to_json(ss.str(), path.string()));
}

void set_override(json& config_json, const std::string& dotted_key, const std::string& literal) {
  json value;
  try {
    value = toml_to_json("v = " + literal).at("v");
  } catch (const HarnessError&) {
    value = literal;
  }
  json* node = &config_json;
  std::stringstream ss(dotted_key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty() || dotted_key.empty()) throw HarnessError("empty override key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
    if (!node->is_object()) throw HarnessError("override '" + dotted_key + "': " + parts[i] + " is not a table");
  }
  (*node)[parts.back()] = value;
}

std::vector<json> expand_sweeps(const json& base, const std::vector<std::string>& sweeps) {
  std::vector<json> out{base};
  for (const auto& sweep : sweeps) {
    const auto eq = sweep.find('=');
    if (eq == std::string::npos || eq == 0) throw HarnessError("sweep '" + sweep + "' is not key=v1,v2,...");
    const auto key = sweep.substr(0, eq);
    std::vector<std::string> values;
    std::stringstream ss(sweep.substr(eq + 1));
    std::string v;
    while (std::getline(ss, v, ',')) values.push_back(v);
    if (values.empty()) throw HarnessError("sweep '" + sweep + "' has no values");
    std::vector<json> next;
    for (const auto& cfg : out) {
      for (const auto& value : values) {
        auto copy = cfg;
        set_override(copy, key, value);
        next.push_back(std::move(copy));
      }
    }
    out = std::move(next);
  }
  return out;
}

std::string config_hash(const ExperimentConfig& config) {
  auto j = to_json(config);
  j.erase("output_dir");
  return sha256_hex(j.dump()).substr(0, 16);
}

std::string craft_hash(const ExperimentConfig& config) {
  const auto full = to_json(config);
  const auto& a = full.at("attack");
  json j = {{"surrogate_data", a.at("surrogate_data")},
            {"surrogate", a.at("surrogate")},
            {"craft", a.at("craft")},
            {"target_class", a.at("target_class")},
            {"pool_size", a.at("pool_size")},
            {"subset", a.at("subset")},
            {"situation", a.at("situation") == "S1" ? "S1" : "default"},
            {"seed", config.seed}};
  if (a.at("situation") == "S1") {
    j["substitute_slot"] = a.at("substitute_slot");
    j["substitute_donor"] = a.at("substitute_donor");
  }
  return sha256_hex(j.dump()).substr(0, 16);
}

std::uint64_t derive_seed(std::uint64_t global, std::uint64_t component) {
  std::uint64_t z = global * 0x9e3779b97f4a7c15ULL + component + 0x632be59bd9b4e019ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace sslpoison
