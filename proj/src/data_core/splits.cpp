#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "sslpoison/data_core.hpp"
#include "sslpoison/image_io.hpp"

namespace fs = std::filesystem;

namespace sslpoison {

namespace {

// Fisher-Yates with an explicit engine so shuffles are stable across
// standard-library implementations.
template <typename T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = rng() % i;
    std::swap(v[i - 1], v[j]);
  }
}

std::string file_stem_for(const std::string& id) {
  std::string s = id;
  for (char& c : s) {
    if (c == '/' || c == '\\' || c == ':' || c == ',') c = '_';
  }
  return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

DatasetSplits make_ssl_splits(const RawDataset& raw, int n_labeled, std::uint64_t seed) {
  const int k = raw.num_classes;
  if (k <= 0) throw DataError("make_ssl_splits: dataset has no classes");
  if (n_labeled < 0 || static_cast<std::size_t>(n_labeled) > raw.train.size()) {
    throw DataError("make_ssl_splits: n_labeled " + std::to_string(n_labeled) +
                    " exceeds train size " + std::to_string(raw.train.size()));
  }
  std::vector<std::vector<std::size_t>> by_class(k);
  for (std::size_t i = 0; i < raw.train.size(); ++i) by_class.at(*raw.train[i].label).push_back(i);

  std::mt19937_64 rng(seed);
  std::vector<char> is_labeled(raw.train.size(), 0);
  for (int c = 0; c < k; ++c) {
    const int quota = n_labeled / k + (c < n_labeled % k ? 1 : 0);
    if (static_cast<int>(by_class[c].size()) < quota) {
      throw DataError("make_ssl_splits: class " + std::to_string(c) + " has " +
                      std::to_string(by_class[c].size()) + " examples, needs " + std::to_string(quota));
    }
    shuffle_in_place(by_class[c], rng);
    for (int i = 0; i < quota; ++i) is_labeled[by_class[c][i]] = 1;
  }

  DatasetSplits s;
  s.num_classes = k;
  s.shape = raw.shape;
  for (std::size_t i = 0; i < raw.train.size(); ++i) {
    (is_labeled[i] ? s.labeled : s.unlabeled).push_back(raw.train[i]);
  }
  s.validation = raw.test;
  return s;
}

void validate_splits(const DatasetSplits& splits) {
  std::unordered_set<std::string> seen;
  for (const auto* part : {&splits.labeled, &splits.unlabeled, &splits.validation}) {
    for (const auto& ex : *part) {
      if (!seen.insert(ex.id).second) throw DataError("duplicate id across splits: " + ex.id);
    }
  }
  for (const auto* part : {&splits.labeled, &splits.validation}) {
    for (const auto& ex : *part) {
      if (!ex.label || *ex.label < 0 || *ex.label >= splits.num_classes) {
        throw DataError("labeled example without valid label: " + ex.id);
      }
    }
  }
}

PoisonPlan select_poison_set(const DatasetSplits& splits, int target_class, int count,
                             PoisonMode mode, std::uint64_t seed, double label_fraction) {
  if (target_class < 0 || target_class >= splits.num_classes) {
    throw DataError("target class " + std::to_string(target_class) + " outside [0," +
                    std::to_string(splits.num_classes) + ")");
  }
  if (count < 0) throw DataError("negative poison count");
  if (label_fraction < 0.0 || label_fraction > 1.0) throw DataError("label_fraction outside [0,1]");

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < splits.unlabeled.size(); ++i) {
    if (mode == PoisonMode::inconsistent || splits.unlabeled[i].label == target_class) {
      candidates.push_back(i);
    }
  }
  if (static_cast<int>(candidates.size()) < count) {
    throw DataError("select_poison_set: requested " + std::to_string(count) + " poisons but only " +
                    std::to_string(candidates.size()) + " candidates exist (shortfall " +
                    std::to_string(count - static_cast<int>(candidates.size())) + ")");
  }
  std::mt19937_64 rng(seed);
  shuffle_in_place(candidates, rng);

  PoisonPlan plan;
  plan.target_class = target_class;
  plan.mode = mode;
  plan.poison_count = count;
  plan.label_fraction = label_fraction;
  for (int i = 0; i < count; ++i) plan.selected_ids.push_back(splits.unlabeled[candidates[i]].id);
  return plan;
}

void validate_plan(const PoisonPlan& plan, const DatasetSplits& splits) {
  if (plan.poison_count != static_cast<int>(plan.selected_ids.size())) {
    throw DataError("plan poison_count does not match selected ids");
  }
  std::unordered_map<std::string, const ImageExample*> by_id;
  for (const auto& ex : splits.unlabeled) by_id[ex.id] = &ex;
  std::unordered_set<std::string> seen;
  for (const auto& id : plan.selected_ids) {
    if (!seen.insert(id).second) throw DataError("plan selects id twice: " + id);
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("planned id not in unlabeled split: " + id);
    if (plan.mode == PoisonMode::consistent && it->second->label != plan.target_class) {
      throw DataError("consistent plan contains non-target example: " + id);
    }
  }
}

std::vector<ImageExample> gather_planned(const PoisonPlan& plan, std::span<const ImageExample> pool) {
  std::unordered_map<std::string, const ImageExample*> by_id;
  for (const auto& ex : pool) by_id[ex.id] = &ex;
  std::vector<ImageExample> out;
  out.reserve(plan.selected_ids.size());
  for (const auto& id : plan.selected_ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("planned id not found: " + id);
    out.push_back(*it->second);
  }
  return out;
}

std::string checksum(std::span<const ImageExample> examples) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  for (const auto& ex : examples) {
    EVP_DigestUpdate(ctx, ex.id.data(), ex.id.size());
    const int dims[3] = {ex.shape.height, ex.shape.width, ex.shape.channels};
    EVP_DigestUpdate(ctx, dims, sizeof(dims));
    EVP_DigestUpdate(ctx, ex.pixels.data(), ex.pixels.size());
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

ExportSummary export_poisoned_set(std::span<const ImageExample> examples, const PoisonPlan& plan,
                                  const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const fs::path manifest = out_dir / "manifest.csv";
  std::ofstream out(manifest);
  if (!out) throw DataError("cannot write manifest: " + manifest.string());
  out << "id,origin,mode,target_class,source_label\n";
  for (const auto& ex : examples) {
    write_png(out_dir / (file_stem_for(ex.id) + ".png"), ex.shape, ex.pixels);
    const auto source = ex.source_label ? ex.source_label : ex.label;
    out << ex.id << ',' << to_string(ex.origin) << ',' << to_string(plan.mode) << ','
        << plan.target_class << ',' << (source ? std::to_string(*source) : std::string()) << '\n';
  }
  out.close();
  if (!out) throw DataError("failed writing manifest: " + manifest.string());

  // Lossless check: every file must decode back to the exact pixels.
  for (const auto& ex : examples) {
    ImageShape shape;
    const auto back = read_png(out_dir / (file_stem_for(ex.id) + ".png"), shape);
    if (!(shape == ex.shape) || back != ex.pixels) {
      throw DataError("lossy export detected for " + ex.id);
    }
  }
  return {manifest, checksum(examples)};
}

ImportedSet import_poisoned_set(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.csv";
  std::ifstream in(manifest);
  if (!in) throw DataError("missing manifest: " + manifest.string());
  std::string line;
  std::getline(in, line);
  if (line != "id,origin,mode,target_class,source_label") {
    throw DataError("unexpected manifest header in " + manifest.string());
  }
  ImportedSet set;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 5) throw DataError("malformed manifest row: " + line);
    ImageExample ex;
    ex.id = cells[0];
    ex.origin = origin_from_string(cells[1]);
    set.mode = poison_mode_from_string(cells[2]);
    set.target_class = std::stoi(cells[3]);
    if (!cells[4].empty()) ex.label = std::stoi(cells[4]);
    ex.pixels = read_png(dir / (file_stem_for(ex.id) + ".png"), ex.shape);
    set.examples.push_back(std::move(ex));
  }
  return set;
}

RawDataset substitute_class(const RawDataset& base, int slot, const RawDataset& donor, int donor_class) {
  if (slot < 0 || slot >= base.num_classes) {
    throw DataError("substitution slot " + std::to_string(slot) + " outside [0, " + std::to_string(base.num_classes) + ")");
  }
  if (donor_class < 0 || donor_class >= donor.num_classes) {
    throw DataError("donor class " + std::to_string(donor_class) + " outside [0, " + std::to_string(donor.num_classes) + ")");
  }
  if (!(base.shape == donor.shape)) throw DataError("donor images do not match the base dataset shape");
  RawDataset out;
  out.name = base.name + "+" + donor.name + ":" + std::to_string(donor_class) + "@" + std::to_string(slot);
  out.num_classes = base.num_classes;
  out.shape = base.shape;
  auto fill = [&](const std::vector<ImageExample>& from, const std::vector<ImageExample>& extra, std::vector<ImageExample>& to) {
    for (const auto& ex : from) {
      if (ex.label != slot) to.push_back(ex);
    }
    for (const auto& ex : extra) {
      if (ex.label != donor_class) continue;
      auto copy = ex;
      copy.id = "sub-" + ex.id;
      copy.source_label = donor_class;
      copy.label = slot;
      to.push_back(std::move(copy));
    }
  };
  fill(base.train, donor.train, out.train);
  fill(base.test, donor.test, out.test);
  if (out.train.empty() || out.test.empty()) throw DataError("substitution left an empty split");
  return out;
}

}  // namespace sslpoison
