// Dataset ingestion, SSL split construction, poison-set selection and
// lossless export/import of poisoned example sets.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sslpoison {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Origin { clean, poisoned };
enum class PoisonMode { consistent, inconsistent };

std::string to_string(Origin origin);
std::string to_string(PoisonMode mode);
Origin origin_from_string(const std::string& s);
PoisonMode poison_mode_from_string(const std::string& s);

struct ImageShape {
  int height = 0;
  int width = 0;
  int channels = 0;

  [[nodiscard]] std::size_t size() const {
    return static_cast<std::size_t>(height) * width * channels;
  }
  bool operator==(const ImageShape&) const = default;
};

/// One image with HWC 8-bit pixels. The uint8 storage makes the [0,255]
/// pixel-range invariant structural.
struct ImageExample {
  std::string id;
  ImageShape shape;
  std::vector<std::uint8_t> pixels;
  std::optional<int> label;
  Origin origin = Origin::clean;
  /// Class index in the source dataset when it differs from `label`
  /// (surrogate class remapping); unset otherwise.
  std::optional<int> source_label;

  [[nodiscard]] std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * shape.width + x) * shape.channels + c];
  }
  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * shape.width + x) * shape.channels + c];
  }
};

/// Canonical train/test form of a dataset before any SSL partitioning.
struct RawDataset {
  std::string name;
  int num_classes = 0;
  ImageShape shape;
  std::vector<ImageExample> train;
  std::vector<ImageExample> test;
};

/// Labeled X, unlabeled U and validation X_val. Unlabeled examples keep their
/// oracle labels for evaluation; trainers only ever see `unlabeled` pixels.
struct DatasetSplits {
  std::vector<ImageExample> labeled;
  std::vector<ImageExample> unlabeled;
  std::vector<ImageExample> validation;
  int num_classes = 0;
  ImageShape shape;
};

struct PoisonPlan {
  int target_class = 0;
  PoisonMode mode = PoisonMode::consistent;
  std::vector<std::string> selected_ids;
  int poison_count = 0;
  /// Fraction of poisons moved into the labeled split with their oracle
  /// label (situation S2). Zero in every other situation.
  double label_fraction = 0.0;
};

// ---------------------------------------------------------------- loading

/// Loads a dataset from its canonical on-disk layout.
///
///  - "cifar10":  data_batch_{1..5}.bin + test_batch.bin (binary version),
///                either directly under `root` or under root/cifar-10-batches-bin.
///  - "cifar100": train.bin + test.bin (fine labels), optionally under
///                root/cifar-100-binary.
///  - "svhn":     train_32x32.mat + test_32x32.mat (MATLAB v5; label 10 -> 0).
///  - "toy-shapes": procedurally generated, `root` ignored (default options).
///  - anything else: PNG image folder, `<root>/<class>/<id>.png`, or
///    `<root>/train/<class>/...` + `<root>/test/<class>/...`.
///
/// Throws DataError naming the offending file on missing or corrupt input.
RawDataset load_dataset(const std::string& name, const std::filesystem::path& root);

RawDataset load_cifar10(const std::filesystem::path& root);
RawDataset load_cifar100(const std::filesystem::path& root);
RawDataset load_svhn(const std::filesystem::path& root);
RawDataset load_image_folder(const std::filesystem::path& root, const std::string& name = "folder");

/// Writes a dataset in the image-folder layout (train/ and test/ subtrees).
void save_image_folder(const RawDataset& dataset, const std::filesystem::path& root);

/// Surrogate-side dataset for a victim whose dataset is unknown: class
/// `slot` of `base` is replaced by the `donor_class` images of `donor`,
/// relabelled `slot` with their original class kept in source_label.
RawDataset substitute_class(const RawDataset& base, int slot, const RawDataset& donor, int donor_class);

// ----------------------------------------------------------------- splits

/// Class-balanced labeled split of `n_labeled` examples. Per-class quota is
/// floor(n_labeled / K); the remainder goes one each to the lowest class
/// indices. Unlabeled = the rest of train, validation = test.
DatasetSplits make_ssl_splits(const RawDataset& raw, int n_labeled, std::uint64_t seed);

/// Checks disjointness and label validity; throws DataError on violation.
void validate_splits(const DatasetSplits& splits);

// ---------------------------------------------------------------- poisons

/// Consistent mode samples `count` unlabeled examples of `target_class`
/// without replacement; inconsistent mode samples uniformly from all of U.
PoisonPlan select_poison_set(const DatasetSplits& splits, int target_class, int count,
                             PoisonMode mode, std::uint64_t seed, double label_fraction = 0.0);

/// Throws DataError when a plan violates its invariants against `splits`.
void validate_plan(const PoisonPlan& plan, const DatasetSplits& splits);

/// Returns copies of the examples named in `plan`, in plan order.
std::vector<ImageExample> gather_planned(const PoisonPlan& plan,
                                         std::span<const ImageExample> pool);

// ----------------------------------------------------------- export/import

struct ExportSummary {
  std::filesystem::path manifest;
  std::string checksum;  ///< SHA-256 over ids and pixel bytes, hex.
};

/// Writes one PNG per example plus `manifest.csv`
/// (`id,origin,mode,target_class,source_label`), then re-reads every file
/// and fails hard if any pixel differs.
ExportSummary export_poisoned_set(std::span<const ImageExample> examples, const PoisonPlan& plan,
                                  const std::filesystem::path& out_dir);

struct ImportedSet {
  std::vector<ImageExample> examples;
  PoisonMode mode = PoisonMode::consistent;
  int target_class = 0;
};

ImportedSet import_poisoned_set(const std::filesystem::path& dir);

/// Deterministic SHA-256 (hex) over ids, shapes and pixels.
std::string checksum(std::span<const ImageExample> examples);

}  // namespace sslpoison
