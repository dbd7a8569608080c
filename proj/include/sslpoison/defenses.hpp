// Backdoor defenses: activation clustering, Neural Cleanse, fine-pruning,
// STRIP and the labeled-vs-unlabeled discriminator (DePuD).
//
// Each defense returns a DefenseReport whose verdicts follow from its
// scores by a fixed threshold rule; the rule's helpers are exposed so the
// verdicts can be re-derived.
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sslpoison/data_core.hpp"
#include "sslpoison/model_zoo.hpp"

namespace sslpoison {

class DefenseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DefenseReport {
  std::string defense;
  std::vector<std::string> keys;  ///< class index or example id per score
  std::vector<double> scores;
  std::vector<bool> flagged;  ///< per key
  bool suspicious = false;    ///< overall verdict
  std::map<std::string, double> summary;
  std::map<std::string, std::vector<double>> series;
  std::map<std::string, std::string> settings;
  std::vector<std::string> notes;
};

// ---------------------------------------------------- activation clustering

struct AcOptions {
  int components = 10;
  double size_threshold = 0.35;
  double silhouette_threshold = 0.2;
  int min_examples = 4;
  int kmeans_iterations = 100;
  std::uint64_t seed = 0;
};

/// Rows of `points` projected onto their top `components` principal axes.
torch::Tensor pca_project(const torch::Tensor& points, int components);
/// Seeded 2-means (k-means++ start, Lloyd iterations); returns 0/1 labels.
std::vector<int> two_means(const torch::Tensor& points, std::uint64_t seed, int iterations = 100);
/// Mean silhouette coefficient of a two-cluster assignment (Euclidean).
double silhouette_score(const torch::Tensor& points, const std::vector<int>& assignment);
bool ac_verdict(double smaller_fraction, double silhouette, const AcOptions& options);

/// Per class: last-hidden-layer activations, PCA, 2-means. Score = smaller
/// cluster fraction; series "silhouette" holds the per-class silhouettes.
DefenseReport activation_clustering(const ClassifierModel& model, std::span<const ImageExample> labeled,
                                    const AcOptions& options = {});

// ---------------------------------------------------------- neural cleanse

struct NcOptions {
  double flip_target = 0.95;
  int steps = 300;
  int batch_size = 32;
  double lr = 0.1;
  double initial_penalty = 1e-3;  ///< weight of the mask L1 norm
  double penalty_factor = 1.5;    ///< multiplied or divided to track the flip target
  int patience = 10;              ///< steps between penalty adjustments
  double anomaly_threshold = 2.0;
  std::uint64_t seed = 0;
};

constexpr double kMadConsistency = 1.4826;

/// |x_c - median| / (1.4826 * MAD) for every entry. All-equal norms give 0.
std::vector<double> anomaly_indices(const std::vector<double>& norms);

/// Reverse-engineers a minimal mask+pattern per class. A class whose flip
/// rate stays below the target gets an infinite norm and a note.
DefenseReport neural_cleanse(const ClassifierModel& model, std::span<const ImageExample> validation_sample,
                             const NcOptions& options = {});

// ------------------------------------------------------------ fine-pruning

struct FinePruneOptions {
  std::vector<double> rates{0.0, 20.0, 40.0, 60.0, 80.0, 90.0, 99.0};  ///< percent
  int finetune_epochs = 2;
  int batch_size = 32;
  double lr = 0.01;
  std::uint64_t seed = 0;
};

/// floor(rate% * channels).
int pruned_channel_count(double rate, int channels);

/// For every rate: zero the least active last-block channels (ranked on
/// `clean_examples`), fine-tune a copy on `finetune_set`, then measure CA on
/// `validation` and ASR on `attack_set` under `pattern`. Series "ca" and
/// "asr" form the prune curve. The input model is not modified.
DefenseReport fine_prune(const ClassifierModel& model, std::span<const ImageExample> clean_examples,
                         std::span<const ImageExample> finetune_set, std::span<const ImageExample> validation,
                         std::span<const ImageExample> attack_set, const PatternSource& pattern, int target_class,
                         const FinePruneOptions& options = {});

// ------------------------------------------------------------------- STRIP

/// Mean Shannon entropy (nats) of the rows of a probability matrix.
double mean_entropy(const torch::Tensor& probs);

/// Entropy of `example` blended (pixel mean) with `blends` distinct images
/// drawn from `clean_pool`.
double strip_entropy(const ClassifierModel& model, const ImageExample& example,
                     std::span<const ImageExample> clean_pool, int blends, std::mt19937_64& rng);

/// Value at `percentile` (0..100) with linear interpolation.
double percentile(std::vector<double> values, double percentile);

struct StripOptions {
  int blends = 10;
  double percentile = 1.0;  ///< of clean entropies, sets the threshold
  std::uint64_t seed = 0;
};

/// Scores `suspects`; the threshold is calibrated on `clean_calibration`.
/// An example is flagged when its entropy falls below the threshold.
/// Series "clean_entropy" and "suspect_entropy" hold the histograms' data.
DefenseReport strip(const ClassifierModel& model, std::span<const ImageExample> suspects,
                    std::span<const ImageExample> clean_calibration, std::span<const ImageExample> clean_pool,
                    const StripOptions& options = {});

// ------------------------------------------------------------------- DePuD

struct DepudOptions {
  ClassifierSpec model;  ///< num_classes and input are overwritten
  int epochs = 8;
  int batch_size = 64;  ///< half labeled, half unlabeled
  /// Steps per epoch; 0 means one pass over the unlabeled set.
  int steps_per_epoch = 0;
  double lr = 0.03;
  double base_weight_decay = 5e-4;
  double weight_decay_factor = 10.0;
  double dropout = 0.5;
  bool blur = true;  ///< 3x3 mean filter on inputs
  double auroc_threshold = 0.75;
  std::uint64_t seed = 0;
};

/// Area under the ROC curve of `scores` for `positive` examples (ties
/// count one half). Throws when either class is empty.
double auroc(const std::vector<double>& scores, const std::vector<bool>& positive);

/// Trains labeled -> 0, unlabeled -> 1 and scores every unlabeled example by
/// P(unlabeled). Poison flags (origin) are used only for the AUROC.
DefenseReport depud(std::span<const ImageExample> labeled, std::span<const ImageExample> unlabeled,
                    const DepudOptions& options = {});

}  // namespace sslpoison
