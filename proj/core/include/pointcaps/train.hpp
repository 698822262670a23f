#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pointcaps/data.hpp"
#include "pointcaps/model.hpp"
#include "pointcaps/optimizer.hpp"

namespace pointcaps {

struct TrainOptions {
  int64_t epochs = 30;
  int64_t batch_size = 16;
  real lr = real(1e-3);
  bool rectify = true;
  // Fractions of the total step count after which the lr drops 10x.
  std::vector<real> decay_at = {real(0.5), real(0.8)};
  // Carved off the shuffled training set for best-checkpoint selection; when
  // the carve would be empty the whole set doubles as validation.
  real val_fraction = real(0.1);
  uint64_t seed = 1;
  bool verbose = false;  // one line per epoch on stderr
};

// One training epoch: loss/margin are means over the epoch's training
// batches; cd and accuracy come from the validation pass that drives
// best-checkpoint selection.
struct EpochMetrics {
  int64_t epoch = 0;
  real loss = 0;
  real margin = 0;
  real cd = 0;
  real accuracy = 0;
};

struct Metrics {
  real accuracy = 0;
  real cd_mean = 0;  // raw; the x1000 convention is applied at reporting time
  real seg_accuracy = 0;
  real seg_iou = 0;
};

struct TrainResult {
  ModelState best_state;   // lowest validation CD
  ModelState final_state;  // after the last completed epoch
  std::vector<EpochMetrics> log;
  int64_t best_epoch = 0;
  bool aborted = false;  // a non-finite value stopped training early
};

// Minimizes margin + gamma * chamfer with true-label masking. A non-finite
// loss or gradient aborts the run and keeps the last epoch's checkpoint.
TrainResult train(const ModelConfig& config, const Dataset& dataset, const TrainOptions& opts);

// Label-free protocol: predict by largest capsule activity, reconstruct from
// the predicted-class row, average Chamfer. Parallel over samples.
Metrics evaluate(const ModelConfig& config, ModelState& state, const Dataset& dataset);

// Per-point capsule assignment: argmax over the first part-capsule layer's
// final routing logits (ties to the lowest index).
std::vector<int64_t> part_assign(const ModelConfig& config, ModelState& state,
                                 const PointCloud& cloud);

// Majority-vote lookup from capsule index to part label, one table per class
// (part ids only mean something within a class). Capsules that captured no
// labeled points fall back to the class's most frequent part.
struct SegmentMap {
  std::map<int64_t, std::vector<int64_t>> capsule_part;
};

SegmentMap fit_segment_map(const ModelConfig& config, ModelState& state, const Dataset& dataset,
                           const std::vector<int64_t>& labeled_indices);

// Per-point accuracy plus IoU averaged over the parts present in each
// sample's ground truth, then over samples. Points with invalid part labels
// are skipped.
Metrics score_segment_map(const ModelConfig& config, ModelState& state, const SegmentMap& map,
                          const Dataset& dataset);

// Fits on a per-class-balanced `fraction` of `train` and scores on `test`.
Metrics segment_eval(const ModelConfig& config, ModelState& state, const Dataset& train,
                     const Dataset& test, real fraction, uint64_t seed);

struct SweepMode {
  enum Kind { Perturb, Outliers } kind = Perturb;
};

struct SweepRow {
  real level = 0;  // sigma, or outlier count
  real accuracy = 0;
  real cd_mean = 0;
};

// Re-evaluates the dataset under increasing corruption. Level 0 leaves the
// clouds untouched, so its row reproduces evaluate() exactly.
std::vector<SweepRow> noise_sweep(const ModelConfig& config, ModelState& state,
                                  const Dataset& dataset, SweepMode::Kind mode,
                                  const std::vector<real>& levels, uint64_t seed);

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);

struct LatentSweep {
  PointCloud base;                  // reconstruction with the latent as-is
  std::vector<PointCloud> clouds;   // one per requested value
  std::vector<real> cd_to_base;
};

// Replaces one latent entry with each of `values` and decodes. The class row
// is picked label-free (largest activity).
LatentSweep latent_perturb(const ModelConfig& config, ModelState& state, const PointCloud& cloud,
                           int64_t dim, const std::vector<real>& values);

// Pointwise mean cloud per class (all clouds of a class share the point
// count). The Chamfer of each sample against its class mean is the baseline
// a learned reconstruction has to beat.
std::map<int64_t, PointCloud> class_mean_shapes(const Dataset& dataset);
real baseline_cd(const Dataset& dataset, const std::map<int64_t, PointCloud>& means);

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& log);

// POINTCAPS_THREADS caps the pool; results are reduced in index order so
// parallel runs are bit-identical to sequential ones.
int worker_count(int64_t jobs);
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace pointcaps
