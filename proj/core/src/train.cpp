#include "pointcaps/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "pointcaps/errors.hpp"

namespace pointcaps {

// ---- parallel helpers -------------------------------------------------------

int worker_count(int64_t jobs) {
  if (jobs < 1) return 1;
  int64_t cap = static_cast<int64_t>(std::thread::hardware_concurrency());
  if (cap < 1) cap = 1;
  if (const char* env = std::getenv("POINTCAPS_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) cap = v;
  }
  return static_cast<int>(std::min(cap, jobs));
}

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  const int workers = worker_count(n);
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto body = [&]() {
    for (;;) {
      const int64_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        next.store(n);  // stop handing out work
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) pool.emplace_back(body);
  for (std::thread& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---- local utilities ------------------------------------------------------------

namespace {

constexpr real kOutlierSigma = real(0.2);

uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

int64_t bounded_int(std::mt19937_64& rng, int64_t n) {
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x;
  do { x = rng(); } while (x >= limit);
  return static_cast<int64_t>(x % un);
}

void shuffle_ids(std::vector<int64_t>& v, std::mt19937_64& rng) {
  for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
    std::swap(v[static_cast<size_t>(i)], v[static_cast<size_t>(bounded_int(rng, i + 1))]);
  }
}

Tensor stack_ids(const Dataset& ds, const std::vector<int64_t>& ids, int64_t begin, int64_t count,
                 bool with_normals) {
  const int64_t n = ds[static_cast<size_t>(ids[static_cast<size_t>(begin)])].count;
  const int64_t c = with_normals ? 6 : 3;
  std::vector<real> data;
  data.reserve(static_cast<size_t>(count * n * c));
  for (int64_t k = 0; k < count; ++k) {
    Tensor t = cloud_to_tensor(ds[static_cast<size_t>(ids[static_cast<size_t>(begin + k)])],
                               with_normals);
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  return Tensor::from({count, n, c}, std::move(data));
}

PointCloud tensor_to_cloud(const Tensor& t) {
  if (t.rank() != 2 || t.shape().back() != 3) {
    throw ContractError("tensor_to_cloud: expected [N, 3], got " + shape_str(t.shape()));
  }
  PointCloud pc;
  pc.count = t.shape()[0];
  pc.points = t.values();
  return pc;
}

void check_dataset(const ModelConfig& c, const Dataset& ds, const char* who) {
  if (ds.empty()) throw InputError(std::string(who) + ": empty dataset");
  for (size_t i = 0; i < ds.size(); ++i) {
    if (ds[i].count != c.num_points) {
      throw InputError(std::string(who) + ": cloud " + std::to_string(i) + " has " +
                       std::to_string(ds[i].count) + " points, config expects " +
                       std::to_string(c.num_points));
    }
    if (c.use_normals && !ds[i].has_normals()) {
      throw InputError(std::string(who) + ": cloud " + std::to_string(i) +
                       " has no normals but the config uses them");
    }
  }
}

}  // namespace

// ---- evaluation --------------------------------------------------------------

Metrics evaluate(const ModelConfig& config, ModelState& state, const Dataset& dataset) {
  check_dataset(config, dataset, "evaluate");
  const int64_t n = static_cast<int64_t>(dataset.size());
  std::vector<real> cds(static_cast<size_t>(n));
  std::vector<char> correct(static_cast<size_t>(n));
  parallel_for(n, [&](int64_t i) {
    NoGradScope ng;  // eval mode: state is strictly read-only
    const PointCloud& pc = dataset[static_cast<size_t>(i)];
    if (pc.label < 0) throw InputError("evaluate: cloud " + std::to_string(i) + " is unlabeled");
    Tensor input = cloud_to_tensor(pc, config.use_normals);
    ForwardOutput out = forward(input, config, state, /*training=*/false, nullptr);
    const int64_t pred = argmax_rows(out.class_lengths)[0];
    correct[static_cast<size_t>(i)] = pred == pc.label ? 1 : 0;
    cds[static_cast<size_t>(i)] =
        chamfer_distance(cloud_to_tensor(pc, false), out.reconstruction).item();
  });
  Metrics m;
  real acc = 0, cd = 0;
  for (int64_t i = 0; i < n; ++i) {  // index order keeps the sum deterministic
    acc += correct[static_cast<size_t>(i)];
    cd += cds[static_cast<size_t>(i)];
  }
  m.accuracy = acc / static_cast<real>(n);
  m.cd_mean = cd / static_cast<real>(n);
  return m;
}

// ---- training -----------------------------------------------------------------

TrainResult train(const ModelConfig& config, const Dataset& dataset, const TrainOptions& opts) {
  config.validate();
  check_dataset(config, dataset, "train");
  if (opts.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (opts.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  const int64_t n = static_cast<int64_t>(dataset.size());

  std::mt19937_64 rng(opts.seed);
  std::vector<int64_t> ids(static_cast<size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  shuffle_ids(ids, rng);
  int64_t val_n = static_cast<int64_t>(opts.val_fraction * static_cast<real>(n));
  if (val_n >= n) val_n = n - 1;
  std::vector<int64_t> train_ids, val_ids;
  if (val_n < 1) {
    train_ids = ids;
    val_ids = ids;  // too small to carve: validate on the training set itself
  } else {
    val_ids.assign(ids.begin(), ids.begin() + val_n);
    train_ids.assign(ids.begin() + val_n, ids.end());
  }
  Dataset val_set;
  val_set.reserve(val_ids.size());
  for (int64_t i : val_ids) val_set.push_back(dataset[static_cast<size_t>(i)]);

  const int64_t train_n = static_cast<int64_t>(train_ids.size());
  const int64_t steps_per_epoch = (train_n + opts.batch_size - 1) / opts.batch_size;
  const int64_t total_steps = steps_per_epoch * opts.epochs;

  ModelState state = ModelState::init(config, opts.seed);
  RAdamOptions ro;
  ro.lr = opts.lr;
  ro.rectify = opts.rectify;
  for (real f : opts.decay_at) {
    const int64_t at = static_cast<int64_t>(f * static_cast<real>(total_steps));
    if (at >= 1 && at < total_steps) ro.decay_steps.push_back(at);
  }
  std::sort(ro.decay_steps.begin(), ro.decay_steps.end());
  RAdam opt(state.parameters(), ro);

  TrainResult res;
  res.best_state = state.clone();
  ModelState last_good = state.clone();
  real best_cd = std::numeric_limits<real>::infinity();

  try {
    for (int64_t epoch = 1; epoch <= opts.epochs; ++epoch) {
      shuffle_ids(train_ids, rng);
      real sum_loss = 0, sum_margin = 0;
      for (int64_t start = 0; start < train_n; start += opts.batch_size) {
        const int64_t bsz = std::min(opts.batch_size, train_n - start);
        Tensor input = stack_ids(dataset, train_ids, start, bsz, config.use_normals);
        Tensor target = stack_ids(dataset, train_ids, start, bsz, false);
        std::vector<int64_t> labels(static_cast<size_t>(bsz));
        for (int64_t k = 0; k < bsz; ++k) {
          labels[static_cast<size_t>(k)] =
              dataset[static_cast<size_t>(train_ids[static_cast<size_t>(start + k)])].label;
        }
        Tape tape;
        {
          TapeScope scope(tape);
          ForwardOutput out = forward(input, config, state, /*training=*/true, &labels);
          Tensor margin = margin_loss_batch(out.class_lengths, labels, config.margin_m_plus,
                                            config.margin_m_minus, config.margin_lambda);
          Tensor cd = mean(chamfer_distance(target, out.reconstruction));
          Tensor loss = add(margin, scale(cd, config.chamfer_gamma));
          tape.backward(loss);
          sum_loss += loss.item() * static_cast<real>(bsz);
          sum_margin += margin.item() * static_cast<real>(bsz);
        }
        opt.step();
      }
      Metrics vm = evaluate(config, state, val_set);
      EpochMetrics em;
      em.epoch = epoch;
      em.loss = sum_loss / static_cast<real>(train_n);
      em.margin = sum_margin / static_cast<real>(train_n);
      em.cd = vm.cd_mean;
      em.accuracy = vm.accuracy;
      res.log.push_back(em);
      if (vm.cd_mean < best_cd) {
        best_cd = vm.cd_mean;
        res.best_state = state.clone();
        res.best_epoch = epoch;
      }
      last_good = state.clone();
      if (opts.verbose) {
        std::fprintf(stderr, "epoch %lld/%lld loss %.6f margin %.6f val_cd %.6f val_acc %.4f\n",
                     static_cast<long long>(epoch), static_cast<long long>(opts.epochs), em.loss,
                     em.margin, em.cd, em.accuracy);
      }
    }
  } catch (const NumericError& e) {
    std::fprintf(stderr, "training aborted: %s\n", e.what());
    res.aborted = true;
    res.final_state = last_good;
    return res;
  }
  res.final_state = state;
  return res;
}

// ---- per-point parts -----------------------------------------------------------

std::vector<int64_t> part_assign(const ModelConfig& config, ModelState& state,
                                 const PointCloud& cloud) {
  NoGradScope ng;
  Tensor input = cloud_to_tensor(cloud, config.use_normals);
  EncodeOutput enc = encode(input, config, state, /*training=*/false);
  return argmax_rows(enc.part_logits);
}

SegmentMap fit_segment_map(const ModelConfig& config, ModelState& state, const Dataset& dataset,
                           const std::vector<int64_t>& labeled_indices) {
  if (labeled_indices.empty()) throw InputError("fit_segment_map: no labeled samples");
  const int64_t k = static_cast<int64_t>(labeled_indices.size());
  std::vector<std::vector<int64_t>> assigns(static_cast<size_t>(k));
  parallel_for(k, [&](int64_t i) {
    const PointCloud& pc = dataset.at(static_cast<size_t>(labeled_indices[static_cast<size_t>(i)]));
    if (!pc.has_parts()) throw InputError("fit_segment_map: cloud has no part labels");
    assigns[static_cast<size_t>(i)] = part_assign(config, state, pc);
  });

  // counts[class][capsule][part] over the labeled points
  std::map<int64_t, std::map<int64_t, std::map<int64_t, int64_t>>> counts;
  std::map<int64_t, std::map<int64_t, int64_t>> class_part_freq;
  for (int64_t i = 0; i < k; ++i) {
    const PointCloud& pc = dataset[static_cast<size_t>(labeled_indices[static_cast<size_t>(i)])];
    const auto& as = assigns[static_cast<size_t>(i)];
    for (int64_t p = 0; p < pc.count; ++p) {
      const int64_t part = pc.part_labels[static_cast<size_t>(p)];
      if (part < 0) continue;
      counts[pc.label][as[static_cast<size_t>(p)]][part] += 1;
      class_part_freq[pc.label][part] += 1;
    }
  }

  SegmentMap out;
  for (const auto& [label, freq] : class_part_freq) {
    int64_t fallback = -1, fallback_n = -1;
    for (const auto& [part, cnt] : freq) {
      if (cnt > fallback_n) { fallback = part; fallback_n = cnt; }
    }
    std::vector<int64_t> table(static_cast<size_t>(config.capa_count), fallback);
    const auto& caps = counts[label];
    for (const auto& [cap, per_part] : caps) {
      int64_t best = -1, best_n = -1;
      for (const auto& [part, cnt] : per_part) {
        if (cnt > best_n) { best = part; best_n = cnt; }
      }
      if (cap >= 0 && cap < config.capa_count) table[static_cast<size_t>(cap)] = best;
    }
    out.capsule_part[label] = std::move(table);
  }
  return out;
}

Metrics score_segment_map(const ModelConfig& config, ModelState& state, const SegmentMap& map,
                          const Dataset& dataset) {
  check_dataset(config, dataset, "score_segment_map");
  const int64_t n = static_cast<int64_t>(dataset.size());
  std::vector<int64_t> hits(static_cast<size_t>(n)), totals(static_cast<size_t>(n));
  std::vector<real> ious(static_cast<size_t>(n));
  parallel_for(n, [&](int64_t i) {
    const PointCloud& pc = dataset[static_cast<size_t>(i)];
    if (!pc.has_parts()) throw InputError("score_segment_map: cloud has no part labels");
    const auto table_it = map.capsule_part.find(pc.label);
    if (table_it == map.capsule_part.end()) {
      throw InputError("score_segment_map: no capsule map for class " + std::to_string(pc.label));
    }
    const std::vector<int64_t>& table = table_it->second;
    const std::vector<int64_t> as = part_assign(config, state, pc);
    std::vector<int64_t> pred(static_cast<size_t>(pc.count));
    for (int64_t p = 0; p < pc.count; ++p) {
      pred[static_cast<size_t>(p)] = table[static_cast<size_t>(as[static_cast<size_t>(p)])];
    }
    int64_t hit = 0, total = 0;
    std::set<int64_t> present;
    for (int64_t p = 0; p < pc.count; ++p) {
      const int64_t gt = pc.part_labels[static_cast<size_t>(p)];
      if (gt < 0) continue;
      present.insert(gt);
      ++total;
      if (pred[static_cast<size_t>(p)] == gt) ++hit;
    }
    real iou_sum = 0;
    for (int64_t part : present) {
      int64_t inter = 0, uni = 0;
      for (int64_t p = 0; p < pc.count; ++p) {
        const int64_t gt = pc.part_labels[static_cast<size_t>(p)];
        if (gt < 0) continue;
        const bool in_gt = gt == part;
        const bool in_pred = pred[static_cast<size_t>(p)] == part;
        if (in_gt && in_pred) ++inter;
        if (in_gt || in_pred) ++uni;
      }
      iou_sum += static_cast<real>(inter) / static_cast<real>(uni);
    }
    hits[static_cast<size_t>(i)] = hit;
    totals[static_cast<size_t>(i)] = total;
    ious[static_cast<size_t>(i)] = present.empty() ? real(0) : iou_sum / static_cast<real>(present.size());
  });
  int64_t hit = 0, total = 0;
  real iou = 0;
  for (int64_t i = 0; i < n; ++i) {
    hit += hits[static_cast<size_t>(i)];
    total += totals[static_cast<size_t>(i)];
    iou += ious[static_cast<size_t>(i)];
  }
  Metrics m;
  m.seg_accuracy = total > 0 ? static_cast<real>(hit) / static_cast<real>(total) : real(0);
  m.seg_iou = iou / static_cast<real>(n);
  return m;
}

Metrics segment_eval(const ModelConfig& config, ModelState& state, const Dataset& train,
                     const Dataset& test, real fraction, uint64_t seed) {
  const std::vector<int64_t> picked = select_labeled_fraction(train, fraction, seed);
  const SegmentMap map = fit_segment_map(config, state, train, picked);
  return score_segment_map(config, state, map, test);
}

// ---- robustness sweeps ------------------------------------------------------------

std::vector<SweepRow> noise_sweep(const ModelConfig& config, ModelState& state,
                                  const Dataset& dataset, SweepMode::Kind mode,
                                  const std::vector<real>& levels, uint64_t seed) {
  check_dataset(config, dataset, "noise_sweep");
  std::vector<SweepRow> rows;
  rows.reserve(levels.size());
  for (size_t li = 0; li < levels.size(); ++li) {
    const real level = levels[li];
    Dataset noisy;
    noisy.reserve(dataset.size());
    for (size_t i = 0; i < dataset.size(); ++i) {
      const uint64_t s = mix_seed(mix_seed(seed, li), i);
      if (mode == SweepMode::Perturb) {
        noisy.push_back(perturb_gaussian(dataset[i], level, s));
      } else {
        noisy.push_back(
            add_outliers(dataset[i], static_cast<int64_t>(std::llround(level)), kOutlierSigma, s));
      }
    }
    const Metrics m = evaluate(config, state, noisy);
    rows.push_back({level, m.accuracy, m.cd_mean});
  }
  return rows;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << "level,accuracy,cd\n";
  char buf[128];
  for (const SweepRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", r.level, r.accuracy, r.cd_mean);
    f << buf;
  }
  if (!f) throw IoError("write to '" + path + "' failed");
}

// ---- latent analysis ----------------------------------------------------------------

LatentSweep latent_perturb(const ModelConfig& config, ModelState& state, const PointCloud& cloud,
                           int64_t dim, const std::vector<real>& values) {
  if (dim < 0 || dim >= config.digit_dim) {
    throw InputError("latent_perturb: dim " + std::to_string(dim) + " outside [0, " +
                     std::to_string(config.digit_dim) + ")");
  }
  NoGradScope ng;
  Tensor input = cloud_to_tensor(cloud, config.use_normals);
  EncodeOutput enc = encode(input, config, state, /*training=*/false);
  Tensor latent = mask_activity(enc.digit.activities);
  LatentSweep sweep;
  Tensor base = decode(latent, enc.skip_features, config, state, /*training=*/false);
  sweep.base = tensor_to_cloud(base);
  for (real v : values) {
    std::vector<real> vals = latent.values();
    vals[static_cast<size_t>(dim)] = v;
    Tensor recon = decode(Tensor::from(latent.shape(), std::move(vals)), enc.skip_features,
                          config, state, /*training=*/false);
    sweep.clouds.push_back(tensor_to_cloud(recon));
    sweep.cd_to_base.push_back(chamfer_distance(recon, base).item());
  }
  return sweep;
}

// ---- reconstruction baseline ------------------------------------------------------

std::map<int64_t, PointCloud> class_mean_shapes(const Dataset& dataset) {
  if (dataset.empty()) throw InputError("class_mean_shapes: empty dataset");
  std::map<int64_t, PointCloud> means;
  std::map<int64_t, int64_t> counts;
  for (const PointCloud& pc : dataset) {
    auto [it, fresh] = means.try_emplace(pc.label);
    if (fresh) {
      it->second.count = pc.count;
      it->second.points.assign(pc.points.size(), real(0));
      it->second.label = pc.label;
    } else if (it->second.count != pc.count) {
      throw InputError("class_mean_shapes: class " + std::to_string(pc.label) +
                       " mixes point counts");
    }
    for (size_t k = 0; k < pc.points.size(); ++k) it->second.points[k] += pc.points[k];
    counts[pc.label] += 1;
  }
  for (auto& [label, mean] : means) {
    const real inv = real(1) / static_cast<real>(counts[label]);
    for (real& v : mean.points) v *= inv;
  }
  return means;
}

real baseline_cd(const Dataset& dataset, const std::map<int64_t, PointCloud>& means) {
  if (dataset.empty()) throw InputError("baseline_cd: empty dataset");
  NoGradScope ng;
  real sum = 0;
  for (const PointCloud& pc : dataset) {
    const auto it = means.find(pc.label);
    if (it == means.end()) {
      throw InputError("baseline_cd: no mean shape for class " + std::to_string(pc.label));
    }
    sum += chamfer_distance(cloud_to_tensor(pc, false), cloud_to_tensor(it->second, false)).item();
  }
  return sum / static_cast<real>(dataset.size());
}

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& log) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << "epoch,loss,margin,cd,accuracy\n";
  char buf[160];
  for (const EpochMetrics& e : log) {
    std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<long long>(e.epoch), e.loss, e.margin, e.cd, e.accuracy);
    f << buf;
  }
  if (!f) throw IoError("write to '" + path + "' failed");
}

}  // namespace pointcaps
