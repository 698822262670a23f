#include <benchmark/benchmark.h>

#include <random>

#include "pointcaps/pointcaps.hpp"

namespace pc = pointcaps;

namespace {

pc::Tensor random_votes(int64_t children, int64_t parents, int64_t dim, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return pc::Tensor::uniform({1, children, parents, dim}, -1, 1, rng);
}

void BM_RouteEuclidean(benchmark::State& state) {
  pc::NoGradScope ng;
  const pc::VoteTensor votes(random_votes(256, 16, 8, 1));
  pc::RoutingOptions opt;
  opt.kind = pc::RoutingKind::Euclidean;
  opt.iterations = static_cast<int>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(pc::route(votes, opt).parents.values().data());
  }
}
BENCHMARK(BM_RouteEuclidean)->Arg(1)->Arg(3);

void BM_RouteDynamic(benchmark::State& state) {
  pc::NoGradScope ng;
  const pc::VoteTensor votes(random_votes(256, 16, 8, 2));
  pc::RoutingOptions opt;
  opt.kind = pc::RoutingKind::Dynamic;
  opt.iterations = static_cast<int>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(pc::route(votes, opt).parents.values().data());
  }
}
BENCHMARK(BM_RouteDynamic)->Arg(1)->Arg(3);

void BM_ChamferDistance(benchmark::State& state) {
  pc::NoGradScope ng;
  const int64_t n = state.range(0);
  std::mt19937_64 rng(3);
  const pc::Tensor x = pc::Tensor::uniform({n, 3}, -1, 1, rng);
  const pc::Tensor y = pc::Tensor::uniform({n, 3}, -1, 1, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(pc::chamfer_distance(x, y).item());
  }
}
BENCHMARK(BM_ChamferDistance)->Arg(256)->Arg(1024);

void BM_EncoderForward(benchmark::State& state) {
  pc::NoGradScope ng;
  const pc::ModelConfig c = pc::ModelConfig::micro(256, 5);
  pc::ModelState s = pc::ModelState::init(c, 4);
  pc::PointCloud cloud = pc::generate_shape(pc::ShapeKind::Torus, 256, 5);
  const pc::Tensor x = pc::cloud_to_tensor(cloud, c.use_normals);
  for (auto _ : state) {
    benchmark::DoNotOptimize(pc::encode(x, c, s, false).digit.activities.values().data());
  }
}
BENCHMARK(BM_EncoderForward);

void BM_TrainStep(benchmark::State& state) {
  const pc::ModelConfig c = pc::ModelConfig::micro(256, 5);
  pc::ModelState s = pc::ModelState::init(c, 6);
  pc::Dataset batch;
  std::vector<int64_t> labels;
  for (int i = 0; i < 8; ++i) {
    pc::PointCloud cloud = pc::generate_shape(pc::ShapeKind::Cube, 256, 10 + i);
    cloud.label = i % 5;
    labels.push_back(cloud.label);
    batch.push_back(std::move(cloud));
  }
  const pc::Tensor input = pc::stack_clouds(batch, c.use_normals);
  const pc::Tensor target = pc::stack_clouds(batch, false);
  pc::RAdamOptions ro;
  ro.lr = pc::real(1e-3);
  pc::RAdam opt(s.parameters(), ro);
  for (auto _ : state) {
    pc::Tape tape;
    {
      pc::TapeScope scope(tape);
      pc::ForwardOutput out = pc::forward(input, c, s, true, &labels);
      pc::Tensor margin = pc::margin_loss_batch(out.class_lengths, labels);
      pc::Tensor cd = pc::mean(pc::chamfer_distance(target, out.reconstruction));
      pc::Tensor loss = pc::add(margin, pc::scale(cd, c.chamfer_gamma));
      tape.backward(loss);
      benchmark::DoNotOptimize(loss.item());
    }
    opt.step();
  }
}
BENCHMARK(BM_TrainStep);

}  // namespace

BENCHMARK_MAIN();
