#include "pointcaps/checkpoint.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "support/oracles.hpp"

using namespace pointcaps;

TEST(Checkpoint, RoundTripRestoresEveryTensor) {
  oracle::TempDir dir("ckpt");
  const ModelConfig c = ModelConfig::micro(32, 3);
  ModelState saved = ModelState::init(c, 7);
  saved.bn1.running_mean.values_mut()[0] = real(0.25);  // non-default running stats
  const std::string path = dir.file("m.ckpt");
  save_checkpoint(path, saved);

  ModelState loaded = ModelState::init(c, 99);
  load_checkpoint(path, loaded);
  auto a = saved.named_tensors(), b = loaded.named_tensors();
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].second.values(), b[i].second.values()) << a[i].first;
  }
}

TEST(Checkpoint, GeometryMismatchIsAVersionError) {
  oracle::TempDir dir("ckpt");
  ModelState saved = ModelState::init(ModelConfig::micro(32, 3), 7);
  save_checkpoint(dir.file("m.ckpt"), saved);

  ModelState wider = ModelState::init(ModelConfig::micro(32, 4), 7);
  EXPECT_THROW(load_checkpoint(dir.file("m.ckpt"), wider), VersionError);

  ModelConfig nb = ModelConfig::micro(32, 3);
  nb.conv_bias = false;  // fewer tensors than the file carries
  ModelState fewer = ModelState::init(nb, 7);
  EXPECT_THROW(load_checkpoint(dir.file("m.ckpt"), fewer), VersionError);
}

TEST(Checkpoint, BadHeaderAndTruncationAreDetected) {
  oracle::TempDir dir("ckpt");
  const ModelConfig c = ModelConfig::micro(32, 2);
  ModelState state = ModelState::init(c, 7);
  const std::string path = dir.file("m.ckpt");
  save_checkpoint(path, state);

  {
    std::ofstream f(dir.file("header.ckpt"));
    f << "POINTCAPS-CKPT v9\n";
  }
  EXPECT_THROW(load_checkpoint(dir.file("header.ckpt"), state), VersionError);

  std::ifstream in(path);
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  {
    std::ofstream f(dir.file("cut.ckpt"));
    f << all.substr(0, all.size() / 2);
  }
  EXPECT_THROW(load_checkpoint(dir.file("cut.ckpt"), state), ParseError);
  EXPECT_THROW(load_checkpoint(dir.file("absent.ckpt"), state), IoError);
}

TEST(ConfigFile, RoundTripPreservesEveryField) {
  oracle::TempDir dir("cfg");
  ModelConfig c = ModelConfig::defaults(512, 7);
  c.use_normals = true;
  c.routing_policy = RoutingPolicy::AllDynamic;
  c.skip_connection = false;
  c.conv_bias = false;
  c.capa2_iterations = 5;
  c.chamfer_gamma = real(0.75);
  c.unroll_routing_grad = false;
  c.cosine_agreement = true;
  const std::string path = dir.file("c.cfg");
  save_config(path, c);
  const ModelConfig back = load_config(path);
  EXPECT_EQ(config_kv(back), config_kv(c));
}

TEST(ConfigFile, KvCoversEveryKeyExactlyOnce) {
  const auto kv = config_kv(ModelConfig::micro(32, 2));
  std::set<std::string> keys;
  for (const auto& [k, v] : kv) keys.insert(k);
  EXPECT_EQ(keys.size(), kv.size());
  EXPECT_EQ(kv.size(), 32u);
  EXPECT_TRUE(keys.count("num_points"));
  EXPECT_TRUE(keys.count("routing_policy"));
  EXPECT_TRUE(keys.count("chamfer_gamma"));
}

TEST(ConfigFile, ParsingToleratesCommentsAndSpacing) {
  oracle::TempDir dir("cfg");
  const std::string path = dir.file("c.cfg");
  {
    std::ofstream f(path);
    f << "# model geometry\n";
    f << "num_points = 64\n";
    f << "  num_classes=5  \n";
    f << "\n";
    f << "routing_policy = all_euclidean\n";
  }
  const ModelConfig c = load_config(path);
  EXPECT_EQ(c.num_points, 64);
  EXPECT_EQ(c.num_classes, 5);
  EXPECT_EQ(c.routing_policy, RoutingPolicy::AllEuclidean);
}

TEST(ConfigFile, UnknownKeyAndBadValuesRejected) {
  oracle::TempDir dir("cfg");
  {
    std::ofstream f(dir.file("unknown.cfg"));
    f << "num_points = 64\nwombat = 3\n";
  }
  EXPECT_THROW(load_config(dir.file("unknown.cfg")), ConfigError);
  {
    std::ofstream f(dir.file("badint.cfg"));
    f << "num_points = sixty\n";
  }
  EXPECT_THROW(load_config(dir.file("badint.cfg")), ConfigError);
  {
    std::ofstream f(dir.file("invalid.cfg"));
    f << "num_points = 60\n";  // not a multiple of 16
  }
  EXPECT_THROW(load_config(dir.file("invalid.cfg")), ConfigError);
}
