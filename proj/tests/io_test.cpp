#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <string>

#include "mambastyle/checkpoint.hpp"
#include "mambastyle/config.hpp"
#include "mambastyle/cost.hpp"
#include "mambastyle/image_io.hpp"
#include "mambastyle/pipeline.hpp"

using namespace mambastyle;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("mambastyle_io_" + std::to_string(::getpid()))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

checkpoint::Checkpoint sample(Rng& rng) {
  checkpoint::Checkpoint ck;
  ck.tensors.push_back({"a", Tensor::randn(Shape{3, 4}, rng)});
  ck.tensors.push_back({"b.c", Tensor::randn(Shape{2, 1, 5}, rng)});
  ck.config = "d_w=8\n";
  ck.meta["steps"] = 3;
  return ck;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitwise) {
  Rng rng(1);
  const auto ck = sample(rng);
  const auto back = checkpoint::deserialize(checkpoint::serialize(ck));
  ASSERT_EQ(back.tensors.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.tensors[i].name, ck.tensors[i].name);
    EXPECT_EQ(back.tensors[i].value.shape(), ck.tensors[i].value.shape());
    EXPECT_EQ(std::memcmp(back.tensors[i].value.data().data(), ck.tensors[i].value.data().data(),
                          ck.tensors[i].value.size() * sizeof(float)),
              0);
  }
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.meta["steps"], 3);
}

TEST(Checkpoint, ModelRoundTripThroughFile) {
  TempDir dir;
  Model a(PipelineConfig::tiny());
  auto cfg = PipelineConfig::tiny();
  cfg.seed = 99;
  Model b(cfg);
  const auto path = dir.file("model.ckpt");
  checkpoint::save(path, checkpoint::capture(a.inference_params(), a.config().to_text()));
  const auto ck = checkpoint::load(path);
  checkpoint::restore(ck, b.inference_params());
  const auto pa = a.inference_params(), pb = b.inference_params();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].second.value().vec(), pb[i].second.value().vec());
  EXPECT_EQ(ck.config, a.config().to_text());
}

TEST(Checkpoint, EmptyModelIsValid) {
  const auto back = checkpoint::deserialize(checkpoint::serialize({}));
  EXPECT_TRUE(back.tensors.empty());
  EXPECT_EQ(back.numel(), 0u);
}

TEST(Checkpoint, ParamCountMatchesCheckpoint) {
  Model m(PipelineConfig::tiny());
  const auto ck = checkpoint::capture(m.inference_params());
  EXPECT_EQ(ck.numel(), cost::measure(m, 1, 0).params);
}

TEST(Checkpoint, VersionMismatch) {
  Rng rng(2);
  auto bytes = checkpoint::serialize(sample(rng));
  bytes[8] = 7;
  EXPECT_THROW((void)checkpoint::deserialize(bytes), VersionError);
}

TEST(Checkpoint, TruncationAndTampering) {
  Rng rng(3);
  const auto bytes = checkpoint::serialize(sample(rng));
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{13}, std::size_t{30}, bytes.size() - 1}) {
    EXPECT_THROW((void)checkpoint::deserialize(bytes.substr(0, cut)), CorruptionError) << cut;
  }
  auto tampered = bytes;
  const auto at = tampered.find("[3,4]");
  ASSERT_NE(at, std::string::npos);
  tampered[at + 1] = '4';
  EXPECT_THROW((void)checkpoint::deserialize(tampered), CorruptionError);
  auto flipped = bytes;
  flipped[flipped.size() - 20] ^= 1;
  EXPECT_THROW((void)checkpoint::deserialize(flipped), CorruptionError);
}

// A manifest edit with a matching checksum is still caught by the layout checks.
TEST(Checkpoint, ResealedShapeEditIsRejected) {
  Rng rng(4);
  auto bytes = checkpoint::serialize(sample(rng));
  const auto at = bytes.find("[3,4]");
  bytes[at + 1] = '4';
  const std::size_t body = 8 + 4 + 8, end = bytes.size() - 8;
  const auto sum = checkpoint::fnv1a(bytes.data() + body, end - body);
  std::memcpy(bytes.data() + end, &sum, sizeof(sum));
  EXPECT_THROW((void)checkpoint::deserialize(bytes), CorruptionError);
}

TEST(Checkpoint, RestoreChecksShapes) {
  Model m(PipelineConfig::tiny());
  auto ck = checkpoint::capture(m.inference_params());
  ck.tensors[0].value = Tensor(Shape{1});
  EXPECT_THROW(checkpoint::restore(ck, m.inference_params()), ShapeError);
  ck.tensors.erase(ck.tensors.begin());
  EXPECT_THROW(checkpoint::restore(ck, m.inference_params()), ConfigError);
}

TEST(ImageIo, PngRoundTripWithinQuantization) {
  TempDir dir;
  Rng rng(5);
  const auto img = Tensor::uniform(Shape{3, 7, 9}, rng, -1.0, 1.0);
  io::write_png(dir.file("x.png"), img);
  const auto back = io::read_png(dir.file("x.png"));
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 1.0 / 255.0 + 1e-6);
  EXPECT_THROW(io::write_png(dir.file("bad.png"), Tensor(Shape{1, 4, 4})), ShapeError);
  EXPECT_THROW((void)io::read_png(dir.file("missing.png")), ConfigError);
}

TEST(ImageIo, BlobIsLossless) {
  TempDir dir;
  Rng rng(6);
  const auto img = Tensor::randn(Shape{3, 16, 16}, rng);
  io::write_blob(dir.file("x.blob"), img);
  EXPECT_EQ(io::read_image(dir.file("x.blob")).vec(), img.vec());
}

TEST(Config, TextRoundTrip) {
  auto cfg = PipelineConfig::tiny();
  cfg.disable_fuser = true;
  cfg.lr = 2.5e-4;
  const auto back = PipelineConfig::parse(cfg.to_text());
  EXPECT_EQ(back.to_text(), cfg.to_text());
}

TEST(Config, ShippedFilesMatchPresets) {
  const std::string dir = MAMBASTYLE_CONFIG_DIR;
  EXPECT_EQ(PipelineConfig::load(dir + "/desk.cfg").to_text(), PipelineConfig{}.to_text());
  auto tiny = PipelineConfig::tiny();
  tiny.steps = 20;
  EXPECT_EQ(PipelineConfig::load(dir + "/tiny.cfg").to_text(), tiny.to_text());
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW((void)PipelineConfig::parse("disable_fusr=true\n"), ConfigError);
  EXPECT_THROW((void)PipelineConfig::parse("layers=ten\n"), ConfigError);
  EXPECT_THROW((void)PipelineConfig::parse("disable_fuser=maybe\n"), ConfigError);
  EXPECT_NO_THROW((void)PipelineConfig::parse("# comment\n\nsteps = 10\n"));
}

TEST(Config, ValidationCatchesShapeContracts) {
  auto bad_k = PipelineConfig::tiny();
  bad_k.inject_layer = bad_k.layers;
  EXPECT_THROW(bad_k.validate(), ConfigError);
  auto bad_res = PipelineConfig::tiny();
  bad_res.resolution = 32;
  EXPECT_THROW(bad_res.validate(), ConfigError);
  auto bad_patch = PipelineConfig{};
  bad_patch.patch = 4;
  EXPECT_THROW(bad_patch.validate(), ConfigError);
  auto both = PipelineConfig::tiny();
  both.disable_vssm = true;
  both.vit_blocks = true;
  EXPECT_THROW(both.validate(), ConfigError);
  auto id = PipelineConfig::tiny();
  id.lambda_id = 0.5;
  EXPECT_THROW(id.validate(), ConfigError);
  EXPECT_THROW(Model{bad_k}, ConfigError);
  EXPECT_NO_THROW(PipelineConfig{}.validate());
}
