#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "doctest.h"
#include "polynext/checkpoint.hpp"
#include "polynext/rng.hpp"

using namespace polynext;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.channels = {4, 6, 8};
  cfg.cells = {1, 1, 1};
  cfg.stacks = {1, 1, 1};
  cfg.mixers = {MixerKind::kPolyConv, MixerKind::kPolyConv, MixerKind::kPolyAttn};
  cfg.num_classes = 5;
  cfg.resolution = 16;
  cfg.norm = NormKind::kPolyBatchNorm;
  return cfg;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("checkpoint round trip preserves weights to f32 and metadata exactly") {
  PolyNeXtModel m = PolyNeXtModel::build(tiny_config(), 33);
  std::string path = temp_path("polynext_ckpt_rt.bin");
  save_checkpoint(path, m, "{\"epochs\": 5}", 4, "rng-state-blob");

  LoadedCheckpoint loaded = load_checkpoint(path);
  CHECK(loaded.epoch == 4);
  CHECK(loaded.recipe_json == "{\"epochs\": 5}");
  CHECK(loaded.rng_state == "rng-state-blob");
  CHECK(loaded.model.config.channels == m.config.channels);
  CHECK(loaded.model.config.norm == NormKind::kPolyBatchNorm);

  auto orig = m.parameters();
  auto back = loaded.model.parameters();
  REQUIRE(orig.size() == back.size());
  for (size_t i = 0; i < orig.size(); ++i) {
    CHECK(orig[i].name == back[i].name);
    for (int64_t k = 0; k < orig[i].tensor->numel(); ++k) {
      double expect = static_cast<double>(static_cast<float>((*orig[i].tensor)[k]));
      CHECK((*back[i].tensor)[k] == expect);
    }
  }

  // Second round trip is exact (already f32-quantized).
  std::string path2 = temp_path("polynext_ckpt_rt2.bin");
  save_checkpoint(path2, loaded.model, loaded.recipe_json, loaded.epoch, loaded.rng_state);
  LoadedCheckpoint again = load_checkpoint(path2);
  auto b2 = again.model.parameters();
  for (size_t i = 0; i < back.size(); ++i) {
    for (int64_t k = 0; k < back[i].tensor->numel(); ++k) {
      CHECK((*b2[i].tensor)[k] == (*back[i].tensor)[k]);
    }
  }
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST_CASE("checkpoint carries running buffers") {
  PolyNeXtModel m = PolyNeXtModel::build(tiny_config(), 34);
  auto bufs = m.buffers();
  REQUIRE(!bufs.empty());
  (*bufs[0].tensor)[0] = 1234.5;
  std::string path = temp_path("polynext_ckpt_buf.bin");
  save_checkpoint(path, m, "{}", 0, "");
  LoadedCheckpoint loaded = load_checkpoint(path);
  auto back = loaded.model.buffers();
  CHECK((*back[0].tensor)[0] == doctest::Approx(1234.5).epsilon(1e-6));
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint rejects corruption") {
  PolyNeXtModel m = PolyNeXtModel::build(tiny_config(), 35);
  std::string path = temp_path("polynext_ckpt_bad.bin");
  save_checkpoint(path, m, "{}", 0, "");
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('Q');  // clobber the magic
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("magic"), std::runtime_error);
  CHECK_THROWS(load_checkpoint(temp_path("polynext_absent.bin")));
  std::filesystem::remove(path);
}
