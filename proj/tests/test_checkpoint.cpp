#include <filesystem>

#include "doctest.h"
#include "refine/checkpoint.hpp"

namespace fs = std::filesystem;

TEST_CASE("checkpoint round trip is bitwise") {
  refine::ModelConfig cfg;
  cfg.d_model = 16;
  cfg.d_fast = 8;
  cfg.update_mode = refine::UpdateMode::chunked;
  cfg.chunk_size = 4;
  cfg.eta = 0.5;
  const auto params = refine::init_params(cfg, 42);
  const auto path = fs::temp_directory_path() / "refine_test_ckpt.bin";
  refine::save_checkpoint(params, path);
  const auto loaded = refine::load_checkpoint(path);
  CHECK(loaded.config == params.config);
  CHECK(refine::bitwise_equal(loaded, params));
  fs::remove(path);
}

TEST_CASE("checkpoint validation") {
  refine::ModelConfig cfg;
  cfg.d_model = 8;
  cfg.d_fast = 4;
  cfg.n_layers = 1;
  auto bytes = refine::serialize(refine::init_params(cfg, 1));

  SUBCASE("bad magic") {
    bytes[0] = 'X';
    CHECK_THROWS_AS(refine::deserialize(bytes), refine::CheckpointError);
  }
  SUBCASE("bad version") {
    bytes[4] = 99;
    CHECK_THROWS_AS(refine::deserialize(bytes), refine::CheckpointError);
  }
  SUBCASE("truncated") {
    bytes.pop_back();
    CHECK_THROWS_AS(refine::deserialize(bytes), refine::CheckpointError);
  }
  SUBCASE("trailing bytes") {
    bytes.push_back(0);
    CHECK_THROWS_AS(refine::deserialize(bytes), refine::CheckpointError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(refine::load_checkpoint("/nonexistent/refine.ckpt"), refine::CheckpointError);
  }
}
