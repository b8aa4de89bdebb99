#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "hulm/checkpoint.hpp"
#include "hulm/error.hpp"

using namespace hulm;

namespace {

ModelConfig config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_positions = 12;
  return c;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit exact") {
  Checkpoint ck{init_parameters(config()), init_lora(config(), 2, 4.0, 3), {{"note", "x"}}};
  ck.adapter->layers[1].v.b.setConstant(0.25);
  std::stringstream ss;
  save_checkpoint(ss, ck);
  const auto back = load_checkpoint(ss);
  CHECK(parameter_hash(back.params) == parameter_hash(ck.params));
  REQUIRE(back.adapter.has_value());
  CHECK(parameter_hash(*back.adapter) == parameter_hash(*ck.adapter));
  CHECK(back.adapter->alpha == 4.0);
  CHECK(back.params.config == ck.params.config);
  CHECK(back.metadata.at("note") == "x");
}

TEST_CASE("checkpoint without adapter") {
  Checkpoint ck{init_parameters(config()), std::nullopt, {}};
  const auto path = std::filesystem::temp_directory_path() / "hulm_ck_test.bin";
  save_checkpoint(path, ck);
  const auto back = load_checkpoint(path);
  CHECK_FALSE(back.adapter.has_value());
  CHECK(parameter_hash(back.params) == parameter_hash(ck.params));
  std::filesystem::remove(path);
}

TEST_CASE("corrupt containers are rejected") {
  std::stringstream bad("NOPE");
  CHECK_THROWS_AS(load_checkpoint(bad), DataError);
  Checkpoint ck{init_parameters(config()), std::nullopt, {}};
  std::stringstream ss;
  save_checkpoint(ss, ck);
  const auto full = ss.str();
  std::stringstream cut(full.substr(0, full.size() - 8));
  CHECK_THROWS_AS(load_checkpoint(cut), DataError);
  CHECK_THROWS_AS(load_checkpoint(std::filesystem::path("/nonexistent/ck.bin")), DataError);
}
