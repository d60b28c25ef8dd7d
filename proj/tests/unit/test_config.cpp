#include <doctest.h>

#include "p2w/config.hpp"
#include "p2w/error.hpp"

using namespace p2w;

namespace {

RunConfig parse(const std::string& text) { return RunConfig::parse(Ini::parse(text), "/base"); }

ErrorKind kind_of(const std::string& text) {
  try {
    parse(text);
  } catch (const Error& e) {
    return e.kind();
  } catch (const ShapeError&) {
    return ErrorKind::config;
  }
  FAIL("expected a configuration error for: " << text);
  return ErrorKind::numeric;
}

}  // namespace

TEST_CASE("ini parsing") {
  const Ini ini = Ini::parse("# comment\n[a]\nx = 1\n; other comment\n  y=two words  \n[b.c]\nz = 3\n");
  CHECK(ini.get("a", "x") == "1");
  CHECK(ini.get("a", "y") == "two words");
  CHECK(ini.get("b.c", "z") == "3");
  CHECK_FALSE(ini.get("a", "z").has_value());
  CHECK_THROWS_AS(Ini::parse("[a]\nmissing equals\n"), Error);
}

TEST_CASE("stage lists") {
  const auto s = parse_stages("1e-3:1:3, 1e-4:11:10 , 1e-5:all:37:0.01, 1e-4:new:30:0.001");
  REQUIRE(s.size() == 4);
  CHECK(s[0].learning_rate == 1e-3);
  CHECK(s[0].trainable == TrainableTop::top(1));
  CHECK(s[1].epochs == 10);
  CHECK(s[2].trainable == TrainableTop::all());
  CHECK(s[2].weight_decay == 0.01);
  CHECK(s[3].trainable == TrainableTop::new_layers());
  CHECK_THROWS(parse_stages("1e-3:1"));
  CHECK_THROWS(parse_stages("fast:1:3"));
}

TEST_CASE("run config defaults, overrides and paths") {
  const RunConfig c = parse(
      "[run]\nseed = 9\n[data]\npatients = 50\nplatform = B\nradius_lo = 5\ndir = data\n"
      "[patch]\nblocks = vgg:8x2,resnet:4-4-16x1\nscheme = s1\n[whole]\nvariant = fc_top\npool = 2\n"
      "[transfer]\nsubsets = 20, all\n[pretrain]\nepochs = 0\n");
  CHECK(c.seed == 9);
  CHECK(c.data.patients == 50);
  CHECK(c.data.platform == Platform::B);
  CHECK(c.data.generator.radius_lo == 5);
  CHECK(c.data.dir == std::filesystem::path("/base/data"));
  CHECK(c.patch.blocks.size() == 2);
  CHECK(c.patch.scheme == SamplingScheme::S1);
  CHECK(c.whole.conversion.variant == Variant::fc_top);
  CHECK(c.whole.conversion.pool == 2);
  REQUIRE(c.transfer.subsets.size() == 2);
  CHECK(c.transfer.subsets[0] == 20);
  CHECK_FALSE(c.transfer.subsets[1].has_value());
  CHECK(c.pretrain.epochs == 0);
}

TEST_CASE("invalid configurations are config errors") {
  CHECK(kind_of("[data]\nunknown_key = 1\n") == ErrorKind::config);
  CHECK(kind_of("[nosuchsection]\nx = 1\n") == ErrorKind::config);
  CHECK(kind_of("x = 1\n") == ErrorKind::config);
  CHECK(kind_of("[data]\npatients = -3\n") == ErrorKind::config);
  CHECK(kind_of("[data]\nprevalence = 1.5\n") == ErrorKind::config);
  CHECK(kind_of("[patch]\nblocks = conv:3\n") == ErrorKind::config);
  CHECK(kind_of("[patch.schedule]\nstages = 1e-3:1:0\n") == ErrorKind::config);
  CHECK(kind_of("[eval]\ncutoffs = 0.3, 1.2\n") == ErrorKind::config);
  CHECK(kind_of("[run]\nseed = many\n") == ErrorKind::config);
  CHECK_THROWS_AS(RunConfig::load("/nonexistent/run.ini"), Error);
}
