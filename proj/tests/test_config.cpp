#include <catch_amalgamated.hpp>

#include <filesystem>

#include "afferent/config.hpp"
#include "afferent/io.hpp"

using namespace afferent;

TEST_CASE("render and parse round trip") {
  ExperimentConfig c;
  c.m = 12;
  c.ages = {25.0, 85.0};
  c.seeds = {3, 9};
  c.variants = {Variant::full, Variant::no_amm};
  c.ppo.lr = 1.2345678901234567e-4;
  c.ppo.hidden = {16, 8};
  c.agent.memory_bias = true;
  c.fitness.eval_seeds = {5};
  c.simulate.scenarios = {"acl_deficient"};
  c.probe.radius = 0.3;
  const std::string text = render_config(c);
  const ExperimentConfig back = parse_config(text);
  CHECK(render_config(back) == text);
  CHECK(back.m == 12);
  CHECK(back.ppo.lr == c.ppo.lr);
  CHECK(back.ppo.hidden == std::vector<int>{16, 8});
  CHECK(back.variants == c.variants);
  CHECK(back.agent.memory_bias);
}

TEST_CASE("parsing") {
  SECTION("comments, blank lines and whitespace") {
    const ExperimentConfig c = parse_config("# header\n\n  afferent.m =  5  # trailing\nreward.lambda_d=2.5\n");
    CHECK(c.m == 5);
    CHECK(c.reward.lambda_d == 2.5);
  }
  SECTION("later keys override earlier ones and the base") {
    ExperimentConfig base;
    base.episode_len = 50;
    const ExperimentConfig c = parse_config("ppo.epochs = 2\nppo.epochs = 7\n", base);
    CHECK(c.ppo.epochs == 7);
    CHECK(c.episode_len == 50);
  }
  SECTION("unknown keys and malformed values are configuration errors") {
    CHECK_THROWS_AS(parse_config("ppo.learning_rate = 0.1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("afferent.m\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("afferent.m = many\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("afferent.m = -3\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("ppo.lr = 1e-3x\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("agent.memory_bias = maybe\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("variants = full,no_brain\n"), ConfigError);
  }
  SECTION("set_config_value") {
    ExperimentConfig c;
    set_config_value(c, "memory.capacity", "32");
    CHECK(c.agent.memory.capacity == 32);
    CHECK_THROWS_AS(set_config_value(c, "memory.size", "32"), ConfigError);
  }
}

TEST_CASE("validation") {
  CHECK_NOTHROW(ExperimentConfig{}.validate());
  auto invalid = [](const std::string& text) { return parse_config(text); };
  CHECK_THROWS_AS(invalid("ages = 10,40\n").validate(), ConfigError);
  CHECK_THROWS_AS(invalid("afferent.k = 4\n").validate(), ConfigError);
  CHECK_THROWS_AS(invalid("scenario = marathon\n").validate(), ConfigError);
  CHECK_THROWS_AS(invalid("ppo.gamma = 1.5\n").validate(), ConfigError);
  CHECK_THROWS_AS(invalid("workers = 0\n").validate(), ConfigError);
  CHECK_THROWS_AS(invalid("evolution.popsize = 1\n").validate(), ConfigError);
  CHECK_THROWS_AS(invalid("predictive.lambda_env = 0\npredictive.lambda_pred = 0\n").validate(), ConfigError);
  CHECK_THROWS_AS(invalid("simulate.action = 1.5\n").validate(), ConfigError);
}

TEST_CASE("shipped default config equals the built-in defaults") {
  const std::filesystem::path p = std::filesystem::path(AFFERENT_SOURCE_DIR) / "configs" / "default.cfg";
  const ExperimentConfig c = parse_config(read_text(p));
  CHECK(render_config(c) == render_config(ExperimentConfig{}));
}

TEST_CASE("number formatting is shortest round-trip") {
  CHECK(cfgio::format_number(0.1) == "0.1");
  CHECK(cfgio::format_number(3.0) == "3");
  double x = 0.0;
  cfgio::from_text("k", cfgio::format_number(1.0 / 3.0), x);
  CHECK(x == 1.0 / 3.0);
}
