#include <doctest.h>

#include <cmath>

#include "dppo/error.hpp"
#include "dppo/oracle.hpp"
#include "dppo/policy.hpp"

using namespace dppo;

TEST_CASE("uniform policy log-probability") {
  const TaskSpec spec = default_task_spec();
  const PolicyParams p(shape_of(spec));
  CHECK(log_prob(p, {0, {1, 2}}) == doctest::Approx(std::log(1.0 / 9.0)).epsilon(1e-14));
}

TEST_CASE("saturated logits") {
  const TaskSpec spec = default_task_spec();
  PolicyParams p(shape_of(spec));
  const auto& target = spec.target_map[3];
  for (int t = 0; t < spec.completion_len; ++t) p.row(3, t)[target[t]] = 20.0;
  CHECK(std::abs(log_prob(p, {3, target})) < 1e-8);
}

TEST_CASE("probabilities normalize over the completion space") {
  const TaskSpec spec = default_task_spec();
  PolicyParams p(shape_of(spec));
  RngStream rng(11);
  for (double& v : p.logits()) v = 4.0 * rng.uniform() - 2.0;
  for (int q = 0; q < spec.num_prompts; ++q) {
    double total = 0.0;
    for (const auto& c : enumerate_completions(spec, q)) total += std::exp(log_prob(p, c));
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("sampling") {
  const TaskSpec spec = default_task_spec();
  PolicyParams p(shape_of(spec));
  for (double& v : p.logits()) v = 0.0;
  for (int q = 0; q < spec.num_prompts; ++q)
    for (int t = 0; t < spec.completion_len; ++t) p.row(q, t)[0] = 1e6;
  RngStream rng(5);
  CHECK(sample(p, 4, rng).tokens == std::vector<int>{0, 0});

  const PolicyParams uniform(shape_of(spec));
  RngStream draws(42, "frequency");
  long counts[3] = {0, 0, 0};
  const int n = 90'000;
  for (int i = 0; i < n / 2; ++i)
    for (int tok : sample(uniform, 0, draws).tokens) ++counts[tok];
  const double sigma = std::sqrt(n * (1.0 / 3.0) * (2.0 / 3.0));
  for (long c : counts) CHECK(std::abs(c - n / 3.0) < 4.0 * sigma);

  RngStream s1(9, "same"), s2(9, "same");
  CHECK(sample(uniform, 2, s1) == sample(uniform, 2, s2));
}

TEST_CASE("score gradient") {
  const TaskSpec spec = default_task_spec();
  const PolicyParams uniform(shape_of(spec));
  const Completion c{1, {2, 0}};
  const GradientVector g = score_gradient(uniform, c);
  const auto& sh = uniform.shape();
  for (int t = 0; t < 2; ++t)
    for (int k = 0; k < 3; ++k) {
      const double expect = (k == c.tokens[t] ? 2.0 : -1.0) / 3.0;
      CHECK(std::abs(g[sh.offset(1, t) + k] - expect) < 1e-15);
    }
  for (std::size_t j = 0; j < g.size(); ++j)
    if (j < sh.offset(1, 0) || j >= sh.offset(2, 0)) CHECK(g[j] == 0.0);

  PolicyParams p(shape_of(spec));
  RngStream rng(2);
  for (double& v : p.logits()) v = 3.0 * rng.uniform() - 1.5;
  for (int q = 0; q < spec.num_prompts; ++q)
    for (const auto& comp : enumerate_completions(spec, q)) {
      const GradientVector s = score_gradient(p, comp);
      for (int t = 0; t < spec.completion_len; ++t) {
        double block = 0.0;
        for (int k = 0; k < spec.vocab_size; ++k) block += s[sh.offset(q, t) + k];
        CHECK(std::abs(block) < 1e-12);
      }
      const double err = finite_diff_check(
          p, [&](const PolicyParams& x) { return log_prob(x, comp); }, s, 1e-6);
      CHECK(err < 1e-5);
    }
}

TEST_CASE("flatten round-trip and finiteness") {
  const TaskSpec spec = default_task_spec();
  PolicyParams p(shape_of(spec));
  CHECK(p.logits().size() == 8u * 2u * 3u);
  RngStream rng(4);
  for (double& v : p.logits()) v = rng.uniform() * 1e3 - 5e2;
  CHECK(unflatten(p.shape(), flatten(p)) == p);
  std::vector<double> bad(p.shape().size(), 0.0);
  bad[7] = std::nan("");
  CHECK_THROWS_AS(PolicyParams(p.shape(), bad), InvalidInput);
  CHECK_THROWS_AS(PolicyParams(p.shape(), std::vector<double>(3, 0.0)), InvalidInput);
}

TEST_CASE("logsumexp is shift invariant") {
  const std::vector<double> row = {1000.0, 1001.0, 999.0};
  const std::vector<double> shifted = {0.0, 1.0, -1.0};
  CHECK(logsumexp(row) - 1000.0 == doctest::Approx(logsumexp(shifted)).epsilon(1e-12));
  const auto sm = softmax(row);
  CHECK(sm[0] + sm[1] + sm[2] == doctest::Approx(1.0).epsilon(1e-15));
}
