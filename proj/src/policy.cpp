#include "dppo/policy.hpp"

#include <algorithm>
#include <cmath>

#include "dppo/error.hpp"

namespace dppo {
namespace {

void check_completion(const PolicyParams& params, const Completion& c) {
  const auto& s = params.shape();
  if (c.prompt_id < 0 || c.prompt_id >= s.num_prompts)
    throw InvalidInput("policy: prompt_id out of range");
  if (c.tokens.size() != static_cast<std::size_t>(s.completion_len))
    throw InvalidInput("policy: completion length does not match the policy");
  for (int tok : c.tokens)
    if (tok < 0 || tok >= s.vocab_size)
      throw InvalidInput("policy: token out of range");
}

}  // namespace

PolicyShape shape_of(const TaskSpec& spec) {
  return {spec.num_prompts, spec.completion_len, spec.vocab_size};
}

void GradientVector::add_scaled(const GradientVector& other, double scale) {
  if (other.size() != size())
    throw InvalidInput("GradientVector: size mismatch");
  for (std::size_t i = 0; i < values.size(); ++i)
    values[i] += scale * other.values[i];
}

double GradientVector::norm() const {
  double s = 0.0;
  for (double v : values) s += v * v;
  return std::sqrt(s);
}

PolicyParams::PolicyParams(PolicyShape shape, std::vector<double> logits)
    : shape_(shape), logits_(std::move(logits)) {
  if (logits_.size() != shape_.size())
    throw InvalidInput("PolicyParams: logits size does not match shape");
  for (double v : logits_)
    if (!std::isfinite(v)) throw InvalidInput("PolicyParams: non-finite logit");
}

void PolicyParams::step(const GradientVector& direction, double step) {
  if (direction.size() != logits_.size())
    throw InvalidInput("PolicyParams::step: size mismatch");
  for (std::size_t i = 0; i < logits_.size(); ++i)
    logits_[i] += step * direction.values[i];
}

GradientVector flatten(const PolicyParams& params) {
  GradientVector g;
  g.values.assign(params.logits().begin(), params.logits().end());
  return g;
}

PolicyParams unflatten(const PolicyShape& shape, const GradientVector& flat) {
  return PolicyParams(shape, flat.values);
}

double logsumexp(std::span<const double> row) {
  const double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  return m + std::log(s);
}

std::vector<double> softmax(std::span<const double> row) {
  const double m = *std::max_element(row.begin(), row.end());
  std::vector<double> p(row.size());
  double s = 0.0;
  for (std::size_t k = 0; k < row.size(); ++k) {
    p[k] = std::exp(row[k] - m);
    s += p[k];
  }
  for (double& v : p) v /= s;
  return p;
}

std::vector<double> token_log_probs(const PolicyParams& params,
                                    const Completion& c) {
  check_completion(params, c);
  std::vector<double> out(c.tokens.size());
  for (std::size_t t = 0; t < c.tokens.size(); ++t) {
    auto row = params.row(c.prompt_id, static_cast<int>(t));
    out[t] = row[c.tokens[t]] - logsumexp(row);
  }
  return out;
}

double log_prob(const PolicyParams& params, const Completion& c) {
  double total = 0.0;
  for (double lp : token_log_probs(params, c)) total += lp;
  return total;
}

Completion sample(const PolicyParams& params, int prompt_id, RngStream& rng) {
  const auto& s = params.shape();
  if (prompt_id < 0 || prompt_id >= s.num_prompts)
    throw InvalidInput("sample: prompt_id out of range");
  Completion c{prompt_id, std::vector<int>(s.completion_len, 0)};
  for (int t = 0; t < s.completion_len; ++t) {
    const auto p = softmax(params.row(prompt_id, t));
    const double u = rng.uniform();
    double cum = 0.0;
    int tok = s.vocab_size - 1;
    for (int k = 0; k < s.vocab_size; ++k) {
      cum += p[k];
      if (u < cum) {
        tok = k;
        break;
      }
    }
    c.tokens[t] = tok;
  }
  return c;
}

void add_token_score(const PolicyParams& params, const Completion& c,
                     int position, double scale, GradientVector& out) {
  const auto& s = params.shape();
  const auto p = softmax(params.row(c.prompt_id, position));
  const std::size_t base = s.offset(c.prompt_id, position);
  for (int k = 0; k < s.vocab_size; ++k) out.values[base + k] -= scale * p[k];
  out.values[base + c.tokens[position]] += scale;
}

void add_score(const PolicyParams& params, const Completion& c, double scale,
               GradientVector& out) {
  check_completion(params, c);
  if (out.size() != params.shape().size())
    throw InvalidInput("add_score: output size mismatch");
  for (int t = 0; t < params.shape().completion_len; ++t)
    add_token_score(params, c, t, scale, out);
}

GradientVector score_gradient(const PolicyParams& params, const Completion& c) {
  GradientVector g(params.shape().size());
  add_score(params, c, 1.0, g);
  return g;
}

}  // namespace dppo
