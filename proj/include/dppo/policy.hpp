#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dppo/env.hpp"
#include "dppo/rng.hpp"

namespace dppo {

struct PolicyShape {
  int num_prompts = 0;
  int completion_len = 0;
  int vocab_size = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(num_prompts) * completion_len * vocab_size;
  }
  std::size_t offset(int prompt, int position) const {
    return (static_cast<std::size_t>(prompt) * completion_len + position) *
           vocab_size;
  }

  friend bool operator==(const PolicyShape&, const PolicyShape&) = default;
};

PolicyShape shape_of(const TaskSpec& spec);

// Flat dense vector with the layout of PolicyParams::logits.
struct GradientVector {
  std::vector<double> values;

  GradientVector() = default;
  explicit GradientVector(std::size_t n) : values(n, 0.0) {}

  std::size_t size() const { return values.size(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  // this += scale * other
  void add_scaled(const GradientVector& other, double scale);
  double norm() const;
};

// Tabular softmax logits indexed [prompt][position][token]. Positions are
// conditionally independent given the prompt.
class PolicyParams {
 public:
  PolicyParams() = default;
  explicit PolicyParams(PolicyShape shape)
      : shape_(shape), logits_(shape.size(), 0.0) {}
  PolicyParams(PolicyShape shape, std::vector<double> logits);

  const PolicyShape& shape() const { return shape_; }
  std::span<const double> logits() const { return logits_; }
  std::span<double> logits() { return logits_; }

  std::span<const double> row(int prompt, int position) const {
    return {logits_.data() + shape_.offset(prompt, position),
            static_cast<std::size_t>(shape_.vocab_size)};
  }
  std::span<double> row(int prompt, int position) {
    return {logits_.data() + shape_.offset(prompt, position),
            static_cast<std::size_t>(shape_.vocab_size)};
  }

  // this += step * direction
  void step(const GradientVector& direction, double step);

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;

 private:
  PolicyShape shape_;
  std::vector<double> logits_;
};

GradientVector flatten(const PolicyParams& params);
PolicyParams unflatten(const PolicyShape& shape, const GradientVector& flat);

double logsumexp(std::span<const double> row);
std::vector<double> softmax(std::span<const double> row);

// log pi(token | prompt, position) for every position of the completion.
std::vector<double> token_log_probs(const PolicyParams& params,
                                    const Completion& c);
double log_prob(const PolicyParams& params, const Completion& c);

Completion sample(const PolicyParams& params, int prompt_id, RngStream& rng);

// d log pi(c) / d logits: one-hot(token) - softmax(row) in each position block
// of the completion's prompt, zero elsewhere.
GradientVector score_gradient(const PolicyParams& params, const Completion& c);

// out += scale * d log pi(c_t) / d logits for the single position t.
void add_token_score(const PolicyParams& params, const Completion& c,
                     int position, double scale, GradientVector& out);

// out += scale * score_gradient(params, c), without allocating.
void add_score(const PolicyParams& params, const Completion& c, double scale,
               GradientVector& out);

}  // namespace dppo
