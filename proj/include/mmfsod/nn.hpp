#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmfsod/autograd.hpp"

namespace mmfsod::nn {

struct NamedParam {
  std::string name;
  Matrix* value;
};
using ParamList = std::vector<NamedParam>;

// Uniform Glorot initialization drawn from the counter-based generator.
Matrix glorot(int rows, int cols, std::uint64_t seed, std::uint64_t stream);

// y = x W + b, W is in x out.
struct Linear {
  Matrix weight;
  Matrix bias;

  Linear() = default;
  Linear(int in, int out, std::uint64_t seed, std::uint64_t stream);

  ag::Var operator()(ag::Tape& tape, ag::Var x) const;
  void collect(const std::string& prefix, ParamList& out);
};

struct LayerNorm {
  Matrix gain;
  Matrix bias;

  LayerNorm() = default;
  explicit LayerNorm(int dim);

  ag::Var operator()(ag::Tape& tape, ag::Var x) const;
  void collect(const std::string& prefix, ParamList& out);
};

// Scaled dot-product attention with `heads` heads over d / heads columns each.
struct MultiHeadAttention {
  Linear query, key, value, output;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(int dim, int heads, std::uint64_t seed, std::uint64_t stream);

  int dim() const { return static_cast<int>(query.weight.rows()); }
  // `allowed` (queries.rows x context.rows, nonzero = may attend) is optional.
  ag::Var operator()(ag::Tape& tape, ag::Var queries, ag::Var context, const Matrix& allowed = Matrix()) const;
  void collect(const std::string& prefix, ParamList& out);
};

}  // namespace mmfsod::nn
