#include "mmfsod/nn.hpp"

namespace mmfsod::nn {

Matrix glorot(int rows, int cols, std::uint64_t seed, std::uint64_t stream) {
  const double limit = std::sqrt(6.0 / (rows + cols));
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      m(r, c) = limit * (2.0 * hashrng::uniform(seed, stream, static_cast<std::uint64_t>(r) * cols + c) - 1.0);
  return m;
}

Linear::Linear(int in, int out, std::uint64_t seed, std::uint64_t stream)
    : weight(glorot(in, out, seed, stream)), bias(Matrix::Zero(1, out)) {}

ag::Var Linear::operator()(ag::Tape& tape, ag::Var x) const {
  return ag::add_row(ag::matmul(x, tape.param(weight)), tape.param(bias));
}

void Linear::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", &weight});
  out.push_back({prefix + ".bias", &bias});
}

LayerNorm::LayerNorm(int dim) : gain(Matrix::Ones(1, dim)), bias(Matrix::Zero(1, dim)) {}

ag::Var LayerNorm::operator()(ag::Tape& tape, ag::Var x) const {
  return ag::layer_norm_rows(x, tape.param(gain), tape.param(bias));
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".gain", &gain});
  out.push_back({prefix + ".bias", &bias});
}

MultiHeadAttention::MultiHeadAttention(int dim, int heads_, std::uint64_t seed, std::uint64_t stream)
    : query(dim, dim, seed, stream * 4 + 0),
      key(dim, dim, seed, stream * 4 + 1),
      value(dim, dim, seed, stream * 4 + 2),
      output(dim, dim, seed, stream * 4 + 3),
      heads(heads_) {
  if (heads <= 0 || dim % heads != 0)
    throw std::invalid_argument("MultiHeadAttention: heads (" + std::to_string(heads_) + ") must divide d (" +
                                std::to_string(dim) + ")");
}

ag::Var MultiHeadAttention::operator()(ag::Tape& tape, ag::Var queries, ag::Var context, const Matrix& allowed) const {
  const int d = dim();
  require_shape(queries.cols() == d && context.cols() == d,
                "MultiHeadAttention: expected width " + std::to_string(d) + ", got " + std::to_string(queries.cols()) +
                    " and " + std::to_string(context.cols()));
  const int dh = d / heads;
  ag::Var q = query(tape, queries);
  ag::Var k = key(tape, context);
  ag::Var v = value(tape, context);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ag::Var> per_head;
  per_head.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    ag::Var qh = heads == 1 ? q : ag::slice_cols(q, h * dh, dh);
    ag::Var kh = heads == 1 ? k : ag::slice_cols(k, h * dh, dh);
    ag::Var vh = heads == 1 ? v : ag::slice_cols(v, h * dh, dh);
    ag::Var weights = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), inv_sqrt), allowed);
    per_head.push_back(ag::matmul(weights, vh));
  }
  ag::Var merged = heads == 1 ? per_head.front() : ag::concat_cols(per_head);
  return output(tape, merged);
}

void MultiHeadAttention::collect(const std::string& prefix, ParamList& out) {
  query.collect(prefix + ".query", out);
  key.collect(prefix + ".key", out);
  value.collect(prefix + ".value", out);
  output.collect(prefix + ".output", out);
}

}  // namespace mmfsod::nn
