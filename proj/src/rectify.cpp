#include "mmfsod/rectify.hpp"

namespace mmfsod {

CompositeFeature composite_feature(const RowVector& prototype, const Matrix& encoded_query) {
  require_shape(prototype.size() == encoded_query.cols(), "composite_feature: prototype width " +
                                                              std::to_string(prototype.size()) + " vs query width " +
                                                              std::to_string(encoded_query.cols()));
  Matrix p = encoded_query.rowwise() + prototype;
  p *= 0.5;
  return CompositeFeature{std::move(p)};
}

ag::Var composite_feature(ag::Var prototype, ag::Var encoded_query) {
  require_shape(prototype.rows() == 1 && prototype.cols() == encoded_query.cols(), "composite_feature: width mismatch");
  return ag::scale(ag::add_row(encoded_query, prototype), 0.5);
}

RectifierModel::RectifierModel(int dim, int vocab_size, const RectifierOptions& options, std::uint64_t seed)
    : dim_(dim),
      output_(dim, vocab_size, seed, 0x700),
      forward_dir_(nn::glorot(1, dim, seed, 0x701)),
      backward_dir_(nn::glorot(1, dim, seed, 0x702)) {
  if (options.layers < 1) throw std::invalid_argument("RectifierModel: needs at least one layer");
  const int ffn = options.ffn_multiplier * dim;
  for (int l = 0; l < options.layers; ++l) {
    const auto base = static_cast<std::uint64_t>(0x710 + 16 * l);
    layers_.push_back(Layer{nn::MultiHeadAttention(dim, options.heads, seed, base),
                            nn::MultiHeadAttention(dim, options.heads, seed, base + 1), nn::LayerNorm(dim),
                            nn::LayerNorm(dim), nn::LayerNorm(dim), nn::Linear(dim, ffn, seed, base + 2),
                            nn::Linear(ffn, dim, seed, base + 3)});
  }
}

Matrix causal_mask(int length, Direction direction) {
  Matrix allowed = Matrix::Zero(length, length);
  for (int i = 0; i < length; ++i)
    for (int j = 0; j < length; ++j)
      if (direction == Direction::forward ? j <= i : j >= i) allowed(i, j) = 1.0;
  return allowed;
}

ag::Var RectifierModel::predict(ag::Tape& tape, ag::Var refined_tokens, ag::Var composite,
                                Direction direction) const {
  const auto m = static_cast<int>(refined_tokens.rows());
  if (m < 2) throw std::invalid_argument("predict_sequence: need M >= 2 tokens, got " + std::to_string(m));
  require_shape(refined_tokens.cols() == dim_ && composite.cols() == dim_, "predict_sequence: width mismatch");
  const Matrix allowed = causal_mask(m, direction);
  const Matrix& dir = direction == Direction::forward ? forward_dir_ : backward_dir_;
  ag::Var x = ag::add_row(refined_tokens, tape.param(dir));
  for (const auto& layer : layers_) {
    x = layer.norm1(tape, ag::add(x, layer.self_attention(tape, x, x, allowed)));
    x = layer.norm2(tape, ag::add(x, layer.cross_attention(tape, x, composite)));
    x = layer.norm3(tape, ag::add(x, layer.ffn_out(tape, ag::gelu(layer.ffn_in(tape, x)))));
  }
  // Forward: the state at position i has seen tokens <= i and predicts token i+1.
  // Backward: the state at position i has seen tokens >= i and predicts token i-1.
  ag::Var states = direction == Direction::forward ? ag::slice_rows(x, 0, m - 1) : ag::slice_rows(x, 1, m - 1);
  return output_(tape, states);
}

SequencePrediction RectifierModel::predict_sequence(const TokenEmbeddingSequence& refined_tokens,
                                                    const CompositeFeature& composite, Direction direction) const {
  ag::Tape tape;
  ag::Var logits = predict(tape, tape.constant(refined_tokens.values), tape.constant(composite.values), direction);
  return SequencePrediction{logits.value(), direction};
}

void RectifierModel::collect(const std::string& prefix, nn::ParamList& out) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string p = prefix + ".layer" + std::to_string(l);
    layers_[l].self_attention.collect(p + ".self_attn", out);
    layers_[l].cross_attention.collect(p + ".cross_attn", out);
    layers_[l].norm1.collect(p + ".norm1", out);
    layers_[l].norm2.collect(p + ".norm2", out);
    layers_[l].norm3.collect(p + ".norm3", out);
    layers_[l].ffn_in.collect(p + ".ffn_in", out);
    layers_[l].ffn_out.collect(p + ".ffn_out", out);
  }
  output_.collect(prefix + ".vocab_proj", out);
  out.push_back({prefix + ".dir_forward", &forward_dir_});
  out.push_back({prefix + ".dir_backward", &backward_dir_});
}

std::vector<int> direction_targets(const TokenSequence& seq, Direction direction) {
  if (seq.length() < 2) throw std::invalid_argument("direction_targets: M < 2");
  if (direction == Direction::forward) return {seq.ids.begin() + 1, seq.ids.end()};
  return {seq.ids.begin(), seq.ids.end() - 1};
}

namespace {

void check_alignment(const std::vector<SequencePrediction>& fwd, const std::vector<SequencePrediction>& bwd,
                     const std::vector<TokenSequence>& truth) {
  if (fwd.size() != truth.size() || bwd.size() != truth.size())
    throw std::invalid_argument("rectification_loss: " + std::to_string(fwd.size()) + " forward / " +
                                std::to_string(bwd.size()) + " backward predictions for " +
                                std::to_string(truth.size()) + " categories");
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto rows = static_cast<Eigen::Index>(truth[i].length()) - 1;
    if (truth[i].length() < 2 || fwd[i].logits.rows() != rows || bwd[i].logits.rows() != rows ||
        fwd[i].logits.cols() != bwd[i].logits.cols())
      throw std::invalid_argument("rectification_loss: category " + std::to_string(i) +
                                  " predictions do not align with its M-1 targets");
    if (fwd[i].direction != Direction::forward || bwd[i].direction != Direction::backward)
      throw std::invalid_argument("rectification_loss: direction flags swapped for category " + std::to_string(i));
    for (int id : truth[i].ids)
      if (id < 0 || id >= fwd[i].logits.cols())
        throw std::invalid_argument("rectification_loss: target id " + std::to_string(id) + " outside logits width");
  }
}

double nll(const Matrix& logits, const std::vector<int>& targets) {
  const Vector lse = logsumexp_rows(logits);
  double total = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) total += lse(static_cast<Eigen::Index>(r)) - logits(r, targets[r]);
  return total;
}

}  // namespace

double rectification_loss(const std::vector<SequencePrediction>& forward,
                          const std::vector<SequencePrediction>& backward, const std::vector<TokenSequence>& truth) {
  check_alignment(forward, backward, truth);
  double fwd = 0.0, bwd = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    fwd += nll(forward[i].logits, direction_targets(truth[i], Direction::forward));
    bwd += nll(backward[i].logits, direction_targets(truth[i], Direction::backward));
  }
  return 0.5 * (fwd + bwd);
}

RectificationGrad rectification_loss_grad(const std::vector<SequencePrediction>& forward,
                                          const std::vector<SequencePrediction>& backward,
                                          const std::vector<TokenSequence>& truth) {
  check_alignment(forward, backward, truth);
  RectificationGrad g;
  auto one = [](const Matrix& logits, const std::vector<int>& targets) {
    Matrix d = softmax_rows(logits);
    for (std::size_t r = 0; r < targets.size(); ++r) d(r, targets[r]) -= 1.0;
    return Matrix(0.5 * d);
  };
  for (std::size_t i = 0; i < truth.size(); ++i) {
    g.forward.push_back(one(forward[i].logits, direction_targets(truth[i], Direction::forward)));
    g.backward.push_back(one(backward[i].logits, direction_targets(truth[i], Direction::backward)));
  }
  return g;
}

ag::Var rectification_loss(const std::vector<ag::Var>& forward, const std::vector<ag::Var>& backward,
                           const std::vector<TokenSequence>& truth) {
  if (forward.size() != truth.size() || backward.size() != truth.size() || truth.empty())
    throw std::invalid_argument("rectification_loss: predictions and truth must align and be non-empty");
  std::vector<ag::Var> terms;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    terms.push_back(ag::cross_entropy_rows(forward[i], direction_targets(truth[i], Direction::forward)));
    terms.push_back(ag::cross_entropy_rows(backward[i], direction_targets(truth[i], Direction::backward)));
  }
  return ag::scale(ag::sum(ag::concat_rows(terms)), 0.5);
}

}  // namespace mmfsod
