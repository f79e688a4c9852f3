#pragma once

#include <cstdint>
#include <vector>

#include "mmfsod/autograd.hpp"
#include "mmfsod/backends.hpp"
#include "mmfsod/nn.hpp"
#include "mmfsod/richtext.hpp"

// Training-only text rectification: refined token embeddings cross-attend to a
// composite support/query feature and predict the category's token sequence
// left-to-right and right-to-left.
namespace mmfsod {

enum class Direction { forward, backward };

// (H*W) x d; every row is the average of a query position and one category prototype.
struct CompositeFeature {
  Matrix values;
};

CompositeFeature composite_feature(const RowVector& prototype, const Matrix& encoded_query);
ag::Var composite_feature(ag::Var prototype, ag::Var encoded_query);

// Logits for the M-1 predictable positions of one direction.
// forward: rows are targets 2..M (1-based); backward: rows are targets 1..M-1.
struct SequencePrediction {
  Matrix logits;
  Direction direction = Direction::forward;
};

struct RectifierOptions {
  int layers = 2;
  int heads = 4;
  int ffn_multiplier = 2;
};

class RectifierModel {
 public:
  RectifierModel() = default;
  RectifierModel(int dim, int vocab_size, const RectifierOptions& options, std::uint64_t seed);

  int dim() const { return dim_; }
  int vocab_size() const { return static_cast<int>(output_.weight.cols()); }

  // Throws std::invalid_argument when the sequence has fewer than 2 rows.
  ag::Var predict(ag::Tape& tape, ag::Var refined_tokens, ag::Var composite, Direction direction) const;
  SequencePrediction predict_sequence(const TokenEmbeddingSequence& refined_tokens, const CompositeFeature& composite,
                                      Direction direction) const;

  Matrix& direction_embedding(Direction d) { return d == Direction::forward ? forward_dir_ : backward_dir_; }
  void collect(const std::string& prefix, nn::ParamList& out);

 private:
  struct Layer {
    nn::MultiHeadAttention self_attention;
    nn::MultiHeadAttention cross_attention;
    nn::LayerNorm norm1, norm2, norm3;
    nn::Linear ffn_in, ffn_out;
  };

  int dim_ = 0;
  std::vector<Layer> layers_;
  nn::Linear output_;
  Matrix forward_dir_;
  Matrix backward_dir_;
};

// Causal visibility for M tokens: forward lets row i see columns <= i, backward columns >= i.
Matrix causal_mask(int length, Direction direction);

// Half the summed negative log-likelihood of the ground-truth tokens over both
// directions and all categories. Throws std::invalid_argument on misaligned inputs.
double rectification_loss(const std::vector<SequencePrediction>& forward,
                          const std::vector<SequencePrediction>& backward,
                          const std::vector<TokenSequence>& truth);

// d loss / d logits, same layout as the inputs.
struct RectificationGrad {
  std::vector<Matrix> forward;
  std::vector<Matrix> backward;
};
RectificationGrad rectification_loss_grad(const std::vector<SequencePrediction>& forward,
                                          const std::vector<SequencePrediction>& backward,
                                          const std::vector<TokenSequence>& truth);

ag::Var rectification_loss(const std::vector<ag::Var>& forward, const std::vector<ag::Var>& backward,
                           const std::vector<TokenSequence>& truth);

// Targets of one direction: ids[1..M-1] forward, ids[0..M-2] backward (0-based).
std::vector<int> direction_targets(const TokenSequence& seq, Direction direction);

}  // namespace mmfsod
