#include "mmfsod/aggregation.hpp"

namespace mmfsod {

PrototypeSet::PrototypeSet(Matrix rows) : rows_(std::move(rows)) {
  require_shape(rows_.rows() >= 1 && rows_.cols() >= 1, "PrototypeSet: needs at least the background row");
  if (!rows_.allFinite()) throw std::invalid_argument("PrototypeSet: non-finite values");
}

Matrix TaskPrototypes::slice(int categories) const {
  require_shape(categories + 1 <= values.rows(), "TaskPrototypes: " + std::to_string(values.rows()) +
                                                     " rows cannot cover " + std::to_string(categories + 1));
  return values.topRows(categories + 1);
}

TaskPrototypes init_task_prototypes(int rows, int d) {
  if (d % 2 != 0) throw std::invalid_argument("init_task_prototypes: d must be even, got " + std::to_string(d));
  if (rows < 1) throw std::invalid_argument("init_task_prototypes: rows must be positive");
  return TaskPrototypes{sinusoidal_table(rows, d)};
}

SharedAttentionLayer::SharedAttentionLayer(int dim, int heads, std::uint64_t seed, std::uint64_t stream)
    : attention_(dim, heads, seed, stream), norm_(dim) {}

ag::Var SharedAttentionLayer::encode(ag::Tape& tape, ag::Var seq) const {
  require_shape(seq.rows() >= 1, "shared_encode: empty sequence");
  require_shape(seq.cols() == dim(), "shared_encode: input width " + std::to_string(seq.cols()) +
                                         " does not match layer width " + std::to_string(dim()));
  return norm_(tape, ag::add(seq, attention_(tape, seq, seq)));
}

Matrix SharedAttentionLayer::encode(const Matrix& seq) const {
  ag::Tape tape;
  return encode(tape, tape.constant(seq)).value();
}

void SharedAttentionLayer::collect(const std::string& prefix, nn::ParamList& out) {
  attention_.collect(prefix + ".attn", out);
  norm_.collect(prefix + ".norm", out);
}

PrototypeSet fuse_prototypes(const Matrix& vision, const Matrix& language, const RowVector& background_text) {
  require_shape(vision.rows() == language.rows() + 1, "fuse_prototypes: vision has " + std::to_string(vision.rows()) +
                                                          " rows, expected language rows + 1 = " +
                                                          std::to_string(language.rows() + 1));
  require_shape(vision.cols() == language.cols() && background_text.size() == vision.cols(),
                "fuse_prototypes: width mismatch");
  Matrix s(vision.rows(), vision.cols());
  s.topRows(language.rows()) = (vision.topRows(language.rows()) + language) / 2.0;
  s.bottomRows(1) = (vision.bottomRows(1) + background_text) / 2.0;
  return PrototypeSet(std::move(s));
}

Matrix feature_matching_coefficients(const Matrix& query, const Matrix& prototypes) {
  require_shape(query.cols() == prototypes.cols(), "feature_matching_coefficients: Q " + shape_str(query) + " and S " +
                                                       shape_str(prototypes) + " differ in d");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(query.cols()));
  return softmax_rows(query * prototypes.transpose() * inv_sqrt);
}

Matrix foreground_filter(const Matrix& coefficients, const Matrix& prototypes, const Matrix& query) {
  require_shape(coefficients.cols() == prototypes.rows() && coefficients.rows() == query.rows() &&
                    prototypes.cols() == query.cols(),
                "foreground_filter: inconsistent shapes");
  return (coefficients * sigmoid(prototypes)).cwiseProduct(query);
}

Matrix task_encoding(const Matrix& coefficients, const Matrix& task_slice) {
  require_shape(coefficients.cols() == task_slice.rows(), "task_encoding: A " + shape_str(coefficients) +
                                                              " vs T " + shape_str(task_slice));
  return coefficients * task_slice;
}

Matrix aggregate(const Matrix& query, const Matrix& prototypes, const Matrix& task) {
  require_shape(task.rows() >= prototypes.rows() && task.cols() == query.cols(), "aggregate: T too small or wrong d");
  const Matrix a = feature_matching_coefficients(query, prototypes);
  return foreground_filter(a, prototypes, query) + task_encoding(a, task.topRows(prototypes.rows()));
}

Matrix aggregate(const QueryFeatureMap& query, const PrototypeSet& prototypes, const TaskPrototypes& task) {
  return aggregate(query.values(), prototypes.values(), task.values);
}

namespace agg {

ag::Var fuse(ag::Var vision, ag::Var language, ag::Var background_text) {
  require_shape(vision.rows() == language.rows() + 1, "fuse: vision must have one more row than language");
  ag::Var paired = ag::concat_rows({language, background_text});
  return ag::scale(ag::add(vision, paired), 0.5);
}

ag::Var matching(ag::Var query, ag::Var prototypes) {
  require_shape(query.cols() == prototypes.cols(), "matching: d mismatch");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(query.cols()));
  return ag::softmax_rows(ag::scale(ag::matmul_nt(query, prototypes), inv_sqrt));
}

Output aggregate(ag::Var query, ag::Var prototypes, ag::Var task_slice) {
  require_shape(task_slice.rows() == prototypes.rows(), "aggregate: T slice must have C+1 rows");
  Output out;
  out.coefficients = matching(query, prototypes);
  out.foreground = ag::hadamard(ag::matmul(out.coefficients, ag::sigmoid(prototypes)), query);
  out.task = ag::matmul(out.coefficients, task_slice);
  out.aggregated = ag::add(out.foreground, out.task);
  return out;
}

}  // namespace agg

}  // namespace mmfsod
