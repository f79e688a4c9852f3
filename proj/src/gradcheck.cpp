#include <algorithm>
#include <cmath>
#include <functional>

#include "mmfsod/harness.hpp"

namespace mmfsod {

namespace {

constexpr double kEps = 1e-4;

struct Probe {
  std::vector<Matrix*> inputs;
  std::function<ag::Var(ag::Tape&)> build;
};

// The scalar under test is sum(weights .* output) so every output entry contributes.
ag::Var weighted(ag::Tape& tape, ag::Var out, const Matrix& weights) {
  return ag::sum(ag::hadamard(out, tape.constant(weights)));
}

GradcheckReport run_probe(const std::string& name, Probe& probe, double tolerance) {
  ag::Tape tape;
  tape.backward(probe.build(tape));
  std::vector<Matrix> analytic;
  for (Matrix* m : probe.inputs) analytic.push_back(tape.grad_of(*m));

  GradcheckReport report;
  report.module = name;
  auto eval = [&] {
    ag::Tape t;
    return probe.build(t).value()(0, 0);
  };
  for (std::size_t i = 0; i < probe.inputs.size(); ++i) {
    Matrix& m = *probe.inputs[i];
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double saved = m(r, c);
        m(r, c) = saved + kEps;
        const double up = eval();
        m(r, c) = saved - kEps;
        const double down = eval();
        m(r, c) = saved;
        const double numeric = (up - down) / (2 * kEps);
        report.max_relative_error = std::max(report.max_relative_error, relative_error(analytic[i](r, c), numeric));
        ++report.entries;
      }
  }
  report.passed = report.max_relative_error <= tolerance;
  return report;
}

struct Sizes {
  int positions, rows, dim;
};

Sizes random_sizes(SeededStream& rng) {
  return Sizes{1 + static_cast<int>(rng.below(16)), 2 + static_cast<int>(rng.below(5)),
               2 * (1 + static_cast<int>(rng.below(8)))};
}

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names = {"task_encoding",      "foreground_filter", "aggregate",
                                                 "shared_encode",      "rectification_loss", "rectifier"};
  return names;
}

GradcheckReport gradcheck(const std::string& module, std::uint64_t seed, double tolerance) {
  SeededStream rng(seed, 0x6C);
  const Sizes sz = random_sizes(rng);
  auto normal = [&](int rows, int cols, std::uint64_t stream) { return hashrng::normal_matrix(seed, stream, rows, cols); };

  if (module == "task_encoding" || module == "foreground_filter" || module == "aggregate") {
    Matrix a = softmax_rows(normal(sz.positions, sz.rows, 1));
    Matrix s = normal(sz.rows, sz.dim, 2);
    Matrix q = normal(sz.positions, sz.dim, 3);
    Matrix t = normal(sz.rows, sz.dim, 4);
    const Matrix w = normal(sz.positions, sz.dim, 5);
    Probe probe;
    if (module == "task_encoding") {
      probe.inputs = {&a, &t};
      probe.build = [&](ag::Tape& tp) { return weighted(tp, ag::matmul(tp.param(a), tp.param(t)), w); };
    } else if (module == "foreground_filter") {
      probe.inputs = {&a, &s, &q};
      probe.build = [&](ag::Tape& tp) {
        return weighted(tp, ag::hadamard(ag::matmul(tp.param(a), ag::sigmoid(tp.param(s))), tp.param(q)), w);
      };
    } else {
      probe.inputs = {&q, &s, &t};
      probe.build = [&](ag::Tape& tp) {
        return weighted(tp, agg::aggregate(tp.param(q), tp.param(s), tp.param(t)).aggregated, w);
      };
    }
    return run_probe(module, probe, tolerance);
  }

  if (module == "shared_encode") {
    const int heads = sz.dim % 4 == 0 ? 2 : 1;
    SharedAttentionLayer layer(sz.dim, heads, seed, 7);
    Matrix x = normal(sz.positions, sz.dim, 1);
    const Matrix w = normal(sz.positions, sz.dim, 2);
    nn::ParamList params;
    layer.collect("layer", params);
    Probe probe;
    probe.inputs.push_back(&x);
    for (auto& p : params) probe.inputs.push_back(p.value);
    probe.build = [&](ag::Tape& tp) { return weighted(tp, layer.encode(tp, tp.param(x)), w); };
    return run_probe(module, probe, tolerance);
  }

  if (module == "rectification_loss") {
    const int categories = 1 + static_cast<int>(rng.below(3));
    const int vocab = 5 + static_cast<int>(rng.below(12));
    std::vector<TokenSequence> truth;
    std::vector<Matrix> fwd, bwd;
    for (int c = 0; c < categories; ++c) {
      TokenSequence seq;
      const int m = 2 + static_cast<int>(rng.below(5));
      seq.ids.push_back(Vocabulary::kBos);
      for (int j = 1; j + 1 < m; ++j) seq.ids.push_back(Vocabulary::kReserved + static_cast<int>(rng.below(vocab - 4)));
      seq.ids.push_back(Vocabulary::kEos);
      truth.push_back(seq);
      fwd.push_back(normal(m - 1, vocab, 10 + 2 * c));
      bwd.push_back(normal(m - 1, vocab, 11 + 2 * c));
    }
    Probe probe;
    for (auto& m : fwd) probe.inputs.push_back(&m);
    for (auto& m : bwd) probe.inputs.push_back(&m);
    probe.build = [&](ag::Tape& tp) {
      std::vector<ag::Var> f, b;
      for (auto& m : fwd) f.push_back(tp.param(m));
      for (auto& m : bwd) b.push_back(tp.param(m));
      return rectification_loss(f, b, truth);
    };
    return run_probe(module, probe, tolerance);
  }

  if (module == "rectifier") {
    const int dim = 8, vocab = 10;
    const int m = 2 + static_cast<int>(rng.below(4));
    RectifierModel model(dim, vocab, RectifierOptions{2, 2, 2}, seed);
    Matrix tokens = normal(m, dim, 1);
    Matrix composite = normal(sz.positions, dim, 2);
    TokenSequence seq;
    seq.ids.push_back(Vocabulary::kBos);
    for (int j = 1; j + 1 < m; ++j) seq.ids.push_back(Vocabulary::kReserved + static_cast<int>(rng.below(vocab - 4)));
    seq.ids.push_back(Vocabulary::kEos);
    nn::ParamList params;
    model.collect("rectifier", params);
    Probe probe;
    probe.inputs = {&tokens, &composite};
    for (auto& p : params) probe.inputs.push_back(p.value);
    probe.build = [&](ag::Tape& tp) {
      ag::Var t = tp.param(tokens), p = tp.param(composite);
      return rectification_loss({model.predict(tp, t, p, Direction::forward)},
                                {model.predict(tp, t, p, Direction::backward)}, {seq});
    };
    return run_probe(module, probe, tolerance);
  }

  throw std::invalid_argument("gradcheck: unknown module '" + module + "'");
}

}  // namespace mmfsod
