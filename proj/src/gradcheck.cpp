#include "skd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>
#include <random>

namespace skd {

namespace {

double eval_loss(const GraphBuilder& build, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& p : params) leaves.push_back(tape.variable(p));
  return build(tape, leaves).item();
}

}  // namespace

GradCheckResult check_gradients(const GraphBuilder& build, const std::vector<Tensor>& params,
                                const GradCheckOptions& opt) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const Tensor& p : params) leaves.push_back(tape.variable(p));
    const Var loss = build(tape, leaves);
    const Gradients g = tape.backward(loss);
    for (const Var& l : leaves) analytic.push_back(g.at(l));
  }
  GradCheckResult res;
  std::mt19937_64 rng(opt.seed);
  std::vector<Tensor> probe = params;
  for (std::size_t t = 0; t < params.size(); ++t) {
    std::vector<std::size_t> coords(params[t].numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (opt.coords_per_tensor > 0 && coords.size() > static_cast<std::size_t>(opt.coords_per_tensor)) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.coords_per_tensor);
    }
    for (std::size_t c : coords) {
      const double orig = params[t][c];
      probe[t][c] = orig + opt.step;
      const double fp = eval_loss(build, probe);
      probe[t][c] = orig - opt.step;
      const double fm = eval_loss(build, probe);
      probe[t][c] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double a = analytic[t][c];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), opt.denominator_floor});
      const double rel = std::fabs(a - numeric) / denom;
      ++res.coords_checked;
      if (rel >= res.max_rel_error) {
        res.max_rel_error = rel;
        char buf[160];
        std::snprintf(buf, sizeof buf, "param[%zu] coord %zu: analytic %.10g numeric %.10g", t, c,
                      a, numeric);
        res.worst = buf;
      }
    }
  }
  return res;
}

RandomGraph random_composite_graph(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.7);
  const int n_params = 2 + static_cast<int>(rng() % 2);
  RandomGraph g;
  for (int i = 0; i < n_params; ++i) {
    Tensor t(Shape{3, 3});
    for (auto& v : t.data()) v = nd(rng);
    g.params.push_back(std::move(t));
  }
  const int depth = 3 + static_cast<int>(rng() % 4);
  auto ops = std::make_shared<std::vector<int>>();
  auto picks = std::make_shared<std::vector<std::pair<int, int>>>();
  for (int d = 0; d < depth; ++d) {
    ops->push_back(static_cast<int>(rng() % 14));
    picks->emplace_back(static_cast<int>(rng() % 64), static_cast<int>(rng() % 64));
  }
  static const char* names[] = {"add",     "sub",         "mul",     "div",   "tanh",
                                "softplus", "exp-tanh",   "log-sp",  "matmul", "transpose",
                                "softmax", "sqrt-square", "concat-slice", "sumcols"};
  for (int op : *ops) g.description += std::string(g.description.empty() ? "" : " ") + names[op];
  g.build = [ops, picks](Tape&, const std::vector<Var>& leaves) {
    std::vector<Var> pool = leaves;
    for (std::size_t d = 0; d < ops->size(); ++d) {
      const Var a = pool[(*picks)[d].first % pool.size()];
      const Var b = pool[(*picks)[d].second % pool.size()];
      Var out;
      switch ((*ops)[d]) {
        case 0: out = a + b; break;
        case 1: out = a - b; break;
        case 2: out = a * b; break;
        case 3: out = a / (softplus(b) + 0.5); break;
        case 4: out = tanh(a); break;
        case 5: out = softplus(a); break;
        case 6: out = exp(tanh(a)); break;
        case 7: out = log(softplus(a) + 0.1); break;
        case 8: out = tanh(matmul(a, b)); break;
        case 9: out = transpose(a); break;
        case 10: out = softmax_rows(a); break;
        case 11: out = sqrt(square(a) + 0.1); break;
        case 12: out = slice(concat({a, b}, 1), 1, 2, 3); break;
        default: out = reshape(sum_cols(a), Shape{1, 3}) + b; break;
      }
      pool.push_back(out);
    }
    // Mix the last result with the leaves so every parameter stays live.
    Var acc = mean(square(pool.back()));
    for (const Var& l : leaves) acc = acc + 0.1 * mean(tanh(l) * pool.back());
    return acc;
  };
  return g;
}

}  // namespace skd
