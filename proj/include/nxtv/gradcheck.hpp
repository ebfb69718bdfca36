#pragma once

#include "nxtv/core.hpp"
#include "nxtv/nn.hpp"

#include <functional>
#include <string>
#include <vector>

namespace nxtv {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int coords_checked = 0;
  std::string worst_param;
  double worst_analytic = 0.0;
  double worst_fd = 0.0;

  bool passes(double tol) const { return max_rel_err < tol; }
};

// loss(store, want_grad): returns the scalar loss; when want_grad it must also
// leave d(loss)/d(param) in store grads. The finite-difference side only ever
// calls it with want_grad = false, so it stays independent of the reverse-mode
// path it checks.
template <typename S>
using LossFn = std::function<S(ParamStore<S>&, bool want_grad)>;

template <typename S>
GradCheckReport grad_check(ParamStore<S>& store, const LossFn<S>& loss,
                           int num_coords, std::uint64_t seed,
                           double eps = 1e-4) {
  static_assert(sizeof(S) == 8, "finite differences need double precision");
  store.zero_grads();
  loss(store, true);
  std::vector<Mat<S>> analytic;
  analytic.reserve(store.params.size());
  for (const auto& p : store.params) analytic.push_back(p.grad);

  Rng rng(substream(seed, {0x67636b00ull}));
  GradCheckReport rep;
  for (int k = 0; k < num_coords; ++k) {
    const int pi =
        static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(store.params.size()) - 1));
    auto& p = store.params[static_cast<std::size_t>(pi)];
    const Index i = static_cast<Index>(rng.uniform_int(0, p.value.rows() - 1));
    const Index j = static_cast<Index>(rng.uniform_int(0, p.value.cols() - 1));
    const S saved = p.value(i, j);
    p.value(i, j) = saved + static_cast<S>(eps);
    const double f_plus = static_cast<double>(loss(store, false));
    p.value(i, j) = saved - static_cast<S>(eps);
    const double f_minus = static_cast<double>(loss(store, false));
    p.value(i, j) = saved;
    const double fd = (f_plus - f_minus) / (2.0 * eps);
    const double an = static_cast<double>(analytic[static_cast<std::size_t>(pi)](i, j));
    const double denom = std::max({std::abs(an), std::abs(fd), 1e-6});
    const double rel = std::abs(an - fd) / denom;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_param = p.name;
      rep.worst_analytic = an;
      rep.worst_fd = fd;
    }
    ++rep.coords_checked;
  }
  return rep;
}

}  // namespace nxtv
