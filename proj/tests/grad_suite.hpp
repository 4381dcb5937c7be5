#pragma once

// Randomized finite-difference coverage of every differentiable operation
// plus the composed encoder/decoder loss. Shared by the unit tests and the
// acceptance gate.

#include <array>
#include <map>
#include <string>
#include <vector>

#include "grad_check.hpp"
#include "npnorm/np_model.hpp"
#include "npnorm/rng.hpp"

namespace npnorm::testing {

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng,
                            double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

struct OpGradReport {
  std::map<std::string, GradCheckReport> per_op;
  double worst() const {
    double w = 0.0;
    for (const auto& [name, r] : per_op) w = std::max(w, r.max_rel_err);
    return w;
  }
};

// Runs `instances` random cases for every tape operation. Each case uses
// fresh random shapes and values; losses are reduced with sum() so they
// stay scalar.
inline OpGradReport run_op_gradient_suite(std::size_t instances = 20,
                                          std::uint64_t seed = 99) {
  namespace ad = npnorm::ad;
  OpGradReport report;
  Rng rng(seed);

  auto record = [&](const std::string& op, const GradCheckReport& r) {
    auto& acc = report.per_op[op];
    acc.max_rel_err = std::max(acc.max_rel_err, r.max_rel_err);
    acc.entries += r.entries;
  };

  for (std::size_t inst = 0; inst < instances; ++inst) {
    Rng r = rng.split(inst + 1);
    const std::size_t n = 1 + r.below(4), m = 1 + r.below(4);

    {  // add / sub / mul / scale on matching shapes
      Tensor a = random_tensor({n, m}, r), b = random_tensor({n, m}, r);
      record("add", check_gradients(
                        [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                          return ad::sum(t, ad::add(t, l[0], l[1]));
                        },
                        {a, b}));
      record("sub", check_gradients(
                        [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                          return ad::sum(t, ad::sub(t, l[0], l[1]));
                        },
                        {a, b}));
      record("mul", check_gradients(
                        [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                          return ad::sum(t, ad::mul(t, l[0], l[1]));
                        },
                        {a, b}));
      const double c = r.uniform(-2.0, 2.0);
      record("scale", check_gradients(
                          [c](ad::Tape& t, const std::vector<ad::Node*>& l) {
                            return ad::sum(t, ad::scale(t, l[0], c));
                          },
                          {a}));
      // sum composed with a nonlinearity so its gradient is nontrivial.
      record("sum", check_gradients(
                        [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                          return ad::sum(t, ad::mul(t, l[0], l[0]));
                        },
                        {a}));
      record("reshape",
             check_gradients(
                 [n, m](ad::Tape& t, const std::vector<ad::Node*>& l) {
                   auto* rsh = ad::reshape(t, l[0], {m * n});
                   return ad::sum(t, ad::mul(t, rsh, rsh));
                 },
                 {a}));
    }

    {  // matmul / add_rowvec / dense / concat_cols
      const std::size_t i = 1 + r.below(3), o = 1 + r.below(3);
      Tensor x = random_tensor({n, i}, r), w = random_tensor({i, o}, r);
      Tensor b = random_tensor({o}, r);
      record("matmul", check_gradients(
                           [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                             auto* y = ad::matmul(t, l[0], l[1]);
                             return ad::sum(t, ad::mul(t, y, y));
                           },
                           {x, w}));
      Tensor y0 = random_tensor({n, o}, r);
      record("add_rowvec",
             check_gradients(
                 [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                   auto* y = ad::add_rowvec(t, l[0], l[1]);
                   return ad::sum(t, ad::mul(t, y, y));
                 },
                 {y0, b}));
      record("dense", check_gradients(
                          [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                            auto* y = ad::dense(t, l[0], l[1], l[2]);
                            return ad::sum(t, ad::mul(t, y, y));
                          },
                          {x, w, b}));
      Tensor z = random_tensor({n, m}, r);
      record("concat_cols",
             check_gradients(
                 [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                   auto* y = ad::concat_cols(t, l[0], l[1]);
                   return ad::sum(t, ad::mul(t, y, y));
                 },
                 {x, z}));
    }

    {  // activations; inputs kept away from the leaky-relu kink
      Tensor a = random_tensor({n, m}, r);
      for (std::size_t q = 0; q < a.numel(); ++q)
        if (std::abs(a[q]) < 1e-3) a[q] = 0.1;
      const double slope = r.uniform(0.01, 0.3);
      record("leaky_relu",
             check_gradients(
                 [slope](ad::Tape& t, const std::vector<ad::Node*>& l) {
                   return ad::sum(t, ad::leaky_relu(t, l[0], slope));
                 },
                 {a}));
      record("sigmoid", check_gradients(
                            [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                              return ad::sum(t, ad::sigmoid(t, l[0]));
                            },
                            {a}));
      record("softplus", check_gradients(
                             [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                               return ad::sum(t, ad::softplus(t, l[0]));
                             },
                             {a}));
      const std::uint64_t dseed = r.next_u64();
      record("dropout",
             check_gradients(
                 [dseed](ad::Tape& t, const std::vector<ad::Node*>& l) {
                   Rng dr(dseed);
                   return ad::sum(t, ad::dropout(t, l[0], 0.3, dr));
                 },
                 {a}));
    }

    {  // volumetric ops on small grids
      const std::size_t ci = 1 + r.below(2), co = 1 + r.below(2);
      const std::size_t A = 2 + r.below(2), B = 2 + r.below(2), C3 = 2;
      Tensor x = random_tensor({2, ci, A, B, C3}, r);
      Tensor w = random_tensor({co, ci, 3, 3, 3}, r, -0.5, 0.5);
      Tensor b = random_tensor({co}, r);
      record("conv3d", check_gradients(
                           [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                             auto* y = ad::conv3d(t, l[0], l[1], l[2], {1, 1, 1});
                             return ad::sum(t, ad::mul(t, y, y));
                           },
                           {x, w, b}));
      record("avgpool3d",
             check_gradients(
                 [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                   auto* y = ad::avgpool3d(t, l[0], {2, 2, 1});
                   return ad::sum(t, ad::mul(t, y, y));
                 },
                 {x}));
      Tensor wt = random_tensor({ci, co, 2, 2, 2}, r, -0.5, 0.5);
      record("conv_transpose3d",
             check_gradients(
                 [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                   auto* y = ad::conv_transpose3d(t, l[0], l[1], l[2], {1, 1, 1});
                   return ad::sum(t, ad::mul(t, y, y));
                 },
                 {x, wt, b}));
      Tensor gamma = random_tensor({ci}, r, 0.5, 1.5);
      Tensor beta = random_tensor({ci}, r);
      // The loss must weight the normalized output elementwise: sum(y^2)
      // of a batch-normalized tensor is constant by construction, which
      // would leave a near-zero gradient and a meaningless relative error.
      Tensor wq = random_tensor(x.shape(), r, 0.5, 1.5);
      record("batchnorm3d",
             check_gradients(
                 [ci](ad::Tape& t, const std::vector<ad::Node*>& l) {
                   ad::BatchNormState st(ci);
                   auto* y = ad::batchnorm3d(t, l[0], l[1], l[2], st, true);
                   return ad::sum(t, ad::mul(t, ad::mul(t, y, y), l[3]));
                 },
                 {x, gamma, beta, wq}));
    }

    {  // probabilistic terms
      Tensor mean = random_tensor({n, m}, r);
      Tensor logvar = random_tensor({m}, r, -1.5, 0.5);
      Tensor y = random_tensor({n, m}, r);
      record("gaussian_loglik",
             check_gradients(
                 [&y](ad::Tape& t, const std::vector<ad::Node*>& l) {
                   return ad::gaussian_loglik_node(t, l[0], l[1], y);
                 },
                 {mean, logvar}));
      Tensor mq = random_tensor({n, m}, r), mp = random_tensor({n, m}, r);
      Tensor sq = random_tensor({n, m}, r, 0.3, 1.5);
      Tensor sp = random_tensor({n, m}, r, 0.3, 1.5);
      record("kl_diag", check_gradients(
                            [](ad::Tape& t, const std::vector<ad::Node*>& l) {
                              return ad::kl_diag_node(t, l[0], l[1], l[2], l[3]);
                            },
                            {mq, sq, mp, sp}));
    }
  }
  return report;
}

// Finite-difference check of the full training loss through the composed
// encoder/decoder on a tiny architecture; a stride-sampled subset of every
// parameter tensor is perturbed.
inline GradCheckReport run_composed_gradient_check(std::uint64_t seed = 4242) {
  NpArchitecture arch;
  arch.grid = {4, 3, 2};
  arch.covariates = 2;
  arch.channels = 2;
  arch.latent_dim = 3;
  arch.dropout = 0.1;
  arch.conv.push_back({2, {3, 3, 3}, {1, 1, 1}, {2, 1, 1}});
  arch.conv.push_back({3, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}});
  arch.repr_width = 4;
  arch.enc_dense = {4};
  arch.dec_dense = {4};
  arch.dec_seed = {2, 2, 2, 1};
  arch.deconv.push_back({2, {2, 1, 1}, {1, 1, 1}});   // (2,2,1) -> (3,2,1)
  arch.deconv.push_back({1, {2, 2, 2}, {1, 1, 1}});   // (3,2,1) -> (4,3,2)
  arch.validate();

  NpModel model(arch, seed);
  Rng data_rng(seed, 7);
  const std::size_t N = 3;
  Tensor X = random_tensor({N, arch.covariates}, data_rng);
  Tensor Y = random_tensor({N, 4, 3, 2}, data_rng, 0.1, 0.9);
  Tensor C = random_tensor({N, arch.channels, 4, 3, 2}, data_rng, 0.1, 0.9);

  std::vector<Tensor> params;
  for (const auto& name : model.param_names()) params.push_back(model.param(name));

  // elbo_graph creates its own parameter leaves internally, so the generic
  // checker cannot be reused here. Analytic gradients come from one
  // backward pass; finite differences re-run the graph with perturbed
  // parameter tensors written into a scratch model.
  ad::Tape tape;
  Rng r0(seed, 11);
  ElboGraph g0 = elbo_graph(model, tape, X, Y, C, r0, 1, true);
  tape.backward(g0.loss);

  auto eval_loss = [&](const std::vector<Tensor>& vals) {
    NpModel m(arch, seed);
    for (std::size_t i = 0; i < vals.size(); ++i)
      m.param(m.param_names()[i]) = vals[i];
    ad::Tape t;
    Rng r(seed, 11);
    ElboGraph g = elbo_graph(m, t, X, Y, C, r, 1, true);
    return g.loss->value[0];
  };

  GradCheckReport rep;
  const double h = 1e-5;
  std::vector<Tensor> vals = params;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const std::size_t n = vals[i].numel();
    const std::size_t cap = 6;
    const std::size_t stride = n > cap ? (n + cap - 1) / cap : 1;
    for (std::size_t j = 0; j < n; j += stride) {
      const double orig = vals[i][j];
      vals[i][j] = orig + h;
      const double lp = eval_loss(vals);
      vals[i][j] = orig - h;
      const double lm = eval_loss(vals);
      vals[i][j] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = g0.param_nodes[i] && g0.param_nodes[i]->has_grad()
                            ? g0.param_nodes[i]->grad[j]
                            : 0.0;
      rep.max_rel_err = std::max(rep.max_rel_err, symmetric_rel_err(an, fd));
      ++rep.entries;
    }
  }
  return rep;
}

}  // namespace npnorm::testing
