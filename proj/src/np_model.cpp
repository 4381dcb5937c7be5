#include "npnorm/np_model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace npnorm {

namespace fs = std::filesystem;
using nlohmann::json;
using ad::Node;
using ad::Tape;

namespace {
constexpr double kLeakySlope = 0.01;
constexpr double kStdFloor = 1e-6;
constexpr double kVarFloor = 1e-6;
}  // namespace

void NpArchitecture::validate() const {
  if (latent_dim == 0) throw std::invalid_argument("NpArchitecture: latent_dim >= 1");
  if (channels == 0) throw std::invalid_argument("NpArchitecture: channels >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw std::invalid_argument("NpArchitecture: dropout must be in [0,1)");
  if (conv.empty() || deconv.empty())
    throw std::invalid_argument("NpArchitecture: conv and deconv stacks required");
  // encoder chain
  std::array<std::size_t, 3> ext = grid;
  for (const auto& l : conv) {
    for (int a = 0; a < 3; ++a) {
      if (ext[a] + 2 * l.pad[a] < l.kernel[a])
        throw std::invalid_argument("NpArchitecture: conv kernel exceeds padded input");
      ext[a] = ext[a] + 2 * l.pad[a] - l.kernel[a] + 1;
      if (l.pool[a] == 0 || l.pool[a] > ext[a])
        throw std::invalid_argument("NpArchitecture: invalid pool extent");
      ext[a] /= l.pool[a];
    }
  }
  // decoder chain
  if (dec_seed[0] == 0 || dec_seed[1] == 0 || dec_seed[2] == 0 || dec_seed[3] == 0)
    throw std::invalid_argument("NpArchitecture: dec_seed entries must be >= 1");
  std::array<std::size_t, 3> dx = {dec_seed[1], dec_seed[2], dec_seed[3]};
  for (const auto& l : deconv)
    for (int a = 0; a < 3; ++a) dx[a] = (dx[a] - 1) * l.stride[a] + l.kernel[a];
  if (dx != grid)
    throw std::invalid_argument("NpArchitecture: deconv stack yields " +
                                shape_str({dx[0], dx[1], dx[2]}) + ", grid is " +
                                shape_str({grid[0], grid[1], grid[2]}));
  if (deconv.back().out_channels != 1)
    throw std::invalid_argument("NpArchitecture: final deconv must emit 1 channel");
}

std::size_t NpArchitecture::conv_flat_width() const {
  std::array<std::size_t, 3> ext = grid;
  std::size_t c = channels;
  for (const auto& l : conv) {
    for (int a = 0; a < 3; ++a)
      ext[a] = (ext[a] + 2 * l.pad[a] - l.kernel[a] + 1) / l.pool[a];
    c = l.out_channels;
  }
  return c * ext[0] * ext[1] * ext[2];
}

NpArchitecture default_architecture(std::array<std::size_t, 3> grid,
                                    std::size_t covariates, std::size_t channels,
                                    std::size_t latent_dim) {
  NpArchitecture a;
  a.grid = grid;
  a.covariates = covariates;
  a.channels = channels;
  a.latent_dim = latent_dim;
  a.dropout = 0.1;

  const std::array<std::size_t, 3> widths = {8, 16, 32};
  std::array<std::size_t, 3> ext = grid;
  std::vector<std::array<std::size_t, 3>> targets;  // extents before each pool
  for (std::size_t i = 0; i < 3; ++i) {
    ConvLayerSpec l;
    l.out_channels = widths[i];
    targets.push_back(ext);
    for (int ax = 0; ax < 3; ++ax) {
      l.pool[ax] = ext[ax] >= 2 ? 2 : 1;
      ext[ax] /= l.pool[ax];
    }
    a.conv.push_back(l);
  }
  a.repr_width = 32;
  a.enc_dense = {32};
  a.dec_dense = {64};
  a.dec_seed = {32, ext[0], ext[1], ext[2]};

  // Mirror the pooling ladder: stride = pool, kernel solves
  // out = (in-1)*stride + kernel for the pre-pool extent of that level.
  const std::array<std::size_t, 3> dec_widths = {16, 8, 1};
  std::array<std::size_t, 3> cur = ext;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& l = a.conv[2 - i];
    DeconvLayerSpec d;
    d.out_channels = dec_widths[i];
    // target is the conv layer's *input* extent (pad/kernel cancel at pad 1,
    // kernel 3), i.e. what entered that encoder level.
    const auto& target = targets[2 - i];
    for (int ax = 0; ax < 3; ++ax) {
      d.stride[ax] = l.pool[ax];
      d.kernel[ax] = target[ax] - (cur[ax] - 1) * d.stride[ax];
    }
    cur = target;
    a.deconv.push_back(d);
  }
  a.validate();
  return a;
}

void TrainSchedule::validate() const {
  LrSchedule check(lr_start, lr_end, epochs);  // throws on bad lr/epochs
  (void)check;
  if (batch_size == 0) throw std::invalid_argument("TrainSchedule: batch_size >= 1");
  if (n_mc == 0) throw std::invalid_argument("TrainSchedule: n_mc >= 1");
  if (grad_clip < 0.0) throw std::invalid_argument("TrainSchedule: grad_clip >= 0");
}

NpModel::NpModel(NpArchitecture arch, std::uint64_t seed)
    : arch_(std::move(arch)), seed_(seed) {
  arch_.validate();
  Rng rng = Rng(seed).split(0xC0DE);

  auto fan_in_uniform = [&rng](std::vector<std::size_t> shape, std::size_t fan_in) {
    Tensor t(std::move(shape));
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-s, s);
    return t;
  };
  auto add_param = [this](const std::string& name, Tensor t) {
    names_.push_back(name);
    values_.push_back(std::move(t));
  };
  auto zeros = [](std::vector<std::size_t> shape) { return Tensor(std::move(shape)); };
  auto ones = [](std::vector<std::size_t> shape) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 1.0;
    return t;
  };

  std::size_t cin = arch_.channels;
  for (std::size_t i = 0; i < arch_.conv.size(); ++i) {
    const auto& l = arch_.conv[i];
    const std::size_t k = l.kernel[0] * l.kernel[1] * l.kernel[2];
    add_param("enc.conv" + std::to_string(i) + ".w",
              fan_in_uniform({l.out_channels, cin, l.kernel[0], l.kernel[1], l.kernel[2]},
                             cin * k));
    add_param("enc.conv" + std::to_string(i) + ".b", zeros({l.out_channels}));
    add_param("enc.bn" + std::to_string(i) + ".gamma", ones({l.out_channels}));
    add_param("enc.bn" + std::to_string(i) + ".beta", zeros({l.out_channels}));
    enc_bn_.emplace_back(l.out_channels);
    cin = l.out_channels;
  }
  const std::size_t flat = arch_.conv_flat_width();
  add_param("enc.repr.w", fan_in_uniform({flat, arch_.repr_width}, flat));
  add_param("enc.repr.b", zeros({arch_.repr_width}));

  std::size_t w_in = arch_.repr_width + arch_.covariates;
  for (std::size_t i = 0; i < arch_.enc_dense.size(); ++i) {
    add_param("enc.fc" + std::to_string(i) + ".w",
              fan_in_uniform({w_in, arch_.enc_dense[i]}, w_in));
    add_param("enc.fc" + std::to_string(i) + ".b", zeros({arch_.enc_dense[i]}));
    w_in = arch_.enc_dense[i];
  }
  add_param("enc.mean.w", fan_in_uniform({w_in, arch_.latent_dim}, w_in));
  add_param("enc.mean.b", zeros({arch_.latent_dim}));
  add_param("enc.std.w", fan_in_uniform({w_in, arch_.latent_dim}, w_in));
  add_param("enc.std.b", zeros({arch_.latent_dim}));

  w_in = arch_.covariates + arch_.latent_dim;
  for (std::size_t i = 0; i < arch_.dec_dense.size(); ++i) {
    add_param("dec.fc" + std::to_string(i) + ".w",
              fan_in_uniform({w_in, arch_.dec_dense[i]}, w_in));
    add_param("dec.fc" + std::to_string(i) + ".b", zeros({arch_.dec_dense[i]}));
    w_in = arch_.dec_dense[i];
  }
  const std::size_t seed_flat =
      arch_.dec_seed[0] * arch_.dec_seed[1] * arch_.dec_seed[2] * arch_.dec_seed[3];
  add_param("dec.seed.w", fan_in_uniform({w_in, seed_flat}, w_in));
  add_param("dec.seed.b", zeros({seed_flat}));

  cin = arch_.dec_seed[0];
  for (std::size_t i = 0; i < arch_.deconv.size(); ++i) {
    const auto& l = arch_.deconv[i];
    const std::size_t k = l.kernel[0] * l.kernel[1] * l.kernel[2];
    add_param("dec.deconv" + std::to_string(i) + ".w",
              fan_in_uniform({cin, l.out_channels, l.kernel[0], l.kernel[1], l.kernel[2]},
                             cin * k));
    add_param("dec.deconv" + std::to_string(i) + ".b", zeros({l.out_channels}));
    if (i + 1 < arch_.deconv.size()) {
      add_param("dec.bn" + std::to_string(i) + ".gamma", ones({l.out_channels}));
      add_param("dec.bn" + std::to_string(i) + ".beta", zeros({l.out_channels}));
      dec_bn_.emplace_back(l.out_channels);
    }
    cin = l.out_channels;
  }

  Tensor logvar({arch_.grid[0], arch_.grid[1], arch_.grid[2]});
  // Targets live in quantile space, so a uniform-variance prior is the
  // right starting scale for the noise model.
  for (std::size_t i = 0; i < logvar.numel(); ++i) logvar[i] = std::log(1.0 / 12.0);
  add_param("noise.logvar", std::move(logvar));
}

Tensor& NpModel::param(const std::string& name) {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return values_[i];
  throw std::out_of_range("NpModel: unknown parameter " + name);
}

const Tensor& NpModel::param(const std::string& name) const {
  return const_cast<NpModel*>(this)->param(name);
}

std::vector<Tensor*> NpModel::param_ptrs() {
  std::vector<Tensor*> p;
  for (auto& v : values_) p.push_back(&v);
  return p;
}

Tensor NpModel::replicate_target(const Tensor& Y, std::size_t channels) {
  if (Y.ndim() != 4) throw std::invalid_argument("replicate_target: Y must be 4-D");
  const std::size_t N = Y.extent(0), T = Y.numel() / Y.extent(0);
  Tensor C({N, channels, Y.extent(1), Y.extent(2), Y.extent(3)});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t m = 0; m < channels; ++m)
      std::copy(Y.data() + n * T, Y.data() + (n + 1) * T,
                C.data() + (n * channels + m) * T);
  return C;
}

namespace {

// Per-tape parameter node cache so the target-side and context-side
// encoder passes share nodes and accumulate into one gradient.
struct Builder {
  NpModel& m;
  Tape& t;
  std::unordered_map<std::string, Node*> nodes;

  Node* p(const std::string& name) {
    auto it = nodes.find(name);
    if (it != nodes.end()) return it->second;
    Node* n = t.param(m.param(name));
    nodes.emplace(name, n);
    return n;
  }
};

NpModel::EncoderOut encode_impl(Builder& b, const Tensor& X, const Tensor& C,
                                bool training, bool stochastic, Rng& rng) {
  const auto& arch = b.m.arch();
  if (C.ndim() != 5 || C.extent(1) != arch.channels)
    throw std::invalid_argument("encode: context must be (N," +
                                std::to_string(arch.channels) + ",T1,T2,T3), got " +
                                shape_str(C.shape()));
  const std::size_t N = C.extent(0);
  Tape& t = b.t;

  Node* x = t.constant(C);
  for (std::size_t i = 0; i < arch.conv.size(); ++i) {
    const auto& l = arch.conv[i];
    const std::string k = std::to_string(i);
    x = ad::conv3d(t, x, b.p("enc.conv" + k + ".w"), b.p("enc.conv" + k + ".b"), l.pad);
    x = ad::batchnorm3d(t, x, b.p("enc.bn" + k + ".gamma"), b.p("enc.bn" + k + ".beta"),
                        b.m.enc_bn()[i], training);
    if (l.pool != std::array<std::size_t, 3>{1, 1, 1}) x = ad::avgpool3d(t, x, l.pool);
    x = ad::leaky_relu(t, x, kLeakySlope);
  }
  x = ad::reshape(t, x, {N, x->value.numel() / N});
  x = ad::dense(t, x, b.p("enc.repr.w"), b.p("enc.repr.b"));
  x = ad::leaky_relu(t, x, kLeakySlope);

  Node* xc = t.constant(X);
  x = ad::concat_cols(t, x, xc);
  for (std::size_t i = 0; i < arch.enc_dense.size(); ++i) {
    const std::string k = std::to_string(i);
    x = ad::dense(t, x, b.p("enc.fc" + k + ".w"), b.p("enc.fc" + k + ".b"));
    x = ad::leaky_relu(t, x, kLeakySlope);
    if (stochastic && arch.dropout > 0.0) x = ad::dropout(t, x, arch.dropout, rng);
  }
  Node* mean = ad::dense(t, x, b.p("enc.mean.w"), b.p("enc.mean.b"));
  Node* pre = ad::dense(t, x, b.p("enc.std.w"), b.p("enc.std.b"));
  Node* sp = ad::softplus(t, pre);
  Tensor floor({N, arch.latent_dim});
  for (std::size_t i = 0; i < floor.numel(); ++i) floor[i] = kStdFloor;
  Node* std_n = ad::add(t, sp, t.constant(std::move(floor)));
  return {mean, std_n};
}

NpModel::DecoderOut decode_impl(Builder& b, const Tensor& X, Node* z, bool training,
                                bool stochastic, Rng& rng) {
  const auto& arch = b.m.arch();
  const std::size_t N = X.extent(0);
  if (z->value.ndim() != 2 || z->value.extent(0) != N ||
      z->value.extent(1) != arch.latent_dim)
    throw std::invalid_argument("decode: latent must be (N,Q), got " +
                                shape_str(z->value.shape()));
  Tape& t = b.t;
  Node* h = ad::concat_cols(t, t.constant(X), z);
  for (std::size_t i = 0; i < arch.dec_dense.size(); ++i) {
    const std::string k = std::to_string(i);
    h = ad::dense(t, h, b.p("dec.fc" + k + ".w"), b.p("dec.fc" + k + ".b"));
    h = ad::leaky_relu(t, h, kLeakySlope);
    if (stochastic && arch.dropout > 0.0) h = ad::dropout(t, h, arch.dropout, rng);
  }
  h = ad::dense(t, h, b.p("dec.seed.w"), b.p("dec.seed.b"));
  h = ad::leaky_relu(t, h, kLeakySlope);
  h = ad::reshape(t, h, {N, arch.dec_seed[0], arch.dec_seed[1], arch.dec_seed[2],
                         arch.dec_seed[3]});
  for (std::size_t i = 0; i < arch.deconv.size(); ++i) {
    const auto& l = arch.deconv[i];
    const std::string k = std::to_string(i);
    h = ad::conv_transpose3d(t, h, b.p("dec.deconv" + k + ".w"),
                             b.p("dec.deconv" + k + ".b"), l.stride);
    if (i + 1 < arch.deconv.size()) {
      h = ad::batchnorm3d(t, h, b.p("dec.bn" + k + ".gamma"), b.p("dec.bn" + k + ".beta"),
                          b.m.dec_bn()[i], training);
      h = ad::leaky_relu(t, h, kLeakySlope);
    }
  }
  h = ad::sigmoid(t, h);
  h = ad::reshape(t, h, {N, arch.grid[0], arch.grid[1], arch.grid[2]});
  return {h, b.p("noise.logvar")};
}

}  // namespace

NpModel::EncoderOut NpModel::encode_nodes(Tape& t, const Tensor& X, const Tensor& C,
                                          bool training, bool stochastic, Rng& rng) {
  Builder b{*this, t};
  return encode_impl(b, X, C, training, stochastic, rng);
}

NpModel::DecoderOut NpModel::decode_nodes(Tape& t, const Tensor& X, Node* z,
                                          bool training, bool stochastic, Rng& rng) {
  Builder b{*this, t};
  return decode_impl(b, X, z, training, stochastic, rng);
}

LatentGaussian NpModel::encode(const Tensor& X, const Tensor& C) {
  Tape t;
  Rng rng(0);
  auto out = encode_nodes(t, X, C, /*training=*/false, /*stochastic=*/false, rng);
  return {out.mean->value, out.std->value};
}

LatentGaussian NpModel::encode_target(const Tensor& X, const Tensor& Y) {
  return encode(X, replicate_target(Y, arch_.channels));
}

Tensor NpModel::decode(const Tensor& X, const Tensor& Z, bool stochastic, Rng& rng) {
  Tape t;
  Node* z = t.constant(Z);
  auto out = decode_nodes(t, X, z, /*training=*/false, stochastic, rng);
  return out.mean->value;
}

Tensor NpModel::noise_variance() const {
  const Tensor& lv = param("noise.logvar");
  Tensor out(lv.shape());
  for (std::size_t i = 0; i < lv.numel(); ++i)
    out[i] = std::max(std::exp(lv[i]), kVarFloor);
  return out;
}

double gaussian_loglik(const Tensor& Y, const Tensor& mean, const Tensor& var) {
  if (!Y.same_shape(mean))
    throw std::invalid_argument("gaussian_loglik: shape mismatch");
  const std::size_t T = var.numel();
  if (Y.numel() % T != 0)
    throw std::invalid_argument("gaussian_loglik: variance does not tile Y");
  constexpr double LOG_2PI = 1.8378770664093453;
  double ll = 0.0;
  const std::size_t N = Y.numel() / T;
  for (std::size_t i = 0; i < T; ++i)
    if (!(var[i] > 0.0))
      throw std::invalid_argument("gaussian_loglik: nonpositive variance");
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < T; ++i) {
      const double r = Y[n * T + i] - mean[n * T + i];
      ll += -0.5 * (LOG_2PI + std::log(var[i]) + r * r / var[i]);
    }
  return ll;
}

std::vector<double> kl_diag_gaussian(const LatentGaussian& q, const LatentGaussian& p) {
  if (!q.mean.same_shape(p.mean) || !q.mean.same_shape(q.std) ||
      !q.mean.same_shape(p.std))
    throw std::invalid_argument("kl_diag_gaussian: shape mismatch");
  const std::size_t N = q.mean.extent(0), Q = q.mean.extent(1);
  std::vector<double> out(N, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < Q; ++i) {
      const double qs = q.std[n * Q + i], ps = p.std[n * Q + i];
      if (!(qs > 0.0) || !(ps > 0.0))
        throw std::invalid_argument("kl_diag_gaussian: nonpositive std");
      const double d = q.mean[n * Q + i] - p.mean[n * Q + i];
      out[n] += std::log(ps / qs) + (qs * qs + d * d) / (2.0 * ps * ps) - 0.5;
    }
  return out;
}

double kl_diag_gaussian_sum(const LatentGaussian& q, const LatentGaussian& p) {
  const auto per = kl_diag_gaussian(q, p);
  return std::accumulate(per.begin(), per.end(), 0.0);
}

Tensor sample_latent(const LatentGaussian& q, Rng& rng) {
  Tensor z(q.mean.shape());
  for (std::size_t i = 0; i < z.numel(); ++i)
    z[i] = q.mean[i] + q.std[i] * rng.normal();
  return z;
}

ElboGraph elbo_graph(NpModel& model, Tape& tape, const Tensor& X, const Tensor& Y,
                     const Tensor& C, Rng& rng, std::size_t n_mc, bool training) {
  if (n_mc == 0) throw std::invalid_argument("elbo_graph: n_mc >= 1");
  Builder b{model, tape};
  Rng r_target = rng.split(1);
  Rng r_context = rng.split(2);
  Rng r_decoder = rng.split(3);
  Rng r_latent = rng.split(4);

  const Tensor C_target = NpModel::replicate_target(Y, model.arch().channels);
  auto q_t = encode_impl(b, X, C_target, training, training, r_target);
  auto q_c = encode_impl(b, X, C, training, training, r_context);

  const std::size_t N = X.extent(0), Q = model.arch().latent_dim;
  Node* recon_sum = nullptr;
  for (std::size_t s = 0; s < n_mc; ++s) {
    Tensor u({N, Q});
    for (std::size_t i = 0; i < u.numel(); ++i) u[i] = r_latent.normal();
    Node* z = ad::add(tape, q_t.mean, ad::mul(tape, q_t.std, tape.constant(std::move(u))));
    auto dec = decode_impl(b, X, z, training, training, r_decoder);
    Node* ll = ad::gaussian_loglik_node(tape, dec.mean, dec.logvar, Y, kVarFloor);
    recon_sum = recon_sum ? ad::add(tape, recon_sum, ll) : ll;
  }
  Node* recon = ad::scale(tape, recon_sum, 1.0 / static_cast<double>(n_mc));
  Node* kl = ad::kl_diag_node(tape, q_t.mean, q_t.std, q_c.mean, q_c.std);
  Node* loss = ad::sub(tape, kl, recon);

  ElboGraph g;
  g.loss = loss;
  g.terms = {loss->value[0], recon->value[0], kl->value[0]};
  for (const auto& name : model.param_names()) {
    auto it = b.nodes.find(name);
    g.param_nodes.push_back(it == b.nodes.end() ? nullptr : it->second);
  }
  return g;
}

ElboResult elbo_loss(NpModel& model, const Tensor& X, const Tensor& Y,
                     const Tensor& C, Rng& rng, std::size_t n_mc) {
  Tape tape;
  return elbo_graph(model, tape, X, Y, C, rng, n_mc, /*training=*/false).terms;
}

namespace {

Tensor gather_rows(const Tensor& src, const std::vector<std::size_t>& rows) {
  const std::size_t stride = src.numel() / src.extent(0);
  std::vector<std::size_t> shape = src.shape();
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(src.data() + rows[i] * stride, src.data() + (rows[i] + 1) * stride,
              out.data() + i * stride);
  return out;
}

}  // namespace

NpModel train(const Tensor& X_train, const Tensor& Y_train, const FixedEffectSet& F,
              const NpArchitecture& arch, const TrainSchedule& schedule, Rng rng) {
  schedule.validate();
  if (F.channels() != arch.channels)
    throw std::invalid_argument("train: architecture expects " +
                                std::to_string(arch.channels) + " channels, set has " +
                                std::to_string(F.channels()));
  const std::size_t N = X_train.extent(0);

  NpModel model(arch, rng.seed());
  model.schedule() = schedule;
  DesignMatrix Xd{X_train, {}};
  const Tensor C = context_functions(F, Xd);

  auto params = model.param_ptrs();
  std::vector<const Tensor*> cparams(params.begin(), params.end());
  AdamState adam = AdamState::init(cparams);
  LrSchedule lr(schedule.lr_start, schedule.lr_end, schedule.epochs);

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    Rng r_epoch = rng.split(1 + epoch);
    for (std::size_t i = N; i > 1; --i)
      std::swap(order[i - 1], order[r_epoch.below(i)]);

    EpochLog log;
    log.lr = lr.at(epoch);
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < N; start += schedule.batch_size) {
      const std::size_t end = std::min(N, start + schedule.batch_size);
      std::vector<std::size_t> batch(order.begin() + start, order.begin() + end);
      const Tensor Xb = gather_rows(X_train, batch);
      const Tensor Yb = gather_rows(Y_train, batch);
      const Tensor Cb = gather_rows(C, batch);

      Tape tape;
      Rng r_batch = r_epoch.split(1000 + n_batches);
      ElboGraph g = elbo_graph(model, tape, Xb, Yb, Cb, r_batch, schedule.n_mc, true);
      if (!std::isfinite(g.terms.loss))
        throw std::runtime_error("train: non-finite loss at epoch " +
                                 std::to_string(epoch) + " batch " +
                                 std::to_string(n_batches) + " (recon=" +
                                 std::to_string(g.terms.recon) + ", kl=" +
                                 std::to_string(g.terms.kl) + ")");
      tape.backward(g.loss);

      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (std::size_t p = 0; p < params.size(); ++p) {
        if (g.param_nodes[p] && g.param_nodes[p]->has_grad())
          grads.push_back(g.param_nodes[p]->grad);
        else
          grads.push_back(Tensor(params[p]->shape()));
      }
      if (schedule.grad_clip > 0.0) {
        double norm2 = 0.0;
        for (const auto& g_ : grads)
          for (std::size_t i = 0; i < g_.numel(); ++i) norm2 += g_[i] * g_[i];
        const double norm = std::sqrt(norm2);
        if (norm > schedule.grad_clip) {
          const double f = schedule.grad_clip / norm;
          for (auto& g_ : grads)
            for (std::size_t i = 0; i < g_.numel(); ++i) g_[i] *= f;
        }
      }
      std::vector<const Tensor*> gptr;
      for (const auto& g_ : grads) gptr.push_back(&g_);
      adam_step(adam, params, gptr, log.lr, model.param_names());

      log.loss += g.terms.loss;
      log.recon += g.terms.recon;
      log.kl += g.terms.kl;
      ++n_batches;
    }
    log.loss /= static_cast<double>(n_batches);
    log.recon /= static_cast<double>(n_batches);
    log.kl /= static_cast<double>(n_batches);
    model.train_log().push_back(log);
  }
  return model;
}

Tensor PredictiveSummary::total() const {
  Tensor t(epistemic.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = epistemic[i] + aleatoric[i];
  return t;
}

PredictiveSummary predict_distribution(NpModel& model, const Tensor& X_star,
                                       const FixedEffectSet& F, std::size_t K,
                                       std::size_t L, Rng rng, std::size_t budget,
                                       bool keep_samples) {
  if (K == 0 || L == 0)
    throw std::invalid_argument("predict_distribution: K and L must be >= 1");
  if (K * L > budget)
    throw std::invalid_argument("predict_distribution: K*L = " + std::to_string(K * L) +
                                " exceeds budget " + std::to_string(budget));
  DesignMatrix Xd{X_star, {}};
  const Tensor C = context_functions(F, Xd);
  const LatentGaussian q = model.encode(X_star, C);

  const std::size_t N = X_star.extent(0);
  const auto& g = model.arch().grid;
  const std::size_t T = g[0] * g[1] * g[2];

  PredictiveSummary out;
  out.mean = Tensor({N, g[0], g[1], g[2]});
  out.epistemic = Tensor(out.mean.shape());
  out.aleatoric = Tensor(out.mean.shape());
  out.noise_var = model.noise_variance();
  if (keep_samples) out.samples = Tensor({K, L, N, g[0], g[1], g[2]});

  std::vector<double> mask_mean(N * T);
  std::vector<double> mask_m2(N * T);
  std::vector<double> grand(N * T, 0.0);
  std::vector<double> within_acc(N * T, 0.0);
  std::vector<double> means_k(K * N * T);

  for (std::size_t k = 0; k < K; ++k) {
    std::fill(mask_mean.begin(), mask_mean.end(), 0.0);
    std::fill(mask_m2.begin(), mask_m2.end(), 0.0);
    for (std::size_t l = 0; l < L; ++l) {
      Rng r_latent = rng.split(2 * (k * L + l));
      Tensor z = sample_latent(q, r_latent);
      // Re-created per call so the dropout mask depends on k only and is
      // shared across the L latent draws.
      Rng r_mask = rng.split(2 * (K * L) + 1 + k);
      const bool mc_dropout = K > 1;
      Tensor dec = model.decode(X_star, z, mc_dropout, r_mask);
      for (std::size_t i = 0; i < N * T; ++i) {
        mask_mean[i] += dec[i];
        mask_m2[i] += dec[i] * dec[i];
      }
      if (keep_samples)
        std::copy(dec.data(), dec.data() + N * T,
                  out.samples->data() + (k * L + l) * N * T);
    }
    for (std::size_t i = 0; i < N * T; ++i) {
      const double m = mask_mean[i] / static_cast<double>(L);
      const double v = mask_m2[i] / static_cast<double>(L) - m * m;
      means_k[k * N * T + i] = m;
      grand[i] += m;
      within_acc[i] += std::max(v, 0.0);
    }
  }
  for (std::size_t i = 0; i < N * T; ++i) {
    const double gm = grand[i] / static_cast<double>(K);
    out.mean[i] = gm;
    double ep = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double d = means_k[k * N * T + i] - gm;
      ep += d * d;
    }
    out.epistemic[i] = ep / static_cast<double>(K);
    out.aleatoric[i] = within_acc[i] / static_cast<double>(K) + out.noise_var[i % T];
  }
  return out;
}

// --- JSON / persistence -----------------------------------------------------

json arch_to_json(const NpArchitecture& a) {
  json conv = json::array();
  for (const auto& l : a.conv)
    conv.push_back({{"out", l.out_channels},
                    {"kernel", l.kernel},
                    {"pad", l.pad},
                    {"pool", l.pool}});
  json deconv = json::array();
  for (const auto& l : a.deconv)
    deconv.push_back({{"out", l.out_channels}, {"kernel", l.kernel}, {"stride", l.stride}});
  return {{"grid", a.grid},
          {"covariates", a.covariates},
          {"channels", a.channels},
          {"latent_dim", a.latent_dim},
          {"dropout", a.dropout},
          {"conv", conv},
          {"repr_width", a.repr_width},
          {"enc_dense", a.enc_dense},
          {"dec_dense", a.dec_dense},
          {"dec_seed", a.dec_seed},
          {"deconv", deconv}};
}

NpArchitecture arch_from_json(const json& j) {
  NpArchitecture a;
  a.grid = j.at("grid").get<std::array<std::size_t, 3>>();
  a.covariates = j.at("covariates").get<std::size_t>();
  a.channels = j.at("channels").get<std::size_t>();
  a.latent_dim = j.at("latent_dim").get<std::size_t>();
  a.dropout = j.at("dropout").get<double>();
  a.conv.clear();
  for (const auto& l : j.at("conv")) {
    ConvLayerSpec s;
    s.out_channels = l.at("out").get<std::size_t>();
    s.kernel = l.at("kernel").get<std::array<std::size_t, 3>>();
    s.pad = l.at("pad").get<std::array<std::size_t, 3>>();
    s.pool = l.at("pool").get<std::array<std::size_t, 3>>();
    a.conv.push_back(s);
  }
  a.repr_width = j.at("repr_width").get<std::size_t>();
  a.enc_dense = j.at("enc_dense").get<std::vector<std::size_t>>();
  a.dec_dense = j.at("dec_dense").get<std::vector<std::size_t>>();
  a.dec_seed = j.at("dec_seed").get<std::array<std::size_t, 4>>();
  a.deconv.clear();
  for (const auto& l : j.at("deconv")) {
    DeconvLayerSpec s;
    s.out_channels = l.at("out").get<std::size_t>();
    s.kernel = l.at("kernel").get<std::array<std::size_t, 3>>();
    s.stride = l.at("stride").get<std::array<std::size_t, 3>>();
    a.deconv.push_back(s);
  }
  a.validate();
  return a;
}

json schedule_to_json(const TrainSchedule& s) {
  return {{"epochs", s.epochs},     {"lr_start", s.lr_start},
          {"lr_end", s.lr_end},     {"batch_size", s.batch_size},
          {"n_mc", s.n_mc},         {"grad_clip", s.grad_clip}};
}

TrainSchedule schedule_from_json(const json& j) {
  TrainSchedule s;
  s.epochs = j.at("epochs").get<std::size_t>();
  s.lr_start = j.at("lr_start").get<double>();
  s.lr_end = j.at("lr_end").get<double>();
  s.batch_size = j.at("batch_size").get<std::size_t>();
  s.n_mc = j.at("n_mc").get<std::size_t>();
  s.grad_clip = j.at("grad_clip").get<double>();
  s.validate();
  return s;
}

void save_model(const NpModel& model, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "params");
  json meta;
  meta["arch"] = arch_to_json(model.arch());
  meta["schedule"] = schedule_to_json(model.schedule());
  meta["seed"] = model.seed();
  std::ofstream af(fs::path(dir) / "arch.json");
  af << meta.dump(2) << "\n";
  if (!af) throw std::runtime_error("save_model: cannot write arch.json in " + dir);

  for (const auto& name : model.param_names())
    save_npnt(model.param(name), (fs::path(dir) / "params" / (name + ".npnt")).string());
  for (std::size_t i = 0; i < model.enc_bn().size(); ++i) {
    save_npnt(model.enc_bn()[i].running_mean,
              (fs::path(dir) / "params" / ("enc.bn" + std::to_string(i) + ".rmean.npnt")).string());
    save_npnt(model.enc_bn()[i].running_var,
              (fs::path(dir) / "params" / ("enc.bn" + std::to_string(i) + ".rvar.npnt")).string());
  }
  for (std::size_t i = 0; i < model.dec_bn().size(); ++i) {
    save_npnt(model.dec_bn()[i].running_mean,
              (fs::path(dir) / "params" / ("dec.bn" + std::to_string(i) + ".rmean.npnt")).string());
    save_npnt(model.dec_bn()[i].running_var,
              (fs::path(dir) / "params" / ("dec.bn" + std::to_string(i) + ".rvar.npnt")).string());
  }
  // The quantile transform and standardizer exist only on pipeline-trained
  // models; skip them when absent so bare models still round-trip.
  if (model.quantile().n_voxels() > 0)
    save_npnt(model.quantile().serialize(), (fs::path(dir) / "quantile.npnt").string());
  if (!model.standardizer().mean.empty()) {
    save_npnt(Tensor({model.standardizer().mean.size()}, model.standardizer().mean),
              (fs::path(dir) / "params" / "standardizer.mean.npnt").string());
    save_npnt(Tensor({model.standardizer().std.size()}, model.standardizer().std),
              (fs::path(dir) / "params" / "standardizer.std.npnt").string());
  }

  std::ofstream tl(fs::path(dir) / "trainlog.csv");
  tl << "epoch,recon,kl,lr\n";
  tl.precision(17);
  for (std::size_t e = 0; e < model.train_log().size(); ++e) {
    const auto& l = model.train_log()[e];
    tl << e << "," << l.recon << "," << l.kl << "," << l.lr << "\n";
  }
}

NpModel load_model(const std::string& dir) {
  std::ifstream af(fs::path(dir) / "arch.json");
  if (!af) throw std::runtime_error("load_model: missing arch.json in " + dir);
  json meta = json::parse(af);

  NpModel model(arch_from_json(meta.at("arch")), meta.at("seed").get<std::uint64_t>());
  model.schedule() = schedule_from_json(meta.at("schedule"));
  for (const auto& name : model.param_names())
    model.param(name) = load_npnt((fs::path(dir) / "params" / (name + ".npnt")).string());
  for (std::size_t i = 0; i < model.enc_bn().size(); ++i) {
    model.enc_bn()[i].running_mean = load_npnt(
        (fs::path(dir) / "params" / ("enc.bn" + std::to_string(i) + ".rmean.npnt")).string());
    model.enc_bn()[i].running_var = load_npnt(
        (fs::path(dir) / "params" / ("enc.bn" + std::to_string(i) + ".rvar.npnt")).string());
  }
  for (std::size_t i = 0; i < model.dec_bn().size(); ++i) {
    model.dec_bn()[i].running_mean = load_npnt(
        (fs::path(dir) / "params" / ("dec.bn" + std::to_string(i) + ".rmean.npnt")).string());
    model.dec_bn()[i].running_var = load_npnt(
        (fs::path(dir) / "params" / ("dec.bn" + std::to_string(i) + ".rvar.npnt")).string());
  }
  if (fs::exists(fs::path(dir) / "quantile.npnt"))
    model.set_quantile(QuantileTransform::deserialize(
        load_npnt((fs::path(dir) / "quantile.npnt").string())));
  if (fs::exists(fs::path(dir) / "params" / "standardizer.mean.npnt")) {
    Standardizer st;
    st.mean = load_npnt((fs::path(dir) / "params" / "standardizer.mean.npnt").string()).vec();
    st.std = load_npnt((fs::path(dir) / "params" / "standardizer.std.npnt").string()).vec();
    model.set_standardizer(std::move(st));
  }
  return model;
}

}  // namespace npnorm
