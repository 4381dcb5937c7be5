#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "npnorm/adam.hpp"
#include "npnorm/autodiff.hpp"
#include "npnorm/mixed_effect.hpp"
#include "npnorm/quantile.hpp"
#include "npnorm/rng.hpp"
#include "npnorm/tensor.hpp"

namespace npnorm {

struct ConvLayerSpec {
  std::size_t out_channels;
  std::array<std::size_t, 3> kernel{3, 3, 3};
  std::array<std::size_t, 3> pad{1, 1, 1};
  std::array<std::size_t, 3> pool{1, 1, 1};  // 1 = no pooling on that axis
};

struct DeconvLayerSpec {
  std::size_t out_channels;
  std::array<std::size_t, 3> kernel;
  std::array<std::size_t, 3> stride;
};

struct NpArchitecture {
  std::array<std::size_t, 3> grid{8, 10, 6};
  std::size_t covariates = 4;
  std::size_t channels = 1;  // context channels M
  std::size_t latent_dim = 16;
  double dropout = 0.1;
  std::vector<ConvLayerSpec> conv;
  std::size_t repr_width = 32;          // R_Y width after the conv stack
  std::vector<std::size_t> enc_dense;   // widths toward the joint repr R
  std::vector<std::size_t> dec_dense;   // widths from concat(X, Z)
  std::array<std::size_t, 4> dec_seed{32, 1, 1, 1};  // (C0, a, b, c)
  std::vector<DeconvLayerSpec> deconv;  // last layer must emit 1 channel

  std::size_t n_voxels() const { return grid[0] * grid[1] * grid[2]; }
  // Throws unless the conv chain is consistent and the deconv chain maps
  // dec_seed back onto grid with one output channel.
  void validate() const;
  std::size_t conv_flat_width() const;  // elements after the conv stack
};

// Paper-scale layer counts with desk-scale widths (8, 16, 32); pooling and
// deconv kernels are synthesized to fit the given grid.
NpArchitecture default_architecture(std::array<std::size_t, 3> grid,
                                    std::size_t covariates, std::size_t channels,
                                    std::size_t latent_dim = 16);

struct TrainSchedule {
  std::size_t epochs = 100;
  double lr_start = 1e-2;
  double lr_end = 1e-5;
  std::size_t batch_size = 4;
  std::size_t n_mc = 1;
  double grad_clip = 10.0;  // global-norm clip; 0 disables

  void validate() const;
};

struct LatentGaussian {
  Tensor mean;  // (N, Q)
  Tensor std;   // (N, Q), strictly positive
};

struct EpochLog {
  double loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double lr = 0.0;
};

struct PredictiveSummary {
  Tensor mean;       // (N, T1, T2, T3), quantile space
  Tensor epistemic;  // variance across dropout-mask means
  Tensor aleatoric;  // mean within-mask variance + learned noise variance
  Tensor noise_var;  // (T1, T2, T3)
  Tensor total() const;

  // (K, L, N, T...) decode samples, retained on request for variance
  // decomposition checks.
  std::optional<Tensor> samples;
};

class NpModel {
 public:
  NpModel() = default;
  NpModel(NpArchitecture arch, std::uint64_t seed);

  const NpArchitecture& arch() const { return arch_; }
  std::uint64_t seed() const { return seed_; }

  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  const std::vector<std::string>& param_names() const { return names_; }
  std::vector<Tensor*> param_ptrs();
  std::vector<ad::BatchNormState>& enc_bn() { return enc_bn_; }
  std::vector<ad::BatchNormState>& dec_bn() { return dec_bn_; }
  const std::vector<ad::BatchNormState>& enc_bn() const { return enc_bn_; }
  const std::vector<ad::BatchNormState>& dec_bn() const { return dec_bn_; }

  QuantileTransform& quantile() { return quantile_; }
  const QuantileTransform& quantile() const { return quantile_; }
  void set_quantile(QuantileTransform q) { quantile_ = std::move(q); }
  Standardizer& standardizer() { return standardizer_; }
  const Standardizer& standardizer() const { return standardizer_; }
  void set_standardizer(Standardizer s) { standardizer_ = std::move(s); }
  std::vector<EpochLog>& train_log() { return train_log_; }
  const std::vector<EpochLog>& train_log() const { return train_log_; }
  TrainSchedule& schedule() { return schedule_; }
  const TrainSchedule& schedule() const { return schedule_; }

  struct EncoderOut {
    ad::Node* mean;
    ad::Node* std;
  };

  // Graph-building forward passes. X is standardized covariates (N, D);
  // C is (N, M, T1, T2, T3). `training` drives batchnorm; `stochastic`
  // enables dropout with masks drawn from rng.
  EncoderOut encode_nodes(ad::Tape& t, const Tensor& X, const Tensor& C,
                          bool training, bool stochastic, Rng& rng);
  struct DecoderOut {
    ad::Node* mean;     // (N, T1, T2, T3), sigmoid output
    ad::Node* logvar;   // per-voxel log noise variance parameter node
  };
  DecoderOut decode_nodes(ad::Tape& t, const Tensor& X, ad::Node* z,
                          bool training, bool stochastic, Rng& rng);

  // Convenience value-level wrappers.
  LatentGaussian encode(const Tensor& X, const Tensor& C);
  LatentGaussian encode_target(const Tensor& X, const Tensor& Y);
  Tensor decode(const Tensor& X, const Tensor& Z, bool stochastic, Rng& rng);
  Tensor noise_variance() const;  // max(exp(logvar), 1e-6), shape (T1,T2,T3)

  // Y replicated across all M channels, through the same encoder weights.
  static Tensor replicate_target(const Tensor& Y, std::size_t channels);

 private:
  NpArchitecture arch_;
  std::uint64_t seed_ = 0;
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::vector<ad::BatchNormState> enc_bn_;
  std::vector<ad::BatchNormState> dec_bn_;
  QuantileTransform quantile_;
  Standardizer standardizer_;
  TrainSchedule schedule_;
  std::vector<EpochLog> train_log_;
};

// Plain (non-graph) statistics used across modules and for oracle checks.
double gaussian_loglik(const Tensor& Y, const Tensor& mean, const Tensor& var);
std::vector<double> kl_diag_gaussian(const LatentGaussian& q, const LatentGaussian& p);
double kl_diag_gaussian_sum(const LatentGaussian& q, const LatentGaussian& p);
Tensor sample_latent(const LatentGaussian& q, Rng& rng);

struct ElboResult {
  double loss;
  double recon;
  double kl;
};

struct ElboGraph {
  ad::Node* loss = nullptr;
  ElboResult terms{};
  // Aligned with model.param_names(); nullptr when a parameter did not
  // enter the graph (its gradient is zero).
  std::vector<ad::Node*> param_nodes;
};

// Builds the loss graph; gradients are available in param_nodes after
// tape.backward(graph.loss).
ElboGraph elbo_graph(NpModel& model, ad::Tape& tape, const Tensor& X,
                     const Tensor& Y, const Tensor& C, Rng& rng,
                     std::size_t n_mc, bool training = true);
ElboResult elbo_loss(NpModel& model, const Tensor& X, const Tensor& Y,
                     const Tensor& C, Rng& rng, std::size_t n_mc);

NpModel train(const Tensor& X_train, const Tensor& Y_train, const FixedEffectSet& F,
              const NpArchitecture& arch, const TrainSchedule& schedule, Rng rng);

PredictiveSummary predict_distribution(NpModel& model, const Tensor& X_star,
                                       const FixedEffectSet& F, std::size_t K,
                                       std::size_t L, Rng rng,
                                       std::size_t budget = 4096,
                                       bool keep_samples = false);

void save_model(const NpModel& model, const std::string& dir);
NpModel load_model(const std::string& dir);

nlohmann::json arch_to_json(const NpArchitecture& a);
NpArchitecture arch_from_json(const nlohmann::json& j);
nlohmann::json schedule_to_json(const TrainSchedule& s);
TrainSchedule schedule_from_json(const nlohmann::json& j);

}  // namespace npnorm
