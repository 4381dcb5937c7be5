#pragma once

#include <array>
#include <functional>
#include <memory>
#include <vector>

#include "npnorm/rng.hpp"
#include "npnorm/tensor.hpp"

namespace npnorm::ad {

struct Node {
  Tensor value;
  Tensor grad;  // allocated during backward for nodes that require grad
  std::vector<Node*> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  bool has_grad() const { return grad.numel() == value.numel() && value.numel() > 0; }
};

// Records the forward pass; nodes are created in topological order, so the
// backward pass is a single reverse sweep visiting each node exactly once.
class Tape {
 public:
  Node* constant(Tensor v);
  Node* param(Tensor v);  // leaf that accumulates gradient
  Node* make(Tensor v, std::vector<Node*> parents, std::function<void(Node&)> bw);

  // loss must be a scalar node on this tape. Populates grads of every
  // parameter node reachable from loss; unreachable parameters get zeros.
  void backward(Node* loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
};

// Elementwise / linear algebra
Node* add(Tape& t, Node* a, Node* b);
Node* sub(Tape& t, Node* a, Node* b);
Node* mul(Tape& t, Node* a, Node* b);
Node* scale(Tape& t, Node* a, double c);
Node* sum(Tape& t, Node* a);
Node* reshape(Tape& t, Node* a, std::vector<std::size_t> shape);
Node* matmul(Tape& t, Node* x, Node* w);          // (N,I)x(I,O) -> (N,O)
Node* add_rowvec(Tape& t, Node* x, Node* b);      // broadcast (O) over rows
Node* concat_cols(Tape& t, Node* a, Node* b);     // (N,A),(N,B) -> (N,A+B)
Node* dense(Tape& t, Node* x, Node* w, Node* b);

// Activations
Node* leaky_relu(Tape& t, Node* a, double slope);
Node* sigmoid(Tape& t, Node* a);
Node* softplus(Tape& t, Node* a);

// Dropout: zeroes with probability `rate`, rescales survivors by 1/(1-rate).
// The mask is drawn from `rng`; callers wanting identity simply skip the op.
Node* dropout(Tape& t, Node* a, double rate, Rng& rng);

// Volumetric layers; x is (N, C, A, B, C3).
Node* conv3d(Tape& t, Node* x, Node* w, Node* b, std::array<std::size_t, 3> pad);
Node* conv_transpose3d(Tape& t, Node* x, Node* w, Node* b,
                       std::array<std::size_t, 3> stride);
Node* avgpool3d(Tape& t, Node* x, std::array<std::size_t, 3> window);

struct BatchNormState {
  Tensor running_mean;  // (C)
  Tensor running_var;   // (C)
  explicit BatchNormState(std::size_t channels)
      : running_mean({channels}), running_var({channels}) {
    for (std::size_t c = 0; c < channels; ++c) running_var[c] = 1.0;
  }
};

// Train mode normalizes with batch statistics and updates the running ones
// (EMA, momentum 0.1); infer mode uses the stored running statistics so
// each subject's output is independent of the rest of the batch.
Node* batchnorm3d(Tape& t, Node* x, Node* gamma, Node* beta,
                  BatchNormState& state, bool training, double momentum = 0.1,
                  double eps = 1e-5);

// Sum over all elements of log N(y | mean, var) with var = max(exp(logvar),
// var_floor); logvar has the trailing shape of mean and broadcasts over its
// leading (subject) axis.
Node* gaussian_loglik_node(Tape& t, Node* mean, Node* logvar, const Tensor& y,
                           double var_floor = 1e-6);

// KL(q || p) summed over all entries, for diagonal Gaussians given as
// (mean, std) pairs; gradients flow into all four inputs.
Node* kl_diag_node(Tape& t, Node* mq, Node* sq, Node* mp, Node* sp);

}  // namespace npnorm::ad
