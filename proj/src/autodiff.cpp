#include "npnorm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace npnorm::ad {

namespace {

void ensure_grad(Node* n) {
  if (!n->requires_grad) return;
  if (!n->has_grad()) n->grad = Tensor(n->value.shape());
}

bool any_parent_grad(const std::vector<Node*>& parents) {
  return std::any_of(parents.begin(), parents.end(),
                     [](Node* p) { return p->requires_grad; });
}

void check_same_shape(const Node* a, const Node* b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a->value.shape()) + " vs " +
                                shape_str(b->value.shape()));
}

}  // namespace

Node* Tape::constant(Tensor v) {
  nodes_.push_back(std::make_unique<Node>());
  Node* n = nodes_.back().get();
  n->value = std::move(v);
  return n;
}

Node* Tape::param(Tensor v) {
  Node* n = constant(std::move(v));
  n->requires_grad = true;
  return n;
}

Node* Tape::make(Tensor v, std::vector<Node*> parents, std::function<void(Node&)> bw) {
  nodes_.push_back(std::make_unique<Node>());
  Node* n = nodes_.back().get();
  n->value = std::move(v);
  n->parents = std::move(parents);
  n->backward_fn = std::move(bw);
  n->requires_grad = any_parent_grad(n->parents);
  return n;
}

void Tape::backward(Node* loss) {
  if (loss->value.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss->value.shape()));
  for (auto& n : nodes_) ensure_grad(n.get());
  if (loss->requires_grad) loss->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node* n = it->get();
    if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
  }
}

Node* add(Tape& t, Node* a, Node* b) {
  check_same_shape(a, b, "add");
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
  return t.make(std::move(out), {a, b}, [a, b](Node& n) {
    for (std::size_t i = 0; i < n.grad.numel(); ++i) {
      if (a->requires_grad) a->grad[i] += n.grad[i];
      if (b->requires_grad) b->grad[i] += n.grad[i];
    }
  });
}

Node* sub(Tape& t, Node* a, Node* b) {
  check_same_shape(a, b, "sub");
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
  return t.make(std::move(out), {a, b}, [a, b](Node& n) {
    for (std::size_t i = 0; i < n.grad.numel(); ++i) {
      if (a->requires_grad) a->grad[i] += n.grad[i];
      if (b->requires_grad) b->grad[i] -= n.grad[i];
    }
  });
}

Node* mul(Tape& t, Node* a, Node* b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
  return t.make(std::move(out), {a, b}, [a, b](Node& n) {
    for (std::size_t i = 0; i < n.grad.numel(); ++i) {
      if (a->requires_grad) a->grad[i] += n.grad[i] * b->value[i];
      if (b->requires_grad) b->grad[i] += n.grad[i] * a->value[i];
    }
  });
}

Node* scale(Tape& t, Node* a, double c) {
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * c;
  return t.make(std::move(out), {a}, [a, c](Node& n) {
    if (!a->requires_grad) return;
    for (std::size_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * c;
  });
}

Node* sum(Tape& t, Node* a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
  return t.make(Tensor::scalar(s), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    const double g = n.grad[0];
    for (std::size_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
  });
}

Node* reshape(Tape& t, Node* a, std::vector<std::size_t> shape) {
  return t.make(a->value.reshaped(std::move(shape)), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    for (std::size_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
  });
}

Node* matmul(Tape& t, Node* x, Node* w) {
  if (x->value.ndim() != 2 || w->value.ndim() != 2 ||
      x->value.extent(1) != w->value.extent(0))
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(x->value.shape()) + " x " +
                                shape_str(w->value.shape()));
  const std::size_t N = x->value.extent(0), I = x->value.extent(1), O = w->value.extent(1);
  Tensor out({N, O});
  const double* xv = x->value.data();
  const double* wv = w->value.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < I; ++i) {
      const double xi = xv[n * I + i];
      const double* wr = wv + i * O;
      double* or_ = out.data() + n * O;
      for (std::size_t o = 0; o < O; ++o) or_[o] += xi * wr[o];
    }
  return t.make(std::move(out), {x, w}, [x, w, N, I, O](Node& n) {
    const double* g = n.grad.data();
    if (x->requires_grad) {
      const double* wv = w->value.data();
      for (std::size_t r = 0; r < N; ++r)
        for (std::size_t i = 0; i < I; ++i) {
          double s = 0.0;
          const double* wr = wv + i * O;
          const double* gr = g + r * O;
          for (std::size_t o = 0; o < O; ++o) s += gr[o] * wr[o];
          x->grad[r * I + i] += s;
        }
    }
    if (w->requires_grad) {
      const double* xv = x->value.data();
      for (std::size_t r = 0; r < N; ++r)
        for (std::size_t i = 0; i < I; ++i) {
          const double xi = xv[r * I + i];
          const double* gr = g + r * O;
          double* wg = w->grad.data() + i * O;
          for (std::size_t o = 0; o < O; ++o) wg[o] += xi * gr[o];
        }
    }
  });
}

Node* add_rowvec(Tape& t, Node* x, Node* b) {
  if (x->value.ndim() != 2 || b->value.ndim() != 1 ||
      x->value.extent(1) != b->value.extent(0))
    throw std::invalid_argument("add_rowvec: incompatible shapes");
  const std::size_t N = x->value.extent(0), O = x->value.extent(1);
  Tensor out({N, O});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      out[n * O + o] = x->value[n * O + o] + b->value[o];
  return t.make(std::move(out), {x, b}, [x, b, N, O](Node& n) {
    for (std::size_t r = 0; r < N; ++r)
      for (std::size_t o = 0; o < O; ++o) {
        const double g = n.grad[r * O + o];
        if (x->requires_grad) x->grad[r * O + o] += g;
        if (b->requires_grad) b->grad[o] += g;
      }
  });
}

Node* concat_cols(Tape& t, Node* a, Node* b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 ||
      a->value.extent(0) != b->value.extent(0))
    throw std::invalid_argument("concat_cols: row counts differ");
  const std::size_t N = a->value.extent(0), A = a->value.extent(1), B = b->value.extent(1);
  Tensor out({N, A + B});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t i = 0; i < A; ++i) out[n * (A + B) + i] = a->value[n * A + i];
    for (std::size_t i = 0; i < B; ++i) out[n * (A + B) + A + i] = b->value[n * B + i];
  }
  return t.make(std::move(out), {a, b}, [a, b, N, A, B](Node& n) {
    for (std::size_t r = 0; r < N; ++r) {
      if (a->requires_grad)
        for (std::size_t i = 0; i < A; ++i)
          a->grad[r * A + i] += n.grad[r * (A + B) + i];
      if (b->requires_grad)
        for (std::size_t i = 0; i < B; ++i)
          b->grad[r * B + i] += n.grad[r * (A + B) + A + i];
    }
  });
}

Node* dense(Tape& t, Node* x, Node* w, Node* b) {
  return add_rowvec(t, matmul(t, x, w), b);
}

Node* leaky_relu(Tape& t, Node* a, double slope) {
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double v = a->value[i];
    out[i] = v >= 0.0 ? v : slope * v;
  }
  return t.make(std::move(out), {a}, [a, slope](Node& n) {
    if (!a->requires_grad) return;
    for (std::size_t i = 0; i < n.grad.numel(); ++i)
      a->grad[i] += n.grad[i] * (a->value[i] >= 0.0 ? 1.0 : slope);
  });
}

Node* sigmoid(Tape& t, Node* a) {
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = 1.0 / (1.0 + std::exp(-a->value[i]));
  return t.make(std::move(out), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    for (std::size_t i = 0; i < n.grad.numel(); ++i) {
      const double s = n.value[i];
      a->grad[i] += n.grad[i] * s * (1.0 - s);
    }
  });
}

Node* softplus(Tape& t, Node* a) {
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double v = a->value[i];
    out[i] = v > 30.0 ? v : std::log1p(std::exp(v));  // overflow guard
  }
  return t.make(std::move(out), {a}, [a](Node& n) {
    if (!a->requires_grad) return;
    for (std::size_t i = 0; i < n.grad.numel(); ++i)
      a->grad[i] += n.grad[i] / (1.0 + std::exp(-a->value[i]));
  });
}

Node* dropout(Tape& t, Node* a, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout: rate must be in [0,1)");
  const double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<double>>(a->value.numel());
  Tensor out(a->value.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
    (*mask)[i] = m;
    out[i] = a->value[i] * m;
  }
  return t.make(std::move(out), {a}, [a, mask](Node& n) {
    if (!a->requires_grad) return;
    for (std::size_t i = 0; i < n.grad.numel(); ++i)
      a->grad[i] += n.grad[i] * (*mask)[i];
  });
}

namespace {

struct VolDims {
  std::size_t N, C, A, B, D;
};

VolDims vol_dims(const Node* x, const char* op) {
  if (x->value.ndim() != 5)
    throw std::invalid_argument(std::string(op) + ": input must be 5-D (N,C,A,B,C), got " +
                                shape_str(x->value.shape()));
  return {x->value.extent(0), x->value.extent(1), x->value.extent(2),
          x->value.extent(3), x->value.extent(4)};
}

// Correlation kernel shared by conv3d forward and its transposed sibling's
// input gradient. out(N,Co,Ao,Bo,Do) += x(N,Ci,..) * w(Co,Ci,ka,kb,kd).
void conv3d_accumulate(const double* x, double* out, const double* w,
                       std::size_t N, std::size_t Ci, std::size_t A, std::size_t B,
                       std::size_t D, std::size_t Co, std::size_t ka, std::size_t kb,
                       std::size_t kd, long pa, long pb, long pd, std::size_t Ao,
                       std::size_t Bo, std::size_t Do) {
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Co; ++co) {
      double* o = out + ((n * Co + co) * Ao) * Bo * Do;
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* xi = x + ((n * Ci + ci) * A) * B * D;
        const double* wk = w + ((co * Ci + ci) * ka) * kb * kd;
        for (std::size_t za = 0; za < ka; ++za)
          for (std::size_t zb = 0; zb < kb; ++zb)
            for (std::size_t zd = 0; zd < kd; ++zd) {
              const double wv = wk[(za * kb + zb) * kd + zd];
              if (wv == 0.0) continue;
              for (std::size_t ao = 0; ao < Ao; ++ao) {
                const long ai = static_cast<long>(ao + za) - pa;
                if (ai < 0 || ai >= static_cast<long>(A)) continue;
                for (std::size_t bo = 0; bo < Bo; ++bo) {
                  const long bi = static_cast<long>(bo + zb) - pb;
                  if (bi < 0 || bi >= static_cast<long>(B)) continue;
                  double* orow = o + (ao * Bo + bo) * Do;
                  const double* xrow = xi + (static_cast<std::size_t>(ai) * B +
                                             static_cast<std::size_t>(bi)) * D;
                  const long d0 = std::max<long>(0, pd - static_cast<long>(zd));
                  const long d1 = std::min<long>(static_cast<long>(Do),
                                                 static_cast<long>(D) + pd - static_cast<long>(zd));
                  for (long dd = d0; dd < d1; ++dd)
                    orow[dd] += wv * xrow[dd + static_cast<long>(zd) - pd];
                }
              }
            }
      }
    }
}

}  // namespace

Node* conv3d(Tape& t, Node* x, Node* w, Node* b, std::array<std::size_t, 3> pad) {
  const VolDims in = vol_dims(x, "conv3d");
  if (w->value.ndim() != 5)
    throw std::invalid_argument("conv3d: kernel must be 5-D (Co,Ci,ka,kb,kc)");
  const std::size_t Co = w->value.extent(0), Ci = w->value.extent(1);
  const std::size_t ka = w->value.extent(2), kb = w->value.extent(3), kd = w->value.extent(4);
  if (Ci != in.C)
    throw std::invalid_argument("conv3d: channel mismatch, input C=" + std::to_string(in.C) +
                                " kernel Ci=" + std::to_string(Ci));
  const long pa = static_cast<long>(pad[0]), pb = static_cast<long>(pad[1]),
             pd = static_cast<long>(pad[2]);
  if (in.A + 2 * pad[0] < ka || in.B + 2 * pad[1] < kb || in.D + 2 * pad[2] < kd)
    throw std::invalid_argument("conv3d: kernel larger than padded input on some axis");
  const std::size_t Ao = in.A + 2 * pad[0] - ka + 1;
  const std::size_t Bo = in.B + 2 * pad[1] - kb + 1;
  const std::size_t Do = in.D + 2 * pad[2] - kd + 1;
  if (b->value.numel() != Co)
    throw std::invalid_argument("conv3d: bias length mismatch");

  Tensor out({in.N, Co, Ao, Bo, Do});
  for (std::size_t n = 0; n < in.N; ++n)
    for (std::size_t co = 0; co < Co; ++co) {
      double* o = out.data() + ((n * Co + co) * Ao) * Bo * Do;
      const double bv = b->value[co];
      for (std::size_t i = 0; i < Ao * Bo * Do; ++i) o[i] = bv;
    }
  conv3d_accumulate(x->value.data(), out.data(), w->value.data(), in.N, in.C, in.A,
                    in.B, in.D, Co, ka, kb, kd, pa, pb, pd, Ao, Bo, Do);

  return t.make(std::move(out), {x, w, b},
                [x, w, b, in, Co, ka, kb, kd, pa, pb, pd, Ao, Bo, Do](Node& n) {
    const double* g = n.grad.data();
    if (b->requires_grad) {
      for (std::size_t r = 0; r < in.N; ++r)
        for (std::size_t co = 0; co < Co; ++co) {
          const double* gr = g + ((r * Co + co) * Ao) * Bo * Do;
          double s = 0.0;
          for (std::size_t i = 0; i < Ao * Bo * Do; ++i) s += gr[i];
          b->grad[co] += s;
        }
    }
    if (x->requires_grad) {
      // dL/dx: full correlation of grad with the kernel flipped in space
      // and transposed in channels.
      for (std::size_t r = 0; r < in.N; ++r)
        for (std::size_t ci = 0; ci < in.C; ++ci) {
          double* xg = x->grad.data() + ((r * in.C + ci) * in.A) * in.B * in.D;
          for (std::size_t co = 0; co < Co; ++co) {
            const double* gr = g + ((r * Co + co) * Ao) * Bo * Do;
            const double* wk = w->value.data() + ((co * in.C + ci) * ka) * kb * kd;
            for (std::size_t za = 0; za < ka; ++za)
              for (std::size_t zb = 0; zb < kb; ++zb)
                for (std::size_t zd = 0; zd < kd; ++zd) {
                  const double wv = wk[(za * kb + zb) * kd + zd];
                  if (wv == 0.0) continue;
                  for (std::size_t ao = 0; ao < Ao; ++ao) {
                    const long ai = static_cast<long>(ao + za) - pa;
                    if (ai < 0 || ai >= static_cast<long>(in.A)) continue;
                    for (std::size_t bo = 0; bo < Bo; ++bo) {
                      const long bi = static_cast<long>(bo + zb) - pb;
                      if (bi < 0 || bi >= static_cast<long>(in.B)) continue;
                      double* xrow = xg + (static_cast<std::size_t>(ai) * in.B +
                                           static_cast<std::size_t>(bi)) * in.D;
                      const double* grow = gr + (ao * Bo + bo) * Do;
                      const long d0 = std::max<long>(0, pd - static_cast<long>(zd));
                      const long d1 = std::min<long>(static_cast<long>(Do),
                                                     static_cast<long>(in.D) + pd -
                                                         static_cast<long>(zd));
                      for (long dd = d0; dd < d1; ++dd)
                        xrow[dd + static_cast<long>(zd) - pd] += wv * grow[dd];
                    }
                  }
                }
          }
        }
    }
    if (w->requires_grad) {
      for (std::size_t r = 0; r < in.N; ++r)
        for (std::size_t co = 0; co < Co; ++co) {
          const double* gr = g + ((r * Co + co) * Ao) * Bo * Do;
          for (std::size_t ci = 0; ci < in.C; ++ci) {
            const double* xi = x->value.data() + ((r * in.C + ci) * in.A) * in.B * in.D;
            double* wg = w->grad.data() + ((co * in.C + ci) * ka) * kb * kd;
            for (std::size_t za = 0; za < ka; ++za)
              for (std::size_t zb = 0; zb < kb; ++zb)
                for (std::size_t zd = 0; zd < kd; ++zd) {
                  double s = 0.0;
                  for (std::size_t ao = 0; ao < Ao; ++ao) {
                    const long ai = static_cast<long>(ao + za) - pa;
                    if (ai < 0 || ai >= static_cast<long>(in.A)) continue;
                    for (std::size_t bo = 0; bo < Bo; ++bo) {
                      const long bi = static_cast<long>(bo + zb) - pb;
                      if (bi < 0 || bi >= static_cast<long>(in.B)) continue;
                      const double* grow = gr + (ao * Bo + bo) * Do;
                      const double* xrow = xi + (static_cast<std::size_t>(ai) * in.B +
                                                 static_cast<std::size_t>(bi)) * in.D;
                      const long d0 = std::max<long>(0, pd - static_cast<long>(zd));
                      const long d1 = std::min<long>(static_cast<long>(Do),
                                                     static_cast<long>(in.D) + pd -
                                                         static_cast<long>(zd));
                      for (long dd = d0; dd < d1; ++dd)
                        s += grow[dd] * xrow[dd + static_cast<long>(zd) - pd];
                    }
                  }
                  wg[(za * kb + zb) * kd + zd] += s;
                }
          }
        }
    }
  });
}

Node* conv_transpose3d(Tape& t, Node* x, Node* w, Node* b,
                       std::array<std::size_t, 3> stride) {
  const VolDims in = vol_dims(x, "conv_transpose3d");
  if (w->value.ndim() != 5)
    throw std::invalid_argument("conv_transpose3d: kernel must be 5-D (Ci,Co,ka,kb,kc)");
  const std::size_t Ci = w->value.extent(0), Co = w->value.extent(1);
  const std::size_t ka = w->value.extent(2), kb = w->value.extent(3), kd = w->value.extent(4);
  if (Ci != in.C)
    throw std::invalid_argument("conv_transpose3d: channel mismatch, input C=" +
                                std::to_string(in.C) + " kernel Ci=" + std::to_string(Ci));
  if (b->value.numel() != Co)
    throw std::invalid_argument("conv_transpose3d: bias length mismatch");
  const std::size_t sa = stride[0], sb = stride[1], sd = stride[2];
  const std::size_t Ao = (in.A - 1) * sa + ka;
  const std::size_t Bo = (in.B - 1) * sb + kb;
  const std::size_t Do = (in.D - 1) * sd + kd;

  Tensor out({in.N, Co, Ao, Bo, Do});
  for (std::size_t n = 0; n < in.N; ++n)
    for (std::size_t co = 0; co < Co; ++co) {
      double* o = out.data() + ((n * Co + co) * Ao) * Bo * Do;
      const double bv = b->value[co];
      for (std::size_t i = 0; i < Ao * Bo * Do; ++i) o[i] = bv;
      for (std::size_t ci = 0; ci < in.C; ++ci) {
        const double* xi = x->value.data() + ((n * in.C + ci) * in.A) * in.B * in.D;
        const double* wk = w->value.data() + ((ci * Co + co) * ka) * kb * kd;
        for (std::size_t a = 0; a < in.A; ++a)
          for (std::size_t bb = 0; bb < in.B; ++bb)
            for (std::size_t d = 0; d < in.D; ++d) {
              const double xv = xi[(a * in.B + bb) * in.D + d];
              if (xv == 0.0) continue;
              for (std::size_t za = 0; za < ka; ++za)
                for (std::size_t zb = 0; zb < kb; ++zb) {
                  double* orow = o + ((a * sa + za) * Bo + bb * sb + zb) * Do + d * sd;
                  for (std::size_t zd = 0; zd < kd; ++zd)
                    orow[zd] += xv * wk[(za * kb + zb) * kd + zd];
                }
            }
      }
    }

  return t.make(std::move(out), {x, w, b},
                [x, w, b, in, Co, ka, kb, kd, sa, sb, sd, Ao, Bo, Do](Node& n) {
    const double* g = n.grad.data();
    if (b->requires_grad) {
      for (std::size_t r = 0; r < in.N; ++r)
        for (std::size_t co = 0; co < Co; ++co) {
          const double* gr = g + ((r * Co + co) * Ao) * Bo * Do;
          double s = 0.0;
          for (std::size_t i = 0; i < Ao * Bo * Do; ++i) s += gr[i];
          b->grad[co] += s;
        }
    }
    for (std::size_t r = 0; r < in.N; ++r)
      for (std::size_t ci = 0; ci < in.C; ++ci) {
        double* xg = x->requires_grad
                         ? x->grad.data() + ((r * in.C + ci) * in.A) * in.B * in.D
                         : nullptr;
        const double* xi = x->value.data() + ((r * in.C + ci) * in.A) * in.B * in.D;
        for (std::size_t co = 0; co < Co; ++co) {
          const double* gr = g + ((r * Co + co) * Ao) * Bo * Do;
          const double* wk = w->value.data() + ((ci * Co + co) * ka) * kb * kd;
          double* wg = w->requires_grad
                           ? w->grad.data() + ((ci * Co + co) * ka) * kb * kd
                           : nullptr;
          for (std::size_t a = 0; a < in.A; ++a)
            for (std::size_t bb = 0; bb < in.B; ++bb)
              for (std::size_t d = 0; d < in.D; ++d) {
                const std::size_t xoff = (a * in.B + bb) * in.D + d;
                double xs = 0.0;
                for (std::size_t za = 0; za < ka; ++za)
                  for (std::size_t zb = 0; zb < kb; ++zb) {
                    const double* grow =
                        gr + ((a * sa + za) * Bo + bb * sb + zb) * Do + d * sd;
                    const double* wrow = wk + (za * kb + zb) * kd;
                    for (std::size_t zd = 0; zd < kd; ++zd) {
                      xs += grow[zd] * wrow[zd];
                      if (wg) wg[(za * kb + zb) * kd + zd] += grow[zd] * xi[xoff];
                    }
                  }
                if (xg) xg[xoff] += xs;
              }
        }
      }
  });
}

Node* avgpool3d(Tape& t, Node* x, std::array<std::size_t, 3> window) {
  const VolDims in = vol_dims(x, "avgpool3d");
  const std::size_t wa = window[0], wb = window[1], wd = window[2];
  if (wa == 0 || wb == 0 || wd == 0 || wa > in.A || wb > in.B || wd > in.D)
    throw std::invalid_argument("avgpool3d: window " + std::to_string(wa) + "x" +
                                std::to_string(wb) + "x" + std::to_string(wd) +
                                " invalid for input " + shape_str(x->value.shape()));
  const std::size_t Ao = in.A / wa, Bo = in.B / wb, Do = in.D / wd;
  const double inv = 1.0 / static_cast<double>(wa * wb * wd);

  Tensor out({in.N, in.C, Ao, Bo, Do});
  for (std::size_t n = 0; n < in.N; ++n)
    for (std::size_t c = 0; c < in.C; ++c) {
      const double* xi = x->value.data() + ((n * in.C + c) * in.A) * in.B * in.D;
      double* o = out.data() + ((n * in.C + c) * Ao) * Bo * Do;
      for (std::size_t ao = 0; ao < Ao; ++ao)
        for (std::size_t bo = 0; bo < Bo; ++bo)
          for (std::size_t dd = 0; dd < Do; ++dd) {
            double s = 0.0;
            for (std::size_t za = 0; za < wa; ++za)
              for (std::size_t zb = 0; zb < wb; ++zb)
                for (std::size_t zd = 0; zd < wd; ++zd)
                  s += xi[((ao * wa + za) * in.B + bo * wb + zb) * in.D + dd * wd + zd];
            o[(ao * Bo + bo) * Do + dd] = s * inv;
          }
    }
  return t.make(std::move(out), {x}, [x, in, wa, wb, wd, Ao, Bo, Do, inv](Node& n) {
    if (!x->requires_grad) return;
    for (std::size_t r = 0; r < in.N; ++r)
      for (std::size_t c = 0; c < in.C; ++c) {
        double* xg = x->grad.data() + ((r * in.C + c) * in.A) * in.B * in.D;
        const double* gr = n.grad.data() + ((r * in.C + c) * Ao) * Bo * Do;
        for (std::size_t ao = 0; ao < Ao; ++ao)
          for (std::size_t bo = 0; bo < Bo; ++bo)
            for (std::size_t dd = 0; dd < Do; ++dd) {
              const double g = gr[(ao * Bo + bo) * Do + dd] * inv;
              for (std::size_t za = 0; za < wa; ++za)
                for (std::size_t zb = 0; zb < wb; ++zb)
                  for (std::size_t zd = 0; zd < wd; ++zd)
                    xg[((ao * wa + za) * in.B + bo * wb + zb) * in.D + dd * wd + zd] += g;
            }
      }
  });
}

Node* batchnorm3d(Tape& t, Node* x, Node* gamma, Node* beta,
                  BatchNormState& state, bool training, double momentum,
                  double eps) {
  const VolDims in = vol_dims(x, "batchnorm3d");
  if (gamma->value.numel() != in.C || beta->value.numel() != in.C ||
      state.running_mean.numel() != in.C)
    throw std::invalid_argument("batchnorm3d: channel-parameter mismatch");
  const std::size_t S = in.A * in.B * in.D;
  const std::size_t cnt = in.N * S;

  auto mean = std::make_shared<std::vector<double>>(in.C);
  auto var = std::make_shared<std::vector<double>>(in.C);
  if (training) {
    for (std::size_t c = 0; c < in.C; ++c) {
      double m = 0.0;
      for (std::size_t n = 0; n < in.N; ++n) {
        const double* xi = x->value.data() + ((n * in.C + c) * S);
        for (std::size_t i = 0; i < S; ++i) m += xi[i];
      }
      m /= static_cast<double>(cnt);
      double v = 0.0;
      for (std::size_t n = 0; n < in.N; ++n) {
        const double* xi = x->value.data() + ((n * in.C + c) * S);
        for (std::size_t i = 0; i < S; ++i) v += (xi[i] - m) * (xi[i] - m);
      }
      v /= static_cast<double>(cnt);
      (*mean)[c] = m;
      (*var)[c] = v;
      state.running_mean[c] = (1.0 - momentum) * state.running_mean[c] + momentum * m;
      state.running_var[c] = (1.0 - momentum) * state.running_var[c] + momentum * v;
    }
  } else {
    for (std::size_t c = 0; c < in.C; ++c) {
      (*mean)[c] = state.running_mean[c];
      (*var)[c] = state.running_var[c];
    }
  }

  Tensor out(x->value.shape());
  for (std::size_t n = 0; n < in.N; ++n)
    for (std::size_t c = 0; c < in.C; ++c) {
      const double m = (*mean)[c];
      const double is = 1.0 / std::sqrt((*var)[c] + eps);
      const double gc = gamma->value[c], bc = beta->value[c];
      const double* xi = x->value.data() + ((n * in.C + c) * S);
      double* o = out.data() + ((n * in.C + c) * S);
      for (std::size_t i = 0; i < S; ++i) o[i] = gc * (xi[i] - m) * is + bc;
    }

  return t.make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, in, S, cnt, mean, var, training, eps](Node& n) {
    for (std::size_t c = 0; c < in.C; ++c) {
      const double m = (*mean)[c];
      const double is = 1.0 / std::sqrt((*var)[c] + eps);
      const double gc = gamma->value[c];
      // channel-level reductions
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t r = 0; r < in.N; ++r) {
        const double* gr = n.grad.data() + ((r * in.C + c) * S);
        const double* xi = x->value.data() + ((r * in.C + c) * S);
        for (std::size_t i = 0; i < S; ++i) {
          sum_g += gr[i];
          sum_gx += gr[i] * (xi[i] - m) * is;
        }
      }
      if (gamma->requires_grad) gamma->grad[c] += sum_gx;
      if (beta->requires_grad) beta->grad[c] += sum_g;
      if (!x->requires_grad) continue;
      if (training) {
        const double inv_cnt = 1.0 / static_cast<double>(cnt);
        for (std::size_t r = 0; r < in.N; ++r) {
          const double* gr = n.grad.data() + ((r * in.C + c) * S);
          const double* xi = x->value.data() + ((r * in.C + c) * S);
          double* xg = x->grad.data() + ((r * in.C + c) * S);
          for (std::size_t i = 0; i < S; ++i) {
            const double xhat = (xi[i] - m) * is;
            xg[i] += gc * is * (gr[i] - inv_cnt * (sum_g + xhat * sum_gx));
          }
        }
      } else {
        for (std::size_t r = 0; r < in.N; ++r) {
          const double* gr = n.grad.data() + ((r * in.C + c) * S);
          double* xg = x->grad.data() + ((r * in.C + c) * S);
          for (std::size_t i = 0; i < S; ++i) xg[i] += gc * is * gr[i];
        }
      }
    }
  });
}

Node* gaussian_loglik_node(Tape& t, Node* mean, Node* logvar, const Tensor& y,
                           double var_floor) {
  if (!mean->value.same_shape(y))
    throw std::invalid_argument("gaussian_loglik: mean/target shape mismatch");
  const std::size_t T = logvar->value.numel();
  if (mean->value.numel() % T != 0)
    throw std::invalid_argument("gaussian_loglik: logvar does not tile mean");
  const std::size_t N = mean->value.numel() / T;
  constexpr double LOG_2PI = 1.8378770664093453;

  double ll = 0.0;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < T; ++i) {
      const double ev = std::exp(logvar->value[i]);
      const double v = std::max(ev, var_floor);
      const double r = y[n * T + i] - mean->value[n * T + i];
      ll += -0.5 * (LOG_2PI + std::log(v) + r * r / v);
    }
  auto target = std::make_shared<Tensor>(y);
  return t.make(Tensor::scalar(ll), {mean, logvar},
                [mean, logvar, target, N, T, var_floor](Node& n) {
    const double g = n.grad[0];
    for (std::size_t i = 0; i < T; ++i) {
      const double ev = std::exp(logvar->value[i]);
      const bool floored = ev < var_floor;
      const double v = floored ? var_floor : ev;
      double lv_acc = 0.0;
      for (std::size_t r = 0; r < N; ++r) {
        const double res = (*target)[r * T + i] - mean->value[r * T + i];
        if (mean->requires_grad) mean->grad[r * T + i] += g * res / v;
        lv_acc += -0.5 * (1.0 - res * res / v);
      }
      // d v / d logvar = v itself when off the floor, 0 when clamped
      if (logvar->requires_grad && !floored) logvar->grad[i] += g * lv_acc;
    }
  });
}

Node* kl_diag_node(Tape& t, Node* mq, Node* sq, Node* mp, Node* sp) {
  check_same_shape(mq, sq, "kl_diag");
  check_same_shape(mq, mp, "kl_diag");
  check_same_shape(mq, sp, "kl_diag");
  const std::size_t n_el = mq->value.numel();
  double kl = 0.0;
  for (std::size_t i = 0; i < n_el; ++i) {
    const double q_s = sq->value[i], p_s = sp->value[i];
    if (q_s <= 0.0 || p_s <= 0.0)
      throw std::invalid_argument("kl_diag: nonpositive std");
    const double d = mq->value[i] - mp->value[i];
    kl += std::log(p_s / q_s) + (q_s * q_s + d * d) / (2.0 * p_s * p_s) - 0.5;
  }
  return t.make(Tensor::scalar(kl), {mq, sq, mp, sp}, [mq, sq, mp, sp, n_el](Node& n) {
    const double g = n.grad[0];
    for (std::size_t i = 0; i < n_el; ++i) {
      const double q_s = sq->value[i], p_s = sp->value[i];
      const double d = mq->value[i] - mp->value[i];
      const double inv_p2 = 1.0 / (p_s * p_s);
      if (mq->requires_grad) mq->grad[i] += g * d * inv_p2;
      if (mp->requires_grad) mp->grad[i] -= g * d * inv_p2;
      if (sq->requires_grad) sq->grad[i] += g * (q_s * inv_p2 - 1.0 / q_s);
      if (sp->requires_grad)
        sp->grad[i] += g * (1.0 / p_s - (q_s * q_s + d * d) / (p_s * p_s * p_s));
    }
  });
}

}  // namespace npnorm::ad
