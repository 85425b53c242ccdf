#include "ldmi/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "ldmi/error.hpp"

namespace ldmi::ag {
namespace {

thread_local bool g_grad_enabled = true;

void require(bool cond, const std::string& what) {
  if (!cond) throw Error(ErrorCode::kShapeMismatch, what);
}

Tensor make_result(Shape shape, std::vector<double> value,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor* t : inputs) any = any || t->requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Tensor* t : inputs) node->parents.push_back(t->node_ptr());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

// C[m,n] (+)= A[m,k] * B[k,n]. Each output accumulates over k in order, so a
// row's result does not depend on how many other rows are in the product.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    const double* arow = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n].
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      double* crow = c + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<double> transposed(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  return out;
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.numel());
  auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_result(a.shape(), std::move(out), {&a}, [deriv](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
  });
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  require(shape_numel(shape) == values.size(),
          "constant: " + shape_str(shape) + " does not match " +
              std::to_string(values.size()) + " values");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return constant(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return constant({}, {value}); }

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

double Tensor::item() const {
  require(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

void Tensor::backward() const {
  require(numel() == 1, "backward() requires a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Tensor Tensor::detach() const { return constant(shape(), node_->value); }

Tensor Tensor::clone() const {
  Tensor t = constant(shape(), node_->value);
  t.node_->requires_grad = node_->requires_grad && node_->parents.empty();
  return t;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor sin(const Tensor& a) {
  return unary(a, [](double x) { return std::sin(x); },
               [](double x, double) { return std::cos(x); });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor silu(const Tensor& a) {
  return unary(a, [](double x) { return x * sigmoid(x); },
               [](double x, double) {
                 const double s = sigmoid(x);
                 return s * (1.0 + x * (1.0 - s));
               });
}

Tensor gelu(const Tensor& a) {
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + x * pdf;
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  const std::size_t n = bias.numel();
  require(a.rank() >= 1 && a.shape().back() == n,
          "add_bias: " + shape_str(a.shape()) + " with bias " + shape_str(bias.shape()));
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias.data()[i % n];
  return make_result(a.shape(), std::move(out), {&a, &bias}, [n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({}, {s}, {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  return make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      const auto bt = transposed(pb.value.data(), k, n);
      gemm_nn(self.grad.data(), bt.data(), pa.grad_buffer().data(), m, n, k, true);
    }
    if (pb.requires_grad) gemm_tn_acc(pa.value.data(), self.grad.data(), pb.grad_buffer().data(), m, k, n);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
          "matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  const auto bt = transposed(b.data().data(), n, k);
  std::vector<double> out(m * n);
  gemm_nn(a.data().data(), bt.data(), out.data(), m, k, n, false);
  return make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad)
      gemm_nn(self.grad.data(), pb.value.data(), pa.grad_buffer().data(), m, n, k, true);
    if (pb.requires_grad)
      gemm_tn_acc(self.grad.data(), pa.value.data(), pb.grad_buffer().data(), m, n, k);
  });
}

Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, "transpose: rank " + std::to_string(a.rank()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  return make_result({c, r}, transposed(a.data().data(), r, c), {&a}, [r, c](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  return make_result(std::move(shape), a.to_vector(), {&a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor gather(const Tensor& a, std::vector<std::size_t> index, Shape shape) {
  require(shape_numel(shape) == index.size(),
          "gather: " + std::to_string(index.size()) + " indices for " + shape_str(shape));
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < a.numel(), "gather: index out of range");
    out[i] = a.data()[index[i]];
  }
  return make_result(std::move(shape), std::move(out), {&a},
                     [index = std::move(index)](Node& self) {
                       Node& p = *self.parents[0];
                       if (!p.requires_grad) return;
                       auto& g = p.grad_buffer();
                       for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += self.grad[i];
                     });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require(a.rank() == 2 && begin <= end && end <= a.dim(0), "slice_rows: bad range");
  const std::size_t cols = a.dim(1);
  std::vector<std::size_t> index((end - begin) * cols);
  for (std::size_t i = 0; i < index.size(); ++i) index[i] = begin * cols + i;
  return gather(a, std::move(index), {end - begin, cols});
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const std::size_t cols = parts[0].dim(1);
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.dim(1) == cols, "concat_rows: column mismatch");
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  auto node = std::make_shared<Node>();
  node->shape = {rows, cols};
  node->value = std::move(out);
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (g_grad_enabled && any) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node_ptr());
    node->backward = [](Node& self) {
      std::size_t offset = 0;
      for (auto& p : self.parents) {
        if (p->requires_grad) {
          auto& g = p->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
        }
        offset += p->value.size();
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require(x.rank() == 2 && gamma.numel() == x.dim(1) && beta.numel() == x.dim(1),
          "layer_norm: " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), n = x.dim(1);
  std::vector<double> xhat(rows * n), inv_std(rows), out(rows * n);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (xr[j] - mu) * inv_std[r];
      out[r * n + j] = gamma.data()[j] * xhat[r * n + j] + beta.data()[j];
    }
  }
  return make_result(x.shape(), std::move(out), {&x, &gamma, &beta},
                     [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pg = *self.parents[1];
                       Node& pb = *self.parents[2];
                       const auto& dy = self.grad;
                       if (pg.requires_grad) {
                         auto& g = pg.grad_buffer();
                         for (std::size_t i = 0; i < rows * n; ++i) g[i % n] += dy[i] * xhat[i];
                       }
                       if (pb.requires_grad) {
                         auto& g = pb.grad_buffer();
                         for (std::size_t i = 0; i < rows * n; ++i) g[i % n] += dy[i];
                       }
                       if (!px.requires_grad) return;
                       auto& g = px.grad_buffer();
                       std::vector<double> dxhat(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double m1 = 0.0, m2 = 0.0;
                         for (std::size_t j = 0; j < n; ++j) {
                           dxhat[j] = dy[r * n + j] * pg.value[j];
                           m1 += dxhat[j];
                           m2 += dxhat[j] * xhat[r * n + j];
                         }
                         m1 /= static_cast<double>(n);
                         m2 /= static_cast<double>(n);
                         for (std::size_t j = 0; j < n; ++j)
                           g[r * n + j] += inv_std[r] * (dxhat[j] - m1 - xhat[r * n + j] * m2);
                       }
                     });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 const std::vector<bool>* key_mask, std::vector<double>* probs_out) {
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention: rank-2 inputs required");
  const std::size_t n = q.dim(0), m = k.dim(0), width = q.dim(1);
  require(heads > 0 && width % heads == 0 && k.dim(1) == width && v.dim(1) == width &&
              v.dim(0) == m,
          "attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " +
              shape_str(v.shape()));
  require(key_mask == nullptr || key_mask->size() == m, "attention: key mask size");
  if (key_mask && std::none_of(key_mask->begin(), key_mask->end(), [](bool b) { return b; }))
    throw Error(ErrorCode::kInvalidArgument, "attention: every key is masked");
  const std::size_t d = width / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> probs(heads * n * m, 0.0), out(n * width, 0.0);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  std::vector<double> scores(m);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * d;
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < m; ++j) {
        if (key_mask && !(*key_mask)[j]) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += qd[i * width + off + c] * kd[j * width + off + c];
        scores[j] = s * inv_sqrt_d;
        mx = std::max(mx, scores[j]);
      }
      double total = 0.0;
      double* p = probs.data() + (h * n + i) * m;
      for (std::size_t j = 0; j < m; ++j) {
        if (key_mask && !(*key_mask)[j]) continue;
        p[j] = std::exp(scores[j] - mx);
        total += p[j];
      }
      for (std::size_t j = 0; j < m; ++j) p[j] /= total;
      double* o = out.data() + i * width + off;
      for (std::size_t j = 0; j < m; ++j) {
        const double pj = p[j];
        const double* vr = vd + j * width + off;
        for (std::size_t c = 0; c < d; ++c) o[c] += pj * vr[c];
      }
    }
  }
  if (probs_out) *probs_out = probs;
  return make_result(
      {n, width}, std::move(out), {&q, &k, &v},
      [n, m, width, heads, d, inv_sqrt_d, probs = std::move(probs)](Node& self) {
        Node& pq = *self.parents[0];
        Node& pk = *self.parents[1];
        Node& pv = *self.parents[2];
        const auto& dout = self.grad;
        std::vector<double> dp(m), ds(m);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * d;
          for (std::size_t i = 0; i < n; ++i) {
            const double* p = probs.data() + (h * n + i) * m;
            const double* dor = dout.data() + i * width + off;
            double dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
              double s = 0.0;
              const double* vr = pv.value.data() + j * width + off;
              for (std::size_t c = 0; c < d; ++c) s += dor[c] * vr[c];
              dp[j] = s;
              dot += p[j] * s;
            }
            for (std::size_t j = 0; j < m; ++j) ds[j] = p[j] * (dp[j] - dot) * inv_sqrt_d;
            if (pv.requires_grad) {
              auto& g = pv.grad_buffer();
              for (std::size_t j = 0; j < m; ++j) {
                if (p[j] == 0.0) continue;
                double* gr = g.data() + j * width + off;
                for (std::size_t c = 0; c < d; ++c) gr[c] += p[j] * dor[c];
              }
            }
            if (pq.requires_grad) {
              double* gq = pq.grad_buffer().data() + i * width + off;
              for (std::size_t j = 0; j < m; ++j) {
                const double* kr = pk.value.data() + j * width + off;
                for (std::size_t c = 0; c < d; ++c) gq[c] += ds[j] * kr[c];
              }
            }
            if (pk.requires_grad) {
              auto& g = pk.grad_buffer();
              const double* qr = pq.value.data() + i * width + off;
              for (std::size_t j = 0; j < m; ++j) {
                double* gk = g.data() + j * width + off;
                for (std::size_t c = 0; c < d; ++c) gk[c] += ds[j] * qr[c];
              }
            }
          }
        }
      });
}

namespace {

// Source offsets (within one channel plane, or npos) of every output column
// for one kernel tap.
struct TapPlan {
  std::size_t ky, kx;
  std::vector<std::ptrdiff_t> src;  // per column b*hw_out + oy*wo + ox; -1 if padded
};

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  std::vector<TapPlan> taps;
};

ConvGeometry plan_conv(const Shape& xs, const Shape& ws, std::size_t stride, std::size_t pad) {
  ConvGeometry g{};
  g.batch = xs[0]; g.cin = xs[1]; g.h = xs[2]; g.w = xs[3];
  g.cout = ws[0]; g.kh = ws[2]; g.kw = ws[3];
  g.stride = stride; g.pad = pad;
  require(g.h + 2 * pad >= g.kh && g.w + 2 * pad >= g.kw, "conv2d: kernel larger than padded input");
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  const std::size_t cols = g.batch * g.ho * g.wo;
  for (std::size_t ky = 0; ky < g.kh; ++ky) {
    for (std::size_t kx = 0; kx < g.kw; ++kx) {
      TapPlan tap{ky, kx, std::vector<std::ptrdiff_t>(cols, -1)};
      bool any = false;
      for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
            tap.src[(b * g.ho + oy) * g.wo + ox] =
                static_cast<std::ptrdiff_t>(b * g.cin * g.h * g.w) + iy * static_cast<std::ptrdiff_t>(g.w) + ix;
            any = true;
          }
        }
      }
      if (any) g.taps.push_back(std::move(tap));
    }
  }
  return g;
}

// Gathers the input rows seen by one tap: [cin, cols].
std::vector<double> tap_columns(const ConvGeometry& g, const TapPlan& tap, const double* x) {
  const std::size_t cols = tap.src.size();
  const std::size_t plane = g.h * g.w;
  std::vector<double> out(g.cin * cols, 0.0);
  for (std::size_t c = 0; c < g.cin; ++c) {
    double* row = out.data() + c * cols;
    for (std::size_t j = 0; j < cols; ++j)
      if (tap.src[j] >= 0) row[j] = x[static_cast<std::size_t>(tap.src[j]) + c * plane];
  }
  return out;
}

std::vector<double> tap_weights(const ConvGeometry& g, const TapPlan& tap, const double* w) {
  std::vector<double> out(g.cout * g.cin);
  for (std::size_t o = 0; o < g.cout; ++o)
    for (std::size_t c = 0; c < g.cin; ++c)
      out[o * g.cin + c] = w[((o * g.cin + c) * g.kh + tap.ky) * g.kw + tap.kx];
  return out;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
  require(x.rank() == 4 && weight.rank() == 4 && weight.dim(1) == x.dim(1) &&
              bias.numel() == weight.dim(0) && stride >= 1,
          "conv2d: x " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
  auto geo = std::make_shared<ConvGeometry>(plan_conv(x.shape(), weight.shape(), stride, pad));
  const ConvGeometry& g = *geo;
  const std::size_t cols = g.batch * g.ho * g.wo;
  std::vector<double> y(g.cout * cols, 0.0);
  for (const auto& tap : g.taps) {
    const auto xs = tap_columns(g, tap, x.data().data());
    const auto wt = tap_weights(g, tap, weight.data().data());
    gemm_nn(wt.data(), xs.data(), y.data(), g.cout, g.cin, cols, true);
  }
  const std::size_t hw = g.ho * g.wo;
  std::vector<double> out(g.batch * g.cout * hw);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.cout; ++o)
      for (std::size_t p = 0; p < hw; ++p)
        out[(b * g.cout + o) * hw + p] = y[o * cols + b * hw + p] + bias.data()[o];
  return make_result({g.batch, g.cout, g.ho, g.wo}, std::move(out), {&x, &weight, &bias},
                     [geo](Node& self) {
                       const ConvGeometry& g = *geo;
                       Node& px = *self.parents[0];
                       Node& pw = *self.parents[1];
                       Node& pb = *self.parents[2];
                       const std::size_t hw = g.ho * g.wo;
                       const std::size_t cols = g.batch * hw;
                       std::vector<double> dy(g.cout * cols);
                       for (std::size_t b = 0; b < g.batch; ++b)
                         for (std::size_t o = 0; o < g.cout; ++o)
                           for (std::size_t p = 0; p < hw; ++p)
                             dy[o * cols + b * hw + p] = self.grad[(b * g.cout + o) * hw + p];
                       if (pb.requires_grad) {
                         auto& gb = pb.grad_buffer();
                         for (std::size_t o = 0; o < g.cout; ++o)
                           for (std::size_t j = 0; j < cols; ++j) gb[o] += dy[o * cols + j];
                       }
                       const std::size_t plane = g.h * g.w;
                       for (const auto& tap : g.taps) {
                         if (pw.requires_grad) {
                           const auto xs = tap_columns(g, tap, px.value.data());
                           auto& gw = pw.grad_buffer();
                           for (std::size_t o = 0; o < g.cout; ++o) {
                             const double* dr = dy.data() + o * cols;
                             for (std::size_t c = 0; c < g.cin; ++c) {
                               const double* xr = xs.data() + c * cols;
                               double s = 0.0;
                               for (std::size_t j = 0; j < cols; ++j) s += dr[j] * xr[j];
                               gw[((o * g.cin + c) * g.kh + tap.ky) * g.kw + tap.kx] += s;
                             }
                           }
                         }
                         if (px.requires_grad) {
                           const auto wt = tap_weights(g, tap, pw.value.data());
                           std::vector<double> dxs(g.cin * cols, 0.0);
                           gemm_tn_acc(wt.data(), dy.data(), dxs.data(), g.cout, g.cin, cols);
                           auto& gx = px.grad_buffer();
                           for (std::size_t c = 0; c < g.cin; ++c)
                             for (std::size_t j = 0; j < cols; ++j)
                               if (tap.src[j] >= 0)
                                 gx[static_cast<std::size_t>(tap.src[j]) + c * plane] += dxs[c * cols + j];
                         }
                       }
                     });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& t) {
  require(x.rank() == 4 && t.rank() == 2 && t.dim(0) == x.dim(0) && t.dim(1) == x.dim(1),
          "add_channel_bias: x " + shape_str(x.shape()) + " t " + shape_str(t.shape()));
  const std::size_t hw = x.dim(2) * x.dim(3);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += t.data()[i / hw];
  return make_result(x.shape(), std::move(out), {&x, &t}, [hw](Node& self) {
    Node& px = *self.parents[0];
    Node& pt = *self.parents[1];
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pt.requires_grad) {
      auto& g = pt.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i / hw] += self.grad[i];
    }
  });
}

Tensor upsample2x(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require(x.rank() == 4 && out_h <= 2 * x.dim(2) && out_w <= 2 * x.dim(3),
          "upsample2x: " + shape_str(x.shape()));
  const std::size_t bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<std::size_t> index(bc * out_h * out_w);
  for (std::size_t p = 0; p < bc; ++p)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t xx = 0; xx < out_w; ++xx)
        index[(p * out_h + y) * out_w + xx] = p * h * w + (y / 2) * w + xx / 2;
  return gather(x, std::move(index), {x.dim(0), x.dim(1), out_h, out_w});
}

Tensor normalize_columns(const Tensor& a, double min_norm) {
  require(a.rank() == 2, "normalize_columns: rank " + std::to_string(a.rank()));
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<double> norms(cols, 0.0), out(a.numel());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) norms[j] += a.data()[i * cols + j] * a.data()[i * cols + j];
  for (std::size_t j = 0; j < cols; ++j) {
    norms[j] = std::sqrt(norms[j]);
    if (!(norms[j] >= min_norm))
      throw Error(ErrorCode::kDegenerateNorm,
                  "column " + std::to_string(j + 1) + " has norm " + std::to_string(norms[j]) +
                      " below " + std::to_string(min_norm));
  }
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = a.data()[i * cols + j] / norms[j];
  return make_result(a.shape(), std::move(out), {&a}, [rows, cols, norms = std::move(norms)](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t j = 0; j < cols; ++j) {
      double dot = 0.0;
      for (std::size_t i = 0; i < rows; ++i) dot += self.value[i * cols + j] * self.grad[i * cols + j];
      for (std::size_t i = 0; i < rows; ++i)
        g[i * cols + j] += (self.grad[i * cols + j] - self.value[i * cols + j] * dot) / norms[j];
    }
  });
}

}  // namespace ldmi::ag
