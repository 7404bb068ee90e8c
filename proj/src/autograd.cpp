#include "volssl/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace volssl {

std::string to_string(const Shape3& s) {
  std::ostringstream os;
  os << s[0] << "x" << s[1] << "x" << s[2];
  return os.str();
}

std::string shape_string(const std::vector<Index>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

namespace {

Index product(const std::vector<Index>& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw std::invalid_argument("negative tensor dimension");
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<Index> shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(product(shape_)), fill) {}

Tensor::Tensor(std::vector<Index> shape, std::vector<double> data)
    : Tensor(std::move(shape), AlignedBuffer(data.begin(), data.end())) {}

Tensor::Tensor(std::vector<Index> shape, AlignedBuffer data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<Index>(data_.size()) != product(shape_)) {
    throw std::invalid_argument("tensor data size does not match shape " + shape_string(shape_));
  }
}

Index Tensor::rows() const {
  if (shape_.empty()) return 1;
  Index r = 1;
  for (std::size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
  return r;
}

Index Tensor::cols() const { return shape_.empty() ? 1 : shape_.back(); }

double Tensor::item() const {
  if (data_.size() != 1) throw std::logic_error("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(std::vector<Index> shape) const { return Tensor(std::move(shape), data_); }

Tensor& Node::ensure_grad() {
  if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::vector<std::uint8_t>* g_kink_log = nullptr;

Var make_result(Tensor value, std::initializer_list<const Var*> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needed = false;
  if (g_grad_enabled) {
    for (const Var* v : inputs) needed = needed || (v->defined() && v->requires_grad());
  }
  if (needed) {
    node->requires_grad = true;
    for (const Var* v : inputs) {
      if (v->defined()) node->inputs.push_back(v->shared());
    }
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

Var make_result_n(Tensor value, std::span<const Var> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needed = false;
  if (g_grad_enabled) {
    for (const Var& v : inputs) needed = needed || (v.defined() && v.requires_grad());
  }
  if (needed) {
    node->requires_grad = true;
    for (const Var& v : inputs) {
      if (v.defined()) node->inputs.push_back(v.shared());
    }
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

inline bool wants(const Node* n) { return n != nullptr && n->requires_grad; }

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.value().shape()) +
                                " vs " + shape_string(b.value().shape()));
  }
}

using RowVec = Eigen::Map<const Eigen::RowVectorXd>;
using RowVecMut = Eigen::Map<Eigen::RowVectorXd>;

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

KinkRecorder::KinkRecorder() : previous_(g_kink_log) { g_kink_log = &signs_; }
KinkRecorder::~KinkRecorder() { g_kink_log = previous_; }

void backward(const Var& out) {
  if (!out.defined()) throw std::invalid_argument("backward on undefined var");
  if (out.value().size() != 1) throw std::invalid_argument("backward requires a single-element output");
  if (!out.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(out.node(), 0);
  visited.insert(out.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  out.node()->ensure_grad()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Tensor softmax_rows(const Tensor& logits, double tau) {
  Tensor out(logits.shape());
  const Index r = logits.rows(), c = logits.cols();
  for (Index i = 0; i < r; ++i) {
    const double* z = logits.data() + i * c;
    double* p = out.data() + i * c;
    double mx = -INFINITY;
    for (Index k = 0; k < c; ++k) mx = std::max(mx, z[k] / tau);
    double s = 0.0;
    for (Index k = 0; k < c; ++k) {
      p[k] = std::exp(z[k] / tau - mx);
      s += p[k];
    }
    for (Index k = 0; k < c; ++k) p[k] /= s;
  }
  return out;
}

namespace ag {

Var constant(Tensor t) { return Var(std::move(t), false); }

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const Index n = x.rows(), in = x.cols();
  if (weight.value().rank() != 2 || weight.value().dim(0) != in) {
    throw std::invalid_argument("linear: input width " + std::to_string(in) + " vs weight " +
                                shape_string(weight.value().shape()));
  }
  const Index out = weight.value().dim(1);
  if (bias.defined() && bias.value().size() != out) throw std::invalid_argument("linear: bias size mismatch");
  Tensor y = Tensor::matrix(n, out);
  y.mat().noalias() = x.value().mat() * weight.value().mat();
  if (bias.defined()) y.mat().rowwise() += RowVec(bias.value().data(), out);
  Node *xn = x.node(), *wn = weight.node(), *bn = bias.node();
  return make_result(std::move(y), {&x, &weight, &bias}, [xn, wn, bn, out](Node& self) {
    auto dy = self.grad.mat();
    if (wants(xn)) xn->ensure_grad().mat().noalias() += dy * wn->value.mat().transpose();
    if (wants(wn)) wn->ensure_grad().mat().noalias() += xn->value.mat().transpose() * dy;
    if (wants(bn)) RowVecMut(bn->ensure_grad().data(), out) += dy.colwise().sum();
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  Tensor y = Tensor::matrix(a.rows(), b.rows());
  y.mat().noalias() = a.value().mat() * b.value().mat().transpose();
  Node *an = a.node(), *bn = b.node();
  return make_result(std::move(y), {&a, &b}, [an, bn](Node& self) {
    auto dy = self.grad.mat();
    if (wants(an)) an->ensure_grad().mat().noalias() += dy * bn->value.mat();
    if (wants(bn)) bn->ensure_grad().mat().noalias() += dy.transpose() * an->value.mat();
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor y = a.value();
  for (Index i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  Node *an = a.node(), *bn = b.node();
  return make_result(std::move(y), {&a, &b}, [an, bn](Node& self) {
    for (Node* n : {an, bn}) {
      if (!wants(n)) continue;
      Tensor& g = n->ensure_grad();
      for (Index i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor y = a.value();
  for (Index i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  Node *an = a.node(), *bn = b.node();
  return make_result(std::move(y), {&a, &b}, [an, bn](Node& self) {
    if (wants(an)) {
      Tensor& g = an->ensure_grad();
      for (Index i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(bn)) {
      Tensor& g = bn->ensure_grad();
      for (Index i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor y = a.value();
  for (Index i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  Node *an = a.node(), *bn = b.node();
  return make_result(std::move(y), {&a, &b}, [an, bn](Node& self) {
    if (wants(an)) {
      Tensor& g = an->ensure_grad();
      for (Index i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (wants(bn)) {
      Tensor& g = bn->ensure_grad();
      for (Index i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor y = a.value();
  for (double& v : y.values()) v *= s;
  Node* an = a.node();
  return make_result(std::move(y), {&a}, [an, s](Node& self) {
    Tensor& g = an->ensure_grad();
    for (Index i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var add_bias(const Var& x, const Var& bias) {
  const Index c = x.cols();
  if (bias.value().size() != c) throw std::invalid_argument("add_bias: bias size mismatch");
  Tensor y = x.value();
  y.mat().rowwise() += RowVec(bias.value().data(), c);
  Node *xn = x.node(), *bn = bias.node();
  return make_result(std::move(y), {&x, &bias}, [xn, bn, c](Node& self) {
    if (wants(xn)) {
      Tensor& g = xn->ensure_grad();
      for (Index i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(bn)) RowVecMut(bn->ensure_grad().data(), c) += self.grad.mat().colwise().sum();
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  Node* an = a.node();
  return make_result(Tensor::scalar(s), {&a}, [an](Node& self) {
    const double g0 = self.grad[0];
    for (double& g : an->ensure_grad().values()) g += g0;
  });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  if (terms.size() != weights.size() || terms.empty()) throw std::invalid_argument("weighted_sum: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) s += weights[i] * terms[i].value().item();
  std::vector<Node*> nodes;
  for (const Var& t : terms) nodes.push_back(t.node());
  std::vector<double> w(weights.begin(), weights.end());
  return make_result_n(Tensor::scalar(s), terms, [nodes, w](Node& self) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (wants(nodes[i])) nodes[i]->ensure_grad()[0] += w[i] * self.grad[0];
    }
  });
}

Var gelu(const Var& x) {
  Tensor y = x.value();
  for (double& v : y.values()) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  Node* xn = x.node();
  return make_result(std::move(y), {&x}, [xn](Node& self) {
    Tensor& g = xn->ensure_grad();
    const double inv_sqrt_2pi = 0.5 * M_2_SQRTPI * M_SQRT1_2;
    for (Index i = 0; i < g.size(); ++i) {
      const double v = xn->value[i];
      const double d = 0.5 * (1.0 + std::erf(v * M_SQRT1_2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += d * self.grad[i];
    }
  });
}

Var leaky_relu(const Var& x, double slope) {
  Tensor y = x.value();
  if (g_kink_log) {
    for (double v : y.values()) g_kink_log->push_back(v > 0);
  }
  for (double& v : y.values()) v = v > 0 ? v : slope * v;
  Node* xn = x.node();
  return make_result(std::move(y), {&x}, [xn, slope](Node& self) {
    Tensor& g = xn->ensure_grad();
    for (Index i = 0; i < g.size(); ++i) g[i] += (xn->value[i] > 0 ? 1.0 : slope) * self.grad[i];
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Index n = x.rows(), c = x.cols();
  if (gamma.value().size() != c || beta.value().size() != c) throw std::invalid_argument("layer_norm: affine size mismatch");
  auto xhat = std::make_shared<Tensor>(x.value().shape());
  auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  Tensor y(x.value().shape());
  const double* gm = gamma.value().data();
  const double* bt = beta.value().data();
  for (Index i = 0; i < n; ++i) {
    const double* xr = x.value().data() + i * c;
    double mu = 0.0;
    for (Index k = 0; k < c; ++k) mu += xr[k];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (Index k = 0; k < c; ++k) var += (xr[k] - mu) * (xr[k] - mu);
    var /= static_cast<double>(c);
    const double r = 1.0 / std::sqrt(var + eps);
    (*rstd)[static_cast<std::size_t>(i)] = r;
    double* hr = xhat->data() + i * c;
    double* yr = y.data() + i * c;
    for (Index k = 0; k < c; ++k) {
      hr[k] = (xr[k] - mu) * r;
      yr[k] = gm[k] * hr[k] + bt[k];
    }
  }
  Node *xn = x.node(), *gn = gamma.node(), *bn = beta.node();
  return make_result(std::move(y), {&x, &gamma, &beta}, [xn, gn, bn, xhat, rstd, n, c](Node& self) {
    const double* dy = self.grad.data();
    if (wants(gn)) {
      double* dg = gn->ensure_grad().data();
      for (Index i = 0; i < n; ++i)
        for (Index k = 0; k < c; ++k) dg[k] += dy[i * c + k] * (*xhat)[i * c + k];
    }
    if (wants(bn)) {
      double* db = bn->ensure_grad().data();
      for (Index i = 0; i < n; ++i)
        for (Index k = 0; k < c; ++k) db[k] += dy[i * c + k];
    }
    if (wants(xn)) {
      double* dx = xn->ensure_grad().data();
      const double* gm = gn->value.data();
      std::vector<double> dh(static_cast<std::size_t>(c));
      for (Index i = 0; i < n; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (Index k = 0; k < c; ++k) {
          dh[k] = dy[i * c + k] * gm[k];
          m1 += dh[k];
          m2 += dh[k] * (*xhat)[i * c + k];
        }
        m1 /= static_cast<double>(c);
        m2 /= static_cast<double>(c);
        const double r = (*rstd)[static_cast<std::size_t>(i)];
        for (Index k = 0; k < c; ++k) dx[i * c + k] += r * (dh[k] - m1 - (*xhat)[i * c + k] * m2);
      }
    }
  });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Index n = x.rows(), c = x.cols();
  if (gamma.value().size() != c || beta.value().size() != c) throw std::invalid_argument("instance_norm: affine size mismatch");
  if (n < 1) throw std::invalid_argument("instance_norm: empty input");
  auto xhat = std::make_shared<Tensor>(x.value().shape());
  auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
  std::vector<double> mu(static_cast<std::size_t>(c), 0.0), var(static_cast<std::size_t>(c), 0.0);
  const double* xv = x.value().data();
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < c; ++k) mu[k] += xv[i * c + k];
  for (auto& m : mu) m /= static_cast<double>(n);
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < c; ++k) var[k] += (xv[i * c + k] - mu[k]) * (xv[i * c + k] - mu[k]);
  for (Index k = 0; k < c; ++k) (*rstd)[k] = 1.0 / std::sqrt(var[k] / static_cast<double>(n) + eps);
  Tensor y(x.value().shape());
  const double* gm = gamma.value().data();
  const double* bt = beta.value().data();
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < c; ++k) {
      const double h = (xv[i * c + k] - mu[k]) * (*rstd)[k];
      (*xhat)[i * c + k] = h;
      y[i * c + k] = gm[k] * h + bt[k];
    }
  Node *xn = x.node(), *gn = gamma.node(), *bn = beta.node();
  return make_result(std::move(y), {&x, &gamma, &beta}, [xn, gn, bn, xhat, rstd, n, c](Node& self) {
    const double* dy = self.grad.data();
    std::vector<double> sdh(static_cast<std::size_t>(c), 0.0), sdhx(static_cast<std::size_t>(c), 0.0);
    std::vector<double> sdy(static_cast<std::size_t>(c), 0.0), sdyx(static_cast<std::size_t>(c), 0.0);
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < c; ++k) {
        sdy[k] += dy[i * c + k];
        sdyx[k] += dy[i * c + k] * (*xhat)[i * c + k];
      }
    if (wants(gn)) {
      double* dg = gn->ensure_grad().data();
      for (Index k = 0; k < c; ++k) dg[k] += sdyx[k];
    }
    if (wants(bn)) {
      double* db = bn->ensure_grad().data();
      for (Index k = 0; k < c; ++k) db[k] += sdy[k];
    }
    if (wants(xn)) {
      const double* gm = gn->value.data();
      double* dx = xn->ensure_grad().data();
      const double inv_n = 1.0 / static_cast<double>(n);
      for (Index i = 0; i < n; ++i)
        for (Index k = 0; k < c; ++k) {
          const double h = (*xhat)[i * c + k];
          dx[i * c + k] += gm[k] * (*rstd)[k] * (dy[i * c + k] - sdy[k] * inv_n - h * sdyx[k] * inv_n);
        }
    }
  });
}

Var l2_normalize_rows(const Var& x, double eps) {
  const Index n = x.rows(), c = x.cols();
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  Tensor y = x.value();
  for (Index i = 0; i < n; ++i) {
    double s = 0.0;
    for (Index k = 0; k < c; ++k) s += y[i * c + k] * y[i * c + k];
    const double nr = std::max(std::sqrt(s), eps);
    (*norms)[i] = nr;
    for (Index k = 0; k < c; ++k) y[i * c + k] /= nr;
  }
  Node* xn = x.node();
  return make_result(std::move(y), {&x}, [xn, norms, n, c](Node& self) {
    double* dx = xn->ensure_grad().data();
    const double* yv = self.value.data();
    const double* dy = self.grad.data();
    for (Index i = 0; i < n; ++i) {
      double dot = 0.0;
      for (Index k = 0; k < c; ++k) dot += dy[i * c + k] * yv[i * c + k];
      const double nr = (*norms)[i];
      for (Index k = 0; k < c; ++k) dx[i * c + k] += (dy[i * c + k] - yv[i * c + k] * dot) / nr;
    }
  });
}

Var concat_cols(const Var& a, const Var& b) {
  const Index n = a.rows();
  if (b.rows() != n) throw std::invalid_argument("concat_cols: row count mismatch");
  const Index ca = a.cols(), cb = b.cols();
  Tensor y = Tensor::matrix(n, ca + cb);
  for (Index i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * ca, ca, y.data() + i * (ca + cb));
    std::copy_n(b.value().data() + i * cb, cb, y.data() + i * (ca + cb) + ca);
  }
  Node *an = a.node(), *bn = b.node();
  return make_result(std::move(y), {&a, &b}, [an, bn, n, ca, cb](Node& self) {
    const double* dy = self.grad.data();
    if (wants(an)) {
      double* g = an->ensure_grad().data();
      for (Index i = 0; i < n; ++i)
        for (Index k = 0; k < ca; ++k) g[i * ca + k] += dy[i * (ca + cb) + k];
    }
    if (wants(bn)) {
      double* g = bn->ensure_grad().data();
      for (Index i = 0; i < n; ++i)
        for (Index k = 0; k < cb; ++k) g[i * cb + k] += dy[i * (ca + cb) + ca + k];
    }
  });
}

Var stack_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("stack_rows: no inputs");
  const Index c = parts[0].cols();
  Index total = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) throw std::invalid_argument("stack_rows: column mismatch");
    total += p.rows();
  }
  Tensor y = Tensor::matrix(total, c);
  std::vector<Node*> nodes;
  Index off = 0;
  for (const Var& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), y.data() + off);
    off += p.value().size();
    nodes.push_back(p.node());
  }
  return make_result_n(std::move(y), parts, [nodes](Node& self) {
    Index o = 0;
    for (Node* n : nodes) {
      const Index sz = n->value.size();
      if (wants(n)) {
        double* g = n->ensure_grad().data();
        for (Index i = 0; i < sz; ++i) g[i] += self.grad[o + i];
      }
      o += sz;
    }
  });
}

Var select_rows(const Var& x, std::span<const Index> rows) {
  const Index c = x.cols(), n = x.rows();
  Tensor y = Tensor::matrix(static_cast<Index>(rows.size()), c);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= n) throw std::out_of_range("select_rows: row index out of range");
    std::copy_n(x.value().data() + rows[r] * c, c, y.data() + static_cast<Index>(r) * c);
  }
  Node* xn = x.node();
  std::vector<Index> idx(rows.begin(), rows.end());
  return make_result(std::move(y), {&x}, [xn, idx, c](Node& self) {
    double* g = xn->ensure_grad().data();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (Index k = 0; k < c; ++k) g[idx[r] * c + k] += self.grad[static_cast<Index>(r) * c + k];
  });
}

Var mean_rows(const Var& x) {
  const Index n = x.rows(), c = x.cols();
  if (n == 0) throw std::invalid_argument("mean_rows: empty input");
  Tensor y = Tensor::matrix(1, c);
  RowVecMut(y.data(), c) = x.value().mat().colwise().sum() / static_cast<double>(n);
  Node* xn = x.node();
  return make_result(std::move(y), {&x}, [xn, n, c](Node& self) {
    xn->ensure_grad().mat().rowwise() += RowVec(self.grad.data(), c) / static_cast<double>(n);
  });
}

Var replace_rows(const Var& x, std::span<const std::uint8_t> mask, const Var& embedding) {
  const Index n = x.rows(), c = x.cols();
  if (static_cast<Index>(mask.size()) != n) throw std::invalid_argument("replace_rows: mask length mismatch");
  if (embedding.value().size() != c) throw std::invalid_argument("replace_rows: embedding width mismatch");
  Tensor y = x.value();
  for (Index i = 0; i < n; ++i)
    if (mask[i]) std::copy_n(embedding.value().data(), c, y.data() + i * c);
  Node *xn = x.node(), *en = embedding.node();
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return make_result(std::move(y), {&x, &embedding}, [xn, en, m, n, c](Node& self) {
    const double* dy = self.grad.data();
    if (wants(xn)) {
      double* g = xn->ensure_grad().data();
      for (Index i = 0; i < n; ++i)
        if (!m[i])
          for (Index k = 0; k < c; ++k) g[i * c + k] += dy[i * c + k];
    }
    if (wants(en)) {
      double* g = en->ensure_grad().data();
      for (Index i = 0; i < n; ++i)
        if (m[i])
          for (Index k = 0; k < c; ++k) g[k] += dy[i * c + k];
    }
  });
}

namespace {

// rows[out_row * f3 + sub] = fine row feeding that slot.
std::shared_ptr<std::vector<Index>> depth_map(const Shape3& grid, const Shape3& f) {
  for (int a = 0; a < 3; ++a) {
    if (f[a] <= 0 || grid[a] % f[a] != 0) {
      throw std::invalid_argument("space_to_depth: grid " + to_string(grid) + " not divisible by " + to_string(f) +
                                  " on axis " + std::to_string(a));
    }
  }
  const Shape3 cg{grid[0] / f[0], grid[1] / f[1], grid[2] / f[2]};
  auto map = std::make_shared<std::vector<Index>>();
  map->reserve(static_cast<std::size_t>(volume_of(grid)));
  for (Index cd = 0; cd < cg[0]; ++cd)
    for (Index ch = 0; ch < cg[1]; ++ch)
      for (Index cw = 0; cw < cg[2]; ++cw)
        for (Index od = 0; od < f[0]; ++od)
          for (Index oh = 0; oh < f[1]; ++oh)
            for (Index ow = 0; ow < f[2]; ++ow)
              map->push_back(((cd * f[0] + od) * grid[1] + ch * f[1] + oh) * grid[2] + cw * f[2] + ow);
  return map;
}

}  // namespace

Var space_to_depth(const Var& x, const Shape3& grid, const Shape3& factor) {
  const Index c = x.cols();
  if (x.rows() != volume_of(grid)) throw std::invalid_argument("space_to_depth: row count does not match grid " + to_string(grid));
  auto map = depth_map(grid, factor);
  const Index f3 = volume_of(factor);
  const Index n_out = x.rows() / f3;
  Tensor y = Tensor::matrix(n_out, f3 * c);
  for (std::size_t s = 0; s < map->size(); ++s)
    std::copy_n(x.value().data() + (*map)[s] * c, c, y.data() + static_cast<Index>(s) * c);
  Node* xn = x.node();
  return make_result(std::move(y), {&x}, [xn, map, c](Node& self) {
    double* g = xn->ensure_grad().data();
    for (std::size_t s = 0; s < map->size(); ++s) {
      const double* src = self.grad.data() + static_cast<Index>(s) * c;
      double* dst = g + (*map)[s] * c;
      for (Index k = 0; k < c; ++k) dst[k] += src[k];
    }
  });
}

Var depth_to_space(const Var& x, const Shape3& coarse_grid, const Shape3& factor) {
  const Index f3 = volume_of(factor);
  if (x.rows() != volume_of(coarse_grid) || x.cols() % f3 != 0) {
    throw std::invalid_argument("depth_to_space: input does not match grid " + to_string(coarse_grid));
  }
  const Index c = x.cols() / f3;
  const Shape3 fine{coarse_grid[0] * factor[0], coarse_grid[1] * factor[1], coarse_grid[2] * factor[2]};
  auto map = depth_map(fine, factor);
  Tensor y = Tensor::matrix(volume_of(fine), c);
  for (std::size_t s = 0; s < map->size(); ++s)
    std::copy_n(x.value().data() + static_cast<Index>(s) * c, c, y.data() + (*map)[s] * c);
  Node* xn = x.node();
  return make_result(std::move(y), {&x}, [xn, map, c](Node& self) {
    double* g = xn->ensure_grad().data();
    for (std::size_t s = 0; s < map->size(); ++s) {
      const double* src = self.grad.data() + (*map)[s] * c;
      double* dst = g + static_cast<Index>(s) * c;
      for (Index k = 0; k < c; ++k) dst[k] += src[k];
    }
  });
}

Var conv3d(const Var& x, const Shape3& grid, const Var& weight, const Var& bias, int kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("conv3d: kernel must be odd");
  const Index n = volume_of(grid), cin = x.cols();
  if (x.rows() != n) throw std::invalid_argument("conv3d: row count does not match grid " + to_string(grid));
  const Index k = kernel, k3 = k * k * k, pad = k / 2;
  if (weight.value().rank() != 2 || weight.value().dim(0) != k3 * cin) {
    throw std::invalid_argument("conv3d: weight shape " + shape_string(weight.value().shape()) + " incompatible with Cin=" +
                                std::to_string(cin));
  }
  const Index cout = weight.value().dim(1);
  if (bias.defined() && bias.value().size() != cout) throw std::invalid_argument("conv3d: bias size mismatch");

  // tap_src[v * k3 + t] = source row or -1 for zero padding.
  auto tap_src = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n * k3));
  for (Index d = 0; d < grid[0]; ++d)
    for (Index h = 0; h < grid[1]; ++h)
      for (Index w = 0; w < grid[2]; ++w) {
        const Index v = (d * grid[1] + h) * grid[2] + w;
        Index t = 0;
        for (Index a = 0; a < k; ++a)
          for (Index b = 0; b < k; ++b)
            for (Index e = 0; e < k; ++e, ++t) {
              const Index sd = d + a - pad, sh = h + b - pad, sw = w + e - pad;
              const bool inside = sd >= 0 && sd < grid[0] && sh >= 0 && sh < grid[1] && sw >= 0 && sw < grid[2];
              (*tap_src)[v * k3 + t] = inside ? (sd * grid[1] + sh) * grid[2] + sw : -1;
            }
      }
  auto col = std::make_shared<Tensor>(std::vector<Index>{n, k3 * cin});
  const double* xv = x.value().data();
  for (Index s = 0; s < n * k3; ++s) {
    const Index src = (*tap_src)[s];
    if (src >= 0) std::copy_n(xv + src * cin, cin, col->data() + s * cin);
  }
  Tensor y = Tensor::matrix(n, cout);
  y.mat().noalias() = col->mat() * weight.value().mat();
  if (bias.defined()) y.mat().rowwise() += RowVec(bias.value().data(), cout);
  Node *xn = x.node(), *wn = weight.node(), *bn = bias.node();
  return make_result(std::move(y), {&x, &weight, &bias}, [xn, wn, bn, col, tap_src, cin, cout](Node& self) {
    auto dy = self.grad.mat();
    if (wants(wn)) wn->ensure_grad().mat().noalias() += col->mat().transpose() * dy;
    if (wants(bn)) RowVecMut(bn->ensure_grad().data(), cout) += dy.colwise().sum();
    if (wants(xn)) {
      Tensor dcol(col->shape());
      dcol.mat().noalias() = dy * wn->value.mat().transpose();
      double* g = xn->ensure_grad().data();
      const Index total = static_cast<Index>(tap_src->size());
      for (Index s = 0; s < total; ++s) {
        const Index src = (*tap_src)[s];
        if (src < 0) continue;
        const double* d = dcol.data() + s * cin;
        double* o = g + src * cin;
        for (Index c = 0; c < cin; ++c) o[c] += d[c];
      }
    }
  });
}

namespace {

struct WindowPlan {
  Index tokens_per_window = 0;
  Index num_windows = 0;
  std::vector<Index> rows;     // [num_windows * T] grid row for each window slot
  std::vector<int> region;     // [num_windows * T] shift-mask region id
  std::vector<int> rel_index;  // [T * T] relative position bias row
  std::vector<std::uint8_t> masked_window;
  Index table_rows = 0;
};

std::shared_ptr<WindowPlan> plan_windows(const WindowGeometry& g) {
  auto p = std::make_shared<WindowPlan>();
  for (int a = 0; a < 3; ++a) {
    if (g.window[a] <= 0 || g.grid[a] % g.window[a] != 0) {
      throw std::invalid_argument("window_attention: grid " + to_string(g.grid) + " not divisible by window " +
                                  to_string(g.window));
    }
    if (g.shift[a] < 0 || g.shift[a] >= g.window[a]) throw std::invalid_argument("window_attention: invalid shift");
  }
  const Shape3 W = g.window;
  const Index T = volume_of(W);
  p->tokens_per_window = T;
  const Shape3 nw{g.grid[0] / W[0], g.grid[1] / W[1], g.grid[2] / W[2]};
  p->num_windows = volume_of(nw);
  p->table_rows = (2 * W[0] - 1) * (2 * W[1] - 1) * (2 * W[2] - 1);
  p->rows.reserve(static_cast<std::size_t>(p->num_windows * T));
  p->region.reserve(p->rows.capacity());
  auto region_of = [&](int axis, Index s) -> int {
    if (g.shift[axis] == 0) return 0;
    const Index G = g.grid[axis];
    if (s < G - W[axis]) return 0;
    if (s < G - g.shift[axis]) return 1;
    return 2;
  };
  for (Index wd = 0; wd < nw[0]; ++wd)
    for (Index wh = 0; wh < nw[1]; ++wh)
      for (Index ww = 0; ww < nw[2]; ++ww) {
        bool mixed = false;
        int first = -1;
        for (Index a = 0; a < W[0]; ++a)
          for (Index b = 0; b < W[1]; ++b)
            for (Index c = 0; c < W[2]; ++c) {
              const Index sd = wd * W[0] + a, sh = wh * W[1] + b, sw = ww * W[2] + c;
              const Index od = (sd + g.shift[0]) % g.grid[0];
              const Index oh = (sh + g.shift[1]) % g.grid[1];
              const Index ow = (sw + g.shift[2]) % g.grid[2];
              p->rows.push_back((od * g.grid[1] + oh) * g.grid[2] + ow);
              const int r = region_of(0, sd) * 9 + region_of(1, sh) * 3 + region_of(2, sw);
              p->region.push_back(r);
              if (first < 0) first = r;
              mixed = mixed || r != first;
            }
        p->masked_window.push_back(mixed ? 1 : 0);
      }
  p->rel_index.resize(static_cast<std::size_t>(T * T));
  std::vector<Shape3> local;
  for (Index a = 0; a < W[0]; ++a)
    for (Index b = 0; b < W[1]; ++b)
      for (Index c = 0; c < W[2]; ++c) local.push_back({a, b, c});
  for (Index i = 0; i < T; ++i)
    for (Index j = 0; j < T; ++j) {
      const Index rd = local[i][0] - local[j][0] + W[0] - 1;
      const Index rh = local[i][1] - local[j][1] + W[1] - 1;
      const Index rw = local[i][2] - local[j][2] + W[2] - 1;
      p->rel_index[i * T + j] = static_cast<int>((rd * (2 * W[1] - 1) + rh) * (2 * W[2] - 1) + rw);
    }
  return p;
}

using DynMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

Var window_attention(const Var& qkv, const WindowGeometry& geom, int heads, const Var& bias_table) {
  const Index n = qkv.rows();
  if (n != volume_of(geom.grid)) throw std::invalid_argument("window_attention: token count does not match grid");
  if (qkv.cols() % 3 != 0) throw std::invalid_argument("window_attention: qkv width not divisible by 3");
  const Index c = qkv.cols() / 3;
  if (heads <= 0 || c % heads != 0) throw std::invalid_argument("window_attention: heads must divide channel width");
  auto plan = plan_windows(geom);
  if (bias_table.value().rank() != 2 || bias_table.value().dim(0) != plan->table_rows || bias_table.value().dim(1) != heads) {
    throw std::invalid_argument("window_attention: bias table shape " + shape_string(bias_table.value().shape()));
  }
  const Index hd = c / heads, T = plan->tokens_per_window;
  const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(plan->num_windows * heads * T * T));
  Tensor y = Tensor::matrix(n, c);
  const double* qv = qkv.value().data();
  const double* tbl = bias_table.value().data();
  DynMat Q(T, hd), K(T, hd), V(T, hd), S(T, T), O(T, hd);
  for (Index w = 0; w < plan->num_windows; ++w) {
    const Index* rows = plan->rows.data() + w * T;
    const int* reg = plan->region.data() + w * T;
    const bool masked = plan->masked_window[w] != 0;
    for (int h = 0; h < heads; ++h) {
      for (Index t = 0; t < T; ++t) {
        const double* r = qv + rows[t] * 3 * c + h * hd;
        for (Index e = 0; e < hd; ++e) {
          Q(t, e) = r[e];
          K(t, e) = r[c + e];
          V(t, e) = r[2 * c + e];
        }
      }
      S.noalias() = sc * Q * K.transpose();
      double* P = probs->data() + ((w * heads + h) * T) * T;
      for (Index i = 0; i < T; ++i) {
        double mx = -INFINITY;
        for (Index j = 0; j < T; ++j) {
          if (masked && reg[i] != reg[j]) continue;
          S(i, j) += tbl[plan->rel_index[i * T + j] * heads + h];
          mx = std::max(mx, S(i, j));
        }
        double s = 0.0;
        for (Index j = 0; j < T; ++j) {
          if (masked && reg[i] != reg[j]) {
            P[i * T + j] = 0.0;
            continue;
          }
          P[i * T + j] = std::exp(S(i, j) - mx);
          s += P[i * T + j];
        }
        for (Index j = 0; j < T; ++j) P[i * T + j] /= s;
      }
      Eigen::Map<const DynMat> Pm(P, T, T);
      O.noalias() = Pm * V;
      for (Index t = 0; t < T; ++t) std::copy_n(O.row(t).data(), hd, y.data() + rows[t] * c + h * hd);
    }
  }
  Node *qn = qkv.node(), *bn = bias_table.node();
  return make_result(std::move(y), {&qkv, &bias_table}, [qn, bn, plan, probs, heads, c, hd, T, sc](Node& self) {
    const double* qv = qn->value.data();
    const double* dy = self.grad.data();
    double* dq = wants(qn) ? qn->ensure_grad().data() : nullptr;
    double* dtbl = wants(bn) ? bn->ensure_grad().data() : nullptr;
    DynMat Q(T, hd), K(T, hd), V(T, hd), dO(T, hd), dP(T, T), dS(T, T), dQ(T, hd), dK(T, hd), dV(T, hd);
    for (Index w = 0; w < plan->num_windows; ++w) {
      const Index* rows = plan->rows.data() + w * T;
      for (int h = 0; h < heads; ++h) {
        for (Index t = 0; t < T; ++t) {
          const double* r = qv + rows[t] * 3 * c + h * hd;
          const double* g = dy + rows[t] * c + h * hd;
          for (Index e = 0; e < hd; ++e) {
            Q(t, e) = r[e];
            K(t, e) = r[c + e];
            V(t, e) = r[2 * c + e];
            dO(t, e) = g[e];
          }
        }
        Eigen::Map<const DynMat> P(probs->data() + ((w * heads + h) * T) * T, T, T);
        dV.noalias() = P.transpose() * dO;
        dP.noalias() = dO * V.transpose();
        for (Index i = 0; i < T; ++i) {
          double dot = 0.0;
          for (Index j = 0; j < T; ++j) dot += P(i, j) * dP(i, j);
          for (Index j = 0; j < T; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot);
        }
        if (dtbl) {
          for (Index i = 0; i < T; ++i)
            for (Index j = 0; j < T; ++j) dtbl[plan->rel_index[i * T + j] * heads + h] += dS(i, j);
        }
        if (dq) {
          dQ.noalias() = sc * dS * K;
          dK.noalias() = sc * dS.transpose() * Q;
          for (Index t = 0; t < T; ++t) {
            double* r = dq + rows[t] * 3 * c + h * hd;
            for (Index e = 0; e < hd; ++e) {
              r[e] += dQ(t, e);
              r[c + e] += dK(t, e);
              r[2 * c + e] += dV(t, e);
            }
          }
        }
      }
    }
  });
}

Var weighted_mse(const Var& pred, const Tensor& target, std::span<const double> row_weight) {
  if (!pred.value().same_shape(target)) {
    throw std::invalid_argument("weighted_mse: shape mismatch " + shape_string(pred.value().shape()) + " vs " +
                                shape_string(target.shape()));
  }
  const Index n = pred.rows(), c = pred.cols();
  if (static_cast<Index>(row_weight.size()) != n) throw std::invalid_argument("weighted_mse: weight length mismatch");
  double wsum = 0.0, acc = 0.0;
  for (Index i = 0; i < n; ++i) {
    if (row_weight[i] == 0.0) continue;
    wsum += row_weight[i];
    double r = 0.0;
    for (Index k = 0; k < c; ++k) {
      const double d = pred.value()[i * c + k] - target[i * c + k];
      r += d * d;
    }
    acc += row_weight[i] * r;
  }
  if (wsum <= 0.0) throw std::invalid_argument("weighted_mse: empty support");
  Node* pn = pred.node();
  std::vector<double> w(row_weight.begin(), row_weight.end());
  auto tgt = std::make_shared<Tensor>(target);
  return make_result(Tensor::scalar(acc / wsum), {&pred}, [pn, w, tgt, wsum, n, c](Node& self) {
    double* g = pn->ensure_grad().data();
    const double s = 2.0 * self.grad[0] / wsum;
    for (Index i = 0; i < n; ++i) {
      if (w[i] == 0.0) continue;
      for (Index k = 0; k < c; ++k) g[i * c + k] += s * w[i] * (pn->value[i * c + k] - (*tgt)[i * c + k]);
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const Index n = logits.rows(), c = logits.cols();
  if (static_cast<Index>(labels.size()) != n) throw std::invalid_argument("cross_entropy: label count mismatch");
  if (n == 0) throw std::invalid_argument("cross_entropy: empty batch");
  for (int l : labels) {
    if (l < 0 || l >= c) throw std::out_of_range("cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(c) + ")");
  }
  auto p = std::make_shared<Tensor>(softmax_rows(logits.value()));
  double loss = 0.0;
  for (Index i = 0; i < n; ++i) loss -= std::log(std::max((*p)[i * c + labels[i]], 1e-300));
  loss /= static_cast<double>(n);
  Node* ln = logits.node();
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result(Tensor::scalar(loss), {&logits}, [ln, p, lab, n, c](Node& self) {
    double* g = ln->ensure_grad().data();
    const double s = self.grad[0] / static_cast<double>(n);
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < c; ++k) g[i * c + k] += s * ((*p)[i * c + k] - (k == lab[i] ? 1.0 : 0.0));
  });
}

Var soft_cross_entropy(const Var& logits, const Tensor& target_probs, double tau) {
  if (!logits.value().same_shape(target_probs)) throw std::invalid_argument("soft_cross_entropy: shape mismatch");
  if (tau <= 0.0) throw std::invalid_argument("soft_cross_entropy: temperature must be positive");
  const Index n = logits.rows(), c = logits.cols();
  if (n == 0) throw std::invalid_argument("soft_cross_entropy: empty batch");
  auto p = std::make_shared<Tensor>(softmax_rows(logits.value(), tau));
  double loss = 0.0;
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < c; ++k) {
      const double t = target_probs[i * c + k];
      if (t != 0.0) loss -= t * std::log(std::max((*p)[i * c + k], 1e-300));
    }
  loss /= static_cast<double>(n);
  Node* ln = logits.node();
  auto tgt = std::make_shared<Tensor>(target_probs);
  return make_result(Tensor::scalar(loss), {&logits}, [ln, p, tgt, tau, n, c](Node& self) {
    double* g = ln->ensure_grad().data();
    const double s = self.grad[0] / (static_cast<double>(n) * tau);
    for (Index i = 0; i < n; ++i) {
      double mass = 0.0;
      for (Index k = 0; k < c; ++k) mass += (*tgt)[i * c + k];
      for (Index k = 0; k < c; ++k) g[i * c + k] += s * (mass * (*p)[i * c + k] - (*tgt)[i * c + k]);
    }
  });
}

Var info_nce(const Var& similarity, std::span<const int> partner, double temperature) {
  const Index m = similarity.rows();
  if (similarity.cols() != m) throw std::invalid_argument("info_nce: similarity must be square");
  if (static_cast<Index>(partner.size()) != m) throw std::invalid_argument("info_nce: partner map length mismatch");
  if (m < 2) throw std::invalid_argument("info_nce: need at least one positive pair");
  if (temperature <= 0.0) throw std::invalid_argument("info_nce: temperature must be positive");
  for (Index i = 0; i < m; ++i) {
    if (partner[i] < 0 || partner[i] >= m || partner[i] == i) throw std::invalid_argument("info_nce: invalid positive partner");
  }
  const double* s = similarity.value().data();
  auto q = std::make_shared<Tensor>(Tensor::matrix(m, m));
  double loss = 0.0;
  for (Index i = 0; i < m; ++i) {
    double mx = -INFINITY;
    for (Index k = 0; k < m; ++k)
      if (k != i) mx = std::max(mx, s[i * m + k] / temperature);
    double z = 0.0;
    for (Index k = 0; k < m; ++k) {
      if (k == i) continue;
      (*q)[i * m + k] = std::exp(s[i * m + k] / temperature - mx);
      z += (*q)[i * m + k];
    }
    for (Index k = 0; k < m; ++k) (*q)[i * m + k] /= z;
    loss += -s[i * m + partner[i]] / temperature + mx + std::log(z);
  }
  loss /= static_cast<double>(m);
  Node* sn = similarity.node();
  std::vector<int> pr(partner.begin(), partner.end());
  return make_result(Tensor::scalar(loss), {&similarity}, [sn, q, pr, m, temperature](Node& self) {
    double* g = sn->ensure_grad().data();
    const double f = self.grad[0] / (static_cast<double>(m) * temperature);
    for (Index i = 0; i < m; ++i)
      for (Index k = 0; k < m; ++k) {
        if (k == i) continue;
        g[i * m + k] += f * ((*q)[i * m + k] - (k == pr[i] ? 1.0 : 0.0));
      }
  });
}

Var soft_dice(const Var& logits, std::span<const int> labels, std::span<const int> classes, double smooth) {
  const Index n = logits.rows(), c = logits.cols();
  if (static_cast<Index>(labels.size()) != n) throw std::invalid_argument("soft_dice: label count mismatch");
  if (classes.empty()) throw std::invalid_argument("soft_dice: no classes selected");
  for (int l : labels)
    if (l < 0 || l >= c) throw std::out_of_range("soft_dice: label out of range");
  for (int k : classes)
    if (k < 0 || k >= c) throw std::out_of_range("soft_dice: class out of range");
  auto p = std::make_shared<Tensor>(softmax_rows(logits.value()));
  const std::size_t nc = classes.size();
  auto inter = std::make_shared<std::vector<double>>(nc, 0.0);
  auto denom = std::make_shared<std::vector<double>>(nc, 0.0);
  for (std::size_t j = 0; j < nc; ++j) {
    const int k = classes[j];
    double I = 0.0, P = 0.0, G = 0.0;
    for (Index i = 0; i < n; ++i) {
      const double pk = (*p)[i * c + k];
      P += pk;
      if (labels[i] == k) {
        I += pk;
        G += 1.0;
      }
    }
    (*inter)[j] = I;
    (*denom)[j] = P + G + smooth;
  }
  double mean_dice = 0.0;
  for (std::size_t j = 0; j < nc; ++j) mean_dice += (2.0 * (*inter)[j] + smooth) / (*denom)[j];
  mean_dice /= static_cast<double>(nc);
  Node* ln = logits.node();
  std::vector<int> lab(labels.begin(), labels.end()), cls(classes.begin(), classes.end());
  return make_result(Tensor::scalar(1.0 - mean_dice), {&logits}, [ln, p, inter, denom, lab, cls, smooth, n, c](Node& self) {
    double* g = ln->ensure_grad().data();
    const double s = self.grad[0] / static_cast<double>(cls.size());
    std::vector<double> dp(static_cast<std::size_t>(c));
    for (Index i = 0; i < n; ++i) {
      std::fill(dp.begin(), dp.end(), 0.0);
      for (std::size_t j = 0; j < cls.size(); ++j) {
        const int k = cls[j];
        const double D = (*denom)[j];
        const double gik = lab[i] == k ? 1.0 : 0.0;
        dp[k] = -s * (2.0 * gik * D - (2.0 * (*inter)[j] + smooth)) / (D * D);
      }
      double dot = 0.0;
      for (Index k = 0; k < c; ++k) dot += dp[k] * (*p)[i * c + k];
      for (Index k = 0; k < c; ++k) g[i * c + k] += (*p)[i * c + k] * (dp[k] - dot);
    }
  });
}

}  // namespace ag
}  // namespace volssl
