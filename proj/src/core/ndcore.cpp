// SPDX-License-Identifier: Apache-2.0
#include "pmtmae/ndcore.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

namespace pmt::nd {

namespace {

thread_local bool g_grad_enabled = true;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstRowVecMap = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

template <class T>
ConstMatMap<T> as_matrix(const Buffer<T>& v, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <class T>
MatMap<T> as_matrix(Buffer<T>& v, std::size_t rows, std::size_t cols) {
  return MatMap<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

// Gradient sink for parent i, or nullptr when it does not want one.
template <class T>
Buffer<T>* sink(Node<T>& self, std::size_t i) {
  auto& p = self.parents[i];
  if (!p->requires_grad) return nullptr;
  return &p->grad_buffer();
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Dimension,
         std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <class T>
void require_rank(const char* op, const Tensor<T>& a, std::size_t rank) {
  if (a.rank() != rank) {
    fail(ErrorKind::Dimension, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                   shape_str(a.shape()));
  }
}

}  // namespace

std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- Tensor ------------------------------------------------------------------

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto n = std::make_shared<Node<T>>();
  n->value.assign(nd::numel(shape), value);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
  if (nd::numel(shape) != data.size()) {
    fail(ErrorKind::Dimension, "tensor: shape " + shape_str(shape) + " holds " + std::to_string(nd::numel(shape)) +
                                   " values, got " + std::to_string(data.size()));
  }
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value.assign(data.begin(), data.end());
  n->requires_grad = requires_grad;
  return Tensor(n);
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

template <class T>
T Tensor<T>::item() const {
  require(numel() == 1, ErrorKind::Contract, "item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->value[0];
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  auto n = std::make_shared<Node<T>>();
  n->shape = shape();
  n->value = node_->value;
  return Tensor(n);
}

template <class T>
Tensor<T> make_result(Shape shape, Buffer<T> value, std::vector<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (g_grad_enabled) {
    bool any = std::any_of(parents.begin(), parents.end(),
                           [](const Tensor<T>& p) { return p.defined() && p.requires_grad(); });
    if (any) {
      n->requires_grad = true;
      n->is_leaf = false;
      n->parents.reserve(parents.size());
      for (auto& p : parents) n->parents.push_back(p.node_ptr());
      n->backward_fn = std::move(backward);
    }
  }
  return Tensor<T>(n);
}

template <class T>
void backward(const Tensor<T>& loss) {
  require(loss.defined() && loss.numel() == 1, ErrorKind::Contract,
          "backward: loss must be a scalar, got shape " + (loss.defined() ? shape_str(loss.shape()) : "<undefined>"));
  Node<T>* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Free the tape: interior nodes drop their history and gradients.
  for (Node<T>* n : order) {
    if (!n->is_leaf) {
      n->parents.clear();
      n->backward_fn = nullptr;
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---- elementwise -------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (auto* g = sink(self, p)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = sink(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = sink(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return make_result<T>(a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    if (auto* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
    }
  });
}

namespace {
// tanh approximation constants
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto n = static_cast<Eigen::Index>(x.numel());
  Eigen::Map<const Arr> v(x.node()->value.data(), n);
  // tanh of the inner polynomial is kept for the backward pass.
  Buffer<T> th(x.numel());
  Eigen::Map<Arr> t(th.data(), n);
  t = (T(kGeluC) * (v + T(kGeluA) * v.cube())).tanh();
  Buffer<T> out(x.numel());
  Eigen::Map<Arr>(out.data(), n) = T(0.5) * v * (T(1) + t);
  return make_result<T>(x.shape(), std::move(out), {x}, [th = std::move(th)](Node<T>& self) {
    auto* g = sink(self, 0);
    if (!g) return;
    const auto m = static_cast<Eigen::Index>(th.size());
    Eigen::Map<const Arr> v(self.parents[0]->value.data(), m);
    Eigen::Map<const Arr> t(th.data(), m);
    Eigen::Map<const Arr> gy(self.grad.data(), m);
    Eigen::Map<Arr> gx(g->data(), m);
    gx += gy * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t.square()) * (T(kGeluC) * (T(1) + T(3 * kGeluA) * v.square())));
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Buffer<T> out(x.numel());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  return make_result<T>(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto* g = sink(self, 0);
    if (!g) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < g->size(); ++i) {
      if (xv[i] > T(0)) (*g)[i] += self.grad[i];
    }
  });
}

// ---- reductions --------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return make_result<T>({}, {s}, {x}, [](Node<T>& self) {
    if (auto* g = sink(self, 0)) {
      const T go = self.grad[0];
      for (auto& v : *g) v += go;
    }
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  require(x.numel() > 0, ErrorKind::Contract, "mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---- linear algebra ------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    fail(ErrorKind::Dimension, "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer<T> out(m * n);
  as_matrix(out, m, n).noalias() = as_matrix(a.node()->value, m, k) * as_matrix(b.node()->value, k, n);
  return make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    auto G = as_matrix(static_cast<const Buffer<T>&>(self.grad), m, n);
    if (auto* g = sink(self, 0)) {
      as_matrix(*g, m, k).noalias() += G * as_matrix(static_cast<const Buffer<T>&>(self.parents[1]->value), k, n).transpose();
    }
    if (auto* g = sink(self, 1)) {
      as_matrix(*g, k, n).noalias() += as_matrix(static_cast<const Buffer<T>&>(self.parents[0]->value), m, k).transpose() * G;
    }
  });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank("linear(weight)", w, 2);
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  if (x.rank() < 1 || last_dim(x.shape()) != in) {
    fail(ErrorKind::Dimension, "linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  if (b.defined() && (b.numel() != out_dim)) {
    fail(ErrorKind::Dimension, "linear: bias " + shape_str(b.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Buffer<T> out(rows * out_dim);
  auto Y = as_matrix(out, rows, out_dim);
  Y.noalias() = as_matrix(x.node()->value, rows, in) * as_matrix(w.node()->value, in, out_dim);
  if (b.defined()) Y.rowwise() += ConstRowVecMap<T>(b.node()->value.data(), static_cast<Eigen::Index>(out_dim));
  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<Tensor<T>> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_result<T>(std::move(shape), std::move(out), std::move(parents), [rows, in, out_dim](Node<T>& self) {
    const auto& gv = self.grad;
    auto G = as_matrix(gv, rows, out_dim);
    if (auto* g = sink(self, 0)) {
      as_matrix(*g, rows, in).noalias() += G * as_matrix(static_cast<const Buffer<T>&>(self.parents[1]->value), in, out_dim).transpose();
    }
    if (auto* g = sink(self, 1)) {
      as_matrix(*g, in, out_dim).noalias() += as_matrix(static_cast<const Buffer<T>&>(self.parents[0]->value), rows, in).transpose() * G;
    }
    if (self.parents.size() > 2) {
      if (auto* g = sink(self, 2)) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(g->data(), static_cast<Eigen::Index>(out_dim));
        gb += G.colwise().sum();
      }
    }
  });
}

// ---- normalization / probabilities -----------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const auto& shape = x.shape();
  const int rank = static_cast<int>(shape.size());
  if (rank == 0) fail(ErrorKind::Contract, "softmax: scalar input");
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) fail(ErrorKind::Contract, "softmax: axis out of range for " + shape_str(shape));
  const std::size_t n = shape[axis];
  require(n >= 1, ErrorKind::Contract, "softmax: empty axis");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (int i = axis + 1; i < rank; ++i) inner *= shape[i];

  Buffer<T> out(x.numel());
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      T z = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  return make_result<T>(shape, std::move(out), {x}, [outer, inner, n](Node<T>& self) {
    auto* g = sink(self, 0);
    if (!g) return;
    const auto& y = self.value;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += gy[base + j * inner] * y[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t i = base + j * inner;
          (*g)[i] += y[i] * (gy[i] - dot);
        }
      }
    }
  });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  require(x.rank() >= 1, ErrorKind::Contract, "log_softmax: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Buffer<T> out(x.numel());
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * n;
    T mx = *std::max_element(row, row + n);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const T lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = row[j] - lz;
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [rows, n](Node<T>& self) {
    auto* g = sink(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      T gs = 0;
      for (std::size_t j = 0; j < n; ++j) gs += self.grad[r * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t i = r * n + j;
        (*g)[i] += self.grad[i] - std::exp(self.value[i]) * gs;
      }
    }
  });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require(x.rank() >= 1, ErrorKind::Contract, "layer_norm: scalar input");
  require(eps > T(0), ErrorKind::Contract, "layer_norm: eps must be positive");
  const std::size_t c = x.shape().back();
  require(c >= 1, ErrorKind::Contract, "layer_norm: empty channel axis");
  if (gamma.numel() != c || beta.numel() != c) {
    fail(ErrorKind::Dimension, "layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                                   shape_str(beta.shape()) + " do not match input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / c;
  auto xhat = std::make_shared<Buffer<T>>(x.numel());
  auto rstd = std::make_shared<Buffer<T>>(rows);
  Buffer<T> out(x.numel());
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (row[j] - mu) * rs;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta}, [rows, c, xhat, rstd](Node<T>& self) {
    const auto& gy = self.grad;
    const auto& gam = self.parents[1]->value;
    if (auto* gg = sink(self, 1)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) (*gg)[j] += gy[r * c + j] * (*xhat)[r * c + j];
    }
    if (auto* gb = sink(self, 2)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) (*gb)[j] += gy[r * c + j];
    }
    if (auto* gx = sink(self, 0)) {
      Buffer<T> dh(c);
      for (std::size_t r = 0; r < rows; ++r) {
        T m1 = 0, m2 = 0;
        for (std::size_t j = 0; j < c; ++j) {
          dh[j] = gy[r * c + j] * gam[j];
          m1 += dh[j];
          m2 += dh[j] * (*xhat)[r * c + j];
        }
        m1 /= static_cast<T>(c);
        m2 /= static_cast<T>(c);
        const T rs = (*rstd)[r];
        for (std::size_t j = 0; j < c; ++j) {
          (*gx)[r * c + j] += rs * (dh[j] - m1 - (*xhat)[r * c + j] * m2);
        }
      }
    }
  });
}

// ---- structural ---------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    fail(ErrorKind::Dimension, "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return make_result<T>(std::move(shape), x.node()->value, {x}, [](Node<T>& self) {
    if (auto* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), ErrorKind::Contract, "concat_cols: no inputs");
  const Shape& first = parts[0].shape();
  require(!first.empty(), ErrorKind::Contract, "concat_cols: scalar input");
  const std::size_t rows = parts[0].numel() / first.back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape lead(p.shape().begin(), p.shape().end() - 1);
    Shape lead0(first.begin(), first.end() - 1);
    if (p.rank() != first.size() || lead != lead0) {
      fail(ErrorKind::Dimension, "concat_cols: shape mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
    }
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  Buffer<T> out(rows * total);
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto pv = parts[i].data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.data() + r * widths[i], widths[i], out.data() + r * total + off);
    off += widths[i];
  }
  Shape shape = first;
  shape.back() = total;
  return make_result<T>(std::move(shape), std::move(out), parts, [rows, total, widths](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (auto* g = sink(self, i)) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < widths[i]; ++j) (*g)[r * widths[i] + j] += self.grad[r * total + off + j];
      }
      off += widths[i];
    }
  });
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), ErrorKind::Contract, "concat_rows: no inputs");
  const std::size_t cols = parts[0].shape().back();
  std::vector<std::size_t> counts;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != cols) {
      fail(ErrorKind::Dimension, "concat_rows: shape mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    }
    counts.push_back(p.dim(0));
    rows += p.dim(0);
  }
  Buffer<T> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result<T>({rows, cols}, std::move(out), parts, [cols, counts](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
      if (auto* g = sink(self, i)) {
        for (std::size_t j = 0; j < counts[i] * cols; ++j) (*g)[j] += self.grad[off + j];
      }
      off += counts[i] * cols;
    }
  });
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  require_rank("gather_rows", x, 2);
  const std::size_t n = x.dim(0), cols = x.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Buffer<T> out(idx.size() * cols);
  const auto xv = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) {
      fail(ErrorKind::Contract, "gather_rows: row " + std::to_string(idx[i]) + " out of range for " + shape_str(x.shape()));
    }
    std::copy_n(xv.data() + idx[i] * cols, cols, out.data() + i * cols);
  }
  const std::size_t count = idx.size();
  return make_result<T>({count, cols}, std::move(out), {x}, [idx = std::move(idx), cols](Node<T>& self) {
    auto* g = sink(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < cols; ++j) (*g)[idx[i] * cols + j] += self.grad[i * cols + j];
  });
}

template <class T>
Tensor<T> segment_max(const Tensor<T>& x, std::size_t segment) {
  require_rank("segment_max", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  require(segment >= 1 && rows % segment == 0, ErrorKind::Dimension,
          "segment_max: " + std::to_string(rows) + " rows do not split into segments of " + std::to_string(segment));
  const std::size_t groups = rows / segment;
  Buffer<T> out(groups * cols);
  std::vector<std::size_t> arg(groups * cols);
  const auto xv = x.data();
  for (std::size_t s = 0; s < groups; ++s) {
    for (std::size_t j = 0; j < cols; ++j) {
      std::size_t best = s * segment;
      T bv = xv[best * cols + j];
      for (std::size_t r = s * segment + 1; r < (s + 1) * segment; ++r) {
        if (xv[r * cols + j] > bv) {
          bv = xv[r * cols + j];
          best = r;
        }
      }
      out[s * cols + j] = bv;
      arg[s * cols + j] = best;
    }
  }
  return make_result<T>({groups, cols}, std::move(out), {x}, [arg = std::move(arg), cols](Node<T>& self) {
    auto* g = sink(self, 0);
    if (!g) return;
    for (std::size_t i = 0; i < arg.size(); ++i) (*g)[arg[i] * cols + i % cols] += self.grad[i];
  });
}

template <class T>
Tensor<T> linear_segment_max(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t segment) {
  require_rank("linear_segment_max(x)", x, 2);
  require_rank("linear_segment_max(weight)", w, 2);
  const std::size_t rows = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  if (w.dim(0) != in) {
    fail(ErrorKind::Dimension, "linear_segment_max: input " + shape_str(x.shape()) + " does not match weight " +
                                   shape_str(w.shape()));
  }
  require(b.numel() == out_dim, ErrorKind::Dimension, "linear_segment_max: bias " + shape_str(b.shape()) +
                                                          " does not match weight " + shape_str(w.shape()));
  require(segment >= 1 && rows % segment == 0, ErrorKind::Dimension,
          "linear_segment_max: " + std::to_string(rows) + " rows do not split into segments of " +
              std::to_string(segment));
  const std::size_t groups = rows / segment;
  Buffer<T> out(groups * out_dim);
  std::vector<std::uint32_t> arg(groups * out_dim);  // row within the segment
  // Chunked so the full rows×out product never materializes.
  constexpr std::size_t kChunk = 64;
  Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> y;
  const auto W = as_matrix(w.node()->value, in, out_dim);
  for (std::size_t s0 = 0; s0 < groups; s0 += kChunk) {
    const std::size_t ns = std::min(kChunk, groups - s0);
    y.noalias() = ConstMatMap<T>(x.node()->value.data() + s0 * segment * in, static_cast<Eigen::Index>(ns * segment),
                                 static_cast<Eigen::Index>(in)) *
                  W;
    for (std::size_t s = 0; s < ns; ++s) {
      T* best = out.data() + (s0 + s) * out_dim;
      std::uint32_t* bi = arg.data() + (s0 + s) * out_dim;
      const T* first = y.data() + s * segment * out_dim;
      std::copy_n(first, out_dim, best);
      std::fill_n(bi, out_dim, 0u);
      for (std::size_t r = 1; r < segment; ++r) {
        const T* row = first + r * out_dim;
        for (std::size_t j = 0; j < out_dim; ++j) {
          if (row[j] > best[j]) {
            best[j] = row[j];
            bi[j] = static_cast<std::uint32_t>(r);
          }
        }
      }
    }
  }
  const auto bv = b.data();
  for (std::size_t s = 0; s < groups; ++s)
    for (std::size_t j = 0; j < out_dim; ++j) out[s * out_dim + j] += bv[j];
  // Only the winning row of each (segment, channel) receives gradient.
  return make_result<T>({groups, out_dim}, std::move(out), {x, w, b},
                        [arg = std::move(arg), segment, in, out_dim, groups](Node<T>& self) {
    const auto& gy = self.grad;
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    auto* gx = sink(self, 0);
    auto* gw = sink(self, 1);
    auto* gb = sink(self, 2);
    // Channel-major copies keep the per-winner updates contiguous.
    Buffer<T> wt(out_dim * in), gwt(gw ? out_dim * in : 0, T(0));
    as_matrix(wt, out_dim, in) = as_matrix(wv, in, out_dim).transpose();
    for (std::size_t s = 0; s < groups; ++s) {
      for (std::size_t j = 0; j < out_dim; ++j) {
        const T g = gy[s * out_dim + j];
        if (g == T(0)) continue;
        const std::size_t r = s * segment + arg[s * out_dim + j];
        const T* wr = wt.data() + j * in;
        const T* xr = xv.data() + r * in;
        if (gx) {
          T* dst = gx->data() + r * in;
          for (std::size_t i = 0; i < in; ++i) dst[i] += g * wr[i];
        }
        if (gw) {
          T* dst = gwt.data() + j * in;
          for (std::size_t i = 0; i < in; ++i) dst[i] += g * xr[i];
        }
      }
    }
    if (gw) as_matrix(*gw, in, out_dim) += as_matrix(static_cast<const Buffer<T>&>(gwt), out_dim, in).transpose();
    if (gb)
      for (std::size_t s = 0; s < groups; ++s)
        for (std::size_t j = 0; j < out_dim; ++j) (*gb)[j] += gy[s * out_dim + j];
  });
}

template <class T>
Tensor<T> segment_mean(const Tensor<T>& x, std::size_t segment) {
  require_rank("segment_mean", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  require(segment >= 1 && rows % segment == 0, ErrorKind::Dimension,
          "segment_mean: " + std::to_string(rows) + " rows do not split into segments of " + std::to_string(segment));
  const std::size_t groups = rows / segment;
  Buffer<T> out(groups * cols, T(0));
  const auto xv = x.data();
  const T inv = T(1) / static_cast<T>(segment);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) out[(r / segment) * cols + j] += xv[r * cols + j];
  for (auto& v : out) v *= inv;
  return make_result<T>({groups, cols}, std::move(out), {x}, [segment, cols, rows, inv](Node<T>& self) {
    auto* g = sink(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < cols; ++j) (*g)[r * cols + j] += self.grad[(r / segment) * cols + j] * inv;
  });
}

template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t batch,
                               std::size_t seq, std::size_t heads) {
  require_rank("attention(q)", q, 2);
  require_same_shape("attention(q,k)", q, k);
  require_same_shape("attention(q,v)", q, v);
  const std::size_t c = q.dim(1);
  require(heads >= 1 && c % heads == 0, ErrorKind::Contract,
          "attention: " + std::to_string(heads) + " heads do not divide " + std::to_string(c) + " channels");
  require(q.dim(0) == batch * seq, ErrorKind::Dimension,
          "attention: " + std::to_string(q.dim(0)) + " rows is not batch " + std::to_string(batch) + " x seq " +
              std::to_string(seq));
  const std::size_t d = c / heads;
  const T scale_f = T(1) / std::sqrt(static_cast<T>(d));
  const auto L = static_cast<Eigen::Index>(seq);
  const auto D = static_cast<Eigen::Index>(d);

  auto probs = std::make_shared<Buffer<T>>(batch * heads * seq * seq);
  Buffer<T> out(batch * seq * c);
  auto Q = as_matrix(q.node()->value, batch * seq, c);
  auto K = as_matrix(k.node()->value, batch * seq, c);
  auto V = as_matrix(v.node()->value, batch * seq, c);
  auto O = as_matrix(out, batch * seq, c);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto r0 = static_cast<Eigen::Index>(b * seq);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * d);
      MatMap<T> P(probs->data() + (b * heads + h) * seq * seq, L, L);
      P.noalias() = (Q.block(r0, c0, L, D) * K.block(r0, c0, L, D).transpose()) * scale_f;
      for (Eigen::Index i = 0; i < L; ++i) {
        auto row = P.row(i);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
      }
      O.block(r0, c0, L, D).noalias() = P * V.block(r0, c0, L, D);
    }
  }
  return make_result<T>({batch * seq, c}, std::move(out), {q, k, v},
                        [batch, seq, heads, c, d, scale_f, probs](Node<T>& self) {
    const auto L = static_cast<Eigen::Index>(seq);
    const auto D = static_cast<Eigen::Index>(d);
    const std::size_t rows = batch * seq;
    auto G = as_matrix(static_cast<const Buffer<T>&>(self.grad), rows, c);
    auto Q = as_matrix(static_cast<const Buffer<T>&>(self.parents[0]->value), rows, c);
    auto K = as_matrix(static_cast<const Buffer<T>&>(self.parents[1]->value), rows, c);
    auto V = as_matrix(static_cast<const Buffer<T>&>(self.parents[2]->value), rows, c);
    auto* gq = sink(self, 0);
    auto* gk = sink(self, 1);
    auto* gv = sink(self, 2);
    RowMat<T> dP(L, L), dS(L, L);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto r0 = static_cast<Eigen::Index>(b * seq);
      for (std::size_t h = 0; h < heads; ++h) {
        const auto c0 = static_cast<Eigen::Index>(h * d);
        ConstMatMap<T> P(probs->data() + (b * heads + h) * seq * seq, L, L);
        auto dO = G.block(r0, c0, L, D);
        if (gv) as_matrix(*gv, rows, c).block(r0, c0, L, D).noalias() += P.transpose() * dO;
        if (!gq && !gk) continue;
        dP.noalias() = dO * V.block(r0, c0, L, D).transpose();
        for (Eigen::Index i = 0; i < L; ++i) {
          const T dot = (dP.row(i).array() * P.row(i).array()).sum();
          dS.row(i) = P.row(i).array() * (dP.row(i).array() - dot);
        }
        if (gq) as_matrix(*gq, rows, c).block(r0, c0, L, D).noalias() += (dS * K.block(r0, c0, L, D)) * scale_f;
        if (gk) as_matrix(*gk, rows, c).block(r0, c0, L, D).noalias() += (dS.transpose() * Q.block(r0, c0, L, D)) * scale_f;
      }
    }
  });
}

// ---- explicit instantiations ----------------------------------------------------------

#define PMT_INSTANTIATE(T)                                                                                       \
  template struct Node<T>;                                                                                      \
  template class Tensor<T>;                                                                                     \
  template Tensor<T> make_result<T>(Shape, Buffer<T>, std::vector<Tensor<T>>, std::function<void(Node<T>&)>); \
  template void backward<T>(const Tensor<T>&);                                                                  \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                             \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                                 \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                                 \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                                  \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                                 \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);                                                         \
  template Tensor<T> log_softmax<T>(const Tensor<T>&);                                                          \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                    \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                       \
  template Tensor<T> concat_cols<T>(const std::vector<Tensor<T>>&);                                             \
  template Tensor<T> concat_rows<T>(const std::vector<Tensor<T>>&);                                             \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, std::span<const std::size_t>);                            \
  template Tensor<T> segment_max<T>(const Tensor<T>&, std::size_t);                                             \
  template Tensor<T> segment_mean<T>(const Tensor<T>&, std::size_t);                                            \
  template Tensor<T> linear_segment_max<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);  \
  template Tensor<T> multi_head_attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                                             std::size_t, std::size_t);

PMT_INSTANTIATE(float)
PMT_INSTANTIATE(double)

#undef PMT_INSTANTIATE

}  // namespace pmt::nd
