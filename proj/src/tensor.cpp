#include "felrec/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <limits>
#include <unordered_set>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace felrec {

namespace {
int g_threads = 1;

// Work threshold below which the OpenMP pragmas are skipped.
constexpr std::int64_t kParallelCutoff = 1 << 14;

bool in_parallel() {
#ifdef _OPENMP
  return omp_in_parallel();
#else
  return false;
#endif
}

// A parallel region is opened only when it pays for itself and we are not
// already inside one; otherwise the body runs as a plain loop with zero
// runtime overhead.
bool use_parallel(std::int64_t work) {
  return g_threads > 1 && work >= kParallelCutoff && !in_parallel();
}

template <class F>
inline void par_for(std::int64_t n, bool parallel, F&& body) {
  if (parallel) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) body(i);
    return;
#endif
  }
  for (std::int64_t i = 0; i < n; ++i) body(i);
}

// Recycles value/grad buffers across graphs. Training rebuilds an identically
// shaped graph every batch; reusing exact-size buffers avoids the allocation
// and page-zeroing cost that otherwise dominates. Buffers come back with
// stale contents: ops must write every element or zero explicitly.
struct BufferPool {
  std::unordered_map<std::size_t, std::vector<std::vector<real>>> by_size;

  std::vector<real> take(std::size_t n) {
    auto it = by_size.find(n);
    if (it != by_size.end() && !it->second.empty()) {
      std::vector<real> v = std::move(it->second.back());
      it->second.pop_back();
      return v;
    }
    return std::vector<real>(n);
  }
  void give(std::vector<real>&& v) {
    if (v.empty()) return;
    auto& bucket = by_size[v.size()];
    if (bucket.size() < 64) bucket.push_back(std::move(v));
  }
};

thread_local BufferPool g_pool;

}  // namespace

void recycle_buffer(std::vector<real>&& v) { g_pool.give(std::move(v)); }
std::vector<real> take_buffer(std::size_t n) { return g_pool.take(n); }

void set_num_threads(int n) {
  g_threads = n < 1 ? 1 : n;
#ifdef _OPENMP
  // Long idle spins from the default wait policy steal a core from the
  // serial stretches between regions. Must be set before libgomp starts.
  setenv("GOMP_SPINCOUNT", "10000", 0);
  omp_set_num_threads(g_threads);
#endif
}

int num_threads() { return g_threads; }

std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

namespace {

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw NumericError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                     shape_str(b));
}

[[noreturn]] void shape_fail1(const char* op, const Shape& a, const char* what) {
  throw NumericError(std::string(op) + ": " + what + ", got shape " + shape_str(a));
}

// Output buffer contents are unspecified; the op must write every element
// (or zero explicitly, as the masked ops do).
std::shared_ptr<TensorNode> make_node(Shape shape, const char* op) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->values = g_pool.take(static_cast<std::size_t>(numel(n->shape)));
  n->op = op;
  return n;
}

Tensor finish(std::shared_ptr<TensorNode> n, std::initializer_list<Tensor> ins,
              std::function<void(TensorNode&)> bwd) {
  bool req = false;
  for (const auto& t : ins) req = req || t.requires_grad();
  if (req) {
    n->requires_grad = true;
    for (const auto& t : ins) n->inputs.push_back(t.node());
    n->backward_fn = std::move(bwd);
  }
  return Tensor(std::move(n));
}

}  // namespace

Tensor Tensor::zeros(Shape s) {
  auto n = make_node(std::move(s), "zeros");
  std::fill(n->values.begin(), n->values.end(), real(0));
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape s, real v) {
  auto n = make_node(std::move(s), "full");
  std::fill(n->values.begin(), n->values.end(), v);
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape s, std::vector<real> v) {
  auto n = make_node(std::move(s), "const");
  if (static_cast<std::int64_t>(v.size()) != numel(n->shape))
    throw NumericError("Tensor::from: " + std::to_string(v.size()) + " values for shape " +
                       shape_str(n->shape));
  g_pool.give(std::move(n->values));
  n->values = std::move(v);
  return Tensor(std::move(n));
}

Tensor Tensor::param(Shape s, std::vector<real> v, std::string name) {
  Tensor t = from(std::move(s), std::move(v));
  t.node()->requires_grad = true;
  t.node()->name = std::move(name);
  t.node()->op = "param";
  return t;
}

Tensor Tensor::detach() const {
  auto n = make_node(node_->shape, "detach");
  n->values = node_->values;
  return Tensor(std::move(n));
}

Tensor stop_gradient(const Tensor& x) { return x.detach(); }

// ------------------------------- elementwise -------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias = b.rank() == 1 && a.rank() >= 1 && a.dim(a.rank() - 1) == b.dim(0) &&
                    a.shape() != b.shape();
  if (!bias && a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
  auto n = make_node(a.shape(), "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& out = n->values;
  if (bias) {
    const std::int64_t cols = b.dim(0), rows = a.size() / cols;
par_for(rows, use_parallel(a.size()), [&](std::int64_t r) {
      for (std::int64_t c0 = 0; c0 < cols; ++c0) out[r * cols + c0] = av[r * cols + c0] + bv[c0];
});
  } else {
par_for(a.size(), use_parallel(a.size()), [&](std::int64_t i) { out[i] = av[i] + bv[i]; });
  }
  return finish(std::move(n), {a, b}, [bias](TensorNode& node) {
    auto& an = *node.inputs[0];
    auto& bn = *node.inputs[1];
    const auto& g = node.grad;
    if (an.requires_grad) {
      an.ensure_grad();
      real* ag = an.grad.data();
      const real* gp = g.data();
      par_for(static_cast<std::int64_t>(g.size()), use_parallel(static_cast<std::int64_t>(g.size())),
              [=](std::int64_t i) { ag[i] += gp[i]; });
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      if (bias) {
        const std::size_t cols = bn.values.size();
        for (std::size_t i = 0; i < g.size(); ++i) bn.grad[i % cols] += g[i];
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) bn.grad[i] += g[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("sub", a.shape(), b.shape());
  auto n = make_node(a.shape(), "sub");
  for (std::int64_t i = 0; i < a.size(); ++i) n->values[i] = a.values()[i] - b.values()[i];
  return finish(std::move(n), {a, b}, [](TensorNode& node) {
    auto& an = *node.inputs[0];
    auto& bn = *node.inputs[1];
    if (an.requires_grad) {
      an.ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) an.grad[i] += node.grad[i];
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) bn.grad[i] -= node.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
  auto n = make_node(a.shape(), "mul");
  for (std::int64_t i = 0; i < a.size(); ++i) n->values[i] = a.values()[i] * b.values()[i];
  return finish(std::move(n), {a, b}, [](TensorNode& node) {
    auto& an = *node.inputs[0];
    auto& bn = *node.inputs[1];
    if (an.requires_grad) {
      an.ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) an.grad[i] += node.grad[i] * bn.values[i];
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) bn.grad[i] += node.grad[i] * an.values[i];
    }
  });
}

Tensor scale(const Tensor& x, real c) {
  auto n = make_node(x.shape(), "scale");
  for (std::int64_t i = 0; i < x.size(); ++i) n->values[i] = x.values()[i] * c;
  return finish(std::move(n), {x}, [c](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i) xn.grad[i] += node.grad[i] * c;
  });
}

Tensor shift(const Tensor& x, real c) {
  auto n = make_node(x.shape(), "shift");
  for (std::int64_t i = 0; i < x.size(); ++i) n->values[i] = x.values()[i] + c;
  return finish(std::move(n), {x}, [](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i) xn.grad[i] += node.grad[i];
  });
}

Tensor relu(const Tensor& x) {
  auto n = make_node(x.shape(), "relu");
  const auto& xv = x.values();
par_for(x.size(), use_parallel(x.size()), [&](std::int64_t i) { n->values[i] = xv[i] > 0 ? xv[i] : real(0); });
  return finish(std::move(n), {x}, [](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    real* xg = xn.grad.data();
    const real* xv = xn.values.data();
    const real* gp = node.grad.data();
    par_for(static_cast<std::int64_t>(node.grad.size()),
            use_parallel(static_cast<std::int64_t>(node.grad.size())),
            [=](std::int64_t i) { xg[i] += xv[i] > 0 ? gp[i] : real(0); });
  });
}

// --------------------------------- kernels ---------------------------------

void gemm_nn(const real* a, const real* b, real* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate) {
  par_for(m, use_parallel(m * k * n), [=](std::int64_t i) {
    real* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, real(0));
    const real* ai = a + i * k;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const real av = ai[kk];
      const real* bk = b + kk * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  });
}

void gemm_nt(const real* a, const real* b, real* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate) {
  par_for(m, use_parallel(m * k * n), [=](std::int64_t i) {
    const real* ai = a + i * k;
    real* ci = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const real* bj = b + j * k;
      real acc = 0;
      for (std::int64_t kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
      if (accumulate)
        ci[j] += acc;
      else
        ci[j] = acc;
    }
  });
}

void gemm_tn(const real* a, const real* b, real* c, std::int64_t m, std::int64_t k,
             std::int64_t n, bool accumulate) {
  par_for(k, use_parallel(m * k * n), [=](std::int64_t kk) {
    real* ck = c + kk * n;
    if (!accumulate) std::fill(ck, ck + n, real(0));
    for (std::int64_t i = 0; i < m; ++i) {
      const real av = a[i * k + kk];
      const real* bi = b + i * n;
      for (std::int64_t j = 0; j < n; ++j) ck[j] += av * bi[j];
    }
  });
}

// ---------------------------------- matmul ---------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) shape_fail("matmul", a.shape(), b.shape());
  const std::int64_t ra = a.rank(), rb = b.rank();
  const std::int64_t m = a.dim(static_cast<int>(ra - 2)), ka = a.dim(static_cast<int>(ra - 1));
  const std::int64_t kb = b.dim(static_cast<int>(rb - 2)), nn = b.dim(static_cast<int>(rb - 1));
  if (ka != kb) shape_fail("matmul", a.shape(), b.shape());

  const bool shared_rhs = rb == 2;
  if (!shared_rhs) {
    Shape la(a.shape().begin(), a.shape().end() - 2);
    Shape lb(b.shape().begin(), b.shape().end() - 2);
    if (la != lb) shape_fail("matmul", a.shape(), b.shape());
  }
  const std::int64_t batch = a.size() / (m * ka);

  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(nn);
  auto n = make_node(std::move(out_shape), "matmul");

  const real* ap = a.values().data();
  const real* bp = b.values().data();
  real* cp = n->values.data();
  if (shared_rhs) {
    gemm_nn(ap, bp, cp, batch * m, ka, nn, false);
  } else {
    par_for(batch, use_parallel(batch * m * ka * nn), [=](std::int64_t s) {
      gemm_nn(ap + s * m * ka, bp + s * ka * nn, cp + s * m * nn, m, ka, nn, false);
    });
  }

  return finish(std::move(n), {a, b}, [m, ka, nn, batch, shared_rhs](TensorNode& node) {
    auto& an = *node.inputs[0];
    auto& bn = *node.inputs[1];
    const real* g = node.grad.data();
    if (an.requires_grad) {
      an.ensure_grad();
      if (shared_rhs) {
        gemm_nt(g, bn.values.data(), an.grad.data(), batch * m, nn, ka, true);
      } else {
        const real* bv = bn.values.data();
        real* ag = an.grad.data();
        par_for(batch, use_parallel(batch * m * nn * ka), [=](std::int64_t s) {
          gemm_nt(g + s * m * nn, bv + s * ka * nn, ag + s * m * ka, m, nn, ka, true);
        });
      }
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      if (shared_rhs) {
        gemm_tn(an.values.data(), g, bn.grad.data(), batch * m, ka, nn, true);
      } else {
        const real* av = an.values.data();
        real* bg = bn.grad.data();
        par_for(batch, use_parallel(batch * m * ka * nn), [=](std::int64_t s) {
          gemm_tn(av + s * m * ka, g + s * m * nn, bg + s * ka * nn, m, ka, nn, true);
        });
      }
    }
  });
}

Tensor matmul_bias(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() < 2 || w.rank() != 2 || b.rank() != 1) shape_fail("matmul_bias", x.shape(), w.shape());
  const std::int64_t k = x.dim(x.rank() - 1);
  const std::int64_t kw = w.dim(0), nn = w.dim(1);
  if (k != kw || b.dim(0) != nn) shape_fail("matmul_bias", x.shape(), w.shape());
  const std::int64_t rows = x.size() / k;

  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  out_shape.push_back(nn);
  auto n = make_node(std::move(out_shape), "matmul_bias");
  const real* xp = x.values().data();
  const real* wp = w.values().data();
  const real* bp = b.values().data();
  real* cp = n->values.data();
  par_for(rows, use_parallel(rows * k * nn), [=](std::int64_t i) {
    real* ci = cp + i * nn;
    std::memcpy(ci, bp, static_cast<std::size_t>(nn) * sizeof(real));
    const real* xi = xp + i * k;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const real xv = xi[kk];
      const real* wk = wp + kk * nn;
      for (std::int64_t j = 0; j < nn; ++j) ci[j] += xv * wk[j];
    }
  });
  return finish(std::move(n), {x, w, b}, [rows, k, nn](TensorNode& node) {
    auto& xn = *node.inputs[0];
    auto& wn = *node.inputs[1];
    auto& bn = *node.inputs[2];
    const real* g = node.grad.data();
    if (xn.requires_grad) {
      xn.ensure_grad();
      gemm_nt(g, wn.values.data(), xn.grad.data(), rows, nn, k, true);
    }
    if (wn.requires_grad) {
      wn.ensure_grad();
      gemm_tn(xn.values.data(), g, wn.grad.data(), rows, k, nn, true);
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (std::int64_t i = 0; i < rows; ++i)
        for (std::int64_t j = 0; j < nn; ++j) bn.grad[j] += g[i * nn + j];
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b, real alpha) {
  if (a.rank() < 2 || a.rank() != b.rank()) shape_fail("matmul_nt", a.shape(), b.shape());
  const int r = a.rank();
  const std::int64_t m = a.dim(r - 2), k = a.dim(r - 1);
  const std::int64_t nn = b.dim(r - 2), kb = b.dim(r - 1);
  if (k != kb) shape_fail("matmul_nt", a.shape(), b.shape());
  Shape la(a.shape().begin(), a.shape().end() - 2);
  Shape lb(b.shape().begin(), b.shape().end() - 2);
  if (la != lb) shape_fail("matmul_nt", a.shape(), b.shape());
  const std::int64_t batch = a.size() / (m * k);

  Shape out_shape = la;
  out_shape.push_back(m);
  out_shape.push_back(nn);
  auto n = make_node(std::move(out_shape), "matmul_nt");
  const real* ap = a.values().data();
  const real* bp = b.values().data();
  real* cp = n->values.data();
  par_for(batch, use_parallel(batch * m * k * nn), [=](std::int64_t s) {
    gemm_nt(ap + s * m * k, bp + s * nn * k, cp + s * m * nn, m, k, nn, false);
    if (alpha != 1) {
      real* c = cp + s * m * nn;
      for (std::int64_t i = 0; i < m * nn; ++i) c[i] *= alpha;
    }
  });
  return finish(std::move(n), {a, b}, [m, k, nn, batch, alpha](TensorNode& node) {
    auto& an = *node.inputs[0];
    auto& bn = *node.inputs[1];
    // Pre-scaled upstream gradient so both sides reuse the plain kernels.
    std::vector<real> gs;
    const real* g = node.grad.data();
    if (alpha != 1) {
      gs = take_buffer(node.grad.size());
      for (std::size_t i = 0; i < gs.size(); ++i) gs[i] = node.grad[i] * alpha;
      g = gs.data();
    }
    if (an.requires_grad) {
      an.ensure_grad();
      const real* bv = bn.values.data();
      real* ag = an.grad.data();
      par_for(batch, use_parallel(batch * m * nn * k), [=](std::int64_t s) {
        gemm_nn(g + s * m * nn, bv + s * nn * k, ag + s * m * k, m, nn, k, true);
      });
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      const real* av = an.values.data();
      real* bg = bn.grad.data();
      par_for(batch, use_parallel(batch * m * nn * k), [=](std::int64_t s) {
        gemm_tn(g + s * m * nn, av + s * m * k, bg + s * nn * k, m, nn, k, true);
      });
    }
    if (!gs.empty()) recycle_buffer(std::move(gs));
  });
}

Tensor split_heads(const Tensor& x, std::int64_t heads) {
  if (x.rank() != 3) shape_fail1("split_heads", x.shape(), "needs (B,L,d)");
  const std::int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (heads <= 0 || d % heads != 0)
    shape_fail1("split_heads", x.shape(), "feature dim not divisible by heads");
  const std::int64_t dh = d / heads;
  auto n = make_node({b, heads, l, dh}, "split_heads");
  const real* xp = x.values().data();
  real* yp = n->values.data();
  par_for(b, use_parallel(x.size()), [=](std::int64_t bi) {
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t li = 0; li < l; ++li)
        std::memcpy(yp + ((bi * heads + h) * l + li) * dh, xp + (bi * l + li) * d + h * dh,
                    static_cast<std::size_t>(dh) * sizeof(real));
  });
  return finish(std::move(n), {x}, [b, l, d, heads, dh](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    const real* g = node.grad.data();
    real* xg = xn.grad.data();
    par_for(b, use_parallel(node.grad.size()), [=](std::int64_t bi) {
      for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t li = 0; li < l; ++li) {
          const real* gs = g + ((bi * heads + h) * l + li) * dh;
          real* xs = xg + (bi * l + li) * d + h * dh;
          for (std::int64_t j = 0; j < dh; ++j) xs[j] += gs[j];
        }
    });
  });
}

Tensor merge_heads(const Tensor& x) {
  if (x.rank() != 4) shape_fail1("merge_heads", x.shape(), "needs (B,h,L,dh)");
  const std::int64_t b = x.dim(0), heads = x.dim(1), l = x.dim(2), dh = x.dim(3);
  const std::int64_t d = heads * dh;
  auto n = make_node({b, l, d}, "merge_heads");
  const real* xp = x.values().data();
  real* yp = n->values.data();
  par_for(b, use_parallel(x.size()), [=](std::int64_t bi) {
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t li = 0; li < l; ++li)
        std::memcpy(yp + (bi * l + li) * d + h * dh, xp + ((bi * heads + h) * l + li) * dh,
                    static_cast<std::size_t>(dh) * sizeof(real));
  });
  return finish(std::move(n), {x}, [b, l, d, heads, dh](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    const real* g = node.grad.data();
    real* xg = xn.grad.data();
    par_for(b, use_parallel(node.grad.size()), [=](std::int64_t bi) {
      for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t li = 0; li < l; ++li) {
          const real* gs = g + (bi * l + li) * d + h * dh;
          real* xs = xg + ((bi * heads + h) * l + li) * dh;
          for (std::int64_t j = 0; j < dh; ++j) xs[j] += gs[j];
        }
    });
  });
}

Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) shape_fail1("transpose_last2", x.shape(), "needs rank >= 2");
  Shape s = x.shape();
  const std::int64_t m = s[s.size() - 2], nn = s[s.size() - 1];
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  auto n = make_node(std::move(s), "transpose_last2");
  const std::int64_t batch = x.size() / (m * nn);
  const auto& xv = x.values();
par_for(batch, use_parallel(x.size()), [&](std::int64_t b) {
    const real* src = xv.data() + b * m * nn;
    real* dst = n->values.data() + b * m * nn;
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < nn; ++j) dst[j * m + i] = src[i * nn + j];
});
  return finish(std::move(n), {x}, [m, nn, batch](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (std::int64_t b = 0; b < batch; ++b) {
      const real* g = node.grad.data() + b * m * nn;
      real* dst = xn.grad.data() + b * m * nn;
      for (std::int64_t j = 0; j < nn; ++j)
        for (std::int64_t i = 0; i < m; ++i) dst[i * nn + j] += g[j * m + i];
    }
  });
}

Tensor swap_axes12(const Tensor& x) {
  if (x.rank() != 4) shape_fail1("swap_axes12", x.shape(), "needs rank 4");
  const std::int64_t a = x.dim(0), b = x.dim(1), c = x.dim(2), d = x.dim(3);
  auto n = make_node({a, c, b, d}, "swap_axes12");
  const auto& xv = x.values();
  auto gather = [&](const real* src, real* dst) {
par_for(a, use_parallel(a * b * c * d), [&](std::int64_t i) {
      for (std::int64_t j = 0; j < b; ++j)
        for (std::int64_t k = 0; k < c; ++k)
          std::memcpy(dst + ((i * c + k) * b + j) * d, src + ((i * b + j) * c + k) * d,
                      static_cast<std::size_t>(d) * sizeof(real));
});
  };
  gather(xv.data(), n->values.data());
  return finish(std::move(n), {x}, [a, b, c, d](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (std::int64_t i = 0; i < a; ++i)
      for (std::int64_t j = 0; j < b; ++j)
        for (std::int64_t k = 0; k < c; ++k) {
          const real* g = node.grad.data() + ((i * c + k) * b + j) * d;
          real* dst = xn.grad.data() + ((i * b + j) * c + k) * d;
          for (std::int64_t l = 0; l < d; ++l) dst[l] += g[l];
        }
  });
}

Tensor reshape(const Tensor& x, Shape s) {
  if (numel(s) != x.size())
    throw NumericError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(s));
  auto n = make_node(std::move(s), "reshape");
  n->values = x.values();
  return finish(std::move(n), {x}, [](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (std::size_t i = 0; i < node.grad.size(); ++i) xn.grad[i] += node.grad[i];
  });
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() < 1) shape_fail("concat_last", a.shape(), b.shape());
  for (int i = 0; i + 1 < a.rank(); ++i)
    if (a.dim(i) != b.dim(i)) shape_fail("concat_last", a.shape(), b.shape());
  const std::int64_t ca = a.dim(a.rank() - 1), cb = b.dim(b.rank() - 1);
  Shape s = a.shape();
  s.back() = ca + cb;
  auto n = make_node(std::move(s), "concat_last");
  const std::int64_t rows = a.size() / ca;
  for (std::int64_t r = 0; r < rows; ++r) {
    std::memcpy(n->values.data() + r * (ca + cb), a.values().data() + r * ca,
                static_cast<std::size_t>(ca) * sizeof(real));
    std::memcpy(n->values.data() + r * (ca + cb) + ca, b.values().data() + r * cb,
                static_cast<std::size_t>(cb) * sizeof(real));
  }
  return finish(std::move(n), {a, b}, [ca, cb, rows](TensorNode& node) {
    auto& an = *node.inputs[0];
    auto& bn = *node.inputs[1];
    if (an.requires_grad) {
      an.ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < ca; ++j)
          an.grad[r * ca + j] += node.grad[r * (ca + cb) + j];
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < cb; ++j)
          bn.grad[r * cb + j] += node.grad[r * (ca + cb) + ca + j];
    }
  });
}

Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& idx) {
  if (table.rank() != 2) shape_fail1("gather_rows", table.shape(), "table must be rank 2");
  const std::int64_t rows = table.dim(0), d = table.dim(1);
  for (auto i : idx)
    if (i < 0 || i >= rows)
      throw NumericError("gather_rows: index " + std::to_string(i) + " outside table " +
                         shape_str(table.shape()));
  auto n = make_node({static_cast<std::int64_t>(idx.size()), d}, "gather_rows");
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::memcpy(n->values.data() + static_cast<std::int64_t>(r) * d,
                table.values().data() + idx[r] * d, static_cast<std::size_t>(d) * sizeof(real));
  return finish(std::move(n), {table}, [idx, d](TensorNode& node) {
    auto& tn = *node.inputs[0];
    if (!tn.requires_grad) return;
    tn.ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::int64_t j = 0; j < d; ++j)
        tn.grad[idx[r] * d + j] += node.grad[static_cast<std::int64_t>(r) * d + j];
  });
}

Tensor row_scale(const Tensor& x, const std::vector<real>& weight) {
  if (x.rank() < 1 || x.dim(0) != static_cast<std::int64_t>(weight.size()))
    shape_fail1("row_scale", x.shape(), "leading extent must match weight count");
  auto n = make_node(x.shape(), "row_scale");
  const std::int64_t stride = x.size() / x.dim(0);
  for (std::int64_t r = 0; r < x.dim(0); ++r)
    for (std::int64_t j = 0; j < stride; ++j)
      n->values[r * stride + j] = x.values()[r * stride + j] * weight[static_cast<std::size_t>(r)];
  return finish(std::move(n), {x}, [weight, stride](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (std::size_t r = 0; r < weight.size(); ++r)
      for (std::int64_t j = 0; j < stride; ++j)
        xn.grad[static_cast<std::int64_t>(r) * stride + j] +=
            node.grad[static_cast<std::int64_t>(r) * stride + j] * weight[r];
  });
}

// -------------------------------- reductions -------------------------------

Tensor sum_all(const Tensor& x) {
  auto n = make_node({}, "sum_all");
  real acc = 0;
  for (auto v : x.values()) acc += v;
  n->values[0] = acc;
  return finish(std::move(n), {x}, [](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    const real g = node.grad[0];
    for (auto& gv : xn.grad) gv += g;
  });
}

Tensor mean_all(const Tensor& x) {
  if (x.size() == 0) shape_fail1("mean_all", x.shape(), "empty tensor");
  auto n = make_node({}, "mean_all");
  real acc = 0;
  for (auto v : x.values()) acc += v;
  const real inv = real(1) / static_cast<real>(x.size());
  n->values[0] = acc * inv;
  return finish(std::move(n), {x}, [inv](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    const real g = node.grad[0] * inv;
    for (auto& gv : xn.grad) gv += g;
  });
}

Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.shape() != b.shape()) shape_fail("rowwise_dot", a.shape(), b.shape());
  const std::int64_t rows = a.dim(0), d = a.dim(1);
  auto n = make_node({rows}, "rowwise_dot");
  for (std::int64_t r = 0; r < rows; ++r) {
    real acc = 0;
    for (std::int64_t j = 0; j < d; ++j) acc += a.values()[r * d + j] * b.values()[r * d + j];
    n->values[r] = acc;
  }
  return finish(std::move(n), {a, b}, [rows, d](TensorNode& node) {
    auto& an = *node.inputs[0];
    auto& bn = *node.inputs[1];
    if (an.requires_grad) {
      an.ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j)
          an.grad[r * d + j] += node.grad[r] * bn.values[r * d + j];
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j)
          bn.grad[r * d + j] += node.grad[r] * an.values[r * d + j];
    }
  });
}

Tensor logsumexp_rows(const Tensor& x) {
  if (x.rank() < 1) shape_fail1("logsumexp_rows", x.shape(), "needs rank >= 1");
  const std::int64_t cols = x.dim(x.rank() - 1), rows = x.size() / cols;
  Shape s(x.shape().begin(), x.shape().end() - 1);
  auto n = make_node(std::move(s), "logsumexp_rows");
  const auto& xv = x.values();
par_for(rows, use_parallel(x.size()), [&](std::int64_t r) {
    const real* xr = xv.data() + r * cols;
    real m = xr[0];
    for (std::int64_t j = 1; j < cols; ++j) m = std::max(m, xr[j]);
    real acc = 0;
    for (std::int64_t j = 0; j < cols; ++j) acc += std::exp(xr[j] - m);
    n->values[r] = m + std::log(acc);
});
  return finish(std::move(n), {x}, [rows, cols](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const real y = node.values[r], g = node.grad[r];
      for (std::int64_t j = 0; j < cols; ++j)
        xn.grad[r * cols + j] += g * std::exp(xn.values[r * cols + j] - y);
    }
  });
}

Tensor masked_mean(const Tensor& x, const std::vector<std::uint8_t>& mask) {
  if (x.rank() != 3) shape_fail1("masked_mean", x.shape(), "needs (B,L,d)");
  const std::int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (static_cast<std::int64_t>(mask.size()) != b * l)
    shape_fail1("masked_mean", x.shape(), "mask size must be B*L");
  auto n = make_node({b, d}, "masked_mean");
  std::fill(n->values.begin(), n->values.end(), real(0));
  std::vector<real> inv_count(static_cast<std::size_t>(b), real(0));
  for (std::int64_t r = 0; r < b; ++r) {
    std::int64_t cnt = 0;
    for (std::int64_t j = 0; j < l; ++j) cnt += mask[r * l + j] ? 1 : 0;
    if (cnt == 0) continue;  // row stays zero
    inv_count[static_cast<std::size_t>(r)] = real(1) / static_cast<real>(cnt);
    for (std::int64_t j = 0; j < l; ++j) {
      if (!mask[r * l + j]) continue;
      const real* src = x.values().data() + (r * l + j) * d;
      real* dst = n->values.data() + r * d;
      for (std::int64_t k = 0; k < d; ++k) dst[k] += src[k];
    }
    for (std::int64_t k = 0; k < d; ++k) n->values[r * d + k] *= inv_count[static_cast<std::size_t>(r)];
  }
  return finish(std::move(n), {x}, [mask, b, l, d, inv_count](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (std::int64_t r = 0; r < b; ++r) {
      const real w = inv_count[static_cast<std::size_t>(r)];
      if (w == 0) continue;
      for (std::int64_t j = 0; j < l; ++j) {
        if (!mask[r * l + j]) continue;
        for (std::int64_t k = 0; k < d; ++k)
          xn.grad[(r * l + j) * d + k] += node.grad[r * d + k] * w;
      }
    }
  });
}

// --------------------------------- softmax ---------------------------------

namespace {

void softmax_backward_rows(TensorNode& node, std::int64_t rows, std::int64_t cols) {
  auto& xn = *node.inputs[0];
  if (!xn.requires_grad) return;
  xn.ensure_grad();
par_for(rows, use_parallel(rows * cols), [&](std::int64_t r) {
    const real* y = node.values.data() + r * cols;
    const real* g = node.grad.data() + r * cols;
    real dot = 0;
    for (std::int64_t j = 0; j < cols; ++j) dot += y[j] * g[j];
    real* gx = xn.grad.data() + r * cols;
    for (std::int64_t j = 0; j < cols; ++j) gx[j] += y[j] * (g[j] - dot);
});
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  if (x.rank() < 1) shape_fail1("softmax_rows", x.shape(), "needs rank >= 1");
  const std::int64_t cols = x.dim(x.rank() - 1), rows = x.size() / cols;
  auto n = make_node(x.shape(), "softmax_rows");
  const auto& xv = x.values();
par_for(rows, use_parallel(x.size()), [&](std::int64_t r) {
    const real* xr = xv.data() + r * cols;
    real* yr = n->values.data() + r * cols;
    real m = xr[0];
    for (std::int64_t j = 1; j < cols; ++j) m = std::max(m, xr[j]);
    real acc = 0;
    for (std::int64_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - m);
      acc += yr[j];
    }
    const real inv = real(1) / acc;
    for (std::int64_t j = 0; j < cols; ++j) yr[j] *= inv;
});
  return finish(std::move(n), {x},
                [rows, cols](TensorNode& node) { softmax_backward_rows(node, rows, cols); });
}

Tensor masked_softmax_rows(const Tensor& x, const std::vector<std::uint8_t>& key_mask,
                           std::int64_t batch) {
  if (x.rank() < 1) shape_fail1("masked_softmax_rows", x.shape(), "needs rank >= 1");
  const std::int64_t cols = x.dim(x.rank() - 1), rows = x.size() / cols;
  if (batch <= 0 || rows % batch != 0)
    shape_fail1("masked_softmax_rows", x.shape(), "row count must be a multiple of batch");
  if (static_cast<std::int64_t>(key_mask.size()) != batch * cols)
    shape_fail1("masked_softmax_rows", x.shape(), "mask size must be batch*cols");
  const std::int64_t rows_per_batch = rows / batch;
  auto n = make_node(x.shape(), "masked_softmax_rows");
  const auto& xv = x.values();
par_for(rows, use_parallel(x.size()), [&](std::int64_t r) {
    const std::uint8_t* mk = key_mask.data() + (r / rows_per_batch) * cols;
    const real* xr = xv.data() + r * cols;
    real* yr = n->values.data() + r * cols;
    real m = -std::numeric_limits<real>::infinity();
    for (std::int64_t j = 0; j < cols; ++j)
      if (mk[j] && xr[j] > m) m = xr[j];
    if (m == -std::numeric_limits<real>::infinity()) {
      std::fill(yr, yr + cols, real(0));  // all keys masked
      return;
    }
    real acc = 0;
    for (std::int64_t j = 0; j < cols; ++j) {
      if (mk[j]) {
        yr[j] = std::exp(xr[j] - m);
        acc += yr[j];
      } else {
        yr[j] = real(0);
      }
    }
    const real inv = real(1) / acc;
    for (std::int64_t j = 0; j < cols; ++j) yr[j] *= inv;
});
  return finish(std::move(n), {x},
                [rows, cols](TensorNode& node) { softmax_backward_rows(node, rows, cols); });
}

// ------------------------------ normalization ------------------------------

namespace {

std::shared_ptr<std::vector<real>> pooled_scratch(std::size_t n) {
  auto* vec = new std::vector<real>(g_pool.take(n));
  return std::shared_ptr<std::vector<real>>(
      vec, [](std::vector<real>* p) {
        g_pool.give(std::move(*p));
        delete p;
      });
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, real eps) {
  if (x.rank() < 1) shape_fail1("layer_norm", x.shape(), "needs rank >= 1");
  const std::int64_t f = x.dim(x.rank() - 1), rows = x.size() / f;
  if (gamma.size() != f || beta.size() != f) shape_fail("layer_norm", x.shape(), gamma.shape());
  auto n = make_node(x.shape(), "layer_norm");
  auto xhat = pooled_scratch(x.values().size());
  auto inv_std = std::make_shared<std::vector<real>>(static_cast<std::size_t>(rows));
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
par_for(rows, use_parallel(x.size()), [&](std::int64_t r) {
    const real* xr = xv.data() + r * f;
    real mean = 0;
    for (std::int64_t j = 0; j < f; ++j) mean += xr[j];
    mean /= static_cast<real>(f);
    real var = 0;
    for (std::int64_t j = 0; j < f; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<real>(f);
    const real inv = real(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = inv;
    for (std::int64_t j = 0; j < f; ++j) {
      const real xh = (xr[j] - mean) * inv;
      (*xhat)[static_cast<std::size_t>(r * f + j)] = xh;
      n->values[r * f + j] = gv[j] * xh + bv[j];
    }
});
  return finish(std::move(n), {x, gamma, beta}, [rows, f, xhat, inv_std](TensorNode& node) {
    auto& xn = *node.inputs[0];
    auto& gn = *node.inputs[1];
    auto& bn = *node.inputs[2];
    if (gn.requires_grad) {
      gn.ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < f; ++j)
          gn.grad[j] += node.grad[r * f + j] * (*xhat)[static_cast<std::size_t>(r * f + j)];
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < f; ++j) bn.grad[j] += node.grad[r * f + j];
    }
    if (xn.requires_grad) {
      xn.ensure_grad();
par_for(rows, use_parallel(rows * f), [&](std::int64_t r) {
        const real inv = (*inv_std)[static_cast<std::size_t>(r)];
        real sum_dxh = 0, sum_dxh_xh = 0;
        for (std::int64_t j = 0; j < f; ++j) {
          const real dxh = node.grad[r * f + j] * gn.values[j];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * (*xhat)[static_cast<std::size_t>(r * f + j)];
        }
        const real invf = real(1) / static_cast<real>(f);
        for (std::int64_t j = 0; j < f; ++j) {
          const real dxh = node.grad[r * f + j] * gn.values[j];
          const real xh = (*xhat)[static_cast<std::size_t>(r * f + j)];
          xn.grad[r * f + j] += inv * (dxh - invf * sum_dxh - xh * invf * sum_dxh_xh);
        }
});
    }
  });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  std::vector<real>* running_mean, std::vector<real>* running_var, bool training,
                  real momentum, real eps, bool track_running) {
  if (x.rank() != 2) shape_fail1("batch_norm", x.shape(), "needs (B,F)");
  const std::int64_t b = x.dim(0), f = x.dim(1);
  if (gamma.size() != f || beta.size() != f) shape_fail("batch_norm", x.shape(), gamma.shape());
  if (!training &&
      (static_cast<std::int64_t>(running_mean->size()) != f ||
       static_cast<std::int64_t>(running_var->size()) != f))
    shape_fail1("batch_norm", x.shape(), "running statistics not initialized for eval mode");

  auto n = make_node(x.shape(), "batch_norm");
  auto xhat = pooled_scratch(x.values().size());
  auto inv_std = std::make_shared<std::vector<real>>(static_cast<std::size_t>(f));
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();

  if (training) {
par_for(f, use_parallel(b * f), [&](std::int64_t j) {
      real mean = 0;
      for (std::int64_t r = 0; r < b; ++r) mean += xv[r * f + j];
      mean /= static_cast<real>(b);
      real var = 0;
      for (std::int64_t r = 0; r < b; ++r) {
        const real c = xv[r * f + j] - mean;
        var += c * c;
      }
      var /= static_cast<real>(b);
      const real inv = real(1) / std::sqrt(var + eps);
      (*inv_std)[static_cast<std::size_t>(j)] = inv;
      for (std::int64_t r = 0; r < b; ++r) {
        const real xh = (xv[r * f + j] - mean) * inv;
        (*xhat)[static_cast<std::size_t>(r * f + j)] = xh;
        n->values[r * f + j] = gv[j] * xh + bv[j];
      }
      if (track_running) {
        const real unbiased = b > 1 ? var * static_cast<real>(b) / static_cast<real>(b - 1) : var;
        (*running_mean)[static_cast<std::size_t>(j)] =
            (1 - momentum) * (*running_mean)[static_cast<std::size_t>(j)] + momentum * mean;
        (*running_var)[static_cast<std::size_t>(j)] =
            (1 - momentum) * (*running_var)[static_cast<std::size_t>(j)] + momentum * unbiased;
      }
});
    return finish(std::move(n), {x, gamma, beta}, [b, f, xhat, inv_std](TensorNode& node) {
      auto& xn = *node.inputs[0];
      auto& gn = *node.inputs[1];
      auto& bn = *node.inputs[2];
      if (gn.requires_grad) {
        gn.ensure_grad();
        for (std::int64_t r = 0; r < b; ++r)
          for (std::int64_t j = 0; j < f; ++j)
            gn.grad[j] += node.grad[r * f + j] * (*xhat)[static_cast<std::size_t>(r * f + j)];
      }
      if (bn.requires_grad) {
        bn.ensure_grad();
        for (std::int64_t r = 0; r < b; ++r)
          for (std::int64_t j = 0; j < f; ++j) bn.grad[j] += node.grad[r * f + j];
      }
      if (xn.requires_grad) {
        xn.ensure_grad();
par_for(f, use_parallel(b * f), [&](std::int64_t j) {
          real sum_g = 0, sum_g_xh = 0;
          for (std::int64_t r = 0; r < b; ++r) {
            sum_g += node.grad[r * f + j];
            sum_g_xh += node.grad[r * f + j] * (*xhat)[static_cast<std::size_t>(r * f + j)];
          }
          const real gmj = gn.values[j] * (*inv_std)[static_cast<std::size_t>(j)] / static_cast<real>(b);
          for (std::int64_t r = 0; r < b; ++r) {
            const real xh = (*xhat)[static_cast<std::size_t>(r * f + j)];
            xn.grad[r * f + j] +=
                gmj * (static_cast<real>(b) * node.grad[r * f + j] - sum_g - xh * sum_g_xh);
          }
});
      }
    });
  }

  // Eval mode: normalize with running statistics; deterministic.
  std::vector<real> inv_eval(static_cast<std::size_t>(f));
  for (std::int64_t j = 0; j < f; ++j)
    inv_eval[static_cast<std::size_t>(j)] =
        real(1) / std::sqrt((*running_var)[static_cast<std::size_t>(j)] + eps);
  for (std::int64_t r = 0; r < b; ++r)
    for (std::int64_t j = 0; j < f; ++j) {
      const real xh = (xv[r * f + j] - (*running_mean)[static_cast<std::size_t>(j)]) *
                      inv_eval[static_cast<std::size_t>(j)];
      (*xhat)[static_cast<std::size_t>(r * f + j)] = xh;
      n->values[r * f + j] = gv[j] * xh + bv[j];
    }
  return finish(std::move(n), {x, gamma, beta}, [b, f, xhat, inv_eval](TensorNode& node) {
    auto& xn = *node.inputs[0];
    auto& gn = *node.inputs[1];
    auto& bn = *node.inputs[2];
    if (gn.requires_grad) {
      gn.ensure_grad();
      for (std::int64_t r = 0; r < b; ++r)
        for (std::int64_t j = 0; j < f; ++j)
          gn.grad[j] += node.grad[r * f + j] * (*xhat)[static_cast<std::size_t>(r * f + j)];
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (std::int64_t r = 0; r < b; ++r)
        for (std::int64_t j = 0; j < f; ++j) bn.grad[j] += node.grad[r * f + j];
    }
    if (xn.requires_grad) {
      xn.ensure_grad();
      for (std::int64_t r = 0; r < b; ++r)
        for (std::int64_t j = 0; j < f; ++j)
          xn.grad[r * f + j] +=
              node.grad[r * f + j] * gn.values[j] * inv_eval[static_cast<std::size_t>(j)];
    }
  });
}

Tensor dropout(const Tensor& x, real p, bool training, Rng& rng) {
  if (p < 0 || p >= 1) throw NumericError("dropout: rate must be in [0,1), got " + std::to_string(p));
  if (!training || p == 0) return x;
  auto n = make_node(x.shape(), "dropout");
  auto mask = std::make_shared<std::vector<std::uint8_t>>(x.values().size());
  const real inv_keep = real(1) / (1 - p);
  for (std::int64_t i = 0; i < x.size(); ++i) {
    // Top 53 bits as a uniform draw in [0,1); cheaper than a distribution.
    const bool keep = static_cast<real>(rng() >> 11) * 0x1.0p-53 >= p;
    (*mask)[static_cast<std::size_t>(i)] = keep ? 1 : 0;
    n->values[i] = keep ? x.values()[i] * inv_keep : real(0);
  }
  return finish(std::move(n), {x}, [mask, inv_keep](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    real* xg = xn.grad.data();
    const real* gp = node.grad.data();
    const std::uint8_t* mk = mask->data();
    par_for(static_cast<std::int64_t>(node.grad.size()),
            use_parallel(static_cast<std::int64_t>(node.grad.size())),
            [=](std::int64_t i) { xg[i] += mk[i] ? gp[i] * inv_keep : real(0); });
  });
}

Tensor l2_normalize_rows(const Tensor& x, real eps) {
  if (x.rank() != 2) shape_fail1("l2_normalize_rows", x.shape(), "needs (B,d)");
  const std::int64_t rows = x.dim(0), d = x.dim(1);
  auto n = make_node(x.shape(), "l2_normalize_rows");
  auto norms = std::make_shared<std::vector<real>>(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    real s = 0;
    for (std::int64_t j = 0; j < d; ++j) s += x.values()[r * d + j] * x.values()[r * d + j];
    const real nr = std::sqrt(s + eps);
    (*norms)[static_cast<std::size_t>(r)] = nr;
    for (std::int64_t j = 0; j < d; ++j) n->values[r * d + j] = x.values()[r * d + j] / nr;
  }
  return finish(std::move(n), {x}, [rows, d, norms](TensorNode& node) {
    auto& xn = *node.inputs[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const real nr = (*norms)[static_cast<std::size_t>(r)];
      real dot = 0;
      for (std::int64_t j = 0; j < d; ++j) dot += node.grad[r * d + j] * xn.values[r * d + j];
      for (std::int64_t j = 0; j < d; ++j)
        xn.grad[r * d + j] += node.grad[r * d + j] / nr - xn.values[r * d + j] * dot / (nr * nr * nr);
    }
  });
}

// --------------------------------- backward --------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw NumericError("backward: loss must be a defined scalar tensor");
  if (!loss.requires_grad()) return;

  // Children-first topological order over the tracked subgraph.
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode* child = node->inputs[next].get();
      ++next;
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += real(1);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

}  // namespace felrec
