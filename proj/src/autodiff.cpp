#include "emea/autodiff.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <unordered_set>

#include "emea/error.hpp"

namespace emea {

Tensor& NodeImpl::grad_buffer() {
  if (grad.empty() && value().numel() > 0) grad = Tensor(value().shape(), 0.0f);
  return grad;
}

Node Node::leaf(Tensor value, bool requires_grad) {
  auto impl = std::make_shared<NodeImpl>();
  impl->owned = std::move(value);
  impl->requires_grad = requires_grad;
  return Node(std::move(impl));
}

Node Node::borrow(const Tensor& value, bool requires_grad) {
  auto impl = std::make_shared<NodeImpl>();
  impl->borrowed = &value;
  impl->requires_grad = requires_grad;
  return Node(std::move(impl));
}

Tensor Node::grad() const {
  if (impl_->grad.empty()) return Tensor(value().shape(), 0.0f);
  return impl_->grad;
}

namespace {

using BackwardFn = std::function<void(NodeImpl&)>;

Node make_result(Tensor value, std::vector<Node> inputs, BackwardFn fn) {
  auto impl = std::make_shared<NodeImpl>();
  impl->owned = std::move(value);
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Node& n) { return n.requires_grad(); });
  if (needs) {
    impl->requires_grad = true;
    impl->parents.reserve(inputs.size());
    for (auto& n : inputs) impl->parents.push_back(n.shared());
    impl->backward_fn = std::move(fn);
  }
  return Node(std::move(impl));
}

bool wants(const std::shared_ptr<NodeImpl>& p) { return p->requires_grad; }

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " +
                         shape_string(t.shape()));
  }
}

// out[m×n] += A[m×k]·B[k×n]
void mm_nn(const float* a, const float* b, float* out, std::size_t m, std::size_t k,
           std::size_t n) {
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
    }
    float* orow = out + i * n;
    for (std::size_t j = 0; j < n; ++j) orow[j] += static_cast<float>(acc[j]);
  }
}

// out[m×n] += A[m×k]·B[n×k]^T
void mm_nt(const float* a, const float* b, float* out, std::size_t m, std::size_t k,
           std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(arow[p]) * brow[p];
      out[i * n + j] += static_cast<float>(acc);
    }
  }
}

// out[m×n] += A[k×m]^T·B[k×n]
void mm_tn(const float* a, const float* b, float* out, std::size_t k, std::size_t m,
           std::size_t n) {
  std::vector<double> acc(m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const float* arow = a + p * m;
    const float* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* orow = acc.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  for (std::size_t i = 0; i < m * n; ++i) out[i] += static_cast<float>(acc[i]);
}

}  // namespace

void backward(const Node& root) {
  if (root.value().numel() != 1) {
    throw ContractError("backward: root must be scalar, got shape " +
                        shape_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<NodeImpl*> order;
  std::unordered_set<NodeImpl*> seen;
  std::vector<std::pair<NodeImpl*, std::size_t>> stack;
  stack.emplace_back(root.impl(), 0);
  seen.insert(root.impl());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeImpl* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.impl()->grad_buffer()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

Node matmul(const Node& a, const Node& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  if (av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(av.shape()) +
                         " vs " + shape_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out(Shape{m, n});
  mm_nn(av.storage().data(), bv.storage().data(), out.storage().data(), m, k, n);
  return make_result(std::move(out), {a, b}, [m, k, n](NodeImpl& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    const float* g = self.grad.storage().data();
    if (wants(pa)) {
      mm_nt(g, pb->value().storage().data(), pa->grad_buffer().storage().data(), m, n, k);
    }
    if (wants(pb)) {
      mm_tn(pa->value().storage().data(), g, pb->grad_buffer().storage().data(), m, k, n);
    }
  });
}

Node transpose(const Node& a) {
  const Tensor& av = a.value();
  require_rank2(av, "transpose");
  const std::size_t m = av.dim(0), n = av.dim(1);
  Tensor out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make_result(std::move(out), {a}, [m, n](NodeImpl& self) {
    auto& ga = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
  });
}

Node add(const Node& a, const Node& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return make_result(std::move(out), {a, b}, [](NodeImpl& self) {
    for (const auto& p : self.parents) {
      if (!wants(p)) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

Node add_bias(const Node& x, const Node& bias) {
  const Tensor& xv = x.value();
  require_rank2(xv, "add_bias");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (bias.value().numel() != n) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) +
                         " does not match " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  return make_result(std::move(out), {x, bias}, [m, n](NodeImpl& self) {
    if (wants(self.parents[0])) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < m * n; ++i) g[i] += self.grad[i];
    }
    if (wants(self.parents[1])) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m; ++i) acc += self.grad[i * n + j];
        g[j] += static_cast<float>(acc);
      }
    }
  });
}

Node scale(const Node& x, float factor) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v *= factor;
  return make_result(std::move(out), {x}, [factor](NodeImpl& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += factor * self.grad[i];
  });
}

Node relu(const Node& x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = v > 0.0f ? v : 0.0f;
  return make_result(std::move(out), {x}, [](NodeImpl& self) {
    const auto& xv = self.parents[0]->value();
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (xv[i] > 0.0f) g[i] += self.grad[i];
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Node gelu(const Node& x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const double v = xv[i];
    out[i] = static_cast<float>(0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))));
  }
  return make_result(std::move(out), {x}, [](NodeImpl& self) {
    const auto& xin = self.parents[0]->value();
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double v = xin[i];
      const double u = kGeluC * (v + kGeluA * v * v * v);
      const double t = std::tanh(u);
      const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      g[i] += static_cast<float>(d * self.grad[i]);
    }
  });
}

Node layer_norm(const Node& x, const Node& gain, const Node& shift, float eps) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  if (gain.value().numel() != n || shift.value().numel() != n) {
    throw DimensionError("layer_norm: gain/shift of size " +
                         std::to_string(gain.value().numel()) + " for width " +
                         std::to_string(n));
  }
  Tensor out(xv.shape());
  auto normed = std::make_shared<std::vector<float>>(m * n);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  const auto& gv = gain.value();
  const auto& sv = shift.value();
  for (std::size_t r = 0; r < m; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += xv[r * n + c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double d = xv[r * n + c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (xv[r * n + c] - mean) * is;
      (*normed)[r * n + c] = static_cast<float>(h);
      out[r * n + c] = static_cast<float>(h * gv[c] + sv[c]);
    }
  }
  return make_result(std::move(out), {x, gain, shift}, [m, n, normed, inv_std](NodeImpl& self) {
    const auto& px = self.parents[0];
    const auto& pg = self.parents[1];
    const auto& ps = self.parents[2];
    const auto& gv = pg->value();
    if (wants(pg) || wants(ps)) {
      for (std::size_t c = 0; c < n; ++c) {
        double dg = 0.0, ds = 0.0;
        for (std::size_t r = 0; r < m; ++r) {
          dg += static_cast<double>(self.grad[r * n + c]) * (*normed)[r * n + c];
          ds += self.grad[r * n + c];
        }
        if (wants(pg)) pg->grad_buffer()[c] += static_cast<float>(dg);
        if (wants(ps)) ps->grad_buffer()[c] += static_cast<float>(ds);
      }
    }
    if (wants(px)) {
      auto& gx = px->grad_buffer();
      std::vector<double> dh(n);
      for (std::size_t r = 0; r < m; ++r) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          dh[c] = static_cast<double>(self.grad[r * n + c]) * gv[c];
          mean_dh += dh[c];
          mean_dh_h += dh[c] * (*normed)[r * n + c];
        }
        mean_dh /= static_cast<double>(n);
        mean_dh_h /= static_cast<double>(n);
        for (std::size_t c = 0; c < n; ++c) {
          gx[r * n + c] += static_cast<float>(
              (*inv_std)[r] * (dh[c] - mean_dh - (*normed)[r * n + c] * mean_dh_h));
        }
      }
    }
  });
}

namespace {

// Iteration geometry for a reduction along one axis of a rank-1/2 tensor:
// `groups` independent slices of `len` elements separated by `stride`.
struct AxisView {
  std::size_t groups, len, stride, group_step;
  std::size_t index(std::size_t g, std::size_t i) const { return g * group_step + i * stride; }
};

AxisView axis_view(const Tensor& t, int axis) {
  if (t.rank() == 1 && (axis == 0 || axis == -1)) return {1, t.dim(0), 1, 0};
  if (t.rank() == 2) {
    if (axis == 1 || axis == -1) return {t.dim(0), t.dim(1), 1, t.dim(1)};
    if (axis == 0) return {t.dim(1), t.dim(0), t.dim(1), 1};
  }
  throw DimensionError("softmax: unsupported axis " + std::to_string(axis) + " for shape " +
                       shape_string(t.shape()));
}

}  // namespace

Node softmax(const Node& x, int axis) {
  const Tensor& xv = x.value();
  const AxisView view = axis_view(xv, axis);
  Tensor out(xv.shape());
  for (std::size_t g = 0; g < view.groups; ++g) {
    float mx = -INFINITY;
    for (std::size_t i = 0; i < view.len; ++i) mx = std::max(mx, xv[view.index(g, i)]);
    double total = 0.0;
    for (std::size_t i = 0; i < view.len; ++i) total += std::exp(double(xv[view.index(g, i)]) - mx);
    for (std::size_t i = 0; i < view.len; ++i) {
      const std::size_t k = view.index(g, i);
      out[k] = static_cast<float>(std::exp(double(xv[k]) - mx) / total);
    }
  }
  return make_result(std::move(out), {x}, [view](NodeImpl& self) {
    // Output values are recomputed from self: self.owned is the softmax.
    const Tensor& y = self.owned;
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t g = 0; g < view.groups; ++g) {
      double dot = 0.0;
      for (std::size_t i = 0; i < view.len; ++i) {
        const std::size_t k = view.index(g, i);
        dot += static_cast<double>(self.grad[k]) * y[k];
      }
      for (std::size_t i = 0; i < view.len; ++i) {
        const std::size_t k = view.index(g, i);
        gx[k] += static_cast<float>(y[k] * (self.grad[k] - dot));
      }
    }
  });
}

Node entropy(const Node& p) {
  const Tensor& pv = p.value();
  const std::size_t m = pv.rows(), n = pv.cols();
  double h = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    double row_sum = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double v = pv[r * n + c];
      if (v < 0.0) throw ContractError("entropy: negative probability in row " + std::to_string(r));
      row_sum += v;
      if (v > 0.0) h -= v * std::log(v);
    }
    if (std::abs(row_sum - 1.0) > 1e-3) {
      throw ContractError("entropy: row " + std::to_string(r) + " sums to " +
                          std::to_string(row_sum));
    }
  }
  return make_result(Tensor::scalar(static_cast<float>(h)), {p}, [](NodeImpl& self) {
    const auto& pin = self.parents[0]->value();
    auto& g = self.parents[0]->grad_buffer();
    const double up = self.grad[0];
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double v = std::max(static_cast<double>(pin[i]), static_cast<double>(FLT_MIN));
      g[i] += static_cast<float>(-(std::log(v) + 1.0) * up);
    }
  });
}

Node sum(const Node& x) {
  double total = 0.0;
  for (float v : x.value().storage()) total += v;
  return make_result(Tensor::scalar(static_cast<float>(total)), {x}, [](NodeImpl& self) {
    auto& g = self.parents[0]->grad_buffer();
    const float up = self.grad[0];
    for (auto& v : g.storage()) v += up;
  });
}

Node cross_entropy(const Node& logits, std::span<const int> targets, bool mean) {
  const Tensor& lv = logits.value();
  require_rank2(lv, "cross_entropy");
  const std::size_t m = lv.dim(0), n = lv.dim(1);
  if (targets.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(m) + " rows");
  }
  auto probs = std::make_shared<std::vector<float>>(m * n, 0.0f);
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  double loss = 0.0;
  std::size_t used = 0;
  for (std::size_t r = 0; r < m; ++r) {
    const int t = targets[r];
    if (t < 0) continue;
    if (static_cast<std::size_t>(t) >= n) {
      throw DimensionError("cross_entropy: target " + std::to_string(t) + " >= " +
                           std::to_string(n) + " classes");
    }
    ++used;
    float mx = -INFINITY;
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, lv[r * n + c]);
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) total += std::exp(double(lv[r * n + c]) - mx);
    const double log_z = std::log(total) + mx;
    loss += log_z - lv[r * n + t];
    for (std::size_t c = 0; c < n; ++c)
      (*probs)[r * n + c] = static_cast<float>(std::exp(double(lv[r * n + c]) - log_z));
  }
  const double denom = (mean && used > 0) ? static_cast<double>(used) : 1.0;
  return make_result(
      Tensor::scalar(static_cast<float>(loss / denom)), {logits},
      [m, n, probs, tgt, denom](NodeImpl& self) {
        auto& g = self.parents[0]->grad_buffer();
        const double up = self.grad[0] / denom;
        for (std::size_t r = 0; r < m; ++r) {
          const int t = (*tgt)[r];
          if (t < 0) continue;
          for (std::size_t c = 0; c < n; ++c) {
            const double d = (*probs)[r * n + c] - (static_cast<int>(c) == t ? 1.0 : 0.0);
            g[r * n + c] += static_cast<float>(d * up);
          }
        }
      });
}

Node embedding(const Node& table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  require_rank2(tv, "embedding");
  const std::size_t v = tv.dim(0), d = tv.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw DimensionError("embedding: id " + std::to_string(id) + " outside vocabulary of " +
                           std::to_string(v));
    }
  }
  Tensor out(Shape{ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(tv.storage().data() + static_cast<std::size_t>(ids[r]) * d, d,
                out.storage().data() + r * d);
  auto kept = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return make_result(std::move(out), {table}, [kept, d](NodeImpl& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < kept->size(); ++r) {
      float* dst = g.storage().data() + static_cast<std::size_t>((*kept)[r]) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += self.grad[r * d + c];
    }
  });
}

Node gather_rows(const Node& x, std::span<const int> rows) { return embedding(x, rows); }

Node slice_cols(const Node& x, std::size_t start, std::size_t count) {
  const Tensor& xv = x.value();
  require_rank2(xv, "slice_cols");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (start + count > n) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_string(xv.shape()));
  }
  Tensor out(Shape{m, count});
  for (std::size_t r = 0; r < m; ++r)
    std::copy_n(xv.storage().data() + r * n + start, count, out.storage().data() + r * count);
  return make_result(std::move(out), {x}, [m, n, start, count](NodeImpl& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < count; ++c) g[r * n + start + c] += self.grad[r * count + c];
  });
}

Node concat_cols(const std::vector<Node>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank2(p.value(), "concat_cols");
    if (p.value().dim(0) != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts[0].shape()) +
                           " vs " + shape_string(p.shape()));
    }
    widths.push_back(p.value().dim(1));
    total += widths.back();
  }
  Tensor out(Shape{m, total});
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& pv = parts[i].value();
    for (std::size_t r = 0; r < m; ++r)
      std::copy_n(pv.storage().data() + r * widths[i], widths[i],
                  out.storage().data() + r * total + offset);
    offset += widths[i];
  }
  return make_result(std::move(out), parts, [m, total, widths](NodeImpl& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      const std::size_t w = widths[i];
      if (wants(self.parents[i])) {
        auto& g = self.parents[i]->grad_buffer();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < w; ++c) g[r * w + c] += self.grad[r * total + off + c];
      }
      off += w;
    }
  });
}

Node weighted_sum(const Node& weights, const std::vector<Node>& inputs) {
  const Tensor& wv = weights.value();
  if (inputs.empty()) throw DimensionError("weighted_sum: no inputs");
  if (wv.numel() != inputs.size()) {
    throw DimensionError("weighted_sum: " + std::to_string(wv.numel()) + " weights for " +
                         std::to_string(inputs.size()) + " inputs");
  }
  const Shape& shape = inputs[0].shape();
  for (const auto& in : inputs) {
    if (in.shape() != shape) {
      throw DimensionError("weighted_sum: shape mismatch " + shape_string(shape) + " vs " +
                           shape_string(in.shape()));
    }
  }
  const std::size_t numel = shape_numel(shape);
  std::vector<double> acc(numel, 0.0);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const double w = wv[i];
    const auto& xv = inputs[i].value();
    for (std::size_t k = 0; k < numel; ++k) acc[k] += w * xv[k];
  }
  Tensor out(shape);
  for (std::size_t k = 0; k < numel; ++k) out[k] = static_cast<float>(acc[k]);
  std::vector<Node> all{weights};
  all.insert(all.end(), inputs.begin(), inputs.end());
  return make_result(std::move(out), std::move(all), [numel](NodeImpl& self) {
    const auto& pw = self.parents[0];
    const auto& wv = pw->value();
    for (std::size_t i = 1; i < self.parents.size(); ++i) {
      const auto& px = self.parents[i];
      if (wants(pw)) {
        double dot = 0.0;
        const auto& xv = px->value();
        for (std::size_t k = 0; k < numel; ++k) dot += static_cast<double>(self.grad[k]) * xv[k];
        pw->grad_buffer()[i - 1] += static_cast<float>(dot);
      }
      if (wants(px)) {
        auto& g = px->grad_buffer();
        const float w = wv[i - 1];
        for (std::size_t k = 0; k < numel; ++k) g[k] += w * self.grad[k];
      }
    }
  });
}

Node row_dot(const Node& a, const Node& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "row_dot");
  if (av.shape() != bv.shape()) {
    throw DimensionError("row_dot: shape mismatch " + shape_string(av.shape()) + " vs " +
                         shape_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), n = av.dim(1);
  Tensor out(Shape{m, 1});
  for (std::size_t r = 0; r < m; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < n; ++c) acc += static_cast<double>(av[r * n + c]) * bv[r * n + c];
    out[r] = static_cast<float>(acc);
  }
  return make_result(std::move(out), {a, b}, [m, n](NodeImpl& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    if (wants(pa)) {
      auto& g = pa->grad_buffer();
      const auto& other = pb->value();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[r] * other[r * n + c];
    }
    if (wants(pb)) {
      auto& g = pb->grad_buffer();
      const auto& other = pa->value();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[r] * other[r * n + c];
    }
  });
}

Node scale_rows(const Node& x, const Node& s) {
  const Tensor& xv = x.value();
  require_rank2(xv, "scale_rows");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  if (s.value().numel() != m) {
    throw DimensionError("scale_rows: " + std::to_string(s.value().numel()) +
                         " scales for " + std::to_string(m) + " rows");
  }
  const auto& sv = s.value();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] * sv[r];
  return make_result(std::move(out), {x, s}, [m, n](NodeImpl& self) {
    const auto& px = self.parents[0];
    const auto& ps = self.parents[1];
    if (wants(px)) {
      auto& g = px->grad_buffer();
      const auto& sv = ps->value();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[r * n + c] * sv[r];
    }
    if (wants(ps)) {
      auto& g = ps->grad_buffer();
      const auto& xv = px->value();
      for (std::size_t r = 0; r < m; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < n; ++c)
          acc += static_cast<double>(self.grad[r * n + c]) * xv[r * n + c];
        g[r] += static_cast<float>(acc);
      }
    }
  });
}

}  // namespace emea
