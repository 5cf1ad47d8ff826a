#pragma once

// Independent double-precision reference implementations used as oracles.
// Nothing here calls into the autodiff graph.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "emea/autodiff.hpp"
#include "emea/ensemble.hpp"
#include "emea/model.hpp"

namespace oracle {

using emea::Tensor;

inline Tensor random_tensor(emea::Shape shape, std::mt19937_64& rng, float lo = -1.0f,
                            float hi = 1.0f) {
  std::uniform_real_distribution<float> d(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = d(rng);
  return t;
}

inline double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
  const double scale = std::max(norm2(a), norm2(b));
  return scale < 1e-12 ? 0.0 : norm2(diff) / scale;
}

inline std::vector<double> to_double(const Tensor& t) {
  return {t.storage().begin(), t.storage().end()};
}

// Central differences of f at x, in double.
inline std::vector<double> numeric_gradient(Tensor& x, const std::function<double()>& f,
                                            float step = 1e-3f) {
  std::vector<double> g(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const float orig = x[i];
    x[i] = orig + step;
    const double up = f();
    x[i] = orig - step;
    const double down = f();
    x[i] = orig;
    g[i] = (up - down) / (2.0 * static_cast<double>(step));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Reference forward pass of the encoder in double precision.

struct Mat {
  std::size_t r = 0, c = 0;
  std::vector<double> v;
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols) : r(rows), c(cols), v(rows * cols, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * c + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

inline Mat from(const Tensor& t) {
  Mat m(t.rank() == 1 ? 1 : t.dim(0), t.rank() == 1 ? t.dim(0) : t.dim(1));
  for (std::size_t i = 0; i < t.numel(); ++i) m.v[i] = t[i];
  return m;
}

inline Mat mm(const Mat& a, const Mat& b) {
  Mat o(a.r, b.c);
  for (std::size_t i = 0; i < a.r; ++i)
    for (std::size_t k = 0; k < a.c; ++k)
      for (std::size_t j = 0; j < b.c; ++j) o(i, j) += a(i, k) * b(k, j);
  return o;
}

inline Mat lin(const Mat& x, const emea::Linear& l) {
  Mat o = mm(x, from(l.weight));
  for (std::size_t i = 0; i < o.r; ++i)
    for (std::size_t j = 0; j < o.c; ++j) o(i, j) += l.bias[j];
  return o;
}

inline Mat ln(const Mat& x, const emea::Norm& n, double eps = 1e-5) {
  Mat o(x.r, x.c);
  for (std::size_t i = 0; i < x.r; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < x.c; ++j) mean += x(i, j);
    mean /= static_cast<double>(x.c);
    for (std::size_t j = 0; j < x.c; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<double>(x.c);
    for (std::size_t j = 0; j < x.c; ++j)
      o(i, j) = (x(i, j) - mean) / std::sqrt(var + eps) * n.gain[j] + n.shift[j];
  }
  return o;
}

inline Mat softmax_rows(const Mat& x) {
  Mat o(x.r, x.c);
  for (std::size_t i = 0; i < x.r; ++i) {
    double mx = x(i, 0);
    for (std::size_t j = 1; j < x.c; ++j) mx = std::max(mx, x(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < x.c; ++j) z += o(i, j) = std::exp(x(i, j) - mx);
    for (std::size_t j = 0; j < x.c; ++j) o(i, j) /= z;
  }
  return o;
}

inline double gelu(double x) {
  const double k = std::sqrt(2.0 / M_PI);
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat o = a;
  for (std::size_t i = 0; i < o.v.size(); ++i) o.v[i] += b.v[i];
  return o;
}

inline Mat adapter_out(const Mat& h, const emea::AdapterLayer& l) {
  Mat z = lin(ln(h, l.norm), l.down);
  for (auto& x : z.v) x = std::max(0.0, x);
  return add(h, lin(z, l.up));
}

inline Mat attention(const Mat& x, const emea::EncoderLayer& l, std::size_t heads) {
  const Mat q = lin(x, l.query), k = lin(x, l.key), v = lin(x, l.value);
  const std::size_t dh = x.c / heads;
  Mat merged(x.r, x.c);
  for (std::size_t h = 0; h < heads; ++h) {
    Mat s(x.r, x.r);
    for (std::size_t i = 0; i < x.r; ++i)
      for (std::size_t j = 0; j < x.r; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < dh; ++t) acc += q(i, h * dh + t) * k(j, h * dh + t);
        s(i, j) = acc / std::sqrt(static_cast<double>(dh));
      }
    const Mat p = softmax_rows(s);
    for (std::size_t i = 0; i < x.r; ++i)
      for (std::size_t t = 0; t < dh; ++t) {
        double acc = 0.0;
        for (std::size_t j = 0; j < x.r; ++j) acc += p(i, j) * v(j, h * dh + t);
        merged(i, h * dh + t) = acc;
      }
  }
  return lin(merged, l.output);
}

// Task-head probabilities at `rows` with language adapters mixed by `alpha`
// (one weight vector per layer; a single vector is reused for every layer).
inline Mat task_probs(const emea::Model& model, const std::vector<int>& ids,
                      const std::vector<int>& rows,
                      const std::vector<const emea::AdapterParams*>& adapters,
                      const std::vector<std::vector<double>>& alpha,
                      const emea::AdapterParams& task) {
  const auto& b = model.backbone;
  const std::size_t d = model.config.d_model;
  Mat x(ids.size(), d);
  const Tensor pos = emea::sinusoidal_positions(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < d; ++j)
      x(i, j) = b.token_embedding[static_cast<std::size_t>(ids[i]) * d + j] + pos[i * d + j];
  x = ln(x, b.embed_norm);
  for (std::size_t layer = 0; layer < b.layers.size(); ++layer) {
    const auto& l = b.layers[layer];
    x = ln(add(x, attention(x, l, model.config.n_heads)), l.attn_norm);
    Mat ff = lin(x, l.ff_in);
    for (auto& v : ff.v) v = gelu(v);
    x = ln(add(x, lin(ff, l.ff_out)), l.ff_norm);
    const auto& a = alpha.size() == 1 ? alpha[0] : alpha[layer];
    Mat mixed(x.r, x.c);
    for (std::size_t i = 0; i < adapters.size(); ++i) {
      const Mat o = adapter_out(x, adapters[i]->layers[layer]);
      for (std::size_t k = 0; k < o.v.size(); ++k) mixed.v[k] += a[i] * o.v[k];
    }
    x = adapter_out(mixed, task.layers[layer]);
  }
  Mat picked(rows.size(), d);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) picked(i, j) = x(static_cast<std::size_t>(rows[i]), j);
  return softmax_rows(lin(picked, *task.head));
}

inline std::vector<double> softmax(const std::vector<double>& beta) {
  double mx = *std::max_element(beta.begin(), beta.end());
  std::vector<double> p(beta.size());
  double z = 0.0;
  for (std::size_t i = 0; i < beta.size(); ++i) z += p[i] = std::exp(beta[i] - mx);
  for (auto& x : p) x /= z;
  return p;
}

inline double entropy(const Mat& p) {
  double h = 0.0;
  for (double x : p.v)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

// Summed entropy of a batch under ensemble logits beta (shared across layers).
inline double batch_entropy(const emea::Model& model, const emea::Batch& batch,
                            const std::vector<const emea::AdapterParams*>& adapters,
                            const std::vector<double>& beta, const emea::AdapterParams& task) {
  const std::vector<std::vector<double>> alpha{softmax(beta)};
  double h = 0.0;
  for (const auto& s : batch) h += entropy(task_probs(model, s.ids, s.word_starts, adapters, alpha, task));
  return h;
}

// Central-difference gradient of batch_entropy with respect to beta.
inline std::vector<double> entropy_gradient(const emea::Model& model, const emea::Batch& batch,
                                            const std::vector<const emea::AdapterParams*>& adapters,
                                            std::vector<double> beta,
                                            const emea::AdapterParams& task, double step = 1e-3) {
  std::vector<double> g(beta.size());
  for (std::size_t i = 0; i < beta.size(); ++i) {
    const double orig = beta[i];
    beta[i] = orig + step;
    const double up = batch_entropy(model, batch, adapters, beta, task);
    beta[i] = orig - step;
    const double down = batch_entropy(model, batch, adapters, beta, task);
    beta[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

}  // namespace oracle
