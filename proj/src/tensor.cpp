// SPDX-License-Identifier: Apache-2.0
#include "ctquant/tensor.hpp"

#include <cmath>
#include <string>

#include "ctquant/error.hpp"

namespace ctquant {
namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

[[noreturn]] void shape_error(const char* op, const Tensor2& a, const Tensor2& b) {
  throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                                            " vs " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
}

// c += a * b
void gemm_acc(const Tensor2& a, const Tensor2& b, Tensor2& c) {
  for (int i = 0; i < a.rows; ++i) {
    double* crow = &c.v[static_cast<std::size_t>(i) * c.cols];
    for (int k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = &b.v[static_cast<std::size_t>(k) * b.cols];
      for (int j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
}

// c += a * b^T
void gemm_nt_acc(const Tensor2& a, const Tensor2& b, Tensor2& c) {
  for (int i = 0; i < a.rows; ++i) {
    const double* arow = &a.v[static_cast<std::size_t>(i) * a.cols];
    for (int j = 0; j < b.rows; ++j) {
      const double* brow = &b.v[static_cast<std::size_t>(j) * b.cols];
      double s = 0.0;
      for (int k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
      c(i, j) += s;
    }
  }
}

// c += a^T * b
void gemm_tn_acc(const Tensor2& a, const Tensor2& b, Tensor2& c) {
  for (int k = 0; k < a.rows; ++k) {
    const double* arow = &a.v[static_cast<std::size_t>(k) * a.cols];
    const double* brow = &b.v[static_cast<std::size_t>(k) * b.cols];
    for (int i = 0; i < a.cols; ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* crow = &c.v[static_cast<std::size_t>(i) * c.cols];
      for (int j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
    }
  }
}

}  // namespace

Tensor2::Tensor2(int r, int c, std::vector<double> values) : rows(r), cols(c), v(std::move(values)) {
  if (v.size() != static_cast<std::size_t>(r) * static_cast<std::size_t>(c)) {
    throw Error(ErrorCode::ShapeMismatch, "value count does not match " + std::to_string(r) + "x" + std::to_string(c));
  }
}

Tensor2 Tensor2::row(std::initializer_list<double> values) {
  return Tensor2(1, static_cast<int>(values.size()), std::vector<double>(values));
}

void require_finite(const Tensor2& t, const char* op) {
  for (double x : t.v) {
    if (!std::isfinite(x)) throw Error(ErrorCode::NonFinite, std::string(op) + " produced a non-finite value");
  }
}

Var Tape::push(Tensor2 value, bool requires_grad, std::function<void()> back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.back = requires_grad ? std::move(back) : nullptr;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor2& Tape::g(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad = Tensor2(n.value.rows, n.value.cols);
  return n.grad;
}

const Tensor2& Tape::grad(Var x) { return g(x.id); }

bool Tape::any_needs(std::initializer_list<Var> xs) const {
  for (Var x : xs)
    if (needs(x)) return true;
  return false;
}

Var Tape::leaf(Tensor2 value, bool requires_grad) {
  require_finite(value, "leaf");
  return push(std::move(value), requires_grad, [] {});
}

Var Tape::matmul(Var a, Var b) {
  const Tensor2& A = value(a);
  const Tensor2& B = value(b);
  if (A.cols != B.rows) shape_error("matmul", A, B);
  Tensor2 out(A.rows, B.cols);
  gemm_acc(A, B, out);
  require_finite(out, "matmul");
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), any_needs({a, b}), [this, a, b, o] {
    const Tensor2& dC = nodes_[o].grad;
    if (needs(a)) gemm_nt_acc(dC, nodes_[b.id].value, g(a.id));
    if (needs(b)) gemm_tn_acc(nodes_[a.id].value, dC, g(b.id));
  });
}

Var Tape::add(Var a, Var b) {
  const Tensor2& A = value(a);
  const Tensor2& B = value(b);
  if (!A.same_shape(B)) shape_error("add", A, B);
  Tensor2 out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.v[i] += B.v[i];
  require_finite(out, "add");
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), any_needs({a, b}), [this, a, b, o] {
    const Tensor2& d = nodes_[o].grad;
    for (Var x : {a, b}) {
      if (!needs(x)) continue;
      Tensor2& gx = g(x.id);
      for (std::size_t i = 0; i < d.size(); ++i) gx.v[i] += d.v[i];
    }
  });
}

Var Tape::add_row(Var a, Var bias) {
  const Tensor2& A = value(a);
  const Tensor2& B = value(bias);
  if (B.rows != 1 || B.cols != A.cols) shape_error("add_row", A, B);
  Tensor2 out = A;
  for (int r = 0; r < A.rows; ++r)
    for (int c = 0; c < A.cols; ++c) out(r, c) += B.v[c];
  require_finite(out, "add_row");
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), any_needs({a, bias}), [this, a, bias, o] {
    const Tensor2& d = nodes_[o].grad;
    if (needs(a)) {
      Tensor2& ga = g(a.id);
      for (std::size_t i = 0; i < d.size(); ++i) ga.v[i] += d.v[i];
    }
    if (needs(bias)) {
      Tensor2& gb = g(bias.id);
      for (int r = 0; r < d.rows; ++r)
        for (int c = 0; c < d.cols; ++c) gb.v[c] += d(r, c);
    }
  });
}

Var Tape::mul(Var a, Var b) {
  const Tensor2& A = value(a);
  const Tensor2& B = value(b);
  if (!A.same_shape(B)) shape_error("mul", A, B);
  Tensor2 out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.v[i] *= B.v[i];
  require_finite(out, "mul");
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), any_needs({a, b}), [this, a, b, o] {
    const Tensor2& d = nodes_[o].grad;
    if (needs(a)) {
      Tensor2& ga = g(a.id);
      const Tensor2& B = nodes_[b.id].value;
      for (std::size_t i = 0; i < d.size(); ++i) ga.v[i] += d.v[i] * B.v[i];
    }
    if (needs(b)) {
      Tensor2& gb = g(b.id);
      const Tensor2& A = nodes_[a.id].value;
      for (std::size_t i = 0; i < d.size(); ++i) gb.v[i] += d.v[i] * A.v[i];
    }
  });
}

Var Tape::mul_row(Var a, Var gain) {
  const Tensor2& A = value(a);
  const Tensor2& G = value(gain);
  if (G.rows != 1 || G.cols != A.cols) shape_error("mul_row", A, G);
  Tensor2 out = A;
  for (int r = 0; r < A.rows; ++r)
    for (int c = 0; c < A.cols; ++c) out(r, c) *= G.v[c];
  require_finite(out, "mul_row");
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), any_needs({a, gain}), [this, a, gain, o] {
    const Tensor2& d = nodes_[o].grad;
    const Tensor2& A = nodes_[a.id].value;
    const Tensor2& G = nodes_[gain.id].value;
    if (needs(a)) {
      Tensor2& ga = g(a.id);
      for (int r = 0; r < d.rows; ++r)
        for (int c = 0; c < d.cols; ++c) ga(r, c) += d(r, c) * G.v[c];
    }
    if (needs(gain)) {
      Tensor2& gg = g(gain.id);
      for (int r = 0; r < d.rows; ++r)
        for (int c = 0; c < d.cols; ++c) gg.v[c] += d(r, c) * A(r, c);
    }
  });
}

Var Tape::scale(Var a, double s) {
  Tensor2 out = value(a);
  for (double& x : out.v) x *= s;
  require_finite(out, "scale");
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [this, a, s, o] {
    const Tensor2& d = nodes_[o].grad;
    Tensor2& ga = g(a.id);
    for (std::size_t i = 0; i < d.size(); ++i) ga.v[i] += s * d.v[i];
  });
}

Var Tape::softmax_rows(Var a) {
  Tensor2 out = value(a);
  for (int r = 0; r < out.rows; ++r) {
    double mx = out(r, 0);
    for (int c = 1; c < out.cols; ++c) mx = std::max(mx, out(r, c));
    double z = 0.0;
    for (int c = 0; c < out.cols; ++c) z += (out(r, c) = std::exp(out(r, c) - mx));
    for (int c = 0; c < out.cols; ++c) out(r, c) /= z;
  }
  require_finite(out, "softmax_rows");
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [this, a, o] {
    const Tensor2& d = nodes_[o].grad;
    const Tensor2& y = nodes_[o].value;
    Tensor2& ga = g(a.id);
    for (int r = 0; r < y.rows; ++r) {
      double dot = 0.0;
      for (int c = 0; c < y.cols; ++c) dot += d(r, c) * y(r, c);
      for (int c = 0; c < y.cols; ++c) ga(r, c) += y(r, c) * (d(r, c) - dot);
    }
  });
}

Var Tape::layer_norm_rows(Var a, double eps) {
  const Tensor2& A = value(a);
  Tensor2 out(A.rows, A.cols);
  std::vector<double> inv_sigma(static_cast<std::size_t>(A.rows));
  for (int r = 0; r < A.rows; ++r) {
    double mean = 0.0;
    for (int c = 0; c < A.cols; ++c) mean += A(r, c);
    mean /= A.cols;
    double var = 0.0;
    for (int c = 0; c < A.cols; ++c) var += (A(r, c) - mean) * (A(r, c) - mean);
    var /= A.cols;
    inv_sigma[r] = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < A.cols; ++c) out(r, c) = (A(r, c) - mean) * inv_sigma[r];
  }
  require_finite(out, "layer_norm_rows");
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [this, a, o, inv_sigma = std::move(inv_sigma)] {
    const Tensor2& d = nodes_[o].grad;
    const Tensor2& y = nodes_[o].value;
    Tensor2& ga = g(a.id);
    const double n = y.cols;
    for (int r = 0; r < y.rows; ++r) {
      double mean_d = 0.0, mean_dy = 0.0;
      for (int c = 0; c < y.cols; ++c) {
        mean_d += d(r, c);
        mean_dy += d(r, c) * y(r, c);
      }
      mean_d /= n;
      mean_dy /= n;
      for (int c = 0; c < y.cols; ++c) ga(r, c) += inv_sigma[r] * (d(r, c) - mean_d - y(r, c) * mean_dy);
    }
  });
}

Var Tape::elu(Var a) {
  Tensor2 out = value(a);
  for (double& x : out.v) x = x > 0.0 ? x : std::expm1(x);
  require_finite(out, "elu");
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [this, a, o] {
    const Tensor2& d = nodes_[o].grad;
    const Tensor2& x = nodes_[a.id].value;
    const Tensor2& y = nodes_[o].value;
    Tensor2& ga = g(a.id);
    for (std::size_t i = 0; i < d.size(); ++i) ga.v[i] += d.v[i] * (x.v[i] > 0.0 ? 1.0 : y.v[i] + 1.0);
  });
}

Var Tape::sigmoid(Var a) {
  Tensor2 out = value(a);
  for (double& x : out.v) x = stable_sigmoid(x);
  require_finite(out, "sigmoid");
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [this, a, o] {
    const Tensor2& d = nodes_[o].grad;
    const Tensor2& y = nodes_[o].value;
    Tensor2& ga = g(a.id);
    for (std::size_t i = 0; i < d.size(); ++i) ga.v[i] += d.v[i] * y.v[i] * (1.0 - y.v[i]);
  });
}

Var Tape::glu(Var a) {
  const Tensor2& A = value(a);
  if (A.cols % 2 != 0) throw Error(ErrorCode::ShapeMismatch, "glu needs an even column count");
  const int h = A.cols / 2;
  Tensor2 out(A.rows, h);
  for (int r = 0; r < A.rows; ++r)
    for (int c = 0; c < h; ++c) out(r, c) = A(r, c) * stable_sigmoid(A(r, c + h));
  require_finite(out, "glu");
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [this, a, o, h] {
    const Tensor2& d = nodes_[o].grad;
    const Tensor2& x = nodes_[a.id].value;
    Tensor2& ga = g(a.id);
    for (int r = 0; r < d.rows; ++r)
      for (int c = 0; c < h; ++c) {
        const double s = stable_sigmoid(x(r, c + h));
        ga(r, c) += d(r, c) * s;
        ga(r, c + h) += d(r, c) * x(r, c) * s * (1.0 - s);
      }
  });
}

Var Tape::dropout(Var a, const Tensor2& mask) {
  const Tensor2& A = value(a);
  if (!A.same_shape(mask)) shape_error("dropout", A, mask);
  Tensor2 out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out.v[i] *= mask.v[i];
  require_finite(out, "dropout");
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [this, a, o, mask] {
    const Tensor2& d = nodes_[o].grad;
    Tensor2& ga = g(a.id);
    for (std::size_t i = 0; i < d.size(); ++i) ga.v[i] += d.v[i] * mask.v[i];
  });
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat_rows of nothing");
  const int cols = value(parts[0]).cols;
  int rows = 0;
  bool req = false;
  for (Var p : parts) {
    if (value(p).cols != cols) shape_error("concat_rows", value(parts[0]), value(p));
    rows += value(p).rows;
    req = req || needs(p);
  }
  Tensor2 out(rows, cols);
  std::size_t at = 0;
  for (Var p : parts) {
    const auto& pv = value(p).v;
    std::copy(pv.begin(), pv.end(), out.v.begin() + static_cast<std::ptrdiff_t>(at));
    at += pv.size();
  }
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), req, [this, parts, o] {
    const Tensor2& d = nodes_[o].grad;
    std::size_t at = 0;
    for (Var p : parts) {
      const std::size_t n = nodes_[p.id].value.size();
      if (needs(p)) {
        Tensor2& gp = g(p.id);
        for (std::size_t i = 0; i < n; ++i) gp.v[i] += d.v[at + i];
      }
      at += n;
    }
  });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat_cols of nothing");
  const int rows = value(parts[0]).rows;
  int cols = 0;
  bool req = false;
  for (Var p : parts) {
    if (value(p).rows != rows) shape_error("concat_cols", value(parts[0]), value(p));
    cols += value(p).cols;
    req = req || needs(p);
  }
  Tensor2 out(rows, cols);
  int c0 = 0;
  for (Var p : parts) {
    const Tensor2& pv = value(p);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < pv.cols; ++c) out(r, c0 + c) = pv(r, c);
    c0 += pv.cols;
  }
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), req, [this, parts, o] {
    const Tensor2& d = nodes_[o].grad;
    int c0 = 0;
    for (Var p : parts) {
      const int pc = nodes_[p.id].value.cols;
      if (needs(p)) {
        Tensor2& gp = g(p.id);
        for (int r = 0; r < d.rows; ++r)
          for (int c = 0; c < pc; ++c) gp(r, c) += d(r, c0 + c);
      }
      c0 += pc;
    }
  });
}

Var Tape::slice_rows(Var a, int begin, int end) {
  const Tensor2& A = value(a);
  if (begin < 0 || end > A.rows || begin >= end) throw Error(ErrorCode::ShapeMismatch, "slice_rows out of range");
  Tensor2 out(end - begin, A.cols);
  std::copy(A.v.begin() + static_cast<std::ptrdiff_t>(begin) * A.cols,
            A.v.begin() + static_cast<std::ptrdiff_t>(end) * A.cols, out.v.begin());
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [this, a, o, begin] {
    const Tensor2& d = nodes_[o].grad;
    Tensor2& ga = g(a.id);
    const std::size_t off = static_cast<std::size_t>(begin) * d.cols;
    for (std::size_t i = 0; i < d.size(); ++i) ga.v[off + i] += d.v[i];
  });
}

Var Tape::slice_cols(Var a, int begin, int end) {
  const Tensor2& A = value(a);
  if (begin < 0 || end > A.cols || begin >= end) throw Error(ErrorCode::ShapeMismatch, "slice_cols out of range");
  Tensor2 out(A.rows, end - begin);
  for (int r = 0; r < A.rows; ++r)
    for (int c = begin; c < end; ++c) out(r, c - begin) = A(r, c);
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [this, a, o, begin] {
    const Tensor2& d = nodes_[o].grad;
    Tensor2& ga = g(a.id);
    for (int r = 0; r < d.rows; ++r)
      for (int c = 0; c < d.cols; ++c) ga(r, c + begin) += d(r, c);
  });
}

Var Tape::transpose(Var a) {
  const Tensor2& A = value(a);
  Tensor2 out(A.cols, A.rows);
  for (int r = 0; r < A.rows; ++r)
    for (int c = 0; c < A.cols; ++c) out(c, r) = A(r, c);
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [this, a, o] {
    const Tensor2& d = nodes_[o].grad;
    Tensor2& ga = g(a.id);
    for (int r = 0; r < d.rows; ++r)
      for (int c = 0; c < d.cols; ++c) ga(c, r) += d(r, c);
  });
}

Var Tape::reshape(Var a, int rows, int cols) {
  const Tensor2& A = value(a);
  if (static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) != A.size()) {
    throw Error(ErrorCode::ShapeMismatch, "reshape changes the value count");
  }
  Tensor2 out(rows, cols, A.v);
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [this, a, o] {
    const Tensor2& d = nodes_[o].grad;
    Tensor2& ga = g(a.id);
    for (std::size_t i = 0; i < d.size(); ++i) ga.v[i] += d.v[i];
  });
}

Var Tape::sum(Var a) {
  double s = 0.0;
  for (double x : value(a).v) s += x;
  Tensor2 out(1, 1, s);
  require_finite(out, "sum");
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(a), [this, a, o] {
    const double d = nodes_[o].grad.v[0];
    Tensor2& ga = g(a.id);
    for (double& x : ga.v) x += d;
  });
}

Var Tape::bce_with_logits(Var logits, const Tensor2& targets) {
  const Tensor2& z = value(logits);
  if (!z.same_shape(targets)) shape_error("bce_with_logits", z, targets);
  double loss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double x = z.v[i];
    loss += std::max(x, 0.0) - x * targets.v[i] + std::log1p(std::exp(-std::abs(x)));
  }
  Tensor2 out(1, 1, loss / static_cast<double>(z.size()));
  require_finite(out, "bce_with_logits");
  const int o = static_cast<int>(nodes_.size());
  return push(std::move(out), needs(logits), [this, logits, o, targets] {
    const double d = nodes_[o].grad.v[0];
    const Tensor2& z = nodes_[logits.id].value;
    Tensor2& gz = g(logits.id);
    const double n = static_cast<double>(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) gz.v[i] += d * (stable_sigmoid(z.v[i]) - targets.v[i]) / n;
  });
}

void Tape::backward(Var loss) {
  const Tensor2& L = value(loss);
  if (L.rows != 1 || L.cols != 1) throw Error(ErrorCode::NotScalarLoss, "backward needs a 1x1 loss");
  for (auto& n : nodes_) {
    if (n.requires_grad) n.grad = Tensor2(n.value.rows, n.value.cols);
  }
  g(loss.id).v[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.requires_grad && n.back) n.back();
  }
}

}  // namespace ctquant
