#include "styletalk/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace styletalk {

namespace {

thread_local Tape* g_tape = nullptr;
thread_local uint64_t g_epoch = 0;

int64_t shape_product(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ContractError("tensor: non-positive dimension");
    n *= d;
  }
  return n;
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value produced");
  }
}

bool live_on_tape(const Tensor& t, const Tape* tape) {
  return t.d_->requires_grad || (t.d_->tracked && t.d_->epoch == tape->epoch());
}

// True when the op should be recorded; marks the output as tracked.
template <typename... Ts>
bool maybe_track(Tensor& out, const Ts&... inputs) {
  Tape* tape = Tape::current();
  if (!tape) return false;
  const bool any = (live_on_tape(inputs, tape) || ...);
  if (!any) return false;
  out.d_->tracked = true;
  out.d_->epoch = tape->epoch();
  return true;
}

bool wants_grad(const std::shared_ptr<TensorData>& d) { return d->requires_grad || d->tracked; }

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ContractError(std::string(op) + ": rank-2 tensor required");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) throw ContractError(std::string(op) + ": shape mismatch");
}

// Rows/cols view of any tensor: last axis is the column, everything else rows.
std::pair<int64_t, int64_t> as_matrix(const Tensor& t) {
  if (t.rank() == 0) throw ContractError("tensor: rank-0 not supported");
  const int64_t cols = t.shape().back();
  return {t.size() / cols, cols};
}

void mm_forward(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double aik = ai[p];
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += aik * bp[j];
    }
  }
}

// dA += dC * B^T
void mm_grad_a(const double* dc, const double* b, double* da, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* dci = dc + i * n;
    double* dai = da + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) s += dci[j] * bp[j];
      dai[p] += s;
    }
  }
}

// dB += A^T * dC
void mm_grad_b(const double* a, const double* dc, double* db, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* dci = dc + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double aik = ai[p];
      if (aik == 0.0) continue;
      double* dbp = db + p * n;
      for (int64_t j = 0; j < n; ++j) dbp[j] += aik * dci[j];
    }
  }
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape) {
  const auto n = shape_product(shape);
  Tensor t;
  t.d_ = std::make_shared<TensorData>();
  t.d_->shape = std::move(shape);
  t.d_->value.assign(static_cast<size_t>(n), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  if (!std::isfinite(v)) throw NumericError("full: non-finite fill value");
  Tensor t = zeros(std::move(shape));
  std::fill(t.d_->value.begin(), t.d_->value.end(), v);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data) {
  const auto n = shape_product(shape);
  if (n != static_cast<int64_t>(data.size()))
    throw ContractError("from: shape does not match data length");
  check_finite(data, "from");
  Tensor t;
  t.d_ = std::make_shared<TensorData>();
  t.d_->shape = std::move(shape);
  t.d_->value = std::move(data);
  return t;
}

Tensor Tensor::param(std::vector<int> shape, std::vector<double> data) {
  Tensor t = from(std::move(shape), std::move(data));
  t.d_->requires_grad = true;
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item: tensor is not scalar");
  return d_->value[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != rank()) throw ContractError("at: wrong index rank");
  int64_t flat = 0;
  int i = 0;
  for (int v : idx) {
    if (v < 0 || v >= d_->shape[static_cast<size_t>(i)]) throw ContractError("at: index out of range");
    flat = flat * d_->shape[static_cast<size_t>(i)] + v;
    ++i;
  }
  return d_->value[static_cast<size_t>(flat)];
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() {
  prev_ = g_tape;
  epoch_ = ++g_epoch;
  g_tape = this;
}

Tape::~Tape() { g_tape = prev_; }

Tape* Tape::current() { return g_tape; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) throw ContractError("backward: loss must be a scalar");
  if (!(loss.d_->tracked && loss.d_->epoch == epoch_))
    throw ContractError("backward: loss was not produced on this tape");
  loss.d_->ensure_grad();
  loss.d_->grad[0] = 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

// ---- op helpers --------------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, const char* name, Fwd fwd, Bwd bwd) {
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.d_->value;
  auto& ov = out.d_->value;
  for (size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i]);
  check_finite(ov, name);
  if (maybe_track(out, a)) {
    Tape::current()->record([ad = a.d_, od = out.d_, bwd] {
      if (od->grad.empty() || !wants_grad(ad)) return;
      ad->ensure_grad();
      for (size_t i = 0; i < ad->grad.size(); ++i)
        ad->grad[i] += od->grad[i] * bwd(ad->value[i], od->value[i]);
    });
  }
  return out;
}

}  // namespace

// ---- binary / structural ops -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ContractError("matmul: inner dimensions disagree");
  Tensor out = Tensor::zeros({static_cast<int>(m), static_cast<int>(n)});
  mm_forward(a.d_->value.data(), b.d_->value.data(), out.d_->value.data(), m, k, n);
  check_finite(out.d_->value, "matmul");
  if (maybe_track(out, a, b)) {
    Tape::current()->record([ad = a.d_, bd = b.d_, od = out.d_, m, k, n] {
      if (od->grad.empty()) return;
      if (wants_grad(ad)) {
        ad->ensure_grad();
        mm_grad_a(od->grad.data(), bd->value.data(), ad->grad.data(), m, k, n);
      }
      if (wants_grad(bd)) {
        bd->ensure_grad();
        mm_grad_b(ad->value.data(), od->grad.data(), bd->grad.data(), m, k, n);
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  const auto& av = a.d_->value;
  auto& ov = out.d_->value;
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) ov[static_cast<size_t>(j) * m + i] = av[static_cast<size_t>(i) * n + j];
  if (maybe_track(out, a)) {
    Tape::current()->record([ad = a.d_, od = out.d_, m, n] {
      if (od->grad.empty() || !wants_grad(ad)) return;
      ad->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ad->grad[static_cast<size_t>(i) * n + j] += od->grad[static_cast<size_t>(j) * m + i];
    });
  }
  return out;
}

namespace {

template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, BwdA ga, BwdB gb) {
  require_same_shape(a, b, name);
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.d_->value;
  const auto& bv = b.d_->value;
  auto& ov = out.d_->value;
  for (size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i], bv[i]);
  check_finite(ov, name);
  if (maybe_track(out, a, b)) {
    Tape::current()->record([ad = a.d_, bd = b.d_, od = out.d_, ga, gb] {
      if (od->grad.empty()) return;
      if (wants_grad(ad)) {
        ad->ensure_grad();
        for (size_t i = 0; i < ad->grad.size(); ++i)
          ad->grad[i] += od->grad[i] * ga(ad->value[i], bd->value[i]);
      }
      if (wants_grad(bd)) {
        bd->ensure_grad();
        for (size_t i = 0; i < bd->grad.size(); ++i)
          bd->grad[i] += od->grad[i] * gb(ad->value[i], bd->value[i]);
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor add_row(const Tensor& a, const Tensor& r) {
  require_rank2(a, "add_row");
  if (r.rank() != 1 || r.dim(0) != a.dim(1)) throw ContractError("add_row: row shape mismatch");
  const int64_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.d_->value;
  const auto& rv = r.d_->value;
  auto& ov = out.d_->value;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) ov[i * n + j] = av[i * n + j] + rv[j];
  check_finite(ov, "add_row");
  if (maybe_track(out, a, r)) {
    Tape::current()->record([ad = a.d_, rd = r.d_, od = out.d_, m, n] {
      if (od->grad.empty()) return;
      if (wants_grad(ad)) {
        ad->ensure_grad();
        for (size_t i = 0; i < ad->grad.size(); ++i) ad->grad[i] += od->grad[i];
      }
      if (wants_grad(rd)) {
        rd->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) rd->grad[j] += od->grad[i * n + j];
      }
    });
  }
  return out;
}

Tensor scale_rows(const Tensor& a, const Tensor& v) {
  require_rank2(a, "scale_rows");
  if (v.rank() != 1 || v.dim(0) != a.dim(0)) throw ContractError("scale_rows: scale shape mismatch");
  const int64_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros(a.shape());
  const auto& av = a.d_->value;
  const auto& vv = v.d_->value;
  auto& ov = out.d_->value;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) ov[i * n + j] = av[i * n + j] * vv[i];
  check_finite(ov, "scale_rows");
  if (maybe_track(out, a, v)) {
    Tape::current()->record([ad = a.d_, vd = v.d_, od = out.d_, m, n] {
      if (od->grad.empty()) return;
      if (wants_grad(ad)) {
        ad->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < n; ++j) ad->grad[i * n + j] += od->grad[i * n + j] * vd->value[i];
      }
      if (wants_grad(vd)) {
        vd->ensure_grad();
        for (int64_t i = 0; i < m; ++i) {
          double s = 0.0;
          for (int64_t j = 0; j < n; ++j) s += od->grad[i * n + j] * ad->value[i * n + j];
          vd->grad[i] += s;
        }
      }
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      a, "scale", [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor log_t(const Tensor& a) {
  for (double x : a.d_->value)
    if (x <= 0.0) throw NumericError("log: domain requires x > 0");
  return unary_op(
      a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor exp_t(const Tensor& a) {
  return unary_op(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor sqrt_t(const Tensor& a) {
  for (double x : a.d_->value)
    if (x < 0.0) throw NumericError("sqrt: domain requires x >= 0");
  return unary_op(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Tensor softplus(const Tensor& a) {
  return unary_op(
      a, "softplus",
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.d_->value) s += x;
  Tensor out = Tensor::from({1}, {s});
  if (maybe_track(out, a)) {
    Tape::current()->record([ad = a.d_, od = out.d_] {
      if (od->grad.empty() || !wants_grad(ad)) return;
      ad->ensure_grad();
      const double g = od->grad[0];
      for (auto& gx : ad->grad) gx += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  double s = 0.0;
  for (double x : a.d_->value) s += x;
  Tensor out = Tensor::from({1}, {s * inv});
  if (maybe_track(out, a)) {
    Tape::current()->record([ad = a.d_, od = out.d_, inv] {
      if (od->grad.empty() || !wants_grad(ad)) return;
      ad->ensure_grad();
      const double g = od->grad[0] * inv;
      for (auto& gx : ad->grad) gx += g;
    });
  }
  return out;
}

Tensor sum_cols(const Tensor& a) {
  require_rank2(a, "sum_cols");
  const int64_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({static_cast<int>(m)});
  const auto& av = a.d_->value;
  auto& ov = out.d_->value;
  for (int64_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) s += av[i * n + j];
    ov[i] = s;
  }
  check_finite(ov, "sum_cols");
  if (maybe_track(out, a)) {
    Tape::current()->record([ad = a.d_, od = out.d_, m, n] {
      if (od->grad.empty() || !wants_grad(ad)) return;
      ad->ensure_grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) ad->grad[i * n + j] += od->grad[i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (shape_product(shape) != a.size()) throw ContractError("reshape: element count mismatch");
  Tensor out = Tensor::from(std::move(shape), a.d_->value);
  if (maybe_track(out, a)) {
    Tape::current()->record([ad = a.d_, od = out.d_] {
      if (od->grad.empty() || !wants_grad(ad)) return;
      ad->ensure_grad();
      for (size_t i = 0; i < ad->grad.size(); ++i) ad->grad[i] += od->grad[i];
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: empty input");
  const int n = parts[0].dim(1);
  int m = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.dim(1) != n) throw ContractError("concat_rows: column mismatch");
    m += p.dim(0);
  }
  Tensor out = Tensor::zeros({m, n});
  auto& ov = out.d_->value;
  size_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(ov.data() + off, p.d_->value.data(), p.d_->value.size() * sizeof(double));
    off += p.d_->value.size();
  }
  Tape* tape = Tape::current();
  bool any = false;
  if (tape)
    for (const auto& p : parts) any = any || live_on_tape(p, tape);
  if (any) {
    out.d_->tracked = true;
    out.d_->epoch = tape->epoch();
    std::vector<std::shared_ptr<TensorData>> pd;
    pd.reserve(parts.size());
    for (const auto& p : parts) pd.push_back(p.d_);
    tape->record([pd, od = out.d_] {
      if (od->grad.empty()) return;
      size_t off = 0;
      for (const auto& d : pd) {
        if (wants_grad(d)) {
          d->ensure_grad();
          for (size_t i = 0; i < d->grad.size(); ++i) d->grad[i] += od->grad[off + i];
        }
        off += d->value.size();
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: empty input");
  const int m = parts[0].dim(0);
  int n = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.dim(0) != m) throw ContractError("concat_cols: row mismatch");
    n += p.dim(1);
  }
  Tensor out = Tensor::zeros({m, n});
  auto& ov = out.d_->value;
  int coff = 0;
  for (const auto& p : parts) {
    const int pn = p.dim(1);
    for (int i = 0; i < m; ++i)
      std::memcpy(ov.data() + static_cast<size_t>(i) * n + coff,
                  p.d_->value.data() + static_cast<size_t>(i) * pn, static_cast<size_t>(pn) * sizeof(double));
    coff += pn;
  }
  Tape* tape = Tape::current();
  bool any = false;
  if (tape)
    for (const auto& p : parts) any = any || live_on_tape(p, tape);
  if (any) {
    out.d_->tracked = true;
    out.d_->epoch = tape->epoch();
    std::vector<std::shared_ptr<TensorData>> pd;
    std::vector<int> widths;
    for (const auto& p : parts) {
      pd.push_back(p.d_);
      widths.push_back(p.dim(1));
    }
    tape->record([pd, widths, od = out.d_, m, n] {
      if (od->grad.empty()) return;
      int coff = 0;
      for (size_t pi = 0; pi < pd.size(); ++pi) {
        const int pn = widths[pi];
        if (wants_grad(pd[pi])) {
          pd[pi]->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < pn; ++j)
              pd[pi]->grad[static_cast<size_t>(i) * pn + j] +=
                  od->grad[static_cast<size_t>(i) * n + coff + j];
        }
        coff += pn;
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
  require_rank2(a, "slice_rows");
  if (r0 < 0 || r1 > a.dim(0) || r0 >= r1) throw ContractError("slice_rows: bad range");
  const int n = a.dim(1);
  Tensor out = Tensor::zeros({r1 - r0, n});
  std::memcpy(out.d_->value.data(), a.d_->value.data() + static_cast<size_t>(r0) * n,
              out.d_->value.size() * sizeof(double));
  if (maybe_track(out, a)) {
    Tape::current()->record([ad = a.d_, od = out.d_, r0, n] {
      if (od->grad.empty() || !wants_grad(ad)) return;
      ad->ensure_grad();
      for (size_t i = 0; i < od->grad.size(); ++i)
        ad->grad[static_cast<size_t>(r0) * n + i] += od->grad[i];
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  require_rank2(a, "slice_cols");
  if (c0 < 0 || c1 > a.dim(1) || c0 >= c1) throw ContractError("slice_cols: bad range");
  const int m = a.dim(0), n = a.dim(1), w = c1 - c0;
  Tensor out = Tensor::zeros({m, w});
  for (int i = 0; i < m; ++i)
    std::memcpy(out.d_->value.data() + static_cast<size_t>(i) * w,
                a.d_->value.data() + static_cast<size_t>(i) * n + c0, static_cast<size_t>(w) * sizeof(double));
  if (maybe_track(out, a)) {
    Tape::current()->record([ad = a.d_, od = out.d_, m, n, w, c0] {
      if (od->grad.empty() || !wants_grad(ad)) return;
      ad->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
          ad->grad[static_cast<size_t>(i) * n + c0 + j] += od->grad[static_cast<size_t>(i) * w + j];
    });
  }
  return out;
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ContractError("stack_rows: empty input");
  const int n = static_cast<int>(rows[0].size());
  for (const auto& r : rows)
    if (r.rank() != 1 || r.size() != n) throw ContractError("stack_rows: row shape mismatch");
  Tensor out = Tensor::zeros({static_cast<int>(rows.size()), n});
  for (size_t i = 0; i < rows.size(); ++i)
    std::memcpy(out.d_->value.data() + i * n, rows[i].d_->value.data(), static_cast<size_t>(n) * sizeof(double));
  Tape* tape = Tape::current();
  bool any = false;
  if (tape)
    for (const auto& r : rows) any = any || live_on_tape(r, tape);
  if (any) {
    out.d_->tracked = true;
    out.d_->epoch = tape->epoch();
    std::vector<std::shared_ptr<TensorData>> rd;
    for (const auto& r : rows) rd.push_back(r.d_);
    tape->record([rd, od = out.d_, n] {
      if (od->grad.empty()) return;
      for (size_t i = 0; i < rd.size(); ++i) {
        if (!wants_grad(rd[i])) continue;
        rd[i]->ensure_grad();
        for (int j = 0; j < n; ++j) rd[i]->grad[j] += od->grad[i * n + j];
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  const int r = x.rank();
  if (r != 1 && r != 2) throw ContractError("softmax: rank 1 or 2 required");
  if (!(axis == -1 || axis == r - 1)) throw ContractError("softmax: only last-axis supported");
  const auto [m, n] = as_matrix(x);
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.d_->value;
  auto& ov = out.d_->value;
  for (int64_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double* orow = ov.data() + i * n;
    double mx = row[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < n; ++j) z += (orow[j] = std::exp(row[j] - mx));
    const double inv = 1.0 / z;
    for (int64_t j = 0; j < n; ++j) orow[j] *= inv;
  }
  check_finite(ov, "softmax");
  if (maybe_track(out, x)) {
    Tape::current()->record([xd = x.d_, od = out.d_, m, n] {
      if (od->grad.empty() || !wants_grad(xd)) return;
      xd->ensure_grad();
      for (int64_t i = 0; i < m; ++i) {
        const double* y = od->value.data() + i * n;
        const double* gy = od->grad.data() + i * n;
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) dot += gy[j] * y[j];
        double* gx = xd->grad.data() + i * n;
        for (int64_t j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
  const int r = x.rank();
  if (r != 1 && r != 2) throw ContractError("layer_norm: rank 1 or 2 required");
  const auto [m, n] = as_matrix(x);
  if (gain.rank() != 1 || gain.dim(0) != n || bias.rank() != 1 || bias.dim(0) != n)
    throw ContractError("layer_norm: gain/bias shape mismatch");
  Tensor out = Tensor::zeros(x.shape());
  // cache per-row mean and inverse stddev for backward
  auto xhat = std::make_shared<std::vector<double>>(x.d_->value.size());
  auto inv_sd = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
  const auto& xv = x.d_->value;
  const auto& gv = gain.d_->value;
  const auto& bv = bias.d_->value;
  auto& ov = out.d_->value;
  for (int64_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mu = 0.0;
    for (int64_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double isd = 1.0 / std::sqrt(var + eps);
    (*inv_sd)[static_cast<size_t>(i)] = isd;
    for (int64_t j = 0; j < n; ++j) {
      const double xh = (row[j] - mu) * isd;
      (*xhat)[i * n + j] = xh;
      ov[i * n + j] = xh * gv[j] + bv[j];
    }
  }
  check_finite(ov, "layer_norm");
  if (maybe_track(out, x, gain, bias)) {
    Tape::current()->record([xd = x.d_, gd = gain.d_, bd = bias.d_, od = out.d_, xhat, inv_sd, m, n] {
      if (od->grad.empty()) return;
      const double invn = 1.0 / static_cast<double>(n);
      if (wants_grad(xd)) xd->ensure_grad();
      if (wants_grad(gd)) gd->ensure_grad();
      if (wants_grad(bd)) bd->ensure_grad();
      for (int64_t i = 0; i < m; ++i) {
        const double* gy = od->grad.data() + i * n;
        const double* xh = xhat->data() + i * n;
        if (wants_grad(gd))
          for (int64_t j = 0; j < n; ++j) gd->grad[j] += gy[j] * xh[j];
        if (wants_grad(bd))
          for (int64_t j = 0; j < n; ++j) bd->grad[j] += gy[j];
        if (wants_grad(xd)) {
          // dL/dx = isd/n * (n*dxh - sum(dxh) - xh * sum(dxh*xh))
          const double isd = (*inv_sd)[static_cast<size_t>(i)];
          double s1 = 0.0, s2 = 0.0;
          for (int64_t j = 0; j < n; ++j) {
            const double dxh = gy[j] * gd->value[j];
            s1 += dxh;
            s2 += dxh * xh[j];
          }
          double* gx = xd->grad.data() + i * n;
          for (int64_t j = 0; j < n; ++j) {
            const double dxh = gy[j] * gd->value[j];
            gx[j] += isd * (dxh - invn * s1 - invn * xh[j] * s2);
          }
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int pad_id) {
  require_rank2(logits, "cross_entropy");
  const int64_t t_len = logits.dim(0), v = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != t_len)
    throw ContractError("cross_entropy: target length mismatch");
  int64_t n_real = 0;
  for (int y : targets) {
    if (y == pad_id) continue;
    if (y < 0 || y >= v) throw ContractError("cross_entropy: target id out of vocabulary");
    ++n_real;
  }
  if (n_real == 0) throw ContractError("cross_entropy: all targets are padding");

  auto probs = std::make_shared<std::vector<double>>(logits.d_->value.size());
  const auto& xv = logits.d_->value;
  double loss = 0.0;
  for (int64_t i = 0; i < t_len; ++i) {
    const double* row = xv.data() + i * v;
    double mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    double* prow = probs->data() + i * v;
    for (int64_t j = 0; j < v; ++j) z += (prow[j] = std::exp(row[j] - mx));
    const double inv = 1.0 / z;
    for (int64_t j = 0; j < v; ++j) prow[j] *= inv;
    if (targets[static_cast<size_t>(i)] != pad_id)
      loss -= std::log(std::max(prow[targets[static_cast<size_t>(i)]], 1e-300));
  }
  loss /= static_cast<double>(n_real);
  if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
  Tensor out = Tensor::from({1}, {loss});
  if (maybe_track(out, logits)) {
    std::vector<int> tgt(targets.begin(), targets.end());
    Tape::current()->record([xd = logits.d_, od = out.d_, probs, tgt, pad_id, t_len, v, n_real] {
      if (od->grad.empty() || !wants_grad(xd)) return;
      xd->ensure_grad();
      const double g = od->grad[0] / static_cast<double>(n_real);
      for (int64_t i = 0; i < t_len; ++i) {
        if (tgt[static_cast<size_t>(i)] == pad_id) continue;
        const double* prow = probs->data() + i * v;
        double* gx = xd->grad.data() + i * v;
        for (int64_t j = 0; j < v; ++j) gx[j] += g * prow[j];
        gx[tgt[static_cast<size_t>(i)]] -= g;
      }
    });
  }
  return out;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "embedding");
  const int64_t v = table.dim(0), d = table.dim(1);
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), static_cast<int>(d)});
  auto& ov = out.d_->value;
  for (size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || ids[t] >= v) throw ContractError("embedding: id out of vocabulary");
    std::memcpy(ov.data() + t * d, table.d_->value.data() + static_cast<size_t>(ids[t]) * d,
                static_cast<size_t>(d) * sizeof(double));
  }
  if (maybe_track(out, table)) {
    std::vector<int> idv(ids.begin(), ids.end());
    Tape::current()->record([td = table.d_, od = out.d_, idv, d] {
      if (od->grad.empty() || !wants_grad(td)) return;
      td->ensure_grad();
      for (size_t t = 0; t < idv.size(); ++t) {
        double* dst = td->grad.data() + static_cast<size_t>(idv[t]) * d;
        const double* src = od->grad.data() + t * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0,1)");
  if (rate == 0.0) return a;
  const double keep = 1.0 - rate;
  std::vector<double> mask(a.d_->value.size());
  for (auto& m : mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return mul(a, Tensor::from(a.shape(), std::move(mask)));
}

// ---- grad_check ---------------------------------------------------------------

GradCheckResult grad_check(const std::function<Tensor()>& f, std::span<const Tensor> params,
                           double eps, int max_coords_per_param, Rng* rng) {
  GradCheckResult res;
  const double v1 = f().item();
  const double v2 = f().item();
  if (v1 != v2) {
    res.deterministic = false;
    return res;
  }

  std::vector<std::vector<double>> analytic(params.size());
  {
    Tape tape;
    Tensor loss = f();
    tape.backward(loss);
    for (size_t p = 0; p < params.size(); ++p) {
      auto g = params[p].grad();
      analytic[p].assign(g.begin(), g.end());
      if (analytic[p].empty()) analytic[p].assign(static_cast<size_t>(params[p].size()), 0.0);
      const_cast<Tensor&>(params[p]).zero_grad();
    }
  }

  Rng fallback(0x9d2c5680);
  Rng& r = rng ? *rng : fallback;
  for (size_t p = 0; p < params.size(); ++p) {
    const int64_t n = params[p].size();
    std::vector<int64_t> coords;
    if (n <= max_coords_per_param) {
      for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int i = 0; i < max_coords_per_param; ++i)
        coords.push_back(r.uniform_int(static_cast<int>(n)));
    }
    auto& vals = params[p].d_->value;
    for (int64_t c : coords) {
      const double orig = vals[static_cast<size_t>(c)];
      vals[static_cast<size_t>(c)] = orig + eps;
      const double fp = f().item();
      vals[static_cast<size_t>(c)] = orig - eps;
      const double fm = f().item();
      vals[static_cast<size_t>(c)] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[p][static_cast<size_t>(c)];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.coords_checked;
    }
  }
  return res;
}

}  // namespace styletalk
