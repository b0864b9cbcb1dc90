#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "parelab/rng.hpp"
#include "parelab/tensor.hpp"

namespace parelab {

namespace detail {

// Scatters x[n] into a [Cin*kh*kw, Ho*Wo] column matrix (zero-padded).
template <class T>
void im2col(const T* x, int64_t cin, int64_t h, int64_t w, int64_t kh,
            int64_t kw, int64_t stride, int64_t pad, int64_t ho, int64_t wo,
            T* col) {
  for (int64_t c = 0; c < cin; ++c)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * ho * wo;
        for (int64_t oi = 0; oi < ho; ++oi) {
          int64_t ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= h) {
            std::fill_n(row + oi * wo, wo, T(0));
            continue;
          }
          for (int64_t oj = 0; oj < wo; ++oj) {
            int64_t jj = oj * stride + kj - pad;
            row[oi * wo + oj] =
                (jj < 0 || jj >= w) ? T(0) : x[(c * h + ii) * w + jj];
          }
        }
      }
}

template <class T>
void col2im_accum(const T* col, int64_t cin, int64_t h, int64_t w, int64_t kh,
                  int64_t kw, int64_t stride, int64_t pad, int64_t ho,
                  int64_t wo, T* dx) {
  for (int64_t c = 0; c < cin; ++c)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * ho * wo;
        for (int64_t oi = 0; oi < ho; ++oi) {
          int64_t ii = oi * stride + ki - pad;
          if (ii < 0 || ii >= h) continue;
          for (int64_t oj = 0; oj < wo; ++oj) {
            int64_t jj = oj * stride + kj - pad;
            if (jj >= 0 && jj < w) dx[(c * h + ii) * w + jj] += row[oi * wo + oj];
          }
        }
      }
}

}  // namespace detail

// Cross-correlation conv. x [N,Cin,H,W], kernel [Cout,Cin,kh,kw],
// bias [Cout] (optional, pass undefined Tensor to skip).
// Ho = (H + 2*pad - kh) / stride + 1.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int64_t stride = 1, int64_t pad = 0) {
  if (x.dim() != 4) tensor_error("conv2d: input must be 4-D [N,Cin,H,W], got " +
                                 shape_str(x.shape()));
  if (kernel.dim() != 4)
    tensor_error("conv2d: kernel must be 4-D [Cout,Cin,kh,kw], got " +
                 shape_str(kernel.shape()));
  if (stride < 1) tensor_error("conv2d: stride must be >= 1");
  const int64_t n = x.size(0), cin = x.size(1), h = x.size(2), w = x.size(3);
  const int64_t cout = kernel.size(0), kh = kernel.size(2), kw = kernel.size(3);
  if (kernel.size(1) != cin)
    tensor_error("conv2d: channel axis mismatch, input Cin=" +
                 std::to_string(cin) + " vs kernel Cin=" +
                 std::to_string(kernel.size(1)));
  if (kh > h + 2 * pad || kw > w + 2 * pad)
    tensor_error("conv2d: kernel " + std::to_string(kh) + "x" +
                 std::to_string(kw) + " exceeds padded input " +
                 std::to_string(h + 2 * pad) + "x" + std::to_string(w + 2 * pad) +
                 " on spatial axes");
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != cout))
    tensor_error("conv2d: bias must be [Cout]");

  const int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const int64_t wo = (w + 2 * pad - kw) / stride + 1;
  const int64_t ck = cin * kh * kw, hw = ho * wo;

  std::vector<T> value(size_t(n * cout * hw));
  auto cols = std::make_shared<std::vector<T>>(size_t(n * ck * hw));
  ECMap<T> K(kernel.data().data(), cout, ck);
  for (int64_t i = 0; i < n; ++i) {
    T* col = cols->data() + i * ck * hw;
    detail::im2col(x.data().data() + i * cin * h * w, cin, h, w, kh, kw, stride,
                   pad, ho, wo, col);
    EMap<T> out(value.data() + i * cout * hw, cout, hw);
    out.noalias() = K * ECMap<T>(col, ck, hw);
  }
  if (bias.defined()) {
    const auto& bv = bias.data();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t c = 0; c < cout; ++c) {
        T* row = value.data() + (i * cout + c) * hw;
        for (int64_t p = 0; p < hw; ++p) row[p] += bv[size_t(c)];
      }
  }

  auto xn = x.node(), kn = kernel.node();
  std::vector<detail::NodePtr<T>> parents{xn, kn};
  detail::NodePtr<T> bn = bias.defined() ? bias.node() : nullptr;
  if (bn) parents.push_back(bn);
  return detail::make_op<T>(
      {n, cout, ho, wo}, std::move(value), std::move(parents),
      [xn, kn, bn, cols, n, cin, h, w, cout, kh, kw, stride, pad, ho,
       wo](typename Tensor<T>::Node& o) {
        const int64_t ck = cin * kh * kw, hw = ho * wo;
        if (kn->requires_grad) {
          kn->ensure_grad();
          EMap<T> dK(kn->grad.data(), cout, ck);
          for (int64_t i = 0; i < n; ++i) {
            ECMap<T> G(o.grad.data() + i * cout * hw, cout, hw);
            ECMap<T> col(cols->data() + i * ck * hw, ck, hw);
            dK.noalias() += G * col.transpose();
          }
        }
        if (bn && bn->requires_grad) {
          bn->ensure_grad();
          for (int64_t i = 0; i < n; ++i)
            for (int64_t c = 0; c < cout; ++c) {
              const T* row = o.grad.data() + (i * cout + c) * hw;
              T acc = 0;
              for (int64_t p = 0; p < hw; ++p) acc += row[p];
              bn->grad[size_t(c)] += acc;
            }
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          ECMap<T> K(kn->value.data(), cout, ck);
          std::vector<T> dcol(size_t(ck * hw));
          for (int64_t i = 0; i < n; ++i) {
            ECMap<T> G(o.grad.data() + i * cout * hw, cout, hw);
            EMap<T> D(dcol.data(), ck, hw);
            D.noalias() = K.transpose() * G;
            detail::col2im_accum(dcol.data(), cin, h, w, kh, kw, stride, pad,
                                 ho, wo, xn->grad.data() + i * cin * h * w);
          }
        }
      });
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                 int64_t stride = 1, int64_t pad = 0) {
  return conv2d(x, kernel, Tensor<T>(), stride, pad);
}

// Each pixel replicated into a 2x2 block.
template <class T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x) {
  if (x.dim() != 4)
    tensor_error("upsample2x_nearest: input must be 4-D, got " +
                 shape_str(x.shape()));
  const int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  std::vector<T> value(size_t(n * c * 4 * h * w));
  const auto& xv = x.data();
  for (int64_t q = 0; q < n * c; ++q)
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j) {
        T v = xv[size_t((q * h + i) * w + j)];
        T* base = value.data() + q * 4 * h * w;
        base[(2 * i) * 2 * w + 2 * j] = v;
        base[(2 * i) * 2 * w + 2 * j + 1] = v;
        base[(2 * i + 1) * 2 * w + 2 * j] = v;
        base[(2 * i + 1) * 2 * w + 2 * j + 1] = v;
      }
  auto xn = x.node();
  return detail::make_op<T>(
      {n, c, 2 * h, 2 * w}, std::move(value), {xn},
      [xn, n, c, h, w](typename Tensor<T>::Node& o) {
        xn->ensure_grad();
        for (int64_t q = 0; q < n * c; ++q)
          for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j) {
              const T* base = o.grad.data() + q * 4 * h * w;
              xn->grad[size_t((q * h + i) * w + j)] +=
                  base[(2 * i) * 2 * w + 2 * j] +
                  base[(2 * i) * 2 * w + 2 * j + 1] +
                  base[(2 * i + 1) * 2 * w + 2 * j] +
                  base[(2 * i + 1) * 2 * w + 2 * j + 1];
            }
      });
}

// Top-left 2x2 subsampling; inverse of upsample2x_nearest on its image.
template <class T>
Tensor<T> downsample2x_topleft(const Tensor<T>& x) {
  if (x.dim() != 4 || x.size(2) % 2 || x.size(3) % 2)
    tensor_error("downsample2x_topleft: need 4-D with even spatial dims");
  const int64_t n = x.size(0), c = x.size(1), h = x.size(2) / 2, w = x.size(3) / 2;
  std::vector<T> value(size_t(n * c * h * w));
  for (int64_t q = 0; q < n * c; ++q)
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j)
        value[size_t((q * h + i) * w + j)] =
            x.data()[size_t(q * 4 * h * w + (2 * i) * 2 * w + 2 * j)];
  return Tensor<T>::from_data({n, c, h, w}, std::move(value));
}

// Batch normalization over [N,C,H,W] with per-channel affine.
// Train mode normalizes by batch moments (needs N*H*W >= 2) and updates
// running stats with `momentum`; eval mode applies the running stats.
template <class T>
struct BatchNorm2d {
  Tensor<T> gamma, beta;          // learnable
  std::vector<T> running_mean, running_var;  // buffers
  T eps = T(1e-5);
  T momentum = T(0.1);

  explicit BatchNorm2d(int64_t channels = 0) {
    if (channels > 0) init(channels);
  }
  void init(int64_t channels) {
    gamma = Tensor<T>::full({channels}, T(1), true);
    beta = Tensor<T>::zeros({channels}, true);
    running_mean.assign(size_t(channels), T(0));
    running_var.assign(size_t(channels), T(1));
  }

  Tensor<T> operator()(const Tensor<T>& x, bool training) {
    if (x.dim() != 4) tensor_error("batchnorm2d: input must be 4-D, got " +
                                   shape_str(x.shape()));
    const int64_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    if (c != gamma.size(0))
      tensor_error("batchnorm2d: channel axis mismatch, input C=" +
                   std::to_string(c) + " vs layer C=" +
                   std::to_string(gamma.size(0)));
    const int64_t m = n * h * w;
    if (training && m < 2)
      tensor_error("batchnorm2d: train mode needs N*H*W >= 2 per channel");

    if (!training) {
      // y = gamma * (x - rm) / sqrt(rv + eps) + beta, constants detached
      std::vector<T> sc(static_cast<size_t>(c)), sh(static_cast<size_t>(c));
      for (int64_t i = 0; i < c; ++i) {
        sc[size_t(i)] = T(1) / std::sqrt(running_var[size_t(i)] + eps);
        sh[size_t(i)] = -running_mean[size_t(i)] * sc[size_t(i)];
      }
      auto scale = Tensor<T>::from_data({1, c, 1, 1}, std::move(sc));
      auto shift = Tensor<T>::from_data({1, c, 1, 1}, std::move(sh));
      auto xhat = add(mul(x, scale), shift);
      return add(mul(xhat, reshape(gamma, {1, c, 1, 1})),
                 reshape(beta, {1, c, 1, 1}));
    }

    auto mu = std::make_shared<std::vector<T>>(size_t(c), T(0));
    auto invstd = std::make_shared<std::vector<T>>(size_t(c));
    auto xhat = std::make_shared<std::vector<T>>(x.data().size());
    const auto& xv = x.data();
    const int64_t hw = h * w;
    for (int64_t ch = 0; ch < c; ++ch) {
      T s = 0;
      for (int64_t i = 0; i < n; ++i) {
        const T* p = xv.data() + (i * c + ch) * hw;
        for (int64_t k = 0; k < hw; ++k) s += p[k];
      }
      T m_ch = s / T(m);
      T v = 0;
      for (int64_t i = 0; i < n; ++i) {
        const T* p = xv.data() + (i * c + ch) * hw;
        for (int64_t k = 0; k < hw; ++k) {
          T d = p[k] - m_ch;
          v += d * d;
        }
      }
      T var = v / T(m);
      (*mu)[size_t(ch)] = m_ch;
      (*invstd)[size_t(ch)] = T(1) / std::sqrt(var + eps);
      running_mean[size_t(ch)] =
          (T(1) - momentum) * running_mean[size_t(ch)] + momentum * m_ch;
      T var_unbiased = m > 1 ? v / T(m - 1) : var;
      running_var[size_t(ch)] =
          (T(1) - momentum) * running_var[size_t(ch)] + momentum * var_unbiased;
    }
    std::vector<T> value(xv.size());
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ch = 0; ch < c; ++ch) {
        const T* p = xv.data() + (i * c + ch) * hw;
        T* xh = xhat->data() + (i * c + ch) * hw;
        T* out = value.data() + (i * c + ch) * hw;
        T mc = (*mu)[size_t(ch)], is = (*invstd)[size_t(ch)];
        for (int64_t k = 0; k < hw; ++k) {
          xh[k] = (p[k] - mc) * is;
          out[k] = gv[size_t(ch)] * xh[k] + bv[size_t(ch)];
        }
      }

    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return detail::make_op<T>(
        {n, c, h, w}, std::move(value), {xn, gn, bn},
        [xn, gn, bn, xhat, invstd, n, c, hw](typename Tensor<T>::Node& o) {
          const int64_t m = n * hw;
          for (int64_t ch = 0; ch < c; ++ch) {
            T sum_g = 0, sum_gx = 0;
            for (int64_t i = 0; i < n; ++i) {
              const T* g = o.grad.data() + (i * c + ch) * hw;
              const T* xh = xhat->data() + (i * c + ch) * hw;
              for (int64_t k = 0; k < hw; ++k) {
                sum_g += g[k];
                sum_gx += g[k] * xh[k];
              }
            }
            if (gn->requires_grad) {
              gn->ensure_grad();
              gn->grad[size_t(ch)] += sum_gx;
            }
            if (bn->requires_grad) {
              bn->ensure_grad();
              bn->grad[size_t(ch)] += sum_g;
            }
            if (xn->requires_grad) {
              xn->ensure_grad();
              T gam = gn->value[size_t(ch)], is = (*invstd)[size_t(ch)];
              T k1 = gam * is / T(m);
              for (int64_t i = 0; i < n; ++i) {
                const T* g = o.grad.data() + (i * c + ch) * hw;
                const T* xh = xhat->data() + (i * c + ch) * hw;
                T* dx = xn->grad.data() + (i * c + ch) * hw;
                for (int64_t k = 0; k < hw; ++k)
                  dx[k] += k1 * (T(m) * g[k] - sum_g - xh[k] * sum_gx);
              }
            }
          }
        });
  }
};

// x [N,K] * W [K,M] + b [M]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  auto y = matmul(x, weight);
  if (bias.defined()) y = add(y, reshape(bias, {1, bias.numel()}));
  return y;
}

// Bilinear sample of feature maps at continuous locations.
// f [N,C,H,W], loc [N,J,2] in pixel coordinates (x,y); zero padding
// outside. Differentiable w.r.t. both features and locations.
template <class T>
Tensor<T> bilinear_sample(const Tensor<T>& f, const Tensor<T>& loc) {
  if (f.dim() != 4 || loc.dim() != 3 || loc.size(2) != 2)
    tensor_error("bilinear_sample: expected f [N,C,H,W], loc [N,J,2]");
  if (f.size(0) != loc.size(0))
    tensor_error("bilinear_sample: batch axes differ");
  const int64_t n = f.size(0), c = f.size(1), h = f.size(2), w = f.size(3);
  const int64_t j = loc.size(1);

  // Locations are in [-1,1]^2 mapped to pixel centers [0,w-1] x [0,h-1];
  // out-of-range reads see zero padding. Captures by value: this closure
  // outlives the enclosing call inside the backward pass.
  auto sample_one = [c, h, w](const std::vector<T>& fv, int64_t i, int64_t ch,
                              T px_ndc, T py_ndc, T* out, T* dpx, T* dpy,
                              T gout, std::vector<T>* df) {
    const T sx = T(w - 1) / T(2), sy = T(h - 1) / T(2);
    const T px = (px_ndc + T(1)) * sx, py = (py_ndc + T(1)) * sy;
    int64_t x0 = int64_t(std::floor(px)), y0 = int64_t(std::floor(py));
    T ax = px - T(x0), ay = py - T(y0);
    T v[2][2];
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        int64_t xx = x0 + dx, yy = y0 + dy;
        bool in = xx >= 0 && xx < w && yy >= 0 && yy < h;
        v[dy][dx] = in ? fv[size_t(((i * c + ch) * h + yy) * w + xx)] : T(0);
        if (df && in) {
          T wgt = (dy ? ay : T(1) - ay) * (dx ? ax : T(1) - ax);
          (*df)[size_t(((i * c + ch) * h + yy) * w + xx)] += gout * wgt;
        }
      }
    T top = v[0][0] * (T(1) - ax) + v[0][1] * ax;
    T bot = v[1][0] * (T(1) - ax) + v[1][1] * ax;
    if (out) *out = top * (T(1) - ay) + bot * ay;
    if (dpx)
      *dpx += gout * sx *
              ((v[0][1] - v[0][0]) * (T(1) - ay) + (v[1][1] - v[1][0]) * ay);
    if (dpy) *dpy += gout * sy * (bot - top);
  };

  std::vector<T> value(size_t(n * j * c));
  const auto& fv = f.data();
  const auto& lv = loc.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t q = 0; q < j; ++q) {
      T px = lv[size_t((i * j + q) * 2)], py = lv[size_t((i * j + q) * 2 + 1)];
      for (int64_t ch = 0; ch < c; ++ch)
        sample_one(fv, i, ch, px, py, &value[size_t((i * j + q) * c + ch)],
                   nullptr, nullptr, T(0), nullptr);
    }

  auto fn = f.node(), ln = loc.node();
  return detail::make_op<T>(
      {n, j, c}, std::move(value), {fn, ln},
      [fn, ln, n, c, j, sample_one](typename Tensor<T>::Node& o) {
        if (fn->requires_grad) fn->ensure_grad();
        if (ln->requires_grad) ln->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t q = 0; q < j; ++q) {
            T px = ln->value[size_t((i * j + q) * 2)];
            T py = ln->value[size_t((i * j + q) * 2 + 1)];
            T dpx = 0, dpy = 0;
            for (int64_t ch = 0; ch < c; ++ch) {
              T g = o.grad[size_t((i * j + q) * c + ch)];
              sample_one(fn->value, i, ch, px, py, nullptr,
                         ln->requires_grad ? &dpx : nullptr,
                         ln->requires_grad ? &dpy : nullptr, g,
                         fn->requires_grad ? &fn->grad : nullptr);
            }
            if (ln->requires_grad) {
              ln->grad[size_t((i * j + q) * 2)] += dpx;
              ln->grad[size_t((i * j + q) * 2 + 1)] += dpy;
            }
          }
      });
}

// ---- parameters & optimizer ----

// Named learnable parameters with Adam moment buffers, plus non-learnable
// named buffers (batchnorm running stats). Mutation is confined to the
// training thread.
template <class T>
class ParamStore {
public:
  struct Entry {
    Tensor<T> param;
    std::vector<T> m, v;
  };

  Tensor<T>& create(const std::string& name, Shape shape,
                    std::vector<T> data) {
    if (entries_.count(name))
      tensor_error("ParamStore: duplicate parameter '" + name + "'");
    auto t = Tensor<T>::from_data(std::move(shape), std::move(data), true);
    t.node()->requires_grad = true;  // params always track grads
    auto& e = entries_[name];
    e.param = t;
    e.m.assign(t.data().size(), T(0));
    e.v.assign(t.data().size(), T(0));
    order_.push_back(name);
    return entries_[name].param;
  }

  // register an externally created tensor (e.g. batchnorm gamma)
  void adopt(const std::string& name, Tensor<T> t) {
    if (entries_.count(name))
      tensor_error("ParamStore: duplicate parameter '" + name + "'");
    t.node()->requires_grad = true;
    auto& e = entries_[name];
    e.param = t;
    e.m.assign(t.data().size(), T(0));
    e.v.assign(t.data().size(), T(0));
    order_.push_back(name);
  }

  void add_buffer(const std::string& name, std::vector<T>* buf) {
    buffers_[name] = buf;
    buffer_order_.push_back(name);
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  Tensor<T>& get(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end())
      tensor_error("ParamStore: unknown parameter '" + name + "'");
    return it->second.param;
  }
  const std::vector<std::string>& names() const { return order_; }
  const std::vector<std::string>& buffer_names() const { return buffer_order_; }
  std::vector<T>* buffer(const std::string& name) { return buffers_.at(name); }
  Entry& entry(const std::string& name) { return entries_.at(name); }
  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }

  int64_t total_params() const {
    int64_t n = 0;
    for (auto& name : order_) n += entries_.at(name).param.numel();
    return n;
  }

  void zero_grad() {
    for (auto& name : order_) entries_.at(name).param.zero_grad();
  }

  double grad_norm() {
    double acc = 0;
    for (auto& name : order_)
      for (T g : entries_.at(name).param.grad()) acc += double(g) * double(g);
    return std::sqrt(acc);
  }

  void clip_grad_norm(double max_norm) {
    double norm = grad_norm();
    if (norm <= max_norm || norm == 0) return;
    T s = T(max_norm / norm);
    for (auto& name : order_)
      for (T& g : entries_.at(name).param.mutable_grad()) g *= s;
  }

  // Standard Adam with bias correction. Throws on NaN gradients,
  // naming the parameter.
  void adam_step(T lr, T beta1 = T(0.9), T beta2 = T(0.999),
                 T eps = T(1e-8)) {
    ++step_;
    T bc1 = T(1) - std::pow(beta1, T(step_));
    T bc2 = T(1) - std::pow(beta2, T(step_));
    for (auto& name : order_) {
      auto& e = entries_.at(name);
      auto& p = e.param.mutable_data();
      auto& g = e.param.mutable_grad();
      for (size_t i = 0; i < p.size(); ++i) {
        if (std::isnan(g[i]))
          tensor_error("adam_step: NaN gradient in parameter '" + name + "'");
        e.m[i] = beta1 * e.m[i] + (T(1) - beta1) * g[i];
        e.v[i] = beta2 * e.v[i] + (T(1) - beta2) * g[i] * g[i];
        T mhat = e.m[i] / bc1;
        T vhat = e.v[i] / bc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

private:
  std::map<std::string, Entry> entries_;
  std::map<std::string, std::vector<T>*> buffers_;
  std::vector<std::string> order_;
  std::vector<std::string> buffer_order_;
  int64_t step_ = 0;
};

// He-style uniform init, bound sqrt(6 / fan_in).
template <class T>
std::vector<T> he_uniform(int64_t fan_in, int64_t count, Rng& rng) {
  double bound = std::sqrt(6.0 / double(fan_in));
  std::vector<T> out(static_cast<size_t>(count));
  for (auto& v : out) v = T(rng.uniform(-bound, bound));
  return out;
}

}  // namespace parelab
