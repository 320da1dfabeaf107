#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <vector>

#include "nerfloc/rng.hpp"

namespace nerfloc {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Flat view over one named tensor and its gradient buffer.
template <typename T>
struct ParamEntry {
  std::string name;
  T* data = nullptr;
  T* grad = nullptr;
  Eigen::Index rows = 0, cols = 0;  // serialized row-major
  Eigen::Index size() const { return rows * cols; }
};

template <typename T>
class ParamRegistry {
 public:
  void add(const std::string& name, MatX<T>& m, MatX<T>& g) {
    entries_.push_back({name, m.data(), g.data(), m.rows(), m.cols()});
  }
  void add(const std::string& name, VecX<T>& v, VecX<T>& g) {
    entries_.push_back({name, v.data(), g.data(), v.size(), 1});
  }
  const std::vector<ParamEntry<T>>& entries() const { return entries_; }
  Eigen::Index total_size() const {
    Eigen::Index n = 0;
    for (const auto& e : entries_) n += e.size();
    return n;
  }
  void zero_grads() const {
    for (const auto& e : entries_) {
      Eigen::Map<VecX<T>>(e.grad, e.size()).setZero();
    }
  }
  // Adds grads of a compatible registry (same layout) into this one.
  void accumulate_from(const ParamRegistry<T>& other) const {
    for (size_t i = 0; i < entries_.size(); ++i) {
      Eigen::Map<VecX<T>>(entries_[i].grad, entries_[i].size()) +=
          Eigen::Map<const VecX<T>>(other.entries_[i].grad,
                                    other.entries_[i].size());
    }
  }
  // Copies parameter values of a compatible registry into this one.
  void copy_params_from(const ParamRegistry<T>& other) const {
    for (size_t i = 0; i < entries_.size(); ++i) {
      Eigen::Map<VecX<T>>(entries_[i].data, entries_[i].size()) =
          Eigen::Map<const VecX<T>>(other.entries_[i].data,
                                    other.entries_[i].size());
    }
  }

 private:
  std::vector<ParamEntry<T>> entries_;
};

template <typename T>
class Adam {
 public:
  void step(const ParamRegistry<T>& reg, double lr, double beta1 = 0.9,
            double beta2 = 0.999, double eps = 1e-8) {
    const auto& entries = reg.entries();
    if (m_.empty()) {
      for (const auto& e : entries) {
        m_.emplace_back(VecX<T>::Zero(e.size()));
        v_.emplace_back(VecX<T>::Zero(e.size()));
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, t_);
    const double bc2 = 1.0 - std::pow(beta2, t_);
    for (size_t i = 0; i < entries.size(); ++i) {
      Eigen::Map<VecX<T>> p(entries[i].data, entries[i].size());
      Eigen::Map<VecX<T>> g(entries[i].grad, entries[i].size());
      m_[i] = T(beta1) * m_[i] + T(1 - beta1) * g;
      v_[i] = T(beta2) * v_[i] + T(1 - beta2) * g.cwiseProduct(g);
      p -= (T(lr) / T(bc1)) * m_[i].cwiseQuotient(
               ((v_[i] / T(bc2)).cwiseSqrt().array() + T(eps)).matrix());
    }
  }

 private:
  std::vector<VecX<T>> m_, v_;
  long t_ = 0;
};

inline double cosine_anneal(double lr0, long step, long total_steps) {
  if (total_steps <= 0) return lr0;
  const double x = static_cast<double>(step) / total_steps;
  return lr0 * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, x)));
}

// ---------------------------------------------------------------------------
// Layers. Forward passes write intermediates into caller-owned caches so one
// set of weights can be applied to several streams (shared-weight attention)
// and still backprop correctly. Backward accumulates into the layer grads.
// ---------------------------------------------------------------------------

template <typename T>
void glorot_init(MatX<T>& w, Rng& rng) {
  const double s = std::sqrt(6.0 / (w.rows() + w.cols()));
  for (Eigen::Index i = 0; i < w.size(); ++i)
    w.data()[i] = static_cast<T>(rng.uniform(-s, s));
}

template <typename T>
struct Linear {
  MatX<T> W;  // out x in
  VecX<T> b;
  MatX<T> gW;
  VecX<T> gb;

  void init(int in, int out, Rng& rng) {
    W.resize(out, in);
    glorot_init(W, rng);
    b.resize(out);
    const double bs = 1.0 / std::sqrt(static_cast<double>(in));
    for (int i = 0; i < out; ++i) b(i) = static_cast<T>(rng.uniform(-bs, bs));
    gW = MatX<T>::Zero(out, in);
    gb = VecX<T>::Zero(out);
  }
  int in_dim() const { return static_cast<int>(W.cols()); }
  int out_dim() const { return static_cast<int>(W.rows()); }

  // X: N x in -> N x out
  MatX<T> forward(const MatX<T>& x) const {
    return (x * W.transpose()).rowwise() + b.transpose();
  }
  // Returns dX and accumulates gW, gb.
  MatX<T> backward(const MatX<T>& x, const MatX<T>& dy) {
    gW.noalias() += dy.transpose() * x;
    gb.noalias() += dy.colwise().sum().transpose();
    return dy * W;
  }
  void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.add(prefix + ".W", W, gW);
    reg.add(prefix + ".b", b, gb);
  }
};

template <typename T>
MatX<T> relu(const MatX<T>& x) {
  return x.cwiseMax(T(0));
}
// Mask derived from the forward output (post > 0 iff pre > 0).
template <typename T>
MatX<T> relu_backward(const MatX<T>& y, const MatX<T>& dy) {
  return (y.array() > T(0)).template cast<T>().matrix().cwiseProduct(dy);
}

template <typename T>
MatX<T> softplus(const MatX<T>& x) {
  // log(1 + e^x), stable form.
  return x.unaryExpr([](T v) {
    return v > T(20)
               ? v
               : static_cast<T>(std::log1p(std::exp(static_cast<double>(v))));
  });
}
template <typename T>
MatX<T> softplus_backward(const MatX<T>& x, const MatX<T>& dy) {
  return x
      .unaryExpr([](T v) {
        return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
      })
      .cwiseProduct(dy);
}

template <typename T>
MatX<T> sigmoid(const MatX<T>& x) {
  return x.unaryExpr([](T v) {
    return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
  });
}
template <typename T>
MatX<T> sigmoid_backward_from_output(const MatX<T>& y, const MatX<T>& dy) {
  return y.cwiseProduct((MatX<T>::Ones(y.rows(), y.cols()) - y))
      .cwiseProduct(dy);
}

template <typename T>
MatX<T> softmax_rows(const MatX<T>& z) {
  MatX<T> a = z;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const T m = a.row(i).maxCoeff();
    a.row(i) = (a.row(i).array() - m).exp();
    a.row(i) /= a.row(i).sum();
  }
  return a;
}
// dZ for row-wise softmax given output A and upstream dA.
template <typename T>
MatX<T> softmax_rows_backward(const MatX<T>& a, const MatX<T>& da) {
  MatX<T> dz(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const T dot = a.row(i).dot(da.row(i));
    dz.row(i) = a.row(i).cwiseProduct(
        (da.row(i).array() - dot).matrix());
  }
  return dz;
}

// ---------------------------------------------------------------------------
// Conv2d over feature maps stored as (H*W) x C matrices, pixel row-major.
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2d {
  int in_ch = 0, out_ch = 0, ksize = 3, stride = 1, pad = 1;
  MatX<T> W;  // out_ch x (in_ch * k * k)
  VecX<T> b;
  MatX<T> gW;
  VecX<T> gb;

  struct Cache {
    MatX<T> cols;  // (out_h*out_w) x (in_ch*k*k)
    int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  };

  void init(int in_c, int out_c, int k, int s, Rng& rng) {
    in_ch = in_c;
    out_ch = out_c;
    ksize = k;
    stride = s;
    pad = (k - 1) / 2;
    W.resize(out_c, in_c * k * k);
    glorot_init(W, rng);
    b.resize(out_c);
    const double bs = 1.0 / std::sqrt(static_cast<double>(in_c) * k * k);
    for (int i = 0; i < out_c; ++i) b(i) = static_cast<T>(rng.uniform(-bs, bs));
    gW = MatX<T>::Zero(W.rows(), W.cols());
    gb = VecX<T>::Zero(out_c);
  }

  MatX<T> forward(const MatX<T>& x, int h, int w, Cache* cache) const {
    const int oh = (h + 2 * pad - ksize) / stride + 1;
    const int ow = (w + 2 * pad - ksize) / stride + 1;
    MatX<T> cols = MatX<T>::Zero(static_cast<Eigen::Index>(oh) * ow,
                                 static_cast<Eigen::Index>(in_ch) * ksize * ksize);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const Eigen::Index row = static_cast<Eigen::Index>(oy) * ow + ox;
        for (int ky = 0; ky < ksize; ++ky) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < ksize; ++kx) {
            const int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w) continue;
            const Eigen::Index src = static_cast<Eigen::Index>(iy) * w + ix;
            for (int c = 0; c < in_ch; ++c) {
              cols(row, (static_cast<Eigen::Index>(c) * ksize + ky) * ksize + kx) =
                  x(src, c);
            }
          }
        }
      }
    }
    MatX<T> y = (cols * W.transpose()).rowwise() + b.transpose();
    if (cache) {
      cache->cols = std::move(cols);
      cache->in_h = h;
      cache->in_w = w;
      cache->out_h = oh;
      cache->out_w = ow;
    }
    return y;
  }

  // Returns dX ((h*w) x in_ch) and accumulates parameter grads.
  MatX<T> backward(const Cache& cache, const MatX<T>& dy) {
    gW.noalias() += dy.transpose() * cache.cols;
    gb.noalias() += dy.colwise().sum().transpose();
    const MatX<T> dcols = dy * W;
    MatX<T> dx = MatX<T>::Zero(
        static_cast<Eigen::Index>(cache.in_h) * cache.in_w, in_ch);
    for (int oy = 0; oy < cache.out_h; ++oy) {
      for (int ox = 0; ox < cache.out_w; ++ox) {
        const Eigen::Index row = static_cast<Eigen::Index>(oy) * cache.out_w + ox;
        for (int ky = 0; ky < ksize; ++ky) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= cache.in_h) continue;
          for (int kx = 0; kx < ksize; ++kx) {
            const int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= cache.in_w) continue;
            const Eigen::Index dst = static_cast<Eigen::Index>(iy) * cache.in_w + ix;
            for (int c = 0; c < in_ch; ++c) {
              dx(dst, c) +=
                  dcols(row, (static_cast<Eigen::Index>(c) * ksize + ky) * ksize + kx);
            }
          }
        }
      }
    }
    return dx;
  }

  void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.add(prefix + ".W", W, gW);
    reg.add(prefix + ".b", b, gb);
  }
};

// ---------------------------------------------------------------------------
// LayerNorm over feature dim (per row).
// ---------------------------------------------------------------------------

template <typename T>
struct LayerNorm {
  VecX<T> gamma, beta;
  VecX<T> ggamma, gbeta;
  static constexpr double kEps = 1e-6;

  void init(int dim) {
    gamma = VecX<T>::Ones(dim);
    beta = VecX<T>::Zero(dim);
    ggamma = VecX<T>::Zero(dim);
    gbeta = VecX<T>::Zero(dim);
  }

  struct Cache {
    MatX<T> xhat;
    VecX<T> inv_std;
  };

  MatX<T> forward(const MatX<T>& x, Cache* cache) const {
    const Eigen::Index n = x.rows(), d = x.cols();
    MatX<T> xhat(n, d);
    VecX<T> inv_std(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const T mu = x.row(i).mean();
      const T var = (x.row(i).array() - mu).square().mean();
      const T is = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + kEps));
      xhat.row(i) = (x.row(i).array() - mu) * is;
      inv_std(i) = is;
    }
    MatX<T> y = xhat;
    y.array().rowwise() *= gamma.transpose().array();
    y.rowwise() += beta.transpose();
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_std = std::move(inv_std);
    }
    return y;
  }

  MatX<T> backward(const Cache& cache, const MatX<T>& dy) {
    const Eigen::Index n = dy.rows(), d = dy.cols();
    ggamma += (dy.cwiseProduct(cache.xhat)).colwise().sum().transpose();
    gbeta += dy.colwise().sum().transpose();
    MatX<T> dx(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Array<T, 1, Eigen::Dynamic> dxhat =
          dy.row(i).array() * gamma.transpose().array();
      const T m1 = dxhat.mean();
      const T m2 = (dxhat * cache.xhat.row(i).array()).mean();
      dx.row(i) = ((dxhat - m1 - cache.xhat.row(i).array() * m2) *
                   cache.inv_std(i))
                      .matrix();
    }
    return dx;
  }

  void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.add(prefix + ".gamma", gamma, ggamma);
    reg.add(prefix + ".beta", beta, gbeta);
  }
};

// ---------------------------------------------------------------------------
// Multi-head attention + post-norm transformer block.
// ---------------------------------------------------------------------------

template <typename T>
struct MultiHeadAttention {
  int dim = 0, heads = 1;
  Linear<T> wq, wk, wv, wo;

  void init(int d, int h, Rng& rng) {
    dim = d;
    heads = h;
    wq.init(d, d, rng);
    wk.init(d, d, rng);
    wv.init(d, d, rng);
    wo.init(d, d, rng);
  }

  struct Cache {
    MatX<T> xq, xkv;
    MatX<T> q, k, v;
    std::vector<MatX<T>> attn;  // per head, N x M
    MatX<T> concat;             // N x dim
  };

  MatX<T> forward(const MatX<T>& xq, const MatX<T>& xkv, Cache* cache) const {
    const int dk = dim / heads;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
    MatX<T> q = wq.forward(xq);
    MatX<T> k = wk.forward(xkv);
    MatX<T> v = wv.forward(xkv);
    MatX<T> concat(xq.rows(), dim);
    std::vector<MatX<T>> attn(heads);
    for (int h = 0; h < heads; ++h) {
      const auto qh = q.middleCols(h * dk, dk);
      const auto kh = k.middleCols(h * dk, dk);
      const auto vh = v.middleCols(h * dk, dk);
      MatX<T> scores = qh * kh.transpose() * scale;
      attn[h] = softmax_rows(scores);
      concat.middleCols(h * dk, dk) = attn[h] * vh;
    }
    MatX<T> y = wo.forward(concat);
    if (cache) {
      cache->xq = xq;
      cache->xkv = xkv;
      cache->q = std::move(q);
      cache->k = std::move(k);
      cache->v = std::move(v);
      cache->attn = std::move(attn);
      cache->concat = std::move(concat);
    }
    return y;
  }

  // Accumulates into *dxq and *dxkv (may alias for self-attention).
  void backward(const Cache& cache, const MatX<T>& dy, MatX<T>* dxq,
                MatX<T>* dxkv) {
    const int dk = dim / heads;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
    const MatX<T> dconcat = wo.backward(cache.concat, dy);
    MatX<T> dq(cache.q.rows(), dim), dkm(cache.k.rows(), dim),
        dvm(cache.v.rows(), dim);
    for (int h = 0; h < heads; ++h) {
      const auto qh = cache.q.middleCols(h * dk, dk);
      const auto kh = cache.k.middleCols(h * dk, dk);
      const auto vh = cache.v.middleCols(h * dk, dk);
      const auto doh = dconcat.middleCols(h * dk, dk);
      const MatX<T> da = doh * vh.transpose();
      dvm.middleCols(h * dk, dk) = cache.attn[h].transpose() * doh;
      const MatX<T> ds = softmax_rows_backward(cache.attn[h], da) * scale;
      dq.middleCols(h * dk, dk) = ds * kh;
      dkm.middleCols(h * dk, dk) = ds.transpose() * qh;
    }
    *dxq += wq.backward(cache.xq, dq);
    *dxkv += wk.backward(cache.xkv, dkm);
    *dxkv += wv.backward(cache.xkv, dvm);
  }

  void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    wq.register_params(reg, prefix + ".wq");
    wk.register_params(reg, prefix + ".wk");
    wv.register_params(reg, prefix + ".wv");
    wo.register_params(reg, prefix + ".wo");
  }
};

template <typename T>
struct TransformerBlock {
  MultiHeadAttention<T> attn;
  LayerNorm<T> ln1, ln2;
  Linear<T> ff1, ff2;

  void init(int dim, int heads, Rng& rng, int ff_mult = 2) {
    attn.init(dim, heads, rng);
    ln1.init(dim);
    ln2.init(dim);
    ff1.init(dim, dim * ff_mult, rng);
    ff2.init(dim * ff_mult, dim, rng);
  }

  struct Cache {
    typename MultiHeadAttention<T>::Cache attn;
    typename LayerNorm<T>::Cache ln1, ln2;
    MatX<T> res1;     // xq + attn out (input to ln1)
    MatX<T> h;        // ln1 output
    MatX<T> ff_hid;   // post-ReLU
    MatX<T> res2;     // h + ff out
  };

  MatX<T> forward(const MatX<T>& xq, const MatX<T>& xkv, Cache* c) const {
    MatX<T> a = attn.forward(xq, xkv, c ? &c->attn : nullptr);
    MatX<T> res1 = xq + a;
    Cache tmp;
    Cache* cc = c ? c : &tmp;
    cc->h = ln1.forward(res1, &cc->ln1);
    cc->ff_hid = relu(ff1.forward(cc->h));
    MatX<T> res2 = cc->h + ff2.forward(cc->ff_hid);
    MatX<T> y = ln2.forward(res2, &cc->ln2);
    if (c) {
      c->res1 = std::move(res1);
      c->res2 = std::move(res2);
    }
    return y;
  }

  void backward(Cache& c, const MatX<T>& dy, MatX<T>* dxq, MatX<T>* dxkv) {
    MatX<T> dres2 = ln2.backward(c.ln2, dy);
    MatX<T> dffh = relu_backward(c.ff_hid, ff2.backward(c.ff_hid, dres2));
    MatX<T> dh = dres2 + ff1.backward(c.h, dffh);
    MatX<T> dres1 = ln1.backward(c.ln1, dh);
    *dxq += dres1;
    attn.backward(c.attn, dres1, dxq, dxkv);
  }

  void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    attn.register_params(reg, prefix + ".attn");
    ln1.register_params(reg, prefix + ".ln1");
    ln2.register_params(reg, prefix + ".ln2");
    ff1.register_params(reg, prefix + ".ff1");
    ff2.register_params(reg, prefix + ".ff2");
  }
};

// DETR-style fixed 2D sinusoidal encoding for an h x w grid, dim channels.
template <typename T>
MatX<T> sinusoidal_grid_encoding(int h, int w, int dim) {
  MatX<T> pe = MatX<T>::Zero(static_cast<Eigen::Index>(h) * w, dim);
  const int quarter = dim / 4;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Eigen::Index row = static_cast<Eigen::Index>(y) * w + x;
      for (int i = 0; i < quarter; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / std::max(1, quarter));
        pe(row, 4 * i + 0) = static_cast<T>(std::sin(x * freq));
        pe(row, 4 * i + 1) = static_cast<T>(std::cos(x * freq));
        pe(row, 4 * i + 2) = static_cast<T>(std::sin(y * freq));
        pe(row, 4 * i + 3) = static_cast<T>(std::cos(y * freq));
      }
    }
  }
  return pe;
}

}  // namespace nerfloc
