#include "patnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "patnet/kernels.hpp"

namespace patnet {

namespace {

template <class T>
using Flat = std::map<std::string, std::vector<T>>;

struct Meta {
  BlockKind kind = BlockKind::pat_ch;
  int n = 1, c = 0, h = 1, w = 1;
  int cp = 0;
  int hidden = 0;  // pat_ch
  int heads = 1;   // pat_sf
  int cu() const { return c - cp; }
  int plane() const { return h * w; }
  std::size_t at(int ni, int ci, int p) const { return (static_cast<std::size_t>(ni) * c + ci) * plane() + p; }
};

std::vector<float> copy_values(std::span<const float> v) { return {v.begin(), v.end()}; }

void put_conv3(Flat<float>& flat, const std::optional<ConvParams>& conv3, int cp) {
  if (cp == 0) return;
  if (!conv3) throw ShapeError("block gradients: conv branch has channels but no parameters");
  if (conv3->groups != 1 || conv3->kernel() != 3 || conv3->padding != 1 || conv3->stride != 1 || conv3->bias) {
    throw ShapeError("block gradients: conv branch must be an unbiased 3x3, stride 1, pad 1, ungrouped conv");
  }
  if (conv3->out_channels() != cp || conv3->in_channels() != cp) {
    throw ShapeError("block gradients: conv branch must map c_p=" + std::to_string(cp) + " channels to c_p");
  }
  flat["conv3.weight"] = copy_values(conv3->weight.values());
}

void put_linear(Flat<float>& flat, const std::string& name, const Linear& l, int out, int in) {
  if (l.out_features() != out || l.in_features() != in) {
    throw ShapeError("block gradients: " + name + " must be " + std::to_string(out) + "x" + std::to_string(in) +
                     ", is " + std::to_string(l.out_features()) + "x" + std::to_string(l.in_features()));
  }
  flat[name + ".weight"] = l.weight.data;
  flat[name + ".bias"] = l.bias.empty() ? std::vector<float>(out, 0.0f) : l.bias;
}

Meta describe(const BlockParams& params, const PartialSplit& split, const Tensor4& x, Flat<float>& flat) {
  split.validate();
  if (x.c() != split.c_total) {
    throw ShapeError("block gradients: input channel dimension c=" + std::to_string(x.c()) +
                     " does not match split c_total=" + std::to_string(split.c_total));
  }
  Meta m;
  m.kind = kind_of(params);
  m.n = x.n(), m.c = x.c(), m.h = x.h(), m.w = x.w(), m.cp = split.c_p;
  const int cu = m.cu();
  if (const auto* p = std::get_if<PatChParams>(&params)) {
    put_conv3(flat, p->conv3, m.cp);
    if (cu > 0) {
      m.hidden = p->se_fc1.out_features();
      put_linear(flat, "se.fc1", p->se_fc1, m.hidden, 2 * cu);
      put_linear(flat, "se.fc2", p->se_fc2, cu, m.hidden);
    }
  } else if (const auto* p = std::get_if<PatSpParams>(&params)) {
    const ConvParams& map = p->map_conv;
    if (map.out_channels() != 1 || map.in_channels() != m.c || map.kernel() != 1) {
      throw ShapeError("block gradients: map conv must be 1x1 from c_total channels to 1");
    }
    flat["map.weight"] = copy_values(map.weight.values());
    flat["map.bias"] = map.bias ? *map.bias : std::vector<float>{0.0f};
  } else {
    const auto& sf = std::get<PatSfParams>(params);
    put_conv3(flat, sf.conv3, m.cp);
    if (sf.extent_h != m.h || sf.extent_w != m.w) {
      throw ShapeError("block gradients: spatial extent does not match the relative-position table");
    }
    m.heads = sf.heads;
    if (cu > 0) {
      if (sf.heads < 1 || cu % sf.heads != 0) throw ShapeError("block gradients: c_u not divisible by heads");
      for (const char* proj : {"q", "k", "v", "o"}) {
        const Linear& l = proj[0] == 'q' ? sf.wq : proj[0] == 'k' ? sf.wk : proj[0] == 'v' ? sf.wv : sf.wo;
        put_linear(flat, proj, l, cu, cu);
      }
      if (sf.rpe.size() != sf.rpe_size()) throw ShapeError("block gradients: relative-position table size mismatch");
      flat["rpe"] = sf.rpe;
    }
  }
  return m;
}

template <class T, class U>
Flat<T> convert(const Flat<U>& in) {
  Flat<T> out;
  for (const auto& [k, v] : in) out[k] = std::vector<T>(v.begin(), v.end());
  return out;
}

template <class T>
T hard_sigmoid(T v) {
  return std::clamp((v + T(3)) / T(6), T(0), T(1));
}

template <class T>
T logistic(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

// conv3x3 (pad 1) on channels [0, cp) of x into channels [0, cp) of y.
template <class T>
void conv_branch_forward(const Meta& m, const std::vector<T>& w, const std::vector<T>& x, std::vector<T>& y) {
  const int cp = m.cp;
  for (int n = 0; n < m.n; ++n)
    for (int o = 0; o < cp; ++o)
      for (int i = 0; i < m.h; ++i)
        for (int j = 0; j < m.w; ++j) {
          T acc = 0;
          for (int ic = 0; ic < cp; ++ic)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int ii = i + ky - 1, jj = j + kx - 1;
                if (ii < 0 || ii >= m.h || jj < 0 || jj >= m.w) continue;
                acc += w[((o * cp + ic) * 3 + ky) * 3 + kx] * x[m.at(n, ic, ii * m.w + jj)];
              }
          y[m.at(n, o, i * m.w + j)] = acc;
        }
}

template <class T>
void conv_branch_backward(const Meta& m, const std::vector<T>& w, const std::vector<T>& x, const std::vector<T>& up,
                          std::vector<T>& dw, std::vector<T>& dx) {
  const int cp = m.cp;
  for (int n = 0; n < m.n; ++n)
    for (int o = 0; o < cp; ++o)
      for (int i = 0; i < m.h; ++i)
        for (int j = 0; j < m.w; ++j) {
          const T g = up[m.at(n, o, i * m.w + j)];
          for (int ic = 0; ic < cp; ++ic)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int ii = i + ky - 1, jj = j + kx - 1;
                if (ii < 0 || ii >= m.h || jj < 0 || jj >= m.w) continue;
                const std::size_t xi = m.at(n, ic, ii * m.w + jj);
                const std::size_t wi = ((o * cp + ic) * 3 + ky) * 3 + kx;
                dw[wi] += g * x[xi];
                dx[xi] += g * w[wi];
              }
        }
}

// ---- PAT_ch ---------------------------------------------------------------

template <class T>
struct SeTrace {
  std::vector<T> mean, stddev, z, hpre, hid, gpre, gate;  // per sample, concatenated
};

template <class T>
SeTrace<T> se_forward(const Meta& m, const Flat<T>& p, const std::vector<T>& x) {
  const int cu = m.cu(), H = m.hidden, P = m.plane();
  SeTrace<T> t;
  t.mean.assign(m.n * cu, 0);
  t.stddev.assign(m.n * cu, 0);
  t.z.assign(m.n * 2 * cu, 0);
  t.hpre.assign(m.n * H, 0);
  t.hid.assign(m.n * H, 0);
  t.gpre.assign(m.n * cu, 0);
  t.gate.assign(m.n * cu, 0);
  const auto& w1 = p.at("se.fc1.weight");
  const auto& b1 = p.at("se.fc1.bias");
  const auto& w2 = p.at("se.fc2.weight");
  const auto& b2 = p.at("se.fc2.bias");
  for (int n = 0; n < m.n; ++n) {
    for (int u = 0; u < cu; ++u) {
      T s = 0;
      for (int q = 0; q < P; ++q) s += x[m.at(n, m.cp + u, q)];
      const T mu = s / T(P);
      T v = 0;
      for (int q = 0; q < P; ++q) {
        const T d = x[m.at(n, m.cp + u, q)] - mu;
        v += d * d;
      }
      t.mean[n * cu + u] = mu;
      t.stddev[n * cu + u] = std::sqrt(v / T(P) + T(kChannelStatEps));
      t.z[n * 2 * cu + u] = mu;
      t.z[n * 2 * cu + cu + u] = t.stddev[n * cu + u];
    }
    for (int k = 0; k < H; ++k) {
      T a = b1[k];
      for (int i = 0; i < 2 * cu; ++i) a += w1[k * 2 * cu + i] * t.z[n * 2 * cu + i];
      t.hpre[n * H + k] = a;
      t.hid[n * H + k] = a > 0 ? a : T(0);
    }
    for (int u = 0; u < cu; ++u) {
      T a = b2[u];
      for (int k = 0; k < H; ++k) a += w2[u * H + k] * t.hid[n * H + k];
      t.gpre[n * cu + u] = a;
      t.gate[n * cu + u] = logistic(a);
    }
  }
  return t;
}

template <class T>
std::vector<T> pat_ch_forward_t(const Meta& m, const Flat<T>& p, const std::vector<T>& x) {
  std::vector<T> y(x.size(), T(0));
  if (m.cp > 0) conv_branch_forward(m, p.at("conv3.weight"), x, y);
  if (m.cu() > 0) {
    const auto t = se_forward(m, p, x);
    for (int n = 0; n < m.n; ++n)
      for (int u = 0; u < m.cu(); ++u)
        for (int q = 0; q < m.plane(); ++q) {
          const auto i = m.at(n, m.cp + u, q);
          y[i] = x[i] * t.gate[n * m.cu() + u];
        }
  }
  return y;
}

template <class T>
BlockGradients<T> pat_ch_backward_t(const Meta& m, const Flat<T>& p, const std::vector<T>& x,
                                    const std::vector<T>& up) {
  BlockGradients<T> g;
  g.input.assign(x.size(), T(0));
  for (const auto& [k, v] : p) g.params[k].assign(v.size(), T(0));
  if (m.cp > 0) conv_branch_backward(m, p.at("conv3.weight"), x, up, g.params["conv3.weight"], g.input);
  const int cu = m.cu(), H = m.hidden, P = m.plane();
  if (cu == 0) return g;

  const auto t = se_forward(m, p, x);
  const auto& w1 = p.at("se.fc1.weight");
  const auto& w2 = p.at("se.fc2.weight");
  auto& dw1 = g.params["se.fc1.weight"];
  auto& db1 = g.params["se.fc1.bias"];
  auto& dw2 = g.params["se.fc2.weight"];
  auto& db2 = g.params["se.fc2.bias"];
  for (int n = 0; n < m.n; ++n) {
    std::vector<T> dgpre(cu), dhpre(H, T(0)), dz(2 * cu, T(0));
    for (int u = 0; u < cu; ++u) {
      const T gate = t.gate[n * cu + u];
      T dgate = 0;
      for (int q = 0; q < P; ++q) {
        const auto i = m.at(n, m.cp + u, q);
        dgate += up[i] * x[i];
        g.input[i] += up[i] * gate;
      }
      dgpre[u] = dgate * gate * (T(1) - gate);
    }
    for (int u = 0; u < cu; ++u) {
      db2[u] += dgpre[u];
      for (int k = 0; k < H; ++k) {
        dw2[u * H + k] += dgpre[u] * t.hid[n * H + k];
        dhpre[k] += dgpre[u] * w2[u * H + k];
      }
    }
    for (int k = 0; k < H; ++k) {
      if (!(t.hpre[n * H + k] > 0)) dhpre[k] = 0;
      db1[k] += dhpre[k];
      for (int i = 0; i < 2 * cu; ++i) {
        dw1[k * 2 * cu + i] += dhpre[k] * t.z[n * 2 * cu + i];
        dz[i] += dhpre[k] * w1[k * 2 * cu + i];
      }
    }
    for (int u = 0; u < cu; ++u) {
      const T mu = t.mean[n * cu + u];
      const T sd = t.stddev[n * cu + u];
      const T dmean = dz[u], dstd = dz[cu + u];
      for (int q = 0; q < P; ++q) {
        const auto i = m.at(n, m.cp + u, q);
        g.input[i] += dmean / T(P) + dstd * (x[i] - mu) / (T(P) * sd);
      }
    }
  }
  return g;
}

// ---- PAT_sp ---------------------------------------------------------------

template <class T>
std::vector<T> gate_logits(const Meta& m, const Flat<T>& p, const std::vector<T>& x) {
  const auto& wm = p.at("map.weight");
  const T bm = p.at("map.bias")[0];
  std::vector<T> pre(m.n * m.plane());
  for (int n = 0; n < m.n; ++n)
    for (int q = 0; q < m.plane(); ++q) {
      T a = bm;
      for (int c = 0; c < m.c; ++c) a += wm[c] * x[m.at(n, c, q)];
      pre[n * m.plane() + q] = a;
    }
  return pre;
}

template <class T>
std::vector<T> pat_sp_forward_t(const Meta& m, const Flat<T>& p, const std::vector<T>& x) {
  const auto pre = gate_logits(m, p, x);
  std::vector<T> y = x;
  for (int n = 0; n < m.n; ++n)
    for (int c = m.cp; c < m.c; ++c)
      for (int q = 0; q < m.plane(); ++q) y[m.at(n, c, q)] *= hard_sigmoid(pre[n * m.plane() + q]);
  return y;
}

template <class T>
BlockGradients<T> pat_sp_backward_t(const Meta& m, const Flat<T>& p, const std::vector<T>& x,
                                    const std::vector<T>& up) {
  BlockGradients<T> g;
  g.input.assign(x.size(), T(0));
  for (const auto& [k, v] : p) g.params[k].assign(v.size(), T(0));
  const auto pre = gate_logits(m, p, x);
  const auto& wm = p.at("map.weight");
  auto& dwm = g.params["map.weight"];
  auto& dbm = g.params["map.bias"];
  for (int n = 0; n < m.n; ++n)
    for (int q = 0; q < m.plane(); ++q) {
      const T z = pre[n * m.plane() + q];
      const T a = hard_sigmoid(z);
      T da = 0;
      for (int c = 0; c < m.c; ++c) {
        const auto i = m.at(n, c, q);
        if (c < m.cp) {
          g.input[i] += up[i];
        } else {
          g.input[i] += up[i] * a;
          da += up[i] * x[i];
        }
      }
      const T dz = (z > T(-3) && z < T(3)) ? da / T(6) : T(0);
      dbm[0] += dz;
      for (int c = 0; c < m.c; ++c) {
        const auto i = m.at(n, c, q);
        dwm[c] += dz * x[i];
        g.input[i] += dz * wm[c];
      }
    }
  return g;
}

// ---- PAT_sf ---------------------------------------------------------------

template <class T>
struct SfTrace {
  // Token-major per sample: [token][feature].
  std::vector<T> X, Q, K, V, O;
  std::vector<T> A;  // [head][i][j]
};

template <class T>
std::vector<T> project(const std::vector<T>& in, int tokens, int dim, const std::vector<T>& w, const std::vector<T>& b) {
  std::vector<T> out(static_cast<std::size_t>(tokens) * dim);
  for (int t = 0; t < tokens; ++t)
    for (int o = 0; o < dim; ++o) {
      T a = b[o];
      for (int i = 0; i < dim; ++i) a += w[o * dim + i] * in[t * dim + i];
      out[t * dim + o] = a;
    }
  return out;
}

template <class T>
SfTrace<T> sf_forward_sample(const Meta& m, const Flat<T>& p, const std::vector<T>& x, int n) {
  const int cu = m.cu(), T_ = m.plane(), D = cu / m.heads;
  SfTrace<T> t;
  t.X.resize(static_cast<std::size_t>(T_) * cu);
  for (int q = 0; q < T_; ++q)
    for (int c = 0; c < cu; ++c) t.X[q * cu + c] = x[m.at(n, m.cp + c, q)];
  t.Q = project(t.X, T_, cu, p.at("q.weight"), p.at("q.bias"));
  t.K = project(t.X, T_, cu, p.at("k.weight"), p.at("k.bias"));
  t.V = project(t.X, T_, cu, p.at("v.weight"), p.at("v.bias"));
  t.O.assign(static_cast<std::size_t>(T_) * cu, T(0));
  t.A.assign(static_cast<std::size_t>(m.heads) * T_ * T_, T(0));
  const auto& rpe = p.at("rpe");
  const int span_h = 2 * m.h - 1, span_w = 2 * m.w - 1;
  const T scale = T(1) / std::sqrt(T(D));
  for (int hd = 0; hd < m.heads; ++hd) {
    for (int i = 0; i < T_; ++i) {
      T* row = &t.A[(static_cast<std::size_t>(hd) * T_ + i) * T_];
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j < T_; ++j) {
        T s = 0;
        for (int d = 0; d < D; ++d) s += t.Q[i * cu + hd * D + d] * t.K[j * cu + hd * D + d];
        const int dy = i / m.w - j / m.w + m.h - 1;
        const int dx = i % m.w - j % m.w + m.w - 1;
        row[j] = s * scale + rpe[(static_cast<std::size_t>(hd) * span_h + dy) * span_w + dx];
        mx = std::max(mx, row[j]);
      }
      T sum = 0;
      for (int j = 0; j < T_; ++j) sum += (row[j] = std::exp(row[j] - mx));
      for (int j = 0; j < T_; ++j) row[j] /= sum;
      for (int d = 0; d < D; ++d) {
        T a = 0;
        for (int j = 0; j < T_; ++j) a += row[j] * t.V[j * cu + hd * D + d];
        t.O[i * cu + hd * D + d] = a;
      }
    }
  }
  return t;
}

template <class T>
std::vector<T> pat_sf_forward_t(const Meta& m, const Flat<T>& p, const std::vector<T>& x) {
  std::vector<T> y(x.size(), T(0));
  if (m.cp > 0) conv_branch_forward(m, p.at("conv3.weight"), x, y);
  const int cu = m.cu();
  if (cu == 0) return y;
  for (int n = 0; n < m.n; ++n) {
    const auto t = sf_forward_sample(m, p, x, n);
    const auto Y = project(t.O, m.plane(), cu, p.at("o.weight"), p.at("o.bias"));
    for (int q = 0; q < m.plane(); ++q)
      for (int c = 0; c < cu; ++c) y[m.at(n, m.cp + c, q)] = Y[q * cu + c];
  }
  return y;
}

// dW += dOutᵀ In, db += Σ dOut, dIn += dOut W for a per-token linear map.
template <class T>
void project_backward(const std::vector<T>& in, const std::vector<T>& dout, int tokens, int dim,
                      const std::vector<T>& w, std::vector<T>& dw, std::vector<T>& db, std::vector<T>& din) {
  for (int t = 0; t < tokens; ++t)
    for (int o = 0; o < dim; ++o) {
      const T g = dout[t * dim + o];
      db[o] += g;
      for (int i = 0; i < dim; ++i) {
        dw[o * dim + i] += g * in[t * dim + i];
        din[t * dim + i] += g * w[o * dim + i];
      }
    }
}

template <class T>
BlockGradients<T> pat_sf_backward_t(const Meta& m, const Flat<T>& p, const std::vector<T>& x,
                                    const std::vector<T>& up) {
  BlockGradients<T> g;
  g.input.assign(x.size(), T(0));
  for (const auto& [k, v] : p) g.params[k].assign(v.size(), T(0));
  if (m.cp > 0) conv_branch_backward(m, p.at("conv3.weight"), x, up, g.params["conv3.weight"], g.input);
  const int cu = m.cu();
  if (cu == 0) return g;
  const int T_ = m.plane(), D = cu / m.heads;
  const int span_h = 2 * m.h - 1, span_w = 2 * m.w - 1;
  const T scale = T(1) / std::sqrt(T(D));
  auto& drpe = g.params["rpe"];

  for (int n = 0; n < m.n; ++n) {
    const auto t = sf_forward_sample(m, p, x, n);
    std::vector<T> dY(static_cast<std::size_t>(T_) * cu);
    for (int q = 0; q < T_; ++q)
      for (int c = 0; c < cu; ++c) dY[q * cu + c] = up[m.at(n, m.cp + c, q)];
    std::vector<T> dO(dY.size(), T(0)), dQ(dY.size(), T(0)), dK(dY.size(), T(0)), dV(dY.size(), T(0)),
        dX(dY.size(), T(0));
    project_backward(t.O, dY, T_, cu, p.at("o.weight"), g.params["o.weight"], g.params["o.bias"], dO);

    for (int hd = 0; hd < m.heads; ++hd) {
      for (int i = 0; i < T_; ++i) {
        const T* a = &t.A[(static_cast<std::size_t>(hd) * T_ + i) * T_];
        std::vector<T> da(T_, T(0));
        for (int j = 0; j < T_; ++j)
          for (int d = 0; d < D; ++d) {
            da[j] += dO[i * cu + hd * D + d] * t.V[j * cu + hd * D + d];
            dV[j * cu + hd * D + d] += a[j] * dO[i * cu + hd * D + d];
          }
        T dot = 0;
        for (int j = 0; j < T_; ++j) dot += da[j] * a[j];
        for (int j = 0; j < T_; ++j) {
          const T ds = a[j] * (da[j] - dot);
          const int dy = i / m.w - j / m.w + m.h - 1;
          const int dx = i % m.w - j % m.w + m.w - 1;
          drpe[(static_cast<std::size_t>(hd) * span_h + dy) * span_w + dx] += ds;
          for (int d = 0; d < D; ++d) {
            dQ[i * cu + hd * D + d] += ds * t.K[j * cu + hd * D + d] * scale;
            dK[j * cu + hd * D + d] += ds * t.Q[i * cu + hd * D + d] * scale;
          }
        }
      }
    }
    project_backward(t.X, dQ, T_, cu, p.at("q.weight"), g.params["q.weight"], g.params["q.bias"], dX);
    project_backward(t.X, dK, T_, cu, p.at("k.weight"), g.params["k.weight"], g.params["k.bias"], dX);
    project_backward(t.X, dV, T_, cu, p.at("v.weight"), g.params["v.weight"], g.params["v.bias"], dX);
    for (int q = 0; q < T_; ++q)
      for (int c = 0; c < cu; ++c) g.input[m.at(n, m.cp + c, q)] += dX[q * cu + c];
  }
  return g;
}

// ---- dispatch --------------------------------------------------------------

template <class T>
std::vector<T> forward_t(const Meta& m, const Flat<T>& p, const std::vector<T>& x) {
  switch (m.kind) {
    case BlockKind::pat_ch: return pat_ch_forward_t(m, p, x);
    case BlockKind::pat_sp: return pat_sp_forward_t(m, p, x);
    case BlockKind::pat_sf: return pat_sf_forward_t(m, p, x);
  }
  return {};
}

template <class T>
BlockGradients<T> backward_t(const Meta& m, const Flat<T>& p, const std::vector<T>& x, const std::vector<T>& up) {
  switch (m.kind) {
    case BlockKind::pat_ch: return pat_ch_backward_t(m, p, x, up);
    case BlockKind::pat_sp: return pat_sp_backward_t(m, p, x, up);
    case BlockKind::pat_sf: return pat_sf_backward_t(m, p, x, up);
  }
  return {};
}

template <class T>
BlockGradients<T> vjp_impl(const BlockParams& params, const PartialSplit& split, const Tensor4& x,
                           const Tensor4& upstream) {
  if (!upstream.same_shape(x)) {
    throw ShapeError("block_vjp: upstream shape " + upstream.shape_string() + " differs from input shape " +
                     x.shape_string());
  }
  Flat<float> flat;
  const Meta m = describe(params, split, x, flat);
  const std::vector<T> xs(x.values().begin(), x.values().end());
  const std::vector<T> us(upstream.values().begin(), upstream.values().end());
  return backward_t<T>(m, convert<T>(flat), xs, us);
}

// Pre-activation values sitting next to a non-differentiable point.
double nearest_kink_distance(const Meta& m, const Flat<double>& p, const std::vector<double>& x) {
  double best = std::numeric_limits<double>::infinity();
  if (m.kind == BlockKind::pat_ch && m.cu() > 0) {
    for (double v : se_forward(m, p, x).hpre) best = std::min(best, std::fabs(v));
  }
  if (m.kind == BlockKind::pat_sp) {
    for (double v : gate_logits(m, p, x)) best = std::min({best, std::fabs(v - 3.0), std::fabs(v + 3.0)});
  }
  return best;
}

}  // namespace

std::string_view to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::pat_ch: return "pat_ch";
    case BlockKind::pat_sp: return "pat_sp";
    case BlockKind::pat_sf: return "pat_sf";
  }
  return "?";
}

BlockKind parse_block_kind(std::string_view name) {
  if (name == "pat_ch") return BlockKind::pat_ch;
  if (name == "pat_sp") return BlockKind::pat_sp;
  if (name == "pat_sf") return BlockKind::pat_sf;
  throw std::invalid_argument("unknown block kind '" + std::string(name) + "'; valid kinds: pat_ch, pat_sp, pat_sf");
}

BlockKind kind_of(const BlockParams& params) {
  if (std::holds_alternative<PatChParams>(params)) return BlockKind::pat_ch;
  if (std::holds_alternative<PatSpParams>(params)) return BlockKind::pat_sp;
  return BlockKind::pat_sf;
}

BlockGradients<float> block_vjp(const BlockParams& params, const PartialSplit& split, const Tensor4& x,
                                const Tensor4& upstream) {
  return vjp_impl<float>(params, split, x, upstream);
}

BlockGradients<double> block_vjp_f64(const BlockParams& params, const PartialSplit& split, const Tensor4& x,
                                     const Tensor4& upstream) {
  return vjp_impl<double>(params, split, x, upstream);
}

Tensor4 block_forward_reference(const BlockParams& params, const PartialSplit& split, const Tensor4& x) {
  Flat<float> flat;
  const Meta m = describe(params, split, x, flat);
  const std::vector<double> xs(x.values().begin(), x.values().end());
  const auto y = forward_t<double>(m, convert<double>(flat), xs);
  return Tensor4(x.n(), x.c(), x.h(), x.w(), std::vector<float>(y.begin(), y.end()));
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: step h must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double plus = f(probe);
    probe[i] = orig - h;
    const double minus = f(probe);
    probe[i] = orig;
    grad[i] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

std::vector<double> conv2d_f64(const ConvGeometry& g, std::span<const double> x, std::span<const double> weight) {
  const int oh = g.out_h(), ow = g.out_w();
  std::vector<double> y(static_cast<std::size_t>(g.n) * g.c_out * oh * ow, 0.0);
  for (int n = 0; n < g.n; ++n)
    for (int o = 0; o < g.c_out; ++o)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (int c = 0; c < g.c_in; ++c)
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int ii = i * g.stride + ky - g.padding, jj = j * g.stride + kx - g.padding;
                if (ii < 0 || ii >= g.h || jj < 0 || jj >= g.w) continue;
                acc += weight[((o * g.c_in + c) * g.kernel + ky) * g.kernel + kx] *
                       x[((n * g.c_in + c) * g.h + ii) * g.w + jj];
              }
          y[((n * g.c_out + o) * oh + i) * ow + j] = acc;
        }
  return y;
}

std::vector<double> conv2d_input_vjp_f64(const ConvGeometry& g, std::span<const double> weight,
                                         std::span<const double> upstream) {
  const int oh = g.out_h(), ow = g.out_w();
  std::vector<double> dx(static_cast<std::size_t>(g.n) * g.c_in * g.h * g.w, 0.0);
  for (int n = 0; n < g.n; ++n)
    for (int o = 0; o < g.c_out; ++o)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          const double u = upstream[((n * g.c_out + o) * oh + i) * ow + j];
          for (int c = 0; c < g.c_in; ++c)
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int ii = i * g.stride + ky - g.padding, jj = j * g.stride + kx - g.padding;
                if (ii < 0 || ii >= g.h || jj < 0 || jj >= g.w) continue;
                dx[((n * g.c_in + c) * g.h + ii) * g.w + jj] +=
                    u * weight[((o * g.c_in + c) * g.kernel + ky) * g.kernel + kx];
              }
        }
  return dx;
}

std::vector<double> softmax_rows_vjp(int rows, int cols, std::span<const double> y, std::span<const double> g) {
  std::vector<double> out(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    double dot = 0.0;
    for (int c = 0; c < cols; ++c) dot += y[r * cols + c] * g[r * cols + c];
    for (int c = 0; c < cols; ++c) out[r * cols + c] = y[r * cols + c] * (g[r * cols + c] - dot);
  }
  return out;
}

ProbeSizes default_probe_sizes(BlockKind kind) {
  ProbeSizes s;
  if (kind == BlockKind::pat_sf) s.height = s.width = 3;
  return s;
}

double GradReport::worst() const {
  double w = 0.0;
  for (const auto& e : entries) w = std::max(w, e.max_rel_error);
  return w;
}

namespace {

Linear random_linear(std::mt19937_64& rng, int out, int in, float bias_scale) {
  std::normal_distribution<float> normal(0.0f, 1.0f);
  Linear l;
  l.weight = Matrix(out, in);
  const float s = 1.0f / std::sqrt(static_cast<float>(in));
  for (float& v : l.weight.data) v = normal(rng) * s;
  l.bias.resize(out);
  for (float& v : l.bias) v = normal(rng) * bias_scale;
  return l;
}

ConvParams random_conv3(std::mt19937_64& rng, int cp) {
  std::normal_distribution<float> normal(0.0f, 1.0f);
  ConvParams c;
  c.weight = Tensor4(cp, cp, 3, 3);
  const float s = 1.0f / std::sqrt(static_cast<float>(cp * 9));
  for (float& v : c.weight.values()) v = normal(rng) * s;
  c.padding = 1;
  return c;
}

BlockParams random_block(BlockKind kind, std::mt19937_64& rng, const ProbeSizes& sz, const PartialSplit& split) {
  const int cp = split.c_p, cu = split.c_u();
  switch (kind) {
    case BlockKind::pat_ch: {
      PatChParams p;
      if (cp > 0) p.conv3 = random_conv3(rng, cp);
      const int hidden = se_hidden_width(cu, 1);
      p.se_fc1 = random_linear(rng, hidden, 2 * cu, 0.5f);
      p.se_fc2 = random_linear(rng, cu, hidden, 0.5f);
      return p;
    }
    case BlockKind::pat_sp: {
      std::normal_distribution<float> normal(0.0f, 1.0f);
      PatSpParams p;
      p.map_conv.weight = Tensor4(1, sz.channels, 1, 1);
      for (float& v : p.map_conv.weight.values()) v = normal(rng);
      p.map_conv.bias = std::vector<float>{normal(rng)};
      return p;
    }
    case BlockKind::pat_sf: {
      std::normal_distribution<float> normal(0.0f, 1.0f);
      PatSfParams p;
      if (cp > 0) p.conv3 = random_conv3(rng, cp);
      p.heads = sz.heads;
      p.extent_h = sz.height;
      p.extent_w = sz.width;
      p.wq = random_linear(rng, cu, cu, 0.1f);
      p.wk = random_linear(rng, cu, cu, 0.1f);
      p.wv = random_linear(rng, cu, cu, 0.1f);
      p.wo = random_linear(rng, cu, cu, 0.1f);
      p.rpe.resize(p.rpe_size());
      for (float& v : p.rpe) v = normal(rng) * 0.5f;
      return p;
    }
  }
  throw std::logic_error("unreachable");
}

}  // namespace

GradReport gradcheck_block(BlockKind kind, std::uint64_t seed, const ProbeSizes& sizes,
                           const GradCheckOptions& options) {
  if (sizes.n < 1 || sizes.n > 8 || sizes.channels < 1 || sizes.channels > 8 || sizes.height < 1 ||
      sizes.height > 8 || sizes.width < 1 || sizes.width > 8) {
    throw std::invalid_argument("gradcheck_block: probe dimensions must lie in [1, 8]");
  }
  GradReport report;
  report.kind = kind;
  report.seed = seed;
  report.sizes = sizes;
  report.float64 = options.float64;
  report.fault_injected = options.inject_fault;
  report.tolerance = options.tolerance > 0 ? options.tolerance : (options.float64 ? 1e-6 : 1e-3);
  report.step = options.step > 0 ? options.step : (options.float64 ? 1e-5 : 1e-3);

  const PartialSplit split = PartialSplit::from_ratio(sizes.channels, 1, 4);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);

  BlockParams params;
  Tensor4 x, up;
  Meta meta;
  Flat<double> flat;
  for (int attempt = 0;; ++attempt) {
    if (attempt > 10000) throw std::runtime_error("gradcheck_block: could not sample a probe away from kinks");
    params = random_block(kind, rng, sizes, split);
    x = Tensor4(sizes.n, sizes.channels, sizes.height, sizes.width);
    for (float& v : x.values()) v = normal(rng);
    up = Tensor4::zeros_like(x);
    for (float& v : up.values()) v = normal(rng);
    Flat<float> f32;
    meta = describe(params, split, x, f32);
    flat = convert<double>(f32);
    const std::vector<double> xs(x.values().begin(), x.values().end());
    if (nearest_kink_distance(meta, flat, xs) >= options.kink_margin) break;
    ++report.rejected_samples;
  }

  const std::vector<double> xs(x.values().begin(), x.values().end());
  const std::vector<double> us(up.values().begin(), up.values().end());
  auto objective = [&](const Flat<double>& p, const std::vector<double>& in) {
    const auto y = forward_t<double>(meta, p, in);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * us[i];
    return s;
  };

  // Analytic gradients, widened to double for comparison.
  BlockGradients<double> analytic;
  if (options.float64) {
    analytic = backward_t<double>(meta, flat, xs, us);
  } else {
    const auto g = backward_t<float>(meta, convert<float>(flat), std::vector<float>(xs.begin(), xs.end()),
                                     std::vector<float>(us.begin(), us.end()));
    analytic.input.assign(g.input.begin(), g.input.end());
    analytic.params = convert<double>(g.params);
  }
  if (options.inject_fault) {
    double* target = nullptr;
    auto consider = [&](std::vector<double>& v) {
      for (double& e : v) {
        if (!target || std::fabs(e) > std::fabs(*target)) target = &e;
      }
    };
    consider(analytic.input);
    for (auto& [k, v] : analytic.params) consider(v);
    if (target) *target *= 1.1;
  }

  auto rel_error = [](const std::vector<double>& a, const std::vector<double>& n) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      worst = std::max(worst, std::fabs(a[i] - n[i]) / std::max(1.0, std::fabs(n[i])));
    }
    return worst;
  };

  const auto num_x = finite_diff_grad([&](std::span<const double> v) {
    return objective(flat, std::vector<double>(v.begin(), v.end()));
  }, xs, report.step);
  report.entries.push_back({"input", xs.size(), rel_error(analytic.input, num_x)});

  for (const auto& [name, values] : flat) {
    const auto num = finite_diff_grad([&](std::span<const double> v) {
      Flat<double> p = flat;
      p[name].assign(v.begin(), v.end());
      return objective(p, xs);
    }, values, report.step);
    report.entries.push_back({name, values.size(), rel_error(analytic.params.at(name), num)});
  }

  report.pass = true;
  for (const auto& e : report.entries) {
    if (!(e.max_rel_error < report.tolerance)) report.pass = false;
  }
  return report;
}

}  // namespace patnet
