#pragma once

#include "sdsgan/core.hpp"

#include <cmath>
#include <vector>

namespace sdsgan::nn {

/// Location of one parameter tensor inside a flat parameter vector.
struct Slice {
  Index offset = 0;
  Index rows = 0;
  Index cols = 0;
  Index size() const { return rows * cols; }
};

/// Hands out consecutive slices while a network lays out its parameters.
struct Layout {
  Index size = 0;
  Slice add(Index rows, Index cols) {
    Slice s{size, rows, cols};
    size += rows * cols;
    return s;
  }
};

template <typename Scalar>
Eigen::Map<const MatrixR<Scalar>> view(const VectorX<Scalar>& p, const Slice& s) {
  return {p.data() + s.offset, s.rows, s.cols};
}

template <typename Scalar>
Eigen::Map<MatrixR<Scalar>> view(VectorX<Scalar>& p, const Slice& s) {
  return {p.data() + s.offset, s.rows, s.cols};
}

/// Square convolution, stride 1, zero "same" padding.
struct Conv2d {
  int in = 0;
  int out = 0;
  int kernel = 3;
  Slice weight;  // out x (in * kernel * kernel)
  Slice bias;    // out x 1

  static Conv2d make(Layout& layout, int in, int out, int kernel = 3) {
    Conv2d c;
    c.in = in;
    c.out = out;
    c.kernel = kernel;
    c.weight = layout.add(out, Index(in) * kernel * kernel);
    c.bias = layout.add(out, 1);
    return c;
  }

  template <typename Scalar>
  void init(VectorX<Scalar>& params, Rng& rng, double gain = std::sqrt(2.0)) const {
    const double std = gain / std::sqrt(double(in) * kernel * kernel);
    auto w = view(params, weight);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = Scalar(std * rng.normal());
    view(params, bias).setZero();
  }
};

struct Linear {
  int in = 0;
  int out = 0;
  Slice weight;  // out x in
  Slice bias;

  static Linear make(Layout& layout, int in, int out) {
    Linear l;
    l.in = in;
    l.out = out;
    l.weight = layout.add(out, in);
    l.bias = layout.add(out, 1);
    return l;
  }

  template <typename Scalar>
  void init(VectorX<Scalar>& params, Rng& rng, double gain = 1.0) const {
    const double std = gain / std::sqrt(double(in));
    auto w = view(params, weight);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = Scalar(std * rng.normal());
    view(params, bias).setZero();
  }
};

/// im2col for a k x k window with zero padding: (C*k*k) x (H*W).
template <typename Scalar>
MatrixR<Scalar> im2col(const FeatureMap<Scalar>& x, int kernel) {
  const int h = x.height, w = x.width, pad = kernel / 2;
  MatrixR<Scalar> cols = MatrixR<Scalar>::Zero(Index(x.channels()) * kernel * kernel, x.pixels());
  for (int c = 0; c < x.channels(); ++c)
    for (int ky = 0; ky < kernel; ++ky)
      for (int kx = 0; kx < kernel; ++kx) {
        Scalar* row = cols.row((Index(c) * kernel + ky) * kernel + kx).data();
        const Scalar* src = x.planes.row(c).data();
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - pad;
            if (sx < 0 || sx >= w) continue;
            row[Index(y) * w + xx] = src[Index(sy) * w + sx];
          }
        }
      }
  return cols;
}

template <typename Scalar>
FeatureMap<Scalar> col2im(const MatrixR<Scalar>& cols, int channels, int h, int w, int kernel) {
  const int pad = kernel / 2;
  FeatureMap<Scalar> x(channels, h, w);
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < kernel; ++ky)
      for (int kx = 0; kx < kernel; ++kx) {
        const Scalar* row = cols.row((Index(c) * kernel + ky) * kernel + kx).data();
        Scalar* dst = x.planes.row(c).data();
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          for (int xx = 0; xx < w; ++xx) {
            const int sx = xx + kx - pad;
            if (sx < 0 || sx >= w) continue;
            dst[Index(sy) * w + sx] += row[Index(y) * w + xx];
          }
        }
      }
  return x;
}

/// y = W * im2col(x) (+ b). `cols` receives the im2col matrix for backward.
template <typename Scalar>
FeatureMap<Scalar> conv_forward(const Conv2d& conv, const VectorX<Scalar>& params, const FeatureMap<Scalar>& x,
                                MatrixR<Scalar>& cols, bool with_bias = true) {
  if (x.channels() != conv.in) throw ShapeError("conv: expected " + std::to_string(conv.in) + " input channels");
  cols = im2col(x, conv.kernel);
  FeatureMap<Scalar> y;
  y.height = x.height;
  y.width = x.width;
  y.planes.noalias() = view(params, conv.weight) * cols;
  if (with_bias) y.planes.colwise() += view(params, conv.bias).col(0);
  return y;
}

/// Accumulates dL/dW, dL/db into `grad` (when non-null) and returns dL/dx (when wanted).
template <typename Scalar>
FeatureMap<Scalar> conv_backward(const Conv2d& conv, const VectorX<Scalar>& params, const MatrixR<Scalar>& cols,
                                 const FeatureMap<Scalar>& gy, VectorX<Scalar>* grad, bool want_input_grad,
                                 Scalar scale = Scalar(1)) {
  if (grad) {
    view(*grad, conv.weight).noalias() += scale * gy.planes * cols.transpose();
    view(*grad, conv.bias).col(0) += scale * gy.planes.rowwise().sum();
  }
  if (!want_input_grad) return {};
  MatrixR<Scalar> gcols = view(params, conv.weight).transpose() * gy.planes;
  if (scale != Scalar(1)) gcols *= scale;
  return col2im(gcols, conv.in, gy.height, gy.width, conv.kernel);
}

template <typename Scalar>
FeatureMap<Scalar> leaky_relu(const FeatureMap<Scalar>& x, Scalar slope) {
  FeatureMap<Scalar> y = x;
  y.planes = x.planes.unaryExpr([slope](Scalar v) { return v > Scalar(0) ? v : slope * v; });
  return y;
}

// Multiplies g by the leaky-relu derivative evaluated at the pre-activation z.
template <typename Scalar>
FeatureMap<Scalar> leaky_relu_backward(const FeatureMap<Scalar>& z, const FeatureMap<Scalar>& g, Scalar slope) {
  FeatureMap<Scalar> out = g;
  out.planes = g.planes.binaryExpr(z.planes, [slope](Scalar gv, Scalar zv) { return zv > Scalar(0) ? gv : slope * gv; });
  return out;
}

template <typename Scalar>
FeatureMap<Scalar> silu(const FeatureMap<Scalar>& x) {
  FeatureMap<Scalar> y = x;
  y.planes = x.planes.unaryExpr([](Scalar v) { return v * sigmoid(v); });
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> silu_backward(const FeatureMap<Scalar>& z, const FeatureMap<Scalar>& g) {
  FeatureMap<Scalar> out = g;
  out.planes = g.planes.binaryExpr(z.planes, [](Scalar gv, Scalar zv) {
    const Scalar s = sigmoid(zv);
    return gv * s * (Scalar(1) + zv * (Scalar(1) - s));
  });
  return out;
}

template <typename Scalar>
VectorX<Scalar> silu(const VectorX<Scalar>& x) {
  return x.unaryExpr([](Scalar v) { return v * sigmoid(v); });
}

template <typename Scalar>
VectorX<Scalar> silu_backward(const VectorX<Scalar>& z, const VectorX<Scalar>& g) {
  return g.binaryExpr(z, [](Scalar gv, Scalar zv) {
    const Scalar s = sigmoid(zv);
    return gv * s * (Scalar(1) + zv * (Scalar(1) - s));
  });
}

template <typename Scalar>
FeatureMap<Scalar> avg_pool2(const FeatureMap<Scalar>& x) {
  if (x.height % 2 || x.width % 2) throw ShapeError("avg_pool2 needs even spatial size");
  const int h = x.height / 2, w = x.width / 2;
  FeatureMap<Scalar> y(x.channels(), h, w);
  for (int c = 0; c < x.channels(); ++c)
    for (int yy = 0; yy < h; ++yy)
      for (int xx = 0; xx < w; ++xx)
        y.at(c, yy, xx) = Scalar(0.25) * (x.at(c, 2 * yy, 2 * xx) + x.at(c, 2 * yy, 2 * xx + 1) +
                                          x.at(c, 2 * yy + 1, 2 * xx) + x.at(c, 2 * yy + 1, 2 * xx + 1));
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> avg_pool2_backward(const FeatureMap<Scalar>& gy) {
  FeatureMap<Scalar> gx(gy.channels(), gy.height * 2, gy.width * 2);
  for (int c = 0; c < gy.channels(); ++c)
    for (int y = 0; y < gx.height; ++y)
      for (int x = 0; x < gx.width; ++x) gx.at(c, y, x) = Scalar(0.25) * gy.at(c, y / 2, x / 2);
  return gx;
}

template <typename Scalar>
FeatureMap<Scalar> upsample2(const FeatureMap<Scalar>& x) {
  FeatureMap<Scalar> y(x.channels(), x.height * 2, x.width * 2);
  for (int c = 0; c < x.channels(); ++c)
    for (int yy = 0; yy < y.height; ++yy)
      for (int xx = 0; xx < y.width; ++xx) y.at(c, yy, xx) = x.at(c, yy / 2, xx / 2);
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> upsample2_backward(const FeatureMap<Scalar>& gy) {
  FeatureMap<Scalar> gx(gy.channels(), gy.height / 2, gy.width / 2);
  for (int c = 0; c < gy.channels(); ++c)
    for (int y = 0; y < gy.height; ++y)
      for (int x = 0; x < gy.width; ++x) gx.at(c, y / 2, x / 2) += gy.at(c, y, x);
  return gx;
}

template <typename Scalar>
FeatureMap<Scalar> concat_channels(const FeatureMap<Scalar>& a, const FeatureMap<Scalar>& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("concat_channels: spatial mismatch");
  FeatureMap<Scalar> out(a.channels() + b.channels(), a.height, a.width);
  out.planes.topRows(a.channels()) = a.planes;
  out.planes.bottomRows(b.channels()) = b.planes;
  return out;
}

template <typename Scalar>
FeatureMap<Scalar> take_channels(const FeatureMap<Scalar>& x, int first, int count) {
  FeatureMap<Scalar> out;
  out.height = x.height;
  out.width = x.width;
  out.planes = x.planes.middleRows(first, count);
  return out;
}

/// Sinusoidal embedding of a scalar position.
template <typename Scalar>
VectorX<Scalar> sinusoidal_embedding(double position, int dim, double max_period = 1000.0) {
  VectorX<Scalar> e(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(max_period) * i / std::max(1, half));
    e[i] = Scalar(std::sin(position * freq));
    e[half + i] = Scalar(std::cos(position * freq));
  }
  if (dim % 2) e[dim - 1] = Scalar(0);
  return e;
}

/// Adam with bias correction. Moments and step count are plain state so they
/// serialize with the run.
template <typename Scalar>
struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  std::int64_t step = 0;
  VectorX<Scalar> m;
  VectorX<Scalar> v;

  void reset(Index size) {
    step = 0;
    m = VectorX<Scalar>::Zero(size);
    v = VectorX<Scalar>::Zero(size);
  }

  void update(VectorX<Scalar>& params, const VectorX<Scalar>& grad) {
    if (m.size() != params.size()) reset(params.size());
    if (grad.size() != params.size()) throw ShapeError("Adam: gradient size mismatch");
    ++step;
    const Scalar b1 = Scalar(beta1), b2 = Scalar(beta2);
    m = b1 * m + (Scalar(1) - b1) * grad;
    v = b2 * v + (Scalar(1) - b2) * grad.cwiseAbs2();
    const Scalar c1 = Scalar(1.0 - std::pow(beta1, double(step)));
    const Scalar c2 = Scalar(1.0 - std::pow(beta2, double(step)));
    const Scalar rate = Scalar(lr);
    params.array() -= rate * (m.array() / c1) / ((v.array() / c2).sqrt() + Scalar(eps));
  }

  bool operator==(const Adam& o) const {
    return lr == o.lr && beta1 == o.beta1 && beta2 == o.beta2 && eps == o.eps && step == o.step &&
           m.size() == o.m.size() && v.size() == o.v.size() && m == o.m && v == o.v;
  }
};

}  // namespace sdsgan::nn
