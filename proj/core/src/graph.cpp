#include "fmm/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>

namespace fmm {

namespace {

constexpr std::array<std::string_view, 21> kOpNames = {
    "leaf",      "matmul", "add",  "mul",    "sub",   "relu",      "gelu",         "sigmoid",
    "softmax",   "layernorm", "conv2d", "avgpool2d", "mean", "sum", "concat", "slice",
    "transpose", "embed_lookup", "reshape", "scale", "bce_logits"};

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

std::string describe_shapes(std::span<const Tensor* const> inputs) {
  std::ostringstream out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (i) out << ", ";
    out << shape_string(inputs[i]->shape());
  }
  return out.str();
}

[[noreturn]] void shape_fail(OpKind kind, std::span<const Tensor* const> inputs, const std::string& detail) {
  throw ShapeError(std::string(op_name(kind)) + ": " + detail + " (input shapes " + describe_shapes(inputs) + ")");
}

void expect_arity(OpKind kind, std::span<const Tensor* const> inputs, std::size_t lo, std::size_t hi) {
  if (inputs.size() < lo || inputs.size() > hi) {
    std::ostringstream out;
    out << "expects " << lo;
    if (hi != lo) out << ".." << hi;
    out << " inputs, got " << inputs.size();
    shape_fail(kind, inputs, out.str());
  }
}

Shape broadcast_shape(OpKind kind, std::span<const Tensor* const> inputs) {
  const Shape& a = inputs[0]->shape();
  const Shape& b = inputs[1]->shape();
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) shape_fail(kind, inputs, "shapes are not broadcast-compatible");
    out[i] = std::max(da, db);
  }
  return out;
}

// Flat source index of every output element for an operand broadcast to `out`.
std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& src) {
  const std::size_t r = out.size();
  const std::size_t offset = r - src.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = src.size(); i-- > 0;) {
    if (src[i] != 1) stride[i + offset] = s;
    s *= src[i];
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t cur = 0;
  for (std::size_t i = 0; i < n; ++i) {
    index[i] = cur;
    for (std::size_t d = r; d-- > 0;) {
      ++counter[d];
      cur += stride[d];
      if (counter[d] < out[d]) break;
      cur -= stride[d] * out[d];
      counter[d] = 0;
    }
  }
  return index;
}

struct Reduction {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
  Shape out_shape;
};

Reduction plan_reduction(OpKind kind, std::span<const Tensor* const> inputs, int axis) {
  const Shape& s = inputs[0]->shape();
  Reduction r;
  if (axis == OpAttrs::kAllAxes) {
    r.extent = shape_numel(s);
    r.out_shape = {1};
    return r;
  }
  if (axis < 0 || static_cast<std::size_t>(axis) >= s.size()) {
    shape_fail(kind, inputs, "axis " + std::to_string(axis) + " out of range");
  }
  const auto ax = static_cast<std::size_t>(axis);
  for (std::size_t i = 0; i < ax; ++i) r.outer *= s[i];
  r.extent = s[ax];
  for (std::size_t i = ax + 1; i < s.size(); ++i) r.inner *= s[i];
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != ax) r.out_shape.push_back(s[i]);
  }
  if (r.out_shape.empty()) r.out_shape = {1};
  return r;
}

struct ConvGeometry {
  std::size_t channels, height, width, out_channels, kernel_h, kernel_w, out_h, out_w;
};

ConvGeometry plan_conv(OpKind kind, std::span<const Tensor* const> inputs, const OpAttrs& attrs) {
  const Shape& x = inputs[0]->shape();
  const Shape& w = inputs[1]->shape();
  if (x.size() != 3) shape_fail(kind, inputs, "input must be (channels, height, width)");
  if (w.size() != 4) shape_fail(kind, inputs, "weight must be (out, in, kh, kw)");
  if (w[1] != x[0]) shape_fail(kind, inputs, "weight input channels do not match input");
  if (attrs.stride == 0) shape_fail(kind, inputs, "stride must be positive");
  if (inputs.size() == 3 && inputs[2]->numel() != w[0]) shape_fail(kind, inputs, "bias length must equal out channels");
  const std::size_t ph = x[1] + 2 * attrs.padding;
  const std::size_t pw = x[2] + 2 * attrs.padding;
  if (ph < w[2] || pw < w[3]) shape_fail(kind, inputs, "kernel larger than padded input");
  return {x[0], x[1], x[2], w[0], w[2], w[3], (ph - w[2]) / attrs.stride + 1, (pw - w[3]) / attrs.stride + 1};
}

template <class T>
void im2col(const T* x, const ConvGeometry& g, const OpAttrs& attrs, T* cols) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
        T* row = cols + ((c * g.kernel_h + kh) * g.kernel_w + kw) * plane;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * attrs.stride + kh) - static_cast<std::ptrdiff_t>(attrs.padding);
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw =
                static_cast<std::ptrdiff_t>(ow * attrs.stride + kw) - static_cast<std::ptrdiff_t>(attrs.padding);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.height) &&
                                iw < static_cast<std::ptrdiff_t>(g.width);
            row[oh * g.out_w + ow] = inside ? x[(c * g.height + ih) * g.width + iw] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, const OpAttrs& attrs, T* dx) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
        const T* row = cols + ((c * g.kernel_h + kh) * g.kernel_w + kw) * plane;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * attrs.stride + kh) - static_cast<std::ptrdiff_t>(attrs.padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw =
                static_cast<std::ptrdiff_t>(ow * attrs.stride + kw) - static_cast<std::ptrdiff_t>(attrs.padding);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) continue;
            dx[(c * g.height + ih) * g.width + iw] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

struct PoolGeometry {
  std::size_t channels, height, width, out_h, out_w;
};

PoolGeometry plan_pool(OpKind kind, std::span<const Tensor* const> inputs, const OpAttrs& attrs) {
  const Shape& x = inputs[0]->shape();
  if (x.size() != 3) shape_fail(kind, inputs, "input must be (channels, height, width)");
  if (attrs.kernel == 0 || attrs.stride == 0) shape_fail(kind, inputs, "kernel and stride must be positive");
  if (attrs.kernel > x[1] || attrs.kernel > x[2]) shape_fail(kind, inputs, "kernel larger than input");
  return {x[0], x[1], x[2], (x[1] - attrs.kernel) / attrs.stride + 1, (x[2] - attrs.kernel) / attrs.stride + 1};
}

struct ConcatPlan {
  std::size_t outer = 1;
  std::size_t inner = 1;
  std::vector<std::size_t> extents;
  Shape out_shape;
};

ConcatPlan plan_concat(OpKind kind, std::span<const Tensor* const> inputs, int axis) {
  const Shape& first = inputs[0]->shape();
  if (axis < 0 || static_cast<std::size_t>(axis) >= first.size()) {
    shape_fail(kind, inputs, "axis " + std::to_string(axis) + " out of range");
  }
  const auto ax = static_cast<std::size_t>(axis);
  ConcatPlan p;
  p.out_shape = first;
  p.out_shape[ax] = 0;
  for (const Tensor* t : inputs) {
    const Shape& s = t->shape();
    if (s.size() != first.size()) shape_fail(kind, inputs, "ranks differ");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != first[i]) shape_fail(kind, inputs, "non-concatenated extents differ");
    }
    p.extents.push_back(s[ax]);
    p.out_shape[ax] += s[ax];
  }
  for (std::size_t i = 0; i < ax; ++i) p.outer *= first[i];
  for (std::size_t i = ax + 1; i < first.size(); ++i) p.inner *= first[i];
  return p;
}

template <class T>
T gelu_value(T x) {
  const double v = static_cast<double>(x);
  return static_cast<T>(0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)));
}

template <class T>
T gelu_grad(T x) {
  const double v = static_cast<double>(x);
  const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
  return static_cast<T>(cdf + v * pdf);
}

template <class T>
T sigmoid_value(T x) {
  const double v = static_cast<double>(x);
  if (v >= 0) return static_cast<T>(1.0 / (1.0 + std::exp(-v)));
  const double e = std::exp(v);
  return static_cast<T>(e / (1.0 + e));
}

struct ForwardResult {
  Tensor value;
  Tensor aux;
  std::vector<double> stats;
};

template <class T>
ForwardResult forward(OpKind kind, std::span<const Tensor* const> in, const OpAttrs& attrs) {
  ForwardResult r;
  auto make = [](Shape shape, std::vector<T> values) { return Tensor(std::move(shape), std::move(values)); };

  switch (kind) {
    case OpKind::matmul: {
      expect_arity(kind, in, 2, 2);
      const Shape& a = in[0]->shape();
      const Shape& b = in[1]->shape();
      if (a.size() != 2 || b.size() != 2) shape_fail(kind, in, "operands must be rank 2");
      if (a[1] != b[0]) shape_fail(kind, in, "inner dimensions differ");
      std::vector<T> out(a[0] * b[1]);
      ConstMap<T> ma(in[0]->data<T>().data(), a[0], a[1]);
      ConstMap<T> mb(in[1]->data<T>().data(), b[0], b[1]);
      MutMap<T>(out.data(), a[0], b[1]).noalias() = ma * mb;
      r.value = make({a[0], b[1]}, std::move(out));
      break;
    }
    case OpKind::add:
    case OpKind::mul:
    case OpKind::sub: {
      expect_arity(kind, in, 2, 2);
      const Shape shape = broadcast_shape(kind, in);
      const auto a = in[0]->data<T>();
      const auto b = in[1]->data<T>();
      const std::size_t n = shape_numel(shape);
      std::vector<T> out(n);
      auto combine = [kind](T x, T y) {
        if (kind == OpKind::add) return x + y;
        if (kind == OpKind::mul) return x * y;
        return x - y;
      };
      if (in[0]->shape() == shape && in[1]->shape() == shape) {
        for (std::size_t i = 0; i < n; ++i) out[i] = combine(a[i], b[i]);
      } else {
        const auto ia = broadcast_index(shape, in[0]->shape());
        const auto ib = broadcast_index(shape, in[1]->shape());
        for (std::size_t i = 0; i < n; ++i) out[i] = combine(a[ia[i]], b[ib[i]]);
      }
      r.value = make(shape, std::move(out));
      break;
    }
    case OpKind::relu:
    case OpKind::gelu:
    case OpKind::sigmoid: {
      expect_arity(kind, in, 1, 1);
      const auto x = in[0]->data<T>();
      std::vector<T> out(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (kind == OpKind::relu) out[i] = x[i] > T(0) ? x[i] : T(0);
        else if (kind == OpKind::gelu) out[i] = gelu_value(x[i]);
        else out[i] = sigmoid_value(x[i]);
      }
      r.value = make(in[0]->shape(), std::move(out));
      break;
    }
    case OpKind::softmax: {
      expect_arity(kind, in, 1, 1);
      const auto x = in[0]->data<T>();
      const std::size_t d = in[0]->shape().back();
      const std::size_t rows = x.size() / d;
      std::vector<T> out(x.size());
      for (std::size_t row = 0; row < rows; ++row) {
        const T* src = x.data() + row * d;
        T* dst = out.data() + row * d;
        const T mx = *std::max_element(src, src + d);
        double total = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          dst[j] = std::exp(src[j] - mx);
          total += dst[j];
        }
        const double inv = 1.0 / total;
        for (std::size_t j = 0; j < d; ++j) dst[j] = static_cast<T>(dst[j] * inv);
      }
      r.value = make(in[0]->shape(), std::move(out));
      break;
    }
    case OpKind::layernorm: {
      if (in.size() != 1 && in.size() != 3) shape_fail(kind, in, "expects 1 input or (x, gamma, beta)");
      const auto x = in[0]->data<T>();
      const std::size_t d = in[0]->shape().back();
      if (in.size() == 3 && (in[1]->numel() != d || in[2]->numel() != d)) {
        shape_fail(kind, in, "gamma and beta must match the last extent");
      }
      const std::size_t rows = x.size() / d;
      std::vector<T> out(x.size());
      r.stats.resize(2 * rows);
      for (std::size_t row = 0; row < rows; ++row) {
        const T* src = x.data() + row * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += src[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + attrs.epsilon);
        r.stats[2 * row] = mu;
        r.stats[2 * row + 1] = rstd;
        for (std::size_t j = 0; j < d; ++j) {
          double v = (src[j] - mu) * rstd;
          if (in.size() == 3) v = v * in[1]->data<T>()[j] + in[2]->data<T>()[j];
          out[row * d + j] = static_cast<T>(v);
        }
      }
      r.value = make(in[0]->shape(), std::move(out));
      break;
    }
    case OpKind::conv2d: {
      expect_arity(kind, in, 2, 3);
      const ConvGeometry g = plan_conv(kind, in, attrs);
      const std::size_t plane = g.out_h * g.out_w;
      const std::size_t patch = g.channels * g.kernel_h * g.kernel_w;
      std::vector<T> cols(patch * plane);
      im2col(in[0]->data<T>().data(), g, attrs, cols.data());
      std::vector<T> out(g.out_channels * plane);
      ConstMap<T> w(in[1]->data<T>().data(), g.out_channels, patch);
      ConstMap<T> c(cols.data(), patch, plane);
      MutMap<T> o(out.data(), g.out_channels, plane);
      o.noalias() = w * c;
      if (in.size() == 3) {
        const auto bias = in[2]->data<T>();
        for (std::size_t oc = 0; oc < g.out_channels; ++oc) o.row(oc).array() += bias[oc];
      }
      r.value = make({g.out_channels, g.out_h, g.out_w}, std::move(out));
      r.aux = make({patch, plane}, std::move(cols));
      break;
    }
    case OpKind::avgpool2d: {
      expect_arity(kind, in, 1, 1);
      const PoolGeometry g = plan_pool(kind, in, attrs);
      const auto x = in[0]->data<T>();
      std::vector<T> out(g.channels * g.out_h * g.out_w);
      const double inv = 1.0 / static_cast<double>(attrs.kernel * attrs.kernel);
      for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            double acc = 0.0;
            for (std::size_t kh = 0; kh < attrs.kernel; ++kh) {
              for (std::size_t kw = 0; kw < attrs.kernel; ++kw) {
                acc += x[(c * g.height + oh * attrs.stride + kh) * g.width + ow * attrs.stride + kw];
              }
            }
            out[(c * g.out_h + oh) * g.out_w + ow] = static_cast<T>(acc * inv);
          }
        }
      }
      r.value = make({g.channels, g.out_h, g.out_w}, std::move(out));
      break;
    }
    case OpKind::mean:
    case OpKind::sum: {
      expect_arity(kind, in, 1, 1);
      const Reduction p = plan_reduction(kind, in, attrs.axis);
      const auto x = in[0]->data<T>();
      std::vector<T> out(p.outer * p.inner);
      const double factor = kind == OpKind::mean ? 1.0 / static_cast<double>(p.extent) : 1.0;
      for (std::size_t o = 0; o < p.outer; ++o) {
        for (std::size_t i = 0; i < p.inner; ++i) {
          double acc = 0.0;
          for (std::size_t e = 0; e < p.extent; ++e) acc += x[(o * p.extent + e) * p.inner + i];
          out[o * p.inner + i] = static_cast<T>(acc * factor);
        }
      }
      r.value = make(p.out_shape, std::move(out));
      break;
    }
    case OpKind::concat: {
      if (in.empty()) shape_fail(kind, in, "needs at least one input");
      const ConcatPlan p = plan_concat(kind, in, attrs.axis);
      std::vector<T> out;
      out.reserve(shape_numel(p.out_shape));
      for (std::size_t o = 0; o < p.outer; ++o) {
        for (std::size_t k = 0; k < in.size(); ++k) {
          const auto x = in[k]->data<T>();
          const std::size_t chunk = p.extents[k] * p.inner;
          out.insert(out.end(), x.begin() + o * chunk, x.begin() + (o + 1) * chunk);
        }
      }
      r.value = make(p.out_shape, std::move(out));
      break;
    }
    case OpKind::slice: {
      expect_arity(kind, in, 1, 1);
      const Shape& s = in[0]->shape();
      if (attrs.axis < 0 || static_cast<std::size_t>(attrs.axis) >= s.size()) shape_fail(kind, in, "axis out of range");
      const auto ax = static_cast<std::size_t>(attrs.axis);
      if (attrs.begin >= attrs.end || attrs.end > s[ax]) {
        shape_fail(kind, in, "range [" + std::to_string(attrs.begin) + "," + std::to_string(attrs.end) + ") invalid");
      }
      std::size_t outer = 1, inner = 1;
      for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
      for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
      const auto x = in[0]->data<T>();
      std::vector<T> out;
      out.reserve(outer * (attrs.end - attrs.begin) * inner);
      for (std::size_t o = 0; o < outer; ++o) {
        const auto base = x.begin() + (o * s[ax] + attrs.begin) * inner;
        out.insert(out.end(), base, base + (attrs.end - attrs.begin) * inner);
      }
      Shape shape = s;
      shape[ax] = attrs.end - attrs.begin;
      r.value = make(shape, std::move(out));
      break;
    }
    case OpKind::transpose: {
      expect_arity(kind, in, 1, 1);
      const Shape& s = in[0]->shape();
      if (s.size() != 2) shape_fail(kind, in, "operand must be rank 2");
      std::vector<T> out(in[0]->numel());
      MutMap<T>(out.data(), s[1], s[0]) = ConstMap<T>(in[0]->data<T>().data(), s[0], s[1]).transpose();
      r.value = make({s[1], s[0]}, std::move(out));
      break;
    }
    case OpKind::embed_lookup: {
      expect_arity(kind, in, 1, 1);
      const Shape& s = in[0]->shape();
      if (s.size() != 2) shape_fail(kind, in, "table must be rank 2");
      if (attrs.indices.empty()) shape_fail(kind, in, "index list is empty");
      const auto table = in[0]->data<T>();
      std::vector<T> out;
      out.reserve(attrs.indices.size() * s[1]);
      for (auto idx : attrs.indices) {
        if (idx >= s[0]) shape_fail(kind, in, "index " + std::to_string(idx) + " out of range");
        out.insert(out.end(), table.begin() + idx * s[1], table.begin() + (idx + 1) * s[1]);
      }
      r.value = make({attrs.indices.size(), s[1]}, std::move(out));
      break;
    }
    case OpKind::reshape: {
      expect_arity(kind, in, 1, 1);
      if (shape_numel(attrs.shape) != in[0]->numel() || attrs.shape.empty()) {
        shape_fail(kind, in, "cannot reshape to " + shape_string(attrs.shape));
      }
      r.value = in[0]->reshaped(attrs.shape);
      break;
    }
    case OpKind::scale: {
      expect_arity(kind, in, 1, 1);
      const auto x = in[0]->data<T>();
      std::vector<T> out(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>(x[i] * attrs.scalar);
      r.value = make(in[0]->shape(), std::move(out));
      break;
    }
    case OpKind::bce_logits: {
      expect_arity(kind, in, 2, 2);
      if (in[0]->numel() != in[1]->numel()) shape_fail(kind, in, "logits and labels differ in length");
      const auto z = in[0]->data<T>();
      const auto y = in[1]->data<T>();
      double acc = 0.0;
      for (std::size_t i = 0; i < z.size(); ++i) {
        if (y[i] != T(0) && y[i] != T(1)) {
          throw ValueError("bce_logits: label " + std::to_string(static_cast<double>(y[i])) + " is not in {0,1}");
        }
        const double v = z[i];
        acc += std::max(v, 0.0) - v * y[i] + std::log1p(std::exp(-std::abs(v)));
      }
      r.value = make({1}, {static_cast<T>(acc / static_cast<double>(z.size()))});
      break;
    }
    case OpKind::leaf:
      throw ValueError("leaf is not an applicable op kind");
  }
  return r;
}

}  // namespace

std::string_view op_name(OpKind kind) { return kOpNames.at(static_cast<std::size_t>(kind)); }

OpKind parse_op_kind(std::string_view name) {
  for (std::size_t i = 1; i < kOpNames.size(); ++i) {
    if (kOpNames[i] == name) return static_cast<OpKind>(i);
  }
  throw ValueError("unknown op kind '" + std::string(name) + "'");
}

Graph& Var::graph() const {
  if (!graph_) throw ValueError("variable is not attached to a graph");
  return *graph_;
}

const Tensor& Var::value() const { return graph().value(*this); }

Var Graph::constant(Tensor value) {
  if (value.empty()) throw ValueError("constant: empty tensor");
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Graph::parameter(const std::string& name, Tensor value, bool trainable) {
  if (value.empty()) throw ValueError("parameter '" + name + "': empty tensor");
  Node node;
  node.value = std::move(value);
  node.name = name;
  node.requires_grad = differentiable_ && trainable;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Graph::apply(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs) {
  std::vector<const Tensor*> tensors;
  tensors.reserve(inputs.size());
  bool requires_grad = false;
  for (const Var& v : inputs) {
    if (v.graph_ != this || v.id_ >= nodes_.size()) throw ValueError(std::string(op_name(kind)) + ": input from another graph");
    tensors.push_back(&nodes_[v.id_].value);
    requires_grad = requires_grad || nodes_[v.id_].requires_grad;
  }
  if (tensors.empty()) {
    if (kind == OpKind::leaf) throw ValueError("leaf is not an applicable op kind");
    throw ShapeError(std::string(op_name(kind)) + ": needs at least one input");
  }
  const DType dtype = tensors[0]->dtype();
  for (const Tensor* t : tensors) {
    if (t->dtype() != dtype) throw ValueError(std::string(op_name(kind)) + ": mixed dtypes");
  }
  ForwardResult result = dispatch_dtype(dtype, [&]<class T>() { return forward<T>(kind, tensors, attrs); });

  Node node;
  node.kind = kind;
  node.value = std::move(result.value);
  node.requires_grad = differentiable_ && requires_grad;
  if (node.requires_grad) {
    node.inputs.reserve(inputs.size());
    for (const Var& v : inputs) node.inputs.push_back(v.id_);
    node.attrs = attrs;
    node.aux = std::move(result.aux);
    node.stats = std::move(result.stats);
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Graph::value(Var v) const {
  if (v.graph_ != this || v.id_ >= nodes_.size()) throw ValueError("variable does not belong to this graph");
  return nodes_[v.id_].value;
}

OpKind Graph::kind(Var v) const {
  if (v.graph_ != this || v.id_ >= nodes_.size()) throw ValueError("variable does not belong to this graph");
  return nodes_[v.id_].kind;
}

GradientMap Graph::backward(Var loss) const {
  if (loss.graph_ != this || loss.id_ >= nodes_.size()) throw ValueError("backward: loss is not in this graph");
  const Node& node = nodes_[loss.id_];
  if (node.value.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(node.value.shape()));
  }
  if (!differentiable_) throw ValueError("backward: graph was built without differentiation");
  if (!node.requires_grad) return {};
  return dispatch_dtype(node.value.dtype(), [&]<class T>() { return backward_impl<T>(loss.id_); });
}

template <class T>
GradientMap Graph::backward_impl(std::size_t loss_id) const {
  std::vector<std::vector<T>> grads(loss_id + 1);
  grads[loss_id].assign(1, T(1));
  GradientMap result;

  for (std::size_t id = loss_id + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (grads[id].empty() || !node.requires_grad) continue;
    const std::vector<T>& g = grads[id];

    if (node.kind == OpKind::leaf) {
      Tensor grad(node.value.shape(), g);
      auto it = result.find(node.name);
      if (it == result.end()) {
        result.emplace(node.name, std::move(grad));
      } else {
        auto prev = it->second.template data<T>();
        std::vector<T> total(prev.begin(), prev.end());
        for (std::size_t i = 0; i < total.size(); ++i) total[i] += g[i];
        it->second = Tensor(node.value.shape(), std::move(total));
      }
      continue;
    }

    auto input_grad = [&](std::size_t k) -> T* {
      const std::size_t in_id = node.inputs[k];
      if (!nodes_[in_id].requires_grad) return nullptr;
      auto& buf = grads[in_id];
      if (buf.empty()) buf.assign(nodes_[in_id].value.numel(), T(0));
      return buf.data();
    };
    auto input_value = [&](std::size_t k) { return nodes_[node.inputs[k]].value.template data<T>(); };
    const auto y = node.value.template data<T>();

    switch (node.kind) {
      case OpKind::matmul: {
        const Shape& as = nodes_[node.inputs[0]].value.shape();
        const Shape& bs = nodes_[node.inputs[1]].value.shape();
        ConstMap<T> gm(g.data(), as[0], bs[1]);
        if (T* ga = input_grad(0)) {
          MutMap<T>(ga, as[0], as[1]).noalias() += gm * ConstMap<T>(input_value(1).data(), bs[0], bs[1]).transpose();
        }
        if (T* gb = input_grad(1)) {
          MutMap<T>(gb, bs[0], bs[1]).noalias() += ConstMap<T>(input_value(0).data(), as[0], as[1]).transpose() * gm;
        }
        break;
      }
      case OpKind::add:
      case OpKind::sub:
      case OpKind::mul: {
        const Shape& out = node.value.shape();
        const Shape& as = nodes_[node.inputs[0]].value.shape();
        const Shape& bs = nodes_[node.inputs[1]].value.shape();
        const std::size_t n = g.size();
        const auto a = input_value(0);
        const auto b = input_value(1);
        for (std::size_t k = 0; k < 2; ++k) {
          T* gi = input_grad(k);
          if (!gi) continue;
          const Shape& own = k == 0 ? as : bs;
          const auto& other = k == 0 ? b : a;
          const double sign = (node.kind == OpKind::sub && k == 1) ? -1.0 : 1.0;
          if (own == out) {
            const bool other_full = (k == 0 ? bs : as) == out;
            std::vector<std::size_t> io;
            if (node.kind == OpKind::mul && !other_full) io = broadcast_index(out, k == 0 ? bs : as);
            for (std::size_t i = 0; i < n; ++i) {
              T v = g[i];
              if (node.kind == OpKind::mul) v *= other_full ? other[i] : other[io[i]];
              gi[i] += static_cast<T>(sign * v);
            }
          } else {
            const auto iown = broadcast_index(out, own);
            std::vector<std::size_t> io;
            const bool other_full = (k == 0 ? bs : as) == out;
            if (node.kind == OpKind::mul && !other_full) io = broadcast_index(out, k == 0 ? bs : as);
            std::vector<double> acc(shape_numel(own), 0.0);
            for (std::size_t i = 0; i < n; ++i) {
              double v = g[i];
              if (node.kind == OpKind::mul) v *= other_full ? other[i] : other[io[i]];
              acc[iown[i]] += v;
            }
            for (std::size_t i = 0; i < acc.size(); ++i) gi[i] += static_cast<T>(sign * acc[i]);
          }
        }
        break;
      }
      case OpKind::relu: {
        if (T* gx = input_grad(0)) {
          const auto x = input_value(0);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += x[i] > T(0) ? g[i] : T(0);
        }
        break;
      }
      case OpKind::gelu: {
        if (T* gx = input_grad(0)) {
          const auto x = input_value(0);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gelu_grad(x[i]);
        }
        break;
      }
      case OpKind::sigmoid: {
        if (T* gx = input_grad(0)) {
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
        }
        break;
      }
      case OpKind::softmax: {
        if (T* gx = input_grad(0)) {
          const std::size_t d = node.value.shape().back();
          const std::size_t rows = g.size() / d;
          for (std::size_t row = 0; row < rows; ++row) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(g[row * d + j]) * y[row * d + j];
            for (std::size_t j = 0; j < d; ++j) {
              gx[row * d + j] += static_cast<T>(y[row * d + j] * (g[row * d + j] - dot));
            }
          }
        }
        break;
      }
      case OpKind::layernorm: {
        const auto x = input_value(0);
        const std::size_t d = node.value.shape().back();
        const std::size_t rows = g.size() / d;
        const bool affine = node.inputs.size() == 3;
        T* gx = input_grad(0);
        T* ggamma = affine ? input_grad(1) : nullptr;
        T* gbeta = affine ? input_grad(2) : nullptr;
        std::vector<double> acc_gamma(ggamma ? d : 0, 0.0);
        std::vector<double> acc_beta(gbeta ? d : 0, 0.0);
        std::vector<double> dxhat(d);
        for (std::size_t row = 0; row < rows; ++row) {
          const double mu = node.stats[2 * row];
          const double rstd = node.stats[2 * row + 1];
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (x[row * d + j] - mu) * rstd;
            const double gj = g[row * d + j];
            if (ggamma) acc_gamma[j] += gj * xhat;
            if (gbeta) acc_beta[j] += gj;
            dxhat[j] = affine ? gj * input_value(1)[j] : gj;
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat;
          }
          if (!gx) continue;
          mean_d /= static_cast<double>(d);
          mean_dx /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (x[row * d + j] - mu) * rstd;
            gx[row * d + j] += static_cast<T>(rstd * (dxhat[j] - mean_d - xhat * mean_dx));
          }
        }
        for (std::size_t j = 0; j < acc_gamma.size(); ++j) ggamma[j] += static_cast<T>(acc_gamma[j]);
        for (std::size_t j = 0; j < acc_beta.size(); ++j) gbeta[j] += static_cast<T>(acc_beta[j]);
        break;
      }
      case OpKind::conv2d: {
        std::array<const Tensor*, 3> ins{};
        for (std::size_t k = 0; k < node.inputs.size(); ++k) ins[k] = &nodes_[node.inputs[k]].value;
        const ConvGeometry geo = plan_conv(node.kind, std::span<const Tensor* const>(ins.data(), node.inputs.size()), node.attrs);
        const std::size_t plane = geo.out_h * geo.out_w;
        const std::size_t patch = geo.channels * geo.kernel_h * geo.kernel_w;
        ConstMap<T> gm(g.data(), geo.out_channels, plane);
        if (T* gw = input_grad(1)) {
          MutMap<T>(gw, geo.out_channels, patch).noalias() +=
              gm * ConstMap<T>(node.aux.template data<T>().data(), patch, plane).transpose();
        }
        if (T* gx = input_grad(0)) {
          std::vector<T> gcols(patch * plane);
          MutMap<T>(gcols.data(), patch, plane).noalias() =
              ConstMap<T>(input_value(1).data(), geo.out_channels, patch).transpose() * gm;
          col2im_add(gcols.data(), geo, node.attrs, gx);
        }
        if (node.inputs.size() == 3) {
          if (T* gb = input_grad(2)) {
            for (std::size_t oc = 0; oc < geo.out_channels; ++oc) {
              double acc = 0.0;
              for (std::size_t i = 0; i < plane; ++i) acc += g[oc * plane + i];
              gb[oc] += static_cast<T>(acc);
            }
          }
        }
        break;
      }
      case OpKind::avgpool2d: {
        if (T* gx = input_grad(0)) {
          const Tensor* x = &nodes_[node.inputs[0]].value;
          const PoolGeometry geo = plan_pool(node.kind, std::span<const Tensor* const>(&x, 1), node.attrs);
          const std::size_t k = node.attrs.kernel;
          const double inv = 1.0 / static_cast<double>(k * k);
          for (std::size_t c = 0; c < geo.channels; ++c) {
            for (std::size_t oh = 0; oh < geo.out_h; ++oh) {
              for (std::size_t ow = 0; ow < geo.out_w; ++ow) {
                const T share = static_cast<T>(g[(c * geo.out_h + oh) * geo.out_w + ow] * inv);
                for (std::size_t kh = 0; kh < k; ++kh) {
                  for (std::size_t kw = 0; kw < k; ++kw) {
                    gx[(c * geo.height + oh * node.attrs.stride + kh) * geo.width + ow * node.attrs.stride + kw] += share;
                  }
                }
              }
            }
          }
        }
        break;
      }
      case OpKind::mean:
      case OpKind::sum: {
        if (T* gx = input_grad(0)) {
          const Tensor* x = &nodes_[node.inputs[0]].value;
          const Reduction p = plan_reduction(node.kind, std::span<const Tensor* const>(&x, 1), node.attrs.axis);
          const double factor = node.kind == OpKind::mean ? 1.0 / static_cast<double>(p.extent) : 1.0;
          for (std::size_t o = 0; o < p.outer; ++o) {
            for (std::size_t e = 0; e < p.extent; ++e) {
              for (std::size_t i = 0; i < p.inner; ++i) {
                gx[(o * p.extent + e) * p.inner + i] += static_cast<T>(g[o * p.inner + i] * factor);
              }
            }
          }
        }
        break;
      }
      case OpKind::concat: {
        std::vector<const Tensor*> ins;
        for (auto in_id : node.inputs) ins.push_back(&nodes_[in_id].value);
        const ConcatPlan p = plan_concat(node.kind, ins, node.attrs.axis);
        std::size_t offset = 0;
        for (std::size_t o = 0; o < p.outer; ++o) {
          for (std::size_t k = 0; k < ins.size(); ++k) {
            const std::size_t chunk = p.extents[k] * p.inner;
            if (T* gk = input_grad(k)) {
              for (std::size_t i = 0; i < chunk; ++i) gk[o * chunk + i] += g[offset + i];
            }
            offset += chunk;
          }
        }
        break;
      }
      case OpKind::slice: {
        if (T* gx = input_grad(0)) {
          const Shape& s = nodes_[node.inputs[0]].value.shape();
          const auto ax = static_cast<std::size_t>(node.attrs.axis);
          std::size_t outer = 1, inner = 1;
          for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
          for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
          const std::size_t width = (node.attrs.end - node.attrs.begin) * inner;
          for (std::size_t o = 0; o < outer; ++o) {
            T* dst = gx + (o * s[ax] + node.attrs.begin) * inner;
            for (std::size_t i = 0; i < width; ++i) dst[i] += g[o * width + i];
          }
        }
        break;
      }
      case OpKind::transpose: {
        if (T* gx = input_grad(0)) {
          const Shape& s = nodes_[node.inputs[0]].value.shape();
          MutMap<T>(gx, s[0], s[1]) += ConstMap<T>(g.data(), s[1], s[0]).transpose();
        }
        break;
      }
      case OpKind::embed_lookup: {
        if (T* gt = input_grad(0)) {
          const std::size_t d = nodes_[node.inputs[0]].value.shape()[1];
          for (std::size_t r = 0; r < node.attrs.indices.size(); ++r) {
            T* dst = gt + node.attrs.indices[r] * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += g[r * d + j];
          }
        }
        break;
      }
      case OpKind::reshape: {
        if (T* gx = input_grad(0)) {
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        break;
      }
      case OpKind::scale: {
        if (T* gx = input_grad(0)) {
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += static_cast<T>(g[i] * node.attrs.scalar);
        }
        break;
      }
      case OpKind::bce_logits: {
        if (T* gz = input_grad(0)) {
          const auto z = input_value(0);
          const auto labels = input_value(1);
          const double factor = static_cast<double>(g[0]) / static_cast<double>(z.size());
          for (std::size_t i = 0; i < z.size(); ++i) {
            gz[i] += static_cast<T>(factor * (static_cast<double>(sigmoid_value(z[i])) - labels[i]));
          }
        }
        break;
      }
      case OpKind::leaf:
        break;
    }
  }
  return result;
}

Tensor apply_op(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs) {
  Graph graph(false);
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(graph.constant(t));
  return graph.value(graph.apply(kind, vars, attrs));
}

namespace ops {

Var matmul(Var a, Var b) { return a.graph().apply(OpKind::matmul, {a, b}); }
Var add(Var a, Var b) { return a.graph().apply(OpKind::add, {a, b}); }
Var mul(Var a, Var b) { return a.graph().apply(OpKind::mul, {a, b}); }
Var sub(Var a, Var b) { return a.graph().apply(OpKind::sub, {a, b}); }
Var relu(Var x) { return x.graph().apply(OpKind::relu, {x}); }
Var gelu(Var x) { return x.graph().apply(OpKind::gelu, {x}); }
Var sigmoid(Var x) { return x.graph().apply(OpKind::sigmoid, {x}); }
Var softmax(Var x) { return x.graph().apply(OpKind::softmax, {x}); }

Var layer_norm(Var x, double epsilon) {
  OpAttrs attrs;
  attrs.epsilon = epsilon;
  return x.graph().apply(OpKind::layernorm, {x}, attrs);
}

Var layer_norm(Var x, Var gamma, Var beta, double epsilon) {
  OpAttrs attrs;
  attrs.epsilon = epsilon;
  return x.graph().apply(OpKind::layernorm, {x, gamma, beta}, attrs);
}

Var conv2d(Var input, Var weight, std::size_t stride, std::size_t padding) {
  OpAttrs attrs;
  attrs.stride = stride;
  attrs.padding = padding;
  return input.graph().apply(OpKind::conv2d, {input, weight}, attrs);
}

Var conv2d(Var input, Var weight, Var bias, std::size_t stride, std::size_t padding) {
  OpAttrs attrs;
  attrs.stride = stride;
  attrs.padding = padding;
  return input.graph().apply(OpKind::conv2d, {input, weight, bias}, attrs);
}

Var avg_pool2d(Var x, std::size_t kernel, std::size_t stride) {
  OpAttrs attrs;
  attrs.kernel = kernel;
  attrs.stride = stride;
  return x.graph().apply(OpKind::avgpool2d, {x}, attrs);
}

Var mean(Var x, int axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  return x.graph().apply(OpKind::mean, {x}, attrs);
}

Var sum(Var x, int axis) {
  OpAttrs attrs;
  attrs.axis = axis;
  return x.graph().apply(OpKind::sum, {x}, attrs);
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: needs at least one input");
  OpAttrs attrs;
  attrs.axis = axis;
  return parts.front().graph().apply(OpKind::concat, parts, attrs);
}

Var concat(std::initializer_list<Var> parts, int axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var slice(Var x, int axis, std::size_t begin, std::size_t end) {
  OpAttrs attrs;
  attrs.axis = axis;
  attrs.begin = begin;
  attrs.end = end;
  return x.graph().apply(OpKind::slice, {x}, attrs);
}

Var transpose(Var x) { return x.graph().apply(OpKind::transpose, {x}); }

Var embed_lookup(Var table, std::vector<std::size_t> indices) {
  OpAttrs attrs;
  attrs.indices = std::move(indices);
  return table.graph().apply(OpKind::embed_lookup, {table}, attrs);
}

Var reshape(Var x, Shape shape) {
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  return x.graph().apply(OpKind::reshape, {x}, attrs);
}

Var scale(Var x, double factor) {
  OpAttrs attrs;
  attrs.scalar = factor;
  return x.graph().apply(OpKind::scale, {x}, attrs);
}

Var bce_with_logits(Var logits, Var labels) { return logits.graph().apply(OpKind::bce_logits, {logits, labels}); }

}  // namespace ops

}  // namespace fmm
