#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "otkd/error.hpp"
#include "otkd/random.hpp"
#include "otkd/store.hpp"
#include "otkd/tensor.hpp"

namespace otkd {

/// Fixed sinusoidal position codes, one row per position. Interleaved
/// sin/cos pairs over geometrically spaced frequencies; width must be even.
inline Tensor sinusoidal_positions(int n, int width, double base = 10000.0) {
  if (width % 2 != 0) {
    throw UsageError("sinusoidal_positions: width must be even, got " + std::to_string(width));
  }
  if (n < 0) throw UsageError("sinusoidal_positions: negative length");
  std::vector<double> out(static_cast<std::size_t>(n) * static_cast<std::size_t>(width));
  for (int p = 0; p < n; ++p) {
    for (int i = 0; i < width / 2; ++i) {
      const double freq = std::pow(base, -2.0 * i / width);
      out[static_cast<std::size_t>(p * width + 2 * i)] = std::sin(p * freq);
      out[static_cast<std::size_t>(p * width + 2 * i + 1)] = std::cos(p * freq);
    }
  }
  return Tensor({n, width}, std::move(out));
}

/// Affine map x -> xW + b over the last dimension of a frame matrix.
class Linear {
 public:
  Linear(ParameterStore& store, const std::string& prefix, int in, int out, StreamRng& rng)
      : w_(store.create(prefix + ".w", {in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)))),
        b_(store.create_zeros(prefix + ".b", {out})) {}

  Tensor forward(const Tensor& x) const { return add(matmul(x, w_), b_); }

  int in_dim() const { return w_.dim(0); }
  int out_dim() const { return w_.dim(1); }

 private:
  Tensor& w_;
  Tensor& b_;
};

class LayerNormModule {
 public:
  LayerNormModule(ParameterStore& store, const std::string& prefix, int width)
      : gamma_(store.create_full(prefix + ".gamma", {width}, 1.0)),
        beta_(store.create_zeros(prefix + ".beta", {width})) {}

  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma_, beta_); }

 private:
  Tensor& gamma_;
  Tensor& beta_;
};

struct AttentionResult {
  Tensor output;   // queries x width
  Tensor weights;  // queries x keys, averaged over heads
};

/// Scaled dot-product attention with per-head projections. The optional
/// mask is row-major queries x keys with nonzero meaning blocked; a query
/// row with every key blocked is rejected.
class MultiHeadAttention {
 public:
  MultiHeadAttention(ParameterStore& store, const std::string& prefix, int width, int heads,
                     StreamRng& rng)
      : q_(store, prefix + ".q", width, width, rng),
        k_(store, prefix + ".k", width, width, rng),
        v_(store, prefix + ".v", width, width, rng),
        o_(store, prefix + ".o", width, width, rng),
        width_(width),
        heads_(heads) {
    if (heads < 1 || width % heads != 0) {
      throw UsageError("attention: width " + std::to_string(width) + " not divisible by heads " +
                       std::to_string(heads));
    }
  }

  AttentionResult forward(const Tensor& query, const Tensor& key, const Tensor& value,
                          const std::vector<std::uint8_t>* mask = nullptr) const {
    if (query.ndim() != 2 || key.ndim() != 2 || value.ndim() != 2) {
      throw ShapeError("attention: inputs must be rank-2 frame matrices");
    }
    if (query.dim(1) != width_ || key.dim(1) != width_ || value.dim(1) != width_) {
      throw ShapeError("attention: input width does not match module width " +
                       std::to_string(width_));
    }
    if (key.dim(0) != value.dim(0)) {
      throw ShapeError("attention: key and value frame counts differ");
    }
    const int tq = query.dim(0), tk = key.dim(0);
    if (mask != nullptr) {
      if (static_cast<std::int64_t>(mask->size()) != static_cast<std::int64_t>(tq) * tk) {
        throw ShapeError("attention: mask size does not match queries x keys");
      }
      for (int r = 0; r < tq; ++r) {
        bool any_open = false;
        for (int c = 0; c < tk && !any_open; ++c) {
          any_open = (*mask)[static_cast<std::size_t>(r * tk + c)] == 0;
        }
        if (!any_open) {
          throw UsageError("attention: query row " + std::to_string(r) + " has no unmasked keys");
        }
      }
    }
    const int dh = width_ / heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor qp = q_.forward(query);
    Tensor kp = k_.forward(key);
    Tensor vp = v_.forward(value);
    std::vector<Tensor> head_outs;
    Tensor weight_sum;
    for (int h = 0; h < heads_; ++h) {
      Tensor qh = slice(qp, 1, h * dh, dh);
      Tensor kh = slice(kp, 1, h * dh, dh);
      Tensor vh = slice(vp, 1, h * dh, dh);
      Tensor scores = mul(matmul(qh, transpose(kh)), Tensor::scalar(scale));
      if (mask != nullptr) scores = masked_fill(scores, *mask, -1e30);
      Tensor attn = softmax(scores);
      head_outs.push_back(matmul(attn, vh));
      weight_sum = h == 0 ? attn : add(weight_sum, attn);
    }
    AttentionResult res;
    res.output = o_.forward(concat(head_outs, 1));
    res.weights = div_scalar(weight_sum, static_cast<double>(heads_));
    return res;
  }

  int width() const { return width_; }
  int heads() const { return heads_; }

 private:
  Linear q_, k_, v_, o_;
  int width_;
  int heads_;
};

/// Two-layer position-wise map with a relu between.
class FeedForward {
 public:
  FeedForward(ParameterStore& store, const std::string& prefix, int width, int hidden,
              StreamRng& rng)
      : in_(store, prefix + ".in", width, hidden, rng),
        out_(store, prefix + ".out", hidden, width, rng) {}

  Tensor forward(const Tensor& x) const { return out_.forward(relu(in_.forward(x))); }

 private:
  Linear in_, out_;
};

/// Convolution followed by per-frame normalization and relu. The separable
/// variant factors the convolution into depthwise (grouped, strided) and
/// pointwise stages, which is where the compact models save parameters.
class ConvBlock {
 public:
  ConvBlock(ParameterStore& store, const std::string& prefix, int cin, int cout, int kernel,
            int stride, bool separable, StreamRng& rng)
      : stride_(stride), separable_(separable), norm_(store, prefix + ".norm", cout) {
    if (separable) {
      dw_w_ = &store.create(prefix + ".dw.w", {cin, 1, kernel}, rng,
                            1.0 / std::sqrt(static_cast<double>(kernel)));
      dw_b_ = &store.create_zeros(prefix + ".dw.b", {cin});
      pw_w_ = &store.create(prefix + ".pw.w", {cout, cin, 1}, rng,
                            1.0 / std::sqrt(static_cast<double>(cin)));
      pw_b_ = &store.create_zeros(prefix + ".pw.b", {cout});
    } else {
      w_ = &store.create(prefix + ".w", {cout, cin, kernel}, rng,
                         1.0 / std::sqrt(static_cast<double>(cin * kernel)));
      b_ = &store.create_zeros(prefix + ".b", {cout});
    }
  }

  Tensor forward(const Tensor& x) const {
    Tensor h;
    if (separable_) {
      h = conv1d(x, *dw_w_, *dw_b_, stride_, /*groups=*/x.dim(1));
      h = conv1d(h, *pw_w_, *pw_b_, 1);
    } else {
      h = conv1d(x, *w_, *b_, stride_);
    }
    return relu(norm_.forward(h));
  }

  int stride() const { return stride_; }

 private:
  int stride_;
  bool separable_;
  Tensor* w_ = nullptr;
  Tensor* b_ = nullptr;
  Tensor* dw_w_ = nullptr;
  Tensor* dw_b_ = nullptr;
  Tensor* pw_w_ = nullptr;
  Tensor* pw_b_ = nullptr;
  LayerNormModule norm_;
};

/// Pre-norm residual wrappers. The block output is x plus the sublayer
/// applied to the normalized input.
class SelfAttentionBlock {
 public:
  SelfAttentionBlock(ParameterStore& store, const std::string& prefix, int width, int heads,
                     StreamRng& rng)
      : norm_(store, prefix + ".norm", width), attn_(store, prefix + ".attn", width, heads, rng) {}

  AttentionResult forward(const Tensor& x) const {
    Tensor n = norm_.forward(x);
    AttentionResult r = attn_.forward(n, n, n);
    r.output = add(x, r.output);
    return r;
  }

 private:
  LayerNormModule norm_;
  MultiHeadAttention attn_;
};

class CrossAttentionBlock {
 public:
  CrossAttentionBlock(ParameterStore& store, const std::string& prefix, int width, int heads,
                      StreamRng& rng)
      : norm_(store, prefix + ".norm", width), attn_(store, prefix + ".attn", width, heads, rng) {}

  AttentionResult forward(const Tensor& x, const Tensor& memory) const {
    AttentionResult r = attn_.forward(norm_.forward(x), memory, memory);
    r.output = add(x, r.output);
    return r;
  }

 private:
  LayerNormModule norm_;
  MultiHeadAttention attn_;
};

class FeedForwardBlock {
 public:
  FeedForwardBlock(ParameterStore& store, const std::string& prefix, int width, int hidden,
                   StreamRng& rng)
      : norm_(store, prefix + ".norm", width), ff_(store, prefix + ".ff", width, hidden, rng) {}

  Tensor forward(const Tensor& x) const { return add(x, ff_.forward(norm_.forward(x))); }

 private:
  LayerNormModule norm_;
  FeedForward ff_;
};

}  // namespace otkd
