#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "breaknet/tensor.hpp"

namespace breaknet {

// Differentiable primitives. Every op validates shapes, computes its forward
// value eagerly and, when any input requires grad and recording is enabled,
// appends its backward closure to the current thread's tape.

/// 2-D convolution over N x Cin x H x W with weight Cout x (Cin/groups) x kh x kw.
/// `bias` may be an undefined tensor.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int padding = 0, int groups = 1);

/// Average pooling; zero padding counts toward the window size.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, int kernel, int stride, int padding);

/// Bilinear resize with the align-corners convention.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, std::int64_t target_h, std::int64_t target_w);

template <typename T>
Tensor<T> softmax(const Tensor<T>& input, int axis);

/// Normalizes each position over the channel axis (axis 1).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormStats(std::int64_t channels = 0)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

/// Batch normalization per channel over N x H x W.
///
/// Train mode normalizes with the biased batch variance and folds the
/// unbiased one into the running estimate with the given momentum. Eval mode
/// uses the running estimates, which start at mean 0 / var 1.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormStats<T>& stats, bool train, T momentum = T(0.1), T eps = T(1e-5));

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& input, T slope = T(0.01));

/// Exact GELU, x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& input);

/// Inverted dropout. Identity in eval mode or when p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& input, double p, bool train, std::mt19937_64& rng);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Batched product of rank-3 operands; each may be read transposed in its last two axes.
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a = false,
                         bool transpose_b = false);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& inputs, int axis);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

namespace detail {

/// True when an op over these inputs must be recorded.
template <typename T>
bool needs_grad(std::initializer_list<const Tensor<T>*> inputs);

/// Marks `out` as produced by a taped op and records its backward closure.
template <typename T>
void attach(Tensor<T>& out, const char* op, std::initializer_list<const Tensor<T>*> inputs,
            std::function<void()> backward_fn);

/// Returns the gradient buffer of `node`, allocating zeros on first use.
template <typename T>
T* grad_of(TensorNode<T>& node);

}  // namespace detail

}  // namespace breaknet
