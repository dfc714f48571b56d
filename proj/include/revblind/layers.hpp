#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "revblind/tensor.hpp"

namespace revblind {

enum class ParamInit { fan_in_uniform, zeros, ones };

/// One trainable tensor with its gradient accumulator.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    std::size_t fan_in = 1;
    ParamInit init_kind = ParamInit::fan_in_uniform;
};

/// Base class for differentiable blocks. A layer owns its parameters and the
/// activation cache it needs for the backward pass; during training it has a
/// single owner, so caching inside the layer is safe.
class Layer {
public:
    explicit Layer(std::string name) : name_(std::move(name)) {}
    virtual ~Layer() = default;

    const std::string& name() const { return name_; }
    Precision precision() const { return prec_; }

    /// Run the layer. `training` enables activation caching for backward.
    virtual Tensor forward(const Tensor& x, bool training) = 0;
    /// Reverse-mode step: accumulates parameter gradients, returns input grad.
    virtual Tensor backward(const Tensor& grad_out) = 0;

    virtual std::vector<Param*> params() { return {}; }
    virtual void set_precision(Precision p);

    /// Deterministic init: weights uniform in +-1/sqrt(fan_in), biases zero,
    /// gains one; each parameter draws from its own seed stream keyed by name.
    void init(std::uint64_t seed);
    void zero_grad();
    std::size_t param_count();

protected:
    Tensor make_output(std::vector<std::size_t> shape) const {
        return Tensor(std::move(shape), prec_);
    }
    void finish(Tensor& t) const;

    std::string name_;
    Precision prec_ = Precision::train32;
};

/// In-place row-wise softmax with max subtraction; rows sum to one.
void softmax_rows(double* m, std::size_t rows, std::size_t cols);

/// y = x W^T + b on the last axis; leading axes are treated as batch.
class Dense : public Layer {
public:
    Dense(std::string name, std::size_t in_dim, std::size_t out_dim);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::vector<Param*> params() override { return {&w, &b}; }

    Param w, b; // w: (out, in), b: (out)

private:
    std::size_t in_, out_;
    Tensor cached_x_;
};

/// 2-D convolution, square kernel, zero padding, NCHW layout.
class Conv2d : public Layer {
public:
    Conv2d(std::string name, std::size_t cin, std::size_t cout, std::size_t kernel,
           std::size_t stride, std::size_t pad);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::vector<Param*> params() override { return {&w, &b}; }

    static std::size_t out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                  std::size_t pad);

    Param w, b; // w: (cout, cin*k*k), b: (cout)

private:
    std::size_t cin_, cout_, k_, s_, p_;
    Tensor cached_x_;
};

/// Strided transposed 2-D convolution (learned upsampling), NCHW layout.
class ConvTranspose2d : public Layer {
public:
    ConvTranspose2d(std::string name, std::size_t cin, std::size_t cout, std::size_t kernel,
                    std::size_t stride, std::size_t pad);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::vector<Param*> params() override { return {&w, &b}; }

    static std::size_t out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                  std::size_t pad);

    Param w, b; // w: (cin, cout*k*k), b: (cout)

private:
    std::size_t cin_, cout_, k_, s_, p_;
    Tensor cached_x_;
};

class ReLU : public Layer {
public:
    explicit ReLU(std::string name) : Layer(std::move(name)) {}
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    std::vector<unsigned char> mask_;
};

class Gelu : public Layer {
public:
    explicit Gelu(std::string name) : Layer(std::move(name)) {}
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    Tensor cached_x_;
};

/// Normalization over the last axis with learned gain and bias.
class LayerNorm : public Layer {
public:
    LayerNorm(std::string name, std::size_t dim, double eps = 1e-5);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::vector<Param*> params() override { return {&gain, &bias}; }

    Param gain, bias;

private:
    std::size_t d_;
    double eps_;
    Tensor cached_xhat_;
    std::vector<double> cached_inv_std_;
};

/// Adds a fixed sinusoidal position table to (N, T, d) token tensors.
class PositionalEncoding : public Layer {
public:
    PositionalEncoding(std::string name, std::size_t max_len, std::size_t dim);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    std::size_t max_len_, d_;
    std::vector<double> table_; // (max_len, d)
};

/// Full bidirectional multi-head self-attention on (N, T, d).
class MultiHeadSelfAttention : public Layer {
public:
    MultiHeadSelfAttention(std::string name, std::size_t dim, std::size_t heads);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::vector<Param*> params() override {
        return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo};
    }

    Param wq, bq, wk, bk, wv, bv, wo, bo;

    /// When set, forward() stores the softmax matrices of the last call in
    /// `last_attention` (layout: (N*heads, T, T)) for inspection.
    bool keep_attention = false;
    std::vector<double> last_attention;

private:
    std::size_t d_, heads_, dh_;
    std::size_t n_ = 0, t_ = 0;
    Tensor cached_x_, cached_q_, cached_k_, cached_v_, cached_o_;
    std::vector<double> cached_attn_; // (N*heads, T, T)
};

/// Ordered pipeline of layers.
class Sequential : public Layer {
public:
    explicit Sequential(std::string name) : Layer(std::move(name)) {}

    template <class L, class... Args>
    L& add(Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        return ref;
    }
    void add_layer(std::unique_ptr<Layer> l) { layers_.push_back(std::move(l)); }

    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::vector<Param*> params() override;
    void set_precision(Precision p) override;

    std::size_t layer_count() const { return layers_.size(); }
    Layer& layer(std::size_t i) { return *layers_[i]; }

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

/// y = x + inner(x).
class Residual : public Layer {
public:
    Residual(std::string name, std::unique_ptr<Layer> inner);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::vector<Param*> params() override { return inner_->params(); }
    void set_precision(Precision p) override;

    Layer& inner() { return *inner_; }

private:
    std::unique_ptr<Layer> inner_;
};

/// (N, C, F, T) feature map -> (N, T, C*F) token sequence.
class TokensFromFeatureMap : public Layer {
public:
    explicit TokensFromFeatureMap(std::string name) : Layer(std::move(name)) {}
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    std::vector<std::size_t> in_shape_;
};

/// (N, C, F, T) -> (N, C*F): mean over the time axis, then flatten.
class PoolTimeFlatten : public Layer {
public:
    explicit PoolTimeFlatten(std::string name) : Layer(std::move(name)) {}
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    std::vector<std::size_t> in_shape_;
};

/// (N, T, d) -> (N, d): mean over tokens.
class TokenMeanPool : public Layer {
public:
    explicit TokenMeanPool(std::string name) : Layer(std::move(name)) {}
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    std::vector<std::size_t> in_shape_;
};

/// (N, C*F) -> (N, C, F, T): broadcast each vector along T learned
/// per-position offset tokens.
class BroadcastTokens : public Layer {
public:
    BroadcastTokens(std::string name, std::size_t c, std::size_t f, std::size_t t);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;
    std::vector<Param*> params() override { return {&tokens}; }

    Param tokens; // (C, F, T)

private:
    std::size_t c_, f_, t_;
};

/// Crop trailing spatial extent: (N, C, H, W) -> (N, C, rows, cols).
class CropToShape : public Layer {
public:
    CropToShape(std::string name, std::size_t rows, std::size_t cols);
    Tensor forward(const Tensor& x, bool training) override;
    Tensor backward(const Tensor& grad_out) override;

private:
    std::size_t rows_, cols_;
    std::vector<std::size_t> in_shape_;
};

/// Pre-norm transformer encoder block: attention and feed-forward sublayers,
/// each wrapped in a residual connection.
std::unique_ptr<Sequential> make_transformer_block(const std::string& name, std::size_t dim,
                                                   std::size_t heads, std::size_t ffn_mult = 2);

} // namespace revblind
