#include "revblind/layers.hpp"

#include <algorithm>
#include <cmath>

#include "revblind/rng.hpp"

namespace revblind {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

Param make_param(const std::string& name, std::vector<std::size_t> shape, std::size_t fan_in,
                 ParamInit kind) {
    Param p;
    p.name = name;
    p.value = Tensor(shape, Precision::train32);
    p.grad = Tensor(std::move(shape), Precision::train32);
    p.fan_in = fan_in;
    p.init_kind = kind;
    return p;
}

void require(bool ok, const std::string& layer, const std::string& what) {
    if (!ok) throw ValueError(layer + ": " + what);
}

} // namespace

void Layer::set_precision(Precision p) {
    prec_ = p;
    for (Param* q : params()) {
        q->value.precision = p;
        q->grad.precision = p;
    }
}

void Layer::init(std::uint64_t seed) {
    for (Param* p : params()) {
        Rng rng(derive_seed(seed, p->name));
        switch (p->init_kind) {
            case ParamInit::fan_in_uniform: {
                // He-style uniform: keeps activation scale roughly constant
                // through rectified stacks.
                const double bound =
                    std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(p->fan_in, 1)));
                for (double& x : p->value.v) x = rng.uniform(-bound, bound);
                // Remove each unit's weight-sum so a strongly offset input
                // (mel energies sit well above zero) cannot gate every unit
                // of a rectified layer at the start of training.  Weight
                // matrices are stored with one unit per row.
                if (p->value.shape.size() == 2 && p->value.shape[1] > 1) {
                    const std::size_t rows = p->value.shape[0], cols = p->value.shape[1];
                    for (std::size_t r = 0; r < rows; ++r) {
                        double m = 0.0;
                        for (std::size_t c = 0; c < cols; ++c) m += p->value.v[r * cols + c];
                        m /= static_cast<double>(cols);
                        for (std::size_t c = 0; c < cols; ++c) p->value.v[r * cols + c] -= m;
                    }
                }
                break;
            }
            case ParamInit::zeros:
                std::fill(p->value.v.begin(), p->value.v.end(), 0.0);
                break;
            case ParamInit::ones:
                std::fill(p->value.v.begin(), p->value.v.end(), 1.0);
                break;
        }
        apply_precision(p->value);
        std::fill(p->grad.v.begin(), p->grad.v.end(), 0.0);
    }
}

void Layer::zero_grad() {
    for (Param* p : params()) std::fill(p->grad.v.begin(), p->grad.v.end(), 0.0);
}

std::size_t Layer::param_count() {
    std::size_t n = 0;
    for (Param* p : params()) n += p->value.size();
    return n;
}

void Layer::finish(Tensor& t) const {
    apply_precision(t);
    check_finite(t, name_);
}

void softmax_rows(double* m, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = m + r * cols;
        double mx = row[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        for (std::size_t c = 0; c < cols; ++c) row[c] /= sum;
    }
}

// ---------------------------------------------------------------- Dense

Dense::Dense(std::string name, std::size_t in_dim, std::size_t out_dim)
    : Layer(std::move(name)),
      w(make_param(name_ + ".w", {out_dim, in_dim}, in_dim, ParamInit::fan_in_uniform)),
      b(make_param(name_ + ".b", {out_dim}, in_dim, ParamInit::zeros)),
      in_(in_dim),
      out_(out_dim) {}

Tensor Dense::forward(const Tensor& x, bool training) {
    require(x.rank() >= 1 && x.shape.back() == in_, name_,
            "expected last dim " + std::to_string(in_) + ", got " + shape_str(x.shape));
    const std::size_t m = x.size() / in_;
    std::vector<std::size_t> out_shape = x.shape;
    out_shape.back() = out_;
    Tensor y = make_output(std::move(out_shape));
    gemm(false, true, m, out_, in_, 1.0, x.v.data(), in_, w.value.v.data(), in_, 0.0,
         y.v.data(), out_);
    for (std::size_t r = 0; r < m; ++r) {
        double* row = y.v.data() + r * out_;
        for (std::size_t c = 0; c < out_; ++c) row[c] += b.value.v[c];
    }
    if (training) cached_x_ = x;
    finish(y);
    return y;
}

Tensor Dense::backward(const Tensor& g) {
    require(!cached_x_.v.empty(), name_, "missing forward cache");
    require(g.shape.back() == out_, name_, "bad grad shape " + shape_str(g.shape));
    const std::size_t m = g.size() / out_;
    require(m * in_ == cached_x_.size(), name_, "grad/input batch mismatch");
    gemm(true, false, out_, in_, m, 1.0, g.v.data(), out_, cached_x_.v.data(), in_, 1.0,
         w.grad.v.data(), in_);
    for (std::size_t r = 0; r < m; ++r) {
        const double* row = g.v.data() + r * out_;
        for (std::size_t c = 0; c < out_; ++c) b.grad.v[c] += row[c];
    }
    Tensor dx = make_output(cached_x_.shape);
    gemm(false, false, m, in_, out_, 1.0, g.v.data(), out_, w.value.v.data(), in_, 0.0,
         dx.v.data(), in_);
    finish(dx);
    return dx;
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, std::size_t cin, std::size_t cout, std::size_t kernel,
               std::size_t stride, std::size_t pad)
    : Layer(std::move(name)),
      w(make_param(name_ + ".w", {cout, cin * kernel * kernel}, cin * kernel * kernel,
                   ParamInit::fan_in_uniform)),
      b(make_param(name_ + ".b", {cout}, cin * kernel * kernel, ParamInit::zeros)),
      cin_(cin),
      cout_(cout),
      k_(kernel),
      s_(stride),
      p_(pad) {
    if (stride == 0 || kernel == 0) throw ValueError(name_ + ": kernel and stride must be positive");
}

std::size_t Conv2d::out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t pad) {
    if (in + 2 * pad < kernel) throw ValueError("conv2d: input smaller than kernel");
    return (in + 2 * pad - kernel) / stride + 1;
}

namespace {

// col[(c*k+i)*k+j][(n*Ho+oh)*Wo+ow] = x[n,c,oh*s+i-p,ow*s+j-p] (0 outside).
void im2col(const double* x, std::size_t n_batch, std::size_t cin, std::size_t h, std::size_t w,
            std::size_t k, std::size_t s, std::size_t p, std::size_t ho, std::size_t wo,
            double* col) {
    const std::size_t cols = n_batch * ho * wo;
    std::fill(col, col + cin * k * k * cols, 0.0);
    for (std::size_t n = 0; n < n_batch; ++n) {
        for (std::size_t c = 0; c < cin; ++c) {
            const double* plane = x + (n * cin + c) * h * w;
            for (std::size_t i = 0; i < k; ++i) {
                for (std::size_t j = 0; j < k; ++j) {
                    double* row = col + ((c * k + i) * k + j) * cols;
                    for (std::size_t oh = 0; oh < ho; ++oh) {
                        const std::ptrdiff_t ih =
                            static_cast<std::ptrdiff_t>(oh * s + i) - static_cast<std::ptrdiff_t>(p);
                        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t ow = 0; ow < wo; ++ow) {
                            const std::ptrdiff_t iw =
                                static_cast<std::ptrdiff_t>(ow * s + j) - static_cast<std::ptrdiff_t>(p);
                            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
                            row[(n * ho + oh) * wo + ow] =
                                plane[static_cast<std::size_t>(ih) * w + static_cast<std::size_t>(iw)];
                        }
                    }
                }
            }
        }
    }
}

// Transpose of im2col: scatter-add column entries back onto the input grid.
void col2im(const double* col, std::size_t n_batch, std::size_t cin, std::size_t h, std::size_t w,
            std::size_t k, std::size_t s, std::size_t p, std::size_t ho, std::size_t wo,
            double* x) {
    const std::size_t cols = n_batch * ho * wo;
    for (std::size_t n = 0; n < n_batch; ++n) {
        for (std::size_t c = 0; c < cin; ++c) {
            double* plane = x + (n * cin + c) * h * w;
            for (std::size_t i = 0; i < k; ++i) {
                for (std::size_t j = 0; j < k; ++j) {
                    const double* row = col + ((c * k + i) * k + j) * cols;
                    for (std::size_t oh = 0; oh < ho; ++oh) {
                        const std::ptrdiff_t ih =
                            static_cast<std::ptrdiff_t>(oh * s + i) - static_cast<std::ptrdiff_t>(p);
                        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t ow = 0; ow < wo; ++ow) {
                            const std::ptrdiff_t iw =
                                static_cast<std::ptrdiff_t>(ow * s + j) - static_cast<std::ptrdiff_t>(p);
                            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(w)) continue;
                            plane[static_cast<std::size_t>(ih) * w + static_cast<std::size_t>(iw)] +=
                                row[(n * ho + oh) * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

} // namespace

Tensor Conv2d::forward(const Tensor& x, bool training) {
    require(x.rank() == 4 && x.shape[1] == cin_, name_,
            "expected (N, " + std::to_string(cin_) + ", H, W), got " + shape_str(x.shape));
    const std::size_t n = x.shape[0], h = x.shape[2], w_in = x.shape[3];
    const std::size_t ho = out_extent(h, k_, s_, p_), wo = out_extent(w_in, k_, s_, p_);
    const std::size_t rows = cin_ * k_ * k_, cols = n * ho * wo;

    std::vector<double> col(rows * cols);
    im2col(x.v.data(), n, cin_, h, w_in, k_, s_, p_, ho, wo, col.data());
    std::vector<double> ymat(cout_ * cols);
    gemm(false, false, cout_, cols, rows, 1.0, w.value.v.data(), rows, col.data(), cols, 0.0,
         ymat.data(), cols);

    Tensor y = make_output({n, cout_, ho, wo});
    for (std::size_t nn = 0; nn < n; ++nn) {
        for (std::size_t co = 0; co < cout_; ++co) {
            double* dst = y.v.data() + (nn * cout_ + co) * ho * wo;
            const double* src = ymat.data() + co * cols + nn * ho * wo;
            const double bias = b.value.v[co];
            for (std::size_t i = 0; i < ho * wo; ++i) dst[i] = src[i] + bias;
        }
    }
    if (training) cached_x_ = x;
    finish(y);
    return y;
}

Tensor Conv2d::backward(const Tensor& g) {
    require(!cached_x_.v.empty(), name_, "missing forward cache");
    const std::size_t n = cached_x_.shape[0], h = cached_x_.shape[2], w_in = cached_x_.shape[3];
    const std::size_t ho = out_extent(h, k_, s_, p_), wo = out_extent(w_in, k_, s_, p_);
    require(g.shape == std::vector<std::size_t>{n, cout_, ho, wo}, name_,
            "bad grad shape " + shape_str(g.shape));
    const std::size_t rows = cin_ * k_ * k_, cols = n * ho * wo;

    std::vector<double> gmat(cout_ * cols);
    for (std::size_t nn = 0; nn < n; ++nn) {
        for (std::size_t co = 0; co < cout_; ++co) {
            const double* src = g.v.data() + (nn * cout_ + co) * ho * wo;
            double* dst = gmat.data() + co * cols + nn * ho * wo;
            double acc = 0.0;
            for (std::size_t i = 0; i < ho * wo; ++i) {
                dst[i] = src[i];
                acc += src[i];
            }
            b.grad.v[co] += acc;
        }
    }

    std::vector<double> col(rows * cols);
    im2col(cached_x_.v.data(), n, cin_, h, w_in, k_, s_, p_, ho, wo, col.data());
    gemm(false, true, cout_, rows, cols, 1.0, gmat.data(), cols, col.data(), cols, 1.0,
         w.grad.v.data(), rows);

    std::vector<double> dcol(rows * cols);
    gemm(true, false, rows, cols, cout_, 1.0, w.value.v.data(), rows, gmat.data(), cols, 0.0,
         dcol.data(), cols);
    Tensor dx = make_output(cached_x_.shape);
    col2im(dcol.data(), n, cin_, h, w_in, k_, s_, p_, ho, wo, dx.v.data());
    finish(dx);
    return dx;
}

// ------------------------------------------------------- ConvTranspose2d

ConvTranspose2d::ConvTranspose2d(std::string name, std::size_t cin, std::size_t cout,
                                 std::size_t kernel, std::size_t stride, std::size_t pad)
    : Layer(std::move(name)),
      w(make_param(name_ + ".w", {cin, cout * kernel * kernel}, cin * kernel * kernel,
                   ParamInit::fan_in_uniform)),
      b(make_param(name_ + ".b", {cout}, cin * kernel * kernel, ParamInit::zeros)),
      cin_(cin),
      cout_(cout),
      k_(kernel),
      s_(stride),
      p_(pad) {
    if (stride == 0 || kernel == 0) throw ValueError(name_ + ": kernel and stride must be positive");
}

std::size_t ConvTranspose2d::out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                        std::size_t pad) {
    const std::size_t grown = (in - 1) * stride + kernel;
    if (grown < 2 * pad) throw ValueError("conv_transpose2d: padding exceeds output");
    return grown - 2 * pad;
}

Tensor ConvTranspose2d::forward(const Tensor& x, bool training) {
    require(x.rank() == 4 && x.shape[1] == cin_, name_,
            "expected (N, " + std::to_string(cin_) + ", H, W), got " + shape_str(x.shape));
    const std::size_t n = x.shape[0], h = x.shape[2], w_in = x.shape[3];
    const std::size_t ho = out_extent(h, k_, s_, p_), wo = out_extent(w_in, k_, s_, p_);
    const std::size_t r2 = cout_ * k_ * k_, hw = h * w_in;

    Tensor y = make_output({n, cout_, ho, wo});
    std::vector<double> m(r2 * hw);
    for (std::size_t nn = 0; nn < n; ++nn) {
        const double* xn = x.v.data() + nn * cin_ * hw;
        gemm(true, false, r2, hw, cin_, 1.0, w.value.v.data(), r2, xn, hw, 0.0, m.data(), hw);
        for (std::size_t co = 0; co < cout_; ++co) {
            double* plane = y.v.data() + (nn * cout_ + co) * ho * wo;
            for (std::size_t i = 0; i < ho * wo; ++i) plane[i] = b.value.v[co];
            for (std::size_t ki = 0; ki < k_; ++ki) {
                for (std::size_t kj = 0; kj < k_; ++kj) {
                    const double* row = m.data() + ((co * k_ + ki) * k_ + kj) * hw;
                    for (std::size_t hh = 0; hh < h; ++hh) {
                        const std::ptrdiff_t oh =
                            static_cast<std::ptrdiff_t>(hh * s_ + ki) - static_cast<std::ptrdiff_t>(p_);
                        if (oh < 0 || oh >= static_cast<std::ptrdiff_t>(ho)) continue;
                        for (std::size_t ww = 0; ww < w_in; ++ww) {
                            const std::ptrdiff_t ow =
                                static_cast<std::ptrdiff_t>(ww * s_ + kj) - static_cast<std::ptrdiff_t>(p_);
                            if (ow < 0 || ow >= static_cast<std::ptrdiff_t>(wo)) continue;
                            plane[static_cast<std::size_t>(oh) * wo + static_cast<std::size_t>(ow)] +=
                                row[hh * w_in + ww];
                        }
                    }
                }
            }
        }
    }
    if (training) cached_x_ = x;
    finish(y);
    return y;
}

Tensor ConvTranspose2d::backward(const Tensor& g) {
    require(!cached_x_.v.empty(), name_, "missing forward cache");
    const std::size_t n = cached_x_.shape[0], h = cached_x_.shape[2], w_in = cached_x_.shape[3];
    const std::size_t ho = out_extent(h, k_, s_, p_), wo = out_extent(w_in, k_, s_, p_);
    require(g.shape == std::vector<std::size_t>{n, cout_, ho, wo}, name_,
            "bad grad shape " + shape_str(g.shape));
    const std::size_t r2 = cout_ * k_ * k_, hw = h * w_in;

    Tensor dx = make_output(cached_x_.shape);
    std::vector<double> gn(r2 * hw);
    for (std::size_t nn = 0; nn < n; ++nn) {
        std::fill(gn.begin(), gn.end(), 0.0);
        for (std::size_t co = 0; co < cout_; ++co) {
            const double* plane = g.v.data() + (nn * cout_ + co) * ho * wo;
            double acc = 0.0;
            for (std::size_t i = 0; i < ho * wo; ++i) acc += plane[i];
            b.grad.v[co] += acc;
            for (std::size_t ki = 0; ki < k_; ++ki) {
                for (std::size_t kj = 0; kj < k_; ++kj) {
                    double* row = gn.data() + ((co * k_ + ki) * k_ + kj) * hw;
                    for (std::size_t hh = 0; hh < h; ++hh) {
                        const std::ptrdiff_t oh =
                            static_cast<std::ptrdiff_t>(hh * s_ + ki) - static_cast<std::ptrdiff_t>(p_);
                        if (oh < 0 || oh >= static_cast<std::ptrdiff_t>(ho)) continue;
                        for (std::size_t ww = 0; ww < w_in; ++ww) {
                            const std::ptrdiff_t ow =
                                static_cast<std::ptrdiff_t>(ww * s_ + kj) - static_cast<std::ptrdiff_t>(p_);
                            if (ow < 0 || ow >= static_cast<std::ptrdiff_t>(wo)) continue;
                            row[hh * w_in + ww] =
                                plane[static_cast<std::size_t>(oh) * wo + static_cast<std::size_t>(ow)];
                        }
                    }
                }
            }
        }
        const double* xn = cached_x_.v.data() + nn * cin_ * hw;
        gemm(false, false, cin_, hw, r2, 1.0, w.value.v.data(), r2, gn.data(), hw, 0.0,
             dx.v.data() + nn * cin_ * hw, hw);
        gemm(false, true, cin_, r2, hw, 1.0, xn, hw, gn.data(), hw, 1.0, w.grad.v.data(), r2);
    }
    finish(dx);
    return dx;
}

// ---------------------------------------------------------- activations

Tensor ReLU::forward(const Tensor& x, bool training) {
    Tensor y = make_output(x.shape);
    if (training) mask_.assign(x.size(), 0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const bool pos = x.v[i] > 0.0;
        y.v[i] = pos ? x.v[i] : 0.0;
        if (training && pos) mask_[i] = 1;
    }
    finish(y);
    return y;
}

Tensor ReLU::backward(const Tensor& g) {
    require(mask_.size() == g.size(), name_, "missing forward cache");
    Tensor dx = make_output(g.shape);
    for (std::size_t i = 0; i < g.size(); ++i) dx.v[i] = mask_[i] ? g.v[i] : 0.0;
    finish(dx);
    return dx;
}

Tensor Gelu::forward(const Tensor& x, bool training) {
    Tensor y = make_output(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
        y.v[i] = 0.5 * x.v[i] * (1.0 + std::erf(x.v[i] * kInvSqrt2));
    }
    if (training) cached_x_ = x;
    finish(y);
    return y;
}

Tensor Gelu::backward(const Tensor& g) {
    require(cached_x_.size() == g.size(), name_, "missing forward cache");
    Tensor dx = make_output(g.shape);
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = cached_x_.v[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        dx.v[i] = g.v[i] * (cdf + x * pdf);
    }
    finish(dx);
    return dx;
}

// ------------------------------------------------------------ LayerNorm

LayerNorm::LayerNorm(std::string name, std::size_t dim, double eps)
    : Layer(std::move(name)),
      gain(make_param(name_ + ".gain", {dim}, dim, ParamInit::ones)),
      bias(make_param(name_ + ".bias", {dim}, dim, ParamInit::zeros)),
      d_(dim),
      eps_(eps) {}

Tensor LayerNorm::forward(const Tensor& x, bool training) {
    require(x.rank() >= 1 && x.shape.back() == d_, name_,
            "expected last dim " + std::to_string(d_) + ", got " + shape_str(x.shape));
    const std::size_t m = x.size() / d_;
    Tensor y = make_output(x.shape);
    Tensor xhat(x.shape, Precision::check64);
    std::vector<double> inv_std(m);
    for (std::size_t r = 0; r < m; ++r) {
        const double* row = x.v.data() + r * d_;
        double mean = 0.0;
        for (std::size_t c = 0; c < d_; ++c) mean += row[c];
        mean /= static_cast<double>(d_);
        double var = 0.0;
        for (std::size_t c = 0; c < d_; ++c) {
            const double dlt = row[c] - mean;
            var += dlt * dlt;
        }
        var /= static_cast<double>(d_);
        const double inv = 1.0 / std::sqrt(var + eps_);
        inv_std[r] = inv;
        for (std::size_t c = 0; c < d_; ++c) {
            const double xh = (row[c] - mean) * inv;
            xhat.v[r * d_ + c] = xh;
            y.v[r * d_ + c] = gain.value.v[c] * xh + bias.value.v[c];
        }
    }
    if (training) {
        cached_xhat_ = std::move(xhat);
        cached_inv_std_ = std::move(inv_std);
    }
    finish(y);
    return y;
}

Tensor LayerNorm::backward(const Tensor& g) {
    require(cached_xhat_.size() == g.size(), name_, "missing forward cache");
    const std::size_t m = g.size() / d_;
    Tensor dx = make_output(g.shape);
    for (std::size_t r = 0; r < m; ++r) {
        const double* grow = g.v.data() + r * d_;
        const double* xh = cached_xhat_.v.data() + r * d_;
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t c = 0; c < d_; ++c) {
            const double gd = gain.value.v[c] * grow[c];
            m1 += gd;
            m2 += gd * xh[c];
            gain.grad.v[c] += grow[c] * xh[c];
            bias.grad.v[c] += grow[c];
        }
        m1 /= static_cast<double>(d_);
        m2 /= static_cast<double>(d_);
        for (std::size_t c = 0; c < d_; ++c) {
            const double gd = gain.value.v[c] * grow[c];
            dx.v[r * d_ + c] = (gd - m1 - xh[c] * m2) * cached_inv_std_[r];
        }
    }
    finish(dx);
    return dx;
}

// -------------------------------------------------- PositionalEncoding

PositionalEncoding::PositionalEncoding(std::string name, std::size_t max_len, std::size_t dim)
    : Layer(std::move(name)), max_len_(max_len), d_(dim), table_(max_len * dim) {
    for (std::size_t t = 0; t < max_len; ++t) {
        for (std::size_t i = 0; i < dim; ++i) {
            const std::size_t pair = i / 2;
            const double freq =
                std::pow(10000.0, -2.0 * static_cast<double>(pair) / static_cast<double>(dim));
            const double angle = static_cast<double>(t) * freq;
            table_[t * dim + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
}

Tensor PositionalEncoding::forward(const Tensor& x, bool) {
    require(x.rank() == 3 && x.shape[2] == d_ && x.shape[1] <= max_len_, name_,
            "expected (N, T<=" + std::to_string(max_len_) + ", " + std::to_string(d_) + "), got " +
                shape_str(x.shape));
    const std::size_t n = x.shape[0], t = x.shape[1];
    Tensor y = make_output(x.shape);
    for (std::size_t nn = 0; nn < n; ++nn) {
        for (std::size_t tt = 0; tt < t; ++tt) {
            const double* src = x.v.data() + (nn * t + tt) * d_;
            const double* pe = table_.data() + tt * d_;
            double* dst = y.v.data() + (nn * t + tt) * d_;
            for (std::size_t c = 0; c < d_; ++c) dst[c] = src[c] + pe[c];
        }
    }
    finish(y);
    return y;
}

Tensor PositionalEncoding::backward(const Tensor& g) {
    Tensor dx = g;
    dx.precision = prec_;
    finish(dx);
    return dx;
}

// ------------------------------------------- MultiHeadSelfAttention

MultiHeadSelfAttention::MultiHeadSelfAttention(std::string name, std::size_t dim, std::size_t heads)
    : Layer(std::move(name)),
      wq(make_param(name_ + ".wq", {dim, dim}, dim, ParamInit::fan_in_uniform)),
      bq(make_param(name_ + ".bq", {dim}, dim, ParamInit::zeros)),
      wk(make_param(name_ + ".wk", {dim, dim}, dim, ParamInit::fan_in_uniform)),
      bk(make_param(name_ + ".bk", {dim}, dim, ParamInit::zeros)),
      wv(make_param(name_ + ".wv", {dim, dim}, dim, ParamInit::fan_in_uniform)),
      bv(make_param(name_ + ".bv", {dim}, dim, ParamInit::zeros)),
      wo(make_param(name_ + ".wo", {dim, dim}, dim, ParamInit::fan_in_uniform)),
      bo(make_param(name_ + ".bo", {dim}, dim, ParamInit::zeros)),
      d_(dim),
      heads_(heads),
      dh_(heads == 0 ? 0 : dim / heads) {
    if (heads == 0 || dim % heads != 0) {
        throw ValueError(name_ + ": head count must divide the model dim");
    }
}

namespace {

// y = x * w^T + b for flat (m, d) token matrices.
void project_tokens(const double* x, std::size_t m, std::size_t d, const Param& w, const Param& b,
                    double* y) {
    gemm(false, true, m, d, d, 1.0, x, d, w.value.v.data(), d, 0.0, y, d);
    for (std::size_t r = 0; r < m; ++r) {
        double* row = y + r * d;
        for (std::size_t c = 0; c < d; ++c) row[c] += b.value.v[c];
    }
}

void accumulate_projection_grads(const double* dproj, const double* x, std::size_t m, std::size_t d,
                                 Param& w, Param& b) {
    gemm(true, false, d, d, m, 1.0, dproj, d, x, d, 1.0, w.grad.v.data(), d);
    for (std::size_t r = 0; r < m; ++r) {
        const double* row = dproj + r * d;
        for (std::size_t c = 0; c < d; ++c) b.grad.v[c] += row[c];
    }
}

} // namespace

Tensor MultiHeadSelfAttention::forward(const Tensor& x, bool training) {
    require(x.rank() == 3 && x.shape[2] == d_, name_,
            "expected (N, T, " + std::to_string(d_) + "), got " + shape_str(x.shape));
    const std::size_t n = x.shape[0], t = x.shape[1], nt = n * t;
    const double alpha = 1.0 / std::sqrt(static_cast<double>(dh_));

    Tensor q(x.shape, Precision::check64), k(x.shape, Precision::check64),
        v(x.shape, Precision::check64), o(x.shape, Precision::check64);
    project_tokens(x.v.data(), nt, d_, wq, bq, q.v.data());
    project_tokens(x.v.data(), nt, d_, wk, bk, k.v.data());
    project_tokens(x.v.data(), nt, d_, wv, bv, v.v.data());

    std::vector<double> attn(n * heads_ * t * t);
    for (std::size_t nn = 0; nn < n; ++nn) {
        for (std::size_t hh = 0; hh < heads_; ++hh) {
            const double* qh = q.v.data() + nn * t * d_ + hh * dh_;
            const double* kh = k.v.data() + nn * t * d_ + hh * dh_;
            const double* vh = v.v.data() + nn * t * d_ + hh * dh_;
            double* a = attn.data() + (nn * heads_ + hh) * t * t;
            gemm(false, true, t, t, dh_, alpha, qh, d_, kh, d_, 0.0, a, t);
            softmax_rows(a, t, t);
            gemm(false, false, t, dh_, t, 1.0, a, t, vh, d_, 0.0,
                 o.v.data() + nn * t * d_ + hh * dh_, d_);
        }
    }
    if (keep_attention) last_attention = attn;

    Tensor y = make_output(x.shape);
    project_tokens(o.v.data(), nt, d_, wo, bo, y.v.data());
    if (training) {
        cached_x_ = x;
        cached_q_ = std::move(q);
        cached_k_ = std::move(k);
        cached_v_ = std::move(v);
        cached_o_ = std::move(o);
        cached_attn_ = std::move(attn);
        n_ = n;
        t_ = t;
    }
    finish(y);
    return y;
}

Tensor MultiHeadSelfAttention::backward(const Tensor& g) {
    require(!cached_x_.v.empty() && g.shape == cached_x_.shape, name_,
            "missing forward cache or bad grad shape");
    const std::size_t n = n_, t = t_, nt = n * t;
    const double alpha = 1.0 / std::sqrt(static_cast<double>(dh_));

    accumulate_projection_grads(g.v.data(), cached_o_.v.data(), nt, d_, wo, bo);
    std::vector<double> dout(nt * d_);
    gemm(false, false, nt, d_, d_, 1.0, g.v.data(), d_, wo.value.v.data(), d_, 0.0, dout.data(),
         d_);

    std::vector<double> dq(nt * d_, 0.0), dk(nt * d_, 0.0), dv(nt * d_, 0.0);
    std::vector<double> da(t * t), ds(t * t);
    for (std::size_t nn = 0; nn < n; ++nn) {
        for (std::size_t hh = 0; hh < heads_; ++hh) {
            const double* a = cached_attn_.data() + (nn * heads_ + hh) * t * t;
            const double* doh = dout.data() + nn * t * d_ + hh * dh_;
            const double* qh = cached_q_.v.data() + nn * t * d_ + hh * dh_;
            const double* kh = cached_k_.v.data() + nn * t * d_ + hh * dh_;
            const double* vh = cached_v_.v.data() + nn * t * d_ + hh * dh_;

            gemm(false, true, t, t, dh_, 1.0, doh, d_, vh, d_, 0.0, da.data(), t);
            gemm(true, false, t, dh_, t, 1.0, a, t, doh, d_, 0.0,
                 dv.data() + nn * t * d_ + hh * dh_, d_);
            for (std::size_t r = 0; r < t; ++r) {
                const double* arow = a + r * t;
                const double* darow = da.data() + r * t;
                double dot = 0.0;
                for (std::size_t c = 0; c < t; ++c) dot += arow[c] * darow[c];
                double* dsrow = ds.data() + r * t;
                for (std::size_t c = 0; c < t; ++c) dsrow[c] = arow[c] * (darow[c] - dot);
            }
            gemm(false, false, t, dh_, t, alpha, ds.data(), t, kh, d_, 0.0,
                 dq.data() + nn * t * d_ + hh * dh_, d_);
            gemm(true, false, t, dh_, t, alpha, ds.data(), t, qh, d_, 0.0,
                 dk.data() + nn * t * d_ + hh * dh_, d_);
        }
    }

    accumulate_projection_grads(dq.data(), cached_x_.v.data(), nt, d_, wq, bq);
    accumulate_projection_grads(dk.data(), cached_x_.v.data(), nt, d_, wk, bk);
    accumulate_projection_grads(dv.data(), cached_x_.v.data(), nt, d_, wv, bv);

    Tensor dx = make_output(cached_x_.shape);
    gemm(false, false, nt, d_, d_, 1.0, dq.data(), d_, wq.value.v.data(), d_, 0.0, dx.v.data(), d_);
    gemm(false, false, nt, d_, d_, 1.0, dk.data(), d_, wk.value.v.data(), d_, 1.0, dx.v.data(), d_);
    gemm(false, false, nt, d_, d_, 1.0, dv.data(), d_, wv.value.v.data(), d_, 1.0, dx.v.data(), d_);
    finish(dx);
    return dx;
}

// ----------------------------------------------------------- Sequential

Tensor Sequential::forward(const Tensor& x, bool training) {
    Tensor cur = x;
    for (auto& l : layers_) cur = l->forward(cur, training);
    return cur;
}

Tensor Sequential::backward(const Tensor& g) {
    Tensor cur = g;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) cur = (*it)->backward(cur);
    return cur;
}

std::vector<Param*> Sequential::params() {
    std::vector<Param*> out;
    for (auto& l : layers_) {
        auto sub = l->params();
        out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
}

void Sequential::set_precision(Precision p) {
    Layer::set_precision(p);
    for (auto& l : layers_) l->set_precision(p);
}

// ------------------------------------------------------------- Residual

Residual::Residual(std::string name, std::unique_ptr<Layer> inner)
    : Layer(std::move(name)), inner_(std::move(inner)) {}

Tensor Residual::forward(const Tensor& x, bool training) {
    Tensor y = inner_->forward(x, training);
    require(same_shape(y, x), name_, "inner branch changed the shape");
    for (std::size_t i = 0; i < y.size(); ++i) y.v[i] += x.v[i];
    finish(y);
    return y;
}

Tensor Residual::backward(const Tensor& g) {
    Tensor dx = inner_->backward(g);
    for (std::size_t i = 0; i < dx.size(); ++i) dx.v[i] += g.v[i];
    finish(dx);
    return dx;
}

void Residual::set_precision(Precision p) {
    Layer::set_precision(p);
    inner_->set_precision(p);
}

// --------------------------------------------------------- reshapes

Tensor TokensFromFeatureMap::forward(const Tensor& x, bool training) {
    require(x.rank() == 4, name_, "expected (N, C, F, T), got " + shape_str(x.shape));
    const std::size_t n = x.shape[0], c = x.shape[1], f = x.shape[2], t = x.shape[3];
    Tensor y = make_output({n, t, c * f});
    for (std::size_t nn = 0; nn < n; ++nn) {
        for (std::size_t cc = 0; cc < c; ++cc) {
            for (std::size_t ff = 0; ff < f; ++ff) {
                const double* src = x.v.data() + ((nn * c + cc) * f + ff) * t;
                for (std::size_t tt = 0; tt < t; ++tt) {
                    y.v[(nn * t + tt) * (c * f) + cc * f + ff] = src[tt];
                }
            }
        }
    }
    if (training) in_shape_ = x.shape;
    finish(y);
    return y;
}

Tensor TokensFromFeatureMap::backward(const Tensor& g) {
    require(!in_shape_.empty(), name_, "missing forward cache");
    const std::size_t n = in_shape_[0], c = in_shape_[1], f = in_shape_[2], t = in_shape_[3];
    Tensor dx = make_output(in_shape_);
    for (std::size_t nn = 0; nn < n; ++nn) {
        for (std::size_t cc = 0; cc < c; ++cc) {
            for (std::size_t ff = 0; ff < f; ++ff) {
                double* dst = dx.v.data() + ((nn * c + cc) * f + ff) * t;
                for (std::size_t tt = 0; tt < t; ++tt) {
                    dst[tt] = g.v[(nn * t + tt) * (c * f) + cc * f + ff];
                }
            }
        }
    }
    finish(dx);
    return dx;
}

Tensor PoolTimeFlatten::forward(const Tensor& x, bool training) {
    require(x.rank() == 4, name_, "expected (N, C, F, T), got " + shape_str(x.shape));
    const std::size_t n = x.shape[0], c = x.shape[1], f = x.shape[2], t = x.shape[3];
    Tensor y = make_output({n, c * f});
    for (std::size_t nn = 0; nn < n; ++nn) {
        for (std::size_t cf = 0; cf < c * f; ++cf) {
            const double* src = x.v.data() + (nn * c * f + cf) * t;
            double acc = 0.0;
            for (std::size_t tt = 0; tt < t; ++tt) acc += src[tt];
            y.v[nn * c * f + cf] = acc / static_cast<double>(t);
        }
    }
    if (training) in_shape_ = x.shape;
    finish(y);
    return y;
}

Tensor PoolTimeFlatten::backward(const Tensor& g) {
    require(!in_shape_.empty(), name_, "missing forward cache");
    const std::size_t n = in_shape_[0], c = in_shape_[1], f = in_shape_[2], t = in_shape_[3];
    Tensor dx = make_output(in_shape_);
    for (std::size_t nn = 0; nn < n; ++nn) {
        for (std::size_t cf = 0; cf < c * f; ++cf) {
            const double share = g.v[nn * c * f + cf] / static_cast<double>(t);
            double* dst = dx.v.data() + (nn * c * f + cf) * t;
            for (std::size_t tt = 0; tt < t; ++tt) dst[tt] = share;
        }
    }
    finish(dx);
    return dx;
}

Tensor TokenMeanPool::forward(const Tensor& x, bool training) {
    require(x.rank() == 3, name_, "expected (N, T, d), got " + shape_str(x.shape));
    const std::size_t n = x.shape[0], t = x.shape[1], d = x.shape[2];
    Tensor y = make_output({n, d});
    for (std::size_t nn = 0; nn < n; ++nn) {
        for (std::size_t c = 0; c < d; ++c) {
            double acc = 0.0;
            for (std::size_t tt = 0; tt < t; ++tt) acc += x.v[(nn * t + tt) * d + c];
            y.v[nn * d + c] = acc / static_cast<double>(t);
        }
    }
    if (training) in_shape_ = x.shape;
    finish(y);
    return y;
}

Tensor TokenMeanPool::backward(const Tensor& g) {
    require(!in_shape_.empty(), name_, "missing forward cache");
    const std::size_t n = in_shape_[0], t = in_shape_[1], d = in_shape_[2];
    Tensor dx = make_output(in_shape_);
    for (std::size_t nn = 0; nn < n; ++nn) {
        for (std::size_t tt = 0; tt < t; ++tt) {
            for (std::size_t c = 0; c < d; ++c) {
                dx.v[(nn * t + tt) * d + c] = g.v[nn * d + c] / static_cast<double>(t);
            }
        }
    }
    finish(dx);
    return dx;
}

BroadcastTokens::BroadcastTokens(std::string name, std::size_t c, std::size_t f, std::size_t t)
    : Layer(std::move(name)),
      tokens(make_param(name_ + ".tokens", {c, f, t}, c * f, ParamInit::zeros)),
      c_(c),
      f_(f),
      t_(t) {}

Tensor BroadcastTokens::forward(const Tensor& x, bool) {
    require(x.rank() == 2 && x.shape[1] == c_ * f_, name_,
            "expected (N, " + std::to_string(c_ * f_) + "), got " + shape_str(x.shape));
    const std::size_t n = x.shape[0];
    Tensor y = make_output({n, c_, f_, t_});
    for (std::size_t nn = 0; nn < n; ++nn) {
        for (std::size_t cf = 0; cf < c_ * f_; ++cf) {
            const double base = x.v[nn * c_ * f_ + cf];
            const double* tok = tokens.value.v.data() + cf * t_;
            double* dst = y.v.data() + (nn * c_ * f_ + cf) * t_;
            for (std::size_t tt = 0; tt < t_; ++tt) dst[tt] = base + tok[tt];
        }
    }
    finish(y);
    return y;
}

Tensor BroadcastTokens::backward(const Tensor& g) {
    require(g.rank() == 4 && g.shape[1] == c_ && g.shape[2] == f_ && g.shape[3] == t_, name_,
            "bad grad shape " + shape_str(g.shape));
    const std::size_t n = g.shape[0];
    Tensor dx = make_output({n, c_ * f_});
    for (std::size_t nn = 0; nn < n; ++nn) {
        for (std::size_t cf = 0; cf < c_ * f_; ++cf) {
            const double* src = g.v.data() + (nn * c_ * f_ + cf) * t_;
            double acc = 0.0;
            for (std::size_t tt = 0; tt < t_; ++tt) {
                acc += src[tt];
                tokens.grad.v[cf * t_ + tt] += src[tt];
            }
            dx.v[nn * c_ * f_ + cf] = acc;
        }
    }
    finish(dx);
    return dx;
}

CropToShape::CropToShape(std::string name, std::size_t rows, std::size_t cols)
    : Layer(std::move(name)), rows_(rows), cols_(cols) {}

Tensor CropToShape::forward(const Tensor& x, bool training) {
    require(x.rank() == 4 && x.shape[2] >= rows_ && x.shape[3] >= cols_, name_,
            "cannot crop " + shape_str(x.shape) + " to (" + std::to_string(rows_) + ", " +
                std::to_string(cols_) + ")");
    const std::size_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
    Tensor y = make_output({n, c, rows_, cols_});
    for (std::size_t nc = 0; nc < n * c; ++nc) {
        for (std::size_t r = 0; r < rows_; ++r) {
            const double* src = x.v.data() + (nc * h + r) * w;
            double* dst = y.v.data() + (nc * rows_ + r) * cols_;
            for (std::size_t cc = 0; cc < cols_; ++cc) dst[cc] = src[cc];
        }
    }
    if (training) in_shape_ = x.shape;
    finish(y);
    return y;
}

Tensor CropToShape::backward(const Tensor& g) {
    require(!in_shape_.empty(), name_, "missing forward cache");
    const std::size_t n = in_shape_[0], c = in_shape_[1], h = in_shape_[2], w = in_shape_[3];
    Tensor dx = make_output(in_shape_);
    for (std::size_t nc = 0; nc < n * c; ++nc) {
        for (std::size_t r = 0; r < rows_; ++r) {
            double* dst = dx.v.data() + (nc * h + r) * w;
            const double* src = g.v.data() + (nc * rows_ + r) * cols_;
            for (std::size_t cc = 0; cc < cols_; ++cc) dst[cc] = src[cc];
        }
    }
    finish(dx);
    return dx;
}

std::unique_ptr<Sequential> make_transformer_block(const std::string& name, std::size_t dim,
                                                   std::size_t heads, std::size_t ffn_mult) {
    auto block = std::make_unique<Sequential>(name);

    auto attn = std::make_unique<Sequential>(name + ".attn");
    attn->add<LayerNorm>(name + ".attn.norm", dim);
    attn->add<MultiHeadSelfAttention>(name + ".attn.mhsa", dim, heads);
    block->add<Residual>(name + ".attn_res", std::move(attn));

    auto ffn = std::make_unique<Sequential>(name + ".ffn");
    ffn->add<LayerNorm>(name + ".ffn.norm", dim);
    ffn->add<Dense>(name + ".ffn.fc1", dim, dim * ffn_mult);
    ffn->add<Gelu>(name + ".ffn.act");
    ffn->add<Dense>(name + ".ffn.fc2", dim * ffn_mult, dim);
    block->add<Residual>(name + ".ffn_res", std::move(ffn));

    return block;
}

} // namespace revblind
