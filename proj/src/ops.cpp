#include "elat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace elat::ops {

namespace {

using Buffer = std::vector<double>;

void check_finite(const char* op, const Buffer& data) {
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw DomainError(std::string(op) + ": produced a non-finite value");
        }
    }
}

// Builds the output tensor and, when grad mode is on and any input requires a
// gradient, records the node.
Tensor make_result(const char* op, Shape shape, Buffer data,
                   std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
    check_finite(op, data);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool track = false;
    if (grad_mode_enabled()) {
        for (const Tensor* in : inputs) track = track || in->requires_grad();
    }
    if (track) {
        auto node = std::make_shared<Node>();
        node->op = op;
        for (const Tensor* in : inputs) node->inputs.push_back(in->impl());
        node->backward = std::move(backward);
        impl->node = std::move(node);
        impl->requires_grad = true;
    }
    return Tensor(std::move(impl));
}

Tensor make_result(const char* op, Shape shape, Buffer data, std::span<const Tensor> inputs,
                   BackwardFn backward) {
    check_finite(op, data);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool track = false;
    if (grad_mode_enabled()) {
        for (const auto& in : inputs) track = track || in.requires_grad();
    }
    if (track) {
        auto node = std::make_shared<Node>();
        node->op = op;
        for (const auto& in : inputs) node->inputs.push_back(in.impl());
        node->backward = std::move(backward);
        impl->node = std::move(node);
        impl->requires_grad = true;
    }
    return Tensor(std::move(impl));
}

enum class Broadcast { same, batch };

Broadcast broadcast_rule(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return Broadcast::same;
    if (a.rank() >= 1 && b.rank() + 1 == a.rank() &&
        std::equal(b.shape().begin(), b.shape().end(), a.shape().begin() + 1)) {
        return Broadcast::batch;
    }
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
}

std::size_t last_extent(const char* op, const Tensor& a) {
    if (a.rank() == 0) throw ShapeError(std::string(op) + ": needs at least one axis");
    std::size_t k = a.shape().back();
    if (k == 0) throw ShapeError(std::string(op) + ": empty trailing axis");
    return k;
}

Shape drop_last(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

template <class F>
Tensor unary(const char* op, const Tensor& a, F&& value, BackwardFn backward) {
    const auto& x = a.data();
    Buffer out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = value(x[i]);
    return make_result(op, a.shape(), std::move(out), {&a}, std::move(backward));
}

// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            c[i * n + j] += s;
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    broadcast_rule("add", a, b);
    const auto& x = a.data();
    const auto& y = b.data();
    const std::size_t inner = y.size();
    Buffer out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i % inner];
    return make_result("add", a.shape(), std::move(out), {&a, &b},
                       [inner](std::span<const double> g, std::span<Buffer*> gin) {
                           if (gin[0]) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                           }
                           if (gin[1]) {
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   (*gin[1])[i % inner] += g[i];
                               }
                           }
                       });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    broadcast_rule("sub", a, b);
    const auto& x = a.data();
    const auto& y = b.data();
    const std::size_t inner = y.size();
    Buffer out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i % inner];
    return make_result("sub", a.shape(), std::move(out), {&a, &b},
                       [inner](std::span<const double> g, std::span<Buffer*> gin) {
                           if (gin[0]) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                           }
                           if (gin[1]) {
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   (*gin[1])[i % inner] -= g[i];
                               }
                           }
                       });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    broadcast_rule("mul", a, b);
    const auto& x = a.data();
    const auto& y = b.data();
    const std::size_t inner = y.size();
    Buffer out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i % inner];
    auto ai = a.impl();
    auto bi = b.impl();
    return make_result("mul", a.shape(), std::move(out), {&a, &b},
                       [ai, bi, inner](std::span<const double> g, std::span<Buffer*> gin) {
                           const auto& x = ai->data;
                           const auto& y = bi->data;
                           if (gin[0]) {
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   (*gin[0])[i] += g[i] * y[i % inner];
                               }
                           }
                           if (gin[1]) {
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   (*gin[1])[i % inner] += g[i] * x[i];
                               }
                           }
                       });
}

Tensor scale(const Tensor& a, double factor) {
    return unary("scale", a, [factor](double v) { return v * factor; },
                 [factor](std::span<const double> g, std::span<Buffer*> gin) {
                     for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * factor;
                 });
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary("add_scalar", a, [value](double v) { return v + value; },
                 [](std::span<const double> g, std::span<Buffer*> gin) {
                     for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                 });
}

Tensor neg(const Tensor& a) {
    return unary("neg", a, [](double v) { return -v; },
                 [](std::span<const double> g, std::span<Buffer*> gin) {
                     for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] -= g[i];
                 });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: cannot contract " + shape_str(a.shape()) + " with " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Buffer out(m * n, 0.0);
    gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
    auto ai = a.impl();
    auto bi = b.impl();
    return make_result("matmul", {m, n}, std::move(out), {&a, &b},
                       [ai, bi, m, n, k](std::span<const double> g, std::span<Buffer*> gin) {
                           // dA = G B^T, dB = A^T G
                           if (gin[0]) gemm_nt(m, k, n, g.data(), bi->data.data(), gin[0]->data());
                           if (gin[1]) gemm_tn(k, n, m, ai->data.data(), g.data(), gin[1]->data());
                       });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dParams params) {
    if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1)) {
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
    }
    const bool has_bias = bias.numel() > 0;
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))) {
        throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " +
                         std::to_string(weight.dim(0)) + " output channels");
    }
    if (params.stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    const std::size_t pad = params.padding, stride = params.stride;
    if (h + 2 * pad < kh || w + 2 * pad < kw) {
        throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
    }
    const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
    const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
    const std::size_t ckk = cin * kh * kw;
    const std::size_t plane = ho * wo;

    // im2col for every sample; kept for the weight gradient.
    auto cols = std::make_shared<Buffer>(batch * ckk * plane, 0.0);
    const double* xd = x.data().data();
    for (std::size_t n = 0; n < batch; ++n) {
        double* col = cols->data() + n * ckk * plane;
        for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t i = 0; i < kh; ++i) {
                for (std::size_t j = 0; j < kw; ++j) {
                    double* dst = col + ((c * kh + i) * kw + j) * plane;
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                        const double* src = xd + ((n * cin + c) * h + iy) * w;
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) -
                                                      static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                            dst[oy * wo + ox] = src[ix];
                        }
                    }
                }
            }
        }
    }

    Buffer out(batch * cout * plane, 0.0);
    const double* wd = weight.data().data();
    for (std::size_t n = 0; n < batch; ++n) {
        double* o = out.data() + n * cout * plane;
        if (has_bias) {
            for (std::size_t oc = 0; oc < cout; ++oc) {
                std::fill(o + oc * plane, o + (oc + 1) * plane, bias.data()[oc]);
            }
        }
        gemm_nn(cout, plane, ckk, wd, cols->data() + n * ckk * plane, o);
    }

    auto wi = weight.impl();
    BackwardFn backward = [=](std::span<const double> g, std::span<Buffer*> gin) {
        Buffer dcol;
        if (gin[0]) dcol.resize(ckk * plane);
        for (std::size_t n = 0; n < batch; ++n) {
            const double* gn = g.data() + n * cout * plane;
            const double* col = cols->data() + n * ckk * plane;
            if (gin[1]) gemm_nt(cout, ckk, plane, gn, col, gin[1]->data());
            if (has_bias && gin.size() > 2 && gin[2]) {
                for (std::size_t oc = 0; oc < cout; ++oc) {
                    double s = 0.0;
                    for (std::size_t p = 0; p < plane; ++p) s += gn[oc * plane + p];
                    (*gin[2])[oc] += s;
                }
            }
            if (!gin[0]) continue;
            std::fill(dcol.begin(), dcol.end(), 0.0);
            gemm_tn(ckk, plane, cout, wi->data.data(), gn, dcol.data());
            double* dx = gin[0]->data();
            for (std::size_t c = 0; c < cin; ++c) {
                for (std::size_t i = 0; i < kh; ++i) {
                    for (std::size_t j = 0; j < kw; ++j) {
                        const double* src = dcol.data() + ((c * kh + i) * kw + j) * plane;
                        for (std::size_t oy = 0; oy < ho; ++oy) {
                            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) -
                                                      static_cast<std::ptrdiff_t>(pad);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                            double* dst = dx + ((n * cin + c) * h + iy) * w;
                            for (std::size_t ox = 0; ox < wo; ++ox) {
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * stride + j) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                dst[ix] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    };
    Shape shape{batch, cout, ho, wo};
    if (has_bias) {
        return make_result("conv2d", std::move(shape), std::move(out), {&x, &weight, &bias},
                           std::move(backward));
    }
    return make_result("conv2d", std::move(shape), std::move(out), {&x, &weight},
                       std::move(backward));
}

Tensor relu(const Tensor& a) {
    auto ai = a.impl();
    return unary("relu", a, [](double v) { return v > 0.0 ? v : 0.0; },
                 [ai](std::span<const double> g, std::span<Buffer*> gin) {
                     const auto& x = ai->data;
                     for (std::size_t i = 0; i < g.size(); ++i) {
                         if (x[i] > 0.0) (*gin[0])[i] += g[i];
                     }
                 });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
    }
    Buffer out(a.data().begin(), a.data().end());
    return make_result("reshape", std::move(shape), std::move(out), {&a},
                       [](std::span<const double> g, std::span<Buffer*> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                       });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    const std::size_t n = a.numel();
    return make_result("sum", {}, Buffer{s}, {&a},
                       [n](std::span<const double> g, std::span<Buffer*> gin) {
                           for (std::size_t i = 0; i < n; ++i) (*gin[0])[i] += g[0];
                       });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean: empty tensor");
    const double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    const std::size_t n = a.numel();
    return make_result("mean", {}, Buffer{s * inv}, {&a},
                       [n, inv](std::span<const double> g, std::span<Buffer*> gin) {
                           const double gi = g[0] * inv;
                           for (std::size_t i = 0; i < n; ++i) (*gin[0])[i] += gi;
                       });
}

Tensor sum_last(const Tensor& a) {
    const std::size_t k = last_extent("sum_last", a);
    const std::size_t rows = a.numel() / k;
    Buffer out(rows, 0.0);
    const auto& x = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += x[r * k + j];
        out[r] = s;
    }
    return make_result("sum_last", drop_last(a.shape()), std::move(out), {&a},
                       [k, rows](std::span<const double> g, std::span<Buffer*> gin) {
                           for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t j = 0; j < k; ++j) (*gin[0])[r * k + j] += g[r];
                           }
                       });
}

Tensor max_last(const Tensor& a) {
    const std::size_t k = last_extent("max_last", a);
    const std::size_t rows = a.numel() / k;
    Buffer out(rows);
    std::vector<std::size_t> arg(rows);
    const auto& x = a.data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j) {
            if (x[r * k + j] > x[r * k + best]) best = j;
        }
        arg[r] = best;
        out[r] = x[r * k + best];
    }
    return make_result("max_last", drop_last(a.shape()), std::move(out), {&a},
                       [k, arg = std::move(arg)](std::span<const double> g, std::span<Buffer*> gin) {
                           for (std::size_t r = 0; r < arg.size(); ++r) {
                               (*gin[0])[r * k + arg[r]] += g[r];
                           }
                       });
}

Tensor exp(const Tensor& a) {
    Buffer out(a.numel());
    const auto& x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i]);
        if (!std::isfinite(out[i])) {
            throw DomainError("exp: overflow for input " + std::to_string(x[i]));
        }
    }
    auto result = make_result("exp", a.shape(), std::move(out), {&a}, {});
    if (result.impl()->node) {
        std::weak_ptr<TensorImpl> self = result.impl();
        // The output holds the node, so capture it weakly to avoid a cycle.
        result.impl()->node->backward = [self](std::span<const double> g, std::span<Buffer*> gin) {
            auto y = self.lock();
            for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * y->data[i];
        };
    }
    return result;
}

Tensor log(const Tensor& a) {
    const auto& x = a.data();
    Buffer out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0.0)) {
            throw DomainError("log: input must be positive, got " + std::to_string(x[i]));
        }
        out[i] = std::log(x[i]);
    }
    auto ai = a.impl();
    return make_result("log", a.shape(), std::move(out), {&a},
                       [ai](std::span<const double> g, std::span<Buffer*> gin) {
                           for (std::size_t i = 0; i < g.size(); ++i) {
                               (*gin[0])[i] += g[i] / ai->data[i];
                           }
                       });
}

namespace {

// Row-wise softmax of a [rows, k] buffer, max-subtracted.
Buffer softmax_rows(std::span<const double> x, std::size_t rows, std::size_t k) {
    Buffer p(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* z = x.data() + r * k;
        const double m = *std::max_element(z, z + k);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            p[r * k + j] = std::exp(z[j] - m);
            s += p[r * k + j];
        }
        for (std::size_t j = 0; j < k; ++j) p[r * k + j] /= s;
    }
    return p;
}

void require_finite_input(const char* op, const Tensor& a) {
    for (double v : a.data()) {
        if (!std::isfinite(v)) throw DomainError(std::string(op) + ": non-finite input");
    }
}

}  // namespace

Tensor logsumexp(const Tensor& a) {
    const std::size_t k = last_extent("logsumexp", a);
    require_finite_input("logsumexp", a);
    const std::size_t rows = a.numel() / k;
    const auto& x = a.data();
    Buffer out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* z = x.data() + r * k;
        const double m = *std::max_element(z, z + k);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(z[j] - m);
        out[r] = m + std::log(s);
    }
    auto ai = a.impl();
    return make_result("logsumexp", drop_last(a.shape()), std::move(out), {&a},
                       [ai, rows, k](std::span<const double> g, std::span<Buffer*> gin) {
                           const Buffer p = softmax_rows(ai->data, rows, k);
                           for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t j = 0; j < k; ++j) {
                                   (*gin[0])[r * k + j] += g[r] * p[r * k + j];
                               }
                           }
                       });
}

Tensor softmax(const Tensor& a) {
    const std::size_t k = last_extent("softmax", a);
    require_finite_input("softmax", a);
    const std::size_t rows = a.numel() / k;
    Buffer p = softmax_rows(a.data(), rows, k);
    auto probs = std::make_shared<Buffer>(p);
    return make_result("softmax", a.shape(), std::move(p), {&a},
                       [probs, rows, k](std::span<const double> g, std::span<Buffer*> gin) {
                           const auto& s = *probs;
                           for (std::size_t r = 0; r < rows; ++r) {
                               double dot = 0.0;
                               for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * s[r * k + j];
                               for (std::size_t j = 0; j < k; ++j) {
                                   (*gin[0])[r * k + j] += s[r * k + j] * (g[r * k + j] - dot);
                               }
                           }
                       });
}

Tensor log_softmax(const Tensor& a) {
    const std::size_t k = last_extent("log_softmax", a);
    require_finite_input("log_softmax", a);
    const std::size_t rows = a.numel() / k;
    const auto& x = a.data();
    Buffer out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* z = x.data() + r * k;
        const double m = *std::max_element(z, z + k);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(z[j] - m);
        const double lse = m + std::log(s);
        for (std::size_t j = 0; j < k; ++j) out[r * k + j] = z[j] - lse;
    }
    auto ai = a.impl();
    return make_result("log_softmax", a.shape(), std::move(out), {&a},
                       [ai, rows, k](std::span<const double> g, std::span<Buffer*> gin) {
                           const Buffer p = softmax_rows(ai->data, rows, k);
                           for (std::size_t r = 0; r < rows; ++r) {
                               double gs = 0.0;
                               for (std::size_t j = 0; j < k; ++j) gs += g[r * k + j];
                               for (std::size_t j = 0; j < k; ++j) {
                                   (*gin[0])[r * k + j] += g[r * k + j] - p[r * k + j] * gs;
                               }
                           }
                       });
}

Tensor gather(const Tensor& a, std::span<const std::size_t> index) {
    if (a.rank() != 2) throw ShapeError("gather: expects [N,K], got " + shape_str(a.shape()));
    const std::size_t rows = a.dim(0), k = a.dim(1);
    if (index.size() != rows) {
        throw ShapeError("gather: " + std::to_string(index.size()) + " indices for " +
                         std::to_string(rows) + " rows");
    }
    Buffer out(rows);
    std::vector<std::size_t> idx(index.begin(), index.end());
    for (std::size_t r = 0; r < rows; ++r) {
        if (idx[r] >= k) {
            throw ShapeError("gather: index " + std::to_string(idx[r]) + " out of range for " +
                             std::to_string(k) + " columns");
        }
        out[r] = a.data()[r * k + idx[r]];
    }
    return make_result("gather", {rows}, std::move(out), {&a},
                       [k, idx = std::move(idx)](std::span<const double> g, std::span<Buffer*> gin) {
                           for (std::size_t r = 0; r < idx.size(); ++r) {
                               (*gin[0])[r * k + idx[r]] += g[r];
                           }
                       });
}

Tensor l2_norm(const Tensor& a) {
    const std::size_t k = last_extent("l2_norm", a);
    const std::size_t rows = a.numel() / k;
    const auto& x = a.data();
    Buffer out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += x[r * k + j] * x[r * k + j];
        out[r] = std::sqrt(s);
    }
    auto ai = a.impl();
    auto norms = std::make_shared<Buffer>(out);
    return make_result("l2_norm", drop_last(a.shape()), std::move(out), {&a},
                       [ai, norms, rows, k](std::span<const double> g, std::span<Buffer*> gin) {
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double nr = (*norms)[r];
                               if (nr == 0.0) continue;
                               for (std::size_t j = 0; j < k; ++j) {
                                   (*gin[0])[r * k + j] += g[r] * ai->data[r * k + j] / nr;
                               }
                           }
                       });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (lo > hi) throw DomainError("clamp: lower bound exceeds upper bound");
    auto ai = a.impl();
    return unary("clamp", a, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                 [ai, lo, hi](std::span<const double> g, std::span<Buffer*> gin) {
                     const auto& x = ai->data;
                     for (std::size_t i = 0; i < g.size(); ++i) {
                         if (x[i] >= lo && x[i] <= hi) (*gin[0])[i] += g[i];
                     }
                 });
}

Tensor sign(const Tensor& a) {
    return unary("sign", a, [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); },
                 [](std::span<const double>, std::span<Buffer*>) {});
}

Tensor stack_last(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("stack_last: no inputs");
    const Shape& base = parts.front().shape();
    for (const auto& p : parts) {
        if (p.shape() != base) {
            throw ShapeError("stack_last: mismatched shapes " + shape_str(base) + " and " +
                             shape_str(p.shape()));
        }
    }
    const std::size_t n = shape_numel(base);
    const std::size_t k = parts.size();
    Buffer out(n * k);
    for (std::size_t j = 0; j < k; ++j) {
        const auto& d = parts[j].data();
        for (std::size_t i = 0; i < n; ++i) out[i * k + j] = d[i];
    }
    Shape shape = base;
    shape.push_back(k);
    return make_result("stack_last", std::move(shape), std::move(out), parts,
                       [n, k](std::span<const double> g, std::span<Buffer*> gin) {
                           for (std::size_t j = 0; j < k; ++j) {
                               if (!gin[j]) continue;
                               for (std::size_t i = 0; i < n; ++i) (*gin[j])[i] += g[i * k + j];
                           }
                       });
}

}  // namespace elat::ops
