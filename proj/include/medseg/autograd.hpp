#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// A Graph records every op applied during one forward pass. Parameters live
// outside the graph in a ParameterSet and are referenced, not copied; their
// gradients accumulate into a caller-owned Gradients buffer, so several
// graphs can run concurrently against one frozen ParameterSet.

#include "medseg/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

namespace medseg::ag {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
class ParameterSet {
  public:
    std::size_t add(std::string name, Matrix<T> init) {
        if (index_.count(name)) throw InvalidArgument("duplicate parameter " + name);
        index_.emplace(name, values_.size());
        names_.push_back(std::move(name));
        values_.push_back(std::move(init));
        return values_.size() - 1;
    }

    std::size_t size() const { return values_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    const std::vector<std::string>& names() const { return names_; }
    Matrix<T>& value(std::size_t i) { return values_[i]; }
    const Matrix<T>& value(std::size_t i) const { return values_[i]; }

    std::size_t index(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw InvalidArgument("unknown parameter " + name);
        return it->second;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
        return n;
    }

  private:
    std::vector<std::string> names_;
    std::vector<Matrix<T>> values_;
    std::unordered_map<std::string, std::size_t> index_;
};

template <class T>
struct Gradients {
    std::vector<Matrix<T>> grads;

    static Gradients zeros_like(const ParameterSet<T>& p) {
        Gradients g;
        for (std::size_t i = 0; i < p.size(); ++i) g.grads.push_back(Matrix<T>::Zero(p.value(i).rows(), p.value(i).cols()));
        return g;
    }
    void set_zero() {
        for (auto& m : grads) m.setZero();
    }
    Gradients& operator+=(const Gradients& o) {
        for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += o.grads[i];
        return *this;
    }
    T squared_norm() const {
        T s = 0;
        for (const auto& m : grads) s += m.squaredNorm();
        return s;
    }
};

/// Test hook that corrupts one backward rule; used as a negative control for
/// gradient checking.
enum class GradientFault { none, gelu_derivative };

struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

template <class T>
class Graph {
  public:
    using Mat = Matrix<T>;

    /// `grads == nullptr` builds an inference-only graph with no tape.
    explicit Graph(const ParameterSet<T>& params, Gradients<T>* grads = nullptr,
                   GradientFault fault = GradientFault::none)
        : params_(params), grads_(grads), fault_(fault), param_nodes_(params.size(), -1) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return grads_ != nullptr; }

    const Mat& value(Var v) const {
        const auto& n = nodes_[static_cast<std::size_t>(v.id)];
        return n.ref ? *n.ref : n.value;
    }
    T scalar(Var v) const { return value(v)(0, 0); }
    Eigen::Index rows(Var v) const { return value(v).rows(); }
    Eigen::Index cols(Var v) const { return value(v).cols(); }

    Var input(Mat m) { return push(std::move(m), false, {}); }

    Var param(std::size_t index) {
        auto& cached = param_nodes_.at(index);
        if (cached >= 0) return Var{cached};
        Node n;
        n.ref = &params_.value(index);
        n.needs_grad = recording();
        n.param = static_cast<std::int32_t>(index);
        nodes_.push_back(std::move(n));
        cached = static_cast<std::int32_t>(nodes_.size() - 1);
        return Var{cached};
    }

    /// Runs reverse accumulation from a 1x1 node into the Gradients buffer.
    void backward(Var loss) {
        if (!recording()) throw InvalidArgument("backward on a non-recording graph");
        if (rows(loss) != 1 || cols(loss) != 1) throw ShapeError("backward needs a scalar");
        if (!nodes_[static_cast<std::size_t>(loss.id)].needs_grad) return;
        grad_ref(loss.id).setConstant(T(1));
        for (std::int32_t i = loss.id; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (n.grad.size() == 0) continue;
            if (n.back) n.back(*this, i);
            if (n.param >= 0) grads_->grads[static_cast<std::size_t>(n.param)] += n.grad;
        }
    }

    // ---- ops -------------------------------------------------------------

    Var matmul(Var a, Var b) {
        check(cols(a) == rows(b), "matmul inner dimensions");
        Mat out(rows(a), cols(b));
        out.noalias() = value(a) * value(b);
        return op(std::move(out), {a, b}, [a, b](Graph& g, std::int32_t self) {
            const Mat& dy = g.grad_of(self);
            if (g.needs(a)) g.grad_ref(a.id).noalias() += dy * g.value(b).transpose();
            if (g.needs(b)) g.grad_ref(b.id).noalias() += g.value(a).transpose() * dy;
        });
    }

    /// a * b^T
    Var matmul_nt(Var a, Var b) {
        check(cols(a) == cols(b), "matmul_nt inner dimensions");
        Mat out(rows(a), rows(b));
        out.noalias() = value(a) * value(b).transpose();
        return op(std::move(out), {a, b}, [a, b](Graph& g, std::int32_t self) {
            const Mat& dy = g.grad_of(self);
            if (g.needs(a)) g.grad_ref(a.id).noalias() += dy * g.value(b);
            if (g.needs(b)) g.grad_ref(b.id).noalias() += dy.transpose() * g.value(a);
        });
    }

    Var add(Var a, Var b) {
        check(rows(a) == rows(b) && cols(a) == cols(b), "add shapes");
        return op(value(a) + value(b), {a, b}, [a, b](Graph& g, std::int32_t self) {
            const Mat& dy = g.grad_of(self);
            if (g.needs(a)) g.grad_ref(a.id) += dy;
            if (g.needs(b)) g.grad_ref(b.id) += dy;
        });
    }

    /// Adds a 1 x n row to every row of a.
    Var add_row(Var a, Var row) {
        check(rows(row) == 1 && cols(row) == cols(a), "add_row shapes");
        Mat out = value(a);
        out.rowwise() += value(row).row(0);
        return op(std::move(out), {a, row}, [a, row](Graph& g, std::int32_t self) {
            const Mat& dy = g.grad_of(self);
            if (g.needs(a)) g.grad_ref(a.id) += dy;
            if (g.needs(row)) g.grad_ref(row.id) += dy.colwise().sum();
        });
    }

    /// a @ w + bias
    Var affine(Var a, Var w, Var bias) { return add_row(matmul(a, w), bias); }

    Var scale(Var a, T s) {
        return op(value(a) * s, {a}, [a, s](Graph& g, std::int32_t self) {
            if (g.needs(a)) g.grad_ref(a.id) += g.grad_of(self) * s;
        });
    }

    /// Sum of 1x1 nodes.
    Var sum_scalars(std::span<const Var> xs) {
        Mat out = Mat::Zero(1, 1);
        for (Var x : xs) {
            check(rows(x) == 1 && cols(x) == 1, "sum_scalars takes 1x1 nodes");
            out(0, 0) += scalar(x);
        }
        std::vector<Var> parents(xs.begin(), xs.end());
        return op(std::move(out), parents, [parents](Graph& g, std::int32_t self) {
            const T dy = g.grad_of(self)(0, 0);
            for (Var x : parents) {
                if (g.needs(x)) g.grad_ref(x.id)(0, 0) += dy;
            }
        });
    }

    /// GELU, tanh approximation.
    Var gelu(Var a) {
        const Mat& x = value(a);
        Mat out(x.rows(), x.cols());
        constexpr T c = static_cast<T>(0.7978845608028654); // sqrt(2/pi)
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            const T v = x.data()[i];
            out.data()[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + T(0.044715) * v * v * v)));
        }
        const T fault = fault_ == GradientFault::gelu_derivative ? T(1.5) : T(1);
        return op(std::move(out), {a}, [a, fault](Graph& g, std::int32_t self) {
            if (!g.needs(a)) return;
            const Mat& x = g.value(a);
            const Mat& dy = g.grad_of(self);
            Mat& dx = g.grad_ref(a.id);
            for (Eigen::Index i = 0; i < x.size(); ++i) {
                const T v = x.data()[i];
                const T t = std::tanh(c * (v + T(0.044715) * v * v * v));
                const T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * c * (T(1) + T(3 * 0.044715) * v * v);
                dx.data()[i] += dy.data()[i] * d * fault;
            }
        });
    }

    /// Row-wise layer normalisation with affine 1 x n gain and bias.
    Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5)) {
        const Mat& xv = value(x);
        const Eigen::Index n = xv.cols();
        check(cols(gain) == n && cols(bias) == n, "layer_norm shapes");
        auto xhat = std::make_shared<Mat>(xv.rows(), n);
        auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(xv.rows()));
        for (Eigen::Index r = 0; r < xv.rows(); ++r) {
            const T mean = xv.row(r).mean();
            const T var = (xv.row(r).array() - mean).square().mean();
            const T is = T(1) / std::sqrt(var + eps);
            (*inv_std)[static_cast<std::size_t>(r)] = is;
            xhat->row(r) = (xv.row(r).array() - mean) * is;
        }
        Mat out = xhat->array().rowwise() * value(gain).row(0).array();
        out.rowwise() += value(bias).row(0);
        return op(std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv_std](Graph& g, std::int32_t self) {
            const Mat& dy = g.grad_of(self);
            if (g.needs(gain)) g.grad_ref(gain.id) += (dy.array() * xhat->array()).colwise().sum().matrix();
            if (g.needs(bias)) g.grad_ref(bias.id) += dy.colwise().sum();
            if (!g.needs(x)) return;
            const auto gv = g.value(gain).row(0).array();
            Mat& dx = g.grad_ref(x.id);
            for (Eigen::Index r = 0; r < dy.rows(); ++r) {
                const Eigen::Array<T, 1, Eigen::Dynamic> dh = dy.row(r).array() * gv;
                const T m1 = dh.mean();
                const T m2 = (dh * xhat->row(r).array()).mean();
                dx.row(r).array() += (*inv_std)[static_cast<std::size_t>(r)] * (dh - m1 - xhat->row(r).array() * m2);
            }
        });
    }

    /// Multi-head scaled dot-product attention. Positions < prefix_len attend
    /// to each other freely; later positions attend to the prefix and to
    /// themselves and earlier positions.
    Var attention(Var q, Var k, Var v, int heads, Eigen::Index prefix_len) {
        const Mat& Q = value(q);
        const Mat& K = value(k);
        const Mat& V = value(v);
        const Eigen::Index S = Q.rows();
        const Eigen::Index D = Q.cols();
        check(K.rows() == S && V.rows() == S && K.cols() == D && V.cols() == D && D % heads == 0, "attention shapes");
        const Eigen::Index dh = D / heads;
        const T sc = T(1) / std::sqrt(static_cast<T>(dh));
        auto probs = std::make_shared<std::vector<Mat>>(static_cast<std::size_t>(heads));
        Mat out(S, D);
        for (int h = 0; h < heads; ++h) {
            Mat s(S, S);
            s.noalias() = Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose();
            for (Eigen::Index i = 0; i < S; ++i) {
                const Eigen::Index allowed = i < prefix_len ? prefix_len : i + 1;
                const T mx = s.row(i).head(allowed).maxCoeff();
                T denom = 0;
                for (Eigen::Index j = 0; j < allowed; ++j) {
                    const T e = std::exp((s(i, j) - mx) * sc);
                    s(i, j) = e;
                    denom += e;
                }
                s.row(i).head(allowed) /= denom;
                s.row(i).tail(S - allowed).setZero();
            }
            out.middleCols(h * dh, dh).noalias() = s * V.middleCols(h * dh, dh);
            (*probs)[static_cast<std::size_t>(h)] = std::move(s);
        }
        return op(std::move(out), {q, k, v}, [q, k, v, heads, dh, sc, probs](Graph& g, std::int32_t self) {
            const Mat& dy = g.grad_of(self);
            const Mat& Qv = g.value(q);
            const Mat& Kv = g.value(k);
            const Mat& Vv = g.value(v);
            for (int h = 0; h < heads; ++h) {
                const Mat& P = (*probs)[static_cast<std::size_t>(h)];
                const Mat dyh = dy.middleCols(h * dh, dh);
                if (g.needs(v)) g.grad_ref(v.id).middleCols(h * dh, dh).noalias() += P.transpose() * dyh;
                if (!g.needs(q) && !g.needs(k)) continue;
                Mat dp(P.rows(), P.cols());
                dp.noalias() = dyh * Vv.middleCols(h * dh, dh).transpose();
                const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = (dp.array() * P.array()).rowwise().sum();
                Mat ds = P.array() * (dp.colwise() - rowdot).array();
                ds *= sc;
                if (g.needs(q)) g.grad_ref(q.id).middleCols(h * dh, dh).noalias() += ds * Kv.middleCols(h * dh, dh);
                if (g.needs(k)) g.grad_ref(k.id).middleCols(h * dh, dh).noalias() += ds.transpose() * Qv.middleCols(h * dh, dh);
            }
        });
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    Var gather_rows(Var table, std::vector<Eigen::Index> ids) {
        const Mat& t = value(table);
        Mat out(static_cast<Eigen::Index>(ids.size()), t.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            check(ids[i] >= 0 && ids[i] < t.rows(), "gather_rows index");
            out.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
        }
        return op(std::move(out), {table}, [table, ids = std::move(ids)](Graph& g, std::int32_t self) {
            if (!g.needs(table)) return;
            const Mat& dy = g.grad_of(self);
            Mat& dt = g.grad_ref(table.id);
            for (std::size_t i = 0; i < ids.size(); ++i) dt.row(ids[i]) += dy.row(static_cast<Eigen::Index>(i));
        });
    }

    /// Contiguous row range [begin, begin + count).
    Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count) {
        check(begin >= 0 && count >= 0 && begin + count <= rows(a), "slice_rows range");
        Mat out = value(a).middleRows(begin, count);
        return op(std::move(out), {a}, [a, begin, count](Graph& g, std::int32_t self) {
            if (g.needs(a)) g.grad_ref(a.id).middleRows(begin, count) += g.grad_of(self);
        });
    }

    Var concat_rows(std::span<const Var> parts) {
        Eigen::Index total = 0;
        const Eigen::Index c = cols(parts.front());
        for (Var p : parts) {
            check(cols(p) == c, "concat_rows column counts");
            total += rows(p);
        }
        Mat out(total, c);
        Eigen::Index at = 0;
        for (Var p : parts) {
            out.middleRows(at, rows(p)) = value(p);
            at += rows(p);
        }
        std::vector<Var> ps(parts.begin(), parts.end());
        return op(std::move(out), ps, [ps](Graph& g, std::int32_t self) {
            const Mat& dy = g.grad_of(self);
            Eigen::Index at = 0;
            for (Var p : ps) {
                const Eigen::Index r = g.rows(p);
                if (g.needs(p)) g.grad_ref(p.id) += dy.middleRows(at, r);
                at += r;
            }
        });
    }

    Var concat_cols(Var a, Var b) {
        check(rows(a) == rows(b), "concat_cols row counts");
        Mat out(rows(a), cols(a) + cols(b));
        out.leftCols(cols(a)) = value(a);
        out.rightCols(cols(b)) = value(b);
        return op(std::move(out), {a, b}, [a, b](Graph& g, std::int32_t self) {
            const Mat& dy = g.grad_of(self);
            if (g.needs(a)) g.grad_ref(a.id) += dy.leftCols(g.cols(a));
            if (g.needs(b)) g.grad_ref(b.id) += dy.rightCols(g.cols(b));
        });
    }

    /// 3x3 patches with zero padding 1. `x` is an (h*w) x c feature map in
    /// row-major pixel order; the result has one row per output pixel and
    /// 9*c columns ordered (ky, kx, channel).
    Var im2col3x3(Var x, int h, int w, int stride) {
        const Mat& xv = value(x);
        const Eigen::Index c = xv.cols();
        check(xv.rows() == static_cast<Eigen::Index>(h) * w, "im2col input size");
        const int ho = (h - 1) / stride + 1;
        const int wo = (w - 1) / stride + 1;
        Mat out = Mat::Zero(static_cast<Eigen::Index>(ho) * wo, 9 * c);
        for (int i = 0; i < ho; ++i) {
            for (int j = 0; j < wo; ++j) {
                const Eigen::Index row = static_cast<Eigen::Index>(i) * wo + j;
                for (int ky = 0; ky < 3; ++ky) {
                    const int r = i * stride + ky - 1;
                    if (r < 0 || r >= h) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int cc = j * stride + kx - 1;
                        if (cc < 0 || cc >= w) continue;
                        out.row(row).segment((ky * 3 + kx) * c, c) = xv.row(static_cast<Eigen::Index>(r) * w + cc);
                    }
                }
            }
        }
        return op(std::move(out), {x}, [x, h, w, stride, ho, wo, c](Graph& g, std::int32_t self) {
            if (!g.needs(x)) return;
            const Mat& dy = g.grad_of(self);
            Mat& dx = g.grad_ref(x.id);
            for (int i = 0; i < ho; ++i) {
                for (int j = 0; j < wo; ++j) {
                    const Eigen::Index row = static_cast<Eigen::Index>(i) * wo + j;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int r = i * stride + ky - 1;
                        if (r < 0 || r >= h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int cc = j * stride + kx - 1;
                            if (cc < 0 || cc >= w) continue;
                            dx.row(static_cast<Eigen::Index>(r) * w + cc) += dy.row(row).segment((ky * 3 + kx) * c, c);
                        }
                    }
                }
            }
        });
    }

    /// Bilinear upsampling (half-pixel centres, edge clamped) of an
    /// (h*w) x c map by an integer factor.
    Var upsample_bilinear(Var x, int h, int w, int factor) {
        check(rows(x) == static_cast<Eigen::Index>(h) * w && factor >= 1, "upsample input size");
        const int ho = h * factor;
        const int wo = w * factor;
        auto taps = [factor](int dst, int n) {
            double src = (dst + 0.5) / factor - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(n - 1));
            const int i0 = static_cast<int>(std::floor(src));
            const int i1 = std::min(i0 + 1, n - 1);
            return std::tuple<int, int, T>{i0, i1, static_cast<T>(src - i0)};
        };
        struct Tap {
            Eigen::Index src[4];
            T weight[4];
        };
        auto table = std::make_shared<std::vector<Tap>>(static_cast<std::size_t>(ho) * wo);
        for (int r = 0; r < ho; ++r) {
            const auto [r0, r1, fr] = taps(r, h);
            for (int c = 0; c < wo; ++c) {
                const auto [c0, c1, fc] = taps(c, w);
                Tap& t = (*table)[static_cast<std::size_t>(r) * wo + c];
                t.src[0] = static_cast<Eigen::Index>(r0) * w + c0;
                t.src[1] = static_cast<Eigen::Index>(r0) * w + c1;
                t.src[2] = static_cast<Eigen::Index>(r1) * w + c0;
                t.src[3] = static_cast<Eigen::Index>(r1) * w + c1;
                t.weight[0] = (T(1) - fr) * (T(1) - fc);
                t.weight[1] = (T(1) - fr) * fc;
                t.weight[2] = fr * (T(1) - fc);
                t.weight[3] = fr * fc;
            }
        }
        const Mat& xv = value(x);
        Mat out = Mat::Zero(static_cast<Eigen::Index>(ho) * wo, xv.cols());
        for (std::size_t i = 0; i < table->size(); ++i) {
            const Tap& t = (*table)[i];
            for (int k = 0; k < 4; ++k) out.row(static_cast<Eigen::Index>(i)) += t.weight[k] * xv.row(t.src[k]);
        }
        return op(std::move(out), {x}, [x, table](Graph& g, std::int32_t self) {
            if (!g.needs(x)) return;
            const Mat& dy = g.grad_of(self);
            Mat& dx = g.grad_ref(x.id);
            for (std::size_t i = 0; i < table->size(); ++i) {
                const Tap& t = (*table)[i];
                for (int k = 0; k < 4; ++k) dx.row(t.src[k]) += t.weight[k] * dy.row(static_cast<Eigen::Index>(i));
            }
        });
    }

    /// Mean softmax cross-entropy over rows whose target is >= 0. Returns 0
    /// (with zero gradient) when no row is supervised.
    Var cross_entropy(Var logits, std::vector<int> targets) {
        const Mat& z = value(logits);
        check(static_cast<Eigen::Index>(targets.size()) == z.rows(), "cross_entropy target count");
        auto probs = std::make_shared<Mat>(z.rows(), z.cols());
        T total = 0;
        std::size_t count = 0;
        for (Eigen::Index r = 0; r < z.rows(); ++r) {
            const int t = targets[static_cast<std::size_t>(r)];
            if (t < 0) continue;
            check(t < z.cols(), "cross_entropy target id");
            const T mx = z.row(r).maxCoeff();
            const T lse = mx + std::log((z.row(r).array() - mx).exp().sum());
            probs->row(r) = (z.row(r).array() - lse).exp();
            total += lse - z(r, t);
            ++count;
        }
        Mat out(1, 1);
        out(0, 0) = count ? total / static_cast<T>(count) : T(0);
        if (count == 0) return input(std::move(out));
        return op(std::move(out), {logits}, [logits, targets = std::move(targets), probs, count](Graph& g, std::int32_t self) {
            if (!g.needs(logits)) return;
            const T dy = g.grad_of(self)(0, 0) / static_cast<T>(count);
            Mat& dz = g.grad_ref(logits.id);
            for (Eigen::Index r = 0; r < dz.rows(); ++r) {
                const int t = targets[static_cast<std::size_t>(r)];
                if (t < 0) continue;
                dz.row(r) += dy * probs->row(r);
                dz(r, t) -= dy;
            }
        });
    }

    /// w_bce * mean BCE-with-logits + w_dice * soft dice loss for one mask.
    /// `logits` is an N x 1 column, `target` holds N values in {0, 1}.
    Var bce_dice(Var logits, std::vector<T> target, T w_bce, T w_dice, T eps) {
        const Mat& z = value(logits);
        check(z.cols() == 1 && static_cast<Eigen::Index>(target.size()) == z.rows(), "bce_dice shapes");
        const Eigen::Index n = z.rows();
        auto p = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
        T bce = 0;
        T inter = 0;
        T psum = 0;
        T gsum = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const T x = z(i, 0);
            const T y = target[static_cast<std::size_t>(i)];
            bce += std::max(x, T(0)) - x * y + std::log1p(std::exp(-std::abs(x)));
            const T pi = T(1) / (T(1) + std::exp(-x));
            (*p)[static_cast<std::size_t>(i)] = pi;
            inter += pi * y;
            psum += pi;
            gsum += y;
        }
        bce /= static_cast<T>(n);
        const T denom = psum + gsum + eps;
        const T dice = T(1) - (T(2) * inter + eps) / denom;
        Mat out(1, 1);
        out(0, 0) = w_bce * bce + w_dice * dice;
        return op(std::move(out), {logits},
                  [logits, target = std::move(target), p, w_bce, w_dice, inter, denom, eps, n](Graph& g, std::int32_t self) {
                      if (!g.needs(logits)) return;
                      const T dy = g.grad_of(self)(0, 0);
                      Mat& dz = g.grad_ref(logits.id);
                      const T numer = T(2) * inter + eps;
                      for (Eigen::Index i = 0; i < n; ++i) {
                          const T pi = (*p)[static_cast<std::size_t>(i)];
                          const T y = target[static_cast<std::size_t>(i)];
                          const T d_bce = (pi - y) / static_cast<T>(n);
                          const T d_dice_dp = -(T(2) * y * denom - numer) / (denom * denom);
                          dz(i, 0) += dy * (w_bce * d_bce + w_dice * d_dice_dp * pi * (T(1) - pi));
                      }
                  });
    }

  private:
    struct Node {
        Mat value;
        const Mat* ref = nullptr;
        Mat grad;
        bool needs_grad = false;
        std::int32_t param = -1;
        std::function<void(Graph&, std::int32_t)> back;
    };

    static void check(bool ok, const char* what) {
        if (!ok) throw ShapeError(what);
    }

    bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

    const Mat& grad_of(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

    Mat& grad_ref(std::int32_t id) {
        auto& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0) {
            const Mat& v = n.ref ? *n.ref : n.value;
            n.grad = Mat::Zero(v.rows(), v.cols());
        }
        return n.grad;
    }

    Var push(Mat value, bool needs_grad, std::function<void(Graph&, std::int32_t)> back) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        if (needs_grad) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    Var op(Mat value, std::initializer_list<Var> parents, std::function<void(Graph&, std::int32_t)> back) {
        bool any = false;
        for (Var p : parents) any = any || needs(p);
        return push(std::move(value), recording() && any, std::move(back));
    }

    Var op(Mat value, const std::vector<Var>& parents, std::function<void(Graph&, std::int32_t)> back) {
        bool any = false;
        for (Var p : parents) any = any || needs(p);
        return push(std::move(value), recording() && any, std::move(back));
    }

    const ParameterSet<T>& params_;
    Gradients<T>* grads_;
    GradientFault fault_;
    std::vector<std::int32_t> param_nodes_;
    std::vector<Node> nodes_;
};

} // namespace medseg::ag
