#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "immunodiff/core/error.hpp"
#include "immunodiff/nd/tensor.hpp"

namespace immunodiff::nd {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <class T>
using NamedTensors = std::map<std::string, Tensor<T>>;

// Rotary position parameters shared by rope_rows (graph op) and the
// standalone cbi rope helpers. theta[i] = base^(-i/dim), i = 0 .. dim/4 - 1.
struct RopeTable {
    double base = 1e5;
    std::size_t dim = 0;
    std::vector<double> theta;
};

inline RopeTable make_rope_table(std::size_t dim, double base = 1e5) {
    require(dim > 0 && dim % 4 == 0, "rope dimension must be a positive multiple of 4, got " + std::to_string(dim));
    RopeTable t{base, dim, {}};
    const std::size_t l = dim / 4 - 1;
    for (std::size_t i = 0; i <= l; ++i)
        t.theta.push_back(std::pow(base, -static_cast<double>(i) / static_cast<double>(dim)));
    return t;
}

// Rotates f = [f_h || f_w] in place: pair (2i, 2i+1) of each half is rotated
// by angle k * theta[i], with k = kh for the first half and kw for the second.
template <class T>
void rope_rotate(T* f, const RopeTable& table, double kh, double kw, bool inverse = false) {
    const std::size_t half = table.dim / 2;
    for (int part = 0; part < 2; ++part) {
        const double k = part == 0 ? kh : kw;
        T* seg = f + part * half;
        for (std::size_t i = 0; i < table.theta.size(); ++i) {
            const double angle = (inverse ? -k : k) * table.theta[i];
            const T c = static_cast<T>(std::cos(angle));
            const T s = static_cast<T>(std::sin(angle));
            const T a = seg[2 * i];
            const T b = seg[2 * i + 1];
            seg[2 * i] = c * a - s * b;
            seg[2 * i + 1] = s * a + c * b;
        }
    }
}

// Reverse-mode tape. Every op appends a node; backward() walks the tape in
// reverse creation order. Weight gradients are only computed for inputs that
// (transitively) depend on a trainable leaf, so a locked base model adds no
// weight-gradient work when a control branch is trained through it.
template <class T>
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor<T> v) { return push(std::move(v), false); }

    Var parameter(const std::string& name, const Tensor<T>& v) {
        require(!param_ids_.contains(name), "duplicate parameter leaf " + name);
        Var out = push(v, true);
        param_ids_[name] = out.id;
        return out;
    }

    const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
    bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
    std::size_t size() const { return nodes_.size(); }

    // --- elementwise -------------------------------------------------------

    Var add(Var a, Var b) {
        require(value(a).shape() == value(b).shape(),
                "add shape mismatch " + shape_str(value(a).shape()) + " vs " + shape_str(value(b).shape()));
        Tensor<T> out = value(a);
        const auto& bv = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
        return record(std::move(out), {a, b}, [this, a, b](int self) {
            if (needs_grad(a)) accumulate(a, grad(self));
            if (needs_grad(b)) accumulate(b, grad(self));
        });
    }

    Var sub(Var a, Var b) { return add(a, scale(b, T(-1))); }

    Var mul(Var a, Var b) {
        require(value(a).shape() == value(b).shape(), "mul shape mismatch");
        Tensor<T> out = value(a);
        const auto& bv = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
        return record(std::move(out), {a, b}, [this, a, b](int self) {
            const auto& g = grad(self);
            if (needs_grad(a)) {
                auto& ga = grad_buffer(a);
                const auto& bv = value(b);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
            }
            if (needs_grad(b)) {
                auto& gb = grad_buffer(b);
                const auto& av = value(a);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
            }
        });
    }

    Var scale(Var a, T s) {
        Tensor<T> out = value(a);
        for (auto& v : out.values()) v *= s;
        return record(std::move(out), {a}, [this, a, s](int self) {
            const auto& g = grad(self);
            auto& ga = grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
        });
    }

    Var silu(Var a) {
        const auto& x = value(a);
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * sigmoid(x[i]);
        return record(std::move(out), {a}, [this, a](int self) {
            const auto& g = grad(self);
            const auto& x = value(a);
            auto& ga = grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T s = sigmoid(x[i]);
                ga[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
            }
        });
    }

    Var relu(Var a) {
        const auto& x = value(a);
        Tensor<T> out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
        return record(std::move(out), {a}, [this, a](int self) {
            const auto& g = grad(self);
            const auto& x = value(a);
            auto& ga = grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i)
                if (x[i] > T(0)) ga[i] += g[i];
        });
    }

    // --- shape -------------------------------------------------------------

    Var reshape(Var a, Shape s) {
        Tensor<T> out = value(a).reshaped(std::move(s));
        return record(std::move(out), {a}, [this, a](int self) {
            const auto& g = grad(self);
            auto& ga = grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }

    // Concatenates rank-2 tensors [N, a_k] along columns.
    Var concat_cols(const std::vector<Var>& parts) {
        require(!parts.empty(), "concat_cols of nothing");
        const std::size_t n = value(parts[0]).dim(0);
        std::size_t total = 0;
        for (Var p : parts) {
            require(value(p).rank() == 2 && value(p).dim(0) == n, "concat_cols expects [N, k] inputs with equal N");
            total += value(p).dim(1);
        }
        Tensor<T> out({n, total});
        std::size_t off = 0;
        for (Var p : parts) {
            const auto& v = value(p);
            const std::size_t k = v.dim(1);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < k; ++c) out.at(r, off + c) = v.at(r, c);
            off += k;
        }
        return record(std::move(out), parts, [this, parts, n, total](int self) {
            const auto& g = grad(self);
            std::size_t off = 0;
            for (Var p : parts) {
                const std::size_t k = value(p).dim(1);
                if (needs_grad(p)) {
                    auto& gp = grad_buffer(p);
                    for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < k; ++c) gp.at(r, c) += g[r * total + off + c];
                }
                off += k;
            }
        });
    }

    // Stacks rank-2 [r_k, D] tensors along rows.
    Var concat_rows(const std::vector<Var>& parts) {
        require(!parts.empty(), "concat_rows of nothing");
        const std::size_t d = value(parts[0]).dim(1);
        std::size_t rows = 0;
        for (Var p : parts) {
            require(value(p).rank() == 2 && value(p).dim(1) == d, "concat_rows expects [r, D] inputs with equal D");
            rows += value(p).dim(0);
        }
        Tensor<T> out({rows, d});
        std::size_t off = 0;
        for (Var p : parts) {
            const auto& v = value(p);
            std::copy(v.data(), v.data() + v.size(), out.data() + off);
            off += v.size();
        }
        return record(std::move(out), parts, [this, parts](int self) {
            const auto& g = grad(self);
            std::size_t off = 0;
            for (Var p : parts) {
                const std::size_t sz = value(p).size();
                if (needs_grad(p)) {
                    auto& gp = grad_buffer(p);
                    for (std::size_t i = 0; i < sz; ++i) gp[i] += g[off + i];
                }
                off += sz;
            }
        });
    }

    // Rows [begin, begin + count) of a rank-2 tensor.
    Var slice_rows(Var a, std::size_t begin, std::size_t count) {
        const auto& v = value(a);
        require(v.rank() == 2 && begin + count <= v.dim(0), "slice_rows out of range");
        const std::size_t d = v.dim(1);
        Tensor<T> out({count, d});
        std::copy(v.data() + begin * d, v.data() + (begin + count) * d, out.data());
        return record(std::move(out), {a}, [this, a, begin, d](int self) {
            const auto& g = grad(self);
            auto& ga = grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[begin * d + i] += g[i];
        });
    }

    Var concat_channels(Var a, Var b) {
        const auto& av = value(a);
        const auto& bv = value(b);
        require(av.rank() == 4 && bv.rank() == 4 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) &&
                    av.dim(3) == bv.dim(3),
                "concat_channels shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
        const std::size_t n = av.dim(0), ca = av.dim(1), cb = bv.dim(1), hw = av.dim(2) * av.dim(3);
        Tensor<T> out({n, ca + cb, av.dim(2), av.dim(3)});
        for (std::size_t i = 0; i < n; ++i) {
            std::copy(av.data() + i * ca * hw, av.data() + (i + 1) * ca * hw, out.data() + i * (ca + cb) * hw);
            std::copy(bv.data() + i * cb * hw, bv.data() + (i + 1) * cb * hw,
                      out.data() + i * (ca + cb) * hw + ca * hw);
        }
        return record(std::move(out), {a, b}, [this, a, b, n, ca, cb, hw](int self) {
            const auto& g = grad(self);
            if (needs_grad(a)) {
                auto& ga = grad_buffer(a);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < ca * hw; ++j) ga[i * ca * hw + j] += g[i * (ca + cb) * hw + j];
            }
            if (needs_grad(b)) {
                auto& gb = grad_buffer(b);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < cb * hw; ++j)
                        gb[i * cb * hw + j] += g[i * (ca + cb) * hw + ca * hw + j];
            }
        });
    }

    // --- spatial -----------------------------------------------------------

    // Same-size 2-D convolution (stride 1, zero padding k/2, odd k).
    // x: [N, Ci, H, W], w: [Co, Ci, k, k], b: [Co].
    Var conv2d(Var x, Var w, std::optional<Var> b = std::nullopt) {
        const auto& xv = value(x);
        const auto& wv = value(w);
        require(xv.rank() == 4 && wv.rank() == 4 && wv.dim(1) == xv.dim(1) && wv.dim(2) == wv.dim(3) &&
                    wv.dim(2) % 2 == 1,
                "conv2d shape mismatch: input " + shape_str(xv.shape()) + ", weight " + shape_str(wv.shape()));
        if (b) require(value(*b).size() == wv.dim(0), "conv2d bias length mismatch");
        const std::size_t n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
        const std::size_t co = wv.dim(0), k = wv.dim(2);
        const int pad = static_cast<int>(k / 2);
        Tensor<T> out({n, co, h, wd});
        for (std::size_t in = 0; in < n; ++in) {
            for (std::size_t o = 0; o < co; ++o) {
                T* op = out.data() + (in * co + o) * h * wd;
                if (b) std::fill(op, op + h * wd, value(*b)[o]);
                for (std::size_t c = 0; c < ci; ++c) {
                    const T* ip = xv.data() + (in * ci + c) * h * wd;
                    const T* wp = wv.data() + (o * ci + c) * k * k;
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx)
                            axpy_shifted(op, ip, wp[ky * k + kx], h, wd, static_cast<int>(ky) - pad,
                                         static_cast<int>(kx) - pad);
                }
            }
        }
        std::vector<Var> ins{x, w};
        if (b) ins.push_back(*b);
        return record(std::move(out), ins, [this, x, w, b, n, ci, h, wd, co, k, pad](int self) {
            const auto& g = grad(self);
            const auto& xv = value(x);
            const auto& wv = value(w);
            const bool gx = needs_grad(x), gw = needs_grad(w);
            Tensor<T>* dx = gx ? &grad_buffer(x) : nullptr;
            Tensor<T>* dw = gw ? &grad_buffer(w) : nullptr;
            for (std::size_t in = 0; in < n; ++in) {
                for (std::size_t o = 0; o < co; ++o) {
                    const T* gp = g.data() + (in * co + o) * h * wd;
                    for (std::size_t c = 0; c < ci; ++c) {
                        const T* ip = xv.data() + (in * ci + c) * h * wd;
                        const T* wp = wv.data() + (o * ci + c) * k * k;
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const int dy = static_cast<int>(ky) - pad, dxo = static_cast<int>(kx) - pad;
                                if (gx)
                                    axpy_shifted_adjoint(dx->data() + (in * ci + c) * h * wd, gp, wp[ky * k + kx], h,
                                                         wd, dy, dxo);
                                if (gw)
                                    (*dw)[((o * ci + c) * k + ky) * k + kx] += dot_shifted(gp, ip, h, wd, dy, dxo);
                            }
                        }
                    }
                }
            }
            if (b && needs_grad(*b)) {
                auto& db = grad_buffer(*b);
                for (std::size_t in = 0; in < n; ++in)
                    for (std::size_t o = 0; o < co; ++o) {
                        const T* gp = g.data() + (in * co + o) * h * wd;
                        T s = 0;
                        for (std::size_t i = 0; i < h * wd; ++i) s += gp[i];
                        db[o] += s;
                    }
            }
        });
    }

    // x: [N, C, H, W] plus v: [N, C] broadcast over the spatial extent.
    Var add_channel_bias(Var x, Var v) {
        const auto& xv = value(x);
        const auto& vv = value(v);
        require(xv.rank() == 4 && vv.rank() == 2 && vv.dim(0) == xv.dim(0) && vv.dim(1) == xv.dim(1),
                "add_channel_bias shape mismatch " + shape_str(xv.shape()) + " + " + shape_str(vv.shape()));
        const std::size_t nc = xv.dim(0) * xv.dim(1), hw = xv.dim(2) * xv.dim(3);
        Tensor<T> out = xv;
        for (std::size_t i = 0; i < nc; ++i)
            for (std::size_t j = 0; j < hw; ++j) out[i * hw + j] += vv[i];
        return record(std::move(out), {x, v}, [this, x, v, nc, hw](int self) {
            const auto& g = grad(self);
            if (needs_grad(x)) accumulate(x, g);
            if (needs_grad(v)) {
                auto& gv = grad_buffer(v);
                for (std::size_t i = 0; i < nc; ++i) {
                    T s = 0;
                    for (std::size_t j = 0; j < hw; ++j) s += g[i * hw + j];
                    gv[i] += s;
                }
            }
        });
    }

    Var avg_pool2(Var x) {
        const auto& xv = value(x);
        require(xv.rank() == 4 && xv.dim(2) % 2 == 0 && xv.dim(3) % 2 == 0,
                "avg_pool2 needs even spatial extents, got " + shape_str(xv.shape()));
        const std::size_t nc = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
        Tensor<T> out({xv.dim(0), xv.dim(1), h / 2, w / 2});
        for (std::size_t p = 0; p < nc; ++p)
            for (std::size_t y = 0; y < h / 2; ++y)
                for (std::size_t xx = 0; xx < w / 2; ++xx) {
                    const T* ip = xv.data() + p * h * w;
                    out[(p * (h / 2) + y) * (w / 2) + xx] =
                        T(0.25) * (ip[2 * y * w + 2 * xx] + ip[2 * y * w + 2 * xx + 1] + ip[(2 * y + 1) * w + 2 * xx] +
                                   ip[(2 * y + 1) * w + 2 * xx + 1]);
                }
        return record(std::move(out), {x}, [this, x, nc, h, w](int self) {
            const auto& g = grad(self);
            auto& gx = grad_buffer(x);
            for (std::size_t p = 0; p < nc; ++p)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t xx = 0; xx < w; ++xx)
                        gx[(p * h + y) * w + xx] += T(0.25) * g[(p * (h / 2) + y / 2) * (w / 2) + xx / 2];
        });
    }

    Var upsample2(Var x) {
        const auto& xv = value(x);
        require(xv.rank() == 4, "upsample2 expects rank-4 input");
        const std::size_t nc = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
        Tensor<T> out({xv.dim(0), xv.dim(1), 2 * h, 2 * w});
        for (std::size_t p = 0; p < nc; ++p)
            for (std::size_t y = 0; y < 2 * h; ++y)
                for (std::size_t xx = 0; xx < 2 * w; ++xx)
                    out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
        return record(std::move(out), {x}, [this, x, nc, h, w](int self) {
            const auto& g = grad(self);
            auto& gx = grad_buffer(x);
            for (std::size_t p = 0; p < nc; ++p)
                for (std::size_t y = 0; y < 2 * h; ++y)
                    for (std::size_t xx = 0; xx < 2 * w; ++xx)
                        gx[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
        });
    }

    // Mean over each (H, W) cell of a grid x grid partition: [N,C,H,W] -> [N,C,grid,grid].
    Var adaptive_avg_pool(Var x, std::size_t grid) {
        const auto& xv = value(x);
        require(xv.rank() == 4 && grid > 0 && xv.dim(2) % grid == 0 && xv.dim(3) % grid == 0,
                "adaptive_avg_pool: spatial extent " + shape_str(xv.shape()) + " not divisible by grid " +
                    std::to_string(grid));
        const std::size_t nc = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
        const std::size_t sy = h / grid, sx = w / grid;
        const T inv = T(1) / static_cast<T>(sy * sx);
        Tensor<T> out({xv.dim(0), xv.dim(1), grid, grid});
        for (std::size_t p = 0; p < nc; ++p)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < w; ++xx)
                    out[(p * grid + y / sy) * grid + xx / sx] += xv[(p * h + y) * w + xx];
        for (auto& v : out.values()) v *= inv;
        return record(std::move(out), {x}, [this, x, nc, h, w, sy, sx, grid, inv](int self) {
            const auto& g = grad(self);
            auto& gx = grad_buffer(x);
            for (std::size_t p = 0; p < nc; ++p)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t xx = 0; xx < w; ++xx)
                        gx[(p * h + y) * w + xx] += inv * g[(p * grid + y / sy) * grid + xx / sx];
        });
    }

    // [N, C, H, W] -> [N, C]
    Var global_avg_pool(Var x) {
        const auto& xv = value(x);
        require(xv.rank() == 4, "global_avg_pool expects rank-4 input");
        const std::size_t nc = xv.dim(0) * xv.dim(1), hw = xv.dim(2) * xv.dim(3);
        const T inv = T(1) / static_cast<T>(hw);
        Tensor<T> out({xv.dim(0), xv.dim(1)});
        for (std::size_t p = 0; p < nc; ++p) {
            T s = 0;
            for (std::size_t j = 0; j < hw; ++j) s += xv[p * hw + j];
            out[p] = s * inv;
        }
        return record(std::move(out), {x}, [this, x, nc, hw, inv](int self) {
            const auto& g = grad(self);
            auto& gx = grad_buffer(x);
            for (std::size_t p = 0; p < nc; ++p)
                for (std::size_t j = 0; j < hw; ++j) gx[p * hw + j] += g[p] * inv;
        });
    }

    // --- dense -------------------------------------------------------------

    // x: [N, in], w: [out, in], b: [out] -> [N, out]
    Var linear(Var x, Var w, std::optional<Var> b = std::nullopt) {
        const auto& xv = value(x);
        const auto& wv = value(w);
        require(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(1),
                "linear shape mismatch: input " + shape_str(xv.shape()) + ", weight " + shape_str(wv.shape()));
        if (b) require(value(*b).size() == wv.dim(0), "linear bias length mismatch");
        const std::size_t n = xv.dim(0), in = xv.dim(1), o = wv.dim(0);
        Tensor<T> out({n, o});
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < o; ++j) {
                T s = b ? value(*b)[j] : T(0);
                for (std::size_t i = 0; i < in; ++i) s += xv[r * in + i] * wv[j * in + i];
                out[r * o + j] = s;
            }
        std::vector<Var> ins{x, w};
        if (b) ins.push_back(*b);
        return record(std::move(out), ins, [this, x, w, b, n, in, o](int self) {
            const auto& g = grad(self);
            const auto& xv = value(x);
            const auto& wv = value(w);
            if (needs_grad(x)) {
                auto& gx = grad_buffer(x);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < o; ++j)
                        for (std::size_t i = 0; i < in; ++i) gx[r * in + i] += g[r * o + j] * wv[j * in + i];
            }
            if (needs_grad(w)) {
                auto& gw = grad_buffer(w);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < o; ++j)
                        for (std::size_t i = 0; i < in; ++i) gw[j * in + i] += g[r * o + j] * xv[r * in + i];
            }
            if (b && needs_grad(*b)) {
                auto& gb = grad_buffer(*b);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < o; ++j) gb[j] += g[r * o + j];
            }
        });
    }

    // a: [m, k], b: [k, n]
    Var matmul(Var a, Var b) {
        const auto& av = value(a);
        const auto& bv = value(b);
        require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
                "matmul shape mismatch " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
        const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
        Tensor<T> out({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                T s = 0;
                for (std::size_t p = 0; p < k; ++p) s += av[i * k + p] * bv[p * n + j];
                out[i * n + j] = s;
            }
        return record(std::move(out), {a, b}, [this, a, b, m, k, n](int self) {
            const auto& g = grad(self);
            const auto& av = value(a);
            const auto& bv = value(b);
            if (needs_grad(a)) {
                auto& ga = grad_buffer(a);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        T s = 0;
                        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
                        ga[i * k + p] += s;
                    }
            }
            if (needs_grad(b)) {
                auto& gb = grad_buffer(b);
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t j = 0; j < n; ++j) {
                        T s = 0;
                        for (std::size_t i = 0; i < m; ++i) s += av[i * k + p] * g[i * n + j];
                        gb[p * n + j] += s;
                    }
            }
        });
    }

    Var transpose(Var a) {
        const auto& av = value(a);
        require(av.rank() == 2, "transpose expects rank-2 input");
        const std::size_t m = av.dim(0), n = av.dim(1);
        Tensor<T> out({n, m});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
        return record(std::move(out), {a}, [this, a, m, n](int self) {
            const auto& g = grad(self);
            auto& ga = grad_buffer(a);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }

    // Each row divided by its Euclidean norm; a zero row has no direction.
    Var l2_normalize_rows(Var a) {
        const auto& av = value(a);
        require(av.rank() == 2, "l2_normalize_rows expects rank-2 input");
        const std::size_t m = av.dim(0), d = av.dim(1);
        std::vector<T> norms(m);
        Tensor<T> out(av.shape());
        for (std::size_t i = 0; i < m; ++i) {
            T s = 0;
            for (std::size_t j = 0; j < d; ++j) s += av[i * d + j] * av[i * d + j];
            norms[i] = std::sqrt(s);
            require(norms[i] > T(0), "zero-norm vector has undefined cosine similarity (row " + std::to_string(i) + ")");
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] = av[i * d + j] / norms[i];
        }
        return record(std::move(out), {a}, [this, a, m, d, norms](int self) {
            const auto& g = grad(self);
            const auto& y = nodes_[self].value;
            auto& ga = grad_buffer(a);
            for (std::size_t i = 0; i < m; ++i) {
                T dot = 0;
                for (std::size_t j = 0; j < d; ++j) dot += y[i * d + j] * g[i * d + j];
                for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += (g[i * d + j] - y[i * d + j] * dot) / norms[i];
            }
        });
    }

    // Row-wise softmax. mask (optional, row-major [m, n]) excludes entries with false.
    Var softmax_rows(Var a, const std::vector<bool>& mask = {}) {
        const auto& av = value(a);
        require(av.rank() == 2, "softmax_rows expects rank-2 input");
        const std::size_t m = av.dim(0), n = av.dim(1);
        require(mask.empty() || mask.size() == m * n, "softmax mask size mismatch");
        Tensor<T> out(av.shape());
        for (std::size_t i = 0; i < m; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < n; ++j)
                if (mask.empty() || mask[i * n + j]) mx = std::max(mx, av[i * n + j]);
            require(std::isfinite(mx), "softmax row " + std::to_string(i) + " has no unmasked entries");
            T s = 0;
            for (std::size_t j = 0; j < n; ++j) {
                const bool keep = mask.empty() || mask[i * n + j];
                out[i * n + j] = keep ? std::exp(av[i * n + j] - mx) : T(0);
                s += out[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
        }
        return record(std::move(out), {a}, [this, a, m, n](int self) {
            const auto& g = grad(self);
            const auto& y = nodes_[self].value;
            auto& ga = grad_buffer(a);
            for (std::size_t i = 0; i < m; ++i) {
                T dot = 0;
                for (std::size_t j = 0; j < n; ++j) dot += y[i * n + j] * g[i * n + j];
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
            }
        });
    }

    // Applies the rotary embedding to each row i at positions (kh[i], kw[i]).
    Var rope_rows(Var a, const RopeTable& table, const std::vector<double>& kh, const std::vector<double>& kw) {
        const auto& av = value(a);
        require(av.rank() == 2 && av.dim(1) == table.dim,
                "rope_rows expects rows of width " + std::to_string(table.dim) + ", got " + shape_str(av.shape()));
        require(kh.size() == av.dim(0) && kw.size() == av.dim(0), "rope_rows position count mismatch");
        Tensor<T> out = av;
        const std::size_t d = table.dim;
        for (std::size_t i = 0; i < av.dim(0); ++i) rope_rotate(out.data() + i * d, table, kh[i], kw[i]);
        return record(std::move(out), {a}, [this, a, table, kh, kw, d](int self) {
            Tensor<T> g = grad(self);
            for (std::size_t i = 0; i < kh.size(); ++i) rope_rotate(g.data() + i * d, table, kh[i], kw[i], true);
            accumulate(a, g);
        });
    }

    // --- reductions / losses ----------------------------------------------

    Var sum(Var a) {
        const T s = sum_of(value(a));
        return record(Tensor<T>::scalar(s), {a}, [this, a](int self) {
            const T g = grad(self)[0];
            auto& ga = grad_buffer(a);
            for (auto& v : ga.values()) v += g;
        });
    }

    Var mean(Var a) { return scale(sum(a), T(1) / static_cast<T>(value(a).size())); }

    // mean((pred - target)^2) over all elements.
    Var mse(Var pred, Var target) {
        const auto& p = value(pred);
        const auto& t = value(target);
        require(p.shape() == t.shape(), "mse shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(t.shape()));
        T s = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const T d = p[i] - t[i];
            s += d * d;
        }
        const T inv = T(1) / static_cast<T>(p.size());
        return record(Tensor<T>::scalar(s * inv), {pred, target}, [this, pred, target, inv](int self) {
            const T g = grad(self)[0];
            const auto& p = value(pred);
            const auto& t = value(target);
            if (needs_grad(pred)) {
                auto& gp = grad_buffer(pred);
                for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g * T(2) * (p[i] - t[i]) * inv;
            }
            if (needs_grad(target)) {
                auto& gt = grad_buffer(target);
                for (std::size_t i = 0; i < p.size(); ++i) gt[i] -= g * T(2) * (p[i] - t[i]) * inv;
            }
        });
    }

    // mean_i -log softmax(logits_i)[targets[i]]
    Var cross_entropy_rows(Var logits, const std::vector<std::size_t>& targets) {
        const auto& lv = value(logits);
        require(lv.rank() == 2 && targets.size() == lv.dim(0), "cross_entropy_rows shape mismatch");
        const std::size_t m = lv.dim(0), n = lv.dim(1);
        Tensor<T> probs(lv.shape());
        T loss = 0;
        for (std::size_t i = 0; i < m; ++i) {
            require(targets[i] < n, "cross_entropy_rows target out of range");
            T mx = lv[i * n];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, lv[i * n + j]);
            T s = 0;
            for (std::size_t j = 0; j < n; ++j) s += std::exp(lv[i * n + j] - mx);
            const T lse = mx + std::log(s);
            loss += lse - lv[i * n + targets[i]];
            for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(lv[i * n + j] - lse);
        }
        return record(Tensor<T>::scalar(loss / static_cast<T>(m)), {logits},
                      [this, logits, targets, probs, m, n](int self) {
                          const T g = grad(self)[0] / static_cast<T>(m);
                          auto& gl = grad_buffer(logits);
                          for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j)
                                  gl[i * n + j] += g * (probs[i * n + j] - (j == targets[i] ? T(1) : T(0)));
                      });
    }

    // Class-weighted binary cross-entropy on logits: sum_i w_i l_i / sum_i w_i.
    Var weighted_bce_logits(Var logits, const std::vector<int>& labels, const std::vector<T>& weights) {
        const auto& z = value(logits);
        require(z.size() == labels.size() && z.size() == weights.size(), "weighted_bce_logits length mismatch");
        T wsum = 0, loss = 0;
        for (std::size_t i = 0; i < z.size(); ++i) {
            const T softplus = z[i] > 0 ? z[i] + std::log1p(std::exp(-z[i])) : std::log1p(std::exp(z[i]));
            loss += weights[i] * (softplus - static_cast<T>(labels[i]) * z[i]);
            wsum += weights[i];
        }
        require(wsum > 0, "weighted_bce_logits needs positive total weight");
        return record(Tensor<T>::scalar(loss / wsum), {logits}, [this, logits, labels, weights, wsum](int self) {
            const T g = grad(self)[0];
            const auto& z = value(logits);
            auto& gz = grad_buffer(logits);
            for (std::size_t i = 0; i < z.size(); ++i)
                gz[i] += g * weights[i] * (sigmoid(z[i]) - static_cast<T>(labels[i])) / wsum;
        });
    }

    // Cox negative log partial likelihood with Breslow handling of tied times,
    // averaged over observed events:
    //   -(1/E) sum_{i: event} [ r_i - log sum_{j: t_j >= t_i} exp(r_j) ]
    Var cox_nll(Var risk, const std::vector<double>& times, const std::vector<int>& events) {
        const auto& r = value(risk);
        const std::size_t n = r.size();
        require(times.size() == n && events.size() == n, "cox_nll length mismatch");
        std::size_t n_events = 0;
        for (int e : events) n_events += e ? 1 : 0;
        require(n_events > 0, "cox_nll needs at least one observed event");
        T mx = r[0];
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, r[i]);
        std::vector<T> ex(n);
        for (std::size_t i = 0; i < n; ++i) ex[i] = std::exp(r[i] - mx);
        std::vector<T> risk_set(n, 0);
        T loss = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (!events[i]) continue;
            T s = 0;
            for (std::size_t j = 0; j < n; ++j)
                if (times[j] >= times[i]) s += ex[j];
            risk_set[i] = s;
            loss -= r[i] - mx - std::log(s);
        }
        const T inv = T(1) / static_cast<T>(n_events);
        return record(Tensor<T>::scalar(loss * inv), {risk}, [this, risk, times, events, ex, risk_set, inv, n](int self) {
            const T g = grad(self)[0] * inv;
            auto& gr = grad_buffer(risk);
            for (std::size_t i = 0; i < n; ++i) {
                if (!events[i]) continue;
                gr[i] -= g;
                for (std::size_t j = 0; j < n; ++j)
                    if (times[j] >= times[i]) gr[j] += g * ex[j] / risk_set[i];
            }
        });
    }

    // --- backward ----------------------------------------------------------

    // Gradients of a scalar loss for every parameter leaf on this tape.
    // Leaves that do not influence the loss receive zeros.
    NamedTensors<T> backward(Var loss) {
        require(value(loss).size() == 1 && value(loss).rank() == 0,
                "backward needs a scalar loss, got shape " + shape_str(value(loss).shape()));
        NamedTensors<T> out;
        if (nodes_[loss.id].needs_grad) {
            grad_buffer(loss)[0] = T(1);
            for (int i = loss.id; i >= 0; --i) {
                auto& node = nodes_[i];
                if (node.backward && !node.grad.empty()) node.backward(i);
            }
        }
        for (const auto& [name, id] : param_ids_) {
            const auto& node = nodes_[id];
            out[name] = node.grad.empty() ? Tensor<T>(node.value.shape()) : node.grad;
        }
        return out;
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::function<void(int)> backward;
        bool needs_grad = false;
    };

    static T sigmoid(T x) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
    }

    Var push(Tensor<T> v, bool needs_grad) {
        nodes_.push_back(Node{std::move(v), {}, {}, needs_grad});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var record(Tensor<T> v, const std::vector<Var>& inputs, std::function<void(int)> bw) {
        bool ng = false;
        for (Var in : inputs) ng = ng || nodes_.at(in.id).needs_grad;
        Var out = push(std::move(v), ng);
        if (ng) nodes_[out.id].backward = std::move(bw);
        return out;
    }

    const Tensor<T>& grad(int id) const { return nodes_[id].grad; }

    Tensor<T>& grad_buffer(Var v) {
        auto& node = nodes_[v.id];
        if (node.grad.empty() && node.value.size() > 0) node.grad = Tensor<T>(node.value.shape());
        return node.grad;
    }

    void accumulate(Var v, const Tensor<T>& g) {
        auto& gb = grad_buffer(v);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }

    // out[y, x] += a * in[y + dy, x + dx] for in-range source pixels.
    static void axpy_shifted(T* out, const T* in, T a, std::size_t h, std::size_t w, int dy, int dx) {
        const int H = static_cast<int>(h), W = static_cast<int>(w);
        const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
        for (int y = y0; y < y1; ++y) {
            T* o = out + y * W;
            const T* i = in + (y + dy) * W + dx;
            for (int x = x0; x < x1; ++x) o[x] += a * i[x];
        }
    }

    // Adjoint of axpy_shifted with respect to `in`: din[y + dy, x + dx] += a * g[y, x].
    static void axpy_shifted_adjoint(T* din, const T* g, T a, std::size_t h, std::size_t w, int dy, int dx) {
        const int H = static_cast<int>(h), W = static_cast<int>(w);
        const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
        for (int y = y0; y < y1; ++y) {
            T* d = din + (y + dy) * W + dx;
            const T* gg = g + y * W;
            for (int x = x0; x < x1; ++x) d[x] += a * gg[x];
        }
    }

    static T dot_shifted(const T* g, const T* in, std::size_t h, std::size_t w, int dy, int dx) {
        const int H = static_cast<int>(h), W = static_cast<int>(w);
        const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
        const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
        T s = 0;
        for (int y = y0; y < y1; ++y) {
            const T* gg = g + y * W;
            const T* i = in + (y + dy) * W + dx;
            for (int x = x0; x < x1; ++x) s += gg[x] * i[x];
        }
        return s;
    }

    std::vector<Node> nodes_;
    std::map<std::string, int> param_ids_;
};

}  // namespace immunodiff::nd
