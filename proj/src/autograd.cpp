#include "gencrop/autograd.hpp"

#include "gencrop/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace gencrop::ag {

const Matrix& Value::val() const { return tape->node(idx).val; }

Value Tape::emplace(Matrix val, bool requires_grad, std::function<void(Tape&, Node&)> backprop) {
    Node n;
    n.val = std::move(val);
    n.requires_grad = requires_grad;
    n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Value Tape::constant(Matrix m) { return emplace(std::move(m), false, nullptr); }

Value Tape::input(Matrix m, bool requires_grad) { return emplace(std::move(m), requires_grad, nullptr); }

Value Tape::param(const std::string& name, const Matrix& value) {
    Value v = emplace(value, true, nullptr);
    nodes_[v.idx].param_name = name;
    return v;
}

void Tape::backward(Value loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: foreign value");
    Node& top = nodes_[loss.idx];
    if (top.val.rows() != 1 || top.val.cols() != 1) {
        throw std::invalid_argument("backward: loss must be scalar");
    }
    top.add_grad(Matrix::Ones(1, 1));
    for (int i = loss.idx; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.backprop && n.requires_grad && n.grad.size() != 0) {
            n.backprop(*this, n);
        }
    }
}

void Tape::accumulate_param_grads(std::map<std::string, Matrix>& sink) const {
    for (const auto& n : nodes_) {
        if (!n.param_name.empty() && n.grad.size() != 0) {
            auto it = sink.find(n.param_name);
            if (it == sink.end()) {
                sink[n.param_name] = n.grad;
            } else {
                it->second += n.grad;
            }
        }
    }
}

namespace {

Tape& tape_of(Value a) { return *a.tape; }

bool rg(Value a) { return a.tape->node(a.idx).requires_grad; }

}  // namespace

Value add(Value a, Value b) {
    Matrix out = a.val() + b.val();
    int ia = a.idx, ib = b.idx;
    return tape_of(a).emplace(std::move(out), rg(a) || rg(b), [ia, ib](Tape& t, Node& n) {
        if (t.node(ia).requires_grad) t.node(ia).add_grad(n.grad);
        if (t.node(ib).requires_grad) t.node(ib).add_grad(n.grad);
    });
}

Value sub(Value a, Value b) {
    Matrix out = a.val() - b.val();
    int ia = a.idx, ib = b.idx;
    return tape_of(a).emplace(std::move(out), rg(a) || rg(b), [ia, ib](Tape& t, Node& n) {
        if (t.node(ia).requires_grad) t.node(ia).add_grad(n.grad);
        if (t.node(ib).requires_grad) t.node(ib).add_grad(-n.grad);
    });
}

Value cmul(Value a, Value b) {
    Matrix out = a.val().cwiseProduct(b.val());
    int ia = a.idx, ib = b.idx;
    return tape_of(a).emplace(std::move(out), rg(a) || rg(b), [ia, ib](Tape& t, Node& n) {
        if (t.node(ia).requires_grad) t.node(ia).add_grad(n.grad.cwiseProduct(t.node(ib).val));
        if (t.node(ib).requires_grad) t.node(ib).add_grad(n.grad.cwiseProduct(t.node(ia).val));
    });
}

Value scale(Value a, double s) {
    Matrix out = a.val() * s;
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia, s](Tape& t, Node& n) {
        t.node(ia).add_grad(n.grad * s);
    });
}

Value add_scalar(Value a, double s) {
    Matrix out = a.val().array() + s;
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia](Tape& t, Node& n) {
        t.node(ia).add_grad(n.grad);
    });
}

Value relu(Value a) {
    Matrix out = a.val().cwiseMax(0.0);
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia](Tape& t, Node& n) {
        t.node(ia).add_grad(
            n.grad.cwiseProduct((t.node(ia).val.array() > 0.0).cast<double>().matrix()));
    });
}

Value sigmoid(Value a) {
    Matrix out = (1.0 / (1.0 + (-a.val().array()).exp())).matrix();
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia](Tape& t, Node& n) {
        const auto& y = n.val.array();
        t.node(ia).add_grad((n.grad.array() * y * (1.0 - y)).matrix());
    });
}

Value tanh_op(Value a) {
    Matrix out = a.val().array().tanh().matrix();
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia](Tape& t, Node& n) {
        const auto& y = n.val.array();
        t.node(ia).add_grad((n.grad.array() * (1.0 - y * y)).matrix());
    });
}

Value log_op(Value a, double eps) {
    Matrix out = (a.val().array() + eps).log().matrix();
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia, eps](Tape& t, Node& n) {
        t.node(ia).add_grad((n.grad.array() / (t.node(ia).val.array() + eps)).matrix());
    });
}

Value abs_op(Value a) {
    Matrix out = a.val().cwiseAbs();
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia](Tape& t, Node& n) {
        t.node(ia).add_grad(n.grad.cwiseProduct(t.node(ia).val.array().sign().matrix()));
    });
}

Value mul_scalarval(Value a, Value s) {
    const double sv = s.scalar();
    Matrix out = a.val() * sv;
    int ia = a.idx, is = s.idx;
    return tape_of(a).emplace(std::move(out), rg(a) || rg(s), [ia, is, sv](Tape& t, Node& n) {
        if (t.node(ia).requires_grad) t.node(ia).add_grad(n.grad * sv);
        if (t.node(is).requires_grad) {
            t.node(is).add_grad(Matrix::Constant(1, 1, (n.grad.array() * t.node(ia).val.array()).sum()));
        }
    });
}

Value sum(Value a) {
    Matrix out = Matrix::Constant(1, 1, a.val().sum());
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia](Tape& t, Node& n) {
        Node& p = t.node(ia);
        p.add_grad(Matrix::Constant(p.val.rows(), p.val.cols(), n.grad(0, 0)));
    });
}

Value mean(Value a) {
    const double inv = 1.0 / static_cast<double>(a.val().size());
    return scale(sum(a), inv);
}

Value matmul(Value a, Value b, bool trans_a, bool trans_b) {
    const Matrix& A = a.val();
    const Matrix& B = b.val();
    Matrix out;
    if (!trans_a && !trans_b) out = A * B;
    else if (trans_a && !trans_b) out = A.transpose() * B;
    else if (!trans_a && trans_b) out = A * B.transpose();
    else out = A.transpose() * B.transpose();
    int ia = a.idx, ib = b.idx;
    return tape_of(a).emplace(std::move(out), rg(a) || rg(b),
                              [ia, ib, trans_a, trans_b](Tape& t, Node& n) {
        const Matrix& A = t.node(ia).val;
        const Matrix& B = t.node(ib).val;
        const Matrix& G = n.grad;
        if (t.node(ia).requires_grad) {
            Matrix ga;
            if (!trans_a && !trans_b) ga = G * B.transpose();
            else if (trans_a && !trans_b) ga = B * G.transpose();
            else if (!trans_a && trans_b) ga = G * B;
            else ga = (G * B).transpose();
            t.node(ia).add_grad(ga);
        }
        if (t.node(ib).requires_grad) {
            Matrix gb;
            if (!trans_a && !trans_b) gb = A.transpose() * G;
            else if (trans_a && !trans_b) gb = A * G;
            else if (!trans_a && trans_b) gb = G.transpose() * A;
            else gb = (A * G).transpose();
            t.node(ib).add_grad(gb);
        }
    });
}

Value add_bias_cols(Value a, Value bias) {
    Matrix out = a.val().colwise() + Eigen::VectorXd(bias.val().col(0));
    int ia = a.idx, ib = bias.idx;
    return tape_of(a).emplace(std::move(out), rg(a) || rg(bias), [ia, ib](Tape& t, Node& n) {
        if (t.node(ia).requires_grad) t.node(ia).add_grad(n.grad);
        if (t.node(ib).requires_grad) t.node(ib).add_grad(n.grad.rowwise().sum());
    });
}

Value concat_rows(const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    int rows = 0;
    const int cols = parts[0].cols();
    bool any_rg = false;
    for (const auto& p : parts) {
        rows += p.rows();
        any_rg = any_rg || rg(p);
    }
    Matrix out(rows, cols);
    std::vector<int> idxs;
    std::vector<int> offsets;
    int off = 0;
    for (const auto& p : parts) {
        out.middleRows(off, p.rows()) = p.val();
        idxs.push_back(p.idx);
        offsets.push_back(off);
        off += p.rows();
    }
    return tape_of(parts[0]).emplace(std::move(out), any_rg,
                                     [idxs, offsets](Tape& t, Node& n) {
        for (std::size_t k = 0; k < idxs.size(); ++k) {
            Node& p = t.node(idxs[k]);
            if (p.requires_grad) {
                p.add_grad(n.grad.middleRows(offsets[k], p.val.rows()));
            }
        }
    });
}

Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    const int rows = parts[0].rows();
    int cols = 0;
    bool any_rg = false;
    for (const auto& p : parts) {
        cols += p.cols();
        any_rg = any_rg || rg(p);
    }
    Matrix out(rows, cols);
    std::vector<int> idxs, offsets;
    int off = 0;
    for (const auto& p : parts) {
        out.middleCols(off, p.cols()) = p.val();
        idxs.push_back(p.idx);
        offsets.push_back(off);
        off += p.cols();
    }
    return tape_of(parts[0]).emplace(std::move(out), any_rg,
                                     [idxs, offsets](Tape& t, Node& n) {
        for (std::size_t k = 0; k < idxs.size(); ++k) {
            Node& p = t.node(idxs[k]);
            if (p.requires_grad) {
                p.add_grad(n.grad.middleCols(offsets[k], p.val.cols()));
            }
        }
    });
}

Value slice_rows(Value a, int start, int count) {
    Matrix out = a.val().middleRows(start, count);
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia, start, count](Tape& t, Node& n) {
        Node& p = t.node(ia);
        if (p.grad.size() == 0) p.grad = Matrix::Zero(p.val.rows(), p.val.cols());
        p.grad.middleRows(start, count) += n.grad;
    });
}

Value slice_cols(Value a, int start, int count) {
    Matrix out = a.val().middleCols(start, count);
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia, start, count](Tape& t, Node& n) {
        Node& p = t.node(ia);
        if (p.grad.size() == 0) p.grad = Matrix::Zero(p.val.rows(), p.val.cols());
        p.grad.middleCols(start, count) += n.grad;
    });
}

Value reshape(Value a, int rows, int cols) {
    if (rows * cols != a.rows() * a.cols()) throw std::invalid_argument("reshape: size mismatch");
    Matrix out = Eigen::Map<const Matrix>(a.val().data(), rows, cols);
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia](Tape& t, Node& n) {
        Node& p = t.node(ia);
        p.add_grad(Eigen::Map<const Matrix>(n.grad.data(), p.val.rows(), p.val.cols()));
    });
}

Value softmax_cols(Value a) {
    Matrix out = a.val();
    for (int c = 0; c < out.cols(); ++c) {
        auto col = out.col(c).array();
        col -= col.maxCoeff();
        col = col.exp();
        col /= col.sum();
        out.col(c) = col;
    }
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia](Tape& t, Node& n) {
        Matrix gx(n.val.rows(), n.val.cols());
        for (int c = 0; c < n.val.cols(); ++c) {
            const auto y = n.val.col(c).array();
            const auto g = n.grad.col(c).array();
            const double dot = (y * g).sum();
            gx.col(c) = (y * (g - dot)).matrix();
        }
        t.node(ia).add_grad(gx);
    });
}

Value masked_softmax(Value logits, const std::vector<char>& keep) {
    const Matrix& x = logits.val();
    if (x.cols() != 1 || static_cast<int>(keep.size()) != x.rows()) {
        throw std::invalid_argument("masked_softmax: logits must be (n x 1) matching mask");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < x.rows(); ++i) {
        if (keep[i]) mx = std::max(mx, x(i, 0));
    }
    if (!std::isfinite(mx)) throw std::invalid_argument("masked_softmax: empty mask");
    Matrix out = Matrix::Zero(x.rows(), 1);
    double denom = 0.0;
    for (int i = 0; i < x.rows(); ++i) {
        if (keep[i]) {
            out(i, 0) = std::exp(x(i, 0) - mx);
            denom += out(i, 0);
        }
    }
    out /= denom;
    int ia = logits.idx;
    return tape_of(logits).emplace(std::move(out), rg(logits), [ia, keep](Tape& t, Node& n) {
        const auto y = n.val.col(0).array();
        const auto g = n.grad.col(0).array();
        const double dot = (y * g).sum();
        Matrix gx = (y * (g - dot)).matrix();
        for (int i = 0; i < gx.rows(); ++i) {
            if (!keep[i]) gx(i, 0) = 0.0;
        }
        t.node(ia).add_grad(gx);
    });
}

Value layernorm_cols(Value a, double eps) {
    const Matrix& x = a.val();
    const int r = static_cast<int>(x.rows());
    Matrix out(x.rows(), x.cols());
    Eigen::VectorXd inv_std(x.cols());
    for (int c = 0; c < x.cols(); ++c) {
        const double mu = x.col(c).mean();
        const double var = (x.col(c).array() - mu).square().sum() / r;
        inv_std(c) = 1.0 / std::sqrt(var + eps);
        out.col(c) = (x.col(c).array() - mu) * inv_std(c);
    }
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia, inv_std, r](Tape& t, Node& n) {
        Matrix gx(n.val.rows(), n.val.cols());
        for (int c = 0; c < n.val.cols(); ++c) {
            const auto y = n.val.col(c).array();
            const auto g = n.grad.col(c).array();
            const double gm = g.mean();
            const double gym = (g * y).mean();
            gx.col(c) = (inv_std(c) * (g - gm - y * gym)).matrix();
        }
        t.node(ia).add_grad(gx);
    });
}

Value dropout(Value a, double p, std::uint64_t seed, bool training) {
    if (!training || p <= 0.0) return a;
    Rng rng(seed);
    Matrix mask(a.rows(), a.cols());
    const double keep_scale = 1.0 / (1.0 - p);
    for (int c = 0; c < mask.cols(); ++c) {
        for (int r = 0; r < mask.rows(); ++r) {
            mask(r, c) = rng.bernoulli(p) ? 0.0 : keep_scale;
        }
    }
    Matrix out = a.val().cwiseProduct(mask);
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia, mask](Tape& t, Node& n) {
        t.node(ia).add_grad(n.grad.cwiseProduct(mask));
    });
}

Value clamp(Value a, double lo, double hi) {
    Matrix out = a.val().cwiseMax(lo).cwiseMin(hi);
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia, lo, hi](Tape& t, Node& n) {
        const auto& x = t.node(ia).val.array();
        Matrix g = (n.grad.array() * ((x >= lo) && (x <= hi)).cast<double>()).matrix();
        t.node(ia).add_grad(g);
    });
}

Value im2col(Value a, int height, int width, int ksize, int stride, int pad) {
    const Matrix& x = a.val();
    const int channels = static_cast<int>(x.rows());
    if (static_cast<int>(x.cols()) != height * width) {
        throw std::invalid_argument("im2col: shape mismatch");
    }
    const int out_h = (height + 2 * pad - ksize) / stride + 1;
    const int out_w = (width + 2 * pad - ksize) / stride + 1;
    Matrix out = Matrix::Zero(channels * ksize * ksize, out_h * out_w);
    for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox) {
            const int col = oy * out_w + ox;
            for (int ky = 0; ky < ksize; ++ky) {
                const int sy = oy * stride + ky - pad;
                if (sy < 0 || sy >= height) continue;
                for (int kx = 0; kx < ksize; ++kx) {
                    const int sx = ox * stride + kx - pad;
                    if (sx < 0 || sx >= width) continue;
                    out.block((ky * ksize + kx) * channels, col, channels, 1) =
                        x.col(sy * width + sx);
                }
            }
        }
    }
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a),
                              [ia, height, width, ksize, stride, pad, out_h, out_w, channels](
                                  Tape& t, Node& n) {
        Node& p = t.node(ia);
        if (p.grad.size() == 0) p.grad = Matrix::Zero(p.val.rows(), p.val.cols());
        for (int oy = 0; oy < out_h; ++oy) {
            for (int ox = 0; ox < out_w; ++ox) {
                const int col = oy * out_w + ox;
                for (int ky = 0; ky < ksize; ++ky) {
                    const int sy = oy * stride + ky - pad;
                    if (sy < 0 || sy >= height) continue;
                    for (int kx = 0; kx < ksize; ++kx) {
                        const int sx = ox * stride + kx - pad;
                        if (sx < 0 || sx >= width) continue;
                        p.grad.col(sy * width + sx) +=
                            n.grad.block((ky * ksize + kx) * channels, col, channels, 1);
                    }
                }
            }
        }
    });
}

Value upsample2x(Value a, int height, int width) {
    const Matrix& x = a.val();
    const int channels = static_cast<int>(x.rows());
    Matrix out(channels, 4 * height * width);
    const int ow = 2 * width;
    for (int y = 0; y < 2 * height; ++y) {
        for (int xx = 0; xx < ow; ++xx) {
            out.col(y * ow + xx) = x.col((y / 2) * width + (xx / 2));
        }
    }
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia, height, width, ow](Tape& t, Node& n) {
        Node& p = t.node(ia);
        if (p.grad.size() == 0) p.grad = Matrix::Zero(p.val.rows(), p.val.cols());
        for (int y = 0; y < 2 * height; ++y) {
            for (int xx = 0; xx < ow; ++xx) {
                p.grad.col((y / 2) * width + (xx / 2)) += n.grad.col(y * ow + xx);
            }
        }
    });
}

Value lincomb_cols(Value a, const std::vector<std::vector<ColTap>>& taps) {
    const Matrix& x = a.val();
    Matrix out = Matrix::Zero(x.rows(), static_cast<Eigen::Index>(taps.size()));
    for (std::size_t j = 0; j < taps.size(); ++j) {
        for (const auto& tap : taps[j]) {
            out.col(static_cast<Eigen::Index>(j)) += tap.w * x.col(tap.src);
        }
    }
    int ia = a.idx;
    return tape_of(a).emplace(std::move(out), rg(a), [ia, taps](Tape& t, Node& n) {
        Node& p = t.node(ia);
        if (p.grad.size() == 0) p.grad = Matrix::Zero(p.val.rows(), p.val.cols());
        for (std::size_t j = 0; j < taps.size(); ++j) {
            for (const auto& tap : taps[j]) {
                p.grad.col(tap.src) += tap.w * n.grad.col(static_cast<Eigen::Index>(j));
            }
        }
    });
}

}  // namespace gencrop::ag
