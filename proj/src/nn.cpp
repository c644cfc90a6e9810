#include "gencrop/nn.hpp"

#include "gencrop/backends.hpp"  // base64 helpers
#include "gencrop/rng.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace gencrop::nn {

Matrix& ParamStore::get_or_init(const std::string& name, int rows, int cols,
                                double scale_override) {
    auto it = values.find(name);
    if (it != values.end()) {
        if (it->second.rows() != rows || it->second.cols() != cols) {
            throw std::invalid_argument("ParamStore: shape mismatch for " + name);
        }
        return it->second;
    }
    Matrix m(rows, cols);
    if (name.size() >= 5 && name.substr(name.size() - 5) == ".bias") {
        m.setZero();
    } else {
        // He-style init on fan-in (= rows of x for our (out, in) weights)
        const double scale = scale_override > 0.0 ? scale_override : std::sqrt(2.0 / cols);
        Rng rng = Rng::derive(init_seed, name);
        for (int c = 0; c < cols; ++c) {
            for (int r = 0; r < rows; ++r) m(r, c) = scale * rng.normal();
        }
    }
    return values.emplace(name, std::move(m)).first->second;
}

void ParamStore::zero_grads() { grads.clear(); }

std::size_t ParamStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : values) n += static_cast<std::size_t>(m.size());
    return n;
}

Value linear(Ctx& ctx, const std::string& name, Value x, int out_dim, bool bias) {
    Value w = ctx.p(name + ".weight", out_dim, x.rows());
    Value y = ag::matmul(w, x);
    if (bias) {
        y = ag::add_bias_cols(y, ctx.p(name + ".bias", out_dim, 1));
    }
    return y;
}

Value conv2d(Ctx& ctx, const std::string& name, Value x, int height, int width, int in_c,
             int out_c, int ksize, int stride, int pad, bool bias) {
    if (x.rows() != in_c || x.cols() != height * width) {
        throw std::invalid_argument("conv2d: input shape mismatch at " + name);
    }
    Value cols = ag::im2col(x, height, width, ksize, stride, pad);
    Value w = ctx.p(name + ".weight", out_c, in_c * ksize * ksize);
    Value y = ag::matmul(w, cols);
    if (bias) {
        y = ag::add_bias_cols(y, ctx.p(name + ".bias", out_c, 1));
    }
    return y;
}

Value layernorm_affine(Ctx& ctx, const std::string& name, Value x) {
    Value normed = ag::layernorm_cols(x);
    Value gain = ctx.p(name + ".gain", x.rows(), 1, 1e-9);  // ~zeros, shifted below
    // gain initializes near 0; add 1 so the layer starts as identity
    Value ones = ctx.tape.constant(Matrix::Ones(x.rows(), 1));
    Value g = ag::add(gain, ones);
    Value scaled = ag::cmul(normed, ag::matmul(g, ctx.tape.constant(Matrix::Ones(1, x.cols()))));
    return ag::add_bias_cols(scaled, ctx.p(name + ".bias", x.rows(), 1));
}

Value multihead_attention(Ctx& ctx, const std::string& name, Value q_in, Value kv_in, int heads) {
    const int d = q_in.rows();
    if (d % heads != 0) throw std::invalid_argument("multihead_attention: heads must divide dim");
    const int dh = d / heads;
    Value q = linear(ctx, name + ".q", q_in, d);
    Value k = linear(ctx, name + ".k", kv_in, d);
    Value v = linear(ctx, name + ".v", kv_in, d);
    std::vector<Value> head_outs;
    head_outs.reserve(heads);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < heads; ++h) {
        Value qh = ag::slice_rows(q, h * dh, dh);
        Value kh = ag::slice_rows(k, h * dh, dh);
        Value vh = ag::slice_rows(v, h * dh, dh);
        // attention matrix (Nkv x Nq): columns are per-query distributions
        Value logits = ag::scale(ag::matmul(kh, qh, true, false), inv_sqrt);
        Value attn = ag::softmax_cols(logits);
        head_outs.push_back(ag::matmul(vh, attn));
    }
    return linear(ctx, name + ".out", ag::concat_rows(head_outs), d);
}

Value encoder_layer(Ctx& ctx, const std::string& name, Value x, int heads, int ff_hidden) {
    Value normed = layernorm_affine(ctx, name + ".ln1", x);
    Value attended = multihead_attention(ctx, name + ".attn", normed, normed, heads);
    Value h = ag::add(x, attended);
    Value normed2 = layernorm_affine(ctx, name + ".ln2", h);
    Value ff = linear(ctx, name + ".ff2", ag::relu(linear(ctx, name + ".ff1", normed2, ff_hidden)),
                      x.rows());
    return ag::add(h, ff);
}

Value decoder_layer(Ctx& ctx, const std::string& name, Value x, Value memory, int heads,
                    int ff_hidden) {
    Value normed = layernorm_affine(ctx, name + ".ln1", x);
    Value self_attended = multihead_attention(ctx, name + ".self", normed, normed, heads);
    Value h = ag::add(x, self_attended);
    Value normed2 = layernorm_affine(ctx, name + ".ln2", h);
    Value cross = multihead_attention(ctx, name + ".cross", normed2, memory, heads);
    Value h2 = ag::add(h, cross);
    Value normed3 = layernorm_affine(ctx, name + ".ln3", h2);
    Value ff = linear(ctx, name + ".ff2", ag::relu(linear(ctx, name + ".ff1", normed3, ff_hidden)),
                      x.rows());
    return ag::add(h2, ff);
}

void adamw_step(ParamStore& params, const AdamWConfig& cfg, int step_index) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, step_index);
    const double bc2 = 1.0 - std::pow(cfg.beta2, step_index);
    for (auto& [name, g] : params.grads) {
        auto vit = params.values.find(name);
        if (vit == params.values.end()) continue;
        Matrix& w = vit->second;
        Matrix& m = params.adam_m.try_emplace(name, Matrix::Zero(w.rows(), w.cols())).first->second;
        Matrix& v = params.adam_v.try_emplace(name, Matrix::Zero(w.rows(), w.cols())).first->second;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v.array().matrix() + (1.0 - cfg.beta2) * g.cwiseProduct(g);
        const Matrix m_hat = m / bc1;
        const Matrix v_hat = v / bc2;
        // decoupled weight decay
        w -= cfg.lr * cfg.weight_decay * w;
        w -= cfg.lr * (m_hat.array() / (v_hat.array().sqrt() + cfg.eps)).matrix();
    }
}

double cosine_warmup_lr(int step, int total_steps, int warmup_steps, double peak_lr) {
    if (warmup_steps > 0 && step < warmup_steps) {
        return peak_lr * static_cast<double>(step) / warmup_steps;
    }
    const int decay_steps = std::max(1, total_steps - warmup_steps);
    const double t = std::min(1.0, static_cast<double>(step - warmup_steps) / decay_steps);
    return 0.5 * peak_lr * (1.0 + std::cos(std::numbers::pi * t));
}

void save_checkpoint(const std::string& path, const ParamStore& params,
                     const nlohmann::json& meta) {
    nlohmann::json j;
    j["format"] = "gencrop-checkpoint-v1";
    j["meta"] = meta;
    nlohmann::json ps = nlohmann::json::object();
    for (const auto& [name, m] : params.values) {
        std::vector<std::uint8_t> bytes(sizeof(double) * m.size());
        std::memcpy(bytes.data(), m.data(), bytes.size());
        ps[name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"data", base64_encode(bytes)}};
    }
    j["params"] = std::move(ps);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out << j.dump();
}

nlohmann::json load_checkpoint(const std::string& path, ParamStore& params) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "gencrop-checkpoint-v1") {
        throw std::runtime_error("load_checkpoint: unrecognized format in " + path);
    }
    params.values.clear();
    params.grads.clear();
    params.adam_m.clear();
    params.adam_v.clear();
    for (const auto& [name, entry] : j.at("params").items()) {
        const int rows = entry.at("rows").get<int>();
        const int cols = entry.at("cols").get<int>();
        auto bytes = base64_decode(entry.at("data").get<std::string>());
        if (bytes.size() != sizeof(double) * static_cast<std::size_t>(rows) * cols) {
            throw std::runtime_error("load_checkpoint: size mismatch for " + name);
        }
        Matrix m(rows, cols);
        std::memcpy(m.data(), bytes.data(), bytes.size());
        params.values[name] = std::move(m);
    }
    return j.at("meta");
}

}  // namespace gencrop::nn
