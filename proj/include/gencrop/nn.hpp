#pragma once

#include "gencrop/autograd.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <string>

namespace gencrop::nn {

using ag::Matrix;
using ag::Tape;
using ag::Value;

// Named parameter tensors plus optimizer state. Parameters are created on
// first use with deterministic fan-based initialization.
struct ParamStore {
    std::map<std::string, Matrix> values;
    std::map<std::string, Matrix> grads;
    std::map<std::string, Matrix> adam_m;
    std::map<std::string, Matrix> adam_v;
    std::uint64_t init_seed = 1;

    Matrix& get_or_init(const std::string& name, int rows, int cols, double scale_override = -1.0);
    void zero_grads();
    std::size_t parameter_count() const;
};

// Per-forward context: one tape, shared parameters, train/eval mode.
struct Ctx {
    Tape& tape;
    ParamStore& params;
    bool training = false;
    std::uint64_t dropout_seed = 0;

    Value p(const std::string& name, int rows, int cols, double scale_override = -1.0) {
        return tape.param(name, params.get_or_init(name, rows, cols, scale_override));
    }
};

// x is (in_dim, N); returns (out_dim, N).
Value linear(Ctx& ctx, const std::string& name, Value x, int out_dim, bool bias = true);

// Feature maps are (C, H*W). Returns (out_c, outH*outW).
Value conv2d(Ctx& ctx, const std::string& name, Value x, int height, int width, int in_c,
             int out_c, int ksize, int stride, int pad, bool bias = true);

Value layernorm_affine(Ctx& ctx, const std::string& name, Value x);

// Multi-head attention; queries from q (d, Nq), keys/values from kv (d, Nkv).
Value multihead_attention(Ctx& ctx, const std::string& name, Value q, Value kv, int heads);

// Pre-LN transformer encoder layer.
Value encoder_layer(Ctx& ctx, const std::string& name, Value x, int heads, int ff_hidden);

// Pre-LN decoder layer with cross-attention into memory.
Value decoder_layer(Ctx& ctx, const std::string& name, Value x, Value memory, int heads,
                    int ff_hidden);

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// step_index is 1-based.
void adamw_step(ParamStore& params, const AdamWConfig& cfg, int step_index);

// Linear warm-up to peak_lr then cosine decay to ~0 at total_steps.
double cosine_warmup_lr(int step, int total_steps, int warmup_steps, double peak_lr);

// Checkpoints: JSON with a metadata object and base64 little-endian doubles.
void save_checkpoint(const std::string& path, const ParamStore& params,
                     const nlohmann::json& meta);
nlohmann::json load_checkpoint(const std::string& path, ParamStore& params);

}  // namespace gencrop::nn
