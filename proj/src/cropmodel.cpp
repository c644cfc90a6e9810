#include "gencrop/cropmodel.hpp"

#include "gencrop/rng.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <stdexcept>

namespace gencrop {

namespace {

constexpr double kMean[3] = {0.485, 0.456, 0.406};
constexpr double kStd[3] = {0.229, 0.224, 0.225};

void append_bilinear_taps(double gx, double gy, int grid, std::vector<ag::ColTap>& out) {
    gx = std::clamp(gx, 0.0, grid - 1.0);
    gy = std::clamp(gy, 0.0, grid - 1.0);
    const int x0 = std::min(grid - 2, static_cast<int>(std::floor(gx)));
    const int y0 = std::min(grid - 2, static_cast<int>(std::floor(gy)));
    const double tx = gx - x0, ty = gy - y0;
    const double w00 = (1 - tx) * (1 - ty), w10 = tx * (1 - ty);
    const double w01 = (1 - tx) * ty, w11 = tx * ty;
    if (w00 > 0) out.push_back({y0 * grid + x0, w00});
    if (w10 > 0) out.push_back({y0 * grid + x0 + 1, w10});
    if (w01 > 0) out.push_back({(y0 + 1) * grid + x0, w01});
    if (w11 > 0) out.push_back({(y0 + 1) * grid + x0 + 1, w11});
}

// Bilinear resample taps from a (h x w) map onto a (grid x grid) map.
std::vector<std::vector<ag::ColTap>> resample_taps(int w, int h, int grid) {
    std::vector<std::vector<ag::ColTap>> taps(static_cast<std::size_t>(grid) * grid);
    for (int gy = 0; gy < grid; ++gy) {
        for (int gx = 0; gx < grid; ++gx) {
            const double sx = (gx + 0.5) / grid * w - 0.5;
            const double sy = (gy + 0.5) / grid * h - 0.5;
            auto& t = taps[static_cast<std::size_t>(gy) * grid + gx];
            const double cx = std::clamp(sx, 0.0, w - 1.0);
            const double cy = std::clamp(sy, 0.0, h - 1.0);
            const int x0 = std::min(std::max(0, static_cast<int>(std::floor(cx))), w - 2 < 0 ? 0 : w - 2);
            const int y0 = std::min(std::max(0, static_cast<int>(std::floor(cy))), h - 2 < 0 ? 0 : h - 2);
            const double tx = w > 1 ? cx - x0 : 0.0;
            const double ty = h > 1 ? cy - y0 : 0.0;
            const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
            t.push_back({y0 * w + x0, (1 - tx) * (1 - ty)});
            if (x1 != x0) t.push_back({y0 * w + x1, tx * (1 - ty)});
            if (y1 != y0) t.push_back({y1 * w + x0, (1 - tx) * ty});
            if (x1 != x0 && y1 != y0) t.push_back({y1 * w + x1, tx * ty});
        }
    }
    return taps;
}

// Fixed 2D sinusoidal positional encoding, (channels, grid*grid).
ag::Matrix positional_encoding(int channels, int grid) {
    ag::Matrix pe = ag::Matrix::Zero(channels, grid * grid);
    const int quarter = channels / 4;
    for (int y = 0; y < grid; ++y) {
        for (int x = 0; x < grid; ++x) {
            const int col = y * grid + x;
            for (int c = 0; c < quarter; ++c) {
                const double omega = std::pow(10000.0, -static_cast<double>(c) / quarter);
                pe(c, col) = std::sin(x * omega);
                pe(quarter + c, col) = std::cos(x * omega);
                pe(2 * quarter + c, col) = std::sin(y * omega);
                pe(3 * quarter + c, col) = std::cos(y * omega);
            }
        }
    }
    return pe;
}

}  // namespace

const char* to_string(ModelVariant v) {
    switch (v) {
        case ModelVariant::Base: return "base";
        case ModelVariant::Conditional: return "conditional";
        case ModelVariant::Unet: return "unet";
        case ModelVariant::Ranking: return "ranking";
    }
    return "?";
}

ModelVariant variant_from_string(const std::string& s) {
    if (s == "base") return ModelVariant::Base;
    if (s == "conditional") return ModelVariant::Conditional;
    if (s == "unet") return ModelVariant::Unet;
    if (s == "ranking") return ModelVariant::Ranking;
    throw std::invalid_argument("unknown model variant: " + s);
}

void ModelConfig::validate() const {
    if (input_size <= 0 || grid <= 0 || fused_channels <= 0 || encoder_heads <= 0 ||
        encoder_layers <= 0 || roi_pool <= 0 || composition_hidden <= 0 || unet_input_size <= 0) {
        throw std::invalid_argument("ModelConfig: all dimensions must be positive");
    }
    if (backbone_channels.empty()) {
        throw std::invalid_argument("ModelConfig: backbone needs at least one stage");
    }
    if ((input_size >> backbone_channels.size()) != grid) {
        throw std::invalid_argument(
            "ModelConfig: backbone stages must downsample input_size to the anchor grid");
    }
    if (fused_channels % encoder_heads != 0) {
        throw std::invalid_argument("ModelConfig: heads must divide fused_channels");
    }
    if (fused_channels % 4 != 0) {
        throw std::invalid_argument("ModelConfig: fused_channels must be divisible by 4");
    }
}

nlohmann::json ModelConfig::to_json() const {
    return nlohmann::json{{"input_size", input_size},
                          {"grid", grid},
                          {"fused_channels", fused_channels},
                          {"encoder_heads", encoder_heads},
                          {"encoder_layers", encoder_layers},
                          {"encoder_ff_hidden", encoder_ff_hidden},
                          {"roi_pool", roi_pool},
                          {"composition_hidden", composition_hidden},
                          {"conditioning_hidden", conditioning_hidden},
                          {"conditioning_dropout", conditioning_dropout},
                          {"backbone_channels", backbone_channels},
                          {"unet_input_size", unet_input_size},
                          {"variant", to_string(variant)},
                          {"subject_aware", subject_aware}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.input_size = j.at("input_size").get<int>();
    cfg.grid = j.at("grid").get<int>();
    cfg.fused_channels = j.at("fused_channels").get<int>();
    cfg.encoder_heads = j.at("encoder_heads").get<int>();
    cfg.encoder_layers = j.at("encoder_layers").get<int>();
    cfg.encoder_ff_hidden = j.at("encoder_ff_hidden").get<int>();
    cfg.roi_pool = j.at("roi_pool").get<int>();
    cfg.composition_hidden = j.at("composition_hidden").get<int>();
    cfg.conditioning_hidden = j.at("conditioning_hidden").get<int>();
    cfg.conditioning_dropout = j.at("conditioning_dropout").get<double>();
    cfg.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
    cfg.unet_input_size = j.at("unet_input_size").get<int>();
    cfg.variant = variant_from_string(j.at("variant").get<std::string>());
    cfg.subject_aware = j.at("subject_aware").get<bool>();
    cfg.validate();
    return cfg;
}

Conditioning Conditioning::make(double area, double h_over_w) {
    Conditioning c;
    c.area = area;
    c.aspect_hw = h_over_w;
    c.aspect_wh = 1.0 / h_over_w;
    c.validate();
    return c;
}

void Conditioning::validate() const {
    if (!(area > 0.0 && area <= 1.0)) {
        throw std::invalid_argument("Conditioning: area must be in (0,1]");
    }
    if (aspect_hw <= 0.0 || aspect_wh <= 0.0 ||
        std::abs(aspect_hw * aspect_wh - 1.0) > 1e-6) {
        throw std::invalid_argument("Conditioning: aspect components must be positive reciprocals");
    }
}

ModelInput preprocess(const Image& view, const Mask* subject_mask, const ModelConfig& cfg) {
    if (view.empty() || view.channels() != 3) {
        throw std::invalid_argument("preprocess: RGB view required");
    }
    const int S = (cfg.variant == ModelVariant::Unet || cfg.variant == ModelVariant::Ranking)
                      ? cfg.unet_input_size
                      : cfg.input_size;
    const int vw = view.width(), vh = view.height();
    const double r = static_cast<double>(S) / std::max(vw, vh);
    ModelInput in;
    in.size = S;
    in.content_w = std::max(1, std::min(S, static_cast<int>(std::lround(vw * r))));
    in.content_h = std::max(1, std::min(S, static_cast<int>(std::lround(vh * r))));
    in.fx = static_cast<double>(in.content_w) / S;
    in.fy = static_cast<double>(in.content_h) / S;

    Image resized = resize_bilinear(view, in.content_w, in.content_h);
    Mask mask_resized;
    const bool use_mask = cfg.subject_aware && subject_mask != nullptr;
    if (use_mask) {
        mask_resized = resize_mask_nearest(*subject_mask, in.content_w, in.content_h);
    }

    in.channels = ag::Matrix::Zero(4, static_cast<Eigen::Index>(S) * S);
    for (int y = 0; y < in.content_h; ++y) {
        for (int x = 0; x < in.content_w; ++x) {
            const Eigen::Index col = static_cast<Eigen::Index>(y) * S + x;
            for (int c = 0; c < 3; ++c) {
                in.channels(c, col) = (resized.ch[c](y, x) - kMean[c]) / kStd[c];
            }
            in.channels(3, col) = use_mask ? (mask_resized(y, x) ? 1.0 : 0.0) : 1.0;
        }
    }
    return in;
}

CropRect view_to_model(const CropRect& r, const ModelInput& in) {
    return CropRect(r.x1 * in.fx, r.y1 * in.fy, r.x2 * in.fx, r.y2 * in.fy);
}

CropRect model_to_view(const CropRect& r, const ModelInput& in) {
    return CropRect(std::clamp(r.x1 / in.fx, 0.0, 1.0), std::clamp(r.y1 / in.fy, 0.0, 1.0),
                    std::clamp(r.x2 / in.fx, 0.0, 1.0), std::clamp(r.y2 / in.fy, 0.0, 1.0));
}

CropModel::CropModel(ModelConfig config, std::uint64_t init_seed) : cfg(std::move(config)) {
    cfg.validate();
    params.init_seed = init_seed;
}

ForwardOutput CropModel::forward(nn::Ctx& ctx, const ModelInput& in,
                                 const CropRect& subject_bbox_view,
                                 const std::optional<Conditioning>& cond) {
    if (cfg.variant == ModelVariant::Unet || cfg.variant == ModelVariant::Ranking) {
        throw std::logic_error("forward: anchor-grid path requires base/conditional variant");
    }
    if (cfg.variant == ModelVariant::Conditional && !cond.has_value()) {
        throw std::invalid_argument("forward: conditional variant requires conditioning");
    }
    const int S = cfg.input_size;
    const int G = cfg.grid;
    const int A = cfg.anchors();
    ag::Tape& tape = ctx.tape;

    // backbone: stride-2 stages down to the anchor grid
    ag::Value x = tape.input(in.channels, false);
    int h = S, w = S;
    int in_c = 4;
    std::vector<ag::Value> stage_outs;
    std::vector<std::pair<int, int>> stage_dims;
    for (std::size_t s = 0; s < cfg.backbone_channels.size(); ++s) {
        const int out_c = cfg.backbone_channels[s];
        x = ag::relu(nn::conv2d(ctx, "backbone.s" + std::to_string(s), x, h, w, in_c, out_c, 3, 2, 1));
        h = (h + 2 - 3) / 2 + 1;
        w = (w + 2 - 3) / 2 + 1;
        in_c = out_c;
        stage_outs.push_back(x);
        stage_dims.push_back({w, h});
    }

    // fuse the deepest (up to 3) stages at the grid resolution
    const std::size_t n_fuse = std::min<std::size_t>(3, stage_outs.size());
    ag::Value fused{};
    bool have = false;
    for (std::size_t k = stage_outs.size() - n_fuse; k < stage_outs.size(); ++k) {
        const auto [sw, sh] = stage_dims[k];
        ag::Value proj = nn::conv2d(ctx, "fuse.p" + std::to_string(k), stage_outs[k], sh, sw,
                                    cfg.backbone_channels[k], cfg.fused_channels, 1, 1, 0);
        if (sw != G || sh != G) {
            proj = ag::lincomb_cols(proj, resample_taps(sw, sh, G));
        }
        fused = have ? ag::add(fused, proj) : proj;
        have = true;
    }
    ag::Value feat =
        ag::relu(nn::conv2d(ctx, "fuse.out", fused, G, G, cfg.fused_channels, cfg.fused_channels,
                            1, 1, 0));
    feat = ag::add(feat, tape.constant(positional_encoding(cfg.fused_channels, G)));

    // encoder, or decoder attending to the encoded conditioning
    ag::Value tokens = feat;
    if (cfg.variant == ModelVariant::Conditional) {
        cond->validate();
        ag::Matrix cvec(3, 1);
        cvec << cond->area, cond->aspect_hw, cond->aspect_wh;
        ag::Value cin = tape.input(cvec, false);
        ag::Value chid = ag::relu(nn::linear(ctx, "cond.fc1", cin, cfg.conditioning_hidden));
        chid = ag::dropout(chid, cfg.conditioning_dropout, ctx.dropout_seed, ctx.training);
        ag::Value memory = nn::linear(ctx, "cond.fc2", chid, cfg.fused_channels);
        for (int l = 0; l < cfg.encoder_layers; ++l) {
            tokens = nn::decoder_layer(ctx, "dec.l" + std::to_string(l), tokens, memory,
                                       cfg.encoder_heads, cfg.encoder_ff_hidden);
        }
    } else {
        for (int l = 0; l < cfg.encoder_layers; ++l) {
            tokens = nn::encoder_layer(ctx, "enc.l" + std::to_string(l), tokens, cfg.encoder_heads,
                                       cfg.encoder_ff_hidden);
        }
    }

    // per-anchor proposals via a linear head: each anchor regresses corner
    // offsets from its own grid cell center (model frame, unbounded; bounded
    // parameterizations saturate and stall training)
    // small init so initial proposals hug their anchor centers
    ag::Value prop_w = ctx.p("head.prop.weight", 4, tokens.rows(), 0.02);
    ag::Value prop_b = ctx.p("head.prop.bias", 4, 1);
    ag::Value raw = ag::add_bias_cols(ag::matmul(prop_w, tokens), prop_b);
    ag::Matrix bmat(4, A);
    for (int iy = 0; iy < G; ++iy) {
        for (int ix = 0; ix < G; ++ix) {
            const int col = iy * G + ix;
            const double ax = (ix + 0.5) / G;
            const double ay = (iy + 0.5) / G;
            bmat.col(col) << ax, ay, ax, ay;
        }
    }
    ag::Value proposals_model = ag::add(raw, tape.constant(bmat));

    // anchor mask: cell center inside the subject bbox and the valid region
    ForwardOutput out;
    out.grid.grid = G;
    out.grid.anchor_mask.assign(A, 0);
    const CropRect sb_model = view_to_model(subject_bbox_view, in);
    std::vector<char> keep(A, 0);
    int kept = 0;
    for (int iy = 0; iy < G; ++iy) {
        for (int ix = 0; ix < G; ++ix) {
            const double cx = (ix + 0.5) / G, cy = (iy + 0.5) / G;
            if (cx <= in.fx && cy <= in.fy && sb_model.contains_point(cx, cy)) {
                keep[iy * G + ix] = 1;
                ++kept;
            }
        }
    }
    if (kept == 0) {
        // tiny subject: fall back to masking by the valid region only
        out.grid.degenerate_subject = true;
        for (int iy = 0; iy < G; ++iy) {
            for (int ix = 0; ix < G; ++ix) {
                const double cx = (ix + 0.5) / G, cy = (iy + 0.5) / G;
                if (cx <= in.fx && cy <= in.fy) {
                    keep[iy * G + ix] = 1;
                    ++kept;
                }
            }
        }
    }
    if (kept == 0) {
        keep.assign(A, 1);
        kept = A;
    }
    out.grid.anchor_mask = keep;

    // composition branch, only on anchors that participate in blending
    std::vector<int> kept_idx;
    kept_idx.reserve(kept);
    for (int a = 0; a < A; ++a) {
        if (keep[a]) kept_idx.push_back(a);
    }
    const ag::Matrix props_val = proposals_model.val();  // detached pooling coordinates
    const int P = cfg.roi_pool;
    std::vector<std::vector<ag::ColTap>> taps_in, taps_out;
    taps_in.reserve(kept_idx.size() * P * P);
    taps_out.reserve(kept_idx.size() * P * P);
    for (const int a : kept_idx) {
        const double x1 = props_val(0, a), y1 = props_val(1, a);
        const double x2 = props_val(2, a), y2 = props_val(3, a);
        // inside: bilinear samples at the centers of a PxP partition of the rect
        for (int jy = 0; jy < P; ++jy) {
            for (int jx = 0; jx < P; ++jx) {
                std::vector<ag::ColTap> t;
                const double px = x1 + (jx + 0.5) / P * (x2 - x1);
                const double py = y1 + (jy + 0.5) / P * (y2 - y1);
                append_bilinear_taps(px * G - 0.5, py * G - 0.5, G, t);
                taps_in.push_back(std::move(t));
            }
        }
        // outside: average cells of each full-frame PxP bin with the rect's
        // cells zeroed, renormalized over the remainder
        for (int jy = 0; jy < P; ++jy) {
            for (int jx = 0; jx < P; ++jx) {
                std::vector<ag::ColTap> t;
                const double bx1 = static_cast<double>(jx) / P, bx2 = (jx + 1.0) / P;
                const double by1 = static_cast<double>(jy) / P, by2 = (jy + 1.0) / P;
                for (int cy = 0; cy < G; ++cy) {
                    for (int cx = 0; cx < G; ++cx) {
                        const double ux = (cx + 0.5) / G, uy = (cy + 0.5) / G;
                        if (ux < bx1 || ux >= bx2 || uy < by1 || uy >= by2) continue;
                        if (ux >= x1 && ux <= x2 && uy >= y1 && uy <= y2) continue;
                        t.push_back({cy * G + cx, 1.0});
                    }
                }
                for (auto& tap : t) tap.w = 1.0 / t.size();
                taps_out.push_back(std::move(t));
            }
        }
    }
    const int K = static_cast<int>(kept_idx.size());
    ag::Value pooled_in = ag::lincomb_cols(tokens, taps_in);    // (C, K*P*P)
    ag::Value pooled_out = ag::lincomb_cols(tokens, taps_out);  // (C, K*P*P)
    const int flat = cfg.fused_channels * P * P;
    ag::Value comp_in = ag::concat_rows(
        {ag::reshape(pooled_in, flat, K), ag::reshape(pooled_out, flat, K)});  // (2*flat, K)
    ag::Value chid = ag::relu(nn::linear(ctx, "comp.fc1", comp_in, cfg.composition_hidden));
    ag::Value logits_k = nn::linear(ctx, "comp.fc2", chid, 1);  // (1, K)

    // scatter kept logits into the full anchor vector; masked entries are
    // excluded by the softmax regardless of their placeholder value
    std::vector<std::vector<ag::ColTap>> scatter(A);
    for (int k = 0; k < K; ++k) scatter[kept_idx[k]] = {{k, 1.0}};
    ag::Value logits = ag::reshape(ag::lincomb_cols(logits_k, scatter), A, 1);
    ag::Value sm = ag::masked_softmax(logits, keep);
    ag::Value blended_model = ag::matmul(proposals_model, sm);  // (4,1)

    // clamp to the valid (unpadded) region, then express in view coordinates
    ag::Value bx1 = ag::clamp(ag::slice_rows(blended_model, 0, 1), 0.0, in.fx);
    ag::Value by1 = ag::clamp(ag::slice_rows(blended_model, 1, 1), 0.0, in.fy);
    ag::Value bx2 = ag::clamp(ag::slice_rows(blended_model, 2, 1), 0.0, in.fx);
    ag::Value by2 = ag::clamp(ag::slice_rows(blended_model, 3, 1), 0.0, in.fy);
    ag::Matrix recip(4, 1);
    recip << 1.0 / in.fx, 1.0 / in.fy, 1.0 / in.fx, 1.0 / in.fy;
    out.blended = ag::cmul(ag::concat_rows({bx1, by1, bx2, by2}), tape.constant(recip));
    out.blended_raw = ag::cmul(blended_model, tape.constant(recip));
    ag::Matrix recip_all(4, A);
    recip_all.colwise() = Eigen::VectorXd(recip);
    out.proposals = ag::cmul(proposals_model, tape.constant(recip_all));

    // numeric snapshot
    const ag::Matrix pv = out.proposals.val();
    const ag::Matrix smv = sm.val();
    out.grid.proposals.reserve(A);
    out.grid.weights.resize(A);
    for (int a = 0; a < A; ++a) {
        const double x1 = std::clamp(pv(0, a), 0.0, 1.0 - 1e-9);
        const double y1 = std::clamp(pv(1, a), 0.0, 1.0 - 1e-9);
        const double x2 = std::clamp(pv(2, a), x1 + 1e-9, 1.0);
        const double y2 = std::clamp(pv(3, a), y1 + 1e-9, 1.0);
        out.grid.proposals.emplace_back(x1, y1, x2, y2);
        out.grid.weights[a] = smv(a, 0);
    }
    return out;
}

ag::Value CropModel::unet_forward(nn::Ctx& ctx, const ModelInput& in) {
    if (cfg.variant != ModelVariant::Unet) {
        throw std::logic_error("unet_forward: requires variant=unet");
    }
    const int S = in.size;
    if (S % 8 != 0) throw std::invalid_argument("unet_forward: input size must be divisible by 8");
    const int c1 = cfg.backbone_channels[0];
    const int c2 = cfg.backbone_channels[std::min<std::size_t>(1, cfg.backbone_channels.size() - 1)];
    const int c3 = cfg.backbone_channels[std::min<std::size_t>(2, cfg.backbone_channels.size() - 1)];

    ag::Value x0 = ctx.tape.input(in.channels, false);
    ag::Value d1 = ag::relu(nn::conv2d(ctx, "unet.d1", x0, S, S, 4, c1, 3, 2, 1));
    ag::Value d2 = ag::relu(nn::conv2d(ctx, "unet.d2", d1, S / 2, S / 2, c1, c2, 3, 2, 1));
    ag::Value d3 = ag::relu(nn::conv2d(ctx, "unet.d3", d2, S / 4, S / 4, c2, c3, 3, 2, 1));
    ag::Value mid = ag::relu(nn::conv2d(ctx, "unet.mid", d3, S / 8, S / 8, c3, c3, 3, 1, 1));

    ag::Value u2 = ag::upsample2x(mid, S / 8, S / 8);
    ag::Value m2 = ag::relu(nn::conv2d(ctx, "unet.u2", ag::concat_rows({u2, d2}), S / 4, S / 4,
                                       c3 + c2, c2, 3, 1, 1));
    ag::Value u1 = ag::upsample2x(m2, S / 4, S / 4);
    ag::Value m1 = ag::relu(nn::conv2d(ctx, "unet.u1", ag::concat_rows({u1, d1}), S / 2, S / 2,
                                       c2 + c1, c1, 3, 1, 1));
    ag::Value u0 = ag::upsample2x(m1, S / 2, S / 2);
    ag::Value m0 = ag::relu(nn::conv2d(ctx, "unet.u0", ag::concat_rows({u0, x0}), S, S, c1 + 4, 8,
                                       3, 1, 1));
    return ag::sigmoid(nn::conv2d(ctx, "unet.head", m0, S, S, 8, 1, 1, 1, 0));
}

ag::Value CropModel::ranking_forward(nn::Ctx& ctx, const ModelInput& in) {
    if (cfg.variant != ModelVariant::Ranking) {
        throw std::logic_error("ranking_forward: requires variant=ranking");
    }
    const int S = in.size;
    ag::Value x = ctx.tape.input(in.channels, false);
    int h = S, w = S, in_c = 4;
    for (std::size_t s = 0; s < cfg.backbone_channels.size(); ++s) {
        x = ag::relu(nn::conv2d(ctx, "rank.s" + std::to_string(s), x, h, w, in_c,
                                cfg.backbone_channels[s], 3, 2, 1));
        h = (h + 2 - 3) / 2 + 1;
        w = (w + 2 - 3) / 2 + 1;
        in_c = cfg.backbone_channels[s];
    }
    ag::Value pooled = ag::matmul(
        x, ctx.tape.constant(ag::Matrix::Constant(h * w, 1, 1.0 / (h * w))));  // global average
    ag::Value hid = ag::relu(nn::linear(ctx, "rank.fc1", pooled, 64));
    return ag::sigmoid(nn::linear(ctx, "rank.fc2", hid, 1));
}

Prediction predict(CropModel& model, const Image& view, const Mask* subject_mask,
                   const CropRect& subject_bbox_view, const std::optional<Conditioning>& cond) {
    ModelInput in = preprocess(view, subject_mask, model.cfg);
    ag::Tape tape;
    nn::Ctx ctx{tape, model.params, false, 0};
    ForwardOutput out = model.forward(ctx, in, subject_bbox_view, cond);
    const ag::Matrix b = out.blended.val();
    const double x1 = std::clamp(b(0, 0), 0.0, 1.0 - 1e-9);
    const double y1 = std::clamp(b(1, 0), 0.0, 1.0 - 1e-9);
    Prediction pred{CropRect(x1, y1, std::clamp(b(2, 0), x1 + 1e-9, 1.0),
                             std::clamp(b(3, 0), y1 + 1e-9, 1.0)),
                    std::move(out.grid)};
    return pred;
}

MaskCrop crop_from_mask(const Plane& scores, double threshold) {
    const int h = static_cast<int>(scores.rows()), w = static_cast<int>(scores.cols());
    Eigen::ArrayXXi labels = Eigen::ArrayXXi::Constant(h, w, -1);
    int best_size = 0;
    int best_x1 = 0, best_y1 = 0, best_x2 = 0, best_y2 = 0;
    int next = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (scores(y, x) < threshold || labels(y, x) >= 0) continue;
            const int id = next++;
            int size = 0, x1 = x, y1 = y, x2 = x, y2 = y;
            std::queue<std::pair<int, int>> frontier;
            frontier.push({y, x});
            labels(y, x) = id;
            while (!frontier.empty()) {
                auto [cy, cx] = frontier.front();
                frontier.pop();
                ++size;
                x1 = std::min(x1, cx);
                x2 = std::max(x2, cx);
                y1 = std::min(y1, cy);
                y2 = std::max(y2, cy);
                const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
                for (int k = 0; k < 4; ++k) {
                    const int ny = cy + dy[k], nx = cx + dx[k];
                    if (ny >= 0 && ny < h && nx >= 0 && nx < w && labels(ny, nx) < 0 &&
                        scores(ny, nx) >= threshold) {
                        labels(ny, nx) = id;
                        frontier.push({ny, nx});
                    }
                }
            }
            if (size > best_size) {
                best_size = size;
                best_x1 = x1;
                best_y1 = y1;
                best_x2 = x2;
                best_y2 = y2;
            }
        }
    }
    if (best_size == 0) {
        return {CropRect(0.0, 0.0, 1.0, 1.0), true};
    }
    return {from_pixels(PixelRect{best_x1, best_y1, best_x2 + 1, best_y2 + 1}, ImageDims(w, h)),
            false};
}

CropRect unet_predict(CropModel& model, const Image& view, const Mask* subject_mask,
                      bool* fallback) {
    ModelInput in = preprocess(view, subject_mask, model.cfg);
    ag::Tape tape;
    nn::Ctx ctx{tape, model.params, false, 0};
    ag::Value scores = model.unet_forward(ctx, in);
    const ag::Matrix& sv = scores.val();
    Plane plane = Plane::Zero(in.size, in.size);
    // scores outside the content region cannot vote
    for (int y = 0; y < in.content_h; ++y) {
        for (int x = 0; x < in.content_w; ++x) {
            plane(y, x) = sv(0, static_cast<Eigen::Index>(y) * in.size + x);
        }
    }
    MaskCrop mc = crop_from_mask(plane);
    if (fallback != nullptr) *fallback = mc.fallback;
    if (mc.fallback) return CropRect(0.0, 0.0, 1.0, 1.0);
    return model_to_view(mc.rect, in);
}

double ranking_score(CropModel& model, const Image& view, const Mask* subject_mask,
                     const CropRect& candidate) {
    const PixelRect pr = to_pixels(candidate, view.dims());
    Image crop = crop_image(view, pr);
    Mask crop_mask_local;
    const Mask* mask_ptr = nullptr;
    if (subject_mask != nullptr) {
        crop_mask_local = crop_mask(*subject_mask, pr);
        mask_ptr = &crop_mask_local;
    }
    ModelInput in = preprocess(crop, mask_ptr, model.cfg);
    ag::Tape tape;
    nn::Ctx ctx{tape, model.params, false, 0};
    return model.ranking_forward(ctx, in).scalar();
}

std::vector<CropRect> candidate_grid(int min_count) {
    std::vector<CropRect> out;
    const double aspects[3] = {1.0, 4.0 / 3.0, 3.0 / 4.0};
    for (int ai = 0; ai < 8; ++ai) {
        const double area = 0.3 + 0.1 * ai;
        for (const double aspect : aspects) {
            const double w = std::min(1.0, std::sqrt(area * aspect));
            const double h = std::min(1.0, std::sqrt(area / aspect));
            for (int px = 0; px < 3; ++px) {
                for (int py = 0; py < 3; ++py) {
                    const double x1 = (1.0 - w) * px / 2.0;
                    const double y1 = (1.0 - h) * py / 2.0;
                    CropRect r(x1, y1, x1 + w, y1 + h);
                    bool dup = false;
                    for (const auto& e : out) {
                        if (std::abs(e.x1 - r.x1) < 1e-9 && std::abs(e.y1 - r.y1) < 1e-9 &&
                            std::abs(e.x2 - r.x2) < 1e-9 && std::abs(e.y2 - r.y2) < 1e-9) {
                            dup = true;
                            break;
                        }
                    }
                    if (!dup) out.push_back(r);
                }
            }
        }
    }
    if (static_cast<int>(out.size()) < min_count) {
        throw std::logic_error("candidate_grid: generator produced too few candidates");
    }
    return out;
}

void save_model(const std::string& path, const CropModel& model,
                const nlohmann::json& dataset_stats) {
    nlohmann::json meta;
    meta["config"] = model.cfg.to_json();
    meta["dataset_stats"] = dataset_stats;
    nn::save_checkpoint(path, model.params, meta);
}

CropModel load_model(const std::string& path, nlohmann::json* dataset_stats) {
    nn::ParamStore store;
    nlohmann::json meta = nn::load_checkpoint(path, store);
    CropModel model(ModelConfig::from_json(meta.at("config")));
    model.params = std::move(store);
    if (dataset_stats != nullptr) {
        *dataset_stats = meta.value("dataset_stats", nlohmann::json::object());
    }
    return model;
}

}  // namespace gencrop
