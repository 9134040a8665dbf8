// SPDX-License-Identifier: Apache-2.0
//
// U-Net style encoder, partial decoder and projection heads, plus the
// asymmetric two-branch network used for pre-training:
//
//   auxiliary: Yt = e(I)        Zl_aux = g_pix_aux(Yt)   Zg_aux = g_ins_aux(e(V))
//   dominant : Y  = e(down(I))  Zl     = d(Y)            Zg     = g_ins(e(down(V)))
//
// With lambda = 2^-N and an N-block partial decoder, Zl and Zl_aux share the
// same spatial size, and so do Y and down(Yt).
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "macl/augment.hpp"
#include "macl/branch_outputs.hpp"
#include "macl/nn.hpp"
#include "macl/params.hpp"

namespace macl {

enum class NormKind { Group, Instance, None };
enum class ConnectionMode { Shared, Independent, Ema };

inline std::string to_string(ConnectionMode m) {
    switch (m) {
    case ConnectionMode::Shared: return "shared";
    case ConnectionMode::Independent: return "independent";
    case ConnectionMode::Ema: return "ema";
    }
    return "shared";
}
inline ConnectionMode parse_connection_mode(const std::string& s) {
    if (s == "shared") return ConnectionMode::Shared;
    if (s == "independent") return ConnectionMode::Independent;
    if (s == "ema") return ConnectionMode::Ema;
    throw ConfigError("unknown connection mode '" + s + "'");
}
inline std::string to_string(NormKind k) {
    switch (k) {
    case NormKind::Group: return "group";
    case NormKind::Instance: return "instance";
    case NormKind::None: return "none";
    }
    return "group";
}
inline NormKind parse_norm_kind(const std::string& s) {
    if (s == "group") return NormKind::Group;
    if (s == "instance") return NormKind::Instance;
    if (s == "none") return NormKind::None;
    throw ConfigError("unknown norm kind '" + s + "'");
}

struct EncoderSpec {
    std::size_t levels = 4;        // L
    std::size_t base_channels = 16;
    std::size_t in_channels = 1;
    std::size_t max_channels = 256;
    NormKind norm = NormKind::Group;
    std::size_t norm_groups = 4; // upper bound; the actual count divides the channel width

    std::size_t channels(std::size_t level) const {
        return std::min(max_channels, base_channels << level);
    }
    std::size_t feature_channels() const { return channels(levels - 1); }
    std::size_t groups_for(std::size_t c) const {
        if (norm == NormKind::Instance) return c;
        return std::gcd(std::max<std::size_t>(1, norm_groups), c);
    }
    std::size_t reduction() const { return std::size_t{1} << (levels - 1); }
    void validate() const {
        if (levels < 2) throw ConfigError("encoder levels L must be >= 2");
        if (base_channels == 0 || in_channels == 0) throw ConfigError("encoder channels must be positive");
    }
    bool operator==(const EncoderSpec&) const = default;
};

struct PartialDecoderSpec {
    std::size_t blocks = 2; // N
    bool uses_skips = true;
};

struct MaclSpec {
    EncoderSpec encoder;
    PartialDecoderSpec decoder;
    std::size_t proj_dim = 128;      // image-level projection width
    std::size_t pixel_channels = 16; // C_p
    ConnectionMode mode = ConnectionMode::Shared;
    double ema_momentum = 0.99;

    void validate() const {
        encoder.validate();
        if (decoder.blocks > encoder.levels - 1)
            throw ConfigError("decoder blocks N must be in [0, L-1]");
        if (proj_dim == 0 || pixel_channels == 0) throw ConfigError("projection widths must be positive");
        if (!(ema_momentum >= 0.0 && ema_momentum < 1.0)) throw ConfigError("ema momentum must be in [0, 1)");
    }
};

inline void to_json(nlohmann::json& j, const MaclSpec& s) {
    j = {{"levels", s.encoder.levels},
         {"base_channels", s.encoder.base_channels},
         {"in_channels", s.encoder.in_channels},
         {"max_channels", s.encoder.max_channels},
         {"norm", to_string(s.encoder.norm)},
         {"norm_groups", s.encoder.norm_groups},
         {"decoder_blocks", s.decoder.blocks},
         {"uses_skips", s.decoder.uses_skips},
         {"proj_dim", s.proj_dim},
         {"pixel_channels", s.pixel_channels},
         {"connection_mode", to_string(s.mode)},
         {"ema_momentum", s.ema_momentum}};
}
inline void from_json(const nlohmann::json& j, MaclSpec& s) {
    s.encoder.levels = j.value("levels", s.encoder.levels);
    s.encoder.base_channels = j.value("base_channels", s.encoder.base_channels);
    s.encoder.in_channels = j.value("in_channels", s.encoder.in_channels);
    s.encoder.max_channels = j.value("max_channels", s.encoder.max_channels);
    s.encoder.norm = parse_norm_kind(j.value("norm", to_string(s.encoder.norm)));
    s.encoder.norm_groups = j.value("norm_groups", s.encoder.norm_groups);
    s.decoder.blocks = j.value("decoder_blocks", s.decoder.blocks);
    s.decoder.uses_skips = j.value("uses_skips", s.decoder.uses_skips);
    s.proj_dim = j.value("proj_dim", s.proj_dim);
    s.pixel_channels = j.value("pixel_channels", s.pixel_channels);
    s.mode = parse_connection_mode(j.value("connection_mode", to_string(s.mode)));
    s.ema_momentum = j.value("ema_momentum", s.ema_momentum);
}

// lambda must equal 2^-N for the branch outputs to align.
inline void check_alignment(double lambda, std::size_t blocks) {
    const double expect = std::ldexp(1.0, -static_cast<int>(blocks));
    if (std::abs(lambda - expect) > 1e-12)
        throw AlignmentError("lambda = " + std::to_string(lambda) + " but " + std::to_string(blocks) +
                             " decoder blocks require lambda = " + std::to_string(expect));
}

// ---------------------------------------------------------------------------
// Parameter construction

namespace build {

template <typename T>
void conv(ParamStore<T>& ps, const std::string& name, const std::string& tg, std::size_t cin, std::size_t cout,
          std::size_t k, Rng& rng) {
    ps.add(name + ".w", tg, init::he_uniform<T>({cout, cin, k, k}, cin * k * k, rng));
    ps.add(name + ".b", tg, Tensor<T>({cout}));
}

template <typename T>
void norm(ParamStore<T>& ps, const std::string& name, const std::string& tg, std::size_t c, NormKind kind) {
    if (kind == NormKind::None) return;
    ps.add(name + ".g", tg, Tensor<T>({c}, T(1)));
    ps.add(name + ".b", tg, Tensor<T>({c}));
}

template <typename T>
void conv_block(ParamStore<T>& ps, const std::string& name, const std::string& tg, std::size_t cin, std::size_t cout,
                NormKind kind, Rng& rng) {
    conv(ps, name + ".conv1", tg, cin, cout, 3, rng);
    norm(ps, name + ".norm1", tg, cout, kind);
    conv(ps, name + ".conv2", tg, cout, cout, 3, rng);
    norm(ps, name + ".norm2", tg, cout, kind);
}

template <typename T>
void linear(ParamStore<T>& ps, const std::string& name, const std::string& tg, std::size_t cin, std::size_t cout, Rng& rng) {
    ps.add(name + ".w", tg, init::he_uniform<T>({cout, cin}, cin, rng));
    ps.add(name + ".b", tg, Tensor<T>({cout}));
}

template <typename T>
void encoder(ParamStore<T>& ps, const std::string& prefix, const std::string& tg, const EncoderSpec& spec, Rng& rng) {
    spec.validate();
    for (std::size_t l = 0; l < spec.levels; ++l) {
        const std::size_t cin = l == 0 ? spec.in_channels : spec.channels(l - 1);
        conv_block(ps, prefix + ".l" + std::to_string(l), tg, cin, spec.channels(l), spec.norm, rng);
    }
}

// Decoder block b upsamples level (L-1-b) features to level (L-2-b).
template <typename T>
void decoder_block(ParamStore<T>& ps, const std::string& prefix, const std::string& tg, const EncoderSpec& spec,
                   std::size_t b, bool uses_skips, Rng& rng) {
    const std::size_t L = spec.levels;
    const std::size_t cin = spec.channels(L - 1 - b), cout = spec.channels(L - 2 - b);
    const std::string name = prefix + ".block" + std::to_string(b);
    ps.add(name + ".up.w", tg, init::he_uniform<T>({cin, cout, 2, 2}, cin, rng));
    ps.add(name + ".up.b", tg, Tensor<T>({cout}));
    conv_block(ps, name, tg, uses_skips ? 2 * cout : cout, cout, spec.norm, rng);
}

template <typename T>
void image_projector(ParamStore<T>& ps, const std::string& prefix, const std::string& tg, std::size_t cf, std::size_t out,
                     Rng& rng) {
    linear(ps, prefix + ".fc1", tg, cf, cf, rng);
    linear(ps, prefix + ".fc2", tg, cf, out, rng);
}

template <typename T>
void pixel_projector(ParamStore<T>& ps, const std::string& prefix, const std::string& tg, std::size_t cf, std::size_t out,
                     Rng& rng) {
    conv(ps, prefix + ".pw1", tg, cf, cf, 1, rng);
    conv(ps, prefix + ".pw2", tg, cf, out, 1, rng);
}

} // namespace build

// ---------------------------------------------------------------------------
// Forward passes

template <typename T>
Var<T> conv_norm_act(const ParamStore<T>& ps, const std::string& name, std::size_t idx, const EncoderSpec& spec, const Var<T>& x) {
    const std::string c = name + ".conv" + std::to_string(idx), n = name + ".norm" + std::to_string(idx);
    Var<T> h = nn::conv2d(x, ps.get(c + ".w"), ps.get(c + ".b"));
    if (spec.norm != NormKind::None) h = nn::group_norm(h, ps.get(n + ".g"), ps.get(n + ".b"), spec.groups_for(h.dim(1)));
    return nn::leaky_relu(h);
}

template <typename T>
Var<T> conv_block_forward(const ParamStore<T>& ps, const std::string& name, const EncoderSpec& spec, const Var<T>& x) {
    return conv_norm_act(ps, name, 2, spec, conv_norm_act(ps, name, 1, spec, x));
}

template <typename T>
struct EncoderOutput {
    Var<T> Y;                  // deepest feature map
    std::vector<Var<T>> skips; // levels 0..L-2, shallow first
};

template <typename T>
EncoderOutput<T> encoder_forward(const ParamStore<T>& ps, const std::string& prefix, const EncoderSpec& spec, const Var<T>& x) {
    if (x.value().rank() != 4 || x.dim(1) != spec.in_channels)
        throw ShapeError("encoder input must be [B, " + std::to_string(spec.in_channels) + ", H, W], got " + shape_str(x.shape()));
    const std::size_t r = spec.reduction();
    if (x.dim(2) % r != 0 || x.dim(3) % r != 0)
        throw ShapeError("encoder input " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                         " not divisible by 2^(L-1) = " + std::to_string(r));
    EncoderOutput<T> out;
    Var<T> h = x;
    for (std::size_t l = 0; l < spec.levels; ++l) {
        if (l > 0) h = nn::max_pool2(h);
        h = conv_block_forward(ps, prefix + ".l" + std::to_string(l), spec, h);
        if (l + 1 < spec.levels) out.skips.push_back(h);
    }
    out.Y = h;
    return out;
}

// Runs decoder blocks [0, blocks) starting from Y.
template <typename T>
Var<T> decoder_blocks_forward(const ParamStore<T>& ps, const std::string& prefix, const EncoderSpec& spec, std::size_t blocks,
                              bool uses_skips, const Var<T>& Y, const std::vector<Var<T>>& skips) {
    if (blocks > spec.levels - 1) throw ShapeError("decoder has more blocks than encoder levels allow");
    Var<T> h = Y;
    for (std::size_t b = 0; b < blocks; ++b) {
        const std::string name = prefix + ".block" + std::to_string(b);
        h = nn::conv_transpose2x2(h, ps.get(name + ".up.w"), ps.get(name + ".up.b"));
        if (uses_skips) {
            const std::size_t level = spec.levels - 2 - b;
            if (level >= skips.size()) throw ShapeError("missing encoder skip for decoder block " + std::to_string(b));
            const auto& s = skips[level];
            if (s.dim(2) != h.dim(2) || s.dim(3) != h.dim(3))
                throw ShapeError("skip resolution " + shape_str(s.shape()) + " does not match upsampled " + shape_str(h.shape()));
            h = nn::concat_channels(h, s);
        }
        h = conv_block_forward(ps, name, spec, h);
    }
    return h;
}

// Partial decoder followed by its pointwise output map to C_p channels.
template <typename T>
Var<T> partial_decoder_forward(const ParamStore<T>& ps, const MaclSpec& spec, const Var<T>& Y, const std::vector<Var<T>>& skips) {
    Var<T> h = decoder_blocks_forward(ps, "decoder", spec.encoder, spec.decoder.blocks, spec.decoder.uses_skips, Y, skips);
    return nn::conv2d(h, ps.get("decoder.pix_out.w"), ps.get("decoder.pix_out.b"));
}

// Global average pool -> linear -> leaky ReLU -> linear. Output is not normalized.
template <typename T>
Var<T> image_projector_forward(const ParamStore<T>& ps, const std::string& prefix, const Var<T>& feat) {
    Var<T> h = nn::global_avg_pool(feat);
    h = nn::leaky_relu(nn::linear(h, ps.get(prefix + ".fc1.w"), ps.get(prefix + ".fc1.b")));
    return nn::linear(h, ps.get(prefix + ".fc2.w"), ps.get(prefix + ".fc2.b"));
}

// Two pointwise layers; spatial size preserved.
template <typename T>
Var<T> pixel_projector_forward(const ParamStore<T>& ps, const std::string& prefix, const Var<T>& feat) {
    Var<T> h = nn::leaky_relu(nn::conv2d(feat, ps.get(prefix + ".pw1.w"), ps.get(prefix + ".pw1.b")));
    return nn::conv2d(h, ps.get(prefix + ".pw2.w"), ps.get(prefix + ".pw2.b"));
}

// Which parts of the forward pass to run; components with zero loss weight can be skipped.
struct ForwardRequest {
    bool global = true;   // Zg, Zg_aux
    bool pixel = true;    // Zl, Zl_aux
    bool features = true; // Y, Yt
};

// Pre-training network: shared (or independent / EMA) encoder, partial decoder
// and the three projection heads.
template <typename T>
class MaclNet {
public:
    MaclNet(const MaclSpec& spec, std::uint64_t seed) : spec_(spec) {
        spec_.validate();
        Rng rng(seed);
        build::encoder(params_, "encoder", tag::encoder, spec_.encoder, rng);
        for (std::size_t b = 0; b < spec_.decoder.blocks; ++b)
            build::decoder_block(params_, "decoder", tag::decoder_partial, spec_.encoder, b, spec_.decoder.uses_skips, rng);
        const std::size_t dec_out = spec_.decoder.blocks == 0 ? spec_.encoder.feature_channels()
                                                              : spec_.encoder.channels(spec_.encoder.levels - 1 - spec_.decoder.blocks);
        build::conv(params_, "decoder.pix_out", tag::decoder_partial, dec_out, spec_.pixel_channels, 1, rng);
        const std::size_t cf = spec_.encoder.feature_channels();
        build::image_projector(params_, "proj_img_dom", tag::proj_img_dom, cf, spec_.proj_dim, rng);
        build::image_projector(params_, "proj_img_aux", tag::proj_img_aux, cf, spec_.proj_dim, rng);
        build::pixel_projector(params_, "proj_pix_aux", tag::proj_pix_aux, cf, spec_.pixel_channels, rng);
        if (spec_.mode == ConnectionMode::Independent) {
            Rng aux_rng(seed ^ 0xA5A5A5A55A5A5A5AULL);
            build::encoder(params_, "aux_encoder", tag::encoder_aux, spec_.encoder, aux_rng);
        } else if (spec_.mode == ConnectionMode::Ema) {
            for (const auto& p : std::vector<Param<T>>(params_.entries()))
                if (p.tag == tag::encoder)
                    params_.add("aux_" + p.name, tag::encoder_aux, p.var.value(), false);
        }
    }

    const MaclSpec& spec() const { return spec_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    const char* aux_prefix() const { return spec_.mode == ConnectionMode::Shared ? "encoder" : "aux_encoder"; }

    // I and V are [2N, 1, H, W]: pixel-preserving and spatially transformed views.
    BranchOutputs<T> forward(const Tensor<T>& I, const Tensor<T>& V, double lambda, ForwardRequest req = {}) const {
        check_alignment(lambda, spec_.decoder.blocks);
        BranchOutputs<T> out;
        out.lambda = lambda;
        if (req.pixel || req.features) {
            const Var<T> i_full(I), i_small(down(I, lambda));
            auto aux = encoder_forward(params_, aux_prefix(), spec_.encoder, i_full);
            auto dom = encoder_forward(params_, "encoder", spec_.encoder, i_small);
            if (req.features) {
                out.Y = dom.Y;
                out.Yt = aux.Y;
            }
            if (req.pixel) {
                out.Zl = partial_decoder_forward(params_, spec_, dom.Y, dom.skips);
                out.Zl_aux = pixel_projector_forward(params_, "proj_pix_aux", aux.Y);
            }
        }
        if (req.global) {
            const Var<T> v_full(V), v_small(down(V, lambda));
            out.Zg = image_projector_forward(params_, "proj_img_dom", encoder_forward(params_, "encoder", spec_.encoder, v_small).Y);
            out.Zg_aux = image_projector_forward(params_, "proj_img_aux", encoder_forward(params_, aux_prefix(), spec_.encoder, v_full).Y);
        }
        return out;
    }

    // Auxiliary encoder <- m * auxiliary + (1 - m) * encoder.
    void update_ema() {
        if (spec_.mode != ConnectionMode::Ema) return;
        const T m = static_cast<T>(spec_.ema_momentum);
        for (auto& p : params_.entries()) {
            if (p.tag != tag::encoder) continue;
            auto& aux = params_.get("aux_" + p.name).mutable_value();
            const auto& src = p.var.value();
            for (std::size_t i = 0; i < aux.numel(); ++i) aux[i] = m * aux[i] + (T(1) - m) * src[i];
        }
    }

private:
    MaclSpec spec_;
    ParamStore<T> params_;
};

// ---------------------------------------------------------------------------
// Downstream segmentation network: encoder + full decoder + 1x1 head.

struct SegSpec {
    EncoderSpec encoder;
    std::size_t num_classes = 3; // including background
};

template <typename T>
ParamStore<T> build_segmentation(const SegSpec& spec, std::uint64_t seed) {
    spec.encoder.validate();
    if (spec.num_classes < 2) throw ConfigError("segmentation needs at least 2 classes");
    ParamStore<T> ps;
    Rng rng(seed);
    build::encoder(ps, "encoder", tag::encoder, spec.encoder, rng);
    for (std::size_t b = 0; b + 1 < spec.encoder.levels; ++b)
        build::decoder_block(ps, "decoder", tag::decoder, spec.encoder, b, true, rng);
    build::conv(ps, "head", tag::seg_head, spec.encoder.channels(0), spec.num_classes, 1, rng);
    return ps;
}

// Logits [B, classes, H, W].
template <typename T>
Var<T> segmentation_forward(const ParamStore<T>& ps, const SegSpec& spec, const Var<T>& x) {
    auto enc = encoder_forward(ps, "encoder", spec.encoder, x);
    Var<T> h = decoder_blocks_forward(ps, "decoder", spec.encoder, spec.encoder.levels - 1, true, enc.Y, enc.skips);
    return nn::conv2d(h, ps.get("head.w"), ps.get("head.b"));
}

} // namespace macl
