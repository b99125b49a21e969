#pragma once

// Encoder-decoder segmentation network assembled from residual blocks.
//
// Channel schedule for base depth b (proposed variant):
//   encoder  1->b, b->2b, 2b->4b, 4b->8b, each followed by 2x2 max pooling
//   bottleneck 8b->16b at 1/16 resolution
//   decoder  upsample, concatenate the matching encoder output, residual block
//            (16b+8b)->8b, (8b+4b)->4b, (4b+2b)->2b bilinear,
//            then pixel shuffle 2b->b/2 and (b/2+b)->b
//   head     1x1 convolution to the class count, channel softmax
// The baseline UNet uses the same schedule with standard convolutions and
// bilinear upsampling at all four decoder stages.

#include <array>
#include <cstddef>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "lseg/layers.hpp"

namespace lseg {

enum class Variant { proposed, baseline_unet };
enum class Upsample { bilinear, subpixel };
enum class Shortcut { identity, projection };

inline std::string to_string(Variant v) { return v == Variant::proposed ? "proposed" : "baseline-unet"; }
inline std::string to_string(Upsample u) { return u == Upsample::bilinear ? "bilinear" : "subpixel"; }

inline Variant parse_variant(const std::string& s) {
    if (s == "proposed") return Variant::proposed;
    if (s == "baseline-unet") return Variant::baseline_unet;
    throw ConfigError("unknown model variant '" + s + "' (expected proposed or baseline-unet)");
}

struct ResNetBlockSpec {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 3;
    bool separable = true;

    Shortcut shortcut() const { return in_channels == out_channels ? Shortcut::identity : Shortcut::projection; }
};

struct ModelSpec {
    Variant variant = Variant::proposed;
    std::size_t base_depth = 64;
    std::size_t depth_cap = 1024;
    std::size_t num_classes = 2;
    std::size_t input_channels = 1;
    std::size_t kernel = 3;
    double dropout = 0.05;
    std::array<Upsample, 4> upsample_plan{Upsample::bilinear, Upsample::bilinear, Upsample::bilinear,
                                          Upsample::subpixel};

    static ModelSpec proposed(std::size_t base = 64) {
        ModelSpec s;
        s.base_depth = base;
        return s;
    }

    static ModelSpec baseline(std::size_t base = 64) {
        ModelSpec s;
        s.variant = Variant::baseline_unet;
        s.base_depth = base;
        s.upsample_plan.fill(Upsample::bilinear);
        return s;
    }

    static ModelSpec of(Variant v, std::size_t base) { return v == Variant::proposed ? proposed(base) : baseline(base); }

    bool separable() const { return variant == Variant::proposed; }

    void validate() const;

    std::array<ResNetBlockSpec, 4> encoder_blocks() const;
    ResNetBlockSpec bottleneck_block() const;
    std::array<ResNetBlockSpec, 4> decoder_blocks() const;
};

inline std::array<ResNetBlockSpec, 4> ModelSpec::encoder_blocks() const {
    std::array<ResNetBlockSpec, 4> out;
    std::size_t in = input_channels;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t width = base_depth << i;
        out[i] = {in, width, kernel, separable()};
        in = width;
    }
    return out;
}

inline ResNetBlockSpec ModelSpec::bottleneck_block() const {
    return {base_depth * 8, base_depth * 16, kernel, separable()};
}

inline std::array<ResNetBlockSpec, 4> ModelSpec::decoder_blocks() const {
    std::array<ResNetBlockSpec, 4> out;
    std::size_t below = base_depth * 16;
    for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t skip = base_depth << (3 - i);
        const std::size_t upsampled = upsample_plan[i] == Upsample::subpixel ? below / 4 : below;
        out[i] = {upsampled + skip, skip, kernel, separable()};
        below = skip;
    }
    return out;
}

inline void ModelSpec::validate() const {
    if (base_depth == 0) throw ShapeError("model spec: base depth must be positive");
    if (base_depth * 16 > depth_cap) {
        throw ShapeError("model spec: base depth " + std::to_string(base_depth) + " x 16 exceeds depth cap " +
                         std::to_string(depth_cap));
    }
    if (num_classes < 2) throw ShapeError("model spec: at least 2 classes required");
    if (input_channels == 0) throw ShapeError("model spec: input channels must be positive");
    if (kernel == 0 || kernel % 2 == 0) throw ShapeError("model spec: kernel must be odd, got " + std::to_string(kernel));
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ShapeError("model spec: dropout must be in [0, 1)");
    if (variant == Variant::proposed && upsample_plan[3] != Upsample::subpixel) {
        throw ShapeError("model spec: the proposed variant upsamples last with a sub-pixel layer");
    }
    std::size_t below = base_depth * 16;
    for (std::size_t i = 0; i < 4; ++i) {
        if (upsample_plan[i] == Upsample::subpixel && below % 4 != 0) {
            throw ShapeError("model spec: sub-pixel upsampling at decoder stage " + std::to_string(i + 1) +
                             " needs a channel count divisible by 4, got " + std::to_string(below));
        }
        below = base_depth << (3 - i);
    }
}

// ---------------------------------------------------------------------------

template <typename T>
struct ConvLayer {
    std::variant<Conv2dParams<T>, SeparableConv2dParams<T>> params;

    bool separable() const { return std::holds_alternative<SeparableConv2dParams<T>>(params); }

    Var<T> operator()(const Var<T>& x) const {
        if (separable()) return separable_conv2d(x, std::get<SeparableConv2dParams<T>>(params));
        return conv2d(x, std::get<Conv2dParams<T>>(params));
    }
};

template <typename T>
ConvLayer<T> make_conv_layer(std::size_t in, std::size_t out, std::size_t kernel, bool separable, Rng& rng) {
    if (separable) return {make_separable_conv2d<T>(in, out, kernel, rng)};
    return {make_conv2d<T>(in, out, kernel, rng)};
}

template <typename T>
struct ResNetBlock {
    ResNetBlockSpec spec;
    BatchNormParams<T> bn;
    ConvLayer<T> conv1;
    ConvLayer<T> conv2;
    std::optional<Conv2dParams<T>> projection;
};

template <typename T>
ResNetBlock<T> make_resnet_block(const ResNetBlockSpec& spec, Rng& rng) {
    ResNetBlock<T> b;
    b.spec = spec;
    b.bn = make_batch_norm<T>(spec.in_channels);
    b.conv1 = make_conv_layer<T>(spec.in_channels, spec.out_channels, spec.kernel, spec.separable, rng);
    b.conv2 = make_conv_layer<T>(spec.out_channels, spec.out_channels, spec.kernel, spec.separable, rng);
    if (spec.shortcut() == Shortcut::projection) b.projection = make_conv2d<T>(spec.in_channels, spec.out_channels, 1, rng);
    return b;
}

// y = relu(dropout(conv2(relu(conv1(bn(x))))) + shortcut(bn(x)))
template <typename T>
Var<T> resnet_block_forward(ResNetBlock<T>& block, const Var<T>& x, Mode mode, double dropout_rate, Rng* rng) {
    if (x.shape().size() != 4 || x.shape()[1] != block.spec.in_channels) {
        throw ShapeError("resnet block: channel mismatch, input " + to_string(x.shape()) + " but block expects " +
                         std::to_string(block.spec.in_channels) + " channels");
    }
    Var<T> normed = batch_norm(x, block.bn, mode);
    Var<T> h = relu(block.conv1(normed));
    h = block.conv2(h);
    if (mode == Mode::train && dropout_rate > 0.0) {
        if (rng == nullptr) throw ShapeError("resnet block: train-mode dropout needs a random stream");
        h = dropout(h, DropoutParams{dropout_rate}, mode, *rng);
    }
    Var<T> shortcut = block.projection ? conv2d(normed, *block.projection) : normed;
    return relu(h + shortcut);
}

// One named tensor of the model: either a learnable Var or a buffer
// (batch-norm running statistics).
template <typename T>
struct ParamEntry {
    std::string name;
    Var<T>* var = nullptr;
    Tensor<T>* buffer = nullptr;

    bool learnable() const { return var != nullptr; }
    Tensor<T>& tensor() const { return var ? var->mutable_value() : *buffer; }
};

struct LayerInfo {
    std::string name;  // stage.block.layer
    std::string kind;  // batch_norm, conv2d, depthwise, pointwise, max_pool, bilinear, pixel_shuffle
};

template <typename T>
class ModelParams {
public:
    ModelSpec spec;
    std::array<ResNetBlock<T>, 4> encoder;
    ResNetBlock<T> bottleneck;
    std::array<ResNetBlock<T>, 4> decoder;
    Conv2dParams<T> head;

    ModelParams() = default;
    ModelParams(ModelParams&&) noexcept = default;
    ModelParams& operator=(ModelParams&&) noexcept = default;
    // Vars are shared handles; copies must be explicit through clone().
    ModelParams(const ModelParams&) = delete;
    ModelParams& operator=(const ModelParams&) = delete;

    // Every named tensor in deterministic order: stages in forward order, then
    // layers within a block, then tensors within a layer.
    std::vector<ParamEntry<T>> entries() {
        std::vector<ParamEntry<T>> out;
        for (std::size_t i = 0; i < 4; ++i) add_block(out, "enc" + std::to_string(i + 1), encoder[i]);
        add_block(out, "mid", bottleneck);
        for (std::size_t i = 0; i < 4; ++i) add_block(out, "dec" + std::to_string(i + 1), decoder[i]);
        out.push_back({"head.out.conv.weight", &head.weight, nullptr});
        out.push_back({"head.out.conv.bias", &head.bias, nullptr});
        return out;
    }

    std::vector<Var<T>> parameters() {
        std::vector<Var<T>> out;
        for (auto& e : entries()) {
            if (e.learnable()) out.push_back(*e.var);
        }
        return out;
    }

    // Every layer including the parameter-free ones, in forward order.
    std::vector<LayerInfo> layers() const {
        std::vector<LayerInfo> out;
        auto block_layers = [&](const std::string& stage, const ResNetBlock<T>& b) {
            out.push_back({stage + ".res.bn", "batch_norm"});
            for (const char* conv : {"conv1", "conv2"}) {
                if (b.spec.separable) {
                    out.push_back({stage + ".res." + conv + "_dw", "depthwise"});
                    out.push_back({stage + ".res." + conv + "_pw", "pointwise"});
                } else {
                    out.push_back({stage + ".res." + conv, "conv2d"});
                }
            }
            if (b.projection) out.push_back({stage + ".res.proj", "conv2d"});
        };
        for (std::size_t i = 0; i < 4; ++i) {
            block_layers("enc" + std::to_string(i + 1), encoder[i]);
            out.push_back({"enc" + std::to_string(i + 1) + ".pool.max", "max_pool"});
        }
        block_layers("mid", bottleneck);
        for (std::size_t i = 0; i < 4; ++i) {
            const std::string stage = "dec" + std::to_string(i + 1);
            if (spec.upsample_plan[i] == Upsample::bilinear) {
                out.push_back({stage + ".up.bilinear", "bilinear"});
            } else {
                out.push_back({stage + ".up.pixel_shuffle", "pixel_shuffle"});
            }
            block_layers(stage, decoder[i]);
        }
        out.push_back({"head.out.conv", "conv2d"});
        return out;
    }

    void zero_grad() {
        for (auto& p : parameters()) p.zero_grad();
    }

    ModelParams clone() {
        ModelParams copy = skeleton(spec);
        auto src = entries();
        auto dst = copy.entries();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i].tensor() = src[i].tensor();
        return copy;
    }

    // Zero-initialized model with the right structure.
    static ModelParams skeleton(const ModelSpec& spec) {
        Rng rng(0);
        ModelParams m = build(spec, rng);
        for (auto& e : m.entries()) {
            if (e.learnable()) e.tensor().fill(T{0});
        }
        return m;
    }

    static ModelParams build(const ModelSpec& spec, Rng& rng) {
        spec.validate();
        ModelParams m;
        m.spec = spec;
        const auto enc = spec.encoder_blocks();
        const auto dec = spec.decoder_blocks();
        for (std::size_t i = 0; i < 4; ++i) m.encoder[i] = make_resnet_block<T>(enc[i], rng);
        m.bottleneck = make_resnet_block<T>(spec.bottleneck_block(), rng);
        for (std::size_t i = 0; i < 4; ++i) m.decoder[i] = make_resnet_block<T>(dec[i], rng);
        m.head = make_conv2d<T>(spec.base_depth, spec.num_classes, 1, rng);
        return m;
    }

private:
    static void add_conv(std::vector<ParamEntry<T>>& out, const std::string& prefix, ConvLayer<T>& layer) {
        if (auto* sep = std::get_if<SeparableConv2dParams<T>>(&layer.params)) {
            out.push_back({prefix + "_dw.weight", &sep->depthwise_weight, nullptr});
            out.push_back({prefix + "_dw.bias", &sep->depthwise_bias, nullptr});
            out.push_back({prefix + "_pw.weight", &sep->pointwise_weight, nullptr});
            out.push_back({prefix + "_pw.bias", &sep->pointwise_bias, nullptr});
        } else {
            auto& conv = std::get<Conv2dParams<T>>(layer.params);
            out.push_back({prefix + ".weight", &conv.weight, nullptr});
            out.push_back({prefix + ".bias", &conv.bias, nullptr});
        }
    }

    static void add_block(std::vector<ParamEntry<T>>& out, const std::string& stage, ResNetBlock<T>& b) {
        const std::string p = stage + ".res.";
        out.push_back({p + "bn.gamma", &b.bn.gamma, nullptr});
        out.push_back({p + "bn.beta", &b.bn.beta, nullptr});
        out.push_back({p + "bn.running_mean", nullptr, &b.bn.running_mean});
        out.push_back({p + "bn.running_var", nullptr, &b.bn.running_var});
        add_conv(out, p + "conv1", b.conv1);
        add_conv(out, p + "conv2", b.conv2);
        if (b.projection) {
            out.push_back({p + "proj.weight", &b.projection->weight, nullptr});
            out.push_back({p + "proj.bias", &b.projection->bias, nullptr});
        }
    }
};

template <typename T>
ModelParams<T> build_model(const ModelSpec& spec, Rng& rng) {
    return ModelParams<T>::build(spec, rng);
}

// Feature-map shapes recorded during a forward pass.
struct ForwardTrace {
    std::array<Shape, 4> encoder;
    Shape bottleneck;
    std::array<Shape, 4> decoder;
};

// Per-pixel class probabilities [N, C, H, W]. H and W must be divisible by 16.
// dropout_rng is required in train mode when the spec's dropout is nonzero.
template <typename T>
Var<T> forward(ModelParams<T>& m, const Var<T>& x, Mode mode, Rng* dropout_rng = nullptr,
               ForwardTrace* trace = nullptr) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != m.spec.input_channels) {
        throw ShapeError("model input must be [N, " + std::to_string(m.spec.input_channels) + ", H, W], got " +
                         to_string(s));
    }
    if (s[2] % 16 != 0 || s[3] % 16 != 0 || s[2] == 0 || s[3] == 0) {
        throw ShapeError("model input height and width must be divisible by 16 (four 2x poolings), got " +
                         std::to_string(s[2]) + "x" + std::to_string(s[3]));
    }
    const double rate = m.spec.dropout;
    std::array<Var<T>, 4> skips;
    Var<T> h = x;
    for (std::size_t i = 0; i < 4; ++i) {
        h = resnet_block_forward(m.encoder[i], h, mode, rate, dropout_rng);
        if (trace) trace->encoder[i] = h.shape();
        skips[i] = h;
        h = max_pool_2x2(h);
    }
    h = resnet_block_forward(m.bottleneck, h, mode, rate, dropout_rng);
    if (trace) trace->bottleneck = h.shape();
    for (std::size_t i = 0; i < 4; ++i) {
        h = m.spec.upsample_plan[i] == Upsample::bilinear ? bilinear_upsample_2x(h) : pixel_shuffle(h, 2);
        h = concat_channels(h, skips[3 - i]);
        h = resnet_block_forward(m.decoder[i], h, mode, rate, dropout_rng);
        if (trace) trace->decoder[i] = h.shape();
    }
    return softmax_channels(conv2d(h, m.head));
}

// ---------------------------------------------------------------------------
// Parameter accounting

struct ParameterRow {
    std::string name;
    std::string kind;
    Shape shape;  // empty for parameter-free layers
    std::size_t count = 0;
};

struct ParameterTable {
    std::vector<ParameterRow> rows;
    std::size_t total = 0;

    std::size_t count_of(const std::string& prefix) const {
        std::size_t n = 0;
        for (const auto& r : rows) {
            if (r.name.rfind(prefix, 0) == 0) n += r.count;
        }
        return n;
    }
};

// One row per learnable tensor, plus a zero row for every parameter-free
// layer (pooling, upsampling). Buffers are not learnable and are not counted.
template <typename T>
ParameterTable count_parameters(ModelParams<T>& m) {
    ParameterTable table;
    auto entries = m.entries();
    for (const auto& layer : m.layers()) {
        bool any = false;
        for (const auto& e : entries) {
            if (!e.learnable() || e.name.rfind(layer.name + ".", 0) != 0) continue;
            any = true;
            const std::size_t n = e.tensor().size();
            table.rows.push_back({e.name, layer.kind, e.tensor().shape(), n});
            table.total += n;
        }
        if (!any) table.rows.push_back({layer.name, layer.kind, {}, 0});
    }
    return table;
}

inline std::string shape_cell(const Shape& s) { return s.empty() ? "-" : to_string(s); }

inline void write_table_text(std::ostream& os, const ParameterTable& t) {
    std::size_t name_w = 4, kind_w = 4, shape_w = 5;
    for (const auto& r : t.rows) {
        name_w = std::max(name_w, r.name.size());
        kind_w = std::max(kind_w, r.kind.size());
        shape_w = std::max(shape_w, shape_cell(r.shape).size());
    }
    os << std::left << std::setw(static_cast<int>(name_w)) << "name" << "  " << std::setw(static_cast<int>(kind_w))
       << "kind" << "  " << std::setw(static_cast<int>(shape_w)) << "shape" << "  " << std::right << std::setw(12)
       << "count" << '\n';
    for (const auto& r : t.rows) {
        os << std::left << std::setw(static_cast<int>(name_w)) << r.name << "  " << std::setw(static_cast<int>(kind_w))
           << r.kind << "  " << std::setw(static_cast<int>(shape_w)) << shape_cell(r.shape) << "  " << std::right
           << std::setw(12) << r.count << '\n';
    }
    os << std::left << std::setw(static_cast<int>(name_w + kind_w + shape_w + 4)) << "total" << "  " << std::right
       << std::setw(12) << t.total << '\n';
}

// name,shape,count rows; shapes use 'x' separators so no field needs quoting.
inline void write_table_csv(std::ostream& os, const ParameterTable& t) {
    os << "name,shape,count\n";
    for (const auto& r : t.rows) {
        std::string shape;
        for (std::size_t i = 0; i < r.shape.size(); ++i) shape += (i ? "x" : "") + std::to_string(r.shape[i]);
        os << r.name << ',' << shape << ',' << r.count << '\n';
    }
    os << "total,," << t.total << '\n';
}

}  // namespace lseg
