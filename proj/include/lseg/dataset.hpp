#pragma once

// 2-D slice datasets: assembly from CT volumes, synthetic phantoms, and the
// plain-text manifest.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "lseg/nifti.hpp"
#include "lseg/preprocess.hpp"

namespace lseg {

struct SliceSample {
    Tensor<float> image;  // [1, S, S], values in [0, 1]
    Mask mask;            // [S, S], labels in [0, C)
    std::string volume_id;
    std::size_t slice_index = 0;
    bool has_lesion = false;

    Image plane() const { return image.reshaped({image.dim(1), image.dim(2)}); }
};

enum class SliceFilter { all, lesion_neighbors };

struct DatasetOptions {
    WindowSpec window;
    std::size_t resize = 256;
    SliceFilter filter = SliceFilter::all;
    std::size_t neighbors = 2;     // slices kept on each side of a lesion slice
    std::size_t lesion_label = 1;  // binary case: raw labels >= this become lesion
    std::size_t num_classes = 2;
    std::size_t equalize_bins = 256;
};

struct LabeledVolume {
    std::string id;
    Volume image;
    Volume mask;
};

// Raw segmentation value -> training label. Binary: raw >= lesion_label is
// class 1. Multi-class: raw clamped to C - 1.
inline std::uint8_t map_label(float raw, const DatasetOptions& opt) {
    const auto v = static_cast<long>(std::lround(std::max(0.0f, raw)));
    if (opt.num_classes == 2) return v >= static_cast<long>(opt.lesion_label) ? 1 : 0;
    return static_cast<std::uint8_t>(std::min<long>(v, static_cast<long>(opt.num_classes) - 1));
}

// Window, equalize, resize.
inline Image preprocess_slice(const Image& hu, const DatasetOptions& opt) {
    return resize_bilinear(histogram_equalize(window_hu(hu, opt.window), opt.equalize_bins), opt.resize);
}

inline SliceSample make_sample(const Image& hu, const Tensor<float>& raw_mask, const DatasetOptions& opt,
                               const std::string& volume_id, std::size_t slice) {
    SliceSample s;
    Image img = preprocess_slice(hu, opt);
    s.image = img.reshaped({1, opt.resize, opt.resize});
    Mask labels(raw_mask.shape());
    for (std::size_t i = 0; i < raw_mask.size(); ++i) labels[i] = map_label(raw_mask[i], opt);
    s.mask = resize_nearest(labels, opt.resize);
    const auto lesion = static_cast<std::uint8_t>(opt.num_classes - 1);
    s.has_lesion = std::any_of(s.mask.data().begin(), s.mask.data().end(), [lesion](auto v) { return v == lesion; });
    s.volume_id = volume_id;
    s.slice_index = slice;
    return s;
}

// Axial slices of every volume, ordered by (volume id, slice index).
inline std::vector<SliceSample> build_slice_dataset(std::vector<LabeledVolume> volumes, const DatasetOptions& opt) {
    if (opt.resize == 0) throw ConfigError("resize target must be positive");
    if (opt.num_classes < 2) throw ConfigError("at least 2 classes required");
    std::sort(volumes.begin(), volumes.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::vector<SliceSample> out;
    for (const auto& v : volumes) {
        if (v.image.dim_x != v.mask.dim_x || v.image.dim_y != v.mask.dim_y || v.image.dim_z != v.mask.dim_z) {
            throw DataError("volume '" + v.id + "': image and mask dimensions differ");
        }
        const std::size_t z = v.image.slices();
        std::vector<bool> keep(z, opt.filter == SliceFilter::all);
        if (opt.filter == SliceFilter::lesion_neighbors) {
            const auto lesion = static_cast<std::uint8_t>(opt.num_classes - 1);
            for (std::size_t s = 0; s < z; ++s) {
                const auto m = v.mask.slice(s);
                const bool hit = std::any_of(m.data().begin(), m.data().end(),
                                             [&](float raw) { return map_label(raw, opt) == lesion; });
                if (!hit) continue;
                const std::size_t lo = s >= opt.neighbors ? s - opt.neighbors : 0;
                const std::size_t hi = std::min(z - 1, s + opt.neighbors);
                for (std::size_t k = lo; k <= hi; ++k) keep[k] = true;
            }
        }
        for (std::size_t s = 0; s < z; ++s) {
            if (keep[s]) out.push_back(make_sample(v.image.slice(s), v.mask.slice(s), opt, v.id, s));
        }
    }
    return out;
}

// Reads volume-<id>.nii / segmentation-<id>.nii pairs from a directory,
// ordered by id. A volume without its segmentation is a data error.
inline std::vector<LabeledVolume> load_volume_dir(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw DataError("data directory '" + dir.string() + "' does not exist");
    std::map<std::string, fs::path> images;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("volume-", 0) == 0 && entry.path().extension() == ".nii") {
            images[name.substr(7, name.size() - 7 - 4)] = entry.path();
        }
    }
    if (images.empty()) throw DataError("no volume-<id>.nii files in '" + dir.string() + "'");
    std::vector<LabeledVolume> out;
    for (const auto& [id, path] : images) {
        const fs::path mask_path = dir / ("segmentation-" + id + ".nii");
        if (!fs::exists(mask_path)) throw DataError("missing mask volume for volume-id " + id);
        out.push_back({id, read_nifti(path), read_nifti(mask_path)});
    }
    return out;
}

// volume-id,slice-index,has-lesion
inline void write_manifest(std::ostream& os, const std::vector<SliceSample>& samples) {
    os << "volume-id,slice-index,has-lesion\n";
    for (const auto& s : samples) os << s.volume_id << ',' << s.slice_index << ',' << (s.has_lesion ? 1 : 0) << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic phantoms: smooth background plus one rotated ellipse of distinct
// intensity; the mask is the ellipse interior. Semi-axes are drawn from
// [0.10, 0.23] x size, so the ellipse covers roughly 3%-17% of the image, and
// the center keeps it fully inside the frame.

struct PhantomGeometry {
    double cy, cx, ry, rx, angle;
};

inline PhantomGeometry draw_phantom_geometry(Rng& rng, std::size_t size) {
    const double s = static_cast<double>(size);
    PhantomGeometry g{};
    g.ry = rng.uniform(0.10, 0.23) * s;
    g.rx = rng.uniform(0.10, 0.23) * s;
    const double margin = std::max(g.ry, g.rx) + 1.0;
    g.cy = rng.uniform(margin, s - 1.0 - margin);
    g.cx = rng.uniform(margin, s - 1.0 - margin);
    g.angle = rng.uniform(0.0, std::numbers::pi);
    return g;
}

inline SliceSample make_phantom(Rng& rng, std::size_t size, const std::string& id, std::size_t slice = 0) {
    const PhantomGeometry g = draw_phantom_geometry(rng, size);
    const double base = rng.uniform(0.25, 0.40);
    const double gy = rng.uniform(-0.1, 0.1), gx = rng.uniform(-0.1, 0.1);
    const double lesion = rng.uniform(0.75, 0.90);
    const double ca = std::cos(g.angle), sa = std::sin(g.angle);
    const double s = static_cast<double>(size);
    Image img({size, size});
    Mask mask({size, size});
    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
            const double dy = static_cast<double>(y) - g.cy, dx = static_cast<double>(x) - g.cx;
            const double u = (ca * dx + sa * dy) / g.rx;
            const double v = (-sa * dx + ca * dy) / g.ry;
            const bool inside = u * u + v * v <= 1.0;
            double val = base + gy * (static_cast<double>(y) / s - 0.5) + gx * (static_cast<double>(x) / s - 0.5);
            if (inside) val = lesion;
            val += 0.02 * rng.normal();
            img[y * size + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
            mask[y * size + x] = inside ? 1 : 0;
        }
    }
    SliceSample out;
    out.image = histogram_equalize(img).reshaped({1, size, size});
    out.mask = std::move(mask);
    out.volume_id = id;
    out.slice_index = slice;
    out.has_lesion = true;
    return out;
}

inline std::string phantom_id(std::size_t i) {
    std::string digits = std::to_string(i);
    if (digits.size() < 3) digits.insert(0, 3 - digits.size(), '0');
    return "phantom-" + digits;
}

// n phantoms of size x size; sample i depends only on (seed, i).
inline std::vector<SliceSample> generate_phantom(const Rng& rng, std::size_t size, std::size_t n) {
    if (size == 0 || size % 16 != 0) throw ConfigError("phantom size must be a positive multiple of 16");
    std::vector<SliceSample> out;
    out.reserve(n);
    const Rng base = rng.substream(Stream::phantom);
    for (std::size_t i = 0; i < n; ++i) {
        Rng r = base.substream(i);
        out.push_back(make_phantom(r, size, phantom_id(i)));
    }
    return out;
}

// A phantom volume in Hounsfield units (inverse of the default window) with
// its segmentation, for exercising the volume pipeline end to end.
inline LabeledVolume phantom_volume(const Rng& rng, std::size_t size, std::size_t depth, const std::string& id) {
    const WindowSpec w;
    LabeledVolume v;
    v.id = id;
    std::vector<float> hu, lab;
    const Rng base = rng.substream(Stream::phantom).substream(0xF00Du);
    for (std::size_t z = 0; z < depth; ++z) {
        Rng r = base.substream(z);
        auto s = make_phantom(r, size, id, z);
        for (float val : s.image.data()) hu.push_back(static_cast<float>(w.low + (w.high - w.low) * val));
        for (auto m : s.mask.data()) lab.push_back(static_cast<float>(m));
    }
    for (Volume* vol : {&v.image, &v.mask}) {
        vol->dim_x = size;
        vol->dim_y = size;
        vol->dim_z = depth;
    }
    v.image.voxels = Tensor<float>({depth, size, size}, std::move(hu));
    v.image.source_dtype = NiftiDatatype::float32;
    v.mask.voxels = Tensor<float>({depth, size, size}, std::move(lab));
    v.mask.source_dtype = NiftiDatatype::uint8;
    return v;
}

}  // namespace lseg
