#pragma once

// Segmentation evaluation: per-volume and aggregate overlap scores.
//
// Per volume, the slice-mean scores average over slices whose truth mask is
// nonempty; slices with empty truth only enter the global-voxel scores, which
// pool every voxel of the volume (or of the whole dataset).

#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lseg/dataset.hpp"
#include "lseg/model.hpp"

namespace lseg {

struct VolumeScore {
    std::string volume_id;
    std::size_t slices = 0;
    std::size_t scored_slices = 0;  // slices with nonempty truth
    double paper_score = std::numeric_limits<double>::quiet_NaN();
    double dice = std::numeric_limits<double>::quiet_NaN();
    double jaccard = std::numeric_limits<double>::quiet_NaN();
    ConfusionCounts voxels;

    double global_paper_score() const { return lseg::paper_score(voxels); }
    double global_dice() const { return dice_standard(voxels); }
    double global_jaccard() const { return lseg::jaccard(voxels); }
};

struct EvalReport {
    std::vector<VolumeScore> volumes;
    // Means over volumes that have at least one scored slice.
    double mean_paper_score = std::numeric_limits<double>::quiet_NaN();
    double mean_dice = std::numeric_limits<double>::quiet_NaN();
    double mean_jaccard = std::numeric_limits<double>::quiet_NaN();
    ConfusionCounts voxels;  // pooled over the dataset

    double global_paper_score() const { return lseg::paper_score(voxels); }
    double global_dice() const { return dice_standard(voxels); }
    double global_jaccard() const { return lseg::jaccard(voxels); }
};

inline Mask binary_truth(const Mask& labels, std::size_t lesion_class) {
    Mask out(labels.shape());
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] == lesion_class ? 1 : 0;
    return out;
}

// preds[i] is the binary prediction for truth[i].
inline EvalReport evaluate_masks(const std::vector<SliceSample>& truth, const std::vector<Mask>& preds,
                                 std::size_t lesion_class) {
    if (truth.size() != preds.size()) throw ShapeError("evaluate: prediction count does not match sample count");
    std::map<std::string, VolumeScore> by_volume;
    std::map<std::string, std::vector<double>[3]> slice_scores;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const Mask t = binary_truth(truth[i].mask, lesion_class);
        const ConfusionCounts c = confusion(preds[i], t);
        auto& v = by_volume[truth[i].volume_id];
        v.volume_id = truth[i].volume_id;
        ++v.slices;
        v.voxels += c;
        if (c.truth_size() > 0) {
            ++v.scored_slices;
            auto& lists = slice_scores[truth[i].volume_id];
            lists[0].push_back(paper_score(c));
            lists[1].push_back(dice_standard(c));
            lists[2].push_back(jaccard(c));
        }
    }
    auto mean = [](const std::vector<double>& xs) {
        double s = 0.0;
        for (double x : xs) s += x;
        return s / static_cast<double>(xs.size());
    };
    EvalReport report;
    double sums[3] = {0, 0, 0};
    std::size_t scored = 0;
    for (auto& [id, v] : by_volume) {
        if (v.scored_slices > 0) {
            const auto& lists = slice_scores[id];
            v.paper_score = mean(lists[0]);
            v.dice = mean(lists[1]);
            v.jaccard = mean(lists[2]);
            sums[0] += v.paper_score;
            sums[1] += v.dice;
            sums[2] += v.jaccard;
            ++scored;
        }
        report.voxels += v.voxels;
        report.volumes.push_back(v);
    }
    if (scored > 0) {
        report.mean_paper_score = sums[0] / static_cast<double>(scored);
        report.mean_dice = sums[1] / static_cast<double>(scored);
        report.mean_jaccard = sums[2] / static_cast<double>(scored);
    }
    return report;
}

// Batches of [B, 1, S, S] images and [B, S, S] labels.
template <typename T>
Tensor<T> stack_images(const std::vector<const SliceSample*>& samples) {
    const auto& s0 = samples.front()->image.shape();
    const std::size_t plane = s0[1] * s0[2];
    Tensor<T> out({samples.size(), 1, s0[1], s0[2]});
    for (std::size_t b = 0; b < samples.size(); ++b) {
        if (samples[b]->image.shape() != s0) throw ShapeError("batch samples have different sizes");
        for (std::size_t i = 0; i < plane; ++i) out[b * plane + i] = static_cast<T>(samples[b]->image[i]);
    }
    return out;
}

inline Mask stack_labels(const std::vector<const SliceSample*>& samples) {
    const auto& s0 = samples.front()->mask.shape();
    const std::size_t plane = s0[0] * s0[1];
    Mask out({samples.size(), s0[0], s0[1]});
    for (std::size_t b = 0; b < samples.size(); ++b) {
        if (samples[b]->mask.shape() != s0) throw ShapeError("batch masks have different sizes");
        std::copy_n(samples[b]->mask.data().begin(), plane, out.data().begin() + static_cast<std::ptrdiff_t>(b * plane));
    }
    return out;
}

// Inference-mode predictions, one [S, S] binary mask per sample.
template <typename T>
std::vector<Mask> predict_masks(ModelParams<T>& model, const std::vector<SliceSample>& samples, std::size_t batch = 8) {
    NoGradGuard no_grad;
    std::vector<Mask> out;
    out.reserve(samples.size());
    const std::size_t lesion = model.spec.num_classes - 1;
    for (std::size_t start = 0; start < samples.size(); start += batch) {
        std::vector<const SliceSample*> chunk;
        for (std::size_t i = start; i < std::min(samples.size(), start + batch); ++i) chunk.push_back(&samples[i]);
        const Var<T> probs = forward(model, Var<T>(stack_images<T>(chunk)), Mode::infer);
        const Mask masks = probs_to_mask(probs.value(), lesion);
        const std::size_t h = masks.dim(1), w = masks.dim(2);
        for (std::size_t b = 0; b < chunk.size(); ++b) {
            std::vector<std::uint8_t> m(masks.data().begin() + static_cast<std::ptrdiff_t>(b * h * w),
                                        masks.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * h * w));
            out.emplace_back(Shape{h, w}, std::move(m));
        }
    }
    return out;
}

template <typename T>
EvalReport evaluate(ModelParams<T>& model, const std::vector<SliceSample>& samples, std::size_t batch = 8) {
    return evaluate_masks(samples, predict_masks(model, samples, batch), model.spec.num_classes - 1);
}

inline std::string format_score(double v) {
    if (std::isnan(v)) return "n/a";
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << v;
    return os.str();
}

inline void write_report_text(std::ostream& os, const EvalReport& r) {
    std::size_t id_w = 9;
    for (const auto& v : r.volumes) id_w = std::max(id_w, v.volume_id.size());
    const int w = static_cast<int>(id_w);
    os << std::left << std::setw(w) << "volume-id" << std::right << std::setw(8) << "slices" << std::setw(13)
       << "paper_score" << std::setw(13) << "dice" << std::setw(13) << "jaccard" << std::setw(13) << "voxel_dice"
       << '\n';
    for (const auto& v : r.volumes) {
        os << std::left << std::setw(w) << v.volume_id << std::right << std::setw(8) << v.slices << std::setw(13)
           << format_score(v.paper_score) << std::setw(13) << format_score(v.dice) << std::setw(13)
           << format_score(v.jaccard) << std::setw(13) << format_score(v.global_dice()) << '\n';
    }
    os << std::left << std::setw(w) << "mean" << std::right << std::setw(8) << "" << std::setw(13)
       << format_score(r.mean_paper_score) << std::setw(13) << format_score(r.mean_dice) << std::setw(13)
       << format_score(r.mean_jaccard) << '\n';
    os << std::left << std::setw(w) << "global" << std::right << std::setw(8) << "" << std::setw(13)
       << format_score(r.global_paper_score()) << std::setw(13) << format_score(r.global_dice()) << std::setw(13)
       << format_score(r.global_jaccard()) << '\n';
}

// volume-id,paper_score,dice,jaccard with trailing mean and global rows.
inline void write_report_csv(std::ostream& os, const EvalReport& r) {
    os << "volume-id,paper_score,dice,jaccard\n";
    for (const auto& v : r.volumes) {
        os << v.volume_id << ',' << format_score(v.paper_score) << ',' << format_score(v.dice) << ','
           << format_score(v.jaccard) << '\n';
    }
    os << "mean," << format_score(r.mean_paper_score) << ',' << format_score(r.mean_dice) << ','
       << format_score(r.mean_jaccard) << '\n';
    os << "global," << format_score(r.global_paper_score()) << ',' << format_score(r.global_dice()) << ','
       << format_score(r.global_jaccard()) << '\n';
}

}  // namespace lseg
