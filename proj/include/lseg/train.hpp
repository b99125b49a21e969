#pragma once

// Training engine: k-fold splitting, the training loop, validation and
// best-checkpoint selection.
//
// Every random decision is drawn from a named substream of the run seed and
// the iteration number, so a run is a pure function of (spec, config, data).

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lseg/checkpoint.hpp"
#include "lseg/evaluate.hpp"
#include "lseg/optim.hpp"

namespace lseg {

struct TrainConfig {
    std::size_t iterations = 100000;
    std::size_t batch_size = 16;
    double lr = 0.001;
    double dropout = 0.05;
    std::size_t folds = 4;  // validation fraction is 1 / folds
    std::size_t fold_index = 0;
    std::uint64_t seed = 0;
    std::size_t eval_every = 500;
    bool augment = true;
    AugmentSpec augment_spec;
    double clip_norm = 5.0;
    std::optional<ClassWeights> class_weights;  // default: inverse frequency over the training split
    std::filesystem::path log_path;              // rows appended as produced, if set
    std::filesystem::path timing_path;           // wall-time rows, if set
    std::filesystem::path best_checkpoint_path;  // persisted on every improvement, if set

    double val_fraction() const { return 1.0 / static_cast<double>(folds); }

    void validate() const {
        if (batch_size < 1) throw ConfigError("batch size must be at least 1");
        if (folds < 2) throw ConfigError("folds must be at least 2");
        if (fold_index >= folds) {
            throw ConfigError("fold index " + std::to_string(fold_index) + " out of range for " +
                              std::to_string(folds) + " folds");
        }
        if (eval_every < 1) throw ConfigError("eval-every must be at least 1");
        if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and non-negative");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
        if (!(clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
    }
};

struct RunRecord {
    std::size_t iteration = 0;  // 1-based
    double loss = 0.0;
    double train_dice = 0.0;  // batch dice of the train-mode forward, before the update
    std::optional<double> val_dice;
    std::optional<double> val_paper_score;
    double wall_time = 0.0;  // seconds since the start of training
};

// The deterministic columns; wall time lives in a separate file so logs of
// identical runs are byte-identical.
inline void write_log_header(std::ostream& os) { os << "iteration,loss,train_dice,val_dice,val_paper_score\n"; }

inline void write_log_row(std::ostream& os, const RunRecord& r) {
    auto opt = [](const std::optional<double>& v) {
        if (!v) return std::string();
        std::ostringstream s;
        s << std::setprecision(17) << *v;
        return s.str();
    };
    std::ostringstream s;
    s << std::setprecision(17) << r.iteration << ',' << r.loss << ',' << r.train_dice << ',' << opt(r.val_dice) << ','
      << opt(r.val_paper_score) << '\n';
    os << s.str();
}

inline void write_log(std::ostream& os, const std::vector<RunRecord>& log) {
    write_log_header(os);
    for (const auto& r : log) write_log_row(os, r);
}

// ---------------------------------------------------------------------------
// k-fold split at volume granularity

struct Split {
    std::vector<std::string> train_volumes, validation_volumes;
    std::vector<SliceSample> train, validation;
};

// Distinct volume ids in sorted order, shuffled by the seed, cut into folds
// contiguous chunks; chunk fold_index is the validation set.
inline std::vector<std::vector<std::string>> kfold_volumes(std::vector<std::string> ids, std::size_t folds,
                                                           std::uint64_t seed) {
    if (folds < 2) throw ConfigError("folds must be at least 2");
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    if (ids.size() < folds) {
        throw DataError("cannot split " + std::to_string(ids.size()) + " volumes into " + std::to_string(folds) +
                        " folds");
    }
    Rng rng(seed, Stream::split);
    for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
    std::vector<std::vector<std::string>> out(folds);
    for (std::size_t f = 0; f < folds; ++f) {
        const std::size_t lo = f * ids.size() / folds, hi = (f + 1) * ids.size() / folds;
        out[f].assign(ids.begin() + static_cast<std::ptrdiff_t>(lo), ids.begin() + static_cast<std::ptrdiff_t>(hi));
        std::sort(out[f].begin(), out[f].end());
    }
    return out;
}

inline Split kfold_split(const std::vector<SliceSample>& dataset, std::size_t folds, std::size_t fold_index,
                         std::uint64_t seed) {
    if (fold_index >= folds) {
        throw ConfigError("fold index " + std::to_string(fold_index) + " out of range for " + std::to_string(folds) +
                          " folds");
    }
    std::vector<std::string> ids;
    for (const auto& s : dataset) ids.push_back(s.volume_id);
    const auto chunks = kfold_volumes(std::move(ids), folds, seed);
    Split split;
    split.validation_volumes = chunks[fold_index];
    for (std::size_t f = 0; f < folds; ++f) {
        if (f != fold_index) split.train_volumes.insert(split.train_volumes.end(), chunks[f].begin(), chunks[f].end());
    }
    std::sort(split.train_volumes.begin(), split.train_volumes.end());
    const std::set<std::string> val(split.validation_volumes.begin(), split.validation_volumes.end());
    for (const auto& s : dataset) (val.count(s.volume_id) ? split.validation : split.train).push_back(s);
    return split;
}

// ---------------------------------------------------------------------------
// Training

inline ClassWeights class_weights_for(const std::vector<SliceSample>& samples, std::size_t classes) {
    std::vector<std::uint64_t> counts(classes, 0);
    for (const auto& s : samples) {
        for (auto v : s.mask.data()) ++counts[std::min<std::size_t>(v, classes - 1)];
    }
    return inverse_frequency_weights(counts);
}

// Uniform draws with replacement; if no drawn slice carries a lesion and
// lesion slices exist, slot 0 is redrawn from the lesion slices.
inline std::vector<std::size_t> draw_batch(const std::vector<SliceSample>& samples,
                                           const std::vector<std::size_t>& lesion_indices, std::size_t batch,
                                           Rng& rng) {
    std::vector<std::size_t> idx(batch);
    bool any = false;
    for (auto& i : idx) {
        i = rng.below(samples.size());
        any = any || samples[i].has_lesion;
    }
    if (!any && !lesion_indices.empty()) idx[0] = lesion_indices[rng.below(lesion_indices.size())];
    return idx;
}

inline std::string batch_provenance(const std::vector<SliceSample>& samples, const std::vector<std::size_t>& idx) {
    std::string out;
    for (std::size_t i : idx) {
        if (!out.empty()) out += ", ";
        out += samples[i].volume_id + "#" + std::to_string(samples[i].slice_index);
    }
    return out;
}

struct TrainResult {
    ModelParams<float> best;
    ModelParams<float> final_model;
    std::vector<RunRecord> log;
    ClassWeights weights;
    std::optional<double> best_val_dice;
    std::size_t best_iteration = 0;
};

namespace train_detail {

// Batch tensors for the given sample indices, augmented when requested.
inline std::pair<Tensor<float>, Mask> assemble(const std::vector<SliceSample>& samples,
                                               const std::vector<std::size_t>& idx, const TrainConfig& cfg,
                                               const Rng& augment_rng) {
    std::vector<SliceSample> batch;
    batch.reserve(idx.size());
    for (std::size_t slot = 0; slot < idx.size(); ++slot) {
        const SliceSample& src = samples[idx[slot]];
        SliceSample s;
        if (cfg.augment) {
            Rng r = augment_rng.substream(slot);
            auto [img, mask] = augment(src.plane(), src.mask, cfg.augment_spec, r);
            s.image = img.reshaped({1, img.dim(0), img.dim(1)});
            s.mask = std::move(mask);
        } else {
            s.image = src.image;
            s.mask = src.mask;
        }
        batch.push_back(std::move(s));
    }
    std::vector<const SliceSample*> ptrs;
    for (const auto& s : batch) ptrs.push_back(&s);
    return {stack_images<float>(ptrs), stack_labels(ptrs)};
}

inline double batch_dice(const Tensor<float>& probs, const Mask& labels, std::size_t lesion) {
    return dice_standard(probs_to_mask(probs, lesion), binary_truth(labels, lesion));
}

struct StepResult {
    double loss;
    double dice;
};

// Forward in train mode, loss, backward, clip, Adam. Throws NumericError on a
// non-finite loss (naming the iteration and provenance given).
inline StepResult step(ModelParams<float>& model, std::vector<Var<float>>& params, AdamState<float>& adam,
                       const std::vector<std::string>& names, const Tensor<float>& images, const Mask& labels,
                       const ClassWeights& weights, double clip_norm, Rng& dropout_rng, std::size_t iteration,
                       const std::string& provenance) {
    model.zero_grad();
    const Var<float> probs = forward(model, Var<float>(images), Mode::train, &dropout_rng);
    const Var<float> loss = weighted_cross_entropy(probs, labels, weights);
    const double lv = loss.value()[0];
    if (!std::isfinite(lv)) {
        throw NumericError("non-finite loss at iteration " + std::to_string(iteration) + " (batch: " + provenance +
                           ")");
    }
    const double dice = batch_dice(probs.value(), labels, model.spec.num_classes - 1);
    backward(loss);
    clip_grad_norm(params, clip_norm);
    adam_step(params, adam, &names);
    return {lv, dice};
}

inline std::vector<std::string> learnable_names(ModelParams<float>& model) {
    std::vector<std::string> names;
    for (const auto& e : model.entries()) {
        if (e.learnable()) names.push_back(e.name);
    }
    return names;
}

}  // namespace train_detail

// Trains from a fresh initialization (init substream of the seed) on
// train_set; validates on val_set every eval_every iterations and after the
// last one. best is the model at the first iteration reaching the maximum
// validation dice (the final model when val_set is empty).
inline TrainResult train(const ModelSpec& model_spec, const TrainConfig& cfg, const std::vector<SliceSample>& train_set,
                         const std::vector<SliceSample>& val_set) {
    cfg.validate();
    if (train_set.empty()) throw DataError("training set is empty");
    ModelSpec spec = model_spec;
    spec.dropout = cfg.dropout;
    spec.validate();

    Rng init(cfg.seed, Stream::init);
    TrainResult result{ModelParams<float>::build(spec, init), {}, {}, {}, std::nullopt, 0};
    ModelParams<float>& model = result.best;  // trained in place, moved to final_model at the end
    ModelParams<float> best;
    bool have_best = false;

    result.weights = cfg.class_weights ? *cfg.class_weights : class_weights_for(train_set, spec.num_classes);
    std::vector<std::size_t> lesion_indices;
    for (std::size_t i = 0; i < train_set.size(); ++i) {
        if (train_set[i].has_lesion) lesion_indices.push_back(i);
    }

    std::ofstream log_file, timing_file;
    if (!cfg.log_path.empty()) {
        log_file.open(cfg.log_path, std::ios::trunc);
        if (!log_file) throw DataError("cannot write log '" + cfg.log_path.string() + "'");
        write_log_header(log_file);
    }
    if (!cfg.timing_path.empty()) {
        timing_file.open(cfg.timing_path, std::ios::trunc);
        if (!timing_file) throw DataError("cannot write timing log '" + cfg.timing_path.string() + "'");
        timing_file << "iteration,wall_time\n";
    }

    auto params = model.parameters();
    const auto names = train_detail::learnable_names(model);
    AdamState<float> adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
    const Rng batch_base(cfg.seed, Stream::batch), augment_base(cfg.seed, Stream::augment),
        dropout_base(cfg.seed, Stream::dropout);
    const auto start = std::chrono::steady_clock::now();

    for (std::size_t it = 1; it <= cfg.iterations; ++it) {
        Rng batch_rng = batch_base.substream(it);
        const auto idx = draw_batch(train_set, lesion_indices, cfg.batch_size, batch_rng);
        auto [images, labels] = train_detail::assemble(train_set, idx, cfg, augment_base.substream(it));
        Rng dropout_rng = dropout_base.substream(it);
        const auto sr = train_detail::step(model, params, adam, names, images, labels, result.weights, cfg.clip_norm,
                                           dropout_rng, it, batch_provenance(train_set, idx));
        RunRecord rec;
        rec.iteration = it;
        rec.loss = sr.loss;
        rec.train_dice = sr.dice;
        if (!val_set.empty() && (it % cfg.eval_every == 0 || it == cfg.iterations)) {
            const EvalReport report = evaluate(model, val_set);
            rec.val_dice = report.global_dice();
            rec.val_paper_score = report.global_paper_score();
            if (!have_best || *rec.val_dice > *result.best_val_dice) {
                best = model.clone();
                have_best = true;
                result.best_val_dice = rec.val_dice;
                result.best_iteration = it;
                if (!cfg.best_checkpoint_path.empty()) save_checkpoint(to_checkpoint(best), cfg.best_checkpoint_path);
            }
        }
        rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (log_file.is_open()) {
            write_log_row(log_file, rec);
            log_file.flush();
        }
        if (timing_file.is_open()) timing_file << it << ',' << std::setprecision(6) << rec.wall_time << '\n';
        result.log.push_back(rec);
    }

    result.final_model = std::move(model);
    if (have_best) {
        result.best = std::move(best);
    } else {
        result.best = result.final_model.clone();
        result.best_iteration = cfg.iterations;
        if (!cfg.best_checkpoint_path.empty()) save_checkpoint(to_checkpoint(result.best), cfg.best_checkpoint_path);
    }
    return result;
}

// Splits by cfg.folds / cfg.fold_index, then trains.
inline TrainResult train(const ModelSpec& spec, const TrainConfig& cfg, const std::vector<SliceSample>& dataset) {
    cfg.validate();
    if (dataset.empty()) throw DataError("dataset is empty");
    const Split split = kfold_split(dataset, cfg.folds, cfg.fold_index, cfg.seed);
    return train(spec, cfg, split.train, split.validation);
}

// Repeated steps on one fixed, unaugmented batch with a fixed dropout mask;
// returns the loss before each step. Used for the descent smoke property.
inline std::vector<double> fixed_batch_losses(ModelParams<float>& model, const std::vector<SliceSample>& batch,
                                              const TrainConfig& cfg, std::size_t steps,
                                              const std::optional<ClassWeights>& weights = std::nullopt) {
    if (batch.empty()) throw DataError("fixed batch is empty");
    std::vector<const SliceSample*> ptrs;
    for (const auto& s : batch) ptrs.push_back(&s);
    const Tensor<float> images = stack_images<float>(ptrs);
    const Mask labels = stack_labels(ptrs);
    const ClassWeights w = weights ? *weights : class_weights_for(batch, model.spec.num_classes);
    auto params = model.parameters();
    const auto names = train_detail::learnable_names(model);
    AdamState<float> adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
    const Rng dropout_base(cfg.seed, Stream::dropout);
    std::vector<std::size_t> idx(batch.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::string provenance = batch_provenance(batch, idx);
    std::vector<double> losses;
    for (std::size_t i = 1; i <= steps; ++i) {
        Rng dropout_rng = dropout_base;
        losses.push_back(train_detail::step(model, params, adam, names, images, labels, w, cfg.clip_norm, dropout_rng,
                                            i, provenance)
                             .loss);
    }
    return losses;
}

}  // namespace lseg
