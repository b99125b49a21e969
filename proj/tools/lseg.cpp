// lseg: train, infer, evaluate, audit parameters, check gradients and
// preprocess volumes.
//
// Exit codes: 0 ok, 1 configuration, 2 data, 3 numeric abort,
// 4 checkpoint/spec mismatch, 5 gradient check failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lseg/lseg.hpp"

namespace fs = std::filesystem;
using namespace lseg;

namespace {

enum Exit : int { kOk = 0, kConfig = 1, kData = 2, kNumeric = 3, kMismatch = 4, kGradcheck = 5 };

struct GradcheckFailed : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Shared plumbing

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::string text;
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config '" + path + "'");
        std::ostringstream os;
        os << in.rdbuf();
        text = os.str();
    }
    // --set key=value lines are appended, so they may not repeat a file key.
    for (const auto& kv : overrides) text += "\n" + kv;
    return parse_run_config(text, path.empty() ? "<defaults>" : path);
}

struct PhantomSource {
    std::size_t count, size;
};

std::optional<PhantomSource> parse_phantom_source(const std::string& s) {
    static const std::regex re(R"(phantoms:(\d+)x(\d+))");
    std::smatch m;
    if (!std::regex_match(s, m, re)) {
        if (s.rfind("phantoms:", 0) == 0) throw ConfigError("bad phantom source '" + s + "' (expected phantoms:NxS)");
        return std::nullopt;
    }
    PhantomSource p{std::stoul(m[1]), std::stoul(m[2])};
    if (p.count == 0) throw ConfigError("phantom count must be positive");
    return p;
}

// A volume directory, or phantoms:NxS (N single-slice phantom volumes of
// S x S drawn from the config seed).
std::vector<SliceSample> load_dataset(const std::string& source, const RunConfig& cfg) {
    if (auto p = parse_phantom_source(source)) return generate_phantom(Rng(cfg.seed), p->size, p->count);
    return build_slice_dataset(load_volume_dir(source), cfg.dataset_options());
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw DataError("cannot create directory '" + dir.string() + "'");
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out || !(out << text)) throw DataError("cannot write '" + path.string() + "'");
}

std::string slice_file(std::size_t z) {
    std::ostringstream os;
    os << "slice-" << std::setw(4) << std::setfill('0') << z << ".pgm";
    return os.str();
}

// "volume-7.nii" -> "7"; otherwise the file stem.
std::string volume_id_of(const fs::path& p) {
    std::string stem = p.stem().string();
    return stem.rfind("volume-", 0) == 0 ? stem.substr(7) : stem;
}

ModelParams<float> load_checked_model(const RunConfig& cfg, const std::string& checkpoint) {
    return load_model<float>(cfg.model_spec(), load_checkpoint(checkpoint));
}

// ---------------------------------------------------------------------------
// Commands

struct TrainArgs {
    std::string config, data, out;
    std::vector<std::string> set;
};

int cmd_train(const TrainArgs& a) {
    const RunConfig cfg = resolve_config(a.config, a.set);
    const auto dataset = load_dataset(a.data, cfg);
    if (dataset.empty()) throw DataError("no slices in '" + a.data + "'");
    const fs::path out = a.out;
    ensure_dir(out);
    write_text(out / "config.txt", to_text(cfg));

    TrainConfig tc = cfg.train_config();
    tc.log_path = out / "log.csv";
    tc.timing_path = out / "timing.csv";
    tc.best_checkpoint_path = out / "best.ckpt";
    const Split split = kfold_split(dataset, tc.folds, tc.fold_index, tc.seed);
    {
        std::ostringstream os;
        os << "set,volume-id\n";
        for (const auto& id : split.train_volumes) os << "train," << id << '\n';
        for (const auto& id : split.validation_volumes) os << "validation," << id << '\n';
        write_text(out / "split.csv", os.str());
    }
    TrainResult r = train(cfg.model_spec(), tc, split.train, split.validation);
    save_checkpoint(to_checkpoint(r.final_model), out / "final.ckpt");

    std::cout << "trained " << tc.iterations << " iterations on " << split.train.size() << " slices ("
              << split.train_volumes.size() << " volumes); validation " << split.validation.size() << " slices ("
              << split.validation_volumes.size() << " volumes)\n";
    std::cout << "class weights:";
    for (double w : r.weights.w) std::cout << ' ' << w;
    std::cout << '\n';
    if (r.best_val_dice) {
        std::cout << "best validation dice " << format_score(*r.best_val_dice) << " at iteration " << r.best_iteration
                  << '\n';
    }
    std::cout << "wrote best.ckpt, final.ckpt, log.csv, timing.csv, split.csv and config.txt to " << out.string()
              << '\n';
    return kOk;
}

struct InferArgs {
    std::string checkpoint, input, out, config;
};

int cmd_infer(const InferArgs& a) {
    std::string config = a.config;
    if (config.empty()) {
        const fs::path sibling = fs::path(a.checkpoint).parent_path() / "config.txt";
        if (fs::exists(sibling)) config = sibling.string();
    }
    const RunConfig cfg = resolve_config(config, {});
    ModelParams<float> model = load_checked_model(cfg, a.checkpoint);
    const Volume vol = read_nifti(a.input);
    const fs::path out = a.out;
    ensure_dir(out);

    const DatasetOptions opt = cfg.dataset_options();
    const std::string id = volume_id_of(a.input);
    std::vector<SliceSample> samples;
    for (std::size_t z = 0; z < vol.slices(); ++z) {
        SliceSample s;
        s.image = preprocess_slice(vol.slice(z), opt).reshaped({1, opt.resize, opt.resize});
        s.mask = Mask({opt.resize, opt.resize});
        s.volume_id = id;
        s.slice_index = z;
        samples.push_back(std::move(s));
    }
    const auto masks = predict_masks(model, samples);
    std::ostringstream summary;
    summary << "slice,lesion_pixels\n";
    std::size_t total = 0, lesion_slices = 0;
    for (std::size_t z = 0; z < masks.size(); ++z) {
        write_pgm(out / slice_file(z), masks[z]);
        std::size_t n = 0;
        for (auto v : masks[z].data()) n += v;
        summary << z << ',' << n << '\n';
        total += n;
        lesion_slices += n > 0;
    }
    write_text(out / "summary.csv", summary.str());
    const double voxels = static_cast<double>(masks.size() * opt.resize * opt.resize);
    std::cout << "volume " << id << ": " << masks.size() << " slices of " << opt.resize << "x" << opt.resize << ", "
              << lesion_slices << " with lesion, " << total << " lesion pixels ("
              << format_score(voxels > 0 ? static_cast<double>(total) / voxels : 0.0) << " of the volume)\n";
    return kOk;
}

struct EvalArgs {
    std::string checkpoint, predictions, data, config;
    bool csv = false;
};

int cmd_eval(const EvalArgs& a) {
    std::string config = a.config;
    if (config.empty() && !a.checkpoint.empty()) {
        const fs::path sibling = fs::path(a.checkpoint).parent_path() / "config.txt";
        if (fs::exists(sibling)) config = sibling.string();
    }
    const RunConfig cfg = resolve_config(config, {});
    const auto dataset = load_dataset(a.data, cfg);
    EvalReport report;
    if (!a.checkpoint.empty()) {
        ModelParams<float> model = load_checked_model(cfg, a.checkpoint);
        report = evaluate(model, dataset);
    } else {
        // <predictions>/<volume-id>/slice-NNNN.pgm, as written by infer.
        std::vector<Mask> preds;
        for (const auto& s : dataset) {
            Mask m = read_pgm(fs::path(a.predictions) / s.volume_id / slice_file(s.slice_index));
            if (m.shape() != s.mask.shape()) {
                throw DataError("prediction for " + s.volume_id + " slice " + std::to_string(s.slice_index) +
                                " is " + to_string(m.shape()) + ", expected " + to_string(s.mask.shape()));
            }
            preds.push_back(std::move(m));
        }
        report = evaluate_masks(dataset, preds, cfg.num_classes - 1);
    }
    if (a.csv) {
        write_report_csv(std::cout, report);
    } else {
        write_report_text(std::cout, report);
    }
    return kOk;
}

struct ParamsArgs {
    std::string variant = "proposed";
    std::size_t base_depth = 64, kernel = 3, num_classes = 2;
    bool compare = false, csv = false;
};

ParameterTable table_for(Variant v, const ParamsArgs& a) {
    ModelSpec spec = ModelSpec::of(v, a.base_depth);
    spec.kernel = a.kernel;
    spec.num_classes = a.num_classes;
    try {
        // Counting only; the skeleton's values are irrelevant.
        ModelParams<float> m = ModelParams<float>::skeleton(spec);
        return count_parameters(m);
    } catch (const ShapeError& e) {
        throw ConfigError(e.what());
    }
}

int cmd_params(const ParamsArgs& a) {
    if (a.compare) {
        const ParameterTable base = table_for(Variant::baseline_unet, a), prop = table_for(Variant::proposed, a);
        if (a.csv) {
            std::cout << "variant,total\nbaseline-unet," << base.total << "\nproposed," << prop.total << '\n';
            std::cout << "ratio," << config_detail::format_double(static_cast<double>(base.total) / prop.total)
                      << '\n';
        } else {
            std::cout << "base depth " << a.base_depth << ", kernel " << a.kernel << ", " << a.num_classes
                      << " classes\n";
            std::cout << "baseline-unet total  " << base.total << '\n';
            std::cout << "proposed total       " << prop.total << '\n';
            std::cout << "ratio (baseline / proposed)  " << std::fixed << std::setprecision(2)
                      << static_cast<double>(base.total) / static_cast<double>(prop.total) << '\n';
        }
        return kOk;
    }
    Variant v;
    try {
        v = parse_variant(a.variant);
    } catch (const Error&) {
        throw ConfigError("unknown variant '" + a.variant + "' (expected proposed or baseline-unet)");
    }
    const ParameterTable t = table_for(v, a);
    if (a.csv) {
        write_table_csv(std::cout, t);
    } else {
        write_table_text(std::cout, t);
    }
    return kOk;
}

struct GradcheckArgs {
    std::string scope = "layers";
    std::size_t instances = 0;  // 0: 5 for layers/block, 1 for model
    std::uint64_t seed = 0;
    bool inject_fault = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
    const GradScope scope = parse_grad_scope(a.scope);
    const std::size_t instances = a.instances ? a.instances : (scope == GradScope::model ? 1 : 5);
    const auto outcomes = run_gradcheck(gradcheck_cases(scope, a.inject_fault), instances, 1e-4, a.seed);
    std::vector<std::string> failed;
    for (const auto& o : outcomes) {
        std::cout << std::left << std::setw(32) << o.name << " max_rel_error " << std::scientific
                  << std::setprecision(3) << o.max_error << "  " << (o.pass ? "PASS" : "FAIL") << '\n'
                  << std::defaultfloat;
        if (!o.pass) failed.push_back(o.name);
    }
    if (!failed.empty()) {
        std::string names;
        for (const auto& n : failed) names += (names.empty() ? "" : ", ") + n;
        throw GradcheckFailed("gradient check failed (tolerance 1e-4): " + names);
    }
    return kOk;
}

struct PreprocessArgs {
    std::string input, mask, out, config;
};

int cmd_preprocess(const PreprocessArgs& a) {
    const RunConfig cfg = resolve_config(a.config, {});
    const DatasetOptions opt = cfg.dataset_options();
    const Volume vol = read_nifti(a.input);
    std::optional<Volume> seg;
    if (!a.mask.empty()) {
        seg = read_nifti(a.mask);
        if (seg->dim_x != vol.dim_x || seg->dim_y != vol.dim_y || seg->dim_z != vol.dim_z) {
            throw DataError("mask '" + a.mask + "' dimensions differ from the volume");
        }
    }
    const fs::path out = a.out;
    ensure_dir(out);
    const std::string id = volume_id_of(a.input);
    std::vector<SliceSample> samples;
    for (std::size_t z = 0; z < vol.slices(); ++z) {
        const Tensor<float> raw = seg ? seg->slice(z) : Tensor<float>({vol.dim_y, vol.dim_x});
        SliceSample s = make_sample(vol.slice(z), raw, opt, id, z);
        write_file_bytes(out / slice_file(z), encode_pgm_gray(s.plane()));
        if (seg) {
            Mask lesion = binary_truth(s.mask, opt.num_classes - 1);
            fs::path mask_name = "mask-" + slice_file(z).substr(6);
            write_pgm(out / mask_name, lesion);
        }
        samples.push_back(std::move(s));
    }
    std::ostringstream manifest;
    write_manifest(manifest, samples);
    write_text(out / "manifest.csv", manifest.str());
    std::cout << "volume " << id << ": " << samples.size() << " slices -> " << opt.resize << "x" << opt.resize
              << " in " << out.string() << '\n';
    return kOk;
}

template <typename F>
int guarded(F&& f) {
    try {
        return f();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const SpecMismatchError& e) {
        std::cerr << "spec mismatch: " << e.what() << '\n';
        return kMismatch;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kNumeric;
    } catch (const GradcheckFailed& e) {
        std::cerr << e.what() << '\n';
        return kGradcheck;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const ShapeError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kConfig;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Lesion segmentation: train, infer, evaluate, audit parameters, check gradients"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "lseg 1.0");

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "train a model; writes checkpoints, log and config snapshot");
    train_cmd->add_option("--config", train_args.config, "run config file (defaults if omitted)");
    train_cmd->add_option("--data", train_args.data, "volume directory or phantoms:NxS")->required();
    train_cmd->add_option("--out", train_args.out, "output directory")->required();
    train_cmd->add_option("--set", train_args.set, "extra config line key=value (repeatable)");

    InferArgs infer_args;
    auto* infer_cmd = app.add_subcommand("infer", "segment a NIfTI volume into per-slice PGM masks");
    infer_cmd->add_option("--checkpoint", infer_args.checkpoint, "checkpoint file")->required();
    infer_cmd->add_option("--input", infer_args.input, "input volume (.nii)")->required();
    infer_cmd->add_option("--out", infer_args.out, "output directory")->required();
    infer_cmd->add_option("--config", infer_args.config, "run config (default: config.txt beside the checkpoint)");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint or stored predictions against a dataset");
    auto* ck_opt = eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "checkpoint file");
    auto* pred_opt =
        eval_cmd->add_option("--predictions", eval_args.predictions, "directory of <volume-id>/slice-NNNN.pgm masks");
    ck_opt->excludes(pred_opt);
    eval_cmd->add_option("--data", eval_args.data, "volume directory or phantoms:NxS")->required();
    eval_cmd->add_option("--config", eval_args.config, "run config (default: config.txt beside the checkpoint)");
    eval_cmd->add_flag("--csv", eval_args.csv, "comma-separated output");

    ParamsArgs params_args;
    auto* params_cmd = app.add_subcommand("params", "per-layer parameter table and totals");
    params_cmd->add_option("--variant", params_args.variant, "proposed or baseline-unet")->capture_default_str();
    params_cmd->add_option("--base-depth", params_args.base_depth, "channels of the first stage")->capture_default_str();
    params_cmd->add_option("--kernel", params_args.kernel, "spatial kernel size")->capture_default_str();
    params_cmd->add_option("--num-classes", params_args.num_classes, "output classes")->capture_default_str();
    params_cmd->add_flag("--compare", params_args.compare, "print both totals and the baseline/proposed ratio");
    params_cmd->add_flag("--csv", params_args.csv, "comma-separated output");

    GradcheckArgs gc_args;
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
    gc_cmd->add_option("scope", gc_args.scope, "layers, block or model")->capture_default_str();
    gc_cmd->add_option("--instances", gc_args.instances, "random instances per case (default 5; model 1)");
    gc_cmd->add_option("--seed", gc_args.seed, "instance seed")->capture_default_str();
    gc_cmd->add_flag("--inject-fault", gc_args.inject_fault, "add a relu with a corrupted backward rule");

    PreprocessArgs pre_args;
    auto* pre_cmd = app.add_subcommand("preprocess", "window, equalize and resize a volume into PGM slices");
    pre_cmd->add_option("--input", pre_args.input, "input volume (.nii)")->required();
    pre_cmd->add_option("--mask", pre_args.mask, "segmentation volume (.nii)");
    pre_cmd->add_option("--out", pre_args.out, "output directory")->required();
    pre_cmd->add_option("--config", pre_args.config, "run config (defaults if omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    if (*train_cmd) return guarded([&] { return cmd_train(train_args); });
    if (*infer_cmd) return guarded([&] { return cmd_infer(infer_args); });
    if (*eval_cmd) {
        if (eval_args.checkpoint.empty() && eval_args.predictions.empty()) {
            std::cerr << "config error: eval needs --checkpoint or --predictions\n";
            return kConfig;
        }
        return guarded([&] { return cmd_eval(eval_args); });
    }
    if (*params_cmd) return guarded([&] { return cmd_params(params_args); });
    if (*gc_cmd) return guarded([&] { return cmd_gradcheck(gc_args); });
    if (*pre_cmd) return guarded([&] { return cmd_preprocess(pre_args); });
    return kConfig;
}
