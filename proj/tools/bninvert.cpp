// bninvert: generate privacy-preserving synthetic training data by
// matching the BN statistics of a pretrained model, then train fresh
// models on it. Subcommands: make-fixture, pretrain, synthesize, train,
// eval.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "bninvert/checkpoint.hpp"
#include "bninvert/dataset.hpp"
#include "bninvert/pipeline.hpp"
#include "bninvert/synthesis.hpp"

namespace fs = std::filesystem;
using namespace bninvert;

namespace {

// Errors that are the operator's fault (bad flags, bad config, missing
// files) exit with code 2; everything else is an internal error (1).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// run configuration: key=value sections, CLI flags override file values

struct RunConfig {
    // [dataset]
    std::string dataset_path;
    std::string split = "test";
    // [model]
    std::size_t model_width = 16;
    std::uint64_t model_seed = 0;
    // [pretrain] / [train]
    TrainConfig pretrain_cfg;
    TrainConfig train_cfg;
    // [synthesis]
    SynthesisConfig synth;
    std::size_t threads = 0;  // 0 = resolve from env / default 1
    std::size_t sample_export_limit = 8;
    // [output]
    std::string out_dir;
};

std::uint64_t parse_u64(const std::string& key, const std::string& val) {
    try {
        std::size_t pos = 0;
        const auto v = std::stoull(val, &pos);
        if (pos != val.size()) throw std::invalid_argument(val);
        return v;
    } catch (const std::exception&) {
        throw UsageError("config: bad integer for " + key + ": '" + val + "'");
    }
}

double parse_f64(const std::string& key, const std::string& val) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(val, &pos);
        if (pos != val.size()) throw std::invalid_argument(val);
        return v;
    } catch (const std::exception&) {
        throw UsageError("config: bad number for " + key + ": '" + val + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& val) {
    if (val == "1" || val == "true") return true;
    if (val == "0" || val == "false") return false;
    throw UsageError("config: bad boolean for " + key + ": '" + val + "'");
}

void apply_train_key(TrainConfig& t, const std::string& section, const std::string& key,
                     const std::string& val) {
    if (key == "epochs")
        t.epochs = parse_u64(key, val);
    else if (key == "batch_size")
        t.batch_size = parse_u64(key, val);
    else if (key == "lr")
        t.lr = parse_f64(key, val);
    else if (key == "eta_min")
        t.eta_min = parse_f64(key, val);
    else if (key == "seed")
        t.seed = parse_u64(key, val);
    else
        throw UsageError("config: unknown key '" + key + "' in [" + section + "]");
}

void load_run_config(const std::string& path, RunConfig& rc) {
    std::ifstream in(path);
    if (!in) throw UsageError("config: cannot open " + path);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto start = line.find_first_not_of(" \t");
        if (start == std::string::npos) continue;
        const auto end = line.find_last_not_of(" \t\r");
        line = line.substr(start, end - start + 1);
        if (line.empty() || line[0] == '#') continue;
        if (line.front() == '[' && line.back() == ']') {
            section = line.substr(1, line.size() - 2);
            if (section != "dataset" && section != "model" && section != "pretrain" &&
                section != "synthesis" && section != "train" && section != "output")
                throw UsageError("config: unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError("config: missing '=' on line " + std::to_string(lineno));
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (section == "dataset") {
            if (key == "path")
                rc.dataset_path = val;
            else if (key == "split")
                rc.split = val;
            else
                throw UsageError("config: unknown key '" + key + "' in [dataset]");
        } else if (section == "model") {
            if (key == "width")
                rc.model_width = parse_u64(key, val);
            else if (key == "seed")
                rc.model_seed = parse_u64(key, val);
            else
                throw UsageError("config: unknown key '" + key + "' in [model]");
        } else if (section == "pretrain") {
            apply_train_key(rc.pretrain_cfg, section, key, val);
        } else if (section == "train") {
            apply_train_key(rc.train_cfg, section, key, val);
        } else if (section == "synthesis") {
            auto& s = rc.synth;
            if (key == "k")
                s.steps = parse_u64(key, val);
            else if (key == "batch_size")
                s.batch_size = parse_u64(key, val);
            else if (key == "total_images")
                s.total_images = parse_u64(key, val);
            else if (key == "lr")
                s.lr = parse_f64(key, val);
            else if (key == "beta1")
                s.beta1 = parse_f64(key, val);
            else if (key == "beta2")
                s.beta2 = parse_f64(key, val);
            else if (key == "seed")
                s.seed = parse_u64(key, val);
            else if (key == "label_scheme") {
                if (val == "round_robin")
                    s.label_scheme = LabelScheme::RoundRobin;
                else if (val == "random_balanced")
                    s.label_scheme = LabelScheme::RandomBalanced;
                else
                    throw UsageError("config: unknown label_scheme '" + val + "'");
            } else if (key == "clip_min")
                s.clip_min = static_cast<float>(parse_f64(key, val));
            else if (key == "clip_max")
                s.clip_max = static_cast<float>(parse_f64(key, val));
            else if (key == "match_std")
                s.match_std = parse_bool(key, val);
            else if (key == "mean_weight")
                s.mean_weight = parse_f64(key, val);
            else if (key == "var_weight")
                s.var_weight = parse_f64(key, val);
            else if (key == "ce_weight")
                s.ce_weight = parse_f64(key, val);
            else if (key == "threads")
                rc.threads = parse_u64(key, val);
            else if (key == "sample_export_limit")
                rc.sample_export_limit = parse_u64(key, val);
            else
                throw UsageError("config: unknown key '" + key + "' in [synthesis]");
        } else if (section == "output") {
            if (key == "dir")
                rc.out_dir = val;
            else
                throw UsageError("config: unknown key '" + key + "' in [output]");
        } else {
            throw UsageError("config: key '" + key + "' before any section header");
        }
    }
}

std::size_t resolve_threads(std::size_t requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("BNINVERT_THREADS")) {
        const auto v = parse_u64("BNINVERT_THREADS", env);
        if (v > 0) return v;
    }
    return 1;
}

// resolved-config echo written next to every command's outputs
void write_resolved_config(const std::string& out_dir, const RunConfig& rc,
                           const std::string& command) {
    fs::create_directories(out_dir);
    std::ofstream f(fs::path(out_dir) / "resolved_config.txt");
    if (!f) throw std::runtime_error("cannot write resolved config in " + out_dir);
    f << "# resolved configuration for '" << command << "'\n";
    f << "[dataset]\npath=" << rc.dataset_path << "\nsplit=" << rc.split << "\n";
    f << "[model]\nwidth=" << rc.model_width << "\nseed=" << rc.model_seed << "\n";
    f << "[pretrain]\nepochs=" << rc.pretrain_cfg.epochs
      << "\nbatch_size=" << rc.pretrain_cfg.batch_size << "\nlr=" << rc.pretrain_cfg.lr
      << "\neta_min=" << rc.pretrain_cfg.eta_min << "\nseed=" << rc.pretrain_cfg.seed << "\n";
    f << "[synthesis]\nk=" << rc.synth.steps << "\nbatch_size=" << rc.synth.batch_size
      << "\ntotal_images=" << rc.synth.total_images << "\nlr=" << rc.synth.lr
      << "\nbeta1=" << rc.synth.beta1 << "\nbeta2=" << rc.synth.beta2
      << "\nseed=" << rc.synth.seed << "\nlabel_scheme="
      << (rc.synth.label_scheme == LabelScheme::RoundRobin ? "round_robin" : "random_balanced")
      << "\nmatch_std=" << (rc.synth.match_std ? "1" : "0");
    if (rc.synth.clip_min) f << "\nclip_min=" << *rc.synth.clip_min;
    if (rc.synth.clip_max) f << "\nclip_max=" << *rc.synth.clip_max;
    f << "\nmean_weight=" << rc.synth.mean_weight << "\nvar_weight=" << rc.synth.var_weight
      << "\nce_weight=" << rc.synth.ce_weight << "\nthreads=" << resolve_threads(rc.threads)
      << "\nsample_export_limit=" << rc.sample_export_limit << "\n";
    f << "[train]\nepochs=" << rc.train_cfg.epochs << "\nbatch_size=" << rc.train_cfg.batch_size
      << "\nlr=" << rc.train_cfg.lr << "\neta_min=" << rc.train_cfg.eta_min
      << "\nseed=" << rc.train_cfg.seed << "\n";
    f << "[output]\ndir=" << rc.out_dir << "\n";
}

// accept either a dataset directory or a manifest path
std::string manifest_path_of(const std::string& data) {
    if (data.empty()) throw UsageError("missing dataset path");
    fs::path p(data);
    if (fs::is_directory(p)) p /= "manifest.txt";
    if (!fs::exists(p)) throw UsageError("dataset not found: " + p.string());
    return p.string();
}

Model load_model(const std::string& checkpoint) {
    if (!fs::exists(checkpoint)) throw UsageError("checkpoint not found: " + checkpoint);
    return load_checkpoint(checkpoint);
}

// one global --seed per run overrides all section seeds via derivation
void funnel_seed(RunConfig& rc, std::optional<std::uint64_t> seed) {
    if (!seed) return;
    rc.model_seed = rng::derive(*seed, 1);
    rc.pretrain_cfg.seed = rng::derive(*seed, 2);
    rc.synth.seed = rng::derive(*seed, 3);
    rc.train_cfg.seed = rng::derive(*seed, 4);
}

// ---------------------------------------------------------------------------
// subcommands

int cmd_make_fixture(const std::string& out, std::uint64_t seed, bool force) {
    try {
        make_fixture(out, seed, force);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    std::cout << "fixture written to " << out << "\n";
    return 0;
}

int cmd_pretrain(RunConfig rc) {
    const auto manifest = manifest_path_of(rc.dataset_path);
    if (rc.out_dir.empty()) throw UsageError("missing output directory");
    auto train = load_dataset(manifest, "train");
    auto test = load_dataset(manifest, "test");
    auto model =
        make_tiny_resnet<float>(train.dims, train.class_count, rc.model_seed, rc.model_width);
    write_resolved_config(rc.out_dir, rc, "pretrain");
    auto metrics = pretrain(model, train, rc.pretrain_cfg,
                            [&](std::size_t, Model& m) { return evaluate(m, test); });
    save_checkpoint(model, (fs::path(rc.out_dir) / "model.bnck").string());
    write_metrics_csv((fs::path(rc.out_dir) / "metrics.csv").string(), metrics);
    std::cout << "top1=" << metrics.rows.back().test_acc << "\n";
    return 0;
}

int cmd_synthesize(RunConfig rc, const std::string& checkpoint) {
    if (rc.out_dir.empty()) throw UsageError("missing output directory");
    auto model = load_model(checkpoint);
    try {
        validate_synthesis_config(rc.synth, model.class_count);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    write_resolved_config(rc.out_dir, rc, "synthesize");
    auto snapshot = record_bn_stats(model);
    auto ds = generate_dataset(model, snapshot, rc.synth, resolve_threads(rc.threads));
    save_synthetic_dataset((fs::path(rc.out_dir) / "dataset").string(), ds);
    write_loss_trace_csv((fs::path(rc.out_dir) / "loss_trace.csv").string(), ds.traces);
    export_images(ds, (fs::path(rc.out_dir) / "samples").string(), rc.sample_export_limit);
    std::cout << "synthesized " << ds.count() << " images in " << ds.traces.size()
              << " batches to " << rc.out_dir << "\n";
    return 0;
}

int cmd_train(RunConfig rc, const std::string& eval_data) {
    const auto manifest = manifest_path_of(rc.dataset_path);
    if (rc.out_dir.empty()) throw UsageError("missing output directory");
    auto train = load_dataset(manifest, "train");
    auto model =
        make_tiny_resnet<float>(train.dims, train.class_count, rc.model_seed, rc.model_width);
    write_resolved_config(rc.out_dir, rc, "train");

    Metrics metrics;
    if (!eval_data.empty()) {
        auto test = load_dataset(manifest_path_of(eval_data), rc.split);
        metrics = train_from_scratch(model, train, rc.train_cfg,
                                     [&](std::size_t, Model& m) { return evaluate(m, test); });
        std::cout << "top1=" << metrics.rows.back().test_acc << "\n";
    } else {
        metrics = train_from_scratch(model, train, rc.train_cfg);
    }
    save_checkpoint(model, (fs::path(rc.out_dir) / "model.bnck").string());
    write_metrics_csv((fs::path(rc.out_dir) / "metrics.csv").string(), metrics);
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& split) {
    auto model = load_model(checkpoint);
    auto test = load_dataset(manifest_path_of(data), split);
    try {
        std::cout << "top1=" << evaluate(model, test) << "\n";
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic dataset generation from BatchNorm statistics"};
    app.require_subcommand(1);

    std::string config_file, data, out, checkpoint, eval_data, split = "test";
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> k, n, batch_size, epochs, threads, width;
    std::optional<double> lr;
    bool force = false;

    auto* fixture = app.add_subcommand("make-fixture", "write the procedural dataset");
    fixture->add_option("--out", out, "output directory")->required();
    std::uint64_t fixture_seed = 0;
    fixture->add_option("--seed", fixture_seed, "generator seed");
    fixture->add_flag("--force", force, "overwrite a non-empty directory");

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_file, "key=value config file");
        cmd->add_option("--seed", seed, "master seed overriding all section seeds");
        cmd->add_option("--out", out, "output directory");
    };

    auto* pre = app.add_subcommand("pretrain", "train the teacher model on real data");
    add_common(pre);
    pre->add_option("--data", data, "dataset directory or manifest");
    pre->add_option("--epochs", epochs, "training epochs");
    pre->add_option("--batch-size", batch_size, "training batch size");
    pre->add_option("--lr", lr, "peak learning rate");
    pre->add_option("--width", width, "model channel width");

    auto* syn = app.add_subcommand("synthesize", "generate synthetic images from a checkpoint");
    add_common(syn);
    syn->add_option("--checkpoint", checkpoint, "pretrained model file");
    syn->add_option("--k", k, "optimization steps per batch");
    syn->add_option("--n", n, "total synthetic images");
    syn->add_option("--batch-size", batch_size, "synthesis batch size");
    syn->add_option("--threads", threads, "worker threads (env BNINVERT_THREADS fallback)");

    auto* tr = app.add_subcommand("train", "train a fresh model on a synthetic dataset");
    add_common(tr);
    tr->add_option("--data", data, "synthetic dataset directory or manifest");
    tr->add_option("--eval-data", eval_data, "real dataset to evaluate on after training");
    tr->add_option("--epochs", epochs, "training epochs");
    tr->add_option("--batch-size", batch_size, "training batch size");
    tr->add_option("--lr", lr, "peak learning rate");
    tr->add_option("--width", width, "model channel width");

    auto* ev = app.add_subcommand("eval", "report top-1 accuracy of a checkpoint");
    ev->add_option("--checkpoint", checkpoint, "model file")->required();
    ev->add_option("--data", data, "dataset directory or manifest")->required();
    ev->add_option("--split", split, "dataset split to evaluate");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        RunConfig rc;
        if (!config_file.empty()) load_run_config(config_file, rc);
        if (!data.empty()) rc.dataset_path = data;
        if (!out.empty()) rc.out_dir = out;
        funnel_seed(rc, seed);
        if (k) rc.synth.steps = *k;
        if (n) rc.synth.total_images = *n;
        if (threads) rc.threads = *threads;
        if (width) rc.model_width = *width;
        if (batch_size) {
            rc.synth.batch_size = *batch_size;
            rc.pretrain_cfg.batch_size = *batch_size;
            rc.train_cfg.batch_size = *batch_size;
        }
        if (epochs) {
            rc.pretrain_cfg.epochs = *epochs;
            rc.train_cfg.epochs = *epochs;
        }
        if (lr) {
            rc.pretrain_cfg.lr = *lr;
            rc.train_cfg.lr = *lr;
        }

        if (fixture->parsed()) return cmd_make_fixture(out, fixture_seed, force);
        if (pre->parsed()) return cmd_pretrain(rc);
        if (syn->parsed()) return cmd_synthesize(rc, checkpoint);
        if (tr->parsed()) return cmd_train(rc, eval_data);
        if (ev->parsed()) return cmd_eval(checkpoint, data, split);
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}
