#include "bninvert/synthesis.hpp"

#include <algorithm>
#include <sstream>
#include <thread>

#include "bninvert/checkpoint.hpp"
#include "bninvert/optim.hpp"

namespace bninvert {

void validate_synthesis_config(const SynthesisConfig& cfg, std::size_t class_count) {
    if (cfg.steps < 1) throw std::invalid_argument("synthesis: k must be >= 1");
    if (cfg.batch_size == 0) throw std::invalid_argument("synthesis: batch_size must be >= 1");
    if (cfg.batch_size < class_count)
        throw std::invalid_argument("synthesis: batch_size " + std::to_string(cfg.batch_size) +
                                    " is smaller than class count " +
                                    std::to_string(class_count));
    if (cfg.total_images == 0 || cfg.total_images % cfg.batch_size != 0)
        throw std::invalid_argument("synthesis: N (" + std::to_string(cfg.total_images) +
                                    ") must be a positive multiple of b_s (" +
                                    std::to_string(cfg.batch_size) + ")");
    if (cfg.clip_min && cfg.clip_max && *cfg.clip_min > *cfg.clip_max)
        throw std::invalid_argument("synthesis: clip_min > clip_max");
    if (!(cfg.lr > 0)) throw std::invalid_argument("synthesis: lr must be > 0");
}

Tensor init_noise(const SynthesisConfig& cfg, std::size_t batch_index,
                  std::array<std::size_t, 3> dims) {
    const std::uint64_t seed = rng::derive(rng::derive(cfg.seed, batch_index), 0);
    return randn<float>({cfg.batch_size, dims[0], dims[1], dims[2]}, 0.0f, 1.0f, seed);
}

std::vector<std::size_t> assign_labels(const SynthesisConfig& cfg, std::size_t batch_index,
                                       std::size_t class_count) {
    if (class_count == 0) throw std::invalid_argument("assign_labels: class_count == 0");
    if (cfg.batch_size < class_count)
        throw std::invalid_argument("assign_labels: batch_size < class_count");
    std::vector<std::size_t> labels(cfg.batch_size);
    for (std::size_t j = 0; j < labels.size(); ++j) labels[j] = j % class_count;
    if (cfg.label_scheme == LabelScheme::RandomBalanced) {
        const std::uint64_t seed = rng::derive(rng::derive(cfg.seed, batch_index), 1);
        rng::shuffle(labels, seed);
    }
    return labels;
}

SynthResult synthesize_batch(Model& model, const BNStatsSnapshot& snapshot,
                             const SynthesisConfig& cfg, std::size_t batch_index) {
    validate_synthesis_config(cfg, model.class_count);
    if (snapshot.layer_count() != model.num_bn_layers())
        throw std::invalid_argument("synthesize_batch: snapshot has " +
                                    std::to_string(snapshot.layer_count()) +
                                    " BN layers, model has " +
                                    std::to_string(model.num_bn_layers()));

    Tensor x_r = init_noise(cfg, batch_index, model.input_dims);
    x_r.set_requires_grad(true);
    auto labels = assign_labels(cfg, batch_index, model.class_count);

    Adam adam({x_r}, static_cast<float>(cfg.lr), static_cast<float>(cfg.beta1),
              static_cast<float>(cfg.beta2));

    SynthResult result;
    result.trace.reserve(cfg.steps);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Graph g;
        std::vector<std::pair<Tensor, Tensor>> bn_stats;
        auto logits = model_forward(model, x_r, ForwardMode::SynthEval, &g, &bn_stats);
        auto [total, bd] =
            synthesis_loss(&g, bn_stats, snapshot, logits, labels, cfg.match_std,
                     static_cast<float>(cfg.mean_weight), static_cast<float>(cfg.var_weight),
                     static_cast<float>(cfg.ce_weight));
        result.trace.push_back(bd);
        adam.zero_grad();
        g.backward(total);
        adam.step();
        if (cfg.clip_min)
            for (auto& v : x_r.data()) v = std::max(v, *cfg.clip_min);
        if (cfg.clip_max)
            for (auto& v : x_r.data()) v = std::min(v, *cfg.clip_max);
    }

    result.batch.x_r = x_r.clone();
    result.batch.labels = std::move(labels);
    return result;
}

SyntheticDataset generate_dataset(Model& model, const BNStatsSnapshot& snapshot,
                                  const SynthesisConfig& cfg, std::size_t threads) {
    validate_synthesis_config(cfg, model.class_count);
    const std::size_t iter = cfg.iterations();

    // Batches are independent given (model, snapshot, config); the model
    // is shared read-only across workers.
    std::vector<SynthResult> results(iter);
    auto run_range = [&](std::size_t begin, std::size_t end) {
        for (std::size_t b = begin; b < end; ++b)
            results[b] = synthesize_batch(model, snapshot, cfg, b);
    };
    if (threads <= 1 || iter <= 1) {
        run_range(0, iter);
    } else {
        const std::size_t workers = std::min(threads, iter);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            const std::size_t begin = iter * w / workers;
            const std::size_t end = iter * (w + 1) / workers;
            pool.emplace_back(run_range, begin, end);
        }
        for (auto& t : pool) t.join();
    }

    SyntheticDataset ds;
    ds.dims = model.input_dims;
    ds.class_count = model.class_count;
    ds.images.reserve(cfg.total_images * model.input_dims[0] * model.input_dims[1] *
                      model.input_dims[2]);
    ds.labels.reserve(cfg.total_images);
    for (auto& r : results) {
        ds.images.insert(ds.images.end(), r.batch.x_r.data().begin(), r.batch.x_r.data().end());
        for (auto l : r.batch.labels) ds.labels.push_back(static_cast<std::uint16_t>(l));
        ds.traces.push_back(std::move(r.trace));
    }

    auto fmt = [](double v) {
        std::ostringstream os;
        os << v;
        return os.str();
    };
    ds.metadata["k"] = std::to_string(cfg.steps);
    ds.metadata["batch_size"] = std::to_string(cfg.batch_size);
    ds.metadata["total_images"] = std::to_string(cfg.total_images);
    ds.metadata["lr"] = fmt(cfg.lr);
    ds.metadata["beta1"] = fmt(cfg.beta1);
    ds.metadata["beta2"] = fmt(cfg.beta2);
    ds.metadata["seed"] = std::to_string(cfg.seed);
    ds.metadata["label_scheme"] =
        cfg.label_scheme == LabelScheme::RoundRobin ? "round_robin" : "random_balanced";
    ds.metadata["match_std"] = cfg.match_std ? "1" : "0";
    ds.metadata["clip_min"] = cfg.clip_min ? fmt(*cfg.clip_min) : "none";
    ds.metadata["clip_max"] = cfg.clip_max ? fmt(*cfg.clip_max) : "none";
    ds.metadata["mean_weight"] = fmt(cfg.mean_weight);
    ds.metadata["var_weight"] = fmt(cfg.var_weight);
    ds.metadata["ce_weight"] = fmt(cfg.ce_weight);
    ds.metadata["model_sha256"] = model_sha256(model);
    ds.metadata["image_space"] = "normalized";
    ds.metadata["export_normalization"] = "per_image_min_max";
    return ds;
}

}  // namespace bninvert
