#pragma once

// Synthetic image generation: optimize Gaussian noise batches so their
// layer-wise activation moments match the BN statistics recorded from a
// pre-trained model, with a cross-entropy term tying batches to their
// assigned labels.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bninvert/layers.hpp"
#include "bninvert/tensor.hpp"

namespace bninvert {

enum class LabelScheme { RoundRobin, RandomBalanced };

struct SynthesisConfig {
    std::size_t steps = 200;         // k, gradient updates per batch
    std::size_t batch_size = 64;     // b_s
    std::size_t total_images = 512;  // N; iter = N / b_s
    double lr = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::uint64_t seed = 0;
    LabelScheme label_scheme = LabelScheme::RoundRobin;
    std::optional<float> clip_min;
    std::optional<float> clip_max;
    bool match_std = false;  // compare standard deviations instead of variances
    double mean_weight = 1.0;
    double var_weight = 1.0;
    double ce_weight = 1.0;

    std::size_t iterations() const { return total_images / batch_size; }
};

void validate_synthesis_config(const SynthesisConfig& cfg, std::size_t class_count);

struct LossBreakdown {
    double bn_mean_term = 0;
    double bn_var_term = 0;
    double ce_term = 0;
    double total = 0;
};

struct SyntheticBatch {
    Tensor x_r;  // [b_s, C_img, H, W], detached
    std::vector<std::size_t> labels;
};

struct SynthResult {
    SyntheticBatch batch;
    std::vector<LossBreakdown> trace;  // one entry per optimization step
};

struct SyntheticDataset {
    std::array<std::size_t, 3> dims{};
    std::size_t class_count = 0;
    std::vector<float> images;  // image-major, row-major within each image
    std::vector<std::uint16_t> labels;
    std::vector<std::vector<LossBreakdown>> traces;  // per batch
    std::map<std::string, std::string> metadata;
    std::size_t count() const { return labels.size(); }
};

// Per-batch noise seed, derived from (config.seed, batch_index).
Tensor init_noise(const SynthesisConfig& cfg, std::size_t batch_index,
                  std::array<std::size_t, 3> dims);

std::vector<std::size_t> assign_labels(const SynthesisConfig& cfg, std::size_t batch_index,
                                       std::size_t class_count);

// total = mean_w * sum_i ||mu~_i - mu_i||^2 + var_w * sum_i ||s~_i - s_i||^2
//       + ce_w * f(labels, logits)
// where s is variance, or standard deviation when match_std.
template <class T>
std::pair<TensorT<T>, LossBreakdown> synthesis_loss(
    GraphT<T>* g, const std::vector<std::pair<TensorT<T>, TensorT<T>>>& bn_batch_stats,
    const BNStatsSnapshotT<T>& snapshot, const TensorT<T>& logits,
    const std::vector<std::size_t>& labels, bool match_std = false, T mean_weight = T(1),
    T var_weight = T(1), T ce_weight = T(1)) {
    if (bn_batch_stats.size() != snapshot.layer_count())
        throw std::invalid_argument("synthesis_loss: got " + std::to_string(bn_batch_stats.size()) +
                                    " BN stat pairs, snapshot has " +
                                    std::to_string(snapshot.layer_count()));
    TensorT<T> mean_acc = TensorT<T>::scalar(T(0));
    TensorT<T> var_acc = TensorT<T>::scalar(T(0));
    for (std::size_t i = 0; i < bn_batch_stats.size(); ++i) {
        const auto& [bm, bv] = bn_batch_stats[i];
        if (bm.shape() != Shape{snapshot.mean[i].size()})
            throw std::invalid_argument("synthesis_loss: layer " + std::to_string(i) +
                                        " channel mismatch");
        auto snap_mean = TensorT<T>::from_data({snapshot.mean[i].size()}, snapshot.mean[i]);
        auto snap_var = TensorT<T>::from_data({snapshot.var[i].size()}, snapshot.var[i]);
        mean_acc = add(g, mean_acc, sum(g, square(g, sub(g, bm, snap_mean))));
        if (match_std) {
            var_acc = add(g, var_acc,
                          sum(g, square(g, sub(g, sqrt_op(g, bv), sqrt_op(g, snap_var)))));
        } else {
            var_acc = add(g, var_acc, sum(g, square(g, sub(g, bv, snap_var))));
        }
    }
    auto ce = cross_entropy(g, logits, labels);
    auto total = add(g, add(g, scale(g, mean_acc, mean_weight), scale(g, var_acc, var_weight)),
                     scale(g, ce, ce_weight));
    LossBreakdown bd;
    bd.bn_mean_term = static_cast<double>(mean_weight * mean_acc.item());
    bd.bn_var_term = static_cast<double>(var_weight * var_acc.item());
    bd.ce_term = static_cast<double>(ce_weight * ce.item());
    bd.total = static_cast<double>(total.item());
    return {total, bd};
}

// Runs k steps of {SynthEval forward, synthesis_loss, backward, Adam step on
// x_r}. Model parameters and running stats are left bitwise unchanged.
SynthResult synthesize_batch(Model& model, const BNStatsSnapshot& snapshot,
                             const SynthesisConfig& cfg, std::size_t batch_index);

// All iter = N / b_s batches, optionally synthesized on worker threads.
// Output ordering follows batch_index regardless of scheduling.
SyntheticDataset generate_dataset(Model& model, const BNStatsSnapshot& snapshot,
                                  const SynthesisConfig& cfg, std::size_t threads = 1);

}  // namespace bninvert
