#pragma once

// Training and evaluation loops. Training receives only the train
// split; callers that want per-epoch test accuracy supply a callback,
// so the loop itself never touches held-out data.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bninvert/dataset.hpp"
#include "bninvert/layers.hpp"
#include "bninvert/optim.hpp"

namespace bninvert {

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    double lr = 0.05;       // eta_max, cosine-annealed per epoch
    double eta_min = 0.0;
    std::uint64_t seed = 0;
};

struct EpochMetric {
    std::size_t epoch;
    double train_loss;
    double test_acc;  // NaN when no evaluation callback was supplied
};

struct Metrics {
    std::vector<EpochMetric> rows;
    double wall_seconds = 0;
};

// Called after each epoch; the returned value is recorded as test_acc.
using EpochCallback = std::function<double(std::size_t epoch, Model& model)>;

// SGD + cosine-annealed lr on cross-entropy, Train-mode forwards.
// Requires the model to carry at least one BN layer.
Metrics pretrain(Model& model, const Dataset& train_split, const TrainConfig& cfg,
                 const EpochCallback& eval_cb = {});

// Same loop for a freshly initialized model on synthetic data; rejects
// an empty dataset.
Metrics train_from_scratch(Model& model, const Dataset& train_split, const TrainConfig& cfg,
                           const EpochCallback& eval_cb = {});

// Top-1 accuracy; argmax ties break to the lowest class index.
double evaluate(Model& model, const Dataset& test_split);

// View a synthesized dataset as a training split (identity normalization).
Dataset dataset_from_synthetic(const SyntheticDataset& ds);

void write_metrics_csv(const std::string& path, const Metrics& metrics);

void write_loss_trace_csv(const std::string& path,
                          const std::vector<std::vector<LossBreakdown>>& traces);

}  // namespace bninvert
