#include "bninvert/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "bninvert/rng.hpp"

namespace bninvert {

namespace {

Tensor batch_tensor(const Dataset& ds, const std::vector<std::size_t>& idx, std::size_t begin,
                    std::size_t end) {
    const std::size_t per = ds.image_size();
    const std::size_t n = end - begin;
    std::vector<float> data(n * per);
    for (std::size_t i = 0; i < n; ++i)
        std::copy_n(ds.images.data() + idx[begin + i] * per, per, data.data() + i * per);
    return Tensor::from_data({n, ds.dims[0], ds.dims[1], ds.dims[2]}, std::move(data));
}

Metrics train_loop(Model& model, const Dataset& train_split, const TrainConfig& cfg,
                   const EpochCallback& eval_cb) {
    if (cfg.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (train_split.count() == 0) throw std::invalid_argument("train: empty dataset");
    if (train_split.dims != model.input_dims || train_split.class_count != model.class_count)
        throw std::invalid_argument("train: dataset dims/classes do not match model");

    const auto t0 = std::chrono::steady_clock::now();
    set_parameter_grads(model, true);
    auto params = parameters(model);
    CosineSchedule schedule{cfg.lr, cfg.eta_min, cfg.epochs};

    Metrics metrics;
    std::vector<std::size_t> idx(train_split.count());
    std::iota(idx.begin(), idx.end(), 0);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const float lr = static_cast<float>(schedule.lr(epoch));
        rng::shuffle(idx, rng::derive(cfg.seed, epoch));
        double loss_sum = 0;
        std::size_t seen = 0;
        for (std::size_t begin = 0; begin < idx.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(begin + cfg.batch_size, idx.size());
            if (end - begin < 2) continue;  // BN needs >= 2 samples per channel
            auto x = batch_tensor(train_split, idx, begin, end);
            std::vector<std::size_t> labels(end - begin);
            for (std::size_t i = 0; i < labels.size(); ++i)
                labels[i] = train_split.labels[idx[begin + i]];
            Graph g;
            auto logits = model_forward(model, x, ForwardMode::Train, &g);
            auto loss = cross_entropy(&g, logits, labels);
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(end - begin);
            seen += end - begin;
            for (auto& p : params) p.zero_grad();
            g.backward(loss);
            sgd_step(params, lr);
        }
        EpochMetric row;
        row.epoch = epoch;
        row.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
        row.test_acc = eval_cb ? eval_cb(epoch, model)
                               : std::numeric_limits<double>::quiet_NaN();
        metrics.rows.push_back(row);
    }
    set_parameter_grads(model, false);
    metrics.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return metrics;
}

}  // namespace

Metrics pretrain(Model& model, const Dataset& train_split, const TrainConfig& cfg,
                 const EpochCallback& eval_cb) {
    if (model.num_bn_layers() == 0)
        throw std::invalid_argument("pretrain: model has no BatchNorm layers");
    return train_loop(model, train_split, cfg, eval_cb);
}

Metrics train_from_scratch(Model& model, const Dataset& train_split, const TrainConfig& cfg,
                           const EpochCallback& eval_cb) {
    return train_loop(model, train_split, cfg, eval_cb);
}

double evaluate(Model& model, const Dataset& test_split) {
    if (test_split.count() == 0) throw std::invalid_argument("evaluate: empty test split");
    if (test_split.dims != model.input_dims || test_split.class_count != model.class_count)
        throw std::invalid_argument("evaluate: dataset dims/classes do not match model");
    const std::size_t chunk = 100;
    std::size_t correct = 0;
    std::vector<std::size_t> idx(test_split.count());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t begin = 0; begin < idx.size(); begin += chunk) {
        const std::size_t end = std::min(begin + chunk, idx.size());
        auto x = batch_tensor(test_split, idx, begin, end);
        auto logits = model_forward(model, x, ForwardMode::Eval);
        const std::size_t C = model.class_count;
        for (std::size_t i = 0; i < end - begin; ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < C; ++c)
                if (logits.data()[i * C + c] > logits.data()[i * C + best]) best = c;
            if (best == test_split.labels[begin + i]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(test_split.count());
}

Dataset dataset_from_synthetic(const SyntheticDataset& ds) {
    if (ds.count() == 0) throw std::invalid_argument("synthetic dataset is empty");
    Dataset d;
    d.name = "synthetic";
    d.class_count = ds.class_count;
    d.dims = ds.dims;
    d.images = ds.images;
    d.labels = ds.labels;
    d.norm_mean.assign(ds.dims[0], 0.0f);
    d.norm_std.assign(ds.dims[0], 1.0f);
    return d;
}

void write_metrics_csv(const std::string& path, const Metrics& metrics) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("metrics: cannot open for writing: " + path);
    f << "epoch,train_loss,test_acc\n";
    for (const auto& r : metrics.rows) {
        f << r.epoch << "," << r.train_loss << ",";
        if (std::isnan(r.test_acc))
            f << "";
        else
            f << r.test_acc;
        f << "\n";
    }
}

void write_loss_trace_csv(const std::string& path,
                          const std::vector<std::vector<LossBreakdown>>& traces) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("loss trace: cannot open for writing: " + path);
    f << "batch,step,bn_mean,bn_var,ce,total\n";
    for (std::size_t b = 0; b < traces.size(); ++b)
        for (std::size_t s = 0; s < traces[b].size(); ++s) {
            const auto& t = traces[b][s];
            f << b << "," << s << "," << t.bn_mean_term << "," << t.bn_var_term << ","
              << t.ce_term << "," << t.total << "\n";
        }
}

}  // namespace bninvert
