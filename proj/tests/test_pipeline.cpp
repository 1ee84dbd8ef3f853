#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bninvert/checkpoint.hpp"
#include "bninvert/pipeline.hpp"
#include "support/oracles.hpp"

using namespace bninvert;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("bninvert_test_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void dump(const fs::path& p, const std::vector<char>& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("fixture: split sizes, per-class balance, byte-reproducibility") {
    TempDir a("fix_a"), b("fix_b");
    make_fixture(a.str(), 42);
    make_fixture(b.str(), 42);

    auto train = load_dataset(a.str() + "/manifest.txt", "train");
    auto test = load_dataset(a.str() + "/manifest.txt", "test");
    CHECK(train.count() == 2000);
    CHECK(test.count() == 500);
    CHECK(train.dims == std::array<std::size_t, 3>{3, 16, 16});
    CHECK(train.class_count == 4);
    std::vector<int> counts(4, 0);
    for (auto l : train.labels) ++counts[l];
    for (auto c : counts) CHECK(c == 500);

    for (const auto& name :
         {"manifest.txt", "train_images.bin", "train_labels.bin", "test_images.bin",
          "test_labels.bin"})
        CHECK(slurp(a.path / name) == slurp(b.path / name));

    TempDir c("fix_c");
    make_fixture(c.str(), 43);
    CHECK(slurp(a.path / "train_images.bin") != slurp(c.path / "train_images.bin"));
}

TEST_CASE("fixture refuses a non-empty directory without force") {
    TempDir d("fix_force");
    std::ofstream(d.path / "existing.txt") << "x";
    CHECK_THROWS_AS(make_fixture(d.str(), 1), std::invalid_argument);
    CHECK_NOTHROW(make_fixture(d.str(), 1, true));
}

TEST_CASE("fixture pixels are normalized to [-1, 1] after loading") {
    TempDir d("fix_norm");
    make_fixture(d.str(), 7);
    auto train = load_dataset(d.str() + "/manifest.txt");
    REQUIRE(train.norm_mean == std::vector<float>{0.5f, 0.5f, 0.5f});
    for (auto v : train.images) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("load_dataset rejects a tampered image blob") {
    TempDir d("fix_crc");
    make_fixture(d.str(), 3);
    auto bytes = slurp(d.path / "train_images.bin");
    bytes[bytes.size() / 2] ^= 0x01;
    dump(d.path / "train_images.bin", bytes);
    CHECK_THROWS_WITH_AS(load_dataset(d.str() + "/manifest.txt", "train"),
                         doctest::Contains("CRC32"), std::runtime_error);
    // the untouched split still loads
    CHECK_NOTHROW(load_dataset(d.str() + "/manifest.txt", "test"));
}

TEST_CASE("load_dataset rejects unknown splits and unknown manifest keys") {
    TempDir d("fix_keys");
    make_fixture(d.str(), 3);
    CHECK_THROWS_AS(load_dataset(d.str() + "/manifest.txt", "valid"), std::runtime_error);
    std::ofstream(d.path / "manifest.txt", std::ios::app) << "bogus_key=1\n";
    CHECK_THROWS_WITH_AS(load_dataset(d.str() + "/manifest.txt", "train"),
                         doctest::Contains("bogus_key"), std::runtime_error);
}

TEST_CASE("synthetic dataset round-trips bitwise through save and load") {
    SyntheticDataset ds;
    ds.dims = {1, 4, 4};
    ds.class_count = 2;
    for (int i = 0; i < 6 * 16; ++i)
        ds.images.push_back(0.25f * static_cast<float>(i) - 3.1f);
    ds.labels = {0, 1, 0, 1, 0, 1};
    ds.metadata["k"] = "5";
    ds.metadata["model_sha256"] = "cafe";

    TempDir d("synd_rt");
    save_synthetic_dataset(d.str(), ds);
    auto loaded = load_dataset(d.str() + "/manifest.txt", "train");
    CHECK(loaded.images == ds.images);  // identity normalization
    CHECK(loaded.labels == ds.labels);
    CHECK(loaded.class_count == 2);

    auto man = read_manifest(d.str() + "/manifest.txt");
    CHECK(man.meta.at("k") == "5");
    CHECK(man.meta.at("model_sha256") == "cafe");
}

TEST_CASE("evaluate matches the scalar oracle and handles tie-breaks") {
    // head-only model: conv is 1x1 identity-ish so logits are controllable
    Model m;
    m.input_dims = {1, 1, 1};
    m.class_count = 4;
    m.layers.push_back(make_gap<float>());
    m.layers.push_back(make_linear<float>(1, 4, 11));

    Dataset d;
    d.name = "toy";
    d.class_count = 4;
    d.dims = {1, 1, 1};
    d.norm_mean = {0.0f};
    d.norm_std = {1.0f};
    for (int i = 0; i < 100; ++i) {
        d.images.push_back(static_cast<float>(i % 7) - 3.0f);
        d.labels.push_back(static_cast<std::uint16_t>(i % 4));
    }
    const double acc = evaluate(m, d);

    // oracle: run the same logits through plain loops
    std::vector<double> logits;
    const auto& w = m.layers[1].weight.data();
    const auto& b = m.layers[1].bias.data();
    std::vector<std::size_t> labels;
    for (int i = 0; i < 100; ++i) {
        const double x = d.images[static_cast<std::size_t>(i)];
        for (std::size_t c = 0; c < 4; ++c) logits.push_back(x * w[c] + b[c]);
        labels.push_back(d.labels[static_cast<std::size_t>(i)]);
    }
    CHECK(acc == doctest::Approx(testsupport::evaluate_ref(logits, 100, 4, labels)));

    // constant logits: argmax tie-breaks to class 0 -> accuracy = P(label 0)
    for (auto& v : m.layers[1].weight.data()) v = 0.0f;
    for (auto& v : m.layers[1].bias.data()) v = 0.0f;
    CHECK(evaluate(m, d) == doctest::Approx(0.25));
}

TEST_CASE("evaluate is 1.0 when logits one-hot encode the labels") {
    Model m;
    m.input_dims = {1, 1, 1};
    m.class_count = 2;
    m.layers.push_back(make_gap<float>());
    m.layers.push_back(make_linear<float>(1, 2, 12));
    // logits = [x, -x]: positive pixel -> class 0, negative -> class 1
    m.layers[1].weight.data() = {1.0f, -1.0f};
    m.layers[1].bias.data() = {0.0f, 0.0f};

    Dataset d;
    d.class_count = 2;
    d.dims = {1, 1, 1};
    d.norm_mean = {0.0f};
    d.norm_std = {1.0f};
    for (int i = 0; i < 10; ++i) {
        const bool neg = i % 2;
        d.images.push_back(neg ? -1.0f : 1.0f);
        d.labels.push_back(neg ? 1 : 0);
    }
    CHECK(evaluate(m, d) == 1.0);
}

TEST_CASE("ppm export: header, payload size, quantization round-trip") {
    SyntheticDataset ds;
    ds.dims = {3, 16, 16};
    ds.class_count = 2;
    const std::size_t px = 3 * 16 * 16;
    for (std::size_t i = 0; i < px; ++i)
        ds.images.push_back(-2.0f + 4.0f * static_cast<float>(i) / static_cast<float>(px - 1));
    for (std::size_t i = 0; i < px; ++i) ds.images.push_back(0.7f);  // constant image
    ds.labels = {0, 1};

    TempDir d("ppm");
    export_images(ds, d.str());

    auto bytes = slurp(d.path / "0_0.ppm");
    const std::string header = "P6\n16 16\n255\n";
    REQUIRE(bytes.size() == header.size() + 768);
    CHECK(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())) ==
          header);

    // reparse: un-quantize and compare against the per-image min-max map
    float lo = ds.images[0], hi = ds.images[0];
    for (std::size_t i = 0; i < px; ++i) {
        lo = std::min(lo, ds.images[i]);
        hi = std::max(hi, ds.images[i]);
    }
    const auto* pix = reinterpret_cast<const unsigned char*>(bytes.data() + header.size());
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const float orig = (ds.images[(c * 16 + y) * 16 + x] - lo) / (hi - lo);
                const float got =
                    static_cast<float>(pix[(y * 16 + x) * 3 + c]) / 255.0f;
                CHECK(std::abs(got - orig) <= 1.0f / 255.0f);
            }

    // constant image maps to all zero bytes
    auto cbytes = slurp(d.path / "1_0.ppm");
    for (std::size_t i = header.size(); i < cbytes.size(); ++i) CHECK(cbytes[i] == 0);

    // montage exists: one 16-pixel row of images per class
    auto grid = slurp(d.path / "grid.ppm");
    CHECK(std::string(grid.begin(), grid.begin() + 2) == "P6");
}

TEST_CASE("metrics csv format, NaN renders as empty field") {
    Metrics m;
    m.rows.push_back({0, 1.25, 0.5});
    m.rows.push_back({1, 0.75, std::nan("")});
    TempDir d("csv");
    const std::string path = d.str() + "/metrics.csv";
    write_metrics_csv(path, m);
    std::ifstream in(path);
    std::string l0, l1, l2;
    std::getline(in, l0);
    std::getline(in, l1);
    std::getline(in, l2);
    CHECK(l0 == "epoch,train_loss,test_acc");
    CHECK(l1.substr(0, 2) == "0,");
    CHECK(l1.find("1.25") != std::string::npos);
    CHECK(l2.back() == ',');  // NaN -> empty last field
}

TEST_CASE("loss trace csv carries batch, step and the three terms") {
    std::vector<std::vector<LossBreakdown>> traces(2);
    traces[0].push_back({0.5, 0.25, 1.0, 1.75});
    traces[1].push_back({0.1, 0.2, 0.3, 0.6});
    TempDir d("trace");
    const std::string path = d.str() + "/trace.csv";
    write_loss_trace_csv(path, traces);
    std::ifstream in(path);
    std::string header, r0, r1;
    std::getline(in, header);
    std::getline(in, r0);
    std::getline(in, r1);
    CHECK(header == "batch,step,bn_mean,bn_var,ce,total");
    CHECK(r0.substr(0, 4) == "0,0,");
    CHECK(r1.substr(0, 4) == "1,0,");
    CHECK(r0.find("1.75") != std::string::npos);
}

TEST_CASE("short training run reduces loss and is seed-deterministic") {
    TempDir d("train");
    make_fixture(d.str(), 5, false, {4, {3, 16, 16}, 240, 60});
    auto train = load_dataset(d.str() + "/manifest.txt", "train");
    auto test = load_dataset(d.str() + "/manifest.txt", "test");

    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 32;
    cfg.lr = 0.05;
    cfg.seed = 9;

    auto m1 = make_tiny_resnet<float>({3, 16, 16}, 4, 21);
    std::vector<double> accs;
    auto metrics = pretrain(m1, train, cfg, [&](std::size_t, Model& mm) {
        const double a = evaluate(mm, test);
        accs.push_back(a);
        return a;
    });
    REQUIRE(metrics.rows.size() == 3);
    CHECK(metrics.rows.back().train_loss < metrics.rows.front().train_loss);
    CHECK(accs.size() == 3);
    CHECK(metrics.rows.back().test_acc == doctest::Approx(accs.back()));
    CHECK(metrics.wall_seconds > 0);

    auto m2 = make_tiny_resnet<float>({3, 16, 16}, 4, 21);
    auto metrics2 = pretrain(m2, train, cfg);
    CHECK(serialize_model(m1) == serialize_model(m2));
    CHECK(std::isnan(metrics2.rows.back().test_acc));
}

TEST_CASE("training moves the BN running statistics off initialization") {
    TempDir d("train_bn");
    make_fixture(d.str(), 6, false, {4, {3, 16, 16}, 160, 40});
    auto train = load_dataset(d.str() + "/manifest.txt", "train");
    auto m = make_tiny_resnet<float>({3, 16, 16}, 4, 2);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 32;
    pretrain(m, train, cfg);
    auto snap = record_bn_stats(m);
    double moved = 0;
    for (auto v : snap.mean[0]) moved += std::abs(v);
    CHECK(moved > 0.0);
}

TEST_CASE("train_from_scratch rejects empty data and dimension mismatch") {
    auto m = make_tiny_resnet<float>({3, 16, 16}, 4, 1);
    Dataset empty;
    empty.class_count = 4;
    empty.dims = {3, 16, 16};
    TrainConfig cfg;
    cfg.epochs = 1;
    CHECK_THROWS_AS(train_from_scratch(m, empty, cfg), std::invalid_argument);

    Dataset wrong;
    wrong.class_count = 4;
    wrong.dims = {3, 8, 8};
    wrong.images.assign(3 * 8 * 8 * 4, 0.0f);
    wrong.labels = {0, 1, 2, 3};
    wrong.norm_mean = {0, 0, 0};
    wrong.norm_std = {1, 1, 1};
    CHECK_THROWS_AS(train_from_scratch(m, wrong, cfg), std::invalid_argument);
}

TEST_CASE("dataset_from_synthetic preserves pixels and labels verbatim") {
    SyntheticDataset ds;
    ds.dims = {1, 2, 2};
    ds.class_count = 2;
    ds.images = {0.1f, -0.2f, 0.3f, -0.4f, 1.0f, 2.0f, 3.0f, 4.0f};
    ds.labels = {1, 0};
    auto d = dataset_from_synthetic(ds);
    CHECK(d.images == ds.images);
    CHECK(d.labels == ds.labels);
    CHECK(d.class_count == 2);
    CHECK(d.norm_mean == std::vector<float>{0.0f});
    CHECK(d.norm_std == std::vector<float>{1.0f});
}
