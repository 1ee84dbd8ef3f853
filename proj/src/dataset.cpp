#include "bninvert/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bninvert/checkpoint.hpp"
#include "bninvert/rng.hpp"

namespace fs = std::filesystem;

namespace bninvert {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 24));
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    std::vector<std::uint8_t> bytes;
    std::size_t pos = 0;
    std::string path;

    [[noreturn]] void fail(const std::string& what) const {
        throw std::runtime_error("dataset: " + what + " in " + path + " at byte offset " +
                                 std::to_string(pos));
    }

    void need(std::size_t n) const {
        if (pos + n > bytes.size()) {
            throw std::runtime_error("dataset: truncated blob " + path + " at byte offset " +
                                     std::to_string(pos));
        }
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = static_cast<std::uint32_t>(bytes[pos]) |
                          (static_cast<std::uint32_t>(bytes[pos + 1]) << 8) |
                          (static_cast<std::uint32_t>(bytes[pos + 2]) << 16) |
                          (static_cast<std::uint32_t>(bytes[pos + 3]) << 24);
        pos += 4;
        return v;
    }

    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
        pos += 2;
        return v;
    }

    float f32() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("dataset: cannot open: " + path);
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("dataset: cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("dataset: write failed: " + path);
}

std::vector<std::uint8_t> image_blob_bytes(std::array<std::size_t, 3> dims,
                                           const std::vector<float>& images) {
    const std::size_t per = dims[0] * dims[1] * dims[2];
    if (per == 0 || images.size() % per != 0)
        throw std::invalid_argument("dataset: image buffer does not tile into " +
                                    std::to_string(per) + "-element images");
    std::vector<std::uint8_t> out;
    out.reserve(20 + images.size() * 4);
    out.insert(out.end(), {'S', 'Y', 'N', 'D'});
    put_u32(out, 1);  // version
    put_u32(out, static_cast<std::uint32_t>(images.size() / per));
    put_u32(out, static_cast<std::uint32_t>(dims[0]));
    put_u32(out, static_cast<std::uint32_t>(dims[1]));
    put_u32(out, static_cast<std::uint32_t>(dims[2]));
    for (float v : images) put_f32(out, v);
    return out;
}

std::vector<std::uint8_t> label_blob_bytes(const std::vector<std::uint16_t>& labels) {
    std::vector<std::uint8_t> out;
    out.reserve(8 + labels.size() * 2);
    out.insert(out.end(), {'S', 'Y', 'N', 'L'});
    put_u32(out, static_cast<std::uint32_t>(labels.size()));
    for (auto l : labels) put_u16(out, l);
    return out;
}

std::vector<float> parse_floats(const std::string& s, const std::string& key) {
    std::vector<float> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            out.push_back(std::stof(tok));
        } catch (const std::exception&) {
            throw std::runtime_error("manifest: bad float list for key " + key);
        }
    }
    if (out.empty()) throw std::runtime_error("manifest: empty float list for key " + key);
    return out;
}

std::string join_floats(const std::vector<float>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) os << ",";
        os << v[i];
    }
    return os.str();
}

}  // namespace

void write_image_blob(const std::string& path, std::array<std::size_t, 3> dims,
                      const std::vector<float>& images) {
    write_file(path, image_blob_bytes(dims, images));
}

void write_label_blob(const std::string& path, const std::vector<std::uint16_t>& labels) {
    write_file(path, label_blob_bytes(labels));
}

void write_manifest(const std::string& path, const Manifest& m) {
    std::ostringstream os;
    os << "name=" << m.name << "\n";
    os << "classes=" << m.class_count << "\n";
    os << "channels=" << m.dims[0] << "\n";
    os << "height=" << m.dims[1] << "\n";
    os << "width=" << m.dims[2] << "\n";
    os << "norm_mean=" << join_floats(m.norm_mean) << "\n";
    os << "norm_std=" << join_floats(m.norm_std) << "\n";
    for (const auto& [name, s] : m.splits) {
        os << "split." << name << ".images=" << s.images_file << "\n";
        os << "split." << name << ".labels=" << s.labels_file << "\n";
        os << "split." << name << ".count=" << s.count << "\n";
        os << "split." << name << ".images_crc32=" << s.images_crc32 << "\n";
        os << "split." << name << ".labels_crc32=" << s.labels_crc32 << "\n";
    }
    for (const auto& [k, v] : m.meta) os << "meta." << k << "=" << v << "\n";
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("manifest: cannot open for writing: " + path);
    f << os.str();
}

Manifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("manifest: cannot open: " + path);
    Manifest m;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("manifest: missing '=' on line " + std::to_string(lineno));
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        auto to_size = [&](const std::string& v) -> std::size_t {
            try {
                return static_cast<std::size_t>(std::stoull(v));
            } catch (const std::exception&) {
                throw std::runtime_error("manifest: bad integer for key " + key);
            }
        };
        if (key == "name") {
            m.name = val;
        } else if (key == "classes") {
            m.class_count = to_size(val);
        } else if (key == "channels") {
            m.dims[0] = to_size(val);
        } else if (key == "height") {
            m.dims[1] = to_size(val);
        } else if (key == "width") {
            m.dims[2] = to_size(val);
        } else if (key == "norm_mean") {
            m.norm_mean = parse_floats(val, key);
        } else if (key == "norm_std") {
            m.norm_std = parse_floats(val, key);
        } else if (key.rfind("split.", 0) == 0) {
            const std::string rest = key.substr(6);
            auto dot = rest.find('.');
            if (dot == std::string::npos)
                throw std::runtime_error("manifest: malformed split key: " + key);
            const std::string split = rest.substr(0, dot);
            const std::string field = rest.substr(dot + 1);
            auto& s = m.splits[split];
            if (field == "images")
                s.images_file = val;
            else if (field == "labels")
                s.labels_file = val;
            else if (field == "count")
                s.count = to_size(val);
            else if (field == "images_crc32")
                s.images_crc32 = static_cast<std::uint32_t>(to_size(val));
            else if (field == "labels_crc32")
                s.labels_crc32 = static_cast<std::uint32_t>(to_size(val));
            else
                throw std::runtime_error("manifest: unknown split field: " + key);
        } else if (key.rfind("meta.", 0) == 0) {
            m.meta[key.substr(5)] = val;
        } else {
            throw std::runtime_error("manifest: unknown key: " + key);
        }
    }
    if (m.class_count == 0 || m.dims[0] == 0 || m.dims[1] == 0 || m.dims[2] == 0)
        throw std::runtime_error("manifest: incomplete dataset description in " + path);
    if (m.norm_mean.size() != m.dims[0] || m.norm_std.size() != m.dims[0])
        throw std::runtime_error("manifest: normalization vectors must have one entry per "
                                 "channel");
    return m;
}

void write_dataset_dir(const std::string& dir, const std::string& name,
                       std::size_t class_count, std::array<std::size_t, 3> dims,
                       const std::vector<float>& norm_mean, const std::vector<float>& norm_std,
                       const std::map<std::string, RawSplit>& splits,
                       const std::map<std::string, std::string>& meta) {
    fs::create_directories(dir);
    Manifest m;
    m.name = name;
    m.class_count = class_count;
    m.dims = dims;
    m.norm_mean = norm_mean;
    m.norm_std = norm_std;
    m.meta = meta;
    for (const auto& [split, raw] : splits) {
        const std::size_t per = dims[0] * dims[1] * dims[2];
        if (raw.images.size() != raw.labels.size() * per)
            throw std::invalid_argument("dataset: split " + split +
                                        " image/label count mismatch");
        for (auto l : raw.labels)
            if (l >= class_count)
                throw std::invalid_argument("dataset: split " + split +
                                            " has label out of range");
        const auto img_bytes = image_blob_bytes(dims, raw.images);
        const auto lab_bytes = label_blob_bytes(raw.labels);
        ManifestSplit ms;
        ms.images_file = split + "_images.bin";
        ms.labels_file = split + "_labels.bin";
        ms.count = raw.labels.size();
        ms.images_crc32 = crc32_of(img_bytes.data(), img_bytes.size());
        ms.labels_crc32 = crc32_of(lab_bytes.data(), lab_bytes.size());
        write_file((fs::path(dir) / ms.images_file).string(), img_bytes);
        write_file((fs::path(dir) / ms.labels_file).string(), lab_bytes);
        m.splits[split] = ms;
    }
    write_manifest((fs::path(dir) / "manifest.txt").string(), m);
}

Dataset load_dataset(const std::string& manifest_path, const std::string& split) {
    const Manifest m = read_manifest(manifest_path);
    auto it = m.splits.find(split);
    if (it == m.splits.end())
        throw std::runtime_error("dataset: split '" + split + "' not present in " +
                                 manifest_path);
    const auto dir = fs::path(manifest_path).parent_path();
    const std::string img_path = (dir / it->second.images_file).string();
    const std::string lab_path = (dir / it->second.labels_file).string();

    Reader ir{read_file(img_path), 0, img_path};
    if (crc32_of(ir.bytes.data(), ir.bytes.size()) != it->second.images_crc32)
        throw std::runtime_error("dataset: image blob CRC32 mismatch: " + img_path);
    ir.need(4);
    if (std::memcmp(ir.bytes.data(), "SYND", 4) != 0) ir.fail("bad image blob magic");
    ir.pos = 4;
    const std::uint32_t version = ir.u32();
    if (version != 1) ir.fail("unsupported image blob version " + std::to_string(version));
    const std::size_t count = ir.u32();
    std::array<std::size_t, 3> dims{ir.u32(), ir.u32(), ir.u32()};
    if (dims != m.dims) ir.fail("blob dims disagree with manifest");
    if (count != it->second.count) ir.fail("blob count disagrees with manifest");
    const std::size_t per = dims[0] * dims[1] * dims[2];
    ir.need(count * per * 4);
    std::vector<float> images(count * per);
    for (auto& v : images) v = ir.f32();

    Reader lr{read_file(lab_path), 0, lab_path};
    if (crc32_of(lr.bytes.data(), lr.bytes.size()) != it->second.labels_crc32)
        throw std::runtime_error("dataset: label blob CRC32 mismatch: " + lab_path);
    lr.need(4);
    if (std::memcmp(lr.bytes.data(), "SYNL", 4) != 0) lr.fail("bad label blob magic");
    lr.pos = 4;
    const std::size_t lcount = lr.u32();
    if (lcount != count) lr.fail("label count disagrees with image count");
    std::vector<std::uint16_t> labels(lcount);
    for (auto& l : labels) {
        l = lr.u16();
        if (l >= m.class_count)
            throw std::runtime_error("dataset: label " + std::to_string(l) +
                                     " out of range in " + lab_path);
    }

    Dataset d;
    d.name = m.name;
    d.class_count = m.class_count;
    d.dims = dims;
    d.labels = std::move(labels);
    d.norm_mean = m.norm_mean;
    d.norm_std = m.norm_std;
    d.images.resize(images.size());
    const std::size_t hw = dims[1] * dims[2];
    for (std::size_t i = 0; i < count; ++i)
        for (std::size_t c = 0; c < dims[0]; ++c)
            for (std::size_t k = 0; k < hw; ++k) {
                const std::size_t idx = (i * dims[0] + c) * hw + k;
                d.images[idx] = (images[idx] - m.norm_mean[c]) / m.norm_std[c];
            }
    return d;
}

void save_synthetic_dataset(const std::string& dir, const SyntheticDataset& ds) {
    RawSplit split;
    split.images = ds.images;
    split.labels = ds.labels;
    write_dataset_dir(dir, "synthetic", ds.class_count, ds.dims,
                      std::vector<float>(ds.dims[0], 0.0f),
                      std::vector<float>(ds.dims[0], 1.0f), {{"train", std::move(split)}},
                      ds.metadata);
}

// ---------------------------------------------------------------------------
// Fixture generation
// ---------------------------------------------------------------------------

namespace {

// Per-class geometry on a 16x16 canvas: disc, square frame, horizontal
// stripes, diagonal cross. Colors carry class-correlated tints with
// enough jitter that shape still matters.
void paint_fixture_image(float* img, std::array<std::size_t, 3> dims, std::size_t cls,
                         std::uint64_t seed) {
    const std::size_t C = dims[0], H = dims[1], W = dims[2];
    std::uint64_t ctr = 0;
    auto u = [&] { return static_cast<float>(rng::uniform01(seed, ctr++)); };

    static const float base_colors[4][3] = {
        {0.85f, 0.30f, 0.30f},
        {0.30f, 0.85f, 0.30f},
        {0.30f, 0.40f, 0.85f},
        {0.80f, 0.75f, 0.25f},
    };
    float fg[3], bg[3];
    const float bg_level = 0.10f + 0.15f * u();
    for (std::size_t c = 0; c < 3; ++c) {
        fg[c] = base_colors[cls % 4][c] + 0.5f * (u() - 0.5f);
        bg[c] = bg_level + 0.10f * (u() - 0.5f);
    }

    const float cx = 5.0f + 6.0f * u();
    const float cy = 5.0f + 6.0f * u();
    const float radius = 3.0f + 2.5f * u();
    const float half = 3.0f + 3.0f * u();
    const float thick = u() < 0.5f ? 1.0f : 2.0f;
    const int period = u() < 0.5f ? 3 : 4;
    const int phase = static_cast<int>(u() * static_cast<float>(period));
    const float diag_off = 4.0f * (u() - 0.5f);

    const std::uint64_t noise_seed = rng::derive(seed, 1);
    std::size_t noise_ctr = 0;

    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const float fx = static_cast<float>(x), fy = static_cast<float>(y);
            bool on = false;
            switch (cls % 4) {
                case 0: {
                    const float dx = fx - cx, dy = fy - cy;
                    on = dx * dx + dy * dy <= radius * radius;
                    break;
                }
                case 1: {
                    const float d = std::max(std::abs(fx - cx), std::abs(fy - cy));
                    on = d <= half && d > half - thick;
                    break;
                }
                case 2:
                    on = ((static_cast<int>(y) + phase) % period) <
                         (period + 1) / 2;
                    break;
                case 3: {
                    const float mid = static_cast<float>(W - 1) / 2.0f;
                    on = std::abs((fx - mid) - (fy - mid) + diag_off) <= 1.0f ||
                         std::abs((fx - mid) + (fy - mid) - diag_off) <= 1.0f;
                    break;
                }
            }
            for (std::size_t c = 0; c < C; ++c) {
                float v = on ? fg[c % 3] : bg[c % 3];
                v += 0.06f * static_cast<float>(rng::normal(noise_seed, noise_ctr++));
                img[c * H * W + y * W + x] = std::clamp(v, 0.0f, 1.0f);
            }
        }
}

RawSplit make_fixture_split(const FixtureSpec& spec, std::uint64_t split_seed,
                            std::size_t count) {
    RawSplit out;
    const std::size_t per = spec.dims[0] * spec.dims[1] * spec.dims[2];
    out.images.resize(count * per);
    out.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t cls = i % spec.class_count;
        out.labels[i] = static_cast<std::uint16_t>(cls);
        paint_fixture_image(out.images.data() + i * per, spec.dims, cls,
                            rng::derive(split_seed, i));
    }
    return out;
}

}  // namespace

void make_fixture(const std::string& out_dir, std::uint64_t seed, bool force,
                  const FixtureSpec& spec) {
    if (spec.train_count % spec.class_count != 0 || spec.test_count % spec.class_count != 0)
        throw std::invalid_argument("fixture: split sizes must be divisible by class count");
    if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force)
        throw std::invalid_argument("fixture: output directory " + out_dir +
                                    " is not empty (use force to overwrite)");
    std::map<std::string, RawSplit> splits;
    splits["train"] = make_fixture_split(spec, rng::derive(seed, 0), spec.train_count);
    splits["test"] = make_fixture_split(spec, rng::derive(seed, 1), spec.test_count);
    std::map<std::string, std::string> meta;
    meta["generator"] = "procedural_shapes_v1";
    meta["seed"] = std::to_string(seed);
    write_dataset_dir(out_dir, "fixture", spec.class_count, spec.dims,
                      std::vector<float>(spec.dims[0], 0.5f),
                      std::vector<float>(spec.dims[0], 0.5f), splits, meta);
}

// ---------------------------------------------------------------------------
// PPM export
// ---------------------------------------------------------------------------

namespace {

// Per-image min-max to [0,255]; a constant image maps to all zeros.
std::vector<std::uint8_t> quantize_image(const float* img, std::array<std::size_t, 3> dims) {
    const std::size_t per = dims[0] * dims[1] * dims[2];
    float lo = img[0], hi = img[0];
    for (std::size_t i = 1; i < per; ++i) {
        lo = std::min(lo, img[i]);
        hi = std::max(hi, img[i]);
    }
    const std::size_t hw = dims[1] * dims[2];
    std::vector<std::uint8_t> rgb(hw * 3, 0);
    if (hi > lo) {
        const float s = 255.0f / (hi - lo);
        for (std::size_t k = 0; k < hw; ++k)
            for (std::size_t c = 0; c < 3; ++c) {
                const std::size_t src_c = dims[0] >= 3 ? c : 0;
                const float v = (img[src_c * hw + k] - lo) * s;
                rgb[k * 3 + c] =
                    static_cast<std::uint8_t>(std::clamp(v + 0.5f, 0.0f, 255.0f));
            }
    }
    return rgb;
}

void write_ppm(const std::string& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& rgb) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("export: cannot open for writing: " + path);
    f << "P6\n" << width << " " << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!f) throw std::runtime_error("export: write failed: " + path);
}

}  // namespace

void export_images(const SyntheticDataset& ds, const std::string& out_dir,
                   std::size_t per_class_limit) {
    fs::create_directories(out_dir);
    const std::size_t per = ds.dims[0] * ds.dims[1] * ds.dims[2];
    const std::size_t H = ds.dims[1], W = ds.dims[2];

    std::vector<std::size_t> class_counter(ds.class_count, 0);
    std::vector<std::vector<std::vector<std::uint8_t>>> by_class(ds.class_count);
    for (std::size_t i = 0; i < ds.count(); ++i) {
        const std::size_t cls = ds.labels[i];
        if (class_counter[cls] >= per_class_limit) continue;
        auto rgb = quantize_image(ds.images.data() + i * per, ds.dims);
        const std::string name =
            std::to_string(cls) + "_" + std::to_string(class_counter[cls]) + ".ppm";
        write_ppm((fs::path(out_dir) / name).string(), H, W, rgb);
        by_class[cls].push_back(std::move(rgb));
        ++class_counter[cls];
    }

    // Row-per-class montage over the exported samples.
    std::size_t cols = 0;
    for (const auto& v : by_class) cols = std::max(cols, v.size());
    if (cols == 0) return;
    const std::size_t grid_h = ds.class_count * H, grid_w = cols * W;
    std::vector<std::uint8_t> grid(grid_h * grid_w * 3, 0);
    for (std::size_t cls = 0; cls < ds.class_count; ++cls)
        for (std::size_t j = 0; j < by_class[cls].size(); ++j)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    for (std::size_t c = 0; c < 3; ++c)
                        grid[((cls * H + y) * grid_w + j * W + x) * 3 + c] =
                            by_class[cls][j][(y * W + x) * 3 + c];
    write_ppm((fs::path(out_dir) / "grid.ppm").string(), grid_h, grid_w, grid);
}

}  // namespace bninvert
