#pragma once

// SYND v1 dataset persistence. A dataset directory holds a UTF-8
// key=value manifest plus binary blobs: image blob = magic `SYND`, u32
// version, u32 count, u32 C/H/W, raw f32 LE values image-major; label
// blob = magic `SYNL`, u32 count, u16 LE labels. The manifest records
// per-split blob names, counts, CRC32s, per-channel normalization and
// free-form meta.* provenance keys.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bninvert/synthesis.hpp"

namespace bninvert {

struct Dataset {
    std::string name;
    std::size_t class_count = 0;
    std::array<std::size_t, 3> dims{};  // C, H, W
    std::vector<float> images;          // normalized, image-major
    std::vector<std::uint16_t> labels;
    std::vector<float> norm_mean;
    std::vector<float> norm_std;
    std::size_t count() const { return labels.size(); }
    std::size_t image_size() const { return dims[0] * dims[1] * dims[2]; }
};

struct ManifestSplit {
    std::string images_file;
    std::string labels_file;
    std::size_t count = 0;
    std::uint32_t images_crc32 = 0;
    std::uint32_t labels_crc32 = 0;
};

struct Manifest {
    std::string name;
    std::size_t class_count = 0;
    std::array<std::size_t, 3> dims{};
    std::vector<float> norm_mean;
    std::vector<float> norm_std;
    std::map<std::string, ManifestSplit> splits;
    std::map<std::string, std::string> meta;
};

void write_manifest(const std::string& path, const Manifest& m);
Manifest read_manifest(const std::string& path);

void write_image_blob(const std::string& path, std::array<std::size_t, 3> dims,
                      const std::vector<float>& images);
void write_label_blob(const std::string& path, const std::vector<std::uint16_t>& labels);

// Raw (unnormalized) split contents for a dataset directory writer.
struct RawSplit {
    std::vector<float> images;
    std::vector<std::uint16_t> labels;
};

// Writes blobs + manifest into dir; blob files are named
// <split>_images.bin / <split>_labels.bin.
void write_dataset_dir(const std::string& dir, const std::string& name,
                       std::size_t class_count, std::array<std::size_t, 3> dims,
                       const std::vector<float>& norm_mean, const std::vector<float>& norm_std,
                       const std::map<std::string, RawSplit>& splits,
                       const std::map<std::string, std::string>& meta);

// Loads one split, verifying blob CRC32s and label range, and applies
// the manifest's per-channel normalization.
Dataset load_dataset(const std::string& manifest_path, const std::string& split = "train");

// Persist a synthesized dataset (single "train" split, identity
// normalization: synthetic images already live in normalized space).
void save_synthetic_dataset(const std::string& dir, const SyntheticDataset& ds);

// Procedural fixture: 4 classes of 3x16x16 colored shapes, 2000 train /
// 500 test, byte-reproducible for a given seed.
struct FixtureSpec {
    std::size_t class_count = 4;
    std::array<std::size_t, 3> dims{3, 16, 16};
    std::size_t train_count = 2000;
    std::size_t test_count = 500;
};

void make_fixture(const std::string& out_dir, std::uint64_t seed, bool force = false,
                  const FixtureSpec& spec = {});

// PPM export: one P6 file per image named <class>_<index>.ppm with
// per-image min-max normalization (degenerate range maps to 0), plus a
// grid.ppm montage with one row per class.
void export_images(const SyntheticDataset& ds, const std::string& out_dir,
                   std::size_t per_class_limit = static_cast<std::size_t>(-1));

}  // namespace bninvert
