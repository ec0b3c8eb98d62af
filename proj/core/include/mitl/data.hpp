#ifndef MITL_DATA_HPP
#define MITL_DATA_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "mitl/tensor.hpp"

namespace mitl {

enum class Label : uint8_t { Typical = 0, Atypical = 1 };

const char* to_string(Label label);
Label label_from_string(const std::string& s);

// Class id written into pixel class maps for a given image-level label.
inline int pixel_class_of(Label label) { return label == Label::Typical ? 1 : 2; }

struct PointAnnotation {
    int center_x = 0;
    int center_y = 0;
};

// One annotated patch. Masks share the patch's spatial dimensions:
//   binary_mask      [1,1,H,W], values {0,1}
//   pixel_class_map  [1,1,H,W], values {0=background, 1=typical, 2=atypical}
// The class map is nonzero exactly on the binary mask support.
struct Sample {
    std::string sample_id;
    std::string domain;
    Label label = Label::Typical;
    Tensor patch; // [1,3,H,W] in [0,1]
    Tensor binary_mask;
    Tensor pixel_class_map;
};

// Manifest entry; refs are either paths relative to the manifest directory or
// "seed:<u64>" descriptors resolved through the manifest's generator block.
struct SampleDesc {
    std::string id;
    std::string domain;
    Label label = Label::Typical;
    std::string patch_ref;
    std::string mask_ref;
};

struct ClassCount {
    int typical = 0;
    int atypical = 0;
    bool operator==(const ClassCount&) const = default;
};

struct SyntheticSpec {
    int domains = 7;
    int per_domain = 40;
    double atypical_ratio = 0.25;
    int patch_size = 64;
    bool operator==(const SyntheticSpec&) const = default;
};

struct DatasetManifest {
    std::vector<std::string> domains; // ordered, unique
    std::map<std::string, ClassCount> class_counts;
    std::vector<SampleDesc> samples;
    std::optional<SyntheticSpec> genspec; // present when samples may carry seed refs
    uint64_t gen_seed = 0;
    std::filesystem::path base_dir; // directory refs resolve against

    int domain_index(const std::string& domain) const; // -1 when absent
    ClassCount counts_over(const std::vector<std::string>& domains) const;

    bool operator==(const DatasetManifest& o) const {
        return domains == o.domains && class_counts == o.class_counts && equal_samples(o) &&
               genspec == o.genspec && gen_seed == o.gen_seed;
    }

private:
    bool equal_samples(const DatasetManifest& o) const;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Point-to-mask provider contract: connected {0,1} mask containing the point.
// The built-in provider grows a 4-connected region from the annotation by
// intensity similarity, clipped to a disk of radius 2*radius_hint.
Tensor mask_from_point(const Tensor& patch, PointAnnotation point, int radius_hint);

Tensor derive_pixel_class_map(const Tensor& binary_mask, Label label);

// Deterministic synthetic domain-shift dataset. Domains differ in background
// statistics (base color, texture frequency); the object class differs only
// in blob shape (typical: one smooth ellipse, atypical: a lobed union with a
// concave waist). Ground-truth masks are exact by construction.
//
// The returned manifest carries seed refs plus the generator block, so it is
// self-contained without touching disk; materialize() resolves every sample
// to raster files and rewrites the refs to paths.
DatasetManifest generate_synthetic(const SyntheticSpec& spec, uint64_t seed);
DatasetManifest materialize(const DatasetManifest& manifest, const std::filesystem::path& out_dir);

Sample load_sample(const DatasetManifest& manifest, size_t index);

// Thread-safe lazy sample cache. Every first materialization of a sample is
// recorded, which lets tests assert which domains a consumer touched.
class SampleStore {
public:
    explicit SampleStore(DatasetManifest manifest);

    const DatasetManifest& manifest() const { return manifest_; }
    size_t size() const { return manifest_.samples.size(); }
    const SampleDesc& desc(size_t index) const { return manifest_.samples[index]; }

    const Sample& get(size_t index) const;

    std::vector<size_t> access_log() const;

    // Sample indices whose domain is in the given set, in manifest order.
    std::vector<size_t> indices_of(const std::vector<std::string>& domains) const;

private:
    DatasetManifest manifest_;
    mutable std::mutex mu_;
    mutable std::vector<std::unique_ptr<Sample>> cache_;
    mutable std::vector<size_t> log_;
};

} // namespace mitl

#endif
